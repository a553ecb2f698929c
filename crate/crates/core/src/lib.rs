//! Joint image-text embedding with semantic center losses.
//!
//! Images (as precomputed backbone features) and captions (as token sequences)
//! are mapped into a shared unit-norm space. Training combines a per-subset
//! center loss, a soft-quantized center loss with center repulsion, a symmetric
//! triplet loss with adaptive margins and two cross-entropy heads. Retrieval is
//! evaluated with recall at K in both directions.

// `!(x > y)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use data::{Dataset, NegativeMode, Split, SubsetRecord, SyntheticData, SyntheticSpec, TripletBatch};
pub use error::{Error, Result};
pub use eval::{Direction, RetrievalReport};
pub use losses::{LossBreakdown, LossConfig};
pub use model::{CenterBank, ModelDims, ModelParams};
pub use numerics::Matrix;
pub use training::{MarginState, PhasePlan, TrainConfig};
