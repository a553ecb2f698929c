//! Subsets of one image plus K captions, their file formats, a synthetic
//! generator with planted concept structure, and triplet batch sampling.

mod io;
mod sampling;
mod synth;

pub use io::{
    load_captions, load_features, load_labels, load_vocab, read_features, write_captions,
    write_features, write_labels, write_vocab, Manifest, FEATURE_MAGIC,
};
pub use sampling::{epoch_batches, sample_triplet_batch, NegativeMode, TripletBatch};
pub use synth::{synth_dataset, synthetic_vocab, SyntheticData, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One image and its K semantically identical captions.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetRecord {
    pub subset_index: usize,
    pub image_feat: Vec<f64>,
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SubsetRecord>,
    vocab_size: usize,
    feat_dim: usize,
    k: usize,
    split: Split,
}

impl Dataset {
    /// Validates that records are indexed `0..N`, share K and the feature
    /// dimension, and only use tokens below `vocab_size`.
    pub fn new(records: Vec<SubsetRecord>, vocab_size: usize, split: Split) -> Result<Self> {
        let feat_dim = records.first().map_or(0, |r| r.image_feat.len());
        let k = records.first().map_or(0, |r| r.captions.len());
        for (i, r) in records.iter().enumerate() {
            if r.subset_index != i {
                return Err(Error::MalformedLine {
                    line: i,
                    reason: format!("subset index {} is not contiguous", r.subset_index),
                });
            }
            if r.image_feat.len() != feat_dim {
                return Err(Error::DimMismatch {
                    expected: feat_dim,
                    got: r.image_feat.len(),
                });
            }
            if r.captions.len() != k || k == 0 {
                return Err(Error::UnevenK {
                    subset: i,
                    expected: k,
                    got: r.captions.len(),
                });
            }
            for cap in &r.captions {
                if cap.is_empty() {
                    return Err(Error::EmptyCaption);
                }
                if let Some(&t) = cap.iter().find(|&&t| t >= vocab_size) {
                    return Err(Error::TokenOutOfRange {
                        token: t,
                        vocab_size,
                    });
                }
            }
            if let Some(p) = r.image_feat.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(i * feat_dim + p));
            }
        }
        Ok(Self {
            records,
            vocab_size,
            feat_dim,
            k,
            split,
        })
    }

    /// Assembles a dataset from a feature matrix (row n is subset n's image)
    /// and `(subset_index, tokens)` caption pairs in file order.
    pub fn from_parts(
        features: &Matrix,
        captions: Vec<(usize, Vec<usize>)>,
        vocab_size: usize,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        let mut grouped: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n];
        for (line, (idx, toks)) in captions.into_iter().enumerate() {
            if idx >= n {
                return Err(Error::MalformedLine {
                    line: line + 1,
                    reason: format!("subset {idx} has no image (only {n} features)"),
                });
            }
            grouped[idx].push(toks);
        }
        let records = grouped
            .into_iter()
            .enumerate()
            .map(|(i, caps)| SubsetRecord {
                subset_index: i,
                image_feat: features.row(i).to_vec(),
                captions: caps,
            })
            .collect();
        Self::new(records, vocab_size, split)
    }

    pub fn records(&self) -> &[SubsetRecord] {
        &self.records
    }

    pub fn record(&self, n: usize) -> &SubsetRecord {
        &self.records[n]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn feature_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.records.iter().map(|r| r.image_feat.as_slice()).collect();
        Matrix::from_rows(&rows).expect("records share feat_dim")
    }

    /// Every caption in subset order, paired with its subset index.
    pub fn caption_list(&self) -> Vec<(usize, Vec<usize>)> {
        self.records
            .iter()
            .flat_map(|r| r.captions.iter().map(move |c| (r.subset_index, c.clone())))
            .collect()
    }

    /// Keeps the listed subsets (in the given order) and renumbers them `0..`.
    pub fn select(&self, indices: &[usize], split: Split) -> Result<Self> {
        let records = indices
            .iter()
            .enumerate()
            .map(|(new, &old)| SubsetRecord {
                subset_index: new,
                ..self.records[old].clone()
            })
            .collect();
        Self::new(records, self.vocab_size, split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, caps: Vec<Vec<usize>>) -> SubsetRecord {
        SubsetRecord {
            subset_index: i,
            image_feat: vec![i as f64, 1.0],
            captions: caps,
        }
    }

    #[test]
    fn rejects_uneven_k_and_bad_tokens() {
        let r = vec![rec(0, vec![vec![1], vec![2]]), rec(1, vec![vec![1]])];
        assert!(matches!(
            Dataset::new(r, 10, Split::Train),
            Err(Error::UnevenK { subset: 1, .. })
        ));
        let r = vec![rec(0, vec![vec![12]])];
        assert!(matches!(
            Dataset::new(r, 10, Split::Train),
            Err(Error::TokenOutOfRange { token: 12, .. })
        ));
    }

    #[test]
    fn select_renumbers() {
        let r = vec![
            rec(0, vec![vec![1]]),
            rec(1, vec![vec![2]]),
            rec(2, vec![vec![3]]),
        ];
        let ds = Dataset::new(r, 10, Split::Train).unwrap();
        let sub = ds.select(&[2, 0], Split::Test).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.record(0).captions, vec![vec![3]]);
        assert_eq!(sub.record(1).subset_index, 1);
        assert_eq!(sub.split(), Split::Test);
    }
}
