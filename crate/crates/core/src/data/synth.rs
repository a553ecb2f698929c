//! Synthetic subsets with planted concepts.
//!
//! Each concept has a unit-norm prototype direction in feature space and owns
//! a disjoint block of topical tokens. Subsets of the same concept differ only
//! by image noise and by the tokens drawn for their captions, so several
//! subsets share one "similar" concept while each subset is "identical"
//! internally.

use super::{Dataset, Split, SubsetRecord};
use crate::error::{Error, Result};
use crate::numerics::l2_normalize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Probability that a caption token is drawn from its concept's topical block
/// rather than from the shared common block.
const TOPICAL_PROB: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_concepts: usize,
    pub subsets_per_concept: usize,
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub tokens_per_caption: usize,
    pub k: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_concepts: 50,
            subsets_per_concept: 20,
            feat_dim: 32,
            vocab_size: 500,
            tokens_per_caption: 8,
            k: 5,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Size of the shared common-token block: the first fifth of the vocabulary.
    pub fn common_tokens(&self) -> usize {
        (self.vocab_size / 5).max(1)
    }

    pub fn topical_block(&self) -> usize {
        self.vocab_size.saturating_sub(self.common_tokens()) / self.n_concepts.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_concepts", self.n_concepts),
            ("subsets_per_concept", self.subsets_per_concept),
            ("feat_dim", self.feat_dim),
            ("vocab_size", self.vocab_size),
            ("tokens_per_caption", self.tokens_per_caption),
            ("k", self.k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::SpecInvalid(format!("{name} must be positive")));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::SpecInvalid(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.topical_block() == 0 {
            return Err(Error::SpecInvalid(format!(
                "vocab_size {} leaves no topical tokens for {} concepts",
                self.vocab_size, self.n_concepts
            )));
        }
        Ok(())
    }
}

/// A generated dataset together with the planted concept of every subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub concept_labels: Vec<usize>,
}

impl SyntheticData {
    /// Holds out the last `test_per_concept` subsets of every concept.
    pub fn split_holdout(&self, test_per_concept: usize) -> Result<(SyntheticData, SyntheticData)> {
        let mut seen = vec![0usize; self.concept_labels.iter().max().map_or(0, |m| m + 1)];
        let per_concept: Vec<usize> = {
            let mut c = seen.clone();
            self.concept_labels.iter().for_each(|&l| c[l] += 1);
            c
        };
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &l) in self.concept_labels.iter().enumerate() {
            seen[l] += 1;
            if seen[l] > per_concept[l].saturating_sub(test_per_concept) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        let pick = |idx: &[usize], split| -> Result<SyntheticData> {
            Ok(SyntheticData {
                dataset: self.dataset.select(idx, split)?,
                concept_labels: idx.iter().map(|&i| self.concept_labels[i]).collect(),
            })
        };
        Ok((pick(&train, Split::Train)?, pick(&test, Split::Test)?))
    }
}

/// Image features are rounded to f32 so that writing and re-reading the
/// feature file reproduces them exactly.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let prototypes: Vec<Vec<f64>> = (0..spec.n_concepts)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.feat_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if let Ok(u) = l2_normalize(&v) {
                break u;
            }
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::SpecInvalid(e.to_string()))?;
    let common = spec.common_tokens();
    let block = spec.topical_block();

    let mut records = Vec::with_capacity(spec.n_concepts * spec.subsets_per_concept);
    let mut labels = Vec::with_capacity(records.capacity());
    for (g, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.subsets_per_concept {
            let image_feat: Vec<f64> = proto
                .iter()
                .map(|&p| {
                    let e = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    f64::from((p + e) as f32)
                })
                .collect();
            let captions = (0..spec.k)
                .map(|_| {
                    (0..spec.tokens_per_caption)
                        .map(|_| {
                            if rng.random_bool(TOPICAL_PROB) {
                                common + g * block + rng.random_range(0..block)
                            } else {
                                rng.random_range(0..common)
                            }
                        })
                        .collect()
                })
                .collect();
            records.push(SubsetRecord {
                subset_index: records.len(),
                image_feat,
                captions,
            });
            labels.push(g);
        }
    }
    Ok(SyntheticData {
        dataset: Dataset::new(records, spec.vocab_size, Split::Train)?,
        concept_labels: labels,
    })
}

/// Token strings for a synthetic vocabulary: `common_<i>` then `c<g>_<j>`.
pub fn synthetic_vocab(spec: &SyntheticSpec) -> Vec<String> {
    let common = spec.common_tokens();
    let block = spec.topical_block();
    (0..spec.vocab_size)
        .map(|t| {
            if t < common {
                format!("common_{t}")
            } else if (t - common) / block < spec.n_concepts {
                format!("c{}_{}", (t - common) / block, (t - common) % block)
            } else {
                format!("unused_{t}")
            }
        })
        .collect()
}
