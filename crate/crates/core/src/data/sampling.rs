//! Epoch permutations and in-batch triplet construction.
//!
//! Every batch row `i` holds an anchor image and one of its captions. Negatives
//! are other rows of the same batch: the negative caption for image `i` is the
//! positive caption of some row `j` from a different subset, and the negative
//! image for caption `i` is the image of some such row. Negative embeddings are
//! therefore shared with the rows they come from.

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeMode {
    #[default]
    Random,
    HardestInBatch,
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMode::Random => "random",
            NegativeMode::HardestInBatch => "hardest",
        })
    }
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(NegativeMode::Random),
            "hardest" | "hardest_in_batch" => Ok(NegativeMode::HardestInBatch),
            other => Err(Error::Config(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    /// B × D_img anchor image features.
    pub anchors_img: Matrix,
    pub pos_captions: Vec<Vec<usize>>,
    pub subset_labels: Vec<usize>,
    /// Row whose positive caption is row i's negative caption.
    pub neg_caption_rows: Vec<usize>,
    /// Row whose image is the negative image for row i's caption.
    pub neg_image_rows: Vec<usize>,
    pub neg_subset_labels: Vec<usize>,
    pub neg_image_labels: Vec<usize>,
}

impl TripletBatch {
    /// Picks one uniformly random caption for each anchor subset. Negatives
    /// are left unassigned (pointing at the row itself) until
    /// [`TripletBatch::assign_negatives`] runs.
    pub fn draw_positives<R: Rng + ?Sized>(
        dataset: &Dataset,
        anchors: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        check_span(dataset, anchors)?;
        let feats: Vec<&[f64]> = anchors
            .iter()
            .map(|&n| dataset.record(n).image_feat.as_slice())
            .collect();
        let pos_captions = anchors
            .iter()
            .map(|&n| {
                let caps = &dataset.record(n).captions;
                caps[rng.random_range(0..caps.len())].clone()
            })
            .collect();
        let rows: Vec<usize> = (0..anchors.len()).collect();
        Ok(Self {
            anchors_img: Matrix::from_rows(&feats)?,
            pos_captions,
            subset_labels: anchors.to_vec(),
            neg_caption_rows: rows.clone(),
            neg_image_rows: rows,
            neg_subset_labels: anchors.to_vec(),
            neg_image_labels: anchors.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.subset_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset_labels.is_empty()
    }

    /// Negative caption tokens for row `i`.
    pub fn neg_caption(&self, i: usize) -> &[usize] {
        &self.pos_captions[self.neg_caption_rows[i]]
    }

    /// Chooses in-batch negatives. `embeddings` holds the current image and
    /// caption embeddings of the batch rows (in row order) and is required by
    /// [`NegativeMode::HardestInBatch`]; ties go to the lowest row.
    pub fn assign_negatives<R: Rng + ?Sized>(
        &mut self,
        mode: NegativeMode,
        rng: &mut R,
        embeddings: Option<(&Matrix, &Matrix)>,
    ) -> Result<()> {
        let b = self.len();
        for i in 0..b {
            let candidates: Vec<usize> = (0..b)
                .filter(|&j| self.subset_labels[j] != self.subset_labels[i])
                .collect();
            if candidates.is_empty() {
                return Err(Error::BatchTooSmall(1));
            }
            let (nc, ni) = match mode {
                NegativeMode::Random => (
                    candidates[rng.random_range(0..candidates.len())],
                    candidates[rng.random_range(0..candidates.len())],
                ),
                NegativeMode::HardestInBatch => {
                    let (img, txt) = embeddings.ok_or_else(|| {
                        Error::Config("hardest-in-batch sampling needs current embeddings".into())
                    })?;
                    if img.rows() != b || txt.rows() != b {
                        return Err(Error::DimMismatch {
                            expected: b,
                            got: img.rows().min(txt.rows()),
                        });
                    }
                    let closest = |q: &[f64], pool: &Matrix| {
                        let mut best = candidates[0];
                        let mut best_d = f64::INFINITY;
                        for &j in &candidates {
                            let d = sq_dist(q, pool.row(j));
                            if d < best_d {
                                best_d = d;
                                best = j;
                            }
                        }
                        best
                    };
                    (closest(img.row(i), txt), closest(txt.row(i), img))
                }
            };
            self.neg_caption_rows[i] = nc;
            self.neg_image_rows[i] = ni;
            self.neg_subset_labels[i] = self.subset_labels[nc];
            self.neg_image_labels[i] = self.subset_labels[ni];
        }
        Ok(())
    }
}

fn check_span(dataset: &Dataset, anchors: &[usize]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::BatchTooSmall(0));
    }
    if let Some(&bad) = anchors.iter().find(|&&n| n >= dataset.len()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            n: dataset.len(),
        });
    }
    let mut distinct = anchors.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::BatchTooSmall(distinct.len()));
    }
    Ok(())
}

/// Splits a seeded permutation of `0..n` into batches of `batch_size`. A
/// trailing batch of a single subset is folded into the one before it, so
/// every subset is an anchor exactly once per epoch.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 || n < 2 {
        return Err(Error::BatchTooSmall(n.min(batch_size)));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = perm.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    Ok(batches)
}

/// Draws a triplet batch over the given anchor subsets with random in-batch
/// negatives. Hardest-negative batches are built in two steps by the trainer
/// (positives, embed, then [`TripletBatch::assign_negatives`]).
pub fn sample_triplet_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    anchors: &[usize],
    rng: &mut R,
) -> Result<TripletBatch> {
    let mut batch = TripletBatch::draw_positives(dataset, anchors, rng)?;
    batch.assign_negatives(NegativeMode::Random, rng, None)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SyntheticSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n_concepts: usize, per: usize, seed: u64) -> Dataset {
        synth_dataset(&SyntheticSpec {
            n_concepts,
            subsets_per_concept: per,
            feat_dim: 4,
            vocab_size: 40,
            tokens_per_caption: 3,
            k: 3,
            noise_sigma: 0.1,
            seed,
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn two_subsets_negatives_are_each_other() {
        let ds = toy(1, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_triplet_batch(&ds, &[0, 1], &mut rng).unwrap();
        assert_eq!(b.neg_subset_labels, vec![1, 0]);
        assert_eq!(b.neg_image_labels, vec![1, 0]);
        assert_eq!(b.neg_caption(0), b.pos_captions[1].as_slice());
        assert!(ds.record(0).captions.contains(&b.pos_captions[0]));
    }

    #[test]
    fn single_subset_is_too_small() {
        let ds = toy(1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_triplet_batch(&ds, &[0], &mut rng),
            Err(Error::BatchTooSmall(_))
        ));
        assert!(matches!(epoch_batches(1, 32, &mut rng), Err(Error::BatchTooSmall(_))));
        let ds = toy(2, 2, 0);
        assert!(matches!(
            sample_triplet_batch(&ds, &[1, 1], &mut rng),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn hardest_matches_enumeration() {
        let ds = toy(2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = TripletBatch::draw_positives(&ds, &[0, 1, 2, 3], &mut rng).unwrap();
        let img = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.6, 0.8]]).unwrap();
        let txt = Matrix::from_rows(&[[0.8, 0.6], [0.0, -1.0], [-0.6, 0.8], [0.96, 0.28]]).unwrap();
        b.assign_negatives(NegativeMode::HardestInBatch, &mut rng, Some((&img, &txt)))
            .unwrap();
        for i in 0..4 {
            let mut best = (f64::INFINITY, usize::MAX);
            let mut best_img = (f64::INFINITY, usize::MAX);
            for j in (0..4).filter(|&j| j != i) {
                let d: f64 = (0..2).map(|k| (img[(i, k)] - txt[(j, k)]).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
                let d: f64 = (0..2).map(|k| (txt[(i, k)] - img[(j, k)]).powi(2)).sum();
                if d < best_img.0 {
                    best_img = (d, j);
                }
            }
            assert_eq!(b.neg_caption_rows[i], best.1, "row {i}");
            assert_eq!(b.neg_image_rows[i], best_img.1, "row {i}");
        }
        // image 0 is (1,0): foreign captions (0,-1),(−.6,.8),(.96,.28) → row 3
        assert_eq!(b.neg_caption_rows[0], 3);
    }

    #[test]
    fn hardest_without_embeddings_fails() {
        let ds = toy(2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = TripletBatch::draw_positives(&ds, &[0, 1], &mut rng).unwrap();
        assert!(b
            .assign_negatives(NegativeMode::HardestInBatch, &mut rng, None)
            .is_err());
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(9, 4, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
    }

    proptest! {
        #[test]
        fn negatives_never_share_label(seed in any::<u64>(), concepts in 1usize..4, per in 2usize..6, bs in 2usize..9) {
            let ds = toy(concepts, per, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for anchors in epoch_batches(ds.len(), bs, &mut rng).unwrap() {
                let b = sample_triplet_batch(&ds, &anchors, &mut rng).unwrap();
                for i in 0..b.len() {
                    prop_assert_ne!(b.neg_subset_labels[i], b.subset_labels[i]);
                    prop_assert_ne!(b.neg_image_labels[i], b.subset_labels[i]);
                }
            }
        }

        #[test]
        fn epoch_is_a_permutation(seed in any::<u64>(), n in 2usize..200, bs in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<usize> = epoch_batches(n, bs, &mut rng).unwrap().into_iter().flatten().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
