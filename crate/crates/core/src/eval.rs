//! Exhaustive retrieval in the joint space and recall at K.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{assign_soft, embed_caption, embed_image, ModelParams};
use crate::numerics::{sq_dist, Matrix};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image query, caption corpus.
    Annotation,
    /// Caption query, image corpus.
    Search,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Annotation => "annotation",
            Direction::Search => "search",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recalls: Vec<(usize, f64)>,
    /// Median (lower) 1-based rank of the first correct item. Diagnostic only.
    pub median_rank: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn ks(&self) -> Vec<usize> {
        self.recalls.iter().map(|(k, _)| *k).collect()
    }
}

/// Corpus indices sorted by ascending squared distance to `query`; ties go to
/// the lower index.
pub fn rank_items(query: &[f64], corpus: &Matrix) -> Result<Vec<usize>> {
    if query.len() != corpus.cols() {
        return Err(Error::DimMismatch {
            expected: corpus.cols(),
            got: query.len(),
        });
    }
    let d: Vec<f64> = corpus.iter_rows().map(|r| sq_dist(query, r)).collect();
    let mut idx: Vec<usize> = (0..corpus.rows()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ok(idx)
}

/// 1-based rank of the first ground-truth item in `ranking`.
fn first_hit(ranking: &[usize], gt: &[usize]) -> Option<usize> {
    ranking.iter().position(|i| gt.contains(i)).map(|p| p + 1)
}

/// Fraction of queries with at least one ground-truth item in the top `k`.
pub fn recall_at_k(rankings: &[Vec<usize>], ground_truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if rankings.len() != ground_truth.len() {
        return Err(Error::DimMismatch {
            expected: rankings.len(),
            got: ground_truth.len(),
        });
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, (r, gt)) in rankings.iter().zip(ground_truth).enumerate() {
        if gt.is_empty() {
            return Err(Error::EmptyGroundTruth(q));
        }
        if r.iter().take(k).any(|i| gt.contains(i)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

pub fn median_rank(rankings: &[Vec<usize>], ground_truth: &[Vec<usize>]) -> usize {
    let mut ranks: Vec<usize> = rankings
        .iter()
        .zip(ground_truth)
        .map(|(r, gt)| first_hit(r, gt).unwrap_or(r.len() + 1))
        .collect();
    if ranks.is_empty() {
        return 0;
    }
    ranks.sort_unstable();
    ranks[(ranks.len() - 1) / 2]
}

fn report(direction: Direction, rankings: &[Vec<usize>], gt: &[Vec<usize>], ks: &[usize]) -> Result<RetrievalReport> {
    let recalls = ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(rankings, gt, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport {
        direction,
        recalls,
        median_rank: median_rank(rankings, gt),
    })
}

/// Embeds every image and caption of `dataset` and returns the annotation
/// and search reports.
pub fn evaluate_retrieval(
    params: &ModelParams,
    dataset: &Dataset,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if params.dims().feat_dim != dataset.feat_dim() {
        return Err(Error::DimMismatch {
            expected: params.dims().feat_dim,
            got: dataset.feat_dim(),
        });
    }
    let (images, captions) = embed_dataset(params, dataset)?;
    let k = dataset.k();

    let mut ann_rank = Vec::with_capacity(images.rows());
    let mut ann_gt = Vec::with_capacity(images.rows());
    for (n, q) in images.iter_rows().enumerate() {
        ann_rank.push(rank_items(q, &captions)?);
        ann_gt.push((n * k..n * k + k).collect());
    }
    let mut search_rank = Vec::with_capacity(captions.rows());
    let mut search_gt = Vec::with_capacity(captions.rows());
    for (j, q) in captions.iter_rows().enumerate() {
        search_rank.push(rank_items(q, &images)?);
        search_gt.push(vec![j / k]);
    }
    Ok((
        report(Direction::Annotation, &ann_rank, &ann_gt, ks)?,
        report(Direction::Search, &search_rank, &search_gt, ks)?,
    ))
}

/// Image embeddings (one row per subset) and caption embeddings (subset-major,
/// `K` rows per subset).
pub fn embed_dataset(params: &ModelParams, dataset: &Dataset) -> Result<(Matrix, Matrix)> {
    let images = dataset
        .records()
        .iter()
        .map(|r| embed_image(params, &r.image_feat))
        .collect::<Result<Vec<_>>>()?;
    let captions = dataset
        .records()
        .iter()
        .flat_map(|r| r.captions.iter())
        .map(|c| embed_caption(params, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((Matrix::from_rows(&images)?, Matrix::from_rows(&captions)?))
}

/// Purity of the argmax soft assignment of every image embedding against
/// planted concept labels: each quantized center votes for its majority
/// concept and purity is the fraction of subsets matching their center's vote.
pub fn assignment_purity(params: &ModelParams, dataset: &Dataset, concept_labels: &[usize]) -> Result<f64> {
    if concept_labels.len() != dataset.len() {
        return Err(Error::DimMismatch {
            expected: dataset.len(),
            got: concept_labels.len(),
        });
    }
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let n_q = params.dims().n_quant;
    let n_concepts = concept_labels.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; n_concepts]; n_q];
    for (r, &c) in dataset.records().iter().zip(concept_labels) {
        let w = assign_soft(params, &embed_image(params, &r.image_feat)?);
        table[argmax(&w)][c] += 1;
    }
    let correct: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(correct as f64 / dataset.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn report_csv(reports: &[&RetrievalReport]) -> String {
    let mut s = String::from("direction,K,recall\n");
    for r in reports {
        for (k, v) in &r.recalls {
            s.push_str(&format!("{},{},{}\n", r.direction, k, v));
        }
    }
    s
}

/// Human-readable table, one row per direction, recalls as percentages.
pub fn report_table(annotation: &RetrievalReport, search: &RetrievalReport) -> String {
    let ks = annotation.ks();
    let mut s = format!("{:<12}", "");
    for k in &ks {
        s.push_str(&format!("{:>8}", format!("r@{k}")));
    }
    s.push_str(&format!("{:>10}\n", "med r"));
    for r in [annotation, search] {
        s.push_str(&format!("{:<12}", r.direction.to_string()));
        for (_, v) in &r.recalls {
            s.push_str(&format!("{:>8.1}", 100.0 * v));
        }
        s.push_str(&format!("{:>10}\n", r.median_rank));
    }
    s
}
