//! Loss functions over batches of unit-norm embeddings.
//!
//! All reductions are plain sums over the batch. Distances are squared
//! Euclidean. Every hinge `(a)₊` is reported through its argument `a` by the
//! `*_terms` helpers so callers can inspect which terms are active; the
//! subgradient at `a = 0` is taken as 0.

use crate::error::{Error, Result};
use crate::model::CenterBank;
use crate::numerics::{log_sum_exp, softmax, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Hinge slack inside which the center losses apply no pull.
    pub delta: f64,
    /// Weight of the center repulsion term.
    pub alpha: f64,
    /// Initial / fixed triplet margin.
    pub margin_fixed: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            alpha: 1.0,
            margin_fixed: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !(self.alpha >= 0.0) || !(self.margin_fixed >= 0.0) {
            return Err(Error::Config(format!(
                "delta, alpha and margin must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The four parts of the total objective and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_center: f64,
    pub l_triplet: f64,
    pub l_ce_img: f64,
    pub l_ce_txt: f64,
    pub total: f64,
}

#[inline]
fn relu(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

fn check_cols(m: &Matrix, d: usize) -> Result<()> {
    if m.rows() > 0 && m.cols() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: m.cols(),
        });
    }
    Ok(())
}

fn check_rows(m: &Matrix, n: usize) -> Result<()> {
    if m.rows() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: m.rows(),
        });
    }
    Ok(())
}

fn require_bank(bank: &CenterBank, quantized: bool) -> Result<()> {
    if bank.quantized != quantized {
        return Err(Error::WrongBank {
            expected: if quantized { "quantized" } else { "unquantized" },
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-subset center loss

fn check_center_inputs(img: &Matrix, txt: &Matrix, labels: &[usize], bank: &CenterBank) -> Result<()> {
    require_bank(bank, false)?;
    check_rows(img, labels.len())?;
    check_rows(txt, labels.len())?;
    check_cols(img, bank.dim())?;
    check_cols(txt, bank.dim())?;
    if let Some(&label) = labels.iter().find(|&&l| l >= bank.len()) {
        return Err(Error::LabelOutOfRange {
            label,
            n: bank.len(),
        });
    }
    Ok(())
}

/// Hinge arguments `‖x̂ᵢ − c_lᵢ‖² − δ` and `‖ŷᵢ − c_lᵢ‖² − δ`.
pub fn center_terms(
    img: &Matrix,
    txt: &Matrix,
    labels: &[usize],
    bank: &CenterBank,
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_center_inputs(img, txt, labels, bank)?;
    let c = &bank.centers;
    let ti = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(img.row(i), c.row(l)) - delta)
        .collect();
    let tt = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(txt.row(i), c.row(l)) - delta)
        .collect();
    Ok((ti, tt))
}

/// Both modalities of sample i are pulled toward the same center `c_lᵢ`.
pub fn center_loss(img: &Matrix, txt: &Matrix, labels: &[usize], bank: &CenterBank, delta: f64) -> Result<f64> {
    let (ti, tt) = center_terms(img, txt, labels, bank, delta)?;
    Ok(ti.iter().zip(&tt).map(|(a, b)| relu(*a) + relu(*b)).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterGrads {
    pub img: Matrix,
    pub txt: Matrix,
    pub centers: Matrix,
}

pub fn center_loss_grad(
    img: &Matrix,
    txt: &Matrix,
    labels: &[usize],
    bank: &CenterBank,
    delta: f64,
) -> Result<CenterGrads> {
    let (ti, tt) = center_terms(img, txt, labels, bank, delta)?;
    let d = bank.dim();
    let mut g = CenterGrads {
        img: Matrix::zeros(img.rows(), d),
        txt: Matrix::zeros(txt.rows(), d),
        centers: Matrix::zeros(bank.len(), d),
    };
    let c = &bank.centers;
    for (i, &l) in labels.iter().enumerate() {
        for (emb, gemb, active) in [(img, &mut g.img, ti[i] > 0.0), (txt, &mut g.txt, tt[i] > 0.0)] {
            if !active {
                continue;
            }
            for k in 0..d {
                let diff = 2.0 * (emb[(i, k)] - c[(l, k)]);
                gemb[(i, k)] += diff;
                g.centers[(l, k)] -= diff;
            }
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Quantized center loss

fn check_weights(w: &Matrix, rows: usize, nq: usize) -> Result<()> {
    check_rows(w, rows)?;
    if rows > 0 && w.cols() != nq {
        return Err(Error::DimMismatch {
            expected: nq,
            got: w.cols(),
        });
    }
    for (row, r) in w.iter_rows().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::WeightsNotNormalized { row, sum });
        }
    }
    Ok(())
}

/// Hinge arguments of the data terms: entry (i, j) is `‖eᵢ − ĉⱼ‖² − δ`.
pub fn quantized_data_terms(emb: &Matrix, bank: &CenterBank, delta: f64) -> Result<Matrix> {
    check_cols(emb, bank.dim())?;
    let mut t = Matrix::zeros(emb.rows(), bank.len());
    for (i, e) in emb.iter_rows().enumerate() {
        for (j, c) in bank.centers.iter_rows().enumerate() {
            t[(i, j)] = sq_dist(e, c) - delta;
        }
    }
    Ok(t)
}

/// Hinge arguments `2δ − ‖ĉ_k1 − ĉ_k2‖²` over unordered pairs `k1 < k2`, in
/// row-major pair order.
pub fn repulsion_terms(centers: &Matrix, delta: f64) -> Vec<f64> {
    let m = centers.rows();
    let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for a in 0..m {
        for b in a + 1..m {
            out.push(2.0 * delta - sq_dist(centers.row(a), centers.row(b)));
        }
    }
    out
}

pub fn repulsion_loss(centers: &Matrix, delta: f64, alpha: f64) -> f64 {
    alpha * repulsion_terms(centers, delta).into_iter().map(relu).sum::<f64>()
}

/// Gradient of [`repulsion_loss`] with respect to the centers.
pub fn repulsion_grad(centers: &Matrix, delta: f64, alpha: f64) -> Matrix {
    let m = centers.rows();
    let mut g = Matrix::zeros(m, centers.cols());
    for a in 0..m {
        for b in a + 1..m {
            let arg = 2.0 * delta - sq_dist(centers.row(a), centers.row(b));
            if arg <= 0.0 {
                continue;
            }
            for k in 0..centers.cols() {
                let diff = 2.0 * alpha * (centers[(a, k)] - centers[(b, k)]);
                g[(a, k)] -= diff;
                g[(b, k)] += diff;
            }
        }
    }
    g
}

/// Soft-assignment-weighted center loss plus pairwise center repulsion.
pub fn quantized_center_loss(
    img: &Matrix,
    txt: &Matrix,
    w_img: &Matrix,
    w_txt: &Matrix,
    bank: &CenterBank,
    delta: f64,
    alpha: f64,
) -> Result<f64> {
    require_bank(bank, true)?;
    check_weights(w_img, img.rows(), bank.len())?;
    check_weights(w_txt, txt.rows(), bank.len())?;
    let mut total = 0.0;
    for (emb, w) in [(img, w_img), (txt, w_txt)] {
        let t = quantized_data_terms(emb, bank, delta)?;
        total += t
            .as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(a, wij)| wij * relu(*a))
            .sum::<f64>();
    }
    Ok(total + repulsion_loss(&bank.centers, delta, alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGrads {
    pub img: Matrix,
    pub txt: Matrix,
    /// Gradient with respect to the soft weights (before the softmax).
    pub w_img: Matrix,
    pub w_txt: Matrix,
    pub centers: Matrix,
}

pub fn quantized_center_grad(
    img: &Matrix,
    txt: &Matrix,
    w_img: &Matrix,
    w_txt: &Matrix,
    bank: &CenterBank,
    delta: f64,
    alpha: f64,
) -> Result<QuantizedGrads> {
    require_bank(bank, true)?;
    check_weights(w_img, img.rows(), bank.len())?;
    check_weights(w_txt, txt.rows(), bank.len())?;
    let (d, nq) = (bank.dim(), bank.len());
    let mut centers = repulsion_grad(&bank.centers, delta, alpha);
    let mut side = |emb: &Matrix, w: &Matrix| -> Result<(Matrix, Matrix)> {
        let t = quantized_data_terms(emb, bank, delta)?;
        let mut g_emb = Matrix::zeros(emb.rows(), d);
        let mut g_w = Matrix::zeros(emb.rows(), nq);
        for i in 0..emb.rows() {
            for j in 0..nq {
                let a = t[(i, j)];
                g_w[(i, j)] = relu(a);
                if a <= 0.0 {
                    continue;
                }
                let wij = w[(i, j)];
                for k in 0..d {
                    let diff = 2.0 * wij * (emb[(i, k)] - bank.centers[(j, k)]);
                    g_emb[(i, k)] += diff;
                    centers[(j, k)] -= diff;
                }
            }
        }
        Ok((g_emb, g_w))
    };
    let (g_img, g_wi) = side(img, w_img)?;
    let (g_txt, g_wt) = side(txt, w_txt)?;
    Ok(QuantizedGrads {
        img: g_img,
        txt: g_txt,
        w_img: g_wi,
        w_txt: g_wt,
        centers,
    })
}

// ---------------------------------------------------------------------------
// Triplet and contrastive losses

/// Inputs of the symmetric triplet loss. Row n of each matrix belongs to
/// triplet n: `(img, pos_txt, neg_txt)` for the image direction and
/// `(txt, pos_img, neg_img)` for the text direction.
#[derive(Debug, Clone, Copy)]
pub struct TripletInputs<'a> {
    pub img: &'a Matrix,
    pub pos_txt: &'a Matrix,
    pub neg_txt: &'a Matrix,
    pub txt: &'a Matrix,
    pub pos_img: &'a Matrix,
    pub neg_img: &'a Matrix,
}

impl TripletInputs<'_> {
    fn check(&self) -> Result<()> {
        let n = self.img.rows();
        let d = self.img.cols();
        for m in [self.pos_txt, self.neg_txt] {
            check_rows(m, n)?;
            check_cols(m, d)?;
        }
        let n = self.txt.rows();
        for m in [self.pos_img, self.neg_img] {
            check_rows(m, n)?;
        }
        for m in [self.txt, self.pos_img, self.neg_img] {
            check_cols(m, d)?;
        }
        Ok(())
    }
}

/// Hinge arguments `D(a, p) − D(a, n) + m` for each direction.
pub fn triplet_terms(inp: &TripletInputs<'_>, m_x: f64, m_y: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    inp.check()?;
    let dir = |a: &Matrix, p: &Matrix, n: &Matrix, m: f64| -> Vec<f64> {
        (0..a.rows())
            .map(|i| sq_dist(a.row(i), p.row(i)) - sq_dist(a.row(i), n.row(i)) + m)
            .collect()
    };
    Ok((
        dir(inp.img, inp.pos_txt, inp.neg_txt, m_x),
        dir(inp.txt, inp.pos_img, inp.neg_img, m_y),
    ))
}

pub fn triplet_adaptive(inp: &TripletInputs<'_>, m_x: f64, m_y: f64) -> Result<f64> {
    let (tx, ty) = triplet_terms(inp, m_x, m_y)?;
    Ok(tx.into_iter().map(relu).sum::<f64>() + ty.into_iter().map(relu).sum::<f64>())
}

/// Gradients of [`triplet_adaptive`] for the six inputs, in field order.
pub fn triplet_grad(inp: &TripletInputs<'_>, m_x: f64, m_y: f64) -> Result<[Matrix; 6]> {
    let (tx, ty) = triplet_terms(inp, m_x, m_y)?;
    let dir = |a: &Matrix, p: &Matrix, n: &Matrix, terms: &[f64]| {
        let d = a.cols();
        let mut ga = Matrix::zeros(a.rows(), d);
        let mut gp = Matrix::zeros(a.rows(), d);
        let mut gn = Matrix::zeros(a.rows(), d);
        for (i, &t) in terms.iter().enumerate() {
            if t <= 0.0 {
                continue;
            }
            for k in 0..d {
                ga[(i, k)] = 2.0 * (n[(i, k)] - p[(i, k)]);
                gp[(i, k)] = -2.0 * (a[(i, k)] - p[(i, k)]);
                gn[(i, k)] = 2.0 * (a[(i, k)] - n[(i, k)]);
            }
        }
        (ga, gp, gn)
    };
    let (a, b, c) = dir(inp.img, inp.pos_txt, inp.neg_txt, &tx);
    let (e, f, g) = dir(inp.txt, inp.pos_img, inp.neg_img, &ty);
    Ok([a, b, c, e, f, g])
}

/// `Σ D(a, p) + Σ [m − D(a', n)]₊` over positive pairs `(anchors_pos, pos)`
/// and negative pairs `(anchors_neg, neg)`.
pub fn contrastive_baseline(
    anchors_pos: &Matrix,
    pos: &Matrix,
    anchors_neg: &Matrix,
    neg: &Matrix,
    m: f64,
) -> Result<f64> {
    check_rows(pos, anchors_pos.rows())?;
    check_rows(neg, anchors_neg.rows())?;
    check_cols(pos, anchors_pos.cols())?;
    check_cols(neg, anchors_neg.cols())?;
    let p: f64 = (0..pos.rows()).map(|i| sq_dist(anchors_pos.row(i), pos.row(i))).sum();
    let n: f64 = (0..neg.rows())
        .map(|i| relu(m - sq_dist(anchors_neg.row(i), neg.row(i))))
        .sum();
    Ok(p + n)
}

// ---------------------------------------------------------------------------
// Cross-entropy and aggregation

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n: logits.len(),
        });
    }
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

/// Unweighted sum of the four parts.
pub fn total_loss(l_center: f64, l_triplet: f64, l_ce_img: f64, l_ce_txt: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_center", l_center),
        ("l_triplet", l_triplet),
        ("l_ce_img", l_ce_img),
        ("l_ce_txt", l_ce_txt),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinitePart(name));
        }
    }
    Ok(LossBreakdown {
        l_center,
        l_triplet,
        l_ce_img,
        l_ce_txt,
        total: l_center + l_triplet + l_ce_img + l_ce_txt,
    })
}

/// Fraction of triplets per direction whose hinge argument is strictly positive.
pub fn margin_ratios(img_terms: &[f64], txt_terms: &[f64]) -> Result<(f64, f64)> {
    if img_terms.is_empty() || txt_terms.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ratio = |t: &[f64]| t.iter().filter(|&&a| a > 0.0).count() as f64 / t.len() as f64;
    Ok((ratio(img_terms), ratio(txt_terms)))
}
