//! Forward pass of the full training objective over a triplet batch and its
//! hand-written backward pass.
//!
//! The center term is the per-subset center loss when the bank is
//! unquantized and the soft-quantized center loss (with repulsion) when it is
//! quantized. Gradients of the quantized loss flow through the soft weights
//! into the quantization head and back into the embeddings.

use crate::data::TripletBatch;
use crate::error::{Error, Result};
use crate::losses::{
    self, cross_entropy, cross_entropy_grad, total_loss, LossBreakdown, LossConfig, TripletInputs,
};
use crate::model::{assign_soft, ce_logits, trace_caption, trace_image, Branch, CenterBank, EncoderTrace, ModelParams};
use crate::numerics::{axpy, Matrix};

/// Gradients for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ModelParams,
    pub centers: Matrix,
}

impl Gradients {
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.params.tensors() {
            if !t.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        if !self.centers.is_finite() {
            return Err(Error::NonFiniteGradient("centers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// Triplet hinge arguments, image direction.
    pub triplet_img: Vec<f64>,
    /// Triplet hinge arguments, text direction.
    pub triplet_txt: Vec<f64>,
    /// Every hinge argument in the objective, in a fixed order.
    pub hinge_args: Vec<f64>,
    pub grads: Option<Gradients>,
}

/// Forward state shared by the loss and gradient computations.
struct Forward {
    img: Vec<EncoderTrace>,
    txt: Vec<EncoderTrace>,
    x: Matrix,
    y: Matrix,
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let r: Vec<&[f64]> = rows.iter().map(|&i| m.row(i)).collect();
    let mut out = Matrix::from_rows(&r).expect("rows share width");
    if rows.is_empty() {
        out = Matrix::zeros(0, m.cols());
    }
    out
}

fn forward(params: &ModelParams, batch: &TripletBatch) -> Result<Forward> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let img = (0..batch.len())
        .map(|i| trace_image(params, batch.anchors_img.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let txt = batch
        .pos_captions
        .iter()
        .map(|c| trace_caption(params, c))
        .collect::<Result<Vec<_>>>()?;
    let x = Matrix::from_rows(&img.iter().map(|t| t.emb.as_slice()).collect::<Vec<_>>())?;
    let y = Matrix::from_rows(&txt.iter().map(|t| t.emb.as_slice()).collect::<Vec<_>>())?;
    Ok(Forward { img, txt, x, y })
}

/// Current image and caption embeddings of the batch rows.
pub fn batch_embeddings(params: &ModelParams, batch: &TripletBatch) -> Result<(Matrix, Matrix)> {
    let f = forward(params, batch)?;
    Ok((f.x, f.y))
}

fn soft_weights(params: &ModelParams, emb: &Matrix) -> Matrix {
    let rows: Vec<Vec<f64>> = emb.iter_rows().map(|e| assign_soft(params, e)).collect();
    if rows.is_empty() {
        return Matrix::zeros(0, params.w_q.cols());
    }
    Matrix::from_rows(&rows).expect("rows share width")
}

/// Evaluates the total objective for one batch with margins `(m_x, m_y)`.
pub fn evaluate(
    params: &ModelParams,
    bank: &CenterBank,
    batch: &TripletBatch,
    margins: (f64, f64),
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<Evaluation> {
    let f = forward(params, batch)?;
    let (x, y) = (&f.x, &f.y);
    let labels = &batch.subset_labels;
    let neg_txt = gather(y, &batch.neg_caption_rows);
    let neg_img = gather(x, &batch.neg_image_rows);
    let trip = TripletInputs {
        img: x,
        pos_txt: y,
        neg_txt: &neg_txt,
        txt: y,
        pos_img: x,
        neg_img: &neg_img,
    };
    let (tx, ty) = losses::triplet_terms(&trip, margins.0, margins.1)?;
    let l_triplet = losses::triplet_adaptive(&trip, margins.0, margins.1)?;

    let mut hinge_args = Vec::new();
    let (l_center, soft) = if bank.quantized {
        let wx = soft_weights(params, x);
        let wy = soft_weights(params, y);
        let l = losses::quantized_center_loss(x, y, &wx, &wy, bank, cfg.delta, cfg.alpha)?;
        hinge_args.extend_from_slice(losses::quantized_data_terms(x, bank, cfg.delta)?.as_slice());
        hinge_args.extend_from_slice(losses::quantized_data_terms(y, bank, cfg.delta)?.as_slice());
        hinge_args.extend(losses::repulsion_terms(&bank.centers, cfg.delta));
        (l, Some((wx, wy)))
    } else {
        let l = losses::center_loss(x, y, labels, bank, cfg.delta)?;
        let (ci, ct) = losses::center_terms(x, y, labels, bank, cfg.delta)?;
        hinge_args.extend(ci);
        hinge_args.extend(ct);
        (l, None)
    };
    hinge_args.extend_from_slice(&tx);
    hinge_args.extend_from_slice(&ty);

    let logits_img: Vec<Vec<f64>> = x.iter_rows().map(|e| ce_logits(params, e, Branch::Image)).collect();
    let logits_txt: Vec<Vec<f64>> = y.iter_rows().map(|e| ce_logits(params, e, Branch::Text)).collect();
    let mut l_ce_img = 0.0;
    let mut l_ce_txt = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        l_ce_img += cross_entropy(&logits_img[i], l)?;
        l_ce_txt += cross_entropy(&logits_txt[i], l)?;
    }
    let breakdown = total_loss(l_center, l_triplet, l_ce_img, l_ce_txt)?;

    let grads = if want_grad {
        let mut g = Gradients {
            params: params.zeros_like(),
            centers: Matrix::zeros(bank.len(), bank.dim()),
        };
        let d = x.cols();
        let b = batch.len();
        let mut gx = Matrix::zeros(b, d);
        let mut gy = Matrix::zeros(b, d);

        // triplet
        let [ga, gp, gn, ge, gf, gneg] = losses::triplet_grad(&trip, margins.0, margins.1)?;
        for i in 0..b {
            axpy(1.0, ga.row(i), gx.row_mut(i));
            axpy(1.0, gp.row(i), gy.row_mut(i));
            axpy(1.0, gn.row(i), gy.row_mut(batch.neg_caption_rows[i]));
            axpy(1.0, ge.row(i), gy.row_mut(i));
            axpy(1.0, gf.row(i), gx.row_mut(i));
            axpy(1.0, gneg.row(i), gx.row_mut(batch.neg_image_rows[i]));
        }

        // center term
        if let Some((wx, wy)) = &soft {
            let qg = losses::quantized_center_grad(x, y, wx, wy, bank, cfg.delta, cfg.alpha)?;
            add_into(&mut gx, &qg.img);
            add_into(&mut gy, &qg.txt);
            add_into(&mut g.centers, &qg.centers);
            for (emb, w, gw, gemb) in [(x, wx, &qg.w_img, &mut gx), (y, wy, &qg.w_txt, &mut gy)] {
                for i in 0..b {
                    let dlogit = softmax_backward(w.row(i), gw.row(i));
                    g.params.w_q.add_outer(1.0, emb.row(i), &dlogit);
                    axpy(1.0, &dlogit, g.params.b_q.row_mut(0));
                    let back = params.w_q.matvec(&dlogit);
                    axpy(1.0, &back, gemb.row_mut(i));
                }
            }
        } else {
            let cg = losses::center_loss_grad(x, y, labels, bank, cfg.delta)?;
            add_into(&mut gx, &cg.img);
            add_into(&mut gy, &cg.txt);
            add_into(&mut g.centers, &cg.centers);
        }

        // classification heads
        for i in 0..b {
            let dl = cross_entropy_grad(&logits_img[i], labels[i])?;
            g.params.w_ce_img.add_outer(1.0, x.row(i), &dl);
            axpy(1.0, &dl, g.params.b_ce_img.row_mut(0));
            axpy(1.0, &params.w_ce_img.matvec(&dl), gx.row_mut(i));

            let dl = cross_entropy_grad(&logits_txt[i], labels[i])?;
            g.params.w_ce_txt.add_outer(1.0, y.row(i), &dl);
            axpy(1.0, &dl, g.params.b_ce_txt.row_mut(0));
            axpy(1.0, &params.w_ce_txt.matvec(&dl), gy.row_mut(i));
        }

        // encoders
        for i in 0..b {
            let dz = f.img[i].normalize_backward(gx.row(i));
            g.params.w_img.add_outer(1.0, &f.img[i].input, &dz);
            axpy(1.0, &dz, g.params.b_img.row_mut(0));

            let dz = f.txt[i].normalize_backward(gy.row(i));
            g.params.w_txt.add_outer(1.0, &f.txt[i].input, &dz);
            axpy(1.0, &dz, g.params.b_txt.row_mut(0));
            let dpool = params.w_txt.matvec(&dz);
            let tokens = &batch.pos_captions[i];
            let scale = 1.0 / tokens.len() as f64;
            for &t in tokens {
                axpy(scale, &dpool, g.params.e_tok.row_mut(t));
            }
        }
        g.check_finite()?;
        Some(g)
    } else {
        None
    };

    Ok(Evaluation {
        breakdown,
        triplet_img: tx,
        triplet_txt: ty,
        hinge_args,
        grads,
    })
}

/// Gradient of the objective for one batch; see [`evaluate`].
pub fn backward_total(
    params: &ModelParams,
    bank: &CenterBank,
    batch: &TripletBatch,
    margins: (f64, f64),
    cfg: &LossConfig,
) -> Result<Gradients> {
    Ok(evaluate(params, bank, batch, margins, cfg, true)?
        .grads
        .expect("gradients requested"))
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    axpy(1.0, src.as_slice(), dst.as_mut_slice());
}

/// Pulls a gradient on softmax outputs `w` back to the logits:
/// `w ⊙ (g − ⟨w, g⟩)`.
pub fn softmax_backward(w: &[f64], grad_w: &[f64]) -> Vec<f64> {
    let wg: f64 = w.iter().zip(grad_w).map(|(a, b)| a * b).sum();
    w.iter().zip(grad_w).map(|(wi, gi)| wi * (gi - wg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_triplet_batch, synth_dataset, SyntheticSpec};
    use crate::model::{init_params, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_backward_matches_jacobian() {
        let w = crate::numerics::softmax(&[0.3, -1.0, 2.0]);
        let g = [1.0, -2.0, 0.5];
        let got = softmax_backward(&w, &g);
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..3 {
                let jac = if i == j { w[i] * (1.0 - w[i]) } else { -w[i] * w[j] };
                s += jac * g[i];
            }
            assert!((got[j] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_loss_batch_has_zero_gradient() {
        // two orthogonal subsets, perfect embeddings, saturated classifiers
        let ds = synth_dataset(&SyntheticSpec {
            n_concepts: 2,
            subsets_per_concept: 1,
            feat_dim: 2,
            vocab_size: 10,
            tokens_per_caption: 1,
            k: 1,
            noise_sigma: 0.0,
            seed: 0,
        })
        .unwrap()
        .dataset;
        let dims = ModelDims {
            feat_dim: 2,
            word_dim: 2,
            embed_dim: 2,
            n_classes: 2,
            n_quant: 2,
            vocab_size: 10,
        };
        let mut p = init_params(&dims, 0).unwrap();
        // image n -> axis n, caption of subset n -> axis n
        let f0 = ds.record(0).image_feat.clone();
        let f1 = ds.record(1).image_feat.clone();
        let det = f0[0] * f1[1] - f0[1] * f1[0];
        let inv = Matrix::from_rows(&[[f1[1] / det, -f0[1] / det], [-f1[0] / det, f0[0] / det]]).unwrap();
        // w_img = F⁻¹ so that Fᵀ-rows map to the identity
        p.w_img = inv;
        p.w_txt = Matrix::identity(2);
        p.e_tok.fill(0.0);
        p.e_tok[(ds.record(0).captions[0][0], 0)] = 1.0;
        p.e_tok[(ds.record(1).captions[0][0], 1)] = 1.0;
        p.w_ce_img = Matrix::from_rows(&[[1000.0, -1000.0], [-1000.0, 1000.0]]).unwrap();
        p.w_ce_txt = p.w_ce_img.clone();
        let bank = CenterBank::unquantized(Matrix::identity(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_triplet_batch(&ds, &[0, 1], &mut rng).unwrap();
        let cfg = LossConfig::default();
        let ev = evaluate(&p, &bank, &batch, (0.2, 0.2), &cfg, true).unwrap();
        assert!(ev.breakdown.total < 1e-300, "{:?}", ev.breakdown);
        let g = ev.grads.unwrap();
        for (name, t) in g.params.tensors() {
            assert!(t.max_abs() < 1e-300, "{name}: {}", t.max_abs());
        }
        assert_eq!(g.centers.max_abs(), 0.0);
    }
}
