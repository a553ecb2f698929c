//! Two-branch encoder, classification heads and the soft quantization head.
//!
//! Image branch: affine map of the backbone feature, then L2 normalization.
//! Text branch: mean of token embeddings, affine map, then L2 normalization.
//! Both branches feed their own cross-entropy head over subset indices and a
//! single shared quantization head whose softmax gives soft assignments to
//! the quantized centers.

mod checkpoint;
mod kmeans;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use kmeans::{kmeans_init, kmeans_objective, KMeansResult};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, l2_normalize, norm, softmax, Matrix, EPS_NORM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Backbone feature dimension (D_img).
    pub feat_dim: usize,
    /// Token embedding width (d_w).
    pub word_dim: usize,
    /// Joint embedding dimension (d).
    pub embed_dim: usize,
    /// Number of training subsets, i.e. cross-entropy classes (N).
    pub n_classes: usize,
    /// Number of quantized centers (N_q).
    pub n_quant: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    fn check(&self) -> Result<()> {
        let all = [
            self.feat_dim,
            self.word_dim,
            self.embed_dim,
            self.n_classes,
            self.n_quant,
            self.vocab_size,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Text,
}

/// Every trainable tensor except the center bank. Biases are 1×n matrices.
///
/// The same struct doubles as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_img: Matrix,
    pub b_img: Matrix,
    pub e_tok: Matrix,
    pub w_txt: Matrix,
    pub b_txt: Matrix,
    pub w_ce_img: Matrix,
    pub b_ce_img: Matrix,
    pub w_ce_txt: Matrix,
    pub b_ce_txt: Matrix,
    pub w_q: Matrix,
    pub b_q: Matrix,
}

pub const PARAM_NAMES: [&str; 11] = [
    "w_img", "b_img", "e_tok", "w_txt", "b_txt", "w_ce_img", "b_ce_img", "w_ce_txt", "b_ce_txt",
    "w_q", "b_q",
];

/// Tensors that stay trainable during the frozen warmup of the quantized phase.
pub const QUANT_HEAD: [&str; 2] = ["w_q", "b_q"];

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        let d = dims.embed_dim;
        Self {
            w_img: Matrix::zeros(dims.feat_dim, d),
            b_img: Matrix::zeros(1, d),
            e_tok: Matrix::zeros(dims.vocab_size, dims.word_dim),
            w_txt: Matrix::zeros(dims.word_dim, d),
            b_txt: Matrix::zeros(1, d),
            w_ce_img: Matrix::zeros(d, dims.n_classes),
            b_ce_img: Matrix::zeros(1, dims.n_classes),
            w_ce_txt: Matrix::zeros(d, dims.n_classes),
            b_ce_txt: Matrix::zeros(1, dims.n_classes),
            w_q: Matrix::zeros(d, dims.n_quant),
            b_q: Matrix::zeros(1, dims.n_quant),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feat_dim: self.w_img.rows(),
            word_dim: self.e_tok.cols(),
            embed_dim: self.w_img.cols(),
            n_classes: self.w_ce_img.cols(),
            n_quant: self.w_q.cols(),
            vocab_size: self.e_tok.rows(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 11] {
        [
            ("w_img", &self.w_img),
            ("b_img", &self.b_img),
            ("e_tok", &self.e_tok),
            ("w_txt", &self.w_txt),
            ("b_txt", &self.b_txt),
            ("w_ce_img", &self.w_ce_img),
            ("b_ce_img", &self.b_ce_img),
            ("w_ce_txt", &self.w_ce_txt),
            ("b_ce_txt", &self.b_ce_txt),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 11] {
        [
            ("w_img", &mut self.w_img),
            ("b_img", &mut self.b_img),
            ("e_tok", &mut self.e_tok),
            ("w_txt", &mut self.w_txt),
            ("b_txt", &mut self.b_txt),
            ("w_ce_img", &mut self.w_ce_img),
            ("b_ce_img", &mut self.b_ce_img),
            ("w_ce_txt", &mut self.w_ce_txt),
            ("b_ce_txt", &mut self.b_ce_txt),
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Glorot-uniform weights, zero biases. The token table uses
/// `fan_in = vocab_size, fan_out = word_dim`.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    dims.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(dims);
    for (name, t) in p.tensors_mut() {
        if name.starts_with("b_") {
            continue;
        }
        let a = glorot_bound(t.rows(), t.cols());
        t.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-a..a));
    }
    Ok(p)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Intermediate values of one branch's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    /// Branch input: the image feature, or the mean token embedding.
    pub input: Vec<f64>,
    /// Affine output before normalization.
    pub pre_norm: Vec<f64>,
    pub emb: Vec<f64>,
}

impl EncoderTrace {
    fn finish(input: Vec<f64>, pre_norm: Vec<f64>) -> Result<Self> {
        let emb = l2_normalize(&pre_norm)?;
        Ok(Self {
            input,
            pre_norm,
            emb,
        })
    }

    /// Maps a gradient on the unit-norm output back to the pre-norm vector:
    /// `(g − u·(u·g)) / ‖z‖`.
    pub fn normalize_backward(&self, grad_emb: &[f64]) -> Vec<f64> {
        let n = norm(&self.pre_norm).max(EPS_NORM);
        let ug = dot(&self.emb, grad_emb);
        self.emb
            .iter()
            .zip(grad_emb)
            .map(|(u, g)| (g - u * ug) / n)
            .collect()
    }
}

pub fn trace_image(params: &ModelParams, feat: &[f64]) -> Result<EncoderTrace> {
    if feat.len() != params.w_img.rows() {
        return Err(Error::DimMismatch {
            expected: params.w_img.rows(),
            got: feat.len(),
        });
    }
    let mut z = params.w_img.t_matvec(feat);
    axpy(1.0, params.b_img.row(0), &mut z);
    EncoderTrace::finish(feat.to_vec(), z)
}

pub fn mean_token_embedding(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let vocab = params.e_tok.rows();
    let mut pooled = vec![0.0; params.e_tok.cols()];
    for &t in tokens {
        if t >= vocab {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: vocab,
            });
        }
        axpy(1.0, params.e_tok.row(t), &mut pooled);
    }
    let inv = 1.0 / tokens.len() as f64;
    pooled.iter_mut().for_each(|v| *v *= inv);
    Ok(pooled)
}

pub fn trace_caption(params: &ModelParams, tokens: &[usize]) -> Result<EncoderTrace> {
    let pooled = mean_token_embedding(params, tokens)?;
    let mut z = params.w_txt.t_matvec(&pooled);
    axpy(1.0, params.b_txt.row(0), &mut z);
    EncoderTrace::finish(pooled, z)
}

pub fn embed_image(params: &ModelParams, feat: &[f64]) -> Result<Vec<f64>> {
    Ok(trace_image(params, feat)?.emb)
}

pub fn embed_caption(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>> {
    Ok(trace_caption(params, tokens)?.emb)
}

/// Raw (pre-softmax) logits of a branch's classification head.
pub fn ce_logits(params: &ModelParams, emb: &[f64], branch: Branch) -> Vec<f64> {
    let (w, b) = match branch {
        Branch::Image => (&params.w_ce_img, &params.b_ce_img),
        Branch::Text => (&params.w_ce_txt, &params.b_ce_txt),
    };
    let mut z = w.t_matvec(emb);
    axpy(1.0, b.row(0), &mut z);
    z
}

/// Soft assignment of an embedding to the quantized centers.
pub fn assign_soft(params: &ModelParams, emb: &[f64]) -> Vec<f64> {
    let mut z = params.w_q.t_matvec(emb);
    axpy(1.0, params.b_q.row(0), &mut z);
    softmax(&z)
}

/// Learned centers: one per training subset, or `N_q` quantized ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    pub centers: Matrix,
    pub quantized: bool,
}

impl CenterBank {
    pub fn unquantized(centers: Matrix) -> Self {
        Self {
            centers,
            quantized: false,
        }
    }

    pub fn quantized(centers: Matrix) -> Self {
        Self {
            centers,
            quantized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            feat_dim: 32,
            word_dim: 12,
            embed_dim: 16,
            n_classes: 5,
            n_quant: 3,
            vocab_size: 20,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_params(&dims(), 9).unwrap();
        assert_eq!(a, init_params(&dims(), 9).unwrap());
        assert_ne!(a, init_params(&dims(), 10).unwrap());
        assert_eq!(a.w_img.shape(), (32, 16));
        let bound = (6.0f64 / 48.0).sqrt();
        assert!((bound - 0.3536).abs() < 1e-4);
        assert!(a.w_img.max_abs() <= bound);
        assert_eq!(a.b_img.max_abs(), 0.0);
        assert_eq!(a.dims(), dims());
        assert!(init_params(&ModelDims { n_quant: 0, ..dims() }, 0).is_err());
    }

    fn identity_model() -> ModelParams {
        let dims = ModelDims {
            feat_dim: 2,
            word_dim: 2,
            embed_dim: 2,
            n_classes: 3,
            n_quant: 4,
            vocab_size: 5,
        };
        let mut p = init_params(&dims, 1).unwrap();
        p.w_img = Matrix::identity(2);
        p.w_txt = Matrix::identity(2);
        p
    }

    #[test]
    fn image_examples() {
        let mut p = identity_model();
        let e = embed_image(&p, &[3.0, 4.0]).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
        p.b_img = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(embed_image(&p, &[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(embed_image(&p, &[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn image_matches_loop_oracle() {
        let p = init_params(&dims(), 4).unwrap();
        let feat: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = embed_image(&p, &feat).unwrap();
        let mut z = vec![0.0; 16];
        for j in 0..16 {
            for i in 0..32 {
                z[j] += p.w_img[(i, j)] * feat[i];
            }
            z[j] += p.b_img[(0, j)];
        }
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..16 {
            assert!((got[j] - z[j] / n).abs() <= 1e-12);
        }
    }

    #[test]
    fn caption_examples() {
        let p = identity_model();
        let t = 3;
        let e = embed_caption(&p, &[t]).unwrap();
        assert_eq!(e, l2_normalize(p.e_tok.row(t)).unwrap());
        let e3 = embed_caption(&p, &[t, t, t]).unwrap();
        for (a, b) in e.iter().zip(&e3) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(embed_caption(&p, &[]), Err(Error::EmptyCaption)));
        assert!(matches!(
            embed_caption(&p, &[5]),
            Err(Error::TokenOutOfRange { token: 5, .. })
        ));
    }

    #[test]
    fn logits_examples() {
        let mut p = identity_model();
        p.w_ce_img.fill(0.0);
        assert_eq!(ce_logits(&p, &[1.0, 0.0], Branch::Image), vec![0.0; 3]);
        p.w_ce_txt = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        p.b_ce_txt = Matrix::from_rows(&[[0.5, 0.0, -0.5]]).unwrap();
        assert_eq!(ce_logits(&p, &[1.0, 0.0], Branch::Text), vec![1.5, 2.0, 2.5]);

        let p = init_params(&dims(), 2).unwrap();
        let emb = l2_normalize(&(0..16).map(|i| i as f64 - 7.5).collect::<Vec<_>>()).unwrap();
        let got = ce_logits(&p, &emb, Branch::Image);
        for c in 0..5 {
            let mut s = p.b_ce_img[(0, c)];
            for k in 0..16 {
                s += p.w_ce_img[(k, c)] * emb[k];
            }
            assert!((got[c] - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn soft_assignment_examples() {
        let mut p = identity_model();
        p.w_q.fill(0.0);
        assert_eq!(assign_soft(&p, &[1.0, 0.0]), vec![0.25; 4]);

        let dims = ModelDims {
            n_quant: 2,
            ..p.dims()
        };
        let mut p = ModelParams::zeros(&dims);
        p.b_q = Matrix::from_rows(&[[2f64.ln(), 0.0]]).unwrap();
        let w = assign_soft(&p, &[0.6, 0.8]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_backward_is_orthogonal_to_output() {
        let p = init_params(&dims(), 7).unwrap();
        let tr = trace_caption(&p, &[1, 4, 4, 9]).unwrap();
        let g: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let dz = tr.normalize_backward(&g);
        assert!(dot(&dz, &tr.pre_norm).abs() < 1e-12);
    }
}
