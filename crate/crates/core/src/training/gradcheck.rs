//! Central finite-difference verification of the analytic gradients.
//!
//! A coordinate is skipped as a kink when the pattern of active hinge terms
//! differs between `θ+h` and `θ−h`: the loss is not differentiable somewhere
//! in between and the difference quotient says nothing about the gradient.

use super::objective::{backward_total, evaluate, Gradients};
use super::trainer::{build_batch, init_centers};
use crate::data::{synth_dataset, NegativeMode, SyntheticSpec, TripletBatch};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{init_params, CenterBank, ModelDims, ModelParams};
use crate::numerics::{l2_normalize, Matrix};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a hinge changed state within ±h.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error <= self.tol)
    }
}

/// Checks `analytic` against central differences of `f` on the given
/// coordinates. `f` returns the loss and the sign pattern of every hinge
/// argument; a coordinate whose pattern differs between the two probes is
/// counted as a kink. Returns `(max relative error, checked, kinks)`.
pub fn central_difference_check(
    theta: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> (f64, Vec<bool>),
) -> (f64, usize, usize) {
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + h;
        let (lp, sp) = f(theta);
        theta[i] = orig - h;
        let (lm, sm) = f(theta);
        theta[i] = orig;
        if sp != sm {
            kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_error(analytic[i], numeric));
        checked += 1;
    }
    (worst, checked, kinks)
}

fn pattern(args: &[f64]) -> Vec<bool> {
    args.iter().map(|&a| a > 0.0).collect()
}

/// Compares [`backward_total`] with finite differences on up to
/// `coords_per_tensor` random coordinates of every tensor and the centers.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &ModelParams,
    bank: &CenterBank,
    batch: &TripletBatch,
    margins: (f64, f64),
    cfg: &LossConfig,
    h: f64,
    tol: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = backward_total(params, bank, batch, margins, cfg)?;
    grad_check_against(params, bank, batch, margins, cfg, &analytic, h, tol, coords_per_tensor, seed)
}

/// Like [`grad_check`] but against caller-supplied gradients.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_against(
    params: &ModelParams,
    bank: &CenterBank,
    batch: &TripletBatch,
    margins: (f64, f64),
    cfg: &LossConfig,
    analytic: &Gradients,
    h: f64,
    tol: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    let mut failure = None;

    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut v = sample(rng, len, coords_per_tensor.min(len)).into_vec();
        v.sort_unstable();
        v
    };

    for (ti, (name, grad)) in analytic.params.tensors().into_iter().enumerate() {
        let coords = pick(grad.as_slice().len(), &mut rng);
        let mut probe = params.clone();
        let mut theta = probe.tensors()[ti].1.as_slice().to_vec();
        let (worst, checked, kinks) = central_difference_check(&mut theta, grad.as_slice(), &coords, h, |t| {
            probe.tensors_mut()[ti].1.as_mut_slice().copy_from_slice(t);
            match evaluate(&probe, bank, batch, margins, cfg, false) {
                Ok(ev) => (ev.breakdown.total, pattern(&ev.hinge_args)),
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, Vec::new())
                }
            }
        });
        tensors.push(TensorCheck {
            name: name.to_string(),
            max_rel_error: if worst.is_nan() { f64::INFINITY } else { worst },
            checked,
            kinks,
        });
    }

    let coords = pick(analytic.centers.as_slice().len(), &mut rng);
    let mut probe = bank.clone();
    let mut theta = bank.centers.as_slice().to_vec();
    let (worst, checked, kinks) = central_difference_check(&mut theta, analytic.centers.as_slice(), &coords, h, |t| {
        probe.centers = Matrix::from_vec(bank.len(), bank.dim(), t.to_vec()).expect("same shape");
        match evaluate(params, &probe, batch, margins, cfg, false) {
            Ok(ev) => (ev.breakdown.total, pattern(&ev.hinge_args)),
            Err(e) => {
                failure.get_or_insert(e);
                (f64::NAN, Vec::new())
            }
        }
    });
    tensors.push(TensorCheck {
        name: "centers".into(),
        max_rel_error: if worst.is_nan() { f64::INFINITY } else { worst },
        checked,
        kinks,
    });

    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckReport { tensors, tol })
}

/// A small random model, bank and batch for checking one phase's objective.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub params: ModelParams,
    pub bank: CenterBank,
    pub batch: TripletBatch,
    pub margins: (f64, f64),
    pub loss: LossConfig,
}

impl GradCase {
    /// Phase 1 uses the per-subset bank with fixed margins, phases 2 and 3 a
    /// quantized bank of two centers; phase 3 also uses unequal margins.
    pub fn random(seed: u64, phase: u8, mode: NegativeMode) -> Result<Self> {
        if !(1..=3).contains(&phase) {
            return Err(Error::Config(format!("phase must be 1, 2 or 3, got {phase}")));
        }
        let data = synth_dataset(&SyntheticSpec {
            n_concepts: 3,
            subsets_per_concept: 2,
            feat_dim: 5,
            vocab_size: 20,
            tokens_per_caption: 3,
            k: 2,
            noise_sigma: 0.3,
            seed,
        })?
        .dataset;
        let dims = ModelDims {
            feat_dim: 5,
            word_dim: 3,
            embed_dim: 4,
            n_classes: data.len(),
            n_quant: 2,
            vocab_size: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let mut params = init_params(&dims, seed)?;
        // nonzero biases so their gradients are exercised
        for (_, t) in params.tensors_mut() {
            if t.rows() == 1 {
                t.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let bank = if phase == 1 {
            let mut b = init_centers(&params, &data)?;
            b.centers.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            b
        } else {
            let rows: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    l2_normalize(&v)
                })
                .collect::<Result<_>>()?;
            CenterBank::quantized(Matrix::from_rows(&rows)?)
        };
        let anchors: Vec<usize> = (0..data.len()).collect();
        let batch = build_batch(&data, &anchors, mode, &params, &mut rng)?;
        let margins = if phase == 3 { (0.25, 0.35) } else { (0.2, 0.2) };
        Ok(Self {
            params,
            bank,
            batch,
            margins,
            loss: LossConfig::default(),
        })
    }

    pub fn gradients(&self) -> Result<Gradients> {
        backward_total(&self.params, &self.bank, &self.batch, self.margins, &self.loss)
    }

    pub fn check(&self, h: f64, tol: f64, coords_per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
        self.check_against(&self.gradients()?, h, tol, coords_per_tensor, seed)
    }

    pub fn check_against(
        &self,
        analytic: &Gradients,
        h: f64,
        tol: f64,
        coords_per_tensor: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        grad_check_against(
            &self.params,
            &self.bank,
            &self.batch,
            self.margins,
            &self.loss,
            analytic,
            h,
            tol,
            coords_per_tensor,
            seed,
        )
    }
}
