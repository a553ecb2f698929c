use crate::error::{Error, Result};
use crate::model::{CenterBank, ModelParams};
use crate::numerics::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Step-decay schedule: `base · factor^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64, decay_factor: f64, every: usize) -> f64 {
    if every == 0 {
        return base_lr;
    }
    base_lr * decay_factor.powi((epoch / every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: u64,
}

/// Adam state for the encoder and head tensors. Each tensor keeps its own
/// step counter so tensors that were frozen for a while start with proper
/// bias correction when they are unfrozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            moments: params
                .tensors()
                .iter()
                .map(|(_, t)| Moments {
                    m: Matrix::zeros(t.rows(), t.cols()),
                    v: Matrix::zeros(t.rows(), t.cols()),
                    t: 0,
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> Vec<u64> {
        self.moments.iter().map(|m| m.t).collect()
    }

    /// Updates every tensor for which `trainable(name)` holds.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let gts = grads.tensors();
        for ((name, p), (mom, (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(self.moments.iter_mut().zip(gts.iter()))
        {
            if p.shape() != g.shape() || p.shape() != mom.m.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.shape(),
                    got: g.shape(),
                });
            }
            if !trainable(name) {
                continue;
            }
            adam_update(p, g, mom, lr);
        }
        Ok(())
    }
}

fn adam_update(p: &mut Matrix, g: &Matrix, mom: &mut Moments, lr: f64) {
    mom.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(mom.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(mom.t as i32);
    let (ps, gs) = (p.as_mut_slice(), g.as_slice());
    let (ms, vs) = (mom.m.as_mut_slice(), mom.v.as_mut_slice());
    for i in 0..ps.len() {
        let gi = gs[i];
        ms[i] = ADAM_BETA1 * ms[i] + (1.0 - ADAM_BETA1) * gi;
        vs[i] = ADAM_BETA2 * vs[i] + (1.0 - ADAM_BETA2) * gi * gi;
        let mhat = ms[i] / bc1;
        let vhat = vs[i] / bc2;
        ps[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// Plain SGD on the center bank.
pub fn sgd_center_step(bank: &mut CenterBank, grads: &Matrix, lr: f64) -> Result<()> {
    if bank.centers.shape() != grads.shape() {
        return Err(Error::ShapeMismatch {
            name: "centers".into(),
            expected: bank.centers.shape(),
            got: grads.shape(),
        });
    }
    for (c, g) in bank.centers.as_mut_slice().iter_mut().zip(grads.as_slice()) {
        *c -= lr * g;
    }
    Ok(())
}
