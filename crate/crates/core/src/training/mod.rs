//! Optimizers, adaptive margins, the manual backward pass, finite-difference
//! checking and the three-phase training protocol.

mod gradcheck;
mod margin;
mod objective;
mod optim;
mod trainer;

pub use gradcheck::{
    central_difference_check, grad_check, grad_check_against, rel_error, GradCase, GradCheckReport, TensorCheck,
};
pub use margin::MarginState;
pub use objective::{backward_total, batch_embeddings, evaluate, softmax_backward, Evaluation, Gradients};
pub use optim::{lr_schedule, sgd_center_step, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{
    build_batch, init_centers, init_state, quantize_bank, run_phase, train, MetricsLog, PhaseOutcome, TrainState,
    METRICS_HEADER,
};

use crate::data::NegativeMode;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use std::fmt::Write as _;
use std::str::FromStr;

/// Schedule and optimizer settings for the three training phases.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase3_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase23: f64,
    /// Adam rate for the quantization head during the frozen warmup; falls
    /// back to `lr_phase23`.
    pub lr_warmup: Option<f64>,
    pub center_lr: f64,
    pub lr_decay_factor: f64,
    /// Epoch counter restarts at every phase.
    pub lr_decay_every_epochs: usize,
    /// Apply the step decay to the center SGD only, not to Adam.
    pub decay_centers_only: bool,
    pub batch_size: usize,
    /// Leading epochs of phase 2 during which only the quantization head and
    /// the quantized centers train.
    pub freeze_warmup_epochs: usize,
    pub n_quant: usize,
    pub adaptive_margins: [bool; 3],
    pub q: u32,
    pub c_mult: f64,
    pub r: f64,
    pub invert_ratio: bool,
    pub sampling: NegativeMode,
    pub kmeans_max_iters: usize,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            phase1_epochs: 30,
            phase2_epochs: 15,
            phase3_epochs: 10,
            lr_phase1: 2e-4,
            lr_phase23: 2e-5,
            lr_warmup: None,
            center_lr: 0.5,
            lr_decay_factor: 0.1,
            lr_decay_every_epochs: 15,
            decay_centers_only: false,
            batch_size: 128,
            freeze_warmup_epochs: 3,
            n_quant: 50,
            adaptive_margins: [false, false, true],
            q: 500,
            c_mult: 1.03,
            r: 0.8,
            invert_ratio: false,
            sampling: NegativeMode::Random,
            kmeans_max_iters: 100,
        }
    }
}

impl PhasePlan {
    pub fn epochs(&self, phase: u8) -> usize {
        match phase {
            1 => self.phase1_epochs,
            2 => self.phase2_epochs,
            _ => self.phase3_epochs,
        }
    }

    pub fn base_lr(&self, phase: u8) -> f64 {
        if phase == 1 {
            self.lr_phase1
        } else {
            self.lr_phase23
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_phase1", self.lr_phase1),
            ("lr_phase23", self.lr_phase23),
            ("center_lr", self.center_lr),
            ("lr_warmup", self.lr_warmup.unwrap_or(self.lr_phase23)),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.n_quant == 0 {
            return Err(Error::Config("n_quant must be positive".into()));
        }
        MarginState::new(0.2, self.q, self.c_mult, self.r).validate()
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub plan: PhasePlan,
    pub loss: LossConfig,
    pub word_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            plan: PhasePlan::default(),
            loss: LossConfig::default(),
            word_dim: 300,
            embed_dim: 64,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Keys understood by [`TrainConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "phase1_epochs",
        "phase2_epochs",
        "phase3_epochs",
        "lr_phase1",
        "lr_phase23",
        "lr_warmup",
        "center_lr",
        "lr_decay_factor",
        "lr_decay_every_epochs",
        "decay_centers_only",
        "batch_size",
        "freeze_warmup_epochs",
        "n_quant",
        "adaptive_phase1",
        "adaptive_phase2",
        "adaptive_phase3",
        "q",
        "c_mult",
        "r",
        "invert_ratio",
        "sampling",
        "kmeans_max_iters",
        "delta",
        "alpha",
        "margin",
        "word_dim",
        "embed_dim",
        "seed",
    ];

    /// Sets one key. Returns `Ok(false)` for keys that belong to someone else.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let p = &mut self.plan;
        match key {
            "phase1_epochs" => p.phase1_epochs = parse(key, value)?,
            "phase2_epochs" => p.phase2_epochs = parse(key, value)?,
            "phase3_epochs" => p.phase3_epochs = parse(key, value)?,
            "lr_phase1" => p.lr_phase1 = parse(key, value)?,
            "lr_phase23" => p.lr_phase23 = parse(key, value)?,
            "lr_warmup" => p.lr_warmup = Some(parse(key, value)?),
            "center_lr" => p.center_lr = parse(key, value)?,
            "lr_decay_factor" => p.lr_decay_factor = parse(key, value)?,
            "lr_decay_every_epochs" => p.lr_decay_every_epochs = parse(key, value)?,
            "decay_centers_only" => p.decay_centers_only = parse_bool(key, value)?,
            "batch_size" => p.batch_size = parse(key, value)?,
            "freeze_warmup_epochs" => p.freeze_warmup_epochs = parse(key, value)?,
            "n_quant" => p.n_quant = parse(key, value)?,
            "adaptive_phase1" => p.adaptive_margins[0] = parse_bool(key, value)?,
            "adaptive_phase2" => p.adaptive_margins[1] = parse_bool(key, value)?,
            "adaptive_phase3" => p.adaptive_margins[2] = parse_bool(key, value)?,
            "q" => p.q = parse(key, value)?,
            "c_mult" => p.c_mult = parse(key, value)?,
            "r" => p.r = parse(key, value)?,
            "invert_ratio" => p.invert_ratio = parse_bool(key, value)?,
            "sampling" => p.sampling = value.parse()?,
            "kmeans_max_iters" => p.kmeans_max_iters = parse(key, value)?,
            "delta" => self.loss.delta = parse(key, value)?,
            "alpha" => self.loss.alpha = parse(key, value)?,
            "margin" => self.loss.margin_fixed = parse(key, value)?,
            "word_dim" => self.word_dim = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.loss.validate()?;
        if self.word_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("word_dim and embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Renders the config as `key=value` lines that [`parse_kv`] reads back.
    pub fn to_kv(&self) -> String {
        let p = &self.plan;
        let mut s = String::new();
        let _ = writeln!(s, "phase1_epochs={}", p.phase1_epochs);
        let _ = writeln!(s, "phase2_epochs={}", p.phase2_epochs);
        let _ = writeln!(s, "phase3_epochs={}", p.phase3_epochs);
        let _ = writeln!(s, "lr_phase1={}", p.lr_phase1);
        let _ = writeln!(s, "lr_phase23={}", p.lr_phase23);
        if let Some(v) = p.lr_warmup {
            let _ = writeln!(s, "lr_warmup={v}");
        }
        let _ = writeln!(s, "center_lr={}", p.center_lr);
        let _ = writeln!(s, "lr_decay_factor={}", p.lr_decay_factor);
        let _ = writeln!(s, "lr_decay_every_epochs={}", p.lr_decay_every_epochs);
        let _ = writeln!(s, "decay_centers_only={}", p.decay_centers_only);
        let _ = writeln!(s, "batch_size={}", p.batch_size);
        let _ = writeln!(s, "freeze_warmup_epochs={}", p.freeze_warmup_epochs);
        let _ = writeln!(s, "n_quant={}", p.n_quant);
        for (i, a) in p.adaptive_margins.iter().enumerate() {
            let _ = writeln!(s, "adaptive_phase{}={}", i + 1, a);
        }
        let _ = writeln!(s, "q={}", p.q);
        let _ = writeln!(s, "c_mult={}", p.c_mult);
        let _ = writeln!(s, "r={}", p.r);
        let _ = writeln!(s, "invert_ratio={}", p.invert_ratio);
        let _ = writeln!(s, "sampling={}", p.sampling);
        let _ = writeln!(s, "kmeans_max_iters={}", p.kmeans_max_iters);
        let _ = writeln!(s, "delta={}", self.loss.delta);
        let _ = writeln!(s, "alpha={}", self.loss.alpha);
        let _ = writeln!(s, "margin={}", self.loss.margin_fixed);
        let _ = writeln!(s, "word_dim={}", self.word_dim);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

/// Splits `key=value` config text into pairs. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
            line: i + 1,
            reason: "expected key=value".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.plan.phase1_epochs, c.plan.phase2_epochs, c.plan.phase3_epochs), (30, 15, 10));
        assert_eq!(c.plan.lr_phase1, 2e-4);
        assert_eq!(c.plan.lr_phase23, 2e-5);
        assert_eq!(c.plan.adaptive_margins, [false, false, true]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::default();
        c.set("n_quant", "7").unwrap();
        c.set("sampling", "hardest").unwrap();
        c.set("invert_ratio", "true").unwrap();
        c.set("delta", "0.05").unwrap();
        c.set("lr_warmup", "0.1").unwrap();
        assert!(!c.set("synth_seed", "3").unwrap());
        assert!(c.set("q", "-1").is_err());

        let mut back = TrainConfig::default();
        for (k, v) in parse_kv(&c.to_kv()).unwrap() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, c);
        assert_eq!(parse_kv(&c.to_kv()).unwrap().len(), TrainConfig::KEYS.len());
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_kv("# c\n\nseed = 4\n").unwrap() == vec![("seed".into(), "4".into())]);
        assert!(matches!(parse_kv("seed 4"), Err(Error::MalformedLine { line: 1, .. })));
    }
}
