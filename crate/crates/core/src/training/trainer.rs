//! The three-phase training protocol.
//!
//! Phase 1 trains the encoders with one unquantized center per training
//! subset. Phase 2 replaces the bank with k-means centers of the phase-1 bank,
//! first training only the quantization head and the centers, then everything.
//! Phase 3 continues phase 2 with adaptive margins.

use super::margin::MarginState;
use super::objective::{batch_embeddings, evaluate};
use super::optim::{lr_schedule, sgd_center_step, Adam};
use super::TrainConfig;
use crate::data::{epoch_batches, Dataset, NegativeMode, TripletBatch};
use crate::error::{Error, Result};
use crate::losses::margin_ratios;
use crate::model::{
    embed_caption, embed_image, init_params, kmeans_init, save_checkpoint, CenterBank, Checkpoint, KMeansResult,
    ModelDims, ModelParams, QUANT_HEAD,
};
use crate::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

pub const METRICS_HEADER: &str = "step,phase,epoch,l_center,l_triplet,l_ce_img,l_ce_txt,total,m_x,m_y,M_x,M_y,lr";

/// Per-batch metrics as CSV text.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    text: String,
    rows: usize,
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self {
            text: format!("{METRICS_HEADER}\n"),
            rows: 0,
        }
    }
}

impl MetricsLog {
    pub fn as_csv(&self) -> &str {
        &self.text
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn push(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
        self.rows += 1;
    }

    /// Values of one column, parsed back as f64.
    pub fn column(&self, name: &str) -> Vec<f64> {
        let Some(idx) = METRICS_HEADER.split(',').position(|c| c == name) else {
            return Vec::new();
        };
        self.text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(idx)?.parse().ok())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub bank: CenterBank,
    pub margins: MarginState,
    /// Global batch counter.
    pub step: u64,
    /// Last completed phase, 0 before training.
    pub phase: u8,
}

impl TrainState {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            bank: self.bank.clone(),
            margins: self.margins.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    /// The k-means run that seeded the quantized bank (phase 2 only).
    pub kmeans: Option<KMeansResult>,
    pub batches: usize,
}

/// Mean of the initial image embedding and the `K` caption embeddings of
/// every subset.
pub fn init_centers(params: &ModelParams, dataset: &Dataset) -> Result<CenterBank> {
    let d = params.dims().embed_dim;
    let mut centers = Matrix::zeros(dataset.len(), d);
    for (n, r) in dataset.records().iter().enumerate() {
        let mut acc = embed_image(params, &r.image_feat)?;
        for c in &r.captions {
            for (a, v) in acc.iter_mut().zip(embed_caption(params, c)?) {
                *a += v;
            }
        }
        let inv = 1.0 / (1 + r.captions.len()) as f64;
        for (c, a) in centers.row_mut(n).iter_mut().zip(acc) {
            *c = a * inv;
        }
    }
    Ok(CenterBank::unquantized(centers))
}

/// Fresh parameters, the unquantized bank and the initial margins.
pub fn init_state(train: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let dims = ModelDims {
        feat_dim: train.feat_dim(),
        word_dim: cfg.word_dim,
        embed_dim: cfg.embed_dim,
        n_classes: train.len(),
        n_quant: cfg.plan.n_quant,
        vocab_size: train.vocab_size(),
    };
    let params = init_params(&dims, cfg.seed)?;
    let bank = init_centers(&params, train)?;
    let p = &cfg.plan;
    let mut margins = MarginState::new(cfg.loss.margin_fixed, p.q, p.c_mult, p.r);
    margins.invert_ratio = p.invert_ratio;
    Ok(TrainState {
        params,
        bank,
        margins,
        step: 0,
        phase: 0,
    })
}

/// k-means over the unquantized centers.
pub fn quantize_bank(bank: &CenterBank, n_quant: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if bank.quantized {
        return Err(Error::PhaseOrderViolation("bank is already quantized".into()));
    }
    kmeans_init(&bank.centers, n_quant, seed, max_iters)
}

/// Draws positives for `anchors` and assigns negatives with `mode`, embedding
/// the batch with `params` when hardest negatives are wanted.
pub fn build_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    anchors: &[usize],
    mode: NegativeMode,
    params: &ModelParams,
    rng: &mut R,
) -> Result<TripletBatch> {
    let mut batch = TripletBatch::draw_positives(dataset, anchors, rng)?;
    match mode {
        NegativeMode::Random => batch.assign_negatives(mode, rng, None)?,
        NegativeMode::HardestInBatch => {
            let (x, y) = batch_embeddings(params, &batch)?;
            batch.assign_negatives(mode, rng, Some((&x, &y)))?;
        }
    }
    Ok(batch)
}

fn phase_seed(seed: u64, phase: u8) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(phase as u64)
}

fn check_order(phase: u8, state: &TrainState) -> Result<()> {
    let ok = match phase {
        1 => state.phase == 0 && !state.bank.quantized,
        2 => state.phase == 1 && !state.bank.quantized,
        3 => state.phase == 2 && state.bank.quantized,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::PhaseOrderViolation(format!(
            "phase {phase} cannot follow phase {} (bank quantized: {})",
            state.phase, state.bank.quantized
        )))
    }
}

fn write_metrics(out: &Path, log: &MetricsLog) -> Result<()> {
    let path = out.join("metrics.csv");
    let tmp = out.join("metrics.csv.tmp");
    fs::write(&tmp, log.as_csv()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Runs one phase on `train`. Checkpoints and the metrics CSV are written to
/// `out` after every epoch when it is given.
pub fn run_phase(
    phase: u8,
    state: &mut TrainState,
    train: &Dataset,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    out: Option<&Path>,
) -> Result<PhaseOutcome> {
    check_order(phase, state)?;
    let plan = &cfg.plan;
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(cfg.seed, phase));

    let kmeans = if phase == 2 {
        let km = quantize_bank(&state.bank, plan.n_quant, rng.random(), plan.kmeans_max_iters)?;
        state.bank = km.bank.clone();
        Some(km)
    } else {
        None
    };

    let mut adam = Adam::new(&state.params);
    let base_lr = plan.base_lr(phase);
    let adaptive = plan.adaptive_margins[(phase - 1) as usize];
    let mut batches_run = 0;

    for epoch in 0..plan.epochs(phase) {
        let decayed = |base| lr_schedule(epoch, base, plan.lr_decay_factor, plan.lr_decay_every_epochs);
        let frozen = phase == 2 && epoch < plan.freeze_warmup_epochs;
        let base_lr = if frozen { plan.lr_warmup.unwrap_or(base_lr) } else { base_lr };
        let lr = if plan.decay_centers_only { base_lr } else { decayed(base_lr) };
        let center_lr = decayed(plan.center_lr);
        let trainable = |name: &str| match (phase, frozen) {
            (1, _) => !QUANT_HEAD.contains(&name),
            (_, true) => QUANT_HEAD.contains(&name),
            _ => true,
        };

        for anchors in epoch_batches(train.len(), plan.batch_size, &mut rng)? {
            let batch = build_batch(train, &anchors, plan.sampling, &state.params, &mut rng)?;
            let margins = (state.margins.m_x, state.margins.m_y);
            let diag = |e: Error| Error::NonFiniteLoss {
                phase,
                epoch,
                step: state.step,
                detail: e.to_string(),
            };
            let ev = evaluate(&state.params, &state.bank, &batch, margins, &cfg.loss, true).map_err(|e| match e {
                Error::NonFinitePart(_) | Error::NonFiniteGradient(_) | Error::ZeroNorm(_) => diag(e),
                other => other,
            })?;
            let grads = ev.grads.as_ref().expect("gradients requested");
            adam.step(&mut state.params, &grads.params, lr, trainable)?;
            sgd_center_step(&mut state.bank, &grads.centers, center_lr)?;
            if !state.params.is_finite() || !state.bank.centers.is_finite() {
                return Err(diag(Error::NonFiniteGradient("parameters after update".into())));
            }

            let (bx, by) = margin_ratios(&ev.triplet_img, &ev.triplet_txt)?;
            let b = &ev.breakdown;
            log.push(&[
                state.step.to_string(),
                phase.to_string(),
                epoch.to_string(),
                b.l_center.to_string(),
                b.l_triplet.to_string(),
                b.l_ce_img.to_string(),
                b.l_ce_txt.to_string(),
                b.total.to_string(),
                margins.0.to_string(),
                margins.1.to_string(),
                bx.to_string(),
                by.to_string(),
                lr.to_string(),
            ]);
            if adaptive {
                state.margins.record_batch(&ev.triplet_img, &ev.triplet_txt)?;
            }
            state.step += 1;
            batches_run += 1;
        }

        if let Some(dir) = out {
            save_checkpoint(dir.join(format!("phase{phase}.ckpt")), &state.checkpoint())?;
            write_metrics(dir, log)?;
        }
    }

    if let Some(dir) = out {
        // zero-epoch phases still leave a checkpoint of their entry state
        save_checkpoint(dir.join(format!("phase{phase}.ckpt")), &state.checkpoint())?;
        write_metrics(dir, log)?;
    }
    state.phase = phase;
    Ok(PhaseOutcome {
        kmeans,
        batches: batches_run,
    })
}

/// Runs phase 1 and then phases 2 and 3 unless they have zero epochs. Only a
/// trailing run of phases may be skipped.
pub fn train(train: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<(TrainState, MetricsLog)> {
    let p = &cfg.plan;
    if p.phase2_epochs == 0 && p.phase3_epochs > 0 {
        return Err(Error::PhaseOrderViolation(
            "phase 3 needs the quantized bank from phase 2; phase2_epochs is 0".into(),
        ));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = init_state(train, cfg)?;
    let mut log = MetricsLog::default();
    run_phase(1, &mut state, train, cfg, &mut log, out)?;
    if p.phase2_epochs > 0 {
        run_phase(2, &mut state, train, cfg, &mut log, out)?;
    }
    if p.phase3_epochs > 0 {
        run_phase(3, &mut state, train, cfg, &mut log, out)?;
    }
    Ok((state, log))
}
