//! Joint training of imputer and forecaster, the two-stage pretrain ablation,
//! and the complete-data reference forecaster.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::forecaster::{forecast_loss, Backbone, Forecaster, ForecasterConfig};
use crate::imputer::{imputation_loss, Imputer, ImputerConfig, ImputerHyper};
use crate::rng::{derive_seed, rng_from, stream};
use crate::subset::{apply_mask, sample_subset, SubsetMask};
use crate::tensor::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tensor::{ParamStore, Tape, Tensor};

/// Forecaster init tags, so the models of one seed start independently.
pub mod init_tag {
    pub const JOINT: u64 = 0;
    pub const REFERENCE: u64 = 1;
    pub const PRETRAIN: u64 = 2;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Draw a fresh subset per batch instead of per epoch.
    pub per_batch_subsets: bool,
    pub backbone: Backbone,
    pub forecaster_channels: usize,
    pub imputer: ImputerHyper,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
    /// Fixed validation subsets per seed.
    pub valid_subset_draws: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            k: 0.15,
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            per_batch_subsets: false,
            backbone: Backbone::Mix,
            forecaster_channels: 8,
            imputer: ImputerHyper::default(),
            patience: None,
            valid_subset_draws: 2,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.alpha) || !unit(self.beta) || (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "alpha and beta must lie in [0, 1] and sum to 1, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::config(format!("k must be in (0, 1], got {}", self.k)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.valid_subset_draws == 0 {
            return Err(Error::config("epochs, batch_size and valid_subset_draws must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be > 0"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.adam.lr
            )));
        }
        Ok(())
    }

    pub fn imputer_config(&self, data: &PreparedData) -> Result<ImputerConfig> {
        ImputerConfig::new(data.n_vars(), data.lookback, self.imputer.clone())
    }

    pub fn forecaster_config(&self, data: &PreparedData) -> ForecasterConfig {
        ForecasterConfig {
            backbone: self.backbone,
            n_vars: data.n_vars(),
            lookback: data.lookback,
            horizon: data.horizon,
            channels: self.forecaster_channels,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub imp: f64,
    pub fcst: f64,
    pub total: f64,
}

/// What a training loop optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Imputer and forecaster together on `alpha * L_IMP + beta * L_FCST`.
    Joint,
    /// Imputer alone on L_IMP.
    ImputerOnly,
    /// Forecaster alone on the output of a frozen imputer.
    ForecasterOnImputed,
    /// Forecaster alone on complete lookbacks.
    ForecasterOnComplete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Available-variable indices drawn for this epoch (one list per batch
    /// when subsets are drawn per batch).
    pub subsets: Vec<Vec<usize>>,
    pub train: LossTriple,
    pub valid: LossTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: Phase,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters are kept: the first minimum of the selection
    /// loss (validation L_FCST, or L_IMP for an imputer-only phase).
    pub best_epoch: usize,
    pub best_valid: f64,
    pub valid_masks: Vec<Vec<usize>>,
    #[serde(default)]
    pub checkpoint: Vec<String>,
    #[serde(default)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Validation loss used for model selection in one epoch.
    pub fn selection_loss(&self, e: &EpochRecord) -> f64 {
        match self.phase {
            Phase::ImputerOnly => e.valid.imp,
            _ => e.valid.fcst,
        }
    }
}

/// Optimizer state for whichever models a phase trains.
struct Opt {
    imputer: Option<Adam>,
    forecaster: Option<Adam>,
}

fn ensure_finite(name: &str, grads: &[Tensor], store: &ParamStore) -> Result<()> {
    for (g, p) in grads.iter().zip(store.iter()) {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("{name} gradient of `{}`", p.name),
            });
        }
    }
    Ok(())
}

/// Forward pass for one batch under `phase`. Returns the tape, the loss
/// triple and, for gradient use, the handles of each trainable store.
struct StepGraph {
    tape: Tape,
    imp_bound: Option<crate::tensor::Bound>,
    fc_bound: Option<crate::tensor::Bound>,
    total: Option<crate::tensor::Var>,
    losses: LossTriple,
}

#[allow(clippy::too_many_arguments)]
fn build_step(
    phase: Phase,
    imputer: Option<&Imputer>,
    forecaster: Option<&Forecaster>,
    lookback: &Tensor,
    horizon: &Tensor,
    mask: &SubsetMask,
    alpha: f64,
    beta: f64,
    trainable: bool,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let wb = crate::data::WindowBatch {
        lookback: lookback.clone(),
        horizon: horizon.clone(),
        start_times: vec![0; lookback.shape()[0]],
    };
    let imp_trains = trainable && matches!(phase, Phase::Joint | Phase::ImputerOnly);
    let fc_trains = trainable
        && matches!(
            phase,
            Phase::Joint | Phase::ForecasterOnImputed | Phase::ForecasterOnComplete
        );
    let target = tape.constant(lookback.clone())?;
    let mut losses = LossTriple::default();
    let mut imp_bound = None;
    let mut fc_bound = None;

    let fc_input = match phase {
        Phase::ForecasterOnComplete => target,
        _ => {
            let imp = imputer.expect("phase needs an imputer");
            let sb = apply_mask(&wb, mask)?;
            let b = imp.params().bind(&mut tape, imp_trains)?;
            let x = tape.constant(sb.inputs)?;
            let u = imp.forward(&mut tape, &b, x, &sb.mask_channel)?;
            imp_bound = Some(b);
            u
        }
    };
    let l_imp = if phase == Phase::ForecasterOnComplete {
        None
    } else {
        let l = imputation_loss(&mut tape, fc_input, target)?;
        losses.imp = tape.value(l).item();
        Some(l)
    };
    let l_fc = match (phase, forecaster) {
        (Phase::ImputerOnly, _) | (_, None) => None,
        (_, Some(f)) => {
            let b = f.params().bind(&mut tape, fc_trains)?;
            let pred = f.forward(&mut tape, &b, fc_input)?;
            let h = tape.constant(horizon.clone())?;
            let l = forecast_loss(&mut tape, pred, h)?;
            losses.fcst = tape.value(l).item();
            fc_bound = Some(b);
            Some(l)
        }
    };
    // Only terms with nonzero weight enter the graph, so a zero weight cuts
    // the gradient path instead of sending exact zeros through it.
    let (wi, wf) = match phase {
        Phase::Joint => (alpha, beta),
        Phase::ImputerOnly => (1.0, 0.0),
        _ => (0.0, 1.0),
    };
    let mut total = None;
    for (l, w) in [(l_imp, wi), (l_fc, wf)] {
        if let (Some(l), true) = (l, w != 0.0) {
            let term = if w == 1.0 { l } else { tape.scale(l, w)? };
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
    }
    losses.total = wi * losses.imp + wf * losses.fcst;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    Ok(StepGraph {
        tape,
        imp_bound,
        fc_bound,
        total,
        losses,
    })
}

/// One optimization step of the joint objective: impute the masked batch,
/// forecast from the reconstruction, and update both models from one
/// backward pass of `alpha * L_IMP + beta * L_FCST`.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    imputer: &mut Imputer,
    forecaster: &mut Forecaster,
    imp_opt: &mut Adam,
    fc_opt: &mut Adam,
    batch: &crate::data::WindowBatch,
    mask: &SubsetMask,
    alpha: f64,
    beta: f64,
    clip_norm: f64,
) -> Result<LossTriple> {
    let mut opt = Opt {
        imputer: Some(imp_opt.clone()),
        forecaster: Some(fc_opt.clone()),
    };
    let losses = step(
        Phase::Joint,
        Some(imputer),
        Some(forecaster),
        &mut opt,
        &batch.lookback,
        &batch.horizon,
        mask,
        alpha,
        beta,
        clip_norm,
    )?;
    *imp_opt = opt.imputer.unwrap();
    *fc_opt = opt.forecaster.unwrap();
    Ok(losses)
}

#[allow(clippy::too_many_arguments)]
fn step(
    phase: Phase,
    imputer: Option<&mut Imputer>,
    forecaster: Option<&mut Forecaster>,
    opt: &mut Opt,
    lookback: &Tensor,
    horizon: &Tensor,
    mask: &SubsetMask,
    alpha: f64,
    beta: f64,
    clip_norm: f64,
) -> Result<LossTriple> {
    let mut g = build_step(
        phase,
        imputer.as_deref(),
        forecaster.as_deref(),
        lookback,
        horizon,
        mask,
        alpha,
        beta,
        true,
    )?;
    let Some(total) = g.total else {
        return Ok(g.losses);
    };
    g.tape.backward(total)?;
    let on_path = |b: &Option<crate::tensor::Bound>, tape: &Tape| {
        b.as_ref()
            .is_some_and(|b| b.vars().iter().any(|v| tape.grad(*v).is_some()))
    };
    let mut ig = match (&imputer, on_path(&g.imp_bound, &g.tape) && opt.imputer.is_some()) {
        (Some(m), true) => m.params().grads(&g.tape, g.imp_bound.as_ref().unwrap()),
        _ => Vec::new(),
    };
    let mut fg = match (&forecaster, on_path(&g.fc_bound, &g.tape) && opt.forecaster.is_some()) {
        (Some(m), true) => m.params().grads(&g.tape, g.fc_bound.as_ref().unwrap()),
        _ => Vec::new(),
    };
    if let Some(m) = &imputer {
        ensure_finite("imputer", &ig, m.params())?;
    }
    if let Some(m) = &forecaster {
        ensure_finite("forecaster", &fg, m.params())?;
    }
    clip_grad_norm(&mut [&mut ig, &mut fg], clip_norm);
    if let (Some(m), Some(o), false) = (imputer, opt.imputer.as_mut(), ig.is_empty()) {
        o.step(m.params_mut(), &ig);
    }
    if let (Some(m), Some(o), false) = (forecaster, opt.forecaster.as_mut(), fg.is_empty()) {
        o.step(m.params_mut(), &fg);
    }
    Ok(g.losses)
}

/// Gradients of one joint objective without updating anything, in store
/// order: `(imputer grads, forecaster grads)`.
pub fn joint_gradients(
    imputer: &Imputer,
    forecaster: &Forecaster,
    batch: &crate::data::WindowBatch,
    mask: &SubsetMask,
    alpha: f64,
    beta: f64,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut g = build_step(
        Phase::Joint,
        Some(imputer),
        Some(forecaster),
        &batch.lookback,
        &batch.horizon,
        mask,
        alpha,
        beta,
        true,
    )?;
    let total = g.total.ok_or_else(|| Error::config("both loss weights are zero"))?;
    g.tape.backward(total)?;
    Ok((
        imputer.params().grads(&g.tape, g.imp_bound.as_ref().unwrap()),
        forecaster.params().grads(&g.tape, g.fc_bound.as_ref().unwrap()),
    ))
}

/// Fixed validation subsets for one seed.
pub fn valid_masks(n: usize, k: f64, seed: u64, draws: usize) -> Result<Vec<SubsetMask>> {
    (0..draws)
        .map(|d| SubsetMask::from_seed(n, k, derive_seed(seed, &[stream::VALID_SUBSET, d as u64])))
        .collect()
}

const EVAL_BATCH: usize = 256;

/// Mean validation losses of a phase's models under the given masks.
fn validate(
    phase: Phase,
    data: &PreparedData,
    imputer: Option<&Imputer>,
    forecaster: Option<&Forecaster>,
    masks: &[SubsetMask],
    alpha: f64,
    beta: f64,
) -> Result<LossTriple> {
    let starts = &data.windows.valid;
    if starts.is_empty() {
        return Err(Error::config("validation split has no windows"));
    }
    let mut acc = LossTriple::default();
    let mut weight = 0.0;
    let full = [SubsetMask::full(data.n_vars())];
    let masks = if phase == Phase::ForecasterOnComplete {
        &full[..]
    } else {
        masks
    };
    for mask in masks {
        for chunk in starts.chunks(EVAL_BATCH) {
            let wb = data.batch(chunk)?;
            let g = build_step(
                phase,
                imputer,
                forecaster,
                &wb.lookback,
                &wb.horizon,
                mask,
                alpha,
                beta,
                false,
            )?;
            let w = chunk.len() as f64;
            acc.imp += w * g.losses.imp;
            acc.fcst += w * g.losses.fcst;
            acc.total += w * g.losses.total;
            weight += w;
        }
    }
    acc.imp /= weight;
    acc.fcst /= weight;
    acc.total /= weight;
    Ok(acc)
}

/// Models produced by a training loop.
#[derive(Clone, Debug)]
pub struct Trained {
    pub imputer: Option<Imputer>,
    pub forecaster: Option<Forecaster>,
    pub record: RunRecord,
}

/// Epoch loop shared by every phase: per-epoch (or per-batch) subsets,
/// shuffled batches, validation, and best-epoch selection.
pub fn train_phase(
    phase: Phase,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut imputer: Option<Imputer>,
    mut forecaster: Option<Forecaster>,
) -> Result<Trained> {
    cfg.validate()?;
    let started = Instant::now();
    let n = data.n_vars();
    let seed = cfg.seed;
    let needs_imp = phase != Phase::ForecasterOnComplete;
    let needs_fc = phase != Phase::ImputerOnly;
    if (needs_imp && imputer.is_none()) || (needs_fc && forecaster.is_none()) {
        return Err(Error::config(format!("phase {phase:?} is missing a model")));
    }
    if data.windows.train.is_empty() {
        return Err(Error::config("training split has no windows"));
    }
    let mut opt = Opt {
        imputer: match (&imputer, matches!(phase, Phase::Joint | Phase::ImputerOnly)) {
            (Some(m), true) => Some(Adam::new(cfg.adam, m.params())?),
            _ => None,
        },
        forecaster: match (&forecaster, needs_fc) {
            (Some(m), true) => Some(Adam::new(cfg.adam, m.params())?),
            _ => None,
        },
    };
    let vmasks = valid_masks(n, cfg.k, seed, cfg.valid_subset_draws)?;
    let mut record = RunRecord {
        phase,
        seed,
        config: cfg.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid: f64::INFINITY,
        valid_masks: vmasks.iter().map(SubsetMask::indices).collect(),
        checkpoint: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let mut best = (imputer.clone(), forecaster.clone());
    let mut order = data.windows.train.clone();
    for epoch in 0..cfg.epochs {
        let mut subset_rng = rng_from(seed, &[stream::TRAIN_SUBSET, epoch as u64]);
        order.clone_from(&data.windows.train);
        order.shuffle(&mut rng_from(seed, &[stream::SHUFFLE, epoch as u64]));
        let mut mask = sample_subset(n, cfg.k, &mut subset_rng)?;
        let mut subsets = vec![mask.indices()];
        let mut sums = LossTriple::default();
        let mut seen = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.per_batch_subsets && bi > 0 {
                mask = sample_subset(n, cfg.k, &mut subset_rng)?;
                subsets.push(mask.indices());
            }
            let wb = data.batch(chunk)?;
            let l = step(
                phase,
                imputer.as_mut(),
                forecaster.as_mut(),
                &mut opt,
                &wb.lookback,
                &wb.horizon,
                &mask,
                cfg.alpha,
                cfg.beta,
                cfg.clip_norm,
            )?;
            let w = chunk.len() as f64;
            sums.imp += w * l.imp;
            sums.fcst += w * l.fcst;
            sums.total += w * l.total;
            seen += w;
        }
        let train = LossTriple {
            imp: sums.imp / seen,
            fcst: sums.fcst / seen,
            total: sums.total / seen,
        };
        let valid = validate(
            phase,
            data,
            imputer.as_ref(),
            forecaster.as_ref(),
            &vmasks,
            cfg.alpha,
            cfg.beta,
        )?;
        let rec = EpochRecord {
            epoch,
            subsets,
            train,
            valid,
        };
        let sel = record.selection_loss(&rec);
        debug!(
            "{phase:?} seed {seed} epoch {epoch}: train {:.5} valid imp {:.5} fcst {:.5}",
            train.total, valid.imp, valid.fcst
        );
        record.epochs.push(rec);
        if sel < record.best_valid {
            record.best_valid = sel;
            record.best_epoch = epoch;
            best = (imputer.clone(), forecaster.clone());
        } else if cfg.patience.is_some_and(|p| epoch - record.best_epoch >= p) {
            info!("{phase:?} seed {seed}: early stop at epoch {epoch}");
            break;
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    info!(
        "{phase:?} seed {seed}: best epoch {} valid {:.5} ({:.1}s)",
        record.best_epoch, record.best_valid, record.wall_clock_secs
    );
    Ok(Trained {
        imputer: best.0,
        forecaster: best.1,
        record,
    })
}

/// Forecaster trained on complete inputs; it serves the Partial, Oracle and
/// baseline settings.
pub fn train_reference(data: &PreparedData, cfg: &TrainConfig) -> Result<(Forecaster, RunRecord)> {
    let f = Forecaster::new(cfg.forecaster_config(data), cfg.seed, init_tag::REFERENCE)?;
    let t = train_phase(Phase::ForecasterOnComplete, data, cfg, None, Some(f))?;
    Ok((t.forecaster.unwrap(), t.record))
}

/// Imputer and forecaster trained jointly.
pub fn train_joint(data: &PreparedData, cfg: &TrainConfig) -> Result<(Imputer, Forecaster, RunRecord)> {
    let imp = Imputer::new(cfg.imputer_config(data)?, cfg.seed)?;
    let f = Forecaster::new(cfg.forecaster_config(data), cfg.seed, init_tag::JOINT)?;
    let t = train_phase(Phase::Joint, data, cfg, Some(imp), Some(f))?;
    Ok((t.imputer.unwrap(), t.forecaster.unwrap(), t.record))
}

/// Result of the two-stage ablation.
#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Stage 1: imputer trained on L_IMP alone.
    pub imputer: Imputer,
    /// Stage 2: forecaster trained on the frozen imputer's output.
    pub forecaster: Forecaster,
    pub stage1: RunRecord,
    pub stage2: RunRecord,
}

/// Pretrains the imputer on reconstruction alone, freezes it, then trains a
/// fresh forecaster on its reconstructions.
pub fn pretrain_then_freeze(data: &PreparedData, cfg: &TrainConfig) -> Result<Pretrained> {
    let imp = Imputer::new(cfg.imputer_config(data)?, cfg.seed)?;
    let s1 = train_phase(Phase::ImputerOnly, data, cfg, Some(imp), None)?;
    let imputer = s1.imputer.unwrap();
    let f = Forecaster::new(cfg.forecaster_config(data), cfg.seed, init_tag::PRETRAIN)?;
    let s2 = train_phase(Phase::ForecasterOnImputed, data, cfg, Some(imputer.clone()), Some(f))?;
    debug_assert_eq!(s2.imputer.as_ref(), Some(&imputer));
    Ok(Pretrained {
        imputer,
        forecaster: s2.forecaster.unwrap(),
        stage1: s1.record,
        stage2: s2.record,
    })
}
