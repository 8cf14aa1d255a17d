//! Train-then-evaluate pipelines: one experiment over several seeds, and
//! sweeps that repeat it along the subset fraction or the loss weights.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig, MetricsReport, ReportMeta, SeedModels, Setting};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::imputer::Imputer;
use crate::trainer::{pretrain_then_freeze, train_joint, train_reference, RunRecord, TrainConfig};

/// How the TOI pair is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Joint,
    /// Imputer pretrained alone, then frozen while the forecaster trains.
    Pretrain,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::Pretrain => "pretrain",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "pretrain" => Ok(TrainMode::Pretrain),
            other => Err(Error::config(format!("unknown mode `{other}` (joint or pretrain)"))),
        }
    }
}

/// Training records labelled by stage.
pub type Records = Vec<(String, RunRecord)>;

/// Trains the imputer and forecaster of the TOI setting. Records are
/// labelled by stage.
pub fn train_toi(data: &PreparedData, cfg: &TrainConfig, mode: TrainMode) -> Result<(Imputer, Forecaster, Records)> {
    match mode {
        TrainMode::Joint => {
            let (imp, fc, rec) = train_joint(data, cfg)?;
            Ok((imp, fc, vec![("joint".into(), rec)]))
        }
        TrainMode::Pretrain => {
            let p = pretrain_then_freeze(data, cfg)?;
            Ok((
                p.imputer,
                p.forecaster,
                vec![
                    ("pretrain_stage1".into(), p.stage1),
                    ("pretrain_stage2".into(), p.stage2),
                ],
            ))
        }
    }
}

/// Everything trained for one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub models: SeedModels,
    pub records: Vec<(String, RunRecord)>,
}

/// Trains the models one seed needs for `settings`. A reference forecaster
/// already trained for this seed can be passed in; it depends on neither
/// the loss weights nor the subset fraction.
pub fn train_seed(
    data: &PreparedData,
    cfg: &TrainConfig,
    mode: TrainMode,
    settings: &[Setting],
    reference: Option<Forecaster>,
) -> Result<SeedRun> {
    let mut records = Vec::new();
    let reference = match reference {
        Some(f) => f,
        None => {
            let (f, rec) = train_reference(data, cfg)?;
            records.push(("reference".into(), rec));
            f
        }
    };
    let toi = if settings.iter().any(|s| s.needs_imputer()) {
        let (imp, fc, recs) = train_toi(data, cfg, mode)?;
        records.extend(recs);
        Some((imp, fc))
    } else {
        None
    };
    Ok(SeedRun {
        models: SeedModels {
            seed: cfg.seed,
            reference,
            toi,
        },
        records,
    })
}

/// Reference forecasters by seed, reused across the cells of a sweep.
pub type ReferenceCache = BTreeMap<u64, Forecaster>;

/// Trains every seed and evaluates them together.
pub fn run_experiment(
    data: &PreparedData,
    cfg: &TrainConfig,
    seeds: &[u64],
    mode: TrainMode,
    eval: &EvalConfig,
    meta: ReportMeta,
    references: &mut ReferenceCache,
) -> Result<(MetricsReport, Vec<SeedRun>)> {
    if seeds.is_empty() {
        return Err(Error::config("no seeds given"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        let run = train_seed(data, &c, mode, &eval.settings, references.get(&seed).cloned())?;
        references.insert(seed, run.models.reference.clone());
        runs.push(run);
    }
    let models: Vec<SeedModels> = runs.iter().map(|r| r.models.clone()).collect();
    Ok((evaluate(data, &models, eval, meta)?, runs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Subset fraction, used for both training and evaluation.
    K,
    /// Imputation weight; the forecasting weight is `1 - alpha`.
    Alpha,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Alpha => "alpha",
        }
    }

    /// The training and evaluation configs of one sweep cell.
    pub fn apply(self, cfg: &TrainConfig, eval: &EvalConfig, value: f64) -> Result<(TrainConfig, EvalConfig)> {
        let (mut c, mut e) = (cfg.clone(), eval.clone());
        match self {
            SweepAxis::K => {
                c.k = value;
                e.k = value;
            }
            SweepAxis::Alpha => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::config(format!("alpha must lie in [0, 1], got {value}")));
                }
                c.alpha = value;
                c.beta = 1.0 - value;
            }
        }
        c.validate()?;
        e.validate()?;
        Ok((c, e))
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "alpha" => Ok(SweepAxis::Alpha),
            other => Err(Error::config(format!("unknown sweep axis `{other}` (k or alpha)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn format_text(&self) -> String {
        let mut out = String::new();
        let settings: Vec<Setting> = self
            .rows
            .first()
            .map(|r| r.report.settings.iter().map(|s| s.setting).collect())
            .unwrap_or_default();
        let _ = write!(out, "{:>8}", self.axis.name());
        for s in &settings {
            let _ = write!(out, "  {:>24}", format!("{s} MAE"));
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:>8}", row.value);
            for s in &settings {
                let cell = row
                    .report
                    .setting(*s)
                    .map(|x| format!("{:.4} ({:.4})", x.mae.mean, x.mae.std))
                    .unwrap_or_default();
                let _ = write!(out, "  {cell:>24}");
            }
            out.push('\n');
        }
        out
    }

    pub fn format_csv(&self) -> String {
        let mut out = format!("{},seed,setting,metric,value\n", self.axis.name());
        for row in &self.rows {
            for line in super::format_csv(&row.report).lines().skip(1) {
                let _ = writeln!(out, "{},{line}", row.value);
            }
        }
        out
    }
}

/// Runs one full experiment per value of `axis`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    data: &PreparedData,
    cfg: &TrainConfig,
    seeds: &[u64],
    mode: TrainMode,
    eval: &EvalConfig,
    axis: SweepAxis,
    values: &[f64],
    meta: &ReportMeta,
    references: &mut ReferenceCache,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let (c, e) = axis.apply(cfg, eval, v)?;
        let (report, _) = run_experiment(data, &c, seeds, mode, &e, meta.clone(), references)?;
        rows.push(SweepRow { value: v, report });
    }
    Ok(SweepTable { axis, rows })
}

/// Subset-fraction sweep; models are retrained at each `k`.
pub fn k_sweep(
    data: &PreparedData,
    cfg: &TrainConfig,
    seeds: &[u64],
    eval: &EvalConfig,
    k_values: &[f64],
    meta: &ReportMeta,
) -> Result<SweepTable> {
    sweep(
        data,
        cfg,
        seeds,
        TrainMode::Joint,
        eval,
        SweepAxis::K,
        k_values,
        meta,
        &mut ReferenceCache::new(),
    )
}

/// Loss-weight sweep over `alpha` with `beta = 1 - alpha`.
pub fn weight_sweep(
    data: &PreparedData,
    cfg: &TrainConfig,
    seeds: &[u64],
    eval: &EvalConfig,
    alphas: &[f64],
    meta: &ReportMeta,
) -> Result<SweepTable> {
    sweep(
        data,
        cfg,
        seeds,
        TrainMode::Joint,
        eval,
        SweepAxis::Alpha,
        alphas,
        meta,
        &mut ReferenceCache::new(),
    )
}
