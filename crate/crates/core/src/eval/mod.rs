//! Evaluation protocol: the Partial, Oracle and TOI settings, non-learned
//! filling baselines, subset-restricted metrics and multi-seed aggregation.

mod report;
pub mod sweep;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{gather_windows, pearson, PreparedData};
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::imputer::Imputer;
use crate::rng::{derive_seed, rng_from, stream};
use crate::subset::{apply_mask, mask_rows, SubsetMask};
use crate::tensor::Tensor;

pub use report::{format_csv, format_text};

/// Non-learned ways to fill the rows of missing variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Filler {
    Zero,
    Mean,
    Gaussian,
    NearestTrainVariable,
}

impl Filler {
    pub const ALL: [Filler; 4] = [
        Filler::Zero,
        Filler::Mean,
        Filler::Gaussian,
        Filler::NearestTrainVariable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Filler::Zero => "zero",
            Filler::Mean => "mean",
            Filler::Gaussian => "gaussian",
            Filler::NearestTrainVariable => "nearest_train_variable",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    /// Missing variables zero-filled, no imputation.
    Partial,
    /// Every variable available; still scored on the subset only.
    Oracle,
    /// Missing variables reconstructed by the trained imputer.
    Toi,
    Baseline(Filler),
}

impl Setting {
    pub fn all() -> Vec<Setting> {
        let mut v = vec![Setting::Partial, Setting::Oracle, Setting::Toi];
        v.extend(Filler::ALL.map(Setting::Baseline));
        v
    }

    pub fn needs_imputer(self) -> bool {
        self == Setting::Toi
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Partial => f.write_str("partial"),
            Setting::Oracle => f.write_str("oracle"),
            Setting::Toi => f.write_str("toi"),
            Setting::Baseline(b) => write!(f, "baseline:{}", b.name()),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(Setting::Partial),
            "oracle" => Ok(Setting::Oracle),
            "toi" => Ok(Setting::Toi),
            _ => {
                let name = s
                    .strip_prefix("baseline:")
                    .ok_or_else(|| Error::config(format!("unknown setting `{s}`")))?;
                Filler::ALL
                    .into_iter()
                    .find(|f| f.name() == name)
                    .map(Setting::Baseline)
                    .ok_or_else(|| Error::config(format!("unknown baseline `{name}`")))
            }
        }
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}

/// Parses a comma separated settings list such as `partial,toi,baseline:zero`.
pub fn parse_settings(list: &str) -> Result<Vec<Setting>> {
    let mut out: Vec<Setting> = Vec::new();
    for s in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let s: Setting = s.parse()?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(Error::config("no evaluation settings given"));
    }
    Ok(out)
}

/// Per-variable statistics of the normalized train split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Pearson correlations between variables, row major `N x N`.
    pub corr: Vec<f64>,
}

impl TrainStats {
    pub fn fit(data: &PreparedData) -> Self {
        let n = data.n_vars();
        let r = data.splits.train;
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|v| (r.start..r.end).map(|t| data.normalized.data()[t * n + v]).collect())
            .collect();
        let len = r.len() as f64;
        let mean: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / len).collect();
        let std = cols
            .iter()
            .zip(&mean)
            .map(|(c, m)| (c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / len).sqrt())
            .collect();
        let mut corr = vec![0.0; n * n];
        for a in 0..n {
            corr[a * n + a] = 1.0;
            for b in a + 1..n {
                let c = pearson(&cols[a], &cols[b]);
                corr[a * n + b] = c;
                corr[b * n + a] = c;
            }
        }
        Self { mean, std, corr }
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    /// The available variable most correlated (in absolute value) with
    /// `var`, and the sign of that correlation. Ties go to the lower index.
    pub fn nearest(&self, var: usize, mask: &SubsetMask) -> Option<(usize, f64)> {
        let n = self.n_vars();
        let mut best: Option<(usize, f64)> = None;
        for u in mask.indices() {
            let c = self.corr[var * n + u];
            if best.is_none_or(|(_, b)| c.abs() > b.abs()) {
                best = Some((u, c));
            }
        }
        best.map(|(u, c)| (u, if c < 0.0 { -1.0 } else { 1.0 }))
    }
}

/// Fills the missing rows of a `(B, N, L)` lookback; available rows are
/// copied unchanged. Only the Gaussian filler consumes `rng`.
pub fn fill<R: Rng + ?Sized>(
    filler: Filler,
    x: &Tensor,
    mask: &SubsetMask,
    stats: &TrainStats,
    rng: &mut R,
) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() != 3 || s[1] != mask.n_vars() || stats.n_vars() != mask.n_vars() {
        return Err(crate::tensor::shape_err("fill", &s, &[mask.n_vars()]));
    }
    let (b, n, l) = (s[0], s[1], s[2]);
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for v in mask.missing() {
            let row = (bi * n + v) * l;
            let cells = &mut dst[row..row + l];
            match filler {
                Filler::Zero => cells.fill(0.0),
                Filler::Mean => cells.fill(stats.mean[v]),
                Filler::Gaussian => {
                    for c in cells.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *c = stats.mean[v] + stats.std[v] * z;
                    }
                }
                Filler::NearestTrainVariable => match stats.nearest(v, mask) {
                    Some((u, sign)) => {
                        let from = (bi * n + u) * l;
                        for (c, y) in cells.iter_mut().zip(&src[from..from + l]) {
                            *c = sign * y;
                        }
                    }
                    None => cells.fill(0.0),
                },
            }
        }
    }
    Ok(out)
}

fn check_same_shape(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_shape(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_shape(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// Running error sums over the available rows of `(B, N, Q)` forecasts.
#[derive(Clone, Copy, Debug, Default)]
struct ErrorSums {
    abs: f64,
    sq: f64,
    count: usize,
}

impl ErrorSums {
    fn add(&mut self, pred: &Tensor, truth: &Tensor, mask: &SubsetMask) {
        let q = pred.shape()[2];
        let n = mask.n_vars();
        for (row, (p, t)) in pred.data().chunks(q).zip(truth.data().chunks(q)).enumerate() {
            if mask.is_available(row % n) {
                for (a, b) in p.iter().zip(t) {
                    let e = a - b;
                    self.abs += e.abs();
                    self.sq += e * e;
                }
                self.count += q;
            }
        }
    }

    fn finish(self) -> RunMetrics {
        let c = self.count as f64;
        RunMetrics {
            mae: self.abs / c,
            rmse: (self.sq / c).sqrt(),
        }
    }
}

/// `(E_partial - E_ours) / E_partial * 100`.
pub fn delta_subset(e_partial: f64, e_ours: f64) -> Result<f64> {
    relative_gain("delta_subset", e_partial, e_ours)
}

/// `(E_oracle - E_ours) / E_oracle * 100`.
pub fn delta_improve(e_oracle: f64, e_ours: f64) -> Result<f64> {
    relative_gain("delta_improve", e_oracle, e_ours)
}

fn relative_gain(what: &str, base: f64, ours: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(Error::Domain(format!(
            "{what}: reference error must be > 0, got {base}"
        )));
    }
    Ok((base - ours) / base * 100.0)
}

/// Trained models of one seed.
#[derive(Clone, Debug)]
pub struct SeedModels {
    pub seed: u64,
    /// Forecaster trained on complete data; serves Partial, Oracle and the
    /// baselines.
    pub reference: Forecaster,
    /// Imputer and forecaster for the TOI setting.
    pub toi: Option<(Imputer, Forecaster)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub settings: Vec<Setting>,
    pub k: f64,
    pub subset_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: vec![Setting::Partial, Setting::Oracle, Setting::Toi],
            k: 0.15,
            subset_draws: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() {
            return Err(Error::config("no evaluation settings given"));
        }
        if self.subset_draws == 0 {
            return Err(Error::config("subset_draws must be >= 1"));
        }
        crate::subset::subset_size(2, self.k).map(|_| ())
    }
}

/// Test windows and subsets one seed is scored on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub k: f64,
    pub windows: Vec<usize>,
    pub masks: Vec<Vec<usize>>,
}

impl Manifest {
    pub fn new(data: &PreparedData, seed: u64, k: f64, draws: usize) -> Result<Self> {
        let masks = eval_masks(data.n_vars(), k, seed, draws)?;
        Ok(Self {
            seed,
            k,
            windows: data.windows.test.clone(),
            masks: masks.iter().map(SubsetMask::indices).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("manifest serializes")
    }
}

/// The evaluation subsets of one seed.
pub fn eval_masks(n: usize, k: f64, seed: u64, draws: usize) -> Result<Vec<SubsetMask>> {
    (0..draws)
        .map(|d| SubsetMask::from_seed(n, k, derive_seed(seed, &[stream::EVAL_SUBSET, d as u64])))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mae: f64,
    pub rmse: f64,
}

/// Results of one setting for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingRun {
    pub setting: Setting,
    pub seed: u64,
    /// One entry per subset draw.
    pub runs: Vec<RunMetrics>,
    #[serde(skip)]
    pub manifest: Option<Manifest>,
}

impl SettingRun {
    pub fn mean(&self) -> RunMetrics {
        let n = self.runs.len() as f64;
        RunMetrics {
            mae: self.runs.iter().map(|r| r.mae).sum::<f64>() / n,
            rmse: self.runs.iter().map(|r| r.rmse).sum::<f64>() / n,
        }
    }
}

const EVAL_BATCH: usize = 256;

/// Scores one setting on the test split: every subset draw of the seed,
/// every test window, forecasts denormalized and compared with the raw
/// series on the available variables only.
pub fn run_setting(
    data: &PreparedData,
    models: &SeedModels,
    setting: Setting,
    stats: &TrainStats,
    k: f64,
    draws: usize,
) -> Result<SettingRun> {
    let manifest = Manifest::new(data, models.seed, k, draws)?;
    if manifest.windows.is_empty() {
        return Err(Error::config("test split has no windows"));
    }
    let n = data.n_vars();
    let mut runs = Vec::with_capacity(draws);
    for (d, idx) in manifest.masks.iter().enumerate() {
        let mask = SubsetMask::from_indices(n, idx)?;
        let mut fill_rng = rng_from(models.seed, &[stream::GAUSSIAN_FILL, d as u64]);
        let mut sums = ErrorSums::default();
        for chunk in manifest.windows.chunks(EVAL_BATCH) {
            let wb = data.batch(chunk)?;
            let pred = match setting {
                Setting::Oracle => models.reference.predict(&wb.lookback)?,
                Setting::Partial => models.reference.predict(&mask_rows(&wb.lookback, &mask)?)?,
                Setting::Baseline(f) => {
                    let x = fill(f, &mask_rows(&wb.lookback, &mask)?, &mask, stats, &mut fill_rng)?;
                    models.reference.predict(&x)?
                }
                Setting::Toi => {
                    let (imp, fc) = models
                        .toi
                        .as_ref()
                        .ok_or_else(|| Error::config("the toi setting needs a trained imputer"))?;
                    fc.predict(&imp.impute(&apply_mask(&wb, &mask)?)?)?
                }
            };
            let pred = data.normalizer.invert_batch(&pred);
            let truth = gather_windows(data.raw.values(), chunk, data.lookback, data.horizon)?.horizon;
            sums.add(&pred, &truth, &mask);
        }
        let m = sums.finish();
        if !(m.mae.is_finite() && m.rmse.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("{setting} metrics"),
            });
        }
        runs.push(m);
    }
    Ok(SettingRun {
        setting,
        seed: models.seed,
        runs,
        manifest: Some(manifest),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: Setting,
    pub mae: Stat,
    pub rmse: Stat,
    pub per_seed: Vec<SettingRun>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub backbone: String,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub k: f64,
    pub subset_size: usize,
    pub seeds: Vec<u64>,
    pub subset_draws: usize,
    pub test_windows: usize,
    pub settings: Vec<SettingSummary>,
    /// TOI against Partial, when both were evaluated.
    pub delta_subset: Option<Delta>,
    /// TOI against Oracle, when both were evaluated.
    pub delta_improve: Option<Delta>,
}

impl MetricsReport {
    pub fn setting(&self, s: Setting) -> Option<&SettingSummary> {
        self.settings.iter().find(|x| x.setting == s)
    }

    /// Mean MAE of `s` for one seed.
    pub fn seed_mae(&self, s: Setting, seed: u64) -> Option<f64> {
        self.setting(s)?
            .per_seed
            .iter()
            .find(|r| r.seed == seed)
            .map(|r| r.mean().mae)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates every requested setting for every seed and aggregates.
/// Fails if any two settings of one seed were scored on different windows
/// or subsets.
pub fn evaluate(
    data: &PreparedData,
    models: &[SeedModels],
    cfg: &EvalConfig,
    meta: ReportMeta,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::config("no seeds to evaluate"));
    }
    let stats = TrainStats::fit(data);
    let mut by_setting: BTreeMap<Setting, Vec<SettingRun>> = BTreeMap::new();
    for m in models {
        let mut reference: Option<Vec<u8>> = None;
        for &s in &cfg.settings {
            let run = run_setting(data, m, s, &stats, cfg.k, cfg.subset_draws)?;
            let bytes = run.manifest.as_ref().map(Manifest::to_bytes).unwrap_or_default();
            match &reference {
                None => reference = Some(bytes),
                Some(r) if *r != bytes => {
                    return Err(Error::Domain(format!(
                        "seed {}: setting {s} was scored on a different mask/window manifest",
                        m.seed
                    )))
                }
                Some(_) => {}
            }
            by_setting.entry(s).or_default().push(run);
        }
    }
    let settings: Vec<SettingSummary> = cfg
        .settings
        .iter()
        .map(|s| {
            let per_seed = by_setting.remove(s).unwrap_or_default();
            let all: Vec<RunMetrics> = per_seed.iter().flat_map(|r| r.runs.iter().copied()).collect();
            // Power-mean inequality, up to rounding.
            if let Some(r) = all.iter().find(|r| r.rmse < r.mae * (1.0 - 1e-12)) {
                return Err(Error::Domain(format!("{s}: RMSE {} below MAE {}", r.rmse, r.mae)));
            }
            Ok(SettingSummary {
                setting: *s,
                mae: Stat::of(&all.iter().map(|r| r.mae).collect::<Vec<_>>()),
                rmse: Stat::of(&all.iter().map(|r| r.rmse).collect::<Vec<_>>()),
                per_seed,
            })
        })
        .collect::<Result<_>>()?;
    let find = |s: Setting| settings.iter().find(|x| x.setting == s);
    let delta = |base: Setting, f: fn(f64, f64) -> Result<f64>| -> Result<Option<Delta>> {
        match (find(base), find(Setting::Toi)) {
            (Some(b), Some(t)) => Ok(Some(Delta {
                mae: f(b.mae.mean, t.mae.mean)?,
                rmse: f(b.rmse.mean, t.rmse.mean)?,
            })),
            _ => Ok(None),
        }
    };
    Ok(MetricsReport {
        delta_subset: delta(Setting::Partial, delta_subset)?,
        delta_improve: delta(Setting::Oracle, delta_improve)?,
        meta,
        k: cfg.k,
        subset_size: crate::subset::subset_size(data.n_vars(), cfg.k)?,
        seeds: models.iter().map(|m| m.seed).collect(),
        subset_draws: cfg.subset_draws,
        test_windows: data.windows.test.len(),
        settings,
    })
}

/// Manifests of every seed, for pairing audits.
pub fn manifests(data: &PreparedData, seeds: &[u64], cfg: &EvalConfig) -> Result<Vec<Manifest>> {
    seeds
        .iter()
        .map(|&s| Manifest::new(data, s, cfg.k, cfg.subset_draws))
        .collect()
}

#[cfg(test)]
mod tests;
