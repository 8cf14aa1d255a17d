//! Declarative run configuration (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toi_vsf::data::{load_csv, scale_dataset, synth_generate, PreparedData, RawSeries, SynthParams};
use toi_vsf::eval::{EvalConfig, Setting};
use toi_vsf::forecaster::Backbone;
use toi_vsf::imputer::ImputerHyper;
use toi_vsf::tensor::optim::AdamConfig;
use toi_vsf::trainer::TrainConfig;
use toi_vsf::{Error, Result};

/// Environment variable that replaces the configured seed list.
pub const SEED_ENV: &str = "TOI_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetBlock {
    /// Label used in reports; defaults to the file stem or "synth".
    pub name: Option<String>,
    /// CSV file, relative paths resolved against the config file.
    pub path: Option<PathBuf>,
    pub has_header: bool,
    /// Leading columns to drop, such as a timestamp.
    pub skip_cols: usize,
    pub synth: Option<SynthParams>,
    pub scale: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub split: [f64; 3],
}

impl Default for DatasetBlock {
    fn default() -> Self {
        Self {
            name: None,
            path: None,
            has_header: true,
            skip_cols: 0,
            synth: None,
            scale: 1.0,
            lookback: 12,
            horizon: 12,
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecasterBlock {
    pub backbone: Backbone,
    pub channels: usize,
}

impl Default for ForecasterBlock {
    fn default() -> Self {
        Self {
            backbone: Backbone::Mix,
            channels: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub per_batch_subsets: bool,
    pub patience: Option<usize>,
    pub clip_norm: f64,
    pub valid_subset_draws: usize,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            alpha: t.alpha,
            beta: t.beta,
            k: t.k,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            seeds: vec![0],
            per_batch_subsets: t.per_batch_subsets,
            patience: t.patience,
            clip_norm: t.clip_norm,
            valid_subset_draws: t.valid_subset_draws,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub settings: Vec<Setting>,
    pub subset_draws: usize,
    /// Default values of `sweep --axis k`.
    pub k_values: Vec<f64>,
    /// Default values of `sweep --axis alpha`.
    pub alphas: Vec<f64>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            settings: Setting::all(),
            subset_draws: 10,
            k_values: vec![0.15, 0.3, 0.5],
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub imputer: ImputerHyper,
    #[serde(default)]
    pub forecaster: ForecasterBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub eval: EvalBlock,
}

impl RunConfig {
    /// Reads and validates a config file; a relative dataset path is made
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.dataset.path, path.parent()) {
            if p.is_relative() {
                cfg.dataset.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.path.is_some() == d.synth.is_some() {
            return Err(Error::config("dataset needs exactly one of `path` and `synth`"));
        }
        if !(d.scale > 0.0) {
            return Err(Error::config(format!("dataset scale must be > 0, got {}", d.scale)));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::config("train.seeds must not be empty"));
        }
        if self.eval.subset_draws == 0 {
            return Err(Error::config("eval.subset_draws must be >= 1"));
        }
        self.train_config(self.train.seeds[0]).validate()?;
        self.imputer_check()?;
        Ok(())
    }

    fn imputer_check(&self) -> Result<()> {
        toi_vsf::imputer::ImputerConfig::new(2, self.dataset.lookback, self.imputer.clone()).map(|_| ())
    }

    /// Replaces the seed list with `TOI_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
            self.train.seeds = vec![seed];
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            alpha: t.alpha,
            beta: t.beta,
            k: t.k,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            seed,
            per_batch_subsets: t.per_batch_subsets,
            backbone: self.forecaster.backbone,
            forecaster_channels: self.forecaster.channels,
            imputer: self.imputer.clone(),
            patience: t.patience,
            valid_subset_draws: t.valid_subset_draws,
            clip_norm: t.clip_norm,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            settings: self.eval.settings.clone(),
            k: self.train.k,
            subset_draws: self.eval.subset_draws,
        }
    }

    pub fn dataset_name(&self) -> String {
        let d = &self.dataset;
        d.name.clone().unwrap_or_else(|| match &d.path {
            Some(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            None => "synth".into(),
        })
    }

    pub fn load_raw(&self) -> Result<RawSeries> {
        let d = &self.dataset;
        let raw = match (&d.path, &d.synth) {
            (Some(p), _) => load_csv(p, d.has_header, d.skip_cols)?,
            (None, Some(s)) => synth_generate(s)?,
            (None, None) => return Err(Error::config("dataset needs `path` or `synth`")),
        };
        if d.scale == 1.0 {
            Ok(raw)
        } else {
            scale_dataset(&raw, d.scale)
        }
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        let d = &self.dataset;
        let data = PreparedData::new(self.load_raw()?, d.lookback, d.horizon, d.split)?;
        for w in &data.warnings {
            log::warn!("{w}");
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"dataset": {"synth": {"n_vars": 6, "length": 300}}}"#).unwrap();
        assert_eq!(c.train.seeds, vec![0]);
        assert_eq!(c.imputer, ImputerHyper::default());
        assert_eq!(c.eval_config().k, 0.15);
        assert_eq!(c.dataset.synth.as_ref().unwrap().n_latents, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in [
            r#"{"dataset": {"synth": {}}, "trian": {}}"#,
            r#"{"dataset": {"synth": {}}, "train": {"epoch": 3}}"#,
            r#"{"dataset": {"synth": {"nvars": 3}}}"#,
            r#"{"dataset": {"synth": {}}, "train": {"alpha": 0.7, "beta": 0.7}}"#,
            r#"{"dataset": {"synth": {}}, "train": {"k": 0}}"#,
            r#"{"dataset": {"synth": {}}, "imputer": {"embed_dim": 30, "heads": 4}}"#,
            r#"{"dataset": {}}"#,
            r#"{"dataset": {"synth": {}, "path": "x.csv"}}"#,
            r#"{"dataset": {"synth": {}}, "eval": {"settings": ["toy"]}}"#,
        ] {
            let e = RunConfig::from_json(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }
}
