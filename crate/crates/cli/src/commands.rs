//! The subcommands, as library functions so they can be driven in-process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};
use toi_vsf::checkpoint::{load_forecaster, load_imputer, save_forecaster, save_imputer};
use toi_vsf::data::{synth_generate, write_csv, SynthParams};
use toi_vsf::eval::sweep::{train_seed, SweepAxis, SweepRow, SweepTable, TrainMode};
use toi_vsf::eval::{evaluate, format_csv, format_text, manifests, MetricsReport, ReportMeta, SeedModels, Setting};
use toi_vsf::forecaster::Forecaster;
use toi_vsf::gradcheck::{self, CheckReport, GradcheckConfig};
use toi_vsf::tensor::OpKind;
use toi_vsf::trainer::{train_reference, RunRecord};
use toi_vsf::{Error, Result};

use crate::config::RunConfig;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn synth(out: &Path, params: &SynthParams) -> Result<()> {
    let raw = synth_generate(params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_csv(&raw, out)
}

pub const MANIFEST: &str = "manifest.json";

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// What `train` leaves in each seed directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub mode: TrainMode,
    pub seed: u64,
    /// The effective config after flags and environment were applied.
    pub config: RunConfig,
    /// Checkpoint file per role: `reference`, `imputer`, `forecaster`.
    pub checkpoints: BTreeMap<String, String>,
    /// Training records by stage label.
    pub stages: Vec<(String, RunRecord)>,
}

/// Trains every configured seed into `out_dir/seed-{s}/`.
pub fn train(cfg: &RunConfig, out_dir: &Path, mode: TrainMode) -> Result<Vec<TrainManifest>> {
    let data = cfg.prepare()?;
    let mut out = Vec::new();
    for &seed in &cfg.train.seeds {
        let dir = seed_dir(out_dir, seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tc = cfg.train_config(seed);
        let run = train_seed(&data, &tc, mode, &[Setting::Toi], None)?;
        let mut checkpoints = BTreeMap::new();
        save_forecaster(dir.join("reference.ckpt"), &run.models.reference)?;
        checkpoints.insert("reference".to_owned(), "reference.ckpt".to_owned());
        let (imp, fc) = run.models.toi.as_ref().expect("toi models were requested");
        save_imputer(dir.join("imputer.ckpt"), imp)?;
        save_forecaster(dir.join("forecaster.ckpt"), fc)?;
        checkpoints.insert("imputer".to_owned(), "imputer.ckpt".to_owned());
        checkpoints.insert("forecaster".to_owned(), "forecaster.ckpt".to_owned());
        let stages = run
            .records
            .into_iter()
            .map(|(label, mut rec)| {
                rec.checkpoint = match label.as_str() {
                    "reference" => vec!["reference.ckpt".into()],
                    "pretrain_stage1" => vec!["imputer.ckpt".into()],
                    "pretrain_stage2" => vec!["forecaster.ckpt".into()],
                    _ => vec!["imputer.ckpt".into(), "forecaster.ckpt".into()],
                };
                (label, rec)
            })
            .collect();
        let m = TrainManifest {
            mode,
            seed,
            config: cfg.clone(),
            checkpoints,
            stages,
        };
        write(&dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
        info!("seed {seed}: checkpoints in {}", dir.display());
        out.push(m);
    }
    Ok(out)
}

/// Loads the models of one seed written by `train`.
pub fn load_seed(cfg: &RunConfig, ckpt_dir: &Path, seed: u64, with_toi: bool) -> Result<SeedModels> {
    let dir = seed_dir(ckpt_dir, seed);
    let m: TrainManifest = serde_json::from_str(&read(&dir.join(MANIFEST))?)?;
    if m.seed != seed {
        return Err(Error::config(format!("{} belongs to seed {}", dir.display(), m.seed)));
    }
    let reference = load_forecaster(dir.join(&m.checkpoints["reference"]), None)?;
    if reference.config().backbone != cfg.forecaster.backbone {
        return Err(Error::config("checkpoint backbone differs from the config"));
    }
    let toi = if with_toi {
        Some((
            load_imputer(dir.join(&m.checkpoints["imputer"]), None)?,
            load_forecaster(dir.join(&m.checkpoints["forecaster"]), None)?,
        ))
    } else {
        None
    };
    Ok(SeedModels { seed, reference, toi })
}

/// File names `eval` writes.
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const EVAL_MANIFESTS: &str = "eval_manifests.json";

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write(&dir.join(REPORT_JSON), report.to_json()?)?;
    write(&dir.join(REPORT_TXT), format_text(report))?;
    write(&dir.join(REPORT_CSV), format_csv(report))
}

/// Evaluates checkpoints from `ckpt_dir` and writes the reports to `out_dir`.
pub fn eval(cfg: &RunConfig, ckpt_dir: &Path, out_dir: &Path, settings: Option<Vec<Setting>>) -> Result<MetricsReport> {
    let data = cfg.prepare()?;
    let mut ecfg = cfg.eval_config();
    if let Some(s) = settings {
        ecfg.settings = s;
    }
    let with_toi = ecfg.settings.iter().any(|s| s.needs_imputer());
    let models = cfg
        .train
        .seeds
        .iter()
        .map(|&s| load_seed(cfg, ckpt_dir, s, with_toi))
        .collect::<Result<Vec<_>>>()?;
    let mode = match serde_json::from_str::<TrainManifest>(&read(&seed_dir(ckpt_dir, models[0].seed).join(MANIFEST))?) {
        Ok(m) => m.mode.name().to_owned(),
        Err(_) => String::new(),
    };
    let meta = ReportMeta {
        dataset: cfg.dataset_name(),
        backbone: format!("{:?}", cfg.forecaster.backbone).to_lowercase(),
        mode,
    };
    let report = evaluate(&data, &models, &ecfg, meta)?;
    write_report(out_dir, &report)?;
    write(
        &out_dir.join(EVAL_MANIFESTS),
        serde_json::to_string_pretty(&manifests(&data, &cfg.train.seeds, &ecfg)?)?,
    )?;
    Ok(report)
}

fn cell_dir(out_dir: &Path, axis: SweepAxis, value: f64) -> PathBuf {
    out_dir.join(format!("{}-{value}", axis.name()))
}

pub const SWEEP_JSON: &str = "sweep.json";

/// One experiment per value; cells whose report already exists are read
/// back instead of recomputed. Up to `parallel` cells run at once.
pub fn sweep(
    cfg: &RunConfig,
    out_dir: &Path,
    axis: SweepAxis,
    values: &[f64],
    mode: TrainMode,
    parallel: usize,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let base = cfg.train_config(cfg.train.seeds[0]);
    let ecfg = cfg.eval_config();
    let cells: Vec<(f64, toi_vsf::trainer::TrainConfig, toi_vsf::eval::EvalConfig)> = values
        .iter()
        .map(|&v| axis.apply(&base, &ecfg, v).map(|(c, e)| (v, c, e)))
        .collect::<Result<_>>()?;
    let pending: Vec<usize> = (0..cells.len())
        .filter(|&i| !cell_dir(out_dir, axis, cells[i].0).join(REPORT_JSON).exists())
        .collect();
    if !pending.is_empty() {
        let data = cfg.prepare()?;
        // Reference forecasters depend on neither axis, so each seed's is
        // trained once and shared by every cell.
        let mut references: BTreeMap<u64, Forecaster> = BTreeMap::new();
        for &seed in &cfg.train.seeds {
            let path = out_dir.join("reference").join(format!("seed-{seed}.ckpt"));
            let f = if path.exists() {
                load_forecaster(&path, None)?
            } else {
                let (f, _) = train_reference(&data, &cfg.train_config(seed))?;
                let dir = out_dir.join("reference");
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                save_forecaster(&path, &f)?;
                f
            };
            references.insert(seed, f);
        }
        let meta = ReportMeta {
            dataset: cfg.dataset_name(),
            backbone: format!("{:?}", cfg.forecaster.backbone).to_lowercase(),
            mode: mode.name().to_owned(),
        };
        let run_cell = |i: usize| -> Result<()> {
            let (v, c, e) = &cells[i];
            let mut models = Vec::new();
            for &seed in &cfg.train.seeds {
                let tc = toi_vsf::trainer::TrainConfig { seed, ..c.clone() };
                let run = train_seed(&data, &tc, mode, &e.settings, Some(references[&seed].clone()))?;
                models.push(run.models);
            }
            let report = evaluate(&data, &models, e, meta.clone())?;
            write_report(&cell_dir(out_dir, axis, *v), &report)?;
            info!("{} = {v}: done", axis.name());
            Ok(())
        };
        let queue = Mutex::new(pending.into_iter());
        let first_err: Mutex<Option<Error>> = Mutex::new(None);
        std::thread::scope(|s| {
            for _ in 0..parallel.max(1) {
                s.spawn(|| loop {
                    let next = queue.lock().unwrap().next();
                    let Some(i) = next else { break };
                    if let Err(e) = run_cell(i) {
                        first_err.lock().unwrap().get_or_insert(e);
                        break;
                    }
                });
            }
        });
        if let Some(e) = first_err.into_inner().unwrap() {
            return Err(e);
        }
    }
    let rows = cells
        .iter()
        .map(|(v, ..)| {
            let report: MetricsReport = serde_json::from_str(&read(&cell_dir(out_dir, axis, *v).join(REPORT_JSON))?)?;
            Ok(SweepRow { value: *v, report })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SweepTable { axis, rows };
    write(&out_dir.join(SWEEP_JSON), serde_json::to_string_pretty(&table)?)?;
    write(&out_dir.join("sweep.txt"), table.format_text())?;
    write(&out_dir.join("sweep.csv"), table.format_csv())?;
    Ok(table)
}

/// Runs the finite-difference suite; `ops` of `None` means every target.
pub fn gradcheck(seed: u64, ops: Option<&[String]>, corrupt: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let names = match ops {
        Some(list) => list.to_vec(),
        None => gradcheck::all_targets(),
    };
    gradcheck::run(&names, seed, &GradcheckConfig::default(), corrupt)
}

pub fn format_gradcheck(reports: &[CheckReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>12}  result\n",
        "target", "cases", "coords", "kinks", "max rel err"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>12.3e}  {}\n",
            r.name,
            r.cases,
            r.coords,
            r.kinks_skipped,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}
