use toi_vsf::data::{load_csv, synth_generate, synth_generate_full, write_csv, PreparedData, SynthParams};
use toi_vsf::eval::sweep::{k_sweep, run_experiment, weight_sweep, ReferenceCache, TrainMode};
use toi_vsf::eval::{EvalConfig, ReportMeta, Setting};
use toi_vsf::imputer::ImputerHyper;
use toi_vsf::trainer::TrainConfig;

fn params() -> SynthParams {
    SynthParams {
        n_vars: 6,
        n_latents: 2,
        length: 260,
        noise_std: 0.1,
        neg_fraction: 0.3,
        seed: 5,
    }
}

fn data() -> PreparedData {
    PreparedData::new(synth_generate(&params()).unwrap(), 12, 12, [0.7, 0.1, 0.2]).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        forecaster_channels: 2,
        imputer: ImputerHyper {
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 8,
            tcn_channels: 4,
            ..ImputerHyper::default()
        },
        ..TrainConfig::default()
    }
}

fn eval(k: f64) -> EvalConfig {
    EvalConfig {
        settings: vec![Setting::Partial, Setting::Oracle, Setting::Toi],
        k,
        subset_draws: 2,
    }
}

#[test]
fn csv_round_trip_keeps_the_synthetic_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_generate_full(&params()).unwrap();
    let path = dir.path().join("s.csv");
    write_csv(&out.series, &path).unwrap();
    let back = load_csv(&path, true, 0).unwrap();
    assert_eq!(back.values(), out.series.values());
    assert_eq!(back.variable_names(), out.series.variable_names());
}

#[test]
fn experiment_reuses_cached_references() {
    let d = data();
    let mut cache = ReferenceCache::new();
    let (a, runs) = run_experiment(
        &d,
        &cfg(),
        &[1, 2],
        TrainMode::Joint,
        &eval(0.3),
        ReportMeta::default(),
        &mut cache,
    )
    .unwrap();
    assert_eq!(cache.len(), 2);
    assert!(runs.iter().all(|r| r.records.iter().any(|(l, _)| l == "reference")));
    let (b, runs) = run_experiment(
        &d,
        &cfg(),
        &[1, 2],
        TrainMode::Joint,
        &eval(0.3),
        ReportMeta::default(),
        &mut cache,
    )
    .unwrap();
    assert!(runs.iter().all(|r| r.records.iter().all(|(l, _)| l != "reference")));
    // A cached reference is the one that would have been trained.
    assert_eq!(a, b);
}

#[test]
fn pretrain_experiment_reports_toi() {
    let d = data();
    let (r, runs) = run_experiment(
        &d,
        &cfg(),
        &[3],
        TrainMode::Pretrain,
        &eval(0.3),
        ReportMeta::default(),
        &mut ReferenceCache::new(),
    )
    .unwrap();
    let labels: Vec<&str> = runs[0].records.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["reference", "pretrain_stage1", "pretrain_stage2"]);
    assert!(r.setting(Setting::Toi).unwrap().mae.mean.is_finite());
}

#[test]
fn sweeps_emit_one_row_per_value() {
    let d = data();
    let t = k_sweep(&d, &cfg(), &[0], &eval(0.15), &[0.2, 0.5, 1.0], &ReportMeta::default()).unwrap();
    assert_eq!(t.rows.len(), 3);
    let last = &t.rows[2].report;
    assert_eq!(last.subset_size, 6);
    assert_eq!(
        last.setting(Setting::Partial).unwrap().mae,
        last.setting(Setting::Oracle).unwrap().mae
    );
    assert_eq!(t.format_text().lines().count(), 4);

    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let w = weight_sweep(&d, &cfg(), &[0], &eval(0.3), &alphas, &ReportMeta::default()).unwrap();
    assert_eq!(w.rows.len(), 5);
    for row in &w.rows {
        let toi = row.report.setting(Setting::Toi).unwrap();
        assert!(toi.mae.mean.is_finite() && toi.rmse.mean >= toi.mae.mean);
    }
    // 5 values x 1 seed x 3 settings x 2 metrics plus the header.
    assert_eq!(w.format_csv().lines().count(), 31);
    assert!(weight_sweep(&d, &cfg(), &[0], &eval(0.3), &[1.5], &ReportMeta::default()).is_err());
}
