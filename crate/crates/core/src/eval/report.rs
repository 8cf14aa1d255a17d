use std::fmt::Write;

use super::MetricsReport;

/// Aligned plain-text table of a report.
pub fn format_text(r: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "dataset {}  backbone {}  mode {}  k {} (S = {})  seeds {:?}  draws {}  test windows {}",
        r.meta.dataset, r.meta.backbone, r.meta.mode, r.k, r.subset_size, r.seeds, r.subset_draws, r.test_windows
    );
    let width = r
        .settings
        .iter()
        .map(|s| s.setting.to_string().len())
        .max()
        .unwrap_or(0)
        .max(7);
    let _ = writeln!(out, "{:<width$}  {:>20}  {:>20}", "setting", "MAE (std)", "RMSE (std)");
    for s in &r.settings {
        let _ = writeln!(
            out,
            "{:<width$}  {:>20}  {:>20}",
            s.setting.to_string(),
            format!("{:.4} ({:.4})", s.mae.mean, s.mae.std),
            format!("{:.4} ({:.4})", s.rmse.mean, s.rmse.std),
        );
    }
    if let Some(d) = r.delta_subset {
        let _ = writeln!(out, "delta_subset   MAE {:+.2}%  RMSE {:+.2}%", d.mae, d.rmse);
    }
    if let Some(d) = r.delta_improve {
        let _ = writeln!(out, "delta_improve  MAE {:+.2}%  RMSE {:+.2}%", d.mae, d.rmse);
    }
    out
}

/// Flat CSV, one row per seed, setting and metric (seed means over draws).
pub fn format_csv(r: &MetricsReport) -> String {
    let mut out = String::from("seed,setting,metric,value\n");
    for s in &r.settings {
        for run in &s.per_seed {
            let m = run.mean();
            let _ = writeln!(out, "{},{},mae,{}", run.seed, s.setting, m.mae);
            let _ = writeln!(out, "{},{},rmse,{}", run.seed, s.setting, m.rmse);
        }
    }
    out
}
