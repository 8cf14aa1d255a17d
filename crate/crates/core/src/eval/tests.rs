use super::*;
use crate::data::RawSeries;
use crate::forecaster::{Backbone, ForecasterConfig};
use crate::imputer::{ImputerConfig, ImputerHyper};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn metric_hand_cases() {
    let t = [1.0, 2.0, 3.0];
    assert_eq!(mae(&t, &t).unwrap(), 0.0);
    assert_eq!(rmse(&t, &t).unwrap(), 0.0);
    let p = [3.0, -4.0];
    let z = [0.0, 0.0];
    assert_eq!(mae(&p, &z).unwrap(), 3.5);
    assert!(close(rmse(&p, &z).unwrap(), 12.5f64.sqrt(), 1e-15));
    assert!(mae(&p, &t).is_err());
}

#[test]
fn subset_scoring_matches_a_scalar_loop() {
    let mut rng = rng_from(3, &[]);
    let (b, n, q) = (4, 5, 3);
    let pred = Tensor::uniform(&[b, n, q], 2.0, &mut rng);
    let truth = Tensor::uniform(&[b, n, q], 2.0, &mut rng);
    let mask = SubsetMask::from_indices(n, &[1, 4]).unwrap();
    let mut sums = ErrorSums::default();
    sums.add(&pred, &truth, &mask);
    let got = sums.finish();
    let (mut a, mut s, mut c) = (0.0, 0.0, 0.0);
    for bi in 0..b {
        for v in [1, 4] {
            for t in 0..q {
                let e = pred.at(&[bi, v, t]) - truth.at(&[bi, v, t]);
                a += e.abs();
                s += e * e;
                c += 1.0;
            }
        }
    }
    assert!(close(got.mae, a / c, 1e-12));
    assert!(close(got.rmse, (s / c).sqrt(), 1e-12));
}

#[test]
fn deltas_reproduce_published_values() {
    for (base, ours, want) in [(5.57, 4.34, 22.08), (18.57, 11.40, 38.61)] {
        assert!(close(delta_subset(base, ours).unwrap(), want, 0.01), "{base} {ours}");
    }
    for (base, ours, want) in [(5.04, 4.34, 13.89), (2.94, 2.26, 23.13)] {
        assert!(close(delta_improve(base, ours).unwrap(), want, 0.01), "{base} {ours}");
    }
    assert_eq!(delta_subset(3.0, 3.0).unwrap(), 0.0);
    assert_eq!(delta_improve(3.0, 3.0).unwrap(), 0.0);
    assert!(matches!(delta_subset(0.0, 1.0), Err(Error::Domain(_))));
    assert!(matches!(delta_improve(-1.0, 1.0), Err(Error::Domain(_))));
}

proptest! {
    #[test]
    fn deltas_are_scale_invariant(base in 0.01f64..100.0, ours in 0.0f64..100.0, c in 0.01f64..100.0) {
        let a = delta_subset(base, ours).unwrap();
        let b = delta_subset(c * base, c * ours).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn settings_parse_and_print() {
    for s in Setting::all() {
        assert_eq!(s.to_string().parse::<Setting>().unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Setting>(&json).unwrap(), s);
    }
    assert_eq!(
        parse_settings("partial, toi,baseline:gaussian,toi").unwrap(),
        vec![Setting::Partial, Setting::Toi, Setting::Baseline(Filler::Gaussian)]
    );
    assert!(parse_settings("baseline:spline").is_err());
    assert!(parse_settings("").is_err());
}

fn sine_data(n: usize, steps: usize, seed: u64) -> PreparedData {
    let mut rng = rng_from(seed, &[]);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut v = Vec::with_capacity(steps * n);
    for t in 0..steps {
        let s = (t as f64 / 7.0).sin();
        for var in 0..n {
            let x = match var {
                0 => s,
                1 => -s,
                _ => (t as f64 / (3.0 + var as f64)).cos(),
            };
            v.push(x + noise.sample(&mut rng));
        }
    }
    let raw = RawSeries::with_default_names(Tensor::new(&[steps, n], v).unwrap()).unwrap();
    PreparedData::new(raw, 12, 4, [0.7, 0.1, 0.2]).unwrap()
}

#[test]
fn fillers_on_full_masks_are_identity() {
    let data = sine_data(4, 200, 1);
    let stats = TrainStats::fit(&data);
    let wb = data.batch(&data.windows.test[..5]).unwrap();
    let full = SubsetMask::full(4);
    for f in Filler::ALL {
        let out = fill(f, &wb.lookback, &full, &stats, &mut rng_from(0, &[])).unwrap();
        assert_eq!(out, wb.lookback, "{f:?}");
    }
}

#[test]
fn mean_fill_with_zero_means_is_zero_fill() {
    let data = sine_data(4, 200, 2);
    let mut stats = TrainStats::fit(&data);
    stats.mean.fill(0.0);
    let wb = data.batch(&data.windows.test[..3]).unwrap();
    let mask = SubsetMask::from_indices(4, &[0, 3]).unwrap();
    let x = mask_rows(&wb.lookback, &mask).unwrap();
    let mut rng = rng_from(0, &[]);
    assert_eq!(
        fill(Filler::Mean, &x, &mask, &stats, &mut rng).unwrap(),
        fill(Filler::Zero, &x, &mask, &stats, &mut rng).unwrap()
    );
    // The normalized train split has zero means up to rounding anyway.
    assert!(TrainStats::fit(&data).mean.iter().all(|m| m.abs() < 1e-12));
}

#[test]
fn gaussian_fill_is_pinned_by_its_seed() {
    let data = sine_data(4, 200, 3);
    let stats = TrainStats::fit(&data);
    let wb = data.batch(&data.windows.test[..3]).unwrap();
    let mask = SubsetMask::from_indices(4, &[2]).unwrap();
    let a = fill(Filler::Gaussian, &wb.lookback, &mask, &stats, &mut rng_from(9, &[])).unwrap();
    let b = fill(Filler::Gaussian, &wb.lookback, &mask, &stats, &mut rng_from(9, &[])).unwrap();
    let c = fill(Filler::Gaussian, &wb.lookback, &mask, &stats, &mut rng_from(10, &[])).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for bi in 0..3 {
        for t in 0..12 {
            assert_eq!(a.at(&[bi, 2, t]), wb.lookback.at(&[bi, 2, t]));
        }
    }
}

#[test]
fn nearest_variable_uses_the_negated_partner() {
    let data = sine_data(4, 400, 4);
    let stats = TrainStats::fit(&data);
    assert!(stats.corr[1] < -0.99);
    let mask = SubsetMask::from_indices(4, &[0, 2, 3]).unwrap();
    assert_eq!(stats.nearest(1, &mask), Some((0, -1.0)));
    let wb = data.batch(&data.windows.test).unwrap();
    let out = fill(
        Filler::NearestTrainVariable,
        &mask_rows(&wb.lookback, &mask).unwrap(),
        &mask,
        &stats,
        &mut rng_from(0, &[]),
    )
    .unwrap();
    let (mut err, mut cnt) = (0.0, 0.0);
    for bi in 0..wb.len() {
        for t in 0..12 {
            err += (out.at(&[bi, 1, t]) - wb.lookback.at(&[bi, 1, t])).abs();
            cnt += 1.0;
        }
    }
    // Two independent noise draws of std 0.01 on a unit-scale sine: the
    // difference has mean absolute value about 0.016 in raw units.
    let floor = 0.016 / data.normalizer.std[1];
    assert!(err / cnt < 2.0 * floor, "{} vs {floor}", err / cnt);
}

fn models(n: usize, backbone: Backbone, seed: u64, with_toi: bool) -> SeedModels {
    let fc = |tag| {
        Forecaster::new(
            ForecasterConfig {
                backbone,
                n_vars: n,
                lookback: 12,
                horizon: 4,
                channels: 2,
            },
            seed,
            tag,
        )
        .unwrap()
    };
    let h = ImputerHyper {
        embed_dim: 8,
        heads: 2,
        mlp_hidden: 8,
        tcn_channels: 4,
        ..ImputerHyper::default()
    };
    SeedModels {
        seed,
        reference: fc(1),
        toi: with_toi.then(|| {
            (
                Imputer::new(ImputerConfig::new(n, 12, h).unwrap(), seed).unwrap(),
                fc(0),
            )
        }),
    }
}

fn eval_cfg(k: f64, settings: Vec<Setting>) -> EvalConfig {
    EvalConfig {
        settings,
        k,
        subset_draws: 3,
    }
}

#[test]
fn linear_partial_equals_oracle_on_the_subset() {
    let data = sine_data(5, 200, 5);
    let m = [models(5, Backbone::Linear, 1, false)];
    let r = evaluate(
        &data,
        &m,
        &eval_cfg(0.4, vec![Setting::Partial, Setting::Oracle]),
        ReportMeta::default(),
    )
    .unwrap();
    assert_eq!(r.settings[0].per_seed[0].runs, r.settings[1].per_seed[0].runs);
    assert!(r.delta_subset.is_none());
}

#[test]
fn full_subset_partial_equals_oracle_exactly() {
    let data = sine_data(5, 200, 6);
    let m = [models(5, Backbone::Mix, 2, false)];
    let settings = vec![Setting::Partial, Setting::Oracle];
    let r = evaluate(&data, &m, &eval_cfg(1.0, settings.clone()), ReportMeta::default()).unwrap();
    assert_eq!(r.settings[0].mae, r.settings[1].mae);
    assert_eq!(r.settings[0].per_seed[0].runs, r.settings[1].per_seed[0].runs);
    // With variables missing the mix backbone does see the difference.
    let r = evaluate(&data, &m, &eval_cfg(0.4, settings), ReportMeta::default()).unwrap();
    assert_ne!(r.settings[0].mae, r.settings[1].mae);
}

#[test]
fn report_is_deterministic_and_paired() {
    let data = sine_data(5, 200, 7);
    let m = [models(5, Backbone::Mix, 3, true), models(5, Backbone::Mix, 4, true)];
    let cfg = eval_cfg(0.4, Setting::all());
    let a = evaluate(&data, &m, &cfg, ReportMeta::default()).unwrap();
    let b = evaluate(&data, &m, &cfg, ReportMeta::default()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.settings.len(), 7);
    assert!(a.delta_subset.is_some() && a.delta_improve.is_some());
    // Zero-fill baseline is the Partial setting by construction.
    assert_eq!(
        a.setting(Setting::Partial).unwrap().per_seed,
        a.setting(Setting::Baseline(Filler::Zero))
            .unwrap()
            .per_seed
            .iter()
            .map(|r| SettingRun {
                setting: Setting::Partial,
                ..r.clone()
            })
            .collect::<Vec<_>>()
    );
    for s in &a.settings {
        assert_eq!(s.per_seed.len(), 2);
        for (run, seed) in s.per_seed.iter().zip([3, 4]) {
            let man = run.manifest.as_ref().unwrap();
            assert_eq!(man.to_bytes(), Manifest::new(&data, seed, 0.4, 3).unwrap().to_bytes());
            assert!(run.runs.iter().all(|r| r.rmse >= r.mae));
        }
        assert!(s.mae.std >= 0.0);
    }
    let text = format_text(&a);
    assert!(text.contains("baseline:nearest_train_variable") && text.contains("delta_subset"));
    // 2 seeds x 7 settings x 2 metrics plus the header.
    assert_eq!(format_csv(&a).lines().count(), 29);
}

#[test]
fn toi_without_an_imputer_is_a_config_error() {
    let data = sine_data(5, 200, 8);
    let m = [models(5, Backbone::Mix, 3, false)];
    assert!(matches!(
        evaluate(&data, &m, &eval_cfg(0.4, vec![Setting::Toi]), ReportMeta::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn stat_uses_sample_std() {
    let s = Stat::of(&[1.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert!(close(s.std, 2f64.sqrt(), 1e-15));
    assert_eq!(Stat::of(&[4.0]).std, 0.0);
}
