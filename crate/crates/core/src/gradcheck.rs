//! Central finite-difference checks of every gradient rule and of the
//! composed model graphs.
//!
//! Each case builds `sum(f(inputs) * R)` for a fixed random projection `R`,
//! so every output element contributes with a distinct weight.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{Backbone, Forecaster, ForecasterConfig};
use crate::imputer::{Imputer, ImputerConfig, ImputerHyper};
use crate::rng::rng_from;
use crate::subset::{mask_channel, SubsetMask};
use crate::tensor::{Bound, OpKind, Tape, Tensor, Var, DIFFERENTIABLE};

/// Composite graphs checked besides the single operations.
pub const COMPOSITES: [&str; 3] = ["imputer", "forecaster_linear", "forecaster_mix"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Coordinates sampled per composite case.
    pub composite_coords: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            cases: 5,
            composite_coords: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub coords: usize,
    /// Coordinates skipped because the two step sizes disagreed (a kink).
    pub kinks_skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
    /// `None` checks every coordinate.
    sample: Option<usize>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn eval_loss(case: &Case, inputs: &[Tensor], proj: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// One-sided slopes `(left, right)`; their mean is the central difference.
fn slopes(case: &Case, input: usize, coord: usize, h: f64, proj: &Tensor) -> Result<(f64, f64)> {
    let at = |delta: f64| {
        let mut inputs = case.inputs.clone();
        inputs[input].data_mut()[coord] += delta;
        eval_loss(case, &inputs, proj)
    };
    let (minus, mid, plus) = (at(-h)?, at(0.0)?, at(h)?);
    Ok(((mid - minus) / h, (plus - mid) / h))
}

fn numeric(case: &Case, input: usize, coord: usize, h: f64, proj: &Tensor) -> Result<f64> {
    let (l, r) = slopes(case, input, coord, h, proj)?;
    Ok(0.5 * (l + r))
}

/// Left and right slopes this far apart mean the loss is not differentiable
/// at the point; curvature alone moves them by only about `h * f''`.
const KINK_SLOPE_GAP: f64 = 0.1;

struct CaseResult {
    coords: usize,
    kinks: usize,
    max_err: f64,
}

fn run_case(case: &Case, cfg: &GradcheckConfig, corrupt: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let mut tape = Tape::new();
    tape.corrupt_gradient_rule(corrupt);
    let vars = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut tape, &vars)?;
    let proj = Tensor::uniform(tape.shape(out), 1.0, rng);
    let p = tape.constant(proj.clone())?;
    let weighted = tape.mul(out, p)?;
    let loss = tape.sum(weighted)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let coords: Vec<(usize, usize)> = match case.sample {
        None => case
            .inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
            .collect(),
        Some(k) => {
            let total: usize = case.inputs.iter().map(Tensor::numel).sum();
            (0..k)
                .map(|_| {
                    let mut flat = rng.random_range(0..total);
                    let mut i = 0;
                    while flat >= case.inputs[i].numel() {
                        flat -= case.inputs[i].numel();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    };
    let mut res = CaseResult {
        coords: 0,
        kinks: 0,
        max_err: 0.0,
    };
    for (i, c) in coords {
        let a = grads[i].data()[c];
        let n = numeric(case, i, c, cfg.step, &proj)?;
        let mut err = rel_err(a, n);
        if err > cfg.tolerance {
            let n2 = numeric(case, i, c, cfg.step / 10.0, &proj)?;
            let (left, right) = slopes(case, i, c, cfg.step, &proj)?;
            if rel_err(n, n2) > cfg.tolerance || rel_err(left, right) > KINK_SLOPE_GAP {
                res.kinks += 1;
                continue;
            }
            err = err.min(rel_err(a, n2));
        }
        res.coords += 1;
        res.max_err = res.max_err.max(err);
    }
    Ok(res)
}

fn shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn rand_t(rng: &mut ChaCha8Rng, s: &[usize]) -> Tensor {
    Tensor::uniform(s, 1.0, rng)
}

fn op_case(kind: OpKind, idx: usize, rng: &mut ChaCha8Rng) -> Case {
    let rank = 1 + idx % 3;
    let exact = |inputs: Vec<Tensor>, build: Build| Case {
        inputs,
        build,
        sample: None,
    };
    match kind {
        OpKind::Matmul => {
            let (m, k, n, b) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(2..=3),
            );
            let (sa, sb) = match idx % 4 {
                0 => (vec![m, k], vec![k, n]),
                1 => (vec![b, m, k], vec![k, n]),
                2 => (vec![b, m, k], vec![b, k, n]),
                _ => (vec![m, k], vec![b, k, n]),
            };
            exact(
                vec![rand_t(rng, &sa), rand_t(rng, &sb)],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }
        OpKind::Add => {
            let s = shape(rng, rank + 1);
            let sb = if idx.is_multiple_of(2) {
                s.clone()
            } else {
                s[1..].to_vec()
            };
            exact(
                vec![rand_t(rng, &s), rand_t(rng, &sb)],
                Box::new(|t, v| t.add(v[0], v[1])),
            )
        }
        OpKind::Mul => {
            let s = shape(rng, rank);
            exact(
                vec![rand_t(rng, &s), rand_t(rng, &s)],
                Box::new(|t, v| t.mul(v[0], v[1])),
            )
        }
        OpKind::Scale => {
            let c = rng.random_range(-2.0..2.0);
            let s = shape(rng, rank);
            exact(vec![rand_t(rng, &s)], Box::new(move |t, v| t.scale(v[0], c)))
        }
        OpKind::Sum | OpKind::Mean | OpKind::Relu | OpKind::Gelu => {
            let s = shape(rng, rank);
            let build: Build = match kind {
                OpKind::Sum => Box::new(|t, v| t.sum(v[0])),
                OpKind::Mean => Box::new(|t, v| t.mean(v[0])),
                OpKind::Relu => Box::new(|t, v| t.relu(v[0])),
                _ => Box::new(|t, v| t.gelu(v[0])),
            };
            let x = rand_t(rng, &s).map(|x| 2.0 * x);
            exact(vec![x], build)
        }
        OpKind::Softmax => {
            let s = shape(rng, rank);
            let axis = rng.random_range(0..s.len());
            exact(
                vec![rand_t(rng, &s).map(|x| 3.0 * x)],
                Box::new(move |t, v| t.softmax(v[0], axis)),
            )
        }
        OpKind::LayerNorm => {
            let mut s = shape(rng, rank);
            *s.last_mut().unwrap() = rng.random_range(2..=5);
            let d = s[s.len() - 1];
            let gamma = rand_t(rng, &[d]).map(|x| 1.0 + 0.5 * x);
            exact(
                vec![rand_t(rng, &s), gamma, rand_t(rng, &[d])],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            )
        }
        OpKind::CausalConv1d => {
            let (b, cin, cout) = (
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let (taps, dil, len) = (
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(3..=7),
            );
            let x = rand_t(rng, &[b, cin, len]);
            let k = rand_t(rng, &[cout, cin, taps]);
            let bias = rand_t(rng, &[cout]);
            exact(
                vec![x, k, bias],
                Box::new(move |t, v| t.causal_conv1d(v[0], v[1], v[2], dil)),
            )
        }
        OpKind::MeanAbs => {
            let s = shape(rng, rank);
            exact(
                vec![rand_t(rng, &s), rand_t(rng, &s)],
                Box::new(|t, v| t.mean_abs(v[0], v[1])),
            )
        }
        OpKind::Reshape => {
            let s = shape(rng, 3);
            let target = vec![s[0] * s[1], s[2]];
            exact(vec![rand_t(rng, &s)], Box::new(move |t, v| t.reshape(v[0], &target)))
        }
        OpKind::Permute => {
            let s = shape(rng, 3);
            let perm = [[2, 0, 1], [1, 0, 2], [0, 2, 1], [2, 1, 0], [1, 2, 0]][idx % 5];
            exact(vec![rand_t(rng, &s)], Box::new(move |t, v| t.permute(v[0], &perm)))
        }
        OpKind::Concat => {
            let s = shape(rng, 3);
            let axis = idx % 3;
            let mut s2 = s.clone();
            s2[axis] = rng.random_range(1..=3);
            exact(
                vec![rand_t(rng, &s), rand_t(rng, &s2)],
                Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)),
            )
        }
        OpKind::Leaf => unreachable!("leaves have no gradient rule"),
    }
}

fn composite_case(name: &str, idx: usize, seed: u64, coords: usize, rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = 3;
    let l = 12;
    let batch = 1 + idx % 2;
    let x = rand_t(rng, &[batch, n, l]);
    let (params, build): (Vec<Tensor>, Build) = match name {
        "imputer" => {
            let h = ImputerHyper {
                embed_dim: 4,
                heads: 2,
                mlp_hidden: 6,
                tcn_channels: 3,
                ..ImputerHyper::default()
            };
            let mut m = Imputer::new(ImputerConfig::new(n, l, h)?, seed ^ idx as u64)?;
            // Nonzero mixing so every path is exercised, and no zero biases:
            // a zero-filled row would otherwise sit exactly on ReLU kinks.
            for p in m.params_mut().iter_mut() {
                if p.name.ends_with("bias") || p.name.ends_with("beta") || p.name.ends_with("mix.weight") {
                    p.value = rand_t(rng, p.value.shape()).map(|x| 0.3 * x);
                }
            }
            let mask = SubsetMask::from_indices(n, &[idx % n])?;
            let mc = mask_channel(batch, &mask);
            let params = m.params().iter().map(|p| p.value.clone()).collect();
            (
                params,
                Box::new(move |t, v| m.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0], &mc)),
            )
        }
        "forecaster_linear" | "forecaster_mix" => {
            let backbone = if name == "forecaster_mix" {
                Backbone::Mix
            } else {
                Backbone::Linear
            };
            let cfg = ForecasterConfig {
                backbone,
                n_vars: n,
                lookback: l,
                horizon: 4,
                channels: 3,
            };
            let mut f = Forecaster::new(cfg, seed, idx as u64)?;
            for p in f.params_mut().iter_mut() {
                if p.name.ends_with("bias") {
                    p.value = rand_t(rng, p.value.shape()).map(|x| 0.1 * x);
                }
            }
            let params = f.params().iter().map(|p| p.value.clone()).collect();
            (
                params,
                Box::new(move |t, v| f.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0])),
            )
        }
        other => return Err(Error::config(format!("unknown gradcheck target `{other}`"))),
    };
    let mut inputs = vec![x];
    inputs.extend(params);
    Ok(Case {
        inputs,
        build,
        sample: Some(coords),
    })
}

/// Every name `run` accepts: the operations, then the composites.
pub fn all_targets() -> Vec<String> {
    DIFFERENTIABLE
        .iter()
        .map(|k| k.name().to_owned())
        .chain(COMPOSITES.iter().map(|s| s.to_string()))
        .collect()
}

/// Checks one operation or composite over `cfg.cases` random cases.
/// `corrupt` deliberately breaks one gradient rule, for testing the checker.
pub fn check(name: &str, seed: u64, cfg: &GradcheckConfig, corrupt: Option<OpKind>) -> Result<CheckReport> {
    let kind = OpKind::from_name(name);
    if kind.is_none() && !COMPOSITES.contains(&name) {
        return Err(Error::config(format!("unknown gradcheck target `{name}`")));
    }
    let mut report = CheckReport {
        name: name.to_owned(),
        cases: cfg.cases,
        coords: 0,
        kinks_skipped: 0,
        max_rel_err: 0.0,
        passed: true,
    };
    let tag = name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    for idx in 0..cfg.cases {
        let mut rng = rng_from(seed, &[crate::rng::stream::GRADCHECK, tag, idx as u64]);
        let case = match kind {
            Some(k) => op_case(k, idx, &mut rng),
            None => composite_case(name, idx, seed, cfg.composite_coords, &mut rng)?,
        };
        let r = run_case(&case, cfg, corrupt, &mut rng)?;
        report.coords += r.coords;
        report.kinks_skipped += r.kinks;
        report.max_rel_err = report.max_rel_err.max(r.max_err);
    }
    report.passed = report.max_rel_err <= cfg.tolerance && report.coords > 0;
    Ok(report)
}

pub fn run(names: &[String], seed: u64, cfg: &GradcheckConfig, corrupt: Option<OpKind>) -> Result<Vec<CheckReport>> {
    names.iter().map(|n| check(n, seed, cfg, corrupt)).collect()
}
