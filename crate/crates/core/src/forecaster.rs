//! Forecasting backbones mapping `(B, N, L)` lookbacks to `(B, N, Q)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputer::check_layout;
use crate::nn::{init_conv, init_linear, Ctx};
use crate::rng::{rng_from, stream};
use crate::tensor::{shape_err, Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// One affine map `L -> Q` shared by all variables.
    Linear,
    /// Causal conv features with residual cross-variable mixing.
    Mix,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Backbone::Linear),
            "mix" => Ok(Backbone::Mix),
            other => Err(Error::config(format!("unknown backbone `{other}` (linear or mix)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterConfig {
    pub backbone: Backbone,
    pub n_vars: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Conv width of the mix backbone.
    pub channels: usize,
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vars == 0 || self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return Err(Error::config("forecaster dimensions must all be >= 1"));
        }
        Ok(())
    }
}

const MIX_TAPS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    cfg: ForecasterConfig,
    params: ParamStore,
}

impl Forecaster {
    /// Fresh parameters. `tag` separates independently initialized models
    /// under one seed.
    pub fn new(cfg: ForecasterConfig, seed: u64, tag: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed, &[stream::FORECASTER_INIT, tag]);
        let mut s = ParamStore::new();
        match cfg.backbone {
            Backbone::Linear => init_linear(&mut s, "forecaster.linear", cfg.lookback, cfg.horizon, &mut rng)?,
            Backbone::Mix => {
                let (n, c) = (cfg.n_vars, cfg.channels);
                init_conv(&mut s, "forecaster.conv", 1, c, MIX_TAPS, &mut rng)?;
                let bound = 1.0 / (n as f64).sqrt();
                s.insert("forecaster.mix.weight", Tensor::uniform(&[n, n], bound, &mut rng))?;
                init_linear(&mut s, "forecaster.out", c * cfg.lookback, cfg.horizon, &mut rng)?;
            }
        }
        Ok(Self { cfg, params: s })
    }

    pub fn from_params(cfg: ForecasterConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(cfg, 0, 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self {
            cfg: template.cfg,
            params,
        })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let ForecasterConfig {
            n_vars: n,
            lookback: l,
            channels: c,
            ..
        } = self.cfg;
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != n || s[2] != l {
            return Err(shape_err("forecaster", &s, &[n, l]));
        }
        let ctx = Ctx {
            store: &self.params,
            bound,
        };
        match self.cfg.backbone {
            Backbone::Linear => ctx.linear(tape, "forecaster.linear", x),
            Backbone::Mix => {
                let b = s[0];
                let h = tape.reshape(x, &[b, n, 1, l])?;
                let h = ctx.conv(tape, "forecaster.conv", h, 1)?;
                let h = tape.relu(h)?;
                let h = tape.reshape(h, &[b, n, c * l])?;
                let mixed = tape.matmul(ctx.p("forecaster.mix.weight"), h)?;
                let h = tape.add(h, mixed)?;
                ctx.linear(tape, "forecaster.out", h)
            }
        }
    }

    /// Forecast without gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let v = tape.constant(x.clone())?;
        let y = self.forward(&mut tape, &bound, v)?;
        Ok(tape.value(y).clone())
    }
}

/// Mean absolute forecast error over all variables, steps and rows.
pub fn forecast_loss(tape: &mut Tape, pred: Var, horizon: Var) -> Result<Var> {
    tape.mean_abs(pred, horizon)
}
