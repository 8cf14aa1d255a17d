//! Layer building blocks shared by the imputer and forecasters.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Registers `{name}.weight` `(fan_in, fan_out)` and a zero `{name}.bias`.
pub(crate) fn init_linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        Tensor::uniform(&[fan_in, fan_out], bound, rng),
    )?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))
}

/// Registers a causal conv kernel `(c_out, c_in, taps)` and a zero bias.
pub(crate) fn init_conv<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    taps: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / ((c_in * taps) as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        Tensor::uniform(&[c_out, c_in, taps], bound, rng),
    )?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::ones(&[dim]))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))
}

/// Parameters of one model bound to a tape.
pub(crate) struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub bound: &'a Bound,
}

impl Ctx<'_> {
    pub fn p(&self, name: &str) -> Var {
        self.store.var(self.bound, name)
    }

    /// `x @ weight + bias` over the last axis.
    pub fn linear(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.p(&format!("{name}.weight")))?;
        tape.add(y, self.p(&format!("{name}.bias")))
    }

    pub fn conv(&self, tape: &mut Tape, name: &str, x: Var, dilation: usize) -> Result<Var> {
        tape.causal_conv1d(
            x,
            self.p(&format!("{name}.weight")),
            self.p(&format!("{name}.bias")),
            dilation,
        )
    }

    pub fn layer_norm(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        tape.layer_norm(
            x,
            self.p(&format!("{name}.gamma")),
            self.p(&format!("{name}.beta")),
            LN_EPS,
        )
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;
