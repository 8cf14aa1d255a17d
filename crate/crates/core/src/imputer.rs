//! Self-supervised variable imputer: patching, a linear time embedding,
//! multi-head attention over each variable's patches, and a two-block causal
//! TCN whose features a linear head maps back to every variable's lookback.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_conv, init_layer_norm, init_linear, Ctx};
use crate::rng::{rng_from, stream};
use crate::subset::SubsetBatch;
use crate::tensor::{shape_err, Bound, ParamStore, Tape, Tensor, Var};

/// Architecture hyperparameters; the variable count and lookback come from
/// the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputerHyper {
    pub patches: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: [usize; 2],
    pub tcn_channels: usize,
}

impl Default for ImputerHyper {
    fn default() -> Self {
        Self {
            patches: 4,
            embed_dim: 32,
            heads: 4,
            mlp_hidden: 64,
            tcn_kernel: 3,
            tcn_dilations: [1, 2],
            tcn_channels: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputerConfig {
    pub n_vars: usize,
    pub lookback: usize,
    pub hyper: ImputerHyper,
}

impl ImputerConfig {
    pub fn new(n_vars: usize, lookback: usize, hyper: ImputerHyper) -> Result<Self> {
        let cfg = Self {
            n_vars,
            lookback,
            hyper,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        if self.n_vars == 0 || self.lookback == 0 {
            return Err(Error::config(
                "imputer needs at least one variable and one lookback step",
            ));
        }
        if h.patches == 0 || !self.lookback.is_multiple_of(h.patches) {
            return Err(Error::config(format!(
                "lookback {} is not divisible into {} patches",
                self.lookback, h.patches
            )));
        }
        if h.heads == 0 || h.embed_dim == 0 || !h.embed_dim.is_multiple_of(h.heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                h.embed_dim, h.heads
            )));
        }
        if h.mlp_hidden == 0 || h.tcn_channels == 0 || h.tcn_kernel == 0 {
            return Err(Error::config("mlp_hidden, tcn_channels and tcn_kernel must be >= 1"));
        }
        if h.tcn_dilations.contains(&0) {
            return Err(Error::config("TCN dilations must be >= 1"));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.lookback / self.hyper.patches
    }
}

/// Splits `(B, N, L)` into `p` non-overlapping patches, `(B, N, p, L / p)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("patchify", s, &[p]));
    }
    if p == 0 || !s[2].is_multiple_of(p) {
        return Err(Error::config(format!(
            "length {} is not divisible into {p} patches",
            s[2]
        )));
    }
    x.reshape(&[s[0], s[1], p, s[2] / p])
}

pub fn unpatchify(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("unpatchify", s, &[]));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])
}

/// Intermediate values of one forward pass, for probing.
#[derive(Clone, Debug)]
pub struct ImputerTrace {
    pub embedded: Tensor,
    /// `(B * N, H, P, P)`, rows sum to one.
    pub attention: Tensor,
    pub attended: Tensor,
    pub block1: Tensor,
    pub block2: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imputer {
    cfg: ImputerConfig,
    params: ParamStore,
}

impl Imputer {
    pub fn new(cfg: ImputerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let h = &cfg.hyper;
        let (e, c, n) = (h.embed_dim, h.tcn_channels, cfg.n_vars);
        let mut rng = rng_from(seed, &[stream::IMPUTER_INIT]);
        let mut s = ParamStore::new();
        init_linear(&mut s, "imputer.embed", cfg.patch_len(), e, &mut rng)?;
        for name in ["query", "key", "value", "out"] {
            init_linear(&mut s, &format!("imputer.attn.{name}"), e, e, &mut rng)?;
        }
        init_layer_norm(&mut s, "imputer.ln1", e)?;
        init_linear(&mut s, "imputer.mlp.fc1", e, h.mlp_hidden, &mut rng)?;
        init_linear(&mut s, "imputer.mlp.fc2", h.mlp_hidden, e, &mut rng)?;
        init_layer_norm(&mut s, "imputer.ln2", e)?;
        // The mask rides along as one extra input channel.
        init_conv(&mut s, "imputer.tcn1.conv1", e + 1, c, h.tcn_kernel, &mut rng)?;
        init_conv(&mut s, "imputer.tcn1.conv2", c, c, h.tcn_kernel, &mut rng)?;
        init_conv(&mut s, "imputer.tcn.residual", e + 1, c, 1, &mut rng)?;
        init_conv(&mut s, "imputer.tcn2.conv1", c, c, h.tcn_kernel, &mut rng)?;
        init_conv(&mut s, "imputer.tcn2.conv2", c, c, h.tcn_kernel, &mut rng)?;
        init_linear(&mut s, "imputer.head", c * h.patches, cfg.lookback, &mut rng)?;
        s.insert("imputer.mix.weight", Tensor::zeros(&[n, n]))?;
        Ok(Self { cfg, params: s })
    }

    /// Rebuilds a model from stored parameters, which must match the layout
    /// `cfg` implies exactly.
    pub fn from_params(cfg: ImputerConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(cfg, 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self {
            cfg: template.cfg,
            params,
        })
    }

    pub fn config(&self) -> &ImputerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the forward pass of `inputs` `(B, N, L)` on `tape`.
    /// `mask_channel` is `(B, N, 1)`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: Var, mask_channel: &Tensor) -> Result<Var> {
        let ctx = Ctx {
            store: &self.params,
            bound,
        };
        Ok(self.forward_ctx(tape, &ctx, inputs, mask_channel)?.output)
    }

    /// Reconstruction for every variable, without gradients.
    pub fn impute(&self, sb: &SubsetBatch) -> Result<Tensor> {
        Ok(self.trace(&sb.inputs, &sb.mask_channel)?.output)
    }

    pub fn trace(&self, inputs: &Tensor, mask_channel: &Tensor) -> Result<ImputerTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let ctx = Ctx {
            store: &self.params,
            bound: &bound,
        };
        let x = tape.constant(inputs.clone())?;
        let v = self.forward_ctx(&mut tape, &ctx, x, mask_channel)?;
        Ok(ImputerTrace {
            embedded: tape.value(v.embedded).clone(),
            attention: tape.value(v.attention).clone(),
            attended: tape.value(v.attended).clone(),
            block1: tape.value(v.block1).clone(),
            block2: tape.value(v.block2).clone(),
            output: tape.value(v.output).clone(),
        })
    }

    /// Linear embedding of patched input `(B, N, P, L / P)`.
    pub fn time_embed(&self, patches: &Tensor) -> Result<Tensor> {
        self.probe(|tape, ctx| {
            let v = tape.constant(patches.clone())?;
            ctx.linear(tape, "imputer.embed", v)
        })
    }

    /// Attention stage on `(B, N, P, E)`; returns the output and the weights.
    pub fn time_attention(&self, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let ctx = Ctx {
            store: &self.params,
            bound: &bound,
        };
        let v = tape.constant(e.clone())?;
        let (out, w) = self.attend(&mut tape, &ctx, v)?;
        Ok((tape.value(out).clone(), tape.value(w).clone()))
    }

    /// TCN stage and head on attended features `(B, N, P, E)`; returns the
    /// two block outputs `(B, N, C, P)` and the reconstruction.
    pub fn generate_variables(&self, zhat: &Tensor, mask_channel: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let ctx = Ctx {
            store: &self.params,
            bound: &bound,
        };
        let z = tape.constant(zhat.clone())?;
        let (a, b) = self.generate(&mut tape, &ctx, z, mask_channel)?;
        let out = self.head(&mut tape, &ctx, b)?;
        Ok((tape.value(a).clone(), tape.value(b).clone(), tape.value(out).clone()))
    }

    fn probe(&self, f: impl FnOnce(&mut Tape, &Ctx) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let ctx = Ctx {
            store: &self.params,
            bound: &bound,
        };
        let v = f(&mut tape, &ctx)?;
        Ok(tape.value(v).clone())
    }

    fn forward_ctx(&self, tape: &mut Tape, ctx: &Ctx, x: Var, mask_channel: &Tensor) -> Result<TraceVars> {
        let (n, l) = (self.cfg.n_vars, self.cfg.lookback);
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != n || s[2] != l {
            return Err(shape_err("imputer", &s, &[n, l]));
        }
        let p = self.cfg.hyper.patches;
        let patched = tape.reshape(x, &[s[0], n, p, l / p])?;
        let embedded = ctx.linear(tape, "imputer.embed", patched)?;
        let (attended, attention) = self.attend(tape, ctx, embedded)?;
        let (block1, block2) = self.generate(tape, ctx, attended, mask_channel)?;
        let output = self.head(tape, ctx, block2)?;
        Ok(TraceVars {
            embedded,
            attention,
            attended,
            block1,
            block2,
            output,
        })
    }

    /// Post-norm transformer block over the patch axis of each variable.
    fn attend(&self, tape: &mut Tape, ctx: &Ctx, e: Var) -> Result<(Var, Var)> {
        let s = tape.shape(e).to_vec();
        let h = self.cfg.hyper.heads;
        let (b, n, p, dim) = (s[0], s[1], s[2], s[3]);
        let dh = dim / h;
        let bn = b * n;
        let x = tape.reshape(e, &[bn, p, dim])?;
        let split = |tape: &mut Tape, name: &str, perm: &[usize]| -> Result<Var> {
            let y = ctx.linear(tape, name, x)?;
            let y = tape.reshape(y, &[bn, p, h, dh])?;
            tape.permute(y, perm)
        };
        let q = split(tape, "imputer.attn.query", &[0, 2, 1, 3])?;
        let kt = split(tape, "imputer.attn.key", &[0, 2, 3, 1])?;
        let v = split(tape, "imputer.attn.value", &[0, 2, 1, 3])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, 3)?;
        let heads = tape.matmul(weights, v)?;
        let heads = tape.permute(heads, &[0, 2, 1, 3])?;
        let heads = tape.reshape(heads, &[bn, p, dim])?;
        let msa = ctx.linear(tape, "imputer.attn.out", heads)?;
        let z = tape.add(x, msa)?;
        let z = ctx.layer_norm(tape, "imputer.ln1", z)?;
        let m = ctx.linear(tape, "imputer.mlp.fc1", z)?;
        let m = tape.gelu(m)?;
        let m = ctx.linear(tape, "imputer.mlp.fc2", m)?;
        let zh = tape.add(z, m)?;
        let zh = ctx.layer_norm(tape, "imputer.ln2", zh)?;
        Ok((tape.reshape(zh, &[b, n, p, dim])?, weights))
    }

    /// Two causal TCN blocks over the patch axis, with patches as time and
    /// embedding features (plus the mask) as channels.
    fn generate(&self, tape: &mut Tape, ctx: &Ctx, zhat: Var, mask_channel: &Tensor) -> Result<(Var, Var)> {
        let s = tape.shape(zhat).to_vec();
        let (b, n, p) = (s[0], s[1], s[2]);
        if mask_channel.shape() != [b, n, 1] {
            return Err(shape_err("imputer mask channel", mask_channel.shape(), &[b, n, 1]));
        }
        let [d1, d2] = self.cfg.hyper.tcn_dilations;
        let x = tape.permute(zhat, &[0, 1, 3, 2])?;
        let m: Vec<f64> = mask_channel
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, p))
            .collect();
        let m = tape.constant(Tensor::new(&[b, n, 1, p], m)?)?;
        let x = tape.concat(&[x, m], 2)?;
        let a = ctx.conv(tape, "imputer.tcn1.conv1", x, d1)?;
        let a = tape.relu(a)?;
        let a = ctx.conv(tape, "imputer.tcn1.conv2", a, d1)?;
        let a = tape.relu(a)?;
        let r = ctx.conv(tape, "imputer.tcn.residual", x, 1)?;
        let h = tape.add(r, a)?;
        let y = ctx.conv(tape, "imputer.tcn2.conv1", h, d2)?;
        let y = tape.relu(y)?;
        let y = ctx.conv(tape, "imputer.tcn2.conv2", y, d2)?;
        let y = tape.relu(y)?;
        Ok((a, y))
    }

    /// GeLU, per-variable linear map to the lookback, then residual mixing
    /// across variables: `u = Y + M Y`.
    fn head(&self, tape: &mut Tape, ctx: &Ctx, feats: Var) -> Result<Var> {
        let s = tape.shape(feats).to_vec();
        let g = tape.gelu(feats)?;
        let g = tape.reshape(g, &[s[0], s[1], s[2] * s[3]])?;
        let y = ctx.linear(tape, "imputer.head", g)?;
        let my = tape.matmul(ctx.p("imputer.mix.weight"), y)?;
        tape.add(y, my)
    }
}

struct TraceVars {
    embedded: Var,
    attention: Var,
    attended: Var,
    block1: Var,
    block2: Var,
    output: Var,
}

/// Mean absolute reconstruction error over all variables, steps and rows.
pub fn imputation_loss(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    tape.mean_abs(recon, target)
}

pub(crate) fn check_layout(template: &ParamStore, got: &ParamStore) -> Result<()> {
    let mismatch = |msg: String| Error::Checkpoint {
        version: crate::checkpoint::FORMAT_VERSION,
        msg,
    };
    if template.len() != got.len() {
        return Err(mismatch(format!(
            "expected {} parameters, found {}",
            template.len(),
            got.len()
        )));
    }
    for p in template.iter() {
        match got.get(&p.name) {
            None => return Err(mismatch(format!("missing parameter `{}`", p.name))),
            Some(t) if t.shape() != p.value.shape() => {
                return Err(mismatch(format!(
                    "parameter `{}` has shape {:?}, config implies {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}
