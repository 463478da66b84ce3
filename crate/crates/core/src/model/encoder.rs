//! Factorised encoder: spatial transformer layers within each temporal
//! index, temporal transformer layers across indices, then a residual
//! feed-forward stage producing the sequence-level feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::tubelet::TokenSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub n_sp: usize,
    pub n_tp: usize,
    pub mlp_hidden: usize,
    /// Learnable positional embedding over the temporal sequence.
    pub temporal_pos: bool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            heads: 4,
            n_sp: 2,
            n_tp: 2,
            mlp_hidden: 128,
            temporal_pos: true,
            ln_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.n_sp == 0 || self.n_tp == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidArgument(
                "layer counts and MLP width must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// LN followed by multi-head dot-product attention, with a skip connection.
#[derive(Clone, Debug)]
pub struct AttentionParams<P = ParamId> {
    pub ln_gain: P,
    pub ln_bias: P,
    /// `[d, 3d]`, query/key/value projections side by side.
    pub w_qkv: P,
    /// Query and value biases. Keys carry no bias: a key bias shifts every
    /// score of a query row equally and cancels in the softmax.
    pub b_q: P,
    pub b_v: P,
    pub w_out: P,
    pub b_out: P,
}

/// LN followed by a one-hidden-layer GELU MLP, with a skip connection.
#[derive(Clone, Debug)]
pub struct MlpParams<P = ParamId> {
    pub ln_gain: P,
    pub ln_bias: P,
    pub w_in: P,
    pub b_in: P,
    pub w_out: P,
    pub b_out: P,
}

#[derive(Clone, Debug)]
pub struct LayerParams<P = ParamId> {
    pub attn: AttentionParams<P>,
    pub mlp: MlpParams<P>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams<P = ParamId> {
    pub spatial: Vec<LayerParams<P>>,
    pub temporal: Vec<LayerParams<P>>,
    pub temporal_cls: P,
    pub temporal_pos: Option<P>,
    pub feed_forward: MlpParams<P>,
}

impl AttentionParams {
    fn init<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, d: usize, rng: &mut R) -> Self {
        AttentionParams {
            ln_gain: store.ones(&format!("{prefix}.ln.gain"), &[d]),
            ln_bias: store.zeros(&format!("{prefix}.ln.bias"), &[d]),
            w_qkv: store.fan_in(&format!("{prefix}.qkv.weight"), &[d, 3 * d], rng),
            b_q: store.zeros(&format!("{prefix}.q.bias"), &[d]),
            b_v: store.zeros(&format!("{prefix}.v.bias"), &[d]),
            w_out: store.fan_in(&format!("{prefix}.out.weight"), &[d, d], rng),
            b_out: store.zeros(&format!("{prefix}.out.bias"), &[d]),
        }
    }

    fn resolve(&self, b: &Bound) -> AttentionParams<Var> {
        AttentionParams {
            ln_gain: b.var(self.ln_gain),
            ln_bias: b.var(self.ln_bias),
            w_qkv: b.var(self.w_qkv),
            b_q: b.var(self.b_q),
            b_v: b.var(self.b_v),
            w_out: b.var(self.w_out),
            b_out: b.var(self.b_out),
        }
    }
}

impl MlpParams {
    pub(crate) fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        MlpParams {
            ln_gain: store.ones(&format!("{prefix}.ln.gain"), &[d]),
            ln_bias: store.zeros(&format!("{prefix}.ln.bias"), &[d]),
            w_in: store.fan_in(&format!("{prefix}.fc1.weight"), &[d, hidden], rng),
            b_in: store.zeros(&format!("{prefix}.fc1.bias"), &[hidden]),
            w_out: store.fan_in(&format!("{prefix}.fc2.weight"), &[hidden, d], rng),
            b_out: store.zeros(&format!("{prefix}.fc2.bias"), &[d]),
        }
    }

    pub(crate) fn resolve(&self, b: &Bound) -> MlpParams<Var> {
        MlpParams {
            ln_gain: b.var(self.ln_gain),
            ln_bias: b.var(self.ln_bias),
            w_in: b.var(self.w_in),
            b_in: b.var(self.b_in),
            w_out: b.var(self.w_out),
            b_out: b.var(self.b_out),
        }
    }
}

impl LayerParams {
    fn init<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        LayerParams {
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), cfg.d, rng),
            mlp: MlpParams::init(store, &format!("{prefix}.mlp"), cfg.d, cfg.mlp_hidden, rng),
        }
    }

    fn resolve(&self, b: &Bound) -> LayerParams<Var> {
        LayerParams {
            attn: self.attn.resolve(b),
            mlp: self.mlp.resolve(b),
        }
    }
}

impl EncoderParams {
    /// Registers encoder parameters for a clip with `n_t` temporal indices.
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: &EncoderConfig,
        n_t: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let spatial = (0..cfg.n_sp)
            .map(|i| LayerParams::init(store, &format!("spatial.{i}"), cfg, rng))
            .collect();
        let temporal = (0..cfg.n_tp)
            .map(|i| LayerParams::init(store, &format!("temporal.{i}"), cfg, rng))
            .collect();
        let temporal_cls = store.normal("temporal.cls", &[1, cfg.d], std, rng);
        let temporal_pos = cfg
            .temporal_pos
            .then(|| store.normal("temporal.pos", &[n_t + 1, cfg.d], std, rng));
        let feed_forward = MlpParams::init(store, "ff", cfg.d, cfg.mlp_hidden, rng);
        EncoderParams {
            spatial,
            temporal,
            temporal_cls,
            temporal_pos,
            feed_forward,
        }
    }

    pub fn resolve(&self, b: &Bound) -> EncoderParams<Var> {
        EncoderParams {
            spatial: self.spatial.iter().map(|l| l.resolve(b)).collect(),
            temporal: self.temporal.iter().map(|l| l.resolve(b)).collect(),
            temporal_cls: b.var(self.temporal_cls),
            temporal_pos: self.temporal_pos.map(|p| b.var(p)),
            feed_forward: self.feed_forward.resolve(b),
        }
    }
}

/// `x + MHA(LN(x))` over the last two axes of `x: [.., n, d]`; leading axes
/// are independent sequences.
pub fn mhsa<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &AttentionParams<Var>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("mhsa", format!("input {shape:?}")));
    }
    let last = shape.len() - 1;
    let d = shape[last];
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("mhsa", format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let normed = g.layer_norm(x, p.ln_gain, p.ln_bias, eps)?;
    let qkv = g.linear(normed, p.w_qkv, None)?;
    let q_all = g.narrow(qkv, last, 0, d)?;
    let q_all = g.add(q_all, p.b_q)?;
    let k_all = g.narrow(qkv, last, d, d)?;
    let v_all = g.narrow(qkv, last, 2 * d, d)?;
    let v_all = g.add(v_all, p.b_v)?;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.narrow(q_all, last, h * dh, dh)?;
        let k = g.narrow(k_all, last, h * dh, dh)?;
        let v = g.narrow(v_all, last, h * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, last)?;
        ctx.push(g.matmul(attn, v)?);
    }
    let merged = g.concat(&ctx, last)?;
    let out = g.linear(merged, p.w_out, Some(p.b_out))?;
    g.add(x, out)
}

/// `x + MLP(LN(x))` with a GELU hidden layer.
pub fn feed_forward<S: Scalar>(g: &mut Graph<S>, x: Var, p: &MlpParams<Var>, eps: f64) -> Result<Var> {
    let normed = g.layer_norm(x, p.ln_gain, p.ln_bias, eps)?;
    let hidden = g.linear(normed, p.w_in, Some(p.b_in))?;
    let hidden = g.gelu(hidden)?;
    let out = g.linear(hidden, p.w_out, Some(p.b_out))?;
    g.add(x, out)
}

pub fn transformer_layer<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &LayerParams<Var>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let x = mhsa(g, x, &p.attn, heads, eps)?;
    feed_forward(g, x, &p.mlp, eps)
}

/// Runs the spatial layers over each temporal index's tokens, prefixed by
/// the shared class token, and returns the class-token outputs `[n_t, d]`.
pub fn spatial_encode<S: Scalar>(
    g: &mut Graph<S>,
    seq: &TokenSequence,
    layers: &[LayerParams<Var>],
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let d = g.shape(seq.tokens)[1];
    let (nt, ns) = (seq.n_t, seq.spatial_len());
    if g.shape(seq.tokens)[0] != seq.len() {
        return Err(Error::shape(
            "spatial_encode",
            format!("{:?} tokens for {} expected", g.shape(seq.tokens), seq.len()),
        ));
    }
    let cls = g.narrow(seq.tokens, 0, 0, 1)?;
    let cls = g.reshape(cls, &[1, 1, d])?;
    let cls_rows = vec![cls; nt];
    let cls_per_index = g.concat(&cls_rows, 0)?;
    let patches = g.narrow(seq.tokens, 0, 1, nt * ns)?;
    let patches = g.reshape(patches, &[nt, ns, d])?;
    let mut x = g.concat(&[cls_per_index, patches], 1)?;
    for layer in layers {
        x = transformer_layer(g, x, layer, heads, eps)?;
    }
    let out = g.narrow(x, 1, 0, 1)?;
    g.reshape(out, &[nt, d])
}

/// Temporal layers over `[temporal_cls, y_s]`; returns the class output `[d]`.
pub fn temporal_encode<S: Scalar>(
    g: &mut Graph<S>,
    spatial: Var,
    p: &EncoderParams<Var>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let shape = g.shape(spatial).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("temporal_encode", format!("input {shape:?}")));
    }
    let d = shape[1];
    let mut x = g.concat(&[p.temporal_cls, spatial], 0)?;
    if let Some(pos) = p.temporal_pos {
        x = g.add(x, pos)?;
    }
    for layer in &p.temporal {
        x = transformer_layer(g, x, layer, heads, eps)?;
    }
    let out = g.narrow(x, 0, 0, 1)?;
    g.reshape(out, &[d])
}

/// Intermediate encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderState {
    /// `[n_t, d]` spatial class tokens.
    pub y_s: Var,
    /// `[d]` temporal class token.
    pub y_t: Var,
    /// `[d]` `y_t` plus the mean spatial class token.
    pub y_fe: Var,
    /// `[d]` sequence-level spatio-temporal feature.
    pub y_ff: Var,
}

pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    seq: &TokenSequence,
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
) -> Result<EncoderState> {
    let y_s = spatial_encode(g, seq, &p.spatial, cfg.heads, cfg.ln_eps)?;
    let y_t = temporal_encode(g, y_s, p, cfg.heads, cfg.ln_eps)?;
    let pooled = g.mean_axis(y_s, 0)?;
    let y_fe = g.add(y_t, pooled)?;
    let y_ff = feed_forward(g, y_fe, &p.feed_forward, cfg.ln_eps)?;
    Ok(EncoderState { y_s, y_t, y_fe, y_ff })
}
