//! Graph-building forward passes for every architecture in the zoo.
//!
//! One code path serves training (gradients via the tape), evaluation, and
//! trace capture. The `ignore_signals` switch runs the identical recurrence
//! with every level-signal contribution skipped, which is the comparison
//! route for the zero-init equivalence property.

use std::sync::Arc;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::{sinusoidal_encoding, AttnMask};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::build::{FfnRef, Model, SignalPairIds, Stack, SubAttn, SubFfn, SubNorm};
use super::config::{Mode, NormPlacement};
use crate::signal::SignalVariant;

const LN_EPS: f64 = 1e-5;

/// A rectangular batch of token ids, row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Config("ragged token batch".into()));
        }
        Ok(TokenBatch {
            batch: rows.len(),
            len,
            ids: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    fn digest(&self) -> u64 {
        let mut h = fnv_init();
        for &id in &self.ids {
            h = fnv_step(h, id as u64);
        }
        fnv_step(h, (self.batch as u64) << 32 | self.len as u64)
    }
}

fn fnv_init() -> u64 {
    0xcbf2_9ce4_8422_2325
}

fn fnv_step(mut h: u64, x: u64) -> u64 {
    for byte in x.to_le_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn digest_tensor<S: Scalar>(t: &Tensor<S>) -> u64 {
    let mut h = fnv_init();
    for &v in t.data() {
        h = fnv_step(h, v.to_f64().to_bits());
    }
    h
}

/// Per-level hidden states and self-attention probability maps captured
/// during one forward pass. `hidden` has `levels + 1` entries, the first
/// being the post-embedding state; attention rows each sum to one.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S: Scalar> {
    /// `[batch, n_tokens, hidden]` per level boundary.
    pub hidden: Vec<Tensor<S>>,
    /// `[batch, heads, n_q, n_k]` self-attention probabilities per level.
    pub attn: Vec<Tensor<S>>,
    pub heads: usize,
    pub input_digest: u64,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn levels(&self) -> usize {
        self.hidden.len() - 1
    }
}

/// Knobs for one forward pass.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub trace: bool,
    pub ignore_signals: bool,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            trace: false,
            ignore_signals: false,
            rng: None,
        }
    }

    pub fn eval_traced() -> Self {
        ForwardCtx {
            trace: true,
            ..ForwardCtx::eval()
        }
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        ForwardCtx {
            train: true,
            trace: false,
            ignore_signals: false,
            rng: Some(rng),
        }
    }
}

/// Input-independent level transition used by the static-signal scheme:
/// adds `enc(position) + enc(level)` to every token.
pub fn universal_level_transition<S: Scalar>(x: &Tensor<S>, level: usize) -> Result<Tensor<S>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::InvalidDimension {
            op: "level_transition",
            detail: format!("needs [..., tokens, hidden], got {:?}", x.shape()),
        });
    }
    let (n, h) = (x.shape()[r - 2], x.shape()[r - 1]);
    let table = transition_table::<S>(n, h, level)?;
    x.add(&table)
}

/// `[n, h]` table of `enc(pos) + enc(level)` rows.
fn transition_table<S: Scalar>(n: usize, h: usize, level: usize) -> Result<Tensor<S>> {
    let level_enc = sinusoidal_encoding::<S>(level, h)?;
    let mut data = Vec::with_capacity(n * h);
    for pos in 0..n {
        let pos_enc = sinusoidal_encoding::<S>(pos, h)?;
        for j in 0..h {
            data.push(pos_enc.data()[j] + level_enc.data()[j]);
        }
    }
    Tensor::from_vec(vec![n, h], data)
}

impl<S: Scalar> Model<S> {
    pub fn heads(&self) -> usize {
        self.cfg.heads
    }

    fn dropout(&self, g: &mut Graph<S>, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let p = self.cfg.dropout;
        if !ctx.train || p == 0.0 {
            return Ok(x);
        }
        let rng = ctx.rng.as_deref_mut().ok_or_else(|| {
            Error::Config("training forward pass needs an rng for dropout".into())
        })?;
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask_data: Vec<S> = (0..n)
            .map(|_| {
                if rng.next_f64() < p {
                    S::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = g.input(Tensor::from_vec(shape, mask_data)?);
        g.mul(x, mask)
    }

    fn layer_norm(&self, g: &mut Graph<S>, x: NodeId, norm: &SubNorm) -> Result<NodeId> {
        let gamma = g.param(&self.store, norm.gamma);
        let beta = g.param(&self.store, norm.beta);
        g.layer_norm(x, gamma, beta, S::from_f64(LN_EPS))
    }

    fn apply_signal_node(
        &self,
        g: &mut Graph<S>,
        pair: &SignalPairIds,
        x: NodeId,
    ) -> Result<NodeId> {
        let a = g.param(&self.store, pair.a);
        let b = g.param(&self.store, pair.b);
        let thin = g.matmul(x, b)?;
        let a_t = g.transpose_last(a)?;
        g.matmul(thin, a_t)
    }

    /// Q/K/V projection with the configured signal placement. `x_q`/`x_kv`
    /// are the attention inputs; signals always read the same input the
    /// corresponding projection reads.
    #[allow(clippy::too_many_arguments)]
    fn attn_core(
        &self,
        g: &mut Graph<S>,
        x_q: NodeId,
        x_kv: NodeId,
        attn: &SubAttn,
        signals: Option<&super::build::SignalSetIds>,
        mask: Option<Arc<AttnMask>>,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, NodeId)> {
        let heads = self.cfg.heads;
        let h = self.cfg.hidden;
        let hd = h / heads;
        let use_signals = signals.is_some() && !ctx.ignore_signals;
        let before = use_signals && self.cfg.signal_variant == SignalVariant::BeforeAttn;
        let after = use_signals && !before;

        let project = |g: &mut Graph<S>,
                           x: NodeId,
                           w: crate::params::ParamId,
                           bias: crate::params::ParamId,
                           pair: Option<&SignalPairIds>|
         -> Result<NodeId> {
            let w = g.param(&self.store, w);
            let b = g.param(&self.store, bias);
            let input = match (before, pair) {
                (true, Some(p)) => {
                    let sig = self.apply_signal_node(g, p, x)?;
                    g.add(x, sig)?
                }
                _ => x,
            };
            let mut y = g.linear(input, w, Some(b))?;
            if after {
                if let Some(p) = pair {
                    let sig = self.apply_signal_node(g, p, x)?;
                    y = g.add(y, sig)?;
                }
            }
            Ok(y)
        };

        let q = project(g, x_q, attn.w_q, attn.b_q, signals.and_then(|s| s.q.as_ref()))?;
        let k = project(g, x_kv, attn.w_k, attn.b_k, signals.and_then(|s| s.k.as_ref()))?;
        let v = project(g, x_kv, attn.w_v, attn.b_v, signals.and_then(|s| s.v.as_ref()))?;

        // [B, n, H] -> [B, heads, n, hd]
        let split = |g: &mut Graph<S>, x: NodeId| -> Result<NodeId> {
            let shape = g.value(x).shape().to_vec();
            let (b, n) = (shape[0], shape[1]);
            let r = g.reshape(x, &[b, n, heads, hd])?;
            g.permute(r, &[0, 2, 1, 3])
        };
        let qh = split(g, q)?;
        let kh = split(g, k)?;
        let vh = split(g, v)?;

        let kt = g.transpose_last(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, S::from_f64(1.0 / (hd as f64).sqrt()));
        let probs = g.masked_softmax(scaled, mask)?;
        let probs_dropped = self.dropout(g, probs, ctx)?;
        let ctx_heads = g.matmul(probs_dropped, vh)?;

        // [B, heads, n, hd] -> [B, n, H]
        let shape = g.value(ctx_heads).shape().to_vec();
        let (b, n) = (shape[0], shape[2]);
        let back = g.permute(ctx_heads, &[0, 2, 1, 3])?;
        let merged = g.reshape(back, &[b, n, h])?;
        let w_o = g.param(&self.store, attn.w_o);
        let b_o = g.param(&self.store, attn.b_o);
        let out = g.linear(merged, w_o, Some(b_o))?;
        Ok((out, probs))
    }

    fn ffn_core(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        ffn: &SubFfn,
        signal: Option<&SignalPairIds>,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let use_signal = signal.is_some() && !ctx.ignore_signals;
        let w_up = g.param(&self.store, ffn.w_up);
        let b_up = g.param(&self.store, ffn.b_up);
        let pre = if use_signal && self.cfg.signal_variant != SignalVariant::InterFfn {
            // signal added to the input before the up-projection
            let sig = self.apply_signal_node(g, signal.unwrap(), x)?;
            let shifted = g.add(x, sig)?;
            g.linear(shifted, w_up, Some(b_up))?
        } else if use_signal {
            // inter-FFN: signal lands in the intermediate space
            let lin = g.linear(x, w_up, Some(b_up))?;
            let sig = self.apply_signal_node(g, signal.unwrap(), x)?;
            g.add(lin, sig)?
        } else {
            g.linear(x, w_up, Some(b_up))?
        };
        let act = g.gelu(pre);
        let w_down = g.param(&self.store, ffn.w_down);
        let b_down = g.param(&self.store, ffn.b_down);
        g.linear(act, w_down, Some(b_down))
    }

    fn resolve_ffn<'m>(&'m self, stack: &'m Stack, r: FfnRef) -> &'m SubFfn {
        match r {
            FfnRef::Local(i) => &stack.ffns[i],
            FfnRef::Shared => self
                .shared_ffn
                .as_ref()
                .expect("shared ffn wired but absent"),
        }
    }

    /// Run one stack over `x [B, n, H]`. `enc_out` enables the
    /// cross-attention sub-layer (decoder stacks).
    #[allow(clippy::too_many_arguments)]
    fn run_stack(
        &self,
        g: &mut Graph<S>,
        stack: &Stack,
        mut x: NodeId,
        enc_out: Option<NodeId>,
        self_mask: Option<Arc<AttnMask>>,
        ctx: &mut ForwardCtx,
        input_digest: u64,
    ) -> Result<(NodeId, Option<ForwardTrace<S>>)> {
        let post = self.cfg.norm_placement == NormPlacement::Post;
        let mut trace = ctx.trace.then(|| ForwardTrace {
            hidden: vec![g.value(x).clone()],
            attn: Vec::new(),
            heads: self.cfg.heads,
            input_digest,
        });

        for (level, wiring) in stack.levels.iter().enumerate() {
            if self.cfg.has_static_transition() && !ctx.ignore_signals {
                let shape = g.value(x).shape();
                let (n, h) = (shape[1], shape[2]);
                let table = g.input(transition_table::<S>(n, h, level)?);
                x = g.add(x, table)?;
            }
            let norms = &stack.norms[wiring.norms];
            let signals = wiring.signals.map(|i| &stack.signals[i]);
            let attn = &stack.attns[wiring.attn];

            // self-attention sub-layer
            let (attn_out, probs) = if post {
                let (out, probs) =
                    self.attn_core(g, x, x, attn, signals, self_mask.clone(), ctx)?;
                let dropped = self.dropout(g, out, ctx)?;
                let sum = g.add(x, dropped)?;
                (self.layer_norm(g, sum, &norms.attn)?, probs)
            } else {
                let xn = self.layer_norm(g, x, &norms.attn)?;
                let (out, probs) =
                    self.attn_core(g, xn, xn, attn, signals, self_mask.clone(), ctx)?;
                let dropped = self.dropout(g, out, ctx)?;
                (g.add(x, dropped)?, probs)
            };
            x = attn_out;
            if let Some(t) = trace.as_mut() {
                t.attn.push(g.value(probs).clone());
            }

            // cross-attention sub-layer (no level signals by design)
            if let Some(enc) = enc_out {
                let cross = &stack.crosses[wiring.cross.expect("decoder wiring")];
                let cross_norm = norms.cross.as_ref().expect("decoder norms");
                x = if post {
                    let (out, _) = self.attn_core(g, x, enc, cross, None, None, ctx)?;
                    let dropped = self.dropout(g, out, ctx)?;
                    let sum = g.add(x, dropped)?;
                    self.layer_norm(g, sum, cross_norm)?
                } else {
                    let xn = self.layer_norm(g, x, cross_norm)?;
                    let (out, _) = self.attn_core(g, xn, enc, cross, None, None, ctx)?;
                    let dropped = self.dropout(g, out, ctx)?;
                    g.add(x, dropped)?
                };
            }

            // feedforward sub-layer
            let ffn = self.resolve_ffn(stack, wiring.ffn);
            let f_signal = signals.and_then(|s| s.f.as_ref());
            x = if post {
                let out = self.ffn_core(g, x, ffn, f_signal, ctx)?;
                let dropped = self.dropout(g, out, ctx)?;
                let sum = g.add(x, dropped)?;
                self.layer_norm(g, sum, &norms.ffn)?
            } else {
                let xn = self.layer_norm(g, x, &norms.ffn)?;
                let out = self.ffn_core(g, xn, ffn, f_signal, ctx)?;
                let dropped = self.dropout(g, out, ctx)?;
                g.add(x, dropped)?
            };

            if let Some(t) = trace.as_mut() {
                t.hidden.push(g.value(x).clone());
            }
        }

        if let Some(final_norm) = &stack.final_norm {
            x = self.layer_norm(g, x, final_norm)?;
        }
        Ok((x, trace))
    }

    /// Token embedding, scaled by `sqrt(H)`, plus sinusoidal positions.
    fn embed_tokens(
        &self,
        g: &mut Graph<S>,
        table: crate::params::ParamId,
        batch: &TokenBatch,
    ) -> Result<NodeId> {
        let h = self.cfg.hidden;
        if !h.is_multiple_of(2) {
            return Err(Error::Config(
                "sequence mode needs an even hidden dimension for positional encodings".into(),
            ));
        }
        let table = g.param(&self.store, table);
        let flat = g.gather_rows(table, Arc::new(batch.ids.clone()))?;
        let shaped = g.reshape(flat, &[batch.batch, batch.len, h])?;
        let scaled = g.scale(shaped, S::from_f64((h as f64).sqrt()));
        let mut pos_data = Vec::with_capacity(batch.len * h);
        for p in 0..batch.len {
            pos_data.extend_from_slice(sinusoidal_encoding::<S>(p, h)?.data());
        }
        let pos = g.input(Tensor::from_vec(vec![batch.len, h], pos_data)?);
        g.add(scaled, pos)
    }

    /// Patch projection, class token, learnable positions.
    fn embed_patches(&self, g: &mut Graph<S>, patches: &Tensor<S>) -> Result<NodeId> {
        let vis = self.cfg.vision.expect("vision config");
        let (patch_w, patch_b, cls, pos) = match &self.embed {
            super::build::EmbedParams::Vision {
                patch_w,
                patch_b,
                cls,
                pos,
            } => (*patch_w, *patch_b, *cls, *pos),
            _ => unreachable!("vision forward on sequence embeddings"),
        };
        if patches.rank() != 3
            || patches.shape()[1] != vis.n_patches()
            || patches.shape()[2] != vis.patch_dim()
        {
            return Err(Error::ShapeMismatch {
                op: "embed_patches",
                lhs: patches.shape().to_vec(),
                rhs: vec![0, vis.n_patches(), vis.patch_dim()],
            });
        }
        let b = patches.shape()[0];
        let x = g.input(patches.clone());
        let w = g.param(&self.store, patch_w);
        let bias = g.param(&self.store, patch_b);
        let projected = g.linear(x, w, Some(bias))?;
        let cls = g.param(&self.store, cls);
        let cls_b = g.broadcast_to(cls, &[b, 1, self.cfg.hidden])?;
        let with_cls = g.concat(&[cls_b, projected], 1)?;
        let pos = g.param(&self.store, pos);
        g.add(with_cls, pos)
    }

    /// Encoder over token ids (translation mode).
    pub fn encode_tokens(
        &self,
        g: &mut Graph<S>,
        src: &TokenBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, Option<ForwardTrace<S>>)> {
        let table = match &self.embed {
            super::build::EmbedParams::Seq { src, .. } => *src,
            _ => {
                return Err(Error::Config(
                    "token input into an image model".into(),
                ))
            }
        };
        let x = self.embed_tokens(g, table, src)?;
        self.run_stack(g, &self.encoder, x, None, None, ctx, src.digest())
    }

    /// Encoder over pre-extracted patches (vision mode).
    pub fn encode_patches(
        &self,
        g: &mut Graph<S>,
        patches: &Tensor<S>,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, Option<ForwardTrace<S>>)> {
        let x = self.embed_patches(g, patches)?;
        self.run_stack(
            g,
            &self.encoder,
            x,
            None,
            None,
            ctx,
            digest_tensor(patches),
        )
    }

    /// Causal decoder over target ids against encoder output.
    pub fn decode_tokens(
        &self,
        g: &mut Graph<S>,
        tgt: &TokenBatch,
        enc_out: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, Option<ForwardTrace<S>>)> {
        let decoder = self.decoder.as_ref().ok_or_else(|| {
            Error::Config("decode called on an encoder-only model".into())
        })?;
        let table = match &self.embed {
            super::build::EmbedParams::Seq { tgt, .. } => *tgt,
            _ => unreachable!("decoder on vision embeddings"),
        };
        let x = self.embed_tokens(g, table, tgt)?;
        let mask = Arc::new(AttnMask::causal(tgt.len));
        self.run_stack(g, decoder, x, Some(enc_out), Some(mask), ctx, tgt.digest())
    }

    /// Vocabulary logits `[B, L, V]` from decoder hidden states.
    pub fn project_vocab(&self, g: &mut Graph<S>, hidden: NodeId) -> Result<NodeId> {
        let w = g.param(&self.store, self.head.w);
        let b = g.param(&self.store, self.head.b);
        g.linear(hidden, w, Some(b))
    }

    /// Class logits `[B, classes]` from the class-token hidden state.
    pub fn project_classes(&self, g: &mut Graph<S>, hidden: NodeId) -> Result<NodeId> {
        let shape = g.value(hidden).shape().to_vec();
        let (b, h) = (shape[0], shape[2]);
        let cls = g.slice_axis(hidden, 1, 0, 1)?;
        let flat = g.reshape(cls, &[b, h])?;
        let w = g.param(&self.store, self.head.w);
        let bias = g.param(&self.store, self.head.b);
        g.linear(flat, w, Some(bias))
    }

    /// Full seq2seq forward: source and shifted target in, logits out.
    #[allow(clippy::type_complexity)]
    pub fn seq2seq_logits(
        &self,
        g: &mut Graph<S>,
        src: &TokenBatch,
        dec_in: &TokenBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, Option<ForwardTrace<S>>, Option<ForwardTrace<S>>)> {
        if self.cfg.mode != Mode::EncoderDecoder {
            return Err(Error::Config("seq2seq forward on an encoder-only model".into()));
        }
        let (enc, enc_trace) = self.encode_tokens(g, src, ctx)?;
        let (dec, dec_trace) = self.decode_tokens(g, dec_in, enc, ctx)?;
        let logits = self.project_vocab(g, dec)?;
        Ok((logits, enc_trace, dec_trace))
    }

    /// Full classification forward: patches in, class logits out.
    pub fn classify_logits(
        &self,
        g: &mut Graph<S>,
        patches: &Tensor<S>,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, Option<ForwardTrace<S>>)> {
        if self.cfg.mode != Mode::EncoderOnly {
            return Err(Error::Config("classification forward on a seq2seq model".into()));
        }
        let (enc, trace) = self.encode_patches(g, patches, ctx)?;
        let logits = self.project_classes(g, enc)?;
        Ok((logits, trace))
    }
}
