//! Model construction.
//!
//! A single wiring routine, [`wire`], walks every parameter the
//! configuration implies in a fixed order and reports each one to a
//! [`ParamVisitor`]. Building a real model and enumerating parameter
//! metadata for counting are the same walk with different visitors, so the
//! two can never drift apart.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamRole, ParamStore};
use crate::rng::Rng;
use crate::signal::make_level_signals;
use crate::tensor::{Scalar, Tensor};

use super::config::{Arch, Mode, ModelConfig, NormPlacement};

/// How a parameter is initialized; doubles as its shape-independent spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with std `1/sqrt(fan_in)`, fan-in taken from the first
    /// extent.
    LinearWeight,
    Zeros,
    Ones,
    /// Gaussian with the given std.
    Gaussian(f64),
    /// Placeholder for tensors filled in from a donor buffer (signal
    /// factors built by `make_level_signals`).
    Donor,
}

/// Receives every parameter of a model in construction order.
pub trait ParamVisitor {
    #[allow(clippy::too_many_arguments)]
    fn visit(
        &mut self,
        name: String,
        shape: Vec<usize>,
        role: ParamRole,
        group: ParamGroup,
        init: Init,
        donor: Option<Tensor<f64>>,
        rng: &mut Rng,
    ) -> Result<ParamId>;
}

/// Allocating visitor: draws initial values and registers them in a store.
struct Alloc<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
}

impl<S: Scalar> ParamVisitor for Alloc<'_, S> {
    fn visit(
        &mut self,
        name: String,
        shape: Vec<usize>,
        role: ParamRole,
        group: ParamGroup,
        init: Init,
        donor: Option<Tensor<f64>>,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let value = match init {
            Init::LinearWeight => {
                let std = 1.0 / (shape[0] as f64).sqrt();
                Tensor::randn(&shape, std, rng)
            }
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, S::ONE),
            Init::Gaussian(std) => Tensor::randn(&shape, std, rng),
            Init::Donor => donor
                .ok_or_else(|| Error::Config(format!("missing donor tensor for '{name}'")))?
                .cast::<S>(),
        };
        self.store.add(name, value, role, group)
    }
}

/// Shape, role and group of one parameter, without its data.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

/// Recording visitor: collects [`ParamSpec`]s and allocates nothing.
#[derive(Default)]
struct Describe {
    specs: Vec<ParamSpec>,
}

impl ParamVisitor for Describe {
    fn visit(
        &mut self,
        name: String,
        shape: Vec<usize>,
        role: ParamRole,
        group: ParamGroup,
        _init: Init,
        _donor: Option<Tensor<f64>>,
        _rng: &mut Rng,
    ) -> Result<ParamId> {
        self.specs.push(ParamSpec {
            name,
            shape,
            role,
            group,
        });
        Ok(ParamId(self.specs.len() - 1))
    }
}

/// Projection weights of one attention sub-layer.
#[derive(Debug, Clone, Copy)]
pub struct SubAttn {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SubFfn {
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub w_down: ParamId,
    pub b_down: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SubNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Gamma/beta sets one level applies.
#[derive(Debug, Clone, Copy)]
pub struct StackNorms {
    pub attn: SubNorm,
    pub cross: Option<SubNorm>,
    pub ffn: SubNorm,
}

#[derive(Debug, Clone, Copy)]
pub struct SignalPairIds {
    pub a: ParamId,
    pub b: ParamId,
}

/// The factor pairs one level owns.
#[derive(Debug, Clone, Copy, Default)]
pub struct SignalSetIds {
    pub q: Option<SignalPairIds>,
    pub k: Option<SignalPairIds>,
    pub v: Option<SignalPairIds>,
    pub f: Option<SignalPairIds>,
}

/// Which component indices level `i` uses.
#[derive(Debug, Clone, Copy)]
pub struct LevelWiring {
    pub attn: usize,
    pub cross: Option<usize>,
    pub ffn: FfnRef,
    pub norms: usize,
    pub signals: Option<usize>,
}

/// Levels reference either a stack-local FFN or the model-global shared one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnRef {
    Local(usize),
    Shared,
}

#[derive(Debug, Clone)]
pub struct Stack {
    pub attns: Vec<SubAttn>,
    pub crosses: Vec<SubAttn>,
    pub ffns: Vec<SubFfn>,
    pub norms: Vec<StackNorms>,
    pub signals: Vec<SignalSetIds>,
    pub final_norm: Option<SubNorm>,
    pub levels: Vec<LevelWiring>,
}

#[derive(Debug, Clone)]
pub enum EmbedParams {
    Seq {
        src: ParamId,
        tgt: ParamId,
    },
    Vision {
        patch_w: ParamId,
        patch_b: ParamId,
        cls: ParamId,
        pos: ParamId,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// A fully wired model: configuration, parameter store, and the component
/// indices each stack level uses.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub embed: EmbedParams,
    pub encoder: Stack,
    pub decoder: Option<Stack>,
    pub shared_ffn: Option<SubFfn>,
    pub head: HeadParams,
}

struct Wired {
    embed: EmbedParams,
    encoder: Stack,
    decoder: Option<Stack>,
    shared_ffn: Option<SubFfn>,
    head: HeadParams,
}

fn visit_attn<V: ParamVisitor>(
    v: &mut V,
    prefix: &str,
    h: usize,
    group: ParamGroup,
    rng: &mut Rng,
) -> Result<SubAttn> {
    let weight = |v: &mut V, field: &str, rng: &mut Rng| {
        v.visit(
            format!("{prefix}.{field}"),
            vec![h, h],
            ParamRole::Weight,
            group,
            Init::LinearWeight,
            None,
            rng,
        )
    };
    let w_q = weight(v, "w_q", rng)?;
    let w_k = weight(v, "w_k", rng)?;
    let w_v = weight(v, "w_v", rng)?;
    let w_o = weight(v, "w_o", rng)?;
    let bias = |v: &mut V, field: &str, rng: &mut Rng| {
        v.visit(
            format!("{prefix}.{field}"),
            vec![h],
            ParamRole::Bias,
            group,
            Init::Zeros,
            None,
            rng,
        )
    };
    let b_q = bias(v, "b_q", rng)?;
    let b_k = bias(v, "b_k", rng)?;
    let b_v = bias(v, "b_v", rng)?;
    let b_o = bias(v, "b_o", rng)?;
    Ok(SubAttn {
        w_q,
        b_q,
        w_k,
        b_k,
        w_v,
        b_v,
        w_o,
        b_o,
    })
}

fn visit_ffn<V: ParamVisitor>(
    v: &mut V,
    prefix: &str,
    h: usize,
    ff: usize,
    group: ParamGroup,
    rng: &mut Rng,
) -> Result<SubFfn> {
    let w_up = v.visit(
        format!("{prefix}.w_up"),
        vec![h, ff],
        ParamRole::Weight,
        group,
        Init::LinearWeight,
        None,
        rng,
    )?;
    let b_up = v.visit(
        format!("{prefix}.b_up"),
        vec![ff],
        ParamRole::Bias,
        group,
        Init::Zeros,
        None,
        rng,
    )?;
    let w_down = v.visit(
        format!("{prefix}.w_down"),
        vec![ff, h],
        ParamRole::Weight,
        group,
        Init::LinearWeight,
        None,
        rng,
    )?;
    let b_down = v.visit(
        format!("{prefix}.b_down"),
        vec![h],
        ParamRole::Bias,
        group,
        Init::Zeros,
        None,
        rng,
    )?;
    Ok(SubFfn {
        w_up,
        b_up,
        w_down,
        b_down,
    })
}

fn visit_norm<V: ParamVisitor>(
    v: &mut V,
    prefix: &str,
    h: usize,
    group: ParamGroup,
    rng: &mut Rng,
) -> Result<SubNorm> {
    let gamma = v.visit(
        format!("{prefix}.gamma"),
        vec![h],
        ParamRole::Norm,
        group,
        Init::Ones,
        None,
        rng,
    )?;
    let beta = v.visit(
        format!("{prefix}.beta"),
        vec![h],
        ParamRole::Norm,
        group,
        Init::Zeros,
        None,
        rng,
    )?;
    Ok(SubNorm { gamma, beta })
}

/// Walk every parameter of `cfg` in construction order.
fn wire<V: ParamVisitor>(cfg: &ModelConfig, v: &mut V, rng: &mut Rng) -> Result<Wired> {
    cfg.validate()?;
    let h = cfg.hidden;
    let ff = cfg.ff;

    // Embeddings.
    let embed = match cfg.mode {
        Mode::EncoderDecoder => {
            let vocab = cfg.vocab.unwrap();
            let std = 1.0 / (h as f64).sqrt();
            let src = v.visit(
                "src_embed.weight".into(),
                vec![vocab, h],
                ParamRole::Weight,
                ParamGroup::Embedding,
                Init::Gaussian(std),
                None,
                rng,
            )?;
            let tgt = v.visit(
                "tgt_embed.weight".into(),
                vec![vocab, h],
                ParamRole::Weight,
                ParamGroup::Embedding,
                Init::Gaussian(std),
                None,
                rng,
            )?;
            EmbedParams::Seq { src, tgt }
        }
        Mode::EncoderOnly => {
            let vis = cfg.vision.unwrap();
            let patch_w = v.visit(
                "patch_embed.weight".into(),
                vec![vis.patch_dim(), h],
                ParamRole::Weight,
                ParamGroup::Embedding,
                Init::LinearWeight,
                None,
                rng,
            )?;
            let patch_b = v.visit(
                "patch_embed.bias".into(),
                vec![h],
                ParamRole::Bias,
                ParamGroup::Embedding,
                Init::Zeros,
                None,
                rng,
            )?;
            let cls = v.visit(
                "cls_token".into(),
                vec![1, 1, h],
                ParamRole::Weight,
                ParamGroup::Embedding,
                Init::Zeros,
                None,
                rng,
            )?;
            let pos = v.visit(
                "pos_embed".into(),
                vec![1, vis.n_tokens(), h],
                ParamRole::Weight,
                ParamGroup::Embedding,
                Init::Gaussian(0.02),
                None,
                rng,
            )?;
            EmbedParams::Vision {
                patch_w,
                patch_b,
                cls,
                pos,
            }
        }
    };

    // One FFN for the whole model under the one-wide-FFN scheme.
    let shared_ffn = if cfg.arch == Arch::Owf {
        Some(visit_ffn(v, "shared.ffn", h, ff, ParamGroup::SharedFfn, rng)?)
    } else {
        None
    };

    let encoder = wire_stack(cfg, v, rng, false)?;
    let decoder = match cfg.mode {
        Mode::EncoderDecoder => Some(wire_stack(cfg, v, rng, true)?),
        Mode::EncoderOnly => None,
    };

    // Head.
    let (head_in, head_out) = match cfg.mode {
        Mode::EncoderDecoder => (h, cfg.vocab.unwrap()),
        Mode::EncoderOnly => (h, cfg.vision.unwrap().classes),
    };
    let head_w = v.visit(
        "head.weight".into(),
        vec![head_in, head_out],
        ParamRole::Weight,
        ParamGroup::Head,
        Init::LinearWeight,
        None,
        rng,
    )?;
    let head_b = v.visit(
        "head.bias".into(),
        vec![head_out],
        ParamRole::Bias,
        ParamGroup::Head,
        Init::Zeros,
        None,
        rng,
    )?;

    Ok(Wired {
        embed,
        encoder,
        decoder,
        shared_ffn,
        head: HeadParams {
            w: head_w,
            b: head_b,
        },
    })
}

fn wire_stack<V: ParamVisitor>(
    cfg: &ModelConfig,
    v: &mut V,
    rng: &mut Rng,
    is_decoder: bool,
) -> Result<Stack> {
    let h = cfg.hidden;
    let ff = cfg.ff;
    let n = cfg.levels;
    let stack = if is_decoder { "decoder" } else { "encoder" };
    let (block_group, norm_group, signal_group) = if is_decoder {
        (
            ParamGroup::DecoderBlock,
            ParamGroup::DecoderNorm,
            ParamGroup::DecoderSignal,
        )
    } else {
        (
            ParamGroup::EncoderBlock,
            ParamGroup::EncoderNorm,
            ParamGroup::EncoderSignal,
        )
    };
    let shared_block = matches!(cfg.arch, Arch::Universal | Arch::Ringformer);
    let shared_norms = cfg.arch == Arch::Universal;

    let block_count = if shared_block { 1 } else { n };
    let mut attns = Vec::with_capacity(block_count);
    let mut crosses = Vec::new();
    let mut ffns = Vec::new();
    for b in 0..block_count {
        let blk = if shared_block {
            format!("{stack}.block")
        } else {
            format!("{stack}.layer{b}")
        };
        attns.push(visit_attn(v, &format!("{blk}.attn"), h, block_group, rng)?);
        if is_decoder {
            crosses.push(visit_attn(v, &format!("{blk}.cross"), h, block_group, rng)?);
        }
        if cfg.arch != Arch::Owf {
            ffns.push(visit_ffn(v, &format!("{blk}.ffn"), h, ff, block_group, rng)?);
        }
    }

    let norm_count = if shared_norms { 1 } else { n };
    let mut norms = Vec::with_capacity(norm_count);
    for i in 0..norm_count {
        let site = if shared_norms {
            format!("{stack}.block")
        } else {
            format!("{stack}.level{i}")
        };
        let attn = visit_norm(v, &format!("{site}.ln_attn"), h, norm_group, rng)?;
        let cross = if is_decoder {
            Some(visit_norm(v, &format!("{site}.ln_cross"), h, norm_group, rng)?)
        } else {
            None
        };
        let ffn = visit_norm(v, &format!("{site}.ln_ffn"), h, norm_group, rng)?;
        norms.push(StackNorms { attn, cross, ffn });
    }

    // Level signals: built through the level-signal constructor so the model
    // and the standalone module share initialization exactly.
    let mut signals = Vec::new();
    if cfg.has_signal_pairs() {
        let sets = make_level_signals::<f64>(
            h,
            ff,
            n,
            cfg.rank_policy,
            cfg.signal_variant,
            false,
            rng,
        )?;
        for (i, set) in sets.into_iter().enumerate() {
            let pair = |v: &mut V,
                            rng: &mut Rng,
                            field: &str,
                            p: Option<crate::signal::LowRankFactorPair<f64>>|
             -> Result<Option<SignalPairIds>> {
                match p {
                    None => Ok(None),
                    Some(p) => {
                        let a = v.visit(
                            format!("{stack}.level{i}.signal.{field}.a"),
                            p.a.shape().to_vec(),
                            ParamRole::Weight,
                            signal_group,
                            Init::Donor,
                            Some(p.a),
                            rng,
                        )?;
                        let b = v.visit(
                            format!("{stack}.level{i}.signal.{field}.b"),
                            p.b.shape().to_vec(),
                            ParamRole::Weight,
                            signal_group,
                            Init::Donor,
                            Some(p.b),
                            rng,
                        )?;
                        Ok(Some(SignalPairIds { a, b }))
                    }
                }
            };
            let set_ids = SignalSetIds {
                q: pair(v, rng, "q", set.q)?,
                k: pair(v, rng, "k", set.k)?,
                v: pair(v, rng, "v", set.v)?,
                f: pair(v, rng, "f", set.f)?,
            };
            signals.push(set_ids);
        }
    }

    let final_norm = if cfg.norm_placement == NormPlacement::Pre {
        Some(visit_norm(v, &format!("{stack}.final_norm"), h, norm_group, rng)?)
    } else {
        None
    };

    let levels = (0..n)
        .map(|i| LevelWiring {
            attn: if shared_block { 0 } else { i },
            cross: is_decoder.then_some(if shared_block { 0 } else { i }),
            ffn: if cfg.arch == Arch::Owf {
                FfnRef::Shared
            } else {
                FfnRef::Local(if shared_block { 0 } else { i })
            },
            norms: if shared_norms { 0 } else { i },
            signals: cfg.has_signal_pairs().then_some(i),
        })
        .collect();

    Ok(Stack {
        attns,
        crosses,
        ffns,
        norms,
        signals,
        final_norm,
        levels,
    })
}

/// Construct a model with freshly initialized parameters.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model<S>> {
    let mut store = ParamStore::new();
    let wired = {
        let mut alloc = Alloc::<S> { store: &mut store };
        wire(cfg, &mut alloc, rng)?
    };
    Ok(Model {
        cfg: cfg.clone(),
        store,
        embed: wired.embed,
        encoder: wired.encoder,
        decoder: wired.decoder,
        shared_ffn: wired.shared_ffn,
        head: wired.head,
    })
}

/// Every parameter the configuration implies, in construction order, with
/// shapes but no data. This is the enumeration parameter counting runs on.
pub fn enumerate_params(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    let mut d = Describe::default();
    // Signal shapes do not depend on the draw, but the walk wants an rng
    // for donor construction; a fixed seed keeps this pure.
    let mut rng = Rng::new(0);
    wire(cfg, &mut d, &mut rng)?;
    Ok(d.specs)
}
