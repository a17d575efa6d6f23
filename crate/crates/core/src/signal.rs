//! Depth-specific, input-dependent low-rank level signals.
//!
//! A recurrent stack reuses one Transformer block at every level; to let the
//! block behave differently per depth, each level i carries signal functions
//! `g_i(x) = M_i x` with `M_i = A_i B_i^T` factored at rank `r << H`. The
//! factored form is applied as two thin products, `(x B_i) A_i^T`, and `M_i`
//! is never materialized. Initialization follows the low-rank-adapter
//! recipe: `A` Gaussian, `B` zero, so every signal starts as the exact zero
//! function and a fresh model collapses to the plain shared-block
//! recurrence.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Where (and whether) level signals enter the block. `Full` is the default
/// placement: after the Q/K/V projections and before the FFN up-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalVariant {
    Full,
    /// Input-independent sinusoidal (position, level) encodings instead of
    /// learned signals.
    StaticSinusoidal,
    /// Drop the three attention signals, keep the FFN signal.
    NoAttnSignal,
    /// Drop the FFN signal, keep the attention signals.
    NoFfnSignal,
    /// Add the attention signals to the input before the Q/K/V projections.
    BeforeAttn,
    /// Add the FFN signal after the up-projection (`g` maps H -> FF).
    InterFfn,
}

impl SignalVariant {
    pub fn name(self) -> &'static str {
        match self {
            SignalVariant::Full => "full",
            SignalVariant::StaticSinusoidal => "static_sinusoidal",
            SignalVariant::NoAttnSignal => "no_attn_signal",
            SignalVariant::NoFfnSignal => "no_ffn_signal",
            SignalVariant::BeforeAttn => "before_attn",
            SignalVariant::InterFfn => "inter_ffn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => SignalVariant::Full,
            "static_sinusoidal" | "static" => SignalVariant::StaticSinusoidal,
            "no_attn_signal" | "no_attn" => SignalVariant::NoAttnSignal,
            "no_ffn_signal" | "no_ffn" => SignalVariant::NoFfnSignal,
            "before_attn" => SignalVariant::BeforeAttn,
            "inter_ffn" => SignalVariant::InterFfn,
            other => return Err(Error::Config(format!("unknown signal variant '{other}'"))),
        })
    }

    pub fn has_attn_pairs(self) -> bool {
        matches!(
            self,
            SignalVariant::Full
                | SignalVariant::NoFfnSignal
                | SignalVariant::BeforeAttn
                | SignalVariant::InterFfn
        )
    }

    pub fn has_ffn_pair(self) -> bool {
        matches!(
            self,
            SignalVariant::Full
                | SignalVariant::NoAttnSignal
                | SignalVariant::BeforeAttn
                | SignalVariant::InterFfn
        )
    }
}

/// How the signal rank is chosen from the hidden dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// `r = floor(H / divisor)`; the default divisor is 16.
    Ratio { divisor: u32 },
    Explicit { rank: usize },
    /// `r = H`.
    Full,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Ratio { divisor: 16 }
    }
}

impl RankPolicy {
    /// Resolve the rank for hidden dimension `h`. Rounds down on ratios and
    /// rejects configurations that would produce a rank below 1.
    pub fn resolve(&self, h: usize) -> Result<usize> {
        let r = match *self {
            RankPolicy::Ratio { divisor } => {
                if divisor == 0 {
                    return Err(Error::Config("rank divisor must be positive".into()));
                }
                h / divisor as usize
            }
            RankPolicy::Explicit { rank } => rank,
            RankPolicy::Full => h,
        };
        if r < 1 {
            return Err(Error::Config(format!(
                "rank policy {self:?} yields rank {r} for hidden dimension {h}; need r >= 1"
            )));
        }
        if r > h {
            return Err(Error::Config(format!(
                "rank {r} exceeds hidden dimension {h}"
            )));
        }
        Ok(r)
    }
}

/// One factored signal matrix `M = A B^T`, applied as `(x B) A^T`.
/// `a: [d_out, r]`, `b: [d_in, r]`; for every placement except the
/// inter-FFN one, `d_in = d_out = H`.
#[derive(Debug, Clone)]
pub struct LowRankFactorPair<S: Scalar> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LowRankFactorPair<S> {
    /// Fresh pair: `A ~ N(0, 1/r)` entries (std `1/sqrt(r)`), `B = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (rank as f64).sqrt();
        LowRankFactorPair {
            a: Tensor::randn(&[d_out, rank], std, rng),
            b: Tensor::zeros(&[d_in, rank]),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        (self.a.numel() + self.b.numel()) as u64
    }
}

/// Per-level layer-norm parameters (gamma, beta).
#[derive(Debug, Clone)]
pub struct NormPair<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> NormPair<S> {
    pub fn init(d: usize) -> Self {
        NormPair {
            gamma: Tensor::full(&[d], S::ONE),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// Everything one level owns: the signal factor pairs its variant calls for
/// plus that level's layer norms.
#[derive(Debug, Clone)]
pub struct LevelSignalSet<S: Scalar> {
    pub q: Option<LowRankFactorPair<S>>,
    pub k: Option<LowRankFactorPair<S>>,
    pub v: Option<LowRankFactorPair<S>>,
    pub f: Option<LowRankFactorPair<S>>,
    pub ln_attn: NormPair<S>,
    pub ln_ffn: NormPair<S>,
    pub ln_cross: Option<NormPair<S>>,
}

impl<S: Scalar> LevelSignalSet<S> {
    pub fn pair_elements(&self) -> u64 {
        [&self.q, &self.k, &self.v, &self.f]
            .iter()
            .filter_map(|p| p.as_ref())
            .map(|p| p.param_count())
            .sum()
    }

    pub fn norm_elements(&self) -> u64 {
        let one = (self.ln_attn.gamma.numel() + self.ln_attn.beta.numel()) as u64;
        let two = (self.ln_ffn.gamma.numel() + self.ln_ffn.beta.numel()) as u64;
        let three = self
            .ln_cross
            .as_ref()
            .map(|n| (n.gamma.numel() + n.beta.numel()) as u64)
            .unwrap_or(0);
        one + two + three
    }
}

/// Build one [`LevelSignalSet`] per level.
///
/// `ff` is only consulted by the inter-FFN variant, whose signal maps the
/// input into the FFN's intermediate space. `with_cross_ln` adds the third
/// per-level norm used at a decoder's cross-attention site.
pub fn make_level_signals<S: Scalar>(
    h: usize,
    ff: usize,
    levels: usize,
    policy: RankPolicy,
    variant: SignalVariant,
    with_cross_ln: bool,
    rng: &mut Rng,
) -> Result<Vec<LevelSignalSet<S>>> {
    if h < 1 || levels < 1 {
        return Err(Error::Config(format!(
            "need h >= 1 and levels >= 1, got h={h}, levels={levels}"
        )));
    }
    let rank = if variant == SignalVariant::StaticSinusoidal {
        0 // unused; static signals carry no factors
    } else {
        policy.resolve(h)?
    };
    let mut sets = Vec::with_capacity(levels);
    for _ in 0..levels {
        let attn_pair = |rng: &mut Rng| LowRankFactorPair::init(h, h, rank, rng);
        let (q, k, v) = if variant.has_attn_pairs() {
            (Some(attn_pair(rng)), Some(attn_pair(rng)), Some(attn_pair(rng)))
        } else {
            (None, None, None)
        };
        let f = if variant.has_ffn_pair() {
            let d_out = if variant == SignalVariant::InterFfn { ff } else { h };
            Some(LowRankFactorPair::init(h, d_out, rank, rng))
        } else {
            None
        };
        sets.push(LevelSignalSet {
            q,
            k,
            v,
            f,
            ln_attn: NormPair::init(h),
            ln_ffn: NormPair::init(h),
            ln_cross: with_cross_ln.then(|| NormPair::init(h)),
        });
    }
    Ok(sets)
}

/// Apply the factored signal: `(x B) A^T`, two rank-r products, equal to
/// `x (A B^T)^T` without forming the full matrix.
pub fn apply_signal<S: Scalar>(pair: &LowRankFactorPair<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let d_in = pair.d_in();
    if x.shape().last() != Some(&d_in) {
        return Err(Error::ShapeMismatch {
            op: "apply_signal",
            lhs: x.shape().to_vec(),
            rhs: pair.b.shape().to_vec(),
        });
    }
    x.matmul(&pair.b)?.matmul_nt(&pair.a)
}

/// Which stacks a model has, for counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackMode {
    EncoderOnly,
    EncoderDecoder,
}

/// Closed-form element count of the level-signal machinery.
///
/// Per level and stack the full variant holds 4 factor pairs of `2 H r`
/// elements (q, k, v, f); the decoder's cross-attention carries no signals.
/// The inter-FFN variant's f pair holds `(H + FF) r` instead. With
/// `include_norms`, per-level layer norms add `2 H` per site — two sites per
/// encoder level, three per decoder level.
pub fn signal_param_count(
    h: usize,
    ff: usize,
    policy: RankPolicy,
    variant: SignalVariant,
    levels: usize,
    mode: StackMode,
    include_norms: bool,
) -> Result<u64> {
    let (h64, ff64, levels64) = (h as u64, ff as u64, levels as u64);
    let pairs_per_level: u64 = if variant == SignalVariant::StaticSinusoidal {
        0
    } else {
        let r = policy.resolve(h)? as u64;
        let attn = if variant.has_attn_pairs() { 3 * 2 * h64 * r } else { 0 };
        let ffn = if variant.has_ffn_pair() {
            if variant == SignalVariant::InterFfn {
                (h64 + ff64) * r
            } else {
                2 * h64 * r
            }
        } else {
            0
        };
        attn + ffn
    };
    let enc_norms = if include_norms { 2 * (2 * h64) } else { 0 };
    let dec_norms = if include_norms { 3 * (2 * h64) } else { 0 };
    let enc = levels64 * (pairs_per_level + enc_norms);
    Ok(match mode {
        StackMode::EncoderOnly => enc,
        StackMode::EncoderDecoder => enc + levels64 * (pairs_per_level + dec_norms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_policy_reference_points() {
        assert_eq!(RankPolicy::Ratio { divisor: 16 }.resolve(512).unwrap(), 32);
        assert_eq!(RankPolicy::Ratio { divisor: 16 }.resolve(728).unwrap(), 45);
        assert_eq!(RankPolicy::Full.resolve(128).unwrap(), 128);
        assert_eq!(RankPolicy::Explicit { rank: 3 }.resolve(64).unwrap(), 3);
        assert!(RankPolicy::Ratio { divisor: 16 }.resolve(8).is_err());
        assert!(RankPolicy::Explicit { rank: 9 }.resolve(8).is_err());
    }

    #[test]
    fn fresh_pairs_apply_to_zero() {
        let mut rng = Rng::new(41);
        for variant in [
            SignalVariant::Full,
            SignalVariant::NoAttnSignal,
            SignalVariant::NoFfnSignal,
            SignalVariant::BeforeAttn,
            SignalVariant::InterFfn,
        ] {
            let sets = make_level_signals::<f64>(
                16,
                32,
                3,
                RankPolicy::Ratio { divisor: 4 },
                variant,
                false,
                &mut rng,
            )
            .unwrap();
            let x = Tensor::<f64>::randn(&[5, 16], 1.0, &mut rng);
            for set in &sets {
                for pair in [&set.q, &set.k, &set.v, &set.f].into_iter().flatten() {
                    let y = apply_signal(pair, &x).unwrap();
                    assert!(y.data().iter().all(|&v| v == 0.0), "{variant:?}");
                }
            }
        }
    }

    #[test]
    fn factored_application_matches_materialized_matrix() {
        let mut rng = Rng::new(43);
        for seed in 0..100u64 {
            let mut rng_case = rng.fork(seed);
            let h = 2 + (seed as usize % 7);
            let r = 1 + (seed as usize % h);
            let mut pair = LowRankFactorPair::<f64>::init(h, h, r, &mut rng_case);
            pair.b = Tensor::randn(&[h, r], 1.0, &mut rng_case);
            let x = Tensor::<f64>::randn(&[4, h], 1.0, &mut rng_case);
            let fast = apply_signal(&pair, &x).unwrap();
            // materialized M = A B^T, then y = x M^T
            let m = pair.a.matmul_nt(&pair.b).unwrap();
            let slow = x.matmul_nt(&m).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let _ = rng.next_u64();
    }

    #[test]
    fn rank_one_outer_product_by_hand() {
        // H=4, r=1, A = e1, B = e2: M = e1 e2^T, so g(x) = x_2 * e1 per row.
        let a = Tensor::from_vec(vec![4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![4, 1], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let pair = LowRankFactorPair { a, b };
        let x = Tensor::from_vec(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = apply_signal(&pair, &x).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 0.0, 6.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn signal_scales_linearly_in_input() {
        let mut rng = Rng::new(47);
        let mut pair = LowRankFactorPair::<f64>::init(8, 8, 2, &mut rng);
        pair.b = Tensor::randn(&[8, 2], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let gx = apply_signal(&pair, &x).unwrap();
        let g2x = apply_signal(&pair, &x.scale(2.0)).unwrap();
        for (a, b) in g2x.data().iter().zip(gx.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_counts_match_constructed_sets() {
        let mut rng = Rng::new(53);
        let cases = [
            (64usize, 128usize, 3usize, RankPolicy::Ratio { divisor: 16 }, SignalVariant::Full),
            (64, 128, 2, RankPolicy::Ratio { divisor: 8 }, SignalVariant::NoAttnSignal),
            (32, 96, 4, RankPolicy::Explicit { rank: 5 }, SignalVariant::NoFfnSignal),
            (32, 96, 1, RankPolicy::Full, SignalVariant::BeforeAttn),
            (48, 80, 2, RankPolicy::Ratio { divisor: 16 }, SignalVariant::InterFfn),
            (48, 80, 2, RankPolicy::Ratio { divisor: 16 }, SignalVariant::StaticSinusoidal),
        ];
        for (h, ff, levels, policy, variant) in cases {
            for (mode, with_cross) in [(StackMode::EncoderOnly, false), (StackMode::EncoderDecoder, true)] {
                let enc =
                    make_level_signals::<f64>(h, ff, levels, policy, variant, false, &mut rng)
                        .unwrap();
                let mut measured: u64 = enc.iter().map(|s| s.pair_elements() + s.norm_elements()).sum();
                if mode == StackMode::EncoderDecoder {
                    let dec = make_level_signals::<f64>(
                        h, ff, levels, policy, variant, with_cross, &mut rng,
                    )
                    .unwrap();
                    measured += dec
                        .iter()
                        .map(|s| s.pair_elements() + s.norm_elements())
                        .sum::<u64>();
                }
                let closed =
                    signal_param_count(h, ff, policy, variant, levels, mode, true).unwrap();
                assert_eq!(closed, measured, "{variant:?} {mode:?}");
            }
        }
    }

    #[test]
    fn table_sized_counts() {
        // base translation setting: signals only, both stacks
        let count = signal_param_count(
            512,
            2048,
            RankPolicy::Ratio { divisor: 16 },
            SignalVariant::Full,
            6,
            StackMode::EncoderDecoder,
            false,
        )
        .unwrap();
        assert_eq!(count, 1_572_864); // 2 stacks x 6 levels x 4 pairs x 2*512*32

        // dropping attention signals removes exactly 3/4 of the pair elements
        let no_attn = signal_param_count(
            512,
            2048,
            RankPolicy::Ratio { divisor: 16 },
            SignalVariant::NoAttnSignal,
            6,
            StackMode::EncoderDecoder,
            false,
        )
        .unwrap();
        assert_eq!(no_attn, count / 4);

        // full-rank pair at H=128: 2*128*128 elements per pair
        let full = signal_param_count(
            128,
            512,
            RankPolicy::Full,
            SignalVariant::Full,
            1,
            StackMode::EncoderOnly,
            false,
        )
        .unwrap();
        assert_eq!(full, 4 * 2 * 128 * 128);
        assert_eq!(full / 4, 32_768);
    }
}
