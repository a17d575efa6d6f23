//! Transformer sub-layer primitives as plain tensor functions.
//!
//! These are the forward-only reference forms; the autograd graph in
//! [`crate::autograd`] computes the same math node-by-node and is tested
//! against the functions here.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Boolean attention mask over `[n_q, n_k]`; `true` keeps a position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n_q: usize,
    n_k: usize,
    keep: Vec<bool>,
}

impl AttnMask {
    pub fn new(n_q: usize, n_k: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != n_q * n_k {
            return Err(Error::InvalidDimension {
                op: "attn_mask",
                detail: format!("{}x{} mask needs {} flags, got {}", n_q, n_k, n_q * n_k, keep.len()),
            });
        }
        Ok(AttnMask { n_q, n_k, keep })
    }

    /// Lower-triangular causal mask: position i may attend to j <= i.
    pub fn causal(n: usize) -> Self {
        let mut keep = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                keep[i * n + j] = true;
            }
        }
        AttnMask { n_q: n, n_k: n, keep }
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn keeps(&self, q: usize, k: usize) -> bool {
        self.keep[q * self.n_k + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.keep[q * self.n_k..(q + 1) * self.n_k]
    }
}

/// Numerically stable softmax along `axis` (max is subtracted before
/// exponentiation).
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(Error::InvalidDimension {
            op: "softmax",
            detail: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    let dim = x.shape()[axis];
    if dim == 0 {
        return Err(Error::InvalidDimension {
            op: "softmax",
            detail: "softmax along an empty axis is undefined".into(),
        });
    }
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut max = data[base];
            for t in 1..dim {
                let v = data[base + t * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::ZERO;
            for t in 0..dim {
                let e = (data[base + t * inner] - max).exp();
                data[base + t * inner] = e;
                sum += e;
            }
            for t in 0..dim {
                data[base + t * inner] = data[base + t * inner] / sum;
            }
        }
    }
    Ok(out)
}

/// Softmax over the last axis of `x` (`[..., n_q, n_k]`) with an optional
/// keep-mask. Masked positions get zero weight; a fully masked query row
/// yields an all-zero row rather than NaN.
pub fn masked_softmax<S: Scalar>(x: &Tensor<S>, mask: Option<&AttnMask>) -> Result<Tensor<S>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::InvalidDimension {
            op: "masked_softmax",
            detail: format!("needs rank >= 2, got {:?}", x.shape()),
        });
    }
    let n_k = x.shape()[r - 1];
    let n_q = x.shape()[r - 2];
    if n_k == 0 {
        return Err(Error::InvalidDimension {
            op: "masked_softmax",
            detail: "softmax along an empty axis is undefined".into(),
        });
    }
    if let Some(m) = mask {
        if m.n_q != n_q || m.n_k != n_k {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![m.n_q, m.n_k],
            });
        }
    }
    let rows: usize = x.numel() / n_k;
    let mut out = x.clone();
    let data = out.data_mut();
    for row in 0..rows {
        let q = row % n_q;
        let lane = &mut data[row * n_k..(row + 1) * n_k];
        let keep = mask.map(|m| m.row(q));
        let mut max: Option<S> = None;
        for (j, v) in lane.iter().enumerate() {
            if keep.is_none_or(|k| k[j]) {
                max = Some(match max {
                    Some(m) if m >= *v => m,
                    _ => *v,
                });
            }
        }
        match max {
            None => lane.iter_mut().for_each(|v| *v = S::ZERO),
            Some(max) => {
                let mut sum = S::ZERO;
                for (j, v) in lane.iter_mut().enumerate() {
                    if keep.is_none_or(|k| k[j]) {
                        *v = (*v - max).exp();
                        sum += *v;
                    } else {
                        *v = S::ZERO;
                    }
                }
                lane.iter_mut().for_each(|v| *v = *v / sum);
            }
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis with eps-stabilized variance,
/// then an affine transform by `gamma` and `beta`.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let r = x.rank();
    if r == 0 {
        return Err(Error::InvalidDimension {
            op: "layer_norm",
            detail: "input must have at least one axis".into(),
        });
    }
    let d = x.shape()[r - 1];
    if d == 0 {
        return Err(Error::InvalidDimension {
            op: "layer_norm",
            detail: "normalized axis has extent 0".into(),
        });
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut out = x.clone();
    let g = gamma.data();
    let b = beta.data();
    for slice in out.data_mut().chunks_exact_mut(d) {
        let mut mean = S::ZERO;
        for &v in slice.iter() {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = S::ZERO;
        for &v in slice.iter() {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let inv_std = S::ONE / (var + eps).sqrt();
        for (j, v) in slice.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * g[j] + b[j];
        }
    }
    Ok(out)
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF (not the tanh form).
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v * v.norm_cdf())
}

/// Derivative of the exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    x.norm_cdf() + x * x.norm_pdf()
}

/// Scaled dot-product attention over `q [..., n_q, d]`, `k [..., n_k, d]`,
/// `v [..., n_k, d]`. Logits are scaled by `1/sqrt(d)`; masked positions are
/// excluded before the softmax; fully masked query rows produce zero rows.
pub fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&AttnMask>,
) -> Result<Tensor<S>> {
    Ok(attention_with_probs(q, k, v, mask)?.0)
}

/// As [`attention`], also returning the post-softmax probability map.
pub fn attention_with_probs<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&AttnMask>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let d = *q.shape().last().ok_or(Error::InvalidDimension {
        op: "attention",
        detail: "query must have a feature axis".into(),
    })?;
    if d == 0 {
        return Err(Error::InvalidDimension {
            op: "attention",
            detail: "per-head dimension must be positive".into(),
        });
    }
    if k.shape().last() != Some(&d) || v.shape()[..v.rank() - 1] != k.shape()[..k.rank() - 1] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let logits = q.matmul_nt(k)?.scale(scale);
    let probs = masked_softmax(&logits, mask)?;
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Multi-head attention with shared projection weights.
///
/// Projects `x_q`/`x_kv` by `w_q`, `w_k`, `w_v` (row-vector convention,
/// `y = x W`), splits into `heads` heads of width `H/heads`, applies
/// scaled dot-product attention per head, concatenates and projects by
/// `w_o`. Returns the per-head probability maps alongside the output when
/// `trace` is set.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<S: Scalar>(
    x_q: &Tensor<S>,
    x_kv: &Tensor<S>,
    w_q: &Tensor<S>,
    w_k: &Tensor<S>,
    w_v: &Tensor<S>,
    w_o: &Tensor<S>,
    heads: usize,
    mask: Option<&AttnMask>,
    trace: bool,
) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let h = *x_q.shape().last().ok_or(Error::InvalidDimension {
        op: "multi_head_attention",
        detail: "input must have a feature axis".into(),
    })?;
    if heads == 0 || h % heads != 0 {
        return Err(Error::Config(format!(
            "hidden dimension {h} is not divisible by {heads} heads"
        )));
    }
    let q = x_q.matmul(w_q)?;
    let k = x_kv.matmul(w_k)?;
    let v = x_kv.matmul(w_v)?;
    let qh = split_heads(&q, heads)?;
    let kh = split_heads(&k, heads)?;
    let vh = split_heads(&v, heads)?;
    let (ctx, probs) = attention_with_probs(&qh, &kh, &vh, mask)?;
    let merged = merge_heads(&ctx)?;
    let out = merged.matmul(w_o)?;
    Ok((out, trace.then_some(probs)))
}

/// `[..., n, H] -> [..., heads, n, H/heads]`
pub fn split_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    let r = x.rank();
    let h = x.shape()[r - 1];
    let n = x.shape()[r - 2];
    let mut shape = x.shape()[..r - 2].to_vec();
    shape.extend_from_slice(&[n, heads, h / heads]);
    let reshaped = x.reshape(&shape)?;
    let rr = reshaped.rank();
    let mut perm: Vec<usize> = (0..rr).collect();
    perm.swap(rr - 3, rr - 2);
    reshaped.permute(&perm)
}

/// `[..., heads, n, hd] -> [..., n, heads*hd]`
pub fn merge_heads<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let r = x.rank();
    let (heads, n, hd) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    let swapped = x.permute(&perm)?;
    let mut shape = x.shape()[..r - 3].to_vec();
    shape.extend_from_slice(&[n, heads * hd]);
    swapped.reshape(&shape)
}

/// Position-wise feedforward: `gelu(x W_up + b_up) W_down + b_down`.
pub fn feed_forward<S: Scalar>(
    x: &Tensor<S>,
    w_up: &Tensor<S>,
    b_up: &Tensor<S>,
    w_down: &Tensor<S>,
    b_down: &Tensor<S>,
) -> Result<Tensor<S>> {
    let hidden = gelu(&x.matmul(w_up)?.add(b_up)?);
    hidden.matmul(w_down)?.add(b_down)
}

/// Interleaved sinusoidal positional encoding with frequency base 10000:
/// `out[2j] = sin(pos / 10000^(2j/d))`, `out[2j+1] = cos(...)`.
pub fn sinusoidal_encoding<S: Scalar>(index: usize, d: usize) -> Result<Tensor<S>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs a positive even dimension, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(d);
    for j in 0..d / 2 {
        let freq = 10000f64.powf(-2.0 * j as f64 / d as f64);
        let angle = index as f64 * freq;
        data.push(S::from_f64(angle.sin()));
        data.push(S::from_f64(angle.cos()));
    }
    Tensor::from_vec(vec![d], data)
}

/// Mean negative log-softmax probability of `targets` over the non-ignored
/// rows of `logits [n, vocab]`.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    ignore_index: Option<usize>,
) -> Result<S> {
    if logits.rank() != 2 {
        return Err(Error::InvalidDimension {
            op: "cross_entropy",
            detail: format!("logits must be [n, vocab], got {:?}", logits.shape()),
        });
    }
    let (n, vocab) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut total = S::ZERO;
    let mut counted = 0usize;
    for (row, &target) in targets.iter().enumerate() {
        if Some(target) == ignore_index {
            continue;
        }
        if target >= vocab {
            return Err(Error::InvalidDimension {
                op: "cross_entropy",
                detail: format!("target {target} out of range for vocab {vocab}"),
            });
        }
        let lane = &logits.data()[row * vocab..(row + 1) * vocab];
        let mut max = lane[0];
        for &v in &lane[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::ZERO;
        for &v in lane {
            sum += (v - max).exp();
        }
        total += sum.ln() + max - lane[target];
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Degenerate {
            op: "cross_entropy",
            detail: "every position carries the ignore index; the mean is undefined".into(),
        });
    }
    Ok(total * S::from_f64(1.0 / counted as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_single_element() {
        let x = t64(&[3], &[0.0, 0.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let one = t64(&[1], &[42.0]);
        assert_eq!(softmax(&one, 0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        // [0, ln 2] -> [1/3, 2/3]
        let x = t64(&[2], &[0.0, 2.0f64.ln()]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_preserve_argmax() {
        let mut rng = Rng::new(21);
        for _ in 0..50 {
            let x = Tensor::<f64>::randn(&[4, 7], 30.0, &mut rng);
            let y = softmax(&x, 1).unwrap();
            for i in 0..4 {
                let row: Vec<f64> = (0..7).map(|j| y.at(&[i, j])).collect();
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                let argmax_in = (0..7)
                    .max_by(|&a, &b| x.at(&[i, a]).partial_cmp(&x.at(&[i, b])).unwrap())
                    .unwrap();
                let argmax_out = (0..7)
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap();
                assert_eq!(argmax_in, argmax_out);
            }
        }
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let x = Tensor::<f64>::zeros(&[2, 0]);
        assert!(softmax(&x, 1).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        // max subtraction keeps exp in range
        let x = t64(&[2], &[1e4, 1e4 - 1.0]);
        let y = softmax(&x, 0).unwrap();
        assert!(y.all_finite());
        assert!(y.data()[0] > y.data()[1]);
    }

    #[test]
    fn layer_norm_constant_slice_is_absorbed_by_eps() {
        let x = t64(&[2, 3], &[5.0; 6]);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::randn(&[4, 5], 2.0, &mut rng);
        let gamma = Tensor::zeros(&[5]);
        let beta = t64(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(y.at(&[i, j]), beta.at(&[j]));
            }
        }
    }

    #[test]
    fn layer_norm_two_point_slice_by_hand() {
        // x = [1, 3]: mean 2, population std 1; eps -> 0 gives [-1, 1]
        let x = t64(&[1, 2], &[1.0, 3.0]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &gamma, &beta, 1e-14).unwrap();
        assert!((y.data()[0] - -1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics_property() {
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::randn(&[6, 16], 3.0, &mut rng);
        let gamma = Tensor::full(&[16], 1.0);
        let beta = Tensor::zeros(&[16]);
        let y = layer_norm(&x, &gamma, &beta, 1e-9).unwrap();
        for i in 0..6 {
            let row: Vec<f64> = (0..16).map(|j| y.at(&[i, j])).collect();
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_empty_axis_errors() {
        let x = Tensor::<f64>::zeros(&[2, 0]);
        let gamma = Tensor::zeros(&[0]);
        let beta = Tensor::zeros(&[0]);
        assert!(layer_norm(&x, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        let x = t64(&[3], &[0.0, 10.0, 1.0]);
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-9);
        // Phi(1) = 0.841344746...
        assert!((y.data()[2] - 0.8413447460685429).abs() < 1e-9);
    }

    #[test]
    fn gelu_monotone_on_nonnegative_axis() {
        let mut prev = 0.0;
        for i in 0..100 {
            let x = i as f64 * 0.1;
            let y = x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            assert!(y >= prev);
            prev = y;
        }
    }

    #[test]
    fn attention_single_key_passes_value_through() {
        let q = t64(&[1, 3], &[0.3, -0.2, 0.9]);
        let k = t64(&[1, 3], &[1.0, 2.0, 3.0]);
        let v = t64(&[1, 3], &[7.0, 8.0, 9.0]);
        let out = attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = t64(&[1, 2], &[0.4, 0.6]);
        let k = t64(&[2, 2], &[1.0, -1.0, 1.0, -1.0]);
        let v = t64(&[2, 2], &[2.0, 0.0, 4.0, 6.0]);
        let out = attention(&q, &k, &v, None).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_two_key_hand_evaluation() {
        // q=[1,0], k rows e1,e2, d=2: logits [1/sqrt(2), 0]
        let q = t64(&[1, 2], &[1.0, 0.0]);
        let k = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (out, probs) = attention_with_probs(&q, &k, &v, None).unwrap();
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        let w1 = 1.0 / (e + 1.0);
        assert!((probs.data()[0] - w0).abs() < 1e-12);
        assert!((probs.data()[1] - w1).abs() < 1e-12);
        assert!((out.data()[0] - w0).abs() < 1e-12);
        assert!((out.data()[1] - w1).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_rows_yield_zero_vectors() {
        let q = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let k = q.clone();
        let v = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let mask = AttnMask::new(2, 2, vec![false, false, true, true]).unwrap();
        let out = attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(&out.data()[..2], &[0.0, 0.0]);
        assert!(out.data()[2] != 0.0);
    }

    #[test]
    fn attention_output_stays_in_value_hull() {
        let mut rng = Rng::new(13);
        for _ in 0..20 {
            let q = Tensor::<f64>::randn(&[5, 4], 2.0, &mut rng);
            let k = Tensor::<f64>::randn(&[6, 4], 2.0, &mut rng);
            let v = Tensor::<f64>::randn(&[6, 4], 2.0, &mut rng);
            let out = attention(&q, &k, &v, None).unwrap();
            for j in 0..4 {
                let col: Vec<f64> = (0..6).map(|i| v.at(&[i, j])).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..5 {
                    let o = out.at(&[i, j]);
                    assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn causal_mask_zeroes_upper_triangle() {
        let mut rng = Rng::new(17);
        let q = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let mask = AttnMask::causal(4);
        let (_, probs) = attention_with_probs(&q, &k, &v, Some(&mask)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if j > i {
                    assert_eq!(probs.at(&[i, j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn mha_single_head_with_identity_output_matches_attention() {
        let mut rng = Rng::new(23);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let w_q = Tensor::<f64>::randn(&[6, 6], 0.3, &mut rng);
        let w_k = Tensor::<f64>::randn(&[6, 6], 0.3, &mut rng);
        let w_v = Tensor::<f64>::randn(&[6, 6], 0.3, &mut rng);
        let w_o = Tensor::<f64>::eye(6);
        let (got, _) =
            multi_head_attention(&x, &x, &w_q, &w_k, &w_v, &w_o, 1, None, false).unwrap();
        let want = attention(
            &x.matmul(&w_q).unwrap(),
            &x.matmul(&w_k).unwrap(),
            &x.matmul(&w_v).unwrap(),
            None,
        )
        .unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_sequence_length_one_reduces_to_projections() {
        let mut rng = Rng::new(29);
        let x = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let w_q = Tensor::<f64>::randn(&[4, 4], 0.5, &mut rng);
        let w_k = Tensor::<f64>::randn(&[4, 4], 0.5, &mut rng);
        let w_v = Tensor::<f64>::randn(&[4, 4], 0.5, &mut rng);
        let w_o = Tensor::<f64>::randn(&[4, 4], 0.5, &mut rng);
        let (got, _) =
            multi_head_attention(&x, &x, &w_q, &w_k, &w_v, &w_o, 2, None, false).unwrap();
        let want = x.matmul(&w_v).unwrap().matmul(&w_o).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_matches_naive_per_head_loop() {
        let mut rng = Rng::new(31);
        let n = 4;
        let h = 6;
        let heads = 2;
        let hd = h / heads;
        let x = Tensor::<f64>::randn(&[n, h], 1.0, &mut rng);
        let w_q = Tensor::<f64>::randn(&[h, h], 0.4, &mut rng);
        let w_k = Tensor::<f64>::randn(&[h, h], 0.4, &mut rng);
        let w_v = Tensor::<f64>::randn(&[h, h], 0.4, &mut rng);
        let w_o = Tensor::<f64>::randn(&[h, h], 0.4, &mut rng);
        let (got, probs) =
            multi_head_attention(&x, &x, &w_q, &w_k, &w_v, &w_o, heads, None, true).unwrap();
        let probs = probs.unwrap();
        assert_eq!(probs.shape(), &[heads, n, n]);

        // independent per-head loop oracle
        let q = x.matmul(&w_q).unwrap();
        let k = x.matmul(&w_k).unwrap();
        let v = x.matmul(&w_v).unwrap();
        let mut concat = Tensor::<f64>::zeros(&[n, h]);
        for head in 0..heads {
            let cols = head * hd..(head + 1) * hd;
            let take = |src: &Tensor<f64>| {
                let mut out = Tensor::<f64>::zeros(&[n, hd]);
                for i in 0..n {
                    for (jj, j) in cols.clone().enumerate() {
                        out.data_mut()[i * hd + jj] = src.at(&[i, j]);
                    }
                }
                out
            };
            let (qh, kh, vh) = (take(&q), take(&k), take(&v));
            let oh = attention(&qh, &kh, &vh, None).unwrap();
            for i in 0..n {
                for (jj, j) in cols.clone().enumerate() {
                    concat.data_mut()[i * h + j] = oh.at(&[i, jj]);
                }
            }
        }
        let want = concat.matmul(&w_o).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let x = Tensor::<f64>::zeros(&[2, 6]);
        let w = Tensor::<f64>::zeros(&[6, 6]);
        assert!(matches!(
            multi_head_attention(&x, &x, &w, &w, &w, &w, 4, None, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn feed_forward_zero_weights_and_identity_regime() {
        let x = t64(&[2, 2], &[50.0, 60.0, 70.0, 80.0]);
        let zero_w = Tensor::<f64>::zeros(&[2, 2]);
        let zero_b = Tensor::<f64>::zeros(&[2]);
        let y = feed_forward(&x, &zero_w, &zero_b, &zero_w, &zero_b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // identity weights, large positive x: GELU is the identity there
        let eye = Tensor::<f64>::eye(2);
        let y = feed_forward(&x, &eye, &zero_b, &eye, &zero_b).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn feed_forward_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(37);
        let (h, ff) = (2, 3);
        let x = Tensor::<f64>::randn(&[4, h], 1.0, &mut rng);
        let w_up = Tensor::<f64>::randn(&[h, ff], 0.7, &mut rng);
        let b_up = Tensor::<f64>::randn(&[ff], 0.2, &mut rng);
        let w_down = Tensor::<f64>::randn(&[ff, h], 0.7, &mut rng);
        let b_down = Tensor::<f64>::randn(&[h], 0.2, &mut rng);
        let got = feed_forward(&x, &w_up, &b_up, &w_down, &b_down).unwrap();
        for i in 0..4 {
            let mut hidden = vec![0.0; ff];
            for (f, hval) in hidden.iter_mut().enumerate() {
                let mut acc = b_up.at(&[f]);
                for j in 0..h {
                    acc += x.at(&[i, j]) * w_up.at(&[j, f]);
                }
                *hval = acc * 0.5 * (1.0 + libm::erf(acc / std::f64::consts::SQRT_2));
            }
            for j in 0..h {
                let mut acc = b_down.at(&[j]);
                for (f, hval) in hidden.iter().enumerate() {
                    acc += hval * w_down.at(&[f, j]);
                }
                assert!((got.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinusoidal_encoding_reference_values() {
        let zero: Tensor<f64> = sinusoidal_encoding(0, 6).unwrap();
        for j in 0..3 {
            assert_eq!(zero.data()[2 * j], 0.0);
            assert_eq!(zero.data()[2 * j + 1], 1.0);
        }
        let one: Tensor<f64> = sinusoidal_encoding(1, 4).unwrap();
        let f = 10000f64.powf(-0.5);
        let want = [1f64.sin(), 1f64.cos(), f.sin(), f.cos()];
        for (a, b) in one.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        for index in [0usize, 1, 5, 1000, 65536] {
            let enc: Tensor<f64> = sinusoidal_encoding(index, 16).unwrap();
            assert!(enc.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(sinusoidal_encoding::<f64>(0, 3).is_err());
    }

    #[test]
    fn cross_entropy_reference_cases() {
        // near-one-hot logits at the target
        let hot = t64(&[1, 3], &[1e6, 0.0, 0.0]);
        let loss = cross_entropy(&hot, &[0], None).unwrap();
        assert!(loss.abs() < 1e-9);

        // uniform logits -> ln V
        let uniform = Tensor::<f64>::zeros(&[2, 5]);
        let loss = cross_entropy(&uniform, &[1, 4], None).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);

        // V=2, logits [0, ln 3], target 0: p = 1/4, loss = ln 4
        let two = t64(&[1, 2], &[0.0, 3f64.ln()]);
        let loss = cross_entropy(&two, &[0], None).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignore_index() {
        let logits = t64(&[2, 2], &[0.0, 1.0, 5.0, -2.0]);
        let with_ignored = cross_entropy(&logits, &[1, 9], Some(9)).unwrap();
        let only_first = cross_entropy(&logits.slice_axis(0, 0, 1).unwrap(), &[1], None).unwrap();
        assert_eq!(with_ignored, only_first);
        assert!(matches!(
            cross_entropy(&logits, &[9, 9], Some(9)),
            Err(Error::Degenerate { .. })
        ));
    }
}
