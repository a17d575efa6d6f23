//! Dense row-major tensors over `f32`/`f64`.
//!
//! The numeric substrate of the crate: shape bookkeeping, broadcasting,
//! and the matmul kernels everything else reduces to. Operations are
//! single-threaded and accumulate left-to-right, so results are
//! bit-reproducible for a given input.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type tag, serialized into checkpoints and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating-point element of a [`Tensor`].
///
/// `f64` is the dtype used by the gradient-checking suites; `f32` is the
/// training default.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;

    /// Standard Gaussian CDF, used by the exact GELU.
    fn norm_cdf(self) -> Self {
        let x = self.to_f64();
        Self::from_f64(0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
    }

    /// Standard Gaussian PDF.
    fn norm_pdf(self) -> Self {
        let x = self.to_f64();
        Self::from_f64((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max(self, other: f32) -> f32 {
        f32::max(self, other)
    }
    fn min(self, other: f32) -> f32 {
        f32::min(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    fn min(self, other: f64) -> f64 {
        f64::min(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &dim) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dim;
    }
    strides
}

/// Broadcast two shapes under the usual right-aligned rules.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of shape `shape` as if it had the
/// (broadcast-compatible) shape `target`; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(shape);
    let pad = target.len() - shape.len();
    let mut out = vec![0; target.len()];
    for i in 0..target.len() {
        if i < pad {
            out[i] = 0;
        } else {
            let dim = shape[i - pad];
            out[i] = if dim == 1 { 0 } else { strides[i - pad] };
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidDimension {
                op: "tensor",
                detail: format!(
                    "shape {:?} implies {} elements, buffer holds {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::ONE;
        }
        t
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.next_gaussian() * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// I.i.d. uniform entries in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(lo + (hi - lo) * rng.next_f64()))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        S::DTYPE
    }

    /// Element by multi-index (tests and small-scale oracles).
    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = row_major_strides(&self.shape);
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::InvalidDimension {
                op: "reshape",
                detail: format!(
                    "cannot view {:?} ({} elements) as {:?} ({} elements)",
                    self.shape,
                    self.data.len(),
                    shape,
                    expected
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|x| x * factor)
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.to_f64()).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        }
    }

    /// Elementwise binary op with right-aligned broadcasting.
    pub fn binop(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shapes(op, &self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut index = vec![0usize; out_shape.len()];
        let mut off_a = 0usize;
        let mut off_b = 0usize;
        for _ in 0..n {
            data.push(f(self.data[off_a], other.data[off_b]));
            // odometer increment
            for axis in (0..out_shape.len()).rev() {
                index[axis] += 1;
                off_a += sa[axis];
                off_b += sb[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                index[axis] = 0;
                off_a -= sa[axis] * out_shape[axis];
                off_b -= sb[axis] * out_shape[axis];
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binop(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binop(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binop(other, "mul", |a, b| a * b)
    }

    /// Sum-reduce `self` back to `target` (inverse of broadcasting),
    /// accumulating in element order.
    pub fn reduce_to_shape(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        // Validate that target broadcasts to self.shape.
        let check = broadcast_shapes("reduce_to_shape", target, &self.shape)?;
        if check != self.shape {
            return Err(Error::ShapeMismatch {
                op: "reduce_to_shape",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let mut out = Tensor::zeros(target);
        let st = broadcast_strides(target, &self.shape);
        let mut index = vec![0usize; self.shape.len()];
        let mut off_t = 0usize;
        for &v in &self.data {
            out.data[off_t] += v;
            for axis in (0..self.shape.len()).rev() {
                index[axis] += 1;
                off_t += st[axis];
                if index[axis] < self.shape[axis] {
                    break;
                }
                index[axis] = 0;
                off_t -= st[axis] * self.shape[axis];
            }
        }
        Ok(out)
    }

    /// Permute axes; copies into a fresh row-major buffer.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.shape.len() {
            return Err(Error::InvalidDimension {
                op: "permute",
                detail: format!("permutation {:?} does not match rank {}", perm, self.rank()),
            });
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::InvalidDimension {
                    op: "permute",
                    detail: format!("invalid permutation {:?}", perm),
                });
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = row_major_strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let mut index = vec![0usize; out_shape.len()];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(self.data[off]);
            for axis in (0..out_shape.len()).rev() {
                index[axis] += 1;
                off += src_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                index[axis] = 0;
                off -= src_strides[axis] * out_shape[axis];
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::InvalidDimension {
                op: "transpose",
                detail: format!("needs rank >= 2, got {:?}", self.shape),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::InvalidDimension {
                op: "slice",
                detail: format!(
                    "slice [{start}, {start}+{len}) on axis {axis} of {:?}",
                    self.shape
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidDimension {
            op: "concat",
            detail: "no tensors given".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidDimension {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut total = 0;
        for p in parts {
            if p.rank() != rank
                || (0..rank).any(|i| i != axis && p.shape[i] != first.shape[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let dim = p.shape[axis];
                let base = o * dim * inner;
                data.extend_from_slice(&p.data[base..base + dim * inner]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Materialize a broadcast view of `self` with shape `target`.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        let out = broadcast_shapes("broadcast_to", &self.shape, target)?;
        if out != target {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let st = broadcast_strides(&self.shape, target);
        let n: usize = target.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut index = vec![0usize; target.len()];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(self.data[off]);
            for axis in (0..target.len()).rev() {
                index[axis] += 1;
                off += st[axis];
                if index[axis] < target[axis] {
                    break;
                }
                index[axis] = 0;
                off -= st[axis] * target[axis];
            }
        }
        Ok(Tensor {
            shape: target.to_vec(),
            data,
        })
    }

    /// Gather rows of a `[v, d]` table: `ids` of length `n` yield `[n, d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidDimension {
                op: "gather_rows",
                detail: format!("table must be 2-d, got {:?}", self.shape),
            });
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidDimension {
                    op: "gather_rows",
                    detail: format!("row {id} out of range for table with {v} rows"),
                });
            }
            data.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        Tensor::from_vec(vec![ids.len(), d], data)
    }

    /// Sum of all elements, left-to-right.
    pub fn sum(&self) -> S {
        let mut acc = S::ZERO;
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    /// Matrix product with right-aligned broadcasting over leading axes:
    /// `[..., m, k] x [..., k, n] -> [..., m, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_general(self, other, MatmulKind::NN)
    }

    /// `self [..., m, k]` times `other [..., n, k]` transposed: `[..., m, n]`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        matmul_general(self, other, MatmulKind::NT)
    }

    /// `self [..., k, m]` transposed times `other [..., k, n]`: `[..., m, n]`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        matmul_general(self, other, MatmulKind::TN)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum MatmulKind {
    NN,
    NT,
    TN,
}

/// 2-d kernel: C[m,n] += A[m,k] * B[k,n].
fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_j, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_j += a_ip * b_pj;
            }
        }
    }
}

/// 2-d kernel: C[m,n] += A[m,k] * B[n,k]^T.
fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_j) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&a_p, &b_p) in a_row.iter().zip(b_row) {
                acc += a_p * b_p;
            }
            *c_j += acc;
        }
    }
}

/// 2-d kernel: C[m,n] += A[k,m]^T * B[k,n].
fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_j, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_j += a_pi * b_pj;
            }
        }
    }
}

fn matmul_general<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    kind: MatmulKind,
) -> Result<Tensor<S>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::InvalidDimension {
            op: "matmul",
            detail: format!(
                "operands must have rank >= 2, got {:?} and {:?}",
                a.shape, b.shape
            ),
        });
    }
    let (ra, rb) = (a.rank(), b.rank());
    // Logical (m, k) of lhs and (k, n) of rhs after applying the transpose kind.
    let (m, ka) = match kind {
        MatmulKind::TN => (a.shape[ra - 1], a.shape[ra - 2]),
        _ => (a.shape[ra - 2], a.shape[ra - 1]),
    };
    let (kb, n) = match kind {
        MatmulKind::NT => (b.shape[rb - 1], b.shape[rb - 2]),
        _ => (b.shape[rb - 2], b.shape[rb - 1]),
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let lead_a = &a.shape[..ra - 2];
    let lead_b = &b.shape[..rb - 2];
    let lead = broadcast_shapes("matmul", lead_a, lead_b)?;
    let batches: usize = lead.iter().product();
    let sa = broadcast_strides(lead_a, &lead);
    let sb = broadcast_strides(lead_b, &lead);
    let a_mat = a.shape[ra - 2] * a.shape[ra - 1];
    let b_mat = b.shape[rb - 2] * b.shape[rb - 1];

    let mut out_shape = lead.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(&out_shape);

    let mut index = vec![0usize; lead.len()];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for t in 0..batches {
        let a2 = &a.data[off_a * a_mat..(off_a + 1) * a_mat];
        let b2 = &b.data[off_b * b_mat..(off_b + 1) * b_mat];
        let c2 = &mut out.data[t * m * n..(t + 1) * m * n];
        match kind {
            MatmulKind::NN => mm_nn(a2, b2, c2, m, ka, n),
            MatmulKind::NT => mm_nt(a2, b2, c2, m, ka, n),
            MatmulKind::TN => mm_tn(a2, b2, c2, m, ka, n),
        }
        for axis in (0..lead.len()).rev() {
            index[axis] += 1;
            off_a += sa[axis];
            off_b += sb[axis];
            if index[axis] < lead[axis] {
                break;
            }
            index[axis] = 0;
            off_a -= sa[axis] * lead[axis];
            off_b -= sb[axis] * lead[axis];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let x = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = Tensor::<f64>::eye(3);
        let y = i3.matmul(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_one_by_one() {
        let a = t64(&[1, 1], &[2.0]);
        let b = t64(&[1, 1], &[3.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        // 7x5 times 5x4 against an independently written triple loop.
        let mut rng = Rng::new(11);
        let a = Tensor::<f64>::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                let mut want = 0.0;
                for p in 0..5 {
                    want += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_broadcasts_leading_axes() {
        let mut rng = Rng::new(5);
        let a = Tensor::<f64>::randn(&[3, 2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for t in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let mut want = 0.0;
                    for p in 0..4 {
                        want += a.at(&[t, i, p]) * b.at(&[p, j]);
                    }
                    assert!((c.at(&[t, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_permutes() {
        let mut rng = Rng::new(9);
        let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let via_nt = a.matmul_nt(&b).unwrap();
        let via_perm = a.matmul(&b.transpose_last().unwrap()).unwrap();
        for (x, y) in via_nt.data().iter().zip(via_perm.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let c = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let d = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let via_tn = c.matmul_tn(&d).unwrap();
        let via_perm = c.transpose_last().unwrap().matmul(&d).unwrap();
        for (x, y) in via_tn.data().iter().zip(via_perm.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_add_and_reduce_round_trip() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let y = x.add(&bias).unwrap();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let want = x.at(&[b, i, j]) + bias.at(&[j]);
                    assert_eq!(y.at(&[b, i, j]), want);
                }
            }
        }
        // reduce_to_shape sums the broadcast axes back out
        let ones = Tensor::<f64>::full(&[2, 3, 4], 1.0);
        let red = ones.reduce_to_shape(&[4]).unwrap();
        assert_eq!(red.data(), &[6.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut rng = Rng::new(6);
        let x = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
        let head = x.slice_axis(1, 0, 2).unwrap();
        let tail = x.slice_axis(1, 2, 3).unwrap();
        let glued = Tensor::concat(&[&head, &tail], 1).unwrap();
        assert_eq!(glued, x);
    }

    #[test]
    fn gather_rows_selects_table_rows() {
        let table = t64(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let got = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(got.shape(), &[3, 2]);
        assert_eq!(got.data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        assert!(table.gather_rows(&[3]).is_err());
    }

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
