//! Representation-similarity and attention-distance diagnostics.
//!
//! Linear CKA compares hidden states captured at each level boundary of two
//! forward traces; mean attention distance summarizes how far each head
//! looks across the patch grid, in pixels. Both are pure functions over
//! [`ForwardTrace`] data, computed in f64.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::{Scalar, Tensor};

/// Similarity of two representation matrices `[n_samples, d]` under linear
/// centered kernel alignment:
/// `||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F)` after column centering.
/// Invariant to orthogonal transforms and nonzero isotropic scaling of
/// either argument; symmetric; in [0, 1].
pub fn linear_cka<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 {
        return Err(Error::InvalidDimension {
            op: "linear_cka",
            detail: format!(
                "inputs must be [samples, features], got {:?} and {:?}",
                x.shape(),
                y.shape()
            ),
        });
    }
    let n = x.shape()[0];
    if n != y.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidDimension {
            op: "linear_cka",
            detail: format!("needs at least 2 samples, got {n}"),
        });
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    // The score is symmetric; evaluate in a canonical argument order so
    // cka(x, y) and cka(y, x) agree bit for bit despite float summation.
    let (first, second) = if canonical_before(&xc, &yc) {
        (&xc, &yc)
    } else {
        (&yc, &xc)
    };
    let cross = second.matmul_tn(first)?;
    let ff = first.matmul_tn(first)?;
    let ss = second.matmul_tn(second)?;
    let cross_sq: f64 = cross.data().iter().map(|v| v * v).sum();
    let f_norm: f64 = ff.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let s_norm: f64 = ss.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if f_norm == 0.0 || s_norm == 0.0 {
        return Err(Error::Degenerate {
            op: "linear_cka",
            detail: "an input has zero variance after centering; similarity is undefined".into(),
        });
    }
    Ok(cross_sq / (f_norm * s_norm))
}

/// Deterministic total order on matrices: shape, then data bits.
fn canonical_before(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    match a.shape().cmp(b.shape()) {
        std::cmp::Ordering::Less => return true,
        std::cmp::Ordering::Greater => return false,
        std::cmp::Ordering::Equal => {}
    }
    for (x, y) in a.data().iter().zip(b.data()) {
        match x.to_bits().cmp(&y.to_bits()) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

fn center_columns<S: Scalar>(x: &Tensor<S>) -> Tensor<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = x.to_f64_tensor();
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += out.data()[i * d + j];
        }
        mean /= n as f64;
        for i in 0..n {
            out.data_mut()[i * d + j] -= mean;
        }
    }
    out
}

/// Level-by-level CKA grid between two traces captured on the identical
/// evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaGrid {
    /// `values[i][j]` compares row-model level i against col-model level j.
    pub values: Vec<Vec<f64>>,
    pub row_model: String,
    pub col_model: String,
}

/// Flatten `[B, n, H]` hidden states into `[B*n, H]` sample matrices and
/// compare every level pair.
pub fn cka_grid<S: Scalar>(
    trace_a: &ForwardTrace<S>,
    trace_b: &ForwardTrace<S>,
    row_model: impl Into<String>,
    col_model: impl Into<String>,
) -> Result<CkaGrid> {
    if trace_a.input_digest != trace_b.input_digest {
        return Err(Error::Config(
            "CKA grid needs traces captured on the identical evaluation batch".into(),
        ));
    }
    let flat = |t: &Tensor<S>| -> Result<Tensor<S>> {
        let (b, n, h) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        t.reshape(&[b * n, h])
    };
    let mut values = Vec::with_capacity(trace_a.hidden.len());
    for hi in &trace_a.hidden {
        let xi = flat(hi)?;
        let mut row = Vec::with_capacity(trace_b.hidden.len());
        for hj in &trace_b.hidden {
            let yj = flat(hj)?;
            row.push(linear_cka(&xi, &yj)?);
        }
        values.push(row);
    }
    Ok(CkaGrid {
        values,
        row_model: row_model.into(),
        col_model: col_model.into(),
    })
}

/// Patch-grid geometry for attention-distance analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patches_per_side: usize,
    pub patch_size: usize,
    /// Whether index 0 of the attention map is a class token, to be
    /// excluded (with row renormalization) before the computation.
    pub class_token: bool,
}

impl PatchGeometry {
    pub fn n_spatial(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    /// Largest possible distance on the grid, in pixels.
    pub fn diameter(&self) -> f64 {
        let span = (self.patches_per_side - 1) as f64;
        self.patch_size as f64 * (2.0 * span * span).sqrt()
    }

    pub fn distance(&self, q: usize, k: usize) -> f64 {
        let g = self.patches_per_side;
        let (qy, qx) = (q / g, q % g);
        let (ky, kx) = (k / g, k % g);
        let dy = qy.abs_diff(ky) as f64;
        let dx = qx.abs_diff(kx) as f64;
        self.patch_size as f64 * (dy * dy + dx * dx).sqrt()
    }
}

/// Attention-weighted mean Euclidean distance, in pixels, between a query
/// patch's center and the centers it attends to, averaged over queries.
///
/// `attn` is one head's `[n, n]` probability map. With a class token the
/// first row and column are dropped and rows renormalized.
pub fn mean_attention_distance(attn: &Tensor<f64>, geom: &PatchGeometry) -> Result<f64> {
    let expected = geom.n_spatial() + usize::from(geom.class_token);
    if attn.rank() != 2 || attn.shape()[0] != expected || attn.shape()[1] != expected {
        return Err(Error::ShapeMismatch {
            op: "mean_attention_distance",
            lhs: attn.shape().to_vec(),
            rhs: vec![expected, expected],
        });
    }
    let n = geom.n_spatial();
    let offset = usize::from(geom.class_token);
    let mut total = 0.0f64;
    for q in 0..n {
        let mut row_sum = 0.0f64;
        for k in 0..n {
            row_sum += attn.at(&[q + offset, k + offset]);
        }
        if row_sum <= 0.0 {
            return Err(Error::Degenerate {
                op: "mean_attention_distance",
                detail: format!("query row {q} has non-positive mass after class-token exclusion"),
            });
        }
        let mut acc = 0.0f64;
        for k in 0..n {
            let w = attn.at(&[q + offset, k + offset]) / row_sum;
            acc += w * geom.distance(q, k);
        }
        total += acc;
    }
    Ok(total / n as f64)
}

/// Mean attention distance per (level, head), averaged over the images of a
/// traced batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDistanceReport {
    /// `per_level[level][head]`, in pixels.
    pub per_level: Vec<Vec<f64>>,
    pub geometry: PatchGeometry,
    pub model: String,
}

/// Distill a vision trace's per-head attention maps into a MAD report.
/// Averages per image, then across images.
pub fn mad_report<S: Scalar>(
    trace: &ForwardTrace<S>,
    geom: &PatchGeometry,
    model: impl Into<String>,
) -> Result<AttentionDistanceReport> {
    let mut per_level = Vec::with_capacity(trace.attn.len());
    for maps in &trace.attn {
        // [B, heads, n, n]
        let (b, heads, n) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
        let mut head_means = Vec::with_capacity(heads);
        for head in 0..heads {
            let mut sum = 0.0f64;
            for img in 0..b {
                let mut map = Tensor::<f64>::zeros(&[n, n]);
                for q in 0..n {
                    for k in 0..n {
                        map.data_mut()[q * n + k] = maps.at(&[img, head, q, k]).to_f64();
                    }
                }
                sum += mean_attention_distance(&map, geom)?;
            }
            head_means.push(sum / b as f64);
        }
        per_level.push(head_means);
    }
    Ok(AttentionDistanceReport {
        per_level,
        geometry: *geom,
        model: model.into(),
    })
}

/// On-disk report formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "csv" => ReportFormat::Csv,
            "json" => ReportFormat::Json,
            other => return Err(Error::Config(format!("unknown report format '{other}'"))),
        })
    }
}

/// Either analysis output, ready for serialization.
#[derive(Debug, Clone)]
pub enum AnalysisData {
    Cka(CkaGrid),
    Mad(AttentionDistanceReport),
}

/// JSON report body; field order is fixed by declaration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JsonReport {
    pub schema_version: u32,
    pub kind: String,
    pub models: Vec<String>,
    pub levels: usize,
    pub values: Vec<Vec<f64>>,
}

/// Round to 9 significant digits, the report serialization precision.
fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("9-digit float reparse")
}

impl AnalysisData {
    fn kind(&self) -> &'static str {
        match self {
            AnalysisData::Cka(_) => "cka",
            AnalysisData::Mad(_) => "mad",
        }
    }

    fn models(&self) -> Vec<String> {
        match self {
            AnalysisData::Cka(g) => vec![g.row_model.clone(), g.col_model.clone()],
            AnalysisData::Mad(r) => vec![r.model.clone()],
        }
    }

    fn values(&self) -> &Vec<Vec<f64>> {
        match self {
            AnalysisData::Cka(g) => &g.values,
            AnalysisData::Mad(r) => &r.per_level,
        }
    }

    /// Number of levels this report covers (grids hold levels + 1 rows).
    fn levels(&self) -> usize {
        match self {
            AnalysisData::Cka(g) => g.values.len().saturating_sub(1),
            AnalysisData::Mad(r) => r.per_level.len(),
        }
    }

    fn to_json_report(&self) -> JsonReport {
        JsonReport {
            schema_version: 1,
            kind: self.kind().to_string(),
            models: self.models(),
            levels: self.levels(),
            values: self
                .values()
                .iter()
                .map(|row| row.iter().map(|&v| round_sig9(v)).collect())
                .collect(),
        }
    }

    fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            AnalysisData::Cka(g) => {
                out.push_str("row\\col");
                for j in 0..g.values[0].len() {
                    out.push_str(&format!(",{}_l{j}", g.col_model));
                }
                out.push('\n');
                for (i, row) in g.values.iter().enumerate() {
                    out.push_str(&format!("{}_l{i}", g.row_model));
                    for &v in row {
                        out.push_str(&format!(",{v:.8e}"));
                    }
                    out.push('\n');
                }
            }
            AnalysisData::Mad(r) => {
                out.push_str("level");
                for h in 0..r.per_level[0].len() {
                    out.push_str(&format!(",head_{h}"));
                }
                out.push('\n');
                for (i, row) in r.per_level.iter().enumerate() {
                    out.push_str(&format!("{i}"));
                    for &v in row {
                        out.push_str(&format!(",{v:.8e}"));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Write a report to `path`. Values carry 9 significant digits in both
/// formats; emitting, parsing and emitting again is byte-stable.
pub fn emit_report(data: &AnalysisData, format: ReportFormat, path: &Path) -> Result<()> {
    let values = data.values();
    if values.is_empty() || values.iter().any(|r| r.is_empty()) {
        return Err(Error::Degenerate {
            op: "emit_report",
            detail: "refusing to write an empty report".into(),
        });
    }
    let body = match format {
        ReportFormat::Csv => data.to_csv(),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&data.to_json_report())
                .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
            s.push('\n');
            s
        }
    };
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(body.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a JSON report back.
pub fn parse_json_report(path: &Path) -> Result<JsonReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("malformed report {}: {e}", path.display())))
}

/// Parse the value matrix out of a CSV report.
pub fn parse_csv_values(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let mut cells = line.split(',');
        cells.next(); // row label
        let row: std::result::Result<Vec<f64>, _> = cells.map(|c| c.parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Config(format!("malformed CSV report: {e}")))?);
    }
    if rows.is_empty() {
        return Err(Error::Degenerate {
            op: "parse_csv_values",
            detail: "report has no data rows".into(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
    #[allow(clippy::needless_range_loop)]
    fn random_orthogonal(d: usize, rng: &mut Rng) -> Tensor<f64> {
        loop {
            let m = Tensor::<f64>::randn(&[d, d], 1.0, rng);
            let mut cols: Vec<Vec<f64>> = (0..d)
                .map(|j| (0..d).map(|i| m.at(&[i, j])).collect())
                .collect();
            let mut ok = true;
            for j in 0..d {
                for prev in 0..j {
                    let dot: f64 = (0..d).map(|i| cols[j][i] * cols[prev][i]).sum();
                    let prev_col = cols[prev].clone();
                    for i in 0..d {
                        cols[j][i] -= dot * prev_col[i];
                    }
                }
                let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-8 {
                    ok = false;
                    break;
                }
                for v in cols[j].iter_mut() {
                    *v /= norm;
                }
            }
            if !ok {
                continue;
            }
            let mut q = Tensor::<f64>::zeros(&[d, d]);
            for j in 0..d {
                for i in 0..d {
                    q.data_mut()[i * d + j] = cols[j][i];
                }
            }
            return q;
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = Rng::new(61);
        for _ in 0..20 {
            let x = Tensor::<f64>::randn(&[12, 5], 1.0, &mut rng);
            let v = linear_cka(&x, &x).unwrap();
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invariance_under_orthogonal_transform_and_scaling() {
        let mut rng = Rng::new(62);
        for _ in 0..20 {
            let x = Tensor::<f64>::randn(&[10, 4], 1.0, &mut rng);
            let q = random_orthogonal(4, &mut rng);
            let xq = x.matmul(&q).unwrap();
            assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() < 1e-9);
            let scaled = x.scale(-3.7);
            assert!((linear_cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_sample_hand_cases() {
        let x = t64(&[2, 1], &[1.0, -1.0]);
        // centered y is zero: undefined
        let y_flat = t64(&[2, 1], &[1.0, 1.0]);
        assert!(matches!(
            linear_cka(&x, &y_flat),
            Err(Error::Degenerate { .. })
        ));
        // y = [2, 0] centers to [1, -1], proportional to x: similarity 1
        let y = t64(&[2, 1], &[2.0, 0.0]);
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn range_and_symmetry_over_random_inputs() {
        let mut rng = Rng::new(63);
        for _ in 0..100 {
            let n = 3 + rng.below(10);
            let dx = 1 + rng.below(6);
            let dy = 1 + rng.below(6);
            let x = Tensor::<f64>::randn(&[n, dx], 1.0, &mut rng);
            let y = Tensor::<f64>::randn(&[n, dy], 1.0, &mut rng);
            let v = linear_cka(&x, &y).unwrap();
            let w = linear_cka(&y, &x).unwrap();
            assert!((-1e-9..=1.0 + 1e-9).contains(&v));
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_diagonal_and_transpose_symmetry() {
        use crate::model::{build_model, Arch, ForwardCtx, ModelConfig, TokenBatch};
        let mut cfg = ModelConfig::translation(Arch::Universal, 16, 32, 2, 2, 11);
        cfg.max_seq_len = 8;
        let mut rng = Rng::new(64);
        let m1 = build_model::<f64>(&cfg, &mut rng).unwrap();
        let m2 = build_model::<f64>(&cfg, &mut rng).unwrap();
        let src = TokenBatch::new(&[vec![1, 2, 3, 4], vec![5, 6, 7, 8]]).unwrap();

        let trace_of = |m: &crate::model::Model<f64>| {
            let mut g = crate::autograd::Graph::new();
            let mut ctx = ForwardCtx::eval_traced();
            let (_, t) = m.encode_tokens(&mut g, &src, &mut ctx).unwrap();
            t.unwrap()
        };
        let t1 = trace_of(&m1);
        let t2 = trace_of(&m2);

        let self_grid = cka_grid(&t1, &t1, "a", "a").unwrap();
        for (i, row) in self_grid.values.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-9);
        }
        let ab = cka_grid(&t1, &t2, "a", "b").unwrap();
        let ba = cka_grid(&t2, &t1, "b", "a").unwrap();
        for i in 0..ab.values.len() {
            for j in 0..ab.values[i].len() {
                assert_eq!(ab.values[i][j], ba.values[j][i]);
            }
        }
        // distinct random models are less similar than a model to itself
        let self_mean: f64 = (0..self_grid.values.len())
            .map(|i| self_grid.values[i][i])
            .sum::<f64>()
            / self_grid.values.len() as f64;
        let cross_mean: f64 = (0..ab.values.len()).map(|i| ab.values[i][i]).sum::<f64>()
            / ab.values.len() as f64;
        assert!(cross_mean < self_mean);
    }

    #[test]
    fn grid_rejects_mismatched_batches() {
        use crate::model::{build_model, Arch, ForwardCtx, ModelConfig, TokenBatch};
        let mut cfg = ModelConfig::translation(Arch::Universal, 16, 32, 1, 2, 11);
        cfg.max_seq_len = 8;
        let mut rng = Rng::new(65);
        let m = build_model::<f64>(&cfg, &mut rng).unwrap();
        let trace_of = |rows: &[Vec<usize>]| {
            let src = TokenBatch::new(rows).unwrap();
            let mut g = crate::autograd::Graph::new();
            let mut ctx = ForwardCtx::eval_traced();
            let (_, t) = m.encode_tokens(&mut g, &src, &mut ctx).unwrap();
            t.unwrap()
        };
        let t1 = trace_of(&[vec![1, 2, 3]]);
        let t2 = trace_of(&[vec![1, 2, 4]]);
        assert!(cka_grid(&t1, &t2, "a", "b").is_err());
    }

    #[test]
    fn identity_attention_has_zero_distance() {
        let geom = PatchGeometry {
            patches_per_side: 3,
            patch_size: 8,
            class_token: false,
        };
        let eye = Tensor::<f64>::eye(9);
        assert_eq!(mean_attention_distance(&eye, &geom).unwrap(), 0.0);
    }

    #[test]
    fn uniform_two_by_two_reference_value() {
        for patch_size in [1usize, 8, 16] {
            let geom = PatchGeometry {
                patches_per_side: 2,
                patch_size,
                class_token: false,
            };
            let uniform = Tensor::<f64>::full(&[4, 4], 0.25);
            let got = mean_attention_distance(&uniform, &geom).unwrap();
            let want = patch_size as f64 * (2.0 + 2.0f64.sqrt()) / 4.0;
            assert!((got - want).abs() < 1e-12, "p={patch_size}");
        }
    }

    #[test]
    fn corner_attention_matches_brute_force() {
        let g = 4;
        let n = g * g;
        let geom = PatchGeometry {
            patches_per_side: g,
            patch_size: 8,
            class_token: false,
        };
        // every query attends fully to patch 0 (top-left corner)
        let mut attn = Tensor::<f64>::zeros(&[n, n]);
        for q in 0..n {
            attn.data_mut()[q * n] = 1.0;
        }
        let got = mean_attention_distance(&attn, &geom).unwrap();
        let mut want = 0.0;
        for q in 0..n {
            let (qy, qx) = (q / g, q % g);
            want += 8.0 * ((qy * qy + qx * qx) as f64).sqrt();
        }
        want /= n as f64;
        assert_eq!(got, want);
    }

    #[test]
    fn class_token_is_excluded_and_rows_renormalized() {
        let geom = PatchGeometry {
            patches_per_side: 2,
            patch_size: 4,
            class_token: true,
        };
        // 5x5 map: heavy class-token column, uniform elsewhere
        let mut attn = Tensor::<f64>::full(&[5, 5], 0.1);
        for q in 0..5 {
            attn.data_mut()[q * 5] = 0.6;
        }
        let got = mean_attention_distance(&attn, &geom).unwrap();
        // after exclusion every row is uniform over 4 spatial patches
        let want = 4.0 * (2.0 + 2.0f64.sqrt()) / 4.0;
        assert!((got - want).abs() < 1e-12);

        // zero spatial mass is diagnosed
        let mut bad = Tensor::<f64>::zeros(&[5, 5]);
        for q in 0..5 {
            bad.data_mut()[q * 5] = 1.0;
        }
        assert!(matches!(
            mean_attention_distance(&bad, &geom),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn permutation_invariance_and_diameter_bound() {
        let mut rng = Rng::new(66);
        for _ in 0..50 {
            let g = 2 + rng.below(4);
            let n = g * g;
            let geom = PatchGeometry {
                patches_per_side: g,
                patch_size: 1 + rng.below(16),
                class_token: false,
            };
            // random row-stochastic map
            let mut attn = Tensor::<f64>::zeros(&[n, n]);
            for q in 0..n {
                let mut row: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-9).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                attn.data_mut()[q * n..(q + 1) * n].copy_from_slice(&row);
            }
            let v = mean_attention_distance(&attn, &geom).unwrap();
            assert!(v >= 0.0 && v <= geom.diameter() + 1e-12);

            // query order does not matter: recompute in a shuffled order
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.below(i + 1);
                perm.swap(i, j);
            }
            let mut total = 0.0;
            for &q in &perm {
                let row = &attn.data()[q * n..(q + 1) * n];
                let mut acc = 0.0;
                for (k, &w) in row.iter().enumerate() {
                    acc += w * geom.distance(q, k);
                }
                total += acc;
            }
            let reordered = total / n as f64;
            assert!((v - reordered).abs() < 1e-9);
        }
    }

    #[test]
    fn mad_scales_linearly_in_patch_size() {
        let mut rng = Rng::new(67);
        let g = 3;
        let n = g * g;
        let mut attn = Tensor::<f64>::zeros(&[n, n]);
        for q in 0..n {
            let mut row: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-9).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            attn.data_mut()[q * n..(q + 1) * n].copy_from_slice(&row);
        }
        let at = |p: usize| {
            mean_attention_distance(
                &attn,
                &PatchGeometry {
                    patches_per_side: g,
                    patch_size: p,
                    class_token: false,
                },
            )
            .unwrap()
        };
        let unit = at(1);
        for p in [2usize, 5, 16] {
            assert!((at(p) - p as f64 * unit).abs() < 1e-9);
        }
    }

    #[test]
    fn report_round_trip_and_shape() {
        let grid = CkaGrid {
            values: vec![vec![1.0, 0.25], vec![0.25, 1.0]],
            row_model: "a".into(),
            col_model: "b".into(),
        };
        let dir = std::env::temp_dir().join("ringformer_report_test");
        std::fs::create_dir_all(&dir).unwrap();

        let csv_path = dir.join("grid.csv");
        emit_report(&AnalysisData::Cka(grid.clone()), ReportFormat::Csv, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 3); // header + 2 rows
        let parsed = parse_csv_values(&text).unwrap();
        assert_eq!(parsed, grid.values);

        let json_path = dir.join("grid.json");
        emit_report(&AnalysisData::Cka(grid.clone()), ReportFormat::Json, &json_path).unwrap();
        let report = parse_json_report(&json_path).unwrap();
        assert_eq!(report.schema_version, 1);
        assert_eq!(report.kind, "cka");
        assert_eq!(report.models, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(report.levels, 1);
        assert_eq!(report.values, grid.values);

        // emit(parse(emit(x))) is byte-stable
        let grid2 = CkaGrid {
            values: report.values.clone(),
            row_model: "a".into(),
            col_model: "b".into(),
        };
        let json_path2 = dir.join("grid2.json");
        emit_report(&AnalysisData::Cka(grid2), ReportFormat::Json, &json_path2).unwrap();
        assert_eq!(
            std::fs::read(&json_path).unwrap(),
            std::fs::read(&json_path2).unwrap()
        );
    }

    #[test]
    fn empty_report_is_rejected() {
        let grid = CkaGrid {
            values: vec![],
            row_model: "a".into(),
            col_model: "b".into(),
        };
        let path = std::env::temp_dir().join("ringformer_empty.csv");
        assert!(matches!(
            emit_report(&AnalysisData::Cka(grid), ReportFormat::Csv, &path),
            Err(Error::Degenerate { .. })
        ));
    }
}
