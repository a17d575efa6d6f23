//! Synthetic desk-scale tasks and dataset containers.
//!
//! Sequence tasks (copy, reverse, sort) exercise the encoder-decoder path;
//! procedurally rendered single-shape grayscale images exercise the
//! encoder-only path. Every dataset is fully determined by its spec and
//! seed. External data arrives either as JSON-lines of token-id pairs or as
//! a binary tensor container with the same framing as checkpoints.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SeqCopy,
    SeqReverse,
    SeqSort,
    ShapesClassify,
    External,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SeqCopy => "seq_copy",
            TaskKind::SeqReverse => "seq_reverse",
            TaskKind::SeqSort => "seq_sort",
            TaskKind::ShapesClassify => "shapes_classify",
            TaskKind::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "seq_copy" => TaskKind::SeqCopy,
            "seq_reverse" => TaskKind::SeqReverse,
            "seq_sort" => TaskKind::SeqSort,
            "shapes_classify" => TaskKind::ShapesClassify,
            "external" => TaskKind::External,
            other => return Err(Error::Config(format!("unknown task kind '{other}'"))),
        })
    }

    pub fn is_seq(self) -> bool {
        matches!(
            self,
            TaskKind::SeqCopy | TaskKind::SeqReverse | TaskKind::SeqSort
        )
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Data-token alphabet size for sequence tasks (specials live above it).
    pub vocab: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Source file for `external` datasets.
    pub path: Option<PathBuf>,
}

impl TaskSpec {
    pub fn seq(kind: TaskKind, vocab: usize, seq_len: usize, n_train: usize, n_eval: usize, seed: u64) -> Self {
        TaskSpec {
            kind,
            vocab,
            classes: 0,
            seq_len,
            image_size: 0,
            n_train,
            n_eval,
            seed,
            path: None,
        }
    }

    pub fn shapes(classes: usize, image_size: usize, n_train: usize, n_eval: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::ShapesClassify,
            vocab: 0,
            classes,
            seq_len: 0,
            image_size,
            n_train,
            n_eval,
            seed,
            path: None,
        }
    }

    /// Begin-of-sequence id, directly above the data alphabet.
    pub fn bos(&self) -> usize {
        self.vocab
    }

    /// End-of-sequence id.
    pub fn eos(&self) -> usize {
        self.vocab + 1
    }

    /// Embedding rows a model for this task needs (alphabet + BOS + EOS).
    pub fn model_vocab(&self) -> usize {
        self.vocab + 2
    }
}

/// Paired source/target token sequences, already split.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqDataset {
    pub train: Vec<(Vec<usize>, Vec<usize>)>,
    pub eval: Vec<(Vec<usize>, Vec<usize>)>,
    pub vocab: usize,
}

/// One grayscale image with its class label; pixels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub image_size: usize,
    pub classes: usize,
    pub train: Vec<ImageSample>,
    pub eval: Vec<ImageSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Seq(SeqDataset),
    Image(ImageDataset),
}

/// The shapes the classification task can render.
const SHAPES: [&str; 6] = ["circle", "square", "triangle", "cross", "diamond", "ring"];

/// Generate the dataset a spec describes. Identical specs produce
/// bit-identical datasets.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    match spec.kind {
        TaskKind::SeqCopy | TaskKind::SeqReverse | TaskKind::SeqSort => {
            if spec.vocab < 1 || spec.seq_len < 1 {
                return Err(Error::Config(
                    "sequence tasks need vocab >= 1 and seq_len >= 1".into(),
                ));
            }
            let base = Rng::new(spec.seed);
            let total = spec.n_train + spec.n_eval;
            let mut pairs = Vec::with_capacity(total);
            for i in 0..total {
                let mut rng = base.fork(i as u64);
                let src: Vec<usize> = (0..spec.seq_len).map(|_| rng.below(spec.vocab)).collect();
                let tgt = match spec.kind {
                    TaskKind::SeqCopy => src.clone(),
                    TaskKind::SeqReverse => src.iter().rev().copied().collect(),
                    TaskKind::SeqSort => {
                        let mut t = src.clone();
                        t.sort_unstable();
                        t
                    }
                    _ => unreachable!(),
                };
                pairs.push((src, tgt));
            }
            let eval = pairs.split_off(spec.n_train);
            Ok(Dataset::Seq(SeqDataset {
                train: pairs,
                eval,
                vocab: spec.vocab,
            }))
        }
        TaskKind::ShapesClassify => {
            if spec.classes == 0 || spec.classes > SHAPES.len() {
                return Err(Error::Config(format!(
                    "shapes task renders at most {} classes, got {}",
                    SHAPES.len(),
                    spec.classes
                )));
            }
            if spec.image_size < 8 {
                return Err(Error::Config(
                    "shapes task needs image_size >= 8".into(),
                ));
            }
            let base = Rng::new(spec.seed);
            let total = spec.n_train + spec.n_eval;
            let mut samples = Vec::with_capacity(total);
            for i in 0..total {
                let mut rng = base.fork(i as u64);
                let label = i % spec.classes;
                samples.push(ImageSample {
                    pixels: render_shape(label, spec.image_size, &mut rng),
                    label,
                });
            }
            let eval = samples.split_off(spec.n_train);
            Ok(Dataset::Image(ImageDataset {
                image_size: spec.image_size,
                classes: spec.classes,
                train: samples,
                eval,
            }))
        }
        TaskKind::External => {
            let path = spec.path.as_ref().ok_or_else(|| {
                Error::Config("external task needs a dataset path".into())
            })?;
            load_external(spec, path)
        }
    }
}

/// Render one binary shape with jittered center and size.
fn render_shape(label: usize, size: usize, rng: &mut Rng) -> Vec<f32> {
    let s = size as f64;
    let jitter = s / 8.0;
    let cx = s / 2.0 + (rng.next_f64() * 2.0 - 1.0) * jitter;
    let cy = s / 2.0 + (rng.next_f64() * 2.0 - 1.0) * jitter;
    let half = s / 4.0 + rng.next_f64() * (s / 3.0 - s / 4.0);
    let mut pixels = vec![0.0f32; size * size];
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let inside = match SHAPES[label] {
                "circle" => dx * dx + dy * dy <= half * half,
                "square" => dx.abs() <= half && dy.abs() <= half,
                "triangle" => {
                    // upward triangle: width grows from apex to base
                    let t = (dy + half) / (2.0 * half);
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * half
                }
                "cross" => {
                    (dx.abs() <= half / 3.0 && dy.abs() <= half)
                        || (dy.abs() <= half / 3.0 && dx.abs() <= half)
                }
                "diamond" => dx.abs() + dy.abs() <= half,
                "ring" => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= half * half && d2 >= (half / 2.0) * (half / 2.0)
                }
                _ => unreachable!(),
            };
            if inside {
                pixels[py * size + px] = 1.0;
            }
        }
    }
    pixels
}

/// Cut a batch of grayscale images `[B, size*size]` into flattened patches
/// `[B, n_patches, patch*patch]`, scanning patches row-major.
pub fn patchify<S: Scalar>(
    images: &[&[f32]],
    image_size: usize,
    patch_size: usize,
) -> Result<Tensor<S>> {
    if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "image size {image_size} is not divisible by patch size {patch_size}"
        )));
    }
    let g = image_size / patch_size;
    let n_patches = g * g;
    let pd = patch_size * patch_size;
    let b = images.len();
    let mut data = Vec::with_capacity(b * n_patches * pd);
    for img in images {
        if img.len() != image_size * image_size {
            return Err(Error::InvalidDimension {
                op: "patchify",
                detail: format!(
                    "image holds {} pixels, expected {}",
                    img.len(),
                    image_size * image_size
                ),
            });
        }
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        let y = gy * patch_size + py;
                        let x = gx * patch_size + px;
                        data.push(S::from_f64(img[y * image_size + x] as f64));
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, n_patches, pd], data)
}

// ---------------------------------------------------------------------------
// external containers
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct JsonlRow {
    src: Vec<usize>,
    tgt: Vec<usize>,
}

/// Write sequence pairs as JSON-lines (`{"src": [...], "tgt": [...]}`).
pub fn write_jsonl(path: &Path, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for (src, tgt) in pairs {
        let row = JsonlRow {
            src: src.clone(),
            tgt: tgt.clone(),
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::Config(format!("jsonl serialization failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!(
                "{}:{}: malformed dataset row: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        pairs.push((row.src, row.tgt));
    }
    Ok(pairs)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ImageContainerHeader {
    schema_version: u32,
    kind: String,
    image_size: usize,
    classes: usize,
    labels: Vec<usize>,
}

const IMAGE_CONTAINER_VERSION: u32 = 1;

/// Write images as a length-prefixed JSON header plus a raw little-endian
/// f32 payload (the same framing checkpoints use).
pub fn write_image_container(path: &Path, ds_size: usize, classes: usize, samples: &[ImageSample]) -> Result<()> {
    let header = ImageContainerHeader {
        schema_version: IMAGE_CONTAINER_VERSION,
        kind: "image_dataset".into(),
        image_size: ds_size,
        classes,
        labels: samples.iter().map(|s| s.label).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("container header serialization failed: {e}")))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for s in samples {
        for &p in &s.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_image_container(path: &Path) -> Result<(usize, usize, Vec<ImageSample>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 8 {
        return Err(crate::error::CheckpointError::Truncated {
            detail: format!("{} holds only {} bytes", path.display(), bytes.len()),
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(crate::error::CheckpointError::Truncated {
            detail: "container header runs past end of file".into(),
        }
        .into());
    }
    let header: ImageContainerHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Config(format!("malformed container header: {e}")))?;
    if header.schema_version != IMAGE_CONTAINER_VERSION {
        return Err(crate::error::CheckpointError::VersionMismatch {
            found: header.schema_version,
            expected: IMAGE_CONTAINER_VERSION,
        }
        .into());
    }
    let n = header.labels.len();
    let px = header.image_size * header.image_size;
    let payload = &bytes[8 + header_len..];
    if payload.len() != n * px * 4 {
        return Err(crate::error::CheckpointError::Truncated {
            detail: format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                n * px * 4
            ),
        }
        .into());
    }
    let mut samples = Vec::with_capacity(n);
    for (i, &label) in header.labels.iter().enumerate() {
        let base = i * px * 4;
        let pixels = payload[base..base + px * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(ImageSample { pixels, label });
    }
    Ok((header.image_size, header.classes, samples))
}

fn load_external(spec: &TaskSpec, path: &Path) -> Result<Dataset> {
    let is_jsonl = path
        .extension()
        .map(|e| e == "jsonl")
        .unwrap_or(false);
    if is_jsonl {
        let mut pairs = read_jsonl(path)?;
        let need = spec.n_train + spec.n_eval;
        if pairs.len() < need {
            return Err(Error::Config(format!(
                "external dataset holds {} rows, spec wants {need}",
                pairs.len()
            )));
        }
        pairs.truncate(need);
        let eval = pairs.split_off(spec.n_train);
        Ok(Dataset::Seq(SeqDataset {
            train: pairs,
            eval,
            vocab: spec.vocab,
        }))
    } else {
        let (image_size, classes, mut samples) = read_image_container(path)?;
        let need = spec.n_train + spec.n_eval;
        if samples.len() < need {
            return Err(Error::Config(format!(
                "external dataset holds {} images, spec wants {need}",
                samples.len()
            )));
        }
        samples.truncate(need);
        let eval = samples.split_off(spec.n_train);
        Ok(Dataset::Image(ImageDataset {
            image_size,
            classes,
            train: samples,
            eval,
        }))
    }
}
