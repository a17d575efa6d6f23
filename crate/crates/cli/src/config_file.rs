//! The run configuration file: INI-style sections `[model]`, `[task]`,
//! `[train]`, `[analysis]` with `key = value` lines and `#` comments.
//!
//! Unknown sections or keys are rejected with the offending line number.
//! Parsing the rendered form of a parsed file reproduces it exactly, so
//! configs can be round-tripped as experiment records. Command-line flags
//! override file values before resolution.

use ringformer_core::model::{Arch, Mode, ModelConfig, NormPlacement, VisionConfig};
use ringformer_core::signal::{RankPolicy, SignalVariant};
use ringformer_core::task::{TaskKind, TaskSpec};
use ringformer_core::train::TrainConfig;

/// Parse/validation failure with a config-file location.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = Result<T, ConfigError>;

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ModelSection {
    pub arch: Option<Arch>,
    pub mode: Option<Mode>,
    pub hidden: Option<usize>,
    pub ff: Option<usize>,
    pub levels: Option<usize>,
    pub heads: Option<usize>,
    pub rank_policy: Option<RankPolicy>,
    pub signal_variant: Option<SignalVariant>,
    pub norm_placement: Option<NormPlacement>,
    pub vocab: Option<usize>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub channels: Option<usize>,
    pub classes: Option<usize>,
    pub dropout: Option<f64>,
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct TaskSection {
    pub kind: Option<TaskKind>,
    pub vocab: Option<usize>,
    pub classes: Option<usize>,
    pub seq_len: Option<usize>,
    pub image_size: Option<usize>,
    pub n_train: Option<usize>,
    pub n_eval: Option<usize>,
    pub seed: Option<u64>,
    pub path: Option<String>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct TrainSection {
    pub max_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub total_steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<u64>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct AnalysisSection {
    pub samples: Option<usize>,
    pub stack: Option<String>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub task: TaskSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> CResult<T> {
    value.parse::<T>().map_err(|_| {
        ConfigError(format!(
            "line {line}: key '{key}' has malformed value '{value}'"
        ))
    })
}

fn parse_rank_policy(line: usize, value: &str) -> CResult<RankPolicy> {
    if value == "full" {
        return Ok(RankPolicy::Full);
    }
    if let Some(div) = value.strip_prefix("ratio:") {
        return Ok(RankPolicy::Ratio {
            divisor: parse_num(line, "rank_policy", div)?,
        });
    }
    if let Some(rank) = value.strip_prefix("explicit:") {
        return Ok(RankPolicy::Explicit {
            rank: parse_num(line, "rank_policy", rank)?,
        });
    }
    Err(ConfigError(format!(
        "line {line}: rank_policy must be 'ratio:<divisor>', 'explicit:<rank>' or 'full', got '{value}'"
    )))
}

/// Parse a rank policy given on the command line (no line anchor).
pub fn parse_rank_policy_flag(value: &str) -> Result<RankPolicy, ConfigError> {
    parse_rank_policy(0, value).map_err(|e| ConfigError(e.0.replace("line 0: ", "--rank-policy: ")))
}

pub fn render_rank_policy(p: RankPolicy) -> String {
    match p {
        RankPolicy::Ratio { divisor } => format!("ratio:{divisor}"),
        RankPolicy::Explicit { rank } => format!("explicit:{rank}"),
        RankPolicy::Full => "full".into(),
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> CResult<Self> {
        let mut cfg = RunConfigFile::default();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    ConfigError(format!("line {line_no}: malformed section header '{raw}'"))
                })?;
                section = Some(match name {
                    "model" => "model",
                    "task" => "task",
                    "train" => "train",
                    "analysis" => "analysis",
                    other => {
                        return Err(ConfigError(format!(
                            "line {line_no}: unknown section '[{other}]'"
                        )))
                    }
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {line_no}: expected 'key = value', got '{raw}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let section = section.ok_or_else(|| {
                ConfigError(format!(
                    "line {line_no}: key '{key}' appears before any section header"
                ))
            })?;
            cfg.set(section, key, value, line_no)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> CResult<()> {
        let core = |e: ringformer_core::Error| ConfigError(format!("line {line}: {e}"));
        match (section, key) {
            ("model", "arch") => self.model.arch = Some(Arch::parse(value).map_err(core)?),
            ("model", "mode") => self.model.mode = Some(Mode::parse(value).map_err(core)?),
            ("model", "hidden") => self.model.hidden = Some(parse_num(line, key, value)?),
            ("model", "ff") => self.model.ff = Some(parse_num(line, key, value)?),
            ("model", "levels") => self.model.levels = Some(parse_num(line, key, value)?),
            ("model", "heads") => self.model.heads = Some(parse_num(line, key, value)?),
            ("model", "rank_policy") => self.model.rank_policy = Some(parse_rank_policy(line, value)?),
            ("model", "signal_variant") => {
                self.model.signal_variant = Some(SignalVariant::parse(value).map_err(core)?)
            }
            ("model", "norm_placement") => {
                self.model.norm_placement = Some(NormPlacement::parse(value).map_err(core)?)
            }
            ("model", "vocab") => self.model.vocab = Some(parse_num(line, key, value)?),
            ("model", "image_size") => self.model.image_size = Some(parse_num(line, key, value)?),
            ("model", "patch_size") => self.model.patch_size = Some(parse_num(line, key, value)?),
            ("model", "channels") => self.model.channels = Some(parse_num(line, key, value)?),
            ("model", "classes") => self.model.classes = Some(parse_num(line, key, value)?),
            ("model", "dropout") => self.model.dropout = Some(parse_num(line, key, value)?),
            ("model", "max_seq_len") => self.model.max_seq_len = Some(parse_num(line, key, value)?),
            ("task", "kind") => self.task.kind = Some(TaskKind::parse(value).map_err(core)?),
            ("task", "vocab") => self.task.vocab = Some(parse_num(line, key, value)?),
            ("task", "classes") => self.task.classes = Some(parse_num(line, key, value)?),
            ("task", "seq_len") => self.task.seq_len = Some(parse_num(line, key, value)?),
            ("task", "image_size") => self.task.image_size = Some(parse_num(line, key, value)?),
            ("task", "n_train") => self.task.n_train = Some(parse_num(line, key, value)?),
            ("task", "n_eval") => self.task.n_eval = Some(parse_num(line, key, value)?),
            ("task", "seed") => self.task.seed = Some(parse_num(line, key, value)?),
            ("task", "path") => self.task.path = Some(value.to_string()),
            ("train", "max_lr") => self.train.max_lr = Some(parse_num(line, key, value)?),
            ("train", "warmup_steps") => self.train.warmup_steps = Some(parse_num(line, key, value)?),
            ("train", "total_steps") => self.train.total_steps = Some(parse_num(line, key, value)?),
            ("train", "batch_size") => self.train.batch_size = Some(parse_num(line, key, value)?),
            ("train", "clip_norm") => self.train.clip_norm = Some(parse_num(line, key, value)?),
            ("train", "seed") => self.train.seed = Some(parse_num(line, key, value)?),
            ("train", "eval_every") => self.train.eval_every = Some(parse_num(line, key, value)?),
            ("analysis", "samples") => self.analysis.samples = Some(parse_num(line, key, value)?),
            ("analysis", "stack") => self.analysis.stack = Some(value.to_string()),
            (section, key) => {
                return Err(ConfigError(format!(
                    "line {line}: unknown key '{key}' in section [{section}]"
                )))
            }
        }
        Ok(())
    }

    /// Canonical rendering; `parse(render(x)) == x`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let kv = |out: &mut String, key: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push_str(&format!("{key} = {v}\n"));
            }
        };
        out.push_str("[model]\n");
        let m = &self.model;
        kv(&mut out, "arch", m.arch.map(|a| a.name().into()));
        kv(&mut out, "mode", m.mode.map(|a| a.name().into()));
        kv(&mut out, "hidden", m.hidden.map(|v| v.to_string()));
        kv(&mut out, "ff", m.ff.map(|v| v.to_string()));
        kv(&mut out, "levels", m.levels.map(|v| v.to_string()));
        kv(&mut out, "heads", m.heads.map(|v| v.to_string()));
        kv(&mut out, "rank_policy", m.rank_policy.map(render_rank_policy));
        kv(&mut out, "signal_variant", m.signal_variant.map(|v| v.name().into()));
        kv(&mut out, "norm_placement", m.norm_placement.map(|v| v.name().into()));
        kv(&mut out, "vocab", m.vocab.map(|v| v.to_string()));
        kv(&mut out, "image_size", m.image_size.map(|v| v.to_string()));
        kv(&mut out, "patch_size", m.patch_size.map(|v| v.to_string()));
        kv(&mut out, "channels", m.channels.map(|v| v.to_string()));
        kv(&mut out, "classes", m.classes.map(|v| v.to_string()));
        kv(&mut out, "dropout", m.dropout.map(|v| v.to_string()));
        kv(&mut out, "max_seq_len", m.max_seq_len.map(|v| v.to_string()));
        out.push_str("\n[task]\n");
        let t = &self.task;
        kv(&mut out, "kind", t.kind.map(|v| v.name().into()));
        kv(&mut out, "vocab", t.vocab.map(|v| v.to_string()));
        kv(&mut out, "classes", t.classes.map(|v| v.to_string()));
        kv(&mut out, "seq_len", t.seq_len.map(|v| v.to_string()));
        kv(&mut out, "image_size", t.image_size.map(|v| v.to_string()));
        kv(&mut out, "n_train", t.n_train.map(|v| v.to_string()));
        kv(&mut out, "n_eval", t.n_eval.map(|v| v.to_string()));
        kv(&mut out, "seed", t.seed.map(|v| v.to_string()));
        kv(&mut out, "path", t.path.clone());
        out.push_str("\n[train]\n");
        let tr = &self.train;
        kv(&mut out, "max_lr", tr.max_lr.map(|v| v.to_string()));
        kv(&mut out, "warmup_steps", tr.warmup_steps.map(|v| v.to_string()));
        kv(&mut out, "total_steps", tr.total_steps.map(|v| v.to_string()));
        kv(&mut out, "batch_size", tr.batch_size.map(|v| v.to_string()));
        kv(&mut out, "clip_norm", tr.clip_norm.map(|v| v.to_string()));
        kv(&mut out, "seed", tr.seed.map(|v| v.to_string()));
        kv(&mut out, "eval_every", tr.eval_every.map(|v| v.to_string()));
        out.push_str("\n[analysis]\n");
        let a = &self.analysis;
        kv(&mut out, "samples", a.samples.map(|v| v.to_string()));
        kv(&mut out, "stack", a.stack.clone());
        out
    }

    /// Resolve the task section; `kind` is required.
    pub fn to_task_spec(&self) -> CResult<TaskSpec> {
        let t = &self.task;
        let kind = t
            .kind
            .ok_or_else(|| ConfigError("[task] needs a 'kind'".into()))?;
        Ok(TaskSpec {
            kind,
            vocab: t.vocab.unwrap_or(32),
            classes: t.classes.unwrap_or(4),
            seq_len: t.seq_len.unwrap_or(16),
            image_size: t.image_size.unwrap_or(32),
            n_train: t.n_train.unwrap_or(1024),
            n_eval: t.n_eval.unwrap_or(128),
            seed: t.seed.unwrap_or(0),
            path: t.path.as_ref().map(std::path::PathBuf::from),
        })
    }

    /// Resolve the model section against the task (vocabulary and image
    /// geometry default to what the task requires).
    pub fn to_model_config(&self, task: &TaskSpec) -> CResult<ModelConfig> {
        let m = &self.model;
        let mode = m.mode.unwrap_or(if task.kind == TaskKind::ShapesClassify {
            Mode::EncoderOnly
        } else {
            Mode::EncoderDecoder
        });
        let hidden = m
            .hidden
            .ok_or_else(|| ConfigError("[model] needs 'hidden'".into()))?;
        let ff = m.ff.unwrap_or(4 * hidden);
        let levels = m
            .levels
            .ok_or_else(|| ConfigError("[model] needs 'levels'".into()))?;
        let heads = m
            .heads
            .ok_or_else(|| ConfigError("[model] needs 'heads'".into()))?;
        let norm_placement = m.norm_placement.unwrap_or(match mode {
            Mode::EncoderDecoder => NormPlacement::Post,
            Mode::EncoderOnly => NormPlacement::Pre,
        });
        let (vocab, vision, max_seq_len) = match mode {
            Mode::EncoderDecoder => {
                let needed = task.model_vocab();
                let vocab = m.vocab.unwrap_or(needed);
                if vocab < needed {
                    return Err(ConfigError(format!(
                        "[model] vocab {vocab} cannot cover the task alphabet plus specials ({needed})"
                    )));
                }
                let max_seq_len = m.max_seq_len.unwrap_or(task.seq_len + 8);
                (Some(vocab), None, max_seq_len)
            }
            Mode::EncoderOnly => {
                let image_size = m.image_size.unwrap_or(task.image_size);
                let patch_size = m.patch_size.ok_or_else(|| {
                    ConfigError("[model] needs 'patch_size' in encoder_only mode".into())
                })?;
                let vis = VisionConfig {
                    image_size,
                    patch_size,
                    channels: m.channels.unwrap_or(1),
                    classes: m.classes.unwrap_or(task.classes),
                };
                (None, Some(vis), vis.n_tokens())
            }
        };
        Ok(ModelConfig {
            arch: m
                .arch
                .ok_or_else(|| ConfigError("[model] needs 'arch'".into()))?,
            mode,
            hidden,
            ff,
            levels,
            heads,
            rank_policy: m.rank_policy.unwrap_or_default(),
            signal_variant: m.signal_variant.unwrap_or(SignalVariant::Full),
            norm_placement,
            vocab,
            vision,
            dropout: m.dropout.unwrap_or(0.1),
            max_seq_len,
        })
    }

    pub fn to_train_config(&self) -> TrainConfig {
        let t = &self.train;
        let defaults = TrainConfig::default();
        TrainConfig {
            max_lr: t.max_lr.unwrap_or(defaults.max_lr),
            warmup_steps: t.warmup_steps.unwrap_or(defaults.warmup_steps),
            total_steps: t.total_steps.unwrap_or(defaults.total_steps),
            batch_size: t.batch_size.unwrap_or(defaults.batch_size),
            clip_norm: t.clip_norm.unwrap_or(defaults.clip_norm),
            seed: t.seed.unwrap_or(defaults.seed),
            eval_every: t.eval_every.unwrap_or(defaults.eval_every),
            stop_at_token_accuracy: None,
        }
    }
}
