//! Subcommand implementations and the exit-code policy.

use std::path::{Path, PathBuf};

use ringformer_core::analysis::{
    cka_grid, emit_report, mad_report, AnalysisData, PatchGeometry, ReportFormat,
};
use ringformer_core::autograd::Graph;
use ringformer_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use ringformer_core::model::{
    build_model, count_flops, count_params, CountConvention, CountExclusion, ForwardCtx,
    ForwardTrace, Mode, Model, ModelConfig, ParamCountOptions, TokenBatch,
};
use ringformer_core::rng::Rng;
use ringformer_core::task::{
    generate_task, patchify, write_image_container, write_jsonl, Dataset, TaskKind, TaskSpec,
};
use ringformer_core::tensor::{DType, Scalar};
use ringformer_core::train::{default_out_dir, write_metrics_csv, Trainer};
use ringformer_core::Error as CoreError;

use crate::config_file::{ConfigError, RunConfigFile};
use crate::{AnalyzeArgs, FlopsArgs, GenDataArgs, Overrides, ParamsArgs, TrainArgs};

/// CLI failure with its process exit code.
pub enum CliError {
    /// Bad configuration (exit 2).
    Config(String),
    /// Training left the finite range (exit 3).
    Diverged(String),
    /// Analysis inputs are incompatible (exit 4).
    Analysis(String),
    /// Filesystem failure (exit 5).
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Analysis(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Diverged(m) | CliError::Analysis(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

/// Default mapping for core errors outside analysis contexts.
fn core_err(e: CoreError) -> CliError {
    match e {
        CoreError::Io { .. } => CliError::Io(e.to_string()),
        CoreError::Diverged { .. } => CliError::Diverged(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

/// Within `analyze`, incompatible checkpoints/traces map to exit 4.
fn analysis_err(e: CoreError) -> CliError {
    match e {
        CoreError::Io { .. } => CliError::Io(e.to_string()),
        CoreError::Checkpoint(c) => CliError::Analysis(c.to_string()),
        other => CliError::Analysis(other.to_string()),
    }
}

fn load_config(path: &Path, overrides: &Overrides, seed: Option<u64>) -> Result<RunConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfigFile::parse(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.0)))?;
    apply_overrides(&mut cfg, overrides)?;
    if let Some(seed) = seed {
        cfg.train.seed = Some(seed);
        cfg.task.seed = Some(cfg.task.seed.unwrap_or(seed));
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfigFile, o: &Overrides) -> Result<(), CliError> {
    use ringformer_core::model::{Arch, Mode, NormPlacement};
    use ringformer_core::signal::SignalVariant;

    fn parse<T>(what: &str, r: Result<T, CoreError>) -> Result<T, CliError> {
        r.map_err(|e| CliError::Config(format!("--{what}: {e}")))
    }
    if let Some(v) = &o.arch {
        cfg.model.arch = Some(parse("arch", Arch::parse(v))?);
    }
    if let Some(v) = &o.mode {
        cfg.model.mode = Some(parse("mode", Mode::parse(v))?);
    }
    if let Some(v) = o.hidden {
        cfg.model.hidden = Some(v);
    }
    if let Some(v) = o.ff {
        cfg.model.ff = Some(v);
    }
    if let Some(v) = o.levels {
        cfg.model.levels = Some(v);
    }
    if let Some(v) = o.heads {
        cfg.model.heads = Some(v);
    }
    if let Some(v) = &o.rank_policy {
        cfg.model.rank_policy = Some(crate::config_file::parse_rank_policy_flag(v)?);
    }
    if let Some(v) = &o.signal_variant {
        cfg.model.signal_variant = Some(parse("signal-variant", SignalVariant::parse(v))?);
    }
    if let Some(v) = &o.norm_placement {
        cfg.model.norm_placement = Some(parse("norm-placement", NormPlacement::parse(v))?);
    }
    if let Some(v) = o.vocab {
        cfg.model.vocab = Some(v);
    }
    if let Some(v) = o.image_size {
        cfg.model.image_size = Some(v);
    }
    if let Some(v) = o.patch_size {
        cfg.model.patch_size = Some(v);
    }
    if let Some(v) = o.channels {
        cfg.model.channels = Some(v);
    }
    if let Some(v) = o.classes {
        cfg.model.classes = Some(v);
    }
    if let Some(v) = o.dropout {
        cfg.model.dropout = Some(v);
    }
    if let Some(v) = o.max_seq_len {
        cfg.model.max_seq_len = Some(v);
    }
    if let Some(v) = &o.task_kind {
        cfg.task.kind = Some(parse("task-kind", TaskKind::parse(v))?);
    }
    if let Some(v) = o.task_vocab {
        cfg.task.vocab = Some(v);
    }
    if let Some(v) = o.task_classes {
        cfg.task.classes = Some(v);
    }
    if let Some(v) = o.task_seq_len {
        cfg.task.seq_len = Some(v);
    }
    if let Some(v) = o.task_image_size {
        cfg.task.image_size = Some(v);
    }
    if let Some(v) = o.n_train {
        cfg.task.n_train = Some(v);
    }
    if let Some(v) = o.n_eval {
        cfg.task.n_eval = Some(v);
    }
    if let Some(v) = o.task_seed {
        cfg.task.seed = Some(v);
    }
    if let Some(v) = &o.data_path {
        cfg.task.path = Some(v.clone());
    }
    if let Some(v) = o.max_lr {
        cfg.train.max_lr = Some(v);
    }
    if let Some(v) = o.warmup_steps {
        cfg.train.warmup_steps = Some(v);
    }
    if let Some(v) = o.total_steps {
        cfg.train.total_steps = Some(v);
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = Some(v);
    }
    if let Some(v) = o.clip_norm {
        cfg.train.clip_norm = Some(v);
    }
    if let Some(v) = o.train_seed {
        cfg.train.seed = Some(v);
    }
    if let Some(v) = o.eval_every {
        cfg.train.eval_every = Some(v);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(args: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides, seed)?;
    let task = cfg.to_task_spec()?;
    let model_cfg = cfg.to_model_config(&task)?;
    let train_cfg = cfg.to_train_config();
    let out_dir = args.out.unwrap_or_else(default_out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;

    // the run record: the file with every flag override folded in
    std::fs::write(out_dir.join("run.cfg"), cfg.render())
        .map_err(|e| CliError::Io(format!("cannot write run record: {e}")))?;

    match args.dtype.as_str() {
        "f64" => run_train::<f64>(&model_cfg, &task, train_cfg, &out_dir),
        _ => run_train::<f32>(&model_cfg, &task, train_cfg, &out_dir),
    }
}

fn run_train<S: Scalar>(
    model_cfg: &ModelConfig,
    task: &TaskSpec,
    train_cfg: ringformer_core::train::TrainConfig,
    out_dir: &Path,
) -> Result<(), CliError> {
    let ds = generate_task(task).map_err(core_err)?;
    let mut rng = Rng::new(train_cfg.seed);
    let model = build_model::<S>(model_cfg, &mut rng).map_err(core_err)?;
    let mut trainer = Trainer::new(model, train_cfg).map_err(core_err)?;

    let dump = out_dir.join("diverged_last_good.ckpt");
    trainer.run(&ds, Some(&dump)).map_err(core_err)?;

    write_metrics_csv(&out_dir.join("metrics.csv"), &trainer.records).map_err(core_err)?;
    save_checkpoint(
        &trainer.model,
        trainer.step,
        &trainer.rng,
        Some(&trainer.adam),
        &out_dir.join("final.ckpt"),
    )
    .map_err(core_err)?;

    match trainer.records.last() {
        Some(r) => println!(
            "final: step {} loss {:.6} token_acc {:.4} seq_acc {:.4} bleu {} lr {:.3e}",
            r.step,
            r.loss,
            r.token_accuracy,
            r.secondary_accuracy,
            r.bleu.map(|b| format!("{b:.4}")).unwrap_or_else(|| "-".into()),
            r.learning_rate
        ),
        None => println!("final: untrained (0 steps); checkpoint written"),
    }
    println!("outputs: {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// params / flops
// ---------------------------------------------------------------------------

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn cmd_params(args: ParamsArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides, seed)?;
    let task = cfg.to_task_spec()?;
    let model_cfg = cfg.to_model_config(&task)?;
    let opts = ParamCountOptions {
        convention: match args.convention.as_str() {
            "with-biases" => CountConvention::WithBiases,
            _ => CountConvention::WeightsOnly,
        },
        exclusion: if args.exclude_embeddings {
            CountExclusion::EmbeddingsAndHead
        } else {
            CountExclusion::None
        },
    };
    let report = count_params(&model_cfg, opts).map_err(core_err)?;

    println!(
        "parameters ({}, {})",
        opts.convention.name(),
        if args.exclude_embeddings {
            "embeddings and head excluded"
        } else {
            "all components"
        }
    );
    for (group, count) in &report.by_group {
        println!("  {group:<18} {:>15}", thousands(*count));
    }
    println!("  {:<18} {:>15}", "total", thousands(report.total));
    println!("  ({:.2}M)", report.total as f64 / 1e6);

    if args.json {
        let json = serde_json::json!({
            "convention": opts.convention.name(),
            "exclude_embeddings": args.exclude_embeddings,
            "total": report.total,
            "components": report.by_group.iter().cloned().collect::<std::collections::BTreeMap<String, u64>>(),
        });
        println!("{}", serde_json::to_string_pretty(&json).expect("json"));
    }
    Ok(())
}

pub fn cmd_flops(args: FlopsArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides, seed)?;
    let task = cfg.to_task_spec()?;
    let model_cfg = cfg.to_model_config(&task)?;
    let tokens = args.tokens.unwrap_or(match model_cfg.mode {
        Mode::EncoderOnly => model_cfg.vision.unwrap().n_tokens(),
        Mode::EncoderDecoder => model_cfg.max_seq_len,
    });
    let report = count_flops(&model_cfg, tokens).map_err(core_err)?;

    println!("forward MACs at {tokens} tokens (1 MAC = 1 FLOP)");
    for (name, macs) in report.components() {
        println!("  {name:<18} {:>18}", thousands(macs));
    }
    println!("  {:<18} {:>18}", "total", thousands(report.total_macs()));
    println!("  ({:.3} GFLOPs)", report.total_macs() as f64 / 1e9);

    if args.json {
        let json = serde_json::json!({
            "tokens": tokens,
            "total_macs": report.total_macs(),
            "components": report.components().iter().map(|(k, v)| (k.to_string(), *v)).collect::<std::collections::BTreeMap<String, u64>>(),
        });
        println!("{}", serde_json::to_string_pretty(&json).expect("json"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

pub fn cmd_analyze(args: AnalyzeArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides, seed)?;
    let mut task = cfg.to_task_spec()?;
    if let Some(s) = seed {
        task.seed = s;
    }
    let samples = args.samples.or(cfg.analysis.samples).unwrap_or(32);
    let format = match args.format.as_str() {
        "csv" => ReportFormat::Csv,
        _ => ReportFormat::Json,
    };

    let paths: Vec<PathBuf> = match (args.kind.as_str(), args.checkpoints.len()) {
        ("cka", 1) => vec![args.checkpoints[0].clone(), args.checkpoints[0].clone()],
        ("cka", 2) => args.checkpoints.clone(),
        ("cka", n) => {
            return Err(CliError::Config(format!(
                "cka takes one or two --checkpoint paths, got {n}"
            )))
        }
        ("mad", 1) => args.checkpoints.clone(),
        ("mad", n) => {
            return Err(CliError::Config(format!(
                "mad takes exactly one --checkpoint path, got {n}"
            )))
        }
        _ => unreachable!("clap enforces the kind"),
    };

    // all checkpoints must agree on dtype
    let dtypes: Vec<DType> = paths
        .iter()
        .map(|p| read_manifest(p).map(|m| m.dtype).map_err(analysis_err))
        .collect::<Result<_, _>>()?;
    if dtypes.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::Analysis(
            "checkpoints use different element types".into(),
        ));
    }

    let tags: Vec<String> = (0..paths.len())
        .map(|i| {
            args.tags
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("model{i}"))
        })
        .collect();

    match dtypes[0] {
        DType::F32 => run_analysis::<f32>(&args, &task, samples, format, &paths, &tags),
        DType::F64 => run_analysis::<f64>(&args, &task, samples, format, &paths, &tags),
    }
}

fn run_analysis<S: Scalar>(
    args: &AnalyzeArgs,
    task: &TaskSpec,
    samples: usize,
    format: ReportFormat,
    paths: &[PathBuf],
    tags: &[String],
) -> Result<(), CliError> {
    let models: Vec<Model<S>> = paths
        .iter()
        .map(|p| load_checkpoint::<S>(p).map(|l| l.model).map_err(analysis_err))
        .collect::<Result<_, _>>()?;

    match args.kind.as_str() {
        "cka" => {
            let want_decoder = args.stack == "decoder";
            let mut traces = Vec::new();
            for model in &models {
                traces.push(seq_trace(model, task, samples, want_decoder)?);
            }
            let grid = cka_grid(&traces[0], &traces[1], &tags[0], &tags[1])
                .map_err(analysis_err)?;
            emit_report(&AnalysisData::Cka(grid), format, &args.out).map_err(core_err)?;
        }
        "mad" => {
            let model = &models[0];
            let vis = model.cfg.vision.ok_or_else(|| {
                CliError::Analysis(
                    "attention-distance analysis needs an encoder-only image model".into(),
                )
            })?;
            let trace = vision_trace(model, task, samples)?;
            let geom = PatchGeometry {
                patches_per_side: vis.patches_per_side(),
                patch_size: vis.patch_size,
                class_token: true,
            };
            let report = mad_report(&trace, &geom, tags[0].clone()).map_err(analysis_err)?;
            emit_report(&AnalysisData::Mad(report), format, &args.out).map_err(core_err)?;
        }
        _ => unreachable!(),
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

/// Forward the first `samples` eval pairs and capture the requested stack's
/// trace.
fn seq_trace<S: Scalar>(
    model: &Model<S>,
    task: &TaskSpec,
    samples: usize,
    want_decoder: bool,
) -> Result<ForwardTrace<S>, CliError> {
    if model.cfg.mode != Mode::EncoderDecoder {
        return Err(CliError::Analysis(
            "cka over sequence batches needs encoder_decoder checkpoints".into(),
        ));
    }
    if model.cfg.vocab.unwrap_or(0) < task.model_vocab() {
        return Err(CliError::Analysis(format!(
            "checkpoint vocabulary {:?} cannot embed task alphabet {} plus specials",
            model.cfg.vocab, task.vocab
        )));
    }
    let ds = generate_task(task).map_err(analysis_err)?;
    let Dataset::Seq(seq) = ds else {
        return Err(CliError::Analysis(
            "cka analysis expects a sequence task for its evaluation batch".into(),
        ));
    };
    let take = samples.min(seq.eval.len()).max(1);
    let src_rows: Vec<Vec<usize>> = seq.eval[..take].iter().map(|(s, _)| s.clone()).collect();
    let dec_rows: Vec<Vec<usize>> = seq.eval[..take]
        .iter()
        .map(|(_, t)| {
            let mut row = Vec::with_capacity(t.len() + 1);
            row.push(task.bos());
            row.extend_from_slice(t);
            row
        })
        .collect();
    let src = TokenBatch::new(&src_rows).map_err(analysis_err)?;
    let dec = TokenBatch::new(&dec_rows).map_err(analysis_err)?;

    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval_traced();
    let (_, enc_trace, dec_trace) = model
        .seq2seq_logits(&mut g, &src, &dec, &mut ctx)
        .map_err(analysis_err)?;
    let trace = if want_decoder { dec_trace } else { enc_trace };
    trace.ok_or_else(|| CliError::Analysis("forward pass produced no trace".into()))
}

fn vision_trace<S: Scalar>(
    model: &Model<S>,
    task: &TaskSpec,
    samples: usize,
) -> Result<ForwardTrace<S>, CliError> {
    let vis = model.cfg.vision.unwrap();
    let ds = generate_task(task).map_err(analysis_err)?;
    let Dataset::Image(img) = ds else {
        return Err(CliError::Analysis(
            "attention-distance analysis expects an image task for its evaluation batch".into(),
        ));
    };
    if img.image_size != vis.image_size {
        return Err(CliError::Analysis(format!(
            "checkpoint expects {0}x{0} images, task renders {1}x{1}",
            vis.image_size, img.image_size
        )));
    }
    let take = samples.min(img.eval.len()).max(1);
    let views: Vec<&[f32]> = img.eval[..take].iter().map(|s| s.pixels.as_slice()).collect();
    let patches = patchify::<S>(&views, img.image_size, vis.patch_size).map_err(analysis_err)?;
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval_traced();
    let (_, trace) = model
        .classify_logits(&mut g, &patches, &mut ctx)
        .map_err(analysis_err)?;
    trace.ok_or_else(|| CliError::Analysis("forward pass produced no trace".into()))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(args: GenDataArgs, seed: Option<u64>) -> Result<(), CliError> {
    let kind = TaskKind::parse(&args.kind).map_err(core_err)?;
    if kind == TaskKind::External {
        return Err(CliError::Config(
            "gen-data synthesizes datasets; 'external' is not a synthesizable kind".into(),
        ));
    }
    let spec = TaskSpec {
        kind,
        vocab: args.vocab,
        classes: args.classes,
        seq_len: args.seq_len,
        image_size: args.image_size,
        n_train: args.n_train,
        n_eval: args.n_eval,
        seed: seed.unwrap_or(args.task_seed),
        path: None,
    };
    let ds = generate_task(&spec).map_err(core_err)?;
    let count = match ds {
        Dataset::Seq(seq) => {
            let all: Vec<_> = seq.train.into_iter().chain(seq.eval).collect();
            write_jsonl(&args.out, &all).map_err(core_err)?;
            all.len()
        }
        Dataset::Image(img) => {
            let all: Vec<_> = img.train.into_iter().chain(img.eval).collect();
            write_image_container(&args.out, img.image_size, img.classes, &all)
                .map_err(core_err)?;
            all.len()
        }
    };
    println!("wrote {count} samples to {}", args.out.display());
    Ok(())
}
