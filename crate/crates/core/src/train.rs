//! Desk-scale training and evaluation.
//!
//! Teacher-forced cross-entropy with Adam, warmup/cosine learning rate and
//! global-norm clipping. Single-threaded and fully deterministic for a
//! given (config, seed): batch sampling and dropout draw from one seeded
//! stream whose state is checkpointed, so interrupted and uninterrupted
//! runs agree bit for bit.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::autograd::Graph;
use crate::bleu::bleu;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Mode, Model, TokenBatch};
use crate::optim::{adam_step, clip_global_norm, cosine_warmup_lr, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::task::{patchify, Dataset, ImageDataset, SeqDataset};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Stop once evaluated token accuracy reaches this threshold.
    pub stop_at_token_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 32,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 100,
            stop_at_token_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must stay below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One evaluation snapshot. For classification tasks `token_accuracy` and
/// `secondary_accuracy` coincide (one prediction per sample); for sequence
/// tasks the secondary value is exact-match sequence accuracy.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub token_accuracy: f64,
    pub secondary_accuracy: f64,
    pub bleu: Option<f64>,
    pub learning_rate: f64,
}

/// Render metric records as CSV with the fixed header
/// `step,loss,token_acc,seq_acc,bleu,lr`.
pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step,loss,token_acc,seq_acc,bleu,lr\n");
    for r in records {
        let bleu_cell = r.bleu.map(|b| b.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss, r.token_accuracy, r.secondary_accuracy, bleu_cell, r.learning_rate
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(records))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Evaluation results independent of a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub loss: f64,
    pub token_accuracy: f64,
    pub secondary_accuracy: f64,
    pub bleu: Option<f64>,
}

/// Stateful training loop that can be checkpointed and resumed.
pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    pub adam_cfg: AdamConfig,
    pub rng: Rng,
    pub step: u64,
    pub cfg: TrainConfig,
    /// Training-batch loss at every completed step.
    pub step_losses: Vec<f64>,
    pub records: Vec<MetricsRecord>,
    /// Parameters as they stood when the most recent finite loss was
    /// computed, for the divergence dump.
    last_good: Option<(crate::params::ParamStore<S>, u64, Rng)>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::zeros_like(&model.store);
        let rng = Rng::new(cfg.seed);
        Ok(Trainer {
            model,
            adam,
            adam_cfg: AdamConfig::default(),
            rng,
            step: 0,
            cfg,
            step_losses: Vec::new(),
            records: Vec::new(),
            last_good: None,
        })
    }

    fn check_compat(&self, ds: &Dataset) -> Result<()> {
        match ds {
            Dataset::Seq(seq) => {
                if self.model.cfg.mode != Mode::EncoderDecoder {
                    return Err(Error::Config(
                        "sequence tasks need an encoder_decoder model".into(),
                    ));
                }
                let need = seq.vocab + 2;
                if self.model.cfg.vocab != Some(need) {
                    return Err(Error::Config(format!(
                        "model vocabulary {:?} does not cover task alphabet {} plus specials ({need})",
                        self.model.cfg.vocab, seq.vocab
                    )));
                }
            }
            Dataset::Image(img) => {
                if self.model.cfg.mode != Mode::EncoderOnly {
                    return Err(Error::Config(
                        "image tasks need an encoder_only model".into(),
                    ));
                }
                let vis = self.model.cfg.vision.unwrap();
                if vis.image_size != img.image_size || vis.channels != 1 {
                    return Err(Error::Config(format!(
                        "model expects {}x{} single-channel images, dataset holds {}x{}",
                        vis.image_size, vis.image_size, img.image_size, img.image_size
                    )));
                }
                if vis.classes != img.classes {
                    return Err(Error::Config(format!(
                        "model head has {} classes, dataset has {}",
                        vis.classes, img.classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Run until `cfg.total_steps` (or the early-stop threshold). On
    /// divergence the last finite-loss parameters are written to
    /// `divergence_dump` (when given) before the error returns.
    pub fn run(&mut self, ds: &Dataset, divergence_dump: Option<&Path>) -> Result<()> {
        self.run_until(ds, self.cfg.total_steps, divergence_dump)
    }

    /// As [`Trainer::run`], but pause at `until` while keeping the full
    /// `total_steps` schedule (for checkpoint-and-resume workflows).
    pub fn run_until(
        &mut self,
        ds: &Dataset,
        until: u64,
        divergence_dump: Option<&Path>,
    ) -> Result<()> {
        self.check_compat(ds)?;
        let stop = until.min(self.cfg.total_steps);
        while self.step < stop {
            let step = self.step + 1;
            let lr = cosine_warmup_lr(
                step,
                self.cfg.warmup_steps,
                self.cfg.total_steps,
                self.cfg.max_lr,
            );
            let loss = match self.train_step(ds, lr) {
                Ok(loss) => loss,
                Err(err) => {
                    if let Some(path) = divergence_dump {
                        // dump the parameters behind the last finite loss,
                        // not the exploded ones
                        if let Some((store, good_step, good_rng)) = self.last_good.take() {
                            let mut salvaged = self.model.clone();
                            salvaged.store = store;
                            save_checkpoint(&salvaged, good_step, &good_rng, None, path)?;
                        } else {
                            save_checkpoint(&self.model, self.step, &self.rng, None, path)?;
                        }
                    }
                    return Err(Error::Diverged {
                        step,
                        detail: err.to_string(),
                    });
                }
            };
            self.step = step;
            self.step_losses.push(loss);

            if step.is_multiple_of(self.cfg.eval_every) || step == self.cfg.total_steps {
                let eval = self.evaluate(ds)?;
                self.records.push(MetricsRecord {
                    step,
                    loss,
                    token_accuracy: eval.token_accuracy,
                    secondary_accuracy: eval.secondary_accuracy,
                    bleu: eval.bleu,
                    learning_rate: lr,
                });
                if let Some(th) = self.cfg.stop_at_token_accuracy {
                    if eval.token_accuracy >= th {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn train_step(&mut self, ds: &Dataset, lr: f64) -> Result<f64> {
        let (loss_value, grads) = match ds {
            Dataset::Seq(seq) => self.seq_step(seq)?,
            Dataset::Image(img) => self.image_step(img)?,
        };
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                op: "train_step",
                detail: format!("loss {loss_value}"),
            });
        }
        self.last_good = Some((self.model.store.clone(), self.step, self.rng.clone()));
        let mut grads = grads;
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        adam_step(
            &mut self.model.store,
            &mut self.adam,
            &grads,
            lr,
            &self.adam_cfg,
        )?;
        Ok(loss_value)
    }

    fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.rng.below(n)).collect()
    }

    fn seq_step(&mut self, seq: &SeqDataset) -> Result<(f64, crate::params::Gradients<S>)> {
        if seq.train.is_empty() {
            return Err(Error::Degenerate {
                op: "train",
                detail: "empty training set".into(),
            });
        }
        let idx = self.sample_indices(seq.train.len());
        let (src, dec_in, labels) = seq_batch(seq, &idx);
        let mut g = Graph::new();
        let loss_node = {
            let mut ctx = ForwardCtx::train(&mut self.rng);
            let (logits, _, _) = self.model.seq2seq_logits(&mut g, &src, &dec_in, &mut ctx)?;
            let flat_shape = [labels.len(), self.model.cfg.vocab.unwrap()];
            let flat = g.reshape(logits, &flat_shape)?;
            g.cross_entropy(flat, Arc::new(labels), None)?
        };
        let loss = g.value(loss_node).data()[0].to_f64();
        let grads = g.backward(loss_node, &self.model.store)?;
        Ok((loss, grads))
    }

    fn image_step(&mut self, img: &ImageDataset) -> Result<(f64, crate::params::Gradients<S>)> {
        if img.train.is_empty() {
            return Err(Error::Degenerate {
                op: "train",
                detail: "empty training set".into(),
            });
        }
        let idx = self.sample_indices(img.train.len());
        let views: Vec<&[f32]> = idx.iter().map(|&i| img.train[i].pixels.as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| img.train[i].label).collect();
        let vis = self.model.cfg.vision.unwrap();
        let patches = patchify::<S>(&views, img.image_size, vis.patch_size)?;
        let mut g = Graph::new();
        let loss_node = {
            let mut ctx = ForwardCtx::train(&mut self.rng);
            let (logits, _) = self.model.classify_logits(&mut g, &patches, &mut ctx)?;
            g.cross_entropy(logits, Arc::new(labels), None)?
        };
        let loss = g.value(loss_node).data()[0].to_f64();
        let grads = g.backward(loss_node, &self.model.store)?;
        Ok((loss, grads))
    }

    /// Evaluate on the dataset's eval split. Consumes no rng.
    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalOutcome> {
        evaluate(&self.model, ds, self.cfg.batch_size)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, self.step, &self.rng, Some(&self.adam), path)
    }

    /// Rebuild a trainer from a checkpoint; training continues exactly
    /// where the saved run stood.
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let loaded = load_checkpoint::<S>(path)?;
        let adam = loaded.adam.unwrap_or_else(|| AdamState::zeros_like(&loaded.model.store));
        Ok(Trainer {
            model: loaded.model,
            adam,
            adam_cfg: AdamConfig::default(),
            rng: loaded.rng,
            step: loaded.step,
            cfg,
            step_losses: Vec::new(),
            records: Vec::new(),
            last_good: None,
        })
    }
}

/// Assemble (source, decoder-input, flattened labels) for the sampled rows:
/// decoder input is `[BOS] + tgt`, labels are `tgt + [EOS]`.
fn seq_batch(seq: &SeqDataset, idx: &[usize]) -> (TokenBatch, TokenBatch, Vec<usize>) {
    let bos = seq.vocab;
    let eos = seq.vocab + 1;
    let mut src_rows = Vec::with_capacity(idx.len());
    let mut dec_rows = Vec::with_capacity(idx.len());
    let mut labels = Vec::new();
    for &i in idx {
        let (src, tgt) = &seq.train[i];
        src_rows.push(src.clone());
        let mut dec = Vec::with_capacity(tgt.len() + 1);
        dec.push(bos);
        dec.extend_from_slice(tgt);
        dec_rows.push(dec);
        labels.extend_from_slice(tgt);
        labels.push(eos);
    }
    (
        TokenBatch::new(&src_rows).expect("uniform source lengths"),
        TokenBatch::new(&dec_rows).expect("uniform target lengths"),
        labels,
    )
}

/// Teacher-forced loss/accuracy plus greedy-decode metrics.
pub fn evaluate<S: Scalar>(model: &Model<S>, ds: &Dataset, batch_size: usize) -> Result<EvalOutcome> {
    match ds {
        Dataset::Seq(seq) => evaluate_seq(model, seq, batch_size),
        Dataset::Image(img) => evaluate_images(model, img, batch_size),
    }
}

fn evaluate_seq<S: Scalar>(
    model: &Model<S>,
    seq: &SeqDataset,
    batch_size: usize,
) -> Result<EvalOutcome> {
    if seq.eval.is_empty() {
        return Err(Error::Degenerate {
            op: "evaluate",
            detail: "empty evaluation set".into(),
        });
    }
    let vocab = model.cfg.vocab.unwrap();
    let bos = seq.vocab;
    let eos = seq.vocab + 1;
    let mut correct = 0u64;
    let mut total = 0u64;
    let mut loss_sum = 0.0f64;
    let mut loss_batches = 0u64;
    let mut exact = 0u64;
    let mut hyps: Vec<Vec<usize>> = Vec::with_capacity(seq.eval.len());
    let mut refs: Vec<Vec<usize>> = Vec::with_capacity(seq.eval.len());

    for chunk in seq.eval.chunks(batch_size.max(1)) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let chunk_ds = SeqDataset {
            train: chunk.to_vec(),
            eval: vec![],
            vocab: seq.vocab,
        };
        let (src, dec_in, labels) = seq_batch(&chunk_ds, &idx);

        // teacher-forced pass
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let (logits, _, _) = model.seq2seq_logits(&mut g, &src, &dec_in, &mut ctx)?;
        let flat = g.value(logits).reshape(&[labels.len(), vocab])?;
        loss_sum += crate::ops::cross_entropy(&flat, &labels, None)?.to_f64();
        loss_batches += 1;
        for (row, &want) in labels.iter().enumerate() {
            let lane = &flat.data()[row * vocab..(row + 1) * vocab];
            if argmax(lane) == want {
                correct += 1;
            }
            total += 1;
        }

        // greedy decode
        let max_len = chunk[0].1.len() + 4;
        let decoded = greedy_decode(model, &src, bos, eos, max_len)?;
        for (hyp, (_, tgt)) in decoded.into_iter().zip(chunk) {
            if &hyp == tgt {
                exact += 1;
            }
            hyps.push(hyp);
            refs.push(tgt.clone());
        }
    }

    let corpus_bleu = bleu(&hyps, &refs, 4)?;
    Ok(EvalOutcome {
        loss: loss_sum / loss_batches as f64,
        token_accuracy: correct as f64 / total as f64,
        secondary_accuracy: exact as f64 / seq.eval.len() as f64,
        bleu: Some(corpus_bleu),
    })
}

fn evaluate_images<S: Scalar>(
    model: &Model<S>,
    img: &ImageDataset,
    batch_size: usize,
) -> Result<EvalOutcome> {
    if img.eval.is_empty() {
        return Err(Error::Degenerate {
            op: "evaluate",
            detail: "empty evaluation set".into(),
        });
    }
    let vis = model.cfg.vision.unwrap();
    let mut correct = 0u64;
    let mut loss_sum = 0.0f64;
    let mut batches = 0u64;
    for chunk in img.eval.chunks(batch_size.max(1)) {
        let views: Vec<&[f32]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let patches = patchify::<S>(&views, img.image_size, vis.patch_size)?;
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let (logits, _) = model.classify_logits(&mut g, &patches, &mut ctx)?;
        let values = g.value(logits);
        loss_sum += crate::ops::cross_entropy(values, &labels, None)?.to_f64();
        batches += 1;
        let classes = vis.classes;
        for (row, &want) in labels.iter().enumerate() {
            let lane = &values.data()[row * classes..(row + 1) * classes];
            if argmax(lane) == want {
                correct += 1;
            }
        }
    }
    let acc = correct as f64 / img.eval.len() as f64;
    Ok(EvalOutcome {
        loss: loss_sum / batches as f64,
        token_accuracy: acc,
        secondary_accuracy: acc,
        bleu: None,
    })
}

fn argmax<S: Scalar>(lane: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in lane.iter().enumerate() {
        if *v > lane[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: argmax token by token, starting from BOS, stopping per
/// row at EOS or after `max_len` tokens. Returns the pre-EOS tokens.
pub fn greedy_decode<S: Scalar>(
    model: &Model<S>,
    src: &TokenBatch,
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let vocab = model.cfg.vocab.unwrap();
    let b = src.batch;
    let mut generated: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut done = vec![false; b];

    // encode once
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval();
    let (enc, _) = model.encode_tokens(&mut g, src, &mut ctx)?;
    let enc_values = g.value(enc).clone();

    for _ in 0..max_len {
        let rows: Vec<Vec<usize>> = generated
            .iter()
            .map(|gen| {
                let mut row = Vec::with_capacity(gen.len() + 1);
                row.push(bos);
                row.extend_from_slice(gen);
                row
            })
            .collect();
        let dec_in = TokenBatch::new(&rows)?;
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let enc_node = g.input(enc_values.clone());
        let (dec, _) = model.decode_tokens(&mut g, &dec_in, enc_node, &mut ctx)?;
        let logits = model.project_vocab(&mut g, dec)?;
        let values = g.value(logits);
        let len = dec_in.len;
        for row in 0..b {
            if done[row] {
                generated[row].push(eos); // keep the batch rectangular
                continue;
            }
            let base = (row * len + (len - 1)) * vocab;
            let next = argmax(&values.data()[base..base + vocab]);
            if next == eos {
                done[row] = true;
                generated[row].push(eos);
            } else {
                generated[row].push(next);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    // trim everything from the first EOS on
    Ok(generated
        .into_iter()
        .map(|mut gen| {
            if let Some(pos) = gen.iter().position(|&t| t == eos) {
                gen.truncate(pos);
            }
            gen
        })
        .collect())
}

/// Convenience wrapper: train a fresh model to completion.
pub fn train<S: Scalar>(
    model: Model<S>,
    ds: &Dataset,
    cfg: TrainConfig,
    divergence_dump: Option<&Path>,
) -> Result<(Model<S>, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(ds, divergence_dump)?;
    let Trainer { model, records, .. } = trainer;
    Ok((model, records))
}

/// Default directory for run outputs, from an environment override.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os("RINGFORMER_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch, ModelConfig};
    use crate::signal::RankPolicy;
    use crate::task::{generate_task, TaskKind, TaskSpec};

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        let mut cfg = ModelConfig::translation(Arch::Ringformer, 16, 32, 2, 2, vocab + 2);
        cfg.rank_policy = RankPolicy::Explicit { rank: 2 };
        cfg.max_seq_len = 8;
        cfg
    }

    fn tiny_task() -> (TaskSpec, Dataset) {
        let spec = TaskSpec::seq(TaskKind::SeqCopy, 8, 4, 64, 8, 11);
        let ds = generate_task(&spec).unwrap();
        (spec, ds)
    }

    #[test]
    fn zero_total_steps_leaves_model_unchanged() {
        let (_, ds) = tiny_task();
        let mut rng = Rng::new(1);
        let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
        let before: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let (model, records) = train(model, &ds, cfg, None).unwrap();
        assert!(records.is_empty());
        for ((_, p), want) in model.store.iter().zip(&before) {
            assert_eq!(p.value.data(), want.as_slice());
        }
    }

    #[test]
    fn recorded_lr_at_warmup_equals_max_lr() {
        let (_, ds) = tiny_task();
        let mut rng = Rng::new(2);
        let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
        let cfg = TrainConfig {
            max_lr: 3e-3,
            warmup_steps: 4,
            total_steps: 8,
            batch_size: 4,
            eval_every: 4,
            ..TrainConfig::default()
        };
        let (_, records) = train(model, &ds, cfg, None).unwrap();
        let at_warmup = records.iter().find(|r| r.step == 4).unwrap();
        assert_eq!(at_warmup.learning_rate, 3e-3);
    }

    #[test]
    fn same_seed_reproduces_metrics_and_parameters_bitwise() {
        let (_, ds) = tiny_task();
        let cfg = TrainConfig {
            total_steps: 12,
            warmup_steps: 3,
            batch_size: 4,
            eval_every: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = Rng::new(3);
            let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
            train(model, &ds, cfg.clone(), None).unwrap()
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(metrics_to_csv(&r1), metrics_to_csv(&r2));
        for ((_, a), (_, b)) in m1.store.iter().zip(m2.store.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let (_, ds) = tiny_task();
        let cfg = TrainConfig {
            total_steps: 10,
            warmup_steps: 2,
            batch_size: 4,
            eval_every: 5,
            seed: 4,
            ..TrainConfig::default()
        };

        // uninterrupted
        let mut rng = Rng::new(5);
        let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
        let (full, full_records) = train(model, &ds, cfg.clone(), None).unwrap();

        // interrupted at step 5, same full-horizon schedule
        let mut rng = Rng::new(5);
        let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
        let mut first = Trainer::new(model, cfg.clone()).unwrap();
        first.run_until(&ds, 5, None).unwrap();
        let path = std::env::temp_dir().join("ringformer_resume_test.ckpt");
        first.save(&path).unwrap();

        let mut second = Trainer::<f64>::resume(&path, cfg).unwrap();
        assert_eq!(second.step, 5);
        second.run(&ds, None).unwrap();

        for ((_, a), (_, b)) in full.store.iter().zip(second.model.store.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        // records from the resumed half match the tail of the full run
        let tail: Vec<&MetricsRecord> = full_records.iter().filter(|r| r.step > 5).collect();
        assert_eq!(tail.len(), second.records.len());
        for (a, b) in tail.iter().zip(&second.records) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let spec = TaskSpec::seq(TaskKind::SeqCopy, 8, 4, 16, 64, 21);
        let ds = generate_task(&spec).unwrap();
        let mut rng = Rng::new(6);
        let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
        let out = evaluate(&model, &ds, 16).unwrap();
        // ten classes (8 tokens + bos/eos); chance is 0.1, allow wide noise
        assert!(out.token_accuracy < 0.45, "{}", out.token_accuracy);
        assert!(out.loss > 1.0);
    }

    #[test]
    fn accuracy_agrees_with_brute_force_comparison() {
        let (_, ds) = tiny_task();
        let mut rng = Rng::new(7);
        let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
        let out = evaluate(&model, &ds, 8).unwrap();

        // independent recomputation, sample by sample
        let Dataset::Seq(seq) = &ds else { panic!() };
        let mut correct = 0u64;
        let mut total = 0u64;
        for (src, tgt) in &seq.eval {
            let src_b = TokenBatch::new(std::slice::from_ref(src)).unwrap();
            let mut dec = vec![seq.vocab];
            dec.extend_from_slice(tgt);
            let dec_b = TokenBatch::new(&[dec]).unwrap();
            let mut labels = tgt.clone();
            labels.push(seq.vocab + 1);
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval();
            let (logits, _, _) = model.seq2seq_logits(&mut g, &src_b, &dec_b, &mut ctx).unwrap();
            let v = g.value(logits);
            let vocab = model.cfg.vocab.unwrap();
            for (pos, &want) in labels.iter().enumerate() {
                let lane: Vec<f64> = (0..vocab).map(|j| v.at(&[0, pos, j])).collect();
                let mut best = 0;
                for j in 1..vocab {
                    if lane[j] > lane[best] {
                        best = j;
                    }
                }
                if best == want {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert_eq!(out.token_accuracy, correct as f64 / total as f64);
    }

    #[test]
    fn divergence_aborts_with_last_good_dump() {
        let (_, ds) = tiny_task();
        let mut rng = Rng::new(8);
        let model = build_model::<f64>(&tiny_cfg(8), &mut rng).unwrap();
        let cfg = TrainConfig {
            warmup_steps: 1,
            total_steps: 50,
            batch_size: 4,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let dump = std::env::temp_dir().join("ringformer_diverged.ckpt");
        let _ = std::fs::remove_file(&dump);
        let mut trainer = Trainer::new(model, cfg).unwrap();
        // poison one weight so the first forward pass goes non-finite
        let id = trainer.model.store.id_by_name("head.weight").unwrap();
        trainer.model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
        let err = trainer.run(&ds, Some(&dump)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert!(dump.exists());
        // the dump loads cleanly
        assert!(load_checkpoint::<f64>(&dump).is_ok());
    }

    #[test]
    fn memorizes_a_single_sample() {
        let spec = TaskSpec::seq(TaskKind::SeqCopy, 6, 3, 1, 1, 33);
        let mut ds = generate_task(&spec).unwrap();
        // eval on the very sample it trains on
        if let Dataset::Seq(seq) = &mut ds {
            seq.eval = seq.train.clone();
        }
        let mut cfg = tiny_cfg(6);
        cfg.dropout = 0.0;
        let mut rng = Rng::new(9);
        let model = build_model::<f64>(&cfg, &mut rng).unwrap();
        let tcfg = TrainConfig {
            max_lr: 3e-3,
            warmup_steps: 10,
            total_steps: 300,
            batch_size: 1,
            eval_every: 50,
            seed: 1,
            stop_at_token_accuracy: Some(1.0),
            ..TrainConfig::default()
        };
        let (model, records) = train(model, &ds, tcfg, None).unwrap();
        let out = evaluate(&model, &ds, 1).unwrap();
        assert_eq!(out.secondary_accuracy, 1.0, "records: {records:?}");
        assert_eq!(out.bleu, Some(1.0));
    }
}
