//! Train a small recurrent model on the synthetic copy task and print the
//! metric stream. Doubles as the calibration run for the regression
//! threshold in the acceptance suite.

use std::time::Instant;

use ringformer_core::model::{build_model, Arch, ModelConfig};
use ringformer_core::rng::Rng;
use ringformer_core::task::{generate_task, TaskKind, TaskSpec};
use ringformer_core::train::{TrainConfig, Trainer};

fn main() {
    let spec = TaskSpec::seq(TaskKind::SeqCopy, 32, 16, 20_000, 256, 7);
    let ds = generate_task(&spec).unwrap();
    let mut cfg = ModelConfig::translation(Arch::Ringformer, 64, 256, 2, 4, spec.model_vocab());
    cfg.max_seq_len = 24;
    let mut rng = Rng::new(1);
    let model = build_model::<f32>(&cfg, &mut rng).unwrap();

    let tcfg = TrainConfig {
        max_lr: 1e-3,
        warmup_steps: 200,
        total_steps: 5000,
        batch_size: 32,
        clip_norm: 1.0,
        seed: 1,
        eval_every: 100,
        stop_at_token_accuracy: Some(0.99),
    };
    let mut trainer = Trainer::new(model, tcfg).unwrap();
    let start = Instant::now();
    trainer.run(&ds, None).unwrap();
    for r in &trainer.records {
        println!(
            "step {:5}  loss {:.4}  token_acc {:.4}  seq_acc {:.4}  lr {:.2e}  [{:.1}s]",
            r.step,
            r.loss,
            r.token_accuracy,
            r.secondary_accuracy,
            r.learning_rate,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "finished at step {} in {:.1}s",
        trainer.step,
        start.elapsed().as_secs_f64()
    );
}
