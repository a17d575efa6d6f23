//! Shared fixtures for the benchmark targets.

use ringformer_core::model::{build_model, Arch, Model, ModelConfig};
use ringformer_core::rng::Rng;
use ringformer_core::signal::RankPolicy;
use ringformer_core::task::{generate_task, Dataset, TaskKind, TaskSpec};
use ringformer_core::tensor::Tensor;

pub fn square_matrices(n: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(seed);
    (
        Tensor::randn(&[n, n], 1.0, &mut rng),
        Tensor::randn(&[n, n], 1.0, &mut rng),
    )
}

/// The copy-task model the regression criterion trains, plus its dataset.
pub fn copy_task_fixture() -> (Model<f32>, Dataset) {
    let spec = TaskSpec::seq(TaskKind::SeqCopy, 32, 16, 2048, 64, 7);
    let ds = generate_task(&spec).unwrap();
    let mut cfg = ModelConfig::translation(Arch::Ringformer, 64, 256, 2, 4, spec.model_vocab());
    cfg.rank_policy = RankPolicy::Ratio { divisor: 16 };
    cfg.max_seq_len = 24;
    let mut rng = Rng::new(1);
    let model = build_model::<f32>(&cfg, &mut rng).unwrap();
    (model, ds)
}
