//! Small fixtures shared by unit tests.

use crate::dataio::{standard_benchmark, Benchmark, SceneSpec, SplitCounts};
use crate::nets::NetConfig;
use crate::trainer::RunConfig;

/// 32×32 benchmark with a handful of images per split.
pub(crate) fn tiny_bench(seed: u64) -> Benchmark {
    let spec = SceneSpec {
        seed,
        image_size: (32, 32),
        ..SceneSpec::default()
    };
    let counts = SplitCounts {
        source_train: 8,
        target_train: 6,
        target_val: 4,
        wild_val: 4,
    };
    standard_benchmark(&spec, counts).unwrap()
}

pub(crate) fn tiny_net(num_classes: usize) -> NetConfig {
    NetConfig {
        encoder_channels: vec![8, 8, 16, 16],
        head_channels: 8,
        disc_channels: vec![4, 4, 1],
        ..NetConfig::with_classes(num_classes)
    }
}

/// A few iterations per phase, fast enough for unit tests.
pub(crate) fn tiny_config() -> RunConfig {
    RunConfig {
        seed: 3,
        lr0: 2.5e-3,
        batch_size: 2,
        stage1_iters: 6,
        ssl_iters_per_round: 4,
        max_rounds: 2,
        stop_gap: -100.0,
        metrics_every: 2,
        eval_batch: 4,
        net: tiny_net(5),
        ..RunConfig::default()
    }
}
