//! Pretrain a tiny model on synthetic scenes and watch the loss fall.
//!
//! Runs the full recipe — uniform sequence lengths, floor(frames/S) packing,
//! the 10% single-view fallback, fresh 75% masks per view, normalized pixel
//! targets, AdamW under warmup+cosine — for 500 steps on one CPU core:
//!
//! ```bash
//! cargo run --release -p mum --example pretrain_tiny
//! ```

use mum::model::ModelConfig;
use mum::sampler::SamplerConfig;
use mum::scene::generate_synthetic_scene;
use mum::train::{peak_lr, train_from_scratch, ObjectiveConfig, TrainConfig, TrainOptions};

fn main() {
    let pool: Vec<_> = (0..4)
        .map(|i| generate_synthetic_scene(3 + i, 6, 32, 32).unwrap().0)
        .collect();
    let singles: Vec<_> = pool.iter().flat_map(|s| s.frames.clone()).collect();
    let sampler_cfg = SamplerConfig {
        min_len: 2,
        max_len: 4,
        frames_per_device: 16,
        single_view_prob: 0.1,
        image_size: 32,
        flip_prob: 0.0,
        rng_seed: 11,
    };
    let train_cfg = TrainConfig {
        base_lr: 2e-1,
        batch_size_for_scaling: 16,
        warmup_steps: 50,
        total_steps: 500,
        seed: 11,
        ..TrainConfig::default()
    };
    println!(
        "peak lr {:.3e} from the linear scaling rule (base {:.1e}, batch {})",
        peak_lr(&train_cfg),
        train_cfg.base_lr,
        train_cfg.batch_size_for_scaling
    );

    let started = std::time::Instant::now();
    let (_, _, outcome) = train_from_scratch(
        &ModelConfig::tiny(),
        &pool,
        &singles,
        &train_cfg,
        &sampler_cfg,
        &ObjectiveConfig::default(),
        &TrainOptions {
            log_interval: 50,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    for row in &outcome.metrics {
        println!(
            "step {:>4}  loss {:.4}  lr {:.3e}",
            row.step, row.loss, row.lr
        );
    }
    let losses: Vec<f64> = outcome.metrics.iter().map(|r| r.loss).collect();
    println!(
        "first-logged loss {:.4} -> last {:.4} in {:.0}s",
        losses.first().unwrap(),
        losses.last().unwrap(),
        started.elapsed().as_secs_f64()
    );
}
