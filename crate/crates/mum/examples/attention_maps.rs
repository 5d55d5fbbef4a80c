//! Decoder global-attention maps for a query patch.
//!
//! Smoke-trains a tiny model on duplicated views, then asks where a query
//! patch in view 0 attends inside view 1. After training, the peak should
//! fall on the corresponding patch:
//!
//! ```bash
//! cargo run --release -p mum --example attention_maps
//! ```

use mum::masking::{PatchGrid, PatchMask};
use mum::model::{attention_map_with_masks, ModelConfig};
use mum::numerics::Array;
use mum::sampler::SamplerConfig;
use mum::scene::generate_synthetic_scene;
use mum::train::{train_from_scratch, ObjectiveConfig, TrainConfig, TrainOptions};

fn main() {
    let cfg = ModelConfig::tiny();
    let pool: Vec<_> = (0..4)
        .map(|i| generate_synthetic_scene(3 + i, 6, 32, 32).unwrap().0)
        .collect();
    let singles: Vec<_> = pool.iter().flat_map(|s| s.frames.clone()).collect();
    println!("smoke-training a tiny model...");
    let (model, _, _) = train_from_scratch(
        &cfg,
        &pool,
        &singles,
        &TrainConfig {
            base_lr: 2e-1,
            batch_size_for_scaling: 16,
            warmup_steps: 50,
            total_steps: 500,
            seed: 11,
            ..TrainConfig::default()
        },
        &SamplerConfig {
            min_len: 2,
            max_len: 4,
            frames_per_device: 16,
            single_view_prob: 0.1,
            image_size: 32,
            flip_prob: 0.0,
            rng_seed: 11,
        },
        &ObjectiveConfig::default(),
        &TrainOptions {
            log_interval: 500,
            ..TrainOptions::default()
        },
    )
    .unwrap();

    // two identical views: the correspondence is the identity
    let (seq, _) = generate_synthetic_scene(91, 1, 32, 32).unwrap();
    let frame = &seq.frames[0].image;
    let mut data = frame.data().to_vec();
    data.extend_from_slice(frame.data());
    let images = Array::from_vec(&[2, 3, 32, 32], data).unwrap();

    let grid = PatchGrid::for_image(32, 32, cfg.patch_size).unwrap();
    let query = (0usize, 3usize, 5usize);
    // mask the query's view (so the query is a mask token hunting for its
    // content) and leave the duplicate fully visible
    let n = grid.n();
    let mut bits = vec![false; n];
    bits[query.1 * grid.grid_w + query.2] = true;
    let masks = vec![
        PatchMask {
            bits,
            ratio: 1.0 / n as f64,
        },
        PatchMask::all_visible(n),
    ];
    // block 1 is the first global-attention block of the alternating decoder
    let map = attention_map_with_masks(&images, Some(&masks), query, &model, 1).unwrap();

    let total: f64 = map.weights.data().iter().sum();
    println!(
        "query patch (view {}, row {}, col {}); raw weights sum to {total:.6}",
        query.0, query.1, query.2
    );

    // where does the query attend within the duplicated view 1?
    let view1 = &map.per_view.data()[n..2 * n];
    let (mut best, mut best_w) = (0usize, 0.0);
    for (k, &w) in view1.iter().enumerate() {
        if w > best_w {
            best_w = w;
            best = k;
        }
    }
    let (br, bc) = grid.position(best);
    println!(
        "peak attention in view 1 at (row {br}, col {bc}) with weight {best_w:.3} \
         (corresponding patch is (row {}, col {}))",
        query.1, query.2
    );
    println!(
        "attention over view 1, renormalized ({}x{}):",
        grid.grid_h, grid.grid_w
    );
    for r in 0..grid.grid_h {
        let row: Vec<String> = (0..grid.grid_w)
            .map(|c| format!("{:5.2}", view1[r * grid.grid_w + c]))
            .collect();
        println!("  {}", row.join(" "));
    }
}
