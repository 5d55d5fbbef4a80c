//! Dense-matching linear probe over frozen features.
//!
//! Smoke-trains a tiny model, then compares probed matching quality of its
//! frozen encoder features against a randomly initialized encoder on
//! held-out synthetic pairs:
//!
//! ```bash
//! cargo run --release -p mum --example linear_probe
//! ```

use mum::masking::PatchGrid;
use mum::model::{extract_features, ModelConfig, ModelParams};
use mum::numerics::Array;
use mum::probe::{
    evaluate_pairs, sample_at_patch_centers, train_probe_with_eval, MatchMode, ProbeConfig,
    ProbePair,
};
use mum::sampler::SamplerConfig;
use mum::scene::generate_synthetic_scene;
use mum::train::{train_from_scratch, ObjectiveConfig, TrainConfig, TrainOptions};

fn build_pairs(model: &ModelParams, seeds: &[u64], views: usize) -> Vec<ProbePair> {
    let grid = PatchGrid::for_image(32, 32, model.cfg.patch_size).unwrap();
    let mut pairs = Vec::new();
    for &seed in seeds {
        let (seq, warps) = generate_synthetic_scene(seed, views, 32, 32).unwrap();
        let feats: Vec<Array> = seq
            .frames
            .iter()
            .map(|f| {
                let images = f.image.clone().reshaped(&[1, 3, 32, 32]).unwrap();
                let out = extract_features(&images, model.cfg.enc_depth, model).unwrap();
                let (n, w) = (out.shape()[1], out.shape()[2]);
                out.reshaped(&[n, w]).unwrap()
            })
            .collect();
        for warp in &warps {
            let gt = sample_at_patch_centers(warp, &grid).unwrap();
            if !gt.valid.iter().any(|&v| v) {
                continue;
            }
            let src = seq
                .frames
                .iter()
                .position(|f| f.frame_id == warp.source_id)
                .unwrap();
            let dst = seq
                .frames
                .iter()
                .position(|f| f.frame_id == warp.target_id)
                .unwrap();
            pairs.push(ProbePair {
                pair_id: format!("{}__{}", warp.source_id, warp.target_id),
                feat_a: feats[src].clone(),
                feat_b: feats[dst].clone(),
                gt,
            });
        }
    }
    pairs
}

fn main() {
    let model_cfg = ModelConfig::tiny();
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
        "smoke-training the tiny model for {} steps...",
        train_cfg.total_steps
    );
    let (trained, _, outcome) = train_from_scratch(
        &model_cfg,
        &pool,
        &singles,
        &train_cfg,
        &sampler_cfg,
        &ObjectiveConfig::default(),
        &TrainOptions {
            log_interval: 100,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    for row in &outcome.metrics {
        println!("  step {:>4}  loss {:.4}", row.step, row.loss);
    }

    let grid = PatchGrid::for_image(32, 32, model_cfg.patch_size).unwrap();
    let random = ModelParams::init(&model_cfg, &grid, 777).unwrap();

    let train_seeds = [3u64, 4, 5, 6];
    let eval_seeds = [91u64, 92, 93, 94];
    let probe_cfg = ProbeConfig {
        train_steps: 300,
        eval_interval: 100,
        probe_lr: 3e-3,
        ..ProbeConfig::new(model_cfg.enc_width, 1)
    };

    let mut results = Vec::new();
    for (name, model) in [("trained", &trained), ("random", &random)] {
        let train_pairs = build_pairs(model, &train_seeds, 6);
        let eval_pairs = build_pairs(model, &eval_seeds, 5);
        let (projection, best) =
            train_probe_with_eval(&train_pairs, &eval_pairs, &probe_cfg).unwrap();
        println!(
            "{name}: best probe EPE {:.3}, robustness {:.3} over {} eval pairs",
            best.epe,
            best.robustness,
            eval_pairs.len()
        );
        for mode in [MatchMode::Soft, MatchMode::Hard] {
            let m = evaluate_pairs(&eval_pairs, &projection, probe_cfg.temperature, mode).unwrap();
            println!(
                "  {name} {mode:?}: epe {:.3} rob {:.3}",
                m.epe, m.robustness
            );
        }
        let per_pair: Vec<f64> = eval_pairs
            .iter()
            .map(|p| {
                evaluate_pairs(
                    std::slice::from_ref(p),
                    &projection,
                    probe_cfg.temperature,
                    MatchMode::Hard,
                )
                .unwrap()
                .epe
            })
            .collect();
        results.push(per_pair);
    }
    let wins = results[0]
        .iter()
        .zip(results[1].iter())
        .filter(|(t, r)| t < r)
        .count();
    println!(
        "trained features win on {wins}/{} held-out pairs",
        results[0].len()
    );
}
