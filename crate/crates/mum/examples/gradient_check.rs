//! Certify analytic gradients against central finite differences.
//!
//! Checks individual operations first, then the reconstruction loss through
//! the full encoder/decoder at 64-bit precision:
//!
//! ```bash
//! cargo run --release -p mum --example gradient_check
//! ```

use mum::masking::{patchify, sample_mask, MaskedViewTokens, PatchGrid};
use mum::model::{forward, ModelConfig, ModelParams, ParamVars};
use mum::numerics::{grad_check, Array, Tape, Var};
use mum::rng::Rng;
use mum::train::{mum_loss_tape, LossRow};

fn main() {
    let mut rng = Rng::new(5);

    // individual operations
    let a = Array::from_fn(&[3, 4], |_| rng.normal());
    let b = Array::from_fn(&[4, 2], |_| rng.normal());
    let report = grad_check(
        &|t: &mut Tape, vs: &[Var]| {
            let p = t.matmul(vs[0], vs[1])?;
            Ok(t.sum_all(p))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    println!("matmul:     max rel err {:.3e}", report.max_rel_err());

    let x = Array::from_fn(&[5], |_| rng.uniform_in(-3.0, 3.0));
    let w = Array::from_fn(&[5], |i| (i as f64 + 1.0) / 5.0);
    let report = grad_check(
        &move |t: &mut Tape, vs: &[Var]| {
            let y = t.softmax(vs[0], 0)?;
            let w = t.constant(w.clone());
            let p = t.mul(y, w)?;
            Ok(t.sum_all(p))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    println!("softmax:    max rel err {:.3e}", report.max_rel_err());

    let x = Array::from_fn(&[2, 8], |_| rng.normal());
    let g = Array::full(&[8], 1.0);
    let bias = Array::zeros(&[8]);
    let report = grad_check(
        &|t: &mut Tape, vs: &[Var]| {
            let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-6)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x, g, bias],
        1e-5,
    )
    .unwrap();
    println!("layer_norm: max rel err {:.3e}", report.max_rel_err());

    // the full model: every parameter of the tiny configuration
    let cfg = ModelConfig::tiny();
    let grid = PatchGrid::for_image(8, 8, 4).unwrap();
    let model = ModelParams::init(&cfg, &grid, 7).unwrap();
    let mut views = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..2 {
        let img = Array::from_fn(&[3, 8, 8], |_| rng.uniform());
        let patches = patchify(&img, &grid).unwrap();
        let mask = sample_mask(grid.n(), 0.75, &mut rng).unwrap();
        views.push(MaskedViewTokens::new(&patches, &mask, true, 1e-6).unwrap());
        masks.push(mask);
    }
    let inputs: Vec<Array> = model
        .store
        .ids()
        .map(|id| model.store.value(id).clone())
        .collect();
    let n: usize = inputs.iter().map(Array::len).sum();
    println!("checking the full model ({n} parameter elements)...");
    let started = std::time::Instant::now();
    let report = grad_check(
        &move |tape: &mut Tape, vs: &[Var]| {
            let pv = ParamVars::from_vars(vs.to_vec());
            let preds = forward(tape, &model, &pv, &views, &masks, &grid)?;
            let mut target_data = Vec::new();
            for v in &views {
                target_data.extend_from_slice(v.target.data());
            }
            let targets = Array::from_vec(&[2 * grid.n(), grid.patch_dim()], target_data)?;
            mum_loss_tape(
                tape,
                &[LossRow {
                    preds,
                    targets,
                    masks: masks.clone(),
                }],
            )
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    println!(
        "full model: max rel err {:.3e} in {:.1}s",
        report.max_rel_err(),
        started.elapsed().as_secs_f64()
    );
}
