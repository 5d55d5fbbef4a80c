//! Frozen-feature dense-matching evaluation: a trainable square linear
//! projection feeding a softmax-kernel nearest-neighbor matcher, end-point
//! error and robustness metrics, and probe-free cosine matching.
//!
//! Matching operates at patch-center resolution: one correspondence per
//! source patch, with ground truth sampled at the source patch centers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{MumError, Result};
use crate::masking::PatchGrid;
use crate::model::ParamStore;
use crate::numerics::{Array, Tape};
use crate::rng::Rng;
use crate::scene::GroundTruthWarp;
use crate::train::adamw::{adamw_step, OptimizerState};
use crate::train::TrainConfig;

/// Pixel threshold below which a match counts as robust (strict `<`).
pub const ROBUSTNESS_THRESHOLD_PX: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    /// Softmax-weighted average of target patch centers.
    Soft,
    /// Argmax target patch center; ties resolve to the lowest index.
    Hard,
}

/// Linear probe configuration plus its learnable square projection.
#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub projection: Array,
    pub temperature: f64,
    pub train_steps: usize,
    pub probe_lr: f64,
    pub eval_interval: usize,
    /// Pairs per optimization step.
    pub batch_pairs: usize,
    pub seed: u64,
}

impl ProbeConfig {
    /// Random projection of the given width: N(0, 1/sqrt(width)) entries.
    pub fn new(width: usize, seed: u64) -> ProbeConfig {
        let mut rng = Rng::stream(seed, 200, 0);
        let std = 1.0 / (width as f64).sqrt();
        ProbeConfig {
            projection: Array::from_fn(&[width, width], |_| rng.normal() * std),
            temperature: 0.07,
            train_steps: 400,
            probe_lr: 1e-3,
            eval_interval: 100,
            batch_pairs: 8,
            seed,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.temperature <= 0.0 {
            out.push("probe.temperature must be positive".into());
        }
        let shape = self.projection.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            out.push(format!("probe.projection must be square, got {shape:?}"));
        }
        if self.probe_lr <= 0.0 {
            out.push("probe.probe_lr must be positive".into());
        }
        if self.eval_interval == 0 {
            out.push("probe.eval_interval must be positive".into());
        }
        if self.batch_pairs == 0 {
            out.push("probe.batch_pairs must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MumError::config(problems))
        }
    }
}

/// Predicted dense warp at patch-center resolution.
#[derive(Clone, Debug)]
pub struct WarpEstimate {
    pub grid: PatchGrid,
    /// (grid_h, grid_w, 2) target pixel coordinates (x, y).
    pub coords: Array,
    /// Source patches with a usable match (cosine matching can mark
    /// zero-norm rows as no-match).
    pub valid: Vec<bool>,
    pub mode: MatchMode,
}

/// Ground truth sampled at source patch centers.
#[derive(Clone, Debug)]
pub struct PatchWarp {
    pub grid: PatchGrid,
    pub coords: Array,
    pub valid: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchMetrics {
    /// Mean Euclidean pixel error over valid patch centers.
    pub epe: f64,
    /// Fraction of valid matches with error < 32 px (strict).
    pub robustness: f64,
    pub n_valid: usize,
}

/// Similarity logits `s = (A P)(B P)ᵀ / τ`.
pub fn similarity(
    feat_a: &Array,
    feat_b: &Array,
    projection: &Array,
    temperature: f64,
) -> Result<Array> {
    let (na, wa) = feat_a.dims2("similarity")?;
    let (nb, wb) = feat_b.dims2("similarity")?;
    let (pw, pw2) = projection.dims2("similarity")?;
    if wa != wb || pw != wa || pw2 != wa {
        return Err(MumError::DimensionMismatch {
            op: "similarity",
            lhs: vec![na, wa],
            rhs: vec![pw, pw2],
        });
    }
    let ap = crate::numerics::array::matmul_nn(feat_a.data(), projection.data(), na, wa, wa);
    let bp = crate::numerics::array::matmul_nn(feat_b.data(), projection.data(), nb, wa, wa);
    let mut s = crate::numerics::array::matmul_nt(&ap, &bp, na, wa, nb);
    let inv = 1.0 / temperature;
    for v in s.iter_mut() {
        *v *= inv;
    }
    Array::from_vec(&[na, nb], s)
}

/// Turn a similarity matrix into a warp. Soft mode averages target patch
/// centers under the per-row softmax (and is invariant to per-row constant
/// shifts); hard mode takes the argmax (invariant to any strictly monotone
/// transform of the similarities).
pub fn warp_from_similarity(s: &Array, grid: &PatchGrid, mode: MatchMode) -> Result<WarpEstimate> {
    let (n_src, n_tgt) = s.dims2("warp_from_similarity")?;
    if n_tgt != grid.n() {
        return Err(MumError::Contract {
            op: "warp_from_similarity",
            reason: format!("{n_tgt} target patches for a grid of {}", grid.n()),
        });
    }
    if n_src != grid.n() {
        return Err(MumError::Contract {
            op: "warp_from_similarity",
            reason: format!("{n_src} source patches for a grid of {}", grid.n()),
        });
    }
    let centers = grid.patch_centers();
    let mut coords = Vec::with_capacity(n_src * 2);
    match mode {
        MatchMode::Soft => {
            for i in 0..n_src {
                let row = s.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let mut cx = 0.0;
                let mut cy = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    z += e;
                    cx += e * centers[j].0;
                    cy += e * centers[j].1;
                }
                coords.push(cx / z);
                coords.push(cy / z);
            }
        }
        MatchMode::Hard => {
            for i in 0..n_src {
                let row = s.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                coords.push(centers[best].0);
                coords.push(centers[best].1);
            }
        }
    }
    Ok(WarpEstimate {
        grid: *grid,
        coords: Array::from_vec(&[grid.grid_h, grid.grid_w, 2], coords)?,
        valid: vec![true; n_src],
        mode,
    })
}

/// Project both feature sets, build the softmax-kernel similarity, and
/// estimate the warp.
pub fn kernel_match(
    feat_a: &Array,
    feat_b: &Array,
    probe: &ProbeConfig,
    grid: &PatchGrid,
    mode: MatchMode,
) -> Result<WarpEstimate> {
    let s = similarity(feat_a, feat_b, &probe.projection, probe.temperature)?;
    warp_from_similarity(&s, grid, mode)
}

/// Sample a full-resolution ground-truth warp at the source patch centers
/// (bilinear). A patch is valid only when the four pixels around its center
/// are valid in the source warp.
pub fn sample_at_patch_centers(gt: &GroundTruthWarp, grid: &PatchGrid) -> Result<PatchWarp> {
    let (h, w) = (gt.height(), gt.width());
    if grid.grid_h * grid.patch_size != h || grid.grid_w * grid.patch_size != w {
        return Err(MumError::Contract {
            op: "sample_at_patch_centers",
            reason: format!(
                "grid {}x{} of {}-pixel patches does not tile a {h}x{w} warp",
                grid.grid_h, grid.grid_w, grid.patch_size
            ),
        });
    }
    let centers = grid.patch_centers();
    let mut coords = Vec::with_capacity(centers.len() * 2);
    let mut valid = Vec::with_capacity(centers.len());
    for &(cx, cy) in &centers {
        match gt.sample_bilinear(cx, cy) {
            Some((u, v)) => {
                coords.push(u);
                coords.push(v);
                valid.push(true);
            }
            None => {
                coords.push(0.0);
                coords.push(0.0);
                valid.push(false);
            }
        }
    }
    Ok(PatchWarp {
        grid: *grid,
        coords: Array::from_vec(&[grid.grid_h, grid.grid_w, 2], coords)?,
        valid,
    })
}

/// For each valid source patch, the target patch whose center is nearest to
/// the ground-truth coordinates (ties to the lowest index). Supervision for
/// the probe's cross-entropy loss.
pub fn nearest_patch_targets(gt: &PatchWarp) -> Vec<Option<usize>> {
    let centers = gt.grid.patch_centers();
    (0..gt.grid.n())
        .map(|k| {
            if !gt.valid[k] {
                return None;
            }
            let (u, v) = (gt.coords.data()[k * 2], gt.coords.data()[k * 2 + 1]);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, &(cx, cy)) in centers.iter().enumerate() {
                let d = (cx - u) * (cx - u) + (cy - v) * (cy - v);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            Some(best)
        })
        .collect()
}

/// Accumulate error terms of one pair into running metric sums.
fn accumulate(
    est: &WarpEstimate,
    gt: &PatchWarp,
    err_sum: &mut f64,
    robust: &mut usize,
    n: &mut usize,
) -> Result<()> {
    if est.grid != gt.grid {
        return Err(MumError::Contract {
            op: "match_metrics",
            reason: "estimate and ground truth use different grids".into(),
        });
    }
    for k in 0..gt.grid.n() {
        if !gt.valid[k] || !est.valid[k] {
            continue;
        }
        let dx = est.coords.data()[k * 2] - gt.coords.data()[k * 2];
        let dy = est.coords.data()[k * 2 + 1] - gt.coords.data()[k * 2 + 1];
        let err = (dx * dx + dy * dy).sqrt();
        *err_sum += err;
        if err < ROBUSTNESS_THRESHOLD_PX {
            *robust += 1;
        }
        *n += 1;
    }
    Ok(())
}

/// End-point error and robustness of an estimated warp against ground truth
/// at patch centers. Errors out when no patch is valid in both.
pub fn match_metrics(est: &WarpEstimate, gt: &PatchWarp) -> Result<MatchMetrics> {
    let (mut err_sum, mut robust, mut n) = (0.0, 0usize, 0usize);
    accumulate(est, gt, &mut err_sum, &mut robust, &mut n)?;
    if n == 0 {
        return Err(MumError::contract("match_metrics", "no valid points"));
    }
    Ok(MatchMetrics {
        epe: err_sum / n as f64,
        robustness: robust as f64 / n as f64,
        n_valid: n,
    })
}

/// Hard matching by cosine similarity, optionally standardizing each feature
/// row first. Zero-norm source rows become no-matches (excluded from
/// metrics); positive row rescaling cannot change the result.
pub fn cosine_match(
    feat_a: &Array,
    feat_b: &Array,
    grid: &PatchGrid,
    apply_norm: bool,
) -> Result<WarpEstimate> {
    let (na, w) = feat_a.dims2("cosine_match")?;
    let (nb, wb) = feat_b.dims2("cosine_match")?;
    if w != wb || na != grid.n() || nb != grid.n() {
        return Err(MumError::DimensionMismatch {
            op: "cosine_match",
            lhs: feat_a.shape().to_vec(),
            rhs: feat_b.shape().to_vec(),
        });
    }
    let prep = |f: &Array| -> (Vec<f64>, Vec<bool>) {
        let mut data = f.data().to_vec();
        let n = f.shape()[0];
        let mut ok = vec![true; n];
        for i in 0..n {
            let row = &mut data[i * w..(i + 1) * w];
            if apply_norm {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let denom = var.sqrt() + 1e-6;
                for v in row.iter_mut() {
                    *v = (*v - mean) / denom;
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                ok[i] = false;
                for v in row.iter_mut() {
                    *v = 0.0;
                }
            } else {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        (data, ok)
    };
    let (a, a_ok) = prep(feat_a);
    let (b, _) = prep(feat_b);
    let sim = crate::numerics::array::matmul_nt(&a, &b, na, w, nb);
    let mut est = warp_from_similarity(&Array::from_vec(&[na, nb], sim)?, grid, MatchMode::Hard)?;
    est.valid = a_ok;
    Ok(est)
}

/// One evaluation pair: frozen features of both views plus ground truth at
/// source patch centers.
#[derive(Clone, Debug)]
pub struct ProbePair {
    pub pair_id: String,
    pub feat_a: Array,
    pub feat_b: Array,
    pub gt: PatchWarp,
}

/// Micro-averaged metrics of a projection over pairs.
pub fn evaluate_pairs(
    pairs: &[ProbePair],
    projection: &Array,
    temperature: f64,
    mode: MatchMode,
) -> Result<MatchMetrics> {
    if pairs.is_empty() {
        return Err(MumError::contract("evaluate_pairs", "no pairs"));
    }
    let (mut err_sum, mut robust, mut n) = (0.0, 0usize, 0usize);
    for pair in pairs {
        let s = similarity(&pair.feat_a, &pair.feat_b, projection, temperature)?;
        let est = warp_from_similarity(&s, &pair.gt.grid, mode)?;
        accumulate(&est, &pair.gt, &mut err_sum, &mut robust, &mut n)?;
    }
    if n == 0 {
        return Err(MumError::contract("evaluate_pairs", "no valid points"));
    }
    Ok(MatchMetrics {
        epe: err_sum / n as f64,
        robustness: robust as f64 / n as f64,
        n_valid: n,
    })
}

/// Train the projection on `train_pairs`, evaluating on `eval_pairs` every
/// `eval_interval` steps and at the end, returning the projection and
/// metrics of the best (lowest-EPE) evaluation. The loss is the mean
/// negative log-softmax probability of the ground-truth nearest target patch
/// over valid source patches; only the projection trains.
pub fn train_probe_with_eval(
    train_pairs: &[ProbePair],
    eval_pairs: &[ProbePair],
    cfg: &ProbeConfig,
) -> Result<(Array, MatchMetrics)> {
    cfg.validate()?;
    if train_pairs.is_empty() || eval_pairs.is_empty() {
        return Err(MumError::contract("train_probe", "no pairs"));
    }
    let targets: Vec<Vec<Option<usize>>> = train_pairs
        .iter()
        .map(|p| nearest_patch_targets(&p.gt))
        .collect();
    if targets.iter().all(|t| t.iter().all(Option::is_none)) {
        return Err(MumError::contract("train_probe", "no valid supervision"));
    }

    // single-parameter AdamW at a constant rate, no decay
    let mut store = ParamStore::default();
    let pid = store.add("probe.projection".into(), cfg.projection.clone(), false);
    let mut opt = OptimizerState::new(&store);
    let opt_cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };

    if cfg.train_steps == 0 {
        let metrics = evaluate_pairs(
            eval_pairs,
            store.value(pid),
            cfg.temperature,
            MatchMode::Soft,
        )?;
        return Ok((store.value(pid).clone(), metrics));
    }

    let mut best: Option<(Array, MatchMetrics)> = None;
    for step in 0..cfg.train_steps {
        let mut rng = Rng::stream(cfg.seed, 201, step as u64);
        let mut tape = Tape::new();
        let p = tape.leaf(store.value(pid).clone(), true);
        let mut total = None;
        for _ in 0..cfg.batch_pairs {
            let idx = rng.below(train_pairs.len());
            if targets[idx].iter().all(Option::is_none) {
                continue;
            }
            let pair = &train_pairs[idx];
            let a = tape.constant(pair.feat_a.clone());
            let b = tape.constant(pair.feat_b.clone());
            let ap = tape.matmul(a, p)?;
            let bp = tape.matmul(b, p)?;
            let logits = tape.matmul_nt(ap, bp)?;
            let scaled = tape.scale(logits, 1.0 / cfg.temperature);
            let ce = tape.softmax_cross_entropy(scaled, &targets[idx])?;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        let Some(total) = total else { continue };
        let loss = tape.scale(total, 1.0 / cfg.batch_pairs as f64);
        let mut grads = tape.backward(loss)?;
        let grad = vec![grads.take(p)];
        adamw_step(&mut store, &grad, &mut opt, cfg.probe_lr, &opt_cfg)?;

        let completed = step + 1;
        if completed % cfg.eval_interval == 0 || completed == cfg.train_steps {
            let metrics = evaluate_pairs(
                eval_pairs,
                store.value(pid),
                cfg.temperature,
                MatchMode::Soft,
            )?;
            let better = best.as_ref().map_or(true, |(_, b)| metrics.epe < b.epe);
            if better {
                best = Some((store.value(pid).clone(), metrics));
            }
        }
    }
    best.ok_or_else(|| MumError::contract("train_probe", "no evaluation happened"))
}

/// [`train_probe_with_eval`] trained and evaluated on the same pairs.
pub fn train_probe(pairs: &[ProbePair], cfg: &ProbeConfig) -> Result<(Array, MatchMetrics)> {
    train_probe_with_eval(pairs, pairs, cfg)
}

/// Write per-pair metrics rows plus a micro-averaged summary row:
/// `pair_id,epe,robustness,n_valid`.
pub fn write_probe_csv(
    path: &Path,
    rows: &[(String, MatchMetrics)],
    summary: &MatchMetrics,
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "pair_id,epe,robustness,n_valid")?;
    for (id, m) in rows {
        writeln!(f, "{id},{},{},{}", m.epe, m.robustness, m.n_valid)?;
    }
    writeln!(
        f,
        "summary,{},{},{}",
        summary.epe, summary.robustness, summary.n_valid
    )?;
    f.flush()?;
    Ok(())
}
