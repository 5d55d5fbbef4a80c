//! Training: objective configuration, the AdamW/cosine recipe, the step
//! loop, metrics emission, and checkpointing.
//!
//! Every stochastic draw of step `k` comes from a stream keyed by
//! `(seed, stream, k)`, so a run resumed from a step-`k` checkpoint replays
//! the exact trajectory of an uninterrupted run. One optimizer step is
//! atomic; parameters are only mutated between forward passes.

pub mod adamw;
pub mod checkpoint;
pub mod loss;
pub mod schedule;

pub use adamw::{adamw_step, clip_global_norm, OptimizerState, ADAM_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{distill_loss, mum_loss, mum_loss_tape, DistillTriple, LossRow};
pub use schedule::{lr_at, peak_lr};

use serde::{Deserialize, Serialize};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{MumError, Result};
use crate::masking::{apply_reference_view, patchify, sample_mask, MaskedViewTokens, PatchGrid};
use crate::model::{forward, ModelParams};
use crate::numerics::{Array, Tape};
use crate::rng::Rng;
use crate::sampler::{compose_batch, SamplerConfig};
use crate::scene::{FrameRecord, SceneSequence};

/// Rng stream ids used by the training loop.
pub mod streams {
    pub const SAMPLER: u64 = 11;
    pub const MASKS: u64 = 12;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Batch size plugged into the linear scaling rule (frames per device
    /// unless overridden).
    pub batch_size_for_scaling: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub min_lr: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            batch_size_for_scaling: 96,
            warmup_steps: 25_000,
            total_steps: 500_000,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            min_lr: 0.0,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.base_lr <= 0.0 {
            out.push("train.base_lr must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            out.push(format!(
                "train.warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size_for_scaling == 0 {
            out.push("train.batch_size_for_scaling must be positive".into());
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("train.{name} must lie in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 {
            out.push("train.weight_decay must be >= 0".into());
        }
        if self.min_lr < 0.0 {
            out.push("train.min_lr must be >= 0".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                out.push("train.grad_clip must be positive when set".into());
            }
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

/// Objective knobs: the uniform masking ratio, the unmasked-reference-view
/// toggle, and target normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub mask_ratio: f64,
    pub reference_view: bool,
    pub normalize_target: bool,
    pub target_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mask_ratio: 0.75,
            reference_view: false,
            normalize_target: true,
            target_eps: 1e-6,
        }
    }
}

impl ObjectiveConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            out.push("objective.mask_ratio must lie in [0, 1]".into());
        }
        if self.target_eps <= 0.0 {
            out.push("objective.target_eps must be positive".into());
        }
        out
    }
}

/// Artifact emission knobs for [`train`].
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub log_interval: usize,
    pub ckpt_interval: Option<usize>,
    /// Directory receiving periodic/final/diagnostic checkpoints.
    pub out_dir: Option<PathBuf>,
    /// CSV file receiving `step,loss,lr` rows.
    pub metrics_path: Option<PathBuf>,
    pub start_step: usize,
    /// Stop after this step even though the schedule runs to `total_steps`
    /// (the learning-rate curve is unaffected). The final checkpoint is
    /// written as usual, so a later run can resume from it.
    pub stop_at_step: Option<usize>,
    /// Cooperative stop: when set, finish the current step, checkpoint, and
    /// return early.
    pub stop_flag: Option<Arc<AtomicBool>>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            log_interval: 10,
            ckpt_interval: None,
            out_dir: None,
            metrics_path: None,
            start_step: 0,
            stop_at_step: None,
            stop_flag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval: Option<(f64, f64)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub final_step: usize,
    pub stopped_early: bool,
    pub final_checkpoint: Option<PathBuf>,
}

/// Periodic evaluation callback: `(step, model) -> (epe, robustness)`.
pub type EvalHook<'a> = dyn FnMut(usize, &ModelParams) -> Result<(f64, f64)> + 'a;

/// Collect every configuration problem across the training setup; training
/// never starts compute with an invalid configuration.
pub fn validate_training_setup(
    patch_size: usize,
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    objective: &ObjectiveConfig,
) -> Result<()> {
    let mut problems = train_cfg.problems();
    problems.extend(sampler_cfg.problems());
    problems.extend(objective.problems());
    if patch_size > 0 && sampler_cfg.image_size % patch_size != 0 {
        problems.push(format!(
            "sampler.image_size {} is not a multiple of model.patch_size {patch_size}",
            sampler_cfg.image_size
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(MumError::config(problems))
    }
}

struct MetricsWriter {
    file: Option<BufWriter<File>>,
    with_eval: bool,
}

impl MetricsWriter {
    fn create(path: Option<&PathBuf>, with_eval: bool) -> Result<MetricsWriter> {
        let file = match path {
            Some(p) => {
                let mut f = BufWriter::new(File::create(p)?);
                if with_eval {
                    writeln!(f, "step,loss,lr,eval_epe,eval_robustness")?;
                } else {
                    writeln!(f, "step,loss,lr")?;
                }
                Some(f)
            }
            None => None,
        };
        Ok(MetricsWriter { file, with_eval })
    }

    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            if self.with_eval {
                match row.eval {
                    Some((epe, rob)) => {
                        writeln!(f, "{},{},{},{},{}", row.step, row.loss, row.lr, epe, rob)?
                    }
                    None => writeln!(f, "{},{},{},,", row.step, row.loss, row.lr)?,
                }
            } else {
                writeln!(f, "{},{},{}", row.step, row.loss, row.lr)?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

/// Run the pretraining loop: compose a batch, sample fresh masks, build
/// normalized targets, forward, reconstruct-loss, backward, clip, AdamW at
/// the scheduled rate. Returns the logged metrics; non-finite losses abort
/// after writing a diagnostic checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    pool: &[SceneSequence],
    single_view_pool: &[FrameRecord],
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    objective: &ObjectiveConfig,
    opts: &TrainOptions,
    mut eval: Option<(usize, &mut EvalHook)>,
) -> Result<TrainOutcome> {
    validate_training_setup(model.cfg.patch_size, train_cfg, sampler_cfg, objective)?;
    let grid = PatchGrid::for_image(
        sampler_cfg.image_size,
        sampler_cfg.image_size,
        model.cfg.patch_size,
    )?;

    let mut writer = MetricsWriter::create(opts.metrics_path.as_ref(), eval.is_some())?;
    let mut metrics = Vec::new();
    let mut stopped_early = false;
    let mut last_step = opts.start_step;
    let end_step = opts
        .stop_at_step
        .map_or(train_cfg.total_steps, |s| s.min(train_cfg.total_steps));

    for step in opts.start_step..end_step {
        if let Some(flag) = &opts.stop_flag {
            if flag.load(Ordering::SeqCst) {
                stopped_early = true;
                break;
            }
        }
        let mut sample_rng = Rng::stream(train_cfg.seed, streams::SAMPLER, step as u64);
        let mut mask_rng = Rng::stream(train_cfg.seed, streams::MASKS, step as u64);
        let batch = compose_batch(pool, single_view_pool, sampler_cfg, &mut sample_rng)?;

        let mut tape = Tape::new();
        let pv = model.tape_vars(&mut tape, true);
        let mut rows = Vec::with_capacity(batch.rows());
        for b in 0..batch.rows() {
            let s = batch.views();
            let mut masks = Vec::with_capacity(s);
            for _ in 0..s {
                masks.push(sample_mask(grid.n(), objective.mask_ratio, &mut mask_rng)?);
            }
            let masks = apply_reference_view(masks, objective.reference_view);
            let mut views = Vec::with_capacity(s);
            let mut targets = Vec::with_capacity(s * grid.n() * grid.patch_dim());
            for (v, mask) in masks.iter().enumerate() {
                let patches = patchify(&batch.frame(b, v), &grid)?;
                let view = MaskedViewTokens::new(
                    &patches,
                    mask,
                    objective.normalize_target,
                    objective.target_eps,
                )?;
                targets.extend_from_slice(view.target.data());
                views.push(view);
            }
            let preds = forward(&mut tape, model, &pv, &views, &masks, &grid)?;
            rows.push(LossRow {
                preds,
                targets: Array::from_vec(&[s * grid.n(), grid.patch_dim()], targets)?,
                masks,
            });
        }
        let loss_var = mum_loss_tape(&mut tape, &rows)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            if let Some(dir) = &opts.out_dir {
                let diag = dir.join(format!("diag-step-{step:06}"));
                save_checkpoint(&diag, model, Some(opt), step)?;
            }
            return Err(MumError::NonFinite {
                what: "loss",
                name: format!("training step {step}"),
            });
        }

        let mut grads_by_var = tape.backward(loss_var)?;
        let mut grads: Vec<Option<Array>> =
            pv.all().iter().map(|&v| grads_by_var.take(v)).collect();
        if let Some(clip) = train_cfg.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        let lr = lr_at(step, train_cfg)?;
        adamw_step(&mut model.store, &grads, opt, lr, train_cfg)?;

        let completed = step + 1;
        last_step = completed;
        let mut eval_result = None;
        if let Some((interval, hook)) = eval.as_mut() {
            if *interval > 0 && completed % *interval == 0 {
                eval_result = Some(hook(completed, model)?);
            }
        }
        if completed % opts.log_interval == 0 || eval_result.is_some() {
            let row = MetricsRow {
                step: completed,
                loss,
                lr,
                eval: eval_result,
            };
            writer.row(&row)?;
            metrics.push(row);
        }
        if let (Some(interval), Some(dir)) = (opts.ckpt_interval, &opts.out_dir) {
            if interval > 0 && completed % interval == 0 && completed != train_cfg.total_steps {
                save_checkpoint(
                    &dir.join(format!("step-{completed:06}")),
                    model,
                    Some(opt),
                    completed,
                )?;
            }
        }
    }

    let final_checkpoint = match &opts.out_dir {
        Some(dir) => {
            let name = if stopped_early {
                format!("interrupted-{last_step:06}")
            } else {
                "final".to_string()
            };
            let path = dir.join(name);
            save_checkpoint(&path, model, Some(opt), last_step)?;
            Some(path)
        }
        None => None,
    };

    Ok(TrainOutcome {
        metrics,
        final_step: last_step,
        stopped_early,
        final_checkpoint,
    })
}

/// Convenience wrapper: initialize a model and optimizer from seeds and run
/// [`train`] from step 0.
#[allow(clippy::too_many_arguments)]
pub fn train_from_scratch(
    model_cfg: &crate::model::ModelConfig,
    pool: &[SceneSequence],
    single_view_pool: &[FrameRecord],
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    objective: &ObjectiveConfig,
    opts: &TrainOptions,
) -> Result<(ModelParams, OptimizerState, TrainOutcome)> {
    model_cfg.validate()?;
    validate_training_setup(model_cfg.patch_size, train_cfg, sampler_cfg, objective)?;
    let grid = PatchGrid::for_image(
        sampler_cfg.image_size,
        sampler_cfg.image_size,
        model_cfg.patch_size,
    )?;
    let mut model = ModelParams::init(model_cfg, &grid, train_cfg.seed)?;
    let mut opt = OptimizerState::new(&model.store);
    let outcome = train(
        &mut model,
        &mut opt,
        pool,
        single_view_pool,
        train_cfg,
        sampler_cfg,
        objective,
        opts,
        None,
    )?;
    Ok((model, opt, outcome))
}
