//! Reconstruction and distillation losses.

use crate::error::{MumError, Result};
use crate::masking::PatchMask;
use crate::numerics::{Array, Tape, Var};

/// Mean squared error over all (masked patch, pixel) entries across views:
/// sum_i ||M_i ⊙ (pred_i - target_i)||² divided by (total masked patches ×
/// patch_dim). Unmasked patches contribute nothing; no masked patches means
/// a loss of exactly 0.
///
/// `preds`/`targets` are (S, N, patch_dim) or the flattened (S·N, patch_dim).
pub fn mum_loss(preds: &Array, targets: &Array, masks: &[PatchMask]) -> Result<f64> {
    if preds.shape() != targets.shape() {
        return Err(MumError::DimensionMismatch {
            op: "mum_loss",
            lhs: preds.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let s = masks.len();
    if s == 0 {
        return Err(MumError::contract("mum_loss", "no masks"));
    }
    let n = masks[0].n();
    if masks.iter().any(|m| m.n() != n) {
        return Err(MumError::contract("mum_loss", "masks disagree on N"));
    }
    let pd = match preds.shape() {
        [vs, vn, pd] if *vs == s && *vn == n => *pd,
        [rows, pd] if *rows == s * n => *pd,
        _ => {
            return Err(MumError::Shape {
                op: "mum_loss",
                shape: preds.shape().to_vec(),
                reason: format!("expected ({s}, {n}, patch_dim) or ({}, patch_dim)", s * n),
            })
        }
    };
    let mut total_sq = 0.0;
    let mut masked_patches = 0usize;
    for (i, mask) in masks.iter().enumerate() {
        for k in 0..n {
            if !mask.bits[k] {
                continue;
            }
            masked_patches += 1;
            let base = (i * n + k) * pd;
            for d in 0..pd {
                let diff = preds.data()[base + d] - targets.data()[base + d];
                total_sq += diff * diff;
            }
        }
    }
    if masked_patches == 0 {
        return Ok(0.0);
    }
    Ok(total_sq / (masked_patches * pd) as f64)
}

/// One batch row for the differentiable loss: predictions on the tape plus
/// the constant targets and per-view masks.
pub struct LossRow {
    /// (S·N, patch_dim) predictions, view-major.
    pub preds: Var,
    /// (S·N, patch_dim) targets.
    pub targets: Array,
    pub masks: Vec<PatchMask>,
}

/// Differentiable batch version of [`mum_loss`]: the mean runs over every
/// masked patch-pixel of every row. Gradients w.r.t. unmasked predictions
/// are exactly zero because those rows are never gathered.
pub fn mum_loss_tape(tape: &mut Tape, rows: &[LossRow]) -> Result<Var> {
    if rows.is_empty() {
        return Err(MumError::contract("mum_loss", "no rows"));
    }
    let mut parts = Vec::new();
    let mut masked_patches = 0usize;
    let mut patch_dim = None;
    for row in rows {
        let (total, pd) = tape.value(row.preds).dims2("mum_loss")?;
        if row.targets.shape() != [total, pd] {
            return Err(MumError::DimensionMismatch {
                op: "mum_loss",
                lhs: tape.value(row.preds).shape().to_vec(),
                rhs: row.targets.shape().to_vec(),
            });
        }
        let n: usize = row.masks.iter().map(PatchMask::n).sum();
        if n != total {
            return Err(MumError::contract(
                "mum_loss",
                format!("masks cover {n} patches, predictions have {total}"),
            ));
        }
        patch_dim = Some(pd);
        let per_view_n = row.masks.first().map(PatchMask::n).unwrap_or(0);
        let mut indices = Vec::new();
        for (i, mask) in row.masks.iter().enumerate() {
            for k in 0..mask.n() {
                if mask.bits[k] {
                    indices.push(i * per_view_n + k);
                }
            }
        }
        if indices.is_empty() {
            continue;
        }
        masked_patches += indices.len();
        let p = tape.gather_rows(row.preds, &indices)?;
        let t = {
            let mut data = Vec::with_capacity(indices.len() * pd);
            for &idx in &indices {
                data.extend_from_slice(&row.targets.data()[idx * pd..(idx + 1) * pd]);
            }
            tape.constant(Array::from_vec(&[indices.len(), pd], data)?)
        };
        let d = tape.sub(p, t)?;
        parts.push(d);
    }
    if masked_patches == 0 {
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let diffs = tape.concat_rows(&parts)?;
    let sq = tape.mul(diffs, diffs)?;
    let total = tape.sum_all(sq);
    let pd = patch_dim.expect("at least one row");
    Ok(tape.scale(total, 1.0 / (masked_patches * pd) as f64))
}

/// Per-frame student/teacher prediction triple: world points, camera
/// parameters, and depth maps.
#[derive(Clone, Debug)]
pub struct DistillTriple {
    pub points: Array,
    pub cameras: Array,
    pub depths: Array,
}

/// Unweighted, unnormalized squared-error distillation loss summed over
/// frames: Σ ||P_t - P_s||² + ||C_t - C_s||² + ||D_t - D_s||².
pub fn distill_loss(student: &DistillTriple, teacher: &DistillTriple) -> Result<f64> {
    let mut total = 0.0;
    for (op, s, t) in [
        ("distill_loss.points", &student.points, &teacher.points),
        ("distill_loss.cameras", &student.cameras, &teacher.cameras),
        ("distill_loss.depths", &student.depths, &teacher.depths),
    ] {
        if s.shape() != t.shape() {
            return Err(MumError::DimensionMismatch {
                op,
                lhs: s.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        total += s
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}
