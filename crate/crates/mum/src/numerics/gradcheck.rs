//! Central finite-difference gradient checking.
//!
//! The oracle evaluates the forward function only (never the backward path it
//! certifies) and compares `(f(x+eps) - f(x-eps)) / (2 eps)` against the
//! analytic gradient at 64-bit precision.

use crate::error::{MumError, Result};
use crate::numerics::array::Array;
use crate::numerics::tape::{Tape, Var};

/// Result of checking one input array.
#[derive(Clone, Debug)]
pub struct InputCheck {
    /// Largest relative error over checkable elements; 0 when none differ.
    pub max_rel_err: f64,
    /// Element index achieving `max_rel_err` with both gradient values.
    pub worst: Option<(usize, f64, f64)>,
    /// Elements where one-sided differences disagree: the function is not
    /// smooth there and central differences are meaningless.
    pub non_checkable: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub eps: f64,
}

impl GradCheckReport {
    /// Largest relative error over every checkable element of every input.
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn any_non_checkable(&self) -> bool {
        self.inputs.iter().any(|c| !c.non_checkable.is_empty())
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, c) in self.inputs.iter().enumerate() {
            write!(f, "input {i}: max rel err {:.3e}", c.max_rel_err)?;
            if let Some((idx, a, n)) = c.worst {
                write!(f, " at [{idx}] (analytic {a:.6e}, numeric {n:.6e})")?;
            }
            if !c.non_checkable.is_empty() {
                write!(f, "; {} non-checkable point(s)", c.non_checkable.len())?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

// One-sided difference disagreement thresholds marking a non-smooth point.
const DISAGREE_ABS: f64 = 1e-3;
const DISAGREE_REL: f64 = 0.5;
// Relative error denominator floor: comparing against
// max(|analytic|, |numeric|, REL_FLOOR) makes a relative tolerance of 1e-4
// act as an absolute tolerance of 1e-8 on near-zero gradients, where central
// differences are limited by cancellation noise rather than by the gradient.
const REL_FLOOR: f64 = 1e-4;

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` must build a deterministic scalar from the given tape leaves. Every
/// element of every input is perturbed by ±eps.
pub fn grad_check<F>(f: &F, inputs: &[Array], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(MumError::contract("grad_check", "eps must be positive"));
    }

    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
        let root = f(&mut tape, &vars)?;
        if tape.value(root).len() != 1 {
            return Err(MumError::contract(
                "grad_check",
                format!(
                    "fn output must be scalar, got {:?}",
                    tape.value(root).shape()
                ),
            ));
        }
        Ok(tape.value(root).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(MumError::contract(
            "grad_check",
            format!(
                "fn output must be scalar, got {:?}",
                tape.value(root).shape()
            ),
        ));
    }
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, a)| grads.take(v).unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let f0 = tape.value(root).item();
    let mut work: Vec<Array> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut check = InputCheck {
            max_rel_err: 0.0,
            worst: None,
            non_checkable: Vec::new(),
        };
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let fwd = (fp - f0) / eps;
            let bwd = (f0 - fm) / eps;
            let disagree = (fwd - bwd).abs();
            if disagree > DISAGREE_ABS
                && disagree / fwd.abs().max(bwd.abs()).max(REL_FLOOR) > DISAGREE_REL
            {
                check.non_checkable.push(j);
                continue;
            }

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            debug_assert!(rel.is_finite());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = Some((j, a, numeric));
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        inputs: report,
        eps,
    })
}
