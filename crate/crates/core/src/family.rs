//! The contract every optimization task implements, and the tape operations
//! that differentiate through an equality completion.
//!
//! A family describes `min f_x(y) s.t. g_x(y) ≤ 0, h_x(y) = 0` for a batch of
//! problem inputs `x`. Of the `n` decision variables, `m = n − n_eq` are
//! *partial* variables `z`; the rest are recovered by [`ProblemFamily::complete`]
//! so that `h_x(y) = 0` holds. The completion hands back a
//! [`Linearization`] of `z ↦ y` at the solution, which is all the engine
//! needs to backpropagate through it or to step along the equality manifold.

use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::linalg::LinalgError;
use crate::tensor::{Tensor, TensorError};
use crate::tensor_io::TensorFileError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Decision variables.
    pub n: usize,
    /// Problem input width.
    pub d: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
}

impl Dims {
    /// Number of partial variables the network predicts.
    pub fn m(&self) -> usize {
        self.n - self.n_eq
    }
}

#[derive(Debug, Error)]
pub enum FamilyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("completion failed: {0}")]
    Completion(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("file: {0}")]
    File(#[from] TensorFileError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Derivatives of the completion map `z ↦ y` at a completed batch.
pub trait Linearization: Send + Sync {
    /// `dℓ/dz` for each row given `dℓ/dy` (`batch × n` → `batch × m`).
    fn vjp(&self, dy: &Tensor) -> Result<Tensor, TensorError>;
    /// `(∂y/∂z)·dz` for each row (`batch × m` → `batch × n`).
    fn jvp(&self, dz: &Tensor) -> Result<Tensor, TensorError>;
}

/// A completed batch.
pub struct Completion {
    /// Full decision vectors, `batch × n`.
    pub y: Tensor,
    /// Per-row convergence of the completion solve; linear completions
    /// always converge.
    pub converged: Vec<bool>,
    pub linearization: Arc<dyn Linearization>,
}

impl Completion {
    pub fn converged_fraction(&self) -> f64 {
        if self.converged.is_empty() {
            return 1.0;
        }
        self.converged.iter().filter(|c| **c).count() as f64 / self.converged.len() as f64
    }
}

pub trait ProblemFamily: Send + Sync {
    fn name(&self) -> &str;

    fn dims(&self) -> Dims;

    /// `f_x(y)` per row, `batch × 1`.
    fn objective(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError>;

    /// `h_x(y)`, `batch × n_eq`; zero at feasibility.
    fn eq_resid(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError>;

    /// `g_x(y)`, `batch × n_ineq`; non-positive at feasibility.
    fn ineq_resid(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError>;

    /// Jacobian of `g_x` with respect to `y`, `n_ineq × n`. Every supported
    /// family has inequality constraints that are affine in `y`.
    fn ineq_jacobian(&self) -> &Tensor;

    /// `∇_y ‖h_x(y)‖²` per row, recorded on the tape.
    fn eq_penalty_grad(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError>;

    /// Solve the equalities for the dependent variables given partial
    /// variables `z` (`batch × m`). `warm` is an earlier full `y` for the same
    /// rows that iterative completions may start from.
    fn complete(&self, x: &Tensor, z: &Tensor, warm: Option<&Tensor>) -> Result<Completion, FamilyError>;

    /// The partial coordinates of full vectors `y`.
    fn partial_of(&self, y: &Tensor) -> Tensor;

    /// Map raw network outputs (`batch × m`) to partial variables.
    fn decode_partial(&self, _tape: &mut Tape, raw: Var) -> Result<Var, TensorError> {
        Ok(raw)
    }

    /// A partial point from which the reference solvers start, per row of `x`.
    fn reference_start(&self, x: &Tensor) -> Result<Tensor, FamilyError>;

    /// `count` problem inputs drawn from the family's input distribution.
    fn sample_inputs(&self, count: usize, seed: u64) -> Tensor;
}

struct CompleteOp {
    lin: Arc<dyn Linearization>,
}

impl CustomOp for CompleteOp {
    fn name(&self) -> &'static str {
        "complete"
    }

    fn backward(&self, upstream: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>, TensorError> {
        Ok(vec![Some(self.lin.vjp(upstream)?)])
    }
}

struct VjpOp {
    lin: Arc<dyn Linearization>,
}

impl CustomOp for VjpOp {
    fn name(&self) -> &'static str {
        "completion_vjp"
    }

    // The vjp is linear in `dy`; its adjoint is the jvp. Dependence of the
    // linearization point on earlier nodes is not propagated, which is exact
    // for affine completions.
    fn backward(&self, upstream: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>, TensorError> {
        Ok(vec![Some(self.lin.jvp(upstream)?)])
    }
}

/// Complete `z` on the tape; the returned node's gradient flows back to `z`
/// through the family's implicit derivative.
pub fn complete_on_tape(
    tape: &mut Tape,
    family: &dyn ProblemFamily,
    x: &Tensor,
    z: Var,
    warm: Option<&Tensor>,
) -> Result<(Var, Completion), FamilyError> {
    let completion = family.complete(x, tape.value(z), warm)?;
    let op = CompleteOp { lin: completion.linearization.clone() };
    let y = tape.custom(Box::new(op), &[z], completion.y.clone())?;
    Ok((y, completion))
}

/// `dℓ/dz` from `dℓ/dy` through a completion, recorded so that the result is
/// itself differentiable (needed when correction steps are unrolled).
pub fn completion_vjp_on_tape(
    tape: &mut Tape,
    lin: &Arc<dyn Linearization>,
    dy: Var,
) -> Result<Var, TensorError> {
    let value = lin.vjp(tape.value(dy))?;
    tape.custom(Box::new(VjpOp { lin: lin.clone() }), &[dy], value)
}

/// Objective, equality and inequality residuals of a batch as plain values.
pub struct Evaluated {
    pub objective: Tensor,
    pub eq: Tensor,
    pub ineq: Tensor,
}

pub fn evaluate_point(family: &dyn ProblemFamily, x: &Tensor, y: &Tensor) -> Result<Evaluated, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let f = family.objective(&mut tape, xv, yv)?;
    let h = family.eq_resid(&mut tape, xv, yv)?;
    let g = family.ineq_resid(&mut tape, xv, yv)?;
    Ok(Evaluated {
        objective: tape.value(f).clone(),
        eq: tape.value(h).clone(),
        ineq: tape.value(g).clone(),
    })
}

/// Per-row `max(max |h|, max ReLU(g))`.
pub fn max_violation_per_row(eq: &Tensor, ineq: &Tensor) -> Vec<f64> {
    (0..eq.rows().max(ineq.rows()))
        .map(|i| {
            let e = if eq.cols() > 0 { eq.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs())) } else { 0.0 };
            let g = if ineq.cols() > 0 { ineq.row(i).iter().fold(0.0f64, |a, v| a.max(*v)) } else { 0.0 };
            e.max(g)
        })
        .collect()
}
