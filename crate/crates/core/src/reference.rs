//! Reference optimizers used to score learned solvers and to produce
//! supervised labels.
//!
//! * [`AdmmSolver`]: operator splitting for `min ½yᵀPy + qᵀy s.t. l ≤ My ≤ u`
//!   with `P` diagonal, factorizing the regularized KKT matrix once per
//!   family and again only when the penalty is rescaled.
//! * [`solve_reduced_barrier`]: log-barrier over the partial variables of
//!   any [`ProblemFamily`], with equalities eliminated by the completion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::family::{FamilyError, ProblemFamily};
use crate::linalg::to_dmatrix;
use crate::qp::{ObjectiveKind, QpFamily};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("KKT matrix is not positive definite")]
    Factorization,
    #[error("unsupported problem: {0}")]
    Unsupported(String),
    #[error("no strictly feasible starting point found")]
    NoInteriorStart,
    #[error("instances {0:?} were not solved")]
    Unsolved(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Rescale the penalty from the ratio of primal and dual residuals.
    pub adaptive_rho: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            max_iter: 20_000,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            adaptive_rho: true,
        }
    }
}

/// Penalty multiplier for equality rows.
const EQ_RHO_SCALE: f64 = 1e3;
const CHECK_EVERY: usize = 10;
const ADAPT_EVERY: usize = 50;

#[derive(Debug, Clone)]
pub struct Solution {
    pub y: Vec<f64>,
    pub objective: f64,
    pub status: Status,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

pub struct AdmmSolver {
    p_diag: Vec<f64>,
    q: DVector<f64>,
    m: DMatrix<f64>,
    n_eq: usize,
    h: Vec<f64>,
    settings: AdmmSettings,
    chol: Cholesky<f64, Dyn>,
}

impl AdmmSolver {
    /// Problem `min ½yᵀdiag(p_diag)y + qᵀy s.t. Ay = x, Gy ≤ h`; `x` is given
    /// per solve.
    pub fn new(
        p_diag: &[f64],
        q: &[f64],
        a: &Tensor,
        g: &Tensor,
        h: &[f64],
        settings: AdmmSettings,
    ) -> Result<Self, SolverError> {
        let n = p_diag.len();
        if q.len() != n || (a.rows() > 0 && a.cols() != n) || (g.rows() > 0 && g.cols() != n) || h.len() != g.rows() {
            return Err(TensorError::shape("admm", &[&[n], a.shape(), g.shape()]).into());
        }
        if !(settings.rho > 0.0 && settings.sigma > 0.0 && settings.alpha > 0.0 && settings.alpha < 2.0) {
            return Err(SolverError::Unsupported("ADMM settings out of range".into()));
        }
        let mut m = DMatrix::zeros(a.rows() + g.rows(), n);
        if a.rows() > 0 {
            m.rows_mut(0, a.rows()).copy_from(&to_dmatrix(a));
        }
        if g.rows() > 0 {
            m.rows_mut(a.rows(), g.rows()).copy_from(&to_dmatrix(g));
        }
        let rho = Self::rho_vector(a.rows(), m.nrows(), settings.rho);
        let chol = Self::factor(p_diag, &m, &rho, settings.sigma)?;
        Ok(AdmmSolver {
            p_diag: p_diag.to_vec(),
            q: DVector::from_column_slice(q),
            m,
            n_eq: a.rows(),
            h: h.to_vec(),
            settings,
            chol,
        })
    }

    /// Solver for a quadratic-objective family.
    pub fn for_family(family: &QpFamily, settings: AdmmSettings) -> Result<Self, SolverError> {
        if family.kind != ObjectiveKind::Quadratic {
            return Err(SolverError::Unsupported("ADMM needs a quadratic objective".into()));
        }
        Self::new(family.q_diag.data(), family.p.data(), &family.a, &family.g, family.h.data(), settings)
    }

    fn rho_vector(n_eq: usize, rows: usize, rho: f64) -> Vec<f64> {
        (0..rows).map(|i| if i < n_eq { rho * EQ_RHO_SCALE } else { rho }).collect()
    }

    fn factor(p_diag: &[f64], m: &DMatrix<f64>, rho: &[f64], sigma: f64) -> Result<Cholesky<f64, Dyn>, SolverError> {
        let n = p_diag.len();
        let mut k = DMatrix::zeros(n, n);
        if m.nrows() > 0 {
            let mut rm = m.clone();
            for (i, r) in rho.iter().enumerate() {
                rm.row_mut(i).scale_mut(*r);
            }
            k = m.transpose() * rm;
        }
        for i in 0..n {
            k[(i, i)] += p_diag[i] + sigma;
        }
        Cholesky::new(k).ok_or(SolverError::Factorization)
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.p_diag).zip(self.q.iter()).map(|((v, p), q)| 0.5 * p * v * v + q * v).sum()
    }

    /// Solve for equality right-hand side `x`.
    pub fn solve(&self, x: &[f64]) -> Result<Solution, SolverError> {
        if x.len() != self.n_eq {
            return Err(TensorError::shape("admm_solve", &[&[x.len()], &[self.n_eq]]).into());
        }
        let s = &self.settings;
        let (n, rows) = (self.p_diag.len(), self.m.nrows());
        let lower: Vec<f64> = (0..rows).map(|i| if i < self.n_eq { x[i] } else { f64::NEG_INFINITY }).collect();
        let upper: Vec<f64> = (0..rows).map(|i| if i < self.n_eq { x[i] } else { self.h[i - self.n_eq] }).collect();
        let mut rho_scalar = s.rho;
        let mut rho = Self::rho_vector(self.n_eq, rows, rho_scalar);
        let mut local_chol: Option<Cholesky<f64, Dyn>> = None;

        let mut y = DVector::zeros(n);
        let mut z = DVector::<f64>::zeros(rows);
        let mut lam = DVector::<f64>::zeros(rows);
        let mut best: Option<(f64, DVector<f64>, f64, f64)> = None;
        let mut last = (f64::INFINITY, f64::INFINITY);
        for it in 1..=s.max_iter {
            let mut w = DVector::zeros(rows);
            for i in 0..rows {
                w[i] = rho[i] * z[i] - lam[i];
            }
            let rhs = &y * s.sigma - &self.q + self.m.tr_mul(&w);
            let yt = match &local_chol {
                Some(c) => c.solve(&rhs),
                None => self.chol.solve(&rhs),
            };
            let zt = &self.m * &yt;
            y = &yt * s.alpha + &y * (1.0 - s.alpha);
            for i in 0..rows {
                let zr: f64 = s.alpha * zt[i] + (1.0 - s.alpha) * z[i];
                let zn = (zr + lam[i] / rho[i]).clamp(lower[i], upper[i]);
                lam[i] += rho[i] * (zr - zn);
                z[i] = zn;
            }
            if it % CHECK_EVERY != 0 && it != s.max_iter {
                continue;
            }
            let my = &self.m * &y;
            let py = DVector::from_iterator(n, y.iter().zip(&self.p_diag).map(|(v, p)| v * p));
            let mtl = self.m.tr_mul(&lam);
            let prim = (&my - &z).amax();
            let dual = (&py + &self.q + &mtl).amax();
            last = (prim, dual);
            let eps_p = s.eps_abs + s.eps_rel * my.amax().max(z.amax());
            let eps_d = s.eps_abs + s.eps_rel * py.amax().max(mtl.amax()).max(self.q.amax());
            let score = (prim / eps_p).max(dual / eps_d);
            if best.as_ref().map_or(true, |b| score < b.0) {
                best = Some((score, y.clone(), prim, dual));
            }
            if prim <= eps_p && dual <= eps_d {
                let yv: Vec<f64> = y.iter().copied().collect();
                return Ok(Solution {
                    objective: self.objective(&yv),
                    y: yv,
                    status: Status::Optimal,
                    iterations: it,
                    primal_residual: prim,
                    dual_residual: dual,
                });
            }
            if s.adaptive_rho && it % ADAPT_EVERY == 0 {
                let pn = prim / my.amax().max(z.amax()).max(1e-12);
                let dn = dual / py.amax().max(mtl.amax()).max(self.q.amax()).max(1e-12);
                let scale = (pn / dn.max(1e-12)).sqrt();
                if !(0.2..=5.0).contains(&scale) {
                    rho_scalar = (rho_scalar * scale).clamp(1e-6, 1e6);
                    rho = Self::rho_vector(self.n_eq, rows, rho_scalar);
                    local_chol = Some(Self::factor(&self.p_diag, &self.m, &rho, s.sigma)?);
                }
            }
        }
        let (_, yb, prim, dual) = best.unwrap_or((f64::INFINITY, y, last.0, last.1));
        let yv: Vec<f64> = yb.iter().copied().collect();
        Ok(Solution {
            objective: self.objective(&yv),
            y: yv,
            status: Status::MaxIterations,
            iterations: s.max_iter,
            primal_residual: prim,
            dual_residual: dual,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSettings {
    pub mu0: f64,
    pub mu_factor: f64,
    pub rounds: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub shrink: f64,
    pub stationarity_tol: f64,
    pub max_inner: usize,
    /// Number of starts; the best final objective is kept.
    pub starts: usize,
    pub start_perturbation: f64,
    pub seed: u64,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        BarrierSettings {
            mu0: 1.0,
            mu_factor: 0.2,
            rounds: 8,
            armijo: 1e-4,
            shrink: 0.5,
            stationarity_tol: 1e-6,
            max_inner: 2000,
            starts: 3,
            start_perturbation: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub objective: f64,
    pub status: Status,
    /// Norm of the gradient of the final barrier subproblem.
    pub stationarity: f64,
    pub max_ineq: f64,
}

/// One instance (`x` is `1 × d`) of a family, evaluated through completion.
struct Reduced<'a> {
    family: &'a dyn ProblemFamily,
    x: Tensor,
    m: usize,
}

struct Point {
    y: Tensor,
    f: f64,
    g: Vec<f64>,
    lin: std::sync::Arc<dyn crate::family::Linearization>,
}

impl Reduced<'_> {
    fn point(&self, z: &[f64]) -> Option<Point> {
        let zt = Tensor::row_vector(z);
        // No warm start: an iterative completion must be a function of z alone.
        let c = self.family.complete(&self.x, &zt, None).ok()?;
        if !c.converged[0] || !c.y.all_finite() {
            return None;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(self.x.clone());
        let yv = tape.constant(c.y.clone());
        let f = self.family.objective(&mut tape, xv, yv).ok()?;
        let g = self.family.ineq_resid(&mut tape, xv, yv).ok()?;
        let (f, g) = (tape.value(f).item(), tape.value(g).data().to_vec());
        Some(Point { y: c.y, f, g, lin: c.linearization })
    }

    /// Gradient in `z` of `w_f·f(y) + Σ_i c_i g_i(y)` at a point.
    fn grad(&self, p: &Point, w_f: f64, coef: &[f64]) -> Option<Vec<f64>> {
        let mut dy = vec![0.0; p.y.cols()];
        if w_f != 0.0 {
            let mut tape = Tape::new();
            let xv = tape.constant(self.x.clone());
            let yv = tape.leaf(p.y.clone());
            let f = self.family.objective(&mut tape, xv, yv).ok()?;
            let s = tape.sum(f).ok()?;
            let gr = tape.backward(s).ok()?;
            for (d, v) in dy.iter_mut().zip(gr.get(yv)?.data()) {
                *d += w_f * v;
            }
        }
        let jac = self.family.ineq_jacobian();
        for (i, c) in coef.iter().enumerate() {
            if *c != 0.0 {
                for (d, v) in dy.iter_mut().zip(jac.row(i)) {
                    *d += c * v;
                }
            }
        }
        let dz = p.lin.vjp(&Tensor::row_vector(&dy)).ok()?;
        debug_assert_eq!(dz.cols(), self.m);
        Some(dz.into_data())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with Armijo backtracking. `eval` returns `None` outside the domain,
/// which the line search treats as an infinite value. Returns the final point,
/// value and gradient norm.
fn bfgs(
    mut eval: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    tol: f64,
    max_iter: usize,
    armijo: f64,
    shrink: f64,
    stop_value: Option<f64>,
) -> Option<(Vec<f64>, f64, f64)> {
    let n = x0.len();
    let (mut fx, mut gx) = eval(&x0)?;
    let mut x = x0;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        let gn = norm(&gx);
        if gn <= tol || stop_value.is_some_and(|s| fx <= s) {
            break;
        }
        let gvec = DVector::from_column_slice(&gx);
        let mut d: Vec<f64> = (-(&hinv * &gvec)).iter().copied().collect();
        let mut slope = dot(&d, &gx);
        if slope >= 0.0 {
            hinv = DMatrix::identity(n, n);
            d = gx.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Some((fnew, gnew)) = eval(&xn) {
                if fnew <= fx + armijo * t * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            t *= shrink;
        }
        let Some((xn, fnew, gnew)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gnew.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm(&s) * norm(&yv) {
            let sv = DVector::from_column_slice(&s);
            let yvv = DVector::from_column_slice(&yv);
            let rho = 1.0 / sy;
            let hy = &hinv * &yvv;
            let yhy = yvv.dot(&hy);
            // H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ, expanded.
            hinv = &hinv - (&hy * sv.transpose() + &sv * hy.transpose()) * rho
                + &sv * sv.transpose() * (rho * rho * yhy + rho);
        }
        if (fx - fnew).abs() <= 1e-16 * fx.abs().max(1.0) && norm(&s) <= 1e-14 * norm(&xn).max(1.0) {
            x = xn;
            fx = fnew;
            gx = gnew;
            break;
        }
        x = xn;
        fx = fnew;
        gx = gnew;
    }
    let gn = norm(&gx);
    Some((x, fx, gn))
}

/// Move `z` until every inequality holds with slack `margin`, minimizing
/// `‖ReLU(g + margin)‖²` along the equality manifold.
fn find_interior(r: &Reduced<'_>, z0: Vec<f64>, margin: f64, s: &BarrierSettings) -> Option<Vec<f64>> {
    let ok = |p: &Point| p.g.iter().all(|v| *v < -1e-6);
    if let Some(p) = r.point(&z0) {
        if ok(&p) {
            return Some(z0);
        }
    }
    let eval = |z: &[f64], r: &Reduced<'_>| -> Option<(f64, Vec<f64>)> {
        let p = r.point(z)?;
        let coef: Vec<f64> = p.g.iter().map(|v| 2.0 * (v + margin).max(0.0)).collect();
        let val: f64 = p.g.iter().map(|v| (v + margin).max(0.0).powi(2)).sum();
        let grad = r.grad(&p, 0.0, &coef)?;
        Some((val, grad))
    };
    let (z, _, _) = bfgs(|z| eval(z, r), z0, 0.0, 2000, s.armijo, s.shrink, Some(0.0))?;
    let p = r.point(&z)?;
    ok(&p).then_some(z)
}

fn barrier_from(r: &Reduced<'_>, z0: Vec<f64>, s: &BarrierSettings) -> Option<BarrierSolution> {
    let mut z = find_interior(r, z0, 1e-3, s)?;
    let mut mu = s.mu0;
    let mut stat = f64::INFINITY;
    for round in 0..s.rounds {
        let eval = |z: &[f64], r: &Reduced<'_>| -> Option<(f64, Vec<f64>)> {
            let p = r.point(z)?;
            if p.g.iter().any(|v| *v >= 0.0) {
                return None;
            }
            let val = p.f - mu * p.g.iter().map(|v| (-v).ln()).sum::<f64>();
            let coef: Vec<f64> = p.g.iter().map(|v| -mu / v).collect();
            Some((val, r.grad(&p, 1.0, &coef)?))
        };
        let (zn, _, gn) = bfgs(|z| eval(z, r), z, s.stationarity_tol, s.max_inner, s.armijo, s.shrink, None)?;
        z = zn;
        stat = gn;
        if round + 1 < s.rounds {
            mu *= s.mu_factor;
        }
    }
    let p = r.point(&z)?;
    Some(BarrierSolution {
        status: if stat <= s.stationarity_tol { Status::Optimal } else { Status::MaxIterations },
        max_ineq: p.g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        objective: p.f,
        y: p.y.into_data(),
        z,
        stationarity: stat,
    })
}

/// Reduced-space log-barrier solve for one instance `x` (`1 × d`).
pub fn solve_reduced_barrier(
    family: &dyn ProblemFamily,
    x: &Tensor,
    settings: &BarrierSettings,
) -> Result<BarrierSolution, SolverError> {
    let m = family.dims().m();
    let z0 = family.reference_start(x)?.into_data();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut best: Option<BarrierSolution> = None;
    for k in 0..settings.starts.max(1) {
        let start = if k == 0 {
            z0.clone()
        } else {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let u: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            z0.iter().zip(&u).map(|(a, b)| a + sign * settings.start_perturbation * b).collect()
        };
        let r = Reduced { family, x: x.clone(), m };
        if let Some(sol) = barrier_from(&r, start, settings) {
            if best.as_ref().map_or(true, |b| sol.objective < b.objective) {
                best = Some(sol);
            }
        }
    }
    best.ok_or(SolverError::NoInteriorStart)
}

/// Reference optimum for every row of `x`.
pub struct ReferenceSet {
    pub y: Tensor,
    /// Partial coordinates of `y`, the supervised labels.
    pub labels: Tensor,
    pub objective: Tensor,
}

/// Solve each row of `x` with `solve`, which returns the optimal full vector
/// and objective or `None` on failure.
pub fn make_labels(
    family: &dyn ProblemFamily,
    x: &Tensor,
    mut solve: impl FnMut(usize, &Tensor) -> Option<(Vec<f64>, f64)>,
) -> Result<ReferenceSet, SolverError> {
    let n = family.dims().n;
    let mut y = Tensor::zeros(x.rows(), n);
    let mut obj = Tensor::zeros(x.rows(), 1);
    let mut failed = Vec::new();
    for i in 0..x.rows() {
        match solve(i, &x.select_rows(&[i])) {
            Some((yi, fi)) if yi.len() == n => {
                y.row_mut(i).copy_from_slice(&yi);
                obj.set(i, 0, fi);
            }
            _ => failed.push(i),
        }
    }
    if !failed.is_empty() {
        return Err(SolverError::Unsolved(failed));
    }
    Ok(ReferenceSet { labels: family.partial_of(&y), y, objective: obj })
}

/// Labels from ADMM; instances that stop at the iteration limit count as failures.
pub fn admm_labels(family: &QpFamily, x: &Tensor, settings: AdmmSettings) -> Result<ReferenceSet, SolverError> {
    let solver = AdmmSolver::for_family(family, settings)?;
    make_labels(family, x, |_, xi| {
        let s = solver.solve(xi.data()).ok()?;
        (s.status == Status::Optimal).then_some((s.y, s.objective))
    })
}

/// Labels from the reduced barrier method.
pub fn barrier_labels(
    family: &dyn ProblemFamily,
    x: &Tensor,
    settings: &BarrierSettings,
) -> Result<ReferenceSet, SolverError> {
    make_labels(family, x, |_, xi| {
        let s = solve_reduced_barrier(family, xi, settings).ok()?;
        Some((s.y, s.objective))
    })
}
