//! AC optimal power flow on a MATPOWER case.
//!
//! Decision vector, per-unit, angles in radians:
//!
//! ```text
//! y = [ p_g (one per generator) | q_g (one per generator) | |v| (every bus) | ∠v (non-reference buses) ]
//! ```
//!
//! Reference-bus angles are fixed and not part of `y`; generation at load
//! buses is zero and not part of `y` either. The network predicts
//! `z = [p_g at generator buses; |v| at generator and reference buses]`. The
//! completion solves real-power balance at non-reference buses and
//! reactive-power balance at load buses for `z₁ = [|v| at load buses; ∠v at
//! non-reference buses]` by Newton's method, then reads
//! `z₂ = [p_g at reference buses; q_g at all generator buses]` off the
//! remaining balance equations.
//!
//! The problem input is `x = [p_d; q_d]` over all buses.

pub mod case;
pub mod network;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::family::{Completion, Dims, FamilyError, Linearization, ProblemFamily};
use crate::linalg::LuFactor;
use crate::tensor::{Tensor, TensorError};

pub use case::{BusType, CaseError, PowerCase};
pub use network::{Admittance, PowerJacobian};

/// Multiplier applied to the per-unit generation cost so that objective
/// values are of order one.
pub const OBJECTIVE_SCALE: f64 = 1e-4;

/// Relative half-width of the load sampling interval around nominal.
pub const LOAD_SPREAD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings { tol: 1e-8, max_iter: 50 }
    }
}

/// Outcome of one row's completion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonTrace {
    pub converged: bool,
    pub iterations: usize,
    /// `‖h_Step1‖∞` at the returned point.
    pub residual: f64,
}

pub struct AcopfFamily {
    case: PowerCase,
    admittance: Arc<Admittance>,
    layout: Arc<Layout>,
    newton: NewtonSettings,
    pd0: Vec<f64>,
    qd0: Vec<f64>,
    nominal_vm: Vec<f64>,
    nominal_va: Vec<f64>,
    cost_quad: Tensor,
    cost_lin: Tensor,
    z_lo: Tensor,
    z_hi: Tensor,
    ineq_jac: Tensor,
    ineq_jac_t: Tensor,
    ineq_rhs: Tensor,
}

/// Index bookkeeping shared by the family, its tape operations and its
/// linearizations.
#[derive(Debug, Clone)]
struct Layout {
    nb: usize,
    ng: usize,
    /// Bus of each generator.
    gen_bus: Vec<usize>,
    /// Column of each bus angle in `y`; `None` at reference buses.
    va_col: Vec<Option<usize>>,
    slack_va: Vec<f64>,
    non_ref: Vec<usize>,
    load: Vec<usize>,
    reference: Vec<usize>,
    non_load: Vec<usize>,
    /// Generators at non-reference generator buses (the `p_g` part of `z`).
    free_gens: Vec<usize>,
    /// Generators at reference buses.
    ref_gens: Vec<usize>,
    partial_idx: Vec<usize>,
    z1_idx: Vec<usize>,
    z2_idx: Vec<usize>,
    n: usize,
}

impl Layout {
    fn pg(&self, g: usize) -> usize {
        g
    }

    fn qg(&self, g: usize) -> usize {
        self.ng + g
    }

    fn vm(&self, k: usize) -> usize {
        2 * self.ng + k
    }

    fn m(&self) -> usize {
        self.partial_idx.len()
    }

    fn n1(&self) -> usize {
        self.z1_idx.len()
    }

    fn split_voltages(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let vm = (0..self.nb).map(|k| y[self.vm(k)]).collect();
        let va = (0..self.nb).map(|k| self.va_col[k].map_or(self.slack_va[k], |c| y[c])).collect();
        (vm, va)
    }

    /// Generation at every bus, zero at load buses.
    fn bus_generation(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.nb];
        let mut q = vec![0.0; self.nb];
        for (g, &k) in self.gen_bus.iter().enumerate() {
            p[k] = y[self.pg(g)];
            q[k] = y[self.qg(g)];
        }
        (p, q)
    }

    /// Power-balance residuals `[p_g − p_d − P; q_g − q_d − Q]` of one row.
    fn balance(&self, adm: &Admittance, x: &[f64], y: &[f64]) -> Vec<f64> {
        let (vm, va) = self.split_voltages(y);
        let (p, q) = adm.injections(&vm, &va);
        let (pg, qg) = self.bus_generation(y);
        let nb = self.nb;
        (0..nb).map(|k| pg[k] - x[k] - p[k]).chain((0..nb).map(|k| qg[k] - x[nb + k] - q[k])).collect()
    }

    /// `uᵀ ∂h/∂y` for balance residuals `h` and a row `u` of length `2·nb`.
    fn balance_vjp(&self, jac: &PowerJacobian, u: &[f64]) -> Vec<f64> {
        let nb = self.nb;
        let (up, uq) = u.split_at(nb);
        let mut dy = vec![0.0; self.n];
        for (g, &k) in self.gen_bus.iter().enumerate() {
            dy[self.pg(g)] = up[k];
            dy[self.qg(g)] = uq[k];
        }
        for j in 0..nb {
            let mut dvm = 0.0;
            let mut dva = 0.0;
            for k in 0..nb {
                dvm += up[k] * jac.dp_dvm[(k, j)] + uq[k] * jac.dq_dvm[(k, j)];
                dva += up[k] * jac.dp_dva[(k, j)] + uq[k] * jac.dq_dva[(k, j)];
            }
            dy[self.vm(j)] = -dvm;
            if let Some(c) = self.va_col[j] {
                dy[c] = -dva;
            }
        }
        dy
    }

    /// `∇_y ‖h‖²` for one row.
    fn penalty_grad(&self, adm: &Admittance, x: &[f64], y: &[f64]) -> Vec<f64> {
        let (vm, va) = self.split_voltages(y);
        let jac = adm.jacobian(&vm, &va);
        let h = self.balance(adm, x, y);
        let twice: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        self.balance_vjp(&jac, &twice)
    }
}

impl AcopfFamily {
    pub fn new(case: PowerCase) -> Result<Self, FamilyError> {
        Self::with_settings(case, NewtonSettings::default())
    }

    pub fn case57() -> Self {
        Self::new(PowerCase::case57()).expect("bundled case57 is supported")
    }

    pub fn with_settings(case: PowerCase, newton: NewtonSettings) -> Result<Self, FamilyError> {
        let unsupported = |m: String| Err(FamilyError::Unsupported(m));
        let nb = case.buses.len();
        let index = case.bus_index();
        let base = case.base_mva;
        if let Some(b) = case.buses.iter().find(|b| b.kind == BusType::Isolated) {
            return unsupported(format!("isolated bus {}", b.id));
        }
        let gens: Vec<usize> = (0..case.generators.len()).filter(|&g| case.generators[g].in_service).collect();
        let mut bus_gen = vec![None; nb];
        let mut gen_bus = Vec::with_capacity(gens.len());
        for (slot, &g) in gens.iter().enumerate() {
            let k = index[&case.generators[g].bus];
            if case.buses[k].kind == BusType::Load {
                return unsupported(format!("generator at load bus {}", case.buses[k].id));
            }
            if bus_gen[k].is_some() {
                return unsupported(format!("several generators at bus {}", case.buses[k].id));
            }
            bus_gen[k] = Some(slot);
            gen_bus.push(k);
        }
        if let Some(k) = (0..nb).find(|&k| case.buses[k].kind != BusType::Load && bus_gen[k].is_none()) {
            return unsupported(format!("generator bus {} has no in-service generator", case.buses[k].id));
        }
        if case.gencost.len() < case.generators.len() {
            return unsupported("fewer cost rows than generators".into());
        }
        let ng = gen_bus.len();
        let mut cost_quad = vec![0.0; ng];
        let mut cost_lin = vec![0.0; ng];
        for (slot, &g) in gens.iter().enumerate() {
            let c = &case.gencost[g];
            if c.model != 2.0 || c.coeffs.len() > 3 {
                return unsupported(format!(
                    "cost of generator {} must be a polynomial of degree at most 2",
                    g + 1
                ));
            }
            let padded: Vec<f64> = std::iter::repeat(0.0).take(3 - c.coeffs.len()).chain(c.coeffs.iter().copied()).collect();
            cost_quad[slot] = padded[0] * base * base * OBJECTIVE_SCALE;
            cost_lin[slot] = padded[1] * base * OBJECTIVE_SCALE;
        }

        let kind = |k: usize| case.buses[k].kind;
        let non_ref: Vec<usize> = (0..nb).filter(|&k| kind(k) != BusType::Reference).collect();
        let load: Vec<usize> = (0..nb).filter(|&k| kind(k) == BusType::Load).collect();
        let reference: Vec<usize> = (0..nb).filter(|&k| kind(k) == BusType::Reference).collect();
        let non_load: Vec<usize> = (0..nb).filter(|&k| kind(k) != BusType::Load).collect();
        let free_gens: Vec<usize> = (0..ng).filter(|&g| kind(gen_bus[g]) == BusType::Generator).collect();
        let ref_gens: Vec<usize> = (0..ng).filter(|&g| kind(gen_bus[g]) == BusType::Reference).collect();
        let mut va_col = vec![None; nb];
        for (i, &k) in non_ref.iter().enumerate() {
            va_col[k] = Some(2 * ng + nb + i);
        }
        let n = 2 * ng + nb + non_ref.len();
        let nominal_va: Vec<f64> = case.buses.iter().map(|b| b.va * PI / 180.0).collect();
        let slack_va = nominal_va.clone();

        let mut layout = Layout {
            nb,
            ng,
            gen_bus,
            va_col,
            slack_va,
            non_ref,
            load,
            reference,
            non_load,
            free_gens,
            ref_gens,
            partial_idx: vec![],
            z1_idx: vec![],
            z2_idx: vec![],
            n,
        };
        layout.partial_idx = layout
            .free_gens
            .iter()
            .map(|&g| layout.pg(g))
            .chain(layout.non_load.iter().map(|&k| layout.vm(k)))
            .collect();
        layout.z1_idx = layout
            .load
            .iter()
            .map(|&k| layout.vm(k))
            .chain(layout.non_ref.iter().map(|&k| layout.va_col[k].expect("non-reference angle")))
            .collect();
        layout.z2_idx =
            layout.ref_gens.iter().map(|&g| layout.pg(g)).chain((0..ng).map(|g| layout.qg(g))).collect();

        let g = |slot: usize| &case.generators[gens[slot]];
        let pmin: Vec<f64> = (0..ng).map(|s| g(s).pmin / base).collect();
        let pmax: Vec<f64> = (0..ng).map(|s| g(s).pmax / base).collect();
        let qmin: Vec<f64> = (0..ng).map(|s| g(s).qmin / base).collect();
        let qmax: Vec<f64> = (0..ng).map(|s| g(s).qmax / base).collect();
        let vmin: Vec<f64> = case.buses.iter().map(|b| b.vmin).collect();
        let vmax: Vec<f64> = case.buses.iter().map(|b| b.vmax).collect();

        let n_ineq = 4 * ng + 2 * nb;
        let mut jac = Tensor::zeros(n_ineq, n);
        let mut rhs = vec![0.0; n_ineq];
        let mut r = 0;
        for (col, lo, hi) in [
            ((0..ng).map(|s| layout.pg(s)).collect::<Vec<_>>(), &pmin, &pmax),
            ((0..ng).map(|s| layout.qg(s)).collect(), &qmin, &qmax),
            ((0..nb).map(|k| layout.vm(k)).collect(), &vmin, &vmax),
        ] {
            for (i, &c) in col.iter().enumerate() {
                jac.set(r + i, c, 1.0);
                rhs[r + i] = hi[i];
                jac.set(r + col.len() + i, c, -1.0);
                rhs[r + col.len() + i] = -lo[i];
            }
            r += 2 * col.len();
        }

        let z_lo: Vec<f64> = layout
            .free_gens
            .iter()
            .map(|&s| pmin[s])
            .chain(layout.non_load.iter().map(|&k| vmin[k]))
            .collect();
        let z_hi: Vec<f64> = layout
            .free_gens
            .iter()
            .map(|&s| pmax[s])
            .chain(layout.non_load.iter().map(|&k| vmax[k]))
            .collect();

        Ok(AcopfFamily {
            admittance: Arc::new(Admittance::build(&case)),
            pd0: case.buses.iter().map(|b| b.pd / base).collect(),
            qd0: case.buses.iter().map(|b| b.qd / base).collect(),
            nominal_vm: case.buses.iter().map(|b| b.vm).collect(),
            nominal_va,
            cost_quad: Tensor::row_vector(&cost_quad),
            cost_lin: Tensor::row_vector(&cost_lin),
            z_lo: Tensor::row_vector(&z_lo),
            z_hi: Tensor::row_vector(&z_hi),
            ineq_jac_t: jac.transpose(),
            ineq_jac: jac,
            ineq_rhs: Tensor::row_vector(&rhs),
            layout: Arc::new(layout),
            newton,
            case,
        })
    }

    pub fn case(&self) -> &PowerCase {
        &self.case
    }

    pub fn admittance(&self) -> &Admittance {
        &self.admittance
    }

    pub fn newton_settings(&self) -> NewtonSettings {
        self.newton
    }

    /// Nominal loads `[p_d; q_d]`, per-unit, as a `1 × 2b` row.
    pub fn nominal_input(&self) -> Tensor {
        Tensor::row_vector(&self.pd0.iter().chain(&self.qd0).copied().collect::<Vec<_>>())
    }

    /// Lower and upper boxes of the partial variables.
    pub fn partial_bounds(&self) -> (&Tensor, &Tensor) {
        (&self.z_lo, &self.z_hi)
    }

    /// Columns of `y` holding `z₁` and `z₂`.
    pub fn dependent_columns(&self) -> (&[usize], &[usize]) {
        (&self.layout.z1_idx, &self.layout.z2_idx)
    }

    pub fn partial_columns(&self) -> &[usize] {
        &self.layout.partial_idx
    }

    /// Power-balance residuals `[p_g − p_d − P; q_g − q_d − Q]` per row.
    pub fn balance(&self, x: &Tensor, y: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> =
            (0..y.rows()).map(|i| self.layout.balance(&self.admittance, x.row(i), y.row(i))).collect();
        Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, 2 * self.layout.nb))
    }

    /// Complete every row and report the Newton trace of each.
    pub fn complete_with_trace(
        &self,
        x: &Tensor,
        z: &Tensor,
        warm: Option<&Tensor>,
    ) -> Result<(Completion, Vec<NewtonTrace>), FamilyError> {
        let d = self.dims();
        if x.cols() != d.d || z.cols() != d.m() || x.rows() != z.rows() {
            return Err(TensorError::shape("complete", &[x.shape(), z.shape()]).into());
        }
        if let Some(w) = warm {
            if w.cols() != d.n || w.rows() != z.rows() {
                return Err(TensorError::shape("complete warm start", &[w.shape(), z.shape()]).into());
            }
        }
        let mut y = Tensor::zeros(z.rows(), d.n);
        let mut traces = Vec::with_capacity(z.rows());
        let mut rows = Vec::with_capacity(z.rows());
        for i in 0..z.rows() {
            let (yr, trace, lin) = self.solve_row(x.row(i), z.row(i), warm.map(|w| w.row(i)));
            y.row_mut(i).copy_from_slice(&yr);
            traces.push(trace);
            rows.push(lin);
        }
        let converged = traces.iter().map(|t| t.converged).collect();
        let linearization = Arc::new(AcopfLinearization { layout: self.layout.clone(), rows });
        Ok((Completion { y, converged, linearization }, traces))
    }

    fn initial_voltages(&self, z: &[f64], warm: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let (mut vm, mut va) = match warm.filter(|w| w.iter().all(|v| v.is_finite())) {
            Some(w) => l.split_voltages(w),
            None => (self.nominal_vm.clone(), self.nominal_va.clone()),
        };
        for &k in &l.reference {
            va[k] = l.slack_va[k];
        }
        let off = l.free_gens.len();
        for (i, &k) in l.non_load.iter().enumerate() {
            vm[k] = z[off + i];
        }
        (vm, va)
    }

    /// `h_Step1` and its Jacobian `J_Step1` with respect to `z₁`.
    fn step1(&self, x: &[f64], pg_bus: &[f64], jac: &PowerJacobian) -> (Vec<f64>, DMatrix<f64>) {
        let l = &self.layout;
        let nb = l.nb;
        let n1 = l.n1();
        let mut h = Vec::with_capacity(n1);
        h.extend(l.non_ref.iter().map(|&k| pg_bus[k] - x[k] - jac.p[k]));
        h.extend(l.load.iter().map(|&k| -x[nb + k] - jac.q[k]));
        let mut j = DMatrix::zeros(n1, n1);
        let np = l.non_ref.len();
        for (r, &k) in l.non_ref.iter().enumerate() {
            for (c, &i) in l.load.iter().enumerate() {
                j[(r, c)] = -jac.dp_dvm[(k, i)];
            }
            for (c, &i) in l.non_ref.iter().enumerate() {
                j[(r, l.load.len() + c)] = -jac.dp_dva[(k, i)];
            }
        }
        for (r, &k) in l.load.iter().enumerate() {
            for (c, &i) in l.load.iter().enumerate() {
                j[(np + r, c)] = -jac.dq_dvm[(k, i)];
            }
            for (c, &i) in l.non_ref.iter().enumerate() {
                j[(np + r, l.load.len() + c)] = -jac.dq_dva[(k, i)];
            }
        }
        (h, j)
    }

    fn solve_row(&self, x: &[f64], z: &[f64], warm: Option<&[f64]>) -> (Vec<f64>, NewtonTrace, Option<RowLinearization>) {
        let l = &self.layout;
        let nb = l.nb;
        let (mut vm, mut va) = self.initial_voltages(z, warm);
        let start = (vm.clone(), va.clone());
        let mut pg_bus = vec![0.0; nb];
        for (i, &g) in l.free_gens.iter().enumerate() {
            pg_bus[l.gen_bus[g]] = z[i];
        }

        let mut trace = NewtonTrace { converged: false, iterations: 0, residual: f64::INFINITY };
        let mut jac = self.admittance.jacobian(&vm, &va);
        let mut j1 = None;
        loop {
            let (h, j) = self.step1(x, &pg_bus, &jac);
            trace.residual = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !trace.residual.is_finite() {
                break;
            }
            if trace.residual < self.newton.tol {
                trace.converged = true;
                j1 = Some(j);
                break;
            }
            if trace.iterations == self.newton.max_iter {
                break;
            }
            let Some(step) = j.lu().solve(&DVector::from_vec(h)) else { break };
            for (c, &k) in l.load.iter().enumerate() {
                vm[k] -= step[c];
            }
            for (c, &k) in l.non_ref.iter().enumerate() {
                va[k] -= step[l.load.len() + c];
            }
            trace.iterations += 1;
            jac = self.admittance.jacobian(&vm, &va);
        }
        if !vm.iter().chain(&va).all(|v| v.is_finite()) {
            (vm, va) = start;
            jac = self.admittance.jacobian(&vm, &va);
        }

        let mut y = vec![0.0; l.n];
        for (i, &g) in l.free_gens.iter().enumerate() {
            y[l.pg(g)] = z[i];
        }
        for &g in &l.ref_gens {
            let k = l.gen_bus[g];
            y[l.pg(g)] = x[k] + jac.p[k];
        }
        for g in 0..l.ng {
            let k = l.gen_bus[g];
            y[l.qg(g)] = x[nb + k] + jac.q[k];
        }
        for k in 0..nb {
            y[l.vm(k)] = vm[k];
            if let Some(c) = l.va_col[k] {
                y[c] = va[k];
            }
        }
        let lin = j1.and_then(|j| self.row_linearization(j, &jac));
        if lin.is_none() {
            trace.converged = false;
        }
        (y, trace, lin)
    }

    fn row_linearization(&self, j1: DMatrix<f64>, jac: &PowerJacobian) -> Option<RowLinearization> {
        let l = &self.layout;
        let (n1, m) = (l.n1(), l.m());
        let nf = l.free_gens.len();
        let np = l.non_ref.len();
        let nl = l.load.len();
        let lu = LuFactor::new(j1).ok()?;

        let mut j1b = DMatrix::zeros(n1, m);
        for (c, &g) in l.free_gens.iter().enumerate() {
            let k = l.gen_bus[g];
            let r = l.non_ref.iter().position(|&b| b == k).expect("generator bus is not a reference bus");
            j1b[(r, c)] = 1.0;
        }
        for (c, &i) in l.non_load.iter().enumerate() {
            for (r, &k) in l.non_ref.iter().enumerate() {
                j1b[(r, nf + c)] = -jac.dp_dvm[(k, i)];
            }
            for (r, &k) in l.load.iter().enumerate() {
                j1b[(np + r, nf + c)] = -jac.dq_dvm[(k, i)];
            }
        }

        // z₂ = [p_d + P at reference buses; q_d + Q at generator buses].
        let n2 = l.z2_idx.len();
        let z2_buses: Vec<(usize, bool)> = l
            .ref_gens
            .iter()
            .map(|&g| (l.gen_bus[g], true))
            .chain((0..l.ng).map(|g| (l.gen_bus[g], false)))
            .collect();
        let mut j2_z1 = DMatrix::zeros(n2, n1);
        let mut j2_z = DMatrix::zeros(n2, m);
        for (r, &(k, real)) in z2_buses.iter().enumerate() {
            let (dvm, dva) = if real { (&jac.dp_dvm, &jac.dp_dva) } else { (&jac.dq_dvm, &jac.dq_dva) };
            for (c, &i) in l.load.iter().enumerate() {
                j2_z1[(r, c)] = dvm[(k, i)];
            }
            for (c, &i) in l.non_ref.iter().enumerate() {
                j2_z1[(r, nl + c)] = dva[(k, i)];
            }
            for (c, &i) in l.non_load.iter().enumerate() {
                j2_z[(r, nf + c)] = dvm[(k, i)];
            }
        }
        Some(RowLinearization { j1: lu, j1b, j2_z1, j2_z })
    }
}

/// Cached Jacobian blocks of one completed row.
struct RowLinearization {
    /// `J_Step1 = ∂h_Step1/∂z₁`, factorized.
    j1: LuFactor,
    /// `J_Step1b = ∂h_Step1/∂z`.
    j1b: DMatrix<f64>,
    /// `∂z₂/∂z₁`.
    j2_z1: DMatrix<f64>,
    /// `∂z₂/∂z`.
    j2_z: DMatrix<f64>,
}

struct AcopfLinearization {
    layout: Arc<Layout>,
    rows: Vec<Option<RowLinearization>>,
}

impl Linearization for AcopfLinearization {
    fn vjp(&self, dy: &Tensor) -> Result<Tensor, TensorError> {
        let l = &self.layout;
        if dy.cols() != l.n || dy.rows() != self.rows.len() {
            return Err(TensorError::shape("acopf vjp", &[dy.shape()]));
        }
        let mut out = Tensor::zeros(dy.rows(), l.m());
        for (i, row) in self.rows.iter().enumerate() {
            let d = dy.row(i);
            let gz = DVector::from_iterator(l.m(), l.partial_idx.iter().map(|&c| d[c]));
            let dz = match row {
                None => gz,
                Some(r) => {
                    let g1 = DVector::from_iterator(l.n1(), l.z1_idx.iter().map(|&c| d[c]));
                    let g2 = DVector::from_iterator(l.z2_idx.len(), l.z2_idx.iter().map(|&c| d[c]));
                    // K = (∂ℓ/∂z₁ + ∂ℓ/∂z₂·∂z₂/∂z₁)·J_Step1⁻¹
                    let rhs = g1 + r.j2_z1.tr_mul(&g2);
                    let k = r
                        .j1
                        .solve_transpose(&DMatrix::from_column_slice(l.n1(), 1, rhs.as_slice()))
                        .map_err(|e| TensorError::Numeric(e.to_string()))?;
                    gz + r.j2_z.tr_mul(&g2) - r.j1b.tr_mul(&k.column(0))
                }
            };
            out.row_mut(i).copy_from_slice(dz.as_slice());
        }
        Ok(out)
    }

    fn jvp(&self, dz: &Tensor) -> Result<Tensor, TensorError> {
        let l = &self.layout;
        if dz.cols() != l.m() || dz.rows() != self.rows.len() {
            return Err(TensorError::shape("acopf jvp", &[dz.shape()]));
        }
        let mut out = Tensor::zeros(dz.rows(), l.n);
        for (i, row) in self.rows.iter().enumerate() {
            let v = DVector::from_row_slice(dz.row(i));
            let o = out.row_mut(i);
            for (j, &c) in l.partial_idx.iter().enumerate() {
                o[c] = v[j];
            }
            let Some(r) = row else { continue };
            let rhs = -(&r.j1b * &v);
            let d1 = r
                .j1
                .solve(&DMatrix::from_column_slice(l.n1(), 1, rhs.as_slice()))
                .map_err(|e| TensorError::Numeric(e.to_string()))?;
            let d1 = d1.column(0).into_owned();
            let d2 = &r.j2_z1 * &d1 + &r.j2_z * &v;
            for (j, &c) in l.z1_idx.iter().enumerate() {
                o[c] = d1[j];
            }
            for (j, &c) in l.z2_idx.iter().enumerate() {
                o[c] = d2[j];
            }
        }
        Ok(out)
    }
}

/// `h(x, y)` as a tape node with parents `[x, y]`.
struct BalanceOp {
    adm: Arc<Admittance>,
    layout: Arc<Layout>,
}

impl CustomOp for BalanceOp {
    fn name(&self) -> &'static str {
        "power_balance"
    }

    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>, TensorError> {
        let y = inputs[1];
        let mut dy = Tensor::zeros(y.rows(), y.cols());
        for i in 0..y.rows() {
            let (vm, va) = self.layout.split_voltages(y.row(i));
            let jac = self.adm.jacobian(&vm, &va);
            dy.row_mut(i).copy_from_slice(&self.layout.balance_vjp(&jac, upstream.row(i)));
        }
        Ok(vec![Some(upstream.scale(-1.0)), Some(dy)])
    }
}

/// `∇_y ‖h(x, y)‖²` as a tape node with parents `[x, y]`.
struct PenaltyGradOp {
    adm: Arc<Admittance>,
    layout: Arc<Layout>,
}

impl CustomOp for PenaltyGradOp {
    fn name(&self) -> &'static str {
        "power_balance_penalty_grad"
    }

    // The Hessian of ‖h‖² is symmetric, so the vjp in `y` is a Hessian-vector
    // product, taken as a central difference of the gradient along `u`.
    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>, TensorError> {
        let (x, y) = (inputs[0], inputs[1]);
        let l = &self.layout;
        let mut dx = Tensor::zeros(x.rows(), x.cols());
        let mut dy = Tensor::zeros(y.rows(), y.cols());
        for i in 0..y.rows() {
            let u = upstream.row(i);
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let scale = y.row(i).iter().fold(1.0f64, |a, v| a.max(v.abs()));
            let eps = 1e-6 * scale / norm;
            let shifted = |s: f64| -> Vec<f64> { y.row(i).iter().zip(u).map(|(a, b)| a + s * eps * b).collect() };
            let plus = l.penalty_grad(&self.adm, x.row(i), &shifted(1.0));
            let minus = l.penalty_grad(&self.adm, x.row(i), &shifted(-1.0));
            for (o, (p, m)) in dy.row_mut(i).iter_mut().zip(plus.iter().zip(&minus)) {
                *o = (p - m) / (2.0 * eps);
            }
            // ∂/∂x of 2·J_yᵀh is −2·J_yᵀ, so the vjp is −2·J_y·u.
            let (vm, va) = l.split_voltages(y.row(i));
            let jac = self.adm.jacobian(&vm, &va);
            let ju = balance_jvp(l, &jac, u);
            for (o, v) in dx.row_mut(i).iter_mut().zip(ju) {
                *o = -2.0 * v;
            }
        }
        Ok(vec![Some(dx), Some(dy)])
    }
}

/// `(∂h/∂y)·u` for one row.
fn balance_jvp(l: &Layout, jac: &PowerJacobian, u: &[f64]) -> Vec<f64> {
    let nb = l.nb;
    let mut out = vec![0.0; 2 * nb];
    for (g, &k) in l.gen_bus.iter().enumerate() {
        out[k] += u[l.pg(g)];
        out[nb + k] += u[l.qg(g)];
    }
    for k in 0..nb {
        let (mut p, mut q) = (0.0, 0.0);
        for j in 0..nb {
            let dvm = u[l.vm(j)];
            let dva = l.va_col[j].map_or(0.0, |c| u[c]);
            p += jac.dp_dvm[(k, j)] * dvm + jac.dp_dva[(k, j)] * dva;
            q += jac.dq_dvm[(k, j)] * dvm + jac.dq_dva[(k, j)] * dva;
        }
        out[k] -= p;
        out[nb + k] -= q;
    }
    out
}

impl ProblemFamily for AcopfFamily {
    fn name(&self) -> &str {
        "acopf"
    }

    fn dims(&self) -> Dims {
        let l = &self.layout;
        Dims { n: l.n, d: 2 * l.nb, n_eq: 2 * l.nb, n_ineq: self.ineq_jac.rows() }
    }

    fn objective(&self, tape: &mut Tape, _x: Var, y: Var) -> Result<Var, TensorError> {
        let pg = tape.slice(y, 0, self.layout.ng)?;
        let a = tape.constant(self.cost_quad.clone());
        let b = tape.constant(self.cost_lin.clone());
        let sq = tape.square(pg)?;
        let quad = tape.mul(sq, a)?;
        let lin = tape.mul(pg, b)?;
        let total = tape.add(quad, lin)?;
        tape.sum_rows(total)
    }

    fn eq_resid(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError> {
        let value = self.balance(tape.value(x), tape.value(y));
        let op = BalanceOp { adm: self.admittance.clone(), layout: self.layout.clone() };
        tape.custom(Box::new(op), &[x, y], value)
    }

    fn ineq_resid(&self, tape: &mut Tape, _x: Var, y: Var) -> Result<Var, TensorError> {
        let gt = tape.constant(self.ineq_jac_t.clone());
        let h = tape.constant(self.ineq_rhs.clone());
        let gy = tape.matmul(y, gt)?;
        tape.sub(gy, h)
    }

    fn ineq_jacobian(&self) -> &Tensor {
        &self.ineq_jac
    }

    fn eq_penalty_grad(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError> {
        let (xv, yv) = (tape.value(x), tape.value(y));
        let rows: Vec<Vec<f64>> =
            (0..yv.rows()).map(|i| self.layout.penalty_grad(&self.admittance, xv.row(i), yv.row(i))).collect();
        let value = Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, self.layout.n));
        let op = PenaltyGradOp { adm: self.admittance.clone(), layout: self.layout.clone() };
        tape.custom(Box::new(op), &[x, y], value)
    }

    fn complete(&self, x: &Tensor, z: &Tensor, warm: Option<&Tensor>) -> Result<Completion, FamilyError> {
        Ok(self.complete_with_trace(x, z, warm)?.0)
    }

    fn partial_of(&self, y: &Tensor) -> Tensor {
        y.select_cols(&self.layout.partial_idx)
    }

    /// `α = sigmoid(raw)`, `z = α·lo + (1 − α)·hi`.
    fn decode_partial(&self, tape: &mut Tape, raw: Var) -> Result<Var, TensorError> {
        let alpha = tape.sigmoid(raw)?;
        let span = tape.constant(self.z_lo.zip_map(&self.z_hi, |lo, hi| lo - hi));
        let hi = tape.constant(self.z_hi.clone());
        let scaled = tape.mul(alpha, span)?;
        tape.add(scaled, hi)
    }

    /// Midpoints of the partial-variable boxes.
    fn reference_start(&self, x: &Tensor) -> Result<Tensor, FamilyError> {
        let mid = self.z_lo.zip_map(&self.z_hi, |lo, hi| 0.5 * (lo + hi));
        Ok(Tensor::from_fn(x.rows(), mid.cols(), |_, j| mid.get(0, j)))
    }

    /// Each nominal load scaled by an independent factor drawn uniformly
    /// from `[1 − LOAD_SPREAD, 1 + LOAD_SPREAD]`.
    fn sample_inputs(&self, count: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nominal = self.nominal_input();
        Tensor::from_fn(count, nominal.cols(), |_, j| {
            nominal.get(0, j) * rng.gen_range(1.0 - LOAD_SPREAD..=1.0 + LOAD_SPREAD)
        })
    }
}
