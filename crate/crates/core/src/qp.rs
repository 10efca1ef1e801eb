//! Linearly constrained families: the convex QP
//! `min ½yᵀQy + pᵀy s.t. Ay = x, Gy ≤ h` and its sine-perturbed variant
//! `½yᵀQy + pᵀsin(y)` with the same constraints.
//!
//! The right-hand side `h_i = Σ_j |(G A⁺)_ij|` makes `y = A⁺x` feasible for
//! every `x` in the unit box.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::dataset::Manifest;
use crate::family::{Completion, Dims, FamilyError, Linearization, ProblemFamily};
use crate::linalg::{condition_number, pinv, pivoted_column_basis, to_dmatrix, LuFactor};
use crate::tensor::{Tensor, TensorError};
use crate::tensor_io::{load_tensors, save_tensors, take_tensor};

/// Dependent blocks with a larger 2-norm condition number are rejected.
pub const MAX_DEP_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Quadratic,
    Sine,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Quadratic => "quadratic",
            ObjectiveKind::Sine => "sine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quadratic" => Some(ObjectiveKind::Quadratic),
            "sine" => Some(ObjectiveKind::Sine),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed `(Q, p, A, G, h)`; instances differ only in `x`.
pub struct QpFamily {
    pub kind: ObjectiveKind,
    pub seed: u64,
    /// Diagonal of `Q`, `1 × n`.
    pub q_diag: Tensor,
    pub p: Tensor,
    pub a: Tensor,
    pub g: Tensor,
    /// Inequality right-hand side, `1 × n_ineq`.
    pub h: Tensor,
    pub a_pinv: Tensor,
    pub partial_idx: Vec<usize>,
    pub dep_idx: Vec<usize>,
    a_part: Tensor,
    a_part_t: Tensor,
    dep_lu: Arc<LuFactor>,
    a_t: Tensor,
    g_t: Tensor,
}

impl fmt::Debug for QpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QpFamily")
            .field("kind", &self.kind)
            .field("seed", &self.seed)
            .field("dims", &self.dims())
            .finish()
    }
}

impl QpFamily {
    /// Random family: `Q` diagonal and `p` uniform on `[0, 1]`, `A` and `G`
    /// standard normal.
    pub fn generate(seed: u64, n: usize, n_eq: usize, n_ineq: usize, kind: ObjectiveKind) -> Result<Self, FamilyError> {
        if n_eq == 0 || n_eq > n {
            return Err(FamilyError::Generation(format!("need 0 < n_eq ≤ n, got n_eq={n_eq}, n={n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q_diag = Tensor::from_fn(1, n, |_, _| rng.gen::<f64>());
        let p = Tensor::from_fn(1, n, |_, _| rng.gen::<f64>());
        let a = Tensor::from_fn(n_eq, n, |_, _| rng.sample(StandardNormal));
        let g = Tensor::from_fn(n_ineq, n, |_, _| rng.sample(StandardNormal));
        Self::from_parts(seed, kind, q_diag, p, a, g, None, None)
    }

    /// Assemble a family from explicit matrices. `h` defaults to the
    /// construction that keeps `A⁺x` feasible; `partial_idx` defaults to the
    /// first `n − n_eq` columns when the trailing block is well conditioned.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        seed: u64,
        kind: ObjectiveKind,
        q_diag: Tensor,
        p: Tensor,
        a: Tensor,
        g: Tensor,
        h: Option<Tensor>,
        partial_idx: Option<Vec<usize>>,
    ) -> Result<Self, FamilyError> {
        let n = a.cols();
        if q_diag.shape() != [1, n] || p.shape() != [1, n] || (g.rows() > 0 && g.cols() != n) {
            return Err(TensorError::shape("qp_family", &[q_diag.shape(), p.shape(), a.shape(), g.shape()]).into());
        }
        let a_pinv = pinv(&a)?;
        let h = match h {
            Some(h) => h,
            None => {
                let ga = g.matmul(&a_pinv)?;
                Tensor::from_fn(1, g.rows(), |_, i| ga.row(i).iter().map(|v| v.abs()).sum())
            }
        };
        if h.shape() != [1, g.rows()] {
            return Err(TensorError::shape("qp_family", &[h.shape(), g.shape()]).into());
        }
        let dep_idx = match &partial_idx {
            Some(part) => complement(part, n),
            None => choose_dependent(&a)?,
        };
        let partial_idx = complement(&dep_idx, n);
        let a_dep = a.select_cols(&dep_idx);
        let cond = condition_number(&to_dmatrix(&a_dep))?;
        if !(cond < MAX_DEP_CONDITION) {
            return Err(FamilyError::Generation(format!("dependent block condition number {cond:e}")));
        }
        let dep_lu = Arc::new(LuFactor::from_tensor(&a_dep)?);
        let a_part = a.select_cols(&partial_idx);
        Ok(QpFamily {
            kind,
            seed,
            a_part_t: a_part.transpose(),
            a_part,
            a_t: a.transpose(),
            g_t: g.transpose(),
            q_diag,
            p,
            a,
            g,
            h,
            a_pinv,
            partial_idx,
            dep_idx,
            dep_lu,
        })
    }

    /// `A⁺x` for each row of `x`.
    pub fn pinv_point(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul_t(&self.a_pinv)
    }

    /// Assemble full vectors from partial and dependent blocks.
    pub fn assemble(&self, z: &Tensor, phi: &Tensor) -> Tensor {
        let n = self.a.cols();
        let mut y = Tensor::zeros(z.rows(), n);
        for r in 0..z.rows() {
            let row = y.row_mut(r);
            for (k, &j) in self.partial_idx.iter().enumerate() {
                row[j] = z.get(r, k);
            }
            for (k, &j) in self.dep_idx.iter().enumerate() {
                row[j] = phi.get(r, k);
            }
        }
        y
    }

    pub fn save(&self, dir: &Path) -> Result<(), FamilyError> {
        std::fs::create_dir_all(dir)?;
        let d = self.dims();
        let mut m = Manifest::default();
        m.set("format", "qp-family 1");
        m.set("kind", self.kind.as_str());
        m.set("seed", self.seed);
        m.set("n", d.n);
        m.set("n_eq", d.n_eq);
        m.set("n_ineq", d.n_ineq);
        m.write(&dir.join("family.manifest"))?;
        let part = Tensor::row_vector(&self.partial_idx.iter().map(|&i| i as f64).collect::<Vec<_>>());
        save_tensors(
            &dir.join("family.tensors"),
            &[("q_diag", &self.q_diag), ("p", &self.p), ("a", &self.a), ("g", &self.g), ("h", &self.h), ("partial_idx", &part)],
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, FamilyError> {
        let m = Manifest::read(&dir.join("family.manifest"))?;
        if m.get_str("format")? != "qp-family 1" {
            return Err(FamilyError::Manifest(format!("unsupported format `{}`", m.get_str("format")?)));
        }
        let kind = ObjectiveKind::parse(m.get_str("kind")?)
            .ok_or_else(|| FamilyError::Manifest(format!("unknown kind `{}`", m.get_str("kind").unwrap_or(""))))?;
        let seed: u64 = m.get("seed")?;
        let (n, n_eq, n_ineq): (usize, usize, usize) = (m.get("n")?, m.get("n_eq")?, m.get("n_ineq")?);
        let mut t = load_tensors(&dir.join("family.tensors"))?;
        let q_diag = take_tensor(&mut t, "q_diag", Some(&[1, n]))?;
        let p = take_tensor(&mut t, "p", Some(&[1, n]))?;
        let a = take_tensor(&mut t, "a", Some(&[n_eq, n]))?;
        let g = take_tensor(&mut t, "g", Some(&[n_ineq, n]))?;
        let h = take_tensor(&mut t, "h", Some(&[1, n_ineq]))?;
        let part = take_tensor(&mut t, "partial_idx", Some(&[1, n - n_eq]))?;
        let part: Vec<usize> = part.data().iter().map(|&v| v as usize).collect();
        Self::from_parts(seed, kind, q_diag, p, a, g, Some(h), Some(part))
    }
}

fn complement(idx: &[usize], n: usize) -> Vec<usize> {
    let mut mask = vec![false; n];
    for &i in idx {
        mask[i] = true;
    }
    (0..n).filter(|&i| !mask[i]).collect()
}

fn choose_dependent(a: &Tensor) -> Result<Vec<usize>, FamilyError> {
    let (n_eq, n) = (a.rows(), a.cols());
    let tail: Vec<usize> = (n - n_eq..n).collect();
    if condition_number(&to_dmatrix(&a.select_cols(&tail)))? < MAX_DEP_CONDITION {
        return Ok(tail);
    }
    Ok(pivoted_column_basis(a, n_eq)?)
}

struct QpLinearization {
    dep_lu: Arc<LuFactor>,
    a_part: Tensor,
    a_part_t: Tensor,
    partial_idx: Vec<usize>,
    dep_idx: Vec<usize>,
    n: usize,
}

impl Linearization for QpLinearization {
    fn vjp(&self, dy: &Tensor) -> Result<Tensor, TensorError> {
        let dz = dy.select_cols(&self.partial_idx);
        let dphi = dy.select_cols(&self.dep_idx);
        let u = self.dep_lu.solve_transpose_rows(&dphi).map_err(|e| TensorError::Numeric(e.to_string()))?;
        let through = u.matmul(&self.a_part)?;
        Ok(dz.zip_map(&through, |a, b| a - b))
    }

    fn jvp(&self, dz: &Tensor) -> Result<Tensor, TensorError> {
        let rhs = dz.matmul(&self.a_part_t)?;
        let dphi = self.dep_lu.solve_rows(&rhs).map_err(|e| TensorError::Numeric(e.to_string()))?;
        let mut dy = Tensor::zeros(dz.rows(), self.n);
        for r in 0..dz.rows() {
            let row = dy.row_mut(r);
            for (k, &j) in self.partial_idx.iter().enumerate() {
                row[j] = dz.get(r, k);
            }
            for (k, &j) in self.dep_idx.iter().enumerate() {
                row[j] = -dphi.get(r, k);
            }
        }
        Ok(dy)
    }
}

impl ProblemFamily for QpFamily {
    fn name(&self) -> &str {
        match self.kind {
            ObjectiveKind::Quadratic => "qp",
            ObjectiveKind::Sine => "nonconvex",
        }
    }

    fn dims(&self) -> Dims {
        Dims { n: self.a.cols(), d: self.a.rows(), n_eq: self.a.rows(), n_ineq: self.g.rows() }
    }

    fn objective(&self, tape: &mut Tape, _x: Var, y: Var) -> Result<Var, TensorError> {
        let q = tape.constant(self.q_diag.scale(0.5));
        let p = tape.constant(self.p.clone());
        let sq = tape.square(y)?;
        let quad = tape.mul(sq, q)?;
        let lin_in = match self.kind {
            ObjectiveKind::Quadratic => y,
            ObjectiveKind::Sine => tape.sin(y)?,
        };
        let lin = tape.mul(lin_in, p)?;
        let total = tape.add(quad, lin)?;
        tape.sum_rows(total)
    }

    fn eq_resid(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError> {
        let at = tape.constant(self.a_t.clone());
        let ay = tape.matmul(y, at)?;
        tape.sub(ay, x)
    }

    fn ineq_resid(&self, tape: &mut Tape, _x: Var, y: Var) -> Result<Var, TensorError> {
        let gt = tape.constant(self.g_t.clone());
        let h = tape.constant(self.h.clone());
        let gy = tape.matmul(y, gt)?;
        tape.sub(gy, h)
    }

    fn ineq_jacobian(&self) -> &Tensor {
        &self.g
    }

    fn eq_penalty_grad(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError> {
        let r = self.eq_resid(tape, x, y)?;
        let a = tape.constant(self.a.clone());
        let ra = tape.matmul(r, a)?;
        tape.scale(ra, 2.0)
    }

    fn complete(&self, x: &Tensor, z: &Tensor, _warm: Option<&Tensor>) -> Result<Completion, FamilyError> {
        let d = self.dims();
        if x.cols() != d.d || z.cols() != d.m() || x.rows() != z.rows() {
            return Err(TensorError::shape("complete", &[x.shape(), z.shape()]).into());
        }
        let az = z.matmul(&self.a_part_t)?;
        let rhs = x.zip_map(&az, |a, b| a - b);
        let phi = self.dep_lu.solve_rows(&rhs)?;
        let y = self.assemble(z, &phi);
        Ok(Completion {
            y,
            converged: vec![true; z.rows()],
            linearization: Arc::new(QpLinearization {
                dep_lu: self.dep_lu.clone(),
                a_part: self.a_part.clone(),
                a_part_t: self.a_part_t.clone(),
                partial_idx: self.partial_idx.clone(),
                dep_idx: self.dep_idx.clone(),
                n: d.n,
            }),
        })
    }

    fn partial_of(&self, y: &Tensor) -> Tensor {
        y.select_cols(&self.partial_idx)
    }

    fn reference_start(&self, x: &Tensor) -> Result<Tensor, FamilyError> {
        Ok(self.partial_of(&self.pinv_point(x)?))
    }

    fn sample_inputs(&self, count: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(count, self.a.rows(), |_, _| rng.gen_range(-1.0..=1.0))
    }
}
