//! Nodal admittance matrix and polar power-injection equations.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};

use super::case::PowerCase;

/// `W = W_r + i·W_i`, per-unit, buses in case order.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    pub wr: DMatrix<f64>,
    pub wi: DMatrix<f64>,
}

impl Admittance {
    /// Standard branch model: series admittance `1/(r + jx)`, half the line
    /// charging at each end, off-nominal tap `τ·e^{jθ}` on the from side, and
    /// bus shunts `(Gs + jBs)/baseMVA`. Out-of-service branches are skipped.
    pub fn build(case: &PowerCase) -> Self {
        let b = case.buses.len();
        let index = case.bus_index();
        let mut w = DMatrix::<Complex<f64>>::zeros(b, b);
        for br in case.branches.iter().filter(|br| br.in_service) {
            let (f, t) = (index[&br.from], index[&br.to]);
            let ys = Complex::new(1.0, 0.0) / Complex::new(br.r, br.x);
            let ratio = if br.ratio == 0.0 { 1.0 } else { br.ratio };
            let tap = Complex::from_polar(ratio, br.angle * PI / 180.0);
            let ytt = ys + Complex::new(0.0, br.b / 2.0);
            w[(f, f)] += ytt / (tap * tap.conj());
            w[(f, t)] += -ys / tap.conj();
            w[(t, f)] += -ys / tap;
            w[(t, t)] += ytt;
        }
        for (k, bus) in case.buses.iter().enumerate() {
            w[(k, k)] += Complex::new(bus.gs, bus.bs) / case.base_mva;
        }
        Admittance { wr: w.map(|c| c.re), wi: w.map(|c| c.im) }
    }

    pub fn buses(&self) -> usize {
        self.wr.nrows()
    }

    /// Net injections `(P, Q)` at every bus for magnitudes `vm` and angles
    /// `va` (radians).
    pub fn injections(&self, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let b = self.buses();
        let (e, f): (Vec<f64>, Vec<f64>) = vm.iter().zip(va).map(|(m, a)| (m * a.cos(), m * a.sin())).unzip();
        let mut p = vec![0.0; b];
        let mut q = vec![0.0; b];
        for k in 0..b {
            let (mut ir, mut ii) = (0.0, 0.0);
            for j in 0..b {
                let (g, s) = (self.wr[(k, j)], self.wi[(k, j)]);
                if g == 0.0 && s == 0.0 {
                    continue;
                }
                ir += g * e[j] - s * f[j];
                ii += s * e[j] + g * f[j];
            }
            p[k] = e[k] * ir + f[k] * ii;
            q[k] = f[k] * ir - e[k] * ii;
        }
        (p, q)
    }

    /// Injections and their partial derivatives with respect to `vm` and `va`.
    pub fn jacobian(&self, vm: &[f64], va: &[f64]) -> PowerJacobian {
        let b = self.buses();
        let (p, q) = self.injections(vm, va);
        let mut j = PowerJacobian {
            dp_dvm: DMatrix::zeros(b, b),
            dp_dva: DMatrix::zeros(b, b),
            dq_dvm: DMatrix::zeros(b, b),
            dq_dva: DMatrix::zeros(b, b),
            p,
            q,
        };
        for k in 0..b {
            for i in 0..b {
                let (g, s) = (self.wr[(k, i)], self.wi[(k, i)]);
                if i == k || (g == 0.0 && s == 0.0) {
                    continue;
                }
                let (sn, cs) = (va[k] - va[i]).sin_cos();
                let a = g * cs + s * sn;
                let c = g * sn - s * cs;
                j.dp_dva[(k, i)] = vm[k] * vm[i] * c;
                j.dp_dvm[(k, i)] = vm[k] * a;
                j.dq_dva[(k, i)] = -vm[k] * vm[i] * a;
                j.dq_dvm[(k, i)] = vm[k] * c;
            }
            let (g, s, v) = (self.wr[(k, k)], self.wi[(k, k)], vm[k]);
            j.dp_dva[(k, k)] = -j.q[k] - s * v * v;
            j.dp_dvm[(k, k)] = j.p[k] / v + g * v;
            j.dq_dva[(k, k)] = j.p[k] - g * v * v;
            j.dq_dvm[(k, k)] = j.q[k] / v - s * v;
        }
        j
    }
}

pub struct PowerJacobian {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub dp_dvm: DMatrix<f64>,
    pub dp_dva: DMatrix<f64>,
    pub dq_dvm: DMatrix<f64>,
    pub dq_dva: DMatrix<f64>,
}
