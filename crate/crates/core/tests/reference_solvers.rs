use dc3::family::evaluate_point;
use dc3::qp::{ObjectiveKind, QpFamily};
use dc3::reference::{
    admm_labels, barrier_labels, solve_reduced_barrier, AdmmSettings, AdmmSolver, BarrierSettings, Status,
};
use dc3::{ProblemFamily, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `min ½yᵀQy + pᵀy s.t. Ay = x` through the KKT system.
fn kkt_solve(q: &[f64], p: &[f64], a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (n, k) = (q.len(), a.rows());
    let mut m = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    for i in 0..n {
        m[(i, i)] = q[i];
        rhs[i] = -p[i];
    }
    for r in 0..k {
        for c in 0..n {
            m[(n + r, c)] = a.get(r, c);
            m[(c, n + r)] = a.get(r, c);
        }
        rhs[n + r] = x[r];
    }
    let sol = m.lu().solve(&rhs).expect("KKT matrix is nonsingular");
    sol.rows(0, n).iter().copied().collect()
}

fn equality_only_family() -> QpFamily {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, k) = (12, 5);
    QpFamily::from_parts(
        0,
        ObjectiveKind::Quadratic,
        Tensor::from_fn(1, n, |_, _| rng.gen_range(0.5..1.5)),
        Tensor::from_fn(1, n, |_, _| rng.gen_range(0.0..1.0)),
        Tensor::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0)),
        Tensor::zeros(0, n),
        Some(Tensor::zeros(1, 0)),
        None,
    )
    .unwrap()
}

#[test]
fn admm_matches_kkt_without_inequalities() {
    let fam = equality_only_family();
    let solver = AdmmSolver::for_family(&fam, AdmmSettings::default()).unwrap();
    let x = fam.sample_inputs(10, 2);
    for i in 0..x.rows() {
        let s = solver.solve(x.row(i)).unwrap();
        let exact = kkt_solve(fam.q_diag.data(), fam.p.data(), &fam.a, x.row(i));
        let err = s.y.iter().zip(&exact).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        assert!(err < 1e-6, "row {i}: {err:e}");
    }
}

#[test]
fn labels_match_kkt_and_recomplete() {
    let fam = equality_only_family();
    let x = fam.sample_inputs(8, 6);
    let set = admm_labels(&fam, &x, AdmmSettings::default()).unwrap();
    let c = fam.complete(&x, &set.labels, None).unwrap();
    assert!(c.y.zip_map(&set.y, |a, b| a - b).max_abs() < 1e-6);
    for i in 0..x.rows() {
        let exact = Tensor::row_vector(&kkt_solve(fam.q_diag.data(), fam.p.data(), &fam.a, x.row(i)));
        let want = fam.partial_of(&exact);
        let err = want.data().iter().zip(set.labels.row(i)).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        assert!(err < 1e-6);
    }
}

#[test]
fn admm_and_barrier_agree_on_convex_family() {
    let fam = QpFamily::generate(1, 50, 25, 25, ObjectiveKind::Quadratic).unwrap();
    let solver = AdmmSolver::for_family(&fam, AdmmSettings::default()).unwrap();
    let x = fam.sample_inputs(6, 9);
    for i in 0..x.rows() {
        let a = solver.solve(x.row(i)).unwrap();
        let b = solve_reduced_barrier(&fam, &x.select_rows(&[i]), &BarrierSettings::default()).unwrap();
        let rel = (a.objective - b.objective).abs() / a.objective.abs();
        assert!(rel < 1e-3, "row {i}: admm {} barrier {}", a.objective, b.objective);
    }
}

/// `min ½y₁² + ½y₂²` with `y₂ = 0` and `y₁ ≥ 1`.
fn bound_family() -> QpFamily {
    QpFamily::from_parts(
        0,
        ObjectiveKind::Quadratic,
        Tensor::row_vector(&[1.0, 1.0]),
        Tensor::row_vector(&[0.0, 0.0]),
        Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap(),
        Some(Tensor::row_vector(&[-1.0])),
        Some(vec![0]),
    )
    .unwrap()
}

#[test]
fn active_bound_is_found_by_both_solvers() {
    let fam = bound_family();
    let x = Tensor::row_vector(&[0.0]);
    let a = AdmmSolver::for_family(&fam, AdmmSettings::default()).unwrap().solve(x.data()).unwrap();
    assert_eq!(a.status, Status::Optimal);
    assert!((a.y[0] - 1.0).abs() < 1e-4);

    let coarse = BarrierSettings { rounds: 2, ..BarrierSettings::default() };
    let fine = BarrierSettings::default();
    let yc = solve_reduced_barrier(&fam, &x, &coarse).unwrap().y[0];
    let yf = solve_reduced_barrier(&fam, &x, &fine).unwrap().y[0];
    assert!(yc > yf && yf > 1.0);
    assert!((yf - 1.0).abs() < 1e-3);
}

#[test]
fn barrier_reaches_stationary_interior_points_on_nonconvex_family() {
    let fam = QpFamily::generate(1, 50, 25, 25, ObjectiveKind::Sine).unwrap();
    let x = fam.sample_inputs(5, 3);
    for i in 0..x.rows() {
        let s = solve_reduced_barrier(&fam, &x.select_rows(&[i]), &BarrierSettings::default()).unwrap();
        assert!(s.stationarity < 1e-5, "row {i}: stationarity {:e}", s.stationarity);
        let e = evaluate_point(&fam, &x.select_rows(&[i]), &Tensor::row_vector(&s.y)).unwrap();
        assert!(e.ineq.data().iter().all(|g| *g <= 1e-8));
        assert!(e.eq.max_abs() < 1e-8);
    }
}

#[test]
fn barrier_labels_are_deterministic() {
    let fam = QpFamily::generate(2, 20, 10, 10, ObjectiveKind::Sine).unwrap();
    let x = fam.sample_inputs(3, 1);
    let a = barrier_labels(&fam, &x, &BarrierSettings::default()).unwrap();
    let b = barrier_labels(&fam, &x, &BarrierSettings::default()).unwrap();
    assert_eq!(a.y, b.y);
    assert_eq!(a.objective, b.objective);
}
