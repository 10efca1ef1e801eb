use dc3::acopf::{AcopfFamily, Admittance, BusType, CaseError, PowerCase};
use dc3::autodiff::finite_difference_check;
use dc3::dataset::sample_instances;
use dc3::dc3::soft_loss;
use dc3::family::{complete_on_tape, evaluate_point};
use dc3::{ProblemFamily, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASE57_TEXT: &str = include_str!("../data/case57.m");

/// Data rows of one `mpc.<table> = [ ... ];` block, counted straight from
/// the file text.
fn count_rows(text: &str, table: &str) -> usize {
    let head = format!("mpc.{table} = [");
    let start = text.find(&head).expect("table present") + head.len();
    let body = &text[start..start + text[start..].find("];").expect("table closed")];
    body.lines().map(|l| l.split('%').next().unwrap().trim()).filter(|l| !l.is_empty()).count()
}

fn two_bus(extra_bus_cols: &str) -> String {
    format!(
        "function mpc = two\nmpc.baseMVA = 100;\nmpc.bus = [\n\
         1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;\n\
         2 1 0 0 0 0 1 1 0 0 1 1.1{extra_bus_cols};\n];\n\
         mpc.gen = [\n1 0 0 100 -100 1 100 1 200 0;\n];\n\
         mpc.branch = [\n1 2 0 0.1 0 0 0 0 0 0 1;\n];\n\
         mpc.gencost = [\n2 0 0 3 0.01 10 0;\n];\n"
    )
}

#[test]
fn bundled_case_counts() {
    let c = PowerCase::case57();
    assert_eq!(c.buses.len(), 57);
    assert_eq!(c.generators.len(), count_rows(CASE57_TEXT, "gen"));
    assert_eq!(c.branches.len(), count_rows(CASE57_TEXT, "branch"));
    assert_eq!(c.gencost.len(), c.generators.len());
    assert_eq!(c.buses.iter().filter(|b| b.kind == BusType::Reference).count(), 1);
}

#[test]
fn bundled_case_round_trips() {
    let c = PowerCase::case57();
    let text = c.to_matpower();
    assert_eq!(PowerCase::parse(&text).unwrap(), c);
    assert_eq!(PowerCase::parse(&text).unwrap().to_matpower(), text);
}

#[test]
fn short_bus_row_names_its_line() {
    assert!(PowerCase::parse(&two_bus(" 0.9")).is_ok());
    match PowerCase::parse(&two_bus("")) {
        Err(CaseError::Parse { line, table, .. }) => assert_eq!((line, table.as_str()), (5, "bus")),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn single_line_admittance() {
    let w = Admittance::build(&PowerCase::parse(&two_bus(" 0.9")).unwrap());
    let want_im = [[-10.0, 10.0], [10.0, -10.0]];
    for i in 0..2 {
        for j in 0..2 {
            assert_eq!(w.wr[(i, j)], 0.0);
            assert!((w.wi[(i, j)] - want_im[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn admittance_rows_sum_to_zero_without_shunts_or_taps() {
    let mut c = PowerCase::case57();
    for b in &mut c.buses {
        b.gs = 0.0;
        b.bs = 0.0;
    }
    for br in &mut c.branches {
        br.b = 0.0;
        br.ratio = 0.0;
        br.angle = 0.0;
    }
    let w = Admittance::build(&c);
    for i in 0..w.buses() {
        let (sr, si): (f64, f64) = (w.wr.row(i).sum(), w.wi.row(i).sum());
        assert!(sr.abs() < 1e-12 && si.abs() < 1e-12, "row {i}: {sr} {si}");
    }
}

#[test]
fn bus_shunt_touches_its_diagonal_only() {
    let mut c = PowerCase::case57();
    let before = Admittance::build(&c);
    let k = 30;
    c.buses[k].bs += 25.0;
    let after = Admittance::build(&c);
    for i in 0..57 {
        for j in 0..57 {
            let d = after.wi[(i, j)] - before.wi[(i, j)];
            let want = if (i, j) == (k, k) { 25.0 / c.base_mva } else { 0.0 };
            assert!((d - want).abs() < 1e-12);
            assert_eq!(after.wr[(i, j)], before.wr[(i, j)]);
        }
    }
}

#[test]
fn two_bus_flat_start_needs_no_newton_step() {
    let fam = AcopfFamily::new(PowerCase::parse(&two_bus(" 0.9")).unwrap()).unwrap();
    let x = Tensor::zeros(1, fam.dims().d);
    let z = Tensor::filled(1, fam.dims().m(), 1.0);
    let (c, trace) = fam.complete_with_trace(&x, &z, None).unwrap();
    assert!(trace[0].converged && trace[0].iterations <= 1);
    assert!(fam.balance(&x, &c.y).max_abs() < 1e-10);
}

fn midpoint(fam: &AcopfFamily, rows: usize) -> Tensor {
    let mut tape = Tape::new();
    let raw = tape.constant(Tensor::zeros(rows, fam.dims().m()));
    let z = fam.decode_partial(&mut tape, raw).unwrap();
    tape.value(z).clone()
}

#[test]
fn decoded_partials_stay_in_their_boxes() {
    let fam = AcopfFamily::case57();
    let (lo, hi) = fam.partial_bounds();
    let mid = midpoint(&fam, 1);
    for j in 0..lo.cols() {
        assert!((mid.get(0, j) - 0.5 * (lo.get(0, j) + hi.get(0, j))).abs() < 1e-15);
    }
    let mut tape = Tape::new();
    let raw = tape.constant(Tensor::filled(1, lo.cols(), -1e3));
    let z = fam.decode_partial(&mut tape, raw).unwrap();
    assert_eq!(tape.value(z), hi);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw = Tensor::from_fn(50, lo.cols(), |_, _| rng.gen_range(-20.0..20.0));
    let mut tape = Tape::new();
    let r = tape.constant(raw);
    let z = fam.decode_partial(&mut tape, r).unwrap();
    let z = tape.value(z);
    for i in 0..50 {
        for j in 0..lo.cols() {
            assert!(z.get(i, j) >= lo.get(0, j) && z.get(i, j) <= hi.get(0, j));
        }
    }
}

#[test]
fn nominal_completion_converges_and_balances() {
    let fam = AcopfFamily::case57();
    let x = fam.nominal_input();
    let (c, trace) = fam.complete_with_trace(&x, &midpoint(&fam, 1), None).unwrap();
    assert!(trace[0].converged && trace[0].iterations <= 25, "{trace:?}");
    let bal = fam.balance(&x, &c.y);
    assert!(bal.max_abs() < 1e-6);

    // Rows closed by the second step: real power at the reference bus and
    // reactive power at every generator bus.
    let nb = 57;
    let case = fam.case();
    for (k, bus) in case.buses.iter().enumerate() {
        if bus.kind == BusType::Reference {
            assert!(bal.get(0, k).abs() < 1e-10);
        }
        if bus.kind != BusType::Load {
            assert!(bal.get(0, nb + k).abs() < 1e-10);
        }
    }
}

#[test]
fn sampled_loads_and_split() {
    let fam = AcopfFamily::case57();
    let data = sample_instances(&fam, 1200, 3);
    assert_eq!(data.splits.test.len(), 100);
    let nominal = fam.nominal_input();
    for i in 0..data.len() {
        for (v, n) in data.x.row(i).iter().zip(nominal.data()) {
            assert!((v - n).abs() <= 0.1 * n.abs() + 1e-15);
        }
    }
}

#[test]
fn objective_and_boxes_at_simple_points() {
    let fam = AcopfFamily::case57();
    let x = fam.nominal_input();
    let e = evaluate_point(&fam, &x, &Tensor::zeros(1, fam.dims().n)).unwrap();
    assert_eq!(e.objective.item(), 0.0);

    let (c, _) = fam.complete_with_trace(&x, &midpoint(&fam, 1), None).unwrap();
    let mut y = c.y.clone();
    let case = fam.case();
    for (g, gen) in case.generators.iter().enumerate() {
        y.set(0, g, 0.5 * (gen.pmin + gen.pmax) / case.base_mva);
    }
    let e = evaluate_point(&fam, &x, &y).unwrap();
    let pg_rows = 2 * case.generators.len();
    assert!(e.ineq.row(0)[..pg_rows].iter().all(|v| *v < 0.0));
}

fn acopf_loss(fam: &AcopfFamily, x: &Tensor, z: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let zv = tape.leaf(z.clone());
    let (y, _) = complete_on_tape(&mut tape, fam, x, zv, None).unwrap();
    let l = soft_loss(&mut tape, fam, xv, y, 5.0, 5.0).unwrap();
    tape.value(l).item()
}

#[test]
fn completion_backward_matches_finite_differences() {
    let fam = AcopfFamily::case57();
    let (lo, hi) = fam.partial_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = fam.sample_inputs(20, 4);
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        let x = inputs.select_rows(&[t]);
        let z = Tensor::from_fn(1, lo.cols(), |_, j| {
            let a: f64 = rng.gen_range(0.2..0.8);
            lo.get(0, j) + a * (hi.get(0, j) - lo.get(0, j))
        });
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let zv = tape.leaf(z.clone());
        let (y, _) = complete_on_tape(&mut tape, &fam, &x, zv, None).unwrap();
        let l = soft_loss(&mut tape, &fam, xv, y, 5.0, 5.0).unwrap();
        let grad = tape.backward(l).unwrap().get_or_zeros(zv, &z);
        let err = finite_difference_check::<()>(|p| Ok(acopf_loss(&fam, &x, &Tensor::row_vector(p))), z.data(), grad.data(), 1e-6)
            .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn completion_tangent_keeps_balance_to_first_order() {
    let fam = AcopfFamily::case57();
    let x = fam.nominal_input();
    let z = midpoint(&fam, 1);
    let c = fam.complete(&x, &z, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = Tensor::from_fn(1, z.cols(), |_, _| rng.gen_range(-1.0..1.0));
    let dy = c.linearization.jvp(&u).unwrap();
    let resid = |eps: f64| {
        let y = c.y.zip_map(&dy, |a, b| a + eps * b);
        fam.balance(&x, &y).max_abs()
    };
    let (r1, r2) = (resid(1e-3), resid(1e-4));
    assert!(r1 < 1e-3, "{r1:e}");
    // Second order: a tenfold smaller step gives a roughly hundredfold smaller residual.
    assert!(r2 < r1 / 50.0, "{r1:e} {r2:e}");

    let zero = Tensor::zeros(1, z.cols());
    assert_eq!(c.linearization.jvp(&zero).unwrap().max_abs(), 0.0);
}

#[test]
fn per_unit_rescaling_leaves_the_physical_solution_unchanged() {
    let a = AcopfFamily::case57();
    let mut case = PowerCase::case57();
    case.base_mva *= 2.0;
    for br in &mut case.branches {
        br.r *= 2.0;
        br.x *= 2.0;
        br.b /= 2.0;
    }
    let b = AcopfFamily::new(case).unwrap();
    let xa = a.nominal_input();
    let xb = b.nominal_input();
    assert!(xa.zip_map(&xb, |u, v| u - 2.0 * v).max_abs() < 1e-12);

    let ng = a.case().generators.len();
    let za = midpoint(&a, 1);
    let zb = Tensor::from_fn(1, za.cols(), |_, j| {
        if a.partial_columns()[j] < ng {
            za.get(0, j) / 2.0
        } else {
            za.get(0, j)
        }
    });
    let ya = a.complete(&xa, &za, None).unwrap().y;
    let yb = b.complete(&xb, &zb, None).unwrap().y;
    for j in 0..ya.cols() {
        let s = if j < 2 * ng { 2.0 } else { 1.0 };
        assert!((ya.get(0, j) - s * yb.get(0, j)).abs() < 1e-7, "column {j}");
    }
    let fa = evaluate_point(&a, &xa, &ya).unwrap().objective.item();
    let fb = evaluate_point(&b, &xb, &yb).unwrap().objective.item();
    assert!((fa - fb).abs() < 1e-9 * fa.abs());
}
