use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use shadefuse_core::error::Error;
use shadefuse_core::solver::{
    check_jacobian, compute_step, solve, AutoDiff, CostFunction, Problem, Real, ResidualFn,
    SolveOptions,
};

struct Offset(f64);

impl ResidualFn for Offset {
    fn num_residuals(&self) -> usize {
        1
    }
    fn eval<T: Real>(&self, p: &[T], out: &mut [T]) {
        out[0] = p[0] - self.0;
    }
}

struct Rosenbrock;

impl ResidualFn for Rosenbrock {
    fn num_residuals(&self) -> usize {
        2
    }
    fn eval<T: Real>(&self, p: &[T], out: &mut [T]) {
        out[0] = T::cst(1.0) - p[0];
        out[1] = (p[1] - p[0] * p[0]) * 10.0;
    }
}

/// Row `a · x − b`.
struct LinearRow {
    a: Vec<f64>,
    b: f64,
}

impl ResidualFn for LinearRow {
    fn num_residuals(&self) -> usize {
        1
    }
    fn eval<T: Real>(&self, p: &[T], out: &mut [T]) {
        let mut acc = T::cst(-self.b);
        for (a, x) in self.a.iter().zip(p) {
            acc += *x * *a;
        }
        out[0] = acc;
    }
}

/// Exponential fit residual `y − exp_approx(α t)·β` written with sin/cos to keep it nonlinear.
struct Wave {
    t: f64,
    y: f64,
}

impl ResidualFn for Wave {
    fn num_residuals(&self) -> usize {
        1
    }
    fn eval<T: Real>(&self, p: &[T], out: &mut [T]) {
        out[0] = (p[0] * self.t).sin() * p[1] + (p[0] * self.t * 0.5).cos() - self.y;
    }
}

/// Wraps a block and corrupts one Jacobian entry.
struct Corrupted<C>(C);

impl<C: CostFunction> CostFunction for Corrupted<C> {
    fn num_residuals(&self) -> usize {
        self.0.num_residuals()
    }
    fn parameters(&self) -> &[usize] {
        self.0.parameters()
    }
    fn evaluate(&self, p: &[f64], r: &mut [f64], j: Option<&mut [f64]>) {
        match j {
            Some(j) => {
                self.0.evaluate(p, r, Some(j));
                j[0] += 0.5;
            }
            None => self.0.evaluate(p, r, None),
        }
    }
}

fn linear_problem(rows: &[(Vec<f64>, f64)]) -> Problem<'static> {
    let n = rows[0].0.len();
    let mut pb = Problem::new(n);
    let g = pb.add_group("linear", 1.0);
    for (a, b) in rows {
        pb.add_block(
            g,
            Box::new(AutoDiff::<_, 4>::new(
                LinearRow { a: a.clone(), b: *b },
                (0..n).collect(),
            )),
        );
    }
    pb
}

#[test]
fn scalar_linear_residual_converges_in_three_iterations() {
    let mut pb = Problem::new(1);
    let g = pb.add_group("offset", 1.0);
    pb.add_block(g, Box::new(AutoDiff::<_, 1>::new(Offset(3.0), vec![0])));
    let opts = SolveOptions {
        max_iterations: 3,
        ..Default::default()
    };
    let s = solve(&pb, vec![0.0], &opts).unwrap();
    assert!(s.trace.len() <= 3);
    assert!((s.x[0] - 3.0).abs() < 1e-10, "{}", s.x[0]);
}

#[test]
fn rosenbrock_reaches_minimum() {
    let mut pb = Problem::new(2);
    let g = pb.add_group("rosenbrock", 1.0);
    pb.add_block(g, Box::new(AutoDiff::<_, 2>::new(Rosenbrock, vec![0, 1])));
    let opts = SolveOptions {
        max_iterations: 200,
        relative_cost_tolerance: 1e-14,
        gradient_tolerance: 1e-14,
        ..Default::default()
    };
    let s = solve(&pb, vec![-1.2, 1.0], &opts).unwrap();
    assert!((s.x[0] - 1.0).abs() < 1e-6 && (s.x[1] - 1.0).abs() < 1e-6, "{:?}", s.x);
    for w in s.trace.windows(2) {
        assert!(w[1].cost <= w[0].cost);
    }
}

#[test]
fn overdetermined_linear_matches_normal_equations() {
    let rows: Vec<(Vec<f64>, f64)> = (0..12)
        .map(|i| {
            let t = i as f64 * 0.37;
            (
                vec![1.0, t, (t * 1.3).sin(), t * t * 0.1],
                (t * 0.7).cos() + 0.2 * t,
            )
        })
        .collect();
    let a = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i].0[j]);
    let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let oracle = (a.transpose() * &a)
        .cholesky()
        .unwrap()
        .solve(&(a.transpose() * b));

    let pb = linear_problem(&rows);
    let opts = SolveOptions {
        max_iterations: 20,
        relative_cost_tolerance: 1e-15,
        gradient_tolerance: 1e-15,
        cg_tolerance: 1e-14,
        ..Default::default()
    };
    let s = solve(&pb, vec![0.0; 4], &opts).unwrap();
    for j in 0..4 {
        assert!((s.x[j] - oracle[j]).abs() < 1e-8, "{j}: {} vs {}", s.x[j], oracle[j]);
    }
}

#[test]
fn jacobian_check_on_linear_and_corrupted_blocks() {
    let rows = vec![(vec![1.0, -2.0, 0.5], 1.0), (vec![0.3, 0.0, 4.0], -2.0)];
    let pb = linear_problem(&rows);
    let c = check_jacobian(&pb, &[0.2, -0.7, 3.0], 1e-6).unwrap();
    assert!(c.max_discrepancy < 1e-9, "{c:?}");

    let mut bad = Problem::new(2);
    let g = bad.add_group("wave", 1.0);
    bad.add_block(
        g,
        Box::new(Corrupted(AutoDiff::<_, 2>::new(Wave { t: 0.4, y: 1.0 }, vec![0, 1]))),
    );
    let c = check_jacobian(&bad, &[0.5, 1.5], 1e-6).unwrap();
    assert!(c.max_discrepancy > 0.1, "{c:?}");
    assert_eq!(c.worst_parameter, 0);
}

#[test]
fn autodiff_jacobian_matches_finite_differences_for_nonlinear_block() {
    let mut pb = Problem::new(2);
    let g = pb.add_group("wave", 3.0);
    for i in 0..5 {
        let t = i as f64 * 0.8;
        pb.add_block(
            g,
            Box::new(AutoDiff::<_, 2>::new(Wave { t, y: 0.1 * t }, vec![0, 1])),
        );
    }
    let c = check_jacobian(&pb, &[0.9, -0.4], 1e-6).unwrap();
    assert!(c.max_discrepancy < 1e-7, "{c:?}");
}

#[test]
fn huge_damping_gives_vanishing_step() {
    let rows = vec![(vec![1.0, 2.0], 1.0), (vec![-1.0, 0.5], 3.0), (vec![2.0, 1.0], 0.0)];
    let pb = linear_problem(&rows);
    let x = [0.3, -0.1];
    let small = compute_step(&pb, &x, 1e-4, &SolveOptions::default()).unwrap();
    let big = compute_step(&pb, &x, 1e12, &SolveOptions::default()).unwrap();
    let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(n(&big) < 1e-8 * n(&small), "{} vs {}", n(&big), n(&small));
}

#[test]
fn non_finite_residual_names_block() {
    struct Sqrt;
    impl ResidualFn for Sqrt {
        fn num_residuals(&self) -> usize {
            1
        }
        fn eval<T: Real>(&self, p: &[T], out: &mut [T]) {
            out[0] = p[0].sqrt();
        }
    }
    let mut pb = Problem::new(1);
    let g = pb.add_group("ok", 1.0);
    pb.add_block(g, Box::new(AutoDiff::<_, 1>::new(Offset(1.0), vec![0])));
    let h = pb.add_group("sqrt", 1.0);
    pb.add_block(h, Box::new(AutoDiff::<_, 1>::new(Sqrt, vec![0])));
    match solve(&pb, vec![-1.0], &SolveOptions::default()) {
        Err(Error::NonFinite { block, kind }) => {
            assert_eq!(block, 1);
            assert_eq!(kind, "sqrt");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn rejects_empty_problem() {
    let pb = Problem::new(0);
    assert!(solve(&pb, vec![], &SolveOptions::default()).is_err());
}

fn wave_problem(data: &[(f64, f64)], order: &[usize]) -> Problem<'static> {
    let mut pb = Problem::new(2);
    let g = pb.add_group("wave", 1.0);
    for &i in order {
        let (t, y) = data[i];
        pb.add_block(g, Box::new(AutoDiff::<_, 2>::new(Wave { t, y }, vec![0, 1])));
    }
    pb
}

#[test]
fn block_order_does_not_change_result() {
    let data: Vec<(f64, f64)> = (0..15)
        .map(|i| {
            let t = i as f64 * 0.3;
            (t, (0.8 * t).sin() * 1.2 + (0.4 * t).cos() + 0.01 * (i as f64 * 1.7).sin())
        })
        .collect();
    let fwd: Vec<usize> = (0..data.len()).collect();
    let rev: Vec<usize> = fwd.iter().rev().copied().collect();
    let opts = SolveOptions {
        max_iterations: 50,
        ..Default::default()
    };
    let a = solve(&wave_problem(&data, &fwd), vec![0.7, 1.0], &opts).unwrap();
    let b = solve(&wave_problem(&data, &rev), vec![0.7, 1.0], &opts).unwrap();
    assert!((a.final_cost - b.final_cost).abs() < 1e-10);
}

#[test]
fn group_scale_changes_cost_quadratically() {
    let mut pb = Problem::new(1);
    let g = pb.add_group("offset", 1.0);
    pb.add_block(g, Box::new(AutoDiff::<_, 1>::new(Offset(2.0), vec![0])));
    assert_eq!(pb.cost(&[0.0]), 2.0);
    pb.set_group_scale(g, 3.0);
    assert_eq!(pb.cost(&[0.0]), 18.0);
    assert_eq!(pb.group_energies(&[0.0]), vec![36.0]);
}

#[test]
fn trace_csv_has_header_and_rows() {
    let mut pb = Problem::new(1);
    let g = pb.add_group("offset", 1.0);
    pb.add_block(g, Box::new(AutoDiff::<_, 1>::new(Offset(3.0), vec![0])));
    let s = solve(&pb, vec![0.0], &SolveOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    shadefuse_core::solver::write_trace_csv(&s.trace, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,cost,damping,step_norm,accepted");
    assert_eq!(lines.len(), s.trace.len() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn accepted_cost_never_increases(
        ys in prop::collection::vec(-2.0f64..2.0, 4..12),
        a0 in -1.5f64..1.5,
        b0 in -2.0f64..2.0,
    ) {
        let data: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, y)| (i as f64 * 0.5, *y)).collect();
        let order: Vec<usize> = (0..data.len()).collect();
        let pb = wave_problem(&data, &order);
        let opts = SolveOptions { max_iterations: 30, ..Default::default() };
        let s = solve(&pb, vec![a0, b0], &opts).unwrap();
        let mut prev = s.initial_cost;
        for r in &s.trace {
            prop_assert!(r.cost <= prev);
            prev = r.cost;
        }
        prop_assert!(s.final_cost <= s.initial_cost);
    }
}
