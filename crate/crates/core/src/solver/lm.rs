use std::io::Write;
use std::path::Path;

use super::problem::{Linearization, Problem};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub gradient_tolerance: f64,
    pub relative_cost_tolerance: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    /// A capped CG run whose relative residual is still above this is a solve failure.
    pub cg_failure_residual: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            gradient_tolerance: 1e-8,
            relative_cost_tolerance: 1e-6,
            cg_tolerance: 1e-8,
            cg_max_iterations: 500,
            cg_failure_residual: 1e-2,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.initial_damping,
            self.gradient_tolerance,
            self.relative_cost_tolerance,
            self.cg_tolerance,
            self.cg_failure_residual,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) || self.damping_increase <= 1.0 {
            return Err(Error::InvalidInput("solver tolerances must be positive".into()));
        }
        if !(self.damping_decrease > 0.0 && self.damping_decrease < 1.0) {
            return Err(Error::InvalidInput("damping decrease must be in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    GradientTolerance,
    CostTolerance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost of the current (accepted) iterate after this iteration.
    pub cost: f64,
    /// Cost of the trial point; infinite when it was not finite.
    pub trial_cost: f64,
    pub damping: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub cg_iterations: usize,
}

/// Resumable LM state, so callers can change group scales between iterations.
pub struct LmState {
    pub x: Vec<f64>,
    pub damping: f64,
    pub iteration: usize,
    lin: Option<Linearization>,
}

impl LmState {
    pub fn new(x0: Vec<f64>, options: &SolveOptions) -> Self {
        Self {
            x: x0,
            damping: options.initial_damping,
            iteration: 0,
            lin: None,
        }
    }

    fn linearization(&mut self, problem: &Problem) -> Result<&Linearization> {
        if self.lin.is_none() {
            self.lin = Some(problem.linearize(&self.x)?);
        }
        Ok(self.lin.as_ref().unwrap())
    }

    /// Cost at the current iterate under the problem's current group scales.
    pub fn cost(&mut self, problem: &Problem) -> Result<f64> {
        Ok(self.linearization(problem)?.cost(problem))
    }

    /// One damped Gauss-Newton trial. Returns the record and an optional termination.
    pub fn iterate(
        &mut self,
        problem: &Problem,
        options: &SolveOptions,
    ) -> Result<(IterationRecord, Option<Termination>)> {
        let n = problem.num_unknowns();
        let damping = self.damping;
        self.iteration += 1;
        let iteration = self.iteration;
        let lin = self.linearization(problem)?;
        let cost = lin.cost(problem);
        let r = lin.scaled_residuals(problem);
        let mut g = vec![0.0; n];
        lin.apply_transpose_add(problem, &r, &mut g);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < options.gradient_tolerance {
            let rec = IterationRecord {
                iteration,
                cost,
                trial_cost: cost,
                damping,
                step_norm: 0.0,
                accepted: false,
                cg_iterations: 0,
            };
            return Ok((rec, Some(Termination::GradientTolerance)));
        }
        let (delta, cg_iterations) = damped_step(problem, lin, &g, damping, options)?;
        let step_norm = norm(&delta);
        let trial: Vec<f64> = self.x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let trial_cost = problem.cost(&trial);
        let trial_cost = if trial_cost.is_finite() {
            trial_cost
        } else {
            f64::INFINITY
        };

        let mut termination = None;
        let accepted = trial_cost < cost;
        let new_cost = if accepted {
            self.x = trial;
            self.lin = None;
            self.damping = (self.damping * options.damping_decrease).max(1e-12);
            if (cost - trial_cost) <= options.relative_cost_tolerance * cost {
                termination = Some(Termination::CostTolerance);
            }
            trial_cost
        } else {
            self.damping = (self.damping * options.damping_increase).min(1e16);
            cost
        };
        let rec = IterationRecord {
            iteration,
            cost: new_cost,
            trial_cost,
            damping,
            step_norm,
            accepted,
            cg_iterations,
        };
        Ok((rec, termination))
    }
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub x: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub trace: Vec<IterationRecord>,
    pub termination: Termination,
}

/// Levenberg-Marquardt with Marquardt (diagonal) damping and a matrix-free PCG inner solve.
pub fn solve(problem: &Problem, x0: Vec<f64>, options: &SolveOptions) -> Result<Summary> {
    options.validate()?;
    if problem.num_unknowns() == 0 || problem.num_residuals() == 0 {
        return Err(Error::InvalidInput("problem has no unknowns or residuals".into()));
    }
    if x0.len() != problem.num_unknowns() {
        return Err(Error::InvalidInput(format!(
            "initial point has {} entries, problem has {} unknowns",
            x0.len(),
            problem.num_unknowns()
        )));
    }
    let mut state = LmState::new(x0, options);
    let initial_cost = state.cost(problem)?;
    let mut trace = Vec::new();
    let mut termination = Termination::MaxIterations;
    for _ in 0..options.max_iterations {
        let (rec, term) = state.iterate(problem, options)?;
        trace.push(rec);
        if let Some(t) = term {
            termination = t;
            break;
        }
    }
    let final_cost = state.cost(problem)?;
    Ok(Summary {
        x: state.x,
        initial_cost,
        final_cost,
        trace,
        termination,
    })
}

/// The LM step `δ` at `x` for a fixed damping, exposed for diagnostics.
pub fn compute_step(
    problem: &Problem,
    x: &[f64],
    damping: f64,
    options: &SolveOptions,
) -> Result<Vec<f64>> {
    let lin = problem.linearize(x)?;
    let r = lin.scaled_residuals(problem);
    let mut g = vec![0.0; problem.num_unknowns()];
    lin.apply_transpose_add(problem, &r, &mut g);
    Ok(damped_step(problem, &lin, &g, damping, options)?.0)
}

/// Solves `(JᵀJ + μD) δ = −g` with Jacobi-preconditioned CG, `D = clamp(diag(JᵀJ))`.
fn damped_step(
    problem: &Problem,
    lin: &Linearization,
    g: &[f64],
    damping: f64,
    options: &SolveOptions,
) -> Result<(Vec<f64>, usize)> {
    let n = problem.num_unknowns();
    let diag = lin.normal_diagonal(problem);
    let reg: Vec<f64> = diag.iter().map(|d| damping * d.clamp(1e-6, 1e32)).collect();
    let precond: Vec<f64> = diag.iter().zip(&reg).map(|(d, r)| 1.0 / (d + r)).collect();
    let mut jv = vec![0.0; problem.num_residuals()];
    let apply = |v: &[f64], out: &mut [f64], jv: &mut [f64]| {
        lin.apply(problem, v, jv);
        out.iter_mut().zip(v).zip(&reg).for_each(|((o, vi), ri)| *o = ri * vi);
        lin.apply_transpose_add(problem, jv, out);
    };

    let b: Vec<f64> = g.iter().map(|v| -v).collect();
    let bnorm = norm(&b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut it = 0;
    let mut rel = 1.0;
    while it < options.cg_max_iterations {
        apply(&p, &mut ap, &mut jv);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        rel = norm(&r) / bnorm;
        if rel <= options.cg_tolerance {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if !rel.is_finite() || rel > options.cg_failure_residual || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::LinearSolve {
            residual: rel,
            iterations: it,
        });
    }
    Ok((x, it))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianCheck {
    pub max_discrepancy: f64,
    pub worst_block: usize,
    pub worst_parameter: usize,
    pub entries: usize,
}

/// Compares block Jacobians against central differences with step
/// `h_rel · max(1, |x_j|)`. Only the listed blocks are checked.
pub fn check_jacobian_blocks(
    problem: &Problem,
    x: &[f64],
    h_rel: f64,
    blocks: &[usize],
) -> Result<JacobianCheck> {
    if !(h_rel > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let mut out = JacobianCheck {
        max_discrepancy: 0.0,
        worst_block: 0,
        worst_parameter: 0,
        entries: 0,
    };
    let mut xp = x.to_vec();
    for &b in blocks {
        let (r, jac) = problem.block_linearize(b, x);
        let nonfinite = || Error::NonFinite {
            block: b,
            kind: problem.block_kind(b),
        };
        if r.iter().chain(&jac).any(|v| !v.is_finite()) {
            return Err(nonfinite());
        }
        let params = problem.block(b).parameters().to_vec();
        let np = params.len();
        for (c, &p) in params.iter().enumerate() {
            let h = h_rel * x[p].abs().max(1.0);
            xp[p] = x[p] + h;
            let rp = problem.block_residuals(b, &xp);
            xp[p] = x[p] - h;
            let rm = problem.block_residuals(b, &xp);
            xp[p] = x[p];
            for row in 0..r.len() {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                if !fd.is_finite() {
                    return Err(nonfinite());
                }
                let d = (jac[row * np + c] - fd).abs() / fd.abs().max(1.0);
                out.entries += 1;
                if d > out.max_discrepancy {
                    out.max_discrepancy = d;
                    out.worst_block = b;
                    out.worst_parameter = p;
                }
            }
        }
    }
    Ok(out)
}

/// [`check_jacobian_blocks`] over every block.
pub fn check_jacobian(problem: &Problem, x: &[f64], h_rel: f64) -> Result<JacobianCheck> {
    let all: Vec<usize> = (0..problem.num_blocks()).collect();
    check_jacobian_blocks(problem, x, h_rel, &all)
}

pub fn write_trace_csv(trace: &[IterationRecord], path: &Path) -> Result<()> {
    let mut s = String::from("iteration,cost,damping,step_norm,accepted\n");
    for r in trace {
        s.push_str(&format!(
            "{},{:.17e},{:.6e},{:.17e},{}\n",
            r.iteration, r.cost, r.damping, r.step_norm, r.accepted as u8
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(s.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
