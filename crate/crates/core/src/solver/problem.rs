use rayon::prelude::*;

use super::jet::{Jet, Real};
use crate::error::{Error, Result};

/// A residual block: a small vector-valued function of a few global unknowns.
pub trait CostFunction: Send + Sync {
    fn num_residuals(&self) -> usize;

    /// Global unknown indices this block depends on, in local parameter order.
    fn parameters(&self) -> &[usize];

    /// `params` holds the current values of [`parameters`](Self::parameters).
    /// When requested, `jacobian` is filled row-major (`num_residuals` x `params.len()`).
    fn evaluate(&self, params: &[f64], residuals: &mut [f64], jacobian: Option<&mut [f64]>);
}

/// Residual function written once over [`Real`]; differentiated with [`AutoDiff`].
pub trait ResidualFn: Send + Sync {
    fn num_residuals(&self) -> usize;
    fn eval<T: Real>(&self, params: &[T], out: &mut [T]);
}

/// Forward-mode differentiation of a [`ResidualFn`] with at most `N` local parameters.
pub struct AutoDiff<F, const N: usize> {
    f: F,
    params: Vec<usize>,
}

impl<F: ResidualFn, const N: usize> AutoDiff<F, N> {
    pub fn new(f: F, params: Vec<usize>) -> Self {
        assert!(
            params.len() <= N,
            "block has {} parameters, capacity {}",
            params.len(),
            N
        );
        Self { f, params }
    }

    pub fn inner(&self) -> &F {
        &self.f
    }
}

impl<F: ResidualFn, const N: usize> CostFunction for AutoDiff<F, N> {
    fn num_residuals(&self) -> usize {
        self.f.num_residuals()
    }

    fn parameters(&self) -> &[usize] {
        &self.params
    }

    fn evaluate(&self, params: &[f64], residuals: &mut [f64], jacobian: Option<&mut [f64]>) {
        match jacobian {
            None => self.f.eval(params, residuals),
            Some(jac) => {
                let np = params.len();
                let jets: Vec<Jet<N>> = params
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| Jet::variable(v, i))
                    .collect();
                let mut out = vec![Jet::<N>::constant(0.0); residuals.len()];
                self.f.eval(&jets, &mut out);
                for (r, o) in out.iter().enumerate() {
                    residuals[r] = o.re;
                    jac[r * np..(r + 1) * np].copy_from_slice(&o.eps[..np]);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Group {
    name: String,
    scale: f64,
}

/// Handle to a residual group; every block in a group shares one scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupId(pub usize);

/// Sparse nonlinear least-squares problem `min ½ Σ_g s_g² ‖r_b(x)‖²`.
///
/// Group scales are the square roots of term weights, so reweighting a term
/// never requires rebuilding its blocks.
pub struct Problem<'a> {
    num_unknowns: usize,
    blocks: Vec<Box<dyn CostFunction + 'a>>,
    block_group: Vec<usize>,
    groups: Vec<Group>,
}

impl<'a> Problem<'a> {
    pub fn new(num_unknowns: usize) -> Self {
        Self {
            num_unknowns,
            blocks: Vec::new(),
            block_group: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn add_group(&mut self, name: impl Into<String>, scale: f64) -> GroupId {
        self.groups.push(Group {
            name: name.into(),
            scale,
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn set_group_scale(&mut self, id: GroupId, scale: f64) {
        self.groups[id.0].scale = scale;
    }

    pub fn group_scale(&self, id: GroupId) -> f64 {
        self.groups[id.0].scale
    }

    pub fn group_name(&self, id: GroupId) -> &str {
        &self.groups[id.0].name
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn add_block(&mut self, group: GroupId, block: Box<dyn CostFunction + 'a>) {
        debug_assert!(block
            .parameters()
            .iter()
            .all(|&p| p < self.num_unknowns));
        self.blocks.push(block);
        self.block_group.push(group.0);
    }

    pub fn num_unknowns(&self) -> usize {
        self.num_unknowns
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_residuals(&self) -> usize {
        self.blocks.iter().map(|b| b.num_residuals()).sum()
    }

    pub fn block(&self, i: usize) -> &dyn CostFunction {
        self.blocks[i].as_ref()
    }

    pub fn block_group(&self, i: usize) -> GroupId {
        GroupId(self.block_group[i])
    }

    pub(crate) fn block_scale(&self, i: usize) -> f64 {
        self.groups[self.block_group[i]].scale
    }

    pub(crate) fn block_kind(&self, i: usize) -> String {
        self.groups[self.block_group[i]].name.clone()
    }

    fn gather(&self, i: usize, x: &[f64]) -> Vec<f64> {
        self.blocks[i].parameters().iter().map(|&p| x[p]).collect()
    }

    /// Scaled residuals of one block.
    pub fn block_residuals(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let b = &self.blocks[i];
        let mut r = vec![0.0; b.num_residuals()];
        b.evaluate(&self.gather(i, x), &mut r, None);
        let s = self.block_scale(i);
        r.iter_mut().for_each(|v| *v *= s);
        r
    }

    /// Scaled residuals and row-major Jacobian of one block.
    pub fn block_linearize(&self, i: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let b = &self.blocks[i];
        let np = b.parameters().len();
        let mut r = vec![0.0; b.num_residuals()];
        let mut j = vec![0.0; b.num_residuals() * np];
        b.evaluate(&self.gather(i, x), &mut r, Some(&mut j));
        let s = self.block_scale(i);
        r.iter_mut().for_each(|v| *v *= s);
        j.iter_mut().for_each(|v| *v *= s);
        (r, j)
    }

    /// Per-group sums of squared scaled residuals, indexed by group id.
    pub fn group_energies(&self, x: &[f64]) -> Vec<f64> {
        let per_block: Vec<f64> = (0..self.blocks.len())
            .into_par_iter()
            .map(|i| {
                let b = &self.blocks[i];
                let mut r = vec![0.0; b.num_residuals()];
                b.evaluate(&self.gather(i, x), &mut r, None);
                scaled_square_sum(&r, self.block_scale(i))
            })
            .collect();
        self.accumulate_groups(&per_block)
    }

    fn accumulate_groups(&self, per_block: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.groups.len()];
        for (i, e) in per_block.iter().enumerate() {
            out[self.block_group[i]] += e;
        }
        out
    }

    /// `½ Σ s² r²` at `x`. Non-finite values propagate into the result.
    pub fn cost(&self, x: &[f64]) -> f64 {
        0.5 * self.group_energies(x).iter().sum::<f64>()
    }

    /// Unscaled residuals and Jacobian of all blocks at `x`.
    pub(crate) fn linearize(&self, x: &[f64]) -> Result<Linearization> {
        let mut row_offsets = Vec::with_capacity(self.blocks.len() + 1);
        let mut val_offsets = Vec::with_capacity(self.blocks.len() + 1);
        let (mut rows, mut vals) = (0usize, 0usize);
        for b in &self.blocks {
            row_offsets.push(rows);
            val_offsets.push(vals);
            rows += b.num_residuals();
            vals += b.num_residuals() * b.parameters().len();
        }
        row_offsets.push(rows);
        val_offsets.push(vals);

        let mut residuals = vec![0.0; rows];
        let mut jacobian = vec![0.0; vals];
        let rs = split_sizes(
            &mut residuals,
            self.blocks.iter().map(|b| b.num_residuals()),
        );
        let js = split_sizes(
            &mut jacobian,
            self.blocks
                .iter()
                .map(|b| b.num_residuals() * b.parameters().len()),
        );
        let bad: Vec<bool> = rs
            .into_par_iter()
            .zip(js.into_par_iter())
            .enumerate()
            .map(|(i, (r, j))| {
                let p = self.gather(i, x);
                self.blocks[i].evaluate(&p, r, Some(j));
                !(r.iter().all(|v| v.is_finite()) && j.iter().all(|v| v.is_finite()))
            })
            .collect();
        if let Some(i) = bad.iter().position(|&b| b) {
            return Err(Error::NonFinite {
                block: i,
                kind: self.block_kind(i),
            });
        }
        Ok(Linearization {
            residuals,
            jacobian,
            row_offsets,
            val_offsets,
        })
    }
}

pub(crate) struct Linearization {
    pub residuals: Vec<f64>,
    pub jacobian: Vec<f64>,
    pub row_offsets: Vec<usize>,
    pub val_offsets: Vec<usize>,
}

impl Linearization {
    /// Same summation order as [`Problem::cost`], so the two agree bitwise.
    pub fn cost(&self, problem: &Problem) -> f64 {
        let per_block: Vec<f64> = (0..problem.num_blocks())
            .map(|i| {
                let r = &self.residuals[self.row_offsets[i]..self.row_offsets[i + 1]];
                scaled_square_sum(r, problem.block_scale(i))
            })
            .collect();
        0.5 * problem.accumulate_groups(&per_block).iter().sum::<f64>()
    }

    /// `y = J v` with group scales applied.
    pub fn apply(&self, problem: &Problem, v: &[f64], y: &mut [f64]) {
        let ys = split_sizes(
            y,
            (0..problem.num_blocks()).map(|i| self.row_offsets[i + 1] - self.row_offsets[i]),
        );
        ys.into_par_iter().enumerate().for_each(|(i, yb)| {
            let params = problem.block(i).parameters();
            let np = params.len();
            let s = problem.block_scale(i);
            let jac = &self.jacobian[self.val_offsets[i]..self.val_offsets[i + 1]];
            for (r, out) in yb.iter_mut().enumerate() {
                let row = &jac[r * np..(r + 1) * np];
                let mut acc = 0.0;
                for (c, &p) in params.iter().enumerate() {
                    acc += row[c] * v[p];
                }
                *out = s * acc;
            }
        });
    }

    /// `x += Jᵀ y` with group scales applied. Sequential so the summation order is fixed.
    pub fn apply_transpose_add(&self, problem: &Problem, y: &[f64], x: &mut [f64]) {
        for i in 0..problem.num_blocks() {
            let params = problem.block(i).parameters();
            let np = params.len();
            let s = problem.block_scale(i);
            let jac = &self.jacobian[self.val_offsets[i]..self.val_offsets[i + 1]];
            let yb = &y[self.row_offsets[i]..self.row_offsets[i + 1]];
            for (r, &yr) in yb.iter().enumerate() {
                let w = s * yr;
                if w == 0.0 {
                    continue;
                }
                let row = &jac[r * np..(r + 1) * np];
                for (c, &p) in params.iter().enumerate() {
                    x[p] += row[c] * w;
                }
            }
        }
    }

    /// Scaled residual vector.
    pub fn scaled_residuals(&self, problem: &Problem) -> Vec<f64> {
        let mut out = self.residuals.clone();
        for i in 0..problem.num_blocks() {
            let s = problem.block_scale(i);
            out[self.row_offsets[i]..self.row_offsets[i + 1]]
                .iter_mut()
                .for_each(|v| *v *= s);
        }
        out
    }

    /// Diagonal of `JᵀJ` with group scales applied.
    pub fn normal_diagonal(&self, problem: &Problem) -> Vec<f64> {
        let mut d = vec![0.0; problem.num_unknowns()];
        for i in 0..problem.num_blocks() {
            let params = problem.block(i).parameters();
            let np = params.len();
            let s2 = problem.block_scale(i).powi(2);
            let jac = &self.jacobian[self.val_offsets[i]..self.val_offsets[i + 1]];
            for row in jac.chunks_exact(np.max(1)) {
                for (c, &p) in params.iter().enumerate() {
                    d[p] += s2 * row[c] * row[c];
                }
            }
        }
        d
    }
}

fn scaled_square_sum(r: &[f64], s: f64) -> f64 {
    r.iter().map(|v| (s * v) * (s * v)).sum()
}

pub(crate) fn split_sizes<T>(mut buf: &mut [T], sizes: impl Iterator<Item = usize>) -> Vec<&mut [T]> {
    let mut out = Vec::new();
    for n in sizes {
        let (a, b) = std::mem::take(&mut buf).split_at_mut(n);
        out.push(a);
        buf = b;
    }
    out
}
