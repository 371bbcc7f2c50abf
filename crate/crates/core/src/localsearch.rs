//! Local combinatorial search over single swaps.
//!
//! For a fixed task `k0`, swapping an in-support coordinate `j_out` for an
//! out-of-support coordinate `j_in` changes the objective by a quadratic in
//! the entering coefficient `b`:
//!
//! ```text
//! Δg(b) = A b² + B b + C
//! A = ‖x_in‖²/n + α + λ(K−1)/K
//! B = −(2/n)(x_inᵀr + c·x_inᵀx_out) − (2λ/K) Σ_k β_{k,in}
//! C = (2c/n) x_outᵀr + (c²/n)‖x_out‖² − αc² + λ(−c² + (2c·Σ_k β_{k,out} − c²)/K)
//! ```
//!
//! with `c = β_{k0,out}` and `r` the task residual, so `b̃ = −B/(2A)` and the
//! optimal change is `C − B²/(4A)`. The Zbar change depends only on the row
//! counts `m_out`, `m_in` of `Z`: `Δh = (2δ/K)(m_out − m_in − 1)`.
//!
//! Deltas are measured with intercepts at their optimum (centered data).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::{centered_objective, residual};
use crate::problem::{CenteredProblem, Hyperparameters, ModelFit, MtlProblem};

/// Swaps must improve the objective by more than this to be committed.
pub const IMPROVEMENT_EPS: f64 = 1e-12;
const RESIDUAL_REFRESH: usize = 25;
const DEGENERATE_CURVATURE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct SwapEvaluation {
    pub task: usize,
    pub j_in: usize,
    pub j_out: usize,
    pub b_opt: f64,
    pub delta_g: f64,
    pub delta_h: f64,
    pub delta_total: f64,
}

/// A swap applied to the shared support of every task at once.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonSwapEvaluation {
    pub j_in: usize,
    pub j_out: usize,
    pub b_opt: Vec<f64>,
    pub delta_total: f64,
}

struct Context<'a> {
    cp: &'a CenteredProblem,
    hyper: Hyperparameters,
    b: DMatrix<f64>,
    z: DMatrix<bool>,
    residuals: Vec<DVector<f64>>,
    col_sq: Vec<DVector<f64>>,
}

impl<'a> Context<'a> {
    fn new(cp: &'a CenteredProblem, fit: &ModelFit, hyper: Hyperparameters) -> Result<Self> {
        if fit.b.shape() != (cp.p, cp.k()) || fit.z.shape() != (cp.p, cp.k()) {
            return Err(Error::Dimension(format!("fit shape {:?} does not match problem ({}, {})", fit.b.shape(), cp.p, cp.k())));
        }
        fit.check_feasible(hyper.s, hyper.common_support)?;
        let col_sq = cp
            .tasks
            .iter()
            .map(|t| DVector::from_iterator(cp.p, t.data.x.column_iter().map(|c| c.norm_squared())))
            .collect();
        let mut ctx = Self { cp, hyper, b: fit.b.clone(), z: fit.z.clone(), residuals: Vec::new(), col_sq };
        ctx.refresh_residuals();
        Ok(ctx)
    }

    fn refresh_residuals(&mut self) {
        self.residuals = self
            .cp
            .tasks
            .iter()
            .enumerate()
            .map(|(k, t)| residual(&t.data.x, &t.data.y, self.b.column(k).as_slice()))
            .collect();
    }

    fn row_sum(&self, j: usize) -> f64 {
        (0..self.cp.k()).fold(0.0, |acc, k| acc + self.b[(j, k)])
    }

    fn row_count(&self, j: usize) -> usize {
        (0..self.cp.k()).filter(|&k| self.z[(j, k)]).count()
    }

    fn best_swap(&self, k0: usize) -> Option<SwapEvaluation> {
        let kk = self.cp.k() as f64;
        let p = self.cp.p;
        let (lambda, alpha, delta) = (self.hyper.lambda, self.hyper.alpha, self.hyper.effective_delta());
        let x = &self.cp.tasks[k0].data.x;
        let n = x.nrows() as f64;
        let r = &self.residuals[k0];
        let col_sq = &self.col_sq[k0];
        let support: Vec<usize> = (0..p).filter(|&j| self.z[(j, k0)]).collect();
        let outside: Vec<usize> = (0..p).filter(|&j| !self.z[(j, k0)]).collect();
        if support.is_empty() || outside.is_empty() {
            return None;
        }
        let xr = x.tr_mul(r);
        let row_sums: Vec<f64> = (0..p).map(|j| self.row_sum(j)).collect();
        let counts: Vec<usize> = (0..p).map(|j| self.row_count(j)).collect();

        let per_out: Vec<Option<SwapEvaluation>> = support
            .par_iter()
            .map(|&j_out| {
                let c = self.b[(j_out, k0)];
                let cross = x.tr_mul(&x.column(j_out));
                let s_out = row_sums[j_out];
                let constant = 2.0 * c / n * xr[j_out] + c * c / n * col_sq[j_out] - alpha * c * c
                    + lambda * (-c * c + (2.0 * c * s_out - c * c) / kk);
                let mut best: Option<SwapEvaluation> = None;
                for &j_in in &outside {
                    let a = col_sq[j_in] / n + alpha + lambda * (kk - 1.0) / kk;
                    let lin = -2.0 / n * (xr[j_in] + c * cross[j_in]) - 2.0 * lambda * row_sums[j_in] / kk;
                    let (b_opt, delta_g) = if a > DEGENERATE_CURVATURE {
                        (-lin / (2.0 * a), constant - lin * lin / (4.0 * a))
                    } else {
                        (0.0, constant)
                    };
                    let delta_h = 2.0 * delta / kk * (counts[j_out] as f64 - counts[j_in] as f64 - 1.0);
                    let total = delta_g + delta_h;
                    if best.as_ref().is_none_or(|b| total < b.delta_total) {
                        best = Some(SwapEvaluation { task: k0, j_in, j_out, b_opt, delta_g, delta_h, delta_total: total });
                    }
                }
                best
            })
            .collect();
        // support is ascending in j_out and each entry keeps the first j_in on ties
        let mut best: Option<SwapEvaluation> = None;
        for cand in per_out.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| cand.delta_total < b.delta_total) {
                best = Some(cand);
            }
        }
        best.filter(|b| b.delta_total < -IMPROVEMENT_EPS)
    }

    fn best_common_swap(&self) -> Option<CommonSwapEvaluation> {
        let kk = self.cp.k();
        let kf = kk as f64;
        let p = self.cp.p;
        let (lambda, alpha) = (self.hyper.lambda, self.hyper.alpha);
        let support: Vec<usize> = (0..p).filter(|&j| self.z[(j, 0)]).collect();
        let outside: Vec<usize> = (0..p).filter(|&j| !self.z[(j, 0)]).collect();
        if support.is_empty() || outside.is_empty() {
            return None;
        }
        let xr: Vec<DVector<f64>> = (0..kk).map(|k| self.cp.tasks[k].data.x.tr_mul(&self.residuals[k])).collect();
        let candidates: Vec<Option<CommonSwapEvaluation>> = support
            .par_iter()
            .map(|&j_out| {
                let cross: Vec<DVector<f64>> = (0..kk)
                    .map(|k| {
                        let x = &self.cp.tasks[k].data.x;
                        x.tr_mul(&x.column(j_out))
                    })
                    .collect();
                let mut constant = 0.0;
                let mut sum_c = 0.0;
                let mut sum_c2 = 0.0;
                for k in 0..kk {
                    let n = self.cp.tasks[k].data.n() as f64;
                    let c = self.b[(j_out, k)];
                    constant += 2.0 * c / n * xr[k][j_out] + c * c / n * self.col_sq[k][j_out] - alpha * c * c;
                    sum_c += c;
                    sum_c2 += c * c;
                }
                constant += lambda * (-sum_c2 + sum_c * sum_c / kf);
                let mut best: Option<CommonSwapEvaluation> = None;
                for &j_in in &outside {
                    let mut a = vec![0.0; kk];
                    let mut lin = vec![0.0; kk];
                    for k in 0..kk {
                        let n = self.cp.tasks[k].data.n() as f64;
                        let c = self.b[(j_out, k)];
                        a[k] = self.col_sq[k][j_in] / n + alpha + lambda;
                        lin[k] = -2.0 / n * (xr[k][j_in] + c * cross[k][j_in]);
                    }
                    let b_opt = common_minimizer(&a, &lin, lambda / kf);
                    let value = constant + 0.5 * lin.iter().zip(&b_opt).map(|(l, b)| l * b).sum::<f64>();
                    if best.as_ref().is_none_or(|b| value < b.delta_total) {
                        best = Some(CommonSwapEvaluation { j_in, j_out, b_opt, delta_total: value });
                    }
                }
                best
            })
            .collect();
        let mut best: Option<CommonSwapEvaluation> = None;
        for cand in candidates.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| cand.delta_total < b.delta_total) {
                best = Some(cand);
            }
        }
        best.filter(|b| b.delta_total < -IMPROVEMENT_EPS)
    }

    fn commit(&mut self, swap: &SwapEvaluation) {
        let k = swap.task;
        let x = &self.cp.tasks[k].data.x;
        let c = self.b[(swap.j_out, k)];
        self.residuals[k].axpy(c, &x.column(swap.j_out), 1.0);
        self.residuals[k].axpy(-swap.b_opt, &x.column(swap.j_in), 1.0);
        self.b[(swap.j_out, k)] = 0.0;
        self.z[(swap.j_out, k)] = false;
        self.b[(swap.j_in, k)] = swap.b_opt;
        self.z[(swap.j_in, k)] = true;
    }

    fn commit_common(&mut self, swap: &CommonSwapEvaluation) {
        for k in 0..self.cp.k() {
            let x = &self.cp.tasks[k].data.x;
            let c = self.b[(swap.j_out, k)];
            self.residuals[k].axpy(c, &x.column(swap.j_out), 1.0);
            self.residuals[k].axpy(-swap.b_opt[k], &x.column(swap.j_in), 1.0);
            self.b[(swap.j_out, k)] = 0.0;
            self.z[(swap.j_out, k)] = false;
            self.b[(swap.j_in, k)] = swap.b_opt[k];
            self.z[(swap.j_in, k)] = true;
        }
    }

    fn objective(&self) -> f64 {
        centered_objective(self.cp, &self.b, &self.z, &self.hyper)
    }
}

/// Minimizes `Σ_k (a_k b_k² + l_k b_k) − w (Σ_k b_k)²` (`w = λ/K`).
fn common_minimizer(a: &[f64], lin: &[f64], w: f64) -> Vec<f64> {
    let kk = a.len();
    if a.iter().any(|&v| v <= DEGENERATE_CURVATURE) {
        // a zero column with α = λ = 0: that task's coefficient has no effect
        return (0..kk)
            .map(|k| if a[k] > DEGENERATE_CURVATURE { -lin[k] / (2.0 * a[k]) } else { 0.0 })
            .collect();
    }
    let denom = 1.0 - w * a.iter().map(|v| 1.0 / v).sum::<f64>();
    let total = if denom > 1e-12 {
        -a.iter().zip(lin).map(|(a, l)| l / (2.0 * a)).sum::<f64>() / denom
    } else {
        0.0
    };
    a.iter().zip(lin).map(|(a, l)| (2.0 * w * total - l) / (2.0 * a)).collect()
}

/// Best improving single swap for task `k0`, or `None` when no swap lowers
/// the objective by more than [`IMPROVEMENT_EPS`].
pub fn best_swap(fit: &ModelFit, problem: &MtlProblem, hyper: &Hyperparameters, k0: usize) -> Result<Option<SwapEvaluation>> {
    if k0 >= problem.k() {
        return Err(Error::Dimension(format!("task index {k0} out of range")));
    }
    let cp = problem.centered();
    let ctx = Context::new(&cp, fit, *hyper)?;
    Ok(ctx.best_swap(k0))
}

/// Every candidate swap for task `k0`, without the improvement filter.
pub fn all_swaps(fit: &ModelFit, problem: &MtlProblem, hyper: &Hyperparameters, k0: usize) -> Result<Vec<SwapEvaluation>> {
    if k0 >= problem.k() {
        return Err(Error::Dimension(format!("task index {k0} out of range")));
    }
    let cp = problem.centered();
    let ctx = Context::new(&cp, fit, *hyper)?;
    let p = cp.p;
    let mut out = Vec::new();
    for j_out in (0..p).filter(|&j| ctx.z[(j, k0)]) {
        for j_in in (0..p).filter(|&j| !ctx.z[(j, k0)]) {
            out.push(evaluate_pair(&ctx, k0, j_out, j_in));
        }
    }
    Ok(out)
}

fn evaluate_pair(ctx: &Context<'_>, k0: usize, j_out: usize, j_in: usize) -> SwapEvaluation {
    let kk = ctx.cp.k() as f64;
    let (lambda, alpha, delta) = (ctx.hyper.lambda, ctx.hyper.alpha, ctx.hyper.effective_delta());
    let x = &ctx.cp.tasks[k0].data.x;
    let n = x.nrows() as f64;
    let r = &ctx.residuals[k0];
    let c = ctx.b[(j_out, k0)];
    let xr_out = x.column(j_out).dot(r);
    let xr_in = x.column(j_in).dot(r);
    let cross = x.column(j_in).dot(&x.column(j_out));
    let s_out = ctx.row_sum(j_out);
    let constant = 2.0 * c / n * xr_out + c * c / n * ctx.col_sq[k0][j_out] - alpha * c * c
        + lambda * (-c * c + (2.0 * c * s_out - c * c) / kk);
    let a = ctx.col_sq[k0][j_in] / n + alpha + lambda * (kk - 1.0) / kk;
    let lin = -2.0 / n * (xr_in + c * cross) - 2.0 * lambda * ctx.row_sum(j_in) / kk;
    let (b_opt, delta_g) = if a > DEGENERATE_CURVATURE { (-lin / (2.0 * a), constant - lin * lin / (4.0 * a)) } else { (0.0, constant) };
    let delta_h = 2.0 * delta / kk * (ctx.row_count(j_out) as f64 - ctx.row_count(j_in) as f64 - 1.0);
    SwapEvaluation { task: k0, j_in, j_out, b_opt, delta_g, delta_h, delta_total: delta_g + delta_h }
}

/// Applies a swap to `fit`, re-deriving intercepts and averaged vectors.
pub fn apply_swap(fit: &ModelFit, problem: &MtlProblem, swap: &SwapEvaluation) -> ModelFit {
    let mut b = fit.b.clone();
    let mut z = fit.z.clone();
    b[(swap.j_out, swap.task)] = 0.0;
    z[(swap.j_out, swap.task)] = false;
    b[(swap.j_in, swap.task)] = swap.b_opt;
    z[(swap.j_in, swap.task)] = true;
    let intercepts = problem.centered().intercepts(&b);
    let mut out = ModelFit::from_parts(b, z, intercepts);
    out.objective_trace = fit.objective_trace.clone();
    out.sweeps = fit.sweeps;
    out.swaps = fit.swaps + 1;
    out
}

/// Cycles over tasks committing the best improving swap of each, until a
/// full cycle finds none or `max_iterations` swaps have been committed.
/// In common-support mode a swap moves the shared support of all tasks.
pub fn local_search(fit: &ModelFit, problem: &MtlProblem, hyper: &Hyperparameters, max_iterations: usize) -> Result<ModelFit> {
    hyper.validate(problem.p())?;
    let cp = problem.centered();
    let mut ctx = Context::new(&cp, fit, *hyper)?;
    if max_iterations == 0 {
        return Ok(fit.clone());
    }
    let mut trace = Vec::new();
    let mut commits = 0usize;
    'outer: loop {
        let mut improved = false;
        if hyper.common_support {
            if let Some(sw) = ctx.best_common_swap() {
                ctx.commit_common(&sw);
                improved = true;
                commits += 1;
                after_commit(&mut ctx, commits, &mut trace);
                if commits >= max_iterations {
                    break 'outer;
                }
            }
        } else {
            for k in 0..cp.k() {
                if let Some(sw) = ctx.best_swap(k) {
                    ctx.commit(&sw);
                    improved = true;
                    commits += 1;
                    after_commit(&mut ctx, commits, &mut trace);
                    if commits >= max_iterations {
                        break 'outer;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    if commits == 0 {
        return Ok(fit.clone());
    }
    let intercepts = cp.intercepts(&ctx.b);
    let mut out = ModelFit::from_parts(ctx.b, ctx.z, intercepts);
    out.objective_trace = fit.objective_trace.clone();
    out.objective_trace.extend(trace);
    out.sweeps = fit.sweeps;
    out.swaps = fit.swaps + commits;
    Ok(out)
}

fn after_commit(ctx: &mut Context<'_>, commits: usize, trace: &mut Vec<f64>) {
    if commits % RESIDUAL_REFRESH == 0 {
        ctx.refresh_residuals();
    }
    trace.push(ctx.objective());
}
