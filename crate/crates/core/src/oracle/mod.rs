//! Exact solutions for small instances by exhaustive support enumeration,
//! plus export of the big-M mixed-integer model.
//!
//! With `Z` fixed the problem is a convex quadratic in the stacked active
//! coefficients. Writing `β̄` as the task mean turns the Bbar term into
//! `λ(Σ_k‖β_k‖² − ‖Σ_k β_k‖²/K)`, so the normal equations are
//!
//! ```text
//! H_kk = G_k[S_k, S_k] + (α + λ) I,   H_(k,j),(l,j) −= λ/K,   H v = c
//! ```
//!
//! with `G_k = X_kᵀX_k/n_k` and `c_k = X_kᵀy_k/n_k` on centered data.

pub mod lp;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::centered_objective;
use crate::problem::{CenteredProblem, Hyperparameters, ModelFit, MtlProblem};

pub use lp::{assignment, export_mip, parse_lp, LpModel, MipMode, MipSummary};

/// Diagonal jitter used when the restricted system is not positive definite.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub max_p: usize,
    pub max_s: usize,
    pub max_k: usize,
    pub max_count: u128,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_p: 10, max_s: 3, max_k: 3, max_count: 10_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct RestrictedSolution {
    pub b: DMatrix<f64>,
    pub objective: f64,
    pub jitter_used: bool,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub fit: ModelFit,
    pub objective: f64,
    pub supports_enumerated: u128,
    pub jitter_used: bool,
}

/// Per-task sufficient statistics of the centered data.
struct Stats {
    gram: Vec<DMatrix<f64>>,
    xty: Vec<DVector<f64>>,
    yty: f64,
}

impl Stats {
    fn new(cp: &CenteredProblem) -> Self {
        let mut gram = Vec::with_capacity(cp.k());
        let mut xty = Vec::with_capacity(cp.k());
        let mut yty = 0.0;
        for t in &cp.tasks {
            let n = t.data.n() as f64;
            gram.push(t.data.x.tr_mul(&t.data.x) / n);
            xty.push(t.data.x.tr_mul(&t.data.y) / n);
            yty += t.data.y.norm_squared() / n;
        }
        Self { gram, xty, yty }
    }

    /// Minimizes the smooth part over the given supports. Returns the stacked
    /// solution, its value (without the Zbar term) and whether jitter was needed.
    fn solve(&self, supports: &[&[usize]], lambda: f64, alpha: f64, jitter: bool) -> Result<(Vec<f64>, f64, bool)> {
        let kk = supports.len();
        let m: usize = supports.iter().map(|s| s.len()).sum();
        if m == 0 {
            return Ok((Vec::new(), self.yty, false));
        }
        let mut h = DMatrix::zeros(m, m);
        let mut c = DVector::zeros(m);
        let mut offsets = Vec::with_capacity(kk);
        let mut off = 0;
        for (k, s) in supports.iter().enumerate() {
            offsets.push(off);
            for (a, &ja) in s.iter().enumerate() {
                c[off + a] = self.xty[k][ja];
                for (b, &jb) in s.iter().enumerate() {
                    h[(off + a, off + b)] = self.gram[k][(ja, jb)];
                }
                h[(off + a, off + a)] += alpha + lambda;
            }
            off += s.len();
        }
        if lambda != 0.0 {
            let w = lambda / kk as f64;
            for k in 0..kk {
                for l in 0..kk {
                    for (a, ja) in supports[k].iter().enumerate() {
                        if let Ok(b) = supports[l].binary_search(ja) {
                            h[(offsets[k] + a, offsets[l] + b)] -= w;
                        }
                    }
                }
            }
        }
        let (v, used) = match h.clone().cholesky() {
            Some(ch) => (ch.solve(&c), false),
            None if jitter => {
                let mut hj = h.clone();
                for i in 0..m {
                    hj[(i, i)] += JITTER;
                }
                match hj.cholesky() {
                    Some(ch) => (ch.solve(&c), true),
                    None => return Err(Error::Singular(format!("{m} active coefficients, even with jitter"))),
                }
            }
            None => return Err(Error::Singular(format!("{m} active coefficients"))),
        };
        let value = self.yty - 2.0 * c.dot(&v) + v.dot(&(&h * &v));
        Ok((v.as_slice().to_vec(), value, used))
    }
}

fn check_supports(z: &DMatrix<bool>, p: usize, k: usize, hyper: &Hyperparameters) -> Result<()> {
    if z.shape() != (p, k) {
        return Err(Error::Dimension(format!("Z is {:?}, expected ({p}, {k})", z.shape())));
    }
    let probe = ModelFit::from_parts(DMatrix::zeros(p, k), z.clone(), DVector::zeros(k));
    probe.check_feasible(hyper.s, hyper.common_support)
}

fn support_lists(z: &DMatrix<bool>) -> Vec<Vec<usize>> {
    (0..z.ncols()).map(|k| (0..z.nrows()).filter(|&j| z[(j, k)]).collect()).collect()
}

fn scatter(p: usize, supports: &[&[usize]], v: &[f64]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(p, supports.len());
    let mut off = 0;
    for (k, s) in supports.iter().enumerate() {
        for (a, &j) in s.iter().enumerate() {
            b[(j, k)] = v[off + a];
        }
        off += s.len();
    }
    b
}

fn fit_from(cp: &CenteredProblem, b: DMatrix<f64>, z: DMatrix<bool>, hyper: &Hyperparameters) -> (ModelFit, f64) {
    let intercepts = cp.intercepts(&b);
    let objective = centered_objective(cp, &b, &z, hyper);
    let mut fit = ModelFit::from_parts(b, z, intercepts);
    fit.objective_trace.push(objective);
    (fit, objective)
}

/// Optimal coefficients for a fixed support matrix, intercepts profiled out.
pub fn solve_restricted(problem: &MtlProblem, hyper: &Hyperparameters, z: &DMatrix<bool>) -> Result<RestrictedSolution> {
    solve_restricted_with(problem, hyper, z, true)
}

/// As [`solve_restricted`]; with `allow_jitter = false` a singular system is an error.
pub fn solve_restricted_with(
    problem: &MtlProblem,
    hyper: &Hyperparameters,
    z: &DMatrix<bool>,
    allow_jitter: bool,
) -> Result<RestrictedSolution> {
    hyper.validate(problem.p())?;
    check_supports(z, problem.p(), problem.k(), hyper)?;
    let cp = problem.centered();
    let stats = Stats::new(&cp);
    let lists = support_lists(z);
    let refs: Vec<&[usize]> = lists.iter().map(|s| s.as_slice()).collect();
    let (v, _, jitter_used) = stats.solve(&refs, hyper.lambda, hyper.alpha, allow_jitter)?;
    let b = scatter(problem.p(), &refs, &v);
    let objective = centered_objective(&cp, &b, z, hyper);
    Ok(RestrictedSolution { b, objective, jitter_used })
}

fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    (0..r).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of support configurations `solve_exact` visits.
pub fn enumeration_count(p: usize, k: usize, s: usize, common_support: bool) -> u128 {
    let per_task: u128 = (0..=s.min(p)).map(|r| binomial(p, r)).sum();
    if common_support {
        per_task
    } else {
        per_task.checked_pow(k as u32).unwrap_or(u128::MAX)
    }
}

/// All subsets of `0..p` with at most `s` elements, each sorted, in
/// size-then-lexicographic order.
pub(crate) fn subsets(p: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for r in 1..=s.min(p) {
        let mut idx: Vec<usize> = (0..r).collect();
        loop {
            out.push(idx.clone());
            let mut i = r;
            while i > 0 && idx[i - 1] == p - r + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for t in i..r {
                idx[t] = idx[t - 1] + 1;
            }
        }
    }
    out
}

/// `Σ_k ‖z_k − z̄‖²` from per-coordinate row counts.
fn zbar_from_counts(counts: &[usize], k: usize) -> f64 {
    let kf = k as f64;
    counts.iter().map(|&c| c as f64 * (1.0 - c as f64 / kf)).sum()
}

/// Total order used for the deterministic reduction: objective first, then the
/// per-task support lists lexicographically.
fn better(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>), lists: &[Vec<usize>]) -> bool {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let la: Vec<&Vec<usize>> = a.1.iter().map(|&i| &lists[i]).collect();
            let lb: Vec<&Vec<usize>> = b.1.iter().map(|&i| &lists[i]).collect();
            la < lb
        }
    }
}

fn decode(mut idx: u128, radix: usize, k: usize) -> Vec<usize> {
    let mut digits = vec![0; k];
    for d in digits.iter_mut() {
        *d = (idx % radix as u128) as usize;
        idx /= radix as u128;
    }
    digits
}

/// Global minimizer by exhaustive enumeration of all feasible support matrices.
pub fn solve_exact(problem: &MtlProblem, hyper: &Hyperparameters, limits: &Limits) -> Result<OracleResult> {
    solve_exact_impl(problem, hyper, limits, true)
}

fn solve_exact_impl(problem: &MtlProblem, hyper: &Hyperparameters, limits: &Limits, allow_fast_path: bool) -> Result<OracleResult> {
    hyper.validate(problem.p())?;
    let (p, kk, s) = (problem.p(), problem.k(), hyper.s);
    let count = enumeration_count(p, kk, s, hyper.common_support);
    let mut reasons = Vec::new();
    if p > limits.max_p {
        reasons.push(format!("p = {p} > {}", limits.max_p));
    }
    if s > limits.max_s {
        reasons.push(format!("s = {s} > {}", limits.max_s));
    }
    if kk > limits.max_k {
        reasons.push(format!("K = {kk} > {}", limits.max_k));
    }
    if count > limits.max_count {
        reasons.push(format!("count > {}", limits.max_count));
    }
    if !reasons.is_empty() {
        return Err(Error::LimitExceeded { count, reason: reasons.join(", ") });
    }

    let cp = problem.centered();
    let stats = Stats::new(&cp);
    let lists = subsets(p, s);
    let delta = hyper.effective_delta();
    let (lambda, alpha) = (hyper.lambda, hyper.alpha);

    let best = if hyper.common_support {
        let values: Vec<(f64, bool)> = lists
            .par_iter()
            .map(|sub| {
                let refs: Vec<&[usize]> = vec![sub.as_slice(); kk];
                stats.solve(&refs, lambda, alpha, true).map(|(_, v, j)| (v, j))
            })
            .collect::<Result<_>>()?;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for (i, (v, _)) in values.iter().enumerate() {
            let cand = (*v, vec![i; kk]);
            if best.as_ref().is_none_or(|b| better(&cand, b, &lists)) {
                best = Some(cand);
            }
        }
        best
    } else if lambda == 0.0 && allow_fast_path {
        // separable smooth part: one restricted solve per (task, subset)
        let per_task: Vec<Vec<f64>> = (0..kk)
            .map(|k| {
                lists
                    .par_iter()
                    .map(|sub| {
                        let mut refs: Vec<&[usize]> = vec![&[]; kk];
                        refs[k] = sub.as_slice();
                        stats.solve(&refs, 0.0, alpha, true).map(|(_, v, _)| v)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        // each call above includes every other task's yᵀy/n once
        let others = stats.yty * (kk as f64 - 1.0);
        let radix = lists.len();
        (0..count)
            .into_par_iter()
            .map(|idx| {
                let digits = decode(idx, radix, kk);
                let mut smooth = -others;
                for (k, &d) in digits.iter().enumerate() {
                    smooth += per_task[k][d];
                }
                let mut value = 0.0;
                if delta != 0.0 {
                    let mut counts = vec![0usize; p];
                    for &d in &digits {
                        for &j in &lists[d] {
                            counts[j] += 1;
                        }
                    }
                    value += delta * zbar_from_counts(&counts, kk);
                }
                (smooth + value, digits)
            })
            .reduce_with(|a, b| if better(&b, &a, &lists) { b } else { a })
    } else {
        let radix = lists.len();
        let scored: Vec<Result<(f64, Vec<usize>)>> = (0..count)
            .into_par_iter()
            .map(|idx| {
                let digits = decode(idx, radix, kk);
                let refs: Vec<&[usize]> = digits.iter().map(|&d| lists[d].as_slice()).collect();
                let (_, smooth, _) = stats.solve(&refs, lambda, alpha, true)?;
                let mut counts = vec![0usize; p];
                for &d in &digits {
                    for &j in &lists[d] {
                        counts[j] += 1;
                    }
                }
                Ok((smooth + delta * zbar_from_counts(&counts, kk), digits))
            })
            .collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for cand in scored {
            let cand = cand?;
            if best.as_ref().is_none_or(|b| better(&cand, b, &lists)) {
                best = Some(cand);
            }
        }
        best
    };

    let (_, digits) = best.expect("the empty support is always feasible");
    let refs: Vec<&[usize]> = digits.iter().map(|&d| lists[d].as_slice()).collect();
    let (v, _, jitter_used) = stats.solve(&refs, lambda, alpha, true)?;
    let b = scatter(p, &refs, &v);
    let mut z = DMatrix::from_element(p, kk, false);
    for (k, sub) in refs.iter().enumerate() {
        for &j in sub.iter() {
            z[(j, k)] = true;
        }
    }
    let (fit, objective) = fit_from(&cp, b, z, hyper);
    Ok(OracleResult { fit, objective, supports_enumerated: count, jitter_used })
}

/// Default big-M: twice the largest per-task ridge coefficient (penalty
/// `α + λ + 1e−4`), floored at 1.
pub fn choose_big_m(problem: &MtlProblem, hyper: &Hyperparameters, override_m: Option<f64>) -> f64 {
    if let Some(m) = override_m {
        return m;
    }
    let cp = problem.centered();
    let stats = Stats::new(&cp);
    let pen = hyper.alpha + hyper.lambda + 1e-4;
    let mut max_abs: f64 = 0.0;
    for k in 0..cp.k() {
        let mut h = stats.gram[k].clone();
        for i in 0..h.nrows() {
            h[(i, i)] += pen;
        }
        if let Some(ch) = h.cholesky() {
            let beta = ch.solve(&stats.xty[k]);
            max_abs = max_abs.max(beta.amax());
        }
    }
    (2.0 * max_abs).max(1.0)
}
