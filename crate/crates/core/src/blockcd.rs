//! Block coordinate descent for the support-heterogeneous and common-support
//! estimators.
//!
//! Each sweep updates every task block `(β_k, z_k)` with one proximal-gradient
//! hard-thresholding step against `β̄`, `z̄` frozen from the previous sweep,
//! then refreshes `z̄` and `β̄` as row means. Every step minimizes a majorizer
//! of the objective, so the recorded objective never increases.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::{centered_objective, residual};
use crate::problem::{row_mean, row_mean_bool, CenteredProblem, Hyperparameters, ModelFit, MtlProblem, TaskDataset};

const LIPSCHITZ_INFLATION: f64 = 1.01;
const MIN_STEP_CURVATURE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_sweeps: usize,
    /// Stop once the relative objective decrease of a sweep falls below this.
    /// Zero disables the test; the solver then runs to a fixed point or `max_sweeps`.
    pub rel_tol: f64,
    pub lipschitz_power_iters: usize,
    pub lipschitz_tol: f64,
    pub use_active_sets: bool,
    pub active_screen_multiplier: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 1000,
            rel_tol: 1e-8,
            lipschitz_power_iters: 500,
            lipschitz_tol: 1e-6,
            use_active_sets: true,
            active_screen_multiplier: 2,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 || self.lipschitz_power_iters == 0 || self.active_screen_multiplier == 0 {
            return Err(Error::InvalidConfig("solver counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rel_tol) {
            return Err(Error::InvalidConfig(format!("rel_tol must lie in [0, 1), got {}", self.rel_tol)));
        }
        if !(self.lipschitz_tol > 0.0) {
            return Err(Error::InvalidConfig("lipschitz_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Largest eigenvalue of `XᵀX` by power iteration from the normalized all-ones vector.
pub fn gram_spectral_radius(x: &DMatrix<f64>, max_iters: usize, tol: f64) -> f64 {
    let p = x.ncols();
    let mut v = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let xv = x * &v;
        let rayleigh = xv.norm_squared();
        let w = x.tr_mul(&xv);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let converged = (rayleigh - estimate).abs() <= tol * rayleigh;
        estimate = rayleigh;
        if converged {
            break;
        }
    }
    // one more Rayleigh quotient at the final direction
    estimate.max((x * &v).norm_squared())
}

/// `L_k = 1.01 · (2/n_k) σ_max(X_kᵀX_k) + 2λ + 2α`.
pub fn lipschitz_constant(task: &TaskDataset, lambda: f64, alpha: f64, config: &SolverConfig) -> f64 {
    let sigma = gram_spectral_radius(&task.x, config.lipschitz_power_iters, config.lipschitz_tol);
    LIPSCHITZ_INFLATION * 2.0 * sigma / task.n() as f64 + 2.0 * lambda + 2.0 * alpha
}

/// `∇_β g_k = (2/n)Xᵀ(Xβ − y) + 2λ(β − β̄) + 2αβ`.
pub fn gradient_g(beta_k: &DVector<f64>, beta_bar: &DVector<f64>, task: &TaskDataset, lambda: f64, alpha: f64) -> DVector<f64> {
    let n = task.n() as f64;
    let r = residual(&task.x, &task.y, beta_k.as_slice());
    let mut grad = task.x.tr_mul(&r) * (-2.0 / n);
    grad += (beta_k - beta_bar) * (2.0 * lambda);
    grad += beta_k * (2.0 * alpha);
    grad
}

fn g_value(r: &DVector<f64>, n: f64, beta: &[f64], beta_bar: &DVector<f64>, lambda: f64, alpha: f64) -> f64 {
    let mut pen = 0.0;
    let mut ridge = 0.0;
    for (j, &bj) in beta.iter().enumerate() {
        pen += (bj - beta_bar[j]).powi(2);
        ridge += bj * bj;
    }
    r.norm_squared() / n + lambda * pen + alpha * ridge
}

/// Chooses at most `s` coordinates among `candidates` minimizing
/// `Δ_j = δ(1−z̄_j)² − ((L/2)b_j² + δz̄_j²)`, restricted to `Δ_j < 0`.
/// Ties go to larger `|b_j|`, then smaller `j`.
fn select_heterogeneous(b: &[f64], z_bar: &DVector<f64>, delta: f64, l: f64, s: usize, candidates: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(f64, f64, usize)> = candidates
        .iter()
        .map(|&j| {
            let keep = delta * (1.0 - z_bar[j]).powi(2);
            let drop = 0.5 * l * b[j] * b[j] + delta * z_bar[j] * z_bar[j];
            (keep - drop, b[j].abs(), j)
        })
        .filter(|&(d, _, _)| d < 0.0)
        .collect();
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then(a.2.cmp(&b.2))
    });
    scored.truncate(s);
    scored.into_iter().map(|(_, _, j)| j).collect()
}

/// Keeps the `≤ s` coordinates with the largest positive aggregated score.
fn select_common(score: &[f64], s: usize, candidates: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&j| (score[j], j)).filter(|&(v, _)| v > 0.0).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    scored.truncate(s);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// One proximal hard-thresholding update of task block `(β_k, z_k)` with `β̄`
/// and `z̄` held fixed. Returns the new coefficients and support.
pub fn task_update(
    beta_prev: &DVector<f64>,
    beta_bar: &DVector<f64>,
    z_bar: &DVector<f64>,
    task: &TaskDataset,
    hyper: &Hyperparameters,
    l_k: f64,
) -> (DVector<f64>, Vec<bool>) {
    let p = task.p();
    let l = l_k.max(MIN_STEP_CURVATURE);
    let grad = gradient_g(beta_prev, beta_bar, task, hyper.lambda, hyper.alpha);
    let b: Vec<f64> = (0..p).map(|j| beta_prev[j] - grad[j] / l).collect();
    let all: Vec<usize> = (0..p).collect();
    let keep = select_heterogeneous(&b, z_bar, hyper.effective_delta(), l, hyper.s, &all);
    let mut beta = DVector::zeros(p);
    let mut z = vec![false; p];
    for j in keep {
        beta[j] = b[j];
        z[j] = true;
    }
    (beta, z)
}

/// Counters exposed for instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub sweeps: usize,
    /// Number of (task, coordinate) gradient evaluations.
    pub coordinate_touches: u64,
    pub lipschitz_backtracks: usize,
}

struct State {
    b: DMatrix<f64>,
    z: DMatrix<bool>,
    beta_bar: DVector<f64>,
    z_bar: DVector<f64>,
    trace: Vec<f64>,
}

struct TaskStep {
    beta: Vec<f64>,
    b: Vec<f64>,
    l: f64,
    backtracks: usize,
    g_prev: f64,
    linear: Vec<f64>,
}

struct Engine<'a> {
    cp: &'a CenteredProblem,
    hyper: Hyperparameters,
    config: &'a SolverConfig,
    lips: Vec<f64>,
    stats: SolveStats,
}

impl<'a> Engine<'a> {
    fn new(cp: &'a CenteredProblem, hyper: Hyperparameters, config: &'a SolverConfig) -> Self {
        let lips = cp
            .tasks
            .iter()
            .map(|t| lipschitz_constant(&t.data, hyper.lambda, hyper.alpha, config).max(MIN_STEP_CURVATURE))
            .collect();
        Self { cp, hyper, config, lips, stats: SolveStats::default() }
    }

    fn initial_state(&self, init: Option<&ModelFit>) -> Result<State> {
        let (p, kk) = (self.cp.p, self.cp.k());
        let (b, z) = match init {
            Some(f) => {
                if f.b.shape() != (p, kk) || f.z.shape() != (p, kk) {
                    return Err(Error::Dimension(format!("initial fit has shape {:?}, expected ({p}, {kk})", f.b.shape())));
                }
                f.check_feasible(self.hyper.s, self.hyper.common_support)?;
                (f.b.clone(), f.z.clone())
            }
            None => (DMatrix::zeros(p, kk), DMatrix::from_element(p, kk, false)),
        };
        let obj = centered_objective(self.cp, &b, &z, &self.hyper);
        Ok(State { beta_bar: row_mean(&b), z_bar: row_mean_bool(&z), b, z, trace: vec![obj] })
    }

    /// Gradient step for task `k` on the `active` coordinates.
    fn gradient_step(&self, state: &State, k: usize, active: &[usize], l: f64) -> TaskStep {
        let t = &self.cp.tasks[k].data;
        let n = t.n() as f64;
        let beta: Vec<f64> = state.b.column(k).iter().copied().collect();
        let r = residual(&t.x, &t.y, &beta);
        let g_prev = g_value(&r, n, &beta, &state.beta_bar, self.hyper.lambda, self.hyper.alpha);
        let mut b = vec![0.0; beta.len()];
        let mut linear = vec![0.0; beta.len()];
        for &j in active {
            let grad = -2.0 / n * t.x.column(j).dot(&r)
                + 2.0 * self.hyper.lambda * (beta[j] - state.beta_bar[j])
                + 2.0 * self.hyper.alpha * beta[j];
            linear[j] = grad;
            b[j] = beta[j] - grad / l;
        }
        TaskStep { beta, b, l, backtracks: 0, g_prev, linear }
    }

    /// Checks `g(β_new) ≤ g(β_prev) + ∇ᵀd + (L/2)‖d‖²`.
    fn majorizes(&self, state: &State, k: usize, step: &TaskStep, new_beta: &[f64]) -> bool {
        let t = &self.cp.tasks[k].data;
        let r = residual(&t.x, &t.y, new_beta);
        let g_new = g_value(&r, t.n() as f64, new_beta, &state.beta_bar, self.hyper.lambda, self.hyper.alpha);
        let mut bound = step.g_prev;
        for j in 0..new_beta.len() {
            let d = new_beta[j] - step.beta[j];
            bound += step.linear[j] * d + 0.5 * step.l * d * d;
        }
        g_new <= bound + 1e-12 * (1.0 + step.g_prev.abs())
    }

    fn heterogeneous_task(&self, state: &State, k: usize, active: &[usize]) -> (Vec<f64>, Vec<bool>, TaskStep) {
        let mut l = self.lips[k];
        let mut backtracks = 0;
        loop {
            let mut step = self.gradient_step(state, k, active, l);
            let keep = select_heterogeneous(&step.b, &state.z_bar, self.hyper.effective_delta(), l, self.hyper.s, active);
            let mut beta = vec![0.0; step.b.len()];
            let mut z = vec![false; step.b.len()];
            for j in keep {
                beta[j] = step.b[j];
                z[j] = true;
            }
            if self.majorizes(state, k, &step, &beta) || backtracks >= 60 {
                step.backtracks = backtracks;
                return (beta, z, step);
            }
            l *= 2.0;
            backtracks += 1;
        }
    }

    /// One sweep over all tasks. Returns whether any variable changed.
    fn sweep(&mut self, state: &mut State, active: &[usize]) -> bool {
        let kk = self.cp.k();
        let results: Vec<(Vec<f64>, Vec<bool>, f64, usize)> = if self.hyper.common_support {
            self.common_sweep(state, active)
        } else {
            let this = &*self;
            let st = &*state;
            (0..kk)
                .into_par_iter()
                .map(|k| {
                    let (beta, z, step) = this.heterogeneous_task(st, k, active);
                    (beta, z, step.l, step.backtracks)
                })
                .collect()
        };
        self.stats.coordinate_touches += (kk * active.len()) as u64;
        let mut changed = false;
        for (k, (beta, z, l, backtracks)) in results.into_iter().enumerate() {
            self.lips[k] = l;
            self.stats.lipschitz_backtracks += backtracks;
            for j in 0..self.cp.p {
                if state.b[(j, k)] != beta[j] || state.z[(j, k)] != z[j] {
                    changed = true;
                }
                state.b[(j, k)] = beta[j];
                state.z[(j, k)] = z[j];
            }
        }
        // z̄ first, then β̄
        state.z_bar = row_mean_bool(&state.z);
        state.beta_bar = row_mean(&state.b);
        changed
    }

    fn common_sweep(&self, state: &State, active: &[usize]) -> Vec<(Vec<f64>, Vec<bool>, f64, usize)> {
        let kk = self.cp.k();
        let p = self.cp.p;
        let mut lips = self.lips.clone();
        let mut backtracks = vec![0usize; kk];
        loop {
            let steps: Vec<TaskStep> = (0..kk)
                .into_par_iter()
                .map(|k| self.gradient_step(state, k, active, lips[k]))
                .collect();
            let mut score = vec![0.0; p];
            for step in &steps {
                for &j in active {
                    score[j] += 0.5 * step.l * step.b[j] * step.b[j];
                }
            }
            let keep = select_common(&score, self.hyper.s, active);
            let mut z = vec![false; p];
            for &j in &keep {
                z[j] = true;
            }
            let betas: Vec<Vec<f64>> = steps
                .iter()
                .map(|step| {
                    let mut beta = vec![0.0; p];
                    for &j in &keep {
                        beta[j] = step.b[j];
                    }
                    beta
                })
                .collect();
            let mut ok = true;
            for k in 0..kk {
                if !self.majorizes(state, k, &steps[k], &betas[k]) && backtracks[k] < 60 {
                    lips[k] *= 2.0;
                    backtracks[k] += 1;
                    ok = false;
                }
            }
            if ok {
                return betas
                    .into_iter()
                    .enumerate()
                    .map(|(k, beta)| (beta, z.clone(), lips[k], backtracks[k]))
                    .collect();
            }
        }
    }

    /// Sweeps until convergence on `active`, consuming at most `budget` sweeps.
    fn run(&mut self, state: &mut State, active: &[usize], budget: usize) -> Result<usize> {
        let mut used = 0;
        while used < budget {
            let changed = self.sweep(state, active);
            used += 1;
            self.stats.sweeps += 1;
            let obj = centered_objective(self.cp, &state.b, &state.z, &self.hyper);
            if !obj.is_finite() {
                return Err(Error::Divergence { sweep: self.stats.sweeps, value: obj });
            }
            let prev = *state.trace.last().expect("trace starts with the initial objective");
            state.trace.push(obj);
            if !changed {
                break;
            }
            let rel = (prev - obj) / prev.abs().max(f64::MIN_POSITIVE);
            if self.config.rel_tol > 0.0 && rel < self.config.rel_tol {
                break;
            }
        }
        Ok(used)
    }

    fn finish(&self, state: State) -> ModelFit {
        let intercepts = self.cp.intercepts(&state.b);
        let mut fit = ModelFit::from_parts(state.b, state.z, intercepts);
        fit.objective_trace = state.trace;
        fit.sweeps = self.stats.sweeps;
        fit
    }
}

fn prepare(problem: &MtlProblem, hyper: &Hyperparameters, config: &SolverConfig) -> Result<CenteredProblem> {
    hyper.validate(problem.p())?;
    config.validate()?;
    Ok(problem.centered())
}

/// Full-dimension block CD. Dispatches to the common-support variant when
/// `hyper.common_support` is set.
pub fn fit(problem: &MtlProblem, hyper: &Hyperparameters, config: &SolverConfig, init: Option<&ModelFit>) -> Result<ModelFit> {
    fit_instrumented(problem, hyper, config, init).map(|(f, _)| f)
}

pub fn fit_instrumented(
    problem: &MtlProblem,
    hyper: &Hyperparameters,
    config: &SolverConfig,
    init: Option<&ModelFit>,
) -> Result<(ModelFit, SolveStats)> {
    let cp = prepare(problem, hyper, config)?;
    let mut engine = Engine::new(&cp, *hyper, config);
    let mut state = engine.initial_state(init)?;
    let all: Vec<usize> = (0..cp.p).collect();
    engine.run(&mut state, &all, config.max_sweeps)?;
    let stats = engine.stats;
    Ok((engine.finish(state), stats))
}

/// Block CD with one shared support per sweep, chosen by the aggregated score
/// `Σ_k (L_k/2) b_{k,j}²`.
pub fn fit_common_support(
    problem: &MtlProblem,
    hyper: &Hyperparameters,
    config: &SolverConfig,
    init: Option<&ModelFit>,
) -> Result<ModelFit> {
    if !hyper.common_support {
        return Err(Error::InvalidHyper("fit_common_support requires common_support = true".into()));
    }
    fit(problem, hyper, config, init)
}

/// Screening set: per task, the top `m·s` coordinates of `|X_kᵀy_k|/n_k`.
fn screen(cp: &CenteredProblem, count: usize) -> Vec<bool> {
    let mut active = vec![false; cp.p];
    for t in &cp.tasks {
        let corr = t.data.x.tr_mul(&t.data.y) / t.data.n() as f64;
        let mut order: Vec<usize> = (0..cp.p).collect();
        order.sort_by(|&a, &b| corr[b].abs().partial_cmp(&corr[a].abs()).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        for &j in order.iter().take(count) {
            active[j] = true;
        }
    }
    active
}

/// Active-set block CD: solve on a working set, verify with one full sweep,
/// grow the set with every coordinate that became nonzero, repeat.
pub fn fit_active_set(
    problem: &MtlProblem,
    hyper: &Hyperparameters,
    config: &SolverConfig,
    init: Option<&ModelFit>,
) -> Result<ModelFit> {
    fit_active_set_instrumented(problem, hyper, config, init).map(|(f, _)| f)
}

pub fn fit_active_set_instrumented(
    problem: &MtlProblem,
    hyper: &Hyperparameters,
    config: &SolverConfig,
    init: Option<&ModelFit>,
) -> Result<(ModelFit, SolveStats)> {
    let cp = prepare(problem, hyper, config)?;
    let p = cp.p;
    let mut in_set = screen(&cp, config.active_screen_multiplier.saturating_mul(hyper.s));
    if let Some(f) = init {
        for j in 0..p.min(f.p()) {
            if (0..f.k()).any(|k| f.z[(j, k)]) {
                in_set[j] = true;
            }
        }
    }
    if in_set.iter().all(|&a| a) {
        return fit_instrumented(problem, hyper, config, init);
    }
    let mut engine = Engine::new(&cp, *hyper, config);
    let mut state = engine.initial_state(init)?;
    let all: Vec<usize> = (0..p).collect();
    let mut remaining = config.max_sweeps;
    while remaining > 0 {
        let active: Vec<usize> = (0..p).filter(|&j| in_set[j]).collect();
        remaining -= engine.run(&mut state, &active, remaining)?;
        if remaining == 0 {
            break;
        }
        let z_before = state.z.clone();
        remaining -= engine.run(&mut state, &all, 1)?;
        if state.z == z_before {
            break;
        }
        let mut grew = false;
        for j in 0..p {
            if !in_set[j] && (0..cp.k()).any(|k| state.b[(j, k)] != 0.0) {
                in_set[j] = true;
                grew = true;
            }
        }
        if !grew && in_set.iter().all(|&a| a) {
            engine.run(&mut state, &all, remaining)?;
            break;
        }
    }
    let stats = engine.stats;
    Ok((engine.finish(state), stats))
}

/// Entry point used by the higher layers: active sets when configured.
pub fn solve(problem: &MtlProblem, hyper: &Hyperparameters, config: &SolverConfig, init: Option<&ModelFit>) -> Result<ModelFit> {
    if config.use_active_sets {
        fit_active_set(problem, hyper, config, init)
    } else {
        fit(problem, hyper, config, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn task(x: DMatrix<f64>, y: DVector<f64>) -> TaskDataset {
        TaskDataset::new("t", x, y).unwrap()
    }

    fn random_task(rng: &mut ChaCha8Rng, n: usize, p: usize) -> TaskDataset {
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        task(x, y)
    }

    #[test]
    fn identity_spectrum() {
        let p = 5;
        let t = task(DMatrix::identity(p, p), DVector::zeros(p));
        let sigma = gram_spectral_radius(&t.x, 500, 1e-6);
        assert!((2.0 * sigma / p as f64 - 2.0 / p as f64).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_gives_penalty_curvature_only() {
        let t = task(DMatrix::zeros(4, 3), DVector::zeros(4));
        assert_eq!(lipschitz_constant(&t, 3.0, 1.0, &SolverConfig::default()), 8.0);
    }

    #[test]
    fn power_iteration_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let t = random_task(&mut rng, 6, 4);
            let (lambda, alpha) = (0.3, 0.2);
            let n = 6.0;
            let estimate = 2.0 / n * gram_spectral_radius(&t.x, 500, 1e-6) + 2.0 * lambda + 2.0 * alpha;
            let h = t.x.tr_mul(&t.x) * (2.0 / n) + DMatrix::identity(4, 4) * (2.0 * lambda + 2.0 * alpha);
            let exact = h.symmetric_eigenvalues().max();
            assert!((estimate - exact).abs() <= 0.01 * exact, "{estimate} vs {exact}");
            let l = lipschitz_constant(&t, lambda, alpha, &SolverConfig::default());
            assert!(l >= exact * (1.0 - 1e-9));
        }
    }

    #[test]
    fn gradient_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_task(&mut rng, 5, 3);
        let zero = DVector::zeros(3);
        let g = gradient_g(&zero, &zero, &t, 0.7, 0.4);
        let expected = t.x.tr_mul(&t.y) * (-2.0 / 5.0);
        assert!((g - expected).norm() < 1e-14);
    }

    #[test]
    fn gradient_vanishes_at_least_squares_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_task(&mut rng, 4, 4);
        let beta = t.x.clone().lu().solve(&t.y).unwrap();
        let g = gradient_g(&beta, &DVector::zeros(4), &t, 0.0, 0.0);
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_task(&mut rng, 7, 5);
        let beta = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let bar = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let (lambda, alpha) = (0.6, 0.35);
        let g_fn = |b: &DVector<f64>| {
            (&t.y - &t.x * b).norm_squared() / 7.0 + lambda * (b - &bar).norm_squared() + alpha * b.norm_squared()
        };
        let grad = gradient_g(&beta, &bar, &t, lambda, alpha);
        let h = 1e-6;
        for j in 0..5 {
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let fd = (g_fn(&up) - g_fn(&dn)) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-5 * grad[j].abs().max(1.0), "{fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn delta_rule_algebra() {
        // δ=10, L=2, b=0.1, z̄=1 → Δ = 0 − (0.01 + 10)
        let b = [0.1];
        let zb = DVector::from_element(1, 1.0);
        assert_eq!(select_heterogeneous(&b, &zb, 10.0, 2.0, 1, &[0]), vec![0]);
        // δ large, z̄=0, small b → excluded
        let zb = DVector::from_element(1, 0.0);
        assert!(select_heterogeneous(&b, &zb, 10.0, 2.0, 1, &[0]).is_empty());
        // δ=0 and b=0 → never kept
        assert!(select_heterogeneous(&[0.0], &zb, 0.0, 2.0, 1, &[0]).is_empty());
    }

    #[test]
    fn delta_zero_is_plain_hard_thresholding() {
        let b = [0.3, -2.0, 0.0, 1.5, -0.3];
        let zb = DVector::zeros(5);
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(select_heterogeneous(&b, &zb, 0.0, 1.0, 2, &all), vec![1, 3]);
        // |b| tie broken by index
        assert_eq!(select_heterogeneous(&b, &zb, 0.0, 1.0, 4, &all), vec![1, 3, 0, 4]);
    }

    /// Brute force over all ≤s subsets of the surrogate `(L/2)‖β−b‖² + δ‖z−z̄‖²`.
    fn surrogate_brute_force(b: &[f64], zb: &[f64], delta: f64, l: f64, s: usize) -> f64 {
        let p = b.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << p) {
            if mask.count_ones() as usize > s {
                continue;
            }
            let mut v = 0.0;
            for j in 0..p {
                let on = mask >> j & 1 == 1;
                if on {
                    v += delta * (1.0 - zb[j]).powi(2);
                } else {
                    v += 0.5 * l * b[j] * b[j] + delta * zb[j] * zb[j];
                }
            }
            best = best.min(v);
        }
        best
    }

    #[test]
    fn task_update_minimizes_surrogate_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t = random_task(&mut rng, 8, 6);
            let beta_prev = DVector::from_fn(6, |_, _| if rng.random_bool(0.4) { rng.random_range(-1.0..1.0) } else { 0.0 });
            let bar = DVector::from_fn(6, |_, _| rng.random_range(-0.5..0.5));
            let zb = DVector::from_fn(6, |_, _| [0.0, 0.25, 0.5, 0.75, 1.0][rng.random_range(0..5)]);
            let hyper = Hyperparameters::new(2, rng.random_range(0.0..1.0), rng.random_range(0.0..0.5), 0.1, false);
            let l = lipschitz_constant(&t, hyper.lambda, hyper.alpha, &SolverConfig::default());
            let (beta, z) = task_update(&beta_prev, &bar, &zb, &t, &hyper, l);
            let grad = gradient_g(&beta_prev, &bar, &t, hyper.lambda, hyper.alpha);
            let b: Vec<f64> = (0..6).map(|j| beta_prev[j] - grad[j] / l).collect();
            let mut value = 0.0;
            for j in 0..6 {
                value += 0.5 * l * (beta[j] - b[j]).powi(2) + hyper.delta * ((z[j] as u8 as f64) - zb[j]).powi(2);
            }
            let best = surrogate_brute_force(&b, zb.as_slice(), hyper.delta, l, 2);
            assert!((value - best).abs() < 1e-12 * best.max(1.0), "{value} vs {best}");
            assert!(z.iter().filter(|&&v| v).count() <= 2);
        }
    }

    fn problem_from(tasks: Vec<TaskDataset>) -> MtlProblem {
        let tasks = tasks.into_iter().enumerate().map(|(i, mut t)| {
            t.id = format!("t{i}");
            t
        });
        MtlProblem::new(tasks.collect()).unwrap()
    }

    #[test]
    fn recovers_noiseless_orthonormal_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, p) = (20, 8);
        let raw = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        // orthonormal columns, centered so the intercept is inactive
        let mut centered = raw.clone();
        for mut c in centered.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        let q = centered.qr().q();
        let mut beta = DVector::zeros(p);
        beta[1] = 3.0;
        beta[4] = -2.0;
        beta[6] = 1.5;
        let y = &q * &beta;
        let prob = problem_from(vec![task(q, y)]);
        let hyper = Hyperparameters::new(3, 0.0, 0.0, 0.0, false);
        let f = fit(&prob, &hyper, &SolverConfig { rel_tol: 1e-14, ..Default::default() }, None).unwrap();
        for j in 0..p {
            assert!((f.b[(j, 0)] - beta[j]).abs() < 1e-6);
            assert_eq!(f.z[(j, 0)], beta[j] != 0.0);
        }
    }

    #[test]
    fn separable_fit_equals_independent_fits_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tasks: Vec<TaskDataset> = (0..3).map(|_| random_task(&mut rng, 12, 7)).collect();
        let prob = problem_from(tasks.clone());
        let hyper = Hyperparameters::new(3, 0.0, 0.0, 0.05, false);
        let config = SolverConfig { rel_tol: 0.0, max_sweeps: 300, use_active_sets: false, ..Default::default() };
        let joint = fit(&prob, &hyper, &config, None).unwrap();
        for (k, t) in tasks.into_iter().enumerate() {
            let single = fit(&problem_from(vec![t]), &hyper, &config, None).unwrap();
            assert_eq!(single.b.column(0), joint.b.column(k));
            assert_eq!(single.z.column(0), joint.z.column(k));
        }
    }

    #[test]
    fn common_support_single_task_matches_delta_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prob = problem_from(vec![random_task(&mut rng, 15, 6)]);
        let config = SolverConfig { use_active_sets: false, ..Default::default() };
        let a = fit_common_support(&prob, &Hyperparameters::new(2, 0.0, 0.0, 0.1, true), &config, None).unwrap();
        let b = fit(&prob, &Hyperparameters::new(2, 0.0, 0.0, 0.1, false), &config, None).unwrap();
        assert_eq!(a.b, b.b);
        assert_eq!(a.z, b.z);
        assert!(fit_common_support(&prob, &Hyperparameters::new(2, 0.0, 0.0, 0.1, false), &config, None).is_err());
    }

    #[test]
    fn common_support_duplicate_tasks_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_task(&mut rng, 15, 6);
        let config = SolverConfig { use_active_sets: false, ..Default::default() };
        let h = Hyperparameters::new(2, 0.0, 0.0, 0.1, true);
        let one = fit(&problem_from(vec![t.clone()]), &h, &config, None).unwrap();
        let two = fit(&problem_from(vec![t.clone(), t]), &h, &config, None).unwrap();
        assert_eq!(one.z.column(0), two.z.column(0));
        assert_eq!(two.z.column(0), two.z.column(1));
    }

    #[test]
    fn descent_and_feasibility_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..40 {
            let kk = 1 + i % 3;
            let p = rng.random_range(5..15);
            let tasks = (0..kk).map(|_| random_task(&mut rng, 10, p)).collect();
            let prob = problem_from(tasks);
            let hyper = Hyperparameters::new(
                rng.random_range(1..4),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..0.2),
                i % 4 == 0,
            );
            for use_active in [false, true] {
                let config = SolverConfig { use_active_sets: use_active, ..Default::default() };
                let f = solve(&prob, &hyper, &config, None).unwrap();
                f.check_feasible(hyper.s, hyper.common_support).unwrap();
                for w in f.objective_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-10, "{:?}", f.objective_trace);
                }
            }
        }
    }

    #[test]
    fn fixed_point_admits_no_improving_task_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let prob = problem_from((0..2).map(|_| random_task(&mut rng, 10, 6)).collect());
        let hyper = Hyperparameters::new(2, 0.2, 0.3, 0.0, false);
        let config = SolverConfig { rel_tol: 0.0, max_sweeps: 5000, use_active_sets: false, ..Default::default() };
        let f = fit(&prob, &hyper, &config, None).unwrap();
        let cp = prob.centered();
        for k in 0..2 {
            let l = lipschitz_constant(&cp.tasks[k].data, hyper.lambda, hyper.alpha, &config);
            let (beta, z) = task_update(&f.b.column(k).into_owned(), &f.beta_bar, &f.z_bar, &cp.tasks[k].data, &hyper, l);
            let z_now: Vec<bool> = f.z.column(k).iter().copied().collect();
            assert_eq!(z, z_now);
            assert!((beta - f.b.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn active_set_with_full_screen_is_plain_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let prob = problem_from((0..2).map(|_| random_task(&mut rng, 10, 6)).collect());
        let hyper = Hyperparameters::new(2, 0.0, 0.2, 0.1, false);
        let config = SolverConfig { active_screen_multiplier: 10, ..Default::default() };
        let a = fit_active_set(&prob, &hyper, &config, None).unwrap();
        let b = fit(&prob, &hyper, &config, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_infeasible_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let prob = problem_from(vec![random_task(&mut rng, 10, 4)]);
        let mut init = ModelFit::zeros(4, 1);
        init.b[(0, 0)] = 1.0;
        let hyper = Hyperparameters::new(2, 0.0, 0.0, 0.0, false);
        assert!(fit(&prob, &hyper, &SolverConfig::default(), Some(&init)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig { rel_tol: 1.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { max_sweeps: 0, ..Default::default() }.validate().is_err());
    }
}
