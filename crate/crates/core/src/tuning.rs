//! Cross-validation over warm-started solution paths.
//!
//! Grid points are visited with `s` outermost, then `λ` ascending (or `α`
//! descending), then `δ` ascending. Inside one `s` block each point starts
//! from the previous point's fit; each block starts from [`warm_start`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::blockcd::{solve, SolverConfig};
use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::localsearch::local_search;
use crate::problem::{Hyperparameters, MethodSpec, ModelFit, MtlProblem};

/// Commits allowed to local search in the final refit.
pub const FINAL_SWAPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaStandardization {
    pub delta: f64,
    pub tau_star: f64,
    /// `true` when `τ*` came from the closed form.
    pub exact: bool,
}

/// `τ*`: the largest `Σ_k ‖z_k − z̄‖²` over exact-`s` supports.
pub fn tau_star(s: usize, k: usize, p: usize, mc_samples: usize, seed: u64) -> (f64, bool) {
    if k <= 1 {
        return (0.0, true);
    }
    if s * k <= p {
        return ((s * (k - 1)) as f64, true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    let mut counts = vec![0usize; p];
    for _ in 0..mc_samples {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..k {
            for j in rand::seq::index::sample(&mut rng, p, s.min(p)).into_iter() {
                counts[j] += 1;
            }
        }
        let kf = k as f64;
        let v: f64 = counts.iter().map(|&c| c as f64 * (1.0 - c as f64 / kf)).sum();
        best = best.max(v);
    }
    (best, false)
}

/// `δ = δ*/τ*`. With one task the Zbar term vanishes and `δ*` is returned.
pub fn standardize_delta(delta_star: f64, s: usize, k: usize, p: usize, mc_samples: usize, seed: u64) -> DeltaStandardization {
    let (tau, exact) = tau_star(s, k, p, mc_samples, seed);
    if tau == 0.0 {
        if k <= 1 {
            log::warn!("K = 1: the Zbar penalty is identically zero, delta left unstandardized");
        }
        return DeltaStandardization { delta: delta_star, tau_star: tau, exact };
    }
    DeltaStandardization { delta: delta_star / tau, tau_star: tau, exact }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningGrid {
    pub method: MethodSpec,
    pub s_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub alpha_values: Vec<f64>,
    /// Raw `δ`, or `δ*` when `standardized` is set.
    pub delta_values: Vec<f64>,
    pub standardized: bool,
}

impl TuningGrid {
    /// Builds a grid, replacing parameters the method does not use by `{0}`.
    pub fn new(method: MethodSpec, s_values: Vec<usize>, lambda_values: Vec<f64>, alpha_values: Vec<f64>, delta_values: Vec<f64>) -> Self {
        let m = method.mask();
        let or_zero = |on: bool, v: Vec<f64>| if on { v } else { vec![0.0] };
        Self {
            method,
            s_values,
            lambda_values: or_zero(m.lambda, lambda_values),
            alpha_values: or_zero(m.alpha, alpha_values),
            delta_values: or_zero(m.delta, delta_values),
            standardized: false,
        }
    }

    pub fn standardized(self, on: bool) -> Self {
        Self { standardized: on, ..self }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let m = self.method.mask();
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.s_values.is_empty() || self.s_values.iter().any(|&s| s == 0 || s > p) {
            return bad(format!("s grid must be nonempty with values in 1..={p}"));
        }
        for (name, on, v) in [
            ("lambda", m.lambda, &self.lambda_values),
            ("alpha", m.alpha, &self.alpha_values),
            ("delta", m.delta, &self.delta_values),
        ] {
            if v.is_empty() {
                return bad(format!("{name} grid is empty"));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return bad(format!("{name} grid must hold finite non-negative values"));
            }
            if !on && v.iter().any(|&x| x != 0.0) {
                return bad(format!("{name} is not used by {}", self.method));
            }
        }
        if self.lambda_values.iter().any(|&l| l > 0.0) && self.alpha_values.iter().any(|&a| a > 0.0) {
            return bad("lambda and alpha cannot both be positive".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.s_values.len() * self.lambda_values.len() * self.alpha_values.len() * self.delta_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps a grid point to the hyperparameters actually fitted.
    pub fn resolve(&self, h: &Hyperparameters, k: usize, p: usize, mc_samples: usize, seed: u64) -> Hyperparameters {
        if self.standardized && h.delta != 0.0 {
            h.with_delta(standardize_delta(h.delta, h.s, k, p, mc_samples, seed).delta)
        } else {
            *h
        }
    }
}

fn sorted(v: &[f64], descending: bool) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| if descending { b.total_cmp(a) } else { a.total_cmp(b) });
    v.dedup();
    v
}

/// The path order; `δ` values are as stored in the grid.
pub fn order_grid(grid: &TuningGrid) -> Vec<Hyperparameters> {
    let common = grid.method.mask().common_support;
    let lambdas = sorted(&grid.lambda_values, false);
    let alphas = sorted(&grid.alpha_values, true);
    let deltas = sorted(&grid.delta_values, false);
    let mut out = Vec::with_capacity(grid.len());
    for &s in &grid.s_values {
        for &lambda in &lambdas {
            for &alpha in &alphas {
                for &delta in &deltas {
                    out.push(Hyperparameters::new(s, lambda, delta, alpha, common));
                }
            }
        }
    }
    out
}

/// `{s−3, …, s+3}` clipped to `1..=p`.
pub fn s_grid_around(s: usize, p: usize) -> Vec<usize> {
    (s.saturating_sub(3).max(1)..=(s + 3).min(p)).collect()
}

fn keep_top(fit: &ModelFit, s: usize, common: bool) -> ModelFit {
    let (p, k) = (fit.p(), fit.k());
    let mut b = DMatrix::zeros(p, k);
    let mut z = DMatrix::from_element(p, k, false);
    let rank = |score: &dyn Fn(usize) -> f64| {
        let mut order: Vec<usize> = (0..p).filter(|&j| score(j) > 0.0).collect();
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        order.truncate(s);
        order
    };
    if common {
        let keep = rank(&|j| (0..k).map(|c| fit.b[(j, c)].powi(2)).sum());
        for &j in &keep {
            for c in 0..k {
                b[(j, c)] = fit.b[(j, c)];
                z[(j, c)] = true;
            }
        }
    } else {
        for c in 0..k {
            for j in rank(&|j| fit.b[(j, c)].abs()) {
                b[(j, c)] = fit.b[(j, c)];
                z[(j, c)] = true;
            }
        }
    }
    ModelFit::from_parts(b, z, DVector::zeros(k))
}

/// Relaxed fit at budget `min(4s, p)` with `δ = 0`, cut back to the `s`
/// largest coefficients per task.
pub fn warm_start(problem: &MtlProblem, hyper: &Hyperparameters, config: &SolverConfig) -> Result<ModelFit> {
    hyper.validate(problem.p())?;
    let budget = (4 * hyper.s).min(problem.p());
    let relaxed = Hyperparameters { s: budget, delta: 0.0, ..*hyper };
    let wide = solve(problem, &relaxed, config, None)?;
    let mut init = keep_top(&wide, hyper.s, hyper.common_support);
    init.intercepts = problem.centered().intercepts(&init.b);
    Ok(init)
}

/// Warm start and block CD, then rounds of local search each followed by
/// block CD from the swapped point. Stops when a round commits no swap or
/// `swaps` commits have been spent in total.
pub fn fit_full(problem: &MtlProblem, hyper: &Hyperparameters, config: &SolverConfig, swaps: usize) -> Result<ModelFit> {
    let init = warm_start(problem, hyper, config)?;
    let mut fit = solve(problem, hyper, config, Some(&init))?;
    let mut remaining = swaps;
    while remaining > 0 {
        let searched = local_search(&fit, problem, hyper, remaining)?;
        let committed = searched.swaps - fit.swaps;
        if committed == 0 {
            break;
        }
        remaining -= committed;
        let mut polished = solve(problem, hyper, config, Some(&searched))?;
        polished.sweeps += searched.sweeps;
        polished.swaps = searched.swaps;
        let mut trace = searched.objective_trace;
        trace.extend(polished.objective_trace.iter().copied());
        polished.objective_trace = trace;
        fit = polished;
    }
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct TuneConfig {
    pub solver: SolverConfig,
    pub final_swaps: usize,
    pub mc_samples: usize,
    pub pilot_alpha: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { solver: SolverConfig::default(), final_swaps: FINAL_SWAPS, mc_samples: 10_000, pilot_alpha: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CvPoint {
    pub stage: u8,
    /// Grid value of `δ` (`δ*` for standardized grids).
    pub delta_grid: f64,
    pub hyper: Hyperparameters,
    pub mean_error: f64,
    pub sd_error: f64,
    /// `[fold][task]` validation RMSE.
    pub fold_errors: Vec<Vec<f64>>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct CVReport {
    pub points: Vec<CvPoint>,
    pub selected_index: usize,
    pub selected: Hyperparameters,
    pub final_fit: ModelFit,
}

/// Per-task row blocks: `folds[f][k]` lists the validation rows of task `k` in fold `f`.
pub fn fold_partition(problem: &MtlProblem, n_folds: usize, seed: u64) -> Result<Vec<Vec<Vec<usize>>>> {
    if n_folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut folds = vec![Vec::with_capacity(problem.k()); n_folds];
    for (k, t) in problem.tasks().iter().enumerate() {
        let n = t.n();
        if n < n_folds {
            return Err(Error::FoldTooSmall { task: t.id.clone(), n, folds: n_folds });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        for (f, fold) in folds.iter_mut().enumerate() {
            let mut block = rows[f * n / n_folds..(f + 1) * n / n_folds].to_vec();
            block.sort_unstable();
            fold.push(block);
        }
    }
    Ok(folds)
}

fn split(problem: &MtlProblem, valid: &[Vec<usize>]) -> Result<(MtlProblem, MtlProblem)> {
    let mut train = Vec::with_capacity(problem.k());
    let mut test = Vec::with_capacity(problem.k());
    for (t, rows) in problem.tasks().iter().zip(valid) {
        let keep: Vec<usize> = (0..t.n()).filter(|i| rows.binary_search(i).is_err()).collect();
        train.push(t.select_rows(&keep));
        test.push(t.select_rows(rows));
    }
    Ok((MtlProblem::new(train)?, MtlProblem::new(test)?))
}

fn task_rmse(fit: &ModelFit, test: &MtlProblem) -> Vec<f64> {
    test.tasks()
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let r = (&t.y - &t.x * fit.b.column(k)).add_scalar(-fit.intercepts[k]);
            r.norm() / (t.n() as f64).sqrt()
        })
        .collect()
}

/// One fold's path over the resolved points: `(per-task errors, seconds)` per point.
fn run_path(train: &MtlProblem, test: &MtlProblem, points: &[Hyperparameters], config: &SolverConfig) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut out = Vec::with_capacity(points.len());
    let mut prev: Option<(usize, ModelFit)> = None;
    for h in points {
        let start = Instant::now();
        let init = match prev.take() {
            Some((s, f)) if s == h.s => f,
            _ => warm_start(train, h, config)?,
        };
        let fit = solve(train, h, config, Some(&init))?;
        out.push((task_rmse(&fit, test), start.elapsed().as_secs_f64()));
        prev = Some((h.s, fit));
    }
    Ok(out)
}

/// `true` when `a` should be preferred over `b` at equal mean error.
fn tie_prefers(a: &Hyperparameters, b: &Hyperparameters) -> bool {
    if a.s != b.s {
        return a.s < b.s;
    }
    if a.delta != b.delta {
        return a.delta > b.delta;
    }
    a.lambda + a.alpha > b.lambda + b.alpha
}

fn select(points: &[CvPoint], eligible: impl Fn(&CvPoint) -> bool) -> usize {
    let mut best: Option<usize> = None;
    for (i, pt) in points.iter().enumerate() {
        if !eligible(pt) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &points[b];
                let better = pt.mean_error < cur.mean_error || (pt.mean_error == cur.mean_error && tie_prefers(&pt.hyper, &cur.hyper));
                Some(if better { i } else { b })
            }
        };
    }
    best.expect("grid is nonempty")
}

/// Cross-validates the given `(grid value of δ, resolved point)` list.
fn cross_validate(
    problem: &MtlProblem,
    entries: &[(f64, Hyperparameters)],
    n_folds: usize,
    seed: u64,
    config: &TuneConfig,
    stage: u8,
) -> Result<Vec<CvPoint>> {
    let folds = fold_partition(problem, n_folds, seed)?;
    let points: Vec<Hyperparameters> = entries.iter().map(|(_, h)| *h).collect();
    let per_fold: Vec<Vec<(Vec<f64>, f64)>> = folds
        .par_iter()
        .map(|valid| {
            let (train, test) = split(problem, valid)?;
            run_path(&train, &test, &points, &config.solver)
        })
        .collect::<Result<_>>()?;
    let nf = n_folds as f64;
    Ok(entries
        .iter()
        .enumerate()
        .map(|(i, (dg, h))| {
            let fold_errors: Vec<Vec<f64>> = per_fold.iter().map(|f| f[i].0.clone()).collect();
            let means: Vec<f64> = fold_errors.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect();
            let mean = means.iter().sum::<f64>() / nf;
            let sd = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
            CvPoint {
                stage,
                delta_grid: *dg,
                hyper: *h,
                mean_error: mean,
                sd_error: sd,
                fold_errors,
                wall_time: per_fold.iter().map(|f| f[i].1).sum(),
            }
        })
        .collect())
}

fn resolved_entries(grid: &TuningGrid, problem: &MtlProblem, seed: u64, config: &TuneConfig) -> Vec<(f64, Hyperparameters)> {
    order_grid(grid)
        .into_iter()
        .map(|h| (h.delta, grid.resolve(&h, problem.k(), problem.p(), config.mc_samples, seed)))
        .collect()
}

/// K-fold cross-validation over the grid, then a full refit at the selected point.
pub fn tune_cv(problem: &MtlProblem, grid: &TuningGrid, n_folds: usize, seed: u64, config: &TuneConfig) -> Result<CVReport> {
    grid.validate(problem.p())?;
    config.solver.validate()?;
    let entries = resolved_entries(grid, problem, seed, config);
    let points = cross_validate(problem, &entries, n_folds, seed, config, 1)?;
    let selected_index = select(&points, |_| true);
    let selected = points[selected_index].hyper;
    let final_fit = fit_full(problem, &selected, &config.solver, config.final_swaps)?;
    Ok(CVReport { points, selected_index, selected, final_fit })
}

fn neighbours<T: Copy>(values: &[T], i: usize) -> Vec<T> {
    values[i.saturating_sub(1)..(i + 2).min(values.len())].to_vec()
}

/// Stage 1 tunes `(s, δ)` with a small fixed ridge; stage 2 searches the
/// neighbouring `s` and `δ` grid values across the full third-parameter grid.
pub fn two_stage_tune(problem: &MtlProblem, grid: &TuningGrid, n_folds: usize, seed: u64, config: &TuneConfig) -> Result<CVReport> {
    grid.validate(problem.p())?;
    config.solver.validate()?;
    let mask = grid.method.mask();
    if !mask.delta || mask.n_tunable() != 3 {
        return Err(Error::InvalidConfig(format!("{} does not have three tunable parameters", grid.method)));
    }
    let third: Vec<f64> = if mask.lambda { sorted(&grid.lambda_values, false) } else { sorted(&grid.alpha_values, true) };
    if third.len() == 1 {
        return tune_cv(problem, grid, n_folds, seed, config);
    }

    let s_vals = grid.s_values.clone();
    let d_vals = sorted(&grid.delta_values, false);
    let stage1_grid = TuningGrid {
        lambda_values: vec![0.0],
        alpha_values: vec![config.pilot_alpha],
        delta_values: d_vals.clone(),
        ..grid.clone()
    };
    // the pilot ridge is applied even for methods that tune λ instead
    let entries1: Vec<(f64, Hyperparameters)> = resolved_entries(&stage1_grid, problem, seed, config)
        .into_iter()
        .map(|(dg, h)| (dg, Hyperparameters { alpha: config.pilot_alpha, lambda: 0.0, ..h }))
        .collect();
    let stage1 = cross_validate(problem, &entries1, n_folds, seed, config, 1)?;
    let best1 = &stage1[select(&stage1, |_| true)];
    let si = s_vals.iter().position(|&s| s == best1.hyper.s).expect("selected s is in the grid");
    let di = d_vals.iter().position(|&d| d == best1.delta_grid).expect("selected delta is in the grid");

    let stage2_grid = TuningGrid {
        s_values: neighbours(&s_vals, si),
        delta_values: neighbours(&d_vals, di),
        ..grid.clone()
    };
    let entries2 = resolved_entries(&stage2_grid, problem, seed, config);
    let stage2 = cross_validate(problem, &entries2, n_folds, seed, config, 2)?;

    let mut points = stage1;
    let offset = points.len();
    points.extend(stage2);
    let selected_index = select(&points, |p| p.stage == 2);
    debug_assert!(selected_index >= offset);
    let selected = points[selected_index].hyper;
    let final_fit = fit_full(problem, &selected, &config.solver, config.final_swaps)?;
    Ok(CVReport { points, selected_index, selected, final_fit })
}

/// Dispatches to [`two_stage_tune`] for three-parameter methods.
pub fn tune(problem: &MtlProblem, grid: &TuningGrid, n_folds: usize, seed: u64, config: &TuneConfig) -> Result<CVReport> {
    let mask = grid.method.mask();
    if mask.delta && mask.n_tunable() == 3 {
        two_stage_tune(problem, grid, n_folds, seed, config)
    } else {
        tune_cv(problem, grid, n_folds, seed, config)
    }
}

impl CVReport {
    /// One row per evaluated point.
    pub fn to_rows(&self, with_timing: bool) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header: Vec<String> = ["stage", "s", "lambda", "alpha", "delta_grid", "delta", "mean_error", "sd_error", "selected"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if with_timing {
            header.push("wall_time".into());
        }
        let rows = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut r = vec![
                    p.stage.to_string(),
                    p.hyper.s.to_string(),
                    fmt17(p.hyper.lambda),
                    fmt17(p.hyper.alpha),
                    fmt17(p.delta_grid),
                    fmt17(p.hyper.delta),
                    fmt17(p.mean_error),
                    fmt17(p.sd_error),
                    u8::from(i == self.selected_index).to_string(),
                ];
                if with_timing {
                    r.push(fmt17(p.wall_time));
                }
                r
            })
            .collect();
        (header, rows)
    }
}
