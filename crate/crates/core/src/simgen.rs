//! Synthetic multi-task studies with known truth.
//!
//! Rows are drawn from `N(0, Σ)` with `Σ_{lr} = ρ^{|l−r|}`. Noise variances are
//! drawn per task from `Unif(τ/2, 2τ)` except in the sign-flip design, which
//! uses `σ² = τ` for every task. Indices in this module are 0-based; the odd
//! 1-based pool `{1, 3, …, 2q−1}` is `{0, 2, …, 2q−2}` here.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{MtlProblem, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Supports drawn uniformly from the odd pool of size `q`.
    Main,
    /// A shared block, a zero block and a Bernoulli(`p_z`) block.
    Partitioned,
    /// Coefficients in `{−1, 0, 1}`; `shared` coordinates are in every
    /// support with alternating signs across tasks.
    SignFlip { shared: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub k: usize,
    pub p: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rho: f64,
    pub s: usize,
    pub q: usize,
    pub tau: f64,
    pub sigma2_beta: f64,
    /// Magnitude band of the coefficient means.
    pub mu_range: (f64, f64),
    /// Replaces the drawn coefficient means by a constant.
    pub mu_override: Option<f64>,
    /// Draw one mean per coordinate instead of one per (task, coordinate).
    pub share_mu: bool,
    pub intercept: f64,
    pub design: Design,
    pub common_card: usize,
    pub hetero_max: usize,
    pub p_z: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k: 4,
            p: 250,
            n_train: 50,
            n_test: 50,
            rho: 0.5,
            s: 10,
            q: 20,
            tau: 1.0,
            sigma2_beta: 50.0,
            mu_range: (0.2, 0.5),
            mu_override: None,
            share_mu: false,
            intercept: 0.0,
            design: Design::Main,
            common_card: 10,
            hetero_max: 5,
            p_z: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 || self.p == 0 || self.n_train == 0 || self.n_test == 0 {
            return bad("k, p, n_train and n_test must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1), got {}", self.rho));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.sigma2_beta >= 0.0 && self.sigma2_beta.is_finite()) {
            return bad(format!("sigma2_beta must be >= 0, got {}", self.sigma2_beta));
        }
        let (lo, hi) = self.mu_range;
        if !(0.0 <= lo && lo < hi) {
            return bad(format!("mu_range must satisfy 0 <= lo < hi, got ({lo}, {hi})"));
        }
        match self.design {
            Design::Main => {
                if self.s == 0 || self.s > self.q {
                    return bad(format!("need 1 <= s <= q, got s = {}, q = {}", self.s, self.q));
                }
                if 2 * self.q - 1 > self.p {
                    return bad(format!("odd pool of size q = {} does not fit in p = {}", self.q, self.p));
                }
            }
            Design::Partitioned => {
                if 2 * (self.common_card + self.hetero_max) > self.p + 1 {
                    return bad("partitioned blocks do not fit in p".into());
                }
                if !(0.0..=1.0).contains(&self.p_z) {
                    return bad(format!("p_z must be in [0, 1], got {}", self.p_z));
                }
            }
            Design::SignFlip { shared } => {
                if shared > self.s {
                    return bad(format!("shared = {shared} exceeds s = {}", self.s));
                }
                let pool = self.p.div_ceil(2);
                if shared + self.k * (self.s - shared) > pool {
                    return bad("sign-flip supports do not fit in the odd pool".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    /// `β ⊙ z`, p×K.
    pub b: DMatrix<f64>,
    pub z: DMatrix<bool>,
    pub intercepts: DVector<f64>,
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedStudy {
    pub train: MtlProblem,
    pub test: MtlProblem,
    pub truth: SimulationTruth,
}

/// `Σ_{lr} = ρ^{|l−r|}` and its lower Cholesky factor.
pub fn make_covariance(p: usize, rho: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let sigma = DMatrix::from_fn(p, p, |l, r| rho.powi(l.abs_diff(r) as i32));
    // AR(1) factor in closed form: row i = (ρ^i, ρ^{i−1}c, …, c) with c = √(1−ρ²)
    let c = (1.0 - rho * rho).sqrt();
    let factor = DMatrix::from_fn(p, p, |i, j| {
        if j > i {
            0.0
        } else if j == 0 {
            rho.powi(i as i32)
        } else {
            c * rho.powi((i - j) as i32)
        }
    });
    (sigma, factor)
}

/// Each column is a uniform `s`-subset of the odd pool, independently per task.
pub fn draw_supports_main(p: usize, k: usize, s: usize, q: usize, rng: &mut impl Rng) -> DMatrix<bool> {
    let mut z = DMatrix::from_element(p, k, false);
    for c in 0..k {
        for i in sample(rng, q, s).into_iter() {
            z[(2 * i, c)] = true;
        }
    }
    z
}

/// Seed of replicate `r`: the first word of stream `r` of a generator keyed by `base`.
pub fn replicate_seed(base: u64, r: u64) -> u64 {
    let mut g = ChaCha8Rng::seed_from_u64(base);
    g.set_stream(r);
    g.next_u64()
}

fn draw_mu(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> f64 {
    if let Some(c) = cfg.mu_override {
        return c;
    }
    let (lo, hi) = cfg.mu_range;
    let m = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn draw_supports(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> DMatrix<bool> {
    let (p, k) = (cfg.p, cfg.k);
    match cfg.design {
        Design::Main => draw_supports_main(p, k, cfg.s, cfg.q, rng),
        Design::Partitioned => {
            let mut z = DMatrix::from_element(p, k, false);
            // shared block on even slots 0, 2, …; then the Bernoulli block,
            // also on alternating slots; the rest stays zero
            let start = 2 * cfg.common_card;
            for c in 0..k {
                for i in 0..cfg.common_card {
                    z[(2 * i, c)] = true;
                }
                for i in 0..cfg.hetero_max {
                    if rng.random_bool(cfg.p_z) {
                        z[(start + 2 * i, c)] = true;
                    }
                }
            }
            z
        }
        Design::SignFlip { shared } => {
            let pool = p.div_ceil(2);
            let unique = cfg.s - shared;
            let picks = sample(rng, pool, shared + k * unique).into_vec();
            let mut z = DMatrix::from_element(p, k, false);
            for c in 0..k {
                for &i in &picks[..shared] {
                    z[(2 * i, c)] = true;
                }
                for &i in &picks[shared + c * unique..shared + (c + 1) * unique] {
                    z[(2 * i, c)] = true;
                }
            }
            z
        }
    }
}

fn draw_coefficients(cfg: &SimConfig, z: &DMatrix<bool>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (p, k) = (cfg.p, cfg.k);
    let mut b = DMatrix::zeros(p, k);
    if let Design::SignFlip { .. } = cfg.design {
        for j in 0..p {
            let shared = (0..k).all(|c| z[(j, c)]);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for c in 0..k {
                if z[(j, c)] {
                    b[(j, c)] = if shared && c % 2 == 1 { -sign } else if shared { sign } else if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                }
            }
        }
        return b;
    }
    let sd = cfg.sigma2_beta.sqrt();
    let shared_mu: Vec<f64> = if cfg.share_mu { (0..p).map(|_| draw_mu(cfg, rng)).collect() } else { Vec::new() };
    for c in 0..k {
        for j in 0..p {
            let mu = if cfg.share_mu { shared_mu[j] } else { draw_mu(cfg, rng) };
            let v = if sd == 0.0 { mu } else { Normal::new(mu, sd).expect("finite sd").sample(rng) };
            if z[(j, c)] {
                b[(j, c)] = v;
            }
        }
    }
    b
}

fn draw_rows(n: usize, factor: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let p = factor.nrows();
    let u = DMatrix::from_fn(p, n, |_, _| StandardNormal.sample(rng));
    (factor * u).transpose()
}

/// Draws a full study (training and test sets from the same truth).
pub fn simulate(cfg: &SimConfig) -> Result<SimulatedStudy> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = draw_supports(cfg, &mut rng);
    let b = draw_coefficients(cfg, &z, &mut rng);
    let sigma2: Vec<f64> = match cfg.design {
        Design::SignFlip { .. } => vec![cfg.tau; cfg.k],
        _ => (0..cfg.k).map(|_| rng.random_range(cfg.tau / 2.0..2.0 * cfg.tau)).collect(),
    };
    let (_, factor) = make_covariance(cfg.p, cfg.rho);
    let mut train = Vec::with_capacity(cfg.k);
    let mut test = Vec::with_capacity(cfg.k);
    for c in 0..cfg.k {
        let sd = sigma2[c].sqrt();
        for (n, out) in [(cfg.n_train, &mut train), (cfg.n_test, &mut test)] {
            let x = draw_rows(n, &factor, &mut rng);
            let eps = DVector::from_fn(n, |_, _| { let e: f64 = StandardNormal.sample(&mut rng); sd * e });
            let y = (&x * b.column(c)).add_scalar(cfg.intercept) + eps;
            out.push(TaskDataset::new(format!("task{}", c + 1), x, y)?);
        }
    }
    Ok(SimulatedStudy {
        train: MtlProblem::new(train)?,
        test: MtlProblem::new(test)?,
        truth: SimulationTruth { b, z, intercepts: DVector::from_element(cfg.k, cfg.intercept), sigma2 },
    })
}
