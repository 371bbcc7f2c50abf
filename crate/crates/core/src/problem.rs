//! Domain types shared by every solver: task data, the multi-task problem,
//! hyperparameters, the method taxonomy and fitted models.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// One regression task: an `n_k × p` design matrix and its outcome vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub id: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TaskDataset {
    pub fn new(id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let id = id.into();
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Dimension(format!("task '{id}' has an empty design matrix")));
        }
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "task '{id}': X has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("design matrix of task '{id}'")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("outcome of task '{id}'")));
        }
        Ok(Self { id, x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> TaskDataset {
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        TaskDataset { id: self.id.clone(), x, y }
    }
}

/// An ordered collection of tasks sharing the same `p` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlProblem {
    tasks: Vec<TaskDataset>,
    p: usize,
}

impl MtlProblem {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Dimension("a problem needs at least one task".into()))?;
        let p = first.p();
        let mut ids = HashSet::new();
        for t in &tasks {
            if t.p() != p {
                return Err(Error::Dimension(format!(
                    "task '{}' has {} columns, expected {p}",
                    t.id,
                    t.p()
                )));
            }
            if !ids.insert(t.id.as_str()) {
                return Err(Error::Dimension(format!("duplicate task id '{}'", t.id)));
            }
        }
        Ok(Self { tasks, p })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn task(&self, k: usize) -> &TaskDataset {
        &self.tasks[k]
    }

    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    /// Centers every task's outcome and design columns by their means.
    pub fn centered(&self) -> CenteredProblem {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let n = t.n() as f64;
                let x_mean = DVector::from_iterator(t.p(), t.x.column_iter().map(|c| c.sum() / n));
                let y_mean = t.y.sum() / n;
                let mut xc = t.x.clone();
                for (j, mut col) in xc.column_iter_mut().enumerate() {
                    col.add_scalar_mut(-x_mean[j]);
                }
                let yc = t.y.add_scalar(-y_mean);
                CenteredTask {
                    data: TaskDataset { id: t.id.clone(), x: xc, y: yc },
                    x_mean,
                    y_mean,
                }
            })
            .collect();
        CenteredProblem { tasks, p: self.p }
    }
}

#[derive(Debug, Clone)]
pub struct CenteredTask {
    pub data: TaskDataset,
    pub x_mean: DVector<f64>,
    pub y_mean: f64,
}

/// Mean-centered copy of a problem. Solvers work here; intercepts are
/// recovered as `ȳ_k − x̄_kᵀβ_k`.
#[derive(Debug, Clone)]
pub struct CenteredProblem {
    pub tasks: Vec<CenteredTask>,
    pub p: usize,
}

impl CenteredProblem {
    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn intercepts(&self, b: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.tasks.len(),
            self.tasks
                .iter()
                .enumerate()
                .map(|(k, t)| t.y_mean - t.x_mean.dot(&b.column(k))),
        )
    }
}

/// The `(s, λ, δ, α)` tuple plus the common-support switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyperparameters {
    pub s: usize,
    pub lambda: f64,
    pub delta: f64,
    pub alpha: f64,
    pub common_support: bool,
}

impl Hyperparameters {
    pub fn new(s: usize, lambda: f64, delta: f64, alpha: f64, common_support: bool) -> Self {
        Self { s, lambda, delta, alpha, common_support }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.s == 0 {
            return Err(Error::InvalidHyper("s must be positive".into()));
        }
        if self.s > p {
            return Err(Error::InvalidHyper(format!("s = {} exceeds p = {p}", self.s)));
        }
        for (name, v) in [("lambda", self.lambda), ("delta", self.delta), ("alpha", self.alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidHyper(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// δ actually entering the objective; the common-support limit has no Zbar term.
    pub fn effective_delta(&self) -> f64 {
        if self.common_support {
            0.0
        } else {
            self.delta
        }
    }

    pub fn with_s(self, s: usize) -> Self {
        Self { s, ..self }
    }

    pub fn with_delta(self, delta: f64) -> Self {
        Self { delta, ..self }
    }
}

/// The six estimator variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MethodSpec {
    #[serde(rename = "TS-SR")]
    TsSr,
    #[serde(rename = "Bbar")]
    Bbar,
    #[serde(rename = "Zbar+L2")]
    ZbarL2,
    #[serde(rename = "Zbar+Bbar")]
    ZbarBbar,
    #[serde(rename = "CS+L2")]
    CsL2,
    #[serde(rename = "CS+Bbar")]
    CsBbar,
}

/// Which hyperparameters a method may tune. Parameters that are not tunable
/// are forced to zero (`common_support` is forced to the given value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperMask {
    pub lambda: bool,
    pub alpha: bool,
    pub delta: bool,
    pub common_support: bool,
}

impl HyperMask {
    pub fn n_tunable(&self) -> usize {
        // s is tunable for every method
        1 + self.lambda as usize + self.alpha as usize + self.delta as usize
    }
}

impl MethodSpec {
    pub const ALL: [MethodSpec; 6] = [
        MethodSpec::TsSr,
        MethodSpec::Bbar,
        MethodSpec::ZbarL2,
        MethodSpec::ZbarBbar,
        MethodSpec::CsL2,
        MethodSpec::CsBbar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::TsSr => "TS-SR",
            MethodSpec::Bbar => "Bbar",
            MethodSpec::ZbarL2 => "Zbar+L2",
            MethodSpec::ZbarBbar => "Zbar+Bbar",
            MethodSpec::CsL2 => "CS+L2",
            MethodSpec::CsBbar => "CS+Bbar",
        }
    }

    pub fn mask(&self) -> HyperMask {
        method_mask(*self)
    }

    /// Projects arbitrary hyperparameters onto this method's admissible set.
    pub fn apply(&self, h: Hyperparameters) -> Hyperparameters {
        let m = self.mask();
        Hyperparameters {
            s: h.s,
            lambda: if m.lambda { h.lambda } else { 0.0 },
            alpha: if m.alpha { h.alpha } else { 0.0 },
            delta: if m.delta { h.delta } else { 0.0 },
            common_support: m.common_support,
        }
    }
}

pub fn method_mask(spec: MethodSpec) -> HyperMask {
    let (lambda, alpha, delta, common_support) = match spec {
        MethodSpec::TsSr => (false, true, false, false),
        MethodSpec::Bbar => (true, false, false, false),
        MethodSpec::ZbarL2 => (false, true, true, false),
        MethodSpec::ZbarBbar => (true, false, true, false),
        MethodSpec::CsL2 => (false, true, false, true),
        MethodSpec::CsBbar => (true, false, false, true),
    };
    HyperMask { lambda, alpha, delta, common_support }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !matches!(c, '-' | '_' | '+' | ' ')).collect();
        match norm.to_ascii_lowercase().as_str() {
            "tssr" => Ok(MethodSpec::TsSr),
            "bbar" => Ok(MethodSpec::Bbar),
            "zbarl2" => Ok(MethodSpec::ZbarL2),
            "zbarbbar" => Ok(MethodSpec::ZbarBbar),
            "csl2" => Ok(MethodSpec::CsL2),
            "csbbar" => Ok(MethodSpec::CsBbar),
            _ => Err(Error::InvalidConfig(format!("unknown method '{s}'"))),
        }
    }
}

/// A fitted multi-task model. `beta_bar` and `z_bar` are always the row means
/// of `b` and `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub b: DMatrix<f64>,
    pub z: DMatrix<bool>,
    pub intercepts: DVector<f64>,
    pub beta_bar: DVector<f64>,
    pub z_bar: DVector<f64>,
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    pub swaps: usize,
}

impl ModelFit {
    pub fn zeros(p: usize, k: usize) -> Self {
        Self::from_parts(DMatrix::zeros(p, k), DMatrix::from_element(p, k, false), DVector::zeros(k))
    }

    pub fn from_parts(b: DMatrix<f64>, z: DMatrix<bool>, intercepts: DVector<f64>) -> Self {
        let beta_bar = row_mean(&b);
        let z_bar = row_mean_bool(&z);
        Self { b, z, intercepts, beta_bar, z_bar, objective_trace: Vec::new(), sweeps: 0, swaps: 0 }
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    pub fn refresh_means(&mut self) {
        self.beta_bar = row_mean(&self.b);
        self.z_bar = row_mean_bool(&self.z);
    }

    pub fn support(&self, k: usize) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.z[(j, k)]).collect()
    }

    pub fn objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    /// Cardinality, complementarity and (optionally) common-column checks.
    pub fn check_feasible(&self, s: usize, common_support: bool) -> Result<()> {
        if self.z.shape() != self.b.shape() {
            return Err(Error::Dimension("B and Z shapes differ".into()));
        }
        for k in 0..self.k() {
            let card = self.z.column(k).iter().filter(|&&v| v).count();
            if card > s {
                return Err(Error::InvalidHyper(format!("task {k} support has {card} > s = {s} entries")));
            }
            for j in 0..self.p() {
                if self.b[(j, k)] != 0.0 && !self.z[(j, k)] {
                    return Err(Error::InvalidHyper(format!(
                        "complementarity violated at (j={j}, k={k})"
                    )));
                }
            }
            if common_support && k > 0 && self.z.column(k) != self.z.column(0) {
                return Err(Error::InvalidHyper("supports differ in common-support mode".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn row_mean(b: &DMatrix<f64>) -> DVector<f64> {
    let k = b.ncols() as f64;
    // ascending task order for reproducible sums
    DVector::from_iterator(
        b.nrows(),
        (0..b.nrows()).map(|j| (0..b.ncols()).fold(0.0, |acc, c| acc + b[(j, c)]) / k),
    )
}

pub(crate) fn row_mean_bool(z: &DMatrix<bool>) -> DVector<f64> {
    let k = z.ncols() as f64;
    DVector::from_iterator(
        z.nrows(),
        (0..z.nrows()).map(|j| (0..z.ncols()).filter(|&c| z[(j, c)]).count() as f64 / k),
    )
}

/// `X_new · B[:,k] + intercept_k`.
pub fn predict(fit: &ModelFit, x_new: &DMatrix<f64>, k: usize) -> Result<DVector<f64>> {
    if k >= fit.k() {
        return Err(Error::Dimension(format!("task index {k} out of range (K = {})", fit.k())));
    }
    if x_new.ncols() != fit.p() {
        return Err(Error::Dimension(format!(
            "X_new has {} columns, model has p = {}",
            x_new.ncols(),
            fit.p()
        )));
    }
    Ok((x_new * fit.b.column(k)).add_scalar(fit.intercepts[k]))
}
