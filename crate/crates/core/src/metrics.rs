//! Prediction, estimation and support-recovery metrics.
//!
//! FP and FN use the standard definitions: `FP_k = ẑ_kᵀ(1 − z_k)`,
//! `FN_k = z_kᵀ(1 − ẑ_k)`. A task with no true positives has `F1_k = 0`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{ModelFit, MtlProblem};
use crate::simgen::SimulationTruth;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportDiagnostics {
    pub s_all: Vec<usize>,
    pub s_common: Vec<usize>,
    pub is_regular: bool,
    pub hetero_count: usize,
}

pub fn support_sets(z: &DMatrix<bool>) -> SupportDiagnostics {
    let k = z.ncols();
    let mut s_all = Vec::new();
    let mut s_common = Vec::new();
    let mut is_regular = true;
    for j in 0..z.nrows() {
        let c = (0..k).filter(|&t| z[(j, t)]).count();
        if c >= 1 {
            s_all.push(j);
        }
        if c == k {
            s_common.push(j);
        }
        if c > 1 && c < k {
            is_regular = false;
        }
    }
    let hetero_count = s_all.len() - s_common.len();
    SupportDiagnostics { s_all, s_common, is_regular, hetero_count }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub rmse_pred: f64,
    pub rmse_coef: f64,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub f1: f64,
    /// `C(K,2)⁻¹ p⁻¹ Σ_j Σ_{l<k} ẑ_kj ẑ_lj`.
    pub concordance: f64,
    /// Pairwise overlaps divided by pairwise `min(|ẑ_k|, |ẑ_l|)`.
    pub concordance_normalized: f64,
    pub hetero_count: usize,
    pub support_size: f64,
}

impl MetricRecord {
    /// Scalar metrics as `(name, value)` pairs, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("rmse_pred", self.rmse_pred),
            ("rmse_coef", self.rmse_coef),
            ("f1", self.f1),
            ("concordance", self.concordance),
            ("concordance_normalized", self.concordance_normalized),
            ("hetero_count", self.hetero_count as f64),
            ("support_size", self.support_size),
            ("tp", self.tp.iter().sum::<usize>() as f64),
            ("fp", self.fp.iter().sum::<usize>() as f64),
            ("fn", self.fn_.iter().sum::<usize>() as f64),
        ]
    }
}

/// `(as-written, normalized)` concordance of an estimated support matrix.
pub fn concordance(z: &DMatrix<bool>) -> (f64, f64) {
    let (p, k) = z.shape();
    if k < 2 {
        return (1.0, 1.0);
    }
    let sizes: Vec<usize> = (0..k).map(|t| z.column(t).iter().filter(|&&v| v).count()).collect();
    let mut overlap = 0usize;
    let mut max_agree = 0usize;
    for a in 0..k {
        for b in 0..a {
            overlap += (0..p).filter(|&j| z[(j, a)] && z[(j, b)]).count();
            max_agree += sizes[a].min(sizes[b]);
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let raw = overlap as f64 / (pairs * p as f64);
    let norm = if max_agree == 0 { 0.0 } else { overlap as f64 / max_agree as f64 };
    (raw, norm)
}

pub fn evaluate(fit: &ModelFit, truth: &SimulationTruth, test: &MtlProblem) -> Result<MetricRecord> {
    let (p, k) = (test.p(), test.k());
    if fit.b.shape() != (p, k) || truth.b.shape() != (p, k) || truth.z.shape() != (p, k) {
        return Err(Error::Dimension(format!(
            "fit {:?}, truth {:?}, test data p = {p}, K = {k}",
            fit.b.shape(),
            truth.b.shape()
        )));
    }
    let kf = k as f64;
    let mut rmse_pred = 0.0;
    let mut rmse_coef = 0.0;
    let (mut tp, mut fp, mut fn_) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));
    let mut f1 = 0.0;
    for (c, t) in test.tasks().iter().enumerate() {
        let r = (&t.y - &t.x * fit.b.column(c)).add_scalar(-fit.intercepts[c]);
        rmse_pred += r.norm() / (t.n() as f64).sqrt();
        let d0 = truth.intercepts[c] - fit.intercepts[c];
        let dsq = d0 * d0 + (truth.b.column(c) - fit.b.column(c)).norm_squared();
        rmse_coef += dsq.sqrt();

        let (mut a, mut f, mut n) = (0, 0, 0);
        for j in 0..p {
            match (truth.z[(j, c)], fit.z[(j, c)]) {
                (true, true) => a += 1,
                (false, true) => f += 1,
                (true, false) => n += 1,
                (false, false) => {}
            }
        }
        if a > 0 {
            let recall = a as f64 / (a + n) as f64;
            let precision = a as f64 / (a + f) as f64;
            f1 += 2.0 * precision * recall / (precision + recall);
        }
        tp.push(a);
        fp.push(f);
        fn_.push(n);
    }
    let (conc, conc_norm) = concordance(&fit.z);
    let support_size = fit.z.iter().filter(|&&v| v).count() as f64 / kf;
    Ok(MetricRecord {
        rmse_pred: rmse_pred / kf,
        rmse_coef: rmse_coef / (kf * ((p + 1) as f64).sqrt()),
        tp,
        fp,
        fn_,
        f1: f1 / kf,
        concordance: conc,
        concordance_normalized: conc_norm,
        hetero_count: support_sets(&fit.z).hetero_count,
        support_size,
    })
}
