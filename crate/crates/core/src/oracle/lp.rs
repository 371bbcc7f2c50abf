//! Big-M model export in CPLEX LP text format, and a reader for the subset of
//! the format this module writes.
//!
//! The model is built on centered data: intercepts are profiled out and can
//! be recovered as `ȳ_k − x̄_kᵀβ_k`. The objective carries the constant
//! `Σ_k y_kᵀy_k/n_k` so its value equals the regression objective exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::problem::{Hyperparameters, ModelFit, MtlProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MipMode {
    Common,
    Heterogeneous,
}

impl MipMode {
    pub fn of(hyper: &Hyperparameters) -> Self {
        if hyper.common_support {
            MipMode::Common
        } else {
            MipMode::Heterogeneous
        }
    }

    fn name(self) -> &'static str {
        match self {
            MipMode::Common => "common",
            MipMode::Heterogeneous => "heterogeneous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MipSummary {
    pub n_binaries: usize,
    pub n_continuous: usize,
    pub n_constraints: usize,
}

fn b_name(k: usize, j: usize) -> String {
    format!("b_{}_{}", k + 1, j + 1)
}

fn bb_name(j: usize) -> String {
    format!("bb_{}", j + 1)
}

fn z_name(mode: MipMode, k: usize, j: usize) -> String {
    match mode {
        MipMode::Common => format!("z_{}", j + 1),
        MipMode::Heterogeneous => format!("z_{}_{}", k + 1, j + 1),
    }
}

fn zb_name(j: usize) -> String {
    format!("zb_{}", j + 1)
}

fn term(out: &mut String, coef: f64, var: &str) -> Result<()> {
    let sign = if coef < 0.0 { '-' } else { '+' };
    write!(out, " {sign} {} {var}", fmt17(coef.abs()))?;
    Ok(())
}

/// Writes the model and returns its size. `m` bounds every coefficient.
pub fn export_mip(problem: &MtlProblem, hyper: &Hyperparameters, m: f64, mode: MipMode, out: &mut impl Write) -> Result<MipSummary> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidConfig(format!("big-M must be positive and finite, got {m}")));
    }
    hyper.validate(problem.p())?;
    let (p, kk) = (problem.p(), problem.k());
    let cp = problem.centered();
    let kf = kk as f64;
    let (lambda, alpha) = (hyper.lambda, hyper.alpha);
    let delta = if mode == MipMode::Heterogeneous { hyper.delta } else { 0.0 };

    writeln!(out, "\\ big-M sparse multi-task regression model")?;
    writeln!(out, "\\ mode: {}", mode.name())?;
    writeln!(out, "\\ M = {}", fmt17(m))?;
    writeln!(out, "\\ p = {p}, K = {kk}, s = {}", hyper.s)?;
    writeln!(out, "\\ lambda = {}, delta = {}, alpha = {}", fmt17(lambda), fmt17(delta), fmt17(alpha))?;
    writeln!(out, "\\ data centered per task; intercepts omitted (b0_k = mean(y_k) - mean(x_k)'b_k)")?;
    writeln!(out, "\\ objective includes the constant sum_k y_k'y_k / n_k")?;
    writeln!(out, "Minimize")?;

    let mut constant = 0.0;
    let mut linear = String::new();
    let mut quad = String::new();
    for (k, t) in cp.tasks.iter().enumerate() {
        let n = t.data.n() as f64;
        let x = &t.data.x;
        constant += t.data.y.norm_squared() / n;
        let xty = x.tr_mul(&t.data.y) / n;
        let gram = x.tr_mul(x) / n;
        for j in 0..p {
            if xty[j] != 0.0 {
                term(&mut linear, -2.0 * xty[j], &b_name(k, j))?;
            }
        }
        // inside the bracket every coefficient is doubled
        for i in 0..p {
            let diag = gram[(i, i)] + lambda + alpha;
            if diag != 0.0 {
                term(&mut quad, 2.0 * diag, &format!("{} ^ 2", b_name(k, i)))?;
                quad.push('\n');
            }
            for j in (i + 1)..p {
                if gram[(i, j)] != 0.0 {
                    term(&mut quad, 4.0 * gram[(i, j)], &format!("{} * {}", b_name(k, i), b_name(k, j)))?;
                    quad.push('\n');
                }
            }
        }
    }
    if lambda != 0.0 {
        for j in 0..p {
            for k in 0..kk {
                term(&mut quad, -4.0 * lambda, &format!("{} * {}", b_name(k, j), bb_name(j)))?;
                quad.push('\n');
            }
            term(&mut quad, 2.0 * lambda * kf, &format!("{} ^ 2", bb_name(j)))?;
            quad.push('\n');
        }
    }
    if delta != 0.0 {
        for j in 0..p {
            for k in 0..kk {
                let z = z_name(mode, k, j);
                term(&mut quad, 2.0 * delta, &format!("{z} ^ 2"))?;
                quad.push('\n');
                term(&mut quad, -4.0 * delta, &format!("{z} * {}", zb_name(j)))?;
                quad.push('\n');
            }
            term(&mut quad, 2.0 * delta * kf, &format!("{} ^ 2", zb_name(j)))?;
            quad.push('\n');
        }
    }
    writeln!(out, " obj: {}", fmt17(constant))?;
    // one term per line keeps lines short for strict readers
    for piece in split_terms(&linear) {
        writeln!(out, "   {piece}")?;
    }
    if !quad.is_empty() {
        writeln!(out, "   + [")?;
        for line in quad.lines() {
            writeln!(out, "   {}", line.trim())?;
        }
        writeln!(out, "   ] / 2")?;
    }

    writeln!(out, "Subject To")?;
    let mut rows = 0;
    for k in 0..kk {
        for j in 0..p {
            let (b, z) = (b_name(k, j), z_name(mode, k, j));
            writeln!(out, " lo_{}_{}: {b} + {} {z} >= 0", k + 1, j + 1, fmt17(m))?;
            writeln!(out, " hi_{}_{}: {b} - {} {z} <= 0", k + 1, j + 1, fmt17(m))?;
            rows += 2;
        }
    }
    let card_tasks = if mode == MipMode::Common { 1 } else { kk };
    for k in 0..card_tasks {
        let name = if mode == MipMode::Common { "card".to_string() } else { format!("card_{}", k + 1) };
        writeln!(out, " {name}:")?;
        for j in 0..p {
            writeln!(out, "   + {}", z_name(mode, k, j))?;
        }
        writeln!(out, "   <= {}", hyper.s)?;
        rows += 1;
    }
    if mode == MipMode::Heterogeneous {
        for j in 0..p {
            let mut row = format!(" zbdef_{}: {} {}", j + 1, fmt17(kf), zb_name(j));
            for k in 0..kk {
                write!(row, " - {}", z_name(mode, k, j))?;
            }
            writeln!(out, "{row} = 0")?;
            rows += 1;
        }
    }

    writeln!(out, "Bounds")?;
    for k in 0..kk {
        for j in 0..p {
            writeln!(out, " {} free", b_name(k, j))?;
        }
    }
    for j in 0..p {
        writeln!(out, " {} free", bb_name(j))?;
    }
    if mode == MipMode::Heterogeneous {
        for j in 0..p {
            writeln!(out, " 0 <= {} <= 1", zb_name(j))?;
        }
    }

    writeln!(out, "Binaries")?;
    let mut n_bin = 0;
    for k in 0..card_tasks {
        for j in 0..p {
            writeln!(out, " {}", z_name(mode, k, j))?;
            n_bin += 1;
        }
    }
    writeln!(out, "End")?;

    let n_continuous = kk * p + p + if mode == MipMode::Heterogeneous { p } else { 0 };
    Ok(MipSummary { n_binaries: n_bin, n_continuous, n_constraints: rows })
}

/// Splits `" + a x - b y"` into `["+ a x", "- b y"]`.
fn split_terms(s: &str) -> Vec<String> {
    let toks: Vec<&str> = s.split_whitespace().collect();
    toks.chunks(3).map(|c| c.join(" ")).collect()
}

/// Variable values of a fit in the model's naming scheme.
pub fn assignment(fit: &ModelFit, mode: MipMode) -> BTreeMap<String, f64> {
    let (p, kk) = (fit.p(), fit.k());
    let mut a = BTreeMap::new();
    let beta_bar = crate::problem::row_mean(&fit.b);
    let z_bar = crate::problem::row_mean_bool(&fit.z);
    for k in 0..kk {
        for j in 0..p {
            a.insert(b_name(k, j), fit.b[(j, k)]);
            let z = if fit.z[(j, k)] { 1.0 } else { 0.0 };
            match mode {
                MipMode::Heterogeneous => {
                    a.insert(z_name(mode, k, j), z);
                }
                MipMode::Common if k == 0 => {
                    a.insert(z_name(mode, k, j), z);
                }
                MipMode::Common => {}
            }
        }
    }
    for j in 0..p {
        a.insert(bb_name(j), beta_bar[j]);
        if mode == MipMode::Heterogeneous {
            a.insert(zb_name(j), z_bar[j]);
        }
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpRow {
    pub name: String,
    pub terms: Vec<(String, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LpModel {
    pub comments: Vec<String>,
    pub constant: f64,
    pub linear: Vec<(String, f64)>,
    /// `(a, b, c)` contributes `c·a·b` (already divided by two).
    pub quadratic: Vec<(String, String, f64)>,
    pub rows: Vec<LpRow>,
    pub free: BTreeSet<String>,
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub binaries: Vec<String>,
}

#[derive(Default)]
struct Expr {
    constant: f64,
    linear: Vec<(String, f64)>,
    quadratic: Vec<(String, String, f64)>,
}

fn is_number(tok: &str) -> bool {
    tok.starts_with(|c: char| c.is_ascii_digit() || c == '.')
}

fn num(tok: &str, line: usize) -> Result<f64> {
    tok.parse().map_err(|_| Error::parse("<lp>", line, format!("bad number '{tok}'")))
}

fn parse_expr(toks: &[(usize, String)]) -> Result<Expr> {
    let mut e = Expr::default();
    let mut i = 0;
    let mut in_quad = false;
    let mut quad_start = 0;
    let mut sign = 1.0;
    let mut coef: Option<f64> = None;
    let tok = |i: usize| toks.get(i).map(|(_, t)| t.as_str());
    while let Some(t) = tok(i) {
        let line = toks[i].0;
        match t {
            "+" => sign = 1.0,
            "-" => sign = -sign,
            "[" => {
                in_quad = true;
                quad_start = e.quadratic.len();
            }
            "]" => {
                if !in_quad {
                    return Err(Error::parse("<lp>", line, "unmatched ']'"));
                }
                in_quad = false;
                if tok(i + 1) == Some("/") {
                    let d = num(tok(i + 2).unwrap_or(""), line)?;
                    for q in &mut e.quadratic[quad_start..] {
                        q.2 /= d;
                    }
                    i += 2;
                }
            }
            t if is_number(t) => {
                let v = num(t, line)?;
                let next_is_var = tok(i + 1).is_some_and(|n| n.starts_with(|c: char| c.is_ascii_alphabetic()));
                if next_is_var {
                    coef = Some(v);
                } else {
                    e.constant += sign * v;
                    sign = 1.0;
                }
            }
            var => {
                let c = sign * coef.take().unwrap_or(1.0);
                sign = 1.0;
                match tok(i + 1) {
                    Some("^") => {
                        if tok(i + 2) != Some("2") {
                            return Err(Error::parse("<lp>", line, "only squares are supported"));
                        }
                        e.quadratic.push((var.to_string(), var.to_string(), c));
                        i += 2;
                    }
                    Some("*") => {
                        let other = tok(i + 2).ok_or_else(|| Error::parse("<lp>", line, "dangling '*'"))?;
                        e.quadratic.push((var.to_string(), other.to_string(), c));
                        i += 2;
                    }
                    _ => {
                        if in_quad {
                            return Err(Error::parse("<lp>", line, format!("linear term '{var}' inside quadratic bracket")));
                        }
                        e.linear.push((var.to_string(), c));
                    }
                }
            }
        }
        i += 1;
    }
    Ok(e)
}

#[derive(PartialEq)]
enum Section {
    Header,
    Objective,
    Constraints,
    Bounds,
    Binaries,
    End,
}

/// Parses text produced by [`export_mip`].
pub fn parse_lp(text: &str) -> Result<LpModel> {
    let mut model = LpModel::default();
    let mut section = Section::Header;
    let mut obj_toks: Vec<(usize, String)> = Vec::new();
    let mut row_toks: Vec<(usize, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let trimmed = raw.trim();
        if let Some(c) = trimmed.strip_prefix('\\') {
            model.comments.push(c.trim().to_string());
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let lower = trimmed.to_ascii_lowercase();
        let next = match lower.as_str() {
            "minimize" => Some(Section::Objective),
            "subject to" => Some(Section::Constraints),
            "bounds" => Some(Section::Bounds),
            "binaries" => Some(Section::Binaries),
            "end" => Some(Section::End),
            _ => None,
        };
        if let Some(s) = next {
            section = s;
            continue;
        }
        match section {
            Section::Header | Section::End => {
                return Err(Error::parse("<lp>", line, format!("unexpected content '{trimmed}'")));
            }
            Section::Objective => {
                obj_toks.extend(trimmed.split_whitespace().map(|t| (line, t.to_string())));
            }
            Section::Constraints => {
                row_toks.extend(trimmed.split_whitespace().map(|t| (line, t.to_string())));
            }
            Section::Bounds => {
                let t: Vec<&str> = trimmed.split_whitespace().collect();
                match t.as_slice() {
                    [v, "free"] => {
                        model.free.insert(v.to_string());
                    }
                    [lo, "<=", v, "<=", hi] => {
                        model.bounds.insert(v.to_string(), (num(lo, line)?, num(hi, line)?));
                    }
                    _ => return Err(Error::parse("<lp>", line, format!("unsupported bound '{trimmed}'"))),
                }
            }
            Section::Binaries => model.binaries.extend(trimmed.split_whitespace().map(str::to_string)),
        }
    }
    if section != Section::End {
        return Err(Error::parse("<lp>", text.lines().count(), "missing End"));
    }
    match obj_toks.first() {
        Some((_, t)) if t.ends_with(':') => {
            obj_toks.remove(0);
        }
        _ => {}
    }
    let obj = parse_expr(&obj_toks)?;
    model.constant = obj.constant;
    model.linear = obj.linear;
    model.quadratic = obj.quadratic;

    // rows start at a `name:` token
    let mut starts: Vec<usize> = row_toks.iter().enumerate().filter(|(_, (_, t))| t.ends_with(':')).map(|(i, _)| i).collect();
    starts.push(row_toks.len());
    if starts[0] != 0 && !row_toks.is_empty() {
        return Err(Error::parse("<lp>", row_toks[0].0, "constraint without a name"));
    }
    for w in starts.windows(2) {
        let (line, name) = &row_toks[w[0]];
        let body = &row_toks[w[0] + 1..w[1]];
        let pos = body
            .iter()
            .position(|(_, t)| matches!(t.as_str(), "<=" | ">=" | "="))
            .ok_or_else(|| Error::parse("<lp>", *line, "constraint without a sense"))?;
        let sense = match body[pos].1.as_str() {
            "<=" => Sense::Le,
            ">=" => Sense::Ge,
            _ => Sense::Eq,
        };
        let lhs = parse_expr(&body[..pos])?;
        if !lhs.quadratic.is_empty() || lhs.constant != 0.0 {
            return Err(Error::parse("<lp>", *line, "constraints must be linear without constants"));
        }
        let rhs = parse_expr(&body[pos + 1..])?;
        model.rows.push(LpRow {
            name: name.trim_end_matches(':').to_string(),
            terms: lhs.linear,
            sense,
            rhs: rhs.constant,
        });
    }
    Ok(model)
}

impl LpModel {
    fn value(a: &BTreeMap<String, f64>, v: &str) -> Result<f64> {
        a.get(v).copied().ok_or_else(|| Error::InvalidConfig(format!("no value for variable '{v}'")))
    }

    pub fn evaluate_objective(&self, a: &BTreeMap<String, f64>) -> Result<f64> {
        let mut total = self.constant;
        for (v, c) in &self.linear {
            total += c * Self::value(a, v)?;
        }
        for (u, v, c) in &self.quadratic {
            total += c * Self::value(a, u)? * Self::value(a, v)?;
        }
        Ok(total)
    }

    /// Largest violation over rows, bounds and integrality.
    pub fn max_violation(&self, a: &BTreeMap<String, f64>) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for row in &self.rows {
            let mut lhs = 0.0;
            for (v, c) in &row.terms {
                lhs += c * Self::value(a, v)?;
            }
            let viol = match row.sense {
                Sense::Le => lhs - row.rhs,
                Sense::Ge => row.rhs - lhs,
                Sense::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        for (v, (lo, hi)) in &self.bounds {
            let x = Self::value(a, v)?;
            worst = worst.max(lo - x).max(x - hi);
        }
        for v in &self.binaries {
            let x = Self::value(a, v)?;
            worst = worst.max(x.min(1.0 - x).abs()).max(-x).max(x - 1.0);
        }
        Ok(worst)
    }

    /// Every variable mentioned anywhere in the model.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        s.extend(self.linear.iter().map(|(v, _)| v.clone()));
        for (u, v, _) in &self.quadratic {
            s.insert(u.clone());
            s.insert(v.clone());
        }
        for r in &self.rows {
            s.extend(r.terms.iter().map(|(v, _)| v.clone()));
        }
        s.extend(self.free.iter().cloned());
        s.extend(self.bounds.keys().cloned());
        s.extend(self.binaries.iter().cloned());
        s
    }
}
