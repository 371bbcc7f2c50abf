//! Command-line interface.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::blockcd::SolverConfig;
use crate::error::{Error, Result};
use crate::io::{fmt17, read_fit, read_task_dir, write_fit, write_table, write_text, TaskDirectory};
use crate::objective::objective;
use crate::oracle::{choose_big_m, export_mip, solve_exact, Limits, MipMode};
use crate::problem::{Hyperparameters, MethodSpec, ModelFit};
use crate::simgen::{Design, SimConfig};
use crate::study::{run_replicate, GridSpec, StudyConfig};
use crate::tuning::{fit_full, standardize_delta, tune, TuneConfig, TuningGrid, FINAL_SWAPS};

use config::Settings;

pub const CONFIG_ECHO: &str = "resolved_config.txt";

#[derive(Debug, Parser)]
#[command(name = "smtl", version, about = "Sparse multi-task regression with support heterogeneity regularization")]
pub struct Cli {
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true, env = "SMTL_THREADS")]
    pub threads: Option<usize>,
    /// `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Directory with one CSV per task.
    #[arg(long)]
    pub data: Option<String>,
    /// TS-SR, Bbar, Zbar+L2, Zbar+Bbar, CS+L2 or CS+Bbar.
    #[arg(long)]
    pub method: Option<String>,
    /// Support budget (comma-separated list when tuning).
    #[arg(long)]
    pub s: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub delta: Option<String>,
    /// Standardized δ; converted with δ = δ*/τ*.
    #[arg(long = "delta-star")]
    pub delta_star: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model: block CD from a warm start, then local search.
    Fit {
        #[command(flatten)]
        model: ModelArgs,
        /// Local-search commits after block CD.
        #[arg(long)]
        swaps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Add wall-clock time to summary.json.
        #[arg(long)]
        record_timing: bool,
    },
    /// Cross-validate over a grid and refit at the selected point.
    Tune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        record_timing: bool,
    },
    /// Replicated simulation study; writes long-format results.
    Simulate {
        #[arg(long)]
        replicates: Option<u64>,
        /// Comma-separated method names.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        record_timing: bool,
    },
    /// Write the big-M mixed-integer model in LP format.
    ExportMip {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "big-m")]
        big_m: Option<f64>,
        /// Path of the `.lp` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact solution by enumeration (small instances only).
    Oracle {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory of a `fit` run to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by the binary.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn execute(cli: Cli) -> Result<ExitCode> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let settings = Settings::load(cli.config.as_deref())?;
    pool.install(move || dispatch(cli.command, settings))
}

fn apply_model_args(s: &mut Settings, m: &ModelArgs) -> Result<()> {
    s.set("data", m.data.as_ref())?;
    s.set("method", m.method.as_ref())?;
    s.set("s", m.s.as_ref())?;
    s.set("lambda", m.lambda.as_ref())?;
    s.set("alpha", m.alpha.as_ref())?;
    s.set("delta", m.delta.as_ref())?;
    s.set("delta_star", m.delta_star.as_ref())?;
    s.set("seed", m.seed)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn solver_config(s: &Settings) -> Result<SolverConfig> {
    let d = SolverConfig::default();
    let c = SolverConfig {
        max_sweeps: s.get("max_sweeps", d.max_sweeps)?,
        rel_tol: s.get("rel_tol", d.rel_tol)?,
        use_active_sets: s.get("use_active_sets", d.use_active_sets)?,
        active_screen_multiplier: s.get("active_screen_multiplier", d.active_screen_multiplier)?,
        ..d
    };
    c.validate()?;
    Ok(c)
}

fn tune_config(s: &Settings) -> Result<TuneConfig> {
    let d = TuneConfig::default();
    Ok(TuneConfig {
        solver: solver_config(s)?,
        final_swaps: s.get("swaps", d.final_swaps)?,
        mc_samples: s.get("mc_samples", d.mc_samples)?,
        pilot_alpha: s.get("pilot_alpha", d.pilot_alpha)?,
    })
}

fn load_data(s: &Settings) -> Result<TaskDirectory> {
    let dir: String = s.require("data")?;
    read_task_dir(Path::new(&dir))
}

/// Single-point hyperparameters for `fit`, `export-mip` and `oracle`.
fn single_hyper(s: &Settings, k: usize, p: usize) -> Result<(MethodSpec, Hyperparameters)> {
    let method: MethodSpec = s.get("method", MethodSpec::TsSr)?;
    let budget: usize = s.require("s")?;
    let lambda = s.get("lambda", 0.0)?;
    let alpha = s.get("alpha", 0.0)?;
    let delta = match s.get_opt::<f64>("delta_star")? {
        Some(ds) => {
            if s.get_opt::<f64>("delta")?.is_some() {
                return Err(Error::InvalidConfig("give either delta or delta_star, not both".into()));
            }
            let seed = s.get("seed", 0u64)?;
            standardize_delta(ds, budget, k, p, s.get("mc_samples", 10_000usize)?, seed).delta
        }
        None => s.get("delta", 0.0)?,
    };
    let raw = Hyperparameters::new(budget, lambda, delta, alpha, false);
    let h = method.apply(raw);
    if h != (Hyperparameters { common_support: h.common_support, ..raw }) {
        log::warn!("{method} ignores some of the given penalties; using {h:?}");
    }
    h.validate(p)?;
    Ok((method, h))
}

#[derive(Serialize)]
struct FitSummary<'a> {
    method: &'a str,
    tasks: Vec<String>,
    p: usize,
    hyperparameters: Hyperparameters,
    objective: f64,
    sweeps: usize,
    swaps: usize,
    support_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_seconds: Option<f64>,
}

fn write_fit_outputs(
    out: &Path,
    data: &TaskDirectory,
    method: MethodSpec,
    hyper: &Hyperparameters,
    fit: &ModelFit,
    elapsed: Option<f64>,
) -> Result<()> {
    let ids = data.problem.ids();
    write_fit(out, fit, &ids, &data.features)?;
    let summary = FitSummary {
        method: method.name(),
        tasks: ids,
        p: data.problem.p(),
        hyperparameters: *hyper,
        objective: objective(&data.problem, fit, hyper)?,
        sweeps: fit.sweeps,
        swaps: fit.swaps,
        support_sizes: (0..fit.k()).map(|k| fit.support(k).len()).collect(),
        wall_time_seconds: elapsed,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &(json + "\n"))
}

fn dispatch(command: Command, mut s: Settings) -> Result<ExitCode> {
    match command {
        Command::Fit { model, swaps, out, record_timing } => {
            apply_model_args(&mut s, &model)?;
            s.set("swaps", swaps)?;
            let start = Instant::now();
            let data = load_data(&s)?;
            let (method, h) = single_hyper(&s, data.problem.k(), data.problem.p())?;
            let solver = solver_config(&s)?;
            let fit = fit_full(&data.problem, &h, &solver, s.get("swaps", FINAL_SWAPS)?)?;
            let elapsed = start.elapsed().as_secs_f64();
            eprintln!("fit finished in {elapsed:.3} s");
            ensure_dir(&out)?;
            write_fit_outputs(&out, &data, method, &h, &fit, record_timing.then_some(elapsed))?;
            write_text(&out.join(CONFIG_ECHO), &s.echo())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Tune { model, folds, out, record_timing } => {
            apply_model_args(&mut s, &model)?;
            s.set("folds", folds)?;
            let start = Instant::now();
            let data = load_data(&s)?;
            let method: MethodSpec = s.get("method", MethodSpec::TsSr)?;
            let s_values: Vec<usize> = s.list("s", None)?.ok_or_else(|| Error::InvalidConfig("missing required setting 's'".into()))?;
            let defaults = GridSpec::default();
            let mask = method.mask();
            let lambdas = if mask.lambda { s.list("lambda", Some(defaults.lambda_values.clone()))?.unwrap_or_default() } else { vec![0.0] };
            let alphas = if mask.alpha { s.list("alpha", Some(defaults.alpha_values.clone()))?.unwrap_or_default() } else { vec![0.0] };
            let (deltas, standardized) = if !mask.delta {
                (vec![0.0], false)
            } else if let Some(ds) = s.list::<f64>("delta_star", None)? {
                (ds, true)
            } else if let Some(d) = s.list::<f64>("delta", None)? {
                (d, false)
            } else {
                (s.list("delta_star", Some(defaults.delta_values.clone()))?.unwrap_or_default(), true)
            };
            let grid = TuningGrid::new(method, s_values, lambdas, alphas, deltas).standardized(standardized);
            let cfg = tune_config(&s)?;
            let report = tune(&data.problem, &grid, s.get("folds", 10usize)?, s.get("seed", 0u64)?, &cfg)?;
            let elapsed = start.elapsed().as_secs_f64();
            eprintln!("tuning finished in {elapsed:.3} s ({} grid points)", report.points.len());
            ensure_dir(&out)?;
            let (header, rows) = report.to_rows(record_timing);
            write_table(&out.join("cv_report.csv"), &header, &rows)?;
            write_fit_outputs(&out, &data, method, &report.selected, &report.final_fit, record_timing.then_some(elapsed))?;
            write_text(&out.join(CONFIG_ECHO), &s.echo())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { replicates, methods, folds, seed, out, record_timing } => {
            s.set("replicates", replicates)?;
            s.set("methods", methods.as_ref())?;
            s.set("folds", folds)?;
            s.set("seed", seed)?;
            let start = Instant::now();
            let study = study_config(&s)?;
            let n_rep: u64 = s.get("replicates", 1)?;
            let outcomes: Vec<(u64, Result<crate::study::ReplicateOutcome>)> =
                (0..n_rep).into_par_iter().map(|r| (r, run_replicate(&study, r))).collect();
            let elapsed = start.elapsed().as_secs_f64();
            eprintln!("simulation finished in {elapsed:.3} s");
            ensure_dir(&out)?;
            let mut rows = Vec::new();
            let mut seeds = Vec::new();
            let mut failures = Vec::new();
            for (r, res) in &outcomes {
                match res {
                    Ok(o) => {
                        seeds.push(vec![r.to_string(), o.seed.to_string()]);
                        for m in &o.methods {
                            let name = m.method.name().to_string();
                            let mut push = |metric: &str, v: f64| rows.push(vec![r.to_string(), name.clone(), metric.to_string(), fmt17(v)]);
                            for (metric, v) in m.metrics.named() {
                                push(metric, v);
                            }
                            push("selected_s", m.selected.s as f64);
                            push("selected_lambda", m.selected.lambda);
                            push("selected_alpha", m.selected.alpha);
                            push("selected_delta", m.selected.delta);
                        }
                    }
                    Err(e) => {
                        seeds.push(vec![r.to_string(), crate::simgen::replicate_seed(study.sim.seed, *r).to_string()]);
                        failures.push(vec![r.to_string(), e.to_string()]);
                    }
                }
            }
            let h = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            write_table(&out.join("results.csv"), &h(&["replicate", "method", "metric", "value"]), &rows)?;
            write_table(&out.join("seeds.csv"), &h(&["replicate", "seed"]), &seeds)?;
            write_table(&out.join("failures.csv"), &h(&["replicate", "error"]), &failures)?;
            if record_timing {
                write_text(&out.join("timing.txt"), &format!("wall_time_seconds = {elapsed}\n"))?;
            }
            write_text(&out.join(CONFIG_ECHO), &s.echo())?;
            if failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("{} of {n_rep} replicates failed; see failures.csv", failures.len());
                Ok(ExitCode::from(2))
            }
        }
        Command::ExportMip { model, big_m, out } => {
            apply_model_args(&mut s, &model)?;
            s.set("big_m", big_m)?;
            let data = load_data(&s)?;
            let (_, h) = single_hyper(&s, data.problem.k(), data.problem.p())?;
            let m = choose_big_m(&data.problem, &h, s.get_opt("big_m")?);
            let mut text = String::new();
            let summary = export_mip(&data.problem, &h, m, MipMode::of(&h), &mut text)?;
            write_text(&out, &text)?;
            let echo = PathBuf::from(format!("{}.{CONFIG_ECHO}", out.display()));
            write_text(&echo, &s.echo())?;
            println!(
                "{} binaries, {} continuous, {} constraints (M = {})",
                summary.n_binaries,
                summary.n_continuous,
                summary.n_constraints,
                fmt17(m)
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { model, compare, out } => {
            apply_model_args(&mut s, &model)?;
            let data = load_data(&s)?;
            let (method, h) = single_hyper(&s, data.problem.k(), data.problem.p())?;
            let res = solve_exact(&data.problem, &h, &Limits::default())?;
            let mut report = String::new();
            writeln!(report, "supports enumerated: {}", res.supports_enumerated)?;
            writeln!(report, "global objective: {}", fmt17(res.objective))?;
            if res.jitter_used {
                writeln!(report, "note: diagonal jitter was needed for a singular restricted system")?;
            }
            for (k, id) in data.problem.ids().iter().enumerate() {
                let sup: Vec<&str> = res.fit.support(k).iter().map(|&j| data.features[j].as_str()).collect();
                writeln!(report, "support {id}: {{{}}}", sup.join(", "))?;
            }
            if let Some(dir) = &compare {
                let mut other = read_fit(&dir.join("B.csv"), &dir.join("Z.csv"))?;
                other.intercepts = data.problem.centered().intercepts(&other.b);
                other.check_feasible(h.s, h.common_support)?;
                let value = objective(&data.problem, &other, &h)?;
                writeln!(report, "compared objective: {}", fmt17(value))?;
                writeln!(report, "gap: {}", fmt17(value - res.objective))?;
            }
            print!("{report}");
            ensure_dir(&out)?;
            write_fit_outputs(&out, &data, method, &h, &res.fit, None)?;
            write_text(&out.join("oracle.txt"), &report)?;
            write_text(&out.join(CONFIG_ECHO), &s.echo())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn study_config(s: &Settings) -> Result<StudyConfig> {
    let d = SimConfig::default();
    let design = match s.get("design", "main".to_string())?.as_str() {
        "main" => Design::Main,
        "partitioned" => Design::Partitioned,
        "sign_flip" => Design::SignFlip { shared: s.require("shared")? },
        other => return Err(Error::InvalidConfig(format!("unknown design '{other}' (main, partitioned, sign_flip)"))),
    };
    let sim = SimConfig {
        k: s.get("k", d.k)?,
        p: s.get("p", d.p)?,
        n_train: s.get("n_train", d.n_train)?,
        n_test: s.get("n_test", d.n_test)?,
        rho: s.get("rho", d.rho)?,
        s: s.get("s", d.s)?,
        q: s.get("q", d.q)?,
        tau: s.get("tau", d.tau)?,
        sigma2_beta: s.get("sigma2_beta", d.sigma2_beta)?,
        mu_range: (s.get("mu_lo", d.mu_range.0)?, s.get("mu_hi", d.mu_range.1)?),
        mu_override: s.get_opt("mu_override")?,
        share_mu: s.get("share_mu", d.share_mu)?,
        intercept: s.get("intercept", d.intercept)?,
        design,
        common_card: s.get("common_card", d.common_card)?,
        hetero_max: s.get("hetero_max", d.hetero_max)?,
        p_z: s.get("p_z", d.p_z)?,
        seed: s.get("seed", d.seed)?,
    };
    sim.validate()?;
    let methods: Vec<MethodSpec> = s.list("methods", Some(MethodSpec::ALL.to_vec()))?.unwrap_or_default();
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods given".into()));
    }
    let g = GridSpec::default();
    let (delta_values, standardized) = match s.list::<f64>("delta_grid", None)? {
        Some(d) => (d, false),
        None => (s.list("delta_star_grid", Some(g.delta_values.clone()))?.unwrap_or_default(), true),
    };
    let grid = GridSpec {
        s_values: s.list("s_grid", None)?,
        lambda_values: s.list("lambda_grid", Some(g.lambda_values))?.unwrap_or_default(),
        alpha_values: s.list("alpha_grid", Some(g.alpha_values))?.unwrap_or_default(),
        delta_values,
        standardized,
    };
    Ok(StudyConfig { sim, methods, grid, folds: s.get("folds", 10)?, tune: tune_config(s)? })
}
