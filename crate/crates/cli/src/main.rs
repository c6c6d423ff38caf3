//! `hbf`: dataset generation, training, evaluation, baselines and gradient
//! checks from the command line.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 numerical
//! divergence (including a failed gradient check).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hbf_core::bench::{run_ghbf_marg, run_ghbf_perf, run_learned, write_reports_csv, EvalReport, Greedy};
use hbf_core::error::Error;
use hbf_core::gradcheck::implicit_suite;
use hbf_core::scenario::dataset::{self, Dataset};
use hbf_core::scenario::GenConfig;
use hbf_core::solver::SolverConfig;
use hbf_core::training::{
    load_model, save_model, train_fold, write_history_csv, CheckpointHeader, RunConfig, BLOB_LAYOUT,
};
use hbf_core::unrolled::Variant;

#[derive(Parser, Debug)]
#[command(name = "hbf", version, about = "Outage-constrained hybrid beamforming toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a feasibility-filtered dataset.
    Gen(GenArgs),
    /// Train an unrolled model on one fold.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint.
    Eval(EvalArgs),
    /// Run the greedy baselines.
    Bench(BenchArgs),
    /// Check the implicit gradient against finite differences.
    Gradcheck(GradArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Generator configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Overrides the seed of the run configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training history CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Model variant: gcn, fcn, fdbf or two_gcn.
    #[arg(long)]
    method: Option<Variant>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only this held-out fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Run configuration supplying the fold count.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Expected variant; an error if the checkpoint differs.
    #[arg(long)]
    method: Option<Variant>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// ghbf_perf, ghbf_marg or all.
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long)]
    fold: Option<usize>,
    /// Run configuration supplying RF chains, outage level and fold count.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Margin bisection tolerance on the outage fraction.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Number of instances.
    #[arg(long, default_value_t = 20)]
    count: usize,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence(_) | Error::Numerical(_) => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    Ok(dataset::load(dir)?)
}

/// The held-out part of `fold`, or everything.
fn held_out(ds: &Dataset, folds: usize, fold: Option<usize>) -> CliResult<(Dataset, usize)> {
    match fold {
        Some(k) => Ok((ds.subset(&ds.fold_indices(folds, k)?.1), k)),
        None => Ok((ds.clone(), 0)),
    }
}

fn emit(reports: &[EvalReport], csv: Option<&Path>) -> CliResult<()> {
    for r in reports {
        print!("{}", r.csv_rows());
    }
    if let Some(path) = csv {
        write_reports_csv(path, reports)?;
    }
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let cfg: GenConfig = read_json(a.config.as_deref())?;
    cfg.validate()?;
    let ds = dataset::generate(&cfg, a.seed, &SolverConfig::default())?;
    dataset::save(&ds, &a.out)?;
    println!(
        "wrote {} instances to {} (rejection rate {:.2}%)",
        ds.len(),
        a.out.display(),
        100.0 * ds.rejection_rate()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg: RunConfig = read_json(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(v) = a.method {
        cfg.model.variant = v;
    }
    let ds = load_data(&a.data)?;
    if cfg.model.variant == Variant::Fdbf {
        cfg.model.rf_chains = ds.config.antennas();
    }
    cfg.validate()?;
    let out = train_fold(&ds, a.fold, &cfg)?;
    let header = CheckpointHeader {
        model: cfg.model.clone(),
        antennas: ds.config.antennas(),
        users: ds.config.users,
        seed: cfg.seed,
        fold: Some(a.fold),
        best_step: out.best_step,
        best_jcm: out.best_jcm,
        layout: BLOB_LAYOUT.into(),
    };
    save_model(&a.out, &out.best, &header)?;
    if let Some(csv) = &a.csv {
        write_history_csv(csv, &out.history)?;
    }
    let mut run_json = a.out.clone().into_os_string();
    run_json.push(".run.json");
    std::fs::write(&run_json, serde_json::to_string_pretty(&cfg).expect("config serializes"))
        .map_err(|e| Failure::Config(e.to_string()))?;
    println!(
        "trained {} steps; best J_cm {} at step {}; checkpoint {}",
        out.state.step,
        out.best_jcm.map_or_else(|| "n/a".into(), |j| format!("{j:.4}")),
        out.best_step,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let run: RunConfig = read_json(a.config.as_deref())?;
    let (header, model) = load_model(&a.model)?;
    if let Some(v) = a.method {
        if v != header.model.variant {
            return Err(Failure::Config(format!(
                "checkpoint holds a {} model, not {}",
                header.model.variant.name(),
                v.name()
            )));
        }
    }
    let ds = load_data(&a.data)?;
    if header.antennas != ds.config.antennas() || header.users != ds.config.users {
        return Err(Failure::Config("checkpoint and dataset dimensions differ".into()));
    }
    let (test, fold) = held_out(&ds, run.folds, a.fold)?;
    let report = run_learned(&model, &test.instances, &ds.codebook(), fold)?;
    emit(&[report], a.csv.as_deref())
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let run: RunConfig = read_json(a.config.as_deref())?;
    let (perf, marg) = match a.method.as_str() {
        "ghbf_perf" => (true, false),
        "ghbf_marg" => (false, true),
        "all" => (true, true),
        m => return Err(Failure::Config(format!("unknown benchmark method '{m}'"))),
    };
    if !(a.tol > 0.0) {
        return Err(Failure::Config("--tol must be positive".into()));
    }
    let ds = load_data(&a.data)?;
    let (test, fold) = held_out(&ds, run.folds, a.fold)?;
    let codebook = ds.codebook();
    let m_rf = run.model.rf_chains;
    let g = Greedy { rf_chains: m_rf, steps: 2 * m_rf, solver: run.model.solver };
    let mut reports = Vec::new();
    if perf {
        reports.push(run_ghbf_perf(&test.instances, &codebook, &g, fold)?);
    }
    if marg {
        let res = run_ghbf_marg(&test.instances, &test.instances, &codebook, &g, run.p_out, a.tol, 20.0, fold)?;
        eprintln!(
            "margin {:.4} dB, validation outage {:.3}% after {} evaluations{}",
            res.margin_db,
            res.val_outage_pct,
            res.evaluations,
            if res.converged { "" } else { " (not within tolerance)" }
        );
        reports.push(res.report);
    }
    emit(&reports, a.csv.as_deref())
}

fn cmd_gradcheck(a: &GradArgs) -> CliResult<()> {
    let report = implicit_suite(a.seed, a.count);
    let max = report.max_rel_err();
    println!(
        "checked {} instances ({} skipped), max rel. err {max:.3e}, tolerance {:.1e}",
        report.errors.len(),
        report.skipped,
        a.tol
    );
    if report.errors.len() < a.count {
        return Err(Failure::Numerical("too few feasible instances".into()));
    }
    if !(max < a.tol) {
        return Err(Failure::Numerical(format!("max rel. err {max:.3e} exceeds {:.1e}", a.tol)));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    log::debug!("{cli:?}");
    let result = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
