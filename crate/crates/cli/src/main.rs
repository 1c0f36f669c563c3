use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

mod commands;
mod config;
mod svg;

use config::{Flags, MethodChoice, ResidualChoice, Scenario, TargetChoice};

/// Causal variance decomposition for outcomes clustered in surgeons within hospitals.
#[derive(Debug, Parser)]
#[command(name = "vardecomp", version)]
struct Cli {
    /// Worker threads (default: all available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a population and its true components.
    Simulate(SimulateArgs),
    /// Fit the models to a dataset and decompose its outcome variance.
    Decompose(DecomposeArgs),
    /// Run the replication grid and draw the summary figures.
    Replicate(ReplicateArgs),
    /// Compare the estimator with exact enumeration on discrete instances.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML (or `.json`) config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Random seed (falls back to VARDECOMP_SEED, then 1).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    /// Hospitals.
    #[arg(long)]
    m: Option<usize>,
    /// Surgeons in total, split evenly over hospitals.
    #[arg(long)]
    q: Option<usize>,
    /// Binary outcome through the logit link.
    #[arg(long, conflicts_with = "continuous")]
    binary: bool,
    /// Continuous outcome with logistic noise on the identity scale.
    #[arg(long)]
    continuous: bool,
    #[arg(long)]
    effect_sd_hospital: Option<f64>,
    #[arg(long)]
    effect_sd_surgeon: Option<f64>,
    #[arg(long)]
    assign_intercept_sd: Option<f64>,
    #[arg(long)]
    assign_coef_sd: Option<f64>,
    /// Monte Carlo sample size for the true components (0 skips them).
    #[arg(long)]
    n_mc: Option<usize>,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV with header `id,hospital,surgeon,y,x1,...`.
    #[arg(long)]
    data: Option<String>,
    /// Decomposition to run; repeat for several.
    #[arg(long = "method", value_enum)]
    methods: Vec<MethodChoice>,
    /// Target assignment for `--method hypothetical`.
    #[arg(long, value_enum)]
    target: Option<TargetChoice>,
    /// Residual estimator for the model-based and three-way decompositions.
    #[arg(long, value_enum)]
    residual: Option<ResidualChoice>,
    /// Fit the assignment as hospital then surgeon-within-hospital.
    #[arg(long)]
    nested_assignment: bool,
    /// REML for continuous outcomes.
    #[arg(long)]
    reml: bool,
    /// Posterior draws for component intervals (0 skips them).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Ridge penalty for the assignment model.
    #[arg(long)]
    ridge: Option<f64>,
    /// Treat the outcome as binary (default: inferred).
    #[arg(long, conflicts_with = "continuous")]
    binary: bool,
    #[arg(long)]
    continuous: bool,
}

#[derive(Debug, Args)]
struct ReplicateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    replications: Option<usize>,
    /// Scenario `n,m,q`; repeat for several.
    #[arg(long = "scenario", value_parser = parse_scenario)]
    scenarios: Vec<Scenario>,
    /// four_way, three_way or semi_parametric; repeat for several.
    #[arg(long = "estimator")]
    estimators: Vec<String>,
    /// fixed (one mechanism for all replicates) or redraw.
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    nested_assignment: bool,
    #[arg(long, conflicts_with = "continuous")]
    binary: bool,
    #[arg(long)]
    continuous: bool,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of instance JSON files (default: bundled fixtures).
    #[arg(long)]
    fixtures: Option<String>,
    #[arg(long)]
    tolerance: Option<f64>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [n, m, q] = parts.as_slice() else {
        return Err(format!("expected n,m,q, got `{s}`"));
    };
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok(Scenario { n: num(n)?, m: num(m)?, q: num(q)? })
}

fn outcome_flag(binary: bool, continuous: bool) -> Option<&'static str> {
    if binary {
        Some("binary")
    } else if continuous {
        Some("continuous")
    } else {
        None
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Simulate(a) => {
            let mut f = Flags::default();
            f.set("seed", a.common.seed)
                .set("n", a.n)
                .set("m", a.m)
                .set("q", a.q)
                .set("outcome", outcome_flag(a.binary, a.continuous))
                .set("effect_sd_hospital", a.effect_sd_hospital)
                .set("effect_sd_surgeon", a.effect_sd_surgeon)
                .set("assign_intercept_sd", a.assign_intercept_sd)
                .set("assign_coef_sd", a.assign_coef_sd)
                .set("n_mc", a.n_mc);
            let cfg = config::resolve(a.common.config.as_deref(), f.0)?;
            commands::simulate(&cfg, &a.common.out)?;
            Ok(0)
        }
        Command::Decompose(a) => {
            let mut f = Flags::default();
            f.set("seed", a.common.seed)
                .set("data", a.data)
                .set("methods", (!a.methods.is_empty()).then_some(a.methods))
                .set("target", a.target)
                .set("residual", a.residual)
                .set("assignment", a.nested_assignment.then_some("nested"))
                .set("reml", a.reml.then_some(true))
                .set("bootstrap", a.bootstrap)
                .set("level", a.level)
                .set("ridge", a.ridge);
            let mut cfg: config::DecomposeConfig = config::resolve(a.common.config.as_deref(), f.0)?;
            if let Some(kind) = outcome_flag(a.binary, a.continuous) {
                cfg.columns.outcome_kind = Some(serde_json::from_value(kind.into())?);
            }
            commands::decompose(&cfg, &a.common.out)?;
            Ok(0)
        }
        Command::Replicate(a) => {
            let mut f = Flags::default();
            f.set("seed", a.common.seed)
                .set("replications", a.replications)
                .set("scenarios", (!a.scenarios.is_empty()).then_some(a.scenarios))
                .set("estimators", (!a.estimators.is_empty()).then_some(a.estimators))
                .set("mechanism", a.mechanism)
                .set("n_mc", a.n_mc)
                .set("assignment", a.nested_assignment.then_some("nested"))
                .set("outcome", outcome_flag(a.binary, a.continuous));
            let cfg = config::resolve(a.common.config.as_deref(), f.0)?;
            commands::replicate(&cfg, &a.common.out)?;
            Ok(0)
        }
        Command::OracleCheck(a) => {
            let mut f = Flags::default();
            f.set("seed", a.common.seed).set("fixtures", a.fixtures).set("tolerance", a.tolerance);
            let cfg = config::resolve(a.common.config.as_deref(), f.0)?;
            let ok = commands::oracle_check(&cfg, &a.common.out)?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}

/// 2 usage or configuration, 3 data, 4 convergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use vardecomp::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Unsupported(_) => 2,
                E::NonConvergence { .. } | E::Separation { .. } | E::TooManyFailures { .. } => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
