use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fedq_core::experiments::{run_experiment, ExperimentConfig, ExperimentKind};
use fedq_core::mdp::{build_experiment_mdp, build_hard_mdp, hard_instance_values, solve_q_star};
use fedq_core::{Error, TabularMdp};

/// Federated tabular Q-learning simulator.
#[derive(Parser)]
#[command(name = "fedq", version)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an MDP by value iteration and write q_star.json.
    Solve(SolveArgs),
    /// Error against samples for every configured algorithm.
    Compare(RunArgs),
    /// Sample and communication cost as the number of agents grows.
    Speedup(RunArgs),
    /// Communication cost across discount factors.
    Horizon(RunArgs),
    /// Final error of sparse and dense averaging schedules across agent counts.
    Lowerbound(RunArgs),
    /// Per-epoch or per-checkpoint trace of single runs.
    Single(RunArgs),
    /// Print the default configuration of a study.
    Defaults { kind: Kind },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Compare,
    Speedup,
    Horizon,
    Lowerbound,
    Single,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Compare => ExperimentKind::Compare,
            Kind::Speedup => ExperimentKind::Speedup,
            Kind::Horizon => ExperimentKind::Horizon,
            Kind::Lowerbound => ExperimentKind::Lowerbound,
            Kind::Single => ExperimentKind::Single,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; the study's default configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "FEDQ_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Master seed; replicate i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_seeds: Option<usize>,
}

#[derive(Args)]
struct SolveArgs {
    /// JSON MDP file.
    #[arg(long, conflicts_with_all = ["hard", "experiment"])]
    mdp: Option<PathBuf>,
    /// Builtin four-state hard instance with this discount.
    #[arg(long, value_name = "GAMMA", conflicts_with = "experiment")]
    hard: Option<f64>,
    /// Builtin three-state instance with this discount.
    #[arg(long, value_name = "GAMMA")]
    experiment: Option<f64>,
    /// Self-loop probability of the three-state instance.
    #[arg(long, requires = "experiment")]
    p: Option<f64>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, env = "FEDQ_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct SolveOutput {
    gamma: f64,
    num_states: usize,
    num_actions: usize,
    tolerance: f64,
    iterations: usize,
    residual: f64,
    q_star: Vec<Vec<f64>>,
    v_star: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_v_star: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_max_error: Option<f64>,
}

fn solve(args: &SolveArgs) -> Result<(), Error> {
    let (mdp, closed_form): (TabularMdp, _) = match (&args.mdp, args.hard, args.experiment) {
        (Some(path), _, _) => (TabularMdp::from_json_file(path)?, None),
        (None, Some(g), _) => (build_hard_mdp(g, 1, 2)?.mdp, Some(hard_instance_values(g))),
        (None, None, Some(g)) => {
            let p = match args.p {
                Some(p) => p,
                None => fedq_core::mdp::hard_instance_p(g),
            };
            (build_experiment_mdp(g, p)?, None)
        }
        (None, None, None) => {
            return Err(Error::Config("solve: one of --mdp, --hard, --experiment is required".into()))
        }
    };
    let report = solve_q_star(&mdp, args.tol)?;
    let closed_form_max_error = closed_form.map(|cf: [f64; 4]| {
        cf.iter()
            .zip(&report.v_star)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    });
    let out = SolveOutput {
        gamma: mdp.gamma(),
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        tolerance: args.tol,
        iterations: report.iterations,
        residual: report.residual,
        q_star: (0..mdp.num_states()).map(|s| report.q_star.row(s).to_vec()).collect(),
        v_star: report.v_star.clone(),
        closed_form_v_star: closed_form,
        closed_form_max_error,
    };
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("q_star.json");
    std::fs::write(&path, serde_json::to_string_pretty(&out)? + "\n")?;
    println!("v_star = {:?}", report.v_star);
    if let Some(e) = closed_form_max_error {
        println!("max |V* - closed form| = {e:e}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default_for(kind),
    };
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "kind: the config describes `{}` but `{}` was requested",
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
        cfg.seeds = None;
    }
    if let Some(n) = args.num_seeds {
        cfg.num_seeds = n;
        cfg.seeds = None;
    }
    for path in run_experiment(&cfg, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Solve(a) => solve(a),
        Command::Compare(a) => run(ExperimentKind::Compare, a),
        Command::Speedup(a) => run(ExperimentKind::Speedup, a),
        Command::Horizon(a) => run(ExperimentKind::Horizon, a),
        Command::Lowerbound(a) => run(ExperimentKind::Lowerbound, a),
        Command::Single(a) => run(ExperimentKind::Single, a),
        Command::Defaults { kind } => {
            let cfg = ExperimentConfig::default_for((*kind).into());
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_out_of_bound() {
        3
    } else if err.is_validation() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
