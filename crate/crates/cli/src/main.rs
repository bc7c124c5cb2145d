use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stochctl::budget::{set_limits, Limits};
use stochctl::Execution;

mod commands;
mod config;
mod corpus;
mod error;
mod report;

use commands::Outcome;
use config::{Loaded, RunConfig};
use error::CliError;
use report::{header, OutDir, Report};

#[derive(Parser)]
#[command(
    name = "stochctl",
    version,
    about = "Observability, null control and stabilization of linear SDE control systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Execution policy for the data-parallel loops.
    #[arg(long, global = true, value_enum, default_value_t = ExecArg::Parallel)]
    exec: ExecArg,

    /// Cap on tree leaves (overrides the config).
    #[arg(long, global = true, env = "STOCHCTL_MAX_LEAVES")]
    max_leaves: Option<usize>,

    /// Cap on the dimension of dense observability forms.
    #[arg(long, global = true, env = "STOCHCTL_MAX_FORM_DIM")]
    max_form_dim: Option<usize>,

    /// Cap on paths x intervals x steps for the Monte Carlo stabilizer.
    #[arg(long, global = true, env = "STOCHCTL_MAX_PATH_STEPS")]
    max_path_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config, then `stochctl-out`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a config.
    Validate(RunArgs),
    /// Open-loop mean-square stability, growth constants and gain search.
    Stability(RunArgs),
    /// Solve the stochastic algebraic Riccati equation.
    Riccati(RunArgs),
    /// Optimal δ-observability constant.
    Observe(RunArgs),
    /// Compare observability constants across tree drivers and depths.
    Invariance(RunArgs),
    /// Gramian-based null control from the config's x0.
    Synthesize(RunArgs),
    /// Check both directions of the observability / null-control equivalence.
    Theorem51(RunArgs),
    /// Monte Carlo run of the piecewise null-control stabilizer.
    Stabilize(RunArgs),
    /// Riccati, feedback, observability and null-control verdicts side by side.
    Equivalence(RunArgs),
    /// Write the bundled example configs.
    EmitCorpus {
        #[arg(long, short, default_value = "corpus")]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Stability(_) => "stability",
            Command::Riccati(_) => "riccati",
            Command::Observe(_) => "observe",
            Command::Invariance(_) => "invariance",
            Command::Synthesize(_) => "synthesize",
            Command::Theorem51(_) => "theorem51",
            Command::Stabilize(_) => "stabilize",
            Command::Equivalence(_) => "equivalence",
            Command::EmitCorpus { .. } => "emit-corpus",
        }
    }
}

struct Ctx {
    command: &'static str,
    loaded: Loaded,
    exec: Execution,
    out: OutDir,
}

impl Ctx {
    fn finish<T: Serialize>(&self, outcome: Outcome<T>) -> Result<(), CliError> {
        let report = Report {
            header: header(
                self.command,
                &self.loaded.bytes,
                self.loaded.config.seed,
                self.exec,
            ),
            verdict: outcome.verdict.clone(),
            result: outcome.result,
        };
        let path = self
            .out
            .write_json(&format!("{}.json", self.command), &report)?;
        println!("{}: {} [{}]", self.command, outcome.verdict, path.display());
        Ok(())
    }
}

fn out_dir(args: &RunArgs, cfg: &RunConfig) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    match &cfg.output_dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => args.config.parent().unwrap_or(Path::new(".")).join(d),
        None => PathBuf::from("stochctl-out"),
    }
}

fn limits(cli: &Cli, cfg: &RunConfig) -> Limits {
    let mut l = cfg.limits();
    if let Some(v) = cli.max_leaves {
        l.max_leaves = v;
    }
    if let Some(v) = cli.max_form_dim {
        l.max_form_dim = v;
    }
    if let Some(v) = cli.max_path_steps {
        l.max_path_steps = v;
    }
    l
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exec = match cli.exec {
        ExecArg::Sequential => Execution::Sequential,
        ExecArg::Parallel => Execution::Parallel,
    };
    let args = match &cli.command {
        Command::EmitCorpus { out } => {
            let files = corpus::emit(out)?;
            println!(
                "emit-corpus: wrote {} configs to {}",
                files.len(),
                out.display()
            );
            return Ok(());
        }
        Command::Validate(a)
        | Command::Stability(a)
        | Command::Riccati(a)
        | Command::Observe(a)
        | Command::Invariance(a)
        | Command::Synthesize(a)
        | Command::Theorem51(a)
        | Command::Stabilize(a)
        | Command::Equivalence(a) => a,
    };
    let loaded = config::load(&args.config)?;
    set_limits(limits(&cli, &loaded.config));
    let out = OutDir::prepare(&out_dir(args, &loaded.config))?;
    let ctx = Ctx {
        command: cli.command.name(),
        loaded,
        exec,
        out,
    };
    let cfg = &ctx.loaded.config;
    match &cli.command {
        Command::Validate(_) => ctx.finish(commands::validate(cfg)?),
        Command::Stability(_) => ctx.finish(commands::stability(cfg, exec)?),
        Command::Riccati(_) => ctx.finish(commands::riccati(cfg, exec, &ctx.out)?),
        Command::Observe(_) => ctx.finish(commands::observe(cfg, exec)?),
        Command::Invariance(_) => ctx.finish(commands::invariance(cfg, exec, &ctx.out)?),
        Command::Synthesize(_) => ctx.finish(commands::synthesize(cfg, exec, &ctx.out)?),
        Command::Theorem51(_) => ctx.finish(commands::theorem51(cfg, exec)?),
        Command::Stabilize(_) => ctx.finish(commands::stabilize(cfg, exec, &ctx.out)?),
        Command::Equivalence(_) => ctx.finish(commands::equivalence(cfg, exec)?),
        Command::EmitCorpus { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stochctl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
