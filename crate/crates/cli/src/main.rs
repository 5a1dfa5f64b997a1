use std::path::PathBuf;
use std::process::ExitCode;

use bsde_core::condexp::RegressionBasis;
use bsde_core::experiment::{init_threads_from_env, run_experiment, sweep, ExperimentConfig, ProblemChoice};
use bsde_core::problem_model::{builtin_problem, builtin_problems};
use bsde_core::scheme::{residual_bsde, run_scheme};
use bsde_core::stochastic_basis::TreeModel;
use bsde_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bsde-lab", version, about = "Delayed-control BSDE scheme and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scheme for one delay.
    Run(RunArgs),
    /// Run a delay list on one shared ensemble.
    Sweep(RunArgs),
    /// Builtin problems.
    Problems {
        #[command(subcommand)]
        action: ProblemsAction,
    },
    /// Exact run on a Bernoulli tree, checking the residual identity.
    Oracle {
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = 1)]
        delay: usize,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
    },
}

#[derive(Subcommand)]
enum ProblemsAction {
    List,
}

/// Flags override the config key of the same name.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    delays: Option<Vec<usize>>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    diagnostics: Option<Vec<String>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::from_file(&self.config)?;
        c.apply_env();
        if let Some(v) = &self.problem {
            c.problem = ProblemChoice::Named(v.clone());
        }
        if let Some(v) = self.horizon {
            c.horizon = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.delay {
            c.delay = Some(v);
        }
        if let Some(v) = &self.delays {
            c.delays = Some(v.clone());
        }
        if let Some(v) = self.paths {
            c.paths = Some(v);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.basis {
            c.basis = v.clone();
        }
        if let Some(v) = self.ridge {
            c.ridge = v;
        }
        if let Some(v) = &self.diagnostics {
            c.diagnostics = v.clone();
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.q {
            c.q = v;
        }
        if let Some(v) = self.lambda2 {
            c.lambda2 = Some(v);
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    init_threads_from_env()?;
    match cli.command {
        Command::Run(args) => {
            let config = args.load()?;
            let manifest = run_experiment(&config)?;
            println!("wrote {} files to {}", manifest.files.len() + 1, config.output_dir.display());
            let csv = std::fs::read_to_string(config.output_dir.join("report.csv"))?;
            let failed = csv.lines().filter(|l| l.ends_with(",fail")).count();
            println!("{failed} failing statistics, config hash {}", manifest.config_hash);
        }
        Command::Sweep(args) => {
            let config = args.load()?;
            let res = sweep(&config)?;
            println!(
                "wrote {} files to {} for delays {:?}",
                res.manifest.files.len() + 1,
                config.output_dir.display(),
                res.outputs.iter().map(|o| o.delay()).collect::<Vec<_>>()
            );
            println!("{} failing statistics", res.report.failures().count());
        }
        Command::Problems { action: ProblemsAction::List } => {
            for p in builtin_problems() {
                println!(
                    "{:<4} d={} m={} K={:.4} {}",
                    p.name(),
                    p.dim_y(),
                    p.dim_w(),
                    p.generator().growth_k(),
                    p.description()
                );
            }
        }
        Command::Oracle {
            depth,
            problem,
            delay,
            horizon,
        } => {
            let problem = builtin_problem(&problem)?;
            let tree = TreeModel::new(depth, horizon)?;
            if problem.dim_w() != 1 {
                return Err(Error::config(
                    "problem",
                    format!("the tree is scalar, {} needs m = {}", problem.name(), problem.dim_w()),
                ));
            }
            let ens = tree.ensemble();
            let out = run_scheme(&problem, &ens, delay, &RegressionBasis::indicator())?;
            let res = residual_bsde(&out, &problem, &ens)?;
            println!("problem {} depth {depth} delay {delay}", problem.name());
            println!("Y_0 = {:.12e}", out.y_at(0, 0)[0]);
            println!("max residual = {:.3e}", res.max_abs);
            if res.max_abs > 1e-10 {
                return Err(Error::Numerical(format!(
                    "tree residual {:.3e} exceeds 1e-10",
                    res.max_abs
                )));
            }
        }
    }
    Ok(())
}
