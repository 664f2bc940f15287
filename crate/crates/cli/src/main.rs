use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stencilreg::experiment::{exit_code, Experiment, REPRO_CASES};
use stencilreg::io::SummaryRow;
use stencilreg::{par, Error, Result};

#[derive(Parser)]
#[command(name = "stencilreg", version, about = "Learn stable finite-difference stencils from snapshot data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference system and write training snapshots.
    Generate(Common),
    /// Fit every configured run and write the learned operators.
    Learn(Common),
    /// Spectra and Gershgorin discs of the learned operators.
    Analyze(Common),
    /// Roll the learned models forward and score them against the reference.
    Forecast(Common),
    /// Summary, stencil and error tables plus the artifact manifest.
    Report(Common),
    /// All stages in order.
    Run(Common),
    /// Rerun one of the bundled experiments.
    Repro {
        /// One of: diffusion, advection, advection-diffusion, burgers, advection2d.
        name: String,
        #[command(flatten)]
        opts: Options,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    opts: Options,
}

#[derive(Args)]
struct Options {
    /// Artifact directory; defaults to `out/<case>`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 keeps the default pool.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn open(config: Option<&Path>, name: Option<&str>, opts: &Options) -> Result<Experiment> {
    if opts.threads > 0 {
        par::set_threads(opts.threads);
    }
    let case = |n: &str| opts.out.clone().unwrap_or_else(|| Path::new("out").join(n));
    let exp = match (config, name) {
        (Some(path), _) => {
            let exp = Experiment::load(path, "")?;
            let out = case(&exp.config.case);
            Experiment { out, ..exp }
        }
        (None, Some(name)) => Experiment::repro(name, case(name))?,
        (None, None) => unreachable!("clap requires a config or a name"),
    };
    match opts.seed {
        Some(seed) => exp.with_seed(seed),
        None => Ok(exp),
    }
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<8} {:<9} {:>20} {:>14} {:>8} {:>7}", "method", "sizes", "beta", "eps_xt", "blowup", "stable");
    for r in rows {
        let sizes = match r.s2 {
            Some(s2) => format!("{},{}", r.s1, s2),
            None => r.s1.to_string(),
        };
        let blowup = r.blowup_step.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{:<8} {:<9} {:>20} {:>14.6e} {:>8} {:>7}",
            r.method.name(),
            sizes,
            format!("{}/{}", r.beta1, r.beta2),
            r.eps_xt,
            blowup,
            r.stable
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Repro { name, opts } => {
            if !REPRO_CASES.contains(&name.as_str()) {
                return Err(Error::Config {
                    field: "name".into(),
                    message: format!("unknown experiment `{name}`; expected one of {}", REPRO_CASES.join(", ")),
                });
            }
            let exp = open(None, Some(&name), &opts)?;
            print_summary(&exp.run()?);
            eprintln!("artifacts in {}", exp.out.display());
        }
        Command::Generate(c) => {
            let exp = open(Some(&c.config), None, &c.opts)?;
            let snap = exp.generate()?;
            eprintln!("{} snapshots of {} dofs in {}", snap.n_times(), snap.n_dofs(), exp.out.display());
        }
        Command::Learn(c) => {
            let exp = open(Some(&c.config), None, &c.opts)?;
            let models = exp.learn(&exp.training()?)?;
            eprintln!("{} models in {}", models.len(), exp.out.join("models").display());
        }
        Command::Analyze(c) => {
            let exp = open(Some(&c.config), None, &c.opts)?;
            let models = exp.load_models()?;
            let runs = exp.analyze(&models)?;
            let stable = runs.iter().filter(|a| a.stable).count();
            eprintln!("{stable} of {} operators stable", runs.len());
        }
        Command::Forecast(c) => {
            let exp = open(Some(&c.config), None, &c.opts)?;
            let models = exp.load_models()?;
            let reports = exp.forecast(&exp.training()?, &models)?;
            let blown = reports.iter().filter(|r| r.blowup_step.is_some()).count();
            eprintln!("{} forecasts, {blown} blew up", reports.len());
        }
        Command::Report(c) => {
            let exp = open(Some(&c.config), None, &c.opts)?;
            print_summary(&exp.report()?);
        }
        Command::Run(c) => {
            let exp = open(Some(&c.config), None, &c.opts)?;
            print_summary(&exp.run()?);
            eprintln!("artifacts in {}", exp.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
