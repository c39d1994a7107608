use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpnas::search::Branch;
use lpnas_cli::config::{parse_assignment, resolve, RunConfig};
use lpnas_cli::{commands, report, CliError};

#[derive(Parser)]
#[command(name = "lpnas", version, about = "Hardware-aware architecture search with FP16-aware training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that reads a run configuration.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, e.g. --set p_mut=0.2 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    sets: Vec<(String, String)>,
    #[arg(long)]
    seed: Option<u64>,
    /// 16, 32 or 64
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    e_fp32: Option<usize>,
    #[arg(long)]
    e_lp: Option<usize>,
    /// Device profile file (key=value)
    #[arg(long)]
    profile: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
        let mut flags: Vec<(String, String)> = Vec::new();
        let named = [
            ("profile", self.profile.as_ref().map(|p| p.display().to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("image_size", self.image_size.map(|v| v.to_string())),
            ("n_train", self.n_train.map(|v| v.to_string())),
            ("n_eval", self.n_eval.map(|v| v.to_string())),
            ("generations", self.generations.map(|v| v.to_string())),
            ("population_size", self.population.map(|v| v.to_string())),
            ("e_fp32", self.e_fp32.map(|v| v.to_string())),
            ("e_lp", self.e_lp.map(|v| v.to_string())),
        ];
        for (k, v) in named.iter().chain(extra) {
            if let Some(v) = v {
                flags.push((k.to_string(), v.clone()));
            }
        }
        flags.extend(self.sets.iter().cloned());
        resolve(self.config.as_deref(), &flags)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/ and eval/ directories)
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evolutionary search for one or both branches
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory from gen-data; generated in memory if absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// ptq, aligned or both
        #[arg(long)]
        branch: Option<String>,
    },
    /// Train a single genotype and print its metrics
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        genotype: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also run FP16-aware fine-tuning
        #[arg(long)]
        finetune: bool,
        /// Where to save the trained weights
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint in FP32 and on the simulated device
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write CSV summaries and SVG plots for finished runs
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the genotype of a checkpoint or of a run's best candidate
    ExportGenotype {
        path: PathBuf,
        #[arg(long)]
        branch: Option<String>,
    },
}

fn branch_arg(s: Option<&str>) -> Result<Option<Branch>, CliError> {
    s.map(|s| Branch::parse(s).ok_or_else(|| CliError::Usage(format!("unknown branch {s:?} (ptq|aligned)"))))
        .transpose()
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.resolve(&[])?, &out),
        Command::Search {
            cfg,
            data,
            out,
            branch,
        } => {
            let cfg = cfg.resolve(&[("branch", branch)])?;
            commands::search(&cfg, data.as_deref(), &out, None)
        }
        Command::Train {
            cfg,
            genotype,
            data,
            finetune,
            checkpoint,
        } => commands::train(&cfg.resolve(&[])?, &genotype, data.as_deref(), finetune, checkpoint.as_deref()),
        Command::Eval { cfg, checkpoint, data } => commands::eval(&cfg.resolve(&[])?, &checkpoint, data.as_deref()),
        Command::Report { runs, out } => Ok(report::write_report(&runs, &out)?
            .iter()
            .map(|p| format!("wrote {}", p.display()))
            .collect()),
        Command::ExportGenotype { path, branch } => {
            Ok(vec![commands::export_genotype(&path, branch_arg(branch.as_deref())?)?])
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
