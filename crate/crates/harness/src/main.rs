use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfsod_core::Stage;
use tfsod_detector::RunConfig;
use tfsod_harness::config::load_config;
use tfsod_harness::experiments::{ablate, experiment_dir, sweep};
use tfsod_harness::pipeline::{
    ensure_dataset, evaluate, load_checkpoint, run_finetune, run_pretrain, write_report, RunPaths,
};
use tfsod_harness::plot::plot_run;
use tfsod_harness::HarnessError;

#[derive(Parser)]
#[command(
    name = "tfsod",
    version,
    about = "Few-shot detection experiments on synthetic shapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set thre_cls=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding datasets and run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and export the dataset.
    GenData(Common),
    /// Train on base categories.
    Pretrain(Common),
    /// Transfer a pretrain checkpoint and train on the k-shot split.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's pretrain checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's finetune checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run full pipelines over values of one config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "thre_cls")]
        key: String,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,0.5,0.75,0.95")]
        values: Vec<String>,
        /// Defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Four-row module ablation with paired data per seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Render telemetry charts as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to the one named by the config.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn setup(c: &Common) -> Result<(RunConfig, RunPaths), HarnessError> {
    let cfg = load_config(c.config.as_deref(), &c.overrides)?;
    let paths = RunPaths::new(&c.runs, &cfg);
    Ok((cfg, paths))
}

fn seeds_or_default(seeds: &[u64], cfg: &RunConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

fn progress(label: &str, seed: u64) {
    eprintln!("running {label} seed {seed}");
}

fn print_report(path: &Path, report: &tfsod_harness::eval::EvalReport) {
    for c in &report.categories {
        println!(
            "{:<16} {:<10} {:>5} gt  AP50 {:5.1}",
            c.name,
            format!("{:?}", c.group),
            c.num_gt,
            100.0 * c.ap50
        );
    }
    println!("bAP50 {:.1}  nAP50 {:.1}", 100.0 * report.bap50, 100.0 * report.nap50);
    println!("{}", path.display());
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, paths) = setup(&c)?;
            ensure_dataset(&paths, &cfg)?;
            println!("{}", paths.data.display());
        }
        Command::Pretrain(c) => {
            let (cfg, paths) = setup(&c)?;
            let data = ensure_dataset(&paths, &cfg)?;
            run_pretrain(&paths, &cfg, &data)?;
            println!("{}", paths.checkpoint(Stage::Pretrain).display());
        }
        Command::Finetune { common, checkpoint } => {
            let (cfg, paths) = setup(&common)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| paths.checkpoint(Stage::Pretrain));
            let pre = load_checkpoint(&ckpt_path)?;
            let data = ensure_dataset(&paths, &cfg)?;
            run_finetune(&paths, &cfg, &data, &pre)?;
            println!("{}", paths.checkpoint(Stage::Finetune).display());
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, paths) = setup(&common)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| paths.checkpoint(Stage::Finetune));
            let ckpt = load_checkpoint(&ckpt_path)?;
            let data = ensure_dataset(&paths, &cfg)?;
            let report = evaluate(&ckpt, &cfg, &data);
            paths.prepare(&cfg)?;
            write_report(&paths, &report)?;
            print_report(&paths.eval_report(), &report);
        }
        Command::Sweep {
            common,
            key,
            values,
            seeds,
        } => {
            let (cfg, _) = setup(&common)?;
            let seeds = seeds_or_default(&seeds, &cfg);
            let table = sweep(&common.runs, &cfg, &key, &values, &seeds, progress)?;
            let dir = experiment_dir(&common.runs, "sweep", &cfg, &format!("{key}{values:?}{seeds:?}"));
            table.save(&dir, "sweep")?;
            print!("{}", table.to_markdown());
            println!("{}", dir.display());
        }
        Command::Ablate { common, seeds } => {
            let (cfg, _) = setup(&common)?;
            let table = ablate(&common.runs, &cfg, &seeds, progress)?;
            let dir = experiment_dir(&common.runs, "ablate", &cfg, &format!("{seeds:?}"));
            table.save(&dir, "ablation")?;
            print!("{}", table.to_markdown());
            println!("{}", dir.display());
        }
        Command::Plot { common, run } => {
            let run_dir = match run {
                Some(r) => r,
                None => setup(&common)?.1.dir,
            };
            for p in plot_run(&run_dir, &run_dir.join("plots"))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
