use std::path::PathBuf;
use std::process::ExitCode;

use opeval_cli::config::ExperimentConfig;
use opeval_cli::runner::{
    export_weights, run_evaluation, run_openworld_heatmap, run_policy_iteration, selftest, PiValueSource,
};

const USAGE: &str = "\
opeval — tabular off-policy evaluation experiments

USAGE:
    opeval <SUBCOMMAND> [--config PATH] [--seed N] [--out DIR]

SUBCOMMANDS:
    eval        relative-error evaluation experiment (writes eval.csv)
    openworld   open-world value heatmaps (writes heatmap_*_iter*.csv)
    pi          policy iteration on the open world (writes pi.csv)
    weights     export TD-weight grids (writes weights_s*_a*.csv)
    selftest    run built-in consistency checks

FLAGS:
    --config PATH   configuration file (flat `key = value` lines)
    --seed N        master seed (default 0)
    --out DIR       output directory (overrides the config's `out`)
";

struct Args {
    subcommand: String,
    config_path: Option<PathBuf>,
    seed: u64,
    out_dir: Option<String>,
}

fn parse_args() -> Result<Args, String> {
    let mut argv = std::env::args().skip(1);
    let subcommand = argv.next().ok_or("missing subcommand")?;
    let mut args = Args { subcommand, config_path: None, seed: 0, out_dir: None };
    while let Some(flag) = argv.next() {
        match flag.as_str() {
            "--config" => {
                let value = argv.next().ok_or("--config needs a path")?;
                args.config_path = Some(PathBuf::from(value));
            }
            "--seed" => {
                let value = argv.next().ok_or("--seed needs a number")?;
                args.seed = value.parse().map_err(|e| format!("--seed: {e}"))?;
            }
            "--out" => {
                let value = argv.next().ok_or("--out needs a directory")?;
                args.out_dir = Some(value);
            }
            other => return Err(format!("unknown flag {other:?}")),
        }
    }
    Ok(args)
}

fn load_config(args: &Args) -> Result<ExperimentConfig, String> {
    let mut config = match &args.config_path {
        Some(path) => ExperimentConfig::from_file(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &args.out_dir {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn run() -> Result<(), String> {
    let args = parse_args()?;
    match args.subcommand.as_str() {
        "eval" => {
            let config = load_config(&args)?;
            let series = run_evaluation(&config, args.seed).map_err(|e| e.to_string())?;
            println!(
                "eval: {} iterations x {} seeds, final mean error {:.6}, wrote {}/eval.csv",
                config.n_iterations,
                config.n_seeds,
                series.final_mean(),
                config.out_dir
            );
            Ok(())
        }
        "openworld" => {
            let config = load_config(&args)?;
            let grids = run_openworld_heatmap(&config, args.seed).map_err(|e| e.to_string())?;
            println!(
                "openworld: wrote {} heatmaps for operator {} into {}",
                grids.len(),
                config.operator,
                config.out_dir
            );
            Ok(())
        }
        "pi" => {
            let config = load_config(&args)?;
            let series = run_policy_iteration(&config, args.seed, PiValueSource::Operator)
                .map_err(|e| e.to_string())?;
            println!(
                "pi: {} steps x {} seeds, final mean return {:.6}, wrote {}/pi.csv",
                config.pi_steps,
                config.n_seeds,
                series.final_mean(),
                config.out_dir
            );
            Ok(())
        }
        "weights" => {
            let config = load_config(&args)?;
            export_weights(&config, args.seed).map_err(|e| e.to_string())?;
            println!("weights: exported {} grids into {}", config.weight_starts.len(), config.out_dir);
            Ok(())
        }
        "selftest" => selftest().map_err(|e| e.to_string()),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(format!("unknown subcommand {other:?}\n\n{USAGE}")),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
