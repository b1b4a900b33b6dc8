//! Command-line front end.
//!
//! Usage: `advlab <command> --config <path> [--set section.key=value]... [--out <dir>]`
//!
//! Commands: synth-data, train, attack, eval, gradcam, report, ablation.
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::process::ExitCode;

use advlab_core::config::{parse_config, ExperimentConfig};
use advlab_core::pipeline;

enum CliError {
    Usage(String),
    Runtime(advlab_core::Error),
}

impl From<advlab_core::Error> for CliError {
    fn from(e: advlab_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

const USAGE: &str =
    "usage: advlab <command> --config <path> [--set section.key=value]... [--out <dir>]
commands:
  synth-data   generate the synthetic dataset and export its splits
  train        train the configured method; writes checkpoint + training log
  attack       craft adversarial copies of the test set for every eval attack
  eval         evaluate the trained method on clean and attacked test data
  gradcam      write heatmaps for the first correctly predicted test images
  report       join per-method eval CSVs into one comparison table
  ablation     run the adaptation-only / sync-only / combined arms";

struct Cli {
    command: String,
    config: ExperimentConfig,
}

fn parse_args(args: &[String]) -> Result<Cli, CliError> {
    let usage = |msg: &str| CliError::Usage(format!("{msg}\n{USAGE}"));
    let command = args
        .first()
        .ok_or_else(|| usage("missing command"))?
        .clone();
    let known = [
        "synth-data",
        "train",
        "attack",
        "eval",
        "gradcam",
        "report",
        "ablation",
    ];
    if !known.contains(&command.as_str()) {
        return Err(usage(&format!("unknown command '{command}'")));
    }
    let mut config_path = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                config_path = Some(
                    args.get(i + 1)
                        .ok_or_else(|| usage("--config needs a path"))?
                        .clone(),
                );
                i += 2;
            }
            "--set" => {
                let kv = args
                    .get(i + 1)
                    .ok_or_else(|| usage("--set needs section.key=value"))?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| usage(&format!("--set '{kv}' is not key=value")))?;
                overrides.push((k.trim().to_string(), v.trim().to_string()));
                i += 2;
            }
            "--out" => {
                let dir = args.get(i + 1).ok_or_else(|| usage("--out needs a path"))?;
                overrides.push(("output.dir".to_string(), dir.clone()));
                i += 2;
            }
            other => return Err(usage(&format!("unexpected argument '{other}'"))),
        }
    }
    let path = config_path.ok_or_else(|| usage("--config is required"))?;
    let config = parse_config(std::path::Path::new(&path), &overrides)?;
    Ok(Cli { command, config })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = &cli.config;
    match cli.command.as_str() {
        "synth-data" => {
            for dir in pipeline::cmd_synth_data(cfg)? {
                println!("wrote {}", dir.display());
            }
        }
        "train" => {
            let artifacts = pipeline::cmd_train(cfg)?;
            for r in &artifacts.fit.reports {
                println!(
                    "epoch {:>3}  clean {:.4}  adv {:.4}  sync {:.4}  fragile {:.3}  val_gacc {:.4}  {:.2}s",
                    r.epoch, r.clean_loss, r.adv_loss, r.sync_loss, r.fragile_frac, r.val_gacc, r.seconds
                );
            }
            if artifacts.fit.stopped_early {
                println!(
                    "early stop: best epoch {} by validation accuracy",
                    artifacts.fit.best_epoch
                );
            }
            println!("wrote {}", artifacts.checkpoint.display());
            println!("wrote {}", artifacts.log.display());
        }
        "attack" => {
            for p in pipeline::cmd_attack(cfg)? {
                println!("wrote {}", p.display());
            }
        }
        "eval" => {
            let reports = pipeline::cmd_eval(cfg)?;
            for r in &reports {
                println!(
                    "{} vs {}: gacc {:.4} racc {:.4} map {:.4} marp {:.4}",
                    r.method, r.attack, r.gacc, r.racc, r.map, r.marp
                );
            }
            println!(
                "wrote {}",
                pipeline::eval_csv_path(cfg, cfg.train.method).display()
            );
        }
        "gradcam" => {
            for p in pipeline::cmd_gradcam(cfg)? {
                println!("wrote {}", p.display());
            }
        }
        "report" => {
            let path = pipeline::cmd_report(cfg)?;
            println!("wrote {}", path.display());
        }
        "ablation" => {
            let artifacts = pipeline::cmd_ablation(cfg)?;
            for (label, reports, checksum) in &artifacts.arms {
                let gacc = reports.first().map_or(0.0, |r| r.gacc);
                println!("{label}: gacc {gacc:.4} (train split checksum {checksum:016x})");
            }
            println!("wrote {}", artifacts.csv.display());
        }
        _ => unreachable!("command validated in parse_args"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match parse_args(&args).and_then(run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
