use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ilvr_cli::{
    cmd_eval, cmd_export_heatmap, cmd_gen_data, cmd_gradcheck, cmd_sweep, cmd_train, CliError, RunConfig,
};

/// Interleaved latent visual reasoning on synthetic grid tasks.
#[derive(Parser)]
#[command(name = "ilvr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set latent_k=4`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset into the `data` directory.
    GenData(Common),
    /// Run two-stage training; writes metrics.jsonl, model.ckpt and teacher.ckpt to `out`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train once per value, e.g. `--sweep latent_k=1,4,8,12`.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: Option<String>,
    },
    /// Greedy-decode a split with a checkpoint and report exact-match accuracy.
    Eval(Common),
    /// Check analytic gradients of both stage losses against finite differences.
    Gradcheck(Common),
    /// Export relevance heatmaps for selected trajectories.
    ExportHeatmap(Common),
}

fn resolve(common: &Common) -> Result<Option<RunConfig>, CliError> {
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if common.print_config {
        print!("{}", cfg.echo());
        return Ok(None);
    }
    eprintln!("# resolved configuration\n{}", cfg.echo());
    Ok(Some(cfg))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => {
            let Some(cfg) = resolve(&c)? else { return Ok(()) };
            let r = cmd_gen_data(&cfg)?;
            println!("wrote {} train / {} test trajectories to {}", r.train, r.test, r.dir.display());
        }
        Command::Train { common, sweep } => {
            let Some(cfg) = resolve(&common)? else { return Ok(()) };
            let reports = match sweep {
                Some(spec) => {
                    let (key, values) = spec
                        .split_once('=')
                        .ok_or_else(|| CliError::Usage(format!("sweep `{spec}` is not key=v1,v2,...")))?;
                    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
                    cmd_sweep(&cfg, key.trim(), &values)?
                }
                None => vec![(String::new(), cmd_train(&cfg)?)],
            };
            for (label, r) in reports {
                let acc = r.eval.as_ref().map_or("n/a".into(), |e| format!("{:.4}", e.accuracy));
                let label = if label.is_empty() { String::new() } else { format!("[{label}] ") };
                println!("{label}{} steps, test accuracy {acc}, metrics {}", r.steps, r.metrics.display());
            }
        }
        Command::Eval(c) => {
            let Some(cfg) = resolve(&c)? else { return Ok(()) };
            let r = cmd_eval(&cfg)?;
            println!("accuracy {:.4} ({}/{}), malformed {}", r.accuracy, r.correct, r.total, r.malformed);
            for (family, acc) in r.family_accuracy() {
                println!("  {family}: {acc:.4}");
            }
        }
        Command::Gradcheck(c) => {
            let Some(cfg) = resolve(&c)? else { return Ok(()) };
            let outcome = cmd_gradcheck(&cfg);
            if let Ok(o) = &outcome {
                for check in &o.checks {
                    println!(
                        "{}: max relative error {:.3e} over {} coords (worst {}[{}])",
                        check.loss, check.max_rel_error, check.coords, check.worst_param, check.worst_index
                    );
                }
                println!("PASS");
            }
            outcome?;
        }
        Command::ExportHeatmap(c) => {
            let Some(cfg) = resolve(&c)? else { return Ok(()) };
            let maps = cmd_export_heatmap(&cfg)?;
            println!("wrote {} heatmaps under {}", maps.len(), cfg.out.join("heatmaps").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on its own parse errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let err = anyhow::Error::new(e).context("ilvr failed");
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
