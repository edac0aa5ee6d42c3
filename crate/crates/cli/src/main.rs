use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hcd_core::checkpoint::{fingerprint, load_checkpoint};
use hcd_core::config::RunConfig;
use hcd_core::data::{load_image, save_image, to_rgb};
use hcd_core::eval::{emit_curves, evaluate_dir, EvalSubject, PsnrMode};
use hcd_core::haze::synth_dataset;
use hcd_core::losses::PerceptualEncoder;
use hcd_core::network::{Hdn, NetworkWeights};
use hcd_core::train::{run_training, RunOptions};

/// Hierarchical contrastive dehazing: data synthesis, training, evaluation
/// and inference.
#[derive(Parser, Debug)]
#[command(name = "hcd", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `train.total_steps=10`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired hazy/clear dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a paired dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Score a checkpoint on a paired dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Rgb)]
        mode: Mode,
    },
    /// Dehaze a single image.
    Dehaze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the half- and quarter-scale outputs next to `--out`.
        #[arg(long)]
        all_scales: bool,
    },
    /// Print the parameter count and per-module table.
    Inspect {
        /// Also write the table and effective config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot loss and validation PSNR curves from metrics files.
    Curves {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Rgb,
    YChannel,
}

impl From<Mode> for PsnrMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Rgb => PsnrMode::Rgb,
            Mode::YChannel => PsnrMode::YChannel,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            let internal = e.downcast_ref::<hcd_core::Error>().is_some_and(|e| e.is_internal());
            ExitCode::from(if internal { 2 } else { 1 })
        }
        Err(_) => ExitCode::from(2),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.command {
        Command::Synth { out } => {
            cfg.echo(&out)?;
            let records = synth_dataset(&cfg.synth, &out)?;
            println!("wrote {} pairs to {}", records.len(), out.display());
        }
        Command::Train {
            data,
            out,
            resume,
            stop_at,
        } => {
            cfg.echo(&out)?;
            let encoder = if cfg.model.use_hcl {
                Some(PerceptualEncoder::from_config(&cfg.perceptual)?)
            } else {
                None
            };
            let outcome = run_training(
                &cfg.model,
                &cfg.train,
                encoder.as_ref(),
                &data,
                &out,
                &RunOptions { resume, stop_at },
            )?;
            println!(
                "trained to step {}; checkpoint {}; metrics {}",
                outcome.state.step,
                outcome.final_checkpoint.display(),
                outcome.metrics.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            mode,
        } => {
            let (net, weights, id) = load_model(&mut cfg, checkpoint.as_deref())?;
            cfg.echo(&out)?;
            let subject = EvalSubject {
                net: &net,
                weights: &weights,
                checkpoint: id,
                fingerprint: fingerprint(&cfg.model, &cfg.train),
            };
            let report = evaluate_dir(&subject, &data, mode.into(), &out)?;
            match report.mean_psnr_db {
                Some(p) => println!("{} images, mean PSNR {p:.3} dB", report.rows.len()),
                None => println!("no images scored"),
            }
        }
        Command::Dehaze {
            input,
            out,
            checkpoint,
            all_scales,
        } => {
            let (net, weights, _) = load_model(&mut cfg, checkpoint.as_deref())?;
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.echo(dir)?;
            let img = to_rgb(load_image(&input)?)?;
            let outputs = net.dehaze_padded(&weights, &img)?;
            save_image(&outputs[0].clamp(0.0, 1.0), &out)?;
            if all_scales {
                for (k, a) in outputs.iter().enumerate().skip(1) {
                    let p = scale_path(&out, 1 << k);
                    save_image(&a.clamp(0.0, 1.0), &p)?;
                }
            }
            println!("wrote {}", out.display());
        }
        Command::Inspect { out } => {
            let net = Hdn::new(cfg.model.clone())?;
            let table = net.param_table();
            let width = table.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
            for (name, count) in &table {
                println!("{name:<width$}  {count:>10}");
            }
            println!("{:<width$}  {:>10}", "total", net.param_count());
            if let Some(out) = out {
                cfg.echo(&out)?;
                let body = serde_json::json!({
                    "variant": cfg.model.variant(),
                    "total": net.param_count(),
                    "modules": table.iter().map(|(n, c)| serde_json::json!({"name": n, "params": c})).collect::<Vec<_>>(),
                });
                let p = out.join("params.json");
                std::fs::write(&p, serde_json::to_string_pretty(&body)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Curves { metrics, out } => {
            cfg.echo(&out)?;
            let summary = emit_curves(&metrics, &out)?;
            println!("wrote {} plot(s) to {}", summary.plots.len(), out.display());
        }
    }
    Ok(())
}

/// Network and weights from a checkpoint, or freshly initialized from the
/// config. A checkpoint's own model section replaces the configured one so
/// the echoed config describes what actually ran.
fn load_model(cfg: &mut RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<(Hdn, NetworkWeights, String)> {
    match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model != cfg.model {
                log::info!("using the model configuration stored in {}", p.display());
            }
            cfg.model = ck.model;
            cfg.train = ck.train;
            let net = Hdn::new(cfg.model.clone())?;
            ck.state.weights.check_layout(net.specs())?;
            Ok((net, ck.state.weights, p.display().to_string()))
        }
        None => {
            log::warn!("no checkpoint given; using freshly initialized weights");
            let net = Hdn::new(cfg.model.clone())?;
            let weights = net.init_weights();
            Ok((net, weights, "init".to_string()))
        }
    }
}

/// `out.png` -> `out_x2.png`.
fn scale_path(out: &Path, factor: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    out.with_file_name(format!("{stem}_x{factor}.{ext}"))
}
