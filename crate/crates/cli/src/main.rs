use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rils::ablation::{run_ablation, Axis};
use rils::config::RunConfig;
use rils::data::{generate_corpus, load_corpus, write_corpus, Corpus, SyntheticSpec};
use rils::eval::{low_shot_probe_report, retrieval_report, zero_shot_report, EvalReport, ProbeConfig};
use rils::train::{build_corpus, pretrain, synthetic_spec, Checkpoint};
use rils::verify::{default_toy, gradcheck_total_loss, stop_gradient_check, DEFAULT_STEP};
use rils::{Error, Result};

#[derive(Parser)]
#[command(name = "rils", version, about = "Desk-scale masked reconstruction in language space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of PPM images and a caption manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Canvas size in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Pre-train a model and write config, metrics and checkpoints.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from the published architecture and optimizer settings.
        #[arg(long)]
        paper_scale: bool,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Zero-shot classification of the held-out split.
    EvalZeroshot(EvalArgs),
    /// Low-shot linear probe on frozen features.
    EvalProbe {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Image-text retrieval on the held-out split.
    EvalRetrieval {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
    },
    /// Train and score every point of one ablation grid.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        /// Directory for per-run outputs and the comparison report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss on a 64-bit toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory; the synthetic corpus of the checkpoint's config is
    /// regenerated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report path; defaults to `<protocol>.json` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, n, seed, size } => {
            let spec = SyntheticSpec::default().with_seed(seed).with_canvas(size);
            let pairs = generate_corpus(&spec, n)?;
            write_corpus(&pairs, &out)?;
            println!("wrote {n} pairs to {}", out.display());
            Ok(())
        }
        Command::Pretrain {
            config,
            out,
            paper_scale,
            print_config,
        } => {
            let cfg = resolve_config(config.as_deref(), paper_scale)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let corpus = build_corpus(&cfg)?;
            let steps = cfg.train.steps;
            let outputs = pretrain(cfg, corpus, &out)?;
            let last = outputs.records.last().expect("at least one step");
            println!(
                "{steps} steps: l_total {:.4} l_contra {:.4} l_recon {:.4} matched {:.3}",
                last.l_total, last.l_contra, last.l_recon, last.matched_fraction
            );
            println!("checkpoint {}", outputs.checkpoint.display());
            Ok(())
        }
        Command::EvalZeroshot(args) => {
            let (ckpt, corpus) = open(&args)?;
            let spec = synthetic_spec(&ckpt.config);
            let tok = spec.tokenizer(ckpt.config.model.max_len);
            let report = zero_shot_report(&ckpt.model, &tok, &corpus, &spec, &ckpt.config.hash())?;
            emit(&report, &args, "zeroshot")
        }
        Command::EvalProbe { common, shots, seeds } => {
            let (ckpt, corpus) = open(&common)?;
            let spec = synthetic_spec(&ckpt.config);
            let report = low_shot_probe_report(
                &ckpt.model,
                &corpus,
                &spec,
                shots,
                &seeds,
                &ProbeConfig::default(),
                &ckpt.config.hash(),
            )?;
            emit(&report, &common, "probe")
        }
        Command::EvalRetrieval { common, k } => {
            let (ckpt, corpus) = open(&common)?;
            let spec = synthetic_spec(&ckpt.config);
            let tok = spec.tokenizer(ckpt.config.model.max_len);
            let report = retrieval_report(&ckpt.model, &tok, &corpus, &spec, &k, &ckpt.config.hash())?;
            emit(&report, &common, "retrieval")
        }
        Command::Ablate {
            axis,
            config,
            seeds,
            shots,
            out,
        } => {
            let axis: Axis = axis.parse()?;
            let base = resolve_config(config.as_deref(), false)?;
            let corpus = build_corpus(&base)?;
            let report = run_ablation(axis, &base, &corpus, &seeds, shots, out.as_deref(), |r| {
                eprintln!(
                    "{} seed {}: zero-shot {:.4}, {shots}-shot probe {:.4}, {:.0}s",
                    r.label, r.seed, r.zero_shot, r.probe_mean, r.seconds
                );
            })?;
            let table = report.table();
            print!("{table}");
            if let Some(dir) = out {
                write(&dir.join(format!("ablation_{axis}.json")), &(report.to_json() + "\n"))?;
                write(&dir.join(format!("ablation_{axis}.txt")), &table)?;
            }
            Ok(())
        }
        Command::Gradcheck { seed, step, tolerance } => {
            let toy = default_toy(seed)?;
            let r = gradcheck_total_loss(&toy, step)?;
            let s = stop_gradient_check(&toy, step, &["vision.patch.w", "head.theta.w"])?;
            println!(
                "checked {} coordinates of {} tensors, {} of 4 images matched, {:.1}s",
                r.coordinates,
                r.per_param.len(),
                r.matched,
                r.elapsed.as_secs_f64()
            );
            println!("stop-gradient: target branch detached {}", s.target_branch_detached);
            println!("stop-gradient: frozen-target error {:.3e}", s.frozen_max_rel_error);
            println!("max relative error {:.3e} at {}", r.max_rel_error, r.worst);
            if r.max_rel_error < tolerance && s.target_branch_detached && s.frozen_max_rel_error < tolerance {
                Ok(())
            } else {
                Err(Error::Numerical(format!("gradient check failed at tolerance {tolerance:e}")))
            }
        }
    }
}

fn resolve_config(path: Option<&Path>, paper_scale: bool) -> Result<RunConfig> {
    match (path, paper_scale) {
        (Some(p), false) => RunConfig::load(p),
        (None, false) => Ok(RunConfig::default()),
        (None, true) => Ok(RunConfig::paper_scale()),
        (Some(_), true) => Err(Error::config("paper_scale", "cannot be combined with --config")),
    }
}

fn open(args: &EvalArgs) -> Result<(Checkpoint, Corpus)> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let corpus = match &args.data {
        Some(dir) => load_corpus(dir)?,
        None => build_corpus(&ckpt.config)?,
    };
    Ok((ckpt, corpus))
}

fn emit(report: &EvalReport, args: &EvalArgs, stem: &str) -> Result<()> {
    let path = args.out.clone().unwrap_or_else(|| {
        args.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("{stem}.json"))
    });
    report.save(&path)?;
    print!("{}", report.table());
    println!("report {}", path.display());
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
