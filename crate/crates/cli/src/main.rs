use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use memetrn_cli::commands;
use memetrn_cli::RunConfig;

#[derive(Parser)]
#[command(name = "memetrn", version, about = "Caption-augmented multimodal meme classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: splits, caption corpus, vocabulary.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the captioner with cross-entropy, then optionally self-critical fine-tuning.
    TrainCaptioner {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scst: bool,
    },
    /// Attach generated captions to every split of a dataset directory.
    Caption {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on train.jsonl and score it on dev.jsonl.
    TrainDetector {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print AUROC and accuracy of a prediction file against gold memes.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Write hateful probabilities for a memes file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all eight caption / object-label / augmentation combinations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use an existing (captioned) dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scst: bool,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let s = commands::gen_data(&cfg, &out)?;
            for sp in &s.splits {
                println!("{}: {} memes, {} hateful", sp.split, sp.n, sp.hateful);
            }
            println!("caption images: {}, vocabulary: {}", s.caption_images, s.vocab_size);
        }
        Command::TrainCaptioner { config, data, out, scst } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let s = commands::train_captioner(&cfg, &data, &out, scst)?;
            println!(
                "token accuracy {:.4}, CIDEr-D after XE {:.4}, kept {:.4} (step {})",
                s.token_accuracy, s.xe_cider, s.best_cider, s.best_step
            );
        }
        Command::Caption { model, data, out } => {
            let s = commands::caption(&model, &data, &out)?;
            println!("captioned {} memes ({} failed)", s.captioned, s.failed);
        }
        Command::TrainDetector { config, data, out } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let s = commands::train_detector_run(&cfg, &data, &out)?;
            println!("dev auroc {:.4} accuracy {:.4} (n={})", s.dev.auroc, s.dev.accuracy, s.dev.n);
        }
        Command::Eval { pred, gold } => {
            let r = commands::eval(&pred, &gold)?;
            println!("auroc {:.6} accuracy {:.6} n {}", r.auroc, r.accuracy, r.n);
        }
        Command::Predict { model, data, out } => {
            let p = commands::predict(&model, &data, &out)?;
            println!("wrote {} predictions to {}", p.len(), out.display());
        }
        Command::Ablate { config, out, data, scst } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let rows = commands::ablate(&cfg, data.as_deref(), &out, scst)?;
            print!("{}", commands::ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
