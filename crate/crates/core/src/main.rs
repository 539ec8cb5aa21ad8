use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcbmn::cues::{synth_generate, SynthConfig};
use mcbmn::harness::{
    emit_variance_csv, evaluate, load_checkpoint, run_sweep, sample_records, train, write_samples, HarnessError,
    RunConfig, Split, SweepManifest,
};
use mcbmn::metrics::{question_word_stats, write_scores_csv, write_word_stats_csv};

#[derive(Parser)]
#[command(name = "mcbmn", version, about = "Multi-cue Bayesian question generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data.jsonl")]
        out: PathBuf,
        /// Generator settings (TOML with image_dim, place_dim, noise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated questions on a split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Report path; scores and first-word CSVs are written beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw Monte-Carlo questions per example.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Draws per example (defaults to the evaluation sample count).
        #[arg(long)]
        samples: Option<usize>,
        /// Number of examples.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalised encoding variance per example.
    Variance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        /// Add per-dimension mean and deterministic columns.
        #[arg(long)]
        per_dim: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every point of an ablation grid.
    Sweep {
        /// Sweep manifest (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::All => Split::All,
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"))
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData { n, seed, out, config } => {
            let synth = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| HarnessError::ConfigNotFound(format!("{}: {e}", p.display())))?;
                    toml::from_str::<SynthConfig>(&text).map_err(|e| HarnessError::Config(e.to_string()))?
                }
                None => SynthConfig::default(),
            };
            let ds = synth_generate(n, seed, &synth)?;
            ds.write_jsonl(create(&out)?)?;
            println!("wrote {} examples to {}", ds.len(), out.display());
        }
        Command::Train { config, seed, out } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = train(&cfg)?;
            let last = outcome.curve.last().expect("at least one epoch");
            println!(
                "trained {} epochs: train loss {:.4}, best val loss at epoch {}; outputs in {}",
                last.epoch,
                last.train_loss,
                outcome.best_epoch,
                cfg.out_dir.display()
            );
        }
        Command::Eval { config, seed, checkpoint, split, out } => {
            let cfg = load_config(&config, seed)?;
            let ckpt = checkpoint_path(&cfg, checkpoint);
            let report = evaluate(&cfg, &ckpt, split.into())?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("report.json"));
            let text = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Usage(e.to_string()))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, text + "\n")?;
            write_scores_csv(&report, create(&out.with_extension("scores.csv"))?)?;
            write_word_stats_csv(&report.first_words, create(&out.with_extension("first_words.csv"))?)?;
            println!(
                "BLEU-1 {:.2} BLEU-4 {:.2} ROUGE-L {:.2} CIDEr {:.3} over {} examples",
                report.bleu[0],
                report.bleu[3],
                report.rouge_l,
                report.cider,
                report.per_example.len()
            );
        }
        Command::Sample { config, seed, checkpoint, split, samples, n, out } => {
            let cfg = load_config(&config, seed)?;
            let ds = mcbmn::cues::Dataset::load(&cfg.data.path)?;
            let (model, store) = load_checkpoint(&cfg, &ds, &checkpoint_path(&cfg, checkpoint))?;
            let mut idx = Split::from(split).indices(&cfg, &ds);
            if let Some(n) = n {
                idx.truncate(n);
            }
            let t = samples.unwrap_or(cfg.model.mumc.eval_samples);
            let records = sample_records(&model, &store, &ds, &idx, t, cfg.seed)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("samples.jsonl"));
            write_samples(&records, create(&out)?)?;
            let words: Vec<Vec<String>> = records
                .iter()
                .flat_map(|r| r.samples.iter())
                .map(|s| s.iter().take_while(|&&t| t != mcbmn::cues::EOS).map(|&t| ds.vocab.token(t).unwrap_or("<unk>").to_string()).collect())
                .collect();
            write_word_stats_csv(&question_word_stats(&words, 4), create(&out.with_extension("first_words.csv"))?)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Variance { config, seed, checkpoint, split, n, samples, per_dim, out } => {
            let cfg = load_config(&config, seed)?;
            let ds = mcbmn::cues::Dataset::load(&cfg.data.path)?;
            let (model, store) = load_checkpoint(&cfg, &ds, &checkpoint_path(&cfg, checkpoint))?;
            let idx = Split::from(split).indices(&cfg, &ds);
            let out = out.unwrap_or_else(|| cfg.out_dir.join("variance.csv"));
            let records = emit_variance_csv(&model, &store, &ds, &idx, n, samples, cfg.seed, per_dim, create(&out)?)?;
            let mean = records.iter().map(|r| r.norm_variance).sum::<f64>() / records.len().max(1) as f64;
            println!("mean normalized variance {mean:.6} over {} examples; wrote {}", records.len(), out.display());
        }
        Command::Sweep { config, out } => {
            let (mut manifest, base) = SweepManifest::load(&config)?;
            if let Some(o) = out {
                manifest.out_dir = o;
            }
            let results = run_sweep(&manifest, &base)?;
            for (name, r) in &results {
                println!("{name}: BLEU-1 {:.2} ROUGE-L {:.2} CIDEr {:.3}", r.bleu[0], r.rouge_l, r.cider);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
