use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crisp_cli::commands;
use crisp_cli::RunConfig;

#[derive(Parser)]
#[command(name = "crisp", version, about = "Contrastive segmentation uncertainty pipeline")]
struct Cli {
    /// Base configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test shape datasets.
    GenData(GenData),
    /// Train the joint embedding model.
    Train(Train),
    /// Produce predictions and uncertainty maps for the test set.
    Estimate(Estimate),
    /// Score uncertainty maps against the ground truth.
    Evaluate(Evaluate),
    /// Sweep the number of retrieved samples M.
    AblateM(AblateM),
}

#[derive(Args)]
struct GenData {
    /// Train plus validation samples.
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    test_count: Option<String>,
    /// Image side length.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    val_fraction: Option<String>,
    #[arg(long)]
    noise_sigma: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct Train {
    /// Directory holding train.bin and val.bin.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    /// Shuffling seed.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    init_seed: Option<String>,
    /// Suppress per-epoch progress.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct Sources {
    /// Directory holding train.bin, val.bin and test.bin.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// corrupt, model or external.
    #[arg(long)]
    pred_source: Option<String>,
    #[arg(long)]
    pred_dir: Option<String>,
    /// Comma-separated severities sampled per test image.
    #[arg(long)]
    severities: Option<String>,
    #[arg(long)]
    corrupt_modes: Option<String>,
    #[arg(long)]
    corrupt_seed: Option<String>,
    /// Bank cache directory, `auto` (beside the checkpoint) or `none`.
    #[arg(long)]
    bank_cache: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct Estimate {
    /// crisp, edge or entropy.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    m_ratio: Option<String>,
    /// count or weight_sum.
    #[arg(long)]
    normalization: Option<String>,
    #[command(flatten)]
    sources: Sources,
}

#[derive(Args)]
struct Evaluate {
    /// Directory holding test.bin.
    #[arg(long)]
    data: Option<String>,
    /// Output directory of `estimate`.
    #[arg(long)]
    maps: Option<String>,
    #[arg(long)]
    ece_bins: Option<String>,
    #[arg(long)]
    mi_bins: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct AblateM {
    /// Comma-separated values of M.
    #[arg(long)]
    m_list: Option<String>,
    #[command(flatten)]
    sources: Sources,
}

impl Sources {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("data_dir", &self.data),
            ("checkpoint", &self.checkpoint),
            ("pred_source", &self.pred_source),
            ("pred_dir", &self.pred_dir),
            ("severities", &self.severities),
            ("corrupt_modes", &self.corrupt_modes),
            ("corrupt_seed", &self.corrupt_seed),
            ("bank_cache", &self.bank_cache),
            ("out", &self.out),
        ]
    }
}

impl Command {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        match self {
            Self::GenData(a) => vec![
                ("count", &a.count),
                ("test_count", &a.test_count),
                ("size", &a.size),
                ("classes", &a.classes),
                ("seed", &a.seed),
                ("val_fraction", &a.val_fraction),
                ("noise_sigma", &a.noise_sigma),
                ("out", &a.out),
            ],
            Self::Train(a) => vec![
                ("data_dir", &a.data),
                ("out", &a.out),
                ("max_epochs", &a.max_epochs),
                ("patience", &a.patience),
                ("batch_size", &a.batch_size),
                ("learning_rate", &a.learning_rate),
                ("weight_decay", &a.weight_decay),
                ("train_seed", &a.seed),
                ("init_seed", &a.init_seed),
            ],
            Self::Estimate(a) => {
                let mut v = vec![
                    ("method", &a.method),
                    ("m", &a.m),
                    ("m_ratio", &a.m_ratio),
                    ("normalization", &a.normalization),
                ];
                v.extend(a.sources.overrides());
                v
            }
            Self::Evaluate(a) => vec![
                ("data_dir", &a.data),
                ("maps_dir", &a.maps),
                ("ece_bins", &a.ece_bins),
                ("mi_bins", &a.mi_bins),
                ("out", &a.out),
            ],
            Self::AblateM(a) => {
                let mut v = vec![("m_list", &a.m_list)];
                v.extend(a.sources.overrides());
                v
            }
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| commands::usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k.trim(), v).map_err(|e| commands::usage(e.to_string()))?;
    }
    for (key, value) in cli.command.overrides() {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|e| commands::usage(e.to_string()))?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli).map_err(|e| commands::usage(format!("{e:#}")))?;
    match &cli.command {
        Command::GenData(_) => {
            let manifest = commands::gen_data(&cfg)?;
            for f in &manifest.files {
                println!("{}: {} samples (seed {})", f.name, f.count, f.seed);
            }
        }
        Command::Train(a) => {
            let quiet = a.quiet;
            let (summary, _) = commands::train(&cfg, |line| {
                if !quiet {
                    eprintln!("{line}");
                }
            })?;
            println!(
                "selected epoch {} of {}; diag_accuracy train {:.3} val {:.3}",
                summary.selected_epoch, summary.epochs_run, summary.train_diag_accuracy, summary.val_diag_accuracy
            );
        }
        Command::Estimate(_) => {
            let s = commands::estimate(&cfg)?;
            match s.m {
                Some(m) => println!("{}: {} maps (M = {m} of {})", s.method, s.samples, s.bank_size.unwrap_or(0)),
                None => println!("{}: {} maps", s.method, s.samples),
            }
        }
        Command::Evaluate(_) => {
            let r = commands::evaluate(&cfg)?;
            let a = &r.aggregate;
            let corr = a.correlation.map_or_else(|| "undefined".into(), |c| format!("{c:.4}"));
            println!("correlation {corr}  ece {:.4}  weighted_mi {:.4}", a.ece, a.weighted_mi);
            if a.all_perfect {
                println!("every prediction is perfect; MI has no weight");
            }
        }
        Command::AblateM(_) => {
            for row in commands::ablate_m(&cfg)? {
                let corr = row.correlation.map_or_else(|| "undefined".into(), |c| format!("{c:.4}"));
                println!("M {:>4}  correlation {corr}  weighted_mi {:.4}", row.m, row.weighted_mi);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if commands::is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
