use std::path::PathBuf;
use std::process::ExitCode;

use afp::commands::{self, Subset};
use afp::{AppError, RunConfig};
use afp_core::synth::TrainMode;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "afp",
    version,
    about = "Phantom generation, training, synthesis and evaluation for MR-to-CT translation"
)]
struct Cli {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the translator training mode (L1, AFP, L1_PLUS_AFP, L1_THEN_AFP, GAN_AFP).
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    /// Output directory; defaults to the configuration's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired phantom cases and a manifest.
    PhantomGen {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Resample and normalise a dataset.
    Preprocess {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the segmentation network used as feature extractor.
    TrainSeg {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the translator.
    TrainSynth {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<PathBuf>,
    },
    /// Synthesize CT volumes patch-wise from a dataset's MR volumes.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        subset: Subset,
    },
    /// Score synthetic volumes against the reference CTs.
    Eval {
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        subset: Subset,
    },
    /// Combine evaluation directories into a markdown table.
    Report {
        /// `NAME=DIR` pairs, one per run.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    TrainMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}"))
}

fn effective_config(cli: &Cli) -> Result<RunConfig, AppError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.training.mode = m;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = effective_config(&cli)?;
    if cli.print_config {
        println!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(AppError::Config("no subcommand given (see --help)".into()));
    };
    commands::init_threads();
    let out = cfg.out_dir.clone();
    let data = |d: Option<PathBuf>| d.unwrap_or_else(|| cfg.data_dir.clone());
    let segmenter = |s: Option<PathBuf>| s.or_else(|| cfg.segmenter_checkpoint.clone());
    match command {
        Command::PhantomGen { n } => {
            let m = commands::phantom_gen(&cfg, n.unwrap_or(cfg.n_cases), &out)?;
            eprintln!("wrote {} cases to {}", m.cases.len(), out.display());
        }
        Command::Preprocess { input } => {
            let m = commands::preprocess(&cfg, &data(input), &out)?;
            eprintln!(
                "preprocessed {} cases into {}",
                m.cases.len(),
                out.display()
            );
        }
        Command::TrainSeg { data: d } => {
            let run = commands::train_seg(&cfg, &data(d), &out)?;
            for l in &run.curve {
                eprintln!(
                    "epoch {:3}  loss {:.4}  val dice {:.4}",
                    l.epoch, l.train_loss, l.val_dice
                );
            }
        }
        Command::TrainSynth {
            data: d,
            segmenter: s,
        } => {
            let run = commands::train_synth(&cfg, &data(d), segmenter(s).as_deref(), &out)?;
            for l in &run.log {
                eprintln!(
                    "stage {} epoch {:3}  total {:.4}  l1 {:.4}  afp {:.4}  val {:.4}",
                    l.stage, l.epoch, l.train_total, l.train_l1, l.train_afp, l.val_total
                );
            }
        }
        Command::Synth {
            checkpoint,
            input,
            subset,
        } => {
            let m = commands::synth(&cfg, &checkpoint, &data(input), subset, &out)?;
            eprintln!(
                "synthesized {} volumes into {}",
                m.cases.len(),
                out.display()
            );
        }
        Command::Eval {
            real,
            synth,
            segmenter: s,
            subset,
        } => {
            let seg = segmenter(s).ok_or_else(|| {
                AppError::Config("eval needs --segmenter or segmenter_checkpoint".into())
            })?;
            let (_, agg) = commands::eval(&cfg, &data(real), &synth, &seg, subset, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&agg).expect("serializable")
            );
        }
        Command::Report { runs } => {
            let runs = runs
                .iter()
                .map(|r| {
                    r.split_once('=')
                        .map(|(n, d)| (n.to_string(), PathBuf::from(d)))
                        .ok_or_else(|| {
                            AppError::Config(format!("--run expects NAME=DIR, got {r:?}"))
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let names = afp_core::phantom::label_names();
            let names = cfg
                .seg_labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| names.get(l).map(|n| (i as u32 + 1, n.clone())))
                .collect();
            print!("{}", commands::report(&runs, &names, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let AppError::Core(afp_core::Error::PatchTooLarge { .. }) = e {
                eprintln!("hint: lower synthesis.patch_size or pad the input volume");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
