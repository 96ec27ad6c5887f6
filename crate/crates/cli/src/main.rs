//! `vibtag`: train, evaluate and analyse stochastic-tag parsers.

mod commands;
mod config;
mod data;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vibtag::encoders::TagMode;
use vibtag::ModelKind;

use crate::error::{kind_name, CliError};

#[derive(Debug, Parser)]
#[command(name = "vibtag", version, about = "Variational information bottleneck tags for dependency parsing")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Use the bundled synthetic treebank (the `[demo]` table) instead of files.
    #[arg(long, global = true)]
    demo: bool,

    /// Report errors on stderr as a JSON object.
    #[arg(long, global = true)]
    json_errors: bool,

    /// Worker threads (falls back to VIBTAG_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Run directory; every output goes here.
    #[arg(long, global = true, value_name = "DIR", default_value = "vibtag-run")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
struct ModelFlags {
    /// Model kind: vib, mlp, pca, identity or gold_pos.
    #[arg(long, value_parser = parse_kind)]
    kind: Option<ModelKind>,
    /// Tag space: `discrete:K` or `continuous:D`.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TagMode>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, clap::ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; writes model.ckpt and history.jsonl.
    Train(ModelFlags),
    /// LAS/UAS and information bounds of a checkpoint, as JSON.
    Eval {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: SplitArg,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train one model per β and tabulate compression against accuracy.
    Curve {
        /// Comma-separated β values.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Deterministic annealing of a discrete tag set into a cluster tree.
    Anneal {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        beta_start: Option<f64>,
        #[arg(long)]
        beta_min: Option<f64>,
        #[arg(long)]
        merge_threshold: Option<f64>,
        #[arg(long)]
        max_clusters: Option<usize>,
    },
    /// How much of a label column the tags still carry.
    Probe {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// upos, xpos, lemma, deprel, form or feat:NAME.
        #[arg(long, default_value = "upos")]
        column: vibtag::analysis::LabelColumn,
    },
    /// Per-token tag vectors as TSV.
    Dump {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: SplitArg,
    },
    /// Paired permutation test on per-sentence LAS of two checkpoints.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: SplitArg,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Validate and describe an embedding file.
    FmtEmb {
        file: PathBuf,
        /// Also check token counts against this treebank.
        #[arg(long)]
        conllu: Option<PathBuf>,
    },
    /// Write the synthetic treebank as CoNLL-U and embedding files.
    DemoData,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown model kind '{s}' (vib, mlp, pca, identity, gold_pos)"))
}

fn parse_mode(s: &str) -> Result<TagMode, String> {
    let (kind, size) = s.split_once(':').ok_or("expected discrete:K or continuous:D")?;
    let n: usize = size.parse().map_err(|e| format!("bad size '{size}': {e}"))?;
    match kind {
        "discrete" => Ok(TagMode::Discrete { k: n }),
        "continuous" => Ok(TagMode::Continuous { dim: n }),
        _ => Err(format!("unknown tag space '{kind}'")),
    }
}

fn init_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("VIBTAG_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("VIBTAG_THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn report(err: &CliError, json: bool) {
    if json {
        let v = serde_json::json!({
            "error": {
                "kind": kind_name(err.kind()),
                "exit_code": err.exit_code(),
                "message": err.to_string(),
            }
        });
        eprintln!("{v}");
    } else {
        eprintln!("vibtag: {err}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let json_errors = argv.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report(&CliError::Usage(e.to_string().trim().to_string()), true);
            } else {
                eprint!("{e}");
            }
            return ExitCode::from(1);
        }
    };
    let result = init_threads(cli.threads).and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e, cli.json_errors);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
