use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use mulcon::data::{generate, load_dataset, save_dataset, Split};
use mulcon::eval::{evaluate, export_attention, export_embeddings, label_embeddings, retrieve, Gallery, Query};
use mulcon::gradcheck::{run_suite, MAX_RELATIVE_ERROR};
use mulcon::model::{BackboneModel, MulConModel, Network};
use mulcon::tensor::Tensor;
use mulcon::training::{load_checkpoint, run_variant, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mulcon", version, about = "Multi-label contrastive training on synthetic glyph images")]
struct Cli {
    /// JSON training config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset seed for `gen-data`, training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test splits.
    GenData {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one variant and evaluate it on the test split.
    Train {
        /// Directory holding train.mlgd/test.mlgd; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the test split and print the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Rank test images by label-level embedding distance to a query image.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        query: usize,
        /// Comma-separated label indices; all must be active in the query image.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write active label-level embeddings of the test split as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write attention maps of one test image as PGM files.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        image: usize,
        /// Label whose per-head maps are written.
        #[arg(long, default_value_t = 0)]
        head_label: usize,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference gradient checks of every op and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(mulcon::Error),
}

impl From<mulcon::Error> for CliError {
    fn from(e: mulcon::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Applies `a.b.c=value` overrides; values parse as JSON and fall back to strings.
fn apply_overrides(root: &mut Value, overrides: &[String]) -> CliResult<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| CliError::Usage(format!("malformed override `{item}`, expected key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *root;
        let keys: Vec<&str> = path.split('.').collect();
        for (depth, key) in keys.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::Usage(format!("override `{path}`: `{}` is not an object", keys[..depth].join("."))))?;
            if !obj.contains_key(*key) {
                return Err(CliError::Usage(format!("override `{path}`: unknown key `{key}`")));
            }
            if depth + 1 == keys.len() {
                obj.insert(key.to_string(), value.clone());
                break;
            }
            node = obj.get_mut(*key).unwrap();
        }
    }
    Ok(())
}

fn resolve_config(path: Option<&Path>, overrides: &[String]) -> CliResult<TrainConfig> {
    let base: TrainConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    apply_overrides(&mut value, overrides)?;
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("override: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn write_snapshot(out: &Path, cfg: &TrainConfig) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn load_splits(data: Option<&Path>, cfg: &TrainConfig) -> CliResult<(Split, Split)> {
    match data {
        Some(dir) => Ok((load_dataset(dir.join("train.mlgd"))?, load_dataset(dir.join("test.mlgd"))?)),
        None => Ok(generate(&cfg.data)?),
    }
}

fn load_network(cfg: &TrainConfig, checkpoint: &Path) -> CliResult<Network> {
    let mut network = if cfg.variant.name().starts_with("backbone") {
        Network::Backbone(BackboneModel::init(&cfg.model, 0)?)
    } else {
        Network::MulCon(MulConModel::init(&cfg.model, 0)?)
    };
    load_checkpoint(&mut network, checkpoint)?;
    Ok(network)
}

fn mulcon_only(network: &Network) -> CliResult<&MulConModel> {
    network
        .as_mulcon()
        .ok_or_else(|| CliError::Usage("this command needs a mulcon checkpoint".into()))
}

/// Config for commands that read a checkpoint: `--config`, else the
/// `config.json` written next to the checkpoint.
fn checkpoint_config(cli: &Cli, checkpoint: &Path, overrides: &[String]) -> CliResult<TrainConfig> {
    let sibling = checkpoint.parent().map(|d| d.join("config.json")).filter(|p| p.exists());
    resolve_config(cli.config.as_deref().or(sibling.as_deref()), overrides)
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> CliResult<bool> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData { overrides } => {
            let mut cfg = resolve_config(cli.config.as_deref(), overrides)?;
            if let Some(seed) = cli.seed {
                cfg.data.seed = seed;
            }
            write_snapshot(out, &cfg)?;
            let (train, test) = generate(&cfg.data)?;
            save_dataset(&train, out.join("train.mlgd"))?;
            save_dataset(&test, out.join("test.mlgd"))?;
            println!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
        }
        Command::Train { data, overrides } => {
            let mut cfg = resolve_config(cli.config.as_deref(), overrides)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            write_snapshot(out, &cfg)?;
            let (train, test) = load_splits(data.as_deref(), &cfg)?;
            let outcome = run_variant(&cfg, &train, Some(&test), Some(out))?;
            if let Some(m) = &outcome.log.final_metrics {
                fs::write(out.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
                print_json(m)?;
            }
        }
        Command::Eval { checkpoint, data, overrides } => {
            let cfg = checkpoint_config(cli, checkpoint, overrides)?;
            write_snapshot(out, &cfg)?;
            let network = load_network(&cfg, checkpoint)?;
            let (_, test) = load_splits(data.as_deref(), &cfg)?;
            let (report, _) = evaluate(&network, &test, 100)?;
            fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
            print_json(&report)?;
        }
        Command::Retrieve { checkpoint, data, query, labels, k, overrides } => {
            let cfg = checkpoint_config(cli, checkpoint, overrides)?;
            write_snapshot(out, &cfg)?;
            let network = load_network(&cfg, checkpoint)?;
            let model = mulcon_only(&network)?;
            let (_, test) = load_splits(data.as_deref(), &cfg)?;
            if *query >= test.len() {
                return Err(CliError::Usage(format!("query {query} out of range for {} test images", test.len())));
            }
            let emb = label_embeddings(model, &test, 100)?;
            let (l, d) = (emb.shape()[1], emb.shape()[2]);
            let row = emb.data()[query * l * d..(query + 1) * l * d].to_vec();
            let q = Query {
                id: *query,
                embeddings: Tensor::new(&[l, d], row)?,
                truth: test.labels().row(*query).to_vec(),
                labels: labels.clone(),
            };
            let gallery = Gallery::new((0..test.len()).collect(), emb, test.labels().clone())?;
            let result = retrieve(&q, &gallery, *k)?;
            fs::write(out.join("retrieval.json"), serde_json::to_string_pretty(&result)?)?;
            print_json(&result)?;
        }
        Command::ExportEmbeddings { checkpoint, data, overrides } => {
            let cfg = checkpoint_config(cli, checkpoint, overrides)?;
            write_snapshot(out, &cfg)?;
            let network = load_network(&cfg, checkpoint)?;
            let (_, test) = load_splits(data.as_deref(), &cfg)?;
            let path = out.join("embeddings.csv");
            let rows = export_embeddings(mulcon_only(&network)?, &test, &path)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::ExportAttention { checkpoint, data, image, head_label, overrides } => {
            let cfg = checkpoint_config(cli, checkpoint, overrides)?;
            write_snapshot(out, &cfg)?;
            let network = load_network(&cfg, checkpoint)?;
            let (_, test) = load_splits(data.as_deref(), &cfg)?;
            let export = export_attention(mulcon_only(&network)?, &test, *image, *head_label, out.join(format!("attention_{image}")))?;
            for (_, _, path) in export.label_maps.iter().chain(&export.head_maps) {
                println!("{}", path.display());
            }
        }
        Command::Gradcheck { instances } => {
            fs::create_dir_all(out)?;
            let reports = run_suite(*instances, cli.seed.unwrap_or(0))?;
            fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&reports)?)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.passed();
                ok &= pass;
                println!(
                    "{:<22} max_rel_err {:.3e}  coords {:>6}  kinks {:>3}  {}",
                    r.name,
                    r.max_error,
                    r.coordinates,
                    r.kinks,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            println!("threshold {MAX_RELATIVE_ERROR:e}: {}", if ok { "all passed" } else { "failures" });
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(msg)) => {
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": msg }));
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("{}", serde_json::json!({ "error": "runtime", "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
