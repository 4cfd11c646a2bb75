//! The `dcca` command-line front end: data generation, training, index
//! building, querying, and evaluation.
//!
//! Every value can come from a flag or from a flat `key = value` config file
//! (`--config`), with flags taking precedence. Commands that produce a file
//! write their fully resolved configuration next to it as `<out>.config` for
//! provenance. Reports are plain `key=value` lines. Exit codes: 0 success,
//! 2 usage/validation, 3 runtime failure (corrupt file, diverged training).

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::datagen::{
    gen_linear_gaussian, gen_nonlinear_snippets, load_sample, MultiViewDataset, NonlinearConfig,
    Split,
};
use crate::encoders::InputShape;
use crate::error::{Error, Result};
use crate::retrieval::{
    build_index, evaluate_retrieval, query_with_target, Direction, Modality, SnippetIndex,
};
use crate::tensor::Tensor;
use crate::trainer::{train_with_logger, Arch, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "dcca",
    version,
    about = "Cross-modal snippet retrieval via deep canonically correlated embeddings"
)]
struct Cli {
    /// Seed for all randomness (generation, init, shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Echo the resolved configuration to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-view dataset (MVDS file).
    GenData(GenDataArgs),
    /// Train both encoders and write a DCCK checkpoint.
    Train(TrainArgs),
    /// Build a DCIX embedding index over one modality.
    Index(IndexArgs),
    /// Rank indexed snippets against a query sample (MVSN file).
    Query(QueryArgs),
    /// Report R@k and median rank over a split.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator kind: `nonlinear` (paired snippets) or `linear` (Gaussian).
    #[arg(long)]
    kind: Option<String>,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// [linear] Number of sample pairs.
    #[arg(long)]
    n: Option<usize>,
    /// [linear] Population canonical correlations, comma separated.
    #[arg(long)]
    corrs: Option<String>,
    /// [linear] View X dimensionality.
    #[arg(long)]
    dx: Option<usize>,
    /// [linear] View Y dimensionality.
    #[arg(long)]
    dy: Option<usize>,
    /// [nonlinear] Total pieces (split 60/20/20 into train/valid/test).
    #[arg(long)]
    pieces: Option<usize>,
    /// [nonlinear] Snippets per piece.
    #[arg(long)]
    snippets_per_piece: Option<usize>,
    /// [nonlinear] Shared latent dimensionality.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// [nonlinear] Additive noise level.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset (MVDS).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Halve the learning rate every this many epochs.
    #[arg(long)]
    halve_every: Option<usize>,
    /// Covariance ridge for the correlation loss.
    #[arg(long)]
    eps: Option<f64>,
    /// Correlation space dimensionality.
    #[arg(long)]
    h: Option<usize>,
    /// Architecture preset: `desk`, `paper-table1`, or `mlp`.
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to index: train, valid, or test.
    #[arg(long)]
    split: Option<String>,
    /// Modality to index: `image` (view X) or `audio` (view Y).
    #[arg(long)]
    modality: String,
    #[arg(long)]
    out: PathBuf,
    /// Index only the first N snippets of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Query sample file (MVSN) of the opposite modality.
    #[arg(long)]
    input: PathBuf,
    /// Number of results.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, valid, or test.
    #[arg(long)]
    split: Option<String>,
    /// `audio-to-sheet`, `sheet-to-audio`, or `both`.
    #[arg(long)]
    direction: Option<String>,
    /// Candidate pool size (clipped to the split size with a warning).
    #[arg(long)]
    limit: Option<usize>,
    /// Also report relaxed metrics counting same-piece snippets within this
    /// position tolerance as hits.
    #[arg(long)]
    relaxed_tol: Option<u64>,
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version, 2 for usage errors.
            e.exit();
        }
    };
    let file_cfg = match load_file_config(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let globals = Globals { seed: cli.seed, verbose: cli.verbose, file_cfg };
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(&globals, args),
        Command::Train(args) => cmd_train(&globals, args),
        Command::Index(args) => cmd_index(&globals, args),
        Command::Query(args) => cmd_query(&globals, args),
        Command::Evaluate(args) => cmd_evaluate(&globals, args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Globals {
    seed: Option<u64>,
    verbose: bool,
    file_cfg: HashMap<String, String>,
}

impl Globals {
    fn seed(&self) -> Result<u64> {
        resolve(self.seed, &self.file_cfg, "seed", 0)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Bounds(_)
        | Error::Range(_)
        | Error::InvalidConfig(_)
        | Error::Dimension(_)
        | Error::Precondition(_)
        | Error::InsufficientSamples { .. }
        | Error::EmptyDataset => 2,
        _ => 3,
    }
}

fn load_file_config(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    let Some(path) = path else {
        return Ok(map);
    };
    let text = std::fs::read_to_string(path)?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "{}:{}: expected `key = value`, got '{raw}'",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Flag value, else config-file value, else default.
fn resolve<T>(flag: Option<T>, cfg: &HashMap<String, String>, key: &str, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => match cfg.get(key) {
            Some(raw) => raw.parse().map_err(|e| {
                Error::InvalidConfig(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
            None => Ok(default),
        },
    }
}

fn resolve_string(
    flag: &Option<String>,
    cfg: &HashMap<String, String>,
    key: &str,
    default: &str,
) -> String {
    flag.clone()
        .or_else(|| cfg.get(key).cloned())
        .unwrap_or_else(|| default.to_string())
}

fn parse_corrs(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Range(format!("bad correlation '{s}': {e}")))
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the resolved `key = value` lines next to an output artifact.
fn write_provenance(out: &Path, entries: &[(&str, String)], verbose: bool) -> Result<()> {
    let mut text = String::new();
    for (key, value) in entries {
        text.push_str(&format!("{key} = {value}\n"));
    }
    if verbose {
        eprint!("{text}");
    }
    let mut path = out.as_os_str().to_owned();
    path.push(".config");
    std::fs::write(PathBuf::from(path), text)?;
    Ok(())
}

fn cmd_gen_data(globals: &Globals, args: &GenDataArgs) -> Result<()> {
    let cfg = &globals.file_cfg;
    let kind = resolve_string(&args.kind, cfg, "kind", "nonlinear");
    let seed = globals.seed()?;

    let (dataset, provenance) = match kind.as_str() {
        "linear" => {
            let corrs_raw = resolve_string(&args.corrs, cfg, "corrs", "0.9,0.5,0.1");
            let corrs = parse_corrs(&corrs_raw)?;
            let n = resolve(args.n, cfg, "n", 10_000)?;
            let dx = resolve(args.dx, cfg, "dx", corrs.len())?;
            let dy = resolve(args.dy, cfg, "dy", corrs.len())?;
            let ds = gen_linear_gaussian(n, &corrs, dx, dy, seed)?;
            let prov = vec![
                ("kind", "linear".to_string()),
                ("n", n.to_string()),
                ("corrs", corrs_raw.clone()),
                ("dx", dx.to_string()),
                ("dy", dy.to_string()),
                ("seed", seed.to_string()),
            ];
            (ds, prov)
        }
        "nonlinear" => {
            let gen_cfg = NonlinearConfig {
                pieces: resolve(args.pieces, cfg, "pieces", 100)?,
                snippets_per_piece: resolve(args.snippets_per_piece, cfg, "snippets-per-piece", 50)?,
                latent_dim: resolve(args.latent_dim, cfg, "latent-dim", 4)?,
                noise: resolve(args.noise, cfg, "noise", 0.1)?,
                seed,
                ..NonlinearConfig::default()
            };
            let ds = gen_nonlinear_snippets(&gen_cfg)?;
            let prov = vec![
                ("kind", "nonlinear".to_string()),
                ("pieces", gen_cfg.pieces.to_string()),
                ("snippets-per-piece", gen_cfg.snippets_per_piece.to_string()),
                ("latent-dim", gen_cfg.latent_dim.to_string()),
                ("noise", gen_cfg.noise.to_string()),
                ("seed", seed.to_string()),
            ];
            (ds, prov)
        }
        other => return Err(Error::Range(format!("unknown generator kind '{other}'"))),
    };

    let bytes = dataset.to_bytes();
    std::fs::write(&args.out, &bytes)?;
    write_provenance(&args.out, &provenance, globals.verbose)?;
    println!("n={}", dataset.len());
    println!("sha={}", sha256_hex(&bytes));
    Ok(())
}

fn cmd_train(globals: &Globals, args: &TrainArgs) -> Result<()> {
    let cfg = &globals.file_cfg;
    let dataset = MultiViewDataset::load(&args.data)?;
    let arch = Arch::parse(&resolve_string(&args.arch, cfg, "arch", "desk"))?;
    let default_h = if arch == Arch::PaperTable1 { 32 } else { 8 };
    let train_cfg = TrainConfig {
        batch_size: resolve(args.batch_size, cfg, "batch-size", 100)?,
        lr0: resolve(args.lr0, cfg, "lr0", 0.1)?,
        momentum: resolve(args.momentum, cfg, "momentum", 0.9)?,
        halve_every: resolve(args.halve_every, cfg, "halve-every", 25)?,
        epochs: resolve(args.epochs, cfg, "epochs", 100)?,
        eps: resolve(args.eps, cfg, "eps", 1e-3)?,
        seed: globals.seed()?,
        h: resolve(args.h, cfg, "h", default_h)?,
        arch,
    };
    train_cfg.validate()?;

    let provenance = vec![
        ("data", args.data.display().to_string()),
        ("arch", train_cfg.arch.name().to_string()),
        ("h", train_cfg.h.to_string()),
        ("batch-size", train_cfg.batch_size.to_string()),
        ("lr0", train_cfg.lr0.to_string()),
        ("momentum", train_cfg.momentum.to_string()),
        ("halve-every", train_cfg.halve_every.to_string()),
        ("epochs", train_cfg.epochs.to_string()),
        ("eps", train_cfg.eps.to_string()),
        ("seed", train_cfg.seed.to_string()),
    ];

    let ckpt = train_with_logger(&dataset, &train_cfg, |stats| {
        println!(
            "epoch={} loss={:.6} val_corr={:.6} lr={}",
            stats.epoch, stats.mean_loss, stats.val_corr, stats.lr
        );
    })?;
    ckpt.save(&args.out)?;
    write_provenance(&args.out, &provenance, globals.verbose)?;
    Ok(())
}

fn cmd_index(globals: &Globals, args: &IndexArgs) -> Result<()> {
    let cfg = &globals.file_cfg;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let dataset = MultiViewDataset::load(&args.data)?;
    let split = Split::parse(&resolve_string(&args.split, cfg, "split", "test"))?;
    let modality = Modality::parse(&args.modality)?;
    let limit = match args.limit {
        Some(l) => Some(l),
        None => cfg
            .get("limit")
            .map(|raw| {
                raw.parse::<usize>().map_err(|e| {
                    Error::InvalidConfig(format!("config key 'limit': cannot parse '{raw}': {e}"))
                })
            })
            .transpose()?,
    };

    let index = build_index(&ckpt, &dataset, split, modality, limit)?;
    let bytes = index.to_bytes();
    std::fs::write(&args.out, &bytes)?;
    let provenance = vec![
        ("ckpt", args.ckpt.display().to_string()),
        ("data", args.data.display().to_string()),
        ("split", split.name().to_string()),
        ("modality", modality.name().to_string()),
        ("limit", limit.map_or("none".to_string(), |l| l.to_string())),
    ];
    write_provenance(&args.out, &provenance, globals.verbose)?;
    println!("m={}", index.len());
    println!("sha={}", sha256_hex(&bytes));
    Ok(())
}

fn cmd_query(globals: &Globals, args: &QueryArgs) -> Result<()> {
    let cfg = &globals.file_cfg;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let index = SnippetIndex::load(&args.index)?;
    let (shape, data) = load_sample(&args.input)?;
    let k = resolve(args.k, cfg, "k", 10)?;

    // Queries come from the modality opposite to the index.
    let query_modality = index.modality.opposite();
    let encoder = match query_modality {
        Modality::Image => &ckpt.encoder_x,
        Modality::Audio => &ckpt.encoder_y,
    };
    let expect = encoder.input_shape();
    if InputShape::from_dims(&shape)? != expect {
        return Err(Error::Dimension(format!(
            "query sample shape {shape:?} does not match the {} encoder input {:?}",
            query_modality.name(),
            expect.dims()
        )));
    }

    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(&shape);
    let tensor = Tensor::from_vec(&batch_shape, data)?;
    let features = encoder.forward_eval(&tensor)?;
    let projected = match query_modality {
        Modality::Image => ckpt.cca.project_x(&features)?,
        Modality::Audio => ckpt.cca.project_y(&features)?,
    };

    let result = query_with_target(&index, 0, projected.row(0), k, None)?;
    for (rank, (snippet_id, distance)) in result.ranked.iter().enumerate() {
        let rec = &index.records[*snippet_id as usize];
        println!(
            "{} {} {} {} {:.6}",
            rank + 1,
            rec.snippet_id,
            rec.piece_id,
            rec.position,
            distance
        );
    }
    if globals.verbose {
        eprintln!("queried {} candidates, modality {}", index.len(), index.modality.name());
    }
    Ok(())
}

fn cmd_evaluate(globals: &Globals, args: &EvaluateArgs) -> Result<()> {
    let cfg = &globals.file_cfg;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let dataset = MultiViewDataset::load(&args.data)?;
    let split = Split::parse(&resolve_string(&args.split, cfg, "split", "test"))?;
    let direction_raw = resolve_string(&args.direction, cfg, "direction", "both");
    let split_size = dataset.split_indices(split).len();
    let limit = resolve(args.limit, cfg, "limit", split_size)?;
    let relaxed_tol = args.relaxed_tol;

    let directions: Vec<Direction> = match direction_raw.as_str() {
        "audio-to-sheet" => vec![Direction::AudioToSheet],
        "sheet-to-audio" => vec![Direction::SheetToAudio],
        "both" => vec![Direction::AudioToSheet, Direction::SheetToAudio],
        other => return Err(Error::Range(format!("unknown direction '{other}'"))),
    };

    for direction in directions {
        let report = evaluate_retrieval(&ckpt, &dataset, split, direction, limit, relaxed_tol)?;
        if report.clipped {
            eprintln!(
                "warning: limit {limit} exceeds {} split size {split_size}; clipped",
                split.name()
            );
        }
        println!("{}", report.to_line());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 5\nlr0 = 0.25 # inline\n\n").unwrap();
        let cfg = load_file_config(Some(&path)).unwrap();
        assert_eq!(cfg.get("epochs").unwrap(), "5");
        assert_eq!(cfg.get("lr0").unwrap(), "0.25");

        std::fs::write(&path, "not a pair\n").unwrap();
        assert!(matches!(
            load_file_config(Some(&path)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn flag_overrides_file_overrides_default() {
        let mut cfg = HashMap::new();
        cfg.insert("epochs".to_string(), "7".to_string());
        assert_eq!(resolve(Some(3usize), &cfg, "epochs", 100).unwrap(), 3);
        assert_eq!(resolve(None::<usize>, &cfg, "epochs", 100).unwrap(), 7);
        assert_eq!(resolve(None::<usize>, &cfg, "missing", 100).unwrap(), 100);
        cfg.insert("bad".to_string(), "x".to_string());
        assert!(resolve(None::<usize>, &cfg, "bad", 1).is_err());
    }

    #[test]
    fn corrs_parsing() {
        assert_eq!(parse_corrs("0.9, 0.5,0.1").unwrap(), vec![0.9, 0.5, 0.1]);
        assert!(parse_corrs("0.9,oops").is_err());
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Bounds("k".into())), 2);
        assert_eq!(exit_code(&Error::Range("r".into())), 2);
        assert_eq!(exit_code(&Error::EmptyDataset), 2);
        assert_eq!(exit_code(&Error::Format("corrupt".into())), 3);
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, batch: 2 }), 3);
    }

    #[test]
    fn sha_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
