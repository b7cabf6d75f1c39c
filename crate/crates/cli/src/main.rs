use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use xsense::alignment::{
    eval_retrieval, fit_least_squares, fit_procrustes, fit_rcsls, normalize_rows, LinearMap, MapKind,
    RcslsParams,
};
use xsense::anchors::{
    mine_anchors, read_parallel_tsv, resolve_anchors, split_anchors, AnchorSet, BilingualLexicon, Split,
};
use xsense::embstore::{read_store, EmbeddingStore, MAGIC, VERSION};
use xsense::evaluation::{
    aggregate, f_score, mcnemar, read_predictions, unpaired_t_test, ContingencyPair, GoldKeys,
};
use xsense::pipeline::{expand_grid, load_configs, run, run_grid, RunConfig};
use xsense::sparsecode::{
    encode_store, learn_dictionary, write_codes, Dictionary, DictionaryParams, DEFAULT_ATOMS, DEFAULT_LAMBDA,
};

#[derive(Parser)]
#[command(name = "xsense", version, about = "Cross-lingual embedding alignment and zero-shot WSD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embedding store utilities.
    #[command(subcommand)]
    Store(StoreCommand),
    /// Anchor mining from parallel text.
    #[command(subcommand)]
    Anchors(AnchorsCommand),
    /// Fit or evaluate a linear map between embedding spaces.
    #[command(subcommand)]
    Map(MapCommand),
    /// Dictionary learning.
    #[command(subcommand)]
    Dict(DictCommand),
    /// Sparse codes for every record of a store.
    Encode {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        /// Map applied to the vectors before coding.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction files against gold keys (repeat the flags for several test sets).
    Score {
        #[arg(long = "pred", required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long = "gold", required = true)]
        gold: Vec<PathBuf>,
    },
    /// Significance tests.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// One experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Every config in a directory, selected by dev F1.
    Grid {
        #[arg(long)]
        configs: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand one config into the layer × map-kind (× PMI variant) grid.
    GridExpand {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Print the header and the first records as JSON lines.
    Inspect {
        path: PathBuf,
        #[arg(short = 'n', long, default_value_t = 5)]
        records: usize,
    },
}

#[derive(Subcommand)]
enum AnchorsCommand {
    /// Mine mutual-translation anchors and split them into train and test.
    Mine {
        /// `pair_id \t source sentence \t target sentence` lines.
        #[arg(long)]
        parallel: PathBuf,
        /// Symmetric `source \t target` lexicon.
        #[arg(long, conflicts_with_all = ["forward", "backward"])]
        lexicon: Option<PathBuf>,
        /// Source-to-target lexicon, used with `--backward`.
        #[arg(long, requires = "backward")]
        forward: Option<PathBuf>,
        /// Target-to-source lexicon (`target \t source`).
        #[arg(long, requires = "forward")]
        backward: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        train_cap: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AnchorInputs {
    /// Anchor TSV with train/test split column.
    #[arg(long)]
    anchors: PathBuf,
    /// Store holding the anchor tokens of the space being mapped into.
    #[arg(long)]
    source: PathBuf,
    /// Store holding the anchor tokens of the space being mapped from.
    #[arg(long)]
    target: PathBuf,
}

#[derive(Subcommand)]
enum MapCommand {
    /// Fit a map from target vectors onto source vectors over the training anchors.
    Fit {
        #[arg(long, value_parser = parse_kind)]
        kind: MapKind,
        #[command(flatten)]
        inputs: AnchorInputs,
        #[arg(long, allow_hyphen_values = true)]
        src_layer: Option<i8>,
        #[arg(long, allow_hyphen_values = true)]
        tgt_layer: Option<i8>,
        /// Length-normalize anchor vectors before fitting.
        #[arg(long)]
        normalize_anchors: bool,
        #[arg(long, default_value_t = 10)]
        knn: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-neighbour retrieval accuracy over the test anchors.
    Eval {
        #[arg(long)]
        map: PathBuf,
        #[command(flatten)]
        inputs: AnchorInputs,
    },
}

#[derive(Subcommand)]
enum DictCommand {
    /// Learn a nonnegative sparse coding dictionary on a store's vectors.
    Learn {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ATOMS)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum StatsCommand {
    /// McNemar's test between two prediction files.
    Mcnemar {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Drop the continuity correction.
        #[arg(long)]
        no_continuity: bool,
    },
    /// Welch's t-test between two files of whitespace-separated numbers.
    Ttest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<MapKind, String> {
    s.parse().map_err(|e: xsense::Error| e.to_string())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn check_layer(store: &EmbeddingStore, wanted: Option<i8>, which: &str) -> Result<()> {
    if let (Some(want), Some(have)) = (wanted, store.layer()) {
        ensure!(want == have, "{which} store holds layer {have}, but layer {want} was requested");
    }
    Ok(())
}

fn load_anchor_inputs(inputs: &AnchorInputs) -> Result<(AnchorSet, EmbeddingStore, EmbeddingStore)> {
    let set = AnchorSet::read_tsv(&inputs.anchors)?;
    let source = read_store(&inputs.source)?;
    let target = read_store(&inputs.target)?;
    Ok((set, source, target))
}

fn store_inspect(path: &Path, n: usize) -> Result<()> {
    let store = read_store(path)?;
    let header = json!({
        "magic": String::from_utf8_lossy(MAGIC),
        "version": VERSION,
        "dim": store.dim(),
        "count": store.count(),
        "language": store.language(),
        "encoder_tag": store.encoder_tag(),
        "layer": store.layer(),
    });
    println!("{header}");
    for record in store.records().iter().take(n) {
        println!("{}", serde_json::to_string(record)?);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn anchors_mine(
    parallel: &Path,
    lexicon: Option<&Path>,
    forward: Option<&Path>,
    backward: Option<&Path>,
    train_cap: usize,
    test_fraction: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let lex = match (lexicon, forward, backward) {
        (Some(l), _, _) => BilingualLexicon::read_symmetric_tsv(l)?,
        (None, Some(f), Some(b)) => {
            let mut lex = BilingualLexicon::new();
            lex.read_forward_tsv(f)?;
            lex.read_backward_tsv(b)?;
            lex
        }
        _ => bail!("give either --lexicon or both --forward and --backward"),
    };
    let sentences = read_parallel_tsv(parallel)?;
    let mined = mine_anchors(&sentences, &lex);
    let (train, test) = split_anchors(&mined, train_cap, test_fraction, seed)?;
    AnchorSet::merged(&train, &test).write_tsv(out)?;
    print_json(&json!({
        "sentences": sentences.len(),
        "mined": mined.len(),
        "train": train.len(),
        "test": test.len(),
    }))
}

#[allow(clippy::too_many_arguments)]
fn map_fit(
    kind: MapKind,
    inputs: &AnchorInputs,
    src_layer: Option<i8>,
    tgt_layer: Option<i8>,
    normalize: bool,
    knn: usize,
    steps: usize,
    out: &Path,
) -> Result<()> {
    let (set, source, target) = load_anchor_inputs(inputs)?;
    check_layer(&source, src_layer, "source")?;
    check_layer(&target, tgt_layer, "target")?;
    let resolved = resolve_anchors(&set.with_split(Split::Train), &source, &target);
    ensure!(!resolved.is_empty(), "no training anchor resolved to tokens in both stores");
    let mut x = target.rows_matrix(resolved.target_positions.iter().copied());
    let mut y = source.rows_matrix(resolved.source_positions.iter().copied());
    if normalize {
        x = normalize_rows(&x);
        y = normalize_rows(&y);
    }
    let map = match kind {
        MapKind::LeastSquares => {
            let fit = fit_least_squares(&x, &y)?;
            info!("least squares effective rank {}", fit.effective_rank);
            fit.map
        }
        MapKind::Isometric => fit_procrustes(&x, &y)?,
        MapKind::Rcsls => {
            let init = fit_procrustes(&x, &y)?;
            let params = RcslsParams { knn, steps, ..RcslsParams::default() };
            let fit = fit_rcsls(&x, &y, &init, &params)?;
            info!("rcsls objective trace {:?}", fit.objective_trace);
            fit.map
        }
        MapKind::Identity => {
            ensure!(source.dim() == target.dim(), "identity map needs equal dimensions");
            LinearMap::identity(source.dim())
        }
    };
    let layers = (
        src_layer.or(source.layer()).unwrap_or(-1),
        tgt_layer.or(target.layer()).unwrap_or(-1),
    );
    let map = map.with_layers(layers.0, layers.1);
    map.write(out)?;
    print_json(&json!({
        "kind": map.kind,
        "train_anchors": resolved.len(),
        "dropped": resolved.dropped,
        "source_dim": map.source_dim(),
        "target_dim": map.target_dim(),
    }))
}

fn map_eval(map_path: &Path, inputs: &AnchorInputs) -> Result<()> {
    let map = LinearMap::read(map_path)?;
    let (set, source, target) = load_anchor_inputs(inputs)?;
    let resolved = resolve_anchors(&set.with_split(Split::Test), &source, &target);
    let x = target.rows_matrix(resolved.target_positions.iter().copied());
    let y = source.rows_matrix(resolved.source_positions.iter().copied());
    print_json(&eval_retrieval(&map, &x, &y)?)
}

fn score(predictions: &[PathBuf], gold: &[PathBuf]) -> Result<()> {
    ensure!(
        predictions.len() == gold.len(),
        "{} prediction files but {} gold files",
        predictions.len(),
        gold.len()
    );
    let mut parts = Vec::new();
    let mut scores = Vec::new();
    for (p, g) in predictions.iter().zip(gold) {
        let s = f_score(&read_predictions(p)?, &GoldKeys::read(g)?);
        parts.push(json!({ "predictions": p, "gold": g, "score": s }));
        scores.push(s);
    }
    let agg = aggregate(&scores);
    print_json(&json!({
        "parts": parts,
        "micro": agg.micro,
        "macro": { "precision": agg.macro_precision, "recall": agg.macro_recall, "f1": agg.macro_f1 },
    }))
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|w| w.parse::<f64>().with_context(|| format!("{}: not a number: {w:?}", path.display())))
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Store(StoreCommand::Inspect { path, records }) => store_inspect(&path, records),
        Command::Anchors(AnchorsCommand::Mine {
            parallel,
            lexicon,
            forward,
            backward,
            train_cap,
            test_fraction,
            seed,
            out,
        }) => anchors_mine(
            &parallel,
            lexicon.as_deref(),
            forward.as_deref(),
            backward.as_deref(),
            train_cap,
            test_fraction,
            seed,
            &out,
        ),
        Command::Map(MapCommand::Fit {
            kind,
            inputs,
            src_layer,
            tgt_layer,
            normalize_anchors,
            knn,
            steps,
            out,
        }) => map_fit(kind, &inputs, src_layer, tgt_layer, normalize_anchors, knn, steps, &out),
        Command::Map(MapCommand::Eval { map, inputs }) => map_eval(&map, &inputs),
        Command::Dict(DictCommand::Learn { store, k, lambda, epochs, batch, seed, out }) => {
            let store = read_store(&store)?;
            let fit = learn_dictionary(&store, DictionaryParams { k, lambda, epochs, batch, seed })?;
            fit.dictionary.write(&out)?;
            print_json(&json!({
                "objective_trace": fit.objective_trace,
                "fallbacks": fit.fallbacks,
                "reseeded": fit.reseeded,
            }))
        }
        Command::Encode { store, dict, map, out } => {
            let store = read_store(&store)?;
            let dict = Dictionary::read(&dict)?;
            let map = map.map(LinearMap::read).transpose()?;
            let codes = encode_store(&store, &dict, map.as_ref())?;
            write_codes(&codes, dict.k(), &out)?;
            let nnz: usize = codes.iter().map(|c| c.nnz()).sum();
            print_json(&json!({
                "records": codes.len(),
                "k": dict.k(),
                "mean_nnz": nnz as f64 / codes.len().max(1) as f64,
            }))
        }
        Command::Score { predictions, gold } => score(&predictions, &gold),
        Command::Stats(StatsCommand::Mcnemar { a, b, gold, no_continuity }) => {
            let gold = GoldKeys::read(&gold)?;
            let pair = ContingencyPair::from_predictions(&read_predictions(&a)?, &read_predictions(&b)?, &gold);
            let test = mcnemar(&pair, !no_continuity)?;
            print_json(&json!({
                "table": pair,
                "continuity": !no_continuity,
                "statistic": test.statistic,
                "p_value": test.p_value,
            }))
        }
        Command::Stats(StatsCommand::Ttest { a, b }) => {
            print_json(&unpaired_t_test(&read_numbers(&a)?, &read_numbers(&b)?)?)
        }
        Command::Run { config } => {
            let config = RunConfig::load(&config)?;
            print_json(&run(&config)?)
        }
        Command::Grid { configs, out } => {
            let configs = load_configs(&configs)?;
            info!("running {} configurations", configs.len());
            let report = run_grid(&configs)?;
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            print_json(&report)
        }
        Command::GridExpand { config, out } => {
            let base = RunConfig::load(&config)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let grid = expand_grid(&base);
            for c in &grid {
                let path = out.join(format!("{}.toml", c.name));
                std::fs::write(&path, c.to_toml_string()?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(&json!({ "written": grid.len(), "dir": out }))
        }
    }
}
