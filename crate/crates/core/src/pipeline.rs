//! End-to-end zero-shot runs and hyperparameter grids.
//!
//! A run maps target-language token vectors into the source space, builds sense
//! representations from the source-language annotated corpus, and labels target instances.
//!
//! Config files are TOML:
//!
//! ```toml
//! name = "it-sparse"
//! regime = "mono_mono"          # multi | multi_multi | multi_mono | mono_multi | mono_mono
//! track = "sparse"              # dense | sparse
//! map_kind = "isometric"        # identity | least_squares | isometric | rcsls
//! source_layer = -1             # relative layer, -4..=-1
//! target_layer = -2
//! normalized_pmi = true         # sparse track only
//! k = 3000
//! lambda = 0.05
//! seed = 0
//!
//! [paths]                       # relative to the config file; `{layer}` is substituted
//! source_store = "en.L{layer}.cemb"
//! source_corpus = "semcor.xml"
//! source_gold = "semcor.gold.txt"
//! anchors = "anchors.tsv"
//! anchor_source_store = "para.en.L{layer}.cemb"
//! anchor_target_store = "para.it.L{layer}.cemb"
//! inventory = "inventory.it.txt"
//! dev_store = "dev.it.L{layer}.cemb"
//! dev_corpus = "dev.it.xml"
//! dev_gold = "dev.it.gold.txt"
//! test_store = "test.it.L{layer}.cemb"
//! test_corpus = "test.it.xml"
//! test_gold = "test.it.gold.txt"
//! ```
//!
//! Source-side paths take `source_layer`, target-side paths (`anchor_target_store`,
//! `dev_store`, `test_store`) take `target_layer`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    eval_retrieval, fit_least_squares, fit_procrustes, fit_rcsls, normalize_rows, LinearMap,
    MapKind, RcslsParams, RetrievalReport,
};
use crate::anchors::{resolve_anchors, AnchorSet, Split};
use crate::embstore::{read_store, EmbeddingStore};
use crate::error::{Error, Result};
use crate::evaluation::{
    attach_candidates, f_score, parse_xlwsd, select_hyperparams, write_predictions, FScore,
    Predictions, WsdCorpus, WsdInstance,
};
use crate::sensemodel::{
    build_dense_bank_rows, build_phi, infer_dense, infer_sparse, DenseSenseBank, PmiOptions,
    SenseInventory, SenseMatrix,
};
use crate::sparsecode::{
    learn_dictionary_rows, Dictionary, DictionaryParams, SparseCoder, DEFAULT_ATOMS,
    DEFAULT_LAMBDA,
};

/// Relative indices of the last four encoder layers.
pub const LAYERS: [i8; 4] = [-4, -3, -2, -1];

/// Map kinds searched by the grid for learned maps.
pub const GRID_MAP_KINDS: [MapKind; 2] = [MapKind::Isometric, MapKind::Rcsls];

/// Which encoders embed the target and source sides. `multi` uses one multilingual
/// encoder for both and no learned map; the others name `target_source` encoder types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Multi,
    MultiMulti,
    MultiMono,
    MonoMulti,
    MonoMono,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Multi,
        Regime::MultiMulti,
        Regime::MultiMono,
        Regime::MonoMulti,
        Regime::MonoMono,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Multi => "multi",
            Regime::MultiMulti => "multi_multi",
            Regime::MultiMono => "multi_mono",
            Regime::MonoMulti => "mono_multi",
            Regime::MonoMono => "mono_mono",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Dense,
    Sparse,
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Track::Dense => "dense",
            Track::Sparse => "sparse",
        })
    }
}

impl FromStr for Track {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Track::Dense),
            "sparse" => Ok(Track::Sparse),
            _ => Err(Error::InvalidArgument(format!("unknown track `{s}`"))),
        }
    }
}

/// The hyperparameters a grid searches over. The derived order (source layer, target
/// layer, map kind by name, plain PMI before NPMI) breaks ties in model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridKey {
    pub source_layer: i8,
    pub target_layer: i8,
    pub map_kind: MapKind,
    pub normalized: bool,
}

impl fmt::Display for GridKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "s{}.t{}.{}{}",
            self.source_layer,
            self.target_layer,
            self.map_kind,
            if self.normalized { ".npmi" } else { "" }
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    /// Source-language annotated corpus embeddings.
    pub source_store: PathBuf,
    pub source_corpus: PathBuf,
    pub source_gold: PathBuf,
    /// Embeddings for dictionary learning; defaults to `source_store`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary_store: Option<PathBuf>,
    /// Pre-learned dictionary, used instead of learning one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<PathBuf>,
    /// Pre-fitted map, used instead of fitting one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_source_store: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_target_store: Option<PathBuf>,
    /// Target-language candidate inventory.
    pub inventory: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_store: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_gold: Option<PathBuf>,
    pub test_store: PathBuf,
    pub test_corpus: PathBuf,
    pub test_gold: PathBuf,
    /// Where predictions and the report are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_layer() -> i8 {
    -1
}
fn default_k() -> usize {
    DEFAULT_ATOMS
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_epochs() -> usize {
    DictionaryParams::default().epochs
}
fn default_batch() -> usize {
    DictionaryParams::default().batch
}
fn default_smoothing() -> f64 {
    PmiOptions::default().smoothing
}
fn default_knn() -> usize {
    RcslsParams::default().knn
}
fn default_steps() -> usize {
    RcslsParams::default().steps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub regime: Regime,
    pub track: Track,
    pub map_kind: MapKind,
    #[serde(default = "default_layer")]
    pub source_layer: i8,
    #[serde(default = "default_layer")]
    pub target_layer: i8,
    /// Sparse track only; absent means plain PMI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_pmi: Option<bool>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Length-normalize anchor vectors before fitting.
    #[serde(default)]
    pub normalize_anchors: bool,
    #[serde(default = "default_smoothing")]
    pub pmi_smoothing: f64,
    #[serde(default)]
    pub binary_cooc: bool,
    #[serde(default = "default_knn")]
    pub rcsls_knn: usize,
    #[serde(default = "default_steps")]
    pub rcsls_steps: usize,
    pub paths: RunPaths,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        config.base_dir = base_dir.into();
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut config = Self::from_toml_str(&text, base)?;
        if config.name.is_empty() {
            config.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(config)
    }

    /// TOML text with every path made absolute, so the file can live anywhere.
    pub fn to_toml_string(&self) -> Result<String> {
        let mut c = self.clone();
        c.paths = c.paths_absolute();
        toml::to_string(&c).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn key(&self) -> GridKey {
        GridKey {
            source_layer: self.source_layer,
            target_layer: self.target_layer,
            map_kind: self.map_kind,
            normalized: self.normalized_pmi.unwrap_or(false),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let contradiction = |m: String| Err(Error::ConfigContradiction(m));
        for (side, layer) in [("source", self.source_layer), ("target", self.target_layer)] {
            if !LAYERS.contains(&layer) {
                return contradiction(format!("{side}_layer {layer} outside the last four layers"));
            }
        }
        match self.regime {
            Regime::Multi => {
                if self.map_kind != MapKind::Identity {
                    return contradiction(format!("regime multi requires map_kind identity, got {}", self.map_kind));
                }
                if self.source_layer != self.target_layer {
                    return contradiction("regime multi requires source_layer = target_layer".into());
                }
            }
            _ => {
                if self.map_kind == MapKind::Identity {
                    return contradiction(format!("regime {} needs a learned map", self.regime));
                }
            }
        }
        if self.track == Track::Dense && self.normalized_pmi.is_some() {
            return contradiction("normalized_pmi is meaningless on the dense track".into());
        }
        if self.track == Track::Sparse {
            if self.k == 0 {
                return Err(Error::InvalidHyperparameter("k = 0".into()));
            }
            if !(self.lambda > 0.0 && self.lambda.is_finite()) {
                return Err(Error::InvalidHyperparameter(format!("lambda = {}", self.lambda)));
            }
        }
        Ok(())
    }

    fn resolve(&self, template: &Path, layer: i8) -> PathBuf {
        let text = template.to_string_lossy().replace("{layer}", &layer.to_string());
        let p = PathBuf::from(text);
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }

    fn absolute(&self, template: &Path) -> PathBuf {
        if template.is_absolute() {
            template.to_path_buf()
        } else {
            let base = std::path::absolute(&self.base_dir).unwrap_or_else(|_| self.base_dir.clone());
            base.join(template)
        }
    }

    fn paths_absolute(&self) -> RunPaths {
        let p = &self.paths;
        let abs = |t: &PathBuf| self.absolute(t);
        let opt = |t: &Option<PathBuf>| t.as_ref().map(abs);
        RunPaths {
            source_store: abs(&p.source_store),
            source_corpus: abs(&p.source_corpus),
            source_gold: abs(&p.source_gold),
            dictionary_store: opt(&p.dictionary_store),
            dictionary: opt(&p.dictionary),
            map: opt(&p.map),
            anchors: opt(&p.anchors),
            anchor_source_store: opt(&p.anchor_source_store),
            anchor_target_store: opt(&p.anchor_target_store),
            inventory: abs(&p.inventory),
            dev_store: opt(&p.dev_store),
            dev_corpus: opt(&p.dev_corpus),
            dev_gold: opt(&p.dev_gold),
            test_store: abs(&p.test_store),
            test_corpus: abs(&p.test_corpus),
            test_gold: abs(&p.test_gold),
            output_dir: opt(&p.output_dir),
        }
    }

    /// Paths with layers substituted and relative paths resolved.
    pub fn resolved_paths(&self) -> RunPaths {
        let p = &self.paths;
        let (s, t) = (self.source_layer, self.target_layer);
        let src = |x: &PathBuf| self.resolve(x, s);
        let tgt = |x: &PathBuf| self.resolve(x, t);
        RunPaths {
            source_store: src(&p.source_store),
            source_corpus: src(&p.source_corpus),
            source_gold: src(&p.source_gold),
            dictionary_store: p.dictionary_store.as_ref().map(src),
            dictionary: p.dictionary.as_ref().map(src),
            map: p.map.as_ref().map(src),
            anchors: p.anchors.as_ref().map(src),
            anchor_source_store: p.anchor_source_store.as_ref().map(src),
            anchor_target_store: p.anchor_target_store.as_ref().map(tgt),
            inventory: tgt(&p.inventory),
            dev_store: p.dev_store.as_ref().map(tgt),
            dev_corpus: p.dev_corpus.as_ref().map(tgt),
            dev_gold: p.dev_gold.as_ref().map(tgt),
            test_store: tgt(&p.test_store),
            test_corpus: tgt(&p.test_corpus),
            test_gold: tgt(&p.test_gold),
            output_dir: p.output_dir.as_ref().map(|x| self.resolve(x, t)),
        }
    }

    fn dictionary_params(&self) -> DictionaryParams {
        DictionaryParams {
            k: self.k,
            lambda: self.lambda,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
        }
    }

    fn rcsls_params(&self) -> RcslsParams {
        RcslsParams {
            knn: self.rcsls_knn,
            steps: self.rcsls_steps,
            ..RcslsParams::default()
        }
    }
}

/// Target-language evaluation split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub store: EmbeddingStore,
    pub corpus: WsdCorpus,
}

#[derive(Debug, Clone)]
pub struct AnchorData {
    pub set: AnchorSet,
    pub source: EmbeddingStore,
    pub target: EmbeddingStore,
}

/// Everything a run reads, already in memory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub source_store: EmbeddingStore,
    pub source_corpus: WsdCorpus,
    pub dictionary_store: Option<EmbeddingStore>,
    pub dictionary: Option<Dictionary>,
    pub map: Option<LinearMap>,
    pub anchors: Option<AnchorData>,
    pub inventory: SenseInventory,
    pub dev: Option<EvalSet>,
    pub test: EvalSet,
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::ConfigContradiction(format!("paths.{what} is required")))
}

pub fn load_data(config: &RunConfig) -> Result<RunData> {
    let p = config.resolved_paths();
    let anchors = match &p.anchors {
        Some(a) => Some(AnchorData {
            set: AnchorSet::read_tsv(a)?,
            source: read_store(require(&p.anchor_source_store, "anchor_source_store")?)?,
            target: read_store(require(&p.anchor_target_store, "anchor_target_store")?)?,
        }),
        None => None,
    };
    let dev = match (&p.dev_store, &p.dev_corpus, &p.dev_gold) {
        (None, None, None) => None,
        (Some(s), Some(c), Some(g)) => Some(EvalSet {
            store: read_store(s)?,
            corpus: parse_xlwsd(c, g)?,
        }),
        _ => {
            return Err(Error::ConfigContradiction(
                "dev_store, dev_corpus and dev_gold must be given together".into(),
            ))
        }
    };
    let dictionary = match (&p.dictionary, config.track) {
        (Some(d), Track::Sparse) => Some(Dictionary::read(d)?),
        _ => None,
    };
    let dictionary_store = match (&p.dictionary_store, &dictionary, config.track) {
        (Some(s), None, Track::Sparse) => Some(read_store(s)?),
        _ => None,
    };
    Ok(RunData {
        source_store: read_store(&p.source_store)?,
        source_corpus: parse_xlwsd(&p.source_corpus, &p.source_gold)?,
        dictionary_store,
        dictionary,
        map: p.map.as_ref().map(LinearMap::read).transpose()?,
        anchors,
        inventory: SenseInventory::read_tsv(&p.inventory)?,
        dev,
        test: EvalSet {
            store: read_store(&p.test_store)?,
            corpus: parse_xlwsd(&p.test_corpus, &p.test_gold)?,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub name: String,
    pub regime: Regime,
    pub track: Track,
    pub key: GridKey,
    /// Train anchors the map was fitted on.
    pub train_anchors: usize,
    pub retrieval: Option<RetrievalReport>,
    pub dev: Option<FScore>,
    pub test: FScore,
    #[serde(skip)]
    pub map: LinearMap,
    /// Φ of sparse-track runs.
    #[serde(skip)]
    pub sense_matrix: Option<SenseMatrix>,
    #[serde(skip)]
    pub dev_predictions: Predictions,
    #[serde(skip)]
    pub test_predictions: Predictions,
}

impl RunReport {
    pub fn dev_f1(&self) -> Option<f64> {
        self.dev.map(|s| s.f1)
    }

    pub fn test_f1(&self) -> f64 {
        self.test.f1
    }

    pub fn retrieval_accuracy(&self) -> Option<f64> {
        self.retrieval.map(|r| r.accuracy_at_1)
    }
}

/// Loads the configured files, runs, and writes predictions and the JSON report when
/// `paths.output_dir` is set.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let data = load_data(config)?;
    let report = run_with_data(config, &data)?;
    if let Some(dir) = config.resolved_paths().output_dir {
        write_outputs(&report, &dir)?;
    }
    Ok(report)
}

pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = if report.name.is_empty() { "run" } else { &report.name };
    if report.dev.is_some() {
        write_predictions(&report.dev_predictions, dir.join(format!("{stem}.dev.pred")))?;
    }
    write_predictions(&report.test_predictions, dir.join(format!("{stem}.test.pred")))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

enum SenseModel {
    Dense(DenseSenseBank),
    Sparse(Dictionary, SenseMatrix),
}

/// The in-memory core of [`run`].
pub fn run_with_data(config: &RunConfig, data: &RunData) -> Result<RunReport> {
    config.validate()?;
    let (map, train_anchors) = obtain_map(config, data)?;
    if map.source_dim() != data.source_store.dim() {
        return Err(Error::dims(data.source_store.dim(), map.source_dim(), "map output vs source store"));
    }
    let retrieval = match &data.anchors {
        Some(a) => {
            let test = a.set.with_split(Split::Test);
            if test.is_empty() {
                None
            } else {
                let r = resolve_anchors(&test, &a.source, &a.target);
                let x = a.target.rows_matrix(r.target_positions.iter().copied());
                let y = a.source.rows_matrix(r.source_positions.iter().copied());
                Some(eval_retrieval(&map, &x, &y)?)
            }
        }
        None => None,
    };
    if let Some(r) = &retrieval {
        info!("{}: retrieval accuracy@1 {:.4} over {}", config.name, r.accuracy_at_1, r.n);
    }

    let model = build_sense_model(config, data)?;
    let dev = match &data.dev {
        Some(set) => Some(evaluate(set, &data.inventory, &map, &model)?),
        None => None,
    };
    let test = evaluate(&data.test, &data.inventory, &map, &model)?;
    Ok(RunReport {
        name: config.name.clone(),
        regime: config.regime,
        track: config.track,
        key: config.key(),
        train_anchors,
        retrieval,
        dev: dev.as_ref().map(|d| d.0),
        test: test.0,
        map,
        sense_matrix: match model {
            SenseModel::Sparse(_, phi) => Some(phi),
            SenseModel::Dense(_) => None,
        },
        dev_predictions: dev.map(|d| d.1).unwrap_or_default(),
        test_predictions: test.1,
    })
}

fn obtain_map(config: &RunConfig, data: &RunData) -> Result<(LinearMap, usize)> {
    if let Some(map) = &data.map {
        if map.kind != config.map_kind {
            return Err(Error::ConfigContradiction(format!(
                "map file is {}, config asks for {}",
                map.kind, config.map_kind
            )));
        }
        map.validate()?;
        return Ok((map.clone().with_layers(config.source_layer, config.target_layer), 0));
    }
    if config.map_kind == MapKind::Identity {
        let d = data.test.store.dim();
        return Ok((LinearMap::identity(d).with_layers(config.source_layer, config.target_layer), 0));
    }
    let a = data.anchors.as_ref().ok_or_else(|| {
        Error::ConfigContradiction(format!("map kind {} needs anchors", config.map_kind))
    })?;
    let r = resolve_anchors(&a.set.with_split(Split::Train), &a.source, &a.target);
    if r.is_empty() {
        return Err(Error::InsufficientAnchors(0));
    }
    let mut x = a.target.rows_matrix(r.target_positions.iter().copied());
    let mut y = a.source.rows_matrix(r.source_positions.iter().copied());
    if config.normalize_anchors {
        x = normalize_rows(&x);
        y = normalize_rows(&y);
    }
    let map = match config.map_kind {
        MapKind::LeastSquares => fit_least_squares(&x, &y)?.map,
        MapKind::Isometric => fit_procrustes(&x, &y)?,
        MapKind::Rcsls => {
            let init = fit_procrustes(&x, &y)?;
            fit_rcsls(&x, &y, &init, &config.rcsls_params())?.map
        }
        MapKind::Identity => unreachable!("handled above"),
    };
    Ok((map.with_layers(config.source_layer, config.target_layer), r.len()))
}

/// Mean vector of the instance's tokens present in the store, or `None` if none is.
fn pool_span(
    store: &EmbeddingStore,
    positions: &HashMap<(u64, u32), usize>,
    inst: &WsdInstance,
) -> Option<DVector<f64>> {
    let mut sum = DVector::zeros(store.dim());
    let mut n = 0usize;
    for t in inst.token_indices() {
        if let Some(&p) = positions.get(&(inst.sentence_id, t)) {
            sum += store.vector_f64(p);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Pooled training rows and their gold labels, plus the senses in first-seen order.
fn training_rows(data: &RunData) -> Result<(DMatrix<f64>, Vec<Vec<String>>, SenseInventory)> {
    let store = &data.source_store;
    let positions = store.token_positions();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut inventory = SenseInventory::new();
    let mut skipped = 0usize;
    for inst in &data.source_corpus.instances {
        let Some(v) = pool_span(store, &positions, inst) else {
            skipped += 1;
            continue;
        };
        let gold = data
            .source_corpus
            .gold
            .get(&inst.instance_id)
            .ok_or_else(|| Error::MissingGold(inst.instance_id.clone()))?;
        let senses: Vec<String> = gold.iter().cloned().collect();
        for s in &senses {
            inventory.add_sense(s.clone());
        }
        rows.push(v);
        labels.push(senses);
    }
    if skipped > 0 {
        warn!("{skipped} training instances without embeddings skipped");
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no training instance has embeddings".into()));
    }
    let m = DMatrix::from_fn(rows.len(), store.dim(), |r, c| rows[r][c]);
    Ok((m, labels, inventory))
}

fn build_sense_model(config: &RunConfig, data: &RunData) -> Result<SenseModel> {
    let (rows, labels, inventory) = training_rows(data)?;
    match config.track {
        Track::Dense => Ok(SenseModel::Dense(build_dense_bank_rows(&rows, &labels, &inventory)?)),
        Track::Sparse => {
            let dictionary = match &data.dictionary {
                Some(d) => d.clone(),
                None => {
                    let source = data.dictionary_store.as_ref().unwrap_or(&data.source_store);
                    let fit = learn_dictionary_rows(&source.matrix(), config.dictionary_params())?;
                    info!(
                        "{}: dictionary objective {:?}",
                        config.name,
                        fit.objective_trace.last()
                    );
                    fit.dictionary
                }
            };
            if dictionary.dim() != rows.ncols() {
                return Err(Error::dims(rows.ncols(), dictionary.dim(), "dictionary vs source store"));
            }
            let codes = SparseCoder::new(&dictionary).encode_rows(&rows)?;
            let options = PmiOptions {
                normalized: config.normalized_pmi.unwrap_or(false),
                smoothing: config.pmi_smoothing,
                binary: config.binary_cooc,
            };
            let phi = build_phi(&codes, &labels, &inventory, options)?;
            Ok(SenseModel::Sparse(dictionary, phi))
        }
    }
}

fn evaluate(
    set: &EvalSet,
    inventory: &SenseInventory,
    map: &LinearMap,
    model: &SenseModel,
) -> Result<(FScore, Predictions)> {
    if map.target_dim() != set.store.dim() {
        return Err(Error::dims(map.target_dim(), set.store.dim(), "map input vs evaluation store"));
    }
    let mut instances = set.corpus.instances.clone();
    let missing = attach_candidates(&mut instances, inventory);
    if missing > 0 {
        warn!("{missing} evaluation instances have no inventory entry");
    }
    let positions = set.store.token_positions();
    let coder = match model {
        SenseModel::Sparse(d, _) => Some(SparseCoder::new(d)),
        SenseModel::Dense(_) => None,
    };
    let predicted: Vec<Option<(String, String)>> = instances
        .par_iter()
        .map(|inst| -> Result<Option<(String, String)>> {
            if inst.candidates.is_empty() {
                return Ok(None);
            }
            let Some(x) = pool_span(&set.store, &positions, inst) else {
                return Ok(None);
            };
            let sense = match model {
                SenseModel::Dense(bank) => infer_dense(&x, bank, Some(map), &inst.candidates)?,
                SenseModel::Sparse(_, phi) => {
                    let mapped = &map.matrix * &x;
                    let code = coder.as_ref().expect("sparse coder").encode(mapped.as_view())?;
                    infer_sparse(&code, phi, &inst.candidates)?
                }
            };
            Ok(Some((inst.instance_id.clone(), sense)))
        })
        .collect::<Result<_>>()?;
    let predictions: Predictions = predicted.into_iter().flatten().collect();
    Ok((f_score(&predictions, &set.corpus.gold), predictions))
}

/// The grid around `base`: every pair of the last four layers crossed with the learned map
/// kinds (32 configs), doubled by the PMI normalization switch on the sparse track (64).
/// Regime `multi` only pairs equal layers with the identity map.
pub fn expand_grid(base: &RunConfig) -> Vec<RunConfig> {
    let stem = if base.name.is_empty() { "run" } else { base.name.as_str() };
    let mut out = Vec::new();
    let kinds: &[MapKind] = if base.regime == Regime::Multi {
        &[MapKind::Identity]
    } else {
        &GRID_MAP_KINDS
    };
    let norms: &[Option<bool>] = match base.track {
        Track::Dense => &[None],
        Track::Sparse => &[Some(false), Some(true)],
    };
    for &s in &LAYERS {
        for &t in &LAYERS {
            if base.regime == Regime::Multi && s != t {
                continue;
            }
            for &kind in kinds {
                for &norm in norms {
                    let mut c = base.clone();
                    c.source_layer = s;
                    c.target_layer = t;
                    c.map_kind = kind;
                    c.normalized_pmi = norm;
                    c.name = format!("{stem}.{}", c.key());
                    out.push(c);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub name: String,
    pub key: GridKey,
    pub retrieval: Option<RetrievalReport>,
    pub dev_f1: f64,
    pub test_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub regime: Regime,
    pub track: Track,
    pub selected: GridKey,
    pub selected_name: String,
    pub selected_dev_f1: f64,
    pub selected_test_f1: f64,
    /// One row per config, in key order.
    pub rows: Vec<GridRow>,
}

/// Runs every config from its files, in parallel.
pub fn run_grid(configs: &[RunConfig]) -> Result<GridReport> {
    run_grid_with(configs, run)
}

/// Runs every config through `runner` and selects by dev F1.
pub fn run_grid_with<F>(configs: &[RunConfig], runner: F) -> Result<GridReport>
where
    F: Fn(&RunConfig) -> Result<RunReport> + Sync,
{
    let first = configs.first().ok_or(Error::EmptyGrid)?;
    let mut keys = BTreeSet::new();
    for c in configs {
        if c.regime != first.regime || c.track != first.track {
            return Err(Error::ConfigContradiction(
                "grid configs must share regime and track".into(),
            ));
        }
        if !keys.insert(c.key()) {
            return Err(Error::ConfigContradiction(format!("duplicate grid point {}", c.key())));
        }
        c.validate()?;
    }
    let reports: Vec<RunReport> = configs.par_iter().map(&runner).collect::<Result<_>>()?;
    let mut rows: Vec<GridRow> = reports
        .iter()
        .map(|r| {
            let dev_f1 = r.dev_f1().ok_or_else(|| {
                Error::ConfigContradiction(format!("{}: grid selection needs a dev set", r.name))
            })?;
            Ok(GridRow {
                name: r.name.clone(),
                key: r.key,
                retrieval: r.retrieval,
                dev_f1,
                test_f1: r.test_f1(),
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|r| r.key);
    let scores: BTreeMap<GridKey, f64> = rows.iter().map(|r| (r.key, r.dev_f1)).collect();
    let selected = select_hyperparams(&scores)?;
    let row = rows.iter().find(|r| r.key == selected).expect("selected key is a row");
    Ok(GridReport {
        regime: first.regime,
        track: first.track,
        selected,
        selected_name: row.name.clone(),
        selected_dev_f1: row.dev_f1,
        selected_test_f1: row.test_f1,
        rows,
    })
}

/// Loads every `*.toml` in `dir`, sorted by file name.
pub fn load_configs(dir: impl AsRef<Path>) -> Result<Vec<RunConfig>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(RunConfig::load).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(regime: Regime, track: Track, kind: MapKind) -> RunConfig {
        RunConfig::from_toml_str(
            &format!(
                r#"
name = "t"
regime = "{regime}"
track = "{track}"
map_kind = "{kind}"
[paths]
source_store = "src.L{{layer}}.cemb"
source_corpus = "src.xml"
source_gold = "src.gold"
inventory = "inv.txt"
test_store = "test.L{{layer}}.cemb"
test_corpus = "test.xml"
test_gold = "test.gold"
"#
            ),
            "/data",
        )
        .unwrap()
    }

    #[test]
    fn toml_defaults_and_layer_substitution() {
        let mut c = base(Regime::MonoMono, Track::Dense, MapKind::Isometric);
        assert_eq!((c.source_layer, c.target_layer, c.k, c.lambda), (-1, -1, 3000, 0.05));
        c.source_layer = -3;
        c.target_layer = -2;
        let p = c.resolved_paths();
        assert_eq!(p.source_store, PathBuf::from("/data/src.L-3.cemb"));
        assert_eq!(p.test_store, PathBuf::from("/data/test.L-2.cemb"));
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap(), "/elsewhere").unwrap();
        assert_eq!(again.resolved_paths(), p);
    }

    #[test]
    fn contradictions_are_rejected() {
        let c = base(Regime::Multi, Track::Dense, MapKind::Isometric);
        assert!(matches!(c.validate(), Err(Error::ConfigContradiction(_))));
        let mut c = base(Regime::Multi, Track::Dense, MapKind::Identity);
        c.validate().unwrap();
        c.target_layer = -2;
        assert!(matches!(c.validate(), Err(Error::ConfigContradiction(_))));
        let mut c = base(Regime::MonoMono, Track::Dense, MapKind::Rcsls);
        c.normalized_pmi = Some(false);
        assert!(matches!(c.validate(), Err(Error::ConfigContradiction(_))));
        let c = base(Regime::MonoMulti, Track::Sparse, MapKind::Identity);
        assert!(matches!(c.validate(), Err(Error::ConfigContradiction(_))));
        let mut c = base(Regime::MonoMono, Track::Sparse, MapKind::Isometric);
        c.source_layer = -5;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_toml_str("regime = \"multi\"\nbogus = 1", ".").is_err());
    }

    #[test]
    fn grid_sizes() {
        let dense = expand_grid(&base(Regime::MonoMono, Track::Dense, MapKind::Isometric));
        let sparse = expand_grid(&base(Regime::MultiMono, Track::Sparse, MapKind::Isometric));
        assert_eq!((dense.len(), sparse.len()), (32, 64));
        let multi = expand_grid(&base(Regime::Multi, Track::Sparse, MapKind::Identity));
        assert_eq!(multi.len(), 8);
        for c in dense.iter().chain(&sparse).chain(&multi) {
            c.validate().unwrap();
        }
        let keys: BTreeSet<GridKey> = sparse.iter().map(RunConfig::key).collect();
        assert_eq!(keys.len(), 64);
    }

    #[test]
    fn regime_and_track_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert_eq!("sparse".parse::<Track>().unwrap(), Track::Sparse);
    }
}
