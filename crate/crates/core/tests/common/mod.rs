//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xsense::anchors::{Anchor, AnchorSet, Split};
use xsense::embstore::{write_store, EmbeddingRecord, EmbeddingStore};
use xsense::evaluation::{parse_xlwsd_str, GoldKeys};
use xsense::pipeline::{AnchorData, EvalSet, RunData, LAYERS};
use xsense::sensemodel::SenseInventory;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the sign fix).
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let qr = gaussian(d, d, rng).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    v / n
}

/// Unit vectors whose pairwise cosines are all at most `max_cos`.
pub fn spread_units(n: usize, d: usize, max_cos: f64, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let v = unit(gaussian_vector(d, rng));
        if out.iter().all(|u| u.dot(&v) <= max_cos) {
            out.push(v);
        }
    }
    out
}

pub fn push(store: &mut EmbeddingStore, sentence: u64, token: u32, surface: &str, v: &DVector<f64>) {
    let id = store.count() as u64;
    store
        .push(EmbeddingRecord {
            record_id: id,
            sentence_id: sentence,
            token_index: token,
            surface: surface.into(),
            lemma: None,
            layer: -1,
            vector: v.iter().map(|&x| x as f32).collect(),
        })
        .unwrap();
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub senses: usize,
    pub dim: usize,
    pub sigma: f64,
    pub train_per_sense: usize,
    pub eval_per_sense: usize,
    pub train_anchors: usize,
    pub test_anchors: usize,
    /// Rotate the target language; `false` gives a self-aligned pair.
    pub rotate: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            senses: 5,
            dim: 16,
            sigma: 0.05,
            train_per_sense: 40,
            eval_per_sense: 20,
            train_anchors: 400,
            test_anchors: 100,
            rotate: true,
            seed: 7,
        }
    }
}

/// A corpus of one-instance sentences (`<wf>` filler, then the instance) in text form.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub store: EmbeddingStore,
    pub xml: String,
    pub gold: String,
}

impl SynthCorpus {
    pub fn parsed(&self) -> EvalSet {
        EvalSet {
            store: self.store.clone(),
            corpus: parse_xlwsd_str(&self.xml, GoldKeys::parse(&self.gold).unwrap()).unwrap(),
        }
    }
}

/// A zero-shot task: senses are Gaussian clusters in the source space; the target
/// language sees the same clusters through an orthogonal transform `rotation`.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub spec: SynthSpec,
    pub senses: Vec<String>,
    pub centers: Vec<DVector<f64>>,
    /// Target vectors are `rotation · source + noise`; the ideal map is its transpose.
    pub rotation: DMatrix<f64>,
    pub source: SynthCorpus,
    pub dev: SynthCorpus,
    pub test: SynthCorpus,
    pub inventory: String,
    pub anchors: AnchorSet,
    pub anchor_source: EmbeddingStore,
    pub anchor_target: EmbeddingStore,
}

fn corpus(
    prefix: &str,
    language: &str,
    per_sense: usize,
    senses: &[String],
    make: &mut dyn FnMut(usize) -> DVector<f64>,
    filler: &mut dyn FnMut() -> DVector<f64>,
    dim: usize,
) -> SynthCorpus {
    let mut store = EmbeddingStore::new(dim, language, "synthetic");
    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<corpus lang=\"xx\">\n<text id=\"d000\">\n");
    let mut gold = String::new();
    let mut sentence = 0u64;
    for _ in 0..per_sense {
        for (s, sense) in senses.iter().enumerate() {
            let id = format!("{prefix}.s{sentence:04}.t000");
            writeln!(
                xml,
                "<sentence id=\"{prefix}.s{sentence:04}\">\n<wf lemma=\"the\" pos=\"DET\">the</wf>\n<instance id=\"{id}\" lemma=\"key\" pos=\"NOUN\">key</instance>\n</sentence>"
            )
            .unwrap();
            writeln!(gold, "{id} {sense}").unwrap();
            push(&mut store, sentence, 0, "the", &filler());
            push(&mut store, sentence, 1, "key", &make(s));
            sentence += 1;
        }
    }
    xml.push_str("</text>\n</corpus>\n");
    SynthCorpus { store, xml, gold }
}

pub fn synthetic(spec: SynthSpec) -> Synthetic {
    let mut r = rng(spec.seed);
    let d = spec.dim;
    let senses: Vec<String> = (0..spec.senses).map(|s| format!("bn:{:08}n", s + 1)).collect();
    let centers = spread_units(spec.senses, d, 0.3, &mut r);
    let rotation = if spec.rotate {
        random_orthogonal(d, &mut r)
    } else {
        DMatrix::identity(d, d)
    };
    let sigma = spec.sigma;

    let mut noise = {
        let mut nr = rng(spec.seed.wrapping_add(1));
        move || gaussian_vector(d, &mut nr) * sigma
    };
    let mut fr = rng(spec.seed.wrapping_add(2));
    let mut filler = move || unit(gaussian_vector(d, &mut fr));

    let source = {
        let mut make = |s: usize| &centers[s] + noise();
        corpus("src", "en", spec.train_per_sense, &senses, &mut make, &mut filler, d)
    };
    let mut target_make = |s: usize| &rotation * &centers[s] + noise();
    let dev = corpus("dev", "xx", spec.eval_per_sense, &senses, &mut target_make, &mut filler, d);
    let test = corpus("tst", "xx", spec.eval_per_sense, &senses, &mut target_make, &mut filler, d);

    let mut anchor_source = EmbeddingStore::new(d, "en", "synthetic");
    let mut anchor_target = EmbeddingStore::new(d, "xx", "synthetic");
    let mut anchors = Vec::new();
    let mut split = Vec::new();
    let total = spec.train_anchors + spec.test_anchors;
    let mut ar = rng(spec.seed.wrapping_add(3));
    for i in 0..total {
        let y = unit(gaussian_vector(d, &mut ar));
        let x = if spec.rotate {
            &rotation * &y + gaussian_vector(d, &mut ar) * sigma
        } else {
            y.clone()
        };
        push(&mut anchor_source, i as u64, 0, "w", &y);
        push(&mut anchor_target, i as u64, 0, "w", &x);
        anchors.push(Anchor {
            pair_id: i as u64,
            src_index: 0,
            tgt_index: 0,
        });
        split.push(if i < spec.train_anchors { Split::Train } else { Split::Test });
    }
    let inventory = format!("key#n\t{}\n", senses.join("\t"));
    Synthetic {
        spec,
        senses,
        centers,
        rotation,
        source,
        dev,
        test,
        inventory,
        anchors: AnchorSet { anchors, split },
        anchor_source,
        anchor_target,
    }
}

impl Synthetic {
    pub fn inventory(&self) -> SenseInventory {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inv.txt");
        std::fs::write(&p, &self.inventory).unwrap();
        SenseInventory::read_tsv(&p).unwrap()
    }

    pub fn run_data(&self) -> RunData {
        let source = self.source.parsed();
        RunData {
            source_store: source.store,
            source_corpus: source.corpus,
            dictionary_store: None,
            dictionary: None,
            map: None,
            anchors: Some(AnchorData {
                set: self.anchors.clone(),
                source: self.anchor_source.clone(),
                target: self.anchor_target.clone(),
            }),
            inventory: self.inventory(),
            dev: Some(self.dev.parsed()),
            test: self.test.parsed(),
        }
    }

    /// Writes every artifact into `dir` (stores copied for each of the last four layers) and returns the `[paths]` table of a run config.
    pub fn write_files(&self, dir: &Path) -> String {
        let w = |name: &str, text: &str| std::fs::write(dir.join(name), text).unwrap();
        for l in LAYERS {
            write_store(&self.source.store, dir.join(format!("src.L{l}.cemb"))).unwrap();
            write_store(&self.dev.store, dir.join(format!("dev.L{l}.cemb"))).unwrap();
            write_store(&self.test.store, dir.join(format!("test.L{l}.cemb"))).unwrap();
            write_store(&self.anchor_source, dir.join(format!("para.src.L{l}.cemb"))).unwrap();
            write_store(&self.anchor_target, dir.join(format!("para.tgt.L{l}.cemb"))).unwrap();
        }
        w("src.xml", &self.source.xml);
        w("src.gold.txt", &self.source.gold);
        for (name, c) in [("dev", &self.dev), ("test", &self.test)] {
            w(&format!("{name}.xml"), &c.xml);
            w(&format!("{name}.gold.txt"), &c.gold);
        }
        w("inventory.txt", &self.inventory);
        self.anchors.write_tsv(dir.join("anchors.tsv")).unwrap();
        r#"[paths]
source_store = "src.L{layer}.cemb"
source_corpus = "src.xml"
source_gold = "src.gold.txt"
anchors = "anchors.tsv"
anchor_source_store = "para.src.L{layer}.cemb"
anchor_target_store = "para.tgt.L{layer}.cemb"
inventory = "inventory.txt"
dev_store = "dev.L{layer}.cemb"
dev_corpus = "dev.xml"
dev_gold = "dev.gold.txt"
test_store = "test.L{layer}.cemb"
test_corpus = "test.xml"
test_gold = "test.gold.txt"
"#
        .to_string()
    }
}

/// Planted 2-sparse data: `n` rows, each a nonnegative mix of two of the `k` unit atoms.
pub fn planted_sparse(n: usize, d: usize, k: usize, noise: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let atoms_v = spread_units(k, d, 0.5, &mut r);
    let atoms = DMatrix::from_fn(d, k, |i, j| atoms_v[j][i]);
    let mut data = DMatrix::zeros(n, d);
    for row in 0..n {
        let a = r.random_range(0..k);
        let mut b = r.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        let ca: f64 = r.random_range(0.5..1.5);
        let cb: f64 = r.random_range(0.5..1.5);
        let v = atoms.column(a) * ca + atoms.column(b) * cb + gaussian_vector(d, &mut r) * noise;
        data.row_mut(row).copy_from(&v.transpose());
    }
    (atoms, data)
}

/// `½‖y − Dα‖² + λ‖α‖₁` evaluated directly.
pub fn lasso_value(y: &DVector<f64>, d: &DMatrix<f64>, lambda: f64, alpha: &[f64]) -> f64 {
    let a = DVector::from_column_slice(alpha);
    0.5 * (y - d * &a).norm_squared() + lambda * alpha.iter().sum::<f64>()
}

/// Brute-force nonnegative lasso minimum over `[0, 2]^k`: a 0.04 grid, then a 0.004 grid
/// over ±0.08 around the best point, then a 0.001 grid over ±0.008.
pub fn lasso_grid_oracle(y: &DVector<f64>, d: &DMatrix<f64>, lambda: f64) -> (Vec<f64>, f64) {
    let k = d.ncols();
    let mut center = vec![1.0; k];
    let mut radius: f64 = 1.0;
    let mut step: f64 = 0.04;
    let mut best = (vec![0.0; k], lasso_value(y, d, lambda, &vec![0.0; k]));
    for _ in 0..3 {
        let axes: Vec<Vec<f64>> = center
            .iter()
            .map(|&c| {
                let lo = (c - radius).max(0.0);
                let hi = (c + radius).min(2.0);
                let mut v: Vec<f64> = Vec::new();
                // Anchor the grid at 0 so the boundary is represented exactly.
                let mut t = (lo / step).floor() * step;
                while t <= hi + 1e-12 {
                    if t >= lo - 1e-12 {
                        v.push(t.max(0.0));
                    }
                    t += step;
                }
                v
            })
            .collect();
        let mut idx = vec![0usize; k];
        let mut point = vec![0.0; k];
        loop {
            for j in 0..k {
                point[j] = axes[j][idx[j]];
            }
            let f = lasso_value(y, d, lambda, &point);
            if f < best.1 {
                best = (point.clone(), f);
            }
            let mut j = 0;
            while j < k {
                idx[j] += 1;
                if idx[j] < axes[j].len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == k {
                break;
            }
        }
        center = best.0.clone();
        radius = 2.0 * step;
        step /= 10.0;
    }
    best
}

/// Exact nonnegative lasso minimum by enumerating supports: on support `S` the stationary
/// point solves `G_SS α_S = D_Sᵀ y − λ 1`; feasible candidates are compared by objective.
pub fn lasso_support_oracle(y: &DVector<f64>, d: &DMatrix<f64>, lambda: f64) -> (Vec<f64>, f64) {
    let k = d.ncols();
    let mut best = (vec![0.0; k], lasso_value(y, d, lambda, &vec![0.0; k]));
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let ds = d.select_columns(&support);
        let g = ds.transpose() * &ds;
        let rhs = ds.transpose() * y - DVector::from_element(support.len(), lambda);
        let Some(sol) = g.lu().solve(&rhs) else { continue };
        if sol.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut alpha = vec![0.0; k];
        for (i, &j) in support.iter().enumerate() {
            alpha[j] = sol[i];
        }
        let f = lasso_value(y, d, lambda, &alpha);
        if f < best.1 {
            best = (alpha, f);
        }
    }
    best
}

/// Largest violation of the nonnegative lasso optimality conditions.
pub fn kkt_residual(y: &DVector<f64>, d: &DMatrix<f64>, lambda: f64, alpha: &[f64]) -> f64 {
    let a = DVector::from_column_slice(alpha);
    let g = d.transpose() * (y - d * &a);
    (0..alpha.len())
        .map(|j| {
            if alpha[j] > 0.0 {
                (g[j] - lambda).abs()
            } else {
                (g[j] - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// A random lasso instance with `d, k ≤ 3`, atom norms in `[0.3, 1]`, `λ ∈ [0.02, 0.2]` and
/// `‖y‖ ≤ √(4λ)`, which keeps the minimizer inside `[0, 2]^k`.
pub fn lasso_instance(rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>, f64) {
    let d = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let lambda: f64 = rng.random_range(0.02..0.2);
    let mut atoms = gaussian(d, k, rng);
    for mut c in atoms.column_iter_mut() {
        let scale: f64 = rng.random_range(0.3..1.0);
        let n = c.norm();
        c *= scale / n;
    }
    let y = unit(gaussian_vector(d, rng)) * rng.random_range(0.0..(4.0 * lambda).sqrt());
    (y, atoms, lambda)
}

/// Planted atoms whose best cosine against any learned atom reaches `threshold`.
pub fn matched_atoms(planted: &DMatrix<f64>, learned: &DMatrix<f64>, threshold: f64) -> usize {
    planted
        .column_iter()
        .filter(|p| {
            learned
                .column_iter()
                .any(|l| l.dot(p) / (l.norm() * p.norm()).max(1e-300) >= threshold)
        })
        .count()
}
