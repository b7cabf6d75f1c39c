//! Nonnegative sparse coding against a dictionary with norm-capped atoms.
//!
//! Codes solve `min_{α ≥ 0} ½‖y − Dα‖² + λ‖α‖₁`; dictionaries are learned by alternating
//! such codes with block-coordinate atom updates from accumulated sufficient statistics
//! `A = Σ ααᵀ`, `B = Σ yαᵀ`, each updated atom being projected back onto the unit ball.

use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::alignment::{apply_map, LinearMap};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::embstore::EmbeddingStore;
use crate::error::{Error, Result};

pub const DICT_MAGIC: &[u8; 4] = b"XDCT";
pub const CODES_MAGIC: &[u8; 4] = b"XSPC";

/// Slack on the unit column-norm constraint.
pub const NORM_SLACK: f64 = 1e-9;

pub const DEFAULT_LAMBDA: f64 = 0.05;
/// Forgetting exponent: after `t` minibatches the statistics are scaled by `(1 − 1/t)^ρ`
/// before the next batch is added, so stale codes from early dictionaries fade quickly.
pub const FORGET_RHO: f64 = 16.0;
pub const DEFAULT_ATOMS: usize = 3000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
    lambda: f64,
}

impl Dictionary {
    pub fn new(atoms: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!("lambda = {lambda}")));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary atoms".into()));
        }
        for (j, col) in atoms.column_iter().enumerate() {
            let n = col.norm();
            if n > 1.0 + NORM_SLACK {
                return Err(Error::InvalidArgument(format!(
                    "atom {j} has norm {n} > 1"
                )));
            }
        }
        Ok(Dictionary { atoms, lambda })
    }

    /// `d × k`.
    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn k(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn max_column_norm(&self) -> f64 {
        self.atoms
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DICT_MAGIC);
        w.u32(self.dim() as u32);
        w.u32(self.k() as u32);
        w.f64(self.lambda);
        // nalgebra storage is column-major already.
        for &v in self.atoms.as_slice() {
            w.f64(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dict");
        r.magic(DICT_MAGIC)?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let lambda = r.f64()?;
        let mut data = Vec::with_capacity(d * k);
        for _ in 0..d * k {
            data.push(r.f64()?);
        }
        r.finish()?;
        Dictionary::new(DMatrix::from_vec(d, k, data), lambda)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Nonnegative coefficients stored sparsely, indices ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCode {
    indices: Vec<u32>,
    values: Vec<f64>,
    k: usize,
}

impl SparseCode {
    pub fn empty(k: usize) -> Self {
        SparseCode {
            indices: Vec::new(),
            values: Vec::new(),
            k,
        }
    }

    /// Keeps the strictly positive entries.
    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, &v)| (i as u32, v))
            .unzip();
        SparseCode {
            indices,
            values,
            k: dense.len(),
        }
    }

    pub fn from_parts(k: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::lengths(indices.len(), values.len(), "code indices vs values"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.iter().any(|&i| i as usize >= k) {
            return Err(Error::InvalidArgument(
                "code indices must be ascending and below k".into(),
            ));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "code values must be positive and finite".into(),
            ));
        }
        Ok(SparseCode { indices, values, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn write_codes(codes: &[SparseCode], k: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(CODES_MAGIC);
    w.u32(k as u32);
    w.u64(codes.len() as u64);
    for c in codes {
        if c.k != k {
            return Err(Error::dims(k, c.k, "code width"));
        }
        w.u32(c.nnz() as u32);
        for (i, v) in c.iter() {
            w.u32(i as u32);
            w.f64(v);
        }
    }
    write_file(path.as_ref(), &w.into_inner())
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<Vec<SparseCode>> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Reader::new(&bytes, "spc");
    r.magic(CODES_MAGIC)?;
    let k = r.u32()? as usize;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let nnz = r.u32()? as usize;
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            indices.push(r.u32()?);
            values.push(r.f64()?);
        }
        out.push(SparseCode::from_parts(k, indices, values)?);
    }
    r.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Stop when no coordinate moves by more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

/// A dictionary with its Gram matrix, for coding many vectors.
pub struct SparseCoder<'a> {
    dict: &'a Dictionary,
    gram: DMatrix<f64>,
    options: LassoOptions,
}

impl<'a> SparseCoder<'a> {
    pub fn new(dict: &'a Dictionary) -> Self {
        Self::with_options(dict, LassoOptions::default())
    }

    pub fn with_options(dict: &'a Dictionary, options: LassoOptions) -> Self {
        let gram = dict.atoms.transpose() * &dict.atoms;
        SparseCoder {
            dict,
            gram,
            options,
        }
    }

    /// Cyclic coordinate descent with nonnegative soft-thresholding.
    pub fn encode(&self, y: DVectorView<'_, f64>) -> Result<SparseCode> {
        if y.len() != self.dict.dim() {
            return Err(Error::dims(self.dict.dim(), y.len(), "vector vs dictionary"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector to encode".into()));
        }
        let k = self.dict.k();
        let lambda = self.dict.lambda;
        // grad holds Dᵀy − Gα.
        let mut grad: Vec<f64> = (self.dict.atoms.transpose() * y).iter().copied().collect();
        let mut alpha = vec![0.0; k];
        for _ in 0..self.options.max_sweeps {
            let mut max_change = 0.0f64;
            for j in 0..k {
                let gjj = self.gram[(j, j)];
                if gjj <= 0.0 {
                    continue;
                }
                let updated = (alpha[j] + (grad[j] - lambda) / gjj).max(0.0);
                let delta = updated - alpha[j];
                if delta != 0.0 {
                    alpha[j] = updated;
                    for (g, &gram_lj) in grad.iter_mut().zip(self.gram.column(j).iter()) {
                        *g -= delta * gram_lj;
                    }
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < self.options.tol {
                break;
            }
        }
        Ok(SparseCode::from_dense(&alpha))
    }

    /// Codes for every row of `rows`, in order.
    pub fn encode_rows(&self, rows: &DMatrix<f64>) -> Result<Vec<SparseCode>> {
        if rows.ncols() != self.dict.dim() {
            return Err(Error::dims(self.dict.dim(), rows.ncols(), "row dim vs dictionary"));
        }
        (0..rows.nrows())
            .into_par_iter()
            .map(|i| {
                let row: DVector<f64> = rows.row(i).transpose();
                self.encode(row.as_view())
            })
            .collect()
    }
}

/// Nonnegative lasso code of a single vector.
pub fn lasso_nn(y: &DVector<f64>, dict: &Dictionary) -> Result<SparseCode> {
    SparseCoder::new(dict).encode(y.as_view())
}

/// `½‖y − Dα‖² + λ‖α‖₁`.
pub fn objective(y: DVectorView<'_, f64>, dict: &Dictionary, code: &SparseCode) -> f64 {
    let mut residual: DVector<f64> = y.into_owned();
    for (j, v) in code.iter() {
        residual.axpy(-v, &dict.atoms.column(j), 1.0);
    }
    0.5 * residual.norm_squared() + dict.lambda * code.l1()
}

/// Sum of per-row objectives.
pub fn total_objective(rows: &DMatrix<f64>, dict: &Dictionary, codes: &[SparseCode]) -> f64 {
    (0..rows.nrows())
        .into_par_iter()
        .map(|i| {
            let row: DVector<f64> = rows.row(i).transpose();
            objective(row.as_view(), dict, &codes[i])
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

/// Codes for every record of `store`, optionally after mapping it into the dictionary's space.
pub fn encode_store(
    store: &EmbeddingStore,
    dict: &Dictionary,
    map: Option<&LinearMap>,
) -> Result<Vec<SparseCode>> {
    let mut rows = store.matrix();
    if let Some(map) = map {
        if map.source_dim() != dict.dim() {
            return Err(Error::dims(dict.dim(), map.source_dim(), "map output vs dictionary"));
        }
        rows = apply_map(map, &rows)?;
    } else if store.dim() != dict.dim() {
        return Err(Error::dims(dict.dim(), store.dim(), "store vs dictionary"));
    }
    SparseCoder::new(dict).encode_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictionaryParams {
    pub k: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DictionaryParams {
    fn default() -> Self {
        DictionaryParams {
            k: DEFAULT_ATOMS,
            lambda: DEFAULT_LAMBDA,
            epochs: 10,
            batch: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// Full-data objective at the end of the epoch.
    pub objective: f64,
    /// The online pass did not decrease the objective and the batch update was used instead.
    pub fell_back: bool,
    pub reseeded: usize,
}

/// Epoch-by-epoch dictionary learning over the rows of a data matrix.
///
/// Each epoch runs the online minibatch pass over shuffled data, with statistics decayed
/// by the [`FORGET_RHO`] schedule. If the resulting
/// full-data objective is higher than at the start of the epoch, the epoch is redone as a
/// batch block-coordinate update from the starting dictionary and its codes, which cannot
/// increase the objective. Atoms unused by every sample at the end of an epoch are
/// reseeded from the worst-reconstructed samples.
pub struct DictionaryLearner<'a> {
    data: &'a DMatrix<f64>,
    params: DictionaryParams,
    rng: ChaCha8Rng,
    dict: Dictionary,
    stat_a: DMatrix<f64>,
    stat_b: DMatrix<f64>,
    codes: Option<Vec<SparseCode>>,
    objective: f64,
    epoch: usize,
    /// Minibatches processed so far.
    step: usize,
}

impl<'a> DictionaryLearner<'a> {
    /// `data` holds one sample per row.
    pub fn new(data: &'a DMatrix<f64>, params: DictionaryParams) -> Result<Self> {
        if params.k == 0 {
            return Err(Error::InvalidHyperparameter("k must be at least 1".into()));
        }
        if !(params.lambda > 0.0 && params.lambda.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "lambda must be positive, got {}",
                params.lambda
            )));
        }
        if params.batch == 0 {
            return Err(Error::InvalidHyperparameter("batch must be at least 1".into()));
        }
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("no samples to learn from".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary training data".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let atoms = initial_atoms(data, params.k, &mut rng);
        let dict = Dictionary::new(atoms, params.lambda)?;
        let (d, k) = (data.ncols(), params.k);
        Ok(DictionaryLearner {
            data,
            params,
            rng,
            dict,
            stat_a: DMatrix::zeros(k, k),
            stat_b: DMatrix::zeros(d, k),
            codes: None,
            objective: f64::NAN,
            epoch: 0,
            step: 0,
        })
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn into_dictionary(self) -> Dictionary {
        self.dict
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Full-data objective of the current dictionary (codes recomputed on first call).
    pub fn objective(&mut self) -> Result<f64> {
        self.ensure_codes()?;
        Ok(self.objective)
    }

    fn ensure_codes(&mut self) -> Result<()> {
        if self.codes.is_none() {
            let codes = SparseCoder::new(&self.dict).encode_rows(self.data)?;
            self.objective = total_objective(self.data, &self.dict, &codes);
            self.codes = Some(codes);
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        self.ensure_codes()?;
        let start_dict = self.dict.clone();
        let start_codes = self.codes.take().expect("codes computed");
        let start_objective = self.objective;
        let n = self.data.nrows();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        for batch in order.chunks(self.params.batch) {
            self.step += 1;
            let beta = (1.0 - 1.0 / self.step as f64).powf(FORGET_RHO);
            let rows = DMatrix::from_fn(batch.len(), self.data.ncols(), |r, c| {
                self.data[(batch[r], c)]
            });
            let codes = SparseCoder::new(&self.dict).encode_rows(&rows)?;
            self.stat_a *= beta;
            self.stat_b *= beta;
            accumulate(&mut self.stat_a, &mut self.stat_b, &rows, &codes);
            update_atoms(&mut self.dict.atoms, &self.stat_a, &self.stat_b, 1);
        }
        let mut codes = SparseCoder::new(&self.dict).encode_rows(self.data)?;
        let mut objective = total_objective(self.data, &self.dict, &codes);
        let fell_back = objective > start_objective;
        if fell_back {
            self.dict = start_dict;
            let k = self.dict.k();
            let mut a = DMatrix::zeros(k, k);
            let mut b = DMatrix::zeros(self.data.ncols(), k);
            accumulate(&mut a, &mut b, self.data, &start_codes);
            update_atoms(&mut self.dict.atoms, &a, &b, 5);
            codes = SparseCoder::new(&self.dict).encode_rows(self.data)?;
            objective = total_objective(self.data, &self.dict, &codes);
            self.stat_a = a;
            self.stat_b = b;
        }
        self.epoch += 1;
        let reseeded = if self.epoch < self.params.epochs {
            self.reseed_dead_atoms(&codes)
        } else {
            0
        };
        debug_assert!(self.dict.max_column_norm() <= 1.0 + NORM_SLACK);
        self.codes = Some(codes);
        self.objective = objective;
        Ok(EpochReport {
            objective,
            fell_back,
            reseeded,
        })
    }

    /// Replaces atoms no sample uses with the worst-reconstructed samples. Codes stay valid
    /// because the replaced coordinates are zero everywhere.
    fn reseed_dead_atoms(&mut self, codes: &[SparseCode]) -> usize {
        let k = self.dict.k();
        let mut used = vec![false; k];
        for c in codes {
            for &i in c.indices() {
                used[i as usize] = true;
            }
        }
        let dead: Vec<usize> = (0..k).filter(|&j| !used[j]).collect();
        if dead.is_empty() {
            return 0;
        }
        let mut errors: Vec<(usize, f64)> = (0..self.data.nrows())
            .map(|i| {
                let row: DVector<f64> = self.data.row(i).transpose();
                let mut residual = row;
                for (j, v) in codes[i].iter() {
                    residual.axpy(-v, &self.dict.atoms.column(j), 1.0);
                }
                (i, residual.norm_squared())
            })
            .collect();
        errors.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut reseeded = 0;
        for (&j, &(i, _)) in dead.iter().zip(&errors) {
            let sample = self.data.row(i).transpose();
            let norm = sample.norm();
            if norm == 0.0 {
                continue;
            }
            self.dict.atoms.set_column(j, &(sample / norm));
            self.stat_a.row_mut(j).fill(0.0);
            self.stat_a.column_mut(j).fill(0.0);
            self.stat_b.column_mut(j).fill(0.0);
            reseeded += 1;
        }
        reseeded
    }
}

fn initial_atoms(data: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, d) = (data.nrows(), data.ncols());
    let mut atoms = DMatrix::zeros(d, k);
    let picks = index::sample(rng, n, k.min(n)).into_vec();
    for j in 0..k {
        let mut col: DVector<f64> = match picks.get(j) {
            Some(&i) => data.row(i).transpose(),
            None => DVector::zeros(d),
        };
        if col.norm() == 0.0 {
            col = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        }
        let norm = col.norm();
        atoms.set_column(j, &(col / norm));
    }
    atoms
}

fn accumulate(a: &mut DMatrix<f64>, b: &mut DMatrix<f64>, rows: &DMatrix<f64>, codes: &[SparseCode]) {
    for (i, code) in codes.iter().enumerate() {
        for (p, vp) in code.iter() {
            for (q, vq) in code.iter() {
                a[(p, q)] += vp * vq;
            }
            let mut col = b.column_mut(p);
            col.axpy(vp, &rows.row(i).transpose(), 1.0);
        }
    }
}

/// Exact block minimization over each atom in turn, followed by projection onto the unit ball.
fn update_atoms(atoms: &mut DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, sweeps: usize) {
    for _ in 0..sweeps {
        for j in 0..atoms.ncols() {
            let ajj = a[(j, j)];
            if ajj < 1e-12 {
                continue;
            }
            let da = &*atoms * a.column(j);
            let u = atoms.column(j) + (b.column(j) - da) / ajj;
            let norm = u.norm();
            atoms.set_column(j, &(u / norm.max(1.0)));
        }
    }
}

#[derive(Debug, Clone)]
pub struct DictionaryFit {
    pub dictionary: Dictionary,
    /// Full-data objective before training (if any epoch ran) and after each epoch.
    pub objective_trace: Vec<f64>,
    pub fallbacks: usize,
    pub reseeded: usize,
}

/// Learns a dictionary on the rows of `data`.
pub fn learn_dictionary_rows(data: &DMatrix<f64>, params: DictionaryParams) -> Result<DictionaryFit> {
    let mut learner = DictionaryLearner::new(data, params)?;
    let mut trace = Vec::new();
    let mut fallbacks = 0;
    let mut reseeded = 0;
    if params.epochs > 0 {
        trace.push(learner.objective()?);
    }
    for _ in 0..params.epochs {
        let report = learner.run_epoch()?;
        trace.push(report.objective);
        fallbacks += usize::from(report.fell_back);
        reseeded += report.reseeded;
        log::debug!(
            "epoch {}: objective {:.6} (fallback: {}, reseeded: {})",
            learner.epochs_done(),
            report.objective,
            report.fell_back,
            report.reseeded
        );
    }
    Ok(DictionaryFit {
        dictionary: learner.into_dictionary(),
        objective_trace: trace,
        fallbacks,
        reseeded,
    })
}

/// Learns a dictionary on every vector of `store`.
pub fn learn_dictionary(store: &EmbeddingStore, params: DictionaryParams) -> Result<DictionaryFit> {
    if store.is_empty() {
        return Err(Error::InvalidArgument("empty store".into()));
    }
    learn_dictionary_rows(&store.matrix(), params)
}
