//! Sense representations and WSD inference.
//!
//! Sparse track: a senses × coordinates matrix of (normalized) PMI between sense labels and
//! sparse-code coordinates; a token is labelled with the candidate maximizing `(Φα)ₛ`.
//! Dense track: per-sense centroids with cosine nearest-centroid inference.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::alignment::LinearMap;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::embstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::sparsecode::SparseCode;

pub const PHI_MAGIC: &[u8; 4] = b"XPHI";
pub const BANK_MAGIC: &[u8; 4] = b"XBNK";

/// Maps coarse tags (`NOUN`, `VERB`, `ADJ`, `ADV`) to WordNet letters; other tags are
/// lowercased as-is.
pub fn normalize_pos(pos: &str) -> String {
    match pos.to_ascii_uppercase().as_str() {
        "NOUN" | "N" => "n".into(),
        "VERB" | "V" => "v".into(),
        "ADJ" | "A" | "S" => "a".into(),
        "ADV" | "R" => "r".into(),
        _ => pos.to_lowercase(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SenseInventory {
    senses: Vec<String>,
    index: HashMap<String, usize>,
    lemma_index: HashMap<(String, String), Vec<String>>,
}

impl SenseInventory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inventory of the given senses with no lemma entries.
    pub fn from_senses<I, S>(senses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut inv = Self::new();
        for s in senses {
            inv.add_sense(s);
        }
        inv
    }

    /// Position of `sense`, inserting it if new.
    pub fn add_sense(&mut self, sense: impl Into<String>) -> usize {
        let sense = sense.into();
        if let Some(&i) = self.index.get(&sense) {
            return i;
        }
        self.index.insert(sense.clone(), self.senses.len());
        self.senses.push(sense);
        self.senses.len() - 1
    }

    /// Registers the candidate list of `(lemma, pos)`, in the order given.
    pub fn add_lemma(&mut self, lemma: &str, pos: &str, candidates: Vec<String>) -> Result<()> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        for c in &candidates {
            self.add_sense(c.clone());
        }
        self.lemma_index
            .insert((lemma.to_string(), normalize_pos(pos)), candidates);
        Ok(())
    }

    /// Candidates for `(lemma, pos)`, trying the lemma as given and then lowercased.
    pub fn candidates(&self, lemma: &str, pos: &str) -> Option<&[String]> {
        let pos = normalize_pos(pos);
        self.lemma_index
            .get(&(lemma.to_string(), pos.clone()))
            .or_else(|| self.lemma_index.get(&(lemma.to_lowercase(), pos)))
            .map(Vec::as_slice)
    }

    pub fn senses(&self) -> &[String] {
        &self.senses
    }

    pub fn position(&self, sense: &str) -> Option<usize> {
        self.index.get(sense).copied()
    }

    pub fn len(&self) -> usize {
        self.senses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senses.is_empty()
    }

    /// Reads lines `lemma#pos \t sense \t sense ...`.
    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut inv = Self::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: &str| Error::MalformedInput {
                line: n + 1,
                message: message.into(),
            };
            let mut fields = line.split('\t');
            let key = fields.next().unwrap_or_default().trim();
            let (lemma, pos) = key
                .rsplit_once('#')
                .ok_or_else(|| malformed("expected `lemma#pos` key"))?;
            let senses: Vec<String> = fields
                .flat_map(str::split_whitespace)
                .map(str::to_string)
                .collect();
            if senses.is_empty() {
                return Err(malformed("lemma without candidate senses"));
            }
            inv.add_lemma(lemma, pos, senses)?;
        }
        Ok(inv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmiOptions {
    pub normalized: bool,
    /// Additive count ε on every cell of the joint table.
    pub smoothing: f64,
    /// Count coordinate presence instead of coordinate values.
    pub binary: bool,
}

impl Default for PmiOptions {
    fn default() -> Self {
        PmiOptions {
            normalized: false,
            smoothing: 1.0,
            binary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenseMatrix {
    /// `senses × k`, rows in inventory order.
    pub phi: DMatrix<f64>,
    pub normalized: bool,
    /// Unknown when loaded from disk.
    pub smoothing: Option<f64>,
    senses: Vec<String>,
    index: HashMap<String, usize>,
}

impl SenseMatrix {
    pub fn new(phi: DMatrix<f64>, normalized: bool, senses: Vec<String>) -> Result<Self> {
        if phi.nrows() != senses.len() {
            return Err(Error::lengths(phi.nrows(), senses.len(), "Φ rows vs senses"));
        }
        let index = senses
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect::<HashMap<_, _>>();
        if index.len() != senses.len() {
            return Err(Error::InvalidArgument("duplicate sense ids in Φ".into()));
        }
        Ok(SenseMatrix {
            phi,
            normalized,
            smoothing: None,
            senses,
            index,
        })
    }

    pub fn senses(&self) -> &[String] {
        &self.senses
    }

    pub fn k(&self) -> usize {
        self.phi.ncols()
    }

    /// `(Φα)ₛ`, or `None` for a sense without a row.
    pub fn score(&self, sense: &str, code: &SparseCode) -> Option<f64> {
        let row = *self.index.get(sense)?;
        Some(code.iter().map(|(j, v)| self.phi[(row, j)] * v).sum())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PHI_MAGIC);
        w.u32(self.senses.len() as u32);
        w.u32(self.k() as u32);
        w.u8(u8::from(self.normalized));
        for r in 0..self.phi.nrows() {
            for c in 0..self.phi.ncols() {
                w.f64(self.phi[(r, c)]);
            }
        }
        for s in &self.senses {
            w.str32(s);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "phi");
        r.magic(PHI_MAGIC)?;
        let s = r.u32()? as usize;
        let k = r.u32()? as usize;
        let normalized = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::MalformedHeader(format!("phi: normalized flag {other}"))),
        };
        let mut phi = DMatrix::zeros(s, k);
        for row in 0..s {
            for col in 0..k {
                phi[(row, col)] = r.f64()?;
            }
        }
        let senses = (0..s).map(|_| r.str32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        SenseMatrix::new(phi, normalized, senses)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Accumulates the sense × coordinate co-occurrence table and converts it to (N)PMI.
///
/// Tokens with several gold senses contribute to each of their rows. Cells that received
/// no co-occurrence mass are 0 in Φ.
pub fn build_phi(
    codes: &[SparseCode],
    labels: &[Vec<String>],
    inventory: &SenseInventory,
    options: PmiOptions,
) -> Result<SenseMatrix> {
    if codes.len() != labels.len() {
        return Err(Error::lengths(codes.len(), labels.len(), "codes vs labels"));
    }
    if !(options.smoothing >= 0.0 && options.smoothing.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "smoothing = {}",
            options.smoothing
        )));
    }
    let k = codes.first().map_or(0, SparseCode::k);
    if let Some(c) = codes.iter().find(|c| c.k() != k) {
        return Err(Error::dims(k, c.k(), "code widths differ"));
    }
    let s = inventory.len();
    let mut counts = DMatrix::<f64>::zeros(s, k);
    for (code, senses) in codes.iter().zip(labels) {
        for sense in senses {
            let row = inventory
                .position(sense)
                .ok_or_else(|| Error::UnknownSense(sense.clone()))?;
            for (j, v) in code.iter() {
                counts[(row, j)] += if options.binary { 1.0 } else { v };
            }
        }
    }
    let phi = pmi_table(&counts, options.smoothing, options.normalized);
    let mut m = SenseMatrix::new(phi, options.normalized, inventory.senses().to_vec())?;
    m.smoothing = Some(options.smoothing);
    Ok(m)
}

/// (N)PMI of a nonnegative joint table after adding `smoothing` to every cell.
/// Cells whose raw mass is zero are set to 0.
pub fn pmi_table(counts: &DMatrix<f64>, smoothing: f64, normalized: bool) -> DMatrix<f64> {
    let smoothed = counts.add_scalar(smoothing);
    let total: f64 = smoothed.sum();
    let mut out = DMatrix::zeros(counts.nrows(), counts.ncols());
    if total <= 0.0 {
        return out;
    }
    let row_p: Vec<f64> = smoothed.row_iter().map(|r| r.sum() / total).collect();
    let col_p: Vec<f64> = smoothed.column_iter().map(|c| c.sum() / total).collect();
    for r in 0..counts.nrows() {
        for c in 0..counts.ncols() {
            if counts[(r, c)] <= 0.0 {
                continue;
            }
            let joint = smoothed[(r, c)] / total;
            let pmi = (joint / (row_p[r] * col_p[c])).ln();
            out[(r, c)] = if normalized {
                let h = -joint.ln();
                if h > 0.0 {
                    pmi / h
                } else {
                    // All mass in one cell: complete co-occurrence.
                    1.0
                }
            } else {
                pmi
            };
        }
    }
    out
}

/// Candidate with the largest `(Φα)ₛ`. Candidates without a Φ row are skipped; ties and
/// the all-unseen case go to the first-listed candidate.
pub fn infer_sparse(code: &SparseCode, phi: &SenseMatrix, candidates: &[String]) -> Result<String> {
    let first = candidates.first().ok_or(Error::EmptyCandidates)?;
    let mut best: Option<(&String, f64)> = None;
    for c in candidates {
        if let Some(score) = phi.score(c, code) {
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((c, score));
            }
        }
    }
    Ok(best.map_or(first, |(c, _)| c).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSenseBank {
    /// `senses × d`.
    pub centroids: DMatrix<f64>,
    pub counts: Vec<u64>,
    senses: Vec<String>,
    index: HashMap<String, usize>,
}

impl DenseSenseBank {
    pub fn new(centroids: DMatrix<f64>, counts: Vec<u64>, senses: Vec<String>) -> Result<Self> {
        if centroids.nrows() != senses.len() || counts.len() != senses.len() {
            return Err(Error::lengths(centroids.nrows(), senses.len(), "bank rows vs senses"));
        }
        let index = senses
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect::<HashMap<_, _>>();
        if index.len() != senses.len() {
            return Err(Error::InvalidArgument("duplicate sense ids in bank".into()));
        }
        Ok(DenseSenseBank {
            centroids,
            counts,
            senses,
            index,
        })
    }

    pub fn senses(&self) -> &[String] {
        &self.senses
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroid(&self, sense: &str) -> Option<DVector<f64>> {
        self.index
            .get(sense)
            .map(|&i| self.centroids.row(i).transpose())
    }

    /// Cosine between `v` and the sense centroid; 0 when either is the zero vector.
    pub fn cosine(&self, sense: &str, v: &DVector<f64>) -> Option<f64> {
        let c = self.centroid(sense)?;
        let denom = c.norm() * v.norm();
        Some(if denom > 0.0 { c.dot(v) / denom } else { 0.0 })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(BANK_MAGIC);
        w.u32(self.senses.len() as u32);
        w.u32(self.dim() as u32);
        for r in 0..self.centroids.nrows() {
            for c in 0..self.centroids.ncols() {
                w.f64(self.centroids[(r, c)]);
            }
        }
        for &n in &self.counts {
            w.u64(n);
        }
        for s in &self.senses {
            w.str32(s);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "bank");
        r.magic(BANK_MAGIC)?;
        let s = r.u32()? as usize;
        let d = r.u32()? as usize;
        let mut centroids = DMatrix::zeros(s, d);
        for row in 0..s {
            for col in 0..d {
                centroids[(row, col)] = r.f64()?;
            }
        }
        let counts = (0..s).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let senses = (0..s).map(|_| r.str32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        DenseSenseBank::new(centroids, counts, senses)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Per-sense mean of the labelled token vectors. Senses without tokens are left out.
pub fn build_dense_bank(
    store: &EmbeddingStore,
    labels: &[Vec<String>],
    inventory: &SenseInventory,
) -> Result<DenseSenseBank> {
    if labels.len() != store.count() {
        return Err(Error::lengths(store.count(), labels.len(), "records vs labels"));
    }
    build_dense_bank_rows(&store.matrix(), labels, inventory)
}

/// [`build_dense_bank`] over the rows of a matrix.
pub fn build_dense_bank_rows(
    rows: &DMatrix<f64>,
    labels: &[Vec<String>],
    inventory: &SenseInventory,
) -> Result<DenseSenseBank> {
    if labels.len() != rows.nrows() {
        return Err(Error::lengths(rows.nrows(), labels.len(), "rows vs labels"));
    }
    let d = rows.ncols();
    let mut sums = DMatrix::<f64>::zeros(inventory.len(), d);
    let mut counts = vec![0u64; inventory.len()];
    for (r, senses) in labels.iter().enumerate() {
        for sense in senses {
            let row = inventory
                .position(sense)
                .ok_or_else(|| Error::UnknownSense(sense.clone()))?;
            counts[row] += 1;
            let mut target = sums.row_mut(row);
            target += rows.row(r);
        }
    }
    let kept: Vec<usize> = (0..inventory.len()).filter(|&i| counts[i] > 0).collect();
    let centroids = DMatrix::from_fn(kept.len(), d, |r, c| {
        sums[(kept[r], c)] / counts[kept[r]] as f64
    });
    DenseSenseBank::new(
        centroids,
        kept.iter().map(|&i| counts[i]).collect(),
        kept.iter().map(|&i| inventory.senses()[i].clone()).collect(),
    )
}

/// Candidate whose centroid is most cosine-similar to `W x` (or `x`). Candidates absent
/// from the bank never win; if none is present the first-listed candidate is returned.
pub fn infer_dense(
    x: &DVector<f64>,
    bank: &DenseSenseBank,
    map: Option<&LinearMap>,
    candidates: &[String],
) -> Result<String> {
    let first = candidates.first().ok_or(Error::EmptyCandidates)?;
    let v = match map {
        Some(m) => {
            if m.target_dim() != x.len() {
                return Err(Error::dims(m.target_dim(), x.len(), "vector vs map"));
            }
            &m.matrix * x
        }
        None => x.clone(),
    };
    if v.len() != bank.dim() {
        return Err(Error::dims(bank.dim(), v.len(), "vector vs bank"));
    }
    let mut best: Option<(&String, f64)> = None;
    for c in candidates {
        if let Some(score) = bank.cosine(c, &v) {
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((c, score));
            }
        }
    }
    Ok(best.map_or(first, |(c, _)| c).clone())
}
