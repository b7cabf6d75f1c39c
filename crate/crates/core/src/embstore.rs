//! Binary storage of contextual embedding records (`.cemb`).
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header  "CEMB" | version u32 | dim u32 | count u64 | lang_len u16 | tag_len u16   (24 bytes)
//!         language bytes | encoder tag bytes
//! record  record_id u64 | sentence_id u64 | token_index u32 | layer i8
//!         surface_len u32 | surface bytes
//!         lemma_len u32 (0xFFFF_FFFF = no lemma) | lemma bytes
//!         dim × f32
//! ```

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CEMB";
pub const VERSION: u32 = 1;
/// Fixed part of the header, before the language and encoder strings.
pub const HEADER_BYTES: usize = 24;
/// Fixed per-record bytes excluding strings and the vector.
pub const RECORD_FIXED_BYTES: usize = 8 + 8 + 4 + 1 + 4 + 4;

const NO_LEMMA: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRecord {
    pub record_id: u64,
    pub sentence_id: u64,
    pub token_index: u32,
    pub surface: String,
    pub lemma: Option<String>,
    /// Relative layer index, -1 is the last layer.
    pub layer: i8,
    pub vector: Vec<f32>,
}

/// An immutable-after-load collection of contextual vectors sharing one dimension and layer.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    language: String,
    encoder_tag: String,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<u64, usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.language == other.language
            && self.encoder_tag == other.encoder_tag
            && self.records == other.records
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize, language: impl Into<String>, encoder_tag: impl Into<String>) -> Self {
        EmbeddingStore {
            dim,
            language: language.into(),
            encoder_tag: encoder_tag.into(),
            records: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    /// Appends a record after checking dimension, finiteness, id uniqueness and layer constancy.
    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::dims(
                self.dim,
                record.vector.len(),
                format!("record {}", record.record_id),
            ));
        }
        if let Some(bad) = record.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "record {} component {bad}",
                record.record_id
            )));
        }
        if self.by_id.contains_key(&record.record_id) {
            return Err(Error::InvalidStore(format!(
                "duplicate record id {}",
                record.record_id
            )));
        }
        if let Some(layer) = self.layer() {
            if layer != record.layer {
                return Err(Error::InvalidStore(format!(
                    "record {} has layer {} but store layer is {layer}",
                    record.record_id, record.layer
                )));
            }
        }
        self.by_id.insert(record.record_id, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    /// Layer shared by all records; `None` for an empty store.
    pub fn layer(&self) -> Option<i8> {
        self.records.first().map(|r| r.layer)
    }

    pub fn get(&self, id: u64) -> Option<&EmbeddingRecord> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    /// Record position keyed by `(sentence_id, token_index)`.
    pub fn token_positions(&self) -> HashMap<(u64, u32), usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.sentence_id, r.token_index), i))
            .collect()
    }

    pub fn vector_f64(&self, position: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.dim,
            self.records[position].vector.iter().map(|&v| v as f64),
        )
    }

    /// All vectors as an `N × d` matrix in f64, one record per row.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.rows_matrix(0..self.records.len())
    }

    /// Selected records (by position) as rows of an f64 matrix.
    pub fn rows_matrix(&self, positions: impl IntoIterator<Item = usize>) -> DMatrix<f64> {
        let positions: Vec<usize> = positions.into_iter().collect();
        let mut m = DMatrix::zeros(positions.len(), self.dim);
        for (row, &p) in positions.iter().enumerate() {
            for (c, &v) in self.records[p].vector.iter().enumerate() {
                m[(row, c)] = v as f64;
            }
        }
        m
    }

    /// Records for `ids`, in the order given.
    pub fn subset(&self, ids: &[u64]) -> Result<EmbeddingStore> {
        let mut out = EmbeddingStore::new(self.dim, &self.language, &self.encoder_tag);
        for &id in ids {
            let rec = self.get(id).ok_or(Error::UnknownId(id))?;
            out.push(rec.clone())?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let lang_len = u16::try_from(self.language.len())
            .map_err(|_| Error::InvalidStore("language string longer than 65535 bytes".into()))?;
        let tag_len = u16::try_from(self.encoder_tag.len()).map_err(|_| {
            Error::InvalidStore("encoder tag string longer than 65535 bytes".into())
        })?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::InvalidStore("dimension exceeds u32".into()))?;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(dim);
        w.u64(self.records.len() as u64);
        w.u16(lang_len);
        w.u16(tag_len);
        w.bytes(self.language.as_bytes());
        w.bytes(self.encoder_tag.as_bytes());
        for r in &self.records {
            w.u64(r.record_id);
            w.u64(r.sentence_id);
            w.u32(r.token_index);
            w.i8(r.layer);
            w.str32(&r.surface);
            match &r.lemma {
                Some(l) => {
                    if l.len() >= NO_LEMMA as usize {
                        return Err(Error::InvalidStore("lemma too long".into()));
                    }
                    w.str32(l)
                }
                None => w.u32(NO_LEMMA),
            }
            for &v in &r.vector {
                w.f32(v);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingStore> {
        let mut r = Reader::new(bytes, "cemb");
        r.magic(MAGIC)?;
        let header_err = |_| Error::MalformedHeader("cemb: header shorter than 24 bytes".into());
        let version = r.u32().map_err(header_err)?;
        if version != VERSION {
            return Err(Error::MalformedHeader(format!(
                "cemb: unsupported version {version}"
            )));
        }
        let dim = r.u32().map_err(header_err)? as usize;
        let count = r.u64().map_err(header_err)?;
        let lang_len = r.u16().map_err(header_err)? as usize;
        let tag_len = r.u16().map_err(header_err)? as usize;
        let language = r.utf8(lang_len)?;
        let encoder_tag = r.utf8(tag_len)?;
        let mut store = EmbeddingStore::new(dim, language, encoder_tag);
        for _ in 0..count {
            let record_id = r.u64()?;
            let sentence_id = r.u64()?;
            let token_index = r.u32()?;
            let layer = r.i8()?;
            let surface = r.str32()?;
            let lemma = match r.u32()? {
                NO_LEMMA => None,
                len => Some(r.utf8(len as usize)?),
            };
            let raw = r.take(4 * dim)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.push(EmbeddingRecord {
                record_id,
                sentence_id,
                token_index,
                surface,
                lemma,
                layer,
                vector,
            })?;
        }
        r.finish()?;
        Ok(store)
    }
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    EmbeddingStore::from_bytes(&read_file(path.as_ref())?)
}

pub fn write_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &store.to_bytes()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, vector: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            record_id: id,
            sentence_id: id / 10,
            token_index: (id % 10) as u32,
            surface: format!("w{id}"),
            lemma: if id.is_multiple_of(2) { Some(format!("l{id}")) } else { None },
            layer: -1,
            vector,
        }
    }

    #[test]
    fn empty_store_is_header_only() {
        let s = EmbeddingStore::new(4, "", "");
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.dim(), 4);
        assert_eq!(back.count(), 0);
    }

    #[test]
    fn file_size_follows_layout() {
        let mut s = EmbeddingStore::new(3, "de", "bert");
        s.push(rec(1, vec![1.0, 2.0, 3.0])).unwrap();
        s.push(rec(2, vec![0.5, -1.0, 0.0])).unwrap();
        let strings: usize = s
            .records()
            .iter()
            .map(|r| r.surface.len() + r.lemma.as_ref().map_or(0, |l| l.len()))
            .sum();
        let expected = HEADER_BYTES + 2 + 4 + 2 * (RECORD_FIXED_BYTES + 4 * 3) + strings;
        assert_eq!(s.to_bytes().unwrap().len(), expected);
        let back = EmbeddingStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(back.count(), 2);
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = EmbeddingStore::new(2, "en", "x").to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(Error::MalformedHeader(_))
        ));
        let mut bytes = EmbeddingStore::new(2, "en", "x").to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            EmbeddingStore::from_bytes(b"CEM"),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn truncated_file_detected() {
        let mut s = EmbeddingStore::new(3, "en", "x");
        s.push(rec(1, vec![1.0, 2.0, 3.0])).unwrap();
        let bytes = s.to_bytes().unwrap();
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn nan_rejected_on_push_and_load() {
        let mut s = EmbeddingStore::new(2, "en", "x");
        assert!(matches!(
            s.push(rec(1, vec![f32::NAN, 0.0])),
            Err(Error::NonFinite(_))
        ));
        s.push(rec(1, vec![1.0, 0.0])).unwrap();
        let mut bytes = s.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dimension_and_layer_checked() {
        let mut s = EmbeddingStore::new(2, "en", "x");
        assert!(matches!(
            s.push(rec(1, vec![1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        s.push(rec(1, vec![1.0, 0.0])).unwrap();
        let mut other = rec(2, vec![0.0, 1.0]);
        other.layer = -2;
        assert!(s.push(other).is_err());
        assert!(s.push(rec(1, vec![0.0, 1.0])).is_err());
    }

    #[test]
    fn subset_preserves_order() {
        let mut s = EmbeddingStore::new(1, "en", "x");
        for id in 0..10 {
            s.push(rec(id, vec![id as f32])).unwrap();
        }
        let sub = s.subset(&[7, 3]).unwrap();
        let ids: Vec<u64> = sub.records().iter().map(|r| r.record_id).collect();
        assert_eq!(ids, vec![7, 3]);
        assert_eq!(sub.dim(), 1);
        assert_eq!(s.subset(&[]).unwrap().count(), 0);
        let all: Vec<u64> = (0..10).collect();
        assert_eq!(s.subset(&all).unwrap(), s);
        assert!(matches!(s.subset(&[42]), Err(Error::UnknownId(42))));
    }
}
