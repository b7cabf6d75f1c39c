//! WSD corpora, scoring and significance tests.
//!
//! Corpora follow the WSD evaluation framework schema used by XL-WSD: `<sentence>` elements
//! holding `<wf>` and `<instance>` children, plus a gold file of `instance_id key...` lines.
//! Sentences are numbered 0, 1, ... in document order and tokens by whitespace-separated
//! word within a sentence; extracted `.cemb` stores use the same numbering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use quick_xml::events::{BytesStart, Event};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensemodel::SenseInventory;
use crate::special::{chi_square_sf, student_t_two_sided};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsdInstance {
    pub instance_id: String,
    pub lemma: String,
    pub pos: String,
    pub sentence_id: u64,
    /// Half-open word range within the sentence.
    pub token_start: u32,
    pub token_end: u32,
    /// Filled by [`attach_candidates`].
    pub candidates: Vec<String>,
}

impl WsdInstance {
    pub fn token_indices(&self) -> std::ops::Range<u32> {
        self.token_start..self.token_end
    }
}

/// Gold sense sets keyed by instance id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldKeys {
    keys: BTreeMap<String, BTreeSet<String>>,
}

impl GoldKeys {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, senses: impl IntoIterator<Item = String>) -> Result<()> {
        let id = id.into();
        let set: BTreeSet<String> = senses.into_iter().collect();
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!("empty gold set for {id}")));
        }
        self.keys.entry(id).or_default().extend(set);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.keys.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.keys.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.keys.iter()
    }

    /// Restriction to the given ids; unknown ids are ignored.
    pub fn restricted<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> GoldKeys {
        let keys = ids
            .into_iter()
            .filter_map(|id| self.keys.get_key_value(id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        GoldKeys { keys }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut gold = GoldKeys::new();
        for (n, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(id) = fields.next() else { continue };
            let senses: Vec<String> = fields.map(str::to_string).collect();
            if senses.is_empty() {
                return Err(Error::MalformedInput {
                    line: n + 1,
                    message: format!("gold entry `{id}` has no keys"),
                });
            }
            gold.insert(id, senses)?;
        }
        Ok(gold)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsdCorpus {
    pub instances: Vec<WsdInstance>,
    pub gold: GoldKeys,
    /// Gold ids with no instance in the XML.
    pub dangling: Vec<String>,
}

pub fn parse_xlwsd(xml_path: impl AsRef<Path>, gold_path: impl AsRef<Path>) -> Result<WsdCorpus> {
    let xml_path = xml_path.as_ref();
    let xml = std::fs::read_to_string(xml_path).map_err(|e| Error::io(xml_path, e))?;
    parse_xlwsd_str(&xml, GoldKeys::read(gold_path)?)
}

pub fn parse_xlwsd_str(xml: &str, gold: GoldKeys) -> Result<WsdCorpus> {
    let instances = parse_instances(xml)?;
    let mut seen = BTreeSet::new();
    for inst in &instances {
        if !seen.insert(inst.instance_id.as_str()) {
            return Err(Error::MalformedXml(format!(
                "duplicate instance id {}",
                inst.instance_id
            )));
        }
        if !gold.contains(&inst.instance_id) {
            return Err(Error::MissingGold(inst.instance_id.clone()));
        }
    }
    let dangling: Vec<String> = gold
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !seen.contains(id.as_str()))
        .cloned()
        .collect();
    if !dangling.is_empty() {
        warn!("{} gold keys without a corpus instance", dangling.len());
    }
    Ok(WsdCorpus {
        instances,
        gold,
        dangling,
    })
}

struct OpenToken {
    instance: Option<(String, String, String)>,
    text: String,
}

/// Instances of a framework-schema document, in document order.
pub fn parse_instances(xml: &str) -> Result<Vec<WsdInstance>> {
    let mut reader = quick_xml::Reader::from_str(xml);
    let xml_err = |e: &dyn std::fmt::Display, pos: u64| Error::MalformedXml(format!("{e} at byte {pos}"));
    let mut instances = Vec::new();
    let mut sentence: Option<u64> = None;
    let mut next_sentence = 0u64;
    let mut position = 0u32;
    let mut open: Option<OpenToken> = None;
    loop {
        let pos = reader.buffer_position();
        let event = reader.read_event().map_err(|e| xml_err(&e, pos))?;
        match event {
            Event::Start(e) => match e.name().as_ref() {
                b"sentence" => {
                    if sentence.is_some() {
                        return Err(Error::MalformedXml("nested <sentence>".into()));
                    }
                    sentence = Some(next_sentence);
                    next_sentence += 1;
                    position = 0;
                }
                b"wf" | b"instance" => {
                    if sentence.is_none() || open.is_some() {
                        return Err(Error::MalformedXml(format!(
                            "misplaced <{}> at byte {pos}",
                            String::from_utf8_lossy(e.name().as_ref())
                        )));
                    }
                    let instance = if e.name().as_ref() == b"instance" {
                        Some(instance_attrs(&e)?)
                    } else {
                        None
                    };
                    open = Some(OpenToken {
                        instance,
                        text: String::new(),
                    });
                }
                _ => {}
            },
            Event::Empty(e) => {
                if e.name().as_ref() == b"instance" {
                    return Err(Error::MalformedXml("empty <instance> element".into()));
                }
            }
            Event::Text(t) => {
                if let Some(tok) = open.as_mut() {
                    let text = t.unescape().map_err(|e| xml_err(&e, pos))?;
                    tok.text.push_str(&text);
                }
            }
            Event::CData(t) => {
                if let Some(tok) = open.as_mut() {
                    tok.text.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Event::End(e) => match e.name().as_ref() {
                b"sentence" => {
                    sentence = None;
                }
                b"wf" | b"instance" => {
                    let tok = open.take().ok_or_else(|| {
                        Error::MalformedXml(format!("unbalanced token element at byte {pos}"))
                    })?;
                    let words = tok.text.split_whitespace().count() as u32;
                    if let Some((id, lemma, pos_tag)) = tok.instance {
                        if words == 0 {
                            return Err(Error::MalformedXml(format!("instance {id} has no text")));
                        }
                        instances.push(WsdInstance {
                            instance_id: id,
                            lemma,
                            pos: pos_tag,
                            sentence_id: sentence.expect("token inside sentence"),
                            token_start: position,
                            token_end: position + words,
                            candidates: Vec::new(),
                        });
                    }
                    position += words;
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
    }
    if sentence.is_some() || open.is_some() {
        return Err(Error::MalformedXml("unexpected end of document".into()));
    }
    Ok(instances)
}

fn instance_attrs(e: &BytesStart<'_>) -> Result<(String, String, String)> {
    let (mut id, mut lemma, mut pos) = (None, None, None);
    for attr in e.attributes() {
        let attr = attr.map_err(|err| Error::MalformedXml(err.to_string()))?;
        let value = attr
            .unescape_value()
            .map_err(|err| Error::MalformedXml(err.to_string()))?
            .into_owned();
        match attr.key.as_ref() {
            b"id" => id = Some(value),
            b"lemma" => lemma = Some(value),
            b"pos" => pos = Some(value),
            _ => {}
        }
    }
    let missing = |what: &str| Error::MalformedXml(format!("<instance> without {what}"));
    Ok((
        id.ok_or_else(|| missing("id"))?,
        lemma.ok_or_else(|| missing("lemma"))?,
        pos.ok_or_else(|| missing("pos"))?,
    ))
}

/// Fills every instance's candidate list from the inventory. Returns the number of
/// instances whose `(lemma, pos)` is not in the inventory; those keep an empty list.
pub fn attach_candidates(instances: &mut [WsdInstance], inventory: &SenseInventory) -> usize {
    let mut missing = 0;
    for inst in instances {
        match inventory.candidates(&inst.lemma, &inst.pos) {
            Some(c) => inst.candidates = c.to_vec(),
            None => {
                inst.candidates.clear();
                missing += 1;
            }
        }
    }
    missing
}

/// Instance id → predicted sense id.
pub type Predictions = BTreeMap<String, String>;

pub fn parse_predictions(text: &str) -> Result<Predictions> {
    let mut out = Predictions::new();
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let malformed = |message: String| Error::MalformedInput { line: n + 1, message };
        let sense = fields
            .next()
            .ok_or_else(|| malformed(format!("prediction `{id}` has no sense")))?;
        if fields.next().is_some() {
            return Err(malformed(format!("prediction `{id}` has more than one sense")));
        }
        if out.insert(id.to_string(), sense.to_string()).is_some() {
            return Err(malformed(format!("duplicate prediction for `{id}`")));
        }
    }
    Ok(out)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    parse_predictions(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn format_predictions(predictions: &Predictions) -> String {
    predictions
        .iter()
        .map(|(id, s)| format!("{id} {s}\n"))
        .collect()
}

pub fn write_predictions(predictions: &Predictions, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_predictions(predictions)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub attempted: usize,
    pub total: usize,
}

impl FScore {
    pub fn from_counts(correct: usize, attempted: usize, total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, attempted);
        let recall = ratio(correct, total);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        FScore {
            precision,
            recall,
            f1,
            correct,
            attempted,
            total,
        }
    }
}

/// A prediction is correct iff it is one of the instance's gold senses. Predictions for
/// ids outside `gold` are ignored.
pub fn f_score(predictions: &Predictions, gold: &GoldKeys) -> FScore {
    let (correct, attempted) = gold
        .keys
        .par_iter()
        .map(|(id, senses)| match predictions.get(id) {
            Some(p) => (usize::from(senses.contains(p)), 1),
            None => (0, 0),
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let extra = predictions.keys().filter(|id| !gold.contains(id)).count();
    if extra > 0 {
        warn!("{extra} predictions for ids without gold keys ignored");
    }
    FScore::from_counts(correct, attempted, gold.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Scores from pooled counts.
    pub micro: FScore,
    /// Arithmetic means of the per-part precision, recall and F1.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub fn aggregate(scores: &[FScore]) -> Aggregate {
    let sum = |f: fn(&FScore) -> usize| scores.iter().map(f).sum::<usize>();
    let micro = FScore::from_counts(sum(|s| s.correct), sum(|s| s.attempted), sum(|s| s.total));
    let mean = |f: fn(&FScore) -> f64| {
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / scores.len() as f64
        }
    };
    Aggregate {
        micro,
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyPair {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    pub both_correct: u64,
    pub both_wrong: u64,
}

impl ContingencyPair {
    /// Tabulates two systems over all gold instances; a missing prediction counts as wrong.
    pub fn from_predictions(a: &Predictions, b: &Predictions, gold: &GoldKeys) -> Self {
        let mut pair = ContingencyPair {
            b: 0,
            c: 0,
            both_correct: 0,
            both_wrong: 0,
        };
        for (id, senses) in gold.iter() {
            let ok = |p: &Predictions| p.get(id).is_some_and(|s| senses.contains(s));
            match (ok(a), ok(b)) {
                (true, true) => pair.both_correct += 1,
                (true, false) => pair.b += 1,
                (false, true) => pair.c += 1,
                (false, false) => pair.both_wrong += 1,
            }
        }
        pair
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// McNemar's test against chi-square with one degree of freedom. The corrected statistic is
/// `(|b − c| − 1)² / (b + c)`, applied literally also when `b = c`.
pub fn mcnemar(pair: &ContingencyPair, continuity: bool) -> Result<TestResult> {
    let n = pair.b + pair.c;
    if n == 0 {
        return Err(Error::DegenerateTable);
    }
    let diff = (pair.b as f64 - pair.c as f64).abs();
    let diff = if continuity { diff - 1.0 } else { diff };
    let statistic = diff * diff / n as f64;
    Ok(TestResult {
        statistic,
        p_value: chi_square_sf(statistic, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    pub p_value: f64,
}

/// Welch's unequal-variance t-test, two-sided.
pub fn unpaired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::InsufficientSample(s.len()));
        }
    }
    let moments = |s: &[f64]| {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if se2 <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(TTest {
        t,
        dof,
        p_value: student_t_two_sided(t, dof),
    })
}

/// Configuration with the largest score. NaN scores never win. Ties go to the smallest key,
/// so the tie order is the key type's `Ord`.
pub fn select_hyperparams<K: Ord + Clone>(scores: &BTreeMap<K, f64>) -> Result<K> {
    if scores.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best: Option<(&K, f64)> = None;
    for (k, &s) in scores {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    Ok(best
        .map(|(k, _)| k)
        .unwrap_or_else(|| scores.keys().next().expect("non-empty"))
        .clone())
}
