//! Serialized discourse-parser output: types, validation, the JSONL codec
//! and a synthetic planted-nucleus corpus generator.
//!
//! A parse is a dense tensor `probs[i][j][k]`: the probability that EDU `i`
//! is the nucleus of EDU `j` under grouped relation `k`. On disk only the
//! nonzero cells are listed; every absent cell is zero.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scalar::Field;
use crate::tokenizer::{self, Vocab};
use crate::util::{derive_seed, rng_from_seed, round_half_up};

/// Grouped relation types, in channel order.
pub const DEFAULT_GROUPS: [&str; 4] = ["Temporal", "Contingency", "Comparison", "Expansion"];

/// Raw parser labels and the group each belongs to.
pub const DEFAULT_LABELS: [(&str, &str); 9] = [
    ("Asynchronous", "Temporal"),
    ("Synchronous", "Temporal"),
    ("Cause", "Contingency"),
    ("Condition", "Contingency"),
    ("Contrast", "Comparison"),
    ("Concession", "Comparison"),
    ("Explanation", "Expansion"),
    ("Elaboration", "Expansion"),
    ("Conjunction", "Expansion"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EduSegmentation {
    pub doc_id: String,
    /// Half-open `[start, end)` token spans.
    pub spans: Vec<(usize, usize)>,
    pub token_count: usize,
}

impl EduSegmentation {
    pub fn n_edu(&self) -> usize {
        self.spans.len()
    }

    /// Build contiguous spans from EDU lengths.
    pub fn from_lengths(doc_id: impl Into<String>, lengths: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            spans.push((start, start + len));
            start += len;
        }
        EduSegmentation {
            doc_id: doc_id.into(),
            spans,
            token_count: start,
        }
    }

    fn violations(&self, out: &mut Vec<String>) {
        if self.spans.is_empty() {
            out.push("segmentation has no spans".into());
            return;
        }
        if self.spans[0].0 != 0 {
            out.push(format!("first span starts at {} instead of 0", self.spans[0].0));
        }
        let mut prev_end: Option<usize> = None;
        for (idx, &(start, end)) in self.spans.iter().enumerate() {
            if end <= start {
                out.push(format!("empty span {idx}: [{start}, {end})"));
            }
            if let Some(prev) = prev_end {
                if start < prev {
                    out.push(format!("spans overlap at span {idx}: starts at {start} before previous end {prev}"));
                } else if start > prev {
                    out.push(format!("spans not contiguous at span {idx}: gap [{prev}, {start})"));
                }
            }
            prev_end = Some(end);
        }
        let last_end = self.spans.last().map(|s| s.1).unwrap_or(0);
        if last_end > self.token_count {
            out.push(format!(
                "last span ends at {last_end} beyond token_count {}",
                self.token_count
            ));
        }
    }
}

/// Mapping from raw parser labels to the grouped relation channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    groups: Vec<String>,
    raw: BTreeMap<String, String>,
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap {
            groups: DEFAULT_GROUPS.iter().map(|s| s.to_string()).collect(),
            raw: DEFAULT_LABELS
                .iter()
                .map(|(r, g)| (r.to_string(), g.to_string()))
                .collect(),
        }
    }
}

impl LabelMap {
    /// Build a map for `k` channels from raw-label → group pairs.
    ///
    /// Groups follow the default channel order when they are all default
    /// groups and `k` matches; otherwise they are sorted by name.
    pub fn new(k: usize, raw: BTreeMap<String, String>) -> Result<Self> {
        let mut groups: Vec<String> = raw.values().cloned().collect();
        groups.sort();
        groups.dedup();
        let all_default = groups.iter().all(|g| DEFAULT_GROUPS.contains(&g.as_str()));
        if all_default && k == DEFAULT_GROUPS.len() {
            groups = DEFAULT_GROUPS.iter().map(|s| s.to_string()).collect();
        }
        if groups.len() != k {
            return Err(Error::Schema(format!(
                "label map defines {} relation groups but k = {k}",
                groups.len()
            )));
        }
        Ok(LabelMap { groups, raw })
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn raw_labels(&self) -> &BTreeMap<String, String> {
        &self.raw
    }

    /// Channel index for either a group name or a raw parser label.
    pub fn channel(&self, label: &str) -> Option<usize> {
        let group = self.raw.get(label).map(String::as_str).unwrap_or(label);
        self.groups.iter().position(|g| g == group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutput<T = f64> {
    pub segmentation: EduSegmentation,
    pub n_edu: usize,
    pub k_relations: usize,
    /// Shape `n_edu × n_edu × k_relations`.
    pub probs: Array3<T>,
    pub label_map: LabelMap,
}

impl<T: Field> ParseOutput<T> {
    /// All-zero parse over a segmentation, default label map.
    pub fn zeros(segmentation: EduSegmentation) -> Self {
        Self::zeros_with(segmentation, LabelMap::default())
    }

    pub fn zeros_with(segmentation: EduSegmentation, label_map: LabelMap) -> Self {
        let n = segmentation.n_edu();
        let k = label_map.k();
        ParseOutput {
            segmentation,
            n_edu: n,
            k_relations: k,
            probs: Array3::from_elem((n, n, k), T::zero()),
            label_map,
        }
    }

    pub fn doc_id(&self) -> &str {
        &self.segmentation.doc_id
    }

    pub fn map<U: Field>(&self, f: impl Fn(&T) -> U) -> ParseOutput<U> {
        ParseOutput {
            segmentation: self.segmentation.clone(),
            n_edu: self.n_edu,
            k_relations: self.k_relations,
            probs: self.probs.map(f),
            label_map: self.label_map.clone(),
        }
    }

    /// Number of cells with `i != j`.
    pub fn off_diagonal_cells(&self) -> usize {
        self.n_edu * self.n_edu.saturating_sub(1) * self.k_relations
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        write!(f, "{}", self.violations.join("; "))
    }
}

/// Check every structural invariant of a parse and list the violations.
pub fn validate<T: Field>(parse: &ParseOutput<T>) -> ValidationReport {
    let mut violations = Vec::new();
    parse.segmentation.violations(&mut violations);
    if parse.n_edu != parse.segmentation.n_edu() {
        violations.push(format!(
            "n_edu mismatch: n_edu = {} but segmentation has {} spans",
            parse.n_edu,
            parse.segmentation.n_edu()
        ));
    }
    if parse.k_relations != parse.label_map.k() {
        violations.push(format!(
            "k mismatch: k_relations = {} but label map has {} groups",
            parse.k_relations,
            parse.label_map.k()
        ));
    }
    let expected = (parse.n_edu, parse.n_edu, parse.k_relations);
    if parse.probs.dim() != expected {
        violations.push(format!(
            "tensor shape mismatch: {:?} != {:?}",
            parse.probs.dim(),
            expected
        ));
        return ValidationReport { violations };
    }
    let zero = T::zero();
    let one = T::one();
    let mut diagonal_reported = false;
    let mut range_reported = false;
    for ((i, j, k), p) in parse.probs.indexed_iter() {
        if !(p >= &zero && p <= &one) && !range_reported {
            violations.push(format!("probability out of range at ({i},{j},{k}): {p:?}"));
            range_reported = true;
        }
        if i == j && p != &zero && !diagonal_reported {
            violations.push(format!("nonzero diagonal at ({i},{i},{k}): {p:?}"));
            diagonal_reported = true;
        }
    }
    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// JSONL codec

#[derive(Debug, Serialize, Deserialize)]
struct ParseRecord {
    doc_id: String,
    token_count: usize,
    edus: Vec<[usize; 2]>,
    k: usize,
    #[serde(default)]
    labels: BTreeMap<String, String>,
    #[serde(default)]
    relations: Vec<RelationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelationRecord {
    i: usize,
    j: usize,
    #[serde(rename = "type")]
    label: String,
    p: f64,
}

/// Decode one JSONL line. `line_no` is 1-based and only used in errors.
pub fn parse_record(line: &str, line_no: usize) -> Result<ParseOutput<f64>> {
    let record: ParseRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let schema = |msg: String| Error::Schema(format!("line {line_no}: {msg}"));
    let label_map = if record.labels.is_empty() {
        let default = LabelMap::default();
        if record.k != default.k() {
            return Err(schema(format!(
                "k = {} requires an explicit label map",
                record.k
            )));
        }
        default
    } else {
        LabelMap::new(record.k, record.labels).map_err(|e| schema(e.to_string()))?
    };
    let segmentation = EduSegmentation {
        doc_id: record.doc_id,
        spans: record.edus.iter().map(|s| (s[0], s[1])).collect(),
        token_count: record.token_count,
    };
    let n = segmentation.n_edu();
    let mut probs = Array3::<f64>::zeros((n, n, record.k));
    for rel in &record.relations {
        if rel.i >= n || rel.j >= n {
            return Err(schema(format!(
                "relation ({}, {}) refers to an EDU outside 0..{n}",
                rel.i, rel.j
            )));
        }
        let k = label_map
            .channel(&rel.label)
            .ok_or_else(|| schema(format!("unknown relation label `{}`", rel.label)))?;
        if !(0.0..=1.0).contains(&rel.p) {
            return Err(schema(format!(
                "probability out of range: p = {} at ({}, {}, {})",
                rel.p, rel.i, rel.j, rel.label
            )));
        }
        if rel.i == rel.j && rel.p != 0.0 {
            return Err(schema(format!(
                "diagonal must be zero: ({0}, {0}) has p = {1}",
                rel.i, rel.p
            )));
        }
        probs[[rel.i, rel.j, k]] = rel.p;
    }
    let parse = ParseOutput {
        segmentation,
        n_edu: n,
        k_relations: record.k,
        probs,
        label_map,
    };
    let report = validate(&parse);
    if !report.is_empty() {
        return Err(schema(report.to_string()));
    }
    Ok(parse)
}

/// Encode a parse as one JSONL line (no trailing newline).
pub fn to_record<T: Field>(parse: &ParseOutput<T>) -> String {
    let groups = parse.label_map.groups();
    let zero = T::zero();
    let relations = parse
        .probs
        .indexed_iter()
        .filter(|(_, p)| **p != zero)
        .map(|((i, j, k), p)| RelationRecord {
            i,
            j,
            label: groups[k].clone(),
            p: p.to_f64_lossy(),
        })
        .collect();
    let record = ParseRecord {
        doc_id: parse.segmentation.doc_id.clone(),
        token_count: parse.segmentation.token_count,
        edus: parse.segmentation.spans.iter().map(|&(s, e)| [s, e]).collect(),
        k: parse.k_relations,
        labels: parse.label_map.raw_labels().clone(),
        relations,
    };
    serde_json::to_string(&record).expect("parse records always serialize")
}

pub fn read_parses<R: BufRead>(reader: R) -> Result<Vec<ParseOutput<f64>>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, idx + 1)?);
    }
    Ok(out)
}

/// Load every document of a JSONL parse file.
pub fn load_parses(path: impl AsRef<Path>) -> Result<Vec<ParseOutput<f64>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_parses(std::io::BufReader::new(file))
}

/// Load a parse file holding exactly one document.
pub fn load_parse(path: impl AsRef<Path>) -> Result<ParseOutput<f64>> {
    let mut docs = load_parses(path)?;
    match docs.len() {
        1 => Ok(docs.remove(0)),
        n => Err(Error::Data(format!("expected one document, found {n}"))),
    }
}

pub fn write_parses<W: Write, T: Field>(mut writer: W, parses: &[ParseOutput<T>]) -> std::io::Result<()> {
    for p in parses {
        writeln!(writer, "{}", to_record(p))?;
    }
    Ok(())
}

pub fn save_parses<T: Field>(path: impl AsRef<Path>, parses: &[ParseOutput<T>]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_parses(&mut buf, parses).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic planted-nucleus corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_edu_range: (usize, usize),
    /// EDU length in tokens, including the EDU-final `.` token.
    pub tokens_per_edu_range: (usize, usize),
    pub nucleus_ratio: f64,
    pub nucleus_prob_range: (f64, f64),
    pub satellite_prob_range: (f64, f64),
    /// Number of distinct content words.
    pub vocab_size: usize,
    pub seed: u64,
    /// 0 makes every cell of a row share one draw from the role range
    /// (a parser that is consistently confident or unsure about an EDU);
    /// 1 draws every cell independently.
    pub cell_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 100,
            n_edu_range: (6, 10),
            tokens_per_edu_range: (3, 5),
            nucleus_ratio: 0.3,
            nucleus_prob_range: (0.6, 0.95),
            satellite_prob_range: (0.05, 0.4),
            vocab_size: 200,
            seed: 0,
            cell_jitter: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        let (emin, emax) = self.n_edu_range;
        let (tmin, tmax) = self.tokens_per_edu_range;
        let (nlo, nhi) = self.nucleus_prob_range;
        let (slo, shi) = self.satellite_prob_range;
        if self.n_docs == 0 {
            return Err(config_err("n_docs must be at least 1"));
        }
        if emin < 2 || emin > emax {
            return Err(config_err(format!("n_edu_range {:?} must satisfy 2 <= min <= max", self.n_edu_range)));
        }
        if tmin < 1 || tmin > tmax {
            return Err(config_err(format!(
                "tokens_per_edu_range {:?} must satisfy 1 <= min <= max",
                self.tokens_per_edu_range
            )));
        }
        if !(self.nucleus_ratio > 0.0 && self.nucleus_ratio < 1.0) {
            return Err(config_err("nucleus_ratio must lie in (0, 1)"));
        }
        for (name, lo, hi) in [("nucleus", nlo, nhi), ("satellite", slo, shi)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(config_err(format!("{name}_prob_range ({lo}, {hi}) must be ordered within [0, 1]")));
            }
        }
        if shi >= nlo {
            return Err(config_err(format!(
                "satellite range upper bound {shi} must be below nucleus lower bound {nlo}"
            )));
        }
        if !(0.0..=1.0).contains(&self.cell_jitter) {
            return Err(config_err("cell_jitter must lie in [0, 1]"));
        }
        if self.vocab_size == 0 {
            return Err(config_err("vocab_size must be positive"));
        }
        if self.nucleus_count(emin) == 0 {
            return Err(config_err(format!(
                "nucleus count rounds to 0 for {emin} EDUs at ratio {}",
                self.nucleus_ratio
            )));
        }
        if self.nucleus_count(emax) >= emax {
            return Err(config_err(format!(
                "nucleus count leaves no satellites for {emax} EDUs at ratio {}",
                self.nucleus_ratio
            )));
        }
        Ok(())
    }

    pub fn nucleus_count(&self, n_edu: usize) -> usize {
        round_half_up(self.nucleus_ratio * n_edu as f64)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size)
    }
}

/// One synthetic document with its parse and planted reference summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDoc {
    pub parse: ParseOutput<f64>,
    pub document: Vec<String>,
    pub summary: Vec<String>,
    /// Indices of the planted nucleus EDUs, ascending.
    pub nuclei: Vec<usize>,
}

impl SynthDoc {
    pub fn document_text(&self) -> String {
        self.document.join(" ")
    }

    pub fn summary_text(&self) -> String {
        self.summary.join(" ")
    }
}

/// Generate a planted-nucleus corpus.
///
/// Nucleus EDUs receive support probabilities from the nucleus range, all
/// other EDUs from the satellite range. Each ordered pair `(i, j)` carries
/// exactly one relation channel; the other channels of that pair are zero.
pub fn synth_parse(config: &SynthConfig) -> Result<Vec<SynthDoc>> {
    config.check()?;
    let mut docs = Vec::with_capacity(config.n_docs);
    for d in 0..config.n_docs {
        let mut rng = rng_from_seed(derive_seed(config.seed, d as u64));
        docs.push(synth_one(config, &format!("doc-{d:05}"), &mut rng));
    }
    Ok(docs)
}

fn synth_one<R: Rng>(config: &SynthConfig, doc_id: &str, rng: &mut R) -> SynthDoc {
    let n_edu = rng.random_range(config.n_edu_range.0..=config.n_edu_range.1);
    let n_nuc = config.nucleus_count(n_edu);
    let mut order: Vec<usize> = (0..n_edu).collect();
    order.shuffle(rng);
    let mut nuclei: Vec<usize> = order[..n_nuc].to_vec();
    nuclei.sort_unstable();
    let is_nucleus = |i: usize| nuclei.binary_search(&i).is_ok();

    let lengths: Vec<usize> = (0..n_edu)
        .map(|_| rng.random_range(config.tokens_per_edu_range.0..=config.tokens_per_edu_range.1))
        .collect();
    let segmentation = EduSegmentation::from_lengths(doc_id, &lengths);

    // Content words are drawn without replacement while the vocabulary lasts.
    let content_needed: usize = lengths.iter().map(|l| l.saturating_sub(1)).sum();
    let mut pool: Vec<usize> = (0..config.vocab_size).collect();
    pool.shuffle(rng);
    let mut words = Vec::with_capacity(content_needed);
    for idx in 0..content_needed {
        words.push(if idx < pool.len() {
            pool[idx]
        } else {
            rng.random_range(0..config.vocab_size)
        });
    }
    let mut document = Vec::with_capacity(segmentation.token_count);
    let mut word_iter = words.into_iter();
    for &len in &lengths {
        if len == 1 {
            document.push(tokenizer::content_word(word_iter.next().unwrap_or(0)));
            continue;
        }
        for _ in 0..len - 1 {
            document.push(tokenizer::content_word(word_iter.next().unwrap_or(0)));
        }
        document.push(".".to_string());
    }

    let label_map = LabelMap::default();
    let k = label_map.k();
    let mut probs = Array3::<f64>::zeros((n_edu, n_edu, k));
    for i in 0..n_edu {
        let (lo, hi) = if is_nucleus(i) {
            config.nucleus_prob_range
        } else {
            config.satellite_prob_range
        };
        let row_level = draw(rng, lo, hi);
        for j in 0..n_edu {
            let channel = rng.random_range(0..k);
            let cell = draw(rng, lo, hi);
            if i == j {
                continue;
            }
            let p = (1.0 - config.cell_jitter) * row_level + config.cell_jitter * cell;
            probs[[i, j, channel]] = p.clamp(lo, hi);
        }
    }

    let summary = nuclei
        .iter()
        .flat_map(|&e| {
            let (s, t) = segmentation.spans[e];
            document[s..t].iter().cloned()
        })
        .collect();

    SynthDoc {
        parse: ParseOutput {
            segmentation,
            n_edu,
            k_relations: k,
            probs,
            label_map,
        },
        document,
        summary,
        nuclei,
    }
}

fn draw<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    doc_id: String,
    document: String,
    summary: String,
    nuclei: Vec<usize>,
}

/// Write a synthetic corpus as `parses.jsonl` and `corpus.jsonl` under `dir`.
pub fn save_corpus(dir: impl AsRef<Path>, docs: &[SynthDoc]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let parses: Vec<_> = docs.iter().map(|d| d.parse.clone()).collect();
    save_parses(dir.join("parses.jsonl"), &parses)?;
    let mut text = String::new();
    for d in docs {
        let rec = CorpusRecord {
            doc_id: d.parse.segmentation.doc_id.clone(),
            document: d.document_text(),
            summary: d.summary_text(),
            nuclei: d.nuclei.clone(),
        };
        text.push_str(&serde_json::to_string(&rec).expect("corpus records serialize"));
        text.push('\n');
    }
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Inverse of [`save_corpus`]; parses and corpus records are joined by order
/// and must agree on `doc_id`.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<SynthDoc>> {
    let dir = dir.as_ref();
    let parses = load_parses(dir.join("parses.jsonl"))?;
    let path = dir.join("corpus.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<CorpusRecord> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    if records.len() != parses.len() {
        return Err(Error::Data(format!(
            "{} parses but {} corpus records",
            parses.len(),
            records.len()
        )));
    }
    parses
        .into_iter()
        .zip(records)
        .map(|(parse, rec)| {
            if rec.doc_id != parse.segmentation.doc_id {
                return Err(Error::Data(format!(
                    "doc_id mismatch: parse `{}` vs corpus `{}`",
                    parse.segmentation.doc_id, rec.doc_id
                )));
            }
            let document: Vec<String> = rec.document.split_whitespace().map(String::from).collect();
            if document.len() != parse.segmentation.token_count {
                return Err(Error::Data(format!(
                    "document `{}` has {} tokens but the parse declares {}",
                    rec.doc_id,
                    document.len(),
                    parse.segmentation.token_count
                )));
            }
            Ok(SynthDoc {
                parse,
                document,
                summary: rec.summary.split_whitespace().map(String::from).collect(),
                nuclei: rec.nuclei,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_edu_record(relations: &str) -> String {
        format!(
            r#"{{"doc_id":"d","token_count":4,"edus":[[0,2],[2,4]],"k":4,"labels":{{}},"relations":[{relations}]}}"#
        )
    }

    #[test]
    fn densifies_single_sparse_entry() {
        let parse = parse_record(&two_edu_record(r#"{"i":0,"j":1,"type":"Expansion","p":0.8}"#), 1).unwrap();
        assert_eq!(parse.probs[[0, 1, 3]], 0.8);
        let nonzero = parse.probs.iter().filter(|&&p| p != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn raw_labels_map_to_groups() {
        let parse = parse_record(&two_edu_record(r#"{"i":1,"j":0,"type":"Cause","p":0.25}"#), 1).unwrap();
        assert_eq!(parse.probs[[1, 0, 1]], 0.25);
    }

    #[test]
    fn rejects_diagonal() {
        let err = parse_record(&two_edu_record(r#"{"i":1,"j":1,"type":"Expansion","p":0.3}"#), 1).unwrap_err();
        assert!(err.to_string().contains("diagonal must be zero"), "{err}");
    }

    #[test]
    fn rejects_out_of_range() {
        let err = parse_record(&two_edu_record(r#"{"i":0,"j":1,"type":"Expansion","p":1.2}"#), 1).unwrap_err();
        assert!(err.to_string().contains("probability out of range"), "{err}");
    }

    #[test]
    fn rejects_unknown_label() {
        let err = parse_record(&two_edu_record(r#"{"i":0,"j":1,"type":"Attribution","p":0.2}"#), 1).unwrap_err();
        assert!(err.to_string().contains("unknown relation label"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}\n{{not json\n", two_edu_record(""));
        let err = read_parses(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn explicit_label_map_is_used() {
        let line = r#"{"doc_id":"d","token_count":2,"edus":[[0,1],[1,2]],"k":2,"labels":{"Cause":"Causal","Contrast":"Contrastive"},"relations":[{"i":0,"j":1,"type":"Contrast","p":0.5}]}"#;
        let parse = parse_record(line, 1).unwrap();
        assert_eq!(parse.k_relations, 2);
        assert_eq!(parse.probs[[0, 1, 1]], 0.5);
    }

    #[test]
    fn validate_reports() {
        let seg = EduSegmentation::from_lengths("d", &[2, 2, 1]);
        let parse = ParseOutput::<f64>::zeros(seg);
        assert!(validate(&parse).is_empty());

        let mut overlapping = parse.clone();
        overlapping.segmentation.spans[1] = (1, 4);
        assert!(validate(&overlapping).contains("spans overlap"));

        let mut diag = parse.clone();
        diag.probs[[2, 2, 0]] = 0.1;
        assert!(validate(&diag).contains("nonzero diagonal"));

        let mut gap = parse.clone();
        gap.segmentation.spans[1] = (3, 4);
        assert!(validate(&gap).contains("not contiguous"));

        let mut empty = parse.clone();
        empty.segmentation.spans[2] = (4, 4);
        assert!(validate(&empty).contains("empty span"));

        let mut over = parse;
        over.segmentation.token_count = 3;
        assert!(validate(&over).contains("beyond token_count"));
    }

    #[test]
    fn nucleus_count_rounding() {
        let cfg = SynthConfig {
            nucleus_ratio: 0.3,
            n_edu_range: (10, 10),
            ..SynthConfig::default()
        };
        let docs = synth_parse(&cfg).unwrap();
        assert!(docs.iter().all(|d| d.nuclei.len() == 3));
    }

    #[test]
    fn degenerate_config() {
        let cfg = SynthConfig {
            nucleus_ratio: 0.1,
            n_edu_range: (3, 4),
            ..SynthConfig::default()
        };
        assert!(matches!(synth_parse(&cfg), Err(Error::Config(_))));

        let overlapping = SynthConfig {
            satellite_prob_range: (0.1, 0.7),
            ..SynthConfig::default()
        };
        assert!(synth_parse(&overlapping).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let cfg = SynthConfig {
            n_docs: 20,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = synth_parse(&cfg).unwrap();
        let b = synth_parse(&cfg).unwrap();
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        write_parses(&mut ta, &a.iter().map(|d| d.parse.clone()).collect::<Vec<_>>()).unwrap();
        write_parses(&mut tb, &b.iter().map(|d| d.parse.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!(ta, tb);
        for d in &a {
            assert!(validate(&d.parse).is_empty());
        }
    }

    #[test]
    fn corpus_round_trip() {
        let cfg = SynthConfig {
            n_docs: 5,
            ..SynthConfig::default()
        };
        let docs = synth_parse(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &docs).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, docs);
    }
}
