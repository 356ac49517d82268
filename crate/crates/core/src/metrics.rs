//! ROUGE-1/2/L/Lsum computed natively, plus a subprocess hook for external
//! metrics.
//!
//! Text is lowercased and split on whitespace; no stemming. Lsum splits
//! sentences on newlines and uses the union-LCS summary-level definition.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Field;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore<F = f64> {
    pub precision: F,
    pub recall: F,
    pub f1: F,
}

/// Hit count with candidate and reference totals; scores derive from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub hits: usize,
    pub candidate: usize,
    pub reference: usize,
}

impl MatchCounts {
    pub fn score<F: Field>(&self) -> RougeScore<F> {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                F::zero()
            } else {
                F::from_count(num) / F::from_count(den)
            }
        };
        let precision = ratio(self.hits, self.candidate);
        let recall = ratio(self.hits, self.reference);
        let sum = precision.clone() + recall.clone();
        let f1 = if sum > F::zero() {
            F::from_count(2) * precision.clone() * recall.clone() / sum
        } else {
            F::zero()
        };
        RougeScore { precision, recall, f1 }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn sentences(text: &str) -> Vec<Vec<String>> {
    text.lines().map(tokenize).filter(|s| !s.is_empty()).collect()
}

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

pub fn rouge_n_counts<W: Eq + Hash>(candidate: &[W], reference: &[W], n: usize) -> MatchCounts {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let hits = cand
        .iter()
        .map(|(g, c)| refs.get(g).map_or(0, |r| (*c).min(*r)))
        .sum();
    MatchCounts {
        hits,
        candidate: cand.values().sum(),
        reference: refs.values().sum(),
    }
}

pub fn rouge_n<W: Eq + Hash>(candidate: &[W], reference: &[W], n: usize) -> RougeScore {
    rouge_n_counts(candidate, reference, n).score()
}

fn lcs_table<W: Eq>(a: &[W], b: &[W]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

pub fn lcs_len<W: Eq>(a: &[W], b: &[W]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Indices into `reference` of one LCS with `candidate`, ascending.
pub fn lcs_indices<W: Eq>(reference: &[W], candidate: &[W]) -> Vec<usize> {
    let t = lcs_table(reference, candidate);
    let (mut i, mut j) = (reference.len(), candidate.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == candidate[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i][j - 1] > t[i - 1][j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

pub fn rouge_l_counts<W: Eq>(candidate: &[W], reference: &[W]) -> MatchCounts {
    MatchCounts {
        hits: lcs_len(candidate, reference),
        candidate: candidate.len(),
        reference: reference.len(),
    }
}

pub fn rouge_l<W: Eq>(candidate: &[W], reference: &[W]) -> RougeScore {
    rouge_l_counts(candidate, reference).score()
}

/// Union-LCS hits, clipped so no token is counted more often than it occurs
/// in either summary.
pub fn rouge_lsum_counts<W: Eq + Hash + Clone>(candidate: &[Vec<W>], reference: &[Vec<W>]) -> MatchCounts {
    let mut cand_left: HashMap<W, usize> = HashMap::new();
    for w in candidate.iter().flatten() {
        *cand_left.entry(w.clone()).or_insert(0) += 1;
    }
    let mut ref_left: HashMap<W, usize> = HashMap::new();
    for w in reference.iter().flatten() {
        *ref_left.entry(w.clone()).or_insert(0) += 1;
    }
    let mut hits = 0;
    for r in reference {
        let mut union: Vec<usize> = candidate.iter().flat_map(|c| lcs_indices(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for idx in union {
            let w = &r[idx];
            let (Some(c), Some(rr)) = (cand_left.get(w).copied(), ref_left.get(w).copied()) else {
                continue;
            };
            if c > 0 && rr > 0 {
                hits += 1;
                cand_left.insert(w.clone(), c - 1);
                ref_left.insert(w.clone(), rr - 1);
            }
        }
    }
    MatchCounts {
        hits,
        candidate: candidate.iter().map(Vec::len).sum(),
        reference: reference.iter().map(Vec::len).sum(),
    }
}

pub fn rouge_lsum<W: Eq + Hash + Clone>(candidate: &[Vec<W>], reference: &[Vec<W>]) -> RougeScore {
    rouge_lsum_counts(candidate, reference).score()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScores {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub rouge_lsum: RougeScore,
}

impl DocScores {
    pub fn of_text(candidate: &str, reference: &str) -> Self {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        DocScores {
            rouge1: rouge_n(&c, &r, 1),
            rouge2: rouge_n(&c, &r, 2),
            rouge_l: rouge_l(&c, &r),
            rouge_lsum: rouge_lsum(&sentences(candidate), &sentences(reference)),
        }
    }
}

/// Corpus means of per-document F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanF1 {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub rouge_lsum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub doc_count: usize,
    pub mean_f1: MeanF1,
    pub documents: Vec<DocScores>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

pub fn evaluate_corpus(pairs: &[(String, String)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty corpus".into()));
    }
    let documents: Vec<DocScores> = pairs.iter().map(|(c, r)| DocScores::of_text(c, r)).collect();
    let n = documents.len() as f64;
    let mean = |f: fn(&DocScores) -> f64| documents.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        version: REPORT_VERSION,
        doc_count: documents.len(),
        mean_f1: MeanF1 {
            rouge1: mean(|d| d.rouge1.f1),
            rouge2: mean(|d| d.rouge2.f1),
            rouge_l: mean(|d| d.rouge_l.f1),
            rouge_lsum: mean(|d| d.rouge_lsum.f1),
        },
        documents,
        external: BTreeMap::new(),
    })
}

/// Run an external metric program as `program args.. <cands> <refs>`; it must
/// print a JSON object of metric name to number on stdout.
pub fn run_external_metric(command: &[String], cands: &Path, refs: &Path) -> Result<BTreeMap<String, f64>> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::Config("empty external metric command".into()))?;
    let out = Command::new(program)
        .args(args)
        .arg(cands)
        .arg(refs)
        .output()
        .map_err(|e| Error::io(program, e))?;
    if !out.status.success() {
        return Err(Error::Data(format!(
            "external metric `{program}` failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    serde_json::from_slice(&out.stdout)
        .map_err(|e| Error::Data(format!("external metric `{program}` output is not a name→number JSON object: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Rational;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn unigram_example() {
        let s = rouge_n_counts(&toks("the cat sat"), &toks("the cat"), 1).score::<Rational>();
        assert_eq!(s.precision, Rational::new(2, 3));
        assert_eq!(s.recall, Rational::from_integer(1));
        assert_eq!(s.f1, Rational::new(4, 5));
    }

    #[test]
    fn lcs_example() {
        let s = rouge_l_counts(&toks("a b c d"), &toks("a c d")).score::<Rational>();
        assert_eq!(s.precision, Rational::new(3, 4));
        assert_eq!(s.f1, Rational::new(6, 7));
        assert_eq!(rouge_l::<String>(&[], &toks("a")).f1, 0.0);
    }

    #[test]
    fn lsum_example() {
        let c = sentences("a b\nc d");
        let r = sentences("a b\nx y");
        let s = rouge_lsum_counts(&c, &r).score::<Rational>();
        assert_eq!(s.precision, Rational::new(1, 2));
        assert_eq!(s.recall, Rational::new(1, 2));
        assert_eq!(s.f1, Rational::new(1, 2));
    }

    #[test]
    fn degenerate_cases() {
        let x = toks("one two three");
        assert_eq!(rouge_n(&x, &x, 2).f1, 1.0);
        assert_eq!(rouge_n(&x, &toks("four five"), 1).f1, 0.0);
        assert_eq!(rouge_n::<String>(&[], &[], 1).f1, 0.0);
        assert_eq!(tokenize("The CAT"), vec!["the", "cat"]);
    }

    #[test]
    fn corpus_means() {
        let pairs = vec![("a b".to_string(), "a b".to_string()), ("c".to_string(), "d".to_string())];
        let r = evaluate_corpus(&pairs).unwrap();
        assert_eq!(r.mean_f1.rouge1, 0.5);
        assert!(evaluate_corpus(&[]).is_err());
    }

    #[test]
    fn external_hook() {
        let cmd = vec!["sh".to_string(), "-c".to_string(), r#"echo '{"meteor": 0.25}'"#.to_string(), "metric".to_string()];
        let got = run_external_metric(&cmd, Path::new("c.txt"), Path::new("r.txt")).unwrap();
        assert_eq!(got["meteor"], 0.25);
        let bad = vec!["sh".to_string(), "-c".to_string(), "echo nope".to_string()];
        assert!(run_external_metric(&bad, Path::new("c"), Path::new("r")).is_err());
    }
}
