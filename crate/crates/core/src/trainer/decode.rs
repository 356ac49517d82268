use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{last_log_probs, AdaptedModel, Architecture};
use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{BOS, EOS, PAD, SEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub no_repeat_ngram: usize,
    pub max_length: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            length_penalty: 3.0,
            no_repeat_ngram: 3,
            max_length: 32,
        }
    }
}

impl DecodeConfig {
    pub fn check(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(config_err("beam_size must be at least 1"));
        }
        if self.max_length == 0 {
            return Err(config_err("max_length must be at least 1"));
        }
        Ok(())
    }

    pub fn greedy(&self) -> Self {
        DecodeConfig {
            beam_size: 1,
            ..self.clone()
        }
    }
}

/// `logprob / len^penalty`.
pub fn length_normalized(logprob: f64, len: usize, penalty: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(penalty)
}

/// Tokens that would complete an n-gram already present in `generated`.
pub fn blocked_tokens(generated: &[usize], n: usize) -> Vec<usize> {
    if n == 0 || generated.len() + 1 < n {
        return Vec::new();
    }
    let prefix = &generated[generated.len() + 1 - n..];
    let mut out: Vec<usize> = generated
        .windows(n)
        .filter(|w| &w[..n - 1] == prefix)
        .map(|w| w[n - 1])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn check_budget<T: Scalar>(model: &AdaptedModel<T>, doc_len: usize, decode: &DecodeConfig) -> Result<()> {
    let cfg = model.config();
    let needed = match cfg.architecture {
        Architecture::DecoderOnly => doc_len + 2 + decode.max_length,
        Architecture::Seq2seq => doc_len.max(decode.max_length + 1),
    };
    if needed > cfg.max_seq_len {
        return Err(shape_err(format!(
            "document of {doc_len} tokens plus max_length {} needs {needed} positions, max_seq_len is {}",
            decode.max_length, cfg.max_seq_len
        )));
    }
    Ok(())
}

fn next_log_probs<T: Scalar>(model: &AdaptedModel<T>, doc: &[usize], prefix: &[usize], gamma: Option<&Array2<T>>, block: usize) -> Result<Vec<f64>> {
    let ex = model.backbone.layout(doc, prefix, gamma, false)?;
    let logits = model.logits(&ex.input())?;
    let mut lp: Vec<f64> = last_log_probs(&logits).into_iter().map(|v| v.to_f64_lossy()).collect();
    for t in [PAD, BOS, SEP] {
        if t < lp.len() {
            lp[t] = f64::NEG_INFINITY;
        }
    }
    for t in blocked_tokens(prefix, block) {
        lp[t] = f64::NEG_INFINITY;
    }
    Ok(lp)
}

/// Greedy argmax decoding (smallest token id on ties) with the same n-gram
/// blocking as beam search.
pub fn greedy<T: Scalar>(model: &AdaptedModel<T>, doc: &[usize], gamma: Option<&Array2<T>>, decode: &DecodeConfig) -> Result<Vec<usize>> {
    decode.check()?;
    check_budget(model, doc.len(), decode)?;
    let mut out = Vec::new();
    while out.len() < decode.max_length {
        let lp = next_log_probs(model, doc, &out, gamma, decode.no_repeat_ngram)?;
        let mut best = 0;
        for (t, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = t;
            }
        }
        if best == EOS || lp[best] == f64::NEG_INFINITY {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logprob: f64,
}

fn by_score_then_id(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Beam search. Finished hypotheses are ranked by
/// [`length_normalized`] over their length including `<eos>`.
pub fn generate<T: Scalar>(model: &AdaptedModel<T>, doc: &[usize], gamma: Option<&Array2<T>>, decode: &DecodeConfig) -> Result<Vec<usize>> {
    decode.check()?;
    check_budget(model, doc.len(), decode)?;
    let k = decode.beam_size;
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for _ in 0..decode.max_length {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in beams.iter().enumerate() {
            let lp = next_log_probs(model, doc, &hyp.tokens, gamma, decode.no_repeat_ngram)?;
            let mut order: Vec<usize> = (0..lp.len()).filter(|&t| lp[t] > f64::NEG_INFINITY).collect();
            order.sort_by(|&x, &y| lp[y].partial_cmp(&lp[x]).unwrap_or(Ordering::Equal).then(x.cmp(&y)));
            cands.extend(order.into_iter().take(2 * k).map(|t| (hyp.logprob + lp[t], b, t)));
        }
        cands.sort_by(by_score_then_id);
        let mut next = Vec::with_capacity(k);
        for (rank, &(score, b, t)) in cands.iter().enumerate() {
            if t == EOS {
                if rank < k {
                    let tokens = beams[b].tokens.clone();
                    let norm = length_normalized(score, tokens.len() + 1, decode.length_penalty);
                    finished.push((norm, tokens));
                }
            } else {
                let mut tokens = beams[b].tokens.clone();
                tokens.push(t);
                next.push(Hyp { tokens, logprob: score });
            }
            if next.len() == k {
                break;
            }
        }
        if next.is_empty() {
            break;
        }
        beams = next;
        if finished.len() >= k {
            break;
        }
    }
    if finished.len() < k {
        finished.extend(
            beams
                .into_iter()
                .map(|h| (length_normalized(h.logprob, h.tokens.len(), decode.length_penalty), h.tokens)),
        );
    }
    let mut best = 0;
    for (i, (s, _)) in finished.iter().enumerate() {
        if *s > finished[best].0 {
            best = i;
        }
    }
    Ok(finished.swap_remove(best).1)
}
