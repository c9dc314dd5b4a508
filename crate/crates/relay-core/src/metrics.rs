//! Corpus-level 4-gram BLEU (multi-bleu semantics: clipped modified
//! precisions summed over the corpus, geometric mean, brevity penalty,
//! no smoothing, case-sensitive) and chrF (character n-grams 1..6,
//! corpus-summed counts, F-beta with beta=2, mean over orders).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub chrf: f64,
    pub n_sentences: usize,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub bp: f64,
}

#[derive(Clone, Debug)]
pub struct BleuStats {
    pub precisions: [f64; 4],
    pub bp: f64,
    pub bleu: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over pre-tokenized sentences.
pub fn bleu_tokens(hyps: &[Vec<&str>], refs: &[Vec<&str>]) -> Result<BleuStats> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::data(format!(
            "bleu needs equal non-empty corpora, got {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &count) in &hc {
                total[n - 1] += count;
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        precisions[n] = if total[n] > 0 {
            matched[n] as f64 / total[n] as f64
        } else {
            0.0
        };
    }
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuStats {
        precisions,
        bp,
        bleu,
        hyp_len,
        ref_len,
    })
}

/// Whitespace-tokenizing convenience wrapper.
pub fn bleu(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<BleuStats> {
    let h: Vec<Vec<&str>> = hyps
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect())
        .collect();
    let r: Vec<Vec<&str>> = refs
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect())
        .collect();
    bleu_tokens(&h, &r)
}

const CHRF_MAX_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

/// chrF on raw character streams with whitespace removed. Orders with no
/// n-grams on either side are skipped so short identical corpora score 100.
pub fn chrf(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::data(format!(
            "chrf needs equal non-empty corpora, got {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let strip = |s: &str| -> Vec<char> { s.chars().filter(|c| !c.is_whitespace()).collect() };
    let hyp_chars: Vec<Vec<char>> = hyps.iter().map(|s| strip(s.as_ref())).collect();
    let ref_chars: Vec<Vec<char>> = refs.iter().map(|s| strip(s.as_ref())).collect();

    let beta2 = CHRF_BETA * CHRF_BETA;
    let mut f_sum = 0.0;
    let mut orders = 0;
    for n in 1..=CHRF_MAX_ORDER {
        let mut matched = 0usize;
        let mut total_hyp = 0usize;
        let mut total_ref = 0usize;
        for (h, r) in hyp_chars.iter().zip(&ref_chars) {
            let mut hc: HashMap<&[char], usize> = HashMap::new();
            if h.len() >= n {
                for w in h.windows(n) {
                    *hc.entry(w).or_insert(0) += 1;
                }
            }
            let mut rc: HashMap<&[char], usize> = HashMap::new();
            if r.len() >= n {
                for w in r.windows(n) {
                    *rc.entry(w).or_insert(0) += 1;
                }
            }
            total_hyp += hc.values().sum::<usize>();
            total_ref += rc.values().sum::<usize>();
            for (gram, &count) in &hc {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
        if total_hyp == 0 && total_ref == 0 {
            continue;
        }
        let prec = if total_hyp > 0 {
            matched as f64 / total_hyp as f64
        } else {
            0.0
        };
        let rec = if total_ref > 0 {
            matched as f64 / total_ref as f64
        } else {
            0.0
        };
        let denom = beta2 * prec + rec;
        let f = if denom > 0.0 {
            (1.0 + beta2) * prec * rec / denom
        } else {
            0.0
        };
        f_sum += f;
        orders += 1;
    }
    Ok(if orders == 0 {
        0.0
    } else {
        100.0 * f_sum / orders as f64
    })
}

/// Score detokenized hypothesis lines against reference lines.
pub fn score_corpus(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<EvalReport> {
    let b = bleu(hyps, refs)?;
    let c = chrf(hyps, refs)?;
    Ok(EvalReport {
        bleu: b.bleu,
        chrf: c,
        n_sentences: hyps.len(),
        p1: b.precisions[0],
        p2: b.precisions[1],
        p3: b.precisions[2],
        p4: b.precisions[3],
        bp: b.bp,
    })
}

impl EvalReport {
    /// Canonical JSON (sorted keys).
    pub fn to_canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&v).expect("canonical json")
    }
}

/// Decode every source sentence of `corpus`, score against the references,
/// and optionally write the hypotheses one per line.
pub fn evaluate<T: crate::tensor::Scalar>(
    relay: &crate::relay::RelayModel,
    store: &crate::params::ParamStore<T>,
    corpus: &crate::data::ParallelCorpus,
    settings: &crate::decode::DecodeSettings,
    hyp_out: Option<&std::path::Path>,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::data("evaluation corpus is empty"));
    }
    let sources: Vec<&str> = corpus.pairs.iter().map(|p| p.src.as_str()).collect();
    let refs: Vec<&str> = corpus.pairs.iter().map(|p| p.tgt.as_str()).collect();
    let hyps = crate::decode::translate_lines(relay, store, &sources, settings)?;
    if let Some(path) = hyp_out {
        let mut text = String::new();
        for h in &hyps {
            text.push_str(h);
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    score_corpus(&hyps, &refs)
}
