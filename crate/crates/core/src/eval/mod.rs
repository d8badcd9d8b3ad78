//! Corpus BLEU, teacher-forced predictive entropy, the top-k sampling sweep,
//! and Real/Synthetic report assembly.
//!
//! BLEU tokenization: the text is NFC-normalized, every ASCII punctuation
//! character is surrounded by spaces, and the result is split on Unicode
//! whitespace. Scores are corpus-level BLEU-4 with uniform weights.

mod report;

use std::collections::HashMap;

use kdlab_compute::kernels::{entropy_from_log_probs, log_softmax};
use kdlab_compute::Graph;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::data::ParallelCorpus;
use crate::decode::{translate_corpus, DecodeConfig, DecodeMode};
use crate::error::{KdError, Result};
use crate::model::{forward, Batch, Bound, ModelConfig, ModelParams};
use crate::tokenizer::Tokenizers;

pub use report::{build_report, EvalReport, MetricRecord, ReportDelta, RunSummary, Series, TargetKind};

/// Tokens used for BLEU matching.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.nfc() {
        if c.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_owned).collect()
}

/// Clipped n-gram matches and totals for n = 1..=4, plus both lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h = bleu_tokens(hyp);
        let r = bleu_tokens(reference);
        let mut s = Self {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Self::default()
        };
        for n in 1..=4 {
            let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
            for g in r.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
            for g in h.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    fn add(&mut self, o: &Self) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU in `[0, 100]`. With `smooth`, n ≥ 2 precisions use add-one counts.
    pub fn score(&self, smooth: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..4 {
            let (m, t) = if smooth && n > 0 {
                (self.matches[n] + 1, self.totals[n] + 1)
            } else {
                (self.matches[n], self.totals[n])
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_p += (m as f64 / t as f64).ln() / 4.0;
        }
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0);
        100.0 * (log_p + bp).exp()
    }
}

/// Corpus BLEU-4 of `hyps` against line-aligned `refs`.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], smooth: bool) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(KdError::Usage(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::sentence(h.as_ref(), r.as_ref()));
    }
    Ok(total.score(smooth))
}

/// Teacher-forced statistics over the non-pad target positions of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherForced {
    /// Mean negative log-likelihood per token (nats).
    pub nll: f64,
    /// Mean entropy of the next-token distribution (nats).
    pub entropy: f64,
    pub tokens: usize,
}

const EVAL_BATCH: usize = 64;

/// Runs the model over reference targets and averages per-token NLL and
/// predictive entropy.
pub fn teacher_forced(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    corpus: &ParallelCorpus,
) -> Result<TeacherForced> {
    if corpus.is_empty() {
        return Err(KdError::Usage("teacher-forced statistics need a non-empty corpus".into()));
    }
    let mut pairs: Vec<(Vec<u32>, Vec<u32>)> = corpus
        .pairs()
        .iter()
        .map(|p| tok.encode_pair(&p.source, &p.target))
        .collect();
    pairs.sort_by_key(|(s, t)| (s.len(), t.len()));
    let (mut nll, mut ent, mut n) = (0.0f64, 0.0f64, 0usize);
    for chunk in pairs.chunks(EVAL_BATCH) {
        let refs: Vec<(&[u32], &[u32])> = chunk.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        let batch = Batch::framed(&refs)?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, false);
        let logits = forward(cfg, &p, &mut g, &batch)?;
        let l = g.value(logits);
        for (row, (&valid, &target)) in batch.tgt_valid.iter().zip(&batch.tgt_out).enumerate() {
            if !valid {
                continue;
            }
            let lp = log_softmax(l.row(row));
            nll -= lp[target] as f64;
            ent += entropy_from_log_probs(&lp) as f64;
            n += 1;
        }
    }
    Ok(TeacherForced {
        nll: nll / n as f64,
        entropy: ent / n as f64,
        tokens: n,
    })
}

/// Average teacher-forced entropy of the next-token distribution (nats).
pub fn predictive_entropy(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    corpus: &ParallelCorpus,
) -> Result<f64> {
    Ok(teacher_forced(cfg, params, tok, corpus)?.entropy)
}

pub const DEFAULT_SWEEP_KS: [usize; 5] = [1, 2, 5, 10, 20];
pub const DEFAULT_SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKPoint {
    pub k: usize,
    /// BLEU per sampling seed, in seed order.
    pub bleu: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKSweep {
    pub temperature: f64,
    pub points: Vec<TopKPoint>,
}

impl TopKSweep {
    pub fn point(&self, k: usize) -> Option<&TopKPoint> {
        self.points.iter().find(|p| p.k == k)
    }

    /// `BLEU(1) − BLEU(k)` on seed means.
    pub fn degradation(&self, k: usize) -> Option<f64> {
        Some(self.point(1)?.mean - self.point(k)?.mean)
    }
}

/// Decodes `corpus` sources with top-k sampling (temperature 1) for every
/// `k` and seed and scores each run against the references.
pub fn topk_sweep(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    corpus: &ParallelCorpus,
    ks: &[usize],
    seeds: &[u64],
    base: &DecodeConfig,
) -> Result<TopKSweep> {
    if ks.first() != Some(&1) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KdError::Usage(format!("ks must be strictly ascending and start at 1, got {ks:?}")));
    }
    if seeds.is_empty() {
        return Err(KdError::Usage("top-k sweep needs at least one seed".into()));
    }
    let temperature = 1.0;
    let sources: Vec<&str> = corpus.sources().collect();
    let refs: Vec<&str> = corpus.targets().collect();
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let dc = DecodeConfig {
            mode: DecodeMode::TopK { k, temperature },
            ..base.clone()
        };
        let scores = seeds
            .iter()
            .map(|&seed| bleu(&translate_corpus(cfg, params, tok, &sources, &dc, seed)?, &refs, false))
            .collect::<Result<Vec<f64>>>()?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
        points.push(TopKPoint {
            k,
            bleu: scores,
            mean,
            spread: var.sqrt(),
        });
    }
    Ok(TopKSweep { temperature, points })
}

#[cfg(test)]
mod tests;
