//! Autoregressive decoding: greedy, beam search and top-k sampling.
//!
//! All sentences of a call are decoded in lock-step, so every active prefix
//! has the same length and one decoder pass serves the whole set.

use std::path::Path;

use kdlab_compute::kernels::{entropy_from_log_probs, log_softmax_into};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KdError, Result};
use crate::model::{Encoded, ModelConfig, ModelParams};
use crate::tokenizer::{Tokenizers, BOS, EOS};
use crate::util::{suffixed, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
    TopK { k: usize, temperature: f64 },
}

fn default_max_len() -> usize {
    128
}
fn default_alpha() -> f64 {
    1.0
}
fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Maximum number of generated tokens, EOS included.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Final hypotheses are ranked by `logprob / length^alpha`.
    #[serde(default = "default_alpha")]
    pub length_penalty: f64,
    /// Sentences decoded together in one lock-step group.
    #[serde(default = "default_batch")]
    pub batch_sentences: usize,
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self::with_mode(DecodeMode::Greedy)
    }

    pub fn beam(width: usize) -> Self {
        Self::with_mode(DecodeMode::Beam { width })
    }

    pub fn top_k(k: usize, temperature: f64) -> Self {
        Self::with_mode(DecodeMode::TopK { k, temperature })
    }

    fn with_mode(mode: DecodeMode) -> Self {
        Self {
            mode,
            max_len: default_max_len(),
            length_penalty: default_alpha(),
            batch_sentences: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match self.mode {
            DecodeMode::Greedy => {}
            DecodeMode::Beam { width } if width == 0 => errs.push("beam width must be at least 1".to_string()),
            DecodeMode::Beam { .. } => {}
            DecodeMode::TopK { k, temperature } => {
                if k == 0 {
                    errs.push("top-k needs k >= 1".to_string());
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    errs.push(format!("temperature {temperature} must be positive"));
                }
            }
        }
        if self.max_len == 0 {
            errs.push("max_len must be at least 1".to_string());
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            errs.push(format!("length_penalty {} must be >= 0", self.length_penalty));
        }
        if self.batch_sentences == 0 {
            errs.push("batch_sentences must be at least 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(KdError::Validation(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// `BOS`, the generated tokens, and `EOS` if the hypothesis terminated.
    pub tokens: Vec<u32>,
    /// Sum of the model log-probabilities of the generated tokens.
    pub logprob: f64,
    /// `logprob / generated^alpha`.
    pub score: f64,
    /// Entropy (nats) of the full next-token distribution at each step.
    pub entropies: Vec<f64>,
    /// False when `max_len` was reached before EOS.
    pub terminated: bool,
}

impl Hypothesis {
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Generated tokens without BOS and EOS.
    pub fn content(&self) -> &[u32] {
        let end = if self.terminated { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len.max(1) as f64).powf(alpha)
    }
}

#[derive(Clone)]
struct Partial {
    tokens: Vec<u32>,
    logprob: f64,
    entropies: Vec<f64>,
}

impl Partial {
    fn start() -> Self {
        Self {
            tokens: vec![BOS],
            logprob: 0.0,
            entropies: Vec::new(),
        }
    }

    fn extend(&self, tok: u32, lp: f64, entropy: f64) -> Self {
        let mut p = self.clone();
        p.tokens.push(tok);
        p.logprob += lp;
        p.entropies.push(entropy);
        p
    }

    fn finish(self, terminated: bool, alpha: f64) -> Hypothesis {
        let score = normalized(self.logprob, self.tokens.len() - 1, alpha);
        Hypothesis {
            tokens: self.tokens,
            logprob: self.logprob,
            score,
            entropies: self.entropies,
            terminated,
        }
    }
}

/// Log-probabilities and entropy of each row of a logits matrix.
fn step_distributions(logits: &kdlab_compute::Tensor<f32>) -> Vec<(Vec<f32>, f64)> {
    let v = logits.last_dim();
    (0..logits.rows())
        .map(|r| {
            let mut lp = vec![0.0f32; v];
            log_softmax_into(logits.row(r), &mut lp);
            let h = entropy_from_log_probs(&lp) as f64;
            (lp, h)
        })
        .collect()
}

/// Indices of the `k` largest values, largest first, lower index on ties.
fn top_indices(lp: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lp.len()).collect();
    let by = |a: &usize, b: &usize| lp[*b].total_cmp(&lp[*a]).then(a.cmp(b));
    let k = k.min(lp.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by);
        idx.truncate(k);
    }
    idx.sort_by(by);
    idx
}

fn greedy_or_sample(
    cfg: &ModelConfig,
    params: &ModelParams,
    enc: &Encoded,
    dc: &DecodeConfig,
    max_len: usize,
    mut rngs: Option<(Vec<ChaCha8Rng>, usize, f64)>,
) -> Result<Vec<Hypothesis>> {
    let n = enc.batch;
    let mut parts: Vec<Partial> = vec![Partial::start(); n];
    let mut done: Vec<Option<Hypothesis>> = vec![None; n];
    let mut active: Vec<usize> = (0..n).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let sub = enc.select(&active);
        let prefixes: Vec<&[u32]> = active.iter().map(|&i| parts[i].tokens.as_slice()).collect();
        let logits = sub.next_logits(cfg, params, &prefixes)?;
        let dists = step_distributions(&logits);
        let mut still = Vec::with_capacity(active.len());
        for (&i, (lp, h)) in active.iter().zip(dists) {
            let tok = match &mut rngs {
                None => kdlab_compute::kernels::argmax(&lp),
                Some((rngs, k, temp)) => sample_top_k(&lp, *k, *temp, &mut rngs[i]),
            };
            parts[i] = parts[i].extend(tok as u32, lp[tok] as f64, h);
            if tok as u32 == EOS {
                done[i] = Some(parts[i].clone().finish(true, dc.length_penalty));
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    for i in active {
        done[i] = Some(parts[i].clone().finish(false, dc.length_penalty));
    }
    Ok(done.into_iter().map(|h| h.expect("every sentence finishes")).collect())
}

fn sample_top_k(lp: &[f32], k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let top = top_indices(lp, k);
    let max = lp[top[0]] as f64 / temperature;
    let weights: Vec<f64> = top.iter().map(|&i| (lp[i] as f64 / temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *top.last().expect("k >= 1")
}

struct BeamState {
    active: Vec<Partial>,
    pool: Vec<Hypothesis>,
    finished: bool,
}

impl BeamState {
    fn offer(&mut self, h: Hypothesis, width: usize) {
        if self.pool.len() < width {
            self.pool.push(h);
        } else if let Some((worst, w)) = self
            .pool
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
        {
            if h.score > w.score {
                self.pool[worst] = h;
            }
        }
    }

    fn worst_pooled(&self) -> f64 {
        self.pool.iter().map(|h| h.score).fold(f64::INFINITY, f64::min)
    }
}

fn beam_search(
    cfg: &ModelConfig,
    params: &ModelParams,
    enc: &Encoded,
    width: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<Vec<Hypothesis>>> {
    let n = enc.batch;
    let mut states: Vec<BeamState> = (0..n)
        .map(|_| BeamState {
            active: vec![Partial::start()],
            pool: Vec::new(),
            finished: false,
        })
        .collect();
    for step in 0..max_len {
        let mut owner = Vec::new();
        let mut prefixes: Vec<&[u32]> = Vec::new();
        for (i, s) in states.iter().enumerate() {
            if !s.finished {
                for p in &s.active {
                    owner.push(i);
                    prefixes.push(&p.tokens);
                }
            }
        }
        if owner.is_empty() {
            break;
        }
        let sub = enc.select(&owner);
        let logits = sub.next_logits(cfg, params, &prefixes)?;
        let dists = step_distributions(&logits);
        let gen_len = step + 1;
        let mut row = 0;
        for s in states.iter_mut().filter(|s| !s.finished) {
            let beams = s.active.len();
            // (cumulative logprob, beam, token)
            let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(beams * 2 * width);
            for b in 0..beams {
                let lp = &dists[row + b].0;
                for tok in top_indices(lp, 2 * width) {
                    cands.push((s.active[b].logprob + lp[tok] as f64, b, tok));
                }
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            cands.truncate(2 * width);
            let mut next = Vec::with_capacity(width);
            for (rank, &(_, b, tok)) in cands.iter().enumerate() {
                let (lp, h) = (&dists[row + b].0, dists[row + b].1);
                let ext = s.active[b].extend(tok as u32, lp[tok] as f64, h);
                if tok as u32 == EOS {
                    if rank < width {
                        s.offer(ext.finish(true, alpha), width);
                    }
                } else if next.len() < width {
                    next.push(ext);
                }
                if next.len() == width && rank + 1 >= width {
                    break;
                }
            }
            row += beams;
            s.active = next;
            let best_active = s
                .active
                .iter()
                .map(|p| normalized(p.logprob, gen_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if s.active.is_empty() || (s.pool.len() == width && best_active <= s.worst_pooled()) {
                s.finished = true;
            }
        }
    }
    Ok(states
        .into_iter()
        .map(|mut s| {
            if !s.finished {
                for p in std::mem::take(&mut s.active) {
                    s.offer(p.finish(false, alpha), width);
                }
            }
            let mut pool = s.pool;
            pool.sort_by(|a, b| b.score.total_cmp(&a.score));
            pool
        })
        .collect())
}

/// Decodes one lock-step group. Top-k sentence `i` samples from the stream
/// `(seed, streams[i])`.
fn decode_group(
    cfg: &ModelConfig,
    params: &ModelParams,
    sources: &[&[u32]],
    dc: &DecodeConfig,
    seed: u64,
    streams: &[u64],
) -> Result<Vec<Vec<Hypothesis>>> {
    let max_len = dc.max_len.min(cfg.max_len);
    let enc = Encoded::new(cfg, params, sources)?;
    let single = |hyps: Vec<Hypothesis>| hyps.into_iter().map(|h| vec![h]).collect();
    Ok(match dc.mode {
        DecodeMode::Greedy => single(greedy_or_sample(cfg, params, &enc, dc, max_len, None)?),
        DecodeMode::TopK { k, temperature } => {
            let rngs = streams
                .iter()
                .map(|&i| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    r.set_stream(i);
                    r
                })
                .collect();
            single(greedy_or_sample(cfg, params, &enc, dc, max_len, Some((rngs, k, temperature)))?)
        }
        DecodeMode::Beam { width } => beam_search(cfg, params, &enc, width, dc.length_penalty, max_len)?,
    })
}

/// Decodes framed source sequences (tokens followed by EOS).
///
/// Returns, per source, hypotheses sorted best first: one for greedy and
/// top-k, up to `width` for beam search. Top-k sentence `i` samples from
/// its own stream derived from `(seed, i)`.
pub fn decode_batch(
    cfg: &ModelConfig,
    params: &ModelParams,
    sources: &[&[u32]],
    dc: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Vec<Hypothesis>>> {
    dc.validate()?;
    let mut out = Vec::with_capacity(sources.len());
    for (chunk_no, chunk) in sources.chunks(dc.batch_sentences).enumerate() {
        let first = (chunk_no * dc.batch_sentences) as u64;
        let streams: Vec<u64> = (first..first + chunk.len() as u64).collect();
        out.extend(decode_group(cfg, params, chunk, dc, seed, &streams)?);
    }
    Ok(out)
}

/// Decodes one framed source sequence.
pub fn decode(
    cfg: &ModelConfig,
    params: &ModelParams,
    src: &[u32],
    dc: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Hypothesis>> {
    Ok(decode_batch(cfg, params, &[src], dc, seed)?.remove(0))
}

/// Source text encoded and framed for the model.
pub fn frame_source(tok: &Tokenizers, text: &str) -> Vec<u32> {
    let mut ids = tok.src.encode(text);
    ids.push(EOS);
    ids
}

/// Best hypothesis for each source sentence, in input order.
pub fn translate_hypotheses(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    sources: &[&str],
    dc: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Hypothesis>> {
    let framed: Vec<Vec<u32>> = sources.iter().map(|s| frame_source(tok, s)).collect();
    // Group sentences of similar length to limit padding, then restore order.
    let mut order: Vec<usize> = (0..framed.len()).collect();
    order.sort_by_key(|&i| framed[i].len());
    let sorted: Vec<&[u32]> = order.iter().map(|&i| framed[i].as_slice()).collect();
    dc.validate()?;
    let mut hyps: Vec<Option<Hypothesis>> = vec![None; framed.len()];
    for (chunk_no, chunk) in sorted.chunks(dc.batch_sentences).enumerate() {
        let ids = &order[chunk_no * dc.batch_sentences..][..chunk.len()];
        // Sampling streams follow the original position, not the grouping.
        let streams: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
        let results = decode_group(cfg, params, chunk, dc, seed, &streams)?;
        for (&i, mut h) in ids.iter().zip(results) {
            hyps[i] = Some(h.remove(0));
        }
    }
    Ok(hyps.into_iter().map(|h| h.expect("all decoded")).collect())
}

/// Translates source strings, preserving order.
pub fn translate_corpus(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    sources: &[&str],
    dc: &DecodeConfig,
    seed: u64,
) -> Result<Vec<String>> {
    translate_hypotheses(cfg, params, tok, sources, dc, seed)?
        .iter()
        .map(|h| tok.tgt.decode(h.content()))
        .collect()
}

#[derive(Serialize)]
struct SidecarLine<'a> {
    line: usize,
    logprob: f64,
    score: f64,
    terminated: bool,
    entropies: &'a [f64],
}

/// Writes line-aligned translations to `path` and per-line scores and
/// entropy traces to `path.hyps.jsonl`.
pub fn write_translations(path: &Path, texts: &[String], hyps: &[Hypothesis]) -> Result<()> {
    if texts.len() != hyps.len() {
        return Err(KdError::Usage("texts and hypotheses differ in length".into()));
    }
    let mut body = String::new();
    for t in texts {
        if t.contains('\n') {
            return Err(KdError::Usage("translation contains a line break".into()));
        }
        body.push_str(t);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())?;
    let mut side = String::new();
    for (i, h) in hyps.iter().enumerate() {
        let line = SidecarLine {
            line: i,
            logprob: h.logprob,
            score: h.score,
            terminated: h.terminated,
            entropies: &h.entropies,
        };
        side.push_str(&serde_json::to_string(&line).expect("serializable"));
        side.push('\n');
    }
    write_atomic(&suffixed(path, ".hyps.jsonl"), side.as_bytes())
}

#[cfg(test)]
mod tests;
