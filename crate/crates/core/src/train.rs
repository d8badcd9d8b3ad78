//! Training: label-smoothed cross-entropy, Adam with warmup and exponential
//! decay, token-budget batches, and multi-phase plans that switch corpora
//! mid-run while keeping the optimizer state.
//!
//! Steps are numbered from 0. Step `s` belongs to the phase with
//! `start_step <= s < end_step` and applies learning rate `lr_at(s + 1)`.
//! Validation records carry the number of updates completed when they ran.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use kdlab_compute::{Graph, Tensor};
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ParallelCorpus;
use crate::decode::DecodeConfig;
use crate::error::{format_err, IoContext, KdError, Result};
use crate::eval::{bleu, teacher_forced};
use crate::model::{forward, init, save_checkpoint, Batch, Bound, Checkpoint, ModelConfig, ModelParams};
use crate::tokenizer::{Tokenizers, PAD};
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub corpus: String,
    pub start_step: u64,
    pub end_step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

fn d_peak() -> f64 {
    1e-3
}
fn d_warmup() -> u64 {
    100
}
fn d_gamma() -> f64 {
    0.5
}
fn d_interval() -> u64 {
    500
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_batch_tokens() -> usize {
    1024
}
fn d_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub phases: Vec<Phase>,
    #[serde(default = "d_peak")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    /// Multiplicative decay γ applied once per `decay_interval` steps after warmup.
    #[serde(default = "d_gamma")]
    pub decay_rate: f64,
    #[serde(default = "d_interval")]
    pub decay_interval: u64,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    /// Padded tokens per batch (`sentences × longest side`).
    #[serde(default = "d_batch_tokens")]
    pub batch_tokens: usize,
    pub total_steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub eval_every: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainPlan {
    /// One-phase plan over `corpus` with default hyperparameters.
    pub fn single(corpus: &str, total_steps: u64, seed: u64) -> Self {
        Self::switching(&[(corpus, total_steps)], seed)
    }

    /// Consecutive phases of the given lengths.
    pub fn switching(phases: &[(&str, u64)], seed: u64) -> Self {
        let mut start = 0;
        let phases: Vec<Phase> = phases
            .iter()
            .map(|&(c, n)| {
                let p = Phase {
                    corpus: c.to_string(),
                    start_step: start,
                    end_step: start + n,
                };
                start += n;
                p
            })
            .collect();
        Self {
            phases,
            peak_lr: d_peak(),
            warmup_steps: d_warmup().min(start),
            decay_rate: d_gamma(),
            decay_interval: d_interval(),
            label_smoothing: d_smoothing(),
            batch_tokens: d_batch_tokens(),
            total_steps: start,
            seed,
            checkpoint_every: 0,
            eval_every: 0,
            clip_norm: d_clip(),
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.phases.is_empty() {
            errs.push("plan has no phases".to_string());
        }
        let mut expect = 0;
        for p in &self.phases {
            if p.start_step != expect {
                errs.push(format!("phase {:?} starts at {} instead of {expect}", p.corpus, p.start_step));
            }
            if p.end_step <= p.start_step {
                errs.push(format!("phase {:?} is empty", p.corpus));
            }
            expect = p.end_step;
        }
        if expect != self.total_steps {
            errs.push(format!("phases end at {expect} but total_steps is {}", self.total_steps));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.warmup_steps > self.total_steps {
            errs.push("warmup_steps exceeds total_steps".to_string());
        }
        if !(self.peak_lr > 0.0) {
            errs.push("peak_lr must be positive".to_string());
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            errs.push(format!("decay_rate {} outside (0, 1]", self.decay_rate));
        }
        if self.decay_interval == 0 {
            errs.push("decay_interval must be positive".to_string());
        }
        if self.batch_tokens == 0 {
            errs.push("batch_tokens must be positive".to_string());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            errs.push("clip_norm must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(KdError::Validation(errs))
        }
    }

    pub fn phase_at(&self, step: u64) -> Option<&Phase> {
        self.phases.iter().find(|p| p.start_step <= step && step < p.end_step)
    }
}

/// Linear warmup to `peak_lr`, then `peak_lr · γ^((step − warmup) / interval)`.
pub fn lr_at(step: u64, plan: &TrainPlan) -> f64 {
    if plan.warmup_steps > 0 && step <= plan.warmup_steps {
        return plan.peak_lr * step as f64 / plan.warmup_steps as f64;
    }
    let after = step.saturating_sub(plan.warmup_steps) as f64;
    plan.peak_lr * plan.decay_rate.powf(after / plan.decay_interval as f64)
}

/// Mean label-smoothed cross-entropy of `[n × V]` logits over non-pad targets.
pub fn smoothed_loss(logits: &Tensor<f32>, targets: &[usize], smoothing: f64, pad: Option<usize>) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let l = g.constant(logits.clone());
    let loss = g.smoothed_cross_entropy(l, targets, smoothing as f32, pad)?;
    Ok(g.value(loss).item()? as f64)
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(KdError::Usage("parameter, gradient and state counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(KdError::Usage(format!("shape mismatch for parameter {i}")));
        }
        if !g.is_finite() {
            return Err(KdError::NonFiniteGradient {
                name: format!("#{i}"),
                step: state.t,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    let (b1f, b2f, eps) = (b1 as f32, b2 as f32, cfg.eps as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1f * *mi + (1.0 - b1f) * gi;
            *vi = b2f * *vi + (1.0 - b2f) * gi * gi;
            *x -= step * *mi / (vi.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub corpus: String,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Updates completed when the evaluation ran.
    pub step: u64,
    pub val_loss: f64,
    pub bleu: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// One JSON object per line, steps and evaluations interleaved in order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        let mut push = |line: LogLine| {
            out.push_str(&serde_json::to_string(&line).expect("log serializes"));
            out.push('\n');
        };
        for s in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                push(LogLine::Eval(e.clone()));
            }
            push(LogLine::Step(s.clone()));
        }
        for e in evals {
            push(LogLine::Eval(e.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))? {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Eval(e) => log.evals.push(e),
            }
        }
        Ok(log)
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

type Pair = (Vec<u32>, Vec<u32>);

/// Endless stream of token-budget batches over one corpus. Each epoch is
/// shuffled, cut into pools that are sorted by length and split into
/// batches, and the batch order is shuffled again.
struct BatchStream {
    pairs: Vec<Pair>,
    batch_tokens: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

const POOL: usize = 2048;

impl BatchStream {
    fn new(pairs: Vec<Pair>, batch_tokens: usize, seed: u64) -> Self {
        Self {
            pairs,
            batch_tokens,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
        }
    }

    fn cost(&self, i: usize) -> usize {
        let (s, t) = &self.pairs[i];
        s.len().max(t.len()) + 1
    }

    fn refill(&mut self) {
        let mut idx: Vec<usize> = (0..self.pairs.len()).collect();
        idx.shuffle(&mut self.rng);
        let mut batches = Vec::new();
        for pool in idx.chunks_mut(POOL) {
            pool.sort_by_key(|&i| self.cost(i));
            let mut cur: Vec<usize> = Vec::new();
            let mut longest = 0;
            for &i in pool.iter() {
                let c = self.cost(i);
                if !cur.is_empty() && (cur.len() + 1) * longest.max(c) > self.batch_tokens {
                    batches.push(std::mem::take(&mut cur));
                    longest = 0;
                }
                longest = longest.max(c);
                cur.push(i);
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
        }
        batches.shuffle(&mut self.rng);
        batches.reverse();
        self.queue = batches;
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            self.refill();
        }
        let ids = self.queue.pop().expect("non-empty corpus yields batches");
        let pairs: Vec<(&[u32], &[u32])> = ids
            .iter()
            .map(|&i| (self.pairs[i].0.as_slice(), self.pairs[i].1.as_slice()))
            .collect();
        Batch::framed(&pairs)
    }
}

/// Tokenizes a corpus, dropping pairs whose framed sides exceed `max_len`.
pub fn tokenize_corpus(tok: &Tokenizers, corpus: &ParallelCorpus, max_len: usize) -> Vec<Pair> {
    let mut dropped = 0;
    let pairs: Vec<Pair> = corpus
        .pairs()
        .iter()
        .map(|p| tok.encode_pair(&p.source, &p.target))
        .filter(|(s, t)| {
            let ok = !s.is_empty() && s.len() < max_len && t.len() < max_len;
            dropped += usize::from(!ok);
            ok
        })
        .collect();
    if dropped > 0 {
        warn!("dropped {dropped} pairs longer than max_len {max_len}");
    }
    pairs
}

/// Where training starts from.
#[derive(Clone, Debug)]
pub enum Start {
    Fresh { seed: u64 },
    Checkpoint(Box<Checkpoint>),
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Held-out corpus for periodic validation loss and greedy BLEU.
    pub validation: Option<&'a ParallelCorpus>,
    /// Directory for cadence checkpoints (`step-NNNNNN.ckpt`).
    pub checkpoint_dir: Option<&'a Path>,
    /// Extra metadata stored in every checkpoint written by the run.
    pub checkpoint_meta: serde_json::Map<String, serde_json::Value>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
    /// Global update count including the starting checkpoint's steps.
    pub global_step: u64,
}

/// Validation loss and greedy BLEU on `corpus`.
pub fn validate_model(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    corpus: &ParallelCorpus,
) -> Result<(f64, f64)> {
    let tf = teacher_forced(cfg, params, tok, corpus)?;
    let sources: Vec<&str> = corpus.sources().collect();
    let refs: Vec<&str> = corpus.targets().collect();
    let hyps = crate::decode::translate_corpus(cfg, params, tok, &sources, &DecodeConfig::greedy(), 0)?;
    let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
    Ok((tf.nll, bleu(&hyp_refs, &refs, false)?))
}

/// Executes `plan`, drawing each step's batch from the active phase's corpus.
pub fn run(
    plan: &TrainPlan,
    cfg: &ModelConfig,
    tok: &Tokenizers,
    corpora: &HashMap<String, &ParallelCorpus>,
    start: Start,
    opts: &RunOptions<'_>,
) -> Result<TrainOutcome> {
    plan.validate()?;
    cfg.validate()?;
    if cfg.src_vocab != tok.src.len() || cfg.tgt_vocab != tok.tgt.len() {
        return Err(KdError::Config(format!(
            "model vocabularies {}/{} differ from tokenizer sizes {}/{}",
            cfg.src_vocab,
            cfg.tgt_vocab,
            tok.src.len(),
            tok.tgt.len()
        )));
    }
    let (mut params, base_step) = match start {
        Start::Fresh { seed } => (init(cfg, seed)?, 0),
        Start::Checkpoint(ck) => {
            if &ck.config != cfg {
                return Err(KdError::Checkpoint("checkpoint config differs from the run config".into()));
            }
            (ck.params, ck.step)
        }
    };
    let mut streams: Vec<BatchStream> = Vec::with_capacity(plan.phases.len());
    for (i, phase) in plan.phases.iter().enumerate() {
        let corpus = corpora
            .get(&phase.corpus)
            .ok_or_else(|| KdError::Config(format!("plan names unknown corpus {:?}", phase.corpus)))?;
        let pairs = tokenize_corpus(tok, corpus, cfg.max_len);
        if pairs.is_empty() {
            return Err(KdError::Size(format!("corpus {:?} has no usable pairs", phase.corpus)));
        }
        let seed = plan.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        streams.push(BatchStream::new(pairs, plan.batch_tokens, seed));
    }

    let mut log = TrainLog::default();
    let mut adam = AdamState::new(params.tensors());
    let evaluate = |params: &ModelParams, done: u64, log: &mut TrainLog| -> Result<()> {
        if let Some(v) = opts.validation {
            let (val_loss, b) = validate_model(cfg, params, tok, v)?;
            info!("step {done}: val_loss {val_loss:.4} bleu {b:.2}");
            log.evals.push(EvalRecord {
                step: done,
                val_loss,
                bleu: b,
            });
        }
        Ok(())
    };
    if plan.eval_every > 0 {
        evaluate(&params, 0, &mut log)?;
    }
    for (pi, phase) in plan.phases.iter().enumerate() {
        for step in phase.start_step..phase.end_step {
            let batch = streams[pi].next_batch()?;
            let lr = lr_at(step + 1, plan);
            let mut g = Graph::training(plan.seed, base_step + step);
            let bound = Bound::new(&mut g, &params, true);
            let logits = forward(cfg, &bound, &mut g, &batch)?;
            let loss = g.smoothed_cross_entropy(logits, &batch.tgt_out, plan.label_smoothing as f32, Some(PAD as usize))?;
            let loss_value = g.value(loss).item()? as f64;
            let mut grads = g.backward(loss)?;
            let mut gs: Vec<Tensor<f32>> = Vec::with_capacity(params.len());
            for (i, &v) in bound.vars().iter().enumerate() {
                let gt = grads.take(v).unwrap_or_else(|| Tensor::zeros(params.tensors()[i].shape()));
                if !gt.is_finite() {
                    return Err(KdError::NonFiniteGradient {
                        name: params.names()[i].clone(),
                        step,
                    });
                }
                gs.push(gt);
            }
            drop(g);
            let norm = gs
                .iter()
                .flat_map(|t| t.data())
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if let Some(c) = plan.clip_norm {
                if norm > c {
                    let s = (c / norm) as f32;
                    gs.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= s));
                }
            }
            adam_step(params.tensors_mut(), &gs, &mut adam, lr, &plan.adam)?;
            debug!("step {step} loss {loss_value:.4} lr {lr:.2e} norm {norm:.3}");
            log.steps.push(StepRecord {
                step,
                corpus: phase.corpus.clone(),
                loss: loss_value,
                lr,
                tokens: batch.target_tokens(),
                grad_norm: norm,
            });
            let done = step + 1;
            if plan.eval_every > 0 && done % plan.eval_every == 0 {
                evaluate(&params, done, &mut log)?;
            }
            if let Some(dir) = opts.checkpoint_dir {
                if plan.checkpoint_every > 0 && done % plan.checkpoint_every == 0 {
                    let ck = Checkpoint {
                        config: cfg.clone(),
                        params: params.clone(),
                        step: base_step + done,
                        meta: checkpoint_meta(opts, log.last_eval()),
                    };
                    save_checkpoint(&ck, &dir.join(format!("step-{done:06}.ckpt")))?;
                }
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        global_step: base_step + plan.total_steps,
    })
}

/// Metadata for a checkpoint: the caller's entries plus the latest metrics.
pub fn checkpoint_meta(opts: &RunOptions<'_>, eval: Option<&EvalRecord>) -> serde_json::Value {
    let mut m = opts.checkpoint_meta.clone();
    if let Some(e) = eval {
        m.insert(
            "metrics".into(),
            serde_json::json!({"step": e.step, "val_loss": e.val_loss, "bleu": e.bleu}),
        );
    }
    serde_json::Value::Object(m)
}
