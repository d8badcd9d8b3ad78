//! Synthetic corpus construction: every source sentence is translated by a
//! teacher and paired with its top beam hypothesis.
//!
//! File-backed jobs append finished chunks to `<output>.partial.jsonl` and
//! record the number of completed lines in `<output>.journal.json`, so an
//! interrupted job resumes where it stopped. Both files are removed once the
//! corpus is saved.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, save_corpus, LanguageId, ParallelCorpus, Provenance, SentencePair};
use crate::decode::{decode_batch, frame_source, DecodeConfig, Hypothesis};
use crate::error::{format_err, IoContext, KdError, Result};
use crate::model::{load_checkpoint, ModelConfig, ModelParams};
use crate::tokenizer::{Tokenizers, UNK};
use crate::util::{sha256_file, suffixed, unix_timestamp, write_atomic};

fn default_chunk() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillJob {
    pub teacher: PathBuf,
    pub tokenizer: PathBuf,
    /// Corpus prefix (`<source>.src` / `<source>.tgt`).
    pub source: PathBuf,
    pub src_lang: LanguageId,
    pub tgt_lang: LanguageId,
    #[serde(default = "default_decode")]
    pub decode: DecodeConfig,
    pub output: PathBuf,
    pub teacher_id: String,
    /// Sentences translated between journal updates.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

fn default_decode() -> DecodeConfig {
    DecodeConfig::beam(4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTarget {
    pub text: String,
    /// The kept hypothesis hit `max_len`, or the top hypothesis was unusable.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutput {
    pub corpus: ParallelCorpus,
    /// Indices of pairs whose target came from a flagged hypothesis.
    pub flagged: Vec<usize>,
}

/// Picks the target text from a sentence's ranked hypotheses.
///
/// The best hypothesis is used unless it detokenizes to an empty line, in
/// which case the best non-empty one is taken; line breaks become spaces.
fn choose_target(tok: &Tokenizers, hyps: &[Hypothesis]) -> Result<SyntheticTarget> {
    for (rank, h) in hyps.iter().enumerate() {
        let raw = tok.tgt.decode(h.content())?;
        let text = raw.replace(['\n', '\r'], " ").trim().to_string();
        if !text.is_empty() {
            let flagged = !h.terminated || rank > 0 || text != raw;
            return Ok(SyntheticTarget { text, flagged });
        }
    }
    let unk = tok.tgt.specials()[UNK as usize].clone();
    Ok(SyntheticTarget { text: unk, flagged: true })
}

/// Translates a block of sources, in order.
fn translate_block(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    sources: &[&str],
    dc: &DecodeConfig,
) -> Result<Vec<SyntheticTarget>> {
    let framed: Vec<Vec<u32>> = sources.iter().map(|s| frame_source(tok, s)).collect();
    let mut order: Vec<usize> = (0..framed.len()).collect();
    order.sort_by_key(|&i| framed[i].len());
    let sorted: Vec<&[u32]> = order.iter().map(|&i| framed[i].as_slice()).collect();
    let hyps = decode_batch(cfg, params, &sorted, dc, 0)?;
    let mut out: Vec<Option<SyntheticTarget>> = vec![None; sources.len()];
    for (&i, h) in order.iter().zip(&hyps) {
        out[i] = Some(choose_target(tok, h)?);
    }
    Ok(out.into_iter().map(|t| t.expect("every source decoded")).collect())
}

fn assemble(corpus: &ParallelCorpus, targets: Vec<SyntheticTarget>, teacher_id: &str) -> Result<DistillOutput> {
    let mut flagged = Vec::new();
    let pairs = corpus
        .pairs()
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (p, t))| {
            if t.flagged {
                flagged.push(i);
            }
            SentencePair {
                source: p.source.clone(),
                target: t.text,
                provenance: Provenance::Synthetic(teacher_id.to_string()),
                domain: p.domain.clone(),
            }
        })
        .collect();
    let corpus = ParallelCorpus::new(corpus.src_lang().clone(), corpus.tgt_lang().clone(), pairs)?;
    if !flagged.is_empty() {
        warn!("{} synthetic targets flagged", flagged.len());
    }
    Ok(DistillOutput { corpus, flagged })
}

/// Checks that a teacher's vocabulary sizes match the tokenizer.
pub fn check_vocab(cfg: &ModelConfig, tok: &Tokenizers) -> Result<()> {
    if cfg.src_vocab != tok.src.len() || cfg.tgt_vocab != tok.tgt.len() {
        return Err(KdError::Config(format!(
            "teacher vocabularies {}/{} do not match tokenizer sizes {}/{}",
            cfg.src_vocab,
            cfg.tgt_vocab,
            tok.src.len(),
            tok.tgt.len()
        )));
    }
    Ok(())
}

/// In-memory distillation of `corpus` with an already loaded teacher.
pub fn distill_corpus(
    cfg: &ModelConfig,
    params: &ModelParams,
    tok: &Tokenizers,
    corpus: &ParallelCorpus,
    dc: &DecodeConfig,
    teacher_id: &str,
) -> Result<DistillOutput> {
    check_vocab(cfg, tok)?;
    dc.validate()?;
    let sources: Vec<&str> = corpus.sources().collect();
    let targets = translate_block(cfg, params, tok, &sources, dc)?;
    assemble(corpus, targets, teacher_id)
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Journal {
    teacher_sha256: String,
    source_sha256: String,
    decode: DecodeConfig,
    completed: usize,
}

fn read_partial(path: &Path, completed: usize) -> Result<Vec<SyntheticTarget>> {
    if completed == 0 {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).at(path)?;
    let done: Vec<SyntheticTarget> = text
        .lines()
        .take(completed)
        .map(|l| serde_json::from_str(l).map_err(|e| format_err(path, e)))
        .collect::<Result<_>>()?;
    if done.len() != completed {
        return Err(format_err(path, format!("journal claims {completed} lines, found {}", done.len())));
    }
    Ok(done)
}

/// Runs a file-backed job, resuming from its journal when one matches.
pub fn distill(job: &DistillJob) -> Result<DistillOutput> {
    job.decode.validate()?;
    if job.chunk_size == 0 {
        return Err(KdError::Validation(vec!["chunk_size must be positive".into()]));
    }
    let tok = Tokenizers::load(&job.tokenizer)?;
    let ck = load_checkpoint(&job.teacher, None)?;
    check_vocab(&ck.config, &tok)?;
    if let Some(want) = ck.meta.get("vocab_sha256").and_then(|v| v.as_str()) {
        let have = tok.fingerprint();
        if want != have {
            return Err(KdError::Config(format!(
                "teacher was trained with vocabulary {want}, job tokenizer is {have}"
            )));
        }
    }
    let corpus = load_corpus(&job.source, job.src_lang.clone(), job.tgt_lang.clone())?;
    let teacher_sha256 = sha256_file(&job.teacher)?;
    let source_sha256 = sha256_file(&suffixed(&job.source, ".src"))?;

    let journal_path = suffixed(&job.output, ".journal.json");
    let partial_path = suffixed(&job.output, ".partial.jsonl");
    let mut journal = Journal {
        teacher_sha256: teacher_sha256.clone(),
        source_sha256,
        decode: job.decode.clone(),
        completed: 0,
    };
    if journal_path.exists() {
        let text = fs::read_to_string(&journal_path).at(&journal_path)?;
        let old: Journal = serde_json::from_str(&text).map_err(|e| format_err(&journal_path, e))?;
        if (&old.teacher_sha256, &old.source_sha256, &old.decode)
            == (&journal.teacher_sha256, &journal.source_sha256, &journal.decode)
        {
            journal.completed = old.completed;
            info!("resuming distillation at line {}", old.completed);
        } else {
            warn!("journal belongs to a different job; starting over");
        }
    }
    let mut targets = read_partial(&partial_path, journal.completed)?;
    // Rewrite the partial file so it holds exactly the journaled lines.
    let mut body = String::new();
    for t in &targets {
        body.push_str(&serde_json::to_string(t).expect("target serializes"));
        body.push('\n');
    }
    write_atomic(&partial_path, body.as_bytes())?;

    let sources: Vec<&str> = corpus.sources().collect();
    while targets.len() < sources.len() {
        let start = targets.len();
        let end = (start + job.chunk_size).min(sources.len());
        let block = translate_block(&ck.config, &ck.params, &tok, &sources[start..end], &job.decode)?;
        let mut f = OpenOptions::new().append(true).open(&partial_path).at(&partial_path)?;
        let mut lines = String::new();
        for t in &block {
            lines.push_str(&serde_json::to_string(t).expect("target serializes"));
            lines.push('\n');
        }
        f.write_all(lines.as_bytes()).at(&partial_path)?;
        f.sync_data().at(&partial_path)?;
        targets.extend(block);
        journal.completed = targets.len();
        let j = serde_json::to_string_pretty(&journal).expect("journal serializes");
        write_atomic(&journal_path, j.as_bytes())?;
        info!("distilled {}/{}", targets.len(), sources.len());
    }

    let out = assemble(&corpus, targets, &job.teacher_id)?;
    let generation = serde_json::json!({
        "teacher_id": job.teacher_id,
        "teacher_checkpoint_sha256": teacher_sha256,
        "decode": job.decode,
        "timestamp": unix_timestamp(),
        "flagged": out.flagged,
    });
    save_corpus(&out.corpus, &job.output, generation)?;
    fs::remove_file(&journal_path).at(&journal_path)?;
    fs::remove_file(&partial_path).at(&partial_path)?;
    Ok(out)
}

#[cfg(test)]
mod tests;
