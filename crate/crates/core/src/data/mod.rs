//! Parallel corpora: types, on-disk format, subsampling and multilingual
//! tagging. Synthetic toy tasks live in [`toy`].
//!
//! On disk a corpus named `prefix` is three files: `prefix.src` and
//! `prefix.tgt` (line-aligned UTF-8, one sentence per line) and the sidecar
//! `prefix.meta.json` carrying languages, per-pair provenance and domain
//! (run-length encoded), and free-form generation metadata.

pub mod toy;

use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext, KdError, Result};
use crate::util::{suffixed, write_atomic};

pub use toy::{generate_toy_task, toy_mapping, LexicalMapping, ToyTaskSpec};

const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() || code.chars().any(|c| c.is_whitespace() || c == '<' || c == '>') {
            return Err(KdError::Config(format!("invalid language id {code:?}")));
        }
        Ok(Self(code))
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    /// Reserved source-side token announcing this target language, e.g. `<2de>`.
    pub fn tag(&self) -> String {
        format!("<2{}>", self.0)
    }
}

impl TryFrom<String> for LanguageId {
    type Error = KdError;
    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<LanguageId> for String {
    fn from(l: LanguageId) -> String {
        l.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "teacher", rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic(String),
}

impl Provenance {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, Provenance::Synthetic(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub provenance: Provenance,
    pub domain: String,
}

impl SentencePair {
    pub fn real(source: impl Into<String>, target: impl Into<String>, domain: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            provenance: Provenance::Real,
            domain: domain.into(),
        }
    }
}

/// Ordered, immutable list of aligned sentence pairs for one language pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    src_lang: LanguageId,
    tgt_lang: LanguageId,
}

fn valid_side(s: &str) -> bool {
    !s.trim().is_empty() && !s.contains(['\n', '\r'])
}

impl ParallelCorpus {
    pub fn new(src_lang: LanguageId, tgt_lang: LanguageId, pairs: Vec<SentencePair>) -> Result<Self> {
        if let Some(i) = pairs
            .iter()
            .position(|p| !valid_side(&p.source) || !valid_side(&p.target))
        {
            return Err(KdError::Usage(format!(
                "pair {i} has an empty side or an embedded line break"
            )));
        }
        Ok(Self {
            pairs,
            src_lang,
            tgt_lang,
        })
    }

    pub fn empty(src_lang: LanguageId, tgt_lang: LanguageId) -> Self {
        Self {
            pairs: Vec::new(),
            src_lang,
            tgt_lang,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn src_lang(&self) -> &LanguageId {
        &self.src_lang
    }

    pub fn tgt_lang(&self) -> &LanguageId {
        &self.tgt_lang
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.target.as_str())
    }

    /// First `n` pairs (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        Self {
            pairs: self.pairs.iter().take(n).cloned().collect(),
            src_lang: self.src_lang.clone(),
            tgt_lang: self.tgt_lang.clone(),
        }
    }
}

/// Line-level cleaning applied by [`load_corpus`].
#[derive(Clone, Debug)]
pub struct CleaningRules {
    /// Pairs with either side longer than this many characters are dropped.
    pub max_chars: usize,
}

impl Default for CleaningRules {
    fn default() -> Self {
        Self { max_chars: 256 }
    }
}

#[derive(Serialize, Deserialize)]
struct Segment {
    count: usize,
    provenance: Provenance,
    domain: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    src_lang: LanguageId,
    tgt_lang: LanguageId,
    size: usize,
    segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    generation: serde_json::Value,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).at(path)?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            String::from_utf8(line.to_vec()).map_err(|_| KdError::Decode {
                path: path.to_owned(),
                line: i + 1,
            })
        })
        .collect()
}

/// Loads `prefix.src` / `prefix.tgt` with the default [`CleaningRules`].
pub fn load_corpus(prefix: &Path, src_lang: LanguageId, tgt_lang: LanguageId) -> Result<ParallelCorpus> {
    load_corpus_with(prefix, src_lang, tgt_lang, &CleaningRules::default())
}

/// Loads a corpus, trimming lines and dropping a pair when either side is
/// empty after trimming or longer than `rules.max_chars`.
///
/// When the `prefix.meta.json` sidecar is present, provenance and domain
/// labels come from it; otherwise every pair is `Real` in domain `"default"`.
pub fn load_corpus_with(
    prefix: &Path,
    src_lang: LanguageId,
    tgt_lang: LanguageId,
    rules: &CleaningRules,
) -> Result<ParallelCorpus> {
    let src_path = suffixed(prefix, ".src");
    let tgt_path = suffixed(prefix, ".tgt");
    let src = read_lines(&src_path)?;
    let tgt = read_lines(&tgt_path)?;
    if src.len() != tgt.len() {
        return Err(KdError::Alignment {
            src: src_path,
            tgt: tgt_path,
            src_lines: src.len(),
            tgt_lines: tgt.len(),
        });
    }
    let meta_path = suffixed(prefix, ".meta.json");
    let labels: Option<Vec<(Provenance, String)>> = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).at(&meta_path)?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| format_err(&meta_path, e))?;
        if sidecar.src_lang != src_lang || sidecar.tgt_lang != tgt_lang {
            return Err(format_err(
                &meta_path,
                format!(
                    "sidecar languages {}->{} differ from requested {src_lang}->{tgt_lang}",
                    sidecar.src_lang, sidecar.tgt_lang
                ),
            ));
        }
        if sidecar.size != src.len() {
            return Err(format_err(
                &meta_path,
                format!("sidecar lists {} pairs, files hold {}", sidecar.size, src.len()),
            ));
        }
        let mut labels = Vec::with_capacity(sidecar.size);
        for seg in sidecar.segments {
            labels.extend(std::iter::repeat_n((seg.provenance, seg.domain), seg.count));
        }
        if labels.len() != src.len() {
            return Err(format_err(&meta_path, "segment counts do not sum to corpus size"));
        }
        Some(labels)
    } else {
        None
    };
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.into_iter().zip(tgt).enumerate() {
        let (s, t) = (s.trim(), t.trim());
        if s.is_empty() || t.is_empty() {
            continue;
        }
        if s.chars().count() > rules.max_chars || t.chars().count() > rules.max_chars {
            continue;
        }
        let (provenance, domain) = match &labels {
            Some(l) => l[i].clone(),
            None => (Provenance::Real, "default".to_string()),
        };
        pairs.push(SentencePair {
            source: s.to_string(),
            target: t.to_string(),
            provenance,
            domain,
        });
    }
    ParallelCorpus::new(src_lang, tgt_lang, pairs)
}

/// Writes `prefix.src`, `prefix.tgt` and `prefix.meta.json`.
pub fn save_corpus(corpus: &ParallelCorpus, prefix: &Path, generation: serde_json::Value) -> Result<()> {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in &corpus.pairs {
        src.push_str(&p.source);
        src.push('\n');
        tgt.push_str(&p.target);
        tgt.push('\n');
    }
    let mut segments: Vec<Segment> = Vec::new();
    for p in &corpus.pairs {
        match segments.last_mut() {
            Some(s) if s.provenance == p.provenance && s.domain == p.domain => s.count += 1,
            _ => segments.push(Segment {
                count: 1,
                provenance: p.provenance.clone(),
                domain: p.domain.clone(),
            }),
        }
    }
    let sidecar = Sidecar {
        format_version: SIDECAR_VERSION,
        src_lang: corpus.src_lang.clone(),
        tgt_lang: corpus.tgt_lang.clone(),
        size: corpus.len(),
        segments,
        generation,
    };
    write_atomic(&suffixed(prefix, ".src"), src.as_bytes())?;
    write_atomic(&suffixed(prefix, ".tgt"), tgt.as_bytes())?;
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&suffixed(prefix, ".meta.json"), json.as_bytes())
}

/// Reads the free-form `generation` block of a corpus sidecar.
pub fn read_generation_metadata(prefix: &Path) -> Result<serde_json::Value> {
    let meta_path = suffixed(prefix, ".meta.json");
    let text = fs::read_to_string(&meta_path).at(&meta_path)?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| format_err(&meta_path, e))?;
    Ok(sidecar.generation)
}

/// Uniform sample of `n` pairs without replacement, kept in corpus order.
pub fn subsample(corpus: &ParallelCorpus, n: usize, seed: u64) -> Result<ParallelCorpus> {
    if n > corpus.len() {
        return Err(KdError::Size(format!(
            "cannot draw {n} pairs from a corpus of {}",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
    idx.sort_unstable();
    Ok(ParallelCorpus {
        pairs: idx.into_iter().map(|i| corpus.pairs[i].clone()).collect(),
        src_lang: corpus.src_lang.clone(),
        tgt_lang: corpus.tgt_lang.clone(),
    })
}

/// Merges bilingual corpora into one multilingual corpus.
///
/// Every source sentence gets the reserved tag of its corpus's language
/// (`"<2de> "` prefix) and pairs are interleaved round-robin. Corpora must
/// agree on one side's language; the other side becomes `multi`.
pub fn tag_multilingual(corpora: &[(ParallelCorpus, LanguageId)]) -> Result<ParallelCorpus> {
    let multi = LanguageId::new("multi")?;
    if corpora.is_empty() {
        return Ok(ParallelCorpus::empty(multi.clone(), multi));
    }
    let first = &corpora[0].0;
    let same_src = corpora.iter().all(|(c, _)| c.src_lang == first.src_lang);
    let same_tgt = corpora.iter().all(|(c, _)| c.tgt_lang == first.tgt_lang);
    let (src_lang, tgt_lang) = match (same_src, same_tgt) {
        (true, true) => (first.src_lang.clone(), first.tgt_lang.clone()),
        (true, false) => (first.src_lang.clone(), multi),
        (false, true) => (multi, first.tgt_lang.clone()),
        (false, false) => {
            return Err(KdError::Config(
                "multilingual corpora must share their source or their target language".into(),
            ))
        }
    };
    let tags: Vec<String> = corpora.iter().map(|(_, l)| l.tag()).collect();
    for (corpus, _) in corpora {
        for p in &corpus.pairs {
            if let Some(tag) = tags
                .iter()
                .find(|t| p.source.contains(t.as_str()) || p.target.contains(t.as_str()))
            {
                return Err(KdError::ReservedToken(format!(
                    "corpus text already contains the reserved tag {tag}: {:?}",
                    p.source
                )));
            }
        }
    }
    let longest = corpora.iter().map(|(c, _)| c.len()).max().unwrap_or(0);
    let mut pairs = Vec::with_capacity(corpora.iter().map(|(c, _)| c.len()).sum());
    for i in 0..longest {
        for ((corpus, _), tag) in corpora.iter().zip(&tags) {
            if let Some(p) = corpus.pairs.get(i) {
                let mut p = p.clone();
                p.source = format!("{tag} {}", p.source);
                pairs.push(p);
            }
        }
    }
    ParallelCorpus::new(src_lang, tgt_lang, pairs)
}
