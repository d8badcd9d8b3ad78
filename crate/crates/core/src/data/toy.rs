//! Synthetic word-substitution translation task.
//!
//! Source words are `s0 … s{Vs-1}`, target words `t0 … t{Vt-1}`. A hidden
//! lexical mapping `m` sends each source word to one target word; the clean
//! translation of a sentence is `m` applied token by token. Training targets
//! are corrupted by i.i.d. substitution, test targets never are.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LanguageId, ParallelCorpus, SentencePair};
use crate::error::{KdError, Result};

const PERTURB_STREAM: u64 = 0x5eed_d0a1;
const TEST_STREAM: u64 = 1;

fn default_test_size() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub vocab_size_src: usize,
    pub vocab_size_tgt: usize,
    /// Inclusive `[min, max]` sentence length in tokens.
    pub length_range: [usize; 2],
    pub mapping_seed: u64,
    pub noise_rate: f64,
    /// Fraction of mapping entries re-drawn to simulate a shifted domain.
    #[serde(default)]
    pub domain_perturbation: Option<f64>,
    pub size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Source words are drawn with weight `1 / (rank+1)^s`; 0 means uniform.
    #[serde(default)]
    pub zipf_exponent: f64,
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size_src == 0 {
            errs.push("vocab_size_src must be at least 1".to_string());
        }
        if self.vocab_size_tgt == 0 {
            errs.push("vocab_size_tgt must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            errs.push(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        let [lo, hi] = self.length_range;
        if lo < 1 {
            errs.push("length_range minimum must be at least 1".to_string());
        }
        if lo > hi {
            errs.push(format!("length_range [{lo}, {hi}] is empty"));
        }
        if let Some(f) = self.domain_perturbation {
            if !(0.0..=1.0).contains(&f) {
                errs.push(format!("domain_perturbation {f} outside [0, 1]"));
            }
        }
        let needs_alternatives = self.noise_rate > 0.0 || self.domain_perturbation.is_some_and(|f| f > 0.0);
        if needs_alternatives && self.vocab_size_tgt < 2 {
            errs.push("noise or perturbation needs vocab_size_tgt >= 2".to_string());
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            errs.push(format!("zipf_exponent {} must be finite and >= 0", self.zipf_exponent));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(KdError::Validation(errs))
        }
    }

    /// Domain label attached to generated pairs.
    pub fn domain(&self) -> String {
        match self.domain_perturbation {
            Some(f) if f > 0.0 => format!("toy-shift{f:.2}"),
            _ => "toy".to_string(),
        }
    }

    /// Number of mapping entries a perturbation of this spec rewrites.
    pub fn perturbed_entries(&self) -> usize {
        let f = self.domain_perturbation.unwrap_or(0.0);
        ((f * self.vocab_size_src as f64).ceil() as usize).min(self.vocab_size_src)
    }
}

pub fn src_word(i: usize) -> String {
    format!("s{i}")
}

pub fn tgt_word(j: usize) -> String {
    format!("t{j}")
}

fn parse_word(prefix: char, w: &str) -> Option<usize> {
    w.strip_prefix(prefix)?.parse().ok()
}

/// The hidden source→target word mapping of a toy task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexicalMapping {
    table: Vec<usize>,
    vocab_size_tgt: usize,
}

impl LexicalMapping {
    pub fn target_of(&self, src: usize) -> usize {
        self.table[src]
    }

    pub fn entries(&self) -> &[usize] {
        &self.table
    }

    pub fn vocab_size_src(&self) -> usize {
        self.table.len()
    }

    pub fn vocab_size_tgt(&self) -> usize {
        self.vocab_size_tgt
    }

    /// Number of source words mapped differently by `other`.
    pub fn differing_entries(&self, other: &LexicalMapping) -> usize {
        self.table.iter().zip(&other.table).filter(|(a, b)| a != b).count()
    }

    /// Clean translation of a whitespace-separated source sentence, or `None`
    /// if it contains a word outside the source vocabulary.
    pub fn translate(&self, source: &str) -> Option<String> {
        let words: Option<Vec<String>> = source
            .split_whitespace()
            .map(|w| {
                parse_word('s', w)
                    .filter(|&i| i < self.table.len())
                    .map(|i| tgt_word(self.table[i]))
            })
            .collect();
        Some(words?.join(" "))
    }

    /// Positions where `target` disagrees with the clean translation of
    /// `source`, counting length differences as mismatches.
    pub fn token_errors(&self, source: &str, target: &str) -> (usize, usize) {
        let clean: Vec<Option<usize>> = source
            .split_whitespace()
            .map(|w| parse_word('s', w).and_then(|i| self.table.get(i).copied()))
            .collect();
        let hyp: Vec<Option<usize>> = target.split_whitespace().map(|w| parse_word('t', w)).collect();
        let errors = clean
            .iter()
            .zip(&hyp)
            .filter(|(c, h)| c.is_none() || c != h)
            .count()
            + clean.len().abs_diff(hyp.len());
        (errors, clean.len())
    }
}

/// Draws the mapping for `spec`, including its domain perturbation if any.
pub fn toy_mapping(spec: &ToyTaskSpec) -> Result<LexicalMapping> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.mapping_seed);
    let mut table: Vec<usize> = (0..spec.vocab_size_src)
        .map(|_| rng.random_range(0..spec.vocab_size_tgt))
        .collect();
    let changes = spec.perturbed_entries();
    if changes > 0 {
        let mut prng = ChaCha8Rng::seed_from_u64(spec.mapping_seed ^ PERTURB_STREAM);
        for i in rand::seq::index::sample(&mut prng, spec.vocab_size_src, changes) {
            table[i] = other_than(&mut prng, table[i], spec.vocab_size_tgt);
        }
    }
    Ok(LexicalMapping {
        table,
        vocab_size_tgt: spec.vocab_size_tgt,
    })
}

/// Uniform draw from `0..n` excluding `x`.
fn other_than(rng: &mut impl Rng, x: usize, n: usize) -> usize {
    let r = rng.random_range(0..n - 1);
    if r >= x {
        r + 1
    } else {
        r
    }
}

struct SentenceSampler {
    words: Option<WeightedIndex<f64>>,
    vocab: usize,
    lengths: [usize; 2],
}

impl SentenceSampler {
    fn new(spec: &ToyTaskSpec) -> Self {
        let words = (spec.zipf_exponent > 0.0).then(|| {
            WeightedIndex::new((0..spec.vocab_size_src).map(|r| (r as f64 + 1.0).powf(-spec.zipf_exponent)))
                .expect("zipf weights are positive")
        });
        Self {
            words,
            vocab: spec.vocab_size_src,
            lengths: spec.length_range,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.random_range(self.lengths[0]..=self.lengths[1]);
        (0..len)
            .map(|_| match &self.words {
                Some(w) => w.sample(rng),
                None => rng.random_range(0..self.vocab),
            })
            .collect()
    }
}

fn join(ids: impl Iterator<Item = String>) -> String {
    ids.collect::<Vec<_>>().join(" ")
}

fn generate(
    spec: &ToyTaskSpec,
    mapping: &LexicalMapping,
    rng: &mut ChaCha8Rng,
    n: usize,
    noise: f64,
) -> Vec<SentencePair> {
    let sampler = SentenceSampler::new(spec);
    let domain = spec.domain();
    (0..n)
        .map(|_| {
            let src = sampler.sample(rng);
            let tgt = src.iter().map(|&s| {
                let clean = mapping.target_of(s);
                if noise > 0.0 && rng.random_bool(noise) {
                    other_than(rng, clean, spec.vocab_size_tgt)
                } else {
                    clean
                }
            });
            let tgt = join(tgt.map(tgt_word));
            SentencePair::real(join(src.into_iter().map(src_word)), tgt, domain.clone())
        })
        .collect()
}

/// Generates `spec.size` noisy training pairs and `spec.test_size` clean test
/// pairs. The test sources come from an independent random stream, so specs
/// that differ only in noise or perturbation share the same test sources.
pub fn generate_toy_task(spec: &ToyTaskSpec, seed: u64) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let mapping = toy_mapping(spec)?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(TEST_STREAM);
    let (src, tgt) = (LanguageId::new("src")?, LanguageId::new("tgt")?);
    let train = generate(spec, &mapping, &mut train_rng, spec.size, spec.noise_rate);
    let test = generate(spec, &mapping, &mut test_rng, spec.test_size, 0.0);
    Ok((
        ParallelCorpus::new(src.clone(), tgt.clone(), train)?,
        ParallelCorpus::new(src, tgt, test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> ToyTaskSpec {
        ToyTaskSpec {
            vocab_size_src: 50,
            vocab_size_tgt: 40,
            length_range: [2, 6],
            mapping_seed: 11,
            noise_rate: noise,
            domain_perturbation: None,
            size: 200,
            test_size: 50,
            zipf_exponent: 0.0,
        }
    }

    #[test]
    fn noiseless_targets_follow_the_mapping() {
        let s = spec(0.0);
        let m = toy_mapping(&s).unwrap();
        let (train, test) = generate_toy_task(&s, 3).unwrap();
        for p in train.pairs().iter().chain(test.pairs()) {
            assert_eq!(m.translate(&p.source).unwrap(), p.target);
        }
    }

    #[test]
    fn corruption_fraction_matches_noise_rate() {
        let s = ToyTaskSpec {
            size: 10_000,
            ..spec(0.3)
        };
        let m = toy_mapping(&s).unwrap();
        let (train, test) = generate_toy_task(&s, 5).unwrap();
        let (mut errs, mut total) = (0, 0);
        for p in train.pairs() {
            let (e, n) = m.token_errors(&p.source, &p.target);
            errs += e;
            total += n;
        }
        let frac = errs as f64 / total as f64;
        assert!((frac - 0.3).abs() < 0.02, "corrupted fraction {frac}");
        // ~40k tokens: 4 binomial standard deviations is about 0.009.
        let sd = (0.3f64 * 0.7 / total as f64).sqrt();
        assert!((frac - 0.3).abs() < 4.0 * sd);
        for p in test.pairs() {
            assert_eq!(m.token_errors(&p.source, &p.target).0, 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(0.3);
        assert_eq!(generate_toy_task(&s, 9).unwrap(), generate_toy_task(&s, 9).unwrap());
        assert_ne!(generate_toy_task(&s, 9).unwrap().0, generate_toy_task(&s, 10).unwrap().0);
    }

    #[test]
    fn perturbation_changes_exactly_the_requested_entries() {
        let base = toy_mapping(&spec(0.0)).unwrap();
        for (f, expect) in [(0.2, 10), (0.01, 1), (0.5, 25), (1.0, 50), (0.0, 0), (0.105, 6)] {
            let shifted = toy_mapping(&ToyTaskSpec {
                domain_perturbation: Some(f),
                ..spec(0.0)
            })
            .unwrap();
            assert_eq!(base.differing_entries(&shifted), expect, "fraction {f}");
        }
    }

    #[test]
    fn shifted_test_set_shares_sources() {
        let (_, a) = generate_toy_task(&spec(0.3), 4).unwrap();
        let shifted = ToyTaskSpec {
            domain_perturbation: Some(0.2),
            ..spec(0.0)
        };
        let (_, b) = generate_toy_task(&shifted, 4).unwrap();
        assert!(a.sources().eq(b.sources()));
        assert!(b.pairs().iter().all(|p| p.domain == "toy-shift0.20"));
    }

    #[test]
    fn zipf_sources_favour_low_ranks() {
        let s = ToyTaskSpec {
            zipf_exponent: 1.0,
            size: 2000,
            ..spec(0.0)
        };
        let (train, _) = generate_toy_task(&s, 1).unwrap();
        let count = |w: &str| train.sources().flat_map(str::split_whitespace).filter(|x| *x == w).count();
        assert!(count("s0") > 5 * count("s20"));
    }

    #[test]
    fn validation_lists_every_violation() {
        let bad = ToyTaskSpec {
            noise_rate: 1.0,
            length_range: [0, 3],
            ..spec(0.0)
        };
        match bad.validate() {
            Err(KdError::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
