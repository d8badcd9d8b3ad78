//! Byte-level BPE.
//!
//! Ids are laid out as: special tokens first (`PAD`, `BOS`, `EOS`, `UNK`,
//! then language tags such as `<2de>`), then the 256 single bytes, then one
//! id per learned merge in priority order.
//!
//! Text is pre-split into chunks made of a whitespace run followed by a
//! non-whitespace run, so `"a  bc d"` becomes `["a", "  bc", " d"]`. Merges
//! never cross chunk boundaries. Among equally frequent pairs the
//! lexicographically smallest `(left bytes, right bytes)` is merged first.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext, KdError, Result};
use crate::util::write_atomic;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const BASE_SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const FILE_FORMAT: &str = "kdlab-bpe";
const FILE_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct BpeVocab {
    specials: Vec<String>,
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    merge_rank: HashMap<(u32, u32), u32>,
    target_size: usize,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.specials == other.specials && self.merges == other.merges && self.target_size == other.target_size
    }
}

/// Splits text into whitespace-led chunks; concatenating them gives `text` back.
pub fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let ws_end = rest.find(|c: char| !c.is_whitespace()).unwrap_or(rest.len());
        let end = rest[ws_end..]
            .find(char::is_whitespace)
            .map_or(rest.len(), |i| ws_end + i);
        let (head, tail) = rest.split_at(end);
        rest = tail;
        Some(head)
    })
}

fn special_list(language_tags: &[String]) -> Result<Vec<String>> {
    let mut specials: Vec<String> = BASE_SPECIALS.iter().map(|s| s.to_string()).collect();
    for tag in language_tags {
        if tag.is_empty() || tag.chars().any(char::is_whitespace) {
            return Err(KdError::Config(format!("invalid special token {tag:?}")));
        }
        if specials.contains(tag) {
            return Err(KdError::Config(format!("duplicate special token {tag:?}")));
        }
        specials.push(tag.clone());
    }
    Ok(specials)
}

/// Learns a vocabulary of at most `target_size` entries from `texts`.
///
/// Merging stops early once no adjacent pair occurs at least twice.
pub fn train_bpe<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    target_size: usize,
    language_tags: &[String],
) -> Result<BpeVocab> {
    let specials = special_list(language_tags)?;
    let base = specials.len() + 256;
    if target_size < base {
        return Err(KdError::Config(format!(
            "target_size {target_size} is below the {base} specials and byte tokens"
        )));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    let mut any = false;
    for text in texts {
        any |= !text.is_empty();
        for c in chunks(text) {
            *freq.entry(c).or_default() += 1;
        }
    }
    if !any {
        return Err(KdError::Config("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut words: Vec<(Vec<u32>, u64)> = freq
        .into_iter()
        .map(|(w, n)| (w.bytes().map(|b| b as u32 + specials.len() as u32).collect(), n))
        .collect();
    // Hash-map iteration order is random; sort so that pair counting and
    // merge application visit words identically on every run.
    words.sort();

    let mut vocab = BpeVocab::from_parts(specials, Vec::new(), target_size)?;
    while vocab.tokens.len() < target_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|(pa, na), (pb, nb)| {
                na.cmp(nb).then_with(|| {
                    let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                    let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some((pair, _)) = best else { break };
        let new_id = vocab.push_merge(pair)?;
        for (syms, _) in &mut words {
            merge_in_place(syms, pair, new_id);
        }
    }
    Ok(vocab)
}

fn merge_in_place(syms: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            syms[out] = new_id;
            i += 2;
        } else {
            syms[out] = syms[i];
            i += 1;
        }
        out += 1;
    }
    syms.truncate(out);
}

impl BpeVocab {
    fn from_parts(specials: Vec<String>, merges: Vec<(u32, u32)>, target_size: usize) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = specials.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let mut v = Self {
            token_to_id: HashMap::new(),
            merge_rank: HashMap::new(),
            specials,
            merges: Vec::new(),
            tokens,
            target_size,
        };
        for id in v.specials.len()..v.tokens.len() {
            v.token_to_id.insert(v.tokens[id].clone(), id as u32);
        }
        for m in merges {
            v.push_merge(m)?;
        }
        Ok(v)
    }

    fn push_merge(&mut self, (l, r): (u32, u32)) -> Result<u32> {
        let n_special = self.specials.len() as u32;
        let n = self.tokens.len() as u32;
        if l < n_special || r < n_special || l >= n || r >= n {
            return Err(KdError::Config(format!("merge ({l}, {r}) refers to an invalid token")));
        }
        let mut bytes = self.tokens[l as usize].clone();
        bytes.extend_from_slice(&self.tokens[r as usize]);
        if self.token_to_id.contains_key(&bytes) {
            return Err(KdError::Config(format!("merge ({l}, {r}) duplicates an existing token")));
        }
        self.token_to_id.insert(bytes.clone(), n);
        self.merge_rank.insert((l, r), self.merges.len() as u32);
        self.merges.push((l, r));
        self.tokens.push(bytes);
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn num_specials(&self) -> usize {
        self.specials.len()
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    /// Id of a special token such as `"<2de>"`.
    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials.iter().position(|s| s == name).map(|i| i as u32)
    }

    /// Byte string of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        (!self.is_special(id)).then(|| self.tokens.get(id as usize).map(Vec::as_slice)).flatten()
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let n_special = self.specials.len() as u32;
        let mut syms: Vec<u32> = chunk.bytes().map(|b| b as u32 + n_special).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_in_place(&mut syms, pair, self.base_len() + rank);
        }
        out.extend(syms);
    }

    fn base_len(&self) -> u32 {
        self.specials.len() as u32 + 256
    }

    /// Encodes text to ids. Language tags (specials after `<unk>`) appearing
    /// in the text map to their reserved ids; no BOS/EOS framing is added.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        let tags = &self.specials[BASE_SPECIALS.len()..];
        let mut rest = text;
        while !rest.is_empty() {
            let next_tag = tags
                .iter()
                .enumerate()
                .filter_map(|(i, t)| rest.find(t.as_str()).map(|pos| (pos, i, t.len())))
                .min();
            match next_tag {
                Some((pos, i, len)) => {
                    chunks(&rest[..pos]).for_each(|c| self.encode_chunk(c, &mut out));
                    out.push((BASE_SPECIALS.len() + i) as u32);
                    rest = &rest[pos + len..];
                }
                None => {
                    chunks(rest).for_each(|c| self.encode_chunk(c, &mut out));
                    rest = "";
                }
            }
        }
        out
    }

    /// Decodes ids to text, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| KdError::Range(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if !self.is_special(id) {
                bytes.extend_from_slice(tok);
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    target_size: usize,
    specials: Vec<String>,
    merges: Vec<[u32; 2]>,
    /// Hex-encoded bytes of every non-special token, by id.
    tokens: Vec<String>,
}

impl VocabFile {
    fn from_vocab(v: &BpeVocab) -> Self {
        Self {
            format: FILE_FORMAT.into(),
            version: FILE_VERSION,
            target_size: v.target_size,
            specials: v.specials.clone(),
            merges: v.merges.iter().map(|&(l, r)| [l, r]).collect(),
            tokens: v.tokens[v.specials.len()..].iter().map(hex::encode).collect(),
        }
    }

    fn into_vocab(self, path: &Path) -> Result<BpeVocab> {
        if self.format != FILE_FORMAT || self.version != FILE_VERSION {
            return Err(format_err(
                path,
                format!("unsupported vocabulary format {} v{}", self.format, self.version),
            ));
        }
        let merges = self.merges.iter().map(|m| (m[0], m[1])).collect();
        let v = BpeVocab::from_parts(self.specials, merges, self.target_size).map_err(|e| format_err(path, e))?;
        let table: Vec<String> = v.tokens[v.specials.len()..].iter().map(hex::encode).collect();
        if table != self.tokens {
            return Err(format_err(path, "token table does not match the merge list"));
        }
        Ok(v)
    }
}

/// Source and target vocabularies; one shared vocabulary when `shared`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizers {
    pub src: BpeVocab,
    pub tgt: BpeVocab,
    pub shared: bool,
}

#[derive(Serialize, Deserialize)]
struct TokenizersFile {
    shared: bool,
    src: VocabFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tgt: Option<VocabFile>,
}

impl Tokenizers {
    /// Trains one vocabulary on sources and targets together when `shared`,
    /// otherwise one per side. Language tags are added to the source side.
    pub fn train<'a>(
        sources: impl IntoIterator<Item = &'a str>,
        targets: impl IntoIterator<Item = &'a str>,
        target_size: usize,
        shared: bool,
        language_tags: &[String],
    ) -> Result<Self> {
        if shared {
            let v = train_bpe(sources.into_iter().chain(targets), target_size, language_tags)?;
            Ok(Self {
                src: v.clone(),
                tgt: v,
                shared,
            })
        } else {
            Ok(Self {
                src: train_bpe(sources, target_size, language_tags)?,
                tgt: train_bpe(targets, target_size, &[])?,
                shared,
            })
        }
    }

    /// Unframed source and target ids of a sentence pair.
    pub fn encode_pair(&self, src: &str, tgt: &str) -> (Vec<u32>, Vec<u32>) {
        (self.src.encode(src), self.tgt.encode(tgt))
    }

    pub fn to_json(&self) -> String {
        let file = TokenizersFile {
            shared: self.shared,
            src: VocabFile::from_vocab(&self.src),
            tgt: (!self.shared).then(|| VocabFile::from_vocab(&self.tgt)),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    /// SHA-256 of the serialized vocabularies; stored in checkpoint metadata.
    pub fn fingerprint(&self) -> String {
        crate::util::sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let file: TokenizersFile = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
        let src = file.src.into_vocab(path)?;
        let tgt = match (file.shared, file.tgt) {
            (true, None) => src.clone(),
            (false, Some(t)) => t.into_vocab(path)?,
            _ => return Err(format_err(path, "target vocabulary presence disagrees with `shared`")),
        };
        Ok(Self {
            src,
            tgt,
            shared: file.shared,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BASE: usize = 4 + 256;

    #[test]
    fn chunking_partitions_text() {
        let c: Vec<&str> = chunks("a  bc d").collect();
        assert_eq!(c, ["a", "  bc", " d"]);
        let c: Vec<&str> = chunks("  lead trail  ").collect();
        assert_eq!(c, ["  lead", " trail", "  "]);
        assert_eq!(chunks("").count(), 0);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_bpe(["aaab aaab"], BASE + 1, &[]).unwrap();
        assert_eq!(v.merges().len(), 1);
        let (l, r) = v.merges()[0];
        assert_eq!(v.token_bytes(l).unwrap(), b"a");
        assert_eq!(v.token_bytes(r).unwrap(), b"a");
        let aa = v.id_of(b"aa").unwrap();
        assert_eq!(v.encode("aaab"), [aa, v.id_of(b"a").unwrap(), v.id_of(b"b").unwrap()]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // ("a","b"), (" ","c") and ("c","d") all occur twice; the space sorts first.
        let v = train_bpe(["ab cd ab cd"], BASE + 2, &[]).unwrap();
        let pair = |i: usize| {
            let (l, r) = v.merges()[i];
            (v.token_bytes(l).unwrap(), v.token_bytes(r).unwrap())
        };
        assert_eq!(pair(0), (&b" "[..], &b"c"[..]));
        assert_eq!(pair(1), (&b" c"[..], &b"d"[..]));
    }

    #[test]
    fn degenerate_sizes() {
        assert!(matches!(train_bpe([""], 1000, &[]), Err(KdError::Config(_))));
        assert!(matches!(train_bpe(Vec::<&str>::new(), 1000, &[]), Err(KdError::Config(_))));
        assert!(matches!(train_bpe(["abc"], BASE - 1, &[]), Err(KdError::Config(_))));
        let v = train_bpe(["hello hello"], BASE, &[]).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), BASE);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let v = train_bpe(["abc"], BASE + 50, &[]).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn specials_are_dropped_and_bad_ids_rejected() {
        let v = train_bpe(["the cat the cat"], BASE + 5, &[]).unwrap();
        let mut ids = vec![BOS];
        ids.extend(v.encode("the cat"));
        ids.extend([EOS, PAD, PAD]);
        assert_eq!(v.decode(&ids).unwrap(), "the cat");
        assert!(matches!(v.decode(&[v.len() as u32]), Err(KdError::Range(_))));
    }

    #[test]
    fn language_tags_get_reserved_ids() {
        let tags = vec!["<2de>".to_string(), "<2fr>".to_string()];
        let v = train_bpe(["hallo welt", "bonjour"], BASE + 20, &tags).unwrap();
        assert_eq!(v.special_id("<2de>"), Some(4));
        let ids = v.encode("<2fr> bonjour");
        assert_eq!(ids[0], 5);
        assert!(ids[1..].iter().all(|&i| !v.is_special(i)));
        assert_eq!(v.decode(&ids).unwrap(), " bonjour");
    }

    #[test]
    fn training_is_deterministic() {
        let text = "low lower lowest newer wider new wide low";
        let a = train_bpe([text], BASE + 30, &[]).unwrap();
        let b = train_bpe([text], BASE + 30, &[]).unwrap();
        assert_eq!(VocabFile::from_vocab(&a).merges, VocabFile::from_vocab(&b).merges);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for shared in [true, false] {
            let t = Tokenizers::train(["s1 s2 s1 s2"], ["t1 t1 t3 t3"], BASE + 10, shared, &[]).unwrap();
            let path = dir.path().join("vocab.json");
            t.save(&path).unwrap();
            assert_eq!(Tokenizers::load(&path).unwrap(), t);
        }
        let path = dir.path().join("broken.json");
        fs::write(&path, "{\"shared\": true}").unwrap();
        assert!(matches!(Tokenizers::load(&path), Err(KdError::Format { .. })));
    }

    fn training_corpus() -> Vec<String> {
        (0..60)
            .map(|i| format!("word{} and wörd{} naïve café {}", i % 7, i % 5, i * 37 % 101))
            .collect()
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_text(s in any::<String>()) {
            let corpus = training_corpus();
            let v = train_bpe(corpus.iter().map(String::as_str), BASE + 60, &[]).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        }

        #[test]
        fn larger_vocab_never_lengthens_encodings(s in "[a-zé0-9 ]{0,40}") {
            let corpus = training_corpus();
            let texts = || corpus.iter().map(String::as_str);
            let mut prev = usize::MAX;
            for extra in [0, 10, 40, 120] {
                let v = train_bpe(texts(), BASE + extra, &[]).unwrap();
                let n = v.encode(&s).len();
                prop_assert!(n <= prev);
                prev = n;
            }
        }
    }
}
