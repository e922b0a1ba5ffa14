//! Byte-level BPE.
//!
//! Ids 0..4 are the special tokens, ids 4..260 are the 256 byte values, and
//! every id from 260 upward is produced by a learned merge. Because the base
//! alphabet is all bytes, any UTF-8 string (Devanagari, Latin, emoji, mixed)
//! encodes without falling back to `<unk>`.
//!
//! Text is pre-split into chunks of leading whitespace followed by a run of
//! non-whitespace, so merges never span word boundaries and the concatenation
//! of chunks is the original text.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;
pub const BYTE_OFFSET: u32 = NUM_SPECIAL;
pub const MIN_VOCAB: usize = NUM_SPECIAL as usize + 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab too small: {0} < {MIN_VOCAB}")]
    VocabTooSmall(usize),
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("invalid vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// GPT-2 style reversible byte → printable char table, used only to store
/// byte tokens as JSON strings.
fn byte_chars() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next = 256u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(next).expect("valid scalar");
            next += 1;
            c
        };
    }
    table
}

fn bytes_to_display(bytes: &[u8], table: &[char; 256]) -> String {
    bytes.iter().map(|&b| table[b as usize]).collect()
}

fn display_to_bytes(s: &str, inverse: &HashMap<char, u8>) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| {
            inverse
                .get(&c)
                .copied()
                .ok_or_else(|| TokenizerError::Format(format!("character {c:?} is not a byte token")))
        })
        .collect()
}

/// Splits text into whitespace-prefixed words; concatenating the chunks gives
/// back the input.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut seen_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if seen_word {
                chunks.push(&text[start..i]);
                start = i;
                seen_word = false;
            }
        } else {
            seen_word = true;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

/// Learned subword inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    /// Merge rules in learned order: (left, right, result).
    merges: Vec<(u32, u32, u32)>,
    /// Byte content of every id; empty for specials.
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Serialize, Deserialize)]
struct Specials {
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    size: usize,
    merges: Vec<(String, String)>,
    specials: Specials,
}

impl Vocabulary {
    fn base() -> Self {
        let mut tokens = vec![Vec::new(); NUM_SPECIAL as usize];
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], BYTE_OFFSET + b as u32);
            tokens.push(vec![b]);
        }
        Self {
            merges: Vec::new(),
            tokens,
            token_to_id,
            ranks: HashMap::new(),
        }
    }

    /// Registers `left + right`; returns the resulting id (new or existing).
    fn add_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let id = match self.token_to_id.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.token_to_id.insert(bytes.clone(), id);
                self.tokens.push(bytes);
                id
            }
        };
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right, id));
        id
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Merge rules as byte strings, in learned order.
    pub fn merges(&self) -> impl Iterator<Item = (&[u8], &[u8])> + '_ {
        self.merges
            .iter()
            .map(|&(l, r, _)| (self.tokens[l as usize].as_slice(), self.tokens[r as usize].as_slice()))
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if id < NUM_SPECIAL {
            return None;
        }
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_to_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Applies the merge table to one pre-tokenized chunk.
    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk.bytes().map(|b| BYTE_OFFSET + b as u32).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min();
            let Some((_, left, right, id)) = best else {
                break;
            };
            symbols = merge_pair(&symbols, left, right, id);
        }
        out.extend(symbols);
    }

    /// Content token ids for `text` (no specials, no truncation).
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let table = byte_chars();
        let file = VocabFile {
            size: self.size(),
            merges: self
                .merges()
                .map(|(l, r)| (bytes_to_display(l, &table), bytes_to_display(r, &table)))
                .collect(),
            specials: Specials {
                pad: PAD,
                unk: UNK,
                cls: CLS,
                sep: SEP,
            },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        let s = &file.specials;
        if (s.pad, s.unk, s.cls, s.sep) != (PAD, UNK, CLS, SEP) {
            return Err(TokenizerError::Format("special token ids must be pad=0 unk=1 cls=2 sep=3".into()));
        }
        let inverse: HashMap<char, u8> = byte_chars()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let mut vocab = Self::base();
        for (l, r) in &file.merges {
            let (lb, rb) = (display_to_bytes(l, &inverse)?, display_to_bytes(r, &inverse)?);
            let (Some(li), Some(ri)) = (vocab.token_to_id(&lb), vocab.token_to_id(&rb)) else {
                return Err(TokenizerError::Format(format!("merge ({l:?}, {r:?}) uses an undefined token")));
            };
            vocab.add_merge(li, ri);
        }
        if vocab.size() != file.size {
            return Err(TokenizerError::Format(format!(
                "declared size {} but merges produce {}",
                file.size,
                vocab.size()
            )));
        }
        Ok(vocab)
    }
}

fn merge_pair(symbols: &[u32], left: u32, right: u32, id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

struct Word {
    symbols: Vec<u32>,
    freq: i64,
}

type Pair = (u32, u32);

/// Learns merges until the vocabulary holds `target_size` tokens or no
/// adjacent pair remains. The most frequent pair wins; ties go to the pair
/// whose (left bytes, right bytes) sorts first.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if target_size < MIN_VOCAB {
        return Err(TokenizerError::VocabTooSmall(target_size));
    }

    let mut chunk_freq: BTreeMap<&str, i64> = BTreeMap::new();
    for text in corpus {
        for chunk in pre_tokenize(text.as_ref()) {
            *chunk_freq.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<Word> = chunk_freq
        .into_iter()
        .map(|(chunk, freq)| Word {
            symbols: chunk.bytes().map(|b| BYTE_OFFSET + b as u32).collect(),
            freq,
        })
        .collect();

    let mut vocab = Vocabulary::base();
    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.symbols.windows(2) {
            *counts.entry((p[0], p[1])).or_default() += w.freq;
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    // Max-heap on (count, smallest merged pair first); stale entries are
    // skipped when their count no longer matches.
    type Entry = (i64, Reverse<(Vec<u8>, Vec<u8>)>, Pair);
    let key = |v: &Vocabulary, p: Pair| (v.tokens[p.0 as usize].clone(), v.tokens[p.1 as usize].clone());
    let mut heap: BinaryHeap<Entry> = counts
        .iter()
        .map(|(&p, &c)| (c, Reverse(key(&vocab, p)), p))
        .collect();

    while vocab.size() < target_size {
        let Some((count, _, pair)) = heap.pop() else {
            break;
        };
        if counts.get(&pair).copied().unwrap_or(0) != count || count <= 0 {
            continue;
        }
        let id = vocab.add_merge(pair.0, pair.1);
        let mut touched: HashSet<Pair> = HashSet::new();
        let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let w = &mut words[wi];
            if !w.symbols.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            for p in w.symbols.windows(2) {
                let p = (p[0], p[1]);
                *counts.entry(p).or_default() -= w.freq;
                touched.insert(p);
            }
            w.symbols = merge_pair(&w.symbols, pair.0, pair.1, id);
            for p in w.symbols.windows(2) {
                let p = (p[0], p[1]);
                *counts.entry(p).or_default() += w.freq;
                where_.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        counts.remove(&pair);
        for p in touched {
            match counts.get(&p).copied() {
                Some(c) if c > 0 && p != pair => heap.push((c, Reverse(key(&vocab, p)), p)),
                Some(c) if c <= 0 => {
                    counts.remove(&p);
                }
                _ => {}
            }
        }
    }
    Ok(vocab)
}

/// Fixed-length model input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub label: Option<usize>,
}

impl EncodedExample {
    /// Number of positions with mask 1.
    pub fn len_unpadded(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// `[CLS] content [SEP] [PAD]...`, exactly `max_len` long. Content beyond
/// `max_len - 2` tokens is dropped from the tail.
///
/// Panics if `max_len < 2`.
pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> EncodedExample {
    assert!(max_len >= 2, "max_len must be at least 2, got {max_len}");
    let mut content = vocab.tokenize(text);
    content.truncate(max_len - 2);
    let used = content.len() + 2;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(content);
    ids.push(SEP);
    ids.resize(max_len, PAD);
    let mut mask = vec![1u8; used];
    mask.resize(max_len, 0);
    EncodedExample {
        ids,
        mask,
        label: None,
    }
}

/// Concatenates the bytes of all non-special tokens, lossily decoded as UTF-8.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        if id as usize >= vocab.size() {
            return Err(TokenizerError::UnknownTokenId(id));
        }
        if let Some(b) = vocab.token_bytes(id) {
            bytes.extend_from_slice(b);
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_tokenize_partitions_text() {
        let text = "  नमस्ते दुनिया\tab  c ";
        let chunks = pre_tokenize(text);
        assert_eq!(chunks.concat(), text);
        assert_eq!(chunks, vec!["  नमस्ते", " दुनिया", "\tab", "  c", " "]);
        assert!(pre_tokenize("").is_empty());
    }

    #[test]
    fn single_char_corpus_has_no_merges() {
        let v = train_vocab(&["a"], 260).unwrap();
        assert_eq!(v.size(), 260);
        assert_eq!(v.num_merges(), 0);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_vocab(&["abab", "abab"], 261).unwrap();
        assert_eq!(v.size(), 261);
        assert_eq!(v.merges().next(), Some((&b"a"[..], &b"b"[..])));
    }

    #[test]
    fn precondition_errors() {
        let empty: [&str; 0] = [];
        assert_eq!(train_vocab(&empty, 300).unwrap_err().to_string(), "empty corpus");
        assert!(train_vocab(&["x"], 259).unwrap_err().to_string().starts_with("vocab too small"));
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice; ("a","b") sorts first.
        let v = train_vocab(&["ab cd", "cd ab"], 261).unwrap();
        assert_eq!(v.merges().next(), Some((&b"a"[..], &b"b"[..])));
    }

    #[test]
    fn empty_text_encodes_to_cls_sep() {
        let v = train_vocab(&["a"], 260).unwrap();
        let e = encode(&v, "", 8);
        assert_eq!(e.ids, vec![CLS, SEP, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(e.mask, vec![1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn truncation_keeps_sep_last() {
        let v = train_vocab(&["hello world"], 270).unwrap();
        let e = encode(&v, "hello world hello world hello world", 6);
        assert_eq!(e.ids.len(), 6);
        assert_eq!(e.ids[0], CLS);
        assert_eq!(e.ids[5], SEP);
        assert!(e.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn decode_skips_specials_and_rejects_unknown() {
        let v = train_vocab(&["a"], 260).unwrap();
        assert_eq!(decode(&v, &[CLS, SEP]).unwrap(), "");
        assert_eq!(decode(&v, &[260]).unwrap_err().to_string(), "unknown token id 260");
    }

    #[test]
    fn devanagari_round_trip() {
        let corpus = ["नमस्ते दुनिया", "नमस्ते भारत", "यह एक परीक्षण है", "नमस्ते"];
        let v = train_vocab(&corpus, 320).unwrap();
        let e = encode(&v, "नमस्ते", 16);
        assert!(e.len_unpadded() < 16);
        let content = &e.ids[1..e.len_unpadded() - 1];
        assert_eq!(decode(&v, content).unwrap().as_bytes(), "नमस्ते".as_bytes());
    }

    #[test]
    fn json_round_trip_preserves_vocabulary() {
        let corpus = ["नमस्ते दुनिया", "abc abd <pad> \u{0}\u{7f}", "नमस्ते भारत"];
        let v = train_vocab(&corpus, 300).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        let json: serde_json::Value = serde_json::from_str(&v.to_json().unwrap()).unwrap();
        assert_eq!(json["specials"]["sep"], 3);
        assert_eq!(json["size"], v.size());
    }

    #[test]
    fn merges_never_produce_special_ids() {
        let v = train_vocab(&["aaaa bbbb aaaa"], 280).unwrap();
        assert!(v.merges.iter().all(|&(_, _, id)| id >= MIN_VOCAB as u32));
    }
}
