//! Tokenization, vocabulary, corpus filtering and the denoising noise model.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

pub const SOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const RESERVED: [&str; 3] = ["<sos>", "<eos>", "<unk>"];

/// Default minimum sentence length kept by [`filter_corpus`].
pub const MIN_SENTENCE_WORDS: usize = 8;
/// Default maximum fraction of out-of-vocabulary words.
pub const MAX_UNK_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextError {
    #[error("sentence has no words")]
    EmptySentence,
    #[error("token id {0} is not a word id of this vocabulary")]
    InvalidId(u32),
    #[error("min_freq must be at least 1")]
    MinFrequency,
    #[error("duplicate vocabulary word `{0}`")]
    DuplicateWord(String),
}

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in line.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word ↔ id map. Ids 0, 1, 2 are SOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Builds from the non-reserved words in id order (id = position + 3).
    pub fn from_words<I, S>(words: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            words: RESERVED.iter().map(|w| w.to_string()).collect(),
            index: RESERVED
                .iter()
                .enumerate()
                .map(|(i, w)| (w.to_string(), i as u32))
                .collect(),
            min_frequency: 1,
        };
        for w in words {
            let w = w.as_ref();
            if vocab.index.contains_key(w) {
                return Err(TextError::DuplicateWord(w.to_string()));
            }
            vocab.index.insert(w.to_string(), vocab.words.len() as u32);
            vocab.words.push(w.to_string());
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }
}

/// Keeps words seen at least `min_freq` times and force-includes every
/// concept word. Ids are assigned by descending count, ties broken
/// lexicographically, so the result does not depend on corpus order.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[Vec<String>],
    min_freq: usize,
    concept_words: &[S],
) -> Result<Vocabulary, TextError> {
    if min_freq == 0 {
        return Err(TextError::MinFrequency);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in corpus {
        for w in sentence {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut kept: BTreeMap<&str, usize> = counts
        .iter()
        .filter(|(_, &c)| c >= min_freq)
        .map(|(w, &c)| (*w, c))
        .collect();
    for c in concept_words {
        let c = c.as_ref();
        kept.entry(c).or_insert_with(|| counts.get(c).copied().unwrap_or(0));
    }
    let mut ordered: Vec<(&str, usize)> = kept
        .into_iter()
        .filter(|(w, _)| !RESERVED.contains(w))
        .collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut vocab = Vocabulary::from_words(ordered.into_iter().map(|(w, _)| w))?;
    vocab.min_frequency = min_freq;
    Ok(vocab)
}

/// Drops sentences shorter than `min_len` words or whose out-of-vocabulary
/// fraction exceeds `max_unk_frac`.
pub fn filter_corpus(
    sentences: &[Vec<String>],
    min_len: usize,
    max_unk_frac: f64,
    vocab: &Vocabulary,
) -> Vec<Vec<String>> {
    sentences
        .iter()
        .filter(|s| {
            if s.len() < min_len || s.is_empty() {
                return false;
            }
            let unk = s.iter().filter(|w| !vocab.contains(w)).count();
            (unk as f64) / (s.len() as f64) <= max_unk_frac
        })
        .cloned()
        .collect()
}

/// Word ids of one sentence, without SOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSentence {
    ids: Vec<u32>,
}

impl TokenSentence {
    pub fn new(ids: Vec<u32>, vocab_len: usize) -> Result<Self, TextError> {
        if ids.is_empty() {
            return Err(TextError::EmptySentence);
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&i| i == SOS || i == EOS || i as usize >= vocab_len)
        {
            return Err(TextError::InvalidId(bad));
        }
        Ok(TokenSentence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Word count `l`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids followed by EOS.
    pub fn with_eos(&self) -> Vec<u32> {
        let mut v = self.ids.clone();
        v.push(EOS);
        v
    }
}

pub fn encode<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Result<TokenSentence, TextError> {
    let ids = words
        .iter()
        .map(|w| vocab.id(w.as_ref()).unwrap_or(UNK))
        .collect();
    TokenSentence::new(ids, vocab.len())
}

pub fn decode(sentence: &TokenSentence, vocab: &Vocabulary) -> Result<Vec<String>, TextError> {
    decode_ids(sentence.ids(), vocab)
}

/// Decodes raw ids, stopping at the first EOS.
pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>, TextError> {
    ids.iter()
        .take_while(|&&i| i != EOS)
        .map(|&i| {
            vocab
                .word(i)
                .map(ToString::to_string)
                .ok_or(TextError::InvalidId(i))
        })
        .collect()
}

/// Word dropout followed by a local shuffle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub p_drop: f64,
    /// Maximum displacement of any surviving word.
    pub max_shift: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { p_drop: 0.1, max_shift: 3 }
    }
}

/// Source indices of the noised sentence, in output order.
///
/// Survivors are reordered by sorting `rank + U(0, max_shift + 1)`: two words
/// more than `max_shift` apart can never swap, which bounds displacement.
pub fn noise_indices<R: Rng + ?Sized>(len: usize, cfg: &NoiseConfig, rng: &mut R) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut kept: Vec<usize> = (0..len).filter(|_| !rng.random_bool(cfg.p_drop.clamp(0.0, 1.0))).collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..len));
    }
    let span = cfg.max_shift as f64 + 1.0;
    let mut keyed: Vec<(f64, usize)> = kept
        .iter()
        .enumerate()
        .map(|(rank, &src)| (rank as f64 + rng.random::<f64>() * span, src))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, src)| src).collect()
}

pub fn add_noise<R: Rng + ?Sized>(s: &TokenSentence, cfg: &NoiseConfig, rng: &mut R) -> TokenSentence {
    let ids = noise_indices(s.len(), cfg, rng)
        .into_iter()
        .map(|i| s.ids[i])
        .collect();
    TokenSentence { ids }
}
