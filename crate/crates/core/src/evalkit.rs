//! Corpus BLEU, the correct-concept-words metric and batch captioning.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::models::{ModelError, Models};
use crate::textcorpus::{add_noise, decode_ids, NoiseConfig, TextError, TokenSentence, Vocabulary};
use crate::worldsim::ImageFeature;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no candidates to score")]
    NoCandidates,
    #[error("{candidates} candidates but {references} reference sets")]
    CountMismatch { candidates: usize, references: usize },
    #[error("image {0} has no references")]
    NoReferences(usize),
    #[error("caption id {caption} does not match concept id {concepts}")]
    IdMismatch { caption: String, concepts: String },
    #[error("max_n must be at least 1")]
    ZeroOrder,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// How repeated concept words in a caption are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountMode {
    /// Each distinct concept at most once per caption.
    #[default]
    Types,
    /// Every caption position holding a concept word.
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub id: String,
    pub words: Vec<String>,
}

impl Caption {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub avg_correct_concepts: f64,
    pub num_images: usize,
    pub captions: Vec<Caption>,
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total candidate n-grams for one sentence.
pub fn modified_precision<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
    for r in references {
        for (k, c) in ngram_counts(r, n) {
            let e = max_ref.entry(k).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(k, &c)| c.min(max_ref.get(k).copied().unwrap_or(0)))
        .sum();
    (matched, cand.values().sum())
}

/// Reference length closest to `c`, the shorter one on ties.
pub fn closest_ref_len<S>(c: usize, references: &[Vec<S>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// `exp(1 - r/c)` when `c < r`, else 1; 0 for an empty candidate corpus.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        libm::exp(1.0 - r as f64 / c as f64)
    } else {
        1.0
    }
}

/// Corpus-level BLEU-1 through BLEU-`max_n` without smoothing.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>], max_n: usize) -> Result<Vec<f64>, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if max_n == 0 {
        return Err(EvalError::ZeroOrder);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(EvalError::NoReferences(i));
    }
    let mut matched = alloc::vec![0usize; max_n];
    let mut total = alloc::vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let (m, t) = modified_precision(cand, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let bp = brevity_penalty(c, r);
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        if matched[n - 1] == 0 || total[n - 1] == 0 {
            zero = true;
        } else {
            log_sum += libm::log(matched[n - 1] as f64 / total[n - 1] as f64);
        }
        out.push(if zero { 0.0 } else { bp * libm::exp(log_sum / n as f64) });
    }
    Ok(out)
}

/// Concept words found in one caption.
pub fn correct_concepts<S: AsRef<str>, C: AsRef<str>>(caption: &[S], concepts: &[C], mode: CountMode) -> usize {
    let set: BTreeSet<&str> = concepts.iter().map(AsRef::as_ref).collect();
    let hits = caption.iter().map(AsRef::as_ref).filter(|w| set.contains(w));
    match mode {
        CountMode::Tokens => hits.count(),
        CountMode::Types => hits.collect::<BTreeSet<_>>().len(),
    }
}

/// Mean correct-concept count over images; `concepts` pairs each image id
/// with its concept words and must be aligned with `captions`.
pub fn avg_correct_concepts(
    captions: &[Caption],
    concepts: &[(String, Vec<String>)],
    mode: CountMode,
) -> Result<f64, EvalError> {
    if captions.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if captions.len() != concepts.len() {
        return Err(EvalError::CountMismatch {
            candidates: captions.len(),
            references: concepts.len(),
        });
    }
    let mut total = 0usize;
    for (cap, (id, set)) in captions.iter().zip(concepts) {
        if &cap.id != id {
            return Err(EvalError::IdMismatch {
                caption: cap.id.clone(),
                concepts: id.clone(),
            });
        }
        total += correct_concepts(&cap.words, set, mode);
    }
    Ok(total as f64 / captions.len() as f64)
}

/// Beam-search captions for every image.
pub fn generate_captions(
    models: &Models,
    features: &[ImageFeature],
    vocab: &Vocabulary,
    beam_size: usize,
    cap: usize,
) -> Result<Vec<Caption>, EvalError> {
    features
        .iter()
        .map(|f| {
            let (ids, _) = models
                .generator
                .beam_search(&models.params, &f.vector, beam_size, cap)?;
            Ok(Caption {
                id: f.id.clone(),
                words: decode_ids(&ids, vocab)?,
            })
        })
        .collect()
}

/// Token accuracy of the sentence autoencoder: each sentence is noised,
/// encoded to a latent by the discriminator and decoded by the generator
/// with teacher forcing. Every target position, EOS included, counts once.
pub fn sentence_reconstruction_accuracy<R: Rng + ?Sized>(
    models: &Models,
    sentences: &[TokenSentence],
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<f64, EvalError> {
    if sentences.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in sentences.chunks(64) {
        let noised: Vec<Vec<u32>> = chunk.iter().map(|s| add_noise(s, noise, rng).with_eos()).collect();
        let targets: Vec<Vec<u32>> = chunk.iter().map(TokenSentence::with_eos).collect();
        let latents = models.discriminator.encode_latent_batch(&models.params, &noised)?;
        let conds: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
        let preds = models.generator.reconstruct(&models.params, &conds, &targets)?;
        for (p, t) in preds.iter().zip(&targets) {
            hit += p.iter().zip(t).filter(|(a, b)| a == b).count();
            total += t.len();
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Scores captions against references and concept sets.
pub fn evaluate(
    captions: Vec<Caption>,
    references: &[Vec<Vec<String>>],
    concepts: &[(String, Vec<String>)],
    mode: CountMode,
) -> Result<EvalReport, EvalError> {
    let cands: Vec<Vec<String>> = captions.iter().map(|c| c.words.clone()).collect();
    let b = bleu(&cands, references, 4)?;
    let avg = avg_correct_concepts(&captions, concepts, mode)?;
    Ok(EvalReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        avg_correct_concepts: avg,
        num_images: captions.len(),
        captions,
    })
}
