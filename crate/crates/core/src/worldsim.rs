//! Synthetic stand-in for the image encoder, the object detector and the
//! crawled sentence corpus.
//!
//! Each concept owns a fixed random unit pattern; an image feature is the sum
//! of its ground-truth concepts' patterns plus isotropic Gaussian noise. The
//! detector reports each true concept with high confidence unless it misses
//! it, and occasionally hallucinates others with low confidence. The corpus
//! is produced from independently drawn concept sets, so no sentence is tied
//! to any image.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("{num_concepts} concepts do not fit in feature dimension {dim}")]
    TooManyConcepts { num_concepts: usize, dim: usize },
    #[error("concepts per image must satisfy 1 <= min <= max <= num_concepts")]
    ConceptsPerImage,
    #[error("template `{0}` has no {{c}} slot")]
    TemplateWithoutSlot(String),
    #[error("template `{0}` has more than two slots")]
    TooManySlots(String),
    #[error("no template fits a concept set of size {0}")]
    NoTemplateFits(usize),
    #[error("concept dictionary is empty")]
    EmptyDictionary,
    #[error("confidence {score} for `{word}` is outside [0, 1]")]
    Confidence { word: String, score: f64 },
    #[error("`{0}` is not in the concept dictionary")]
    UnknownConcept(String),
    #[error("image `{0}` carries no ground-truth concepts")]
    NoGroundTruth(String),
}

/// Image feature vector, with ground truth when synthetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub id: String,
    pub vector: Vec<f64>,
    /// Indices into the concept dictionary.
    pub truth_concepts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptDictionary {
    words: Vec<String>,
}

impl ConceptDictionary {
    pub fn new<I, S>(words: I) -> Result<Self, WorldError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        if words.is_empty() {
            return Err(WorldError::EmptyDictionary);
        }
        Ok(ConceptDictionary { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }
}

/// Detected concepts with confidences. Duplicate words are merged to their
/// maximum confidence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptDetection {
    concepts: Vec<(String, f64)>,
}

impl ConceptDetection {
    pub fn new<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Result<Self, WorldError> {
        let mut concepts: Vec<(String, f64)> = Vec::new();
        for (word, score) in pairs {
            let word = word.into();
            if !(0.0..=1.0).contains(&score) {
                return Err(WorldError::Confidence { word, score });
            }
            match concepts.iter_mut().find(|(w, _)| *w == word) {
                Some(slot) => slot.1 = slot.1.max(score),
                None => concepts.push((word, score)),
            }
        }
        Ok(ConceptDetection { concepts })
    }

    /// As [`ConceptDetection::new`], also requiring every word to be in `dict`.
    pub fn checked<S: Into<String>>(
        pairs: impl IntoIterator<Item = (S, f64)>,
        dict: &ConceptDictionary,
    ) -> Result<Self, WorldError> {
        let d = Self::new(pairs)?;
        if let Some((w, _)) = d.concepts.iter().find(|(w, _)| dict.index_of(w).is_none()) {
            return Err(WorldError::UnknownConcept(w.clone()));
        }
        Ok(d)
    }

    pub fn concepts(&self) -> &[(String, f64)] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn confidence(&self, word: &str) -> Option<f64> {
        self.concepts.iter().find(|(w, _)| w == word).map(|(_, s)| *s)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|(w, _)| w.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub num_concepts: usize,
    pub num_images: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub min_concepts_per_image: usize,
    pub max_concepts_per_image: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_concepts: 20,
            num_images: 500,
            dim: 64,
            noise_sigma: 0.05,
            min_concepts_per_image: 1,
            max_concepts_per_image: 4,
        }
    }
}

/// Generated world: the concept dictionary, the per-concept patterns and the
/// images.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub dictionary: ConceptDictionary,
    pub patterns: Vec<Vec<f64>>,
    pub images: Vec<ImageFeature>,
}

const CONCEPT_NAMES: [&str; 48] = [
    "dog", "cat", "horse", "bird", "car", "bicycle", "boat", "train", "chair", "table", "bottle",
    "cup", "laptop", "phone", "clock", "book", "umbrella", "bench", "pizza", "cake", "apple",
    "banana", "tree", "flower", "sheep", "cow", "elephant", "giraffe", "kite", "surfboard",
    "skateboard", "bus", "truck", "airplane", "bear", "zebra", "vase", "lamp", "guitar", "ball",
    "hat", "backpack", "sofa", "bed", "window", "door", "fence", "bridge",
];

/// Names for the first `n` synthetic concepts.
pub fn concept_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match CONCEPT_NAMES.get(i) {
            Some(w) => w.to_string(),
            None => format!("object{i}"),
        })
        .collect()
}

/// Uniformly sized set of distinct concept indices, sorted.
pub fn sample_concept_set<R: Rng + ?Sized>(
    rng: &mut R,
    num_concepts: usize,
    min: usize,
    max: usize,
) -> Vec<usize> {
    let k = rng.random_range(min..=max);
    let mut all: Vec<usize> = (0..num_concepts).collect();
    all.shuffle(rng);
    let mut set: Vec<usize> = all.into_iter().take(k).collect();
    set.sort_unstable();
    set
}

pub fn gen_world(seed: u64, cfg: &WorldConfig) -> Result<World, WorldError> {
    if cfg.num_concepts > cfg.dim {
        return Err(WorldError::TooManyConcepts {
            num_concepts: cfg.num_concepts,
            dim: cfg.dim,
        });
    }
    if cfg.min_concepts_per_image == 0
        || cfg.min_concepts_per_image > cfg.max_concepts_per_image
        || cfg.max_concepts_per_image > cfg.num_concepts
    {
        return Err(WorldError::ConceptsPerImage);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dictionary = ConceptDictionary::new(concept_names(cfg.num_concepts))?;
    let patterns: Vec<Vec<f64>> = (0..cfg.num_concepts)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let images = (0..cfg.num_images)
        .map(|i| {
            let truth = sample_concept_set(
                &mut rng,
                cfg.num_concepts,
                cfg.min_concepts_per_image,
                cfg.max_concepts_per_image,
            );
            let mut vector = alloc::vec![0.0; cfg.dim];
            for &c in &truth {
                vector.iter_mut().zip(&patterns[c]).for_each(|(a, b)| *a += b);
            }
            if cfg.noise_sigma > 0.0 {
                for v in vector.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += cfg.noise_sigma * z;
                }
            }
            ImageFeature {
                id: format!("img{i:05}"),
                vector,
                truth_concepts: Some(truth),
            }
        })
        .collect();
    Ok(World {
        dictionary,
        patterns,
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub p_miss: f64,
    pub p_false: f64,
    pub true_confidence: (f64, f64),
    pub false_confidence: (f64, f64),
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            p_miss: 0.1,
            p_false: 0.02,
            true_confidence: (0.6, 1.0),
            false_confidence: (0.1, 0.5),
        }
    }
}

/// Noisy stub detector driven by the synthetic ground truth. Concepts are
/// visited in dictionary order.
pub fn detect_concepts<R: Rng + ?Sized>(
    img: &ImageFeature,
    dict: &ConceptDictionary,
    cfg: &DetectorConfig,
    rng: &mut R,
) -> Result<ConceptDetection, WorldError> {
    let truth = img
        .truth_concepts
        .as_ref()
        .ok_or_else(|| WorldError::NoGroundTruth(img.id.clone()))?;
    let mut found = Vec::new();
    for (idx, word) in dict.words().iter().enumerate() {
        let (report, range) = if truth.contains(&idx) {
            (!rng.random_bool(cfg.p_miss), cfg.true_confidence)
        } else {
            (rng.random_bool(cfg.p_false), cfg.false_confidence)
        };
        if report {
            let score = if range.0 < range.1 {
                rng.random_range(range.0..range.1)
            } else {
                range.0
            };
            found.push((word.clone(), score));
        }
    }
    ConceptDetection::new(found)
}

/// Sentence template with one or two `{c}` concept slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    parts: Vec<String>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self, WorldError> {
        let parts: Vec<String> = text.split("{c}").map(|p| p.trim().to_string()).collect();
        match parts.len() - 1 {
            0 => Err(WorldError::TemplateWithoutSlot(text.to_string())),
            1 | 2 => Ok(Template { parts }),
            _ => Err(WorldError::TooManySlots(text.to_string())),
        }
    }

    pub fn slots(&self) -> usize {
        self.parts.len() - 1
    }

    pub fn fill(&self, words: &[&str]) -> String {
        debug_assert_eq!(words.len(), self.slots());
        let mut out = String::new();
        for (i, part) in self.parts.iter().enumerate() {
            for piece in [part.as_str(), words.get(i).copied().unwrap_or("")] {
                if piece.is_empty() {
                    continue;
                }
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
        out
    }
}

pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "a photo of a {c} in the room with light",
    "a close up view of a {c} sitting on the grass",
    "an old {c} is standing near the wall outside today",
    "there is a small {c} on the table in the kitchen",
    "a {c} and a {c} are seen together in this picture",
    "the {c} is next to the {c} on a sunny day",
    "a {c} lying beside a {c} in the park at noon",
    "view of a {c} with a {c} in the background",
];

pub fn default_templates() -> Vec<Template> {
    DEFAULT_TEMPLATES
        .iter()
        .map(|t| Template::parse(t).expect("built-in templates are valid"))
        .collect()
}

/// One sentence mentioning one or two distinct concepts from `set`.
pub fn sentence_for_set<R: Rng + ?Sized>(
    set: &[usize],
    templates: &[Template],
    dict: &ConceptDictionary,
    rng: &mut R,
) -> Result<String, WorldError> {
    let fits: Vec<&Template> = templates.iter().filter(|t| t.slots() <= set.len()).collect();
    let template = fits
        .choose(rng)
        .ok_or(WorldError::NoTemplateFits(set.len()))?;
    let mut picks = set.to_vec();
    picks.shuffle(rng);
    let words: Vec<&str> = picks
        .iter()
        .take(template.slots())
        .map(|&c| dict.word(c))
        .collect();
    Ok(template.fill(&words))
}

/// `count` sentences, each built from a concept set drawn uniformly from
/// `concept_sets`.
pub fn synth_corpus<R: Rng + ?Sized>(
    concept_sets: &[Vec<usize>],
    templates: &[Template],
    dict: &ConceptDictionary,
    count: usize,
    rng: &mut R,
) -> Result<Vec<String>, WorldError> {
    let nonempty: Vec<&Vec<usize>> = concept_sets.iter().filter(|s| !s.is_empty()).collect();
    if nonempty.is_empty() {
        return Ok(Vec::new());
    }
    (0..count)
        .map(|_| {
            let set = nonempty[rng.random_range(0..nonempty.len())];
            sentence_for_set(set, templates, dict, rng)
        })
        .collect()
}
