use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucap_core::textcorpus::{build_vocab, filter_corpus, tokenize, MAX_UNK_FRACTION, MIN_SENTENCE_WORDS};
use ucap_core::worldsim::{
    default_templates, detect_concepts, gen_world, synth_corpus, DetectorConfig, WorldConfig,
};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn same_seed_same_world() {
    let cfg = WorldConfig::default();
    assert_eq!(gen_world(5, &cfg).unwrap(), gen_world(5, &cfg).unwrap());
    assert_ne!(gen_world(5, &cfg).unwrap(), gen_world(6, &cfg).unwrap());
}

#[test]
fn world_invariants() {
    let cfg = WorldConfig::default();
    let w = gen_world(1, &cfg).unwrap();
    assert_eq!(w.images.len(), cfg.num_images);
    assert_eq!(w.dictionary.len(), cfg.num_concepts);
    for img in &w.images {
        assert_eq!(img.vector.len(), cfg.dim);
        assert!(img.vector.iter().all(|v| v.is_finite()));
        let t = img.truth_concepts.as_ref().unwrap();
        assert!((1..=4).contains(&t.len()));
        assert!(t.iter().all(|&c| c < cfg.num_concepts));
    }
    for p in &w.patterns {
        let n: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn noiseless_single_concept_images_coincide() {
    let cfg = WorldConfig {
        noise_sigma: 0.0,
        min_concepts_per_image: 1,
        max_concepts_per_image: 1,
        ..WorldConfig::default()
    };
    let w = gen_world(2, &cfg).unwrap();
    let mut checked = 0;
    for a in &w.images {
        for b in &w.images {
            if a.truth_concepts == b.truth_concepts {
                assert_eq!(a.vector, b.vector);
                checked += 1;
            }
        }
    }
    assert!(checked > w.images.len());
}

#[test]
fn shared_concepts_raise_cosine_similarity() {
    let w = gen_world(3, &WorldConfig::default()).unwrap();
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in w.images.iter().enumerate() {
        for b in &w.images[i + 1..] {
            let ta = a.truth_concepts.as_ref().unwrap();
            let tb = b.truth_concepts.as_ref().unwrap();
            let c = cosine(&a.vector, &b.vector);
            if ta.iter().any(|x| tb.contains(x)) {
                same += c;
                ns += 1;
            } else {
                diff += c;
                nd += 1;
            }
        }
    }
    let (same, diff) = (same / ns as f64, diff / nd as f64);
    assert!(same > diff + 0.1, "same {same} diff {diff}");
}

#[test]
fn detector_extremes() {
    let w = gen_world(4, &WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let exact = DetectorConfig { p_miss: 0.0, p_false: 0.0, ..DetectorConfig::default() };
    let none = DetectorConfig { p_miss: 1.0, p_false: 0.0, ..DetectorConfig::default() };
    for img in &w.images {
        let d = detect_concepts(img, &w.dictionary, &exact, &mut rng).unwrap();
        let mut got: Vec<usize> = d.words().map(|x| w.dictionary.index_of(x).unwrap()).collect();
        got.sort_unstable();
        assert_eq!(&got, img.truth_concepts.as_ref().unwrap());
        assert!(detect_concepts(img, &w.dictionary, &none, &mut rng).unwrap().is_empty());
    }
}

#[test]
fn detector_default_rates() {
    let cfg = WorldConfig { num_images: 10_000, ..WorldConfig::default() };
    let w = gen_world(5, &cfg).unwrap();
    let det = DetectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut truths, mut misses, mut negatives, mut false_hits) = (0usize, 0usize, 0usize, 0usize);
    for img in &w.images {
        let d = detect_concepts(img, &w.dictionary, &det, &mut rng).unwrap();
        let truth = img.truth_concepts.as_ref().unwrap();
        for (idx, word) in w.dictionary.words().iter().enumerate() {
            let conf = d.confidence(word);
            if truth.contains(&idx) {
                truths += 1;
                match conf {
                    None => misses += 1,
                    Some(c) => assert!((0.6..1.0).contains(&c)),
                }
            } else {
                negatives += 1;
                if let Some(c) = conf {
                    false_hits += 1;
                    assert!((0.1..0.5).contains(&c));
                }
            }
        }
    }
    let miss = misses as f64 / truths as f64;
    let fp = false_hits as f64 / negatives as f64;
    assert!((miss - 0.1).abs() < 0.01, "miss rate {miss}");
    assert!((fp - 0.02).abs() < 0.005, "false rate {fp}");
}

#[test]
fn synthetic_corpus_survives_filtering() {
    let w = gen_world(6, &WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sets: Vec<Vec<usize>> = w
        .images
        .iter()
        .map(|i| i.truth_concepts.clone().unwrap())
        .collect();
    let raw = synth_corpus(&sets, &default_templates(), &w.dictionary, 2000, &mut rng).unwrap();
    assert_eq!(raw.len(), 2000);
    let toks: Vec<Vec<String>> = raw.iter().map(|s| tokenize(s)).collect();
    for t in &toks {
        assert!(t.len() >= 8);
        let mentioned = t.iter().filter(|x| w.dictionary.index_of(x).is_some()).count();
        assert!((1..=2).contains(&mentioned), "{t:?}");
    }
    let vocab = build_vocab(&toks, 40, w.dictionary.words()).unwrap();
    let kept = filter_corpus(&toks, MIN_SENTENCE_WORDS, MAX_UNK_FRACTION, &vocab);
    assert_eq!(kept.len(), toks.len());
}
