use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucap_core::evalkit::{
    avg_correct_concepts, bleu, brevity_penalty, closest_ref_len, correct_concepts, evaluate,
    generate_captions, modified_precision, sentence_reconstruction_accuracy, Caption, CountMode, EvalError,
};
use ucap_core::models::{DecodeMode, ModelConfig, Models};
use ucap_core::textcorpus::{decode_ids, NoiseConfig, TokenSentence, Vocabulary};
use ucap_core::worldsim::ImageFeature;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn identity_corpus_scores_one() {
    let cands = vec![w("a dog runs in the park"), w("two cats sit on a mat today")];
    let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
    let b = bleu(&cands, &refs, 4).unwrap();
    assert_eq!(b, vec![1.0; 4]);
}

#[test]
fn clipped_unigram_precision_by_hand() {
    let (m, t) = modified_precision(&w("the the the"), &[w("the cat")], 1);
    assert_eq!((m, t), (1, 3));
    // Clipping takes the max count over references.
    let (m, t) = modified_precision(&w("the the the"), &[w("the cat"), w("the the mat")], 1);
    assert_eq!((m, t), (2, 3));
    let (m, t) = modified_precision(&w("the cat sat"), &[w("the cat is here")], 2);
    assert_eq!((m, t), (1, 2));
}

#[test]
fn brevity_penalty_closed_form() {
    // c < r: exp(1 - r/c).
    for (c, r) in [(3usize, 4usize), (5, 9), (1, 2)] {
        let want = (1.0 - r as f64 / c as f64).exp();
        assert!((brevity_penalty(c, r) - want).abs() < 1e-15);
    }
    assert_eq!(brevity_penalty(5, 5), 1.0);
    assert_eq!(brevity_penalty(6, 5), 1.0);
    assert_eq!(brevity_penalty(0, 5), 0.0);

    // Corpus level: one candidate of 3 words, reference of 4.
    let cands = vec![w("a b c")];
    let refs = vec![vec![w("a b c d")]];
    let b = bleu(&cands, &refs, 1).unwrap();
    assert!((b[0] - (1.0 - 4.0 / 3.0f64).exp()).abs() < 1e-15);
    // Closest reference length, ties to the shorter.
    assert_eq!(closest_ref_len(4, &[w("a b c"), w("a b c d e")]), 3);
    assert_eq!(closest_ref_len(4, &[w("a b c d e f"), w("a b c d e")]), 5);
}

#[test]
fn empty_candidate_scores_zero_and_errors_are_typed() {
    let b = bleu(&[Vec::<String>::new()], &[vec![w("a cat")]], 4).unwrap();
    assert_eq!(b, vec![0.0; 4]);
    assert_eq!(bleu::<String>(&[], &[], 4), Err(EvalError::NoCandidates));
    assert_eq!(bleu(&[w("a")], &[vec![]], 4), Err(EvalError::NoReferences(0)));
    assert!(matches!(bleu(&[w("a")], &[vec![w("a")], vec![w("b")]], 4), Err(EvalError::CountMismatch { .. })));
}

/// Straightforward corpus BLEU without shared helpers.
fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n_max: usize) -> Vec<f64> {
    let grams = |s: &[String], n: usize| -> Vec<Vec<String>> {
        if s.len() < n { vec![] } else { s.windows(n).map(|x| x.to_vec()).collect() }
    };
    let mut p = vec![(0usize, 0usize); n_max];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        c += cand.len();
        let mut best = usize::MAX;
        let mut best_diff = usize::MAX;
        for x in rs {
            let d = x.len().abs_diff(cand.len());
            if d < best_diff || (d == best_diff && x.len() < best) {
                best = x.len();
                best_diff = d;
            }
        }
        r += best;
        for n in 1..=n_max {
            let cg = grams(cand, n);
            let mut seen: Vec<&Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let count = cg.iter().filter(|x| *x == g).count();
                let max_ref = rs.iter().map(|x| grams(x, n).iter().filter(|y| *y == g).count()).max().unwrap();
                p[n - 1].0 += count.min(max_ref);
            }
            p[n - 1].1 += cg.len();
        }
    }
    let bp = if c == 0 { 0.0 } else if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    (1..=n_max)
        .map(|n| {
            if p[..n].iter().any(|&(m, t)| m == 0 || t == 0) {
                return 0.0;
            }
            let s: f64 = p[..n].iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum();
            bp * (s / n as f64).exp()
        })
        .collect()
}

#[test]
fn bleu_matches_oracle_and_ignores_order() {
    let pool = w("a the dog cat sits on mat park runs big small red");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sent = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<String> {
        (0..rng.random_range(lo..hi)).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
    };
    for _ in 0..50 {
        let k = rng.random_range(1..8);
        let cands: Vec<Vec<String>> = (0..k).map(|_| sent(&mut rng, 2, 12)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..k)
            .map(|_| (0..rng.random_range(1..4)).map(|_| sent(&mut rng, 2, 12)).collect())
            .collect();
        let got = bleu(&cands, &refs, 4).unwrap();
        let want = bleu_oracle(&cands, &refs, 4);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
        let rc: Vec<_> = cands.iter().rev().cloned().collect();
        let rr: Vec<_> = refs.iter().rev().cloned().collect();
        let rev = bleu(&rc, &rr, 4).unwrap();
        for (a, b) in got.iter().zip(&rev) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn concept_counting_rules() {
    let cap = w("a dog and a dog");
    assert_eq!(correct_concepts(&cap, &["dog"], CountMode::Tokens), 2);
    assert_eq!(correct_concepts(&cap, &["dog"], CountMode::Types), 1);
    assert_eq!(correct_concepts(&cap, &["cat"], CountMode::Types), 0);

    let caps = vec![
        Caption { id: "i0".into(), words: w("a dog near a cat") },
        Caption { id: "i1".into(), words: w("a bird") },
        Caption { id: "i2".into(), words: w("a cow and a pig and a hen") },
    ];
    let truth: Vec<(String, Vec<String>)> = vec![
        ("i0".into(), w("dog cat")),
        ("i1".into(), w("bird")),
        ("i2".into(), w("cow pig hen")),
    ];
    let avg = avg_correct_concepts(&caps, &truth, CountMode::Types).unwrap();
    assert!((avg - 2.0).abs() < 1e-12);
    let empty: Vec<(String, Vec<String>)> = truth.iter().map(|(id, _)| (id.clone(), vec![])).collect();
    assert_eq!(avg_correct_concepts(&caps, &empty, CountMode::Tokens).unwrap(), 0.0);
    let mut swapped = truth.clone();
    swapped.swap(0, 1);
    assert!(matches!(
        avg_correct_concepts(&caps, &swapped, CountMode::Types),
        Err(EvalError::IdMismatch { .. })
    ));
}

fn toy_models(v: usize, d: usize) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = Models::new(ModelConfig::new(v, d).with_width(8), &mut rng).unwrap();
    let ids: Vec<_> = m.params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for x in m.params.get_mut(id).data_mut() {
            *x *= 6.0;
        }
    }
    m
}

#[test]
fn captions_are_deterministic_and_valid() {
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_words(&words).unwrap();
    let m = toy_models(vocab.len(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let feats: Vec<ImageFeature> = (0..20)
        .map(|i| ImageFeature {
            id: format!("img{i}"),
            vector: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            truth_concepts: None,
        })
        .collect();
    let a = generate_captions(&m, &feats, &vocab, 3, 20).unwrap();
    let b = generate_captions(&m, &feats, &vocab, 3, 20).unwrap();
    assert_eq!(a, b);
    let one = generate_captions(&m, &feats, &vocab, 1, 20).unwrap();
    for ((cap, f), beam1) in a.iter().zip(&feats).zip(&one) {
        assert_eq!(cap.id, f.id);
        assert!(cap.words.len() < 20);
        assert!(cap.words.iter().all(|x| vocab.contains(x) && x != "<sos>" && x != "<eos>"));
        let g = m.generator.rollout(&m.params, &[&f.vector], &[DecodeMode::Greedy], &mut rng, 20).unwrap();
        assert_eq!(beam1.words, decode_ids(&g[0].ids, &vocab).unwrap());
    }
}

#[test]
fn evaluate_reports_all_fields() {
    let caps = vec![
        Caption { id: "a".into(), words: w("a dog on the grass") },
        Caption { id: "b".into(), words: w("a cat on a mat") },
    ];
    let refs = vec![vec![w("a dog on the grass")], vec![w("a cat on a mat")]];
    let concepts = vec![("a".to_string(), w("dog")), ("b".to_string(), w("cat mat"))];
    let r = evaluate(caps, &refs, &concepts, CountMode::Types).unwrap();
    assert_eq!((r.bleu1, r.bleu4), (1.0, 1.0));
    assert!((r.avg_correct_concepts - 1.5).abs() < 1e-12);
    assert_eq!(r.num_images, 2);
    assert_eq!(r.captions.len(), 2);
}

#[test]
fn reconstruction_accuracy_is_a_fraction() {
    let m = toy_models(12, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sents: Vec<TokenSentence> = (0..30)
        .map(|_| TokenSentence::new((0..rng.random_range(1..9)).map(|_| rng.random_range(2..12)).collect(), 12).unwrap())
        .collect();
    let acc = sentence_reconstruction_accuracy(&m, &sents, &NoiseConfig::default(), &mut rng).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(sentence_reconstruction_accuracy(&m, &[], &NoiseConfig::default(), &mut rng).is_err());
}
