use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucap_core::autodiff::Tape;
use ucap_core::models::{ModelConfig, Models};
use ucap_core::objectives::{
    adversarial_reward, adv_loss_on_tape, concept_reward, discriminator_adv_loss,
    discriminator_total_loss, image_recon_loss, image_recon_reward, sentence_recon_loss,
    sentence_recon_loss_on_tape, ObjectiveWeights, PROB_EPS,
};
use ucap_core::textcorpus::{TokenSentence, Vocabulary};
use ucap_core::worldsim::ConceptDetection;

#[test]
fn adversarial_reward_examples() {
    assert!((adversarial_reward(&[0.5])[0] + 0.693147).abs() < 1e-6);
    assert!(adversarial_reward(&[1.0 - 1e-8])[0].abs() < 1e-7);
    assert!(adversarial_reward(&[0.0])[0].is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q: Vec<f64> = (0..100).map(|_| rng.random_range(0.001..0.999)).collect();
    for (r, q) in adversarial_reward(&q).iter().zip(&q) {
        assert!((r - q.ln()).abs() < 1e-15);
        assert!(*r <= 0.0);
    }
}

#[test]
fn discriminator_loss_examples() {
    let perfect = discriminator_adv_loss(&[1.0; 4], &[0.0; 6]).unwrap();
    assert!(perfect >= 0.0 && perfect < 1e-7);
    let chance = discriminator_adv_loss(&[0.5; 3], &[0.5; 5]).unwrap();
    assert!((chance - 2.0 * 2f64.ln()).abs() < 1e-9);
    let inverted = discriminator_adv_loss(&[0.0; 2], &[1.0; 2]).unwrap();
    assert!(inverted.is_finite() && inverted > 30.0);
    assert!(discriminator_adv_loss(&[], &[0.5]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let l = rng.random_range(1..12);
        let n = rng.random_range(1..12);
        let real: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..0.99)).collect();
        let fake: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut a = 0.0;
        for q in &real {
            a += q.ln();
        }
        let mut b = 0.0;
        for q in &fake {
            b += (1.0 - q).ln();
        }
        let want = -(a / l as f64 + b / n as f64);
        let got = discriminator_adv_loss(&real, &fake).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn concept_reward_examples() {
    let v = Vocabulary::from_words(["dog", "cat", "tree"]).unwrap();
    let d = ConceptDetection::new([("dog", 0.9), ("cat", 0.3)]).unwrap();
    let dog = v.id("dog").unwrap();
    let tree = v.id("tree").unwrap();
    assert_eq!(concept_reward(&[dog], &d, &v), vec![0.9]);
    assert_eq!(concept_reward(&[tree], &d, &v), vec![0.0]);
    assert_eq!(concept_reward(&[dog, dog], &d, &v), vec![0.9, 0.9]);
    let empty = ConceptDetection::default();
    assert!(concept_reward(&[dog, tree], &empty, &v).iter().all(|&r| r == 0.0));
}

#[test]
fn concept_reward_matches_double_loop() {
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let v = Vocabulary::from_words(&words).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let k = rng.random_range(0..6);
        let pairs: Vec<(String, f64)> = (0..k)
            .map(|_| (words[rng.random_range(0..words.len())].clone(), rng.random_range(0.0..=1.0)))
            .collect();
        let det = ConceptDetection::new(pairs.clone()).unwrap();
        let n = rng.random_range(1..15);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..v.len() as u32)).collect();
        let got = concept_reward(&ids, &det, &v);
        for (t, &id) in ids.iter().enumerate() {
            let word = v.word(id).unwrap();
            // Duplicate detections collapse to their best confidence.
            let mut best: Option<f64> = None;
            for (c, conf) in &pairs {
                if c == word {
                    best = Some(best.map_or(*conf, |b: f64| b.max(*conf)));
                }
            }
            assert_eq!(got[t], best.unwrap_or(0.0));
        }
    }
}

#[test]
fn image_reconstruction_examples() {
    assert_eq!(image_recon_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(image_recon_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(image_recon_reward(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), -1.0);
    assert!(image_recon_loss(&[1.0], &[1.0, 2.0]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let d = rng.random_range(1..20);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut want = 0.0;
        for i in 0..d {
            want += (a[i] - b[i]).powi(2);
        }
        let got = image_recon_loss(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(got, image_recon_loss(&b, &a).unwrap());
        assert!(got > 0.0);
    }
}

#[test]
fn sentence_reconstruction_examples() {
    assert_eq!(sentence_recon_loss(&[0.0, 0.0, 0.0]), 0.0);
    let v = 4;
    let uniform = vec![-(v as f64).ln(); 4];
    assert!((sentence_recon_loss(&uniform) - 4.0 * 4f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Models::new(ModelConfig::new(9, 4).with_width(6), &mut rng).unwrap();
    let cond = [0.2, -0.1, 0.4, 0.0];
    let targets = [vec![3u32, 4, 5], vec![6, 7]];
    let per_row: Vec<f64> = targets
        .iter()
        .map(|t| {
            let s = TokenSentence::new(t.clone(), 9).unwrap();
            sentence_recon_loss(&m.generator.logprob(&m.params, &cond, &s).unwrap())
        })
        .collect();
    let mut tape = Tape::new(&m.params);
    let cv = m.generator.condition(&mut tape, &[&cond, &cond]).unwrap();
    let with_eos: Vec<Vec<u32>> = targets.iter().map(|t| [t.as_slice(), &[1]].concat()).collect();
    let lp = m.generator.logprob_on_tape(&mut tape, cv, &with_eos).unwrap();
    let batch = sentence_recon_loss_on_tape(&mut tape, &lp).unwrap();
    let want = per_row.iter().sum::<f64>() / 2.0;
    assert!((tape.scalar_value(batch) - want).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    let w = ObjectiveWeights::default();
    assert!((discriminator_total_loss(1.0, 0.5, &w) - 1.1).abs() < 1e-12);
    let w0 = ObjectiveWeights { lambda_im: 0.0, ..w };
    assert_eq!(discriminator_total_loss(1.3, 9.0, &w0), 1.3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let (a, b, l): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let w = ObjectiveWeights { lambda_im: l, ..w };
        assert!((discriminator_total_loss(a, b, &w) - (a + l * b)).abs() < 1e-12);
    }
    assert!(w.is_valid());
    assert!(!ObjectiveWeights { gamma: 0.0, ..w }.is_valid());
    assert!(!ObjectiveWeights { lambda_c: -1.0, ..w }.is_valid());
}

#[test]
fn batched_adversarial_loss_matches_per_sentence_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = Models::new(ModelConfig::new(10, 4).with_width(6), &mut rng).unwrap();
    let real = vec![vec![3u32, 4, 5, 1], vec![6, 1]];
    let fake = vec![vec![7u32, 1], vec![8, 9, 9, 9, 1], vec![1]];
    let mut tape = Tape::new(&m.params);
    let r = m.discriminator.forward(&mut tape, &real).unwrap();
    let f = m.discriminator.forward(&mut tape, &fake).unwrap();
    let loss = adv_loss_on_tape(&mut tape, &r, &f).unwrap();
    let qr = r.q_values(&tape);
    let qf = f.q_values(&tape);
    let mean = |rows: &[Vec<f64>], fake: bool| {
        rows.iter()
            .map(|q| {
                q.iter()
                    .map(|&x| {
                        let x = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        if fake { (1.0 - x).ln() } else { x.ln() }
                    })
                    .sum::<f64>()
                    / q.len() as f64
            })
            .sum::<f64>()
            / rows.len() as f64
    };
    let want = -(mean(&qr, false) + mean(&qf, true));
    assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
}
