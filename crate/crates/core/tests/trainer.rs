use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucap_core::autodiff::{ModelParams, Tape, Tensor};
use ucap_core::models::{DecodeMode, ModelConfig, Models, StepLogProbs};
use ucap_core::objectives::{ObjectiveWeights, RewardTrace};
use ucap_core::textcorpus::{
    build_vocab, encode, filter_corpus, tokenize, TokenSentence, Vocabulary, EOS, MAX_UNK_FRACTION,
    MIN_SENTENCE_WORDS,
};
use ucap_core::trainer::{
    compute_returns, con2sen_pairs, concepts_hit, init_pipeline, policy_surrogate, self_critic_baseline,
    DiscountMode, InitConfig, Objectives, TrainConfig, TrainData, TrainError, Trainer,
};
use ucap_core::worldsim::{
    default_templates, detect_concepts, gen_world, sample_concept_set, synth_corpus, ConceptDetection,
    ConceptDictionary, DetectorConfig, WorldConfig,
};

fn returns_oracle(trace: &RewardTrace, w: &ObjectiveWeights, literal: bool) -> Vec<f64> {
    let n = trace.r_adv.len();
    (0..n)
        .map(|t| {
            let mut g = 0.0;
            for s in t..n {
                let e = if literal { (s + 1) as i32 } else { (s - t) as i32 };
                g += w.gamma.powi(e) * (trace.r_adv[s] + w.lambda_c * trace.r_c[s]);
            }
            g + w.lambda_im * trace.r_im
        })
        .collect()
}

fn random_trace(rng: &mut ChaCha8Rng) -> RewardTrace {
    let n = rng.random_range(1..21);
    RewardTrace::new(
        (0..n).map(|_| rng.random_range(-5.0..0.0)).collect(),
        (0..n).map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..1.0) } else { 0.0 }).collect(),
        rng.random_range(-4.0..0.0),
    )
}

#[test]
fn returns_examples() {
    let w = ObjectiveWeights { lambda_c: 0.0, ..ObjectiveWeights::default() };
    let t = RewardTrace::new(vec![1.0, 1.0], vec![0.0, 0.0], 0.0);
    let g = compute_returns(&t, &w, DiscountMode::RewardToGo);
    assert!((g[0] - 1.9).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);

    let w0 = ObjectiveWeights { gamma: 1e-300, ..ObjectiveWeights::default() };
    let t = RewardTrace::new(vec![-0.5, -0.2, -0.1], vec![0.0, 0.8, 0.0], -2.0);
    let g = compute_returns(&t, &w0, DiscountMode::RewardToGo);
    for s in 0..3 {
        let inst = t.r_adv[s] + w0.lambda_c * t.r_c[s] + w0.lambda_im * t.r_im;
        assert!((g[s] - inst).abs() < 1e-12);
    }
}

#[test]
fn returns_match_double_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let trace = random_trace(&mut rng);
        let w = ObjectiveWeights {
            lambda_c: rng.random_range(0.0..20.0),
            lambda_im: rng.random_range(0.0..1.0),
            lambda_sen: 1.0,
            gamma: rng.random_range(0.05..1.0),
        };
        for (mode, literal) in [(DiscountMode::RewardToGo, false), (DiscountMode::Literal, true)] {
            let got = compute_returns(&trace, &w, mode);
            let want = returns_oracle(&trace, &w, literal);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn returns_are_linear_in_concept_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trace = random_trace(&mut rng);
    let w = ObjectiveWeights::default();
    let w2 = ObjectiveWeights { lambda_c: 2.0 * w.lambda_c, ..w };
    let w0 = ObjectiveWeights { lambda_c: 0.0, ..w };
    let g0 = compute_returns(&trace, &w0, DiscountMode::RewardToGo);
    let g1 = compute_returns(&trace, &w, DiscountMode::RewardToGo);
    let g2 = compute_returns(&trace, &w2, DiscountMode::RewardToGo);
    for t in 0..g0.len() {
        assert!(((g2[t] - g0[t]) - 2.0 * (g1[t] - g0[t])).abs() < 1e-9);
    }
}

#[test]
fn self_critic_fixed_point_and_extension() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut trace = random_trace(&mut rng);
    let w = ObjectiveWeights::default();
    trace.returns = compute_returns(&trace, &w, DiscountMode::RewardToGo);
    trace.baseline = self_critic_baseline(&trace.returns, trace.len());
    assert!(trace.advantages().iter().all(|&a| a == 0.0));
    let b = self_critic_baseline(&[3.0, 2.0], 4);
    assert_eq!(b, vec![3.0, 2.0, 2.0, 2.0]);
    assert_eq!(self_critic_baseline(&[3.0, 2.0, 1.0], 2), vec![3.0, 2.0]);
}

/// Two-step tabular softmax policy over three tokens with fixed per-step
/// rewards `r1[a]`, `r2[a][b]`, undiscounted.
struct Toy {
    theta1: Vec<f64>,
    theta2: Vec<f64>,
    r1: [f64; 3],
    r2: [[f64; 3]; 3],
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Toy {
    fn p1(&self) -> Vec<f64> {
        softmax(&self.theta1)
    }

    fn p2(&self, a: usize) -> Vec<f64> {
        softmax(&self.theta2[a * 3..a * 3 + 3])
    }

    /// `∇ E[r1 + r2]` by enumerating all nine trajectories.
    fn analytic_gradient(&self) -> Vec<f64> {
        let mut g = vec![0.0; 12];
        let p1 = self.p1();
        for a in 0..3 {
            let p2 = self.p2(a);
            for b in 0..3 {
                let prob = p1[a] * p2[b];
                let total = self.r1[a] + self.r2[a][b];
                for k in 0..3 {
                    g[k] += prob * total * ((a == k) as u8 as f64 - p1[k]);
                    g[3 + a * 3 + k] += prob * total * ((b == k) as u8 as f64 - p2[k]);
                }
            }
        }
        g
    }

    fn greedy(&self) -> (usize, usize) {
        let argmax = |p: &[f64]| (0..3).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
        let a = argmax(&self.p1());
        (a, argmax(&self.p2(a)))
    }

    /// Mean REINFORCE estimate from the tape and per-coordinate variance of
    /// the single-sample estimate.
    fn estimate(&self, n: usize, baseline: bool, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
        let w = ObjectiveWeights { lambda_c: 0.0, lambda_im: 0.0, lambda_sen: 0.0, gamma: 1.0 };
        let ret = |a: usize, b: usize| {
            compute_returns(&RewardTrace::new(vec![self.r1[a], self.r2[a][b]], vec![0.0; 2], 0.0), &w, DiscountMode::RewardToGo)
        };
        let (ga, gb) = self.greedy();
        let base = if baseline { self_critic_baseline(&ret(ga, gb), 2) } else { vec![0.0, 0.0] };
        let p1 = self.p1();
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let mut adv = Vec::with_capacity(n);
        let draw = |p: &[f64], rng: &mut ChaCha8Rng| {
            let u: f64 = rng.random();
            if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 }
        };
        for _ in 0..n {
            let a = draw(&p1, rng);
            let b = draw(&self.p2(a), rng);
            first.push(a);
            second.push(b);
            let g = ret(a, b);
            adv.push(vec![g[0] - base[0], g[1] - base[1]]);
        }

        let mut params = ModelParams::new();
        let t1 = params.insert("toy.theta1", Tensor::new(&[1, 3], self.theta1.clone()).unwrap()).unwrap();
        let t2 = params.insert("toy.theta2", Tensor::new(&[3, 3], self.theta2.clone()).unwrap()).unwrap();
        let mut tape = Tape::new(&params);
        let table1 = tape.param(t1);
        let l1 = tape.gather_rows(table1, &vec![0; n]).unwrap();
        let lp1 = tape.log_softmax(l1).unwrap();
        let s1 = tape.pick(lp1, &first).unwrap();
        let table2 = tape.param(t2);
        let l2 = tape.gather_rows(table2, &first).unwrap();
        let lp2 = tape.log_softmax(l2).unwrap();
        let s2 = tape.pick(lp2, &second).unwrap();
        let lp = StepLogProbs { steps: vec![s1, s2], masks: vec![vec![1.0; n]; 2], lens: vec![2; n] };
        let loss = policy_surrogate(&mut tape, &lp, &adv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut mean: Vec<f64> = grads.param(t1).unwrap().iter().map(|g| -g).collect();
        mean.extend(grads.param(t2).unwrap().iter().map(|g| -g));

        // Single-sample estimates in closed form for the variance.
        let mut sum = vec![0.0; 12];
        let mut sq = vec![0.0; 12];
        for i in 0..n {
            let (a, b) = (first[i], second[i]);
            let p2 = self.p2(a);
            let mut e = vec![0.0; 12];
            for k in 0..3 {
                e[k] = adv[i][0] * ((a == k) as u8 as f64 - p1[k]);
                e[3 + a * 3 + k] = adv[i][1] * ((b == k) as u8 as f64 - p2[k]);
            }
            for k in 0..12 {
                sum[k] += e[k];
                sq[k] += e[k] * e[k];
            }
        }
        for k in 0..12 {
            assert!((sum[k] / n as f64 - mean[k]).abs() < 1e-9);
        }
        let var: f64 = (0..12)
            .map(|k| sq[k] / n as f64 - (sum[k] / n as f64).powi(2))
            .sum();
        (mean, var)
    }
}

#[test]
fn reinforce_matches_enumerated_gradient() {
    let toy = Toy {
        theta1: vec![0.6, 0.6, -0.1],
        theta2: vec![1.0, -0.6, 0.2, 1.0, 0.7, -0.9, 0.1, 0.2, 0.4],
        r1: [2.5, 4.5, 1.0],
        r2: [[0.2, 3.1, 1.5], [1.7, 3.9, 0.8], [0.8, 4.6, 0.9]],
    };
    let want = toy.analytic_gradient();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (plain, var_plain) = toy.estimate(100_000, false, &mut rng);
    let (based, var_based) = toy.estimate(100_000, true, &mut rng);
    for k in 0..12 {
        let rel = |x: f64| (x - want[k]).abs() / want[k].abs();
        assert!(rel(plain[k]) < 0.05, "coord {k}: {} vs {}", plain[k], want[k]);
        assert!(rel(based[k]) < 0.05, "coord {k}: {} vs {}", based[k], want[k]);
    }
    assert!(var_based < var_plain, "{var_based} vs {var_plain}");
}

struct Synthetic {
    dict: ConceptDictionary,
    vocab: Vocabulary,
    data: TrainData,
}

fn synthetic(num_images: usize, sentences: usize, detector: DetectorConfig, seed: u64) -> Synthetic {
    let wcfg = WorldConfig { num_concepts: 8, num_images, dim: 16, ..WorldConfig::default() };
    let world = gen_world(seed, &wcfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let sets: Vec<Vec<usize>> = (0..sentences).map(|_| sample_concept_set(&mut rng, 8, 1, 3)).collect();
    let text = synth_corpus(&sets, &default_templates(), &world.dictionary, sentences, &mut rng).unwrap();
    let toks: Vec<Vec<String>> = text.iter().map(|s| tokenize(s)).collect();
    let vocab = build_vocab(&toks, 5, world.dictionary.words()).unwrap();
    let kept = filter_corpus(&toks, MIN_SENTENCE_WORDS, MAX_UNK_FRACTION, &vocab);
    let corpus: Vec<TokenSentence> = kept.iter().map(|s| encode(s, &vocab).unwrap()).collect();
    let dets: Vec<ConceptDetection> = world
        .images
        .iter()
        .map(|im| detect_concepts(im, &world.dictionary, &detector, &mut rng).unwrap())
        .collect();
    let data = TrainData::new(world.images.clone(), dets, corpus, &vocab, &world.dictionary).unwrap();
    Synthetic { dict: world.dictionary, vocab, data }
}

fn small_models(s: &Synthetic, width: usize, seed: u64) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Models::new(ModelConfig::new(s.vocab.len(), 16).with_width(width), &mut rng).unwrap()
}

fn quick_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        steps,
        length_cap: 14,
        init: InitConfig { con2sen_steps: 20, feat2sen_steps: 20, warmup_steps: 10, dis_pretrain_steps: 10, batch_size: 8 },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_advantage_without_reconstruction_leaves_generator_unchanged() {
    let s = synthetic(20, 200, DetectorConfig::default(), 5);
    let mut m = small_models(&s, 8, 6);
    let eos = m.params.id("gen.output.bias").unwrap();
    m.params.get_mut(eos).data_mut()[EOS as usize] = 50.0;
    let before = m.params.fingerprint("gen.");
    let cfg = TrainConfig { objectives: Objectives::ADV_CON_IM, ..quick_cfg(1) };
    let mut tr = Trainer::new(cfg).unwrap();
    tr.generator_step(&mut m, &s.data, &[0, 1, 2, 3], &[0, 1]).unwrap();
    assert_eq!(m.params.fingerprint("gen."), before);
}

#[test]
fn steps_touch_only_their_own_network() {
    let s = synthetic(20, 200, DetectorConfig::default(), 7);
    let mut m = small_models(&s, 8, 8);
    let mut tr = Trainer::new(quick_cfg(1)).unwrap();
    let (g, d, c) = (m.params.fingerprint("gen."), m.params.fingerprint("dis."), m.params.fingerprint("c2s."));
    tr.generator_step(&mut m, &s.data, &[0, 1, 2], &[0, 1, 2]).unwrap();
    assert_ne!(m.params.fingerprint("gen."), g);
    assert_eq!(m.params.fingerprint("dis."), d);
    let g = m.params.fingerprint("gen.");
    tr.discriminator_step(&mut m, &s.data, &[0, 1, 2], &[0, 1, 2]).unwrap();
    assert_eq!(m.params.fingerprint("gen."), g);
    assert_ne!(m.params.fingerprint("dis."), d);
    assert_eq!(m.params.fingerprint("c2s."), c);
}

#[test]
fn encoder_flag_routes_sentence_loss_into_discriminator() {
    let s = synthetic(20, 200, DetectorConfig::default(), 7);
    let mut m = small_models(&s, 8, 8);
    let cfg = TrainConfig { sen_updates_encoder: true, ..quick_cfg(1) };
    let mut tr = Trainer::new(cfg).unwrap();
    let d = m.params.fingerprint("dis.");
    tr.generator_step(&mut m, &s.data, &[0, 1, 2], &[0, 1, 2]).unwrap();
    assert_ne!(m.params.fingerprint("dis."), d);
}

#[test]
fn zero_discriminator_starts_at_chance() {
    let s = synthetic(20, 200, DetectorConfig::default(), 9);
    let mut m = small_models(&s, 8, 10);
    m.zero_prefix("dis.");
    let mut tr = Trainer::new(quick_cfg(1)).unwrap();
    let st = tr.discriminator_step(&mut m, &s.data, &[0, 1, 2, 3], &[0, 1, 2]).unwrap();
    assert!((st.l_adv - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(st.mean_q_real, 0.5);
    assert_eq!(st.mean_q_fake, 0.5);
}

#[test]
fn discriminator_separates_a_frozen_random_generator() {
    let s = synthetic(64, 400, DetectorConfig::default(), 11);
    let mut m = small_models(&s, 16, 12);
    let cfg = TrainConfig { lr_main: 3e-3, batch_size: 16, ..quick_cfg(0) };
    let mut tr = Trainer::new(cfg).unwrap();
    let gen = m.params.fingerprint("gen.");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut last = None;
    for _ in 0..200 {
        let imgs: Vec<usize> = (0..16).map(|_| rng.random_range(0..s.data.images.len())).collect();
        let sents: Vec<usize> = (0..16).map(|_| rng.random_range(0..s.data.corpus.len())).collect();
        last = Some(tr.discriminator_step(&mut m, &s.data, &imgs, &sents).unwrap());
    }
    let st = last.unwrap();
    assert_eq!(m.params.fingerprint("gen."), gen);
    assert!(st.mean_q_real > 0.9, "{st:?}");
    assert!(st.mean_q_fake < 0.1, "{st:?}");
}

#[test]
fn concept_reward_alone_raises_the_rewarded_word() {
    let s = synthetic(4, 200, DetectorConfig::default(), 14);
    let mut m = small_models(&s, 12, 15);
    let word = s.vocab.id(s.dict.word(0)).unwrap();
    let det = ConceptDetection::new([(s.dict.word(0), 1.0)]).unwrap();
    let mut data = s.data.clone();
    data.detections = vec![det; data.images.len()];
    let data = TrainData::new(data.images, data.detections, data.corpus, &s.vocab, &s.dict).unwrap();
    let only_con = Objectives { adv: false, con: true, im: false, sen: false };
    let cfg = TrainConfig { lr_main: 1e-2, length_cap: 3, objectives: only_con, ..quick_cfg(0) };
    let mut tr = Trainer::new(cfg).unwrap();
    let first_step = |m: &Models| {
        // Exact probability of opening with the rewarded word.
        let sent = TokenSentence::new(vec![word], s.vocab.len()).unwrap();
        m.generator.logprob(&m.params, &data.images[0].vector, &sent).unwrap()[0].exp()
    };
    let mut trend = vec![first_step(&m)];
    for step in 1..=50 {
        tr.generator_step(&mut m, &data, &[0; 16], &[]).unwrap();
        if step % 10 == 0 {
            trend.push(first_step(&m));
        }
    }
    for w in trend.windows(2) {
        assert!(w[1] > w[0], "{trend:?}");
    }
}

#[test]
fn zero_steps_keep_parameters() {
    let s = synthetic(20, 200, DetectorConfig::default(), 16);
    let mut m = small_models(&s, 8, 17);
    let before = m.params.clone();
    let mut tr = Trainer::new(quick_cfg(0)).unwrap();
    let log = tr.train(&mut m, &s.data, |_, _| Ok(())).unwrap();
    assert!(log.is_empty());
    assert_eq!(m.params, before);
}

#[test]
fn training_is_reproducible() {
    let s = synthetic(20, 200, DetectorConfig::default(), 18);
    let run = || {
        let mut m = small_models(&s, 8, 19);
        let mut tr = Trainer::new(TrainConfig { seed: 3, ..quick_cfg(5) }).unwrap();
        let log = tr.train(&mut m, &s.data, |_, _| Ok(())).unwrap();
        (log, m.params.to_checkpoint())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.len(), 5);
    assert_eq!(a.records.last().unwrap().step, 5);
}

#[test]
fn empty_batches_and_bad_configs_are_rejected() {
    let s = synthetic(20, 200, DetectorConfig::default(), 20);
    let mut m = small_models(&s, 8, 21);
    let mut tr = Trainer::new(quick_cfg(1)).unwrap();
    assert!(matches!(tr.generator_step(&mut m, &s.data, &[], &[0]), Err(TrainError::EmptyBatch(_))));
    assert!(matches!(tr.discriminator_step(&mut m, &s.data, &[0], &[]), Err(TrainError::EmptyBatch(_))));
    assert!(Trainer::new(TrainConfig { lr_main: 0.0, ..quick_cfg(1) }).is_err());
    assert!(Trainer::new(TrainConfig { batch_size: 0, ..quick_cfg(1) }).is_err());
}

#[test]
fn objectives_parse_and_mask_weights() {
    assert_eq!(Objectives::parse("full"), Some(Objectives::FULL));
    assert_eq!(Objectives::parse("adv"), Some(Objectives::ADV));
    assert_eq!(Objectives::parse("adv+con"), Some(Objectives::ADV_CON));
    assert_eq!(Objectives::parse("adv+con+im"), Some(Objectives::ADV_CON_IM));
    assert_eq!(Objectives::parse("nope"), None);
    let w = Objectives::ADV.apply(&ObjectiveWeights::default());
    assert_eq!((w.lambda_c, w.lambda_im, w.lambda_sen), (0.0, 0.0, 0.0));
}

#[test]
fn concept_hits_count_distinct_words() {
    assert_eq!(concepts_hit(&[5, 5, 7], &[5, 6, 7]), 2);
    assert_eq!(concepts_hit(&[5], &[5, 5]), 1);
    assert_eq!(concepts_hit(&[], &[5]), 0);
}

#[test]
fn sentences_without_concepts_make_no_pairs() {
    let dict = ConceptDictionary::new(["dog", "cat"]).unwrap();
    let vocab = Vocabulary::from_words(["a", "dog", "cat", "sits"]).unwrap();
    let with = encode(&["a", "cat", "and", "a", "dog"], &vocab).unwrap();
    let without = encode(&["a", "sits"], &vocab).unwrap();
    let pairs = con2sen_pairs(&[with.clone(), without], &dict, &vocab);
    assert_eq!(pairs.len(), 1);
    // Dictionary order: dog before cat.
    assert_eq!(pairs[0].0, vec![vocab.id("dog").unwrap(), vocab.id("cat").unwrap()]);
    assert_eq!(pairs[0].1, with.with_eos());
}

#[test]
fn init_pipeline_recovers_concepts_from_a_clean_detector() {
    let clean = DetectorConfig { p_miss: 0.0, p_false: 0.0, ..DetectorConfig::default() };
    let s = synthetic(60, 600, clean, 22);
    let mut m = small_models(&s, 32, 23);
    let random_gen = m.clone();
    let cfg = TrainConfig {
        init: InitConfig { con2sen_steps: 2000, feat2sen_steps: 150, warmup_steps: 20, dis_pretrain_steps: 10, batch_size: 16 },
        lr_init: 5e-3,
        ..quick_cfg(0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let rep = init_pipeline(&mut m, &s.data, &s.dict, &s.vocab, &cfg, &mut rng).unwrap();
    assert!(rep.skipped_images.is_empty());
    assert_eq!(rep.pseudo_pairs, 60);
    let with_truth = rep
        .pseudo_captions
        .iter()
        .enumerate()
        .filter(|(i, (_, ids))| concepts_hit(ids, s.data.metric_concepts(*i)) > 0)
        .count();
    assert!(with_truth as f64 >= 0.95 * 60.0, "{with_truth}/60");

    let ce = |models: &Models| {
        let mut total = 0.0;
        for (i, (_, ids)) in rep.pseudo_captions.iter().enumerate() {
            let sent = TokenSentence::new(ids.clone(), s.vocab.len()).unwrap();
            let lp = models.generator.logprob(&models.params, &s.data.images[i].vector, &sent).unwrap();
            total -= lp.iter().sum::<f64>();
        }
        total
    };
    assert!(ce(&m) < ce(&random_gen));
    assert_ne!(m.params.fingerprint("c2s."), random_gen.params.fingerprint("c2s."));
    assert_ne!(m.params.fingerprint("dis."), random_gen.params.fingerprint("dis."));
}
