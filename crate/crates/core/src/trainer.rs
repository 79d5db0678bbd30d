//! Policy-gradient generator updates, discriminator updates, the
//! initialization pipeline and the alternating training loop.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, clip_grad_norm, AdamState, AutodiffError, Gradients, ModelParams, ParamId, Tape, Var};
use crate::models::{stack_rows, DecodeMode, Generator, ModelConfig, ModelError, Models, Rollout, StepLogProbs};
use crate::objectives::{
    adv_loss_on_tape, adversarial_reward, concept_reward_from_table, concept_table, image_recon_loss,
    image_recon_loss_on_tape, sentence_recon_loss_on_tape, ObjectiveError, ObjectiveWeights, RewardTrace,
};
use crate::textcorpus::{add_noise, NoiseConfig, TextError, TokenSentence, Vocabulary};
use crate::worldsim::{ConceptDetection, ConceptDictionary, ImageFeature};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("{images} images but {detections} detection sets")]
    Misaligned { images: usize, detections: usize },
    #[error("no usable {0}")]
    NoPairs(&'static str),
}

/// Exponent used when discounting future rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiscountMode {
    /// `γ^{s-t}`.
    #[default]
    RewardToGo,
    /// `γ^s` with `s` counted from 1, as the formula is printed.
    Literal,
}

/// Which training objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objectives {
    pub adv: bool,
    pub con: bool,
    pub im: bool,
    pub sen: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Objectives::FULL
    }
}

impl Objectives {
    pub const FULL: Objectives = Objectives { adv: true, con: true, im: true, sen: true };
    pub const ADV: Objectives = Objectives { adv: true, con: false, im: false, sen: false };
    pub const ADV_CON: Objectives = Objectives { adv: true, con: true, im: false, sen: false };
    pub const ADV_CON_IM: Objectives = Objectives { adv: true, con: true, im: true, sen: false };

    /// `adv`, `adv+con`, `adv+con+im` or `full`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adv" => Some(Self::ADV),
            "adv+con" => Some(Self::ADV_CON),
            "adv+con+im" => Some(Self::ADV_CON_IM),
            "full" | "adv+con+im+sen" => Some(Self::FULL),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.adv, "adv"), (self.con, "con"), (self.im, "im"), (self.sen, "sen")] {
            if on {
                parts.push(name);
            }
        }
        if parts.len() == 4 {
            return "full".into();
        }
        parts.join("+")
    }

    /// Weights with disabled objectives zeroed.
    pub fn apply(&self, w: &ObjectiveWeights) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda_c: if self.con { w.lambda_c } else { 0.0 },
            lambda_im: if self.im { w.lambda_im } else { 0.0 },
            lambda_sen: if self.sen { w.lambda_sen } else { 0.0 },
            gamma: w.gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub con2sen_steps: usize,
    pub feat2sen_steps: usize,
    /// Maximum-likelihood warm-up of the throwaway generator.
    pub warmup_steps: usize,
    pub dis_pretrain_steps: usize,
    pub batch_size: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            con2sen_steps: 2000,
            feat2sen_steps: 2000,
            warmup_steps: 500,
            dis_pretrain_steps: 500,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: ObjectiveWeights,
    pub lr_main: f64,
    pub lr_init: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub length_cap: usize,
    pub clip_norm: f64,
    pub discount: DiscountMode,
    pub objectives: Objectives,
    /// Let the sentence reconstruction loss also update the discriminator
    /// acting as sentence encoder.
    pub sen_updates_encoder: bool,
    pub noise: NoiseConfig,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: ObjectiveWeights::default(),
            lr_main: 1e-4,
            lr_init: 1e-3,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            length_cap: 20,
            clip_norm: 5.0,
            discount: DiscountMode::RewardToGo,
            objectives: Objectives::FULL,
            sen_updates_encoder: false,
            noise: NoiseConfig::default(),
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_main > 0.0 && self.lr_init > 0.0) {
            return Err(TrainError::Config("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.init.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1"));
        }
        if self.length_cap == 0 {
            return Err(TrainError::Config("length cap must be at least 1"));
        }
        if !self.weights.is_valid() {
            return Err(TrainError::Config("weights must be non-negative and gamma in (0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("clip norm must be positive"));
        }
        Ok(())
    }
}

/// One optimizer iteration (a generator step followed by a discriminator
/// step).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainRecord {
    pub step: usize,
    pub l_adv: f64,
    pub l_im: f64,
    pub l_sen: f64,
    pub mean_r_adv: f64,
    pub mean_r_c: f64,
    pub mean_r_im: f64,
    pub avg_concepts: f64,
    pub pg_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: TrainRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// `G_t` for every step of a trace; `r^im` is added undiscounted to each.
pub fn compute_returns(trace: &RewardTrace, weights: &ObjectiveWeights, mode: DiscountMode) -> Vec<f64> {
    let n = trace.r_adv.len();
    let inst: Vec<f64> = (0..n)
        .map(|s| trace.r_adv[s] + weights.lambda_c * trace.r_c.get(s).copied().unwrap_or(0.0))
        .collect();
    let im = weights.lambda_im * trace.r_im;
    let mut out = vec![0.0; n];
    match mode {
        DiscountMode::RewardToGo => {
            let mut acc = 0.0;
            for t in (0..n).rev() {
                acc = inst[t] + weights.gamma * acc;
                out[t] = acc + im;
            }
        }
        DiscountMode::Literal => {
            let mut acc = 0.0;
            for t in (0..n).rev() {
                acc += libm::pow(weights.gamma, (t + 1) as f64) * inst[t];
                out[t] = acc + im;
            }
        }
    }
    out
}

/// `b_t` from the greedy rollout's returns, extended with its final return.
pub fn self_critic_baseline(greedy_returns: &[f64], n: usize) -> Vec<f64> {
    let last = greedy_returns.last().copied().unwrap_or(0.0);
    (0..n).map(|t| greedy_returns.get(t).copied().unwrap_or(last)).collect()
}

/// `-(1/B) Σ_b Σ_t A_bt · log p_bt`.
pub fn policy_surrogate(tape: &mut Tape<'_>, lp: &StepLogProbs, advantages: &[Vec<f64>]) -> Result<Var, TrainError> {
    let rows = lp.lens.len() as f64;
    let s = lp.weighted_sum(tape, Some(advantages))?;
    Ok(tape.scale(s, -1.0 / rows))
}

/// Copies the gradients of `ids` into `params`, clips and steps Adam.
/// Returns the pre-clip norm.
pub fn apply_gradients(
    params: &mut ModelParams,
    grads: &Gradients,
    ids: &[ParamId],
    opt: &mut AdamState,
    clip: f64,
) -> Result<f64, TrainError> {
    for &id in ids {
        let t = params.get_mut(id);
        t.clear_grad();
        match grads.param(id) {
            Some(g) => t.accumulate_grad(g),
            None => {
                let z = vec![0.0; t.len()];
                t.accumulate_grad(&z);
            }
        }
    }
    let norm = clip_grad_norm(params, ids, clip);
    adam_step(params, ids, opt)?;
    Ok(norm)
}

/// Images, their detections and the sentence corpus for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub images: Vec<ImageFeature>,
    pub detections: Vec<ConceptDetection>,
    pub corpus: Vec<TokenSentence>,
    tables: Vec<Vec<f64>>,
    metric: Vec<Vec<u32>>,
}

impl TrainData {
    /// The concept metric uses ground truth where present, detections
    /// otherwise.
    pub fn new(
        images: Vec<ImageFeature>,
        detections: Vec<ConceptDetection>,
        corpus: Vec<TokenSentence>,
        vocab: &Vocabulary,
        dict: &ConceptDictionary,
    ) -> Result<Self, TrainError> {
        if images.len() != detections.len() {
            return Err(TrainError::Misaligned {
                images: images.len(),
                detections: detections.len(),
            });
        }
        let tables = detections.iter().map(|d| concept_table(d, vocab)).collect();
        let metric = images
            .iter()
            .zip(&detections)
            .map(|(img, det)| match &img.truth_concepts {
                Some(truth) => truth.iter().filter_map(|&c| vocab.id(dict.word(c))).collect(),
                None => det.words().filter_map(|w| vocab.id(w)).collect(),
            })
            .collect();
        Ok(TrainData {
            images,
            detections,
            corpus,
            tables,
            metric,
        })
    }

    pub fn concept_table(&self, image: usize) -> &[f64] {
        &self.tables[image]
    }

    /// Vocabulary ids the concept metric checks for `image`.
    pub fn metric_concepts(&self, image: usize) -> &[u32] {
        &self.metric[image]
    }
}

/// Distinct metric concepts present in `words`.
pub fn concepts_hit(words: &[u32], concepts: &[u32]) -> usize {
    concepts
        .iter()
        .enumerate()
        .filter(|(i, c)| !concepts[..*i].contains(c) && words.contains(c))
        .count()
}

/// Fills `q` on each rollout and returns its reward trace with returns.
/// `targets[b]` is the vector `x'` is compared against.
pub fn score_rollouts(
    models: &Models,
    rollouts: &mut [Rollout],
    targets: &[&[f64]],
    tables: &[&[f64]],
    weights: &ObjectiveWeights,
    objectives: Objectives,
    mode: DiscountMode,
) -> Result<Vec<RewardTrace>, TrainError> {
    let seqs: Vec<Vec<u32>> = rollouts.iter().map(|r| r.ids.clone()).collect();
    let mut tape = Tape::new(&models.params);
    let out = models.discriminator.forward(&mut tape, &seqs)?;
    let qs = out.q_values(&tape);
    let x = models.discriminator.latent_on_tape(&mut tape, out.h_final)?;
    let d = models.config.feature_dim;
    let eff = objectives.apply(weights);
    let mut traces = Vec::with_capacity(rollouts.len());
    for (b, roll) in rollouts.iter_mut().enumerate() {
        roll.q = qs[b].clone();
        let r_adv = if objectives.adv {
            adversarial_reward(&roll.q)
        } else {
            vec![0.0; roll.len()]
        };
        let r_c = concept_reward_from_table(&roll.ids, tables[b]);
        let r_im = -image_recon_loss(targets[b], &tape.value(x)[b * d..(b + 1) * d])?;
        let mut trace = RewardTrace::new(r_adv, r_c, r_im);
        trace.returns = compute_returns(&trace, &eff, mode);
        traces.push(trace);
    }
    Ok(traces)
}

/// Greedy-rollout baseline for one conditioning vector.
pub fn greedy_baseline<R: Rng + ?Sized>(
    models: &Models,
    cond: &[f64],
    table: &[f64],
    cfg: &TrainConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, TrainError> {
    let mut rolls = models
        .generator
        .rollout(&models.params, &[cond], &[DecodeMode::Greedy], rng, cfg.length_cap)?;
    let traces = score_rollouts(models, &mut rolls, &[cond], &[table], &cfg.weights, cfg.objectives, cfg.discount)?;
    Ok(self_critic_baseline(&traces[0].returns, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GenStats {
    pub pg_loss: f64,
    pub l_sen: f64,
    pub mean_r_adv: f64,
    pub mean_r_c: f64,
    pub mean_r_im: f64,
    pub avg_concepts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisStats {
    pub l_adv: f64,
    pub l_im: f64,
    pub mean_q_real: f64,
    pub mean_q_fake: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Optimizer state and RNG for the main training phase.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen_opt: AdamState,
    pub dis_opt: AdamState,
    pub rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Trainer {
            gen_opt: AdamState::new(cfg.lr_main),
            dis_opt: AdamState::new(cfg.lr_main),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            cfg,
        })
    }

    /// Continues from an already-advanced RNG (e.g. after initialization).
    pub fn with_rng(cfg: TrainConfig, rng: ChaCha8Rng) -> Result<Self, TrainError> {
        let mut t = Trainer::new(cfg)?;
        t.rng = rng;
        Ok(t)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn sample_batch(&mut self, n: usize) -> Vec<usize> {
        let k = self.cfg.batch_size.min(n);
        let mut idx = sample_indices(&mut self.rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Policy-gradient update plus sentence reconstruction on the generator.
    pub fn generator_step(
        &mut self,
        models: &mut Models,
        data: &TrainData,
        images: &[usize],
        sentences: &[usize],
    ) -> Result<GenStats, TrainError> {
        if images.is_empty() {
            return Err(TrainError::EmptyBatch("image"));
        }
        let cfg = &self.cfg;
        let eff = cfg.objectives.apply(&cfg.weights);
        let b = images.len();
        let conds: Vec<&[f64]> = images
            .iter()
            .chain(images)
            .map(|&i| data.images[i].vector.as_slice())
            .collect();
        let tables: Vec<&[f64]> = images.iter().chain(images).map(|&i| data.concept_table(i)).collect();
        let modes: Vec<DecodeMode> = (0..2 * b)
            .map(|i| if i < b { DecodeMode::Sample } else { DecodeMode::Greedy })
            .collect();
        let mut rolls = models
            .generator
            .rollout(&models.params, &conds, &modes, &mut self.rng, cfg.length_cap)?;
        let mut traces = score_rollouts(models, &mut rolls, &conds, &tables, &cfg.weights, cfg.objectives, cfg.discount)?;
        for i in 0..b {
            let base = self_critic_baseline(&traces[b + i].returns, rolls[i].len());
            traces[i].baseline = base;
        }
        let advantages: Vec<Vec<f64>> = traces[..b].iter().map(RewardTrace::advantages).collect();
        let targets: Vec<Vec<u32>> = rolls[..b].iter().map(|r| r.ids.clone()).collect();

        let use_sen = eff.lambda_sen > 0.0 && !sentences.is_empty();
        let (noised, originals): (Vec<Vec<u32>>, Vec<Vec<u32>>) = if use_sen {
            sentences
                .iter()
                .map(|&s| {
                    let orig = &data.corpus[s];
                    (add_noise(orig, &cfg.noise, &mut self.rng).with_eos(), orig.with_eos())
                })
                .unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        let frozen_latent = if use_sen && !cfg.sen_updates_encoder {
            Some(models.discriminator.encode_latent_batch(&models.params, &noised)?)
        } else {
            None
        };

        let (grads, pg_loss, l_sen) = {
            let mut tape = Tape::new(&models.params);
            let cond = stack_rows(&mut tape, &conds[..b], models.config.feature_dim)?;
            let lp = models.generator.logprob_on_tape(&mut tape, cond, &targets)?;
            let pg = policy_surrogate(&mut tape, &lp, &advantages)?;
            let mut loss = pg;
            let mut l_sen = 0.0;
            if use_sen {
                let latent = match &frozen_latent {
                    Some(rows) => {
                        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                        stack_rows(&mut tape, &refs, models.config.feature_dim)?
                    }
                    None => {
                        let out = models.discriminator.forward(&mut tape, &noised)?;
                        models.discriminator.latent_on_tape(&mut tape, out.h_final)?
                    }
                };
                let slp = models.generator.logprob_on_tape(&mut tape, latent, &originals)?;
                let ls = sentence_recon_loss_on_tape(&mut tape, &slp)?;
                l_sen = tape.scalar_value(ls);
                let w = tape.scale(ls, eff.lambda_sen);
                loss = tape.add(loss, w)?;
            }
            (tape.backward(loss)?, tape.scalar_value(pg), l_sen)
        };
        let gen_ids = models.generator_ids();
        apply_gradients(&mut models.params, &grads, &gen_ids, &mut self.gen_opt, cfg.clip_norm)?;
        if use_sen && cfg.sen_updates_encoder {
            let dis_ids = models.discriminator_ids();
            apply_gradients(&mut models.params, &grads, &dis_ids, &mut self.dis_opt, cfg.clip_norm)?;
        }

        let sampled = &traces[..b];
        Ok(GenStats {
            pg_loss,
            l_sen,
            mean_r_adv: mean(sampled.iter().flat_map(|t| t.r_adv.iter().copied())),
            mean_r_c: mean(sampled.iter().flat_map(|t| t.r_c.iter().copied())),
            mean_r_im: mean(sampled.iter().map(|t| t.r_im)),
            avg_concepts: mean(
                images
                    .iter()
                    .zip(&rolls[b..])
                    .map(|(&i, r)| concepts_hit(r.words(), data.metric_concepts(i)) as f64),
            ),
        })
    }

    /// Adversarial and image reconstruction update on the discriminator.
    pub fn discriminator_step(
        &mut self,
        models: &mut Models,
        data: &TrainData,
        images: &[usize],
        sentences: &[usize],
    ) -> Result<DisStats, TrainError> {
        if images.is_empty() {
            return Err(TrainError::EmptyBatch("image"));
        }
        if sentences.is_empty() {
            return Err(TrainError::EmptyBatch("sentence"));
        }
        let cfg = &self.cfg;
        let eff = cfg.objectives.apply(&cfg.weights);
        let conds: Vec<&[f64]> = images.iter().map(|&i| data.images[i].vector.as_slice()).collect();
        let modes = vec![DecodeMode::Sample; images.len()];
        let rolls = models
            .generator
            .rollout(&models.params, &conds, &modes, &mut self.rng, cfg.length_cap)?;
        let fake: Vec<Vec<u32>> = rolls.into_iter().map(|r| r.ids).collect();
        let real: Vec<Vec<u32>> = sentences.iter().map(|&s| data.corpus[s].with_eos()).collect();
        let (grads, stats) = {
            let mut tape = Tape::new(&models.params);
            let d = models.config.feature_dim;
            let (l_adv, mean_q_real, mean_q_fake, fake_h) = adv_terms(models, &mut tape, &real, &fake)?;
            let x = models.discriminator.latent_on_tape(&mut tape, fake_h)?;
            let target = stack_rows(&mut tape, &conds, d)?;
            let l_im = image_recon_loss_on_tape(&mut tape, target, x)?;
            let loss = if eff.lambda_im > 0.0 {
                let w = tape.scale(l_im, eff.lambda_im);
                tape.add(l_adv, w)?
            } else {
                l_adv
            };
            let stats = DisStats {
                l_adv: tape.scalar_value(l_adv),
                l_im: tape.scalar_value(l_im),
                mean_q_real,
                mean_q_fake,
            };
            (tape.backward(loss)?, stats)
        };
        let ids = models.discriminator_ids();
        apply_gradients(&mut models.params, &grads, &ids, &mut self.dis_opt, cfg.clip_norm)?;
        Ok(stats)
    }

    /// One generator step then one discriminator step on fresh batches.
    pub fn iteration(&mut self, models: &mut Models, data: &TrainData) -> Result<TrainRecord, TrainError> {
        let n_img = data.images.len();
        let n_sen = data.corpus.len();
        if n_img == 0 {
            return Err(TrainError::EmptyBatch("image"));
        }
        if n_sen == 0 {
            return Err(TrainError::EmptyBatch("sentence"));
        }
        let imgs = self.sample_batch(n_img);
        let sents = self.sample_batch(n_sen);
        let g = self.generator_step(models, data, &imgs, &sents)?;
        let imgs = self.sample_batch(n_img);
        let sents = self.sample_batch(n_sen);
        let d = self.discriminator_step(models, data, &imgs, &sents)?;
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            l_adv: d.l_adv,
            l_im: d.l_im,
            l_sen: g.l_sen,
            mean_r_adv: g.mean_r_adv,
            mean_r_c: g.mean_r_c,
            mean_r_im: g.mean_r_im,
            avg_concepts: g.avg_concepts,
            pg_loss: g.pg_loss,
        })
    }

    /// Runs `cfg.steps` iterations, calling `on_step` after each.
    pub fn train<F>(&mut self, models: &mut Models, data: &TrainData, mut on_step: F) -> Result<TrainLog, TrainError>
    where
        F: FnMut(&TrainRecord, &Models) -> Result<(), TrainError>,
    {
        let mut log = TrainLog::default();
        for _ in 0..self.cfg.steps {
            let rec = self.iteration(models, data)?;
            on_step(&rec, models)?;
            log.push(rec);
        }
        Ok(log)
    }
}

fn adv_terms(
    models: &Models,
    tape: &mut Tape<'_>,
    real: &[Vec<u32>],
    fake: &[Vec<u32>],
) -> Result<(Var, f64, f64, Var), TrainError> {
    let r = models.discriminator.forward(tape, real)?;
    let f = models.discriminator.forward(tape, fake)?;
    let l = adv_loss_on_tape(tape, &r, &f)?;
    let qr = mean(r.q_values(tape).iter().flatten().copied());
    let qf = mean(f.q_values(tape).iter().flatten().copied());
    Ok((l, qr, qf, f.h_final))
}

/// Vocabulary ids of the dictionary concepts among `words`, deduplicated,
/// in dictionary order and capped at the con2sen limit.
pub fn concepts_in_dictionary_order<'a>(
    words: impl IntoIterator<Item = &'a str>,
    dict: &ConceptDictionary,
    vocab: &Vocabulary,
) -> Vec<u32> {
    let mut idx: Vec<usize> = words.into_iter().filter_map(|w| dict.index_of(w)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx.into_iter()
        .filter_map(|i| vocab.id(dict.word(i)))
        .take(crate::models::MAX_CON2SEN_CONCEPTS)
        .collect()
}

/// Concept-input/target pairs extracted from corpus sentences; sentences
/// without dictionary words are dropped.
pub fn con2sen_pairs(
    corpus: &[TokenSentence],
    dict: &ConceptDictionary,
    vocab: &Vocabulary,
) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus
        .iter()
        .filter_map(|s| {
            let words = s.ids().iter().filter_map(|&i| vocab.word(i));
            let c = concepts_in_dictionary_order(words, dict, vocab);
            (!c.is_empty()).then(|| (c, s.with_eos()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitReport {
    pub con2sen_pairs: usize,
    pub skipped_sentences: usize,
    pub pseudo_pairs: usize,
    /// Images without detections (or with an empty pseudo caption).
    pub skipped_images: Vec<String>,
    pub pseudo_captions: Vec<(String, Vec<u32>)>,
    pub con2sen_loss: (f64, f64),
    pub feat2sen_loss: (f64, f64),
    pub mean_q_real: f64,
    pub mean_q_fake: f64,
}

#[allow(clippy::too_many_arguments)]
fn supervised_epochs<R, F>(
    params: &mut ModelParams,
    ids: &[ParamId],
    n: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    clip: f64,
    rng: &mut R,
    mut loss_fn: F,
) -> Result<(f64, f64), TrainError>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape<'_>, &[usize]) -> Result<Var, TrainError>,
{
    let mut opt = AdamState::new(lr);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..steps {
        let mut idx = sample_indices(rng, n, batch.min(n)).into_vec();
        idx.sort_unstable();
        let (grads, value) = {
            let mut tape = Tape::new(params);
            let loss = loss_fn(&mut tape, &idx)?;
            (tape.backward(loss)?, tape.scalar_value(loss))
        };
        if step == 0 {
            first = value;
        }
        last = value;
        apply_gradients(params, &grads, ids, &mut opt, clip)?;
    }
    Ok((first, last))
}

/// Initialization: con2sen from the corpus, pseudo captions from detections,
/// feat2sen on the pseudo pairs and discriminator pretraining against a
/// throwaway unconditional generator.
pub fn init_pipeline<R: Rng + ?Sized>(
    models: &mut Models,
    data: &TrainData,
    dict: &ConceptDictionary,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<InitReport, TrainError> {
    cfg.validate()?;
    let ic = cfg.init;
    let mut report = InitReport::default();

    let pairs = con2sen_pairs(&data.corpus, dict, vocab);
    report.con2sen_pairs = pairs.len();
    report.skipped_sentences = data.corpus.len() - pairs.len();
    if pairs.is_empty() {
        return Err(TrainError::NoPairs("concept/sentence pairs"));
    }
    let c2s = models.con2sen;
    let c2s_ids = models.con2sen_ids();
    report.con2sen_loss = supervised_epochs(
        &mut models.params,
        &c2s_ids,
        pairs.len(),
        ic.con2sen_steps,
        ic.batch_size,
        cfg.lr_init,
        cfg.clip_norm,
        rng,
        |tape, idx| {
            let concepts: Vec<Vec<u32>> = idx.iter().map(|&i| pairs[i].0.clone()).collect();
            let targets: Vec<Vec<u32>> = idx.iter().map(|&i| pairs[i].1.clone()).collect();
            let lp = c2s.logprob_on_tape(tape, &concepts, &targets)?;
            Ok(sentence_recon_loss_on_tape(tape, &lp)?)
        },
    )?;

    let mut inputs = Vec::new();
    for (i, det) in data.detections.iter().enumerate() {
        let c = concepts_in_dictionary_order(det.words(), dict, vocab);
        if c.is_empty() {
            report.skipped_images.push(data.images[i].id.clone());
        } else {
            inputs.push((i, c));
        }
    }
    let mut pseudo: Vec<(usize, Vec<u32>)> = Vec::new();
    for chunk in inputs.chunks(64) {
        let concepts: Vec<Vec<u32>> = chunk.iter().map(|(_, c)| c.clone()).collect();
        let modes = vec![DecodeMode::Greedy; chunk.len()];
        let rolls = c2s.rollout(&models.params, &concepts, &modes, rng, cfg.length_cap)?;
        for ((i, _), r) in chunk.iter().zip(rolls) {
            if r.words().is_empty() {
                report.skipped_images.push(data.images[*i].id.clone());
            } else {
                pseudo.push((*i, r.ids));
            }
        }
    }
    report.pseudo_pairs = pseudo.len();
    report.pseudo_captions = pseudo
        .iter()
        .map(|(i, ids)| (data.images[*i].id.clone(), ids[..ids.len() - 1].to_vec()))
        .collect();
    if pseudo.is_empty() {
        return Err(TrainError::NoPairs("pseudo captions"));
    }

    let generator = models.generator;
    let gen_ids = models.generator_ids();
    let d = models.config.feature_dim;
    report.feat2sen_loss = supervised_epochs(
        &mut models.params,
        &gen_ids,
        pseudo.len(),
        ic.feat2sen_steps,
        ic.batch_size,
        cfg.lr_init,
        cfg.clip_norm,
        rng,
        |tape, idx| {
            let conds: Vec<&[f64]> = idx.iter().map(|&i| data.images[pseudo[i].0].vector.as_slice()).collect();
            let targets: Vec<Vec<u32>> = idx.iter().map(|&i| pseudo[i].1.clone()).collect();
            let cond = stack_rows(tape, &conds, d)?;
            let lp = generator.logprob_on_tape(tape, cond, &targets)?;
            Ok(sentence_recon_loss_on_tape(tape, &lp)?)
        },
    )?;

    let (qr, qf) = pretrain_discriminator(models, &data.corpus, cfg, rng)?;
    report.mean_q_real = qr;
    report.mean_q_fake = qf;
    Ok(report)
}

/// Adversarial sentence generation on the corpus alone: a throwaway
/// generator fed a zero vector is warmed up by maximum likelihood, then
/// alternates REINFORCE updates on `log q_t` with discriminator updates.
/// Returns the final mean real/fake scores.
pub fn pretrain_discriminator<R: Rng + ?Sized>(
    models: &mut Models,
    corpus: &[TokenSentence],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, f64), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyBatch("sentence"));
    }
    let ic = cfg.init;
    let mcfg: ModelConfig = models.config;
    let mut tmp = ModelParams::new();
    let thrower = Generator::register(&mut tmp, "tmp", &mcfg, rng)?;
    let tmp_ids = tmp.ids_with_prefix("tmp.");
    let zero = vec![0.0; mcfg.feature_dim];
    let batch = ic.batch_size.min(corpus.len());

    supervised_epochs(&mut tmp, &tmp_ids, corpus.len(), ic.warmup_steps, batch, cfg.lr_init, cfg.clip_norm, rng, |tape, idx| {
        let conds: Vec<&[f64]> = idx.iter().map(|_| zero.as_slice()).collect();
        let targets: Vec<Vec<u32>> = idx.iter().map(|&i| corpus[i].with_eos()).collect();
        let cond = stack_rows(tape, &conds, mcfg.feature_dim)?;
        let lp = thrower.logprob_on_tape(tape, cond, &targets)?;
        Ok(sentence_recon_loss_on_tape(tape, &lp)?)
    })?;

    let mut gen_opt = AdamState::new(cfg.lr_init);
    let mut dis_opt = AdamState::new(cfg.lr_init);
    let dis_ids = models.discriminator_ids();
    let adv_only = ObjectiveWeights {
        lambda_c: 0.0,
        lambda_im: 0.0,
        ..cfg.weights
    };
    let (mut qr, mut qf) = (0.5, 0.5);
    for _ in 0..ic.dis_pretrain_steps {
        // Throwaway generator update.
        let conds: Vec<&[f64]> = (0..2 * batch).map(|_| zero.as_slice()).collect();
        let modes: Vec<DecodeMode> = (0..2 * batch)
            .map(|i| if i < batch { DecodeMode::Sample } else { DecodeMode::Greedy })
            .collect();
        let rolls = thrower.rollout(&tmp, &conds, &modes, rng, cfg.length_cap)?;
        let seqs: Vec<Vec<u32>> = rolls.iter().map(|r| r.ids.clone()).collect();
        let qs = {
            let mut tape = Tape::new(&models.params);
            let out = models.discriminator.forward(&mut tape, &seqs)?;
            out.q_values(&tape)
        };
        let returns: Vec<Vec<f64>> = qs
            .iter()
            .map(|q| compute_returns(&RewardTrace::new(adversarial_reward(q), Vec::new(), 0.0), &adv_only, cfg.discount))
            .collect();
        let advantages: Vec<Vec<f64>> = (0..batch)
            .map(|i| {
                let base = self_critic_baseline(&returns[batch + i], seqs[i].len());
                returns[i].iter().zip(base).map(|(g, b)| g - b).collect()
            })
            .collect();
        let grads = {
            let mut tape = Tape::new(&tmp);
            let cond = stack_rows(&mut tape, &conds[..batch], mcfg.feature_dim)?;
            let lp = thrower.logprob_on_tape(&mut tape, cond, &seqs[..batch])?;
            let loss = policy_surrogate(&mut tape, &lp, &advantages)?;
            tape.backward(loss)?
        };
        apply_gradients(&mut tmp, &grads, &tmp_ids, &mut gen_opt, cfg.clip_norm)?;

        // Discriminator update on fresh samples.
        let fake: Vec<Vec<u32>> = thrower
            .rollout(&tmp, &conds[..batch], &modes[..batch], rng, cfg.length_cap)?
            .into_iter()
            .map(|r| r.ids)
            .collect();
        let mut idx = sample_indices(rng, corpus.len(), batch).into_vec();
        idx.sort_unstable();
        let real: Vec<Vec<u32>> = idx.iter().map(|&i| corpus[i].with_eos()).collect();
        let grads = {
            let mut tape = Tape::new(&models.params);
            let (loss, r, f, _) = adv_terms(models, &mut tape, &real, &fake)?;
            qr = r;
            qf = f;
            tape.backward(loss)?
        };
        apply_gradients(&mut models.params, &grads, &dis_ids, &mut dis_opt, cfg.clip_norm)?;
    }
    Ok((qr, qf))
}
