//! Rewards and losses: adversarial, concept, image and sentence
//! reconstruction, and the combined discriminator loss.

use alloc::vec::Vec;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::models::{DisOutput, StepLogProbs};
use crate::textcorpus::Vocabulary;
use crate::worldsim::ConceptDetection;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("vector lengths differ: {0} vs {1}")]
    Dimension(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda_c: f64,
    pub lambda_im: f64,
    pub lambda_sen: f64,
    pub gamma: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            lambda_c: 10.0,
            lambda_im: 0.2,
            lambda_sen: 1.0,
            gamma: 0.9,
        }
    }
}

impl ObjectiveWeights {
    pub fn is_valid(&self) -> bool {
        self.lambda_c >= 0.0
            && self.lambda_im >= 0.0
            && self.lambda_sen >= 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
    }
}

/// Per-step rewards of one rollout plus the derived returns and baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardTrace {
    pub r_adv: Vec<f64>,
    pub r_c: Vec<f64>,
    /// Sentence-level image reconstruction reward.
    pub r_im: f64,
    pub returns: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl RewardTrace {
    pub fn new(r_adv: Vec<f64>, r_c: Vec<f64>, r_im: f64) -> Self {
        RewardTrace {
            r_adv,
            r_c,
            r_im,
            returns: Vec::new(),
            baseline: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.r_adv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_adv.is_empty()
    }

    /// `G_t - b_t`; zero where either is missing.
    pub fn advantages(&self) -> Vec<f64> {
        self.returns
            .iter()
            .enumerate()
            .map(|(t, g)| g - self.baseline.get(t).copied().unwrap_or(0.0))
            .collect()
    }
}

pub fn clamp_prob(q: f64) -> f64 {
    q.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `r^adv_t = log q_t`.
pub fn adversarial_reward(q: &[f64]) -> Vec<f64> {
    q.iter().map(|&v| libm::log(clamp_prob(v))).collect()
}

/// `-[(1/l) Σ log q̂_t + (1/n) Σ log(1 - q_t)]` for one real and one
/// generated sentence.
pub fn discriminator_adv_loss(real_q: &[f64], fake_q: &[f64]) -> Result<f64, ObjectiveError> {
    if real_q.is_empty() {
        return Err(ObjectiveError::Empty("real sentence scores"));
    }
    if fake_q.is_empty() {
        return Err(ObjectiveError::Empty("generated sentence scores"));
    }
    let real: f64 = real_q.iter().map(|&q| libm::log(clamp_prob(q))).sum::<f64>() / real_q.len() as f64;
    let fake: f64 = fake_q.iter().map(|&q| libm::log(1.0 - clamp_prob(q))).sum::<f64>() / fake_q.len() as f64;
    Ok(-(real + fake))
}

/// Confidence per vocabulary id for the detected concepts, 0 elsewhere.
pub fn concept_table(detection: &ConceptDetection, vocab: &Vocabulary) -> Vec<f64> {
    let mut table = alloc::vec![0.0; vocab.len()];
    for (word, conf) in detection.concepts() {
        if let Some(id) = vocab.id(word) {
            table[id as usize] = *conf;
        }
    }
    table
}

/// `r^c_t`: the detector confidence of the concept equal to word `t`, or 0.
pub fn concept_reward(ids: &[u32], detection: &ConceptDetection, vocab: &Vocabulary) -> Vec<f64> {
    let table = concept_table(detection, vocab);
    concept_reward_from_table(ids, &table)
}

pub fn concept_reward_from_table(ids: &[u32], table: &[f64]) -> Vec<f64> {
    ids.iter()
        .map(|&i| table.get(i as usize).copied().unwrap_or(0.0))
        .collect()
}

/// `‖a - b‖²`.
pub fn image_recon_loss(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
    if a.len() != b.len() {
        return Err(ObjectiveError::Dimension(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn image_recon_reward(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
    image_recon_loss(a, b).map(|l| -l)
}

/// `-Σ_t log p(ŝ_t | ŝ_<t)` from teacher-forced per-step log-probabilities.
pub fn sentence_recon_loss(logprobs: &[f64]) -> f64 {
    -logprobs.iter().sum::<f64>()
}

/// `L_D = L_adv + λ_im L_im`.
pub fn discriminator_total_loss(l_adv: f64, l_im: f64, weights: &ObjectiveWeights) -> f64 {
    l_adv + weights.lambda_im * l_im
}

/// Mean over rows of `(1/len_b) Σ_t log(q)` (or `log(1 - q)` when
/// `complement`) over each row's valid steps.
fn mean_row_log(tape: &mut Tape<'_>, out: &DisOutput, complement: bool) -> Result<Var, ObjectiveError> {
    let rows = out.lens.len() as f64;
    let mut total: Option<Var> = None;
    for (&q, mask) in out.q.iter().zip(&out.masks) {
        let w: Vec<f64> = mask
            .iter()
            .zip(&out.lens)
            .map(|(&m, &l)| if m > 0.0 { 1.0 / (l as f64 * rows) } else { 0.0 })
            .collect();
        let q = tape.clamp(q, PROB_EPS, 1.0 - PROB_EPS);
        let arg = if complement {
            let neg = tape.neg(q);
            let one = tape.scalar(1.0);
            tape.add(neg, one)?
        } else {
            q
        };
        let lg = tape.log(arg)?;
        let wv = tape.constant_from(&[w.len()], w)?;
        let prod = tape.mul(lg, wv)?;
        let s = tape.sum(prod);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or(ObjectiveError::Empty("discriminator output"))
}

/// Batched adversarial loss; each term is averaged over its own batch.
pub fn adv_loss_on_tape(tape: &mut Tape<'_>, real: &DisOutput, fake: &DisOutput) -> Result<Var, ObjectiveError> {
    let r = mean_row_log(tape, real, false)?;
    let f = mean_row_log(tape, fake, true)?;
    let s = tape.add(r, f)?;
    Ok(tape.neg(s))
}

/// Mean over rows of `‖a_b - b_b‖²`.
pub fn image_recon_loss_on_tape(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var, ObjectiveError> {
    let rows = tape.shape(a)[0] as f64;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows))
}

/// Mean over rows of the summed negative log-likelihood.
pub fn sentence_recon_loss_on_tape(tape: &mut Tape<'_>, lp: &StepLogProbs) -> Result<Var, ObjectiveError> {
    let rows = lp.lens.len() as f64;
    let s = lp.weighted_sum(tape, None).map_err(|e| match e {
        crate::models::ModelError::Autodiff(a) => ObjectiveError::Autodiff(a),
        _ => ObjectiveError::Empty("sentence log-probabilities"),
    })?;
    Ok(tape.scale(s, -1.0 / rows))
}
