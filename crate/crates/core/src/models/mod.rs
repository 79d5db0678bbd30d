//! Generator, discriminator (with latent projection) and con2sen networks.
//!
//! All three live in one [`ModelParams`] under the prefixes `gen.`, `dis.`
//! and `c2s.`; the structs here only hold parameter handles.

mod decoder;

use alloc::format;

use alloc::vec::Vec;

use rand::RngCore;

use crate::autodiff::{
    lstm_cell, AutodiffError, Linear, LstmWeights, ModelParams, ParamId, Tape, Tensor, Var,
    INIT_SCALE,
};
use crate::textcorpus::{TextError, TokenSentence, EOS};

pub use decoder::{DecodeMode, DecoderCore, Rollout, StepLogProbs};

/// Most concept words con2sen accepts for one sentence.
pub const MAX_CON2SEN_CONCEPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("token id {0} is outside the vocabulary")]
    InvalidId(u32),
    #[error("expected a {expected}-dimensional vector, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("con2sen takes 1 to {MAX_CON2SEN_CONCEPTS} concepts, got {0}")]
    ConceptCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Discriminator reuses the generator's word embedding.
    pub share_embeddings: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            feature_dim,
            embed_dim: 512,
            hidden: 512,
            share_embeddings: false,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.embed_dim = width;
        self.hidden = width;
        self
    }
}

fn register_embedding<R: RngCore + ?Sized>(
    params: &mut ModelParams,
    name: &str,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ParamId, AutodiffError> {
    params.insert(
        name,
        Tensor::uniform(&[cfg.vocab_size, cfg.embed_dim], INIT_SCALE, rng),
    )
}

fn zeros_state(tape: &mut Tape<'_>, rows: usize, hidden: usize) -> Var {
    tape.constant(&Tensor::zeros(&[rows, hidden]))
}

/// Stacks equal-length rows into a constant `rows×dim` node.
pub fn stack_rows(tape: &mut Tape<'_>, rows: &[&[f64]], dim: usize) -> Result<Var, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::EmptyInput("batch"));
    }
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(ModelError::Dimension { expected: dim, got: r.len() });
        }
        data.extend_from_slice(r);
    }
    Ok(tape.constant_from(&[rows.len(), dim], data)?)
}

/// Keeps the old state in rows whose sequence has ended.
fn carry(tape: &mut Tape<'_>, new: Var, old: Var, active: &[f64]) -> Result<Var, ModelError> {
    if active.iter().all(|&a| a == 1.0) {
        return Ok(new);
    }
    let keep = tape.constant_from(&[active.len()], active.to_vec())?;
    let hold = tape.constant_from(&[active.len()], active.iter().map(|a| 1.0 - a).collect())?;
    let a = tape.scale_rows(new, keep)?;
    let b = tape.scale_rows(old, hold)?;
    Ok(tape.add(a, b)?)
}

/// Image-conditioned sentence generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Generator {
    pub input_proj: Linear,
    pub decoder: DecoderCore,
    pub feature_dim: usize,
}

impl Generator {
    pub fn register<R: RngCore + ?Sized>(
        params: &mut ModelParams,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let input_proj = Linear::register(params, &format!("{prefix}.input_proj"), cfg.feature_dim, cfg.embed_dim, rng)?;
        let embedding = register_embedding(params, &format!("{prefix}.embedding"), cfg, rng)?;
        let lstm = LstmWeights::register(params, &format!("{prefix}.lstm"), cfg.embed_dim, cfg.hidden, rng)?;
        let output = Linear::register(params, &format!("{prefix}.output"), cfg.hidden, cfg.vocab_size, rng)?;
        Ok(Generator {
            input_proj,
            decoder: DecoderCore {
                embedding,
                lstm,
                output,
                vocab_size: cfg.vocab_size,
            },
            feature_dim: cfg.feature_dim,
        })
    }

    /// `x₋₁ = FC(f)` fed from a zero state; returns `(x₋₁, h, c)`.
    pub fn prime(&self, tape: &mut Tape<'_>, cond: Var) -> Result<(Var, Var, Var), ModelError> {
        let rows = tape.shape(cond)[0];
        let x = self.input_proj.forward(tape, cond)?;
        let z = zeros_state(tape, rows, self.decoder.lstm.hidden);
        let (h, c) = lstm_cell(tape, x, z, z, &self.decoder.lstm)?;
        Ok((x, h, c))
    }

    pub fn condition(&self, tape: &mut Tape<'_>, conds: &[&[f64]]) -> Result<Var, ModelError> {
        stack_rows(tape, conds, self.feature_dim)
    }

    /// Rollouts for a batch of image features or latent vectors.
    pub fn rollout<R: RngCore + ?Sized>(
        &self,
        params: &ModelParams,
        conds: &[&[f64]],
        modes: &[DecodeMode],
        rng: &mut R,
        cap: usize,
    ) -> Result<Vec<Rollout>, ModelError> {
        let mut tape = Tape::new(params);
        let cond = self.condition(&mut tape, conds)?;
        let (_, h, c) = self.prime(&mut tape, cond)?;
        self.decoder.rollout(&mut tape, h, c, modes, rng, cap)
    }

    /// Teacher-forced scoring of `targets` (each ending with EOS).
    pub fn logprob_on_tape(
        &self,
        tape: &mut Tape<'_>,
        cond: Var,
        targets: &[Vec<u32>],
    ) -> Result<StepLogProbs, ModelError> {
        let (_, h, c) = self.prime(tape, cond)?;
        self.decoder.teacher_forced(tape, h, c, targets)
    }

    /// Teacher-forced argmax predictions for each target from each
    /// conditioning row.
    pub fn reconstruct(
        &self,
        params: &ModelParams,
        conds: &[&[f64]],
        targets: &[Vec<u32>],
    ) -> Result<Vec<Vec<u32>>, ModelError> {
        let mut tape = Tape::new(params);
        let cv = self.condition(&mut tape, conds)?;
        let (_, h, c) = self.prime(&mut tape, cv)?;
        self.decoder.teacher_forced_argmax(&mut tape, h, c, targets)
    }

    /// Per-step `log p(ŝ_t | ŝ_<t)` of `target` followed by EOS.
    pub fn logprob(
        &self,
        params: &ModelParams,
        cond: &[f64],
        target: &TokenSentence,
    ) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(params);
        let cv = self.condition(&mut tape, &[cond])?;
        let lp = self.logprob_on_tape(&mut tape, cv, &[target.with_eos()])?;
        Ok(lp.row_values(&tape).remove(0))
    }

    /// Beam search from one conditioning vector; returns ids ending in EOS
    /// and the length-normalized log-probability.
    pub fn beam_search(
        &self,
        params: &ModelParams,
        cond: &[f64],
        beam_size: usize,
        cap: usize,
    ) -> Result<(Vec<u32>, f64), ModelError> {
        let mut tape = Tape::new(params);
        let cv = self.condition(&mut tape, &[cond])?;
        let (_, h, c) = self.prime(&mut tape, cv)?;
        let (h, c) = (tape.value(h).to_vec(), tape.value(c).to_vec());
        self.decoder.beam_search(params, &h, &c, beam_size, cap)
    }
}

/// Output of one discriminator pass over a batch.
#[derive(Debug, Clone)]
pub struct DisOutput {
    /// `q[t]` holds, per row, the probability that the prefix of length
    /// `t + 1` is real.
    pub q: Vec<Var>,
    pub masks: Vec<Vec<f64>>,
    pub lens: Vec<usize>,
    /// Hidden state after each row's last token.
    pub h_final: Var,
}

impl DisOutput {
    pub fn q_values(&self, tape: &Tape<'_>) -> Vec<Vec<f64>> {
        self.lens
            .iter()
            .enumerate()
            .map(|(b, &len)| (0..len).map(|t| tape.value(self.q[t])[b]).collect())
            .collect()
    }
}

/// Sentence discriminator; its final hidden state also serves as the sentence
/// encoder for both reconstruction directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Discriminator {
    pub embedding: ParamId,
    pub lstm: LstmWeights,
    pub score: Linear,
    pub latent: Linear,
    pub vocab_size: usize,
}

impl Discriminator {
    pub fn register<R: RngCore + ?Sized>(
        params: &mut ModelParams,
        prefix: &str,
        cfg: &ModelConfig,
        shared_embedding: Option<ParamId>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let embedding = match shared_embedding {
            Some(id) => id,
            None => register_embedding(params, &format!("{prefix}.embedding"), cfg, rng)?,
        };
        let lstm = LstmWeights::register(params, &format!("{prefix}.lstm"), cfg.embed_dim, cfg.hidden, rng)?;
        let score = Linear::register(params, &format!("{prefix}.score"), cfg.hidden, 1, rng)?;
        let latent = Linear::register(params, &format!("{prefix}.latent"), cfg.hidden, cfg.feature_dim, rng)?;
        Ok(Discriminator {
            embedding,
            lstm,
            score,
            latent,
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, seqs: &[Vec<u32>]) -> Result<DisOutput, ModelError> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyInput("discriminator input"));
        }
        if let Some(&bad) = seqs.iter().flatten().find(|&&i| i as usize >= self.vocab_size) {
            return Err(ModelError::InvalidId(bad));
        }
        let b = seqs.len();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let mut h = zeros_state(tape, b, self.lstm.hidden);
        let mut c = h;
        let mut q = Vec::with_capacity(max_len);
        let mut masks = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let ids: Vec<usize> = seqs.iter().map(|s| *s.get(t).unwrap_or(&EOS) as usize).collect();
            let active: Vec<f64> = lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            let table = tape.param(self.embedding);
            let x = tape.gather_rows(table, &ids)?;
            let (h1, c1) = lstm_cell(tape, x, h, c, &self.lstm)?;
            let z = self.score.forward(tape, h1)?;
            let z = tape.sum_cols(z);
            q.push(tape.sigmoid(z));
            h = carry(tape, h1, h, &active)?;
            c = carry(tape, c1, c, &active)?;
            masks.push(active);
        }
        Ok(DisOutput { q, masks, lens, h_final: h })
    }

    /// `x' = FC(h_n)`.
    pub fn latent_on_tape(&self, tape: &mut Tape<'_>, h_final: Var) -> Result<Var, ModelError> {
        Ok(self.latent.forward(tape, h_final)?)
    }

    /// Per-prefix real probabilities and the final hidden state.
    pub fn score(&self, params: &ModelParams, ids: &[u32]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, &[ids.to_vec()])?;
        Ok((out.q_values(&tape).remove(0), tape.value(out.h_final).to_vec()))
    }

    pub fn encode_latent(&self, params: &ModelParams, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
        Ok(self.encode_latent_batch(params, &[ids.to_vec()])?.remove(0))
    }

    pub fn encode_latent_batch(&self, params: &ModelParams, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, seqs)?;
        let x = self.latent_on_tape(&mut tape, out.h_final)?;
        let d = self.latent.d_out;
        Ok(tape.value(x).chunks(d).map(<[f64]>::to_vec).collect())
    }
}

/// Concept-to-sentence encoder-decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Con2Sen {
    pub encoder: LstmWeights,
    pub decoder: DecoderCore,
}

impl Con2Sen {
    pub fn register<R: RngCore + ?Sized>(
        params: &mut ModelParams,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let embedding = register_embedding(params, &format!("{prefix}.embedding"), cfg, rng)?;
        let encoder = LstmWeights::register(params, &format!("{prefix}.encoder"), cfg.embed_dim, cfg.hidden, rng)?;
        let lstm = LstmWeights::register(params, &format!("{prefix}.decoder"), cfg.embed_dim, cfg.hidden, rng)?;
        let output = Linear::register(params, &format!("{prefix}.output"), cfg.hidden, cfg.vocab_size, rng)?;
        Ok(Con2Sen {
            encoder,
            decoder: DecoderCore {
                embedding,
                lstm,
                output,
                vocab_size: cfg.vocab_size,
            },
        })
    }

    /// Runs the encoder over each row's concept ids (already in dictionary
    /// order) and returns the final `(h, c)`.
    pub fn encode(&self, tape: &mut Tape<'_>, concepts: &[Vec<u32>]) -> Result<(Var, Var), ModelError> {
        if concepts.is_empty() {
            return Err(ModelError::EmptyInput("con2sen batch"));
        }
        if let Some(bad) = concepts.iter().find(|c| c.is_empty() || c.len() > MAX_CON2SEN_CONCEPTS) {
            return Err(ModelError::ConceptCount(bad.len()));
        }
        if let Some(&bad) = concepts.iter().flatten().find(|&&i| i as usize >= self.decoder.vocab_size) {
            return Err(ModelError::InvalidId(bad));
        }
        let b = concepts.len();
        let lens: Vec<usize> = concepts.iter().map(Vec::len).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let mut h = zeros_state(tape, b, self.encoder.hidden);
        let mut c = h;
        for t in 0..max_len {
            let ids: Vec<usize> = concepts.iter().map(|s| *s.get(t).unwrap_or(&s[0]) as usize).collect();
            let active: Vec<f64> = lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            let table = tape.param(self.decoder.embedding);
            let x = tape.gather_rows(table, &ids)?;
            let (h1, c1) = lstm_cell(tape, x, h, c, &self.encoder)?;
            h = carry(tape, h1, h, &active)?;
            c = carry(tape, c1, c, &active)?;
        }
        Ok((h, c))
    }

    pub fn logprob_on_tape(
        &self,
        tape: &mut Tape<'_>,
        concepts: &[Vec<u32>],
        targets: &[Vec<u32>],
    ) -> Result<StepLogProbs, ModelError> {
        let (h, c) = self.encode(tape, concepts)?;
        self.decoder.teacher_forced(tape, h, c, targets)
    }

    pub fn rollout<R: RngCore + ?Sized>(
        &self,
        params: &ModelParams,
        concepts: &[Vec<u32>],
        modes: &[DecodeMode],
        rng: &mut R,
        cap: usize,
    ) -> Result<Vec<Rollout>, ModelError> {
        let mut tape = Tape::new(params);
        let (h, c) = self.encode(&mut tape, concepts)?;
        self.decoder.rollout(&mut tape, h, c, modes, rng, cap)
    }

    /// Per-step log-probabilities of `target` followed by EOS.
    pub fn logprob(
        &self,
        params: &ModelParams,
        concepts: &[u32],
        target: &TokenSentence,
    ) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(params);
        let lp = self.logprob_on_tape(&mut tape, &[concepts.to_vec()], &[target.with_eos()])?;
        Ok(lp.row_values(&tape).remove(0))
    }
}

/// All three networks over a single parameter collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub con2sen: Con2Sen,
}

impl Models {
    pub fn new<R: RngCore + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut params = ModelParams::new();
        let generator = Generator::register(&mut params, "gen", &config, rng)?;
        let shared = config.share_embeddings.then_some(generator.decoder.embedding);
        let discriminator = Discriminator::register(&mut params, "dis", &config, shared, rng)?;
        let con2sen = Con2Sen::register(&mut params, "c2s", &config, rng)?;
        Ok(Models {
            config,
            params,
            generator,
            discriminator,
            con2sen,
        })
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("gen.")
    }

    /// Discriminator parameters, including the latent projection and, when
    /// shared, the generator's embedding.
    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        let mut ids = self.params.ids_with_prefix("dis.");
        if self.config.share_embeddings {
            ids.push(self.discriminator.embedding);
        }
        ids
    }

    pub fn con2sen_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("c2s.")
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for id in self.params.ids_with_prefix(prefix) {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Length-normalized log-probability used to rank beam hypotheses.
pub fn normalized_score(logprobs: &[f64]) -> f64 {
    if logprobs.is_empty() {
        return f64::NEG_INFINITY;
    }
    logprobs.iter().sum::<f64>() / logprobs.len() as f64
}

#[doc(hidden)]
pub fn uniform_logprob(vocab_size: usize) -> f64 {
    -libm::log(vocab_size as f64)
}
