//! Autoregressive LSTM decoder shared by the generator and con2sen:
//! sampling/greedy rollouts, teacher-forced scoring and beam search.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::ModelError;
use crate::autodiff::{lstm_cell, Linear, LstmWeights, ModelParams, ParamId, Tape, Var};
use crate::textcorpus::{EOS, SOS};

/// How a rollout picks each token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Draw from the full output distribution.
    Sample,
    /// Most probable token other than SOS.
    Greedy,
}

/// One generated sentence. `ids` ends with EOS; `logprobs[t]` is the log
/// probability the model assigned to `ids[t]`; `q` is filled in by the
/// discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub ids: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub q: Vec<f64>,
    pub greedy: bool,
}

impl Rollout {
    /// Length `n`, terminal EOS included.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Word ids without the terminal EOS.
    pub fn words(&self) -> &[u32] {
        match self.ids.last() {
            Some(&EOS) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }

    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Per-step teacher-forced log-probabilities for a batch.
///
/// `steps[t]` has one entry per row; rows shorter than `t + 1` carry padding
/// and are zero in `masks[t]`.
#[derive(Debug, Clone)]
pub struct StepLogProbs {
    pub steps: Vec<Var>,
    pub masks: Vec<Vec<f64>>,
    pub lens: Vec<usize>,
}

impl StepLogProbs {
    /// `Σ_t Σ_b w[b][t] · logp[b][t]` over valid positions; `None` weighs
    /// every valid position by 1.
    pub fn weighted_sum(&self, tape: &mut Tape<'_>, weights: Option<&[Vec<f64>]>) -> Result<Var, ModelError> {
        let mut total: Option<Var> = None;
        for (t, (&lp, mask)) in self.steps.iter().zip(&self.masks).enumerate() {
            let w: Vec<f64> = mask
                .iter()
                .enumerate()
                .map(|(b, &m)| match weights {
                    Some(ws) if m > 0.0 => ws[b][t],
                    _ => m,
                })
                .collect();
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            let wv = tape.constant_from(&[w.len()], w)?;
            let prod = tape.mul(lp, wv)?;
            let s = tape.sum(prod);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        Ok(match total {
            Some(v) => v,
            None => tape.scalar(0.0),
        })
    }

    /// Per-row log-probability values over valid positions.
    pub fn row_values(&self, tape: &Tape<'_>) -> Vec<Vec<f64>> {
        self.lens
            .iter()
            .enumerate()
            .map(|(b, &len)| (0..len).map(|t| tape.value(self.steps[t])[b]).collect())
            .collect()
    }
}

/// Embedding, LSTM and output projection of an autoregressive decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderCore {
    pub embedding: ParamId,
    pub lstm: LstmWeights,
    pub output: Linear,
    pub vocab_size: usize,
}

/// Log-softmax of one row, max-shifted.
pub(crate) fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| libm::exp(v - mx)).sum();
    let lz = mx + libm::log(z);
    logits.iter().map(|v| v - lz).collect()
}

/// Most probable non-SOS token; lowest id wins ties.
pub(crate) fn argmax_non_sos(logp: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in logp.iter().enumerate() {
        if i as u32 == SOS {
            continue;
        }
        if best == usize::MAX || v > logp[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: RngCore + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += libm::exp(lp);
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` a hair under 1.
    logp.iter()
        .enumerate()
        .rev()
        .find(|(_, &lp)| lp > f64::NEG_INFINITY)
        .map(|(i, _)| i)
        .unwrap_or(0)
}

impl DecoderCore {
    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            Some(&bad) => Err(ModelError::InvalidId(bad)),
            None => Ok(()),
        }
    }

    /// Feeds `input_ids` (one per row) and returns `(logits, h, c)`.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        input_ids: &[usize],
        h: Var,
        c: Var,
    ) -> Result<(Var, Var, Var), ModelError> {
        let table = tape.param(self.embedding);
        let x = tape.gather_rows(table, input_ids)?;
        let (h, c) = lstm_cell(tape, x, h, c, &self.lstm)?;
        let logits = self.output.forward(tape, h)?;
        Ok((logits, h, c))
    }

    /// Teacher-forced log-probabilities of `targets` (each ending with EOS)
    /// from initial state `(h0, c0)`. Step `t` is fed the previous target
    /// word, SOS at `t = 0`.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<'_>,
        h0: Var,
        c0: Var,
        targets: &[Vec<u32>],
    ) -> Result<StepLogProbs, ModelError> {
        if targets.is_empty() || targets.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyInput("teacher-forced target"));
        }
        for t in targets {
            self.check_ids(t)?;
        }
        let lens: Vec<usize> = targets.iter().map(Vec::len).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let (mut h, mut c) = (h0, c0);
        let mut steps = Vec::with_capacity(max_len);
        let mut masks = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let inputs: Vec<usize> = targets
                .iter()
                .map(|s| if t == 0 { SOS as usize } else { *s.get(t - 1).unwrap_or(&EOS) as usize })
                .collect();
            let (logits, h1, c1) = self.step(tape, &inputs, h, c)?;
            h = h1;
            c = c1;
            let lp = tape.log_softmax(logits)?;
            let picks: Vec<usize> = targets
                .iter()
                .map(|s| *s.get(t).unwrap_or(&EOS) as usize)
                .collect();
            steps.push(tape.pick(lp, &picks)?);
            masks.push(lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect());
        }
        Ok(StepLogProbs { steps, masks, lens })
    }

    /// Most probable next token at every teacher-forced step of each target.
    pub fn teacher_forced_argmax(
        &self,
        tape: &mut Tape<'_>,
        h0: Var,
        c0: Var,
        targets: &[Vec<u32>],
    ) -> Result<Vec<Vec<u32>>, ModelError> {
        if targets.is_empty() || targets.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyInput("teacher-forced target"));
        }
        for t in targets {
            self.check_ids(t)?;
        }
        let max_len = targets.iter().map(Vec::len).max().unwrap_or(0);
        let v = self.vocab_size;
        let (mut h, mut c) = (h0, c0);
        let mut out: Vec<Vec<u32>> = targets.iter().map(|t| Vec::with_capacity(t.len())).collect();
        for t in 0..max_len {
            let inputs: Vec<usize> = targets
                .iter()
                .map(|s| if t == 0 { SOS as usize } else { *s.get(t - 1).unwrap_or(&EOS) as usize })
                .collect();
            let (logits, h1, c1) = self.step(tape, &inputs, h, c)?;
            h = h1;
            c = c1;
            let values = tape.value(logits);
            for (row, target) in targets.iter().enumerate() {
                if t < target.len() {
                    out[row].push(argmax_non_sos(&values[row * v..(row + 1) * v]) as u32);
                }
            }
        }
        Ok(out)
    }

    /// Batched rollouts from initial state `(h0, c0)`; `modes[b]` selects how
    /// row `b` is decoded. At step `cap` EOS is forced.
    pub fn rollout<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        h0: Var,
        c0: Var,
        modes: &[DecodeMode],
        rng: &mut R,
        cap: usize,
    ) -> Result<Vec<Rollout>, ModelError> {
        if cap == 0 {
            return Err(ModelError::EmptyInput("length cap"));
        }
        let b = modes.len();
        let mut outs: Vec<Rollout> = modes
            .iter()
            .map(|m| Rollout {
                ids: Vec::new(),
                logprobs: Vec::new(),
                q: Vec::new(),
                greedy: *m == DecodeMode::Greedy,
            })
            .collect();
        let mut done = vec![false; b];
        let mut inputs = vec![SOS as usize; b];
        let (mut h, mut c) = (h0, c0);
        for t in 1..=cap {
            let (logits, h1, c1) = self.step(tape, &inputs, h, c)?;
            h = h1;
            c = c1;
            let v = self.vocab_size;
            let values = tape.value(logits).to_vec();
            for row in 0..b {
                if done[row] {
                    inputs[row] = EOS as usize;
                    continue;
                }
                let logp = log_softmax_row(&values[row * v..(row + 1) * v]);
                let tok = if t == cap {
                    EOS as usize
                } else {
                    match modes[row] {
                        DecodeMode::Greedy => argmax_non_sos(&logp),
                        DecodeMode::Sample => sample_index(&logp, rng),
                    }
                };
                outs[row].ids.push(tok as u32);
                outs[row].logprobs.push(logp[tok]);
                inputs[row] = tok;
                if tok as u32 == EOS {
                    done[row] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outs)
    }

    /// Length-normalized beam search for a single input. `h0`/`c0` must be
    /// `1×hidden`. Ranking uses summed log-probability; finished hypotheses
    /// are compared by their mean per-token log-probability.
    pub fn beam_search(
        &self,
        params: &ModelParams,
        h0: &[f64],
        c0: &[f64],
        beam_size: usize,
        cap: usize,
    ) -> Result<(Vec<u32>, f64), ModelError> {
        if beam_size == 0 {
            return Err(ModelError::EmptyInput("beam size"));
        }
        if cap == 0 {
            return Err(ModelError::EmptyInput("length cap"));
        }
        let hd = self.lstm.hidden;
        struct Hyp {
            tokens: Vec<u32>,
            sum: f64,
        }
        let mut live = vec![Hyp { tokens: Vec::new(), sum: 0.0 }];
        let mut state_h = h0.to_vec();
        let mut state_c = c0.to_vec();
        let mut best: Option<(Vec<u32>, f64)> = None;
        for t in 1..=cap {
            let k = live.len();
            let mut tape = Tape::new(params);
            let h = tape.constant_from(&[k, hd], state_h.clone())?;
            let c = tape.constant_from(&[k, hd], state_c.clone())?;
            let inputs: Vec<usize> = live
                .iter()
                .map(|hyp| hyp.tokens.last().map_or(SOS as usize, |&x| x as usize))
                .collect();
            let (logits, h1, c1) = self.step(&mut tape, &inputs, h, c)?;
            let v = self.vocab_size;
            let values = tape.value(logits);
            // (summed score, parent, token)
            let mut cands: Vec<(f64, usize, u32)> = Vec::new();
            for (p, hyp) in live.iter().enumerate() {
                let logp = log_softmax_row(&values[p * v..(p + 1) * v]);
                for (tok, &lp) in logp.iter().enumerate() {
                    let tok = tok as u32;
                    if tok == SOS || (t == cap && tok != EOS) {
                        continue;
                    }
                    cands.push((hyp.sum + lp, p, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(beam_size);
            let (hv, cv) = (tape.value(h1), tape.value(c1));
            let mut next = Vec::new();
            let mut next_h = Vec::new();
            let mut next_c = Vec::new();
            for (sum, p, tok) in cands {
                let mut tokens = live[p].tokens.clone();
                tokens.push(tok);
                if tok == EOS {
                    let score = sum / tokens.len() as f64;
                    if best.as_ref().is_none_or(|(_, s)| score > *s) {
                        best = Some((tokens, score));
                    }
                } else {
                    next_h.extend_from_slice(&hv[p * hd..(p + 1) * hd]);
                    next_c.extend_from_slice(&cv[p * hd..(p + 1) * hd]);
                    next.push(Hyp { tokens, sum });
                }
            }
            if next.is_empty() {
                break;
            }
            live = next;
            state_h = next_h;
            state_c = next_c;
        }
        Ok(best.expect("EOS is forced at the cap"))
    }
}
