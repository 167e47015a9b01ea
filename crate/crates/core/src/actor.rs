//! The generator: a recurrent conditional distribution over the next token.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::corpus::{action_of, token_of, TokenSequence, BOS};
use crate::error::{Error, Result};
use crate::numerics::{softmax, ParamStore, Tape, Tensor, Var};
use crate::recurrent::{Architecture, SequenceModel};

/// Sampling controls for free-running generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    pub len: usize,
    pub temperature: f64,
    /// Take the most likely token instead of sampling.
    pub greedy: bool,
}

impl GenerationConfig {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            temperature: 1.0,
            greedy: false,
        }
    }
}

/// Network parameters plus the layout needed to evaluate them.
///
/// Cloning yields a structurally identical copy with its own identity, which
/// is how the delayed actor is created.
#[derive(Clone, Debug)]
pub struct Actor {
    pub params: ParamStore,
    model: SequenceModel,
}

/// Prepends BOS and drops the final token: the inputs whose outputs score `seq`.
pub(crate) fn shifted_inputs(batch: &[TokenSequence]) -> Vec<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            let mut v = Vec::with_capacity(s.len());
            v.push(BOS);
            v.extend_from_slice(&s[..s.len().saturating_sub(1)]);
            v
        })
        .collect()
}

pub(crate) fn validate_tokens(batch: &[TokenSequence], vocab_size: usize) -> Result<usize> {
    let len = batch.first().map(Vec::len).ok_or(Error::Empty("empty batch"))?;
    for s in batch {
        if s.len() != len {
            return Err(Error::SequenceLength {
                expected: len,
                got: s.len(),
            });
        }
        if let Some(&t) = s.iter().find(|&&t| t == BOS || t >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                size: vocab_size,
            });
        }
    }
    Ok(len)
}

impl Actor {
    /// `vocab_size` counts BOS; the policy ranges over the other `vocab_size - 1` tokens.
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, arch: &Architecture, rng: &mut R) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least one token besides BOS".into()));
        }
        let mut params = ParamStore::new();
        let model = SequenceModel::new(&mut params, "actor", arch, vocab_size, vocab_size - 1, rng)?;
        Ok(Self { params, model })
    }

    pub fn model(&self) -> &SequenceModel {
        &self.model
    }

    pub fn vocab_size(&self) -> usize {
        self.model.input_tokens()
    }

    pub fn num_actions(&self) -> usize {
        self.model.outputs()
    }

    /// Log-probabilities `(batch, actions)` at every position of `batch`
    /// under teacher forcing, evaluated with `params`.
    pub fn log_policy_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        batch: &[TokenSequence],
    ) -> Result<Vec<Var>> {
        validate_tokens(batch, self.vocab_size())?;
        let bound = self.model.bind(tape, params)?;
        let logits = bound.run(tape, &shifted_inputs(batch))?;
        logits.into_iter().map(|l| tape.log_softmax(l)).collect()
    }

    /// Probabilities at every position; `out[t]` conditions on `seq[..t]`.
    pub fn policies_along(&self, batch: &[TokenSequence]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, &self.params)?;
        validate_tokens(batch, self.vocab_size())?;
        let logits = bound.run(&mut tape, &shifted_inputs(batch))?;
        logits.into_iter().map(|l| softmax(tape.value(l))).collect()
    }

    /// q(· | prefix), with BOS implicitly in front of `prefix`.
    pub fn policy(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some(&t) = prefix.iter().find(|&&t| t == BOS || t >= self.vocab_size()) {
            return Err(Error::TokenOutOfRange {
                token: t,
                size: self.vocab_size(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, &self.params)?;
        let mut state = bound.start(&mut tape, 1)?;
        state = bound.feed(&mut tape, &[BOS], &state)?;
        for &t in prefix {
            state = bound.feed(&mut tape, &[t], &state)?;
        }
        let logits = bound.output(&mut tape, &state)?;
        Ok(softmax(tape.value(logits))?.into_data())
    }

    /// Draws `n` sequences of `cfg.len` tokens, each token from the policy given
    /// the tokens drawn so far.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, cfg: &GenerationConfig, rng: &mut R) -> Result<Vec<TokenSequence>> {
        if cfg.len == 0 || cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
            return Err(Error::Config("generation needs len >= 1 and temperature > 0".into()));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, &self.params)?;
        let mut state = bound.start(&mut tape, n)?;
        let mut current = vec![BOS; n];
        let mut out: Vec<TokenSequence> = vec![Vec::with_capacity(cfg.len); n];
        for _ in 0..cfg.len {
            state = bound.feed(&mut tape, &current, &state)?;
            let logits = bound.output(&mut tape, &state)?;
            let mut scaled = tape.value(logits).clone();
            scaled.scale_inplace(1.0 / cfg.temperature);
            let probs = softmax(&scaled)?;
            for (row, seq) in out.iter_mut().enumerate() {
                let p = probs.row(row);
                let a = if cfg.greedy {
                    argmax(p)
                } else {
                    WeightedIndex::new(p)
                        .map_err(|e| Error::InvalidTensor(e.to_string()))?
                        .sample(rng)
                };
                seq.push(token_of(a));
                current[row] = token_of(a);
            }
        }
        Ok(out)
    }

    /// Mean negative log-likelihood per token, in nats, under teacher forcing.
    pub fn teacher_forcing_nll(&self, batch: &[TokenSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.nll_on_tape(&mut tape, &self.params, batch)?;
        Ok(tape.value(loss).item())
    }

    /// NLL as a scalar node on `tape`.
    pub fn nll_on_tape(&self, tape: &mut Tape, params: &ParamStore, batch: &[TokenSequence]) -> Result<Var> {
        let logp = self.log_policy_on_tape(tape, params, batch)?;
        let len = logp.len();
        let mut total: Option<Var> = None;
        for (t, lp) in logp.into_iter().enumerate() {
            let targets: Vec<usize> = batch.iter().map(|s| action_of(s[t])).collect();
            let picked = tape.gather(lp, &targets)?;
            let s = tape.sum(picked)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let total = total.ok_or(Error::Empty("zero-length sequences"))?;
        tape.scale(total, -1.0 / (batch.len() * len) as f64)
    }

    /// Adds `weight * ∇NLL` into the parameter gradients; returns the NLL.
    pub fn nll_gradient(&mut self, batch: &[TokenSequence], weight: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let nll = self.nll_on_tape(&mut tape, &self.params, batch)?;
        let value = tape.value(nll).item();
        let root = tape.scale(nll, weight)?;
        tape.backward(root)?.accumulate_into(&mut self.params)?;
        Ok(value)
    }

    /// Surrogate `S = (1/B) Σ_b Σ_t Σ_a q(a | rollout_b[..t]) · values[t][b, a]`
    /// as a scalar node. `values` are constants.
    pub fn surrogate_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        rollouts: &[TokenSequence],
        values: &[Tensor],
    ) -> Result<Var> {
        let len = validate_tokens(rollouts, self.vocab_size())?;
        if values.len() != len {
            return Err(Error::SequenceLength {
                expected: len,
                got: values.len(),
            });
        }
        let bound = self.model.bind(tape, params)?;
        let logits = bound.run(tape, &shifted_inputs(rollouts))?;
        let mut total: Option<Var> = None;
        for (l, v) in logits.into_iter().zip(values) {
            let q = tape.softmax(l)?;
            let c = tape.constant(v.clone())?;
            let qv = tape.mul(q, c)?;
            let s = tape.sum(qv)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let total = total.ok_or(Error::Empty("zero-length rollouts"))?;
        tape.scale(total, 1.0 / rollouts.len() as f64)
    }

    /// Adds `-weight * ∇S` (ascent on the surrogate) into the gradients; returns `S`.
    pub fn surrogate_gradient(&mut self, rollouts: &[TokenSequence], values: &[Tensor], weight: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let s = self.surrogate_on_tape(&mut tape, &self.params, rollouts, values)?;
        let value = tape.value(s).item();
        let root = tape.scale(s, -weight)?;
        tape.backward(root)?.accumulate_into(&mut self.params)?;
        Ok(value)
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}
