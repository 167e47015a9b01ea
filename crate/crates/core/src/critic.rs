//! Action-value network trained by TD(0) towards targets built from the
//! delayed actor and the target critic.

use rand::Rng;

use crate::actor::{shifted_inputs, validate_tokens, Actor};
use crate::corpus::{action_of, TokenSequence, BOS};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Tape, Tensor, Var};
use crate::recurrent::{Architecture, SequenceModel};

/// Q̂(a; prefix) for every action at once. Output slot `a` scores token `a + 1`.
#[derive(Clone, Debug)]
pub struct Critic {
    pub params: ParamStore,
    model: SequenceModel,
}

/// Rollouts with their TD targets; `targets[b][t]` regresses the value of `rollouts[b][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TdBatch {
    pub rollouts: Vec<TokenSequence>,
    pub rewards: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticMetrics {
    pub td_loss: f64,
    pub mean_penalty: f64,
    pub mean_target: f64,
    pub mean_predicted_value: f64,
    pub grad_norm: f64,
}

/// `Σ_a (v_a - mean(v))²`; exactly zero iff all entries are equal.
pub fn variance_penalty(values: &[f64]) -> f64 {
    let mut centred = values.to_vec();
    crate::numerics::centre(&mut centred);
    centred.iter().map(|d| d * d).sum()
}

/// TD targets for one rollout of length `T` from per-position rows, where
/// row `t` of `policies` and `values` conditions on `rollout[..t]`.
/// `κ_t = Σ_a q(a | rollout[..t+1]) Q(a; rollout[..t+1])` for `t < T-1`, and
/// `κ_{T-1} = reward`. Row 0 is never read.
pub fn bellman_targets<P, V>(policies: &[P], values: &[V], reward: f64) -> Result<Vec<f64>>
where
    P: AsRef<[f64]>,
    V: AsRef<[f64]>,
{
    let len = policies.len();
    if len == 0 || values.len() != len {
        return Err(Error::SequenceLength {
            expected: len,
            got: values.len(),
        });
    }
    let mut out = Vec::with_capacity(len);
    for t in 1..len {
        let (q, v) = (policies[t].as_ref(), values[t].as_ref());
        if q.len() != v.len() {
            return Err(Error::Shape {
                op: "bellman_targets",
                lhs: vec![q.len()],
                rhs: vec![v.len()],
            });
        }
        out.push(q.iter().zip(v).map(|(p, x)| p * x).sum());
    }
    out.push(reward);
    Ok(out)
}

/// `target ← τ·source + (1-τ)·target`.
pub fn polyak_update(source: &ParamStore, target: &mut ParamStore, tau: f64) -> Result<()> {
    target.polyak_from(source, tau)
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, arch: &Architecture, rng: &mut R) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least one token besides BOS".into()));
        }
        let mut params = ParamStore::new();
        let model = SequenceModel::new(&mut params, "critic", arch, vocab_size, vocab_size - 1, rng)?;
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

    /// Values `(batch, actions)` at each position; output `t` conditions on `seq[..t]`.
    pub fn values_on_tape(&self, tape: &mut Tape, params: &ParamStore, batch: &[TokenSequence]) -> Result<Vec<Var>> {
        validate_tokens(batch, self.vocab_size())?;
        let bound = self.model.bind(tape, params)?;
        bound.run(tape, &shifted_inputs(batch))
    }

    pub fn values_along(&self, batch: &[TokenSequence]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vs = self.values_on_tape(&mut tape, &self.params, batch)?;
        Ok(vs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub fn action_values(&self, prefix: &[usize]) -> Result<Vec<f64>> {
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
        let out = bound.output(&mut tape, &state)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Targets from this (target) critic and `delayed` for rollouts with terminal `rewards`.
    pub fn td_targets(&self, delayed: &Actor, rollouts: &[TokenSequence], rewards: &[f64]) -> Result<TdBatch> {
        if rewards.len() != rollouts.len() {
            return Err(Error::Shape {
                op: "td_targets",
                lhs: vec![rollouts.len()],
                rhs: vec![rewards.len()],
            });
        }
        let policies = delayed.policies_along(rollouts)?;
        let values = self.values_along(rollouts)?;
        let targets = rewards
            .iter()
            .enumerate()
            .map(|(b, &r)| {
                let q: Vec<&[f64]> = policies.iter().map(|p| p.row(b)).collect();
                let v: Vec<&[f64]> = values.iter().map(|p| p.row(b)).collect();
                bellman_targets(&q, &v, r)
            })
            .collect::<Result<_>>()?;
        Ok(TdBatch {
            rollouts: rollouts.to_vec(),
            rewards: rewards.to_vec(),
            targets,
        })
    }

    /// `(1/B) Σ_b Σ_t (Q̂(ŷ_t) - κ_t)² + λ C_t` as a scalar node, plus its two
    /// parts `(squared error, penalty)` with the same normalization.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        batch: &TdBatch,
        lambda: f64,
    ) -> Result<(Var, f64, f64)> {
        let values = self.values_on_tape(tape, params, &batch.rollouts)?;
        let n = batch.rollouts.len();
        if batch.targets.len() != n || batch.targets.iter().any(|k| k.len() != values.len()) {
            return Err(Error::SequenceLength {
                expected: values.len(),
                got: batch.targets.first().map_or(0, Vec::len),
            });
        }
        let (mut sq, mut pen) = (0.0, 0.0);
        let mut total: Option<Var> = None;
        for (t, v) in values.into_iter().enumerate() {
            let actions: Vec<usize> = batch.rollouts.iter().map(|s| action_of(s[t])).collect();
            let predicted = tape.gather(v, &actions)?;
            let kappa = tape.constant(Tensor::vector(batch.targets.iter().map(|k| k[t]).collect()))?;
            let err = tape.sub(predicted, kappa)?;
            let err2 = tape.mul(err, err)?;
            let mut term = tape.sum(err2)?;
            sq += tape.value(term).item();
            if lambda != 0.0 {
                let centered = tape.center_rows(v)?;
                let c2 = tape.mul(centered, centered)?;
                let c = tape.sum(c2)?;
                pen += tape.value(c).item();
                let weighted = tape.scale(c, lambda)?;
                term = tape.add(term, weighted)?;
            } else {
                pen += tape
                    .value(v)
                    .data()
                    .chunks(self.num_actions())
                    .map(variance_penalty)
                    .sum::<f64>();
            }
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let total = total.ok_or(Error::Empty("zero-length rollouts"))?;
        let root = tape.scale(total, 1.0 / n as f64)?;
        Ok((root, sq / n as f64, pen / n as f64))
    }

    pub fn loss(&self, batch: &TdBatch, lambda: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _, _) = self.loss_on_tape(&mut tape, &self.params, batch, lambda)?;
        Ok(tape.value(l).item())
    }

    /// One clipped Adam step on the critic loss. Only `self.params` changes.
    pub fn update(
        &mut self,
        adam: &mut AdamState,
        batch: &TdBatch,
        lambda: f64,
        lr: f64,
        clip_norm: f64,
    ) -> Result<CriticMetrics> {
        self.params.zero_grad();
        let mut tape = Tape::new();
        let (root, sq, pen) = self.loss_on_tape(&mut tape, &self.params, batch, lambda)?;
        let steps = batch.targets.iter().map(Vec::len).sum::<usize>().max(1) as f64;
        let mean_target = batch.targets.iter().flatten().sum::<f64>() / steps;
        let mean_predicted_value = self.predicted(&batch.rollouts)?.iter().flatten().sum::<f64>() / steps;
        tape.backward(root)?.accumulate_into(&mut self.params)?;
        let grad_norm = self.params.clip_global_norm(clip_norm);
        adam.step(&mut self.params, lr)?;
        self.params.zero_grad();
        Ok(CriticMetrics {
            td_loss: sq,
            mean_penalty: pen / (steps / batch.rollouts.len() as f64),
            mean_target,
            mean_predicted_value,
            grad_norm,
        })
    }

    /// `Q̂(ŷ_t; ŷ[..t])` for every rollout and step.
    pub fn predicted(&self, rollouts: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        let values = self.values_along(rollouts)?;
        Ok(rollouts
            .iter()
            .enumerate()
            .map(|(b, s)| {
                s.iter()
                    .enumerate()
                    .map(|(t, &tok)| values[t].row(b)[action_of(tok)])
                    .collect()
            })
            .collect())
    }
}
