//! Exact ground truth for tiny instances by enumerating every sequence.
//!
//! Sequences use the actor's token convention: tokens `1..=A`, and policy
//! slot `a` is the probability of token `a + 1`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::actor::Actor;
use crate::corpus::{action_of, token_of, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::gradcheck::numeric_gradient;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Largest number of complete sequences an oracle will enumerate.
pub const MAX_SEQUENCES: u128 = 1_000_000;

/// All token sequences of length `len` over `num_actions` actions, in lexicographic order.
pub fn all_sequences(num_actions: usize, len: usize) -> Result<Vec<TokenSequence>> {
    let count = checked_count(num_actions, len)?;
    let mut out = Vec::with_capacity(count);
    for mut i in 0..count {
        let mut s = vec![0; len];
        for slot in s.iter_mut().rev() {
            *slot = token_of(i % num_actions);
            i /= num_actions;
        }
        out.push(s);
    }
    Ok(out)
}

fn checked_count(num_actions: usize, len: usize) -> Result<usize> {
    let count = (num_actions as u128)
        .checked_pow(len as u32)
        .filter(|&c| c <= MAX_SEQUENCES)
        .ok_or(Error::TooLarge {
            count: (num_actions as f64).powi(len as i32).min(u128::MAX as f64) as u128,
            limit: MAX_SEQUENCES,
        })?;
    Ok(count as usize)
}

/// A policy and a terminal reward over sequences of fixed length.
pub struct EnumeratedModel<P, R> {
    num_actions: usize,
    horizon: usize,
    policy: P,
    reward: R,
}

impl<P, R> EnumeratedModel<P, R>
where
    P: Fn(&[usize]) -> Result<Vec<f64>>,
    R: Fn(&[usize]) -> Result<f64>,
{
    pub fn new(num_actions: usize, horizon: usize, policy: P, reward: R) -> Result<Self> {
        if num_actions == 0 || horizon == 0 {
            return Err(Error::Config("oracle needs at least one action and one step".into()));
        }
        checked_count(num_actions, horizon)?;
        Ok(Self {
            num_actions,
            horizon,
            policy,
            reward,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn policy(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let p = (self.policy)(prefix)?;
        if p.len() != self.num_actions {
            return Err(Error::Shape {
                op: "oracle_policy",
                lhs: vec![self.num_actions],
                rhs: vec![p.len()],
            });
        }
        Ok(p)
    }

    pub fn reward(&self, seq: &[usize]) -> Result<f64> {
        (self.reward)(seq)
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.len() > self.horizon {
            return Err(Error::SequenceLength {
                expected: self.horizon,
                got: prefix.len(),
            });
        }
        if let Some(&t) = prefix.iter().find(|&&t| t == 0 || t > self.num_actions) {
            return Err(Error::TokenOutOfRange {
                token: t,
                size: self.num_actions + 1,
            });
        }
        Ok(())
    }

    /// p(Y) for every complete sequence by the chain rule.
    pub fn enumerate_probs(&self) -> Result<BTreeMap<TokenSequence, f64>> {
        let mut out = BTreeMap::new();
        let mut frontier = vec![(Vec::new(), 1.0)];
        for _ in 0..self.horizon {
            let mut next = Vec::with_capacity(frontier.len() * self.num_actions);
            for (prefix, p) in frontier {
                for (a, q) in self.policy(&prefix)?.into_iter().enumerate() {
                    let mut s: Vec<usize> = prefix.clone();
                    s.push(token_of(a));
                    next.push((s, p * q));
                }
            }
            frontier = next;
        }
        out.extend(frontier);
        Ok(out)
    }

    /// Probability of generating `prefix` as the first tokens.
    pub fn prefix_probability(&self, prefix: &[usize]) -> Result<f64> {
        self.check_prefix(prefix)?;
        let mut p = 1.0;
        for t in 0..prefix.len() {
            p *= self.policy(&prefix[..t])?[action_of(prefix[t])];
        }
        Ok(p)
    }

    /// `V(prefix) = E[reward(Y) | Y starts with prefix]`; a complete sequence is worth its reward.
    pub fn exact_value(&self, prefix: &[usize]) -> Result<f64> {
        self.check_prefix(prefix)?;
        if prefix.len() == self.horizon {
            return self.reward(prefix);
        }
        let mut v = 0.0;
        let mut s = prefix.to_vec();
        for (a, q) in self.policy(prefix)?.into_iter().enumerate() {
            s.push(token_of(a));
            v += q * self.exact_value(&s)?;
            s.pop();
        }
        Ok(v)
    }

    /// `Q(a; prefix) = V(prefix ⊕ a)`.
    pub fn exact_action_value(&self, prefix: &[usize], action: usize) -> Result<f64> {
        if prefix.len() >= self.horizon || action >= self.num_actions {
            return Err(Error::SequenceLength {
                expected: self.horizon - 1,
                got: prefix.len(),
            });
        }
        let mut s = prefix.to_vec();
        s.push(token_of(action));
        self.exact_value(&s)
    }

    /// `Q(·; prefix)` for all actions.
    pub fn exact_action_values(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        (0..self.num_actions)
            .map(|a| self.exact_action_value(prefix, a))
            .collect()
    }

    /// `E[reward]` under the policy.
    pub fn expected_reward(&self) -> Result<f64> {
        self.exact_value(&[])
    }
}

/// A policy whose log-probabilities are differentiable functions of a parameter store.
pub trait DifferentiablePolicy {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn num_actions(&self) -> usize;
    /// `log q(· | seq[..t])` as `(batch, actions)` for each position `t`.
    fn log_policy_on_tape(&self, tape: &mut Tape, params: &ParamStore, batch: &[TokenSequence]) -> Result<Vec<Var>>;
}

impl DifferentiablePolicy for Actor {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn num_actions(&self) -> usize {
        Actor::num_actions(self)
    }

    fn log_policy_on_tape(&self, tape: &mut Tape, params: &ParamStore, batch: &[TokenSequence]) -> Result<Vec<Var>> {
        Actor::log_policy_on_tape(self, tape, params, batch)
    }
}

/// One free logit row per prefix: the most general policy of a fixed horizon.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    params: ParamStore,
    num_actions: usize,
    horizon: usize,
}

impl TabularPolicy {
    pub fn new<R: Rng + ?Sized>(num_actions: usize, horizon: usize, scale: f64, rng: &mut R) -> Result<Self> {
        checked_count(num_actions, horizon)?;
        let mut params = ParamStore::new();
        for t in 0..horizon {
            let rows = num_actions.pow(t as u32);
            params.insert(format!("table.{t}"), Tensor::uniform(&[rows, num_actions], scale, rng))?;
        }
        Ok(Self {
            params,
            num_actions,
            horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn row_index(&self, prefix: &[usize]) -> usize {
        prefix.iter().fold(0, |acc, &t| acc * self.num_actions + action_of(t))
    }

    /// Probabilities after `prefix`.
    pub fn policy(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.horizon {
            return Err(Error::SequenceLength {
                expected: self.horizon - 1,
                got: prefix.len(),
            });
        }
        let id = self
            .params
            .ids()
            .nth(prefix.len())
            .ok_or(Error::Empty("policy table"))?;
        let row = self.params.value(id).row(self.row_index(prefix)).to_vec();
        Ok(crate::numerics::softmax(&Tensor::vector(row))?.into_data())
    }
}

impl DifferentiablePolicy for TabularPolicy {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn log_policy_on_tape(&self, tape: &mut Tape, params: &ParamStore, batch: &[TokenSequence]) -> Result<Vec<Var>> {
        let len = batch.first().map(Vec::len).ok_or(Error::Empty("empty batch"))?;
        if len > self.horizon {
            return Err(Error::SequenceLength {
                expected: self.horizon,
                got: len,
            });
        }
        let ids: Vec<_> = params.ids().collect();
        (0..len)
            .map(|t| {
                let table = tape.param(params, ids[t])?;
                let rows: Vec<usize> = batch.iter().map(|s| self.row_index(&s[..t])).collect();
                let logits = tape.embed(table, &rows)?;
                tape.log_softmax(logits)
            })
            .collect()
    }
}

/// `Σ_Y p_θ(Y)·reward(Y)` as a scalar node over all sequences of length `horizon`.
fn expected_reward_on_tape<P: DifferentiablePolicy>(
    policy: &P,
    tape: &mut Tape,
    params: &ParamStore,
    seqs: &[TokenSequence],
    rewards: &Tensor,
) -> Result<Var> {
    let logp = policy.log_policy_on_tape(tape, params, seqs)?;
    let mut total: Option<Var> = None;
    for (t, lp) in logp.into_iter().enumerate() {
        let picked = tape.gather(lp, &seqs.iter().map(|s| action_of(s[t])).collect::<Vec<_>>())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, picked)?,
            None => picked,
        });
    }
    let log_joint = total.ok_or(Error::Empty("zero horizon"))?;
    let joint = tape.exp(log_joint)?;
    let r = tape.constant(rewards.clone())?;
    let weighted = tape.mul(joint, r)?;
    tape.sum(weighted)
}

fn rewards_for<F: Fn(&[usize]) -> Result<f64>>(seqs: &[TokenSequence], reward: F) -> Result<Tensor> {
    Ok(Tensor::vector(seqs.iter().map(|s| reward(s)).collect::<Result<_>>()?))
}

/// ∇_θ E[reward] from two independent computations.
#[derive(Clone, Debug)]
pub struct PolicyGradient {
    /// Reverse-mode derivative of the enumerated sum.
    pub autodiff: Vec<f64>,
    /// Central finite differences of the enumerated sum.
    pub numeric: Vec<f64>,
}

impl PolicyGradient {
    pub fn max_abs_difference(&self) -> f64 {
        max_abs_difference(&self.autodiff, &self.numeric)
    }
}

pub fn max_abs_difference(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `E[reward]` summed over every sequence, evaluated at `policy`'s parameters.
pub fn enumerated_expected_reward<P, F>(policy: &P, horizon: usize, reward: F) -> Result<f64>
where
    P: DifferentiablePolicy,
    F: Fn(&[usize]) -> Result<f64>,
{
    let seqs = all_sequences(policy.num_actions(), horizon)?;
    let r = rewards_for(&seqs, reward)?;
    let mut tape = Tape::new();
    let e = expected_reward_on_tape(policy, &mut tape, policy.params(), &seqs, &r)?;
    Ok(tape.value(e).item())
}

/// Exact gradient of `E[reward]`, flattened in parameter-store order.
pub fn exact_policy_gradient<P, F>(policy: &mut P, horizon: usize, reward: F) -> Result<PolicyGradient>
where
    P: DifferentiablePolicy + Clone,
    F: Fn(&[usize]) -> Result<f64>,
{
    let seqs = all_sequences(policy.num_actions(), horizon)?;
    let r = rewards_for(&seqs, reward)?;
    let layout = policy.clone();
    let mut tape = Tape::new();
    let e = expected_reward_on_tape(&layout, &mut tape, policy.params(), &seqs, &r)?;
    let grads = tape.backward(e)?;
    let params = policy.params_mut();
    params.zero_grad();
    grads.accumulate_into(params)?;
    let autodiff = params.flat_grads();
    params.zero_grad();
    let numeric = numeric_gradient(params, |p| {
        let mut tape = Tape::new();
        let e = expected_reward_on_tape(&layout, &mut tape, p, &seqs, &r)?;
        Ok(tape.value(e).item())
    })?;
    Ok(PolicyGradient { autodiff, numeric })
}

/// `Σ_t Σ_{|prefix|=t} p(prefix) Σ_a ∇q(a | prefix) Q(a; prefix)` with `Q`
/// supplied by `action_values`. Prefix weights are exact and held constant.
///
/// With exact action values this equals the gradient of `E[reward]`.
pub fn prefix_expectation_gradient<P, Q>(policy: &mut P, horizon: usize, mut action_values: Q) -> Result<Vec<f64>>
where
    P: DifferentiablePolicy + Clone,
    Q: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let a_n = policy.num_actions();
    let layout = policy.clone();
    let mut tape = Tape::new();
    let mut total: Option<Var> = None;
    let mut prefix_probs: Vec<(TokenSequence, f64)> = vec![(Vec::new(), 1.0)];
    for t in 0..horizon {
        // Every prefix of length t, padded to length t + 1 so position t is scored.
        let padded: Vec<TokenSequence> = prefix_probs
            .iter()
            .map(|(p, _)| {
                let mut s = p.clone();
                s.push(token_of(0));
                s
            })
            .collect();
        let logp = layout.log_policy_on_tape(&mut tape, policy.params(), &padded)?;
        let lp = logp[t];
        let q = tape.exp(lp)?;
        let mut weights = Vec::with_capacity(padded.len() * a_n);
        for (prefix, p) in &prefix_probs {
            let values = action_values(prefix)?;
            if values.len() != a_n {
                return Err(Error::Shape {
                    op: "prefix_expectation_gradient",
                    lhs: vec![a_n],
                    rhs: vec![values.len()],
                });
            }
            weights.extend(values.iter().map(|v| p * v));
        }
        let w = tape.constant(Tensor::new(vec![padded.len(), a_n], weights)?)?;
        let qw = tape.mul(q, w)?;
        let s = tape.sum(qw)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        if t + 1 < horizon {
            let probs = tape.value(q).clone();
            prefix_probs = prefix_probs
                .iter()
                .enumerate()
                .flat_map(|(i, (prefix, p))| {
                    let row = probs.row(i).to_vec();
                    row.into_iter().enumerate().map(move |(a, qa)| {
                        let mut s = prefix.clone();
                        s.push(token_of(a));
                        (s, p * qa)
                    })
                })
                .collect();
        }
    }
    let root = total.ok_or(Error::Empty("zero horizon"))?;
    let grads = tape.backward(root)?;
    let params = policy.params_mut();
    params.zero_grad();
    grads.accumulate_into(params)?;
    let g = params.flat_grads();
    params.zero_grad();
    Ok(g)
}
