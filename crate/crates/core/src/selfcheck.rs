//! Fast built-in verification: finite-difference checks of every
//! differentiable component and the oracle equivalences on tiny instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actor::{Actor, GenerationConfig};
use crate::corpus::{action_of, TokenSequence};
use crate::critic::{bellman_targets, Critic};
use crate::discriminator::{DiscObjective, Discriminator};
use crate::error::Result;
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::oracle::{
    all_sequences, exact_policy_gradient, max_abs_difference, prefix_expectation_gradient, EnumeratedModel,
};
use crate::recurrent::{Architecture, CellKind, RecurrentCell};
use crate::trainer::{policy_values, TerminalPg};

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small() -> Architecture {
    Architecture {
        cell: CellKind::Gru,
        embed_dim: 3,
        hidden_dim: 4,
    }
}

fn grad_check<F>(name: &'static str, seeds: u64, mut build: F) -> Result<Check>
where
    F: FnMut(u64) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        worst = worst.max(build(seed)?);
    }
    Ok(Check {
        name,
        passed: worst <= GRAD_TOL,
        detail: format!("max relative error {worst:.2e}"),
    })
}

/// Runs a check where the scalar node is produced by `node` on fresh tapes.
fn fd<N>(params: &mut ParamStore, node: N) -> Result<f64>
where
    N: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(check_gradients(
        params,
        |p| {
            let mut t = Tape::new();
            let l = node(&mut t, p)?;
            Ok(t.value(l).item())
        },
        |p| {
            let mut t = Tape::new();
            let l = node(&mut t, p)?;
            t.backward(l)?.accumulate_into(p)
        },
    )?
    .max_rel_error)
}

fn cell_check(kind: CellKind, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cell = RecurrentCell::new(&mut store, "cell", kind, 3, 4, &mut r)?;
    let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[2, 3], 1.0, &mut r)).collect();
    let w = Tensor::uniform(&[2, 4], 1.0, &mut r);
    fd(&mut store, |tape, p| {
        let bound = cell.bind(tape, p)?;
        let mut state = bound.zero_state(tape, 2)?;
        for x in &xs {
            let xv = tape.constant(x.clone())?;
            state = bound.step(tape, xv, &state)?;
        }
        let wv = tape.constant(w.clone())?;
        let m = tape.mul(state.h, wv)?;
        tape.sum(m)
    })
}

/// Every check, in order. Errors are numerical or shape failures inside a check.
pub fn run() -> Result<Vec<Check>> {
    let seqs: Vec<TokenSequence> = vec![vec![1, 2, 3, 1], vec![3, 3, 2, 1]];
    let fake: Vec<TokenSequence> = vec![vec![2, 1, 2, 3], vec![1, 1, 1, 1]];
    let mut out = vec![
        grad_check("gru cell gradient", 3, |s| cell_check(CellKind::Gru, s))?,
        grad_check("lstm cell gradient", 3, |s| cell_check(CellKind::Lstm, s))?,
        grad_check("teacher-forcing nll gradient", 3, |s| {
            let mut a = Actor::new(4, &small(), &mut rng(s))?;
            let layout = a.clone();
            fd(&mut a.params, |t, p| layout.nll_on_tape(t, p, &seqs))
        })?,
        grad_check("discriminator loss gradient", 3, |s| {
            let mut d = Discriminator::new(4, &small(), 4, &mut rng(s))?;
            let layout = d.clone();
            fd(&mut d.params, |t, p| {
                layout.loss_on_tape(t, p, &seqs, &fake, DiscObjective::Gan)
            })
        })?,
        grad_check("critic td loss gradient", 3, |s| {
            let mut c = Critic::new(4, &small(), &mut rng(s))?;
            let delayed = Actor::new(4, &small(), &mut rng(s + 100))?;
            let batch = c.td_targets(&delayed, &seqs, &[0.3, 0.8])?;
            let layout = c.clone();
            fd(&mut c.params, |t, p| Ok(layout.loss_on_tape(t, p, &batch, 1.0)?.0))
        })?,
        grad_check("policy surrogate gradient", 3, |s| {
            let mut a = Actor::new(4, &small(), &mut rng(s))?;
            let c = Critic::new(4, &small(), &mut rng(s + 200))?;
            let values = policy_values(&c, &seqs, &[0.4, 0.6], TerminalPg::RewardSubstitute)?;
            let layout = a.clone();
            fd(&mut a.params, |t, p| layout.surrogate_on_tape(t, p, &seqs, &values))
        })?,
    ];

    let mut r = rng(7);
    let table: Vec<f64> = (0..27).map(|_| r.gen()).collect();
    let reward = |s: &[usize]| Ok(table[s.iter().fold(0, |acc, &t| acc * 3 + action_of(t))]);
    let mut actor = Actor::new(4, &small(), &mut rng(8))?;
    let frozen = actor.clone();
    let model = EnumeratedModel::new(3, 3, |p: &[usize]| frozen.policy(p), reward)?;

    let total: f64 = model.enumerate_probs()?.values().sum();
    out.push(Check {
        name: "enumerated probabilities sum to one",
        passed: (total - 1.0).abs() <= 1e-9,
        detail: format!("|sum - 1| = {:.1e}", (total - 1.0).abs()),
    });

    let mut bellman: f64 = 0.0;
    for y in all_sequences(3, 3)? {
        let policies: Vec<Vec<f64>> = (0..3).map(|t| model.policy(&y[..t])).collect::<Result<_>>()?;
        let values: Vec<Vec<f64>> = (0..3)
            .map(|t| model.exact_action_values(&y[..t]))
            .collect::<Result<_>>()?;
        let r = model.reward(&y)?;
        let kappa = bellman_targets(&policies, &values, r)?;
        for t in 0..2 {
            bellman = bellman.max((kappa[t] - model.exact_action_value(&y[..t], action_of(y[t]))?).abs());
        }
        bellman = bellman.max((kappa[2] - r).abs());
    }
    out.push(Check {
        name: "td targets reproduce exact action values",
        passed: bellman <= 1e-12,
        detail: format!("max error {bellman:.1e}"),
    });

    let exact = exact_policy_gradient(&mut actor, 3, reward)?;
    out.push(Check {
        name: "policy gradient: autodiff vs finite differences",
        passed: exact.max_abs_difference() <= 1e-6,
        detail: format!("max difference {:.1e}", exact.max_abs_difference()),
    });
    let g = prefix_expectation_gradient(&mut actor, 3, |p| model.exact_action_values(p))?;
    let diff = max_abs_difference(&g, &exact.autodiff);
    out.push(Check {
        name: "prefix-expectation estimator equals exact gradient",
        passed: diff <= 1e-8,
        detail: format!("max difference {diff:.1e}"),
    });

    let samples = actor.sample(64, &GenerationConfig::new(5), &mut rng(9))?;
    let mut norm: f64 = 0.0;
    for p in actor.policies_along(&samples)? {
        for b in 0..p.rows() {
            norm = norm.max((p.row(b).iter().sum::<f64>() - 1.0).abs());
        }
    }
    out.push(Check {
        name: "policies are normalized",
        passed: norm <= 1e-12,
        detail: format!("max |sum - 1| = {norm:.1e}"),
    });
    Ok(out)
}
