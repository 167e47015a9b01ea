//! Teacher-forcing pretraining, critic pretraining and the actor-critic
//! fine-tuning loop against the discriminator.

pub mod config;
pub mod metrics;
pub mod state;
pub mod streams;

use crate::actor::{Actor, GenerationConfig};
use crate::corpus::{action_of, CorpusSplits, TokenSequence};
use crate::critic::{polyak_update, Critic, CriticMetrics};
use crate::discriminator::DiscMetrics;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use config::{DataConfig, TerminalPg, TrainConfig};
pub use metrics::{CsvSink, MetricsRow, MetricsSink, NullSink};
pub use state::{Counters, TrainState};

use streams::{
    batch_indices, stream, ACTOR_DATA, CRITIC_ROLLOUT, DISC_DATA, DISC_FAKE, LIVE_ROLLOUT, LL_DATA, ROLLOUT,
};

const EVAL_BATCH: usize = 256;

/// Mean per-token negative log-likelihood of a split, in nats and bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub nll: f64,
    pub bpc: f64,
    pub tokens: usize,
}

/// Teacher-forcing NLL over every sequence in `seqs`. Reads parameters only.
pub fn evaluate(actor: &Actor, seqs: &[TokenSequence]) -> Result<Evaluation> {
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in seqs.chunks(EVAL_BATCH) {
        let n = chunk.len() * chunk[0].len();
        total += actor.teacher_forcing_nll(chunk)? * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Empty("nothing to evaluate"));
    }
    let nll = total / tokens as f64;
    Ok(Evaluation {
        nll,
        bpc: nll / std::f64::consts::LN_2,
        tokens,
    })
}

fn gather(seqs: &[TokenSequence], idx: &[usize]) -> Vec<TokenSequence> {
    idx.iter().map(|&i| seqs[i].clone()).collect()
}

fn train_batch(corpus: &CorpusSplits, cfg: &TrainConfig, name: &str, step: u64) -> Result<Vec<TokenSequence>> {
    if corpus.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    Ok(gather(
        &corpus.train,
        &batch_indices(cfg.seed, name, corpus.train.len(), cfg.batch_size, step),
    ))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Validation NLL curve of actor pretraining.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub curve: Vec<(u64, f64)>,
    pub best_valid_nll: Option<f64>,
}

/// Teacher forcing on the training split until the step budget is spent or
/// validation NLL fails to improve `early_stop_patience` times in a row.
/// Leaves θ at the best validated parameters and θ′ equal to θ.
pub fn pretrain_actor<S: MetricsSink>(
    state: &mut TrainState,
    corpus: &CorpusSplits,
    cfg: &TrainConfig,
    sink: &mut S,
) -> Result<PretrainReport> {
    if corpus.valid.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut report = PretrainReport::default();
    let patience = cfg.early_stop_patience as u64;
    while state.counters.actor_steps < cfg.pretrain_actor_steps as u64 && state.counters.bad_evals < patience {
        let batch = train_batch(corpus, cfg, ACTOR_DATA, state.counters.actor_steps)?;
        let actor = &mut state.actor;
        actor.params.zero_grad();
        let nll = actor.nll_gradient(&batch, 1.0)?;
        let grad_norm = actor.params.clip_global_norm(cfg.clip_norm);
        state.adam_actor.step(&mut actor.params, cfg.lr_pretrain)?;
        actor.params.zero_grad();
        state.counters.actor_steps += 1;

        let step = state.counters.actor_steps;
        let mut row = MetricsRow::new(step, "pretrain-actor");
        row.train_nll = Some(nll);
        row.grad_norm_actor = Some(grad_norm);
        if step.is_multiple_of(cfg.eval_every as u64) || step == cfg.pretrain_actor_steps as u64 {
            let ev = evaluate(&state.actor, &corpus.valid)?;
            row.valid_nll = Some(ev.nll);
            row.bpc = Some(ev.bpc);
            report.curve.push((step, ev.nll));
            if state.counters.best_valid_nll.is_none_or(|b| ev.nll < b) {
                state.counters.best_valid_nll = Some(ev.nll);
                state.counters.bad_evals = 0;
                state.best_actor = Some(state.actor.params.clone());
            } else {
                state.counters.bad_evals += 1;
            }
        }
        sink.record(&row)?;
    }
    if let Some(best) = &state.best_actor {
        state.actor.params.copy_values_from(best)?;
    }
    state.delayed_actor.params.copy_values_from(&state.actor.params)?;
    state.counters.actor_pretrained = true;
    report.best_valid_nll = state.counters.best_valid_nll;
    Ok(report)
}

/// One discriminator update on a real training batch against fresh samples
/// from the live actor.
pub fn disc_step(state: &mut TrainState, corpus: &CorpusSplits, cfg: &TrainConfig) -> Result<DiscMetrics> {
    let k = state.counters.disc_steps;
    let real = train_batch(corpus, cfg, DISC_DATA, k)?;
    let fake = state.actor.sample(
        real.len(),
        &GenerationConfig::new(cfg.seq_len),
        &mut stream(cfg.seed, DISC_FAKE, k),
    )?;
    let m = state.disc.update(
        &mut state.adam_disc,
        &real,
        &fake,
        cfg.lr_disc,
        cfg.clip_norm,
        cfg.disc_objective,
    )?;
    state.counters.disc_steps += 1;
    Ok(m)
}

/// One TD(0) update of ψ on rollouts of the delayed actor, with targets from
/// ψ′ and θ′. Returns the metrics and the mean terminal reward.
fn critic_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    stream_name: &str,
    index: u64,
) -> Result<(CriticMetrics, f64)> {
    let rollouts = state.delayed_actor.sample(
        cfg.batch_size,
        &GenerationConfig::new(cfg.seq_len),
        &mut stream(cfg.seed, stream_name, index),
    )?;
    let rewards = state.disc.terminal_rewards(&rollouts, cfg.reward)?;
    let batch = state
        .target_critic
        .td_targets(&state.delayed_actor, &rollouts, &rewards)?;
    let m = state
        .critic
        .update(&mut state.adam_critic, &batch, cfg.lambda, cfg.lr_critic, cfg.clip_norm)?;
    Ok((m, mean(&rewards)))
}

/// TD-loss curve of critic pretraining.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CriticReport {
    pub td_loss: Vec<f64>,
}

/// Alternates discriminator and critic updates with θ frozen; ψ′ tracks ψ by
/// Polyak averaging and equals ψ at the end.
pub fn pretrain_critic<S: MetricsSink>(
    state: &mut TrainState,
    corpus: &CorpusSplits,
    cfg: &TrainConfig,
    sink: &mut S,
) -> Result<CriticReport> {
    if !state.counters.actor_pretrained {
        return Err(Error::PhaseOrder("critic pretraining needs a pretrained actor".into()));
    }
    let mut report = CriticReport::default();
    while state.counters.critic_steps < cfg.pretrain_critic_steps as u64 {
        let mut row = MetricsRow::new(state.counters.critic_steps + 1, "pretrain-critic");
        for _ in 0..cfg.disc_steps_per_cycle {
            let dm = disc_step(state, corpus, cfg)?;
            row.disc_loss = Some(dm.loss);
            row.disc_acc = Some(dm.accuracy);
            row.grad_norm_disc = Some(dm.grad_norm);
        }
        let (cm, reward) = critic_step(state, cfg, CRITIC_ROLLOUT, state.counters.critic_steps)?;
        polyak_update(&state.critic.params, &mut state.target_critic.params, cfg.tau)?;
        debug_assert!(state.actor.params.grads_are_zero() && state.delayed_actor.params.grads_are_zero());
        state.counters.critic_steps += 1;
        row.td_loss = Some(cm.td_loss);
        row.mean_penalty = Some(cm.mean_penalty);
        row.mean_reward = Some(reward);
        row.grad_norm_critic = Some(cm.grad_norm);
        report.td_loss.push(cm.td_loss);
        sink.record(&row)?;
    }
    state.target_critic.params.copy_values_from(&state.critic.params)?;
    state.counters.critic_pretrained = true;
    Ok(report)
}

/// Per-step value rows `(batch, actions)` that weight the policy surrogate:
/// critic values, with the sampled terminal action valued at its reward
/// under [`TerminalPg::RewardSubstitute`].
pub fn policy_values(
    critic: &Critic,
    rollouts: &[TokenSequence],
    rewards: &[f64],
    terminal: TerminalPg,
) -> Result<Vec<Tensor>> {
    if rewards.len() != rollouts.len() {
        return Err(Error::Shape {
            op: "policy_values",
            lhs: vec![rollouts.len()],
            rhs: vec![rewards.len()],
        });
    }
    let mut values = critic.values_along(rollouts)?;
    if terminal == TerminalPg::RewardSubstitute {
        let last = values.len() - 1;
        let cols = values[last].cols();
        let data = values[last].data_mut();
        for (b, (seq, &r)) in rollouts.iter().zip(rewards).enumerate() {
            data[b * cols + action_of(seq[last])] = r;
        }
    }
    Ok(values)
}

/// Accumulates `-∇_θ S` for the surrogate `S` weighted by [`policy_values`];
/// returns `S`.
pub fn policy_gradient(
    actor: &mut Actor,
    critic: &Critic,
    rollouts: &[TokenSequence],
    rewards: &[f64],
    terminal: TerminalPg,
) -> Result<f64> {
    let values = policy_values(critic, rollouts, rewards, terminal)?;
    actor.surrogate_gradient(rollouts, &values, 1.0)
}

fn check_ready(state: &TrainState, allow_cold_start: bool) -> Result<()> {
    if allow_cold_start || (state.counters.actor_pretrained && state.counters.critic_pretrained) {
        Ok(())
    } else {
        Err(Error::PhaseOrder(
            "fine-tuning needs pretrained actor and critic (or an explicit cold start)".into(),
        ))
    }
}

/// One cycle of the fine-tuning loop: discriminator updates, then inner
/// iterations of critic update, actor update and Polyak averaging.
pub fn actual_step(state: &mut TrainState, corpus: &CorpusSplits, cfg: &TrainConfig) -> Result<MetricsRow> {
    check_ready(state, false)?;
    step_unchecked(state, corpus, cfg)
}

fn step_unchecked(state: &mut TrainState, corpus: &CorpusSplits, cfg: &TrainConfig) -> Result<MetricsRow> {
    let mut row = MetricsRow::new(state.counters.train_steps + 1, "train");
    for _ in 0..cfg.disc_steps_per_cycle {
        let dm = disc_step(state, corpus, cfg)?;
        row.disc_loss = Some(dm.loss);
        row.disc_acc = Some(dm.accuracy);
        row.grad_norm_disc = Some(dm.grad_norm);
    }
    debug_assert!(state.actor.params.grads_are_zero() && state.critic.params.grads_are_zero());
    for _ in 0..cfg.inner_steps_per_cycle {
        let k = state.counters.inner_steps;
        let (cm, _) = critic_step(state, cfg, ROLLOUT, k)?;
        debug_assert!(state.actor.params.grads_are_zero() && state.disc.params.grads_are_zero());

        let live = state.actor.sample(
            cfg.batch_size,
            &GenerationConfig::new(cfg.seq_len),
            &mut stream(cfg.seed, LIVE_ROLLOUT, k),
        )?;
        let rewards = state.disc.terminal_rewards(&live, cfg.reward)?;
        let real = train_batch(corpus, cfg, LL_DATA, k)?;
        state.actor.params.zero_grad();
        policy_gradient(&mut state.actor, &state.critic, &live, &rewards, cfg.terminal_pg)?;
        let nll = state.actor.nll_gradient(&real, cfg.ll_weight)?;
        let grad_norm = state.actor.params.clip_global_norm(cfg.clip_norm);
        state.adam_actor.step(&mut state.actor.params, cfg.lr_actor)?;
        state.actor.params.zero_grad();
        debug_assert!(state.critic.params.grads_are_zero() && state.disc.params.grads_are_zero());

        polyak_update(&state.actor.params, &mut state.delayed_actor.params, cfg.tau)?;
        polyak_update(&state.critic.params, &mut state.target_critic.params, cfg.tau)?;
        state.counters.inner_steps += 1;

        row.train_nll = Some(nll);
        row.td_loss = Some(cm.td_loss);
        row.mean_penalty = Some(cm.mean_penalty);
        row.mean_reward = Some(mean(&rewards));
        row.grad_norm_actor = Some(grad_norm);
        row.grad_norm_critic = Some(cm.grad_norm);
    }
    state.counters.train_steps += 1;
    if state.counters.train_steps.is_multiple_of(cfg.eval_every as u64) && !corpus.valid.is_empty() {
        let ev = evaluate(&state.actor, &corpus.valid)?;
        row.valid_nll = Some(ev.nll);
        row.bpc = Some(ev.bpc);
    }
    Ok(row)
}

/// Runs fine-tuning cycles until `cfg.train_steps` have been taken in total.
pub fn train<S: MetricsSink>(
    state: &mut TrainState,
    corpus: &CorpusSplits,
    cfg: &TrainConfig,
    allow_cold_start: bool,
    sink: &mut S,
) -> Result<()> {
    check_ready(state, allow_cold_start)?;
    while state.counters.train_steps < cfg.train_steps as u64 {
        let row = step_unchecked(state, corpus, cfg)?;
        sink.record(&row)?;
    }
    Ok(())
}
