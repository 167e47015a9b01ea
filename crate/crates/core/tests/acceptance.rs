//! Acceptance criteria 1–11, one PASS/FAIL line each.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use actual::actor::{Actor, GenerationConfig};
use actual::corpus::{action_of, token_of, CorpusSplits, SyntheticGrammar, TokenSequence};
use actual::critic::{bellman_targets, polyak_update, variance_penalty, Critic};
use actual::discriminator::{DiscObjective, Discriminator, RewardKind};
use actual::numerics::gradcheck::check_gradients;
use actual::numerics::{AdamState, ParamStore, Tape, Tensor};
use actual::oracle::{
    all_sequences, exact_policy_gradient, max_abs_difference, prefix_expectation_gradient, EnumeratedModel,
};
use actual::recurrent::{Architecture, CellKind, RecurrentCell};
use actual::trainer::{self, evaluate, policy_values, CsvSink, NullSink, TerminalPg, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn arch(embed: usize, hidden: usize) -> Architecture {
    Architecture {
        cell: CellKind::Gru,
        embed_dim: embed,
        hidden_dim: hidden,
    }
}

fn gate(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("actual-acceptance-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("scratch dir");
    dir
}

// ---------------------------------------------------------------- criterion 1

fn worst_check<F, G>(params: &mut ParamStore, loss: F, grad: G) -> f64
where
    F: FnMut(&ParamStore) -> actual::Result<f64>,
    G: FnMut(&mut ParamStore) -> actual::Result<()>,
{
    check_gradients(params, loss, grad)
        .expect("gradient check")
        .max_rel_error
}

fn criterion_1() -> Outcome {
    const SEEDS: u64 = 10;
    let mut report = Vec::new();
    let mut worst_all: f64 = 0.0;

    for kind in [CellKind::Gru, CellKind::Lstm] {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let cell = RecurrentCell::new(&mut store, "cell", kind, 3, 4, &mut r).unwrap();
            let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[2, 3], 1.0, &mut r)).collect();
            let w = Tensor::uniform(&[2, 4], 1.0, &mut r);
            let forward = |tape: &mut Tape, p: &ParamStore| -> actual::Result<actual::numerics::Var> {
                let bound = cell.bind(tape, p)?;
                let mut state = bound.zero_state(tape, 2)?;
                let mut total = None;
                for x in &xs {
                    let xv = tape.constant(x.clone())?;
                    state = bound.step(tape, xv, &state)?;
                    let wv = tape.constant(w.clone())?;
                    let m = tape.mul(state.h, wv)?;
                    let s = tape.sum(m)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, s)?,
                        None => s,
                    });
                }
                Ok(total.unwrap())
            };
            let e = worst_check(
                &mut store,
                |p| {
                    let mut t = Tape::new();
                    let l = forward(&mut t, p)?;
                    Ok(t.value(l).item())
                },
                |p| {
                    let mut t = Tape::new();
                    let l = forward(&mut t, p)?;
                    t.backward(l)?.accumulate_into(p)
                },
            );
            worst = worst.max(e);
        }
        report.push(format!("{kind:?}={worst:.1e}"));
        worst_all = worst_all.max(worst);
    }

    let seqs: Vec<TokenSequence> = vec![vec![1, 2, 3, 1], vec![3, 3, 2, 1], vec![2, 1, 1, 3]];
    let fake: Vec<TokenSequence> = vec![vec![3, 1, 2, 2], vec![1, 1, 1, 1]];
    let small = arch(3, 4);

    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut a = Actor::new(4, &small, &mut rng(seed)).unwrap();
        let layout = a.clone();
        worst = worst.max(worst_check(
            &mut a.params,
            |p| {
                let mut t = Tape::new();
                let l = layout.nll_on_tape(&mut t, p, &seqs)?;
                Ok(t.value(l).item())
            },
            |p| {
                let mut t = Tape::new();
                let l = layout.nll_on_tape(&mut t, p, &seqs)?;
                t.backward(l)?.accumulate_into(p)
            },
        ));
    }
    report.push(format!("nll={worst:.1e}"));
    worst_all = worst_all.max(worst);

    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        for objective in [DiscObjective::Gan, DiscObjective::Logratio] {
            let mut d = Discriminator::new(4, &small, 4, &mut rng(seed)).unwrap();
            let layout = d.clone();
            worst = worst.max(worst_check(
                &mut d.params,
                |p| {
                    let mut t = Tape::new();
                    let l = layout.loss_on_tape(&mut t, p, &seqs, &fake, objective)?;
                    Ok(t.value(l).item())
                },
                |p| {
                    let mut t = Tape::new();
                    let l = layout.loss_on_tape(&mut t, p, &seqs, &fake, objective)?;
                    t.backward(l)?.accumulate_into(p)
                },
            ));
        }
    }
    report.push(format!("disc={worst:.1e}"));
    worst_all = worst_all.max(worst);

    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut c = Critic::new(4, &small, &mut rng(seed)).unwrap();
        let delayed = Actor::new(4, &small, &mut rng(seed + 1000)).unwrap();
        let batch = c.td_targets(&delayed, &seqs, &[0.2, 0.5, 0.9]).unwrap();
        let layout = c.clone();
        worst = worst.max(worst_check(
            &mut c.params,
            |p| {
                let mut t = Tape::new();
                let (l, _, _) = layout.loss_on_tape(&mut t, p, &batch, 5.0)?;
                Ok(t.value(l).item())
            },
            |p| {
                let mut t = Tape::new();
                let (l, _, _) = layout.loss_on_tape(&mut t, p, &batch, 5.0)?;
                t.backward(l)?.accumulate_into(p)
            },
        ));
    }
    report.push(format!("td={worst:.1e}"));
    worst_all = worst_all.max(worst);

    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut a = Actor::new(4, &small, &mut rng(seed)).unwrap();
        let critic = Critic::new(4, &small, &mut rng(seed + 2000)).unwrap();
        let values = policy_values(&critic, &seqs, &[0.1, 0.6, 0.3], TerminalPg::RewardSubstitute).unwrap();
        let layout = a.clone();
        worst = worst.max(worst_check(
            &mut a.params,
            |p| {
                let mut t = Tape::new();
                let l = layout.surrogate_on_tape(&mut t, p, &seqs, &values)?;
                Ok(t.value(l).item())
            },
            |p| {
                let mut t = Tape::new();
                let l = layout.surrogate_on_tape(&mut t, p, &seqs, &values)?;
                t.backward(l)?.accumulate_into(p)
            },
        ));
    }
    report.push(format!("surrogate={worst:.1e}"));
    worst_all = worst_all.max(worst);

    gate(
        worst_all <= 1e-4,
        format!(
            "max rel err {worst_all:.2e} <= 1e-4 over {SEEDS} seeds ({})",
            report.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criteria 2, 3

fn random_reward_table(seed: u64) -> impl Fn(&[usize]) -> actual::Result<f64> {
    let mut r = rng(seed);
    let table: Vec<f64> = (0..27).map(|_| r.gen::<f64>()).collect();
    move |s: &[usize]| Ok(table[s.iter().fold(0, |acc, &t| acc * 3 + action_of(t))])
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for seed in 0..5 {
        let mut actor = Actor::new(4, &arch(4, 8), &mut rng(seed)).unwrap();
        let reward = random_reward_table(seed + 100);
        let exact = exact_policy_gradient(&mut actor, 3, &reward).unwrap();
        let frozen = actor.clone();
        let model = EnumeratedModel::new(3, 3, |p: &[usize]| frozen.policy(p), &reward).unwrap();
        let g = prefix_expectation_gradient(&mut actor, 3, |p| model.exact_action_values(p)).unwrap();
        worst = worst.max(max_abs_difference(&g, &exact.autodiff));
        scale = scale.max(exact.autodiff.iter().fold(0.0, |m: f64, x| m.max(x.abs())));
    }
    gate(
        worst <= 1e-8,
        format!(
            "max |prefix-expectation - enumeration| = {worst:.2e} <= 1e-8 (gradient scale {scale:.2e}, 5 instances)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let small = arch(4, 8);
    let actor = Actor::new(4, &small, &mut rng(3)).unwrap();
    let disc = Discriminator::new(4, &small, 3, &mut rng(4)).unwrap();
    let model = EnumeratedModel::new(
        3,
        3,
        |p: &[usize]| actor.policy(p),
        |s: &[usize]| disc.score(&s.to_vec()),
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    let mut terminal_exact = true;
    for y in all_sequences(3, 3).unwrap() {
        let policies: Vec<Vec<f64>> = (0..3).map(|t| model.policy(&y[..t]).unwrap()).collect();
        let values: Vec<Vec<f64>> = (0..3).map(|t| model.exact_action_values(&y[..t]).unwrap()).collect();
        let r = disc.score(&y).unwrap();
        let kappa = bellman_targets(&policies, &values, r).unwrap();
        for t in 0..2 {
            let q = model.exact_action_value(&y[..t], action_of(y[t])).unwrap();
            worst = worst.max((kappa[t] - q).abs());
        }
        terminal_exact &= kappa[2] == r;
    }
    // The same through the networks: terminal targets are the discriminator scores.
    let target = Critic::new(4, &small, &mut rng(5)).unwrap();
    let rollouts = actor.sample(64, &GenerationConfig::new(3), &mut rng(6)).unwrap();
    let rewards = disc.terminal_rewards(&rollouts, RewardKind::Probability).unwrap();
    let batch = target.td_targets(&actor, &rollouts, &rewards).unwrap();
    let net_terminal = batch.targets.iter().zip(&rewards).all(|(k, &r)| k[2] == r);
    gate(
        worst <= 1e-12 && terminal_exact && net_terminal,
        format!(
            "max |kappa_t - Q*| = {worst:.2e} <= 1e-12 over 27 rollouts; kappa_T == D(Y) exactly: oracle {terminal_exact}, networks {net_terminal}"
        ),
    )
}

// ---------------------------------------------------------------- criteria 4, 11

struct TinyInstance {
    actor: Actor,
    disc: Discriminator,
    critic: Critic,
}

fn tiny_disc(actor: &Actor) -> Discriminator {
    let small = arch(4, 8);
    let mut disc = Discriminator::new(4, &small, 3, &mut rng(41)).unwrap();
    let mut adam = AdamState::with_defaults(&disc.params);
    let g = SyntheticGrammar::repeat_free(vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let mut r = rng(42);
    for _ in 0..60 {
        let real: Vec<TokenSequence> = (0..16)
            .map(|_| g.sample(3, &mut r).into_iter().map(token_of).collect())
            .collect();
        let fake = actor.sample(16, &GenerationConfig::new(3), &mut r).unwrap();
        disc.update(&mut adam, &real, &fake, 1e-2, 5.0, DiscObjective::Gan)
            .unwrap();
    }
    disc
}

fn max_critic_error<P, R>(critic: &Critic, model: &EnumeratedModel<P, R>) -> f64
where
    P: Fn(&[usize]) -> actual::Result<Vec<f64>>,
    R: Fn(&[usize]) -> actual::Result<f64>,
{
    let mut worst: f64 = 0.0;
    for len in 0..3 {
        for prefix in all_sequences(3, len).unwrap() {
            let q = model.exact_action_values(&prefix).unwrap();
            let est = critic.action_values(&prefix).unwrap();
            worst = worst.max(max_abs_difference(&q, &est));
        }
    }
    worst
}

fn criterion_4() -> (Outcome, Option<TinyInstance>) {
    let small = arch(4, 8);
    let actor = Actor::new(4, &small, &mut rng(40)).unwrap();
    let disc = tiny_disc(&actor);
    let model = EnumeratedModel::new(
        3,
        3,
        |p: &[usize]| actor.policy(p),
        |s: &[usize]| disc.score(&s.to_vec()),
    )
    .unwrap();
    let rewards: Vec<f64> = all_sequences(3, 3)
        .unwrap()
        .iter()
        .map(|s| model.reward(s).unwrap())
        .collect();
    let (lo, hi) = rewards.iter().fold((1.0f64, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));

    let mut critic = Critic::new(4, &arch(8, 16), &mut rng(43)).unwrap();
    let mut target = critic.clone();
    let mut adam = AdamState::with_defaults(&critic.params);
    let mut r = rng(44);
    let (mut updates, mut err) = (0, f64::INFINITY);
    while updates < 20_000 {
        let lr = if updates < 10_000 { 3e-3 } else { 1e-3 };
        let rollouts = actor.sample(32, &GenerationConfig::new(3), &mut r).unwrap();
        let rw = disc.terminal_rewards(&rollouts, RewardKind::Probability).unwrap();
        let batch = target.td_targets(&actor, &rollouts, &rw).unwrap();
        critic.update(&mut adam, &batch, 0.0, lr, 5.0).unwrap();
        polyak_update(&critic.params, &mut target.params, 0.05).unwrap();
        updates += 1;
        if updates % 500 == 0 {
            err = max_critic_error(&critic, &model);
            if err <= 0.05 {
                break;
            }
        }
    }
    let outcome = gate(
        err <= 0.05,
        format!("max |Q_hat - Q*| = {err:.4} <= 0.05 after {updates} updates (rewards span [{lo:.3}, {hi:.3}])"),
    );
    (outcome, Some(TinyInstance { actor, disc, critic }))
}

fn column_variance_trace(samples: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut trace = 0.0;
    for s in samples {
        for (m, x) in mean.iter().zip(s) {
            trace += (x - m) * (x - m) / (n - 1.0);
        }
    }
    (trace, mean)
}

fn criterion_11(inst: Option<&TinyInstance>) -> Outcome {
    let Some(inst) = inst else {
        return Err("criterion 4 produced no critic".into());
    };
    const N: usize = 10_000;
    let mut r = rng(110);
    let rollouts = inst.actor.sample(N, &GenerationConfig::new(3), &mut r).unwrap();
    let rewards = inst.disc.terminal_rewards(&rollouts, RewardKind::Probability).unwrap();
    let mut critic_est = Vec::with_capacity(N);
    let mut reinforce_est = Vec::with_capacity(N);
    let mut exact_est = Vec::with_capacity(N);
    let model = EnumeratedModel::new(
        3,
        3,
        |p: &[usize]| inst.actor.policy(p),
        |s: &[usize]| inst.disc.score(&s.to_vec()),
    )
    .unwrap();
    let mut a = inst.actor.clone();
    for (y, &rw) in rollouts.iter().zip(&rewards) {
        let one = std::slice::from_ref(y);
        a.params.zero_grad();
        let values = policy_values(&inst.critic, one, &[rw], TerminalPg::RewardSubstitute).unwrap();
        a.surrogate_gradient(one, &values, -1.0).unwrap();
        critic_est.push(a.params.flat_grads());

        a.params.zero_grad();
        let exact: Vec<Tensor> = (0..3)
            .map(|t| Tensor::new(vec![1, 3], model.exact_action_values(&y[..t]).unwrap()).unwrap())
            .collect();
        a.surrogate_gradient(one, &exact, -1.0).unwrap();
        exact_est.push(a.params.flat_grads());

        // r · ∇log p(Y) = -r · T · ∇NLL
        a.params.zero_grad();
        a.nll_gradient(one, -rw * 3.0).unwrap();
        reinforce_est.push(a.params.flat_grads());
    }
    let (v_critic, _) = column_variance_trace(&critic_est);
    let (v_exact, _) = column_variance_trace(&exact_est);
    let (v_reinforce, m_reinforce) = column_variance_trace(&reinforce_est);
    let mut probe = inst.actor.clone();
    let truth = exact_policy_gradient(&mut probe, 3, |s: &[usize]| inst.disc.score(&s.to_vec()))
        .unwrap()
        .autodiff;
    let ratio = v_critic / v_reinforce;
    gate(
        ratio <= 1.0,
        format!(
            "variance trace ratio critic/REINFORCE = {ratio:.4} <= 1.0 (critic {v_critic:.3e}, REINFORCE {v_reinforce:.3e}, exact-Q {v_exact:.3e}; REINFORCE mean error {:.1e})",
            max_abs_difference(&m_reinforce, &truth)
        ),
    )
}

// ---------------------------------------------------------------- criteria 5, 6

fn criterion_5() -> Outcome {
    let mut r = rng(50);
    let mut nonneg = true;
    let mut homog: f64 = 0.0;
    let mut zero_iff = true;
    for _ in 0..1000 {
        let n = r.gen_range(1..10);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let p = variance_penalty(&v);
        nonneg &= p >= 0.0;
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        homog = homog.max((variance_penalty(&doubled) - 4.0 * p).abs() / p.max(1.0));
        zero_iff &= (p == 0.0) == v.iter().all(|&x| x == v[0]);
        let c = r.gen_range(-5.0..5.0);
        zero_iff &= variance_penalty(&vec![c; n]) == 0.0;
    }

    let small = arch(4, 8);
    let start = Critic::new(4, &small, &mut rng(51)).unwrap();
    let delayed = Actor::new(4, &small, &mut rng(52)).unwrap();
    let rollouts = delayed.sample(16, &GenerationConfig::new(4), &mut rng(53)).unwrap();
    let rewards: Vec<f64> = (0..16).map(|_| r.gen()).collect();
    let batch = start.td_targets(&delayed, &rollouts, &rewards).unwrap();
    let spread = |c: &Critic| -> f64 {
        let vs = c.values_along(&rollouts).unwrap();
        let rows: Vec<f64> = vs
            .iter()
            .flat_map(|v| {
                v.data()
                    .chunks(3)
                    .map(|row| {
                        row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    let run = |lambda: f64| {
        let mut c = start.clone();
        let mut adam = AdamState::with_defaults(&c.params);
        for _ in 0..50 {
            c.update(&mut adam, &batch, lambda, 1e-3, 5.0).unwrap();
        }
        spread(&c)
    };
    let (s5, s0) = (run(5.0), run(0.0));
    gate(
        nonneg && zero_iff && homog <= 1e-12 && s5 < s0,
        format!(
            "C>=0 {nonneg}, zero iff equal {zero_iff}, homogeneity err {homog:.1e}; mean spread after 50 updates: lambda=5 {s5:.4} < lambda=0 {s0:.4}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut r = rng(60);
    let mut src = ParamStore::new();
    src.insert("w", Tensor::uniform(&[3, 4], 1.0, &mut r)).unwrap();
    src.insert("b", Tensor::uniform(&[4], 1.0, &mut r)).unwrap();
    let mut tgt = src.clone();
    for id in tgt.ids().collect::<Vec<_>>() {
        *tgt.value_mut(id) = Tensor::uniform(tgt.value(id).shape(), 1.0, &mut r);
    }
    let before = tgt.clone();
    polyak_update(&src, &mut tgt, 0.0).unwrap();
    let freeze = tgt.values_identical(&before);
    polyak_update(&src, &mut tgt, 1.0).unwrap();
    let copy = tgt.values_identical(&src);

    let mut worst: f64 = 0.0;
    for tau in [0.001, 0.1, 0.5, 0.9] {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(1.5)).unwrap();
        let mut t = ParamStore::new();
        t.insert("x", Tensor::scalar(-0.5)).unwrap();
        for n in 1..=200 {
            polyak_update(&s, &mut t, tau).unwrap();
            let expect = 1.5 - 2.0 * (1.0f64 - tau).powi(n);
            worst = worst.max((t.value(id).item() - expect).abs());
        }
        s.value_mut(id).data_mut()[0] = 1.5;
    }
    gate(
        freeze && copy && worst <= 1e-12,
        format!("tau=0 freeze {freeze}, tau=1 copy {copy}, max |error - (1-tau)^n| = {worst:.1e} <= 1e-12"),
    )
}

// ---------------------------------------------------------------- criteria 7, 8

const TRANSITIONS: [[f64; 2]; 2] = [[0.85, 0.15], [0.3, 0.7]];

fn markov_corpus() -> (usize, CorpusSplits, f64) {
    let g = SyntheticGrammar::markov(
        vec!["a".into(), "b".into()],
        TRANSITIONS.iter().map(|r| r.to_vec()).collect(),
    )
    .unwrap();
    let (vocab, corpus) = CorpusSplits::from_grammar(&g, 32, (4000, 2000, 2000), 70).unwrap();
    (vocab.len(), corpus, g.entropy_rate())
}

fn base_config() -> TrainConfig {
    TrainConfig {
        seed: 7,
        seq_len: 32,
        batch_size: 32,
        lr_pretrain: 1e-2,
        lr_actor: 1e-4,
        lr_critic: 1e-3,
        lr_disc: 1e-3,
        lambda: 0.1,
        tau: 0.01,
        ll_weight: 0.1,
        eval_every: 25,
        pretrain_actor_steps: 3000,
        pretrain_critic_steps: 300,
        train_steps: 1000,
        actor: arch(8, 16),
        critic: arch(8, 16),
        discriminator: arch(8, 16),
        ..TrainConfig::default()
    }
}

fn criterion_7(checkpoint: &std::path::Path) -> Outcome {
    let (v, corpus, h) = markov_corpus();
    let cfg = base_config();
    let mut state = TrainState::new(v, &cfg).unwrap();
    trainer::pretrain_actor(&mut state, &corpus, &cfg, &mut NullSink).unwrap();
    let nll = evaluate(&state.actor, &corpus.valid).unwrap().nll;
    state.save(checkpoint).unwrap();
    gate(
        nll <= 1.05 * h,
        format!(
            "valid NLL {nll:.4} <= 1.05 * H = {:.4} (H = {h:.4} nats/token, ratio {:.4}, {} steps)",
            1.05 * h,
            nll / h,
            state.counters.actor_steps
        ),
    )
}

fn held_out_accuracy(state: &TrainState, real: &[TokenSequence], seed: u64) -> f64 {
    let fake = state
        .actor
        .sample(real.len(), &GenerationConfig::new(32), &mut rng(seed))
        .unwrap();
    state.disc.accuracy(real, &fake).unwrap()
}

fn criterion_8(checkpoint: &std::path::Path) -> Outcome {
    let (v, corpus, _) = markov_corpus();
    let cfg = base_config();
    let mut state = TrainState::load(checkpoint, v, &cfg).map_err(|e| format!("no criterion-7 checkpoint: {e}"))?;
    let best = state.counters.best_valid_nll.unwrap();
    trainer::pretrain_critic(&mut state, &corpus, &cfg, &mut NullSink).unwrap();
    let acc_start = held_out_accuracy(&state, &corpus.test, 801);
    let start_disc = state.disc.clone();
    trainer::train(&mut state, &corpus, &cfg, false, &mut NullSink).unwrap();
    let acc_end = held_out_accuracy(&state, &corpus.test, 802);
    let mut frozen = state.clone();
    frozen.disc = start_disc;
    let acc_frozen = held_out_accuracy(&frozen, &corpus.test, 802);
    let nll = evaluate(&state.actor, &corpus.valid).unwrap().nll;
    gate(
        nll <= 1.02 * best && acc_end < acc_start,
        format!(
            "valid NLL {nll:.4} <= 1.02 * pretrain best {best:.4} (ratio {:.4}); held-out disc accuracy {acc_start:.4} -> {acc_end:.4} \
             (start discriminator on final samples {acc_frozen:.4}; std err {:.4})",
            nll / best,
            (0.25 / (2 * corpus.test.len()) as f64).sqrt()
        ),
    )
}

// ---------------------------------------------------------------- criteria 9, 10

fn criterion_9(checkpoint: &std::path::Path) -> Outcome {
    let (v, _, _) = markov_corpus();
    let cfg = base_config();
    let state = TrainState::load(checkpoint, v, &cfg).map_err(|e| e.to_string())?;
    let samples = state
        .actor
        .sample(256, &GenerationConfig::new(32), &mut rng(90))
        .unwrap();
    let mut worst_policy: f64 = 0.0;
    for p in state.actor.policies_along(&samples).unwrap() {
        for b in 0..p.rows() {
            worst_policy = worst_policy.max((p.row(b).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut worst_enum: f64 = 0.0;
    for (seed, (actions, len)) in [(3usize, 3usize), (3, 6), (4, 5), (2, 6)].into_iter().enumerate() {
        let a = Actor::new(actions + 1, &arch(4, 8), &mut rng(seed as u64)).unwrap();
        let m = EnumeratedModel::new(actions, len, |p: &[usize]| a.policy(p), |_: &[usize]| Ok(0.0)).unwrap();
        let total: f64 = m.enumerate_probs().unwrap().values().sum();
        worst_enum = worst_enum.max((total - 1.0).abs());
    }
    gate(
        worst_policy <= 1e-12 && worst_enum <= 1e-9,
        format!(
            "max |sum q - 1| = {worst_policy:.1e} over 256x32 sampled prefixes; max |sum p(Y) - 1| = {worst_enum:.1e}"
        ),
    )
}

fn reproducible_run(dir: &std::path::Path) -> (Vec<u8>, TrainState) {
    let g = SyntheticGrammar::parity(["a".into(), "b".into()], 0.1).unwrap();
    let (vocab, corpus) = CorpusSplits::from_grammar(&g, 8, (128, 64, 64), 100).unwrap();
    let cfg = TrainConfig {
        seq_len: 8,
        batch_size: 16,
        eval_every: 10,
        pretrain_actor_steps: 40,
        pretrain_critic_steps: 20,
        train_steps: 20,
        actor: arch(4, 8),
        critic: arch(4, 8),
        discriminator: arch(4, 8),
        ..base_config()
    };
    let mut csv = Vec::new();
    let mut state = TrainState::new(vocab.len(), &cfg).unwrap();
    {
        let mut sink = CsvSink::new(&mut csv, true).unwrap();
        trainer::pretrain_actor(&mut state, &corpus, &cfg, &mut sink).unwrap();
        trainer::pretrain_critic(&mut state, &corpus, &cfg, &mut sink).unwrap();
        trainer::train(&mut state, &corpus, &cfg, false, &mut sink).unwrap();
    }
    let path = dir.join("state.bin");
    state.save(&path).unwrap();
    let loaded = TrainState::load(&path, vocab.len(), &cfg).unwrap();
    (csv, loaded)
}

fn criterion_10() -> Outcome {
    let dir = scratch_dir("c10");
    let (a, sa) = reproducible_run(&dir);
    let (b, sb) = reproducible_run(&dir);
    std::fs::remove_dir_all(&dir).ok();
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    let (_, fresh) = {
        let dir = scratch_dir("c10b");
        let r = reproducible_run(&dir);
        std::fs::remove_dir_all(&dir).ok();
        r
    };
    let records_equal = sa.to_records() == sb.to_records() && sa.to_records() == fresh.to_records();
    gate(
        a == b && records_equal,
        format!("metrics CSV bitwise identical across runs: {} ({lines} lines); checkpoint round trip bitwise: {records_equal}", a == b),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let dir = scratch_dir("main");
    let ckpt = dir.join("criterion7.bin");
    let mut failures = 0;
    let mut report = |n: u32, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let over = budget.is_some_and(|b| took > b);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; exceeded time budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("criterion {n:>2}: {status} [{:.1}s] {detail}", took.as_secs_f64());
    };
    let mins = |m: u64| Some(Duration::from_secs(60 * m));

    report(1, mins(2), &mut criterion_1);
    report(2, Some(Duration::from_secs(30)), &mut criterion_2);
    report(3, None, &mut criterion_3);
    let mut tiny = None;
    report(4, mins(5), &mut || {
        let (o, inst) = criterion_4();
        tiny = inst;
        o
    });
    report(5, None, &mut criterion_5);
    report(6, None, &mut criterion_6);
    report(7, mins(5), &mut || criterion_7(&ckpt));
    report(8, mins(15), &mut || criterion_8(&ckpt));
    report(9, None, &mut || criterion_9(&ckpt));
    report(10, None, &mut criterion_10);
    report(11, None, &mut || criterion_11(tiny.as_ref()));
    std::fs::remove_dir_all(&dir).ok();
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
