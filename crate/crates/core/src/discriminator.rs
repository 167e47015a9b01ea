//! Bidirectional recurrent classifier separating data sequences from samples.
//! Its score on a finished sequence is the only reward the generator sees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor::validate_tokens;
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, AdamState, ParamStore, Tape, Var};
use crate::recurrent::{encode_bidirectional, Architecture, Embedding, LinearHead, RecurrentCell};

/// Training objective for the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscObjective {
    /// `-mean log D(real) - mean log(1 - D(fake))`.
    #[default]
    Gan,
    /// `-(mean log D(real) - mean log D(fake))`.
    Logratio,
}

/// What the discriminator hands out as the terminal reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    #[default]
    Probability,
    Logit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_score_real: f64,
    pub mean_score_fake: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    embedding: Embedding,
    forward: RecurrentCell,
    backward: RecurrentCell,
    head: LinearHead,
    seq_len: usize,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, arch: &Architecture, seq_len: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let s = 1.0 / (arch.hidden_dim as f64).sqrt();
        let embedding = Embedding::new(&mut params, "disc.embedding", vocab_size, arch.embed_dim, s, rng)?;
        let forward = RecurrentCell::new(&mut params, "disc.fwd", arch.cell, arch.embed_dim, arch.hidden_dim, rng)?;
        let backward = RecurrentCell::new(&mut params, "disc.bwd", arch.cell, arch.embed_dim, arch.hidden_dim, rng)?;
        let head = LinearHead::new(&mut params, "disc.head", 2 * arch.hidden_dim, 1, rng)?;
        Ok(Self {
            params,
            embedding,
            forward,
            backward,
            head,
            seq_len,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn head(&self) -> &LinearHead {
        &self.head
    }

    fn check(&self, batch: &[TokenSequence]) -> Result<()> {
        let len = validate_tokens(batch, self.embedding.rows())?;
        if len != self.seq_len {
            return Err(Error::SequenceLength {
                expected: self.seq_len,
                got: len,
            });
        }
        Ok(())
    }

    /// Head logits `(batch, 1)`.
    pub fn logits_on_tape(&self, tape: &mut Tape, params: &ParamStore, batch: &[TokenSequence]) -> Result<Var> {
        self.check(batch)?;
        let emb = self.embedding.bind(tape, params)?;
        let fwd = self.forward.bind(tape, params)?;
        let bwd = self.backward.bind(tape, params)?;
        let head = self.head.bind(tape, params)?;
        let summary = encode_bidirectional(tape, &fwd, &bwd, &emb, batch)?;
        head.apply(tape, summary)
    }

    pub fn logits(&self, batch: &[TokenSequence]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let l = self.logits_on_tape(&mut tape, &self.params, batch)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// D(Y) for each sequence: the probability that it came from the data.
    pub fn scores(&self, batch: &[TokenSequence]) -> Result<Vec<f64>> {
        Ok(self.logits(batch)?.into_iter().map(sigmoid).collect())
    }

    pub fn score(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(self.scores(std::slice::from_ref(seq))?[0])
    }

    /// Reward at the last step of each sequence; every earlier step earns zero.
    pub fn terminal_rewards(&self, batch: &[TokenSequence], kind: RewardKind) -> Result<Vec<f64>> {
        match kind {
            RewardKind::Probability => self.scores(batch),
            RewardKind::Logit => self.logits(batch),
        }
    }

    /// Per-step rewards of one finished sequence: zeros, then the terminal reward.
    pub fn step_rewards(&self, seq: &TokenSequence, kind: RewardKind) -> Result<Vec<f64>> {
        let mut r = vec![0.0; seq.len()];
        if let Some(last) = r.last_mut() {
            *last = self.terminal_rewards(std::slice::from_ref(seq), kind)?[0];
        }
        Ok(r)
    }

    /// Loss as a scalar node. Fake sequences enter only as token constants.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        real: &[TokenSequence],
        fake: &[TokenSequence],
        objective: DiscObjective,
    ) -> Result<Var> {
        let lr = self.logits_on_tape(tape, params, real)?;
        let lf = self.logits_on_tape(tape, params, fake)?;
        let log_d_real = tape.log_sigmoid(lr)?;
        let real_term = tape.mean(log_d_real)?;
        let fake_term = match objective {
            // log(1 - σ(x)) = log σ(-x)
            DiscObjective::Gan => {
                let neg = tape.scale(lf, -1.0)?;
                let l = tape.log_sigmoid(neg)?;
                let m = tape.mean(l)?;
                tape.scale(m, -1.0)?
            }
            DiscObjective::Logratio => {
                let l = tape.log_sigmoid(lf)?;
                tape.mean(l)?
            }
        };
        let neg_real = tape.scale(real_term, -1.0)?;
        tape.add(neg_real, fake_term)
    }

    pub fn loss(&self, real: &[TokenSequence], fake: &[TokenSequence], objective: DiscObjective) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, &self.params, real, fake, objective)?;
        Ok(tape.value(l).item())
    }

    /// Accumulates the loss gradient and reports batch metrics (grad norm is pre-clip, 0 here).
    pub fn loss_gradient(
        &mut self,
        real: &[TokenSequence],
        fake: &[TokenSequence],
        objective: DiscObjective,
    ) -> Result<DiscMetrics> {
        let mut tape = Tape::new();
        let lr = self.logits_on_tape(&mut tape, &self.params, real)?;
        let lf = self.logits_on_tape(&mut tape, &self.params, fake)?;
        let real_scores: Vec<f64> = tape.value(lr).data().iter().map(|&x| sigmoid(x)).collect();
        let fake_scores: Vec<f64> = tape.value(lf).data().iter().map(|&x| sigmoid(x)).collect();
        drop(tape);
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, &self.params, real, fake, objective)?;
        tape.backward(loss)?.accumulate_into(&mut self.params)?;
        Ok(DiscMetrics {
            loss: tape.value(loss).item(),
            accuracy: accuracy(&real_scores, &fake_scores),
            mean_score_real: mean(&real_scores),
            mean_score_fake: mean(&fake_scores),
            grad_norm: 0.0,
        })
    }

    /// One clipped Adam step on the discriminator loss.
    pub fn update(
        &mut self,
        adam: &mut AdamState,
        real: &[TokenSequence],
        fake: &[TokenSequence],
        lr: f64,
        clip_norm: f64,
        objective: DiscObjective,
    ) -> Result<DiscMetrics> {
        self.params.zero_grad();
        let mut m = self.loss_gradient(real, fake, objective)?;
        m.grad_norm = self.params.clip_global_norm(clip_norm);
        adam.step(&mut self.params, lr)?;
        self.params.zero_grad();
        Ok(m)
    }

    /// Accuracy at threshold 0.5 on held-out batches.
    pub fn accuracy(&self, real: &[TokenSequence], fake: &[TokenSequence]) -> Result<f64> {
        Ok(accuracy(&self.scores(real)?, &self.scores(fake)?))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Fraction of real scores above 0.5 plus fake scores below it, over both sets.
pub fn accuracy(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    let correct = real_scores.iter().filter(|&&s| s > 0.5).count() + fake_scores.iter().filter(|&&s| s < 0.5).count();
    correct as f64 / (real_scores.len() + fake_scores.len()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::recurrent::CellKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(seed: u64) -> Discriminator {
        let arch = Architecture {
            cell: CellKind::Gru,
            embed_dim: 4,
            hidden_dim: 5,
        };
        Discriminator::new(4, &arch, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn zero_head(d: &mut Discriminator) {
        let (w, b) = (d.head.weight(), d.head.bias());
        d.params.value_mut(w).data_mut().fill(0.0);
        d.params.value_mut(b).data_mut().fill(0.0);
    }

    #[test]
    fn zero_head_scores_half_and_loss_is_two_ln_two() {
        let mut d = disc(0);
        zero_head(&mut d);
        let batch = vec![vec![1, 2, 3, 1], vec![3, 3, 3, 3]];
        assert!(d.scores(&batch).unwrap().iter().all(|&s| s == 0.5));
        let loss = d.loss(&batch, &batch, DiscObjective::Gan).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(
            d.step_rewards(&batch[0], RewardKind::Probability).unwrap(),
            vec![0.0, 0.0, 0.0, 0.5]
        );
    }

    #[test]
    fn scores_stay_inside_unit_interval() {
        let mut d = disc(3);
        let w = d.head.weight();
        d.params.value_mut(w).data_mut().iter_mut().for_each(|v| *v *= 8.0);
        for s in d.scores(&[vec![1, 1, 1, 1], vec![2, 3, 1, 2]]).unwrap() {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn wrong_length_is_error() {
        let d = disc(0);
        assert!(matches!(
            d.score(&vec![1, 2, 3]),
            Err(Error::SequenceLength { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn label_swap_symmetry() {
        // L(D; real, fake) equals L(1-D; fake, real) with 1-D = σ(-logit).
        let d = disc(5);
        let real = vec![vec![1, 2, 3, 1], vec![2, 2, 1, 3]];
        let fake = vec![vec![3, 3, 3, 3], vec![1, 1, 2, 2]];
        let lr = d.logits(&real).unwrap();
        let lf = d.logits(&fake).unwrap();
        let ls = |x: f64| crate::numerics::log_sigmoid(x);
        let m = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let direct = d.loss(&real, &fake, DiscObjective::Gan).unwrap();
        let swapped = -m(lf.iter().map(|&x| ls(-x)).collect()) - m(lr.iter().map(|&x| ls(x)).collect());
        assert!((direct - swapped).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let real = vec![vec![1, 2, 3, 1], vec![2, 2, 1, 3]];
        let fake = vec![vec![3, 3, 3, 3], vec![1, 1, 2, 2]];
        for objective in [DiscObjective::Gan, DiscObjective::Logratio] {
            for seed in 0..10 {
                let mut d = disc(seed);
                let model = d.clone();
                let check = check_gradients(
                    &mut d.params,
                    |p| {
                        let mut tape = Tape::new();
                        let l = model.loss_on_tape(&mut tape, p, &real, &fake, objective)?;
                        Ok(tape.value(l).item())
                    },
                    |p| {
                        let mut tape = Tape::new();
                        let l = model.loss_on_tape(&mut tape, p, &real, &fake, objective)?;
                        tape.backward(l)?.accumulate_into(p)
                    },
                )
                .unwrap();
                assert!(check.passes(1e-4), "{objective:?} seed {seed}: {}", check.max_rel_error);
            }
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut d = disc(1);
        let before = d.params.clone();
        let mut adam = AdamState::with_defaults(&d.params);
        d.update(
            &mut adam,
            &[vec![1, 1, 1, 1]],
            &[vec![2, 2, 2, 2]],
            0.0,
            10.0,
            DiscObjective::Gan,
        )
        .unwrap();
        assert!(d.params.values_identical(&before));
    }

    #[test]
    fn small_step_lowers_loss() {
        let mut d = disc(2);
        let real = vec![vec![1, 2, 1, 2]; 3];
        let fake = vec![vec![3, 1, 3, 1]; 3];
        let before = d.loss(&real, &fake, DiscObjective::Gan).unwrap();
        let mut adam = AdamState::with_defaults(&d.params);
        d.update(&mut adam, &real, &fake, 1e-3, 10.0, DiscObjective::Gan)
            .unwrap();
        assert!(d.loss(&real, &fake, DiscObjective::Gan).unwrap() < before);
    }

    #[test]
    fn separates_constant_sequences() {
        let mut d = disc(4);
        let real = vec![vec![1; 4]; 4];
        let fake = vec![vec![2; 4]; 4];
        let mut adam = AdamState::with_defaults(&d.params);
        let mut last = DiscMetrics::default();
        for _ in 0..200 {
            last = d
                .update(&mut adam, &real, &fake, 0.01, 10.0, DiscObjective::Gan)
                .unwrap();
        }
        assert_eq!(last.accuracy, 1.0);
        let (sa, sb) = (d.score(&real[0]).unwrap(), d.score(&fake[0]).unwrap());
        assert!(sa > 0.9 && sb < 0.1, "{sa} {sb}");
        assert!(d.terminal_rewards(&real[..1], RewardKind::Probability).unwrap()[0] > 0.9);
    }
}
