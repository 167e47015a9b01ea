use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::actor::Actor;
use crate::critic::Critic;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{read_records, write_records};
use crate::numerics::{AdamState, ParamStore, Tensor};
use crate::trainer::config::TrainConfig;
use crate::trainer::streams::{stream, INIT_ACTOR, INIT_CRITIC, INIT_DISC};

/// Step counters and early-stopping bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counters {
    pub actor_steps: u64,
    pub critic_steps: u64,
    pub disc_steps: u64,
    pub train_steps: u64,
    /// Inner actor/critic iterations of the fine-tuning loop.
    pub inner_steps: u64,
    pub best_valid_nll: Option<f64>,
    pub bad_evals: u64,
    pub actor_pretrained: bool,
    pub critic_pretrained: bool,
}

impl Counters {
    fn to_tensor(&self) -> Tensor {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        Tensor::vector(vec![
            self.actor_steps as f64,
            self.critic_steps as f64,
            self.disc_steps as f64,
            self.train_steps as f64,
            self.inner_steps as f64,
            self.best_valid_nll.map_or(0.0, |_| 1.0),
            self.best_valid_nll.unwrap_or(0.0),
            self.bad_evals as f64,
            flag(self.actor_pretrained),
            flag(self.critic_pretrained),
        ])
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 10 {
            return Err(Error::Checkpoint(format!("counters record has {} entries", d.len())));
        }
        Ok(Self {
            actor_steps: d[0] as u64,
            critic_steps: d[1] as u64,
            disc_steps: d[2] as u64,
            train_steps: d[3] as u64,
            inner_steps: d[4] as u64,
            best_valid_nll: (d[5] != 0.0).then_some(d[6]),
            bad_evals: d[7] as u64,
            actor_pretrained: d[8] != 0.0,
            critic_pretrained: d[9] != 0.0,
        })
    }
}

fn take_record(map: &mut HashMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "record `{name}` has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// θ, θ′, φ, ψ, ψ′ with their optimizers and counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub actor: Actor,
    pub delayed_actor: Actor,
    pub disc: Discriminator,
    pub critic: Critic,
    pub target_critic: Critic,
    pub adam_actor: AdamState,
    pub adam_disc: AdamState,
    pub adam_critic: AdamState,
    /// Parameters at the best validation NLL seen during actor pretraining.
    pub best_actor: Option<ParamStore>,
    pub counters: Counters,
}

const STORES: [&str; 5] = ["actor", "delayed_actor", "disc", "critic", "target_critic"];
const OPTIMIZERS: [&str; 3] = ["actor", "disc", "critic"];

impl TrainState {
    /// Fresh networks drawn from the init streams of `cfg.seed`. Delayed and
    /// target copies start equal to their sources.
    pub fn new(vocab_size: usize, cfg: &TrainConfig) -> Result<Self> {
        let actor = Actor::new(vocab_size, &cfg.actor, &mut stream(cfg.seed, INIT_ACTOR, 0))?;
        let critic = Critic::new(vocab_size, &cfg.critic, &mut stream(cfg.seed, INIT_CRITIC, 0))?;
        let disc = Discriminator::new(
            vocab_size,
            &cfg.discriminator,
            cfg.seq_len,
            &mut stream(cfg.seed, INIT_DISC, 0),
        )?;
        Ok(Self {
            adam_actor: AdamState::with_defaults(&actor.params),
            adam_disc: AdamState::with_defaults(&disc.params),
            adam_critic: AdamState::with_defaults(&critic.params),
            delayed_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            disc,
            critic,
            best_actor: None,
            counters: Counters::default(),
        })
    }

    fn store(&self, which: &str) -> &ParamStore {
        match which {
            "actor" => &self.actor.params,
            "delayed_actor" => &self.delayed_actor.params,
            "disc" => &self.disc.params,
            "critic" => &self.critic.params,
            _ => &self.target_critic.params,
        }
    }

    fn store_mut(&mut self, which: &str) -> &mut ParamStore {
        match which {
            "actor" => &mut self.actor.params,
            "delayed_actor" => &mut self.delayed_actor.params,
            "disc" => &mut self.disc.params,
            "critic" => &mut self.critic.params,
            _ => &mut self.target_critic.params,
        }
    }

    fn adam(&self, which: &str) -> &AdamState {
        match which {
            "actor" => &self.adam_actor,
            "disc" => &self.adam_disc,
            _ => &self.adam_critic,
        }
    }

    fn adam_mut(&mut self, which: &str) -> &mut AdamState {
        match which {
            "actor" => &mut self.adam_actor,
            "disc" => &mut self.adam_disc,
            _ => &mut self.adam_critic,
        }
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push_store = |prefix: &str, p: &ParamStore| {
            for id in p.ids() {
                out.push((format!("{prefix}/{}", p.name(id)), p.value(id).clone()));
            }
        };
        for s in STORES {
            push_store(s, self.store(s));
        }
        if let Some(best) = &self.best_actor {
            push_store("best_actor", best);
        }
        for o in OPTIMIZERS {
            let adam = self.adam(o);
            let params = self.store(o);
            out.push((
                format!("adam.{o}/meta"),
                Tensor::vector(vec![adam.beta1, adam.beta2, adam.eps, adam.steps() as f64]),
            ));
            for id in params.ids() {
                let i = id.index();
                out.push((
                    format!("adam.{o}/m/{}", params.name(id)),
                    adam.first_moments()[i].clone(),
                ));
                out.push((
                    format!("adam.{o}/v/{}", params.name(id)),
                    adam.second_moments()[i].clone(),
                ));
            }
        }
        out.push(("counters".into(), self.counters.to_tensor()));
        out
    }

    /// Overwrites every tensor of a state built from the same configuration.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let mut map: HashMap<String, Tensor> = records.into_iter().collect();
        let take = take_record;
        for s in STORES {
            let ids: Vec<_> = self.store(s).ids().collect();
            for id in ids {
                let name = format!("{s}/{}", self.store(s).name(id));
                let t = take(&mut map, &name, self.store(s).value(id).shape())?;
                *self.store_mut(s).value_mut(id) = t;
            }
        }
        let has_best = map.keys().any(|k| k.starts_with("best_actor/"));
        self.best_actor = if has_best {
            let mut best = self.actor.params.clone();
            for id in best.ids().collect::<Vec<_>>() {
                let t = take(
                    &mut map,
                    &format!("best_actor/{}", best.name(id)),
                    best.value(id).shape(),
                )?;
                *best.value_mut(id) = t;
            }
            Some(best)
        } else {
            None
        };
        for o in OPTIMIZERS {
            let meta = take(&mut map, &format!("adam.{o}/meta"), &[4])?;
            let params = self.store(o).clone();
            let mut first = Vec::new();
            let mut second = Vec::new();
            for id in params.ids() {
                let shape = params.value(id).shape();
                first.push(take(&mut map, &format!("adam.{o}/m/{}", params.name(id)), shape)?);
                second.push(take(&mut map, &format!("adam.{o}/v/{}", params.name(id)), shape)?);
            }
            let m = meta.data();
            *self.adam_mut(o) = AdamState::from_parts(&params, (m[0], m[1], m[2]), m[3] as u64, first, second)?;
        }
        self.counters = Counters::from_tensor(&take(&mut map, "counters", &[10])?)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected record `{extra}`")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(BufWriter::new(File::create(path)?), &self.to_records())
    }

    /// Rebuilds the layout from `cfg` and reads every tensor from `path`.
    pub fn load(path: &Path, vocab_size: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut state = Self::new(vocab_size, cfg)?;
        state.load_records(read_records(BufReader::new(File::open(path)?))?)?;
        Ok(state)
    }
}
