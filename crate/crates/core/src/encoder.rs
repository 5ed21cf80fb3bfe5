//! Trajectory encoder: embeds every agent's observed track into the shared
//! context sequence phi_S.
//!
//! Each observed state becomes the 3-vector (x, y, agent index), projected by
//! one shared linear layer, plus a learned per-time-step position embedding.
//! Tokens are ordered time-major: token p = t * A + a. A stack of encoder
//! blocks with full self-attention across all agent-time tokens produces the
//! context; padded agent slots are masked out of the keys.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_embedding, AttentionMask, Linear, TeBlock};
use crate::rng::Rng;
use crate::scene::Scene;
use crate::tensor::{ParamStore, Tensor};

/// Observed tracks for one scene, possibly with padded agent slots.
#[derive(Clone, Debug)]
pub struct ObservationBatch {
    /// [A * (tau+1) * 2] agent-major: agent a's states at rows
    /// a*(tau+1)..(a+1)*(tau+1), each (x, y), oldest first.
    pub states: Vec<f64>,
    pub a: usize,
    pub tau: usize,
    /// Valid flag per agent slot; padded slots take no part in attention.
    pub valid: Vec<bool>,
}

impl ObservationBatch {
    pub fn new(states: Vec<f64>, a: usize, tau: usize, valid: Vec<bool>) -> Result<Self> {
        if a < 1 {
            return Err(Error::Contract("observation needs at least one agent".into()));
        }
        if states.len() != a * (tau + 1) * 2 || valid.len() != a {
            return Err(Error::Dimension(format!(
                "observation arrays inconsistent: {} states, {} valid flags for A={}, tau={}",
                states.len(),
                valid.len(),
                a,
                tau
            )));
        }
        if !states.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("observation contains non-finite values".into()));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract("observation has no valid agents".into()));
        }
        Ok(ObservationBatch { states, a, tau, valid })
    }

    pub fn from_scene(scene: &Scene, cfg: &ModelConfig) -> Result<Self> {
        if scene.agents.len() > cfg.a_max {
            return Err(Error::Capacity(format!(
                "scene {} has {} agents, model capacity is {}",
                scene.id,
                scene.agents.len(),
                cfg.a_max
            )));
        }
        let a = scene.agents.len();
        let mut states = Vec::with_capacity(a * (cfg.tau + 1) * 2);
        for agent in &scene.agents {
            if agent.past.len() != cfg.tau + 1 {
                return Err(Error::Dimension(format!(
                    "scene {} agent {} past length {} != {}",
                    scene.id,
                    agent.id,
                    agent.past.len(),
                    cfg.tau + 1
                )));
            }
            for p in &agent.past {
                states.push(p[0]);
                states.push(p[1]);
            }
        }
        ObservationBatch::new(states, a, cfg.tau, vec![true; a])
    }

    /// State (x, y) of agent `a` at past index `t` (0 = oldest).
    pub fn state(&self, a: usize, t: usize) -> (f64, f64) {
        let base = (a * (self.tau + 1) + t) * 2;
        (self.states[base], self.states[base + 1])
    }

    pub fn n_tokens(&self) -> usize {
        self.a * (self.tau + 1)
    }
}

/// Encoded context plus the token layout it was produced under.
pub struct ContextEncoding {
    /// [A*(tau+1), d_m], time-major tokens.
    pub phi_s: Tensor,
    pub a: usize,
    pub tau: usize,
    pub valid: Vec<bool>,
}

impl ContextEncoding {
    /// Token position of (time t, agent a) under time-major order.
    pub fn token_of(&self, t: usize, a: usize) -> usize {
        t * self.a + a
    }

    /// Inverse mapping: token position to (time, agent).
    pub fn ta_of(&self, token: usize) -> (usize, usize) {
        (token / self.a, token % self.a)
    }
}

pub struct TrajectoryEncoder {
    pub embed: Linear,
    /// [tau+1, d_m] learned time-position table.
    pub time_pos: Tensor,
    pub blocks: Vec<TeBlock>,
}

impl TrajectoryEncoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let block_cfg = cfg.block_config()?;
        let embed = Linear::new(store, "traj.embed", 3, cfg.d_m, rng)?;
        let time_pos = store.add(
            "traj.time_pos",
            Tensor::param(
                init_embedding(rng, (cfg.tau + 1) * cfg.d_m),
                &[cfg.tau + 1, cfg.d_m],
            )?,
        )?;
        let mut blocks = Vec::with_capacity(cfg.i_e);
        for i in 0..cfg.i_e {
            blocks.push(TeBlock::new(&block_cfg, store, &format!("traj.block{i}"), rng)?);
        }
        Ok(TrajectoryEncoder { embed, time_pos, blocks })
    }

    /// Token embeddings before any attention: shared linear over (x, y, a)
    /// plus the time-position row, in time-major order.
    pub fn embed_states(&self, cfg: &ModelConfig, obs: &ObservationBatch) -> Result<Tensor> {
        if obs.a > cfg.a_max {
            return Err(Error::Capacity(format!(
                "observation has {} agents, model capacity is {}",
                obs.a, cfg.a_max
            )));
        }
        if obs.tau != cfg.tau {
            return Err(Error::Dimension(format!(
                "observation tau {} does not match model tau {}",
                obs.tau, cfg.tau
            )));
        }
        let n = obs.n_tokens();
        let mut rows = Vec::with_capacity(n * 3);
        let mut time_idx = Vec::with_capacity(n);
        for t in 0..=obs.tau {
            for a in 0..obs.a {
                let (x, y) = obs.state(a, t);
                rows.push(x);
                rows.push(y);
                rows.push(a as f64);
                time_idx.push(t);
            }
        }
        let input = Tensor::from_vec(rows, &[n, 3])?;
        let projected = self.embed.forward(&input)?;
        let pos = self.time_pos.gather_rows(&time_idx)?;
        projected.add(&pos)
    }

    /// Self-attention mask over the token grid: padded agents are excluded
    /// as keys; with interaction off, agents only attend to themselves.
    pub fn attention_mask(cfg: &ModelConfig, obs: &ObservationBatch) -> Result<AttentionMask> {
        let n = obs.n_tokens();
        let a = obs.a;
        let interaction = cfg.interaction;
        AttentionMask::from_fn(n, n, |q, k| {
            let (qa, ka) = (q % a, k % a);
            // padded-agent queries self-attend so no row is left keyless;
            // their outputs are never read
            (obs.valid[ka] && (interaction || qa == ka)) || q == k
        })
    }

    pub fn encode(&self, cfg: &ModelConfig, obs: &ObservationBatch) -> Result<ContextEncoding> {
        let block_cfg = cfg.block_config()?;
        let mask = Self::attention_mask(cfg, obs)?;
        let mut x = self.embed_states(cfg, obs)?;
        for b in &self.blocks {
            x = b.forward(&block_cfg, &x, Some(&mask))?;
        }
        Ok(ContextEncoding {
            phi_s: x,
            a: obs.a,
            tau: obs.tau,
            valid: obs.valid.clone(),
        })
    }
}
