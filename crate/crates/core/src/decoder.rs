//! Joint multi-agent trajectory decoder.
//!
//! Future steps are decoded as time-major tokens (t, a) through a stack of
//! norm-free decoder layers cross-attending to the combined
//! trajectory/intention context and to the map tokens. Every token ends in a
//! small feed-forward head that emits a bivariate Gaussian for the next
//! step. Three regimes share the same parameters: teacher-forced (inputs are
//! ground-truth states), autoregressive (inputs are fed-back predictions),
//! and non-autoregressive (inputs carry no state at all, only time and
//! agent embeddings).

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::ModeConfig;
use crate::nn::{init_embedding, AttentionMask, DecoderMasks, Linear, TdlC};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tensor};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;
pub const RHO_SCALE: f64 = 0.99;

// ─── output types ───────────────────────────────────────────────────────────

/// Bivariate-Gaussian parameters per agent and future step, agent-major:
/// entry (a, t) = (mu_x, mu_y, sigma_x, sigma_y, rho).
#[derive(Clone, Debug)]
pub struct GaussianSeq {
    /// [A * T * 5]
    pub params: Vec<f64>,
    pub a: usize,
    pub t: usize,
}

impl GaussianSeq {
    pub fn new(params: Vec<f64>, a: usize, t: usize) -> Result<Self> {
        if params.len() != a * t * 5 {
            return Err(Error::Dimension(format!(
                "gaussian array length {} does not match {a}x{t}x5",
                params.len()
            )));
        }
        for (i, chunk) in params.chunks_exact(5).enumerate() {
            let (sx, sy, rho) = (chunk[2], chunk[3], chunk[4]);
            if !chunk.iter().all(|v| v.is_finite()) {
                return Err(Error::Contract(format!("gaussian {i} has non-finite entries")));
            }
            if sx <= 0.0 || sy <= 0.0 || rho.abs() >= 1.0 {
                return Err(Error::Contract(format!(
                    "gaussian {i} violates sigma>0, |rho|<1: ({sx}, {sy}, {rho})"
                )));
            }
        }
        Ok(GaussianSeq { params, a, t })
    }

    /// (mu_x, mu_y, sigma_x, sigma_y, rho) for agent `a` at future step `t`.
    pub fn get(&self, a: usize, t: usize) -> (f64, f64, f64, f64, f64) {
        let p = &self.params[(a * self.t + t) * 5..];
        (p[0], p[1], p[2], p[3], p[4])
    }
}

/// Decoded points with the mode assignment that conditioned them.
#[derive(Clone, Debug)]
pub struct TrajectorySample {
    /// [A * T * 2] agent-major.
    pub points: Vec<f64>,
    pub a: usize,
    pub t: usize,
    pub mode_config: ModeConfig,
}

impl TrajectorySample {
    pub fn point(&self, a: usize, t: usize) -> (f64, f64) {
        let base = (a * self.t + t) * 2;
        (self.points[base], self.points[base + 1])
    }
}

/// Raw head output for one decode, kept as a graph node so training can
/// differentiate through it. Rows are time-major: row t*A + a predicts
/// agent a's state at future step t.
pub struct DecodeOut {
    pub raw: Tensor,
    pub a: usize,
    pub t: usize,
}

impl DecodeOut {
    /// Squashed parameters [T*A, 5]: mu unchanged, sigma = clamp(exp(raw)),
    /// rho = 0.99 tanh(raw).
    pub fn squash(&self) -> Result<Tensor> {
        squash_raw(&self.raw)
    }

    /// Value-level Gaussians in agent-major layout.
    pub fn gaussians(&self) -> Result<GaussianSeq> {
        let sq = self.squash()?.value();
        let (a_n, t_n) = (self.a, self.t);
        let mut params = vec![0.0; a_n * t_n * 5];
        for t in 0..t_n {
            for a in 0..a_n {
                let src = (t * a_n + a) * 5;
                let dst = (a * t_n + t) * 5;
                params[dst..dst + 5].copy_from_slice(&sq[src..src + 5]);
            }
        }
        GaussianSeq::new(params, a_n, t_n)
    }
}

/// Map raw head rows (mu_x, mu_y, s_x, s_y, r) to valid Gaussian
/// parameters. Sigmas clamp to [1e-3, 1e3] with zero gradient at the
/// clamp; |rho| stays strictly below 1.
pub fn squash_raw(raw: &Tensor) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 2 || s[1] != 5 {
        return Err(Error::Dimension(format!("squash expects [n, 5], got {:?}", s)));
    }
    let mu = raw.narrow(1, 0, 2)?;
    let sx = raw.narrow(1, 2, 1)?.exp().clamp(SIGMA_MIN, SIGMA_MAX);
    let sy = raw.narrow(1, 3, 1)?.exp().clamp(SIGMA_MIN, SIGMA_MAX);
    let rho = raw.narrow(1, 4, 1)?.tanh().scale(RHO_SCALE);
    Tensor::concat(&[mu, sx, sy, rho], 1)
}

// ─── masks ──────────────────────────────────────────────────────────────────

/// Time-causal mask over time-major (t, a) tokens: token (t, a) may attend
/// every token (t', a') with t' <= t, across all agents.
pub fn build_time_causal_mask(a: usize, t: usize) -> Result<AttentionMask> {
    if a < 1 || t < 1 {
        return Err(Error::Dimension(format!("causal mask needs A, T >= 1, got {a}, {t}")));
    }
    let n = a * t;
    AttentionMask::from_fn(n, n, |q, k| k / a <= q / a)
}

// ─── decode inputs ──────────────────────────────────────────────────────────

/// Everything a decode pass needs besides parameters. `phi_prime` is the
/// concatenation of the trajectory context (first `n_traj_tokens` rows,
/// agent = index % a) and the intention tokens (agent = offset / k_modes).
pub struct DecodeInputs<'a> {
    pub phi_prime: &'a Tensor,
    /// Map token sequence; `None` runs the no-map variant.
    pub map: Option<&'a Tensor>,
    /// [A * 2] newest observed state per agent.
    pub current: &'a [f64],
    pub a: usize,
    pub valid: &'a [bool],
    pub n_traj_tokens: usize,
    pub k_modes: usize,
}

impl<'a> DecodeInputs<'a> {
    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.a < 1 || self.a > cfg.a_max {
            return Err(Error::Capacity(format!(
                "decode over {} agents outside capacity {}",
                self.a, cfg.a_max
            )));
        }
        if self.current.len() != self.a * 2 || self.valid.len() != self.a {
            return Err(Error::Dimension(format!(
                "decode inputs inconsistent: {} current values, {} valid flags for A={}",
                self.current.len(),
                self.valid.len(),
                self.a
            )));
        }
        let ctx_rows = self.phi_prime.shape()[0];
        if ctx_rows != self.n_traj_tokens + self.a * self.k_modes {
            return Err(Error::Dimension(format!(
                "context has {ctx_rows} rows, expected {} + {}",
                self.n_traj_tokens,
                self.a * self.k_modes
            )));
        }
        if cfg.use_map && self.map.is_none() {
            return Err(Error::Contract(
                "model is configured with a map but none was provided".into(),
            ));
        }
        Ok(())
    }

    /// Agent owning context key `k`, spanning both context segments.
    fn ctx_agent(&self, k: usize) -> usize {
        if k < self.n_traj_tokens {
            k % self.a
        } else {
            (k - self.n_traj_tokens) / self.k_modes
        }
    }
}

/// Point selection rule for the autoregressive feedback loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Select {
    Mean,
    Sample,
}

// ─── decoder ────────────────────────────────────────────────────────────────

pub struct Decoder {
    /// State embedding, separate parameters from the encoder's.
    pub state_embed: Linear,
    /// [T, d_m] learned time-position table.
    pub time_pos: Tensor,
    /// [a_max, d_m] agent-index table, used by the stateless regime.
    pub agent_embed: Tensor,
    pub layers: Vec<TdlC>,
    /// Feed-forward head, hidden layers then a final projection to 5.
    pub head: Vec<Linear>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let block_cfg = cfg.block_config()?;
        let state_embed = Linear::new(store, "dec.embed", 3, cfg.d_m, rng)?;
        let time_pos = store.add(
            "dec.time_pos",
            Tensor::param(init_embedding(rng, cfg.horizon * cfg.d_m), &[cfg.horizon, cfg.d_m])?,
        )?;
        let agent_embed = store.add(
            "dec.agent_embed",
            Tensor::param(init_embedding(rng, cfg.a_max * cfg.d_m), &[cfg.a_max, cfg.d_m])?,
        )?;
        let mut layers = Vec::with_capacity(cfg.i_dc);
        for i in 0..cfg.i_dc {
            layers.push(TdlC::new(&block_cfg, store, &format!("dec.layer{i}"), rng)?);
        }
        let mut head = Vec::with_capacity(cfg.head_layers);
        for i in 0..cfg.head_layers {
            let last = i + 1 == cfg.head_layers;
            let d_out = if last { 5 } else { cfg.d_m };
            head.push(Linear::new(store, &format!("dec.head{i}"), cfg.d_m, d_out, rng)?);
        }
        Ok(Decoder { state_embed, time_pos, agent_embed, layers, head })
    }

    fn head_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, lin) in self.head.iter().enumerate() {
            h = lin.forward(&h)?;
            if i + 1 != self.head.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Token embeddings for the state-fed regimes. `state_of(t, a)` supplies
    /// the input point for token (t, a); token states are embedded as
    /// (x, y, agent index) plus the time-position row.
    fn embed_tokens_from(
        &self,
        din: &DecodeInputs,
        steps: usize,
        state_of: &dyn Fn(usize, usize) -> (f64, f64),
    ) -> Result<Tensor> {
        let a = din.a;
        let n = steps * a;
        let mut rows = Vec::with_capacity(n * 3);
        let mut time_idx = Vec::with_capacity(n);
        for t in 0..steps {
            for ai in 0..a {
                let (x, y) = state_of(t, ai);
                rows.push(x);
                rows.push(y);
                rows.push(ai as f64);
                time_idx.push(t);
            }
        }
        let input = Tensor::from_vec(rows, &[n, 3])?;
        let emb = self.state_embed.forward(&input)?;
        emb.add(&self.time_pos.gather_rows(&time_idx)?)
    }

    /// Self-attention mask for `steps` decode steps. Causal regimes confine
    /// keys to earlier-or-equal steps; all regimes drop invalid agents and,
    /// with interaction off, other agents entirely.
    fn self_mask(
        &self,
        cfg: &ModelConfig,
        din: &DecodeInputs,
        steps: usize,
        causal: bool,
    ) -> Result<AttentionMask> {
        let a = din.a;
        let n = steps * a;
        AttentionMask::from_fn(n, n, |q, k| {
            let (qt, qa) = (q / a, q % a);
            let (kt, ka) = (k / a, k % a);
            let causal_ok = !causal || kt <= qt;
            let inter_ok = cfg.interaction || qa == ka;
            (din.valid[ka] && causal_ok && inter_ok) || q == k
        })
    }

    /// Cross-attention mask to phi_prime, or `None` when unrestricted.
    fn ctx_mask(
        &self,
        cfg: &ModelConfig,
        din: &DecodeInputs,
        steps: usize,
    ) -> Result<Option<AttentionMask>> {
        let all_valid = din.valid.iter().all(|&v| v);
        if cfg.interaction && all_valid {
            return Ok(None);
        }
        let a = din.a;
        let n_q = steps * a;
        let n_k = din.phi_prime.shape()[0];
        let mask = AttentionMask::from_fn(n_q, n_k, |q, k| {
            let qa = q % a;
            let ka = din.ctx_agent(k);
            // padded-agent queries keep key 0; their outputs are never read
            (din.valid[ka] && (cfg.interaction || qa == ka)) || (!din.valid[qa] && k == 0)
        })?;
        Ok(Some(mask))
    }

    /// One full pass through the layer stack and head: [steps*A, 5] raw rows.
    fn forward_stack(
        &self,
        cfg: &ModelConfig,
        din: &DecodeInputs,
        x0: Tensor,
        steps: usize,
        causal: bool,
    ) -> Result<Tensor> {
        let block_cfg = cfg.block_config()?;
        let self_mask = self.self_mask(cfg, din, steps, causal)?;
        let ctx_mask = self.ctx_mask(cfg, din, steps)?;
        let masks = DecoderMasks {
            self_mask: Some(&self_mask),
            ctx_a_mask: ctx_mask.as_ref(),
            ctx_b_mask: None,
        };
        let map_ctx = if cfg.use_map { din.map } else { None };
        let mut x = x0;
        for layer in &self.layers {
            x = layer.forward(&block_cfg, &x, din.phi_prime, map_ctx, &masks)?;
        }
        self.head_forward(&x)
    }

    /// Teacher-forced decode: token (t, a) carries the true state at step t
    /// (current state for t = 0) and predicts step t+1. `gt_future` is
    /// agent-major [A, T, 2].
    pub fn decode_teacher_forced(
        &self,
        cfg: &ModelConfig,
        din: &DecodeInputs,
        gt_future: &[f64],
    ) -> Result<DecodeOut> {
        din.validate(cfg)?;
        let (a, t_n) = (din.a, cfg.horizon);
        if gt_future.len() != a * t_n * 2 {
            return Err(Error::Dimension(format!(
                "future array length {} does not match {a}x{t_n}x2",
                gt_future.len()
            )));
        }
        let x0 = self.embed_tokens_from(din, t_n, &|t, ai| {
            if t == 0 {
                (din.current[ai * 2], din.current[ai * 2 + 1])
            } else {
                let base = (ai * t_n + (t - 1)) * 2;
                (gt_future[base], gt_future[base + 1])
            }
        })?;
        let raw = self.forward_stack(cfg, din, x0, t_n, true)?;
        Ok(DecodeOut { raw, a, t: t_n })
    }

    /// Autoregressive rollout: each step re-runs the causal stack over all
    /// tokens so far and feeds the selected point back as the next input.
    /// Feedback points enter as plain values. Returns the selected points
    /// (agent-major [A, T, 2]) alongside the raw head rows.
    pub fn decode_autoregressive(
        &self,
        cfg: &ModelConfig,
        din: &DecodeInputs,
        select: Select,
        seed: u64,
    ) -> Result<(Vec<f64>, DecodeOut)> {
        din.validate(cfg)?;
        let (a, t_n) = (din.a, cfg.horizon);
        let mut rng = Rng::new(seed);
        // fed[t][a] = input point for token (t, a); t = 0 is the current state
        let mut fed: Vec<(f64, f64)> = (0..a)
            .map(|ai| (din.current[ai * 2], din.current[ai * 2 + 1]))
            .collect();
        let mut points = vec![0.0; a * t_n * 2];
        let mut step_raws: Vec<Tensor> = Vec::with_capacity(t_n);
        for t in 0..t_n {
            let steps = t + 1;
            let fed_ref = &fed;
            let x0 = self.embed_tokens_from(din, steps, &|tt, ai| fed_ref[tt * a + ai])?;
            let raw = self.forward_stack(cfg, din, x0, steps, true)?;
            let last = raw.narrow(0, t * a, a)?;
            let sq = squash_raw(&last)?.value();
            for ai in 0..a {
                let g = &sq[ai * 5..(ai + 1) * 5];
                let (x, y) = match select {
                    Select::Mean => (g[0], g[1]),
                    Select::Sample => sample_bivariate(&mut rng, g[0], g[1], g[2], g[3], g[4]),
                };
                let base = (ai * t_n + t) * 2;
                points[base] = x;
                points[base + 1] = y;
                if t + 1 < t_n {
                    fed.push((x, y));
                }
            }
            step_raws.push(last);
        }
        let raw = Tensor::concat(&step_raws, 0)?;
        Ok((points, DecodeOut { raw, a, t: t_n }))
    }

    /// Stateless decode: inputs are time-position plus agent-index
    /// embeddings only, full (non-causal) self-attention, one pass.
    pub fn decode_non_autoregressive(
        &self,
        cfg: &ModelConfig,
        din: &DecodeInputs,
    ) -> Result<DecodeOut> {
        din.validate(cfg)?;
        let (a, t_n) = (din.a, cfg.horizon);
        let n = t_n * a;
        let mut time_idx = Vec::with_capacity(n);
        let mut agent_idx = Vec::with_capacity(n);
        for t in 0..t_n {
            for ai in 0..a {
                time_idx.push(t);
                agent_idx.push(ai);
            }
        }
        let x0 = self
            .time_pos
            .gather_rows(&time_idx)?
            .add(&self.agent_embed.gather_rows(&agent_idx)?)?;
        let raw = self.forward_stack(cfg, din, x0, t_n, false)?;
        Ok(DecodeOut { raw, a, t: t_n })
    }
}

/// Draw from a bivariate Gaussian via its Cholesky factor.
pub fn sample_bivariate(
    rng: &mut Rng,
    mu_x: f64,
    mu_y: f64,
    sx: f64,
    sy: f64,
    rho: f64,
) -> (f64, f64) {
    let z1 = rng.normal();
    let z2 = rng.normal();
    let x = mu_x + sx * z1;
    let y = mu_y + sy * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
    (x, y)
}
