//! Discrete intention latent.
//!
//! Each agent carries one of K modes. A mode assignment is embedded as A*K
//! two-valued tokens (one-hot bit, agent index) and appended to the
//! trajectory context. The learned prior over modes runs K learnable query
//! vectors per agent through normalized decoder layers against the
//! trajectory and map contexts, then reads one logit per (agent, mode) pair
//! and normalizes over modes within each agent.

use crate::config::ModelConfig;
use crate::encoder::ContextEncoding;
use crate::error::{Error, Result};
use crate::map_encoder::MapTokens;
use crate::nn::{init_embedding, AttentionMask, DecoderMasks, Linear, TdlD};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tensor};

// ─── mode assignment ────────────────────────────────────────────────────────

/// One discrete mode per agent, each in [0, K).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeConfig {
    pub modes: Vec<usize>,
    pub k: usize,
}

impl ModeConfig {
    pub fn new(modes: Vec<usize>, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Contract("mode count must be at least 1".into()));
        }
        if let Some(&bad) = modes.iter().find(|&&m| m >= k) {
            return Err(Error::Contract(format!("mode index {bad} out of range for K={k}")));
        }
        if modes.is_empty() {
            return Err(Error::Contract("mode assignment needs at least one agent".into()));
        }
        Ok(ModeConfig { modes, k })
    }

    pub fn a(&self) -> usize {
        self.modes.len()
    }
}

/// Per-agent categorical distribution over the K modes.
#[derive(Clone, Debug)]
pub struct ModePrior {
    /// [A * K] row-major.
    pub probs: Vec<f64>,
    pub a: usize,
    pub k: usize,
}

impl ModePrior {
    pub fn new(probs: Vec<f64>, a: usize, k: usize) -> Result<Self> {
        if probs.len() != a * k {
            return Err(Error::Dimension(format!(
                "prior length {} does not match {a}x{k}",
                probs.len()
            )));
        }
        for ai in 0..a {
            let row = &probs[ai * k..(ai + 1) * k];
            if row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::Contract(format!("prior row {ai} leaves [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("prior row {ai} sums to {s}")));
            }
        }
        Ok(ModePrior { probs, a, k })
    }

    pub fn prob(&self, a: usize, k: usize) -> f64 {
        self.probs[a * self.k + k]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.probs[a * self.k..(a + 1) * self.k]
    }
}

// ─── intention embedding ────────────────────────────────────────────────────

/// Projects the A*K literal intention tokens to model width.
pub struct IntentionEmbed {
    pub proj: Linear,
    /// [K, d_m] learned embedding of the mode slot. Within one agent the K
    /// raw tokens are identical except for the selection bit, so without a
    /// slot marker attention treats a change of mode as a permutation of
    /// equal key/value rows and the decode cannot depend on which mode was
    /// chosen. Adding the slot embedding makes the K rows distinguishable.
    pub mode_pos: Tensor,
}

impl IntentionEmbed {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        Ok(IntentionEmbed {
            proj: Linear::new(store, "intent.proj", 2, cfg.d_m, rng)?,
            mode_pos: store.add(
                "intent.mode_pos",
                Tensor::param(
                    init_embedding(rng, cfg.k_modes * cfg.d_m),
                    &[cfg.k_modes, cfg.d_m],
                )?,
            )?,
        })
    }

    /// Raw 2-wide token rows before projection: token (a, k) carries
    /// (one-hot bit, agent index).
    pub fn token_rows(z: &ModeConfig) -> Vec<f64> {
        let mut rows = Vec::with_capacity(z.a() * z.k * 2);
        for (a, &m) in z.modes.iter().enumerate() {
            for k in 0..z.k {
                rows.push(if k == m { 1.0 } else { 0.0 });
                rows.push(a as f64);
            }
        }
        rows
    }

    /// phi_intention: [A*K, d_m].
    pub fn forward(&self, z: &ModeConfig) -> Result<Tensor> {
        let n = z.a() * z.k;
        let input = Tensor::from_vec(Self::token_rows(z), &[n, 2])?;
        let slots: Vec<usize> = (0..n).map(|r| r % z.k).collect();
        self.proj
            .forward(&input)?
            .add(&self.mode_pos.gather_rows(&slots)?)
    }
}

// ─── mode prior network ─────────────────────────────────────────────────────

pub struct ModePriorNet {
    /// [K, query_dim] learnable query vectors, shared across agents.
    pub queries: Tensor,
    pub input_proj: Linear,
    pub layers: Vec<TdlD>,
    pub head1: Linear,
    pub head2: Linear,
}

impl ModePriorNet {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let block_cfg = cfg.block_config()?;
        let queries = store.add(
            "prior.queries",
            Tensor::param(
                init_embedding(rng, cfg.k_modes * cfg.prior_query_dim),
                &[cfg.k_modes, cfg.prior_query_dim],
            )?,
        )?;
        let input_proj = Linear::new(
            store,
            "prior.input",
            cfg.prior_query_dim + 1,
            cfg.d_m,
            rng,
        )?;
        let mut layers = Vec::with_capacity(cfg.i_dd);
        for i in 0..cfg.i_dd {
            layers.push(TdlD::new(&block_cfg, store, &format!("prior.layer{i}"), rng)?);
        }
        let head1 = Linear::new(store, "prior.head1", cfg.d_m, cfg.d_m, rng)?;
        let head2 = Linear::new(store, "prior.head2", cfg.d_m, 1, rng)?;
        Ok(ModePriorNet { queries, input_proj, layers, head1, head2 })
    }

    /// Per-(agent, mode) logits [A, K], differentiable down to the queries.
    pub fn logits(
        &self,
        cfg: &ModelConfig,
        ctx: &ContextEncoding,
        map: Option<&MapTokens>,
    ) -> Result<Tensor> {
        let (a, k) = (ctx.a, cfg.k_modes);
        let map_ctx = match (cfg.use_map, map) {
            (true, Some(m)) => Some(&m.phi_map),
            (true, None) => {
                return Err(Error::Contract(
                    "model is configured with a map but none was provided".into(),
                ))
            }
            (false, _) => None,
        };
        // A*K query tokens: P_k rows repeated per agent, agent index appended
        let rep: Vec<usize> = (0..a * k).map(|i| i % k).collect();
        let p_rep = self.queries.gather_rows(&rep)?;
        let idx_col: Vec<f64> = (0..a * k).map(|i| (i / k) as f64).collect();
        let idx = Tensor::from_vec(idx_col, &[a * k, 1])?;
        let x0 = self.input_proj.forward(&Tensor::concat(&[p_rep, idx], 1)?)?;

        // masks: intention queries are agent-tagged, so the interaction
        // ablation confines them (and their trajectory keys) per agent
        let agent_of_q = |q: usize| q / k;
        // padded-agent query rows keep one key so no row is left keyless;
        // their outputs are never read
        let self_mask = AttentionMask::from_fn(a * k, a * k, |q, key| {
            let (qa, ka) = (agent_of_q(q), agent_of_q(key));
            (ctx.valid[ka] && (cfg.interaction || qa == ka)) || q == key
        })?;
        let n_ctx = ctx.phi_s.shape()[0];
        let ctx_mask = AttentionMask::from_fn(a * k, n_ctx, |q, key| {
            let (qa, ka) = (agent_of_q(q), key % a);
            (ctx.valid[ka] && (cfg.interaction || qa == ka))
                || (!ctx.valid[qa] && key == 0)
        })?;
        let masks = DecoderMasks {
            self_mask: Some(&self_mask),
            ctx_a_mask: Some(&ctx_mask),
            ctx_b_mask: None,
        };
        let block_cfg = cfg.block_config()?;
        let mut x = x0;
        for layer in &self.layers {
            x = layer.forward(&block_cfg, &x, &ctx.phi_s, map_ctx, &masks)?;
        }
        let h = self.head1.forward(&x)?.relu();
        self.head2.forward(&h)?.reshape(&[a, k])
    }

    /// Per-agent probabilities [A, K], rows summing to one.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        ctx: &ContextEncoding,
        map: Option<&MapTokens>,
    ) -> Result<Tensor> {
        self.logits(cfg, ctx, map)?.softmax(1)
    }

    /// Differentiable per-agent log-probabilities [A, K].
    pub fn log_probs(
        &self,
        cfg: &ModelConfig,
        ctx: &ContextEncoding,
        map: Option<&MapTokens>,
    ) -> Result<Tensor> {
        log_softmax_rows(&self.logits(cfg, ctx, map)?)
    }

    pub fn prior(
        &self,
        cfg: &ModelConfig,
        ctx: &ContextEncoding,
        map: Option<&MapTokens>,
    ) -> Result<ModePrior> {
        let probs = self.forward(cfg, ctx, map)?;
        ModePrior::new(probs.value(), ctx.a, cfg.k_modes)
    }
}

// ─── numerics ───────────────────────────────────────────────────────────────

/// Row-wise log-softmax for a rank-2 tensor, stable under large logits.
/// The per-row max is treated as a constant shift.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("log_softmax_rows expects rank 2, got {:?}", s)));
    }
    let (n, d) = (s[0], s[1]);
    let v = x.value();
    let mut shift = vec![0.0; n * d];
    for r in 0..n {
        let m = v[r * d..(r + 1) * d]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        for c in 0..d {
            shift[r * d + c] = m;
        }
    }
    let shifted = x.sub(&Tensor::from_vec(shift, &[n, d])?)?;
    let e = shifted.exp();
    let ones_col = Tensor::from_vec(vec![1.0; d], &[d, 1])?;
    let row_sums = e.matmul(&ones_col)?; // [n, 1]
    let log_sums = row_sums.ln();
    let ones_row = Tensor::from_vec(vec![1.0; d], &[1, d])?;
    shifted.sub(&log_sums.matmul(&ones_row)?)
}

/// Mixture evidence: sum over agents of
/// log sum_k exp(-nll[a,k] + log prior[a,k]), via log-sum-exp.
pub fn log_marginal(nll_per_mode: &[f64], prior: &ModePrior) -> Result<f64> {
    if nll_per_mode.len() != prior.a * prior.k {
        return Err(Error::Dimension(format!(
            "nll length {} does not match {}x{}",
            nll_per_mode.len(),
            prior.a,
            prior.k
        )));
    }
    if nll_per_mode.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("per-mode likelihood contains non-finite values".into()));
    }
    let mut total = 0.0;
    for a in 0..prior.a {
        let terms: Vec<f64> = (0..prior.k)
            .map(|k| -nll_per_mode[a * prior.k + k] + prior.prob(a, k).ln())
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        total += m + sum.ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ObservationBatch, TrajectoryEncoder};
    use crate::oracle;

    fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::small();
        c.d_m = 16;
        c.heads = 2;
        c.i_e = 1;
        c.i_dd = 1;
        c.k_modes = 4;
        c.use_map = false;
        c
    }

    fn tiny_ctx(cfg: &ModelConfig, store: &mut ParamStore, seed: u64, a: usize) -> ContextEncoding {
        let mut rng = Rng::new(seed);
        let enc = TrajectoryEncoder::new(cfg, store, &mut rng).unwrap();
        let mut states = Vec::new();
        for ai in 0..a {
            for t in 0..=cfg.tau {
                states.push(ai as f64 + 0.1 * t as f64);
                states.push(t as f64 * 0.3);
            }
        }
        let obs = ObservationBatch::new(states, a, cfg.tau, vec![true; a]).unwrap();
        enc.encode(cfg, &obs).unwrap()
    }

    #[test]
    fn two_agents_twelve_modes_give_24_tokens() {
        let mut cfg = tiny_cfg();
        cfg.k_modes = 12;
        let mut store = ParamStore::new();
        let emb = IntentionEmbed::new(&cfg, &mut store, &mut Rng::new(1)).unwrap();
        let z = ModeConfig::new(vec![3, 7], 12).unwrap();
        let out = emb.forward(&z).unwrap();
        assert_eq!(out.shape(), vec![24, 16]);
    }

    #[test]
    fn changing_the_mode_moves_exactly_one_bit() {
        let z0 = ModeConfig::new(vec![0], 3).unwrap();
        let z1 = ModeConfig::new(vec![1], 3).unwrap();
        let r0 = IntentionEmbed::token_rows(&z0);
        let r1 = IntentionEmbed::token_rows(&z1);
        // 3 tokens of (bit, index); only the bit entries of tokens 0 and 1 move
        assert_eq!(r0, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(r1, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn same_mode_different_agents_embed_differently() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let emb = IntentionEmbed::new(&cfg, &mut store, &mut Rng::new(2)).unwrap();
        let z = ModeConfig::new(vec![1, 1], 4).unwrap();
        let out = emb.forward(&z).unwrap().value();
        let d = cfg.d_m;
        // token (a=0, k=1) is row 1; token (a=1, k=1) is row 5
        assert_ne!(&out[d..2 * d], &out[5 * d..6 * d]);
    }

    #[test]
    fn mode_change_is_not_a_row_permutation() {
        // If switching the active mode merely permuted equal rows, any
        // permutation-invariant consumer (attention over keys and values)
        // would be blind to the choice. The slot embedding must break this.
        let mut cfg = tiny_cfg();
        cfg.k_modes = 2;
        let mut store = ParamStore::new();
        let emb = IntentionEmbed::new(&cfg, &mut store, &mut Rng::new(4)).unwrap();
        let r0 = emb
            .forward(&ModeConfig::new(vec![0], 2).unwrap())
            .unwrap()
            .value();
        let r1 = emb
            .forward(&ModeConfig::new(vec![1], 2).unwrap())
            .unwrap()
            .value();
        let d = cfg.d_m;
        // The selected row changes in place...
        assert_ne!(&r0[..d], &r1[..d]);
        // ...and does not simply reappear in the other slot.
        assert_ne!(&r0[..d], &r1[d..]);
    }

    #[test]
    fn mode_out_of_range_is_contract_error() {
        let err = ModeConfig::new(vec![0, 4], 4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn prior_rows_are_distributions() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let ctx = tiny_ctx(&cfg, &mut store, 3, 3);
        let net = ModePriorNet::new(&cfg, &mut store, &mut Rng::new(4)).unwrap();
        let probs = net.forward(&cfg, &ctx, None).unwrap();
        assert_eq!(probs.shape(), vec![3, 4]);
        let v = probs.value();
        for a in 0..3 {
            let s: f64 = v[a * 4..(a + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {a} sums to {s}");
            assert!(v[a * 4..(a + 1) * 4].iter().all(|&p| p > 0.0));
        }
        // the ModePrior constructor accepts it
        net.prior(&cfg, &ctx, None).unwrap();
    }

    #[test]
    fn zeroed_final_head_layer_gives_uniform_rows() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let ctx = tiny_ctx(&cfg, &mut store, 5, 2);
        let net = ModePriorNet::new(&cfg, &mut store, &mut Rng::new(6)).unwrap();
        net.head2.w.set_data(vec![0.0; cfg.d_m]);
        net.head2.b.set_data(vec![0.0]);
        let probs = net.forward(&cfg, &ctx, None).unwrap().value();
        let u = 1.0 / cfg.k_modes as f64;
        assert!(probs.iter().all(|&p| p == u), "{probs:?}");
    }

    #[test]
    fn prior_gradients_reach_the_queries() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let ctx = tiny_ctx(&cfg, &mut store, 7, 2);
        let net = ModePriorNet::new(&cfg, &mut store, &mut Rng::new(8)).unwrap();
        let mut rng = Rng::new(9);
        let weights: Vec<f64> = (0..2 * cfg.k_modes).map(|_| rng.normal()).collect();
        let named: Vec<(&str, &Tensor)> = vec![
            ("queries", &net.queries),
            ("input.w", &net.input_proj.w),
            ("head1.w", &net.head1.w),
        ];
        let report = oracle::check_gradients(
            &named,
            &|| net.forward(&cfg, &ctx, None)?.dot_const(&weights),
            1e-5,
            6,
            &mut Rng::new(10),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "worst {:?} rel err {}",
            report.worst,
            report.max_rel_err
        );
    }

    #[test]
    fn interaction_off_prior_ignores_other_agents() {
        let mut cfg = tiny_cfg();
        cfg.interaction = false;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let enc = TrajectoryEncoder::new(&cfg, &mut store, &mut rng).unwrap();
        let net = ModePriorNet::new(&cfg, &mut store, &mut rng).unwrap();
        let mk_obs = |shift: f64| {
            let mut states = Vec::new();
            for ai in 0..2usize {
                for t in 0..=cfg.tau {
                    let s = if ai == 1 { shift } else { 0.0 };
                    states.push(ai as f64 + s);
                    states.push(t as f64 * 0.3);
                }
            }
            ObservationBatch::new(states, 2, cfg.tau, vec![true, true]).unwrap()
        };
        let p0 = net
            .forward(&cfg, &enc.encode(&cfg, &mk_obs(0.0)).unwrap(), None)
            .unwrap()
            .value();
        let p1 = net
            .forward(&cfg, &enc.encode(&cfg, &mk_obs(4.0)).unwrap(), None)
            .unwrap()
            .value();
        // agent 0's row must be bit-identical despite agent 1 moving
        assert_eq!(&p0[0..4], &p1[0..4]);
        assert_ne!(&p0[4..8], &p1[4..8]);
    }

    #[test]
    fn log_softmax_matches_direct_form_and_shifts() {
        let mut rng = Rng::new(12);
        let data: Vec<f64> = (0..12).map(|_| rng.range(-3.0, 3.0)).collect();
        let x = Tensor::from_vec(data.clone(), &[3, 4]).unwrap();
        let ls = log_softmax_rows(&x).unwrap().value();
        for r in 0..3 {
            let sm = oracle::naive_softmax(&data[r * 4..(r + 1) * 4]);
            for c in 0..4 {
                assert!((ls[r * 4 + c] - sm[c].ln()).abs() < 1e-12);
            }
        }
        // exp rows sum to one
        for r in 0..3 {
            let s: f64 = ls[r * 4..(r + 1) * 4].iter().map(|&v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // huge logits stay finite
        let big = Tensor::from_vec(vec![1e6, 1e6 - 1.0], &[1, 2]).unwrap();
        assert!(log_softmax_rows(&big).unwrap().value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_gradient_check() {
        let mut rng = Rng::new(13);
        let x = Tensor::param((0..8).map(|_| rng.range(-2.0, 2.0)).collect(), &[2, 4]).unwrap();
        let weights: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let report = oracle::check_gradients(
            &[("x", &x)],
            &|| log_softmax_rows(&x)?.dot_const(&weights),
            1e-6,
            8,
            &mut Rng::new(14),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    #[test]
    fn log_marginal_degenerate_single_mode() {
        let prior = ModePrior::new(vec![1.0], 1, 1).unwrap();
        let got = log_marginal(&[2.5], &prior).unwrap();
        assert!((got - (-2.5)).abs() < 1e-15);
    }

    #[test]
    fn log_marginal_equal_components_collapse() {
        // K modes with identical likelihood L and uniform prior -> log L
        let prior = ModePrior::new(vec![0.25; 4], 1, 4).unwrap();
        let got = log_marginal(&[2.0; 4], &prior).unwrap();
        assert!((got - (-2.0)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn log_marginal_matches_naive_mixture() {
        let mut rng = Rng::new(15);
        let w = vec![0.5, 0.3, 0.2];
        let prior = ModePrior::new(w.clone(), 1, 3).unwrap();
        let nll: Vec<f64> = (0..3).map(|_| rng.range(0.5, 6.0)).collect();
        let direct: f64 = (0..3).map(|k| w[k] * (-nll[k]).exp()).sum::<f64>().ln();
        let got = log_marginal(&nll, &prior).unwrap();
        assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
    }

    #[test]
    fn log_marginal_shift_invariance() {
        let mut rng = Rng::new(16);
        let a = 3;
        let k = 4;
        let mut probs = Vec::new();
        for _ in 0..a {
            let raw: Vec<f64> = (0..k).map(|_| rng.range(0.1, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            // normalize then repair the last entry so the row sums exactly
            let mut row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let partial: f64 = row[..k - 1].iter().sum();
            row[k - 1] = 1.0 - partial;
            probs.extend(row);
        }
        let prior = ModePrior::new(probs, a, k).unwrap();
        let nll: Vec<f64> = (0..a * k).map(|_| rng.range(0.0, 8.0)).collect();
        let base = log_marginal(&nll, &prior).unwrap();
        let c = 3.7;
        // raising every log-likelihood by c means lowering every nll by c
        let shifted: Vec<f64> = nll.iter().map(|v| v - c).collect();
        let got = log_marginal(&shifted, &prior).unwrap();
        assert!(
            (got - (base + a as f64 * c)).abs() < 1e-10,
            "{got} vs {}",
            base + a as f64 * c
        );
    }
}
