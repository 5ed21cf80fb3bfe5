//! The assembled predictor: trajectory encoder, map encoder, intention
//! embedding, mode prior, and decoder sharing one parameter store.
//!
//! Parameter construction order is fixed (trajectory, map, intention,
//! prior, decoder) so checkpoints have a stable layout. The map parameters
//! are always constructed, even for the no-map variant, which keeps layouts
//! interchangeable across ablations and makes shared components start from
//! identical initializations under the same seed.

use crate::config::ModelConfig;
use crate::decoder::{DecodeInputs, DecodeOut, Decoder, Select, TrajectorySample};
use crate::encoder::{ContextEncoding, ObservationBatch, TrajectoryEncoder};
use crate::error::{Error, Result};
use crate::latent::{IntentionEmbed, ModeConfig, ModePrior, ModePriorNet};
use crate::map_encoder::{MapEncoder, MapTokens};
use crate::rng::Rng;
use crate::scene::Scene;
use crate::tensor::{ParamStore, Tensor};

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub traj: TrajectoryEncoder,
    pub map: MapEncoder,
    pub intent: IntentionEmbed,
    pub prior: ModePriorNet,
    pub dec: Decoder,
}

/// Everything derived from one scene that decoding needs: the observation,
/// its encoding, the map tokens, and the newest state per agent.
pub struct SceneContext {
    pub obs: ObservationBatch,
    pub ctx: ContextEncoding,
    pub map: Option<MapTokens>,
    /// [A * 2] newest observed state per agent.
    pub current: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, 2);
        let traj = TrajectoryEncoder::new(&cfg, &mut store, &mut rng)?;
        let map = MapEncoder::new(&cfg, &mut store, &mut rng)?;
        let intent = IntentionEmbed::new(&cfg, &mut store, &mut rng)?;
        let prior = ModePriorNet::new(&cfg, &mut store, &mut rng)?;
        let dec = Decoder::new(&cfg, &mut store, &mut rng)?;
        Ok(Model { cfg, store, traj, map, intent, prior, dec })
    }

    /// Check a scene against the model's time axes before any tensor work.
    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        for agent in &scene.agents {
            if agent.past.len() != self.cfg.tau + 1 {
                return Err(Error::Config(format!(
                    "scene {} agent {} has past length {}, model expects {}",
                    scene.id,
                    agent.id,
                    agent.past.len(),
                    self.cfg.tau + 1
                )));
            }
            if agent.future.len() != self.cfg.horizon {
                return Err(Error::Config(format!(
                    "scene {} agent {} has future length {}, model expects {}",
                    scene.id,
                    agent.id,
                    agent.future.len(),
                    self.cfg.horizon
                )));
            }
        }
        Ok(())
    }

    /// Run both encoders over one scene.
    pub fn encode_scene(&self, scene: &Scene) -> Result<SceneContext> {
        self.check_scene(scene)?;
        let obs = ObservationBatch::from_scene(scene, &self.cfg)?;
        let ctx = self.traj.encode(&self.cfg, &obs)?;
        let map = if self.cfg.use_map {
            Some(self.map.encode(&self.cfg, &scene.mask)?)
        } else {
            None
        };
        let mut current = Vec::with_capacity(obs.a * 2);
        for a in 0..obs.a {
            let (x, y) = obs.state(a, self.cfg.tau);
            current.push(x);
            current.push(y);
        }
        Ok(SceneContext { obs, ctx, map, current })
    }

    /// Combined context: trajectory tokens followed by intention tokens.
    pub fn phi_prime(&self, sc: &SceneContext, z: &ModeConfig) -> Result<Tensor> {
        if z.k != self.cfg.k_modes || z.a() != sc.obs.a {
            return Err(Error::Dimension(format!(
                "mode assignment {}x{} does not match scene {}x{}",
                z.a(),
                z.k,
                sc.obs.a,
                self.cfg.k_modes
            )));
        }
        let phi_intent = self.intent.forward(z)?;
        Tensor::concat(&[sc.ctx.phi_s.clone(), phi_intent], 0)
    }

    fn decode_inputs<'a>(&self, sc: &'a SceneContext, phi: &'a Tensor) -> DecodeInputs<'a> {
        DecodeInputs {
            phi_prime: phi,
            map: sc.map.as_ref().map(|m| &m.phi_map),
            current: &sc.current,
            a: sc.obs.a,
            valid: &sc.obs.valid,
            n_traj_tokens: sc.obs.n_tokens(),
            k_modes: self.cfg.k_modes,
        }
    }

    /// Teacher-forced decode under one mode assignment. `gt_future` is
    /// agent-major [A, T, 2].
    pub fn decode_tf(&self, sc: &SceneContext, z: &ModeConfig, gt_future: &[f64]) -> Result<DecodeOut> {
        let phi = self.phi_prime(sc, z)?;
        self.dec
            .decode_teacher_forced(&self.cfg, &self.decode_inputs(sc, &phi), gt_future)
    }

    /// Autoregressive rollout under one mode assignment.
    pub fn decode_ar(
        &self,
        sc: &SceneContext,
        z: &ModeConfig,
        select: Select,
        seed: u64,
    ) -> Result<(Vec<f64>, DecodeOut)> {
        let phi = self.phi_prime(sc, z)?;
        self.dec
            .decode_autoregressive(&self.cfg, &self.decode_inputs(sc, &phi), select, seed)
    }

    /// Stateless single-pass decode under one mode assignment.
    pub fn decode_nar(&self, sc: &SceneContext, z: &ModeConfig) -> Result<DecodeOut> {
        let phi = self.phi_prime(sc, z)?;
        self.dec
            .decode_non_autoregressive(&self.cfg, &self.decode_inputs(sc, &phi))
    }

    /// Differentiable per-agent log prior [A, K] for one scene.
    pub fn prior_log_probs(&self, sc: &SceneContext) -> Result<Tensor> {
        self.prior
            .log_probs(&self.cfg, &sc.ctx, sc.map.as_ref())
    }

    /// Value-level prior distribution for one scene.
    pub fn mode_prior(&self, sc: &SceneContext) -> Result<ModePrior> {
        self.prior.prior(&self.cfg, &sc.ctx, sc.map.as_ref())
    }

    /// K mode-conditioned trajectory samples: sample k conditions every
    /// agent on its k-th mode and rolls out autoregressively with mean
    /// selection, so the output is deterministic.
    pub fn predict(&self, scene: &Scene, k: usize) -> Result<Vec<TrajectorySample>> {
        if k < 1 || k > self.cfg.k_modes {
            return Err(Error::Config(format!(
                "requested {k} samples, model has {} modes",
                self.cfg.k_modes
            )));
        }
        let sc = self.encode_scene(scene)?;
        let a = sc.obs.a;
        let mut out = Vec::with_capacity(k);
        for mode in 0..k {
            let z = ModeConfig::new(vec![mode; a], self.cfg.k_modes)?;
            let (points, dec_out) = self.decode_ar(&sc, &z, Select::Mean, 0)?;
            out.push(TrajectorySample {
                points,
                a,
                t: dec_out.t,
                mode_config: z,
            });
        }
        Ok(out)
    }

    /// Ground-truth future as the agent-major [A, T, 2] array decoders use.
    pub fn future_array(scene: &Scene) -> Vec<f64> {
        let mut out = Vec::new();
        for agent in &scene.agents {
            for p in &agent.future {
                out.push(p[0]);
                out.push(p[1]);
            }
        }
        out
    }

    pub fn audit(&self) -> ModelAudit {
        ModelAudit::of(self)
    }
}

// ─── structural audit ───────────────────────────────────────────────────────

/// Architecture summary read back from the live module tree and the
/// parameter store, for audits against the intended layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelAudit {
    pub d_m: usize,
    pub heads: usize,
    pub k_modes: usize,
    pub encoder_blocks: usize,
    pub map_vit_blocks: usize,
    pub prior_layers: usize,
    pub decoder_layers: usize,
    pub head_layers: usize,
    /// Output channels of the three map conv layers.
    pub conv_channels: [usize; 3],
    /// Spatial edge of the conv feature map.
    pub feature_grid: usize,
    /// Number of layer-norm parameter tensors inside the norm-free decoder
    /// stack (must be zero).
    pub decoder_norm_params: usize,
    pub total_params: usize,
}

impl ModelAudit {
    pub fn of(model: &Model) -> Self {
        let conv_channels = [
            model.map.conv.k1.shape()[0],
            model.map.conv.k2.shape()[0],
            model.map.conv.k3.shape()[0],
        ];
        let decoder_norm_params = model
            .store
            .iter()
            .filter(|(name, _)| {
                name.starts_with("dec.layer") && (name.contains(".ln") || name.contains("gain"))
            })
            .count();
        let heads = model.traj.blocks.first().map_or(0, |b| b.attn.wq.len());
        ModelAudit {
            d_m: model.cfg.d_m,
            heads,
            k_modes: model.cfg.k_modes,
            encoder_blocks: model.traj.blocks.len(),
            map_vit_blocks: model.map.blocks.len(),
            prior_layers: model.prior.layers.len(),
            decoder_layers: model.dec.layers.len(),
            head_layers: model.dec.head.len(),
            conv_channels,
            feature_grid: crate::map_encoder::FEATURE_GRID,
            decoder_norm_params,
            total_params: model.store.total_values(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_intersection;

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::small();
        cfg.d_m = 16;
        cfg.heads = 2;
        cfg.i_e = 1;
        cfg.i_dd = 1;
        cfg.i_dc = 1;
        cfg.k_modes = 3;
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn end_to_end_decode_over_a_generated_scene() {
        let model = tiny_model(1);
        let scene = generate_intersection(5, 3).unwrap();
        let sc = model.encode_scene(&scene).unwrap();
        let a = sc.obs.a;
        let z = ModeConfig::new(vec![1; a], 3).unwrap();
        let gt = Model::future_array(&scene);
        let out = model.decode_tf(&sc, &z, &gt).unwrap();
        let g = out.gaussians().unwrap();
        assert_eq!((g.a, g.t), (a, model.cfg.horizon));
    }

    #[test]
    fn different_modes_roll_out_different_trajectories() {
        // The choice of mode must actually reach the decoder; an untrained
        // model already separates modes through the slot embedding.
        let model = tiny_model(9);
        let scene = generate_intersection(11, 2).unwrap();
        let samples = model.predict(&scene, 2).unwrap();
        let gap = samples[0]
            .points
            .iter()
            .zip(&samples[1].points)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-6, "mode conditioning is inert, gap {gap:.3e}");
    }

    #[test]
    fn predict_emits_one_sample_per_mode() {
        let model = tiny_model(2);
        let scene = generate_intersection(6, 2).unwrap();
        let samples = model.predict(&scene, 3).unwrap();
        assert_eq!(samples.len(), 3);
        for (k, s) in samples.iter().enumerate() {
            assert_eq!(s.mode_config.modes, vec![k; s.a]);
            assert!(s.points.iter().all(|v| v.is_finite()));
        }
        // distinct modes give distinct futures
        assert_ne!(samples[0].points, samples[1].points);
        // deterministic
        let again = model.predict(&scene, 3).unwrap();
        assert_eq!(samples[0].points, again[0].points);
    }

    #[test]
    fn mode_assignment_reaches_the_decoder_output() {
        let model = tiny_model(3);
        let scene = generate_intersection(7, 2).unwrap();
        let sc = model.encode_scene(&scene).unwrap();
        let gt = Model::future_array(&scene);
        let a = sc.obs.a;
        let z0 = ModeConfig::new(vec![0; a], 3).unwrap();
        let z1 = ModeConfig::new(vec![2; a], 3).unwrap();
        let o0 = model.decode_tf(&sc, &z0, &gt).unwrap();
        let o1 = model.decode_tf(&sc, &z1, &gt).unwrap();
        assert_ne!(o0.raw.value(), o1.raw.value());
    }

    #[test]
    fn map_toggle_changes_context_but_not_layout() {
        let mut cfg = ModelConfig::small();
        cfg.d_m = 16;
        cfg.heads = 2;
        cfg.i_e = 1;
        cfg.i_dd = 1;
        cfg.i_dc = 1;
        cfg.k_modes = 2;
        let with_map = Model::new(cfg.clone(), 9).unwrap();
        cfg.use_map = false;
        let without = Model::new(cfg, 9).unwrap();
        // identical parameter layout and identical initial values
        assert_eq!(with_map.store.total_values(), without.store.total_values());
        let scene = generate_intersection(8, 2).unwrap();
        let sc_m = with_map.encode_scene(&scene).unwrap();
        let sc_n = without.encode_scene(&scene).unwrap();
        assert!(sc_m.map.is_some());
        assert!(sc_n.map.is_none());
        // trajectory encodings agree bitwise (same params, same input)
        assert_eq!(sc_m.ctx.phi_s.value(), sc_n.ctx.phi_s.value());
    }

    #[test]
    fn prior_is_a_distribution_over_modes_per_agent() {
        let model = tiny_model(4);
        let scene = generate_intersection(9, 3).unwrap();
        let sc = model.encode_scene(&scene).unwrap();
        let prior = model.mode_prior(&sc).unwrap();
        assert_eq!((prior.a, prior.k), (sc.obs.a, 3));
        let lp = model.prior_log_probs(&sc).unwrap().value();
        for (i, &p) in prior.probs.iter().enumerate() {
            assert!((lp[i].exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn audit_reflects_the_configured_architecture() {
        let model = tiny_model(5);
        let audit = model.audit();
        assert_eq!(audit.d_m, 16);
        assert_eq!(audit.heads, 2);
        assert_eq!(audit.encoder_blocks, 1);
        assert_eq!(audit.prior_layers, 1);
        assert_eq!(audit.decoder_layers, 1);
        assert_eq!(audit.conv_channels, [8, 16, 6]);
        assert_eq!(audit.feature_grid, 32);
        assert_eq!(audit.decoder_norm_params, 0);
        assert!(audit.total_params > 0);
    }

    #[test]
    fn scene_with_wrong_horizon_is_a_config_error() {
        let model = tiny_model(6);
        let mut scene = generate_intersection(10, 2).unwrap();
        scene.agents[0].future.pop();
        let err = model.encode_scene(&scene).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }
}
