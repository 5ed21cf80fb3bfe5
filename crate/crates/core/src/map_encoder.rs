//! Map encoder: binary drivable mask -> token sequence phi_map.
//!
//! Pipeline: augment the 64x64 mask with pixel-index and center-distance
//! channels, run a small conv stack down to a 32x32x6 feature map, then
//! tokenize as one global token (flattened map, linear) plus overlapping
//! local patch tokens, add a learned position embedding and run the shared
//! encoder block stack over the 50-token sequence.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_embedding, Linear, TeBlock};
use crate::rng::Rng;
use crate::scene::{DrivableMask, GRID};
use crate::tensor::{Padding, ParamStore, Tensor};

/// Feature-map edge after the stride-2 conv layer.
pub const FEATURE_GRID: usize = 32;
/// Channels entering the conv stack.
pub const IN_CHANNELS: usize = 4;
/// Channels leaving the conv stack.
pub const OUT_CHANNELS: usize = 6;

/// Encoded map sequence; token 0 is the global summary.
pub struct MapTokens {
    /// [1 + P, d_m]
    pub phi_map: Tensor,
}

/// Stack the mask with row-index, column-index and center-distance channels.
///
/// Normalized form: indices divided by (edge - 1), distance divided by the
/// half-diagonal so corners land exactly at 1.0. The raw form keeps pixel
/// units in all three derived channels.
pub fn augment_channels(mask: &DrivableMask, raw_indices: bool) -> Result<Tensor> {
    let h = GRID;
    let w = GRID;
    let (cr, cc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let half_diag = (cr * cr + cc * cc).sqrt();
    let mut data = Vec::with_capacity(IN_CHANNELS * h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(if mask.cell(r, c) { 1.0 } else { 0.0 });
        }
    }
    for r in 0..h {
        for _ in 0..w {
            let v = r as f64;
            data.push(if raw_indices { v } else { v / (h - 1) as f64 });
        }
    }
    for _ in 0..h {
        for c in 0..w {
            let v = c as f64;
            data.push(if raw_indices { v } else { v / (w - 1) as f64 });
        }
    }
    for r in 0..h {
        for c in 0..w {
            let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
            data.push(if raw_indices { d } else { d / half_diag });
        }
    }
    Tensor::from_vec(data, &[IN_CHANNELS, h, w])
}

/// Three conv layers: 8 filters 3x3 stride 1, 16 filters 3x3 stride 2,
/// 6 filters 1x1 stride 1, same padding, ReLU after the first two.
pub struct ConvStack {
    pub k1: Tensor,
    pub b1: Tensor,
    pub k2: Tensor,
    pub b2: Tensor,
    pub k3: Tensor,
    pub b3: Tensor,
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        let kernel = |store: &mut ParamStore,
                          name: &str,
                          o: usize,
                          c: usize,
                          kh: usize,
                          kw: usize,
                          rng: &mut Rng|
         -> Result<Tensor> {
            store.add(
                &format!("{prefix}.{name}"),
                Tensor::param(init_conv(rng, o, c, kh, kw), &[o, c, kh, kw])?,
            )
        };
        let k1 = kernel(store, "k1", 8, IN_CHANNELS, 3, 3, rng)?;
        let b1 = store.add(&format!("{prefix}.b1"), Tensor::param(vec![0.0; 8], &[8])?)?;
        let k2 = kernel(store, "k2", 16, 8, 3, 3, rng)?;
        let b2 = store.add(&format!("{prefix}.b2"), Tensor::param(vec![0.0; 16], &[16])?)?;
        let k3 = kernel(store, "k3", OUT_CHANNELS, 16, 1, 1, rng)?;
        let b3 = store.add(
            &format!("{prefix}.b3"),
            Tensor::param(vec![0.0; OUT_CHANNELS], &[OUT_CHANNELS])?,
        )?;
        Ok(ConvStack { k1, b1, k2, b2, k3, b3 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [IN_CHANNELS, GRID, GRID] {
            return Err(Error::Dimension(format!(
                "conv stack expects [{IN_CHANNELS}, {GRID}, {GRID}], got {:?}",
                x.shape()
            )));
        }
        let h1 = x
            .conv2d(&self.k1, 1, Padding::Same)?
            .add_channel_bias(&self.b1)?
            .relu();
        let h2 = h1
            .conv2d(&self.k2, 2, Padding::Same)?
            .add_channel_bias(&self.b2)?
            .relu();
        h2.conv2d(&self.k3, 1, Padding::Same)?.add_channel_bias(&self.b3)
    }
}

pub struct MapEncoder {
    pub conv: ConvStack,
    /// Global token projection: flattened feature map -> d_m.
    pub global_proj: Linear,
    /// Local patch projection: flattened patch -> d_m.
    pub patch_proj: Linear,
    /// [1 + P, d_m] learned per-token position table.
    pub pos: Tensor,
    pub blocks: Vec<TeBlock>,
}

impl MapEncoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let block_cfg = cfg.block_config()?;
        let p = cfg.patches_per_axis();
        let n_tokens = 1 + p * p;
        let fmap_len = OUT_CHANNELS * FEATURE_GRID * FEATURE_GRID;
        let patch_len = OUT_CHANNELS * cfg.patch_m * cfg.patch_m;
        let conv = ConvStack::new(store, "map.conv", rng)?;
        let global_proj = Linear::new(store, "map.global", fmap_len, cfg.d_m, rng)?;
        let patch_proj = Linear::new(store, "map.patch", patch_len, cfg.d_m, rng)?;
        let pos = store.add(
            "map.pos",
            Tensor::param(init_embedding(rng, n_tokens * cfg.d_m), &[n_tokens, cfg.d_m])?,
        )?;
        let mut blocks = Vec::with_capacity(cfg.i_e);
        for i in 0..cfg.i_e {
            blocks.push(TeBlock::new(&block_cfg, store, &format!("map.block{i}"), rng)?);
        }
        Ok(MapEncoder { conv, global_proj, patch_proj, pos, blocks })
    }

    /// Flat indices (into the [C, G, G] feature map) of every cell in patch
    /// (pr, pc), channel-major.
    fn patch_indices(cfg: &ModelConfig, pr: usize, pc: usize) -> Vec<usize> {
        let g = FEATURE_GRID;
        let m = cfg.patch_m;
        let (r0, c0) = (pr * cfg.patch_stride, pc * cfg.patch_stride);
        let mut idx = Vec::with_capacity(OUT_CHANNELS * m * m);
        for ch in 0..OUT_CHANNELS {
            for r in r0..r0 + m {
                for c in c0..c0 + m {
                    idx.push((ch * g + r) * g + c);
                }
            }
        }
        idx
    }

    /// Token sequence before position embedding: [Gamma_g; patch tokens...].
    fn raw_tokens(&self, cfg: &ModelConfig, fmap: &Tensor) -> Result<Tensor> {
        let fmap_len = OUT_CHANNELS * FEATURE_GRID * FEATURE_GRID;
        let global = self.global_proj.forward(&fmap.reshape(&[1, fmap_len])?)?;
        let flat = fmap.reshape(&[fmap_len, 1])?;
        let p = cfg.patches_per_axis();
        let patch_len = OUT_CHANNELS * cfg.patch_m * cfg.patch_m;
        let mut all_idx = Vec::with_capacity(p * p * patch_len);
        for pr in 0..p {
            for pc in 0..p {
                all_idx.extend(Self::patch_indices(cfg, pr, pc));
            }
        }
        let patches = flat.gather_rows(&all_idx)?.reshape(&[p * p, patch_len])?;
        let locals = self.patch_proj.forward(&patches)?;
        Tensor::concat(&[global, locals], 0)
    }

    /// Same as `raw_tokens` but visible to tests probing pre-position state.
    #[cfg(test)]
    pub(crate) fn tokens_before_pos(&self, cfg: &ModelConfig, fmap: &Tensor) -> Result<Tensor> {
        self.raw_tokens(cfg, fmap)
    }

    pub fn tokenize(&self, cfg: &ModelConfig, fmap: &Tensor) -> Result<MapTokens> {
        if fmap.shape() != [OUT_CHANNELS, FEATURE_GRID, FEATURE_GRID] {
            return Err(Error::Dimension(format!(
                "tokenize expects [{OUT_CHANNELS}, {FEATURE_GRID}, {FEATURE_GRID}], got {:?}",
                fmap.shape()
            )));
        }
        let block_cfg = cfg.block_config()?;
        let mut x = self.raw_tokens(cfg, fmap)?.add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&block_cfg, &x, None)?;
        }
        Ok(MapTokens { phi_map: x })
    }

    pub fn encode(&self, cfg: &ModelConfig, mask: &DrivableMask) -> Result<MapTokens> {
        let x = augment_channels(mask, cfg.raw_map_indices)?;
        let fmap = self.conv.forward(&x)?;
        self.tokenize(cfg, &fmap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::scene::intersection_mask;

    fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::small();
        c.d_m = 16;
        c.heads = 2;
        c.i_e = 1;
        c
    }

    #[test]
    fn augmented_channels_match_definitions() {
        let mask = intersection_mask();
        let x = augment_channels(&mask, false).unwrap();
        assert_eq!(x.shape(), vec![4, 64, 64]);
        let v = x.value();
        let at = |ch: usize, r: usize, c: usize| v[(ch * 64 + r) * 64 + c];
        // mask channel mirrors the geometry
        assert_eq!(at(0, 32, 32), 1.0);
        assert_eq!(at(0, 0, 0), 0.0);
        // row-index channel: bottom row saturates at 1
        for c in [0, 17, 63] {
            assert_eq!(at(1, 63, c), 1.0);
            assert_eq!(at(1, 0, c), 0.0);
        }
        // column-index channel
        assert_eq!(at(2, 5, 63), 1.0);
        assert_eq!(at(2, 5, 0), 0.0);
        // distance channel: corners exactly 1, near-center pixels near 0
        for (r, c) in [(0, 0), (0, 63), (63, 0), (63, 63)] {
            assert_eq!(at(3, r, c), 1.0);
        }
        let center = at(3, 31, 31);
        assert!(center < 0.02, "center distance {center}");
    }

    #[test]
    fn raw_channels_keep_pixel_units() {
        let mask = intersection_mask();
        let x = augment_channels(&mask, true).unwrap();
        let v = x.value();
        let at = |ch: usize, r: usize, c: usize| v[(ch * 64 + r) * 64 + c];
        assert_eq!(at(1, 63, 10), 63.0);
        assert_eq!(at(2, 4, 41), 41.0);
        let expect = (31.5f64 * 31.5 * 2.0).sqrt();
        assert_eq!(at(3, 0, 0), expect);
    }

    #[test]
    fn conv_stack_output_shape_and_zero_case() {
        let mut store = ParamStore::new();
        let conv = ConvStack::new(&mut store, "t", &mut Rng::new(1)).unwrap();
        let zeros = Tensor::from_vec(vec![0.0; 4 * 64 * 64], &[4, 64, 64]).unwrap();
        let out = conv.forward(&zeros).unwrap();
        assert_eq!(out.shape(), vec![6, 32, 32]);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_stack_matches_naive_oracle() {
        let mut rng = Rng::new(7);
        let mut store = ParamStore::new();
        let conv = ConvStack::new(&mut store, "t", &mut rng).unwrap();
        let x: Vec<f64> = (0..4 * 64 * 64).map(|_| rng.normal()).collect();
        let xt = Tensor::from_vec(x.clone(), &[4, 64, 64]).unwrap();
        let got = conv.forward(&xt).unwrap().value();
        // oracle recomputation, layer by layer
        let mut h1 = oracle::naive_conv2d(&x, 4, 64, 64, &conv.k1.value(), 8, 3, 3, 1, true);
        let b1 = conv.b1.value();
        for c in 0..8 {
            for i in 0..64 * 64 {
                let v = h1[c * 64 * 64 + i] + b1[c];
                h1[c * 64 * 64 + i] = v.max(0.0);
            }
        }
        let mut h2 = oracle::naive_conv2d(&h1, 8, 64, 64, &conv.k2.value(), 16, 3, 3, 2, true);
        let b2 = conv.b2.value();
        for c in 0..16 {
            for i in 0..32 * 32 {
                let v = h2[c * 32 * 32 + i] + b2[c];
                h2[c * 32 * 32 + i] = v.max(0.0);
            }
        }
        let mut h3 = oracle::naive_conv2d(&h2, 16, 32, 32, &conv.k3.value(), 6, 1, 1, 1, true);
        let b3 = conv.b3.value();
        for c in 0..6 {
            for i in 0..32 * 32 {
                h3[c * 32 * 32 + i] += b3[c];
            }
        }
        for (i, (a, b)) in got.iter().zip(h3.iter()).enumerate() {
            assert!((a - b).abs() < 1e-12, "cell {i}: {a} vs {b}");
        }
    }

    #[test]
    fn conv_parameters_pass_gradient_check() {
        // small input so finite differences stay cheap
        let mut rng = Rng::new(11);
        let mut store = ParamStore::new();
        let conv = ConvStack::new(&mut store, "t", &mut rng).unwrap();
        let x: Vec<f64> = (0..4 * 64 * 64).map(|_| rng.normal()).collect();
        let xt = Tensor::from_vec(x, &[4, 64, 64]).unwrap();
        let weights: Vec<f64> = (0..6 * 32 * 32).map(|_| rng.normal()).collect();
        let named: Vec<(&str, &Tensor)> = vec![
            ("k1", &conv.k1),
            ("b1", &conv.b1),
            ("k2", &conv.k2),
            ("b2", &conv.b2),
            ("k3", &conv.k3),
            ("b3", &conv.b3),
        ];
        let report = oracle::check_gradients(
            &named,
            &|| conv.forward(&xt)?.dot_const(&weights),
            1e-5,
            4,
            &mut Rng::new(99),
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
    fn token_count_is_one_plus_grid_patches() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.patches_per_axis(), 7);
        let mut store = ParamStore::new();
        let enc = MapEncoder::new(&cfg, &mut store, &mut Rng::new(2)).unwrap();
        let tokens = enc.encode(&cfg, &intersection_mask()).unwrap();
        assert_eq!(tokens.phi_map.shape(), vec![50, cfg.d_m]);
    }

    #[test]
    fn constant_feature_map_gives_identical_patch_tokens_and_live_positions() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let enc = MapEncoder::new(&cfg, &mut store, &mut Rng::new(3)).unwrap();
        let fmap = Tensor::from_vec(vec![0.37; 6 * 32 * 32], &[6, 32, 32]).unwrap();
        let before = enc.tokens_before_pos(&cfg, &fmap).unwrap().value();
        let d = cfg.d_m;
        for p in 2..50 {
            assert_eq!(
                &before[d..2 * d],
                &before[p * d..(p + 1) * d],
                "patch token {p} differs before position embedding"
            );
        }
        // after position embedding the tokens must separate
        let after = enc.tokenize(&cfg, &fmap).unwrap().phi_map.value();
        assert_ne!(&after[d..2 * d], &after[2 * d..3 * d]);
    }

    #[test]
    fn every_feature_cell_is_covered_by_a_patch() {
        let cfg = ModelConfig::paper();
        let p = cfg.patches_per_axis();
        let mut covered = vec![false; FEATURE_GRID * FEATURE_GRID];
        for pr in 0..p {
            for pc in 0..p {
                for idx in MapEncoder::patch_indices(&cfg, pr, pc) {
                    if idx < FEATURE_GRID * FEATURE_GRID {
                        covered[idx] = true;
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c), "uncovered feature cells exist");
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let enc = MapEncoder::new(&cfg, &mut store, &mut Rng::new(4)).unwrap();
        let mask = intersection_mask();
        let a = enc.encode(&cfg, &mask).unwrap().phi_map.value();
        let b = enc.encode(&cfg, &mask).unwrap().phi_map.value();
        assert_eq!(a, b);
    }
}
