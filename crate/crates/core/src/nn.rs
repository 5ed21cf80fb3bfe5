//! Attention and transformer building blocks.
//!
//! Three block types cover the whole model: the encoder block (self-attention
//! then feed-forward, both with residual + layer norm), the normalized decoder
//! layer (masked self-attention plus two cross-attention sublayers), and the
//! norm-free decoder layer (same wiring with every layer norm removed).
//!
//! The first self-attention sublayer of the decoder layers has no residual
//! connection when `literal_eqs` is set (the default); the conventional
//! residual form is available by clearing the flag.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tensor};

// ─── configuration ──────────────────────────────────────────────────────────

/// Shared dimensions and switches for all blocks.
#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub d_m: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Scale attention scores by 1/sqrt(d_q). On by default; off gives the
    /// raw unscaled scores.
    pub attn_scale: bool,
    /// Omit the residual on the first decoder self-attention sublayer. On by
    /// default; off restores the conventional residual.
    pub literal_eqs: bool,
}

impl BlockConfig {
    pub fn new(d_m: usize, heads: usize) -> Result<Self> {
        let cfg = BlockConfig {
            d_m,
            heads,
            ffn_mult: 4,
            attn_scale: true,
            literal_eqs: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_m == 0 {
            return Err(Error::Config(format!(
                "embedding dim {} and head count {} must be positive",
                self.d_m, self.heads
            )));
        }
        if self.d_m % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} not divisible by head count {}",
                self.d_m, self.heads
            )));
        }
        if self.ffn_mult < 1 {
            return Err(Error::Config(format!(
                "feed-forward multiplier must be >= 1, got {}",
                self.ffn_mult
            )));
        }
        Ok(())
    }

    /// Per-head query/key/value width.
    pub fn d_q(&self) -> usize {
        self.d_m / self.heads
    }

    /// Multiplier applied to raw attention scores.
    pub fn score_scale(&self) -> f64 {
        if self.attn_scale {
            1.0 / (self.d_q() as f64).sqrt()
        } else {
            1.0
        }
    }
}

// ─── attention mask ─────────────────────────────────────────────────────────

/// Boolean attention grid; `true` means the query may attend to the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_q: usize, n_k: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != n_q * n_k {
            return Err(Error::Dimension(format!(
                "mask data length {} does not match {}x{}",
                allow.len(),
                n_q,
                n_k
            )));
        }
        for q in 0..n_q {
            if !allow[q * n_k..(q + 1) * n_k].iter().any(|&a| a) {
                return Err(Error::Contract(format!(
                    "query row {q} has no allowed keys"
                )));
            }
        }
        Ok(AttentionMask { n_q, n_k, allow })
    }

    pub fn full(n_q: usize, n_k: usize) -> Self {
        AttentionMask {
            n_q,
            n_k,
            allow: vec![true; n_q * n_k],
        }
    }

    /// Build from a per-cell predicate.
    pub fn from_fn(n_q: usize, n_k: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allow = vec![false; n_q * n_k];
        for q in 0..n_q {
            for k in 0..n_k {
                allow[q * n_k + k] = f(q, k);
            }
        }
        AttentionMask::new(n_q, n_k, allow)
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n_k + k]
    }

    fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

// ─── initialization ─────────────────────────────────────────────────────────

/// Weight matrix init: uniform in +/- sqrt(1/fan_in).
pub fn init_linear(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.range(-bound, bound)).collect()
}

/// Convolution kernel init: uniform in +/- sqrt(1/(c_in*kh*kw)).
pub fn init_conv(rng: &mut Rng, c_out: usize, c_in: usize, kh: usize, kw: usize) -> Vec<f64> {
    let bound = (1.0 / (c_in * kh * kw) as f64).sqrt();
    (0..c_out * c_in * kh * kw)
        .map(|_| rng.range(-bound, bound))
        .collect()
}

/// Embedding table init: normal with standard deviation 0.02.
pub fn init_embedding(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal_scaled(0.0, 0.02)).collect()
}

// ─── linear / layer-norm / feed-forward parameters ──────────────────────────

/// Dense layer `y = x W + b`.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{prefix}.w"),
            Tensor::param(init_linear(rng, d_in, d_out), &[d_in, d_out])?,
        )?;
        let b = store.add(
            &format!("{prefix}.b"),
            Tensor::param(vec![0.0; d_out], &[d_out])?,
        )?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add_bias(&self.b)
    }
}

/// Layer normalization gain/bias pair.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        let gain = store.add(
            &format!("{prefix}.gain"),
            Tensor::param(vec![1.0; d], &[d])?,
        )?;
        let bias = store.add(
            &format!("{prefix}.bias"),
            Tensor::param(vec![0.0; d], &[d])?,
        )?;
        Ok(LayerNorm { gain, bias, eps: LN_EPS })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }
}

/// Two-layer feed-forward with ReLU between.
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Ffn {
    pub fn new(cfg: &BlockConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        let inner = cfg.d_m * cfg.ffn_mult;
        Ok(Ffn {
            lin1: Linear::new(store, &format!("{prefix}.lin1"), cfg.d_m, inner, rng)?,
            lin2: Linear::new(store, &format!("{prefix}.lin2"), inner, cfg.d_m, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.relu())
    }
}

// ─── attention ──────────────────────────────────────────────────────────────

/// Single-head attention: softmax(Q K^T * scale) V with optional mask.
pub fn attn(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
    scale: f64,
) -> Result<Tensor> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Dimension(format!(
            "attn expects rank-2 Q/K/V, got {:?}/{:?}/{:?}",
            qs, ks, vs
        )));
    }
    if qs[1] != ks[1] {
        return Err(Error::Dimension(format!(
            "attn query width {} does not match key width {}",
            qs[1], ks[1]
        )));
    }
    if ks[0] != vs[0] {
        return Err(Error::Dimension(format!(
            "attn key count {} does not match value count {}",
            ks[0], vs[0]
        )));
    }
    if let Some(m) = mask {
        if m.n_q() != qs[0] || m.n_k() != ks[0] {
            return Err(Error::Dimension(format!(
                "mask {}x{} does not match scores {}x{}",
                m.n_q(),
                m.n_k(),
                qs[0],
                ks[0]
            )));
        }
    }
    let scores = q.matmul(&k.transpose2d()?)?.scale(scale);
    let weights = scores.softmax_masked(1, mask.map(|m| m.as_slice()))?;
    weights.matmul(v)
}

/// Per-head projection weights plus the output projection.
pub struct MultiHead {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

impl MultiHead {
    pub fn new(cfg: &BlockConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        let (d_m, d_q) = (cfg.d_m, cfg.d_q());
        let mut wq = Vec::with_capacity(cfg.heads);
        let mut wk = Vec::with_capacity(cfg.heads);
        let mut wv = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            wq.push(store.add(
                &format!("{prefix}.head{h}.wq"),
                Tensor::param(init_linear(rng, d_m, d_q), &[d_m, d_q])?,
            )?);
            wk.push(store.add(
                &format!("{prefix}.head{h}.wk"),
                Tensor::param(init_linear(rng, d_m, d_q), &[d_m, d_q])?,
            )?);
            wv.push(store.add(
                &format!("{prefix}.head{h}.wv"),
                Tensor::param(init_linear(rng, d_m, d_q), &[d_m, d_q])?,
            )?);
        }
        let wo = store.add(
            &format!("{prefix}.wo"),
            Tensor::param(init_linear(rng, d_m, d_m), &[d_m, d_m])?,
        )?;
        Ok(MultiHead { wq, wk, wv, wo })
    }

    /// Project per head, attend, concatenate, project out.
    pub fn forward(
        &self,
        cfg: &BlockConfig,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&AttentionMask>,
    ) -> Result<Tensor> {
        let scale = cfg.score_scale();
        let mut heads = Vec::with_capacity(self.wq.len());
        for h in 0..self.wq.len() {
            let qh = q.matmul(&self.wq[h])?;
            let kh = k.matmul(&self.wk[h])?;
            let vh = v.matmul(&self.wv[h])?;
            heads.push(attn(&qh, &kh, &vh, mask, scale)?);
        }
        Tensor::concat(&heads, 1)?.matmul(&self.wo)
    }
}

// ─── encoder block ──────────────────────────────────────────────────────────

/// Self-attention + feed-forward, each wrapped in residual + layer norm.
pub struct TeBlock {
    pub attn: MultiHead,
    pub ln1: LayerNorm,
    pub ffn: Ffn,
    pub ln2: LayerNorm,
}

impl TeBlock {
    pub fn new(cfg: &BlockConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        Ok(TeBlock {
            attn: MultiHead::new(cfg, store, &format!("{prefix}.attn"), rng)?,
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), cfg.d_m)?,
            ffn: Ffn::new(cfg, store, &format!("{prefix}.ffn"), rng)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), cfg.d_m)?,
        })
    }

    pub fn forward(&self, cfg: &BlockConfig, x: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
        let a = self.attn.forward(cfg, x, x, x, mask)?;
        let x1 = self.ln1.forward(&x.add(&a)?)?;
        let f = self.ffn.forward(&x1)?;
        self.ln2.forward(&x1.add(&f)?)
    }

    /// Trainable value count for one block.
    pub fn param_count(cfg: &BlockConfig) -> usize {
        let d = cfg.d_m;
        let mha = 4 * d * d;
        let ffn = d * (cfg.ffn_mult * d) + cfg.ffn_mult * d + (cfg.ffn_mult * d) * d + d;
        mha + ffn + 2 * (2 * d)
    }
}

// ─── decoder layers ─────────────────────────────────────────────────────────

/// Masks for one decoder layer pass: self-attention over the target tokens
/// and the two cross-attention contexts.
#[derive(Default)]
pub struct DecoderMasks<'a> {
    pub self_mask: Option<&'a AttentionMask>,
    pub ctx_a_mask: Option<&'a AttentionMask>,
    pub ctx_b_mask: Option<&'a AttentionMask>,
}

/// Decoder layer with layer normalization. Sublayers in order: masked
/// self-attention (no residual in literal mode), cross-attention to the first
/// context, cross-attention to the second context, feed-forward.
pub struct TdlD {
    pub self_attn: MultiHead,
    pub ln_self: LayerNorm,
    pub cross_a: MultiHead,
    pub ln_a: LayerNorm,
    pub cross_b: MultiHead,
    pub ln_b: LayerNorm,
    pub ffn: Ffn,
    pub ln_ffn: LayerNorm,
}

impl TdlD {
    pub fn new(cfg: &BlockConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        Ok(TdlD {
            self_attn: MultiHead::new(cfg, store, &format!("{prefix}.self"), rng)?,
            ln_self: LayerNorm::new(store, &format!("{prefix}.ln_self"), cfg.d_m)?,
            cross_a: MultiHead::new(cfg, store, &format!("{prefix}.cross_a"), rng)?,
            ln_a: LayerNorm::new(store, &format!("{prefix}.ln_a"), cfg.d_m)?,
            cross_b: MultiHead::new(cfg, store, &format!("{prefix}.cross_b"), rng)?,
            ln_b: LayerNorm::new(store, &format!("{prefix}.ln_b"), cfg.d_m)?,
            ffn: Ffn::new(cfg, store, &format!("{prefix}.ffn"), rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{prefix}.ln_ffn"), cfg.d_m)?,
        })
    }

    /// `ctx_b = None` skips the second cross-attention sublayer entirely
    /// (used when the model runs without a map context).
    pub fn forward(
        &self,
        cfg: &BlockConfig,
        x: &Tensor,
        ctx_a: &Tensor,
        ctx_b: Option<&Tensor>,
        masks: &DecoderMasks,
    ) -> Result<Tensor> {
        let s = self.self_attn.forward(cfg, x, x, x, masks.self_mask)?;
        let x3 = if cfg.literal_eqs {
            self.ln_self.forward(&s)?
        } else {
            self.ln_self.forward(&x.add(&s)?)?
        };
        let ca = self.cross_a.forward(cfg, &x3, ctx_a, ctx_a, masks.ctx_a_mask)?;
        let x2 = self.ln_a.forward(&x3.add(&ca)?)?;
        let x1 = match ctx_b {
            Some(cb_ctx) => {
                let cb = self.cross_b.forward(cfg, &x2, cb_ctx, cb_ctx, masks.ctx_b_mask)?;
                self.ln_b.forward(&x2.add(&cb)?)?
            }
            None => x2,
        };
        let f = self.ffn.forward(&x1)?;
        self.ln_ffn.forward(&x1.add(&f)?)
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        let d = cfg.d_m;
        let mha = 4 * d * d;
        let ffn = d * (cfg.ffn_mult * d) + cfg.ffn_mult * d + (cfg.ffn_mult * d) * d + d;
        3 * mha + ffn + 4 * (2 * d)
    }
}

/// Decoder layer without any layer normalization; otherwise wired like
/// [`TdlD`]. Cross-attends first to the combined trajectory/intention
/// context, then to the map context.
pub struct TdlC {
    pub self_attn: MultiHead,
    pub cross_a: MultiHead,
    pub cross_b: MultiHead,
    pub ffn: Ffn,
}

impl TdlC {
    pub fn new(cfg: &BlockConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        Ok(TdlC {
            self_attn: MultiHead::new(cfg, store, &format!("{prefix}.self"), rng)?,
            cross_a: MultiHead::new(cfg, store, &format!("{prefix}.cross_a"), rng)?,
            cross_b: MultiHead::new(cfg, store, &format!("{prefix}.cross_b"), rng)?,
            ffn: Ffn::new(cfg, store, &format!("{prefix}.ffn"), rng)?,
        })
    }

    /// `ctx_b = None` skips the second cross-attention sublayer entirely
    /// (used when the model runs without a map context).
    pub fn forward(
        &self,
        cfg: &BlockConfig,
        x: &Tensor,
        ctx_a: &Tensor,
        ctx_b: Option<&Tensor>,
        masks: &DecoderMasks,
    ) -> Result<Tensor> {
        let s = self.self_attn.forward(cfg, x, x, x, masks.self_mask)?;
        let x3 = if cfg.literal_eqs { s } else { x.add(&s)? };
        let ca = self.cross_a.forward(cfg, &x3, ctx_a, ctx_a, masks.ctx_a_mask)?;
        let x2 = x3.add(&ca)?;
        let x1 = match ctx_b {
            Some(cb_ctx) => {
                let cb = self.cross_b.forward(cfg, &x2, cb_ctx, cb_ctx, masks.ctx_b_mask)?;
                x2.add(&cb)?
            }
            None => x2,
        };
        let f = self.ffn.forward(&x1)?;
        x1.add(&f)
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        let d = cfg.d_m;
        let mha = 4 * d * d;
        let ffn = d * (cfg.ffn_mult * d) + cfg.ffn_mult * d + (cfg.ffn_mult * d) * d + d;
        3 * mha + ffn
    }
}
