//! Independent reference implementations used to cross-check the tensor ops
//! and gradients. Everything here is deliberately naive: plain nested loops,
//! no shared code with the tensor module, so a bug in one side cannot hide a
//! bug in the other. The `selftest` subcommand runs these at startup.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{no_grad, backward, Tensor};

/// Plain triple-loop matrix product, summation ordered over the inner index.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// exp / sum-of-exp softmax without stabilization tricks.
pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    x.iter().map(|v| v.exp() / z).collect()
}

/// Sliding-window convolution with explicit bounds checks.
/// Input `[cin, h, w]`, kernels `[cout, cin, kh, kw]`; `same` selects padded
/// output of ceil(h/stride) x ceil(w/stride), otherwise valid.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    same: bool,
) -> Vec<f64> {
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..cin {
                    for r in 0..kh {
                        for c in 0..kw {
                            let iy = (oy * stride + r) as isize - pt as isize;
                            let ix = (ox * stride + c) as isize - pl as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += x[(ci * h + iy as usize) * w + ix as usize]
                                * k[((co * cin + ci) * kh + r) * kw + c];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

/// Mean/variance normalization over a single vector, matching the layer
/// normalization formula (population variance, eps inside the square root).
pub fn naive_layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

/// Single-head attention in naive order: scores, per-row softmax, weighted
/// value sum. `scale` multiplies the raw scores before the softmax.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    dq: usize,
    dv: usize,
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let mut scores = vec![0.0; nk];
        for j in 0..nk {
            let mut s = 0.0;
            for d in 0..dq {
                s += q[i * dq + d] * k[j * dq + d];
            }
            scores[j] = s * scale;
        }
        let w = naive_softmax(&scores);
        for j in 0..nk {
            for d in 0..dv {
                out[i * dv + d] += w[j] * v[j * dv + d];
            }
        }
    }
    out
}

/// Gauss-Legendre quadrature nodes/weights on [-1, 1] (20 points), used to
/// numerically integrate density functions in tests.
const GL20_X: [f64; 20] = [
    -0.9931285991850949,
    -0.9639719272779138,
    -0.9122344282513259,
    -0.8391169718222188,
    -0.7463319064601508,
    -0.6360536807265150,
    -0.5108670019508271,
    -0.3737060887154195,
    -0.2277858511416451,
    -0.0765265211334973,
    0.0765265211334973,
    0.2277858511416451,
    0.3737060887154195,
    0.5108670019508271,
    0.6360536807265150,
    0.7463319064601508,
    0.8391169718222188,
    0.9122344282513259,
    0.9639719272779138,
    0.9931285991850949,
];
const GL20_W: [f64; 20] = [
    0.0176140071391521,
    0.0406014298003869,
    0.0626720483341091,
    0.0832767415767048,
    0.1019301198172404,
    0.1181945319615184,
    0.1316886384491766,
    0.1420961093183820,
    0.1491729864726037,
    0.1527533871307258,
    0.1527533871307258,
    0.1491729864726037,
    0.1420961093183820,
    0.1316886384491766,
    0.1181945319615184,
    0.1019301198172404,
    0.0832767415767048,
    0.0626720483341091,
    0.0406014298003869,
    0.0176140071391521,
];

/// Integrate `f` over the rectangle [ax,bx] x [ay,by] with a tensor-product
/// Gauss-Legendre rule, subdividing each axis into `cells` panels.
pub fn quadrature_2d(
    f: &dyn Fn(f64, f64) -> f64,
    ax: f64,
    bx: f64,
    ay: f64,
    by: f64,
    cells: usize,
) -> f64 {
    let hx = (bx - ax) / cells as f64;
    let hy = (by - ay) / cells as f64;
    let mut total = 0.0;
    for cx in 0..cells {
        let x0 = ax + cx as f64 * hx;
        for cy in 0..cells {
            let y0 = ay + cy as f64 * hy;
            let mut cell = 0.0;
            for (xi, wx) in GL20_X.iter().zip(&GL20_W) {
                let x = x0 + 0.5 * hx * (xi + 1.0);
                for (yi, wy) in GL20_X.iter().zip(&GL20_W) {
                    let y = y0 + 0.5 * hy * (yi + 1.0);
                    cell += wx * wy * f(x, y);
                }
            }
            total += cell * 0.25 * hx * hy;
        }
    }
    total
}

// ─── gradient checking ──────────────────────────────────────────────────────

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name and flat index of the worst entry.
    pub worst: String,
}

/// Central-difference gradient check. `build` must rebuild the scalar loss
/// from the current parameter values each call. For every listed tensor a
/// subset of entries (up to `samples` each, chosen deterministically) is
/// perturbed by +/-h and the quotient compared against the recorded gradient.
///
/// Entries where both gradients are below the finite-difference resolution
/// (1e-7), or whose absolute difference is below it, count as passes; the
/// quotient noise floor makes a ratio on such entries meaningless. Relative
/// error is measured against the larger magnitude otherwise.
pub fn check_gradients(
    params: &[(&str, &Tensor)],
    build: &dyn Fn() -> Result<Tensor>,
    h: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradReport> {
    for (_, t) in params {
        t.zero_grad();
    }
    let loss = build()?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    const RESOLUTION: f64 = 1e-7;

    for (pi, (name, t)) in params.iter().enumerate() {
        let n = t.numel();
        let indices: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            // distinct deterministic sample without replacement
            let mut seen = std::collections::HashSet::new();
            let mut out = Vec::with_capacity(samples);
            while out.len() < samples {
                let i = rng.below(n);
                if seen.insert(i) {
                    out.push(i);
                }
            }
            out
        };
        for &i in &indices {
            let orig = t.value()[i];
            let set = |v: f64| {
                let mut data = t.value();
                data[i] = v;
                t.set_data(data);
            };
            set(orig + h);
            let lp = no_grad(|| build())?.item();
            set(orig - h);
            let lm = no_grad(|| build())?.item();
            set(orig);
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[pi][i];
            report.checked += 1;
            if (a.abs() < RESOLUTION && fd.abs() < RESOLUTION) || (a - fd).abs() < RESOLUTION {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}] analytic={a} fd={fd}");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_matmul_known_product() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn naive_softmax_sums_to_one() {
        let s = naive_softmax(&[0.3, -1.2, 2.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_integrates_polynomial_exactly() {
        // integral of x^2 * y over [0,1]x[0,2] = (1/3) * 2 = 2/3
        let v = quadrature_2d(&|x, y| x * x * y, 0.0, 1.0, 0.0, 2.0, 1);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_standard_normal_mass() {
        let f = |x: f64, y: f64| {
            (-(x * x + y * y) / 2.0).exp() / (2.0 * std::f64::consts::PI)
        };
        let v = quadrature_2d(&f, -8.0, 8.0, -8.0, 8.0, 4);
        assert!((v - 1.0).abs() < 1e-9, "mass {v}");
    }
}
