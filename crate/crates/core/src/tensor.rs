//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap handles (`Rc`) onto graph nodes. Every op records its
//! parents and a pullback closure when gradients are being tracked; calling
//! [`backward`] on a scalar walks the graph in reverse creation order and
//! accumulates gradients into every tensor that requires them. Wrapping
//! evaluation in [`no_grad`] skips all bookkeeping.
//!
//! All math is 64-bit. Forward ops debug-assert their outputs are finite.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|c| c.get() == 0)
}

/// Run `f` with gradient tracking disabled; ops inside build no graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD_DEPTH.with(|c| c.set(c.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|c| c.set(c.get() - 1));
    out
}

type Vjp = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    vjp: Option<Vjp>,
}

/// Handle to a value in the computation graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..{}]={:?})",
            n.shape,
            n.requires_grad,
            n.data.len().min(4),
            &n.data[..n.data.len().min(4)]
        )
    }
}

fn check_finite(data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by a forward op"
    );
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        vjp: Option<Vjp>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(&data);
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                id: fresh_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                parents,
                vjp,
            })),
        }
    }

    /// Output node of an op: tracks gradients iff tracking is on and any
    /// parent requires them.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, vjp: Vjp) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Tensor::new_node(shape, data, true, parents, Some(vjp))
        } else {
            Tensor::new_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} expects {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, Vec::new(), None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_node(vec![1], vec![v], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; n], false, Vec::new(), None)
    }

    /// Leaf that participates in gradient computation (a parameter).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Run `f` over the node's data in place, without cloning it out.
    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Scalar extraction; panics if not a single-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Copy of the value as a fresh leaf outside the graph.
    pub fn detach(&self) -> Tensor {
        let n = self.inner.borrow();
        Tensor::new_node(n.shape.clone(), n.data.clone(), false, Vec::new(), None)
    }

    /// Overwrite the value in place (optimizer updates on leaves).
    pub fn set_data(&self, data: Vec<f64>) {
        let mut n = self.inner.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data = data;
    }

    pub fn map_data(&self, f: impl FnMut(&mut f64)) {
        self.inner.borrow_mut().data.iter_mut().for_each(f);
    }

    fn id(&self) -> u64 {
        self.inner.borrow().id
    }
}

fn accum_grad(t: &Tensor, contrib: &[f64]) {
    let mut n = t.inner.borrow_mut();
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => n.grad = Some(contrib.to_vec()),
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable tensor with `requires_grad`; call
/// [`ParamStore::zero_grad`] between steps.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward expects a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Contract(
            "backward on a tensor with no gradient path".into(),
        ));
    }

    // Children always have larger ids than parents, so reverse-id order is a
    // valid topological order.
    let mut reachable: Vec<Tensor> = Vec::new();
    let mut seen: HashMap<u64, ()> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        let id = t.id();
        if seen.contains_key(&id) {
            continue;
        }
        seen.insert(id, ());
        for p in t.inner.borrow().parents.iter() {
            if p.requires_grad() {
                stack.push(p.clone());
            }
        }
        reachable.push(t);
    }
    reachable.sort_by(|a, b| b.id().cmp(&a.id()));

    accum_grad(loss, &[1.0]);
    for t in &reachable {
        let (grad, data, parents, vjp_present) = {
            let n = t.inner.borrow();
            match (&n.grad, &n.vjp) {
                (Some(g), Some(_)) => (g.clone(), n.data.clone(), n.parents.clone(), true),
                _ => continue,
            }
        };
        if vjp_present {
            let n = t.inner.borrow();
            if let Some(vjp) = &n.vjp {
                vjp(&grad, &data, &parents);
            }
        }
    }
    Ok(())
}

// ─── raw kernels ────────────────────────────────────────────────────────────

/// out += a[m,k] @ b[k,n], accumulation ordered over k ascending.
fn gemm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Output index range [lo, hi) along one conv axis where the input index
/// o*stride + r - pad stays inside [0, extent).
fn conv_out_range(
    r: usize,
    pad: usize,
    extent: usize,
    stride: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = if pad > r { (pad - r).div_ceil(stride) } else { 0 };
    if extent + pad <= r {
        return (0, 0);
    }
    let hi = ((extent + pad - r - 1) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

/// out[m,k] += a[m,n] @ b[k,n]^T  (row-dot-row).
fn gemm_abt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T @ c[m,n].
fn gemm_atb(out: &mut [f64], a: &[f64], c: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

// ─── shape helpers ──────────────────────────────────────────────────────────

fn split_matmul_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        3 => Ok((shape[0], shape[1], shape[2])),
        _ => Err(Error::Dimension(format!(
            "matmul supports rank 2 or 3, got shape {:?}",
            shape
        ))),
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if len == 0 {
        return Err(Error::Dimension(format!(
            "empty axis {} in shape {:?}",
            axis, shape
        )));
    }
    Ok((outer, len, inner))
}

// ─── operations ─────────────────────────────────────────────────────────────

impl Tensor {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    /// Rank-2 operands are treated as a single batch; a rank-2 operand
    /// broadcasts across the other side's batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let (ba, m, ka) = split_matmul_shape(&sa)?;
        let (bb, kb, n) = split_matmul_shape(&sb)?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: lhs {:?} vs rhs {:?}",
                sa, sb
            )));
        }
        if ba != bb && ba != 1 && bb != 1 {
            return Err(Error::Dimension(format!(
                "matmul batch extents not broadcastable: lhs {:?} vs rhs {:?}",
                sa, sb
            )));
        }
        let batch = ba.max(bb);
        let k = ka;
        let mut out = vec![0.0; batch * m * n];
        {
            let an = self.inner.borrow();
            let bn = other.inner.borrow();
            let (a, b) = (&an.data, &bn.data);
            for bi in 0..batch {
                let ai = if ba == 1 { 0 } else { bi };
                let bj = if bb == 1 { 0 } else { bi };
                gemm_nn(
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    &a[ai * m * k..(ai + 1) * m * k],
                    &b[bj * k * n..(bj + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out_shape = if sa.len() == 2 && sb.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let (pba, pbb) = (ba, bb);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _out, parents| {
                let (pa, pb) = (&parents[0], &parents[1]);
                // dA = dC @ B^T
                let contrib_a = {
                    let bnode = pb.inner.borrow();
                    let mut da = vec![0.0; pba * m * k];
                    for bi in 0..batch {
                        let ai = if pba == 1 { 0 } else { bi };
                        let bj = if pbb == 1 { 0 } else { bi };
                        gemm_abt(
                            &mut da[ai * m * k..(ai + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bnode.data[bj * k * n..(bj + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                    da
                };
                accum_grad(pa, &contrib_a);
                // dB = A^T @ dC
                let contrib_b = {
                    let anode = pa.inner.borrow();
                    let mut db = vec![0.0; pbb * k * n];
                    for bi in 0..batch {
                        let ai = if pba == 1 { 0 } else { bi };
                        let bj = if pbb == 1 { 0 } else { bi };
                        gemm_atb(
                            &mut db[bj * k * n..(bj + 1) * k * n],
                            &anode.data[ai * m * k..(ai + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    db
                };
                accum_grad(pb, &contrib_b);
            }),
        ))
    }

    /// 2-D transpose (materialized).
    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose2d expects rank 2, got {:?}",
                s
            )));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        self.with_data(|x| {
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
        });
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                accum_grad(&parents[0], &dx);
            }),
        ))
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{} shape mismatch: {:?} vs {:?}",
                op,
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let out: Vec<f64> =
            self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _o, ps| {
                accum_grad(&ps[0], g);
                accum_grad(&ps[1], g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let out: Vec<f64> =
            self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _o, ps| {
                accum_grad(&ps[0], g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accum_grad(&ps[1], &neg);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let out: Vec<f64> =
            self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _o, ps| {
                let ca: Vec<f64> = {
                    let b = ps[1].inner.borrow();
                    g.iter().zip(&b.data).map(|(gi, bi)| gi * bi).collect()
                };
                accum_grad(&ps[0], &ca);
                let cb: Vec<f64> = {
                    let a = ps[0].inner.borrow();
                    g.iter().zip(&a.data).map(|(gi, ai)| gi * ai).collect()
                };
                accum_grad(&ps[1], &cb);
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "div")?;
        let out: Vec<f64> =
            self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x / y).collect()));
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _o, ps| {
                let ca: Vec<f64> = {
                    let b = ps[1].inner.borrow();
                    g.iter().zip(&b.data).map(|(gi, bi)| gi / bi).collect()
                };
                accum_grad(&ps[0], &ca);
                let cb: Vec<f64> = {
                    let a = ps[0].inner.borrow();
                    let b = ps[1].inner.borrow();
                    g.iter()
                        .zip(&a.data)
                        .zip(&b.data)
                        .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                        .collect()
                };
                accum_grad(&ps[1], &cb);
            }),
        ))
    }

    /// Broadcast-add a `[n]` bias over the last axis of `[..., n]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        let bs = bias.shape();
        let n = *s.last().ok_or_else(|| {
            Error::Dimension("add_bias on rank-0 tensor".into())
        })?;
        if bs != [n] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match last axis of {:?}",
                bs, s
            )));
        }
        let out: Vec<f64> = self.with_data(|x| {
            bias.with_data(|b| x.iter().enumerate().map(|(i, v)| v + b[i % n]).collect())
        });
        Ok(Tensor::from_op(
            s,
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _o, ps| {
                accum_grad(&ps[0], g);
                let mut db = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi;
                }
                accum_grad(&ps[1], &db);
            }),
        ))
    }

    /// Broadcast-add a `[c]` bias over the channel (first) axis of `[c, h, w]`.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || bias.shape() != [s[0]] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: input {:?}, bias {:?}",
                s,
                bias.shape()
            )));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut out = self.value();
        bias.with_data(|b| {
            for ci in 0..c {
                for i in 0..hw {
                    out[ci * hw + i] += b[ci];
                }
            }
        });
        Ok(Tensor::from_op(
            s,
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _o, ps| {
                accum_grad(&ps[0], g);
                let mut db = vec![0.0; c];
                for ci in 0..c {
                    for i in 0..hw {
                        db[ci] += g[ci * hw + i];
                    }
                }
                accum_grad(&ps[1], &db);
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v * c).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, _o, ps| {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                accum_grad(&ps[0], &dx);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v + c).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g, _o, ps| accum_grad(&ps[0], g)),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v.max(0.0)).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g, o, ps| {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(o)
                    .map(|(gi, oi)| if *oi > 0.0 { *gi } else { 0.0 })
                    .collect();
                accum_grad(&ps[0], &dx);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v.tanh()).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g, o, ps| {
                let dx: Vec<f64> = g.iter().zip(o).map(|(gi, oi)| gi * (1.0 - oi * oi)).collect();
                accum_grad(&ps[0], &dx);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v.exp()).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g, o, ps| {
                let dx: Vec<f64> = g.iter().zip(o).map(|(gi, oi)| gi * oi).collect();
                accum_grad(&ps[0], &dx);
            }),
        )
    }

    pub fn ln(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v.ln()).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g, _o, ps| {
                let dx: Vec<f64> = {
                    let xn = ps[0].inner.borrow();
                    g.iter().zip(&xn.data).map(|(gi, xi)| gi / xi).collect()
                };
                accum_grad(&ps[0], &dx);
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v.sqrt()).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g, o, ps| {
                let dx: Vec<f64> = g.iter().zip(o).map(|(gi, oi)| gi / (2.0 * oi)).collect();
                accum_grad(&ps[0], &dx);
            }),
        )
    }

    /// Clamp values to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out: Vec<f64> = self.with_data(|x| x.iter().map(|v| v.clamp(lo, hi)).collect());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, _o, ps| {
                let dx: Vec<f64> = {
                    let xn = ps[0].inner.borrow();
                    g.iter()
                        .zip(&xn.data)
                        .map(|(gi, xi)| if *xi > lo && *xi < hi { *gi } else { 0.0 })
                        .collect()
                };
                accum_grad(&ps[0], &dx);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.with_data(|x| x.iter().sum());
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _o, ps| {
                accum_grad(&ps[0], &vec![g[0]; n]);
            }),
        )
    }

    /// Reduce a flat vector by index residue: bucket `r` sums entries at
    /// positions `i` with `i % period == r`. Used to fold time-major token
    /// vectors `[T*A]` into per-agent totals `[A]`.
    pub fn period_sum(&self, period: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 || period == 0 || s[0] % period != 0 {
            return Err(Error::Dimension(format!(
                "period_sum: shape {:?} not divisible by period {}",
                s, period
            )));
        }
        let mut out = vec![0.0; period];
        self.with_data(|x| {
            for (i, v) in x.iter().enumerate() {
                out[i % period] += v;
            }
        });
        let n = s[0];
        Ok(Tensor::from_op(
            vec![period],
            out,
            vec![self.clone()],
            Box::new(move |g, _o, ps| {
                let dx: Vec<f64> = (0..n).map(|i| g[i % period]).collect();
                accum_grad(&ps[0], &dx);
            }),
        ))
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_masked(axis, None)
    }

    /// Softmax where `false` mask entries are excluded (treated as -inf
    /// logits) and emit exactly zero. The mask has the tensor's shape.
    pub fn softmax_masked(&self, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
        let s = self.shape();
        let (outer, len, inner) = axis_split(&s, axis)?;
        if let Some(m) = mask {
            if m.len() != self.numel() {
                return Err(Error::Dimension(format!(
                    "softmax mask length {} does not match tensor {:?}",
                    m.len(),
                    s
                )));
            }
        }
        let mut out = vec![0.0; self.numel()];
        {
            let xn = self.inner.borrow();
            let x = &xn.data;
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let allowed = |j: usize| mask.map_or(true, |m| m[idx(j)]);
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        if allowed(j) {
                            mx = mx.max(x[idx(j)]);
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        return Err(Error::Contract(
                            "softmax slice has no unmasked entries".into(),
                        ));
                    }
                    let mut z = 0.0;
                    for j in 0..len {
                        if allowed(j) {
                            let e = (x[idx(j)] - mx).exp();
                            out[idx(j)] = e;
                            z += e;
                        }
                    }
                    for j in 0..len {
                        out[idx(j)] /= z;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            s,
            out,
            vec![self.clone()],
            Box::new(move |g, o, ps| {
                let mut dx = vec![0.0; g.len()];
                for ob in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (ob * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[idx(j)] * o[idx(j)];
                        }
                        for j in 0..len {
                            dx[idx(j)] = o[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accum_grad(&ps[0], &dx);
            }),
        ))
    }

    /// Layer normalization over the last axis with learned gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        let d = *s.last().ok_or_else(|| {
            Error::Dimension("layer_norm on rank-0 tensor".into())
        })?;
        if d < 1 {
            return Err(Error::Dimension("layer_norm: empty last axis".into()));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must be [{}], got {:?}/{:?}",
                d,
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = self.numel() / d;
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        {
            let xn = self.inner.borrow();
            let gn = gain.inner.borrow();
            let bn = bias.inner.borrow();
            let (x, gv, bv) = (&xn.data, &gn.data, &bn.data);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = gv[j] * xh + bv[j];
                }
            }
        }
        Ok(Tensor::from_op(
            s,
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _o, ps| {
                let gv = ps[1].value();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let grow = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat * xhat
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                        dgain[j] += grow[j] * xh[j];
                        dbias[j] += grow[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        dx[r * d + j] = inv_std[r] * (dxh - m1 - xh[j] * m2);
                    }
                }
                accum_grad(&ps[0], &dx);
                accum_grad(&ps[1], &dgain);
                accum_grad(&ps[2], &dbias);
            }),
        ))
    }

    /// 2-D convolution: input `[c_in, h, w]`, kernels `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernels.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects input [c,h,w] and kernels [o,c,kh,kw], got {:?} / {:?}",
                xs, ks
            )));
        }
        if stride < 1 {
            return Err(Error::Parameter(format!("conv2d stride must be >= 1, got {stride}")));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {:?} vs kernels {:?}",
                xs, ks
            )));
        }
        let (oh, ow, pt, pl) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Dimension(format!(
                        "conv2d valid: kernel {:?} larger than input {:?}",
                        ks, xs
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let mut out = vec![0.0; cout * oh * ow];
        {
            let xn = self.inner.borrow();
            let kn = kernels.inner.borrow();
            let (x, k) = (&xn.data, &kn.data);
            for co in 0..cout {
                let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..cin {
                    let xplane = &x[ci * h * w..(ci + 1) * h * w];
                    for r in 0..kh {
                        let (oy_lo, oy_hi) = conv_out_range(r, pt, h, stride, oh);
                        for c in 0..kw {
                            let kv = k[((co * cin + ci) * kh + r) * kw + c];
                            let (ox_lo, ox_hi) = conv_out_range(c, pl, w, stride, ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + r - pt;
                                let orow = &mut oplane[oy * ow + ox_lo..oy * ow + ox_hi];
                                let ix0 = ox_lo * stride + c - pl;
                                if stride == 1 {
                                    let xrow = &xplane[iy * w + ix0..iy * w + ix0 + orow.len()];
                                    for (o, xv) in orow.iter_mut().zip(xrow) {
                                        *o += kv * xv;
                                    }
                                } else {
                                    let xrow = &xplane[iy * w..(iy + 1) * w];
                                    let mut ix = ix0;
                                    for o in orow.iter_mut() {
                                        *o += kv * xrow[ix];
                                        ix += stride;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![cout, oh, ow],
            out,
            vec![self.clone(), kernels.clone()],
            Box::new(move |g, _o, ps| {
                let dx: Vec<f64> = {
                    let kn = ps[1].inner.borrow();
                    let k = &kn.data;
                    let mut dx = vec![0.0; cin * h * w];
                    for co in 0..cout {
                        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
                        for ci in 0..cin {
                            let dxplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                            for r in 0..kh {
                                let (oy_lo, oy_hi) = conv_out_range(r, pt, h, stride, oh);
                                for c in 0..kw {
                                    let kv = k[((co * cin + ci) * kh + r) * kw + c];
                                    let (ox_lo, ox_hi) = conv_out_range(c, pl, w, stride, ow);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy * stride + r - pt;
                                        let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_hi];
                                        let ix0 = ox_lo * stride + c - pl;
                                        if stride == 1 {
                                            let dxrow = &mut dxplane
                                                [iy * w + ix0..iy * w + ix0 + grow.len()];
                                            for (d, gv) in dxrow.iter_mut().zip(grow) {
                                                *d += kv * gv;
                                            }
                                        } else {
                                            let dxrow = &mut dxplane[iy * w..(iy + 1) * w];
                                            let mut ix = ix0;
                                            for gv in grow {
                                                dxrow[ix] += kv * gv;
                                                ix += stride;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dx
                };
                accum_grad(&ps[0], &dx);
                let dk: Vec<f64> = {
                    let xn = ps[0].inner.borrow();
                    let x = &xn.data;
                    let mut dk = vec![0.0; cout * cin * kh * kw];
                    for co in 0..cout {
                        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
                        for ci in 0..cin {
                            let xplane = &x[ci * h * w..(ci + 1) * h * w];
                            for r in 0..kh {
                                let (oy_lo, oy_hi) = conv_out_range(r, pt, h, stride, oh);
                                for c in 0..kw {
                                    let (ox_lo, ox_hi) = conv_out_range(c, pl, w, stride, ow);
                                    let mut s = 0.0;
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy * stride + r - pt;
                                        let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_hi];
                                        let ix0 = ox_lo * stride + c - pl;
                                        if stride == 1 {
                                            let xrow =
                                                &xplane[iy * w + ix0..iy * w + ix0 + grow.len()];
                                            for (gv, xv) in grow.iter().zip(xrow) {
                                                s += gv * xv;
                                            }
                                        } else {
                                            let xrow = &xplane[iy * w..(iy + 1) * w];
                                            let mut ix = ix0;
                                            for gv in grow {
                                                s += gv * xrow[ix];
                                                ix += stride;
                                            }
                                        }
                                    }
                                    dk[((co * cin + ci) * kh + r) * kw + c] += s;
                                }
                            }
                        }
                    }
                    dk
                };
                accum_grad(&ps[1], &dk);
            }),
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut total_axis = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::Dimension(format!(
                    "concat shape mismatch: {:?} vs {:?} on axis {}",
                    first, s, axis
                )));
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0;
        for p in parts {
            let s = p.shape();
            let alen = s[axis];
            offsets.push((off, alen));
            p.with_data(|x| {
                for o in 0..outer {
                    let src = &x[o * alen * inner..(o + 1) * alen * inner];
                    let dst_start = (o * total_axis + off) * inner;
                    out[dst_start..dst_start + alen * inner].copy_from_slice(src);
                }
            });
            off += alen;
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |g, _o, ps| {
                for (pi, p) in ps.iter().enumerate() {
                    let (off, alen) = offsets[pi];
                    let mut dp = vec![0.0; outer * alen * inner];
                    for o in 0..outer {
                        let src_start = (o * total_axis + off) * inner;
                        dp[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&g[src_start..src_start + alen * inner]);
                    }
                    accum_grad(p, &dp);
                }
            }),
        ))
    }

    /// Row selection: `x[n, d]` (or `[n]`) gathered by `indices` -> `[m, d]`.
    /// Duplicated indices are allowed; gradients scatter-add. Also serves as
    /// the embedding-table lookup.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let (n, d) = match s.len() {
            1 => (s[0], 1),
            2 => (s[0], s[1]),
            _ => {
                return Err(Error::Dimension(format!(
                    "gather_rows expects rank 1 or 2, got {:?}",
                    s
                )))
            }
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows index {} out of range for {} rows",
                bad, n
            )));
        }
        let m = indices.len();
        let mut out = vec![0.0; m * d];
        self.with_data(|x| {
            for (r, &i) in indices.iter().enumerate() {
                out[r * d..(r + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
            }
        });
        let out_shape = if s.len() == 1 { vec![m] } else { vec![m, d] };
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _o, ps| {
                let mut dx = vec![0.0; n * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += g[r * d + j];
                    }
                }
                accum_grad(&ps[0], &dx);
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        let (outer, alen, inner) = axis_split(&s, axis)?;
        if start + len > alen {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) exceeds axis {} of {:?}",
                start + len,
                axis,
                s
            )));
        }
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        self.with_data(|x| {
            for o in 0..outer {
                let src = (o * alen + start) * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&x[src..src + len * inner]);
            }
        });
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _o, ps| {
                let mut dx = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accum_grad(&ps[0], &dx);
            }),
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if new_shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                new_shape
            )));
        }
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.value(),
            vec![self.clone()],
            Box::new(|g, _o, ps| accum_grad(&ps[0], g)),
        ))
    }

    /// Dot product with a constant weight vector -> scalar.
    pub fn dot_const(&self, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "dot_const weights len {} vs tensor {:?}",
                weights.len(),
                self.shape()
            )));
        }
        let s: f64 = self.with_data(|x| x.iter().zip(weights).map(|(a, b)| a * b).sum());
        let w = weights.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _o, ps| {
                let dx: Vec<f64> = w.iter().map(|wi| g[0] * wi).collect();
                accum_grad(&ps[0], &dx);
            }),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

// ─── parameter store ────────────────────────────────────────────────────────

/// Ordered, uniquely named collection of parameter tensors. Iteration order
/// is insertion order, which fixes the checkpoint layout.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; returns a handle to the stored tensor.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name: {name}")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor.clone()));
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Flat copy of all values in store order.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.value());
        }
        out
    }

    /// Restore values from a flat snapshot in store order.
    pub fn restore(&self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_values() {
            return Err(Error::Dimension(format!(
                "snapshot has {} values, store holds {}",
                flat.len(),
                self.total_values()
            )));
        }
        let mut off = 0;
        for (_, t) in &self.entries {
            let n = t.numel();
            t.set_data(flat[off..off + n].to_vec());
            off += n;
        }
        Ok(())
    }
}
