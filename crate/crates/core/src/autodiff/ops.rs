//! Differentiable primitives on [`Var`].

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom, LinearTaps};
use crate::tensor::{strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; ties route the gradient to the left operand.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
    Mean,
}

/// Right-hand side of a binary elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'t> {
    Var(Var<'t>),
    Scalar(f64),
}

impl<'t> From<Var<'t>> for Operand<'t> {
    fn from(v: Var<'t>) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand<'_> {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .zip(c.data())
            .map(|((&x, &y), &z)| f(x, y, z))
            .collect(),
    )
}

fn check_dims(op: &'static str, rank: usize, dims: &[usize]) -> Result<Vec<bool>> {
    if dims.is_empty() {
        return Err(Error::contract(op, "empty reduction dimension set"));
    }
    let mut mask = vec![false; rank];
    for &d in dims {
        if d >= rank {
            return Err(Error::contract(
                op,
                format!("dimension {d} out of range for rank {rank}"),
            ));
        }
        if mask[d] {
            return Err(Error::contract(op, format!("dimension {d} repeated")));
        }
        mask[d] = true;
    }
    Ok(mask)
}

/// Maps every input flat index to its flat index in the kept-dims output.
fn reduction_map(shape: &[usize], mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_keep: Vec<usize> = shape
        .iter()
        .zip(mask)
        .map(|(&d, &m)| if m { 1 } else { d })
        .collect();
    let out_strides = strides_of(&out_keep);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let o = idx
            .iter()
            .zip(&out_strides)
            .zip(mask)
            .map(|((&i, &s), &m)| if m { 0 } else { i * s })
            .sum();
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (map, out_keep)
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn geom_for(op: &'static str, spatial: &[usize], kernels: &[usize]) -> Result<(usize, usize)> {
    if kernels.len() != 4 {
        return Err(Error::contract(
            op,
            format!("kernels must be rank 4, got {kernels:?}"),
        ));
    }
    let (kh, kw) = (kernels[2], kernels[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::contract(
            op,
            format!("kernel extents must be odd, got {kh}x{kw}"),
        ));
    }
    if spatial.len() != 2 {
        return Err(Error::contract(op, "input must be rank 3"));
    }
    Ok((kh, kw))
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    // ---- elementwise -------------------------------------------------

    pub fn binary(self, kind: BinaryKind, rhs: impl Into<Operand<'t>>) -> Result<Var<'t>> {
        let a = self.value();
        match rhs.into() {
            Operand::Scalar(s) => self.binary_scalar(kind, &a, s),
            Operand::Var(other) => {
                let b = other.value();
                if a.shape() != b.shape() {
                    return Err(Error::shape(binary_name(kind), a.shape(), b.shape()));
                }
                let out = match kind {
                    BinaryKind::Add => zip_map(&a, &b, |x, y| x + y),
                    BinaryKind::Sub => zip_map(&a, &b, |x, y| x - y),
                    BinaryKind::Mul => zip_map(&a, &b, |x, y| x * y),
                    BinaryKind::Div => zip_map(&a, &b, |x, y| x / y),
                    BinaryKind::Max => zip_map(&a, &b, |x, y| if x >= y { x } else { y }),
                };
                let (ra, rb) = (Rc::clone(&a), Rc::clone(&b));
                self.tape.record(binary_name(kind), out, &[self, other], move |g, need| {
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (g.clone(), g.map(|v| v)),
                        BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                        BinaryKind::Mul => (zip_map(g, &rb, |g, y| g * y), zip_map(g, &ra, |g, x| g * x)),
                        BinaryKind::Div => (
                            zip_map(g, &rb, |g, y| g / y),
                            zip3_map(g, &ra, &rb, |g, x, y| -g * x / (y * y)),
                        ),
                        BinaryKind::Max => (
                            zip3_map(g, &ra, &rb, |g, x, y| if x >= y { g } else { 0.0 }),
                            zip3_map(g, &ra, &rb, |g, x, y| if x >= y { 0.0 } else { g }),
                        ),
                    };
                    vec![need[0].then_some(ga), need[1].then_some(gb)]
                })
            }
        }
    }

    fn binary_scalar(self, kind: BinaryKind, a: &Rc<Tensor>, s: f64) -> Result<Var<'t>> {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("scalar operand of {}", binary_name(kind))));
        }
        let out = match kind {
            // Adding zero is an exact identity (keeps -0.0 intact).
            BinaryKind::Add if s == 0.0 => a.as_ref().clone(),
            BinaryKind::Add => a.map(|x| x + s),
            BinaryKind::Sub => a.map(|x| x - s),
            BinaryKind::Mul => a.map(|x| x * s),
            BinaryKind::Div => a.map(|x| x / s),
            BinaryKind::Max => a.map(|x| if x >= s { x } else { s }),
        };
        let ra = Rc::clone(a);
        self.tape.record(binary_name(kind), out, &[self], move |g, _| {
            let ga = match kind {
                BinaryKind::Add | BinaryKind::Sub => g.clone(),
                BinaryKind::Mul => g.map(|v| v * s),
                BinaryKind::Div => g.map(|v| v / s),
                BinaryKind::Max => zip_map(g, &ra, |g, x| if x >= s { g } else { 0.0 }),
            };
            vec![Some(ga)]
        })
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let a = self.value();
        match kind {
            UnaryKind::Exp => {
                let out = Rc::new(a.map(f64::exp));
                let saved = Rc::clone(&out);
                self.tape
                    .record("exp", out.as_ref().clone(), &[self], move |g, _| {
                        vec![Some(zip_map(g, &saved, |g, y| g * y))]
                    })
            }
            UnaryKind::Relu => {
                let out = a.map(|x| if x > 0.0 { x } else { 0.0 });
                self.tape.record("relu", out, &[self], move |g, _| {
                    vec![Some(zip_map(g, &a, |g, x| if x > 0.0 { g } else { 0.0 }))]
                })
            }
        }
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, rhs)
    }
    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, rhs)
    }
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, rhs)
    }
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, rhs)
    }
    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Max, rhs)
    }
    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, s)
    }
    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, s)
    }
    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }
    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Relu)
    }

    // ---- reductions and shape ----------------------------------------

    /// Reduces over `dims`. With `keepdim` the reduced extents stay as 1.
    /// Max routes its gradient to the first maximal element in row-major
    /// order.
    pub fn reduce(self, kind: ReduceKind, dims: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let a = self.value();
        let mask = check_dims("reduce", a.rank(), dims)?;
        let (map, keep_shape) = reduction_map(a.shape(), &mask);
        let out_n: usize = keep_shape.iter().product();
        let count = a.numel() / out_n;
        let mut out = match kind {
            ReduceKind::Max => vec![f64::NEG_INFINITY; out_n],
            _ => vec![0.0; out_n],
        };
        let mut arg = vec![usize::MAX; if kind == ReduceKind::Max { out_n } else { 0 }];
        for (i, (&v, &o)) in a.data().iter().zip(&map).enumerate() {
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => out[o] += v,
                ReduceKind::Max => {
                    if arg[o] == usize::MAX || v > out[o] {
                        out[o] = v;
                        arg[o] = i;
                    }
                }
            }
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let out_shape: Vec<usize> = if keepdim {
            keep_shape
        } else {
            a.shape()
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| !m)
                .map(|(&d, _)| d)
                .collect()
        };
        let in_shape = a.shape().to_vec();
        let out = Tensor::from_parts(out_shape, out);
        self.tape.record("reduce", out, &[self], move |g, _| {
            let gd = g.data();
            let data: Vec<f64> = match kind {
                ReduceKind::Sum => map.iter().map(|&o| gd[o]).collect(),
                ReduceKind::Mean => {
                    let inv = 1.0 / count as f64;
                    map.iter().map(|&o| gd[o] * inv).collect()
                }
                ReduceKind::Max => {
                    let mut d = vec![0.0; map.len()];
                    for (o, &i) in arg.iter().enumerate() {
                        d[i] = gd[o];
                    }
                    d
                }
            };
            vec![Some(Tensor::from_parts(in_shape.clone(), data))]
        })
    }

    pub fn sum(self, dims: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, dims, keepdim)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let dims: Vec<usize> = (0..self.value().rank()).collect();
        if dims.is_empty() {
            return Ok(self);
        }
        self.reduce(ReduceKind::Sum, &dims, false)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let dims: Vec<usize> = (0..self.value().rank()).collect();
        if dims.is_empty() {
            return Ok(self);
        }
        self.reduce(ReduceKind::Mean, &dims, false)
    }

    /// Expands extents of 1 to `shape`; gradients are summed back.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != shape.len()
            || a.shape().iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::shape("broadcast_to", a.shape(), shape));
        }
        let mask: Vec<bool> = a.shape().iter().zip(shape).map(|(&s, &t)| s != t).collect();
        if !mask.iter().any(|&m| m) {
            return Ok(self);
        }
        let (map, _) = reduction_map(shape, &mask);
        let data: Vec<f64> = map.iter().map(|&o| a.data()[o]).collect();
        let src_shape = a.shape().to_vec();
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.tape.record("broadcast_to", out, &[self], move |g, _| {
            let mut acc = vec![0.0; src_shape.iter().product()];
            for (&v, &o) in g.data().iter().zip(&map) {
                acc[o] += v;
            }
            vec![Some(Tensor::from_parts(src_shape.clone(), acc))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = a.reshape(shape)?;
        let src = a.shape().to_vec();
        self.tape.record("reshape", out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(src.clone(), g.data().to_vec()))]
        })
    }

    /// Reverses the last two axes (a 180 degree rotation of each plane).
    pub fn flip_hw(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() < 2 {
            return Err(Error::contract("flip_hw", "needs rank >= 2"));
        }
        let out = flip_last_two(&a);
        self.tape
            .record("flip_hw", out, &[self], move |g, _| vec![Some(flip_last_two(g))])
    }

    // ---- normalization ------------------------------------------------

    /// Softmax along `dim`, computed with max subtraction.
    pub fn softmax(self, dim: usize) -> Result<Var<'t>> {
        let a = self.value();
        if dim >= a.rank() {
            return Err(Error::contract(
                "softmax",
                format!("dimension {dim} out of range for rank {}", a.rank()),
            ));
        }
        let (outer, n, inner) = split_axis(a.shape(), dim);
        let src = a.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * n * inner + t * inner + i;
                let m = (0..n).map(|t| src[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for t in 0..n {
                    let e = (src[at(t)] - m).exp();
                    out[at(t)] = e;
                    z += e;
                }
                for t in 0..n {
                    out[at(t)] /= z;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(a.shape().to_vec(), out));
        let saved = Rc::clone(&y);
        self.tape
            .record("softmax", y.as_ref().clone(), &[self], move |g, _| {
                let (yd, gd) = (saved.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| o * n * inner + t * inner + i;
                        let dot: f64 = (0..n).map(|t| gd[at(t)] * yd[at(t)]).sum();
                        for t in 0..n {
                            gx[at(t)] = yd[at(t)] * (gd[at(t)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(saved.shape().to_vec(), gx))]
            })
    }

    /// Layer normalization over `axis` (the channel axis) at every other
    /// index, followed by a per-channel affine map.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, axis: usize, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        if axis >= a.rank() {
            return Err(Error::contract("layer_norm", "channel axis out of range"));
        }
        let c = a.shape()[axis];
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("layer_norm", a.shape(), gv.shape()));
        }
        let (outer, n, inner) = split_axis(a.shape(), axis);
        let src = a.data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * n * inner + t * inner + i;
                let mean = (0..n).map(|t| src[at(t)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|t| (src[at(t)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for t in 0..n {
                    let xh = (src[at(t)] - mean) * is;
                    xhat[at(t)] = xh;
                    out[at(t)] = gv.data()[t] * xh + bv.data()[t];
                }
            }
        }
        let shape = a.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        self.tape
            .record("layer_norm", out, &[self, gamma, beta], move |g, need| {
                let gd = g.data();
                let gam = gv.data();
                let mut gx = vec![0.0; gd.len()];
                let mut ggam = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| o * n * inner + t * inner + i;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for t in 0..n {
                            let d = gd[at(t)] * gam[t];
                            mean_d += d;
                            mean_dx += d * xhat[at(t)];
                            ggam[t] += gd[at(t)] * xhat[at(t)];
                            gbeta[t] += gd[at(t)];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let is = inv_std[o * inner + i];
                        for t in 0..n {
                            let d = gd[at(t)] * gam[t];
                            gx[at(t)] = is * (d - mean_d - xhat[at(t)] * mean_dx);
                        }
                    }
                }
                vec![
                    need[0].then(|| Tensor::from_parts(shape.clone(), gx)),
                    need[1].then(|| Tensor::from_parts(vec![n], ggam)),
                    need[2].then(|| Tensor::from_parts(vec![n], gbeta)),
                ]
            })
    }

    // ---- spatial -----------------------------------------------------

    /// Same-padded cross-correlation: `[C,H,W] x [K,C,kh,kw] -> [K,H,W]`.
    pub fn cross_correlate_2d(self, kernels: Var<'t>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernels.value());
        if x.rank() != 3 {
            return Err(Error::contract("cross_correlate_2d", "input must be [C,H,W]"));
        }
        let (kh, kw) = geom_for("cross_correlate_2d", &x.shape()[1..], w.shape())?;
        if w.shape()[1] != x.shape()[0] {
            return Err(Error::shape("cross_correlate_2d", x.shape(), w.shape()));
        }
        let g = ConvGeom {
            k: w.shape()[0],
            c: x.shape()[0],
            h: x.shape()[1],
            w: x.shape()[2],
            kh,
            kw,
        };
        let mut out = vec![0.0; g.k * g.h * g.w];
        kernels::correlate(g, x.data(), w.data(), &mut out);
        let out = Tensor::from_parts(vec![g.k, g.h, g.w], out);
        self.tape
            .record("cross_correlate_2d", out, &[self, kernels], move |go, need| {
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; x.numel()];
                    kernels::correlate_grad_input(g, go.data(), w.data(), &mut gx);
                    Tensor::from_parts(x.shape().to_vec(), gx)
                });
                let gw = need[1].then(|| {
                    let mut gw = vec![0.0; w.numel()];
                    kernels::correlate_grad_weight(g, go.data(), x.data(), &mut gw);
                    Tensor::from_parts(w.shape().to_vec(), gw)
                });
                vec![gx, gw]
            })
    }

    /// Per-exemplar true convolution that stamps each kernel at the weights
    /// in `self`: `[K,H,W] x [K,C,kh,kw] -> [K,C,H,W]`.
    pub fn convolve_place_2d(self, kernels: Var<'t>) -> Result<Var<'t>> {
        let (a, w) = (self.value(), kernels.value());
        if a.rank() != 3 {
            return Err(Error::contract("convolve_place_2d", "weights must be [K,H,W]"));
        }
        let (kh, kw) = geom_for("convolve_place_2d", &a.shape()[1..], w.shape())?;
        if w.shape()[0] != a.shape()[0] {
            return Err(Error::shape("convolve_place_2d", a.shape(), w.shape()));
        }
        let g = ConvGeom {
            k: a.shape()[0],
            c: w.shape()[1],
            h: a.shape()[1],
            w: a.shape()[2],
            kh,
            kw,
        };
        let mut out = vec![0.0; g.k * g.c * g.h * g.w];
        kernels::place(g, a.data(), w.data(), &mut out);
        let out = Tensor::from_parts(vec![g.k, g.c, g.h, g.w], out);
        self.tape
            .record("convolve_place_2d", out, &[self, kernels], move |go, need| {
                let ga = need[0].then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    kernels::place_grad_input(g, go.data(), w.data(), &mut ga);
                    Tensor::from_parts(a.shape().to_vec(), ga)
                });
                let gw = need[1].then(|| {
                    let mut gw = vec![0.0; w.numel()];
                    kernels::place_grad_weight(g, go.data(), a.data(), &mut gw);
                    Tensor::from_parts(w.shape().to_vec(), gw)
                });
                vec![ga, gw]
            })
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C,H,W]` map.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if x.rank() != 3 || b.shape() != [x.shape()[0]] {
            return Err(Error::shape("add_channel_bias", x.shape(), b.shape()));
        }
        let plane = x.shape()[1] * x.shape()[2];
        let mut out = x.data().to_vec();
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        self.tape
            .record("add_channel_bias", out, &[self, bias], move |g, need| {
                let gb = need[1].then(|| {
                    let sums = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                    Tensor::from_parts(vec![shape[0]], sums)
                });
                vec![need[0].then(|| g.clone()), gb]
            })
    }

    /// Bilinear resize of a `[C,H,W]` map with half-pixel centers.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::contract("bilinear_resize", "input must be [C,H,W]"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::contract("bilinear_resize", "output extents must be >= 1"));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if (h, w) == (out_h, out_w) {
            let out = x.as_ref().clone();
            return self
                .tape
                .record("bilinear_resize", out, &[self], |g, _| vec![Some(g.clone())]);
        }
        let ty = LinearTaps::new(h, out_h);
        let tx = LinearTaps::new(w, out_w);
        let out = resize_with(&x, &ty, &tx);
        self.tape.record("bilinear_resize", out, &[self], move |g, _| {
            let mut gi = vec![0.0; c * h * w];
            for p in 0..c {
                kernels::resize_plane_grad(
                    &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w],
                    w,
                    &ty,
                    &tx,
                    &mut gi[p * h * w..(p + 1) * h * w],
                );
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], gi))]
        })
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
        BinaryKind::Max => "max",
    }
}

pub(crate) fn flip_last_two(a: &Tensor) -> Tensor {
    let r = a.rank();
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    let mut out = vec![0.0; a.numel()];
    for (src, dst) in a.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                dst[(h - 1 - y) * w + (w - 1 - x)] = src[y * w + x];
            }
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

fn resize_with(x: &Tensor, ty: &LinearTaps, tx: &LinearTaps) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![0.0; c * oh * ow];
    for p in 0..c {
        kernels::resize_plane(
            &x.data()[p * h * w..(p + 1) * h * w],
            w,
            ty,
            tx,
            &mut out[p * oh * ow..(p + 1) * oh * ow],
        );
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

/// Untracked bilinear resize of a `[C,H,W]` tensor (half-pixel centers).
pub(crate) fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    resize_with(x, &LinearTaps::new(h, out_h), &LinearTaps::new(w, out_w))
}
