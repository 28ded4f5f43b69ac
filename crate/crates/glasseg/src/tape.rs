//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients. Values are immutable once
//! recorded, so backward can read any intermediate without recomputation
//! (convolution re-runs im2col instead of caching the column matrix, trading
//! time for memory).

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Slice};

use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// y = mul * x + add, elementwise with scalar constants; only the slope
    /// matters for backward.
    Affine {
        x: usize,
        mul: F,
    },
    /// y = s * x where `s` is a 0-dim variable (learnable scale).
    ScaleBy {
        x: usize,
        s: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Ln(usize),
    Clamp {
        x: usize,
        lo: F,
        hi: F,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Array1<F>,
        inv_std: Array1<F>,
        /// Batch statistics were used; backward must account for the
        /// dependence of mean/var on the input.
        batch_stats: bool,
    },
    UpsampleBilinear {
        x: usize,
    },
    ConcatChannels(Vec<usize>),
    GlobalAvgPool(usize),
    /// Per-channel gate, g has shape (B, C, 1, 1).
    ChannelGate {
        x: usize,
        g: usize,
    },
    /// Per-position gate, g has shape (B, 1, H, W).
    SpatialGate {
        x: usize,
        g: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    /// 0-dim division.
    DivScalars {
        num: usize,
        den: usize,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-dim node.
    pub fn scalar_value(&self, v: Var) -> F {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn affine(&mut self, x: Var, mul: F, add: F) -> Var {
        let v = self.value(x).mapv(|e| mul * e + add);
        let ng = self.needs(x);
        self.push(v, Op::Affine { x: x.0, mul }, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -F::one(), F::zero())
    }

    /// Multiply a tensor by a 0-dim variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by expects 0-dim scale");
        let sv = self.scalar_value(s);
        let v = self.value(x).mapv(|e| sv * e);
        let ng = self.needs(x) || self.needs(s);
        self.push(v, Op::ScaleBy { x: x.0, s: s.0 }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| if e > F::zero() { e } else { F::zero() });
        let ng = self.needs(x);
        self.push(v, Op::Relu(x.0), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid_scalar);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x.0), ng)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.ln());
        let ng = self.needs(x);
        self.push(v, Op::Ln(x.0), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let v = self.value(x).mapv(|e| e.max(lo).min(hi));
        let ng = self.needs(x);
        self.push(v, Op::Clamp { x: x.0, lo, hi }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(x.0), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = F::cast_from(self.value(x).len() as f64);
        let s = self.value(x).sum() / n;
        let ng = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(x.0), ng)
    }

    pub fn div_scalars(&mut self, num: Var, den: Var) -> Var {
        assert_eq!(self.value(num).len(), 1);
        assert_eq!(self.value(den).len(), 1);
        let v = self.scalar_value(num) / self.scalar_value(den);
        let ng = self.needs(num) || self.needs(den);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), v),
            Op::DivScalars {
                num: num.0,
                den: den.0,
            },
            ng,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (batch, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_dim(h, kh, geom.stride.0, geom.pad.0, geom.dilation.0);
        let ow = conv_out_dim(wdt, kw, geom.stride.1, geom.pad.1, geom.dilation.1);
        let w2 = self
            .value(w)
            .to_shape((cout, cin * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[batch, cout, oh, ow]));
        {
            let xv = self.value(x);
            for bi in 0..batch {
                let col = im2col(xv, bi, cin, h, wdt, kh, kw, geom, oh, ow);
                let y = w2.dot(&col); // (cout, oh*ow)
                for co in 0..cout {
                    for p in 0..oh * ow {
                        out[[bi, co, p / ow, p % ow]] = y[[co, p]];
                    }
                }
            }
        }
        if let Some(bv) = b {
            let bias = self.value(bv).clone();
            assert_eq!(bias.len(), cout, "bias length");
            for bi in 0..batch {
                for co in 0..cout {
                    let bval = bias[[co]];
                    for yh in 0..oh {
                        for yw in 0..ow {
                            out[[bi, co, yh, yw]] += bval;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                geom,
            },
            ng,
        )
    }

    /// Normalize over (B, H, W) per channel with the given statistics.
    /// `batch_stats` marks statistics computed from `x` itself (training
    /// mode), which changes the backward pass.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Array1<F>,
        inv_std: Array1<F>,
        batch_stats: bool,
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let c = xs[1];
        assert_eq!(mean.len(), c);
        assert_eq!(inv_std.len(), c);
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let mut out = self.value(x).clone();
        {
            let g = self.value(gamma);
            let b = self.value(beta);
            for ((_, ci, _, _), v) in out
                .indexed_iter_mut()
                .map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v))
            {
                *v = g[[ci]] * (*v - mean[ci]) * inv_std[ci] + b[[ci]];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    /// Bilinear resize with half-pixel centers to `(out_h, out_w)`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h == out_h && w == out_w {
            // Identity resize still becomes a node so gradients flow uniformly.
            let v = self.value(x).clone();
            let ng = self.needs(x);
            return self.push(v, Op::UpsampleBilinear { x: x.0 }, ng);
        }
        let rows = bilinear_taps(h, out_h);
        let cols = bilinear_taps(w, out_w);
        let xv = self.value(x);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[batch, c, out_h, out_w]));
        for bi in 0..batch {
            for ci in 0..c {
                for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                        let fy = F::cast_from(wy);
                        let fx = F::cast_from(wx);
                        let one = F::one();
                        let v = xv[[bi, ci, y0, x0]] * (one - fy) * (one - fx)
                            + xv[[bi, ci, y0, x1]] * (one - fy) * fx
                            + xv[[bi, ci, y1, x0]] * fy * (one - fx)
                            + xv[[bi, ci, y1, x1]] * fy * fx;
                        out[[bi, ci, oy, ox]] = v;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::UpsampleBilinear { x: x.0 }, ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), 4);
            assert_eq!(s[0], first[0]);
            assert_eq!(s[2], first[2]);
            assert_eq!(s[3], first[3]);
            c_total += s[1];
        }
        let mut out = ArrayD::<F>::zeros(IxDyn(&[first[0], c_total, first[2], first[3]]));
        let mut c_off = 0;
        for &p in parts {
            let pv = self.value(p);
            let c = pv.shape()[1];
            out.slice_axis_mut(Axis(1), Slice::from(c_off..c_off + c))
                .assign(pv);
            c_off += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatChannels(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = F::one() / F::cast_from((h * w) as f64);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[batch, c, 1, 1]));
        let xv = self.value(x);
        for bi in 0..batch {
            for ci in 0..c {
                let mut s = F::zero();
                for yh in 0..h {
                    for yw in 0..w {
                        s += xv[[bi, ci, yh, yw]];
                    }
                }
                out[[bi, ci, 0, 0]] = s * inv;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::GlobalAvgPool(x.0), ng)
    }

    pub fn channel_gate(&mut self, x: Var, g: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let gs = self.value(g).shape().to_vec();
        assert_eq!(gs, vec![xs[0], xs[1], 1, 1], "channel gate shape");
        let mut out = self.value(x).clone();
        {
            let gv = self.value(g);
            for ((bi, ci, _, _), v) in out
                .indexed_iter_mut()
                .map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v))
            {
                *v *= gv[[bi, ci, 0, 0]];
            }
        }
        let ng = self.needs(x) || self.needs(g);
        self.push(out, Op::ChannelGate { x: x.0, g: g.0 }, ng)
    }

    pub fn spatial_gate(&mut self, x: Var, g: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let gs = self.value(g).shape().to_vec();
        assert_eq!(gs, vec![xs[0], 1, xs[2], xs[3]], "spatial gate shape");
        let mut out = self.value(x).clone();
        {
            let gv = self.value(g);
            for ((bi, _, yh, yw), v) in out
                .indexed_iter_mut()
                .map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v))
            {
                *v *= gv[[bi, 0, yh, yw]];
            }
        }
        let ng = self.needs(x) || self.needs(g);
        self.push(out, Op::SpatialGate { x: x.0, g: g.0 }, ng)
    }

    /// Accumulate gradients of `root` (a 0-dim node) with respect to every
    /// node that requires them.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward root must be 0-dim");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), F::one()));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<F>>], idx: usize, delta: ArrayD<F>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, dy: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, dy * &self.nodes[*b].value);
                self.accum(grads, *b, dy * &self.nodes[*a].value);
            }
            Op::Affine { x, mul, .. } => {
                let m = *mul;
                self.accum(grads, *x, dy.mapv(|e| e * m));
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[*s].value.iter().copied().next().unwrap();
                self.accum(grads, *x, dy.mapv(|e| e * sv));
                let ds = (dy * &self.nodes[*x].value).sum();
                self.accum(grads, *s, ArrayD::from_elem(IxDyn(&[]), ds));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let mut d = dy.clone();
                d.zip_mut_with(xv, |g, &v| {
                    if v <= F::zero() {
                        *g = F::zero();
                    }
                });
                self.accum(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[i].value;
                let mut d = dy.clone();
                d.zip_mut_with(yv, |g, &y| *g = *g * y * (F::one() - y));
                self.accum(grads, *x, d);
            }
            Op::Ln(x) => {
                let xv = &self.nodes[*x].value;
                let mut d = dy.clone();
                d.zip_mut_with(xv, |g, &v| *g /= v);
                self.accum(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[*x].value;
                let (lo, hi) = (*lo, *hi);
                let mut d = dy.clone();
                d.zip_mut_with(xv, |g, &v| {
                    if v <= lo || v >= hi {
                        *g = F::zero();
                    }
                });
                self.accum(grads, *x, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                self.backprop_conv(i, *x, *w, *b, *geom, dy, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                self.backprop_batch_norm(*x, *gamma, *beta, mean, inv_std, *batch_stats, dy, grads);
            }
            Op::UpsampleBilinear { x } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let os = dy.shape().to_vec();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (os[2], os[3]);
                if h == oh && w == ow {
                    self.accum(grads, *x, dy.clone());
                } else {
                    let rows = bilinear_taps(h, oh);
                    let cols = bilinear_taps(w, ow);
                    let mut dx = ArrayD::<F>::zeros(IxDyn(&xs));
                    for bi in 0..batch {
                        for ci in 0..c {
                            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                                    let g = dy[[bi, ci, oy, ox]];
                                    let fy = F::cast_from(wy);
                                    let fx = F::cast_from(wx);
                                    let one = F::one();
                                    dx[[bi, ci, y0, x0]] += g * (one - fy) * (one - fx);
                                    dx[[bi, ci, y0, x1]] += g * (one - fy) * fx;
                                    dx[[bi, ci, y1, x0]] += g * fy * (one - fx);
                                    dx[[bi, ci, y1, x1]] += g * fy * fx;
                                }
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::ConcatChannels(parts) => {
                let mut c_off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    let slice = dy
                        .slice_axis(Axis(1), Slice::from(c_off..c_off + c))
                        .to_owned();
                    self.accum(grads, p, slice);
                    c_off += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let inv = F::one() / F::cast_from((h * w) as f64);
                let mut dx = ArrayD::<F>::zeros(IxDyn(&xs));
                for bi in 0..batch {
                    for ci in 0..c {
                        let g = dy[[bi, ci, 0, 0]] * inv;
                        for yh in 0..h {
                            for yw in 0..w {
                                dx[[bi, ci, yh, yw]] = g;
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::ChannelGate { x, g } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*g].value;
                let xs = xv.shape().to_vec();
                let mut dx = dy.clone();
                for ((bi, ci, _, _), v) in dx
                    .indexed_iter_mut()
                    .map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v))
                {
                    *v *= gv[[bi, ci, 0, 0]];
                }
                self.accum(grads, *x, dx);
                let mut dg = ArrayD::<F>::zeros(IxDyn(&[xs[0], xs[1], 1, 1]));
                for (ix, &g0) in dy.indexed_iter() {
                    dg[[ix[0], ix[1], 0, 0]] += g0 * xv[ix.clone()];
                }
                self.accum(grads, *g, dg);
            }
            Op::SpatialGate { x, g } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*g].value;
                let xs = xv.shape().to_vec();
                let mut dx = dy.clone();
                for ((bi, _, yh, yw), v) in dx
                    .indexed_iter_mut()
                    .map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v))
                {
                    *v *= gv[[bi, 0, yh, yw]];
                }
                self.accum(grads, *x, dx);
                let mut dg = ArrayD::<F>::zeros(IxDyn(&[xs[0], 1, xs[2], xs[3]]));
                for (ix, &g0) in dy.indexed_iter() {
                    dg[[ix[0], 0, ix[2], ix[3]]] += g0 * xv[ix.clone()];
                }
                self.accum(grads, *g, dg);
            }
            Op::SumAll(x) => {
                let g = dy.iter().copied().next().unwrap();
                let shape = self.nodes[*x].value.raw_dim();
                self.accum(grads, *x, ArrayD::from_elem(shape, g));
            }
            Op::MeanAll(x) => {
                let n = F::cast_from(self.nodes[*x].value.len() as f64);
                let g = dy.iter().copied().next().unwrap() / n;
                let shape = self.nodes[*x].value.raw_dim();
                self.accum(grads, *x, ArrayD::from_elem(shape, g));
            }
            Op::DivScalars { num, den } => {
                let g = dy.iter().copied().next().unwrap();
                let nv = self.nodes[*num].value.iter().copied().next().unwrap();
                let dv = self.nodes[*den].value.iter().copied().next().unwrap();
                self.accum(grads, *num, ArrayD::from_elem(IxDyn(&[]), g / dv));
                self.accum(
                    grads,
                    *den,
                    ArrayD::from_elem(IxDyn(&[]), -g * nv / (dv * dv)),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        out: usize,
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        dy: &ArrayD<F>,
        grads: &mut [Option<ArrayD<F>>],
    ) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let os = self.nodes[out].value.shape().to_vec();
        let (batch, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let w2 = self.nodes[w].value.to_shape((cout, cin * kh * kw)).unwrap();

        let need_x = self.nodes[x].needs_grad;
        let need_w = self.nodes[w].needs_grad;
        let mut dw2 = Array2::<F>::zeros((cout, cin * kh * kw));
        let mut dx = ArrayD::<F>::zeros(IxDyn(&xs));
        for bi in 0..batch {
            let mut dyb = Array2::<F>::zeros((cout, oh * ow));
            for co in 0..cout {
                for p in 0..oh * ow {
                    dyb[[co, p]] = dy[[bi, co, p / ow, p % ow]];
                }
            }
            if need_w {
                let col = im2col(&self.nodes[x].value, bi, cin, h, wdt, kh, kw, geom, oh, ow);
                dw2 = dw2 + dyb.dot(&col.t());
            }
            if need_x {
                let dcol = w2.t().dot(&dyb); // (cin*kh*kw, oh*ow)
                col2im_accum(&mut dx, &dcol, bi, cin, h, wdt, kh, kw, geom, oh, ow);
            }
        }
        if need_w {
            let dw = dw2.into_shape_with_order(IxDyn(&ws)).unwrap();
            self.accum(grads, w, dw);
        }
        if need_x {
            self.accum(grads, x, dx);
        }
        if let Some(bidx) = b {
            if self.nodes[bidx].needs_grad {
                let mut db = ArrayD::<F>::zeros(IxDyn(&[cout]));
                for (ix, &g) in dy.indexed_iter() {
                    db[[ix[1]]] += g;
                }
                self.accum(grads, bidx, db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batch_norm(
        &self,
        x: usize,
        gamma: usize,
        beta: usize,
        mean: &Array1<F>,
        inv_std: &Array1<F>,
        batch_stats: bool,
        dy: &ArrayD<F>,
        grads: &mut [Option<ArrayD<F>>],
    ) {
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gamma].value;
        let xs = xv.shape().to_vec();
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let n = F::cast_from((batch * h * w) as f64);

        // Per-channel reductions of dy and dy*xhat.
        let mut sum_dy = vec![F::zero(); c];
        let mut sum_dy_xhat = vec![F::zero(); c];
        for (ix, &g) in dy.indexed_iter() {
            let ci = ix[1];
            let xhat = (xv[ix.clone()] - mean[ci]) * inv_std[ci];
            sum_dy[ci] += g;
            sum_dy_xhat[ci] += g * xhat;
        }

        if self.nodes[gamma].needs_grad {
            let dg = Array1::from_vec(sum_dy_xhat.clone()).into_dyn();
            self.accum(grads, gamma, dg);
        }
        if self.nodes[beta].needs_grad {
            let db = Array1::from_vec(sum_dy.clone()).into_dyn();
            self.accum(grads, beta, db);
        }
        if self.nodes[x].needs_grad {
            let mut dx = ArrayD::<F>::zeros(IxDyn(&xs));
            for (ix, v) in dx.indexed_iter_mut() {
                let ci = ix[1];
                let g = dy[ix.clone()];
                if batch_stats {
                    let xhat = (xv[ix.clone()] - mean[ci]) * inv_std[ci];
                    *v = gv[[ci]] * inv_std[ci] / n
                        * (n * g - sum_dy[ci] - xhat * sum_dy_xhat[ci]);
                } else {
                    *v = gv[[ci]] * inv_std[ci] * g;
                }
            }
            self.accum(grads, x, dx);
        }
    }
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (input + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

/// Padding that preserves spatial size at stride 1 (odd kernels only).
pub fn same_padding(k: usize, dilation: usize) -> usize {
    dilation * (k - 1) / 2
}

/// Source taps for bilinear resampling with half-pixel centers: for each
/// output index, the two source indices and the weight of the second one.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = s.floor() as usize;
                if i0 >= in_len - 1 {
                    (in_len - 1, in_len - 1, 0.0)
                } else {
                    (i0, i0 + 1, s - i0 as f64)
                }
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &ArrayD<F>,
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let mut col = Array2::<F>::zeros((cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * geom.stride.0 + ky * geom.dilation.0) as isize
                        - geom.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride.1 + kx * geom.dilation.1) as isize
                            - geom.pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[batch, ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_accum<F: Scalar>(
    dx: &mut ArrayD<F>,
    dcol: &Array2<F>,
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
) {
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * geom.stride.0 + ky * geom.dilation.0) as isize
                        - geom.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride.1 + kx * geom.dilation.1) as isize
                            - geom.pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[batch, ci, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}
