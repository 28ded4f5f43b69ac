//! Parameter management and the small set of layers the network is built from.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tape::{same_padding, ConvGeometry, Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

pub struct Param<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    /// Whether weight decay applies (convolution weights only).
    pub decay: bool,
    pub momentum: ArrayD<F>,
}

pub struct BufferSlot<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Owns all learnable tensors and non-learnable state (running statistics).
pub struct ParamStore<F: Scalar> {
    pub(crate) params: Vec<Param<F>>,
    pub(crate) buffers: Vec<BufferSlot<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: ArrayD<F>, decay: bool) -> ParamId {
        let momentum = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
            momentum,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<F>) -> BufferId {
        self.buffers.push(BufferSlot {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &ArrayD<F> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut ArrayD<F> {
        &mut self.buffers[id.0].value
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total learnable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter_params(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = &BufferSlot<F>> {
        self.buffers.iter()
    }

    /// Momentum SGD step. The velocity tracks the raw gradient; weight decay
    /// is applied directly to the parameter, independent of the learning-rate
    /// schedule, and only where `decay` is set.
    pub fn sgd_step(&mut self, grads: &[Option<ArrayD<F>>], lr: F, momentum: F, weight_decay: F) {
        assert_eq!(grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads.iter()) {
            let Some(g) = g else { continue };
            p.momentum.zip_mut_with(g, |m, &gv| *m = momentum * *m + gv);
            if p.decay {
                let keep = F::one() - weight_decay;
                p.value.zip_mut_with(&p.momentum, |v, &m| *v = keep * *v - lr * m);
            } else {
                p.value.zip_mut_with(&p.momentum, |v, &m| *v -= lr * m);
            }
        }
    }
}

/// One forward pass: a fresh tape plus the variables standing in for every
/// parameter, so gradients can be routed back to the store afterwards.
pub struct Forward<'a, F: Scalar> {
    pub tape: Tape<F>,
    pub store: &'a mut ParamStore<F>,
    param_vars: Vec<Var>,
    pub training: bool,
}

impl<'a, F: Scalar> Forward<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, training: bool) -> Self {
        let mut tape = Tape::new();
        let param_vars = store
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), true))
            .collect();
        Forward {
            tape,
            store,
            param_vars,
            training,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.param_vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.param_vars
    }

    /// Gradients of `root` arranged per parameter, ready for `sgd_step`.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<Option<ArrayD<F>>> {
        self.param_vars
            .iter()
            .map(|&v| grads.get(v).cloned())
            .collect()
    }
}

/// Per-channel mean and 1/sqrt(var + eps) over (B, H, W).
pub fn batch_statistics<F: Scalar>(x: &ArrayD<F>, eps: f64) -> (Array1<F>, Array1<F>) {
    let s = x.shape();
    assert_eq!(s.len(), 4);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let n = F::cast_from((b * h * w) as f64);
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for (ix, &v) in x.indexed_iter() {
        mean[ix[1]] += v;
    }
    mean.mapv_inplace(|m| m / n);
    for (ix, &v) in x.indexed_iter() {
        let d = v - mean[ix[1]];
        var[ix[1]] += d * d;
    }
    var.mapv_inplace(|v| v / n);
    let epsf = F::cast_from(eps);
    let inv_std = var.mapv(|v| F::one() / (v + epsf).sqrt());
    (mean, inv_std)
}

fn he_normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::cast_from(dist.sample(rng)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv2d {
    /// Convolution with "same" padding at stride 1; for stride 2 with k=3 the
    /// same padding halves the spatial size.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let (kh, kw) = kernel;
        let fan_in = cin * kh * kw;
        let w = store.add_param(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, kh, kw], fan_in),
            true,
        );
        let b = bias.then(|| {
            store.add_param(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), false)
        });
        Conv2d {
            w,
            b,
            geom: ConvGeometry {
                stride: (stride, stride),
                pad: (same_padding(kh, dilation), same_padding(kw, dilation)),
                dilation: (dilation, dilation),
            },
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Var {
        let w = cx.param(self.w);
        let b = self.b.map(|id| cx.param(id));
        cx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add_param(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[channels]), F::one()),
            false,
        );
        let beta = store.add_param(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])), false);
        let running_mean =
            store.add_buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels])));
        let running_var = store.add_buffer(
            format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[channels]), F::one()),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Var {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.training {
            let (mean, inv_std) = batch_statistics(cx.tape.value(x), self.eps);
            // Track running statistics for eval mode.
            let m = F::cast_from(self.momentum);
            let keep = F::one() - m;
            let epsf = F::cast_from(self.eps);
            {
                let rm = cx.store.buffer_mut(self.running_mean);
                for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                    *r = keep * *r + m * b;
                }
            }
            {
                let rv = cx.store.buffer_mut(self.running_var);
                for (r, &inv) in rv.iter_mut().zip(inv_std.iter()) {
                    let var = F::one() / (inv * inv) - epsf;
                    *r = keep * *r + m * var;
                }
            }
            cx.tape.batch_norm(x, gamma, beta, mean, inv_std, true)
        } else {
            let mean = cx
                .store
                .buffer(self.running_mean)
                .iter()
                .copied()
                .collect::<Array1<F>>();
            let epsf = F::cast_from(self.eps);
            let inv_std = cx
                .store
                .buffer(self.running_var)
                .iter()
                .map(|&v| F::one() / (v + epsf).sqrt())
                .collect::<Array1<F>>();
            cx.tape.batch_norm(x, gamma, beta, mean, inv_std, false)
        }
    }
}

/// conv -> batch norm -> ReLU, the building block used throughout.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
    ) -> Self {
        // Bias is redundant before batch norm.
        let conv = Conv2d::new(store, rng, name, cin, cout, kernel, stride, dilation, false);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        ConvBnRelu { conv, bn }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.bn.forward(cx, y);
        cx.tape.relu(y)
    }
}

/// Squeeze-and-excitation channel recalibration: global average pool, a
/// two-layer bottleneck, sigmoid gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl SqueezeExcite {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let mid = (channels / reduction).max(1);
        let fc1 = Conv2d::new(store, rng, &format!("{name}.fc1"), channels, mid, (1, 1), 1, 1, true);
        let fc2 = Conv2d::new(store, rng, &format!("{name}.fc2"), mid, channels, (1, 1), 1, 1, true);
        SqueezeExcite { fc1, fc2 }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Var {
        let pooled = cx.tape.global_avg_pool(x);
        let h = self.fc1.forward(cx, pooled);
        let h = cx.tape.relu(h);
        let h = self.fc2.forward(cx, h);
        let gate = cx.tape.sigmoid(h);
        cx.tape.channel_gate(x, gate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_bn_relu_preserves_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ConvBnRelu::new(&mut store, &mut rng, "b", 3, 8, (3, 3), 1, 2);
        let mut cx = Forward::new(&mut store, true);
        let x = cx.tape.constant(ArrayD::from_elem(IxDyn(&[2, 3, 9, 9]), 0.5f32));
        let y = block.forward(&mut cx, x);
        assert_eq!(cx.tape.value(y).shape(), &[2, 8, 9, 9]);
    }

    #[test]
    fn squeeze_excite_preserves_shape_and_is_finite_on_zero() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let se = SqueezeExcite::new(&mut store, &mut rng, "se", 8, 4);
        let mut cx = Forward::new(&mut store, true);
        let x = cx.tape.constant(ArrayD::zeros(IxDyn(&[1, 8, 5, 5])));
        let y = se.forward(&mut cx, x);
        assert_eq!(cx.tape.value(y).shape(), &[1, 8, 5, 5]);
        assert!(cx.tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sgd_momentum_matches_hand_recurrence() {
        // Single-parameter quadratic stand-in: loss = 0.5 * w^2, grad = w.
        let mut store = ParamStore::<f64>::new();
        let w = store.add_param("w", ArrayD::from_elem(IxDyn(&[]), 2.0), false);
        let (lr, mu) = (0.1, 0.9);
        let mut w_ref = 2.0f64;
        let mut v_ref = 0.0f64;
        for _ in 0..10 {
            let g = store.param(w).value.iter().copied().next().unwrap();
            let grads = vec![Some(ArrayD::from_elem(IxDyn(&[]), g))];
            store.sgd_step(&grads, lr, mu, 0.0);
            v_ref = mu * v_ref + w_ref;
            w_ref -= lr * v_ref;
            let got = store.param(w).value.iter().copied().next().unwrap();
            assert!((got - w_ref).abs() < 1e-12, "got {got} want {w_ref}");
        }
    }

    #[test]
    fn decay_applies_only_to_flagged_params() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add_param("a", ArrayD::from_elem(IxDyn(&[]), 1.0), true);
        let b = store.add_param("b", ArrayD::from_elem(IxDyn(&[]), 1.0), false);
        let grads = vec![
            Some(ArrayD::from_elem(IxDyn(&[]), 0.0)),
            Some(ArrayD::from_elem(IxDyn(&[]), 0.0)),
        ];
        store.sgd_step(&grads, 0.1, 0.9, 0.01);
        let av = store.param(a).value.iter().copied().next().unwrap();
        let bv = store.param(b).value.iter().copied().next().unwrap();
        assert!((av - 0.99).abs() < 1e-12);
        assert!((bv - 1.0).abs() < 1e-12);
    }
}
