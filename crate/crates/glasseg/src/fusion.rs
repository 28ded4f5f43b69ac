//! The two fusion-oriented blocks: discriminability enhancement (DE) and
//! focus-and-exploration based fusion (FEBF).
//!
//! DE runs four parallel branches, each with a widening receptive field:
//! channel reduction, two spatially separable dilated conv paths (local
//! feature extraction), a fusing conv with channel recalibration (local
//! feature fusion), and a dilated context conv (contextual feature
//! perception). Adjacent branches exchange information through the LFF
//! output of the previous branch.
//!
//! FEBF aligns two level-adjacent feature maps, then combines a focus branch
//! (highlight what both levels agree on: multiply, then add each operand) and
//! an exploration branch (the difference between the levels), weighted by
//! learnable scalars alpha and beta, both initialized to 1.

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Forward, ParamId, ParamStore, SqueezeExcite};
use crate::scalar::Scalar;
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeVariant {
    /// Pass-through (base model).
    Off,
    LfeOnly,
    LfeLff,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Febf,
    Concat,
    Add,
    Multiply,
    FocusOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    None,
    Channel,
    Spatial,
    ChannelSpatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeBranchConfig {
    pub k: usize,
    pub r: usize,
    pub context_dilation: usize,
}

impl DeBranchConfig {
    /// The standard branch ladder: k in {3,5,7,9} paired with r in {1,2,3,4}.
    pub fn ladder(count: usize) -> Vec<DeBranchConfig> {
        [(3, 1), (5, 2), (7, 3), (9, 4)]
            .iter()
            .take(count)
            .map(|&(k, r)| DeBranchConfig {
                k,
                r,
                context_dilation: k,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let pair_ok = matches!((self.k, self.r), (3, 1) | (5, 2) | (7, 3) | (9, 4));
        if !pair_ok {
            return Err(Error::Config(format!(
                "invalid DE branch (k={}, r={}); expected pairs (3,1) (5,2) (7,3) (9,4)",
                self.k, self.r
            )));
        }
        if self.context_dilation != self.k {
            return Err(Error::Config(
                "DE context dilation must equal the branch kernel size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_channels: usize,
    pub branches: Vec<DeBranchConfig>,
    pub variant: DeVariant,
    pub use_channel_recalibration: bool,
    pub use_interbranch_flow: bool,
}

impl DeConfig {
    pub fn standard(in_channels: usize, out_channels: usize) -> Self {
        DeConfig {
            in_channels,
            out_channels,
            branch_channels: (out_channels / 4).max(1),
            branches: DeBranchConfig::ladder(4),
            variant: DeVariant::Full,
            use_channel_recalibration: true,
            use_interbranch_flow: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() || self.branches.len() > 4 {
            return Err(Error::Config("DE needs between 1 and 4 branches".into()));
        }
        for b in &self.branches {
            b.validate()?;
        }
        if self.variant == DeVariant::Off {
            return Err(Error::Config(
                "DE variant `off` is a network-level pass-through, not a module".into(),
            ));
        }
        Ok(())
    }
}

struct DeBranch {
    reduce: ConvBnRelu,
    path_a: [ConvBnRelu; 2],
    path_b: [ConvBnRelu; 2],
    lff: Option<ConvBnRelu>,
    recal: Option<SqueezeExcite>,
    cfp: Option<ConvBnRelu>,
}

pub struct DeModule {
    pub cfg: DeConfig,
    branches: Vec<DeBranch>,
    combine: ConvBnRelu,
}

impl DeModule {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cfg: DeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let bc = cfg.branch_channels;
        let with_lff = cfg.variant != DeVariant::LfeOnly;
        let with_cfp = cfg.variant == DeVariant::Full;
        let mut branches = Vec::with_capacity(cfg.branches.len());
        for (i, bcfg) in cfg.branches.iter().enumerate() {
            let p = format!("{name}.branch{i}");
            let (k, r) = (bcfg.k, bcfg.r);
            let reduce =
                ConvBnRelu::new(store, rng, &format!("{p}.reduce"), cfg.in_channels, bc, (3, 3), 1, 1);
            let path_a = [
                ConvBnRelu::new(store, rng, &format!("{p}.a0"), bc, bc, (1, k), 1, r),
                ConvBnRelu::new(store, rng, &format!("{p}.a1"), bc, bc, (k, 1), 1, r),
            ];
            let path_b = [
                ConvBnRelu::new(store, rng, &format!("{p}.b0"), bc, bc, (k, 1), 1, r),
                ConvBnRelu::new(store, rng, &format!("{p}.b1"), bc, bc, (1, k), 1, r),
            ];
            let lff = with_lff.then(|| {
                ConvBnRelu::new(store, rng, &format!("{p}.lff"), 2 * bc, bc, (3, 3), 1, 1)
            });
            let recal = (with_lff && cfg.use_channel_recalibration)
                .then(|| SqueezeExcite::new(store, rng, &format!("{p}.recal"), bc, 4));
            let cfp = with_cfp.then(|| {
                ConvBnRelu::new(
                    store,
                    rng,
                    &format!("{p}.cfp"),
                    bc,
                    bc,
                    (3, 3),
                    1,
                    bcfg.context_dilation,
                )
            });
            branches.push(DeBranch {
                reduce,
                path_a,
                path_b,
                lff,
                recal,
                cfp,
            });
        }
        // LFE-only branches emit the concatenated pair of paths.
        let per_branch = if with_lff { bc } else { 2 * bc };
        let combine = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.combine"),
            per_branch * cfg.branches.len(),
            cfg.out_channels,
            (3, 3),
            1,
            1,
        );
        Ok(DeModule {
            cfg,
            branches,
            combine,
        })
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Result<Var> {
        let s = cx.tape.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "DE expects (B, {}, H, W), got {s:?}",
                self.cfg.in_channels
            )));
        }
        if s[2] < 2 || s[3] < 2 {
            return Err(Error::Shape(format!(
                "DE input {}x{} is below the 2x2 minimum",
                s[2], s[3]
            )));
        }
        if cx.tape.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite DE input".into()));
        }

        let mut outputs = Vec::with_capacity(self.branches.len());
        let mut prev_lff: Option<Var> = None;
        for branch in &self.branches {
            let t = branch.reduce.forward(cx, x);
            let u = match (self.cfg.use_interbranch_flow, prev_lff) {
                (true, Some(prev)) => cx.tape.add(t, prev),
                _ => t,
            };
            let a = branch.path_a[0].forward(cx, u);
            let a = branch.path_a[1].forward(cx, a);
            let b = branch.path_b[0].forward(cx, u);
            let b = branch.path_b[1].forward(cx, b);
            let lfe = cx.tape.concat_channels(&[a, b]);
            let branch_out = match &branch.lff {
                Some(lff) => {
                    let mut l = lff.forward(cx, lfe);
                    if let Some(recal) = &branch.recal {
                        l = recal.forward(cx, l);
                    }
                    prev_lff = Some(l);
                    match &branch.cfp {
                        Some(cfp) => cfp.forward(cx, l),
                        None => l,
                    }
                }
                None => lfe,
            };
            outputs.push(branch_out);
        }
        let cat = cx.tape.concat_channels(&outputs);
        Ok(self.combine.forward(cx, cat))
    }
}

/// Simple channel-attention stand-in used by the attention-variant ablation.
pub struct ChannelAttention {
    se: SqueezeExcite,
}

impl ChannelAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        ChannelAttention {
            se: SqueezeExcite::new(store, rng, name, channels, 4),
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Var {
        self.se.forward(cx, x)
    }
}

/// Simple spatial-attention stand-in: a 7x7 conv to one channel, sigmoid gate.
pub struct SpatialAttention {
    conv: crate::nn::Conv2d,
}

impl SpatialAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        SpatialAttention {
            conv: crate::nn::Conv2d::new(store, rng, name, channels, 1, (7, 7), 1, 1, true),
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Var {
        let m = self.conv.forward(cx, x);
        let gate = cx.tape.sigmoid(m);
        cx.tape.spatial_gate(x, gate)
    }
}

pub struct Febf {
    pub strategy: FusionStrategy,
    align_h: ConvBnRelu,
    align_l: ConvBnRelu,
    combine: Option<ConvBnRelu>,
    focus_a: Option<ConvBnRelu>,
    focus_b: Option<ConvBnRelu>,
    focus_out: Option<ConvBnRelu>,
    explore: Option<ConvBnRelu>,
    out: Option<ConvBnRelu>,
    pub alpha: Option<ParamId>,
    pub beta: Option<ParamId>,
    channels: usize,
}

impl Febf {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        high_channels: usize,
        low_channels: usize,
        strategy: FusionStrategy,
    ) -> Self {
        let c = low_channels;
        let align_h =
            ConvBnRelu::new(store, rng, &format!("{name}.align_h"), high_channels, c, (3, 3), 1, 1);
        let align_l =
            ConvBnRelu::new(store, rng, &format!("{name}.align_l"), low_channels, c, (3, 3), 1, 1);
        let mk = |store: &mut ParamStore<F>, rng: &mut R, suffix: &str| {
            ConvBnRelu::new(store, rng, &format!("{name}.{suffix}"), c, c, (3, 3), 1, 1)
        };
        let (mut combine, mut focus_a, mut focus_b, mut focus_out, mut explore, mut out) =
            (None, None, None, None, None, None);
        let (mut alpha, mut beta) = (None, None);
        match strategy {
            FusionStrategy::Concat => {
                combine = Some(ConvBnRelu::new(
                    store,
                    rng,
                    &format!("{name}.combine"),
                    2 * c,
                    c,
                    (3, 3),
                    1,
                    1,
                ));
            }
            FusionStrategy::Add | FusionStrategy::Multiply => {}
            FusionStrategy::FocusOnly => {
                focus_a = Some(mk(store, rng, "focus_a"));
                focus_b = Some(mk(store, rng, "focus_b"));
                focus_out = Some(mk(store, rng, "focus_out"));
                out = Some(mk(store, rng, "out"));
            }
            FusionStrategy::Febf => {
                focus_a = Some(mk(store, rng, "focus_a"));
                focus_b = Some(mk(store, rng, "focus_b"));
                focus_out = Some(mk(store, rng, "focus_out"));
                explore = Some(mk(store, rng, "explore"));
                out = Some(mk(store, rng, "out"));
                alpha = Some(store.add_param(
                    format!("{name}.alpha"),
                    ndarray::ArrayD::from_elem(IxDyn(&[]), F::one()),
                    false,
                ));
                beta = Some(store.add_param(
                    format!("{name}.beta"),
                    ndarray::ArrayD::from_elem(IxDyn(&[]), F::one()),
                    false,
                ));
            }
        }
        Febf {
            strategy,
            align_h,
            align_l,
            combine,
            focus_a,
            focus_b,
            focus_out,
            explore,
            out,
            alpha,
            beta,
            channels: c,
        }
    }

    /// Bring both inputs to the low level's spatial size and channel count:
    /// upsample + conv for the high level, conv for the low level.
    pub fn align<F: Scalar>(&self, cx: &mut Forward<F>, f_h: Var, f_l: Var) -> Result<(Var, Var)> {
        let hs = cx.tape.value(f_h).shape().to_vec();
        let ls = cx.tape.value(f_l).shape().to_vec();
        if hs.len() != 4 || ls.len() != 4 || hs[0] != ls[0] {
            return Err(Error::Shape(format!("FEBF align: bad ranks/batch {hs:?} vs {ls:?}")));
        }
        if ls[2] < hs[2] || ls[3] < hs[3] {
            return Err(Error::Shape(format!(
                "FEBF align expects the low level to be at least as large: {hs:?} vs {ls:?}"
            )));
        }
        let up = cx.tape.upsample_bilinear(f_h, ls[2], ls[3]);
        let ah = self.align_h.forward(cx, up);
        let al = self.align_l.forward(cx, f_l);
        debug_assert_eq!(cx.tape.value(ah).shape(), cx.tape.value(al).shape());
        Ok((ah, al))
    }

    /// The tensor the exploration conv consumes: low minus high.
    pub fn exploration_input<F: Scalar>(&self, cx: &mut Forward<F>, f_h: Var, f_l: Var) -> Var {
        cx.tape.sub(f_l, f_h)
    }

    /// The multiplicative common term of the focus branch.
    pub fn focus_common<F: Scalar>(&self, cx: &mut Forward<F>, f_h: Var, f_l: Var) -> Var {
        cx.tape.mul(f_l, f_h)
    }

    /// Fuse two aligned feature maps according to the configured strategy.
    pub fn fuse<F: Scalar>(&self, cx: &mut Forward<F>, f_h: Var, f_l: Var) -> Result<Var> {
        let hs = cx.tape.value(f_h).shape().to_vec();
        let ls = cx.tape.value(f_l).shape().to_vec();
        if hs != ls {
            return Err(Error::Shape(format!("FEBF fuse shape mismatch: {hs:?} vs {ls:?}")));
        }
        if hs[1] != self.channels {
            return Err(Error::Shape(format!(
                "FEBF fuse expects {} channels, got {}",
                self.channels, hs[1]
            )));
        }
        Ok(match self.strategy {
            FusionStrategy::Add => cx.tape.add(f_h, f_l),
            FusionStrategy::Multiply => cx.tape.mul(f_h, f_l),
            FusionStrategy::Concat => {
                let cat = cx.tape.concat_channels(&[f_h, f_l]);
                self.combine.as_ref().unwrap().forward(cx, cat)
            }
            FusionStrategy::FocusOnly => {
                let ff = self.focus_branch(cx, f_h, f_l);
                self.out.as_ref().unwrap().forward(cx, ff)
            }
            FusionStrategy::Febf => {
                let ff = self.focus_branch(cx, f_h, f_l);
                let fe_in = self.exploration_input(cx, f_h, f_l);
                let fe = self.explore.as_ref().unwrap().forward(cx, fe_in);
                let alpha = cx.param(self.alpha.unwrap());
                let beta = cx.param(self.beta.unwrap());
                let af = cx.tape.scale_by(ff, alpha);
                let bf = cx.tape.scale_by(fe, beta);
                let mixed = cx.tape.add(af, bf);
                self.out.as_ref().unwrap().forward(cx, mixed)
            }
        })
    }

    fn focus_branch<F: Scalar>(&self, cx: &mut Forward<F>, f_h: Var, f_l: Var) -> Var {
        let common = self.focus_common(cx, f_h, f_l);
        let a_in = cx.tape.add(common, f_l);
        let a = self.focus_a.as_ref().unwrap().forward(cx, a_in);
        let b_in = cx.tape.add(common, f_h);
        let b = self.focus_b.as_ref().unwrap().forward(cx, b_in);
        let summed = cx.tape.add(a, b);
        self.focus_out.as_ref().unwrap().forward(cx, summed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0f32..1.0))
    }

    fn de_param_count(branches: usize) -> usize {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = DeConfig::standard(8, 8);
        cfg.branches = DeBranchConfig::ladder(branches);
        DeModule::new(&mut store, &mut rng, "de", cfg).unwrap();
        store.num_scalars()
    }

    #[test]
    fn de_preserves_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let de = DeModule::new(&mut store, &mut rng, "de", DeConfig::standard(8, 8)).unwrap();
        let mut cx = Forward::new(&mut store, true);
        let x = cx.tape.constant(random(&[2, 8, 10, 10], 5));
        let y = de.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.value(y).shape(), &[2, 8, 10, 10]);
    }

    #[test]
    fn de_single_branch_same_shape_fewer_params() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = DeConfig::standard(8, 8);
        cfg.branches = DeBranchConfig::ladder(1);
        let de = DeModule::new(&mut store, &mut rng, "de", cfg).unwrap();
        let mut cx = Forward::new(&mut store, true);
        let x = cx.tape.constant(random(&[1, 8, 6, 6], 6));
        let y = de.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.value(y).shape(), &[1, 8, 6, 6]);
        assert!(de_param_count(1) < de_param_count(2));
        assert!(de_param_count(2) < de_param_count(4));
    }

    #[test]
    fn de_zero_input_is_finite() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let de = DeModule::new(&mut store, &mut rng, "de", DeConfig::standard(4, 4)).unwrap();
        let mut cx = Forward::new(&mut store, true);
        let x = cx.tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 6, 6])));
        let y = de.forward(&mut cx, x).unwrap();
        assert!(cx.tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn de_rejects_tiny_and_nonfinite_inputs() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let de = DeModule::new(&mut store, &mut rng, "de", DeConfig::standard(4, 4)).unwrap();
        let mut cx = Forward::new(&mut store, true);
        let tiny = cx.tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 1, 4])));
        assert!(de.forward(&mut cx, tiny).is_err());
        let nan = cx
            .tape
            .constant(ArrayD::from_elem(IxDyn(&[1, 4, 4, 4]), f32::NAN));
        assert!(de.forward(&mut cx, nan).is_err());
    }

    #[test]
    fn branch_config_pairing_is_enforced() {
        assert!(DeBranchConfig { k: 5, r: 1, context_dilation: 5 }.validate().is_err());
        assert!(DeBranchConfig { k: 5, r: 2, context_dilation: 3 }.validate().is_err());
        assert!(DeBranchConfig { k: 7, r: 3, context_dilation: 7 }.validate().is_ok());
    }

    #[test]
    fn febf_align_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let febf = Febf::new(&mut store, &mut rng, "f", 12, 8, FusionStrategy::Febf);
        let mut cx = Forward::new(&mut store, true);
        let fh = cx.tape.constant(random(&[1, 12, 4, 4], 8));
        let fl = cx.tape.constant(random(&[1, 8, 8, 8], 9));
        let (ah, al) = febf.align(&mut cx, fh, fl).unwrap();
        assert_eq!(cx.tape.value(ah).shape(), &[1, 8, 8, 8]);
        assert_eq!(cx.tape.value(al).shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn febf_align_identity_spatial() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let febf = Febf::new(&mut store, &mut rng, "f", 8, 8, FusionStrategy::Febf);
        let mut cx = Forward::new(&mut store, true);
        let fh = cx.tape.constant(random(&[1, 8, 6, 6], 11));
        let fl = cx.tape.constant(random(&[1, 8, 6, 6], 12));
        let (ah, _) = febf.align(&mut cx, fh, fl).unwrap();
        assert_eq!(cx.tape.value(ah).shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn febf_align_non_integer_ratio_matches_bilinear_oracle() {
        // 2x2 -> 6x6 with half-pixel centers; verify the raw upsample against
        // a direct evaluation of the interpolation formula.
        let mut store = ParamStore::<f32>::new();
        let mut cx = Forward::new(&mut store, true);
        let src = ArrayD::from_shape_fn(IxDyn(&[1, 1, 2, 2]), |ix| (ix[2] * 2 + ix[3]) as f32);
        let x = cx.tape.constant(src.clone());
        let up = cx.tape.upsample_bilinear(x, 6, 6);
        for oy in 0..6 {
            for ox in 0..6 {
                let map = |o: usize| -> (usize, usize, f32) {
                    let s = (o as f64 + 0.5) * (2.0 / 6.0) - 0.5;
                    if s <= 0.0 {
                        (0, 0, 0.0)
                    } else if s >= 1.0 {
                        (1, 1, 0.0)
                    } else {
                        (0, 1, s as f32)
                    }
                };
                let (y0, y1, wy) = map(oy);
                let (x0, x1, wx) = map(ox);
                let want = src[[0, 0, y0, x0]] * (1.0 - wy) * (1.0 - wx)
                    + src[[0, 0, y0, x1]] * (1.0 - wy) * wx
                    + src[[0, 0, y1, x0]] * wy * (1.0 - wx)
                    + src[[0, 0, y1, x1]] * wy * wx;
                let got = cx.tape.value(up)[[0, 0, oy, ox]];
                assert!((got - want).abs() < 1e-6, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn exploration_input_is_exactly_antisymmetric() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let febf = Febf::new(&mut store, &mut rng, "f", 8, 8, FusionStrategy::Febf);
        let mut cx = Forward::new(&mut store, true);
        let a = cx.tape.constant(random(&[1, 8, 4, 4], 14));
        let b = cx.tape.constant(random(&[1, 8, 4, 4], 15));
        let fwd = febf.exploration_input(&mut cx, a, b);
        let rev = febf.exploration_input(&mut cx, b, a);
        let sum = cx.tape.add(fwd, rev);
        assert!(cx.tape.value(sum).iter().all(|&v| v == 0.0));

        // Identical operands give the all-zero tensor.
        let zero = febf.exploration_input(&mut cx, a, a);
        assert!(cx.tape.value(zero).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn focus_common_is_symmetric() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let febf = Febf::new(&mut store, &mut rng, "f", 8, 8, FusionStrategy::Febf);
        let mut cx = Forward::new(&mut store, true);
        let a = cx.tape.constant(random(&[1, 8, 4, 4], 17));
        let b = cx.tape.constant(random(&[1, 8, 4, 4], 18));
        let ab = febf.focus_common(&mut cx, a, b);
        let ba = febf.focus_common(&mut cx, b, a);
        assert_eq!(cx.tape.value(ab), cx.tape.value(ba));
    }

    #[test]
    fn focus_preactivation_matches_elementwise_oracle() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let febf = Febf::new(&mut store, &mut rng, "f", 8, 8, FusionStrategy::Febf);
        let mut cx = Forward::new(&mut store, true);
        let fh_arr = random(&[1, 8, 4, 4], 20);
        let fl_arr = random(&[1, 8, 4, 4], 21);
        let fh = cx.tape.constant(fh_arr.clone());
        let fl = cx.tape.constant(fl_arr.clone());
        let common = febf.focus_common(&mut cx, fh, fl);
        let pre = cx.tape.add(common, fl);
        for (ix, &got) in cx.tape.value(pre).indexed_iter() {
            let want = fl_arr[ix.clone()] * fh_arr[ix.clone()] + fl_arr[ix.clone()];
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn febf_alpha_beta_initialized_to_one() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let febf = Febf::new(&mut store, &mut rng, "f", 8, 8, FusionStrategy::Febf);
        let a = store.param(febf.alpha.unwrap()).value.iter().copied().next().unwrap();
        let b = store.param(febf.beta.unwrap()).value.iter().copied().next().unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(b, 1.0);
    }

    #[test]
    fn febf_fuse_rejects_mismatched_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let febf = Febf::new(&mut store, &mut rng, "f", 8, 8, FusionStrategy::Febf);
        let mut cx = Forward::new(&mut store, true);
        let a = cx.tape.constant(random(&[1, 8, 4, 4], 24));
        let b = cx.tape.constant(random(&[1, 8, 6, 6], 25));
        assert!(febf.fuse(&mut cx, a, b).is_err());
    }
}
