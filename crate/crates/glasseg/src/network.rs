//! Full network assembly: backbone pyramid, per-level enhancement, progressive
//! high-to-low fusion, three prediction heads, and the final upsample.

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, TinyBackbone};
use crate::error::{Error, Result};
use crate::fusion::{
    AttentionVariant, ChannelAttention, DeConfig, DeModule, DeVariant, Febf, FusionStrategy,
    SpatialAttention,
};
use crate::nn::{Conv2d, Forward, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    pub backbone: BackboneSpec,
    /// Output channels of the per-level enhancement, finest level first.
    pub de_out_channels: [usize; 4],
    pub de_branches: usize,
    pub de_variant: DeVariant,
    pub fusion: FusionStrategy,
    pub attention: AttentionVariant,
    pub use_channel_recalibration: bool,
    pub use_interbranch_flow: bool,
    pub init_seed: u64,
}

impl NetConfig {
    pub fn tiny() -> Self {
        let backbone = BackboneSpec::tiny();
        let de_out_channels = backbone.stage_channels;
        NetConfig {
            backbone,
            de_out_channels,
            de_branches: 4,
            de_variant: DeVariant::Full,
            fusion: FusionStrategy::Febf,
            attention: AttentionVariant::None,
            use_channel_recalibration: true,
            use_interbranch_flow: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !matches!(self.de_branches, 1 | 2 | 4) {
            return Err(Error::Config("de_branches must be 1, 2, or 4".into()));
        }
        if self.de_variant == DeVariant::Off
            && self.de_out_channels != self.backbone.stage_channels
        {
            return Err(Error::Config(
                "with DE off the enhancement is a pass-through; de_out_channels must equal the backbone stage channels".into(),
            ));
        }
        if self.attention != AttentionVariant::None && self.de_variant != DeVariant::Off {
            return Err(Error::Config(
                "attention variants replace the DE module; set de_variant = off".into(),
            ));
        }
        Ok(())
    }

    /// The nine ablation variants: concat baseline (A), DE build-up under
    /// concat fusion (B-D), fusion alternatives without DE (E-H), and the
    /// full model (I).
    pub fn ablation_variants() -> Vec<(char, NetConfig)> {
        let base = NetConfig::tiny();
        let mk = |de: DeVariant, fusion: FusionStrategy| NetConfig {
            de_variant: de,
            fusion,
            ..base.clone()
        };
        vec![
            ('A', mk(DeVariant::Off, FusionStrategy::Concat)),
            ('B', mk(DeVariant::LfeOnly, FusionStrategy::Concat)),
            ('C', mk(DeVariant::LfeLff, FusionStrategy::Concat)),
            ('D', mk(DeVariant::Full, FusionStrategy::Concat)),
            ('E', mk(DeVariant::Off, FusionStrategy::Add)),
            ('F', mk(DeVariant::Off, FusionStrategy::Multiply)),
            ('G', mk(DeVariant::Off, FusionStrategy::FocusOnly)),
            ('H', mk(DeVariant::Off, FusionStrategy::Febf)),
            ('I', mk(DeVariant::Full, FusionStrategy::Febf)),
        ]
    }
}

enum Enhancer {
    Identity,
    De(DeModule),
    Channel(ChannelAttention),
    Spatial(SpatialAttention),
    ChannelSpatial(ChannelAttention, SpatialAttention),
}

impl Enhancer {
    fn forward<F: Scalar>(&self, cx: &mut Forward<F>, x: Var) -> Result<Var> {
        Ok(match self {
            Enhancer::Identity => x,
            Enhancer::De(de) => de.forward(cx, x)?,
            Enhancer::Channel(a) => a.forward(cx, x),
            Enhancer::Spatial(a) => a.forward(cx, x),
            Enhancer::ChannelSpatial(c, s) => {
                let y = c.forward(cx, x);
                s.forward(cx, y)
            }
        })
    }
}

/// Tape handles for the three level predictions (finest first, strides
/// 4/8/16) and the full-resolution probability map.
pub struct SegmentationOutput {
    pub level_logits: [Var; 3],
    pub final_prob: Var,
}

/// A completed forward pass, detached from the network borrow so the caller
/// can attach losses and run backward.
pub struct ForwardPass<F: Scalar> {
    pub tape: Tape<F>,
    param_vars: Vec<Var>,
    pub output: SegmentationOutput,
}

impl<F: Scalar> ForwardPass<F> {
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<Option<ArrayD<F>>> {
        self.param_vars
            .iter()
            .map(|&v| grads.get(v).cloned())
            .collect()
    }
}

pub struct GlassNet<F: Scalar> {
    pub config: NetConfig,
    pub store: ParamStore<F>,
    backbone: TinyBackbone,
    enhancers: Vec<Enhancer>,
    fusions: Vec<Febf>,
    heads: Vec<Conv2d>,
}

impl<F: Scalar> GlassNet<F> {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let backbone = TinyBackbone::new(&mut store, &mut rng, config.backbone.clone())?;

        let mut enhancers = Vec::with_capacity(4);
        for (i, (&cin, &cout)) in config
            .backbone
            .stage_channels
            .iter()
            .zip(config.de_out_channels.iter())
            .enumerate()
        {
            let name = format!("enhance{i}");
            let enhancer = if config.de_variant == DeVariant::Off {
                match config.attention {
                    AttentionVariant::None => Enhancer::Identity,
                    AttentionVariant::Channel => {
                        Enhancer::Channel(ChannelAttention::new(&mut store, &mut rng, &name, cin))
                    }
                    AttentionVariant::Spatial => {
                        Enhancer::Spatial(SpatialAttention::new(&mut store, &mut rng, &name, cin))
                    }
                    AttentionVariant::ChannelSpatial => Enhancer::ChannelSpatial(
                        ChannelAttention::new(&mut store, &mut rng, &format!("{name}.c"), cin),
                        SpatialAttention::new(&mut store, &mut rng, &format!("{name}.s"), cin),
                    ),
                }
            } else {
                let mut de_cfg = DeConfig::standard(cin, cout);
                de_cfg.branches = crate::fusion::DeBranchConfig::ladder(config.de_branches);
                de_cfg.variant = config.de_variant;
                de_cfg.use_channel_recalibration = config.use_channel_recalibration;
                de_cfg.use_interbranch_flow = config.use_interbranch_flow;
                Enhancer::De(DeModule::new(&mut store, &mut rng, &name, de_cfg)?)
            };
            enhancers.push(enhancer);
        }

        // Fusion proceeds high-to-low: (level 4, level 3) -> level 3 width,
        // then down the pyramid.
        let c = config.de_out_channels;
        let mut fusions = Vec::with_capacity(3);
        let mut high_ch = c[3];
        for (idx, low_level) in [2usize, 1, 0].iter().enumerate() {
            let low_ch = c[*low_level];
            fusions.push(Febf::new(
                &mut store,
                &mut rng,
                &format!("fuse{idx}"),
                high_ch,
                low_ch,
                config.fusion,
            ));
            high_ch = low_ch;
        }

        // One 3x3 head per fused level, coarsest first to match `fusions`.
        let heads = [c[2], c[1], c[0]]
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                Conv2d::new(&mut store, &mut rng, &format!("head{i}"), ch, 1, (3, 3), 1, 1, true)
            })
            .collect();

        Ok(GlassNet {
            config,
            store,
            backbone,
            enhancers,
            fusions,
            heads,
        })
    }

    /// Run the network, returning the tape for further composition (losses,
    /// backward).
    pub fn run(&mut self, image: &ArrayD<F>, training: bool) -> Result<ForwardPass<F>> {
        let (h, w) = {
            let s = image.shape();
            if s.len() != 4 {
                return Err(Error::Shape("image must be rank 4".into()));
            }
            (s[2], s[3])
        };
        let mut cx = Forward::new(&mut self.store, training);
        let pyramid = self.backbone.extract_features(&mut cx, image)?;
        let mut enhanced = Vec::with_capacity(4);
        for (level, enhancer) in pyramid.levels.iter().zip(self.enhancers.iter()) {
            enhanced.push(enhancer.forward(&mut cx, *level)?);
        }

        let mut high = enhanced[3];
        let mut logits_coarse_first = Vec::with_capacity(3);
        for (idx, low_level) in [2usize, 1, 0].iter().enumerate() {
            let febf = &self.fusions[idx];
            let (ah, al) = febf.align(&mut cx, high, enhanced[*low_level])?;
            let fused = febf.fuse(&mut cx, ah, al)?;
            logits_coarse_first.push(self.heads[idx].forward(&mut cx, fused));
            high = fused;
        }

        let finest = logits_coarse_first[2];
        let up = cx.tape.upsample_bilinear(finest, h, w);
        let final_prob = cx.tape.sigmoid(up);
        if cx.tape.value(final_prob).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite network output".into()));
        }

        let output = SegmentationOutput {
            level_logits: [
                logits_coarse_first[2],
                logits_coarse_first[1],
                logits_coarse_first[0],
            ],
            final_prob,
        };
        let param_vars = cx.param_vars().to_vec();
        Ok(ForwardPass {
            tape: cx.tape,
            param_vars,
            output,
        })
    }

    /// Eval-mode forward returning only the full-resolution probability map.
    pub fn predict(&mut self, image: &ArrayD<F>) -> Result<ArrayD<F>> {
        let fp = self.run(image, false)?;
        Ok(fp.tape.value(fp.output.final_prob).clone())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Total learnable scalar count of a configuration.
pub fn count_parameters(cfg: &NetConfig) -> Result<usize> {
    Ok(GlassNet::<f32>::new(cfg.clone())?.num_parameters())
}
