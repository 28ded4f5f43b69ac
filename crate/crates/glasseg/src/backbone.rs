//! Multi-level feature extraction with a fixed stride/channel contract.
//!
//! The reference backbone is deliberately tiny: five strided 3x3 conv blocks
//! exposing taps at strides 4, 8, 16, and 32. Anything that honours
//! [`BackboneSpec`] can be substituted in its place.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Forward, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;

/// Downsampling factor of each pyramid stage relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneSpec {
    pub name: String,
    pub stage_channels: [usize; 4],
    /// Per-channel affine input normalization: (x - mean) / std.
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl BackboneSpec {
    pub fn tiny() -> Self {
        BackboneSpec {
            name: "tiny".to_string(),
            stage_channels: [16, 32, 64, 128],
            input_mean: [0.5; 3],
            input_std: [0.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if self.input_std.contains(&0.0) {
            return Err(Error::Config("input std must be nonzero".into()));
        }
        Ok(())
    }
}

/// Ordered feature maps from the four backbone stages, finest first.
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

pub struct TinyBackbone {
    pub spec: BackboneSpec,
    blocks: Vec<ConvBnRelu>,
}

impl TinyBackbone {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        spec: BackboneSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let [c1, c2, c3, c4] = spec.stage_channels;
        let stem = c1;
        let widths = [(3, stem), (stem, c1), (c1, c2), (c2, c3), (c3, c4)];
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                ConvBnRelu::new(store, rng, &format!("backbone.block{i}"), cin, cout, (3, 3), 2, 1)
            })
            .collect();
        Ok(TinyBackbone { spec, blocks })
    }

    /// Validate the image, apply input normalization, and produce the
    /// four-level pyramid.
    pub fn extract_features<F: Scalar>(
        &self,
        cx: &mut Forward<F>,
        image: &ArrayD<F>,
    ) -> Result<FeaturePyramid> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected rank-4 image, got rank {}", s.len())));
        }
        if s[1] != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {}", s[1])));
        }
        let (h, w) = (s[2], s[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} must be divisible by 32"
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite input image".into()));
        }

        let mut normalized = ArrayD::<F>::zeros(IxDyn(s));
        for (ix, v) in normalized.indexed_iter_mut() {
            let c = ix[1];
            let mean = F::cast_from(self.spec.input_mean[c]);
            let std = F::cast_from(self.spec.input_std[c]);
            *v = (image[ix.clone()] - mean) / std;
        }
        let mut x = cx.tape.constant(normalized);
        let mut levels = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(cx, x);
            if i >= 1 {
                levels.push(x);
            }
        }
        Ok(FeaturePyramid { levels })
    }
}
