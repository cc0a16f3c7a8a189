//! Toy vision experts and resolution adaptation.
//!
//! Two architectures stand in for a zoo of pretrained encoders:
//! a patch-linear transformer-like encoder with a learned position grid,
//! and a stack of stride-2 convolutions.

mod adapt;
mod conv;
mod patch;

pub use adapt::{
    interpolate_pos_embed, merge_tiles, normalize_tokens, normalize_tokens_backward, split_tiles,
    tile_encode,
};
pub use conv::{ConvLayer, ConvParams};
pub use patch::{PatchBlock, PatchParams};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{seeded, Params};
use crate::tensorlab::{bilinear_resize, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    PatchLinear,
    ConvStack,
}

/// Post-processing applied before tokens are resized to the target count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PostProcess {
    #[default]
    None,
    Resize,
    PixelUnshuffle(usize),
}

impl FromStr for PostProcess {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "resize" => Ok(Self::Resize),
            other => {
                let factor = other
                    .strip_prefix("pixel-unshuffle:")
                    .and_then(|f| f.parse::<usize>().ok())
                    .filter(|&f| f >= 1)
                    .ok_or_else(|| {
                        invalid(format!(
                            "post_process must be none, resize or pixel-unshuffle:<factor>, got `{other}`"
                        ))
                    })?;
                Ok(Self::PixelUnshuffle(factor))
            }
        }
    }
}

impl TryFrom<String> for PostProcess {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for PostProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Resize => write!(f, "resize"),
            Self::PixelUnshuffle(r) => write!(f, "pixel-unshuffle:{r}"),
        }
    }
}

impl From<PostProcess> for String {
    fn from(p: PostProcess) -> String {
        p.to_string()
    }
}

fn default_stride() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub name: String,
    pub arch: Arch,
    pub native_resolution: usize,
    /// Patch size for patch-linear; the (fixed) stride 2 for conv-stack.
    #[serde(default = "default_stride")]
    pub patch_or_stride: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub post_process: PostProcess,
    #[serde(default)]
    pub frozen_default: bool,
}

impl ExpertSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("expert `{}`: {m}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Validation("expert name must not be empty".into()));
        }
        if self.native_resolution == 0 || self.embed_dim == 0 || self.patch_or_stride == 0 {
            return fail("native_resolution, embed_dim and patch_or_stride must be positive".into());
        }
        match self.arch {
            Arch::PatchLinear => {
                if self.native_resolution % self.patch_or_stride != 0 {
                    return fail(format!(
                        "native_resolution {} not divisible by patch size {}",
                        self.native_resolution, self.patch_or_stride
                    ));
                }
            }
            Arch::ConvStack => {
                if self.patch_or_stride != 2 {
                    return fail(format!(
                        "conv-stack stride is fixed at 2, got {}",
                        self.patch_or_stride
                    ));
                }
                if self.depth >= usize::BITS as usize
                    || self.native_resolution % (1usize << self.depth) != 0
                {
                    return fail(format!(
                        "native_resolution {} not divisible by 2^depth (depth {})",
                        self.native_resolution, self.depth
                    ));
                }
            }
        }
        if let PostProcess::PixelUnshuffle(0) = self.post_process {
            return fail("pixel-unshuffle factor must be positive".into());
        }
        Ok(())
    }

    /// Output grid side at native resolution.
    pub fn native_grid_side(&self) -> usize {
        match self.arch {
            Arch::PatchLinear => self.native_resolution / self.patch_or_stride,
            Arch::ConvStack => self.native_resolution >> self.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertParams {
    Patch(PatchParams),
    Conv(ConvParams),
}

impl Params for ExpertParams {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Self::Patch(p) => p.tensors(),
            Self::Conv(p) => p.tensors(),
        }
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::Patch(p) => p.tensors_mut(),
            Self::Conv(p) => p.tensors_mut(),
        }
    }
}

impl ExpertParams {
    pub fn tensor_names(&self) -> Vec<String> {
        match self {
            Self::Patch(p) => p.tensor_names(),
            Self::Conv(p) => p.tensor_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertState {
    pub spec: ExpertSpec,
    pub params: ExpertParams,
    pub frozen: bool,
}

/// Square RGB image, row-major with channels fastest, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub resolution: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(resolution: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != resolution * resolution * 3 {
            return Err(invalid(format!(
                "image data length {} != {resolution}^2 * 3",
                data.len()
            )));
        }
        Ok(Self { resolution, data })
    }

    pub fn as_map(&self) -> FeatureMap {
        FeatureMap {
            height: self.resolution,
            width: self.resolution,
            channels: 3,
            data: self.data.clone(),
            source_resolution: Some(self.resolution),
        }
    }

    /// Bilinear resample to a new square resolution.
    pub fn resized(&self, resolution: usize) -> Result<Image> {
        if resolution == self.resolution {
            return Ok(self.clone());
        }
        let m = bilinear_resize(&self.as_map(), resolution, resolution)?;
        Ok(Image {
            resolution,
            data: m.data,
        })
    }
}

/// Intermediate values kept from the forward pass.
#[derive(Debug, Clone)]
pub enum EncodeCache {
    Patch(patch::PatchCache),
    Conv(conv::ConvCache),
}

/// Initializes an expert from a seeded stream: every tensor is drawn from
/// `U[-s, s]` with `s = 1/sqrt(fan_in)`.
pub fn build_expert(spec: &ExpertSpec, seed: u64) -> Result<ExpertState> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let params = match spec.arch {
        Arch::PatchLinear => ExpertParams::Patch(PatchParams::init(&mut rng, spec)),
        Arch::ConvStack => ExpertParams::Conv(ConvParams::init(&mut rng, spec)),
    };
    Ok(ExpertState {
        spec: spec.clone(),
        params,
        frozen: spec.frozen_default,
    })
}

impl ExpertState {
    /// Input resolution this state accepts without further adaptation.
    pub fn accepted_resolution(&self) -> usize {
        match &self.params {
            ExpertParams::Patch(p) => p.pos_side * self.spec.patch_or_stride,
            ExpertParams::Conv(_) => self.spec.native_resolution,
        }
    }

    pub fn output_side(&self) -> usize {
        match &self.params {
            ExpertParams::Patch(p) => p.pos_side,
            ExpertParams::Conv(_) => self.spec.native_grid_side(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn check_resolution(&self, image: &Image) -> Result<()> {
        let expected = self.accepted_resolution();
        if image.resolution != expected {
            return Err(Error::AdaptationRequired {
                expert: self.spec.name.clone(),
                expected,
                actual: image.resolution,
            });
        }
        Ok(())
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        Ok(self.encode_cached(image)?.0)
    }

    pub fn encode_cached(&self, image: &Image) -> Result<(FeatureMap, EncodeCache)> {
        self.check_resolution(image)?;
        let (fm, cache) = match &self.params {
            ExpertParams::Patch(p) => {
                let (fm, c) = p.forward(image, self.spec.patch_or_stride);
                (fm, EncodeCache::Patch(c))
            }
            ExpertParams::Conv(p) => {
                let (fm, c) = p.forward(image);
                (fm, EncodeCache::Conv(c))
            }
        };
        Ok((fm.with_source_resolution(image.resolution), cache))
    }

    /// Backpropagates `grad_out` into `grads` (when given) and returns the
    /// image gradient when `want_input` is set.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache,
        grad_out: &FeatureMap,
        grads: Option<&mut ExpertParams>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        match (&self.params, cache) {
            (ExpertParams::Patch(p), EncodeCache::Patch(c)) => {
                let g = grads.map(|g| match g {
                    ExpertParams::Patch(g) => g,
                    _ => unreachable!("gradient container arch mismatch"),
                });
                p.backward(c, &grad_out.data, self.spec.patch_or_stride, g, want_input)
            }
            (ExpertParams::Conv(p), EncodeCache::Conv(c)) => {
                let g = grads.map(|g| match g {
                    ExpertParams::Conv(g) => g,
                    _ => unreachable!("gradient container arch mismatch"),
                });
                p.backward(c, &grad_out.data, g, want_input)
            }
            _ => unreachable!("cache arch mismatch"),
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn patch_spec(res: usize, patch: usize, dim: usize, depth: usize) -> ExpertSpec {
        ExpertSpec {
            name: "lo".into(),
            arch: Arch::PatchLinear,
            native_resolution: res,
            patch_or_stride: patch,
            embed_dim: dim,
            depth,
            post_process: PostProcess::None,
            frozen_default: false,
        }
    }

    pub fn conv_spec(res: usize, dim: usize, depth: usize) -> ExpertSpec {
        ExpertSpec {
            name: "hi".into(),
            arch: Arch::ConvStack,
            native_resolution: res,
            patch_or_stride: 2,
            embed_dim: dim,
            depth,
            post_process: PostProcess::None,
            frozen_default: false,
        }
    }

    pub fn random_image(seed: u64, res: usize) -> Image {
        let mut rng = seeded(seed);
        Image::new(
            res,
            (0..res * res * 3)
                .map(|_| rand::Rng::gen::<f64>(&mut rng))
                .collect(),
        )
        .unwrap()
    }
}
