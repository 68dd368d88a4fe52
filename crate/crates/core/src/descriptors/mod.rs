//! Local texture descriptors and input-channel composition.
//!
//! Three descriptors turn a grayscale image in [0, 1] into a same-sized map
//! in [0, 1]:
//!
//! - [`lbp::lbp_map`] — 8-neighbor local binary patterns on the 3x3 ring.
//! - [`hog::hog_map`] — oriented-gradient cell histograms with block
//!   normalization, rendered back to an image through per-cell line kernels.
//! - [`plgf::plgf_map`] — the ratio-of-gravity-forces response, invariant to
//!   positive global illumination scaling.
//!
//! Each has a naive per-pixel twin in [`reference`] that recomputes every
//! value from the definition with the same arithmetic order; the optimized
//! and naive paths must agree bitwise and the test suite enforces that.
//!
//! A [`Recipe`] names a channel stack built from these maps, and a
//! [`ModalityInputPolicy`] assigns one recipe per modality (the default uses
//! raw pixels for RGB and depth, and gray+HOG+PLGF for infrared).

pub mod hog;
pub mod lbp;
pub mod plgf;
pub mod reference;

use crate::image::{rgb_to_gray, GrayImage, PlanarImage};
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};

pub use hog::{hog_features, hog_map, HogConfig};
pub use lbp::lbp_map;
pub use plgf::{plgf_map, PlgfConfig};

/// Parameters for every descriptor in one place; the LBP operator has no
/// free parameters (3x3 ring, 8 neighbors).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    pub hog: HogConfig,
    pub plgf: PlgfConfig,
}

/// Named channel stack fed to the model for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// The image's own channels, untouched.
    Raw,
    /// Single LBP map.
    Lbp,
    /// Single rendered HOG map.
    Hog,
    /// Single PLGF map.
    Plgf,
    /// HOG and PLGF maps stacked.
    HogPlgf,
    /// LBP, HOG and PLGF maps stacked.
    LbpHogPlgf,
    /// Grayscale plus HOG plus PLGF, the composite infrared default.
    GrayHogPlgf,
}

impl Recipe {
    pub const ALL: [Recipe; 7] = [
        Recipe::Raw,
        Recipe::Lbp,
        Recipe::Hog,
        Recipe::Plgf,
        Recipe::HogPlgf,
        Recipe::LbpHogPlgf,
        Recipe::GrayHogPlgf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Recipe::Raw => "raw",
            Recipe::Lbp => "lbp",
            Recipe::Hog => "hog",
            Recipe::Plgf => "plgf",
            Recipe::HogPlgf => "hog_plgf",
            Recipe::LbpHogPlgf => "lbp_hog_plgf",
            Recipe::GrayHogPlgf => "gray_hog_plgf",
        }
    }

    /// Channel count the recipe produces from an input with `raw_channels`.
    pub fn channels(&self, raw_channels: usize) -> usize {
        match self {
            Recipe::Raw => raw_channels,
            Recipe::Lbp | Recipe::Hog | Recipe::Plgf => 1,
            Recipe::HogPlgf => 2,
            Recipe::LbpHogPlgf | Recipe::GrayHogPlgf => 3,
        }
    }

    /// Builds the channel stack. Descriptor recipes operate on the grayscale
    /// reduction of multi-channel inputs.
    pub fn apply(
        &self,
        img: &PlanarImage,
        cfg: &DescriptorConfig,
    ) -> Result<PlanarImage, TensorError> {
        if let Recipe::Raw = self {
            return Ok(img.clone());
        }
        let gray = to_gray(img)?;
        let chans: Vec<GrayImage> = match self {
            Recipe::Raw => unreachable!(),
            Recipe::Lbp => vec![lbp_map(&gray)],
            Recipe::Hog => vec![hog_map(&gray, &cfg.hog)?],
            Recipe::Plgf => vec![plgf_map(&gray, &cfg.plgf)?],
            Recipe::HogPlgf => vec![hog_map(&gray, &cfg.hog)?, plgf_map(&gray, &cfg.plgf)?],
            Recipe::LbpHogPlgf => vec![
                lbp_map(&gray),
                hog_map(&gray, &cfg.hog)?,
                plgf_map(&gray, &cfg.plgf)?,
            ],
            Recipe::GrayHogPlgf => vec![
                gray.clone(),
                hog_map(&gray, &cfg.hog)?,
                plgf_map(&gray, &cfg.plgf)?,
            ],
        };
        PlanarImage::from_channels(&chans)
    }
}

impl std::str::FromStr for Recipe {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                TensorError::InvalidArgument(format!(
                    "unknown recipe {s:?} (expected one of {})",
                    Recipe::ALL.map(|r| r.name()).join(", ")
                ))
            })
    }
}

/// Grayscale view of an arbitrary input: 1-channel images pass through,
/// 3-channel images are reduced with the luma weights.
pub fn to_gray(img: &PlanarImage) -> Result<GrayImage, TensorError> {
    match img.channels {
        1 => Ok(img.channel(0)),
        3 => rgb_to_gray(img),
        c => Err(TensorError::Shape(format!(
            "cannot take grayscale of a {c}-channel image"
        ))),
    }
}

/// Repeats channels cyclically until `target` channels (the patch tokenizer
/// expects a fixed channel count per modality): [a] -> [a,a,a],
/// [a,b] -> [a,b,a].
pub fn align_channels(img: &PlanarImage, target: usize) -> PlanarImage {
    if img.channels == target {
        return img.clone();
    }
    let hw = img.height * img.width;
    let mut data = Vec::with_capacity(target * hw);
    for c in 0..target {
        let src = c % img.channels;
        data.extend_from_slice(&img.data[src * hw..(src + 1) * hw]);
    }
    PlanarImage { channels: target, height: img.height, width: img.width, data }
}

/// Sensor streams of one capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Ir,
    Depth,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Ir, Modality::Depth];

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::Depth => "depth",
        }
    }

    /// Channel count of the raw sensor image (RGB is 3, IR/depth are 1).
    pub fn raw_channels(&self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Ir | Modality::Depth => 1,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            "depth" => Ok(Modality::Depth),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown modality {other:?} (expected rgb, ir or depth)"
            ))),
        }
    }
}

/// Which recipe feeds each modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityInputPolicy {
    pub rgb: Recipe,
    pub ir: Recipe,
    pub depth: Recipe,
}

impl Default for ModalityInputPolicy {
    fn default() -> Self {
        ModalityInputPolicy {
            rgb: Recipe::Raw,
            ir: Recipe::GrayHogPlgf,
            depth: Recipe::Raw,
        }
    }
}

impl ModalityInputPolicy {
    /// One recipe for every modality (used by the descriptor-recipe sweep).
    pub fn uniform(recipe: Recipe) -> Self {
        ModalityInputPolicy { rgb: recipe, ir: recipe, depth: recipe }
    }

    pub fn recipe(&self, m: Modality) -> Recipe {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Ir => self.ir,
            Modality::Depth => self.depth,
        }
    }
}
