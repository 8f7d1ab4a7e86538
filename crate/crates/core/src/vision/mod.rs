//! Image front-end: edge-based RoI detection, RoI patch features from a
//! frozen convolutional extractor, and fixed-resolution pixel patches.

mod extractor;
mod image;
mod patches;
mod roi;


use serde::{Deserialize, Serialize};

pub use self::image::{Image, MIN_SIDE};
pub use extractor::FeatureExtractor;
pub use patches::{patchify_roi, pixel_patchify, unpatchify, PixelPatchSet};
pub use roi::{detect_roi, sobel_magnitude, Roi, MIN_ROI_AREA};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    /// Side of the RoI patch grid (grid is `roi_grid x roi_grid`).
    pub roi_grid: usize,
    /// Side of the square the RoI is resized to before splitting.
    pub roi_canonical: usize,
    /// Side of the square the whole image is resized to for pixel patches.
    pub pixel_target: usize,
    pub pixel_patch: usize,
    pub edge_percentile: f64,
    pub roi_margin: f64,
    pub feature_dim: usize,
    pub extractor_seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            roi_grid: 4,
            roi_canonical: 32,
            pixel_target: 32,
            pixel_patch: 8,
            edge_percentile: 90.0,
            roi_margin: 0.05,
            feature_dim: 128,
            extractor_seed: 7,
        }
    }
}

impl VisionConfig {
    pub fn patch_count(&self) -> usize {
        self.roi_grid * self.roi_grid
    }

    pub fn pixel_count(&self) -> usize {
        let g = self.pixel_target / self.pixel_patch.max(1);
        g * g
    }

    pub fn pixel_dim(&self, channels: usize) -> usize {
        self.pixel_patch * self.pixel_patch * channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi_grid == 0 || self.roi_canonical % self.roi_grid != 0 {
            return Err(Error::config("vision.roi_grid", "must divide vision.roi_canonical"));
        }
        if self.pixel_patch == 0 || self.pixel_target % self.pixel_patch != 0 {
            return Err(Error::config("vision.pixel_patch", "must divide vision.pixel_target"));
        }
        if !(0.0..=100.0).contains(&self.edge_percentile) {
            return Err(Error::config("vision.edge_percentile", "must be in [0, 100]"));
        }
        if !(0.0..0.5).contains(&self.roi_margin) {
            return Err(Error::config("vision.roi_margin", "must be in [0, 0.5)"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("vision.feature_dim", "must be positive"));
        }
        Ok(())
    }
}

/// Everything the encoder needs from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFeatures {
    pub roi: Roi,
    /// `roi_grid^2 x feature_dim` frozen patch features.
    pub patch_features: Tensor<f32>,
    /// `N x (h * w * C)` flattened pixel patches.
    pub pixel_vectors: Tensor<f32>,
}

/// RoI detector, patch grid and frozen extractor bundled under one config.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub config: VisionConfig,
    pub extractor: FeatureExtractor,
}

impl FrontEnd {
    pub fn new(config: VisionConfig) -> Result<Self> {
        config.validate()?;
        let extractor = FeatureExtractor::new(3, config.feature_dim, config.extractor_seed);
        Ok(FrontEnd { config, extractor })
    }

    pub fn process(&self, img: &Image) -> Result<VisionFeatures> {
        let c = &self.config;
        let roi = detect_roi(img, c.edge_percentile, c.roi_margin);
        let patches = patchify_roi(img, &roi, c.roi_grid, c.roi_grid, c.roi_canonical)?;
        let patch_features = self.extractor.extract(&patches)?;
        let pixels = pixel_patchify(img, c.pixel_target, c.pixel_target, c.pixel_patch, c.pixel_patch)?;
        Ok(VisionFeatures {
            roi,
            patch_features,
            pixel_vectors: pixels.flattened,
        })
    }
}
