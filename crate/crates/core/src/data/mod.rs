//! Site datasets: representation, ingestion, preprocessing, splitting,
//! axial-context inputs, augmentation and a synthetic multi-site generator.

mod augment;
mod context;
mod manifest;
mod preprocess;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use augment::{apply_transform, augment, sample_transform, AugmentConfig, Transform};
pub use context::{build_context_samples, make_augmented_input};
pub use manifest::{load_site, write_site, LoadOptions, Manifest, ManifestCase, ManifestSlice, ManifestSpacing};
pub use preprocess::{normalize_intensity, normalize_site_cases, preprocess_site, resample_slice};
pub use split::split_train_test;
pub use synth::{benchmark_specs, synthesize_site, synthesize_sites, ShapeFamily, SynthSiteSpec};

/// Closed interval of a physical quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub fn point(v: f64) -> Self {
        ValueRange { min: v, max: v }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub site_id: String,
    pub modality: String,
    pub num_cases: usize,
    pub field_strength_tesla: Option<ValueRange>,
    pub in_plane_resolution_mm: ValueRange,
    pub through_plane_mm: ValueRange,
    pub source_name: String,
}

/// Pixel spacing in millimetres. Rows and columns are tracked separately
/// because in-plane resampling to a non-proportional grid makes them differ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row_mm: f64,
    pub col_mm: f64,
    pub through_mm: f64,
}

impl Spacing {
    pub fn isotropic_in_plane(in_plane_mm: f64, through_mm: f64) -> Self {
        Spacing {
            row_mm: in_plane_mm,
            col_mm: in_plane_mm,
            through_mm,
        }
    }
}

/// One 2-D slice with its binary mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSample {
    pub site_id: String,
    pub case_id: String,
    pub slice_index: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities.
    pub image: Vec<f32>,
    /// Row-major labels in `{0, 1}`.
    pub mask: Vec<u8>,
    pub spacing: Spacing,
}

impl SliceSample {
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Three axial neighbours `(k-1, k, k+1)` of one slice stacked channel-wise,
/// stored as a `3 × H × W` row-major block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInput {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl AugmentedInput {
    pub const CHANNELS: usize = 3;

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// A training unit: axial-context input, its label, and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSample {
    pub site_id: String,
    pub case_id: String,
    pub slice_index: usize,
    pub input: AugmentedInput,
    pub mask: Vec<u8>,
    pub spacing: Spacing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDataset {
    pub meta: SiteMeta,
    pub train: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

impl SiteDataset {
    pub fn site_id(&self) -> &str {
        &self.meta.site_id
    }

    /// Distinct case ids in first-appearance order.
    pub fn case_ids(samples: &[SliceSample]) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in samples {
            if ids.last() != Some(&s.case_id) && !ids.contains(&s.case_id) {
                ids.push(s.case_id.clone());
            }
        }
        ids
    }

    pub fn train_cases(&self) -> Vec<String> {
        Self::case_ids(&self.train)
    }

    pub fn test_cases(&self) -> Vec<String> {
        Self::case_ids(&self.test)
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.train.first().or(self.test.first()).map(|s| s.shape())
    }
}
