use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::split::split_train_test;
use super::{SiteDataset, SiteMeta, SliceSample, Spacing, ValueRange};
use crate::error::{ItlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Blob,
}

/// Parameters of one synthetic site. Images are raw (un-normalized)
/// intensities: `background + contrast * mask + noise`, where the background
/// level of each case is drawn from `N(intensity_mean, intensity_std²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSiteSpec {
    pub site_id: String,
    pub num_cases: usize,
    pub slices_per_case: usize,
    pub shape_family: ShapeFamily,
    pub intensity_mean: f64,
    #[serde(default)]
    pub intensity_std: f64,
    /// Foreground minus background intensity; negative for dark objects.
    pub contrast: f64,
    pub noise_std: f64,
    /// Semi-axis range as a fraction of the shorter image side.
    pub size_range: [f64; 2],
    pub rng_seed: u64,
    /// Intensity offset of an unlabeled ellipse drawn beside the object;
    /// 0 disables it. When enabled the object and the distractor sit in
    /// opposite horizontal halves of the image.
    #[serde(default)]
    pub distractor_contrast: f64,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_in_plane")]
    pub in_plane_mm: f64,
    #[serde(default = "default_through_plane")]
    pub through_plane_mm: f64,
}

fn default_side() -> usize {
    96
}
fn default_in_plane() -> f64 {
    0.625
}
fn default_through_plane() -> f64 {
    3.6
}

impl SynthSiteSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ItlError::Config(format!("synthetic site {}: {m}", self.site_id)));
        if self.num_cases < 2 {
            return bad("num_cases must be at least 2");
        }
        if self.slices_per_case == 0 || self.height == 0 || self.width == 0 {
            return bad("slices_per_case, height and width must be positive");
        }
        if !(self.noise_std >= 0.0 && self.intensity_std >= 0.0) {
            return bad("noise_std and intensity_std must be >= 0");
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad("size_range must satisfy 0 < min <= max < 0.5");
        }
        if !(self.in_plane_mm > 0.0 && self.through_plane_mm > 0.0) {
            return bad("spacings must be positive");
        }
        Ok(())
    }
}

/// Generates all sites. Each site is a deterministic function of its spec.
pub fn synthesize_sites(specs: &[SynthSiteSpec]) -> Result<Vec<SiteDataset>> {
    if specs.is_empty() {
        return Err(ItlError::Empty("no synthetic site specs".into()));
    }
    specs.iter().map(synthesize_site).collect()
}

pub fn synthesize_site(spec: &SynthSiteSpec) -> Result<SiteDataset> {
    spec.validate()?;
    let case_ids: Vec<String> = (0..spec.num_cases)
        .map(|i| format!("{}_case{:03}", spec.site_id, i))
        .collect();
    let (train_ids, _) = split_train_test(&case_ids, spec.rng_seed)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, case_id) in case_ids.iter().enumerate() {
        let slices = synthesize_case(spec, i as u64, case_id);
        if train_ids.contains(case_id) {
            train.extend(slices);
        } else {
            test.extend(slices);
        }
    }
    Ok(SiteDataset {
        meta: SiteMeta {
            site_id: spec.site_id.clone(),
            modality: "synthetic".into(),
            num_cases: spec.num_cases,
            field_strength_tesla: None,
            in_plane_resolution_mm: ValueRange::point(spec.in_plane_mm),
            through_plane_mm: ValueRange::point(spec.through_plane_mm),
            source_name: "synthetic".into(),
        },
        train,
        test,
    })
}

/// Three 96×96 sites used by the desk-scale experiments: bright ellipses,
/// bright blobs at a different intensity level, and faint blobs next to an
/// unlabeled bright ellipse that resembles the first site's targets.
pub fn benchmark_specs(num_cases: usize, slices_per_case: usize) -> Vec<SynthSiteSpec> {
    let site = |id: &str, family, mean, contrast, noise, size_range, seed, distractor| SynthSiteSpec {
        site_id: id.into(),
        num_cases,
        slices_per_case,
        shape_family: family,
        intensity_mean: mean,
        intensity_std: 10.0,
        contrast,
        noise_std: noise,
        size_range,
        rng_seed: seed,
        distractor_contrast: distractor,
        height: 96,
        width: 96,
        in_plane_mm: 0.625,
        through_plane_mm: 3.6,
    };
    vec![
        site("A", ShapeFamily::Ellipse, 200.0, 110.0, 25.0, [0.10, 0.18], 11, 0.0),
        site("B", ShapeFamily::Blob, 300.0, 70.0, 30.0, [0.12, 0.20], 12, 0.0),
        site("C", ShapeFamily::Blob, 250.0, 45.0, 8.0, [0.08, 0.14], 13, 110.0),
    ]
}

struct Shape {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    harmonics: [(f64, f64); 2],
    drift: (f64, f64),
}

fn synthesize_case(spec: &SynthSiteSpec, index: u64, case_id: &str) -> Vec<SliceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    let a = rng.gen_range(spec.size_range[0]..=spec.size_range[1]) * side;
    let b = a * rng.gen_range(0.7..=1.0);
    let mut shape = Shape {
        cy: rng.gen_range(0.4..0.6) * h as f64,
        cx: rng.gen_range(0.4..0.6) * w as f64,
        a,
        b,
        theta: rng.gen_range(0.0..PI),
        harmonics: match spec.shape_family {
            ShapeFamily::Ellipse => [(0.0, 0.0); 2],
            ShapeFamily::Blob => [
                (rng.gen_range(0.08..0.18), rng.gen_range(0.0..2.0 * PI)),
                (rng.gen_range(0.05..0.12), rng.gen_range(0.0..2.0 * PI)),
            ],
        },
        drift: (rng.gen_range(-0.05..0.05) * side, rng.gen_range(-0.05..0.05) * side),
    };
    let z: f64 = StandardNormal.sample(&mut rng);
    let background = spec.intensity_mean + spec.intensity_std * z;
    let distractor = (spec.distractor_contrast != 0.0).then(|| {
        let left = rng.gen_bool(0.5);
        let frac = |x: f64| if left { x } else { 1.0 - x };
        shape.cx = frac(rng.gen_range(0.25..0.35)) * w as f64;
        let a = rng.gen_range(spec.size_range[0]..=spec.size_range[1]) * side;
        Shape {
            cy: rng.gen_range(0.4..0.6) * h as f64,
            cx: frac(rng.gen_range(0.65..0.75)) * w as f64,
            a,
            b: a * rng.gen_range(0.7..=1.0),
            theta: rng.gen_range(0.0..PI),
            harmonics: [(0.0, 0.0); 2],
            drift: (rng.gen_range(-0.05..0.05) * side, rng.gen_range(-0.05..0.05) * side),
        }
    });
    let n = spec.slices_per_case;
    (0..n)
        .map(|k| {
            // axial position in [-0.75, 0.75]; the object tapers toward the ends
            let zpos = if n == 1 { 0.0 } else { -0.75 + 1.5 * k as f64 / (n - 1) as f64 };
            let scale = (1.0 - zpos * zpos).sqrt();
            let mut image = vec![0.0f32; h * w];
            let mut mask = vec![0u8; h * w];
            for r in 0..h {
                for c in 0..w {
                    let inside = shape.contains(r as f64, c as f64, scale, zpos);
                    let noise: f64 = if spec.noise_std > 0.0 {
                        spec.noise_std * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                    } else {
                        0.0
                    };
                    let offset = if inside {
                        spec.contrast
                    } else if distractor.as_ref().is_some_and(|d| d.contains(r as f64, c as f64, scale, zpos)) {
                        spec.distractor_contrast
                    } else {
                        0.0
                    };
                    let v = background + offset + noise;
                    image[r * w + c] = v as f32;
                    mask[r * w + c] = u8::from(inside);
                }
            }
            SliceSample {
                site_id: spec.site_id.clone(),
                case_id: case_id.to_string(),
                slice_index: k,
                height: h,
                width: w,
                image,
                mask,
                spacing: Spacing::isotropic_in_plane(spec.in_plane_mm, spec.through_plane_mm),
            }
        })
        .collect()
}

impl Shape {
    fn contains(&self, r: f64, c: f64, scale: f64, zpos: f64) -> bool {
        let dy = r - (self.cy + self.drift.0 * zpos);
        let dx = c - (self.cx + self.drift.1 * zpos);
        let (s, co) = self.theta.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        let phi = v.atan2(u);
        let radial = 1.0
            + self.harmonics[0].0 * (2.0 * phi + self.harmonics[0].1).cos()
            + self.harmonics[1].0 * (3.0 * phi + self.harmonics[1].1).cos();
        let (a, b) = (self.a * scale * radial, self.b * scale * radial);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}
