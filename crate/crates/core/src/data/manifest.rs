//! Site manifests and slice files.
//!
//! A manifest is one JSON document per site; slice paths are relative to the
//! manifest's directory. Images are either 16-bit (or 8-bit) grayscale PNG,
//! or raw little-endian `f32` files with a header of three little-endian
//! `u32` values `(H, W, 1)`. Masks are 8-bit PNG with `0` for background and
//! `255` (or `1`) for foreground.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader};
use serde::{Deserialize, Serialize};

use super::preprocess::preprocess_site;
use super::split::split_train_test;
use super::{SiteDataset, SiteMeta, SliceSample, Spacing, ValueRange};
use crate::error::{ItlError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub site_id: String,
    pub modality: String,
    pub spacing: ManifestSpacing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_strength_tesla: Option<ValueRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_name: Option<String>,
    pub cases: Vec<ManifestCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSpacing {
    pub in_plane_mm: f64,
    pub through_plane_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub case_id: String,
    pub slices: Vec<ManifestSlice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSlice {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// In-plane (height, width) every slice is resampled to.
    pub target_hw: (usize, usize),
    pub split_seed: u64,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ItlError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| ItlError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.validate(path)?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let fail = |reason: String| {
            Err(ItlError::Manifest {
                path: path.to_path_buf(),
                reason,
            })
        };
        if self.site_id.is_empty() {
            return fail("site_id is empty".into());
        }
        if !(self.spacing.in_plane_mm > 0.0 && self.spacing.through_plane_mm > 0.0) {
            return fail("spacings must be positive".into());
        }
        if self.cases.is_empty() {
            return fail("no cases".into());
        }
        for (i, c) in self.cases.iter().enumerate() {
            if c.slices.is_empty() {
                return fail(format!("case {} has no slices", c.case_id));
            }
            if self.cases[..i].iter().any(|o| o.case_id == c.case_id) {
                return fail(format!("duplicate case_id {}", c.case_id));
            }
        }
        Ok(())
    }
}

/// Loads every slice of a site, normalizes each case, resamples to
/// `opts.target_hw` and splits 4:1 by case.
pub fn load_site(manifest_path: &Path, opts: &LoadOptions) -> Result<SiteDataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let spacing = Spacing::isotropic_in_plane(
        manifest.spacing.in_plane_mm,
        manifest.spacing.through_plane_mm,
    );
    let case_ids: Vec<String> = manifest.cases.iter().map(|c| c.case_id.clone()).collect();
    let (train_ids, _) = split_train_test(&case_ids, opts.split_seed)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for case in &manifest.cases {
        for (k, sl) in case.slices.iter().enumerate() {
            let sample = load_slice(base, &manifest.site_id, &case.case_id, k, sl, spacing)?;
            if train_ids.contains(&case.case_id) {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    let mut site = SiteDataset {
        meta: SiteMeta {
            site_id: manifest.site_id.clone(),
            modality: manifest.modality.clone(),
            num_cases: manifest.cases.len(),
            field_strength_tesla: manifest.field_strength_tesla,
            in_plane_resolution_mm: ValueRange::point(manifest.spacing.in_plane_mm),
            through_plane_mm: ValueRange::point(manifest.spacing.through_plane_mm),
            source_name: manifest.source_name.clone().unwrap_or_default(),
        },
        train,
        test,
    };
    preprocess_site(&mut site, opts.target_hw)?;
    Ok(site)
}

fn load_slice(
    base: &Path,
    site_id: &str,
    case_id: &str,
    slice_index: usize,
    entry: &ManifestSlice,
    spacing: Spacing,
) -> Result<SliceSample> {
    let resolve = |p: &Path| -> Result<PathBuf> {
        let full = base.join(p);
        if !full.is_file() {
            return Err(ItlError::MissingSlice {
                path: full,
                case_id: case_id.to_string(),
                slice_index,
            });
        }
        Ok(full)
    };
    let image_path = resolve(&entry.image)?;
    let mask_path = resolve(&entry.mask)?;
    let (ih, iw, image) = read_image(&image_path)?;
    let (mh, mw, raw_mask) = read_mask(&mask_path)?;
    if (ih, iw) != (mh, mw) {
        return Err(ItlError::SliceShape {
            case_id: case_id.to_string(),
            slice_index,
            detail: format!("image is {ih}x{iw} but mask is {mh}x{mw}"),
        });
    }
    let mut mask = Vec::with_capacity(raw_mask.len());
    for v in raw_mask {
        mask.push(match v {
            0 => 0,
            1 | 255 => 1,
            other => {
                return Err(ItlError::NonBinaryMask {
                    case_id: case_id.to_string(),
                    slice_index,
                    value: other as u32,
                })
            }
        });
    }
    Ok(SliceSample {
        site_id: site_id.to_string(),
        case_id: case_id.to_string(),
        slice_index,
        height: ih,
        width: iw,
        image,
        mask,
        spacing,
    })
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    if is_png(path) {
        let img = open_png(path)?.into_luma16();
        let (w, h) = img.dimensions();
        return Ok((h as usize, w as usize, img.into_raw().into_iter().map(f32::from).collect()));
    }
    let bytes = fs::read(path).map_err(|e| ItlError::io(path, e))?;
    let bad = |reason: &str| ItlError::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 {
        return Err(bad("raw file shorter than its 12-byte header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != 1 {
        return Err(bad("raw image must be single-channel"));
    }
    if bytes.len() != 12 + 4 * h * w {
        return Err(bad("raw payload length does not match header"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((h, w, data))
}

fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !is_png(path) {
        return Err(ItlError::Image {
            path: path.to_path_buf(),
            reason: "masks must be 8-bit PNG".into(),
        });
    }
    let img = open_png(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(ItlError::Image {
            path: path.to_path_buf(),
            reason: format!("mask must be 8-bit grayscale, found {:?}", img.color()),
        });
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| ItlError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| ItlError::io(path, e))?
        .decode()
        .map_err(|e| ItlError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Writes a raw `f32` slice file.
pub fn write_raw_image(path: &Path, h: usize, w: usize, data: &[f32]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| ItlError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |b: &[u8]| out.write_all(b).map_err(|e| ItlError::io(path, e));
    for v in [h as u32, w as u32, 1] {
        write(&v.to_le_bytes())?;
    }
    for v in data {
        write(&v.to_le_bytes())?;
    }
    out.flush().map_err(|e| ItlError::io(path, e))
}

fn write_mask_png(path: &Path, h: usize, w: usize, mask: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, mask.iter().map(|&m| m * 255).collect())
        .expect("mask length matches shape");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ItlError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Writes a site (train and test cases together) as a manifest plus slice
/// files under `dir/<site_id>/`. Returns the manifest path.
pub fn write_site(site: &SiteDataset, dir: &Path) -> Result<PathBuf> {
    let site_dir = dir.join(&site.meta.site_id);
    fs::create_dir_all(&site_dir).map_err(|e| ItlError::io(&site_dir, e))?;
    let mut all: Vec<&SliceSample> = site.train.iter().chain(&site.test).collect();
    all.sort_by(|a, b| a.case_id.cmp(&b.case_id).then(a.slice_index.cmp(&b.slice_index)));
    let mut cases: Vec<ManifestCase> = Vec::new();
    for s in all {
        let image = PathBuf::from(format!("{}_{:03}_image.f32", s.case_id, s.slice_index));
        let mask = PathBuf::from(format!("{}_{:03}_mask.png", s.case_id, s.slice_index));
        write_raw_image(&site_dir.join(&image), s.height, s.width, &s.image)?;
        write_mask_png(&site_dir.join(&mask), s.height, s.width, &s.mask)?;
        let slice = ManifestSlice {
            image: PathBuf::from(&site.meta.site_id).join(image),
            mask: PathBuf::from(&site.meta.site_id).join(mask),
        };
        match cases.last_mut() {
            Some(c) if c.case_id == s.case_id => c.slices.push(slice),
            _ => cases.push(ManifestCase {
                case_id: s.case_id.clone(),
                slices: vec![slice],
            }),
        }
    }
    let spacing = site
        .train
        .first()
        .or(site.test.first())
        .map(|s| s.spacing)
        .unwrap_or(Spacing::isotropic_in_plane(1.0, 1.0));
    let manifest = Manifest {
        site_id: site.meta.site_id.clone(),
        modality: site.meta.modality.clone(),
        spacing: ManifestSpacing {
            in_plane_mm: spacing.row_mm,
            through_plane_mm: spacing.through_mm,
        },
        field_strength_tesla: site.meta.field_strength_tesla,
        source_name: Some(site.meta.source_name.clone()).filter(|s| !s.is_empty()),
        cases,
    };
    let path = dir.join(format!("{}.json", site.meta.site_id));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| ItlError::io(&path, e))?;
    Ok(path)
}
