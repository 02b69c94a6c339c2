use std::collections::BTreeMap;

use log::warn;

use super::{SiteDataset, SliceSample};
use crate::error::{ItlError, Result};

/// Per-volume z-score over every voxel of a case. A constant volume maps to
/// zeros (with a warning).
pub fn normalize_intensity(voxels: &[f32]) -> Result<Vec<f32>> {
    if voxels.is_empty() {
        return Err(ItlError::Empty("cannot normalize an empty volume".into()));
    }
    let n = voxels.len() as f64;
    let mean = voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = voxels
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        warn!("constant volume (value {mean}); normalized to zeros");
        return Ok(vec![0.0; voxels.len()]);
    }
    Ok(voxels
        .iter()
        .map(|&v| ((v as f64 - mean) / std) as f32)
        .collect())
}

/// Z-scores every case of `samples` in place, pooling all of its slices.
pub fn normalize_site_cases(samples: &mut [SliceSample]) -> Result<()> {
    let mut by_case: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_case.entry(s.case_id.clone()).or_default().push(i);
    }
    for idx in by_case.values() {
        let voxels: Vec<f32> = idx
            .iter()
            .flat_map(|&i| samples[i].image.iter().copied())
            .collect();
        let normed = normalize_intensity(&voxels)?;
        let mut off = 0;
        for &i in idx {
            let len = samples[i].image.len();
            samples[i].image.copy_from_slice(&normed[off..off + len]);
            off += len;
        }
    }
    Ok(())
}

/// Bilinear image / nearest-neighbour mask resampling to `target`
/// (height, width), half-pixel-centre convention. Spacing is rescaled so the
/// physical field of view is unchanged.
pub fn resample_slice(sample: &SliceSample, target: (usize, usize)) -> Result<SliceSample> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(ItlError::Config(format!("resample target {th}x{tw} must be positive")));
    }
    let (h, w) = sample.shape();
    if (h, w) == target {
        return Ok(sample.clone());
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut image = vec![0.0f32; th * tw];
    let mut mask = vec![0u8; th * tw];
    for r in 0..th {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        let ny = (((r as f64 + 0.5) * sy) as usize).min(h - 1);
        for c in 0..tw {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let px = |y: usize, x: usize| sample.image[y * w + x] as f64;
            let top = px(y0, x0) * (1.0 - wx) + px(y0, x1) * wx;
            let bot = px(y1, x0) * (1.0 - wx) + px(y1, x1) * wx;
            image[r * tw + c] = (top * (1.0 - wy) + bot * wy) as f32;
            let nx = (((c as f64 + 0.5) * sx) as usize).min(w - 1);
            mask[r * tw + c] = sample.mask[ny * w + nx];
        }
    }
    let mut spacing = sample.spacing;
    spacing.row_mm *= sy;
    spacing.col_mm *= sx;
    Ok(SliceSample {
        height: th,
        width: tw,
        image,
        mask,
        spacing,
        ..sample.clone()
    })
}

/// Normalizes each case (train and test slices together) and resamples all
/// slices to `target`.
pub fn preprocess_site(site: &mut SiteDataset, target: (usize, usize)) -> Result<()> {
    // a case lives in exactly one split, so normalizing the splits
    // separately is the same as normalizing per case
    normalize_site_cases(&mut site.train)?;
    normalize_site_cases(&mut site.test)?;
    for s in site.train.iter_mut().chain(site.test.iter_mut()) {
        *s = resample_slice(s, target)?;
    }
    Ok(())
}
