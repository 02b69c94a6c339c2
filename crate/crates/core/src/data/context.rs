use super::{AugmentedInput, ContextSample, SliceSample};
use crate::error::{ItlError, Result};

/// Stacks slices `(k-1, k, k+1)` of an ordered case volume. Out-of-volume
/// neighbours replicate the edge slice.
pub fn make_augmented_input(
    volume: &[&[f32]],
    shape: (usize, usize),
    k: usize,
) -> Result<AugmentedInput> {
    if k >= volume.len() {
        return Err(ItlError::OutOfRange(format!(
            "slice index {k} outside volume of {} slices",
            volume.len()
        )));
    }
    let plane = shape.0 * shape.1;
    let prev = k.saturating_sub(1);
    let next = (k + 1).min(volume.len() - 1);
    let mut data = Vec::with_capacity(3 * plane);
    for idx in [prev, k, next] {
        if volume[idx].len() != plane {
            return Err(ItlError::ShapeMismatch {
                expected: vec![shape.0, shape.1],
                actual: vec![volume[idx].len()],
            });
        }
        data.extend_from_slice(volume[idx]);
    }
    Ok(AugmentedInput {
        height: shape.0,
        width: shape.1,
        data,
    })
}

/// Builds the axial-context training units of a split. Slices are grouped
/// by case (first-appearance order) and ordered by `slice_index` within a
/// case; neighbours never cross case boundaries.
pub fn build_context_samples(samples: &[SliceSample]) -> Result<Vec<ContextSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for case in super::SiteDataset::case_ids(samples) {
        let mut slices: Vec<&SliceSample> = samples.iter().filter(|s| s.case_id == case).collect();
        slices.sort_by_key(|s| s.slice_index);
        let volume: Vec<&[f32]> = slices.iter().map(|s| s.image.as_slice()).collect();
        for (k, s) in slices.iter().enumerate() {
            out.push(ContextSample {
                site_id: s.site_id.clone(),
                case_id: s.case_id.clone(),
                slice_index: s.slice_index,
                input: make_augmented_input(&volume, s.shape(), k)?,
                mask: s.mask.clone(),
                spacing: s.spacing,
            });
        }
    }
    Ok(out)
}
