//! Dice coefficient, 95th-percentile Hausdorff distance, per-site
//! aggregation and the per-phase forgetting matrix.
//!
//! Conventions: a boundary pixel is a foreground pixel with at least one
//! 4-connected background neighbour (outside the image counts as
//! background). HD95 pools the distances from every boundary pixel of each
//! mask to the nearest boundary pixel of the other, over all slices of a
//! case, and takes the 95th percentile by linear interpolation between
//! order statistics. Both masks empty gives Dice 1 and HD95 0; exactly one
//! empty gives Dice 0, and on such a slice every boundary pixel of the
//! non-empty mask contributes the image diagonal in millimetres.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{build_context_samples, AugmentedInput, SiteDataset, Spacing};
use crate::engine::PhaseResult;
use crate::error::{ItlError, Result};
use crate::model::{inputs_to_tensor, Branch, ModelBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: f64,
    pub hd95_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub site_id: String,
    pub dsc_percent: f64,
    pub hd95_mm: f64,
    pub per_case: Vec<CaseMetrics>,
}

fn check_pair(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(ItlError::ShapeMismatch {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice_coefficient(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_pair(pred, gt)?;
    let (inter, total) = overlap(pred, gt);
    Ok(dice_from_counts(inter, total))
}

fn overlap(pred: &[u8], gt: &[u8]) -> (u64, u64) {
    pred.iter().zip(gt).fold((0, 0), |(i, t), (&p, &g)| {
        let (p, g) = (u64::from(p != 0), u64::from(g != 0));
        (i + p * g, t + p + g)
    })
}

fn dice_from_counts(inter: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Boundary pixels `(row, col)` of a row-major mask, in raster order.
pub fn boundary(mask: &[u8], (h, w): (usize, usize)) -> Vec<(usize, usize)> {
    let fg = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize] != 0
    };
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if fg(r, c) && !(fg(r - 1, c) && fg(r + 1, c) && fg(r, c - 1) && fg(r, c + 1)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

/// Physical length of the image diagonal.
pub fn diagonal_mm((h, w): (usize, usize), spacing: &Spacing) -> f64 {
    ((h as f64 * spacing.row_mm).powi(2) + (w as f64 * spacing.col_mm).powi(2)).sqrt()
}

/// Linear interpolation between order statistics at `q · (n - 1)`.
/// Sorts `values` in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// For every pixel, the row distance to the nearest point of `points` in the
/// same column (`u32::MAX` when the column has none).
fn column_nearest(points: &[(usize, usize)], (h, w): (usize, usize)) -> Vec<u32> {
    let mut dist = vec![u32::MAX; h * w];
    for &(r, c) in points {
        dist[r * w + c] = 0;
    }
    for c in 0..w {
        for r in 1..h {
            let prev = dist[(r - 1) * w + c];
            if prev != u32::MAX && prev + 1 < dist[r * w + c] {
                dist[r * w + c] = prev + 1;
            }
        }
        for r in (0..h.saturating_sub(1)).rev() {
            let next = dist[(r + 1) * w + c];
            if next != u32::MAX && next + 1 < dist[r * w + c] {
                dist[r * w + c] = next + 1;
            }
        }
    }
    dist
}

/// Exact distances from each of `from` to the nearest point of `to`.
///
/// Within a column the nearest target is the one with the smallest row
/// offset, so a query only has to scan one candidate per column.
fn directed_distances(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
    shape: (usize, usize),
    spacing: &Spacing,
    out: &mut Vec<f64>,
) {
    let (_, w) = shape;
    let near = column_nearest(to, shape);
    for &(r, c) in from {
        let mut best = f64::INFINITY;
        for cc in 0..w {
            let dy = near[r * w + cc];
            if dy == u32::MAX {
                continue;
            }
            let dx = c.abs_diff(cc) as f64;
            let d2 = (dy as f64 * spacing.row_mm).powi(2) + (dx * spacing.col_mm).powi(2);
            if d2 < best {
                best = d2;
            }
        }
        out.push(best.sqrt());
    }
}

/// Pooled symmetric boundary distances of one slice pair, appended to `out`.
fn slice_distances(pred: &[u8], gt: &[u8], shape: (usize, usize), spacing: &Spacing, out: &mut Vec<f64>) {
    let bp = boundary(pred, shape);
    let bg = boundary(gt, shape);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => {}
        (false, false) => {
            directed_distances(&bp, &bg, shape, spacing, out);
            directed_distances(&bg, &bp, shape, spacing, out);
        }
        (false, true) | (true, false) => {
            let n = bp.len() + bg.len();
            out.extend(std::iter::repeat(diagonal_mm(shape, spacing)).take(n));
        }
    }
}

/// HD95 of one slice pair in millimetres.
pub fn hd95(pred: &[u8], gt: &[u8], shape: (usize, usize), spacing: &Spacing) -> Result<f64> {
    hd95_slices(&[(pred, gt)], shape, spacing)
}

/// HD95 of a case: distances pooled over all of its slices.
pub fn hd95_slices(pairs: &[(&[u8], &[u8])], shape: (usize, usize), spacing: &Spacing) -> Result<f64> {
    let mut d = Vec::new();
    for (p, g) in pairs {
        check_pair(p, g)?;
        if p.len() != shape.0 * shape.1 {
            return Err(ItlError::ShapeMismatch {
                expected: vec![shape.0, shape.1],
                actual: vec![p.len()],
            });
        }
        slice_distances(p, g, shape, spacing, &mut d);
    }
    if d.is_empty() {
        return Ok(0.0);
    }
    Ok(percentile(&mut d, 0.95))
}

/// One predicted slice to score.
#[derive(Clone, Copy, Debug)]
pub struct SliceEval<'a> {
    pub case_id: &'a str,
    pub pred: &'a [u8],
    pub gt: &'a [u8],
    pub shape: (usize, usize),
    pub spacing: Spacing,
}

/// Per-case Dice (stacked over the case's slices) and HD95, averaged over
/// cases in first-appearance order.
pub fn evaluate_masks(site_id: &str, slices: &[SliceEval<'_>]) -> Result<SiteMetrics> {
    if slices.is_empty() {
        return Err(ItlError::Empty(format!("no test slices for site {site_id}")));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_case: BTreeMap<&str, Vec<&SliceEval<'_>>> = BTreeMap::new();
    for s in slices {
        if !by_case.contains_key(s.case_id) {
            order.push(s.case_id);
        }
        by_case.entry(s.case_id).or_default().push(s);
    }
    let mut per_case = Vec::with_capacity(order.len());
    for case in order {
        let group = &by_case[case];
        let (mut inter, mut total) = (0, 0);
        for s in group {
            check_pair(s.pred, s.gt)?;
            let (i, t) = overlap(s.pred, s.gt);
            inter += i;
            total += t;
        }
        let pairs: Vec<(&[u8], &[u8])> = group.iter().map(|s| (s.pred, s.gt)).collect();
        let hd = hd95_slices(&pairs, group[0].shape, &group[0].spacing)?;
        per_case.push(CaseMetrics {
            case_id: case.to_string(),
            dsc: dice_from_counts(inter, total),
            hd95_mm: hd,
        });
    }
    let n = per_case.len() as f64;
    Ok(SiteMetrics {
        site_id: site_id.to_string(),
        dsc_percent: 100.0 * per_case.iter().map(|c| c.dsc).sum::<f64>() / n,
        hd95_mm: per_case.iter().map(|c| c.hd95_mm).sum::<f64>() / n,
        per_case,
    })
}

const EVAL_BATCH: usize = 8;

/// Binarized target-branch predictions for `inputs`, `p >= threshold`.
pub fn predict_masks(model: &ModelBundle, inputs: &[&AugmentedInput], threshold: f32) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        let probs = model.predict(inputs_to_tensor(chunk)?, Branch::Target)?;
        for i in 0..chunk.len() {
            out.push(probs.sample(i).iter().map(|&p| u8::from(p >= threshold)).collect());
        }
    }
    Ok(out)
}

/// Scores the model's target branch on a site's test split.
pub fn evaluate_site(model: &ModelBundle, site: &SiteDataset, threshold: f32) -> Result<SiteMetrics> {
    let samples = build_context_samples(&site.test)?;
    if samples.is_empty() {
        return Err(ItlError::Empty(format!("site {} has no test slices", site.site_id())));
    }
    let inputs: Vec<&AugmentedInput> = samples.iter().map(|s| &s.input).collect();
    let preds = predict_masks(model, &inputs, threshold)?;
    let slices: Vec<SliceEval<'_>> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| SliceEval {
            case_id: &s.case_id,
            pred: p,
            gt: &s.mask,
            shape: (s.input.height, s.input.width),
            spacing: s.spacing,
        })
        .collect();
    evaluate_masks(site.site_id(), &slices)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub phase_index: usize,
    pub trained_site: String,
    /// One entry per column; `None` for sites not yet trained.
    pub entries: Vec<Option<SiteMetrics>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingDelta {
    pub site_id: String,
    pub learned_phase: usize,
    /// Final-phase minus learned-phase DSC, in percentage points.
    pub dsc_delta: f64,
    pub hd95_delta_mm: f64,
}

/// Lower-triangular table of per-site metrics after each phase. Columns are
/// sites in the order they were trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    pub sites: Vec<String>,
    pub rows: Vec<ForgettingRow>,
    pub deltas: Vec<ForgettingDelta>,
}

pub fn forgetting_matrix(results: &[PhaseResult]) -> ForgettingMatrix {
    let sites: Vec<String> = results.iter().map(|r| r.trained_site.clone()).collect();
    let rows: Vec<ForgettingRow> = results
        .iter()
        .map(|r| ForgettingRow {
            phase_index: r.phase_index,
            trained_site: r.trained_site.clone(),
            entries: sites
                .iter()
                .map(|s| r.metrics.iter().find(|m| &m.site_id == s).cloned())
                .collect(),
        })
        .collect();
    let deltas = match rows.last() {
        None => Vec::new(),
        Some(last) => sites
            .iter()
            .enumerate()
            .filter_map(|(j, s)| {
                let learned = rows.iter().find(|r| r.entries[j].is_some())?;
                let a = learned.entries[j].as_ref()?;
                let b = last.entries[j].as_ref()?;
                Some(ForgettingDelta {
                    site_id: s.clone(),
                    learned_phase: learned.phase_index,
                    dsc_delta: b.dsc_percent - a.dsc_percent,
                    hd95_delta_mm: b.hd95_mm - a.hd95_mm,
                })
            })
            .collect(),
    };
    ForgettingMatrix { sites, rows, deltas }
}

/// One line of the metrics export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scheme: String,
    pub backbone: String,
    pub gamma: f64,
    pub phase: usize,
    pub site: String,
    pub dsc_percent: f64,
    pub hd95_mm: f64,
}

pub const METRICS_CSV_HEADER: [&str; 7] = ["scheme", "backbone", "gamma", "phase", "site", "dsc_percent", "hd95_mm"];

/// CSV text with a fixed header and fixed-precision numbers.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ItlError::Config(e.to_string());
    w.write_record(METRICS_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scheme.clone(),
            r.backbone.clone(),
            format!("{}", r.gamma),
            r.phase.to_string(),
            r.site.clone(),
            format!("{:.4}", r.dsc_percent),
            format!("{:.4}", r.hd95_mm),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ItlError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
