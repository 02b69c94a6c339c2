//! Report artifacts built from finished run directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use itl_core::engine::{report_costs, RunOutcome};
use itl_core::metrics::forgetting_matrix;
use plotters::prelude::*;

pub struct LoadedRun {
    pub label: String,
    pub outcome: RunOutcome,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join("outcome.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let outcome: RunOutcome = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    Ok(LoadedRun {
        label,
        outcome,
    })
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

/// Lower-triangular per-phase DSC/HD95 table followed by a `delta` row
/// (final phase minus the phase each site was learned in).
pub fn forgetting_csv(outcome: &RunOutcome) -> Result<String> {
    let m = forgetting_matrix(&outcome.phases);
    let mut header = vec!["phase".to_string(), "trained_site".to_string()];
    for s in &m.sites {
        header.push(format!("{s}_dsc_percent"));
        header.push(format!("{s}_hd95_mm"));
    }
    let mut rows = vec![header];
    for r in &m.rows {
        let mut row = vec![r.phase_index.to_string(), r.trained_site.clone()];
        for e in &r.entries {
            match e {
                Some(sm) => row.extend([num(sm.dsc_percent), num(sm.hd95_mm)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        rows.push(row);
    }
    let mut delta = vec!["delta".to_string(), String::new()];
    for s in &m.sites {
        match m.deltas.iter().find(|d| &d.site_id == s) {
            Some(d) => delta.extend([num(d.dsc_delta), num(d.hd95_delta_mm)]),
            None => delta.extend([String::new(), String::new()]),
        }
    }
    rows.push(delta);
    csv_string(rows)
}

/// Each run's latest metrics for every site it evaluated.
pub fn comparison_csv(runs: &[LoadedRun]) -> Result<String> {
    let mut rows = vec![["run", "scheme", "backbone", "gamma", "site", "dsc_percent", "hd95_mm"]
        .map(String::from)
        .to_vec()];
    for run in runs {
        let o = &run.outcome;
        let mut sites: Vec<&str> = Vec::new();
        for p in &o.phases {
            for m in &p.metrics {
                if !sites.contains(&m.site_id.as_str()) {
                    sites.push(&m.site_id);
                }
            }
        }
        for site in sites {
            let latest = o.phases.iter().rev().find_map(|p| p.metrics_for(site)).expect("site listed");
            rows.push(vec![
                run.label.clone(),
                o.scheme.to_string(),
                o.backbone.clone(),
                format!("{}", o.gamma_percent),
                site.to_string(),
                num(latest.dsc_percent),
                num(latest.hd95_mm),
            ]);
        }
    }
    csv_string(rows)
}

pub fn cost_csv(runs: &[LoadedRun]) -> Result<String> {
    let outcomes: Vec<RunOutcome> = runs.iter().map(|r| r.outcome.clone()).collect();
    let mut rows = vec![["run", "scheme", "stored_parameters", "per_phase_train_size", "parameters_grow_with_sites"]
        .map(String::from)
        .to_vec()];
    for (run, c) in runs.iter().zip(report_costs(&outcomes)) {
        rows.push(vec![
            run.label.clone(),
            c.scheme.to_string(),
            c.stored_parameters.to_string(),
            c.per_phase_train_size
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            c.parameters_grow_with_sites.to_string(),
        ]);
    }
    csv_string(rows)
}

/// Per-epoch training `L_all` and validation `L_site`, epochs numbered
/// consecutively across phases.
pub struct LossCurve {
    pub label: String,
    pub train: Vec<(f64, f64)>,
    pub validation: Vec<(f64, f64)>,
}

pub fn loss_curve(run: &LoadedRun) -> LossCurve {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut x = 0.0;
    for p in &run.outcome.phases {
        for e in &p.loss_trace {
            x += 1.0;
            train.push((x, e.train.l_all));
            if let Some(v) = e.validation_l_site {
                validation.push((x, v));
            }
        }
    }
    LossCurve {
        label: run.label.clone(),
        train,
        validation,
    }
}

pub fn plot_loss_curves(path: &Path, title: &str, curves: &[LossCurve]) -> Result<()> {
    let x_max = curves
        .iter()
        .flat_map(|c| c.train.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    let y_max = curves
        .iter()
        .flat_map(|c| c.train.iter().chain(&c.validation).map(|p| p.1))
        .fold(0.0, f64::max)
        .max(1e-3)
        * 1.05;
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("Dice loss")
        .draw()?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(c.train.iter().copied(), color.stroke_width(2)))?
            .label(format!("{} train", c.label))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        let dashed = color.mix(0.55);
        chart
            .draw_series(LineSeries::new(c.validation.iter().copied(), dashed.stroke_width(1)))?
            .label(format!("{} validation", c.label))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], dashed.stroke_width(1)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Writes every report artifact into `out` and returns the written paths.
pub fn write_report(runs: &[LoadedRun], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        written.push(p);
        Ok(())
    };
    for run in runs {
        put(format!("forgetting_{}.csv", run.label), forgetting_csv(&run.outcome)?)?;
    }
    put("comparison.csv".into(), comparison_csv(runs)?)?;
    put("costs.csv".into(), cost_csv(runs)?)?;
    let curves: Vec<LossCurve> = runs.iter().map(loss_curve).collect();
    for c in &curves {
        let p = out.join(format!("loss_{}.svg", c.label));
        plot_loss_curves(&p, &c.label, std::slice::from_ref(c))?;
        written.push(p);
    }
    if curves.len() > 1 {
        let p = out.join("loss_overlay.svg");
        plot_loss_curves(&p, "loss curves", &curves)?;
        written.push(p);
    }
    Ok(written)
}
