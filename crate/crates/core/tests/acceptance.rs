//! End-to-end acceptance checks, run as a plain binary so that every
//! criterion prints one `PASS`/`FAIL` line. Exits nonzero if any fails.

use std::time::Instant;

use itl_core::data::{benchmark_specs, preprocess_site, synthesize_sites, SiteDataset, Spacing};
use itl_core::engine::{
    fit_split, run_isolated, run_itl, run_multi_lower_bound, run_phase, run_scheme, EpochRecord,
    NullObserver, Observer, PhaseResult, RunOutcome, RunSetup, Scheme, StepRecord, TrainConfig,
};
use itl_core::loss::{dice_loss_generic, dice_loss_grad, LossConfig};
use itl_core::memory::MemoryStore;
use itl_core::metrics::{dice_coefficient, hd95, metrics_csv};
use itl_core::model::{build_model, DecoderSpec, EncoderSpec, ModelBundle};
use itl_core::nn::ParamStore;
use itl_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 20;

type Outcome = std::result::Result<String, String>;

fn benchmark_sites() -> Vec<SiteDataset> {
    let mut sites = synthesize_sites(&benchmark_specs(12, 5)).unwrap();
    for s in &mut sites {
        preprocess_site(s, (96, 96)).unwrap();
    }
    sites
}

fn benchmark_setup(seed: u64, gamma: f64, epochs: usize) -> RunSetup {
    RunSetup {
        encoder: EncoderSpec {
            tiny_widths: [8, 16, 32, 32],
            ..EncoderSpec::tiny()
        },
        decoder: DecoderSpec { widths: [32, 16, 8, 8] },
        train: TrainConfig {
            epochs,
            seed,
            gamma_percent: gamma,
            ..TrainConfig::default()
        },
        loss: LossConfig::default(),
    }
}

// ---------------------------------------------------------------- oracles

fn brute_boundary(mask: &[u8], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && mask[r as usize * w + c as usize] != 0;
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let interior = at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1);
            if at(r, c) && !interior {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

fn brute_hd95(pred: &[u8], gt: &[u8], h: usize, w: usize, sp: &Spacing) -> f64 {
    let bp = brute_boundary(pred, h, w);
    let bg = brute_boundary(gt, h, w);
    let dist = |a: (usize, usize), b: (usize, usize)| {
        let dy = (a.0 as f64 - b.0 as f64) * sp.row_mm;
        let dx = (a.1 as f64 - b.1 as f64) * sp.col_mm;
        (dy * dy + dx * dx).sqrt()
    };
    let mut d: Vec<f64> = Vec::new();
    if bp.is_empty() && bg.is_empty() {
        return 0.0;
    }
    if bp.is_empty() || bg.is_empty() {
        let diag = ((h as f64 * sp.row_mm).powi(2) + (w as f64 * sp.col_mm).powi(2)).sqrt();
        d.resize(bp.len() + bg.len(), diag);
    } else {
        for &a in &bp {
            d.push(bg.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min));
        }
        for &b in &bg {
            d.push(bp.iter().map(|&a| dist(a, b)).fold(f64::INFINITY, f64::min));
        }
    }
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    match rng.gen_range(0..4) {
        0 => (0..h * w).map(|_| u8::from(rng.gen_bool(0.3))).collect(),
        1 => vec![0; h * w],
        _ => {
            let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let (a, b) = (rng.gen_range(0.5..h as f64 / 2.0 + 1.0), rng.gen_range(0.5..w as f64 / 2.0 + 1.0));
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    u8::from((y / a).powi(2) + (x / b).powi(2) <= 1.0)
                })
                .collect()
        }
    }
}

fn metric_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_dice = 0.0f64;
    for i in 0..200 {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let sp = Spacing {
            row_mm: rng.gen_range(0.3..2.0),
            col_mm: rng.gen_range(0.3..2.0),
            through_mm: 3.0,
        };
        let p = random_mask(&mut rng, h, w);
        let g = random_mask(&mut rng, h, w);
        let fast = hd95(&p, &g, (h, w), &sp).map_err(|e| e.to_string())?;
        let slow = brute_hd95(&p, &g, h, w, &sp);
        if fast != slow {
            return Err(format!("pair {i} ({h}x{w}): hd95 {fast} vs oracle {slow}"));
        }
        let inter = p.iter().zip(&g).filter(|(a, b)| **a != 0 && **b != 0).count() as f64;
        let total = (p.iter().filter(|&&v| v != 0).count() + g.iter().filter(|&&v| v != 0).count()) as f64;
        let direct = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
        let dsc = dice_coefficient(&p, &g).map_err(|e| e.to_string())?;
        worst_dice = worst_dice.max((dsc - direct).abs());
    }
    if worst_dice > 1e-12 {
        return Err(format!("dice deviates by {worst_dice:e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!("200 pairs exact, max dice error {worst_dice:e}, {secs:.2}s"))
}

fn dice_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = LossConfig::default().smoothing_eps;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pred: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
        let gt: Vec<f64> = (0..64).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        let mut grad = vec![0.0; 64];
        dice_loss_grad(&pred, &gt, eps, &mut grad);
        for k in 0..64 {
            let mut up = pred.clone();
            let mut down = pred.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (dice_loss_generic(&up, &gt, eps) - dice_loss_generic(&down, &gt, eps)) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if worst < 1e-4 && secs < 60.0 {
        Ok(format!("max relative error {worst:.2e}, {secs:.2}s"))
    } else {
        Err(format!("max relative error {worst:.2e}, {secs:.2}s"))
    }
}

// ------------------------------------------------------------ benchmark

fn bits(store: &ParamStore) -> Vec<u32> {
    store.entries().iter().flat_map(|e| e.data.iter().map(|v| v.to_bits())).collect()
}

/// Everything the ITL checks need from one benchmark run.
#[derive(Default)]
struct Probe {
    source_start: Vec<Option<Vec<u32>>>,
    source_end: Vec<Option<Vec<u32>>>,
    total_params: Vec<usize>,
    phase1_steps: Vec<StepRecord>,
    memory_after: Vec<MemoryStore>,
    epochs: Vec<EpochRecord>,
}

impl Observer for Probe {
    fn on_phase_start(&mut self, _: usize, _: &str, model: &ModelBundle) -> Result<()> {
        self.source_start.push(model.source.as_ref().map(|d| bits(&d.params)));
        self.total_params.push(model.count_parameters().0);
        Ok(())
    }
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        if r.phase == 1 {
            self.phase1_steps.push(*r);
        }
        Ok(())
    }
    fn on_epoch(&mut self, r: &EpochRecord) -> Result<()> {
        self.epochs.push(*r);
        Ok(())
    }
    fn on_phase_end(&mut self, _: &PhaseResult, model: &ModelBundle, memory: &MemoryStore) -> Result<()> {
        self.source_end.push(model.source.as_ref().map(|d| bits(&d.params)));
        self.memory_after.push(memory.clone());
        Ok(())
    }
}

struct Bench {
    sites: Vec<SiteDataset>,
    lower: Vec<RunOutcome>,
    itl1: Vec<(RunOutcome, Probe)>,
    itl5: Vec<(RunOutcome, Probe)>,
    secs: f64,
}

fn run_bench() -> Bench {
    let sites = benchmark_sites();
    let start = Instant::now();
    let mut bench = Bench {
        sites: Vec::new(),
        lower: Vec::new(),
        itl1: Vec::new(),
        itl5: Vec::new(),
        secs: 0.0,
    };
    for seed in SEEDS {
        bench
            .lower
            .push(run_multi_lower_bound(&sites, &benchmark_setup(seed, 0.0, EPOCHS), &mut NullObserver).unwrap());
        for (gamma, slot) in [(1.0, &mut bench.itl1), (5.0, &mut bench.itl5)] {
            let mut probe = Probe::default();
            let out = run_itl(&sites, &benchmark_setup(seed, gamma, EPOCHS), &mut probe).unwrap();
            slot.push((out, probe));
        }
    }
    bench.secs = start.elapsed().as_secs_f64();
    bench.sites = sites;
    bench
}

fn first_site_final_dsc(out: &RunOutcome) -> f64 {
    out.phases.last().unwrap().metrics_for("A").unwrap().dsc_percent / 100.0
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn frozen_source_invariance(b: &Bench) -> Outcome {
    let mut checked = 0;
    for (_, p) in b.itl1.iter().chain(&b.itl5) {
        if p.source_start.len() != 3 || p.source_start[0].is_some() {
            return Err("phase 1 should start without a source decoder".into());
        }
        for i in 1..3 {
            match (&p.source_start[i], &p.source_end[i]) {
                (Some(a), Some(z)) if a == z => checked += 1,
                _ => return Err(format!("source decoder changed during phase {}", i + 1)),
            }
        }
    }
    Ok(format!("{checked} phases bit-identical"))
}

fn parameter_constancy(b: &Bench) -> Outcome {
    for (_, p) in b.itl1.iter().chain(&b.itl5) {
        if p.total_params[1..].iter().any(|&n| n != p.total_params[1]) {
            return Err(format!("ITL parameter counts vary: {:?}", p.total_params));
        }
    }
    let setup = benchmark_setup(0, 5.0, 1);
    let iso = run_isolated(&b.sites, &setup, &mut NullObserver).map_err(|e| e.to_string())?;
    let single = build_model(&setup.encoder, &setup.decoder, 1, (96, 96), 0)
        .map_err(|e| e.to_string())?
        .count_parameters()
        .0;
    if iso.stored_parameters != b.sites.len() * single {
        return Err(format!("isolated stores {} != {} x {single}", iso.stored_parameters, b.sites.len()));
    }
    Ok(format!(
        "ITL phases 2..3 hold {} parameters; isolated stores 3 x {single}",
        b.itl5[0].1.total_params[1]
    ))
}

fn memory_law(b: &Bench) -> Outcome {
    let fit: Vec<usize> = b
        .sites
        .iter()
        .map(|s| fit_split(s, &TrainConfig::default()).unwrap().fit.len())
        .collect();
    let expected = |gamma: f64, phase: usize| -> usize {
        fit[..phase]
            .iter()
            .map(|&n| {
                if gamma == 0.0 {
                    0
                } else {
                    ((gamma / 100.0 * n as f64).round() as usize).max(1)
                }
            })
            .sum()
    };
    let mut checked = Vec::new();
    for gamma in [0.0, 1.0, 3.0, 5.0] {
        let mut probe = Probe::default();
        let out = run_itl(&b.sites, &benchmark_setup(0, gamma, 1), &mut probe).map_err(|e| e.to_string())?;
        for (i, p) in out.phases.iter().enumerate() {
            let want = expected(gamma, i + 1);
            if p.memory_size != want || probe.memory_after[i].len() != want {
                return Err(format!("gamma {gamma}, phase {}: memory {} != {want}", i + 1, p.memory_size));
            }
        }
        checked.push(format!("{gamma}%: {:?}", out.phases.iter().map(|p| p.memory_size).collect::<Vec<_>>()));
    }
    for (out, _) in b.itl1.iter().chain(&b.itl5) {
        for (i, p) in out.phases.iter().enumerate() {
            if p.memory_size != expected(out.gamma_percent, i + 1) {
                return Err(format!("benchmark run gamma {}: phase {} memory mismatch", out.gamma_percent, i + 1));
            }
        }
    }
    Ok(checked.join(", "))
}

fn phase1_degeneracy(b: &Bench) -> Outcome {
    let mut n = 0;
    for (_, p) in b.itl1.iter().chain(&b.itl5) {
        for s in &p.phase1_steps {
            if s.loss.l_target != 0.0 || s.loss.l_source != 0.0 || s.loss.l_all != s.loss.l_site {
                return Err(format!("step {} of epoch {} has a memory term", s.step, s.epoch));
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err("no phase-1 steps logged".into());
    }
    Ok(format!("{n} phase-1 steps"))
}

fn forgetting_ordering(b: &Bench) -> Outcome {
    let lower = mean(b.lower.iter().map(first_site_final_dsc));
    let one = mean(b.itl1.iter().map(|(o, _)| first_site_final_dsc(o)));
    let five = mean(b.itl5.iter().map(|(o, _)| first_site_final_dsc(o)));
    let line = format!(
        "first-site DSC after phase 3: lower {lower:.3}, ITL 1% {one:.3}, ITL 5% {five:.3}; {:.0}s",
        b.secs
    );
    if five >= one && one >= lower && five - lower >= 0.05 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn warm_start_convergence(b: &Bench) -> Outcome {
    let mut warm = Vec::new();
    let mut cold = Vec::new();
    for (seed, (_, probe)) in SEEDS.iter().zip(&b.itl5) {
        let w = probe.epochs.iter().find(|e| e.phase == 2 && e.epoch == 9).ok_or("no warm epoch 10")?;
        warm.push(w.train.l_site);

        let setup = benchmark_setup(*seed, 5.0, 10);
        let fresh = build_model(&setup.encoder, &setup.decoder, 2, (96, 96), *seed).map_err(|e| e.to_string())?;
        let mut memory = probe.memory_after[0].clone();
        let mut cold_probe = Probe::default();
        let seen: Vec<&SiteDataset> = b.sites[..2].iter().collect();
        run_phase(fresh, &b.sites[1], &seen, &mut memory, &setup, &mut cold_probe).map_err(|e| e.to_string())?;
        let c = cold_probe.epochs.iter().find(|e| e.epoch == 9).ok_or("no cold epoch 10")?;
        cold.push(c.train.l_site);
    }
    let (w, c) = (mean(warm.iter().copied()), mean(cold.iter().copied()));
    let line = format!("epoch-10 phase-2 site loss: warm {w:.4}, cold {c:.4}");
    if w < c {
        Ok(line)
    } else {
        Err(line)
    }
}

fn determinism() -> Outcome {
    let mut sites = synthesize_sites(&benchmark_specs(5, 2)).unwrap();
    for s in &mut sites {
        preprocess_site(s, (32, 32)).unwrap();
    }
    let mut checked = Vec::new();
    for scheme in [Scheme::Itl, Scheme::Isolated, Scheme::Mixed, Scheme::Multi] {
        let mut setup = benchmark_setup(5, 5.0, 2);
        setup.train.scheme = scheme;
        let csv = || -> std::result::Result<String, String> {
            let out = run_scheme(&sites, &setup, &mut NullObserver).map_err(|e| e.to_string())?;
            metrics_csv(&out.metrics_rows()).map_err(|e| e.to_string())
        };
        let (a, z) = (csv()?, csv()?);
        if a.as_bytes() != z.as_bytes() {
            return Err(format!("{scheme} metrics differ between runs"));
        }
        checked.push(scheme.to_string());
    }
    Ok(format!("byte-identical CSVs for {}", checked.join(", ")))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("metric oracle equivalence", metric_oracle_equivalence()),
        ("dice gradient check", dice_gradient_check()),
        ("determinism", determinism()),
    ];
    let bench = run_bench();
    results.push(("frozen-source invariance", frozen_source_invariance(&bench)));
    results.push(("parameter constancy", parameter_constancy(&bench)));
    results.push(("memory law", memory_law(&bench)));
    results.push(("phase-1 degeneracy", phase1_degeneracy(&bench)));
    results.push(("forgetting ordering", forgetting_ordering(&bench)));
    results.push(("warm-start convergence", warm_start_convergence(&bench)));

    let mut failed = Vec::new();
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {name}: {detail}");
                failed.push(*name);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} of {} criteria failed", failed.len(), results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
