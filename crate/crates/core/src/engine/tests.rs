use super::*;
use crate::data::{preprocess_site, synthesize_site, ShapeFamily, SynthSiteSpec};
use crate::memory::quota;
use crate::nn::ParamStore;

fn site(id: &str, contrast: f64, seed: u64) -> SiteDataset {
    let mut site = synthesize_site(&SynthSiteSpec {
        site_id: id.into(),
        num_cases: 5,
        slices_per_case: 4,
        shape_family: ShapeFamily::Ellipse,
        intensity_mean: 100.0,
        intensity_std: 5.0,
        contrast,
        noise_std: 10.0,
        size_range: [0.2, 0.3],
        rng_seed: seed,
        distractor_contrast: 0.0,
        height: 32,
        width: 32,
        in_plane_mm: 1.0,
        through_plane_mm: 3.0,
    })
    .unwrap();
    preprocess_site(&mut site, (32, 32)).unwrap();
    site
}

fn sites() -> Vec<SiteDataset> {
    vec![site("A", 60.0, 1), site("B", 40.0, 2), site("C", -50.0, 3)]
}

fn setup(epochs: usize, gamma: f64) -> RunSetup {
    RunSetup {
        encoder: EncoderSpec {
            tiny_widths: [4, 4, 8, 8],
            ..EncoderSpec::tiny()
        },
        decoder: DecoderSpec { widths: [8, 8, 4, 4] },
        train: TrainConfig {
            epochs,
            gamma_percent: gamma,
            seed: 7,
            ..TrainConfig::default()
        },
        loss: LossConfig::default(),
    }
}

#[derive(Default)]
struct Recorder {
    steps: Vec<StepRecord>,
    source_at_start: Vec<Option<ParamStore>>,
    source_at_end: Vec<Option<ParamStore>>,
}

impl Observer for Recorder {
    fn on_phase_start(&mut self, _: usize, _: &str, model: &ModelBundle) -> Result<()> {
        self.source_at_start.push(model.source.as_ref().map(|d| d.params.clone()));
        Ok(())
    }
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.steps.push(*r);
        Ok(())
    }
    fn on_phase_end(&mut self, _: &PhaseResult, model: &ModelBundle, _: &MemoryStore) -> Result<()> {
        self.source_at_end.push(model.source.as_ref().map(|d| d.params.clone()));
        Ok(())
    }
}

#[test]
fn helpers() {
    assert_eq!(validation_case_count(1, 0.1), 0);
    assert_eq!(validation_case_count(4, 0.1), 1);
    assert_eq!(validation_case_count(24, 0.1), 2);
    assert_eq!(steps_per_epoch(12, 5), 3);
    assert_eq!(derive_seed(1, "x"), derive_seed(1, "x"));
    assert_ne!(derive_seed(1, "x"), derive_seed(2, "x"));
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let blocks = site_mixing_entropy(&s(&["A", "A", "A", "B", "B", "B"]));
    let h = -(2.0 / 5.0) * (2.0f64 / 3.0).ln() - (1.0 / 5.0) * (1.0f64 / 3.0).ln();
    assert!((blocks - h / 2.0f64.ln()).abs() < 1e-12);
    assert_eq!(site_mixing_entropy(&s(&["A", "A"])), 0.0);
    assert!("bogus".parse::<Ablation>().is_err());
    assert!("bogus".parse::<Scheme>().is_err());
    assert_eq!("both".parse::<Ablation>().unwrap(), Ablation::None);
}

#[test]
fn itl_run_obeys_phase_invariants() {
    let sites = sites();
    let setup = setup(2, 10.0);
    let mut rec = Recorder::default();
    let out = run_itl(&sites, &setup, &mut rec).unwrap();
    assert_eq!(out.phases.len(), 3);

    let fit_sizes: Vec<usize> = sites.iter().map(|s| fit_split(s, &setup.train).unwrap().fit.len()).collect();
    let mut expected_memory = 0;
    for (i, p) in out.phases.iter().enumerate() {
        let steps = rec.steps.iter().filter(|s| s.phase == i + 1).count();
        assert_eq!(steps, 2 * steps_per_epoch(fit_sizes[i], 5));
        assert_eq!(p.train_size, fit_sizes[i] + expected_memory);
        expected_memory += quota(10.0, fit_sizes[i]);
        assert_eq!(p.memory_size, expected_memory);
        assert_eq!(p.metrics.len(), i + 1);
        assert_eq!(p.loss_trace.len(), 2);
        assert!(p.loss_trace.iter().all(|e| e.validation_l_site.is_some()));
    }
    for s in rec.steps.iter().filter(|s| s.phase == 1) {
        assert_eq!((s.loss.l_target, s.loss.l_source), (0.0, 0.0));
        assert_eq!(s.loss.l_all, s.loss.l_site);
    }
    assert!(rec.steps.iter().filter(|s| s.phase > 1).all(|s| s.loss.l_source > 0.0));
    assert_eq!(rec.source_at_start[0], None);
    for i in 1..3 {
        assert!(rec.source_at_start[i].is_some());
        assert_eq!(rec.source_at_start[i], rec.source_at_end[i]);
    }
}

#[test]
fn runs_are_deterministic_and_lower_bound_is_itl_without_model_loss() {
    let sites = sites();
    let a = run_itl(&sites, &setup(1, 5.0), &mut NullObserver).unwrap();
    let b = run_itl(&sites, &setup(1, 5.0), &mut NullObserver).unwrap();
    assert_eq!(a, b);

    let mut cfg = setup(1, 0.0);
    cfg.train.ablation = Ablation::PretrainOnly;
    let mut r1 = Recorder::default();
    let mut r2 = Recorder::default();
    let itl = run_itl(&sites, &cfg, &mut r1).unwrap();
    let multi = run_multi_lower_bound(&sites, &setup(1, 5.0), &mut r2).unwrap();
    assert_eq!(r1.steps, r2.steps);
    assert!(r2.steps.iter().all(|s| s.loss.l_model == 0.0));
    for (x, y) in itl.phases.iter().zip(&multi.phases) {
        assert_eq!(x.metrics, y.metrics);
    }
    assert!(r2.source_at_end.iter().all(Option::is_none));

    let both = run_ablation(Ablation::None, &sites, &setup(1, 5.0), &mut NullObserver).unwrap();
    assert_eq!(both, a);
}

#[test]
fn isolated_and_mixed_baselines() {
    let sites = sites();
    let cfg = setup(1, 5.0);
    let iso = run_isolated(&sites, &cfg, &mut NullObserver).unwrap();
    let single = build_model(&cfg.encoder, &cfg.decoder, 1, (32, 32), 0).unwrap().count_parameters().0;
    assert_eq!(iso.stored_parameters, 3 * single);
    let reversed: Vec<SiteDataset> = sites.iter().rev().cloned().collect();
    let iso_rev = run_isolated(&reversed, &cfg, &mut NullObserver).unwrap();
    for p in &iso.phases {
        let q = iso_rev.phases.iter().find(|q| q.trained_site == p.trained_site).unwrap();
        assert_eq!(p, q);
    }
    let one = run_itl(&sites[..1], &cfg, &mut NullObserver).unwrap();
    assert_eq!(one.phases[0], iso.phases[0]);

    let mixed = run_mixed(&sites, &cfg, &mut NullObserver).unwrap();
    let pooled: usize = sites.iter().map(|s| fit_split(s, &cfg.train).unwrap().fit.len()).sum();
    assert_eq!(mixed.phases.len(), 1);
    assert_eq!(mixed.phases[0].train_size, pooled);
    assert_eq!(mixed.phases[0].metrics.len(), 3);
    assert!(mixed.mixing_entropy.unwrap() > 0.9, "{:?}", mixed.mixing_entropy);

    let itl = run_itl(&sites, &cfg, &mut NullObserver).unwrap();
    let costs = report_costs(&[itl, iso, mixed]);
    assert_eq!(costs.len(), 3);
    assert!(!costs[0].parameters_grow_with_sites && costs[1].parameters_grow_with_sites);
    assert_eq!(costs[2].per_phase_train_size, vec![pooled]);
}

#[test]
fn shape_mismatch_between_model_and_site_is_rejected() {
    let cfg = setup(1, 5.0);
    let bundle = build_model(&cfg.encoder, &cfg.decoder, 1, (48, 48), 0).unwrap();
    let s = site("A", 60.0, 1);
    let mut mem = MemoryStore::new(5.0, 0).unwrap();
    assert!(matches!(
        run_phase(bundle, &s, &[&s], &mut mem, &cfg, &mut NullObserver),
        Err(ItlError::ShapeMismatch { .. })
    ));
}

#[test]
fn run_writer_layout() {
    let dir = tempfile::tempdir().unwrap();
    let sites = sites();
    let mut w = RunWriter::create(dir.path()).unwrap();
    let out = run_itl(&sites[..2], &setup(1, 5.0), &mut w).unwrap();
    w.finish(&out).unwrap();
    for f in [
        "train_log.jsonl",
        "epochs.jsonl",
        "outcome.json",
        "metrics.csv",
        "checkpoints/phase1_A.safetensors",
        "checkpoints/phase2_B.safetensors",
        "memory/phase2_B.json",
        "results/phase1_A.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 2);
    let line = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for k in ["phase", "epoch", "step", "lr", "l_site", "l_target", "l_source", "l_model", "l_all"] {
        assert!(first.get(k).is_some(), "{k}");
    }
}
