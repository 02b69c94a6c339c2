//! Phase-sequential training and the baselines it is compared against.
//!
//! [`run_itl`] trains one site per phase: each optimizer step combines a
//! current-site batch with a rehearsal batch from the exemplar memory, the
//! target decoder and encoder are updated, and at the end of the phase all
//! sites seen so far are evaluated, the memory is extended with the finished
//! site and the target decoder is copied into the frozen source decoder.
//! [`run_isolated`], [`run_mixed`] and [`run_multi_lower_bound`] provide the
//! upper and lower reference points, and [`report_costs`] summarizes what
//! each scheme stores and trains on.

mod optim;
mod writer;

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, build_context_samples, AugmentConfig, AugmentedInput, ContextSample, SiteDataset};
use crate::error::{ItlError, Result};
use crate::loss::{loss_and_grads, site_loss, Example, LossBreakdown, LossConfig, ModelGrads, SiteBatch};
use crate::memory::MemoryStore;
use crate::metrics::{evaluate_site, MetricsRow, SiteMetrics};
use crate::model::{build_model, DecoderSpec, EncoderSpec, ModelBundle};

pub use optim::{lr_at, Adam};
pub use writer::RunWriter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Itl,
    Isolated,
    Mixed,
    Multi,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Itl => "itl",
            Scheme::Isolated => "isolated",
            Scheme::Mixed => "mixed",
            Scheme::Multi => "multi",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = ItlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itl" => Ok(Scheme::Itl),
            "isolated" => Ok(Scheme::Isolated),
            "mixed" => Ok(Scheme::Mixed),
            "multi" => Ok(Scheme::Multi),
            other => Err(ItlError::Config(format!(
                "unknown scheme {other:?} (expected itl, isolated, mixed or multi)"
            ))),
        }
    }
}

/// Component ablation. `None` is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[serde(alias = "both")]
    None,
    /// Sequential fine-tuning from the configured encoder, without `L_model`.
    PretrainOnly,
    /// Full losses, encoder trained from scratch.
    ModelLossOnly,
}

impl FromStr for Ablation {
    type Err = ItlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "both" => Ok(Ablation::None),
            "pretrain_only" => Ok(Ablation::PretrainOnly),
            "model_loss_only" => Ok(Ablation::ModelLossOnly),
            other => Err(ItlError::Config(format!(
                "unknown ablation mode {other:?} (expected both, pretrain_only or model_loss_only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Current-site samples per step.
    pub batch_size: usize,
    /// Memory exemplars per step.
    pub rehearsal_batch_size: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    /// 0-based epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub gamma_percent: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub ablation: Ablation,
    /// Fraction of each site's training cases held out for validation loss.
    pub validation_fraction: f64,
    pub threshold: f32,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 5,
            rehearsal_batch_size: 5,
            lr_init: 1e-3,
            lr_decay: 0.95,
            lr_milestones: vec![60, 80],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            gamma_percent: 5.0,
            seed: 0,
            scheme: Scheme::Itl,
            ablation: Ablation::None,
            validation_fraction: 0.1,
            threshold: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ItlError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if !(self.lr_init > 0.0 && self.lr_decay > 0.0) {
            return bad("lr_init and lr_decay must be > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("beta1 and beta2 must be in [0, 1) and adam_eps > 0");
        }
        if !(0.0..=100.0).contains(&self.gamma_percent) {
            return bad("gamma_percent must be in [0, 100]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must be in [0, 1]");
        }
        Ok(())
    }

    fn model_loss(&self) -> bool {
        self.ablation != Ablation::PretrainOnly && self.scheme != Scheme::Multi
    }
}

/// Everything a run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSetup {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    fn encoder_for_run(&self) -> EncoderSpec {
        let mut enc = self.encoder.clone();
        if self.train.ablation == Ablation::ModelLossOnly {
            enc.pretrained = false;
            enc.weights_path = None;
        }
        enc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: usize,
    pub epoch: usize,
    /// Step counter within the phase, from 0.
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Mean training breakdown of one epoch and the held-out current-site loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    /// 0-based.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub validation_l_site: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase_index: usize,
    pub trained_site: String,
    /// Sites seen so far, in training order.
    pub metrics: Vec<SiteMetrics>,
    pub loss_trace: Vec<EpochRecord>,
    /// Exemplars in memory after this phase's update.
    pub memory_size: usize,
    /// Samples trained on this phase: current-site fit set plus memory.
    pub train_size: usize,
}

impl PhaseResult {
    pub fn metrics_for(&self, site_id: &str) -> Option<&SiteMetrics> {
        self.metrics.iter().find(|m| m.site_id == site_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub scheme: Scheme,
    pub backbone: String,
    pub gamma_percent: f64,
    pub phases: Vec<PhaseResult>,
    /// Parameters that must be kept to serve every site.
    pub stored_parameters: usize,
    /// Parameter total of each trained model after its last phase.
    pub model_parameters: Vec<usize>,
    /// Normalized site-transition entropy of the first pooled epoch
    /// (mixed scheme only).
    pub mixing_entropy: Option<f64>,
}

impl RunOutcome {
    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        self.phases
            .iter()
            .flat_map(|p| {
                p.metrics.iter().map(move |m| MetricsRow {
                    scheme: self.scheme.as_str().to_string(),
                    backbone: self.backbone.clone(),
                    gamma: self.gamma_percent,
                    phase: p.phase_index,
                    site: m.site_id.clone(),
                    dsc_percent: m.dsc_percent,
                    hd95_mm: m.hd95_mm,
                })
            })
            .collect()
    }
}

/// Hooks called while a run progresses. All methods default to no-ops.
pub trait Observer {
    fn on_phase_start(&mut self, _phase: usize, _site_id: &str, _model: &ModelBundle) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
    /// `model` is the end-of-phase bundle before the handoff.
    fn on_phase_end(&mut self, _result: &PhaseResult, _model: &ModelBundle, _memory: &MemoryStore) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl Observer for NullObserver {}

/// 64-bit FNV-1a of `tag`, mixed with `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Number of validation cases held out of `n` training cases.
pub fn validation_case_count(n: usize, fraction: f64) -> usize {
    if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    }
}

/// A site's training split as fit and validation context samples.
#[derive(Clone, Debug)]
pub struct FitSplit {
    pub fit: Vec<ContextSample>,
    pub validation: Vec<ContextSample>,
}

pub fn fit_split(site: &SiteDataset, config: &TrainConfig) -> Result<FitSplit> {
    let mut cases = site.train_cases();
    if cases.is_empty() {
        return Err(ItlError::Empty(format!("site {} has no training cases", site.site_id())));
    }
    let v = validation_case_count(cases.len(), config.validation_fraction);
    cases.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &format!("validation:{}", site.site_id()),
    )));
    let held: Vec<String> = cases[..v].to_vec();
    let (validation, fit) = build_context_samples(&site.train)?
        .into_iter()
        .partition(|s| held.contains(&s.case_id));
    Ok(FitSplit { fit, validation })
}

/// Steps per epoch for a fit set of `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn mean_breakdown(sum: LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    LossBreakdown {
        l_site: sum.l_site / k,
        l_target: sum.l_target / k,
        l_source: sum.l_source / k,
        l_model: sum.l_model / k,
        l_all: sum.l_all / k,
    }
}

fn add_breakdown(a: &mut LossBreakdown, b: &LossBreakdown) {
    a.l_site += b.l_site;
    a.l_target += b.l_target;
    a.l_source += b.l_source;
    a.l_model += b.l_model;
    a.l_all += b.l_all;
}

const EVAL_CHUNK: usize = 8;

fn validation_loss(model: &ModelBundle, samples: &[ContextSample], eps: f64) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let ex: Vec<Example<'_>> = chunk.iter().map(|s| Example { input: &s.input, mask: &s.mask }).collect();
        total += site_loss(model, &ex, eps)? * chunk.len() as f64;
    }
    Ok(Some(total / samples.len() as f64))
}

/// Trains `model` in place for one phase. Returns the per-epoch trace and
/// the site order of the first epoch's fit samples.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut ModelBundle,
    fit: &[ContextSample],
    validation: &[ContextSample],
    memory: &MemoryStore,
    setup: &RunSetup,
    model_loss: bool,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn Observer,
) -> Result<(Vec<EpochRecord>, Vec<String>)> {
    let cfg = &setup.train;
    if fit.is_empty() {
        return Err(ItlError::Empty("no fit samples for this phase".into()));
    }
    let phase = model.phase_index;
    let mut opt_enc = Adam::new(&model.encoder.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut opt_tgt = Adam::new(&model.target.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut grads = ModelGrads::zeros_like(model);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut first_epoch_sites = Vec::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(rng);
        if epoch == 0 {
            first_epoch_sites = order.iter().map(|&i| fit[i].site_id.clone()).collect();
        }
        let mut sum = LossBreakdown::default();
        let mut n_steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let current: Vec<(AugmentedInput, Vec<u8>)> = idx
                .iter()
                .map(|&i| augment(&cfg.augment, rng, &fit[i].input, &fit[i].mask))
                .collect();
            let groups = if model_loss && phase > 1 {
                memory.sample_rehearsal_batch(cfg.rehearsal_batch_size, rng)
            } else {
                Vec::new()
            };
            let rehearsal: Vec<(&str, Vec<(AugmentedInput, Vec<u8>)>)> = groups
                .iter()
                .map(|g| {
                    let items = g
                        .exemplars
                        .iter()
                        .map(|e| augment(&cfg.augment, rng, &e.input, &e.mask))
                        .collect();
                    (g.site_id, items)
                })
                .collect();
            let cur_ex: Vec<Example<'_>> = current.iter().map(|(x, m)| Example { input: x, mask: m }).collect();
            let mem_batches: Vec<SiteBatch<'_>> = rehearsal
                .iter()
                .map(|(site_id, items)| SiteBatch {
                    site_id,
                    examples: items.iter().map(|(x, m)| Example { input: x, mask: m }).collect(),
                })
                .collect();
            grads.zero();
            let loss = loss_and_grads(model, &cur_ex, &mem_batches, &setup.loss, model_loss, &mut grads)?;
            opt_enc.step(&mut model.encoder.params, &grads.encoder, lr);
            opt_tgt.step(&mut model.target.params, &grads.target, lr);
            observer.on_step(&StepRecord {
                phase,
                epoch,
                step,
                lr,
                loss,
            })?;
            add_breakdown(&mut sum, &loss);
            n_steps += 1;
            step += 1;
        }
        let record = EpochRecord {
            phase,
            epoch,
            lr,
            train: mean_breakdown(sum, n_steps),
            validation_l_site: validation_loss(model, validation, setup.loss.smoothing_eps)?,
        };
        observer.on_epoch(&record)?;
        trace.push(record);
    }
    Ok((trace, first_epoch_sites))
}

fn check_site_shapes(sites: &[&SiteDataset], input_hw: (usize, usize)) -> Result<()> {
    for s in sites {
        if let Some(hw) = s.image_shape() {
            if hw != input_hw {
                return Err(ItlError::ShapeMismatch {
                    expected: vec![input_hw.0, input_hw.1],
                    actual: vec![hw.0, hw.1],
                });
            }
        }
    }
    Ok(())
}

fn site_input_hw(sites: &[SiteDataset]) -> Result<(usize, usize)> {
    let hw = sites
        .first()
        .and_then(|s| s.image_shape())
        .ok_or_else(|| ItlError::Empty("no sites to train on".into()))?;
    check_site_shapes(&sites.iter().collect::<Vec<_>>(), hw)?;
    Ok(hw)
}

/// Trains `bundle` on `site` for one phase, evaluates every site in `seen`
/// (which should end with `site`), adds `site` to `memory` and hands off.
///
/// The returned bundle belongs to the next phase. Under the multi-site
/// lower bound no source decoder is created; only the phase index advances.
pub fn run_phase(
    mut bundle: ModelBundle,
    site: &SiteDataset,
    seen: &[&SiteDataset],
    memory: &mut MemoryStore,
    setup: &RunSetup,
    observer: &mut dyn Observer,
) -> Result<(ModelBundle, PhaseResult)> {
    setup.validate()?;
    check_site_shapes(seen, bundle.input_hw)?;
    check_site_shapes(&[site], bundle.input_hw)?;
    let phase = bundle.phase_index;
    let cfg = &setup.train;
    let split = fit_split(site, cfg)?;
    let memory_before = memory.len();
    info!(
        "phase {phase}: site {} ({} fit, {} validation, {} in memory)",
        site.site_id(),
        split.fit.len(),
        split.validation.len(),
        memory_before
    );
    observer.on_phase_start(phase, site.site_id(), &bundle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("phase{phase}:{}", site.site_id())));
    let (loss_trace, _) = train_loop(
        &mut bundle,
        &split.fit,
        &split.validation,
        memory,
        setup,
        cfg.model_loss(),
        &mut rng,
        observer,
    )?;
    let metrics = seen
        .iter()
        .map(|s| evaluate_site(&bundle, s, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut mem_rng = ChaCha8Rng::seed_from_u64(derive_seed(memory.selection_seed, &format!("memory:{}", site.site_id())));
    memory.update(site.site_id(), &split.fit, &mut mem_rng)?;
    let result = PhaseResult {
        phase_index: phase,
        trained_site: site.site_id().to_string(),
        metrics,
        loss_trace,
        memory_size: memory.len(),
        train_size: split.fit.len() + if phase > 1 { memory_before } else { 0 },
    };
    observer.on_phase_end(&result, &bundle, memory)?;
    let next = if cfg.scheme == Scheme::Multi {
        bundle.phase_index += 1;
        bundle
    } else {
        bundle.handoff()
    };
    Ok((next, result))
}

fn sequential(
    sites: &[SiteDataset],
    setup: &RunSetup,
    observer: &mut dyn Observer,
) -> Result<(Vec<PhaseResult>, ModelBundle, usize)> {
    let hw = site_input_hw(sites)?;
    let cfg = &setup.train;
    let mut memory = MemoryStore::new(cfg.gamma_percent, cfg.seed)?;
    let mut bundle = build_model(&setup.encoder_for_run(), &setup.decoder, 1, hw, cfg.seed)?;
    let mut results = Vec::with_capacity(sites.len());
    let mut last_total = 0;
    for (i, site) in sites.iter().enumerate() {
        let seen: Vec<&SiteDataset> = sites[..=i].iter().collect();
        last_total = bundle.count_parameters().0;
        let (next, result) = run_phase(bundle, site, &seen, &mut memory, setup, observer)?;
        bundle = next;
        results.push(result);
    }
    Ok((results, bundle, last_total))
}

fn backbone(setup: &RunSetup) -> String {
    setup.encoder.kind.as_str().to_string()
}

/// Full method over `sites` in the given order.
pub fn run_itl(sites: &[SiteDataset], setup: &RunSetup, observer: &mut dyn Observer) -> Result<RunOutcome> {
    let mut setup = setup.clone();
    setup.train.scheme = Scheme::Itl;
    let (phases, _, total) = sequential(sites, &setup, observer)?;
    Ok(RunOutcome {
        scheme: Scheme::Itl,
        backbone: backbone(&setup),
        gamma_percent: setup.train.gamma_percent,
        phases,
        stored_parameters: total,
        model_parameters: vec![total],
        mixing_entropy: None,
    })
}

/// Sequential fine-tuning without memory, source decoder or `L_model`.
pub fn run_multi_lower_bound(
    sites: &[SiteDataset],
    setup: &RunSetup,
    observer: &mut dyn Observer,
) -> Result<RunOutcome> {
    let mut setup = setup.clone();
    setup.train.scheme = Scheme::Multi;
    setup.train.gamma_percent = 0.0;
    let (phases, _, total) = sequential(sites, &setup, observer)?;
    Ok(RunOutcome {
        scheme: Scheme::Multi,
        backbone: backbone(&setup),
        gamma_percent: 0.0,
        phases,
        stored_parameters: total,
        model_parameters: vec![total],
        mixing_entropy: None,
    })
}

/// One fresh model per site. Each site's run depends only on the seed and
/// that site, so results do not depend on processing order.
pub fn run_isolated(sites: &[SiteDataset], setup: &RunSetup, observer: &mut dyn Observer) -> Result<RunOutcome> {
    site_input_hw(sites)?;
    let mut setup = setup.clone();
    setup.train.scheme = Scheme::Isolated;
    let mut phases = Vec::with_capacity(sites.len());
    let mut model_parameters = Vec::with_capacity(sites.len());
    for site in sites {
        let (mut p, _, total) = sequential(std::slice::from_ref(site), &setup, observer)?;
        phases.append(&mut p);
        model_parameters.push(total);
    }
    Ok(RunOutcome {
        scheme: Scheme::Isolated,
        backbone: backbone(&setup),
        gamma_percent: setup.train.gamma_percent,
        phases,
        stored_parameters: model_parameters.iter().sum(),
        model_parameters,
        mixing_entropy: None,
    })
}

/// Normalized conditional entropy `H(s_{t+1} | s_t) / ln(#sites)` of a site
/// sequence: 0 for site-by-site blocks, near 1 for a thorough shuffle.
pub fn site_mixing_entropy(sequence: &[String]) -> f64 {
    let mut sites: Vec<&str> = sequence.iter().map(String::as_str).collect();
    sites.sort_unstable();
    sites.dedup();
    let k = sites.len();
    if k < 2 || sequence.len() < 2 {
        return 0.0;
    }
    let id = |s: &str| sites.binary_search(&s).expect("site listed");
    let mut counts = vec![0.0f64; k * k];
    for w in sequence.windows(2) {
        counts[id(&w[0]) * k + id(&w[1])] += 1.0;
    }
    let n = (sequence.len() - 1) as f64;
    let mut h = 0.0;
    for a in 0..k {
        let row: f64 = counts[a * k..(a + 1) * k].iter().sum();
        for &c in &counts[a * k..(a + 1) * k] {
            if c > 0.0 {
                h -= c / n * (c / row).ln();
            }
        }
    }
    h / (k as f64).ln()
}

/// One model trained on the pooled, shuffled training data of all sites.
pub fn run_mixed(sites: &[SiteDataset], setup: &RunSetup, observer: &mut dyn Observer) -> Result<RunOutcome> {
    let hw = site_input_hw(sites)?;
    let mut setup = setup.clone();
    setup.validate()?;
    setup.train.scheme = Scheme::Mixed;
    let cfg = &setup.train;
    let mut fit = Vec::new();
    let mut validation = Vec::new();
    for s in sites {
        let split = fit_split(s, cfg)?;
        fit.extend(split.fit);
        validation.extend(split.validation);
    }
    let mut bundle = build_model(&setup.encoder_for_run(), &setup.decoder, 1, hw, cfg.seed)?;
    let label = "mixed";
    observer.on_phase_start(1, label, &bundle)?;
    let memory = MemoryStore::new(0.0, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mixed"));
    let (loss_trace, first_epoch) =
        train_loop(&mut bundle, &fit, &validation, &memory, &setup, false, &mut rng, observer)?;
    let metrics = sites
        .iter()
        .map(|s| evaluate_site(&bundle, s, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let result = PhaseResult {
        phase_index: 1,
        trained_site: label.to_string(),
        metrics,
        loss_trace,
        memory_size: 0,
        train_size: fit.len(),
    };
    observer.on_phase_end(&result, &bundle, &memory)?;
    let total = bundle.count_parameters().0;
    Ok(RunOutcome {
        scheme: Scheme::Mixed,
        backbone: backbone(&setup),
        gamma_percent: cfg.gamma_percent,
        phases: vec![result],
        stored_parameters: total,
        model_parameters: vec![total],
        mixing_entropy: Some(site_mixing_entropy(&first_epoch)),
    })
}

/// Component ablation of the full method.
pub fn run_ablation(
    mode: Ablation,
    sites: &[SiteDataset],
    setup: &RunSetup,
    observer: &mut dyn Observer,
) -> Result<RunOutcome> {
    let mut setup = setup.clone();
    setup.train.ablation = mode;
    run_itl(sites, &setup, observer)
}

/// Dispatches on `setup.train.scheme`; a non-`None` ablation applies to
/// the ITL scheme.
pub fn run_scheme(sites: &[SiteDataset], setup: &RunSetup, observer: &mut dyn Observer) -> Result<RunOutcome> {
    match setup.train.scheme {
        Scheme::Itl => run_ablation(setup.train.ablation, sites, setup, observer),
        Scheme::Isolated => run_isolated(sites, setup, observer),
        Scheme::Mixed => run_mixed(sites, setup, observer),
        Scheme::Multi => run_multi_lower_bound(sites, setup, observer),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub scheme: Scheme,
    pub stored_parameters: usize,
    pub per_phase_train_size: Vec<usize>,
    pub parameters_grow_with_sites: bool,
}

pub fn report_costs(runs: &[RunOutcome]) -> Vec<CostRow> {
    runs.iter()
        .map(|r| CostRow {
            scheme: r.scheme,
            stored_parameters: r.stored_parameters,
            per_phase_train_size: r.phases.iter().map(|p| p.train_size).collect(),
            parameters_grow_with_sites: r.model_parameters.len() > 1,
        })
        .collect()
}

#[cfg(test)]
mod tests;
