//! Dice loss and the ITL objective `L_all = L_site + L_target + L_source`.
//!
//! `L_site` is the mean target-branch Dice loss over a current-site batch.
//! The memory terms are per past site: the mean Dice loss over that site's
//! rehearsal exemplars, weighted by `alpha` (target branch) or `delta`
//! (frozen source branch) and summed over sites.

use log::warn;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::AugmentedInput;
use crate::error::{ItlError, Result};
use crate::model::{inputs_to_tensor, Branch, ModelBundle};
use crate::nn::{Grads, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub delta: f64,
    pub smoothing_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            delta: 0.5,
            smoothing_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.delta >= 0.0) {
            return Err(ItlError::Config("alpha and delta must be >= 0".into()));
        }
        if !(self.smoothing_eps > 0.0) {
            return Err(ItlError::Config("smoothing_eps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_site: f64,
    pub l_target: f64,
    pub l_source: f64,
    pub l_model: f64,
    pub l_all: f64,
}

/// Composes the three measured terms into the full breakdown.
pub fn total_loss(l_site: f64, l_target: f64, l_source: f64) -> LossBreakdown {
    let l_model = l_target + l_source;
    LossBreakdown {
        l_site,
        l_target,
        l_source,
        l_model,
        l_all: l_model + l_site,
    }
}

/// `1 - (2 Σ p·g + eps) / (Σ p + Σ g + eps)`.
pub fn dice_loss_generic<T: Float>(pred: &[T], gt: &[T], eps: T) -> T {
    let (inter, sum) = dice_sums(pred, gt);
    let two = T::one() + T::one();
    T::one() - (two * inter + eps) / (sum + eps)
}

/// Dice loss and its gradient with respect to `pred`, written to `grad`.
pub fn dice_loss_grad<T: Float>(pred: &[T], gt: &[T], eps: T, grad: &mut [T]) -> T {
    let (inter, sum) = dice_sums(pred, gt);
    let two = T::one() + T::one();
    let num = two * inter + eps;
    let den = sum + eps;
    let den2 = den * den;
    for (dst, &g) in grad.iter_mut().zip(gt) {
        *dst = (num - two * g * den) / den2;
    }
    T::one() - num / den
}

fn dice_sums<T: Float>(pred: &[T], gt: &[T]) -> (T, T) {
    assert_eq!(pred.len(), gt.len(), "prediction and label lengths differ");
    pred.iter()
        .zip(gt)
        .fold((T::zero(), T::zero()), |(i, s), (&p, &g)| (i + p * g, s + p + g))
}

/// Validated Dice loss of one probability map against a binary mask.
pub fn dice_loss(pred: &[f32], gt: &[u8], eps: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(ItlError::ShapeMismatch {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(ItlError::OutOfRange(format!("prediction {p} outside [0, 1]")));
    }
    if let Some(g) = gt.iter().find(|&&g| g > 1) {
        return Err(ItlError::OutOfRange(format!("label {g} is not binary")));
    }
    let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    Ok(dice_loss_generic(&p, &g, eps))
}

/// One training example: an axial-context input and its label.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub input: &'a AugmentedInput,
    pub mask: &'a [u8],
}

/// Rehearsal exemplars of one past site.
#[derive(Clone, Debug)]
pub struct SiteBatch<'a> {
    pub site_id: &'a str,
    pub examples: Vec<Example<'a>>,
}

fn mean_branch_loss(model: &ModelBundle, batch: &[Example<'_>], branch: Branch, eps: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(ItlError::Empty("loss batch".into()));
    }
    let inputs: Vec<&AugmentedInput> = batch.iter().map(|e| e.input).collect();
    let probs = model.predict(inputs_to_tensor(&inputs)?, branch)?;
    let mut total = 0.0;
    for (i, e) in batch.iter().enumerate() {
        total += dice_loss(probs.sample(i), e.mask, eps)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean target-branch Dice loss over a current-site batch.
pub fn site_loss(model: &ModelBundle, batch: &[Example<'_>], eps: f64) -> Result<f64> {
    mean_branch_loss(model, batch, Branch::Target, eps)
}

fn memory_loss(
    model: &ModelBundle,
    memory: &[SiteBatch<'_>],
    weight: f64,
    branch: Branch,
    eps: f64,
) -> Result<f64> {
    if model.phase_index == 1 {
        return Ok(0.0);
    }
    if branch == Branch::Source {
        model.decoder(Branch::Source)?;
    }
    if memory.iter().all(|b| b.examples.is_empty()) {
        warn!("memory is empty in phase {}; memory loss is 0", model.phase_index);
        return Ok(0.0);
    }
    if weight == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for site in memory.iter().filter(|b| !b.examples.is_empty()) {
        total += weight * mean_branch_loss(model, &site.examples, branch, eps)?;
    }
    Ok(total)
}

/// `Σ_j alpha · mean Dice(target branch, exemplars of site j)`; 0 in phase 1.
pub fn target_memory_loss(model: &ModelBundle, memory: &[SiteBatch<'_>], alpha: f64, eps: f64) -> Result<f64> {
    memory_loss(model, memory, alpha, Branch::Target, eps)
}

/// `Σ_j delta · mean Dice(source branch, exemplars of site j)`; 0 in phase 1.
/// Requires the source decoder from phase 2 on.
pub fn source_memory_loss(model: &ModelBundle, memory: &[SiteBatch<'_>], delta: f64, eps: f64) -> Result<f64> {
    memory_loss(model, memory, delta, Branch::Source, eps)
}

/// Gradients of the trainable parts. The source decoder has none.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub encoder: Grads,
    pub target: Grads,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelBundle) -> Self {
        ModelGrads {
            encoder: Grads::zeros_like(&model.encoder.params),
            target: Grads::zeros_like(&model.target.params),
        }
    }

    pub fn zero(&mut self) {
        self.encoder.zero();
        self.target.zero();
    }
}

/// Per-sample Dice losses of `probs` and the weighted gradient
/// `Σ w_i ∂L_i/∂p_i`. Returns `Σ w_i L_i`.
fn weighted_dice(probs: &Tensor, masks: &[&[u8]], weights: &[f64], eps: f64) -> (f64, Tensor, Vec<f64>) {
    let mut g = Tensor::zeros(probs.shape);
    let mut total = 0.0;
    let mut per_sample = Vec::with_capacity(masks.len());
    let plane = probs.sample_len();
    let mut p64 = vec![0.0f64; plane];
    let mut g64 = vec![0.0f64; plane];
    let mut grad = vec![0.0f64; plane];
    for (i, (mask, &w)) in masks.iter().zip(weights).enumerate() {
        for (d, &p) in p64.iter_mut().zip(probs.sample(i)) {
            *d = p as f64;
        }
        for (d, &m) in g64.iter_mut().zip(mask.iter()) {
            *d = m as f64;
        }
        let l = dice_loss_grad(&p64, &g64, eps, &mut grad);
        per_sample.push(l);
        total += w * l;
        for (d, &v) in g.sample_mut(i).iter_mut().zip(&grad) {
            *d = (w * v) as f32;
        }
    }
    (total, g, per_sample)
}

/// Computes the full ITL objective on one step and accumulates its
/// gradients into `grads`.
///
/// With `model_loss` false (or in phase 1, or with no memory) only `L_site`
/// is formed. The encoder runs once over the concatenated current and
/// rehearsal examples.
pub fn loss_and_grads(
    model: &ModelBundle,
    current: &[Example<'_>],
    memory: &[SiteBatch<'_>],
    cfg: &LossConfig,
    model_loss: bool,
    grads: &mut ModelGrads,
) -> Result<LossBreakdown> {
    if current.is_empty() {
        return Err(ItlError::Empty("current-site batch".into()));
    }
    let use_memory = model_loss && model.phase_index > 1 && memory.iter().any(|b| !b.examples.is_empty());
    let source = if use_memory {
        Some(model.decoder(Branch::Source)?)
    } else {
        None
    };

    let mut inputs: Vec<&AugmentedInput> = current.iter().map(|e| e.input).collect();
    let mut masks: Vec<&[u8]> = current.iter().map(|e| e.mask).collect();
    let n_cur = current.len();
    let mut w_target = vec![1.0 / n_cur as f64; n_cur];
    let mut w_source = Vec::new();
    if use_memory {
        for site in memory.iter().filter(|b| !b.examples.is_empty()) {
            let k = site.examples.len() as f64;
            for e in &site.examples {
                inputs.push(e.input);
                masks.push(e.mask);
                w_target.push(cfg.alpha / k);
                w_source.push(cfg.delta / k);
            }
        }
    }
    let x = inputs_to_tensor(&inputs)?;
    if (x.h(), x.w()) != model.input_hw {
        return Err(ItlError::ShapeMismatch {
            expected: vec![model.input_hw.0, model.input_hw.1],
            actual: vec![x.h(), x.w()],
        });
    }
    let (feat, ecache) = model.encoder.forward(x, true);
    let feat_mem = use_memory.then(|| feat.slice_batch(n_cur, feat.n()));
    let (probs, dcache) = model.target.forward(feat, true);
    let (_, g_probs, per_sample) = weighted_dice(&probs, &masks, &w_target, cfg.smoothing_eps);
    let l_site = per_sample[..n_cur].iter().sum::<f64>() / n_cur as f64;
    let l_target = w_target[n_cur..]
        .iter()
        .zip(&per_sample[n_cur..])
        .map(|(w, l)| w * l)
        .sum::<f64>();
    let mut g_feat = model
        .target
        .backward(dcache.as_ref().expect("cache kept"), &g_probs, Some(&mut grads.target));

    let mut l_source = 0.0;
    if let (Some(src), Some(feat_mem)) = (source, feat_mem) {
        let (sprobs, scache) = src.forward(feat_mem, true);
        let (ls, g_sprobs, _) = weighted_dice(&sprobs, &masks[n_cur..], &w_source, cfg.smoothing_eps);
        l_source = ls;
        let g_mem = src.backward(scache.as_ref().expect("cache kept"), &g_sprobs, None);
        g_feat.add_assign_at(n_cur, &g_mem);
    }
    model.encoder.backward(&ecache, g_feat, Some(&mut grads.encoder));
    Ok(total_loss(l_site, l_target, l_source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, DecoderSpec, EncoderSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_prediction_has_zero_loss() {
        let gt = [0u8, 1, 1, 0, 1];
        let p: Vec<f32> = gt.iter().map(|&g| g as f32).collect();
        assert!(dice_loss(&p, &gt, 1e-6).unwrap() <= 1e-6);
    }

    #[test]
    fn disjoint_prediction_has_unit_loss() {
        let gt = [0u8, 1, 1, 0, 1, 0];
        let p: Vec<f32> = gt.iter().map(|&g| 1.0 - g as f32).collect();
        assert!((dice_loss(&p, &gt, 1e-6).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_overlap_matches_hand_value() {
        let gt = [1u8, 1, 1, 1, 0, 0];
        let p = [1.0f32, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((dice_loss(&p, &gt, 1e-9).unwrap() - 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(dice_loss(&[0.5, 0.5], &[1], 1.0).is_err());
        assert!(dice_loss(&[1.5], &[1], 1.0).is_err());
        assert!(dice_loss(&[0.5], &[2], 1.0).is_err());
    }

    #[test]
    fn composition_is_additive() {
        let b = total_loss(0.4, 0.2, 0.1);
        assert!((b.l_all - 0.7).abs() < 1e-15);
        assert!((b.l_model - 0.3).abs() < 1e-15);
        assert_eq!(total_loss(0.5, 0.0, 0.0).l_all, 0.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0).l_all, 0.0);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
            let g: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            let eps = 1e-6;
            let mut grad = vec![0.0; 64];
            dice_loss_grad(&p, &g, eps, &mut grad);
            for k in 0..64 {
                let h = 1e-6;
                let mut a = p.clone();
                let mut b = p.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (dice_loss_generic(&a, &g, eps) - dice_loss_generic(&b, &g, eps)) / (2.0 * h);
                worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-12));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    proptest! {
        #[test]
        fn dice_loss_stays_in_unit_interval(
            pairs in proptest::collection::vec((0.0f32..=1.0, 0u8..=1), 1..200),
            eps in 1e-6f64..2.0,
        ) {
            let (p, g): (Vec<f32>, Vec<u8>) = pairs.into_iter().unzip();
            let l = dice_loss(&p, &g, eps).unwrap();
            prop_assert!((0.0..1.0 + 1e-12).contains(&l));
        }
    }

    fn bundle(phase: usize) -> ModelBundle {
        let enc = EncoderSpec {
            tiny_widths: [4, 4, 8, 8],
            ..EncoderSpec::tiny()
        };
        build_model(&enc, &DecoderSpec { widths: [8, 8, 4, 4] }, phase, (16, 16), 3).unwrap()
    }

    fn examples(n: usize, seed: u64) -> Vec<(AugmentedInput, Vec<u8>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = AugmentedInput {
                    height: 16,
                    width: 16,
                    data: (0..768).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                };
                let m = (0..256).map(|_| u8::from(rng.gen_bool(0.3))).collect();
                (x, m)
            })
            .collect()
    }

    fn as_examples(v: &[(AugmentedInput, Vec<u8>)]) -> Vec<Example<'_>> {
        v.iter().map(|(x, m)| Example { input: x, mask: m }).collect()
    }

    #[test]
    fn phase_one_memory_terms_vanish() {
        let b = bundle(1);
        let mem = examples(3, 1);
        let batch = vec![SiteBatch {
            site_id: "A",
            examples: as_examples(&mem),
        }];
        assert_eq!(target_memory_loss(&b, &batch, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(source_memory_loss(&b, &batch, 0.5, 1.0).unwrap(), 0.0);
        let cur = examples(2, 2);
        let mut g = ModelGrads::zeros_like(&b);
        let out = loss_and_grads(&b, &as_examples(&cur), &batch, &LossConfig::default(), true, &mut g).unwrap();
        assert_eq!((out.l_target, out.l_source), (0.0, 0.0));
        assert_eq!(out.l_all, out.l_site);
    }

    #[test]
    fn memory_terms_weight_per_site_means() {
        let b = bundle(2);
        let (ma, mb) = (examples(2, 4), examples(3, 5));
        let batch = vec![
            SiteBatch {
                site_id: "A",
                examples: as_examples(&ma),
            },
            SiteBatch {
                site_id: "B",
                examples: as_examples(&mb),
            },
        ];
        let la = mean_branch_loss(&b, &as_examples(&ma), Branch::Target, 1.0).unwrap();
        let lb = mean_branch_loss(&b, &as_examples(&mb), Branch::Target, 1.0).unwrap();
        let lt = target_memory_loss(&b, &batch, 0.5, 1.0).unwrap();
        assert!((lt - 0.5 * (la + lb)).abs() < 1e-12);
        assert_eq!(target_memory_loss(&b, &batch, 0.0, 1.0).unwrap(), 0.0);

        let sa = mean_branch_loss(&b, &as_examples(&ma), Branch::Source, 1.0).unwrap();
        let ls = source_memory_loss(&b, &batch[..1], 0.5, 1.0).unwrap();
        assert!((ls - 0.5 * sa).abs() < 1e-12);
    }

    #[test]
    fn missing_source_decoder_is_an_error_from_phase_two() {
        let mut b = bundle(2);
        b.source = None;
        let mem = examples(1, 6);
        let batch = vec![SiteBatch {
            site_id: "A",
            examples: as_examples(&mem),
        }];
        assert!(matches!(
            source_memory_loss(&b, &batch, 0.5, 1.0),
            Err(ItlError::MissingSourceDecoder { phase: 2 })
        ));
    }

    #[test]
    fn fused_pass_matches_separate_terms() {
        let b = bundle(3);
        let cur = examples(2, 7);
        let (ma, mb) = (examples(2, 8), examples(1, 9));
        let batch = vec![
            SiteBatch {
                site_id: "A",
                examples: as_examples(&ma),
            },
            SiteBatch {
                site_id: "B",
                examples: as_examples(&mb),
            },
        ];
        let cfg = LossConfig::default();
        let mut g = ModelGrads::zeros_like(&b);
        let fused = loss_and_grads(&b, &as_examples(&cur), &batch, &cfg, true, &mut g).unwrap();
        let site = site_loss(&b, &as_examples(&cur), cfg.smoothing_eps).unwrap();
        let lt = target_memory_loss(&b, &batch, cfg.alpha, cfg.smoothing_eps).unwrap();
        let ls = source_memory_loss(&b, &batch, cfg.delta, cfg.smoothing_eps).unwrap();
        assert!((fused.l_site - site).abs() < 1e-6);
        assert!((fused.l_target - lt).abs() < 1e-6);
        assert!((fused.l_source - ls).abs() < 1e-6);
        assert!((fused.l_all - (site + lt + ls)).abs() < 1e-6);
        assert!(g.encoder.max_abs() > 0.0 && g.target.max_abs() > 0.0);

        let mut g2 = ModelGrads::zeros_like(&b);
        let off = loss_and_grads(&b, &as_examples(&cur), &batch, &cfg, false, &mut g2).unwrap();
        assert_eq!(off.l_model, 0.0);
        assert!((off.l_site - site).abs() < 1e-6);
    }

    #[test]
    fn site_gradient_matches_finite_differences_through_the_network() {
        // d L_site / d(target head bias) against a central difference
        let b = bundle(1);
        let cur = examples(2, 10);
        let cfg = LossConfig::default();
        let mut g = ModelGrads::zeros_like(&b);
        loss_and_grads(&b, &as_examples(&cur), &[], &cfg, true, &mut g).unwrap();
        let idx = b.target.params.entries().iter().position(|e| e.name == "head.bias").unwrap();
        let eval = |d: f32| {
            let mut bb = b.clone();
            bb.target.params.entries_mut()[idx].data[0] += d;
            site_loss(&bb, &as_examples(&cur), cfg.smoothing_eps).unwrap()
        };
        let fd = (eval(1e-3) - eval(-1e-3)) / 2e-3;
        let an = g.target.buffers()[idx][0] as f64;
        assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-6, "fd {fd} analytic {an}");
    }
}
