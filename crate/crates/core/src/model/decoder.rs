use rand::Rng;

use super::layers::{backward_seq, forward_seq, Layer, LayerCache, Residual};
use super::spec::DecoderSpec;
use crate::nn::ops;
use crate::nn::{Conv2d, Grads, ParamStore, Tensor};

/// Segmentation head: four (upsample ×2, residual block) stages followed by
/// a 1×1 convolution and logistic squashing to one probability map.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub params: ParamStore,
    layers: Vec<Layer>,
}

pub struct DecoderCache {
    layers: Vec<LayerCache>,
    probs: Tensor,
}

impl Decoder {
    pub fn build<R: Rng + ?Sized>(spec: &DecoderSpec, in_channels: usize, rng: &mut R) -> Self {
        let mut ps = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in spec.widths.iter().enumerate() {
            layers.push(Layer::Upsample2x);
            let name = format!("stages.{i}");
            let main = vec![
                Layer::Conv(Conv2d::new(&mut ps, rng, &format!("{name}.conv1"), cin, w, 3, 1, 1, true)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(&mut ps, rng, &format!("{name}.conv2"), w, w, 3, 1, 1, true)),
            ];
            let shortcut = if cin == w {
                Vec::new()
            } else {
                vec![Layer::Conv(Conv2d::new(&mut ps, rng, &format!("{name}.shortcut"), cin, w, 1, 1, 0, true))]
            };
            layers.push(Layer::Residual(Box::new(Residual { main, shortcut })));
            cin = w;
        }
        layers.push(Layer::Conv(Conv2d::new(&mut ps, rng, "head", cin, 1, 1, 1, 0, true)));
        Decoder {
            spec: spec.clone(),
            params: ps,
            layers,
        }
    }

    pub fn num_weights(&self) -> usize {
        self.params.num_weights()
    }

    /// Probability map `[n, 1, H, W]` from features `[n, C, H/16, W/16]`.
    pub fn forward(&self, feat: Tensor, keep: bool) -> (Tensor, Option<DecoderCache>) {
        let (logits, layers) = forward_seq(&self.layers, &self.params, feat, keep);
        let probs = ops::sigmoid(&logits);
        let cache = keep.then(|| DecoderCache {
            layers,
            probs: probs.clone(),
        });
        (probs, cache)
    }

    /// Gradient with respect to the input features. Parameter gradients are
    /// written only when `grads` is given.
    pub fn backward(&self, cache: &DecoderCache, g_probs: &Tensor, grads: Option<&mut Grads>) -> Tensor {
        let g_logits = ops::sigmoid_backward(&cache.probs, g_probs);
        backward_seq(&self.layers, &self.params, &cache.layers, g_logits, grads)
    }
}

