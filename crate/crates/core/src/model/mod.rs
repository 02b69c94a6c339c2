//! Network assembly: encoders, the decoder head, the two-decoder expert
//! bundle and its phase-to-phase handoff.

mod checkpoint;
mod decoder;
mod encoder;
mod layers;
mod spec;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use decoder::{Decoder, DecoderCache};
pub use encoder::{Encoder, EncoderCache};
pub use spec::{check_input_hw, DecoderSpec, EncoderKind, EncoderSpec, VitSpec, DOWNSAMPLE};
pub use weights::{load_encoder_weights, save_param_store};

use crate::data::AugmentedInput;
use crate::error::{ItlError, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Target,
    Source,
}

/// The expert of one phase: a shared encoder, a trainable target decoder
/// and, from phase 2 on, a frozen source decoder.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub target: Decoder,
    pub source: Option<Decoder>,
    pub phase_index: usize,
    pub input_hw: (usize, usize),
}

/// Builds a freshly initialized bundle for `phase` (1-based).
///
/// The encoder, target decoder and source decoder draw from separate streams
/// of one seeded generator, so adding or removing the source decoder does not
/// change the other initializations.
pub fn build_model(
    enc: &EncoderSpec,
    dec: &DecoderSpec,
    phase: usize,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<ModelBundle> {
    enc.validate()?;
    dec.validate()?;
    check_input_hw(input_hw.0, input_hw.1)?;
    if phase == 0 {
        return Err(ItlError::Config("phase index starts at 1".into()));
    }
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let mut encoder = Encoder::build(enc, input_hw, &mut stream(1));
    if enc.pretrained {
        let path = enc.weights_path.as_deref().expect("validated above");
        load_encoder_weights(&mut encoder.params, path)?;
    }
    let target = Decoder::build(dec, encoder.out_channels(), &mut stream(2));
    let source = (phase >= 2).then(|| Decoder::build(dec, encoder.out_channels(), &mut stream(3)));
    Ok(ModelBundle {
        encoder,
        target,
        source,
        phase_index: phase,
        input_hw,
    })
}

/// Stacks augmented inputs into an `[n, 3, H, W]` batch.
pub fn inputs_to_tensor(inputs: &[&AugmentedInput]) -> Result<Tensor> {
    let Some(first) = inputs.first() else {
        return Err(ItlError::Empty("no inputs in batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(inputs.len() * 3 * h * w);
    for x in inputs {
        if (x.height, x.width) != (h, w) {
            return Err(ItlError::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![x.height, x.width],
            });
        }
        data.extend_from_slice(&x.data);
    }
    Ok(Tensor::from_vec([inputs.len(), 3, h, w], data))
}

impl ModelBundle {
    pub fn decoder(&self, branch: Branch) -> Result<&Decoder> {
        match branch {
            Branch::Target => Ok(&self.target),
            Branch::Source => self.source.as_ref().ok_or(ItlError::MissingSourceDecoder {
                phase: self.phase_index,
            }),
        }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if (x.h(), x.w()) != self.input_hw || x.c() != AugmentedInput::CHANNELS {
            return Err(ItlError::ShapeMismatch {
                expected: vec![AugmentedInput::CHANNELS, self.input_hw.0, self.input_hw.1],
                actual: vec![x.c(), x.h(), x.w()],
            });
        }
        Ok(())
    }

    /// Probability maps `[n, 1, H, W]` for a batch, without caches.
    pub fn predict(&self, x: Tensor, branch: Branch) -> Result<Tensor> {
        self.check_batch(&x)?;
        let dec = self.decoder(branch)?;
        let (feat, _) = self.encoder.forward(x, false);
        Ok(dec.forward(feat, false).0)
    }

    /// Probability map of one input, row-major `H × W`.
    pub fn forward(&self, input: &AugmentedInput, branch: Branch) -> Result<Vec<f32>> {
        Ok(self.predict(inputs_to_tensor(&[input])?, branch)?.data)
    }

    /// Moves to the next phase: the source decoder becomes a frozen copy of
    /// the current target decoder; encoder and target decoder carry over.
    pub fn handoff(mut self) -> ModelBundle {
        self.source = Some(self.target.clone());
        self.phase_index += 1;
        self
    }

    /// `(total, trainable)` scalar counts. Frozen normalization statistics are
    /// not parameters and are excluded from both.
    pub fn count_parameters(&self) -> (usize, usize) {
        let trainable = self.encoder.params.num_weights() + self.target.num_weights();
        let frozen = self.source.as_ref().map_or(0, Decoder::num_weights);
        (trainable + frozen, trainable)
    }
}
