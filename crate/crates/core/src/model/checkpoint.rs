//! Bundle checkpoints.
//!
//! A checkpoint is a safetensors file. Tensors are named `encoder.<name>`,
//! `target.<name>` and `source.<name>`. The header metadata has a single
//! `itl` entry: a JSON object with `format`, `version`, `phase_index`,
//! `input_hw`, `has_source` and the encoder and decoder specs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::weights::{fill_store, serialize_stores};
use super::{Decoder, DecoderSpec, Encoder, EncoderSpec, ModelBundle};
use crate::error::{ItlError, Result};

pub const CHECKPOINT_FORMAT: &str = "itl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "itl";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    phase_index: usize,
    input_hw: [usize; 2],
    encoder: EncoderSpec,
    decoder: DecoderSpec,
    has_source: bool,
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        phase_index: bundle.phase_index,
        input_hw: [bundle.input_hw.0, bundle.input_hw.1],
        encoder: bundle.encoder.spec.clone(),
        decoder: bundle.target.spec.clone(),
        has_source: bundle.source.is_some(),
    };
    let header = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&meta)?)]);
    let mut parts = vec![("encoder.", &bundle.encoder.params), ("target.", &bundle.target.params)];
    if let Some(s) = &bundle.source {
        parts.push(("source.", &s.params));
    }
    let bytes = serialize_stores(&parts, Some(header))?;
    fs::write(path, bytes).map_err(|e| ItlError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let bad = |reason: String| ItlError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| ItlError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| bad("not an ITL checkpoint".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(bad("not an ITL checkpoint".into()));
    }
    if meta.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", meta.version)));
    }
    let (phase_index, hw, enc_spec, dec_spec, has_source) =
        (meta.phase_index, meta.input_hw, meta.encoder, meta.decoder, meta.has_source);

    let file = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = Encoder::build(&enc_spec, (hw[0], hw[1]), &mut rng);
    fill_store(&mut encoder.params, &file, "encoder.", path, true)?;
    let mut target = Decoder::build(&dec_spec, encoder.out_channels(), &mut rng);
    fill_store(&mut target.params, &file, "target.", path, true)?;
    let source = if has_source {
        let mut s = Decoder::build(&dec_spec, encoder.out_channels(), &mut rng);
        fill_store(&mut s.params, &file, "source.", path, true)?;
        Some(s)
    } else {
        None
    };
    Ok(ModelBundle {
        encoder,
        target,
        source,
        phase_index,
        input_hw: (hw[0], hw[1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phase2.safetensors");
        let enc = EncoderSpec {
            tiny_widths: [4, 4, 8, 8],
            ..EncoderSpec::tiny()
        };
        let dec = DecoderSpec { widths: [8, 8, 4, 4] };
        let b = build_model(&enc, &dec, 1, (32, 64), 5).unwrap().handoff();
        save_checkpoint(&b, &path).unwrap();
        let r = load_checkpoint(&path).unwrap();
        assert_eq!(r.phase_index, 2);
        assert_eq!(r.input_hw, (32, 64));
        assert_eq!(r.encoder.spec, enc);
        assert_eq!(r.encoder.params, b.encoder.params);
        assert_eq!(r.target.params, b.target.params);
        assert_eq!(r.source.unwrap().params, b.source.as_ref().unwrap().params);

        let again = dir.path().join("again.safetensors");
        save_checkpoint(&b, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let b = build_model(&EncoderSpec::tiny(), &DecoderSpec::default(), 1, (32, 32), 0).unwrap();
        super::super::save_param_store(&b.encoder.params, &path).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ItlError::Checkpoint { .. })));
    }
}
