use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{ItlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Res18,
    Res34,
    Res50,
    VitHybrid,
    TinyCnn,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Res18 => "res18",
            EncoderKind::Res34 => "res34",
            EncoderKind::Res50 => "res50",
            EncoderKind::VitHybrid => "vit_hybrid",
            EncoderKind::TinyCnn => "tiny_cnn",
        }
    }
}

/// Transformer settings of the hybrid encoder. Defaults are ViT-B/16.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitSpec {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Bottleneck blocks per ResNet stage of the convolutional stem.
    pub stem_blocks: [usize; 3],
}

impl Default for VitSpec {
    fn default() -> Self {
        VitSpec {
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            stem_blocks: [3, 4, 9],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    /// Channel widths of the four stride-2 stages of `tiny_cnn`.
    #[serde(default = "default_tiny_widths")]
    pub tiny_widths: [usize; 4],
    #[serde(default)]
    pub vit: VitSpec,
}

fn default_tiny_widths() -> [usize; 4] {
    [16, 32, 64, 64]
}

impl EncoderSpec {
    pub fn tiny() -> Self {
        EncoderSpec {
            kind: EncoderKind::TinyCnn,
            pretrained: false,
            weights_path: None,
            tiny_widths: default_tiny_widths(),
            vit: VitSpec::default(),
        }
    }

    pub fn of_kind(kind: EncoderKind) -> Self {
        EncoderSpec {
            kind,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == EncoderKind::TinyCnn && self.pretrained {
            return Err(ItlError::Config(
                "tiny_cnn has no pretrained weights; set pretrained = false".into(),
            ));
        }
        if self.pretrained && self.weights_path.is_none() {
            return Err(ItlError::Config(format!(
                "encoder {} is pretrained but weights_path is missing",
                self.kind.as_str()
            )));
        }
        if self.tiny_widths.iter().any(|&w| w == 0) {
            return Err(ItlError::Config("tiny_widths must be positive".into()));
        }
        let v = &self.vit;
        if self.kind == EncoderKind::VitHybrid
            && (v.dim == 0 || v.heads == 0 || v.dim % v.heads != 0 || v.mlp_dim == 0)
        {
            return Err(ItlError::Config(
                "vit.dim must be a positive multiple of vit.heads".into(),
            ));
        }
        Ok(())
    }
}

/// Decoder head: four (upsample ×2, residual block) stages and a one-channel
/// output. `widths[i]` is the output width of residual block `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    #[serde(default = "default_decoder_widths")]
    pub widths: [usize; 4],
}

fn default_decoder_widths() -> [usize; 4] {
    [64, 32, 16, 16]
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            widths: default_decoder_widths(),
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ItlError::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial reduction of every encoder; the decoder's four ×2 stages undo it.
pub const DOWNSAMPLE: usize = 16;

pub fn check_input_hw(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(ItlError::Config(format!(
            "input size {h}x{w} must be a positive multiple of {DOWNSAMPLE}"
        )));
    }
    Ok(())
}
