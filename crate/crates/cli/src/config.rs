//! Experiment configuration: one TOML document drives every command.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use itl_core::data::{load_site, preprocess_site, synthesize_sites, LoadOptions, SiteDataset, SynthSiteSpec};
use itl_core::engine::{RunSetup, TrainConfig};
use itl_core::loss::LossConfig;
use itl_core::model::{check_input_hw, DecoderSpec, EncoderSpec};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default root for output directories.
pub const OUTPUT_ROOT_ENV: &str = "ITL_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run or dataset directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Sites in training order, by id. Defaults to declaration order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_order: Option<Vec<String>>,
    pub data: DataConfig,
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Slice size every site is resampled to.
    pub input_hw: [usize; 2],
    /// Seed of the case-level train/test split of manifest-backed sites.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manifests: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synthetic: Vec<SynthSiteSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative manifest paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.data.manifests {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        check_input_hw(self.data.input_hw[0], self.data.input_hw[1])?;
        for s in &self.data.synthetic {
            s.validate()?;
        }
        if let Some(order) = &self.site_order {
            let mut sorted = order.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != order.len() {
                bail!("site_order lists a site twice");
            }
        }
        Ok(())
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn input_hw(&self) -> (usize, usize) {
        (self.data.input_hw[0], self.data.input_hw[1])
    }

    /// Loads or synthesizes every configured site, preprocessed to
    /// `input_hw`, in training order.
    pub fn load_sites(&self) -> Result<Vec<SiteDataset>> {
        let mut sites = Vec::new();
        let opts = LoadOptions {
            target_hw: self.input_hw(),
            split_seed: self.data.split_seed,
        };
        for m in &self.data.manifests {
            sites.push(load_site(m, &opts).with_context(|| format!("loading site {}", m.display()))?);
        }
        if !self.data.synthetic.is_empty() {
            for mut s in synthesize_sites(&self.data.synthetic)? {
                preprocess_site(&mut s, self.input_hw())?;
                sites.push(s);
            }
        }
        if sites.is_empty() {
            bail!("config lists no sites (data.manifests and data.synthetic are empty)");
        }
        order_sites(sites, self.site_order.as_deref())
    }
}

fn order_sites(mut sites: Vec<SiteDataset>, order: Option<&[String]>) -> Result<Vec<SiteDataset>> {
    for (i, s) in sites.iter().enumerate() {
        if sites[..i].iter().any(|t| t.site_id() == s.site_id()) {
            bail!("site id {} appears twice", s.site_id());
        }
    }
    let Some(order) = order else {
        return Ok(sites);
    };
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let pos = sites
            .iter()
            .position(|s| s.site_id() == id)
            .with_context(|| format!("site_order names unknown site {id}"))?;
        out.push(sites.remove(pos));
    }
    Ok(out)
}
