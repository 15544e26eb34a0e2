//! TOML run configuration. Every section has defaults; unknown keys are
//! rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dfkd::datagen::GenConfig;
use dfkd::distill::DistillConfig;
use dfkd::model::ArchSpec;
use dfkd::quant::QuantSpec;
use dfkd::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub quant: QuantSection,
    pub generate: GenerateSection,
    pub distill: DistillSection,
    pub measure: MeasureSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            quant: QuantSection::default(),
            generate: GenerateSection::default(),
            distill: DistillSection::default(),
            measure: MeasureSection::default(),
        }
    }
}

/// Teacher weights, architecture, training schedule and the procedural data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub weights: Option<PathBuf>,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub data_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            weights: None,
            arch: ArchSpec::desk(),
            train: TrainConfig::default(),
            train_per_class: 500,
            val_per_class: 100,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibSource {
    /// A balanced subset of the real training split.
    Real,
    /// Per-channel Gaussian noise matched to the training normalization.
    Gaussian,
    /// The dataset file in `data`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub spec: QuantSpec,
    pub source: CalibSource,
    pub per_class: usize,
    pub data: Option<PathBuf>,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            spec: QuantSpec::default(),
            source: CalibSource::Real,
            per_class: 10,
            data: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenScheme {
    Bns,
    Inception,
    BnsInception,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    /// When set, replaces the three loss scales in `config` with the preset.
    pub scheme: Option<GenScheme>,
    pub samples: usize,
    pub config: GenConfig,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            scheme: None,
            samples: 640,
            config: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// Training samples; a real balanced subset of `per_class` when unset.
    pub data: Option<PathBuf>,
    pub per_class: usize,
    /// A calibrated student; otherwise the teacher is quantized per `[quant]`.
    pub student: Option<PathBuf>,
    pub config: DistillConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            data: None,
            per_class: 10,
            student: None,
            config: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraProbe {
    pub name: String,
    pub path: PathBuf,
    /// Feed with the probe's own normalization (for foreign datasets).
    #[serde(default)]
    pub foreign: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureSection {
    pub fgsm_eps: Vec<f64>,
    pub noise_samples: usize,
    pub probes: Vec<ExtraProbe>,
    /// Dataset whose hard-prediction frequencies order the tail report.
    pub bias_data: Option<PathBuf>,
    /// Fine-tuned student compared against the teacher in the tail report.
    pub finetuned: Option<PathBuf>,
}

impl Default for MeasureSection {
    fn default() -> Self {
        Self {
            fgsm_eps: vec![0.1],
            noise_samples: 1000,
            probes: Vec::new(),
            bias_data: None,
            finetuned: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Generation settings with the scheme preset applied.
    pub fn gen_config(&self) -> GenConfig {
        let mut cfg = self.generate.config.clone();
        let preset = match self.generate.scheme {
            Some(GenScheme::Bns) => Some(GenConfig::bns()),
            Some(GenScheme::Inception) => Some(GenConfig::inception()),
            Some(GenScheme::BnsInception) => Some(GenConfig::bns_inception()),
            Some(GenScheme::Gaussian) | None => None,
        };
        if let Some(p) = preset {
            cfg.stats_scale = p.stats_scale;
            cfg.class_scale = p.class_scale;
            cfg.prior_scale = p.prior_scale;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[distill.config]\nstpes = 3").is_err());
        assert!(RunConfig::parse("[model.train]\nsteps = 3").is_ok());
    }

    #[test]
    fn full_example_parses() {
        let cfg = RunConfig::parse(
            r#"
seed = 0
out = "runs/default"
[model]
train_per_class = 500
[model.train]
steps = 400
[quant]
source = "real"
[quant.spec]
weights_bits = 2
act_bits = 4
overrides = [
  { layer = "stem.conv", wbits = 4, abits = 4 },
  { layer = "fc", wbits = 4, abits = 4 },
]
[generate]
scheme = "bns"
[generate.config]
budget = 200
[distill.config]
objective = "kd_iq_mix"
[measure]
fgsm_eps = [0.1, 0.2]
"#,
        )
        .unwrap();
        assert_eq!(cfg.quant.spec.overrides.len(), 2);
        assert_eq!(cfg.generate.config.budget, 200);
    }

    #[test]
    fn scheme_sets_scales() {
        let cfg = RunConfig::parse("[generate]\nscheme = \"bns_inception\"").unwrap();
        let g = cfg.gen_config();
        assert_eq!((g.stats_scale, g.class_scale), (GenConfig::bns_inception().stats_scale, GenConfig::bns_inception().class_scale));
    }
}
