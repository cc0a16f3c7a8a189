//! Run configuration: a TOML file with `[[expert]]` entries and one
//! section per concern. Unknown keys are rejected and every default is
//! materialized so the echoed file fully describes a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Arch, ExpertSpec, PostProcess};
use crate::fusion::{FusionConfig, Strategy};
use crate::model::{Dims, ExpertSetup, ModelAssembly};
use crate::synthbench::{Task, VOCAB};
use crate::trainer::Budgets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEntry {
    pub name: String,
    pub arch: Arch,
    pub native_resolution: usize,
    #[serde(default = "default_stride")]
    pub patch_or_stride: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub post_process: PostProcess,
    #[serde(default)]
    pub frozen_default: bool,
    /// Interpolate the position grid so the expert accepts this resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt_resolution: Option<usize>,
    /// Overrides `frozen_default`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen: Option<bool>,
}

fn default_stride() -> usize {
    2
}

impl ExpertEntry {
    pub fn spec(&self) -> ExpertSpec {
        ExpertSpec {
            name: self.name.clone(),
            arch: self.arch,
            native_resolution: self.native_resolution,
            patch_or_stride: self.patch_or_stride,
            embed_dim: self.embed_dim,
            depth: self.depth,
            post_process: self.post_process,
            frozen_default: self.frozen_default,
        }
    }

    pub fn setup(&self) -> ExpertSetup {
        ExpertSetup {
            spec: self.spec(),
            adapt_resolution: self.adapt_resolution,
            frozen: self.frozen,
        }
    }

    /// Patch-linear, 32 px native, patch 4: an 8x8 grid that cannot resolve glyph strokes.
    pub fn default_lo() -> Self {
        Self {
            name: "lo".into(),
            arch: Arch::PatchLinear,
            native_resolution: 32,
            patch_or_stride: 4,
            embed_dim: 16,
            depth: 1,
            post_process: PostProcess::None,
            frozen_default: false,
            adapt_resolution: None,
            frozen: None,
        }
    }

    /// Conv-stack, 64 px native, two stride-2 layers, unshuffled 16x16 -> 8x8.
    pub fn default_hi() -> Self {
        Self {
            name: "hi".into(),
            arch: Arch::ConvStack,
            native_resolution: 64,
            patch_or_stride: 2,
            embed_dim: 8,
            depth: 2,
            post_process: PostProcess::PixelUnshuffle(2),
            frozen_default: false,
            adapt_resolution: None,
            frozen: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub target_tokens: usize,
    pub projector_hidden: usize,
    pub lm_dim: usize,
    /// Seed for parameter initialization; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            target_tokens: 64,
            projector_hidden: 32,
            lm_dim: 16,
            init_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_size: usize,
    pub test_size: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_size: 6000,
            test_size: 3000,
            train_seed: 1,
            test_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pre_align: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub fusion: FusionConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: Budgets,
    #[serde(default)]
    pub data: DataSection,
    #[serde(rename = "expert")]
    pub experts: Vec<ExpertEntry>,
}

impl RunConfig {
    pub fn new(experts: Vec<ExpertEntry>, strategy: Strategy) -> Self {
        Self {
            seed: 0,
            pre_align: false,
            out: None,
            fusion: FusionConfig::new(strategy),
            model: ModelSection::default(),
            training: Budgets::default(),
            data: DataSection::default(),
            experts,
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            target_tokens: self.model.target_tokens,
            projector_hidden: self.model.projector_hidden,
            lm_dim: self.model.lm_dim,
            n_tasks: Task::ALL.len(),
            vocab: VOCAB,
        }
    }

    /// Checks everything a run depends on, including end-to-end wiring.
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Config("at least one [[expert]] entry is required".into()));
        }
        let m = &self.model;
        if m.target_tokens == 0 || m.projector_hidden == 0 || m.lm_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(Error::Config("data.train_size and data.test_size must be positive".into()));
        }
        self.training.validate()?;
        for e in &self.experts {
            e.spec().validate().map_err(|err| Error::Config(err.to_string()))?;
        }
        self.build_model().map(|_| ())
    }

    pub fn build_model(&self) -> Result<ModelAssembly> {
        let setups: Vec<ExpertSetup> = self.experts.iter().map(ExpertEntry::setup).collect();
        ModelAssembly::build(&setups, &self.fusion, &self.dims(), self.model.init_seed.unwrap_or(self.seed))
    }

    /// The fully materialized configuration as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[fusion]
strategy = "CC"

[[expert]]
name = "lo"
arch = "patch-linear"
native_resolution = 32
patch_or_stride = 4
embed_dim = 16
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL, "min.toml").unwrap();
        assert_eq!(c.training, Budgets::default());
        assert_eq!(c.model, ModelSection::default());
        assert_eq!(c.experts[0].depth, 0);
        let echoed = RunConfig::parse(&c.echo(), "echo").unwrap();
        assert_eq!(echoed, c);
        assert!(c.echo().contains("sft_steps = 2000"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = MINIMAL.replace("embed_dim = 16", "embed_dim = 16\ncolour = 3");
        match RunConfig::parse(&text, "x.toml").unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 11);
                assert!(message.contains("colour"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn type_error_rejected() {
        let text = MINIMAL.replace("embed_dim = 16", "embed_dim = \"wide\"");
        assert!(matches!(RunConfig::parse(&text, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn inconsistent_mg_window_rejected_at_parse() {
        let mut c = RunConfig::new(vec![ExpertEntry::default_lo(), ExpertEntry::default_hi()], Strategy::MG);
        c.fusion.window = Some(3);
        let err = RunConfig::parse(&c.echo(), "mg").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        c.fusion.window = Some(2);
        RunConfig::parse(&c.echo(), "mg").unwrap();
    }

    #[test]
    fn duplicate_expert_names_rejected() {
        let c = RunConfig::new(vec![ExpertEntry::default_lo(), ExpertEntry::default_lo()], Strategy::CC);
        assert!(RunConfig::parse(&c.echo(), "dup").is_err());
    }

    #[test]
    fn default_wiring_is_consistent_for_every_strategy() {
        for s in [Strategy::SA, Strategy::CC, Strategy::LH, Strategy::DA] {
            RunConfig::new(vec![ExpertEntry::default_lo(), ExpertEntry::default_hi()], s)
                .validate()
                .unwrap();
        }
    }
}
