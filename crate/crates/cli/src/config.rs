use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nbinv_core::attack_eval::AttackKind;
use nbinv_core::extractor::ExtractorConfig;
use nbinv_core::gan::GanConfig;
use nbinv_core::nbnet::Arch;
use nbinv_core::norta::Marginal;
use nbinv_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ValidationError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-size constants: 160x160 faces, 128-D templates, 300K + 100K batches.
    Canonical,
    /// CI-scale run on 32x32 synthetic faces.
    #[default]
    Desk,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub image_size: usize,
    /// Images for training the stand-in extractor.
    pub extractor_manifest: Option<PathBuf>,
    /// Images for GAN training and for raw-data NbNet training; several
    /// manifests are concatenated.
    pub train_manifests: Vec<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

/// Checkpoints produced by earlier stages. Unset entries default to the
/// locations inside the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactSection {
    pub extractor: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    /// Reconstruction models by name for `attack`.
    pub models: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NbnetSection {
    pub arch: Arch,
    /// JSON network spec overriding the profile's built-in one.
    pub spec_file: Option<PathBuf>,
}

impl Default for NbnetSection {
    fn default() -> Self {
        Self { arch: Arch::NbnetB, spec_file: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationSection {
    pub gallery_partition: String,
    pub probe_partitions: Vec<String>,
}

impl Default for IdentificationSection {
    fn default() -> Self {
        Self { gallery_partition: "gallery".into(), probe_partitions: vec!["probe".into()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub attacks: Vec<AttackKind>,
    pub fars: Vec<f64>,
    pub folds: usize,
    /// Adds the identity reconstructor as the `original` reference row.
    pub include_original: bool,
    pub dataset: String,
    pub identification: Option<IdentificationSection>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            attacks: vec![AttackKind::Type1, AttackKind::Type2],
            fars: vec![0.001, 0.01],
            folds: 10,
            include_original: true,
            dataset: "eval".into(),
            identification: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NortaSection {
    pub marginals: Vec<Marginal>,
    /// Target covariance, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub samples: usize,
}

impl Default for NortaSection {
    fn default() -> Self {
        Self {
            marginals: vec![
                Marginal::Uniform { lo: 0.0, hi: 1.0 },
                Marginal::Exponential { rate: 1.0 },
                Marginal::Normal { mean: 0.0, sd: 1.0 },
            ],
            covariance: vec![vec![1.0 / 12.0, 0.1, 0.1], vec![0.1, 1.0, -0.3], vec![0.1, -0.3, 1.0]],
            samples: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub run_id: String,
    pub data: DataSection,
    pub artifacts: ArtifactSection,
    pub extractor: ExtractorConfig,
    pub gan: GanConfig,
    pub nbnet: NbnetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub norta: NortaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = Self {
            profile,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            run_id: "default".into(),
            data: DataSection { image_size: 32, ..Default::default() },
            artifacts: ArtifactSection::default(),
            extractor: ExtractorConfig::default(),
            gan: GanConfig::default(),
            nbnet: NbnetSection::default(),
            train: TrainConfig::desk(),
            eval: EvalSection { folds: 5, fars: vec![0.01, 0.1], ..Default::default() },
            norta: NortaSection::default(),
        };
        match profile {
            Profile::Desk => base,
            Profile::Canonical => Self {
                data: DataSection { image_size: 160, ..Default::default() },
                extractor: ExtractorConfig { input_size: 160, steps: 20_000, ..Default::default() },
                gan: GanConfig { image_size: 160, iterations: 100_000, checkpoint_every: 5000, ..Default::default() },
                train: TrainConfig::default(),
                eval: EvalSection::default(),
                ..base
            },
        }
    }

    /// Parses TOML over the defaults of the profile named in the file.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let profile = match user.get("profile") {
            Some(v) => v.clone().try_into::<Profile>().context("`profile` must be \"desk\" or \"canonical\"")?,
            None => Profile::Desk,
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile))?;
        merge(&mut merged, user);
        Ok(toml::Value::Table(merged).try_into()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Propagates the global seed and image size into the stage sections.
    pub fn resolve(mut self) -> Self {
        self.extractor.seed = self.seed;
        self.gan.seed = self.seed;
        self.train.seed = self.seed;
        self.extractor.input_size = self.data.image_size;
        self.gan.image_size = self.data.image_size;
        self
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn extractor_path(&self) -> PathBuf {
        self.artifacts.extractor.clone().unwrap_or_else(|| self.run_dir().join("extractor").join("extractor.ckpt"))
    }

    pub fn generator_path(&self) -> PathBuf {
        self.artifacts.generator.clone().unwrap_or_else(|| self.run_dir().join("gan").join("generator.ckpt"))
    }

    pub fn model_path(&self, arch: Arch) -> PathBuf {
        self.run_dir().join(format!("nbnet-{}", arch.name())).join("model.ckpt")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Collects every problem before failing, so one run reports them all.
#[derive(Default)]
pub struct Checks(Vec<String>);

impl Checks {
    pub fn file(&mut self, key: &str, path: Option<&Path>) {
        match path {
            None => self.0.push(format!("{key}: not set")),
            Some(p) if !p.is_file() => self.0.push(format!("{key}: file not found: {}", p.display())),
            Some(_) => {}
        }
    }

    pub fn core(&mut self, section: &str, r: nbinv_core::Result<()>) {
        if let Err(e) = r {
            self.0.push(format!("{section}: {e}"));
        }
    }

    pub fn push(&mut self, msg: impl Into<String>) {
        self.0.push(msg.into());
    }

    pub fn finish(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(ValidationError(self.0).into())
        }
    }
}
