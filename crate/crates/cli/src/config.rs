//! The experiment configuration file: one TOML document that pins every
//! stage of the pipeline, so a single config plus the seeds inside it
//! fully determines every artifact the pipeline writes.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lethe_core::data::{load_mnist, load_mnist4, Dataset, MNIST_FILES};
use lethe_core::diffusion::{DiTConfig, TrainerConfig};
use lethe_core::evalkit::RetrainConfig;
use lethe_core::sampler::{ForgetRequest, GenerationEvalConfig, PromptConfig};
use lethe_core::zoo::{MainNetSpec, ManifestConfig, ZooConfig};

/// Environment variable that overrides `output_root` when set and non-empty.
pub const OUTPUT_ROOT_ENV: &str = "LETHE_OUTPUT_ROOT";

/// Which dataset the experiment runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// All ten MNIST digits.
    Mnist,
    /// MNIST restricted to digits 0-3.
    Mnist4,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Mnist => 10,
            DatasetKind::Mnist4 => 4,
        }
    }

    pub fn input_dim(self) -> usize {
        784
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Directory holding the four standard IDX files.
    pub dir: PathBuf,
}

impl DatasetSection {
    /// Loads the train/test pair for the configured kind.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let pair = match self.kind {
            DatasetKind::Mnist => load_mnist(&self.dir),
            DatasetKind::Mnist4 => load_mnist4(&self.dir),
        };
        pair.with_context(|| format!("loading dataset from {}", self.dir.display()))
    }

    /// The raw files the dataset is read from, for input hashing.
    pub fn files(&self) -> Vec<PathBuf> {
        MNIST_FILES.iter().map(|f| self.dir.join(f)).collect()
    }
}

/// Architecture of the classifier whose weights are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainNetSection {
    pub hidden_dims: Vec<usize>,
}

/// Zoo-collection stage: how many runs, from which base seed, under which
/// checkpointing policy, and how the manifest splits them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooSection {
    pub runs: usize,
    /// Run `i` trains with seed `seed + i`.
    pub seed: u64,
    pub policy: ZooConfig,
    pub manifest: ManifestConfig,
}

/// Hypernetwork stage: architecture plus the weight-initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitSection {
    pub seed: u64,
    pub model: DiTConfig,
}

/// Sampling stage: the forget request and candidate budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSection {
    pub forget_classes: Vec<usize>,
    pub num_candidates: usize,
    /// Candidate `i` draws from RNG stream `i` of this seed; prompt jitter
    /// and variant-1 current states use reserved high streams.
    pub seed: u64,
    pub prompt: PromptConfig,
}

/// Evaluation stage: how many candidates make the averaged headline set
/// and whether to run the target-sweep alignment check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSection {
    /// The first N candidates in sub-seed order are scored and averaged.
    pub headline_candidates: usize,
    /// Also sweep per-class loss targets and record prompted-vs-achieved.
    pub generation_sweep: bool,
    pub sweep: GenerationEvalConfig,
}

/// The whole experiment, one section per pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Where all artifacts go; `LETHE_OUTPUT_ROOT` overrides it.
    pub output_root: PathBuf,
    pub dataset: DatasetSection,
    pub main_net: MainNetSection,
    pub zoo: ZooSection,
    pub dit: DitSection,
    pub trainer: TrainerConfig,
    pub sampler: SamplerSection,
    pub retrain: RetrainConfig,
    pub evaluate: EvaluateSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("validating config {}", path.display()))?;
        Ok(cfg)
    }

    /// The classifier architecture implied by the dataset and net sections.
    pub fn spec(&self) -> Result<MainNetSpec> {
        Ok(MainNetSpec::new(
            self.dataset.kind.input_dim(),
            self.main_net.hidden_dims.clone(),
            self.dataset.kind.num_classes(),
        )?)
    }

    /// The forget request implied by the sampler section.
    pub fn forget_request(&self) -> Result<ForgetRequest> {
        Ok(ForgetRequest::new(
            &self.sampler.forget_classes,
            self.dataset.kind.num_classes(),
            &self.zoo.policy.pivot_classes,
        )?)
    }

    /// `output_root`, unless the environment overrides it.
    pub fn resolved_output_root(&self) -> PathBuf {
        match env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_root.clone(),
        }
    }

    /// Cross-section consistency checks, run before any stage.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        spec.validate()?;
        self.zoo.policy.validate(&spec)?;
        self.dit.model.validate()?;
        if self.zoo.runs == 0 {
            bail!("zoo.runs must be at least 1");
        }
        let m = self.dataset.kind.num_classes();
        if self.dit.model.num_classes != m {
            bail!(
                "dit.model.num_classes = {} but the {:?} dataset has {} classes",
                self.dit.model.num_classes,
                self.dataset.kind,
                m
            );
        }
        // One loss scale everywhere: collection clamp, manifest histograms,
        // and conditioning clamp must agree or prompts silently shift.
        let caps = [
            ("zoo.policy.loss_cap", self.zoo.policy.loss_cap),
            ("zoo.manifest.loss_cap", self.zoo.manifest.loss_cap),
            ("dit.model.loss_clamp", self.dit.model.loss_clamp),
        ];
        if caps.iter().any(|&(_, v)| v != caps[0].1) {
            bail!(
                "loss caps disagree: {}",
                caps.map(|(k, v)| format!("{k}={v}")).join(", ")
            );
        }
        if self.zoo.policy.bins_per_class != self.zoo.manifest.bins_per_class {
            bail!(
                "zoo.policy.bins_per_class = {} but zoo.manifest.bins_per_class = {}",
                self.zoo.policy.bins_per_class,
                self.zoo.manifest.bins_per_class
            );
        }
        self.forget_request()?;
        if self.sampler.num_candidates == 0 {
            bail!("sampler.num_candidates must be at least 1");
        }
        if self.evaluate.headline_candidates == 0 {
            bail!("evaluate.headline_candidates must be at least 1");
        }
        if self.retrain.epochs == 0 || self.retrain.batch_size == 0 {
            bail!("retrain.epochs and retrain.batch_size must be positive");
        }
        Ok(())
    }
}

/// A structurally valid config for unit tests (paths need not exist).
#[cfg(test)]
pub(crate) fn test_config() -> ExperimentConfig {
    use lethe_core::diffusion::Variant;
    ExperimentConfig {
        output_root: PathBuf::from("runs/test"),
        dataset: DatasetSection {
            kind: DatasetKind::Mnist4,
            dir: PathBuf::from("data/mnist"),
        },
        main_net: MainNetSection {
            hidden_dims: vec![2],
        },
        zoo: ZooSection {
            runs: 4,
            seed: 11,
            policy: ZooConfig {
                pivot_classes: vec![0, 1],
                ..ZooConfig::default()
            },
            manifest: ManifestConfig::default(),
        },
        dit: DitSection {
            seed: 7,
            model: DiTConfig::desk_scale(Variant::V2, 4),
        },
        trainer: TrainerConfig::default(),
        sampler: SamplerSection {
            forget_classes: vec![2],
            num_candidates: 3,
            seed: 1003,
            prompt: PromptConfig::default(),
        },
        retrain: RetrainConfig::default(),
        evaluate: EvaluateSection {
            headline_candidates: 2,
            generation_sweep: false,
            sweep: GenerationEvalConfig::default(),
        },
    }
}
