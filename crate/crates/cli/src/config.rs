//! Experiment configuration: one JSON or TOML file, every section optional.
//!
//! Relative paths inside the file resolve against the file's directory.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use pecl_core::dataset::{SynthConfig, DEFAULT_EPS_METRES, DEFAULT_FRACTIONS, DEFAULT_MIN_OBSERVATIONS};
use pecl_core::gradcheck::GradcheckConfig;
use pecl_core::model::{EncoderKind, ModelConfig, SelectionMetric, TrainConfig};
use pecl_core::search::{GridSpace, RandomSpace, SearchSpace};
use pecl_core::ContrastiveConfig;

use crate::error::CliError;

const DEFAULT_PROJECTION_DIM: usize = 256;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub prep: PrepSection,
    pub split: SplitSection,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub loss: ContrastiveConfig,
    pub training: TrainingSection,
    pub search: SearchSection,
    pub gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub observations: Option<PathBuf>,
    pub locations: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepSection {
    pub min_observations: usize,
    pub species: Option<usize>,
    pub lenient: bool,
}

impl Default for PrepSection {
    fn default() -> Self {
        Self {
            min_observations: DEFAULT_MIN_OBSERVATIONS,
            species: None,
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub eps: f64,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS_METRES,
            fractions: DEFAULT_FRACTIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Embedding width; the identity encoder always uses the feature width.
    pub embedding_dim: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub adapter: bool,
    pub encoder: EncoderKind,
    pub encoder_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            embedding_dim: None,
            hidden: m.hidden,
            layers: m.layers,
            adapter: m.adapter,
            encoder: m.encoder,
            encoder_seed: m.encoder_seed,
        }
    }
}

impl ModelSection {
    pub fn build(&self, input_dim: usize, species: usize) -> ModelConfig {
        let embedding_dim = match self.encoder {
            EncoderKind::Identity => input_dim,
            EncoderKind::RandomProjection => self.embedding_dim.unwrap_or(DEFAULT_PROJECTION_DIM),
        };
        ModelConfig {
            input_dim,
            embedding_dim,
            hidden: self.hidden,
            layers: self.layers,
            species,
            adapter: self.adapter,
            encoder: self.encoder,
            encoder_seed: self.encoder_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: Option<usize>,
    pub selection: SelectionMetric,
    pub seeds: Vec<u64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            patience: t.patience,
            selection: t.selection,
            seeds: vec![0, 1, 2],
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            seed: self.seeds.first().copied().unwrap_or(0),
            selection: self.selection,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchModeConfig {
    #[default]
    Grid,
    Random,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub mode: SearchModeConfig,
    pub seed: u64,
    pub grid: GridSpace,
    pub random: RandomSpace,
}

impl SearchSection {
    pub fn space(&self, mode: SearchModeConfig) -> SearchSpace {
        match mode {
            SearchModeConfig::Grid => SearchSpace::Grid(self.grid.clone()),
            SearchModeConfig::Random => SearchSpace::Random(self.random.clone()),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        };
        if let Some(base) = path.parent() {
            cfg.paths.resolve_against(base);
        }
        Ok(cfg)
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.observations,
            &mut self.locations,
            &mut self.labels,
            &mut self.features,
            &mut self.splits,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "[loss]\nalpha = 0.3\nk = 2\n[training]\nseeds = [4, 5]\n[paths]\nlabels = \"data/labels.csv\"\n",
        )
        .unwrap();
        let json_path = dir.path().join("c.json");
        std::fs::write(
            &json_path,
            r#"{"loss": {"alpha": 0.3, "k": 2}, "training": {"seeds": [4, 5]}, "paths": {"labels": "data/labels.csv"}}"#,
        )
        .unwrap();
        let a = ExperimentConfig::load(&toml_path).unwrap();
        let b = ExperimentConfig::load(&json_path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss.tau, 0.5);
        assert_eq!(a.training.seeds, [4, 5]);
        assert_eq!(a.paths.labels.unwrap(), dir.path().join("data/labels.csv"));
    }

    #[test]
    fn projection_width_defaults_to_256() {
        let m = ModelSection {
            encoder: EncoderKind::RandomProjection,
            ..ModelSection::default()
        };
        assert_eq!(m.build(40, 5).embedding_dim, 256);
        assert_eq!(ModelSection::default().build(40, 5).embedding_dim, 40);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"loss": {"alhpa": 0.3}}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(CliError::Usage(_))));
    }
}
