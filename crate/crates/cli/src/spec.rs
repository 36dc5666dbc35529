//! Declarative experiment descriptions and their profile defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtgan_core::data::{DatasetKind, PairOptions};
use vtgan_core::scoring::LatentSearchConfig;
use vtgan_core::training::{Regime, TrainConfig};

use crate::error::{CliError, Result};

pub const DATA_DIR_ENV: &str = "VTGAN_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Side 32, capped data, 25 epochs.
    Desk,
    /// Side 64, full data, 100 epochs.
    Paper,
}

impl Profile {
    pub fn side(self) -> usize {
        match self {
            Profile::Desk => 32,
            Profile::Paper => 64,
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Profile::Desk => 25,
            Profile::Paper => 100,
        }
    }

    pub fn pair_options(self, seed: u64) -> PairOptions {
        match self {
            Profile::Desk => PairOptions { side: 32, seed, train_cap: Some(2000), test_cap_per_class: Some(200) },
            Profile::Paper => PairOptions { side: 64, seed, train_cap: None, test_cap_per_class: None },
        }
    }
}

/// What produces the scores of one table cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Anogan,
    Vtgan,
    Noisegan,
    Svdd,
    Iforest,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Anogan => "anogan",
            ModelKind::Vtgan => "vtgan",
            ModelKind::Noisegan => "noisegan",
            ModelKind::Svdd => "svdd",
            ModelKind::Iforest => "iforest",
        }
    }

    pub fn regime(self) -> Option<Regime> {
        match self {
            ModelKind::Anogan => Some(Regime::Anogan),
            ModelKind::Vtgan => Some(Regime::Vtgan),
            ModelKind::Noisegan => Some(Regime::Noisegan),
            ModelKind::Svdd => Some(Regime::Svdd),
            ModelKind::Iforest => None,
        }
    }

    pub fn is_gan(self) -> bool {
        self.regime().is_some_and(Regime::is_gan)
    }

    /// Results-table column.
    pub fn column(self) -> &'static str {
        match self {
            ModelKind::Anogan => "AnoGAN",
            ModelKind::Vtgan => "VTGAN",
            ModelKind::Noisegan => "NoiseGAN",
            ModelKind::Svdd => "DeepSVDD",
            ModelKind::Iforest => "IF",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestSpec {
    pub trees: usize,
    pub psi: usize,
    pub components: usize,
}

impl Default for ForestSpec {
    fn default() -> Self {
        ForestSpec { trees: 100, psi: 256, components: 512 }
    }
}

/// Everything needed to reproduce one known/unknown result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub profile: Profile,
    pub data_dir: PathBuf,
    pub dataset: DatasetKind,
    pub known: u8,
    pub unknown: u8,
    pub model: ModelKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub pair: PairOptions,
    /// Present for trained models.
    pub train: Option<TrainConfig>,
    /// Present for GAN models.
    pub search: Option<LatentSearchConfig>,
    /// Present for the isolation forest.
    pub forest: Option<ForestSpec>,
}

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

impl ExperimentSpec {
    pub fn new(profile: Profile, model: ModelKind, dataset: DatasetKind, known: u8, unknown: u8, seed: u64) -> Self {
        let side = profile.side();
        let train = model.regime().map(|r| {
            let mut t = TrainConfig::new(r, side);
            t.epochs = profile.epochs();
            t.seed = seed;
            t
        });
        ExperimentSpec {
            profile,
            data_dir: default_data_dir(),
            dataset,
            known,
            unknown,
            model,
            seed,
            out_dir: PathBuf::from("out"),
            pair: profile.pair_options(seed),
            train,
            search: model.is_gan().then_some(LatentSearchConfig { seed, ..LatentSearchConfig::default() }),
            forest: (model == ModelKind::Iforest).then(ForestSpec::default),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Reseeds every component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pair.seed = seed;
        if let Some(t) = self.train.as_mut() {
            t.seed = seed;
        }
        if let Some(s) = self.search.as_mut() {
            s.seed = seed;
        }
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        if let Some(t) = self.train.as_mut() {
            t.epochs = epochs;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.known > 9 || self.unknown > 9 || self.known == self.unknown {
            return Err(CliError::Usage(format!("invalid class pair {}/{}", self.known, self.unknown)));
        }
        if self.seed != self.pair.seed {
            return Err(CliError::Usage("pair seed differs from experiment seed".into()));
        }
        match (self.model.regime(), &self.train) {
            (Some(r), Some(t)) => {
                if t.regime != r {
                    return Err(CliError::Usage(format!("train regime {} does not match model {}", t.regime, self.model)));
                }
                if t.side != self.pair.side {
                    return Err(CliError::Usage("train side differs from pair side".into()));
                }
                t.validate()?;
            }
            (None, None) => {}
            _ => return Err(CliError::Usage(format!("train section does not fit model {}", self.model))),
        }
        if self.model.is_gan() {
            self.search.ok_or_else(|| CliError::Usage("GAN models need a search section".into()))?.validate()?;
        }
        if self.model == ModelKind::Iforest {
            let f = self.forest.ok_or_else(|| CliError::Usage("iforest needs a forest section".into()))?;
            if f.trees == 0 || f.psi == 0 || f.components == 0 {
                return Err(CliError::Usage("forest trees, psi and components must be positive".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn run_name(&self) -> String {
        format!("{}_{}v{}_{}_s{}", self.dataset, self.known, self.unknown, self.model, self.seed)
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }
}

/// Metric-embedding run over a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySpec {
    pub profile: Profile,
    pub data_dir: PathBuf,
    pub dataset: DatasetKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub samples_per_class: usize,
    pub pool_per_class: usize,
    pub k_neighbors: usize,
}

impl SimilaritySpec {
    pub fn new(profile: Profile, dataset: DatasetKind, seed: u64) -> Self {
        let mut train = TrainConfig::new(Regime::Metric, profile.side());
        train.epochs = profile.epochs();
        train.seed = seed;
        SimilaritySpec {
            profile,
            data_dir: default_data_dir(),
            dataset,
            seed,
            out_dir: PathBuf::from("out"),
            train,
            samples_per_class: vtgan_core::eval::DEFAULT_SAMPLES_PER_CLASS,
            pool_per_class: 100,
            k_neighbors: vtgan_core::eval::DEFAULT_K_NEIGHBORS,
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}_similarity_s{}", self.dataset, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_name_layout() {
        let s = ExperimentSpec::new(Profile::Desk, ModelKind::Vtgan, DatasetKind::Mnist, 8, 3, 1);
        assert_eq!(s.artifact_dir(), Path::new("out/mnist_8v3_vtgan_s1"));
        s.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentSpec::new(Profile::Desk, ModelKind::Anogan, DatasetKind::Mnist, 8, 3, 1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set_epochs(3);
        assert_ne!(a.hash(), b.hash());
        let back: ExperimentSpec = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn sections_follow_the_model() {
        let f = ExperimentSpec::new(Profile::Paper, ModelKind::Iforest, DatasetKind::FashionMnist, 9, 5, 0);
        assert!(f.train.is_none() && f.search.is_none() && f.forest.is_some());
        assert_eq!(f.pair.side, 64);
        let mut bad = ExperimentSpec::new(Profile::Desk, ModelKind::Svdd, DatasetKind::Mnist, 3, 3, 0);
        assert!(bad.validate().is_err());
        bad.unknown = 8;
        bad.validate().unwrap();
        bad.model = ModelKind::Anogan;
        assert!(bad.validate().is_err());
    }
}
