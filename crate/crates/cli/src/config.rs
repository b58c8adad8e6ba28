use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use weightcert::losses::{ClassificationLoss, Regularizer};
use weightcert::{LossConfig, NetworkSpec, PerturbationSpec, TrainConfig};

/// Test radii of the attack sweep when none are given.
pub const DEFAULT_EPS_GRID: [f64; 7] = [0.0, 0.001, 0.005, 0.008, 0.01, 0.015, 0.02];

/// Training and sweep configuration file.
///
/// Relative data paths and `out_dir` resolve against the config file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub layer_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub mu: f64,
    pub gamma: f64,
    pub eps_train: f64,
    /// Perturbed layers for the robust term; all layers when absent.
    pub index_set: Option<Vec<usize>>,
    pub regularizer: Regularizer,
    pub classification_loss: ClassificationLoss,
    pub seed: u64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub subset_size: Option<usize>,
    pub test_subset_size: Option<usize>,
    pub out_dir: PathBuf,
    pub sweep: Option<SweepGrid>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            layer_dims: vec![784, 128, 64, 32, 10],
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            lambda: 0.0,
            mu: 0.0,
            gamma: 1.0,
            eps_train: 0.0,
            index_set: None,
            regularizer: Regularizer::default(),
            classification_loss: ClassificationLoss::default(),
            seed: 0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            subset_size: None,
            test_subset_size: None,
            out_dir: PathBuf::from("out"),
            sweep: None,
        }
    }
}

/// Grid iterated by `sweep`; empty axes fall back to the base config's value.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub eps_train: Vec<f64>,
    pub train_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eps_test: Vec<f64>,
    pub attack_steps: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lambda: Vec::new(),
            mu: Vec::new(),
            eps_train: Vec::new(),
            train_sizes: Vec::new(),
            seeds: Vec::new(),
            eps_test: DEFAULT_EPS_GRID.to_vec(),
            attack_steps: weightcert::attack::DEFAULT_STEPS,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| weightcert::Error::InvalidConfig(e.to_string()))
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.train_images,
            &mut cfg.train_labels,
            &mut cfg.test_images,
            &mut cfg.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            *p = base.join(&*p);
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec::relu(self.layer_dims.clone())?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.train_config_with(
            self.lambda,
            self.mu,
            self.eps_train,
            self.seed,
            self.subset_size,
        )
    }

    pub fn train_config_with(
        &self,
        lambda: f64,
        mu: f64,
        eps_train: f64,
        seed: u64,
        subset: Option<usize>,
    ) -> Result<TrainConfig> {
        let layers = self.layer_dims.len().saturating_sub(1);
        let perturbation = match &self.index_set {
            Some(set) => PerturbationSpec::new(set.iter().map(|&k| (k, eps_train)))?,
            None => PerturbationSpec::all_layers(layers, eps_train)?,
        };
        let cfg = TrainConfig {
            loss: LossConfig {
                lambda,
                mu,
                gamma: self.gamma,
                perturbation,
                classification_loss: self.classification_loss,
                regularizer: self.regularizer,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed,
            train_subset_size: subset,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_paths(&self) -> Result<(&Path, &Path)> {
        match (&self.train_images, &self.train_labels) {
            (Some(i), Some(l)) => Ok((i, l)),
            _ => bail!(weightcert::Error::InvalidConfig(
                "train_images and train_labels are required".into()
            )),
        }
    }

    pub fn test_paths(&self) -> Result<Option<(&Path, &Path)>> {
        match (&self.test_images, &self.test_labels) {
            (Some(i), Some(l)) => Ok(Some((i, l))),
            (None, None) => Ok(None),
            _ => bail!(weightcert::Error::InvalidConfig(
                "test_images and test_labels must be given together".into()
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err =
            serde_json::from_str::<RunConfig>(r#"{"epochs": 3, "learning_rat": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
    }

    #[test]
    fn defaults_and_index_set() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"eps_train": 0.01, "index_set": [2, 4], "lambda": 0.1}"#)
                .unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.epochs, 20);
        assert_eq!(t.loss.perturbation.radius(2), 0.01);
        assert_eq!(t.loss.perturbation.radius(1), 0.0);
        let all: RunConfig = serde_json::from_str(r#"{"eps_train": 0.02}"#).unwrap();
        assert_eq!(
            all.train_config()
                .unwrap()
                .loss
                .perturbation
                .layers()
                .count(),
            4
        );
    }

    #[test]
    fn sweep_grid_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"sweep": {"mu": [0, 0.002]}}"#).unwrap();
        let g = cfg.sweep.unwrap();
        assert_eq!(g.mu, vec![0.0, 0.002]);
        assert_eq!(g.eps_test, DEFAULT_EPS_GRID.to_vec());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sweep": {"nu": []}}"#).is_err());
    }
}
