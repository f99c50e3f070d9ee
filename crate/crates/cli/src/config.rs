//! Experiment configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use diffreg::checkpoint::sha256_hex;
use diffreg::{Architecture, McsnConfig, MlpConfig, SamplerConfig, TaskName, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::{CsvColumns, PHYSICAL_CENTER, PHYSICAL_SCALE};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Mlp,
    Mcsn,
    MseBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic task used when no dataset path is given.
    pub task: Option<TaskName>,
    /// Training data (`.jsonl` or `.csv`).
    pub dataset: Option<PathBuf>,
    /// Evaluation data; defaults to fresh task draws.
    pub test_dataset: Option<PathBuf>,
    /// Header mapping for CSV ingestion.
    pub columns: CsvColumns,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub test_seed: u64,
    pub arch: ArchKind,
    /// Drop attributes from every row (the vision-only configuration).
    pub vision_only: bool,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Ensemble size.
    pub k: usize,
    /// Seed of all sampling streams.
    pub seed: u64,
    /// Map synthetic targets to `50 + 12.5 y` (a 0-100 percentage scale).
    pub physical_units: bool,
    /// Clamp reported means to the reporting range.
    pub clip: bool,
    /// Reporting range; unset means 0-100 for physical units and user
    /// datasets, and its task-unit preimage `[-4, 4]` for synthetic tasks.
    pub clip_range: Option<[f64; 2]>,
    /// Ensembles whose std exceeds this quantile of all stds are flagged.
    pub flag_quantile: f64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: None,
            dataset: None,
            test_dataset: None,
            columns: CsvColumns::default(),
            n_train: 4000,
            n_test: 500,
            data_seed: 1,
            test_seed: 2,
            arch: ArchKind::Mcsn,
            vision_only: false,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            k: 40,
            seed: 0,
            physical_units: false,
            clip: true,
            clip_range: None,
            flag_quantile: 0.9,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn for_task(task: TaskName) -> Self {
        Self {
            task: Some(task),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::ConfigParse(m));
        if self.task.is_none() && self.dataset.is_none() {
            return bad("either task or dataset must be set".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        let [lo, hi] = self.clip_bounds();
        if !(lo < hi) {
            return bad(format!("clip_range [{lo}, {hi}] is empty"));
        }
        if !(0.0..=1.0).contains(&self.flag_quantile) {
            return bad("flag_quantile must lie in [0, 1]".into());
        }
        for p in [&self.dataset, &self.test_dataset].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::DatasetNotFound(p.clone()));
            }
        }
        self.train.validate()?;
        self.sampler.validate(self.train.schedule.steps)?;
        Ok(())
    }

    pub fn clip_bounds(&self) -> [f64; 2] {
        match self.clip_range {
            Some(r) => r,
            None if self.physical_units || self.dataset.is_some() => [0.0, 100.0],
            None => [
                (0.0 - PHYSICAL_CENTER) / PHYSICAL_SCALE,
                (100.0 - PHYSICAL_CENTER) / PHYSICAL_SCALE,
            ],
        }
    }

    /// Architecture for the given data dims: the explicit one when set,
    /// otherwise the default of the configured kind.
    pub fn architecture(&self, feature_dim: usize, attribute_dim: usize) -> Architecture {
        if let Some(a) = &self.train.architecture {
            return a.clone();
        }
        match self.arch {
            ArchKind::Mlp => Architecture::Mlp(MlpConfig {
                feature_dim,
                attribute_dim,
                time_dim: 16,
                hidden: vec![64, 64],
            }),
            ArchKind::Mcsn | ArchKind::MseBaseline => Architecture::Mcsn(McsnConfig::small(feature_dim, attribute_dim)),
        }
    }

    /// Pretty JSON with every default spelled out.
    pub fn lock(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hash of everything except the output directory, so identical
    /// experiments hash identically wherever they are written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_needs_a_source() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap_err().kind(), "ConfigParse");
        let c = ExperimentConfig::from_json(r#"{"task": "B"}"#).unwrap();
        assert_eq!(c.k, 40);
        assert_eq!(c.train.learning_rate, 3e-4);
        assert_eq!(c.train.weight_decay, 1e-5);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert_eq!(ExperimentConfig::from_json(r#"{"task": "B", "kk": 1}"#).unwrap_err().kind(), "ConfigParse");
        assert_eq!(ExperimentConfig::from_json(r#"{"task": "B", "k": 0}"#).unwrap_err().kind(), "ConfigParse");
        assert_eq!(ExperimentConfig::from_json("not json").unwrap_err().kind(), "ConfigParse");
        let err = ExperimentConfig::from_json(r#"{"task": "B", "train": {"learning_rate": -1}}"#).unwrap_err();
        assert_eq!(err.kind(), "InvalidConfig");
    }

    #[test]
    fn missing_dataset_is_reported_with_its_path() {
        let err = ExperimentConfig::from_json(r#"{"dataset": "/no/such/file.jsonl"}"#).unwrap_err();
        assert_eq!(err.kind(), "DatasetNotFound");
        assert!(err.to_string().contains("/no/such/file.jsonl"));
    }

    #[test]
    fn lock_round_trips_and_hash_ignores_out() {
        let mut c = ExperimentConfig::for_task(TaskName::C);
        let back = ExperimentConfig::from_json(&c.lock()).unwrap();
        assert_eq!(back, c);
        let h = c.hash();
        c.out = PathBuf::from("/elsewhere");
        assert_eq!(c.hash(), h);
        c.seed = 9;
        assert_ne!(c.hash(), h);
    }

    #[test]
    fn clip_bounds_follow_units() {
        let mut c = ExperimentConfig::for_task(TaskName::B);
        assert_eq!(c.clip_bounds(), [-4.0, 4.0]);
        c.physical_units = true;
        assert_eq!(c.clip_bounds(), [0.0, 100.0]);
        c.clip_range = Some([1.0, 2.0]);
        assert_eq!(c.clip_bounds(), [1.0, 2.0]);
        c.clip_range = Some([2.0, 1.0]);
        assert_eq!(c.validate().unwrap_err().kind(), "ConfigParse");
    }
}
