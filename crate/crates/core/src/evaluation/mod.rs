//! Metrics, the train/test protocol, and the experiment harnesses built on
//! it (hyperparameter grid, flag ablations, repeated Monte Carlo runs).

mod harness;
mod metrics;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use harness::{
    ablation_csv, ablation_table, architecture_name, best_point, derive_seed, grid_search, monte_carlo,
    monte_carlo_csv, monte_carlo_table, run_ablation_suite, surface_csv, AblationRow, MonteCarloSummary, Stat,
    SurfacePoint, ARCHITECTURES,
};
pub use metrics::{auprc, auroc};

use crate::data::{Dataset, NormStats, Sample};
use crate::detection::{anomaly_scores, fit_threshold};
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, Models};
use crate::training::train;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    /// Mean anomaly score over the held-out normals.
    pub mse: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub theta: f64,
    pub wall_time: f64,
}

/// Named configuration presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 200 epochs, 8 base channels.
    Desk,
    /// 1000 epochs, 16 base channels.
    Paper,
}

impl Profile {
    pub fn config(self) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(),
            Profile::Paper => ModelConfig::paper(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidConfig(format!("unknown profile {other:?}; expected desk or paper"))),
        }
    }
}

/// Training normals, and the test set (held-out normals, then every
/// abnormal), both normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub normalization: NormStats,
}

impl Split {
    pub fn test_labels(&self) -> Vec<bool> {
        self.test.iter().map(Sample::is_abnormal).collect()
    }
}

/// Number of normals used for training out of `n`.
pub fn train_count(n: usize) -> usize {
    n * 4 / 5
}

/// Seeded shuffle of the normals with a four-fifths training share. Raw
/// datasets are normalized with statistics fitted on the training share;
/// datasets that already carry statistics are used as they are.
pub fn split(dataset: &Dataset, seed: u64) -> Result<Split> {
    let mut normals: Vec<&Sample> = dataset.normals().collect();
    let abnormals: Vec<&Sample> = dataset.abnormals().collect();
    if normals.is_empty() || abnormals.is_empty() {
        return Err(Error::SingleClass);
    }
    normals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = train_count(normals.len());
    if k == 0 {
        return Err(Error::InvalidData(format!("{} normals leave no training share", normals.len())));
    }
    let (train, held) = normals.split_at(k);
    let stats = match dataset.normalization {
        Some(stats) => stats,
        None => NormStats::fit(train.iter().copied())?,
    };
    let prep = |s: &&Sample| {
        if dataset.normalization.is_some() {
            (*s).clone()
        } else {
            stats.normalize(s)
        }
    };
    Ok(Split {
        train: train.iter().map(prep).collect(),
        test: held.iter().chain(&abnormals).map(prep).collect(),
        normalization: stats,
    })
}

/// Mean anomaly score over normal samples.
pub fn mse_metric(models: &Models, normal_test: &[Sample]) -> Result<f64> {
    if normal_test.is_empty() {
        return Err(Error::Empty("normal test set"));
    }
    let scores = anomaly_scores(models, normal_test)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Split, train, fit the threshold on the training normals and score the
/// test set. `seed` drives both the split and training.
pub fn run_experiment(dataset: &Dataset, config: &ModelConfig, seed: u64) -> Result<MetricReport> {
    let split = split(dataset, seed)?;
    let config = ModelConfig {
        rng_seed: seed,
        ..config.clone()
    };
    let run = train(&split.train, &config)?;
    let tm = fit_threshold(&run.models, &split.train, config.threshold_multiplier)?;
    let scores = anomaly_scores(&run.models, &split.test)?;
    let labels = split.test_labels();
    let normal_scores: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    Ok(MetricReport {
        auroc: auroc(&scores, &labels)?,
        auprc: auprc(&scores, &labels)?,
        mse: normal_scores.iter().sum::<f64>() / normal_scores.len() as f64,
        n_normal: normal_scores.len(),
        n_abnormal: labels.len() - normal_scores.len(),
        theta: tm.theta,
        wall_time: run.wall_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, AnomalyMix, Label, HOURS};

    fn dataset(n: usize, m: usize) -> Dataset {
        synth_generate(n, m, 8, &AnomalyMix::default()).unwrap()
    }

    #[test]
    fn split_counts() {
        assert_eq!(train_count(249), 199);
        assert_eq!(train_count(200), 160);
        let s = split(&dataset(200, 60), 1).unwrap();
        assert_eq!(s.train.len(), 160);
        assert_eq!(s.test.len(), 100);
        assert_eq!(s.test_labels().iter().filter(|&&l| l).count(), 60);
    }

    #[test]
    fn split_is_disjoint_and_normal_only_for_training() {
        let ds = dataset(30, 10);
        let s = split(&ds, 4).unwrap();
        assert!(s.train.iter().all(|x| x.label == Label::Normal));
        for t in &s.train {
            assert!(s.test.iter().all(|u| u.id != t.id));
        }
        let mut ids: Vec<&str> = s.train.iter().chain(&s.test).map(|x| x.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert_eq!(split(&ds, 4).unwrap(), s);
        assert_ne!(split(&ds, 5).unwrap().train, s.train);
    }

    #[test]
    fn split_normalizes_from_training_share() {
        let ds = dataset(30, 10);
        let s = split(&ds, 4).unwrap();
        assert!(s.train.iter().all(|x| x.values.iter().flatten().all(|v| (0.0..=1.0).contains(v))));
        let raw = s.train.iter().map(|t| ds.samples.iter().find(|u| u.id == t.id).unwrap());
        assert_eq!(s.normalization, NormStats::fit(raw).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(split(&dataset(10, 0), 0), Err(Error::SingleClass)));
        let only_bad = Dataset::new(vec![Sample::new("a", [[1.0, 2.0]; HOURS], Label::Abnormal).unwrap()]).unwrap();
        assert!(matches!(split(&only_bad, 0), Err(Error::SingleClass)));
    }

    #[test]
    fn profiles_parse() {
        assert_eq!("desk".parse::<Profile>().unwrap().config().epochs, 200);
        assert_eq!("paper".parse::<Profile>().unwrap().config().epochs, 1000);
        assert!("fast".parse::<Profile>().is_err());
    }

    #[test]
    fn experiment_is_seeded() {
        let cfg = ModelConfig {
            kernel_size: 3,
            n_blocks: 2,
            latent_dim: 8,
            base_channels: 4,
            epochs: 2,
            ..ModelConfig::default()
        };
        let ds = dataset(20, 6);
        let a = run_experiment(&ds, &cfg, 3).unwrap();
        let b = run_experiment(&ds, &cfg, 3).unwrap();
        assert_eq!((a.auroc, a.auprc, a.mse, a.theta), (b.auroc, b.auprc, b.mse, b.theta));
        assert_eq!((a.n_normal, a.n_abnormal), (4, 6));
    }
}
