//! Reconstruction-error scores and the mean-plus-spread decision rule.
//!
//! At inference the encoder code is used directly and the noise branch is
//! skipped (equivalently, its latent is fixed at zero), so scores are a
//! deterministic function of the trained weights.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::best_indices;
use crate::networks::{as_batch, check_normalized, Models};
use crate::tensor::{Graph, Tensor};

/// Scores above this many samples are computed in chunks of this size.
const SCORE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub mu: f64,
    pub sigma: f64,
    pub multiplier: f64,
    pub theta: f64,
}

impl ThresholdModel {
    /// Fits `theta = mu + multiplier * sigma` with the population standard
    /// deviation of `scores`.
    pub fn from_scores(scores: &[f64], multiplier: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("score set"));
        }
        let n = scores.len() as f64;
        let mu = scores.iter().sum::<f64>() / n;
        let sigma = (scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n).sqrt();
        Ok(Self::new(mu, sigma, multiplier))
    }

    pub fn new(mu: f64, sigma: f64, multiplier: f64) -> Self {
        Self {
            mu,
            sigma,
            multiplier,
            theta: mu + multiplier * sigma,
        }
    }

    /// Same fitted statistics with a different multiplier.
    pub fn with_multiplier(&self, multiplier: f64) -> Self {
        Self::new(self.mu, self.sigma, multiplier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub score: f64,
    pub theta: f64,
    pub is_abnormal: bool,
}

/// Boundary-inclusive: a score equal to `theta` is abnormal.
pub fn classify(score: f64, tm: &ThresholdModel) -> Verdict {
    Verdict {
        score,
        theta: tm.theta,
        is_abnormal: score >= tm.theta,
    }
}

/// Mean squared error between `x` and its best hypothesis, one per row of a
/// normalized `[B, 2, 24]` (or single `[2, 24]`) input.
pub fn score_tensor(models: &Models, x: &Tensor) -> Result<Vec<f64>> {
    check_normalized(x)?;
    let xb = as_batch(x)?;
    let mut g = Graph::new();
    let pe = g.bind(&models.encoder.params, false);
    let pg = g.bind(&models.generator.params, false);
    let xv = g.constant(xb.clone());
    let z = models.encoder.forward(&mut g, &pe, xv)?.code;
    let heads = models.generator.forward(&mut g, &pg, z, None)?.conditioned;
    let heads: Vec<&Tensor> = heads.iter().map(|&v| g.value(v)).collect();
    let best = best_indices(&xb, &heads)?;
    let per = xb.len() / best.len();
    Ok(best
        .iter()
        .enumerate()
        .map(|(r, &h)| {
            let a = &xb.data()[r * per..][..per];
            let b = &heads[h].data()[r * per..][..per];
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / per as f64
        })
        .collect())
}

pub fn anomaly_score(models: &Models, x: &Sample) -> Result<f64> {
    Ok(score_tensor(models, &x.to_tensor())?[0])
}

/// Scores of every sample in order; failures carry the sample index.
pub fn anomaly_scores(models: &Models, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(SCORE_CHUNK).enumerate() {
        let base = c * SCORE_CHUNK;
        let tensors: Vec<Tensor> = chunk.iter().map(Sample::to_tensor).collect();
        for (i, t) in tensors.iter().enumerate() {
            check_normalized(t).map_err(|e| Error::at(base + i, e))?;
        }
        let xb = Tensor::stack(&tensors.iter().collect::<Vec<_>>())?;
        out.extend(score_tensor(models, &xb)?);
    }
    Ok(out)
}

pub fn fit_threshold(models: &Models, train_set: &[Sample], multiplier: f64) -> Result<ThresholdModel> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    ThresholdModel::from_scores(&anomaly_scores(models, train_set)?, multiplier)
}

pub fn detect_batch(models: &Models, tm: &ThresholdModel, samples: &[Sample]) -> Result<Vec<Verdict>> {
    Ok(anomaly_scores(models, samples)?
        .into_iter()
        .map(|s| classify(s, tm))
        .collect())
}
