//! Synthetic PM days with labelled sensor faults.
//!
//! A normal day is a two-harmonic diurnal curve (morning and evening peaks)
//! scaled by a random daily level, with AR(1) multiplicative noise shared by
//! both channels. PM10 is PM2.5 times a daily coarse-fraction ratio, so it
//! never falls below PM2.5. Abnormal days are normal days with exactly one
//! injected fault.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Sample, CHANNELS, HOURS};
use crate::error::{Error, Result};

type Day = [[f64; CHANNELS]; HOURS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    /// 1-3 hour burst multiplied by 5-20.
    Spike,
    /// 6-10 hours frozen at the reading of the first faulty hour.
    Stuck,
    /// 4-8 hours of zeros.
    Dropout,
    /// Monotone ramp from x1 up to x3 at the end of the day.
    Drift,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] = [FaultKind::Spike, FaultKind::Stuck, FaultKind::Dropout, FaultKind::Drift];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultSpan {
    pub kind: FaultKind,
    pub start: usize,
    pub len: usize,
}

/// Relative weights of the four fault families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMix {
    pub spike: f64,
    pub stuck: f64,
    pub dropout: f64,
    pub drift: f64,
}

impl Default for AnomalyMix {
    fn default() -> Self {
        Self {
            spike: 0.25,
            stuck: 0.25,
            dropout: 0.25,
            drift: 0.25,
        }
    }
}

impl AnomalyMix {
    fn weights(&self) -> [f64; 4] {
        [self.spike, self.stuck, self.dropout, self.drift]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidConfig("anomaly mix weights must be non-negative".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("anomaly mix sums to {total}, expected 1")));
        }
        Ok(())
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> FaultKind {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (kind, w) in FaultKind::ALL.iter().zip(self.weights()) {
            acc += w;
            if u < acc {
                return *kind;
            }
        }
        // Rounding can leave u just above the final cumulative weight.
        *FaultKind::ALL
            .iter()
            .zip(self.weights())
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(k, _)| k)
            .expect("validated mix has a positive weight")
    }
}

/// A normal day before and after noise.
#[derive(Clone, Debug)]
pub struct DayDraw {
    pub clean: Day,
    pub noisy: Day,
}

pub fn normal_day<R: Rng + ?Sized>(rng: &mut R) -> DayDraw {
    let level = rng.random_range(15.0..60.0);
    let semi_amp = rng.random_range(0.25..0.4);
    let semi_phase = rng.random_range(7.0..9.0);
    let daily_amp = rng.random_range(0.05..0.15);
    let daily_phase = rng.random_range(18.0..22.0);
    let ratio = rng.random_range(1.4..1.9);
    let shared = Normal::new(0.0, 0.04).expect("valid std");
    let coarse = Normal::new(0.0, 0.02).expect("valid std");

    let mut clean = [[0.0; CHANNELS]; HOURS];
    let mut noisy = [[0.0; CHANNELS]; HOURS];
    let mut ar = 0.0;
    for h in 0..HOURS {
        let hf = h as f64;
        let shape = 1.0
            + semi_amp * (2.0 * PI * 2.0 * (hf - semi_phase) / 24.0).cos()
            + daily_amp * (2.0 * PI * (hf - daily_phase) / 24.0).cos();
        let pm25 = level * shape;
        clean[h] = [pm25, pm25 * ratio];
        ar = 0.5 * ar + shared.sample(rng);
        let n25 = (pm25 * (1.0 + ar)).max(0.0);
        let n10 = (pm25 * ratio * (1.0 + ar + coarse.sample(rng))).max(n25);
        noisy[h] = [n25, n10];
    }
    DayDraw { clean, noisy }
}

/// Corrupts `values` in place with one fault of the given kind.
pub fn inject_fault<R: Rng + ?Sized>(values: &mut Day, kind: FaultKind, rng: &mut R) -> FaultSpan {
    let (start, len) = match kind {
        FaultKind::Spike => {
            let len = rng.random_range(1..=3);
            let start = rng.random_range(0..=HOURS - len);
            for row in &mut values[start..start + len] {
                let factor = rng.random_range(5.0..=20.0);
                for v in row.iter_mut() {
                    *v *= factor;
                }
            }
            (start, len)
        }
        FaultKind::Stuck => {
            let len = rng.random_range(6..=10);
            let start = rng.random_range(0..=HOURS - len);
            let frozen = values[start];
            for row in &mut values[start..start + len] {
                *row = frozen;
            }
            (start, len)
        }
        FaultKind::Dropout => {
            let len = rng.random_range(4..=8);
            let start = rng.random_range(0..=HOURS - len);
            for row in &mut values[start..start + len] {
                *row = [0.0; CHANNELS];
            }
            (start, len)
        }
        FaultKind::Drift => {
            let start = rng.random_range(0..=12);
            let span = (HOURS - 1 - start) as f64;
            for (h, row) in values.iter_mut().enumerate().skip(start) {
                let factor = 1.0 + 2.0 * (h - start) as f64 / span;
                for v in row.iter_mut() {
                    *v *= factor;
                }
            }
            (start, HOURS - start)
        }
    };
    FaultSpan { kind, start, len }
}

/// Deterministic synthetic corpus: `n_normal` normal days followed by
/// `n_abnormal` faulty ones.
pub fn synth_generate(n_normal: usize, n_abnormal: usize, seed: u64, mix: &AnomalyMix) -> Result<Dataset> {
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_normal + n_abnormal);
    for i in 0..n_normal {
        let day = normal_day(&mut rng);
        samples.push(Sample::new(format!("normal-{i:04}"), day.noisy, Label::Normal)?);
    }
    for i in 0..n_abnormal {
        let mut values = normal_day(&mut rng).noisy;
        let kind = mix.pick(&mut rng);
        inject_fault(&mut values, kind, &mut rng);
        samples.push(Sample::new(format!("abnormal-{i:04}"), values, Label::Abnormal)?);
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let ds = synth_generate(10, 0, 1, &AnomalyMix::default()).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.samples.iter().all(|s| s.label == Label::Normal));
        let ds = synth_generate(5, 7, 1, &AnomalyMix::default()).unwrap();
        assert_eq!(ds.abnormals().count(), 7);
        for s in &ds.samples {
            s.validate().unwrap();
        }
    }

    #[test]
    fn seeded_determinism() {
        let mix = AnomalyMix::default();
        assert_eq!(synth_generate(20, 5, 3, &mix).unwrap(), synth_generate(20, 5, 3, &mix).unwrap());
        let a = synth_generate(5, 0, 3, &mix).unwrap();
        let b = synth_generate(5, 0, 4, &mix).unwrap();
        assert_ne!(a.samples[0].values, b.samples[0].values);
    }

    #[test]
    fn normals_keep_pm10_above_pm25() {
        let ds = synth_generate(200, 0, 11, &AnomalyMix::default()).unwrap();
        for s in &ds.samples {
            assert!(s.values.iter().all(|r| r[1] >= r[0]));
        }
    }

    #[test]
    fn invalid_mix_is_rejected() {
        let bad = AnomalyMix {
            spike: 0.5,
            stuck: 0.5,
            dropout: 0.5,
            drift: 0.0,
        };
        assert!(synth_generate(1, 1, 0, &bad).is_err());
        let neg = AnomalyMix {
            spike: 1.5,
            stuck: -0.5,
            dropout: 0.0,
            drift: 0.0,
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn single_family_mix() {
        let only_dropout = AnomalyMix {
            spike: 0.0,
            stuck: 0.0,
            dropout: 1.0,
            drift: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(only_dropout.pick(&mut rng), FaultKind::Dropout);
        }
    }

    #[test]
    fn fault_spans_respect_their_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in FaultKind::ALL {
            for _ in 0..50 {
                let mut v = normal_day(&mut rng).noisy;
                let orig = v;
                let span = inject_fault(&mut v, kind, &mut rng);
                assert!(span.start + span.len <= HOURS);
                let hours = span.start..span.start + span.len;
                match kind {
                    FaultKind::Spike => assert!((1..=3).contains(&span.len)),
                    FaultKind::Stuck => {
                        assert!(span.len >= 6);
                        assert!(hours.clone().all(|h| v[h] == orig[span.start]));
                    }
                    FaultKind::Dropout => {
                        assert!(span.len >= 4);
                        assert!(hours.clone().all(|h| v[h] == [0.0; 2]));
                    }
                    FaultKind::Drift => {
                        let last = v[HOURS - 1][0] / orig[HOURS - 1][0];
                        assert!((last - 3.0).abs() < 1e-9);
                    }
                }
                for h in (0..HOURS).filter(|h| !hours.contains(h)) {
                    assert_eq!(v[h], orig[h]);
                }
            }
        }
    }

    #[test]
    fn faults_stand_out_from_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Noise scale: residual of noisy days around their clean curve.
        let mut resid = Vec::new();
        for _ in 0..200 {
            let d = normal_day(&mut rng);
            for h in 0..HOURS {
                for c in 0..CHANNELS {
                    resid.push(d.noisy[h][c] - d.clean[h][c]);
                }
            }
        }
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resid.len() as f64).sqrt();

        let mix = AnomalyMix::default();
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..400 {
            let mut v = normal_day(&mut rng).noisy;
            let orig = v;
            let span = inject_fault(&mut v, mix.pick(&mut rng), &mut rng);
            for h in span.start..span.start + span.len {
                for c in 0..CHANNELS {
                    total += (v[h][c] - orig[h][c]).abs();
                    count += 1;
                }
            }
        }
        let magnitude = total / count as f64;
        assert!(magnitude > 3.0 * std, "fault magnitude {magnitude} vs noise std {std}");
    }
}
