//! The alternating adversarial training loop.
//!
//! Every mini-batch runs one discriminator step on its BCE loss followed by
//! one joint encoder/generator step on the weighted objective. All
//! randomness (initialization, shuffles, noise draws) comes from a single
//! ChaCha stream seeded by `rng_seed`, so a run is a pure function of
//! `(seed, data, config)`.

mod checkpoint;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{
    best_indices, discriminator_loss, loser_slots, loss_adv, loss_enc, loss_gen, loss_vb, total_loss, LossBreakdown,
    LossFlags, LossTerms,
};
use crate::networks::{build_models, check_normalized, ModelConfig, Models};
use crate::tensor::{Adam, Graph, Tensor, Var};

/// Epoch window and relative-improvement floor of the optional early stop.
pub const PLATEAU_WINDOW: usize = 50;
pub const PLATEAU_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: ModelConfig,
    /// Sample-weighted epoch means, one per completed epoch.
    pub trace: Vec<LossBreakdown>,
    pub models: Models,
    pub wall_time: f64,
    pub seed: u64,
}

/// The random draws of one mini-batch step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    /// `[B, latent]` standard normal latent for the noise branch.
    pub z_noise: Tensor,
    /// Head through which the noise sample leaves the generator.
    pub noise_head: usize,
    /// `[B, latent]` reparameterization draw, present with VB.
    pub eps: Option<Tensor>,
}

fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

impl StepNoise {
    pub fn draw<R: Rng + ?Sized>(config: &ModelConfig, batch: usize, rng: &mut R) -> Self {
        let shape = [batch, config.latent_dim];
        let z_noise = standard_normal(&shape, rng);
        let noise_head = rng.random_range(0..config.heads());
        let eps = config.use_vb.then(|| standard_normal(&shape, rng));
        Self {
            z_noise,
            noise_head,
            eps,
        }
    }
}

/// Encoder and generator forward on one batch, before any discriminator
/// pass.
struct Forward {
    g: Graph,
    x: Var,
    code: Var,
    vb: Option<Var>,
    best: Var,
    others: Vec<Var>,
    noise: Var,
    best_index: Vec<usize>,
}

fn forward_eg(models: &Models, xb: &Tensor, noise: &StepNoise) -> Result<Forward> {
    let b = xb.shape()[0];
    let mut g = Graph::new();
    let pe = g.bind(&models.encoder.params, true);
    let pg = g.bind(&models.generator.params, true);
    let x = g.constant(xb.clone());
    let enc = models.encoder.forward(&mut g, &pe, x)?;
    let (z, vb) = match (enc.log_var, &noise.eps) {
        (Some(lv), Some(eps)) => {
            let half = g.scale(lv, 0.5)?;
            let std = g.exp(half)?;
            let eps = g.constant(eps.clone());
            let jitter = g.mul(std, eps)?;
            (g.add(enc.code, jitter)?, Some(loss_vb(&mut g, enc.code, lv)?))
        }
        (None, None) => (enc.code, None),
        _ => return Err(Error::InvalidConfig("reparameterization draw does not match use_vb".into())),
    };
    let zn = g.constant(noise.z_noise.clone());
    let gen = models.generator.forward(&mut g, &pg, z, Some((zn, noise.noise_head)))?;

    let heads: Vec<&Tensor> = gen.conditioned.iter().map(|&v| g.value(v)).collect();
    let best_index = best_indices(xb, &heads)?;
    let slots = loser_slots(&best_index, heads.len());
    let all = g.concat_batch(&gen.conditioned)?;
    let pick = |rows: &[usize]| rows.iter().enumerate().map(|(r, &h)| h * b + r).collect::<Vec<_>>();
    let best = g.gather_batch(all, &pick(&best_index))?;
    let others = slots
        .iter()
        .map(|s| g.gather_batch(all, &pick(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Forward {
        x,
        code: enc.code,
        vb,
        best,
        others,
        noise: gen.noise_sample.expect("noise requested"),
        best_index,
        g,
    })
}

fn finish_eg(models: &Models, f: Forward) -> Result<(Graph, Var, LossBreakdown)> {
    let cfg = &models.config;
    let Forward {
        mut g,
        x,
        code,
        vb,
        best,
        others,
        noise,
        ..
    } = f;
    let b = g.shape(x)[0];
    let pd = g.bind(&models.discriminator.params, false);
    let mut parts = vec![x, noise, best];
    parts.extend(&others);
    let stacked = g.concat_batch(&parts)?;
    let feats = models.discriminator.forward(&mut g, &pd, stacked)?;
    let d_x = feats.range(&mut g, 0, b)?;
    let d_noise = feats.range(&mut g, b, b)?;
    let d_best = feats.range(&mut g, 2 * b, b)?;
    let d_others = (0..others.len())
        .map(|j| feats.range(&mut g, (3 + j) * b, b))
        .collect::<Result<Vec<_>>>()?;
    let adv = loss_adv(&mut g, &d_x, &d_noise, &d_best, &d_others)?;
    let gen = loss_gen(&mut g, x, best)?;
    let enc = if cfg.use_lm {
        let pe = g.bind(&models.encoder.params, true);
        let z_hat = models.encoder.forward(&mut g, &pe, best)?;
        Some(loss_enc(&mut g, code, z_hat.code)?)
    } else {
        None
    };
    let flags = LossFlags {
        use_lm: cfg.use_lm,
        use_vb: cfg.use_vb,
    };
    let terms = LossTerms { enc, gen, adv, vb };
    let (total, breakdown) = total_loss(&mut g, &terms, &cfg.loss_weights, flags)?;
    Ok((g, total, breakdown))
}

/// Builds the encoder/generator objective on one batch. The returned graph
/// tracks encoder and generator parameters; the discriminator is frozen.
pub fn objective(models: &Models, xb: &Tensor, noise: &StepNoise) -> Result<(Graph, Var, LossBreakdown)> {
    finish_eg(models, forward_eg(models, xb, noise)?)
}

/// Index of the winning hypothesis per batch row for the given draws.
pub fn winners(models: &Models, xb: &Tensor, noise: &StepNoise) -> Result<Vec<usize>> {
    Ok(forward_eg(models, xb, noise)?.best_index)
}

/// Discriminator BCE with `x` as real and every tensor in `fakes` as fake.
pub fn discriminator_objective(models: &Models, xb: &Tensor, fakes: &[Tensor]) -> Result<(Graph, Var)> {
    let b = xb.shape()[0];
    let mut g = Graph::new();
    let pd = g.bind(&models.discriminator.params, true);
    let mut parts = vec![g.constant(xb.clone())];
    parts.extend(fakes.iter().map(|t| g.constant(t.clone())));
    let stacked = g.concat_batch(&parts)?;
    let feats = models.discriminator.forward(&mut g, &pd, stacked)?;
    let real = feats.range(&mut g, 0, b)?;
    let fake = (0..fakes.len())
        .map(|j| feats.range(&mut g, (1 + j) * b, b))
        .collect::<Result<Vec<_>>>()?;
    let loss = discriminator_loss(&mut g, &real, &fake)?;
    Ok((g, loss))
}

/// One discriminator update followed by one encoder/generator update.
pub fn train_step(models: &mut Models, xb: &Tensor, noise: &StepNoise, adam: &Adam) -> Result<LossBreakdown> {
    let fwd = forward_eg(models, xb, noise)?;
    let mut fakes: Vec<Tensor> = vec![fwd.g.value(fwd.noise).clone(), fwd.g.value(fwd.best).clone()];
    fakes.extend(fwd.others.iter().map(|&v| fwd.g.value(v).clone()));

    let (mut gd, d_loss) = discriminator_objective(models, xb, &fakes)?;
    gd.backward(d_loss, &mut [&mut models.discriminator.params])?;
    adam.step(&mut models.discriminator.params)?;

    let (mut g, loss, breakdown) = finish_eg(models, fwd)?;
    g.backward(loss, &mut [&mut models.encoder.params, &mut models.generator.params])?;
    adam.step(&mut models.encoder.params)?;
    adam.step(&mut models.generator.params)?;
    Ok(breakdown)
}

fn check_train_set(train_set: &[Sample]) -> Result<Vec<Tensor>> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    train_set
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.is_abnormal() {
                return Err(Error::at(i, Error::InvalidData(format!("{} is labelled abnormal", s.id))));
            }
            let t = s.to_tensor();
            check_normalized(&t).map_err(|e| Error::at(i, e))?;
            Ok(t)
        })
        .collect()
}

fn plateaued(trace: &[LossBreakdown]) -> bool {
    let n = trace.len();
    if n <= PLATEAU_WINDOW {
        return false;
    }
    let then = trace[n - 1 - PLATEAU_WINDOW].total;
    let now = trace[n - 1].total;
    (then - now) / then.abs().max(f64::MIN_POSITIVE) < PLATEAU_TOLERANCE
}

/// Trains fresh networks on normalized normal samples.
pub fn train(train_set: &[Sample], config: &ModelConfig) -> Result<TrainRun> {
    train_with(train_set, config, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean)` after every epoch.
pub fn train_with(
    train_set: &[Sample],
    config: &ModelConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainRun> {
    let start = Instant::now();
    let config = config.validated()?;
    let xs = check_train_set(train_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut models = build_models(&config, &mut rng)?;
    let adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &xs[i]).collect();
            let xb = Tensor::stack(&batch)?;
            let noise = StepNoise::draw(&config, chunk.len(), &mut rng);
            let b = train_step(&mut models, &xb, &noise, &adam).map_err(|e| Error::Diverged {
                epoch,
                source: Box::new(e),
            })?;
            parts.push((b, chunk.len()));
        }
        let mean = LossBreakdown::weighted_mean(&parts);
        if !mean.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                source: Box::new(Error::NonFinite { op: "epoch loss" }),
            });
        }
        on_epoch(epoch, &mean);
        trace.push(mean);
        if config.early_stop && plateaued(&trace) {
            break;
        }
    }

    Ok(TrainRun {
        seed: config.rng_seed,
        config,
        trace,
        models,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

pub fn write_trace(trace: &[LossBreakdown], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", LossBreakdown::CSV_HEADER)?;
    for (epoch, b) in trace.iter().enumerate() {
        writeln!(out, "{}", b.csv_row(epoch))?;
    }
    Ok(())
}

pub fn save_trace(trace: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, AnomalyMix};
    use crate::data::NormStats;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            kernel_size: 3,
            n_blocks: 2,
            latent_dim: 8,
            n_hypotheses: 2,
            base_channels: 4,
            batch_size: 8,
            epochs: 3,
            learning_rate: 1e-3,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn normal_samples(n: usize, seed: u64) -> Vec<Sample> {
        let ds = synth_generate(n, 0, seed, &AnomalyMix::default()).unwrap();
        let stats = NormStats::fit(&ds.samples).unwrap();
        ds.normalize(&stats).samples
    }

    #[test]
    fn trace_has_one_finite_row_per_epoch() {
        let run = train(&normal_samples(20, 1), &tiny_config()).unwrap();
        assert_eq!(run.trace.len(), 3);
        assert!(run.trace.iter().all(|b| b.total.is_finite() && b.vb.is_none()));
    }

    #[test]
    fn same_seed_same_run() {
        let data = normal_samples(12, 2);
        let a = train(&data, &tiny_config()).unwrap();
        let b = train(&data, &tiny_config()).unwrap();
        assert_eq!(a.trace, b.trace);
        let c = train(&data, &ModelConfig { rng_seed: 9, ..tiny_config() }).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn rejects_bad_training_sets() {
        assert!(matches!(train(&[], &tiny_config()), Err(Error::Empty(_))));
        let raw = synth_generate(3, 0, 0, &AnomalyMix::default()).unwrap().samples;
        assert!(matches!(
            train(&raw, &tiny_config()),
            Err(Error::AtIndex { index: 0, .. })
        ));
        let mut data = normal_samples(3, 0);
        data[2].label = crate::data::Label::Abnormal;
        assert!(matches!(train(&data, &tiny_config()), Err(Error::AtIndex { index: 2, .. })));
    }

    #[test]
    fn vb_runs_record_the_kl_term() {
        let cfg = ModelConfig { use_vb: true, ..tiny_config() };
        let run = train(&normal_samples(10, 3), &cfg).unwrap();
        assert!(run.trace.iter().all(|b| b.vb.is_some_and(|v| v >= 0.0)));
    }

    #[test]
    fn losing_heads_get_zero_gradient_without_adversarial_terms() {
        let mut cfg = tiny_config();
        cfg.n_hypotheses = 4;
        cfg.loss_weights.w_adv = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut models = build_models(&cfg, &mut rng).unwrap();
        let data = normal_samples(1, 4);
        let xb = Tensor::stack(&[&data[0].to_tensor()]).unwrap();
        let noise = StepNoise::draw(&models.config, 1, &mut rng);
        let best = winners(&models, &xb, &noise).unwrap()[0];
        let (mut g, loss, _) = objective(&models, &xb, &noise).unwrap();
        g.backward(loss, &mut [&mut models.encoder.params, &mut models.generator.params])
            .unwrap();
        for h in 0..4 {
            for i in models.generator.head_param_indices(h) {
                let grad = models.generator.params.get(i).grad().unwrap();
                let zero = grad.data().iter().all(|&v| v == 0.0);
                assert_eq!(zero, h != best, "head {h}, winner {best}");
            }
        }
    }

    #[test]
    fn gen_loss_drops_over_training() {
        let cfg = ModelConfig {
            epochs: 40,
            ..tiny_config()
        };
        let run = train(&normal_samples(32, 5), &cfg).unwrap();
        assert!(run.trace.last().unwrap().gen < run.trace[0].gen);
    }

    #[test]
    fn early_stop_detects_plateau() {
        let flat = vec![LossBreakdown { total: 1.0, ..Default::default() }; PLATEAU_WINDOW + 1];
        assert!(plateaued(&flat));
        let falling: Vec<LossBreakdown> = (0..=PLATEAU_WINDOW)
            .map(|i| LossBreakdown { total: 10.0 - i as f64 * 0.1, ..Default::default() })
            .collect();
        assert!(!plateaued(&falling));
        assert!(!plateaued(&flat[..PLATEAU_WINDOW]));
    }

    #[test]
    fn trace_csv_layout() {
        let trace = vec![LossBreakdown { total: 1.5, ..Default::default() }];
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,enc,gen,adv_noise,adv_best,adv_others,adv_feature,vb,total"));
        assert_eq!(lines.next(), Some("0,0,0,0,0,0,0,,1.5"));
    }
}
