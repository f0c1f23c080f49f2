//! Encoder, multi-head generator and discriminator.
//!
//! Each network owns a [`ParamStore`] whose order is fixed by the layer
//! layout below; graph-level forwards take the `Var`s produced by binding
//! that store, so one binding can serve several passes in a step.
//!
//! * encoder: `n_blocks x (conv, elu, conv, elu, maxpool)`, flatten, two dense
//!   layers to the latent code (mean and log-variance when VB is on)
//! * generator: two dense layers, reshape, `n_blocks x (upsample, conv, elu,
//!   conv, elu)`, crop to 24 steps, then one conv head per hypothesis with a
//!   logistic output
//! * discriminator: the encoder trunk, a dense embedding layer and a dense
//!   logistic score

mod config;

use rand::Rng;

pub use config::{ModelConfig, GRID_BLOCKS, GRID_KERNELS, GRID_LEARNING_RATES};

use crate::data::{CHANNELS, HOURS};
use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, Graph, ParamStore, Tensor, Var};

/// Inputs must lie in the unit interval up to this slack.
pub const RANGE_SLACK: f64 = 1e-3;

pub(crate) fn check_normalized(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|&&v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v)) {
        Some(&value) => Err(Error::Unnormalized { value }),
        None => Ok(()),
    }
}

/// Lifts `[2, 24]` to `[1, 2, 24]`; passes `[B, 2, 24]` through.
pub(crate) fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [CHANNELS, HOURS] => x.clone().reshape(vec![1, CHANNELS, HOURS]),
        [_, CHANNELS, HOURS] => Ok(x.clone()),
        s => Err(Error::Shape(format!("expected [2, 24] or [B, 2, 24], got {s:?}"))),
    }
}

fn push_conv<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    store.push(format!("{name}.weight"), xavier_uniform(&[cout, cin, k], cin * k, cout * k, rng));
    store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn push_dense<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, n: usize, m: usize, rng: &mut R) {
    store.push(format!("{name}.weight"), xavier_uniform(&[m, n], n, m, rng));
    store.push(format!("{name}.bias"), Tensor::zeros(&[m]));
}

/// Appends the downsampling trunk shared by encoder and discriminator.
fn push_down_trunk<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) {
    let mut cin = CHANNELS;
    for i in 0..cfg.n_blocks {
        let c = cfg.block_channels(i);
        push_conv(store, &format!("{prefix}.block{i}.conv_a"), cin, c, cfg.kernel_size, rng);
        push_conv(store, &format!("{prefix}.block{i}.conv_b"), c, c, cfg.kernel_size, rng);
        cin = c;
    }
}

fn flat_extent(cfg: &ModelConfig) -> usize {
    cfg.block_channels(cfg.n_blocks - 1) * cfg.time_extents()[cfg.n_blocks]
}

/// Runs the trunk; returns the output of every block.
fn down_trunk(g: &mut Graph, p: &[Var], x: Var, n_blocks: usize) -> Result<Vec<Var>> {
    let mut h = x;
    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let w = &p[4 * i..4 * i + 4];
        h = g.conv1d(h, w[0], w[1])?;
        h = g.elu(h)?;
        h = g.conv1d(h, w[2], w[3])?;
        h = g.elu(h)?;
        h = g.maxpool1d(h)?;
        blocks.push(h);
    }
    Ok(blocks)
}

fn flatten(g: &mut Graph, v: Var) -> Result<Var> {
    let s = g.shape(v);
    let b = s[0];
    let rest = s[1..].iter().product::<usize>();
    g.reshape(v, &[b, rest])
}

/// Graph-level encoder output.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// Deterministic code: the latent vector, or the posterior mean with VB.
    pub code: Var,
    /// Posterior log-variance, present with VB.
    pub log_var: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub params: ParamStore,
    config: ModelConfig,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        push_down_trunk(&mut params, "enc", config, rng);
        push_dense(&mut params, "enc.fc1", flat_extent(config), config.latent_dim, rng);
        let out = if config.use_vb { 2 * config.latent_dim } else { config.latent_dim };
        push_dense(&mut params, "enc.fc2", config.latent_dim, out, rng);
        Self {
            params,
            config: config.clone(),
        }
    }

    /// `x` is `[B, 2, 24]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<EncodedVars> {
        let n = self.config.n_blocks;
        let blocks = down_trunk(g, p, x, n)?;
        let mut h = flatten(g, *blocks.last().expect("n_blocks >= 2"))?;
        let fc = &p[4 * n..];
        h = g.dense(h, fc[0], fc[1])?;
        h = g.elu(h)?;
        h = g.dense(h, fc[2], fc[3])?;
        if self.config.use_vb {
            let l = self.config.latent_dim;
            Ok(EncodedVars {
                code: g.slice_cols(h, 0, l)?,
                log_var: Some(g.slice_cols(h, l, l)?),
            })
        } else {
            Ok(EncodedVars { code: h, log_var: None })
        }
    }

    /// Deterministic latent code of normalized input(s): `[2, 24]` gives
    /// `[latent_dim]`, `[B, 2, 24]` gives `[B, latent_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        check_normalized(x)?;
        let single = x.shape().len() == 2;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let xv = g.constant(as_batch(x)?);
        let out = self.forward(&mut g, &p, xv)?;
        let z = g.value(out.code).clone();
        if single {
            z.reshape(vec![self.config.latent_dim])
        } else {
            Ok(z)
        }
    }
}

/// Graph-level generator output: one `[B, 2, 24]` var per head, plus the
/// noise-conditioned sample when noise was supplied.
#[derive(Clone, Debug)]
pub struct GeneratedVars {
    pub conditioned: Vec<Var>,
    pub noise_sample: Option<Var>,
}

/// Generator output for one input: `H` reconstructions and one sample from
/// noise. `best_index` is filled in by pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub conditioned: Vec<Tensor>,
    pub noise_sample: Tensor,
    pub best_index: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamStore,
    config: ModelConfig,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let n = config.n_blocks;
        let top = config.block_channels(n - 1);
        let mut params = ParamStore::new();
        push_dense(&mut params, "gen.fc1", config.latent_dim, config.latent_dim, rng);
        push_dense(&mut params, "gen.fc2", config.latent_dim, top * config.generator_seed_extent(), rng);
        let mut cin = top;
        for j in 0..n {
            let c = config.block_channels(n - 1 - j);
            push_conv(&mut params, &format!("gen.block{j}.conv_a"), cin, c, config.kernel_size, rng);
            push_conv(&mut params, &format!("gen.block{j}.conv_b"), c, c, config.kernel_size, rng);
            cin = c;
        }
        for h in 0..config.heads() {
            push_conv(&mut params, &format!("gen.head{h}"), cin, CHANNELS, config.kernel_size, rng);
        }
        Self {
            params,
            config: config.clone(),
        }
    }

    pub fn heads(&self) -> usize {
        self.config.heads()
    }

    /// Parameter indices of head `h` (weight, bias).
    pub fn head_param_indices(&self, h: usize) -> [usize; 2] {
        let first = 4 + 4 * self.config.n_blocks + 2 * h;
        [first, first + 1]
    }

    fn trunk(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        let n = self.config.n_blocks;
        let b = g.shape(z)[0];
        let mut h = g.dense(z, p[0], p[1])?;
        h = g.elu(h)?;
        h = g.dense(h, p[2], p[3])?;
        h = g.elu(h)?;
        h = g.reshape(
            h,
            &[b, self.config.block_channels(n - 1), self.config.generator_seed_extent()],
        )?;
        for j in 0..n {
            let w = &p[4 + 4 * j..8 + 4 * j];
            h = g.upsample1d(h)?;
            h = g.conv1d(h, w[0], w[1])?;
            h = g.elu(h)?;
            h = g.conv1d(h, w[2], w[3])?;
            h = g.elu(h)?;
        }
        g.crop_time(h, HOURS)
    }

    fn head(&self, g: &mut Graph, p: &[Var], features: Var, h: usize) -> Result<Var> {
        let [w, b] = self.head_param_indices(h);
        let out = g.conv1d(features, p[w], p[b])?;
        g.sigmoid(out)
    }

    /// `z` is `[B, latent]`. With `noise = Some((z_noise, head))` the noise
    /// batch shares the trunk and leaves through `head`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], z: Var, noise: Option<(Var, usize)>) -> Result<GeneratedVars> {
        let latent = self.config.latent_dim;
        if g.shape(z).len() != 2 || g.shape(z)[1] != latent {
            return Err(Error::Shape(format!("latent must be [B, {latent}], got {:?}", g.shape(z))));
        }
        let b = g.shape(z)[0];
        let (cond_features, noise_features) = match noise {
            None => (self.trunk(g, p, z)?, None),
            Some((zn, head)) => {
                if g.shape(zn) != g.shape(z) {
                    return Err(Error::Shape(format!(
                        "noise latent {:?} differs from {:?}",
                        g.shape(zn),
                        g.shape(z)
                    )));
                }
                if head >= self.heads() {
                    return Err(Error::Shape(format!("noise head {head} out of {}", self.heads())));
                }
                let both = g.concat_batch(&[z, zn])?;
                let feats = self.trunk(g, p, both)?;
                let first: Vec<usize> = (0..b).collect();
                let second: Vec<usize> = (b..2 * b).collect();
                (g.gather_batch(feats, &first)?, Some((g.gather_batch(feats, &second)?, head)))
            }
        };
        let conditioned = (0..self.heads())
            .map(|h| self.head(g, p, cond_features, h))
            .collect::<Result<Vec<_>>>()?;
        let noise_sample = match noise_features {
            Some((f, head)) => Some(self.head(g, p, f, head)?),
            None => None,
        };
        Ok(GeneratedVars {
            conditioned,
            noise_sample,
        })
    }

    /// Hypotheses for a single latent vector; the noise sample leaves
    /// through a head drawn uniformly from `rng`.
    pub fn generate<R: Rng + ?Sized>(&self, z: &Tensor, z_noise: &Tensor, rng: &mut R) -> Result<HypothesisSet> {
        let latent = self.config.latent_dim;
        for t in [z, z_noise] {
            if t.shape() != [latent] {
                return Err(Error::Shape(format!("latent must be [{latent}], got {:?}", t.shape())));
            }
        }
        let head = rng.random_range(0..self.heads());
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let zv = g.constant(z.clone().reshape(vec![1, latent])?);
        let nv = g.constant(z_noise.clone().reshape(vec![1, latent])?);
        let out = self.forward(&mut g, &p, zv, Some((nv, head)))?;
        let unbatch = |g: &Graph, v: Var| g.value(v).clone().reshape(vec![CHANNELS, HOURS]);
        Ok(HypothesisSet {
            conditioned: out
                .conditioned
                .iter()
                .map(|&v| unbatch(&g, v))
                .collect::<Result<_>>()?,
            noise_sample: unbatch(&g, out.noise_sample.expect("noise requested"))?,
            best_index: None,
        })
    }
}

/// Graph-level discriminator features.
#[derive(Clone, Debug)]
pub struct FeatureVars {
    /// Output of each conv block, `[B, C_l, T_l]`.
    pub per_block: Vec<Var>,
    /// Penultimate dense activation, `[B, latent_dim]`.
    pub embedding: Var,
    /// Logistic score, `[B]`.
    pub score: Var,
}

impl FeatureVars {
    /// Rows of every component, in `indices` order.
    pub fn rows(&self, g: &mut Graph, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            per_block: self
                .per_block
                .iter()
                .map(|&v| g.gather_batch(v, indices))
                .collect::<Result<_>>()?,
            embedding: g.gather_batch(self.embedding, indices)?,
            score: g.gather_batch(self.score, indices)?,
        })
    }

    /// `count` consecutive rows starting at `start`.
    pub fn range(&self, g: &mut Graph, start: usize, count: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..start + count).collect();
        self.rows(g, &idx)
    }
}

/// Discriminator features for a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub per_block: Vec<Tensor>,
    pub embedding: Tensor,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    config: ModelConfig,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        push_down_trunk(&mut params, "disc", config, rng);
        push_dense(&mut params, "disc.fc1", flat_extent(config), config.latent_dim, rng);
        push_dense(&mut params, "disc.fc2", config.latent_dim, 1, rng);
        Self {
            params,
            config: config.clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<FeatureVars> {
        let n = self.config.n_blocks;
        let b = g.shape(x)[0];
        let per_block = down_trunk(g, p, x, n)?;
        let h = flatten(g, *per_block.last().expect("n_blocks >= 2"))?;
        let fc = &p[4 * n..];
        let h = g.dense(h, fc[0], fc[1])?;
        let embedding = g.elu(h)?;
        let s = g.dense(embedding, fc[2], fc[3])?;
        let s = g.sigmoid(s)?;
        let score = g.reshape(s, &[b])?;
        Ok(FeatureVars {
            per_block,
            embedding,
            score,
        })
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<FeatureStack> {
        if x.shape() != [CHANNELS, HOURS] {
            return Err(Error::Shape(format!("expected [2, 24], got {:?}", x.shape())));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let xv = g.constant(as_batch(x)?);
        let f = self.forward(&mut g, &p, xv)?;
        let unbatch = |t: &Tensor| {
            let s = t.shape()[1..].to_vec();
            t.clone().reshape(s)
        };
        Ok(FeatureStack {
            per_block: f
                .per_block
                .iter()
                .map(|&v| unbatch(g.value(v)))
                .collect::<Result<_>>()?,
            embedding: unbatch(g.value(f.embedding))?,
            score: g.value(f.score).data()[0],
        })
    }
}

/// The trained triple plus the config that shaped it.
#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Models {
    pub fn parameter_count(&self) -> usize {
        self.encoder.params.scalar_count()
            + self.generator.params.scalar_count()
            + self.discriminator.params.scalar_count()
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore); 3] {
        [
            ("encoder", &self.encoder.params),
            ("generator", &self.generator.params),
            ("discriminator", &self.discriminator.params),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore); 3] {
        [
            ("encoder", &mut self.encoder.params),
            ("generator", &mut self.generator.params),
            ("discriminator", &mut self.discriminator.params),
        ]
    }
}

/// Builds freshly initialized networks. Initialization order (encoder,
/// generator, discriminator) is fixed, so the RNG state determines weights.
pub fn build_models<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Models> {
    let config = config.validated()?;
    Ok(Models {
        encoder: Encoder::new(&config, rng),
        generator: Generator::new(&config, rng),
        discriminator: Discriminator::new(&config, rng),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kernel: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            kernel_size: kernel,
            n_blocks: blocks,
            latent_dim: 8,
            base_channels: 4,
            ..ModelConfig::default()
        }
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![2, 24], data).unwrap()
    }

    #[test]
    fn default_encoder_yields_latent_64() {
        let m = build_models(&ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.encoder.encode(&input(1)).unwrap().shape(), &[64]);
    }

    #[test]
    fn every_grid_topology_round_trips_shape() {
        for k in GRID_KERNELS {
            for b in GRID_BLOCKS {
                let cfg = small(k, b);
                let mut rng = ChaCha8Rng::seed_from_u64(k as u64 * 10 + b as u64);
                let m = build_models(&cfg, &mut rng).unwrap();
                let z = m.encoder.encode(&input(2)).unwrap();
                assert_eq!(z.shape(), &[8]);
                let hyps = m.generator.generate(&z, &Tensor::zeros(&[8]), &mut rng).unwrap();
                assert_eq!(hyps.conditioned.len(), 4);
                for h in hyps.conditioned.iter().chain([&hyps.noise_sample]) {
                    assert_eq!(h.shape(), &[2, 24]);
                    assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
                let f = m.discriminator.discriminate(&input(3)).unwrap();
                assert_eq!(f.per_block.len(), b);
                assert!(f.score > 0.0 && f.score < 1.0);
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_sensitive() {
        let m = build_models(&small(5, 3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = input(5);
        let z1 = m.encoder.encode(&x).unwrap();
        assert_eq!(z1, m.encoder.encode(&x).unwrap());
        let mut y = x.clone();
        y.data_mut()[10] += 0.05;
        assert_ne!(z1, m.encoder.encode(&y).unwrap());
    }

    #[test]
    fn encode_rejects_raw_readings() {
        let m = build_models(&small(3, 2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let raw = Tensor::full(&[2, 24], 35.0);
        assert!(matches!(m.encoder.encode(&raw), Err(Error::Unnormalized { .. })));
    }

    #[test]
    fn single_head_without_mh() {
        let cfg = ModelConfig {
            use_mh: false,
            ..small(3, 2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = build_models(&cfg, &mut rng).unwrap();
        let hyps = m.generator.generate(&Tensor::zeros(&[8]), &Tensor::zeros(&[8]), &mut rng).unwrap();
        assert_eq!(hyps.conditioned.len(), 1);
    }

    #[test]
    fn generate_checks_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = build_models(&small(3, 2), &mut rng).unwrap();
        assert!(m.generator.generate(&Tensor::zeros(&[7]), &Tensor::zeros(&[8]), &mut rng).is_err());
    }

    #[test]
    fn discriminator_self_distance_is_zero() {
        let m = build_models(&small(7, 3), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let a = m.discriminator.discriminate(&input(9)).unwrap();
        let b = m.discriminator.discriminate(&input(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let cfg = small(9, 4);
        let a = build_models(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = build_models(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        let vb = ModelConfig { use_vb: true, ..cfg };
        let c = build_models(&vb, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(c.parameter_count() > a.parameter_count());
    }

    #[test]
    fn vb_encoder_emits_mean_and_log_variance() {
        let cfg = ModelConfig {
            use_vb: true,
            ..small(3, 2)
        };
        let m = build_models(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&m.encoder.params, false);
        let x = g.constant(as_batch(&input(1)).unwrap());
        let out = m.encoder.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(out.code), &[1, 8]);
        assert_eq!(g.shape(out.log_var.unwrap()), &[1, 8]);
    }
}
