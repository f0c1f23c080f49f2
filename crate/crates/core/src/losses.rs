//! Winner-take-all pruning and the training objectives.
//!
//! All graph-level losses take batched operands and return the mean over the
//! batch of the per-sample quantity. Per-sample quantities are the plain
//! sums: squared L2 for `||.||` terms and L1 for the reconstruction term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{FeatureVars, HypothesisSet};
use crate::tensor::{Graph, Tensor, Var};

/// Clamp applied to discriminator scores before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_enc: f64,
    pub w_gen: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_enc: 1.0,
            w_gen: 50.0,
            w_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_enc, self.w_gen, self.w_adv]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::InvalidConfig(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Which optional terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub use_lm: bool,
    pub use_vb: bool,
}

/// Scalar values of every term of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub enc: f64,
    pub gen: f64,
    pub adv_noise: f64,
    pub adv_best: f64,
    pub adv_others: f64,
    pub adv_feature: f64,
    pub adv_total: f64,
    pub vb: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,enc,gen,adv_noise,adv_best,adv_others,adv_feature,vb,total";

    /// Assembles the adversarial sum and weighted total with exactly the
    /// operation order used on the graph.
    pub fn compose(
        enc: f64,
        gen: f64,
        adv: [f64; 4],
        vb: Option<f64>,
        weights: &LossWeights,
        flags: LossFlags,
    ) -> Self {
        let [adv_noise, adv_best, adv_others, adv_feature] = adv;
        let adv_total = ((adv_noise + adv_best) + adv_others) + adv_feature;
        let mut total = weights.w_gen * gen;
        if flags.use_lm {
            total += weights.w_enc * enc;
        }
        total += weights.w_adv * adv_total;
        let vb = if flags.use_vb { vb } else { None };
        if let Some(v) = vb {
            total += v;
        }
        Self {
            enc,
            gen,
            adv_noise,
            adv_best,
            adv_others,
            adv_feature,
            adv_total,
            vb,
            total,
        }
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        let vb = self.vb.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{epoch},{},{},{},{},{},{},{vb},{}",
            self.enc, self.gen, self.adv_noise, self.adv_best, self.adv_others, self.adv_feature, self.total
        )
    }

    /// Weighted mean of several breakdowns (weights are sample counts).
    pub fn weighted_mean(items: &[(LossBreakdown, usize)]) -> Self {
        let n: usize = items.iter().map(|(_, w)| w).sum();
        let n = n.max(1) as f64;
        let mean = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(|(b, w)| f(b) * *w as f64).sum::<f64>() / n;
        let has_vb = items.iter().any(|(b, _)| b.vb.is_some());
        Self {
            enc: mean(&|b| b.enc),
            gen: mean(&|b| b.gen),
            adv_noise: mean(&|b| b.adv_noise),
            adv_best: mean(&|b| b.adv_best),
            adv_others: mean(&|b| b.adv_others),
            adv_feature: mean(&|b| b.adv_feature),
            adv_total: mean(&|b| b.adv_total),
            vb: has_vb.then(|| mean(&|b| b.vb.unwrap_or(0.0))),
            total: mean(&|b| b.total),
        }
    }
}

/// Index of the hypothesis nearest to `x` in squared L2 for each batch row;
/// ties go to the lowest index. `x` and every head are `[B, ...]` with equal
/// shapes.
pub fn best_indices(x: &Tensor, heads: &[&Tensor]) -> Result<Vec<usize>> {
    if heads.is_empty() {
        return Err(Error::Empty("hypothesis list"));
    }
    for h in heads {
        if h.shape() != x.shape() {
            return Err(Error::Shape(format!("hypothesis {:?} vs input {:?}", h.shape(), x.shape())));
        }
    }
    let b = x.shape().first().copied().unwrap_or(1).max(1);
    let per = x.len() / b;
    Ok((0..b)
        .map(|r| {
            let xr = &x.data()[r * per..][..per];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, h) in heads.iter().enumerate() {
                let d: f64 = h.data()[r * per..][..per]
                    .iter()
                    .zip(xr)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// For each of the `heads - 1` loser slots, the head filling that slot in
/// every batch row.
pub fn loser_slots(best: &[usize], heads: usize) -> Vec<Vec<usize>> {
    (0..heads.saturating_sub(1))
        .map(|j| best.iter().map(|&b| if j < b { j } else { j + 1 }).collect())
        .collect()
}

/// Selects the hypothesis nearest to `x` and records it in `hyps`.
/// Returns the winner and the remaining hypotheses in head order.
pub fn prune(x: &Tensor, hyps: &mut HypothesisSet) -> Result<(Tensor, Vec<Tensor>)> {
    // One sample: the whole tensor is a single row, whatever its rank.
    let row = |t: &Tensor| t.clone().reshape(vec![1, t.len()]);
    let flat = hyps.conditioned.iter().map(row).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = flat.iter().collect();
    let index = best_indices(&row(x)?, &refs)?[0];
    hyps.best_index = Some(index);
    let others = hyps
        .conditioned
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != index)
        .map(|(_, t)| t.clone())
        .collect();
    Ok((hyps.conditioned[index].clone(), others))
}

fn batch_mean_sq(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sq_dist_rows(a, b)?;
    g.mean(d)
}

fn add_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or(Error::Empty("loss terms"))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Latent matching: squared L2 between the code of the input and the code
/// of its best reconstruction.
pub fn loss_enc(g: &mut Graph, z: Var, z_hat_best: Var) -> Result<Var> {
    batch_mean_sq(g, z, z_hat_best)
}

/// Reconstruction: L1 between the input and its best hypothesis.
pub fn loss_gen(g: &mut Graph, x: Var, x_hat_best: Var) -> Result<Var> {
    let d = g.l1_dist_rows(x, x_hat_best)?;
    g.mean(d)
}

/// KL divergence of the encoder posterior from the standard normal.
pub fn loss_vb(g: &mut Graph, mean: Var, log_var: Var) -> Result<Var> {
    let d = g.kl_rows(mean, log_var)?;
    g.mean(d)
}

#[derive(Clone, Copy, Debug)]
pub struct AdvVars {
    pub noise: Var,
    pub best: Var,
    pub others: Var,
    pub feature: Var,
    pub total: Var,
}

/// Adversarial feature-matching terms. Embedding distances use the
/// discriminator's penultimate layer. The "others" and per-block feature
/// terms are averaged over the losers and are exactly zero when there are
/// none.
pub fn loss_adv(
    g: &mut Graph,
    d_x: &FeatureVars,
    d_noise: &FeatureVars,
    d_best: &FeatureVars,
    d_others: &[FeatureVars],
) -> Result<AdvVars> {
    let noise = batch_mean_sq(g, d_x.embedding, d_noise.embedding)?;
    let best = batch_mean_sq(g, d_x.embedding, d_best.embedding)?;
    let (others, feature) = if d_others.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        (zero, zero)
    } else {
        let inv = 1.0 / d_others.len() as f64;
        let mut emb_terms = Vec::with_capacity(d_others.len());
        let mut feat_terms = Vec::new();
        for o in d_others {
            if o.per_block.len() != d_x.per_block.len() {
                return Err(Error::Shape(format!(
                    "feature stacks have {} and {} blocks",
                    d_x.per_block.len(),
                    o.per_block.len()
                )));
            }
            emb_terms.push(batch_mean_sq(g, d_x.embedding, o.embedding)?);
            for (&fx, &fo) in d_x.per_block.iter().zip(&o.per_block) {
                feat_terms.push(batch_mean_sq(g, fx, fo)?);
            }
        }
        let e = add_all(g, &emb_terms)?;
        let f = add_all(g, &feat_terms)?;
        (g.scale(e, inv)?, g.scale(f, inv)?)
    };
    let total = add_all(g, &[noise, best, others, feature])?;
    Ok(AdvVars {
        noise,
        best,
        others,
        feature,
        total,
    })
}

/// Graph handles for the terms entering the total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub enc: Option<Var>,
    pub gen: Var,
    pub adv: AdvVars,
    pub vb: Option<Var>,
}

/// Weighted total on the graph plus its breakdown. Absent optional terms
/// read as zero in the breakdown.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossTerms,
    weights: &LossWeights,
    flags: LossFlags,
) -> Result<(Var, LossBreakdown)> {
    let mut total = g.scale(terms.gen, weights.w_gen)?;
    if flags.use_lm {
        let enc = terms
            .enc
            .ok_or_else(|| Error::InvalidConfig("latent matching enabled without an enc term".into()))?;
        let e = g.scale(enc, weights.w_enc)?;
        total = g.add(e, total)?;
    }
    let a = g.scale(terms.adv.total, weights.w_adv)?;
    total = g.add(total, a)?;
    if flags.use_vb {
        let vb = terms
            .vb
            .ok_or_else(|| Error::InvalidConfig("variational bound enabled without a vb term".into()))?;
        total = g.add(total, vb)?;
    }
    let val = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown::compose(
        terms.enc.map(val).unwrap_or(0.0),
        val(terms.gen),
        [val(terms.adv.noise), val(terms.adv.best), val(terms.adv.others), val(terms.adv.feature)],
        terms.vb.map(val),
        weights,
        flags,
    );
    Ok((total, breakdown))
}

/// Binary cross-entropy for the discriminator: real rows toward 1, every
/// fake toward 0, fakes averaged.
pub fn discriminator_loss(g: &mut Graph, d_real: &FeatureVars, d_fakes: &[FeatureVars]) -> Result<Var> {
    let lr = g.ln_clamped(d_real.score, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let real = g.mean(lr)?;
    let mut loss = g.scale(real, -1.0)?;
    if !d_fakes.is_empty() {
        let mut fake_terms = Vec::with_capacity(d_fakes.len());
        for f in d_fakes {
            let inv = g.affine(f.score, -1.0, 1.0)?;
            let l = g.ln_clamped(inv, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
            fake_terms.push(g.mean(l)?);
        }
        let s = add_all(g, &fake_terms)?;
        let s = g.scale(s, -1.0 / d_fakes.len() as f64)?;
        loss = g.add(loss, s)?;
    }
    Ok(loss)
}
