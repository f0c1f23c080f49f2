use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_experiment, MetricReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, GRID_BLOCKS, GRID_KERNELS, GRID_LEARNING_RATES};

/// The six flag combinations of the ablation suite: `(name, lm, vb, mh)`.
pub const ARCHITECTURES: [(&str, bool, bool, bool); 6] = [
    ("LM-GAN", true, false, false),
    ("VB-GAN", false, true, false),
    ("LMVB-GAN", true, true, false),
    ("LMMH-GAN", true, false, true),
    ("VBMH-GAN", false, true, true),
    ("LMVBMH-GAN", true, true, true),
];

pub fn architecture_name(config: &ModelConfig) -> String {
    let mut name = String::new();
    for (on, tag) in [(config.use_lm, "LM"), (config.use_vb, "VB"), (config.use_mh, "MH")] {
        if on {
            name.push_str(tag);
        }
    }
    if name.is_empty() {
        name.push_str("PLAIN");
    }
    name + "-GAN"
}

/// Runs `f(0..n)` on a pool of `jobs` threads; results keep index order.
fn run_indexed<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One grid evaluation. Metrics are absent when the run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub architecture: String,
    pub kernel_size: usize,
    pub n_blocks: usize,
    pub learning_rate: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub mse: Option<f64>,
    pub error: Option<String>,
}

/// Every kernel x blocks x learning-rate combination, evaluated on one
/// shared split. Points are ordered by blocks, then kernel, then learning
/// rate.
pub fn grid_search(dataset: &Dataset, base: &ModelConfig, seed: u64, jobs: usize) -> Vec<SurfacePoint> {
    let combos: Vec<(usize, usize, f64)> = GRID_BLOCKS
        .iter()
        .flat_map(|&b| GRID_KERNELS.iter().flat_map(move |&k| GRID_LEARNING_RATES.iter().map(move |&lr| (b, k, lr))))
        .collect();
    let architecture = architecture_name(base);
    run_indexed(jobs, combos.len(), |i| {
        let (n_blocks, kernel_size, learning_rate) = combos[i];
        let config = ModelConfig {
            kernel_size,
            n_blocks,
            learning_rate,
            ..base.clone()
        };
        let result = run_experiment(dataset, &config, seed);
        SurfacePoint {
            architecture: architecture.clone(),
            kernel_size,
            n_blocks,
            learning_rate,
            auroc: result.as_ref().ok().map(|r| r.auroc),
            auprc: result.as_ref().ok().map(|r| r.auprc),
            mse: result.as_ref().ok().map(|r| r.mse),
            error: result.err().map(|e| e.to_string()),
        }
    })
}

/// Highest AUROC, ties broken by AUPRC, then by grid order.
pub fn best_point(points: &[SurfacePoint]) -> Option<&SurfacePoint> {
    points
        .iter()
        .filter_map(|p| Some((p, p.auroc?, p.auprc?)))
        .fold(None, |best: Option<(&SurfacePoint, f64, f64)>, cur| match best {
            Some(b) if (cur.1, cur.2) <= (b.1, b.2) => Some(b),
            _ => Some(cur),
        })
        .map(|(p, _, _)| p)
}

pub fn surface_csv(points: &[SurfacePoint], mut out: impl Write) -> Result<()> {
    writeln!(out, "architecture,kernel_size,n_blocks,learning_rate,auroc,auprc,mse")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.architecture,
            p.kernel_size,
            p.n_blocks,
            p.learning_rate,
            fmt_opt(p.auroc),
            fmt_opt(p.auprc),
            fmt_opt(p.mse)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub architecture: String,
    pub use_lm: bool,
    pub use_vb: bool,
    pub use_mh: bool,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

/// The six flag combinations under one split and seed.
pub fn run_ablation_suite(dataset: &Dataset, base: &ModelConfig, seed: u64, jobs: usize) -> Vec<AblationRow> {
    run_indexed(jobs, ARCHITECTURES.len(), |i| {
        let (name, use_lm, use_vb, use_mh) = ARCHITECTURES[i];
        let config = ModelConfig {
            use_lm,
            use_vb,
            use_mh,
            ..base.clone()
        };
        let result = run_experiment(dataset, &config, seed);
        AblationRow {
            architecture: name.to_string(),
            use_lm,
            use_vb,
            use_mh,
            error: result.as_ref().err().map(|e| e.to_string()),
            report: result.ok(),
        }
    })
}

pub fn ablation_csv(rows: &[AblationRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "architecture,lm,vb,mh,auroc,auprc,mse")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.architecture,
            r.use_lm,
            r.use_vb,
            r.use_mh,
            fmt_opt(r.report.map(|m| m.auroc)),
            fmt_opt(r.report.map(|m| m.auprc)),
            fmt_opt(r.report.map(|m| m.mse))
        )?;
    }
    Ok(())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let mut s = format!(
        "{:<12} {:^3} {:^3} {:^3} {:>8} {:>8} {:>10}\n",
        "architecture", "LM", "VB", "MH", "AUROC", "AUPRC", "MSE"
    );
    for r in rows {
        let _ = write!(s, "{:<12} {:^3} {:^3} {:^3} ", r.architecture, mark(r.use_lm), mark(r.use_vb), mark(r.use_mh));
        let _ = match r.report {
            Some(m) => writeln!(s, "{:>8.4} {:>8.4} {:>10.6}", m.auroc, m.auprc, m.mse),
            None => writeln!(s, "failed: {}", r.error.as_deref().unwrap_or("unknown error")),
        };
    }
    s
}

/// Seed of run `index` under `master`: a splitmix64 step, so neighbouring
/// indices give unrelated streams.
pub fn derive_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        // Deviations are taken about the first value so identical inputs
        // give exactly zero spread.
        let first = values.first().copied().unwrap_or(0.0);
        let shift = values.iter().map(|v| v - first).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|v| (v - first - shift) * (v - first - shift))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub architecture: String,
    pub n: usize,
    pub master_seed: u64,
    pub auroc: Stat,
    pub auprc: Stat,
    pub mse: Stat,
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricReport>,
}

/// `n` independent experiments with seeds derived from `master_seed`.
pub fn monte_carlo(
    dataset: &Dataset,
    config: &ModelConfig,
    n: usize,
    master_seed: u64,
    jobs: usize,
) -> Result<MonteCarloSummary> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("monte carlo needs at least 2 repeats, got {n}")));
    }
    let seeds: Vec<u64> = (0..n).map(|i| derive_seed(master_seed, i)).collect();
    let runs = run_indexed(jobs, n, |i| run_experiment(dataset, config, seeds[i]))
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::at(i, e)))
        .collect::<Result<Vec<_>>>()?;
    let column = |f: fn(&MetricReport) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(MonteCarloSummary {
        architecture: architecture_name(config),
        n,
        master_seed,
        auroc: column(|r| r.auroc),
        auprc: column(|r| r.auprc),
        mse: column(|r| r.mse),
        seeds,
        runs,
    })
}

pub fn monte_carlo_csv(summary: &MonteCarloSummary, mut out: impl Write) -> Result<()> {
    writeln!(out, "architecture,metric,mean,std,n")?;
    for (name, s) in [("auroc", summary.auroc), ("auprc", summary.auprc), ("mse", summary.mse)] {
        writeln!(out, "{},{name},{},{},{}", summary.architecture, s.mean, s.std, summary.n)?;
    }
    Ok(())
}

pub fn monte_carlo_table(summary: &MonteCarloSummary) -> String {
    let cell = |s: Stat| format!("{:.3} ± {:.3}", s.mean, s.std);
    format!(
        "{:<12} {:>15} {:>15} {:>15}\n{:<12} {:>15} {:>15} {:>15}\n({} runs, master seed {})\n",
        "architecture",
        "AUROC",
        "AUPRC",
        "MSE",
        summary.architecture,
        cell(summary.auroc),
        cell(summary.auprc),
        cell(summary.mse),
        summary.n,
        summary.master_seed
    )
}
