use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hpgan_core::data::{synth_generate, AnomalyMix, Dataset, NormStats, Sample};
use hpgan_core::detection::{detect_batch, fit_threshold, ThresholdModel, Verdict};
use hpgan_core::evaluation::{
    ablation_csv, ablation_table, best_point, grid_search, monte_carlo, monte_carlo_csv, monte_carlo_table,
    run_ablation_suite, surface_csv,
};
use hpgan_core::networks::ModelConfig;
use hpgan_core::training::{load_checkpoint, save_checkpoint, save_trace, train_with};
use serde::Serialize;

use crate::config::resolve_config;
use crate::manifest::{sidecar, RunManifest};
use crate::{AblateArgs, Command, DetectArgs, EvalArgs, Failure, GridArgs, ModelArgs, SynthArgs, TrainArgs};

pub(crate) const CHECKPOINT_FILE: &str = "model.ckpt";
pub(crate) const THRESHOLD_FILE: &str = "threshold.json";

pub(crate) fn dispatch(command: Command, argv: Vec<String>) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => synth(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Detect(a) => detect(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Grid(a) => grid(a, argv),
        Command::Ablate(a) => ablate(a, argv),
    }
}

fn runtime_io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(runtime_io(dir))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(runtime_io(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(runtime_io(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(runtime_io(path))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> hpgan_core::Result<()>) -> Result<(), Failure> {
    let mut w = create_file(path)?;
    f(&mut w)?;
    w.flush().map_err(runtime_io(path))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn model_config(m: &ModelArgs) -> Result<ModelConfig, Failure> {
    resolve_config(m.profile, m.config.as_deref(), &m.overrides)
}

fn synth(a: SynthArgs, argv: Vec<String>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("synth", argv, Some(a.seed));
    let mix = match a.mix.as_deref() {
        None => AnomalyMix::default(),
        Some(&[spike, stuck, dropout, drift]) => AnomalyMix {
            spike,
            stuck,
            dropout,
            drift,
        },
        Some(_) => return Err(Failure::Usage("--mix takes four weights".into())),
    };
    mix.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = synth_generate(a.normal, a.abnormal, a.seed, &mix)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    if is_json(&a.out) {
        ds.save_json(&a.out)?;
    } else {
        ds.save_csv(&a.out)?;
    }
    println!("wrote {} normal and {} abnormal samples to {}", a.normal, a.abnormal, a.out.display());
    manifest.outputs.push(a.out.clone());
    manifest.finish(&sidecar(&a.out))
}

/// Normalizes raw datasets with `stats`; already-normalized ones pass.
fn prepare(ds: &Dataset, stats: Option<&NormStats>) -> Result<Vec<Sample>, Failure> {
    match (ds.normalization, stats) {
        (Some(_), _) => Ok(ds.samples.clone()),
        (None, Some(s)) => Ok(ds.normalize(s).samples),
        (None, None) => Err(Failure::Data("data is not normalized and the model carries no statistics".into())),
    }
}

fn train(a: TrainArgs, argv: Vec<String>) -> Result<(), Failure> {
    let mut config = model_config(&a.model)?;
    if let Some(seed) = a.seed {
        config.rng_seed = seed;
    }
    let mut manifest = RunManifest::start("train", argv, Some(config.rng_seed));
    manifest.inputs.push(a.data.clone());
    let ds = load_dataset(&a.data)?;
    let skipped = ds.abnormals().count();
    if skipped > 0 {
        eprintln!("hpgan: ignoring {skipped} abnormal samples; training uses normals only");
    }
    let normals = Dataset {
        samples: ds.normals().cloned().collect(),
        normalization: ds.normalization,
    };
    if normals.is_empty() {
        return Err(Failure::Data(format!("{} holds no normal samples", a.data.display())));
    }
    let stats = match ds.normalization {
        Some(s) => s,
        None => NormStats::fit(&normals.samples)?,
    };
    let train_set = prepare(&normals, Some(&stats))?;

    let verbose = a.verbose;
    let run = train_with(&train_set, &config, |epoch, b| {
        if verbose {
            eprintln!("epoch {epoch:>5}  gen {:.6}  adv {:.6}  total {:.6}", b.gen, b.adv_total, b.total);
        }
    })?;
    let tm = fit_threshold(&run.models, &train_set, config.threshold_multiplier)?;

    create_dir(&a.out)?;
    let files = [CHECKPOINT_FILE, "trace.csv", THRESHOLD_FILE, "norm.json", "config.json"].map(|f| a.out.join(f));
    save_checkpoint(&run, Some(&stats), &files[0]).map_err(|e| Failure::Runtime(e.to_string()))?;
    save_trace(&run.trace, &files[1]).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_json(&files[2], &tm)?;
    write_json(&files[3], &stats)?;
    write_json(&files[4], &run.config)?;
    let last = run.trace.last().map(|b| b.total).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} samples in {:.1}s; final loss {last:.6}; theta {:.6}",
        run.trace.len(),
        train_set.len(),
        run.wall_time,
        tm.theta
    );
    manifest.config = Some(run.config.clone());
    manifest.outputs.extend(files);
    manifest.finish(&a.out.join("manifest.json"))
}

#[derive(Serialize)]
struct VerdictRow<'a> {
    sample_id: &'a str,
    score: f64,
    theta: f64,
    is_abnormal: bool,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn detect(a: DetectArgs, argv: Vec<String>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("detect", argv, None);
    let ckpt_path = a.model.join(CHECKPOINT_FILE);
    let tm_path = a.model.join(THRESHOLD_FILE);
    manifest.inputs.extend([ckpt_path.clone(), tm_path.clone(), a.data.clone()]);
    let ckpt = load_checkpoint(&ckpt_path).map_err(|e| Failure::Data(format!("{}: {e}", ckpt_path.display())))?;
    let text = fs::read_to_string(&tm_path).map_err(|e| Failure::Data(format!("{}: {e}", tm_path.display())))?;
    let mut tm: ThresholdModel =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", tm_path.display())))?;
    if let Some(m) = a.multiplier {
        if !m.is_finite() {
            return Err(Failure::Usage(format!("--multiplier {m} is not finite")));
        }
        tm = tm.with_multiplier(m);
    }
    let ds = load_dataset(&a.data)?;
    let samples = prepare(&ds, ckpt.normalization.as_ref())?;
    let verdicts: Vec<Verdict> = detect_batch(&ckpt.models, &tm, &samples)?;
    let rows: Vec<VerdictRow> = samples
        .iter()
        .zip(&verdicts)
        .map(|(s, v)| VerdictRow {
            sample_id: &s.id,
            score: v.score,
            theta: v.theta,
            is_abnormal: v.is_abnormal,
        })
        .collect();
    if is_json(&a.out) {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json(&a.out, &rows)?;
    } else {
        let mut w = create_file(&a.out)?;
        let io = runtime_io(&a.out);
        writeln!(w, "sample_id,score,theta,is_abnormal").map_err(&io)?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", csv_field(r.sample_id), r.score, r.theta, r.is_abnormal).map_err(&io)?;
        }
        w.flush().map_err(&io)?;
    }
    let flagged = verdicts.iter().filter(|v| v.is_abnormal).count();
    println!("flagged {flagged} of {} samples (theta {:.6})", verdicts.len(), tm.theta);
    manifest.config = Some(ckpt.models.config.clone());
    manifest.outputs.push(a.out.clone());
    manifest.finish(&sidecar(&a.out))
}

fn eval(a: EvalArgs, argv: Vec<String>) -> Result<(), Failure> {
    let config = model_config(&a.model)?;
    if a.repeats < 2 {
        return Err(Failure::Usage(format!("--repeats must be at least 2, got {}", a.repeats)));
    }
    let mut manifest = RunManifest::start("eval", argv, Some(a.seed));
    manifest.inputs.push(a.data.clone());
    manifest.config = Some(config.clone());
    let ds = load_dataset(&a.data)?;
    let summary = monte_carlo(&ds, &config, a.repeats, a.seed, a.jobs.max(1))?;
    print!("{}", monte_carlo_table(&summary));
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let csv = dir.join("monte_carlo.csv");
        let json = dir.join("monte_carlo.json");
        write_with(&csv, |w| monte_carlo_csv(&summary, w))?;
        write_json(&json, &summary)?;
        manifest.outputs.extend([csv, json]);
        manifest.finish(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn grid(a: GridArgs, argv: Vec<String>) -> Result<(), Failure> {
    let config = model_config(&a.model)?;
    let mut manifest = RunManifest::start("grid", argv, Some(a.seed));
    manifest.inputs.push(a.data.clone());
    manifest.config = Some(config.clone());
    let ds = load_dataset(&a.data)?;
    let points = grid_search(&ds, &config, a.seed, a.jobs.max(1));
    create_dir(&a.out)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut blocks: Vec<usize> = points.iter().map(|p| p.n_blocks).collect();
    blocks.dedup();
    for b in blocks {
        let path = a.out.join(format!("surface_blocks{b}.csv"));
        let subset: Vec<_> = points.iter().filter(|p| p.n_blocks == b).cloned().collect();
        write_with(&path, |w| surface_csv(&subset, w))?;
        outputs.push(path);
    }
    let all_csv = a.out.join("surface.csv");
    write_with(&all_csv, |w| surface_csv(&points, w))?;
    let all_json = a.out.join("surface.json");
    write_json(&all_json, &points)?;
    outputs.extend([all_csv, all_json]);
    let failed = points.iter().filter(|p| p.error.is_some()).count();
    if failed > 0 {
        eprintln!("hpgan: {failed} of {} grid points failed and are left blank", points.len());
    }
    match best_point(&points) {
        Some(p) => {
            let best = a.out.join("best.json");
            write_json(&best, p)?;
            outputs.push(best);
            println!(
                "best: kernel {} blocks {} lr {} auroc {:.4} auprc {:.4}",
                p.kernel_size,
                p.n_blocks,
                p.learning_rate,
                p.auroc.unwrap_or(f64::NAN),
                p.auprc.unwrap_or(f64::NAN)
            );
        }
        None => return Err(Failure::Runtime("every grid point failed".into())),
    }
    manifest.outputs = outputs;
    manifest.finish(&a.out.join("manifest.json"))
}

fn ablate(a: AblateArgs, argv: Vec<String>) -> Result<(), Failure> {
    let config = model_config(&a.model)?;
    let mut manifest = RunManifest::start("ablate", argv, Some(a.seed));
    manifest.inputs.push(a.data.clone());
    manifest.config = Some(config.clone());
    let ds = load_dataset(&a.data)?;
    let rows = run_ablation_suite(&ds, &config, a.seed, a.jobs.max(1));
    create_dir(&a.out)?;
    let table = ablation_table(&rows);
    print!("{table}");
    let csv = a.out.join("ablation.csv");
    let json = a.out.join("ablation.json");
    let txt = a.out.join("ablation.txt");
    write_with(&csv, |w| ablation_csv(&rows, w))?;
    write_json(&json, &rows)?;
    write_text(&txt, &table)?;
    manifest.outputs.extend([csv, json, txt]);
    manifest.finish(&a.out.join("manifest.json"))?;
    if rows.iter().all(|r| r.report.is_none()) {
        return Err(Failure::Runtime("every ablation run failed".into()));
    }
    Ok(())
}
