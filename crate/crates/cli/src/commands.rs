use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use cola::clustering::TargetTable;
use cola::data::{save_dataset, save_grid, subsample_spc, LabeledImageSet};
use cola::generation::{GenEpoch, GenerationTrainer, LatentMode, LatentTable, LossKind, ReconstructionLoss};
use cola::metrics::{
    accuracy, align_clusters, cas_score, fid_cas_discrepancy, fid_score, synthesize, train_classifier, train_small_sample,
    ClassifierFeatures, FeatureExtractor, Flatten, Pca, Regime, RegimeResult,
};
use cola::nn::{Checkpoint, CheckpointMeta, ImageClassifier, ImageGenerator, Module};
use cola::pipeline::{
    initial_latents, new_generator, recluster, reconstruction_loss_for, run_posterior, run_step1, step1_purity, Method,
};
use cola::posterior::{generate_images, sample_codes, ClusterPosterior, SampleMode};
use cola::theory::{prop1_sweep, prop2_violations, threshold_series};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    load_checkpoint, read_csv, read_json, read_stamped, write_csv, write_json, write_report, Manifest, RunDir, Stamped,
};
use crate::config::{FeatureKind, Prop2Grid, RunConfig};
use crate::error::{CliError, Result};

pub fn cluster(cfg: &RunConfig, epochs: Option<usize>) -> Result<()> {
    match cfg.mode {
        Method::Scola => {
            return Err(CliError::Config(
                "Step I skipped in supervised mode: scola takes its class codes from labels, run `cola gen` directly".into(),
            ))
        }
        Method::Glo => {
            return Err(CliError::Config(
                "Step I is not part of the glo ablation, run `cola gen` directly".into(),
            ))
        }
        Method::Cola => {}
    }
    let mut cfg = cfg.clone();
    if let Some(e) = epochs {
        cfg.step1.clustering.optim.epochs = e;
    }
    let data = cfg.train_set()?;
    let hash = cfg.step1_hash();
    let run = RunDir::new(&cfg);
    let dir = run.stage("step1")?;
    info!(
        "step1: {} images, {} clusters, {} epochs",
        data.len(),
        data.class_count(),
        cfg.step1.clustering.optim.epochs
    );
    let out = run_step1(&data, &cfg.step1, cfg.seed, |e| {
        info!(
            "step1 epoch {:>4} assignment {:.5} rotation {:.5} rot-acc {:.3} reassigned {}",
            e.epoch, e.assignment_loss, e.rotation_loss, e.rotation_accuracy, e.reassigned
        )
    })?;
    let done = out.log.len() as u64;
    out.encoder.to_checkpoint(done, cfg.seed, &hash)?.save(dir.join("encoder.ckpt"))?;
    write_json(
        &dir.join("targets.json"),
        &Stamped {
            config_hash: hash.clone(),
            epoch: done,
            value: &out.targets,
        },
    )?;
    write_csv(&dir.join("log.csv"), &out.log)?;
    let purity = if cfg.is_toy() { Some(step1_purity(&data, &out.targets)?) } else { None };
    write_report(
        &dir.join("summary.json"),
        &serde_json::json!({
            "config_hash": hash,
            "epochs": done,
            "images": data.len(),
            "clusters": data.class_count(),
            "purity": purity,
        }),
    )?;
    write_json(&dir.join("manifest.json"), &Manifest::new("cluster", &cfg))?;
    if let Some(p) = purity {
        println!("purity {p:.4}");
    }
    println!("step1 artifacts in {}", dir.display());
    Ok(())
}

fn reconstruction_loss(cfg: &RunConfig, data: &LabeledImageSet) -> Result<ReconstructionLoss> {
    match cfg.loss {
        LossKind::Lap => Ok(reconstruction_loss_for(data, &cfg.step2)?),
        LossKind::Perceptual => {
            let path = cfg
                .extractor
                .as_ref()
                .ok_or_else(|| CliError::Config("perceptual loss needs `extractor`".into()))?;
            let ckpt = Checkpoint::load(path)?;
            let clf = ImageClassifier::from_checkpoint(&ckpt, DType::F32)?;
            if clf.spec().shape != data.shape() {
                return Err(CliError::Config(format!(
                    "extractor {} takes {} images, dataset holds {}",
                    path.display(),
                    clf.spec().shape,
                    data.shape()
                )));
            }
            Ok(ReconstructionLoss::Perceptual(Box::new(clf)))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Step2Summary {
    config_hash: String,
    mode: Method,
    epochs_done: usize,
    epochs_planned: usize,
    final_loss: Option<f64>,
    class_names: Vec<String>,
}

fn class_names(cfg: &RunConfig, data: &LabeledImageSet) -> Vec<String> {
    match cfg.mode {
        Method::Scola => data.class_names().to_vec(),
        _ => (0..data.class_count()).map(|c| format!("cluster-{c}")).collect(),
    }
}

fn step1_targets(cfg: &RunConfig, run: &RunDir, data: &LabeledImageSet) -> Result<Option<TargetTable>> {
    if cfg.mode != Method::Cola {
        return Ok(None);
    }
    let targets: TargetTable = read_stamped(&run.path("step1", "targets.json"), "cluster", &cfg.step1_hash())?.value;
    if targets.len() != data.len() {
        return Err(CliError::Config(format!(
            "step1 targets cover {} images, the dataset holds {}",
            targets.len(),
            data.len()
        )));
    }
    Ok(Some(targets))
}

pub fn gen(cfg: &RunConfig, epochs: Option<usize>, resume: bool, until: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(e) = epochs {
        cfg.step2.optim.epochs = e;
    }
    let data = cfg.train_set()?;
    let run = RunDir::new(&cfg);
    let hash = cfg.step2_hash();
    let targets = step1_targets(&cfg, &run, &data)?;
    let loss = reconstruction_loss(&cfg, &data)?;
    let dir = run.stage("step2")?;
    let (generator, mut table, mut trainer, mut rows) = if resume {
        let g = ImageGenerator::from_checkpoint(&load_checkpoint(&dir.join("generator.ckpt"), "gen", &hash)?, DType::F32)?;
        let t: Stamped<LatentTable> = read_stamped(&dir.join("latents.json"), "gen", &hash)?;
        let state = load_checkpoint(&dir.join("trainer.ckpt"), "gen", &hash)?;
        let mut tr = GenerationTrainer::new(&cfg.step2.optim, &t.value)?;
        tr.load_state(g.params(), &state.blocks)?;
        if t.epoch != tr.next_epoch() as u64 || state.meta.epoch != t.epoch {
            return Err(CliError::Core(cola::Error::Checkpoint(format!(
                "step2 artifacts disagree on the epoch count ({} vs {})",
                t.epoch,
                tr.next_epoch()
            ))));
        }
        let mut rows: Vec<GenEpoch> = read_csv(&dir.join("loss.csv"))?;
        rows.truncate(tr.next_epoch());
        info!("resuming step2 at epoch {}", tr.next_epoch());
        (g, t.value, tr, rows)
    } else {
        let t = initial_latents(&data, cfg.mode, targets.as_ref(), &cfg.step2, cfg.seed)?;
        let g = new_generator(&data, &cfg.step2, cfg.seed)?;
        let tr = GenerationTrainer::new(&cfg.step2.optim, &t)?;
        (g, t, tr, Vec::new())
    };
    let planned = cfg.step2.optim.epochs;
    let stop = until.unwrap_or(planned).min(planned);
    let start = trainer.next_epoch();
    info!("step2 ({:?}): {} images, epochs {start}..{stop} of {planned}", cfg.mode, data.len());
    let log = trainer.run(&data.without_labels(), &mut table, &generator, &loss, cfg.seed, stop, |e, _| {
        info!("step2 epoch {:>4} loss {:.6}", e.epoch, e.loss)
    })?;
    rows.extend(log);
    let done = trainer.next_epoch();
    if done >= planned && table.mode() == LatentMode::RandomSphere {
        recluster(&mut table, cfg.seed)?;
    }
    generator.to_checkpoint(done as u64, cfg.seed, &hash)?.save(dir.join("generator.ckpt"))?;
    Checkpoint {
        meta: CheckpointMeta {
            backbone: serde_json::json!({ "trainer": cfg.step2.optim }),
            epoch: done as u64,
            seed: cfg.seed,
            config_hash: hash.clone(),
        },
        blocks: trainer.state_blocks(generator.params())?,
    }
    .save(dir.join("trainer.ckpt"))?;
    write_json(
        &dir.join("latents.json"),
        &Stamped {
            config_hash: hash.clone(),
            epoch: done as u64,
            value: &table,
        },
    )?;
    write_csv(&dir.join("loss.csv"), &rows)?;
    let summary = Step2Summary {
        config_hash: hash,
        mode: cfg.mode,
        epochs_done: done,
        epochs_planned: planned,
        final_loss: rows.last().map(|r| r.loss),
        class_names: class_names(&cfg, &data),
    };
    write_report(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("manifest.json"), &Manifest::new("gen", &cfg))?;
    println!("step2 epochs {start}..{done} of {planned}; artifacts in {}", dir.display());
    Ok(())
}

struct Trained {
    generator: ImageGenerator,
    table: LatentTable,
    epoch: u64,
    summary: Step2Summary,
}

fn load_step2(cfg: &RunConfig, run: &RunDir) -> Result<Trained> {
    let hash = cfg.step2_hash();
    let ckpt = load_checkpoint(&run.path("step2", "generator.ckpt"), "gen", &hash)?;
    let generator = ImageGenerator::from_checkpoint(&ckpt, DType::F32)?;
    let table: Stamped<LatentTable> = read_stamped(&run.path("step2", "latents.json"), "gen", &hash)?;
    let summary: Step2Summary = read_json(&run.path("step2", "summary.json"), "gen")?;
    if table.epoch != ckpt.meta.epoch {
        return Err(CliError::Core(cola::Error::Checkpoint(
            "generator and latent table come from different epochs".into(),
        )));
    }
    if summary.epochs_done < summary.epochs_planned {
        warn!("generator trained for {} of {} epochs", summary.epochs_done, summary.epochs_planned);
    }
    Ok(Trained {
        generator,
        table: table.value,
        epoch: table.epoch,
        summary,
    })
}

/// Fitted once per (config, generator epoch) and cached on disk.
fn load_posterior(cfg: &RunConfig, run: &RunDir, trained: &Trained) -> Result<ClusterPosterior> {
    let hash = cfg.posterior_hash();
    let path = run.path("posterior", "posterior.json");
    if path.exists() {
        let cached: Stamped<ClusterPosterior> = read_json(&path, "sample")?;
        if cached.config_hash == hash && cached.epoch == trained.epoch {
            return Ok(cached.value);
        }
        info!("posterior cache is stale, refitting");
    }
    let post = run_posterior(&trained.table, &cfg.posterior)?;
    let dir = run.stage("posterior")?;
    write_json(
        &path,
        &Stamped {
            config_hash: hash,
            epoch: trained.epoch,
            value: &post,
        },
    )?;
    write_json(&dir.join("manifest.json"), &Manifest::new("posterior", cfg))?;
    Ok(post)
}

/// Renumbers clusters to agree with the training labels (evaluation only).
fn aligned_posterior(cfg: &RunConfig, trained: &Trained, post: ClusterPosterior, train: &LabeledImageSet) -> Result<ClusterPosterior> {
    if cfg.mode == Method::Scola {
        return Ok(post);
    }
    let labels = train.require_labels("cluster alignment")?;
    if labels.len() != trained.table.len() {
        return Err(CliError::Config("latent table and training set differ in size".into()));
    }
    let map = align_clusters(trained.table.membership(), labels, post.clusters.len())?;
    Ok(relabel(post, &map))
}

fn relabel(mut post: ClusterPosterior, map: &[usize]) -> ClusterPosterior {
    let mut slots: Vec<Option<_>> = vec![None; post.clusters.len()];
    for (c, g) in post.clusters.drain(..).enumerate() {
        slots[map[c]] = Some(g);
    }
    post.clusters = slots.into_iter().map(|g| g.expect("map is a permutation")).collect();
    post
}

pub fn sample(cfg: &RunConfig, n: Option<usize>, per_class: bool, out: Option<PathBuf>) -> Result<()> {
    let run = RunDir::new(cfg);
    let trained = load_step2(cfg, &run)?;
    let post = load_posterior(cfg, &run, &trained)?;
    let k = post.clusters.len();
    let n = n.unwrap_or(8 * k);
    let mode = if per_class { SampleMode::Balanced } else { SampleMode::Mixture };
    let sampled = sample_codes(&post, n, cfg.tau, mode, cfg.seed)?;
    let images = generate_images(&trained.generator, &sampled)?.with_class_names(trained.summary.class_names.clone())?;
    let out = out.unwrap_or_else(|| run.root().join("samples"));
    prepare_output(&out)?;
    save_dataset(&images, &out)?;
    let columns = images.indices_by_class()?.iter().map(Vec::len).max().unwrap_or(1).clamp(1, 32);
    save_grid(&images, columns, out.join("grid.png"))?;
    write_json(
        &out.join(MARKER),
        &serde_json::json!({ "config_hash": cfg.posterior_hash(), "n": n, "tau": cfg.tau, "seed": cfg.seed, "per_class": per_class }),
    )?;
    println!("{n} samples at tau {} in {}", cfg.tau, out.display());
    Ok(())
}

const MARKER: &str = "samples.json";

/// Replaces an earlier sample directory; refuses anything else that is not empty.
fn prepare_output(out: &Path) -> Result<()> {
    if out.exists() {
        let empty = fs::read_dir(out).map_err(|e| CliError::io(out, e))?.next().is_none();
        if out.join(MARKER).exists() {
            fs::remove_dir_all(out).map_err(|e| CliError::io(out, e))?;
        } else if !empty {
            return Err(CliError::Config(format!(
                "output directory {} exists and does not hold earlier samples",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn extractor(cfg: &RunConfig, oracle: ImageClassifier, reference: &LabeledImageSet) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match cfg.eval.features {
        FeatureKind::Classifier => Box::new(ClassifierFeatures(oracle)),
        FeatureKind::Pca => Box::new(Pca::fit(reference, cfg.eval.pca_components)?),
        FeatureKind::Pixels => Box::new(Flatten {
            dim: reference.shape().numel(),
        }),
    })
}

/// Classifier trained on the real training set; saved for reuse as a
/// perceptual extractor.
fn train_oracle(cfg: &RunConfig, run: &RunDir, train: &LabeledImageSet) -> Result<ImageClassifier> {
    let (oracle, _) = train_classifier(train, &cfg.classifier, cfg.seed.wrapping_add(50), None)?;
    let dir = run.stage("reports")?;
    oracle
        .to_checkpoint(cfg.classifier.optim.epochs as u64, cfg.seed, &cfg.full_hash())?
        .save(dir.join("oracle.ckpt"))?;
    Ok(oracle)
}

#[derive(Serialize)]
struct EvalReport {
    config_hash: String,
    mode: Method,
    generator_epochs: u64,
    tau: f64,
    samples: usize,
    features: FeatureKind,
    fid: f64,
    fid_per_repeat: Vec<f64>,
    cas: f64,
    real_accuracy: f64,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::new(cfg);
    let trained = load_step2(cfg, &run)?;
    let train = cfg.train_set()?;
    let test = cfg.test_set()?;
    let post = load_posterior(cfg, &run, &trained)?;
    let post = aligned_posterior(cfg, &trained, post, &train)?;
    let n = cfg.eval.samples.unwrap_or(train.len());
    let synthetic = synthesize(&trained.generator, &post, n, cfg.tau, cfg.seed)?;
    let oracle = train_oracle(cfg, &run, &train)?;
    let real_accuracy = accuracy(&oracle, &test)?;
    let fx = extractor(cfg, oracle, &test)?;
    let size = (cfg.eval.fid_repeats > 1).then_some(n.div_ceil(2));
    let fid = fid_score(&test, &synthetic, fx.as_ref(), cfg.eval.fid_repeats, size, cfg.seed)?;
    let cas = cas_score(&synthetic, &test, &cfg.classifier, cfg.seed)?;
    let report = EvalReport {
        config_hash: cfg.full_hash(),
        mode: cfg.mode,
        generator_epochs: trained.epoch,
        tau: cfg.tau,
        samples: n,
        features: cfg.eval.features,
        fid: fid.mean,
        fid_per_repeat: fid.per_repeat,
        cas: cas.accuracy,
        real_accuracy,
    };
    let dir = run.stage("reports")?;
    write_report(&dir.join("eval.json"), &report)?;
    write_json(&dir.join("eval-manifest.json"), &Manifest::new("eval", cfg))?;
    println!("{:<16}{:>12}", "metric", "value");
    println!("{:<16}{:>12.4}", "fid", report.fid);
    println!("{:<16}{:>12.4}", "cas", report.cas);
    println!("{:<16}{:>12.4}", "real accuracy", report.real_accuracy);
    Ok(())
}

/// Trains the configured method on `real` from scratch and draws a labeled
/// pool large enough for every regime.
fn synthetic_pool(cfg: &RunConfig, real: &LabeledImageSet, seed: u64) -> Result<LabeledImageSet> {
    let targets = match cfg.mode {
        Method::Cola => Some(run_step1(real, &cfg.step1, seed, |_| {})?.targets),
        _ => None,
    };
    let mut table = initial_latents(real, cfg.mode, targets.as_ref(), &cfg.step2, seed)?;
    let generator = new_generator(real, &cfg.step2, seed)?;
    let loss = reconstruction_loss(cfg, real)?;
    let mut trainer = GenerationTrainer::new(&cfg.step2.optim, &table)?;
    trainer.run(&real.without_labels(), &mut table, &generator, &loss, seed, cfg.step2.optim.epochs, |_, _| {})?;
    if table.mode() == LatentMode::RandomSphere {
        recluster(&mut table, seed)?;
    }
    let mut post = run_posterior(&table, &cfg.posterior)?;
    if cfg.mode != Method::Scola {
        let map = align_clusters(table.membership(), real.require_labels("cluster alignment")?, real.class_count())?;
        post = relabel(post, &map);
    }
    let r = cfg.eval.mix_ratio;
    let mix = (real.len() as f64 * (1.0 - r) / r).round() as usize;
    Ok(synthesize(&generator, &post, mix.max(real.len()), cfg.tau, seed)?)
}

#[derive(Serialize)]
struct RegimeSummary {
    regime: Regime,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct ClassifyReport {
    config_hash: String,
    mode: Method,
    spc: Option<usize>,
    mix_ratio: f64,
    rows: Vec<RegimeResult>,
    summary: Vec<RegimeSummary>,
}

pub fn classify(cfg: &RunConfig) -> Result<()> {
    let full = cfg.full_train_set()?;
    let test = cfg.test_set()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let real = match cfg.spc {
            Some(spc) => subsample_spc(&full, spc, seed)?,
            None => full.clone(),
        };
        info!("classify seed {seed}: training {:?} on {} real images", cfg.mode, real.len());
        let pool = synthetic_pool(cfg, &real, seed)?;
        for regime in Regime::ALL {
            let r = train_small_sample(&real, regime, Some(&pool), &test, &cfg.classifier, cfg.eval.mix_ratio, seed)?;
            info!("seed {seed} {:<9} accuracy {:.4}", regime.name(), r.accuracy);
            rows.push(r);
        }
    }
    let summary: Vec<RegimeSummary> = Regime::ALL
        .iter()
        .map(|&regime| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.regime == regime).map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&acc);
            RegimeSummary { regime, mean, std }
        })
        .collect();
    let report = ClassifyReport {
        config_hash: cfg.full_hash(),
        mode: cfg.mode,
        spc: cfg.spc,
        mix_ratio: cfg.eval.mix_ratio,
        rows,
        summary,
    };
    let run = RunDir::new(cfg);
    let dir = run.stage("reports")?;
    write_report(&dir.join("classify.json"), &report)?;
    write_csv(&dir.join("classify.csv"), &report.rows)?;
    write_json(&dir.join("classify-manifest.json"), &Manifest::new("classify", cfg))?;
    println!("{:<10}{:>6}{:>10}", "regime", "seed", "accuracy");
    for r in &report.rows {
        println!("{:<10}{:>6}{:>10.4}", r.regime.name(), r.seed, r.accuracy);
    }
    for s in &report.summary {
        println!("{:<10} {:.4} ± {:.4}", s.regime.name(), s.mean, s.std);
    }
    Ok(())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default)]
pub struct TheoryFlags {
    pub ms: Vec<u64>,
    pub deltas: Vec<f64>,
    pub var_x: Option<f64>,
    pub var_zs: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub trials: Option<usize>,
}

pub fn theory(cfg: &RunConfig, prop: u8, flags: &TheoryFlags) -> Result<()> {
    let run = RunDir::new(cfg);
    let dir = run.stage("reports")?;
    match prop {
        1 => {
            let mut grid = cfg.theory.prop1.clone();
            if !flags.ms.is_empty() {
                grid.ms = flags.ms.clone();
            }
            if !flags.deltas.is_empty() {
                grid.deltas = flags.deltas.clone();
            }
            if !flags.var_zs.is_empty() {
                grid.var_zs = flags.var_zs.clone();
            }
            if let Some(v) = flags.var_x {
                grid.var_x = v;
            }
            if let Some(t) = flags.trials {
                grid.trials = t;
            }
            let rows = prop1_sweep(&grid)?;
            write_csv(&dir.join("theory-prop1.csv"), &rows)?;
            write_report(&dir.join("theory-prop1-series.json"), &threshold_series(&rows))?;
            let feasible = rows.iter().filter(|r| r.threshold.is_some()).count();
            let exact_bad = rows.iter().filter(|r| r.exact_holds == Some(false)).count();
            let mc_bad = rows.iter().filter(|r| r.mc_holds == Some(false)).count();
            write_report(
                &dir.join("theory-prop1.json"),
                &serde_json::json!({
                    "grid": grid,
                    "points": rows.len(),
                    "feasible": feasible,
                    "exact_violations": exact_bad,
                    "monte_carlo_violations": mc_bad,
                }),
            )?;
            println!("{:>6}{:>8}{:>8}{:>10}{:>12}{:>12}{:>8}", "m", "var_z", "delta", "n*", "err_x", "err_z", "holds");
            for r in &rows {
                let n = r.threshold.map_or("-".to_string(), |n| n.to_string());
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
                let holds = match (r.exact_holds, r.mc_holds) {
                    (Some(e), Some(m)) => (e && m).to_string(),
                    _ => "-".into(),
                };
                println!(
                    "{:>6}{:>8}{:>8}{:>10}{:>12}{:>12}{:>8}",
                    r.m,
                    r.var_z,
                    r.delta,
                    n,
                    fmt(r.err_x),
                    fmt(r.err_z),
                    holds
                );
            }
            println!("{feasible}/{} feasible points, {exact_bad} exact and {mc_bad} Monte-Carlo violations", rows.len());
        }
        2 => {
            let mut grid = cfg.theory.prop2.clone();
            if !flags.ms.is_empty() {
                grid.ms = flags.ms.clone();
            }
            if !flags.epsilons.is_empty() {
                grid.epsilons = flags.epsilons.clone();
            }
            let points = grid.points();
            let (rows, bad) = prop2_violations(&points)?;
            write_csv(&dir.join("theory-prop2.csv"), &rows)?;
            write_report(
                &dir.join("theory-prop2.json"),
                &serde_json::json!({ "grid": grid, "points": rows.len(), "violations": bad }),
            )?;
            print_prop2(&grid, &rows);
            println!("{} points, {bad} violations", rows.len());
        }
        other => return Err(CliError::Config(format!("--prop must be 1 or 2, got {other}"))),
    }
    write_json(&dir.join(format!("theory-prop{prop}-manifest.json")), &Manifest::new("theory", cfg))?;
    Ok(())
}

/// Threshold table at the largest gap per `(m, ε)`.
fn print_prop2(grid: &Prop2Grid, rows: &[cola::theory::Prop2Point]) {
    println!("{:>6}{:>8}{:>8}{:>10}{:>14}{:>14}", "m", "eps", "delta", "n", "B(X)", "B(Z)");
    let steps = grid.delta_steps.max(1) as usize;
    for r in rows.chunks(steps).filter_map(|c| c.last()) {
        println!(
            "{:>6}{:>8}{:>8.4}{:>10}{:>14.6e}{:>14.6e}",
            r.m, r.epsilon, r.delta, r.n, r.bound_x, r.bound_z
        );
    }
}

pub fn demo(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::new(cfg);
    let trained = load_step2(cfg, &run)?;
    let train = cfg.train_set()?;
    let test = cfg.test_set()?;
    let post = load_posterior(cfg, &run, &trained)?;
    let post = aligned_posterior(cfg, &trained, post, &train)?;
    let oracle = train_oracle(cfg, &run, &train)?;
    let fx = extractor(cfg, oracle, &test)?;
    let size = cfg.eval.samples.unwrap_or(train.len());
    let report = fid_cas_discrepancy(
        &trained.generator,
        &post,
        size,
        &test,
        fx.as_ref(),
        &cfg.classifier,
        cfg.eval.tau_conc,
        cfg.eval.tau_sparse,
        cfg.seed,
    )?;
    let dir = run.stage("reports")?;
    write_report(
        &dir.join("demo.json"),
        &serde_json::json!({
            "config_hash": cfg.full_hash(),
            "features": cfg.eval.features,
            "samples": size,
            "report": report,
            "cas_gap": report.cas_gap(),
            "relative_fid_gap": report.relative_fid_gap(),
        }),
    )?;
    write_json(&dir.join("demo-manifest.json"), &Manifest::new("demo", cfg))?;
    println!("{:<14}{:>10}{:>10}", "", "fid", "cas");
    println!("{:<14}{:>10.4}{:>10.4}", format!("tau={}", report.tau_conc), report.fid_conc, report.cas_conc);
    println!("{:<14}{:>10.4}{:>10.4}", format!("tau={}", report.tau_sparse), report.fid_sparse, report.cas_sparse);
    println!(
        "cas gap {:.4}, relative fid gap {:.4}",
        report.cas_gap(),
        report.relative_fid_gap()
    );
    Ok(())
}
