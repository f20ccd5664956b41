//! The `train`, `continual` and `prune` subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use mpcl_core::continual::{run_continual, ContinualRun, Progress, TaskRecord};
use mpcl_core::data::{
    fingerprint_file, load_idx, norm_stats, normalize_with, permute_tasks, split_tasks,
    synthetic_tasks, NormStats,
};
use mpcl_core::prune::{prune_sweep, uncertainty_cdf};
use mpcl_core::report::{
    cdf_csv, history_csv, prune_csv, results_csv, unix_time, write_atomic, write_json,
    DataFingerprint, Manifest,
};
use mpcl_core::train::{evaluate, train_task, History, TaskData};
use mpcl_core::{
    Architecture, Checkpoint, KLWeights, LayerSpec, LearningRates, MPModel, Method, PriorStore,
    SeededRng, TaskSequence,
};

use crate::config::{DatasetConfig, ExperimentConfig, TaskSpec};

/// Tasks plus what the manifest records about where they came from.
pub struct PreparedData {
    pub tasks: TaskSequence,
    pub fingerprints: Vec<DataFingerprint>,
    pub normalization: Option<NormStats>,
}

/// Loads or generates the task sequence. IDX inputs are normalised with
/// the training file's statistics, which are then applied to the test file.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { spec } => Ok(PreparedData {
            tasks: synthetic_tasks(spec, cfg.seed)?,
            fingerprints: vec![],
            normalization: None,
        }),
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            val_frac,
            tasks,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            let stats = norm_stats(&train)?;
            let train = normalize_with(&train, stats);
            let test = normalize_with(&test, stats);
            let seq = match tasks {
                TaskSpec::Split { partition } => {
                    split_tasks(&train, &test, partition, *val_frac, cfg.seed)?
                }
                TaskSpec::Permuted { n_tasks } => {
                    permute_tasks(&train, &test, *n_tasks, *val_frac, cfg.seed)?
                }
            };
            let mut fingerprints = Vec::new();
            for p in [train_images, train_labels, test_images, test_labels] {
                fingerprints.push(DataFingerprint {
                    path: p.display().to_string(),
                    sha256: fingerprint_file(p)?,
                });
            }
            Ok(PreparedData {
                tasks: seq,
                fingerprints,
                normalization: Some(stats),
            })
        }
    }
}

/// Architecture for `tasks`: the configured trunk and one head per task.
pub fn build_architecture(cfg: &ExperimentConfig, tasks: &TaskSequence) -> Result<Architecture> {
    let input_shape = tasks.tasks[0].train.sample_shape().to_vec();
    let classes = tasks.classes_per_task();
    let arch = match (&cfg.model.hidden, &cfg.model.trunk) {
        (_, Some(trunk)) => {
            let mut shape = input_shape.clone();
            for (i, spec) in trunk.iter().enumerate() {
                shape = spec
                    .output_shape(&shape)
                    .with_context(|| format!("model.trunk[{i}]"))?;
            }
            if shape.len() != 1 && cfg.model.heads.is_none() {
                bail!("model.trunk: ends in shape {shape:?}; default heads need a flat feature vector");
            }
            let width = shape.iter().product();
            let heads = classes
                .iter()
                .map(|&k| {
                    vec![
                        LayerSpec::Linear {
                            in_features: width,
                            out_features: k,
                        },
                        LayerSpec::SoftmaxHead {
                            var_floor: mpcl_core::moments::DEFAULT_VAR_FLOOR,
                        },
                    ]
                })
                .collect();
            Architecture {
                input_shape,
                trunk: trunk.clone(),
                heads,
            }
        }
        (hidden, None) => {
            Architecture::mlp(&input_shape, hidden.as_deref().unwrap_or(&[]), &classes)
        }
    };
    let arch = match &cfg.model.heads {
        Some(h) => {
            if h.len() != tasks.len() {
                bail!("model.heads: {} heads for {} tasks", h.len(), tasks.len());
            }
            Architecture {
                heads: h.clone(),
                ..arch
            }
        }
        None => arch,
    };
    arch.validate().context("model")?;
    Ok(arch)
}

fn manifest(
    command: &str,
    cfg: &ExperimentConfig,
    data: &PreparedData,
    started_at: u64,
) -> Result<Manifest> {
    Ok(Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        data: data.fingerprints.clone(),
        normalization: data.normalization,
        started_at,
        finished_at: started_at,
        partial: true,
        completed_tasks: 0,
        replayed_data: false,
        error: None,
    })
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_accuracy: f64,
    test_accuracy: f64,
    epochs_run: usize,
    stopped_early: bool,
}

/// Trains one model on a single-task dataset.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<History> {
    create_out(out)?;
    let started = unix_time();
    let data = prepare_data(cfg)?;
    if data.tasks.len() != 1 {
        bail!(
            "train needs a single-task dataset, got {} tasks (use `continual`)",
            data.tasks.len()
        );
    }
    let mut m = manifest("train", cfg, &data, started)?;
    write_json(&out.join("manifest.json"), &m)?;

    let arch = build_architecture(cfg, &data.tasks)?;
    let cl = cfg.cl_config();
    cl.validate()?;
    let mut model = MPModel::new(arch, cl.rho_init, &mut SeededRng::new(cfg.seed).fork(0))?;
    let alpha = LearningRates::uniform(&model, cl.alpha0());
    let weights = KLWeights::uniform(model.layout().total, cl.tau0);
    let prior = PriorStore::standard_normal(model.layout());
    let task = &data.tasks.tasks[0];
    let tc = mpcl_core::TrainConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cl.train.clone()
    };
    let result = train_task(
        &mut model,
        &[TaskData {
            task: 0,
            train: &task.train,
            val: &task.val,
        }],
        &prior,
        &weights,
        &alpha,
        &tc,
    );
    let history = match result {
        Ok(h) => h,
        Err(e) => {
            m.error = Some(e.to_string());
            m.finished_at = unix_time();
            write_json(&out.join("manifest.json"), &m)?;
            return Err(e.into());
        }
    };
    write_atomic(
        &out.join("history.csv"),
        history_csv(&[(0, &history)]).as_bytes(),
    )?;
    Checkpoint {
        model: model.clone(),
        prior: Some(prior),
        alpha: Some(alpha),
        weights: Some(weights),
    }
    .save(&out.join("model.ckpt"))?;
    let summary = TrainSummary {
        best_epoch: history.best_epoch,
        best_val_accuracy: history.best_val_accuracy,
        test_accuracy: evaluate(&model, &task.test, 0)?,
        epochs_run: history.epochs.len(),
        stopped_early: history.stopped_early,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "trained {} epochs: val {:.4} (epoch {}), test {:.4}",
        summary.epochs_run, summary.best_val_accuracy, summary.best_epoch, summary.test_accuracy
    );
    m.partial = false;
    m.completed_tasks = 1;
    m.finished_at = unix_time();
    write_json(&out.join("manifest.json"), &m)?;
    Ok(history)
}

/// Outcome of `continual`, also printed as ACC/BWT.
#[derive(Debug)]
pub struct ContinualOutcome {
    pub run: ContinualRun,
    pub acc: f64,
    pub bwt: f64,
}

/// Checkpoint written after the first task; the usual input to `prune`.
pub const FIRST_TASK_CHECKPOINT: &str = "model_task0.ckpt";

/// Runs the configured method over the task sequence. Results, histories
/// and per-task records are rewritten after every task, so an aborted run
/// leaves its completed rows on disk.
pub fn cmd_continual(cfg: &ExperimentConfig, out: &Path) -> Result<ContinualOutcome> {
    create_out(out)?;
    let started = unix_time();
    let data = prepare_data(cfg)?;
    let mut m = manifest("continual", cfg, &data, started)?;
    m.replayed_data = cfg.method.method == Method::Jt && data.tasks.len() > 1;
    write_json(&out.join("manifest.json"), &m)?;
    let arch = build_architecture(cfg, &data.tasks)?;
    let cl = cfg.cl_config();
    std::fs::create_dir_all(out.join("tasks"))
        .with_context(|| format!("creating {}", out.join("tasks").display()))?;

    let mut records: Vec<TaskRecord> = Vec::new();
    let persist = |records: &[TaskRecord], m: &Manifest| -> mpcl_core::Result<()> {
        let last = records.last().expect("at least one task");
        write_atomic(
            &out.join("results.csv"),
            results_csv(&last.results).as_bytes(),
        )?;
        let hs: Vec<(usize, &History)> = records.iter().map(|r| (r.task, &r.history)).collect();
        write_atomic(&out.join("history.csv"), history_csv(&hs).as_bytes())?;
        write_json(
            &out.join("tasks").join(format!("task_{}.json", last.task)),
            last,
        )?;
        write_json(&out.join("manifest.json"), m)
    };
    let result = run_continual(&arch, &data.tasks, &cl, |p: &Progress| {
        records.push(p.record.clone());
        if p.record.task == 0 {
            Checkpoint {
                model: p.model.clone(),
                prior: Some(p.prior.clone()),
                alpha: Some(p.alpha.clone()),
                weights: Some(p.weights.clone()),
            }
            .save(&out.join(FIRST_TASK_CHECKPOINT))?;
        }
        m.completed_tasks = records.len();
        m.finished_at = unix_time();
        persist(&records, &m)
    });
    let run = match result {
        Ok(run) => run,
        Err(aborted) => {
            m.error = Some(aborted.to_string());
            m.finished_at = unix_time();
            if let Some(partial) = &aborted.partial {
                write_atomic(
                    &out.join("results.csv"),
                    results_csv(&partial.results.prefix(partial.records.len())).as_bytes(),
                )?;
            }
            write_json(&out.join("manifest.json"), &m)?;
            return Err(anyhow::Error::new(aborted)
                .context("continual run aborted; completed tasks are on disk"));
        }
    };
    Checkpoint {
        model: run.model.clone(),
        prior: Some(run.prior.clone()),
        alpha: Some(run.alpha.clone()),
        weights: Some(run.weights.clone()),
    }
    .save(&out.join("model_final.ckpt"))?;
    let acc = run.results.acc()?;
    let bwt = run.results.bwt()?;
    println!(
        "{:?}: ACC {:.2}% BWT {:+.2}%",
        cl.method,
        100.0 * acc,
        100.0 * bwt
    );
    m.partial = false;
    m.finished_at = unix_time();
    write_json(&out.join("manifest.json"), &m)?;
    Ok(ContinualOutcome { run, acc, bwt })
}

/// Pruning sweep and uncertainty CDFs for a saved model, scored on the
/// validation split of `prune.task`.
pub fn cmd_prune(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    create_out(out)?;
    let started = unix_time();
    let ck = Checkpoint::load(checkpoint)?;
    let data = prepare_data(cfg)?;
    let mut m = manifest("prune", cfg, &data, started)?;
    m.data.push(DataFingerprint {
        path: checkpoint.display().to_string(),
        sha256: fingerprint_file(checkpoint)?,
    });
    let task = cfg.prune.task;
    let Some(t) = data.tasks.tasks.get(task) else {
        bail!(
            "prune.task: {task} outside the {} configured tasks",
            data.tasks.len()
        );
    };
    if ck.model.architecture().input_shape != t.val.sample_shape() {
        bail!(
            "checkpoint expects inputs {:?}, dataset has {:?}",
            ck.model.architecture().input_shape,
            t.val.sample_shape()
        );
    }
    let curves = prune_sweep(
        &ck.model,
        &cfg.prune.criteria,
        &cfg.prune.fractions,
        &t.val,
        task,
    )?;
    write_atomic(&out.join("prune_curves.csv"), prune_csv(&curves).as_bytes())?;
    let cdfs: Vec<_> = cfg
        .prune
        .cdf
        .iter()
        .map(|&c| (c, uncertainty_cdf(&ck.model, c)))
        .collect();
    write_atomic(&out.join("cdf.csv"), cdf_csv(&cdfs).as_bytes())?;
    for c in &curves {
        let drops: Vec<String> = c
            .fractions
            .iter()
            .zip(&c.accuracy_drop)
            .map(|(f, d)| format!("{f}:{d:.2}"))
            .collect();
        println!(
            "{:>10} drop (points) {}",
            c.criterion.name(),
            drops.join(" ")
        );
    }
    m.partial = false;
    m.completed_tasks = data.tasks.len();
    m.finished_at = unix_time();
    write_json(&out.join("manifest.json"), &m)?;
    Ok(())
}

/// Output directory: `--out` if given, else the config's `out`.
pub fn output_dir(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cli_out
        .or_else(|| cfg.out.clone())
        .context("no output directory: pass --out or set `out` in the config")
}
