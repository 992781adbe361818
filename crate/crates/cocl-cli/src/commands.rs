//! Command implementations: run, ablate, compare-preservation, eval-matrix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cocl_core::data::{
    load_cifar10_bin, load_idx, make_class_sequence, make_rotated_domains, split_train_test,
    synth_patterns, Dataset, Split, SplitPlan,
};
use cocl_core::engine::{
    metrics_csv, run_sequence, simulate_buffer_states, train_joint_baseline, BufferCapacity,
    BufferedExample, EpochMetrics, Scenario, TaskSequence,
};
use cocl_core::error::{CoclError, Result};
use cocl_core::eval::{accuracy_matrix, AccuracyMatrix, ProbePool};
use cocl_core::losses::{ContrastiveMode, PreserveMode};
use cocl_core::model::{ModelState, ReferenceSnapshot};

use crate::config::{DatasetSpec, ExperimentConfig, Objective};
use crate::output::{atomic_write, ensure_dir};

fn check_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(CoclError::config(format!(
            "dataset file not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn limit_per_class(d: Dataset, limit: Option<usize>, split: Split) -> Result<Dataset> {
    let Some(limit) = limit else { return Ok(d) };
    let mut kept = Vec::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for e in d.examples {
        let c = counts.entry(e.label).or_insert(0);
        if *c < limit {
            kept.push(e);
            *c += 1;
        }
    }
    Dataset::from_examples(kept, split)
}

/// Materialize train/test base datasets from the config.
fn load_base(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            per_class,
            size,
            noise,
            test_fraction,
        } => {
            let full = synth_patterns(*classes, *per_class, *size, *noise, cfg.seed)?;
            split_train_test(&full, *test_fraction, cfg.seed.wrapping_add(101))
        }
        DatasetSpec::Idx {
            images,
            labels,
            test_images,
            test_labels,
            limit_per_class: limit,
        } => {
            for p in [images, labels, test_images, test_labels] {
                check_exists(p)?;
            }
            let train = limit_per_class(load_idx(images, labels, Split::Train)?, *limit, Split::Train)?;
            let test =
                limit_per_class(load_idx(test_images, test_labels, Split::Test)?, *limit, Split::Test)?;
            Ok((train, test))
        }
        DatasetSpec::Cifar10 {
            files,
            test_files,
            limit_per_class: limit,
        } => {
            for p in files.iter().chain(test_files) {
                check_exists(p)?;
            }
            let train =
                limit_per_class(load_cifar10_bin(files, Split::Train)?, *limit, Split::Train)?;
            let test =
                limit_per_class(load_cifar10_bin(test_files, Split::Test)?, *limit, Split::Test)?;
            Ok((train, test))
        }
    }
}

/// Build the task sequence and fill in data-dependent model/augment fields.
pub fn prepare(cfg: &mut ExperimentConfig) -> Result<TaskSequence> {
    let (train, test) = load_base(cfg)?;
    let (_, h, w) = train.geometry();
    cfg.model.input_dim = train.input_dim();
    cfg.train.aug.target_size = (h, w);
    if let Ok(threads) = std::env::var("COCL_THREADS") {
        cfg.train.workers = threads
            .parse::<usize>()
            .map_err(|_| CoclError::config(format!("bad COCL_THREADS value '{threads}'")))?
            .max(1);
    }
    match cfg.scenario {
        Scenario::DomainIl => make_rotated_domains(&train, &test, cfg.domains, cfg.seed),
        scenario => make_class_sequence(
            &train,
            &test,
            &SplitPlan {
                classes_per_task: cfg.classes_per_task,
                order: None,
            },
            scenario,
        ),
    }
}

struct RunOutput {
    matrix: AccuracyMatrix,
    metrics: Vec<EpochMetrics>,
    buffer_counts: Vec<Vec<(u32, usize)>>,
    snapshots: Vec<ReferenceSnapshot>,
}

fn execute(cfg: &ExperimentConfig, seq: &TaskSequence) -> Result<RunOutput> {
    let (snapshots, metrics, buffer_states, buffer_counts) = match cfg.objective {
        Objective::Contrastive => {
            let result = run_sequence(seq, &cfg.model, &cfg.train)?;
            (
                result.snapshots,
                result.metrics,
                result.buffer_states,
                result.buffer_counts,
            )
        }
        Objective::Joint => {
            let result = train_joint_baseline(seq, &cfg.model, &cfg.train)?;
            // The joint arm has no training buffer; probe pools that want one
            // get the simulated auxiliary states.
            let states = simulate_buffer_states(seq, cfg.train.buffer, cfg.train.seed);
            let counts = states
                .iter()
                .map(|s| {
                    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                    for b in s {
                        *counts.entry(b.effective_label).or_insert(0) += 1;
                    }
                    counts.into_iter().collect()
                })
                .collect();
            (result.snapshots, result.metrics, states, counts)
        }
    };
    let matrix = accuracy_matrix(&snapshots, seq, &buffer_states, &cfg.probe)?;
    Ok(RunOutput {
        matrix,
        metrics,
        buffer_counts,
        snapshots,
    })
}

fn write_artifacts(cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    ensure_dir(&cfg.out_dir)?;
    let run_id = cfg.run_id();
    atomic_write(
        &cfg.out_dir.join("metrics.csv"),
        metrics_csv(&run_id, &out.metrics).as_bytes(),
    )?;
    atomic_write(
        &cfg.out_dir.join("accuracy_matrix.csv"),
        out.matrix.to_csv().as_bytes(),
    )?;

    let summary = crate::output::summary_json(cfg, &out.matrix, &out.buffer_counts, &run_id);
    atomic_write(&cfg.out_dir.join("summary.json"), summary.as_bytes())?;

    let ckpt_dir = cfg.out_dir.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    for (t, snap) in out.snapshots.iter().enumerate() {
        snap.model()
            .save_checkpoint(&ckpt_dir.join(format!("task_{:03}.bin", t + 1)))?;
    }
    Ok(())
}

pub fn run(mut cfg: ExperimentConfig) -> Result<()> {
    let seq = prepare(&mut cfg)?;
    let out = execute(&cfg, &seq)?;
    write_artifacts(&cfg, &out)?;
    println!(
        "run {}: final average accuracy {:.4} over {} tasks -> {}",
        cfg.run_id(),
        out.matrix.final_average(),
        seq.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

/// Grid selection for `ablate`.
pub enum GridSpec {
    /// The four-arm buffer/distillation grid.
    BufferIrd,
    /// Distillation-power sweep, each power with both contrastive modes.
    Lambda(Vec<f64>),
}

impl GridSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "buffer-ird" {
            return Ok(GridSpec::BufferIrd);
        }
        if let Some(rest) = s.strip_prefix("lambda:") {
            let values: Result<Vec<f64>> = rest
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CoclError::config(format!("bad lambda value '{v}'")))
                })
                .collect();
            let values = values?;
            if values.is_empty() {
                return Err(CoclError::config("empty lambda grid"));
            }
            return Ok(GridSpec::Lambda(values));
        }
        Err(CoclError::config(format!(
            "unknown grid '{s}' (expected 'buffer-ird' or 'lambda:v1,v2,...')"
        )))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One cell of an ablation/comparison table: run with overrides, probe, and
/// return the final average accuracy.
fn cell_accuracy(
    base: &ExperimentConfig,
    seed: u64,
    buffer: BufferCapacity,
    preserve: PreserveMode,
    contrastive: ContrastiveMode,
    lambda: f64,
) -> Result<f64> {
    let mut cfg = base.clone().with_seed(seed);
    cfg.train.buffer = buffer;
    cfg.train.preserve = preserve;
    cfg.train.contrastive = contrastive;
    cfg.train.loss.lambda = lambda;
    let seq = prepare(&mut cfg)?;
    let result = run_sequence(&seq, &cfg.model, &cfg.train)?;
    // Arms without a training buffer probe with an auxiliary buffer of the
    // configured capacity, keeping probe pools comparable across arms.
    let buffer_states: Vec<Vec<BufferedExample>> = if cfg.train.buffer == BufferCapacity::None
        && base.train.buffer != BufferCapacity::None
    {
        simulate_buffer_states(&seq, base.train.buffer, cfg.train.seed)
    } else {
        result.buffer_states.clone()
    };
    let matrix = accuracy_matrix(&result.snapshots, &seq, &buffer_states, &cfg.probe)?;
    Ok(matrix.final_average())
}

pub fn ablate(cfg: ExperimentConfig, grid: GridSpec, seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(CoclError::config("need at least one seed"));
    }
    let mut rows: Vec<String> = Vec::new();
    let header = "label,buffer,preserve,contrastive,lambda,seeds,mean_accuracy,std_accuracy";
    match grid {
        GridSpec::BufferIrd => {
            let m = match cfg.train.buffer {
                BufferCapacity::Bounded(m) => m,
                _ => {
                    return Err(CoclError::config(
                        "the buffer-ird grid needs a bounded train.buffer",
                    ));
                }
            };
            let arms = [
                ("a", BufferCapacity::None, PreserveMode::None, ContrastiveMode::Symmetric),
                ("b", BufferCapacity::None, PreserveMode::Ird, ContrastiveMode::Symmetric),
                ("c", BufferCapacity::Bounded(m), PreserveMode::None, ContrastiveMode::Asymmetric),
                ("d", BufferCapacity::Bounded(m), PreserveMode::Ird, ContrastiveMode::Asymmetric),
            ];
            for (label, buffer, preserve, mode) in arms {
                let mut accs = Vec::new();
                for s in 0..seeds {
                    accs.push(cell_accuracy(
                        &cfg,
                        cfg.seed + s,
                        buffer,
                        preserve,
                        mode,
                        cfg.train.loss.lambda,
                    )?);
                }
                let (mean, std) = mean_std(&accs);
                let buf_str = match buffer {
                    BufferCapacity::None => "0".to_string(),
                    BufferCapacity::Bounded(m) => m.to_string(),
                    BufferCapacity::Unbounded => "inf".to_string(),
                };
                rows.push(format!(
                    "{label},{buf_str},{},{},{},{seeds},{mean},{std}",
                    preserve.name(),
                    if mode == ContrastiveMode::Asymmetric { "asym" } else { "sym" },
                    cfg.train.loss.lambda,
                ));
            }
        }
        GridSpec::Lambda(values) => {
            for lambda in values {
                for mode in [ContrastiveMode::Symmetric, ContrastiveMode::Asymmetric] {
                    let preserve = if lambda == 0.0 { PreserveMode::None } else { PreserveMode::Ird };
                    let mut accs = Vec::new();
                    for s in 0..seeds {
                        accs.push(cell_accuracy(
                            &cfg,
                            cfg.seed + s,
                            cfg.train.buffer,
                            preserve,
                            mode,
                            lambda,
                        )?);
                    }
                    let (mean, std) = mean_std(&accs);
                    let buf_str = match cfg.train.buffer {
                        BufferCapacity::None => "0".to_string(),
                        BufferCapacity::Bounded(m) => m.to_string(),
                        BufferCapacity::Unbounded => "inf".to_string(),
                    };
                    let mode_str = if mode == ContrastiveMode::Asymmetric { "asym" } else { "sym" };
                    rows.push(format!(
                        "lambda_{lambda}_{mode_str},{buf_str},{},{mode_str},{lambda},{seeds},{mean},{std}",
                        preserve.name(),
                    ));
                }
            }
        }
    }
    ensure_dir(&cfg.out_dir)?;
    let table = format!("{header}\n{}\n", rows.join("\n"));
    atomic_write(&cfg.out_dir.join("ablation.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn compare_preservation(cfg: ExperimentConfig, seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(CoclError::config("need at least one seed"));
    }
    let modes = [
        PreserveMode::Ird,
        PreserveMode::Seed,
        PreserveMode::MseEmbedding,
        PreserveMode::MseProjection,
    ];
    let mut rows = Vec::new();
    for mode in modes {
        let mut accs = Vec::new();
        // Shared seed set across modes: a paired comparison.
        for s in 0..seeds {
            accs.push(cell_accuracy(
                &cfg,
                cfg.seed + s,
                cfg.train.buffer,
                mode,
                cfg.train.contrastive,
                cfg.train.loss.lambda,
            )?);
        }
        let (mean, std) = mean_std(&accs);
        rows.push(format!("{},{seeds},{mean},{std}", mode.name()));
    }
    ensure_dir(&cfg.out_dir)?;
    let table = format!("preserve,seeds,mean_accuracy,std_accuracy\n{}\n", rows.join("\n"));
    atomic_write(&cfg.out_dir.join("preservation.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Rebuild the sequence from the config, load per-task checkpoints from a run
/// directory, and emit the accuracy matrix for the chosen probe pool.
pub fn eval_matrix(mut cfg: ExperimentConfig, run_dir: PathBuf, pool: ProbePool) -> Result<()> {
    let seq = prepare(&mut cfg)?;
    let ckpt_dir = run_dir.join("checkpoints");
    let mut snapshots = Vec::new();
    for t in 0..seq.len() {
        let path = ckpt_dir.join(format!("task_{:03}.bin", t + 1));
        check_exists(&path)?;
        snapshots.push(ModelState::load_checkpoint(&path)?.snapshot());
    }
    let buffer_states = simulate_buffer_states(&seq, cfg.train.buffer, cfg.train.seed);
    let mut probe = cfg.probe.clone();
    probe.pool = pool;
    let matrix = accuracy_matrix(&snapshots, &seq, &buffer_states, &probe)?;
    let name = format!("accuracy_matrix_{}.csv", pool.name());
    atomic_write(&run_dir.join(&name), matrix.to_csv().as_bytes())?;
    print!("{}", matrix.to_csv());
    println!(
        "off-diagonal mean {:.4}, final average {:.4} -> {}",
        matrix.off_diagonal_mean(),
        matrix.final_average(),
        run_dir.join(&name).display()
    );
    Ok(())
}
