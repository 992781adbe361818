//! Flat key-value experiment configuration with dotted sections.
//!
//! ```text
//! # comment
//! scenario = class-il
//! dataset.kind = synthetic
//! train.eta = 0.001
//! ```
//!
//! Unknown keys are rejected so typos surface instead of silently falling
//! back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cocl_core::augment::{AugConfig, BlurConfig};
use cocl_core::engine::{BufferCapacity, Scenario, TrainConfig};
use cocl_core::error::{CoclError, Result};
use cocl_core::eval::{ProbeConfig, ProbePool};
use cocl_core::losses::{ContrastiveMode, PreserveMode};
use cocl_core::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        size: usize,
        noise: f64,
        test_fraction: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        limit_per_class: Option<usize>,
    },
    Cifar10 {
        files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        limit_per_class: Option<usize>,
    },
}

/// Which objective the `run` verb trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Contrastive,
    /// Sequential softmax cross-entropy on a classifier head; the comparison
    /// arm for the decoupled-representation observation.
    Joint,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    /// Domain-incremental task count (rotations of the base dataset).
    pub domains: usize,
    pub classes_per_task: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub objective: Objective,
    /// Canonical text echoed into summaries; keys sorted, defaults filled.
    pub echo: BTreeMap<String, String>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoclError::config(format!("bad value '{v}' for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CoclError::config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CoclError::config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    from_map(kv)
}

pub fn from_map(kv: BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let mut known: Vec<&str> = vec![
        "scenario", "seed", "out_dir",
        "dataset.kind", "dataset.classes", "dataset.per_class", "dataset.size",
        "dataset.noise", "dataset.test_fraction", "dataset.images", "dataset.labels",
        "dataset.test_images", "dataset.test_labels", "dataset.files", "dataset.test_files",
        "dataset.limit_per_class", "dataset.domains",
        "split.classes_per_task",
        "model.hidden", "model.embed_dim", "model.proj_hidden", "model.proj_dim",
        "train.eta", "train.batch", "train.epochs_first", "train.epochs_later",
        "train.warmup_epochs", "train.tau", "train.kappa", "train.kappa_star",
        "train.lambda", "train.gamma_teacher", "train.gamma_student",
        "train.momentum", "train.weight_decay", "train.buffer", "train.preserve",
        "train.contrastive", "train.objective",
        "aug.crop_scale", "aug.flip_prob", "aug.jitter_prob", "aug.brightness",
        "aug.contrast", "aug.saturation", "aug.hue", "aug.grayscale_prob", "aug.blur",
        "probe.epochs", "probe.lr", "probe.batch", "probe.pool",
        "probe.decay_epochs", "probe.decay_factor",
    ];
    known.sort_unstable();
    for key in kv.keys() {
        if known.binary_search(&key.as_str()).is_err() {
            return Err(CoclError::config(format!("unknown config key '{key}'")));
        }
    }
    let get = |key: &str| kv.get(key).map(|s| s.as_str());
    let need = |key: &str| -> Result<&str> {
        get(key).ok_or_else(|| CoclError::config(format!("missing required key '{key}'")))
    };

    let scenario = Scenario::parse(get("scenario").unwrap_or("class-il"))?;
    let seed: u64 = parse_num("seed", get("seed").unwrap_or("0"))?;
    let out_dir = PathBuf::from(get("out_dir").unwrap_or("runs/out"));

    let kind = get("dataset.kind").unwrap_or("synthetic");
    let limit_per_class = match get("dataset.limit_per_class") {
        Some(v) => Some(parse_num::<usize>("dataset.limit_per_class", v)?),
        None => None,
    };
    let dataset = match kind {
        "synthetic" => DatasetSpec::Synthetic {
            classes: parse_num("dataset.classes", get("dataset.classes").unwrap_or("6"))?,
            per_class: parse_num("dataset.per_class", get("dataset.per_class").unwrap_or("60"))?,
            size: parse_num("dataset.size", get("dataset.size").unwrap_or("16"))?,
            noise: parse_num("dataset.noise", get("dataset.noise").unwrap_or("0.5"))?,
            test_fraction: parse_num(
                "dataset.test_fraction",
                get("dataset.test_fraction").unwrap_or("0.34"),
            )?,
        },
        "idx" => DatasetSpec::Idx {
            images: PathBuf::from(need("dataset.images")?),
            labels: PathBuf::from(need("dataset.labels")?),
            test_images: PathBuf::from(need("dataset.test_images")?),
            test_labels: PathBuf::from(need("dataset.test_labels")?),
            limit_per_class,
        },
        "cifar10" => DatasetSpec::Cifar10 {
            files: need("dataset.files")?.split(',').map(|s| PathBuf::from(s.trim())).collect(),
            test_files: need("dataset.test_files")?
                .split(',')
                .map(|s| PathBuf::from(s.trim()))
                .collect(),
            limit_per_class,
        },
        other => {
            return Err(CoclError::config(format!("unknown dataset.kind '{other}'")));
        }
    };
    let domains: usize = parse_num("dataset.domains", get("dataset.domains").unwrap_or("20"))?;
    let classes_per_task: usize = parse_num(
        "split.classes_per_task",
        get("split.classes_per_task").unwrap_or("2"),
    )?;

    // Model geometry. The input dimension is filled in from the data later.
    let model = ModelConfig {
        input_dim: 0,
        encoder_hidden: parse_list("model.hidden", get("model.hidden").unwrap_or("64"))?,
        embed_dim: parse_num("model.embed_dim", get("model.embed_dim").unwrap_or("16"))?,
        proj_hidden: parse_num("model.proj_hidden", get("model.proj_hidden").unwrap_or("32"))?,
        proj_dim: parse_num("model.proj_dim", get("model.proj_dim").unwrap_or("16"))?,
    };

    let crop: Vec<f64> = parse_list("aug.crop_scale", get("aug.crop_scale").unwrap_or("0.5,1.0"))?;
    if crop.len() != 2 {
        return Err(CoclError::config("aug.crop_scale needs 'lo,hi'"));
    }
    let mut aug = AugConfig::new((0, 0));
    aug.crop_scale = (crop[0], crop[1]);
    aug.flip_prob = parse_num("aug.flip_prob", get("aug.flip_prob").unwrap_or("0.5"))?;
    aug.jitter.prob = parse_num("aug.jitter_prob", get("aug.jitter_prob").unwrap_or("0.8"))?;
    aug.jitter.brightness = parse_num("aug.brightness", get("aug.brightness").unwrap_or("0.4"))?;
    aug.jitter.contrast = parse_num("aug.contrast", get("aug.contrast").unwrap_or("0.4"))?;
    aug.jitter.saturation = parse_num("aug.saturation", get("aug.saturation").unwrap_or("0.4"))?;
    aug.jitter.hue = parse_num("aug.hue", get("aug.hue").unwrap_or("0.1"))?;
    aug.grayscale_prob =
        parse_num("aug.grayscale_prob", get("aug.grayscale_prob").unwrap_or("0.2"))?;
    aug.blur = match get("aug.blur").unwrap_or("off") {
        "off" | "false" => None,
        "on" | "true" => Some(BlurConfig {
            sigma_range: (0.1, 2.0),
            prob: 0.5,
        }),
        other => {
            return Err(CoclError::config(format!("aug.blur must be on/off, got '{other}'")));
        }
    };

    let mut train = TrainConfig::new(aug);
    train.eta = parse_num("train.eta", get("train.eta").unwrap_or("0.001"))?;
    train.batch = parse_num("train.batch", get("train.batch").unwrap_or("16"))?;
    train.epochs_first =
        parse_num("train.epochs_first", get("train.epochs_first").unwrap_or("50"))?;
    train.epochs_later =
        parse_num("train.epochs_later", get("train.epochs_later").unwrap_or("20"))?;
    train.warmup_epochs =
        parse_num("train.warmup_epochs", get("train.warmup_epochs").unwrap_or("10"))?;
    train.momentum = parse_num("train.momentum", get("train.momentum").unwrap_or("0.9"))?;
    train.weight_decay =
        parse_num("train.weight_decay", get("train.weight_decay").unwrap_or("0.0001"))?;
    train.loss.tau = parse_num("train.tau", get("train.tau").unwrap_or("0.5"))?;
    train.loss.kappa = parse_num("train.kappa", get("train.kappa").unwrap_or("0.2"))?;
    train.loss.kappa_star =
        parse_num("train.kappa_star", get("train.kappa_star").unwrap_or("0.01"))?;
    train.loss.lambda = parse_num("train.lambda", get("train.lambda").unwrap_or("1.0"))?;
    train.loss.gamma_teacher =
        parse_num("train.gamma_teacher", get("train.gamma_teacher").unwrap_or("0.01"))?;
    train.loss.gamma_student =
        parse_num("train.gamma_student", get("train.gamma_student").unwrap_or("0.2"))?;
    train.buffer = BufferCapacity::parse(get("train.buffer").unwrap_or("60"))?;
    train.preserve = PreserveMode::parse(get("train.preserve").unwrap_or("ird"))?;
    train.contrastive = match get("train.contrastive").unwrap_or("asym") {
        "asym" => ContrastiveMode::Asymmetric,
        "sym" => ContrastiveMode::Symmetric,
        other => {
            return Err(CoclError::config(format!(
                "train.contrastive must be asym or sym, got '{other}'"
            )));
        }
    };
    train.seed = seed;
    let objective = match get("train.objective").unwrap_or("contrastive") {
        "contrastive" => Objective::Contrastive,
        "joint" => Objective::Joint,
        other => {
            return Err(CoclError::config(format!(
                "train.objective must be contrastive or joint, got '{other}'"
            )));
        }
    };

    let probe = ProbeConfig {
        epochs: parse_num("probe.epochs", get("probe.epochs").unwrap_or("100"))?,
        lr: parse_num("probe.lr", get("probe.lr").unwrap_or("0.2"))?,
        decay_epochs: parse_list(
            "probe.decay_epochs",
            get("probe.decay_epochs").unwrap_or("60,75,90"),
        )?,
        decay_factor: parse_num("probe.decay_factor", get("probe.decay_factor").unwrap_or("0.2"))?,
        batch: parse_num("probe.batch", get("probe.batch").unwrap_or("32"))?,
        pool: ProbePool::parse(get("probe.pool").unwrap_or("last-task-plus-buffer"))?,
        seed,
    };

    // Canonical echo: every key with its effective value.
    let mut echo = kv.clone();
    echo.entry("scenario".into()).or_insert_with(|| scenario.name().into());
    echo.entry("seed".into()).or_insert_with(|| seed.to_string());
    echo.entry("dataset.kind".into()).or_insert_with(|| kind.into());

    Ok(ExperimentConfig {
        scenario,
        seed,
        out_dir,
        dataset,
        domains,
        classes_per_task,
        model,
        train,
        probe,
        objective,
        echo,
    })
}

impl ExperimentConfig {
    /// Re-seed the run (CLI --seed override).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
        self.echo.insert("seed".into(), seed.to_string());
        self
    }

    pub fn with_out_dir(mut self, dir: PathBuf) -> Self {
        self.out_dir = dir;
        self
    }

    /// Deterministic run id from the canonical echo plus seed.
    pub fn run_id(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for (k, v) in &self.echo {
            for b in k.bytes().chain(std::iter::once(b'=')).chain(v.bytes()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h ^= self.seed;
        format!("{h:016x}")
    }
}
