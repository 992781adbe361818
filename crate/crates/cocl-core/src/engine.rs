//! Task sequencing, replay buffer management and the training loop.
//!
//! One run walks an ordered task sequence: build the union of current-task
//! and buffered samples, train for the task's epoch budget on two-view
//! augmented batches under the compound loss, snapshot the model as the next
//! task's distillation reference, then rebalance the replay buffer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::augment::{augment_batch, view_seed, AugConfig, ImageSample};
use crate::data::Dataset;
use crate::error::{CoclError, Result};
use crate::losses::{
    total_loss, AugmentedBatch, ContrastiveMode, LossConfig, PreserveMode, TotalLossParts,
};
use crate::model::{ModelConfig, ModelState, ReferenceSnapshot};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Incremental-learning scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Disjoint class sets; the task id is available at test time.
    TaskIl,
    /// Disjoint class sets; no task id at test time.
    ClassIl,
    /// Same nominal classes in every task; samples from different tasks are
    /// treated as different classes inside the contrastive loss only.
    DomainIl,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "task-il" | "task_il" => Ok(Scenario::TaskIl),
            "class-il" | "class_il" => Ok(Scenario::ClassIl),
            "domain-il" | "domain_il" => Ok(Scenario::DomainIl),
            other => Err(CoclError::config(format!("unknown scenario '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::TaskIl => "task-il",
            Scenario::ClassIl => "class-il",
            Scenario::DomainIl => "domain-il",
        }
    }
}

/// One task: its train/test splits and nominal class set.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub train: Dataset,
    pub test: Dataset,
    /// Nominal class ids occurring in this task, ascending.
    pub classes: Vec<u32>,
    /// Rotation angle for domain-incremental tasks, radians.
    pub rotation: Option<f64>,
}

/// An ordered sequence of tasks under one scenario.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub scenario: Scenario,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Distinct nominal class ids across the whole sequence, ascending.
    pub fn nominal_classes(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self
            .tasks
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Label used inside loss construction and buffer grouping. Nominal for
    /// Task/Class-IL; task-qualified for Domain-IL so equal digits from
    /// different domains count as different classes.
    pub fn effective_label(&self, task_idx: usize, nominal: u32) -> u32 {
        match self.scenario {
            Scenario::DomainIl => {
                let span = self.nominal_classes().len() as u32;
                task_idx as u32 * span + nominal
            }
            _ => nominal,
        }
    }

    pub fn task_effective_classes(&self, task_idx: usize) -> Vec<u32> {
        self.tasks[task_idx]
            .classes
            .iter()
            .map(|c| self.effective_label(task_idx, *c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(CoclError::config("task sequence is empty"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.train.examples.is_empty() || t.test.examples.is_empty() {
                return Err(CoclError::config(format!("task {i} has an empty split")));
            }
        }
        match self.scenario {
            Scenario::TaskIl | Scenario::ClassIl => {
                for i in 0..self.tasks.len() {
                    for j in i + 1..self.tasks.len() {
                        if self.tasks[i]
                            .classes
                            .iter()
                            .any(|c| self.tasks[j].classes.contains(c))
                        {
                            return Err(CoclError::config(format!(
                                "tasks {i} and {j} share classes; class sets must be disjoint"
                            )));
                        }
                    }
                }
            }
            Scenario::DomainIl => {
                for (i, t) in self.tasks.iter().enumerate().skip(1) {
                    if t.classes != self.tasks[0].classes {
                        return Err(CoclError::config(format!(
                            "domain-incremental task {i} changes the class set"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Replay-buffer sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferCapacity {
    /// No rehearsal at all.
    None,
    Bounded(usize),
    /// Retain every past sample.
    Unbounded,
}

impl BufferCapacity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "0" | "none" => Ok(BufferCapacity::None),
            "inf" | "unbounded" => Ok(BufferCapacity::Unbounded),
            n => n
                .parse::<usize>()
                .map(|m| {
                    if m == 0 {
                        BufferCapacity::None
                    } else {
                        BufferCapacity::Bounded(m)
                    }
                })
                .map_err(|_| CoclError::config(format!("bad buffer capacity '{s}'"))),
        }
    }
}

/// A raw sample held for rehearsal, tagged with its origin task.
#[derive(Debug, Clone)]
pub struct BufferedExample {
    pub sample: ImageSample,
    pub task_idx: usize,
    pub effective_label: u32,
}

/// Fixed-capacity class-balanced store of raw past examples.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: BufferCapacity,
    groups: BTreeMap<u32, Vec<BufferedExample>>,
}

impl ReplayBuffer {
    pub fn new(capacity: BufferCapacity) -> Self {
        ReplayBuffer {
            capacity,
            groups: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> BufferCapacity {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (effective label, count) pairs, ascending by label.
    pub fn class_counts(&self) -> Vec<(u32, usize)> {
        self.groups
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (*k, v.len()))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferedExample> {
        self.groups.values().flatten()
    }

    pub fn snapshot_entries(&self) -> Vec<BufferedExample> {
        self.entries().cloned().collect()
    }

    /// End-of-task rebalance: push a uniform pick of the new task's samples
    /// and evict uniformly from stored classes so that every class seen so
    /// far holds floor(M/k) or ceil(M/k) entries.
    pub fn update(&mut self, incoming: &[BufferedExample], rng: &mut ChaCha12Rng) {
        match self.capacity {
            BufferCapacity::None => {}
            BufferCapacity::Unbounded => {
                for ex in incoming {
                    self.groups
                        .entry(ex.effective_label)
                        .or_default()
                        .push(ex.clone());
                }
            }
            BufferCapacity::Bounded(m) => {
                let mut incoming_by_class: BTreeMap<u32, Vec<&BufferedExample>> = BTreeMap::new();
                for ex in incoming {
                    incoming_by_class.entry(ex.effective_label).or_default().push(ex);
                }
                let mut classes: Vec<u32> = self
                    .groups
                    .keys()
                    .copied()
                    .chain(incoming_by_class.keys().copied())
                    .collect();
                classes.sort_unstable();
                classes.dedup();
                if classes.is_empty() {
                    return;
                }
                let k = classes.len();
                let base = m / k;
                let extra = m % k;
                // The classes receiving the +1 remainder are a uniform pick.
                let mut shuffled = classes.clone();
                shuffled.shuffle(rng);
                let bumped: Vec<u32> = shuffled.into_iter().take(extra).collect();

                for class in classes {
                    let quota = base + usize::from(bumped.contains(&class));
                    let have = self.groups.entry(class).or_default();
                    if have.len() > quota {
                        have.shuffle(rng);
                        have.truncate(quota);
                        have.sort_by_key(|e| (e.task_idx, e.sample.label));
                    } else if have.len() < quota {
                        if let Some(candidates) = incoming_by_class.get(&class) {
                            let mut idx: Vec<usize> = (0..candidates.len()).collect();
                            idx.shuffle(rng);
                            for i in idx.into_iter().take(quota - have.len()) {
                                have.push(candidates[i].clone());
                            }
                        }
                        // A class with fewer samples than its quota keeps all it has.
                    }
                }
            }
        }
    }
}

/// Hyperparameters of one continual training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch: usize,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub contrastive: ContrastiveMode,
    pub preserve: PreserveMode,
    pub buffer: BufferCapacity,
    pub aug: AugConfig,
    pub workers: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults; callers set `aug` target size to match the data.
    pub fn new(aug: AugConfig) -> Self {
        TrainConfig {
            eta: 0.1,
            batch: 16,
            epochs_first: 50,
            epochs_later: 20,
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossConfig::default(),
            contrastive: ContrastiveMode::Asymmetric,
            preserve: PreserveMode::Ird,
            buffer: BufferCapacity::Bounded(60),
            aug,
            workers: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || self.batch == 0 || self.epochs_first == 0 || self.epochs_later == 0 {
            return Err(CoclError::config(
                "eta, batch and epoch counts must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(CoclError::config("bad momentum or weight decay"));
        }
        if self.warmup_epochs == 0 {
            return Err(CoclError::config("warmup_epochs must be >= 1"));
        }
        self.loss.validate()?;
        self.aug.validate()
    }

    fn epochs_for_task(&self, task_idx: usize) -> usize {
        if task_idx == 0 {
            self.epochs_first
        } else {
            self.epochs_later
        }
    }
}

/// Linear warmup then cosine decay, restarted per task. When the task budget
/// leaves no room for the configured warmup the ramp compresses to
/// ceil(epochs/2).
pub fn lr_at(cfg: &TrainConfig, task_epochs: usize, epoch: usize) -> f64 {
    let warm = if task_epochs <= cfg.warmup_epochs {
        task_epochs.div_ceil(2).max(1)
    } else {
        cfg.warmup_epochs
    };
    if epoch < warm {
        cfg.eta * (epoch + 1) as f64 / warm as f64
    } else {
        let span = (task_epochs - warm) as f64;
        let pos = (epoch - warm) as f64;
        cfg.eta * 0.5 * (1.0 + (std::f64::consts::PI * pos / span).cos())
    }
}

/// SGD with momentum and decoupled-from-nothing weight decay:
/// `v <- m v + (g + wd w); w <- w - lr v`.
#[derive(Debug, Default)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(CoclError::contract(format!(
                "optimizer state holds {} tensors, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p
                .grad()
                .ok_or_else(|| CoclError::contract("sgd step with missing gradient"))?
                .to_vec();
            let w = p.data_mut();
            for i in 0..w.len() {
                v[i] = self.momentum * v[i] + (g[i] + self.weight_decay * w[i]);
                w[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Union of current-task samples and buffered samples, without oversampling.
/// Each entry is (sample, origin task).
pub fn build_task_dataset<'a>(
    current: &'a Dataset,
    current_task: usize,
    buffer: &'a ReplayBuffer,
) -> Result<Vec<(&'a ImageSample, usize)>> {
    let mut union: Vec<(&ImageSample, usize)> = current
        .examples
        .iter()
        .map(|s| (s, current_task))
        .collect();
    for ex in buffer.entries() {
        union.push((&ex.sample, ex.task_idx));
    }
    if union.is_empty() {
        return Err(CoclError::config("task dataset union is empty"));
    }
    Ok(union)
}

/// Draw `n` samples uniformly with replacement from the union, augment each
/// into two views, and assemble the batch. The anchor mask is true exactly
/// for views of current-task samples.
#[allow(clippy::too_many_arguments)]
pub fn make_batch(
    union: &[(&ImageSample, usize)],
    n: usize,
    seq: &TaskSequence,
    current_task: usize,
    cfg: &TrainConfig,
    epoch: usize,
    draw_base: u64,
    draw_rng: &mut ChaCha12Rng,
) -> Result<AugmentedBatch> {
    if n == 0 {
        return Err(CoclError::contract("batch size must be >= 1"));
    }
    let picks: Vec<usize> = (0..n)
        .map(|_| draw_rng.random_range(0..union.len()))
        .collect();
    // Seed stream key folds the task into the epoch word so draws never
    // collide across tasks.
    let epoch_key = ((current_task as u64) << 32) | epoch as u64;
    let items: Vec<(&ImageSample, u64)> = picks
        .iter()
        .enumerate()
        .map(|(k, &idx)| {
            (
                union[idx].0,
                view_seed(cfg.seed, epoch_key, draw_base + k as u64, 0),
            )
        })
        .collect();
    let views = augment_batch(&items, &cfg.aug, cfg.workers)?;

    let dim = views[0].0.pixels.len();
    let mut x = Vec::with_capacity(2 * n * dim);
    let mut labels = Vec::with_capacity(2 * n);
    let mut anchor_mask = Vec::with_capacity(2 * n);
    let mut origin = Vec::with_capacity(2 * n);
    for (k, (va, vb)) in views.iter().enumerate() {
        let (_, origin_task) = union[picks[k]];
        let eff = seq.effective_label(origin_task, va.label);
        let anchored = origin_task == current_task;
        for view in [va, vb] {
            x.extend_from_slice(view.flat());
            labels.push(eff);
            anchor_mask.push(anchored);
            origin.push(k);
        }
    }
    Ok(AugmentedBatch {
        x: Tensor::matrix(2 * n, dim, x)?,
        labels,
        anchor_mask,
        origin,
    })
}

/// Per-(task, epoch) loss means and learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub task: usize,
    pub epoch: usize,
    pub loss_contrast: f64,
    pub loss_preserve: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_CSV_HEADER: &str =
    "run_id,task,epoch,loss_asym,loss_preserve,loss_total,lr,wall_ms";

/// Serialize metrics in the run-artifact CSV schema. Float formatting is the
/// shortest round-trip form, so identical runs serialize byte-identically.
pub fn metrics_csv(run_id: &str, metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{run_id},{},{},{},{},{},{},{}\n",
            m.task, m.epoch, m.loss_contrast, m.loss_preserve, m.loss_total, m.lr, m.wall_ms
        ));
    }
    out
}

/// Train the model on one task for its epoch budget. The reference snapshot
/// is read-only throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut ModelState,
    seq: &TaskSequence,
    task_idx: usize,
    buffer: &ReplayBuffer,
    snapshot: Option<&ReferenceSnapshot>,
    cfg: &TrainConfig,
    opt: &mut SgdMomentum,
    metrics: &mut Vec<EpochMetrics>,
) -> Result<()> {
    let union = build_task_dataset(&seq.tasks[task_idx].train, task_idx, buffer)?;
    let epochs = cfg.epochs_for_task(task_idx);
    let steps = union.len().div_ceil(cfg.batch);
    let mut draw_rng = ChaCha12Rng::seed_from_u64(view_seed(cfg.seed, task_idx as u64, 0, 1));

    for epoch in 0..epochs {
        let lr = lr_at(cfg, epochs, epoch);
        let started = std::time::Instant::now();
        let mut sums = TotalLossParts {
            contrastive: 0.0,
            preserve: 0.0,
            total: 0.0,
        };
        for step in 0..steps {
            let batch = make_batch(
                &union,
                cfg.batch,
                seq,
                task_idx,
                cfg,
                epoch,
                (step * cfg.batch) as u64,
                &mut draw_rng,
            )?;
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let (loss, parts) = total_loss(
                &mut tape,
                model,
                &vars,
                snapshot,
                &batch,
                &cfg.loss,
                task_idx + 1,
                cfg.contrastive,
                cfg.preserve,
            )
            .map_err(|e| match e {
                CoclError::NonFinite(detail) => CoclError::Numeric {
                    task: task_idx + 1,
                    epoch,
                    detail,
                },
                other => other,
            })?;
            if !parts.total.is_finite() {
                return Err(CoclError::Numeric {
                    task: task_idx + 1,
                    epoch,
                    detail: format!("loss became {}", parts.total),
                });
            }
            tape.backward(loss)?;
            model.apply_tape_grads(&tape, &vars)?;
            opt.step(&mut model.params_mut(), lr)?;
            model.zero_grads();
            if !model.params_finite() {
                return Err(CoclError::Numeric {
                    task: task_idx + 1,
                    epoch,
                    detail: "parameters diverged to non-finite values".into(),
                });
            }
            sums.contrastive += parts.contrastive;
            sums.preserve += parts.preserve;
            sums.total += parts.total;
        }
        metrics.push(EpochMetrics {
            task: task_idx + 1,
            epoch,
            loss_contrast: sums.contrastive / steps as f64,
            loss_preserve: sums.preserve / steps as f64,
            loss_total: sums.total / steps as f64,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(())
}

/// Everything a finished run exposes to evaluation and reporting.
#[derive(Debug)]
pub struct RunResult {
    pub model: ModelState,
    pub snapshots: Vec<ReferenceSnapshot>,
    pub metrics: Vec<EpochMetrics>,
    /// Buffer contents recorded after each end-of-task update.
    pub buffer_states: Vec<Vec<BufferedExample>>,
    /// (effective label, count) per task boundary.
    pub buffer_counts: Vec<Vec<(u32, usize)>>,
}

/// Run the full task sequence: train, snapshot, rebalance buffer, repeat.
pub fn run_sequence(
    seq: &TaskSequence,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    seq.validate()?;
    cfg.validate()?;
    let mut model = ModelState::init(model_cfg.clone(), cfg.seed)?;
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let mut buffer = ReplayBuffer::new(cfg.buffer);
    let mut snapshots: Vec<ReferenceSnapshot> = Vec::new();
    let mut metrics = Vec::new();
    let mut buffer_states = Vec::new();
    let mut buffer_counts = Vec::new();

    for task_idx in 0..seq.len() {
        let reference = snapshots.last().cloned();
        train_task(
            &mut model,
            seq,
            task_idx,
            &buffer,
            reference.as_ref(),
            cfg,
            &mut opt,
            &mut metrics,
        )?;
        snapshots.push(model.snapshot());

        let incoming: Vec<BufferedExample> = seq.tasks[task_idx]
            .train
            .examples
            .iter()
            .map(|s| BufferedExample {
                sample: s.clone(),
                task_idx,
                effective_label: seq.effective_label(task_idx, s.label),
            })
            .collect();
        let mut buf_rng =
            ChaCha12Rng::seed_from_u64(view_seed(cfg.seed, task_idx as u64, 0, 2));
        buffer.update(&incoming, &mut buf_rng);
        buffer_states.push(buffer.snapshot_entries());
        buffer_counts.push(buffer.class_counts());
    }

    Ok(RunResult {
        model,
        snapshots,
        metrics,
        buffer_states,
        buffer_counts,
    })
}

/// Replay only the end-of-task buffer updates for a sequence, without any
/// training. Uses the same per-task seeding as [`run_sequence`], so for a
/// bounded-buffer run this reproduces its buffer states exactly; its main use
/// is giving no-buffer training arms an auxiliary buffer for probe training.
pub fn simulate_buffer_states(
    seq: &TaskSequence,
    capacity: BufferCapacity,
    seed: u64,
) -> Vec<Vec<BufferedExample>> {
    let mut buffer = ReplayBuffer::new(capacity);
    let mut states = Vec::with_capacity(seq.len());
    for task_idx in 0..seq.len() {
        let incoming: Vec<BufferedExample> = seq.tasks[task_idx]
            .train
            .examples
            .iter()
            .map(|s| BufferedExample {
                sample: s.clone(),
                task_idx,
                effective_label: seq.effective_label(task_idx, s.label),
            })
            .collect();
        let mut buf_rng = ChaCha12Rng::seed_from_u64(view_seed(seed, task_idx as u64, 0, 2));
        buffer.update(&incoming, &mut buf_rng);
        states.push(buffer.snapshot_entries());
    }
    states
}

/// Joint representation-classifier baseline: the same encoder trained
/// sequentially with softmax cross-entropy on a linear head, no buffer and no
/// distillation. Snapshots are taken at the same cadence for comparison.
pub struct JointResult {
    pub encoder: ModelState,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub snapshots: Vec<ReferenceSnapshot>,
    pub metrics: Vec<EpochMetrics>,
}

pub fn train_joint_baseline(
    seq: &TaskSequence,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<JointResult> {
    seq.validate()?;
    cfg.validate()?;
    let classes = seq.nominal_classes();
    let class_index: BTreeMap<u32, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    let mut model = ModelState::init(model_cfg.clone(), cfg.seed)?;
    let mut head_rng = ChaCha12Rng::seed_from_u64(view_seed(cfg.seed, 0, 0, 3));
    let bound = 1.0 / (model_cfg.embed_dim as f64).sqrt();
    let mut head_w = Tensor::from_vec(
        vec![model_cfg.embed_dim, classes.len()],
        (0..model_cfg.embed_dim * classes.len())
            .map(|_| head_rng.random_range(-bound..bound))
            .collect(),
    )?
    .with_grad();
    let mut head_b = Tensor::vector(
        (0..classes.len())
            .map(|_| head_rng.random_range(-bound..bound))
            .collect(),
    )
    .with_grad();

    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let mut snapshots = Vec::new();
    let mut metrics = Vec::new();

    for task_idx in 0..seq.len() {
        let task = &seq.tasks[task_idx];
        let epochs = cfg.epochs_for_task(task_idx);
        let steps = task.train.examples.len().div_ceil(cfg.batch);
        let mut draw_rng =
            ChaCha12Rng::seed_from_u64(view_seed(cfg.seed, task_idx as u64, 0, 4));
        for epoch in 0..epochs {
            let lr = lr_at(cfg, epochs, epoch);
            let started = std::time::Instant::now();
            let mut sum = 0.0;
            for step in 0..steps {
                let picks: Vec<&ImageSample> = (0..cfg.batch)
                    .map(|_| &task.train.examples[draw_rng.random_range(0..task.train.examples.len())])
                    .collect();
                // Single-view augmentation keeps data exposure comparable to
                // the contrastive arm.
                let epoch_key = ((task_idx as u64) << 32) | epoch as u64;
                let items: Vec<(&ImageSample, u64)> = picks
                    .iter()
                    .enumerate()
                    .map(|(k, s)| {
                        (*s, view_seed(cfg.seed, epoch_key, (step * cfg.batch + k) as u64, 5))
                    })
                    .collect();
                let views = augment_batch(&items, &cfg.aug, cfg.workers)?;
                let dim = views[0].0.pixels.len();
                let mut x = Vec::with_capacity(cfg.batch * dim);
                let mut targets = Vec::with_capacity(cfg.batch);
                for (va, _) in &views {
                    x.extend_from_slice(va.flat());
                    targets.push(class_index[&va.label]);
                }
                let xt = Tensor::matrix(cfg.batch, dim, x)?;

                let mut tape = Tape::new();
                let vars = model.register(&mut tape);
                let xv = tape.constant(&xt);
                let emb = model.encode(&mut tape, &vars, xv)?;
                let wv = tape.leaf(&head_w);
                let bv = tape.leaf(&head_b);
                let lin = tape.matmul(emb, wv)?;
                let logits = tape.add_bias(lin, bv)?;
                let loss = crate::losses::cross_entropy_loss(&mut tape, logits, &targets)?;
                let loss_val = tape.scalar_value(loss);
                if !loss_val.is_finite() {
                    return Err(CoclError::Numeric {
                        task: task_idx + 1,
                        epoch,
                        detail: format!("joint loss became {loss_val}"),
                    });
                }
                tape.backward(loss)?;
                model.apply_tape_grads(&tape, &vars)?;
                if let Some(g) = tape.grad(wv) {
                    head_w.accumulate_grad(g)?;
                }
                if let Some(g) = tape.grad(bv) {
                    head_b.accumulate_grad(g)?;
                }
                {
                    // The joint objective never touches the projector; step
                    // only the encoder and the classifier head.
                    let mut params = model.encoder_params_mut();
                    params.push(&mut head_w);
                    params.push(&mut head_b);
                    opt.step(&mut params, lr)?;
                }
                model.zero_grads();
                head_w.zero_grad();
                head_b.zero_grad();
                if !model.params_finite() {
                    return Err(CoclError::Numeric {
                        task: task_idx + 1,
                        epoch,
                        detail: "parameters diverged to non-finite values".into(),
                    });
                }
                sum += loss_val;
            }
            metrics.push(EpochMetrics {
                task: task_idx + 1,
                epoch,
                loss_contrast: sum / steps as f64,
                loss_preserve: 0.0,
                loss_total: sum / steps as f64,
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        snapshots.push(model.snapshot());
    }

    Ok(JointResult {
        encoder: model,
        head_weight: head_w,
        head_bias: head_b,
        snapshots,
        metrics,
    })
}
