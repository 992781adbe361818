//! Decoupled evaluation: class-balanced linear probes over frozen encoders,
//! task-by-task accuracy matrices, and a forgetting summary.
//!
//! The probe attaches to the encoder output, never the projector. Training
//! draws are class balanced per draw: first a class uniformly among classes
//! with samples, then an instance uniformly within it.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::augment::{view_seed, ImageSample};
use crate::data::Dataset;
use crate::engine::{BufferedExample, Scenario, SgdMomentum, TaskSequence};
use crate::error::{CoclError, Result};
use crate::losses::cross_entropy_loss;
use crate::model::ModelState;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which training pool feeds the probe after task `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbePool {
    /// Task `t` samples plus the buffer state after task `t`.
    LastTaskPlusBuffer,
    /// All samples of tasks `1..=t`.
    SeenTasks,
    /// Every task's samples, including future ones.
    AllTasks,
}

impl ProbePool {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "last-task-plus-buffer" | "last" => Ok(ProbePool::LastTaskPlusBuffer),
            "seen" | "seen-tasks" => Ok(ProbePool::SeenTasks),
            "all" | "all-tasks" => Ok(ProbePool::AllTasks),
            other => Err(CoclError::config(format!("unknown probe pool '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProbePool::LastTaskPlusBuffer => "last-task-plus-buffer",
            ProbePool::SeenTasks => "seen",
            ProbePool::AllTasks => "all",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiply the lr by `decay_factor` on reaching each of these epochs.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch: usize,
    pub pool: ProbePool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            decay_epochs: vec![60, 75, 90],
            decay_factor: 0.2,
            batch: 32,
            pool: ProbePool::LastTaskPlusBuffer,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.lr <= 0.0 {
            return Err(CoclError::config(
                "probe epochs, batch and lr must be positive",
            ));
        }
        if !(0.0 < self.decay_factor && self.decay_factor <= 1.0) {
            return Err(CoclError::config("probe decay factor outside (0, 1]"));
        }
        let mut prev = 0usize;
        for &e in &self.decay_epochs {
            if e <= prev && prev != 0 {
                return Err(CoclError::config("decay epochs must ascend"));
            }
            if e >= self.epochs {
                return Err(CoclError::config(format!(
                    "decay epoch {e} not below total epochs {}",
                    self.epochs
                )));
            }
            prev = e;
        }
        Ok(())
    }
}

/// Linear classifier over frozen encoder embeddings.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `embed_dim x k`
    pub weight: Tensor,
    pub bias: Tensor,
    /// Nominal class ids, ascending; column `j` scores `classes[j]`.
    pub classes: Vec<u32>,
}

/// Two-stage class-balanced draw: a uniform class among non-empty groups,
/// then a uniform member of it. Returns indices into the caller's pool.
pub fn class_balanced_sample(
    groups: &BTreeMap<u32, Vec<usize>>,
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    let live: Vec<&Vec<usize>> = groups.values().filter(|v| !v.is_empty()).collect();
    if live.len() < groups.len() {
        eprintln!(
            "warning: {} empty class group(s) excluded from balanced sampling",
            groups.len() - live.len()
        );
    }
    if live.is_empty() {
        return Err(CoclError::contract("no non-empty class groups"));
    }
    let g = live[rng.random_range(0..live.len())];
    Ok(g[rng.random_range(0..g.len())])
}

fn embed_pool(encoder: &ModelState, samples: &[&ImageSample]) -> Result<Tensor> {
    let dim = samples[0].pixels.len();
    let mut flat = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        flat.extend_from_slice(s.flat());
    }
    let x = Tensor::matrix(samples.len(), dim, flat)?;
    encoder.encode_eval(&x)
}

/// Train a linear probe on frozen embeddings with class-balanced draws.
/// The encoder is shared immutably; its parameters cannot change.
pub fn train_probe(
    encoder: &ModelState,
    pool: &[&ImageSample],
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(CoclError::config("probe pool is empty"));
    }
    let mut classes: Vec<u32> = pool.iter().map(|s| s.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let class_col: BTreeMap<u32, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        groups.entry(s.label).or_default().push(i);
    }

    let embeddings = embed_pool(encoder, pool)?;
    let embed_dim = embeddings.cols();
    let mut rng = ChaCha12Rng::seed_from_u64(view_seed(cfg.seed, 0, 0, 6));
    let bound = 1.0 / (embed_dim as f64).sqrt();
    let mut weight = Tensor::from_vec(
        vec![embed_dim, classes.len()],
        (0..embed_dim * classes.len())
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )?
    .with_grad();
    let mut bias = Tensor::vector(vec![0.0; classes.len()]).with_grad();

    let mut opt = SgdMomentum::new(0.9, 0.0);
    let mut lr = cfg.lr;
    let steps = pool.len().div_ceil(cfg.batch);
    for epoch in 0..cfg.epochs {
        if cfg.decay_epochs.contains(&epoch) {
            lr *= cfg.decay_factor;
        }
        for _ in 0..steps {
            let mut xb = Vec::with_capacity(cfg.batch * embed_dim);
            let mut targets = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let idx = class_balanced_sample(&groups, &mut rng)?;
                xb.extend_from_slice(embeddings.row(idx));
                targets.push(class_col[&pool[idx].label]);
            }
            let xt = Tensor::matrix(cfg.batch, embed_dim, xb)?;
            let mut tape = Tape::new();
            let xv = tape.constant(&xt);
            let wv = tape.leaf(&weight);
            let bv = tape.leaf(&bias);
            let lin = tape.matmul(xv, wv)?;
            let logits = tape.add_bias(lin, bv)?;
            let loss = cross_entropy_loss(&mut tape, logits, &targets)?;
            tape.backward(loss)?;
            if let Some(g) = tape.grad(wv) {
                weight.accumulate_grad(g)?;
            }
            if let Some(g) = tape.grad(bv) {
                bias.accumulate_grad(g)?;
            }
            opt.step(&mut [&mut weight, &mut bias], lr)?;
            weight.zero_grad();
            bias.zero_grad();
        }
    }
    Ok(LinearProbe {
        weight,
        bias,
        classes,
    })
}

/// Accuracy of a probe on a test split. Task-incremental evaluation restricts
/// the argmax to the task's classes and therefore requires them; class- and
/// domain-incremental evaluation take the argmax over every probe class.
pub fn evaluate(
    probe: &LinearProbe,
    encoder: &ModelState,
    test: &Dataset,
    scenario: Scenario,
    task_classes: Option<&[u32]>,
) -> Result<f64> {
    let allowed: Vec<usize> = match scenario {
        Scenario::TaskIl => {
            let classes = task_classes.ok_or_else(|| {
                CoclError::contract("task-incremental evaluation needs the task's classes")
            })?;
            let cols: Vec<usize> = classes
                .iter()
                .filter_map(|c| probe.classes.iter().position(|p| p == c))
                .collect();
            if cols.is_empty() {
                return Err(CoclError::contract(
                    "none of the task's classes are known to the probe",
                ));
            }
            cols
        }
        _ => {
            if task_classes.is_some() {
                return Err(CoclError::contract(
                    "task labels are not available at test time in this scenario",
                ));
            }
            (0..probe.classes.len()).collect()
        }
    };

    let samples: Vec<&ImageSample> = test.examples.iter().collect();
    let embeddings = embed_pool(encoder, &samples)?;
    let (n, d) = (embeddings.rows(), embeddings.cols());
    let k = probe.classes.len();
    let mut correct = 0usize;
    for (i, sample) in samples.iter().enumerate().take(n) {
        let row = embeddings.row(i);
        let mut best = (allowed[0], f64::NEG_INFINITY);
        for &j in &allowed {
            let mut score = probe.bias.data()[j];
            for (l, rv) in row.iter().enumerate().take(d) {
                score += rv * probe.weight.data()[l * k + j];
            }
            if score > best.1 {
                best = (j, score);
            }
        }
        if probe.classes[best.0] == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// The task-by-task accuracy grid: `entries[t_train][t_eval]` is the accuracy
/// on task `t_eval`'s test split of a probe trained after task `t_train`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub entries: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let t = self.size();
        if t < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..t {
            for j in 0..t {
                if i != j {
                    total += self.entries[i][j];
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    /// Mean accuracy of the final row: the usual end-of-training number.
    pub fn final_average(&self) -> f64 {
        let last = self.entries.last().expect("non-empty matrix");
        last.iter().sum::<f64>() / last.len() as f64
    }

    /// Mean of `a[T][t] - a[t][t]` over `t < T`; negative means forgetting.
    /// An auxiliary summary, not part of the core protocol.
    pub fn forgetting_mean(&self) -> f64 {
        let t = self.size();
        if t < 2 {
            return 0.0;
        }
        (0..t - 1)
            .map(|i| self.entries[t - 1][i] - self.entries[i][i])
            .sum::<f64>()
            / (t - 1) as f64
    }

    /// CSV with a header row/column of task indices.
    pub fn to_csv(&self) -> String {
        let t = self.size();
        let mut out = String::from("train\\eval");
        for j in 0..t {
            out.push_str(&format!(",task_{}", j + 1));
        }
        out.push('\n');
        for (i, row) in self.entries.iter().enumerate() {
            out.push_str(&format!("task_{}", i + 1));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Train one probe per snapshot over the chosen pool and fill its row.
pub fn accuracy_matrix(
    snapshots: &[crate::model::ReferenceSnapshot],
    seq: &TaskSequence,
    buffer_states: &[Vec<BufferedExample>],
    cfg: &ProbeConfig,
) -> Result<AccuracyMatrix> {
    if snapshots.len() != seq.len() {
        return Err(CoclError::contract(format!(
            "{} snapshots for {} tasks",
            snapshots.len(),
            seq.len()
        )));
    }
    if cfg.pool == ProbePool::LastTaskPlusBuffer && buffer_states.len() != seq.len() {
        return Err(CoclError::contract(
            "buffer states must cover every task boundary",
        ));
    }
    let t_count = seq.len();
    let mut entries = Vec::with_capacity(t_count);
    for t_train in 0..t_count {
        let mut pool: Vec<&ImageSample> = Vec::new();
        match cfg.pool {
            ProbePool::LastTaskPlusBuffer => {
                pool.extend(seq.tasks[t_train].train.examples.iter());
                // The buffer after task t still holds task-t samples too;
                // that duplication is harmless under balanced draws.
                pool.extend(buffer_states[t_train].iter().map(|b| &b.sample));
            }
            ProbePool::SeenTasks => {
                for task in &seq.tasks[..=t_train] {
                    pool.extend(task.train.examples.iter());
                }
            }
            ProbePool::AllTasks => {
                for task in &seq.tasks {
                    pool.extend(task.train.examples.iter());
                }
            }
        }
        let mut probe_cfg = cfg.clone();
        probe_cfg.seed = view_seed(cfg.seed, t_train as u64, 0, 7);
        let probe = train_probe(snapshots[t_train].model(), &pool, &probe_cfg)?;
        let mut row = Vec::with_capacity(t_count);
        for t_eval in 0..t_count {
            let task_classes = match seq.scenario {
                Scenario::TaskIl => Some(seq.tasks[t_eval].classes.as_slice()),
                _ => None,
            };
            // A task-restricted probe that has seen none of the task's
            // classes cannot score it at all; that matrix entry is zero.
            if let Some(classes) = task_classes {
                if !classes.iter().any(|c| probe.classes.contains(c)) {
                    row.push(0.0);
                    continue;
                }
            }
            row.push(evaluate(
                &probe,
                snapshots[t_train].model(),
                &seq.tasks[t_eval].test,
                seq.scenario,
                task_classes,
            )?);
        }
        entries.push(row);
    }
    Ok(AccuracyMatrix { entries })
}
