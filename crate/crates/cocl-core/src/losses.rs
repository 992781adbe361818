//! The contrastive / distillation loss family.
//!
//! All losses are sums over anchors rather than batch means, and every
//! softmax-style ratio is computed in log space with per-row max subtraction:
//! the reference temperature for past-model similarities is 0.01, which puts
//! raw exponent arguments up to 100. Self-similarity is excluded by masking
//! entries out of the normalization, never by subtracting a constant from a
//! full-row sum.

use crate::error::{CoclError, Result};
use crate::model::{ModelState, ModelVars, ReferenceSnapshot};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Temperatures and weighting for the loss family.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Current-model relation-distillation temperature; fixed across tasks.
    pub kappa: f64,
    /// Past-model relation-distillation temperature; fixed across tasks.
    pub kappa_star: f64,
    /// Distillation power weighting the preservation term.
    pub lambda: f64,
    /// Teacher temperature for embedding-space distillation.
    pub gamma_teacher: f64,
    /// Student temperature for embedding-space distillation.
    pub gamma_student: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            kappa: 0.2,
            kappa_star: 0.01,
            lambda: 1.0,
            gamma_teacher: 0.01,
            gamma_student: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("kappa", self.kappa),
            ("kappa_star", self.kappa_star),
            ("gamma_teacher", self.gamma_teacher),
            ("gamma_student", self.gamma_student),
        ] {
            if v <= 0.0 || v.is_nan() {
                return Err(CoclError::config(format!(
                    "temperature {name} must be positive, got {v}"
                )));
            }
        }
        if self.lambda < 0.0 {
            return Err(CoclError::config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Which contrastive objective drives representation learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveMode {
    /// All rows act as anchors.
    Symmetric,
    /// Only current-task rows act as anchors; buffered rows are negatives only.
    Asymmetric,
}

/// Which preservation term accompanies the contrastive loss once `t > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreserveMode {
    None,
    /// Relation distillation on normalized projector outputs.
    Ird,
    /// Relation distillation on normalized encoder embeddings.
    Seed,
    /// Mean squared matching of encoder embeddings.
    MseEmbedding,
    /// Mean squared matching of raw projector outputs.
    MseProjection,
}

impl PreserveMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PreserveMode::None),
            "ird" => Ok(PreserveMode::Ird),
            "seed" => Ok(PreserveMode::Seed),
            "mse-emb" | "mse_emb" => Ok(PreserveMode::MseEmbedding),
            "mse-proj" | "mse_proj" => Ok(PreserveMode::MseProjection),
            other => Err(CoclError::config(format!(
                "unknown preservation mode '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PreserveMode::None => "none",
            PreserveMode::Ird => "ird",
            PreserveMode::Seed => "seed",
            PreserveMode::MseEmbedding => "mse-emb",
            PreserveMode::MseProjection => "mse-proj",
        }
    }
}

/// A two-view augmented batch ready for the forward pass: `2N` flattened
/// inputs where rows `2k` and `2k+1` are views of source sample `k`.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    /// `2N x input_dim`.
    pub x: Tensor,
    /// Effective class label per view.
    pub labels: Vec<u32>,
    /// True exactly for views of current-task samples (the anchor set).
    pub anchor_mask: Vec<bool>,
    /// Index of the source sample each view came from.
    pub origin: Vec<usize>,
}

impl AugmentedBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(CoclError::contract(format!(
                "augmented batch must have a positive even row count, got {n}"
            )));
        }
        if self.labels.len() != n || self.anchor_mask.len() != n || self.origin.len() != n {
            return Err(CoclError::contract(
                "labels/anchor_mask/origin length must equal batch rows",
            ));
        }
        for k in 0..n / 2 {
            let (a, b) = (2 * k, 2 * k + 1);
            if self.origin[a] != self.origin[b] {
                return Err(CoclError::contract(format!(
                    "views {a},{b} do not share an origin"
                )));
            }
            if self.labels[a] != self.labels[b] {
                return Err(CoclError::contract(format!(
                    "views {a},{b} share origin {} but not label",
                    self.origin[a]
                )));
            }
            if self.anchor_mask[a] != self.anchor_mask[b] {
                return Err(CoclError::contract(format!(
                    "anchor mask differs within origin pair {a},{b}"
                )));
            }
        }
        Ok(())
    }
}

/// Unit-norm projections of an augmented batch together with its metadata.
pub struct ContrastiveBatchView {
    pub z: Var,
    pub labels: Vec<u32>,
    pub anchor_mask: Vec<bool>,
    pub origin: Vec<usize>,
}

impl ContrastiveBatchView {
    pub fn new(
        tape: &Tape,
        z: Var,
        labels: Vec<u32>,
        anchor_mask: Vec<bool>,
        origin: Vec<usize>,
    ) -> Result<Self> {
        let shape = tape.shape(z);
        if shape.len() != 2 {
            return Err(CoclError::dimension(format!(
                "projection batch must be 2-d, got {shape:?}"
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        if labels.len() != n || anchor_mask.len() != n || origin.len() != n {
            return Err(CoclError::contract(
                "metadata length must equal projection rows",
            ));
        }
        let vals = tape.value(z);
        for i in 0..n {
            let norm: f64 = vals[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(CoclError::NonFinite(format!(
                    "projection row {i} has non-finite norm"
                )));
            }
            if (norm - 1.0).abs() > 1e-8 {
                return Err(CoclError::contract(format!(
                    "projection row {i} has norm {norm}, expected unit"
                )));
            }
        }
        for k in 0..n / 2 {
            let (a, b) = (2 * k, 2 * k + 1);
            if origin[a] != origin[b]
                || labels[a] != labels[b]
                || anchor_mask[a] != anchor_mask[b]
            {
                return Err(CoclError::contract(format!(
                    "origin pair {a},{b} must share origin, label and anchor mask"
                )));
            }
        }
        Ok(ContrastiveBatchView {
            z,
            labels,
            anchor_mask,
            origin,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Per-row max over off-diagonal entries; used as the detached log-space shift.
fn row_max_off_diagonal(vals: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    m = m.max(vals[i * n + j]);
                }
            }
            m
        })
        .collect()
}

/// Log-sum-exp over off-diagonal row entries of `scaled` (an on-tape `n x n`
/// similarity matrix), returning a length-`n` on-tape vector. The row max is
/// read from forward values and folded in as a constant.
fn lse_rows_off_diagonal(tape: &mut Tape, scaled: Var, n: usize) -> Result<Var> {
    let maxes = row_max_off_diagonal(tape.value(scaled), n);
    let max_mat = {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = maxes[i];
            }
        }
        Tensor::matrix(n, n, data).expect("square")
    };
    let off_diag = {
        let mut data = vec![1.0; n * n];
        for i in 0..n {
            data[i * n + i] = 0.0;
        }
        Tensor::matrix(n, n, data).expect("square")
    };
    let max_c = tape.constant(&max_mat);
    let mask_c = tape.constant(&off_diag);
    let shifted = tape.sub(scaled, max_c)?;
    let expv = tape.exp(shifted);
    let masked = tape.mul(expv, mask_c)?;
    let sums = tape.sum_axis(masked, 1)?;
    let logs = tape.log(sums)?;
    let max_vec = tape.constant(&Tensor::vector(maxes));
    tape.add(logs, max_vec)
}

fn scaled_similarities(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    let sim = tape.matmul_bt(z, z)?;
    Ok(tape.scale(sim, 1.0 / temperature))
}

/// Shared kernel: sum over anchor rows of `lse_i - (1/|p_i|) sum_{j in p_i} s_ij`.
fn supcon_kernel(
    tape: &mut Tape,
    view: &ContrastiveBatchView,
    tau: f64,
    anchors: &[bool],
) -> Result<Var> {
    let n = view.len();
    if n < 2 {
        return Err(CoclError::contract(format!(
            "contrastive batch needs at least 2 views, got {n}"
        )));
    }
    if tau <= 0.0 || tau.is_nan() {
        return Err(CoclError::config(format!("tau must be positive, got {tau}")));
    }

    // Positive weights: 1/|p_i| on same-label off-diagonal entries of anchor rows.
    let mut pos = vec![0.0; n * n];
    let mut anchor_ind = vec![0.0; n];
    for i in 0..n {
        if !anchors[i] {
            continue;
        }
        let mates: Vec<usize> = (0..n)
            .filter(|&j| j != i && view.labels[j] == view.labels[i])
            .collect();
        if mates.is_empty() {
            return Err(CoclError::contract(format!(
                "anchor {i} (label {}) has no positives in the batch",
                view.labels[i]
            )));
        }
        let w = 1.0 / mates.len() as f64;
        for j in mates {
            pos[i * n + j] = w;
        }
        anchor_ind[i] = 1.0;
    }

    let scaled = scaled_similarities(tape, view.z, tau)?;
    let lse = lse_rows_off_diagonal(tape, scaled, n)?;
    let pos_c = tape.constant(&Tensor::matrix(n, n, pos)?);
    let weighted = tape.mul(scaled, pos_c)?;
    let pos_mean = tape.sum_axis(weighted, 1)?;
    let per_anchor = tape.sub(lse, pos_mean)?;
    let ind_c = tape.constant(&Tensor::vector(anchor_ind));
    let masked = tape.mul(per_anchor, ind_c)?;
    Ok(tape.sum(masked))
}

/// Supervised contrastive loss: every view is an anchor.
pub fn supcon_loss(tape: &mut Tape, view: &ContrastiveBatchView, tau: f64) -> Result<Var> {
    let anchors = vec![true; view.len()];
    supcon_kernel(tape, view, tau, &anchors)
}

/// Asymmetric variant: the outer sum runs over current-task views only, while
/// every view still appears in the denominators. An empty anchor set yields
/// an exact zero.
pub fn asym_supcon_loss(tape: &mut Tape, view: &ContrastiveBatchView, tau: f64) -> Result<Var> {
    supcon_kernel(tape, view, tau, &view.anchor_mask.clone())
}

/// Normalized similarity of row `i` to every other row: a probability vector
/// of length `rows - 1` (self excluded), computed in log space.
pub fn similarity_vector(z: &Tensor, i: usize, temperature: f64) -> Result<Vec<f64>> {
    let n = z.rows();
    if z.shape().len() != 2 || n < 2 {
        return Err(CoclError::dimension(format!(
            "similarity_vector needs a 2-d tensor with >= 2 rows, got {:?}",
            z.shape()
        )));
    }
    if i >= n {
        return Err(CoclError::contract(format!("row {i} out of range for {n} rows")));
    }
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(CoclError::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let zi = z.row(i);
    let mut logits = Vec::with_capacity(n - 1);
    for j in 0..n {
        if j == i {
            continue;
        }
        let dot: f64 = zi.iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
        logits.push(dot / temperature);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

/// Full `n x n` teacher probability matrix (zero diagonal), each row the
/// similarity vector of that row. Forward-only; no gradients can flow back.
fn teacher_similarity_matrix(z: &Tensor, temperature: f64) -> Result<Tensor> {
    let n = z.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let p = similarity_vector(z, i, temperature)?;
        let mut idx = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            out[i * n + j] = p[idx];
            idx += 1;
        }
    }
    Tensor::matrix(n, n, out)
}

/// Cross-entropy between teacher similarity rows (a constant) and the
/// student's on-tape similarity rows:
/// `sum_i lse_i - sum_{i,j} P_ij s_ij`, using `sum_j P_ij = 1`.
fn relation_distillation(
    tape: &mut Tape,
    teacher_z: &Tensor,
    student_z: Var,
    teacher_temp: f64,
    student_temp: f64,
) -> Result<Var> {
    let n = teacher_z.rows();
    let shape = tape.shape(student_z).to_vec();
    if shape.len() != 2 || shape[0] != n {
        return Err(CoclError::dimension(format!(
            "teacher has {n} rows but student has shape {shape:?}"
        )));
    }
    if n < 2 {
        return Err(CoclError::contract(
            "relation distillation needs at least 2 rows",
        ));
    }
    let teacher_p = teacher_similarity_matrix(teacher_z, teacher_temp)?;
    let scaled = scaled_similarities(tape, student_z, student_temp)?;
    let lse = lse_rows_off_diagonal(tape, scaled, n)?;
    let total_lse = tape.sum(lse);
    let p_c = tape.constant(&teacher_p);
    let weighted = tape.mul(scaled, p_c)?;
    let total_weighted = tape.sum(weighted);
    tape.sub(total_lse, total_weighted)
}

/// Instance-wise relation distillation between a frozen past model's unit
/// projections and the current on-tape projections. Gradients flow only into
/// the current model.
pub fn ird_loss(
    tape: &mut Tape,
    z_past: &Tensor,
    z_cur: Var,
    kappa_star: f64,
    kappa: f64,
) -> Result<Var> {
    relation_distillation(tape, z_past, z_cur, kappa_star, kappa)
}

/// Relation distillation on encoder outputs: both sides are row-normalized
/// internally before similarities are taken.
pub fn seed_loss(
    tape: &mut Tape,
    emb_teacher: &Tensor,
    emb_student: Var,
    gamma_teacher: f64,
    gamma_student: f64,
) -> Result<Var> {
    let teacher_norm = normalize_rows(emb_teacher)?;
    let student_norm = tape.l2_normalize_rows(emb_student)?;
    relation_distillation(tape, &teacher_norm, student_norm, gamma_teacher, gamma_student)
}

fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let (n, d) = (t.rows(), t.cols());
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = t.row(i);
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < crate::tape::NORM_FLOOR {
            return Err(CoclError::Degenerate(format!(
                "row {i} has norm {norm:.3e}; cannot normalize"
            )));
        }
        for j in 0..d {
            out[i * d + j] = row[j] / norm;
        }
    }
    Tensor::matrix(n, d, out)
}

/// `(1/rows) * sum((cur - past)^2)`, `past` gradient-free.
fn mse_matching(tape: &mut Tape, cur: Var, past: &Tensor) -> Result<Var> {
    if tape.shape(cur) != past.shape() {
        return Err(CoclError::dimension(format!(
            "matching loss shapes differ: {:?} vs {:?}",
            tape.shape(cur),
            past.shape()
        )));
    }
    let rows = past.rows() as f64;
    let past_c = tape.constant(past);
    let diff = tape.sub(cur, past_c)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows))
}

/// Mean squared matching of current vs past encoder embeddings.
pub fn mse_embedding_loss(tape: &mut Tape, emb_cur: Var, emb_past: &Tensor) -> Result<Var> {
    mse_matching(tape, emb_cur, emb_past)
}

/// Mean squared matching of current vs past raw (unnormalized) projections.
pub fn mse_projection_loss(tape: &mut Tape, proj_cur: Var, proj_past: &Tensor) -> Result<Var> {
    mse_matching(tape, proj_cur, proj_past)
}

/// Mean softmax cross-entropy over a batch of logits.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(CoclError::dimension(format!(
            "logits must be 2-d, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(CoclError::contract(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|t| **t >= c) {
        return Err(CoclError::contract(format!(
            "target class {bad} out of range for {c} classes"
        )));
    }

    // Stable log-sum-exp over all classes, max as detached constant.
    let vals = tape.value(logits);
    let maxes: Vec<f64> = (0..n)
        .map(|i| vals[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut max_mat = vec![0.0; n * c];
    let mut onehot = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            max_mat[i * c + j] = maxes[i];
        }
        onehot[i * c + targets[i]] = 1.0;
    }
    let max_c = tape.constant(&Tensor::matrix(n, c, max_mat)?);
    let shifted = tape.sub(logits, max_c)?;
    let expv = tape.exp(shifted);
    let sums = tape.sum_axis(expv, 1)?;
    let logs = tape.log(sums)?;
    let max_vec = tape.constant(&Tensor::vector(maxes));
    let lse = tape.add(logs, max_vec)?;

    let hot_c = tape.constant(&Tensor::matrix(n, c, onehot)?);
    let picked = tape.mul(logits, hot_c)?;
    let target_logit = tape.sum_axis(picked, 1)?;
    let ce = tape.sub(lse, target_logit)?;
    let total = tape.sum(ce);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Component values of a compound loss, for metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLossParts {
    pub contrastive: f64,
    pub preserve: f64,
    pub total: f64,
}

/// The compound training objective: the contrastive term always, plus
/// `lambda` times the selected preservation term once `task_index > 1`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    model: &ModelState,
    vars: &ModelVars,
    snapshot: Option<&ReferenceSnapshot>,
    batch: &AugmentedBatch,
    cfg: &LossConfig,
    task_index: usize,
    contrastive: ContrastiveMode,
    preserve: PreserveMode,
) -> Result<(Var, TotalLossParts)> {
    cfg.validate()?;
    batch.validate()?;
    if task_index == 0 {
        return Err(CoclError::contract("task_index is 1-based"));
    }

    let x = tape.constant(&batch.x);
    let fwd = model.forward(tape, vars, x)?;
    let view = ContrastiveBatchView::new(
        tape,
        fwd.normalized,
        batch.labels.clone(),
        batch.anchor_mask.clone(),
        batch.origin.clone(),
    )?;
    let base = match contrastive {
        ContrastiveMode::Symmetric => supcon_loss(tape, &view, cfg.tau)?,
        ContrastiveMode::Asymmetric => asym_supcon_loss(tape, &view, cfg.tau)?,
    };
    let base_val = tape.scalar_value(base);

    let preserving = task_index > 1 && preserve != PreserveMode::None;
    if !preserving {
        return Ok((
            base,
            TotalLossParts {
                contrastive: base_val,
                preserve: 0.0,
                total: base_val,
            },
        ));
    }

    let snap = snapshot.ok_or_else(|| {
        CoclError::contract(format!(
            "task {task_index} > 1 requires a reference snapshot for {} preservation",
            preserve.name()
        ))
    })?;
    if cfg.lambda == 0.0 {
        return Ok((
            base,
            TotalLossParts {
                contrastive: base_val,
                preserve: 0.0,
                total: base_val,
            },
        ));
    }

    let term = match preserve {
        PreserveMode::Ird => {
            let z_past = snap.project_normalized_eval(&batch.x)?;
            ird_loss(tape, &z_past, fwd.normalized, cfg.kappa_star, cfg.kappa)?
        }
        PreserveMode::Seed => {
            let emb_past = snap.encode_eval(&batch.x)?;
            seed_loss(
                tape,
                &emb_past,
                fwd.embedding,
                cfg.gamma_teacher,
                cfg.gamma_student,
            )?
        }
        PreserveMode::MseEmbedding => {
            let emb_past = snap.encode_eval(&batch.x)?;
            mse_embedding_loss(tape, fwd.embedding, &emb_past)?
        }
        PreserveMode::MseProjection => {
            let (_, proj_past, _) = snap.forward_eval(&batch.x)?;
            mse_projection_loss(tape, fwd.projection, &proj_past)?
        }
        PreserveMode::None => unreachable!(),
    };
    let term_val = tape.scalar_value(term);
    let weighted = tape.scale(term, cfg.lambda);
    let total = tape.add(base, weighted)?;
    Ok((
        total,
        TotalLossParts {
            contrastive: base_val,
            preserve: term_val,
            total: tape.scalar_value(total),
        },
    ))
}
