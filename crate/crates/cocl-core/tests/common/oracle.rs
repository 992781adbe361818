//! Naive scalar reference implementations of every loss, written directly
//! from the defining sums with plain loops. No code is shared with the crate
//! under test; these exist so the tape implementations can be checked against
//! an independent route.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Supervised contrastive loss with an explicit anchor set. For each anchor
/// `i`: `-1/|p_i| * sum_{j in p_i} log(exp(z_i.z_j / tau) / sum_{k != i} exp(z_i.z_k / tau))`.
pub fn supcon(z: &[Vec<f64>], labels: &[u32], anchors: &[bool], tau: f64) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        if !anchors[i] {
            continue;
        }
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        assert!(!positives.is_empty(), "oracle anchor {i} has no positives");
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for &j in &positives {
            inner += ((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
        }
        total += -inner / positives.len() as f64;
    }
    total
}

/// Instance-wise similarity vector of row `i`, self excluded, length n-1.
pub fn simvec(z: &[Vec<f64>], i: usize, temp: f64) -> Vec<f64> {
    let n = z.len();
    let mut denom = 0.0;
    for k in 0..n {
        if k != i {
            denom += (dot(&z[i], &z[k]) / temp).exp();
        }
    }
    (0..n)
        .filter(|&j| j != i)
        .map(|j| (dot(&z[i], &z[j]) / temp).exp() / denom)
        .collect()
}

/// `sum_i -p(x_i; past, k*) . log p(x_i; cur, k)`, entrywise over the n-1
/// off-diagonal entries.
pub fn ird(z_past: &[Vec<f64>], z_cur: &[Vec<f64>], kappa_star: f64, kappa: f64) -> f64 {
    let n = z_past.len();
    let mut total = 0.0;
    for i in 0..n {
        let p = simvec(z_past, i, kappa_star);
        let q = simvec(z_cur, i, kappa);
        for (pv, qv) in p.iter().zip(&q) {
            total += -pv * qv.ln();
        }
    }
    total
}

fn normalize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Relation distillation over row-normalized encoder embeddings.
pub fn seed(
    emb_teacher: &[Vec<f64>],
    emb_student: &[Vec<f64>],
    gamma_teacher: f64,
    gamma_student: f64,
) -> f64 {
    ird(
        &normalize(emb_teacher),
        &normalize(emb_student),
        gamma_teacher,
        gamma_student,
    )
}

/// `(1/n) sum_i sum_f (cur - past)^2`.
pub fn mse(cur: &[Vec<f64>], past: &[Vec<f64>]) -> f64 {
    let n = cur.len() as f64;
    let mut total = 0.0;
    for (c, p) in cur.iter().zip(past) {
        for (a, b) in c.iter().zip(p) {
            total += (a - b) * (a - b);
        }
    }
    total / n
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[t].exp() / denom).ln();
    }
    total / logits.len() as f64
}

/// Shannon entropy of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}
