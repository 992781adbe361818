//! Shared test helpers: an independent scalar oracle for every loss and a
//! central finite-difference gradient checker.
//!
//! Compiled into several test binaries; not every binary uses every helper.
#![allow(dead_code)]

pub mod oracle;

use cocl_core::model::{ModelState, ModelVars};
use cocl_core::tape::{Tape, Var};

pub const FD_EPS: f64 = 1e-5;

/// Relative error with a floor so near-zero gradients compare sanely:
/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central finite differences of `f` at `x`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// Check a tape-built scalar loss against finite differences with respect to
/// every model parameter. `build` must construct the loss on the given tape
/// from the given model; it runs many times with perturbed parameter values.
pub fn model_gradcheck<F>(model: &ModelState, tol: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &ModelState, &ModelVars) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let loss = build(&mut tape, model, &vars);
    tape.backward(loss).expect("backward failed");
    // Parameters off the loss path (e.g. the projector under an
    // encoder-space loss) legitimately have no gradient: treat as zero.
    let analytic: Vec<Vec<f64>> = vars
        .vars()
        .iter()
        .map(|v| match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(*v).len()],
        })
        .collect();

    let eval_with = |param_idx: usize, elem: usize, delta: f64| -> f64 {
        let mut m = model.clone();
        {
            let mut params = m.params_mut();
            params[param_idx].data_mut()[elem] += delta;
        }
        let mut t = Tape::new();
        let vs = m.register(&mut t);
        let l = build(&mut t, &m, &vs);
        t.scalar_value(l)
    };

    let mut worst = 0.0f64;
    for (p, grads) in analytic.iter().enumerate() {
        for (e, analytic_g) in grads.iter().enumerate() {
            let plus = eval_with(p, e, FD_EPS);
            let minus = eval_with(p, e, -FD_EPS);
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let err = rel_err(*analytic_g, numeric);
            assert!(
                err < tol,
                "param {p} elem {e}: analytic {analytic_g} vs numeric {numeric} (rel err {err:.3e})"
            );
            worst = worst.max(err);
        }
    }
    worst
}

/// Deterministic pseudo-random stream for building test fixtures.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    /// Random unit-norm rows.
    pub fn unit_rows(&mut self, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let row: Vec<f64> = (0..d).map(|_| self.uniform()).collect();
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / norm.max(1e-9)).collect()
            })
            .collect()
    }
}

/// Flatten row-major.
pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}
