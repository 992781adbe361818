//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations execute eagerly and record a node with the buffer ids they
//! touched. `backward` replays the nodes in reverse, accumulating
//! vector-Jacobian products. Every forward value lives in the tape arena, so
//! backward rules read saved inputs/outputs directly instead of carrying
//! closures.
//!
//! The tape is single-threaded; independent tapes may run on separate threads.

use crate::error::{CoclError, Result};
use crate::tensor::Tensor;

/// Handle to a value in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
struct Buf {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Buf {
    fn numel(&self) -> usize {
        self.data.len()
    }

    fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    /// out = a @ b
    Matmul { a: Var, b: Var, out: Var },
    /// out = a @ b^T
    MatmulBt { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    /// out[i, j] = x[i, j] + bias[j]
    AddBias { x: Var, bias: Var, out: Var },
    AddScalar { x: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    Neg { x: Var, out: Var },
    Exp { x: Var, out: Var },
    Log { x: Var, out: Var },
    Relu { x: Var, out: Var },
    Sum { x: Var, out: Var },
    Mean { x: Var, out: Var },
    SumAxis { x: Var, axis: usize, out: Var },
    MeanAxis { x: Var, axis: usize, out: Var },
    L2NormalizeRows { x: Var, out: Var },
}

/// Row norms below this floor are treated as degenerate rather than silently
/// regularized, so collapsing encoders surface in tests.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.bufs.push(Buf { shape, data });
        self.grads.push(None);
        Var(self.bufs.len() - 1)
    }

    /// Register a differentiable leaf. The tape clones the data; read the
    /// gradient back with [`Tape::grad`] after `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec())
    }

    /// Register a value that participates in the forward pass but whose
    /// gradient the caller will never read (teacher outputs, masks, inputs).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.bufs[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.bufs[v.0].shape.clone(), self.bufs[v.0].data.clone())
            .expect("tape buffers keep shape/data consistent")
    }

    /// Scalar forward value of `v`; panics if `v` is not scalar.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.bufs[v.0].numel(), 1, "scalar_value on non-scalar");
        self.bufs[v.0].data[0]
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn require_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let b = &self.bufs[v.0];
        if b.shape.len() != 2 {
            return Err(CoclError::dimension(format!(
                "{what} expects a 2-d tensor, got shape {:?}",
                b.shape
            )));
        }
        Ok((b.shape[0], b.shape[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d(a, "matmul lhs")?;
        let (k2, n) = self.require_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(CoclError::dimension(format!(
                "matmul inner dims disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.bufs[a.0].data;
            let bv = &self.bufs[b.0].data;
            for i in 0..m {
                for l in 0..k {
                    let x = av[i * k + l];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bb) in orow.iter_mut().zip(brow) {
                        *o += x * bb;
                    }
                }
            }
        }
        let v = self.push(vec![m, n], out);
        self.nodes.push(Node::Matmul { a, b, out: v });
        Ok(v)
    }

    /// `a @ b^T`; `a` is `m x k`, `b` is `n x k`. Used for similarity matrices.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d(a, "matmul_bt lhs")?;
        let (n, k2) = self.require_2d(b, "matmul_bt rhs")?;
        if k != k2 {
            return Err(CoclError::dimension(format!(
                "matmul_bt inner dims disagree: {m}x{k} vs {n}x{k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.bufs[a.0].data;
            let bv = &self.bufs[b.0].data;
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        let v = self.push(vec![m, n], out);
        self.nodes.push(Node::MatmulBt { a, b, out: v });
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.bufs[a.0].shape != self.bufs[b.0].shape {
            return Err(CoclError::dimension(format!(
                "{what} operands differ in shape: {:?} vs {:?}",
                self.bufs[a.0].shape, self.bufs[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let v = self.push(self.bufs[a.0].shape.clone(), data);
        self.nodes.push(Node::Add { a, b, out: v });
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let v = self.push(self.bufs[a.0].shape.clone(), data);
        self.nodes.push(Node::Sub { a, b, out: v });
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let v = self.push(self.bufs[a.0].shape.clone(), data);
        self.nodes.push(Node::Mul { a, b, out: v });
        Ok(v)
    }

    /// Add a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.require_2d(x, "add_bias input")?;
        if self.bufs[bias.0].shape != [n] {
            return Err(CoclError::dimension(format!(
                "bias shape {:?} does not match {n} columns",
                self.bufs[bias.0].shape
            )));
        }
        let mut data = self.bufs[x.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.bufs[bias.0].data[j];
            }
        }
        let v = self.push(vec![m, n], data);
        self.nodes.push(Node::AddBias { x, bias, out: v });
        Ok(v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self.bufs[x.0].data.iter().map(|v| v + c).collect();
        let v = self.push(self.bufs[x.0].shape.clone(), data);
        self.nodes.push(Node::AddScalar { x, out: v });
        v
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.bufs[x.0].data.iter().map(|v| v * c).collect();
        let v = self.push(self.bufs[x.0].shape.clone(), data);
        self.nodes.push(Node::Scale { x, c, out: v });
        v
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let data = self.bufs[x.0].data.iter().map(|v| -v).collect();
        let v = self.push(self.bufs[x.0].shape.clone(), data);
        self.nodes.push(Node::Neg { x, out: v });
        v
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.bufs[x.0].data.iter().map(|v| v.exp()).collect();
        let v = self.push(self.bufs[x.0].shape.clone(), data);
        self.nodes.push(Node::Exp { x, out: v });
        v
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.bufs[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(CoclError::Domain(format!(
                "log of non-positive value {bad}"
            )));
        }
        let data = self.bufs[x.0].data.iter().map(|v| v.ln()).collect();
        let v = self.push(self.bufs[x.0].shape.clone(), data);
        self.nodes.push(Node::Log { x, out: v });
        Ok(v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.bufs[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let v = self.push(self.bufs[x.0].shape.clone(), data);
        self.nodes.push(Node::Relu { x, out: v });
        v
    }

    /// Sum of all entries, producing a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.bufs[x.0].data.iter().sum();
        let v = self.push(vec![], vec![s]);
        self.nodes.push(Node::Sum { x, out: v });
        v
    }

    /// Mean of all entries, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.bufs[x.0].numel() as f64;
        let s: f64 = self.bufs[x.0].data.iter().sum();
        let v = self.push(vec![], vec![s / n]);
        self.nodes.push(Node::Mean { x, out: v });
        v
    }

    /// Reduce a 2-d tensor along `axis` (0 = over rows, 1 = over columns).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.require_2d(x, "sum_axis input")?;
        if axis > 1 {
            return Err(CoclError::dimension(format!(
                "axis {axis} invalid for a 2-d tensor"
            )));
        }
        let data = {
            let xv = &self.bufs[x.0].data;
            if axis == 0 {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += xv[i * n + j];
                    }
                }
                out
            } else {
                let mut out = vec![0.0; m];
                for i in 0..m {
                    out[i] = xv[i * n..(i + 1) * n].iter().sum();
                }
                out
            }
        };
        let len = data.len();
        let v = self.push(vec![len], data);
        self.nodes.push(Node::SumAxis { x, axis, out: v });
        Ok(v)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.require_2d(x, "mean_axis input")?;
        let denom = if axis == 0 { m } else { n } as f64;
        let summed = self.sum_axis(x, axis)?;
        // Replace the recorded SumAxis with a MeanAxis node so backward
        // divides by the reduced extent exactly once.
        self.nodes.pop();
        for v in &mut self.bufs[summed.0].data {
            *v /= denom;
        }
        self.nodes.push(Node::MeanAxis {
            x,
            axis,
            out: summed,
        });
        Ok(summed)
    }

    /// Normalize each row of an `m x n` tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_2d(x, "l2_normalize_rows input")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.bufs[x.0].data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(CoclError::NonFinite(format!(
                    "row {i} has non-finite norm {norm}"
                )));
            }
            if norm < NORM_FLOOR {
                return Err(CoclError::Degenerate(format!(
                    "row {i} has norm {norm:.3e}, below floor {NORM_FLOOR:.0e}"
                )));
            }
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let v = self.push(vec![m, n], data);
        self.nodes.push(Node::L2NormalizeRows { x, out: v });
        Ok(v)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into the
    /// tape's persistent buffers, so calling twice doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.bufs[loss.0].numel() != 1 {
            return Err(CoclError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.bufs[loss.0].shape
            )));
        }
        // Pass-local accumulators: reusing persistent state mid-sweep would
        // double-count contributions from earlier passes.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.bufs.len()];
        local[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let node = self.nodes[idx];
            self.backward_node(node, &mut local);
        }

        for (slot, fresh) in self.grads.iter_mut().zip(local) {
            if let Some(f) = fresh {
                match slot {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&f) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(f),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: Node, local: &mut [Option<Vec<f64>>]) {
        fn add_into(local: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
            match &mut local[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                None => local[v.0] = Some(contrib),
            }
        }

        let out_grad = |local: &[Option<Vec<f64>>], v: Var| local[v.0].clone();

        match node {
            Node::Matmul { a, b, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let (m, k) = (self.bufs[a.0].rows(), self.bufs[a.0].cols());
                let n = self.bufs[b.0].cols();
                let av = &self.bufs[a.0].data;
                let bv = &self.bufs[b.0].data;
                // dA = g @ B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[l * n + j];
                        }
                        ga[i * k + l] = acc;
                    }
                }
                // dB = A^T @ g
                let mut gb = vec![0.0; k * n];
                for l in 0..k {
                    for i in 0..m {
                        let x = av[i * k + l];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[l * n + j] += x * g[i * n + j];
                        }
                    }
                }
                add_into(local, a, ga);
                add_into(local, b, gb);
            }
            Node::MatmulBt { a, b, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let (m, k) = (self.bufs[a.0].rows(), self.bufs[a.0].cols());
                let n = self.bufs[b.0].rows();
                let av = &self.bufs[a.0].data;
                let bv = &self.bufs[b.0].data;
                // out = A B^T: dA = g @ B, dB = g^T @ A
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            ga[i * k + l] += gij * bv[j * k + l];
                        }
                    }
                }
                let mut gb = vec![0.0; n * k];
                for j in 0..n {
                    for i in 0..m {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            gb[j * k + l] += gij * av[i * k + l];
                        }
                    }
                }
                add_into(local, a, ga);
                add_into(local, b, gb);
            }
            Node::Add { a, b, out } => {
                let Some(g) = out_grad(local, out) else { return };
                add_into(local, a, g.clone());
                add_into(local, b, g);
            }
            Node::Sub { a, b, out } => {
                let Some(g) = out_grad(local, out) else { return };
                add_into(local, a, g.clone());
                add_into(local, b, g.iter().map(|v| -v).collect());
            }
            Node::Mul { a, b, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let ga = g
                    .iter()
                    .zip(&self.bufs[b.0].data)
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let gb = g
                    .iter()
                    .zip(&self.bufs[a.0].data)
                    .map(|(gv, av)| gv * av)
                    .collect();
                add_into(local, a, ga);
                add_into(local, b, gb);
            }
            Node::AddBias { x, bias, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let n = self.bufs[bias.0].numel();
                let m = self.bufs[x.0].rows();
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
                add_into(local, x, g);
                add_into(local, bias, gb);
            }
            Node::AddScalar { x, out } | Node::Neg { x, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let flip = matches!(node, Node::Neg { .. });
                add_into(
                    local,
                    x,
                    g.iter().map(|v| if flip { -v } else { *v }).collect(),
                );
            }
            Node::Scale { x, c, out } => {
                let Some(g) = out_grad(local, out) else { return };
                add_into(local, x, g.iter().map(|v| v * c).collect());
            }
            Node::Exp { x, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let gx = g
                    .iter()
                    .zip(&self.bufs[out.0].data)
                    .map(|(gv, ov)| gv * ov)
                    .collect();
                add_into(local, x, gx);
            }
            Node::Log { x, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let gx = g
                    .iter()
                    .zip(&self.bufs[x.0].data)
                    .map(|(gv, xv)| gv / xv)
                    .collect();
                add_into(local, x, gx);
            }
            Node::Relu { x, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let gx = g
                    .iter()
                    .zip(&self.bufs[x.0].data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(local, x, gx);
            }
            Node::Sum { x, out } => {
                let Some(g) = out_grad(local, out) else { return };
                add_into(local, x, vec![g[0]; self.bufs[x.0].numel()]);
            }
            Node::Mean { x, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let n = self.bufs[x.0].numel() as f64;
                add_into(local, x, vec![g[0] / n; self.bufs[x.0].numel()]);
            }
            Node::SumAxis { x, axis, out } | Node::MeanAxis { x, axis, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let (m, n) = (self.bufs[x.0].rows(), self.bufs[x.0].cols());
                let denom = match node {
                    Node::MeanAxis { .. } => (if axis == 0 { m } else { n }) as f64,
                    _ => 1.0,
                };
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = if axis == 0 { g[j] } else { g[i] };
                        gx[i * n + j] = gv / denom;
                    }
                }
                add_into(local, x, gx);
            }
            Node::L2NormalizeRows { x, out } => {
                let Some(g) = out_grad(local, out) else { return };
                let (m, n) = (self.bufs[x.0].rows(), self.bufs[x.0].cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &self.bufs[x.0].data[i * n..(i + 1) * n];
                    let y = &self.bufs[out.0].data[i * n..(i + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(&g[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum();
                    // d(v/|v|) pulls back as (g - y (y . g)) / |v|
                    for j in 0..n {
                        gx[i * n + j] = (g[i * n + j] - y[j] * dot) / norm;
                    }
                }
                add_into(local, x, gx);
            }
        }
    }
}
