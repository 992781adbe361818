//! Encoder/projector MLP and frozen reference snapshots.
//!
//! The encoder maps flattened inputs to an embedding; the 2-layer projector
//! maps embeddings to the projection space whose row-normalized outputs feed
//! every contrastive and distillation loss. A [`ReferenceSnapshot`] is a deep
//! copy of the parameters taken at a task boundary; it only exposes forward
//! evaluation, so later training can never leak gradients into it.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoclError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl ModelConfig {
    /// Default desk-scale architecture: encoder input -> 256 -> 128 with ReLU,
    /// 2-layer projector 128 -> 128 -> 64.
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            encoder_hidden: vec![256],
            embed_dim: 128,
            proj_hidden: 128,
            proj_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.layer_dims();
        if dims.iter().any(|(a, b)| *a == 0 || *b == 0) {
            return Err(CoclError::config(format!(
                "all layer dims must be positive, got {dims:?}"
            )));
        }
        Ok(())
    }

    /// (in, out) pairs for every linear layer, encoder first.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.encoder_hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embed_dim));
        dims.push((self.embed_dim, self.proj_hidden));
        dims.push((self.proj_hidden, self.proj_dim));
        dims
    }

    fn encoder_layer_count(&self) -> usize {
        self.encoder_hidden.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `in_dim x out_dim`
    pub weight: Tensor,
    /// `out_dim`
    pub bias: Tensor,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::from_vec(
            vec![in_dim, out_dim],
            (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )
        .expect("dims match by construction")
        .with_grad();
        let bias = Tensor::vector((0..out_dim).map(|_| rng.random_range(-bound..bound)).collect())
            .with_grad();
        Linear { weight, bias }
    }
}

/// Tape handles for every registered parameter, in `params()` order.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// On-tape forward products of one batch.
pub struct ForwardVars {
    /// Encoder output, pre-normalization.
    pub embedding: Var,
    /// Raw projector output.
    pub projection: Var,
    /// Row-normalized projector output; unit rows.
    pub normalized: Var,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub encoder: Vec<Linear>,
    pub projector: Vec<Linear>,
}

impl ModelState {
    /// Seeded init with weights and biases uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dims = config.layer_dims();
        let enc_count = config.encoder_layer_count();
        let mut layers: Vec<Linear> = dims
            .iter()
            .map(|&(i, o)| Linear::init(i, o, &mut rng))
            .collect();
        let projector = layers.split_off(enc_count);
        Ok(ModelState {
            config,
            encoder: layers,
            projector,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.projector) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut().chain(self.projector.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Parameters of the encoder only, as used by probe-freezing checks.
    pub fn encoder_params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Register every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            vars: self.params().iter().map(|p| tape.leaf(p)).collect(),
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(CoclError::dimension(format!(
                "input has {cols} columns, model expects {}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Encoder forward on the tape: ReLU between layers, linear output.
    pub fn encode(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_input(*tape.shape(x).get(1).unwrap_or(&0))?;
        let mut h = x;
        for (i, _) in self.encoder.iter().enumerate() {
            let w = vars.vars[2 * i];
            let b = vars.vars[2 * i + 1];
            let lin = tape.matmul(h, w)?;
            h = tape.add_bias(lin, b)?;
            if i + 1 < self.encoder.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Full forward: embedding, raw projection, and normalized projection.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<ForwardVars> {
        let embedding = self.encode(tape, vars, x)?;
        let base = 2 * self.encoder.len();
        let mut h = embedding;
        for (i, _) in self.projector.iter().enumerate() {
            let w = vars.vars[base + 2 * i];
            let b = vars.vars[base + 2 * i + 1];
            let lin = tape.matmul(h, w)?;
            h = tape.add_bias(lin, b)?;
            if i + 1 < self.projector.len() {
                h = tape.relu(h);
            }
        }
        let normalized = tape.l2_normalize_rows(h)?;
        Ok(ForwardVars {
            embedding,
            projection: h,
            normalized,
        })
    }

    /// Gradient-free encoder output.
    pub fn encode_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = self.register(&mut tape);
        let out = self.encode(&mut tape, &vars, xv)?;
        Ok(tape.value_tensor(out))
    }

    /// Gradient-free (embedding, projection, normalized) triple.
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = self.register(&mut tape);
        let fwd = self.forward(&mut tape, &vars, xv)?;
        Ok((
            tape.value_tensor(fwd.embedding),
            tape.value_tensor(fwd.projection),
            tape.value_tensor(fwd.normalized),
        ))
    }

    /// Unit-norm projections; the z used by the contrastive losses.
    pub fn project_normalized_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval(x)?.2)
    }

    /// Copy tape gradients into the parameters' grad buffers.
    pub fn apply_tape_grads(&mut self, tape: &Tape, vars: &ModelVars) -> Result<()> {
        let grads: Vec<Option<Vec<f64>>> = vars
            .vars
            .iter()
            .map(|v| tape.grad(*v).map(|g| g.to_vec()))
            .collect();
        for (param, g) in self.params_mut().into_iter().zip(grads) {
            if let Some(g) = g {
                param.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Deep copy for use as a frozen distillation teacher.
    pub fn snapshot(&self) -> ReferenceSnapshot {
        ReferenceSnapshot {
            model: self.clone(),
        }
    }

    /// True when every parameter value is finite; training divergence check.
    pub fn params_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data().iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the exact parameter bits; detects any mutation.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params() {
            for v in p.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    // ── checkpoint io ────────────────────────────────────────────────────

    /// Write the parameters to `path` (binary) plus a JSON metadata sidecar
    /// at the same path with extension `json`. Round-trips are bit-exact.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"COCLCKPT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let total = (self.encoder.len() + self.projector.len()) as u32;
        buf.extend_from_slice(&total.to_le_bytes());
        buf.extend_from_slice(&(self.encoder.len() as u32).to_le_bytes());
        for l in self.encoder.iter().chain(&self.projector) {
            let ind = l.weight.shape()[0] as u32;
            let outd = l.weight.shape()[1] as u32;
            buf.extend_from_slice(&ind.to_le_bytes());
            buf.extend_from_slice(&outd.to_le_bytes());
            for v in l.weight.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.bias.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;

        let sidecar = serde_json::json!({
            "format": "coclckpt-v1",
            "config": self.config,
            "layer_count": total,
            "encoder_layer_count": self.encoder.len(),
            "param_hash": format!("{:016x}", self.param_hash()),
        });
        let json_path = path.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar).unwrap())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |bytes: &[u8], off: &mut usize, n: usize| -> Result<Vec<u8>> {
            if *off + n > bytes.len() {
                return Err(CoclError::Format {
                    offset: bytes.len() as u64,
                    detail: format!("checkpoint truncated, needed {} more bytes", *off + n - bytes.len()),
                });
            }
            let out = bytes[*off..*off + n].to_vec();
            *off += n;
            Ok(out)
        };
        let magic = take(&bytes, &mut off, 8)?;
        if magic != b"COCLCKPT" {
            return Err(CoclError::Format {
                offset: 0,
                detail: "bad checkpoint magic".into(),
            });
        }
        let rd_u32 = |bytes: &[u8], off: &mut usize| -> Result<u32> {
            let b = take(bytes, off, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let version = rd_u32(&bytes, &mut off)?;
        if version != 1 {
            return Err(CoclError::Format {
                offset: 8,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let total = rd_u32(&bytes, &mut off)? as usize;
        let enc_count = rd_u32(&bytes, &mut off)? as usize;
        if enc_count == 0 || enc_count >= total || total - enc_count != 2 {
            return Err(CoclError::Format {
                offset: 12,
                detail: format!("bad layer counts: total {total}, encoder {enc_count}"),
            });
        }
        let mut layers = Vec::with_capacity(total);
        for _ in 0..total {
            let ind = rd_u32(&bytes, &mut off)? as usize;
            let outd = rd_u32(&bytes, &mut off)? as usize;
            let wbytes = take(&bytes, &mut off, ind * outd * 8)?;
            let bbytes = take(&bytes, &mut off, outd * 8)?;
            let w: Vec<f64> = wbytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let b: Vec<f64> = bbytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            layers.push(Linear {
                weight: Tensor::from_vec(vec![ind, outd], w)?.with_grad(),
                bias: Tensor::vector(b).with_grad(),
            });
        }
        let projector = layers.split_off(enc_count);
        let encoder = layers;
        let config = ModelConfig {
            input_dim: encoder[0].weight.shape()[0],
            encoder_hidden: encoder[..encoder.len() - 1]
                .iter()
                .map(|l| l.weight.shape()[1])
                .collect(),
            embed_dim: encoder.last().unwrap().weight.shape()[1],
            proj_hidden: projector[0].weight.shape()[1],
            proj_dim: projector[1].weight.shape()[1],
        };
        Ok(ModelState {
            config,
            encoder,
            projector,
        })
    }
}

/// Immutable deep copy of a model taken at a task boundary. Only forward
/// evaluation is exposed; the underlying parameters cannot be mutated.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    model: ModelState,
}

impl ReferenceSnapshot {
    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn encode_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.model.encode_eval(x)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.model.forward_eval(x)
    }

    pub fn project_normalized_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.model.project_normalized_eval(x)
    }

    pub fn param_hash(&self) -> u64 {
        self.model.param_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            encoder_hidden: vec![5],
            embed_dim: 3,
            proj_hidden: 4,
            proj_dim: 2,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelState::init(tiny_config(), 42).unwrap();
        let b = ModelState::init(tiny_config(), 42).unwrap();
        let c = ModelState::init(tiny_config(), 43).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn init_magnitudes_bounded() {
        let m = ModelState::init(tiny_config(), 7).unwrap();
        for l in m.encoder.iter().chain(&m.projector) {
            let bound = 1.0 / (l.weight.shape()[0] as f64).sqrt();
            assert!(l.weight.data().iter().all(|v| v.abs() <= bound));
            assert!(l.bias.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn init_rejects_zero_dims() {
        let mut cfg = tiny_config();
        cfg.embed_dim = 0;
        assert!(matches!(
            ModelState::init(cfg, 0),
            Err(CoclError::Config(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut m = ModelState::init(tiny_config(), 1).unwrap();
        for l in &mut m.encoder {
            l.weight = Tensor::zeros(l.weight.shape().to_vec()).with_grad();
            l.bias = Tensor::zeros(l.bias.shape().to_vec()).with_grad();
        }
        let x = Tensor::matrix(2, 4, vec![0.3; 8]).unwrap();
        let emb = m.encode_eval(&x).unwrap();
        assert!(emb.data().iter().all(|v| *v == 0.0));
        assert_eq!(emb.shape(), &[2, 3]);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = ModelState::init(tiny_config(), 1).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(m.encode_eval(&x).is_err());
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let m = ModelState::init(tiny_config(), 5).unwrap();
        let x = Tensor::matrix(3, 4, vec![0.1, 0.9, -0.4, 0.2, 0.5, 0.5, 0.5, 0.5, -1.0, 0.3, 0.0, 0.7])
            .unwrap();
        let z = m.project_normalized_eval(&x).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        for i in 0..3 {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_final_projector_weights_leaves_z_unchanged() {
        let m = ModelState::init(tiny_config(), 5).unwrap();
        let mut scaled = m.clone();
        let last = scaled.projector.last_mut().unwrap();
        let w: Vec<f64> = last.weight.data().iter().map(|v| v * 3.5).collect();
        let b: Vec<f64> = last.bias.data().iter().map(|v| v * 3.5).collect();
        last.weight = Tensor::from_vec(last.weight.shape().to_vec(), w).unwrap().with_grad();
        last.bias = Tensor::vector(b).with_grad();

        let x = Tensor::matrix(2, 4, vec![0.4, -0.2, 0.9, 0.1, 0.0, 0.3, -0.5, 0.8]).unwrap();
        let z0 = m.project_normalized_eval(&x).unwrap();
        let z1 = scaled.project_normalized_eval(&x).unwrap();
        for (a, b) in z0.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_is_immune_to_later_training() {
        let mut m = ModelState::init(tiny_config(), 9).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.2; 8]).unwrap();
        let snap = m.snapshot();
        let before = snap.project_normalized_eval(&x).unwrap();
        let hash_before = snap.param_hash();
        assert_eq!(hash_before, m.param_hash());

        // Perturb the live model.
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += 0.25;
            }
        }
        let after = snap.project_normalized_eval(&x).unwrap();
        assert_eq!(before, after);
        assert_eq!(snap.param_hash(), hash_before);
        assert_ne!(snap.param_hash(), m.param_hash());
    }

    #[test]
    fn two_snapshots_of_same_model_agree() {
        let m = ModelState::init(tiny_config(), 11).unwrap();
        assert_eq!(m.snapshot().param_hash(), m.snapshot().param_hash());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let m = ModelState::init(tiny_config(), 21).unwrap();
        let dir = std::env::temp_dir().join(format!("cocl-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        m.save_checkpoint(&path).unwrap();
        let loaded = ModelState::load_checkpoint(&path).unwrap();
        assert_eq!(m.param_hash(), loaded.param_hash());
        assert_eq!(m.config, loaded.config);
        assert!(path.with_extension("json").exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("cocl-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            ModelState::load_checkpoint(&path),
            Err(CoclError::Format { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
