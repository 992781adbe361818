//! Dataset construction: binary ingestion, rotated-domain construction, a
//! synthetic class-pattern generator, and sequential split builders.
//!
//! Supported binary formats:
//!
//! * IDX image/label pairs (big-endian header): images carry magic
//!   `0x00000803` followed by u32 count, rows, cols, then one byte per pixel;
//!   labels carry magic `0x00000801`, u32 count, then one byte per label.
//! * 10-class binary batches of 3073-byte records: 1 label byte followed by
//!   3 x 32 x 32 channel-major pixel bytes.
//!
//! Parsers fail deterministically with the byte offset of the problem.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::augment::{bilinear_at, ImageSample};
use crate::engine::{Scenario, TaskSequence, TaskSpec};
use crate::error::{CoclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labeled image collection with a consistent geometry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<ImageSample>,
    /// Distinct labels present, ascending.
    pub class_ids: Vec<u32>,
    pub split: Split,
}

impl Dataset {
    pub fn from_examples(examples: Vec<ImageSample>, split: Split) -> Result<Self> {
        if examples.is_empty() {
            return Err(CoclError::config("dataset has no examples"));
        }
        let (c, h, w) = (
            examples[0].channels,
            examples[0].height,
            examples[0].width,
        );
        if examples
            .iter()
            .any(|e| e.channels != c || e.height != h || e.width != w)
        {
            return Err(CoclError::dimension(
                "dataset mixes image geometries",
            ));
        }
        let mut class_ids: Vec<u32> = examples.iter().map(|e| e.label).collect();
        class_ids.sort_unstable();
        class_ids.dedup();
        Ok(Dataset {
            examples,
            class_ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Flattened pixel count per example.
    pub fn input_dim(&self) -> usize {
        let e = &self.examples[0];
        e.channels * e.height * e.width
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        let e = &self.examples[0];
        (e.channels, e.height, e.width)
    }

    /// Keep only the examples whose label is in `classes`.
    pub fn restrict_to(&self, classes: &[u32], split: Split) -> Result<Dataset> {
        let examples: Vec<ImageSample> = self
            .examples
            .iter()
            .filter(|e| classes.contains(&e.label))
            .cloned()
            .collect();
        Dataset::from_examples(examples, split)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(CoclError::Format {
            offset: bytes.len() as u64,
            detail: format!("need 4 bytes at offset {offset}, file ends early"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image/label file pair into a dataset with pixels in [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    let img_magic = read_be_u32(&images, 0)?;
    if img_magic != 0x0000_0803 {
        return Err(CoclError::Format {
            offset: 0,
            detail: format!("bad image magic 0x{img_magic:08x}, expected 0x00000803"),
        });
    }
    let lbl_magic = read_be_u32(&labels, 0)?;
    if lbl_magic != 0x0000_0801 {
        return Err(CoclError::Format {
            offset: 0,
            detail: format!("bad label magic 0x{lbl_magic:08x}, expected 0x00000801"),
        });
    }
    let count = read_be_u32(&images, 4)? as usize;
    let rows = read_be_u32(&images, 8)? as usize;
    let cols = read_be_u32(&images, 12)? as usize;
    let lbl_count = read_be_u32(&labels, 4)? as usize;
    if count != lbl_count {
        return Err(CoclError::Format {
            offset: 4,
            detail: format!("image count {count} does not match label count {lbl_count}"),
        });
    }
    let expected_images = 16 + count * rows * cols;
    if images.len() < expected_images {
        return Err(CoclError::Format {
            offset: images.len() as u64,
            detail: format!(
                "image payload truncated: expected {expected_images} bytes total"
            ),
        });
    }
    let expected_labels = 8 + count;
    if labels.len() < expected_labels {
        return Err(CoclError::Format {
            offset: labels.len() as u64,
            detail: format!(
                "label payload truncated: expected {expected_labels} bytes total"
            ),
        });
    }

    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let pixels: Vec<f64> = images[start..start + rows * cols]
            .iter()
            .map(|b| *b as f64 / 255.0)
            .collect();
        examples.push(ImageSample::new(
            1,
            rows,
            cols,
            pixels,
            labels[8 + i] as u32,
        )?);
    }
    Dataset::from_examples(examples, split)
}

const CIFAR_RECORD: usize = 3073;

/// Parse one or more 3073-byte-record binary batch files.
pub fn load_cifar10_bin(paths: &[impl AsRef<Path>], split: Split) -> Result<Dataset> {
    let mut examples = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p.as_ref())?;
        if !bytes.len().is_multiple_of(CIFAR_RECORD) {
            return Err(CoclError::Format {
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                detail: format!(
                    "file length {} is not a multiple of {CIFAR_RECORD}-byte records",
                    bytes.len()
                ),
            });
        }
        if bytes.is_empty() {
            return Err(CoclError::Format {
                offset: 0,
                detail: "empty batch file".into(),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as u32;
            let pixels: Vec<f64> = rec[1..].iter().map(|b| *b as f64 / 255.0).collect();
            examples.push(ImageSample::new(3, 32, 32, pixels, label)?);
        }
    }
    Dataset::from_examples(examples, split)
}

/// Rotate an image about its center by `angle` radians, bilinear resampling
/// with zero fill outside the original frame.
pub fn rotate_image(s: &ImageSample, angle: f64) -> ImageSample {
    let (cy, cx) = ((s.height as f64 - 1.0) / 2.0, (s.width as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = s.clone();
    for c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                // Inverse map: rotate the output coordinate back by -angle.
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cy + dy * cos + dx * sin;
                let sx = cx - dy * sin + dx * cos;
                let v = bilinear_at(s, c, sy, sx);
                out.pixels[(c * s.height + y) * s.width + x] = v;
            }
        }
    }
    out
}

fn rotate_dataset(d: &Dataset, angle: f64, split: Split) -> Result<Dataset> {
    Dataset::from_examples(
        d.examples.iter().map(|e| rotate_image(e, angle)).collect(),
        split,
    )
}

/// Build a domain-incremental sequence of `t_count` tasks, each a copy of the
/// base train/test datasets rotated by an angle drawn uniformly from [0, pi).
/// The angle is drawn once per task and shared by its train and test splits.
pub fn make_rotated_domains(
    train: &Dataset,
    test: &Dataset,
    t_count: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if t_count == 0 {
        return Err(CoclError::config("need at least one domain task"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(t_count);
    for _ in 0..t_count {
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        tasks.push(TaskSpec {
            train: rotate_dataset(train, angle, Split::Train)?,
            test: rotate_dataset(test, angle, Split::Test)?,
            classes: train.class_ids.clone(),
            rotation: Some(angle),
        });
    }
    let seq = TaskSequence {
        scenario: Scenario::DomainIl,
        tasks,
    };
    seq.validate()?;
    Ok(seq)
}

/// Procedural class template: oriented sinusoidal bars, checkerboards, or
/// gaussian blobs, cycling with the class index so templates stay pairwise
/// distinct.
fn class_template(class: u32, num_classes: usize, size: usize) -> Vec<f64> {
    let n = size as f64;
    let variant = (class / 3) as f64;
    let mut pixels = vec![0.0; size * size];
    match class % 3 {
        0 => {
            // Oriented bars.
            let theta = std::f64::consts::PI * (class as f64 + 0.5) / num_classes as f64;
            let freq = 2.0 + variant;
            let (sin, cos) = theta.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * cos + y as f64 * sin) / n;
                    pixels[y * size + x] =
                        0.5 + 0.45 * (2.0 * std::f64::consts::PI * freq * u).sin();
                }
            }
        }
        1 => {
            // Checkerboard with class-dependent cell size.
            let cell = 2 + (variant as usize) % 4;
            for y in 0..size {
                for x in 0..size {
                    let on = (x / cell + y / cell).is_multiple_of(2);
                    pixels[y * size + x] = if on { 0.9 } else { 0.1 };
                }
            }
        }
        _ => {
            // A single off-center gaussian blob; the placement angle is
            // unique per class (the two-blob point-symmetric variant made
            // classes at opposite phases indistinguishable).
            let phase = 2.0 * std::f64::consts::PI * (class as f64 + 0.3) / num_classes as f64;
            let r = (0.22 + 0.06 * variant) * n;
            let (cy, cx) = (n / 2.0 + r * phase.sin(), n / 2.0 + r * phase.cos());
            let sigma = n / 7.0 + 0.8 * variant;
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = 0.05 + 0.9 * (-d2 / (2.0 * sigma * sigma)).exp();
                    pixels[y * size + x] = v.min(1.0);
                }
            }
        }
    }
    pixels
}

/// Generate `num_classes * per_class` single-channel pattern images: a fixed
/// per-class template plus gaussian pixel noise, clamped to [0, 1].
pub fn synth_patterns(
    num_classes: usize,
    per_class: usize,
    size: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || size == 0 {
        return Err(CoclError::config(
            "num_classes, per_class and size must be positive",
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes as u32 {
        let template = class_template(class, num_classes, size);
        for _ in 0..per_class {
            let mut pixels = template.clone();
            if noise_sigma > 0.0 {
                for p in &mut pixels {
                    // Box-Muller; two uniforms per gaussian draw.
                    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                    *p = (*p + noise_sigma * g).clamp(0.0, 1.0);
                }
            }
            examples.push(ImageSample::new(1, size, size, pixels, class)?);
        }
    }
    Dataset::from_examples(examples, Split::Train)
}

/// Seeded per-class split into train/test with the given held-out fraction.
pub fn split_train_test(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(CoclError::config(format!(
            "test fraction {test_fraction} must be in (0, 1)"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in &d.class_ids {
        let mut members: Vec<&ImageSample> = d
            .examples
            .iter()
            .filter(|e| e.label == *class)
            .collect();
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize)
            .clamp(1, members.len() - 1);
        for (i, e) in members.into_iter().enumerate() {
            if i < n_test {
                test.push(e.clone());
            } else {
                train.push(e.clone());
            }
        }
    }
    Ok((
        Dataset::from_examples(train, Split::Train)?,
        Dataset::from_examples(test, Split::Test)?,
    ))
}

/// How to carve a class-incremental sequence out of a dataset.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub classes_per_task: usize,
    /// Fixed class ordering; ascending label order when `None`.
    pub order: Option<Vec<u32>>,
}

/// Split train/test datasets into consecutive class groups in a fixed order.
pub fn make_class_sequence(
    train: &Dataset,
    test: &Dataset,
    plan: &SplitPlan,
    scenario: Scenario,
) -> Result<TaskSequence> {
    if scenario == Scenario::DomainIl {
        return Err(CoclError::config(
            "class sequences serve task/class-incremental scenarios",
        ));
    }
    let order = match &plan.order {
        Some(o) => o.clone(),
        None => train.class_ids.clone(),
    };
    if plan.classes_per_task == 0 || !order.len().is_multiple_of(plan.classes_per_task) {
        return Err(CoclError::config(format!(
            "{} classes are not divisible into groups of {}",
            order.len(),
            plan.classes_per_task
        )));
    }
    let mut tasks = Vec::new();
    for group in order.chunks(plan.classes_per_task) {
        let mut classes = group.to_vec();
        classes.sort_unstable();
        tasks.push(TaskSpec {
            train: train.restrict_to(&classes, Split::Train)?,
            test: test.restrict_to(&classes, Split::Test)?,
            classes,
            rotation: None,
        });
    }
    let seq = TaskSequence { scenario, tasks };
    seq.validate()?;
    Ok(seq)
}
