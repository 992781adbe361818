//! Acceptance suite. Each test covers one release criterion end to end and
//! prints a single PASS line with the measured numbers; run with
//! `cargo test -p cocl-core --test acceptance -- --nocapture` to see them.
//!
//! The directional experiments (criteria 5-8) run on a 3-task
//! class-incremental sequence of six 16x16 synthetic pattern classes with an
//! MLP encoder, a 60-sample replay budget and five paired seeds. Every run is
//! deterministic, so the measured margins are reproducible bit for bit.

mod common;

use cocl_core::augment::AugConfig;
use cocl_core::data::{
    load_cifar10_bin, load_idx, make_class_sequence, split_train_test, synth_patterns, Split,
    SplitPlan,
};
use cocl_core::engine::{
    metrics_csv, run_sequence, simulate_buffer_states, train_joint_baseline, BufferCapacity,
    BufferedExample, ReplayBuffer, Scenario, TaskSequence, TrainConfig,
};
use cocl_core::error::CoclError;
use cocl_core::eval::{accuracy_matrix, ProbeConfig, ProbePool};
use cocl_core::losses::{
    asym_supcon_loss, cross_entropy_loss, ird_loss, mse_embedding_loss, mse_projection_loss,
    seed_loss, similarity_vector, supcon_loss, total_loss, ContrastiveBatchView, ContrastiveMode,
    PreserveMode,
};
use cocl_core::model::{ModelConfig, ModelState};
use cocl_core::tape::Tape;
use cocl_core::tensor::Tensor;

use cocl_core::augment::ImageSample;
use common::{flatten, model_gradcheck, oracle, TestRng};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

// ── shared experiment setup (criteria 5-8) ──────────────────────────────

const SEEDS: u64 = 5;
const BUFFER_M: usize = 60;

fn experiment_sequence(seed: u64) -> TaskSequence {
    let full = synth_patterns(6, 60, 16, 0.5, seed).unwrap();
    let (train, test) = split_train_test(&full, 0.34, seed + 101).unwrap();
    make_class_sequence(
        &train,
        &test,
        &SplitPlan {
            classes_per_task: 2,
            order: None,
        },
        Scenario::ClassIl,
    )
    .unwrap()
}

fn experiment_model() -> ModelConfig {
    ModelConfig {
        input_dim: 256,
        encoder_hidden: vec![64],
        embed_dim: 16,
        proj_hidden: 32,
        proj_dim: 16,
    }
}

fn experiment_train(seed: u64) -> TrainConfig {
    let mut aug = AugConfig::new((16, 16));
    aug.crop_scale = (0.5, 1.0);
    let mut cfg = TrainConfig::new(aug);
    cfg.eta = 1e-3;
    cfg.batch = 16;
    cfg.epochs_first = 30;
    cfg.epochs_later = 18;
    cfg.warmup_epochs = 5;
    cfg.loss.tau = 0.5;
    cfg.loss.kappa = 0.2;
    cfg.loss.kappa_star = 0.01;
    cfg.loss.lambda = 1.0;
    cfg.buffer = BufferCapacity::Bounded(BUFFER_M);
    cfg.seed = seed;
    cfg
}

fn experiment_probe(seed: u64, pool: ProbePool) -> ProbeConfig {
    ProbeConfig {
        epochs: 60,
        lr: 0.2,
        decay_epochs: vec![35, 45, 55],
        decay_factor: 0.2,
        batch: 32,
        pool,
        seed,
    }
}

/// Final class-incremental probe accuracy (last task + buffer pool) of one
/// training arm. No-buffer arms still probe with an auxiliary buffer of the
/// same capacity, mirroring the evaluation protocol.
fn arm_accuracy(
    seq: &TaskSequence,
    seed: u64,
    buffer: BufferCapacity,
    preserve: PreserveMode,
    contrastive: ContrastiveMode,
    lambda: f64,
) -> f64 {
    let mut cfg = experiment_train(seed);
    cfg.buffer = buffer;
    cfg.preserve = preserve;
    cfg.contrastive = contrastive;
    cfg.loss.lambda = lambda;
    let result = run_sequence(seq, &experiment_model(), &cfg).unwrap();
    let buffer_states = if buffer == BufferCapacity::None {
        simulate_buffer_states(seq, BufferCapacity::Bounded(BUFFER_M), cfg.seed)
    } else {
        result.buffer_states.clone()
    };
    let matrix = accuracy_matrix(
        &result.snapshots,
        seq,
        &buffer_states,
        &experiment_probe(seed, ProbePool::LastTaskPlusBuffer),
    )
    .unwrap();
    matrix.final_average()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ── criterion 1: gradient correctness ───────────────────────────────────

#[test]
fn acceptance_01_gradient_correctness() {
    let started = std::time::Instant::now();
    let tol = 1e-4;
    let mut worst = 0.0f64;

    for (batch_idx, pairs) in [2usize, 3, 4].iter().enumerate() {
        let rows = 2 * pairs;
        let model = ModelState::init(
            ModelConfig {
                input_dim: 6,
                encoder_hidden: vec![5],
                embed_dim: 4,
                proj_hidden: 4,
                proj_dim: 3,
            },
            200 + batch_idx as u64,
        )
        .unwrap();
        let teacher = ModelState::init(model.config.clone(), 300 + batch_idx as u64)
            .unwrap()
            .snapshot();
        let mut rng = TestRng::new(400 + batch_idx as u64);
        let x = Tensor::matrix(
            rows,
            6,
            (0..rows * 6).map(|_| 0.5 + 0.4 * rng.uniform()).collect(),
        )
        .unwrap();
        let labels: Vec<u32> = (0..rows).map(|i| ((i / 2) % 3) as u32).collect();
        let anchors: Vec<bool> = (0..rows).map(|i| i / 2 != 0).collect();
        let origin: Vec<usize> = (0..rows).map(|i| i / 2).collect();
        let z_past = teacher.project_normalized_eval(&x).unwrap();
        let emb_past = teacher.encode_eval(&x).unwrap();
        let (_, proj_past, _) = teacher.forward_eval(&x).unwrap();
        let targets: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        let head = Tensor::matrix(4, 3, (0..12).map(|_| rng.uniform()).collect()).unwrap();

        type LossBuilder =
            Box<dyn Fn(&mut Tape, &ModelState, &cocl_core::model::ModelVars) -> cocl_core::tape::Var>;
        let checks: Vec<(&str, LossBuilder)> = vec![
            ("supcon", Box::new({
                let (x, labels, origin) = (x.clone(), labels.clone(), origin.clone());
                move |tape, m, vars| {
                    let xv = tape.constant(&x);
                    let fwd = m.forward(tape, vars, xv).unwrap();
                    let view = ContrastiveBatchView::new(
                        tape, fwd.normalized, labels.clone(), vec![true; labels.len()], origin.clone(),
                    ).unwrap();
                    supcon_loss(tape, &view, 0.5).unwrap()
                }
            })),
            ("asym_supcon", Box::new({
                let (x, labels, anchors, origin) = (x.clone(), labels.clone(), anchors.clone(), origin.clone());
                move |tape, m, vars| {
                    let xv = tape.constant(&x);
                    let fwd = m.forward(tape, vars, xv).unwrap();
                    let view = ContrastiveBatchView::new(
                        tape, fwd.normalized, labels.clone(), anchors.clone(), origin.clone(),
                    ).unwrap();
                    asym_supcon_loss(tape, &view, 0.5).unwrap()
                }
            })),
            ("ird", Box::new({
                let (x, z_past) = (x.clone(), z_past.clone());
                move |tape, m, vars| {
                    let xv = tape.constant(&x);
                    let fwd = m.forward(tape, vars, xv).unwrap();
                    ird_loss(tape, &z_past, fwd.normalized, 0.01, 0.2).unwrap()
                }
            })),
            ("seed", Box::new({
                let (x, emb_past) = (x.clone(), emb_past.clone());
                move |tape, m, vars| {
                    let xv = tape.constant(&x);
                    let fwd = m.forward(tape, vars, xv).unwrap();
                    seed_loss(tape, &emb_past, fwd.embedding, 0.05, 0.2).unwrap()
                }
            })),
            ("mse_emb", Box::new({
                let (x, emb_past) = (x.clone(), emb_past.clone());
                move |tape, m, vars| {
                    let xv = tape.constant(&x);
                    let fwd = m.forward(tape, vars, xv).unwrap();
                    mse_embedding_loss(tape, fwd.embedding, &emb_past).unwrap()
                }
            })),
            ("mse_proj", Box::new({
                let (x, proj_past) = (x.clone(), proj_past.clone());
                move |tape, m, vars| {
                    let xv = tape.constant(&x);
                    let fwd = m.forward(tape, vars, xv).unwrap();
                    mse_projection_loss(tape, fwd.projection, &proj_past).unwrap()
                }
            })),
            ("cross_entropy", Box::new({
                let (x, targets, head) = (x.clone(), targets.clone(), head.clone());
                move |tape, m, vars| {
                    let xv = tape.constant(&x);
                    let emb = m.encode(tape, vars, xv).unwrap();
                    let hv = tape.constant(&head);
                    let logits = tape.matmul(emb, hv).unwrap();
                    cross_entropy_loss(tape, logits, &targets).unwrap()
                }
            })),
        ];

        for (name, build) in checks {
            let w = model_gradcheck(&model, tol, |t, m, v| build(t, m, v));
            worst = worst.max(w);
            assert!(w < tol, "{name} worst rel err {w:.3e} at 2N = {rows}");
        }
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "gradient checks took {elapsed:?}, budget is 30 s"
    );
    println!(
        "acceptance 1 PASS: all 7 losses match finite differences on 2N in {{4,6,8}} (worst rel err {worst:.2e}, {elapsed:?})"
    );
}

// ── criterion 2: loss identities ─────────────────────────────────────────

#[test]
fn acceptance_02_loss_identities() {
    // (i) asym == sym with an all-true anchor mask.
    let mut rng = TestRng::new(21);
    let rows = rng.unit_rows(8, 4);
    let labels: Vec<u32> = (0..8).map(|i| ((i / 2) % 3) as u32).collect();
    let origin: Vec<usize> = (0..8).map(|i| i / 2).collect();
    let mut tape = Tape::new();
    let z = tape.leaf(&Tensor::matrix(8, 4, flatten(&rows)).unwrap());
    let view =
        ContrastiveBatchView::new(&tape, z, labels, vec![true; 8], origin).unwrap();
    let sym = supcon_loss(&mut tape, &view, 0.5).unwrap();
    let asym = asym_supcon_loss(&mut tape, &view, 0.5).unwrap();
    let diff = (tape.scalar_value(sym) - tape.scalar_value(asym)).abs();
    assert!(diff <= 1e-12, "asym/sym all-true diff {diff}");

    // (ii) self-distillation equals the entropy sum and has zero gradient.
    let mut rng = TestRng::new(22);
    let zrows = rng.unit_rows(6, 4);
    let zt = Tensor::matrix(6, 4, flatten(&zrows)).unwrap();
    let mut tape2 = Tape::new();
    let zv = tape2.leaf(&zt);
    let loss = ird_loss(&mut tape2, &zt, zv, 0.2, 0.2).unwrap();
    let entropy_sum: f64 = (0..6)
        .map(|i| oracle::entropy(&similarity_vector(&zt, i, 0.2).unwrap()))
        .sum();
    let gibbs_gap = (tape2.scalar_value(loss) - entropy_sum).abs();
    assert!(gibbs_gap <= 1e-12, "self-distillation vs entropy gap {gibbs_gap}");
    tape2.backward(loss).unwrap();
    let max_grad = tape2
        .grad(zv)
        .unwrap()
        .iter()
        .fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(max_grad <= 1e-12, "matched-distribution gradient {max_grad}");

    // (iii) the compound loss at t = 1 is exactly the contrastive term.
    let model = ModelState::init(
        ModelConfig {
            input_dim: 4,
            encoder_hidden: vec![4],
            embed_dim: 3,
            proj_hidden: 3,
            proj_dim: 2,
        },
        23,
    )
    .unwrap();
    let mut rng = TestRng::new(24);
    let batch = cocl_core::losses::AugmentedBatch {
        x: Tensor::matrix(4, 4, (0..16).map(|_| 0.5 + 0.3 * rng.uniform()).collect()).unwrap(),
        labels: vec![0, 0, 1, 1],
        anchor_mask: vec![true; 4],
        origin: vec![0, 0, 1, 1],
    };
    let cfg = cocl_core::losses::LossConfig::default();
    let mut t3 = Tape::new();
    let vars = model.register(&mut t3);
    let (total, parts) = total_loss(
        &mut t3,
        &model,
        &vars,
        None,
        &batch,
        &cfg,
        1,
        ContrastiveMode::Asymmetric,
        PreserveMode::Ird,
    )
    .unwrap();
    let mut t4 = Tape::new();
    let vars4 = model.register(&mut t4);
    let xv = t4.constant(&batch.x);
    let fwd = model.forward(&mut t4, &vars4, xv).unwrap();
    let view4 = ContrastiveBatchView::new(
        &t4,
        fwd.normalized,
        batch.labels.clone(),
        batch.anchor_mask.clone(),
        batch.origin.clone(),
    )
    .unwrap();
    let plain = asym_supcon_loss(&mut t4, &view4, cfg.tau).unwrap();
    assert_eq!(
        t3.scalar_value(total).to_bits(),
        t4.scalar_value(plain).to_bits(),
        "t = 1 compound loss must equal the contrastive term exactly"
    );
    assert_eq!(parts.preserve, 0.0);

    println!(
        "acceptance 2 PASS: asym/sym identity ({diff:.1e}), self-distillation entropy gap {gibbs_gap:.1e} with zero gradient ({max_grad:.1e}), t=1 gating exact"
    );
}

// ── criterion 3: oracle equivalence ──────────────────────────────────────

#[test]
fn acceptance_03_oracle_equivalence() {
    let mut worst = 0.0f64;
    for batch in 0..5u64 {
        let mut rng = TestRng::new(500 + batch);
        let n = 6;
        let rows = rng.unit_rows(n, 4);
        let past = rng.unit_rows(n, 4);
        let labels: Vec<u32> = (0..n).map(|i| ((i / 2) % 3) as u32).collect();
        let anchors: Vec<bool> = (0..n).map(|i| i / 2 != batch as usize % 3).collect();
        let origin: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let emb_teacher: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| 2.0 * rng.uniform()).collect())
            .collect();
        let emb_student: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| 2.0 * rng.uniform()).collect())
            .collect();

        let zt = Tensor::matrix(n, 4, flatten(&rows)).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(&zt);
        let view = ContrastiveBatchView::new(
            &tape,
            zv,
            labels.clone(),
            anchors.clone(),
            origin.clone(),
        )
        .unwrap();

        let sym_var = supcon_loss(&mut tape, &view, 0.5).unwrap();
        let asym_var = asym_supcon_loss(&mut tape, &view, 0.5).unwrap();
        let ird_var = {
            let past_t = Tensor::matrix(n, 4, flatten(&past)).unwrap();
            ird_loss(&mut tape, &past_t, zv, 0.01, 0.2).unwrap()
        };
        let seed_var = {
            let teacher_t = Tensor::matrix(n, 5, flatten(&emb_teacher)).unwrap();
            let student_v = tape.leaf(&Tensor::matrix(n, 5, flatten(&emb_student)).unwrap());
            seed_loss(&mut tape, &teacher_t, student_v, 0.05, 0.2).unwrap()
        };

        let cases = [
            ("supcon", tape.scalar_value(sym_var), oracle::supcon(&rows, &labels, &[true; 6], 0.5)),
            ("asym", tape.scalar_value(asym_var), oracle::supcon(&rows, &labels, &anchors, 0.5)),
            ("ird", tape.scalar_value(ird_var), oracle::ird(&past, &rows, 0.01, 0.2)),
            ("seed", tape.scalar_value(seed_var), oracle::seed(&emb_teacher, &emb_student, 0.05, 0.2)),
        ];
        for (name, ours, reference) in cases {
            let err = (ours - reference).abs();
            assert!(err < 1e-10, "batch {batch} {name}: {ours} vs oracle {reference}");
            worst = worst.max(err);
        }
    }
    println!("acceptance 3 PASS: supcon/asym/ird/seed match the scalar oracle on 5 fixed batches (worst abs err {worst:.2e})");
}

// ── criterion 4: buffer invariants ───────────────────────────────────────

#[test]
fn acceptance_04_buffer_invariants() {
    let mk = |label: u32, task: usize| BufferedExample {
        sample: ImageSample::new(1, 1, 1, vec![0.5], label).unwrap(),
        task_idx: task,
        effective_label: label,
    };
    let mut trials = 0usize;
    let mut rng = ChaCha12Rng::seed_from_u64(777);
    let mut fuzz = TestRng::new(778);
    while trials < 1000 {
        for &m in &[6usize, 10, 50] {
            let mut buf = ReplayBuffer::new(BufferCapacity::Bounded(m));
            let task_count = 1 + (fuzz.next_u64() % 5) as usize;
            let mut next_class = 0u32;
            for task in 0..task_count {
                let fresh = 1 + (fuzz.next_u64() % 3) as usize;
                let mut incoming = Vec::new();
                for _ in 0..fresh {
                    if next_class >= 10 {
                        break;
                    }
                    // Ample samples so every quota is fillable.
                    for _ in 0..60 {
                        incoming.push(mk(next_class, task));
                    }
                    next_class += 1;
                }
                if incoming.is_empty() {
                    continue;
                }
                buf.update(&incoming, &mut rng);
                assert!(buf.len() <= m, "capacity exceeded: {} > {m}", buf.len());
                let counts = buf.class_counts();
                let lo = counts.iter().map(|(_, c)| *c).min().unwrap();
                let hi = counts.iter().map(|(_, c)| *c).max().unwrap();
                assert!(hi - lo <= 1, "per-class counts unbalanced: {counts:?}");
                trials += 1;
            }
        }
    }
    println!("acceptance 4 PASS: {trials} fuzzed buffer updates held capacity and +/-1 class balance");
}

// ── criterion 5: directional ablation ────────────────────────────────────

#[test]
fn acceptance_05_directional_ablation() {
    let started = std::time::Instant::now();
    let arms = [
        (BufferCapacity::None, PreserveMode::None, ContrastiveMode::Symmetric),
        (BufferCapacity::None, PreserveMode::Ird, ContrastiveMode::Symmetric),
        (BufferCapacity::Bounded(BUFFER_M), PreserveMode::None, ContrastiveMode::Asymmetric),
        (BufferCapacity::Bounded(BUFFER_M), PreserveMode::Ird, ContrastiveMode::Asymmetric),
    ];
    let mut acc = vec![Vec::new(); 4];
    for seed in 0..SEEDS {
        let seq = experiment_sequence(1000 + seed);
        for (i, (buffer, preserve, mode)) in arms.iter().enumerate() {
            acc[i].push(arm_accuracy(&seq, seed, *buffer, *preserve, *mode, 1.0));
        }
    }
    let means: Vec<f64> = acc.iter().map(|v| mean_se(v).0).collect();
    let mut report = format!(
        "(a)={:.3} (b)={:.3} (c)={:.3} (d)={:.3}",
        means[0], means[1], means[2], means[3]
    );
    for (i, name) in [(0usize, "a"), (1, "b"), (2, "c")] {
        let diffs: Vec<f64> = acc[3].iter().zip(&acc[i]).map(|(x, y)| x - y).collect();
        let (md, se) = mean_se(&diffs);
        assert!(
            md > se,
            "(d) - ({name}) = {md:.4} does not exceed its paired SE {se:.4}"
        );
        report.push_str(&format!(" | d-{name}={md:.3}>se{se:.3}"));
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 600, "ablation took {elapsed:?}, budget 10 min");
    println!("acceptance 5 PASS: {report} ({elapsed:?})");
}

// ── criterion 6: asym vs sym ─────────────────────────────────────────────

#[test]
fn acceptance_06_asym_versus_sym() {
    let run_seeds = |count: u64| -> (f64, f64, f64, f64) {
        let mut asym_all = Vec::new();
        let mut sym_all = Vec::new();
        for seed in 0..count {
            let seq = experiment_sequence(3000 + seed);
            asym_all.push(arm_accuracy(
                &seq,
                seed,
                BufferCapacity::Bounded(BUFFER_M),
                PreserveMode::Ird,
                ContrastiveMode::Asymmetric,
                1.0,
            ));
            sym_all.push(arm_accuracy(
                &seq,
                seed,
                BufferCapacity::Bounded(BUFFER_M),
                PreserveMode::Ird,
                ContrastiveMode::Symmetric,
                1.0,
            ));
        }
        let diffs: Vec<f64> = asym_all.iter().zip(&sym_all).map(|(a, s)| a - s).collect();
        let (md, se) = mean_se(&diffs);
        (mean_se(&asym_all).0, mean_se(&sym_all).0, md, se)
    };

    let (asym, sym, diff, se) = run_seeds(SEEDS);
    if diff >= 0.0 {
        println!(
            "acceptance 6 PASS: asym {asym:.3} >= sym {sym:.3} over {SEEDS} paired seeds (diff {diff:.3}, se {se:.3})"
        );
        return;
    }
    // Soft failure: a tie within the standard error triggers a documented
    // 10-seed rerun.
    assert!(
        diff.abs() <= se,
        "asym {asym:.3} fell below sym {sym:.3} by more than the paired SE ({diff:.4} vs {se:.4})"
    );
    println!("acceptance 6 SOFT: tie within SE at {SEEDS} seeds; rerunning with 10");
    let (asym10, sym10, diff10, se10) = run_seeds(10);
    assert!(
        diff10 >= 0.0,
        "10-seed rerun still favors sym: asym {asym10:.3} vs sym {sym10:.3} (se {se10:.3})"
    );
    println!(
        "acceptance 6 PASS: asym {asym10:.3} >= sym {sym10:.3} over 10 paired seeds (diff {diff10:.3}, se {se10:.3})"
    );
}

// ── criterion 7: contrastive vs joint forgetting ─────────────────────────

#[test]
fn acceptance_07_contrastive_resists_forgetting() {
    let mut diffs = Vec::new();
    let mut con_all = Vec::new();
    let mut joint_all = Vec::new();
    for seed in 0..SEEDS {
        let seq = experiment_sequence(2000 + seed);
        let mut cfg = experiment_train(seed);
        cfg.buffer = BufferCapacity::None;
        cfg.preserve = PreserveMode::None;
        cfg.contrastive = ContrastiveMode::Symmetric;
        let contrastive = run_sequence(&seq, &experiment_model(), &cfg).unwrap();
        let joint = train_joint_baseline(&seq, &experiment_model(), &cfg).unwrap();
        let probe = experiment_probe(seed, ProbePool::AllTasks);
        let con = accuracy_matrix(&contrastive.snapshots, &seq, &[], &probe)
            .unwrap()
            .off_diagonal_mean();
        let jnt = accuracy_matrix(&joint.snapshots, &seq, &[], &probe)
            .unwrap()
            .off_diagonal_mean();
        con_all.push(con);
        joint_all.push(jnt);
        diffs.push(con - jnt);
    }
    let (md, se) = mean_se(&diffs);
    assert!(
        md > 0.0,
        "contrastive off-diagonal mean did not beat joint: diff {md:.4}"
    );
    println!(
        "acceptance 7 PASS: all-pool off-diagonal mean contrastive {:.3} > joint {:.3} over {SEEDS} seeds (diff {md:.3}, se {se:.3})",
        mean_se(&con_all).0,
        mean_se(&joint_all).0
    );
}

// ── criterion 8: infinite-buffer distillation-power sweep ────────────────

#[test]
fn acceptance_08_infinite_buffer_gap_closes() {
    let gap = |seed: u64, lambda: f64| -> f64 {
        let seq = experiment_sequence(4000 + seed);
        let preserve = if lambda == 0.0 {
            PreserveMode::None
        } else {
            PreserveMode::Ird
        };
        let sym = arm_accuracy(
            &seq,
            seed,
            BufferCapacity::Unbounded,
            preserve,
            ContrastiveMode::Symmetric,
            lambda,
        );
        let asym = arm_accuracy(
            &seq,
            seed,
            BufferCapacity::Unbounded,
            preserve,
            ContrastiveMode::Asymmetric,
            lambda,
        );
        sym - asym
    };
    let mut g0 = Vec::new();
    let mut g1 = Vec::new();
    for seed in 0..SEEDS {
        g0.push(gap(seed, 0.0));
        g1.push(gap(seed, 1.0));
    }
    let (m0, _) = mean_se(&g0);
    let (m1, _) = mean_se(&g1);
    assert!(
        m0 >= m1,
        "sym-minus-asym gap should not widen with distillation: {m0:.4} vs {m1:.4}"
    );
    println!(
        "acceptance 8 PASS: infinite-buffer sym-asym gap {m0:.3} at lambda=0 >= {m1:.3} at lambda=1 over {SEEDS} seeds"
    );
}

// ── criterion 9: determinism ─────────────────────────────────────────────

#[test]
fn acceptance_09_metrics_are_byte_identical() {
    let seq = experiment_sequence(9000);
    let mut cfg = experiment_train(9);
    cfg.epochs_first = 6;
    cfg.epochs_later = 4;
    let a = run_sequence(&seq, &experiment_model(), &cfg).unwrap();
    let b = run_sequence(&seq, &experiment_model(), &cfg).unwrap();

    let strip_wall = |csv: &str| -> String {
        csv.lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split(',').collect();
                cols.pop();
                cols.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let csv_a = strip_wall(&metrics_csv("run", &a.metrics));
    let csv_b = strip_wall(&metrics_csv("run", &b.metrics));
    assert_eq!(csv_a.as_bytes(), csv_b.as_bytes());
    assert_eq!(a.model.param_hash(), b.model.param_hash());
    println!(
        "acceptance 9 PASS: {} metric rows byte-identical across reruns (timing column excluded)",
        a.metrics.len()
    );
}

// ── criterion 10: format robustness ──────────────────────────────────────

#[test]
fn acceptance_10_parser_robustness() {
    let dir = std::env::temp_dir().join(format!("cocl-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let write = |name: &str, bytes: &[u8]| -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };

    let idx_images = |count: u32, rows: u32, cols: u32, payload: &[u8]| -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(payload);
        b
    };
    let idx_labels = |labels: &[u8]| -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    };

    // Valid round-trip against a hand-computed fixture: 2 images of 2x3 with
    // bytes 0, 51, 102, ... -> pixels i*51/255.
    let payload: Vec<u8> = (0..12).map(|i| (i * 17) as u8).collect();
    let img_ok = write("ok-images", &idx_images(2, 2, 3, &payload));
    let lbl_ok = write("ok-labels", &idx_labels(&[4, 9]));
    let ds = load_idx(&img_ok, &lbl_ok, Split::Train).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.examples[0].label, 4);
    assert_eq!(ds.examples[1].label, 9);
    for (i, p) in ds.examples[0].pixels.iter().enumerate() {
        assert_eq!(*p, (i as f64 * 17.0) / 255.0);
    }
    assert_eq!(ds.examples[1].pixels[0], (6.0 * 17.0) / 255.0);

    // Malformed suite with the expected error classes.
    let mut bad_magic = idx_images(1, 2, 2, &[0; 4]);
    bad_magic[2] = 0xff;
    let cases: Vec<(&str, CoclError)> = vec![
        (
            "bad image magic",
            load_idx(
                &write("bad-magic", &bad_magic),
                &idx_labels(&[0]).pipe(|b| write("bad-magic-lbl", &b)),
                Split::Train,
            )
            .unwrap_err(),
        ),
        (
            "truncated image payload",
            load_idx(
                &write("trunc", &idx_images(4, 5, 5, &[0; 40])),
                &write("trunc-lbl", &idx_labels(&[0, 1, 2, 3])),
                Split::Train,
            )
            .unwrap_err(),
        ),
        (
            "count mismatch",
            load_idx(
                &write("count", &idx_images(2, 2, 2, &[0; 8])),
                &write("count-lbl", &idx_labels(&[0, 1, 2])),
                Split::Train,
            )
            .unwrap_err(),
        ),
        (
            "batch record length",
            load_cifar10_bin(&[write("cifar-bad.bin", &vec![0u8; 3073 + 100])], Split::Train)
                .unwrap_err(),
        ),
        (
            "truncated label payload",
            load_idx(
                &write("lbl-trunc", &idx_images(3, 2, 2, &[0; 12])),
                &write("lbl-trunc-lbl", {
                    let mut b = idx_labels(&[0, 1, 2]);
                    b.truncate(9);
                    &b.clone()
                }),
                Split::Train,
            )
            .unwrap_err(),
        ),
    ];
    for (name, err) in &cases {
        assert!(
            matches!(err, CoclError::Format { .. }),
            "{name} should be a format error, got {err:?}"
        );
    }
    // Offsets are byte accurate.
    match load_idx(
        &write("off", &idx_images(4, 5, 5, &[0; 40])),
        &write("off-lbl", &idx_labels(&[0, 1, 2, 3])),
        Split::Train,
    ) {
        Err(CoclError::Format { offset, .. }) => assert_eq!(offset, 16 + 40),
        other => panic!("expected format error, got {other:?}"),
    }

    // Valid single-record batch file round-trips with exact pixel scaling.
    let mut rec = vec![7u8];
    rec.extend((0..3072).map(|i| (i % 256) as u8));
    let batch = load_cifar10_bin(&[write("cifar-ok.bin", &rec)], Split::Test).unwrap();
    assert_eq!(batch.examples[0].label, 7);
    assert_eq!(batch.examples[0].pixels[255], 1.0);

    std::fs::remove_dir_all(&dir).ok();
    println!(
        "acceptance 10 PASS: {} malformed inputs classified as format errors with byte-accurate offsets; valid fixtures round-trip",
        cases.len()
    );
}

/// Small pipe helper for the fixture table.
trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}
