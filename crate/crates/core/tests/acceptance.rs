//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured margin (a failed assertion is the FAIL path). Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.
//!
//! The learning criteria (5 and 8) train the desk model on the copy task
//! twice per encoding and take a few minutes; everything else is fast.

mod common;

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pewave_core::data::{synth_task, SynthTask, Vocab};
use pewave_core::kernels::{phi, psi, Angle, PeriodicKind};
use pewave_core::model::{ModelConfig, ModelState};
use pewave_core::pe::{build_table, PeConfig};
use pewave_core::rope::{attention_logit, block_transform, rotate, RopeConfig};
use pewave_core::train::{
    prepare_split, summarize_folds, train_run, RunReport, TrainConfig,
};

// ---- criterion 1: kernel exactness -----------------------------------------

/// Straight transcription of the triangle-wave equation: closed-interval
/// branches over [0, 2π], recursion via the floating-point modulus.
fn tri_ref(m: f64) -> f64 {
    let w = m.rem_euclid(TAU);
    if w <= FRAC_PI_2 {
        2.0 * w / PI
    } else if w <= 3.0 * FRAC_PI_2 {
        -2.0 * w / PI + 2.0
    } else {
        2.0 * w / PI - 4.0
    }
}

/// Straight transcription of the square-wave equation.
fn sqw_ref(m: f64) -> f64 {
    let w = m.rem_euclid(TAU);
    if w < PI {
        -1.0
    } else {
        1.0
    }
}

/// Straight transcription of the sawtooth equation.
fn saw_ref(m: f64) -> f64 {
    let w = m.rem_euclid(TAU);
    if w < PI {
        w
    } else {
        w - TAU
    }
}

#[test]
fn criterion_1_kernel_exactness() {
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    for i in 0..=4096 {
        let m = -4.0 * PI + 8.0 * PI * i as f64 / 4096.0;
        let a = Angle::new(m).unwrap();
        for (kind, reference) in [
            (PeriodicKind::Sinusoidal, m.sin()),
            (PeriodicKind::Triangular, tri_ref(m)),
            (PeriodicKind::Square, sqw_ref(m)),
            (PeriodicKind::Sawtooth, saw_ref(m)),
        ] {
            let dev = (phi(kind, a) - reference).abs();
            worst = worst.max(dev);
            assert!(dev <= 1e-12, "{kind} at {m}: deviation {dev:e}");
        }
        // periodicity and the phase law on the same grid
        for kind in PeriodicKind::ALL {
            let period_dev =
                (phi(kind, Angle::new(m + TAU).unwrap()) - phi(kind, a)).abs();
            assert!(period_dev <= 1e-9, "{kind} periodicity at {m}");
            let delegated = phi(kind, Angle::new(FRAC_PI_2 - m).unwrap());
            assert!(
                psi(kind, a) == delegated,
                "{kind} phase law must hold bit-exactly at {m}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 1, "criterion 1 must finish within 1 s");
    println!(
        "acceptance criterion 1 (kernel exactness ≤1e-12 on 4096-point grid): PASS \
         (worst deviation {worst:.2e}, {elapsed:?})"
    );
}

// ---- criterion 2: sinusoidal table equivalence ------------------------------

#[test]
fn criterion_2_sinusoidal_table_matches_closed_form() {
    let start = std::time::Instant::now();
    let (d_model, max_len) = (64, 512);
    let table =
        build_table::<f64>(PeConfig::new(PeriodicKind::Sinusoidal, d_model, max_len)).unwrap();
    let mut worst = 0.0f64;
    for m in 0..max_len {
        for i in 0..d_model / 2 {
            // independent re-derivation of the classical table
            let arg = m as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let even_dev = (table.row(m)[2 * i] - arg.sin()).abs();
            let odd_dev = (table.row(m)[2 * i + 1] - arg.cos()).abs();
            worst = worst.max(even_dev).max(odd_dev);
            assert!(even_dev <= 1e-12, "row {m} col {}", 2 * i);
            assert!(odd_dev <= 1e-12, "row {m} col {}", 2 * i + 1);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 1, "criterion 2 must finish within 1 s");
    println!(
        "acceptance criterion 2 (sinusoidal table ≤1e-12, d_model=64 L=512): PASS \
         (worst deviation {worst:.2e}, {elapsed:?})"
    );
}

// ---- criterion 3: rotary group property -------------------------------------

#[test]
fn criterion_3_rope_group_property() {
    let start = std::time::Instant::now();
    let d_k = 16;
    let config = RopeConfig::new(PeriodicKind::Sinusoidal, d_k);
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q: Vec<f64> = (0..d_k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let k: Vec<f64> = (0..d_k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let (m, n) = (rng.random_range(0..8), rng.random_range(0..8));
        let base = attention_logit(
            &rotate(&q, m, &config).unwrap(),
            &rotate(&k, n, &config).unwrap(),
        )
        .unwrap();
        for shift in [1usize, 3, 9, 17, 33, 64] {
            let shifted = attention_logit(
                &rotate(&q, m + shift, &config).unwrap(),
                &rotate(&k, n + shift, &config).unwrap(),
            )
            .unwrap();
            let dev = (base - shifted).abs();
            worst = worst.max(dev);
            assert!(dev <= 1e-9, "shift {shift}: deviation {dev:e}");
        }
    }

    // square-wave block norm gain: φ² + ψ² = 2 exactly, vector gain 2 ± 1e-12
    let sq_cfg = RopeConfig::new(PeriodicKind::Square, d_k);
    for pos in 0..64usize {
        for j in 0..d_k / 2 {
            let theta = 10000f64.powf(-2.0 * j as f64 / d_k as f64);
            let block =
                block_transform::<f64>(PeriodicKind::Square, pos as f64 * theta).unwrap();
            assert_eq!(block.determinant(), 2.0);
        }
        let v: Vec<f64> = (0..d_k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let rotated = rotate(&v, pos, &sq_cfg).unwrap();
        let gain = rotated.iter().map(|x| x * x).sum::<f64>()
            / v.iter().map(|x| x * x).sum::<f64>();
        assert!((gain - 2.0).abs() <= 1e-12, "norm gain {gain} at {pos}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 5, "criterion 3 must finish within 5 s");
    println!(
        "acceptance criterion 3 (rotary shift invariance ≤1e-9; square gain 2±1e-12): PASS \
         (worst deviation {worst:.2e}, {elapsed:?})"
    );
}

// ---- criterion 4: gradient correctness --------------------------------------

#[test]
fn criterion_4_gradient_correctness() {
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    for &name in common::OP_SCENARIOS {
        for seed in 0..20 {
            worst = worst.max(common::check_op(name, 7000 + seed));
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 4 must finish within 30 s");
    println!(
        "acceptance criterion 4 (finite differences, {} ops × 20 instances, rel err ≤1e-4): PASS \
         (worst rel err {worst:.2e}, {elapsed:?})",
        common::OP_SCENARIOS.len()
    );
}

// ---- criteria 5 and 8: learning sanity + determinism -------------------------

/// Criterion-5 configuration: desk preset, copy task, vocab 50, lengths
/// 3–16, 2000 train / 200 val pairs, fixed seed. Every encoding reaches
/// ≥99.9% validation accuracy well before epoch 24 at the desk learning
/// rate; 24 leaves margin under the ≤60-epoch budget.
const LEARN_EPOCHS: usize = 24;
const LEARN_SEED: u64 = 42;

fn criterion5_run(kind: PeriodicKind) -> RunReport {
    let corpus = synth_task(SynthTask::Copy, 50, (3, 16), 2200, LEARN_SEED).unwrap();
    let vocab = Vocab::build(corpus.source_sequences(), 2).unwrap();
    let train_idx: Vec<usize> = (0..2000).collect();
    let val_idx: Vec<usize> = (2000..2200).collect();
    let split = prepare_split(&corpus, &train_idx, &val_idx, &vocab, &vocab);
    let model_cfg = ModelConfig::desk(kind, vocab.len(), vocab.len());
    let mut state = ModelState::<f64>::init(model_cfg, LEARN_SEED).unwrap();
    let train_cfg = TrainConfig {
        epochs: LEARN_EPOCHS,
        seed: LEARN_SEED,
        ..TrainConfig::desk()
    };
    train_run(&mut state, &split, &vocab, &train_cfg, 0).unwrap()
}

#[test]
fn criteria_5_and_8_learning_sanity_and_determinism() {
    // all four encodings, each trained twice; two worker threads keep both
    // cores busy while every run stays single-threaded internally
    let kinds = PeriodicKind::ALL;
    let results: Vec<(PeriodicKind, RunReport, String, String)> = {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<(RunReport, String, String)>>> =
            kinds.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..2 {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= kinds.len() {
                        break;
                    }
                    let first = criterion5_run(kinds[i]);
                    let second = criterion5_run(kinds[i]);
                    let (a, b) = (first.to_csv(), second.to_csv());
                    *slots[i].lock().unwrap() = Some((first, a, b));
                });
            }
        });
        kinds
            .iter()
            .zip(slots)
            .map(|(&k, s)| {
                let (r, a, b) = s.into_inner().unwrap().expect("run finished");
                (k, r, a, b)
            })
            .collect()
    };

    for (kind, report, _, _) in &results {
        let last = report.final_row();
        assert!(
            last.val_acc >= 0.99,
            "{kind}: validation token accuracy {:.4} < 0.99 after {LEARN_EPOCHS} epochs",
            last.val_acc
        );
        assert!(
            last.val_bleu >= 95.0,
            "{kind}: validation BLEU-4 {:.2} < 95 after {LEARN_EPOCHS} epochs",
            last.val_bleu
        );
        println!(
            "acceptance criterion 5 ({kind}: copy task, ≤60 epochs, acc ≥99%, BLEU ≥95): PASS \
             (epoch {LEARN_EPOCHS}: acc {:.4}, BLEU {:.2})",
            last.val_acc, last.val_bleu
        );
    }
    for (kind, _, first_csv, second_csv) in &results {
        assert_eq!(
            first_csv, second_csv,
            "{kind}: repeated run with the same seed produced different CSV bytes"
        );
        println!(
            "acceptance criterion 8 ({kind}: byte-identical run CSV on repeat): PASS \
             ({} bytes)",
            first_csv.len()
        );
    }
}

// ---- criterion 6: protocol fidelity ------------------------------------------

#[test]
fn criterion_6_cv_protocol_fidelity() {
    use pewave_core::train::{aggregate_csv, run_cv, CvSpec};
    let corpus = synth_task(SynthTask::Copy, 12, (3, 6), 40, 5).unwrap();
    let base_model = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        dropout_p: 0.1,
        max_len: 32,
        src_vocab_size: 0,
        tgt_vocab_size: 0,
        encoding: PeriodicKind::Sinusoidal,
        embed_scaling: true,
        rope_enabled: false,
        pe_base: 10000.0,
    };
    let spec = CvSpec {
        corpus: &corpus,
        encodings: vec![PeriodicKind::Sinusoidal, PeriodicKind::Sawtooth],
        n_folds: 2,
        base_model,
        train: TrainConfig {
            lr_init: 1e-3,
            epochs: 3,
            batch_size: 16,
            seed: 4,
            ..TrainConfig::default()
        },
        min_freq: 1,
        jobs: 2,
    };
    let report = run_cv(&spec).unwrap();

    // per-fold CSVs exist with the pinned columns; best ≥ final per fold
    assert_eq!(report.outcomes.len(), 4);
    for outcome in &report.outcomes {
        let run = outcome.result.as_ref().expect("fold trained");
        let csv = run.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_bleu,lr\n"));
        assert!(
            run.best_val_bleu >= run.final_row().val_bleu - 1e-9,
            "best BLEU must be a running max"
        );
    }

    // aggregate CSV mirrors the summary-table columns
    let csv = aggregate_csv(&report.summaries);
    assert!(csv.starts_with(
        "encoding,final_train_loss_mean,final_train_loss_std,final_val_loss_mean,final_val_loss_std,final_bleu_mean,final_bleu_std,best_bleu_mean,best_bleu_std\n"
    ));
    assert_eq!(csv.lines().count(), 3);

    // duplicated folds aggregate with zero standard deviation
    let one = report.outcomes[0].result.as_ref().unwrap();
    let duplicated =
        summarize_folds(one.encoding, &[one, one], 0).unwrap();
    assert_eq!(duplicated.final_bleu.std, 0.0);
    assert_eq!(duplicated.final_train_loss.std, 0.0);
    assert_eq!(duplicated.best_bleu.std, 0.0);

    println!(
        "acceptance criterion 6 (2-fold CV: per-fold + aggregate CSVs, best ≥ final, \
         duplicate-fold std = 0): PASS"
    );
}

// ---- criterion 7: directional experiment (informational, non-gating) ---------

/// Informational only: trains all four encodings on the bundled translation
/// sample for 100 epochs and prints their final validation losses side by
/// side. Slow, therefore ignored by default; run explicitly with
/// `cargo test --test acceptance -- --ignored criterion_7 --nocapture`.
/// The README records the observed ordering.
#[test]
#[ignore]
fn criterion_7_directional_experiment() {
    use pewave_core::data::{make_folds, ParallelCorpus};
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/sample-en-de.tsv");
    let corpus = ParallelCorpus::from_tsv(&path).unwrap();
    let plan = make_folds(corpus.len(), 10, 42).unwrap();
    let train_idx = plan.train_indices(0);
    let val_idx = plan.fold(0).to_vec();
    let src_vocab = Vocab::build(
        train_idx.iter().map(|&i| corpus.pairs[i].0.as_slice()),
        2,
    )
    .unwrap();
    let tgt_vocab = Vocab::build(
        train_idx.iter().map(|&i| corpus.pairs[i].1.as_slice()),
        2,
    )
    .unwrap();
    let split = prepare_split(&corpus, &train_idx, &val_idx, &src_vocab, &tgt_vocab);

    let kinds = PeriodicKind::ALL;
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<RunReport>>> =
        kinds.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..2 {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= kinds.len() {
                    break;
                }
                let model_cfg = ModelConfig::desk(kinds[i], src_vocab.len(), tgt_vocab.len());
                let mut state = ModelState::<f64>::init(model_cfg, 42).unwrap();
                let train_cfg = TrainConfig {
                    epochs: 100,
                    seed: 42,
                    ..TrainConfig::desk()
                };
                let report = train_run(&mut state, &split, &tgt_vocab, &train_cfg, 0).unwrap();
                *slots[i].lock().unwrap() = Some(report);
            });
        }
    });
    for (kind, slot) in kinds.iter().zip(slots) {
        let report = slot.into_inner().unwrap().expect("run finished");
        let last = report.final_row();
        println!(
            "{kind}: final train {:.4}, final val {:.4}, final BLEU {:.2}, best BLEU {:.2}",
            last.train_loss, last.val_loss, last.val_bleu, report.best_val_bleu
        );
    }
    println!("acceptance criterion 7 (directional experiment, informational): reported above");
}
