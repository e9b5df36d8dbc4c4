//! Acceptance suite: one test per criterion, at full experiment scale.
//!
//! The expensive fixtures (the synthetic corpus and the trained portability
//! matrices) are built once and shared. Every test prints a `ACCEPTANCE n
//! (...): PASS` line on success (visible with `--nocapture`); a failed
//! criterion fails its test.

use std::collections::BTreeMap;
use std::sync::LazyLock;
use std::time::Instant;

use emsca::dataset::{split, SplitSpec};
use emsca::eval::{cross_matrix, device_discriminator, fit_pca, session_matrix, CrossOutcome};
use emsca::mlp::{default_dims, gradient_check, new_model, TrainConfig};
use emsca::seeding::derive_seed;
use emsca::spectral::{
    stft_featurize, window_count, ScaleMode, SourceTag, SpectralDataset, StftConfig, WindowFn,
};
use emsca::synth::{gen_corpus, SynthConfig};
use emsca::trace_io::{CaptureMeta, IqTrace};
use emsca::transfer::{compare_cost, FreezeSpec};

const MASTER_SEED: u64 = 20480;
const WINDOWS_PER_ACTIVITY: usize = 2000;

fn experiment_config() -> emsca::eval::ExperimentConfig {
    emsca::eval::ExperimentConfig {
        train: TrainConfig {
            seed: derive_seed(MASTER_SEED, &["experiment"]),
            ..TrainConfig::default()
        },
        freeze: FreezeSpec::default(),
        hidden_dims: emsca::mlp::DEFAULT_HIDDEN_DIMS.to_vec(),
    }
}

fn split_by(
    corpus: BTreeMap<(String, String), SpectralDataset>,
    key_by_session: bool,
) -> BTreeMap<String, (SpectralDataset, SpectralDataset)> {
    corpus
        .into_iter()
        .map(|((device, session), ds)| {
            let key = if key_by_session { session } else { device };
            let spec = SplitSpec {
                seed: derive_seed(MASTER_SEED, &["split", &key]),
                ..SplitSpec::default()
            };
            let (train, test) = split(&ds, &spec).expect("split");
            (key, (train, test))
        })
        .collect()
}

struct CrossState {
    outcome: CrossOutcome,
    idle_sets: BTreeMap<String, SpectralDataset>,
    corpus_seconds: f64,
    training_seconds: f64,
}

/// Desk-scale cross-device experiment: 3 devices x 10 activities x 2,000
/// windows at the 2048-bin default STFT, one clean session.
static CROSS: LazyLock<CrossState> = LazyLock::new(|| {
    let config = SynthConfig::smartphone_default().restrict(
        &["iPhone13-I", "iPhone13-II", "iPhone13-III"],
        &["s0"],
    );
    let t0 = Instant::now();
    let corpus = gen_corpus(
        &config,
        WINDOWS_PER_ACTIVITY,
        &StftConfig::default(),
        derive_seed(MASTER_SEED, &["corpus"]),
    )
    .expect("corpus generation");
    let corpus_seconds = t0.elapsed().as_secs_f64();

    // Idle-only single-class sets for the device discriminator.
    let idle_sets = corpus
        .iter()
        .map(|((device, _), ds)| {
            let idle = ds
                .class_names()
                .iter()
                .position(|c| c == "idle")
                .expect("idle activity present");
            let rows: Vec<usize> =
                (0..ds.rows()).filter(|&r| ds.label(r) == idle as u32).collect();
            let subset = ds.select_rows(&rows);
            let single = SpectralDataset::from_rows(
                subset.width(),
                subset.features().to_vec(),
                vec![0; subset.rows()],
                vec!["idle".into()],
                SourceTag {
                    device_id: device.clone(),
                    session_id: "s0".into(),
                },
                *subset.config(),
            )
            .expect("idle subset");
            (device.clone(), single)
        })
        .collect();

    let per_device = split_by(corpus, false);
    let t1 = Instant::now();
    let outcome = cross_matrix(&per_device, &experiment_config()).expect("cross matrix");
    let training_seconds = t1.elapsed().as_secs_f64();
    println!("{}", outcome.matrix.to_table());
    CrossState {
        outcome,
        idle_sets,
        corpus_seconds,
        training_seconds,
    }
});

/// Cross-session experiment: one device, three sessions with drift.
static SESSIONS: LazyLock<CrossOutcome> = LazyLock::new(|| {
    let config =
        SynthConfig::smartphone_default().restrict(&["iPhone13-I"], &["s0", "s1", "s2"]);
    let corpus = gen_corpus(
        &config,
        WINDOWS_PER_ACTIVITY,
        &StftConfig::default(),
        derive_seed(MASTER_SEED, &["session-corpus"]),
    )
    .expect("session corpus");
    let per_session = split_by(corpus, true);
    let outcome = session_matrix(&per_session, &experiment_config()).expect("session matrix");
    println!("{}", outcome.matrix.to_table());
    outcome
});

#[test]
fn acceptance_01_parameter_count_exactness() {
    let t0 = Instant::now();
    let model = new_model(&default_dims(2048, 10), 0).unwrap();
    assert_eq!(
        model.layer_param_counts(),
        vec![2_868_600, 1_120_800, 400_500, 100_200, 20_100, 1_010]
    );
    assert_eq!(model.count_params(), (4_511_210, 4_511_210));
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "took {elapsed:.3} s, budget 1 s");
    println!("ACCEPTANCE 1 (parameter-count exactness): PASS ({elapsed:.3} s)");
}

#[test]
fn acceptance_02_freeze_accounting() {
    let mut model = new_model(&default_dims(2048, 10), 0).unwrap();
    let mask = FreezeSpec::default().trainable_mask(model.n_layers()).unwrap();
    model.set_trainable(mask).unwrap();
    let (trainable, total) = model.count_params();
    assert_eq!(trainable, 1_010);
    assert_eq!(total - trainable, 4_510_200);
    println!("ACCEPTANCE 2 (freeze accounting): PASS (1,010 trainable / 4,510,200 frozen)");
}

#[test]
fn acceptance_03_iot_variant_final_layer() {
    let model = new_model(&default_dims(2048, 8), 0).unwrap();
    assert_eq!(*model.layer_param_counts().last().unwrap(), 808);
    println!("ACCEPTANCE 3 (8-class final layer): PASS (808 params)");
}

#[test]
fn acceptance_04_gradient_correctness() {
    let t0 = Instant::now();
    let worst_small = gradient_check::max_relative_error(&[4, 3, 2], 10, 6, 2);
    let worst = gradient_check::max_relative_error(&[16, 8, 8, 4], 100, 8, 3);
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(worst_small <= 1e-4, "[4,3,2] max relative error {worst_small}");
    assert!(worst <= 1e-4, "[16,8,8,4] max relative error {worst}");
    assert!(elapsed < 30.0, "took {elapsed:.1} s, budget 30 s");
    println!(
        "ACCEPTANCE 4 (gradient correctness): PASS (max rel err {worst:.2e}, {elapsed:.1} s)"
    );
}

#[test]
fn acceptance_05_same_device_accuracy() {
    let state = &*CROSS;
    let matrix = &state.outcome.matrix;
    for (i, id) in matrix.model_ids.iter().enumerate() {
        let acc = matrix.cell(i, i).direct_accuracy;
        assert!(acc >= 0.95, "device {id} held-out accuracy {acc}");
        println!("  {id}: held-out accuracy {acc:.4}");
    }
    println!(
        "ACCEPTANCE 5 (same-device accuracy >= 0.95): PASS \
         (corpus {:.0} s, training {:.0} s; runtime target 10 min)",
        state.corpus_seconds, state.training_seconds
    );
}

#[test]
fn acceptance_06_cross_device_collapse() {
    let matrix = &CROSS.outcome.matrix;
    let n = matrix.model_ids.len();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let acc = matrix.cell(i, j).direct_accuracy;
                assert!(
                    acc <= 0.40,
                    "direct {} -> {} accuracy {acc}",
                    matrix.model_ids[i],
                    matrix.dataset_ids[j]
                );
            }
        }
    }
    println!("ACCEPTANCE 6 (cross-device direct <= 0.40): PASS");
}

#[test]
fn acceptance_07_transfer_recovery() {
    let matrix = &CROSS.outcome.matrix;
    let n = matrix.model_ids.len();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let cell = matrix.cell(i, j);
                let transfer = cell.transfer_accuracy.expect("off-diagonal transfer");
                assert!(
                    transfer >= 0.75,
                    "transfer {} -> {} accuracy {transfer}",
                    matrix.model_ids[i],
                    matrix.dataset_ids[j]
                );
                assert!(
                    transfer > cell.direct_accuracy,
                    "transfer {transfer} not above direct {} at ({i},{j})",
                    cell.direct_accuracy
                );
            }
        }
    }
    println!("ACCEPTANCE 7 (transfer >= 0.75 and > direct): PASS");
}

#[test]
fn acceptance_08_cross_session_analogue() {
    let outcome = &*SESSIONS;
    let matrix = &outcome.matrix;
    let n = matrix.model_ids.len();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let cell = matrix.cell(i, j);
                let transfer = cell.transfer_accuracy.expect("off-diagonal transfer");
                assert!(
                    cell.direct_accuracy <= 0.40,
                    "session direct {} -> {} accuracy {}",
                    matrix.model_ids[i],
                    matrix.dataset_ids[j],
                    cell.direct_accuracy
                );
                assert!(
                    transfer - cell.direct_accuracy >= 0.20,
                    "session gap at ({i},{j}): transfer {transfer}, direct {}",
                    cell.direct_accuracy
                );
            }
        }
    }
    println!("ACCEPTANCE 8 (session collapse and transfer gap): PASS");
}

#[test]
fn acceptance_09_transfer_cost() {
    let outcome = &CROSS.outcome;
    for cell in &outcome.transfer_reports {
        let full = &outcome.fit_reports[&cell.dataset_id];
        let summary = compare_cost(full, &cell.report);
        assert!(summary.warning.is_none(), "{:?}", summary.warning);
        assert!(
            summary.time_ratio <= 0.6,
            "transfer {} -> {}: time ratio {:.3}",
            cell.model_id,
            cell.dataset_id,
            summary.time_ratio
        );
        let expected_ratio = 1_010.0 / 4_511_210.0;
        assert!((summary.param_ratio - expected_ratio).abs() < 1e-12);
    }
    let worst = outcome
        .transfer_reports
        .iter()
        .map(|c| c.report.wall_time_seconds / CROSS.outcome.fit_reports[&c.dataset_id].wall_time_seconds)
        .fold(0.0f64, f64::max);
    println!("ACCEPTANCE 9 (transfer cost <= 0.6x full): PASS (worst ratio {worst:.3})");
}

#[test]
fn acceptance_10_device_discriminator() {
    let state = &*CROSS;
    let (report, model) = device_discriminator(
        &state.idle_sets,
        &experiment_config(),
        &SplitSpec {
            seed: derive_seed(MASTER_SEED, &["discriminator-split"]),
            ..SplitSpec::default()
        },
    )
    .expect("discriminator");
    assert_eq!(*model.dims().last().unwrap(), 3);
    assert_eq!(*model.layer_param_counts().last().unwrap(), 303);
    assert!(report.accuracy >= 0.99, "accuracy {}", report.accuracy);
    println!(
        "ACCEPTANCE 10 (3-class idle discriminator >= 0.99): PASS ({:.4})",
        report.accuracy
    );
}

#[test]
fn acceptance_11_stft_correctness() {
    // Window-count formula over a grid, checked against real featurization.
    for &fft in &[64usize, 256, 1024] {
        for &hop in &[fft / 4, fft / 2, fft] {
            for &n in &[fft, fft + 1, fft + hop, 3 * fft + 7, 10 * fft] {
                let trace = IqTrace {
                    samples: vec![num_complex::Complex::new(1.0f32, 0.0); n],
                    sample_rate_hz: 1e6,
                    center_frequency_hz: 1e9,
                    meta: CaptureMeta::new("d", "idle", "s0"),
                };
                let config = StftConfig {
                    fft_size: fft,
                    hop,
                    window_fn: WindowFn::Rectangular,
                    scale: ScaleMode::Magnitude,
                };
                let ds = stft_featurize(&trace, &config).unwrap();
                assert_eq!(Some(ds.rows()), window_count(n, fft, hop), "N={n} fft={fft} hop={hop}");
            }
        }
    }
    assert_eq!(window_count(20_480_000, 2048, 1024), Some(19_999));

    // Pure tone at bin 10 for a 2048-point FFT at 20 MHz.
    let fs = 20e6;
    let n = 2048 * 8;
    let samples: Vec<num_complex::Complex<f32>> = (0..n)
        .map(|i| {
            let phase = std::f64::consts::TAU * 97_656.25 * i as f64 / fs;
            num_complex::Complex::new(phase.cos() as f32, phase.sin() as f32)
        })
        .collect();
    let trace = IqTrace {
        samples: samples.clone(),
        sample_rate_hz: fs,
        center_frequency_hz: 3.23e9,
        meta: CaptureMeta::new("d", "idle", "s0"),
    };
    let config = StftConfig {
        fft_size: 2048,
        hop: 1024,
        window_fn: WindowFn::Rectangular,
        scale: ScaleMode::Magnitude,
    };
    let ds = stft_featurize(&trace, &config).unwrap();
    for r in 0..ds.rows() {
        let row = ds.row(r);
        let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 10, "row {r}");
    }

    // Parseval for every row.
    for r in 0..ds.rows() {
        let freq_energy: f64 = ds.row(r).iter().map(|&m| m as f64 * m as f64).sum();
        let time_energy: f64 = samples[r * 1024..r * 1024 + 2048]
            .iter()
            .map(|s| s.re as f64 * s.re as f64 + s.im as f64 * s.im as f64)
            .sum();
        let expect = 2048.0 * time_energy;
        assert!(
            (freq_energy - expect).abs() <= 1e-6 * expect,
            "row {r}: {freq_energy} vs {expect}"
        );
    }
    println!("ACCEPTANCE 11 (STFT window count, tone bin, Parseval): PASS");
}

#[test]
fn acceptance_12_pca_properties() {
    // Orthonormality and ordering on structured random data.
    let mut features = Vec::new();
    let mut state = 99u64;
    for r in 0..300 {
        for c in 0..16 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let noise = ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            let signal = ((r as f64) * 0.1).sin() * ((c as f64) + 1.0);
            features.push((signal + 0.3 * noise) as f32);
        }
    }
    let ds = SpectralDataset::from_rows(
        16,
        features,
        vec![0; 300],
        vec!["x".into()],
        SourceTag {
            device_id: "d".into(),
            session_id: "s".into(),
        },
        StftConfig::default(),
    )
    .unwrap();
    let pca = fit_pca(&ds, 5).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let dot: f64 = pca
                .component(i)
                .iter()
                .zip(pca.component(j))
                .map(|(&a, &b)| a * b)
                .sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((dot - expect).abs() <= 1e-6, "({i},{j}) dot {dot}");
        }
    }
    for w in pca.explained_variance.windows(2) {
        assert!(w[0] >= w[1], "variances not ordered: {w:?}");
    }

    // Rank-1 data: one nonzero variance.
    let mut line = Vec::new();
    for i in 0..64 {
        let t = i as f32 * 0.25 - 8.0;
        line.extend_from_slice(&[1.0 + 2.0 * t, -3.0 * t, 0.5 + t]);
    }
    let line_ds = SpectralDataset::from_rows(
        3,
        line,
        vec![0; 64],
        vec!["x".into()],
        SourceTag {
            device_id: "d".into(),
            session_id: "s".into(),
        },
        StftConfig::default(),
    )
    .unwrap();
    let pca = fit_pca(&line_ds, 3).unwrap();
    assert!(pca.explained_variance[0] > 1.0);
    assert!(pca.explained_variance[1] <= 1e-9, "{}", pca.explained_variance[1]);
    assert!(pca.explained_variance[2] <= 1e-9, "{}", pca.explained_variance[2]);
    println!("ACCEPTANCE 12 (PCA orthonormality, ordering, rank-1): PASS");
}

#[test]
fn acceptance_13_cli_reproducibility() {
    use std::process::Command;

    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_emsca");

    // Small custom corpus keeps the command round fast; determinism is the
    // property under test.
    let mut config = SynthConfig::iot_default();
    config.activities.truncate(4);
    let config_path = dir.path().join("devices.json");
    std::fs::write(&config_path, config.to_json()).unwrap();

    let corpus_dir = dir.path().join("corpus");
    let status = Command::new(bin)
        .args([
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            corpus_dir.to_str().unwrap(),
            "--seed",
            "7",
            "--windows",
            "40",
            "--fft",
            "256",
            "--sessions",
            "1",
        ])
        .status()
        .unwrap();
    assert!(status.success(), "synth failed");

    let train_once = |out: &str| {
        let out_dir = dir.path().join(out);
        let status = Command::new(bin)
            .args([
                "train",
                "--corpus",
                corpus_dir.to_str().unwrap(),
                "--device",
                "Nordic-1",
                "--fft",
                "256",
                "--hidden",
                "32,16",
                "--epochs",
                "3",
                "--seed",
                "11",
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success(), "train failed");
        (
            std::fs::read(out_dir.join("model.emnn")).unwrap(),
            std::fs::read(out_dir.join("report.json")).unwrap(),
        )
    };
    let (model_a, report_a) = train_once("run-a");
    let (model_b, report_b) = train_once("run-b");
    assert_eq!(model_a, model_b, "model files differ between identical runs");
    assert_eq!(report_a, report_b, "reports differ between identical runs");

    // Evaluation is likewise byte-stable.
    let eval_once = |out: &str| {
        let out_dir = dir.path().join(out);
        let status = Command::new(bin)
            .args([
                "evaluate",
                "--model",
                dir.path().join("run-a/model.emnn").to_str().unwrap(),
                "--corpus",
                corpus_dir.to_str().unwrap(),
                "--device",
                "Nordic-1",
                "--fft",
                "256",
                "--seed",
                "11",
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success(), "evaluate failed");
        std::fs::read(out_dir.join("report.json")).unwrap()
    };
    assert_eq!(eval_once("eval-a"), eval_once("eval-b"));
    println!("ACCEPTANCE 13 (seeded reruns byte-identical): PASS");
}
