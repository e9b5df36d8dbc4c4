//! Property tests for the pipeline's algebraic invariants.

use std::collections::BTreeMap;

use num_complex::Complex;
use proptest::prelude::*;

use emsca::dataset::{apply_scaler, fit_scaler, read_emds, split, write_emds, SplitSpec};
use emsca::mlp::new_model;
use emsca::spectral::{
    stft_featurize, window_count, ScaleMode, SourceTag, SpectralDataset, StftConfig, WindowFn,
};
use emsca::trace_io::{read_cfile, write_cfile, CaptureMeta, IqTrace, TraceEntry};

fn entry() -> TraceEntry {
    TraceEntry {
        file: "x.cfile".into(),
        sample_rate_hz: 1e6,
        center_frequency_hz: 2.4e9,
        meta: CaptureMeta::new("dev", "idle", "s0"),
    }
}

fn dataset_from(features: Vec<f32>, width: usize, labels: Vec<u32>, classes: usize) -> SpectralDataset {
    SpectralDataset::from_rows(
        width,
        features,
        labels,
        (0..classes).map(|c| format!("c{c}")).collect(),
        SourceTag {
            device_id: "dev".into(),
            session_id: "s0".into(),
        },
        StftConfig::default(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // write then read restores every sample bit for bit.
    #[test]
    fn cfile_write_read_identity(values in prop::collection::vec(-1e6f32..1e6, 0..600)) {
        let samples: Vec<Complex<f32>> = values
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| Complex::new(c[0], c[1]))
            .collect();
        let e = entry();
        let trace = IqTrace {
            samples: samples.clone(),
            sample_rate_hz: e.sample_rate_hz,
            center_frequency_hz: e.center_frequency_hz,
            meta: e.meta.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cfile");
        write_cfile(&trace, &path).unwrap();
        prop_assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            samples.len() as u64 * 8
        );
        let back = read_cfile(&path, &e).unwrap();
        prop_assert_eq!(back.samples, samples);
    }

    // Row count equals the closed-form window-count formula for every
    // (N, fft, hop) combination.
    #[test]
    fn stft_row_count_matches_formula(
        fft_pow in 3u32..9,
        hop_div in 1usize..5,
        extra in 0usize..2000,
    ) {
        let fft = 1usize << fft_pow;
        let hop = (fft / hop_div).max(1);
        let n = fft + extra;
        let trace = IqTrace {
            samples: vec![Complex::new(0.5f32, -0.25); n],
            sample_rate_hz: 1e6,
            center_frequency_hz: 2.4e9,
            meta: CaptureMeta::new("dev", "idle", "s0"),
        };
        let config = StftConfig {
            fft_size: fft,
            hop,
            window_fn: WindowFn::Hann,
            scale: ScaleMode::LogMagnitude,
        };
        let ds = stft_featurize(&trace, &config).unwrap();
        prop_assert_eq!(Some(ds.rows()), window_count(n, fft, hop));
        prop_assert_eq!(ds.width(), fft);
    }

    // Train and test partition the input rows exactly once.
    #[test]
    fn split_is_an_exact_partition(
        per_class in prop::collection::vec(2usize..12, 2..5),
        fraction in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (class, &count) in per_class.iter().enumerate() {
            for r in 0..count {
                labels.push(class as u32);
                features.extend([class as f32, r as f32, (class * 31 + r) as f32]);
            }
        }
        let ds = dataset_from(features, 3, labels, per_class.len());
        let (train, test) = split(
            &ds,
            &SplitSpec { test_fraction: fraction, stratified: true, seed },
        )
        .unwrap();
        prop_assert_eq!(train.rows() + test.rows(), ds.rows());

        // Multiset equality over rows: every source row appears exactly once.
        let mut seen: Vec<Vec<u32>> = Vec::new();
        for part in [&train, &test] {
            for r in 0..part.rows() {
                seen.push(part.row(r).iter().map(|f| f.to_bits()).collect());
            }
        }
        seen.sort();
        let mut expected: Vec<Vec<u32>> = (0..ds.rows())
            .map(|r| ds.row(r).iter().map(|f| f.to_bits()).collect())
            .collect();
        expected.sort();
        prop_assert_eq!(seen, expected);

        // Per-class test counts stay within 1 of the requested fraction.
        for (class, &count) in per_class.iter().enumerate() {
            let in_test = test.labels().iter().filter(|&&l| l == class as u32).count();
            let want = fraction * count as f64;
            prop_assert!((in_test as f64 - want).abs() <= 1.0);
        }
    }

    // Standardize then invert recovers the original features.
    #[test]
    fn scaler_round_trips(
        rows in 2usize..20,
        width in 1usize..8,
        seed in any::<u32>(),
    ) {
        let features: Vec<f32> = (0..rows * width)
            .map(|i| {
                let x = (i as u64).wrapping_mul(seed as u64 + 1).wrapping_mul(0x9e3779b9) % 10_000;
                x as f32 / 50.0 - 100.0
            })
            .collect();
        let ds = dataset_from(features, width, vec![0; rows], 1);
        let scaler = fit_scaler(&ds).unwrap();
        let scaled = apply_scaler(&ds, &scaler).unwrap();
        let mut recovered = vec![0.0f32; width];
        for r in 0..rows {
            scaler.unapply_row(scaled.row(r), &mut recovered);
            for (orig, rec) in ds.row(r).iter().zip(&recovered) {
                let tolerance = 1e-6 * orig.abs().max(1.0);
                prop_assert!((orig - rec).abs() <= tolerance, "{orig} vs {rec}");
            }
        }
    }

    // Dataset container round trip.
    #[test]
    fn emds_round_trips(
        rows in 1usize..20,
        width in 1usize..10,
        classes in 1usize..4,
    ) {
        let features: Vec<f32> = (0..rows * width).map(|i| (i as f32).sin()).collect();
        let labels: Vec<u32> = (0..rows).map(|r| (r % classes) as u32).collect();
        let ds = dataset_from(features, width, labels, classes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.emds");
        write_emds(&ds, &path).unwrap();
        let back = read_emds(&path).unwrap();
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.class_names(), ds.class_names());
    }

    // Softmax rows sum to one for arbitrary finite inputs, including large
    // magnitudes, thanks to max subtraction.
    #[test]
    fn softmax_rows_sum_to_one(
        scale in prop::sample::select(vec![1.0f32, 100.0, 1e4]),
        values in prop::collection::vec(-1.0f32..1.0, 6),
    ) {
        let model = new_model(&[6, 4], 1).unwrap();
        let feats: Vec<f32> = values.iter().map(|v| v * scale).collect();
        let probs = model.forward(&feats).unwrap();
        let sum: f32 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(probs.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }
}

/// Direct cells of a portability matrix are reproducible bit-exactly from
/// the saved model and dataset artifacts.
#[test]
fn direct_cells_reproducible_from_saved_artifacts() {
    use emsca::eval::{cross_matrix, evaluate, ExperimentConfig};
    use emsca::mlp::{MlpModel, TrainConfig};
    use emsca::transfer::FreezeSpec;

    let mut corpus = BTreeMap::new();
    for d in 0..2 {
        let id = format!("dev{d}");
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for r in 0..120 {
            let class = r % 3;
            labels.push(class as u32);
            for c in 0..5 {
                let bump = if c == class { 2.0 } else { 0.0 };
                features.push(bump + ((r * 7 + c * 13 + d * 29) % 11) as f32 * 0.05);
            }
        }
        let ds = dataset_from(features, 5, labels, 3);
        let (train, test) = split(
            &ds,
            &SplitSpec {
                seed: d as u64,
                ..SplitSpec::default()
            },
        )
        .unwrap();
        corpus.insert(id, (train, test));
    }
    let config = ExperimentConfig {
        train: TrainConfig {
            epochs: 4,
            batch_size: 32,
            seed: 3,
            ..TrainConfig::default()
        },
        freeze: FreezeSpec::default(),
        hidden_dims: vec![8],
    };
    let outcome = cross_matrix(&corpus, &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    for (i, model_id) in outcome.matrix.model_ids.iter().enumerate() {
        let path = dir.path().join(format!("{model_id}.emnn"));
        outcome.models[model_id].save(&path).unwrap();
        let reloaded = MlpModel::load(&path).unwrap();
        for (j, dataset_id) in outcome.matrix.dataset_ids.iter().enumerate() {
            let (_, test) = &corpus[dataset_id];
            let report = evaluate(&reloaded, test).unwrap();
            assert_eq!(report.accuracy, outcome.matrix.cell(i, j).direct_accuracy);
        }
    }
}
