//! STFT feature extraction: time-domain IQ traces to labeled frequency-domain
//! feature windows.
//!
//! Each window is one training instance: the scaled magnitude of the
//! `fft_size`-point DFT of one (optionally Hann-weighted) segment, bins in
//! natural DFT order. The forward DFT is unnormalized; normalization is the
//! dataset scaler's job.

use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_io::IqTrace;

/// Floor applied to magnitudes before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFn {
    Rectangular,
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Magnitude,
    #[default]
    LogMagnitude,
}

/// STFT parameters. Defaults: 2048-point FFT, 50% overlap, Hann window,
/// log-magnitude scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
    pub scale: ScaleMode,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 2048,
            hop: 1024,
            window_fn: WindowFn::default(),
            scale: ScaleMode::default(),
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            return Err(Error::Argument(format!(
                "fft_size must be a power of two, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Argument(format!(
                "hop must satisfy 1 <= hop <= fft_size, got hop {} for fft_size {}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }
}

/// Number of STFT windows a signal of `n_samples` yields, or `None` when the
/// signal is shorter than one window.
pub fn window_count(n_samples: usize, fft_size: usize, hop: usize) -> Option<usize> {
    if n_samples < fft_size {
        None
    } else {
        Some((n_samples - fft_size) / hop + 1)
    }
}

/// Origin of a dataset row: which device and capture session produced it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceTag {
    pub device_id: String,
    pub session_id: String,
}

/// Matrix of labeled STFT feature vectors; the unit of training and
/// evaluation.
///
/// Rows are stored contiguously (`rows x width`, row-major). Every row
/// carries a class label (an index into `class_names`) and a provenance tag
/// (an index into the deduplicated source table).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDataset {
    width: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
    class_names: Vec<String>,
    sources: Vec<SourceTag>,
    row_source: Vec<u32>,
    config: StftConfig,
}

impl SpectralDataset {
    /// Builds a dataset from raw parts, validating every invariant.
    pub fn from_parts(
        width: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        class_names: Vec<String>,
        sources: Vec<SourceTag>,
        row_source: Vec<u32>,
        config: StftConfig,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Shape("dataset width must be positive".into()));
        }
        if features.len() % width != 0 {
            return Err(Error::Shape(format!(
                "feature buffer length {} is not a multiple of width {width}",
                features.len()
            )));
        }
        let rows = features.len() / width;
        if labels.len() != rows || row_source.len() != rows {
            return Err(Error::Shape(format!(
                "row count mismatch: {rows} feature rows, {} labels, {} provenance tags",
                labels.len(),
                row_source.len()
            )));
        }
        let n_classes = class_names.len() as u32;
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &class_names {
            if !seen.insert(name) {
                return Err(Error::Conflict(format!("duplicate class name {name:?}")));
            }
        }
        if let Some(bad) = row_source.iter().find(|&&s| s as usize >= sources.len()) {
            return Err(Error::Shape(format!(
                "provenance index {bad} out of range for {} sources",
                sources.len()
            )));
        }
        Ok(SpectralDataset {
            width,
            features,
            labels,
            class_names,
            sources,
            row_source,
            config,
        })
    }

    /// Convenience constructor for rows that all share one source.
    pub fn from_rows(
        width: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        class_names: Vec<String>,
        source: SourceTag,
        config: StftConfig,
    ) -> Result<Self> {
        let rows = if width == 0 { 0 } else { features.len() / width };
        Self::from_parts(
            width,
            features,
            labels,
            class_names,
            vec![source],
            vec![0; rows],
            config,
        )
    }

    pub fn rows(&self) -> usize {
        self.features.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn provenance(&self, i: usize) -> &SourceTag {
        &self.sources[self.row_source[i] as usize]
    }

    pub fn sources(&self) -> &[SourceTag] {
        &self.sources
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Copies the selected rows into a new dataset, preserving labels,
    /// class names, and provenance.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        let mut row_source = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            row_source.push(self.row_source[i]);
        }
        SpectralDataset {
            width: self.width,
            features,
            labels,
            class_names: self.class_names.clone(),
            sources: self.sources.clone(),
            row_source,
            config: self.config,
        }
    }

    pub(crate) fn row_source_indices(&self) -> &[u32] {
        &self.row_source
    }

    pub(crate) fn with_features(&self, features: Vec<f32>) -> Self {
        assert_eq!(features.len(), self.features.len());
        SpectralDataset {
            width: self.width,
            features,
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            sources: self.sources.clone(),
            row_source: self.row_source.clone(),
            config: self.config,
        }
    }
}

/// Computes the STFT feature matrix of one trace.
///
/// The result is single-class: every row is labeled 0 with the trace's
/// activity label as the only class name. Row count follows
/// [`window_count`]; a trace shorter than one window is an error.
pub fn stft_featurize(trace: &IqTrace, config: &StftConfig) -> Result<SpectralDataset> {
    config.validate()?;
    trace.validate()?;
    let n = trace.samples.len();
    let fft_size = config.fft_size;
    let rows = window_count(n, fft_size, config.hop).ok_or_else(|| {
        Error::Data(format!(
            "trace of {n} samples is shorter than one {fft_size}-sample window"
        ))
    })?;

    let window = make_window(config.window_fn, fft_size);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0f64, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0f64, 0.0); fft.get_inplace_scratch_len()];

    let mut features = Vec::with_capacity(rows * fft_size);
    for r in 0..rows {
        let start = r * config.hop;
        let segment = &trace.samples[start..start + fft_size];
        for (dst, (s, w)) in buf.iter_mut().zip(segment.iter().zip(window.iter())) {
            *dst = Complex::new(s.re as f64 * w, s.im as f64 * w);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        match config.scale {
            ScaleMode::Magnitude => {
                features.extend(buf.iter().map(|c| c.norm() as f32));
            }
            ScaleMode::LogMagnitude => {
                features.extend(buf.iter().map(|c| c.norm().max(LOG_FLOOR).ln() as f32));
            }
        }
    }

    SpectralDataset::from_rows(
        fft_size,
        features,
        vec![0; rows],
        vec![trace.meta.activity_label.clone()],
        SourceTag {
            device_id: trace.meta.device_id.clone(),
            session_id: trace.meta.session_id.clone(),
        },
        *config,
    )
}

fn make_window(window_fn: WindowFn, n: usize) -> Vec<f64> {
    match window_fn {
        WindowFn::Rectangular => vec![1.0; n],
        WindowFn::Hann => (0..n)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TakeStrategy {
    Head,
    UniformStride,
}

/// Keeps at most `n` rows of a dataset.
///
/// `Head` takes the first rows; `UniformStride` takes every
/// `floor(rows / n)`-th row starting at 0. Both strategies are fully
/// deterministic; the seed is recorded for strategies that may need one.
pub fn take_windows(
    ds: &SpectralDataset,
    n: usize,
    strategy: TakeStrategy,
    seed: u64,
) -> Result<SpectralDataset> {
    let _ = seed;
    if n == 0 {
        return Err(Error::Argument("take_windows requires n >= 1".into()));
    }
    if ds.rows() == 0 {
        return Err(Error::Data("take_windows requires a non-empty dataset".into()));
    }
    let rows = ds.rows();
    let keep = n.min(rows);
    let indices: Vec<usize> = match strategy {
        TakeStrategy::Head => (0..keep).collect(),
        TakeStrategy::UniformStride => {
            let stride = rows / keep;
            (0..keep).map(|i| i * stride).collect()
        }
    };
    Ok(ds.select_rows(&indices))
}
