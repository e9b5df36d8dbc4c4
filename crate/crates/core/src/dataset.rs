//! Labeled dataset assembly, train/test splitting, per-feature
//! normalization, and the on-disk dataset container.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{SourceTag, SpectralDataset};

/// Smallest allowed per-feature standard deviation; constant features scale
/// to zero instead of dividing by zero.
pub const STD_FLOOR: f32 = 1e-8;

/// Per-feature standardization statistics, fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Scaler {
    pub fn from_parts(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape(format!(
                "scaler mean/std lengths differ: {} vs {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| s < STD_FLOOR) {
            return Err(Error::Data(format!(
                "scaler std below floor {STD_FLOOR}"
            )));
        }
        Ok(Scaler { mean, std })
    }

    /// Identity scaler (mean 0, std 1) of the given width.
    pub fn identity(width: usize) -> Self {
        Scaler {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    /// Standardizes one row into `out`.
    pub fn apply_row(&self, row: &[f32], out: &mut [f32]) {
        for ((o, &x), (&m, &s)) in out
            .iter_mut()
            .zip(row.iter())
            .zip(self.mean.iter().zip(self.std.iter()))
        {
            *o = (x - m) / s;
        }
    }

    /// Inverse of [`Scaler::apply_row`].
    pub fn unapply_row(&self, row: &[f32], out: &mut [f32]) {
        for ((o, &x), (&m, &s)) in out
            .iter_mut()
            .zip(row.iter())
            .zip(self.mean.iter().zip(self.std.iter()))
        {
            *o = x * s + m;
        }
    }
}

/// Train/test split parameters. Defaults to a seeded, stratified 80/20 split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            stratified: true,
            seed: 0,
        }
    }
}

/// Concatenates per-activity single-class datasets into one labeled dataset.
///
/// Class names are ordered by first appearance of the provided labels; every
/// row of each part receives that part's label. All parts must share the
/// feature width and STFT config.
pub fn assemble(parts: Vec<(SpectralDataset, String)>) -> Result<SpectralDataset> {
    if parts.is_empty() {
        return Err(Error::Argument("assemble requires at least one part".into()));
    }
    let width = parts[0].0.width();
    let config = *parts[0].0.config();
    let mut class_names: Vec<String> = Vec::new();
    for (ds, label) in &parts {
        if ds.width() != width {
            return Err(Error::Shape(format!(
                "activity {label:?} has width {}, expected {width}",
                ds.width()
            )));
        }
        if ds.config() != &config {
            return Err(Error::Shape(format!(
                "activity {label:?} was featurized with a different STFT config"
            )));
        }
        if class_names.iter().any(|c| c == label) {
            return Err(Error::Conflict(format!(
                "duplicate activity label {label:?}"
            )));
        }
        class_names.push(label.clone());
    }

    let total_rows: usize = parts.iter().map(|(ds, _)| ds.rows()).sum();
    let mut features = Vec::with_capacity(total_rows * width);
    let mut labels = Vec::with_capacity(total_rows);
    let mut sources: Vec<SourceTag> = Vec::new();
    let mut row_source = Vec::with_capacity(total_rows);

    for (class_idx, (ds, _)) in parts.iter().enumerate() {
        // Remap this part's source table into the merged table.
        let remap: Vec<u32> = ds
            .sources()
            .iter()
            .map(|tag| {
                if let Some(pos) = sources.iter().position(|t| t == tag) {
                    pos as u32
                } else {
                    sources.push(tag.clone());
                    (sources.len() - 1) as u32
                }
            })
            .collect();
        features.extend_from_slice(ds.features());
        labels.extend(std::iter::repeat(class_idx as u32).take(ds.rows()));
        row_source.extend(ds.row_source_indices().iter().map(|&s| remap[s as usize]));
    }

    SpectralDataset::from_parts(width, features, labels, class_names, sources, row_source, config)
}

/// Splits a dataset into disjoint, exhaustive train and test partitions.
///
/// With stratification, each class contributes `round(test_fraction * size)`
/// test rows; every class needs at least two rows. Deterministic per seed.
pub fn split(ds: &SpectralDataset, spec: &SplitSpec) -> Result<(SpectralDataset, SpectralDataset)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test_fraction must lie in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    if ds.rows() == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test_marks = vec![false; ds.rows()];

    if spec.stratified {
        for class in 0..ds.n_classes() as u32 {
            let mut members: Vec<usize> = (0..ds.rows()).filter(|&i| ds.label(i) == class).collect();
            if members.len() < 2 {
                return Err(Error::Data(format!(
                    "class {:?} has {} rows; stratified split needs at least 2",
                    ds.class_names()[class as usize],
                    members.len()
                )));
            }
            let n_test = (spec.test_fraction * members.len() as f64).round() as usize;
            let n_test = n_test.min(members.len());
            members.shuffle(&mut rng);
            for &i in members.iter().take(n_test) {
                test_marks[i] = true;
            }
        }
    } else {
        let mut all: Vec<usize> = (0..ds.rows()).collect();
        let n_test = (spec.test_fraction * all.len() as f64).round() as usize;
        all.shuffle(&mut rng);
        for &i in all.iter().take(n_test.min(all.len())) {
            test_marks[i] = true;
        }
    }

    let train_idx: Vec<usize> = (0..ds.rows()).filter(|&i| !test_marks[i]).collect();
    let test_idx: Vec<usize> = (0..ds.rows()).filter(|&i| test_marks[i]).collect();
    Ok((ds.select_rows(&train_idx), ds.select_rows(&test_idx)))
}

/// Fits standardization statistics on the training rows.
pub fn fit_scaler(train: &SpectralDataset) -> Result<Scaler> {
    if train.rows() == 0 {
        return Err(Error::Data("cannot fit a scaler on an empty dataset".into()));
    }
    let width = train.width();
    let n = train.rows() as f64;
    let mut mean = vec![0.0f64; width];
    for r in 0..train.rows() {
        for (m, &x) in mean.iter_mut().zip(train.row(r)) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; width];
    for r in 0..train.rows() {
        for ((v, &x), &m) in var.iter_mut().zip(train.row(r)).zip(mean.iter()) {
            let d = x as f64 - m;
            *v += d * d;
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|&v| ((v / n).sqrt() as f32).max(STD_FLOOR))
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    Scaler::from_parts(mean, std)
}

/// Standardizes every row of a dataset with the given scaler.
pub fn apply_scaler(ds: &SpectralDataset, scaler: &Scaler) -> Result<SpectralDataset> {
    if scaler.width() != ds.width() {
        return Err(Error::Shape(format!(
            "scaler width {} does not match dataset width {}",
            scaler.width(),
            ds.width()
        )));
    }
    let width = ds.width();
    let mut features = vec![0.0f32; ds.features().len()];
    for (out, row) in features.chunks_mut(width).zip(ds.features().chunks(width)) {
        scaler.apply_row(row, out);
    }
    Ok(ds.with_features(features))
}

// --- EMDS binary container ------------------------------------------------
//
// magic "EMDS", version u32, n_rows u64, width u64, n_classes u32,
// class-name table (u32 count, then u32 byte length + UTF-8 per name),
// labels as u32[n_rows], features as f32[n_rows * width], all little-endian.

const EMDS_MAGIC: &[u8; 4] = b"EMDS";
const EMDS_VERSION: u32 = 1;

/// Writes a dataset in the EMDS container format.
///
/// Provenance tags and the STFT config are in-memory attributes and are not
/// part of the container.
pub fn write_emds(ds: &SpectralDataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + ds.features().len() * 4 + ds.rows() * 4);
    out.extend_from_slice(EMDS_MAGIC);
    out.extend_from_slice(&EMDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.width() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.class_names().len() as u32).to_le_bytes());
    for name in ds.class_names() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for &label in ds.labels() {
        out.extend_from_slice(&label.to_le_bytes());
    }
    for &x in ds.features() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an EMDS container written by [`write_emds`].
pub fn read_emds(path: &Path) -> Result<SpectralDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);

    let magic = r.take(4)?;
    if magic != EMDS_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected EMDS"));
    }
    let version = r.u32()?;
    if version != EMDS_VERSION {
        return Err(Error::format(
            path,
            r.offset - 4,
            format!("unsupported EMDS version {version}"),
        ));
    }
    let n_rows = r.u64()? as usize;
    let width = r.u64()? as usize;
    let n_classes = r.u32()? as usize;
    let n_names = r.u32()? as usize;
    if n_names != n_classes {
        return Err(Error::format(
            path,
            r.offset - 4,
            format!("class-name table has {n_names} entries for {n_classes} classes"),
        ));
    }
    let mut class_names = Vec::with_capacity(n_names);
    for _ in 0..n_names {
        let len = r.u32()? as usize;
        let at = r.offset;
        let raw = r.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| Error::format(path, at, format!("class name is not UTF-8: {e}")))?;
        class_names.push(name.to_string());
    }
    let mut labels = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        labels.push(r.u32()?);
    }
    let mut features = Vec::with_capacity(n_rows * width);
    for _ in 0..n_rows * width {
        features.push(r.f32()?);
    }
    r.expect_end()?;

    SpectralDataset::from_rows(
        width,
        features,
        labels,
        class_names,
        SourceTag {
            device_id: String::new(),
            session_id: String::new(),
        },
        crate::spectral::StftConfig::default(),
    )
}

/// Little-endian reader that reports the byte offset of any truncation.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) offset: u64,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader {
            bytes,
            offset: 0,
            path,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.offset as usize;
        if start + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.offset,
                format!(
                    "truncated: wanted {n} bytes, only {} remain",
                    self.bytes.len() - start
                ),
            ));
        }
        self.offset += n as u64;
        Ok(&self.bytes[start..start + n])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if (self.offset as usize) < self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.offset,
                format!("{} trailing bytes", self.bytes.len() - self.offset as usize),
            ));
        }
        Ok(())
    }
}
