//! Evaluation: accuracy and confusion reporting, cross-device and
//! cross-session portability matrices, PCA fingerprint analysis, and the
//! idle-activity device discriminator.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{assemble, split, SplitSpec};
use crate::error::{Error, Result};
use crate::mlp::{new_model, MlpModel, TrainConfig, TrainReport};
use crate::seeding::derive_seed;
use crate::spectral::SpectralDataset;
use crate::transfer::{transfer_fit, FreezeSpec};

/// Accuracy, confusion matrix (rows = true class, columns = predicted), and
/// per-class recall of one model on one test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class_recall: Vec<f64>,
    pub class_names: Vec<String>,
}

impl EvalReport {
    fn from_predictions(truth: &[u32], predicted: &[u32], class_names: &[String]) -> Self {
        let k = class_names.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t as usize][p as usize] += 1;
        }
        let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let per_class_recall = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[c] as f64 / total as f64
                }
            })
            .collect();
        EvalReport {
            accuracy: correct as f64 / truth.len().max(1) as f64,
            confusion,
            per_class_recall,
            class_names: class_names.to_vec(),
        }
    }

    /// Aligned plain-text confusion table.
    pub fn to_table(&self) -> String {
        let name_w = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let cell_w = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(6);
        let mut out = String::new();
        out.push_str(&format!("{:name_w$}  ", "true\\pred"));
        for name in &self.class_names {
            out.push_str(&format!("{name:>cell_w$}  "));
        }
        out.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:name_w$}  ", self.class_names[c]));
            for v in row {
                out.push_str(&format!("{v:>cell_w$}  "));
            }
            out.push_str(&format!("recall {:.4}\n", self.per_class_recall[c]));
        }
        out.push_str(&format!("accuracy {:.4}\n", self.accuracy));
        out
    }
}

/// Scores a model on a test set using the model's own scaler.
pub fn evaluate(model: &MlpModel, test: &SpectralDataset) -> Result<EvalReport> {
    if test.n_classes() != model.n_classes() {
        return Err(Error::Contract(format!(
            "test set has {} classes, model outputs {}",
            test.n_classes(),
            model.n_classes()
        )));
    }
    if !model.class_names().is_empty() && model.class_names() != test.class_names() {
        return Err(Error::Contract(format!(
            "class names differ: model {:?} vs test {:?}",
            model.class_names(),
            test.class_names()
        )));
    }
    if test.rows() == 0 {
        return Err(Error::Data("test set is empty".into()));
    }
    let predicted = model.predict(test)?;
    Ok(EvalReport::from_predictions(
        test.labels(),
        &predicted,
        test.class_names(),
    ))
}

/// One cell of a portability matrix: accuracy of a model applied directly to
/// a dataset, and after output-layer transfer (absent on the diagonal).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CrossCell {
    pub direct_accuracy: f64,
    pub transfer_accuracy: Option<f64>,
}

/// Model x dataset accuracy grid; the shape of the portability tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub model_ids: Vec<String>,
    pub dataset_ids: Vec<String>,
    /// Indexed `cells[model][dataset]`.
    pub cells: Vec<Vec<CrossCell>>,
}

impl CrossMatrix {
    pub fn cell(&self, model: usize, dataset: usize) -> &CrossCell {
        &self.cells[model][dataset]
    }

    /// Aligned plain-text table: one row pair (Direct / Transfer) per
    /// dataset, one column per model, dashes on the transfer diagonal.
    pub fn to_table(&self) -> String {
        let label_w = self
            .dataset_ids
            .iter()
            .map(|d| d.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let col_w = self.model_ids.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        out.push_str(&format!("{:label_w$}  {:8}  ", "Dataset", "Mode"));
        for m in &self.model_ids {
            out.push_str(&format!("{m:>col_w$}  "));
        }
        out.push('\n');
        for (j, d) in self.dataset_ids.iter().enumerate() {
            out.push_str(&format!("{d:label_w$}  {:8}  ", "Direct"));
            for i in 0..self.model_ids.len() {
                out.push_str(&format!("{:>col_w$.4}  ", self.cells[i][j].direct_accuracy));
            }
            out.push('\n');
            out.push_str(&format!("{:label_w$}  {:8}  ", "", "Transfer"));
            for i in 0..self.model_ids.len() {
                match self.cells[i][j].transfer_accuracy {
                    Some(acc) => out.push_str(&format!("{acc:>col_w$.4}  ")),
                    None => out.push_str(&format!("{:>col_w$}  ", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// How a portability experiment trains its per-corpus models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub freeze: FreezeSpec,
    /// Hidden layer widths; input width and class count come from the data.
    pub hidden_dims: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            freeze: FreezeSpec::default(),
            hidden_dims: crate::mlp::DEFAULT_HIDDEN_DIMS.to_vec(),
        }
    }
}

/// Transfer fit report for one off-diagonal cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub model_id: String,
    pub dataset_id: String,
    pub report: TrainReport,
}

/// Everything a portability experiment produces: the accuracy grid, the
/// per-corpus models, and the training reports behind every cell.
#[derive(Debug)]
pub struct CrossOutcome {
    pub matrix: CrossMatrix,
    pub models: BTreeMap<String, MlpModel>,
    pub fit_reports: BTreeMap<String, TrainReport>,
    pub transfer_reports: Vec<CellReport>,
}

/// Cross-device portability experiment over `{device_id -> (train, test)}`.
///
/// Trains one model per device, fills direct cells by applying model `i` to
/// test set `j`, and fills off-diagonal transfer cells by retraining model
/// `i` on train set `j` under the freeze spec (validated against test `j`,
/// which also scores the cell). Cells are independent and may run in
/// parallel; per-cell seeds derive from the config seed and the ids, so
/// results do not depend on scheduling.
pub fn cross_matrix(
    corpus: &BTreeMap<String, (SpectralDataset, SpectralDataset)>,
    config: &ExperimentConfig,
) -> Result<CrossOutcome> {
    if corpus.len() < 2 {
        return Err(Error::Contract(format!(
            "portability needs at least 2 corpora, got {}",
            corpus.len()
        )));
    }
    let ids: Vec<&String> = corpus.keys().collect();
    let (first_train, _) = &corpus[ids[0]];
    let class_names = first_train.class_names().to_vec();
    let width = first_train.width();
    for id in &ids {
        let (train, test) = &corpus[*id];
        for (role, ds) in [("train", train), ("test", test)] {
            if ds.class_names() != class_names.as_slice() {
                return Err(Error::Contract(format!(
                    "{role} set of {id} has class set {:?}, expected {:?}",
                    ds.class_names(),
                    class_names
                )));
            }
            if ds.width() != width {
                return Err(Error::Shape(format!(
                    "{role} set of {id} has width {}, expected {width}",
                    ds.width()
                )));
            }
        }
    }

    let mut dims = Vec::with_capacity(config.hidden_dims.len() + 2);
    dims.push(width);
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(class_names.len());

    // Per-corpus models, trainable in parallel.
    let fitted: Result<Vec<(String, MlpModel, TrainReport)>> = ids
        .par_iter()
        .map(|id| {
            let (train, test) = &corpus[*id];
            let mut model = new_model(&dims, derive_seed(config.train.seed, &["model", id]))?;
            let cell_config = TrainConfig {
                seed: derive_seed(config.train.seed, &["fit", id]),
                ..config.train
            };
            let report = model.fit(train, test, &cell_config)?;
            Ok((id.to_string(), model, report))
        })
        .collect();
    let fitted = fitted?;

    let mut models = BTreeMap::new();
    let mut fit_reports = BTreeMap::new();
    for (id, model, report) in fitted {
        fit_reports.insert(id.clone(), report);
        models.insert(id, model);
    }

    // Direct cells.
    let n = ids.len();
    let mut cells = vec![
        vec![
            CrossCell {
                direct_accuracy: 0.0,
                transfer_accuracy: None
            };
            n
        ];
        n
    ];
    for (i, model_id) in ids.iter().enumerate() {
        let model = &models[*model_id];
        for (j, dataset_id) in ids.iter().enumerate() {
            let (_, test) = &corpus[*dataset_id];
            cells[i][j].direct_accuracy = evaluate(model, test)?.accuracy;
        }
    }

    // Off-diagonal transfer cells, independent and parallel.
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let transfers: Result<Vec<(usize, usize, f64, CellReport)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let model_id = ids[i];
            let dataset_id = ids[j];
            let (train, test) = &corpus[dataset_id];
            let cell_config = TrainConfig {
                seed: derive_seed(config.train.seed, &["transfer", model_id, dataset_id]),
                ..config.train
            };
            let (adapted, report) =
                transfer_fit(&models[model_id], train, test, &config.freeze, &cell_config)?;
            let accuracy = evaluate(&adapted, test)?.accuracy;
            Ok((
                i,
                j,
                accuracy,
                CellReport {
                    model_id: model_id.to_string(),
                    dataset_id: dataset_id.to_string(),
                    report,
                },
            ))
        })
        .collect();
    let mut transfer_reports = Vec::with_capacity(pairs.len());
    for (i, j, accuracy, report) in transfers? {
        cells[i][j].transfer_accuracy = Some(accuracy);
        transfer_reports.push(report);
    }
    transfer_reports.sort_by(|a, b| {
        (a.model_id.as_str(), a.dataset_id.as_str()).cmp(&(b.model_id.as_str(), b.dataset_id.as_str()))
    });

    Ok(CrossOutcome {
        matrix: CrossMatrix {
            model_ids: ids.iter().map(|s| s.to_string()).collect(),
            dataset_ids: ids.iter().map(|s| s.to_string()).collect(),
            cells,
        },
        models,
        fit_reports,
        transfer_reports,
    })
}

/// Cross-session portability over `{session_id -> (train, test)}` captures
/// of one device. Same semantics as [`cross_matrix`]; rejects data that
/// mixes devices.
pub fn session_matrix(
    sessions: &BTreeMap<String, (SpectralDataset, SpectralDataset)>,
    config: &ExperimentConfig,
) -> Result<CrossOutcome> {
    if sessions.len() < 2 {
        return Err(Error::Contract(format!(
            "session portability needs at least 2 sessions, got {}",
            sessions.len()
        )));
    }
    let mut device: Option<&str> = None;
    for (id, (train, test)) in sessions {
        for ds in [train, test] {
            for tag in ds.sources() {
                match device {
                    None => device = Some(&tag.device_id),
                    Some(d) if d == tag.device_id => {}
                    Some(d) => {
                        return Err(Error::Contract(format!(
                            "session {id} mixes devices {d:?} and {:?}",
                            tag.device_id
                        )))
                    }
                }
            }
        }
    }
    cross_matrix(sessions, config)
}

// --- PCA --------------------------------------------------------------------

const PCA_TOLERANCE: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 10_000;

/// Principal components of a dataset's feature rows: mean vector,
/// orthonormal components (rows), and non-increasing explained variances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x width`, row-major; mutually orthonormal rows.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub width: usize,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.width..(i + 1) * self.width]
    }
}

/// Top-`k` eigenvectors of the centered sample covariance, by power
/// iteration with deflation (tolerance 1e-9).
pub fn fit_pca(ds: &SpectralDataset, k: usize) -> Result<PcaModel> {
    let width = ds.width();
    let rows = ds.rows();
    if k == 0 {
        return Err(Error::Argument("pca needs k >= 1".into()));
    }
    if k > width {
        return Err(Error::Argument(format!(
            "k = {k} exceeds feature width {width}"
        )));
    }
    if rows < k {
        return Err(Error::Data(format!("pca needs at least {k} rows, got {rows}")));
    }

    // Centered data in f64.
    let mut mean = vec![0.0f64; width];
    for r in 0..rows {
        for (m, &x) in mean.iter_mut().zip(ds.row(r)) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut centered = vec![0.0f64; rows * width];
    for r in 0..rows {
        for (c, (&x, &m)) in ds.row(r).iter().zip(mean.iter()).enumerate() {
            centered[r * width + c] = x as f64 - m;
        }
    }
    let denom = (rows.max(2) - 1) as f64;

    // cov * v without materializing the covariance matrix.
    let apply_cov = |v: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for row in centered.chunks_exact(width) {
            let t: f64 = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
            for (o, &a) in out.iter_mut().zip(row) {
                *o += t * a;
            }
        }
        out.iter_mut().for_each(|o| *o /= denom);
    };

    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(PCA_START_SEED, &["pca"]));
    let mut components: Vec<f64> = Vec::with_capacity(k * width);
    let mut variances = Vec::with_capacity(k);

    for comp in 0..k {
        let mut v: Vec<f64> = (0..width).map(|_| normal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &components, width, comp);
        if normalize(&mut v) < 1e-300 {
            v = basis_completion(&components, width, comp);
        }
        let mut w = vec![0.0f64; width];
        let mut last = f64::INFINITY;
        for _ in 0..PCA_MAX_ITERS {
            apply_cov(&v, &mut w);
            orthogonalize(&mut w, &components, width, comp);
            let norm = normalize(&mut w);
            if norm < PCA_TOLERANCE {
                // Deflated operator vanished: remaining variance is zero.
                v = basis_completion(&components, width, comp);
                break;
            }
            let delta: f64 = v
                .iter()
                .zip(&w)
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0, f64::max);
            std::mem::swap(&mut v, &mut w);
            if delta <= PCA_TOLERANCE || (last - delta).abs() <= PCA_TOLERANCE * 1e-3 {
                break;
            }
            last = delta;
        }
        // Rayleigh quotient against the original covariance.
        apply_cov(&v, &mut w);
        let lambda: f64 = v.iter().zip(&w).map(|(&a, &b)| a * b).sum::<f64>().max(0.0);
        canonicalize_sign(&mut v);
        components.extend_from_slice(&v);
        variances.push(lambda);
    }

    // Deflation already orders eigenvalues; fix any numerical inversions.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]));
    let sorted_components: Vec<f64> = order
        .iter()
        .flat_map(|&i| components[i * width..(i + 1) * width].iter().copied().collect::<Vec<_>>())
        .collect();
    let sorted_variances: Vec<f64> = order.iter().map(|&i| variances[i]).collect();

    Ok(PcaModel {
        mean,
        components: sorted_components,
        explained_variance: sorted_variances,
        width,
    })
}

// Start vectors for power iteration come from a fixed seed so every fit of
// the same data produces identical components.
const PCA_START_SEED: u64 = 0x50_43_41;

fn orthogonalize(v: &mut [f64], components: &[f64], width: usize, n_comp: usize) {
    for c in 0..n_comp {
        let u = &components[c * width..(c + 1) * width];
        let proj: f64 = v.iter().zip(u).map(|(&a, &b)| a * b).sum();
        for (x, &b) in v.iter_mut().zip(u) {
            *x -= proj * b;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn basis_completion(components: &[f64], width: usize, n_comp: usize) -> Vec<f64> {
    for axis in 0..width {
        let mut v = vec![0.0f64; width];
        v[axis] = 1.0;
        orthogonalize(&mut v, components, width, n_comp);
        if normalize(&mut v) > 1e-6 {
            return v;
        }
    }
    let mut v = vec![0.0f64; width];
    v[0] = 1.0;
    v
}

fn canonicalize_sign(v: &mut [f64]) {
    let lead = v
        .iter()
        .cloned()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Projects rows onto the principal components: `centered rows x components^T`.
pub fn project(pca: &PcaModel, ds: &SpectralDataset) -> Result<Vec<f64>> {
    if ds.width() != pca.width {
        return Err(Error::Shape(format!(
            "dataset width {} does not match pca width {}",
            ds.width(),
            pca.width
        )));
    }
    let k = pca.k();
    let mut out = Vec::with_capacity(ds.rows() * k);
    for r in 0..ds.rows() {
        let row = ds.row(r);
        for c in 0..k {
            let u = pca.component(c);
            let dot: f64 = row
                .iter()
                .zip(pca.mean.iter())
                .zip(u)
                .map(|((&x, &m), &b)| (x as f64 - m) * b)
                .sum();
            out.push(dot);
        }
    }
    Ok(out)
}

/// Three-component projections as CSV rows `x,y,z,device_id`.
pub fn pca_projection_csv(pca: &PcaModel, ds: &SpectralDataset) -> Result<String> {
    if pca.k() != 3 {
        return Err(Error::Argument(format!(
            "projection csv needs exactly 3 components, pca has {}",
            pca.k()
        )));
    }
    let coords = project(pca, ds)?;
    let mut out = String::from("x,y,z,device_id\n");
    for r in 0..ds.rows() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            coords[r * 3],
            coords[r * 3 + 1],
            coords[r * 3 + 2],
            ds.provenance(r).device_id
        ));
    }
    Ok(out)
}

/// Trains a classifier that tells devices apart from a single shared
/// activity: labels are device identities, output width is the device count.
/// Returns the held-out report and the trained model.
pub fn device_discriminator(
    idle_sets: &BTreeMap<String, SpectralDataset>,
    config: &ExperimentConfig,
    split_spec: &SplitSpec,
) -> Result<(EvalReport, MlpModel)> {
    if idle_sets.len() < 2 {
        return Err(Error::Argument(format!(
            "device discrimination needs at least 2 devices, got {}",
            idle_sets.len()
        )));
    }
    let mut shared_activity: Option<&str> = None;
    for (device, ds) in idle_sets {
        if ds.n_classes() != 1 {
            return Err(Error::Contract(format!(
                "device {device} set has {} activity classes, expected exactly 1",
                ds.n_classes()
            )));
        }
        let activity = ds.class_names()[0].as_str();
        match shared_activity {
            None => shared_activity = Some(activity),
            Some(a) if a == activity => {}
            Some(a) => {
                return Err(Error::Contract(format!(
                    "activity label mismatch: {a:?} vs {activity:?} on device {device}"
                )))
            }
        }
    }

    let parts: Vec<(SpectralDataset, String)> = idle_sets
        .iter()
        .map(|(device, ds)| (ds.clone(), device.clone()))
        .collect();
    let merged = assemble(parts)?;
    let (train, test) = split(&merged, split_spec)?;

    let mut dims = Vec::with_capacity(config.hidden_dims.len() + 2);
    dims.push(merged.width());
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(idle_sets.len());

    let mut model = new_model(&dims, derive_seed(config.train.seed, &["discriminator"]))?;
    model.fit(&train, &test, &config.train)?;
    let report = evaluate(&model, &test)?;
    Ok((report, model))
}
