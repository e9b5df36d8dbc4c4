//! Layer-freezing transfer learning: adapt a pretrained model to a new
//! dataset by retraining a masked subset of its layers.
//!
//! The default retrains only the output layer. The target data is always
//! normalized with the pretrained model's scaler so the frozen feature
//! extractor sees inputs in the distribution it was trained on; the one
//! exception is a full fresh start (every layer reinitialized and
//! trainable), which is definitionally an ordinary fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{MlpModel, TrainConfig, TrainReport};
use crate::spectral::SpectralDataset;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Only the output layer trains.
    OutputOnly,
    /// Only the input layer trains.
    InputOnly,
    /// The `k` layers nearest the output are frozen; the rest train.
    FreezeTop(usize),
    /// The `k` layers nearest the input are frozen; the rest train.
    FreezeBottom(usize),
    /// Explicit per-layer trainable flags.
    Custom(Vec<bool>),
}

/// Which layers retrain during a transfer fit, and whether the retrained
/// layers start from the pretrained weights (default) or fresh ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub mode: FreezeMode,
    pub reinit_unfrozen: bool,
}

impl Default for FreezeSpec {
    fn default() -> Self {
        FreezeSpec {
            mode: FreezeMode::OutputOnly,
            reinit_unfrozen: false,
        }
    }
}

impl FreezeSpec {
    /// Per-layer trainable flags for a network of `n_layers` layers.
    pub fn trainable_mask(&self, n_layers: usize) -> Result<Vec<bool>> {
        if n_layers == 0 {
            return Err(Error::Argument("network has no layers".into()));
        }
        let mask = match &self.mode {
            FreezeMode::OutputOnly => {
                let mut m = vec![false; n_layers];
                m[n_layers - 1] = true;
                m
            }
            FreezeMode::InputOnly => {
                let mut m = vec![false; n_layers];
                m[0] = true;
                m
            }
            FreezeMode::FreezeTop(k) => {
                if *k == 0 || *k >= n_layers {
                    return Err(Error::Argument(format!(
                        "freeze_top({k}) must freeze between 1 and {} layers",
                        n_layers - 1
                    )));
                }
                let mut m = vec![true; n_layers];
                for t in m.iter_mut().skip(n_layers - k) {
                    *t = false;
                }
                m
            }
            FreezeMode::FreezeBottom(k) => {
                if *k == 0 || *k >= n_layers {
                    return Err(Error::Argument(format!(
                        "freeze_bottom({k}) must freeze between 1 and {} layers",
                        n_layers - 1
                    )));
                }
                let mut m = vec![true; n_layers];
                for t in m.iter_mut().take(*k) {
                    *t = false;
                }
                m
            }
            FreezeMode::Custom(mask) => {
                if mask.len() != n_layers {
                    return Err(Error::Argument(format!(
                        "custom mask has {} entries for {n_layers} layers",
                        mask.len()
                    )));
                }
                mask.clone()
            }
        };
        if !mask.iter().any(|&t| t) {
            return Err(Error::Argument(
                "freeze spec leaves no trainable layers".into(),
            ));
        }
        Ok(mask)
    }
}

/// Retrains the masked subset of a pretrained model's layers on the target
/// data. Frozen layers come back bitwise identical; the report's parameter
/// accounting reflects the mask.
///
/// If the target class count differs from the pretrained output width,
/// `reinit_unfrozen` must be set and the output layer is rebuilt at the new
/// width. With `reinit_unfrozen` and zero epochs the result is the
/// pretrained model itself (aside from the mask), which makes the default
/// spec with zero epochs an identity.
pub fn transfer_fit(
    pretrained: &MlpModel,
    target_train: &SpectralDataset,
    target_val: &SpectralDataset,
    spec: &FreezeSpec,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    let mask = spec.trainable_mask(pretrained.n_layers())?;
    let mut model = pretrained.clone();

    if target_train.n_classes() != pretrained.n_classes() {
        if !spec.reinit_unfrozen {
            return Err(Error::Contract(format!(
                "target has {} classes but the pretrained output width is {}; \
                 set reinit_unfrozen to rebuild the output layer",
                target_train.n_classes(),
                pretrained.n_classes()
            )));
        }
        if !mask[pretrained.n_layers() - 1] {
            return Err(Error::Contract(
                "changing the class count requires the output layer to be trainable".into(),
            ));
        }
    }

    model.set_trainable(mask.clone())?;
    if spec.reinit_unfrozen {
        model.set_seed(config.seed);
        let n_layers = model.n_layers();
        for l in 0..n_layers {
            if mask[l] {
                let out_dim = if l == n_layers - 1 {
                    target_train.n_classes()
                } else {
                    model.dims()[l + 1]
                };
                model.reinit_layer(l, out_dim);
            }
        }
    }

    // A full fresh start is an ordinary fit and refits the scaler; every
    // other configuration keeps the source model's normalization.
    let fresh_start = spec.reinit_unfrozen && mask.iter().all(|&t| t);
    let report = model.fit_inner(target_train, target_val, config, fresh_start)?;
    Ok((model, report))
}

/// Cost comparison between a full fit and a transfer fit on the same data
/// and epoch count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSummary {
    pub time_ratio: f64,
    pub param_ratio: f64,
    pub full_wall_seconds: f64,
    pub transfer_wall_seconds: f64,
    pub full_trainable_params: usize,
    pub transfer_trainable_params: usize,
    /// Set when the two reports are not directly comparable.
    pub warning: Option<String>,
}

/// Time and trainable-parameter ratios of a transfer fit relative to full
/// training. Reports trained for different epoch counts still produce
/// ratios, with a warning in the summary.
pub fn compare_cost(full: &TrainReport, transfer: &TrainReport) -> CostSummary {
    let warning = (full.epoch_loss.len() != transfer.epoch_loss.len()).then(|| {
        format!(
            "epoch counts differ: full {} vs transfer {}",
            full.epoch_loss.len(),
            transfer.epoch_loss.len()
        )
    });
    CostSummary {
        time_ratio: transfer.wall_time_seconds / full.wall_time_seconds,
        param_ratio: transfer.trainable_params as f64 / full.trainable_params as f64,
        full_wall_seconds: full.wall_time_seconds,
        transfer_wall_seconds: transfer.wall_time_seconds,
        full_trainable_params: full.trainable_params,
        transfer_trainable_params: transfer.trainable_params,
        warning,
    }
}
