//! Pieces shared by the three stream trainers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FmriRecord, RoiName};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss, stored in checkpoint metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// `(voxels, stimulus_id)` for every record, failing on the first record
/// that lacks `roi`.
pub fn roi_examples(records: &[FmriRecord], roi: RoiName) -> Result<Vec<(Vec<f64>, String)>> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no training records"));
    }
    records
        .iter()
        .map(|r| Ok((r.roi(roi)?.to_vec(), r.stimulus_id.clone())))
        .collect()
}

/// Shuffled minibatches of `0..n`.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn scale_grads(grads: &mut [Vec<f64>], k: f64) {
    grads.iter_mut().flatten().for_each(|g| *g *= k);
}

/// Packs a trained model. Parameters are rounded to `f32` first so that
/// a reloaded checkpoint predicts bit-identically.
pub fn pack_checkpoint<C: Serialize>(
    kind: &str,
    config: &C,
    seed: u64,
    params: &ParamStore,
    report: &TrainReport,
) -> Result<Checkpoint> {
    let mut params = params.clone();
    params.round_to_f32();
    let ser = |e: serde_json::Error| Error::Checkpoint(e.to_string());
    Ok(Checkpoint {
        kind: kind.into(),
        config: serde_json::to_value(config).map_err(ser)?,
        seed,
        step: report.steps,
        metadata: serde_json::to_value(report).map_err(ser)?,
        params,
    })
}

pub fn report_of(ck: &Checkpoint) -> TrainReport {
    serde_json::from_value(ck.metadata.clone()).unwrap_or_default()
}

/// Elementwise mean of equally long vectors.
pub fn mean_vector<'a>(vs: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vs {
        if out.is_empty() {
            out = vec![0.0; v.len()];
        }
        crate::linalg::axpy(1.0, v, &mut out);
        n += 1;
    }
    let k = 1.0 / n.max(1) as f64;
    out.iter_mut().for_each(|x| *x *= k);
    out
}
