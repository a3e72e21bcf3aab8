use std::collections::BTreeMap;

use super::{AtlasMask, FmriRecord, RoiName};
use crate::error::{Error, Result};

/// Session id carried by records produced by [`average_repeats`].
pub const AVERAGED_SESSION: i64 = -1;
/// Standard deviations at or below this are treated as zero.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Gathers the mask's voxels out of a whole-volume beta vector.
pub fn extract_roi(whole_volume_betas: &[f64], mask: &AtlasMask) -> Result<Vec<f64>> {
    mask.indices()
        .iter()
        .map(|&i| {
            whole_volume_betas
                .get(i)
                .copied()
                .ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: whole_volume_betas.len(),
                })
        })
        .collect()
}

/// Writes ROI values back into `volume` at the mask's indices.
pub fn scatter_roi(roi_values: &[f64], mask: &AtlasMask, volume: &mut [f64]) -> Result<()> {
    if roi_values.len() != mask.len() {
        return Err(Error::dims("scatter_roi", mask.len(), roi_values.len()));
    }
    for (&i, &v) in mask.indices().iter().zip(roi_values) {
        let len = volume.len();
        *volume
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, len })? = v;
    }
    Ok(())
}

/// Normalizes every voxel to zero mean and unit (population) standard
/// deviation within each `(subject, session, roi)` group. Voxels whose
/// standard deviation is at most [`ZSCORE_EPS`] become 0. Records carrying
/// [`AVERAGED_SESSION`] are passed through untouched.
pub fn zscore_by_session(records: &[FmriRecord]) -> Vec<FmriRecord> {
    let mut groups: BTreeMap<(&str, i64, RoiName), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.session_id == AVERAGED_SESSION {
            continue;
        }
        for roi in r.voxels_by_roi.keys() {
            groups
                .entry((r.subject_id.as_str(), r.session_id, *roi))
                .or_default()
                .push(i);
        }
    }

    let mut out = records.to_vec();
    for ((_, _, roi), members) in groups {
        let dim = records[members[0]].voxels_by_roi[&roi].len();
        let n = members.len() as f64;
        let mut mean = vec![0.0; dim];
        for &i in &members {
            for (m, v) in mean.iter_mut().zip(&records[i].voxels_by_roi[&roi]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for &i in &members {
            for ((s, v), m) in var
                .iter_mut()
                .zip(&records[i].voxels_by_roi[&roi])
                .zip(&mean)
            {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        for &i in &members {
            let v = out[i].voxels_by_roi.get_mut(&roi).unwrap();
            for ((x, m), s) in v.iter_mut().zip(&mean).zip(&std) {
                *x = if *s > ZSCORE_EPS { (*x - m) / s } else { 0.0 };
            }
        }
    }
    out
}

/// Collapses repeated presentations: one record per `(subject, stimulus)`
/// in order of first appearance, each ROI vector the element-wise mean of
/// the group. ROIs missing from any member are dropped.
pub fn average_repeats(test_records: &[FmriRecord]) -> Vec<FmriRecord> {
    let mut order: Vec<(&str, &str)> = Vec::new();
    let mut groups: BTreeMap<(&str, &str), Vec<&FmriRecord>> = BTreeMap::new();
    for r in test_records {
        let key = (r.subject_id.as_str(), r.stimulus_id.as_str());
        let entry = groups.entry(key).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(r);
    }

    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let first = members[0];
            let n = members.len() as f64;
            let voxels_by_roi = first
                .voxels_by_roi
                .iter()
                .filter(|(roi, v)| {
                    members
                        .iter()
                        .all(|m| m.voxels_by_roi.get(roi).map(Vec::len) == Some(v.len()))
                })
                .map(|(roi, v)| {
                    let mut acc = vec![0.0; v.len()];
                    for m in members {
                        for (a, x) in acc.iter_mut().zip(&m.voxels_by_roi[roi]) {
                            *a += x;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= n);
                    (*roi, acc)
                })
                .collect();
            FmriRecord {
                subject_id: first.subject_id.clone(),
                session_id: AVERAGED_SESSION,
                trial_id: first.trial_id,
                stimulus_id: first.stimulus_id.clone(),
                voxels_by_roi,
            }
        })
        .collect()
}
