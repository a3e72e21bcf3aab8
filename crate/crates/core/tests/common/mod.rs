//! Property checks shared by the proptest suite and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeMap;

use brainstreams::data::{
    average_repeats, extract_roi, generate_synthetic_dataset, load_manifest, save_manifest,
    zscore_by_session, AtlasMask, FmriRecord, RoiName, SynthConfig,
};
use brainstreams::rng::{gaussian_vec, rng_from_seed};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn random_records(
    seed: u64,
    sessions: usize,
    per_session: usize,
    dim: usize,
) -> Vec<FmriRecord> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    for s in 0..sessions {
        let offset = rng.gen_range(-3.0..3.0);
        let scale = rng.gen_range(0.1..5.0);
        for k in 0..per_session {
            let v = gaussian_vec(&mut rng, dim)
                .into_iter()
                .map(|z| offset + scale * z)
                .collect();
            out.push(FmriRecord {
                subject_id: "s".into(),
                session_id: s as i64,
                trial_id: (s * per_session + k) as i64,
                stimulus_id: format!("stim{}", k % 3),
                voxels_by_roi: BTreeMap::from([(RoiName::Early, v)]),
            });
        }
    }
    out
}

/// Largest change produced by z-scoring already z-scored records.
pub fn zscore_drift(records: &[FmriRecord]) -> f64 {
    let once = zscore_by_session(records);
    let twice = zscore_by_session(&once);
    once.iter()
        .zip(&twice)
        .flat_map(|(a, b)| {
            a.voxels_by_roi[&RoiName::Early]
                .iter()
                .zip(&b.voxels_by_roi[&RoiName::Early])
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Largest gap between averaging then masking and masking then averaging.
pub fn average_mask_gap(seed: u64, volume_len: usize, repeats: usize, stimuli: usize) -> f64 {
    let mut rng = rng_from_seed(seed);
    let k = rng.gen_range(1..=volume_len);
    let mut idx: Vec<usize> = (0..volume_len).collect();
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    let mask = AtlasMask::new(RoiName::Ventral, idx, volume_len).unwrap();
    let mut whole = Vec::new();
    for r in 0..repeats {
        for s in 0..stimuli {
            whole.push(FmriRecord {
                subject_id: "s".into(),
                session_id: r as i64,
                trial_id: (r * stimuli + s) as i64,
                stimulus_id: format!("stim{s}"),
                voxels_by_roi: BTreeMap::from([(
                    RoiName::Nsdgeneral,
                    gaussian_vec(&mut rng, volume_len),
                )]),
            });
        }
    }
    let masked: Vec<FmriRecord> = whole
        .iter()
        .map(|r| FmriRecord {
            voxels_by_roi: BTreeMap::from([(
                RoiName::Ventral,
                extract_roi(&r.voxels_by_roi[&RoiName::Nsdgeneral], &mask).unwrap(),
            )]),
            ..r.clone()
        })
        .collect();
    let a = average_repeats(&masked);
    let b = average_repeats(&whole);
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(&b)
        .flat_map(|(ra, rb)| {
            let m = extract_roi(&rb.voxels_by_roi[&RoiName::Nsdgeneral], &mask).unwrap();
            ra.voxels_by_roi[&RoiName::Ventral]
                .iter()
                .zip(m)
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Saves and reloads a small random synthetic manifest.
pub fn manifest_round_trips(seed: u64, n_train: usize, n_test: usize, repeats: usize) -> bool {
    let config = SynthConfig {
        n_train_stimuli: n_train,
        n_test_stimuli: n_test,
        repeats,
        sessions: 2,
        image_size: 8,
        volume_len: 64,
        ventral_voxels: 16,
        early_voxels: 16,
        nsdgeneral_voxels: 24,
        ..SynthConfig::default()
    };
    let m = generate_synthetic_dataset(&config, seed).unwrap().manifest;
    let dir = tempfile::tempdir().unwrap();
    save_manifest(&m, dir.path()).unwrap();
    load_manifest(dir.path()).unwrap() == m
}
