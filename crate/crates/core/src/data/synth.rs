//! Desk-scale stand-in for a real fMRI dataset.
//!
//! Each stimulus has a hidden latent vector `z`. Its image is a smooth
//! pattern driven by `z`, its captions name a colour, object and place read
//! off the first three coordinates of `z`, and every trial's whole-volume
//! betas are `gain_s ⊙ (A z) + offset_s + noise` for a fixed projection `A`
//! and per-session drift terms.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{extract_roi, AtlasMask, DatasetManifest, FmriRecord, RoiName, Split, StimulusRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{gaussian_vec, rng_from_seed, split_seed};

pub const CAPTION_COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.2, 0.2]),
    ("green", [0.25, 0.7, 0.3]),
    ("blue", [0.2, 0.3, 0.85]),
    ("yellow", [0.9, 0.85, 0.25]),
    ("white", [0.92, 0.92, 0.92]),
    ("black", [0.1, 0.1, 0.1]),
];
pub const CAPTION_OBJECTS: [&str; 8] = [
    "dog", "cat", "bus", "bird", "train", "horse", "boat", "kite",
];
pub const CAPTION_PLACES: [&str; 6] = ["field", "street", "kitchen", "beach", "park", "room"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subject_id: String,
    pub n_train_stimuli: usize,
    pub n_test_stimuli: usize,
    /// Presentations per test stimulus.
    pub repeats: usize,
    pub sessions: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    pub volume_len: usize,
    pub ventral_voxels: usize,
    pub early_voxels: usize,
    pub nsdgeneral_voxels: usize,
    pub noise_scale: f64,
    pub session_drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subject_id: "subj01".into(),
            n_train_stimuli: 180,
            n_test_stimuli: 20,
            repeats: 3,
            sessions: 4,
            image_size: 32,
            latent_dim: 12,
            volume_len: 1024,
            ventral_voxels: 256,
            early_voxels: 256,
            nsdgeneral_voxels: 384,
            noise_scale: 0.3,
            session_drift: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_train_stimuli + self.n_test_stimuli == 0 {
            return bad("zero stimulus count");
        }
        if self.repeats == 0 || self.sessions == 0 || self.image_size == 0 {
            return bad("repeats, sessions and image_size must be at least 1");
        }
        if self.latent_dim < 3 {
            return bad("latent_dim must be at least 3");
        }
        if self.ventral_voxels == 0 || self.early_voxels == 0 || self.nsdgeneral_voxels == 0 {
            return bad("every roi needs at least one voxel");
        }
        let free = self
            .volume_len
            .checked_sub(self.ventral_voxels + self.early_voxels)
            .ok_or_else(|| Error::Config("synth: ventral + early exceed volume_len".into()))?;
        if self.nsdgeneral_voxels > self.ventral_voxels / 2 + self.early_voxels / 2 + free {
            return bad("nsdgeneral_voxels too large for the volume");
        }
        if self.noise_scale < 0.0 || self.session_drift < 0.0 {
            return bad("noise_scale and session_drift must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// Ground-truth latent per stimulus.
    pub latents: BTreeMap<String, Vec<f64>>,
    /// Row-major `volume_len × latent_dim` projection.
    pub projection: Vec<f64>,
}

fn bucket(z: f64, n: usize) -> usize {
    (((z.tanh() + 1.0) / 2.0 * n as f64).floor() as usize).min(n - 1)
}

fn captions_for(z: &[f64]) -> (Vec<String>, [f64; 3]) {
    let (color, rgb) = CAPTION_COLORS[bucket(z[0], CAPTION_COLORS.len())];
    let object = CAPTION_OBJECTS[bucket(z[1], CAPTION_OBJECTS.len())];
    let place = CAPTION_PLACES[bucket(z[2], CAPTION_PLACES.len())];
    let caps = vec![
        format!("a {color} {object} in the {place}"),
        format!("the {color} {object} is in a {place}"),
        format!("{color} {object} in {place}"),
        format!("a {color} {object} at the {place}"),
        format!("there is a {color} {object} in the {place}"),
    ];
    (caps, rgb)
}

struct Basis {
    fx: f64,
    fy: f64,
    phase: f64,
    weights: [f64; 3],
}

fn render(z: &[f64], tint: [f64; 3], basis: &[Basis], size: usize) -> Image {
    let amp = 0.25 / (z.len() as f64).sqrt();
    let mut img = Image::filled(size, size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            for c in 0..3 {
                let mut s = 0.5 + 0.2 * (tint[c] - 0.5);
                for (zj, b) in z.iter().zip(basis) {
                    s += amp
                        * zj
                        * b.weights[c]
                        * (2.0 * PI * (b.fx * u + b.fy * v) + b.phase).cos();
                }
                *img.at_mut(y, x, c) = to_f32(s.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Builds a synthetic dataset; identical seeds give identical datasets.
pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let k = config.latent_dim;
    let vlen = config.volume_len;

    // atlas
    let mut rng = rng_from_seed(split_seed(seed, "synth/atlas"));
    let mut perm: Vec<usize> = (0..vlen).collect();
    perm.shuffle(&mut rng);
    let early: Vec<usize> = perm[..config.early_voxels].to_vec();
    let ventral: Vec<usize> =
        perm[config.early_voxels..config.early_voxels + config.ventral_voxels].to_vec();
    let rest = &perm[config.early_voxels + config.ventral_voxels..];
    let mut general: Vec<usize> = early[..early.len() / 2]
        .iter()
        .chain(&ventral[..ventral.len() / 2])
        .chain(rest)
        .take(config.nsdgeneral_voxels)
        .copied()
        .collect();
    let mut atlas = BTreeMap::new();
    for (roi, mut idx) in [
        (RoiName::Early, early),
        (RoiName::Ventral, ventral),
        (RoiName::Nsdgeneral, std::mem::take(&mut general)),
    ] {
        idx.sort_unstable();
        atlas.insert(roi, AtlasMask::new(roi, idx, vlen)?);
    }

    let inv_sqrt_k = 1.0 / (k as f64).sqrt();
    let projection: Vec<f64> = gaussian_vec(
        &mut rng_from_seed(split_seed(seed, "synth/projection")),
        vlen * k,
    )
    .into_iter()
    .map(|a| a * inv_sqrt_k)
    .collect();

    let mut rng = rng_from_seed(split_seed(seed, "synth/basis"));
    let basis: Vec<Basis> = (0..k)
        .map(|_| {
            let (fx, fy) = loop {
                let fx = rng.gen_range(0..=2) as f64;
                let fy = rng.gen_range(0..=2) as f64;
                if fx + fy > 0.0 {
                    break (fx, fy);
                }
            };
            let w = gaussian_vec(&mut rng, 3);
            let n = (w.iter().map(|x| x * x).sum::<f64>()).sqrt().max(1e-12);
            Basis {
                fx,
                fy,
                phase: rng.gen_range(0.0..2.0 * PI),
                weights: [w[0] / n, w[1] / n, w[2] / n],
            }
        })
        .collect();

    let mut rng = rng_from_seed(split_seed(seed, "synth/drift"));
    let drift: Vec<(Vec<f64>, Vec<f64>)> = (0..config.sessions)
        .map(|_| {
            let gain = gaussian_vec(&mut rng, vlen)
                .into_iter()
                .map(|g| (1.0 + 0.5 * config.session_drift * g).max(0.25))
                .collect();
            let offset = gaussian_vec(&mut rng, vlen)
                .into_iter()
                .map(|o| config.session_drift * o)
                .collect();
            (gain, offset)
        })
        .collect();

    let n_stim = config.n_train_stimuli + config.n_test_stimuli;
    let mut rng = rng_from_seed(split_seed(seed, "synth/latents"));
    let mut latents = BTreeMap::new();
    let mut stimuli = BTreeMap::new();
    let mut split = BTreeMap::new();
    let mut ids = Vec::with_capacity(n_stim);
    for i in 0..n_stim {
        let id = format!("stim{i:05}");
        let z = gaussian_vec(&mut rng, k);
        let (captions, tint) = captions_for(&z);
        let image = render(&z, tint, &basis, config.image_size);
        stimuli.insert(
            id.clone(),
            StimulusRecord::new(id.clone(), image, captions)?,
        );
        split.insert(
            id.clone(),
            if i < config.n_train_stimuli {
                Split::Train
            } else {
                Split::Test
            },
        );
        latents.insert(id.clone(), z);
        ids.push(id);
    }

    // trial schedule: one presentation per train stimulus, `repeats` per
    // test stimulus spread across sessions
    let mut schedule: Vec<(usize, usize)> = (0..config.n_train_stimuli)
        .map(|i| (i, i % config.sessions))
        .collect();
    for r in 0..config.repeats {
        for i in config.n_train_stimuli..n_stim {
            schedule.push((i, (i + r) % config.sessions));
        }
    }

    let mut noise_rng = rng_from_seed(split_seed(seed, "synth/noise"));
    let mut records = Vec::with_capacity(schedule.len());
    for (trial, (i, session)) in schedule.into_iter().enumerate() {
        let z = &latents[&ids[i]];
        let noise = gaussian_vec(&mut noise_rng, vlen);
        let (gain, offset) = &drift[session];
        let volume: Vec<f64> = (0..vlen)
            .map(|v| {
                let signal: f64 = projection[v * k..(v + 1) * k]
                    .iter()
                    .zip(z)
                    .map(|(a, b)| a * b)
                    .sum();
                to_f32(gain[v] * signal + offset[v] + config.noise_scale * noise[v])
            })
            .collect();
        let mut voxels_by_roi = BTreeMap::new();
        for (roi, mask) in &atlas {
            voxels_by_roi.insert(*roi, extract_roi(&volume, mask)?);
        }
        records.push(FmriRecord {
            subject_id: config.subject_id.clone(),
            session_id: session as i64,
            trial_id: trial as i64,
            stimulus_id: ids[i].clone(),
            voxels_by_roi,
        });
    }

    let manifest = DatasetManifest {
        volume_len: vlen,
        atlas,
        records,
        stimuli,
        split,
    };
    manifest.validate()?;
    Ok(SyntheticDataset {
        manifest,
        latents,
        projection,
    })
}
