//! Directory-based manifest: `manifest.json` indexes records and stimuli,
//! each voxel array and image is a raw little-endian `f32` file, and each
//! atlas mask is a text file with one index per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AtlasMask, DatasetManifest, FmriRecord, RoiName, Split, StimulusRecord};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "brainstreams-manifest/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestIndex {
    format: String,
    volume_len: usize,
    atlas: BTreeMap<RoiName, String>,
    stimuli: Vec<StimulusEntry>,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StimulusEntry {
    stimulus_id: String,
    height: usize,
    width: usize,
    image: String,
    captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    subject_id: String,
    session_id: i64,
    trial_id: i64,
    stimulus_id: String,
    split: Split,
    arrays: BTreeMap<RoiName, String>,
}

pub fn write_f32_array(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_array(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::schema(
            path.display().to_string(),
            format!("length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `manifest` into `dir`. Values are stored as `f32`.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    manifest.validate()?;
    for sub in ["atlas", "stimuli", "records"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let mut atlas = BTreeMap::new();
    for (roi, mask) in &manifest.atlas {
        let rel = format!("atlas/{roi}.txt");
        let p = dir.join(&rel);
        fs::write(&p, mask.to_text()).map_err(|e| Error::io(&p, e))?;
        atlas.insert(*roi, rel);
    }

    let mut stimuli = Vec::with_capacity(manifest.stimuli.len());
    for (n, (id, stim)) in manifest.stimuli.iter().enumerate() {
        let rel = format!("stimuli/{n:06}.f32");
        write_f32_array(&dir.join(&rel), &stim.image.data)?;
        stimuli.push(StimulusEntry {
            stimulus_id: id.clone(),
            height: stim.image.height,
            width: stim.image.width,
            image: rel,
            captions: stim.captions.clone(),
            split: manifest.split.get(id).copied(),
        });
    }

    let mut records = Vec::with_capacity(manifest.records.len());
    for (n, rec) in manifest.records.iter().enumerate() {
        let mut arrays = BTreeMap::new();
        for (roi, v) in &rec.voxels_by_roi {
            let rel = format!("records/{n:06}_{roi}.f32");
            write_f32_array(&dir.join(&rel), v)?;
            arrays.insert(*roi, rel);
        }
        records.push(RecordEntry {
            subject_id: rec.subject_id.clone(),
            session_id: rec.session_id,
            trial_id: rec.trial_id,
            stimulus_id: rec.stimulus_id.clone(),
            split: manifest.split[&rec.stimulus_id],
            arrays,
        });
    }

    let index = ManifestIndex {
        format: FORMAT_TAG.to_string(),
        volume_len: manifest.volume_len,
        atlas,
        stimuli,
        records,
    };
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::schema(MANIFEST_FILE, e.to_string()))?;
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
}

/// Reads a manifest directory (or a path to its `manifest.json`).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let (dir, index_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        (dir, path.to_path_buf())
    };
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: ManifestIndex =
        serde_json::from_str(&text).map_err(|e| Error::schema(MANIFEST_FILE, e.to_string()))?;
    if index.format != FORMAT_TAG {
        return Err(Error::schema(
            "format",
            format!("unsupported manifest format `{}`", index.format),
        ));
    }

    let mut atlas = BTreeMap::new();
    for (roi, rel) in &index.atlas {
        let p = dir.join(rel);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        atlas.insert(*roi, AtlasMask::parse(*roi, &text, index.volume_len)?);
    }

    let mut stimuli = BTreeMap::new();
    let mut split = BTreeMap::new();
    for entry in index.stimuli {
        if let Some(s) = entry.split {
            split.insert(entry.stimulus_id.clone(), s);
        }
        let data = read_f32_array(&dir.join(&entry.image))?;
        let image = Image::new(entry.height, entry.width, 3, data)
            .map_err(|e| Error::schema(format!("stimulus {}", entry.stimulus_id), e.to_string()))?;
        let id = entry.stimulus_id.clone();
        let stim = StimulusRecord::new(entry.stimulus_id, image, entry.captions)?;
        if stimuli.insert(id.clone(), stim).is_some() {
            return Err(Error::schema(
                format!("stimulus {id}"),
                "duplicate stimulus_id",
            ));
        }
    }

    let mut records = Vec::with_capacity(index.records.len());
    for (n, entry) in index.records.into_iter().enumerate() {
        let key = format!("record {n} (trial {})", entry.trial_id);
        if !stimuli.contains_key(&entry.stimulus_id) {
            return Err(Error::DanglingStimulus {
                record: key,
                stimulus_id: entry.stimulus_id,
            });
        }
        match split.insert(entry.stimulus_id.clone(), entry.split) {
            Some(prev) if prev != entry.split => {
                return Err(Error::schema(
                    key,
                    format!(
                        "stimulus {} has conflicting split assignments",
                        entry.stimulus_id
                    ),
                ))
            }
            _ => {}
        }
        let mut voxels_by_roi = BTreeMap::new();
        for (roi, rel) in &entry.arrays {
            voxels_by_roi.insert(*roi, read_f32_array(&dir.join(rel))?);
        }
        records.push(FmriRecord {
            subject_id: entry.subject_id,
            session_id: entry.session_id,
            trial_id: entry.trial_id,
            stimulus_id: entry.stimulus_id,
            voxels_by_roi,
        });
    }

    let manifest = DatasetManifest {
        volume_len: index.volume_len,
        atlas,
        records,
        stimuli,
        split,
    };
    manifest.validate()?;
    Ok(manifest)
}
