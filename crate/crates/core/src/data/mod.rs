//! ROI-partitioned fMRI datasets: domain types, on-disk manifests,
//! normalization and the synthetic generator.

mod manifest;
mod preprocess;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, read_f32_array, save_manifest, write_f32_array, MANIFEST_FILE};
pub use preprocess::{
    average_repeats, extract_roi, scatter_roi, zscore_by_session, AVERAGED_SESSION, ZSCORE_EPS,
};
pub use synth::{
    generate_synthetic_dataset, SynthConfig, SyntheticDataset, CAPTION_COLORS, CAPTION_OBJECTS,
    CAPTION_PLACES,
};

use crate::error::{Error, Result};
use crate::image::Image;

/// Number of captions attached to every stimulus.
pub const CAPTIONS_PER_STIMULUS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiName {
    Ventral,
    Early,
    Nsdgeneral,
}

impl RoiName {
    pub const ALL: [RoiName; 3] = [RoiName::Ventral, RoiName::Early, RoiName::Nsdgeneral];

    pub fn as_str(self) -> &'static str {
        match self {
            RoiName::Ventral => "ventral",
            RoiName::Early => "early",
            RoiName::Nsdgeneral => "nsdgeneral",
        }
    }
}

impl fmt::Display for RoiName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoiName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ventral" => Ok(RoiName::Ventral),
            "early" => Ok(RoiName::Early),
            "nsdgeneral" => Ok(RoiName::Nsdgeneral),
            other => Err(Error::schema("roi name", format!("unknown roi `{other}`"))),
        }
    }
}

/// Voxel indices of one region within the flattened whole-volume vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtlasMask {
    roi: RoiName,
    indices: Vec<usize>,
}

impl AtlasMask {
    /// Indices must be strictly increasing, nonempty and below `volume_len`.
    pub fn new(roi: RoiName, indices: Vec<usize>, volume_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::schema(format!("atlas {roi}"), "empty mask"));
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::schema(
                format!("atlas {roi}"),
                format!("indices not strictly increasing at {} -> {}", w[0], w[1]),
            ));
        }
        let last = *indices.last().unwrap();
        if last >= volume_len {
            return Err(Error::IndexOutOfRange {
                index: last,
                len: volume_len,
            });
        }
        Ok(Self { roi, indices })
    }

    pub fn roi(&self) -> RoiName {
        self.roi
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Parses the one-index-per-line text format.
    pub fn parse(roi: RoiName, text: &str, volume_len: usize) -> Result<Self> {
        let indices = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(n, l)| {
                l.parse::<usize>().map_err(|e| {
                    Error::schema(format!("atlas {roi} line {}", n + 1), e.to_string())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(roi, indices, volume_len)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.indices.len() * 6);
        for i in &self.indices {
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmriRecord {
    pub subject_id: String,
    pub session_id: i64,
    pub trial_id: i64,
    pub stimulus_id: String,
    pub voxels_by_roi: BTreeMap<RoiName, Vec<f64>>,
}

impl FmriRecord {
    pub fn roi(&self, roi: RoiName) -> Result<&[f64]> {
        self.voxels_by_roi
            .get(&roi)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingRoi(roi.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusRecord {
    pub stimulus_id: String,
    pub image: Image,
    pub captions: Vec<String>,
}

impl StimulusRecord {
    pub fn new(stimulus_id: String, image: Image, captions: Vec<String>) -> Result<Self> {
        if stimulus_id.is_empty() {
            return Err(Error::schema("stimulus", "empty stimulus_id"));
        }
        if captions.len() != CAPTIONS_PER_STIMULUS {
            return Err(Error::schema(
                format!("stimulus {stimulus_id}"),
                format!(
                    "expected {CAPTIONS_PER_STIMULUS} captions, found {}",
                    captions.len()
                ),
            ));
        }
        image
            .validate_stimulus()
            .map_err(|e| Error::schema(format!("stimulus {stimulus_id}"), e.to_string()))?;
        Ok(Self {
            stimulus_id,
            image,
            captions,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub volume_len: usize,
    pub atlas: BTreeMap<RoiName, AtlasMask>,
    pub records: Vec<FmriRecord>,
    pub stimuli: BTreeMap<String, StimulusRecord>,
    pub split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    /// Checks the cross-references between records, stimuli, split and atlas.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            let key = format!("record {i} ({}/{})", rec.subject_id, rec.trial_id);
            if rec.stimulus_id.is_empty() {
                return Err(Error::schema(key, "empty stimulus_id"));
            }
            if !self.stimuli.contains_key(&rec.stimulus_id) {
                return Err(Error::DanglingStimulus {
                    record: key,
                    stimulus_id: rec.stimulus_id.clone(),
                });
            }
            if !self.split.contains_key(&rec.stimulus_id) {
                return Err(Error::schema(key, "stimulus has no split assignment"));
            }
            for (roi, v) in &rec.voxels_by_roi {
                if let Some(mask) = self.atlas.get(roi) {
                    if mask.len() != v.len() {
                        return Err(Error::schema(
                            key,
                            format!("roi {roi} has {} voxels, atlas has {}", v.len(), mask.len()),
                        ));
                    }
                }
            }
        }
        for id in self.split.keys() {
            if !self.stimuli.contains_key(id) {
                return Err(Error::DanglingStimulus {
                    record: "split".into(),
                    stimulus_id: id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn records_in(&self, split: Split) -> Vec<FmriRecord> {
        self.records
            .iter()
            .filter(|r| self.split.get(&r.stimulus_id) == Some(&split))
            .cloned()
            .collect()
    }

    pub fn stimulus(&self, id: &str) -> Result<&StimulusRecord> {
        self.stimuli.get(id).ok_or_else(|| Error::DanglingStimulus {
            record: "lookup".into(),
            stimulus_id: id.to_string(),
        })
    }

    /// Every caption in the training split, sorted and deduplicated.
    pub fn train_captions(&self) -> Vec<String> {
        let mut caps: Vec<String> = self
            .split
            .iter()
            .filter(|(_, s)| **s == Split::Train)
            .filter_map(|(id, _)| self.stimuli.get(id))
            .flat_map(|s| s.captions.iter().cloned())
            .collect();
        caps.sort();
        caps.dedup();
        caps
    }
}

/// Train records z-scored per session; test records z-scored then averaged
/// over repeats.
pub fn prepare_splits(manifest: &DatasetManifest) -> (Vec<FmriRecord>, Vec<FmriRecord>) {
    let normalized = zscore_by_session(&manifest.records);
    let (train, test): (Vec<_>, Vec<_>) = normalized
        .into_iter()
        .partition(|r| manifest.split.get(&r.stimulus_id) == Some(&Split::Train));
    (train, average_repeats(&test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_invariants() {
        assert!(AtlasMask::new(RoiName::Early, vec![], 4).is_err());
        assert!(AtlasMask::new(RoiName::Early, vec![1, 1], 4).is_err());
        assert!(AtlasMask::new(RoiName::Early, vec![2, 1], 4).is_err());
        assert!(matches!(
            AtlasMask::new(RoiName::Early, vec![0, 4], 4),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
        let m = AtlasMask::new(RoiName::Early, vec![0, 3], 4).unwrap();
        assert_eq!(
            AtlasMask::parse(RoiName::Early, &m.to_text(), 4).unwrap(),
            m
        );
    }

    #[test]
    fn stimulus_needs_five_captions() {
        let img = Image::filled(2, 2, 3, 0.5);
        let four = vec!["a".to_string(); 4];
        let err = StimulusRecord::new("s".into(), img.clone(), four).unwrap_err();
        assert!(err.to_string().contains("expected 5 captions"));
        assert!(StimulusRecord::new("s".into(), img, vec!["a".into(); 5]).is_ok());
    }

    #[test]
    fn roi_names_parse() {
        for roi in RoiName::ALL {
            assert_eq!(roi.as_str().parse::<RoiName>().unwrap(), roi);
        }
        assert!("v1".parse::<RoiName>().is_err());
    }
}
