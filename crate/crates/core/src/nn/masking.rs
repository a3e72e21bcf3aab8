use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Input masking in the style of masked language modelling: a fixed
/// fraction of voxel coordinates is overwritten before the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    pub mask_ratio: f64,
    pub mask_value: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            mask_value: 0.0,
        }
    }
}

impl MaskingPolicy {
    pub fn disabled() -> Self {
        Self {
            mask_ratio: 0.0,
            mask_value: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn masked_count(&self, n: usize) -> usize {
        ((self.mask_ratio * n as f64).round() as usize).min(n)
    }
}

/// Replaces exactly `round(mask_ratio · n)` coordinates, drawn uniformly
/// without replacement from a generator seeded with `rng_seed`.
pub fn apply_input_mask(voxels: &[f64], policy: &MaskingPolicy, rng_seed: u64) -> Vec<f64> {
    let mut out = voxels.to_vec();
    let k = policy.masked_count(voxels.len());
    if k == 0 {
        return out;
    }
    let mut rng = rng_from_seed(rng_seed);
    for i in sample(&mut rng, voxels.len(), k) {
        out[i] = policy.mask_value;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_vec_seeded;

    #[test]
    fn ratio_zero_is_identity() {
        let x = gaussian_vec_seeded(1, 50);
        assert_eq!(apply_input_mask(&x, &MaskingPolicy::disabled(), 9), x);
    }

    #[test]
    fn ratio_one_zeroes_everything() {
        let x = gaussian_vec_seeded(2, 50);
        let p = MaskingPolicy {
            mask_ratio: 1.0,
            mask_value: 0.0,
        };
        assert!(apply_input_mask(&x, &p, 9).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_count_and_untouched_rest() {
        let x: Vec<f64> = (0..1000).map(|i| i as f64 + 1.0).collect();
        let p = MaskingPolicy {
            mask_ratio: 0.3,
            mask_value: 0.0,
        };
        let y = apply_input_mask(&x, &p, 42);
        let changed = x.iter().zip(&y).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 300);
        for (a, b) in x.iter().zip(&y) {
            assert!(b == a || *b == 0.0);
        }
        assert_eq!(y, apply_input_mask(&x, &p, 42));
        assert_ne!(y, apply_input_mask(&x, &p, 43));
    }

    #[test]
    fn invalid_ratio() {
        assert!(MaskingPolicy {
            mask_ratio: 1.5,
            mask_value: 0.0
        }
        .validate()
        .is_err());
    }
}
