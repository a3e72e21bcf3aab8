use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Ordered list of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
        });
        self.params.len() - 1
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i].value
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.params[i].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Zero-filled buffers matching every parameter.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rounds every value to `f32` precision, matching what a checkpoint
    /// stores on disk.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in &mut p.value {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Replaces values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        for p in &mut self.params {
            p.value.iter_mut().for_each(|v| *v = value);
        }
    }
}
