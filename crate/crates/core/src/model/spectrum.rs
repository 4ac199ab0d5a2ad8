use serde::{Deserialize, Serialize};

use super::ModelError;

/// Intensities on a uniform m/z axis; bin `i` sits at `mz_start + i * mz_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub intensities: Vec<f64>,
    pub mz_start: f64,
    pub mz_step: f64,
}

impl Spectrum {
    pub fn new(intensities: Vec<f64>, mz_start: f64, mz_step: f64) -> Result<Self, ModelError> {
        if let Some((i, &v)) = intensities
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(ModelError::InvalidSpectrum(format!(
                "intensity at bin {i} is {v}; intensities must be finite and nonnegative"
            )));
        }
        if !(mz_step > 0.0) {
            return Err(ModelError::InvalidSpectrum(format!("m/z step {mz_step} must be positive")));
        }
        Ok(Self {
            intensities,
            mz_start,
            mz_step,
        })
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn mz(&self, bin: usize) -> f64 {
        self.mz_start + bin as f64 * self.mz_step
    }

    pub fn tic(&self) -> f64 {
        self.intensities.iter().sum()
    }

    /// Rescales to unit total ion count.
    pub fn tic_normalize(&self) -> Result<Self, ModelError> {
        Ok(Self {
            intensities: tic_normalize(&self.intensities)?,
            mz_start: self.mz_start,
            mz_step: self.mz_step,
        })
    }
}

/// Divides by the total ion count so the result sums to one.
pub fn tic_normalize(intensities: &[f64]) -> Result<Vec<f64>, ModelError> {
    let tic: f64 = intensities.iter().sum();
    if !(tic > 0.0) || !tic.is_finite() {
        return Err(ModelError::ZeroTic(tic));
    }
    Ok(intensities.iter().map(|v| v / tic).collect())
}
