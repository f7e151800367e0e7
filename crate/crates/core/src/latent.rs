use crate::error::{Error, Result};

/// A finite `f32` tensor in row-major order.
///
/// Images are stored channel-first (`3 x H x W`) in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Latent {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidLatent(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = element_count(&shape)?;
        Self::new(shape, vec![value; n])
    }

    /// Converts `f64` values, rejecting anything that is not finite after the cast.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    // Callers guarantee shape/length agreement and finiteness.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Multiplies every element by `c`.
    pub fn scaled(&self, c: f32) -> Result<Latent> {
        Latent::new(self.shape.clone(), self.data.iter().map(|v| v * c).collect())
    }

    /// Euclidean norm computed in `f64` with compensated summation.
    pub fn norm(&self) -> f64 {
        crate::analysis::neumaier_sum(self.data.iter().map(|&v| (v as f64) * (v as f64))).sqrt()
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidLatent("shape has no dimensions".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidLatent(format!("zero dimension in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidLatent(format!("shape {shape:?} overflows")))
}
