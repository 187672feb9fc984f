use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense row-major array of `f64` values.
///
/// Every constructor rejects NaN and infinities, so a `Tensor` in hand is
/// always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    requires_grad: bool,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = NumericsError;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        let t = Tensor::new(raw.shape, raw.values)?;
        Ok(if raw.requires_grad { t.with_grad() } else { t })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteInput { index });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
        })
    }

    pub fn scalar(value: f64) -> Result<Self, NumericsError> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            requires_grad,
        }
    }
}

/// Writes `log_softmax(x)` into `out` using max subtraction.
pub fn log_softmax_slice(x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub fn log_softmax_vec(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    log_softmax_slice(x, &mut out);
    out
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    log_softmax_vec(x).into_iter().map(f64::exp).collect()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
