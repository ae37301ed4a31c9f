//! Per-tensor affine int8 quantization.
//!
//! real = (q - zero_point) * scale. Weights use zero_point = 0, activations may
//! carry any zero point in the int8 range. All rounding is half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        let qp = Self { scale, zero_point };
        qp.validate()?;
        Ok(qp)
    }

    /// Symmetric parameters (zero point 0), the weight convention.
    pub fn symmetric(scale: f32) -> Result<Self> {
        Self::new(scale, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) || !(-128..=127).contains(&self.zero_point)
        {
            return Err(Error::InvalidQuantParams {
                scale: self.scale,
                zero_point: self.zero_point,
            });
        }
        Ok(())
    }

    /// Representable real range `[(-128 - zp) * s, (127 - zp) * s]`.
    pub fn range(&self) -> (f32, f32) {
        (
            (-128 - self.zero_point) as f32 * self.scale,
            (127 - self.zero_point) as f32 * self.scale,
        )
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> i8 {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f32;
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        (q as i32 - self.zero_point) as f32 * self.scale
    }
}

/// Row-major int8 tensor with per-tensor quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    data: Vec<i8>,
    shape: Vec<usize>,
    qp: QuantParams,
}

impl QTensor {
    pub fn new(data: Vec<i8>, shape: Vec<usize>, qp: QuantParams) -> Result<Self> {
        qp.validate()?;
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dim in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { data, shape, qp })
    }

    pub fn zeros(shape: Vec<usize>, qp: QuantParams) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![0; n], shape, qp)
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn qp(&self) -> QuantParams {
        self.qp
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }
}

pub fn quantize(x: &[f32], shape: Vec<usize>, qp: QuantParams) -> Result<QTensor> {
    qp.validate()?;
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let data = x.iter().map(|&v| qp.quantize_value(v)).collect();
    QTensor::new(data, shape, qp)
}

pub fn dequantize(q: &QTensor) -> Vec<f32> {
    let qp = q.qp();
    q.data().iter().map(|&v| qp.dequantize_value(v)).collect()
}

/// Int32 accumulator to int8: `clamp(round_half_even(acc * multiplier) + zp_out)`.
///
/// `multiplier` is `scale_a * scale_b / scale_out`, precomputed per operator.
#[inline]
pub fn requantize(acc: i32, multiplier: f32, zp_out: i32) -> i8 {
    let q = (acc as f32 * multiplier).round_ties_even() + zp_out as f32;
    q.clamp(-128.0, 127.0) as i8
}

/// Epilogue multiplier for a product of tensors with scales `sa`, `sb`
/// written at `out`.
#[inline]
pub fn multiplier(sa: f32, sb: f32, out: QuantParams) -> f32 {
    sa * sb / out.scale
}
