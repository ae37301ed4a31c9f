//! Elementwise and row-wise epilogues computed in fp32 and requantized.

use crate::error::{Error, Result};
use crate::qcore::{QTensor, QuantParams};

use super::matmul::add_elem;

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Row-wise softmax over a row-major `rows x cols` buffer, in place.
/// Each row must be a complete attention distribution.
pub fn softmax_rows_inplace(data: &mut [i8], cols: usize, in_qp: QuantParams, out_qp: QuantParams) {
    let mut row_f = vec![0f32; cols];
    for row in data.chunks_exact_mut(cols) {
        let mut max = f32::NEG_INFINITY;
        for (f, &q) in row_f.iter_mut().zip(row.iter()) {
            *f = in_qp.dequantize_value(q);
            max = max.max(*f);
        }
        let mut sum = 0f32;
        for f in row_f.iter_mut() {
            *f = (*f - max).exp();
            sum += *f;
        }
        for (q, f) in row.iter_mut().zip(&row_f) {
            *q = out_qp.quantize_value(f / sum);
        }
    }
}

pub fn softmax_rows(scores: &QTensor, out_qp: QuantParams) -> Result<QTensor> {
    let (_, cols) = scores.dims2()?;
    let mut data = scores.data().to_vec();
    softmax_rows_inplace(&mut data, cols, scores.qp(), out_qp);
    QTensor::new(data, scores.shape().to_vec(), out_qp)
}

pub fn layernorm_rows_inplace(
    data: &mut [i8],
    cols: usize,
    in_qp: QuantParams,
    gamma: &[f32],
    beta: &[f32],
    out_qp: QuantParams,
) -> Result<()> {
    if cols == 0 || gamma.len() != cols || beta.len() != cols {
        return Err(Error::ShapeMismatch(format!(
            "layernorm over {cols} columns with gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut row_f = vec![0f32; cols];
    for row in data.chunks_exact_mut(cols) {
        let mut sum = 0f32;
        for (f, &q) in row_f.iter_mut().zip(row.iter()) {
            *f = in_qp.dequantize_value(q);
            sum += *f;
        }
        let mean = sum / cols as f32;
        let var = row_f.iter().map(|f| (f - mean) * (f - mean)).sum::<f32>() / cols as f32;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (i, q) in row.iter_mut().enumerate() {
            *q = out_qp.quantize_value((row_f[i] - mean) * inv * gamma[i] + beta[i]);
        }
    }
    Ok(())
}

pub fn layernorm_rows(x: &QTensor, gamma: &[f32], beta: &[f32], out_qp: QuantParams) -> Result<QTensor> {
    let (_, cols) = x.dims2()?;
    let mut data = x.data().to_vec();
    layernorm_rows_inplace(&mut data, cols, x.qp(), gamma, beta, out_qp)?;
    QTensor::new(data, x.shape().to_vec(), out_qp)
}

#[inline]
pub fn gelu_f32(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// 256-entry int8 -> int8 table of tanh-approximated GELU for one
/// (input, output) parameter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GeluLut {
    table: [i8; 256],
    in_qp: QuantParams,
    out_qp: QuantParams,
}

impl GeluLut {
    pub fn new(in_qp: QuantParams, out_qp: QuantParams) -> Self {
        let mut table = [0i8; 256];
        for (i, e) in table.iter_mut().enumerate() {
            let q = (i as i32 - 128) as i8;
            *e = out_qp.quantize_value(gelu_f32(in_qp.dequantize_value(q)));
        }
        Self { table, in_qp, out_qp }
    }

    #[inline]
    pub fn lookup(&self, q: i8) -> i8 {
        self.table[(q as i32 + 128) as usize]
    }

    pub fn apply_inplace(&self, data: &mut [i8]) {
        for q in data {
            *q = self.lookup(*q);
        }
    }

    pub fn in_qp(&self) -> QuantParams {
        self.in_qp
    }

    pub fn out_qp(&self) -> QuantParams {
        self.out_qp
    }
}

pub fn gelu(x: &QTensor, out_qp: QuantParams) -> Result<QTensor> {
    let lut = GeluLut::new(x.qp(), out_qp);
    let mut data = x.data().to_vec();
    lut.apply_inplace(&mut data);
    QTensor::new(data, x.shape().to_vec(), out_qp)
}

/// Second operand of [`residual_add_inplace`]. Two distinct buffers can never
/// partially overlap behind safe references, so the only aliasing case left
/// is the exact one, which is spelled out explicitly.
#[derive(Debug, Clone, Copy)]
pub enum Addend<'a> {
    Other(&'a [i8], QuantParams),
    SelfAlias,
}

/// `x <- quantize(deq(x) + deq(y))` with no new buffer.
pub fn residual_add_inplace(x: &mut [i8], x_qp: QuantParams, y: Addend<'_>, out_qp: QuantParams) -> Result<()> {
    match y {
        Addend::Other(y, y_qp) => {
            if y.len() != x.len() {
                return Err(Error::ShapeMismatch(format!(
                    "residual operands hold {} and {} elements",
                    x.len(),
                    y.len()
                )));
            }
            for (a, &b) in x.iter_mut().zip(y) {
                *a = add_elem(*a, x_qp, b, y_qp, out_qp);
            }
        }
        Addend::SelfAlias => {
            for a in x.iter_mut() {
                *a = add_elem(*a, x_qp, *a, x_qp, out_qp);
            }
        }
    }
    Ok(())
}
