//! Int8 matmul with an int32 accumulator.
//!
//! The tiled kernel walks the output in `[M_r, N_r]` register blocks and the
//! reduction in chunks of `unroll` elements, each chunk consumed `K_r` lanes
//! at a time through a dot-product helper (the desk-scale stand-in for a
//! 4-lane SIMD MAC). Within every output element the reduction runs over
//! ascending k, so blocking never changes the result.

use std::ops::{Add, AddAssign};

use serde::Serialize;

use super::layout::{MatMut, MatRef};
use crate::error::{Error, Result};
use crate::qcore::{multiplier, requantize, QTensor, QuantParams};

const MAX_MR: usize = 8;
const MAX_NR: usize = 8;
const MAX_KR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MicroKernelShape {
    pub m_r: usize,
    pub n_r: usize,
    pub k_r: usize,
    pub unroll: usize,
}

impl Default for MicroKernelShape {
    fn default() -> Self {
        Self {
            m_r: 4,
            n_r: 2,
            k_r: 4,
            unroll: 64,
        }
    }
}

impl MicroKernelShape {
    /// The `[1, 2, 4]` block used by CMSIS-NN style kernels.
    pub fn cmsis_like() -> Self {
        Self {
            m_r: 1,
            n_r: 2,
            k_r: 4,
            unroll: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (1..=MAX_MR).contains(&self.m_r)
            && (1..=MAX_NR).contains(&self.n_r)
            && (1..=MAX_KR).contains(&self.k_r)
            && self.unroll >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "micro-kernel {self:?} outside [1..={MAX_MR}]x[1..={MAX_NR}]x[1..={MAX_KR}]"
            )))
        }
    }
}

/// Instruction-level proxy counts for one or more kernel invocations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub macs: u64,
    pub dot4_ops: u64,
    pub loads: u64,
    pub stores: u64,
}

impl Add for OpCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            macs: self.macs + o.macs,
            dot4_ops: self.dot4_ops + o.dot4_ops,
            loads: self.loads + o.loads,
            stores: self.stores + o.stores,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// What happens to each requantized product before it is stored.
#[derive(Debug, Clone, Copy)]
pub enum Epilogue {
    Store,
    /// `out[m, n] = quantize(deq(out[m, n]) + deq(product))`; the destination
    /// holds values at `residual` and receives values at `result`.
    AddInto {
        residual: QuantParams,
        result: QuantParams,
    },
}

#[inline]
pub(crate) fn add_elem(x: i8, x_qp: QuantParams, y: i8, y_qp: QuantParams, out: QuantParams) -> i8 {
    out.quantize_value(x_qp.dequantize_value(x) + y_qp.dequantize_value(y))
}

#[inline(always)]
fn dot_lanes(a: &[i32], b: &[i32]) -> i32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_shapes(a: &MatRef<'_>, b: &MatRef<'_>, bias: Option<&[i32]>, out_rows: usize, out_cols: usize) -> Result<()> {
    if a.cols == 0 {
        return Err(Error::ShapeMismatch("reduction dimension K is 0".into()));
    }
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "inner dims differ: A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if out_rows != a.rows || out_cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "output is {out_rows}x{out_cols}, product is {}x{}",
            a.rows, b.cols
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != b.cols {
            return Err(Error::ShapeMismatch(format!("bias has {} entries, N is {}", bias.len(), b.cols)));
        }
    }
    Ok(())
}

#[inline(always)]
fn store(out: &mut MatMut<'_>, m: usize, n: usize, acc: i32, mult: f32, epi: Epilogue) {
    let i = out.idx(m, n);
    let q = requantize(acc, mult, out.qp.zero_point);
    out.data[i] = match epi {
        Epilogue::Store => q,
        Epilogue::AddInto { residual, result } => add_elem(out.data[i], residual, q, out.qp, result),
    };
}

/// Register-blocked matmul writing into `out`.
#[allow(clippy::needless_range_loop)]
pub fn matmul_into(
    a: &MatRef<'_>,
    b: &MatRef<'_>,
    bias: Option<&[i32]>,
    out: &mut MatMut<'_>,
    mk: MicroKernelShape,
    epi: Epilogue,
) -> Result<OpCounts> {
    mk.validate()?;
    check_shapes(a, b, bias, out.rows, out.cols)?;
    let (m_total, n_total, k_total) = (a.rows, b.cols, a.cols);
    let mult = multiplier(a.qp.scale, b.qp.scale, out.qp);
    let (zpa, zpb) = (a.qp.zero_point, b.qp.zero_point);
    let mut counts = OpCounts {
        macs: (m_total * n_total * k_total) as u64,
        ..Default::default()
    };

    let mut acc = [[0i32; MAX_NR]; MAX_MR];
    let mut a_lanes = [[0i32; MAX_KR]; MAX_MR];
    let mut b_lanes = [[0i32; MAX_KR]; MAX_NR];

    for m0 in (0..m_total).step_by(mk.m_r) {
        let mb = mk.m_r.min(m_total - m0);
        for n0 in (0..n_total).step_by(mk.n_r) {
            let nb = mk.n_r.min(n_total - n0);
            for row in acc.iter_mut().take(mb) {
                for (j, v) in row.iter_mut().enumerate().take(nb) {
                    *v = bias.map_or(0, |bias| bias[n0 + j]);
                }
            }
            for c0 in (0..k_total).step_by(mk.unroll) {
                let c_end = (c0 + mk.unroll).min(k_total);
                let mut k0 = c0;
                while k0 < c_end {
                    let kb = mk.k_r.min(c_end - k0);
                    // LDx4: one lane vector per A row and per B column.
                    for i in 0..mb {
                        let base = a.offset + (m0 + i) * a.row_stride + k0 * a.col_stride;
                        for l in 0..kb {
                            a_lanes[i][l] = a.data[base + l * a.col_stride] as i32 - zpa;
                        }
                    }
                    for j in 0..nb {
                        let base = b.offset + k0 * b.row_stride + (n0 + j) * b.col_stride;
                        for l in 0..kb {
                            b_lanes[j][l] = b.data[base + l * b.row_stride] as i32 - zpb;
                        }
                    }
                    // DOTx4 over the register block.
                    for i in 0..mb {
                        for j in 0..nb {
                            acc[i][j] += dot_lanes(&a_lanes[i][..kb], &b_lanes[j][..kb]);
                        }
                    }
                    counts.loads += (mb + nb) as u64;
                    counts.dot4_ops += (mb * nb) as u64;
                    k0 += kb;
                }
            }
            for i in 0..mb {
                for j in 0..nb {
                    store(out, m0 + i, n0 + j, acc[i][j], mult, epi);
                }
            }
            counts.stores += (mb * nb) as u64;
        }
    }
    Ok(counts)
}

/// Plain triple loop over ascending k; the oracle for [`matmul_into`].
pub fn matmul_reference_into(
    a: &MatRef<'_>,
    b: &MatRef<'_>,
    bias: Option<&[i32]>,
    out: &mut MatMut<'_>,
    epi: Epilogue,
) -> Result<()> {
    check_shapes(a, b, bias, out.rows, out.cols)?;
    let mult = multiplier(a.qp.scale, b.qp.scale, out.qp);
    for m in 0..a.rows {
        for n in 0..b.cols {
            let mut acc = bias.map_or(0, |bias| bias[n]);
            for k in 0..a.cols {
                acc += (a.get(m, k) as i32 - a.qp.zero_point) * (b.get(k, n) as i32 - b.qp.zero_point);
            }
            store(out, m, n, acc, mult, epi);
        }
    }
    Ok(())
}

pub fn matmul_tiled(
    a: &MatRef<'_>,
    b: &MatRef<'_>,
    bias: Option<&[i32]>,
    out_qp: QuantParams,
    mk: MicroKernelShape,
) -> Result<(QTensor, OpCounts)> {
    out_qp.validate()?;
    let mut data = vec![0i8; a.rows * b.cols];
    let counts = {
        let mut out = MatMut::row_major(&mut data, a.rows, b.cols, out_qp)?;
        matmul_into(a, b, bias, &mut out, mk, Epilogue::Store)?
    };
    Ok((QTensor::new(data, vec![a.rows, b.cols], out_qp)?, counts))
}

pub fn matmul_reference(a: &MatRef<'_>, b: &MatRef<'_>, bias: Option<&[i32]>, out_qp: QuantParams) -> Result<QTensor> {
    out_qp.validate()?;
    let mut data = vec![0i8; a.rows * b.cols];
    {
        let mut out = MatMut::row_major(&mut data, a.rows, b.cols, out_qp)?;
        matmul_reference_into(a, b, bias, &mut out, Epilogue::Store)?;
    }
    QTensor::new(data, vec![a.rows, b.cols], out_qp)
}

/// `Q_tile · K_headᵀ` with the transpose realized as a strided read of the
/// row-major `K_head` buffer: no transposed copy exists.
pub fn attention_scores_into(
    q_tile: &MatRef<'_>,
    k_head: &MatRef<'_>,
    out: &mut MatMut<'_>,
    mk: MicroKernelShape,
) -> Result<OpCounts> {
    if q_tile.cols != k_head.cols {
        return Err(Error::ShapeMismatch(format!(
            "head dims differ: Q tile has {}, K head has {}",
            q_tile.cols, k_head.cols
        )));
    }
    matmul_into(q_tile, &k_head.t(), None, out, mk, Epilogue::Store)
}

pub fn attention_scores(
    q_tile: &MatRef<'_>,
    k_head: &MatRef<'_>,
    out_qp: QuantParams,
    mk: MicroKernelShape,
) -> Result<(QTensor, OpCounts)> {
    out_qp.validate()?;
    let (t, s) = (q_tile.rows, k_head.rows);
    let mut data = vec![0i8; t * s];
    let counts = {
        let mut out = MatMut::row_major(&mut data, t, s, out_qp)?;
        attention_scores_into(q_tile, k_head, &mut out, mk)?
    };
    Ok((QTensor::new(data, vec![t, s], out_qp)?, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::layout::LayoutDescriptor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp(s: f32, z: i32) -> QuantParams {
        QuantParams::new(s, z).unwrap()
    }

    #[test]
    fn identity_product() {
        let a = [1i8, 2, 3, 4];
        let b = [1i8, 0, 0, 1];
        let am = MatRef::row_major(&a, 2, 2, qp(1.0, 0)).unwrap();
        let bm = MatRef::row_major(&b, 2, 2, qp(1.0, 0)).unwrap();
        let (t, _) = matmul_tiled(&am, &bm, None, qp(1.0, 0), MicroKernelShape::default()).unwrap();
        assert_eq!(t.data(), &[1, 2, 3, 4]);
        let r = matmul_reference(&am, &bm, Some(&[0, 0]), qp(1.0, 0)).unwrap();
        assert_eq!(r.data(), &[1, 2, 3, 4]);
    }

    #[test]
    fn scalar_product() {
        let am = MatRef::row_major(&[2], 1, 1, qp(1.0, 0)).unwrap();
        let bm = MatRef::row_major(&[3], 1, 1, qp(1.0, 0)).unwrap();
        let (t, c) = matmul_tiled(&am, &bm, None, qp(1.0, 0), MicroKernelShape::default()).unwrap();
        assert_eq!(t.data(), &[6]);
        assert_eq!(c.macs, 1);
        assert_eq!(matmul_reference(&am, &bm, None, qp(1.0, 0)).unwrap().data(), &[6]);
    }

    #[test]
    fn zero_points_and_bias() {
        // A real = [[1, -1]], B real = [[2], [3]] -> 2 - 3 + bias(4) = 3
        let am = MatRef::row_major(&[6, 4], 1, 2, qp(1.0, 5)).unwrap();
        let bm = MatRef::row_major(&[2, 3], 2, 1, qp(1.0, 0)).unwrap();
        let r = matmul_reference(&am, &bm, Some(&[4]), qp(1.0, -2)).unwrap();
        assert_eq!(r.data(), &[1]);
    }

    #[test]
    fn shape_errors() {
        let a = [0i8; 6];
        let b = [0i8; 6];
        let am = MatRef::row_major(&a, 2, 3, qp(1.0, 0)).unwrap();
        let bm = MatRef::row_major(&b, 2, 3, qp(1.0, 0)).unwrap();
        assert!(matches!(
            matmul_tiled(&am, &bm, None, qp(1.0, 0), MicroKernelShape::default()),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matmul_reference(&am, &bm, None, qp(1.0, 0)).is_err());
        let bt = bm.t();
        assert!(matmul_reference(&am, &bt, Some(&[0; 3]), qp(1.0, 0)).is_err());
    }

    #[test]
    fn zero_k_rejected() {
        let am = MatRef {
            data: &[],
            rows: 1,
            cols: 0,
            row_stride: 0,
            col_stride: 1,
            offset: 0,
            qp: qp(1.0, 0),
        };
        let bm = MatRef { rows: 0, cols: 1, ..am };
        let err = matmul_tiled(&am, &bm, None, qp(1.0, 0), MicroKernelShape::default()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(m) if m.contains("K is 0")));
    }

    #[test]
    fn op_counts_follow_block_shape() {
        let (m, n, k) = (8, 4, 16);
        let a = vec![1i8; m * k];
        let b = vec![1i8; k * n];
        let am = MatRef::row_major(&a, m, k, qp(1.0, 0)).unwrap();
        let bm = MatRef::row_major(&b, k, n, qp(1.0, 0)).unwrap();
        let (_, ours) = matmul_tiled(&am, &bm, None, qp(1.0, 0), MicroKernelShape::default()).unwrap();
        let (_, cmsis) = matmul_tiled(&am, &bm, None, qp(1.0, 0), MicroKernelShape::cmsis_like()).unwrap();
        // Same dot count, fewer loads with the taller block.
        assert_eq!(ours.dot4_ops, (m * n * k / 4) as u64);
        assert_eq!(cmsis.dot4_ops, ours.dot4_ops);
        assert_eq!(ours.loads, ((m / 4) * (n / 2) * (k / 4) * 6) as u64);
        assert_eq!(cmsis.loads, (m * (n / 2) * (k / 4) * 3) as u64);
        assert!(ours.loads < cmsis.loads);
        assert_eq!(ours.stores, (m * n) as u64);
    }

    #[test]
    fn scores_single_token_is_dot_product() {
        let q = [1i8, 2, 3];
        let k = [4i8, 5, 6];
        let qm = MatRef::row_major(&q, 1, 3, qp(1.0, 0)).unwrap();
        let km = MatRef::row_major(&k, 1, 3, qp(1.0, 0)).unwrap();
        let (s, _) = attention_scores(&qm, &km, qp(1.0, 0), MicroKernelShape::default()).unwrap();
        assert_eq!(s.data(), &[32]);
    }

    #[test]
    fn scores_match_explicit_transpose() {
        // Orthogonal rows of +-1 (a 4x4 Hadamard matrix): Q K^T is diagonal.
        let h: [i8; 16] = [1, 1, 1, 1, 1, -1, 1, -1, 1, 1, -1, -1, 1, -1, -1, 1];
        let scaled: Vec<i8> = h.iter().map(|v| v * 20).collect();
        let m = MatRef::row_major(&scaled, 4, 4, qp(0.05, 0)).unwrap();
        let (s, _) = attention_scores(&m, &m, qp(0.05, 0), MicroKernelShape::default()).unwrap();
        let mut kt = vec![0i8; 16];
        for r in 0..4 {
            for c in 0..4 {
                kt[c * 4 + r] = scaled[r * 4 + c];
            }
        }
        let ktm = MatRef::row_major(&kt, 4, 4, qp(0.05, 0)).unwrap();
        let reference = matmul_reference(&m, &ktm, None, qp(0.05, 0)).unwrap();
        assert_eq!(s, reference);
        for r in 0..4 {
            for c in 0..4 {
                let v = s.data()[r * 4 + c];
                if r == c {
                    assert_eq!(v, 80);
                } else {
                    assert_eq!(v, 0);
                }
            }
        }
    }

    #[test]
    fn residual_epilogue() {
        let a = [2i8];
        let b = [3i8];
        let am = MatRef::row_major(&a, 1, 1, qp(1.0, 0)).unwrap();
        let bm = MatRef::row_major(&b, 1, 1, qp(1.0, 0)).unwrap();
        let mut dst = [10i8];
        let mut out = MatMut::row_major(&mut dst, 1, 1, qp(1.0, 0)).unwrap();
        let epi = Epilogue::AddInto {
            residual: qp(1.0, 0),
            result: qp(2.0, 0),
        };
        matmul_into(&am, &bm, None, &mut out, MicroKernelShape::default(), epi).unwrap();
        assert_eq!(dst, [8]);
    }

    fn random_case(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> (Vec<i8>, Vec<i8>, Vec<i32>, QuantParams, QuantParams, QuantParams) {
        let a: Vec<i8> = (0..m * k).map(|_| rng.gen()).collect();
        let b: Vec<i8> = (0..k * n).map(|_| rng.gen()).collect();
        let bias: Vec<i32> = (0..n).map(|_| rng.gen_range(-5000..5000)).collect();
        let qa = qp(rng.gen_range(0.01..0.1), rng.gen_range(-20..20));
        let qb = qp(rng.gen_range(0.01..0.1), rng.gen_range(-3..3));
        let qo = qp(rng.gen_range(0.5..4.0), rng.gen_range(-10..10));
        (a, b, bias, qa, qb, qo)
    }

    #[test]
    fn tiled_matches_reference_with_transposed_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (m, n, k) = (rng.gen_range(1..13), rng.gen_range(1..13), rng.gen_range(1..150));
            let (a, b, bias, qa, qb, qo) = random_case(&mut rng, m, n, k);
            let am = MatRef::row_major(&a, m, k, qa).unwrap();
            // B stored N x K, read as K x N.
            let layout = LayoutDescriptor::row_major(&[n, k]).transposed().unwrap();
            let bm = MatRef::new(&b, &layout, qb).unwrap();
            let (t, _) = matmul_tiled(&am, &bm, Some(&bias), qo, MicroKernelShape::default()).unwrap();
            assert_eq!(t, matmul_reference(&am, &bm, Some(&bias), qo).unwrap());
        }
    }

    proptest! {
        #[test]
        fn tiled_equals_reference(
            m in 1usize..20, n in 1usize..20, k in 1usize..200,
            mr in 1usize..=8, nr in 1usize..=8, kr in 1usize..=8, unroll in 1usize..80,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, bias, qa, qb, qo) = random_case(&mut rng, m, n, k);
            let am = MatRef::row_major(&a, m, k, qa).unwrap();
            let bm = MatRef::row_major(&b, k, n, qb).unwrap();
            let mk = MicroKernelShape { m_r: mr, n_r: nr, k_r: kr, unroll };
            let (t, c) = matmul_tiled(&am, &bm, Some(&bias), qo, mk).unwrap();
            prop_assert_eq!(&t, &matmul_reference(&am, &bm, Some(&bias), qo).unwrap());
            prop_assert_eq!(c.macs, (m * n * k) as u64);
        }
    }
}
