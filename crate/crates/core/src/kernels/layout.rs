//! Strided views that realize reshape / transpose / slicing as access
//! patterns over an existing buffer, so no kernel ever copies data to change
//! its shape.

use crate::error::{Error, Result};
use crate::qcore::{QTensor, QuantParams};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutDescriptor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    /// `permutation[a]` is the axis of the originating row-major layout that
    /// logical axis `a` reads from. Selecting an axis removes its entry.
    permutation: Vec<usize>,
    offset: usize,
}

impl LayoutDescriptor {
    pub fn row_major(shape: &[usize]) -> Self {
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        Self {
            shape: shape.to_vec(),
            strides,
            permutation: (0..shape.len()).collect(),
            offset: 0,
        }
    }

    pub fn new(shape: Vec<usize>, permutation: Vec<usize>, strides: Vec<usize>, offset: usize) -> Result<Self> {
        if shape.len() != strides.len() || shape.len() != permutation.len() {
            return Err(Error::ShapeMismatch("layout rank mismatch".into()));
        }
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || seen[p] {
                return Err(Error::ShapeMismatch(format!("{permutation:?} is not a permutation")));
            }
            seen[p] = true;
        }
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dim in {shape:?}")));
        }
        Ok(Self {
            shape,
            strides,
            permutation,
            offset,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Reorders axes: logical axis `a` of the result is axis `perm[a]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.rank();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch(format!("{perm:?} is not a permutation of {n} axes")));
        }
        Ok(Self {
            shape: perm.iter().map(|&p| self.shape[p]).collect(),
            strides: perm.iter().map(|&p| self.strides[p]).collect(),
            permutation: perm.iter().map(|&p| self.permutation[p]).collect(),
            offset: self.offset,
        })
    }

    /// Swaps the two axes of a 2-D layout.
    pub fn transposed(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch("transpose needs a 2-D layout".into()));
        }
        self.permute(&[1, 0])
    }

    /// Splits one axis into `parts` (row-major inside the axis).
    pub fn split_axis(&self, axis: usize, parts: &[usize]) -> Result<Self> {
        if axis >= self.rank() || parts.iter().product::<usize>() != self.shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "cannot split axis {axis} of {:?} into {parts:?}",
                self.shape
            )));
        }
        let base = self.strides[axis];
        let mut inner = vec![base; parts.len()];
        for i in (0..parts.len().saturating_sub(1)).rev() {
            inner[i] = inner[i + 1] * parts[i + 1];
        }
        let mut shape = self.shape[..axis].to_vec();
        shape.extend_from_slice(parts);
        shape.extend_from_slice(&self.shape[axis + 1..]);
        let mut strides = self.strides[..axis].to_vec();
        strides.extend(inner);
        strides.extend_from_slice(&self.strides[axis + 1..]);
        // Renumber the originating axes so the permutation stays a bijection.
        let src = self.permutation[axis];
        let extra = parts.len() - 1;
        let mut permutation: Vec<usize> = Vec::with_capacity(shape.len());
        let bump = |p: usize| if p > src { p + extra } else { p };
        permutation.extend(self.permutation[..axis].iter().map(|&p| bump(p)));
        permutation.extend((0..parts.len()).map(|i| src + i));
        permutation.extend(self.permutation[axis + 1..].iter().map(|&p| bump(p)));
        Ok(Self {
            shape,
            strides,
            permutation,
            offset: self.offset,
        })
    }

    /// Fixes `axis` at `index`, dropping it from the view.
    pub fn select(&self, axis: usize, index: usize) -> Result<Self> {
        if axis >= self.rank() || index >= self.shape[axis] {
            return Err(Error::ShapeMismatch(format!("select({axis}, {index}) out of {:?}", self.shape)));
        }
        let removed = self.permutation[axis];
        let mut out = self.clone();
        out.offset += index * self.strides[axis];
        out.shape.remove(axis);
        out.strides.remove(axis);
        out.permutation.remove(axis);
        for p in &mut out.permutation {
            if *p > removed {
                *p -= 1;
            }
        }
        Ok(out)
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "narrow({axis}, {start}, {len}) out of {:?}",
                self.shape
            )));
        }
        let mut out = self.clone();
        out.offset += start * self.strides[axis];
        out.shape[axis] = len;
        Ok(out)
    }

    pub fn offset_of(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        self.offset + index.iter().zip(&self.strides).map(|(i, s)| i * s).sum::<usize>()
    }

    /// Smallest buffer length that covers every addressed element.
    pub fn required_len(&self) -> usize {
        self.offset
            + self
                .shape
                .iter()
                .zip(&self.strides)
                .map(|(d, s)| (d - 1) * s)
                .sum::<usize>()
            + 1
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch(format!("expected 2-D layout, got {other:?}"))),
        }
    }
}

/// Read-only 2-D quantized matrix view.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub(crate) data: &'a [i8],
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) row_stride: usize,
    pub(crate) col_stride: usize,
    pub(crate) offset: usize,
    pub(crate) qp: QuantParams,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [i8], layout: &LayoutDescriptor, qp: QuantParams) -> Result<Self> {
        let (rows, cols) = layout.dims2()?;
        if layout.required_len() > data.len() {
            return Err(Error::ShapeMismatch(format!(
                "layout needs {} elements, buffer has {}",
                layout.required_len(),
                data.len()
            )));
        }
        Ok(Self {
            data,
            rows,
            cols,
            row_stride: layout.strides()[0],
            col_stride: layout.strides()[1],
            offset: layout.offset(),
            qp,
        })
    }

    pub fn row_major(data: &'a [i8], rows: usize, cols: usize, qp: QuantParams) -> Result<Self> {
        Self::new(data, &LayoutDescriptor::row_major(&[rows, cols]), qp)
    }

    pub fn from_tensor(t: &'a QTensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        Self::row_major(t.data(), r, c, t.qp())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn qp(&self) -> QuantParams {
        self.qp
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[self.offset + r * self.row_stride + c * self.col_stride]
    }

    /// The same matrix read as its transpose.
    pub fn t(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..*self
        }
    }

    pub fn rows_range(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.rows {
            return Err(Error::ShapeMismatch(format!("rows {start}+{len} of {}", self.rows)));
        }
        Ok(Self {
            rows: len,
            offset: self.offset + start * self.row_stride,
            ..*self
        })
    }

    pub fn cols_range(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.cols {
            return Err(Error::ShapeMismatch(format!("cols {start}+{len} of {}", self.cols)));
        }
        Ok(Self {
            cols: len,
            offset: self.offset + start * self.col_stride,
            ..*self
        })
    }
}

/// Writable 2-D view; `qp` is the parameter set written values are quantized to.
#[derive(Debug)]
pub struct MatMut<'a> {
    pub(crate) data: &'a mut [i8],
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) row_stride: usize,
    pub(crate) col_stride: usize,
    pub(crate) offset: usize,
    pub(crate) qp: QuantParams,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [i8], layout: &LayoutDescriptor, qp: QuantParams) -> Result<Self> {
        let (rows, cols) = layout.dims2()?;
        if layout.required_len() > data.len() {
            return Err(Error::ShapeMismatch(format!(
                "layout needs {} elements, buffer has {}",
                layout.required_len(),
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            row_stride: layout.strides()[0],
            col_stride: layout.strides()[1],
            offset: layout.offset(),
            data,
            qp,
        })
    }

    pub fn row_major(data: &'a mut [i8], rows: usize, cols: usize, qp: QuantParams) -> Result<Self> {
        Self::new(data, &LayoutDescriptor::row_major(&[rows, cols]), qp)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    pub(crate) fn idx(&self, r: usize, c: usize) -> usize {
        self.offset + r * self.row_stride + c * self.col_stride
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(n: usize) -> Vec<i8> {
        (0..n).map(|i| i as i8).collect()
    }

    #[test]
    fn row_major_strides() {
        let l = LayoutDescriptor::row_major(&[2, 3, 4]);
        assert_eq!(l.strides(), &[12, 4, 1]);
        assert_eq!(l.required_len(), 24);
        assert_eq!(l.offset_of(&[1, 2, 3]), 23);
    }

    #[test]
    fn transpose_is_access_pattern() {
        let data = buf(6);
        let l = LayoutDescriptor::row_major(&[2, 3]).transposed().unwrap();
        assert_eq!(l.shape(), &[3, 2]);
        assert_eq!(l.permutation(), &[1, 0]);
        let m = MatRef::new(&data, &l, QuantParams::symmetric(1.0).unwrap()).unwrap();
        assert_eq!(m.get(2, 1), 5);
        assert_eq!(m.get(1, 0), 1);
    }

    #[test]
    fn head_split_and_select() {
        // (s, d) -> (s, h, dh) -> (h, s, dh) -> head 1: (s, dh)
        let (s, h, dh) = (3, 2, 4);
        let data = buf(s * h * dh);
        let l = LayoutDescriptor::row_major(&[s, h * dh])
            .split_axis(1, &[h, dh])
            .unwrap()
            .permute(&[1, 0, 2])
            .unwrap();
        assert_eq!(l.shape(), &[h, s, dh]);
        assert_eq!(l.permutation(), &[1, 0, 2]);
        let head = l.select(0, 1).unwrap();
        assert_eq!(head.shape(), &[s, dh]);
        let m = MatRef::new(&data, &head, QuantParams::symmetric(1.0).unwrap()).unwrap();
        for r in 0..s {
            for c in 0..dh {
                assert_eq!(m.get(r, c) as usize, r * h * dh + dh + c);
            }
        }
    }

    #[test]
    fn invalid_layouts_rejected() {
        assert!(LayoutDescriptor::new(vec![2, 2], vec![0, 0], vec![2, 1], 0).is_err());
        assert!(LayoutDescriptor::row_major(&[2, 3]).permute(&[1, 1]).is_err());
        assert!(LayoutDescriptor::row_major(&[2, 3]).split_axis(1, &[2, 2]).is_err());
        let data = buf(5);
        let l = LayoutDescriptor::row_major(&[2, 3]);
        assert!(MatRef::new(&data, &l, QuantParams::symmetric(1.0).unwrap()).is_err());
    }

    #[test]
    fn narrow_and_ranges_agree() {
        let data = buf(12);
        let qp = QuantParams::symmetric(1.0).unwrap();
        let l = LayoutDescriptor::row_major(&[3, 4]).narrow(1, 1, 2).unwrap();
        let a = MatRef::new(&data, &l, qp).unwrap();
        let b = MatRef::row_major(&data, 3, 4, qp).unwrap().cols_range(1, 2).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(a.get(r, c), b.get(r, c));
            }
        }
    }
}
