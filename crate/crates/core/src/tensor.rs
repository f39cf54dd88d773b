//! Dense row-major tensors and the numeric kernels shared by the tape.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values in row-major order.
///
/// `product(shape) == data.len()` holds for every constructed tensor. A
/// rank-0 tensor (empty shape) holds one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a rank-2 tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarRoot(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Left-to-right sum.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &x| acc.max(x.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().fold(0.0, |acc, &x| acc + x.abs()) / self.data.len() as f64
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rank-2 matrix product without gradient tracking.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Self::new(vec![m, n], out)
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Index of the largest value in each row of a rank-2 tensor; ties go to
    /// the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(cols.max(1))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN
    /// payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// `out = beta * out + op(a) * op(b)` for row-major `op(a): m×k`,
/// `op(b): k×n`. The transposition flags describe how `a` and `b` are stored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe matrices that lie entirely within
    // `a` (m*k values), `b` (k*n values) and `out` (m*n values); callers
    // pass slices of exactly those lengths.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast to it.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    // Strides of the input, zeroed along broadcast axes.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums `grad` (of `out_shape`) down to `in_shape`, undoing a broadcast.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(in_shape)];
    for (g, &j) in grad.iter().zip(&broadcast_index_map(in_shape, out_shape)) {
        out[j] += g;
    }
    out
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one CHW image into a `patch_len × (out_h*out_w)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let spatial = oh * ow;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back into a CHW image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let spatial = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(
            broadcast_shape(&[2, 1, 5], &[4, 1]).unwrap(),
            vec![2, 4, 5]
        );
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[3], &[4]).is_err());
    }

    #[test]
    fn reduce_undoes_broadcast() {
        // [2,3] grad reduced to a [1,3] row sums columns.
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[1, 3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[]), vec![21.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeometry {
            in_channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let n_img = 2 * 5 * 4;
        let n_col = g.patch_len() * g.out_height() * g.out_width();
        let x: Vec<f64> = (0..n_img).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..n_col).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n_col];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; n_img];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0, 1]);
    }
}
