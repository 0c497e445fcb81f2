//! Dense double-precision tensors of rank three: `[batch, rows, cols]`.
//! Matrices use batch 1, row vectors use `[1, 1, n]`, scalars `[1, 1, 1]`.

use crate::error::DiffError;

pub type Shape = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, DiffError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DiffError::InvalidTensor(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, v: f64) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: [1, 1, 1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Self::new([1, rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: [1, 1, data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([1, n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn get(&self, b: usize, r: usize, c: usize) -> f64 {
        let [_, rows, cols] = self.shape;
        self.data[(b * rows + r) * cols + c]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        // x * 0 is 0 for finite x and NaN otherwise; independent lanes let
        // the loop vectorize
        let mut lanes = [0.0f64; 8];
        let chunks = self.data.chunks_exact(8);
        let rest = chunks.remainder();
        for c in chunks {
            for (l, v) in lanes.iter_mut().zip(c) {
                *l += v * 0.0;
            }
        }
        lanes.iter().all(|l| *l == 0.0) && rest.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Shape) -> Result<Self, DiffError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(DiffError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape, DiffError> {
    let mut out = [0; 3];
    for i in 0..3 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(DiffError::Shape { op, lhs: a, rhs: b }),
        };
    }
    Ok(out)
}

/// Elementwise binary map with broadcasting over size-1 dimensions.
pub(crate) fn broadcast_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, DiffError> {
    let shape = broadcast_shape(op, a.shape, b.shape)?;
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape, data });
    }
    let [nb, nr, nc] = shape;
    let mut data = Vec::with_capacity(nb * nr * nc);
    let idx = |s: Shape, bi: usize, ri: usize, ci: usize| {
        let bi = if s[0] == 1 { 0 } else { bi };
        let ri = if s[1] == 1 { 0 } else { ri };
        let ci = if s[2] == 1 { 0 } else { ci };
        (bi * s[1] + ri) * s[2] + ci
    };
    for bi in 0..nb {
        for ri in 0..nr {
            if a.shape[2] == nc && b.shape[2] == nc {
                let ao = idx(a.shape, bi, ri, 0);
                let bo = idx(b.shape, bi, ri, 0);
                for ci in 0..nc {
                    data.push(f(a.data[ao + ci], b.data[bo + ci]));
                }
            } else {
                for ci in 0..nc {
                    data.push(f(a.data[idx(a.shape, bi, ri, ci)], b.data[idx(b.shape, bi, ri, ci)]));
                }
            }
        }
    }
    Ok(Tensor { shape, data })
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

/// Sums `a` down to `target`, which must be `a`'s shape with some
/// dimensions reduced to 1.
pub(crate) fn sum_to(a: &Tensor, target: Shape) -> Result<Tensor, DiffError> {
    for i in 0..3 {
        if target[i] != a.shape[i] && target[i] != 1 {
            return Err(DiffError::Shape {
                op: "sum_to",
                lhs: a.shape,
                rhs: target,
            });
        }
    }
    if target == a.shape {
        return Ok(a.clone());
    }
    let [nb, nr, nc] = a.shape;
    let mut out = Tensor::zeros(target);
    for bi in 0..nb {
        let tb = if target[0] == 1 { 0 } else { bi };
        for ri in 0..nr {
            let tr = if target[1] == 1 { 0 } else { ri };
            let src = &a.data[(bi * nr + ri) * nc..(bi * nr + ri + 1) * nc];
            let base = (tb * target[1] + tr) * target[2];
            if target[2] == 1 {
                out.data[base] += src.iter().sum::<f64>();
            } else {
                for (o, v) in out.data[base..base + nc].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
    }
    Ok(out)
}

/// Repeats `a` along its size-1 dimensions up to `target`.
pub(crate) fn expand(a: &Tensor, target: Shape) -> Result<Tensor, DiffError> {
    let ok = (0..3).all(|i| a.shape[i] == target[i] || a.shape[i] == 1);
    if !ok {
        return Err(DiffError::Shape {
            op: "expand",
            lhs: a.shape,
            rhs: target,
        });
    }
    if a.shape == target {
        return Ok(a.clone());
    }
    let [nb, nr, nc] = target;
    let mut data = Vec::with_capacity(nb * nr * nc);
    for bi in 0..nb {
        let sb = if a.shape[0] == 1 { 0 } else { bi };
        for ri in 0..nr {
            let sr = if a.shape[1] == 1 { 0 } else { ri };
            let base = (sb * a.shape[1] + sr) * a.shape[2];
            if a.shape[2] == nc {
                data.extend_from_slice(&a.data[base..base + nc]);
            } else {
                data.extend(std::iter::repeat_n(a.data[base], nc));
            }
        }
    }
    Ok(Tensor { shape: target, data })
}

/// Batched product `[Ba, R, K] x [Bb, K, C]` where the batch sizes match
/// or one of them is 1.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    let [ba, r, k] = a.shape;
    let [bb, k2, c] = b.shape;
    if k != k2 || !(ba == bb || ba == 1 || bb == 1) {
        return Err(DiffError::Shape {
            op: "matmul",
            lhs: a.shape,
            rhs: b.shape,
        });
    }
    let nb = ba.max(bb);
    let len = nb * r * c;
    let mut data: Vec<f64> = Vec::with_capacity(len);
    if bb == 1 {
        // stack the batch into one tall product
        // SAFETY: gemm with beta = 0 writes every output element without
        // reading it, so the spare capacity is fully initialized afterwards.
        unsafe {
            gemm(ba * r, k, c, a.data.as_ptr(), b.data.as_ptr(), data.as_mut_ptr());
            data.set_len(len);
        }
    } else {
        for bi in 0..nb {
            let ao = if ba == 1 { 0 } else { bi * r * k };
            // SAFETY: as above; offsets stay within the m*k, k*n and m*n
            // blocks of each batch entry.
            unsafe {
                gemm(
                    r,
                    k,
                    c,
                    a.data.as_ptr().add(ao),
                    b.data.as_ptr().add(bi * k * c),
                    data.as_mut_ptr().add(bi * r * c),
                );
            }
        }
        // SAFETY: every batch block was written.
        unsafe { data.set_len(len) };
    }
    Ok(Tensor {
        shape: [nb, r, c],
        data,
    })
}

/// Row-major `c = a b` for `a: m x k`, `b: k x n`.
///
/// # Safety
/// `a`, `b` and `c` must be valid for `m*k`, `k*n` and `m*n` elements.
unsafe fn gemm(m: usize, k: usize, n: usize, a: *const f64, b: *const f64, c: *mut f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        std::ptr::write_bytes(c, 0, m * n);
        return;
    }
    matrixmultiply::dgemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c, n as isize, 1);
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let [nb, r, c] = a.shape;
    let mut out = Tensor::zeros([nb, c, r]);
    for bi in 0..nb {
        let src = &a.data[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out.data[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Softmax along the last dimension with max subtraction.
pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let c = a.shape[2];
    let mut out = a.clone();
    for row in out.data.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, DiffError> {
    let [nb, nr, _] = parts[0].shape;
    for p in parts {
        if p.shape[0] != nb || p.shape[1] != nr {
            return Err(DiffError::Shape {
                op: "concat",
                lhs: parts[0].shape,
                rhs: p.shape,
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[2]).sum();
    let mut data = Vec::with_capacity(nb * nr * total);
    for row in 0..nb * nr {
        for p in parts {
            let c = p.shape[2];
            data.extend_from_slice(&p.data[row * c..(row + 1) * c]);
        }
    }
    Ok(Tensor {
        shape: [nb, nr, total],
        data,
    })
}

pub(crate) fn slice_cols(a: &Tensor, start: usize, width: usize) -> Result<Tensor, DiffError> {
    let [nb, nr, nc] = a.shape;
    if start + width > nc {
        return Err(DiffError::Shape {
            op: "slice_cols",
            lhs: a.shape,
            rhs: [nb, nr, start + width],
        });
    }
    let mut data = Vec::with_capacity(nb * nr * width);
    for row in a.data.chunks_exact(nc) {
        data.extend_from_slice(&row[start..start + width]);
    }
    Ok(Tensor {
        shape: [nb, nr, width],
        data,
    })
}

/// Places `a` at column offset `start` inside a zero tensor `total` wide.
pub(crate) fn pad_cols(a: &Tensor, start: usize, total: usize) -> Result<Tensor, DiffError> {
    let [nb, nr, nc] = a.shape;
    if start + nc > total {
        return Err(DiffError::Shape {
            op: "pad_cols",
            lhs: a.shape,
            rhs: [nb, nr, total],
        });
    }
    let mut out = Tensor::zeros([nb, nr, total]);
    for (dst, src) in out.data.chunks_exact_mut(total).zip(a.data.chunks_exact(nc)) {
        dst[start..start + nc].copy_from_slice(src);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_broadcast_matches_per_batch() {
        let a = Tensor::new([2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 2, 2]);
        // row [0,1,2] -> [0+2, 1+2]
        assert_eq!(&c.data()[..2], &[2.0, 3.0]);
        // row [9,10,11] -> [20, 21]
        assert_eq!(&c.data()[6..], &[20.0, 21.0]);
    }

    #[test]
    fn sum_to_and_expand() {
        let a = Tensor::new([2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = sum_to(&a, [1, 1, 2]).unwrap();
        assert_eq!(s.data(), &[16.0, 20.0]);
        let r = sum_to(&a, [2, 2, 1]).unwrap();
        assert_eq!(r.data(), &[3.0, 7.0, 11.0, 15.0]);
        let e = expand(&s, [2, 2, 2]).unwrap();
        assert_eq!(e.data()[6..], [16.0, 20.0]);
    }

    #[test]
    fn slice_pad_concat() {
        let a = Tensor::new([1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = slice_cols(&a, 1, 2).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 5.0, 6.0]);
        let p = pad_cols(&s, 1, 3).unwrap();
        assert_eq!(p.data(), &[0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
        let c = concat_cols(&[&slice_cols(&a, 0, 1).unwrap(), &s]).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = Tensor::row(vec![0.0, 3f64.ln()]);
        let s = softmax_rows(&a);
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let shifted = softmax_rows(&map(&a, |x| x + 1000.0));
        for (x, y) in s.data().iter().zip(shifted.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
