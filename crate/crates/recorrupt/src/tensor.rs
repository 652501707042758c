//! Dense n-dimensional tensors of 64-bit reals, row-major.
//!
//! This is the universal value carrier of the crate. Raw numeric kernels
//! (elementwise ops, matmul, conv2d and their adjoints) live here; the
//! differentiation graph in [`crate::autodiff`] records which of them ran.

use crate::{Error, Result};
use rayon::prelude::*;

/// Work threshold below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Domain(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single stored value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────

/// Right-aligned broadcast of `src` to `target`: missing leading axes are
/// added, size-1 axes repeat. Errors when an axis is neither equal nor 1.
pub fn broadcast_to(src: &Tensor, target: &[usize]) -> Result<Tensor> {
    if src.shape() == target {
        return Ok(src.clone());
    }
    let srank = src.shape.len();
    let trank = target.len();
    if srank > trank {
        return Err(Error::ShapeMismatch {
            op: "broadcast",
            lhs: src.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    // Padded source shape, aligned to the right.
    let mut padded = vec![1usize; trank];
    padded[trank - srank..].copy_from_slice(&src.shape);
    for (i, (&s, &t)) in padded.iter().zip(target).enumerate() {
        if s != t && s != 1 {
            let _ = i;
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: src.shape.clone(),
                rhs: target.to_vec(),
            });
        }
    }
    let numel: usize = target.iter().product();
    let mut out = vec![0.0; numel];
    let src_strides = strides_for(&padded);
    let mut idx = vec![0usize; trank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let _ = flat;
        let mut soff = 0usize;
        for a in 0..trank {
            if padded[a] != 1 {
                soff += idx[a] * src_strides[a];
            }
        }
        *slot = src.data[soff];
        // Advance the multi-index.
        for a in (0..trank).rev() {
            idx[a] += 1;
            if idx[a] < target[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Adjoint of [`broadcast_to`]: sum `grad` back down to `src_shape`.
pub fn reduce_to(grad: &Tensor, src_shape: &[usize]) -> Tensor {
    if grad.shape() == src_shape {
        return grad.clone();
    }
    let trank = grad.shape.len();
    let srank = src_shape.len();
    let mut padded = vec![1usize; trank];
    padded[trank - srank..].copy_from_slice(src_shape);
    let src_strides = strides_for(&padded);
    let numel: usize = padded.iter().product();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; trank];
    for &g in grad.data.iter() {
        let mut soff = 0usize;
        for a in 0..trank {
            if padded[a] != 1 {
                soff += idx[a] * src_strides[a];
            }
        }
        out[soff] += g;
        for a in (0..trank).rev() {
            idx[a] += 1;
            if idx[a] < grad.shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor {
        shape: src_shape.to_vec(),
        data: out,
    }
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

// ── Slicing and concatenation ────────────────────────────────────────

/// Copy the sub-block `[start, stop)` per axis.
pub fn slice(src: &Tensor, ranges: &[(usize, usize)]) -> Result<Tensor> {
    if ranges.len() != src.shape.len() {
        return Err(Error::Domain(format!(
            "slice wants {} ranges for shape {:?}, got {}",
            src.shape.len(),
            src.shape,
            ranges.len()
        )));
    }
    for (a, &(s, e)) in ranges.iter().enumerate() {
        if s >= e || e > src.shape[a] {
            return Err(Error::Domain(format!(
                "slice range {s}..{e} invalid on axis {a} of extent {}",
                src.shape[a]
            )));
        }
    }
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let mut out = Tensor::zeros(&out_shape);
    let src_strides = strides_for(&src.shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for slot in out.data.iter_mut() {
        let mut soff = 0usize;
        for a in 0..rank {
            soff += (ranges[a].0 + idx[a]) * src_strides[a];
        }
        *slot = src.data[soff];
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(out)
}

/// Adjoint of [`slice`]: scatter `grad` into a zero tensor of `src_shape`.
pub fn slice_adjoint(grad: &Tensor, src_shape: &[usize], ranges: &[(usize, usize)]) -> Tensor {
    let mut out = Tensor::zeros(src_shape);
    let src_strides = strides_for(src_shape);
    let rank = src_shape.len();
    let mut idx = vec![0usize; rank];
    for &g in grad.data.iter() {
        let mut soff = 0usize;
        for a in 0..rank {
            soff += (ranges[a].0 + idx[a]) * src_strides[a];
        }
        out.data[soff] += g;
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < grad.shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Domain("concat of zero tensors".into()))?;
    let rank = first.shape.len();
    if axis >= rank {
        return Err(Error::Domain(format!("concat axis {axis} out of rank {rank}")));
    }
    let mut axis_total = 0usize;
    for p in parts {
        if p.shape.len() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        for a in 0..rank {
            if a != axis && p.shape[a] != first.shape[a] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        axis_total += p.shape[axis];
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = axis_total;
    // Treat tensors as [outer, axis, inner] blocks.
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let out_row = axis_total * inner;
    let mut axis_off = 0usize;
    for p in parts {
        let p_axis = p.shape[axis];
        for o in 0..outer {
            let src = &p.data[o * p_axis * inner..(o + 1) * p_axis * inner];
            let dst_start = o * out_row + axis_off * inner;
            out.data[dst_start..dst_start + p_axis * inner].copy_from_slice(src);
        }
        axis_off += p_axis;
    }
    Ok(out)
}

// ── Matrix multiply ──────────────────────────────────────────────────

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    if lhs.shape.len() != 2 || rhs.shape.len() != 2 || lhs.shape[1] != rhs.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: lhs.shape.clone(),
            rhs: rhs.shape.clone(),
        });
    }
    let (m, k) = (lhs.shape[0], lhs.shape[1]);
    let n = rhs.shape[1];
    let mut out = vec![0.0; m * n];
    let work = m * k * n;
    let row = |i: usize, out_row: &mut [f64]| {
        for p in 0..k {
            let a = lhs.data[i * k + p];
            let rrow = &rhs.data[p * n..(p + 1) * n];
            for (o, &b) in out_row.iter_mut().zip(rrow) {
                *o += a * b;
            }
        }
    };
    if work >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// 2-D transpose.
pub fn transpose(t: &Tensor) -> Result<Tensor> {
    if t.shape.len() != 2 {
        return Err(Error::Domain(format!(
            "transpose wants a 2-d tensor, got shape {:?}",
            t.shape
        )));
    }
    let (m, n) = (t.shape[0], t.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

// ── 2-D convolution, stride 1, zero padding ──────────────────────────

fn conv_dims(input: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.shape.len() != 4 || kernel.shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    let (n, ci, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (co, kci, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kci != ci || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    Ok((n, ci, h, w, co, kh, kw))
}

/// Accumulate `dst[oy,ox] += c * src[oy+dy, ox+dx]` over the valid window.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, c: f64) {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let sy = (oy as isize + dy) as usize;
        let drow = &mut dst[oy * w + x0..oy * w + x1];
        let srow = &src[sy * w + (x0 as isize + dx) as usize..];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d += c * s;
        }
    }
}

/// `[n,ci,h,w] * [co,ci,kh,kw] -> [n,co,h,w]` with zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, ci, h, w, co, kh, kw) = conv_dims(input, kernel)?;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let mut out = vec![0.0; n * co * plane];
    let work = n * co * ci * plane * kh * kw;
    let fill = |chunk_idx: usize, dst: &mut [f64]| {
        let (nb, oc) = (chunk_idx / co, chunk_idx % co);
        for c_in in 0..ci {
            let src = &input.data[(nb * ci + c_in) * plane..(nb * ci + c_in + 1) * plane];
            let kbase = ((oc * ci + c_in) * kh) * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let cval = kernel.data[kbase + u * kw + v];
                    shifted_axpy(dst, src, h, w, u as isize - ph, v as isize - pw, cval);
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, d)| fill(i, d));
    } else {
        for (i, d) in out.chunks_mut(plane).enumerate() {
            fill(i, d);
        }
    }
    Tensor::new(vec![n, co, h, w], out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, kernel: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (n, ci) = (input_shape[0], input_shape[1]);
    let (h, w) = (input_shape[2], input_shape[3]);
    let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let mut out = vec![0.0; n * ci * plane];
    let work = n * co * ci * plane * kh * kw;
    let fill = |chunk_idx: usize, dst: &mut [f64]| {
        let (nb, c_in) = (chunk_idx / ci, chunk_idx % ci);
        for oc in 0..co {
            let src = &grad_out.data[(nb * co + oc) * plane..(nb * co + oc + 1) * plane];
            let kbase = ((oc * ci + c_in) * kh) * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let cval = kernel.data[kbase + u * kw + v];
                    // out[iy,ix] += c * gout[iy-dy, ix-dx]: flipped shift.
                    shifted_axpy(dst, src, h, w, ph - u as isize, pw - v as isize, cval);
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, d)| fill(i, d));
    } else {
        for (i, d) in out.chunks_mut(plane).enumerate() {
            fill(i, d);
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(grad_out: &Tensor, input: &Tensor, kernel_shape: &[usize]) -> Result<Tensor> {
    let (co, ci, kh, kw) = (
        kernel_shape[0],
        kernel_shape[1],
        kernel_shape[2],
        kernel_shape[3],
    );
    let (n, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let mut out = vec![0.0; co * ci * kh * kw];
    let work = n * co * ci * plane * kh * kw;
    let fill = |chunk_idx: usize, dst: &mut [f64]| {
        let (oc, c_in) = (chunk_idx / ci, chunk_idx % ci);
        for u in 0..kh {
            let dy = u as isize - ph;
            for v in 0..kw {
                let dx = v as isize - pw;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                let mut acc = 0.0;
                for nb in 0..n {
                    let g = &grad_out.data[(nb * co + oc) * plane..(nb * co + oc + 1) * plane];
                    let src = &input.data[(nb * ci + c_in) * plane..(nb * ci + c_in + 1) * plane];
                    for oy in y0..y1 {
                        let sy = (oy as isize + dy) as usize;
                        let grow = &g[oy * w + x0..oy * w + x1];
                        let srow = &src[sy * w + (x0 as isize + dx) as usize..];
                        let mut s = 0.0;
                        for (gv, &sv) in grow.iter().zip(srow) {
                            s += gv * sv;
                        }
                        acc += s;
                    }
                }
                dst[u * kw + v] = acc;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(kh * kw).enumerate().for_each(|(i, d)| fill(i, d));
    } else {
        for (i, d) in out.chunks_mut(kh * kw).enumerate() {
            fill(i, d);
        }
    }
    Tensor::new(kernel_shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_reduce_are_adjoint_shapes() {
        let bias = Tensor::from_vec(vec![1.0, 2.0]);
        let big = broadcast_to(&bias, &[3, 2]).unwrap();
        assert_eq!(big.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let back = reduce_to(&big, &[2]);
        assert_eq!(back.data(), &[3.0, 6.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(broadcast_to(&t, &[2, 2]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let prod = matmul(&eye, &a).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let img = Tensor::new(vec![1, 1, 4, 5], (0..20).map(|i| i as f64 * 0.3).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let out = conv2d(&img, &k).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn conv2d_matches_naive() {
        // Small case against a direct quadruple loop.
        let n = 2;
        let (ci, co, h, w, kh, kw) = (2, 3, 5, 4, 3, 3);
        let input = Tensor::new(
            vec![n, ci, h, w],
            (0..n * ci * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect(),
        )
        .unwrap();
        let kernel = Tensor::new(
            vec![co, ci, kh, kw],
            (0..co * ci * kh * kw).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect(),
        )
        .unwrap();
        let fast = conv2d(&input, &kernel).unwrap();
        let mut naive = Tensor::zeros(&[n, co, h, w]);
        for nb in 0..n {
            for oc in 0..co {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = 0.0;
                        for c_in in 0..ci {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let iy = oy as isize + u as isize - 1;
                                    let ix = ox as isize + v as isize - 1;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let iv = input.data()
                                            [((nb * ci + c_in) * h + iy as usize) * w + ix as usize];
                                        let kv = kernel.data()[((oc * ci + c_in) * kh + u) * kw + v];
                                        acc += iv * kv;
                                    }
                                }
                            }
                        }
                        naive.data_mut()[((nb * co + oc) * h + oy) * w + ox] = acc;
                    }
                }
            }
        }
        for (a, b) in fast.data().iter().zip(naive.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![5., 6., 7., 8., 9., 10.]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        let a2 = slice(&c, &[(0, 2), (0, 2)]).unwrap();
        assert_eq!(a2, a);
        let b2 = slice(&c, &[(0, 2), (2, 5)]).unwrap();
        assert_eq!(b2, b);
    }
}
