//! Dense row-major `f64` tensors and the numeric kernels behind every graph op.

use std::fmt;

use crate::error::{GraphError, Result};

/// A dense, row-major array of `f64` values.
///
/// A tensor with an empty shape is a scalar holding exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(GraphError::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(GraphError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| GraphError::Shape("rows() on scalar".into()))?;
        if start >= end || end > n {
            return Err(GraphError::Shape(format!("row range {start}..{end} out of 0..{n}")));
        }
        let row = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(&shape, self.data[start * row..end * row].to_vec())
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| GraphError::Shape("select_rows() on scalar".into()))?;
        if idx.is_empty() {
            return Err(GraphError::Shape("select_rows() with no indices".into()));
        }
        let row = self.data.len() / n;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return Err(GraphError::Shape(format!("row index {i} out of 0..{n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(&shape, data)
    }

    /// Concatenates along the leading axis; trailing shapes must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| GraphError::Shape("concat of nothing".into()))?;
        if first.shape.is_empty() {
            return Err(GraphError::Shape("concat of scalars".into()));
        }
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(GraphError::Shape(format!(
                    "concat trailing shape {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::new(&shape, data)
    }
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let axis = i + rank - shape.len();
        strides[axis] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor { shape: out_shape.to_vec(), data };
    }
    if b.data.len() == 1 {
        let y = b.data[0];
        let mut data: Vec<f64> = a.data.iter().map(|&x| f(x, y)).collect();
        if data.len() != numel(out_shape) {
            data = broadcast_general(a, b, out_shape, &f);
        }
        return Tensor { shape: out_shape.to_vec(), data };
    }
    if a.data.len() == numel(out_shape) && out_shape.ends_with(&b.shape) {
        let m = b.data.len();
        let data = a
            .data
            .chunks(m)
            .flat_map(|row| row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect();
        return Tensor { shape: out_shape.to_vec(), data };
    }
    Tensor { shape: out_shape.to_vec(), data: broadcast_general(a, b, out_shape, &f) }
}

fn broadcast_general(a: &Tensor, b: &Tensor, out: &[usize], f: &impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let sa = broadcast_strides(&a.shape, out);
    let sb = broadcast_strides(&b.shape, out);
    let total = numel(out);
    let rank = out.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total {
        data.push(f(a.data[ia], b.data[ib]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    data
}

/// Sums `t` down to `target`, which must broadcast to `t`'s shape.
pub(crate) fn sum_to_shape(t: &Tensor, target: &[usize]) -> Tensor {
    if t.shape == target {
        return t.clone();
    }
    let out = &t.shape;
    let strides = broadcast_strides(target, out);
    let mut data = vec![0.0; numel(target)];
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut it = 0usize;
    for &v in &t.data {
        data[it] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            it += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            it -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Tensor { shape: target.to_vec(), data }
}

pub(crate) fn broadcast_to(t: &Tensor, target: &[usize]) -> Tensor {
    if t.shape == target {
        return t.clone();
    }
    let zero = Tensor::full(target, 0.0);
    broadcast_binary(&zero, t, target, |_, y| y)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

/// Stride-1 "same" convolution (cross-correlation) with zero padding.
/// `x`: [n, ci, h, w], `k`: [co, ci, kh, kw] with odd kh, kw.
pub(crate) fn conv2d(x: &Tensor, k: &Tensor) -> Tensor {
    let (n, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; n * co * h * w];
    for b in 0..n {
        for o in 0..co {
            let dst = &mut out[(b * co + o) * h * w..(b * co + o + 1) * h * w];
            for c in 0..ci {
                let src = &x.data[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                for a in 0..kh {
                    for e in 0..kw {
                        let kv = k.data[((o * ci + c) * kh + a) * kw + e];
                        if kv == 0.0 {
                            continue;
                        }
                        let dy = a as isize - ph as isize;
                        let dx = e as isize - pw as isize;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy).min(h as isize) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                            for (d, &s) in drow.iter_mut().zip(srow) {
                                *d += kv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![n, co, h, w], data: out }
}

/// Gradient of `conv2d(x, k)` with respect to `k`, given the output cotangent `g`.
/// Returns [co, ci, kh, kw].
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, kh: usize, kw: usize) -> Tensor {
    let (n, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let co = g.shape[1];
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; co * ci * kh * kw];
    for b in 0..n {
        for o in 0..co {
            let gsrc = &g.data[(b * co + o) * h * w..(b * co + o + 1) * h * w];
            for c in 0..ci {
                let src = &x.data[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                for a in 0..kh {
                    for e in 0..kw {
                        let dy = a as isize - ph as isize;
                        let dx = e as isize - pw as isize;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy).min(h as isize) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gsrc[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                            for (&gv, &s) in grow.iter().zip(srow) {
                                acc += gv * s;
                            }
                        }
                        out[((o * ci + c) * kh + a) * kw + e] += acc;
                    }
                }
            }
        }
    }
    Tensor { shape: vec![co, ci, kh, kw], data: out }
}

/// Swaps the two channel axes of a kernel and rotates it by 180 degrees.
pub(crate) fn flip_kernel(k: &Tensor) -> Tensor {
    let (co, ci, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    let mut out = vec![0.0; k.data.len()];
    for o in 0..co {
        for c in 0..ci {
            for a in 0..kh {
                for e in 0..kw {
                    out[((c * co + o) * kh + (kh - 1 - a)) * kw + (kw - 1 - e)] =
                        k.data[((o * ci + c) * kh + a) * kw + e];
                }
            }
        }
    }
    Tensor { shape: vec![ci, co, kh, kw], data: out }
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c) = (x.shape[0], x.shape[1]);
    let hw: usize = x.shape[2..].iter().product();
    let data = x.data.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
    Tensor { shape: vec![n, c], data }
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
fn bilinear_taps(out_len: usize, factor: usize) -> Vec<[(usize, f64); 2]> {
    let in_len = out_len / factor;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            if i0 == i1 {
                [(i0, 1.0), (i1, 0.0)]
            } else {
                [(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

/// Bilinear upsampling of the two trailing axes by an integer factor
/// (half-pixel centres, edge clamped).
pub(crate) fn upsample(x: &Tensor, factor: usize) -> Tensor {
    let r = x.shape.len();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, factor);
    let tx = bilinear_taps(ow, factor);
    let planes = x.data.len() / (h * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, tys) in ty.iter().enumerate() {
            for (xx, txs) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, wy) in tys {
                    for &(sx, wx) in txs {
                        acc += wy * wx * src[sy * w + sx];
                    }
                }
                dst[y * ow + xx] = acc;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor { shape, data: out }
}

/// Adjoint of [`upsample`]: scatters each output back onto its source taps.
pub(crate) fn upsample_transpose(g: &Tensor, factor: usize) -> Tensor {
    let r = g.shape.len();
    let (oh, ow) = (g.shape[r - 2], g.shape[r - 1]);
    let (h, w) = (oh / factor, ow / factor);
    let ty = bilinear_taps(oh, factor);
    let tx = bilinear_taps(ow, factor);
    let planes = g.data.len() / (oh * ow);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, tys) in ty.iter().enumerate() {
            for (xx, txs) in tx.iter().enumerate() {
                let v = src[y * ow + xx];
                for &(sy, wy) in tys {
                    for &(sx, wx) in txs {
                        dst[sy * w + sx] += wy * wx * v;
                    }
                }
            }
        }
    }
    let mut shape = g.shape.clone();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor { shape, data: out }
}

/// Softmax over the last axis.
pub(crate) fn softmax(x: &Tensor) -> Tensor {
    let k = *x.shape.last().unwrap_or(&1);
    let mut data = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / s));
    }
    Tensor { shape: x.shape.clone(), data }
}

/// Row-wise `logsumexp(z) * sum(t) - sum(t * z)` for [n, k] inputs.
pub(crate) fn cross_entropy(z: &Tensor, t: &Tensor) -> Tensor {
    let k = z.shape[1];
    let data = z
        .data
        .chunks(k)
        .zip(t.data.chunks(k))
        .map(|(zr, tr)| {
            let m = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + zr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            let ts: f64 = tr.iter().sum();
            let tz: f64 = zr.iter().zip(tr).map(|(a, b)| a * b).sum();
            lse * ts - tz
        })
        .collect();
    Tensor { shape: vec![z.shape[0]], data }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn argmax_one_hot(x: &Tensor) -> Tensor {
    let k = *x.shape.last().unwrap_or(&1);
    let mut data = vec![0.0; x.data.len()];
    for (r, row) in x.data.chunks(k).enumerate() {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        data[r * k + best] = 1.0;
    }
    Tensor { shape: x.shape.clone(), data }
}

pub(crate) fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let row = x.data.len() / x.shape[0];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&x.data[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape.clone();
    shape[0] = idx.len();
    Tensor { shape, data }
}

pub(crate) fn scatter_rows(x: &Tensor, idx: &[usize], rows: usize) -> Tensor {
    let row = x.data.len() / x.shape[0];
    let mut data = vec![0.0; rows * row];
    for (src, &i) in idx.iter().enumerate() {
        for (d, &s) in data[i * row..(i + 1) * row].iter_mut().zip(&x.data[src * row..(src + 1) * row]) {
            *d += s;
        }
    }
    let mut shape = x.shape.clone();
    shape[0] = rows;
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[2, 3, 4, 4], &[3, 1, 1]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(sum_to_shape(&x, &[3]).data(), &[5., 7., 9.]);
        assert_eq!(sum_to_shape(&x, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(sum_to_shape(&x, &[]).data(), &[21.]);
    }

    #[test]
    fn column_broadcast_matches_general_path() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[2, 1], &[10., 20.]);
        let out = broadcast_binary(&a, &b, &[2, 3], |x, y| x + y);
        assert_eq!(out.data(), &[11., 12., 13., 24., 25., 26.]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k).data(), x.data());
    }

    #[test]
    fn conv_shift_kernel_zero_pads() {
        // kernel picks the right-hand neighbour
        let x = t(&[1, 1, 1, 3], &[1., 2., 3.]);
        let mut k = Tensor::zeros(&[1, 1, 1, 3]);
        k.data_mut()[2] = 1.0;
        assert_eq!(conv2d(&x, &k).data(), &[2., 3., 0.]);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(upsample(&x, 1), x);
        assert_eq!(upsample_transpose(&x, 1), x);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::full(&[1, 3, 3], 2.5);
        let up = upsample(&x, 2);
        assert_eq!(up.shape(), &[1, 6, 6]);
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Tensor::zeros(&[1, 3]);
        let tgt = t(&[1, 3], &[1., 0., 0.]);
        assert!((cross_entropy(&z, &tgt).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = t(&[2, 3], &[1., 2., 3., -1., 0., 100.]);
        let s = softmax(&z);
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
