use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Batch size and per-channel inner size for a tensor whose axis 1 is the
    /// channel axis (`[N, C]` or `[N, C, H, W]`).
    pub(crate) fn channel_layout(&self) -> (usize, usize, usize) {
        let n = self.shape[0];
        let c = self.shape[1];
        let inner = self.shape[2..].iter().product();
        (n, c, inner)
    }
}

/// Matrix product of two 2-D tensors with optional transposition of either
/// operand: `op(a) · op(b)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    assert_eq!(a.shape.len(), 2, "matmul lhs must be 2-D, got {:?}", a.shape);
    assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-D, got {:?}", b.shape);
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims: {:?} x {:?} (ta={ta}, tb={tb})", a.shape, b.shape);
    let mut out = Tensor::zeros(&[m, n]);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Geometry of a 2-D convolution window sweep over an `[N, C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    pub fn cols(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfold image windows into rows `(n, oh, ow)` by columns `(c, kh, kw)`.
pub fn im2col<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    assert_eq!(x.shape, [g.n, g.c, g.h, g.w], "im2col input shape");
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.cols();
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.rows() * cols];
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &x.data[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let col = c * kk + ki * g.k + kj;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let row_base = (n * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            out[(row_base + ox) * cols + col] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.rows(), cols], out)
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im<T: Scalar>(cols_t: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    assert_eq!(cols_t.shape, [g.rows(), g.cols()], "col2im input shape");
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.cols();
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &mut out[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let col = c * kk + ki * g.k + kj;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row_base = (n * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            plane[iy as usize * g.w + ix as usize] +=
                                cols_t.data[(row_base + ox) * cols + col];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.c, g.h, g.w], out)
}

/// Permute the axes of a 4-D tensor: output axis `i` is input axis `perm[i]`.
pub fn permute4<T: Scalar>(x: &Tensor<T>, perm: [usize; 4]) -> Tensor<T> {
    assert_eq!(x.shape.len(), 4, "permute4 on {:?}", x.shape);
    let s = &x.shape;
    let in_strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
    let st = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
        in_strides[perm[3]],
    ];
    let mut out = Vec::with_capacity(x.data.len());
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                for d in 0..out_shape[3] {
                    out.push(x.data[base + d * st[3]]);
                }
            }
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn inverse_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Non-overlapping `k×k` average pooling; trailing rows/cols that do not
/// fill a window are dropped.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = T::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ky in 0..k {
                let row = &src[(oy * k + ky) * w..][..w];
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for kx in 0..k {
                        acc += row[ox * k + kx];
                    }
                    dst[oy * ow + ox] += acc;
                }
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Adjoint of [`avg_pool`] for an input of spatial size `h×w`.
pub fn avg_unpool<T: Scalar>(g: &Tensor<T>, k: usize, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = (g.shape[0], g.shape[1], g.shape[2], g.shape[3]);
    let scale = T::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &g.data[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for oy in 0..oh {
            for ky in 0..k {
                let row = &mut dst[(oy * k + ky) * w..][..w];
                for ox in 0..ow {
                    let v = src[oy * ow + ox] * scale;
                    for kx in 0..k {
                        row[ox * k + kx] = v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Sum over every axis except axis 1.
pub fn channel_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, inner) = x.channel_layout();
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let s: T = x.data[(b * c + ch) * inner..][..inner].iter().copied().sum();
            *o += s;
        }
    }
    Tensor::from_vec(&[c], out)
}

/// Broadcast a `[C]` vector along axis 1 of `shape`.
pub fn channel_broadcast<T: Scalar>(v: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n = shape[0];
    let c = shape[1];
    assert_eq!(v.shape, [c], "channel_broadcast vector shape");
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(n * c * inner);
    for _ in 0..n {
        for &val in &v.data {
            out.extend(std::iter::repeat_n(val, inner));
        }
    }
    Tensor::from_vec(shape, out)
}

/// Concatenate along axis 1.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let first = parts[0];
    let n = first.shape[0];
    let inner: usize = first.shape[2..].iter().product();
    let total_c: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = Vec::with_capacity(n * total_c * inner);
    for b in 0..n {
        for p in parts {
            assert_eq!(p.shape[0], n);
            assert_eq!(&p.shape[2..], &first.shape[2..], "concat spatial mismatch");
            let c = p.shape[1];
            out.extend_from_slice(&p.data[b * c * inner..][..c * inner]);
        }
    }
    let mut shape = first.shape.clone();
    shape[1] = total_c;
    Tensor::from_vec(&shape, out)
}

/// Channels `[start, start+len)` of axis 1.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let (n, c, inner) = x.channel_layout();
    let mut out = Vec::with_capacity(n * len * inner);
    for b in 0..n {
        out.extend_from_slice(&x.data[(b * c + start) * inner..][..len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[1] = len;
    Tensor::from_vec(&shape, out)
}

/// Adjoint of [`slice_channels`]: embed into zeros with `total` channels.
pub fn pad_channels<T: Scalar>(x: &Tensor<T>, start: usize, total: usize) -> Tensor<T> {
    let (n, len, inner) = x.channel_layout();
    let mut out = vec![T::zero(); n * total * inner];
    for b in 0..n {
        out[(b * total + start) * inner..][..len * inner]
            .copy_from_slice(&x.data[b * len * inner..][..len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[1] = total;
    Tensor::from_vec(&shape, out)
}

/// Sum over the last axis of a 2-D tensor.
pub fn sum_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape[0], x.shape[1]);
    let out = (0..r)
        .map(|i| x.data[i * c..][..c].iter().copied().sum())
        .collect();
    Tensor::from_vec(&[r], out)
}

pub fn expand_last<T: Scalar>(x: &Tensor<T>, c: usize) -> Tensor<T> {
    let r = x.shape[0];
    let mut out = Vec::with_capacity(r * c);
    for &v in &x.data {
        out.extend(std::iter::repeat_n(v, c));
    }
    Tensor::from_vec(&[r, c], out)
}
