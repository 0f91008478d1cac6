use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{matmul, Real, TensorMut, TensorRef, Trans};
use crate::resample::reflect_index;

const MIN_GEMM_COLS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Reflect,
    Zero,
}

/// Square-kernel 2-D convolution with `kernel / 2` padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub padding: Padding,
}

/// Source index along one axis for each (kernel tap, output position).
fn index_map(n_in: usize, n_out: usize, k: usize, stride: usize, padding: Padding) -> Vec<Option<usize>> {
    let pad = (k / 2) as isize;
    let mut map = Vec::with_capacity(k * n_out);
    for t in 0..k as isize {
        for o in 0..n_out as isize {
            let i = o * stride as isize + t - pad;
            map.push(if (0..n_in as isize).contains(&i) {
                Some(i as usize)
            } else {
                match padding {
                    Padding::Zero => None,
                    Padding::Reflect => Some(reflect_index(i, n_in)),
                }
            });
        }
    }
    map
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    /// Per column tap: the output range `lo..hi` that reads the contiguous
    /// source run starting at `start` (stride 1 only; empty otherwise).
    spans: Vec<(usize, usize, usize)>,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Splits one output row into the padded edges (handled through the index
    /// map) and the contiguous interior.
    #[inline]
    fn row_parts(&self, kx: usize) -> (usize, usize, usize) {
        self.spans.get(kx).copied().unwrap_or((0, 0, 0))
    }

    /// `cols[(c, ky, kx), off + (oy, ox)] = x[c, map(oy, ky), map(ox, kx)]`
    /// with row stride `ld`, so a batch can share one column matrix.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T], ld: usize, off: usize) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        let p = oh * ow;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ld + off;
                    let dst = &mut cols[row..row + p];
                    let cmap = &self.cols[kx * ow..(kx + 1) * ow];
                    let (lo, hi, start) = self.row_parts(kx);
                    for oy in 0..oh {
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        match self.rows[ky * oh + oy] {
                            None => d.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                d[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                                for ox in (0..lo).chain(hi..ow) {
                                    d[ox] = cmap[ox].map_or(T::zero(), |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T], ld: usize, off: usize) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        let p = oh * ow;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ld + off;
                    let src = &cols[row..row + p];
                    let cmap = &self.cols[kx * ow..(kx + 1) * ow];
                    let (lo, hi, start) = self.row_parts(kx);
                    for oy in 0..oh {
                        if let Some(iy) = self.rows[ky * oh + oy] {
                            let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                            let s = &src[oy * ow..(oy + 1) * ow];
                            for (v, &g) in dst[start..start + hi - lo].iter_mut().zip(&s[lo..hi]) {
                                *v += g;
                            }
                            for ox in (0..lo).chain(hi..ow) {
                                if let Some(ix) = cmap[ox] {
                                    dst[ix] += s[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        assert!(stride >= 1);
        Self {
            weight: Array4::zeros((c_out, c_in, kernel, kernel)),
            bias: Array1::zeros(c_out),
            stride,
            padding,
        }
    }

    /// He (fan-in) normal weights, zero bias.
    pub fn he_normal<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(c_in, c_out, kernel, stride, padding);
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        conv.weight.iter_mut().for_each(|w| {
            let z: f64 = StandardNormal.sample(rng);
            *w = T::lit(z * std);
        });
        conv
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel() / 2;
        (
            (h + 2 * pad - self.kernel()) / self.stride + 1,
            (w + 2 * pad - self.kernel()) / self.stride + 1,
        )
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.out_dims(h, w);
        let k = self.kernel();
        Geometry {
            c: self.c_in(),
            h,
            w,
            k,
            oh,
            ow,
            rows: index_map(h, oh, k, self.stride, self.padding),
            cols: index_map(w, ow, k, self.stride, self.padding),
            spans: if self.stride == 1 {
                let pad = k / 2;
                (0..k)
                    .map(|kx| {
                        // source ox + kx - pad must lie in 0..w
                        let lo = pad.saturating_sub(kx).min(ow);
                        let hi = (w + pad).saturating_sub(kx).min(ow);
                        if hi > lo {
                            (lo, hi, lo + kx - pad)
                        } else {
                            (0, 0, 0)
                        }
                    })
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    /// Samples per GEMM: enough columns for an efficient product while the
    /// column buffer stays small.
    fn chunk(n: usize, p: usize) -> usize {
        MIN_GEMM_COLS.div_ceil(p).clamp(1, n.max(1))
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c_in(), "conv input channels");
        let g = self.geometry(h, w);
        let (kk, p, co) = (g.patch_len(), g.out_len(), self.c_out());
        let chw = c * h * w;
        let nb = Self::chunk(n, p);
        let x = x.as_slice().expect("standard layout input");
        let wts = self.weight.as_slice().unwrap();
        let mut cols = vec![T::zero(); kk * nb * p];
        let mut y = vec![T::zero(); if nb > 1 { co * nb * p } else { 0 }];
        let mut out = Array4::zeros((n, co, g.oh, g.ow));
        let out_s = out.as_slice_mut().unwrap();
        for b0 in (0..n).step_by(nb) {
            let m = nb.min(n - b0);
            let ld = m * p;
            for i in 0..m {
                let b = b0 + i;
                g.im2col(&x[b * chw..(b + 1) * chw], &mut cols[..kk * ld], ld, i * p);
            }
            let dst = &mut out_s[b0 * co * p..(b0 + m) * co * p];
            if m == 1 {
                matmul(co, kk, p, wts, Trans::No, &cols[..kk * p], Trans::No, T::zero(), dst);
            } else {
                // [co, m * p] regrouped to [m, co, p]
                matmul(co, kk, ld, wts, Trans::No, &cols[..kk * ld], Trans::No, T::zero(), &mut y[..co * ld]);
                for o in 0..co {
                    for i in 0..m {
                        dst[(i * co + o) * p..(i * co + o + 1) * p]
                            .copy_from_slice(&y[(o * m + i) * p..(o * m + i + 1) * p]);
                    }
                }
            }
            for (k, plane) in dst.chunks_exact_mut(p).enumerate() {
                let bias = self.bias[k % co];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        grad: &mut Conv2d<T>,
        want_dx: bool,
    ) -> Option<Array4<T>> {
        self.backward_impl(x, dy, Some(grad), want_dx)
    }

    /// Input gradient only.
    pub fn backward_input(&self, x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
        self.backward_impl(x, dy, None, true).unwrap()
    }

    fn backward_impl(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        mut grad: Option<&mut Conv2d<T>>,
        want_dx: bool,
    ) -> Option<Array4<T>> {
        let (n, c, h, w) = x.dim();
        let g = self.geometry(h, w);
        let (kk, p, co) = (g.patch_len(), g.out_len(), self.c_out());
        assert_eq!(dy.dim(), (n, co, g.oh, g.ow), "conv output gradient shape");
        let xs = x.as_slice().expect("standard layout input");
        let dys = dy.as_slice().expect("standard layout gradient");
        let wts = self.weight.as_slice().unwrap();
        let chw = c * h * w;
        let nb = Self::chunk(n, p);
        let mut cols = vec![T::zero(); kk * nb * p];
        let mut dyt = vec![T::zero(); if nb > 1 { co * nb * p } else { 0 }];
        let mut dx = want_dx.then(|| Array4::zeros((n, c, h, w)));
        for b0 in (0..n).step_by(nb) {
            let m = nb.min(n - b0);
            let ld = m * p;
            let dy_chunk = &dys[b0 * co * p..(b0 + m) * co * p];
            // dy as [co, m * p]
            let dy_cm: &[T] = if m == 1 {
                dy_chunk
            } else {
                for o in 0..co {
                    for i in 0..m {
                        dyt[(o * m + i) * p..(o * m + i + 1) * p]
                            .copy_from_slice(&dy_chunk[(i * co + o) * p..(i * co + o + 1) * p]);
                    }
                }
                &dyt[..co * ld]
            };
            if let Some(grad) = grad.as_deref_mut() {
                for i in 0..m {
                    let b = b0 + i;
                    g.im2col(&xs[b * chw..(b + 1) * chw], &mut cols[..kk * ld], ld, i * p);
                }
                let gw = grad.weight.as_slice_mut().unwrap();
                matmul(co, ld, kk, dy_cm, Trans::No, &cols[..kk * ld], Trans::Yes, T::one(), gw);
                for (gb, row) in grad.bias.iter_mut().zip(dy_cm.chunks_exact(ld)) {
                    *gb += row.iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                matmul(kk, co, ld, wts, Trans::Yes, dy_cm, Trans::No, T::zero(), &mut cols[..kk * ld]);
                let dxs = dx.as_slice_mut().unwrap();
                for i in 0..m {
                    let b = b0 + i;
                    g.col2im(&cols[..kk * ld], &mut dxs[b * chw..(b + 1) * chw], ld, i * p);
                }
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef {
            name: format!("{prefix}.weight"),
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().unwrap(),
            trainable: true,
        });
        out.push(TensorRef {
            name: format!("{prefix}.bias"),
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().unwrap(),
            trainable: true,
        });
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        let wshape = self.weight.shape().to_vec();
        let bshape = self.bias.shape().to_vec();
        out.push(TensorMut {
            name: format!("{prefix}.weight"),
            shape: wshape,
            data: self.weight.as_slice_mut().unwrap(),
            trainable: true,
        });
        out.push(TensorMut {
            name: format!("{prefix}.bias"),
            shape: bshape,
            data: self.bias.as_slice_mut().unwrap(),
            trainable: true,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn conv_reference(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = conv.out_dims(h, w);
        let k = conv.kernel() as isize;
        let pad = k / 2;
        let fetch = |b: usize, ci: usize, y: isize, xx: isize| -> f64 {
            let inside = |i: isize, len: usize| (0..len as isize).contains(&i);
            match conv.padding {
                Padding::Zero if !(inside(y, h) && inside(xx, w)) => 0.0,
                _ => x[[b, ci, reflect_index(y, h), reflect_index(xx, w)]],
            }
        };
        Array4::from_shape_fn((n, conv.c_out(), oh, ow), |(b, o, oy, ox)| {
            let mut acc = conv.bias[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * conv.stride) as isize + ky - pad;
                        let xx = (ox * conv.stride) as isize + kx - pad;
                        acc += conv.weight[[o, ci, ky as usize, kx as usize]] * fetch(b, ci, y, xx);
                    }
                }
            }
            acc
        })
    }

    fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (padding, stride, h, w) in [
            (Padding::Reflect, 1, 5, 7),
            (Padding::Zero, 2, 8, 6),
            (Padding::Zero, 1, 4, 4),
            (Padding::Reflect, 2, 6, 6),
            // one sample per product
            (Padding::Reflect, 1, 24, 24),
        ] {
            let mut conv = Conv2d::<f64>::he_normal(3, 4, 3, stride, padding, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
            let x = random((2, 3, h, w), &mut rng);
            let got = conv.forward(&x);
            let want = conv_reference(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    /// Checks the backward pass against the adjoint identity
    /// `<conv(x + e), dy>` differences, which are exact for a linear map.
    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // batch 20 with 6x6 outputs splits into a full and a partial chunk
        for (padding, stride, n, side) in [
            (Padding::Reflect, 1, 2, 6),
            (Padding::Zero, 2, 2, 6),
            (Padding::Reflect, 1, 2, 24),
            (Padding::Zero, 1, 20, 6),
        ] {
            let conv = Conv2d::<f64>::he_normal(2, 3, 3, stride, padding, &mut rng);
            let x = random((n, 2, side, side), &mut rng);
            let y = conv.forward(&x);
            let dy = random(y.dim(), &mut rng);
            let mut grad = conv.zeros_like();
            let dx = conv.backward(&x, &dy, &mut grad, true).unwrap();

            let dot = |a: &Array4<f64>, b: &Array4<f64>| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let bias_free = Conv2d {
                bias: Array1::zeros(3),
                ..conv.clone()
            };
            // <A x, dy> == <x, A^T dy>
            let lhs = dot(&bias_free.forward(&x), &dy);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-10 * (1.0 + lhs.abs()));
            // weight gradient: <A_w x, dy> is linear in w
            let mut wconv = bias_free.clone();
            wconv.weight.assign(&grad.weight);
            let gw_sq: f64 = grad.weight.iter().map(|v| v * v).sum();
            assert!((dot(&wconv.forward(&x), &dy) - gw_sq).abs() < 1e-10 * (1.0 + gw_sq));
            let db: f64 = dy.iter().sum();
            assert!((grad.bias.sum() - db).abs() < 1e-10 * (1.0 + db.abs()));
        }
    }

    #[test]
    fn strided_output_dims() {
        let conv = Conv2d::<f32>::zeros(1, 1, 3, 2, Padding::Zero);
        assert_eq!(conv.out_dims(24, 24), (12, 12));
        assert_eq!(conv.out_dims(30, 30), (15, 15));
        let conv = Conv2d::<f32>::zeros(1, 1, 3, 1, Padding::Reflect);
        assert_eq!(conv.out_dims(7, 9), (7, 9));
    }
}
