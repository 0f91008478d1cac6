use ndarray::{Array1, Array2, Array4, Axis};

use super::{Real, TensorMut, TensorRef};

pub fn relu_inplace<T: Real>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| v.max(T::zero()));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(dy: &mut Array4<T>, out: &Array4<T>) {
    dy.zip_mut_with(out, |d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

pub fn leaky_relu<T: Real>(x: &Array4<T>, slope: T) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { slope * v })
}

/// `pre` is the activation input.
pub fn leaky_relu_backward<T: Real>(dy: &mut Array4<T>, pre: &Array4<T>, slope: T) {
    dy.zip_mut_with(pre, |d, &p| {
        if p <= T::zero() {
            *d *= slope;
        }
    });
}

/// Per-channel batch normalization over (batch, row, col).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch statistics from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Array1<T>,
    pub mean: Array1<T>,
    pub var: Array1<T>,
    pub count: usize,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn per_channel(x: &Array4<T>) -> Array2<T> {
        // [C, N*H*W] view of the activations, materialized
        let (n, c, h, w) = x.dim();
        let mut out = Array2::zeros((c, n * h * w));
        for (b, img) in x.axis_iter(Axis(0)).enumerate() {
            for (ci, plane) in img.axis_iter(Axis(0)).enumerate() {
                let dst = &mut out.row_mut(ci);
                let dst = dst.as_slice_mut().unwrap();
                dst[b * h * w..(b + 1) * h * w]
                    .iter_mut()
                    .zip(plane.iter())
                    .for_each(|(d, s)| *d = *s);
            }
        }
        out
    }

    /// Normalizes with batch statistics (biased variance).
    pub fn forward_train(&self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let flat = Self::per_channel(x);
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for (ci, row) in flat.axis_iter(Axis(0)).enumerate() {
            let m = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / count as f64;
            let v = row
                .iter()
                .map(|x| (x.to_f64().unwrap() - m).powi(2))
                .sum::<f64>()
                / count as f64;
            mean[ci] = T::lit(m);
            var[ci] = T::lit(v);
        }
        let inv_std = var.mapv(|v: T| T::one() / (v + T::lit(self.eps)).sqrt());
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (((_, ci, _, _), _), (xh, yv)) in x.indexed_iter().zip(xhat.iter_mut().zip(y.iter_mut())) {
            *xh = (*xh - mean[ci]) * inv_std[ci];
            *yv = self.gamma[ci] * *xh + self.beta[ci];
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
                count,
            },
        )
    }

    /// Exponential moving update; stores the unbiased batch variance.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let m = T::lit(self.momentum);
        let unbias = if cache.count > 1 {
            T::lit(cache.count as f64 / (cache.count - 1) as f64)
        } else {
            T::one()
        };
        for ci in 0..self.channels() {
            self.running_mean[ci] = (T::one() - m) * self.running_mean[ci] + m * cache.mean[ci];
            self.running_var[ci] =
                (T::one() - m) * self.running_var[ci] + m * cache.var[ci] * unbias;
        }
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mut y = x.clone();
        let eps = T::lit(self.eps);
        for ((_, ci, _, _), v) in y.indexed_iter_mut() {
            let inv = T::one() / (self.running_var[ci] + eps).sqrt();
            *v = self.gamma[ci] * (*v - self.running_mean[ci]) * inv + self.beta[ci];
        }
        y
    }

    /// Train-mode backward; accumulates `gamma`/`beta` gradients.
    pub fn backward(&self, cache: &BnCache<T>, dy: &Array4<T>, grad: &mut BatchNorm2d<T>) -> Array4<T> {
        let c = self.channels();
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (((_, ci, _, _), d), xh) in dy.indexed_iter().zip(cache.xhat.iter()) {
            let d = d.to_f64().unwrap();
            sum_dy[ci] += d;
            sum_dy_xhat[ci] += d * xh.to_f64().unwrap();
        }
        for ci in 0..c {
            grad.beta[ci] += T::lit(sum_dy[ci]);
            grad.gamma[ci] += T::lit(sum_dy_xhat[ci]);
        }
        let n = cache.count as f64;
        let mut dx = dy.clone();
        for (((_, ci, _, _), d), xh) in dx.indexed_iter_mut().zip(cache.xhat.iter()) {
            let scale = self.gamma[ci] * cache.inv_std[ci];
            let centered = *d - T::lit(sum_dy[ci] / n) - *xh * T::lit(sum_dy_xhat[ci] / n);
            *d = scale * centered;
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.channels()),
            beta: Array1::zeros(self.channels()),
            running_mean: Array1::zeros(self.channels()),
            running_var: Array1::zeros(self.channels()),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        let entries: [(&str, &'a Array1<T>, bool); 4] = [
            ("gamma", &self.gamma, true),
            ("beta", &self.beta, true),
            ("running_mean", &self.running_mean, false),
            ("running_var", &self.running_var, false),
        ];
        for (name, a, trainable) in entries {
            out.push(TensorRef {
                name: format!("{prefix}.{name}"),
                shape: vec![a.len()],
                data: a.as_slice().unwrap(),
                trainable,
            });
        }
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        let entries: [(&str, &'a mut Array1<T>, bool); 4] = [
            ("gamma", &mut self.gamma, true),
            ("beta", &mut self.beta, true),
            ("running_mean", &mut self.running_mean, false),
            ("running_var", &mut self.running_var, false),
        ];
        for (name, a, trainable) in entries {
            let len = a.len();
            out.push(TensorMut {
                name: format!("{prefix}.{name}"),
                shape: vec![len],
                data: a.as_slice_mut().unwrap(),
                trainable,
            });
        }
    }
}

/// Fully connected layer to a single logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize) -> Self {
        Self {
            weight: Array1::zeros(inputs),
            bias: Array1::zeros(1),
        }
    }

    /// Logits for each sample of `x`, flattened in C order.
    pub fn forward(&self, x: &Array4<T>) -> Array1<T> {
        let n = x.shape()[0];
        let flat = x.as_slice().expect("standard layout");
        let f = self.weight.len();
        assert_eq!(flat.len(), n * f, "dense input size");
        let w = self.weight.as_slice().unwrap();
        Array1::from_shape_fn(n, |b| {
            flat[b * f..(b + 1) * f]
                .iter()
                .zip(w)
                .map(|(a, b)| *a * *b)
                .sum::<T>()
                + self.bias[0]
        })
    }

    pub fn backward(&self, x: &Array4<T>, dz: &Array1<T>, grad: &mut Dense<T>) -> Array4<T> {
        let f = self.weight.len();
        let flat = x.as_slice().expect("standard layout");
        let mut dx = Array4::zeros(x.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        for (b, &d) in dz.iter().enumerate() {
            grad.bias[0] += d;
            let xs = &flat[b * f..(b + 1) * f];
            for ((g, xv), (dxv, wv)) in grad
                .weight
                .iter_mut()
                .zip(xs)
                .zip(dxs[b * f..(b + 1) * f].iter_mut().zip(self.weight.iter()))
            {
                *g += d * *xv;
                *dxv = d * *wv;
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.len())
    }
}
