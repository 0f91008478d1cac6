//! Deterministic resampling kernels.
//!
//! Upsampling uses pixel-center alignment: output sample `i` reads input
//! coordinate `(i + 0.5) / factor - 0.5`, clamped to `[0, n - 1]`.
//! Downsampling is a separable Gaussian blur (reflect boundary) followed by
//! a `factor x factor` block mean.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BandGroup;

pub const DEFAULT_BLUR_SIGMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub factor: usize,
    /// Gaussian std-dev in output-pixel units.
    pub blur_sigma: f64,
}

impl ResampleSpec {
    pub fn new(factor: usize, blur_sigma: f64) -> Result<Self> {
        let spec = Self { factor, blur_sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_factor(factor: usize) -> Result<Self> {
        Self::new(factor, DEFAULT_BLUR_SIGMA)
    }

    pub fn validate(&self) -> Result<()> {
        check_factor(self.factor)?;
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "blur_sigma must be > 0, got {}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

fn check_factor(factor: usize) -> Result<()> {
    match factor {
        2 | 6 => Ok(()),
        f => Err(Error::BadFactor(f)),
    }
}

/// Reflect-without-edge-repeat index (`-1 -> 1`, `n -> n - 2`), periodic for
/// offsets larger than the signal.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Source taps for each output sample along one axis.
type Taps = Vec<Vec<(usize, f64)>>;

fn source_coord(i: usize, n_in: usize, factor: usize) -> f64 {
    let c = (i as f64 + 0.5) / factor as f64 - 0.5;
    c.clamp(0.0, (n_in - 1) as f64)
}

fn linear_taps(n_in: usize, factor: usize) -> Taps {
    (0..n_in * factor)
        .map(|i| {
            let c = source_coord(i, n_in, factor);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let t = c - i0 as f64;
            vec![(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

/// Catmull-Rom cubic (a = -0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(n_in: usize, factor: usize) -> Taps {
    (0..n_in * factor)
        .map(|i| {
            let c = source_coord(i, n_in, factor);
            let base = c.floor() as isize;
            (base - 1..=base + 2)
                .map(|j| {
                    let idx = j.clamp(0, n_in as isize - 1) as usize;
                    (idx, cubic_kernel(c - j as f64))
                })
                .collect()
        })
        .collect()
}

fn apply_separable<T: Float>(src: ArrayView2<T>, row_taps: &Taps, col_taps: &Taps) -> Array2<T> {
    let (h, _) = src.dim();
    let cast = |w: f64| T::from(w).unwrap();
    // horizontal pass
    let mut tmp = Array2::<T>::zeros((h, col_taps.len()));
    for r in 0..h {
        let row = src.row(r);
        for (c, taps) in col_taps.iter().enumerate() {
            tmp[[r, c]] = taps
                .iter()
                .fold(T::zero(), |acc, &(j, w)| acc + cast(w) * row[j]);
        }
    }
    let mut out = Array2::<T>::zeros((row_taps.len(), col_taps.len()));
    for (r, taps) in row_taps.iter().enumerate() {
        let mut dst = out.row_mut(r);
        for &(j, w) in taps {
            let w = cast(w);
            dst.zip_mut_with(&tmp.row(j), |d, &s| *d = *d + w * s);
        }
    }
    out
}

/// Bilinear upsampling of one plane. Shared by the generator's skip path.
pub fn bilinear_plane<T: Float>(src: ArrayView2<T>, factor: usize) -> Array2<T> {
    let (h, w) = src.dim();
    apply_separable(src, &linear_taps(h, factor), &linear_taps(w, factor))
}

pub fn bicubic_plane<T: Float>(src: ArrayView2<T>, factor: usize) -> Array2<T> {
    let (h, w) = src.dim();
    apply_separable(src, &cubic_taps(h, factor), &cubic_taps(w, factor))
}

fn map_planes(
    group: &BandGroup,
    gsd_m: f64,
    f: impl Fn(ArrayView2<f64>) -> Array2<f64>,
) -> BandGroup {
    let planes: Vec<Array2<f64>> = group
        .pixels
        .axis_iter(Axis(0))
        .map(|p| f(p.mapv(f64::from).view()))
        .collect();
    let (h, w) = planes.first().map(|p| p.dim()).unwrap_or((0, 0));
    let pixels = Array3::from_shape_fn((planes.len(), h, w), |(b, r, c)| planes[b][[r, c]] as f32);
    BandGroup {
        bands: group.bands.clone(),
        pixels,
        gsd_m,
        geo: group.geo.clone().map(|mut g| {
            let k = gsd_m / group.gsd_m;
            for i in [1, 2, 4, 5] {
                g.transform[i] *= k;
            }
            g
        }),
    }
}

pub fn upsample_bilinear(group: &BandGroup, factor: usize) -> Result<BandGroup> {
    check_factor(factor)?;
    Ok(map_planes(group, group.gsd_m / factor as f64, |p| {
        bilinear_plane(p, factor)
    }))
}

pub fn upsample_bicubic(group: &BandGroup, factor: usize) -> Result<BandGroup> {
    check_factor(factor)?;
    Ok(map_planes(group, group.gsd_m / factor as f64, |p| {
        bicubic_plane(p, factor)
    }))
}

/// Normalized Gaussian taps on `[-r, r]`, `r = ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with reflect boundary; `sigma` in input pixels.
pub fn gaussian_blur_plane(src: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let taps = |n: usize| -> Taps {
        (0..n)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| (reflect_index(i as isize + k as isize - radius, n), w))
                    .collect()
            })
            .collect()
    };
    let (h, w) = src.dim();
    apply_separable(src, &taps(h), &taps(w))
}

pub fn block_mean(src: ArrayView2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let norm = (factor * factor) as f64;
    Array2::from_shape_fn((h / factor, w / factor), |(r, c)| {
        let mut acc = 0.0;
        for dr in 0..factor {
            for dc in 0..factor {
                acc += src[[r * factor + dr, c * factor + dc]];
            }
        }
        acc / norm
    })
}

pub fn downsample_plane(src: ArrayView2<f64>, spec: &ResampleSpec) -> Array2<f64> {
    let blurred = gaussian_blur_plane(src, spec.blur_sigma * spec.factor as f64);
    block_mean(blurred.view(), spec.factor)
}

pub fn downsample(group: &BandGroup, spec: &ResampleSpec) -> Result<BandGroup> {
    spec.validate()?;
    for dim in [group.rows(), group.cols()] {
        if dim % spec.factor != 0 || dim == 0 {
            return Err(Error::ShapeNotDivisible {
                dim,
                factor: spec.factor,
            });
        }
    }
    Ok(map_planes(group, group.gsd_m * spec.factor as f64, |p| {
        downsample_plane(p, spec)
    }))
}
