//! Synthetic Sentinel-2-like scenes for tests and demos.
//!
//! Pixels follow a linear mixing model: a fixed library of material spectra
//! is weighted by per-scene abundance maps (softmax of filtered noise plus
//! sharp-edged shapes) and a shared shading field. The 20 m and 60 m groups
//! are then produced with the same Gaussian blur + block-mean operator used
//! for degradation, so every group shares structure with the 10 m guidance.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::{
    BandGroup, Scene, HR_BANDS, HR_GSD_M, LR20_BANDS, LR20_GSD_M, LR60_BANDS, LR60_GSD_M,
};
use crate::resample::{downsample_plane, gaussian_blur_plane, ResampleSpec};

const BAND_ORDER: [&str; 13] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12",
];

/// Top-of-atmosphere-like digital numbers per material, in `BAND_ORDER`.
const SPECTRA: [[f64; 13]; 5] = [
    // vegetation
    [300.0, 400.0, 700.0, 400.0, 1100.0, 2800.0, 3400.0, 3600.0, 3700.0, 1200.0, 20.0, 1800.0, 900.0],
    // bare soil
    [1300.0, 1500.0, 1900.0, 2300.0, 2500.0, 2700.0, 2800.0, 2900.0, 3000.0, 900.0, 40.0, 3600.0, 3000.0],
    // water
    [800.0, 700.0, 600.0, 400.0, 300.0, 250.0, 220.0, 200.0, 180.0, 60.0, 5.0, 100.0, 80.0],
    // built-up
    [1600.0, 1700.0, 1800.0, 1900.0, 2000.0, 2100.0, 2200.0, 2300.0, 2350.0, 700.0, 30.0, 2600.0, 2300.0],
    // dry grass
    [700.0, 800.0, 1100.0, 1300.0, 1700.0, 2200.0, 2500.0, 2600.0, 2700.0, 900.0, 25.0, 3000.0, 2300.0],
];

fn spectrum(material: usize, band: &str) -> f64 {
    let k = BAND_ORDER.iter().position(|b| *b == band).expect("known band");
    SPECTRA[material][k]
}

fn noise_field(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Array2<f64> {
    let white = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
    let mut f: Array2<f64> = gaussian_blur_plane(white.view(), sigma);
    let std = f.std(0.0).max(1e-12);
    f.mapv_inplace(|v| v / std);
    f
}

fn shapes_field(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut f = Array2::zeros((n, n));
    let count = rng.gen_range(3..8);
    for _ in 0..count {
        let level: f64 = rng.gen_range(1.0..3.0);
        let (cy, cx) = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
        let size = rng.gen_range(n as f64 * 0.04..n as f64 * 0.2);
        let disc = rng.gen_bool(0.5);
        for ((y, x), v) in f.indexed_iter_mut() {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = if disc {
                dy * dy + dx * dx <= size * size
            } else {
                dy.abs() <= size && dx.abs() <= size * 0.6
            };
            if inside {
                *v = level;
            }
        }
    }
    f
}

/// Per-material abundance maps summing to one at every pixel.
fn abundances(rng: &mut ChaCha8Rng, n: usize) -> Vec<Array2<f64>> {
    let logits: Vec<Array2<f64>> = (0..SPECTRA.len())
        .map(|_| {
            let mut l = noise_field(rng, n, 1.5) * rng.gen_range(0.3..1.0);
            l.scaled_add(rng.gen_range(0.5..1.5), &noise_field(rng, n, 6.0));
            l += rng.gen_range(-1.0..1.0);
            l + shapes_field(rng, n)
        })
        .collect();
    let mut out: Vec<Array2<f64>> = logits.iter().map(|l| l.mapv(|v| (2.0 * v).exp())).collect();
    let total = out.iter().fold(Array2::zeros((n, n)), |acc, a| acc + a);
    out.iter_mut().for_each(|a| *a /= &total);
    out
}

/// One `size x size` (10 m grid) scene with all three band groups.
pub fn synth_scene(scene_id: &str, size: usize, seed: u64) -> Result<Scene> {
    if size == 0 || size % 6 != 0 {
        return Err(Error::ShapeNotDivisible { dim: size, factor: 6 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let abund = abundances(&mut rng, size);
    let shade = noise_field(&mut rng, size, 10.0).mapv(|v| 1.0 + 0.05 * v);
    let band = |name: &str| -> Array2<f64> {
        let mut out = Array2::zeros((size, size));
        for (k, a) in abund.iter().enumerate() {
            out.scaled_add(spectrum(k, name), a);
        }
        out *= &shade;
        out.mapv_inplace(|v| v.clamp(1.0, 10000.0));
        out
    };
    let hr10: Vec<_> = HR_BANDS.iter().map(|b| band(b)).collect();
    let lr20_10: Vec<_> = LR20_BANDS.iter().map(|b| band(b)).collect();
    let lr60_10: Vec<_> = LR60_BANDS.iter().map(|b| band(b)).collect();

    let stack = |planes: Vec<Array2<f64>>| -> Array3<f32> {
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        ndarray::stack(Axis(0), &views).unwrap().mapv(|v| v as f32)
    };
    let down = |planes: &[Array2<f64>], f: usize| -> Result<Vec<Array2<f64>>> {
        let spec = ResampleSpec::new(f, 0.5)?;
        Ok(planes.iter().map(|p| downsample_plane(p.view(), &spec)).collect())
    };
    Scene::new(
        scene_id,
        BandGroup::with_bands(&HR_BANDS, stack(hr10), HR_GSD_M)?,
        BandGroup::with_bands(&LR20_BANDS, stack(down(&lr20_10, 2)?), LR20_GSD_M)?,
        Some(BandGroup::with_bands(
            &LR60_BANDS,
            stack(down(&lr60_10, 6)?),
            LR60_GSD_M,
        )?),
    )
}

/// `count` scenes named `scene_000`, ... with seeds derived from `seed`.
pub fn synth_scenes(count: usize, size: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            synth_scene(
                &format!("scene_{i:03}"),
                size,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            )
        })
        .collect()
}
