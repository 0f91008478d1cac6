//! Patch extraction and batching over training triples.
//!
//! A batch is a pure function of `(seed, step)`, so training can resume from
//! any step and prefetch workers can run out of order.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::TrainingTriple;
use crate::error::{Error, Result};
use crate::nn::Real;
use crate::raster::ScalingMode;

/// Environment variable selecting the number of prefetch threads.
pub const NUM_WORKERS_ENV: &str = "S2SR_NUM_WORKERS";

pub const MIN_PATCH: usize = 12;

/// Reflectance scaling that maps typical digital numbers to roughly `[0, 5]`.
pub fn normalize(dn: f32, scale: f64) -> f64 {
    dn as f64 / scale
}

pub fn denormalize(x: f64, scale: f64) -> f32 {
    (x * scale) as f32
}

fn check_patch_size(p: usize) -> Result<()> {
    if p < MIN_PATCH || p % 6 != 0 {
        return Err(Error::PatchTooLarge {
            patch: p,
            reason: format!("must be >= {MIN_PATCH} and divisible by 6"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Side length on the gt grid.
    pub patch_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub norm_scale: f64,
    /// Overrides the derived epoch length.
    #[serde(default)]
    pub steps_per_epoch: Option<u64>,
}

impl PatchConfig {
    pub fn default_patch(mode: ScalingMode) -> usize {
        match mode {
            ScalingMode::X2 => 24,
            ScalingMode::X6 => 36,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        check_patch_size(p)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.norm_scale > 0.0) {
            return Err(Error::InvalidConfig("norm scale must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidConfig("steps per epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized NCHW batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T> {
    /// `[B, 6, p/2, p/2]`
    pub lr: Array4<T>,
    /// `[B, 3, p/6, p/6]`, x6 only.
    pub lr60: Option<Array4<T>>,
    /// `[B, 4, p, p]`
    pub hr: Array4<T>,
    /// `[B, out_bands, p, p]`
    pub gt: Array4<T>,
}

impl<T: Real> PatchBatch<T> {
    pub fn len(&self) -> usize {
        self.hr.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> usize {
        self.hr.dim().2
    }

    fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        Self {
            lr: self.lr.mapv(f),
            lr60: self.lr60.as_ref().map(|a| a.mapv(f)),
            hr: self.hr.mapv(f),
            gt: self.gt.mapv(f),
        }
    }
}

/// Divides every member by `scale`.
pub fn normalize_batch<T: Real>(batch: &PatchBatch<T>, scale: f64) -> Result<PatchBatch<T>> {
    check_scale(scale)?;
    let s = T::lit(scale);
    Ok(batch.map(|v| v / s))
}

/// Inverse of [`normalize_batch`].
pub fn denormalize_batch<T: Real>(batch: &PatchBatch<T>, scale: f64) -> Result<PatchBatch<T>> {
    check_scale(scale)?;
    let s = T::lit(scale);
    Ok(batch.map(|v| v * s))
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("scale must be positive, got {scale}")))
    }
}

/// Where a patch came from; `row`/`col` are on the gt grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub triple: usize,
    pub row: usize,
    pub col: usize,
}

/// Extracts one normalized patch set at an aligned gt-grid position.
pub fn extract_patch<T: Real>(
    triple: &TrainingTriple,
    row: usize,
    col: usize,
    patch: usize,
    scale: f64,
) -> Result<PatchBatch<T>> {
    let (h, w) = triple.gt_dims();
    if row + patch > h || col + patch > w {
        return Err(Error::PatchTooLarge {
            patch,
            reason: format!("window at ({row}, {col}) leaves the {h}x{w} gt grid"),
        });
    }
    let f = triple.mode.factor();
    if row % f != 0 || col % f != 0 || patch % 6 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "patch origin ({row}, {col}) size {patch} not aligned to {f}"
        )));
    }
    let crop = |a: &Array3<f32>, d: usize| -> Array4<T> {
        let v = a.slice(s![.., row / d..(row + patch) / d, col / d..(col + patch) / d]);
        to_batch(v, scale)
    };
    Ok(PatchBatch {
        lr: crop(&triple.lr_in.pixels, 2),
        lr60: triple.lr60_in.as_ref().map(|g| crop(&g.pixels, 6)),
        hr: crop(&triple.hr_in.pixels, 1),
        gt: crop(&triple.gt.pixels, 1),
    })
}

fn to_batch<T: Real>(v: ArrayView3<f32>, scale: f64) -> Array4<T> {
    let (c, h, w) = v.dim();
    let mut out = Array4::zeros((1, c, h, w));
    out.iter_mut()
        .zip(v.iter())
        .for_each(|(o, &x)| *o = T::lit(normalize(x, scale)));
    out
}

fn stack<T: Real>(parts: Vec<Array4<T>>) -> Array4<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("patches share a shape")
}

fn stack_batches<T: Real>(parts: Vec<PatchBatch<T>>) -> PatchBatch<T> {
    let has60 = parts[0].lr60.is_some();
    let mut lr = Vec::with_capacity(parts.len());
    let mut lr60 = Vec::new();
    let mut hr = Vec::with_capacity(parts.len());
    let mut gt = Vec::with_capacity(parts.len());
    for p in parts {
        lr.push(p.lr);
        if let Some(l) = p.lr60 {
            lr60.push(l);
        }
        hr.push(p.hr);
        gt.push(p.gt);
    }
    PatchBatch {
        lr: stack(lr),
        lr60: has60.then(|| stack(lr60)),
        hr: stack(hr),
        gt: stack(gt),
    }
}

/// Deterministic patch sampler over a fixed set of triples.
///
/// Each epoch assigns scenes to batch slots so every scene is drawn equally
/// often (within one), then shuffles the slots.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    triples: Arc<Vec<TrainingTriple>>,
    config: PatchConfig,
    steps_per_epoch: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PatchSampler {
    pub fn new(triples: Vec<TrainingTriple>, config: PatchConfig) -> Result<Self> {
        config.validate()?;
        if triples.is_empty() {
            return Err(Error::DataExhausted("no training scenes".into()));
        }
        let mode = triples[0].mode;
        for t in &triples {
            t.validate()?;
            if t.mode != mode {
                return Err(Error::InvalidConfig(format!(
                    "mixed scaling modes: {} and {}",
                    mode, t.mode
                )));
            }
            let (h, w) = t.gt_dims();
            if config.patch_size > h.min(w) {
                return Err(Error::PatchTooLarge {
                    patch: config.patch_size,
                    reason: format!("scene {} has a {h}x{w} gt grid", t.scene_id),
                });
            }
        }
        let p = config.patch_size;
        let tiles: u64 = triples
            .iter()
            .map(|t| ((t.gt.rows() / p) * (t.gt.cols() / p)) as u64)
            .sum();
        let steps_per_epoch = config
            .steps_per_epoch
            .unwrap_or_else(|| tiles.div_ceil(config.batch_size as u64).max(1));
        Ok(Self {
            triples: Arc::new(triples),
            config,
            steps_per_epoch,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn config(&self) -> &PatchConfig {
        &self.config
    }

    pub fn mode(&self) -> ScalingMode {
        self.triples[0].mode
    }

    pub fn triples(&self) -> &[TrainingTriple] {
        &self.triples
    }

    /// Scene index for every slot of an epoch.
    fn epoch_slots(&self, epoch: u64) -> Vec<usize> {
        let n = self.triples.len();
        let total = self.steps_per_epoch as usize * self.config.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch, u64::MAX));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut slots: Vec<usize> = (0..total).map(|i| order[i % n]).collect();
        slots.shuffle(&mut rng);
        slots
    }

    /// Patch origins of the batch at a global step.
    pub fn origins(&self, step: u64) -> Vec<PatchOrigin> {
        let epoch = step / self.steps_per_epoch;
        let within = (step % self.steps_per_epoch) as usize;
        let b = self.config.batch_size;
        let slots = self.epoch_slots(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch, step));
        let p = self.config.patch_size;
        let f = self.mode().factor();
        slots[within * b..(within + 1) * b]
            .iter()
            .map(|&ti| {
                let (h, w) = self.triples[ti].gt_dims();
                PatchOrigin {
                    triple: ti,
                    row: f * rng.gen_range(0..=(h - p) / f),
                    col: f * rng.gen_range(0..=(w - p) / f),
                }
            })
            .collect()
    }

    pub fn batch<T: Real>(&self, step: u64) -> Result<PatchBatch<T>> {
        let parts = self
            .origins(step)
            .into_iter()
            .map(|o| {
                extract_patch(
                    &self.triples[o.triple],
                    o.row,
                    o.col,
                    self.config.patch_size,
                    self.config.norm_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(stack_batches(parts))
    }

    /// Batches for `start..end` in step order, built by `workers` threads.
    pub fn prefetch<T: Real + Send + 'static>(
        &self,
        start: u64,
        end: u64,
        workers: usize,
    ) -> Prefetch<T> {
        Prefetch::new(self.clone(), start, end, workers.max(1))
    }
}

/// `count` DN-scale patches drawn uniformly per scene from a seeded stream.
pub fn sample_patches<T: Real>(
    triples: &[TrainingTriple],
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<PatchBatch<T>> {
    let sampler = PatchSampler::new(
        triples.to_vec(),
        PatchConfig {
            patch_size,
            batch_size: count,
            seed,
            norm_scale: 1.0,
            steps_per_epoch: Some(1),
        },
    )?;
    sampler.batch(0)
}

/// Reads the worker count from the environment, defaulting to 1.
pub fn num_workers_from_env() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Ordered iterator over prefetched batches.
pub struct Prefetch<T> {
    next: u64,
    end: u64,
    pending: BTreeMap<u64, Result<PatchBatch<T>>>,
    rx: Option<mpsc::Receiver<(u64, Result<PatchBatch<T>>)>>,
    handles: Vec<thread::JoinHandle<()>>,
    inline: Option<PatchSampler>,
}

impl<T: Real + Send + 'static> Prefetch<T> {
    fn new(sampler: PatchSampler, start: u64, end: u64, workers: usize) -> Self {
        if workers == 1 {
            return Self {
                next: start,
                end,
                pending: BTreeMap::new(),
                rx: None,
                handles: Vec::new(),
                inline: Some(sampler),
            };
        }
        // bounded so workers stay at most a few batches ahead
        let (tx, rx) = mpsc::sync_channel(2 * workers);
        let handles = (0..workers as u64)
            .map(|k| {
                let tx = tx.clone();
                let sampler = sampler.clone();
                thread::spawn(move || {
                    let mut step = start + k;
                    while step < end {
                        if tx.send((step, sampler.batch::<T>(step))).is_err() {
                            return;
                        }
                        step += workers as u64;
                    }
                })
            })
            .collect();
        Self {
            next: start,
            end,
            pending: BTreeMap::new(),
            rx: Some(rx),
            handles,
            inline: None,
        }
    }
}

impl<T: Real + Send + 'static> Iterator for Prefetch<T> {
    type Item = (u64, Result<PatchBatch<T>>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let step = self.next;
        self.next += 1;
        if let Some(s) = &self.inline {
            return Some((step, s.batch(step)));
        }
        loop {
            if let Some(b) = self.pending.remove(&step) {
                return Some((step, b));
            }
            match self.rx.as_ref()?.recv() {
                Ok((s, b)) => {
                    self.pending.insert(s, b);
                }
                Err(_) => {
                    return Some((
                        step,
                        Err(Error::DataExhausted(format!("prefetch worker stopped before step {step}"))),
                    ))
                }
            }
        }
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        self.rx = None;
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::degrade_scene;
    use crate::raster::{BandGroup, Scene, HR_BANDS, LR20_BANDS, LR60_BANDS};

    fn scene(id: &str, n: usize) -> Scene {
        let plane = |b: usize, s: usize| {
            Array3::from_shape_fn((b, n / s, n / s), |(c, y, x)| (1000 + 100 * c + 7 * y * s + 3 * x * s) as f32)
        };
        Scene::new(
            id,
            BandGroup::with_bands(&HR_BANDS, plane(4, 1), 10.0).unwrap(),
            BandGroup::with_bands(&LR20_BANDS, plane(6, 2), 20.0).unwrap(),
            Some(BandGroup::with_bands(&LR60_BANDS, plane(3, 6), 60.0).unwrap()),
        )
        .unwrap()
    }

    fn sampler(mode: ScalingMode, patch: usize) -> PatchSampler {
        let triples = (0..3)
            .map(|i| degrade_scene(&scene(&format!("s{i}"), 216), mode, 0.5).unwrap())
            .collect();
        PatchSampler::new(
            triples,
            PatchConfig {
                patch_size: patch,
                batch_size: 4,
                seed: 7,
                norm_scale: 2000.0,
                steps_per_epoch: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn batch_shapes_x2() {
        let s = sampler(ScalingMode::X2, 24);
        let b = s.batch::<f32>(0).unwrap();
        assert_eq!(b.lr.dim(), (4, 6, 12, 12));
        assert_eq!(b.hr.dim(), (4, 4, 24, 24));
        assert_eq!(b.gt.dim(), (4, 6, 24, 24));
        assert!(b.lr60.is_none());
    }

    #[test]
    fn batch_shapes_x6() {
        let s = sampler(ScalingMode::X6, 36);
        let b = s.batch::<f64>(3).unwrap();
        assert_eq!(b.lr.dim(), (4, 6, 18, 18));
        assert_eq!(b.lr60.unwrap().dim(), (4, 3, 6, 6));
        assert_eq!(b.hr.dim(), (4, 4, 36, 36));
        assert_eq!(b.gt.dim(), (4, 3, 36, 36));
    }

    #[test]
    fn patch_is_normalized_slice_of_triple() {
        let s = sampler(ScalingMode::X2, 24);
        let o = s.origins(5)[1];
        let b = s.batch::<f64>(5).unwrap();
        let t = &s.triples()[o.triple];
        for y in 0..24 {
            for x in 0..24 {
                let want = t.gt.pixels[[2, o.row + y, o.col + x]] as f64 / 2000.0;
                assert_eq!(b.gt[[1, 2, y, x]], want);
            }
        }
        let want = t.lr_in.pixels[[0, o.row / 2 + 3, o.col / 2 + 4]] as f64 / 2000.0;
        assert_eq!(b.lr[[1, 0, 3, 4]], want);
    }

    #[test]
    fn sampling_is_a_function_of_step() {
        let a = sampler(ScalingMode::X2, 24);
        let b = sampler(ScalingMode::X2, 24);
        for step in [0, 1, 17, 1000] {
            assert_eq!(a.origins(step), b.origins(step));
        }
        assert_ne!(a.origins(0), a.origins(1));
    }

    #[test]
    fn epochs_are_stratified() {
        let s = sampler(ScalingMode::X2, 24);
        // 3 scenes of 108x108 gt -> 4*4 tiles each -> 48 / 4 = 12 steps
        assert_eq!(s.steps_per_epoch(), 12);
        let mut counts = [0usize; 3];
        for step in 0..12 {
            for o in s.origins(step) {
                counts[o.triple] += 1;
            }
        }
        assert_eq!(counts, [16, 16, 16]);
    }

    #[test]
    fn origins_are_aligned() {
        let s = sampler(ScalingMode::X6, 36);
        for step in 0..20 {
            for o in s.origins(step) {
                assert_eq!(o.row % 6, 0);
                assert_eq!(o.col % 6, 0);
                assert!(o.row + 36 <= 36 && o.col + 36 <= 36);
            }
        }
    }

    #[test]
    fn prefetch_matches_direct() {
        let s = sampler(ScalingMode::X2, 24);
        let direct: Vec<_> = (3..11).map(|i| s.batch::<f32>(i).unwrap()).collect();
        for workers in [1, 3] {
            let got: Vec<_> = s
                .prefetch::<f32>(3, 11, workers)
                .map(|(_, b)| b.unwrap())
                .collect();
            assert_eq!(got, direct);
        }
    }

    #[test]
    fn sample_patches_is_seeded_and_dn_scaled() {
        let t: Vec<_> = (0..2)
            .map(|i| degrade_scene(&scene(&format!("s{i}"), 120), ScalingMode::X2, 0.5).unwrap())
            .collect();
        let a = sample_patches::<f64>(&t, 24, 10, 7).unwrap();
        let b = sample_patches::<f64>(&t, 24, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.gt.iter().all(|&v| v >= 1000.0));
        let n = normalize_batch(&a, 2000.0).unwrap();
        let back = denormalize_batch(&n, 2000.0).unwrap();
        for (x, y) in back.hr.iter().zip(a.hr.iter()) {
            assert!((x - y).abs() <= 1e-9 * y.abs());
        }
        assert!(normalize_batch(&a, 0.0).is_err());
    }

    #[test]
    fn constant_triple_gives_constant_patches() {
        let c = |b: usize, n: usize| Array3::from_elem((b, n, n), 500.0f32);
        let s = Scene::new(
            "c",
            BandGroup::with_bands(&HR_BANDS, c(4, 120), 10.0).unwrap(),
            BandGroup::with_bands(&LR20_BANDS, c(6, 60), 20.0).unwrap(),
            None,
        )
        .unwrap();
        let t = vec![degrade_scene(&s, ScalingMode::X2, 0.5).unwrap()];
        let b = sample_patches::<f64>(&t, 12, 5, 1).unwrap();
        for a in [&b.lr, &b.hr, &b.gt] {
            assert!(a.iter().all(|&v| (v - 500.0).abs() < 1e-3));
        }
    }

    #[test]
    fn patch_validation() {
        let t = vec![degrade_scene(&scene("a", 216), ScalingMode::X2, 0.5).unwrap()];
        let cfg = |p| PatchConfig {
            patch_size: p,
            batch_size: 2,
            seed: 0,
            norm_scale: 2000.0,
            steps_per_epoch: None,
        };
        assert!(matches!(
            PatchSampler::new(t.clone(), cfg(114)),
            Err(Error::PatchTooLarge { .. })
        ));
        for p in [6, 25, 32] {
            assert!(matches!(
                PatchSampler::new(t.clone(), cfg(p)),
                Err(Error::PatchTooLarge { .. })
            ));
        }
        assert!(PatchSampler::new(t, cfg(108)).is_ok());
    }
}
