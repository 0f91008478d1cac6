//! Guided residual generator.
//!
//! LR groups are bilinearly upsampled to the guidance grid and concatenated
//! with the guidance bands; a head convolution, a stack of BN-free residual
//! blocks and a tail convolution predict a residual that is added to the
//! upsampled target bands (long skip connection).

use ndarray::{s, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::TrainingTriple;
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, relu_backward_inplace, relu_inplace, Conv2d, Padding, Parameters, Real,
    TensorMut, TensorRef,
};
use crate::raster::{check_ratios, BandGroup, ScalingMode, Scene};
use crate::resample::bilinear_plane;

/// DN value mapped to 1.0 at the model boundary.
pub const DEFAULT_NORM_SCALE: f64 = 2000.0;
pub const DEFAULT_TILE: usize = 120;
pub const DEFAULT_OVERLAP: usize = 8;

fn default_norm_scale() -> f64 {
    DEFAULT_NORM_SCALE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_res_blocks: usize,
    pub n_filters: usize,
    pub kernel: usize,
    pub residual_scale: f64,
    pub out_bands: usize,
    pub mode: ScalingMode,
    #[serde(default = "default_norm_scale")]
    pub norm_scale: f64,
}

impl GeneratorConfig {
    pub fn for_mode(mode: ScalingMode) -> Self {
        Self {
            n_res_blocks: 18,
            n_filters: 128,
            kernel: 3,
            residual_scale: 0.1,
            out_bands: mode.out_bands(),
            mode,
            norm_scale: DEFAULT_NORM_SCALE,
        }
    }

    pub fn small(mode: ScalingMode, n_res_blocks: usize, n_filters: usize) -> Self {
        Self {
            n_res_blocks,
            n_filters,
            ..Self::for_mode(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_res_blocks < 1 {
            return bad("generator needs at least one residual block".into());
        }
        if self.n_filters < 1 {
            return bad("generator needs at least one filter".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("generator kernel must be odd, got {}", self.kernel));
        }
        if self.out_bands != self.mode.out_bands() {
            return bad(format!(
                "{} produces {} bands, config says {}",
                self.mode,
                self.mode.out_bands(),
                self.out_bands
            ));
        }
        if !self.residual_scale.is_finite() || !(self.norm_scale > 0.0) {
            return bad("residual_scale must be finite and norm_scale positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    pub config: GeneratorConfig,
    pub head: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub tail: Conv2d<T>,
}

/// Normalized network inputs, NCHW.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorInput<'a, T> {
    /// 20 m-lineage bands at half the guidance grid.
    pub lr20: &'a Array4<T>,
    /// 60 m-lineage bands at a sixth of the guidance grid (x6 only).
    pub lr60: Option<&'a Array4<T>>,
    pub hr: &'a Array4<T>,
}

/// Activations kept for the backward pass.
pub struct GeneratorCache<T> {
    x0: Array4<T>,
    /// `acts[0]` is the head output, `acts[i + 1]` the output of block `i`.
    acts: Vec<Array4<T>>,
    mids: Vec<Array4<T>>,
}

impl<T: Real> GeneratorCache<T> {
    /// On/off state of every ReLU. The network is affine in its parameters
    /// wherever this pattern is constant.
    pub fn activation_pattern(&self) -> Vec<bool> {
        std::iter::once(&self.acts[0])
            .chain(&self.mids)
            .flat_map(|a| a.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// Bilinear upsampling of every plane of an NCHW tensor.
pub fn upsample_tensor<T: Real>(x: &Array4<T>, factor: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h * factor, w * factor));
    for b in 0..n {
        for ch in 0..c {
            out.slice_mut(s![b, ch, .., ..])
                .assign(&bilinear_plane(x.slice(s![b, ch, .., ..]), factor));
        }
    }
    out
}

/// Deterministic init: He-normal trunk, zero tail (so the fresh network is
/// exactly the bilinear skip path).
pub fn init_params<T: Real>(config: &GeneratorConfig, seed: u64) -> Result<GeneratorParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, f) = (config.kernel, config.n_filters);
    let head = Conv2d::he_normal(config.mode.input_channels(), f, k, 1, Padding::Reflect, &mut rng);
    let blocks = (0..config.n_res_blocks)
        .map(|_| ResBlock {
            conv1: Conv2d::he_normal(f, f, k, 1, Padding::Reflect, &mut rng),
            conv2: Conv2d::he_normal(f, f, k, 1, Padding::Reflect, &mut rng),
        })
        .collect();
    let tail = Conv2d::zeros(f, config.out_bands, k, 1, Padding::Reflect);
    Ok(GeneratorParams {
        config: config.clone(),
        head,
        blocks,
        tail,
    })
}

impl<T: Real> GeneratorParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            head: self.head.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                })
                .collect(),
            tail: self.tail.zeros_like(),
        }
    }

    fn check_input(&self, input: &GeneratorInput<'_, T>) -> Result<()> {
        let mode = self.config.mode;
        let (n, c, h, w) = input.hr.dim();
        let mismatch = |m: String| Err(Error::ShapeMismatch(m));
        if c != crate::raster::HR_BANDS.len() {
            return mismatch(format!("guidance has {c} bands, expected 4"));
        }
        if input.lr20.dim() != (n, 6, h / 2, w / 2) || h % 2 != 0 || w % 2 != 0 {
            return mismatch(format!(
                "lr20 input {:?} does not match guidance {:?} / 2",
                input.lr20.dim(),
                input.hr.dim()
            ));
        }
        match (mode, input.lr60) {
            (ScalingMode::X2, None) => Ok(()),
            (ScalingMode::X2, Some(_)) => mismatch("x2 generator takes no 60 m input".into()),
            (ScalingMode::X6, None) => mismatch("x6 generator needs the 60 m input".into()),
            (ScalingMode::X6, Some(lr60)) => {
                if lr60.dim() != (n, 3, h / 6, w / 6) || h % 6 != 0 || w % 6 != 0 {
                    mismatch(format!(
                        "lr60 input {:?} does not match guidance {:?} / 6",
                        lr60.dim(),
                        input.hr.dim()
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Concatenated trunk input and the skip tensor.
    fn prepare(&self, input: &GeneratorInput<'_, T>) -> Result<(Array4<T>, Array4<T>)> {
        self.check_input(input)?;
        let up20 = upsample_tensor(input.lr20, 2);
        Ok(match input.lr60 {
            None => (concat_channels(&[&up20, input.hr]), up20),
            Some(lr60) => {
                let up60 = upsample_tensor(lr60, 6);
                (concat_channels(&[&up20, &up60, input.hr]), up60)
            }
        })
    }

    pub fn forward(&self, input: &GeneratorInput<'_, T>) -> Result<Array4<T>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(
        &self,
        input: &GeneratorInput<'_, T>,
    ) -> Result<(Array4<T>, GeneratorCache<T>)> {
        let (x0, skip) = self.prepare(input)?;
        let scale = T::lit(self.config.residual_scale);
        let mut head = self.head.forward(&x0);
        relu_inplace(&mut head);
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        let mut mids = Vec::with_capacity(self.blocks.len());
        acts.push(head);
        for block in &self.blocks {
            let u = acts.last().unwrap();
            let mut mid = block.conv1.forward(u);
            relu_inplace(&mut mid);
            let mut out = block.conv2.forward(&mid);
            out.zip_mut_with(u, |o, &x| *o = x + scale * *o);
            mids.push(mid);
            acts.push(out);
        }
        let mut sr = self.tail.forward(acts.last().unwrap());
        sr.zip_mut_with(&skip, |o, &s| *o += s);
        Ok((sr, GeneratorCache { x0, acts, mids }))
    }

    /// Parameter gradients of a loss given `d_sr = dL/d(output)`.
    pub fn backward(&self, cache: &GeneratorCache<T>, d_sr: &Array4<T>) -> GeneratorParams<T> {
        let mut grads = self.zeros_like();
        let scale = T::lit(self.config.residual_scale);
        let mut d = self
            .tail
            .backward(cache.acts.last().unwrap(), d_sr, &mut grads.tail, true)
            .unwrap();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let u = &cache.acts[i];
            let mid = &cache.mids[i];
            let d_branch = d.mapv(|v| v * scale);
            let mut d_mid = block
                .conv2
                .backward(mid, &d_branch, &mut grads.blocks[i].conv2, true)
                .unwrap();
            relu_backward_inplace(&mut d_mid, mid);
            let du = block
                .conv1
                .backward(u, &d_mid, &mut grads.blocks[i].conv1, true)
                .unwrap();
            d += &du;
        }
        relu_backward_inplace(&mut d, &cache.acts[0]);
        self.head.backward(&cache.x0, &d, &mut grads.head, false);
        grads
    }
}

impl<T: Real> Parameters<T> for GeneratorParams<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.head.push_tensors("head", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv1.push_tensors(&format!("blocks.{i}.conv1"), &mut out);
            b.conv2.push_tensors(&format!("blocks.{i}.conv2"), &mut out);
        }
        self.tail.push_tensors("tail", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        self.head.push_tensors_mut("head", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.push_tensors_mut(&format!("blocks.{i}.conv1"), &mut out);
            b.conv2.push_tensors_mut(&format!("blocks.{i}.conv2"), &mut out);
        }
        self.tail.push_tensors_mut("tail", &mut out);
        out
    }
}

/// Tiled-inference geometry on the guidance grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileOptions {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Span {
    window: usize,
    core_start: usize,
    core_end: usize,
}

/// Windows of length `tile` whose cores partition `[0, n)`; cores stay at
/// least `margin` away from window edges that are not image edges. `tile`,
/// `margin` and `n` are multiples of `align`.
fn tile_spans(n: usize, tile: usize, margin: usize) -> Vec<Span> {
    if n <= tile {
        return vec![Span {
            window: 0,
            core_start: 0,
            core_end: n,
        }];
    }
    let step = tile - 2 * margin;
    let mut spans = Vec::new();
    let mut core = 0;
    while core < n {
        let end = (core + step).min(n);
        let window = core.saturating_sub(margin).min(n - tile);
        spans.push(Span {
            window,
            core_start: core,
            core_end: end,
        });
        core = end;
    }
    spans
}

fn to_tensor<T: Real>(group: &BandGroup, scale: f64) -> Array4<T> {
    let (b, h, w) = group.pixels.dim();
    let mut out = Array4::zeros((1, b, h, w));
    out.iter_mut()
        .zip(group.pixels.iter())
        .for_each(|(o, &v)| *o = T::lit(v as f64 / scale));
    out
}

fn window<T: Real>(x: &Array4<T>, y0: usize, x0: usize, len_y: usize, len_x: usize) -> Array4<T> {
    x.slice(s![.., .., y0..y0 + len_y, x0..x0 + len_x]).to_owned()
}

/// Super-resolves the target group of a set of co-registered groups.
///
/// `hr` fixes the output grid; `lr20` must be exactly half of it and `lr60`
/// (x6) exactly a sixth.
pub fn super_resolve_groups<T: Real>(
    params: &GeneratorParams<T>,
    hr: &BandGroup,
    lr20: &BandGroup,
    lr60: Option<&BandGroup>,
    tiles: TileOptions,
) -> Result<BandGroup> {
    if !params.all_finite() {
        return Err(Error::UntrainedParams(
            "generator parameters are not finite".into(),
        ));
    }
    let mode = params.config.mode;
    let lr60 = match mode {
        ScalingMode::X2 => None,
        ScalingMode::X6 => Some(lr60.ok_or_else(|| {
            Error::ShapeMismatch("x6 super-resolution needs the 60 m group".into())
        })?),
    };
    check_ratios(hr, lr20, lr60)?;
    let align = mode.factor();
    let (h, w) = hr.dims();
    if h % align != 0 || w % align != 0 {
        return Err(Error::ShapeNotDivisible {
            dim: if h % align != 0 { h } else { w },
            factor: align,
        });
    }
    let margin = tiles.overlap.div_ceil(align) * align;
    let tile = tiles.tile / align * align;
    if tile <= 2 * margin {
        return Err(Error::InvalidConfig(format!(
            "tile {} too small for overlap {} at factor {align}",
            tiles.tile, tiles.overlap
        )));
    }

    let norm = params.config.norm_scale;
    let hr_t = to_tensor::<T>(hr, norm);
    let lr20_t = to_tensor::<T>(lr20, norm);
    let lr60_t = lr60.map(|g| to_tensor::<T>(g, norm));
    let bands = mode.out_bands();
    let mut out = Array3::<f32>::zeros((bands, h, w));

    for ys in tile_spans(h, tile, margin) {
        for xs in tile_spans(w, tile, margin) {
            let (th, tw) = (tile.min(h), tile.min(w));
            let hr_w = window(&hr_t, ys.window, xs.window, th, tw);
            let lr20_w = window(&lr20_t, ys.window / 2, xs.window / 2, th / 2, tw / 2);
            let lr60_w = lr60_t
                .as_ref()
                .map(|t| window(t, ys.window / 6, xs.window / 6, th / 6, tw / 6));
            let sr = params.forward(&GeneratorInput {
                lr20: &lr20_w,
                lr60: lr60_w.as_ref(),
                hr: &hr_w,
            })?;
            for b in 0..bands {
                for y in ys.core_start..ys.core_end {
                    for x in xs.core_start..xs.core_end {
                        let v = sr[[0, b, y - ys.window, x - xs.window]].to_f64().unwrap();
                        out[[b, y, x]] = (v * norm) as f32;
                    }
                }
            }
        }
    }
    BandGroup::new(
        mode.target_bands().iter().map(|b| b.to_string()).collect(),
        out,
        hr.gsd_m,
        hr.geo.clone(),
    )
}

/// Full-scene super-resolution to the 10 m grid.
pub fn super_resolve<T: Real>(
    params: &GeneratorParams<T>,
    scene: &Scene,
    mode: ScalingMode,
    tile: usize,
) -> Result<BandGroup> {
    if mode != params.config.mode {
        return Err(Error::InvalidConfig(format!(
            "generator was built for {}, asked for {mode}",
            params.config.mode
        )));
    }
    if !scene.supports(mode) {
        return Err(Error::MissingLr60 {
            scene_id: scene.scene_id.clone(),
        });
    }
    super_resolve_groups(
        params,
        &scene.hr,
        &scene.lr20,
        scene.lr60.as_ref(),
        TileOptions {
            tile,
            ..Default::default()
        },
    )
}

/// Super-resolves the degraded inputs of a triple onto its gt grid.
pub fn super_resolve_triple<T: Real>(
    params: &GeneratorParams<T>,
    triple: &TrainingTriple,
    tiles: TileOptions,
) -> Result<BandGroup> {
    if triple.mode != params.config.mode {
        return Err(Error::InvalidConfig(format!(
            "generator was built for {}, triple is {}",
            params.config.mode, triple.mode
        )));
    }
    let mut sr = super_resolve_groups(
        params,
        &triple.hr_in,
        &triple.lr_in,
        triple.lr60_in.as_ref(),
        tiles,
    )?;
    sr.gsd_m = triple.gt.gsd_m;
    sr.geo = triple.gt.geo.clone();
    Ok(sr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn x2_output_shape() {
        let cfg = GeneratorConfig::small(ScalingMode::X2, 2, 8);
        let g = init_params::<f64>(&cfg, 0).unwrap();
        let lr = random4((1, 6, 16, 16), 1);
        let hr = random4((1, 4, 32, 32), 2);
        let out = g
            .forward(&GeneratorInput { lr20: &lr, lr60: None, hr: &hr })
            .unwrap();
        assert_eq!(out.dim(), (1, 6, 32, 32));
    }

    #[test]
    fn x6_output_shape() {
        let cfg = GeneratorConfig::small(ScalingMode::X6, 2, 8);
        let g = init_params::<f64>(&cfg, 0).unwrap();
        let lr20 = random4((1, 6, 6, 6), 1);
        let lr60 = random4((1, 3, 2, 2), 3);
        let hr = random4((1, 4, 12, 12), 2);
        let out = g
            .forward(&GeneratorInput { lr20: &lr20, lr60: Some(&lr60), hr: &hr })
            .unwrap();
        assert_eq!(out.dim(), (1, 3, 12, 12));
    }

    #[test]
    fn zero_trunk_is_bilinear_skip() {
        let cfg = GeneratorConfig::small(ScalingMode::X2, 3, 4);
        let g = init_params::<f64>(&cfg, 5).unwrap();
        let lr = random4((2, 6, 5, 7), 1);
        let hr = random4((2, 4, 10, 14), 2);
        let out = g
            .forward(&GeneratorInput { lr20: &lr, lr60: None, hr: &hr })
            .unwrap();
        assert_eq!(out, upsample_tensor(&lr, 2));
    }

    #[test]
    fn shape_errors() {
        let cfg = GeneratorConfig::small(ScalingMode::X2, 1, 2);
        let g = init_params::<f64>(&cfg, 0).unwrap();
        let lr = random4((1, 6, 5, 5), 1);
        let hr = random4((1, 4, 12, 12), 2);
        assert!(matches!(
            g.forward(&GeneratorInput { lr20: &lr, lr60: None, hr: &hr }),
            Err(Error::ShapeMismatch(_))
        ));
        let lr = random4((1, 6, 6, 6), 1);
        assert!(g.forward(&GeneratorInput { lr20: &lr, lr60: Some(&lr), hr: &hr }).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::for_mode(ScalingMode::X2);
        assert!(cfg.validate().is_ok());
        cfg.kernel = 4;
        assert!(init_params::<f32>(&cfg, 0).is_err());
        let mut cfg = GeneratorConfig::for_mode(ScalingMode::X6);
        cfg.out_bands = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::for_mode(ScalingMode::X2);
        cfg.n_res_blocks = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = GeneratorConfig::small(ScalingMode::X2, 2, 8);
        let a = init_params::<f32>(&cfg, 0).unwrap();
        let b = init_params::<f32>(&cfg, 0).unwrap();
        let c = init_params::<f32>(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tile_spans_partition() {
        for (n, tile, margin) in [(72, 24, 8), (120, 48, 12), (100, 40, 8), (30, 40, 8)] {
            let spans = tile_spans(n, tile, margin);
            let mut next = 0;
            for s in &spans {
                assert_eq!(s.core_start, next);
                assert!(s.window <= s.core_start && s.core_end <= s.window + tile.min(n));
                if s.window > 0 {
                    assert!(s.core_start - s.window >= margin);
                }
                if s.window + tile < n {
                    assert!(s.window + tile - s.core_end >= margin);
                }
                next = s.core_end;
            }
            assert_eq!(next, n);
        }
    }
}
