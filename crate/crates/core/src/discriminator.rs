//! Convolutional real/fake classifier over SR or ground-truth band patches.
//!
//! Each block is conv -> LeakyReLU -> batch norm; a dense layer on the
//! flattened features gives one logit per patch, squashed by a sigmoid.

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, BatchNorm2d, BnCache, Conv2d, Dense, Padding, Parameters,
    Real, TensorMut, TensorRef,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
    pub input_bands: usize,
    pub patch_size: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl DiscriminatorConfig {
    pub fn new(input_bands: usize, patch_size: usize) -> Self {
        Self {
            filters: vec![64, 128, 128],
            kernel: 3,
            strides: vec![2, 2, 1],
            leaky_slope: 0.2,
            input_bands,
            patch_size,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.filters.is_empty() || self.filters.len() != self.strides.len() {
            return bad(format!(
                "discriminator needs one stride per block: {} filters, {} strides",
                self.filters.len(),
                self.strides.len()
            ));
        }
        if self.filters.contains(&0) || self.strides.contains(&0) {
            return bad("filters and strides must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("discriminator kernel must be odd, got {}", self.kernel));
        }
        if self.input_bands == 0 {
            return bad("discriminator needs at least one input band".into());
        }
        if self.patch_size == 0 || self.patch_size % self.reduction() != 0 {
            return Err(Error::ShapeMismatch(format!(
                "patch size {} not divisible by stride product {}",
                self.patch_size,
                self.reduction()
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        let side = self.patch_size / self.reduction();
        self.filters.last().copied().unwrap_or(0) * side * side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub config: DiscriminatorConfig,
    pub blocks: Vec<DiscBlock<T>>,
    pub dense: Dense<T>,
}

/// Batch-norm statistics source for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

struct BlockCache<T> {
    input: Array4<T>,
    pre_act: Array4<T>,
    bn: Option<BnCache<T>>,
}

/// Activations kept for the backward pass.
pub struct DiscriminatorCache<T> {
    blocks: Vec<BlockCache<T>>,
    features: Array4<T>,
    probs: Array1<T>,
}

impl<T> DiscriminatorCache<T> {
    pub fn probs(&self) -> &Array1<T> {
        &self.probs
    }

    /// Sign of every LeakyReLU pre-activation.
    pub fn activation_pattern(&self) -> Vec<bool>
    where
        T: Real,
    {
        self.blocks
            .iter()
            .flat_map(|b| b.pre_act.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

pub fn d_init<T: Real>(config: &DiscriminatorConfig, seed: u64) -> Result<DiscriminatorParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = config.input_bands;
    let blocks = config
        .filters
        .iter()
        .zip(&config.strides)
        .map(|(&f, &s)| {
            let conv = Conv2d::he_normal(c_in, f, config.kernel, s, Padding::Zero, &mut rng);
            c_in = f;
            DiscBlock {
                conv,
                bn: BatchNorm2d::new(f, config.bn_eps, config.bn_momentum),
            }
        })
        .collect();
    Ok(DiscriminatorParams {
        config: config.clone(),
        blocks,
        dense: Dense::zeros(config.feature_len()),
    })
}

/// Logistic function kept inside the open unit interval, which a plain
/// evaluation leaves once `|z|` passes ~37 (f64) or ~17 (f32).
fn sigmoid<T: Real>(z: T) -> T {
    let p = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    p.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

impl<T: Real> DiscriminatorParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DiscBlock {
                    conv: b.conv.zeros_like(),
                    bn: b.bn.zeros_like(),
                })
                .collect(),
            dense: self.dense.zeros_like(),
        }
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let p = self.config.patch_size;
        if c != self.config.input_bands || h != p || w != p {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects [_, {}, {p}, {p}] patches, got {:?}",
                self.config.input_bands,
                x.dim()
            )));
        }
        Ok(())
    }

    /// Pure forward pass; batch statistics (if used) are returned in the cache.
    pub fn forward_cached(&self, x: &Array4<T>, mode: BnMode) -> Result<DiscriminatorCache<T>> {
        self.check_input(x)?;
        let slope = T::lit(self.config.leaky_slope);
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let pre_act = block.conv.forward(&h);
            let act = leaky_relu(&pre_act, slope);
            let (out, bn) = match mode {
                BnMode::Batch => {
                    let (y, cache) = block.bn.forward_train(&act);
                    (y, Some(cache))
                }
                BnMode::Running => (block.bn.forward_eval(&act), None),
            };
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, out),
                pre_act,
                bn,
            });
        }
        let probs = self.dense.forward(&h).mapv(sigmoid);
        Ok(DiscriminatorCache {
            blocks,
            features: h,
            probs,
        })
    }

    pub fn update_running_stats(&mut self, cache: &DiscriminatorCache<T>) {
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            if let Some(bn) = &c.bn {
                block.bn.update_running(bn);
            }
        }
    }

    /// Backward from `d_probs = dL/dD(x)`. Accumulates into `grads` and
    /// returns `dL/dx` when asked. Requires a batch-statistics cache.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<T>,
        d_probs: &Array1<T>,
        grads: &mut DiscriminatorParams<T>,
        want_dx: bool,
    ) -> Option<Array4<T>> {
        self.backward_impl(cache, d_probs, Some(grads), want_dx)
    }

    /// `dL/dx` alone, skipping the convolution weight gradients.
    pub fn input_gradient(&self, cache: &DiscriminatorCache<T>, d_probs: &Array1<T>) -> Array4<T> {
        self.backward_impl(cache, d_probs, None, true).unwrap()
    }

    fn backward_impl(
        &self,
        cache: &DiscriminatorCache<T>,
        d_probs: &Array1<T>,
        mut grads: Option<&mut DiscriminatorParams<T>>,
        want_dx: bool,
    ) -> Option<Array4<T>> {
        let slope = T::lit(self.config.leaky_slope);
        let d_logit: Array1<T> = d_probs
            .iter()
            .zip(cache.probs.iter())
            .map(|(&d, &p)| d * p * (T::one() - p))
            .collect();
        let mut dense_scratch;
        let dense_grad = match grads.as_deref_mut() {
            Some(g) => &mut g.dense,
            None => {
                dense_scratch = self.dense.zeros_like();
                &mut dense_scratch
            }
        };
        let mut d = self.dense.backward(&cache.features, &d_logit, dense_grad);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let bn_cache = c
                .bn
                .as_ref()
                .expect("discriminator backward needs batch statistics");
            let mut bn_scratch;
            let bn_grad = match grads.as_deref_mut() {
                Some(g) => &mut g.blocks[i].bn,
                None => {
                    bn_scratch = block.bn.zeros_like();
                    &mut bn_scratch
                }
            };
            d = block.bn.backward(bn_cache, &d, bn_grad);
            leaky_relu_backward(&mut d, &c.pre_act, slope);
            let need = want_dx || i > 0;
            let dx = match grads.as_deref_mut() {
                Some(g) => block.conv.backward(&c.input, &d, &mut g.blocks[i].conv, need),
                None => Some(block.conv.backward_input(&c.input, &d)),
            };
            match dx {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }
}

/// Probabilities for a batch of patches. Train mode normalizes with batch
/// statistics and updates the running estimates.
pub fn d_forward<T: Real>(
    params: &mut DiscriminatorParams<T>,
    patches: &Array4<T>,
    train_mode: bool,
) -> Result<Array1<T>> {
    let mode = if train_mode { BnMode::Batch } else { BnMode::Running };
    let cache = params.forward_cached(patches, mode)?;
    if train_mode {
        params.update_running_stats(&cache);
    }
    Ok(cache.probs)
}

impl<T: Real> Parameters<T> for DiscriminatorParams<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.push_tensors(&format!("blocks.{i}.conv"), &mut out);
            b.bn.push_tensors(&format!("blocks.{i}.bn"), &mut out);
        }
        out.push(TensorRef {
            name: "dense.weight".into(),
            shape: vec![self.dense.weight.len()],
            data: self.dense.weight.as_slice().unwrap(),
            trainable: true,
        });
        out.push(TensorRef {
            name: "dense.bias".into(),
            shape: vec![1],
            data: self.dense.bias.as_slice().unwrap(),
            trainable: true,
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.push_tensors_mut(&format!("blocks.{i}.conv"), &mut out);
            b.bn.push_tensors_mut(&format!("blocks.{i}.bn"), &mut out);
        }
        let n = self.dense.weight.len();
        out.push(TensorMut {
            name: "dense.weight".into(),
            shape: vec![n],
            data: self.dense.weight.as_slice_mut().unwrap(),
            trainable: true,
        });
        out.push(TensorMut {
            name: "dense.bias".into(),
            shape: vec![1],
            data: self.dense.bias.as_slice_mut().unwrap(),
            trainable: true,
        });
        out
    }
}
