//! Content (MAE) and adversarial objectives, with their input gradients.
//!
//! All reductions are means, so `lambda_adv` does not depend on batch size.
//! Log arguments are clamped to `[eps, 1]`; the gradient through a clamped
//! value is zero.

use ndarray::{Array, ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub eps: f64,
    /// Use `-mean log D(G)` instead of `mean log(1 - D(G))` for the generator.
    #[serde(default)]
    pub non_saturating: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1e-3,
            eps: 1e-12,
            non_saturating: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_adv must be >= 0, got {}",
                self.lambda_adv
            )));
        }
        if !(self.eps > 0.0 && self.eps < 1e-6) {
            return Err(Error::InvalidConfig(format!(
                "eps must lie in (0, 1e-6), got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_probs<T: Real>(p: &[T]) -> Result<()> {
    for &v in p {
        let v = v.to_f64().unwrap();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::DomainError(v));
        }
    }
    if p.is_empty() {
        return Err(Error::ShapeMismatch("empty probability batch".into()));
    }
    Ok(())
}

fn clamped_log(x: f64, eps: f64) -> f64 {
    x.clamp(eps, 1.0).ln()
}

/// d/dx of `log(clamp(x, eps, 1))`.
fn clamped_log_grad(x: f64, eps: f64) -> f64 {
    if x > eps && x <= 1.0 {
        1.0 / x
    } else {
        0.0
    }
}

/// Mean absolute error.
pub fn content_loss<T: Real, D: Dimension>(sr: ArrayView<T, D>, gt: ArrayView<T, D>) -> Result<f64> {
    check_shapes(sr.shape(), gt.shape())?;
    let n = sr.len().max(1) as f64;
    Ok(sr
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (*a - *b).abs().to_f64().unwrap())
        .sum::<f64>()
        / n)
}

/// `sign(sr - gt) / n`, with `sign(0) = 0`.
pub fn content_loss_grad<T: Real, D: Dimension>(
    sr: ArrayView<T, D>,
    gt: ArrayView<T, D>,
) -> Result<Array<T, D>> {
    check_shapes(sr.shape(), gt.shape())?;
    let inv_n = T::lit(1.0 / sr.len().max(1) as f64);
    let mut g = sr.to_owned();
    g.zip_mut_with(&gt, |s, &t| {
        let d = *s - t;
        *s = if d > T::zero() {
            inv_n
        } else if d < T::zero() {
            -inv_n
        } else {
            T::zero()
        };
    });
    Ok(g)
}

/// Generator adversarial term; the generator minimizes it.
pub fn adversarial_loss_g<T: Real>(d_fake: &[T], weights: &LossWeights) -> Result<f64> {
    check_probs(d_fake)?;
    let n = d_fake.len() as f64;
    let sum: f64 = d_fake
        .iter()
        .map(|p| {
            let p = p.to_f64().unwrap();
            if weights.non_saturating {
                -clamped_log(p, weights.eps)
            } else {
                clamped_log(1.0 - p, weights.eps)
            }
        })
        .sum();
    Ok(sum / n)
}

pub fn adversarial_loss_g_grad<T: Real>(d_fake: &[T], weights: &LossWeights) -> Result<Vec<T>> {
    check_probs(d_fake)?;
    let n = d_fake.len() as f64;
    Ok(d_fake
        .iter()
        .map(|p| {
            let p = p.to_f64().unwrap();
            let g = if weights.non_saturating {
                -clamped_log_grad(p, weights.eps)
            } else {
                -clamped_log_grad(1.0 - p, weights.eps)
            };
            T::lit(g / n)
        })
        .collect())
}

/// Binary cross-entropy of the discriminator: real labelled 1, fake 0.
pub fn discriminator_loss<T: Real>(d_real: &[T], d_fake: &[T], eps: f64) -> Result<f64> {
    check_probs(d_real)?;
    check_probs(d_fake)?;
    let real: f64 = d_real
        .iter()
        .map(|p| clamped_log(p.to_f64().unwrap(), eps))
        .sum::<f64>()
        / d_real.len() as f64;
    let fake: f64 = d_fake
        .iter()
        .map(|p| clamped_log(1.0 - p.to_f64().unwrap(), eps))
        .sum::<f64>()
        / d_fake.len() as f64;
    Ok(-(real + fake))
}

/// Gradients w.r.t. `d_real` and `d_fake`.
pub fn discriminator_loss_grad<T: Real>(
    d_real: &[T],
    d_fake: &[T],
    eps: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    check_probs(d_real)?;
    check_probs(d_fake)?;
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let gr = d_real
        .iter()
        .map(|p| T::lit(-clamped_log_grad(p.to_f64().unwrap(), eps) / nr))
        .collect();
    let gf = d_fake
        .iter()
        .map(|p| T::lit(clamped_log_grad(1.0 - p.to_f64().unwrap(), eps) / nf))
        .collect();
    Ok((gr, gf))
}

/// `content + lambda_adv * adversarial`.
pub fn generator_total_loss<T: Real, D: Dimension>(
    sr: ArrayView<T, D>,
    gt: ArrayView<T, D>,
    d_fake: &[T],
    weights: &LossWeights,
) -> Result<f64> {
    let content = content_loss(sr, gt)?;
    let adv = adversarial_loss_g(d_fake, weights)?;
    Ok(content + weights.lambda_adv * adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr1, Array2};

    const W: LossWeights = LossWeights {
        lambda_adv: 1e-3,
        eps: 1e-12,
        non_saturating: false,
    };

    #[test]
    fn content_loss_examples() {
        let gt = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64);
        assert_eq!(content_loss(gt.view(), gt.view()).unwrap(), 0.0);
        let shifted = gt.mapv(|v| v - 2.5);
        assert_relative_eq!(content_loss(shifted.view(), gt.view()).unwrap(), 2.5);
        let sr = arr1(&[1.0, 2.0, 3.0]);
        let gt = arr1(&[2.0, 2.0, 5.0]);
        assert_relative_eq!(content_loss(sr.view(), gt.view()).unwrap(), 1.0);
        let g = content_loss_grad(sr.view(), gt.view()).unwrap();
        assert_eq!(g.to_vec(), vec![-1.0 / 3.0, 0.0, -1.0 / 3.0]);
        assert!(content_loss(sr.view(), arr1(&[1.0, 2.0]).view()).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let half = [0.5f64; 4];
        assert_relative_eq!(adversarial_loss_g(&half, &W).unwrap(), -0.693147, epsilon = 1e-6);
        assert_relative_eq!(adversarial_loss_g(&[1.0f64], &W).unwrap(), -27.631021, epsilon = 1e-6);
        let ns = LossWeights { non_saturating: true, ..W };
        assert_relative_eq!(adversarial_loss_g(&[0.3f64; 3], &ns).unwrap(), -(0.3f64.ln()), epsilon = 1e-12);
        assert!(matches!(adversarial_loss_g(&[1.5f64], &W), Err(Error::DomainError(_))));
        assert!(adversarial_loss_g(&[f64::NAN], &W).is_err());
    }

    #[test]
    fn discriminator_examples() {
        assert_relative_eq!(
            discriminator_loss(&[0.5f64; 3], &[0.5; 3], 1e-12).unwrap(),
            1.386294,
            epsilon = 1e-6
        );
        assert_relative_eq!(
            discriminator_loss(&[0.9f64], &[0.1], 1e-12).unwrap(),
            0.21072,
            epsilon = 1e-5
        );
        assert!(discriminator_loss(&[1.0f64], &[0.0], 1e-12).unwrap().abs() < 1e-9);
        assert!(discriminator_loss(&[-0.1f64], &[0.0], 1e-12).is_err());
    }

    #[test]
    fn total_loss_composes() {
        let x = arr1(&[0.2, 0.4]);
        let v = generator_total_loss(x.view(), x.view(), &[0.5f64], &W).unwrap();
        assert_relative_eq!(v, -6.93147e-4, epsilon = 1e-9);
        let zero = LossWeights { lambda_adv: 0.0, ..W };
        let y = arr1(&[0.0, 1.0]);
        assert_eq!(
            generator_total_loss(x.view(), y.view(), &[0.9f64], &zero).unwrap(),
            content_loss(x.view(), y.view()).unwrap()
        );
    }

    #[test]
    fn losses_finite_on_closed_interval() {
        for p in [0.0f64, 1e-300, 0.5, 1.0 - 1e-16, 1.0] {
            assert!(adversarial_loss_g(&[p], &W).unwrap().is_finite());
            assert!(discriminator_loss(&[p], &[p], 1e-12).unwrap().is_finite());
            let (a, b) = discriminator_loss_grad(&[p], &[p], 1e-12).unwrap();
            assert!(a[0].is_finite() && b[0].is_finite());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-7;
        for p in [0.2f64, 0.5, 0.8] {
            for ns in [false, true] {
                let w = LossWeights { non_saturating: ns, ..W };
                let fd = (adversarial_loss_g(&[p + h], &w).unwrap() - adversarial_loss_g(&[p - h], &w).unwrap()) / (2.0 * h);
                assert_relative_eq!(adversarial_loss_g_grad(&[p], &w).unwrap()[0], fd, max_relative = 1e-6);
            }
            let (gr, gf) = discriminator_loss_grad(&[p], &[p], 1e-12).unwrap();
            let fdr = (discriminator_loss(&[p + h], &[p], 1e-12).unwrap() - discriminator_loss(&[p - h], &[p], 1e-12).unwrap()) / (2.0 * h);
            let fdf = (discriminator_loss(&[p], &[p + h], 1e-12).unwrap() - discriminator_loss(&[p], &[p - h], 1e-12).unwrap()) / (2.0 * h);
            assert_relative_eq!(gr[0], fdr, max_relative = 1e-6);
            assert_relative_eq!(gf[0], fdf, max_relative = 1e-6);
        }
    }

    #[test]
    fn validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda_adv: -1.0, ..W }.validate().is_err());
        assert!(LossWeights { eps: 1e-3, ..W }.validate().is_err());
    }
}
