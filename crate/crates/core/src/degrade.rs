//! Reduced-resolution training triples.
//!
//! Every group is shifted down by the scaling factor so that the original
//! lower-resolution bands become the ground truth for the degraded inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{check_ratios, BandGroup, ScalingMode, Scene};
use crate::resample::{downsample, upsample_bicubic, ResampleSpec};

/// Top-left crop applied so that every degraded grid is integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleCrop {
    pub hr_rows: usize,
    pub hr_cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    /// Degraded 20 m-lineage bands, at half the gt grid.
    pub lr_in: BandGroup,
    /// Degraded 60 m-lineage bands at a sixth of the gt grid (x6 only).
    pub lr60_in: Option<BandGroup>,
    /// Degraded 10 m guidance, on the gt grid.
    pub hr_in: BandGroup,
    /// Untouched original bands of the target group.
    pub gt: BandGroup,
    pub mode: ScalingMode,
    pub scene_id: String,
    pub crop: Option<TripleCrop>,
}

impl TrainingTriple {
    pub fn validate(&self) -> Result<()> {
        check_ratios(&self.hr_in, &self.lr_in, self.lr60_in.as_ref())?;
        if self.gt.dims() != self.hr_in.dims() {
            return Err(Error::ShapeMismatch(format!(
                "gt grid {:?} differs from hr_in grid {:?}",
                self.gt.dims(),
                self.hr_in.dims()
            )));
        }
        if self.gt.n_bands() != self.mode.out_bands() {
            return Err(Error::ShapeMismatch(format!(
                "gt has {} bands, {} expects {}",
                self.gt.n_bands(),
                self.mode,
                self.mode.out_bands()
            )));
        }
        if (self.mode == ScalingMode::X6) != self.lr60_in.is_some() {
            return Err(Error::ShapeMismatch(
                "60 m input present iff mode is x6".into(),
            ));
        }
        Ok(())
    }

    pub fn gt_dims(&self) -> (usize, usize) {
        self.gt.dims()
    }
}

/// Builds one triple from a scene.
///
/// x2: `hr_in = down(hr, 2)`, `lr_in = down(lr20, 2)`, `gt = lr20`.
/// x6: `hr_in = down(hr, 6)`, `lr_in = down(lr20, 6)`, `lr60_in = down(lr60, 6)`,
/// `gt = lr60`. The scene is first cropped so the gt grid is divisible by the
/// factor (hr to a multiple of 4 for x2, of 36 for x6).
pub fn degrade_scene(scene: &Scene, mode: ScalingMode, blur_sigma: f64) -> Result<TrainingTriple> {
    let spec = ResampleSpec::new(mode.factor(), blur_sigma)?;
    let (h, w) = scene.hr.dims();
    let unit = match mode {
        ScalingMode::X2 => 4,
        ScalingMode::X6 => 36,
    };
    let (ch, cw) = (h / unit * unit, w / unit * unit);
    if ch == 0 || cw == 0 {
        return Err(Error::ShapeMismatch(format!(
            "scene {}: hr grid {h}x{w} too small for {mode} degradation (needs {unit}x{unit})",
            scene.scene_id
        )));
    }
    let crop = ((ch, cw) != (h, w)).then_some(TripleCrop {
        hr_rows: ch,
        hr_cols: cw,
    });
    let hr = scene.hr.crop(ch, cw);
    let lr20 = scene.lr20.crop(ch / 2, cw / 2);

    let triple = match mode {
        ScalingMode::X2 => TrainingTriple {
            hr_in: downsample(&hr, &spec)?,
            lr_in: downsample(&lr20, &spec)?,
            lr60_in: None,
            gt: lr20,
            mode,
            scene_id: scene.scene_id.clone(),
            crop,
        },
        ScalingMode::X6 => {
            let lr60 = scene
                .lr60
                .as_ref()
                .ok_or_else(|| Error::MissingLr60 {
                    scene_id: scene.scene_id.clone(),
                })?
                .crop(ch / 6, cw / 6);
            TrainingTriple {
                hr_in: downsample(&hr, &spec)?,
                lr_in: downsample(&lr20, &spec)?,
                lr60_in: Some(downsample(&lr60, &spec)?),
                gt: lr60,
                mode,
                scene_id: scene.scene_id.clone(),
                crop,
            }
        }
    };
    triple.validate()?;
    Ok(triple)
}

/// Bicubic upsampling of the degraded target group onto the gt grid.
pub fn bicubic_baseline(triple: &TrainingTriple) -> Result<BandGroup> {
    let mut up = match triple.mode {
        ScalingMode::X2 => upsample_bicubic(&triple.lr_in, 2)?,
        ScalingMode::X6 => {
            let lr60 = triple.lr60_in.as_ref().ok_or_else(|| Error::MissingLr60 {
                scene_id: triple.scene_id.clone(),
            })?;
            upsample_bicubic(lr60, 6)?
        }
    };
    up.gsd_m = triple.gt.gsd_m;
    up.geo = triple.gt.geo.clone();
    Ok(up)
}
