//! On-disk training triples and the prepared-dataset manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade_scene, TrainingTriple, TripleCrop};
use crate::error::{Error, Result};
use crate::raster::{load_band_group, save_band_group, RasterFormat, ScalingMode, Scene};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.75,
            validation: 0.0,
            test: 0.25,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "split ratios must be non-negative with a positive sum, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Roles for `n` scenes: counts by rounding (validation and test first,
    /// train takes the rest), positions shuffled by `seed`.
    pub fn assign(&self, n: usize, seed: u64) -> Result<Vec<Role>> {
        self.validate()?;
        let sum = self.train + self.validation + self.test;
        let n_val = (n as f64 * self.validation / sum).round() as usize;
        let n_test = ((n as f64 * self.test / sum).round() as usize).min(n - n_val.min(n));
        let n_val = n_val.min(n);
        let mut roles: Vec<Role> = std::iter::repeat(Role::Validation)
            .take(n_val)
            .chain(std::iter::repeat(Role::Test).take(n_test))
            .collect();
        roles.resize(n, Role::Train);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = vec![Role::Train; n];
        for (slot, &i) in order.iter().enumerate() {
            out[i] = roles[slot];
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleEntry {
    pub scene_id: String,
    pub role: Role,
    pub lr: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr60: Option<PathBuf>,
    pub hr: PathBuf,
    pub gt: PathBuf,
    /// `[bands, rows, cols]` of the ground truth.
    pub gt_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<TripleCrop>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub version: u32,
    pub mode: ScalingMode,
    pub seed: u64,
    pub blur_sigma: f64,
    pub triples: Vec<TripleEntry>,
}

impl PreparedManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: m.version.to_string(),
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, role: Role) -> usize {
        self.triples.iter().filter(|t| t.role == role).count()
    }
}

/// Degrades every scene, writes the triples and `manifest.json` into `out_dir`.
pub fn prepare_scenes(
    scenes: &[Scene],
    mode: ScalingMode,
    blur_sigma: f64,
    split: &SplitRatios,
    seed: u64,
    out_dir: &Path,
    format: RasterFormat,
) -> Result<PreparedManifest> {
    let roles = split.assign(scenes.len(), seed)?;
    // degrade everything first so a bad scene leaves no partial output
    let triples = scenes
        .iter()
        .map(|s| degrade_scene(s, mode, blur_sigma))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ext = format.extension();
    let mut entries = Vec::with_capacity(triples.len());
    for (t, role) in triples.iter().zip(roles) {
        let name = |g: &str| PathBuf::from(format!("{}_{g}.{ext}", t.scene_id));
        save_band_group(&t.lr_in, &out_dir.join(name("lr")), format)?;
        if let Some(g) = &t.lr60_in {
            save_band_group(g, &out_dir.join(name("lr60")), format)?;
        }
        save_band_group(&t.hr_in, &out_dir.join(name("hr")), format)?;
        save_band_group(&t.gt, &out_dir.join(name("gt")), format)?;
        let (b, h, w) = t.gt.pixels.dim();
        entries.push(TripleEntry {
            scene_id: t.scene_id.clone(),
            role,
            lr: name("lr"),
            lr60: t.lr60_in.as_ref().map(|_| name("lr60")),
            hr: name("hr"),
            gt: name("gt"),
            gt_shape: [b, h, w],
            crop: t.crop,
        });
    }
    let manifest = PreparedManifest {
        version: MANIFEST_VERSION,
        mode,
        seed,
        blur_sigma,
        triples: entries,
    };
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

pub fn load_triple(entry: &TripleEntry, mode: ScalingMode, base: &Path) -> Result<TrainingTriple> {
    let triple = TrainingTriple {
        lr_in: load_band_group(&base.join(&entry.lr))?,
        lr60_in: entry
            .lr60
            .as_ref()
            .map(|p| load_band_group(&base.join(p)))
            .transpose()?,
        hr_in: load_band_group(&base.join(&entry.hr))?,
        gt: load_band_group(&base.join(&entry.gt))?,
        mode,
        scene_id: entry.scene_id.clone(),
        crop: entry.crop,
    };
    triple.validate()?;
    let (b, h, w) = triple.gt.pixels.dim();
    if [b, h, w] != entry.gt_shape {
        return Err(Error::ShapeMismatch(format!(
            "triple {}: gt is {:?}, manifest says {:?}",
            entry.scene_id,
            [b, h, w],
            entry.gt_shape
        )));
    }
    Ok(triple)
}

/// Triples of one role from a prepared manifest (paths relative to it).
pub fn load_prepared(manifest_path: &Path, role: Role) -> Result<(PreparedManifest, Vec<TrainingTriple>)> {
    let manifest = PreparedManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let triples = manifest
        .triples
        .iter()
        .filter(|e| e.role == role)
        .map(|e| load_triple(e, manifest.mode, base))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, triples))
}
