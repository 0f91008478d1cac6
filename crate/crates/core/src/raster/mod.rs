//! Multi-resolution band groups and scenes, plus their on-disk formats.
//!
//! Two formats are supported: a single multi-band GeoTIFF per group and a raw
//! little-endian float32 tensor with a JSON sidecar. Both store pixels as
//! float32 in sensor DN scale, so a save followed by a load is bit-exact.

mod geotiff;
mod raw;

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use geotiff::{read_geotiff, write_geotiff};
pub use raw::{read_raw, sidecar_path, write_raw, RAW_MAGIC, RAW_VERSION};

/// 10 m guidance bands, in storage order.
pub const HR_BANDS: [&str; 4] = ["B02", "B03", "B04", "B08"];
/// 20 m bands, in storage order.
pub const LR20_BANDS: [&str; 6] = ["B05", "B06", "B07", "B8A", "B11", "B12"];
/// 60 m bands, in storage order.
pub const LR60_BANDS: [&str; 3] = ["B01", "B09", "B10"];

pub const HR_GSD_M: f64 = 10.0;
pub const LR20_GSD_M: f64 = 20.0;
pub const LR60_GSD_M: f64 = 60.0;

/// Affine georeference: GDAL-ordered geotransform plus a CRS identifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub transform: [f64; 6],
    pub crs: String,
}

/// A stack of co-registered bands sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BandGroup {
    pub bands: Vec<String>,
    /// `[band, row, col]`, DN scale.
    pub pixels: Array3<f32>,
    pub gsd_m: f64,
    pub geo: Option<GeoRef>,
}

impl BandGroup {
    pub fn new(
        bands: Vec<String>,
        pixels: Array3<f32>,
        gsd_m: f64,
        geo: Option<GeoRef>,
    ) -> Result<Self> {
        let group = Self {
            bands,
            pixels,
            gsd_m,
            geo,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn with_bands(bands: &[&str], pixels: Array3<f32>, gsd_m: f64) -> Result<Self> {
        Self::new(
            bands.iter().map(|b| b.to_string()).collect(),
            pixels,
            gsd_m,
            None,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.len() != self.pixels.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} band ids for {} pixel planes",
                self.bands.len(),
                self.pixels.shape()[0]
            )));
        }
        if !(self.gsd_m > 0.0 && self.gsd_m.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gsd_m must be positive, got {}",
                self.gsd_m
            )));
        }
        if let Some(bad) = self.pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!("non-finite pixel value {bad}")));
        }
        Ok(())
    }

    pub fn n_bands(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    /// Reorders (and subsets) bands to `wanted`; fails with `MissingBand`
    /// naming the first absent id.
    pub fn select(&self, group: &str, wanted: &[&str]) -> Result<BandGroup> {
        let mut pixels = Array3::zeros((wanted.len(), self.rows(), self.cols()));
        for (dst, id) in wanted.iter().enumerate() {
            let src = self
                .bands
                .iter()
                .position(|b| b == id)
                .ok_or_else(|| Error::MissingBand {
                    group: group.to_string(),
                    band: id.to_string(),
                })?;
            pixels
                .slice_mut(s![dst, .., ..])
                .assign(&self.pixels.slice(s![src, .., ..]));
        }
        Ok(BandGroup {
            bands: wanted.iter().map(|b| b.to_string()).collect(),
            pixels,
            gsd_m: self.gsd_m,
            geo: self.geo.clone(),
        })
    }

    /// Top-left crop; the georeference origin is unchanged.
    pub fn crop(&self, rows: usize, cols: usize) -> BandGroup {
        BandGroup {
            bands: self.bands.clone(),
            pixels: self.pixels.slice(s![.., ..rows, ..cols]).to_owned(),
            gsd_m: self.gsd_m,
            geo: self.geo.clone(),
        }
    }

    pub fn band_ids(&self) -> Vec<&str> {
        self.bands.iter().map(String::as_str).collect()
    }
}

/// Which band group is super-resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// 20 m bands to 10 m.
    X2,
    /// 60 m bands to 10 m, with the 20 m bands as extra input.
    X6,
}

impl ScalingMode {
    pub fn factor(self) -> usize {
        match self {
            ScalingMode::X2 => 2,
            ScalingMode::X6 => 6,
        }
    }

    pub fn target_bands(self) -> &'static [&'static str] {
        match self {
            ScalingMode::X2 => &LR20_BANDS,
            ScalingMode::X6 => &LR60_BANDS,
        }
    }

    pub fn out_bands(self) -> usize {
        self.target_bands().len()
    }

    /// Channels fed to the generator trunk after upsampling and concatenation.
    pub fn input_channels(self) -> usize {
        match self {
            ScalingMode::X2 => LR20_BANDS.len() + HR_BANDS.len(),
            ScalingMode::X6 => LR20_BANDS.len() + LR60_BANDS.len() + HR_BANDS.len(),
        }
    }
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingMode::X2 => "x2",
            ScalingMode::X6 => "x6",
        })
    }
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x2" | "2" => Ok(ScalingMode::X2),
            "x6" | "6" => Ok(ScalingMode::X6),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Original hr extent before the loader cropped to a multiple of 6.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub orig_rows: usize,
    pub orig_cols: usize,
    pub rows: usize,
    pub cols: usize,
}

/// One acquisition at three resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub hr: BandGroup,
    pub lr20: BandGroup,
    pub lr60: Option<BandGroup>,
    pub crop: Option<Crop>,
}

impl Scene {
    pub fn new(
        scene_id: impl Into<String>,
        hr: BandGroup,
        lr20: BandGroup,
        lr60: Option<BandGroup>,
    ) -> Result<Self> {
        let scene = Self {
            scene_id: scene_id.into(),
            hr,
            lr20,
            lr60,
            crop: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        check_band_order("hr", &self.hr, &HR_BANDS)?;
        check_band_order("lr20", &self.lr20, &LR20_BANDS)?;
        if let Some(lr60) = &self.lr60 {
            check_band_order("lr60", lr60, &LR60_BANDS)?;
        }
        let (h, w) = self.hr.dims();
        if h % 6 != 0 || w % 6 != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "hr grid {h}x{w} is not a positive multiple of 6"
            )));
        }
        check_ratios(&self.hr, &self.lr20, self.lr60.as_ref())
    }

    pub fn supports(&self, mode: ScalingMode) -> bool {
        match mode {
            ScalingMode::X2 => true,
            ScalingMode::X6 => self.lr60.is_some(),
        }
    }
}

fn check_band_order(group: &str, g: &BandGroup, expected: &[&str]) -> Result<()> {
    for id in expected {
        if !g.bands.iter().any(|b| b == id) {
            return Err(Error::MissingBand {
                group: group.into(),
                band: id.to_string(),
            });
        }
    }
    if g.bands.len() != expected.len() || g.bands.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::ShapeMismatch(format!(
            "{group} bands {:?} not in expected order {:?}",
            g.bands, expected
        )));
    }
    Ok(())
}

/// Exact 1 : 1/2 : 1/6 grid ratios between the three groups.
pub(crate) fn check_ratios(
    hr: &BandGroup,
    lr20: &BandGroup,
    lr60: Option<&BandGroup>,
) -> Result<()> {
    let (h, w) = hr.dims();
    if lr20.dims() != (h / 2, w / 2) || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "lr20 grid {:?} is not hr grid {h}x{w} / 2",
            lr20.dims()
        )));
    }
    if let Some(lr60) = lr60 {
        if lr60.dims() != (h / 6, w / 6) || h % 6 != 0 || w % 6 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "lr60 grid {:?} is not hr grid {h}x{w} / 6",
                lr60.dims()
            )));
        }
    }
    Ok(())
}

/// On-disk format of a band group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterFormat {
    Geotiff,
    Raw,
}

impl RasterFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tif") || ext.eq_ignore_ascii_case("tiff") => {
                RasterFormat::Geotiff
            }
            _ => RasterFormat::Raw,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            RasterFormat::Geotiff => "tif",
            RasterFormat::Raw => "s2sr",
        }
    }
}

impl std::str::FromStr for RasterFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "geotiff" | "tif" | "tiff" => Ok(RasterFormat::Geotiff),
            "raw" | "raw-tensor" => Ok(RasterFormat::Raw),
            other => Err(Error::InvalidConfig(format!("unknown raster format {other:?}"))),
        }
    }
}

pub fn save_band_group(group: &BandGroup, path: &Path, format: RasterFormat) -> Result<()> {
    group.validate()?;
    match format {
        RasterFormat::Geotiff => write_geotiff(group, path),
        RasterFormat::Raw => write_raw(group, path),
    }
}

/// Loads a band group, picking the decoder from the file extension.
pub fn load_band_group(path: &Path) -> Result<BandGroup> {
    let group = match RasterFormat::from_path(path) {
        RasterFormat::Geotiff => read_geotiff(path)?,
        RasterFormat::Raw => read_raw(path)?,
    };
    group.validate().map_err(|e| match e {
        Error::ShapeMismatch(reason) => Error::corrupt(path, reason),
        other => other,
    })?;
    Ok(group)
}

/// Scene layout: one raster per band group, paths relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub hr: PathBuf,
    pub lr20: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr60: Option<PathBuf>,
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Loads the scene described by a manifest file.
pub fn load_scene(manifest_path: &Path) -> Result<Scene> {
    let manifest = SceneManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_scene_from(&manifest, base)
}

pub fn load_scene_from(manifest: &SceneManifest, base_dir: &Path) -> Result<Scene> {
    let hr = load_band_group(&base_dir.join(&manifest.hr))?.select("hr", &HR_BANDS)?;
    let lr20 = load_band_group(&base_dir.join(&manifest.lr20))?.select("lr20", &LR20_BANDS)?;
    let lr60 = match &manifest.lr60 {
        Some(p) => Some(load_band_group(&base_dir.join(p))?.select("lr60", &LR60_BANDS)?),
        None => None,
    };
    assemble_scene(&manifest.scene_id, hr, lr20, lr60)
}

/// Checks the floor-ratio relation between groups, then crops top-left to
/// the largest hr extent that is a multiple of 6.
pub fn assemble_scene(
    scene_id: &str,
    hr: BandGroup,
    lr20: BandGroup,
    lr60: Option<BandGroup>,
) -> Result<Scene> {
    let (h, w) = hr.dims();
    if lr20.dims() != (h / 2, w / 2) {
        return Err(Error::ShapeMismatch(format!(
            "scene {scene_id}: lr20 grid {:?} does not match hr grid {h}x{w} / 2",
            lr20.dims()
        )));
    }
    if let Some(g) = &lr60 {
        if g.dims() != (h / 6, w / 6) {
            return Err(Error::ShapeMismatch(format!(
                "scene {scene_id}: lr60 grid {:?} does not match hr grid {h}x{w} / 6",
                g.dims()
            )));
        }
    }
    let (ch, cw) = (h / 6 * 6, w / 6 * 6);
    if ch == 0 || cw == 0 {
        return Err(Error::ShapeMismatch(format!(
            "scene {scene_id}: hr grid {h}x{w} smaller than 6x6"
        )));
    }
    let crop = ((ch, cw) != (h, w)).then_some(Crop {
        orig_rows: h,
        orig_cols: w,
        rows: ch,
        cols: cw,
    });
    let scene = Scene {
        scene_id: scene_id.to_string(),
        hr: hr.crop(ch, cw),
        lr20: lr20.crop(ch / 2, cw / 2),
        lr60: lr60.map(|g| g.crop(ch / 6, cw / 6)),
        crop,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes a scene as three rasters plus a manifest in `dir`.
pub fn save_scene(scene: &Scene, dir: &Path, format: RasterFormat) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = format.extension();
    let name = |g: &str| PathBuf::from(format!("{}_{g}.{ext}", scene.scene_id));
    save_band_group(&scene.hr, &dir.join(name("hr")), format)?;
    save_band_group(&scene.lr20, &dir.join(name("lr20")), format)?;
    if let Some(lr60) = &scene.lr60 {
        save_band_group(lr60, &dir.join(name("lr60")), format)?;
    }
    let manifest = SceneManifest {
        scene_id: scene.scene_id.clone(),
        hr: name("hr"),
        lr20: name("lr20"),
        lr60: scene.lr60.as_ref().map(|_| name("lr60")),
    };
    let path = dir.join(format!("{}.scene.json", scene.scene_id));
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(bands: &[&str], rows: usize, cols: usize, gsd: f64) -> BandGroup {
        BandGroup::with_bands(bands, Array3::from_elem((bands.len(), rows, cols), 1.0), gsd)
            .unwrap()
    }

    #[test]
    fn assemble_full_scene() {
        let scene = assemble_scene(
            "s",
            group(&HR_BANDS, 120, 120, 10.0),
            group(&LR20_BANDS, 60, 60, 20.0),
            Some(group(&LR60_BANDS, 20, 20, 60.0)),
        )
        .unwrap();
        assert!(scene.supports(ScalingMode::X6));
        assert!(scene.crop.is_none());
    }

    #[test]
    fn lr20_off_by_one_is_rejected() {
        let err = assemble_scene(
            "s",
            group(&HR_BANDS, 120, 120, 10.0),
            group(&LR20_BANDS, 61, 61, 20.0),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn crop_records_original_extent() {
        let scene = assemble_scene(
            "s",
            group(&HR_BANDS, 125, 130, 10.0),
            group(&LR20_BANDS, 62, 65, 20.0),
            Some(group(&LR60_BANDS, 20, 21, 60.0)),
        )
        .unwrap();
        assert_eq!(scene.hr.dims(), (120, 126));
        assert_eq!(scene.lr20.dims(), (60, 63));
        assert_eq!(scene.lr60.as_ref().unwrap().dims(), (20, 21));
        assert_eq!(
            scene.crop,
            Some(Crop {
                orig_rows: 125,
                orig_cols: 130,
                rows: 120,
                cols: 126
            })
        );
    }

    #[test]
    fn select_reports_missing_band() {
        let g = group(&["B05", "B06", "B07", "B11", "B12"], 4, 4, 20.0);
        match g.select("lr20", &LR20_BANDS) {
            Err(Error::MissingBand { band, .. }) => assert_eq!(band, "B8A"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn select_reorders() {
        let mut pixels = Array3::zeros((2, 1, 1));
        pixels[[0, 0, 0]] = 1.0;
        pixels[[1, 0, 0]] = 2.0;
        let g = BandGroup::with_bands(&["B2", "B1"], pixels, 10.0).unwrap();
        let r = g.select("x", &["B1", "B2"]).unwrap();
        assert_eq!(r.pixels[[0, 0, 0]], 2.0);
        assert_eq!(r.pixels[[1, 0, 0]], 1.0);
    }

    #[test]
    fn band_group_invariants() {
        assert!(BandGroup::with_bands(&["A"], Array3::zeros((2, 2, 2)), 10.0).is_err());
        assert!(BandGroup::with_bands(&["A"], Array3::zeros((1, 2, 2)), 0.0).is_err());
        let mut px = Array3::zeros((1, 2, 2));
        px[[0, 1, 1]] = f32::NAN;
        assert!(BandGroup::with_bands(&["A"], px, 10.0).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("x6".parse::<ScalingMode>().unwrap(), ScalingMode::X6);
        assert_eq!(ScalingMode::X2.to_string(), "x2");
        assert!("x3".parse::<ScalingMode>().is_err());
        assert_eq!(ScalingMode::X6.input_channels(), 13);
    }
}
