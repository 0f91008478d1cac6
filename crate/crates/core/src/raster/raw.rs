use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{BandGroup, GeoRef};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"S2SR";
pub const RAW_VERSION: u32 = 1;
const HEADER_LEN: usize = 8;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    bands: Vec<String>,
    shape: [usize; 3],
    gsd_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geo: Option<GeoRef>,
}

/// `<name>.json` next to the payload file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_raw(group: &BandGroup, path: &Path) -> Result<()> {
    let (b, h, w) = group.pixels.dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * b * h * w);
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.extend_from_slice(&RAW_VERSION.to_le_bytes());
    // iter() walks logical C order regardless of memory layout
    for v in group.pixels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let sidecar = Sidecar {
        bands: group.bands.clone(),
        shape: [b, h, w],
        gsd_m: group.gsd_m,
        geo: group.geo.clone(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_raw(path: &Path) -> Result<BandGroup> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&side, e.to_string()))?;

    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != RAW_MAGIC {
        return Err(Error::corrupt(path, "missing S2SR magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RAW_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: format!("raw tensor version {version}, expected {RAW_VERSION}"),
        });
    }
    let [b, h, w] = meta.shape;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * b * h * w {
        return Err(Error::corrupt(
            path,
            format!(
                "payload holds {} bytes, shape {:?} needs {}",
                payload.len(),
                meta.shape,
                4 * b * h * w
            ),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let pixels = Array3::from_shape_vec((b, h, w), values)
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(BandGroup {
        bands: meta.bands,
        pixels,
        gsd_m: meta.gsd_m,
        geo: meta.geo,
    })
}
