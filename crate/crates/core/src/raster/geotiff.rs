//! Minimal GeoTIFF codec: classic little-endian TIFF, uncompressed strips.
//!
//! Writes float32 samples with one plane per band (PlanarConfiguration=2)
//! and stores band ids, gsd and CRS string in a JSON ImageDescription so the
//! group round-trips exactly. The reader also accepts chunky (interleaved)
//! files and 16-bit unsigned samples.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{BandGroup, GeoRef};
use crate::error::{Error, Result};

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_IMAGE_DESCRIPTION: u16 = 270;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_EXTRA_SAMPLES: u16 = 338;
const TAG_SAMPLE_FORMAT: u16 = 339;
const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
const TAG_MODEL_TIEPOINT: u16 = 33922;
const TAG_MODEL_TRANSFORMATION: u16 = 34264;
const TAG_GEO_KEY_DIRECTORY: u16 = 34735;

const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;
const TYPE_DOUBLE: u16 = 12;

const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_CS_TYPE: u16 = 3072;

#[derive(Serialize, Deserialize)]
struct Description {
    bands: Vec<String>,
    gsd_m: f64,
    georeferenced: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crs: Option<String>,
}

struct Entry {
    tag: u16,
    kind: u16,
    count: u32,
    bytes: Vec<u8>,
}

impl Entry {
    fn shorts(tag: u16, values: &[u16]) -> Self {
        Self {
            tag,
            kind: TYPE_SHORT,
            count: values.len() as u32,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn longs(tag: u16, values: &[u32]) -> Self {
        Self {
            tag,
            kind: TYPE_LONG,
            count: values.len() as u32,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn doubles(tag: u16, values: &[f64]) -> Self {
        Self {
            tag,
            kind: TYPE_DOUBLE,
            count: values.len() as u32,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn ascii(tag: u16, text: &str) -> Self {
        let mut bytes = text.as_bytes().to_vec();
        bytes.push(0);
        Self {
            tag,
            kind: TYPE_ASCII,
            count: bytes.len() as u32,
            bytes,
        }
    }
}

fn epsg_code(crs: &str) -> Option<u16> {
    crs.strip_prefix("EPSG:")
        .or_else(|| crs.strip_prefix("epsg:"))
        .and_then(|c| c.parse().ok())
}

fn geo_keys(crs: &str) -> Vec<u16> {
    let mut keys: Vec<[u16; 4]> = Vec::new();
    match epsg_code(crs) {
        Some(code) if (4000..5000).contains(&code) => {
            keys.push([KEY_MODEL_TYPE, 0, 1, 2]);
            keys.push([KEY_RASTER_TYPE, 0, 1, 1]);
            keys.push([KEY_GEOGRAPHIC_TYPE, 0, 1, code]);
        }
        Some(code) => {
            keys.push([KEY_MODEL_TYPE, 0, 1, 1]);
            keys.push([KEY_RASTER_TYPE, 0, 1, 1]);
            keys.push([KEY_PROJECTED_CS_TYPE, 0, 1, code]);
        }
        None => keys.push([KEY_RASTER_TYPE, 0, 1, 1]),
    }
    let mut out = vec![1, 1, 0, keys.len() as u16];
    out.extend(keys.into_iter().flatten());
    out
}

pub fn write_geotiff(group: &BandGroup, path: &Path) -> Result<()> {
    let (b, h, w) = group.pixels.dim();
    let plane_bytes = 4 * h * w;
    let data_start = 8usize;
    let ifd_offset = data_start + b * plane_bytes;
    if ifd_offset > u32::MAX as usize / 2 {
        return Err(Error::io(
            path,
            std::io::Error::other("raster too large for classic TIFF"),
        ));
    }

    let description = Description {
        bands: group.bands.clone(),
        gsd_m: group.gsd_m,
        georeferenced: group.geo.is_some(),
        crs: group.geo.as_ref().map(|g| g.crs.clone()),
    };
    let description =
        serde_json::to_string(&description).map_err(|e| Error::json(path, e))?;

    let mut entries = vec![
        Entry::longs(TAG_IMAGE_WIDTH, &[w as u32]),
        Entry::longs(TAG_IMAGE_LENGTH, &[h as u32]),
        Entry::shorts(TAG_BITS_PER_SAMPLE, &vec![32; b]),
        Entry::shorts(TAG_COMPRESSION, &[1]),
        Entry::shorts(TAG_PHOTOMETRIC, &[1]),
        Entry::ascii(TAG_IMAGE_DESCRIPTION, &description),
        Entry::longs(
            TAG_STRIP_OFFSETS,
            &(0..b)
                .map(|i| (data_start + i * plane_bytes) as u32)
                .collect::<Vec<_>>(),
        ),
        Entry::shorts(TAG_SAMPLES_PER_PIXEL, &[b as u16]),
        Entry::longs(TAG_ROWS_PER_STRIP, &[h as u32]),
        Entry::longs(TAG_STRIP_BYTE_COUNTS, &vec![plane_bytes as u32; b]),
        Entry::shorts(TAG_PLANAR_CONFIG, &[if b > 1 { 2 } else { 1 }]),
        Entry::shorts(TAG_SAMPLE_FORMAT, &vec![3; b]),
    ];
    if b > 1 {
        entries.push(Entry::shorts(TAG_EXTRA_SAMPLES, &vec![0; b - 1]));
    }
    match &group.geo {
        Some(geo) => {
            let t = geo.transform;
            if t[2] == 0.0 && t[4] == 0.0 {
                entries.push(Entry::doubles(TAG_MODEL_PIXEL_SCALE, &[t[1], -t[5], 0.0]));
                entries.push(Entry::doubles(
                    TAG_MODEL_TIEPOINT,
                    &[0.0, 0.0, 0.0, t[0], t[3], 0.0],
                ));
            } else {
                entries.push(Entry::doubles(
                    TAG_MODEL_TRANSFORMATION,
                    &[
                        t[1], t[2], 0.0, t[0], t[4], t[5], 0.0, t[3], 0.0, 0.0, 0.0, 0.0, 0.0,
                        0.0, 0.0, 1.0,
                    ],
                ));
            }
            entries.push(Entry::shorts(TAG_GEO_KEY_DIRECTORY, &geo_keys(&geo.crs)));
        }
        None => {
            // identity transform, flagged non-georeferenced in the description
            entries.push(Entry::doubles(TAG_MODEL_PIXEL_SCALE, &[1.0, 1.0, 0.0]));
            entries.push(Entry::doubles(TAG_MODEL_TIEPOINT, &[0.0; 6]));
        }
    }
    entries.sort_by_key(|e| e.tag);

    let mut out = Vec::with_capacity(ifd_offset + 512 + description.len());
    out.extend_from_slice(b"II");
    out.extend_from_slice(&42u16.to_le_bytes());
    out.extend_from_slice(&(ifd_offset as u32).to_le_bytes());
    for v in group.pixels.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(out.len(), ifd_offset);

    let ifd_len = 2 + 12 * entries.len() + 4;
    let mut overflow_at = ifd_offset + ifd_len;
    let mut overflow = Vec::new();
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&e.tag.to_le_bytes());
        out.extend_from_slice(&e.kind.to_le_bytes());
        out.extend_from_slice(&e.count.to_le_bytes());
        if e.bytes.len() <= 4 {
            let mut inline = [0u8; 4];
            inline[..e.bytes.len()].copy_from_slice(&e.bytes);
            out.extend_from_slice(&inline);
        } else {
            out.extend_from_slice(&(overflow_at as u32).to_le_bytes());
            overflow.extend_from_slice(&e.bytes);
            if overflow.len() % 2 == 1 {
                overflow.push(0);
            }
            overflow_at = ifd_offset + ifd_len + overflow.len();
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&overflow);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Ifd<'a> {
    path: &'a Path,
    data: &'a [u8],
    entries: BTreeMap<u16, (u16, u32, usize)>,
}

impl<'a> Ifd<'a> {
    fn parse(path: &'a Path, data: &'a [u8]) -> Result<Self> {
        let bad = |why: &str| Error::corrupt(path, why.to_string());
        if data.len() < 8 {
            return Err(bad("file shorter than a TIFF header"));
        }
        if &data[..2] != b"II" {
            return Err(bad("only little-endian TIFF is supported"));
        }
        if u16::from_le_bytes([data[2], data[3]]) != 42 {
            return Err(bad("not a classic TIFF (magic 42)"));
        }
        let ifd = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        let count = data
            .get(ifd..ifd + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .ok_or_else(|| bad("IFD offset out of range"))?;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let at = ifd + 2 + 12 * i;
            let e = data
                .get(at..at + 12)
                .ok_or_else(|| bad("truncated IFD"))?;
            let tag = u16::from_le_bytes([e[0], e[1]]);
            let kind = u16::from_le_bytes([e[2], e[3]]);
            let n = u32::from_le_bytes(e[4..8].try_into().unwrap());
            let size = match kind {
                1 | 2 | 6 | 7 => 1,
                3 | 8 => 2,
                4 | 9 | 11 => 4,
                5 | 10 | 12 => 8,
                _ => continue,
            } * n as usize;
            let offset = if size <= 4 {
                at + 8
            } else {
                u32::from_le_bytes(e[8..12].try_into().unwrap()) as usize
            };
            if offset + size > data.len() {
                return Err(bad("tag value out of range"));
            }
            entries.insert(tag, (kind, n, offset));
        }
        Ok(Self {
            path,
            data,
            entries,
        })
    }

    fn uints(&self, tag: u16) -> Result<Option<Vec<u32>>> {
        let Some(&(kind, n, off)) = self.entries.get(&tag) else {
            return Ok(None);
        };
        let d = &self.data[off..];
        let values = match kind {
            TYPE_SHORT => (0..n as usize)
                .map(|i| u16::from_le_bytes([d[2 * i], d[2 * i + 1]]) as u32)
                .collect(),
            TYPE_LONG => (0..n as usize)
                .map(|i| u32::from_le_bytes(d[4 * i..4 * i + 4].try_into().unwrap()))
                .collect(),
            _ => {
                return Err(Error::corrupt(
                    self.path,
                    format!("tag {tag} has non-integer type {kind}"),
                ))
            }
        };
        Ok(Some(values))
    }

    fn uint(&self, tag: u16, default: Option<u32>) -> Result<u32> {
        match self.uints(tag)? {
            Some(v) if !v.is_empty() => Ok(v[0]),
            _ => default.ok_or_else(|| Error::corrupt(self.path, format!("missing tag {tag}"))),
        }
    }

    fn doubles(&self, tag: u16) -> Option<Vec<f64>> {
        let &(kind, n, off) = self.entries.get(&tag)?;
        if kind != TYPE_DOUBLE {
            return None;
        }
        let d = &self.data[off..];
        Some(
            (0..n as usize)
                .map(|i| f64::from_le_bytes(d[8 * i..8 * i + 8].try_into().unwrap()))
                .collect(),
        )
    }

    fn ascii(&self, tag: u16) -> Option<String> {
        let &(kind, n, off) = self.entries.get(&tag)?;
        if kind != TYPE_ASCII {
            return None;
        }
        let bytes = &self.data[off..off + n as usize];
        let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
        String::from_utf8(bytes[..end].to_vec()).ok()
    }
}

fn transform_from_tags(ifd: &Ifd<'_>) -> Option<[f64; 6]> {
    if let Some(m) = ifd.doubles(TAG_MODEL_TRANSFORMATION).filter(|m| m.len() == 16) {
        return Some([m[3], m[0], m[1], m[7], m[4], m[5]]);
    }
    let scale = ifd.doubles(TAG_MODEL_PIXEL_SCALE).filter(|s| s.len() >= 2)?;
    let tie = ifd.doubles(TAG_MODEL_TIEPOINT).filter(|t| t.len() >= 6)?;
    Some([
        tie[3] - tie[0] * scale[0],
        scale[0],
        0.0,
        tie[4] + tie[1] * scale[1],
        0.0,
        -scale[1],
    ])
}

fn crs_from_keys(ifd: &Ifd<'_>) -> Option<String> {
    let keys = ifd.uints(TAG_GEO_KEY_DIRECTORY).ok()??;
    let n = *keys.get(3)? as usize;
    (0..n).find_map(|i| {
        let k = keys.get(4 + 4 * i..8 + 4 * i)?;
        (k[1] == 0 && (k[0] as u16 == KEY_PROJECTED_CS_TYPE || k[0] as u16 == KEY_GEOGRAPHIC_TYPE))
            .then(|| format!("EPSG:{}", k[3]))
    })
}

pub fn read_geotiff(path: &Path) -> Result<BandGroup> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ifd = Ifd::parse(path, &data)?;
    let bad = |why: String| Error::corrupt(path, why);

    if ifd.entries.contains_key(&TAG_TILE_WIDTH) {
        return Err(bad("tiled TIFF layout is not supported".into()));
    }
    let w = ifd.uint(TAG_IMAGE_WIDTH, None)? as usize;
    let h = ifd.uint(TAG_IMAGE_LENGTH, None)? as usize;
    let spp = ifd.uint(TAG_SAMPLES_PER_PIXEL, Some(1))? as usize;
    let compression = ifd.uint(TAG_COMPRESSION, Some(1))?;
    if compression != 1 {
        return Err(bad(format!("compression {compression} is not supported")));
    }
    let bits = ifd.uint(TAG_BITS_PER_SAMPLE, Some(1))?;
    let format = ifd.uint(TAG_SAMPLE_FORMAT, Some(1))?;
    let sample_bytes = match (bits, format) {
        (32, 3) | (16, 1) => bits as usize / 8,
        _ => {
            return Err(bad(format!(
                "sample type {bits}-bit format {format} is not supported"
            )))
        }
    };
    let planar = ifd.uint(TAG_PLANAR_CONFIG, Some(1))?;
    let rows_per_strip = (ifd.uint(TAG_ROWS_PER_STRIP, Some(h as u32))? as usize).clamp(1, h.max(1));
    let offsets = ifd
        .uints(TAG_STRIP_OFFSETS)?
        .ok_or_else(|| bad("missing strip offsets".into()))?;
    let counts = ifd
        .uints(TAG_STRIP_BYTE_COUNTS)?
        .ok_or_else(|| bad("missing strip byte counts".into()))?;
    if offsets.len() != counts.len() {
        return Err(bad("strip offset/count length mismatch".into()));
    }
    let mut stream = Vec::with_capacity(spp * h * w * sample_bytes);
    for (&o, &c) in offsets.iter().zip(&counts) {
        let (o, c) = (o as usize, c as usize);
        stream.extend_from_slice(
            data.get(o..o + c)
                .ok_or_else(|| bad("strip out of range".into()))?,
        );
    }
    let strips_per_plane = h.div_ceil(rows_per_strip);
    let expected_strips = if planar == 2 { strips_per_plane * spp } else { strips_per_plane };
    if offsets.len() != expected_strips || stream.len() < spp * h * w * sample_bytes {
        return Err(bad(format!(
            "{} strips holding {} bytes do not cover {spp}x{h}x{w}",
            offsets.len(),
            stream.len()
        )));
    }
    let sample = |i: usize| -> f32 {
        let at = i * sample_bytes;
        if sample_bytes == 4 {
            f32::from_le_bytes(stream[at..at + 4].try_into().unwrap())
        } else {
            u16::from_le_bytes([stream[at], stream[at + 1]]) as f32
        }
    };
    let pixels = if planar == 2 {
        Array3::from_shape_fn((spp, h, w), |(b, r, c)| sample((b * h + r) * w + c))
    } else {
        Array3::from_shape_fn((spp, h, w), |(b, r, c)| sample((r * w + c) * spp + b))
    };

    let desc: Option<Description> = ifd
        .ascii(TAG_IMAGE_DESCRIPTION)
        .and_then(|s| serde_json::from_str(&s).ok());
    let transform = transform_from_tags(&ifd);
    let (bands, gsd_m, geo) = match desc {
        Some(d) => {
            let geo = if d.georeferenced {
                Some(GeoRef {
                    transform: transform
                        .ok_or_else(|| bad("georeferenced file lacks a transform".into()))?,
                    crs: d.crs.or_else(|| crs_from_keys(&ifd)).unwrap_or_default(),
                })
            } else {
                None
            };
            (d.bands, d.gsd_m, geo)
        }
        None => {
            let bands = (1..=spp).map(|i| format!("band_{i}")).collect();
            let geo = ifd.entries.contains_key(&TAG_GEO_KEY_DIRECTORY).then(|| GeoRef {
                transform: transform.unwrap_or([0.0, 1.0, 0.0, 0.0, 0.0, -1.0]),
                crs: crs_from_keys(&ifd).unwrap_or_default(),
            });
            let gsd = transform.map(|t| t[1].abs()).filter(|g| *g > 0.0).unwrap_or(1.0);
            (bands, gsd, geo)
        }
    };
    if bands.len() != spp {
        return Err(bad(format!(
            "description lists {} bands for {spp} samples",
            bands.len()
        )));
    }
    Ok(BandGroup {
        bands,
        pixels,
        gsd_m,
        geo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_group(geo: Option<GeoRef>) -> BandGroup {
        let pixels = Array3::from_shape_fn((3, 5, 7), |(b, r, c)| (b * 100 + r * 7 + c) as f32 + 0.25);
        BandGroup::new(
            vec!["B01".into(), "B09".into(), "B10".into()],
            pixels,
            60.0,
            geo,
        )
        .unwrap()
    }

    #[test]
    fn georeferenced_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tif");
        let g = sample_group(Some(GeoRef {
            transform: [399960.0, 60.0, 0.0, 5300040.0, 0.0, -60.0],
            crs: "EPSG:32632".into(),
        }));
        write_geotiff(&g, &path).unwrap();
        assert_eq!(read_geotiff(&path).unwrap(), g);
    }

    #[test]
    fn rotated_transform_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tif");
        let g = sample_group(Some(GeoRef {
            transform: [10.0, 0.5, 0.1, 20.0, 0.2, -0.5],
            crs: "EPSG:4326".into(),
        }));
        write_geotiff(&g, &path).unwrap();
        assert_eq!(read_geotiff(&path).unwrap(), g);
    }

    #[test]
    fn non_georeferenced_uses_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tif");
        let g = sample_group(None);
        write_geotiff(&g, &path).unwrap();
        let data = std::fs::read(&path).unwrap();
        let ifd = Ifd::parse(&path, &data).unwrap();
        assert_eq!(transform_from_tags(&ifd), Some([0.0, 1.0, 0.0, 0.0, 0.0, -1.0]));
        assert!(!ifd.entries.contains_key(&TAG_GEO_KEY_DIRECTORY));
        assert!(ifd.ascii(TAG_IMAGE_DESCRIPTION).unwrap().contains("\"georeferenced\":false"));
        assert_eq!(read_geotiff(&path).unwrap().geo, None);
    }

    #[test]
    fn rejects_non_tiff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tif");
        std::fs::write(&path, b"MM\x00\x2a\x00\x00\x00\x08").unwrap();
        assert!(matches!(read_geotiff(&path), Err(Error::CorruptRaster { .. })));
        std::fs::write(&path, b"hello").unwrap();
        assert!(matches!(read_geotiff(&path), Err(Error::CorruptRaster { .. })));
    }

    /// Hand-built chunky u16 file, as produced by common GIS exports.
    #[test]
    fn reads_interleaved_u16() {
        let (w, h, spp) = (2u32, 2u32, 2u16);
        let samples: [u16; 8] = [1, 10, 2, 20, 3, 30, 4, 40];
        let mut f = Vec::new();
        f.extend_from_slice(b"II");
        f.extend_from_slice(&42u16.to_le_bytes());
        f.extend_from_slice(&24u32.to_le_bytes());
        for v in samples {
            f.extend_from_slice(&v.to_le_bytes());
        }
        let entries: [(u16, u16, u32, u32); 8] = [
            (256, 4, 1, w),
            (257, 4, 1, h),
            (258, 3, 1, 16),
            (259, 3, 1, 1),
            (273, 4, 1, 8),
            (277, 3, 1, spp as u32),
            (278, 4, 1, h),
            (279, 4, 1, 16),
        ];
        f.extend_from_slice(&(entries.len() as u16).to_le_bytes());
        for (tag, kind, n, v) in entries {
            f.extend_from_slice(&tag.to_le_bytes());
            f.extend_from_slice(&kind.to_le_bytes());
            f.extend_from_slice(&n.to_le_bytes());
            f.extend_from_slice(&v.to_le_bytes());
        }
        f.extend_from_slice(&0u32.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tif");
        std::fs::write(&path, f).unwrap();
        let g = read_geotiff(&path).unwrap();
        assert_eq!(g.bands, vec!["band_1", "band_2"]);
        assert_eq!(g.pixels[[0, 1, 1]], 4.0);
        assert_eq!(g.pixels[[1, 0, 1]], 20.0);
    }
}
