//! Single-file model checkpoints.
//!
//! Layout: `b"S2CK"`, u32 LE version, u64 LE header length, a JSON header
//! (configs, tensor table, optimizer counters), then every tensor as f32 LE
//! in header order. Serialization is deterministic, so save -> load -> save
//! reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::{d_init, DiscriminatorConfig, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::generator::{init_params, GeneratorConfig, GeneratorParams};
use crate::nn::{Adam, AdamConfig, Parameters};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub generator: GeneratorParams<f32>,
    pub discriminator: Option<DiscriminatorParams<f32>>,
    pub opt_g: Option<Adam<f32>>,
    pub opt_d: Option<Adam<f32>>,
    pub train_config: Option<TrainConfig>,
    /// Best validation content loss seen so far.
    pub best_val: Option<f64>,
}

impl Checkpoint {
    /// Generator-only checkpoint, e.g. for inference.
    pub fn generator_only(generator: GeneratorParams<f32>) -> Self {
        Self {
            step: 0,
            generator,
            discriminator: None,
            opt_g: None,
            opt_d: None,
            train_config: None,
            best_val: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptState {
    config: AdamConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    generator: GeneratorConfig,
    discriminator: Option<DiscriminatorConfig>,
    opt_g: Option<OptState>,
    opt_d: Option<OptState>,
    train_config: Option<TrainConfig>,
    best_val: Option<f64>,
    tensors: Vec<TensorEntry>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: (self.payload.len() / 4) as u64,
            len: data.len() as u64,
        });
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn params<P: Parameters<f32>>(&mut self, prefix: &str, p: &P) {
        for t in p.tensors() {
            self.push(format!("{prefix}.{}", t.name), t.shape, t.data);
        }
    }

    fn adam<P: Parameters<f32>>(&mut self, prefix: &str, opt: &Adam<f32>, p: &P) {
        let trainable = p.tensors().into_iter().filter(|t| t.trainable);
        for (i, t) in trainable.enumerate() {
            self.push(format!("{prefix}.m.{}", t.name), t.shape.clone(), &opt.m[i]);
            self.push(format!("{prefix}.v.{}", t.name), t.shape, &opt.v[i]);
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer {
        entries: Vec::new(),
        payload: Vec::new(),
    };
    w.params("g", &ck.generator);
    if let Some(d) = &ck.discriminator {
        w.params("d", d);
    }
    if let Some(opt) = &ck.opt_g {
        w.adam("opt_g", opt, &ck.generator);
    }
    if let (Some(opt), Some(d)) = (&ck.opt_d, &ck.discriminator) {
        w.adam("opt_d", opt, d);
    }
    let state = |o: &Adam<f32>| OptState {
        config: o.config,
        t: o.t,
    };
    let header = Header {
        step: ck.step,
        generator: ck.generator.config.clone(),
        discriminator: ck.discriminator.as_ref().map(|d| d.config.clone()),
        opt_g: ck.opt_g.as_ref().map(state),
        opt_d: ck.opt_d.as_ref().map(state),
        train_config: ck.train_config.clone(),
        best_val: ck.best_val,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + w.payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    Ok(out)
}

struct Reader<'a> {
    path: &'a Path,
    entries: std::collections::HashMap<String, (Vec<usize>, &'a [u8])>,
}

impl Reader<'_> {
    fn take(&mut self, name: &str, shape: &[usize], out: &mut [f32]) -> Result<()> {
        let (s, bytes) = self
            .entries
            .remove(name)
            .ok_or_else(|| corrupt(self.path, format!("missing tensor {name}")))?;
        if s != shape || bytes.len() != out.len() * 4 {
            return Err(corrupt(
                self.path,
                format!("tensor {name} has shape {s:?}, model expects {shape:?}"),
            ));
        }
        for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }

    fn params<P: Parameters<f32>>(&mut self, prefix: &str, p: &mut P) -> Result<()> {
        for t in p.tensors_mut() {
            self.take(&format!("{prefix}.{}", t.name), &t.shape, t.data)?;
        }
        Ok(())
    }

    fn adam<P: Parameters<f32>>(&mut self, prefix: &str, state: &OptState, p: &P) -> Result<Adam<f32>> {
        let mut opt = Adam::new(state.config, p);
        opt.t = state.t;
        let trainable = p.tensors().into_iter().filter(|t| t.trainable);
        for (i, t) in trainable.enumerate() {
            self.take(&format!("{prefix}.m.{}", t.name), &t.shape, &mut opt.m[i])?;
            self.take(&format!("{prefix}.v.{}", t.name), &t.shape, &mut opt.v[i])?;
        }
        Ok(opt)
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version.to_string(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(corrupt(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::json(path, e))?;
    let payload = &body[hlen..];
    let mut entries = std::collections::HashMap::new();
    for e in &header.tensors {
        let (start, end) = ((e.offset * 4) as usize, ((e.offset + e.len) * 4) as usize);
        if end > payload.len() || start > end {
            return Err(corrupt(path, format!("tensor {} exceeds payload", e.name)));
        }
        entries.insert(e.name.clone(), (e.shape.clone(), &payload[start..end]));
    }
    let mut r = Reader { path, entries };

    let mut generator = init_params::<f32>(&header.generator, 0)?;
    r.params("g", &mut generator)?;
    let discriminator = match &header.discriminator {
        Some(cfg) => {
            let mut d = d_init::<f32>(cfg, 0)?;
            r.params("d", &mut d)?;
            Some(d)
        }
        None => None,
    };
    let opt_g = header
        .opt_g
        .as_ref()
        .map(|s| r.adam("opt_g", s, &generator))
        .transpose()?;
    let opt_d = match (&header.opt_d, &discriminator) {
        (Some(s), Some(d)) => Some(r.adam("opt_d", s, d)?),
        (Some(_), None) => {
            return Err(corrupt(path, "optimizer state without discriminator"));
        }
        _ => None,
    };
    if let Some(name) = r.entries.keys().min() {
        return Err(corrupt(path, format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        step: header.step,
        generator,
        discriminator,
        opt_g,
        opt_d,
        train_config: header.train_config,
        best_val: header.best_val,
    })
}

/// Writes via a temporary sibling and rename, so readers never see a torn file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
