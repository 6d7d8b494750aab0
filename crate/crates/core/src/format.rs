//! Little-endian binary containers for decoder weights (`RSWT`) and run maps (`RSMP`).
//!
//! Weight file layout:
//!
//! ```text
//! "RSWT" | version u32 = 1
//! n_stages u32 | seed_channels u32 | out_channels u32 | count u32 | stage_channels u32 × count
//! layer_count u32
//! per layer: name_len u32 | name (UTF-8) | rank u32 | dims u32 × rank | data f32 × Π dims
//! crc32 u32 over every preceding byte
//! ```
//!
//! The map file shares the layer encoding: `"RSMP" | version u32 = 1 | gamma f32 |
//! layer_count u32 | layers… | crc32`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::decoder::{Arch, DecoderWeights};
use crate::error::{Error, FormatError};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RSWT";
pub const MAPS_MAGIC: [u8; 4] = *b"RSMP";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_layer(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    buf.reserve(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn finish(mut buf: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

pub fn encode_weights(w: &DecoderWeights) -> Vec<u8> {
    let arch = w.arch();
    let mut buf = Vec::new();
    buf.extend_from_slice(&WEIGHTS_MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, arch.n_stages() as u32);
    put_u32(&mut buf, arch.seed_channels as u32);
    put_u32(&mut buf, arch.out_channels as u32);
    put_u32(&mut buf, arch.stage_channels.len() as u32);
    for &c in &arch.stage_channels {
        put_u32(&mut buf, c as u32);
    }
    put_u32(&mut buf, w.layers().len() as u32);
    for (name, t) in w.layers() {
        put_layer(&mut buf, name, t);
    }
    finish(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(what()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<(), FormatError> {
        let m = self.take(4, &|| "magic".into())?;
        let found = [m[0], m[1], m[2], m[3]];
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        let version = self.u32(&|| "version".into())?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn layer(&mut self, index: usize) -> Result<(String, Tensor), FormatError> {
        let len = self.u32(&|| format!("layer {index} name length"))? as usize;
        let raw = self.take(len, &|| format!("layer {index} name"))?;
        let name = String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Layer {
            name: format!("#{index}"),
            msg: "name is not UTF-8".into(),
        })?;
        let rank = self.u32(&|| format!("layer {name} rank"))? as usize;
        if rank > 4 {
            return Err(FormatError::Layer { name, msg: format!("rank {rank} exceeds 4") });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(&|| format!("layer {name} dims"))? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(bytes) = numel.and_then(|n| n.checked_mul(4)) else {
            return Err(FormatError::Layer { name, msg: format!("dims {dims:?} overflow") });
        };
        let raw = self.take(bytes, &|| format!("layer {name} data"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(&dims, data).map_err(|e| FormatError::Layer { name: name.clone(), msg: e.to_string() })?;
        Ok((name, t))
    }

    fn checksum(&mut self) -> Result<(), FormatError> {
        let computed = crc32fast::hash(&self.bytes[..self.pos]);
        let stored = self.u32(&|| "checksum".into())?;
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        if self.pos != self.bytes.len() {
            return Err(FormatError::TrailingBytes(self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<DecoderWeights, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(WEIGHTS_MAGIC)?;
    let n_stages = r.u32(&|| "arch n_stages".into())? as usize;
    let seed_channels = r.u32(&|| "arch seed_channels".into())? as usize;
    let out_channels = r.u32(&|| "arch out_channels".into())? as usize;
    let count = r.u32(&|| "arch stage count".into())? as usize;
    if count != n_stages {
        return Err(FormatError::Arch(format!("n_stages {n_stages} but {count} stage widths")));
    }
    let mut stage_channels = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        stage_channels.push(r.u32(&|| "arch stage_channels".into())? as usize);
    }
    let arch = Arch { seed_channels, stage_channels, out_channels };
    arch.validate().map_err(|e| FormatError::Arch(e.to_string()))?;
    let layer_count = r.u32(&|| "layer count".into())? as usize;
    let expected = arch.layer_shapes();
    if layer_count != expected.len() {
        return Err(FormatError::Arch(format!("{arch} needs {} layers, file has {layer_count}", expected.len())));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for (i, (ename, eshape)) in expected.into_iter().enumerate() {
        let (name, t) = r.layer(i)?;
        if name != ename || t.shape() != eshape.as_slice() {
            return Err(FormatError::Layer {
                name,
                msg: format!("shape {:?} inconsistent with arch (expected {ename} {eshape:?})", t.shape()),
            });
        }
        layers.push((name, t));
    }
    r.checksum()?;
    DecoderWeights::from_layers(arch, layers).map_err(|e| FormatError::Arch(e.to_string()))
}

pub fn save_weights(w: &DecoderWeights, path: &Path) -> Result<(), Error> {
    std::fs::write(path, encode_weights(w)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<DecoderWeights, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_weights(&bytes)?)
}

/// Final reflectance, illumination and gamma of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMaps {
    pub reflectance: Tensor,
    pub illumination: Tensor,
    pub gamma: f32,
}

pub fn encode_maps(m: &RunMaps) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAPS_MAGIC);
    put_u32(&mut buf, VERSION);
    buf.extend_from_slice(&m.gamma.to_le_bytes());
    put_u32(&mut buf, 2);
    put_layer(&mut buf, "reflectance", &m.reflectance);
    put_layer(&mut buf, "illumination", &m.illumination);
    finish(buf)
}

pub fn decode_maps(bytes: &[u8]) -> Result<RunMaps, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(MAPS_MAGIC)?;
    let g = r.take(4, &|| "gamma".into())?;
    let gamma = f32::from_le_bytes([g[0], g[1], g[2], g[3]]);
    let count = r.u32(&|| "layer count".into())?;
    if count != 2 {
        return Err(FormatError::Arch(format!("expected 2 maps, file has {count}")));
    }
    let (rn, reflectance) = r.layer(0)?;
    let (ln, illumination) = r.layer(1)?;
    if rn != "reflectance" || ln != "illumination" {
        return Err(FormatError::Layer { name: format!("{rn}/{ln}"), msg: "unexpected map names".into() });
    }
    r.checksum()?;
    Ok(RunMaps { reflectance, illumination, gamma })
}

pub fn save_maps(m: &RunMaps, path: &Path) -> Result<(), Error> {
    std::fs::write(path, encode_maps(m)).map_err(|e| Error::io(path, e))
}

pub fn load_maps(path: &Path) -> Result<RunMaps, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_maps(&bytes)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
