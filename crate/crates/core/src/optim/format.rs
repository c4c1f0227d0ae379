//! Little-endian weight file:
//!
//! ```text
//! "MANW" u32 version u32 count
//! count × { u16 name_len, name, u8 rank, u32 dims[rank], u8 dtype, payload }
//! u32 crc32 of everything before it
//! ```
//!
//! Per-channel vectors are stored with rank 1, conv weights with rank 4.
//! A checkpoint appends `"OPTS" u32 count`, the Adam moments framed the same
//! way (`m.<name>`, `v.<name>`), `u64 step`, the 32-byte sampling key and a
//! CRC32 of the whole file.

use std::path::Path;

use indexmap::IndexMap;

use super::AdamState;
use crate::arch::{Attention, BlockStyle, Ffn, LkaSpec, ManConfig, ModelState, Tail, Variant};
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"MANW";
pub const WEIGHT_VERSION: u32 = 1;
const OPTS_MAGIC: &[u8; 4] = b"OPTS";
const DTYPE_F32: u8 = 0;

fn put_frames(out: &mut Vec<u8>, tensors: &[(String, &Tensor<f32>)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let [n, c, h, w] = t.shape();
        let dims: &[usize] = if n == 1 && h == 1 && w == 1 { &[c] } else { &[n, c, h, w] };
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn put_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Serializes parameters in inventory order.
pub fn encode_weights(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * state.num_scalars() + 64 * state.params().len());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let frames: Vec<_> = state.params().iter().map(|(k, v)| (k.clone(), v)).collect();
    put_frames(&mut out, &frames);
    put_crc(&mut out);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn check_crc(&mut self) -> Result<()> {
        let expected = crc32fast::hash(&self.buf[..self.pos]);
        if self.u32()? != expected {
            return Err(Error::Format("CRC mismatch".into()));
        }
        Ok(())
    }

    fn frames(&mut self) -> Result<IndexMap<String, Tensor<f32>>> {
        let count = self.u32()? as usize;
        let mut out = IndexMap::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u8()? as usize;
            let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let shape: Shape = match dims[..] {
                [c] => [1, c, 1, 1],
                [n, c, h, w] => [n, c, h, w],
                _ => return Err(Error::Format(format!("tensor `{name}` has unsupported rank {rank}"))),
            };
            let dtype = self.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {dtype}")));
            }
            let numel: usize = shape.iter().product();
            let bytes = self.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if out.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
}

fn decode_with_reader(r: &mut Reader<'_>) -> Result<IndexMap<String, Tensor<f32>>> {
    if r.take(4)? != WEIGHT_MAGIC {
        return Err(Error::Format("bad magic, not a MAN weight file".into()));
    }
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tensors = r.frames()?;
    r.check_crc()?;
    Ok(tensors)
}

/// Parses a weight file into named tensors without interpreting them.
pub fn decode_weights(bytes: &[u8]) -> Result<IndexMap<String, Tensor<f32>>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let tensors = decode_with_reader(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after weights".into()));
    }
    Ok(tensors)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_weights(state: &ModelState, path: &Path) -> Result<()> {
    write(path, &encode_weights(state))
}

/// Loads weights, reconstructing the architecture from tensor names and
/// shapes. `branch_gelu` cannot be recovered and is set to `true`.
pub fn load_weights(path: &Path) -> Result<ModelState> {
    let tensors = decode_weights(&read(path)?)?;
    let config = infer_config(&tensors)?;
    ModelState::from_parts(config, tensors)
}

/// Loads weights that must match `config` exactly.
pub fn load_weights_for(path: &Path, config: &ManConfig) -> Result<ModelState> {
    ModelState::from_parts(config.clone(), decode_weights(&read(path)?)?)
}

fn shape_of(tensors: &IndexMap<String, Tensor<f32>>, name: &str) -> Result<Shape> {
    tensors
        .get(name)
        .map(Tensor::shape)
        .ok_or_else(|| Error::Format(format!("cannot infer architecture: missing `{name}`")))
}

/// Reconstructs the architecture a set of named tensors was built from.
pub fn infer_config(tensors: &IndexMap<String, Tensor<f32>>) -> Result<ManConfig> {
    let width = shape_of(tensors, "head.weight")?[0];
    let recon = shape_of(tensors, "recon.weight")?[0];
    let scale = (1..=8).find(|s| 3 * s * s == recon).ok_or_else(|| {
        Error::Format(format!("recon.weight has {recon} output channels, not 3·s²"))
    })?;
    let n_blocks = (0..).take_while(|i| tensors.keys().any(|k| k.starts_with(&format!("blocks.{i}.")))).count();
    let mut config = ManConfig::custom(n_blocks, width, scale);
    config.tail = if tensors.contains_key("tail.conv.weight") { Tail::Conv3x3 } else { Tail::Lkat };
    if n_blocks > 0 {
        let p = "blocks.0";
        if tensors.contains_key(&format!("{p}.body.conv0.weight")) {
            config.block_style = BlockStyle::Rcan;
        }
        let mut groups = Vec::new();
        for j in 0.. {
            let g = format!("{p}.mlka.group{j}");
            if !tensors.contains_key(&format!("{g}.dw.weight")) {
                break;
            }
            let a = shape_of(tensors, &format!("{g}.dw.weight"))?[2];
            let b = shape_of(tensors, &format!("{g}.dwd.weight"))?[2];
            groups.push(format!("{a}-{b}-1").parse::<LkaSpec>()?);
        }
        config.attention = match groups.len() {
            0 => return Err(Error::Format("cannot infer architecture: no attention groups".into())),
            1 => Attention::LkaSingle(groups[0]),
            _ if groups == config.groups => Attention::MlkaAll,
            _ => Attention::MlkaSubset(groups),
        };
        if let Ok(s) = shape_of(tensors, &format!("{p}.gsau.dw.weight")) {
            config.gsau_dw_kernel = s[2];
        } else if config.block_style == BlockStyle::Metaformer {
            let fc1 = shape_of(tensors, &format!("{p}.ffn.fc1.weight"))?[0];
            let fc2_in = shape_of(tensors, &format!("{p}.ffn.fc2.weight"))?[1];
            config.ffn = if tensors.contains_key(&format!("{p}.ffn.dw.weight")) {
                Ffn::Cff
            } else if fc2_in * 2 == fc1 {
                Ffn::Sg
            } else {
                Ffn::Mlp
            };
        }
    }
    for v in [Variant::Tiny, Variant::Light, Variant::Classical] {
        if v.dims() == Some((n_blocks, width)) {
            config.variant = v;
        }
    }
    config.validate().map_err(|e| Error::Format(format!("inferred architecture is invalid: {e}")))?;
    Ok(config)
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub adam: AdamState,
    /// Completed iterations.
    pub step: u64,
    pub rng_key: [u8; 32],
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = encode_weights(&self.state);
        out.extend_from_slice(OPTS_MAGIC);
        let mut frames = Vec::with_capacity(2 * self.adam.m.len());
        for (k, v) in &self.adam.m {
            frames.push((format!("m.{k}"), v));
        }
        for (k, v) in &self.adam.v {
            frames.push((format!("v.{k}"), v));
        }
        put_frames(&mut out, &frames);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_key);
        put_crc(&mut out);
        out
    }

    pub fn decode(bytes: &[u8], config: &ManConfig) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let state = ModelState::from_parts(config.clone(), decode_with_reader(&mut r)?)?;
        if r.take(4)? != OPTS_MAGIC {
            return Err(Error::Format("missing optimizer section, not a checkpoint".into()));
        }
        let mut adam = AdamState::new();
        for (name, t) in r.frames()? {
            let (moments, param) = match name.split_once('.') {
                Some(("m", p)) => (&mut adam.m, p),
                Some(("v", p)) => (&mut adam.v, p),
                _ => return Err(Error::Format(format!("unexpected optimizer tensor `{name}`"))),
            };
            if state.get(param).map(Tensor::shape).ok() != Some(t.shape()) {
                return Err(Error::Format(format!("optimizer tensor `{name}` does not match the model")));
            }
            moments.insert(param.to_string(), t);
        }
        let step = r.u64()?;
        adam.t = step;
        let rng_key: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        r.check_crc()?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { state, adam, step, rng_key })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path, config: &ManConfig) -> Result<Checkpoint> {
    Checkpoint::decode(&read(path)?, config)
}
