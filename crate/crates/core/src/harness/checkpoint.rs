//! `TVCK` checkpoint container, little-endian:
//!
//! ```text
//! magic "TVCK" | version u8
//! | config: image_side, channels, patch_size, embed_dim, n_heads, n_layers,
//!   mlp_dim, n_classes (u32 each)
//! | tensor count u32
//! | per tensor: id length u16, id UTF-8 | dtype u8 (0 = real64, 1 = int8)
//!   | ndim u8 | dims u32 × ndim | scale f64 (int8 only)
//!   | payload length u64 | payload (f64 or i8 values, row-major)
//! ```
//!
//! A file holds either real or int8 tensors, never a mix.

use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::binio::{put_f64, put_string_u16, put_u32, put_u64, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::quant::{QuantizedCheckpoint, QuantizedTensor};
use crate::vit::{ModelParams, ViTConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TVCK";
pub const CHECKPOINT_VERSION: u8 = 1;

const DTYPE_REAL: u8 = 0;
const DTYPE_INT8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Real(ModelParams),
    Quantized(QuantizedCheckpoint),
}

impl Checkpoint {
    pub fn config(&self) -> ViTConfig {
        match self {
            Checkpoint::Real(p) => p.config,
            Checkpoint::Quantized(q) => q.config,
        }
    }

    pub fn into_real(self) -> Result<ModelParams> {
        match self {
            Checkpoint::Real(p) => Ok(p),
            Checkpoint::Quantized(_) => Err(Error::Input("expected a real-valued checkpoint, found int8".into())),
        }
    }

    pub fn into_quantized(self) -> Result<QuantizedCheckpoint> {
        match self {
            Checkpoint::Quantized(q) => Ok(q),
            Checkpoint::Real(_) => Err(Error::Input("expected an int8 checkpoint, found real-valued".into())),
        }
    }
}

fn config_fields(c: &ViTConfig) -> [usize; 8] {
    [
        c.image_side,
        c.channels,
        c.patch_size,
        c.embed_dim,
        c.n_heads,
        c.n_layers,
        c.mlp_dim,
        c.n_classes,
    ]
}

fn put_header(out: &mut Vec<u8>, id: &str, dtype: u8, shape: &[usize]) -> Result<()> {
    put_string_u16(out, id)?;
    out.push(dtype);
    let ndim = u8::try_from(shape.len()).map_err(|_| Error::Parameter(format!("{id:?} has too many dimensions")))?;
    out.push(ndim);
    for &d in shape {
        put_u32(out, to_u32(d, "dimension")?);
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for v in config_fields(&ckpt.config()) {
        put_u32(&mut out, to_u32(v, "config field")?);
    }
    match ckpt {
        Checkpoint::Real(p) => {
            put_u32(&mut out, to_u32(p.len(), "tensor count")?);
            for (id, t) in p.iter() {
                put_header(&mut out, id, DTYPE_REAL, t.shape())?;
                put_u64(&mut out, (t.len() * 8) as u64);
                for &v in t.data() {
                    put_f64(&mut out, v);
                }
            }
        }
        Checkpoint::Quantized(q) => {
            put_u32(&mut out, to_u32(q.tensors.len(), "tensor count")?);
            for (id, t) in &q.tensors {
                put_header(&mut out, id, DTYPE_INT8, &t.shape)?;
                put_f64(&mut out, t.scale);
                put_u64(&mut out, t.codes.len() as u64);
                out.extend(t.codes.iter().map(|&c| c as u8));
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = ViTConfig {
        image_side: f[0],
        channels: f[1],
        patch_size: f[2],
        embed_dim: f[3],
        n_heads: f[4],
        n_layers: f[5],
        mlp_dim: f[6],
        n_classes: f[7],
    };
    let count = r.u32()? as usize;
    let mut real = IndexMap::new();
    let mut quant = IndexMap::new();
    for _ in 0..count {
        let id = r.string_u16()?;
        let at = r.pos();
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if ndim == 0 || n == 0 {
            return Err(Error::format(at, format!("{id:?} has an empty shape")));
        }
        match dtype {
            DTYPE_REAL => {
                let len = r.u64()? as usize;
                if len != n * 8 {
                    return Err(Error::CorruptPayload {
                        id,
                        expected: n * 8,
                        found: len,
                    });
                }
                let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                real.insert(id, Tensor::new(shape, data)?);
            }
            DTYPE_INT8 => {
                let scale = r.f64()?;
                let len = r.u64()? as usize;
                if len != n {
                    return Err(Error::CorruptPayload {
                        id,
                        expected: n,
                        found: len,
                    });
                }
                let codes = r.bytes(n)?.iter().map(|&b| b as i8).collect();
                quant.insert(id, QuantizedTensor::new(shape, codes, scale)?);
            }
            other => return Err(Error::format(at, format!("unknown dtype flag {other}"))),
        }
        if !real.is_empty() && !quant.is_empty() {
            return Err(Error::format(at, "checkpoint mixes real and int8 tensors"));
        }
    }
    r.finish()?;
    if quant.is_empty() {
        Ok(Checkpoint::Real(ModelParams::from_tensors(config, real)?))
    } else {
        config.validate()?;
        Ok(Checkpoint::Quantized(QuantizedCheckpoint { config, tensors: quant }))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_params;

    fn params() -> ModelParams {
        ModelParams::init(ViTConfig::default(), 9).unwrap()
    }

    #[test]
    fn real_round_trip_is_bitwise() {
        let c = Checkpoint::Real(params());
        let bytes = encode_checkpoint(&c).unwrap();
        assert_eq!(&bytes[..5], b"TVCK\x01");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), c);
    }

    #[test]
    fn int8_round_trip_keeps_codes_and_scales() {
        let c = Checkpoint::Quantized(quantize_params(&params()));
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = encode_checkpoint(&Checkpoint::Real(params())).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::UnknownVersion(7))));
        // First tensor: header 5 + config 32 + count 4, id "patch_embed.weight"
        // (2 + 18), dtype 1, ndim 1, two dims 8, then the payload length.
        let len_at = 5 + 32 + 4 + 2 + 18 + 1 + 1 + 8;
        bytes[len_at] ^= 0x08;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CorruptPayload { .. })));
    }

    #[test]
    fn truncation_is_format_error() {
        let bytes = encode_checkpoint(&Checkpoint::Real(params())).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    }
}
