//! `TVTG` trigger file, little-endian:
//!
//! ```text
//! magic "TVTG" | version u8 | n u32 | N u32 | T[0..N] u32 ascending
//! | target u32 | lambda f64 | P over the footprint of T, f64 each
//! ```
//!
//! Footprint values follow patch order, and inside each patch the patch-vector
//! order (row-major pixels, channels last).

use super::{footprint_of, TriggerSpec};
use crate::autodiff::Tensor;
use crate::binio::{put_f64, put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

pub const TRIGGER_MAGIC: [u8; 4] = *b"TVTG";
pub const TRIGGER_VERSION: u8 = 1;

pub fn write_trigger(trigger: &TriggerSpec) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&TRIGGER_MAGIC);
    out.push(TRIGGER_VERSION);
    put_u32(&mut out, to_u32(trigger.config.n_patches(), "patch count")?);
    put_u32(&mut out, to_u32(trigger.budget(), "budget")?);
    for &t in &trigger.patches {
        put_u32(&mut out, to_u32(t, "patch index")?);
    }
    put_u32(&mut out, to_u32(trigger.target_class, "target class")?);
    put_f64(&mut out, trigger.lambda);
    for &i in trigger.footprint() {
        put_f64(&mut out, trigger.perturbation.data()[i]);
    }
    Ok(out)
}

/// Parses a trigger for a model of geometry `config`. The layer set is not
/// stored; it is restored as all layers.
pub fn read_trigger(bytes: &[u8], config: &ViTConfig) -> Result<TriggerSpec> {
    let mut r = ByteReader::new(bytes);
    r.magic(TRIGGER_MAGIC)?;
    let version = r.u8()?;
    if version != TRIGGER_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let at = r.pos();
    let n = r.u32()? as usize;
    if n != config.n_patches() {
        return Err(Error::format(at, format!("trigger for {n} patches, model has {}", config.n_patches())));
    }
    let at = r.pos();
    let budget = r.u32()? as usize;
    if budget == 0 || budget > n {
        return Err(Error::format(at, format!("budget {budget} outside 1..={n}")));
    }
    let mut patches = Vec::with_capacity(budget);
    for _ in 0..budget {
        let at = r.pos();
        let t = r.u32()? as usize;
        if t >= n || patches.last().is_some_and(|&prev| prev >= t) {
            return Err(Error::format(at, "patch indices must be ascending and in range"));
        }
        patches.push(t);
    }
    let target = r.u32()? as usize;
    let lambda = r.f64()?;
    let footprint = footprint_of(config, &patches)?;
    let mut p = Tensor::zeros(&config.image_shape());
    for &i in &footprint {
        p.data_mut()[i] = r.f64()?;
    }
    r.finish()?;
    TriggerSpec::new(*config, patches, p, target, lambda, (0..config.n_layers).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TriggerSpec {
        let cfg = ViTConfig::default();
        let patches = vec![3, 9];
        let mut p = Tensor::zeros(&cfg.image_shape());
        for (k, &i) in footprint_of(&cfg, &patches).unwrap().iter().enumerate() {
            p.data_mut()[i] = (k as f64 * 0.013).sin();
        }
        TriggerSpec::new(cfg, patches, p, 2, 0.5, vec![0, 1]).unwrap()
    }

    #[test]
    fn round_trip_and_layout() {
        let t = sample();
        let bytes = write_trigger(&t).unwrap();
        assert_eq!(&bytes[..4], b"TVTG");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 4 + 1 + 4 + 4 + 2 * 4 + 4 + 8 + 32 * 8);
        let back = read_trigger(&bytes, &t.config).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let t = sample();
        let mut bytes = write_trigger(&t).unwrap();
        let cfg = t.config;
        assert!(matches!(read_trigger(&bytes[..bytes.len() - 1], &cfg), Err(Error::Format { .. })));
        bytes[4] = 9;
        assert!(matches!(read_trigger(&bytes, &cfg), Err(Error::UnknownVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(read_trigger(&bytes, &cfg), Err(Error::BadMagic { .. })));
    }
}
