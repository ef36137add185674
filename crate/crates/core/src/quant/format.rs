//! `TVBF` flip-record file, little-endian:
//!
//! ```text
//! magic "TVBF" | version u8 | entry count u64
//! | per entry: id length u16, id UTF-8 | element u64 | bit u8 | old/new u8
//! ```
//!
//! The old/new byte packs the old bit in bit 0 and the new bit in bit 1.

use super::{BitFlip, BitFlipRecord};
use crate::binio::{put_string_u16, put_u64, ByteReader};
use crate::error::{Error, Result};

pub const FLIPS_MAGIC: [u8; 4] = *b"TVBF";
pub const FLIPS_VERSION: u8 = 1;

pub fn write_flips(record: &BitFlipRecord) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&FLIPS_MAGIC);
    out.push(FLIPS_VERSION);
    put_u64(&mut out, record.entries.len() as u64);
    for e in &record.entries {
        put_string_u16(&mut out, &e.id)?;
        put_u64(&mut out, e.element as u64);
        out.push(e.bit);
        out.push(u8::from(e.old) | u8::from(e.new) << 1);
    }
    Ok(out)
}

pub fn read_flips(bytes: &[u8]) -> Result<BitFlipRecord> {
    let mut r = ByteReader::new(bytes);
    r.magic(FLIPS_MAGIC)?;
    let version = r.u8()?;
    if version != FLIPS_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = r.string_u16()?;
        let element = r.u64()? as usize;
        let at = r.pos();
        let bit = r.u8()?;
        if bit > 7 {
            return Err(Error::format(at, format!("bit position {bit} > 7")));
        }
        let at = r.pos();
        let packed = r.u8()?;
        if packed > 3 {
            return Err(Error::format(at, format!("bad old/new byte {packed:#04x}")));
        }
        entries.push(BitFlip {
            id,
            element,
            bit,
            old: packed & 1 == 1,
            new: packed & 2 == 2,
        });
    }
    r.finish()?;
    let record = BitFlipRecord { entries };
    record.validate()?;
    Ok(record)
}
