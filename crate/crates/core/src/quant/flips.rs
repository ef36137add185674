use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::QuantizedCheckpoint;
use crate::error::{Error, Result};

/// One flipped bit of one stored weight code. Bit 0 is the least significant
/// bit of the two's-complement byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitFlip {
    pub id: String,
    pub element: usize,
    pub bit: u8,
    pub old: bool,
    pub new: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitFlipRecord {
    pub entries: Vec<BitFlip>,
}

impl BitFlipRecord {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every entry changes its bit, and no `(id, element, bit)` repeats.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.bit > 7 {
                return Err(Error::Parameter(format!("entry {i}: bit position {} > 7", e.bit)));
            }
            if e.old == e.new {
                return Err(Error::Parameter(format!("entry {i}: old and new bit are equal")));
            }
            if !seen.insert((e.id.as_str(), e.element, e.bit)) {
                return Err(Error::Parameter(format!(
                    "entry {i}: duplicate flip of {}[{}] bit {}",
                    e.id, e.element, e.bit
                )));
            }
        }
        Ok(())
    }

    /// Distinct modified elements.
    pub fn touched_elements(&self) -> usize {
        self.entries
            .iter()
            .map(|e| (e.id.as_str(), e.element))
            .collect::<HashSet<_>>()
            .len()
    }
}

/// Tuned parameter number, tuned bit number and the exact flip list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitDiff {
    pub tpn: usize,
    pub tbn: usize,
    pub record: BitFlipRecord,
}

fn check_compatible(clean: &QuantizedCheckpoint, other: &QuantizedCheckpoint) -> Result<()> {
    if clean.tensors.len() != other.tensors.len() {
        return Err(Error::Incompatible(format!(
            "{} vs {} tensors",
            clean.tensors.len(),
            other.tensors.len()
        )));
    }
    for ((ia, a), (ib, b)) in clean.tensors.iter().zip(&other.tensors) {
        if ia != ib {
            return Err(Error::Incompatible(format!("identifier {ia:?} vs {ib:?}")));
        }
        if a.shape != b.shape {
            return Err(Error::Incompatible(format!("shape of {ia:?}: {:?} vs {:?}", a.shape, b.shape)));
        }
        if a.scale.to_bits() != b.scale.to_bits() {
            return Err(Error::Incompatible(format!("scale of {ia:?}: {} vs {}", a.scale, b.scale)));
        }
    }
    Ok(())
}

/// Bit-exact difference between two checkpoints that share identifiers,
/// shapes and scales.
pub fn diff_bits(clean: &QuantizedCheckpoint, trojan: &QuantizedCheckpoint) -> Result<BitDiff> {
    check_compatible(clean, trojan)?;
    let mut tpn = 0;
    let mut entries = Vec::new();
    for ((id, a), b) in clean.tensors.iter().zip(trojan.tensors.values()) {
        for (element, (&ca, &cb)) in a.codes.iter().zip(&b.codes).enumerate() {
            let (ua, ub) = (ca as u8, cb as u8);
            let x = ua ^ ub;
            if x == 0 {
                continue;
            }
            tpn += 1;
            for bit in 0..8u8 {
                if x >> bit & 1 == 1 {
                    entries.push(BitFlip {
                        id: id.clone(),
                        element,
                        bit,
                        old: ua >> bit & 1 == 1,
                        new: ub >> bit & 1 == 1,
                    });
                }
            }
        }
    }
    Ok(BitDiff {
        tpn,
        tbn: entries.len(),
        record: BitFlipRecord { entries },
    })
}

/// Flips exactly the recorded bits of `clean`; every entry's old bit must
/// match what is stored.
pub fn apply_flips(clean: &QuantizedCheckpoint, record: &BitFlipRecord) -> Result<QuantizedCheckpoint> {
    record.validate()?;
    let mut out = clean.clone();
    for (index, e) in record.entries.iter().enumerate() {
        let stale = |msg: String| Error::StaleRecord {
            index,
            id: e.id.clone(),
            element: e.element,
            bit: e.bit,
            msg,
        };
        let t = out
            .tensors
            .get_mut(&e.id)
            .ok_or_else(|| stale("no such parameter".into()))?;
        let code = t
            .codes
            .get_mut(e.element)
            .ok_or_else(|| stale("element out of range".into()))?;
        let byte = *code as u8;
        let current = byte >> e.bit & 1 == 1;
        if current != e.old {
            return Err(stale(format!("stored bit is {}", current as u8)));
        }
        *code = (byte ^ (1 << e.bit)) as i8;
    }
    Ok(out)
}
