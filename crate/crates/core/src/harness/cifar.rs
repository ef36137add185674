//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.

use std::path::Path;

use super::dataset::{Dataset, Provenance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const RECORD_LEN: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;

/// Center crop to `side` pixels, optionally collapsing RGB to luminance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CifarTransform {
    pub side: usize,
    pub grayscale: bool,
}

impl Default for CifarTransform {
    fn default() -> Self {
        Self {
            side: 16,
            grayscale: true,
        }
    }
}

impl CifarTransform {
    pub fn channels(&self) -> usize {
        if self.grayscale {
            1
        } else {
            3
        }
    }

    fn apply(&self, pixels: &[u8]) -> Tensor {
        let off = (CIFAR_SIDE - self.side) / 2;
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let px = |c: usize, r: usize, col: usize| f64::from(pixels[c * plane + (r + off) * CIFAR_SIDE + col + off]) / 255.0;
        let s = self.side;
        let data = if self.grayscale {
            (0..s * s)
                .map(|i| {
                    let (r, c) = (i / s, i % s);
                    0.299 * px(0, r, c) + 0.587 * px(1, r, c) + 0.114 * px(2, r, c)
                })
                .collect()
        } else {
            (0..3 * s * s)
                .map(|i| {
                    let (ch, rest) = (i / (s * s), i % (s * s));
                    px(ch, rest / s, rest % s)
                })
                .collect()
        };
        Tensor::new(vec![self.channels(), s, s], data).expect("transform shape")
    }
}

/// Parses an in-memory CIFAR-10 batch.
pub fn parse_cifar10(bytes: &[u8], transform: CifarTransform) -> Result<Dataset> {
    if transform.side == 0 || transform.side > CIFAR_SIDE {
        return Err(Error::Config(format!("crop side {} outside 1..={CIFAR_SIDE}", transform.side)));
    }
    if bytes.len() % RECORD_LEN != 0 {
        let complete = bytes.len() / RECORD_LEN * RECORD_LEN;
        return Err(Error::format(
            complete,
            format!("truncated record: {} of {RECORD_LEN} bytes", bytes.len() - complete),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD_LEN);
    let mut labels = Vec::with_capacity(bytes.len() / RECORD_LEN);
    for (k, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(k * RECORD_LEN, format!("label byte {label} > 9")));
        }
        labels.push(label);
        images.push(transform.apply(&rec[1..]));
    }
    Dataset::new(images, labels, CIFAR_CLASSES, Provenance::Cifar10)
}

pub fn load_cifar10(path: impl AsRef<Path>, transform: CifarTransform) -> Result<Dataset> {
    parse_cifar10(&std::fs::read(path)?, transform)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn single_record() {
        let d = parse_cifar10(&record(7, |_| 255), CifarTransform::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels, vec![7]);
        assert_eq!(d.images[0].shape(), &[1, 16, 16]);
        assert!(d.images[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn crop_is_centered_and_planes_split() {
        // Red plane encodes the row, green the column, blue zero.
        let bytes = record(0, |i| {
            let (plane, p) = (i / 1024, i % 1024);
            match plane {
                0 => (p / 32) as u8,
                1 => (p % 32) as u8,
                _ => 0,
            }
        });
        let t = CifarTransform {
            side: 16,
            grayscale: false,
        };
        let im = &parse_cifar10(&bytes, t).unwrap().images[0];
        assert_eq!(im.shape(), &[3, 16, 16]);
        assert_eq!(im.data()[0], 8.0 / 255.0);
        assert_eq!(im.data()[256 + 15], 23.0 / 255.0);
        assert_eq!(im.data()[512], 0.0);
    }

    #[test]
    fn many_records() {
        let mut bytes = Vec::new();
        for k in 0..10u8 {
            bytes.extend(record(k, |i| (i % 251) as u8));
        }
        let d = parse_cifar10(&bytes, CifarTransform::default()).unwrap();
        assert_eq!(d.labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn truncation_and_bad_label() {
        let err = parse_cifar10(&vec![0u8; 3072], CifarTransform::default()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let mut two = record(1, |_| 0);
        two.extend(record(10, |_| 0));
        let err = parse_cifar10(&two, CifarTransform::default()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: RECORD_LEN, .. }));
    }
}
