use patchtroj::autodiff::Tensor;
use patchtroj::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use patchtroj::quant::{quantize_params, read_flips, write_flips, BitFlip, BitFlipRecord};
use patchtroj::trigger::{read_trigger, write_trigger, TriggerSpec};
use patchtroj::vit::{ModelParams, ViTConfig};
use patchtroj::Error;
use proptest::prelude::*;

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::init(ViTConfig::default(), 21).unwrap();
    for (name, ckpt) in [
        ("real.tvck", Checkpoint::Real(params.clone())),
        ("int8.tvck", Checkpoint::Quantized(quantize_params(&params))),
    ] {
        let path = dir.path().join(name);
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"TVCK");
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }
}

#[test]
fn trigger_layout_is_little_endian() {
    let cfg = ViTConfig::default();
    let mut p = Tensor::zeros(&cfg.image_shape());
    // Patch 5 covers rows 4..8, columns 4..8 of the 16×16 image.
    p.data_mut()[4 * 16 + 4] = 0.5;
    let t = TriggerSpec::new(cfg, vec![5], p, 2, 1.0, vec![0, 1]).unwrap();
    let bytes = write_trigger(&t).unwrap();
    assert_eq!(&bytes[..5], b"TVTG\x01");
    assert_eq!(&bytes[5..9], &16u32.to_le_bytes());
    assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
    assert_eq!(&bytes[13..17], &5u32.to_le_bytes());
    assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
    assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
    assert_eq!(&bytes[29..37], &0.5f64.to_le_bytes());
    assert_eq!(bytes.len(), 29 + 16 * 8);
    assert_eq!(read_trigger(&bytes, &cfg).unwrap(), t);
}

#[test]
fn flip_records_reject_corruption() {
    let rec = BitFlipRecord {
        entries: vec![BitFlip { id: "head.bias".into(), element: 3, bit: 7, old: true, new: false }],
    };
    let bytes = write_flips(&rec).unwrap();
    assert_eq!(read_flips(&bytes).unwrap(), rec);
    assert!(matches!(read_flips(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(read_flips(&bad), Err(Error::UnknownVersion(9))));
}

proptest! {
    #[test]
    fn truncated_checkpoints_never_panic(cut in 0usize..2000) {
        let params = ModelParams::init(ViTConfig::default(), 1).unwrap();
        let bytes = patchtroj::harness::checkpoint::encode_checkpoint(&Checkpoint::Quantized(quantize_params(&params))).unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(patchtroj::harness::checkpoint::decode_checkpoint(&bytes[..cut]).is_err());
    }
}
