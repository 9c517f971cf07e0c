mod common;

use common::*;
use proptest::prelude::*;
use rcf::datagen::{decode_features, decode_flo, encode_features, encode_flo, read_pgm, read_ppm, write_pgm, write_ppm, FeatureMap, Frame};
use rcf::model::Checkpoint;
use rcf::RcfError;

const FLO: &[u8] = include_bytes!("golden/field_2x3.flo");
const RCFF: &[u8] = include_bytes!("golden/features_2x1x3.rcff");
const CKPT: &[u8] = include_bytes!("golden/tiny.rcfk");

#[test]
fn golden_flo_decodes_to_expected_values() {
    let f = decode_flo(FLO).unwrap();
    assert_eq!((f.height, f.width), (2, 3));
    for p in 0..6 {
        assert_eq!(f.u[p], 0.5 * p as f64);
        assert_eq!(f.v[p], -(p as f64) + 0.25);
    }
    assert_eq!(encode_flo(&f).unwrap(), FLO);
}

#[test]
fn golden_rcff_decodes_to_expected_values() {
    let m = decode_features(RCFF).unwrap();
    assert_eq!((m.height, m.width, m.dim), (2, 1, 3));
    assert_eq!(m.data, vec![1.0, 0.0, -2.0, 0.5, 0.25, 3.0]);
    assert_eq!(encode_features(&m).unwrap(), RCFF);
}

#[test]
fn golden_checkpoint_decodes_to_expected_values() {
    let ck = Checkpoint::decode(CKPT).unwrap();
    assert_eq!(ck.object_channel, Some(1));
    assert_eq!(ck.config.channels, 2);
    assert_eq!(ck.config.lambda, 3.0);
    assert_eq!(ck.config.seed, 42);
    assert_eq!(ck.config.steps_stage1, 5);
    assert_eq!((ck.model.shape.input_height, ck.model.shape.input_width), (8, 8));
    assert_eq!(ck.optimizer.total_steps, 5);
    let mut first = Vec::new();
    ck.model.clone().visit_params(&mut |name, v, _| {
        if name == "block1.conv.weight" {
            first = v[..3].to_vec();
        }
    });
    assert_eq!(first, vec![0.17149338126182556, 0.4245237112045288, -0.06833819299936295]);
    assert_eq!(ck.encode(), CKPT);
}

#[test]
fn flo_rejects_bad_magic_and_truncation() {
    let mut bad = FLO.to_vec();
    bad[0] ^= 0xff;
    assert!(matches!(decode_flo(&bad), Err(RcfError::Format(_))));
    assert!(matches!(decode_flo(&FLO[..FLO.len() - 1]), Err(RcfError::Format(_))));
    assert!(matches!(decode_features(&RCFF[..RCFF.len() - 2]), Err(RcfError::Format(_))));
}

#[test]
fn image_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(3);
    let f = random_frame(&mut r, 5, 7);
    let quantized = Frame::new(5, 7, f.data.iter().map(|v| (v * 255.0).round() / 255.0).collect()).unwrap();
    write_ppm(&quantized, dir.path().join("a.ppm")).unwrap();
    let back = read_ppm(dir.path().join("a.ppm")).unwrap();
    assert!(back.data.iter().zip(&quantized.data).all(|(a, b)| (a - b).abs() < 1e-12));
    let m = random_mask(&mut r, 4, 6).threshold(0.5);
    write_pgm(&m, dir.path().join("m.pgm")).unwrap();
    assert_eq!(read_pgm(dir.path().join("m.pgm")).unwrap(), m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flo_roundtrip_is_byte_identical(seed in 0u64..10_000, h in 1usize..9, w in 1usize..9) {
        let f = random_flow(&mut rng(seed), h, w, 50.0);
        let bytes = encode_flo(&f).unwrap();
        prop_assert_eq!(encode_flo(&decode_flo(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn rcff_roundtrip_is_byte_identical(data in proptest::collection::vec(-100.0f64..100.0, 1..40), dim in 1usize..4) {
        let cells = data.len() / dim;
        prop_assume!(cells > 0);
        let m = FeatureMap::new(cells, 1, dim, data[..cells * dim].to_vec()).unwrap();
        let bytes = encode_features(&m).unwrap();
        prop_assert_eq!(encode_features(&decode_features(&bytes).unwrap()).unwrap(), bytes);
    }
}
