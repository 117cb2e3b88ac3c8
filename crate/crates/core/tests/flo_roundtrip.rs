use pivdiff_core::flow_io::{decode_flo, encode_flo, read_flo, write_flo, FlowIoError, FLO_MAGIC};
use pivdiff_core::VelocityField;
use ndarray::Array2;
use proptest::prelude::*;
use std::path::Path;

fn field_strategy() -> impl Strategy<Value = VelocityField> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO, n),
            proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL, n),
        )
            .prop_map(move |(u, v)| {
                VelocityField::new(
                    Array2::from_shape_vec((h, w), u).unwrap(),
                    Array2::from_shape_vec((h, w), v).unwrap(),
                    1.0,
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn encode_decode_is_bit_exact(field in field_strategy()) {
        let bytes = encode_flo(&field).unwrap();
        prop_assert_eq!(bytes.len(), 12 + 8 * field.height() * field.width());
        let back = decode_flo(&bytes, Path::new("mem.flo")).unwrap();
        prop_assert_eq!(&back, &field);
        prop_assert_eq!(encode_flo(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_payloads_are_rejected(field in field_strategy(), cut in 1usize..8) {
        let bytes = encode_flo(&field).unwrap();
        let short = &bytes[..bytes.len() - cut];
        prop_assert!(
            matches!(decode_flo(short, Path::new("x.flo")), Err(FlowIoError::TruncatedFile { .. })),
            "cut {} bytes",
            cut
        );
    }
}

#[test]
fn reference_bytes_decode() {
    // magic, w=2, h=1, then interleaved (u, v) pairs
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&202021.25f32.to_le_bytes());
    bytes.extend_from_slice(&2i32.to_le_bytes());
    bytes.extend_from_slice(&1i32.to_le_bytes());
    for x in [1.0f32, -2.0, 3.5, 0.0] {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let f = decode_flo(&bytes, Path::new("ref.flo")).unwrap();
    assert_eq!(f.u(), &Array2::from_shape_vec((1, 2), vec![1.0, 3.5]).unwrap());
    assert_eq!(f.v(), &Array2::from_shape_vec((1, 2), vec![-2.0, 0.0]).unwrap());
}

#[test]
fn one_pixel_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("z.flo");
    write_flo(&VelocityField::zeros(1, 1), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 20);
    assert_eq!(f32::from_le_bytes(bytes[..4].try_into().unwrap()), 202021.25);
    assert_eq!(FLO_MAGIC, 202021.25);
    assert_eq!(read_flo(&p).unwrap(), VelocityField::zeros(1, 1));

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(&0f32.to_le_bytes());
    assert!(matches!(decode_flo(&bad, &p), Err(FlowIoError::MagicMismatch { .. })));

    let up = VelocityField::zeros(2, 2).with_coordinate_scale(2.0).unwrap();
    assert!(write_flo(&up, dir.path().join("up.flo")).is_err());
}
