//! Byte-exact checks of the model file encoding against a hand-built image
//! and the committed fixture `fixtures/micro.vcnn`.

mod common;

use std::path::PathBuf;

use vcnn::modelio::{parse_model, reorder_kernels_offline, write_model};
use vcnn::conv::ConvSpec;

use common::{micro_model, offsets};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/micro.vcnn")
}

fn u32s(out: &mut Vec<u8>, vals: &[u32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// The micro model encoded field by field.
fn hand_encoded() -> Vec<u8> {
    let mut b = b"VCNN".to_vec();
    u32s(&mut b, &[1, 5]);
    b.extend_from_slice(b"micro");
    u32s(&mut b, &[3, 4, 4, 3]);
    f32s(&mut b, &[0.5, 0.25, 0.125]);
    u32s(&mut b, &[3]);
    // conv c1: kind 0, K S P in out, relu
    u32s(&mut b, &[2]);
    b.extend_from_slice(b"c1");
    u32s(&mut b, &[0, 3, 1, 1, 3, 4, 1]);
    // max pool p: kind 2, pool kind 0, window, stride
    u32s(&mut b, &[1]);
    b.extend_from_slice(b"p");
    u32s(&mut b, &[2, 0, 2, 2]);
    // softmax prob: kind 3
    u32s(&mut b, &[4]);
    b.extend_from_slice(b"prob");
    u32s(&mut b, &[3]);
    // shape table
    u32s(&mut b, &[4, 4, 4, 4, 2, 2, 16, 1, 1]);
    b.extend_from_slice(&592u64.to_le_bytes());
    // Kernels by hand: output m, chunk 0, tap (i, j), lanes 0..3 with lane 3
    // padding; plain element (m, l, i, j) sits at ((m*3 + l)*3 + i)*3 + j.
    for m in 0..4usize {
        for tap in 0..9usize {
            for lane in 0..4usize {
                let v = if lane < 3 {
                    ((m * 3 + lane) * 9 + tap) as f32 * 0.015625 - 54.0 * 0.015625
                } else {
                    0.0
                };
                f32s(&mut b, &[v]);
            }
        }
    }
    f32s(&mut b, &[0.5, -0.25, 0.0, 1.0]);
    b
}

#[test]
fn encoder_matches_hand_built_bytes() {
    let bytes = write_model(&micro_model());
    let expected = hand_encoded();
    assert_eq!(bytes.len(), offsets::FILE_LEN);
    assert_eq!(&bytes[..offsets::PAYLOAD], &expected[..offsets::PAYLOAD]);
    assert_eq!(bytes, expected);
}

#[test]
fn committed_fixture_is_byte_exact() {
    let bytes = write_model(&micro_model());
    if std::env::var_os("VCNN_BLESS").is_some() {
        std::fs::write(fixture(), &bytes).unwrap();
    }
    let committed = std::fs::read(fixture()).expect("fixture present");
    assert_eq!(committed, bytes);
    assert_eq!(parse_model(&committed).unwrap(), micro_model());
}

#[test]
fn offline_reorder_matches_payload() {
    let spec = ConvSpec::new(3, 1, 1, 3, 4);
    let plain: Vec<f32> = (0..spec.plain_kernel_len())
        .map(|i| (i as f32 - 54.0) * 0.015625)
        .collect();
    let chunked = reorder_kernels_offline(&spec, &plain);
    let bytes = write_model(&micro_model());
    let payload: Vec<f32> = bytes[offsets::PAYLOAD..offsets::PAYLOAD + chunked.len() * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(payload, chunked);
}
