use proptest::prelude::*;
use tvfair::ckpt::{from_bytes, read_checkpoint, to_bytes, write_checkpoint, Checkpoint, CkptError, Dtype, Tensor};

fn dtype() -> impl Strategy<Value = Dtype> {
    prop_oneof![Just(Dtype::F32), Just(Dtype::F16), Just(Dtype::BF16)]
}

fn tensor() -> impl Strategy<Value = Tensor> {
    (dtype(), prop::collection::vec(0usize..5, 0..4)).prop_flat_map(|(dt, shape)| {
        let n: usize = shape.iter().product::<usize>() * dt.byte_width();
        prop::collection::vec(any::<u8>(), n)
            .prop_map(move |data| Tensor::new(dt, shape.clone(), data).unwrap())
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        prop::collection::btree_map("[a-zA-Z0-9_.]{1,12}", tensor(), 0..6),
        prop::collection::btree_map("[a-z]{1,6}", ".{0,10}", 0..3),
    )
        .prop_map(|(tensors, meta)| {
            let mut c = Checkpoint::from_tensors(tensors).unwrap();
            for (k, v) in meta {
                c.set_metadata(k, v);
            }
            c
        })
}

proptest! {
    #[test]
    fn write_read_is_identity(c in checkpoint()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        write_checkpoint(&c, &p).unwrap();
        let back = read_checkpoint(&p).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(std::fs::read(&p).unwrap(), to_bytes(&c));
    }

    #[test]
    fn serialization_is_deterministic(c in checkpoint()) {
        prop_assert_eq!(to_bytes(&c), to_bytes(&c.clone()));
        let n = u64::from_le_bytes(to_bytes(&c)[..8].try_into().unwrap());
        prop_assert_eq!(n % 8, 0);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = from_bytes(&bytes);
    }

    #[test]
    fn arbitrary_headers_never_panic(header in ".{0,120}", payload in prop::collection::vec(any::<u8>(), 0..32)) {
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&payload);
        let _ = from_bytes(&bytes);
    }

    #[test]
    fn flipped_bytes_never_panic(c in checkpoint(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = to_bytes(&c);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let _ = from_bytes(&bytes);
    }

    #[test]
    fn any_truncation_is_an_error(c in checkpoint(), cut in any::<prop::sample::Index>()) {
        let bytes = to_bytes(&c);
        let keep = cut.index(bytes.len());
        prop_assert!(from_bytes(&bytes[..keep]).is_err());
    }
}

#[test]
fn payload_order_other_than_lexicographic_loads() {
    // b's payload stored before a's
    let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&2.0f32.to_le_bytes());
    bytes.extend_from_slice(&1.0f32.to_le_bytes());
    let c = from_bytes(&bytes).unwrap();
    assert_eq!(c.get("a").unwrap().to_f32_vec(), vec![1.0]);
    assert_eq!(c.get("b").unwrap().to_f32_vec(), vec![2.0]);
}

#[test]
fn unsupported_dtype_names_the_tensor() {
    let header = r#"{"w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&[0; 8]);
    match from_bytes(&bytes) {
        Err(CkptError::UnsupportedDtype { name, dtype }) => {
            assert_eq!(name, "w");
            assert_eq!(dtype, "F64");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_checkpoint(dir.path().join("nope")), Err(CkptError::Io { .. })));
}
