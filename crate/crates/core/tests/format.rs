mod common;

use kvcapsule::kvmodel::format::{decode, decode_kvd, encode_kvd, EntryMap, FormatError, KvTensor, KVC_MAGIC};
use kvcapsule::kvmodel::{encode_codec_bundle, validate_codec_bundle};
use kvcapsule::valuecodec::MeanPolicy;
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = KvTensor> {
    (prop::collection::vec(0u64..4, 0..=3), "[a-z.]{0,12}").prop_flat_map(|(shape, name)| {
        let len = shape.iter().product::<u64>() as usize;
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), len)
            .prop_map(move |data| KvTensor::new(name.clone(), shape.clone(), data))
    })
}

fn entries() -> impl Strategy<Value = Vec<KvTensor>> {
    prop::collection::vec(tensor(), 0..5).prop_map(|mut v| {
        for (i, t) in v.iter_mut().enumerate() {
            t.name = format!("{}#{i}", t.name);
        }
        v
    })
}

fn bits(e: &[KvTensor]) -> Vec<(String, Vec<u64>, Vec<u32>)> {
    e.iter().map(|t| (t.name.clone(), t.shape.clone(), t.data.iter().map(|v| v.to_bits()).collect())).collect()
}

proptest! {
    #[test]
    fn round_trip_is_bit_exact(e in entries()) {
        let bytes = encode_kvd(&e).unwrap();
        prop_assert_eq!(bits(&decode_kvd(&bytes).unwrap()), bits(&e));
    }

    #[test]
    fn every_truncation_is_an_error(e in entries(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_kvd(&e).unwrap();
        let at = cut.index(bytes.len());
        let err = decode_kvd(&bytes[..at]).unwrap_err();
        prop_assert!(err.offset().is_some_and(|o| o <= at), "{err}");
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = decode(&bytes);
        let _ = validate_codec_bundle(&bytes);
    }
}

#[test]
fn header_errors_carry_offsets() {
    let bytes = encode_kvd(&[KvTensor::new("a", vec![2], vec![1.0, 2.0])]).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(FormatError::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(decode(&bad).unwrap_err().offset(), Some(4));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(decode(&bad), Err(FormatError::TrailingBytes { count: 1, .. })));
    // dtype byte sits after the count, name length and 1-byte name
    let mut bad = bytes;
    bad[12 + 4 + 1] = 7;
    assert_eq!(decode(&bad).unwrap_err(), FormatError::UnknownDtype { code: 7, offset: 17 });
}

#[test]
fn duplicate_names_rejected() {
    let t = KvTensor::new("x", vec![], vec![0.5]);
    assert!(encode_kvd(&[t.clone(), t.clone()]).is_err());
    let mut bytes = encode_kvd(&[t.clone(), KvTensor::new("y", vec![], vec![0.5])]).unwrap();
    let at = bytes.len() - 4 - 2 - 1;
    bytes[at] = b'x';
    assert!(matches!(decode(&bytes), Err(FormatError::DuplicateName { .. })));
}

#[test]
fn kvc_is_not_kvd() {
    let mut r = common::rng(1);
    let bundle = common::random_bundle::<f32>(&mut r, &[0.5, 0.25], 8, 3, 2, MeanPolicy::Global, None);
    let bytes = encode_codec_bundle(&bundle).unwrap();
    assert_eq!(decode(&bytes).unwrap().0, KVC_MAGIC);
    assert!(matches!(decode_kvd(&bytes), Err(FormatError::BadMagic { .. })));
    let (back, meta) = validate_codec_bundle(&bytes).unwrap();
    assert_eq!(back, bundle);
    assert_eq!((meta.layers, meta.n, meta.kv_heads), (2, 8, 2));
    let entries = decode(&bytes).unwrap().1;
    assert!(EntryMap::new(&entries).require("nope").is_err());
}
