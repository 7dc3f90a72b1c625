//! Index packing and storage accounting.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::Rng;
use uvq_core::storage::{index_bits, pack_assignments, packed_len, unpack_assignments, vq_ratio};
use uvq_core::{rng, Error};

fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x7374_6f72),
        failure_persistence: None,
        ..Config::default()
    }
}

/// Bit-at-a-time LSB-first writer.
fn naive_pack(indices: &[u32], bits: usize) -> Vec<u8> {
    let mut stream: Vec<bool> = Vec::new();
    for &v in indices {
        for b in 0..bits {
            stream.push(v >> b & 1 == 1);
        }
    }
    stream
        .chunks(8)
        .map(|byte| {
            byte.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &bit)| acc | (bit as u8) << i)
        })
        .collect()
}

#[test]
fn round_trip_for_every_power_of_two() {
    let mut r = rng::seeded(1);
    for e in 1..=16u32 {
        let k = 1usize << e;
        for count in [0, 1, 7, 8, 9, 333] {
            let idx: Vec<u32> = (0..count).map(|_| r.random_range(0..k as u32)).collect();
            let packed = pack_assignments(&idx, k).unwrap();
            assert_eq!(packed.len(), (count * e as usize).div_ceil(8));
            assert_eq!(
                packed,
                naive_pack(&idx, e as usize),
                "k=2^{e}, count {count}"
            );
            assert_eq!(unpack_assignments(&packed, count, k).unwrap(), idx);
        }
        // extremes
        let idx = vec![0, k as u32 - 1, 0, k as u32 - 1];
        assert_eq!(
            unpack_assignments(&pack_assignments(&idx, k).unwrap(), 4, k).unwrap(),
            idx
        );
    }
}

proptest! {
    #![proptest_config(config(512))]

    #[test]
    fn round_trip_for_any_k(k in 1usize..70_000, seed in any::<u64>(), count in 0usize..200) {
        let mut r = rng::seeded(seed);
        let idx: Vec<u32> = (0..count).map(|_| r.random_range(0..k as u32)).collect();
        let packed = pack_assignments(&idx, k).unwrap();
        prop_assert_eq!(packed.len(), packed_len(count, k));
        prop_assert_eq!(&packed, &naive_pack(&idx, index_bits(k) as usize));
        prop_assert_eq!(unpack_assignments(&packed, count, k).unwrap(), idx);
    }
}

#[test]
fn index_bits_is_ceil_log2() {
    assert_eq!(index_bits(1), 0);
    assert_eq!(index_bits(2), 1);
    assert_eq!(index_bits(3), 2);
    assert_eq!(index_bits(256), 8);
    assert_eq!(index_bits(257), 9);
    assert_eq!(index_bits(1 << 16), 16);
}

#[test]
fn out_of_range_and_wrong_length_are_rejected() {
    assert!(matches!(pack_assignments(&[4], 4), Err(Error::Encode(_))));
    let packed = pack_assignments(&[1, 2, 3], 4).unwrap();
    assert!(matches!(
        unpack_assignments(&packed, 5, 4),
        Err(Error::Decode(_))
    ));
    let mut longer = packed.clone();
    longer.push(0);
    assert!(matches!(
        unpack_assignments(&longer, 3, 4),
        Err(Error::Decode(_))
    ));
}

#[test]
fn unpack_rejects_indices_past_k() {
    // k = 5 uses three bits; the pattern 7 is not a valid index
    let bytes = naive_pack(&[7], 3);
    assert!(matches!(
        unpack_assignments(&bytes, 1, 5),
        Err(Error::Decode(_))
    ));
}

#[test]
fn weight_only_ratio() {
    assert!((vq_ratio(1 << 12, 4) - 32.0 / 3.0).abs() < 1e-12);
    assert_eq!(vq_ratio(1 << 16, 8), 16.0);
    assert_eq!(vq_ratio(1 << 16, 16), 32.0);
    assert_eq!(vq_ratio(1 << 8, 4), 16.0);
}
