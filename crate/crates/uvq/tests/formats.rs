//! File format round trips, rejection of damaged input, and agreement of
//! decoded models with in-memory inference.

use std::sync::OnceLock;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use uvq::format::{
    decode_bundle, decode_codebook, decode_model, encode_bundle, encode_codebook, encode_model,
    CodebookFile, CodebookMeta, CompressedFile, FormatError, WeightBundle,
};
use uvq::pipeline::{fit_codebook, run_compress, CodebookSpec, ZooMember};
use uvq_core::codebook::Codebook;
use uvq_core::data::Dataset;
use uvq_core::nn::{Mode, TinyNet, ZooNet};
use uvq_core::pnc::{CompressionOutcome, PncConfig};
use uvq_core::storage::{account, weight_mse, Sharing};
use uvq_core::train::score;

struct Fixture {
    members: Vec<ZooMember>,
    codebook: CodebookFile,
    outcomes: Vec<CompressionOutcome>,
}

fn member(kind: ZooNet, seed: u64) -> ZooMember {
    let mut net = kind.build(seed);
    net.round_to_f32();
    let dataset = Dataset::for_net(kind, seed);
    let float_score = score(&net, &dataset.test, dataset.task).unwrap();
    ZooMember {
        kind,
        net,
        data_seed: seed,
        dataset,
        float_score,
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let members: Vec<ZooMember> = ZooNet::ALL.iter().map(|&z| member(z, 7)).collect();
        let nets: Vec<&TinyNet> = members.iter().map(|m| &m.net).collect();
        let codebook = fit_codebook(
            &nets,
            &CodebookSpec {
                k: 64,
                seed: 7,
                ..CodebookSpec::default()
            },
        )
        .unwrap();
        let cfg = PncConfig {
            max_epochs: 2,
            candidates: 4,
            head_k: 16,
            seed: 7,
            ..PncConfig::default()
        };
        let outcomes = members
            .iter()
            .map(|m| run_compress(m, &codebook.codebook, &cfg).unwrap())
            .collect();
        Fixture {
            members,
            codebook,
            outcomes,
        }
    })
}

fn compressed_files() -> Vec<CompressedFile> {
    let f = fixture();
    f.outcomes
        .iter()
        .zip(&f.members)
        .flat_map(|(o, m)| {
            [false, true].map(|embed| CompressedFile {
                model: o.model.clone(),
                embedded: embed.then(|| f.codebook.codebook.clone()),
                data_seed: m.data_seed,
            })
        })
        .collect()
}

fn all_encodings() -> Vec<(&'static str, Vec<u8>)> {
    let f = fixture();
    let mut out: Vec<(&str, Vec<u8>)> = f
        .members
        .iter()
        .map(|m| ("bundle", encode_bundle(&m.bundle())))
        .collect();
    out.push(("codebook", encode_codebook(&f.codebook)));
    out.extend(
        compressed_files()
            .iter()
            .map(|c| ("model", encode_model(c))),
    );
    out
}

fn decode_any(kind: &str, bytes: &[u8]) -> Result<Vec<u8>, FormatError> {
    match kind {
        "bundle" => decode_bundle(bytes).map(|b| encode_bundle(&b)),
        "codebook" => decode_codebook(bytes).map(|c| encode_codebook(&c)),
        _ => decode_model(bytes).map(|m| encode_model(&m)),
    }
}

#[test]
fn bundles_round_trip() {
    for m in &fixture().members {
        let bytes = encode_bundle(&m.bundle());
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back, m.bundle(), "{}", m.net.name);
        assert_eq!(encode_bundle(&back), bytes);
    }
}

#[test]
fn codebook_round_trips() {
    let f = &fixture().codebook;
    let bytes = encode_codebook(f);
    let back = decode_codebook(&bytes).unwrap();
    assert_eq!(&back, f);
    assert_eq!(back.codebook.fingerprint(), f.codebook.fingerprint());
    assert_eq!(encode_codebook(&back), bytes);
}

#[test]
fn compressed_models_round_trip() {
    for file in compressed_files() {
        let bytes = encode_model(&file);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, file, "{}", file.model.net.name);
        assert_eq!(encode_model(&back), bytes);
    }
}

#[test]
fn decoded_models_run_bit_identically() {
    let f = fixture();
    for ((o, m), file) in f
        .outcomes
        .iter()
        .zip(&f.members)
        .zip(compressed_files().iter().step_by(2))
    {
        let back = decode_model(&encode_model(file)).unwrap();
        let x = &m.dataset.test.inputs;
        let expect = o.hard_net.forward(x, Mode::Eval).unwrap();
        let got = back
            .model
            .decode_and_run(Some(&f.codebook.codebook), x)
            .unwrap();
        assert_eq!(got.data(), expect.output().data(), "{}", m.net.name);
        assert_eq!(
            back.model.decode(Some(&f.codebook.codebook)).unwrap(),
            o.hard_net
        );
    }
}

#[test]
fn decoded_weight_error_matches_the_trace() {
    let f = fixture();
    for (o, m) in f.outcomes.iter().zip(&f.members) {
        let back = decode_model(&encode_model(&CompressedFile {
            model: o.model.clone(),
            embedded: None,
            data_seed: m.data_seed,
        }))
        .unwrap();
        let mse = weight_mse(&back.model, &m.net, Some(&f.codebook.codebook)).unwrap();
        assert!(
            (mse - o.trace.weight_mse).abs() <= 1e-12 * o.trace.weight_mse.max(1e-300),
            "{}",
            m.net.name
        );
        let before = account(
            &o.model,
            Some(&m.net),
            Some(&f.codebook.codebook),
            Sharing::Universal,
            1,
            1,
        )
        .unwrap();
        let after = account(
            &back.model,
            Some(&m.net),
            Some(&f.codebook.codebook),
            Sharing::Universal,
            1,
            1,
        )
        .unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn every_truncation_is_rejected() {
    for (kind, bytes) in all_encodings() {
        for len in 0..bytes.len() {
            match decode_any(kind, &bytes[..len]) {
                Err(FormatError::Truncated(_)) => {}
                // a cut inside the magic reads as a foreign file
                Err(FormatError::Magic { .. }) if len < 4 => {}
                other => panic!(
                    "{kind} cut at {len}/{}: {:?}",
                    bytes.len(),
                    other.map(|b| b.len())
                ),
            }
        }
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    for (kind, mut bytes) in all_encodings() {
        bytes.extend_from_slice(&[0, 0, 0]);
        assert_eq!(
            decode_any(kind, &bytes).unwrap_err(),
            FormatError::Trailing(3),
            "{kind}"
        );
    }
}

#[test]
fn foreign_magic_and_versions_are_rejected() {
    for (kind, bytes) in all_encodings() {
        let mut wrong = bytes.clone();
        wrong[0] ^= 0xff;
        assert!(
            matches!(decode_any(kind, &wrong), Err(FormatError::Magic { .. })),
            "{kind}"
        );
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(
            decode_any(kind, &newer).unwrap_err(),
            FormatError::Version(2),
            "{kind}"
        );
    }
    let f = fixture();
    assert!(decode_model(&encode_bundle(&f.members[0].bundle())).is_err());
}

#[test]
fn mismatched_codebooks_are_refused() {
    let f = fixture();
    let other = Codebook::new(64, 4, vec![0.25; 256]).unwrap();
    let model = &f.outcomes[0].model;
    assert!(model.decode(Some(&other)).is_err());
    assert!(model.decode(None).is_err());
}

fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x666d_7473),
        failure_persistence: None,
        ..Config::default()
    }
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn arbitrary_codebooks_round_trip(
        k in 1usize..40,
        d in 1usize..9,
        seed in any::<u64>(),
        sources in prop::collection::vec("[a-z0-9-]{0,12}", 0..5),
        bandwidth in 1e-4f64..1.0,
    ) {
        let mut r = uvq_core::rng::seeded(seed);
        let values: Vec<f64> = (0..k * d).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
        let file = CodebookFile {
            codebook: Codebook::new(k, d, values).unwrap(),
            meta: CodebookMeta { bandwidth, quota: seed % 1000, seed, sources },
        };
        let bytes = encode_codebook(&file);
        let back = decode_codebook(&bytes).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(encode_codebook(&back), bytes);
    }

    #[test]
    fn arbitrary_zoo_weights_round_trip(net in 0usize..4, seed in any::<u64>(), data_seed in any::<u64>()) {
        let mut n = ZooNet::ALL[net].build(seed);
        n.round_to_f32();
        let b = WeightBundle { net: n, data_seed };
        let bytes = encode_bundle(&b);
        prop_assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }
}
