//! Candidate search, logit initialization and reconstruction.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use uvq_core::assignment::{
    find_candidates, init_logits, softmax, CandidateMethod, CodebookSource, LayerAssignment,
    LogitInit, SubVectorGrid,
};
use uvq_core::codebook::Codebook;
use uvq_core::objective::{logit_grads_layer, reg_loss_layer};
use uvq_core::{rng, Tensor};

fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x6173_7367),
        failure_persistence: None,
        ..Config::default()
    }
}

fn random_codebook(k: usize, d: usize, r: &mut rng::Rng) -> Codebook {
    let normal = Normal::new(0.0, 0.3).unwrap();
    Codebook::new(k, d, (0..k * d).map(|_| normal.sample(r)).collect()).unwrap()
}

fn random_matrix(rows: usize, cols: usize, r: &mut rng::Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 0.3).unwrap();
    (0..rows * cols).map(|_| normal.sample(r)).collect()
}

/// Full sort of every codeword by (distance, index).
fn brute_candidates(sv: &[f64], valid: usize, cb: &Codebook, n: usize) -> Vec<u32> {
    let mut all: Vec<(f64, u32)> = (0..cb.k())
        .map(|i| {
            let c = cb.codeword(i);
            ((0..valid).map(|t| (sv[t] - c[t]).powi(2)).sum(), i as u32)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(n).map(|x| x.1).collect()
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn candidates_match_a_full_sort(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let (k, d) = (r.random_range(1..40), r.random_range(1..6));
        let cb = random_codebook(k, d, &mut r);
        let n = r.random_range(1..=k);
        let valid = r.random_range(1..=d);
        let sv: Vec<f64> = random_matrix(1, d, &mut r);
        prop_assert_eq!(find_candidates(&sv, valid, &cb, n).unwrap(), brute_candidates(&sv, valid, &cb, n));
    }

    #[test]
    fn initial_ratios_times_distance_are_constant(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let (k, d) = (r.random_range(2..64), r.random_range(1..9));
        let cb = random_codebook(k, d, &mut r);
        let (rows, cols) = (r.random_range(1..5), r.random_range(1..12));
        let w = random_matrix(rows, cols, &mut r);
        let n = r.random_range(1..=k);
        let la = LayerAssignment::build(
            0, &w, rows, cols, CodebookSource::Universal, &cb, n,
            CandidateMethod::Euclidean, LogitInit::InverseDistance, seed,
        ).unwrap();
        let grid = SubVectorGrid::from_matrix(&w, rows, cols, d).unwrap();
        for s in 0..la.count() {
            let sv = grid.sub_vector(s);
            let valid = la.valid_len(s);
            let products: Vec<f64> = la.candidates(s).iter().zip(la.ratios_of(s)).map(|(&a, rr)| {
                let c = cb.codeword(a as usize);
                rr * (0..valid).map(|t| (sv[t] - c[t]).powi(2)).sum::<f64>()
            }).collect();
            let (lo, hi) = products.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &p| (a.min(p), b.max(p)));
            prop_assume!(lo > 1e-12);
            prop_assert!((hi - lo) / hi < 1e-9, "spread {}", (hi - lo) / hi);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 1..20), c in -100.0f64..100.0) {
        let a = softmax(&z);
        let b = softmax(&z.iter().map(|v| v + c).collect::<Vec<_>>());
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_gradients_sum_to_zero(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let (k, d) = (r.random_range(2..16), r.random_range(1..5));
        let cb = random_codebook(k, d, &mut r);
        let (rows, cols) = (r.random_range(1..4), r.random_range(1..9));
        let w = random_matrix(rows, cols, &mut r);
        let n = r.random_range(1..=k);
        let la = LayerAssignment::build(
            0, &w, rows, cols, CodebookSource::Universal, &cb, n,
            CandidateMethod::Euclidean, LogitInit::InverseDistance, seed,
        ).unwrap();
        let g = random_matrix(rows, cols, &mut r);
        let dz = logit_grads_layer(&la, &g, &cb, r.random_range(0.0..2.0));
        for s in 0..la.count() {
            let sum: f64 = dz[s * n..(s + 1) * n].iter().sum();
            let scale: f64 = dz[s * n..(s + 1) * n].iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!(sum.abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn one_hot_soft_equals_hard(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let (k, d) = (r.random_range(2..16), r.random_range(1..5));
        let cb = random_codebook(k, d, &mut r);
        let (rows, cols) = (r.random_range(1..4), r.random_range(1..9));
        let w = random_matrix(rows, cols, &mut r);
        let n = r.random_range(1..=k);
        let mut la = LayerAssignment::build(
            0, &w, rows, cols, CodebookSource::Universal, &cb, n,
            CandidateMethod::Euclidean, LogitInit::InverseDistance, seed,
        ).unwrap();
        for s in 0..la.count() {
            let slot = r.random_range(0..n);
            la.freeze(s, slot);
        }
        prop_assert_eq!(la.reconstruct_soft(&cb), la.reconstruct_hard(&cb));
        prop_assert_eq!(reg_loss_layer(&la), 0.0);
        let g = random_matrix(rows, cols, &mut r);
        prop_assert!(logit_grads_layer(&la, &g, &cb, 1.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_candidate_is_nearest_codeword(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let (k, d) = (r.random_range(1..64), r.random_range(1..6));
        let cb = random_codebook(k, d, &mut r);
        let (rows, cols) = (r.random_range(1..5), r.random_range(1..13));
        let w = random_matrix(rows, cols, &mut r);
        let la = LayerAssignment::build(
            0, &w, rows, cols, CodebookSource::Universal, &cb, 1,
            CandidateMethod::Euclidean, LogitInit::InverseDistance, seed,
        ).unwrap();
        let grid = SubVectorGrid::from_matrix(&w, rows, cols, d).unwrap();
        for s in 0..la.count() {
            prop_assert_eq!(la.ratios_of(s), vec![1.0]);
            prop_assert_eq!(la.candidates(s)[0] as usize, cb.nearest(grid.sub_vector(s), la.valid_len(s)).0);
        }
        prop_assert_eq!(la.reconstruct_soft(&cb), la.reconstruct_hard(&cb));
    }

    #[test]
    fn grid_reassembles_the_matrix(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let (rows, cols, d) = (r.random_range(1..6), r.random_range(1..14), r.random_range(1..7));
        let w = random_matrix(rows, cols, &mut r);
        let t = Tensor::new(vec![rows, cols], w.clone()).unwrap();
        let grid = SubVectorGrid::decompose(&t, d).unwrap();
        prop_assert_eq!(grid.count(), rows * cols.div_ceil(d));
        let back = grid.reassemble();
        prop_assert_eq!(back.data(), &w[..]);
        for s in 0..grid.count() {
            let v = grid.valid_len(s);
            prop_assert!(grid.sub_vector(s)[v..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn init_logits_of_known_distances() {
    let z = init_logits(&[1.0, 2.0, 4.0]);
    let r = softmax(&z);
    let expect = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
    for (a, b) in r.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(z[2], 0.0);
}

#[test]
fn zero_distance_is_floored() {
    let z = init_logits(&[0.0, 1.0]);
    assert!(z.iter().all(|v| v.is_finite()));
    assert!(softmax(&z)[0] > 0.999_999);
}

#[test]
fn candidate_ties_go_to_the_lower_index() {
    let cb = Codebook::new(4, 1, vec![1.0, -1.0, 1.0, 3.0]).unwrap();
    assert_eq!(find_candidates(&[0.0], 1, &cb, 3).unwrap(), vec![0, 1, 2]);
    assert_eq!(find_candidates(&[2.0], 1, &cb, 3).unwrap(), vec![0, 2, 3]);
}

#[test]
fn uniform_init_gives_equal_ratios() {
    let mut r = rng::seeded(3);
    let cb = random_codebook(8, 2, &mut r);
    let w = random_matrix(2, 4, &mut r);
    for method in [
        CandidateMethod::Euclidean,
        CandidateMethod::Cosine,
        CandidateMethod::Random,
    ] {
        let la = LayerAssignment::build(
            0,
            &w,
            2,
            4,
            CodebookSource::Universal,
            &cb,
            4,
            method,
            LogitInit::Uniform,
            1,
        )
        .unwrap();
        for s in 0..la.count() {
            assert!(la.ratios_of(s).iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }
}
