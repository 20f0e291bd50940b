use db2transf::dwt::{make_db2_filter, wavedec};
use db2transf::wavelet::{init_params, mldb_forward, output_length, LearnableWaveletParams};
use ndarray::{s, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.random_range(-2.0..2.0))
}

fn random_params(levels: usize, heads: usize, hd: usize, seed: u64) -> LearnableWaveletParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LearnableWaveletParams::zeros(levels, heads, hd);
    p.alpha.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    p.beta.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    p
}

/// Reference written as explicit (head, level, window) loops over plain vectors.
fn loop_reference(x: &Array3<f64>, p: &LearnableWaveletParams) -> Array3<f64> {
    let (batch, len, dim) = x.dim();
    let (levels, heads, hd) = (p.levels(), p.heads(), p.head_dim());
    let t_prime = output_length(len, levels).unwrap();
    let mut out = Array3::zeros((batch, t_prime, dim));
    for b in 0..batch {
        for h in 0..heads {
            for j in 0..hd {
                let col = h * hd + j;
                let mut seq: Vec<f64> = (0..len).map(|t| x[[b, t, col]]).collect();
                let mut details: Vec<Vec<f64>> = Vec::new();
                for l in 0..levels {
                    if seq.len() % 2 == 1 {
                        seq.push(seq[0]);
                    }
                    let n = seq.len();
                    let mut a = vec![0.0; n / 2];
                    let mut d = vec![0.0; n / 2];
                    for w in 0..n / 2 {
                        for k in 0..4 {
                            a[w] += p.alpha[[l, h, k, j]] * seq[(2 * w + k) % n];
                            d[w] += p.beta[[l, h, k, j]] * seq[(2 * w + k) % n];
                        }
                    }
                    details.push(d);
                    seq = a;
                }
                let mut row = 0;
                for v in seq.iter().chain(details.iter().flatten()) {
                    out[[b, row, col]] = *v;
                    row += 1;
                }
            }
        }
    }
    out
}

#[test]
fn classical_init_reproduces_wavedec_per_channel() {
    let f = make_db2_filter();
    for heads in [1, 2, 4] {
        for levels in [1, 2, 3] {
            for dim in [4, 8] {
                let x = random((2, 24, dim), (heads * 100 + levels * 10 + dim) as u64);
                let p = init_params(levels, heads, dim / heads, 0.0, 0).unwrap();
                let out = mldb_forward(x.view(), &p).unwrap();
                for b in 0..2 {
                    for c in 0..dim {
                        let col: Vec<f64> = x.slice(s![b, .., c]).to_vec();
                        let coeffs = wavedec(&col, &f, levels).unwrap();
                        let expected: Vec<f64> = coeffs.approx.iter().chain(coeffs.details.iter().flatten()).copied().collect();
                        for (t, e) in expected.iter().enumerate() {
                            assert!((out.mixed[[b, t, c]] - e).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn random_params_match_loop_reference() {
    let x = random((2, 16, 4), 1);
    let p = random_params(2, 2, 2, 2);
    let out = mldb_forward(x.view(), &p).unwrap();
    let reference = loop_reference(&x, &p);
    for (a, b) in out.mixed.iter().zip(reference.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn odd_lengths_match_loop_reference() {
    let x = random((1, 13, 6), 5);
    let p = random_params(3, 3, 2, 6);
    let out = mldb_forward(x.view(), &p).unwrap();
    assert_eq!(out.t_prime, output_length(13, 3).unwrap());
    let reference = loop_reference(&x, &p);
    for (a, b) in out.mixed.iter().zip(reference.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn length_law_over_range() {
    for len in 4..=128usize {
        for levels in 1..=db2transf::dwt::max_levels(len) {
            let p = init_params(levels, 1, 1, 0.0, 0).unwrap();
            let x = Array3::zeros((1, len, 1));
            let out = mldb_forward(x.view(), &p).unwrap();
            assert_eq!(out.t_prime, output_length(len, levels).unwrap());
            let last = out.level_layout.last().unwrap();
            assert_eq!(last.start + last.len, out.t_prime);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_linear_in_input(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = random_params(2, 2, 3, seed);
        let x = random((2, 20, 6), seed + 1);
        let y = random((2, 20, 6), seed + 2);
        let combo = &x * a + &y * b;
        let lhs = mldb_forward(combo.view(), &p).unwrap().mixed;
        let rhs = mldb_forward(x.view(), &p).unwrap().mixed * a + mldb_forward(y.view(), &p).unwrap().mixed * b;
        for (u, v) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn heads_are_independent(seed in 0u64..1000, head in 0usize..3) {
        let p = random_params(2, 3, 2, seed);
        let x = random((1, 12, 6), seed + 7);
        let mut zeroed = x.clone();
        zeroed.slice_mut(s![.., .., head * 2..head * 2 + 2]).fill(0.0);
        let before = mldb_forward(x.view(), &p).unwrap().mixed;
        let after = mldb_forward(zeroed.view(), &p).unwrap().mixed;
        for c in 0..6 {
            let same = before.slice(s![.., .., c]) == after.slice(s![.., .., c]);
            let in_head = c / 2 == head;
            prop_assert!(same != in_head || before.slice(s![.., .., c]).iter().all(|v| *v == 0.0));
        }
    }
}
