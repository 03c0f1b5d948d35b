//! Contract tests for the block-circulant operator algebra, checked against
//! dense materializations and an independent Jacobi SVD oracle.

mod common;

use common::{jacobi_singular_values, l2_diff, rand_bank, rand_vec, toeplitz_orthogonalize};
use firmconv::algebra::polar::{polar_decompose, PolarMethod};
use firmconv::algebra::{circ_apply, unit_filter_project, Filter, FilterBank, Geometry, Support};
use firmconv::dense::DenseMatrix;
use firmconv::manifold::stiefel_project;
use firmconv::rng::Rng;
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn structured_apply_matches_the_dense_matrix() {
    for (geometry, m1, m2, support, seed) in [
        (Geometry::OneD { m: 16 }, 3, 2, Support::Window { l: 2 }, 1),
        (Geometry::OneD { m: 9 }, 2, 3, Support::Full, 2),
        (Geometry::OneD { m: 8 }, 1, 1, Support::Window { l: 3 }, 3),
        (Geometry::TwoD { m: 5 }, 2, 2, Support::Window { l: 1 }, 4),
        (Geometry::TwoD { m: 4 }, 1, 2, Support::Window { l: 1 }, 5),
    ] {
        let bank = rand_bank(geometry, m1, m2, support, 1.0, seed);
        let dense = bank.to_dense().expect("small enough to materialize");
        let x = rand_vec(bank.input_len(), seed + 100);
        let fast = bank.apply_vec(&x);
        let slow = dense.matvec(&x).expect("shape");
        assert!(
            l2_diff(&fast, &slow) <= 1e-12 * (1.0 + common::l2(&slow)),
            "apply disagrees with dense for {geometry:?} {m1}x{m2}"
        );

        let y = rand_vec(bank.output_len(), seed + 200);
        let fast_t = bank.apply_adjoint_vec(&y);
        let slow_t = dense.matvec_t(&y).expect("shape");
        assert!(
            l2_diff(&fast_t, &slow_t) <= 1e-12 * (1.0 + common::l2(&slow_t)),
            "adjoint disagrees with dense for {geometry:?} {m1}x{m2}"
        );
    }
}

#[test]
fn transpose_is_the_adjoint_and_an_involution() {
    let bank = rand_bank(
        Geometry::OneD { m: 12 },
        3,
        2,
        Support::Window { l: 2 },
        1.0,
        7,
    );
    let tr = bank.transpose();
    assert_eq!(tr.m1(), 2);
    assert_eq!(tr.m2(), 3);
    assert_eq!(tr.transpose().taps(), bank.taps());

    let y = rand_vec(bank.output_len(), 8);
    let via_adjoint = bank.apply_adjoint_vec(&y);
    let via_transpose = tr.apply_vec(&y);
    assert!(l2_diff(&via_adjoint, &via_transpose) <= 1e-13);
}

#[test]
fn orthogonal_banks_have_unit_singular_values() {
    // dual route: the structured residual says "orthogonal"; an independent
    // Jacobi SVD of the dense matrix must agree
    for seed in [11u64, 12, 13] {
        let raw = rand_bank(Geometry::OneD { m: 10 }, 3, 2, Support::Full, 1.0, seed);
        let (point, _) = stiefel_project(&raw, PolarMethod::NewtonSchulz).expect("projection");
        let bank = point.applied();
        assert!(point.gram_residual() <= 1e-9);

        let tall = if bank.m1() >= bank.m2() {
            bank.clone()
        } else {
            bank.transpose()
        };
        let sv = jacobi_singular_values(&tall.to_dense().expect("small"));
        assert_eq!(sv.len(), tall.input_len());
        for s in sv {
            assert!(
                (s - 1.0).abs() <= 1e-9,
                "singular value {s} of a projected bank strays from 1"
            );
        }
    }
}

#[test]
fn gram_and_tap_residuals_vanish_together() {
    // the tap-correlation conditions are equivalent to T^T T = I when the
    // period is long enough for the lag window (m >= 4l + 1)
    let geometry = Geometry::OneD { m: 16 };
    let support = Support::Window { l: 3 };

    // orthogonal instance: lag-zero unit column
    let mut orth = FilterBank::zeros(geometry, 2, 1, support).expect("shape");
    orth.cell_mut(0, 0)[3] = 0.6;
    orth.cell_mut(1, 0)[3] = 0.8;
    assert!(orth.gram_residual() <= 1e-14);
    assert!(orth.filter_orthogonality_residual().expect("window, long period") <= 1e-14);

    // generic instances: both residuals strictly positive, dense route agrees
    for seed in [21u64, 22, 23] {
        let bank = rand_bank(geometry, 2, 1, support, 0.7, seed);
        let gram = bank.gram_residual();
        let tap = bank.filter_orthogonality_residual().expect("window");
        assert!(gram > 1e-3 && tap > 1e-3);

        let dense = bank.to_dense().expect("small");
        let dense_gram = {
            let t = dense.transpose().matmul(&dense).expect("shape");
            let mut acc = 0.0;
            for i in 0..t.rows() {
                for j in 0..t.cols() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    let r = t.at(i, j) - target;
                    acc += r * r;
                }
            }
            acc.sqrt()
        };
        assert!(
            (gram - dense_gram).abs() <= 1e-10 * (1.0 + dense_gram),
            "structured gram residual {gram} vs dense {dense_gram}"
        );
    }
}

#[test]
fn toeplitz_apply_matches_the_circulant_away_from_the_boundary() {
    let m = 20;
    let l = 2;
    let bank = rand_bank(
        Geometry::OneD { m },
        2,
        2,
        Support::Window { l },
        1.0,
        31,
    );
    let x = rand_vec(bank.input_len(), 32);
    let circ = bank.apply_vec(&x);
    let toep = bank.toeplitz_apply(&x).expect("windowed 1-d bank");
    for j in 0..2 {
        for p in 0..m {
            let a = circ[j * m + p];
            let b = toep[j * m + p];
            if p >= l && p < m - l {
                assert!(
                    (a - b).abs() <= 1e-12,
                    "interior row {p} of channel {j} differs: circulant {a}, toeplitz {b}"
                );
            }
        }
        // the truncation must actually differ somewhere near the edges
        let edge_diff: f64 = (0..m)
            .filter(|&p| p < l || p >= m - l)
            .map(|p| (circ[j * m + p] - toep[j * m + p]).abs())
            .sum();
        assert!(edge_diff > 1e-8, "toeplitz truncation changed nothing");
    }
}

#[test]
fn near_orthogonal_toeplitz_forces_a_near_orthogonal_circulant() {
    // single cheap instance; the acceptance suite runs the 20-bank version
    let m = 32;
    let l = 2; // l <= (m - 4) / 5
    let raw = rand_bank(
        Geometry::OneD { m },
        3,
        1,
        Support::Window { l },
        0.5,
        41,
    );
    let (bank, toeplitz_residual) = toeplitz_orthogonalize(&raw, 4000);
    assert!(
        toeplitz_residual <= 1e-8,
        "oracle left the toeplitz residual at {toeplitz_residual}"
    );
    assert!(
        bank.gram_residual() <= 1e-6,
        "circulant gram residual {} despite a tiny toeplitz residual",
        bank.gram_residual()
    );
}

#[test]
fn polar_factor_stays_in_the_block_circulant_algebra() {
    // dense Higham iteration on a block-circulant input; fold the output
    // back onto circulant diagonals and check nothing is lost
    let m = 8;
    let (m1, m2) = (2usize, 2usize);
    let bank = rand_bank(Geometry::OneD { m }, m1, m2, Support::Full, 1.0, 51);
    let dense = bank.to_dense().expect("small");
    let (u, _) = polar_decompose(&dense, PolarMethod::Higham).expect("invertible in practice");

    let mut folded = vec![0.0; m1 * m2 * m];
    for j in 0..m1 {
        for i in 0..m2 {
            for v in 0..m {
                let mut acc = 0.0;
                for c in 0..m {
                    acc += u.at(j * m + (c + v) % m, i * m + c);
                }
                folded[(j * m2 + i) * m + v] = acc / m as f64;
            }
        }
    }
    let refolded =
        FilterBank::new(Geometry::OneD { m }, m1, m2, Support::Full, folded).expect("shape");
    let back = refolded.to_dense().expect("small");
    assert!(
        u.frob_dist(&back) <= 1e-10,
        "polar factor has off-circulant energy {}",
        u.frob_dist(&back)
    );
}

#[test]
fn json_round_trip_preserves_taps_bit_exactly() {
    for (geometry, m1, m2, support) in [
        (Geometry::OneD { m: 12 }, 2, 3, Support::Window { l: 2 }),
        (Geometry::OneD { m: 7 }, 2, 2, Support::Full),
        (Geometry::TwoD { m: 4 }, 1, 2, Support::Window { l: 1 }),
    ] {
        let bank = rand_bank(geometry, m1, m2, support, 1.0, 61);
        let json = serde_json::to_string(&bank.to_json()).expect("serialize");
        let parsed: firmconv::algebra::BankJson = serde_json::from_str(&json).expect("parse");
        let back = FilterBank::from_json(&parsed).expect("valid");
        assert_eq!(back.taps(), bank.taps());
        assert_eq!(back.geometry(), bank.geometry());
        assert_eq!(back.support(), bank.support());
    }
}

#[test]
fn unit_projection_keeps_the_dominant_sign() {
    let filter = Filter {
        support: Support::Window { l: 2 },
        taps: vec![0.3, -0.9, 0.5, 0.0, 0.2],
    };
    let unit = unit_filter_project(&filter).expect("nonzero");
    assert_eq!(unit.taps, vec![0.0, -1.0, 0.0, 0.0, 0.0]);

    let zero = Filter {
        support: Support::Window { l: 1 },
        taps: vec![0.0; 3],
    };
    assert!(unit_filter_project(&zero).is_err());

    // a signed unit tap really is orthogonal: the circulant is a signed shift
    let x = rand_vec(9, 62);
    let shifted = circ_apply(
        &Filter {
            support: Support::Window { l: 1 },
            taps: vec![0.0, 0.0, -1.0],
        },
        &x,
    )
    .expect("apply");
    assert!((common::l2(&shifted) - common::l2(&x)).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_identity_holds_for_random_banks(
        seed in 0u64..1_000_000,
        m in 4usize..24,
        m1 in 1usize..4,
        m2 in 1usize..4,
        l_pick in 0usize..64,
        window in prop::bool::ANY,
    ) {
        let support = if window {
            let half = ((m - 1) / 2).max(1);
            Support::Window { l: 1 + l_pick % half }
        } else {
            Support::Full
        };
        let geometry = Geometry::OneD { m };
        let bank = rand_bank(geometry, m1, m2, support, 1.0, seed);
        let x = rand_vec(bank.input_len(), seed ^ 0x9e3779b9);
        let y = rand_vec(bank.output_len(), seed ^ 0x1234_5678);
        let lhs = dot(&bank.apply_vec(&x), &y);
        let rhs = dot(&x, &bank.apply_adjoint_vec(&y));
        let scale = 1.0 + lhs.abs().max(rhs.abs());
        prop_assert!(
            (lhs - rhs).abs() <= 1e-12 * scale,
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn gram_residual_is_transpose_safe_on_tall_banks(
        seed in 0u64..1_000_000,
        m in 5usize..20,
    ) {
        // a tall bank and the transpose of its transpose agree exactly
        let geometry = Geometry::OneD { m };
        let bank = rand_bank(geometry, 3, 2, Support::Window { l: 1 }, 0.8, seed);
        let double = bank.transpose().transpose();
        prop_assert_eq!(bank.gram_residual().to_bits(), double.gram_residual().to_bits());
    }

    #[test]
    fn scaling_scales_the_apply(
        seed in 0u64..1_000_000,
        c in -3.0f64..3.0,
    ) {
        let geometry = Geometry::OneD { m: 10 };
        let mut bank = rand_bank(geometry, 2, 2, Support::Window { l: 2 }, 1.0, seed);
        let x = rand_vec(bank.input_len(), seed ^ 0xabcdef);
        let before = bank.apply_vec(&x);
        bank.scale(c);
        let after = bank.apply_vec(&x);
        for (a, b) in after.iter().zip(&before) {
            prop_assert!((a - c * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
