//! Solver checks against instances whose optima are known independently:
//! closed-form eigenvalue problems, linear programs in scalar blocks, and
//! randomly generated problems constructed backwards from a chosen
//! primal-dual optimal pair.

use nalgebra::DMatrix;
use num_complex::Complex;
use qrx_sdp::{Block, EqRow, InteriorPoint, SdpError, SdpProblem, SolverOptions, SparseHermitian, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

fn unit(dim: usize, r: usize, cc: usize, v: C64) -> SparseHermitian {
    let _ = dim;
    let mut m = SparseHermitian::new();
    m.push_sym(r, cc, v);
    m
}

fn sparse_from_dense(m: &DMatrix<C64>) -> SparseHermitian {
    let mut s = SparseHermitian::new();
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            if m[(i, j)].norm() > 0.0 {
                s.push_sym(i, j, m[(i, j)]);
            }
        }
    }
    s
}

fn random_hermitian(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<C64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    (&g + g.adjoint()) * c(0.5, 0.0)
}

fn random_unitary(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<C64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    g.qr().q()
}

fn min_eig(m: &DMatrix<C64>) -> f64 {
    nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// maximize X[0][0] over PSD 2x2 X with trace 1. The optimum is 1, attained
/// at the rank-one projector onto e0, and the equality multiplier equals the
/// optimal value.
#[test]
fn trace_one_psd_maximum_is_largest_diagonal() {
    let dim = 2;
    let blocks = vec![Block {
        dim,
        g0: DMatrix::zeros(dim, dim),
        terms: vec![
            (0, unit(dim, 0, 0, c(1.0, 0.0))),
            (1, unit(dim, 1, 1, c(1.0, 0.0))),
            (2, unit(dim, 0, 1, c(1.0, 0.0))),
            (3, unit(dim, 0, 1, c(0.0, 1.0))),
        ],
    }];
    let p = SdpProblem {
        n_vars: 4,
        blocks,
        eq_rows: vec![EqRow {
            coeffs: vec![(0, 1.0), (1, 1.0)],
            rhs: 1.0,
        }],
        obj: vec![1.0, 0.0, 0.0, 0.0],
        obj_const: 0.0,
    };
    let sol = InteriorPoint::new().solve(&p).expect("solve");

    assert!((sol.value - 1.0).abs() < 1e-7, "value {} != 1", sol.value);
    assert!((sol.y[0] - 1.0).abs() < 1e-6, "x00 {} != 1", sol.y[0]);
    assert!(sol.y[2].abs() < 1e-6 && sol.y[3].abs() < 1e-6, "off-diagonal not zero");
    assert!((sol.eq_multipliers[0] - 1.0).abs() < 1e-6, "trace multiplier {} != 1", sol.eq_multipliers[0]);
    assert!(sol.gap.abs() < 1e-7, "gap {} too large", sol.gap);
    assert!(min_eig(&sol.dual_matrices[0]) > -1e-9, "dual matrix not PSD");
}

/// Instances built backwards from a known optimal pair: pick orthogonal PSD
/// X* and S* (complementary column spaces), multipliers y*, data
/// C = sum y*[i] A_i + S*, b[i] = <A_i, X*>. Strong duality holds by
/// construction and the optimum of
///     maximize b.y  s.t.  C - sum y[i] A_i >= 0
/// is exactly b.y*.
#[test]
fn constructed_random_instances_recover_known_optimum() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5D90_0000 + seed);
        let dim = 10;
        let rank = 4;
        let n_vars = 8;

        let q = random_unitary(&mut rng, dim);
        let mut xstar = DMatrix::<C64>::zeros(dim, dim);
        for i in 0..rank {
            let col = q.column(i);
            let w = c(rng.random_range(0.4..2.0), 0.0);
            xstar += &col * col.adjoint() * w;
        }
        let mut sstar = DMatrix::<C64>::zeros(dim, dim);
        for i in rank..dim {
            let col = q.column(i);
            let w = c(rng.random_range(0.4..2.0), 0.0);
            sstar += &col * col.adjoint() * w;
        }

        let a_mats: Vec<DMatrix<C64>> = (0..n_vars)
            .map(|_| random_hermitian(&mut rng, dim))
            .collect();
        let ystar: Vec<f64> = (0..n_vars).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut c_mat = sstar.clone();
        for (ai, yi) in a_mats.iter().zip(&ystar) {
            c_mat += ai * c(*yi, 0.0);
        }
        let b: Vec<f64> = a_mats
            .iter()
            .map(|ai| {
                ai.iter()
                    .zip(xstar.iter())
                    .map(|(x, y)| (x * y.conj()).re)
                    .sum()
            })
            .collect();
        let expected: f64 = b.iter().zip(&ystar).map(|(x, y)| x * y).sum();

        let p = SdpProblem {
            n_vars,
            blocks: vec![Block {
                dim,
                g0: c_mat,
                terms: a_mats
                    .iter()
                    .enumerate()
                    .map(|(i, ai)| (i, sparse_from_dense(&(-ai))))
                    .collect(),
            }],
            eq_rows: vec![],
            obj: b.clone(),
            obj_const: 0.0,
        };
        let sol = InteriorPoint::new().solve(&p).expect("solve");

        let scale = 1.0 + expected.abs();
        assert!(
            (sol.value - expected).abs() < 1e-6 * scale,
            "seed {seed}: value {} vs constructed optimum {expected}",
            sol.value
        );
        assert!(
            (sol.bound - expected).abs() < 1e-6 * scale,
            "seed {seed}: bound {} vs constructed optimum {expected}",
            sol.bound
        );
        assert!(
            sol.bound - sol.value > -1e-7 * scale,
            "seed {seed}: weak duality violated: bound {} < value {}",
            sol.bound,
            sol.value
        );
        assert!(min_eig(&sol.dual_matrices[0]) > -1e-8, "seed {seed}: dual not PSD");
    }
}

/// Pinning a variable at its already-optimal value must not move the
/// optimum, and the dual objective has to keep certifying it. (The pin's
/// multiplier itself is not determined: adding the row degenerates the dual
/// face, so the solver is free to split the certificate between the
/// equality and the PSD multiplier.)
#[test]
fn pinning_a_variable_at_its_optimum_keeps_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    let dim = 8;
    let n_vars = 5;
    let q = random_unitary(&mut rng, dim);
    let mut xstar = DMatrix::<C64>::zeros(dim, dim);
    for i in 0..3 {
        xstar += q.column(i) * q.column(i).adjoint() * c(1.0, 0.0);
    }
    let mut sstar = DMatrix::<C64>::zeros(dim, dim);
    for i in 3..dim {
        sstar += q.column(i) * q.column(i).adjoint() * c(1.0, 0.0);
    }
    let a_mats: Vec<DMatrix<C64>> = (0..n_vars)
        .map(|_| random_hermitian(&mut rng, dim))
        .collect();
    let ystar: Vec<f64> = (0..n_vars).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut c_mat = sstar.clone();
    for (ai, yi) in a_mats.iter().zip(&ystar) {
        c_mat += ai * c(*yi, 0.0);
    }
    let b: Vec<f64> = a_mats
        .iter()
        .map(|ai| ai.iter().zip(xstar.iter()).map(|(x, y)| (x * y.conj()).re).sum())
        .collect();
    let expected: f64 = b.iter().zip(&ystar).map(|(x, y)| x * y).sum();

    let mut p = SdpProblem {
        n_vars,
        blocks: vec![Block {
            dim,
            g0: c_mat,
            terms: a_mats
                .iter()
                .enumerate()
                .map(|(i, ai)| (i, sparse_from_dense(&(-ai))))
                .collect(),
        }],
        eq_rows: vec![],
        obj: b,
        obj_const: 0.0,
    };
    let free = InteriorPoint::new().solve(&p).expect("free solve");
    assert!((free.value - expected).abs() < 1e-6 * (1.0 + expected.abs()));

    p.eq_rows.push(EqRow {
        coeffs: vec![(2, 1.0)],
        rhs: free.y[2],
    });
    let pinned = InteriorPoint::new().solve(&p).expect("pinned solve");
    assert!(
        (pinned.value - expected).abs() < 1e-6 * (1.0 + expected.abs()),
        "pinned value {} vs {}",
        pinned.value,
        expected
    );
    assert!(
        (pinned.bound - expected).abs() < 1e-6 * (1.0 + expected.abs()),
        "pinned bound {} no longer certifies {}",
        pinned.bound,
        expected
    );
}

/// Scalar blocks make the problem a linear program; maximize y0 + y1 under
/// y0 <= 3, y1 <= 2, y0 + y1 <= 4 has optimum 4.
#[test]
fn scalar_blocks_reduce_to_linear_program() {
    let one = |v: f64| {
        let mut m = SparseHermitian::new();
        m.push_sym(0, 0, c(v, 0.0));
        m
    };
    let scalar = |g: f64, terms: Vec<(usize, SparseHermitian)>| Block {
        dim: 1,
        g0: DMatrix::from_element(1, 1, c(g, 0.0)),
        terms,
    };
    let p = SdpProblem {
        n_vars: 2,
        blocks: vec![
            scalar(3.0, vec![(0, one(-1.0))]),
            scalar(2.0, vec![(1, one(-1.0))]),
            scalar(4.0, vec![(0, one(-1.0)), (1, one(-1.0))]),
        ],
        eq_rows: vec![],
        obj: vec![1.0, 1.0],
        obj_const: 0.5,
    };
    let sol = InteriorPoint::new().solve(&p).expect("solve");
    assert!((sol.value - 4.5).abs() < 1e-7, "LP optimum {} != 4.5", sol.value);
}

#[test]
fn inconsistent_equalities_are_rejected() {
    let mut b0 = SparseHermitian::new();
    b0.push_sym(0, 0, c(1.0, 0.0));
    let mut b1 = SparseHermitian::new();
    b1.push_sym(1, 1, c(1.0, 0.0));
    let p = SdpProblem {
        n_vars: 2,
        blocks: vec![Block {
            dim: 2,
            g0: DMatrix::identity(2, 2),
            terms: vec![(0, b0), (1, b1)],
        }],
        eq_rows: vec![
            EqRow { coeffs: vec![(0, 1.0), (1, 1.0)], rhs: 1.0 },
            EqRow { coeffs: vec![(0, 1.0), (1, 1.0)], rhs: 2.0 },
        ],
        obj: vec![1.0, 0.0],
        obj_const: 0.0,
    };
    match InteriorPoint::new().solve(&p) {
        Err(SdpError::Infeasible(_)) => {}
        other => panic!("expected Infeasible, got {other:?}"),
    }
}

/// maximize y with the single constraint 1 + y >= 0: unbounded above. The
/// solver must fail rather than return a number; both the explicit
/// unboundedness detection and the iteration cap are acceptable exits.
#[test]
fn unbounded_objective_does_not_converge() {
    let mut b = SparseHermitian::new();
    b.push_sym(0, 0, c(1.0, 0.0));
    let p = SdpProblem {
        n_vars: 1,
        blocks: vec![Block {
            dim: 1,
            g0: DMatrix::from_element(1, 1, c(1.0, 0.0)),
            terms: vec![(0, b)],
        }],
        eq_rows: vec![],
        obj: vec![1.0],
        obj_const: 0.0,
    };
    match InteriorPoint::new().solve(&p) {
        Err(SdpError::Unbounded(_)) | Err(SdpError::MaxIterations { .. }) => {}
        other => panic!("expected a non-convergence error, got {other:?}"),
    }
}

#[test]
fn iteration_cap_is_reported() {
    let mut b = SparseHermitian::new();
    b.push_sym(0, 0, c(-1.0, 0.0));
    let p = SdpProblem {
        n_vars: 1,
        blocks: vec![Block {
            dim: 1,
            g0: DMatrix::from_element(1, 1, c(3.0, 0.0)),
            terms: vec![(0, b)],
        }],
        eq_rows: vec![],
        obj: vec![1.0],
        obj_const: 0.0,
    };
    let solver = InteriorPoint::with_options(SolverOptions {
        max_iter: 1,
        ..SolverOptions::default()
    });
    match solver.solve(&p) {
        Err(SdpError::MaxIterations { iterations: 1, .. }) => {}
        other => panic!("expected MaxIterations, got {other:?}"),
    }
}

#[test]
fn validation_rejects_malformed_problems() {
    let mut b = SparseHermitian::new();
    b.push_sym(0, 0, c(1.0, 0.0));

    let mut g_bad = DMatrix::<C64>::identity(2, 2);
    g_bad[(0, 1)] = c(1.0, 0.0);
    g_bad[(1, 0)] = c(0.5, 0.0);
    let non_hermitian = SdpProblem {
        n_vars: 1,
        blocks: vec![Block { dim: 2, g0: g_bad, terms: vec![(0, b.clone())] }],
        eq_rows: vec![],
        obj: vec![1.0],
        obj_const: 0.0,
    };
    assert!(matches!(
        InteriorPoint::new().solve(&non_hermitian),
        Err(SdpError::InvalidProblem(_))
    ));

    let bad_index = SdpProblem {
        n_vars: 1,
        blocks: vec![Block {
            dim: 2,
            g0: DMatrix::identity(2, 2),
            terms: vec![(3, b.clone())],
        }],
        eq_rows: vec![],
        obj: vec![1.0],
        obj_const: 0.0,
    };
    assert!(matches!(
        InteriorPoint::new().solve(&bad_index),
        Err(SdpError::InvalidProblem(_))
    ));

    let oversize = SdpProblem {
        n_vars: 1,
        blocks: vec![Block {
            dim: 3,
            g0: DMatrix::identity(3, 3),
            terms: vec![(0, b)],
        }],
        eq_rows: vec![],
        obj: vec![1.0],
        obj_const: 0.0,
    };
    let tiny = InteriorPoint::with_options(SolverOptions {
        max_block_dim: 2,
        ..SolverOptions::default()
    });
    assert!(matches!(tiny.solve(&oversize), Err(SdpError::InvalidProblem(_))));
}

/// Warm-starting from the cold solution must land on the same optimum.
#[test]
fn warm_start_matches_cold_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x77AA);
    let dim = 6;
    let n_vars = 4;
    let q = random_unitary(&mut rng, dim);
    let mut xstar = DMatrix::<C64>::zeros(dim, dim);
    for i in 0..2 {
        xstar += q.column(i) * q.column(i).adjoint() * c(1.5, 0.0);
    }
    let mut sstar = DMatrix::<C64>::zeros(dim, dim);
    for i in 2..dim {
        sstar += q.column(i) * q.column(i).adjoint() * c(0.8, 0.0);
    }
    let a_mats: Vec<DMatrix<C64>> = (0..n_vars).map(|_| random_hermitian(&mut rng, dim)).collect();
    let ystar: Vec<f64> = (0..n_vars).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut c_mat = sstar;
    for (ai, yi) in a_mats.iter().zip(&ystar) {
        c_mat += ai * c(*yi, 0.0);
    }
    let b: Vec<f64> = a_mats
        .iter()
        .map(|ai| ai.iter().zip(xstar.iter()).map(|(x, y)| (x * y.conj()).re).sum())
        .collect();
    let p = SdpProblem {
        n_vars,
        blocks: vec![Block {
            dim,
            g0: c_mat,
            terms: a_mats
                .iter()
                .enumerate()
                .map(|(i, ai)| (i, sparse_from_dense(&(-ai))))
                .collect(),
        }],
        eq_rows: vec![],
        obj: b,
        obj_const: 0.0,
    };
    let cold = InteriorPoint::new().solve(&p).expect("cold solve");
    let warm = InteriorPoint::new().solve_from(&p, &cold.y).expect("warm solve");
    assert!(
        (cold.value - warm.value).abs() < 1e-7 * (1.0 + cold.value.abs()),
        "cold {} vs warm {}",
        cold.value,
        warm.value
    );
}
