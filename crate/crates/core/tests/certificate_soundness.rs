//! End-to-end soundness of solved certificates against explicit
//! finite-dimensional strategies.
//!
//! The unit tests of the `moment` module validate certificates against the
//! relaxation's own algebra; here the adversary is instantiated concretely
//! (states, measurements, side information) and the affine bound must
//! dominate the guessing probability of every constructed strategy at that
//! strategy's own statistics.

use qrx_core::fixtures::table_params;
use qrx_core::model::{gram_matrix, honest_score_distribution};
use qrx_core::moment::{build_moment_problem, default_solver_options, solve_pguess};
use qrx_core::oracle::{
    hill_climb, honest_strategy, random_strategy, uniformity_margin, SpanStates, StrategyAnsatz,
};
use qrx_core::ProtocolParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MARGIN_FLOOR: f64 = -1e-12;

#[test]
fn certificates_dominate_explicit_strategies() {
    let params = table_params();
    let layout = params.layout();
    let omega = honest_score_distribution(&params);
    let gram = gram_matrix(&params);
    let span = SpanStates::from_gram(gram.matrix());
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    for level in [1usize, 2] {
        let problem = build_moment_problem(&params, level, 2).unwrap();
        let bound = solve_pguess(&problem, &omega, &default_solver_options(), None).unwrap();

        let honest = honest_strategy(&params);
        let margin = uniformity_margin(&bound.certificate, &honest, &layout);
        assert!(margin >= MARGIN_FLOOR, "level {level}: honest margin {margin}");
        assert!(
            bound.certificate.bound_at(&omega) >= 0.5,
            "level {level}: bound below the honest guessing probability"
        );

        for k in 0..5 {
            let strategy = random_strategy(&params, 2, &mut rng);
            let margin = uniformity_margin(&bound.certificate, &strategy, &layout);
            assert!(margin >= MARGIN_FLOOR, "level {level}: random strategy {k} margin {margin}");
        }

        // An adversarial strategy tuned to violate the bound as hard as it
        // can; the certificate must still win.
        let ansatz =
            StrategyAnsatz::random(span.dim, 4, 2, params.bins_x, params.bins_p, &mut rng);
        let cert = bound.certificate.clone();
        let layout_ref = &layout;
        let (_, strategy, violation) = hill_climb(
            ansatz,
            &span,
            |s| s.guessing_probability() - cert.bound_at(&s.score_distribution(layout_ref).freq),
            0.3,
            60,
            &mut rng,
        );
        let margin = uniformity_margin(&bound.certificate, &strategy, &layout);
        assert!(margin >= MARGIN_FLOOR, "level {level}: climbed strategy margin {margin}");
        assert!(violation <= -MARGIN_FLOOR, "level {level}: positive violation {violation}");
    }
}

#[test]
fn relaxation_levels_are_ordered_at_physical_statistics() {
    let params = ProtocolParams {
        amplitude: 0.4,
        bin_half_range: 1.2,
        ..table_params()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p1 = build_moment_problem(&params, 1, 2).unwrap();
    let p2 = build_moment_problem(&params, 2, 2).unwrap();
    let opts = default_solver_options();

    for k in 0..4 {
        let strategy = random_strategy(&params, 2, &mut rng);
        let omega = strategy.score_distribution(&params.layout()).freq;
        let b1 = solve_pguess(&p1, &omega, &opts, None).unwrap();
        let b2 = solve_pguess(&p2, &omega, &opts, None).unwrap();
        // A deeper hierarchy level can only cut the feasible set; compare up
        // to both solves' convergence gaps.
        let slop = b1.solution.gap.abs() + b2.solution.gap.abs() + 1e-9;
        assert!(
            b2.value <= b1.value + slop,
            "statistics {k}: level 2 {} above level 1 {} (slop {slop:.3e})",
            b2.value,
            b1.value
        );
        // Either certificate must also dominate the strategy that generated
        // the statistics.
        for cert in [&b1.certificate, &b2.certificate] {
            let margin = uniformity_margin(cert, &strategy, &params.layout());
            assert!(margin >= MARGIN_FLOOR, "statistics {k}: margin {margin}");
        }
    }
}

#[test]
fn operating_point_guessing_bound_is_stable() {
    // Frozen loosely: the six-bin operating point's level-2 optimum. A
    // drift outside this band means the relaxation, the model statistics,
    // or the solver changed behavior.
    let params = table_params();
    let omega = honest_score_distribution(&params);
    let problem = build_moment_problem(&params, 2, 2).unwrap();
    let bound = solve_pguess(&problem, &omega, &default_solver_options(), None).unwrap();
    assert!(
        bound.value > 0.9980 && bound.value < 0.9993,
        "level-2 guessing bound {} left its frozen band",
        bound.value
    );
    assert!(bound.certificate.validity_margin <= 1e-6);
}
