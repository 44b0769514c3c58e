//! Honest-device statistics: the four prepared coherent states, lossy
//! homodyne quadrature marginals, outcome binning, and the scoring rule that
//! turns a round's transcript into a category.
//!
//! Conventions fixed here and used everywhere else:
//! - Quadratures are in shot-noise units: the vacuum marginal is a standard
//!   normal, and a coherent state `|alpha>` measured at local-oscillator
//!   phase `theta` has mean `2 sqrt(eta) Re(alpha e^{-i theta})` after
//!   detection efficiency `eta` (loss is a beam splitter, so it scales the
//!   amplitude and preserves Gaussianity).
//! - States 0 and 1 are the X-displaced pair (phases 0 and pi), states 2 and
//!   3 the P-displaced pair (phases pi/2 and 3pi/2). The trusted basis input
//!   `y` selects the matching quadrature: y = 0 measures X (theta = 0),
//!   y = 1 measures P (theta = pi/2), and test rounds always pair a state
//!   with its own basis.

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::{FRAC_PI_2, PI};

use crate::completeness::normal_cdf;
use crate::params::ProtocolParams;
use crate::scores::{Basis, ScoreLabel, ScoreLayout};

/// Optical phases of the four prepared states, indexed by `x`.
pub const STATE_PHASES: [f64; 4] = [0.0, PI, FRAC_PI_2, 3.0 * FRAC_PI_2];

/// Basis input that a test round pairs with state `x`.
pub fn expected_y(x: usize) -> bool {
    assert!(x < 4, "state index {x} out of range");
    x >= 2
}

/// Local-oscillator phase selected by the basis input.
pub fn lo_phase(y: bool) -> f64 {
    if y {
        FRAC_PI_2
    } else {
        0.0
    }
}

/// Complex amplitudes of the four prepared states.
pub fn prepared_states(amp: f64) -> [Complex64; 4] {
    STATE_PHASES.map(|phi| Complex64::from_polar(amp, phi))
}

/// Inner product of two coherent states,
/// `exp(-|alpha|^2/2 - |beta|^2/2 + conj(alpha) beta)`.
pub fn coherent_overlap(alpha: Complex64, beta: Complex64) -> Complex64 {
    let exponent = Complex64::new(-0.5 * (alpha.norm_sqr() + beta.norm_sqr()), 0.0)
        + alpha.conj() * beta;
    exponent.exp()
}

/// Pairwise overlaps of the prepared states. The states are linearly
/// independent for any positive amplitude but nearly parallel at the small
/// amplitudes used here, so the matrix is ill-conditioned rather than
/// singular; consumers that factor it must tolerate tiny negative
/// eigenvalues from rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    mat: DMatrix<Complex64>,
}

impl GramMatrix {
    pub fn from_states(states: &[Complex64]) -> Self {
        let d = states.len();
        let mat = DMatrix::from_fn(d, d, |i, j| coherent_overlap(states[i], states[j]));
        Self { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.mat[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.mat
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.mat
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

/// Gram matrix of the four states at the configured amplitude.
pub fn gram_matrix(params: &ProtocolParams) -> GramMatrix {
    GramMatrix::from_states(&prepared_states(params.amplitude))
}

/// Mean of the quadrature marginal for state `x` at LO phase `theta`.
pub fn quadrature_mean(x: usize, theta: f64, params: &ProtocolParams) -> f64 {
    let alpha = Complex64::from_polar(params.amplitude, STATE_PHASES[x]);
    2.0 * params.eta.sqrt() * (alpha * Complex64::from_polar(1.0, -theta)).re
}

/// Density of the homodyne outcome for state `x` at LO phase `theta`:
/// a unit-variance Gaussian centered on [`quadrature_mean`].
pub fn quadrature_pdf(x: usize, theta: f64, q: f64, params: &ProtocolParams) -> f64 {
    let m = quadrature_mean(x, theta, params);
    (-0.5 * (q - m) * (q - m)).exp() / (2.0 * PI).sqrt()
}

/// Interior bin boundaries for a basis read out into `2m` bins: the window
/// `(-L, L)` is split into `2m - 2` equal intervals and the two outer bins
/// extend to infinity. With a single bin per sign the window degenerates and
/// the boundary sits at 0.
pub fn bin_edges(m: usize, half_range: f64) -> Vec<f64> {
    assert!(m >= 1, "need at least one bin per sign");
    assert!(half_range > 0.0, "bin window must have positive width");
    if m == 1 {
        return vec![0.0];
    }
    let intervals = (2 * m - 2) as f64;
    (0..2 * m - 1)
        .map(|i| half_range * (2.0 * i as f64 / intervals - 1.0))
        .collect()
}

/// Position of signed bin `b` in a probability vector ordered
/// `-m ..= -1, +1 ..= +m`.
pub fn signed_bin_position(b: i32, m: usize) -> usize {
    let m = m as i32;
    assert!(b != 0 && b.abs() <= m, "bin {b} outside +-{m}");
    if b < 0 {
        (b + m) as usize
    } else {
        (b + m - 1) as usize
    }
}

/// Inverse of [`signed_bin_position`].
pub fn position_to_signed_bin(pos: usize, m: usize) -> i32 {
    assert!(pos < 2 * m, "position {pos} outside 2m = {}", 2 * m);
    let b = pos as i32 - m as i32;
    if b < 0 {
        b
    } else {
        b + 1
    }
}

/// Bin probabilities for a unit-variance Gaussian outcome with the given
/// mean, ordered `-m ..= -1, +1 ..= +m`.
pub fn bin_probabilities_for_mean(mean: f64, m: usize, half_range: f64) -> Vec<f64> {
    let edges = bin_edges(m, half_range);
    let mut cdf = Vec::with_capacity(edges.len() + 2);
    cdf.push(0.0);
    cdf.extend(edges.iter().map(|&e| normal_cdf(e - mean)));
    cdf.push(1.0);
    cdf.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Honest-device bin probabilities for state `x` measured in basis `y`.
pub fn bin_probabilities(x: usize, y: bool, params: &ProtocolParams) -> Vec<f64> {
    let m = if y { params.m_p() } else { params.m_x() };
    let mean = quadrature_mean(x, lo_phase(y), params);
    bin_probabilities_for_mean(mean, m, params.bin_half_range)
}

/// Signed score of a test round before any category merging. Odd-indexed
/// states are displaced opposite to their even partner, so their outcome
/// sign flips; both states of a pair then feed the same score.
pub fn raw_score(x: usize, b: i32) -> (Basis, i32) {
    assert!(x < 4, "state index {x} out of range");
    let basis = if x < 2 { Basis::X } else { Basis::P };
    let signed = if x % 2 == 0 { b } else { -b };
    (basis, signed)
}

/// Category of one completed round. Generation rounds carry no score;
/// test rounds must pair the state with its own basis.
pub fn assign_score(t: bool, x: usize, y: bool, b: i32, layout: &ScoreLayout) -> ScoreLabel {
    if !t {
        return ScoreLabel::Bot;
    }
    assert_eq!(
        y,
        expected_y(x),
        "test round measured state {x} in the wrong basis"
    );
    let (basis, signed) = raw_score(x, b);
    layout.labels()[layout.category_of(basis, signed)].clone()
}

/// For each category (in layout order), the `(x, y, b)` combinations that
/// score into it. Every state/bin pair appears in exactly one category, and
/// each combination carries implicit weight 1/4 from the uniform state
/// choice on test rounds.
pub fn score_terms(layout: &ScoreLayout, m_x: usize, m_p: usize) -> Vec<Vec<(usize, bool, i32)>> {
    let mut terms = vec![Vec::new(); layout.len()];
    for x in 0..4 {
        let y = expected_y(x);
        let m = if y { m_p } else { m_x };
        for pos in 0..2 * m {
            let b = position_to_signed_bin(pos, m);
            let (basis, signed) = raw_score(x, b);
            terms[layout.category_of(basis, signed)].push((x, y, b));
        }
    }
    terms
}

/// Honest category probabilities (conditional on a test round), in layout
/// order. Sums to 1 up to CDF rounding.
pub fn honest_score_distribution(params: &ProtocolParams) -> Vec<f64> {
    let layout = params.layout();
    let mut omega = vec![0.0; layout.len()];
    for x in 0..4 {
        let y = expected_y(x);
        let m = if y { params.m_p() } else { params.m_x() };
        let probs = bin_probabilities(x, y, params);
        for (pos, p) in probs.iter().enumerate() {
            let b = position_to_signed_bin(pos, m);
            let (basis, signed) = raw_score(x, b);
            omega[layout.category_of(basis, signed)] += 0.25 * p;
        }
    }
    omega
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::LayoutKind;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table_params() -> ProtocolParams {
        ProtocolParams {
            bin_half_range: 1.0066977406735522,
            ..ProtocolParams::default()
        }
    }

    #[test]
    fn overlap_of_identical_states_is_one() {
        let a = Complex64::new(0.3, -0.7);
        let o = coherent_overlap(a, a);
        assert_relative_eq!(o.re, 1.0, max_relative = 1e-15);
        assert!(o.im.abs() < 1e-15);
    }

    #[test]
    fn overlap_reference_values() {
        let amp = 0.0672;
        let opposite = coherent_overlap(Complex64::new(amp, 0.0), Complex64::new(-amp, 0.0));
        assert_relative_eq!(opposite.re, 0.9910089831109940, max_relative = 1e-14);
        assert!(opposite.im.abs() < 1e-16);

        let quarter = coherent_overlap(Complex64::new(amp, 0.0), Complex64::new(0.0, amp));
        assert_relative_eq!(quarter.norm(), 0.9954943410743197, max_relative = 1e-14);
        assert_relative_eq!(quarter.arg(), 0.00451584, max_relative = 1e-12);
    }

    #[test]
    fn gram_matrix_reference_entries() {
        let params = ProtocolParams::default();
        let g = gram_matrix(&params);
        for i in 0..4 {
            assert_relative_eq!(g.entry(i, i).re, 1.0, max_relative = 1e-15);
        }
        // States 0 and 1 are the antipodal X pair; 0 and 2 differ by a
        // quarter turn.
        assert_relative_eq!(g.entry(0, 1).re, 0.9910089831109940, max_relative = 1e-14);
        assert!(g.entry(0, 1).im.abs() < 1e-16);
        assert_relative_eq!(g.entry(0, 2).re, 0.9954841906276419, max_relative = 1e-14);
        assert_relative_eq!(g.entry(0, 2).im, 0.0044954778859223, max_relative = 1e-10);
    }

    #[test]
    fn gram_matrix_at_zero_amplitude_is_all_ones() {
        let g = GramMatrix::from_states(&prepared_states(0.0));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.entry(i, j), Complex64::new(1.0, 0.0));
            }
        }
    }

    #[test]
    fn gram_matrices_are_hermitian_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6A21);
        for _ in 0..1000 {
            let amp: f64 = rng.random_range(0.0..2.0);
            let g = GramMatrix::from_states(&prepared_states(amp));
            for i in 0..4 {
                for j in 0..4 {
                    let d = g.entry(i, j) - g.entry(j, i).conj();
                    assert!(d.norm() < 1e-14);
                }
            }
            assert!(g.min_eigenvalue() >= -1e-12, "amp {amp}");
        }
    }

    #[test]
    fn quadrature_means_match_displacements() {
        let params = ProtocolParams::default();
        // X-displaced state read out in P has no displacement to see.
        assert!(quadrature_mean(0, lo_phase(true), &params).abs() < 1e-15);
        assert_relative_eq!(
            quadrature_mean(0, lo_phase(false), &params),
            0.1117218947207753,
            max_relative = 1e-14
        );
        // P pair: state 2 shows +d in P, state 3 shows -d.
        let d = 0.1117218947207753;
        assert_relative_eq!(quadrature_mean(2, lo_phase(true), &params), d, max_relative = 1e-14);
        assert_relative_eq!(quadrature_mean(3, lo_phase(true), &params), -d, max_relative = 1e-14);

        let dark = ProtocolParams { eta: 0.0, ..ProtocolParams::default() };
        for x in 0..4 {
            for theta in [0.0, FRAC_PI_2] {
                assert_eq!(quadrature_mean(x, theta, &dark), 0.0);
                let pdf0 = quadrature_pdf(x, theta, 0.0, &dark);
                assert_relative_eq!(pdf0, 1.0 / (2.0 * PI).sqrt(), max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn two_bin_probabilities_reference_point() {
        let params = ProtocolParams::default();
        let p = bin_probabilities(2, true, &params);
        assert_eq!(p.len(), 2);
        assert_relative_eq!(p[0], 0.4555219592678149, max_relative = 1e-13);
        assert_relative_eq!(p[0] + p[1], 1.0, max_relative = 1e-14);

        let symmetric = bin_probabilities_for_mean(0.0, 1, 2.0);
        assert_eq!(symmetric, vec![0.5, 0.5]);
    }

    #[test]
    fn bin_probabilities_sum_to_one_for_every_binning() {
        let params = table_params();
        for m in 1..=4 {
            for x in 0..4 {
                for theta_y in [false, true] {
                    let mean = quadrature_mean(x, lo_phase(theta_y), &params);
                    let p = bin_probabilities_for_mean(mean, m, params.bin_half_range);
                    assert_eq!(p.len(), 2 * m);
                    let total: f64 = p.iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                    assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn bin_edges_partition_the_window() {
        assert_eq!(bin_edges(1, 2.0), vec![0.0]);
        assert_eq!(bin_edges(2, 2.0), vec![-2.0, 0.0, 2.0]);
        let e = bin_edges(3, 1.0);
        let expected = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for (a, b) in e.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn signed_bin_positions_round_trip() {
        for m in 1..=4 {
            for pos in 0..2 * m {
                let b = position_to_signed_bin(pos, m);
                assert!(b != 0 && b.abs() <= m as i32);
                assert_eq!(signed_bin_position(b, m), pos);
            }
        }
    }

    #[test]
    fn scoring_rule_reference_cases() {
        let layout = ScoreLayout::new(LayoutKind::Identity, 3, 1);
        assert_eq!(
            assign_score(true, 0, false, 2, &layout),
            ScoreLabel::bin(Basis::X, 2)
        );
        assert_eq!(
            assign_score(true, 3, true, -1, &layout),
            ScoreLabel::bin(Basis::P, 1)
        );
        assert_eq!(assign_score(false, 0, true, -3, &layout), ScoreLabel::Bot);

        // The default layout pools the +1 bins.
        let pooled = ScoreLayout::new(LayoutKind::TableDefault, 3, 1);
        assert_eq!(
            assign_score(true, 3, true, -1, &pooled),
            ScoreLabel::Aggregate("1-all".into())
        );
    }

    #[test]
    fn scoring_rule_matches_exhaustive_table() {
        // Independent enumeration of the published rule: for each basis pair,
        // the first-listed state keeps the outcome sign and the second flips
        // it.
        let layout = ScoreLayout::new(LayoutKind::Identity, 3, 3);
        for x in 0..4usize {
            let y = expected_y(x);
            let basis = if y { Basis::P } else { Basis::X };
            for b in (-3i32..=3).filter(|&b| b != 0) {
                let expect = if x % 2 == 0 { b } else { -b };
                assert_eq!(
                    assign_score(true, x, y, b, &layout),
                    ScoreLabel::bin(basis, expect),
                    "x={x} b={b}"
                );
            }
        }
    }

    #[test]
    fn honest_distribution_matches_published_values() {
        let params = table_params();
        let layout = params.layout();
        let omega = honest_score_distribution(&params);

        let total: f64 = omega.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        // High-precision values at this window half-width.
        let expected = [
            ("-3_X", 0.06584695301057658),
            ("-2_X", 0.06878004397232599),
            ("-1_X", 0.09313398265100487),
            ("-1_P", 0.22776097963390745),
            ("+3_X", 0.0927),
            ("+2_X", 0.08113346330318829),
            ("1-all", 0.09840555706290426 + 0.27223902036609255),
        ];
        for (label, value) in expected {
            let idx = layout.index_of(&label.parse().unwrap()).unwrap();
            assert_relative_eq!(omega[idx], value, max_relative = 1e-10);
        }

        // Published table, rounded to four decimals.
        let published = [0.0659, 0.0688, 0.0931, 0.2278, 0.0927, 0.0811, 0.3706];
        for (idx, value) in published.iter().enumerate() {
            assert!(
                (omega[idx] - value).abs() < 1e-4,
                "category {}: {} vs {}",
                layout.labels()[idx],
                omega[idx],
                value
            );
        }
    }

    #[test]
    fn vacuum_distribution_is_sign_symmetric() {
        let params = ProtocolParams {
            amplitude: 0.0,
            layout: LayoutKind::Identity,
            ..ProtocolParams::default()
        };
        let layout = params.layout();
        let omega = honest_score_distribution(&params);
        for (basis, m) in [(Basis::X, 3i32), (Basis::P, 1)] {
            for b in 1..=m {
                let plus = layout.index_of(&ScoreLabel::bin(basis, b)).unwrap();
                let minus = layout.index_of(&ScoreLabel::bin(basis, -b)).unwrap();
                assert_relative_eq!(omega[plus], omega[minus], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn paired_states_contribute_identically() {
        // Each category receives the same mass from both states of its pair:
        // state 1 is state 0 reflected, so its flipped bins agree.
        let params = table_params();
        for (x_even, y) in [(0usize, false), (2, true)] {
            let m = if y { params.m_p() } else { params.m_x() };
            let even = bin_probabilities(x_even, y, &params);
            let odd = bin_probabilities(x_even + 1, y, &params);
            for pos in 0..2 * m {
                let b = position_to_signed_bin(pos, m);
                let flipped = signed_bin_position(-b, m);
                assert_relative_eq!(even[pos], odd[flipped], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn outer_bin_mass_grows_with_amplitude_and_efficiency() {
        let mut last = 0.0;
        for k in 0..20 {
            let params = ProtocolParams {
                amplitude: 0.05 * k as f64,
                ..ProtocolParams::default()
            };
            let p = bin_probabilities(0, false, &params);
            let outer = p[p.len() - 1];
            assert!(outer >= last, "amp step {k}");
            last = outer;
        }
        let mut last = 0.0;
        for k in 0..=10 {
            let params = ProtocolParams {
                eta: 0.1 * k as f64,
                amplitude: 1.0,
                ..ProtocolParams::default()
            };
            let p = bin_probabilities(0, false, &params);
            let outer = p[p.len() - 1];
            assert!(outer >= last, "eta step {k}");
            last = outer;
        }
    }

    #[test]
    fn score_terms_cover_every_state_bin_pair_once() {
        let layout = ScoreLayout::new(LayoutKind::TableDefault, 3, 1);
        let terms = score_terms(&layout, 3, 1);
        assert_eq!(terms.len(), layout.len());
        let mut seen = std::collections::BTreeSet::new();
        for list in &terms {
            for &(x, y, b) in list {
                assert_eq!(y, expected_y(x));
                assert!(seen.insert((x, b)), "duplicate ({x},{b})");
            }
        }
        // 4 states, X pair has 6 bins, P pair has 2.
        assert_eq!(seen.len(), 2 * 6 + 2 * 2);
    }
}
