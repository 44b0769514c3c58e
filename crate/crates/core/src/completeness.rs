//! Tolerance calibration: sizing the count-test thresholds so an honest
//! device passes with the requested probability.
//!
//! Each category's count over `n` rounds is binomial with success
//! probability `gamma * omega_c`. The abort probability above the threshold
//! `floor(n gamma (omega_c + delta_c))` is controlled through an exponential
//! tail bound in normal-cdf form,
//!
//! ```text
//! P[count <= k] >= F(n, p, k)   for k >= n p,
//! F(n, p, k) = Phi( sign(k/n - p) sqrt(2 n D(k/n || p)) )
//! ```
//!
//! with `D` the binary KL divergence in nats. `F` is monotone in `k`, which
//! makes the per-category tolerance a one-dimensional bisection.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::scores::ScoreDistribution;

/// Standard normal CDF through the complementary error function, keeping
/// full relative accuracy in the lower tail (`Phi(-8) ~ 6.2e-16`).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Binary KL divergence `D(q || p)` in nats. `q` may sit on the boundary
/// (the `0 ln 0` limit is zero); `p` must be interior.
pub fn kl_bernoulli(q: f64, p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "q = {q} outside [0, 1]");
    assert!(p > 0.0 && p < 1.0, "p = {p} outside (0, 1)");
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

/// The tail bound `F(n, p, k)`: a lower bound on `P[Bin(n, p) <= k]` when
/// `k >= n p` and an upper bound when `k <= n p`. Nondecreasing in `k`.
pub fn binomial_cdf_bound(n: f64, p: f64, k: f64) -> f64 {
    assert!(n > 0.0, "n = {n} must be positive");
    let q = (k / n).clamp(0.0, 1.0);
    let s = (2.0 * n * kl_bernoulli(q, p)).sqrt();
    normal_cdf(if q >= p { s } else { -s })
}

/// Probability that an honest category count exceeds its threshold
/// `floor(n gamma (omega + delta))`.
pub fn epsilon_com_category(n: f64, gamma: f64, omega: f64, delta: f64) -> f64 {
    let k = (n * gamma * (omega + delta)).floor();
    1.0 - binomial_cdf_bound(n, gamma * omega, k)
}

/// Sum of per-category abort probabilities; by the union bound, an upper
/// bound on the honest abort probability of the whole count test.
pub fn epsilon_com_total(n: f64, gamma: f64, omega: &[f64], delta: &[f64]) -> f64 {
    assert_eq!(omega.len(), delta.len());
    omega
        .iter()
        .zip(delta)
        .map(|(&w, &d)| epsilon_com_category(n, gamma, w, d))
        .sum()
}

/// How the completeness budget is split across categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaAllocation {
    /// Every category gets the same share.
    Equal,
    /// Shares proportional to the binomial standard deviation scale
    /// `sqrt(omega (1 - omega))`, loosening the tight categories.
    Proportional,
}

impl Default for DeltaAllocation {
    fn default() -> Self {
        DeltaAllocation::Equal
    }
}

/// Smallest tolerances (up to bisection resolution) meeting the total
/// completeness budget under the chosen allocation.
///
/// The returned `delta[c]` is the upper end of the final bisection bracket,
/// so `epsilon_com_category` at `delta[c]` is guaranteed not to exceed the
/// category's share of the budget even though the map from tolerance to
/// abort probability is a step function of the threshold.
pub fn calibrate_delta(
    n: f64,
    gamma: f64,
    omega: &[f64],
    eps_total: f64,
    allocation: DeltaAllocation,
) -> Result<Vec<f64>, CoreError> {
    if !(eps_total > 0.0 && eps_total < 1.0) {
        return Err(CoreError::Params(format!(
            "completeness budget {eps_total} outside (0, 1)"
        )));
    }
    let weights: Vec<f64> = match allocation {
        DeltaAllocation::Equal => vec![1.0; omega.len()],
        DeltaAllocation::Proportional => omega.iter().map(|&w| (w * (1.0 - w)).sqrt()).collect(),
    };
    let weight_sum: f64 = weights.iter().sum();
    if !(weight_sum > 0.0) {
        return Err(CoreError::Params(
            "tolerance allocation weights sum to zero".into(),
        ));
    }

    let mut delta = Vec::with_capacity(omega.len());
    for (&w, &wt) in omega.iter().zip(&weights) {
        if !(w > 0.0 && w < 1.0) {
            return Err(CoreError::Params(format!(
                "category probability {w} outside (0, 1)"
            )));
        }
        let budget = eps_total * wt / weight_sum;
        // Bisect on the tolerance. The bracket cap keeps the threshold
        // argument k/n inside [0, 1].
        let hi_cap = 1.0 / gamma - w;
        let mut lo = 0.0;
        let mut hi = hi_cap;
        if epsilon_com_category(n, gamma, w, hi) > budget {
            return Err(CoreError::Numerical(format!(
                "completeness budget {budget:.3e} unreachable for category probability {w}"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if epsilon_com_category(n, gamma, w, mid) <= budget {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        delta.push(hi);
    }
    Ok(delta)
}

/// Count-test thresholds `floor(n gamma (omega_c + delta_c))`.
pub fn thresholds(n: f64, gamma: f64, omega: &[f64], delta: &[f64]) -> Vec<u64> {
    assert_eq!(omega.len(), delta.len());
    omega
        .iter()
        .zip(delta)
        .map(|(&w, &d)| (n * gamma * (w + d)).floor() as u64)
        .collect()
}

/// The protocol's accept decision on an observed distribution, whose
/// normalized frequencies are turned back into integer counts before the
/// threshold comparison.
pub fn accept_test(
    dist: &ScoreDistribution,
    n: f64,
    gamma: f64,
    omega: &[f64],
    delta: &[f64],
) -> bool {
    assert_eq!(dist.freq.len(), omega.len(), "distribution and table disagree");
    let limits = thresholds(n, gamma, omega, delta);
    dist.freq
        .iter()
        .zip(&limits)
        .all(|(&f, &limit)| (f * gamma * n).round() as u64 <= limit)
}
