//! Finite-size output-length accounting. Turns a validated affine
//! certificate and the accepted score statistics into a certified number of
//! extractable bits `k`, the extractor output length `ell_out`, the seed
//! cost `ell_in`, and the net expansion rate, with the Renyi parameter
//! `beta` optimized by golden-section search.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::moment::DualCertificate;
use crate::params::ProtocolParams;
use crate::scores::ScoreDistribution;

const LN_2: f64 = std::f64::consts::LN_2;

/// Failure probabilities entering the length bound. `eps_com_target` is the
/// completeness target carried along for reporting; the other five shape the
/// bound itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub eps_smooth: f64,
    pub eps_1: f64,
    pub eps_2: f64,
    pub eps_ea: f64,
    pub eps_ext: f64,
    pub eps_com_target: f64,
}

impl ErrorBudget {
    pub fn new(
        eps_smooth: f64,
        eps_1: f64,
        eps_2: f64,
        eps_ea: f64,
        eps_ext: f64,
        eps_com_target: f64,
    ) -> Result<Self, CoreError> {
        let budget = Self { eps_smooth, eps_1, eps_2, eps_ea, eps_ext, eps_com_target };
        budget.validate()?;
        Ok(budget)
    }

    pub fn from_params(params: &ProtocolParams) -> Result<Self, CoreError> {
        Self::new(
            params.eps_smooth,
            params.eps1(),
            params.eps2(),
            params.eps_ea,
            params.eps_ext,
            params.eps_completeness,
        )
    }

    /// Every field must be a probability in (0, 1); the chain-rule log
    /// argument `eps_smooth - eps_2 - 2 eps_1` must stay positive; the
    /// state-conversion step needs `eps_2 < eps_ea`.
    pub fn validate(&self) -> Result<(), CoreError> {
        let fields = [
            ("eps_smooth", self.eps_smooth),
            ("eps_1", self.eps_1),
            ("eps_2", self.eps_2),
            ("eps_ea", self.eps_ea),
            ("eps_ext", self.eps_ext),
            ("eps_com_target", self.eps_com_target),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value < 1.0) {
                return Err(CoreError::Params(format!("{name} = {value} outside (0, 1)")));
            }
        }
        if self.chain_slack() <= 0.0 {
            return Err(CoreError::Params(format!(
                "eps_smooth - eps_2 - 2 eps_1 = {} must be positive",
                self.chain_slack()
            )));
        }
        if self.eps_2 >= self.eps_ea {
            return Err(CoreError::Params(format!(
                "eps_2 = {} must be below eps_ea = {}",
                self.eps_2, self.eps_ea
            )));
        }
        Ok(())
    }

    /// Smoothing mass left for the chain-rule step.
    pub fn chain_slack(&self) -> f64 {
        self.eps_smooth - self.eps_2 - 2.0 * self.eps_1
    }

    /// Overall soundness error of the run.
    pub fn eps_sou(&self) -> f64 {
        self.eps_ea.max(2.0 * self.eps_smooth + self.eps_ext)
    }
}

pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2()) - (1.0 - p) * (1.0 - p).log2()
}

/// Worst accepted score distribution for the certificate: every category
/// sits at its threshold `omega_c + delta_c` except the one with the
/// smallest multiplier, which absorbs the whole tolerance budget so the
/// total stays at `sum(omega)`. Ties pick the earliest category.
pub fn tilde_omega(omega: &[f64], delta: &[f64], lambda: &[f64]) -> Result<Vec<f64>, CoreError> {
    if omega.len() != delta.len() || omega.len() != lambda.len() || omega.is_empty() {
        return Err(CoreError::Params(format!(
            "tolerance shapes disagree: {} omega, {} delta, {} lambda",
            omega.len(),
            delta.len(),
            lambda.len()
        )));
    }
    let mut c_min = 0;
    for (c, &l) in lambda.iter().enumerate() {
        if l < lambda[c_min] {
            c_min = c;
        }
    }
    let mut tilde: Vec<f64> = omega.iter().zip(delta).map(|(w, d)| w + d).collect();
    let foreign: f64 = delta
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != c_min)
        .map(|(_, d)| d)
        .sum();
    tilde[c_min] = omega[c_min] - foreign;
    if tilde[c_min] < 0.0 {
        return Err(CoreError::Params(format!(
            "tolerances sum to {foreign} which exceeds the smallest-multiplier category \
             probability {}",
            omega[c_min]
        )));
    }
    Ok(tilde)
}

/// Certified min-entropy per generation-round pair, from the affine bound
/// evaluated at the worst accepted distribution. Returns the clamped value
/// and a flag set when the unclamped value is nonpositive (the certificate
/// certifies nothing at these statistics).
pub fn single_round_h(alpha: f64, lambda: &[f64], tilde: &[f64], gamma: f64) -> (f64, bool) {
    let bound: f64 = alpha + lambda.iter().zip(tilde).map(|(l, w)| l * w).sum::<f64>();
    let raw = 2.0 * (1.0 - gamma) * (1.0 - bound);
    (raw.max(0.0), raw <= 0.0)
}

fn lambda_span(lambda: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in lambda {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Second-order coefficient of the entropy-accumulation bound.
pub fn variance_term_v(gamma: f64, m: usize, lambda: &[f64]) -> f64 {
    let span = lambda_span(lambda);
    let inner = (4.0 * m as f64 + 1.0).log2()
        + (2.0 + 4.0 * (1.0 - gamma).powi(2) * span * span / gamma).sqrt();
    LN_2 / 2.0 * inner * inner
}

/// Third-order coefficient of the entropy-accumulation bound. Diverges as
/// `beta` approaches 1, so the domain is enforced here.
pub fn correction_term_k(
    beta: f64,
    gamma: f64,
    m: usize,
    lambda: &[f64],
) -> Result<f64, CoreError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CoreError::Params(format!("beta = {beta} outside (0, 1)")));
    }
    let exponent = (2.0 * m as f64).log2() + 2.0 * (1.0 - gamma) * lambda_span(lambda);
    let log_term = (2f64.powf(exponent) + std::f64::consts::E * std::f64::consts::E).ln();
    Ok(2f64.powf(beta * exponent) / (6.0 * LN_2 * (1.0 - beta).powi(3)) * log_term.powi(3))
}

/// Penalty for converting between entropy orders.
pub fn qaep_xi(eps_2: f64, m: usize) -> f64 {
    2.0 * (1.0 + 4.0 * m as f64).log2() * (1.0 - 2.0 * eps_2.log2()).sqrt()
}

/// Entropy of one round of protocol inputs: the test/generation coin plus
/// the settings drawn on test rounds.
pub fn input_entropy(gamma: f64) -> f64 {
    binary_entropy(gamma) + 2.0 * gamma
}

/// Seed bits consumed by a run of `n` rounds, including the constant
/// overhead of the sampler.
pub fn input_length(n: f64, gamma: f64) -> f64 {
    n * input_entropy(gamma) + 3.0
}

/// Smooth min-entropy of the raw string against the adversary, conditioned
/// on acceptance. May come out negative; callers flag rather than clamp.
pub fn smooth_min_entropy_k(
    n: f64,
    gamma: f64,
    m: usize,
    h: f64,
    lambda: &[f64],
    beta: f64,
    budget: &ErrorBudget,
) -> Result<f64, CoreError> {
    let v = variance_term_v(gamma, m, lambda);
    let k_corr = correction_term_k(beta, gamma, m, lambda)?;
    let xi = qaep_xi(budget.eps_2, m);
    let ea_cost = 1.0 - 2.0 * (budget.eps_ea * budget.eps_1).log2();
    let tail = (2.0 / budget.chain_slack()).log2();
    Ok(n * (h + input_entropy(gamma))
        - n * (beta * v + beta * beta * k_corr)
        - ea_cost / beta
        - xi * n.sqrt()
        - tail)
}

/// Extractable bits at extractor error `eps_ext`; the floor is applied here
/// and nowhere else. Negative values pass through for the caller to flag.
pub fn output_length(k: f64, eps_ext: f64) -> f64 {
    (k - 2.0 * (1.0 / eps_ext).log2() + 2.0).floor()
}

pub fn net_rate(n: f64, ell_out: f64, ell_in: f64) -> f64 {
    (ell_out - ell_in) / n
}

const BETA_LO: f64 = 1e-9;
const BETA_HI: f64 = 1.0 - 1e-6;

/// Maximizes the pre-floor bits-extracted objective over `beta` in
/// (1e-9, 1 - 1e-6) by golden-section search. The floor in `output_length`
/// is monotone, so the same point maximizes the reported rate. A flat
/// objective resolves to the smallest `beta`.
fn best_beta(
    n: f64,
    gamma: f64,
    m: usize,
    h: f64,
    lambda: &[f64],
    budget: &ErrorBudget,
) -> Result<f64, CoreError> {
    let objective =
        |beta: f64| smooth_min_entropy_k(n, gamma, m, h, lambda, beta, budget);
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (BETA_LO, BETA_HI);
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let mut fc = objective(c)?;
    let mut fd = objective(d)?;
    for _ in 0..240 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = objective(d)?;
        }
    }
    let mid = 0.5 * (a + b);
    let f_mid = objective(mid)?;
    let f_lo = objective(BETA_LO)?;
    if f_lo >= f_mid - 1e-12 * f_mid.abs().max(1.0) {
        return Ok(BETA_LO);
    }
    Ok(mid)
}

/// Full accounting for one parameter point. `ell_out` keeps its sign; a
/// negative value together with `r_net < 0` marks a run that certifies
/// nothing, reported through the flags rather than clamped away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub h: f64,
    pub nonpositive_entropy: bool,
    pub v: f64,
    pub k_correction: f64,
    pub xi: f64,
    pub beta: f64,
    pub k_bound: f64,
    pub ell_out: f64,
    pub ell_in: f64,
    pub r_net: f64,
    pub eps_sou: f64,
    pub budget: ErrorBudget,
    pub tilde_omega: ScoreDistribution,
}

impl RateReport {
    /// True when the run certifies a strict expansion.
    pub fn is_positive(&self) -> bool {
        self.r_net > 0.0 && !self.nonpositive_entropy
    }
}

/// Computes the full report at `beta`, or at the optimized `beta` when none
/// is given. `omega` and `delta` are the accepted thresholds, ordered like
/// the certificate's categories.
pub fn rate_report(
    params: &ProtocolParams,
    budget: &ErrorBudget,
    cert: &DualCertificate,
    omega: &ScoreDistribution,
    delta: &[f64],
    beta: Option<f64>,
) -> Result<RateReport, CoreError> {
    budget.validate()?;
    let cert_categories: Vec<_> = cert.lambda.iter().map(|e| e.category.clone()).collect();
    if omega.categories != cert_categories {
        return Err(CoreError::Params(format!(
            "score categories {:?} do not match the certificate's {:?}",
            omega.categories, cert_categories
        )));
    }
    let lambda: Vec<f64> = cert.lambda.iter().map(|e| e.value).collect();
    let tilde = tilde_omega(&omega.freq, delta, &lambda)?;
    let gamma = params.gamma;
    let m = params.vk_m();
    let n = params.n_rounds;
    let (h, nonpositive_entropy) = single_round_h(cert.alpha, &lambda, &tilde, gamma);
    let beta = match beta {
        Some(b) => b,
        None => best_beta(n, gamma, m, h, &lambda, budget)?,
    };
    let v = variance_term_v(gamma, m, &lambda);
    let k_correction = correction_term_k(beta, gamma, m, &lambda)?;
    let xi = qaep_xi(budget.eps_2, m);
    let k_bound = smooth_min_entropy_k(n, gamma, m, h, &lambda, beta, budget)?;
    let ell_out = output_length(k_bound, budget.eps_ext);
    let ell_in = input_length(n, gamma);
    let r_net = net_rate(n, ell_out, ell_in);
    Ok(RateReport {
        h,
        nonpositive_entropy,
        v,
        k_correction,
        xi,
        beta,
        k_bound,
        ell_out,
        ell_in,
        r_net,
        eps_sou: budget.eps_sou(),
        budget: budget.clone(),
        tilde_omega: ScoreDistribution { categories: cert_categories, freq: tilde },
    })
}

/// Optimizes `beta` and returns it with the report computed at the optimum.
pub fn optimize_beta(
    params: &ProtocolParams,
    budget: &ErrorBudget,
    cert: &DualCertificate,
    omega: &ScoreDistribution,
    delta: &[f64],
) -> Result<(f64, RateReport), CoreError> {
    let report = rate_report(params, budget, cert, omega, delta, None)?;
    Ok((report.beta, report))
}

/// Draws `count` probe values of `beta` log-uniformly over the search
/// interval; used by optimality checks.
pub fn sample_betas<R: Rng>(rng: &mut R, count: usize) -> Vec<f64> {
    let (lo, hi) = (BETA_LO.ln(), BETA_HI.ln());
    (0..count).map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp()).collect()
}
