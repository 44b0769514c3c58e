//! Explicit finite-dimensional strategies: concrete states and POVMs whose
//! statistics and guessing probability are computed directly, with no
//! relaxation involved. They lower-bound the true optimum, so every
//! exported certificate must dominate every strategy produced here.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::CoreError;
use crate::model::{
    bin_edges, gram_matrix, lo_phase, prepared_states, score_terms, signed_bin_position,
};
use crate::moment::DualCertificate;
use crate::params::ProtocolParams;
use crate::scores::{ScoreDistribution, ScoreLayout};

/// Gauss-Legendre nodes and weights on [-1, 1]. Exact for polynomials of
/// degree 2n - 1.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "need at least two nodes");
    let legendre = |x: f64| {
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
    };
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        weights[i] = w;
        nodes[n - 1 - i] = -x;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Position wavefunction of a coherent state with rotated amplitude `a`
/// (the LO phase already folded in): a unit-variance Gaussian packet
/// centered on `2 Re a`, phased so that overlaps between two such packets
/// integrate to the coherent-state inner product.
fn packet(q: f64, a: Complex64) -> Complex64 {
    let centered = q - 2.0 * a.re;
    let magnitude = (2.0 * PI).powf(-0.25) * (-centered * centered / 4.0).exp();
    magnitude * Complex64::new(0.0, a.im * q - a.re * a.im).exp()
}

const PANEL_WIDTH: f64 = 0.5;
const PANEL_NODES: usize = 24;

/// Matrix of windowed wavefunction overlaps over one outcome interval:
/// entry (i, j) is the integral of `conj(psi_i) psi_j` over [lo, hi].
fn window_overlaps(rotated: &[Complex64], lo: f64, hi: f64) -> DMatrix<Complex64> {
    let n = rotated.len();
    let (nodes, weights) = gauss_legendre(PANEL_NODES);
    let panels = ((hi - lo) / PANEL_WIDTH).ceil().max(1.0) as usize;
    let step = (hi - lo) / panels as f64;
    let mut out = DMatrix::zeros(n, n);
    let mut values = vec![Complex64::default(); n];
    for panel in 0..panels {
        let (a, b) = (lo + step * panel as f64, lo + step * (panel + 1) as f64);
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (t, w) in nodes.iter().zip(&weights) {
            let q = mid + half * t;
            for (v, &amp) in values.iter_mut().zip(rotated) {
                *v = packet(q, amp);
            }
            let scale = Complex64::new(half * w, 0.0);
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += scale * values[i].conj() * values[j];
                }
            }
        }
    }
    out
}

/// One positive operator per outcome bin of a homodyne readout at LO phase
/// `theta`, expressed in the coordinates of the prepared states (entry
/// (i, j) is the matrix element between states i and j). Summed over bins
/// they reproduce the states' Gram matrix.
pub fn homodyne_bin_operators(
    amps: &[Complex64],
    theta: f64,
    m: usize,
    half_range: f64,
) -> Vec<DMatrix<Complex64>> {
    let rotation = Complex64::from_polar(1.0, -theta);
    let rotated: Vec<Complex64> = amps.iter().map(|a| a * rotation).collect();
    let reach = rotated.iter().map(|a| 2.0 * a.re.abs()).fold(0.0, f64::max);
    // Beyond this point the packets have decayed past double precision.
    let clamp = reach + 16.0;
    let edges = bin_edges(m, half_range);
    let mut bounds = Vec::with_capacity(2 * m + 1);
    bounds.push(-clamp);
    bounds.extend_from_slice(&edges);
    bounds.push(clamp);
    bounds
        .windows(2)
        .map(|w| {
            let mut op = window_overlaps(&rotated, w[0], w[1]);
            for i in 0..op.nrows() {
                for j in i..op.ncols() {
                    let h = 0.5 * (op[(i, j)] + op[(j, i)].conj());
                    op[(i, j)] = h;
                    op[(j, i)] = h.conj();
                }
            }
            op
        })
        .collect()
}

/// Orthonormal-coordinate model of a family of states given only their
/// Gram matrix: `vectors[x]` live in dimension `dim` (the Gram rank) and
/// reproduce the pairwise inner products.
pub struct SpanStates {
    pub dim: usize,
    pub vectors: Vec<DVector<Complex64>>,
    lift: DMatrix<Complex64>,
}

impl SpanStates {
    pub fn from_gram(gram: &DMatrix<Complex64>) -> Self {
        let n = gram.nrows();
        let mut g = gram.clone();
        for i in 0..n {
            for j in i..n {
                let h = 0.5 * (g[(i, j)] + g[(j, i)].conj());
                g[(i, j)] = h;
                g[(j, i)] = h.conj();
            }
        }
        let eig = g.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        let keep: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > 1e-12 * max_eig)
            .collect();
        let dim = keep.len();
        let mut vectors = vec![DVector::zeros(dim); n];
        let mut lift = DMatrix::zeros(dim, n);
        for (row, &i) in keep.iter().enumerate() {
            let root = eig.eigenvalues[i].sqrt();
            for x in 0..n {
                vectors[x][row] = Complex64::new(root, 0.0) * eig.eigenvectors[(x, i)].conj();
                lift[(row, x)] = eig.eigenvectors[(x, i)].conj() / root;
            }
        }
        Self { dim, vectors, lift }
    }

    /// Rewrites an operator given by matrix elements between the spanning
    /// states into an operator on the orthonormal coordinates. Faithful for
    /// operators supported on the span, which includes every outcome of a
    /// measurement whose total is the Gram matrix. The lift divides by the
    /// smallest kept eigenvalue, so the result carries rounding noise of
    /// order machine epsilon over that eigenvalue and is re-symmetrized.
    pub fn operator_from_state_elements(&self, elements: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let mut op = &self.lift * elements * self.lift.adjoint();
        for i in 0..op.nrows() {
            for j in i..op.ncols() {
                let h = 0.5 * (op[(i, j)] + op[(j, i)].conj());
                op[(i, j)] = h;
                op[(j, i)] = h.conj();
            }
        }
        op
    }
}

/// A complete strategy for one round: joint pure states for the four
/// settings on a Bob x Eve tensor product, Bob's two measurement POVMs, and
/// Eve's binary guess POVM.
pub struct ExplicitStrategy {
    pub dim_bob: usize,
    pub dim_eve: usize,
    pub states: Vec<DVector<Complex64>>,
    /// Outcome operators for y = 0 and y = 1, ordered by bin position.
    pub bob_povms: [Vec<DMatrix<Complex64>>; 2],
    pub eve_povm: Vec<DMatrix<Complex64>>,
}

impl ExplicitStrategy {
    fn state_matrix(&self, x: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim_bob, self.dim_eve, |i, e| {
            self.states[x][i * self.dim_eve + e]
        })
    }

    /// Expectation of `bob_op x eve_op` (identity on Eve when `None`) in
    /// state `x`.
    fn expectation(
        &self,
        x: usize,
        bob_op: &DMatrix<Complex64>,
        eve_op: Option<&DMatrix<Complex64>>,
    ) -> f64 {
        let r = self.state_matrix(x);
        let t = bob_op * &r;
        let s = match eve_op {
            Some(f) => t * f.transpose(),
            None => t,
        };
        r.iter().zip(s.iter()).map(|(a, b)| (a.conj() * b).re).sum()
    }

    pub fn bob_m(&self, y: bool) -> usize {
        self.bob_povms[y as usize].len() / 2
    }

    /// Probability that Bob reports bin position `pos` on input `y` when
    /// the source prepared state `x`.
    pub fn bob_probability(&self, x: usize, y: bool, pos: usize) -> f64 {
        self.expectation(x, &self.bob_povms[y as usize][pos], None)
    }

    /// Joint probability of Bob's bin position and Eve's guess.
    pub fn joint_probability(&self, x: usize, y: bool, pos: usize, e: usize) -> f64 {
        self.expectation(x, &self.bob_povms[y as usize][pos], Some(&self.eve_povm[e]))
    }

    /// Per-test-round category probabilities in layout order.
    pub fn score_distribution(&self, layout: &ScoreLayout) -> ScoreDistribution {
        let terms = score_terms(layout, self.bob_m(false), self.bob_m(true));
        let freq = terms
            .iter()
            .map(|combos| {
                combos
                    .iter()
                    .map(|&(x, y, b)| {
                        0.25 * self.bob_probability(x, y, signed_bin_position(b, self.bob_m(y)))
                    })
                    .sum()
            })
            .collect();
        ScoreDistribution { categories: layout.labels().to_vec(), freq }
    }

    /// Probability that Eve's outcome matches the sign of Bob's
    /// generation-round readout on the generation setting (x = 0, y = 1).
    pub fn guessing_probability(&self) -> f64 {
        let m = self.bob_m(true);
        let dim = self.dim_bob;
        let mut p = 0.0;
        for e in 0..2 {
            let mut group = DMatrix::zeros(dim, dim);
            let positions = if e == 0 { 0..m } else { m..2 * m };
            for pos in positions {
                group += &self.bob_povms[1][pos];
            }
            p += self.expectation(0, &group, Some(&self.eve_povm[e]));
        }
        p
    }

    /// Checks that the states reproduce `gram` and that each POVM is made
    /// of Hermitian positive operators summing to the identity.
    pub fn validate(&self, gram: &DMatrix<Complex64>, tol: f64) -> Result<(), CoreError> {
        let n = self.states.len();
        if gram.nrows() != n {
            return Err(CoreError::Params(format!(
                "{} states against a {} x {} Gram matrix",
                n,
                gram.nrows(),
                gram.ncols()
            )));
        }
        for x in 0..n {
            for y in 0..n {
                let inner: Complex64 =
                    self.states[x].iter().zip(self.states[y].iter()).map(|(a, b)| a.conj() * b).sum();
                if (inner - gram[(x, y)]).norm() > tol {
                    return Err(CoreError::Numerical(format!(
                        "state overlap ({x}, {y}) off by {:.3e}",
                        (inner - gram[(x, y)]).norm()
                    )));
                }
            }
        }
        let mut groups: Vec<(&str, &[DMatrix<Complex64>], usize)> = Vec::new();
        groups.push(("bob y=0", &self.bob_povms[0], self.dim_bob));
        groups.push(("bob y=1", &self.bob_povms[1], self.dim_bob));
        groups.push(("eve", &self.eve_povm, self.dim_eve));
        for (name, povm, dim) in groups {
            let mut total: DMatrix<Complex64> = DMatrix::zeros(dim, dim);
            for op in povm {
                let asym = (op - op.adjoint()).norm();
                if asym > tol {
                    return Err(CoreError::Numerical(format!(
                        "{name} outcome not Hermitian by {asym:.3e}"
                    )));
                }
                let min_eig = op
                    .clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .fold(f64::INFINITY, |m, &v| m.min(v));
                if min_eig < -tol {
                    return Err(CoreError::Numerical(format!(
                        "{name} outcome has eigenvalue {min_eig:.3e}"
                    )));
                }
                total += op;
            }
            let defect = (total - DMatrix::<Complex64>::identity(dim, dim)).norm();
            if defect > tol {
                return Err(CoreError::Numerical(format!(
                    "{name} outcomes sum {defect:.3e} away from identity"
                )));
            }
        }
        Ok(())
    }
}

fn product_state(v: &DVector<Complex64>, w: &DVector<Complex64>) -> DVector<Complex64> {
    let (db, de) = (v.len(), w.len());
    DVector::from_fn(db * de, |k, _| v[k / de] * w[k % de])
}

/// The honest implementation: a beamsplitter of transmittance `eta` sends
/// the attenuated signal to Bob's homodyne readout and the reflected part
/// to Eve, who learns nothing about the symmetric generation outcome and
/// guesses at random.
pub fn honest_strategy(params: &ProtocolParams) -> ExplicitStrategy {
    let bob_amps = prepared_states(params.eta.sqrt() * params.amplitude);
    let eve_amps = prepared_states((1.0 - params.eta).sqrt() * params.amplitude);
    let bob_span = SpanStates::from_gram(crate::model::GramMatrix::from_states(&bob_amps).matrix());
    let eve_span = SpanStates::from_gram(crate::model::GramMatrix::from_states(&eve_amps).matrix());
    let mut bob_povms: [Vec<DMatrix<Complex64>>; 2] = [Vec::new(), Vec::new()];
    for y in [false, true] {
        let m = if y { params.m_p() } else { params.m_x() };
        let bins = homodyne_bin_operators(&bob_amps, lo_phase(y), m, params.bin_half_range);
        bob_povms[y as usize] = bins
            .iter()
            .map(|n| bob_span.operator_from_state_elements(n))
            .collect();
    }
    let half = DMatrix::<Complex64>::identity(eve_span.dim, eve_span.dim)
        * Complex64::new(0.5, 0.0);
    let states = (0..4)
        .map(|x| product_state(&bob_span.vectors[x], &eve_span.vectors[x]))
        .collect();
    ExplicitStrategy {
        dim_bob: bob_span.dim,
        dim_eve: eve_span.dim,
        states,
        bob_povms,
        eve_povm: vec![half.clone(), half],
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    let v = rng.random::<f64>();
    (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
}

fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        Complex64::new(standard_normal(rng), standard_normal(rng))
    })
}

/// Normalizes a list of factor matrices into a POVM: the squares are scaled
/// by the inverse square root of their sum, so the outcomes are positive
/// and complete regardless of the factors.
fn povm_from_factors(factors: &[DMatrix<Complex64>]) -> Vec<DMatrix<Complex64>> {
    let dim = factors[0].nrows();
    let squares: Vec<DMatrix<Complex64>> = factors.iter().map(|f| f * f.adjoint()).collect();
    let mut total: DMatrix<Complex64> = DMatrix::zeros(dim, dim);
    for a in &squares {
        total += a;
    }
    let eig = total.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let inv_root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| {
        Complex64::new(1.0 / v.max(1e-13 * max_eig).sqrt(), 0.0)
    }));
    let whiten = &eig.eigenvectors * inv_root * eig.eigenvectors.adjoint();
    squares
        .iter()
        .map(|a| {
            let mut m = &whiten * a * &whiten;
            for i in 0..dim {
                for j in i..dim {
                    let h = 0.5 * (m[(i, j)] + m[(j, i)].conj());
                    m[(i, j)] = h;
                    m[(j, i)] = h.conj();
                }
            }
            m
        })
        .collect()
}

/// Free parameters of a strategy: unconstrained factor matrices for every
/// POVM outcome plus a pre-isometry embedding of the source span into the
/// joint space. `build` turns them into a valid strategy, so any
/// perturbation of the raw matrices stays inside the feasible set.
#[derive(Clone)]
pub struct StrategyAnsatz {
    pub dim_bob: usize,
    pub dim_eve: usize,
    pub bob_factors: [Vec<DMatrix<Complex64>>; 2],
    pub eve_factors: Vec<DMatrix<Complex64>>,
    pub embed: DMatrix<Complex64>,
}

impl StrategyAnsatz {
    pub fn random<R: Rng + ?Sized>(
        span_dim: usize,
        dim_bob: usize,
        dim_eve: usize,
        outcomes_x: usize,
        outcomes_p: usize,
        rng: &mut R,
    ) -> Self {
        assert!(dim_bob * dim_eve >= span_dim, "joint space must contain the source span");
        Self {
            dim_bob,
            dim_eve,
            bob_factors: [
                (0..outcomes_x).map(|_| ginibre(dim_bob, dim_bob, rng)).collect(),
                (0..outcomes_p).map(|_| ginibre(dim_bob, dim_bob, rng)).collect(),
            ],
            eve_factors: (0..2).map(|_| ginibre(dim_eve, dim_eve, rng)).collect(),
            embed: ginibre(dim_bob * dim_eve, span_dim, rng),
        }
    }

    /// Instantiates the strategy on the span of the source states.
    pub fn build(&self, span: &SpanStates) -> ExplicitStrategy {
        let isometry = self.embed.clone().qr().q();
        let states = span.vectors.iter().map(|v| &isometry * v).collect();
        ExplicitStrategy {
            dim_bob: self.dim_bob,
            dim_eve: self.dim_eve,
            states,
            bob_povms: [
                povm_from_factors(&self.bob_factors[0]),
                povm_from_factors(&self.bob_factors[1]),
            ],
            eve_povm: povm_from_factors(&self.eve_factors),
        }
    }

    /// Nudges one randomly chosen factor (or the embedding) by `step` times
    /// a fresh Ginibre matrix.
    pub fn perturbed<R: Rng + ?Sized>(&self, step: f64, rng: &mut R) -> Self {
        let mut next = self.clone();
        let bob_count = next.bob_factors[0].len() + next.bob_factors[1].len();
        let total = bob_count + next.eve_factors.len() + 1;
        let pick = rng.random_range(0..total);
        let target = if pick < next.bob_factors[0].len() {
            &mut next.bob_factors[0][pick]
        } else if pick < bob_count {
            let idx = pick - next.bob_factors[0].len();
            &mut next.bob_factors[1][idx]
        } else if pick < bob_count + next.eve_factors.len() {
            &mut next.eve_factors[pick - bob_count]
        } else {
            &mut next.embed
        };
        let noise = ginibre(target.nrows(), target.ncols(), rng) * Complex64::new(step, 0.0);
        *target += noise;
        next
    }
}

/// A fresh random strategy on the source span of `params`. Eve's dimension
/// is a free choice; 2 keeps the joint space at dimension 8.
pub fn random_strategy<R: Rng + ?Sized>(
    params: &ProtocolParams,
    dim_eve: usize,
    rng: &mut R,
) -> ExplicitStrategy {
    let span = SpanStates::from_gram(gram_matrix(params).matrix());
    StrategyAnsatz::random(span.dim, 4, dim_eve, params.bins_x, params.bins_p, rng).build(&span)
}

/// Greedy local search over the ansatz parameters: propose one perturbed
/// factor at a time, keep it when the objective improves. The returned
/// value never falls below the starting point.
pub fn hill_climb<R, F>(
    mut ansatz: StrategyAnsatz,
    span: &SpanStates,
    objective: F,
    step: f64,
    iterations: usize,
    rng: &mut R,
) -> (StrategyAnsatz, ExplicitStrategy, f64)
where
    R: Rng + ?Sized,
    F: Fn(&ExplicitStrategy) -> f64,
{
    let mut best_strategy = ansatz.build(span);
    let mut best_value = objective(&best_strategy);
    for _ in 0..iterations {
        let candidate = ansatz.perturbed(step, rng);
        let strategy = candidate.build(span);
        let value = objective(&strategy);
        if value > best_value {
            ansatz = candidate;
            best_strategy = strategy;
            best_value = value;
        }
    }
    (ansatz, best_strategy, best_value)
}

/// Slack of the certificate's affine bound against one explicit strategy:
/// `alpha + lambda . omega'(strategy) - p_guess(strategy)`. Soundness
/// requires this to be nonnegative for every strategy.
pub fn uniformity_margin(
    cert: &DualCertificate,
    strategy: &ExplicitStrategy,
    layout: &ScoreLayout,
) -> f64 {
    let omega = strategy.score_distribution(layout);
    let cert_categories: Vec<_> = cert.lambda.iter().map(|e| e.category.clone()).collect();
    assert_eq!(omega.categories, cert_categories, "category order mismatch");
    cert.bound_at(&omega.freq) - strategy.guessing_probability()
}
