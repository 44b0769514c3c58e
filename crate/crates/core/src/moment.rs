//! Moment-matrix relaxation of the adversary's guessing probability, and
//! the affine dual certificates it yields.
//!
//! The question answered here: over every measurement strategy (device and
//! adversary jointly) that reproduces given category probabilities on the
//! four characterized states, how often can a commuting adversary system
//! predict the sign of the generation-round outcome? The states enter only
//! through their Gram matrix, so the optimization is over abstract operator
//! moments: a single positive-semidefinite matrix of inner products
//! `<phi_x| w† v |phi_x'>` indexed by state/word pairs, with known entries
//! pinned to the Gram matrix and score constraints imposed as linear
//! equalities on diagonal moments.
//!
//! Operator model. Both device measurements are taken projective; dilating a
//! general outcome POVM to a projective measurement on a larger space
//! changes no moment that appears here, so the bound is unaffected while
//! projectivity buys hard structure: words collapse under idempotence, and
//! distinct outcomes of one measurement annihilate each other. One outcome
//! per measurement is eliminated through completeness (its moments are
//! affine in the others), which removes the exact linear dependence that
//! the full outcome set would plant in the moment matrix; the adversary,
//! who guesses one bit, contributes a single projector. The adversary
//! commutes with the device, the relaxation's stand-in for acting on a
//! separate subsystem.
//!
//! Certificates. The dual of the solved program is an affine function of
//! the category probabilities that upper-bounds the guessing probability
//! for *every* quantum-realizable distribution, not just the solved one:
//! dual feasibility does not involve the constraint right-hand sides.
//! [`validate_certificate`] recomputes the dual residuals in compensated
//! arithmetic and inflates the certificate's constant by a rigorous bound
//! on everything the solver left behind, so a certificate that validates
//! holds exactly for the relaxation, independent of solver quality. The
//! inflation argument uses that every moment has modulus at most 1 (words
//! are products of projectors applied between unit vectors).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use qrx_sdp::{Block, EqRow, InteriorPoint, SdpProblem, SdpSolution, SolverOptions, SparseHermitian};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model;
use crate::params::ProtocolParams;
use crate::scores::{ScoreLabel, ScoreLayout};

/// Scoring weights of the category constraints: the weight of outcome `b`
/// of state `x` measured in basis `y` within category `c` is 1/4 when the
/// round scores there (uniform state choice on test rounds) and 0 otherwise.
#[derive(Debug, Clone)]
pub struct ScoreCoefficients {
    terms: Vec<Vec<(usize, bool, i32)>>,
}

impl ScoreCoefficients {
    pub fn build(layout: &ScoreLayout, m_x: usize, m_p: usize) -> Self {
        Self { terms: model::score_terms(layout, m_x, m_p) }
    }

    pub fn weight(&self, category: usize, b: i32, x: usize, y: bool) -> f64 {
        if self.terms[category].contains(&(x, y, b)) {
            0.25
        } else {
            0.0
        }
    }

    /// The `(x, y, b)` combinations scoring into `category`.
    pub fn terms(&self, category: usize) -> &[(usize, bool, i32)] {
        &self.terms[category]
    }

    pub fn n_categories(&self) -> usize {
        self.terms.len()
    }
}

/// Scoring weights for the configured layout.
pub fn build_kappa(params: &ProtocolParams) -> ScoreCoefficients {
    ScoreCoefficients::build(&params.layout(), params.m_x(), params.m_p())
}

/// Reduced operator word: an ordered product of device projectors followed
/// by an optional adversary projector. Device letters are generator indices;
/// the adversary letter commutes with all of them, so it is normal-ordered
/// to the end and collapses to one bit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Word {
    bob: Vec<u8>,
    eve: bool,
}

impl Word {
    fn identity() -> Self {
        Word { bob: Vec::new(), eve: false }
    }

    fn device(g: u8) -> Self {
        Word { bob: vec![g], eve: false }
    }

    fn adversary() -> Self {
        Word { bob: Vec::new(), eve: true }
    }

    fn with_adversary(mut self) -> Self {
        self.eve = true;
        self
    }

    fn is_identity(&self) -> bool {
        self.bob.is_empty() && !self.eve
    }

    /// Letters are self-adjoint, so the adjoint only reverses device order.
    fn adjoint(&self) -> Self {
        Word { bob: self.bob.iter().rev().copied().collect(), eve: self.eve }
    }
}

/// Which generators belong to which measurement. Generator indices
/// `0 .. n_x` are X-basis outcomes, the rest P-basis.
#[derive(Debug, Clone, Copy)]
struct GeneratorTable {
    n_x: usize,
    n_p: usize,
}

impl GeneratorTable {
    fn total(&self) -> usize {
        self.n_x + self.n_p
    }

    fn same_measurement(&self, a: u8, b: u8) -> bool {
        ((a as usize) < self.n_x) == ((b as usize) < self.n_x)
    }

    /// Word product under idempotence and same-measurement orthogonality;
    /// `None` is the zero operator.
    fn multiply(&self, a: &Word, b: &Word) -> Option<Word> {
        let mut bob = a.bob.clone();
        for &g in &b.bob {
            match bob.last() {
                Some(&last) if last == g => {}
                Some(&last) if self.same_measurement(last, g) => return None,
                _ => bob.push(g),
            }
        }
        Some(Word { bob, eve: a.eve || b.eve })
    }
}

/// A moment `<phi_x| word |phi_x'>` in canonical orientation: of the two
/// equivalent orientations (the adjoint moment with states swapped is its
/// conjugate), the lexicographically smaller one names the variable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct MomentKey {
    x: usize,
    word: Word,
    xp: usize,
}

impl MomentKey {
    /// Canonical key plus whether this orientation is the conjugated one,
    /// plus whether the moment is forced real (self-paired).
    fn canonicalize(self) -> (MomentKey, bool, bool) {
        let flipped = MomentKey { x: self.xp, word: self.word.adjoint(), xp: self.x };
        if flipped == self {
            (self, false, true)
        } else if flipped < self {
            (flipped, true, false)
        } else {
            (self, false, false)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MomentVar {
    re: usize,
    im: Option<usize>,
}

/// One category's constraint in variable space: `coeffs · y + shift` is the
/// category probability predicted by the moment vector.
#[derive(Debug, Clone)]
struct ScoreRow {
    coeffs: Vec<(usize, f64)>,
    shift: f64,
}

/// The assembled relaxation, reusable across score distributions: blocks
/// and objective are fixed by the parameters; only equality right-hand
/// sides depend on the probabilities being certified.
#[derive(Debug, Clone)]
pub struct MomentProblem {
    blocks: Vec<Block>,
    objective: Vec<f64>,
    objective_const: f64,
    n_vars: usize,
    score_rows: Vec<ScoreRow>,
    labels: Vec<ScoreLabel>,
    params_digest: String,
    pub level: usize,
    pub n_words: usize,
    pub matrix_dim: usize,
}

impl MomentProblem {
    pub fn n_moment_vars(&self) -> usize {
        self.n_vars
    }

    pub fn labels(&self) -> &[ScoreLabel] {
        &self.labels
    }

    /// Category whose equality row is omitted. The rows sum to the
    /// completeness identity, so one is redundant; dropping the last fixes
    /// the certificate gauge at `lambda = 0` there. Affine certificates are
    /// gauge-equivalent because category probabilities sum to 1.
    pub fn dropped_category(&self) -> usize {
        self.labels.len() - 1
    }

    /// Instance constraining each category probability to equal `omega`.
    pub fn equality_instance(&self, omega: &[f64]) -> Result<SdpProblem, CoreError> {
        self.check_omega(omega)?;
        let dropped = self.dropped_category();
        let eq_rows = self
            .score_rows
            .iter()
            .zip(omega)
            .enumerate()
            .filter(|&(c, _)| c != dropped)
            .map(|(_, (row, &w))| EqRow { coeffs: row.coeffs.clone(), rhs: w - row.shift })
            .collect();
        Ok(SdpProblem {
            n_vars: self.n_vars,
            blocks: self.blocks.clone(),
            eq_rows,
            obj: self.objective.clone(),
            obj_const: self.objective_const,
        })
    }

    /// Instance tolerating `|probability - omega_c| <= delta_c` per
    /// category, realized as scalar slack blocks instead of equalities.
    pub fn interval_instance(&self, omega: &[f64], delta: &[f64]) -> Result<SdpProblem, CoreError> {
        self.check_omega(omega)?;
        if delta.len() != self.labels.len() {
            return Err(CoreError::Params(format!(
                "{} tolerances for {} categories",
                delta.len(),
                self.labels.len()
            )));
        }
        let mut blocks = self.blocks.clone();
        for (c, row) in self.score_rows.iter().enumerate() {
            for upper in [true, false] {
                let sign = if upper { -1.0 } else { 1.0 };
                let margin = if upper {
                    omega[c] + delta[c] - row.shift
                } else {
                    row.shift - (omega[c] - delta[c])
                };
                let mut terms = Vec::with_capacity(row.coeffs.len());
                for &(var, coeff) in &row.coeffs {
                    let mut m = SparseHermitian::new();
                    m.push_sym(0, 0, Complex64::new(sign * coeff, 0.0));
                    terms.push((var, m));
                }
                blocks.push(Block {
                    dim: 1,
                    g0: DMatrix::from_element(1, 1, Complex64::new(margin, 0.0)),
                    terms,
                });
            }
        }
        Ok(SdpProblem {
            n_vars: self.n_vars,
            blocks,
            eq_rows: Vec::new(),
            obj: self.objective.clone(),
            obj_const: self.objective_const,
        })
    }

    /// Instance with the score constraints removed entirely.
    pub fn unconstrained_instance(&self) -> SdpProblem {
        SdpProblem {
            n_vars: self.n_vars,
            blocks: self.blocks.clone(),
            eq_rows: Vec::new(),
            obj: self.objective.clone(),
            obj_const: self.objective_const,
        }
    }

    /// Category probabilities a moment vector reproduces, shift included.
    pub fn predicted_omega(&self, y: &[f64]) -> Vec<f64> {
        self.score_rows
            .iter()
            .map(|row| row.shift + row.coeffs.iter().map(|&(v, c)| c * y[v]).sum::<f64>())
            .collect()
    }

    fn check_omega(&self, omega: &[f64]) -> Result<(), CoreError> {
        if omega.len() != self.labels.len() {
            return Err(CoreError::Params(format!(
                "{} probabilities for {} categories",
                omega.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Builds the relaxation at the given level for the configured binning.
///
/// Level 1 takes words {identity, device generators, adversary}; level 2
/// adds every device-adversary product. `adversary_outcomes` is the guessed
/// alphabet and must be 2 (the sign of the generation outcome).
pub fn build_moment_problem(
    params: &ProtocolParams,
    level: usize,
    adversary_outcomes: usize,
) -> Result<MomentProblem, CoreError> {
    if !(1..=2).contains(&level) {
        return Err(CoreError::Params(format!("relaxation level {level} unsupported (1 or 2)")));
    }
    if adversary_outcomes != 2 {
        return Err(CoreError::Params(format!(
            "adversary guesses a sign bit; {adversary_outcomes} outcomes unsupported"
        )));
    }
    params.validate()?;

    let layout = params.layout();
    let m_x = params.m_x();
    let m_p = params.m_p();
    let gens = GeneratorTable { n_x: 2 * m_x - 1, n_p: 2 * m_p - 1 };
    let gram = model::gram_matrix(params);
    let n_states = gram.dim();

    let mut words = vec![Word::identity()];
    for g in 0..gens.total() {
        words.push(Word::device(g as u8));
    }
    words.push(Word::adversary());
    if level == 2 {
        for g in 0..gens.total() {
            words.push(Word::device(g as u8).with_adversary());
        }
    }
    let n_words = words.len();
    let dim = n_states * n_words;

    // Register variables and accumulate coefficient matrices position by
    // position over the upper triangle.
    let mut registry: BTreeMap<MomentKey, MomentVar> = BTreeMap::new();
    let mut n_vars = 0;
    let mut coeff_mats: Vec<SparseHermitian> = Vec::new();
    let mut g0 = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));

    for row in 0..dim {
        for col in row..dim {
            let (x, w) = (row / n_words, row % n_words);
            let (xp, v) = (col / n_words, col % n_words);
            let Some(product) = gens.multiply(&words[w].adjoint(), &words[v]) else {
                continue;
            };
            if product.is_identity() {
                g0[(row, col)] = gram.entry(x, xp);
                g0[(col, row)] = gram.entry(xp, x);
                continue;
            }
            let key = MomentKey { x, word: product, xp };
            let (canon, conjugated, real) = key.canonicalize();
            let var = *registry.entry(canon).or_insert_with(|| {
                let re = n_vars;
                n_vars += 1;
                let im = if real {
                    None
                } else {
                    n_vars += 1;
                    Some(n_vars - 1)
                };
                coeff_mats.push(SparseHermitian::new());
                if im.is_some() {
                    coeff_mats.push(SparseHermitian::new());
                }
                MomentVar { re, im }
            });
            if row == col {
                debug_assert!(var.im.is_none(), "diagonal moments are self-adjoint");
                coeff_mats[var.re].push_sym(row, col, Complex64::new(1.0, 0.0));
            } else {
                coeff_mats[var.re].push_sym(row, col, Complex64::new(1.0, 0.0));
                if let Some(im) = var.im {
                    let sign = if conjugated { -1.0 } else { 1.0 };
                    coeff_mats[im].push_sym(row, col, Complex64::new(0.0, sign));
                }
            }
        }
    }

    let terms: Vec<(usize, SparseHermitian)> = coeff_mats
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .collect();
    let blocks = vec![Block { dim, g0, terms }];

    // Diagonal moment <phi_x| gen |phi_x> of one device generator; these
    // are the only variables the score rows and objective touch.
    let diag_var = |x: usize, g: usize| -> usize {
        let key = MomentKey { x, word: Word::device(g as u8), xp: x };
        registry[&key].re
    };
    let adv_var = |x: usize| -> usize {
        let key = MomentKey { x, word: Word::adversary(), xp: x };
        registry[&key].re
    };
    let pair_var = |x: usize, g: usize| -> usize {
        let key = MomentKey { x, word: Word::device(g as u8).with_adversary(), xp: x };
        registry[&key].re
    };

    // Score rows. An outcome kept as a generator contributes its diagonal
    // moment; the eliminated outcome contributes 1 minus the rest of its
    // measurement.
    let kappa = ScoreCoefficients::build(&layout, m_x, m_p);
    let mut score_rows = Vec::with_capacity(layout.len());
    for c in 0..layout.len() {
        let mut coeffs: BTreeMap<usize, f64> = BTreeMap::new();
        let mut shift = 0.0;
        for &(x, y, b) in kappa.terms(c) {
            let (m, base, count) =
                if y { (m_p, gens.n_x, gens.n_p) } else { (m_x, 0, gens.n_x) };
            let pos = model::signed_bin_position(b, m);
            if pos < count {
                *coeffs.entry(diag_var(x, base + pos)).or_insert(0.0) += 0.25;
            } else {
                shift += 0.25;
                for g in 0..count {
                    *coeffs.entry(diag_var(x, base + g)).or_insert(0.0) -= 0.25;
                }
            }
        }
        score_rows.push(ScoreRow { coeffs: coeffs.into_iter().collect(), shift });
    }

    // Objective: the adversary's projector guesses "negative sign"; the
    // complementary outcomes expand through completeness. With M the total
    // negative-sign element of the generation measurement and E the
    // adversary's projector,
    //   P(guess) = <M E> + <(1-M)(1-E)> = 1 - <M> - <E> + 2 <M E>,
    // evaluated on the generation state.
    let mut objective = vec![0.0; n_vars];
    let objective_const = 1.0;
    objective[adv_var(0)] -= 1.0;
    for pos in 0..m_p {
        objective[diag_var(0, gens.n_x + pos)] -= 1.0;
        objective[pair_var(0, gens.n_x + pos)] += 2.0;
    }

    Ok(MomentProblem {
        blocks,
        objective,
        objective_const,
        n_vars,
        score_rows,
        labels: layout.labels().to_vec(),
        params_digest: params.digest(),
        level,
        n_words,
        matrix_dim: dim,
    })
}

/// One lambda weight of an affine certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub category: ScoreLabel,
    pub value: f64,
}

/// Affine upper bound on the guessing probability: for every
/// quantum-realizable category distribution `w` (at this relaxation level),
/// `P(guess) <= alpha + sum_c lambda_c w_c`. `validity_margin` is the total
/// inflation added to `alpha` by validation; it is already included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    pub alpha: f64,
    pub lambda: Vec<LambdaEntry>,
    pub level: usize,
    pub params_hash: String,
    pub validity_margin: f64,
}

impl DualCertificate {
    pub fn bound_at(&self, omega: &[f64]) -> f64 {
        assert_eq!(omega.len(), self.lambda.len(), "one probability per category");
        self.alpha + self.lambda.iter().zip(omega).map(|(l, w)| l.value * w).sum::<f64>()
    }

    pub fn lambda_values(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l.value).collect()
    }

    /// Smallest and largest lambda weight.
    pub fn lambda_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for l in &self.lambda {
            lo = lo.min(l.value);
            hi = hi.max(l.value);
        }
        (lo, hi)
    }

    /// Index of the category with the smallest weight; ties resolve to the
    /// earliest category in layout order.
    pub fn argmin_lambda(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.lambda.iter().enumerate() {
            if l.value < self.lambda[best].value {
                best = i;
            }
        }
        best
    }
}

/// Solved guessing-probability bound with its validated certificate.
#[derive(Debug, Clone)]
pub struct GuessingBound {
    /// Relaxation optimum (primal objective), clamped to [0, 1].
    pub value: f64,
    pub certificate: DualCertificate,
    /// Raw solver output, kept for warm starts and diagnostics.
    pub solution: SdpSolution,
}

/// Default solver settings for relaxation instances. The Gram matrix is
/// nearly rank one at the amplitudes of interest, which caps the reachable
/// duality gap around 1e-7; certificate validation absorbs the leftovers,
/// so tighter targets would only burn iterations.
pub fn default_solver_options() -> SolverOptions {
    SolverOptions {
        max_iter: 300,
        gap_tol: 1e-7,
        feas_tol: 1e-7,
        ..SolverOptions::default()
    }
}

/// Solves the relaxation at the score distribution `omega` and returns the
/// optimum with a validated affine certificate. `warm` seeds the interior
/// point with a previous solution's moment vector (useful along sweeps).
pub fn solve_pguess(
    problem: &MomentProblem,
    omega: &[f64],
    opts: &SolverOptions,
    warm: Option<&[f64]>,
) -> Result<GuessingBound, CoreError> {
    let instance = problem.equality_instance(omega)?;
    let solver = InteriorPoint::with_options(opts.clone());
    let solution = match warm {
        Some(y0) => solver.solve_from(&instance, y0),
        None => solver.solve(&instance),
    }?;
    let certificate = validate_certificate(problem, &solution, 1e-6)?;
    Ok(GuessingBound { value: solution.value.clamp(0.0, 1.0), certificate, solution })
}

/// Compensated sum together with a rigorous rounding-error bound
/// (`4u * sum |terms|` covers product rounding plus compensated
/// accumulation).
fn kahan_with_bound(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut abs = 0.0;
    for v in values {
        abs += v.abs();
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    (sum + comp, 4.0 * f64::EPSILON * abs)
}

/// Turns a solver dual into a certificate that holds exactly for the
/// relaxation. Multipliers are refit by least squares, the dual matrix is
/// corrected variable by variable to cancel the remaining infeasibility
/// (coefficient supports are disjoint, so the corrections decouple), and
/// `alpha` absorbs every leftover residual, rounding bound, and eigenvalue
/// deficit. Residual absorption is sound because each moment variable has
/// modulus at most 1; the eigenvalue deficit costs at most `deficit * dim`
/// because feasible moment matrices have unit-bounded diagonals. Fails
/// when the total repair exceeds `cap`.
pub fn validate_certificate(
    problem: &MomentProblem,
    solution: &SdpSolution,
    cap: f64,
) -> Result<DualCertificate, CoreError> {
    let block = &problem.blocks[0];
    let mut y = solution.dual_matrices[0].clone();
    let dim = y.nrows();
    if y.nrows() != dim || y.ncols() != dim {
        return Err(CoreError::Certificate("dual matrix shape mismatch".into()));
    }
    // Exact hermitization: the mean of an entry and the mirrored conjugate.
    for r in 0..dim {
        for c in r..dim {
            let m = 0.5 * (y[(r, c)] + y[(c, r)].conj());
            y[(r, c)] = m;
            y[(c, r)] = m.conj();
        }
    }
    let dropped = problem.dropped_category();
    let active: Vec<usize> =
        (0..problem.labels.len()).filter(|&c| c != dropped).collect();
    if solution.eq_multipliers.len() != active.len() {
        return Err(CoreError::Certificate("multiplier count mismatch".into()));
    }

    // Targets d_i = <B_i, Y> + c_i per variable; dual feasibility wants
    // (A^T nu)_i = d_i. Entries already carry both Hermitian mirrors, so
    // tr(B Y) is a plain sum over them.
    let compute_targets = |y: &DMatrix<Complex64>| -> Vec<f64> {
        let mut target = problem.objective.clone();
        for (var, mat) in &block.terms {
            let (inner, _) = kahan_with_bound(
                mat.entries()
                    .iter()
                    .map(|&(r, c, v)| (v * y[(c as usize, r as usize)]).re),
            );
            target[*var] += inner;
        }
        target
    };

    // Multipliers in full category order; the dropped row's gauge is 0.
    // The solver's multipliers lag the dual matrix on ill-conditioned
    // instances, so refit them: for fixed Y the residual is affine in nu,
    // and the least-squares choice minimizes exactly what alpha must later
    // absorb. The normal equations are category-by-category and tiny.
    let fit_multipliers = |target: &[f64]| -> Vec<f64> {
        let mut normal = DMatrix::<f64>::zeros(active.len(), active.len());
        let mut rhs = nalgebra::DVector::<f64>::zeros(active.len());
        for (i, &ci) in active.iter().enumerate() {
            for &(var, coeff) in &problem.score_rows[ci].coeffs {
                rhs[i] += coeff * target[var];
            }
            for (j, &cj) in active.iter().enumerate() {
                let mut acc = 0.0;
                for &(var, ca) in &problem.score_rows[ci].coeffs {
                    if let Ok(k) = problem.score_rows[cj]
                        .coeffs
                        .binary_search_by(|p| p.0.cmp(&var))
                    {
                        acc += ca * problem.score_rows[cj].coeffs[k].1;
                    }
                }
                normal[(i, j)] = acc;
            }
        }
        let mut nu = vec![0.0; problem.labels.len()];
        match normal.full_piv_lu().solve(&rhs) {
            Some(sol) => {
                for (i, &c) in active.iter().enumerate() {
                    nu[c] = sol[i];
                }
            }
            None => {
                for (i, &c) in active.iter().enumerate() {
                    nu[c] = solution.eq_multipliers[i];
                }
            }
        }
        nu
    };

    let spread = |nu: &[f64]| -> Vec<f64> {
        let mut transposed = vec![0.0; problem.n_vars];
        for (c, row) in problem.score_rows.iter().enumerate() {
            if c == dropped {
                continue;
            }
            for &(var, coeff) in &row.coeffs {
                transposed[var] += coeff * nu[c];
            }
        }
        transposed
    };

    // Trace budget for feasible moment matrices: diagonal entries come in
    // word groups (identity, one group of generator words per measurement
    // per word level, one adversary group), and each group sums to at
    // most 1 per prepared state because the generators of a measurement
    // sit under a resolution of the identity. An eigenvalue floor of -e
    // on the dual matrix therefore costs at most e times this budget.
    let states = problem.matrix_dim / problem.n_words.max(1);
    let trace_bound = (states * (2 + 2 * problem.level)) as f64;

    // Repair cycle. Residuals are cancelled inside Y itself: coefficient
    // matrices of distinct variables have disjoint supports (the real and
    // imaginary parts of a shared moment sit on the same positions but are
    // orthogonal), so adding -r_i / |B_i|^2 * B_i per variable cancels
    // every residual independently without touching the constant block's
    // support. The cancellation can push the smallest eigenvalue slightly
    // negative; projecting back onto the positive cone fixes that but
    // leaks small new residuals. The leak contracts round over round, and
    // every exit path ends on a cancellation so the accounting pass sees
    // residuals at rounding level.
    let rounds = 96;
    let mut nu = vec![0.0; problem.labels.len()];
    for round in 0..=rounds {
        let target = compute_targets(&y);
        nu = fit_multipliers(&target);
        let transposed = spread(&nu);
        for (var, mat) in &block.terms {
            let residual = target[*var] - transposed[*var];
            let norm2: f64 = mat.entries().iter().map(|e| e.2.norm_sqr()).sum();
            let scale = Complex64::new(-residual / norm2, 0.0);
            for &(r, c, v) in mat.entries() {
                y[(r as usize, c as usize)] += v * scale;
            }
        }
        if round == rounds {
            break;
        }
        let eig = y.clone().symmetric_eigen();
        let mut min_eig = f64::INFINITY;
        let mut max_abs: f64 = 0.0;
        for &v in eig.eigenvalues.iter() {
            min_eig = min_eig.min(v);
            max_abs = max_abs.max(v.abs());
        }
        let slack = 64.0 * f64::EPSILON * max_abs * dim as f64;
        if (slack - min_eig).max(0.0) * trace_bound < 0.3 * cap {
            break;
        }
        let clipped = eig.eigenvalues.map(|v| Complex64::new(v.max(0.0), 0.0));
        let q = eig.eigenvectors;
        let rebuilt = &q * DMatrix::from_diagonal(&clipped) * q.adjoint();
        y.copy_from(&rebuilt);
        for r in 0..dim {
            for c in r..dim {
                let m = 0.5 * (y[(r, c)] + y[(c, r)].conj());
                y[(r, c)] = m;
                y[(c, r)] = m.conj();
            }
        }
    }

    // Accounting pass over the final matrix. A primal-feasible moment
    // vector y' has |y'_i| <= 1, so the affine bound can violate by at
    // most sum_i |r_i|; alpha absorbs that together with every rounding
    // bound.
    let transposed = spread(&nu);
    let mut repair = 0.0;
    for (var, mat) in &block.terms {
        let (inner, inner_err) = kahan_with_bound(
            mat.entries()
                .iter()
                .map(|&(r, c, v)| (v * y[(c as usize, r as usize)]).re),
        );
        let residual = inner + problem.objective[*var] - transposed[*var];
        repair += residual.abs() + inner_err + 2.0 * f64::EPSILON * residual.abs();
    }

    // Any remaining eigenvalue deficit is charged against the trace
    // budget. The floor folds in the backward error of the eigensolver.
    let eig = y.clone().symmetric_eigen();
    let mut min_eig = f64::INFINITY;
    let mut max_abs: f64 = 0.0;
    for &v in eig.eigenvalues.iter() {
        min_eig = min_eig.min(v);
        max_abs = max_abs.max(v.abs());
    }
    let eig_slack = 64.0 * f64::EPSILON * max_abs * dim as f64;
    let floor = min_eig - eig_slack;
    if floor < 0.0 {
        repair += -floor * trace_bound;
    }

    // alpha = c0 + <G0, Y> - nu . shift, with its own rounding bound.
    let (g0_inner, g0_err) = kahan_with_bound(
        (0..dim).flat_map(|r| (0..dim).map(move |c| (r, c))).map(|(r, c)| {
            (block.g0[(r, c)].conj() * y[(r, c)]).re
        }),
    );
    let (shift_dot, shift_err) = kahan_with_bound(
        problem.score_rows.iter().enumerate().map(|(c, row)| -nu[c] * row.shift),
    );
    let alpha_raw = problem.objective_const + g0_inner + shift_dot;
    let margin = repair + g0_err + shift_err + 4.0 * f64::EPSILON * alpha_raw.abs();
    if !margin.is_finite() || margin > cap {
        return Err(CoreError::Certificate(format!(
            "certificate repair {margin:.3e} exceeds cap {cap:.1e}"
        )));
    }

    let lambda = problem
        .labels
        .iter()
        .zip(&nu)
        .map(|(label, &value)| LambdaEntry { category: label.clone(), value })
        .collect();
    Ok(DualCertificate {
        alpha: alpha_raw + margin,
        lambda,
        level: problem.level,
        params_hash: problem.params_digest.clone(),
        validity_margin: margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::honest_score_distribution;
    use approx::assert_relative_eq;

    fn table_params() -> ProtocolParams {
        ProtocolParams {
            bin_half_range: 1.0066977406735522,
            ..ProtocolParams::default()
        }
    }

    #[test]
    fn kappa_reference_weights() {
        let params = table_params();
        let kappa = build_kappa(&params);
        let layout = params.layout();
        let plus2x = layout.index_of(&"+2_X".parse().unwrap()).unwrap();
        assert_eq!(kappa.weight(plus2x, 2, 0, false), 0.25);
        assert_eq!(kappa.weight(plus2x, 2, 0, true), 0.0);
        assert_eq!(kappa.weight(plus2x, 2, 1, false), 0.0);

        // Partition: each (x, y(x), b) scores into exactly one category.
        let total: f64 = (0..kappa.n_categories()).map(|c| kappa.weight(c, 1, 2, true)).sum();
        assert_eq!(total, 0.25);
        let misaligned: f64 = (0..kappa.n_categories()).map(|c| kappa.weight(c, 1, 2, false)).sum();
        assert_eq!(misaligned, 0.0);
    }

    #[test]
    fn word_counts_by_level() {
        let params = table_params();
        let p1 = build_moment_problem(&params, 1, 2).unwrap();
        // Identity, five X generators, one P generator, one adversary.
        assert_eq!(p1.n_words, 8);
        assert_eq!(p1.matrix_dim, 32);
        let p2 = build_moment_problem(&params, 2, 2).unwrap();
        assert_eq!(p2.n_words, 14);
        assert_eq!(p2.matrix_dim, 56);
        assert!(p2.n_moment_vars() > p1.n_moment_vars());

        assert!(build_moment_problem(&params, 3, 2).is_err());
        assert!(build_moment_problem(&params, 2, 3).is_err());
    }

    #[test]
    fn identity_block_carries_the_gram_matrix() {
        let params = table_params();
        let problem = build_moment_problem(&params, 2, 2).unwrap();
        let gram = crate::model::gram_matrix(&params);
        let block = &problem.blocks[0];
        let n = problem.n_words;
        for x in 0..4 {
            for xp in 0..4 {
                let got = block.g0[(x * n, xp * n)];
                assert!((got - gram.entry(x, xp)).norm() < 1e-15);
            }
        }
        // Everything off the identity row/column of g0 is a variable slot.
        assert_relative_eq!(block.g0[(1, 2)].norm(), 0.0);
    }

    #[test]
    fn score_rows_sum_to_the_completeness_identity() {
        let params = table_params();
        let problem = build_moment_problem(&params, 2, 2).unwrap();
        let mut col_sums: BTreeMap<usize, f64> = BTreeMap::new();
        let mut shift_sum = 0.0;
        for row in &problem.score_rows {
            shift_sum += row.shift;
            for &(var, coeff) in &row.coeffs {
                *col_sums.entry(var).or_insert(0.0) += coeff;
            }
        }
        assert_relative_eq!(shift_sum, 1.0, max_relative = 1e-15);
        for (&var, &sum) in &col_sums {
            assert!(sum.abs() < 1e-15, "variable {var} does not cancel: {sum}");
        }
    }

    #[test]
    fn word_algebra_collapses_and_annihilates() {
        let gens = GeneratorTable { n_x: 5, n_p: 1 };
        let p0 = Word::device(0);
        let p1 = Word::device(1);
        let q = Word::device(5);
        assert_eq!(gens.multiply(&p0, &p0), Some(p0.clone()));
        assert_eq!(gens.multiply(&p0, &p1), None);
        let pq = gens.multiply(&p0, &q).unwrap();
        assert_eq!(pq.bob, vec![0, 5]);
        // The adversary letter normal-orders to the end regardless of side.
        let f = Word::adversary();
        let fp = gens.multiply(&f, &p0).unwrap();
        assert_eq!(fp.bob, vec![0]);
        assert!(fp.eve);
        assert_eq!(gens.multiply(&fp, &f), Some(fp.clone()));
        // Adjoint reverses device letters.
        assert_eq!(pq.adjoint().bob, vec![5, 0]);
    }

    #[test]
    fn unconstrained_and_vacuum_problems_reach_certainty() {
        let params = table_params();
        let problem = build_moment_problem(&params, 1, 2).unwrap();
        let solver = InteriorPoint::with_options(default_solver_options());
        let free = solver.solve(&problem.unconstrained_instance()).unwrap();
        assert!((free.value - 1.0).abs() < 1e-6, "unconstrained value {}", free.value);

        let vacuum = ProtocolParams { amplitude: 0.0, ..table_params() };
        let omega = honest_score_distribution(&vacuum);
        let vp = build_moment_problem(&vacuum, 1, 2).unwrap();
        let bound = solve_pguess(&vp, &omega, &default_solver_options(), None).unwrap();
        assert!(bound.value > 1.0 - 1e-6, "vacuum value {}", bound.value);
    }

    #[test]
    fn honest_statistics_pin_the_guessing_probability_below_one() {
        let params = table_params();
        let omega = honest_score_distribution(&params);
        let problem = build_moment_problem(&params, 2, 2).unwrap();
        let bound = solve_pguess(&problem, &omega, &default_solver_options(), None).unwrap();
        assert!(bound.value < 1.0 - 1e-4, "level-2 value {}", bound.value);
        // Weak duality and certificate consistency at the solved point.
        let cert_at_omega = bound.certificate.bound_at(&omega);
        assert!(cert_at_omega >= bound.value - 1e-9);
        assert!(bound.certificate.validity_margin >= 0.0);
        assert!(bound.certificate.validity_margin < 1e-6);
    }

    #[test]
    fn level_two_is_at_least_as_tight_as_level_one() {
        let params = table_params();
        let omega = honest_score_distribution(&params);
        let p1 = build_moment_problem(&params, 1, 2).unwrap();
        let p2 = build_moment_problem(&params, 2, 2).unwrap();
        let opts = default_solver_options();
        let b1 = solve_pguess(&p1, &omega, &opts, None).unwrap();
        let b2 = solve_pguess(&p2, &omega, &opts, None).unwrap();
        // Each reported value sits within its own convergence gap of the
        // level's true optimum, so the ordering holds up to the sum.
        let slop = b1.solution.gap + b2.solution.gap + 1e-9;
        assert!(
            b2.value <= b1.value + slop,
            "level 2 ({}) looser than level 1 ({}) beyond gap slop {}",
            b2.value,
            b1.value,
            slop
        );
    }

    #[test]
    fn certificate_is_uniform_across_efficiencies() {
        // Certificates bound every realizable distribution, so the bound
        // evaluated at another efficiency's honest statistics must dominate
        // that point's own optimum.
        let params = table_params();
        let problem = build_moment_problem(&params, 2, 2).unwrap();
        let opts = default_solver_options();
        let base = solve_pguess(&problem, &honest_score_distribution(&params), &opts, None).unwrap();
        for eta in [0.5, 0.75, 0.9] {
            let other = ProtocolParams { eta, ..table_params() };
            let omega = honest_score_distribution(&other);
            let there =
                solve_pguess(&problem, &omega, &opts, Some(&base.solution.y)).unwrap();
            let certified = base.certificate.bound_at(&omega);
            assert!(
                certified >= there.value - 1e-8,
                "eta {eta}: certificate {certified} below optimum {}",
                there.value
            );
        }
    }

    #[test]
    fn interval_relaxation_orders_by_width() {
        let params = table_params();
        let omega = honest_score_distribution(&params);
        let problem = build_moment_problem(&params, 1, 2).unwrap();
        let solver = InteriorPoint::with_options(default_solver_options());
        let eq = solve_pguess(&problem, &omega, &default_solver_options(), None).unwrap();
        let narrow = vec![1e-4; omega.len()];
        let wide = vec![1e-2; omega.len()];
        let v_narrow =
            solver.solve(&problem.interval_instance(&omega, &narrow).unwrap()).unwrap();
        let v_wide = solver.solve(&problem.interval_instance(&omega, &wide).unwrap()).unwrap();
        assert!(v_narrow.value >= eq.value - 1e-7, "{} vs {}", v_narrow.value, eq.value);
        assert!(v_wide.value >= v_narrow.value - 1e-7, "{} vs {}", v_wide.value, v_narrow.value);
    }

    #[test]
    fn predicted_omega_matches_constraints_at_solution() {
        let params = table_params();
        let omega = honest_score_distribution(&params);
        let problem = build_moment_problem(&params, 1, 2).unwrap();
        let bound = solve_pguess(&problem, &omega, &default_solver_options(), None).unwrap();
        let predicted = problem.predicted_omega(&bound.solution.y);
        let dropped = problem.dropped_category();
        for (c, (&want, got)) in omega.iter().zip(&predicted).enumerate() {
            if c == dropped {
                // The dropped row is implied by the others through
                // completeness, up to solver feasibility tolerance.
                assert!((want - got).abs() < 1e-6, "implied category: {want} vs {got}");
            } else {
                assert!((want - got).abs() < 1e-7, "category {c}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn certificates_serialize_round_trip() {
        let lambda = vec![
            LambdaEntry { category: "+2_X".parse().unwrap(), value: -0.25 },
            LambdaEntry { category: "1-all".parse().unwrap(), value: 0.0 },
        ];
        let cert = DualCertificate {
            alpha: 0.875,
            lambda,
            level: 2,
            params_hash: "ab".repeat(32),
            validity_margin: 1e-12,
        };
        let json = serde_json::to_string(&cert).unwrap();
        let back: DualCertificate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cert);
        assert_relative_eq!(
            cert.bound_at(&[0.4, 0.6]),
            0.875 - 0.25 * 0.4,
            max_relative = 1e-15
        );
        assert_eq!(cert.argmin_lambda(), 0);
        assert_eq!(cert.lambda_range(), (-0.25, 0.0));
    }
}
