//! Problem data: blocks, coefficient matrices, equality rows.

use nalgebra::DMatrix;
use num_complex::Complex;

use crate::SdpError;

pub type C64 = Complex<f64>;

/// Sparse Hermitian coefficient matrix.
///
/// Entries are stored as an explicit list with both triangles present, so
/// traces and accumulations are plain loops over the list. Duplicate
/// coordinates are allowed and sum. [`SparseHermitian::push_sym`] maintains
/// hermiticity by construction: off-diagonal pushes insert the conjugate
/// mirror entry, diagonal pushes drop any imaginary part.
#[derive(Debug, Clone, Default)]
pub struct SparseHermitian {
    entries: Vec<(u32, u32, C64)>,
}

impl SparseHermitian {
    pub fn new() -> Self {
        Self::default()
    }

    /// Coefficient at `(r, c)` plus its Hermitian mirror at `(c, r)`.
    pub fn push_sym(&mut self, r: usize, c: usize, v: C64) {
        if r == c {
            self.entries.push((r as u32, c as u32, Complex::new(v.re, 0.0)));
        } else {
            self.entries.push((r as u32, c as u32, v));
            self.entries.push((c as u32, r as u32, v.conj()));
        }
    }

    pub fn entries(&self) -> &[(u32, u32, C64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.2.norm()).fold(0.0, f64::max)
    }

    fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.0.max(e.1) as usize).max()
    }

    /// `Re tr(B M)`. For Hermitian `M` the trace is already real; for a
    /// general `M` this equals `tr(B hermitian_part(M))`, which is the
    /// quantity the Newton system needs.
    pub fn inner(&self, m: &DMatrix<C64>) -> f64 {
        let mut acc = 0.0;
        for &(r, c, v) in &self.entries {
            acc += (v * m[(c as usize, r as usize)]).re;
        }
        acc
    }

    /// `out += y * B`.
    pub fn add_scaled_into(&self, y: f64, out: &mut DMatrix<C64>) {
        for &(r, c, v) in &self.entries {
            out[(r as usize, c as usize)] += v.scale(y);
        }
    }

    pub fn to_dense(&self, dim: usize) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(dim, dim);
        self.add_scaled_into(1.0, &mut m);
        m
    }
}

/// One PSD constraint `G0 + sum_i y[i] * B_i >= 0`.
///
/// `terms` lists only the variables that actually touch this block.
#[derive(Debug, Clone)]
pub struct Block {
    pub dim: usize,
    pub g0: DMatrix<C64>,
    pub terms: Vec<(usize, SparseHermitian)>,
}

/// One dense equality `sum coeffs . y = rhs`.
#[derive(Debug, Clone)]
pub struct EqRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// Full problem statement. See the crate docs for the canonical form.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub n_vars: usize,
    pub blocks: Vec<Block>,
    pub eq_rows: Vec<EqRow>,
    /// Linear objective coefficients, length `n_vars`.
    pub obj: Vec<f64>,
    pub obj_const: f64,
}

impl SdpProblem {
    /// Structural checks: index ranges, dimension agreement, hermiticity of
    /// the constant blocks, and the block-size cap. Run before solving;
    /// the solver rejects anything that fails here.
    pub fn validate(&self, max_block_dim: usize) -> Result<(), SdpError> {
        if self.n_vars == 0 {
            return Err(SdpError::InvalidProblem("no decision variables".into()));
        }
        if self.obj.len() != self.n_vars {
            return Err(SdpError::InvalidProblem(format!(
                "objective has {} coefficients for {} variables",
                self.obj.len(),
                self.n_vars
            )));
        }
        if self.blocks.is_empty() {
            return Err(SdpError::InvalidProblem("no PSD blocks".into()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.dim == 0 || b.dim > max_block_dim {
                return Err(SdpError::InvalidProblem(format!(
                    "block {} has dimension {} (cap {})",
                    k, b.dim, max_block_dim
                )));
            }
            if b.g0.nrows() != b.dim || b.g0.ncols() != b.dim {
                return Err(SdpError::InvalidProblem(format!(
                    "block {}: constant term is {}x{}, expected {}x{}",
                    k,
                    b.g0.nrows(),
                    b.g0.ncols(),
                    b.dim,
                    b.dim
                )));
            }
            let scale = 1.0 + b.g0.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for i in 0..b.dim {
                for j in i..b.dim {
                    let d = (b.g0[(i, j)] - b.g0[(j, i)].conj()).norm();
                    if d > 1e-9 * scale {
                        return Err(SdpError::InvalidProblem(format!(
                            "block {}: constant term is not Hermitian at ({}, {})",
                            k, i, j
                        )));
                    }
                }
            }
            for (i, coeff) in &b.terms {
                if *i >= self.n_vars {
                    return Err(SdpError::InvalidProblem(format!(
                        "block {} references variable {} of {}",
                        k, i, self.n_vars
                    )));
                }
                if let Some(mi) = coeff.max_index() {
                    if mi >= b.dim {
                        return Err(SdpError::InvalidProblem(format!(
                            "block {}: coefficient for variable {} has index {} (dim {})",
                            k, i, mi, b.dim
                        )));
                    }
                }
            }
        }
        for (r, row) in self.eq_rows.iter().enumerate() {
            for (i, _) in &row.coeffs {
                if *i >= self.n_vars {
                    return Err(SdpError::InvalidProblem(format!(
                        "equality row {} references variable {} of {}",
                        r, i, self.n_vars
                    )));
                }
            }
        }
        Ok(())
    }

    /// `S(y) = G0 + sum_i y[i] B_i` for every block.
    pub fn lmi_value(&self, y: &[f64]) -> Vec<DMatrix<C64>> {
        self.blocks
            .iter()
            .map(|b| {
                let mut s = b.g0.clone();
                for (i, coeff) in &b.terms {
                    coeff.add_scaled_into(y[*i], &mut s);
                }
                s
            })
            .collect()
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        self.obj_const + self.obj.iter().zip(y).map(|(c, v)| c * v).sum::<f64>()
    }
}
