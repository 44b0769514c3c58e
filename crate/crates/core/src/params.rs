//! The shared protocol parameter set.

use serde::{Deserialize, Serialize};

use crate::completeness::DeltaAllocation;
use crate::error::CoreError;
use crate::scores::{LayoutKind, ScoreLayout};

/// Every tunable of the pipeline in one place. The `Default` values are the
/// headline six-bin operating point; configs may override any subset (JSON
/// with unknown keys is rejected).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    /// Detection efficiency: power transmissivity from source to detector.
    pub eta: f64,
    /// Coherent signal amplitude `sqrt(mu)`.
    pub amplitude: f64,
    /// Probability that a round is a test round.
    pub gamma: f64,
    /// Protocol length. Integral, but stored as f64 so configs can write
    /// `3e10`; values up to 2^53 stay exact.
    pub n_rounds: f64,
    /// Outcome bins of the X-basis measurement (even, at least 2).
    pub bins_x: usize,
    /// Outcome bins of the P-basis measurement (even, at least 2).
    pub bins_p: usize,
    /// Half-range `L` of the finite binning window `(-L, L)`.
    pub bin_half_range: f64,
    /// Smoothing parameter of the extractable-entropy bound.
    pub eps_smooth: f64,
    /// Entropy-accumulation failure budget.
    pub eps_ea: f64,
    /// Extractor failure budget.
    pub eps_ext: f64,
    /// Total honest-abort budget distributed over the count-test categories.
    pub eps_completeness: f64,
    /// First auxiliary smoothing split; `None` means `eps_smooth / 4`.
    pub eps1: Option<f64>,
    /// Second auxiliary smoothing split; `None` means `eps_smooth / 4`.
    pub eps2: Option<f64>,
    pub delta_allocation: DeltaAllocation,
    pub layout: LayoutKind,
    /// Moment-relaxation level (1 or 2).
    pub relaxation_level: usize,
    /// Half bin count entering the accumulation variance and correction
    /// terms; `None` means `bins_x / 2`.
    pub vk_m: Option<usize>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            eta: 0.691,
            amplitude: 0.0672,
            gamma: 0.12,
            n_rounds: 3e10,
            bins_x: 6,
            bins_p: 2,
            bin_half_range: 2.0,
            eps_smooth: 4.99e-7,
            eps_ea: 1e-6,
            eps_ext: 1e-6,
            eps_completeness: 1e-3,
            eps1: None,
            eps2: None,
            delta_allocation: DeltaAllocation::Equal,
            layout: LayoutKind::TableDefault,
            relaxation_level: 2,
            vk_m: None,
        }
    }
}

impl ProtocolParams {
    pub fn mu(&self) -> f64 {
        self.amplitude * self.amplitude
    }

    /// Bins per sign in the X basis.
    pub fn m_x(&self) -> usize {
        self.bins_x / 2
    }

    /// Bins per sign in the P basis.
    pub fn m_p(&self) -> usize {
        self.bins_p / 2
    }

    pub fn eps1(&self) -> f64 {
        self.eps1.unwrap_or(self.eps_smooth / 4.0)
    }

    pub fn eps2(&self) -> f64 {
        self.eps2.unwrap_or(self.eps_smooth / 4.0)
    }

    pub fn vk_m(&self) -> usize {
        self.vk_m.unwrap_or(self.bins_x / 2)
    }

    pub fn layout(&self) -> ScoreLayout {
        ScoreLayout::new(self.layout, self.m_x(), self.m_p())
    }

    /// Stable digest of the full parameter set, used to bind certificates
    /// and cached artifacts to the parameters that produced them. Fields
    /// serialize in declaration order with shortest-round-trip floats, so
    /// equal parameter values always hash alike.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("parameter serialization cannot fail");
        let hash = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in hash {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let err = |msg: String| Err(CoreError::Params(msg));
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return err(format!("eta = {} outside [0, 1]", self.eta));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return err(format!("amplitude = {} must be finite and nonnegative", self.amplitude));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return err(format!("gamma = {} outside (0, 1)", self.gamma));
        }
        if !(self.n_rounds >= 1.0 && self.n_rounds <= 2f64.powi(53)) {
            return err(format!("n_rounds = {} outside [1, 2^53]", self.n_rounds));
        }
        if self.n_rounds.fract() != 0.0 {
            return err(format!("n_rounds = {} is not an integer", self.n_rounds));
        }
        for (name, bins) in [("bins_x", self.bins_x), ("bins_p", self.bins_p)] {
            if bins < 2 || bins % 2 != 0 {
                return err(format!("{name} = {bins} must be even and at least 2"));
            }
        }
        if !(self.bin_half_range > 0.0 && self.bin_half_range.is_finite()) {
            return err(format!("bin_half_range = {} must be positive", self.bin_half_range));
        }
        for (name, eps) in [
            ("eps_smooth", self.eps_smooth),
            ("eps_ea", self.eps_ea),
            ("eps_ext", self.eps_ext),
            ("eps_completeness", self.eps_completeness),
            ("eps1", self.eps1()),
            ("eps2", self.eps2()),
        ] {
            if !(eps > 0.0 && eps < 1.0) {
                return err(format!("{name} = {eps} outside (0, 1)"));
            }
        }
        // The entropy bound takes log2(2 / (eps_smooth - eps2 - 2 eps1)).
        if self.eps2() + 2.0 * self.eps1() >= self.eps_smooth {
            return err(format!(
                "eps2 + 2 eps1 = {} must stay below eps_smooth = {}",
                self.eps2() + 2.0 * self.eps1(),
                self.eps_smooth
            ));
        }
        if !(self.relaxation_level == 1 || self.relaxation_level == 2) {
            return err(format!("relaxation_level = {} (supported: 1, 2)", self.relaxation_level));
        }
        if let Some(m) = self.vk_m {
            if m < 1 {
                return err("vk_m must be at least 1".into());
            }
        }
        Ok(())
    }
}
