//! Phase-loss analysis of the push-push Mach-Zehnder phase modulator.
//!
//! Carrier-depletion phase sections lose optical power linearly in the
//! modulated phase, so a bare phase modulator would make the detection
//! efficiency depend on the basis choice. Driving both arms of a
//! Mach-Zehnder modulator in the same direction with a fixed ratio lets
//! the interference slope cancel that loss slope. This module models the
//! transfer function and finds the working points: two drive levels whose
//! output phases differ by the target (a quarter period for basis
//! selection) while their output intensities match, so the loss seen by
//! the detector is the same whichever basis is selected. Among matching
//! pairs the search keeps the brightest, minimizing the insertion loss.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::CoreError;

/// Push-push modulator description: arm two is driven at `ratio` times the
/// phase of arm one, `bias` is a static lossless offset on arm two, and
/// both arms lose the fraction `loss_slope` of their power per radian of
/// their own modulated phase.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MzmConfig {
    pub loss_slope: f64,
    pub bias: f64,
    pub ratio: f64,
}

impl Default for MzmConfig {
    fn default() -> Self {
        MzmConfig { loss_slope: calibrated_loss_slope(), bias: 0.0, ratio: 0.6 }
    }
}

impl MzmConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.loss_slope >= 0.0 && self.loss_slope.is_finite()) {
            return Err(CoreError::Params(format!(
                "loss_slope = {} must be finite and nonnegative",
                self.loss_slope
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CoreError::Params(format!("ratio = {} outside (0, 1]", self.ratio)));
        }
        if !self.bias.is_finite() {
            return Err(CoreError::Params(format!("bias = {} must be finite", self.bias)));
        }
        Ok(())
    }
}

/// Loss slope anchored to the measured 35% power drop over a phase swing
/// of `1.5 pi`.
pub fn calibrated_loss_slope() -> f64 {
    0.35 / (1.5 * PI)
}

/// Field amplitude of one arm after its phase section:
/// `sqrt(1 - loss_slope |phi|) e^{i phi}`.
pub fn arm_amplitude(phi: f64, cfg: &MzmConfig) -> Result<Complex64, CoreError> {
    let factor = 1.0 - cfg.loss_slope * phi.abs();
    if factor < 0.0 {
        return Err(CoreError::Params(format!(
            "phase {phi} exceeds the lossy range (slope {})",
            cfg.loss_slope
        )));
    }
    Ok(Complex64::from_polar(factor.sqrt(), phi))
}

/// Output of the modulator at drive phase `phi1` (arm two sits at
/// `ratio * phi1` plus the static bias): `(intensity, phase)` of the
/// combined field relative to the input carrier.
pub fn mzm_output(phi1: f64, cfg: &MzmConfig) -> Result<(f64, f64), CoreError> {
    let field = 0.5
        * (arm_amplitude(phi1, cfg)?
            + arm_amplitude(cfg.ratio * phi1, cfg)? * Complex64::from_polar(1.0, cfg.bias));
    Ok((field.norm_sqr(), field.arg()))
}

/// A drive interval and bias realizing the target output phase span with
/// basis-independent loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorkingPoint {
    pub phi1_start: f64,
    pub phi1_end: f64,
    /// Optimized static bias (the configured bias is ignored by the
    /// search).
    pub bias: f64,
    /// Output intensity at the two endpoints (equal within the matching
    /// tolerance); `1 -` this is the insertion loss at the working points.
    pub intensity: f64,
    /// Intensity excursion across the whole interval, `(max - min) / mean`.
    pub ripple: f64,
}

const PHI_STEP: f64 = 1e-3;
const BIAS_STEPS: usize = 1000;
/// Endpoint intensities must agree to this tolerance; commensurate with
/// the intensity change over one grid step.
const ENDPOINT_TOL: f64 = 2e-3;

/// Grid search over bias and drive interval for the brightest pair of
/// drive levels whose output phases differ by `target_phase_range` and
/// whose output intensities match.
///
/// The drive grid covers `[0, 2 pi]` (clipped to where the loss model
/// stays physical) at millradian resolution, the bias grid one turn in
/// `2 pi / 1000` steps. Output phase is unwrapped by nearest-branch
/// continuation along the drive sweep. The reported ripple is a
/// diagnostic of the traversed intensity curve, not the search objective:
/// minimizing ripple alone drives the ratio toward 1 where flatness is
/// bought with several decibels of insertion loss.
pub fn find_working_point(
    cfg: &MzmConfig,
    target_phase_range: f64,
) -> Result<WorkingPoint, CoreError> {
    cfg.validate()?;
    if !(target_phase_range >= 0.0 && target_phase_range.is_finite()) {
        return Err(CoreError::Params(format!(
            "target phase range {target_phase_range} must be finite and nonnegative"
        )));
    }
    if target_phase_range == 0.0 {
        // Degenerate interval: the rest point with no bias has unit
        // intensity regardless of the loss slope.
        return Ok(WorkingPoint {
            phi1_start: 0.0,
            phi1_end: 0.0,
            bias: 0.0,
            intensity: 1.0,
            ripple: 0.0,
        });
    }

    let phi_max = if cfg.loss_slope > 0.0 { (1.0 / cfg.loss_slope).min(2.0 * PI) } else { 2.0 * PI };
    let n = (phi_max / PHI_STEP).floor() as usize + 1;
    let mut arm1 = Vec::with_capacity(n);
    let mut arm2 = Vec::with_capacity(n);
    let probe = MzmConfig { bias: 0.0, ..*cfg };
    for i in 0..n {
        let phi = i as f64 * PHI_STEP;
        arm1.push(arm_amplitude(phi, &probe)?);
        arm2.push(arm_amplitude(cfg.ratio * phi, &probe)?);
    }

    let mut best: Option<WorkingPoint> = None;
    let mut intensity = vec![0.0f64; n];
    let mut phase = vec![0.0f64; n];
    for step in 0..BIAS_STEPS {
        let bias = step as f64 * 2.0 * PI / BIAS_STEPS as f64;
        let rot = Complex64::from_polar(1.0, bias);
        for i in 0..n {
            let field = 0.5 * (arm1[i] + arm2[i] * rot);
            intensity[i] = field.norm_sqr();
            let raw = field.arg();
            phase[i] = if i == 0 {
                raw
            } else {
                // Nearest-branch continuation.
                raw + 2.0 * PI * ((phase[i - 1] - raw) / (2.0 * PI)).round()
            };
        }

        let mut e = 0usize;
        for s in 0..n {
            if e < s {
                e = s;
            }
            while e < n && (phase[e] - phase[s]).abs() < target_phase_range {
                e += 1;
            }
            if e >= n {
                break;
            }
            if (intensity[s] - intensity[e]).abs() > ENDPOINT_TOL {
                continue;
            }
            let level = intensity[s].min(intensity[e]);
            if best.map_or(true, |b| level > b.intensity) {
                let window = &intensity[s..=e];
                let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = window.iter().cloned().fold(f64::INFINITY, f64::min);
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                if mean <= 1e-12 {
                    continue;
                }
                best = Some(WorkingPoint {
                    phi1_start: s as f64 * PHI_STEP,
                    phi1_end: e as f64 * PHI_STEP,
                    bias,
                    intensity: level,
                    ripple: (max - min) / mean,
                });
            }
        }
    }

    best.ok_or_else(|| {
        CoreError::Params(format!(
            "no drive interval spans {target_phase_range} radians with matched endpoint intensity"
        ))
    })
}
