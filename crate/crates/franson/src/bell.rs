//! Correlation coefficients, fringe fits, and Bell-inequality statistics
//! built from coincidence counts.
//!
//! The correlation at one pair of analyzer settings is estimated from the
//! four-pairing quad as E = (N++ - N+- - N-+ + N--) / N. Counting noise is
//! propagated with the multinomial delta method, which reduces to
//! sigma_E = 2 sqrt(A B / N^3) with A the agreeing and B the disagreeing
//! counts. Fringe scans are fitted by weighted least squares in the basis
//! (cos, sin), giving visibility and phase offset with full covariance.

use serde::{Deserialize, Serialize};

use crate::coincidence::{QuadKind, RateQuad};
use crate::error::FransonError;
use crate::Result;

/// 2 sqrt(2), the Tsirelson bound of the CHSH combination.
pub const CHSH_QUANTUM_BOUND: f64 = 2.0 * std::f64::consts::SQRT_2;

/// The local-realist CHSH bound.
pub const CHSH_CLASSICAL_BOUND: f64 = 2.0;

/// One measured correlation coefficient with its counting uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub e: f64,
    pub sigma_e: f64,
}

/// A correlation measured at a known phase sum, ready for fringe fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    /// Sum of the two analyzer phases at this scan point, rad.
    pub phase_sum_rad: f64,
    pub e: f64,
    pub sigma_e: f64,
}

/// Correlation coefficient of a counted quad.
pub fn correlation(quad: &RateQuad) -> Result<Correlation> {
    let total = quad.total();
    if total <= 0.0 {
        return Err(FransonError::EmptyQuad);
    }
    let agree = quad.counts[0] + quad.counts[3];
    let disagree = quad.counts[1] + quad.counts[2];
    let e = (agree - disagree) / total;
    // Same one-count variance floor as the symmetric reconstruction, so a
    // perfectly correlated quad still reports a finite uncertainty.
    let sigma_e =
        2.0 * (agree.max(1.0) * disagree.max(1.0) / (total * total * total)).sqrt();
    Ok(Correlation { e, sigma_e })
}

/// Correlation of a single-channel analyzer pairing, reconstructed under
/// the symmetry assumption that the uninstrumented ports mirror the
/// instrumented ones: E = (N_same - N_opposite) / (N_same + N_opposite).
pub fn reconstruct_e_symmetric(n_same: f64, n_opposite: f64) -> Result<Correlation> {
    let total = n_same + n_opposite;
    if total <= 0.0 {
        return Err(FransonError::EmptyQuad);
    }
    if n_same < 0.0 || n_opposite < 0.0 {
        return Err(FransonError::Domain(format!(
            "reconstruction needs nonnegative counts, got {n_same} and {n_opposite}"
        )));
    }
    let e = (n_same - n_opposite) / total;
    // Floor each cell at one count inside the variance so a fringe extreme
    // with an empty cell keeps a finite, usable uncertainty.
    let sigma_e =
        2.0 * (n_same.max(1.0) * n_opposite.max(1.0) / (total * total * total)).sqrt();
    Ok(Correlation { e, sigma_e })
}

/// Correlation of an accidental-subtracted quad, with the subtraction's
/// own counting variance propagated: each cell of the net quad carries
/// Poisson variance from both the live-window and the far-window counts,
/// so the uncertainty is larger than the bare multinomial value the net
/// counts alone would suggest.
///
/// Unlike [`subtract_accidentals`], the differences here are not floored
/// at zero: truncating the fluctuations of a near-empty pairing would pull
/// the correlation toward zero at fringe extremes and bias fitted
/// visibilities low. Estimates may therefore stray slightly outside
/// [-1, 1]; downstream fits treat that as ordinary counting noise.
pub fn net_correlation(raw: &RateQuad, accidentals: &RateQuad) -> Result<Correlation> {
    check_subtraction_pair(raw, accidentals)?;
    let agree =
        raw.counts[0] + raw.counts[3] - accidentals.counts[0] - accidentals.counts[3];
    let disagree =
        raw.counts[1] + raw.counts[2] - accidentals.counts[1] - accidentals.counts[2];
    let total = agree + disagree;
    if total <= 0.0 {
        return Err(FransonError::EmptyQuad);
    }
    let var_agree =
        (raw.counts[0] + raw.counts[3] + accidentals.counts[0] + accidentals.counts[3]).max(1.0);
    let var_disagree =
        (raw.counts[1] + raw.counts[2] + accidentals.counts[1] + accidentals.counts[2]).max(1.0);
    Ok(Correlation {
        e: (agree - disagree) / total,
        sigma_e: 2.0
            * (disagree * disagree * var_agree + agree * agree * var_disagree).sqrt()
            / (total * total),
    })
}

/// Accidental-subtracted counterpart of [`reconstruct_e_symmetric`], with
/// the far-window counting variance propagated into the uncertainty. As in
/// [`net_correlation`], the differences are deliberately unfloored so the
/// estimator stays unbiased when a pairing's net count fluctuates through
/// zero.
pub fn reconstruct_net_e_symmetric(
    raw_same: f64,
    raw_opposite: f64,
    acc_same: f64,
    acc_opposite: f64,
) -> Result<Correlation> {
    for n in [raw_same, raw_opposite, acc_same, acc_opposite] {
        if n < 0.0 {
            return Err(FransonError::Domain(format!(
                "reconstruction needs nonnegative counts, got {n}"
            )));
        }
    }
    let same = raw_same - acc_same;
    let opposite = raw_opposite - acc_opposite;
    let total = same + opposite;
    if total <= 0.0 {
        return Err(FransonError::EmptyQuad);
    }
    let var_same = (raw_same + acc_same).max(1.0);
    let var_opposite = (raw_opposite + acc_opposite).max(1.0);
    Ok(Correlation {
        e: (same - opposite) / total,
        sigma_e: 2.0
            * (opposite * opposite * var_same + same * same * var_opposite).sqrt()
            / (total * total),
    })
}

fn check_subtraction_pair(raw: &RateQuad, accidentals: &RateQuad) -> Result<()> {
    if raw.kind != QuadKind::Raw || accidentals.kind != QuadKind::Accidental {
        return Err(FransonError::QuadMismatch(format!(
            "expected a raw and an accidental quad, got {:?} and {:?}",
            raw.kind, accidentals.kind
        )));
    }
    let rel = (raw.duration_s - accidentals.duration_s).abs() / raw.duration_s.max(f64::MIN_POSITIVE);
    if rel > 1e-9 {
        return Err(FransonError::QuadMismatch(format!(
            "live times differ: {} s vs {} s",
            raw.duration_s, accidentals.duration_s
        )));
    }
    Ok(())
}

/// Subtract an accidental quad from a raw quad, flooring each pairing at
/// zero so the table stays a physical count set. The quads must cover the
/// same live time. Correlation estimates should come from
/// [`net_correlation`] rather than from this table, which trades a small
/// bias near empty cells for presentable counts.
pub fn subtract_accidentals(raw: &RateQuad, accidentals: &RateQuad) -> Result<RateQuad> {
    check_subtraction_pair(raw, accidentals)?;
    let mut counts = [0.0f64; 4];
    for (idx, slot) in counts.iter_mut().enumerate() {
        *slot = (raw.counts[idx] - accidentals.counts[idx]).max(0.0);
    }
    Ok(RateQuad { kind: QuadKind::Net, duration_s: raw.duration_s, counts })
}

/// Binary error rate equivalent of an interference visibility:
/// qber = (1 - V) / 2.
pub fn qber(visibility: f64) -> f64 {
    (1.0 - visibility) / 2.0
}

// ---------------------------------------------------------------------------
// Fringe fitting
// ---------------------------------------------------------------------------

/// Result of fitting E(D) = V cos(D + phi0) to a fringe scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub visibility: f64,
    pub sigma_visibility: f64,
    /// Fitted phase offset, rad, in (-pi, pi].
    pub phase_offset_rad: f64,
    /// Amplitudes in the (cos, sin) basis: E = a cos D + b sin D.
    pub cos_amplitude: f64,
    pub sin_amplitude: f64,
    pub n_points: usize,
    /// Weighted sum of squared residuals of the fit.
    pub chi_squared: f64,
}

/// Weighted least-squares fringe fit. Points with their counting sigmas
/// weight as 1/sigma^2; if any sigma is nonpositive the fit falls back to
/// unit weights and reports zero visibility uncertainty (exact-data mode).
pub fn fit_fringe(points: &[CorrelationPoint]) -> Result<FringeFit> {
    if points.len() < 4 {
        return Err(FransonError::InsufficientSpan(format!("{} points", points.len())));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        if !p.phase_sum_rad.is_finite() || !p.e.is_finite() || !p.sigma_e.is_finite() {
            return Err(FransonError::Domain("fringe fit saw a non-finite input".into()));
        }
        lo = lo.min(p.phase_sum_rad);
        hi = hi.max(p.phase_sum_rad);
    }
    if hi - lo < std::f64::consts::PI {
        return Err(FransonError::InsufficientSpan(format!(
            "span {:.3} rad",
            hi - lo
        )));
    }

    let exact_mode = points.iter().any(|p| p.sigma_e <= 0.0);

    // Two reweighting passes follow the first weighted solution: each
    // point's variance is recomputed from the model correlation instead of
    // the measured one (the implied sample size is recoverable from the
    // binomial identity sigma^2 = (1 - e^2) / n). Weights built directly
    // from measured counts correlate with the same fluctuations they
    // average over and bias small-count fringe amplitudes upward.
    let mut sigmas: Vec<f64> = points.iter().map(|p| p.sigma_e).collect();
    let passes = if exact_mode { 1 } else { 3 };
    let mut solution = (0.0, 0.0, 0.0, 0.0, 0.0);
    for pass in 0..passes {
        let (mut sxx, mut sxy, mut syy, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, sigma) in points.iter().zip(&sigmas) {
            let w = if exact_mode { 1.0 } else { 1.0 / (sigma * sigma) };
            let (s, c) = p.phase_sum_rad.sin_cos();
            sxx += w * c * c;
            sxy += w * c * s;
            syy += w * s * s;
            vx += w * p.e * c;
            vy += w * p.e * s;
        }
        let det = sxx * syy - sxy * sxy;
        let scale = (sxx.abs() + syy.abs()).max(f64::MIN_POSITIVE);
        if !(det.abs() > 1e-12 * scale * scale) {
            return Err(FransonError::SingularDesign(format!(
                "normal equations determinant {det:.3e} at scale {scale:.3e}"
            )));
        }
        let a = (syy * vx - sxy * vy) / det;
        let b = (sxx * vy - sxy * vx) / det;
        // Covariance of (a, b) is the inverse normal matrix.
        solution = (a, b, syy / det, -sxy / det, sxx / det);
        if pass + 1 < passes {
            for (i, p) in points.iter().enumerate() {
                let implied_n = if p.e * p.e < 1.0 {
                    (1.0 - p.e * p.e) / (p.sigma_e * p.sigma_e)
                } else {
                    // A one-sided count floor gives sigma = 2 / n exactly.
                    2.0 / p.sigma_e
                };
                if !(implied_n.is_finite() && implied_n > 0.0) {
                    continue;
                }
                let model = a * p.phase_sum_rad.cos() + b * p.phase_sum_rad.sin();
                let variance = (1.0 - model * model).max(1.0 / implied_n) / implied_n;
                sigmas[i] = variance.sqrt();
            }
        }
    }
    let (a, b, caa, cab, cbb) = solution;

    let visibility = (a * a + b * b).sqrt();
    let sigma_visibility = if exact_mode {
        0.0
    } else if visibility > 1e-300 {
        ((a * a * caa + 2.0 * a * b * cab + b * b * cbb) / (visibility * visibility)).sqrt()
    } else {
        ((caa + cbb) / 2.0).sqrt()
    };
    if visibility > 1.0 + 3.0 * sigma_visibility {
        return Err(FransonError::UnphysicalVisibility { visibility, sigma: sigma_visibility });
    }

    let mut chi_squared = 0.0;
    for (p, sigma) in points.iter().zip(&sigmas) {
        let w = if exact_mode { 1.0 } else { 1.0 / (sigma * sigma) };
        let model = a * p.phase_sum_rad.cos() + b * p.phase_sum_rad.sin();
        let r = p.e - model;
        chi_squared += w * r * r;
    }

    Ok(FringeFit {
        visibility,
        sigma_visibility,
        phase_offset_rad: (-b).atan2(a),
        cos_amplitude: a,
        sin_amplitude: b,
        n_points: points.len(),
        chi_squared,
    })
}

// ---------------------------------------------------------------------------
// Bell statistics
// ---------------------------------------------------------------------------

/// How an S value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellMode {
    /// Four correlations at the canonical CHSH setting quadruple.
    FourSetting,
    /// Two points on one fringe with phase sums (D, 3D): S = |3 E(D) - E(3D)|.
    ReducedTwoSetting,
    /// Converted from a fitted fringe visibility: S = 2 sqrt(2) V.
    FromVisibility,
}

/// A CHSH statistic with its counting uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellResult {
    pub mode: BellMode,
    pub s: f64,
    pub sigma_s: f64,
}

impl BellResult {
    /// Standard deviations by which S exceeds the local bound (negative
    /// when it does not). Infinite for an exact S above the bound.
    pub fn n_sigma_violation(&self) -> f64 {
        if self.sigma_s > 0.0 {
            (self.s - CHSH_CLASSICAL_BOUND) / self.sigma_s
        } else if self.s > CHSH_CLASSICAL_BOUND {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn violates_local_bound(&self) -> bool {
        self.s > CHSH_CLASSICAL_BOUND
    }
}

/// Four-setting CHSH: S = |E(a,b) + E(a,b') + E(a',b) - E(a',b')| with
/// uncertainties combined in quadrature.
pub fn chsh(e_ab: Correlation, e_ab2: Correlation, e_a2b: Correlation, e_a2b2: Correlation) -> BellResult {
    let s = (e_ab.e + e_ab2.e + e_a2b.e - e_a2b2.e).abs();
    let sigma_s = (e_ab.sigma_e.powi(2)
        + e_ab2.sigma_e.powi(2)
        + e_a2b.sigma_e.powi(2)
        + e_a2b2.sigma_e.powi(2))
    .sqrt();
    BellResult { mode: BellMode::FourSetting, s, sigma_s }
}

/// Reduced CHSH for correlations that depend only on the phase sum:
/// taking the quadruple (D, D, D, 3D) collapses to S = |3 E(D) - E(3D)|.
/// The second point must sit at three times the first phase sum.
pub fn reduced_s(first: &CorrelationPoint, second: &CorrelationPoint) -> Result<BellResult> {
    let expected = 3.0 * first.phase_sum_rad;
    if (second.phase_sum_rad - expected).abs() > 1e-9 {
        return Err(FransonError::PhaseRatio {
            first: first.phase_sum_rad,
            second: second.phase_sum_rad,
        });
    }
    let s = (3.0 * first.e - second.e).abs();
    let sigma_s = (9.0 * first.sigma_e * first.sigma_e + second.sigma_e * second.sigma_e).sqrt();
    Ok(BellResult { mode: BellMode::ReducedTwoSetting, s, sigma_s })
}

/// CHSH reach of a sinusoidal fringe of the given visibility:
/// S = 2 sqrt(2) V at the optimal settings.
pub fn from_visibility(visibility: f64, sigma_visibility: f64) -> Result<BellResult> {
    if !(0.0..=f64::INFINITY).contains(&visibility) || !visibility.is_finite() {
        return Err(FransonError::Domain(format!(
            "visibility must be a nonnegative finite number, got {visibility}"
        )));
    }
    if sigma_visibility < 0.0 || !sigma_visibility.is_finite() {
        return Err(FransonError::Domain(format!(
            "visibility sigma must be nonnegative, got {sigma_visibility}"
        )));
    }
    if visibility > 1.0 + 3.0 * sigma_visibility {
        return Err(FransonError::UnphysicalVisibility {
            visibility,
            sigma: sigma_visibility,
        });
    }
    Ok(BellResult {
        mode: BellMode::FromVisibility,
        s: CHSH_QUANTUM_BOUND * visibility,
        sigma_s: CHSH_QUANTUM_BOUND * sigma_visibility,
    })
}
