//! Closed-form outcome laws for one photon pair traversing two unbalanced
//! interferometers.
//!
//! Arrival-time pairs sort into three peaks: the central peak (both photons
//! short or both long, indistinguishable, so the two amplitudes interfere)
//! and two satellite peaks (short-long and long-short, distinguishable, no
//! interference). Port statistics in the central peak follow
//!
//! ```text
//! P(central, i, j) = (1/8) * (1 + i*j*V0*cos(d1 + d2 + phi0))
//! ```
//!
//! with i, j = +-1 the analyzer output ports, while each satellite outcome
//! carries a flat 1/16. Everything downstream (fringes, CHSH, QBER) reduces
//! to this law.

use serde::{Deserialize, Serialize};

use crate::error::FransonError;
use crate::Result;

/// Analyzer output port, mapped to +1/-1 in correlation sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PortSign {
    Plus,
    Minus,
}

impl PortSign {
    pub const BOTH: [PortSign; 2] = [PortSign::Plus, PortSign::Minus];

    /// The +-1 value used in correlation sums.
    pub fn value(self) -> f64 {
        match self {
            PortSign::Plus => 1.0,
            PortSign::Minus => -1.0,
        }
    }
}

/// Which arrival-time peak a pair lands in. `Early` is the long-short
/// combination (side-a photon delayed), `Late` the short-long one; they sit
/// at -+dT in the (t_b - t_a) difference spectrum relative to the central
/// peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimePeak {
    Central,
    Early,
    Late,
}

impl TimePeak {
    pub const ALL: [TimePeak; 3] = [TimePeak::Central, TimePeak::Early, TimePeak::Late];
}

fn check_phase(field: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(FransonError::validation(field, "phase must be finite"));
    }
    Ok(())
}

fn check_visibility(v0: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v0) || v0.is_nan() {
        return Err(FransonError::validation(
            "intrinsic_visibility",
            format!("must lie in [0, 1], got {v0}"),
        ));
    }
    Ok(())
}

/// Probability of one central-peak outcome (ports `i`, `j`) at analyzer
/// phases `d1`, `d2`, intrinsic visibility `v0`, and global phase `phi0`.
pub fn central_peak_prob(i: PortSign, j: PortSign, d1: f64, d2: f64, v0: f64, phi0: f64) -> Result<f64> {
    check_phase("delta_1", d1)?;
    check_phase("delta_2", d2)?;
    check_phase("phase_sum_offset", phi0)?;
    check_visibility(v0)?;
    let c = (d1 + d2 + phi0).cos();
    Ok(0.125 * (1.0 + i.value() * j.value() * v0 * c))
}

/// Probability of one satellite outcome; flat in ports and phases.
pub fn satellite_prob() -> f64 {
    0.0625
}

/// Full 12-outcome law for a split pair: (peak, port_a, port_b).
///
/// Probabilities sum to 1 and port marginals are 1/2 regardless of the
/// remote phase, so singles carry no phase information.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDistribution {
    pub delta_1: f64,
    pub delta_2: f64,
    pub visibility: f64,
    pub phase_sum_offset: f64,
    probs: [f64; 12],
}

fn index(peak: TimePeak, i: PortSign, j: PortSign) -> usize {
    let p = match peak {
        TimePeak::Central => 0,
        TimePeak::Early => 1,
        TimePeak::Late => 2,
    };
    let a = (i == PortSign::Minus) as usize;
    let b = (j == PortSign::Minus) as usize;
    p * 4 + a * 2 + b
}

impl OutcomeDistribution {
    pub fn new(d1: f64, d2: f64, v0: f64, phi0: f64) -> Result<Self> {
        let mut probs = [0.0; 12];
        for peak in TimePeak::ALL {
            for i in PortSign::BOTH {
                for j in PortSign::BOTH {
                    probs[index(peak, i, j)] = match peak {
                        TimePeak::Central => central_peak_prob(i, j, d1, d2, v0, phi0)?,
                        TimePeak::Early | TimePeak::Late => satellite_prob(),
                    };
                }
            }
        }
        Ok(OutcomeDistribution {
            delta_1: d1,
            delta_2: d2,
            visibility: v0,
            phase_sum_offset: phi0,
            probs,
        })
    }

    pub fn prob(&self, peak: TimePeak, i: PortSign, j: PortSign) -> f64 {
        self.probs[index(peak, i, j)]
    }

    /// All outcomes with their probabilities, in a fixed documented order
    /// (central, early, late) x (++, +-, -+, --).
    pub fn outcomes(&self) -> impl Iterator<Item = ((TimePeak, PortSign, PortSign), f64)> + '_ {
        TimePeak::ALL.into_iter().flat_map(move |peak| {
            PortSign::BOTH.into_iter().flat_map(move |i| {
                PortSign::BOTH
                    .into_iter()
                    .map(move |j| ((peak, i, j), self.prob(peak, i, j)))
            })
        })
    }

    /// Marginal probability that the side-a photon exits port `i`.
    pub fn marginal_a(&self, i: PortSign) -> f64 {
        PortSign::BOTH
            .iter()
            .flat_map(|&j| TimePeak::ALL.iter().map(move |&peak| self.prob(peak, i, j)))
            .sum()
    }

    /// Marginal probability that the side-b photon exits port `j`.
    pub fn marginal_b(&self, j: PortSign) -> f64 {
        PortSign::BOTH
            .iter()
            .flat_map(|&i| TimePeak::ALL.iter().map(move |&peak| self.prob(peak, i, j)))
            .sum()
    }

    /// Sample one outcome. Consumes exactly two uniform draws: one for the
    /// peak, one for the port pair.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (TimePeak, PortSign, PortSign) {
        let u_peak: f64 = rng.random();
        let peak = if u_peak < 0.5 {
            TimePeak::Central
        } else if u_peak < 0.75 {
            TimePeak::Early
        } else {
            TimePeak::Late
        };
        let u_port: f64 = rng.random();
        match peak {
            TimePeak::Central => {
                // Conditional port-pair law given the central peak: each
                // entry is prob / (1/2).
                let mut acc = 0.0;
                for i in PortSign::BOTH {
                    for j in PortSign::BOTH {
                        acc += 2.0 * self.prob(TimePeak::Central, i, j);
                        if u_port < acc {
                            return (peak, i, j);
                        }
                    }
                }
                (peak, PortSign::Minus, PortSign::Minus)
            }
            _ => {
                // Satellite ports are uniform; reuse one draw for both bits.
                let i = if u_port < 0.5 { PortSign::Plus } else { PortSign::Minus };
                let j = if (u_port * 2.0).fract() < 0.5 { PortSign::Plus } else { PortSign::Minus };
                (peak, i, j)
            }
        }
    }
}

/// Correlation coefficient of the central-peak port statistics:
/// E = V0 * cos(d1 + d2 + phi0).
pub fn predicted_correlation(d1: f64, d2: f64, v0: f64, phi0: f64) -> Result<f64> {
    check_phase("delta_1", d1)?;
    check_phase("delta_2", d2)?;
    check_phase("phase_sum_offset", phi0)?;
    check_visibility(v0)?;
    Ok(v0 * (d1 + d2 + phi0).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Independent oracle: per-photon two-path amplitudes through a 50/50
    /// splitter pair, a_+(S)=a_+(L)=1/2, a_-(S)=1/2, a_-(L)=-1/2 (unitary
    /// phase convention). Central-peak joint amplitude is the coherent sum
    /// of the both-short and both-long path products; satellites are single
    /// incoherent path products. Normalization follows from unitarity, no
    /// fitted constants.
    fn amplitude_oracle_central(i: PortSign, j: PortSign, d1: f64, d2: f64) -> f64 {
        let sign = |port: PortSign, long: bool| -> f64 {
            match (port, long) {
                (PortSign::Plus, _) => 0.5,
                (PortSign::Minus, false) => 0.5,
                (PortSign::Minus, true) => -0.5,
            }
        };
        let phase = d1 + d2;
        // both-short product + both-long product * e^{i(d1+d2)}
        let re = sign(i, false) * sign(j, false) + sign(i, true) * sign(j, true) * phase.cos();
        let im = sign(i, true) * sign(j, true) * phase.sin();
        re * re + im * im
    }

    /// Frozen value of the (+,+) central outcome at d1 = pi/2, d2 = pi/4,
    /// V0 = 1, phi0 = 0. Equals (1/8)(1 + cos(3pi/4)).
    const CENTRAL_PP_AT_3PI4: f64 = 0.036611652351681556;

    #[test]
    fn central_peak_prob_matches_basic_cases() {
        let p = central_peak_prob(PortSign::Plus, PortSign::Plus, 0.0, 0.0, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        let p = central_peak_prob(PortSign::Plus, PortSign::Minus, 0.0, 0.0, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn central_peak_prob_matches_amplitude_oracle() {
        let p = central_peak_prob(PortSign::Plus, PortSign::Plus, 0.5 * std::f64::consts::PI, 0.25 * std::f64::consts::PI, 1.0, 0.0)
            .unwrap();
        assert_abs_diff_eq!(p, CENTRAL_PP_AT_3PI4, epsilon = 1e-15);
        let oracle = amplitude_oracle_central(
            PortSign::Plus,
            PortSign::Plus,
            0.5 * std::f64::consts::PI,
            0.25 * std::f64::consts::PI,
        );
        assert_abs_diff_eq!(p, oracle, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn central_law_agrees_with_amplitude_oracle_at_unit_visibility(
            d1 in -10.0f64..10.0,
            d2 in -10.0f64..10.0,
        ) {
            for i in PortSign::BOTH {
                for j in PortSign::BOTH {
                    let law = central_peak_prob(i, j, d1, d2, 1.0, 0.0).unwrap();
                    let oracle = amplitude_oracle_central(i, j, d1, d2);
                    prop_assert!((law - oracle).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn distribution_normalizes_and_respects_no_signaling(
            d1 in -10.0f64..10.0,
            d2 in -10.0f64..10.0,
            v0 in 0.0f64..=1.0,
            phi0 in -3.2f64..3.2,
        ) {
            let dist = OutcomeDistribution::new(d1, d2, v0, phi0).unwrap();
            let total: f64 = dist.outcomes().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for port in PortSign::BOTH {
                prop_assert!((dist.marginal_a(port) - 0.5).abs() <= 1e-12);
                prop_assert!((dist.marginal_b(port) - 0.5).abs() <= 1e-12);
            }
            for (_, p) in dist.outcomes() {
                prop_assert!(p >= 0.0);
            }
        }

        #[test]
        fn predicted_correlation_depends_only_on_phase_sum(
            d1 in -6.0f64..6.0,
            d2 in -6.0f64..6.0,
            x in -6.0f64..6.0,
            v0 in 0.0f64..=1.0,
        ) {
            let a = predicted_correlation(d1 + x, d2 - x, v0, 0.0).unwrap();
            let b = predicted_correlation(d1, d2, v0, 0.0).unwrap();
            // (d1+x)+(d2-x) differs from d1+d2 only by rounding; cos is
            // 1-Lipschitz so the results agree to fp error.
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn predicted_correlation_matches_quoted_point() {
        let e = predicted_correlation(std::f64::consts::FRAC_PI_4, 0.0, 0.955, 0.0).unwrap();
        assert_abs_diff_eq!(e, 0.955 * std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(e, 0.6752869, epsilon = 1e-7);
    }

    #[test]
    fn correlation_from_central_block_matches_predicted() {
        // Eq-style consistency: E assembled from the four central-peak
        // probabilities equals the closed form.
        let (d1, d2, v0, phi0) = (0.7, -0.3, 0.9, 0.21);
        let dist = OutcomeDistribution::new(d1, d2, v0, phi0).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in PortSign::BOTH {
            for j in PortSign::BOTH {
                let p = dist.prob(TimePeak::Central, i, j);
                num += i.value() * j.value() * p;
                den += p;
            }
        }
        let direct = predicted_correlation(d1, d2, v0, phi0).unwrap();
        assert_abs_diff_eq!(num / den, direct, epsilon = 1e-12);
    }

    #[test]
    fn unit_visibility_reaches_chsh_bound_at_quadrature_settings() {
        // d1 = 0, d2 = pi/4, d1' = -pi/2, d2' = -pi/4 puts three phase sums
        // at +-pi/4 and one at -3pi/4: S = 2*sqrt(2).
        let q = std::f64::consts::FRAC_PI_4;
        let e = |a: f64, b: f64| predicted_correlation(a, b, 1.0, 0.0).unwrap();
        let s = (e(0.0, q) + e(0.0, -q) + e(-2.0 * q, q) - e(-2.0 * q, -q)).abs();
        assert_abs_diff_eq!(s, 2.0 * std::f64::consts::SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn sampling_frequencies_match_distribution() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let dist = OutcomeDistribution::new(0.9, 0.4, 0.87, 0.1).unwrap();
        let n = 1_000_000usize;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            *counts.entry(dist.sample(&mut rng)).or_insert(0usize) += 1;
        }
        for (outcome, p) in dist.outcomes() {
            let observed = *counts.get(&outcome).unwrap_or(&0) as f64;
            let expected = p * n as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
            assert!(
                (observed - expected).abs() <= 4.0 * sigma,
                "outcome {outcome:?}: observed {observed}, expected {expected:.1} +- {sigma:.1}"
            );
        }
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(central_peak_prob(PortSign::Plus, PortSign::Plus, 0.0, 0.0, 1.2, 0.0).is_err());
        assert!(central_peak_prob(PortSign::Plus, PortSign::Plus, f64::NAN, 0.0, 1.0, 0.0).is_err());
        assert!(predicted_correlation(0.0, 0.0, -0.1, 0.0).is_err());
        assert!(OutcomeDistribution::new(0.0, f64::INFINITY, 0.5, 0.0).is_err());
    }
}
