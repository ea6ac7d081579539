//! Experiment orchestration: run a phase scan over a scenario, reduce the
//! tag streams to correlations, fit fringes, and compute Bell statistics.
//!
//! A run proceeds in stages: a short calibration acquisition locates the
//! fiber delay difference from the arrival-difference histogram; each scan
//! point then runs in chunks of at most [`CHUNK_MAX_DURATION_S`] seconds
//! (bounding memory) with per-point, per-chunk RNG streams; per point the
//! analyzer counts the live-window quad and the far-offset accidental quad;
//! finally fringes are fitted to the raw and net correlation curves and the
//! CHSH statistic is formed three ways: from the four-setting quadruple
//! nearest the optimum on the scanned grid, from the reduced two-point
//! combination |3 E(D) - E(3D)|, and from the fitted visibility.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, FRAC_PI_6, FRAC_PI_8, PI};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::bell::{
    correlation, fit_fringe, from_visibility, net_correlation, qber, reconstruct_e_symmetric,
    reconstruct_net_e_symmetric, reduced_s, subtract_accidentals, BellMode, BellResult,
    Correlation, CorrelationPoint, FringeFit,
};
use crate::coincidence::{
    build_histogram, calibrate_link_delay, count_coincidences, count_quad, measure_accidentals,
    merged_sides, DelayHistogram, QuadKind, RateQuad,
};
use crate::config::{AnalyzerB, PortId, ScenarioConfig};
use crate::engine::{run_scenario, ChunkSpec, TagStreams};
use crate::error::FransonError;
use crate::Result;

/// Upper bound on a single generated chunk, seconds. Thirty seconds of the
/// bundled scenario is a few million tags, comfortably inside memory.
pub const CHUNK_MAX_DURATION_S: f64 = 30.0;

/// Live time of the dedicated delay-calibration acquisition, seconds
/// (clamped to the configured integration time).
pub const CALIBRATION_DURATION_S: f64 = 10.0;

// ---------------------------------------------------------------------------
// Scan plans
// ---------------------------------------------------------------------------

/// One analyzer-setting combination. `phase_b_rad` applies to the
/// two-channel side-b analyzer; the passive-pair topology keeps its fixed
/// analyzer phases and ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub phase_a_rad: f64,
    pub phase_b_rad: f64,
}

/// An ordered list of scan points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub points: Vec<ScanPoint>,
}

impl ScanPlan {
    pub fn new(points: Vec<ScanPoint>) -> Self {
        ScanPlan { points }
    }

    /// Default fringe scan for the two-channel arrangement: phase sums
    /// pi/4 + k pi/6, which cover almost two periods and land exactly on
    /// the CHSH sums pi/4, 3 pi/4, 5 pi/4, and 7 pi/4.
    pub fn fringe_scan_two_channel(n_points: usize) -> Self {
        let points = (0..n_points)
            .map(|k| ScanPoint { phase_a_rad: FRAC_PI_4 + k as f64 * FRAC_PI_6, phase_b_rad: 0.0 })
            .collect();
        ScanPlan { points }
    }

    /// Default fringe scan for the passive-pair arrangement: analyzer a
    /// steps through k pi/8, so with the fixed analyzers at 0 and pi/2 the
    /// two curves include the shared CHSH settings pi/4 and 7 pi/4.
    pub fn fringe_scan_passive_pair(n_points: usize) -> Self {
        let points = (0..n_points)
            .map(|k| ScanPoint { phase_a_rad: k as f64 * FRAC_PI_8, phase_b_rad: 0.0 })
            .collect();
        ScanPlan { points }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(FransonError::Plan("scan plan has no points".into()));
        }
        for (idx, p) in self.points.iter().enumerate() {
            if !p.phase_a_rad.is_finite() || !p.phase_b_rad.is_finite() {
                return Err(FransonError::Plan(format!("scan point {idx} has a non-finite phase")));
            }
        }
        Ok(())
    }
}

/// Default plan for whichever topology the scenario describes.
pub fn default_plan(cfg: &ScenarioConfig) -> ScanPlan {
    match cfg.analyzer_b {
        AnalyzerB::Single(_) => ScanPlan::fringe_scan_two_channel(12),
        AnalyzerB::Passive { .. } => ScanPlan::fringe_scan_passive_pair(16),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Run one scan point in bounded chunks and merge the streams.
fn run_point_streams(cfg: &ScenarioConfig, point_index: u32) -> Result<TagStreams> {
    let total = cfg.coincidence.integration_time_s;
    let mut streams = TagStreams::empty(&cfg.instrumented_ports(), 0.0);
    let mut done = 0.0;
    let mut chunk_index = 0u32;
    while done < total {
        let duration = (total - done).min(CHUNK_MAX_DURATION_S);
        let chunk = ChunkSpec { t_start_s: done, duration_s: duration, point_index, chunk_index };
        streams.merge(run_scenario(cfg, &chunk)?);
        done += duration;
        chunk_index += 1;
    }
    Ok(streams)
}

/// Calibration products: the alignment shift and the fine histogram
/// around the coincidence peak.
struct Calibration {
    link_shift_s: f64,
    histogram: DelayHistogram,
}

/// Locate the fiber delay difference from a short dedicated acquisition.
/// The search span comes from the nominal link delays with generous margin;
/// the value itself comes entirely from the simulated data.
fn calibrate(cfg: &ScenarioConfig) -> Result<Calibration> {
    let mut cal_cfg = cfg.clone();
    cal_cfg.coincidence.integration_time_s =
        CALIBRATION_DURATION_S.min(cfg.coincidence.integration_time_s.max(1.0));
    let chunk = ChunkSpec {
        t_start_s: 0.0,
        duration_s: cal_cfg.coincidence.integration_time_s,
        point_index: u32::MAX,
        chunk_index: 0,
    };
    let streams = run_scenario(&cal_cfg, &chunk)?;
    let (a, b) = merged_sides(&streams);
    let nominal = cfg.link_a.delay_s() - cfg.link_b.delay_s();
    let half_span = nominal.abs() * 1.5 + 1e-6;
    let link_shift_s = calibrate_link_delay(&a, &b, half_span)?;
    let histogram = build_histogram(&a, &b, link_shift_s, 3e-9, 10e-12)?;
    Ok(Calibration { link_shift_s, histogram })
}

fn any_schedule(cfg: &ScenarioConfig) -> bool {
    let b_scheduled = match &cfg.analyzer_b {
        AnalyzerB::Single(b) => b.phase_schedule.is_some(),
        AnalyzerB::Passive { b1, b2, .. } => {
            b1.phase_schedule.is_some() || b2.phase_schedule.is_some()
        }
    };
    cfg.analyzer_a.phase_schedule.is_some() || b_scheduled
}

/// A Bell statistic with the violation significance spelled out for
/// reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellSummary {
    pub mode: BellMode,
    pub s: f64,
    pub sigma_s: f64,
    pub n_sigma_violation: f64,
}

impl From<BellResult> for BellSummary {
    fn from(r: BellResult) -> Self {
        let mut n_sigma = r.n_sigma_violation();
        if !n_sigma.is_finite() {
            n_sigma = n_sigma.signum() * 1e12;
        }
        BellSummary { mode: r.mode, s: r.s, sigma_s: r.sigma_s, n_sigma_violation: n_sigma }
    }
}

/// Combine CHSH slots that may reuse a measured point: coefficients of
/// shared keys add before the uncertainty is formed, so a point entering
/// twice contributes its sigma with weight two, not sqrt(two).
fn combine_chsh_slots(slots: &[(usize, f64, Correlation)]) -> BellResult {
    let mut coeffs: BTreeMap<usize, (f64, Correlation)> = BTreeMap::new();
    for &(key, sign, corr) in slots {
        let entry = coeffs.entry(key).or_insert((0.0, corr));
        entry.0 += sign;
    }
    let mut s = 0.0;
    let mut var = 0.0;
    for (coeff, corr) in coeffs.values() {
        s += coeff * corr.e;
        var += coeff * coeff * corr.sigma_e * corr.sigma_e;
    }
    BellResult { mode: BellMode::FourSetting, s: s.abs(), sigma_s: var.sqrt() }
}

/// Circular distance between two phases.
fn wrap_distance(a: f64, b: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut d = (a - b) % two_pi;
    if d > PI {
        d -= two_pi;
    }
    if d < -PI {
        d += two_pi;
    }
    d.abs()
}

/// Index of the scanned point whose phase sum sits nearest the target,
/// on the circle.
fn nearest_point(points: &[CorrelationPoint], target_rad: f64) -> Result<usize> {
    points
        .iter()
        .enumerate()
        .min_by(|(_, p), (_, q)| {
            wrap_distance(p.phase_sum_rad, target_rad)
                .partial_cmp(&wrap_distance(q.phase_sum_rad, target_rad))
                .expect("finite phases")
        })
        .map(|(idx, _)| idx)
        .ok_or_else(|| FransonError::Plan("no scan points to select CHSH settings from".into()))
}

/// Four-setting CHSH on one correlation curve, selecting the scanned sums
/// nearest the optimal quadruple (pi/4, 7 pi/4, 7 pi/4, 5 pi/4). On a
/// single curve the two cross settings coincide, so that point is reused
/// and its uncertainty weighted accordingly.
pub fn chsh_from_curve(points: &[CorrelationPoint]) -> Result<BellResult> {
    let targets: [(f64, f64); 4] = [
        (FRAC_PI_4, 1.0),
        (7.0 * FRAC_PI_4, 1.0),
        (7.0 * FRAC_PI_4, 1.0),
        (5.0 * FRAC_PI_4, -1.0),
    ];
    let mut slots = Vec::with_capacity(4);
    for (target, sign) in targets {
        let idx = nearest_point(points, target)?;
        let p = points[idx];
        slots.push((idx, sign, Correlation { e: p.e, sigma_e: p.sigma_e }));
    }
    Ok(combine_chsh_slots(&slots))
}

/// Reduced CHSH |3 E(D) - E(3D)| on one curve, anchored at the scanned
/// point nearest D = pi/4.
pub fn reduced_from_curve(points: &[CorrelationPoint]) -> Result<BellResult> {
    let first = points[nearest_point(points, FRAC_PI_4)?];
    let second = points[nearest_point(points, 3.0 * first.phase_sum_rad)?];
    reduced_s(&first, &second)
}

/// Shared-settings CHSH across the two curves of the passive-pair
/// arrangement: analyzer a settings nearest 7 pi/4 and pi/4 combine with
/// the two fixed analyzers as S = E1(x) + E2(x) + E1(y) - E2(y).
pub fn chsh_from_curve_pair(
    phase_a_rad: &[f64],
    curve1: &[CorrelationPoint],
    curve2: &[CorrelationPoint],
) -> Result<BellResult> {
    if phase_a_rad.len() != curve1.len() || curve1.len() != curve2.len() {
        return Err(FransonError::Plan("curves and settings must have equal length".into()));
    }
    let as_points: Vec<CorrelationPoint> = phase_a_rad
        .iter()
        .map(|&p| CorrelationPoint { phase_sum_rad: p, e: 0.0, sigma_e: 0.0 })
        .collect();
    let x = nearest_point(&as_points, 7.0 * FRAC_PI_4)?;
    let y = nearest_point(&as_points, FRAC_PI_4)?;
    let corr = |p: &CorrelationPoint| Correlation { e: p.e, sigma_e: p.sigma_e };
    let slots = [
        (2 * x, 1.0, corr(&curve1[x])),
        (2 * x + 1, 1.0, corr(&curve2[x])),
        (2 * y, 1.0, corr(&curve1[y])),
        (2 * y + 1, -1.0, corr(&curve2[y])),
    ];
    Ok(combine_chsh_slots(&slots))
}

// ---------------------------------------------------------------------------
// Singles homogeneity (no-signaling check)
// ---------------------------------------------------------------------------

/// Chi-squared homogeneity test of per-port singles counts across scan
/// points. Local marginals must not move when remote settings change, so
/// under the model every port's counts are Poisson with a constant mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityTest {
    pub chi_squared: f64,
    pub degrees_of_freedom: u64,
    pub p_value: f64,
}

pub fn singles_homogeneity(per_point_counts: &[BTreeMap<PortId, u64>]) -> HomogeneityTest {
    let n_points = per_point_counts.len();
    let mut chi_squared = 0.0;
    let mut dof = 0u64;
    if n_points >= 2 {
        let ports: Vec<PortId> = per_point_counts[0].keys().copied().collect();
        for port in ports {
            let counts: Vec<f64> =
                per_point_counts.iter().map(|m| *m.get(&port).unwrap_or(&0) as f64).collect();
            let mean = counts.iter().sum::<f64>() / n_points as f64;
            if mean <= 0.0 {
                continue;
            }
            for c in counts {
                chi_squared += (c - mean) * (c - mean) / mean;
            }
            dof += (n_points - 1) as u64;
        }
    }
    let p_value = if dof == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(dof as f64).expect("positive dof");
        1.0 - dist.cdf(chi_squared)
    };
    HomogeneityTest { chi_squared, degrees_of_freedom: dof, p_value }
}

// ---------------------------------------------------------------------------
// Two-channel experiment
// ---------------------------------------------------------------------------

/// Per-point record of the two-channel scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub phase_a_rad: f64,
    pub phase_b_rad: f64,
    pub phase_sum_rad: f64,
    pub raw: RateQuad,
    pub accidental: RateQuad,
    pub net: RateQuad,
    pub e_raw: Correlation,
    pub e_net: Correlation,
    pub singles_counts: BTreeMap<PortId, u64>,
}

/// Full record of a two-channel fringe scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment1Report {
    pub scenario: ScenarioConfig,
    pub link_shift_s: f64,
    pub peak_histogram: DelayHistogram,
    pub points: Vec<PointReport>,
    pub fringe_raw: FringeFit,
    pub fringe_net: FringeFit,
    pub qber_raw: f64,
    pub qber_net: f64,
    pub bell_four_setting_raw: BellSummary,
    pub bell_four_setting_net: BellSummary,
    pub bell_reduced_raw: BellSummary,
    pub bell_reduced_net: BellSummary,
    pub bell_from_visibility_raw: BellSummary,
    pub bell_from_visibility_net: BellSummary,
    pub no_signaling: HomogeneityTest,
}

/// Run a fringe scan on a two-channel scenario and reduce it to fringes,
/// QBER, and Bell statistics.
pub fn run_experiment1(cfg: &ScenarioConfig, plan: &ScanPlan) -> Result<Experiment1Report> {
    cfg.validate()?;
    plan.validate()?;
    if !matches!(cfg.analyzer_b, AnalyzerB::Single(_)) {
        return Err(FransonError::Topology(
            "the two-channel experiment needs a single side-b analyzer".into(),
        ));
    }
    if any_schedule(cfg) {
        return Err(FransonError::Plan(
            "phase schedules cannot be combined with a stepped scan; use the scheduled fringe runner"
                .into(),
        ));
    }

    let calibration = calibrate(cfg)?;
    let window = cfg.coincidence.window_s;
    let offset = cfg.coincidence.accidental_offset_s;
    let dt_max = cfg.max_arm_imbalance_s();

    let mut points = Vec::with_capacity(plan.points.len());
    let mut raw_curve = Vec::with_capacity(plan.points.len());
    let mut net_curve = Vec::with_capacity(plan.points.len());
    let mut singles = Vec::with_capacity(plan.points.len());

    for (idx, setting) in plan.points.iter().enumerate() {
        let mut point_cfg = cfg.clone();
        point_cfg.analyzer_a.phase_rad = setting.phase_a_rad;
        if let AnalyzerB::Single(b) = &mut point_cfg.analyzer_b {
            b.phase_rad = setting.phase_b_rad;
        }
        let streams = run_point_streams(&point_cfg, idx as u32)?;

        let raw = count_quad(&streams, calibration.link_shift_s, 0.0, window, QuadKind::Raw)?;
        let accidental =
            measure_accidentals(&streams, calibration.link_shift_s, window, offset, dt_max)?;
        let net = subtract_accidentals(&raw, &accidental)?;
        let e_raw = correlation(&raw)?;
        let e_net = net_correlation(&raw, &accidental)?;

        let singles_counts: BTreeMap<PortId, u64> = streams
            .by_port
            .iter()
            .map(|(&port, tags)| (port, tags.len() as u64))
            .collect();
        let phase_sum_rad = setting.phase_a_rad + setting.phase_b_rad;
        raw_curve.push(CorrelationPoint { phase_sum_rad, e: e_raw.e, sigma_e: e_raw.sigma_e });
        net_curve.push(CorrelationPoint { phase_sum_rad, e: e_net.e, sigma_e: e_net.sigma_e });
        singles.push(singles_counts.clone());
        points.push(PointReport {
            phase_a_rad: setting.phase_a_rad,
            phase_b_rad: setting.phase_b_rad,
            phase_sum_rad,
            raw,
            accidental,
            net,
            e_raw,
            e_net,
            singles_counts,
        });
    }

    let fringe_raw = fit_fringe(&raw_curve)?;
    let fringe_net = fit_fringe(&net_curve)?;

    Ok(Experiment1Report {
        scenario: cfg.clone(),
        link_shift_s: calibration.link_shift_s,
        peak_histogram: calibration.histogram,
        points,
        fringe_raw,
        fringe_net,
        qber_raw: qber(fringe_raw.visibility),
        qber_net: qber(fringe_net.visibility),
        bell_four_setting_raw: chsh_from_curve(&raw_curve)?.into(),
        bell_four_setting_net: chsh_from_curve(&net_curve)?.into(),
        bell_reduced_raw: reduced_from_curve(&raw_curve)?.into(),
        bell_reduced_net: reduced_from_curve(&net_curve)?.into(),
        bell_from_visibility_raw: from_visibility(fringe_raw.visibility, fringe_raw.sigma_visibility)?
            .into(),
        bell_from_visibility_net: from_visibility(fringe_net.visibility, fringe_net.sigma_visibility)?
            .into(),
        no_signaling: singles_homogeneity(&singles),
    })
}

// ---------------------------------------------------------------------------
// Passive-pair experiment
// ---------------------------------------------------------------------------

/// One curve's measurement at one scan point of the passive-pair
/// arrangement: coincidences of the instrumented analyzer port with the
/// two side-a ports, raw, accidental, and net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePointReport {
    pub phase_sum_rad: f64,
    /// Counts [a+ x b+, a- x b+] in the live window.
    pub n_raw: [f64; 2],
    pub n_accidental: [f64; 2],
    /// Unfloored differences raw - accidental; may dip below zero when a
    /// near-empty pairing fluctuates under its accidental estimate.
    pub n_net: [f64; 2],
    pub e_raw: Correlation,
    pub e_net: Correlation,
}

/// Per-point record of the passive-pair scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point2Report {
    pub phase_a_rad: f64,
    pub b1: CurvePointReport,
    pub b2: CurvePointReport,
    pub singles_counts: BTreeMap<PortId, u64>,
}

/// Full record of a passive-pair fringe scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment2Report {
    pub scenario: ScenarioConfig,
    pub link_shift_s: f64,
    pub peak_histogram: DelayHistogram,
    pub points: Vec<Point2Report>,
    pub fringe_raw_b1: FringeFit,
    pub fringe_net_b1: FringeFit,
    pub fringe_raw_b2: FringeFit,
    pub fringe_net_b2: FringeFit,
    pub qber_raw_b1: f64,
    pub qber_net_b1: f64,
    pub bell_four_setting_raw: BellSummary,
    pub bell_four_setting_net: BellSummary,
    pub bell_from_visibility_net_b1: BellSummary,
    pub bell_from_visibility_net_b2: BellSummary,
    pub no_signaling: HomogeneityTest,
}

struct CurveAccumulator {
    phase_b_rad: f64,
    port: PortId,
    raw_points: Vec<CorrelationPoint>,
    net_points: Vec<CorrelationPoint>,
}

/// Run a fringe scan on a passive-pair scenario: both fixed analyzers are
/// read out simultaneously at every analyzer-a setting, giving two
/// correlation curves and a shared-settings CHSH.
pub fn run_experiment2(cfg: &ScenarioConfig, plan: &ScanPlan) -> Result<Experiment2Report> {
    cfg.validate()?;
    plan.validate()?;
    let (b1_phase, b2_phase) = match &cfg.analyzer_b {
        AnalyzerB::Passive { b1, b2, .. } => (b1.phase_rad, b2.phase_rad),
        AnalyzerB::Single(_) => {
            return Err(FransonError::Topology(
                "the passive-pair experiment needs the coupler topology".into(),
            ))
        }
    };
    if any_schedule(cfg) {
        return Err(FransonError::Plan(
            "phase schedules cannot be combined with a stepped scan; use the scheduled fringe runner"
                .into(),
        ));
    }

    let calibration = calibrate(cfg)?;
    let window = cfg.coincidence.window_s;
    let offset = cfg.coincidence.accidental_offset_s;
    let dt_max = cfg.max_arm_imbalance_s();
    let required_offset = dt_max + 3.0 * window;
    if offset.abs() <= required_offset {
        return Err(FransonError::OffsetTooSmall { offset_s: offset, required_s: required_offset });
    }

    let mut curves = [
        CurveAccumulator {
            phase_b_rad: b1_phase,
            port: PortId::B1Plus,
            raw_points: Vec::new(),
            net_points: Vec::new(),
        },
        CurveAccumulator {
            phase_b_rad: b2_phase,
            port: PortId::B2Plus,
            raw_points: Vec::new(),
            net_points: Vec::new(),
        },
    ];
    let mut points = Vec::with_capacity(plan.points.len());
    let mut singles = Vec::with_capacity(plan.points.len());
    let mut phase_a_values = Vec::with_capacity(plan.points.len());

    for (idx, setting) in plan.points.iter().enumerate() {
        let mut point_cfg = cfg.clone();
        point_cfg.analyzer_a.phase_rad = setting.phase_a_rad;
        let streams = run_point_streams(&point_cfg, idx as u32)?;

        let mut curve_reports: [Option<CurvePointReport>; 2] = [None, None];
        for (c_idx, curve) in curves.iter_mut().enumerate() {
            let mut n_raw = [0.0f64; 2];
            let mut n_accidental = [0.0f64; 2];
            let mut n_net = [0.0f64; 2];
            for (slot, a_port) in [(0usize, PortId::APlus), (1, PortId::AMinus)] {
                let raw = count_coincidences(
                    streams.port(a_port),
                    streams.port(curve.port),
                    calibration.link_shift_s,
                    window,
                )? as f64;
                let acc = count_coincidences(
                    streams.port(a_port),
                    streams.port(curve.port),
                    calibration.link_shift_s + offset,
                    window,
                )? as f64;
                n_raw[slot] = raw;
                n_accidental[slot] = acc;
                n_net[slot] = raw - acc;
            }
            let e_raw = reconstruct_e_symmetric(n_raw[0], n_raw[1])?;
            let e_net =
                reconstruct_net_e_symmetric(n_raw[0], n_raw[1], n_accidental[0], n_accidental[1])?;
            let phase_sum_rad = setting.phase_a_rad + curve.phase_b_rad;
            curve.raw_points.push(CorrelationPoint {
                phase_sum_rad,
                e: e_raw.e,
                sigma_e: e_raw.sigma_e,
            });
            curve.net_points.push(CorrelationPoint {
                phase_sum_rad,
                e: e_net.e,
                sigma_e: e_net.sigma_e,
            });
            curve_reports[c_idx] =
                Some(CurvePointReport { phase_sum_rad, n_raw, n_accidental, n_net, e_raw, e_net });
        }

        let singles_counts: BTreeMap<PortId, u64> = streams
            .by_port
            .iter()
            .map(|(&port, tags)| (port, tags.len() as u64))
            .collect();
        singles.push(singles_counts.clone());
        phase_a_values.push(setting.phase_a_rad);
        points.push(Point2Report {
            phase_a_rad: setting.phase_a_rad,
            b1: curve_reports[0].take().expect("filled above"),
            b2: curve_reports[1].take().expect("filled above"),
            singles_counts,
        });
    }

    let fringe_raw_b1 = fit_fringe(&curves[0].raw_points)?;
    let fringe_net_b1 = fit_fringe(&curves[0].net_points)?;
    let fringe_raw_b2 = fit_fringe(&curves[1].raw_points)?;
    let fringe_net_b2 = fit_fringe(&curves[1].net_points)?;

    let bell_four_setting_raw =
        chsh_from_curve_pair(&phase_a_values, &curves[0].raw_points, &curves[1].raw_points)?;
    let bell_four_setting_net =
        chsh_from_curve_pair(&phase_a_values, &curves[0].net_points, &curves[1].net_points)?;

    Ok(Experiment2Report {
        scenario: cfg.clone(),
        link_shift_s: calibration.link_shift_s,
        peak_histogram: calibration.histogram,
        points,
        fringe_raw_b1,
        fringe_net_b1,
        fringe_raw_b2,
        fringe_net_b2,
        qber_raw_b1: qber(fringe_raw_b1.visibility),
        qber_net_b1: qber(fringe_net_b1.visibility),
        bell_four_setting_raw: bell_four_setting_raw.into(),
        bell_four_setting_net: bell_four_setting_net.into(),
        bell_from_visibility_net_b1: from_visibility(
            fringe_net_b1.visibility,
            fringe_net_b1.sigma_visibility,
        )?
        .into(),
        bell_from_visibility_net_b2: from_visibility(
            fringe_net_b2.visibility,
            fringe_net_b2.sigma_visibility,
        )?
        .into(),
        no_signaling: singles_homogeneity(&singles),
    })
}

// ---------------------------------------------------------------------------
// Scheduled fringe (continuous phase ramp)
// ---------------------------------------------------------------------------

/// One time bin of a scheduled (phase-ramp) acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledBin {
    pub t_center_s: f64,
    /// Phase sum the schedules predict at the bin center, rad.
    pub phase_sum_rad: f64,
    pub e_raw: Correlation,
}

/// Run one continuous acquisition with the configured phase schedules and
/// reduce it to per-time-bin correlations. The bin count adapts so the
/// phase sum moves at most about a quarter period per bin.
pub fn run_scheduled_fringe(cfg: &ScenarioConfig) -> Result<Vec<ScheduledBin>> {
    cfg.validate()?;
    if !any_schedule(cfg) {
        return Err(FransonError::Plan("no analyzer has a phase schedule".into()));
    }
    let total = cfg.coincidence.integration_time_s;
    let sum_rate = phase_sum_rate(cfg);
    let n_bins = ((sum_rate.abs() * total / FRAC_PI_4).ceil() as usize).clamp(8, 256);

    let calibration = calibrate(&{
        // Calibrate without the ramp; the peak position has no phase
        // dependence but a frozen instrument keeps the stage simple.
        let mut frozen = cfg.clone();
        frozen.analyzer_a.phase_schedule = None;
        match &mut frozen.analyzer_b {
            AnalyzerB::Single(b) => b.phase_schedule = None,
            AnalyzerB::Passive { b1, b2, .. } => {
                b1.phase_schedule = None;
                b2.phase_schedule = None;
            }
        }
        frozen
    })?;

    let streams = run_point_streams(cfg, 0)?;
    let window = cfg.coincidence.window_s;
    let bin_width = total / n_bins as f64;
    let mut bins = Vec::with_capacity(n_bins);
    for k in 0..n_bins {
        let lo = k as f64 * bin_width;
        let hi = lo + bin_width;
        let sliced = slice_streams(&streams, lo, hi);
        let raw = count_quad(&sliced, calibration.link_shift_s, 0.0, window, QuadKind::Raw)?;
        let e_raw = match correlation(&raw) {
            Ok(c) => c,
            Err(FransonError::EmptyQuad) => Correlation { e: 0.0, sigma_e: f64::INFINITY },
            Err(e) => return Err(e),
        };
        let t_center_s = 0.5 * (lo + hi);
        bins.push(ScheduledBin {
            t_center_s,
            phase_sum_rad: phase_sum_at(cfg, t_center_s),
            e_raw,
        });
    }
    Ok(bins)
}

/// Rate of change of the phase sum under the configured schedules. For the
/// passive-pair topology this uses analyzer b1's schedule.
pub fn phase_sum_rate(cfg: &ScenarioConfig) -> f64 {
    let rate_a = cfg.analyzer_a.phase_schedule.map_or(0.0, |s| s.rate_rad_per_s);
    let rate_b = match &cfg.analyzer_b {
        AnalyzerB::Single(b) => b.phase_schedule.map_or(0.0, |s| s.rate_rad_per_s),
        AnalyzerB::Passive { b1, .. } => b1.phase_schedule.map_or(0.0, |s| s.rate_rad_per_s),
    };
    rate_a + rate_b
}

fn phase_sum_at(cfg: &ScenarioConfig, t_s: f64) -> f64 {
    let b = match &cfg.analyzer_b {
        AnalyzerB::Single(b) => b.phase_at(t_s),
        AnalyzerB::Passive { b1, .. } => b1.phase_at(t_s),
    };
    cfg.analyzer_a.phase_at(t_s) + b
}

fn slice_streams(streams: &TagStreams, lo_s: f64, hi_s: f64) -> TagStreams {
    let by_port = streams
        .by_port
        .iter()
        .map(|(&port, tags)| {
            let start = tags.partition_point(|t| t.time_s < lo_s);
            let end = tags.partition_point(|t| t.time_s < hi_s);
            (port, tags[start..end].to_vec())
        })
        .collect();
    TagStreams { duration_s: hi_s - lo_s, by_port }
}

/// Spectral power of a binned correlation series at one angular rate;
/// peaks at the true fringe rate of a scheduled acquisition.
pub fn fringe_power(bins: &[ScheduledBin], omega_rad_per_s: f64) -> f64 {
    let mut re = 0.0;
    let mut im = 0.0;
    let mut n = 0.0;
    for b in bins {
        if !b.e_raw.sigma_e.is_finite() {
            continue;
        }
        let (s, c) = (omega_rad_per_s * b.t_center_s).sin_cos();
        re += b.e_raw.e * c;
        im += b.e_raw.e * s;
        n += 1.0;
    }
    if n == 0.0 {
        return 0.0;
    }
    (re * re + im * im) / (n * n)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Either experiment's full record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentReport {
    TwoChannel(Experiment1Report),
    PassivePair(Experiment2Report),
}

/// Run whichever experiment the scenario topology calls for.
pub fn run_experiment(cfg: &ScenarioConfig, plan: &ScanPlan) -> Result<ExperimentReport> {
    match cfg.analyzer_b {
        AnalyzerB::Single(_) => Ok(ExperimentReport::TwoChannel(run_experiment1(cfg, plan)?)),
        AnalyzerB::Passive { .. } => Ok(ExperimentReport::PassivePair(run_experiment2(cfg, plan)?)),
    }
}

/// Output formats for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| FransonError::io(path.display().to_string(), e))
}

fn fringe_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("curve,phase_sum_rad,e_raw,sigma_e_raw,e_net,sigma_e_net\n");
    let mut row = |curve: &str, sum: f64, raw: Correlation, net: Correlation| {
        out.push_str(&format!(
            "{curve},{},{},{},{},{}\n",
            fmt_f64(sum),
            fmt_f64(raw.e),
            fmt_f64(raw.sigma_e),
            fmt_f64(net.e),
            fmt_f64(net.sigma_e)
        ));
    };
    match report {
        ExperimentReport::TwoChannel(r) => {
            for p in &r.points {
                row("ab", p.phase_sum_rad, p.e_raw, p.e_net);
            }
        }
        ExperimentReport::PassivePair(r) => {
            for p in &r.points {
                row("ab1", p.b1.phase_sum_rad, p.b1.e_raw, p.b1.e_net);
            }
            for p in &r.points {
                row("ab2", p.b2.phase_sum_rad, p.b2.e_raw, p.b2.e_net);
            }
        }
    }
    out
}

fn quads_csv(report: &ExperimentReport) -> String {
    match report {
        ExperimentReport::TwoChannel(r) => {
            let mut out = String::from(
                "phase_sum_rad,kind,n_pp,n_pm,n_mp,n_mm\n",
            );
            for p in &r.points {
                for quad in [&p.raw, &p.accidental, &p.net] {
                    let kind = match quad.kind {
                        QuadKind::Raw => "raw",
                        QuadKind::Accidental => "accidental",
                        QuadKind::Net => "net",
                    };
                    out.push_str(&format!(
                        "{},{kind},{},{},{},{}\n",
                        fmt_f64(p.phase_sum_rad),
                        fmt_f64(quad.counts[0]),
                        fmt_f64(quad.counts[1]),
                        fmt_f64(quad.counts[2]),
                        fmt_f64(quad.counts[3])
                    ));
                }
            }
            out
        }
        ExperimentReport::PassivePair(r) => {
            let mut out = String::from("curve,phase_sum_rad,kind,n_plus,n_minus\n");
            for p in &r.points {
                for (curve, c) in [("ab1", &p.b1), ("ab2", &p.b2)] {
                    for (kind, n) in
                        [("raw", c.n_raw), ("accidental", c.n_accidental), ("net", c.n_net)]
                    {
                        out.push_str(&format!(
                            "{curve},{},{kind},{},{}\n",
                            fmt_f64(c.phase_sum_rad),
                            fmt_f64(n[0]),
                            fmt_f64(n[1])
                        ));
                    }
                }
            }
            out
        }
    }
}

fn histogram_csv(report: &ExperimentReport) -> String {
    let hist = match report {
        ExperimentReport::TwoChannel(r) => &r.peak_histogram,
        ExperimentReport::PassivePair(r) => &r.peak_histogram,
    };
    let mut out = String::from("bin_center_s,count\n");
    for (idx, &count) in hist.counts.iter().enumerate() {
        out.push_str(&format!("{},{count}\n", fmt_f64(hist.bin_center_s(idx))));
    }
    out
}

/// Write a report into a directory. JSON gives the full structured record
/// (`report.json`); CSV gives flat tables (`fringe.csv`, `quads.csv`,
/// `histogram.csv`). Returns the written paths. Output is byte-stable:
/// rerunning the same scenario and seed reproduces identical files.
pub fn emit_report(
    report: &ExperimentReport,
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| FransonError::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        let path = dir.join("report.json");
        let body = serde_json::to_string_pretty(report)
            .map_err(|e| FransonError::Parse(format!("report serialization failed: {e}")))?;
        write_file(&path, &body)?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Csv) {
        for (name, body) in [
            ("fringe.csv", fringe_csv(report)),
            ("quads.csv", quads_csv(report)),
            ("histogram.csv", histogram_csv(report)),
        ] {
            let path = dir.join(name);
            write_file(&path, &body)?;
            written.push(path);
        }
    }
    Ok(written)
}
