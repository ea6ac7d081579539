//! Coincidence counting on time-tag streams: windowed greedy matching,
//! accidental-rate estimation at a far offset, arrival-difference
//! histograms, and link-delay calibration from the histogram peak.
//!
//! Conventions: streams are time-sorted; a tag on side a matches a tag on
//! side b when |t_a - (t_b + shift)| <= window / 2, where `shift` aligns
//! the two fibers (roughly delay_a - delay_b, calibrated from data) and the
//! window bound is inclusive. Matching is greedy and one-to-one in stream
//! order, which at realistic rates coincides with nearest-neighbor pairing.


use serde::{Deserialize, Serialize};

use crate::config::PortId;
use crate::engine::{TagStreams, TimeTag};
use crate::error::FransonError;
use crate::quantum::PortSign;
use crate::Result;

/// Fraction of true coincident pairs whose jittered arrival difference
/// lands inside a full window of width `window_s`, for independent
/// Gaussian jitters on the two detectors.
pub fn window_capture_fraction(window_s: f64, jitter_a_s: f64, jitter_b_s: f64) -> f64 {
    let sigma_d = (jitter_a_s * jitter_a_s + jitter_b_s * jitter_b_s).sqrt();
    if sigma_d == 0.0 {
        return 1.0;
    }
    statrs::function::erf::erf(0.5 * window_s / (sigma_d * std::f64::consts::SQRT_2))
}

/// Mean accidental coincidences between two uncorrelated streams:
/// r_a * r_b * window * duration.
pub fn estimate_accidentals_analytic(
    singles_a_hz: f64,
    singles_b_hz: f64,
    window_s: f64,
    duration_s: f64,
) -> f64 {
    singles_a_hz * singles_b_hz * window_s * duration_s
}

fn ensure_sorted(tags: &[TimeTag], stream: &str) -> Result<()> {
    if tags.windows(2).any(|w| w[0].time_s > w[1].time_s) {
        return Err(FransonError::UnsortedStream { stream: stream.to_string() });
    }
    Ok(())
}

/// Count coincidences between two sorted streams. Each tag participates in
/// at most one match within this pairing.
pub fn count_coincidences(
    a: &[TimeTag],
    b: &[TimeTag],
    shift_s: f64,
    window_s: f64,
) -> Result<u64> {
    if window_s <= 0.0 || !window_s.is_finite() || !shift_s.is_finite() {
        return Err(FransonError::Domain(format!(
            "coincidence matching needs finite shift and positive window, got shift {shift_s}, window {window_s}"
        )));
    }
    ensure_sorted(a, "a")?;
    ensure_sorted(b, "b")?;
    let half = window_s / 2.0;
    let mut count = 0u64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        let d = a[i].time_s - (b[j].time_s + shift_s);
        if d < -half {
            i += 1;
        } else if d > half {
            j += 1;
        } else {
            count += 1;
            i += 1;
            j += 1;
        }
    }
    Ok(count)
}

// ---------------------------------------------------------------------------
// Rate quads
// ---------------------------------------------------------------------------

/// What a quad's counts represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadKind {
    /// Counts in the live window.
    Raw,
    /// Counts in the far accidental window.
    Accidental,
    /// Raw minus accidental, floored at zero.
    Net,
}

/// Coincidence counts for the four port pairings of a two-analyzer
/// arrangement, in index order (+,+), (+,-), (-,+), (-,-). Counts are kept
/// as floats so subtracted quads stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateQuad {
    pub kind: QuadKind,
    /// Live time behind the counts, seconds.
    pub duration_s: f64,
    pub counts: [f64; 4],
}

impl RateQuad {
    pub fn index(i: PortSign, j: PortSign) -> usize {
        match (i, j) {
            (PortSign::Plus, PortSign::Plus) => 0,
            (PortSign::Plus, PortSign::Minus) => 1,
            (PortSign::Minus, PortSign::Plus) => 2,
            (PortSign::Minus, PortSign::Minus) => 3,
        }
    }

    pub fn count(&self, i: PortSign, j: PortSign) -> f64 {
        self.counts[RateQuad::index(i, j)]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Counts normalized to rates, Hz.
    pub fn rates_hz(&self) -> [f64; 4] {
        self.counts.map(|c| c / self.duration_s)
    }
}

/// Port pairings of the two-channel arrangement, in quad index order.
pub const EXP1_PAIRINGS: [(PortId, PortId); 4] = [
    (PortId::APlus, PortId::BPlus),
    (PortId::APlus, PortId::BMinus),
    (PortId::AMinus, PortId::BPlus),
    (PortId::AMinus, PortId::BMinus),
];

/// Count the four-pairing quad in a window displaced by `extra_offset_s`
/// from the calibrated alignment (zero for the live window).
pub fn count_quad(
    streams: &TagStreams,
    shift_s: f64,
    extra_offset_s: f64,
    window_s: f64,
    kind: QuadKind,
) -> Result<RateQuad> {
    let mut counts = [0.0f64; 4];
    for (idx, (pa, pb)) in EXP1_PAIRINGS.into_iter().enumerate() {
        counts[idx] =
            count_coincidences(streams.port(pa), streams.port(pb), shift_s + extra_offset_s, window_s)?
                as f64;
    }
    Ok(RateQuad { kind, duration_s: streams.duration_s, counts })
}

/// Count accidentals in a window displaced far enough to clear the central
/// peak and both satellites.
pub fn measure_accidentals(
    streams: &TagStreams,
    shift_s: f64,
    window_s: f64,
    offset_s: f64,
    max_arm_imbalance_s: f64,
) -> Result<RateQuad> {
    let required_s = max_arm_imbalance_s + 3.0 * window_s;
    if offset_s.abs() <= required_s {
        return Err(FransonError::OffsetTooSmall { offset_s, required_s });
    }
    count_quad(streams, shift_s, offset_s, window_s, QuadKind::Accidental)
}

// ---------------------------------------------------------------------------
// Arrival-difference histograms and delay calibration
// ---------------------------------------------------------------------------

/// Histogram of all pairwise arrival differences d = t_a - t_b within a
/// span, the classic peak structure a time-correlator displays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayHistogram {
    /// Left edge of the first bin, seconds.
    pub origin_s: f64,
    pub bin_s: f64,
    pub counts: Vec<u64>,
}

impl DelayHistogram {
    pub fn bin_center_s(&self, index: usize) -> f64 {
        self.origin_s + (index as f64 + 0.5) * self.bin_s
    }

    /// Index of the fullest bin, if any count was recorded.
    pub fn peak_bin(&self) -> Option<usize> {
        let (idx, &max) = self.counts.iter().enumerate().max_by_key(|(_, &c)| c)?;
        (max > 0).then_some(idx)
    }
}

/// Accumulate all pairwise differences d = t_a - t_b with
/// |d - center_s| <= half_span_s into bins of width bin_s. Unlike greedy
/// matching this counts every qualifying pair, so satellite and central
/// peaks appear with their true relative areas.
pub fn build_histogram(
    a: &[TimeTag],
    b: &[TimeTag],
    center_s: f64,
    half_span_s: f64,
    bin_s: f64,
) -> Result<DelayHistogram> {
    if !(bin_s > 0.0) || !(half_span_s > 0.0) || !center_s.is_finite() {
        return Err(FransonError::Domain(format!(
            "histogram needs positive span and bin, got span {half_span_s}, bin {bin_s}"
        )));
    }
    ensure_sorted(a, "a")?;
    ensure_sorted(b, "b")?;
    let origin_s = center_s - half_span_s;
    let n_bins = (2.0 * half_span_s / bin_s).ceil() as usize;
    let mut counts = vec![0u64; n_bins.max(1)];
    let mut j_lo = 0usize;
    for ta in a {
        // b tags with t_b in [ta - center - half, ta - center + half]
        let lo = ta.time_s - center_s - half_span_s;
        let hi = ta.time_s - center_s + half_span_s;
        while j_lo < b.len() && b[j_lo].time_s < lo {
            j_lo += 1;
        }
        let mut j = j_lo;
        while j < b.len() && b[j].time_s <= hi {
            let d = ta.time_s - b[j].time_s;
            let idx = ((d - origin_s) / bin_s).floor();
            if idx >= 0.0 && (idx as usize) < counts.len() {
                counts[idx as usize] += 1;
            }
            j += 1;
        }
    }
    Ok(DelayHistogram { origin_s, bin_s, counts })
}

/// Mean arrival difference over all pairs within ±half_s of center_s,
/// or None when no pair falls inside.
fn mean_difference_within(a: &[TimeTag], b: &[TimeTag], center_s: f64, half_s: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    let mut j_lo = 0usize;
    for ta in a {
        let lo = ta.time_s - center_s - half_s;
        let hi = ta.time_s - center_s + half_s;
        while j_lo < b.len() && b[j_lo].time_s < lo {
            j_lo += 1;
        }
        let mut j = j_lo;
        while j < b.len() && b[j].time_s <= hi {
            sum += ta.time_s - b[j].time_s;
            n += 1;
            j += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Locate the central arrival-difference peak between two merged side
/// streams: a coarse 100 ps scan over ±half_span_s, a fine 10 ps scan
/// around the winner, then a centroid refinement. Returns the shift to
/// feed [`count_coincidences`].
pub fn calibrate_link_delay(a: &[TimeTag], b: &[TimeTag], half_span_s: f64) -> Result<f64> {
    let coarse = build_histogram(a, b, 0.0, half_span_s, 100e-12)?;
    let peak = coarse
        .peak_bin()
        .ok_or_else(|| FransonError::Domain("delay calibration saw no pair differences".into()))?;
    let coarse_center = coarse.bin_center_s(peak);
    let fine = build_histogram(a, b, coarse_center, 3e-9, 10e-12)?;
    let fine_peak = fine
        .peak_bin()
        .ok_or_else(|| FransonError::Domain("delay calibration lost the peak on refinement".into()))?;
    let fine_center = fine.bin_center_s(fine_peak);
    let refined = mean_difference_within(a, b, fine_center, 400e-12)
        .ok_or_else(|| FransonError::Domain("delay calibration centroid window is empty".into()))?;
    Ok(refined)
}

/// Merge several sorted port streams into one sorted stream.
pub fn merge_sorted(streams: &TagStreams, ports: &[PortId]) -> Vec<TimeTag> {
    let mut merged: Vec<TimeTag> = ports.iter().flat_map(|&p| streams.port(p).iter().copied()).collect();
    merged.sort_unstable_by(|x, y| x.time_s.partial_cmp(&y.time_s).expect("finite times"));
    merged
}

/// Convenience: merged side-a and side-b streams of a run.
pub fn merged_sides(streams: &TagStreams) -> (Vec<TimeTag>, Vec<TimeTag>) {
    let mut side_a = Vec::new();
    let mut side_b = Vec::new();
    for (&port, _) in &streams.by_port {
        if port.is_side_a() {
            side_a.push(port);
        } else {
            side_b.push(port);
        }
    }
    (merge_sorted(streams, &side_a), merge_sorted(streams, &side_b))
}
