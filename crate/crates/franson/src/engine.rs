//! Event-stream synthesis: pair emission, optical propagation, detection.
//!
//! Turns a scenario into per-detector time-tag streams. Two generators share
//! the same physics:
//!
//! * [`run_scenario`] thins the pair process analytically: candidate pairs
//!   are drawn at the (much lower) rate of pairs that could produce at least
//!   one detection, then acceptance draws reproduce the exact per-pair
//!   detection-pattern probabilities. Phases enter only through the outcome
//!   sampling, so the thinning bound never depends on the scan point and the
//!   generated statistics match the untinned process exactly.
//! * [`run_scenario_reference`] materializes every pair emission and walks
//!   each photon through routing, interference, loss, and jitter with plain
//!   Bernoulli draws. It is orders of magnitude slower and exists to
//!   cross-check the thinned generator.
//!
//! Randomness is organized into named streams so runs are reproducible and
//! chunks are independent: stream seeds derive from the scenario seed via
//! [`derive_stream_seed`] with role 0 feeding the pair pipeline and roles
//! 1..=n feeding the dark-count generator of each instrumented port (in
//! canonical port order). Within the pair stream, each candidate consumes
//! draws in a fixed documented order: class, b-side routing (passive
//! topology only), joint outcome (two draws), central-peak arm choice (one
//! draw, central outcomes only), detection pattern (one draw), then one
//! jitter draw per surviving photon, side a first.

use std::collections::BTreeMap;
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::config::{AnalyzerB, InterferometerParams, PortId, ScenarioConfig};
use crate::error::FransonError;
use crate::quantum::{OutcomeDistribution, PortSign, TimePeak};
use crate::Result;

// ---------------------------------------------------------------------------
// Tags
// ---------------------------------------------------------------------------

/// What produced a time tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagKind {
    /// Detector noise; carries no timing structure.
    Dark,
    /// A photon detection, labeled by its pair's arm-combination class:
    /// both-short or both-long is `Central`, short/long is `Early`,
    /// long/short is `Late`. Pairs routed down a single fiber are labeled
    /// by the same map over the two arm choices their photons made.
    Photon(TimePeak),
}

impl TagKind {
    /// Stable provenance code used in tag dumps: 0 dark, 1 central,
    /// 2 early, 3 late.
    pub fn code(self) -> u8 {
        match self {
            TagKind::Dark => 0,
            TagKind::Photon(TimePeak::Central) => 1,
            TagKind::Photon(TimePeak::Early) => 2,
            TagKind::Photon(TimePeak::Late) => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<TagKind> {
        match code {
            0 => Some(TagKind::Dark),
            1 => Some(TagKind::Photon(TimePeak::Central)),
            2 => Some(TagKind::Photon(TimePeak::Early)),
            3 => Some(TagKind::Photon(TimePeak::Late)),
            _ => None,
        }
    }
}

/// One detection event on one detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeTag {
    /// Absolute detection time from the start of the run, seconds.
    pub time_s: f64,
    pub kind: TagKind,
}

/// Per-detector, time-sorted tag streams from one run (or several merged
/// sequential chunks of one run).
#[derive(Debug, Clone, PartialEq)]
pub struct TagStreams {
    /// Live acquisition time represented by the streams, seconds.
    pub duration_s: f64,
    pub by_port: BTreeMap<PortId, Vec<TimeTag>>,
}

impl TagStreams {
    pub fn empty(ports: &[PortId], duration_s: f64) -> Self {
        TagStreams {
            duration_s,
            by_port: ports.iter().map(|&p| (p, Vec::new())).collect(),
        }
    }

    /// Tags on one port (empty if the port has none).
    pub fn port(&self, port: PortId) -> &[TimeTag] {
        self.by_port.get(&port).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total_tags(&self) -> usize {
        self.by_port.values().map(Vec::len).sum()
    }

    /// Append a later chunk of the same run. Chunks gate their tags to
    /// their own time span, so appending in chunk order keeps every
    /// per-port stream sorted.
    pub fn merge(&mut self, other: TagStreams) {
        self.duration_s += other.duration_s;
        for (port, tags) in other.by_port {
            self.by_port.entry(port).or_default().extend(tags);
        }
    }
}

/// One contiguous span of simulated acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkSpec {
    /// Absolute start time of the chunk; phase schedules see absolute time.
    pub t_start_s: f64,
    pub duration_s: f64,
    /// Scan-point index, part of the RNG stream identity.
    pub point_index: u32,
    /// Chunk index within the point, part of the RNG stream identity.
    pub chunk_index: u32,
}

impl ChunkSpec {
    /// A standalone run starting at t = 0.
    pub fn single(duration_s: f64) -> Self {
        ChunkSpec { t_start_s: 0.0, duration_s, point_index: 0, chunk_index: 0 }
    }

    pub fn end_s(&self) -> f64 {
        self.t_start_s + self.duration_s
    }
}

// ---------------------------------------------------------------------------
// RNG streams
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed of one named RNG stream from the scenario seed.
/// Role 0 is the pair pipeline; roles 1..=n are per-port dark generators
/// in canonical instrumented-port order.
pub fn derive_stream_seed(master_seed: u64, point_index: u32, chunk_index: u32, role: u32) -> u64 {
    let mut x = master_seed;
    x = splitmix64(x ^ (point_index as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    x = splitmix64(x ^ (chunk_index as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB));
    x = splitmix64(x ^ (role as u64).wrapping_mul(0x8EBC_6AF0_9C88_C6E3));
    x
}

fn stream_rng(cfg: &ScenarioConfig, chunk: &ChunkSpec, role: u32) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_stream_seed(
        cfg.rng_seed,
        chunk.point_index,
        chunk.chunk_index,
        role,
    ))
}

// ---------------------------------------------------------------------------
// Elementary generators
// ---------------------------------------------------------------------------

/// Emission times of a homogeneous Poisson pair source over one chunk,
/// in increasing absolute time.
pub fn generate_pair_emissions<R: Rng + ?Sized>(
    pair_rate_hz: f64,
    t_start_s: f64,
    duration_s: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut times = Vec::new();
    if pair_rate_hz <= 0.0 || duration_s <= 0.0 {
        return times;
    }
    let gaps = Exp::new(pair_rate_hz).expect("positive rate");
    let end = t_start_s + duration_s;
    let mut t = t_start_s + gaps.sample(rng);
    while t < end {
        times.push(t);
        t += gaps.sample(rng);
    }
    times
}

/// Dark counts of one detector over one chunk: a homogeneous Poisson
/// stream with no timing jitter, in increasing absolute time.
pub fn generate_dark_counts<R: Rng + ?Sized>(
    dark_rate_hz: f64,
    t_start_s: f64,
    duration_s: f64,
    rng: &mut R,
) -> Vec<TimeTag> {
    generate_pair_emissions(dark_rate_hz, t_start_s, duration_s, rng)
        .into_iter()
        .map(|t| TimeTag { time_s: t, kind: TagKind::Dark })
        .collect()
}

/// Analytic mean singles rate of one instrumented port, Hz. This is the
/// oracle the simulated streams are tested against: dark rate plus the
/// photon flux routed to the port times its end-to-end survival.
pub fn expected_singles_rate(cfg: &ScenarioConfig, port: PortId) -> Result<f64> {
    if !cfg.instrumented_ports().contains(&port) {
        return Err(FransonError::Topology(format!(
            "port {port} is not instrumented in this scenario"
        )));
    }
    let det = &cfg.detectors[&port];
    let r = cfg.source.pair_rate_hz;
    // Each emitted pair sends one photon per side on average regardless of
    // the split fraction, so the port flux is rate * route probability / 2.
    let (route_prob, survival) = port_transmission(cfg, port);
    Ok(det.dark_rate_hz + r * route_prob * survival / 2.0)
}

/// Routing probability and end-to-end survival (fiber, analyzer insertion,
/// detector efficiency) for one instrumented port. Callers must have
/// verified the port is instrumented.
fn port_transmission(cfg: &ScenarioConfig, port: PortId) -> (f64, f64) {
    let det = &cfg.detectors[&port];
    match (&cfg.analyzer_b, port) {
        (_, PortId::APlus) | (_, PortId::AMinus) => {
            (1.0, cfg.link_a.survival() * cfg.analyzer_a.survival() * det.efficiency)
        }
        (AnalyzerB::Single(b), PortId::BPlus) | (AnalyzerB::Single(b), PortId::BMinus) => {
            (1.0, cfg.link_b.survival() * b.survival() * det.efficiency)
        }
        (AnalyzerB::Passive { coupler_split, b1, .. }, PortId::B1Plus) => {
            (*coupler_split, cfg.link_b.survival() * b1.survival() * det.efficiency)
        }
        (AnalyzerB::Passive { coupler_split, b2, .. }, PortId::B2Plus) => {
            (1.0 - *coupler_split, cfg.link_b.survival() * b2.survival() * det.efficiency)
        }
        _ => unreachable!("instrumented_ports checked above"),
    }
}

/// Analytic phase-averaged central-peak coincidence rate for one pairing
/// of a side-a port with a side-b port, inside the coincidence window.
/// Separated pairs arrive in the central peak with probability 1/8 per
/// port combination before losses; the window captures the jitter-smeared
/// peak with the erf fraction.
pub fn expected_central_rate_hz(cfg: &ScenarioConfig, port_a: PortId, port_b: PortId) -> Result<f64> {
    let instrumented = cfg.instrumented_ports();
    for port in [port_a, port_b] {
        if !instrumented.contains(&port) {
            return Err(FransonError::Topology(format!(
                "port {port} is not instrumented in this scenario"
            )));
        }
    }
    if !port_a.is_side_a() || port_b.is_side_a() {
        return Err(FransonError::Topology(format!(
            "central-peak pairings take one side-a and one side-b port, got {port_a} and {port_b}"
        )));
    }
    let (route_a, surv_a) = port_transmission(cfg, port_a);
    let (route_b, surv_b) = port_transmission(cfg, port_b);
    let kappa = crate::coincidence::window_capture_fraction(
        cfg.coincidence.window_s,
        cfg.detectors[&port_a].jitter_sigma_s,
        cfg.detectors[&port_b].jitter_sigma_s,
    );
    Ok(cfg.source.pair_rate_hz
        * cfg.source.split_fraction
        * route_a
        * surv_a
        * route_b
        * surv_b
        * kappa
        / 8.0)
}

// ---------------------------------------------------------------------------
// Pair propagation
// ---------------------------------------------------------------------------

/// Which analyzer received the side-b photon of a separated pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BRoute {
    Single,
    B1,
    B2,
}

/// Which analyzer arm a photon traversed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Short,
    Long,
}

impl Arm {
    fn delay_s(self, arm_imbalance_s: f64) -> f64 {
        match self {
            Arm::Short => 0.0,
            Arm::Long => arm_imbalance_s,
        }
    }
}

/// Fully sampled optical outcome of one separated pair, before any loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutcome {
    pub b_route: BRoute,
    pub peak: TimePeak,
    pub port_a: PortSign,
    pub port_b: PortSign,
    pub arm_a: Arm,
    pub arm_b: Arm,
}

/// Sample routing, joint interference outcome, and arm choices for one
/// separated pair emitted at absolute time `t_s`.
pub fn propagate_pair<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    t_s: f64,
    rng: &mut R,
) -> Result<PairOutcome> {
    let pipeline = Pipeline::build(cfg)?;
    pipeline.sample_split_outcome(t_s, rng)
}

// ---------------------------------------------------------------------------
// Precomputed per-scenario physics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct PhaseRamp {
    intercept_rad: f64,
    rate_rad_per_s: f64,
}

impl PhaseRamp {
    fn from(ifo: &InterferometerParams) -> Self {
        PhaseRamp {
            intercept_rad: ifo.phase_rad,
            rate_rad_per_s: ifo.phase_schedule.map_or(0.0, |s| s.rate_rad_per_s),
        }
    }

    fn at(&self, t_s: f64) -> f64 {
        self.intercept_rad + self.rate_rad_per_s * t_s
    }
}

#[derive(Clone, Copy)]
struct PortPhys {
    port: PortId,
    /// End-to-end survival probability: link * analyzer loss * efficiency.
    survival: f64,
    jitter_sigma_s: f64,
}

impl PortPhys {
    fn build(cfg: &ScenarioConfig, port: PortId, link_surv: f64, ifo_surv: f64) -> Self {
        let det = &cfg.detectors[&port];
        PortPhys {
            port,
            survival: link_surv * ifo_surv * det.efficiency,
            jitter_sigma_s: det.jitter_sigma_s,
        }
    }
}

struct TwoChannel {
    phase: PhaseRamp,
    arm_imbalance_s: f64,
    plus: PortPhys,
    minus: PortPhys,
}

impl TwoChannel {
    fn phys(&self, sign: PortSign) -> PortPhys {
        match sign {
            PortSign::Plus => self.plus,
            PortSign::Minus => self.minus,
        }
    }
}

struct Branch {
    phase: PhaseRamp,
    arm_imbalance_s: f64,
    plus: PortPhys,
}

enum SideB {
    Single(TwoChannel),
    Passive { split: f64, b1: Branch, b2: Branch },
}

struct Pipeline {
    v0: f64,
    phi0: f64,
    split_fraction: f64,
    delay_a_s: f64,
    delay_b_s: f64,
    side_a: TwoChannel,
    side_b: SideB,
    /// Detection-probability bounds per pair class, and their mixture.
    q_split: f64,
    q_unsplit_a: f64,
    q_unsplit_b: f64,
    w_split: f64,
    w_unsplit_a: f64,
    q_total: f64,
}

impl Pipeline {
    fn build(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let link_a = cfg.link_a.survival();
        let link_b = cfg.link_b.survival();
        let side_a = TwoChannel {
            phase: PhaseRamp::from(&cfg.analyzer_a),
            arm_imbalance_s: cfg.analyzer_a.arm_imbalance_delay_s,
            plus: PortPhys::build(cfg, PortId::APlus, link_a, cfg.analyzer_a.survival()),
            minus: PortPhys::build(cfg, PortId::AMinus, link_a, cfg.analyzer_a.survival()),
        };
        let side_b = match &cfg.analyzer_b {
            AnalyzerB::Single(b) => SideB::Single(TwoChannel {
                phase: PhaseRamp::from(b),
                arm_imbalance_s: b.arm_imbalance_delay_s,
                plus: PortPhys::build(cfg, PortId::BPlus, link_b, b.survival()),
                minus: PortPhys::build(cfg, PortId::BMinus, link_b, b.survival()),
            }),
            AnalyzerB::Passive { coupler_split, b1, b2 } => SideB::Passive {
                split: *coupler_split,
                b1: Branch {
                    phase: PhaseRamp::from(b1),
                    arm_imbalance_s: b1.arm_imbalance_delay_s,
                    plus: PortPhys::build(cfg, PortId::B1Plus, link_b, b1.survival()),
                },
                b2: Branch {
                    phase: PhaseRamp::from(b2),
                    arm_imbalance_s: b2.arm_imbalance_delay_s,
                    plus: PortPhys::build(cfg, PortId::B2Plus, link_b, b2.survival()),
                },
            },
        };

        let p_a_max = side_a.plus.survival.max(side_a.minus.survival);
        let p_b_max = match &side_b {
            SideB::Single(b) => b.plus.survival.max(b.minus.survival),
            SideB::Passive { b1, b2, .. } => b1.plus.survival.max(b2.plus.survival),
        };
        let q_split = 1.0 - (1.0 - p_a_max) * (1.0 - p_b_max);
        let q_unsplit_a = 1.0 - (1.0 - p_a_max) * (1.0 - p_a_max);
        let q_unsplit_b = 1.0 - (1.0 - p_b_max) * (1.0 - p_b_max);
        let fs = cfg.source.split_fraction;
        let w_split = fs * q_split;
        let w_unsplit_a = 0.5 * (1.0 - fs) * q_unsplit_a;
        let w_unsplit_b = 0.5 * (1.0 - fs) * q_unsplit_b;

        Ok(Pipeline {
            v0: cfg.source.intrinsic_visibility,
            phi0: cfg.source.phase_sum_offset_rad,
            split_fraction: fs,
            delay_a_s: cfg.link_a.delay_s(),
            delay_b_s: cfg.link_b.delay_s(),
            side_a,
            side_b,
            q_split,
            q_unsplit_a,
            q_unsplit_b,
            w_split,
            w_unsplit_a,
            q_total: w_split + w_unsplit_a + w_unsplit_b,
        })
    }

    /// Route, joint outcome, and arms for one separated pair.
    fn sample_split_outcome<R: Rng + ?Sized>(&self, t_s: f64, rng: &mut R) -> Result<PairOutcome> {
        let (b_route, phase_b) = match &self.side_b {
            SideB::Single(b) => (BRoute::Single, b.phase),
            SideB::Passive { split, b1, b2 } => {
                if rng.random::<f64>() < *split {
                    (BRoute::B1, b1.phase)
                } else {
                    (BRoute::B2, b2.phase)
                }
            }
        };
        let dist =
            OutcomeDistribution::new(self.side_a.phase.at(t_s), phase_b.at(t_s), self.v0, self.phi0)?;
        let (peak, port_a, port_b) = dist.sample(rng);
        let (arm_a, arm_b) = match peak {
            TimePeak::Central => {
                if rng.random::<f64>() < 0.5 {
                    (Arm::Short, Arm::Short)
                } else {
                    (Arm::Long, Arm::Long)
                }
            }
            TimePeak::Early => (Arm::Short, Arm::Long),
            TimePeak::Late => (Arm::Long, Arm::Short),
        };
        Ok(PairOutcome { b_route, peak, port_a, port_b, arm_a, arm_b })
    }

    /// Physical endpoint of a split pair's b photon: survival, port, arm
    /// imbalance, jitter. Uninstrumented outputs of the single-channel
    /// analyzers have zero survival.
    fn b_endpoint(&self, out: &PairOutcome) -> (f64, PortPhys, f64) {
        match (&self.side_b, out.b_route) {
            (SideB::Single(b), BRoute::Single) => {
                let phys = b.phys(out.port_b);
                (phys.survival, phys, b.arm_imbalance_s)
            }
            (SideB::Passive { b1, .. }, BRoute::B1) => {
                let s = if out.port_b == PortSign::Plus { b1.plus.survival } else { 0.0 };
                (s, b1.plus, b1.arm_imbalance_s)
            }
            (SideB::Passive { b2, .. }, BRoute::B2) => {
                let s = if out.port_b == PortSign::Plus { b2.plus.survival } else { 0.0 };
                (s, b2.plus, b2.arm_imbalance_s)
            }
            _ => unreachable!("route matches topology"),
        }
    }

    /// Endpoint of an unseparated photon on side b: samples routing and
    /// port uniformly, then reports survival and physics.
    fn sample_b_unsplit_endpoint<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, PortPhys, f64, Arm) {
        match &self.side_b {
            SideB::Single(b) => {
                let port = if rng.random::<f64>() < 0.5 { PortSign::Plus } else { PortSign::Minus };
                let arm = if rng.random::<f64>() < 0.5 { Arm::Short } else { Arm::Long };
                let phys = b.phys(port);
                (phys.survival, phys, b.arm_imbalance_s, arm)
            }
            SideB::Passive { split, b1, b2 } => {
                let branch = if rng.random::<f64>() < *split { b1 } else { b2 };
                let port = if rng.random::<f64>() < 0.5 { PortSign::Plus } else { PortSign::Minus };
                let arm = if rng.random::<f64>() < 0.5 { Arm::Short } else { Arm::Long };
                let s = if port == PortSign::Plus { branch.plus.survival } else { 0.0 };
                (s, branch.plus, branch.arm_imbalance_s, arm)
            }
        }
    }

    fn sample_a_unsplit_endpoint<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, PortPhys, f64, Arm) {
        let port = if rng.random::<f64>() < 0.5 { PortSign::Plus } else { PortSign::Minus };
        let arm = if rng.random::<f64>() < 0.5 { Arm::Short } else { Arm::Long };
        let phys = self.side_a.phys(port);
        (phys.survival, phys, self.side_a.arm_imbalance_s, arm)
    }
}

fn peak_of_arms(arm_1: Arm, arm_2: Arm) -> TimePeak {
    match (arm_1, arm_2) {
        (Arm::Short, Arm::Short) | (Arm::Long, Arm::Long) => TimePeak::Central,
        (Arm::Short, Arm::Long) => TimePeak::Early,
        (Arm::Long, Arm::Short) => TimePeak::Late,
    }
}

// ---------------------------------------------------------------------------
// Scenario runs
// ---------------------------------------------------------------------------

struct TagSink {
    by_port: BTreeMap<PortId, Vec<TimeTag>>,
}

impl TagSink {
    fn new(ports: &[PortId]) -> Self {
        TagSink { by_port: ports.iter().map(|&p| (p, Vec::new())).collect() }
    }

    fn push<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        t_emit_s: f64,
        link_delay_s: f64,
        arm: Arm,
        arm_imbalance_s: f64,
        phys: PortPhys,
        peak: TimePeak,
    ) {
        let jitter = if phys.jitter_sigma_s > 0.0 {
            let normal = Normal::new(0.0, phys.jitter_sigma_s).expect("validated sigma");
            normal.sample(rng)
        } else {
            0.0
        };
        let time_s = t_emit_s + link_delay_s + arm.delay_s(arm_imbalance_s) + jitter;
        self.by_port
            .get_mut(&phys.port)
            .expect("sink knows every instrumented port")
            .push(TimeTag { time_s, kind: TagKind::Photon(peak) });
    }

    fn finish(mut self, chunk: &ChunkSpec) -> TagStreams {
        let end = chunk.end_s();
        for tags in self.by_port.values_mut() {
            tags.retain(|t| t.time_s >= chunk.t_start_s && t.time_s <= end);
            tags.sort_unstable_by(|a, b| a.time_s.partial_cmp(&b.time_s).expect("finite times"));
        }
        TagStreams { duration_s: chunk.duration_s, by_port: self.by_port }
    }
}

fn check_tag_budget(cfg: &ScenarioConfig, duration_s: f64) -> Result<()> {
    let mut expected = 0.0;
    for port in cfg.instrumented_ports() {
        expected += expected_singles_rate(cfg, port)? * duration_s;
    }
    if expected > cfg.max_expected_tags as f64 {
        return Err(FransonError::ResourceLimit { expected, cap: cfg.max_expected_tags });
    }
    Ok(())
}

fn add_dark_streams(cfg: &ScenarioConfig, chunk: &ChunkSpec, sink: &mut TagSink) {
    for (idx, port) in cfg.instrumented_ports().into_iter().enumerate() {
        let rate = cfg.detectors[&port].dark_rate_hz;
        if rate <= 0.0 {
            continue;
        }
        let mut rng = stream_rng(cfg, chunk, 1 + idx as u32);
        let darks = generate_dark_counts(rate, chunk.t_start_s, chunk.duration_s, &mut rng);
        sink.by_port.get_mut(&port).expect("instrumented port").extend(darks);
    }
}

/// Pair class drawn for one emission.
enum PairClass {
    Split,
    UnsplitA,
    UnsplitB,
}

/// Generate the tag streams for one chunk with the thinned pair process.
pub fn run_scenario(cfg: &ScenarioConfig, chunk: &ChunkSpec) -> Result<TagStreams> {
    cfg.validate()?;
    check_tag_budget(cfg, chunk.duration_s)?;
    let pipeline = Pipeline::build(cfg)?;
    let ports = cfg.instrumented_ports();
    let mut sink = TagSink::new(&ports);

    let candidate_rate = cfg.source.pair_rate_hz * pipeline.q_total;
    if candidate_rate > 0.0 && chunk.duration_s > 0.0 {
        let mut rng = stream_rng(cfg, chunk, 0);
        let gaps = Exp::new(candidate_rate).expect("positive rate");
        let end = chunk.end_s();
        let mut t = chunk.t_start_s + gaps.sample(&mut rng);
        while t < end {
            process_candidate(&pipeline, t, &mut rng, &mut sink)?;
            t += gaps.sample(&mut rng);
        }
    }

    add_dark_streams(cfg, chunk, &mut sink);
    Ok(sink.finish(chunk))
}

fn process_candidate<R: Rng + ?Sized>(
    pipeline: &Pipeline,
    t: f64,
    rng: &mut R,
    sink: &mut TagSink,
) -> Result<()> {
    let u_class = rng.random::<f64>() * pipeline.q_total;
    let (class, bound) = if u_class < pipeline.w_split {
        (PairClass::Split, pipeline.q_split)
    } else if u_class < pipeline.w_split + pipeline.w_unsplit_a {
        (PairClass::UnsplitA, pipeline.q_unsplit_a)
    } else {
        (PairClass::UnsplitB, pipeline.q_unsplit_b)
    };

    match class {
        PairClass::Split => {
            let out = pipeline.sample_split_outcome(t, rng)?;
            let phys_a = pipeline.side_a.phys(out.port_a);
            let (p_b, phys_b, dt_b) = pipeline.b_endpoint(&out);
            let p_a = phys_a.survival;
            // One draw classifies the detection pattern; mass above the
            // three detected patterns (but below the bound) is rejection.
            let u = rng.random::<f64>() * bound;
            let a_only = p_a * (1.0 - p_b);
            let b_only = (1.0 - p_a) * p_b;
            let both = p_a * p_b;
            let (det_a, det_b) = if u < a_only {
                (true, false)
            } else if u < a_only + b_only {
                (false, true)
            } else if u < a_only + b_only + both {
                (true, true)
            } else {
                (false, false)
            };
            if det_a {
                sink.push(
                    rng,
                    t,
                    pipeline.delay_a_s,
                    out.arm_a,
                    pipeline.side_a.arm_imbalance_s,
                    phys_a,
                    out.peak,
                );
            }
            if det_b {
                sink.push(rng, t, pipeline.delay_b_s, out.arm_b, dt_b, phys_b, out.peak);
            }
        }
        PairClass::UnsplitA | PairClass::UnsplitB => {
            let side_b = matches!(class, PairClass::UnsplitB);
            let sample = |rng: &mut R, pl: &Pipeline| {
                if side_b {
                    pl.sample_b_unsplit_endpoint(rng)
                } else {
                    pl.sample_a_unsplit_endpoint(rng)
                }
            };
            let (p_1, phys_1, dt_1, arm_1) = sample(rng, pipeline);
            let (p_2, phys_2, dt_2, arm_2) = sample(rng, pipeline);
            let peak = peak_of_arms(arm_1, arm_2);
            let delay = if side_b { pipeline.delay_b_s } else { pipeline.delay_a_s };
            let u = rng.random::<f64>() * bound;
            let first_only = p_1 * (1.0 - p_2);
            let second_only = (1.0 - p_1) * p_2;
            let both = p_1 * p_2;
            let (det_1, det_2) = if u < first_only {
                (true, false)
            } else if u < first_only + second_only {
                (false, true)
            } else if u < first_only + second_only + both {
                (true, true)
            } else {
                (false, false)
            };
            if det_1 {
                sink.push(rng, t, delay, arm_1, dt_1, phys_1, peak);
            }
            if det_2 {
                sink.push(rng, t, delay, arm_2, dt_2, phys_2, peak);
            }
        }
    }
    Ok(())
}

/// Generate the tag streams for one chunk by materializing every pair
/// emission and walking each photon through the apparatus. Statistically
/// identical to [`run_scenario`]; kept as a slow cross-check.
pub fn run_scenario_reference(cfg: &ScenarioConfig, chunk: &ChunkSpec) -> Result<TagStreams> {
    cfg.validate()?;
    check_tag_budget(cfg, chunk.duration_s)?;
    let pipeline = Pipeline::build(cfg)?;
    let ports = cfg.instrumented_ports();
    let mut sink = TagSink::new(&ports);
    let mut rng = stream_rng(cfg, chunk, 0);

    let emissions =
        generate_pair_emissions(cfg.source.pair_rate_hz, chunk.t_start_s, chunk.duration_s, &mut rng);
    for t in emissions {
        let u_class = rng.random::<f64>();
        if u_class < pipeline.split_fraction {
            let out = pipeline.sample_split_outcome(t, &mut rng)?;
            let phys_a = pipeline.side_a.phys(out.port_a);
            let (p_b, phys_b, dt_b) = pipeline.b_endpoint(&out);
            let det_a = rng.random::<f64>() < phys_a.survival;
            let det_b = rng.random::<f64>() < p_b;
            if det_a {
                sink.push(
                    &mut rng,
                    t,
                    pipeline.delay_a_s,
                    out.arm_a,
                    pipeline.side_a.arm_imbalance_s,
                    phys_a,
                    out.peak,
                );
            }
            if det_b {
                sink.push(&mut rng, t, pipeline.delay_b_s, out.arm_b, dt_b, phys_b, out.peak);
            }
        } else {
            let side_b = u_class >= pipeline.split_fraction + 0.5 * (1.0 - pipeline.split_fraction);
            let mut endpoints = Vec::with_capacity(2);
            for _ in 0..2 {
                endpoints.push(if side_b {
                    pipeline.sample_b_unsplit_endpoint(&mut rng)
                } else {
                    pipeline.sample_a_unsplit_endpoint(&mut rng)
                });
            }
            let peak = peak_of_arms(endpoints[0].3, endpoints[1].3);
            let delay = if side_b { pipeline.delay_b_s } else { pipeline.delay_a_s };
            for (p, phys, dt, arm) in endpoints {
                if rng.random::<f64>() < p {
                    sink.push(&mut rng, t, delay, arm, dt, phys, peak);
                }
            }
        }
    }

    add_dark_streams(cfg, chunk, &mut sink);
    Ok(sink.finish(chunk))
}

// ---------------------------------------------------------------------------
// Tag dumps
// ---------------------------------------------------------------------------

/// Write streams as a tag dump: a duration header comment, a column header,
/// then one row per tag in global time order with picosecond timestamps.
pub fn write_tags_csv<W: IoWrite>(streams: &TagStreams, mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| FransonError::io("<tag dump>", e);
    writeln!(w, "# duration_s={:?}", streams.duration_s).map_err(io_err)?;
    writeln!(w, "detector,time_ps,provenance").map_err(io_err)?;
    let mut rows: Vec<(i64, u8, u8)> = Vec::with_capacity(streams.total_tags());
    for (port, tags) in &streams.by_port {
        for tag in tags {
            rows.push(((tag.time_s * 1e12).round() as i64, port.code(), tag.kind.code()));
        }
    }
    rows.sort_unstable();
    for (time_ps, port_code, kind_code) in rows {
        let port = PortId::from_code(port_code).expect("codes from PortId");
        writeln!(w, "{port},{time_ps},{kind_code}").map_err(io_err)?;
    }
    Ok(())
}

/// Read a tag dump produced by [`write_tags_csv`]. Streams come back
/// quantized to the picosecond grid of the dump.
pub fn read_tags_csv<R: BufRead>(r: R) -> Result<TagStreams> {
    let mut duration_s: Option<f64> = None;
    let mut by_port: BTreeMap<PortId, Vec<TimeTag>> = BTreeMap::new();
    let mut saw_header = false;
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| FransonError::io("<tag dump>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(value) = rest.trim().strip_prefix("duration_s=") {
                duration_s = Some(value.trim().parse().map_err(|_| {
                    FransonError::Parse(format!("bad duration in tag dump header: {value}"))
                })?);
            }
            continue;
        }
        if !saw_header {
            if line != "detector,time_ps,provenance" {
                return Err(FransonError::Parse(format!(
                    "unexpected tag dump header on line {}: {line}",
                    lineno + 1
                )));
            }
            saw_header = true;
            continue;
        }
        let mut fields = line.split(',');
        let (Some(port), Some(time), Some(code), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(FransonError::Parse(format!(
                "tag dump line {} needs 3 fields: {line}",
                lineno + 1
            )));
        };
        let port: PortId = port.parse()?;
        let time_ps: i64 = time
            .parse()
            .map_err(|_| FransonError::Parse(format!("bad time_ps on line {}: {time}", lineno + 1)))?;
        let code: u8 = code
            .parse()
            .map_err(|_| FransonError::Parse(format!("bad provenance on line {}: {code}", lineno + 1)))?;
        let kind = TagKind::from_code(code)
            .ok_or_else(|| FransonError::Parse(format!("unknown provenance code {code}")))?;
        by_port
            .entry(port)
            .or_default()
            .push(TimeTag { time_s: time_ps as f64 * 1e-12, kind });
    }
    let duration_s = duration_s
        .ok_or_else(|| FransonError::Parse("tag dump is missing the duration_s header".into()))?;
    Ok(TagStreams { duration_s, by_port })
}

/// Write a tag dump to a file.
pub fn save_tags_csv(streams: &TagStreams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| FransonError::io(path.display().to_string(), e))?;
    write_tags_csv(streams, std::io::BufWriter::new(file))
}

/// Read a tag dump from a file.
pub fn load_tags_csv(path: &Path) -> Result<TagStreams> {
    let file = std::fs::File::open(path).map_err(|e| FransonError::io(path.display().to_string(), e))?;
    read_tags_csv(std::io::BufReader::new(file))
}
