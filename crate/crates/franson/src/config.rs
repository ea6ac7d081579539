//! Scenario description: source, links, analyzers, detectors, counting
//! parameters. Scenarios load from and save to TOML (`schema_version = 1`),
//! round-trip exactly, and are validated before any simulation runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::coincidence::window_capture_fraction;
use crate::error::FransonError;
use crate::Result;

/// Current scenario schema version. Loaders reject anything else.
pub const SCHEMA_VERSION: u32 = 1;

/// Default cap on the expected number of generated time tags per run.
pub const DEFAULT_MAX_EXPECTED_TAGS: u64 = 200_000_000;

// ---------------------------------------------------------------------------
// Ports
// ---------------------------------------------------------------------------

/// One instrumented analyzer output port. `A*`/`B*` are the two-channel
/// analyzers; `B1Plus`/`B2Plus` are the single-channel analyzers behind the
/// passive coupler in the two-analyzer topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PortId {
    APlus,
    AMinus,
    BPlus,
    BMinus,
    B1Plus,
    B2Plus,
}

impl PortId {
    pub const ALL: [PortId; 6] = [
        PortId::APlus,
        PortId::AMinus,
        PortId::BPlus,
        PortId::BMinus,
        PortId::B1Plus,
        PortId::B2Plus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PortId::APlus => "a_plus",
            PortId::AMinus => "a_minus",
            PortId::BPlus => "b_plus",
            PortId::BMinus => "b_minus",
            PortId::B1Plus => "b1_plus",
            PortId::B2Plus => "b2_plus",
        }
    }

    /// Stable small integer used in time-tag dumps.
    pub fn code(self) -> u8 {
        match self {
            PortId::APlus => 0,
            PortId::AMinus => 1,
            PortId::BPlus => 2,
            PortId::BMinus => 3,
            PortId::B1Plus => 4,
            PortId::B2Plus => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<PortId> {
        PortId::ALL.into_iter().find(|p| p.code() == code)
    }

    /// True for ports on the source's `a` output fiber.
    pub fn is_side_a(self) -> bool {
        matches!(self, PortId::APlus | PortId::AMinus)
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PortId {
    type Err = FransonError;

    fn from_str(s: &str) -> Result<Self> {
        PortId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| FransonError::Parse(format!("unknown port id `{s}`")))
    }
}

// Manual serde so PortId works as a map key in both TOML and JSON.
impl Serialize for PortId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for PortId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Component parameter blocks
// ---------------------------------------------------------------------------

/// Continuously pumped photon-pair source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    /// Mean pair emission rate in pairs/s (homogeneous Poisson process).
    pub pair_rate_hz: f64,
    /// Probability that a pair is separated into the two output fibers.
    /// The remainder sends both photons down one fiber (half each way).
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    /// Intrinsic interference visibility of the central peak, in [0, 1].
    #[serde(default = "default_visibility")]
    pub intrinsic_visibility: f64,
    /// Constant offset added to the phase sum in the central-peak law, rad.
    #[serde(default)]
    pub phase_sum_offset_rad: f64,
}

fn default_split_fraction() -> f64 {
    0.5
}

fn default_visibility() -> f64 {
    1.0
}

/// One fiber link from the source to an analyzer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberLink {
    pub length_km: f64,
    #[serde(default = "default_attenuation")]
    pub attenuation_db_per_km: f64,
    /// Group delay per kilometre of fiber.
    #[serde(default = "default_delay_per_km")]
    pub propagation_delay_s_per_km: f64,
}

fn default_attenuation() -> f64 {
    0.35
}

fn default_delay_per_km() -> f64 {
    4.9e-6
}

impl FiberLink {
    /// One-way survival probability through the link.
    pub fn survival(&self) -> f64 {
        10f64.powf(-self.attenuation_db_per_km * self.length_km / 10.0)
    }

    /// One-way propagation delay in seconds.
    pub fn delay_s(&self) -> f64 {
        self.propagation_delay_s_per_km * self.length_km
    }
}

/// Linear phase ramp applied to an analyzer: delta(t) = phase_rad + rate * t.
/// The intercept is the analyzer's own `phase_rad`, so a schedule evaluated
/// at t = 0 always equals the static setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub rate_rad_per_s: f64,
}

/// One unbalanced two-path analyzer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferometerParams {
    /// Static phase of the long arm relative to the short arm, rad.
    #[serde(default)]
    pub phase_rad: f64,
    /// Travel-time imbalance between the long and short arms. Must exceed
    /// the coincidence window so the three arrival peaks stay separable.
    #[serde(default = "default_arm_imbalance")]
    pub arm_imbalance_delay_s: f64,
    /// Excess insertion loss of the analyzer, dB.
    #[serde(default)]
    pub insertion_loss_db: f64,
    /// Optional linear phase ramp for continuous fringe scans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_schedule: Option<PhaseSchedule>,
}

fn default_arm_imbalance() -> f64 {
    1.2e-9
}

impl InterferometerParams {
    /// Survival probability through the analyzer's excess loss.
    pub fn survival(&self) -> f64 {
        10f64.powf(-self.insertion_loss_db / 10.0)
    }

    /// Phase in effect at time `t` (seconds from run start).
    pub fn phase_at(&self, t: f64) -> f64 {
        match self.phase_schedule {
            Some(s) => self.phase_rad + s.rate_rad_per_s * t,
            None => self.phase_rad,
        }
    }
}

/// One single-photon detector attached to an analyzer port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    /// End-to-end detection efficiency of this port, absorbing any loss not
    /// modeled elsewhere, in [0, 1].
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
    /// Dark count rate, Hz.
    #[serde(default)]
    pub dark_rate_hz: f64,
    /// Gaussian timing jitter applied to photon detections, seconds (sigma).
    #[serde(default = "default_jitter")]
    pub jitter_sigma_s: f64,
}

fn default_efficiency() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    100e-12
}

/// Coincidence counting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoincidenceParams {
    /// Full window width w; a pair matches when |difference| <= w/2.
    #[serde(default = "default_window")]
    pub window_s: f64,
    /// Offset of the far window used to measure accidentals. Must clear all
    /// three peaks: offset > arm imbalance + 3 windows.
    #[serde(default = "default_accidental_offset")]
    pub accidental_offset_s: f64,
    /// Dwell time per scan point, seconds.
    #[serde(default = "default_integration")]
    pub integration_time_s: f64,
}

fn default_window() -> f64 {
    550e-12
}

fn default_accidental_offset() -> f64 {
    5e-9
}

fn default_integration() -> f64 {
    30.0
}

impl Default for CoincidenceParams {
    fn default() -> Self {
        CoincidenceParams {
            window_s: default_window(),
            accidental_offset_s: default_accidental_offset(),
            integration_time_s: default_integration(),
        }
    }
}

/// Side-b receiving topology: one two-channel analyzer, or a passive 50/50
/// coupler feeding two single-channel analyzers whose `+` outputs are the
/// only instrumented ports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzerB {
    Single(InterferometerParams),
    Passive {
        /// Probability that a side-b photon is routed to analyzer b1.
        coupler_split: f64,
        b1: InterferometerParams,
        b2: InterferometerParams,
    },
}

impl AnalyzerB {
    pub fn is_passive(&self) -> bool {
        matches!(self, AnalyzerB::Passive { .. })
    }
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// Complete description of one experimental arrangement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Must equal [`SCHEMA_VERSION`].
    pub schema_version: u32,
    /// Master seed for the deterministic RNG streams.
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
    /// Cap on the expected tag count per run; runs error out above it.
    #[serde(default = "default_max_tags")]
    pub max_expected_tags: u64,
    pub source: SourceParams,
    pub link_a: FiberLink,
    pub link_b: FiberLink,
    pub analyzer_a: InterferometerParams,
    pub analyzer_b: AnalyzerB,
    /// One entry per instrumented port; validation requires an exact match
    /// with the topology's port set.
    pub detectors: BTreeMap<PortId, DetectorParams>,
    #[serde(default)]
    pub coincidence: CoincidenceParams,
}

fn default_seed() -> u64 {
    1
}

fn default_max_tags() -> u64 {
    DEFAULT_MAX_EXPECTED_TAGS
}

impl ScenarioConfig {
    /// Ports this topology instruments, in canonical order.
    pub fn instrumented_ports(&self) -> Vec<PortId> {
        match self.analyzer_b {
            AnalyzerB::Single(_) => vec![PortId::APlus, PortId::AMinus, PortId::BPlus, PortId::BMinus],
            AnalyzerB::Passive { .. } => {
                vec![PortId::APlus, PortId::AMinus, PortId::B1Plus, PortId::B2Plus]
            }
        }
    }

    /// Largest arm imbalance across all analyzers in the scenario.
    pub fn max_arm_imbalance_s(&self) -> f64 {
        let mut dt = self.analyzer_a.arm_imbalance_delay_s;
        match &self.analyzer_b {
            AnalyzerB::Single(b) => dt = dt.max(b.arm_imbalance_delay_s),
            AnalyzerB::Passive { b1, b2, .. } => {
                dt = dt.max(b1.arm_imbalance_delay_s).max(b2.arm_imbalance_delay_s)
            }
        }
        dt
    }

    /// Check every invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FransonError::validation(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.max_expected_tags == 0 {
            return Err(FransonError::validation("max_expected_tags", "must be positive"));
        }

        let s = &self.source;
        require_finite("source.pair_rate_hz", s.pair_rate_hz)?;
        if s.pair_rate_hz <= 0.0 {
            return Err(FransonError::validation("source.pair_rate_hz", "must be positive"));
        }
        require_range("source.split_fraction", s.split_fraction, 0.0, 1.0)?;
        require_range("source.intrinsic_visibility", s.intrinsic_visibility, 0.0, 1.0)?;
        require_finite("source.phase_sum_offset_rad", s.phase_sum_offset_rad)?;

        validate_link("link_a", &self.link_a)?;
        validate_link("link_b", &self.link_b)?;

        let w = self.coincidence.window_s;
        require_finite("coincidence.window_s", w)?;
        if w <= 0.0 {
            return Err(FransonError::validation("coincidence.window_s", "must be positive"));
        }
        require_finite("coincidence.integration_time_s", self.coincidence.integration_time_s)?;
        if self.coincidence.integration_time_s <= 0.0 {
            return Err(FransonError::validation(
                "coincidence.integration_time_s",
                "must be positive",
            ));
        }

        validate_interferometer("analyzer_a", &self.analyzer_a, w)?;
        match &self.analyzer_b {
            AnalyzerB::Single(b) => validate_interferometer("analyzer_b.single", b, w)?,
            AnalyzerB::Passive { coupler_split, b1, b2 } => {
                require_range("analyzer_b.passive.coupler_split", *coupler_split, 0.0, 1.0)?;
                validate_interferometer("analyzer_b.passive.b1", b1, w)?;
                validate_interferometer("analyzer_b.passive.b2", b2, w)?;
            }
        }

        // Pairs must be sparse on the arm-imbalance scale or the three
        // peaks blur into each other.
        let dt = self.max_arm_imbalance_s();
        if s.pair_rate_hz * dt > 0.05 {
            return Err(FransonError::validation(
                "source.pair_rate_hz",
                format!(
                    "pair_rate * arm imbalance = {:.3} must stay below 0.05 \
                     (mean pair spacing must dwarf the arm imbalance)",
                    s.pair_rate_hz * dt
                ),
            ));
        }

        let required_offset = dt + 3.0 * w;
        let off = self.coincidence.accidental_offset_s;
        require_finite("coincidence.accidental_offset_s", off)?;
        if off <= required_offset {
            return Err(FransonError::validation(
                "coincidence.accidental_offset_s",
                format!("must exceed arm imbalance + 3 windows = {required_offset:e} s, got {off:e} s"),
            ));
        }

        let expected: Vec<PortId> = self.instrumented_ports();
        for port in &expected {
            let det = self.detectors.get(port).ok_or_else(|| {
                FransonError::validation(
                    &format!("detectors.{port}"),
                    "missing detector for instrumented port",
                )
            })?;
            let field = |name: &str| format!("detectors.{port}.{name}");
            require_range(&field("efficiency"), det.efficiency, 0.0, 1.0)?;
            require_finite(&field("dark_rate_hz"), det.dark_rate_hz)?;
            if det.dark_rate_hz < 0.0 {
                return Err(FransonError::validation(&field("dark_rate_hz"), "must be >= 0"));
            }
            require_finite(&field("jitter_sigma_s"), det.jitter_sigma_s)?;
            if det.jitter_sigma_s < 0.0 {
                return Err(FransonError::validation(&field("jitter_sigma_s"), "must be >= 0"));
            }
        }
        for port in self.detectors.keys() {
            if !expected.contains(port) {
                return Err(FransonError::validation(
                    &format!("detectors.{port}"),
                    "port is not instrumented in this topology",
                ));
            }
        }
        Ok(())
    }
}

fn require_finite(field: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(FransonError::validation(field, "must be finite"));
    }
    Ok(())
}

fn require_range(field: &str, value: f64, lo: f64, hi: f64) -> Result<()> {
    require_finite(field, value)?;
    if !(lo..=hi).contains(&value) {
        return Err(FransonError::validation(
            field,
            format!("must lie in [{lo}, {hi}], got {value}"),
        ));
    }
    Ok(())
}

fn validate_link(prefix: &str, link: &FiberLink) -> Result<()> {
    let field = |name: &str| format!("{prefix}.{name}");
    require_finite(&field("length_km"), link.length_km)?;
    if link.length_km < 0.0 {
        return Err(FransonError::validation(&field("length_km"), "must be >= 0"));
    }
    require_finite(&field("attenuation_db_per_km"), link.attenuation_db_per_km)?;
    if link.attenuation_db_per_km < 0.0 {
        return Err(FransonError::validation(&field("attenuation_db_per_km"), "must be >= 0"));
    }
    require_finite(&field("propagation_delay_s_per_km"), link.propagation_delay_s_per_km)?;
    if link.propagation_delay_s_per_km < 0.0 {
        return Err(FransonError::validation(
            &field("propagation_delay_s_per_km"),
            "must be >= 0",
        ));
    }
    Ok(())
}

fn validate_interferometer(prefix: &str, ifo: &InterferometerParams, window_s: f64) -> Result<()> {
    let field = |name: &str| format!("{prefix}.{name}");
    require_finite(&field("phase_rad"), ifo.phase_rad)?;
    require_finite(&field("arm_imbalance_delay_s"), ifo.arm_imbalance_delay_s)?;
    if ifo.arm_imbalance_delay_s <= window_s {
        return Err(FransonError::validation(
            &field("arm_imbalance_delay_s"),
            format!(
                "arm imbalance {:.3e} s must exceed the coincidence window {window_s:.3e} s \
                 or the arrival peaks overlap",
                ifo.arm_imbalance_delay_s
            ),
        ));
    }
    require_finite(&field("insertion_loss_db"), ifo.insertion_loss_db)?;
    if ifo.insertion_loss_db < 0.0 {
        return Err(FransonError::validation(&field("insertion_loss_db"), "must be >= 0"));
    }
    if let Some(sch) = ifo.phase_schedule {
        require_finite(&field("phase_schedule.rate_rad_per_s"), sch.rate_rad_per_s)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Text round trip
// ---------------------------------------------------------------------------

/// Parse and validate a scenario document.
pub fn load_scenario(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| FransonError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a scenario from a file.
pub fn load_scenario_file(path: &Path) -> Result<ScenarioConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| FransonError::io(path.display().to_string(), e))?;
    load_scenario(&text)
}

/// Render a scenario back to its document form. `load_scenario` of the
/// result reproduces the input exactly (floats serialize shortest-exact).
pub fn render_scenario(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| FransonError::Parse(e.to_string()))
}

/// Write a scenario document to a file.
pub fn save_scenario_file(cfg: &ScenarioConfig, path: &Path) -> Result<()> {
    std::fs::write(path, render_scenario(cfg)?)
        .map_err(|e| FransonError::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

// Calibration targets for the bundled 10.9 km two-fiber reference scenario.
// Each detector sees 39.5 kHz of singles, 26 kHz of it dark counts; the
// per-pairing accidental estimate r^2 * w then fixes, through the raw/net
// visibility ratio, the counted true central-peak coincidence rate, and the
// two together pin pair rate and effective efficiencies.
const PRESET_SINGLES_HZ: f64 = 39_500.0;
const PRESET_DARK_HZ: f64 = 26_000.0;
const PRESET_RAW_VIS: f64 = 0.853;
const PRESET_NET_VIS: f64 = 0.955;
const PRESET_WINDOW_S: f64 = 550e-12;
const PRESET_OFFSET_S: f64 = 5e-9;
const PRESET_INTEGRATION_S: f64 = 30.0;
const PRESET_LEN_A_KM: f64 = 8.1;
const PRESET_LEN_B_KM: f64 = 9.3;
const PRESET_ARM_IMBALANCE_S: f64 = 1.2e-9;
const PRESET_JITTER_S: f64 = 100e-12;
const PRESET_INSERTION_DB: f64 = 3.0;
const PRESET_SPLIT: f64 = 0.5;
const PRESET_SEED: u64 = 1998;

// Two-analyzer variant: net visibility of that run, excess loss of the
// coupler path (coupler excess + extra connectors) folded into b1/b2, a
// longer dwell per point to offset the coupler's halved coincidence rate,
// and its own seed.
const PRESET_EXP2_NET_VIS: f64 = 0.965;
const PRESET_EXP2_EXTRA_LOSS_DB: f64 = 0.45;
const PRESET_EXP2_INTEGRATION_S: f64 = 60.0;
const PRESET_EXP2_SEED: u64 = 2008;

struct PresetSolution {
    pair_rate_hz: f64,
    eta_a: f64,
    eta_b: f64,
}

/// Solve pair rate and per-side efficiencies from the preset targets.
///
/// Constraints, per detector and per detector pairing:
///   singles:  dark + pair_rate * p_side / 2            = 39.5 kHz
///   central:  pair_rate * split * p_a * p_b * kappa / 8 = A * x / (1 - x)
/// with A = singles^2 * window (accidentals per pairing), x = V_raw / V_net,
/// kappa the fraction of true central pairs the window captures given the
/// two-detector jitter. Two equations in (pair_rate * p) and (pair_rate *
/// p^2) solve in closed form; p then factors into link loss, insertion
/// loss, and efficiency per side.
fn solve_preset() -> PresetSolution {
    let accidental_per_s = PRESET_SINGLES_HZ * PRESET_SINGLES_HZ * PRESET_WINDOW_S;
    let x = PRESET_RAW_VIS / PRESET_NET_VIS;
    let true_central_per_s = accidental_per_s * x / (1.0 - x);

    let kappa = window_capture_fraction(PRESET_WINDOW_S, PRESET_JITTER_S, PRESET_JITTER_S);
    let rate_times_p = 2.0 * (PRESET_SINGLES_HZ - PRESET_DARK_HZ);
    let rate_times_p2 = 8.0 * true_central_per_s / (PRESET_SPLIT * kappa);
    let p = rate_times_p2 / rate_times_p;
    let pair_rate_hz = rate_times_p / p;

    let insertion = 10f64.powf(-PRESET_INSERTION_DB / 10.0);
    let surv_a = 10f64.powf(-0.35 * PRESET_LEN_A_KM / 10.0);
    let surv_b = 10f64.powf(-0.35 * PRESET_LEN_B_KM / 10.0);
    PresetSolution {
        pair_rate_hz,
        eta_a: p / (surv_a * insertion),
        eta_b: p / (surv_b * insertion),
    }
}

fn preset_interferometer(phase_rad: f64, insertion_loss_db: f64) -> InterferometerParams {
    InterferometerParams {
        phase_rad,
        arm_imbalance_delay_s: PRESET_ARM_IMBALANCE_S,
        insertion_loss_db,
        phase_schedule: None,
    }
}

fn preset_detector(efficiency: f64) -> DetectorParams {
    DetectorParams {
        efficiency,
        dark_rate_hz: PRESET_DARK_HZ,
        jitter_sigma_s: PRESET_JITTER_S,
    }
}

/// Bundled reference scenario: two-channel analyzers at the ends of 8.1 km
/// and 9.3 km fibers, calibrated so each detector counts 39.5 kHz singles
/// (26 kHz dark) and the central-peak fringe shows 0.853 raw / 0.955 net
/// visibility at a 550 ps window.
pub fn calibrate_preset() -> ScenarioConfig {
    let sol = solve_preset();
    let mut detectors = BTreeMap::new();
    detectors.insert(PortId::APlus, preset_detector(sol.eta_a));
    detectors.insert(PortId::AMinus, preset_detector(sol.eta_a));
    detectors.insert(PortId::BPlus, preset_detector(sol.eta_b));
    detectors.insert(PortId::BMinus, preset_detector(sol.eta_b));
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        rng_seed: PRESET_SEED,
        max_expected_tags: DEFAULT_MAX_EXPECTED_TAGS,
        source: SourceParams {
            pair_rate_hz: sol.pair_rate_hz,
            split_fraction: PRESET_SPLIT,
            intrinsic_visibility: PRESET_NET_VIS,
            phase_sum_offset_rad: 0.0,
        },
        link_a: FiberLink {
            length_km: PRESET_LEN_A_KM,
            attenuation_db_per_km: default_attenuation(),
            propagation_delay_s_per_km: default_delay_per_km(),
        },
        link_b: FiberLink {
            length_km: PRESET_LEN_B_KM,
            attenuation_db_per_km: default_attenuation(),
            propagation_delay_s_per_km: default_delay_per_km(),
        },
        analyzer_a: preset_interferometer(0.0, PRESET_INSERTION_DB),
        analyzer_b: AnalyzerB::Single(preset_interferometer(0.0, PRESET_INSERTION_DB)),
        detectors,
        coincidence: CoincidenceParams {
            window_s: PRESET_WINDOW_S,
            accidental_offset_s: PRESET_OFFSET_S,
            integration_time_s: PRESET_INTEGRATION_S,
        },
    }
}

/// Two-analyzer variant of the reference scenario: side b feeds a passive
/// 50/50 coupler into two single-channel analyzers (fixed phases 0 and
/// pi/2), each with 0.45 dB extra insertion loss for the coupler path.
/// Points dwell 60 s instead of 30 s, roughly restoring the per-point
/// statistics the coupler's split and extra loss take away.
pub fn calibrate_preset_exp2() -> ScenarioConfig {
    let mut cfg = calibrate_preset();
    cfg.rng_seed = PRESET_EXP2_SEED;
    cfg.source.intrinsic_visibility = PRESET_EXP2_NET_VIS;
    cfg.coincidence.integration_time_s = PRESET_EXP2_INTEGRATION_S;
    let eta_b = cfg.detectors[&PortId::BPlus].efficiency;
    cfg.detectors.remove(&PortId::BPlus);
    cfg.detectors.remove(&PortId::BMinus);
    cfg.detectors.insert(PortId::B1Plus, preset_detector(eta_b));
    cfg.detectors.insert(PortId::B2Plus, preset_detector(eta_b));
    cfg.analyzer_b = AnalyzerB::Passive {
        coupler_split: 0.5,
        b1: preset_interferometer(0.0, PRESET_INSERTION_DB + PRESET_EXP2_EXTRA_LOSS_DB),
        b2: preset_interferometer(
            std::f64::consts::FRAC_PI_2,
            PRESET_INSERTION_DB + PRESET_EXP2_EXTRA_LOSS_DB,
        ),
    };
    cfg
}

/// Look a preset up by its command line name.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "geneva1998" => Ok(calibrate_preset()),
        "geneva1998-exp2" => Ok(calibrate_preset_exp2()),
        other => Err(FransonError::UnknownPreset(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn forward_singles(cfg: &ScenarioConfig, side_a: bool) -> f64 {
        // dark + pair_rate * p / 2 for a two-channel side (each emitted pair
        // sends one photon per side on average at split = 0.5).
        let (link, analyzer, det) = if side_a {
            (&cfg.link_a, &cfg.analyzer_a, &cfg.detectors[&PortId::APlus])
        } else {
            match &cfg.analyzer_b {
                AnalyzerB::Single(b) => (&cfg.link_b, b, &cfg.detectors[&PortId::BPlus]),
                _ => panic!("two-channel scenario expected"),
            }
        };
        let p = link.survival() * analyzer.survival() * det.efficiency;
        det.dark_rate_hz + cfg.source.pair_rate_hz * p / 2.0
    }

    #[test]
    fn preset_reproduces_singles_target() {
        let cfg = calibrate_preset();
        cfg.validate().unwrap();
        assert_abs_diff_eq!(forward_singles(&cfg, true), 39_500.0, epsilon = 1e-6);
        assert_abs_diff_eq!(forward_singles(&cfg, false), 39_500.0, epsilon = 1e-6);
    }

    #[test]
    fn preset_visibility_algebra_closes() {
        // Forward model from the solved constants must give back the raw
        // visibility: V_raw = V0 * C / (C + A) with C the counted true
        // central rate per pairing and A = singles^2 * window.
        let cfg = calibrate_preset();
        let p_a = cfg.link_a.survival()
            * cfg.analyzer_a.survival()
            * cfg.detectors[&PortId::APlus].efficiency;
        let b = match &cfg.analyzer_b {
            AnalyzerB::Single(b) => b,
            _ => unreachable!(),
        };
        let p_b = cfg.link_b.survival() * b.survival() * cfg.detectors[&PortId::BPlus].efficiency;
        let kappa = window_capture_fraction(cfg.coincidence.window_s, PRESET_JITTER_S, PRESET_JITTER_S);
        let c = cfg.source.pair_rate_hz * cfg.source.split_fraction * p_a * p_b * kappa / 8.0;
        let a = 39_500.0f64 * 39_500.0 * cfg.coincidence.window_s;

        // Counted true centrals per pairing: ~215 per 30 s.
        assert_abs_diff_eq!(c * 30.0, 215.3, epsilon = 0.5);
        let v_raw = cfg.source.intrinsic_visibility * c / (c + a);
        assert_abs_diff_eq!(v_raw, 0.853, epsilon = 1e-12);
    }

    #[test]
    fn exp2_preset_dilution_sits_inside_the_reproduction_band() {
        let cfg = calibrate_preset_exp2();
        cfg.validate().unwrap();
        let (split, b1) = match &cfg.analyzer_b {
            AnalyzerB::Passive { coupler_split, b1, .. } => (*coupler_split, b1),
            _ => unreachable!(),
        };
        let p_a = cfg.link_a.survival()
            * cfg.analyzer_a.survival()
            * cfg.detectors[&PortId::APlus].efficiency;
        let p_b1 = cfg.link_b.survival() * b1.survival() * cfg.detectors[&PortId::B1Plus].efficiency;
        let kappa = window_capture_fraction(cfg.coincidence.window_s, PRESET_JITTER_S, PRESET_JITTER_S);

        let singles_a = cfg.detectors[&PortId::APlus].dark_rate_hz + cfg.source.pair_rate_hz * p_a / 2.0;
        let singles_b1 =
            cfg.detectors[&PortId::B1Plus].dark_rate_hz + cfg.source.pair_rate_hz * p_b1 / 4.0;
        let c = cfg.source.pair_rate_hz * cfg.source.split_fraction * split * p_a * p_b1 * kappa / 8.0;
        let a = singles_a * singles_b1 * cfg.coincidence.window_s;
        let v_raw = cfg.source.intrinsic_visibility * c / (c + a);
        assert!(
            (0.778..=0.805).contains(&v_raw),
            "analytic raw visibility {v_raw} outside design band"
        );
    }

    #[test]
    fn preset_round_trips_through_text() {
        for cfg in [calibrate_preset(), calibrate_preset_exp2()] {
            let text = render_scenario(&cfg).unwrap();
            let back = load_scenario(&text).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn preset_lookup_matches_cli_names() {
        assert!(preset("geneva1998").is_ok());
        assert!(preset("geneva1998-exp2").is_ok());
        assert!(matches!(preset("geneva"), Err(FransonError::UnknownPreset(_))));
    }

    #[test]
    fn accidental_offset_must_clear_the_satellite_peaks() {
        // dT = 1.2 ns and w = 550 ps require offset > 2.85 ns.
        let mut cfg = calibrate_preset();
        cfg.coincidence.accidental_offset_s = 2e-9;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, FransonError::Validation { ref field, .. }
            if field == "coincidence.accidental_offset_s"));
        cfg.coincidence.accidental_offset_s = 3e-9;
        cfg.validate().unwrap();
    }

    #[test]
    fn each_invariant_violation_names_its_field() {
        let cases: Vec<(&str, Box<dyn Fn(&mut ScenarioConfig)>)> = vec![
            ("schema_version", Box::new(|c| c.schema_version = 2)),
            ("source.pair_rate_hz", Box::new(|c| c.source.pair_rate_hz = 0.0)),
            ("source.split_fraction", Box::new(|c| c.source.split_fraction = 1.5)),
            ("source.intrinsic_visibility", Box::new(|c| c.source.intrinsic_visibility = -0.1)),
            ("link_a.length_km", Box::new(|c| c.link_a.length_km = -1.0)),
            ("link_b.attenuation_db_per_km", Box::new(|c| c.link_b.attenuation_db_per_km = f64::NAN)),
            ("analyzer_a.arm_imbalance_delay_s", Box::new(|c| c.analyzer_a.arm_imbalance_delay_s = 400e-12)),
            ("coincidence.window_s", Box::new(|c| c.coincidence.window_s = 0.0)),
            ("coincidence.integration_time_s", Box::new(|c| c.coincidence.integration_time_s = -3.0)),
            ("detectors.a_plus.efficiency", Box::new(|c| {
                c.detectors.get_mut(&PortId::APlus).unwrap().efficiency = 1.2;
            })),
            ("detectors.b_plus.dark_rate_hz", Box::new(|c| {
                c.detectors.get_mut(&PortId::BPlus).unwrap().dark_rate_hz = -5.0;
            })),
            ("detectors.b_minus", Box::new(|c| {
                c.detectors.remove(&PortId::BMinus);
            })),
            ("detectors.b1_plus", Box::new(|c| {
                c.detectors.insert(PortId::B1Plus, preset_detector(0.1));
            })),
        ];
        for (field, mutate) in cases {
            let mut cfg = calibrate_preset();
            mutate(&mut cfg);
            match cfg.validate() {
                Err(FransonError::Validation { field: f, .. }) => {
                    assert_eq!(f, field, "wrong field reported");
                }
                other => panic!("expected validation error on {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn pair_rate_times_arm_imbalance_is_bounded() {
        let mut cfg = calibrate_preset();
        cfg.source.pair_rate_hz = 1e9;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, FransonError::Validation { ref field, .. }
            if field == "source.pair_rate_hz"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut text = render_scenario(&calibrate_preset()).unwrap();
        text.push_str("\nunknown_knob = 3\n");
        assert!(matches!(load_scenario(&text), Err(FransonError::Parse(_))));
    }

    #[test]
    fn defaults_fill_unspecified_fields() {
        let text = r#"
schema_version = 1

[source]
pair_rate_hz = 100000.0

[link_a]
length_km = 1.0

[link_b]
length_km = 2.0

[analyzer_a]

[analyzer_b.single]

[detectors.a_plus]
[detectors.a_minus]
[detectors.b_plus]
[detectors.b_minus]
"#;
        let cfg = load_scenario(text).unwrap();
        assert_eq!(cfg.rng_seed, 1);
        assert_eq!(cfg.source.split_fraction, 0.5);
        assert_eq!(cfg.link_a.attenuation_db_per_km, 0.35);
        assert_eq!(cfg.analyzer_a.arm_imbalance_delay_s, 1.2e-9);
        assert_eq!(cfg.coincidence.window_s, 550e-12);
        assert_eq!(cfg.coincidence.integration_time_s, 30.0);
        assert_eq!(cfg.detectors[&PortId::APlus].jitter_sigma_s, 100e-12);
        assert_eq!(cfg.max_expected_tags, DEFAULT_MAX_EXPECTED_TAGS);
    }

    prop_compose! {
        fn arb_scenario()(
            rate in 1e3f64..1e6,
            split in 0.0f64..=1.0,
            vis in 0.0f64..=1.0,
            phi in -3.0f64..3.0,
            len_a in 0.1f64..20.0,
            len_b in 0.1f64..20.0,
            phase_a in -3.0f64..3.0,
            phase_b in -3.0f64..3.0,
            il in 0.0f64..6.0,
            eta in 0.001f64..1.0,
            dark in 0.0f64..1e5,
            jitter in 0.0f64..200e-12,
            seed in proptest::num::u64::ANY,
            schedule_rate in proptest::option::of(-2.0f64..2.0),
        ) -> ScenarioConfig {
            let ifo = |phase: f64| InterferometerParams {
                phase_rad: phase,
                arm_imbalance_delay_s: 1.2e-9,
                insertion_loss_db: il,
                phase_schedule: schedule_rate.map(|r| PhaseSchedule { rate_rad_per_s: r }),
            };
            let det = DetectorParams { efficiency: eta, dark_rate_hz: dark, jitter_sigma_s: jitter };
            let mut detectors = BTreeMap::new();
            for port in [PortId::APlus, PortId::AMinus, PortId::BPlus, PortId::BMinus] {
                detectors.insert(port, det);
            }
            ScenarioConfig {
                schema_version: SCHEMA_VERSION,
                rng_seed: seed,
                max_expected_tags: DEFAULT_MAX_EXPECTED_TAGS,
                source: SourceParams {
                    pair_rate_hz: rate,
                    split_fraction: split,
                    intrinsic_visibility: vis,
                    phase_sum_offset_rad: phi,
                },
                link_a: FiberLink { length_km: len_a, ..calibrate_preset().link_a },
                link_b: FiberLink { length_km: len_b, ..calibrate_preset().link_b },
                analyzer_a: ifo(phase_a),
                analyzer_b: AnalyzerB::Single(ifo(phase_b)),
                detectors,
                coincidence: CoincidenceParams::default(),
            }
        }
    }

    proptest! {
        #[test]
        fn scenario_text_round_trip_is_exact(cfg in arb_scenario()) {
            prop_assume!(cfg.validate().is_ok());
            let text = render_scenario(&cfg).unwrap();
            let back = load_scenario(&text).unwrap();
            prop_assert_eq!(cfg, back);
        }
    }
}
