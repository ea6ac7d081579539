//! Command-line front end for the interferometric correlation simulator.
//!
//! Three subcommands cover the workflow: `run` simulates a full phase scan
//! and writes report files, `analyze` reduces a previously dumped time-tag
//! file to coincidence statistics, and `predict` prints the analytic
//! expectations for a scenario without simulating anything.
//!
//! Exit codes: 0 on success, 2 for configuration or input problems (bad
//! TOML, out-of-range parameters, unknown presets, malformed tag dumps,
//! unusable scan plans), 3 for filesystem errors, 1 for any other failure
//! (for example a statistically degenerate acquisition).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use franson::bell::{
    correlation, net_correlation, qber, reconstruct_e_symmetric, reconstruct_net_e_symmetric,
    subtract_accidentals, Correlation,
};
use franson::coincidence::{
    calibrate_link_delay, count_coincidences, count_quad, estimate_accidentals_analytic,
    measure_accidentals, merged_sides, window_capture_fraction, QuadKind, RateQuad,
};
use franson::config::{load_scenario_file, preset, AnalyzerB, PortId, ScenarioConfig};
use franson::engine::{
    expected_central_rate_hz, expected_singles_rate, load_tags_csv, run_scenario, save_tags_csv,
    ChunkSpec, TagStreams,
};
use franson::runner::{
    default_plan, emit_report, run_experiment, ReportFormat, ScanPlan,
};
use franson::FransonError;

#[derive(Parser)]
#[command(
    name = "franson",
    version,
    about = "Monte Carlo simulator for fiber-based energy-time correlation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phase scan and write report files.
    Run(RunArgs),
    /// Reduce a time-tag dump to coincidence statistics.
    Analyze(AnalyzeArgs),
    /// Print analytic expectations for a scenario without simulating.
    Predict(PredictArgs),
}

/// Where the scenario comes from: a TOML file or a built-in preset.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct ScenarioSource {
    /// Path to a scenario TOML file.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    /// Name of a built-in scenario preset.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

impl ScenarioSource {
    fn load(&self) -> Result<ScenarioConfig, FransonError> {
        match (&self.scenario, &self.preset) {
            (Some(path), None) => load_scenario_file(path),
            (None, Some(name)) => preset(name),
            _ => unreachable!("clap enforces exactly one source"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Override the scenario's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the per-point integration time, seconds.
    #[arg(long, value_name = "SECONDS")]
    integration: Option<f64>,
    /// Override the number of scan points.
    #[arg(long, value_name = "N")]
    points: Option<usize>,
    /// Directory for report files.
    #[arg(long, value_name = "DIR", default_value = "franson-out")]
    out: PathBuf,
    /// Report formats to write.
    #[arg(long, value_delimiter = ',', default_values = ["json", "csv"])]
    format: Vec<String>,
    /// Also dump the time tags of one acquisition at the scenario's base
    /// phases (full integration time) to this CSV file.
    #[arg(long, value_name = "FILE")]
    dump_tags: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Time-tag dump produced by `run --dump-tags`.
    #[arg(long, value_name = "FILE")]
    tags: PathBuf,
    #[command(flatten)]
    source: ScenarioSource,
    /// Also write the analysis as JSON to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    source: ScenarioSource,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &FransonError) -> u8 {
    match err {
        FransonError::Io { .. } => 3,
        FransonError::Validation { .. }
        | FransonError::Parse(_)
        | FransonError::UnknownPreset(_)
        | FransonError::Plan(_)
        | FransonError::Topology(_)
        | FransonError::Domain(_)
        | FransonError::OffsetTooSmall { .. }
        | FransonError::UnsortedStream { .. }
        | FransonError::InsufficientSpan(_)
        | FransonError::SingularDesign(_)
        | FransonError::PhaseRatio { .. }
        | FransonError::ResourceLimit { .. } => 2,
        _ => 1,
    }
}

fn parse_formats(names: &[String]) -> Result<Vec<ReportFormat>, FransonError> {
    let mut formats = Vec::new();
    for name in names {
        let format = match name.as_str() {
            "json" => ReportFormat::Json,
            "csv" => ReportFormat::Csv,
            other => {
                return Err(FransonError::Parse(format!(
                    "unknown report format `{other}` (expected json or csv)"
                )))
            }
        };
        if !formats.contains(&format) {
            formats.push(format);
        }
    }
    Ok(formats)
}

fn cmd_run(args: RunArgs) -> Result<(), FransonError> {
    let mut cfg = args.source.load()?;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    if let Some(integration) = args.integration {
        cfg.coincidence.integration_time_s = integration;
    }
    cfg.validate()?;
    let formats = parse_formats(&args.format)?;

    let plan = match args.points {
        Some(n) => match cfg.analyzer_b {
            AnalyzerB::Single(_) => ScanPlan::fringe_scan_two_channel(n),
            AnalyzerB::Passive { .. } => ScanPlan::fringe_scan_passive_pair(n),
        },
        None => default_plan(&cfg),
    };

    if let Some(path) = &args.dump_tags {
        let chunk = ChunkSpec::single(cfg.coincidence.integration_time_s);
        let streams = run_scenario(&cfg, &chunk)?;
        save_tags_csv(&streams, path)?;
        println!("wrote {} tags to {}", streams.total_tags(), path.display());
    }

    let report = run_experiment(&cfg, &plan)?;
    print_report_summary(&report);
    let written = emit_report(&report, &args.out, &formats)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_report_summary(report: &franson::runner::ExperimentReport) {
    use franson::runner::ExperimentReport;
    match report {
        ExperimentReport::TwoChannel(r) => {
            println!("two-channel scan: {} points", r.points.len());
            println!("  link shift      {:.4} us", r.link_shift_s * 1e6);
            println!(
                "  visibility      raw {:.4} +/- {:.4}, net {:.4} +/- {:.4}",
                r.fringe_raw.visibility,
                r.fringe_raw.sigma_visibility,
                r.fringe_net.visibility,
                r.fringe_net.sigma_visibility
            );
            println!("  qber            raw {:.4}, net {:.4}", r.qber_raw, r.qber_net);
            println!(
                "  S four-setting  raw {:.4} +/- {:.4}, net {:.4} +/- {:.4}",
                r.bell_four_setting_raw.s,
                r.bell_four_setting_raw.sigma_s,
                r.bell_four_setting_net.s,
                r.bell_four_setting_net.sigma_s
            );
            println!(
                "  S reduced       raw {:.4} +/- {:.4}, net {:.4} +/- {:.4}",
                r.bell_reduced_raw.s,
                r.bell_reduced_raw.sigma_s,
                r.bell_reduced_net.s,
                r.bell_reduced_net.sigma_s
            );
            println!(
                "  violation       net four-setting {:.1} sigma above the local bound",
                r.bell_four_setting_net.n_sigma_violation
            );
            println!("  no-signaling    chi2 p = {:.4}", r.no_signaling.p_value);
        }
        ExperimentReport::PassivePair(r) => {
            println!("passive-pair scan: {} points", r.points.len());
            println!("  link shift      {:.4} us", r.link_shift_s * 1e6);
            println!(
                "  visibility b1   raw {:.4} +/- {:.4}, net {:.4} +/- {:.4}",
                r.fringe_raw_b1.visibility,
                r.fringe_raw_b1.sigma_visibility,
                r.fringe_net_b1.visibility,
                r.fringe_net_b1.sigma_visibility
            );
            println!(
                "  visibility b2   raw {:.4} +/- {:.4}, net {:.4} +/- {:.4}",
                r.fringe_raw_b2.visibility,
                r.fringe_raw_b2.sigma_visibility,
                r.fringe_net_b2.visibility,
                r.fringe_net_b2.sigma_visibility
            );
            println!(
                "  S shared        raw {:.4} +/- {:.4}, net {:.4} +/- {:.4}",
                r.bell_four_setting_raw.s,
                r.bell_four_setting_raw.sigma_s,
                r.bell_four_setting_net.s,
                r.bell_four_setting_net.sigma_s
            );
            println!(
                "  violation       net {:.1} sigma above the local bound",
                r.bell_four_setting_net.n_sigma_violation
            );
            println!("  no-signaling    chi2 p = {:.4}", r.no_signaling.p_value);
        }
    }
}

/// Reduction of one tag dump, in report form.
#[derive(Serialize)]
#[serde(tag = "topology", rename_all = "snake_case")]
enum TagAnalysis {
    TwoChannel {
        duration_s: f64,
        link_shift_s: f64,
        singles_counts: BTreeMap<PortId, u64>,
        raw: RateQuad,
        accidental: RateQuad,
        net: RateQuad,
        e_raw: Correlation,
        e_net: Correlation,
    },
    PassivePair {
        duration_s: f64,
        link_shift_s: f64,
        singles_counts: BTreeMap<PortId, u64>,
        curves: Vec<CurveAnalysis>,
    },
}

#[derive(Serialize)]
struct CurveAnalysis {
    analyzer_port: PortId,
    n_raw: [f64; 2],
    n_accidental: [f64; 2],
    n_net: [f64; 2],
    e_raw: Correlation,
    e_net: Correlation,
}

fn analyze_tags(cfg: &ScenarioConfig, streams: &TagStreams) -> Result<TagAnalysis, FransonError> {
    let (a, b) = merged_sides(streams);
    let nominal = cfg.link_a.delay_s() - cfg.link_b.delay_s();
    let link_shift_s = calibrate_link_delay(&a, &b, nominal.abs() * 1.5 + 1e-6)?;
    let window = cfg.coincidence.window_s;
    let offset = cfg.coincidence.accidental_offset_s;
    let dt_max = cfg.max_arm_imbalance_s();
    let singles_counts: BTreeMap<PortId, u64> =
        streams.by_port.iter().map(|(&p, tags)| (p, tags.len() as u64)).collect();

    match &cfg.analyzer_b {
        AnalyzerB::Single(_) => {
            let raw = count_quad(streams, link_shift_s, 0.0, window, QuadKind::Raw)?;
            let accidental = measure_accidentals(streams, link_shift_s, window, offset, dt_max)?;
            let net = subtract_accidentals(&raw, &accidental)?;
            let e_raw = correlation(&raw)?;
            let e_net = net_correlation(&raw, &accidental)?;
            Ok(TagAnalysis::TwoChannel {
                duration_s: streams.duration_s,
                link_shift_s,
                singles_counts,
                raw,
                accidental,
                net,
                e_raw,
                e_net,
            })
        }
        AnalyzerB::Passive { .. } => {
            let required = dt_max + 3.0 * window;
            if offset.abs() <= required {
                return Err(FransonError::OffsetTooSmall {
                    offset_s: offset,
                    required_s: required,
                });
            }
            let mut curves = Vec::new();
            for b_port in [PortId::B1Plus, PortId::B2Plus] {
                let mut n_raw = [0.0f64; 2];
                let mut n_accidental = [0.0f64; 2];
                let mut n_net = [0.0f64; 2];
                for (slot, a_port) in [(0usize, PortId::APlus), (1, PortId::AMinus)] {
                    let raw = count_coincidences(
                        streams.port(a_port),
                        streams.port(b_port),
                        link_shift_s,
                        window,
                    )? as f64;
                    let acc = count_coincidences(
                        streams.port(a_port),
                        streams.port(b_port),
                        link_shift_s + offset,
                        window,
                    )? as f64;
                    n_raw[slot] = raw;
                    n_accidental[slot] = acc;
                    n_net[slot] = raw - acc;
                }
                curves.push(CurveAnalysis {
                    analyzer_port: b_port,
                    n_raw,
                    n_accidental,
                    n_net,
                    e_raw: reconstruct_e_symmetric(n_raw[0], n_raw[1])?,
                    e_net: reconstruct_net_e_symmetric(
                        n_raw[0],
                        n_raw[1],
                        n_accidental[0],
                        n_accidental[1],
                    )?,
                });
            }
            Ok(TagAnalysis::PassivePair {
                duration_s: streams.duration_s,
                link_shift_s,
                singles_counts,
                curves,
            })
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), FransonError> {
    let cfg = args.source.load()?;
    cfg.validate()?;
    let streams = load_tags_csv(&args.tags)?;
    let analysis = analyze_tags(&cfg, &streams)?;

    match &analysis {
        TagAnalysis::TwoChannel {
            duration_s,
            link_shift_s,
            singles_counts,
            raw,
            accidental,
            e_raw,
            e_net,
            ..
        } => {
            println!("two-channel dump: {duration_s} s");
            println!("  link shift   {:.4} us", link_shift_s * 1e6);
            for (port, n) in singles_counts {
                println!("  singles      {port}: {n} ({:.1}/s)", *n as f64 / duration_s);
            }
            println!("  raw quad     {:?} ({:.1} total)", raw.counts, raw.total());
            println!(
                "  accidentals  {:.1} total measured, {:.1} expected per pairing",
                accidental.total(),
                expected_accidentals_per_pairing(&cfg, singles_counts, *duration_s)
            );
            println!("  E raw        {:.4} +/- {:.4}", e_raw.e, e_raw.sigma_e);
            println!("  E net        {:.4} +/- {:.4}", e_net.e, e_net.sigma_e);
        }
        TagAnalysis::PassivePair { duration_s, link_shift_s, singles_counts, curves } => {
            println!("passive-pair dump: {duration_s} s");
            println!("  link shift   {:.4} us", link_shift_s * 1e6);
            for (port, n) in singles_counts {
                println!("  singles      {port}: {n} ({:.1}/s)", *n as f64 / duration_s);
            }
            for curve in curves {
                println!(
                    "  {}: raw {:?}, net {:?}, E raw {:.4} +/- {:.4}, E net {:.4} +/- {:.4}",
                    curve.analyzer_port,
                    curve.n_raw,
                    curve.n_net,
                    curve.e_raw.e,
                    curve.e_raw.sigma_e,
                    curve.e_net.e,
                    curve.e_net.sigma_e
                );
            }
        }
    }

    if let Some(path) = &args.out {
        let body = serde_json::to_string_pretty(&analysis)
            .map_err(|e| FransonError::Parse(format!("analysis serialization failed: {e}")))?;
        write_text(path, &body)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Mean analytic accidental count per pairing over the dump, from the
/// measured singles rates.
fn expected_accidentals_per_pairing(
    cfg: &ScenarioConfig,
    singles: &BTreeMap<PortId, u64>,
    duration_s: f64,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for (_, &na) in singles.iter().filter(|(p, _)| p.is_side_a()) {
        for (_, &nb) in singles.iter().filter(|(p, _)| !p.is_side_a()) {
            sum += estimate_accidentals_analytic(
                na as f64 / duration_s,
                nb as f64 / duration_s,
                cfg.coincidence.window_s,
                duration_s,
            );
            n += 1.0;
        }
    }
    if n > 0.0 {
        sum / n
    } else {
        0.0
    }
}

fn write_text(path: &Path, body: &str) -> Result<(), FransonError> {
    std::fs::write(path, body).map_err(|e| FransonError::io(path.display().to_string(), e))
}

fn cmd_predict(args: PredictArgs) -> Result<(), FransonError> {
    let cfg = args.source.load()?;
    cfg.validate()?;
    let ports = cfg.instrumented_ports();

    println!("analytic expectations");
    println!("  pair rate        {:.4e} pairs/s", cfg.source.pair_rate_hz);
    for &port in &ports {
        println!("  singles {:<9} {:.1}/s", port.as_str(), expected_singles_rate(&cfg, port)?);
    }

    let pairings: Vec<(PortId, PortId)> = ports
        .iter()
        .filter(|p| p.is_side_a())
        .flat_map(|&pa| ports.iter().filter(|p| !p.is_side_a()).map(move |&pb| (pa, pb)))
        .collect();

    let window = cfg.coincidence.window_s;
    let duration = cfg.coincidence.integration_time_s;
    let mut mean_ratio = 0.0;
    for &(pa, pb) in &pairings {
        let central_hz = expected_central_rate_hz(&cfg, pa, pb)?;
        let accidental_hz = estimate_accidentals_analytic(
            expected_singles_rate(&cfg, pa)?,
            expected_singles_rate(&cfg, pb)?,
            window,
            1.0,
        );
        mean_ratio += central_hz / (central_hz + accidental_hz) / pairings.len() as f64;
        println!(
            "  pairing {pa} x {pb}: central {:.4}/s, accidental {:.4}/s ({:.1} and {:.1} per {duration} s)",
            central_hz,
            accidental_hz,
            central_hz * duration,
            accidental_hz * duration
        );
    }

    let v0 = cfg.source.intrinsic_visibility;
    let v_raw = v0 * mean_ratio;
    let s = |v: f64| 2.0 * std::f64::consts::SQRT_2 * v;
    println!("  window capture   {:.4}", mean_window_capture(&cfg, &pairings));
    println!("  visibility       intrinsic {v0:.4}, raw prediction {v_raw:.4}");
    println!("  qber             raw {:.4}, net {:.4}", qber(v_raw), qber(v0));
    println!("  S                raw {:.4}, net {:.4}", s(v_raw), s(v0));
    println!(
        "  local bound      S = 2; quantum bound S = {:.4}; violation needs V > {:.4}",
        2.0 * std::f64::consts::SQRT_2,
        1.0 / std::f64::consts::SQRT_2
    );
    Ok(())
}

fn mean_window_capture(cfg: &ScenarioConfig, pairings: &[(PortId, PortId)]) -> f64 {
    let mut sum = 0.0;
    for &(pa, pb) in pairings {
        sum += window_capture_fraction(
            cfg.coincidence.window_s,
            cfg.detectors[&pa].jitter_sigma_s,
            cfg.detectors[&pb].jitter_sigma_s,
        );
    }
    sum / pairings.len() as f64
}
