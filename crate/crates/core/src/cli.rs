//! Command-line entry point.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::actuator::MEASURED_BASELINE_POWER;
use crate::error::{Result, VllsaError};
use crate::fsm::ActuationMode;
use crate::harness::bench::{self, BENCH_Q_DEG};
use crate::harness::calibrate::{self, StiffnessAnchor};
use crate::harness::config::{self, Config, LoadedConfig};
use crate::harness::metrics::{compute_metrics, read_metrics, write_metrics, RunMetrics};
use crate::harness::scenario::{
    self, evaluate_checks, CellResult, Scenario, ScenarioRun, SweepCell,
};
use crate::harness::sim::{LogEntry, Obstacle};
use crate::harness::trace::{read_trace, write_trace};

/// Marker file identifying a directory this tool wrote.
pub const RUN_MARKER: &str = ".vllsa-run";

#[derive(Debug, Parser)]
#[command(
    name = "vllsa",
    version,
    about = "Leaf-spring actuator bench and hopping-leg simulator"
)]
pub struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "vllsa-out")]
    pub out: PathBuf,
    /// Override a configuration value, e.g. `--set sim.duration=2.0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the lever arms to stiffness anchors and the drive torque product
    /// to the no-load power, and write a calibration file.
    Calibrate(CalibrateArgs),
    /// Write a virtual bench table.
    Bench {
        #[arg(value_enum)]
        which: BenchKind,
    },
    /// Run one hopping experiment.
    Hop {
        #[arg(value_enum)]
        scenario: ScenarioArg,
        #[arg(value_enum)]
        mode: ModeArg,
    },
    /// Run a grid of experiments in parallel and compare the modes.
    Sweep(SweepArgs),
    /// Recompute the metrics of run directories from their traces.
    Report {
        /// Run directories; defaults to the output directory.
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Anchor `q_deg,x_mm,stiffness`; repeatable.
    #[arg(long = "anchor", value_name = "Q_DEG,X_MM,K")]
    pub anchors: Vec<String>,
    /// CSV file with columns q_deg, x_mm, stiffness.
    #[arg(long = "anchors", value_name = "CSV")]
    pub anchors_csv: Option<PathBuf>,
    /// No-load drive power at the configured motor speed, W.
    #[arg(long, default_value_t = MEASURED_BASELINE_POWER)]
    pub baseline_power: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Scenarios to run; repeatable.
    #[arg(long = "scenario", value_enum, default_values_t = [ScenarioArg::Inplace])]
    pub scenarios: Vec<ScenarioArg>,
    /// Modes to run; repeatable.
    #[arg(long = "mode", value_enum, default_values_t = [ModeArg::Dmd, ModeArg::Cls, ModeArg::Chs, ModeArg::Vs])]
    pub modes: Vec<ModeArg>,
    /// `KEY=[v1, v2, ...]`: the key takes each value in turn; several grids
    /// combine as a product.
    #[arg(long = "grid", value_name = "KEY=[VALUES]")]
    pub grids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Stiffness,
    Modulation,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Inplace,
    Forward,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Inplace => Scenario::Inplace,
            ScenarioArg::Forward => Scenario::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dmd,
    Cls,
    Chs,
    Vs,
}

impl From<ModeArg> for ActuationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dmd => ActuationMode::Dmd,
            ModeArg::Cls => ActuationMode::Cls,
            ModeArg::Chs => ActuationMode::Chs,
            ModeArg::Vs => ActuationMode::Vs,
        }
    }
}

/// How a command ended.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration; exit code 2.
    Usage(VllsaError),
    /// A run or assertion failed; exit code 1.
    Run(String),
}

impl From<VllsaError> for Failure {
    fn from(e: VllsaError) -> Self {
        match e {
            VllsaError::Config(_) | VllsaError::InvalidParameter(_) | VllsaError::Domain(_) => {
                Failure::Usage(e)
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses the process arguments and runs the command.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config_path) = cli.config.clone() else {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                "the following required argument was not provided: --config <PATH>",
            )
            .exit();
    };
    match run(&cli, &config_path) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: &Cli, config_path: &Path) -> CmdResult {
    let loaded = config::load(config_path, &cli.overrides).map_err(Failure::Usage)?;
    match &cli.command {
        Command::Calibrate(args) => calibrate_cmd(&loaded, args, &cli.out),
        Command::Bench { which } => bench_cmd(&loaded, *which, &cli.out),
        Command::Hop { scenario, mode } => {
            hop_cmd(&loaded, (*scenario).into(), (*mode).into(), &cli.out)
        }
        Command::Sweep(args) => sweep_cmd(cli, config_path, &loaded, args),
        Command::Report { runs } => {
            let runs = if runs.is_empty() {
                vec![cli.out.clone()]
            } else {
                runs.clone()
            };
            report_cmd(&runs)
        }
    }
}

/// Output directory built beside its final location and moved into place
/// when complete.
struct Staged {
    target: PathBuf,
    dir: PathBuf,
}

impl Staged {
    fn begin(target: &Path) -> Result<Self> {
        if target.exists() && !target.join(RUN_MARKER).is_file() {
            return Err(VllsaError::Config(format!(
                "output directory {} exists and was not written by vllsa; choose another --out",
                target.display()
            )));
        }
        let name = target.file_name().ok_or_else(|| {
            VllsaError::Config(format!("invalid output directory {}", target.display()))
        })?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let dir = parent.join(format!(
            ".{}.partial-{}",
            name.to_string_lossy(),
            std::process::id()
        ));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir(&dir)?;
        fs::write(dir.join(RUN_MARKER), "")?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn commit(self) -> Result<()> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.dir, &self.target)?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn parse_anchor(text: &str) -> Result<StiffnessAnchor> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| VllsaError::Config(format!("anchor '{text}' must be q_deg,x_mm,stiffness")))?;
    match v[..] {
        [q, x, k] => Ok(StiffnessAnchor {
            q: q.to_radians(),
            x: x * 1e-3,
            stiffness: k,
        }),
        _ => Err(VllsaError::Config(format!(
            "anchor '{text}' must have three values"
        ))),
    }
}

#[derive(Debug, Deserialize)]
struct AnchorRow {
    q_deg: f64,
    x_mm: f64,
    stiffness: f64,
}

fn read_anchor_csv(path: &Path) -> Result<Vec<StiffnessAnchor>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| VllsaError::Config(format!("cannot read anchors {}: {e}", path.display())))?;
    r.deserialize::<AnchorRow>()
        .map(|row| {
            let row =
                row.map_err(|e| VllsaError::Config(format!("anchors {}: {e}", path.display())))?;
            Ok(StiffnessAnchor {
                q: row.q_deg.to_radians(),
                x: row.x_mm * 1e-3,
                stiffness: row.stiffness,
            })
        })
        .collect()
}

fn calibrate_cmd(loaded: &LoadedConfig, args: &CalibrateArgs, out: &Path) -> CmdResult {
    let mut anchors = args
        .anchors
        .iter()
        .map(|a| parse_anchor(a))
        .collect::<Result<Vec<_>>>()
        .map_err(Failure::Usage)?;
    if let Some(p) = &args.anchors_csv {
        anchors.extend(read_anchor_csv(p).map_err(Failure::Usage)?);
    }
    if anchors.is_empty() {
        anchors = calibrate::bench_anchors();
    }
    let cfg = &loaded.config;
    let spring = cfg.spring()?;
    let fit = calibrate::calibrate_lever_arms(&spring, &anchors)?;
    let torque_product =
        calibrate::calibrate_torque_product(&cfg.drive.drive()?, args.baseline_power)?;
    let staged = Staged::begin(out)?;
    fs::write(
        staged.path("calibration.toml"),
        config::calibration_toml(fit.lever_e, fit.lever_a, torque_product)?,
    )?;
    staged.commit()?;
    println!("lever_e = {:.10} m", fit.lever_e);
    println!("lever_a = {:.10} m", fit.lever_a);
    println!("torque_product = {torque_product:.10} N m");
    for a in &fit.anchors {
        println!(
            "anchor q={:.2} deg x={:.2} mm measured={:.4} model={:.4} residual={:+.3e}",
            a.anchor.q.to_degrees(),
            a.anchor.x * 1e3,
            a.anchor.stiffness,
            a.model,
            a.relative_error
        );
    }
    println!("wrote {}", out.join("calibration.toml").display());
    Ok(())
}

fn bench_cmd(loaded: &LoadedConfig, which: BenchKind, out: &Path) -> CmdResult {
    loaded.require_calibrated().map_err(Failure::Usage)?;
    let cfg = &loaded.config;
    let spring = cfg.spring()?;
    let drive = cfg.drive.drive()?;
    let schedule = cfg.schedule.schedule(&cfg.schedule.inplace, &spring)?;
    let staged = Staged::begin(out)?;
    let name = match which {
        BenchKind::Stiffness => {
            let rows = bench::bench_stiffness(&spring, &BENCH_Q_DEG, &bench::bench_x_mm());
            bench::write_csv(create(&staged.path("stiffness.csv"))?, &rows)?;
            for r in rows.iter().filter(|r| r.x_mm == 35.0 || r.x_mm == 70.0) {
                println!(
                    "q={:>4.1} deg x={:>4.1} mm K={:>8.3} N m/rad tau={:>8.4} N m",
                    r.q_deg, r.x_mm, r.stiffness, r.torque
                );
            }
            "stiffness.csv"
        }
        BenchKind::Modulation => {
            let rows = bench::bench_modulation(&schedule, &spring, &drive, &BENCH_Q_DEG);
            bench::write_csv(create(&staged.path("modulation.csv"))?, &rows)?;
            for r in &rows {
                println!(
                    "q={:>4.1} deg {:?} time={:.3} s dK/dt={:.2} N m/(rad s) P_t={:.3} W",
                    r.q_deg, r.direction, r.time, r.mean_speed, r.mean_power
                );
            }
            "modulation.csv"
        }
        BenchKind::Power => {
            let rows = bench::bench_power(
                &schedule,
                &spring,
                &drive,
                &BENCH_Q_DEG,
                schedule.x_hs * 1e3,
            );
            bench::write_csv(create(&staged.path("power.csv"))?, &rows)?;
            for r in &rows {
                println!(
                    "q={:>4.1} deg P0={:.3} W load={:.3} W total={:.3} W ratio={:.3}",
                    r.q_deg, r.baseline_power, r.load_power, r.total_power, r.ratio_to_unloaded
                );
            }
            "power.csv"
        }
    };
    staged.commit()?;
    println!("wrote {}", out.join(name).display());
    Ok(())
}

/// Scenario facts a report needs besides the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunInfo {
    scenario: Scenario,
    mode: ActuationMode,
    obstacle: Option<Obstacle>,
    fault: Option<String>,
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut w = create(path)?;
    for e in log {
        writeln!(w, "{:.4} hop={} {} {}", e.t, e.hop, e.label, e.detail)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the files of one run into `dir`.
fn write_run(
    dir: &Path,
    cfg: &Config,
    run: &ScenarioRun,
    obstacle: Option<Obstacle>,
) -> Result<()> {
    let out = &run.output;
    write_trace(create(&dir.join("trace.csv"))?, &out.trace)?;
    write_metrics(create(&dir.join("metrics.json"))?, &run.metrics)?;
    write_log(&dir.join("events.log"), &out.log)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    let info = RunInfo {
        scenario: run.scenario,
        mode: out.mode,
        obstacle,
        fault: out.fault.as_ref().map(|e| e.to_string()),
    };
    let text =
        serde_json::to_string_pretty(&info).map_err(|e| VllsaError::Config(e.to_string()))?;
    fs::write(dir.join("run.json"), text + "\n")?;
    Ok(())
}

fn hop_cmd(
    loaded: &LoadedConfig,
    scenario: Scenario,
    mode: ActuationMode,
    out: &Path,
) -> CmdResult {
    loaded.require_calibrated().map_err(Failure::Usage)?;
    let cfg = &loaded.config;
    let setup = scenario::setup(cfg, scenario, mode)?;
    let run = scenario::run(&setup, scenario)?;
    let staged = Staged::begin(out)?;
    write_run(&staged.dir, cfg, &run, setup.obstacle)?;
    staged.commit()?;
    println!("{} {}", scenario, run.metrics.summary());
    if let Some(f) = run.fault() {
        return Err(Failure::Run(format!(
            "run ended early: {f}; partial trace kept in {}",
            out.display()
        )));
    }
    Ok(())
}

/// Expands `KEY=[v1, v2]` grids into lists of override strings.
fn expand_grids(grids: &[String]) -> Result<Vec<Vec<String>>> {
    let mut variants: Vec<Vec<String>> = vec![Vec::new()];
    for g in grids {
        let (key, raw) = g.split_once('=').ok_or_else(|| {
            VllsaError::Config(format!("grid '{g}' is not of the form KEY=[values]"))
        })?;
        let parsed: toml::Table = toml::from_str(&format!("v = {raw}"))
            .map_err(|_| VllsaError::Config(format!("grid '{g}': values must be a TOML array")))?;
        let Some(Value::Array(values)) = parsed.get("v") else {
            return Err(VllsaError::Config(format!(
                "grid '{g}': values must be a TOML array"
            )));
        };
        let mut next = Vec::new();
        for base in &variants {
            for v in values {
                let mut items = base.clone();
                items.push(format!("{}={}", key.trim(), v));
                next.push(items);
            }
        }
        variants = next;
    }
    Ok(variants)
}

fn sweep_cmd(cli: &Cli, config_path: &Path, loaded: &LoadedConfig, args: &SweepArgs) -> CmdResult {
    loaded.require_calibrated().map_err(Failure::Usage)?;
    let variants = expand_grids(&args.grids).map_err(Failure::Usage)?;
    let mut scenarios: Vec<Scenario> = args.scenarios.iter().map(|&s| s.into()).collect();
    scenarios.dedup();
    let mut modes: Vec<ActuationMode> = args.modes.iter().map(|&m| m.into()).collect();
    modes.dedup();
    let mut cells = Vec::new();
    for (variant, items) in variants.iter().enumerate() {
        let overrides: Vec<String> = cli
            .overrides
            .iter()
            .cloned()
            .chain(items.iter().cloned())
            .collect();
        let cfg = config::load(config_path, &overrides)
            .map_err(Failure::Usage)?
            .config;
        for &scenario in &scenarios {
            for &mode in &modes {
                cells.push(SweepCell {
                    scenario,
                    mode,
                    variant,
                    config: cfg.clone(),
                });
            }
        }
    }
    if cells.is_empty() {
        eprintln!("warning: the sweep grid is empty; nothing to run");
        return Ok(());
    }
    let results = scenario::run_sweep(cells);
    let checks = evaluate_checks(&results);
    let staged = Staged::begin(&cli.out)?;
    write_sweep_table(&staged.path("sweep.csv"), &results, &variants)?;
    bench::write_csv(create(&staged.path("checks.csv"))?, &checks)?;
    for r in &results {
        if let Ok(run) = &r.outcome {
            let name = cell_name(&r.cell);
            let dir = staged.path(&name);
            fs::create_dir(&dir)?;
            let obstacle = (r.cell.scenario == Scenario::Forward).then_some(r.cell.config.obstacle);
            write_run(&dir, &r.cell.config, run, obstacle)?;
        }
    }
    staged.commit()?;

    let mut failed = 0;
    for r in &results {
        let name = cell_name(&r.cell);
        match (r.completed(), r.failure()) {
            (Some(m), _) => println!("{name}: {}", m.summary()),
            (None, f) => {
                failed += 1;
                println!("{name}: FAILED {}", f.unwrap_or_default());
            }
        }
    }
    let mut hard_failures = 0;
    for c in &checks {
        let status = match c.passed {
            Some(true) => "pass",
            Some(false) if c.hard => {
                hard_failures += 1;
                "FAIL"
            }
            Some(false) => "outside band",
            None => "n/a",
        };
        let kind = if c.hard { "hard" } else { "soft" };
        println!(
            "{}-v{} {kind} {}: {status} ({})",
            c.scenario, c.variant, c.name, c.detail
        );
    }
    println!("wrote {}", cli.out.join("sweep.csv").display());
    if failed > 0 || hard_failures > 0 {
        return Err(Failure::Run(format!(
            "{failed} cell(s) failed, {hard_failures} hard check(s) failed"
        )));
    }
    Ok(())
}

fn cell_name(cell: &SweepCell) -> String {
    format!("{}-v{}-{}", cell.scenario, cell.variant, cell.mode)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    scenario: Scenario,
    variant: usize,
    overrides: String,
    mode: ActuationMode,
    status: String,
    peak_foot_lift: Option<f64>,
    energy_total: Option<f64>,
    energy_joints: Option<f64>,
    energy_knee: Option<f64>,
    stiffness_share: Option<f64>,
    peak_knee_power_retraction: Option<f64>,
    cleared: Option<bool>,
}

fn write_sweep_table(path: &Path, results: &[CellResult], variants: &[Vec<String>]) -> Result<()> {
    let rows: Vec<SweepRow> = results
        .iter()
        .map(|r| {
            let m = r.completed();
            SweepRow {
                scenario: r.cell.scenario,
                variant: r.cell.variant,
                overrides: variants[r.cell.variant].join(" "),
                mode: r.cell.mode,
                status: r
                    .failure()
                    .map_or_else(|| "ok".to_string(), |f| format!("failed: {f}")),
                peak_foot_lift: m.map(|m| m.peak_foot_lift),
                energy_total: m.map(|m| m.energy_total),
                energy_joints: m.map(|m| m.energy_joints),
                energy_knee: m.map(|m| m.energy_knee),
                stiffness_share: m.map(|m| m.stiffness_share),
                peak_knee_power_retraction: m.and_then(|m| m.peak_knee_power_retraction),
                cleared: m.and_then(|m| m.cleared),
            }
        })
        .collect();
    bench::write_csv(create(path)?, &rows)
}

/// Recomputes the metrics of a run directory from its trace.
pub fn recompute(dir: &Path) -> Result<RunMetrics> {
    let info: RunInfo = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)
        .map_err(|e| VllsaError::Config(format!("{}: {e}", dir.join("run.json").display())))?;
    let trace = read_trace(fs::File::open(dir.join("trace.csv"))?)?;
    compute_metrics(&trace, info.obstacle.as_ref())
}

fn report_cmd(runs: &[PathBuf]) -> CmdResult {
    let mut mismatches = 0;
    for dir in runs {
        let metrics =
            recompute(dir).map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))?;
        let stored = fs::read_to_string(dir.join("metrics.json"))
            .map_err(VllsaError::from)
            .and_then(|t| read_metrics(&t));
        let agrees = match &stored {
            Ok(s) => *s == metrics,
            Err(_) => false,
        };
        if !agrees {
            mismatches += 1;
        }
        let tag = if agrees {
            "matches metrics.json"
        } else {
            "DIFFERS from metrics.json"
        };
        println!("{}: {} [{tag}]", dir.display(), metrics.summary());
        for (name, v) in [
            ("t_jl", metrics.t_jl),
            ("t_ll", metrics.t_ll),
            ("peak_knee_power_jump", metrics.peak_knee_power_jump),
            (
                "peak_knee_power_retraction",
                metrics.peak_knee_power_retraction,
            ),
            ("peak_knee_power_landing", metrics.peak_knee_power_landing),
            ("peak_knee_power_stance", metrics.peak_knee_power_stance),
        ] {
            match v {
                Some(v) => println!("  {name} = {v:.4}"),
                None => println!("  {name} = n/a"),
            }
        }
    }
    if mismatches > 0 {
        return Err(Failure::Run(format!(
            "{mismatches} run(s) disagree with their stored metrics"
        )));
    }
    Ok(())
}
