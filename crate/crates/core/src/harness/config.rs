//! Layered TOML configuration: built-in defaults, an optional calibration
//! file, the config file and `--set` overrides, in rising precedence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::actuator::{
    BallScrewDrive, GearCoupling, LeafSpringParams, DEFAULT_LEVER_A, DEFAULT_LEVER_E,
    MEASURED_BASELINE_POWER,
};
use crate::error::{Result, VllsaError};
use crate::fsm::{HopPlan, StiffnessSchedule};
use crate::harness::motor::MotorModel;
use crate::harness::sim::{Obstacle, SimSettings};
use crate::leg::LegParams;

/// Top-level key naming a calibration file.
pub const CALIBRATION_KEY: &str = "calibration";

/// Keys that a calibration provides.
pub const CALIBRATED_KEYS: [&str; 3] = ["spring.lever_e", "spring.lever_a", "drive.torque_product"];

const GAIN_KEYS: [&str; 3] = ["thrust_gains", "retract_gains", "landing_gains"];
const SCENARIOS: [&str; 2] = ["inplace", "forward"];

/// Pairs of keys of which a layer may set only one; setting either
/// replaces the other from lower layers.
const EXCLUSIVE: [(&str, &str); 2] = [("x_ls", "k_ls"), ("x_hs", "k_hs")];

fn config_err(msg: impl Into<String>) -> VllsaError {
    VllsaError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpringSection {
    pub youngs_modulus: f64,
    pub spring_length: f64,
    pub width: f64,
    pub thickness: f64,
    pub n_pieces: u32,
    pub lever_e: f64,
    pub lever_a: f64,
}

impl Default for SpringSection {
    fn default() -> Self {
        let s = LeafSpringParams::default();
        Self {
            youngs_modulus: s.youngs_modulus,
            spring_length: s.spring_length,
            width: s.width,
            thickness: s.thickness,
            n_pieces: s.n_pieces,
            lever_e: DEFAULT_LEVER_E,
            lever_a: DEFAULT_LEVER_A,
        }
    }
}

impl SpringSection {
    pub fn params(&self) -> Result<LeafSpringParams> {
        LeafSpringParams::from_stack(
            self.youngs_modulus,
            self.spring_length,
            self.width,
            self.thickness,
            self.n_pieces,
            self.lever_e,
            self.lever_a,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    /// m/rev
    pub lead_p: f64,
    /// rpm
    pub motor_speed_n: f64,
    pub efficiency_eta: f64,
    /// `eta * tau_s`, N m.
    pub torque_product: f64,
}

impl Default for DriveSection {
    fn default() -> Self {
        let d = BallScrewDrive::default();
        Self {
            lead_p: d.lead_p,
            motor_speed_n: d.motor_speed_n,
            efficiency_eta: d.efficiency_eta,
            torque_product: d.torque_product_for(MEASURED_BASELINE_POWER),
        }
    }
}

impl DriveSection {
    pub fn drive(&self) -> Result<BallScrewDrive> {
        let d = BallScrewDrive {
            lead_p: self.lead_p,
            motor_speed_n: self.motor_speed_n,
            efficiency_eta: self.efficiency_eta,
            motor_torque_ts: self.torque_product / self.efficiency_eta,
        };
        d.validate()?;
        Ok(d)
    }
}

/// Low and high stiffness of one scenario, each given either as a slider
/// position `x_*` (m) or as the stiffness `k_*` (N m/rad) at zero deflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessLevels {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_ls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_hs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_ls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_hs: Option<f64>,
}

impl StiffnessLevels {
    fn resolve(
        x: Option<f64>,
        k: Option<f64>,
        spring: &LeafSpringParams,
        name: &str,
    ) -> Result<f64> {
        match (x, k) {
            (Some(x), None) => Ok(x),
            (None, Some(k)) => spring.slider_for_stiffness(0.0, k),
            _ => Err(config_err(format!(
                "give exactly one of x_{name} and k_{name}"
            ))),
        }
    }

    /// Slider positions `(x_ls, x_hs)`.
    pub fn positions(&self, spring: &LeafSpringParams) -> Result<(f64, f64)> {
        Ok((
            Self::resolve(self.x_ls, self.k_ls, spring, "ls")?,
            Self::resolve(self.x_hs, self.k_hs, spring, "hs")?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub q_band: f64,
    pub hs_to_ls: [f64; 2],
    pub ls_to_hs: [f64; 2],
    pub hold_power: f64,
    pub inplace: StiffnessLevels,
    pub forward: StiffnessLevels,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = StiffnessSchedule::default();
        Self {
            q_band: s.q_band,
            hs_to_ls: s.hs_to_ls,
            ls_to_hs: s.ls_to_hs,
            hold_power: s.hold_power,
            inplace: StiffnessLevels {
                x_ls: Some(s.x_ls),
                x_hs: Some(s.x_hs),
                k_ls: None,
                k_hs: None,
            },
            forward: StiffnessLevels {
                x_ls: None,
                x_hs: None,
                k_ls: Some(11.0),
                k_hs: Some(65.0),
            },
        }
    }
}

impl ScheduleSection {
    pub fn schedule(
        &self,
        levels: &StiffnessLevels,
        spring: &LeafSpringParams,
    ) -> Result<StiffnessSchedule> {
        let (x_ls, x_hs) = levels.positions(spring)?;
        let s = StiffnessSchedule {
            x_ls,
            x_hs,
            q_band: self.q_band,
            hs_to_ls: self.hs_to_ls,
            ls_to_hs: self.ls_to_hs,
            hold_power: self.hold_power,
        };
        s.validate(spring)?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub inplace: HopPlan,
    pub forward: HopPlan,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            inplace: HopPlan::in_place(),
            forward: HopPlan::forward(),
        }
    }
}

/// Fully resolved configuration.
///
/// In the file the VMC gains of each plan live under `[vmc.<scenario>]`
/// and the leg mount is implied by the scenario.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub spring: SpringSection,
    pub gear: GearCoupling,
    pub drive: DriveSection,
    pub leg: LegParams,
    pub plan: PlanSection,
    pub schedule: ScheduleSection,
    pub motor: MotorModel,
    pub sim: SimSettings,
    pub obstacle: Obstacle,
}

impl Config {
    pub fn spring(&self) -> Result<LeafSpringParams> {
        self.spring.params()
    }

    /// The configuration in its file layout.
    pub fn to_file_table(&self) -> Result<Table> {
        let mut t = Value::try_from(self)
            .map(|v| v.as_table().cloned().unwrap_or_default())
            .map_err(|e| config_err(e.to_string()))?;
        if let Some(Value::Table(leg)) = t.get_mut("leg") {
            leg.remove("mount");
        }
        let mut vmc = Table::new();
        for sc in SCENARIOS {
            let plan = t
                .get_mut("plan")
                .and_then(|p| p.get_mut(sc))
                .and_then(Value::as_table_mut)
                .expect("plan sections serialize as tables");
            let mut gains = Table::new();
            for k in GAIN_KEYS {
                if let Some(v) = plan.remove(k) {
                    gains.insert(k.to_string(), v);
                }
            }
            vmc.insert(sc.to_string(), Value::Table(gains));
        }
        t.insert("vmc".to_string(), Value::Table(vmc));
        Ok(t)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(&self.to_file_table()?).map_err(|e| config_err(e.to_string()))
    }
}

/// A configuration together with where its values came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: Config,
    /// Whether every key in [`CALIBRATED_KEYS`] came from a file or override.
    pub calibrated: bool,
    pub calibration_file: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn require_calibrated(&self) -> Result<()> {
        if self.calibrated {
            Ok(())
        } else {
            Err(config_err(format!(
                "configuration is not calibrated: run `vllsa calibrate` first and point `{CALIBRATION_KEY}` at the \
                 calibration file it writes, or set {} explicitly",
                CALIBRATED_KEYS.join(", ")
            )))
        }
    }
}

/// Renames `*_deg` and `*_mm` keys to their base names in SI units.
pub fn normalize_units(table: &mut Table) -> Result<()> {
    let keys: Vec<String> = table.keys().cloned().collect();
    for key in keys {
        let (base, scale) = if let Some(b) = key.strip_suffix("_deg") {
            (b, std::f64::consts::PI / 180.0)
        } else if let Some(b) = key.strip_suffix("_mm") {
            (b, 1e-3)
        } else {
            if let Some(Value::Table(sub)) = table.get_mut(&key) {
                normalize_units(sub)?;
            }
            continue;
        };
        if base.is_empty() || table.contains_key(base) {
            return Err(config_err(format!("key '{key}' conflicts with '{base}'")));
        }
        let v = table.remove(&key).expect("key listed above");
        let scaled = scale_value(&v, scale)
            .ok_or_else(|| config_err(format!("key '{key}' must be numeric")))?;
        table.insert(base.to_string(), scaled);
    }
    Ok(())
}

fn scale_value(v: &Value, scale: f64) -> Option<Value> {
    match v {
        Value::Integer(i) => Some(Value::Float(*i as f64 * scale)),
        Value::Float(f) => Some(Value::Float(f * scale)),
        Value::Array(a) => a
            .iter()
            .map(|x| scale_value(x, scale))
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        _ => None,
    }
}

/// Integers where floats are expected are accepted as floats.
fn coerce_like(value: Value, like: Option<&Value>) -> Value {
    match (value, like) {
        (Value::Integer(i), Some(Value::Float(_))) => Value::Float(i as f64),
        (Value::Array(a), Some(Value::Array(l))) => {
            let first = l.first();
            Value::Array(a.into_iter().map(|v| coerce_like(v, first)).collect())
        }
        (v, _) => v,
    }
}

/// Merges `top` into `base`, table by table.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        for (a, b) in EXCLUSIVE {
            if k == a {
                base.remove(b);
            } else if k == b {
                base.remove(a);
            }
        }
        match (base.get_mut(&k), v) {
            (Some(Value::Table(bt)), Value::Table(tt)) => merge(bt, tt),
            (existing, v) => {
                let v = coerce_like(v, existing.as_deref());
                base.insert(k, v);
            }
        }
    }
}

fn has_path(table: &Table, path: &str) -> bool {
    let mut cur = table;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(Value::Table(t)) if i + 1 < parts.len() => cur = t,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

/// Parses `key.path=value` overrides into one table, rejecting repeated or
/// overlapping keys.
pub fn parse_overrides(items: &[String]) -> Result<Table> {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    let mut out = Table::new();
    for item in items {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| config_err(format!("override '{item}' is not of the form key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
            return Err(config_err(format!("override '{item}' has an empty key")));
        }
        let value = parse_value(raw.trim());
        // nest and normalise so that `x_mm` and `x` land on the same key
        let mut nested = Table::new();
        let parts: Vec<&str> = key.split('.').collect();
        let mut leaf = Table::new();
        leaf.insert(parts[parts.len() - 1].to_string(), value);
        for p in parts[..parts.len() - 1].iter().rev() {
            let mut t = Table::new();
            t.insert(p.to_string(), Value::Table(leaf));
            leaf = t;
        }
        nested.extend(leaf);
        normalize_units(&mut nested)?;
        let canonical = leaf_path(&nested);
        for (other, orig) in &seen {
            let overlap = *other == canonical
                || canonical.starts_with(&format!("{other}."))
                || other.starts_with(&format!("{canonical}."));
            if overlap {
                return Err(config_err(format!(
                    "conflicting overrides '{orig}' and '{item}'"
                )));
            }
        }
        seen.insert(canonical, item.clone());
        merge(&mut out, nested);
    }
    Ok(out)
}

fn leaf_path(t: &Table) -> String {
    let (k, v) = t.iter().next().expect("override tables have one entry");
    match v {
        Value::Table(sub) if sub.len() == 1 => format!("{k}.{}", leaf_path(sub)),
        _ => k.clone(),
    }
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let mut t: Table =
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    normalize_units(&mut t)?;
    Ok(t)
}

/// Moves `[vmc.<scenario>]` gains into the plan tables and rejects keys the
/// scenarios own.
fn to_struct_layout(table: &mut Table) -> Result<()> {
    if has_path(table, "leg.mount") {
        return Err(config_err(
            "leg.mount is fixed by the scenario and cannot be configured",
        ));
    }
    let Some(vmc) = table.remove("vmc") else {
        return Ok(());
    };
    let Value::Table(vmc) = vmc else {
        return Err(config_err("[vmc] must be a table"));
    };
    for (sc, gains) in vmc {
        if !SCENARIOS.contains(&sc.as_str()) {
            return Err(config_err(format!("unknown scenario 'vmc.{sc}'")));
        }
        let Value::Table(gains) = gains else {
            return Err(config_err(format!("[vmc.{sc}] must be a table")));
        };
        for k in gains.keys() {
            if !GAIN_KEYS.contains(&k.as_str()) {
                return Err(config_err(format!("unknown key 'vmc.{sc}.{k}'")));
            }
        }
        let plan = table
            .entry("plan")
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err("[plan] must be a table"))?;
        let sc_plan = plan
            .entry(sc.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("[plan.{sc}] must be a table")))?;
        merge(sc_plan, gains);
    }
    Ok(())
}

/// Loads `path` with `overrides` on top of the built-in defaults.
pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let mut file = read_table(path)?;
    let mut over = parse_overrides(overrides)?;
    let calib_path = match (over.remove(CALIBRATION_KEY), file.remove(CALIBRATION_KEY)) {
        (Some(Value::String(p)), _) => Some(PathBuf::from(p)),
        (None, Some(Value::String(p))) => {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            Some(dir.join(p))
        }
        (None, None) => None,
        _ => {
            return Err(config_err(format!(
                "'{CALIBRATION_KEY}' must be a path string"
            )))
        }
    };
    let calib = match &calib_path {
        Some(p) => {
            let mut t = read_table(p)?;
            t.remove(CALIBRATION_KEY);
            t
        }
        None => Table::new(),
    };
    let mut layers = [calib, file, over];
    for l in &mut layers {
        to_struct_layout(l)?;
    }
    let calibrated = CALIBRATED_KEYS
        .iter()
        .all(|k| layers.iter().any(|l| has_path(l, k)));
    let mut merged = Value::try_from(Config::default())
        .map(|v| v.as_table().cloned().unwrap_or_default())
        .map_err(|e| config_err(e.to_string()))?;
    for l in layers {
        merge(&mut merged, l);
    }
    let config: Config = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    validate(&config)?;
    Ok(LoadedConfig {
        config,
        calibrated,
        calibration_file: calib_path,
    })
}

/// Checks every section that does not need a scenario to be chosen.
pub fn validate(config: &Config) -> Result<()> {
    let spring = config.spring()?;
    config.gear.validate()?;
    config.drive.drive()?;
    config.leg.validate()?;
    config.motor.validate()?;
    config.sim.validate()?;
    config.obstacle.validate()?;
    config.plan.inplace.validate()?;
    config.plan.forward.validate()?;
    config
        .schedule
        .schedule(&config.schedule.inplace, &spring)?;
    config
        .schedule
        .schedule(&config.schedule.forward, &spring)?;
    Ok(())
}

/// Text of a calibration file.
pub fn calibration_toml(lever_e: f64, lever_a: f64, torque_product: f64) -> Result<String> {
    let mut spring = Table::new();
    spring.insert("lever_e".into(), Value::Float(lever_e));
    spring.insert("lever_a".into(), Value::Float(lever_a));
    let mut drive = Table::new();
    drive.insert("torque_product".into(), Value::Float(torque_product));
    let mut t = Table::new();
    t.insert("spring".into(), Value::Table(spring));
    t.insert("drive".into(), Value::Table(drive));
    toml::to_string(&t).map_err(|e| config_err(e.to_string()))
}
