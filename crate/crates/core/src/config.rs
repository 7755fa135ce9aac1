//! Run configuration: parsing (TOML or JSON), unit conversion, dotted-path
//! overrides and assembly of the optimization problem.
//!
//! Frequencies are given in the unit named by `units.frequency`; every time
//! key carries an `_ns` suffix.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::controls::FlattopPulse;
use crate::device::{Device, FixedCouplingDevice, TransmonParams, TunableCouplerDevice};
use crate::entangler::{closest_volume_coords, TugboatParams, WeylMap, WeylPoint};
use crate::error::{Error, Result};
use crate::objective::{Dressing, GateSpec, GateTarget, GoalKind, GoalSpec, ParameterSpec, Problem};
use crate::optimize::OptimizerConfig;
use crate::propagate::{ChannelPulse, FramePolicy, PopulationBasis, DEFAULT_SAMPLES};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "CODESIGN_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrequencyUnit {
    /// Cyclic GHz; multiplied by 2 pi.
    #[serde(rename = "GHz_2pi")]
    GHz2Pi,
    /// Cyclic MHz; multiplied by 2 pi / 1000.
    #[serde(rename = "MHz_2pi")]
    MHz2Pi,
    #[serde(rename = "rad_per_ns")]
    RadPerNs,
}

impl FrequencyUnit {
    pub fn factor(self) -> f64 {
        match self {
            FrequencyUnit::GHz2Pi => TAU,
            FrequencyUnit::MHz2Pi => TAU * 1e-3,
            FrequencyUnit::RadPerNs => 1.0,
        }
    }

    pub fn to_rad_per_ns(self, value: f64) -> f64 {
        value * self.factor()
    }

    pub fn from_rad_per_ns(self, value: f64) -> f64 {
        value / self.factor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeUnit {
    #[serde(rename = "ns")]
    Ns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub frequency: FrequencyUnit,
    pub time: TimeUnit,
}

fn default_levels() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmonConfig {
    pub omega: f64,
    pub delta: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplerConfig {
    /// Idle frequency; omitted places it at `2 omega_2 - omega_1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    pub delta: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKeyword {
    /// The direct coupling that cancels the coupler-mediated one.
    SweetSpot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CouplingValue {
    Value(f64),
    Keyword(CouplingKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedCouplingConfig {
    pub q1: TransmonConfig,
    pub q2: TransmonConfig,
    pub g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunableCouplerConfig {
    pub q1: TransmonConfig,
    pub q2: TransmonConfig,
    pub coupler: CouplerConfig,
    pub g1: f64,
    pub g2: f64,
    pub g12: CouplingValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceConfig {
    FixedCoupling(FixedCouplingConfig),
    TunableCoupler(TunableCouplerConfig),
}

fn default_sigma() -> f64 {
    crate::controls::DEFAULT_SIGMA_NS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    /// Frequency units.
    pub amplitude: f64,
    /// Frequency units.
    pub carrier: f64,
    pub t_up_ns: f64,
    pub t_down_ns: f64,
    #[serde(default = "default_sigma")]
    pub sigma_ns: f64,
    #[serde(default)]
    pub drag_lambda_ns: f64,
    /// rad
    #[serde(default)]
    pub phase: f64,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub name: String,
    pub target: GateTarget,
    pub duration_ns: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Keyed by channel name.
    pub pulses: BTreeMap<String, PulseConfig>,
}

fn default_tugboat_init() -> [f64; 3] {
    [0.5, 0.25, 0.05]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalConfig {
    pub kind: GoalKind,
    #[serde(default)]
    pub leakage_weight: f64,
    #[serde(default)]
    pub weyl_map: WeylMap,
    /// Initial tugboat Weyl point in units of pi.
    #[serde(default = "default_tugboat_init")]
    pub tugboat_init: [f64; 3],
    #[serde(default)]
    pub frame: FramePolicy,
    #[serde(default)]
    pub dressing: Dressing,
}

/// Bounds and scale in the parameter's own unit: frequency units for device
/// parameters, amplitudes and carriers; ns for times and DRAG; rad for phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: f64,
}

fn default_waveform_points() -> usize {
    401
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub log: String,
    pub summary: String,
    pub run: String,
    pub waveforms: String,
    pub populations: String,
    pub invariants: String,
    pub aggregate: String,
    #[serde(default = "default_waveform_points")]
    pub waveform_points: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            log: "trajectory.jsonl".into(),
            summary: "trajectory.csv".into(),
            run: "run.json".into(),
            waveforms: "waveforms.csv".into(),
            populations: "populations.csv".into(),
            invariants: "invariants.json".into(),
            aggregate: "sweep.csv".into(),
            waveform_points: default_waveform_points(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Gate to simulate; the first gate when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<String>,
    pub basis: PopulationBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Dotted config path, e.g. `device.g`.
    pub parameter: String,
    pub values: Vec<f64>,
}

fn default_threshold() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// `optimize` succeeds iff the final goal is below this.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub units: Units,
    pub device: DeviceConfig,
    pub goal: GoalConfig,
    pub gates: Vec<GateConfig>,
    #[serde(default)]
    pub parameters: Vec<ParameterConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Everything needed to run, in internal units.
pub struct Setup {
    pub problem: Problem,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Quantity {
    Frequency,
    Other,
}

fn quantity_of(name: &str) -> Quantity {
    if name.starts_with("device.") {
        return Quantity::Frequency;
    }
    match name.rsplit('.').next() {
        Some("amplitude") | Some("carrier") => Quantity::Frequency,
        _ => Quantity::Other,
    }
}

/// Parses a config tree, reporting the path of the first offending key.
pub fn from_value(value: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Configuration(format!("at `{path}`: {}", e.into_inner()))
    })
}

pub fn parse_toml(text: &str) -> Result<Value> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Configuration(format!("TOML: {e}")))?;
    serde_json::to_value(table).map_err(|e| Error::Configuration(e.to_string()))
}

pub fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Configuration(format!("JSON: {e}")))
}

/// Reads a config tree; `.json` files are JSON, anything else TOML.
pub fn read_tree(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_json(&text)
    } else {
        parse_toml(&text)
    }
}

/// Sets `path` (dot separated, numeric segments index arrays). With
/// `create`, missing object keys are inserted.
pub fn set_path(tree: &mut Value, path: &str, new: Value, create: bool) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Configuration("empty config path".into()));
    }
    let segments: Vec<&str> = path.split('.').collect();
    let mut node = tree;
    for (k, seg) in segments.iter().enumerate() {
        let last = k + 1 == segments.len();
        let missing = || Error::Configuration(format!("config path `{path}` does not resolve at `{seg}`"));
        node = match node {
            Value::Object(map) => {
                if !map.contains_key(*seg) {
                    if !create {
                        return Err(missing());
                    }
                    let fresh = if last { Value::Null } else { Value::Object(Default::default()) };
                    map.insert(seg.to_string(), fresh);
                }
                map.get_mut(*seg).expect("key present")
            }
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| missing())?;
                items.get_mut(idx).ok_or_else(missing)?
            }
            _ => return Err(missing()),
        };
    }
    *node = new;
    Ok(())
}

fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `CODESIGN_A__B__C=value` overrides as `a.b.c = value`. Values are
/// read as JSON literals, falling back to plain strings.
pub fn apply_env_overrides<I>(tree: &mut Value, vars: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut applied: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    applied.sort();
    for (path, raw) in &applied {
        set_path(tree, path, parse_override_value(raw), true)?;
    }
    Ok(applied.into_iter().map(|(p, _)| p).collect())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        from_value(parse_toml(text)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        from_value(parse_json(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        from_value(read_tree(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(format!("TOML: {e}")))
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn to_value(&self) -> Result<Value> {
        serde_json::to_value(self).map_err(|e| Error::Configuration(e.to_string()))
    }

    /// A copy with `path` set to `value`; the path must already exist.
    pub fn with_path(&self, path: &str, value: f64) -> Result<Self> {
        let mut tree = self.to_value()?;
        set_path(&mut tree, path, Value::from(value), false)?;
        from_value(tree)
    }

    pub fn device(&self) -> Result<Device> {
        let f = self.units.frequency;
        let transmon = |t: &TransmonConfig| TransmonParams {
            omega: f.to_rad_per_ns(t.omega),
            delta: f.to_rad_per_ns(t.delta),
            levels: t.levels,
        };
        let device = match &self.device {
            DeviceConfig::FixedCoupling(d) => Device::FixedCoupling(FixedCouplingDevice {
                q1: transmon(&d.q1),
                q2: transmon(&d.q2),
                g: f.to_rad_per_ns(d.g),
            }),
            DeviceConfig::TunableCoupler(d) => {
                let q1 = transmon(&d.q1);
                let q2 = transmon(&d.q2);
                let mut tc = TunableCouplerDevice::with_idle_point(
                    q1,
                    q2,
                    f.to_rad_per_ns(d.coupler.delta),
                    d.coupler.levels,
                    f.to_rad_per_ns(d.g1),
                    f.to_rad_per_ns(d.g2),
                    0.0,
                );
                if let Some(w) = d.coupler.omega {
                    tc.coupler.omega = f.to_rad_per_ns(w);
                }
                tc.g12 = match d.g12 {
                    CouplingValue::Value(v) => f.to_rad_per_ns(v),
                    CouplingValue::Keyword(CouplingKeyword::SweetSpot) => tc.sweet_spot_g12()?,
                };
                Device::TunableCoupler(tc)
            }
        };
        device
            .validate()
            .map_err(|e| Error::Configuration(format!("device: {e}")))?;
        Ok(device)
    }

    pub fn gate_specs(&self) -> Result<Vec<GateSpec>> {
        let f = self.units.frequency;
        self.gates
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let pulses = g
                    .pulses
                    .iter()
                    .map(|(channel, p)| {
                        let pulse = FlattopPulse {
                            amplitude: f.to_rad_per_ns(p.amplitude),
                            t_up: p.t_up_ns,
                            t_down: p.t_down_ns,
                            sigma: p.sigma_ns,
                            drag_lambda: p.drag_lambda_ns,
                            carrier: f.to_rad_per_ns(p.carrier),
                            phase: p.phase,
                        };
                        pulse.validate(g.duration_ns).map_err(|e| {
                            Error::Configuration(format!("at `gates[{k}].pulses.{channel}`: {e}"))
                        })?;
                        Ok(ChannelPulse {
                            channel: channel.clone(),
                            pulse,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GateSpec {
                    name: g.name.clone(),
                    target: g.target,
                    duration: g.duration_ns,
                    n_steps: g.n_steps,
                    n_samples: g.n_samples,
                    pulses,
                })
            })
            .collect()
    }

    pub fn parameter_specs(&self) -> Vec<ParameterSpec> {
        let f = self.units.frequency;
        self.parameters
            .iter()
            .map(|p| {
                let conv = |v: f64| match quantity_of(&p.name) {
                    Quantity::Frequency => f.to_rad_per_ns(v),
                    Quantity::Other => v,
                };
                ParameterSpec {
                    name: p.name.clone(),
                    lower: conv(p.lower),
                    upper: conv(p.upper),
                    scale: conv(p.scale),
                }
            })
            .collect()
    }

    pub fn goal_spec(&self) -> Result<GoalSpec> {
        let map = self.goal.weyl_map;
        let init = self.goal.tugboat_init;
        let target = WeylPoint {
            c1: PI * init[0],
            c2: PI * init[1],
            c3: PI * init[2],
        };
        Ok(GoalSpec {
            kind: self.goal.kind,
            gates: self.gate_specs()?,
            leakage_weight: self.goal.leakage_weight,
            weyl_map: map,
            tugboat: TugboatParams::new(closest_volume_coords(&target, map)),
            frame: self.goal.frame,
            dressing: self.goal.dressing,
        })
    }

    /// Validates everything and assembles the problem.
    pub fn setup(&self) -> Result<Setup> {
        if !(self.threshold > 0.0) {
            return Err(Error::Configuration("at `threshold`: must be positive".into()));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Configuration(format!("at `optimizer`: {e}")))?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Configuration("at `sweep.values`: empty value list".into()));
            }
        }
        let device = self.device()?;
        let goal = self.goal_spec()?;
        let problem = Problem::new(device, goal, self.parameter_specs()).map_err(|e| match e {
            Error::Configuration(_) => e,
            other => Error::Configuration(other.to_string()),
        })?;
        Ok(Setup {
            problem,
            optimizer: self.optimizer,
            seed: self.seed,
            threshold: self.threshold,
        })
    }
}
