//! Goal functions: single-qubit error in the dressed frame, tugboat
//! entangling error, leakage folding and the combined goal.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::controls::{ControlVector, ParameterEntry, OPTIMIZABLE_FIELDS};
use crate::device::{dressed_transform, Device, DressedBasis};
use crate::entangler::{
    gates, makhlin_invariants_unchecked, pe_functional, pe_membership, tugboat_gate, weyl_coordinates, TugboatParams,
    WeylMap,
};
use crate::error::{Error, Result};
use crate::hilbert::{overlap_fidelity, tensor, ComplexMatrix};
use crate::propagate::{
    interaction_block, propagate, required_steps, ChannelPulse, Frame, FramePolicy, TimeGrid,
    DEFAULT_SAMPLES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    SingleQubit,
    Entangler,
    Algorithm,
}

/// What a gate is optimized towards. Local targets are textbook gates in the
/// measurement basis; `entangler` follows the tugboat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateTarget {
    /// `X90 (x) I`
    X90I,
    /// `I (x) X90`
    IX90,
    X90X90,
    Identity,
    Entangler,
}

impl GateTarget {
    /// The 4x4 target, or `None` for the moving entangler target.
    pub fn matrix(&self) -> Option<ComplexMatrix> {
        let id = ComplexMatrix::identity(2);
        let x90 = gates::x90();
        let pair = |a: ComplexMatrix, b: ComplexMatrix| tensor(&[a, b]).expect("2x2 factors");
        match self {
            GateTarget::X90I => Some(pair(x90, id)),
            GateTarget::IX90 => Some(pair(id, x90)),
            GateTarget::X90X90 => Some(pair(x90.clone(), x90)),
            GateTarget::Identity => Some(ComplexMatrix::identity(4)),
            GateTarget::Entangler => None,
        }
    }

    pub fn is_local(&self) -> bool {
        !matches!(self, GateTarget::Entangler)
    }
}

/// One gate of a goal: its own pulses and propagation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub name: String,
    pub target: GateTarget,
    /// ns
    pub duration: f64,
    /// `None` picks the step count from the initial pulses.
    pub n_steps: Option<usize>,
    pub n_samples: usize,
    pub pulses: Vec<ChannelPulse>,
}

impl GateSpec {
    pub fn new(name: &str, target: GateTarget, duration: f64, pulses: Vec<ChannelPulse>) -> Self {
        Self {
            name: name.to_string(),
            target,
            duration,
            n_steps: None,
            n_samples: DEFAULT_SAMPLES,
            pulses,
        }
    }

    fn pulse_mut(&mut self, channel: &str) -> Option<&mut ChannelPulse> {
        self.pulses.iter_mut().find(|p| p.channel == channel)
    }

    fn pulse(&self, channel: &str) -> Option<&ChannelPulse> {
        self.pulses.iter().find(|p| p.channel == channel)
    }
}

/// Which transform relates the product basis to the measurement basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dressing {
    /// Closed-form rotation of the one-excitation block (fixed coupling
    /// only); tunable-coupler devices fall back to `numeric`.
    #[default]
    ClosedForm,
    /// Computational block of the numerical eigenbasis, made unitary.
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub kind: GoalKind,
    pub gates: Vec<GateSpec>,
    pub leakage_weight: f64,
    pub weyl_map: WeylMap,
    pub tugboat: TugboatParams,
    pub frame: FramePolicy,
    pub dressing: Dressing,
}

impl GoalSpec {
    pub fn validate(&self, device: &Device) -> Result<()> {
        if !(self.leakage_weight >= 0.0) {
            return Err(Error::Configuration(format!(
                "leakage_weight must be >= 0, got {}",
                self.leakage_weight
            )));
        }
        let locals = self.gates.iter().filter(|g| g.target.is_local()).count();
        let entanglers = self.gates.len() - locals;
        let ok = match self.kind {
            GoalKind::SingleQubit => locals >= 1 && entanglers == 0,
            GoalKind::Entangler => locals == 0 && entanglers == 1,
            GoalKind::Algorithm => locals >= 1 && entanglers == 1,
        };
        if !ok {
            return Err(Error::Configuration(format!(
                "goal {:?} needs {}; got {locals} local and {entanglers} entangling gates",
                self.kind,
                match self.kind {
                    GoalKind::SingleQubit => "at least one local gate and no entangler",
                    GoalKind::Entangler => "exactly one entangling gate",
                    GoalKind::Algorithm => "local gates plus exactly one entangling gate",
                }
            )));
        }
        let mut names = std::collections::HashSet::new();
        for g in &self.gates {
            if !names.insert(&g.name) {
                return Err(Error::Configuration(format!("duplicate gate name `{}`", g.name)));
            }
            if g.name.contains('.') || g.name == "device" {
                return Err(Error::Configuration(format!("invalid gate name `{}`", g.name)));
            }
            let mut channels = std::collections::HashSet::new();
            for p in &g.pulses {
                device.channel(&p.channel).map_err(|_| {
                    Error::Configuration(format!("gate `{}`: unknown channel `{}`", g.name, p.channel))
                })?;
                if !channels.insert(&p.channel) {
                    return Err(Error::Configuration(format!(
                        "gate `{}` has two pulses on channel `{}`",
                        g.name, p.channel
                    )));
                }
                p.pulse.validate(g.duration).map_err(|e| {
                    Error::Configuration(format!("gate `{}`, channel `{}`: {e}", g.name, p.channel))
                })?;
            }
        }
        crate::entangler::weyl_from_b(self.tugboat.volume, self.weyl_map)?;
        Ok(())
    }
}

/// `1 - F(S G S^dagger, U)` averaged over the targets.
pub fn epsilon_single(u_projected: &ComplexMatrix, targets: &[ComplexMatrix], dressing: &ComplexMatrix) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no single-qubit targets".into()));
    }
    let mut total = 0.0;
    for g in targets {
        let dressed = &(dressing * g) * &dressing.dagger();
        total += 1.0 - overlap_fidelity(&dressed, u_projected)?;
    }
    Ok(total / targets.len() as f64)
}

/// `1 - F(V, U)` at the current tugboat parameters.
pub fn epsilon_entangler(u_projected: &ComplexMatrix, tugboat: &TugboatParams, map: WeylMap) -> Result<f64> {
    let v = tugboat_gate(tugboat, map)?;
    Ok(1.0 - overlap_fidelity(&v, u_projected)?)
}

pub fn combined_goal(kind: GoalKind, eps_single: f64, eps_entangler: f64, leakage: f64, leakage_weight: f64) -> f64 {
    let leak = leakage_weight * leakage;
    match kind {
        GoalKind::SingleQubit => eps_single + leak,
        GoalKind::Entangler => eps_entangler + leak,
        GoalKind::Algorithm => eps_single + eps_entangler + leak,
    }
}

/// Closest unitary (polar factor) to a square matrix.
pub fn nearest_unitary(m: &ComplexMatrix) -> ComplexMatrix {
    let svd = m.as_dmatrix().clone().svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    ComplexMatrix::from_dmatrix(u * v_t).expect("square")
}

/// 4x4 transform from the measurement basis to the product basis on the
/// computational block.
pub fn dressing_block(device: &Device, mode: Dressing, dressed: &DressedBasis) -> Result<ComplexMatrix> {
    match (device, mode) {
        (Device::FixedCoupling(fq), Dressing::ClosedForm) => dressed_transform(fq),
        _ => {
            let idx = device.layout().computational_indices();
            let block = ComplexMatrix::from_dmatrix(dressed.transform.select(&idx))?;
            Ok(nearest_unitary(&block))
        }
    }
}

/// Bounded, scaled optimization parameter addressed by a dotted name:
/// `device.<model parameter>` or `<gate>.<channel>.<field>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: f64,
}

/// Result of propagating one gate.
#[derive(Debug, Clone)]
pub struct GateOutcome {
    /// Computational block with free evolution removed, product basis.
    pub block: ComplexMatrix,
    /// The same block expressed in the measurement basis.
    pub measured: ComplexMatrix,
    pub dressing: ComplexMatrix,
    pub leakage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub eps_single: Option<f64>,
    pub eps_entangler: Option<f64>,
    pub leakage: f64,
    pub goal: f64,
}

type CacheKey = (usize, Vec<u64>);

/// Device, goal and parameter list with a per-gate propagation cache, so
/// that finite-difference probes only re-propagate the gates they touch.
pub struct Problem {
    device: Device,
    goal: GoalSpec,
    parameters: Vec<ParameterSpec>,
    cache: Mutex<HashMap<CacheKey, Arc<GateOutcome>>>,
}

const CACHE_LIMIT: usize = 512;

impl Problem {
    pub fn new(device: Device, mut goal: GoalSpec, parameters: Vec<ParameterSpec>) -> Result<Self> {
        device.validate()?;
        goal.validate(&device)?;
        for g in goal.gates.iter_mut() {
            // size the grid for the largest amplitude the bounds allow
            let mut widest = g.clone();
            for p in &parameters {
                let Ok((gate, channel, "amplitude")) = split_control_name(&p.name) else {
                    continue;
                };
                if gate != g.name {
                    continue;
                }
                if let Some(pulse) = widest.pulse_mut(channel) {
                    let a = pulse.pulse.amplitude.abs().max(p.lower.abs()).max(p.upper.abs());
                    pulse.pulse.amplitude = a;
                }
            }
            g.n_steps = Some(resolve_steps(&device, &widest, goal.frame)?);
            TimeGrid::new(g.duration, g.n_steps.unwrap_or(1), g.n_samples)?;
        }
        let problem = Self {
            device,
            goal,
            parameters,
            cache: Mutex::new(HashMap::new()),
        };
        problem.initial_vector()?;
        Ok(problem)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn goal(&self) -> &GoalSpec {
        &self.goal
    }

    pub fn parameters(&self) -> &[ParameterSpec] {
        &self.parameters
    }

    fn read(&self, name: &str) -> Result<f64> {
        if let Some(model) = name.strip_prefix("device.") {
            return self.device.get(model);
        }
        let (gate, channel, field) = split_control_name(name)?;
        if !OPTIMIZABLE_FIELDS.contains(&field) {
            return Err(Error::UnknownName(name.to_string()));
        }
        let g = self
            .goal
            .gates
            .iter()
            .find(|g| g.name == gate)
            .ok_or_else(|| Error::UnknownName(name.to_string()))?;
        let p = g.pulse(channel).ok_or_else(|| Error::UnknownName(name.to_string()))?;
        p.pulse.get(field)
    }

    /// Current values packed with the declared bounds and scales.
    pub fn initial_vector(&self) -> Result<ControlVector> {
        let entries = self
            .parameters
            .iter()
            .map(|p| {
                Ok(ParameterEntry {
                    name: p.name.clone(),
                    value: self.read(&p.name)?,
                    lo: p.lower,
                    hi: p.upper,
                    scale: p.scale,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ControlVector::pack(entries)
    }

    /// Device and gates with `values` (in parameter order) applied.
    pub fn instantiate(&self, values: &[f64]) -> Result<(Device, Vec<GateSpec>)> {
        if values.len() != self.parameters.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                self.parameters.len(),
                values.len()
            )));
        }
        let mut device = self.device;
        let mut gates = self.goal.gates.clone();
        for (p, &v) in self.parameters.iter().zip(values) {
            if let Some(model) = p.name.strip_prefix("device.") {
                device.set(model, v)?;
                continue;
            }
            let (gate, channel, field) = split_control_name(&p.name)?;
            let g = gates
                .iter_mut()
                .find(|g| g.name == gate)
                .ok_or_else(|| Error::UnknownName(p.name.clone()))?;
            let pulse = g.pulse_mut(channel).ok_or_else(|| Error::UnknownName(p.name.clone()))?;
            pulse.pulse.set(field, v)?;
        }
        Ok((device, gates))
    }

    fn gate_key(index: usize, device: &Device, gate: &GateSpec) -> CacheKey {
        let mut bits: Vec<u64> = device.model_vector().iter().map(|v| v.to_bits()).collect();
        for p in &gate.pulses {
            for f in OPTIMIZABLE_FIELDS {
                bits.push(p.pulse.get(f).expect("known field").to_bits());
            }
            bits.push(p.pulse.sigma.to_bits());
        }
        (index, bits)
    }

    /// Propagates (or fetches) every gate for `values`.
    pub fn outcomes(&self, values: &[f64]) -> Result<Vec<Arc<GateOutcome>>> {
        let (device, gates) = self.instantiate(values)?;
        device.validate()?;
        let mut out = Vec::with_capacity(gates.len());
        for (k, gate) in gates.iter().enumerate() {
            let key = Self::gate_key(k, &device, gate);
            let cached = self.cache.lock().expect("cache lock").get(&key).cloned();
            let outcome = match cached {
                Some(o) => o,
                None => {
                    let o = Arc::new(self.run_gate(&device, gate)?);
                    let mut cache = self.cache.lock().expect("cache lock");
                    if cache.len() >= CACHE_LIMIT {
                        cache.clear();
                    }
                    cache.insert(key, o.clone());
                    o
                }
            };
            out.push(outcome);
        }
        Ok(out)
    }

    pub fn run_gate(&self, device: &Device, gate: &GateSpec) -> Result<GateOutcome> {
        for p in &gate.pulses {
            p.pulse.validate(gate.duration)?;
        }
        let frame = Frame::for_policy(self.goal.frame, device, &gate.pulses);
        let grid = TimeGrid::new(gate.duration, gate.n_steps.unwrap_or(1), gate.n_samples)?;
        let result = propagate(device, &gate.pulses, &grid, &frame)?;
        let layout = device.layout();
        let block = interaction_block(&result.final_lab, gate.duration, &result.dressed, &layout)?;
        let dressing = dressing_block(device, self.goal.dressing, &result.dressed)?;
        let measured = &(&dressing.dagger() * &block) * &dressing;
        Ok(GateOutcome {
            block,
            measured,
            dressing,
            leakage: result.leakage,
        })
    }

    /// The entangling gate in the measurement basis, if the goal has one.
    pub fn entangler_gate(&self, values: &[f64]) -> Result<Option<ComplexMatrix>> {
        let outcomes = self.outcomes(values)?;
        Ok(self
            .goal
            .gates
            .iter()
            .zip(&outcomes)
            .find(|(g, _)| !g.target.is_local())
            .map(|(_, o)| o.measured.clone()))
    }

    pub fn evaluate(&self, values: &[f64], tugboat: &TugboatParams) -> Result<Evaluation> {
        let outcomes = self.outcomes(values)?;
        let mut local_errors = Vec::new();
        let mut eps_entangler = None;
        let mut leakage = 0.0;
        for (gate, o) in self.goal.gates.iter().zip(&outcomes) {
            leakage += o.leakage;
            match gate.target.matrix() {
                Some(target) => local_errors.push(epsilon_single(&o.block, &[target], &o.dressing)?),
                None => eps_entangler = Some(epsilon_entangler(&o.measured, tugboat, self.goal.weyl_map)?),
            }
        }
        let eps_single = if local_errors.is_empty() {
            None
        } else {
            Some(local_errors.iter().sum::<f64>() / local_errors.len() as f64)
        };
        let goal = combined_goal(
            self.goal.kind,
            eps_single.unwrap_or(0.0),
            eps_entangler.unwrap_or(0.0),
            leakage,
            self.goal.leakage_weight,
        );
        if !goal.is_finite() {
            return Err(Error::NumericDomain("goal is not finite".into()));
        }
        Ok(Evaluation {
            eps_single,
            eps_entangler,
            leakage,
            goal,
        })
    }
}

/// The gate's step count, or the required count with headroom when unset.
pub fn resolve_steps(device: &Device, gate: &GateSpec, policy: FramePolicy) -> Result<usize> {
    if let Some(n) = gate.n_steps {
        return Ok(n);
    }
    let frame = Frame::for_policy(policy, device, &gate.pulses);
    let n = required_steps(device, &gate.pulses, gate.duration, &frame)?;
    // headroom for amplitudes growing during optimization
    Ok((((n as f64) * 1.5).ceil() as usize).max(gate.n_samples))
}

/// Local invariants of the measured two-qubit block at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantSample {
    pub time: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    /// `d(g)`, zero inside the perfect-entangler volume.
    pub pe_functional: f64,
    pub weyl: [f64; 3],
    pub perfect_entangler: bool,
}

/// Invariants and `d(g)` of the (unitarized) measured block along a gate,
/// starting with the identity at `t = 0`.
pub fn invariant_trace(device: &Device, gate: &GateSpec, policy: FramePolicy, dressing: Dressing) -> Result<Vec<InvariantSample>> {
    let frame = Frame::for_policy(policy, device, &gate.pulses);
    let grid = TimeGrid::new(gate.duration, resolve_steps(device, gate, policy)?, gate.n_samples)?;
    let result = propagate(device, &gate.pulses, &grid, &frame)?;
    let layout = device.layout();
    let s = dressing_block(device, dressing, &result.dressed)?;
    let mut points = vec![(0.0, ComplexMatrix::identity(4))];
    for (u, &t) in result.samples.iter().zip(&result.sample_times) {
        let block = interaction_block(u, t, &result.dressed, &layout)?;
        points.push((t, &(&s.dagger() * &block) * &s));
    }
    points
        .into_iter()
        .map(|(time, m)| {
            let u = nearest_unitary(&m);
            let g = makhlin_invariants_unchecked(&u);
            let w = weyl_coordinates(&u)?;
            let inside = pe_membership(&w);
            Ok(InvariantSample {
                time,
                g1: g.g1,
                g2: g.g2,
                g3: g.g3,
                pe_functional: pe_functional(&g, inside),
                weyl: w.as_array(),
                perfect_entangler: inside,
            })
        })
        .collect()
}

fn split_control_name(name: &str) -> Result<(&str, &str, &str)> {
    let mut parts = name.splitn(3, '.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(g), Some(c), Some(f)) if !f.contains('.') => Ok((g, c, f)),
        _ => Err(Error::UnknownName(name.to_string())),
    }
}

/// `exp(i theta Z (x) I)`, used to probe phase sensitivity.
pub fn z_phase(theta: f64) -> ComplexMatrix {
    let plus = Complex64::from_polar(1.0, theta);
    ComplexMatrix::diagonal(&[plus, plus, plus.conj(), plus.conj()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::FlattopPulse;
    use crate::device::{FixedCouplingDevice, TransmonParams};
    use crate::entangler::{cartan_gate, WeylPoint};
    use crate::hilbert::random_unitary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    fn device(g: f64) -> Device {
        Device::FixedCoupling(FixedCouplingDevice {
            q1: TransmonParams::new(5.0 * TAU, -0.3 * TAU),
            q2: TransmonParams::new(5.5 * TAU, -0.3 * TAU),
            g,
        })
    }

    #[test]
    fn epsilon_single_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GateTarget::X90I.matrix().unwrap();
        let s = dressed_transform(match &device(0.3) {
            Device::FixedCoupling(f) => f,
            _ => unreachable!(),
        })
        .unwrap();
        let dressed = &(&s * &g) * &s.dagger();
        assert!(epsilon_single(&dressed, &[g.clone()], &s).unwrap().abs() < 1e-14);
        let id = ComplexMatrix::identity(4);
        assert!(epsilon_single(&g, &[g.clone()], &id).unwrap().abs() < 1e-14);

        // quadratic growth under a small Z phase: 1 - cos^2(theta) ~ theta^2
        for theta in [1e-3, 2e-3, 4e-3] {
            let u = &dressed * &z_phase(theta);
            let eps = epsilon_single(&u, &[g.clone()], &s).unwrap();
            let series = theta * theta - theta.powi(4) / 3.0;
            assert!((eps - series).abs() < 1e-12, "{eps} vs {series}");
        }

        // range and global-phase invariance for unitary inputs
        for _ in 0..20 {
            let u = random_unitary(4, &mut rng);
            let e = epsilon_single(&u, &[g.clone()], &s).unwrap();
            let e2 = epsilon_single(&u.scale(Complex64::from_polar(1.0, 0.7)), &[g.clone()], &s).unwrap();
            assert!((0.0..=1.0).contains(&e));
            assert!((e - e2).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_and_numeric_dressing_agree() {
        // weak coupling: closed form and numerical eigenbasis differ at O(chi^3)
        let d = Device::FixedCoupling(FixedCouplingDevice {
            q1: TransmonParams::new(5.0 * TAU, -0.3 * TAU).with_levels(2),
            q2: TransmonParams::new(5.5 * TAU, -0.3 * TAU).with_levels(2),
            g: 0.002 * TAU,
        });
        let basis = DressedBasis::of_device(&d);
        let closed = dressing_block(&d, Dressing::ClosedForm, &basis).unwrap();
        let numeric = dressing_block(&d, Dressing::Numeric, &basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GateTarget::X90I.matrix().unwrap();
        for _ in 0..10 {
            let u = random_unitary(4, &mut rng);
            let a = epsilon_single(&u, &[g.clone()], &closed).unwrap();
            let b = epsilon_single(&u, &[g.clone()], &numeric).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn epsilon_entangler_examples() {
        let p = TugboatParams::new([3.0 * PI / 8.0, PI / 8.0, 0.2]);
        let v = tugboat_gate(&p, WeylMap::Rescaled).unwrap();
        assert!(epsilon_entangler(&v, &p, WeylMap::Rescaled).unwrap().abs() < 1e-14);
        let cn = cartan_gate(&WeylPoint::CNOT);
        let e = epsilon_entangler(&cn, &p, WeylMap::Rescaled).unwrap();
        assert!(e > 0.0 && e <= 1.0);
    }

    #[test]
    fn combined_goal_rules() {
        let a = combined_goal(GoalKind::Algorithm, 0.004, 0.006, 0.0, 1.0);
        assert!((a - 0.010).abs() < 1e-15);
        let exact = 0.004 + 0.006 - 0.004 * 0.006;
        assert!((a - exact).abs() < 1e-4);
        assert!((exact - 0.009976).abs() < 1e-12);
        assert_eq!(combined_goal(GoalKind::SingleQubit, 0.1, 0.5, 0.2, 0.0), 0.1);
        assert_eq!(combined_goal(GoalKind::Entangler, 0.1, 0.5, 0.2, 0.5), 0.6);
        // monotone in each argument
        let base = combined_goal(GoalKind::Algorithm, 0.1, 0.1, 0.1, 1.0);
        assert!(combined_goal(GoalKind::Algorithm, 0.2, 0.1, 0.1, 1.0) > base);
        assert!(combined_goal(GoalKind::Algorithm, 0.1, 0.2, 0.1, 1.0) > base);
        assert!(combined_goal(GoalKind::Algorithm, 0.1, 0.1, 0.2, 1.0) > base);
    }

    fn x90_gate(name: &str, target: GateTarget, channel: &str, carrier: f64) -> GateSpec {
        // pulse area A * (t_down - t_up) = pi / 2
        let area = std::f64::consts::FRAC_PI_2;
        let pulse = FlattopPulse::new(area / 30.0, 10.0, 40.0, carrier);
        GateSpec::new(
            name,
            target,
            50.0,
            vec![ChannelPulse {
                channel: channel.into(),
                pulse,
            }],
        )
    }

    fn single_goal() -> GoalSpec {
        GoalSpec {
            kind: GoalKind::SingleQubit,
            gates: vec![
                x90_gate("x1", GateTarget::X90I, "q1", 5.0 * TAU),
                x90_gate("x2", GateTarget::IX90, "q2", 5.5 * TAU),
            ],
            leakage_weight: 1.0,
            weyl_map: WeylMap::Rescaled,
            tugboat: TugboatParams::new([3.0 * PI / 8.0, PI / 8.0, 0.2]),
            frame: FramePolicy::RotatingRwa,
            dressing: Dressing::ClosedForm,
        }
    }

    #[test]
    fn uncoupled_x90_pulses_are_accurate() {
        let params = vec![ParameterSpec {
            name: "x1.q1.amplitude".into(),
            lower: 0.0,
            upper: 0.2,
            scale: 0.01,
        }];
        let problem = Problem::new(device(0.0), single_goal(), params).unwrap();
        let x = problem.initial_vector().unwrap();
        let eval = problem.evaluate(x.values(), &problem.goal().tugboat).unwrap();
        // resonant square-ish pulse with the right area; residual from the
        // neighbouring level and ramp shape only
        assert!(eval.eps_single.unwrap() < 1e-2, "{eval:?}");
        assert!(eval.eps_entangler.is_none());
        let again = problem.evaluate(x.values(), &problem.goal().tugboat).unwrap();
        assert_eq!(again.goal.to_bits(), eval.goal.to_bits());
    }

    #[test]
    fn parameters_resolve_and_reject_unknown_names() {
        let params = vec![
            ParameterSpec {
                name: "device.g".into(),
                lower: 0.0,
                upper: 0.2 * TAU,
                scale: 0.01 * TAU,
            },
            ParameterSpec {
                name: "x2.q2.phase".into(),
                lower: -PI,
                upper: PI,
                scale: 1.0,
            },
        ];
        let problem = Problem::new(device(0.05 * TAU), single_goal(), params).unwrap();
        let cv = problem.initial_vector().unwrap();
        assert!((cv.values()[0] - 0.05 * TAU).abs() < 1e-15);
        let (d, gates) = problem.instantiate(&[0.01, 0.5]).unwrap();
        assert_eq!(d.get("g").unwrap(), 0.01);
        assert_eq!(gates[1].pulses[0].pulse.phase, 0.5);

        let bad = vec![ParameterSpec {
            name: "x3.q1.amplitude".into(),
            lower: 0.0,
            upper: 1.0,
            scale: 1.0,
        }];
        assert!(matches!(
            Problem::new(device(0.05 * TAU), single_goal(), bad),
            Err(Error::UnknownName(_))
        ));
        let sigma = vec![ParameterSpec {
            name: "x1.q1.sigma".into(),
            lower: 0.0,
            upper: 10.0,
            scale: 1.0,
        }];
        assert!(Problem::new(device(0.05 * TAU), single_goal(), sigma).is_err());
    }

    #[test]
    fn goal_validation() {
        let mut goal = single_goal();
        goal.kind = GoalKind::Entangler;
        assert!(goal.validate(&device(0.1)).is_err());
        let mut goal = single_goal();
        goal.gates[0].pulses[0].channel = "coupler".into();
        assert!(goal.validate(&device(0.1)).is_err());
        let mut goal = single_goal();
        goal.leakage_weight = -1.0;
        assert!(goal.validate(&device(0.1)).is_err());
    }

    #[test]
    fn nearest_unitary_of_scaled_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_unitary(4, &mut rng);
        let w = nearest_unitary(&u.scale_real(0.9));
        assert!(w.max_abs_diff(&u) < 1e-12);
    }
}
