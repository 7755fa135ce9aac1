//! Simple-pulse parametrization and the flat, bounded parameter vector seen
//! by the optimizer.

use std::collections::HashSet;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::device::ChannelKind;
use crate::error::{Error, Result};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Flattop Gaussian envelope on a carrier tone with DRAG quadrature.
///
/// `amplitude` and `carrier` are angular frequencies (rad/ns); times are ns;
/// `drag_lambda` weights the envelope derivative (ns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlattopPulse {
    pub amplitude: f64,
    pub t_up: f64,
    pub t_down: f64,
    pub sigma: f64,
    pub drag_lambda: f64,
    pub carrier: f64,
    pub phase: f64,
}

pub const DEFAULT_SIGMA_NS: f64 = 5.0;

/// Fields the optimizer may address. `sigma` is deliberately absent.
pub const OPTIMIZABLE_FIELDS: [&str; 6] =
    ["amplitude", "carrier", "phase", "t_up", "t_down", "drag_lambda"];

impl FlattopPulse {
    pub fn new(amplitude: f64, t_up: f64, t_down: f64, carrier: f64) -> Self {
        Self {
            amplitude,
            t_up,
            t_down,
            sigma: DEFAULT_SIGMA_NS,
            drag_lambda: 0.0,
            carrier,
            phase: 0.0,
        }
    }

    pub fn validate(&self, duration: f64) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Configuration(format!(
                "pulse sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(0.0 <= self.t_up && self.t_up < self.t_down && self.t_down <= duration) {
            return Err(Error::Configuration(format!(
                "pulse ramps must satisfy 0 <= t_up < t_down <= {duration}, got t_up={} t_down={}",
                self.t_up, self.t_down
            )));
        }
        let finite = [
            self.amplitude,
            self.drag_lambda,
            self.carrier,
            self.phase,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Configuration("pulse field is not finite".into()));
        }
        Ok(())
    }

    pub fn get(&self, field: &str) -> Result<f64> {
        Ok(match field {
            "amplitude" => self.amplitude,
            "carrier" => self.carrier,
            "phase" => self.phase,
            "t_up" => self.t_up,
            "t_down" => self.t_down,
            "drag_lambda" => self.drag_lambda,
            "sigma" => self.sigma,
            _ => return Err(Error::UnknownName(field.to_string())),
        })
    }

    /// Sets an optimizable field.
    pub fn set(&mut self, field: &str, value: f64) -> Result<()> {
        let slot = match field {
            "amplitude" => &mut self.amplitude,
            "carrier" => &mut self.carrier,
            "phase" => &mut self.phase,
            "t_up" => &mut self.t_up,
            "t_down" => &mut self.t_down,
            "drag_lambda" => &mut self.drag_lambda,
            _ => return Err(Error::UnknownName(field.to_string())),
        };
        *slot = value;
        Ok(())
    }

    /// Envelope `I(t) = (erf((t - t_up)/sigma) - erf((t - t_down)/sigma)) / 2`.
    pub fn envelope(&self, t: f64) -> f64 {
        0.5 * (libm::erf((t - self.t_up) / self.sigma) - libm::erf((t - self.t_down) / self.sigma))
    }

    /// Closed-form `dI/dt`.
    pub fn envelope_derivative(&self, t: f64) -> f64 {
        let up = (t - self.t_up) / self.sigma;
        let down = (t - self.t_down) / self.sigma;
        0.5 * FRAC_2_SQRT_PI / self.sigma * ((-up * up).exp() - (-down * down).exp())
    }

    /// DRAG quadrature `Q(t) = lambda dI/dt`.
    pub fn drag_quadrature(&self, t: f64) -> f64 {
        if self.drag_lambda == 0.0 {
            return 0.0;
        }
        self.drag_lambda * self.envelope_derivative(t)
    }

    /// Lab-frame control value. Charge channels give
    /// `A [I cos(w t + phi) + Q sin(w t + phi)]`; flux channels give the
    /// frequency offset `A I cos(w t + phi)`.
    pub fn drive_value(&self, t: f64, kind: ChannelKind) -> f64 {
        let arg = self.carrier * t + self.phase;
        match kind {
            ChannelKind::Charge => {
                self.amplitude
                    * (self.envelope(t) * arg.cos() + self.drag_quadrature(t) * arg.sin())
            }
            ChannelKind::Flux => self.amplitude * self.envelope(t) * arg.cos(),
        }
    }

    /// Co-rotating coefficient of `a^dagger` for a charge drive seen in a
    /// frame rotating at `reference`:
    /// `(A/2) (I + iQ) exp(-i((w - reference) t + phi))`.
    pub fn rotating_coefficient(&self, t: f64, reference: f64) -> Complex64 {
        let iq = Complex64::new(self.envelope(t), self.drag_quadrature(t));
        let phase = Complex64::from_polar(1.0, -((self.carrier - reference) * t + self.phase));
        iq * phase * (0.5 * self.amplitude)
    }
}

/// One entry of the optimization vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub scale: f64,
}

/// Flat bounded vector of named parameters. The optimizer works on the
/// scaled values `value / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    values: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    names: Vec<String>,
    scales: Vec<f64>,
}

impl ControlVector {
    pub fn pack(entries: Vec<ParameterEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Self {
            values: Vec::with_capacity(entries.len()),
            bounds: Vec::with_capacity(entries.len()),
            names: Vec::with_capacity(entries.len()),
            scales: Vec::with_capacity(entries.len()),
        };
        for e in entries {
            if !seen.insert(e.name.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate parameter `{}`", e.name)));
            }
            if !(e.lo <= e.hi) {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` has empty bounds [{}, {}]",
                    e.name, e.lo, e.hi
                )));
            }
            if !(e.scale > 0.0) || !e.scale.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` needs a positive scale",
                    e.name
                )));
            }
            check_bounds(&e.name, e.value, e.lo, e.hi)?;
            out.values.push(e.value);
            out.bounds.push((e.lo, e.hi));
            out.names.push(e.name);
            out.scales.push(e.scale);
        }
        Ok(out)
    }

    pub fn unpack(&self) -> Vec<(String, f64)> {
        self.names.iter().cloned().zip(self.values.iter().copied()).collect()
    }

    pub fn entries(&self) -> Vec<ParameterEntry> {
        (0..self.len())
            .map(|k| ParameterEntry {
                name: self.names[k].clone(),
                value: self.values[k],
                lo: self.bounds[k].0,
                hi: self.bounds[k].1,
                scale: self.scales[k],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let k = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))?;
        check_bounds(name, value, self.bounds[k].0, self.bounds[k].1)?;
        self.values[k] = value;
        Ok(())
    }

    pub fn scaled(&self) -> Vec<f64> {
        self.values.iter().zip(&self.scales).map(|(v, s)| v / s).collect()
    }

    pub fn scaled_bounds(&self) -> Vec<(f64, f64)> {
        self.bounds
            .iter()
            .zip(&self.scales)
            .map(|(&(lo, hi), s)| (lo / s, hi / s))
            .collect()
    }

    /// Values for a scaled point, without modifying `self`. Round-off at a
    /// bound is absorbed; anything further out is an error.
    pub fn values_from_scaled(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} scaled values, got {}",
                self.len(),
                x.len()
            )));
        }
        x.iter()
            .zip(&self.scales)
            .zip(&self.bounds)
            .zip(&self.names)
            .map(|(((&xi, &s), &(lo, hi)), name)| {
                let v = xi * s;
                let slack = 1e-12 * (hi - lo).abs().max(lo.abs()).max(hi.abs()).max(1e-300);
                if v < lo - slack || v > hi + slack || !v.is_finite() {
                    Err(Error::OutOfBounds {
                        name: name.clone(),
                        value: v,
                        lo,
                        hi,
                    })
                } else {
                    Ok(v.clamp(lo, hi))
                }
            })
            .collect()
    }

    pub fn set_scaled(&mut self, x: &[f64]) -> Result<()> {
        self.values = self.values_from_scaled(x)?;
        Ok(())
    }

    /// Converts a gradient with respect to the physical values into one with
    /// respect to the scaled values (chain rule: multiply by the scale).
    pub fn scale_gradient(&self, grad: &[f64]) -> Vec<f64> {
        grad.iter().zip(&self.scales).map(|(g, s)| g * s).collect()
    }
}

fn check_bounds(name: &str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if !(lo <= value && value <= hi) {
        return Err(Error::OutOfBounds {
            name: name.to_string(),
            value,
            lo,
            hi,
        });
    }
    Ok(())
}
