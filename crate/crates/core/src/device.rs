//! Device models and Hamiltonian assembly.
//!
//! All frequencies are angular, in rad/ns; times are in ns.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{self, embed, ladder, ComplexMatrix, SubsystemLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmonParams {
    pub omega: f64,
    pub delta: f64,
    pub levels: usize,
}

impl TransmonParams {
    pub fn new(omega: f64, delta: f64) -> Self {
        Self {
            omega,
            delta,
            levels: 3,
        }
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(Error::Configuration(format!(
                "{name}.omega must be positive, got {}",
                self.omega
            )));
        }
        if !self.delta.is_finite() {
            return Err(Error::Configuration(format!("{name}.delta is not finite")));
        }
        if self.levels < 2 {
            return Err(Error::Configuration(format!(
                "{name}.levels must be >= 2, got {}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Two fixed-frequency Transmons with a static exchange coupling `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedCouplingDevice {
    pub q1: TransmonParams,
    pub q2: TransmonParams,
    pub g: f64,
}

/// Two fixed-frequency Transmons and a flux-tunable coupler. `coupler.omega`
/// is the coupler's idle (sweet-spot) frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunableCouplerDevice {
    pub q1: TransmonParams,
    pub q2: TransmonParams,
    pub coupler: TransmonParams,
    pub g1: f64,
    pub g2: f64,
    pub g12: f64,
}

impl TunableCouplerDevice {
    /// Places the coupler idle point so that `omega_c - omega_2 = omega_2 - omega_1`.
    pub fn with_idle_point(
        q1: TransmonParams,
        q2: TransmonParams,
        coupler_delta: f64,
        coupler_levels: usize,
        g1: f64,
        g2: f64,
        g12: f64,
    ) -> Self {
        let omega_c = 2.0 * q2.omega - q1.omega;
        Self {
            q1,
            q2,
            coupler: TransmonParams {
                omega: omega_c,
                delta: coupler_delta,
                levels: coupler_levels,
            },
            g1,
            g2,
            g12,
        }
    }

    /// The residual coupling that cancels the coupler-mediated interaction.
    pub fn sweet_spot_g12(&self) -> Result<f64> {
        let (j, _) = effective_interaction(self)?;
        Ok(-j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Charge drive `u(t) (a + a^dagger)`.
    Charge,
    /// Direct frequency offset `omega_c(t) a^dagger a`.
    Flux,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub name: &'static str,
    pub kind: ChannelKind,
    pub subsystem: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Device {
    FixedCoupling(FixedCouplingDevice),
    TunableCoupler(TunableCouplerDevice),
}

const FQ_PARAMS: [&str; 5] = ["q1.omega", "q2.omega", "q1.delta", "q2.delta", "g"];
const TC_PARAMS: [&str; 9] = [
    "q1.omega",
    "q2.omega",
    "q1.delta",
    "q2.delta",
    "coupler.omega",
    "coupler.delta",
    "g1",
    "g2",
    "g12",
];

impl From<FixedCouplingDevice> for Device {
    fn from(d: FixedCouplingDevice) -> Self {
        Device::FixedCoupling(d)
    }
}

impl From<TunableCouplerDevice> for Device {
    fn from(d: TunableCouplerDevice) -> Self {
        Device::TunableCoupler(d)
    }
}

impl Device {
    pub fn validate(&self) -> Result<()> {
        match self {
            Device::FixedCoupling(d) => {
                d.q1.validate("q1")?;
                d.q2.validate("q2")?;
                if !d.g.is_finite() {
                    return Err(Error::Configuration("g is not finite".into()));
                }
            }
            Device::TunableCoupler(d) => {
                d.q1.validate("q1")?;
                d.q2.validate("q2")?;
                d.coupler.validate("coupler")?;
                for (n, v) in [("g1", d.g1), ("g2", d.g2), ("g12", d.g12)] {
                    if !v.is_finite() {
                        return Err(Error::Configuration(format!("{n} is not finite")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn transmons(&self) -> Vec<TransmonParams> {
        match self {
            Device::FixedCoupling(d) => vec![d.q1, d.q2],
            Device::TunableCoupler(d) => vec![d.q1, d.q2, d.coupler],
        }
    }

    /// Exchange couplings as `(subsystem a, subsystem b, strength)`.
    pub fn couplings(&self) -> Vec<(usize, usize, f64)> {
        match self {
            Device::FixedCoupling(d) => vec![(0, 1, d.g)],
            Device::TunableCoupler(d) => vec![(0, 2, d.g1), (1, 2, d.g2), (0, 1, d.g12)],
        }
    }

    pub fn levels(&self) -> Vec<usize> {
        self.transmons().iter().map(|t| t.levels).collect()
    }

    /// Computational subspace: both qubits in `{0, 1}`, the coupler in `|0>`.
    pub fn layout(&self) -> SubsystemLayout {
        let levels = self.levels();
        let labels = match self {
            Device::FixedCoupling(_) => vec![vec![0, 1], vec![0, 1]],
            Device::TunableCoupler(_) => vec![vec![0, 1], vec![0, 1], vec![0]],
        };
        SubsystemLayout::with_labels(levels, labels).expect("device layout is valid")
    }

    pub fn channels(&self) -> Vec<Channel> {
        let mut out = vec![
            Channel {
                name: "q1",
                kind: ChannelKind::Charge,
                subsystem: 0,
            },
            Channel {
                name: "q2",
                kind: ChannelKind::Charge,
                subsystem: 1,
            },
        ];
        if let Device::TunableCoupler(_) = self {
            out.push(Channel {
                name: "coupler",
                kind: ChannelKind::Flux,
                subsystem: 2,
            });
        }
        out
    }

    pub fn channel(&self, name: &str) -> Result<Channel> {
        self.channels()
            .into_iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Configuration(format!("unknown channel `{name}`")))
    }

    pub fn parameter_names(&self) -> &'static [&'static str] {
        match self {
            Device::FixedCoupling(_) => &FQ_PARAMS,
            Device::TunableCoupler(_) => &TC_PARAMS,
        }
    }

    /// The model vector in `parameter_names` order.
    pub fn model_vector(&self) -> Vec<f64> {
        self.parameter_names()
            .iter()
            .map(|n| self.get(n).expect("listed parameter exists"))
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        let v = match (self, name) {
            (Device::FixedCoupling(d), "g") => d.g,
            (Device::TunableCoupler(d), "g1") => d.g1,
            (Device::TunableCoupler(d), "g2") => d.g2,
            (Device::TunableCoupler(d), "g12") => d.g12,
            (Device::TunableCoupler(d), "coupler.omega") => d.coupler.omega,
            (Device::TunableCoupler(d), "coupler.delta") => d.coupler.delta,
            (Device::FixedCoupling(FixedCouplingDevice { q1, .. }), "q1.omega")
            | (Device::TunableCoupler(TunableCouplerDevice { q1, .. }), "q1.omega") => q1.omega,
            (Device::FixedCoupling(FixedCouplingDevice { q1, .. }), "q1.delta")
            | (Device::TunableCoupler(TunableCouplerDevice { q1, .. }), "q1.delta") => q1.delta,
            (Device::FixedCoupling(FixedCouplingDevice { q2, .. }), "q2.omega")
            | (Device::TunableCoupler(TunableCouplerDevice { q2, .. }), "q2.omega") => q2.omega,
            (Device::FixedCoupling(FixedCouplingDevice { q2, .. }), "q2.delta")
            | (Device::TunableCoupler(TunableCouplerDevice { q2, .. }), "q2.delta") => q2.delta,
            _ => return Err(Error::UnknownName(format!("device.{name}"))),
        };
        Ok(v)
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot: &mut f64 = match (self, name) {
            (Device::FixedCoupling(d), "g") => &mut d.g,
            (Device::TunableCoupler(d), "g1") => &mut d.g1,
            (Device::TunableCoupler(d), "g2") => &mut d.g2,
            (Device::TunableCoupler(d), "g12") => &mut d.g12,
            (Device::TunableCoupler(d), "coupler.omega") => &mut d.coupler.omega,
            (Device::TunableCoupler(d), "coupler.delta") => &mut d.coupler.delta,
            (Device::FixedCoupling(FixedCouplingDevice { q1, .. }), "q1.omega")
            | (Device::TunableCoupler(TunableCouplerDevice { q1, .. }), "q1.omega") => {
                &mut q1.omega
            }
            (Device::FixedCoupling(FixedCouplingDevice { q1, .. }), "q1.delta")
            | (Device::TunableCoupler(TunableCouplerDevice { q1, .. }), "q1.delta") => {
                &mut q1.delta
            }
            (Device::FixedCoupling(FixedCouplingDevice { q2, .. }), "q2.omega")
            | (Device::TunableCoupler(TunableCouplerDevice { q2, .. }), "q2.omega") => {
                &mut q2.omega
            }
            (Device::FixedCoupling(FixedCouplingDevice { q2, .. }), "q2.delta")
            | (Device::TunableCoupler(TunableCouplerDevice { q2, .. }), "q2.delta") => {
                &mut q2.delta
            }
            _ => return Err(Error::UnknownName(format!("device.{name}"))),
        };
        *slot = value;
        Ok(())
    }

    /// Qubit detuning `omega_2 - omega_1`.
    pub fn detuning(&self) -> f64 {
        let t = self.transmons();
        t[1].omega - t[0].omega
    }

    pub fn operators(&self) -> Result<DeviceOperators> {
        DeviceOperators::new(&self.levels())
    }

    pub fn hamiltonian_static(&self) -> ComplexMatrix {
        let ops = self.operators().expect("validated levels");
        ops.static_hamiltonian(self, &vec![0.0; self.transmons().len()])
    }

    /// Lab-frame Hamiltonian for instantaneous channel values: charge channels
    /// add `u (a + a^dagger)`, the flux channel offsets the coupler frequency.
    pub fn hamiltonian_at(&self, drive_values: &[(&str, f64)]) -> Result<ComplexMatrix> {
        let ops = self.operators()?;
        let mut h = self.hamiltonian_static();
        for &(name, value) in drive_values {
            let ch = self.channel(name)?;
            let term = match ch.kind {
                ChannelKind::Charge => ops.quadrature_x(ch.subsystem).scale_real(value),
                ChannelKind::Flux => ops.number[ch.subsystem].scale_real(value),
            };
            h = &h + &term;
        }
        Ok(h)
    }
}

/// Ladder and number operators embedded in the full space. Depends only on
/// the level structure.
#[derive(Debug, Clone)]
pub struct DeviceOperators {
    pub layout_levels: Vec<usize>,
    pub lower: Vec<ComplexMatrix>,
    pub raise: Vec<ComplexMatrix>,
    pub number: Vec<ComplexMatrix>,
    pub dim: usize,
}

impl DeviceOperators {
    pub fn new(levels: &[usize]) -> Result<Self> {
        let mut lower = Vec::new();
        let mut raise = Vec::new();
        let mut number = Vec::new();
        for (i, &lv) in levels.iter().enumerate() {
            let a = embed(&ladder(lv)?, i, levels)?;
            let ad = a.dagger();
            number.push(&ad * &a);
            lower.push(a);
            raise.push(ad);
        }
        Ok(Self {
            layout_levels: levels.to_vec(),
            lower,
            raise,
            number,
            dim: levels.iter().product(),
        })
    }

    pub fn quadrature_x(&self, subsystem: usize) -> ComplexMatrix {
        &self.lower[subsystem] + &self.raise[subsystem]
    }

    /// Diagonal of the static part for frame references `frame` (one angular
    /// frequency per subsystem): `sum_i (omega_i - r_i) n_i + delta_i/2 (n_i - 1) n_i`.
    pub fn static_diagonal(&self, device: &Device, frame: &[f64]) -> Vec<f64> {
        let transmons = device.transmons();
        let layout = SubsystemLayout::new(self.layout_levels.clone())
            .unwrap_or_else(|_| unreachable!("levels already validated"));
        (0..self.dim)
            .map(|idx| {
                layout
                    .labels_of(idx)
                    .iter()
                    .zip(&transmons)
                    .zip(frame)
                    .map(|((&k, t), &r)| {
                        let k = k as f64;
                        (t.omega - r) * k + 0.5 * t.delta * (k - 1.0) * k
                    })
                    .sum()
            })
            .collect()
    }

    /// Exchange term `g (a^dagger b + a b^dagger)`.
    pub fn exchange(&self, a: usize, b: usize, g: f64) -> ComplexMatrix {
        let hop = &self.raise[a] * &self.lower[b];
        (&hop + &hop.dagger()).scale_real(g)
    }

    /// Static Hamiltonian in a frame rotating at `frame[i]` on subsystem `i`,
    /// with couplings between equal-reference subsystems only. Couplings
    /// between subsystems with different references are time dependent and
    /// handled by the propagator.
    pub fn static_hamiltonian(&self, device: &Device, frame: &[f64]) -> ComplexMatrix {
        let diag: Vec<Complex64> = self
            .static_diagonal(device, frame)
            .into_iter()
            .map(|e| Complex64::new(e, 0.0))
            .collect();
        let mut h = ComplexMatrix::diagonal(&diag);
        for (a, b, g) in device.couplings() {
            if frame[a] == frame[b] && g != 0.0 {
                h = &h + &self.exchange(a, b, g);
            }
        }
        h
    }
}

/// Closed-form dressing transform of the computational block (RWA, `b = 0`).
/// Columns are the dressed states `|00~>, |01~>, |10~>, |11~>` in the product
/// basis, rotated by `a = arctan(g / (omega_2 - omega_1))` in the
/// one-excitation block.
pub fn dressed_transform(device: &FixedCouplingDevice) -> Result<ComplexMatrix> {
    let detuning = device.q2.omega - device.q1.omega;
    if detuning == 0.0 {
        return Err(Error::DegenerateDetuning(device.q1.omega));
    }
    let a = (device.g / detuning).atan();
    let (s, c) = a.sin_cos();
    Ok(ComplexMatrix::from_real_rows(
        4,
        &[
            1.0, 0.0, 0.0, 0.0, //
            0.0, c, -s, 0.0, //
            0.0, s, c, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    ))
}

/// Numerically dressed eigenbasis of the static Hamiltonian.
#[derive(Debug, Clone)]
pub struct DressedBasis {
    /// Column `k` is the eigenstate assigned to product state `k`.
    pub transform: ComplexMatrix,
    /// Eigenenergy of column `k`.
    pub energies: Vec<f64>,
}

impl DressedBasis {
    /// Diagonalizes `h` and labels every eigenvector by its largest-overlap
    /// product state, fixing phases so that overlap is real and positive.
    pub fn from_hamiltonian(h: &ComplexMatrix) -> Self {
        let dim = h.dim();
        let (values, vectors) = hilbert::eigh(h);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(dim * dim);
        for v in 0..dim {
            for p in 0..dim {
                pairs.push((vectors.get(p, v).norm_sqr(), v, p));
            }
        }
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut vec_of_product = vec![usize::MAX; dim];
        let mut used = vec![false; dim];
        for (_, v, p) in pairs {
            if !used[v] && vec_of_product[p] == usize::MAX {
                used[v] = true;
                vec_of_product[p] = v;
            }
        }
        let mut transform = ComplexMatrix::zeros(dim);
        let mut energies = vec![0.0; dim];
        for p in 0..dim {
            let v = vec_of_product[p];
            let overlap = vectors.get(p, v);
            let phase = if overlap.norm() > 0.0 {
                overlap.conj() / overlap.norm()
            } else {
                Complex64::new(1.0, 0.0)
            };
            for r in 0..dim {
                transform.set(r, p, vectors.get(r, v) * phase);
            }
            energies[p] = values[v];
        }
        Self {
            transform,
            energies,
        }
    }

    pub fn of_device(device: &Device) -> Self {
        Self::from_hamiltonian(&device.hamiltonian_static())
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            transform: ComplexMatrix::identity(dim),
            energies: vec![0.0; dim],
        }
    }
}

/// Reduced coupling: `g / (omega_2 - omega_1)` for fixed coupling, the
/// effective `J' / (omega_2 - omega_1)` with a tunable coupler.
pub fn reduced_coupling(device: &Device) -> Result<f64> {
    let detuning = device.detuning();
    if detuning == 0.0 {
        return Err(Error::DegenerateDetuning(device.transmons()[0].omega));
    }
    let coupling = match device {
        Device::FixedCoupling(d) => d.g,
        Device::TunableCoupler(d) => effective_interaction(d)?.1,
    };
    Ok(coupling / detuning)
}

/// Coupler-mediated interaction `J` and total `J' = g12 + J`.
pub fn effective_interaction(device: &TunableCouplerDevice) -> Result<(f64, f64)> {
    let d1 = device.q1.omega - device.coupler.omega;
    let d2 = device.q2.omega - device.coupler.omega;
    if d1 == 0.0 || d2 == 0.0 {
        return Err(Error::Pole(format!(
            "qubit resonant with coupler (detunings {d1}, {d2} rad/ns)"
        )));
    }
    let j = 0.5 * device.g1 * device.g2 * (1.0 / d1 + 1.0 / d2);
    Ok((j, device.g12 + j))
}

/// Frequency of a flux-tunable element, flux in units of the flux quantum.
pub fn flux_frequency(phi: f64, omega0: f64, delta: f64) -> f64 {
    (omega0 - delta) * (std::f64::consts::PI * phi).cos().abs().sqrt() + delta
}
