//! Langevin (BAOAB) and velocity Verlet dynamics over any force provider.
//!
//! Units: Å, fs, amu, eV, K. Velocities are stored in Å/fs.

mod providers;
mod trajectory;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use providers::{ForceProvider, ModelForces, RandomForces};
pub use trajectory::{Abort, Frame, Trajectory, TrajectorySidecar};

use crate::geometry::{build_neighbor_list, GeometryError, Structure, Vec3};
use crate::io::elements;

pub mod units {
    /// Boltzmann constant (eV/K).
    pub const BOLTZMANN: f64 = 8.617333262e-5;
    /// `sqrt(amu·Å²/eV)` expressed in fs.
    pub const TIME_UNIT_FS: f64 = 10.180505710759414;
    /// Converts eV/(Å·amu) to Å/fs².
    pub const ACCELERATION: f64 = 1.0 / (TIME_UNIT_FS * TIME_UNIT_FS);
    /// Converts amu·Å²/fs² to eV.
    pub const KINETIC: f64 = TIME_UNIT_FS * TIME_UNIT_FS;

    pub const AMU_KG: f64 = 1.660_539_066_60e-27;
    pub const ELECTRONVOLT_J: f64 = 1.602_176_634e-19;
    pub const BOLTZMANN_J: f64 = 1.380_649e-23;
}

#[derive(Debug, thiserror::Error)]
pub enum MdError {
    #[error("non-finite state at t = {time} fs")]
    NonFinite { time: f64 },
    #[error("atoms overlap: {0}")]
    Overlap(String),
    #[error("force provider failed: {0}")]
    Provider(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MdError>;

impl From<GeometryError> for MdError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::Overlap { .. } => MdError::Overlap(e.to_string()),
            other => MdError::Invalid(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdConfig {
    /// Timestep (fs).
    pub dt: f64,
    /// Thermostat target (K).
    pub temperature: f64,
    /// Langevin friction (1/fs); zero gives velocity Verlet.
    pub friction: f64,
    pub steps: usize,
    /// Record a frame every `stride` steps.
    pub stride: usize,
    pub seed: u64,
    /// Draw Maxwell–Boltzmann velocities at `temperature`; otherwise start
    /// from rest.
    pub init_velocities: bool,
    /// Abort when the kinetic temperature exceeds this (K).
    pub max_temperature: f64,
    /// Abort when any pair comes closer than this (Å).
    pub min_distance: f64,
}

impl Default for MdConfig {
    fn default() -> Self {
        MdConfig {
            dt: 1.0,
            temperature: 120.0,
            friction: 0.01,
            steps: 50_000,
            stride: 10,
            seed: 0,
            init_velocities: true,
            max_temperature: 2000.0,
            min_distance: 0.7,
        }
    }
}

impl MdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MdError::Invalid(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.friction >= 0.0 && self.friction.is_finite()) {
            return bad(format!("friction must be ≥ 0, got {}", self.friction));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be ≥ 0, got {}", self.temperature));
        }
        if self.stride == 0 {
            return bad("stride must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Gaussian velocities with per-component variance `k_B T / m` and the
/// centre-of-mass drift removed.
pub fn maxwell_boltzmann_init(masses: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut v: Vec<Vec3> = masses
        .iter()
        .map(|&m| {
            let s = (units::BOLTZMANN * temperature / m).sqrt() / units::TIME_UNIT_FS;
            Vec3::new(
                rng.sample::<f64, _>(StandardNormal) * s,
                rng.sample::<f64, _>(StandardNormal) * s,
                rng.sample::<f64, _>(StandardNormal) * s,
            )
        })
        .collect();
    remove_drift(&mut v, masses);
    remove_drift(&mut v, masses);
    v
}

fn remove_drift(v: &mut [Vec3], masses: &[f64]) {
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return;
    }
    let p: Vec3 = v.iter().zip(masses).map(|(v, &m)| v * m).sum();
    let drift = p / total;
    for x in v.iter_mut() {
        *x -= drift;
    }
}

pub fn masses_of(s: &Structure) -> Result<Vec<f64>> {
    s.atomic_numbers
        .iter()
        .map(|&z| elements::mass(z).ok_or_else(|| MdError::Invalid(format!("no mass for Z = {z}"))))
        .collect()
}

/// Kinetic energy (eV).
pub fn kinetic_energy(v: &[Vec3], masses: &[f64]) -> f64 {
    0.5 * units::KINETIC
        * v.iter()
            .zip(masses)
            .map(|(v, &m)| m * v.norm_squared())
            .sum::<f64>()
}

/// Instantaneous kinetic temperature with `3M` degrees of freedom.
pub fn kinetic_temperature(v: &[Vec3], masses: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    2.0 * kinetic_energy(v, masses) / (3.0 * v.len() as f64 * units::BOLTZMANN)
}

/// Dynamical state. Positions live in `structure`, wrapped into the cell on
/// periodic axes; `images` counts the lattice shifts removed by wrapping.
#[derive(Debug, Clone)]
pub struct MdState {
    pub structure: Structure,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub forces: Vec<Vec3>,
    /// Potential energy reported by the provider (eV, NaN if unavailable).
    pub potential: f64,
    /// fs
    pub time: f64,
    pub images: Vec<[i32; 3]>,
}

impl MdState {
    pub fn new(
        initial: &Structure,
        masses: Vec<f64>,
        velocities: Vec<Vec3>,
        provider: &mut dyn ForceProvider,
    ) -> Result<Self> {
        let m = initial.len();
        if masses.len() != m || velocities.len() != m {
            return Err(MdError::Invalid("masses/velocities length mismatch".into()));
        }
        if masses.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(MdError::Invalid("masses must be positive".into()));
        }
        let mut structure = initial.clone();
        structure.energy = None;
        structure.forces = None;
        structure.arrays.clear();
        let images = structure.wrap();
        let (potential, forces) = provider.evaluate(&structure)?;
        let state = MdState {
            structure,
            velocities,
            masses,
            forces,
            potential,
            time: 0.0,
            images,
        };
        state.check_finite()?;
        Ok(state)
    }

    pub fn kinetic_energy(&self) -> f64 {
        kinetic_energy(&self.velocities, &self.masses)
    }

    pub fn temperature(&self) -> f64 {
        kinetic_temperature(&self.velocities, &self.masses)
    }

    fn check_finite(&self) -> Result<()> {
        let finite = |v: &[Vec3]| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
        if finite(&self.structure.positions) && finite(&self.velocities) && finite(&self.forces) {
            Ok(())
        } else {
            Err(MdError::NonFinite { time: self.time })
        }
    }

    fn kick(&mut self, h: f64) {
        for ((v, f), &m) in self.velocities.iter_mut().zip(&self.forces).zip(&self.masses) {
            *v += f * (h * units::ACCELERATION / m);
        }
    }

    fn drift(&mut self, h: f64) {
        for (x, v) in self.structure.positions.iter_mut().zip(&self.velocities) {
            *x += v * h;
        }
    }
}

/// One BAOAB step: half kick, half drift, Ornstein–Uhlenbeck velocity
/// update, half drift, force evaluation, half kick. With zero friction this
/// is velocity Verlet.
pub fn langevin_step(
    state: &mut MdState,
    provider: &mut dyn ForceProvider,
    config: &MdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dt = config.dt;
    state.kick(0.5 * dt);
    state.drift(0.5 * dt);
    if config.friction > 0.0 {
        let c1 = (-config.friction * dt).exp();
        let kt = units::BOLTZMANN * config.temperature;
        for (v, &m) in state.velocities.iter_mut().zip(&state.masses) {
            *v *= c1;
            if kt > 0.0 {
                let s = (kt * (1.0 - c1 * c1) / m).sqrt() / units::TIME_UNIT_FS;
                *v += Vec3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ) * s;
            }
        }
    }
    state.drift(0.5 * dt);
    state.time += dt;
    let finite = state
        .structure
        .positions
        .iter()
        .all(|x| x.iter().all(|c| c.is_finite()));
    if !finite {
        return Err(MdError::NonFinite { time: state.time });
    }
    for (img, s) in state.images.iter_mut().zip(state.structure.wrap()) {
        for k in 0..3 {
            img[k] += s[k];
        }
    }
    let (potential, forces) = provider.evaluate(&state.structure)?;
    state.potential = potential;
    state.forces = forces;
    state.kick(0.5 * dt);
    state.check_finite()
}

/// Smallest interatomic distance, or `None` when no pair is within `limit`.
pub fn min_pair_distance(s: &Structure, limit: f64) -> std::result::Result<Option<f64>, GeometryError> {
    let g = build_neighbor_list(s, limit, 1)?;
    Ok(g.edge_len.iter().copied().min_by(f64::total_cmp))
}

/// Runs dynamics and records frames every `stride` steps. Instabilities
/// (non-finite state, overlapping atoms, runaway temperature) end the run
/// early and are reported in [`Trajectory::abort`].
pub fn run_simulation(
    initial: &Structure,
    provider: &mut dyn ForceProvider,
    config: &MdConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let masses = masses_of(initial)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let velocities = if config.init_velocities {
        maxwell_boltzmann_init(&masses, config.temperature, &mut rng)
    } else {
        vec![Vec3::zeros(); initial.len()]
    };
    let mut state = MdState::new(initial, masses, velocities, provider)?;
    let mut traj = Trajectory::start(&state, config, provider.name());
    for step in 1..=config.steps {
        let outcome = langevin_step(&mut state, provider, config, &mut rng);
        let reason = match outcome {
            Ok(()) => monitor(&state, config),
            Err(e @ (MdError::NonFinite { .. } | MdError::Overlap(_))) => Some(e.to_string()),
            Err(e) => return Err(e),
        };
        if let Some(reason) = reason {
            traj.abort = Some(Abort {
                time: state.time,
                reason,
            });
            break;
        }
        traj.steps_completed = step;
        if step % config.stride == 0 {
            traj.push(&state);
        }
    }
    Ok(traj)
}

fn monitor(state: &MdState, config: &MdConfig) -> Option<String> {
    let t = state.temperature();
    if t > config.max_temperature {
        return Some(format!("temperature {t:.1} K exceeds {} K", config.max_temperature));
    }
    if config.min_distance > 0.0 {
        match min_pair_distance(&state.structure, config.min_distance) {
            Ok(Some(d)) => {
                return Some(format!("pair distance {d:.3} Å below {} Å", config.min_distance))
            }
            Ok(None) => {}
            Err(e) => return Some(e.to_string()),
        }
    }
    None
}
