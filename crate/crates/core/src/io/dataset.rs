use serde::{Deserialize, Serialize};

use super::{IoError, OraclePotential, Result};
use crate::geometry::{Cell, Structure, Vec3};
use crate::md::{run_simulation, MdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_samples: usize,
    /// fcc conventional cells along each axis (4 atoms each).
    pub replicas: [usize; 3],
    /// Å
    pub lattice_constant: f64,
    pub species: u32,
    /// K
    pub temperature_min: f64,
    pub temperature_max: f64,
    /// Independent Langevin runs at temperatures evenly spread over the range.
    pub chains: usize,
    /// K; each chain first melts the crystal at this temperature.
    pub melt_temperature: f64,
    pub melt_steps: usize,
    pub equilibration_steps: usize,
    /// Steps between stored frames.
    pub sample_interval: usize,
    pub dt: f64,
    pub friction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_samples: 1000,
            replicas: [2, 2, 2],
            lattice_constant: 5.74,
            species: 18,
            temperature_min: 100.0,
            temperature_max: 200.0,
            chains: 10,
            melt_temperature: 300.0,
            melt_steps: 2000,
            equilibration_steps: 2000,
            sample_interval: 100,
            dt: 1.0,
            friction: 0.01,
            seed: 0,
        }
    }
}

/// Provenance record written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub potential: OraclePotential,
    pub config: DatasetConfig,
    pub n_samples: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Face-centred cubic crystal of a single species.
pub fn fcc_lattice(a: f64, replicas: [usize; 3], z: u32) -> Result<Structure> {
    let basis = [
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.5, 0.5, 0.0),
        Vec3::new(0.5, 0.0, 0.5),
        Vec3::new(0.0, 0.5, 0.5),
    ];
    let mut pos = Vec::new();
    for i in 0..replicas[0] {
        for j in 0..replicas[1] {
            for k in 0..replicas[2] {
                for b in &basis {
                    pos.push((Vec3::new(i as f64, j as f64, k as f64) + b) * a);
                }
            }
        }
    }
    let cell = Cell::from_rows([
        [a * replicas[0] as f64, 0.0, 0.0],
        [0.0, a * replicas[1] as f64, 0.0],
        [0.0, 0.0, a * replicas[2] as f64],
    ])?;
    Ok(Structure::periodic(vec![z; pos.len()], pos, cell)?)
}

/// Labeled frames sampled from oracle-driven Langevin runs. Each chain
/// melts the fcc crystal, equilibrates at its own temperature, then stores
/// one frame every `sample_interval` steps. Deterministic for a fixed seed.
pub fn generate_dataset(pot: &OraclePotential, cfg: &DatasetConfig) -> Result<Vec<Structure>> {
    pot.validate()?;
    if cfg.n_samples == 0 {
        return Ok(Vec::new());
    }
    if cfg.chains == 0 || cfg.sample_interval == 0 {
        return Err(IoError::Invalid("chains and sample_interval must be ≥ 1".into()));
    }
    if cfg.temperature_min > cfg.temperature_max || cfg.temperature_min < 0.0 {
        return Err(IoError::Invalid("invalid temperature range".into()));
    }
    let start = fcc_lattice(cfg.lattice_constant, cfg.replicas, cfg.species)?;
    let chains = cfg.chains.min(cfg.n_samples);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for c in 0..chains {
        let n = cfg.n_samples / chains + usize::from(c < cfg.n_samples % chains);
        let t = if chains == 1 {
            0.5 * (cfg.temperature_min + cfg.temperature_max)
        } else {
            cfg.temperature_min
                + (cfg.temperature_max - cfg.temperature_min) * c as f64 / (chains - 1) as f64
        };
        let md = MdConfig {
            dt: cfg.dt,
            temperature: t,
            friction: cfg.friction,
            steps: cfg.equilibration_steps + n * cfg.sample_interval,
            stride: cfg.sample_interval,
            seed: crate::derive_seed(cfg.seed, &format!("dataset-chain-{c}")),
            ..MdConfig::default()
        };
        let mut oracle = pot.clone();
        let initial = if cfg.melt_steps > 0 {
            let melt = MdConfig {
                temperature: cfg.melt_temperature,
                steps: cfg.melt_steps,
                stride: cfg.melt_steps,
                seed: crate::derive_seed(cfg.seed, &format!("dataset-melt-{c}")),
                ..md
            };
            let t = run_simulation(&start, &mut oracle, &melt).map_err(|e| IoError::Md(e.to_string()))?;
            if let Some(a) = &t.abort {
                return Err(IoError::Md(format!("melting chain {c} aborted: {}", a.reason)));
            }
            t.structure(t.len() - 1).map_err(|e| IoError::Md(e.to_string()))?
        } else {
            start.clone()
        };
        let traj = run_simulation(&initial, &mut oracle, &md).map_err(|e| IoError::Md(e.to_string()))?;
        if let Some(a) = &traj.abort {
            return Err(IoError::Md(format!("chain {c} aborted: {}", a.reason)));
        }
        let frames: Vec<usize> = (0..traj.len())
            .filter(|&k| traj.frames[k].time > cfg.equilibration_steps as f64 * cfg.dt)
            .take(n)
            .collect();
        for k in frames {
            let s = traj.structure(k).map_err(|e| IoError::Md(e.to_string()))?;
            out.push(pot.label(&s)?);
        }
    }
    Ok(out)
}
