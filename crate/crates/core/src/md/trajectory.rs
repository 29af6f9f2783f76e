use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{kinetic_energy, MdConfig, MdError, MdState, Result};
use crate::geometry::{AtomArray, Cell, Structure, Vec3};
use crate::io::{parse_extxyz, write_extxyz};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// fs
    pub time: f64,
    /// Wrapped into the cell on periodic axes.
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub images: Vec<[i32; 3]>,
    pub potential_energy: f64,
    pub kinetic_energy: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    /// fs
    pub time: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub atomic_numbers: Vec<u32>,
    pub masses: Vec<f64>,
    pub cell: Option<Cell>,
    pub pbc: [bool; 3],
    pub dt: f64,
    pub stride: usize,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub provider: String,
    pub frames: Vec<Frame>,
    pub abort: Option<Abort>,
}

/// Scalar time series and run metadata stored next to the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub provider: String,
    pub dt: f64,
    pub stride: usize,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub simulated_time: f64,
    pub masses: Vec<f64>,
    pub abort: Option<Abort>,
    pub time: Vec<f64>,
    pub potential_energy: Vec<Option<f64>>,
    pub kinetic_energy: Vec<f64>,
    pub temperature: Vec<f64>,
}

fn frame_of(state: &MdState) -> Frame {
    Frame {
        time: state.time,
        positions: state.structure.positions.clone(),
        velocities: state.velocities.clone(),
        images: state.images.clone(),
        potential_energy: state.potential,
        kinetic_energy: state.kinetic_energy(),
        temperature: state.temperature(),
    }
}

impl Trajectory {
    pub(super) fn start(state: &MdState, config: &MdConfig, provider: &str) -> Self {
        Trajectory {
            atomic_numbers: state.structure.atomic_numbers.clone(),
            masses: state.masses.clone(),
            cell: state.structure.cell.clone(),
            pbc: state.structure.pbc,
            dt: config.dt,
            stride: config.stride,
            steps_requested: config.steps,
            steps_completed: 0,
            provider: provider.to_string(),
            frames: vec![frame_of(state)],
            abort: None,
        }
    }

    pub(super) fn push(&mut self, state: &MdState) {
        self.frames.push(frame_of(state));
    }

    /// Builds a trajectory directly from frames (used for synthetic data).
    pub fn from_frames(
        atomic_numbers: Vec<u32>,
        masses: Vec<f64>,
        cell: Option<Cell>,
        pbc: [bool; 3],
        dt: f64,
        stride: usize,
        frames: Vec<Frame>,
    ) -> Self {
        let steps = frames.len().saturating_sub(1) * stride;
        Trajectory {
            atomic_numbers,
            masses,
            cell,
            pbc,
            dt,
            stride,
            steps_requested: steps,
            steps_completed: steps,
            provider: "external".into(),
            frames,
            abort: None,
        }
    }

    /// Time between recorded frames (fs).
    pub fn frame_interval(&self) -> f64 {
        self.dt * self.stride as f64
    }

    /// Length of the run that completed without instability (fs).
    pub fn simulated_time(&self) -> f64 {
        match &self.abort {
            Some(a) => a.time,
            None => self.steps_completed as f64 * self.dt,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Positions with the wrapping shifts undone.
    pub fn unwrapped(&self, k: usize) -> Vec<Vec3> {
        let f = &self.frames[k];
        match &self.cell {
            Some(c) => f
                .positions
                .iter()
                .zip(&f.images)
                .map(|(p, s)| p + c.shift_vector(*s))
                .collect(),
            None => f.positions.clone(),
        }
    }

    pub fn structure(&self, k: usize) -> Result<Structure> {
        let f = &self.frames[k];
        Structure::new(
            self.atomic_numbers.clone(),
            f.positions.clone(),
            self.cell.clone(),
            self.pbc,
        )
        .map_err(MdError::from)
    }

    /// Frames restricted to `time ∈ [start, end)` (fs).
    pub fn window(&self, start: f64, end: f64) -> Trajectory {
        let mut t = self.clone();
        t.frames.retain(|f| f.time >= start && f.time < end);
        t
    }

    fn frame_structure(&self, k: usize) -> Result<Structure> {
        let f = &self.frames[k];
        let mut s = self.structure(k)?;
        let fmt = |v: f64| format!("{v:.16e}");
        s.arrays.push(AtomArray {
            name: "vel".into(),
            kind: 'R',
            columns: 3,
            values: f
                .velocities
                .iter()
                .flat_map(|v| v.iter().map(|&c| fmt(c)).collect::<Vec<_>>())
                .collect(),
        });
        s.arrays.push(AtomArray {
            name: "images".into(),
            kind: 'I',
            columns: 3,
            values: f
                .images
                .iter()
                .flat_map(|i| i.iter().map(|c| c.to_string()).collect::<Vec<_>>())
                .collect(),
        });
        s.info.push(("time".into(), fmt(f.time)));
        if f.potential_energy.is_finite() {
            s.info.push(("potential_energy".into(), fmt(f.potential_energy)));
        }
        Ok(s)
    }

    pub fn to_extxyz(&self) -> Result<String> {
        let frames = (0..self.len())
            .map(|k| self.frame_structure(k))
            .collect::<Result<Vec<_>>>()?;
        write_extxyz(&frames).map_err(|e| MdError::Invalid(e.to_string()))
    }

    pub fn sidecar(&self) -> TrajectorySidecar {
        TrajectorySidecar {
            provider: self.provider.clone(),
            dt: self.dt,
            stride: self.stride,
            steps_requested: self.steps_requested,
            steps_completed: self.steps_completed,
            simulated_time: self.simulated_time(),
            masses: self.masses.clone(),
            abort: self.abort.clone(),
            time: self.frames.iter().map(|f| f.time).collect(),
            potential_energy: self
                .frames
                .iter()
                .map(|f| f.potential_energy.is_finite().then_some(f.potential_energy))
                .collect(),
            kinetic_energy: self.frames.iter().map(|f| f.kinetic_energy).collect(),
            temperature: self.frames.iter().map(|f| f.temperature).collect(),
        }
    }

    /// Writes `<stem>.extxyz` and `<stem>.json`.
    pub fn save(&self, extxyz: &Path, sidecar: &Path) -> Result<()> {
        let io = |p: &Path, e: std::io::Error| MdError::Invalid(format!("{}: {e}", p.display()));
        std::fs::write(extxyz, self.to_extxyz()?).map_err(|e| io(extxyz, e))?;
        let json = serde_json::to_string_pretty(&self.sidecar())
            .map_err(|e| MdError::Invalid(e.to_string()))?;
        std::fs::write(sidecar, json).map_err(|e| io(sidecar, e))
    }

    pub fn load(extxyz: &Path, sidecar: &Path) -> Result<Self> {
        let io = |p: &Path, e: std::io::Error| MdError::Invalid(format!("{}: {e}", p.display()));
        let text = std::fs::read_to_string(extxyz).map_err(|e| io(extxyz, e))?;
        let meta: TrajectorySidecar = serde_json::from_str(
            &std::fs::read_to_string(sidecar).map_err(|e| io(sidecar, e))?,
        )
        .map_err(|e| MdError::Invalid(format!("{}: {e}", sidecar.display())))?;
        Self::from_parts(&text, meta)
    }

    pub fn from_parts(extxyz: &str, meta: TrajectorySidecar) -> Result<Self> {
        let structures = parse_extxyz(extxyz).map_err(|e| MdError::Invalid(e.to_string()))?;
        let first = structures
            .first()
            .ok_or_else(|| MdError::Invalid("trajectory has no frames".into()))?;
        if meta.time.len() != structures.len() {
            return Err(MdError::Invalid(format!(
                "{} frames but {} sidecar entries",
                structures.len(),
                meta.time.len()
            )));
        }
        let mut frames = Vec::with_capacity(structures.len());
        for (k, s) in structures.iter().enumerate() {
            if s.atomic_numbers != first.atomic_numbers {
                return Err(MdError::Invalid(format!("frame {k} changes composition")));
            }
            let array = |name: &str| s.arrays.iter().find(|a| a.name == name);
            let velocities = match array("vel") {
                Some(a) => parse_rows(a, |t| t.parse::<f64>().ok())?
                    .into_iter()
                    .map(|r| Vec3::new(r[0], r[1], r[2]))
                    .collect(),
                None => vec![Vec3::zeros(); s.len()],
            };
            let images = match array("images") {
                Some(a) => parse_rows(a, |t| t.parse::<i32>().ok())?,
                None => vec![[0; 3]; s.len()],
            };
            frames.push(Frame {
                time: meta.time[k],
                positions: s.positions.clone(),
                kinetic_energy: kinetic_energy(&velocities, &meta.masses),
                velocities,
                images,
                potential_energy: meta.potential_energy[k].unwrap_or(f64::NAN),
                temperature: meta.temperature[k],
            });
        }
        Ok(Trajectory {
            atomic_numbers: first.atomic_numbers.clone(),
            masses: meta.masses,
            cell: first.cell.clone(),
            pbc: first.pbc,
            dt: meta.dt,
            stride: meta.stride,
            steps_requested: meta.steps_requested,
            steps_completed: meta.steps_completed,
            provider: meta.provider,
            frames,
            abort: meta.abort,
        })
    }
}

fn parse_rows<V: Copy + Default>(
    a: &AtomArray,
    parse: impl Fn(&str) -> Option<V>,
) -> Result<Vec<[V; 3]>> {
    if a.columns != 3 {
        return Err(MdError::Invalid(format!("array {} must have 3 columns", a.name)));
    }
    a.values
        .chunks(3)
        .map(|c| {
            let mut out = [V::default(); 3];
            for (o, t) in out.iter_mut().zip(c) {
                *o = parse(t).ok_or_else(|| MdError::Invalid(format!("bad value {t:?} in {}", a.name)))?;
            }
            Ok(out)
        })
        .collect()
}
