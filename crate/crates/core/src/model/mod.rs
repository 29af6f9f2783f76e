//! LEIGNN: an equivariant message-passing network with a gated node update
//! and a graph-level global state, predicting energies and direct forces.

mod batch;
pub mod layers;
mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use batch::GraphBatch;
pub use params::{GlobalParams, LayerParams, Mlp, ModelParams, ReadoutParams, UpdateParams};

use crate::geometry::{GeometryError, Structure, Vec3};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use layers::{EdgeInputs, GlobalState};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("atomic number {z} outside the element vocabulary (1..={vocab})")]
    UnknownElement { z: u32, vocab: u32 },
    #[error("non-finite model output")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Feature width.
    #[serde(rename = "F")]
    pub features: usize,
    /// Number of interaction layers.
    #[serde(rename = "T")]
    pub layers: usize,
    /// Radial cutoff (Å).
    #[serde(rename = "D")]
    pub cutoff: f64,
    /// Neighbor cap per atom.
    #[serde(rename = "N")]
    pub max_neighbors: usize,
    /// Number of radial basis functions.
    #[serde(rename = "K")]
    pub num_rbf: usize,
    pub use_global: bool,
    pub use_nmu: bool,
    /// Multiply the radial basis by a smooth cosine cutoff.
    pub envelope: bool,
    /// Largest supported atomic number.
    pub element_vocab: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            features: 128,
            layers: 4,
            cutoff: 6.0,
            max_neighbors: 30,
            num_rbf: 20,
            use_global: true,
            use_nmu: true,
            envelope: true,
            element_vocab: 100,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidHyperparams(m.into()));
        if self.features == 0 {
            return bad("F must be ≥ 1");
        }
        if self.num_rbf < 2 {
            return bad("K must be ≥ 2");
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return bad("D must be positive");
        }
        if self.max_neighbors == 0 {
            return bad("N must be ≥ 1");
        }
        if self.element_vocab == 0 {
            return bad("element_vocab must be ≥ 1");
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let f = self.features;
        let k = self.num_rbf;
        let mlp = |i: usize, h: usize, o: usize| h * i + h + o * h + o;
        let message = 3 * f * f + 3 * f * k;
        let update = if self.use_nmu {
            3 * (2 * f * f) + 2 * f * f
        } else {
            2 * f * f + mlp(2 * f, f, 3 * f)
        };
        let global = if self.use_global {
            2 * f * f + 2 * mlp(2 * f, f, f)
        } else {
            0
        };
        let init = if self.use_global { f } else { 0 };
        let readout = mlp(f, f, 1) + f;
        self.element_vocab as usize * f + init + self.layers * (message + update + global) + readout
    }
}

/// Affine map between the network's normalized outputs and physical units.
///
/// Atom energy `e = raw · energy_scale + species_energy[z]`,
/// force `F = raw · force_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub species_energy: BTreeMap<u32, f64>,
    pub energy_scale: f64,
    pub force_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            species_energy: BTreeMap::new(),
            energy_scale: 1.0,
            force_scale: 1.0,
        }
    }
}

impl Normalization {
    pub fn reference(&self, z: u32) -> f64 {
        self.species_energy.get(&z).copied().unwrap_or(0.0)
    }

    /// Sum of species reference energies of a structure.
    pub fn baseline(&self, z: &[u32]) -> f64 {
        z.iter().map(|&z| self.reference(z)).sum()
    }

    /// Structure energy in network units.
    pub fn normalize_energy(&self, energy: f64, z: &[u32]) -> f64 {
        (energy - self.baseline(z)) / self.energy_scale
    }

    pub fn denormalize_energy(&self, raw: f64, z: &[u32]) -> f64 {
        raw * self.energy_scale + self.baseline(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// eV
    pub energy: f64,
    pub atom_energies: Vec<f64>,
    /// eV/Å
    pub forces: Vec<Vec3>,
}

/// Tape outputs of a batched forward pass, in normalized units.
#[derive(Debug, Clone, Copy)]
pub struct RawOutput {
    /// `[n, 1]`
    pub atom_energy: Var,
    /// `[n, 3]`
    pub forces: Var,
}

/// Runs the network over a batch whose parameters are already on `tape`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    batch: &GraphBatch,
) -> crate::tensor::Result<RawOutput> {
    let n = batch.n_nodes();
    let e = batch.n_edges();
    let k = batch.num_rbf;
    let basis = tape.constant(Tensor::from_f64(&[e, k], &batch.edge_basis)?);
    let dir = tape.constant(Tensor::from_f64(&[e, 3], &batch.edge_dir)?);
    let edges = EdgeInputs {
        n_nodes: n,
        src: &batch.edge_src,
        dst: &batch.edge_dst,
        basis,
        dir,
    };
    let mut state = layers::embed(tape, params.embedding, &batch.atomic_numbers)?;
    let mut global: Option<GlobalState> = match params.global_init {
        Some(init) => Some(layers::global_init(tape, init, batch.n_graphs)?),
        None => None,
    };
    for layer in &params.layers {
        if let (Some(gp), Some(g)) = (&layer.global, global) {
            state = layers::global_distribute(tape, state, g, &batch.node_graph, gp)?;
        }
        let msg = layers::local_message_pass(tape, state, &edges, layer)?;
        state = layers::local_message_update(tape, state, msg, &layer.update)?;
        if let (Some(gp), Some(g)) = (&layer.global, global) {
            global = Some(layers::global_aggregate(
                tape,
                state,
                g,
                &batch.node_graph,
                batch.n_graphs,
                gp,
            )?);
        }
    }
    let (atom_energy, forces) = layers::readout(tape, state, &params.readout)?;
    Ok(RawOutput { atom_energy, forces })
}

/// Network weights with their hyperparameters and output normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub hyper: Hyperparams,
    pub params: ModelParams<Tensor<T>>,
    pub norm: Normalization,
}

impl<T: Real> Model<T> {
    pub fn new(hyper: Hyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            hyper,
            params: ModelParams::init(&hyper, &mut rng),
            norm: Normalization::default(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.params.map(&mut |_, t| tape.param(t.clone()))
    }

    pub fn batch(&self, structures: &[&Structure]) -> Result<GraphBatch> {
        GraphBatch::new(structures, &self.hyper)
    }

    /// Forward pass without gradient bookkeeping; one prediction per graph.
    pub fn predict_graphs(&self, batch: &GraphBatch) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let params = self.params.map(&mut |_, t| tape.constant(t.clone()));
        let out = forward(&mut tape, &params, batch)?;
        let e = tape.value(out.atom_energy).to_f64_vec();
        let f = tape.value(out.forces).to_f64_vec();
        if !e.iter().chain(&f).all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let mut preds = Vec::with_capacity(batch.n_graphs);
        for g in 0..batch.n_graphs {
            let (lo, hi) = (batch.graph_offsets[g], batch.graph_offsets[g + 1]);
            let atom_energies: Vec<f64> = (lo..hi)
                .map(|i| e[i] * self.norm.energy_scale + self.norm.reference(batch.atomic_numbers[i]))
                .collect();
            let forces = (lo..hi)
                .map(|i| Vec3::new(f[3 * i], f[3 * i + 1], f[3 * i + 2]) * self.norm.force_scale)
                .collect();
            preds.push(Prediction {
                energy: atom_energies.iter().sum(),
                atom_energies,
                forces,
            });
        }
        Ok(preds)
    }

    pub fn predict(&self, s: &Structure) -> Result<Prediction> {
        let batch = self.batch(&[s])?;
        Ok(self.predict_graphs(&batch)?.remove(0))
    }

    /// Predicts many structures, `chunk` graphs per forward pass, in
    /// parallel over chunks.
    pub fn predict_many(&self, structures: &[Structure], chunk: usize) -> Result<Vec<Prediction>> {
        let refs: Vec<&Structure> = structures.iter().collect();
        let parts: Vec<Result<Vec<Prediction>>> = refs
            .par_chunks(chunk.max(1))
            .map(|c| self.predict_graphs(&self.batch(c)?))
            .collect();
        let mut out = Vec::with_capacity(structures.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            hyper: self.hyper,
            params: self.params.map(&mut |_, t| t.cast()),
            norm: self.norm.clone(),
        }
    }
}
