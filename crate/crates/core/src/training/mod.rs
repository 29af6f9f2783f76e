//! Loss, optimisation, evaluation and checkpoints.

mod checkpoint;
mod optim;
#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_header, Checkpoint, Header, OptimizerHeader, TensorEntry, TrainingMeta, MAGIC, VERSION};
pub use optim::{Adam, AdamConfig, ReduceOnPlateau};

use crate::geometry::Structure;
use crate::model::{forward, GraphBatch, Model, ModelError, Normalization, Prediction, RawOutput};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("structure {index} has no {what} label")]
    MissingLabels { index: usize, what: &'static str },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch for tensor {0}")]
    Checksum(String),
    #[error("tensor {name} has shape {stored:?} in the checkpoint but {expected:?} was requested")]
    Shape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Energy (`alpha`) and force (`beta`) weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "loss weights must be non-negative with a positive sum, got α={} β={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_learning_rate: f64,
    pub seed: u64,
    pub precision: Precision,
    pub weights: LossWeights,
    pub validation_fraction: f64,
    /// Graphs per tape; gradients of the pieces are summed in order.
    pub graphs_per_tape: usize,
    /// Stop after the epoch that crosses this wall-clock budget (s).
    pub time_limit: Option<f64>,
    /// Refit the normalization on the training split before training.
    pub fit_normalization: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
            adam: AdamConfig::default(),
            lr_factor: 0.8,
            lr_patience: 10,
            min_learning_rate: 1e-6,
            seed: 0,
            precision: Precision::F32,
            weights: LossWeights::default(),
            validation_fraction: 0.2,
            graphs_per_tape: 4,
            time_limit: None,
            fit_normalization: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be ≥ 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.graphs_per_tape == 0 {
            return bad("batch size and graphs per tape must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr factor must lie in (0, 1], got {}", self.lr_factor));
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("Adam moments must lie in [0, 1) with ε > 0".into());
        }
        self.weights.validate()
    }
}

/// Normalized targets of one structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub energy: f64,
    /// `[M, 3]` row-major.
    pub forces: Vec<f64>,
}

pub fn target(s: &Structure, norm: &Normalization, index: usize) -> Result<Target> {
    let e = s.energy.ok_or(TrainError::MissingLabels { index, what: "energy" })?;
    let f = s.forces.as_ref().ok_or(TrainError::MissingLabels { index, what: "force" })?;
    Ok(Target {
        energy: norm.normalize_energy(e, &s.atomic_numbers),
        forces: f.iter().flat_map(|v| [v.x, v.y, v.z]).map(|x| x / norm.force_scale).collect(),
    })
}

/// Objective summed (not averaged) over the graphs of `batch`, divided by
/// `denominator`.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    out: RawOutput,
    batch: &GraphBatch,
    targets: &[&Target],
    w: LossWeights,
    denominator: f64,
) -> crate::tensor::Result<Var> {
    let g = batch.n_graphs;
    let n = batch.n_nodes();
    let e_pred = tape.segment_sum(out.atom_energy, &batch.node_graph, g)?;
    let e_label: Vec<f64> = targets.iter().map(|t| t.energy).collect();
    let e_label = tape.constant(Tensor::from_f64(&[g, 1], &e_label)?);
    let de = tape.sub(e_pred, e_label)?;
    let de = tape.abs(de)?;
    let de = tape.sum(de)?;
    let de = tape.scale(de, w.alpha)?;

    let mut f_label = Vec::with_capacity(3 * n);
    let mut weight = Vec::with_capacity(3 * n);
    for (k, t) in targets.iter().enumerate() {
        let m = batch.graph_offsets[k + 1] - batch.graph_offsets[k];
        f_label.extend_from_slice(&t.forces);
        weight.extend(std::iter::repeat_n(1.0 / (3 * m) as f64, 3 * m));
    }
    let f_label = tape.constant(Tensor::from_f64(&[n, 3], &f_label)?);
    let weight = tape.constant(Tensor::from_f64(&[n, 3], &weight)?);
    let df = tape.sub(out.forces, f_label)?;
    let df = tape.abs(df)?;
    let df = tape.mul(df, weight)?;
    let df = tape.sum(df)?;
    let df = tape.scale(df, w.beta)?;
    let total = tape.add(de, df)?;
    tape.scale(total, 1.0 / denominator)
}

/// Mean objective of physical-unit predictions against labelled structures,
/// compared in normalized units.
pub fn loss(preds: &[Prediction], labels: &[Structure], norm: &Normalization, w: LossWeights) -> Result<f64> {
    w.validate()?;
    if preds.len() != labels.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} predictions for {} structures",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (k, (p, s)) in preds.iter().zip(labels).enumerate() {
        let t = target(s, norm, k)?;
        let e = norm.normalize_energy(p.energy, &s.atomic_numbers);
        let f: f64 = p
            .forces
            .iter()
            .flat_map(|v| [v.x, v.y, v.z])
            .zip(&t.forces)
            .map(|(a, b)| (a / norm.force_scale - b).abs())
            .sum();
        total += w.alpha * (e - t.energy).abs() + w.beta * f / (3 * s.len()) as f64;
    }
    Ok(total / preds.len() as f64)
}

/// Per-species reference energies by linear least squares on composition,
/// per-atom residual standard deviation as energy scale and force RMS as
/// force scale.
pub fn fit_normalization(train: &[Structure]) -> Result<Normalization> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    let species: Vec<u32> = train
        .iter()
        .flat_map(|s| s.atomic_numbers.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col: BTreeMap<u32, usize> = species.iter().enumerate().map(|(k, &z)| (z, k)).collect();
    let mut a = DMatrix::<f64>::zeros(train.len(), species.len());
    let mut b = DVector::<f64>::zeros(train.len());
    let mut f2 = 0.0;
    let mut nf = 0usize;
    for (n, s) in train.iter().enumerate() {
        b[n] = s.energy.ok_or(TrainError::MissingLabels { index: n, what: "energy" })?;
        for z in &s.atomic_numbers {
            a[(n, col[z])] += 1.0;
        }
        let f = s.forces.as_ref().ok_or(TrainError::MissingLabels { index: n, what: "force" })?;
        f2 += f.iter().map(|v| v.norm_squared()).sum::<f64>();
        nf += 3 * f.len();
    }
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| TrainError::InvalidConfig(format!("reference fit: {e}")))?;
    let species_energy: BTreeMap<u32, f64> = species.iter().zip(coef.iter()).map(|(&z, &c)| (z, c)).collect();
    let residuals: Vec<f64> = train
        .iter()
        .zip((&a * &coef).iter())
        .map(|(s, fit)| (s.energy.unwrap() - fit) / s.len() as f64)
        .collect();
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / residuals.len() as f64;
    let usable = |x: f64| if x.is_finite() && x > 1e-12 { x } else { 1.0 };
    Ok(Normalization {
        species_energy,
        energy_scale: usable(var.sqrt()),
        force_scale: usable((f2 / nf.max(1) as f64).sqrt()),
    })
}

/// Seeded shuffle split into `(train, validation)` index lists.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * validation_fraction).round() as usize).min(n);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub structures: usize,
    pub energy_mae_mev: f64,
    pub energy_mae_mev_per_atom: f64,
    /// Component-wise force MAE (meV/Å).
    pub force_mae_mev_per_a: f64,
    /// RMS of the label force components (meV/Å).
    pub force_rms_mev_per_a: f64,
}

/// Error metrics in physical units.
pub fn metrics(preds: &[Prediction], labels: &[Structure]) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} predictions for {} structures",
            preds.len(),
            labels.len()
        )));
    }
    let (mut e, mut ea, mut f, mut f2, mut nf) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (k, (p, s)) in preds.iter().zip(labels).enumerate() {
        let el = s.energy.ok_or(TrainError::MissingLabels { index: k, what: "energy" })?;
        let fl = s.forces.as_ref().ok_or(TrainError::MissingLabels { index: k, what: "force" })?;
        e += (p.energy - el).abs();
        ea += (p.energy - el).abs() / s.len() as f64;
        for (a, b) in p.forces.iter().zip(fl) {
            f += (a - b).abs().sum();
            f2 += b.norm_squared();
        }
        nf += 3 * fl.len();
    }
    let n = preds.len().max(1) as f64;
    let nf = nf.max(1) as f64;
    Ok(Metrics {
        structures: preds.len(),
        energy_mae_mev: 1000.0 * e / n,
        energy_mae_mev_per_atom: 1000.0 * ea / n,
        force_mae_mev_per_a: 1000.0 * f / nf,
        force_rms_mev_per_a: 1000.0 * (f2 / nf).sqrt(),
    })
}

pub fn evaluate<T: Real>(model: &Model<T>, dataset: &[Structure]) -> Result<Metrics> {
    let preds = model.predict_many(dataset, 16)?;
    metrics(&preds, dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_energy_mae_mev_per_atom: f64,
    pub validation_force_mae_mev_per_a: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,step,learning_rate,train_loss,validation_loss,validation_energy_mae_mev_per_atom,validation_force_mae_mev_per_a";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.step,
            self.learning_rate,
            self.train_loss,
            self.validation_loss,
            self.validation_energy_mae_mev_per_atom,
            self.validation_force_mae_mev_per_a
        )
    }
}

pub fn loss_curve_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome<T: Real> {
    /// State at the epoch with the lowest validation loss.
    pub best: Checkpoint<T>,
    /// State after the last epoch.
    pub last: Checkpoint<T>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

struct Prepared<'a> {
    batches: Vec<GraphBatch>,
    targets: Vec<Target>,
    structures: &'a [Structure],
}

fn prepare<'a, T: Real>(model: &Model<T>, data: &'a [Structure]) -> Result<Prepared<'a>> {
    let mut batches = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for (k, s) in data.iter().enumerate() {
        targets.push(target(s, &model.norm, k)?);
        batches.push(model.batch(&[s])?);
    }
    Ok(Prepared {
        batches,
        targets,
        structures: data,
    })
}

/// Summed objective and gradients (canonical slot order) of a group of graphs.
fn group_gradients<T: Real>(
    model: &Model<T>,
    data: &Prepared<'_>,
    group: &[usize],
    w: LossWeights,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let parts: Vec<&GraphBatch> = group.iter().map(|&k| &data.batches[k]).collect();
    let targets: Vec<&Target> = group.iter().map(|&k| &data.targets[k]).collect();
    let batch = GraphBatch::concat(&parts);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let out = forward(&mut tape, &vars, &batch)?;
    let l = loss_on_tape(&mut tape, out, &batch, &targets, w, 1.0)?;
    let value = tape.value(l).data()[0].to_f64();
    let grads = tape.backward(l)?;
    let g = vars
        .named()
        .into_iter()
        .map(|(_, v)| grads.get(*v).cloned().ok_or(TrainError::Tensor(TensorError::ForeignVar)))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

fn validation_loss<T: Real>(model: &Model<T>, data: &Prepared<'_>, w: LossWeights) -> Result<(f64, Metrics)> {
    let chunks: Vec<Vec<&GraphBatch>> = data.batches.chunks(16).map(|c| c.iter().collect()).collect();
    let parts: Vec<Result<Vec<Prediction>>> = chunks
        .par_iter()
        .map(|c| Ok(model.predict_graphs(&GraphBatch::concat(c))?))
        .collect();
    let mut preds = Vec::with_capacity(data.batches.len());
    for p in parts {
        preds.extend(p?);
    }
    let l = loss(&preds, data.structures, &model.norm, w)?;
    Ok((l, metrics(&preds, data.structures)?))
}

/// Minibatch Adam over `train`, selecting the epoch with the lowest
/// validation loss.
pub fn fit<T: Real>(mut model: Model<T>, train: &[Structure], validation: &[Structure], cfg: &TrainConfig) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if cfg.fit_normalization {
        model.norm = fit_normalization(train)?;
    }
    let train_data = prepare(&model, train)?;
    let val_data = prepare(&model, validation)?;
    let shapes: Vec<Vec<usize>> = model.params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = Adam::<T>::new(cfg.adam, &shapes);
    let mut sched = ReduceOnPlateau::new(cfg.lr_factor, cfg.lr_patience, cfg.min_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, "train-shuffle"));
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint<T>> = None;
    let start = Instant::now();
    let mut stopped_early = false;
    let snapshot = |model: &Model<T>, adam: &Adam<T>, epoch: usize, best_val: f64, lr: f64| Checkpoint {
        model: model.clone(),
        optimizer: Some(adam.clone()),
        meta: TrainingMeta {
            epoch,
            step: adam.step,
            best_validation: Some(best_val),
            learning_rate: Some(lr),
            seed: Some(cfg.seed),
        },
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let groups: Vec<&[usize]> = batch.chunks(cfg.graphs_per_tape).collect();
            let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = groups
                .par_iter()
                .map(|g| group_gradients(&model, &train_data, g, cfg.weights))
                .collect();
            let mut total = 0.0;
            let mut grads: Option<Vec<Tensor<T>>> = None;
            for r in results {
                let (l, g) = r.map_err(|e| TrainError::Diverged {
                    epoch,
                    step: adam.step,
                    detail: e.to_string(),
                })?;
                total += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            if !total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: adam.step,
                    detail: format!("loss became {total}"),
                });
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = T::from_f64(1.0 / batch.len() as f64);
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam.update(&mut model.params.slots_mut(), &grads, lr);
            epoch_loss += total;
        }
        if !model.params.all_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step: adam.step,
                detail: "non-finite parameters after update".into(),
            });
        }
        let (val_loss, val_metrics) = validation_loss(&model, &val_data, cfg.weights).map_err(|e| match e {
            TrainError::Model(ModelError::NonFinite) => TrainError::Diverged {
                epoch,
                step: adam.step,
                detail: "non-finite validation predictions".into(),
            },
            other => other,
        })?;
        history.push(EpochRecord {
            epoch,
            step: adam.step,
            learning_rate: lr,
            train_loss: epoch_loss / train.len() as f64,
            validation_loss: val_loss,
            validation_energy_mae_mev_per_atom: val_metrics.energy_mae_mev_per_atom,
            validation_force_mae_mev_per_a: val_metrics.force_mae_mev_per_a,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.meta.best_validation.unwrap_or(f64::INFINITY)) {
            best = Some(snapshot(&model, &adam, epoch, val_loss, lr));
        }
        lr = sched.observe(val_loss, lr);
        if cfg.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() > t) {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let epochs_run = history.len();
    let best_val = best.as_ref().and_then(|b| b.meta.best_validation).unwrap_or(f64::INFINITY);
    let last = snapshot(&model, &adam, epochs_run, best_val, lr);
    Ok(FitOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        history,
        stopped_early,
    })
}
