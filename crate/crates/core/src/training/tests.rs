use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Vec3;
use crate::io::OraclePotential;
use crate::model::Hyperparams;
use crate::tensor::gradcheck_with_floor;
use crate::testing::{random_molecule, random_periodic};

fn small_hyper() -> Hyperparams {
    Hyperparams {
        features: 8,
        layers: 2,
        cutoff: 5.0,
        num_rbf: 6,
        ..Hyperparams::default()
    }
}

fn labelled(seed: u64, n: usize, atoms: usize) -> Vec<Structure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pot = OraclePotential::argon();
    (0..n)
        .map(|_| {
            let s = random_periodic(&mut rng, atoms, &[18], 45.0, 3.0);
            let (e, f) = pot.energy_forces(&s).unwrap();
            s.with_labels(Some(e), Some(f)).unwrap()
        })
        .collect()
}

fn prediction(energy: f64, forces: Vec<Vec3>) -> Prediction {
    Prediction {
        energy,
        atom_energies: vec![],
        forces,
    }
}

fn one_atom(energy: f64, force: Vec3) -> Structure {
    Structure::molecule(vec![18], vec![Vec3::zeros()])
        .unwrap()
        .with_labels(Some(energy), Some(vec![force]))
        .unwrap()
}

#[test]
fn loss_examples() {
    let norm = Normalization::default();
    let s = one_atom(1.0, Vec3::new(0.5, 0.0, -0.5));
    let exact = prediction(1.0, vec![Vec3::new(0.5, 0.0, -0.5)]);
    assert_eq!(loss(&[exact], std::slice::from_ref(&s), &norm, LossWeights::default()).unwrap(), 0.0);

    let w = LossWeights { alpha: 1.0, beta: 0.0 };
    let off = prediction(3.0, vec![Vec3::zeros()]);
    assert_eq!(loss(&[off], std::slice::from_ref(&s), &norm, w).unwrap(), 2.0);

    let s = one_atom(0.0, Vec3::zeros());
    let w = LossWeights { alpha: 0.0, beta: 1.0 };
    let off = prediction(0.0, vec![Vec3::new(1.0, 1.0, 1.0)]);
    assert!((loss(&[off], &[s], &norm, w).unwrap() - 1.0).abs() < 1e-15);

    let unlabeled = Structure::molecule(vec![18], vec![Vec3::zeros()]).unwrap();
    assert!(matches!(
        loss(&[prediction(0.0, vec![Vec3::zeros()])], &[unlabeled], &norm, w),
        Err(TrainError::MissingLabels { .. })
    ));
    assert!(LossWeights { alpha: 0.0, beta: 0.0 }.validate().is_err());
    assert!(LossWeights { alpha: -1.0, beta: 1.0 }.validate().is_err());
}

#[test]
fn tape_loss_matches_plain_loss() {
    let data = labelled(1, 3, 6);
    let mut model = Model::<f64>::new(small_hyper(), 2).unwrap();
    model.norm = fit_normalization(&data).unwrap();
    let refs: Vec<&Structure> = data.iter().collect();
    let batch = model.batch(&refs).unwrap();
    let targets: Vec<Target> = data.iter().enumerate().map(|(k, s)| target(s, &model.norm, k).unwrap()).collect();
    let trefs: Vec<&Target> = targets.iter().collect();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let out = forward(&mut tape, &vars, &batch).unwrap();
    let l = loss_on_tape(&mut tape, out, &batch, &trefs, LossWeights::default(), 3.0).unwrap();
    let on_tape = tape.value(l).data()[0];
    let preds = model.predict_graphs(&batch).unwrap();
    let plain = loss(&preds, &data, &model.norm, LossWeights::default()).unwrap();
    assert!((on_tape - plain).abs() / plain < 1e-12, "{on_tape} {plain}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pot = OraclePotential::argon();
    for use_nmu in [true, false] {
        let s = random_molecule(&mut rng, 5, &[18], 30.0, 3.0);
        let (e, f) = pot.energy_forces(&s).unwrap();
        let s = s.with_labels(Some(e), Some(f)).unwrap();
        let hyper = Hyperparams {
            features: 4,
            layers: 2,
            num_rbf: 4,
            element_vocab: 20,
            use_nmu,
            ..Hyperparams::default()
        };
        let mut model = Model::<f64>::new(hyper, 4).unwrap();
        model.norm = fit_normalization(std::slice::from_ref(&s)).unwrap();
        let batch = model.batch(&[&s]).unwrap();
        let t = target(&s, &model.norm, 0).unwrap();
        let tensors: Vec<Tensor<f64>> = model.params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let err = gradcheck_with_floor(
            |tape, vars| {
                let mut k = 0;
                let params = model.params.map(&mut |_, _| {
                    k += 1;
                    vars[k - 1]
                });
                let out = forward(tape, &params, &batch)?;
                loss_on_tape(tape, out, &batch, &[&t], LossWeights::default(), 1.0)
            },
            &tensors,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "nmu={use_nmu}: {err}");

        // A corrupted backward rule must not hide behind the floor.
        let broken = gradcheck_with_floor(
            |tape, vars| {
                tape.corrupt_backward("abs");
                let mut k = 0;
                let params = model.params.map(&mut |_, _| {
                    k += 1;
                    vars[k - 1]
                });
                let out = forward(tape, &params, &batch)?;
                loss_on_tape(tape, out, &batch, &[&t], LossWeights::default(), 1.0)
            },
            &tensors,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(broken > 0.1, "{broken}");
    }
}

#[test]
fn normalization_is_invertible_and_recovers_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let refs = [(1u32, -2.5), (8, -7.25), (18, 0.75)];
    let data: Vec<Structure> = (0..12)
        .map(|k| {
            let s = random_molecule(&mut rng, 4 + k % 5, &[1, 8, 18], 20.0, 1.0);
            let e: f64 = s
                .atomic_numbers
                .iter()
                .map(|z| refs.iter().find(|r| r.0 == *z).unwrap().1)
                .sum();
            let n = s.len();
            s.with_labels(Some(e), Some(vec![Vec3::new(1.0, -1.0, 2.0); n])).unwrap()
        })
        .collect();
    let norm = fit_normalization(&data).unwrap();
    for (z, e) in refs {
        if norm.species_energy.contains_key(&z) {
            assert!((norm.reference(z) - e).abs() < 1e-10);
        }
    }
    assert!((norm.force_scale - 2f64.sqrt()).abs() < 1e-12);
    let norm = Normalization {
        energy_scale: 0.037,
        ..norm
    };
    for s in &data {
        let e = s.energy.unwrap() * 1.3 + 0.1;
        let back = norm.denormalize_energy(norm.normalize_energy(e, &s.atomic_numbers), &s.atomic_numbers);
        assert!((back - e).abs() / e.abs() < 1e-12);
    }
}

#[test]
fn split_is_seeded_and_disjoint() {
    let (a, b) = split_indices(100, 0.2, 7);
    assert_eq!((a.len(), b.len()), (80, 20));
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split_indices(100, 0.2, 7), (a.clone(), b));
    assert_ne!(split_indices(100, 0.2, 8).0, a);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut w = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    let g = Tensor::<f64>::from_f64(&[3], &[0.3, -4.0, 0.0]).unwrap();
    let mut adam = Adam::<f64>::new(AdamConfig::default(), &[vec![3]]);
    adam.update(&mut [&mut w], std::slice::from_ref(&g), 0.1);
    let want = [1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5];
    for (a, b) in w.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn plateau_scheduler_decays_after_patience() {
    let mut s = ReduceOnPlateau::new(0.8, 2, 1e-6);
    let mut lr = 1.0;
    for m in [1.0, 0.5, 0.6, 0.6] {
        lr = s.observe(m, lr);
        assert_eq!(lr, 1.0);
    }
    lr = s.observe(0.7, lr);
    assert!((lr - 0.8).abs() < 1e-15);
    lr = s.observe(0.4, lr);
    assert!((lr - 0.8).abs() < 1e-15);
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

#[test]
fn training_overfits_one_structure() {
    let data = labelled(6, 1, 6);
    let model = Model::<f64>::new(small_hyper(), 7).unwrap();
    let cfg = TrainConfig {
        epochs: 2000,
        batch_size: 1,
        learning_rate: 5e-3,
        lr_patience: 2000,
        ..quick_config(0)
    };
    let out = fit(model, &data, &data, &cfg).unwrap();
    let first = out.history[0].train_loss;
    let best = out.history.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.last.meta.step, 2000);
    assert!(best < 0.01 * first, "{first} → {best}");
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let data = labelled(8, 6, 6);
    let model = Model::<f64>::new(small_hyper(), 9).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick_config(4)
    };
    let out = fit(model.clone(), &data[..4], &data[4..], &cfg).unwrap();
    let l0 = out.history[0].train_loss;
    assert!(out.history.iter().all(|r| r.train_loss == l0 && r.validation_loss == out.history[0].validation_loss));
    assert_eq!(out.last.model.params, model.params);
}

#[test]
fn training_is_deterministic_and_chunking_invariant() {
    let data = labelled(10, 10, 6);
    let model = Model::<f64>::new(small_hyper(), 11).unwrap();
    let cfg = quick_config(3);
    let a = fit(model.clone(), &data[..8], &data[8..], &cfg).unwrap();
    let b = fit(model.clone(), &data[..8], &data[8..], &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    let c = fit(
        model,
        &data[..8],
        &data[8..],
        &TrainConfig {
            graphs_per_tape: 1,
            ..cfg
        },
    )
    .unwrap();
    for (x, y) in a.history.iter().zip(&c.history) {
        assert!((x.train_loss - y.train_loss).abs() / x.train_loss < 1e-10);
    }
    let csv = loss_curve_csv(&a.history);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("epoch,step,"));
}

#[test]
fn fit_rejects_bad_inputs() {
    let data = labelled(12, 3, 6);
    let model = Model::<f64>::new(small_hyper(), 1).unwrap();
    assert!(matches!(
        fit(model.clone(), &data, &[], &quick_config(1)),
        Err(TrainError::EmptySplit("validation"))
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick_config(1)
    };
    assert!(matches!(fit(model.clone(), &data, &data, &bad), Err(TrainError::InvalidConfig(_))));
    let mut unlabeled = data.clone();
    unlabeled[1].forces = None;
    assert!(matches!(
        fit(model.clone(), &unlabeled, &data, &quick_config(1)),
        Err(TrainError::MissingLabels { index: 1, .. })
    ));
    let wild = TrainConfig {
        learning_rate: 1e30,
        ..quick_config(5)
    };
    assert!(matches!(fit(model, &data, &data, &wild), Err(TrainError::Diverged { .. })));
}

#[test]
fn metrics_use_physical_units() {
    let data = labelled(13, 5, 6);
    let exact: Vec<Prediction> = data
        .iter()
        .map(|s| prediction(s.energy.unwrap(), s.forces.clone().unwrap()))
        .collect();
    let m = metrics(&exact, &data).unwrap();
    assert_eq!((m.energy_mae_mev, m.energy_mae_mev_per_atom, m.force_mae_mev_per_a), (0.0, 0.0, 0.0));

    let shifted: Vec<Prediction> = exact.iter().map(|p| prediction(p.energy + 0.5, p.forces.clone())).collect();
    let m = metrics(&shifted, &data).unwrap();
    assert!((m.energy_mae_mev - 500.0).abs() < 1e-9);
    assert!((m.energy_mae_mev_per_atom - 500.0 / 6.0).abs() < 1e-9);

    let c = 0.123;
    let constant: Vec<Prediction> = data.iter().map(|s| prediction(-1.0, vec![Vec3::repeat(c); s.len()])).collect();
    let m = metrics(&constant, &data).unwrap();
    let labels: Vec<f64> = data.iter().flat_map(|s| s.forces.clone().unwrap()).flat_map(|v| [v.x, v.y, v.z]).collect();
    let oracle = 1000.0 * labels.iter().map(|f| (f - c).abs()).sum::<f64>() / labels.len() as f64;
    assert!((m.force_mae_mev_per_a - oracle).abs() < 1e-9);
    let e_oracle = 1000.0 * data.iter().map(|s| (s.energy.unwrap() + 1.0).abs()).sum::<f64>() / 5.0;
    assert!((m.energy_mae_mev - e_oracle).abs() < 1e-9);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = labelled(14, 4, 6);
    let model = Model::<f64>::new(small_hyper(), 15).unwrap();
    let out = fit(model, &data[..3], &data[3..], &quick_config(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.leig");
    out.best.save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(back, out.best);
    assert_eq!(back.to_bytes().unwrap(), out.best.to_bytes().unwrap());
    for s in &data {
        assert_eq!(back.model.predict(s).unwrap(), out.best.model.predict(s).unwrap());
    }

    let single = Checkpoint::new(Model::<f32>::new(small_hyper(), 16).unwrap());
    let back32 = Checkpoint::<f32>::from_bytes(&single.to_bytes().unwrap()).unwrap();
    assert_eq!(back32, single);
    let header = read_header(&single.to_bytes().unwrap()).unwrap().0;
    assert!(header.tensors.iter().all(|t| t.dtype == crate::tensor::DType::F32));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let ck = Checkpoint::new(Model::<f64>::new(small_hyper(), 17).unwrap());
    let bytes = ck.to_bytes().unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&magic), Err(TrainError::Version(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::<f64>::from_bytes(&version), Err(TrainError::Version(_))));
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]),
        Err(TrainError::Truncated)
    ));
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes[..10]), Err(TrainError::Truncated)));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(Checkpoint::<f64>::from_bytes(&flipped), Err(TrainError::Checksum(_))));

    let wide = Hyperparams {
        features: 64,
        layers: 1,
        ..Hyperparams::default()
    };
    let narrow_bytes = Checkpoint::new(Model::<f32>::new(wide, 0).unwrap()).to_bytes().unwrap();
    let request = Hyperparams {
        features: 128,
        ..wide
    };
    assert!(matches!(
        Checkpoint::<f32>::from_bytes_expecting(&narrow_bytes, &request),
        Err(TrainError::Shape { .. })
    ));
    assert!(Checkpoint::<f32>::from_bytes_expecting(&narrow_bytes, &wide).is_ok());
}
