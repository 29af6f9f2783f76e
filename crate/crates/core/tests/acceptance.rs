//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use leignn::analysis::{compute_rdf, msd_diffusivity, rdf_mae, stability_time, MsdConfig, RdfConfig};
use leignn::geometry::{brute_force_neighbors, build_neighbor_list, Cell, Graph, Structure, Vec3};
use leignn::io::{fcc_lattice, generate_dataset, parse_extxyz, write_extxyz, DatasetConfig, OraclePotential};
use leignn::md::{run_simulation, MdConfig, ModelForces, RandomForces, Trajectory};
use leignn::model::{forward, Hyperparams, Model};
use leignn::tensor::{gradcheck_with_floor, Tensor};
use leignn::testing::{extensivity_error, random_molecule, random_orthogonal, random_periodic, symmetry_error};
use leignn::training::{
    evaluate, fit, fit_normalization, loss_on_tape, split_indices, target, Adam, Checkpoint, LossWeights, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Replaces every weight with uniform noise so that no branch of the network
/// is inert (the global path starts at zero after initialisation).
fn randomize(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.slots_mut() {
        let shape = t.shape().to_vec();
        let fan_in = *shape.last().unwrap() as f64;
        let scale = if shape.len() == 2 { fan_in.sqrt().recip() } else { 0.1 };
        let v: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-scale..scale)).collect();
        *t = Tensor::from_f64(&shape, &v).unwrap();
    }
}

/// Randomised model whose force scale is set so a probe structure sees a
/// mean force of 1 eV/Å; absolute force tolerances then mean something.
fn random_model(hyper: Hyperparams, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(hyper, seed).unwrap();
    randomize(&mut m, seed + 1000);
    let probe = random_periodic(&mut ChaCha8Rng::seed_from_u64(seed), 20, &[6, 8, 18], 15.0, 1.2);
    let f = m.predict(&probe).unwrap().forces;
    m.norm.force_scale = f.len() as f64 / f.iter().map(|v| v.norm()).sum::<f64>();
    m
}

const SPECIES: &[u32] = &[1, 6, 7, 8, 14, 18, 26, 29, 79];

fn random_species(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let k = rng.random_range(1..=4);
    (0..k).map(|_| SPECIES[rng.random_range(0..SPECIES.len())]).collect()
}

fn random_structure(rng: &mut ChaCha8Rng, m: usize) -> Structure {
    let species = random_species(rng);
    if rng.random_bool(0.5) {
        random_periodic(rng, m, &species, 15.0, 1.2)
    } else {
        random_molecule(rng, m, &species, 15.0, 1.2)
    }
}

fn equivariance() -> Outcome {
    let model = random_model(Hyperparams::default(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut eval = |s: &Structure| model.predict(s).map(|p| (p.energy, p.forces));
    let (mut worst_e, mut worst_f, mut typical_f) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let m = rng.random_range(5..=50);
        let s = random_structure(&mut rng, m);
        let reflect = rng.random_bool(0.5);
        let rot = random_orthogonal(&mut rng, reflect);
        let shift = Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let (de, df) = symmetry_error(&mut eval, &s, &rot, &shift).map_err(|e| e.to_string())?;
        worst_e = worst_e.max(de);
        worst_f = worst_f.max(df);
        let (_, f) = eval(&s).map_err(|e| e.to_string())?;
        typical_f += f.iter().map(|v| v.norm()).sum::<f64>() / f.len() as f64 / 100.0;
    }
    check(
        worst_e <= 1e-10 && worst_f <= 1e-8 && typical_f > 0.1,
        format!(
            "100 structures, max energy rel err {worst_e:.2e}, max force err {worst_f:.2e} eV/Å (mean |F| {typical_f:.2e})"
        ),
    )
}

fn extensivity() -> Outcome {
    let hyper = Hyperparams {
        use_global: true,
        ..Hyperparams::default()
    };
    let model = random_model(hyper, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut eval = |s: &Structure| model.predict(s).map(|p| (p.energy, p.forces));
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let m = rng.random_range(3..=12);
        let species = random_species(&mut rng);
        let s = random_molecule(&mut rng, m, &species, 15.0, 1.2);
        for k in 2..=4 {
            worst = worst.max(extensivity_error(&mut eval, &s, k, 60.0).map_err(|e| e.to_string())?);
        }
    }
    check(worst <= 1e-10, format!("k = 2..4 over 10 clusters, max rel err {worst:.2e}"))
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let pot = OraclePotential::argon();
    let s = random_molecule(&mut rng, 5, &[18], 30.0, 3.0);
    let (e, f) = pot.energy_forces(&s).map_err(|e| e.to_string())?;
    let s = s.with_labels(Some(e), Some(f)).unwrap();
    let hyper = Hyperparams {
        features: 6,
        layers: 2,
        num_rbf: 6,
        ..Hyperparams::default()
    };
    let mut model = random_model(hyper, 3);
    model.norm = fit_normalization(std::slice::from_ref(&s)).map_err(|e| e.to_string())?;
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
    .map_err(|e| e.to_string())?;
    check(err < 1e-4, format!("{} tensors, max rel err {err:.2e}", tensors.len()))
}

fn batching() -> Outcome {
    let model = random_model(Hyperparams::default(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let ss: Vec<Structure> = (0..n)
            .map(|_| {
                let m = rng.random_range(3..=30);
                random_structure(&mut rng, m)
            })
            .collect();
        let together = model.predict_many(&ss, ss.len()).map_err(|e| e.to_string())?;
        for (s, p) in ss.iter().zip(&together) {
            let q = model.predict(s).map_err(|e| e.to_string())?;
            worst = worst.max((p.energy - q.energy).abs() / q.energy.abs().max(1e-300));
            let fmax = q.forces.iter().map(|f| f.amax()).fold(1e-300, f64::max);
            for (a, b) in p.forces.iter().zip(&q.forces) {
                worst = worst.max((a - b).amax() / fmax);
            }
        }
    }
    check(worst <= 1e-10, format!("50 batches, max rel deviation {worst:.2e}"))
}

fn canonical(g: &Graph) -> Vec<(usize, usize, [i32; 3], [u64; 3], u64)> {
    let mut e: Vec<_> = (0..g.n_edges())
        .map(|k| {
            let v = g.edge_vec[k];
            (
                g.edge_dst[k],
                g.edge_src[k],
                g.edge_shift[k],
                [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()],
                g.edge_len[k].to_bits(),
            )
        })
        .collect();
    e.sort();
    e
}

fn neighbor_lists() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut edges = 0usize;
    for case in 0..200 {
        let m = rng.random_range(1..=60);
        let species = random_species(&mut rng);
        let s = if case % 2 == 0 {
            let base = rng.random_range(3.0..12.0);
            let mut rows = [[0.0; 3]; 3];
            for (k, row) in rows.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = if c == k {
                        base * rng.random_range(0.8..1.3)
                    } else {
                        base * rng.random_range(-0.3..0.3)
                    };
                }
            }
            let cell = Cell::from_rows(rows).map_err(|e| e.to_string())?;
            let pos = (0..m)
                .map(|_| cell.to_cartesian(&Vec3::new(rng.random_range(-0.2..1.2), rng.random(), rng.random())))
                .collect();
            let z = (0..m).map(|_| species[rng.random_range(0..species.len())]).collect();
            let pbc = [rng.random_bool(0.8), rng.random_bool(0.8), rng.random_bool(0.8)];
            Structure::new(z, pos, Some(cell), pbc).map_err(|e| e.to_string())?
        } else {
            let side = rng.random_range(2.0..15.0);
            let pos = (0..m)
                .map(|_| Vec3::new(rng.random_range(0.0..side), rng.random_range(0.0..side), rng.random_range(0.0..side)))
                .collect();
            let z = (0..m).map(|_| species[rng.random_range(0..species.len())]).collect();
            Structure::molecule(z, pos).map_err(|e| e.to_string())?
        };
        let cutoff = rng.random_range(1.5..7.0);
        let cap = if rng.random_bool(0.5) { usize::MAX } else { rng.random_range(1..=40) };
        let (fast, slow) = match (build_neighbor_list(&s, cutoff, cap), brute_force_neighbors(&s, cutoff, cap)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(a), Err(b)) if a.to_string() == b.to_string() => continue,
            (a, b) => return Err(format!("case {case}: cell list {:?} vs brute force {:?}", a.err(), b.err())),
        };
        if canonical(&fast) != canonical(&slow) {
            return Err(format!("case {case}: graphs differ ({} vs {} edges)", fast.n_edges(), slow.n_edges()));
        }
        edges += fast.n_edges();
    }
    Ok(format!("200 systems identical ({edges} edges)"))
}

/// Liquid argon used for every MD comparison: 32 atoms melted at 300 K and
/// equilibrated at the run temperature.
fn liquid_start(pot: &OraclePotential, temperature: f64) -> Structure {
    let start = fcc_lattice(5.74, [2, 2, 2], 18).unwrap();
    let melt = MdConfig {
        temperature: 300.0,
        steps: 5000,
        stride: 5000,
        seed: 98,
        ..MdConfig::default()
    };
    let hot = run_simulation(&start, &mut pot.clone(), &melt).unwrap();
    let eq = MdConfig {
        temperature,
        seed: 99,
        ..melt
    };
    let cool = run_simulation(&hot.structure(hot.len() - 1).unwrap(), &mut pot.clone(), &eq).unwrap();
    cool.structure(cool.len() - 1).unwrap()
}

const FIDELITY_TEMPERATURE: f64 = 150.0;
const FIDELITY_FRICTION: f64 = 0.001;

fn fidelity_md(steps: usize, seed: u64) -> MdConfig {
    MdConfig {
        temperature: FIDELITY_TEMPERATURE,
        friction: FIDELITY_FRICTION,
        steps,
        stride: 10,
        seed,
        ..MdConfig::default()
    }
}

struct Reference {
    start: Structure,
    traj: Trajectory,
}

fn reference_run() -> Reference {
    let pot = OraclePotential::argon();
    let start = liquid_start(&pot, FIDELITY_TEMPERATURE);
    let traj = run_simulation(&start, &mut pot.clone(), &fidelity_md(100_000, 5)).unwrap();
    Reference { start, traj }
}

const TRAIN_EPOCHS: usize = 120;
/// Wall-clock cap (s) so slow machines still finish inside the time limit.
const TRAIN_BUDGET: f64 = 1300.0;

fn learnability(trained: &mut Option<Model<f32>>) -> Outcome {
    let pot = OraclePotential::argon();
    let data = generate_dataset(&pot, &DatasetConfig::default()).map_err(|e| e.to_string())?;
    let (tr, va) = split_indices(data.len(), 0.2, 1);
    let train: Vec<Structure> = tr.iter().map(|&k| data[k].clone()).collect();
    let val: Vec<Structure> = va.iter().map(|&k| data[k].clone()).collect();
    let hyper = Hyperparams {
        features: 32,
        layers: 3,
        ..Hyperparams::default()
    };
    let cfg = TrainConfig {
        epochs: TRAIN_EPOCHS,
        time_limit: Some(TRAIN_BUDGET),
        ..TrainConfig::default()
    };
    let out = fit(Model::<f32>::new(hyper, 0).unwrap(), &train, &val, &cfg).map_err(|e| e.to_string())?;
    let m = evaluate(&out.best.model, &val).map_err(|e| e.to_string())?;
    let ratio = m.force_mae_mev_per_a / m.force_rms_mev_per_a;
    *trained = Some(out.best.model);
    check(
        ratio < 0.1 && m.energy_mae_mev_per_atom < 5.0,
        format!(
            "{} frames, {} epochs; held-out force MAE {:.2} meV/Å = {:.1}% of RMS {:.1}, energy MAE {:.3} meV/atom",
            data.len(),
            out.history.len(),
            m.force_mae_mev_per_a,
            100.0 * ratio,
            m.force_rms_mev_per_a,
            m.energy_mae_mev_per_atom
        ),
    )
}

fn fidelity(model: Option<&Model<f32>>, reference: &Reference) -> Outcome {
    let model = model.ok_or("no trained model")?.clone();
    let rrdf = compute_rdf(&reference.traj, &RdfConfig::default()).map_err(|e| e.to_string())?;
    let rd = msd_diffusivity(&reference.traj, &MsdConfig::default()).map_err(|e| e.to_string())?;
    let traj = run_simulation(&reference.start, &mut ModelForces { model }, &fidelity_md(50_000, 6)).map_err(|e| e.to_string())?;
    let st = stability_time(&traj, &rrdf, 1000.0, 1.0).map_err(|e| e.to_string())?;
    let rdf = compute_rdf(&traj, &RdfConfig::default()).map_err(|e| e.to_string())?;
    let mae = rdf_mae(&rdf, &rrdf).map_err(|e| e.to_string())?;
    let d = msd_diffusivity(&traj, &MsdConfig::default()).map_err(|e| e.to_string())?;
    let dev = (d.diffusivity - rd.diffusivity).abs() / rd.diffusivity;
    check(
        mae < 0.1 && st.stability_time >= 50.0 - 1e-9 && dev < 0.3,
        format!(
            "RDF MAE {mae:.4}, stability {:.1} of 50 ps, D {:.3} vs oracle {:.3} ({:+.1}%){}",
            st.stability_time,
            d.diffusivity,
            rd.diffusivity,
            100.0 * (d.diffusivity / rd.diffusivity - 1.0),
            traj.abort.as_ref().map(|a| format!(", aborted: {}", a.reason)).unwrap_or_default()
        ),
    )
}

fn negative_control(reference: &Reference) -> Outcome {
    let rrdf = compute_rdf(&reference.traj, &RdfConfig::default()).map_err(|e| e.to_string())?;
    let mut provider = RandomForces::new(0.1, 7);
    let traj = run_simulation(&reference.start, &mut provider, &fidelity_md(50_000, 8)).map_err(|e| e.to_string())?;
    let st = stability_time(&traj, &rrdf, 1000.0, 1.0).map_err(|e| e.to_string())?;
    let mae = rdf_mae(&compute_rdf(&traj, &RdfConfig::default()).map_err(|e| e.to_string())?, &rrdf).map_err(|e| e.to_string())?;
    check(
        st.stability_time < 2.0 && mae > 1.0,
        format!(
            "stability {:.2} ps, RDF MAE {mae:.3}{}",
            st.stability_time,
            traj.abort.as_ref().map(|a| format!(", aborted: {}", a.reason)).unwrap_or_default()
        ),
    )
}

/// Per-atom energy drift and high-frequency RMS fluctuation of an NVE run.
/// The fluctuation is taken about a centred 400 fs moving average, which
/// separates the integrator's oscillating error from the slow wander caused
/// by force jumps at the cutoff.
fn nve(start: &Structure, dt: f64, time: f64) -> Result<(f64, f64), String> {
    let cfg = MdConfig {
        dt,
        friction: 0.0,
        temperature: FIDELITY_TEMPERATURE,
        steps: (time / dt).round() as usize,
        stride: 1,
        seed: 11,
        ..MdConfig::default()
    };
    let traj = run_simulation(start, &mut OraclePotential::argon(), &cfg).map_err(|e| e.to_string())?;
    if let Some(a) = &traj.abort {
        return Err(a.reason.clone());
    }
    let n = start.len() as f64;
    let e: Vec<f64> = traj.frames.iter().map(|f| f.potential_energy + f.kinetic_energy).collect();
    let drift = e.iter().map(|x| (x - e[0]).abs()).fold(0.0, f64::max) / n;
    let half = (200.0 / dt).round() as usize;
    let mut prefix = vec![0.0];
    for x in &e {
        prefix.push(prefix.last().unwrap() + x);
    }
    let centred: Vec<f64> = (half..e.len() - half)
        .map(|k| e[k] - (prefix[k + half + 1] - prefix[k - half]) / (2 * half + 1) as f64)
        .collect();
    let rms = (centred.iter().map(|x| x * x).sum::<f64>() / centred.len() as f64).sqrt() / n;
    Ok((drift, rms))
}

fn nve_sanity(reference: &Reference) -> Outcome {
    let (d1, r1) = nve(&reference.start, 1.0, 10_000.0)?;
    let (_, r_half) = nve(&reference.start, 0.5, 10_000.0)?;
    let (_, r2) = nve(&reference.start, 2.0, 10_000.0)?;
    let order = ((r2 / r_half).ln() / 4f64.ln(), (r1 / r_half).ln() / 2f64.ln());
    check(
        d1 < 1e-4 && (1.5..2.5).contains(&order.0),
        format!(
            "drift {d1:.2e} eV/atom over 10 ps at 1 fs; fluctuation order {:.2} (dt 0.5→2), {:.2} (0.5→1)",
            order.0, order.1
        ),
    )
}

/// Trainable parameters implied by the three ablation settings, counted
/// layer by layer.
fn ablation_counts(f: usize, k: usize, t: usize, vocab: usize) -> [usize; 3] {
    let dense = |i: usize, o: usize| i * o;
    let mlp = |i: usize, h: usize, o: usize| dense(i, h) + h + dense(h, o) + o;
    let message = 3 * dense(f, f) + 3 * dense(k, f);
    let residual = 2 * dense(f, f) + mlp(2 * f, f, 3 * f);
    let gated = 3 * dense(2 * f, f) + 2 * dense(f, f);
    let global = 2 * dense(f, f) + 2 * mlp(2 * f, f, f);
    let shared = vocab * f + mlp(f, f, 1) + f;
    [
        shared + t * (message + residual),
        shared + t * (message + gated),
        shared + f + t * (message + gated + global),
    ]
}

fn ablations() -> Outcome {
    let configs = [
        r#"{"F": 16, "T": 2, "K": 8, "use_global": false, "use_nmu": false}"#,
        r#"{"F": 16, "T": 2, "K": 8, "use_global": false, "use_nmu": true}"#,
        r#"{"F": 16, "T": 2, "K": 8, "use_global": true, "use_nmu": true}"#,
    ];
    let hypers: Vec<Hyperparams> = configs.iter().map(|c| serde_json::from_str(c).unwrap()).collect();
    let want = ablation_counts(16, 8, 2, 100);
    let mut models: Vec<Model<f64>> = hypers.iter().map(|h| random_model(*h, 10)).collect();
    for (k, m) in models.iter().enumerate() {
        if m.parameter_count() != want[k] || m.hyper.parameter_count() != want[k] {
            return Err(format!("config {k}: {} parameters, expected {}", m.parameter_count(), want[k]));
        }
    }
    // Share every tensor common to two settings.
    let full = models[2].clone();
    models[0].norm = full.norm.clone();
    models[1].norm = full.norm.clone();
    models[1].params.embedding = full.params.embedding.clone();
    models[1].params.readout = full.params.readout.clone();
    for (a, b) in models[1].params.layers.iter_mut().zip(&full.params.layers) {
        let global = a.global.take();
        *a = b.clone();
        a.global = global;
    }
    models[0].params.embedding = full.params.embedding.clone();
    models[0].params.readout = full.params.readout.clone();
    for (a, b) in models[0].params.layers.iter_mut().zip(&full.params.layers) {
        a.w_h = b.w_h.clone();
        a.w_u = b.w_u.clone();
        a.w_v = b.w_v.clone();
        a.rbf_h = b.rbf_h.clone();
        a.rbf_u = b.rbf_u.clone();
        a.rbf_v = b.rbf_v.clone();
    }
    let mut muted = full.clone();
    for l in &mut muted.params.layers {
        let g = l.global.as_mut().unwrap();
        g.w_dist = Tensor::zeros(g.w_dist.shape());
        g.mlp_dist.w2 = Tensor::zeros(g.mlp_dist.w2.shape());
        g.mlp_dist.b2 = Tensor::zeros(g.mlp_dist.b2.shape());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for _ in 0..5 {
        let s = random_structure(&mut rng, 12);
        let p: Vec<_> = models.iter().map(|m| m.predict(&s).unwrap()).collect();
        if p[0] == p[1] || p[1] == p[2] || p[0] == p[2] {
            return Err("two ablation settings gave identical outputs".into());
        }
        if muted.predict(&s).unwrap() != p[1] {
            return Err("full model with a silenced global path differs from Vanilla + NMU".into());
        }
    }
    Ok(format!("parameter counts {want:?}; outputs distinct, global path isolates exactly"))
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let hyper = Hyperparams {
        features: 16,
        layers: 2,
        ..Hyperparams::default()
    };
    let model = random_model(hyper, 11);
    let shapes: Vec<Vec<usize>> = model.params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut ck = Checkpoint::new(model);
    let mut adam = Adam::new(Default::default(), &shapes);
    let grads: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::from_f64(s, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    adam.update(&mut ck.model.params.slots_mut(), &grads, 1e-3);
    ck.optimizer = Some(adam);
    let bytes = ck.to_bytes().map_err(|e| e.to_string())?;
    let back = Checkpoint::<f64>::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if back != ck || back.to_bytes().unwrap() != bytes {
        return Err("f64 checkpoint round trip is not exact".into());
    }
    let single = Checkpoint::new(ck.model.cast::<f32>());
    let b32 = single.to_bytes().unwrap();
    if Checkpoint::<f32>::from_bytes(&b32).map_err(|e| e.to_string())? != single {
        return Err("f32 checkpoint round trip is not exact".into());
    }

    let pot = OraclePotential::argon();
    let frames: Vec<Structure> = (0..10)
        .map(|k| {
            let s = if k % 2 == 0 {
                random_periodic(&mut rng, 20, &[18], 40.0, 3.0)
            } else {
                random_molecule(&mut rng, 7, &[1, 8, 18], 20.0, 1.5)
            };
            let (e, f) = pot.energy_forces(&s).unwrap();
            s.with_labels(Some(e * std::f64::consts::PI), Some(f)).unwrap()
        })
        .collect();
    let text = write_extxyz(&frames).map_err(|e| e.to_string())?;
    let parsed = parse_extxyz(&text).map_err(|e| e.to_string())?;
    for (a, b) in frames.iter().zip(&parsed) {
        let same = a.atomic_numbers == b.atomic_numbers
            && a.positions == b.positions
            && a.energy.map(f64::to_bits) == b.energy.map(f64::to_bits)
            && a.forces == b.forces
            && a.cell.as_ref().map(Cell::rows) == b.cell.as_ref().map(Cell::rows);
        if !same {
            return Err("extxyz round trip changed a frame".into());
        }
    }
    if write_extxyz(&parsed).unwrap() != text {
        return Err("extxyz rewrite is not byte-identical".into());
    }

    let small = DatasetConfig {
        n_samples: 12,
        chains: 2,
        melt_steps: 100,
        equilibration_steps: 50,
        sample_interval: 10,
        ..DatasetConfig::default()
    };
    let d1 = generate_dataset(&pot, &small).map_err(|e| e.to_string())?;
    let d2 = generate_dataset(&pot, &small).map_err(|e| e.to_string())?;
    if write_extxyz(&d1).unwrap() != write_extxyz(&d2).unwrap() {
        return Err("dataset generation is not deterministic".into());
    }
    let tiny = Hyperparams {
        features: 8,
        layers: 1,
        num_rbf: 6,
        ..Hyperparams::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let train = |seed| fit(Model::<f32>::new(tiny, seed).unwrap(), &d1[..9], &d1[9..], &cfg).unwrap();
    if train(3).best.to_bytes().unwrap() != train(3).best.to_bytes().unwrap() {
        return Err("training is not deterministic".into());
    }
    let md = MdConfig {
        steps: 300,
        seed: 4,
        ..MdConfig::default()
    };
    let run = || run_simulation(&d1[0], &mut pot.clone(), &md).unwrap().to_extxyz().unwrap();
    if run() != run() {
        return Err("MD is not deterministic".into());
    }
    Ok("checkpoints (f32, f64, optimizer state) and extxyz exact; dataset, training and MD reproducible".into())
}

struct Report {
    failures: usize,
    /// Criteria selected on the command line; empty runs all.
    only: Vec<usize>,
}

impl Report {
    fn wants(&self, ids: &[usize]) -> bool {
        self.only.is_empty() || ids.iter().any(|i| self.only.contains(i))
    }

    fn run(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        if !self.wants(&[id]) {
            return;
        }
        let t = Instant::now();
        let outcome = f();
        let took = t.elapsed();
        let over = limit.filter(|l| took > *l);
        let (ok, detail) = match (outcome, over) {
            (Ok(d), None) => (true, d),
            (Ok(d), Some(l)) => (false, format!("{d}; exceeded {:.0} s limit", l.as_secs_f64())),
            (Err(d), _) => (false, d),
        };
        if !ok {
            self.failures += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn main() {
    let only = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut r = Report { failures: 0, only };
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    r.run(1, "equivariance", min(1), equivariance);
    r.run(2, "extensivity", min(1), extensivity);
    r.run(3, "gradient check", min(5), gradients);
    r.run(4, "batching invariance", None, batching);
    r.run(5, "neighbor list oracle", None, neighbor_lists);
    r.run(10, "ablation structure", None, ablations);
    r.run(11, "serialization and determinism", None, serialization);
    let mut trained = None;
    r.run(6, "learnability", min(30), || learnability(&mut trained));
    if !r.wants(&[7, 8, 9]) {
        return finish(r);
    }
    let t = Instant::now();
    let reference = reference_run();
    println!("     oracle reference: 100 ps in {:.1} s", t.elapsed().as_secs_f64());
    r.run(7, "MD fidelity", min(60), || fidelity(trained.as_ref(), &reference));
    r.run(8, "negative control", None, || negative_control(&reference));
    r.run(9, "NVE sanity", None, || nve_sanity(&reference));
    finish(r);
}

fn finish(r: Report) {
    if r.failures > 0 {
        println!("{} criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
