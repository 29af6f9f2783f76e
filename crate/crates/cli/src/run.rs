use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use leignn::analysis::{compute_rdf, hr_mae, msd_diffusivity, rdf_mae, stability_time, AnalysisSummary};
use leignn::derive_seed;
use leignn::geometry::Structure;
use leignn::io::{fcc_lattice, generate_dataset, read_extxyz_file, write_extxyz_file, DatasetManifest};
use leignn::md::{run_simulation, ForceProvider, ModelForces, RandomForces, Trajectory};
use leignn::model::Model;
use leignn::tensor::{DType, Real};
use leignn::training::{evaluate, fit, loss_curve_csv, read_header, split_indices, Checkpoint, Metrics, Precision};
use serde::Serialize;
use serde_json::Value;

use crate::config::{echo, ConfigBuilder, ProviderKind, RunConfig};
use crate::{Command, ConfigArgs, Failure};

type Outcome = Result<(), Failure>;

pub fn execute(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData { out, samples, config } => {
            let cfg = resolve(&config, &[("data.n_samples", samples.map(Value::from))])?;
            gen_data(&cfg, &out)
        }
        Command::Train {
            data,
            manifest,
            out,
            epochs,
            config,
        } => {
            let cfg = resolve(&config, &[("train.epochs", epochs.map(Value::from))])?;
            train(&cfg, &data, manifest.as_deref(), &out)
        }
        Command::Eval { checkpoint, data, out } => eval(&checkpoint, &data, out.as_deref()),
        Command::Md {
            out,
            checkpoint,
            provider,
            init,
            steps,
            temperature,
            config,
        } => {
            let cfg = resolve(
                &config,
                &[
                    ("provider.kind", provider.map(Value::from)),
                    ("md.steps", steps.map(Value::from)),
                    ("md.temperature", temperature.map(Value::from)),
                ],
            )?;
            md(&cfg, checkpoint.as_deref(), init.as_deref(), &out)
        }
        Command::Analyze {
            traj,
            reference,
            out,
            config,
        } => {
            let cfg = resolve(&config, &[])?;
            analyze(&cfg, &traj, reference.as_deref(), &out)
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn resolve(args: &ConfigArgs, flags: &[(&str, Option<Value>)]) -> Result<RunConfig, Failure> {
    let mut b = ConfigBuilder::default();
    if let Some(path) = &args.config {
        b.merge_file(path)?;
    }
    for spec in &args.overrides {
        b.apply_override(spec)?;
    }
    if let Some(s) = args.seed {
        b.set("seed", Value::from(s))?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            b.set(key, v.clone())?;
        }
    }
    Ok(b.build()?)
}

fn run_dir(out: &Path, cfg: Option<&RunConfig>) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if let Some(cfg) = cfg {
        write(&out.join("config.json"), &echo(cfg))?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_dataset(path: &Path) -> anyhow::Result<Vec<Structure>> {
    Ok(read_extxyz_file(path)?)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Outcome {
    run_dir(out, Some(cfg))?;
    let frames = generate_dataset(&cfg.potential, &cfg.data).context("generating dataset")?;
    let (train, validation) = split_indices(
        frames.len(),
        cfg.train.validation_fraction,
        derive_seed(cfg.seed, "split"),
    );
    write_extxyz_file(&out.join("dataset.extxyz"), &frames).context("writing dataset")?;
    let manifest = DatasetManifest {
        seed: cfg.data.seed,
        potential: cfg.potential.clone(),
        config: cfg.data,
        n_samples: frames.len(),
        train,
        validation,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} frames to {}", frames.len(), out.join("dataset.extxyz").display());
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    parameter_count: usize,
    precision: Precision,
    epochs_run: usize,
    best_epoch: usize,
    stopped_early: bool,
    train: Metrics,
    validation: Metrics,
}

fn train(cfg: &RunConfig, data: &Path, manifest: Option<&Path>, out: &Path) -> Outcome {
    let frames = read_dataset(data)?;
    let (train_idx, val_idx) = match manifest {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let m: DatasetManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if let Some(&bad) = m.train.iter().chain(&m.validation).find(|&&k| k >= frames.len()) {
                return Err(anyhow!("manifest index {bad} is out of range for {} frames", frames.len()).into());
            }
            (m.train, m.validation)
        }
        None => split_indices(frames.len(), cfg.train.validation_fraction, derive_seed(cfg.seed, "split")),
    };
    let pick = |idx: &[usize]| idx.iter().map(|&k| frames[k].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&train_idx), pick(&val_idx));
    run_dir(out, Some(cfg))?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, &train_set, &val_set, out),
        Precision::F64 => train_as::<f64>(cfg, &train_set, &val_set, out),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, train_set: &[Structure], val_set: &[Structure], out: &Path) -> Outcome {
    let model = Model::<T>::new(cfg.model, derive_seed(cfg.seed, "model-init")).map_err(|e| Failure::Usage(e.to_string()))?;
    let outcome = fit(model, train_set, val_set, &cfg.train).context("training")?;
    outcome.best.save(&out.join("checkpoint.leig"))?;
    write(&out.join("loss_curve.csv"), &loss_curve_csv(&outcome.history))?;
    let best = &outcome.best.model;
    let report = TrainReport {
        parameter_count: best.parameter_count(),
        precision: cfg.train.precision,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best.meta.epoch,
        stopped_early: outcome.stopped_early,
        train: evaluate(best, train_set)?,
        validation: evaluate(best, val_set)?,
    };
    write_json(&out.join("metrics.json"), &report)?;
    print_metrics("validation", &report.validation);
    Ok(())
}

/// Writes a line to stdout, ignoring a closed pipe.
fn say(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_metrics(label: &str, m: &Metrics) {
    say(&format!(
        "{label}: {} structures, energy MAE {:.4} meV ({:.4} meV/atom), force MAE {:.4} meV/Å (label RMS {:.4} meV/Å)",
        m.structures, m.energy_mae_mev, m.energy_mae_mev_per_atom, m.force_mae_mev_per_a, m.force_rms_mev_per_a
    ));
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load_model(path: &Path) -> anyhow::Result<AnyModel> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (header, _) = read_header(&bytes).with_context(|| format!("reading {}", path.display()))?;
    let dtype = header.tensors.first().map_or(DType::F64, |t| t.dtype);
    let ctx = || format!("loading {}", path.display());
    Ok(match dtype {
        DType::F32 => AnyModel::F32(Checkpoint::<f32>::from_bytes(&bytes).with_context(ctx)?.model),
        DType::F64 => AnyModel::F64(Checkpoint::<f64>::from_bytes(&bytes).with_context(ctx)?.model),
    })
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Outcome {
    let model = load_model(checkpoint)?;
    let frames = read_dataset(data)?;
    let m = match &model {
        AnyModel::F32(m) => evaluate(m, &frames),
        AnyModel::F64(m) => evaluate(m, &frames),
    }
    .context("evaluating")?;
    print_metrics("eval", &m);
    if let Some(dir) = out {
        run_dir(dir, None)?;
        write_json(&dir.join("metrics.json"), &m)?;
    }
    Ok(())
}

fn initial_structure(cfg: &RunConfig, init: Option<&Path>) -> anyhow::Result<Structure> {
    match init {
        Some(p) => {
            let mut frames = read_dataset(p)?;
            let mut s = frames.pop().ok_or_else(|| anyhow!("{} contains no frames", p.display()))?;
            s.energy = None;
            s.forces = None;
            s.arrays.clear();
            s.info.clear();
            Ok(s)
        }
        None => Ok(fcc_lattice(cfg.data.lattice_constant, cfg.data.replicas, cfg.data.species)?),
    }
}

fn md(cfg: &RunConfig, checkpoint: Option<&Path>, init: Option<&Path>, out: &Path) -> Outcome {
    let start = initial_structure(cfg, init)?;
    let mut provider: Box<dyn ForceProvider> = match cfg.provider.kind {
        ProviderKind::Oracle => Box::new(cfg.potential.clone()),
        ProviderKind::Random => Box::new(RandomForces::new(
            cfg.provider.random_scale,
            derive_seed(cfg.seed, "random-forces"),
        )),
        ProviderKind::Model => {
            let path = checkpoint.ok_or_else(|| Failure::Usage("the model provider needs --checkpoint".into()))?;
            match load_model(path)? {
                AnyModel::F32(model) => Box::new(ModelForces { model }),
                AnyModel::F64(model) => Box::new(ModelForces { model }),
            }
        }
    };
    run_dir(out, Some(cfg))?;
    let traj = run_simulation(&start, provider.as_mut(), &cfg.md).context("running dynamics")?;
    traj.save(&out.join("traj.extxyz"), &out.join("traj.json"))
        .context("writing trajectory")?;
    match &traj.abort {
        Some(a) => eprintln!("run aborted at {:.1} fs: {}", a.time, a.reason),
        None => eprintln!("completed {} steps ({} frames)", traj.steps_completed, traj.len()),
    }
    Ok(())
}

fn sidecar_path(traj: &Path) -> PathBuf {
    traj.with_extension("json")
}

fn load_traj(path: &Path) -> anyhow::Result<Trajectory> {
    Trajectory::load(path, &sidecar_path(path)).with_context(|| format!("loading trajectory {}", path.display()))
}

fn analyze(cfg: &RunConfig, traj_path: &Path, reference: Option<&Path>, out: &Path) -> Outcome {
    let traj = load_traj(traj_path)?;
    let a = &cfg.analysis;
    let rdf = compute_rdf(&traj, &a.rdf).context("computing RDF")?;
    let diffusion = match msd_diffusivity(&traj, &a.msd) {
        Ok(d) => Some(d),
        Err(e) => {
            eprintln!("diffusivity unavailable: {e}");
            None
        }
    };
    let mut summary = AnalysisSummary {
        frames: traj.len(),
        simulated_time: traj.simulated_time() / 1000.0,
        aborted: traj.abort.as_ref().map(|x| x.reason.clone()),
        rdf_mae: None,
        hr_mae: None,
        diffusivity: diffusion.as_ref().map(|d| d.diffusivity),
        reference_diffusivity: None,
        diffusive: diffusion.as_ref().map(|d| d.diffusive),
        stability: None,
    };
    if let Some(path) = reference {
        let rtraj = load_traj(path)?;
        let mut rcfg = a.rdf;
        rcfg.r_max = Some(rdf.r_max);
        let rrdf = compute_rdf(&rtraj, &rcfg).context("computing reference RDF")?;
        summary.rdf_mae = Some(rdf_mae(&rdf, &rrdf)?);
        summary.hr_mae = Some(hr_mae(&rdf, &rrdf)?);
        summary.reference_diffusivity = msd_diffusivity(&rtraj, &a.msd).ok().map(|d| d.diffusivity);
        summary.stability = Some(stability_time(&traj, &rrdf, a.window, a.threshold).context("stability")?);
    }
    run_dir(out, Some(cfg))?;
    write_json(&out.join("analysis.json"), &summary)?;
    write(&out.join("rdf.csv"), &rdf.to_csv())?;
    let mut hr = String::from("r,h\n");
    for (r, h) in rdf.r.iter().zip(&rdf.h) {
        hr.push_str(&format!("{r},{h}\n"));
    }
    write(&out.join("hr.csv"), &hr)?;
    say(&serde_json::to_string(&summary).map_err(anyhow::Error::from)?);
    Ok(())
}

fn inspect(checkpoint: &Path) -> Outcome {
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let (header, _) = read_header(&bytes).with_context(|| format!("reading {}", checkpoint.display()))?;
    say(&serde_json::to_string_pretty(&header).map_err(anyhow::Error::from)?);
    Ok(())
}
