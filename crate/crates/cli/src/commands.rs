use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use downscale::evaluation::{
    evaluate, write_triptych, BilinearBaseline, CheckpointModel, Downscaler, EvalConfig,
    EvalReport,
};
use downscale::fields::io::{load_dataset, sample_file_name, save_grid, Manifest, MANIFEST_NAME};
use downscale::fields::{synth_stack, FieldStack, SynthProfile, VariableId};
use downscale::gradcheck::{run_gradcheck, GradcheckConfig};
use downscale::models::{Checkpoint, ModelError};
use downscale::rng::derive_seed;
use downscale::tensor::OpKind;
use downscale::training::{self, TrainOutcome};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::CliError;

const CHECKPOINT_FILE: &str = "model.ckpt";
const LOSS_FILE: &str = "loss.csv";
const REPORT_CSV: &str = "report.csv";
const REPORT_TXT: &str = "report.txt";
/// Wall-clock measurements live apart from the reproducible artifacts.
const RUN_META_FILE: &str = "run_meta.txt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Creates the run directory and echoes the effective configuration into it.
fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.path("out")?;
    fs::create_dir_all(&out)
        .map_err(|e| CliError::io(format!("creating {}", out.display()), e))?;
    write(&out.join(CONFIG_FILE), cfg.render())?;
    Ok(out)
}

fn load_set(cfg: &RunConfig, key: &str) -> Result<Vec<FieldStack>, CliError> {
    let dir = cfg.path(key)?;
    let set = load_dataset(&dir)?;
    if set.is_empty() {
        return Err(CliError::Usage(format!("{key}: no samples in {}", dir.display())));
    }
    Ok(set)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let n: usize = cfg.get("synth.n")?;
    let ny: usize = cfg.get("synth.ny")?;
    let nx: usize = cfg.get("synth.nx")?;
    let seed: u64 = cfg.get("seed")?;
    let km: f64 = cfg.get("synth.spacing_km")?;
    let profile_name = cfg.raw("synth.profile");
    let profile = SynthProfile::named(profile_name)
        .map_err(|e| CliError::BadValue {
            key: "synth.profile".into(),
            reason: e.to_string(),
        })?
        .with_spacing_km(km);
    let scale: usize = cfg.get("model.scale")?;
    let multiple = scale * cfg.get::<usize>("vit.patch")? * cfg.get::<usize>("vit.window")?;
    for (key, size) in [("synth.ny", ny), ("synth.nx", nx)] {
        if size == 0 || size % multiple != 0 {
            return Err(CliError::BadValue {
                key: key.into(),
                reason: format!(
                    "{size} must be a positive multiple of {multiple} (scale x patch x window)"
                ),
            });
        }
    }
    if n == 0 {
        return Err(CliError::BadValue {
            key: "synth.n".into(),
            reason: "need at least one sample".into(),
        });
    }

    let out = prepare_run_dir(cfg)?;
    for i in 0..n {
        let stack = synth_stack(ny, nx, derive_seed(seed, i as u64), &profile)?;
        save_grid(&out.join(sample_file_name(i)), &stack)?;
    }
    let mut manifest = Manifest::default();
    manifest.set("generator", "gaussian random field");
    manifest.set("profile", profile_name);
    manifest.set("seed", seed);
    manifest.set("samples", n);
    manifest.set("ny", ny);
    manifest.set("nx", nx);
    manifest.set("spacing_km", km);
    manifest.set(
        "variables",
        VariableId::all()
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.set("coarse", "derived at load time by block averaging");
    manifest.save(&out.join(MANIFEST_NAME))?;
    println!("wrote {n} samples of {ny}x{nx} to {}", out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.model_spec()?;
    let tcfg = cfg.train_config()?;
    let lcfg = cfg.loss_config()?;
    let precision = cfg.raw("train.precision").to_string();
    let train_set = load_set(cfg, "data.train")?;
    let val_set = match cfg.optional_path("data.val") {
        Some(_) => Some(load_set(cfg, "data.val")?),
        None => None,
    };
    let out = prepare_run_dir(cfg)?;

    let start = Instant::now();
    let (checkpoint, log, initial, fin) = match precision.as_str() {
        "f64" => unpack(training::train::<f64>(
            &spec,
            &train_set,
            val_set.as_deref(),
            &tcfg,
            &lcfg,
        )?),
        "f32" => unpack(training::train::<f32>(
            &spec,
            &train_set,
            val_set.as_deref(),
            &tcfg,
            &lcfg,
        )?),
        other => {
            return Err(CliError::BadValue {
                key: "train.precision".into(),
                reason: format!("{other:?} is not f32 or f64"),
            })
        }
    };
    let wall = start.elapsed().as_secs_f64();

    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(LOSS_FILE), log.to_csv())?;
    write(&out.join(RUN_META_FILE), format!("train_wall_seconds={wall}\n"))?;
    println!(
        "{} trained {} epochs: mse {:.6} -> {:.6}, mass {:.6} -> {:.6} ({})",
        spec.kind,
        tcfg.epochs,
        initial.mse,
        fin.mse,
        initial.mass,
        fin.mass,
        lcfg.mass_convention
    );
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn unpack<R>(
    o: TrainOutcome<R>,
) -> (
    Checkpoint,
    training::LossLog,
    training::LossBreakdown,
    training::LossBreakdown,
) {
    (o.checkpoint, o.log, o.initial, o.final_losses)
}

fn checkpoint_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    cfg.raw("eval.checkpoints")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<(CheckpointModel<f64>, Checkpoint)>, CliError> {
    let mut taken: Vec<String> = vec!["bilinear".into()];
    paths
        .iter()
        .map(|p| {
            let ckpt = Checkpoint::load(p)?;
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let base = if stem == "model" {
                // Run directories hold `model.ckpt`; name after the directory.
                p.parent()
                    .and_then(|d| d.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or(stem)
            } else {
                stem
            };
            let mut name = base.clone();
            let mut k = 2;
            while taken.contains(&name) {
                name = format!("{base}_{k}");
                k += 1;
            }
            taken.push(name.clone());
            Ok((CheckpointModel::new(name, &ckpt)?, ckpt))
        })
        .collect()
}

fn write_report(
    out: &Path,
    report: &EvalReport,
) -> Result<(), CliError> {
    write(&out.join(REPORT_CSV), report.to_csv())?;
    write(&out.join(REPORT_TXT), report.render_table())?;
    let meta: String = report
        .wall_seconds
        .iter()
        .map(|(m, s)| format!("inference_wall_seconds.{m}={s}\n"))
        .collect();
    write(&out.join(RUN_META_FILE), meta)?;
    print!("{}", report.render_table());
    Ok(())
}

fn eval_config(cfg: &RunConfig) -> Result<EvalConfig, CliError> {
    Ok(EvalConfig {
        carbon: cfg.carbon()?,
        scale: cfg.get("model.scale")?,
        dataset_id: cfg.raw("data.test").to_string(),
    })
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let ecfg = eval_config(cfg)?;
    let vars = cfg.channels()?.variables();
    let test = load_set(cfg, "data.test")?;
    let models = load_models(&checkpoint_paths(cfg))?;
    let sample: usize = cfg.get("eval.sample")?;
    if sample >= test.len() {
        return Err(CliError::BadValue {
            key: "eval.sample".into(),
            reason: format!("index {sample} but the test set has {} samples", test.len()),
        });
    }
    let heat_var: VariableId = cfg.get("eval.heatmap_var")?;
    if !vars.contains(&heat_var) {
        return Err(CliError::BadValue {
            key: "eval.heatmap_var".into(),
            reason: format!("{heat_var} is not among the evaluated variables"),
        });
    }
    let out = prepare_run_dir(cfg)?;

    let base = BilinearBaseline { scale: ecfg.scale };
    let mut list: Vec<&dyn Downscaler> = vec![&base];
    list.extend(models.iter().map(|(m, _)| m as &dyn Downscaler));
    let report = evaluate(&list, &test, &vars, &ecfg)?;
    write_report(&out, &report)?;

    // Triptych for the last listed model.
    let model = *list.last().expect("bilinear always present");
    let truth = test[sample].select(&vars)?;
    let coarse = truth.coarsen(ecfg.scale)?;
    let pred = model.downscale(&coarse)?;
    let dir = out.join("heatmaps");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    let field = |s: &FieldStack| s.field(heat_var).cloned().expect("selected variable");
    let paths = write_triptych(
        &dir,
        &format!("sample_{sample:04}_{}", model.name()),
        &field(&coarse),
        &field(&truth),
        &field(&pred),
    )?;
    for p in &paths {
        println!("heatmap: {}", p.display());
    }
    Ok(())
}

pub fn transfer(cfg: &RunConfig) -> Result<(), CliError> {
    let ecfg = eval_config(cfg)?;
    let paths = checkpoint_paths(cfg);
    let [path] = paths.as_slice() else {
        return Err(CliError::Usage("transfer takes exactly one checkpoint".into()));
    };
    let test = load_set(cfg, "data.test")?;
    let mut models = load_models(std::slice::from_ref(path))?;
    let (model, ckpt) = models.pop().expect("one model");
    let vars = model.norm().variables().to_vec();

    let (ny, nx) = (test[0].ny(), test[0].nx());
    let spec = &ckpt.spec;
    if ny % spec.scale != 0 || nx % spec.scale != 0 {
        return Err(CliError::Usage(format!(
            "test grid {ny}x{nx} is not divisible by the scale factor {}",
            spec.scale
        )));
    }
    spec.check_input(&[vars.len(), ny / spec.scale, nx / spec.scale])?;
    let train_dim = |k: &str| -> Result<usize, CliError> {
        ckpt.meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ModelError::MalformedHeader(format!("checkpoint lacks meta.{k}")).into())
    };
    let (ty, tx) = (train_dim("train_ny")?, train_dim("train_nx")?);
    if ny <= ty || nx <= tx {
        return Err(CliError::Usage(format!(
            "transfer needs grids larger than the {ty}x{tx} training grid, got {ny}x{nx}"
        )));
    }
    let out = prepare_run_dir(cfg)?;

    let base = BilinearBaseline { scale: ecfg.scale };
    let mut report = evaluate(&[&base, &model], &test, &vars, &ecfg)?;
    report.meta.insert("transfer".into(), "zero-shot, checkpoint unmodified".into());
    report
        .meta
        .insert("transfer.train_grid".into(), format!("{ty}x{tx}"));
    report
        .meta
        .insert("transfer.test_grid".into(), format!("{ny}x{nx}"));
    report
        .meta
        .insert("transfer.grid_differs_from_training".into(), "true".into());
    write_report(&out, &report)?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, sign_flip: Option<&str>) -> Result<(), CliError> {
    let sign_flip = sign_flip
        .map(|name| {
            OpKind::from_name(name)
                .filter(|k| *k != OpKind::Leaf)
                .ok_or_else(|| CliError::Usage(format!("unknown op {name:?}")))
        })
        .transpose()?;
    let gcfg = GradcheckConfig {
        seed: cfg.get("seed")?,
        sign_flip,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&gcfg)?;
    print!("{}", report.render());
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        return Err(CliError::Numerical(format!(
            "gradient check failed for {}",
            names.join(", ")
        )));
    }
    Ok(())
}
