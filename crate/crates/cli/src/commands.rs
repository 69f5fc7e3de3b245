use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{GrayImage, Luma};
use seunet_core::data::{generate_synthetic, load_manifest, load_samples, Sample};
use seunet_core::gradsuite::{run_suite, CaseResult, SuiteOptions};
use seunet_core::metrics::THRESHOLD;
use seunet_core::model::SeUNetTrans;
use seunet_core::train::{evaluate, load_checkpoint, predict_samples, train as train_loop, Adam, Checkpoint, TrainConfig};

use crate::config::{read_config_file, Overrides, RunConfig};
use crate::error::CliError;
use crate::{EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{what} {}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err("creating", dir, e))
}

fn load_data(manifest: &Path, size: Option<usize>, spec: &seunet_core::model::VariantSpec) -> Result<Vec<Sample<f32>>, CliError> {
    let m = load_manifest(manifest)?;
    let size = size.or(m.size).ok_or_else(|| CliError::Usage(format!("no --size given and {} declares none", manifest.display())))?;
    spec.check_input(size, size).map_err(|e| CliError::Usage(e.to_string()))?;
    let data = load_samples(&m, Some(size))?;
    if data.is_empty() {
        return Err(CliError::Validation(format!("{} has no entries", manifest.display())));
    }
    Ok(data)
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint<f32>, CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let file = match &a.config {
        Some(p) => read_config_file(p)?,
        None => Default::default(),
    };
    let overrides = Overrides {
        variant: a.variant,
        widths: a.widths,
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        size: a.size,
        manifest: a.manifest,
        out_dir: a.out_dir,
    };
    let cfg = RunConfig::resolve(&file, overrides)?;
    let data = load_data(&cfg.manifest, cfg.size, &cfg.spec)?;

    let (mut model, mut opt, first_epoch) = match &a.resume {
        Some(path) => {
            let ck = open_checkpoint(path)?;
            if ck.model.spec() != &cfg.spec {
                return Err(CliError::Usage(format!("{} was trained with a different architecture", path.display())));
            }
            let mut opt = ck.optimizer;
            opt.config = cfg.adam;
            (ck.model, opt, ck.epoch + 1)
        }
        None => {
            let model = SeUNetTrans::<f32>::new(cfg.spec.clone(), cfg.seed)?;
            let opt = Adam::new(model.params(), cfg.adam);
            (model, opt, 1)
        }
    };

    create_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err("creating", &log_path, e))?);
    let header = format!(
        "variant {} widths {:?}/{} epochs {} batch {} lr {:e} weight_decay {:e} seed {} images {}",
        cfg.spec.variant,
        cfg.spec.encoder.stages,
        cfg.spec.encoder.bottleneck,
        cfg.epochs,
        cfg.batch,
        cfg.adam.lr,
        cfg.adam.weight_decay,
        cfg.seed,
        data.len()
    );
    println!("{header}");
    writeln!(log, "{header}").map_err(|e| io_err("writing", &log_path, e))?;

    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        seed: cfg.seed,
        adam: cfg.adam,
        checkpoint_dir: Some(cfg.out_dir.clone()),
        checkpoint_every: 10,
    };
    let mut write_err = None;
    train_loop(&mut model, &mut opt, &data, &tc, first_epoch, |entry| {
        let line = entry.line();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err = Some(e);
        }
        Ok(())
    })?;
    if let Some(e) = write_err {
        return Err(io_err("writing", &log_path, e));
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = open_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.manifest, a.size, ck.model.spec())?;
    let report = evaluate(&ck.model, &data, a.batch)?;
    create_dir(&a.out_dir)?;
    let table = report.to_table();
    print!("{table}");
    for (name, body) in [("report.txt", table), ("report.kv", report.to_kv())] {
        let p = a.out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| io_err("writing", &p, e))?;
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let ck = open_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.manifest, a.size, ck.model.spec())?;
    let probs = predict_samples(&ck.model, &data, a.batch)?;
    create_dir(&a.out_dir)?;
    for (sample, p) in data.iter().zip(&probs) {
        let (h, w) = (p.shape()[1], p.shape()[2]);
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([(p.data()[y as usize * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8]));
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([if p.data()[y as usize * w + x as usize] as f64 >= THRESHOLD { 255 } else { 0 }])
        });
        for (suffix, img) in [("prob", gray), ("mask", mask)] {
            let path = a.out_dir.join(format!("{}_{suffix}.png", sample.id));
            img.save(&path).map_err(|e| io_err("writing", &path, e))?;
        }
    }
    println!("wrote {} predictions to {}", data.len(), a.out_dir.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    for t in a.tolerance.iter().chain(Some(&a.e2e_tolerance)) {
        if !(t.is_finite() && *t > 0.0) {
            return Err(CliError::Usage(format!("tolerance {t} must be positive")));
        }
    }
    let print = |r: &CaseResult| {
        println!(
            "{:<20} {} max_rel_err={:.3e} tol={:.0e} seeds={} coords={} skipped={}",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_error,
            r.tolerance,
            r.seeds,
            r.coords_checked,
            r.coords_skipped
        );
    };
    let opts = SuiteOptions { seeds: a.seeds, tolerance: a.tolerance, e2e_tolerance: Some(a.e2e_tolerance), filter: a.filter.clone() };
    let results = run_suite(&opts, print)?;
    if results.is_empty() {
        return Err(CliError::Usage(format!("no gradient check matches `{}`", a.filter.unwrap_or_default())));
    }
    let max = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("PASS max_rel_err={max:.3e}");
        Ok(())
    } else {
        println!("FAIL max_rel_err={max:.3e}");
        Err(CliError::Validation(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let m = generate_synthetic(a.n, a.size, a.seed, &a.out_dir)?;
    println!("wrote {} samples of {}x{} to {}", m.len(), a.size, a.size, a.out_dir.join("manifest.tsv").display());
    Ok(())
}
