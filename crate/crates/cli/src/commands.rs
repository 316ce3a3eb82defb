use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gaze_core::data::{
    generate_scenes, generate_synthetic, load_annotations, load_raster, make_sample, save_annotations, GazeSample,
    InputShape, Split,
};
use gaze_core::field::{build_field_stack, Direction, NormalizedPoint};
use gaze_core::gradcheck::{run_suite, CheckResult, GradcheckOptions};
use gaze_core::grid_csv::write_grid;
use gaze_core::metrics::{default_thresholds, MetricReport};
use gaze_core::model::{evaluate, train_staged, GazeNet, NetworkSpec, Predictor, TrainingLog};
use gaze_core::params::Checkpoint;
use log::{info, warn};
use serde::Serialize;

use crate::config::{PredictorKind, RunConfig, SplitName};
use crate::error::CliError;

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn split_of(name: SplitName) -> Split {
    match name {
        SplitName::Train => Split::Train,
        SplitName::Test => Split::Test,
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = &cfg.data.scene;
    spec.validate().map_err(CliError::from_config)?;
    let out = cfg.out_dir();
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| CliError::io(&images, e))?;
    let mut records = Vec::new();
    for (split, n) in [(Split::Train, cfg.data.train_samples), (Split::Test, cfg.data.test_samples)] {
        for scene in generate_scenes(spec, split, n)? {
            gaze_core::data::raster::save_png(&scene.image, &out.join(&scene.record.image))?;
            records.push(scene.record);
        }
    }
    save_annotations(&out.join(ANNOTATION_FILE), &records)?;
    println!(
        "wrote {} train and {} test scenes to {}",
        cfg.data.train_samples,
        cfg.data.test_samples,
        out.display()
    );
    Ok(())
}

/// Samples of one split, read from `data.dir` or generated in memory.
pub fn load_split(cfg: &RunConfig, split: Split, shape: InputShape) -> Result<Vec<GazeSample>, CliError> {
    let Some(dir) = &cfg.data.dir else {
        cfg.data.scene.validate().map_err(CliError::from_config)?;
        let n = match split {
            Split::Train => cfg.data.train_samples,
            Split::Test => cfg.data.test_samples,
        };
        return Ok(generate_synthetic(&cfg.data.scene, split, n, shape)?);
    };
    let path = dir.join(ANNOTATION_FILE);
    if !path.is_file() {
        return Err(CliError::data(format!("annotation file not found: {}", path.display())));
    }
    let mut samples = Vec::new();
    let mut skipped = 0;
    for record in load_annotations(&path)?.into_iter().filter(|r| r.split == split) {
        let image = load_raster(&dir.join(&record.image))?;
        match make_sample(&record, &image, shape)? {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} records whose gaze point coincides with the head");
    }
    Ok(samples)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = &cfg.train;
    tc.validate().map_err(CliError::from_config)?;
    let spec = NetworkSpec::new(&cfg.model, tc).map_err(CliError::from_config)?;
    let samples = load_split(cfg, Split::Train, spec.input_shape())?;
    let mut net = GazeNet::new(spec, tc.seed)?;
    info!(
        "training on {} samples, batch size {}, {} parameters",
        samples.len(),
        tc.batch_size,
        net.params.scalar_count()
    );

    let out = cfg.out_dir().to_path_buf();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = TrainingLog::default();
    let result = train_staged(&mut net, &samples, tc, |record, net| {
        info!(
            "stage {} epoch {}: loss {:.6} ({:.1}s)",
            record.stage, record.epoch, record.loss, record.seconds
        );
        log.records.push(record.clone());
        std::fs::write(&log_path, log.to_csv()).map_err(|e| gaze_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        net.to_checkpoint()?.save(&ckpt_path)
    });
    if let Err(e) = result {
        std::fs::write(&log_path, log.to_csv()).map_err(|e| CliError::io(&log_path, e))?;
        return Err(e.into());
    }
    // a schedule with no epochs still leaves a usable checkpoint
    net.to_checkpoint()?.save(&ckpt_path)?;
    std::fs::write(&log_path, log.to_csv()).map_err(|e| CliError::io(&log_path, e))?;
    if let Some(last) = log.records.last() {
        println!("final loss {:.6}", last.loss);
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    predictor: PredictorKind,
    split: SplitName,
    aggregate: &'a gaze_core::metrics::Aggregate,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report(dir: &Path, report: &MetricReport, predictor: PredictorKind, split: SplitName) -> Result<(), CliError> {
    let path = dir.join(PER_SAMPLE_FILE);
    let mut w = create(&path)?;
    let io = |e| CliError::io(&path, e);
    writeln!(w, "index,id,pred_x,pred_y,auc,dist,mdist,ang,mang").map_err(io)?;
    for s in &report.per_sample {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.index,
            s.id,
            s.pred_x,
            s.pred_y,
            s.auc,
            s.dist,
            s.mdist,
            opt(s.ang),
            opt(s.mang)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = dir.join(CURVE_FILE);
    let mut w = create(&path)?;
    let io = |e| CliError::io(&path, e);
    writeln!(w, "threshold,fraction").map_err(io)?;
    for p in &report.curve {
        writeln!(w, "{},{}", p.threshold, p.fraction).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = dir.join(METRICS_FILE);
    let body = MetricsFile {
        predictor,
        split,
        aggregate: &report.aggregate,
    };
    let mut text = serde_json::to_string_pretty(&body).expect("metrics serialize");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let ec = &cfg.eval;
    let split = split_of(ec.split);
    let net;
    let (predictor, shape) = match ec.predictor {
        PredictorKind::Model => {
            let path: &PathBuf = ec
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::config("eval.checkpoint is required for the model predictor"))?;
            if !path.is_file() {
                return Err(CliError::data(format!("checkpoint not found: {}", path.display())));
            }
            net = GazeNet::from_checkpoint(&Checkpoint::load(path)?)?;
            let shape = net.spec.input_shape();
            (Predictor::Model(&net), shape)
        }
        kind => {
            cfg.train.validate().map_err(CliError::from_config)?;
            let spec = NetworkSpec::new(&cfg.model, &cfg.train).map_err(CliError::from_config)?;
            let (resolution, sigma) = (cfg.train.heatmap_resolution, cfg.train.sigma);
            let p = if kind == PredictorKind::Oracle {
                Predictor::Oracle { resolution, sigma }
            } else {
                Predictor::Center { resolution, sigma }
            };
            (p, spec.input_shape())
        }
    };
    let samples = load_split(cfg, split, shape)?;
    let report = evaluate(predictor, &samples, &default_thresholds())?;
    write_report(cfg.out_dir(), &report, ec.predictor, ec.split)?;
    let a = &report.aggregate;
    println!(
        "samples {} auc {:.4} dist {:.4} mdist {:.4} ang {:.2} mang {:.2}",
        a.samples, a.auc, a.dist, a.mdist, a.ang, a.mang
    );
    Ok(())
}

/// File name of the dump for one exponent.
pub fn field_file_name(gamma: f64) -> String {
    format!("field_gamma{gamma}.csv")
}

pub fn field(cfg: &RunConfig) -> Result<(), CliError> {
    let fc = &cfg.field;
    let head = NormalizedPoint::new(fc.head[0], fc.head[1]).map_err(CliError::from_config)?;
    let dir = Direction::new(fc.direction[0], fc.direction[1]);
    let stack = build_field_stack(head, dir, fc.size, fc.size, &fc.gammas).map_err(CliError::from_config)?;
    for (k, &gamma) in stack.gammas.iter().enumerate() {
        let path = cfg.out_dir().join(field_file_name(gamma));
        let comments = [
            format!("head={},{}", head.x, head.y),
            format!("direction={},{}", dir.dx, dir.dy),
            format!("gamma={gamma}"),
        ];
        let mut w = create(&path)?;
        write_grid(&mut w, &comments, stack.width, stack.grid(k))
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let gc = &cfg.gradcheck;
    if !(gc.step > 0.0 && gc.step.is_finite()) {
        return Err(CliError::config(format!("gradcheck.step must be positive, got {}", gc.step)));
    }
    let options = GradcheckOptions {
        step: gc.step,
        seed: gc.seed,
        corrupt: gc.corrupt.clone(),
    };
    let results: Vec<CheckResult> = run_suite(&options)?;
    if let Some(name) = &gc.corrupt {
        if !results.iter().any(|r| &r.name == name) {
            return Err(CliError::config(format!("gradcheck.corrupt names no check: `{name}`")));
        }
    }
    for r in &results {
        println!(
            "{:<18} {:>12.3e} < {:.0e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let path = cfg.out_dir().join(GRADCHECK_FILE);
    let text = serde_json::to_string_pretty(&results).expect("results serialize");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
