//! Directory-level commands: each run owns an output directory holding its
//! echoed config, log, checkpoints, and metrics.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::PointModel;
use crate::data::{generate_dataset, read_dataset, write_dataset, AnnotatedImage, Dataset, DatasetConfig, Manifest, Split};
use crate::density::{DensityModel, PeakParams};
use crate::error::{Error, Result};
use crate::evaluation::{extract_predictions, time_inference, MetricsReport, Prediction};
use crate::render::{line_plot, overlay, Canvas, Marker, Series};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamSet};
use crate::train::{
    evaluate_density_maps, evaluate_point_model, train_density_model, train_point_model, LogRecord, RunConfig, RunLog,
    TrainState,
};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const POINT_CHECKPOINT: &str = "model.ptck";
pub const DENSITY_CHECKPOINT: &str = "density.ptck";
pub const OPTIMIZER_CHECKPOINT: &str = "optimizer.ptck";

/// Parses a JSON config (or starts from defaults) and applies `key=value`
/// overrides on dotted paths. Values parse as JSON when possible and as
/// strings otherwise. Unknown keys are rejected.
pub fn load_config<T: DeserializeOwned + Serialize + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::to_value(T::default()).expect("serializable default"),
    };
    // Fill omitted fields so dotted overrides can reach them.
    let defaults = serde_json::to_value(T::default()).expect("serializable default");
    merge_defaults(&mut value, &defaults);
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

fn merge_defaults(value: &mut Value, defaults: &Value) {
    if let (Value::Object(map), Value::Object(defs)) = (value, defaults) {
        for (k, d) in defs {
            match map.get_mut(k) {
                Some(v) => merge_defaults(v, d),
                None => {
                    map.insert(k.clone(), d.clone());
                }
            }
        }
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not an object", parts[..i].join("."))))?;
        if !map.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new);
            return Ok(());
        }
        cur = map.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(config: &DatasetConfig, out: &Path) -> Result<Manifest> {
    let dataset = generate_dataset(config)?;
    create_dir(out)?;
    write_dataset(&dataset, out)?;
    Ok(dataset.manifest)
}

/// Flags and final test metrics of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pfa_enabled: bool,
    pub independent_classifier_enabled: bool,
    pub epochs: usize,
    pub steps: u64,
    pub test: MetricsReport,
}

fn owned(images: Vec<&AnnotatedImage>) -> Vec<AnnotatedImage> {
    images.into_iter().cloned().collect()
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let dataset = read_dataset(&config.dataset)?;
    if dataset.num_classes() != config.backbone.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but backbone.num_classes is {}",
            dataset.num_classes(),
            config.backbone.num_classes
        )));
    }
    Ok(dataset)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ModelKind {
    Point,
    Density,
}

impl ModelKind {
    fn checkpoint(self) -> &'static str {
        match self {
            ModelKind::Point => POINT_CHECKPOINT,
            ModelKind::Density => DENSITY_CHECKPOINT,
        }
    }

    fn init(self, config: &RunConfig) -> Result<ParamSet> {
        Ok(match self {
            ModelKind::Point => PointModel::new(config.backbone.clone(), config.seed)?.params,
            ModelKind::Density => DensityModel::new(config.backbone.clone(), config.seed)?.params,
        })
    }
}

/// Shared driver of both training commands. With `resume`, continues from the
/// latest checkpoint in the output directory.
fn train_run(config: &RunConfig, resume: bool, kind: ModelKind) -> Result<TrainSummary> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let out = &config.output_dir;
    create_dir(&out.join("checkpoints"))?;
    let state = if resume {
        let echoed: RunConfig = read_json(&out.join(CONFIG_FILE))?;
        if echoed.backbone != config.backbone {
            return Err(Error::Version(format!(
                "{}: backbone differs from the run being resumed",
                out.join(CONFIG_FILE).display()
            )));
        }
        let params = read_checkpoint(&out.join(kind.checkpoint()))?;
        let reference = kind.init(config)?;
        reference.check_compatible(&params)?;
        let opt = read_checkpoint(&out.join(OPTIMIZER_CHECKPOINT))?;
        let mut state = TrainState::restore(params, &config.optimizer, &opt)?;
        state.params.iter_mut().for_each(|(_, t)| t.set_requires_grad(true));
        state
    } else {
        TrainState::fresh(kind.init(config)?, &config.optimizer)
    };
    write_json(&out.join(CONFIG_FILE), config)?;
    let log_path = out.join(LOG_FILE);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = RunLog::with_sink(Box::new(BufWriter::new(file)));
    let train = owned(dataset.split(Split::Train));
    let test = owned(dataset.split(Split::Test));

    let evaluate = |params: &ParamSet| -> Result<MetricsReport> {
        match kind {
            ModelKind::Point => {
                let model = PointModel::from_params(config.backbone.clone(), params.clone())?;
                evaluate_point_model(&model, &test, config.eval_radius, config.threshold, config.matching)
            }
            ModelKind::Density => {
                let model = DensityModel::from_params(config.backbone.clone(), params.clone())?;
                let maps = density_maps(&model, &test)?;
                evaluate_density_maps(&maps, &test, &config.density.peaks, config.eval_radius, config.matching)
            }
        }
    };
    let mut hook = |state: &TrainState, log: &mut RunLog| -> Result<()> {
        let epoch = state.epochs_done;
        write_checkpoint(&out.join(kind.checkpoint()), &state.params)?;
        write_checkpoint(&out.join(OPTIMIZER_CHECKPOINT), &state.optimizer_state()?)?;
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let name = format!("epoch_{epoch:04}.{}", kind.checkpoint());
            write_checkpoint(&out.join("checkpoints").join(name), &state.params)?;
        }
        if config.eval_every > 0 && epoch % config.eval_every == 0 && epoch < config.epochs {
            log.append(LogRecord::Epoch {
                epoch: epoch - 1,
                step: state.optimizer.step_count(),
                seconds: 0.0,
                metrics: Some(evaluate(&state.params)?),
            })?;
        }
        Ok(())
    };
    let mut state = state;
    match kind {
        ModelKind::Point => train_point_model(config, &train, &mut state, &mut log, &mut hook)?,
        ModelKind::Density => train_density_model(config, &train, &mut state, &mut log, &mut hook)?,
    }
    write_checkpoint(&out.join(kind.checkpoint()), &state.params)?;
    write_checkpoint(&out.join(OPTIMIZER_CHECKPOINT), &state.optimizer_state()?)?;
    let metrics = evaluate(&state.params)?;
    log.append(LogRecord::Final {
        epoch: state.epochs_done,
        step: state.optimizer.step_count(),
        metrics: metrics.clone(),
    })?;
    let summary = TrainSummary {
        pfa_enabled: config.backbone.pfa_enabled,
        independent_classifier_enabled: config.backbone.independent_classifier_enabled,
        epochs: state.epochs_done,
        steps: state.optimizer.step_count(),
        test: metrics,
    };
    write_json(&out.join(METRICS_FILE), &summary)?;
    Ok(summary)
}

pub fn cmd_train(config: &RunConfig, resume: bool) -> Result<TrainSummary> {
    train_run(config, resume, ModelKind::Point)
}

pub fn cmd_baseline_train(config: &RunConfig, resume: bool) -> Result<TrainSummary> {
    train_run(config, resume, ModelKind::Density)
}

/// Echoed config of a run directory.
pub fn read_run_config(run_dir: &Path) -> Result<RunConfig> {
    read_json(&run_dir.join(CONFIG_FILE))
}

pub fn load_point_model(run_dir: &Path, checkpoint: Option<&Path>) -> Result<PointModel> {
    let config = read_run_config(run_dir)?;
    let path = checkpoint.map_or_else(|| run_dir.join(POINT_CHECKPOINT), Path::to_path_buf);
    PointModel::from_params(config.backbone, read_checkpoint(&path)?)
}

pub fn load_density_model(run_dir: &Path, checkpoint: Option<&Path>) -> Result<DensityModel> {
    let config = read_run_config(run_dir)?;
    let path = checkpoint.map_or_else(|| run_dir.join(DENSITY_CHECKPOINT), Path::to_path_buf);
    DensityModel::from_params(config.backbone, read_checkpoint(&path)?)
}

/// Options of [`cmd_eval`]; `None` fields fall back to the run's config.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: Option<Split>,
    pub radius: Option<f64>,
    pub threshold: Option<f64>,
    /// Measure mean inference seconds per image.
    pub timing: bool,
}

/// Read-only evaluation of a trained point model on one split.
pub fn cmd_eval(run_dir: &Path, options: &EvalOptions) -> Result<MetricsReport> {
    let config = read_run_config(run_dir)?;
    let radius = options.radius.unwrap_or(config.eval_radius);
    if !(radius > 0.0) {
        return Err(Error::Config(format!("radius must be > 0, got {radius}")));
    }
    let threshold = options.threshold.unwrap_or(config.threshold);
    let model = load_point_model(run_dir, options.checkpoint.as_deref())?;
    let dataset = read_dataset(options.dataset.as_deref().unwrap_or(&config.dataset))?;
    let images = owned(dataset.split(options.split.unwrap_or(Split::Test)));
    let mut report = evaluate_point_model(&model, &images, radius, threshold, config.matching)?;
    if options.timing && !images.is_empty() {
        let stride = model.config.encoder_stride();
        let tensors: Vec<_> = images.iter().map(|i| i.pad_to_multiple(stride).to_tensor()).collect();
        report.seconds_per_image = Some(time_inference(&model, &tensors, threshold)?);
    }
    Ok(report)
}

/// Predictions of a trained point model on one PNG image.
pub fn cmd_infer(run_dir: &Path, image: &Path, threshold: Option<f64>) -> Result<Vec<Prediction>> {
    let config = read_run_config(run_dir)?;
    let model = load_point_model(run_dir, None)?;
    let (height, width, pixels) = crate::data::read_rgb_png(image)?;
    let img = AnnotatedImage {
        id: image.display().to_string(),
        height,
        width,
        pixels,
        points: Vec::new(),
    };
    let padded = img.pad_to_multiple(model.config.encoder_stride());
    let proposals = model.predict(&padded.to_tensor())?;
    let preds = extract_predictions(&proposals, threshold.unwrap_or(config.threshold));
    Ok(preds
        .into_iter()
        .filter(|p| p.x < width as f64 && p.y < height as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QRow {
    pub q: f64,
    pub detection_f1: f64,
    pub classification_f1: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PLOT_SIZE: (usize, usize) = (480, 320);

/// Trains one model per `q` (same seed and dataset) under `out/q_<q>` and
/// writes `sweep_q.csv` and `sweep_q.png` into `out`.
pub fn cmd_sweep_q(config: &RunConfig, qs: &[f64], out: &Path) -> Result<Vec<QRow>> {
    if qs.is_empty() {
        return Err(Error::Config("sweep needs at least one q".into()));
    }
    for &q in qs {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!("loss.q must lie in (0, 1], got {q}")));
        }
    }
    create_dir(out)?;
    let mut rows = Vec::with_capacity(qs.len());
    for &q in qs {
        let mut c = config.clone();
        c.loss.q = q;
        c.output_dir = out.join(format!("q_{q}"));
        let summary = cmd_train(&c, false)?;
        rows.push(QRow {
            q,
            detection_f1: summary.test.detection.f1,
            classification_f1: summary.test.classification_macro.f1,
        });
    }
    write_csv(&out.join("sweep_q.csv"), &rows, &["q", "detection_f1", "classification_f1"])?;
    let plot = line_plot(
        &[
            Series {
                points: rows.iter().map(|r| (r.q, r.detection_f1)).collect(),
                color: [40, 90, 200],
            },
            Series {
                points: rows.iter().map(|r| (r.q, r.classification_f1)).collect(),
                color: [210, 50, 40],
            },
        ],
        PLOT_SIZE.0,
        PLOT_SIZE.1,
    );
    plot.write_png(&out.join("sweep_q.png"))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    /// Empty for the point-based method, which has no such parameter.
    pub min_distance: Option<usize>,
    pub detection_precision: f64,
    pub detection_recall: f64,
    pub detection_f1: f64,
}

fn density_maps(model: &DensityModel, images: &[AnnotatedImage]) -> Result<Vec<crate::density::DensityMap>> {
    let stride = model.config.encoder_stride();
    images.iter().map(|img| model.predict(&img.pad_to_multiple(stride).to_tensor())).collect()
}

/// Evaluates a trained density baseline under each `min_distance`, plus one
/// row for a point-model run when given. Writes `baseline_sweep.csv` and
/// `baseline_sweep.png` into `out`.
pub fn cmd_baseline_sweep(
    density_run: &Path,
    min_distances: &[usize],
    point_run: Option<&Path>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if min_distances.is_empty() {
        return Err(Error::Config("sweep needs at least one min_distance".into()));
    }
    let config = read_run_config(density_run)?;
    let model = load_density_model(density_run, None)?;
    let dataset = read_dataset(&config.dataset)?;
    let test = owned(dataset.split(Split::Test));
    let maps = density_maps(&model, &test)?;
    let mut rows = Vec::with_capacity(min_distances.len() + 1);
    for &d in min_distances {
        let peaks = PeakParams {
            min_distance: d,
            ..config.density.peaks
        };
        let r = evaluate_density_maps(&maps, &test, &peaks, config.eval_radius, config.matching)?;
        rows.push(SweepRow {
            method: "density".into(),
            min_distance: Some(d),
            detection_precision: r.detection.precision,
            detection_recall: r.detection.recall,
            detection_f1: r.detection.f1,
        });
    }
    if let Some(run) = point_run {
        let r = cmd_eval(
            run,
            &EvalOptions {
                dataset: Some(config.dataset.clone()),
                ..Default::default()
            },
        )?;
        rows.push(SweepRow {
            method: "point".into(),
            min_distance: None,
            detection_precision: r.detection.precision,
            detection_recall: r.detection.recall,
            detection_f1: r.detection.f1,
        });
    }
    create_dir(out)?;
    write_csv(
        &out.join("baseline_sweep.csv"),
        &rows,
        &["method", "min_distance", "detection_precision", "detection_recall", "detection_f1"],
    )?;
    let density: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.min_distance.map(|d| (d as f64, r.detection_f1)))
        .collect();
    let mut series = vec![Series {
        points: density.clone(),
        color: [40, 90, 200],
    }];
    if let Some(p) = rows.iter().find(|r| r.min_distance.is_none()) {
        let (lo, hi) = density.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q.0), b.max(q.0)));
        series.push(Series {
            points: vec![(lo, p.detection_f1), (hi, p.detection_f1)],
            color: [210, 50, 40],
        });
    }
    line_plot(&series, PLOT_SIZE.0, PLOT_SIZE.1).write_png(&out.join("baseline_sweep.png"))?;
    Ok(rows)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PointFile {
    Annotation { points: Vec<crate::types::GroundTruthPoint> },
    Predictions(Vec<Prediction>),
}

/// Reads markers from an annotation sidecar or a prediction list.
pub fn read_markers(path: &Path) -> Result<Vec<Marker>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: PointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: not an annotation or prediction list: {e}", path.display())))?;
    Ok(match parsed {
        PointFile::Annotation { points } => points
            .iter()
            .map(|p| Marker {
                x: p.x,
                y: p.y,
                class_id: p.class_id,
            })
            .collect(),
        PointFile::Predictions(preds) => preds
            .iter()
            .map(|p| Marker {
                x: p.x,
                y: p.y,
                class_id: p.class_id,
            })
            .collect(),
    })
}

pub fn cmd_render(image: &Path, points: &Path, out: &Path, num_classes: usize, dot_radius: f64) -> Result<()> {
    let base = Canvas::read_png(image)?;
    let markers = read_markers(points)?;
    overlay(&base, &markers, num_classes, dot_radius).write_png(out)
}

/// Markdown table of ablation results, one row per configuration.
pub fn ablation_table(rows: &[(String, TrainSummary)]) -> String {
    let mut s = String::from("| configuration | pfa | ic | detection F1 | classification F1 |\n|---|---|---|---|---|\n");
    for (name, r) in rows {
        s += &format!(
            "| {name} | {} | {} | {:.4} | {:.4} |\n",
            r.pfa_enabled, r.independent_classifier_enabled, r.test.detection.f1, r.test.classification_macro.f1
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let c: RunConfig = load_config(None, &["loss.q=0.7".into(), "backbone.pfa_enabled=false".into(), "dataset=/x".into()]).unwrap();
        assert_eq!(c.loss.q, 0.7);
        assert!(!c.backbone.pfa_enabled);
        assert_eq!(c.dataset, PathBuf::from("/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load_config::<RunConfig>(None, &["loss.qq=0.7".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epochs": 3, "bogus": 1}"#).unwrap();
        let err = load_config::<RunConfig>(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epochs": 3, "loss": {"q": 0.2}}"#).unwrap();
        let c: RunConfig = load_config(Some(&path), &["loss.gamma=0.5".into()]).unwrap();
        assert_eq!((c.epochs, c.loss.q, c.loss.gamma, c.loss.beta), (3, 0.2, 0.5, 0.6));
    }
}
