//! Run configuration, training loops for both models, and split evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_anchor_grid, BackboneConfig, Bindings, PointModel};
use crate::data::{augment, stream, AnnotatedImage, AugmentationConfig};
use crate::density::{bce_iou_graph, find_peaks, make_rdm, peaks_to_predictions, DensityModel, PeakParams};
use crate::error::{Error, Result};
use crate::evaluation::{extract_predictions, match_points, MatchingMode, MetricsAccumulator, MetricsReport};
use crate::losses::{point_losses, LossConfig};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamSet, Tensor};

/// Density-baseline settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub w_bce: f64,
    pub w_iou: f64,
    pub peaks: PeakParams,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            sigma: 6.0,
            w_bce: 0.8,
            w_iou: 0.2,
            peaks: PeakParams {
                min_distance: 3,
                abs_threshold: 0.5,
            },
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("density.kernel_size must be odd, got {}", self.kernel_size)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("density.sigma must be positive, got {}", self.sigma)));
        }
        if !(self.w_bce >= 0.0 && self.w_iou >= 0.0) {
            return Err(Error::Config("density loss weights must be >= 0".into()));
        }
        self.peaks.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub optimizer: AdamWConfig,
    pub density: DensityConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_radius: f64,
    pub threshold: f64,
    pub matching: MatchingMode,
    /// Evaluate on the test split every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Write a numbered checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
            optimizer: AdamWConfig::default(),
            density: DensityConfig::default(),
            epochs: 30,
            batch_size: 1,
            seed: 0,
            eval_radius: crate::evaluation::DEFAULT_RADIUS,
            threshold: crate::evaluation::DEFAULT_THRESHOLD,
            matching: MatchingMode::Greedy,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        self.optimizer.validate()?;
        self.density.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.eval_radius > 0.0) {
            return Err(Error::Config(format!("eval_radius must be > 0, got {}", self.eval_radius)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        total: f64,
        #[serde(flatten)]
        parts: BTreeMap<String, f64>,
    },
    Epoch {
        epoch: usize,
        step: u64,
        seconds: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        metrics: Option<MetricsReport>,
    },
    Final {
        epoch: usize,
        step: u64,
        metrics: MetricsReport,
    },
}

/// Append-only record of a run, optionally mirrored line by line to a writer.
#[derive(Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<Box<dyn Write>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sink(sink: Box<dyn Write>) -> Self {
        Self {
            records: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn append(&mut self, record: LogRecord) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&record).expect("serializable record");
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io("run log", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Total loss of every step record, in order.
    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { total, .. } => Some(*total),
                _ => None,
            })
            .collect()
    }
}

/// Parameters, optimizer, and progress of a run at an epoch boundary.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: AdamW,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn fresh(params: ParamSet, config: &AdamWConfig) -> Self {
        let optimizer = AdamW::new(config.clone(), &params);
        Self {
            params,
            optimizer,
            epochs_done: 0,
        }
    }

    /// Optimizer moments plus the epoch counter, for checkpointing.
    pub fn optimizer_state(&self) -> Result<ParamSet> {
        let mut state = self.optimizer.state(&self.params)?;
        state.insert("train.epochs_done", Tensor::scalar(self.epochs_done as f64))?;
        Ok(state)
    }

    pub fn restore(params: ParamSet, config: &AdamWConfig, state: &ParamSet) -> Result<Self> {
        let optimizer = AdamW::from_state(config.clone(), &params, state)?;
        let epochs_done = state
            .get("train.epochs_done")
            .ok_or_else(|| Error::Version("optimizer state lacks train.epochs_done".into()))?
            .item() as usize;
        Ok(Self {
            params,
            optimizer,
            epochs_done,
        })
    }
}

/// Rejects images with more annotated points than the model has proposals.
pub fn check_capacity(images: &[AnnotatedImage], config: &BackboneConfig) -> Result<()> {
    for img in images {
        let padded = img.pad_to_multiple(config.encoder_stride());
        let grid = build_anchor_grid(padded.height, padded.width, config)?;
        if grid.len() < img.points.len() {
            return Err(Error::Validation(format!(
                "image {}: {} annotated points exceed the {} proposals of a {}x{} input",
                img.id,
                img.points.len(),
                grid.len(),
                img.width,
                img.height
            )));
        }
    }
    Ok(())
}

/// Loss of one image as a graph variable with named components for the log.
type ImageLoss<'a> = dyn FnMut(&mut Graph, &Bindings, &AnnotatedImage) -> Result<(crate::tensor::Var, BTreeMap<String, f64>)> + 'a;

/// Hooks invoked at the end of every epoch with the updated state.
pub type EpochHook<'a> = dyn FnMut(&TrainState, &mut RunLog) -> Result<()> + 'a;

const AUGMENT_STREAM: u64 = 0xA55A_0000_0000_0000;

fn run_epochs(
    config: &RunConfig,
    train: &[AnnotatedImage],
    state: &mut TrainState,
    log: &mut RunLog,
    image_loss: &mut ImageLoss<'_>,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let stride = config.backbone.encoder_stride();
    while state.epochs_done < config.epochs {
        let epoch = state.epochs_done;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(config.seed, epoch as u64));
        let mut aug_rng = stream(config.seed ^ AUGMENT_STREAM, epoch as u64);
        for batch in order.chunks(config.batch_size) {
            state.params.clear_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            let mut parts: BTreeMap<String, f64> = BTreeMap::new();
            for &i in batch {
                let img = augment(&train[i], &config.augmentation, &mut aug_rng).pad_to_multiple(stride);
                let mut g = Graph::new();
                let b = Bindings::bind(&mut g, &state.params)?;
                let (loss, named) = image_loss(&mut g, &b, &img)?;
                let scaled = g.affine(loss, scale, 0.0)?;
                g.backward(scaled)?;
                b.accumulate_grads(&mut g, &mut state.params)?;
                total += scale * g.value(loss).item();
                for (k, v) in named {
                    *parts.entry(k).or_insert(0.0) += scale * v;
                }
            }
            state.optimizer.step(&mut state.params)?;
            log.append(LogRecord::Step {
                epoch,
                step: state.optimizer.step_count(),
                total,
                parts,
            })?;
        }
        state.epochs_done += 1;
        log.append(LogRecord::Epoch {
            epoch,
            step: state.optimizer.step_count(),
            seconds: started.elapsed().as_secs_f64(),
            metrics: None,
        })?;
        hook(state, log)?;
    }
    Ok(())
}

/// Trains the point model from `state` until `config.epochs` epochs are done.
pub fn train_point_model(
    config: &RunConfig,
    train: &[AnnotatedImage],
    state: &mut TrainState,
    log: &mut RunLog,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    config.validate()?;
    check_capacity(train, &config.backbone)?;
    for img in train {
        img.validate(config.backbone.num_classes)?;
    }
    let model = PointModel::new(config.backbone.clone(), 0)?;
    let mut image_loss = |g: &mut Graph, b: &Bindings, img: &AnnotatedImage| {
        let x = g.constant(img.to_tensor())?;
        let (_, proposals) = model.propose(g, b, x)?;
        let gt = img.ground_truth();
        let (loss, parts, _) = point_losses(g, &proposals, &gt, &config.loss)
            .map_err(|e| match e {
                Error::Infeasible { proposals, targets } => Error::Validation(format!(
                    "image {}: {targets} annotated points exceed {proposals} proposals",
                    img.id
                )),
                other => other,
            })?;
        let named = BTreeMap::from([
            ("reg".to_string(), parts.reg),
            ("det".to_string(), parts.det),
            ("cls".to_string(), parts.cls),
        ]);
        Ok((loss, named))
    };
    run_epochs(config, train, state, log, &mut image_loss, hook)
}

/// Trains the density baseline against Gaussian reference maps.
pub fn train_density_model(
    config: &RunConfig,
    train: &[AnnotatedImage],
    state: &mut TrainState,
    log: &mut RunLog,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    config.validate()?;
    let model = DensityModel::new(config.backbone.clone(), 0)?;
    let d = &config.density;
    let mut image_loss = |g: &mut Graph, b: &Bindings, img: &AnnotatedImage| {
        let x = g.constant(img.to_tensor())?;
        let pred = model.forward(g, b, x)?;
        let rdm = make_rdm(&img.ground_truth(), img.height, img.width, d.kernel_size, d.sigma)?;
        let target = g.constant(rdm.to_tensor())?;
        let loss = bce_iou_graph(g, pred, target, d.w_bce, d.w_iou)?;
        Ok((loss, BTreeMap::new()))
    };
    run_epochs(config, train, state, log, &mut image_loss, hook)
}

/// Detection and classification metrics of the point model on `images`.
pub fn evaluate_point_model(
    model: &PointModel,
    images: &[AnnotatedImage],
    radius: f64,
    threshold: f64,
    mode: MatchingMode,
) -> Result<MetricsReport> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("radius must be > 0, got {radius}")));
    }
    let mut acc = MetricsAccumulator::new(model.config.num_classes);
    for img in images {
        let padded = img.pad_to_multiple(model.config.encoder_stride());
        let proposals = model.predict(&padded.to_tensor())?;
        let preds = extract_predictions(&proposals, threshold);
        let gt = img.ground_truth();
        let matching = match_points(&preds, &gt, radius, mode)?;
        acc.add(&matching, &preds, &gt)?;
    }
    Ok(acc.report())
}

/// Detection metrics of the density baseline with the given peak search.
/// Peaks carry no class, so only the detection block is meaningful.
pub fn evaluate_density_model(
    model: &DensityModel,
    images: &[AnnotatedImage],
    peaks: &PeakParams,
    radius: f64,
    mode: MatchingMode,
) -> Result<MetricsReport> {
    let maps = images
        .iter()
        .map(|img| model.predict(&img.pad_to_multiple(model.config.encoder_stride()).to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    evaluate_density_maps(&maps, images, peaks, radius, mode)
}

/// Like [`evaluate_density_model`] on precomputed maps, so one forward pass
/// can serve a whole sweep of peak settings.
pub fn evaluate_density_maps(
    maps: &[crate::density::DensityMap],
    images: &[AnnotatedImage],
    peaks: &PeakParams,
    radius: f64,
    mode: MatchingMode,
) -> Result<MetricsReport> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("radius must be > 0, got {radius}")));
    }
    let mut acc = MetricsAccumulator::new(1);
    for (map, img) in maps.iter().zip(images) {
        let preds = peaks_to_predictions(&find_peaks(map, peaks)?);
        let mut gt = img.ground_truth();
        gt.points.iter_mut().for_each(|p| p.class_id = 0);
        let matching = match_points(&preds, &gt, radius, mode)?;
        acc.add(&matching, &preds, &gt)?;
    }
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_image, GeneratorConfig};

    fn tiny_config() -> RunConfig {
        RunConfig {
            backbone: BackboneConfig {
                stage_channels: vec![4, 8, 8, 8],
                pfa_channels: 8,
                ..Default::default()
            },
            augmentation: AugmentationConfig::identity(),
            epochs: 2,
            ..Default::default()
        }
    }

    fn images(n: usize) -> Vec<AnnotatedImage> {
        (0..n).map(|i| generate_image(&GeneratorConfig::default(), i).unwrap()).collect()
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut config = tiny_config();
        config.optimizer.lr = 0.0;
        config.optimizer.weight_decay = 0.0;
        let model = PointModel::new(config.backbone.clone(), 3).unwrap();
        let mut state = TrainState::fresh(model.params.clone(), &config.optimizer);
        train_point_model(&config, &images(2), &mut state, &mut RunLog::new(), &mut |_, _| Ok(())).unwrap();
        for ((_, a), (_, b)) in state.params.iter().zip(model.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn crowded_image_is_rejected_with_its_id() {
        let mut img = images(1).remove(0);
        img.points = (0..21)
            .map(|i| crate::types::GroundTruthPoint {
                x: (i % 7) as f64 * 9.0,
                y: (i / 7) as f64 * 9.0,
                class_id: 0,
            })
            .collect();
        let err = check_capacity(&[img.clone()], &BackboneConfig::default()).unwrap_err();
        assert!(err.to_string().contains(&img.id), "{err}");
    }

    #[test]
    fn log_records_every_step_and_epoch() {
        let config = tiny_config();
        let model = PointModel::new(config.backbone.clone(), 3).unwrap();
        let mut state = TrainState::fresh(model.params, &config.optimizer);
        let mut log = RunLog::new();
        let mut epochs_seen = Vec::new();
        train_point_model(&config, &images(3), &mut state, &mut log, &mut |s, _| {
            epochs_seen.push(s.epochs_done);
            Ok(())
        })
        .unwrap();
        assert_eq!(log.step_losses().len(), 6);
        assert_eq!(epochs_seen, vec![1, 2]);
        assert_eq!(state.optimizer.step_count(), 6);
    }

    #[test]
    fn state_round_trips_through_optimizer_checkpoint() {
        let config = tiny_config();
        let model = PointModel::new(config.backbone.clone(), 3).unwrap();
        let mut state = TrainState::fresh(model.params, &config.optimizer);
        state.epochs_done = 4;
        let saved = state.optimizer_state().unwrap();
        let back = TrainState::restore(state.params.clone(), &config.optimizer, &saved).unwrap();
        assert_eq!(back.epochs_done, 4);
    }

    #[test]
    fn zero_radius_is_rejected() {
        let model = PointModel::new(tiny_config().backbone, 0).unwrap();
        assert!(matches!(
            evaluate_point_model(&model, &images(1), 0.0, 0.5, MatchingMode::Greedy),
            Err(Error::Config(_))
        ));
    }
}
