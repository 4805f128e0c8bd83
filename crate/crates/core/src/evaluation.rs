//! Point-level scoring: thresholded proposals are matched to ground truth
//! within a pixel radius, then precision, recall, and F1 are computed for
//! detection (class-agnostic) and per class.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::PointModel;
use crate::error::{Error, Result};
use crate::matching::hungarian;
use crate::tensor::Tensor;
use crate::types::{GroundTruthSet, ProposalSet};

/// Matching radius in pixels.
pub const DEFAULT_RADIUS: f64 = 12.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub x: f64,
    pub y: f64,
    /// Objectness probability.
    pub score: f64,
    pub class_id: usize,
}

/// Keeps proposals with objectness strictly above `threshold`; no suppression.
pub fn extract_predictions(proposals: &ProposalSet, threshold: f64) -> Vec<Prediction> {
    proposals
        .coords
        .iter()
        .zip(&proposals.objectness)
        .zip(&proposals.class_probs)
        .filter(|((_, obj), _)| obj.1 > threshold)
        .map(|((&(x, y), obj), probs)| Prediction {
            x,
            y,
            score: obj.1,
            class_id: argmax(probs),
        })
        .collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    /// Image index within an evaluated set; 0 for single-image reports.
    pub image: usize,
    pub prediction: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointMatching {
    pub pairs: Vec<MatchPair>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Confidence-descending, nearest unmatched point within the radius.
    #[default]
    Greedy,
    /// Maximum-cardinality, minimum-distance assignment within the radius.
    Hungarian,
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("radius must be > 0, got {radius}")));
    }
    Ok(())
}

fn dist(p: &Prediction, gt: &GroundTruthSet, j: usize) -> f64 {
    (p.x - gt.points[j].x).hypot(p.y - gt.points[j].y)
}

fn finish(pairs: Vec<MatchPair>, n_pred: usize, n_gt: usize) -> PointMatching {
    let mut pred_used = vec![false; n_pred];
    let mut gt_used = vec![false; n_gt];
    for p in &pairs {
        pred_used[p.prediction] = true;
        gt_used[p.gt] = true;
    }
    PointMatching {
        pairs,
        unmatched_predictions: (0..n_pred).filter(|&i| !pred_used[i]).collect(),
        unmatched_gt: (0..n_gt).filter(|&j| !gt_used[j]).collect(),
    }
}

/// Predictions in descending score order (ties: lower index first) each take
/// their nearest unmatched ground-truth point at distance `<= radius`.
pub fn greedy_match(preds: &[Prediction], gt: &GroundTruthSet, radius: f64) -> Result<PointMatching> {
    check_radius(radius)?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for i in order {
        let best = (0..gt.len())
            .filter(|&j| !taken[j])
            .map(|j| (j, dist(&preds[i], gt, j)))
            .filter(|&(_, d)| d <= radius)
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 <= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((j, d)) = best {
            taken[j] = true;
            pairs.push(MatchPair {
                image: 0,
                prediction: i,
                gt: j,
                distance: d,
            });
        }
    }
    Ok(finish(pairs, preds.len(), gt.len()))
}

/// Radius-constrained optimal bipartite matching: maximizes the number of
/// pairs within `radius`, then minimizes their summed distance.
pub fn hungarian_match(preds: &[Prediction], gt: &GroundTruthSet, radius: f64) -> Result<PointMatching> {
    check_radius(radius)?;
    let (np, ng) = (preds.len(), gt.len());
    if np == 0 || ng == 0 {
        return Ok(finish(Vec::new(), np, ng));
    }
    // Any out-of-radius pair costs more than every feasible pairing combined.
    let penalty = radius * (np.min(ng) as f64 + 1.0);
    let cost = |i: usize, j: usize| {
        let d = dist(&preds[i], gt, j);
        if d <= radius {
            d
        } else {
            penalty
        }
    };
    let raw: Vec<(usize, usize)> = if np <= ng {
        hungarian(np, ng, cost).into_iter().enumerate().collect()
    } else {
        hungarian(ng, np, |j, i| cost(i, j))
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };
    let mut pairs: Vec<MatchPair> = raw
        .into_iter()
        .map(|(i, j)| MatchPair {
            image: 0,
            prediction: i,
            gt: j,
            distance: dist(&preds[i], gt, j),
        })
        .filter(|p| p.distance <= radius)
        .collect();
    pairs.sort_by_key(|p| p.prediction);
    Ok(finish(pairs, np, ng))
}

pub fn match_points(
    preds: &[Prediction],
    gt: &GroundTruthSet,
    radius: f64,
    mode: MatchingMode,
) -> Result<PointMatching> {
    match mode {
        MatchingMode::Greedy => greedy_match(preds, gt, radius),
        MatchingMode::Hungarian => hungarian_match(preds, gt, radius),
    }
}

/// Counts with derived rates; `P`, `R`, `F1` are 0 wherever their
/// denominators vanish.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub detection: Scores,
    pub per_class: Vec<Scores>,
    /// Averaged over classes that occur in the ground truth.
    pub classification_macro: MacroScores,
    pub num_predictions: usize,
    pub num_gt: usize,
    pub matched_pairs: Vec<MatchPair>,
    /// Mean wall-clock inference time per image, when measured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds_per_image: Option<f64>,
}

/// Sums counts over images before turning them into rates.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    det: [usize; 3],
    per_class: Vec<[usize; 3]>,
    gt_per_class: Vec<usize>,
    num_predictions: usize,
    num_gt: usize,
    pairs: Vec<MatchPair>,
    images: usize,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            det: [0; 3],
            per_class: vec![[0; 3]; num_classes],
            gt_per_class: vec![0; num_classes],
            num_predictions: 0,
            num_gt: 0,
            pairs: Vec::new(),
            images: 0,
        }
    }

    pub fn add(&mut self, matching: &PointMatching, preds: &[Prediction], gt: &GroundTruthSet) -> Result<()> {
        let c = self.per_class.len();
        let class_ok = |k: usize, what: &str| {
            if k >= c {
                Err(Error::Validation(format!("{what} class {k} outside {c} classes")))
            } else {
                Ok(())
            }
        };
        for p in preds {
            class_ok(p.class_id, "prediction")?;
        }
        for p in &gt.points {
            class_ok(p.class_id, "ground-truth")?;
            self.gt_per_class[p.class_id] += 1;
        }
        let image = self.images;
        self.images += 1;
        self.num_predictions += preds.len();
        self.num_gt += gt.len();
        self.det[0] += matching.pairs.len();
        self.det[1] += matching.unmatched_predictions.len();
        self.det[2] += matching.unmatched_gt.len();
        for pair in &matching.pairs {
            let predicted = preds[pair.prediction].class_id;
            let truth = gt.points[pair.gt].class_id;
            if predicted == truth {
                self.per_class[truth][0] += 1;
            } else {
                self.per_class[predicted][1] += 1;
                self.per_class[truth][2] += 1;
            }
            self.pairs.push(MatchPair { image, ..*pair });
        }
        for &i in &matching.unmatched_predictions {
            self.per_class[preds[i].class_id][1] += 1;
        }
        for &j in &matching.unmatched_gt {
            self.per_class[gt.points[j].class_id][2] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let per_class: Vec<Scores> = self
            .per_class
            .iter()
            .map(|&[tp, fp, fn_]| Scores::from_counts(tp, fp, fn_))
            .collect();
        let present: Vec<&Scores> = per_class
            .iter()
            .zip(&self.gt_per_class)
            .filter(|(_, &n)| n > 0)
            .map(|(s, _)| s)
            .collect();
        let mean = |f: fn(&Scores) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|s| f(s)).sum::<f64>() / present.len() as f64
            }
        };
        MetricsReport {
            detection: Scores::from_counts(self.det[0], self.det[1], self.det[2]),
            classification_macro: MacroScores {
                precision: mean(|s| s.precision),
                recall: mean(|s| s.recall),
                f1: mean(|s| s.f1),
            },
            per_class,
            num_predictions: self.num_predictions,
            num_gt: self.num_gt,
            matched_pairs: self.pairs.clone(),
            seconds_per_image: None,
        }
    }
}

/// Single-image report; class mismatches within the radius count as a false
/// positive for the predicted class and a false negative for the true class.
pub fn compute_metrics(
    matching: &PointMatching,
    preds: &[Prediction],
    gt: &GroundTruthSet,
    num_classes: usize,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(num_classes);
    acc.add(matching, preds, gt)?;
    Ok(acc.report())
}

/// Mean wall-clock seconds per image for forward pass, decoding, and
/// prediction extraction.
pub fn time_inference(model: &PointModel, images: &[Tensor], threshold: f64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Contract("time_inference needs at least one image".into()));
    }
    let start = Instant::now();
    for image in images {
        let proposals = model.predict(image)?;
        std::hint::black_box(extract_predictions(&proposals, threshold));
    }
    Ok(start.elapsed().as_secs_f64() / images.len() as f64)
}
