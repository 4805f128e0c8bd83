//! Training objectives over matched proposals.
//!
//! * regression: mean Euclidean distance between matched proposals and their
//!   ground-truth points;
//! * detection: cross-entropy over objectness, negatives weighted by `beta`;
//! * classification: generalized cross-entropy plus an L2 penalty on the
//!   probability vector, summed over matched pairs;
//! * total: `lambda · reg + det + cls`.

use serde::{Deserialize, Serialize};

use crate::backbone::ProposalVars;
use crate::error::{Error, Result};
use crate::matching::{match_proposals, MatchResult};
use crate::tensor::{Graph, Tensor, Var};
use crate::types::GroundTruthSet;

/// Floor applied before every log and fractional power.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the distance term in the matching cost.
    pub alpha: f64,
    /// Weight of negative proposals in the detection loss.
    pub beta: f64,
    /// Weight of the L2 penalty in the classification loss.
    pub gamma: f64,
    /// GCE exponent in (0, 1].
    pub q: f64,
    /// Weight of the regression loss in the total.
    pub lambda: f64,
    /// Use squared distances in the regression loss.
    pub regression_squared: bool,
    /// Average the classification loss over matched pairs instead of summing.
    pub classification_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.6,
            gamma: 0.1,
            q: 0.4,
            lambda: 2e-3,
            regression_squared: false,
            classification_mean: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("loss.q must lie in (0, 1], got {}", self.q)));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub det: f64,
    pub cls: f64,
    pub total: f64,
}

/// Mean (optionally squared) distance of matched pairs. With no ground truth
/// the loss is a constant zero that does not reach the graph inputs.
pub fn regression_loss(
    g: &mut Graph,
    coords: Var,
    gt: &GroundTruthSet,
    matched: &MatchResult,
    squared: bool,
) -> Result<Var> {
    let n = gt.len();
    if n == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let picked = g.take_rows(coords, &matched.delta)?;
    let targets = Tensor::new(vec![n, 2], gt.points.iter().flat_map(|p| [p.x, p.y]).collect())?;
    let targets = g.constant(targets)?;
    let diff = g.sub(picked, targets)?;
    if squared {
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        g.affine(s, 1.0 / n as f64, 0.0)
    } else {
        let dist = g.norm_rows(diff)?;
        g.mean(dist)
    }
}

/// `−(1/M)(Σ_pos log p_obj + β Σ_neg log p_bkg)` over an `M×2` objectness map.
pub fn detection_loss(g: &mut Graph, objectness: Var, matched: &MatchResult, beta: f64) -> Result<Var> {
    let m = g.value(objectness).shape()[0];
    let mut positive = vec![false; m];
    for &i in &matched.delta {
        if i >= m {
            return Err(Error::Dimension(format!("matched proposal {i} outside {m} rows")));
        }
        positive[i] = true;
    }
    let indices = (0..m).map(|i| if positive[i] { 2 * i + 1 } else { 2 * i }).collect();
    let weights = positive.iter().map(|&p| if p { 1.0 } else { beta }).collect();
    let picked = g.take(objectness, indices, vec![m])?;
    let logs = g.log(picked, PROB_FLOOR)?;
    let w = g.constant(Tensor::new(vec![m], weights)?)?;
    let weighted = g.mul(logs, w)?;
    let s = g.sum(weighted)?;
    g.affine(s, -1.0 / m as f64, 0.0)
}

/// Per-row GCE + L2 terms for an `N×C` probability block; result has shape `[N]`.
pub fn gce_l2_rows(g: &mut Graph, probs: Var, labels: &[usize], q: f64, gamma: f64) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::Dimension(format!("class probabilities must be N×C, got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Validation(format!("label {bad} outside {c} classes")));
    }
    let target = g.take(probs, labels.iter().enumerate().map(|(r, &l)| r * c + l).collect(), vec![n])?;
    let target = g.clamp_min(target, PROB_FLOOR)?;
    let powered = g.powf(target, q)?;
    let gce = g.affine(powered, -1.0 / q, 1.0 / q)?;
    let norms = g.norm_rows(probs)?;
    let penalty = g.affine(norms, gamma, 0.0)?;
    g.add(gce, penalty)
}

/// `(1 − p_label^q)/q + γ‖p‖₂` for one probability vector.
pub fn gce_l2_loss(probs: &[f64], label: usize, q: f64, gamma: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![1, probs.len()], probs.to_vec())?)?;
    let row = gce_l2_rows(&mut g, p, &[label], q, gamma)?;
    Ok(g.value(row).item())
}

/// Sum (or mean, if configured) of GCE + L2 over matched pairs.
pub fn classification_loss(
    g: &mut Graph,
    class_probs: Var,
    gt: &GroundTruthSet,
    matched: &MatchResult,
    config: &LossConfig,
) -> Result<Var> {
    let n = gt.len();
    if n == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let rows = g.take_rows(class_probs, &matched.delta)?;
    let labels: Vec<usize> = gt.points.iter().map(|p| p.class_id).collect();
    let per_pair = gce_l2_rows(g, rows, &labels, config.q, config.gamma)?;
    let s = g.sum(per_pair)?;
    if config.classification_mean {
        g.affine(s, 1.0 / n as f64, 0.0)
    } else {
        Ok(s)
    }
}

/// `λ·reg + det + cls` on plain scalars.
pub fn total_loss(reg: f64, det: f64, cls: f64, config: &LossConfig) -> Result<LossBreakdown> {
    for (name, v) in [("reg", reg), ("det", det), ("cls", cls)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown {
        reg,
        det,
        cls,
        total: config.lambda * reg + det + cls,
    })
}

/// Graph form of [`total_loss`].
pub fn total_loss_graph(g: &mut Graph, reg: Var, det: Var, cls: Var, config: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let breakdown = total_loss(g.value(reg).item(), g.value(det).item(), g.value(cls).item(), config)?;
    let weighted = g.affine(reg, config.lambda, 0.0)?;
    let partial = g.add(weighted, det)?;
    let total = g.add(partial, cls)?;
    Ok((total, LossBreakdown { total: g.value(total).item(), ..breakdown }))
}

/// Matches on detached proposal values, then builds all loss terms.
pub fn point_losses(
    g: &mut Graph,
    proposals: &ProposalVars,
    gt: &GroundTruthSet,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown, MatchResult)> {
    let snapshot = proposals.to_set(g);
    let matched = match_proposals(&snapshot, gt, config.alpha)?;
    let (total, breakdown) = losses_for_match(g, proposals, gt, &matched, config)?;
    Ok((total, breakdown, matched))
}

/// All loss terms for a fixed assignment.
pub fn losses_for_match(
    g: &mut Graph,
    proposals: &ProposalVars,
    gt: &GroundTruthSet,
    matched: &MatchResult,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let reg = regression_loss(g, proposals.coords, gt, matched, config.regression_squared)?;
    let det = detection_loss(g, proposals.objectness, matched, config.beta)?;
    let cls = classification_loss(g, proposals.class_probs, gt, matched, config)?;
    total_loss_graph(g, reg, det, cls, config)
}
