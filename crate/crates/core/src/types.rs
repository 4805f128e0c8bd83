//! Point annotations and decoded proposals shared across modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for probability rows summing to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPoint {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// Annotated cell centers of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthSet {
    pub points: Vec<GroundTruthPoint>,
}

impl GroundTruthSet {
    pub fn new(points: Vec<GroundTruthPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.class_id >= num_classes {
                return Err(Error::Validation(format!(
                    "ground-truth point {i} has class {} but only {num_classes} classes exist",
                    p.class_id
                )));
            }
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::Validation(format!("ground-truth point {i} is not finite")));
            }
        }
        Ok(())
    }
}

/// Decoded anchor predictions: refined location, objectness pair, and class
/// distribution per proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub coords: Vec<(f64, f64)>,
    /// `(p_bkg, p_obj)` per proposal.
    pub objectness: Vec<(f64, f64)>,
    pub class_probs: Vec<Vec<f64>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.coords.len();
        if self.objectness.len() != m || self.class_probs.len() != m {
            return Err(Error::Dimension(format!(
                "proposal set rows disagree: {} coords, {} objectness, {} class rows",
                m,
                self.objectness.len(),
                self.class_probs.len()
            )));
        }
        let c = self.num_classes();
        for i in 0..m {
            let (bkg, obj) = self.objectness[i];
            if (bkg + obj - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Validation(format!("objectness row {i} sums to {}", bkg + obj)));
            }
            let row = &self.class_probs[i];
            if row.len() != c {
                return Err(Error::Dimension(format!("class row {i} has {} entries", row.len())));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Validation(format!("class row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}
