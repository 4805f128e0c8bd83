//! Turns head outputs into proposals: refined location = anchor + offset,
//! objectness and class scores through softmax. Coordinates are not clamped.

use super::{AnchorGrid, HeadOutputs, HeadVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::types::ProposalSet;

/// Decoded proposals as graph variables: coords `M×2`, objectness `M×2`
/// (background, object), class probabilities `M×C`.
#[derive(Clone, Copy, Debug)]
pub struct ProposalVars {
    pub coords: Var,
    pub objectness: Var,
    pub class_probs: Var,
}

impl ProposalVars {
    pub fn to_set(&self, g: &Graph) -> ProposalSet {
        let coords = g.value(self.coords).data().chunks(2).map(|r| (r[0], r[1])).collect();
        let objectness = g
            .value(self.objectness)
            .data()
            .chunks(2)
            .map(|r| (r[0], r[1]))
            .collect();
        let c = g.value(self.class_probs).shape()[1];
        let class_probs = g
            .value(self.class_probs)
            .data()
            .chunks(c)
            .map(<[f64]>::to_vec)
            .collect();
        ProposalSet {
            coords,
            objectness,
            class_probs,
        }
    }
}

pub(crate) fn decode_graph(g: &mut Graph, grid: &AnchorGrid, heads: &HeadVars) -> Result<ProposalVars> {
    let m = grid.len();
    for (what, v) in [
        ("offsets", heads.offsets),
        ("objectness", heads.objectness_logits),
        ("class logits", heads.class_logits),
    ] {
        let rows = g.value(v).shape()[0];
        if rows != m {
            return Err(Error::Dimension(format!("{what} has {rows} rows but the grid has {m} anchors")));
        }
    }
    let anchors = Tensor::new(vec![m, 2], grid.points.iter().flat_map(|&(x, y)| [x, y]).collect())?;
    let anchors = g.constant(anchors)?;
    Ok(ProposalVars {
        coords: g.add(anchors, heads.offsets)?,
        objectness: g.softmax(heads.objectness_logits, 1)?,
        class_probs: g.softmax(heads.class_logits, 1)?,
    })
}

/// Decodes plain head tensors (no gradient tracking).
pub fn decode_proposals(grid: &AnchorGrid, heads: &HeadOutputs) -> Result<ProposalSet> {
    let mut g = Graph::new();
    let vars = HeadVars {
        offsets: g.constant(heads.offsets.clone())?,
        objectness_logits: g.constant(heads.objectness_logits.clone())?,
        class_logits: g.constant(heads.class_logits.clone())?,
    };
    for (what, v, width) in [("offsets", vars.offsets, Some(2)), ("objectness", vars.objectness_logits, Some(2)), ("class logits", vars.class_logits, None)] {
        let shape = g.value(v).shape();
        if shape.len() != 2 || width.is_some_and(|w| shape[1] != w) {
            return Err(Error::Dimension(format!("{what} must be M×{} , got {shape:?}", width.map_or("C".to_string(), |w| w.to_string()))));
        }
    }
    let decoded = decode_graph(&mut g, grid, &vars)?;
    Ok(decoded.to_set(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_anchor_grid, BackboneConfig};

    fn heads(offsets: Vec<f64>, obj: Vec<f64>, cls: Vec<f64>, m: usize, c: usize) -> HeadOutputs {
        HeadOutputs {
            offsets: Tensor::new(vec![m, 2], offsets).unwrap(),
            objectness_logits: Tensor::new(vec![m, 2], obj).unwrap(),
            class_logits: Tensor::new(vec![m, c], cls).unwrap(),
        }
    }

    #[test]
    fn offsets_shift_anchor_and_zero_offsets_are_identity() {
        let grid = build_anchor_grid(32, 32, &BackboneConfig::default()).unwrap();
        let mut off = vec![0.0; 10];
        off[0] = -8.0;
        off[1] = 8.0;
        let p = decode_proposals(&grid, &heads(off, vec![0.0; 10], vec![0.0; 10], 5, 2)).unwrap();
        assert_eq!(p.coords[0], (8.0, 24.0));
        assert_eq!(&p.coords[1..], &grid.points[1..]);
        assert_eq!(p.objectness[0], (0.5, 0.5));
        p.validate().unwrap();
    }

    #[test]
    fn row_mismatch_is_rejected() {
        let grid = build_anchor_grid(32, 32, &BackboneConfig::default()).unwrap();
        let h = heads(vec![0.0; 8], vec![0.0; 8], vec![0.0; 8], 4, 2);
        assert!(matches!(decode_proposals(&grid, &h), Err(Error::Dimension(_))));
    }
}
