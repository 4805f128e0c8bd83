//! Encoder with pyramidal feature aggregation, task heads, anchors, and
//! proposal decoding.

mod anchors;
mod config;
mod decode;
mod network;

pub use anchors::{build_anchor_grid, AnchorGrid};
pub use config::BackboneConfig;
pub use decode::{decode_proposals, ProposalVars};
pub use network::{Bindings, HeadOutputs, HeadVars, PointModel};

pub(crate) use network::{aggregate_pfa, conv, conv_spec, encode, encoder_specs, init_params, pfa_specs, Init, ParamSpec};
