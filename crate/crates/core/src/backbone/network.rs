//! Encoder, pyramidal feature aggregation, and the three task heads.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::decode::{decode_graph, ProposalVars};
use super::{build_anchor_grid, AnchorGrid, BackboneConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use crate::types::ProposalSet;

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    He,
    Normal(f64),
    Zero,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// 64-bit FNV-1a, used to derive a stable per-parameter random stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Each tensor draws from its own stream keyed by `(seed, name)`, so adding
/// or removing unrelated parameters leaves the others untouched.
pub(crate) fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zero => vec![0.0; numel],
            Init::He | Init::Normal(_) => {
                let std = match spec.init {
                    Init::Normal(s) => s,
                    _ => (2.0 / spec.shape[1..].iter().product::<usize>() as f64).sqrt(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.name.as_bytes()));
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..numel).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        params.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?.requiring_grad())?;
    }
    Ok(params)
}

pub(crate) fn conv_spec(specs: &mut Vec<ParamSpec>, name: &str, out: usize, inp: usize, k: usize, init: Init) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![out, inp, k, k],
        init,
    });
    specs.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![out],
        init: Init::Zero,
    });
}

/// Graph variables for every parameter of a model.
pub struct Bindings {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Bindings {
    pub fn bind(g: &mut Graph, params: &ParamSet) -> Result<Self> {
        let mut vars = HashMap::with_capacity(params.len());
        let mut order = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = g.leaf(t.share())?;
            vars.insert(name.to_string(), v);
            order.push((name.to_string(), v));
        }
        Ok(Self { vars, order })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    /// Routes every use of `name` to `var` instead of the bound parameter.
    pub fn override_with(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))?;
        *slot = var;
        Ok(())
    }

    /// Copies gradients from the last backward pass into `params`; parameters
    /// the loss never reached get an all-zero gradient.
    pub fn store_grads(&self, g: &Graph, params: &mut ParamSet) -> Result<()> {
        for (name, var) in &self.order {
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no parameter {name}")))?;
            let grad = g.grad(*var).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
            t.set_grad(grad)?;
        }
        Ok(())
    }

    /// Like [`Bindings::store_grads`] but adds onto existing gradients,
    /// moving gradient buffers out of `g`.
    pub fn accumulate_grads(&self, g: &mut Graph, params: &mut ParamSet) -> Result<()> {
        for (name, var) in &self.order {
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no parameter {name}")))?;
            let incoming = g.take_grad(*var);
            match (t.grad_mut(), incoming) {
                (Some(acc), Some(gv)) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                (Some(_), None) => {}
                (None, Some(gv)) => t.set_grad(gv)?,
                (None, None) => t.set_grad(vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }
}

pub(crate) fn conv(
    g: &mut Graph,
    b: &Bindings,
    name: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(bias), stride, padding)
}

fn conv_relu(g: &mut Graph, b: &Bindings, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, b, name, x, stride, 1)?;
    g.relu(y)
}

/// conv3×3 → relu → conv3×3, added to the input, then relu.
fn residual_block(g: &mut Graph, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let y = conv_relu(g, b, &format!("{name}.conv1"), x, 1)?;
    let y = conv(g, b, &format!("{name}.conv2"), y, 1, 1)?;
    let y = g.add(x, y)?;
    g.relu(y)
}

pub(crate) fn encoder_specs(config: &BackboneConfig, specs: &mut Vec<ParamSpec>) {
    let c = &config.stage_channels;
    let stem = (c[0] / 2).max(1);
    conv_spec(specs, "enc.stem1", stem, 3, 3, Init::He);
    conv_spec(specs, "enc.stem2", c[0], stem, 3, Init::He);
    for s in 0..c.len() {
        let inp = if s == 0 { c[0] } else { c[s - 1] };
        conv_spec(specs, &format!("enc.stage{}.conv1", s + 1), c[s], inp, 3, Init::He);
        conv_spec(specs, &format!("enc.stage{}.conv2", s + 1), c[s], c[s], 3, Init::He);
    }
}

/// Indices of the stages that are projected into the aggregated map.
pub(crate) fn pfa_stages(config: &BackboneConfig) -> Vec<usize> {
    let n = config.stage_channels.len();
    if config.pfa_enabled {
        (0..n).collect()
    } else {
        vec![n - 1]
    }
}

pub(crate) fn pfa_specs(config: &BackboneConfig, specs: &mut Vec<ParamSpec>) {
    for s in pfa_stages(config) {
        conv_spec(
            specs,
            &format!("pfa.proj{}", s + 1),
            config.pfa_channels,
            config.stage_channels[s],
            1,
            Init::He,
        );
    }
}

/// Encoder stages at strides 4, 8, 16, 32; `image` is `1×3×H×W` in `[0, 1]`.
pub(crate) fn encode(g: &mut Graph, b: &Bindings, config: &BackboneConfig, image: Var) -> Result<Vec<Var>> {
    let shape = g.value(image).shape().to_vec();
    let [_, 3, h, w] = shape[..] else {
        return Err(Error::Dimension(format!("encoder expects N×3×H×W input, got {shape:?}")));
    };
    let stride = config.encoder_stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Dimension(format!(
            "input {w}x{h} is not divisible by the encoder stride {stride}"
        )));
    }
    let x = g.affine(image, 1.0, -0.5)?;
    let x = conv_relu(g, b, "enc.stem1", x, 2)?;
    let mut x = conv_relu(g, b, "enc.stem2", x, 2)?;
    let mut stages = Vec::with_capacity(config.stage_channels.len());
    for s in 0..config.stage_channels.len() {
        let down = if s == 0 { 1 } else { 2 };
        x = conv_relu(g, b, &format!("enc.stage{}.conv1", s + 1), x, down)?;
        x = conv_relu(g, b, &format!("enc.stage{}.conv2", s + 1), x, 1)?;
        stages.push(x);
    }
    Ok(stages)
}

/// Projects stages to a common width, resizes them onto the deepest grid,
/// and sums. With aggregation disabled only the deepest stage is projected.
pub(crate) fn aggregate_pfa(g: &mut Graph, b: &Bindings, config: &BackboneConfig, stages: &[Var]) -> Result<Var> {
    if stages.len() != config.stage_channels.len() {
        return Err(Error::Dimension(format!(
            "aggregation expects {} stages, got {}",
            config.stage_channels.len(),
            stages.len()
        )));
    }
    let deepest = g.value(*stages.last().expect("non-empty")).shape().to_vec();
    let (batch, gh, gw) = (deepest[0], deepest[2], deepest[3]);
    let mut sum: Option<Var> = None;
    for s in pfa_stages(config) {
        let shape = g.value(stages[s]).shape().to_vec();
        if shape[0] != batch {
            return Err(Error::Dimension(format!(
                "stage {} batch {} differs from deepest batch {batch}",
                s + 1,
                shape[0]
            )));
        }
        let mut y = conv(g, b, &format!("pfa.proj{}", s + 1), stages[s], 1, 0)?;
        if (shape[2], shape[3]) != (gh, gw) {
            y = g.resize_bilinear(y, gh, gw)?;
        }
        sum = Some(match sum {
            None => y,
            Some(acc) => g.add(acc, y)?,
        });
    }
    Ok(sum.expect("at least one stage"))
}

/// Per-anchor head outputs as graph variables (rows in anchor order).
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub offsets: Var,
    pub objectness_logits: Var,
    pub class_logits: Var,
}

/// Per-anchor head outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub offsets: Tensor,
    pub objectness_logits: Tensor,
    pub class_logits: Tensor,
}

impl HeadVars {
    pub fn values(&self, g: &Graph) -> HeadOutputs {
        HeadOutputs {
            offsets: g.value(self.offsets).clone(),
            objectness_logits: g.value(self.objectness_logits).clone(),
            class_logits: g.value(self.class_logits).clone(),
        }
    }
}

pub(crate) fn head_specs(config: &BackboneConfig, specs: &mut Vec<ParamSpec>) {
    let p = config.pfa_channels;
    let k = config.anchors_per_cell;
    let mut towers = vec!["reg", "det"];
    if config.independent_classifier_enabled {
        towers.push("cls");
    }
    for t in towers {
        for r in 1..=2 {
            for c in 1..=2 {
                conv_spec(specs, &format!("head.{t}.res{r}.conv{c}"), p, p, 3, Init::He);
            }
        }
    }
    conv_spec(specs, "head.reg.out", 2 * k, p, 1, Init::Normal(0.01));
    conv_spec(specs, "head.det.out", 2 * k, p, 1, Init::Normal(0.01));
    conv_spec(specs, "head.cls.out", config.num_classes * k, p, 1, Init::Normal(0.01));
}

/// Reorders a `1×(K·D)×Gh×Gw` head map into `(Gh·Gw·K)×D` anchor rows.
fn to_anchor_rows(g: &mut Graph, x: Var, per_cell: usize, width: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let [1, ch, gh, gw] = shape[..] else {
        return Err(Error::Contract(format!("heads run on a single image, got {shape:?}")));
    };
    if ch != per_cell * width {
        return Err(Error::Dimension(format!(
            "head map has {ch} channels, expected {per_cell}×{width}"
        )));
    }
    let cells = gh * gw;
    let mut indices = Vec::with_capacity(ch * cells);
    for c in 0..cells {
        for k in 0..per_cell {
            for d in 0..width {
                indices.push((k * width + d) * cells + c);
            }
        }
    }
    g.take(x, indices, vec![cells * per_cell, width])
}

fn tower(g: &mut Graph, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let y = residual_block(g, b, &format!("head.{name}.res1"), x)?;
    residual_block(g, b, &format!("head.{name}.res2"), y)
}

pub(crate) fn run_heads(g: &mut Graph, b: &Bindings, config: &BackboneConfig, features: Var) -> Result<HeadVars> {
    let k = config.anchors_per_cell;
    let reg = tower(g, b, "reg", features)?;
    let det = tower(g, b, "det", features)?;
    let cls = if config.independent_classifier_enabled {
        tower(g, b, "cls", features)?
    } else {
        det
    };
    let off = conv(g, b, "head.reg.out", reg, 1, 0)?;
    let off = g.affine(off, config.offset_scale, 0.0)?;
    let obj = conv(g, b, "head.det.out", det, 1, 0)?;
    let cl = conv(g, b, "head.cls.out", cls, 1, 0)?;
    Ok(HeadVars {
        offsets: to_anchor_rows(g, off, k, 2)?,
        objectness_logits: to_anchor_rows(g, obj, k, 2)?,
        class_logits: to_anchor_rows(g, cl, k, config.num_classes)?,
    })
}

/// The anchor-point model: encoder, aggregation, and heads with their parameters.
#[derive(Clone, Debug)]
pub struct PointModel {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

impl PointModel {
    pub(crate) fn specs(config: &BackboneConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        encoder_specs(config, &mut specs);
        pfa_specs(config, &mut specs);
        head_specs(config, &mut specs);
        specs
    }

    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&Self::specs(&config), seed)?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes against `config`.
    pub fn from_params(config: BackboneConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        reference.params.check_compatible(&params)?;
        let mut params = params;
        params.iter_mut().for_each(|(_, t)| t.set_requires_grad(true));
        Ok(Self { config, params })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Bindings> {
        Bindings::bind(g, &self.params)
    }

    pub fn encode(&self, g: &mut Graph, b: &Bindings, image: Var) -> Result<Vec<Var>> {
        encode(g, b, &self.config, image)
    }

    pub fn aggregate_pfa(&self, g: &mut Graph, b: &Bindings, stages: &[Var]) -> Result<Var> {
        aggregate_pfa(g, b, &self.config, stages)
    }

    pub fn run_heads(&self, g: &mut Graph, b: &Bindings, features: Var) -> Result<HeadVars> {
        run_heads(g, b, &self.config, features)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bindings, image: Var) -> Result<HeadVars> {
        let stages = self.encode(g, b, image)?;
        let features = self.aggregate_pfa(g, b, &stages)?;
        self.run_heads(g, b, features)
    }

    /// Forward pass plus decoding into graph variables.
    pub fn propose(&self, g: &mut Graph, b: &Bindings, image: Var) -> Result<(AnchorGrid, ProposalVars)> {
        let shape = g.value(image).shape().to_vec();
        let grid = build_anchor_grid(shape[2], shape[3], &self.config)?;
        let heads = self.forward(g, b, image)?;
        let vars = decode_graph(g, &grid, &heads)?;
        Ok((grid, vars))
    }

    /// Inference on a `1×3×H×W` image.
    pub fn predict(&self, image: &Tensor) -> Result<ProposalSet> {
        let mut g = Graph::new();
        let mut frozen = self.params.clone();
        frozen.iter_mut().for_each(|(_, t)| t.set_requires_grad(false));
        let b = Bindings::bind(&mut g, &frozen)?;
        let x = g.constant(image.clone())?;
        let (_, vars) = self.propose(&mut g, &b, x)?;
        Ok(vars.to_set(&g))
    }
}
