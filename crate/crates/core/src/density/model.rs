use super::DensityMap;
use crate::backbone::{aggregate_pfa, conv, conv_spec, encode, encoder_specs, init_params, pfa_specs, BackboneConfig, Bindings, Init, ParamSpec};
use crate::error::Result;
use crate::tensor::{Graph, ParamSet, Tensor, Var};

const HEAD_CHANNELS: usize = 32;

/// Encoder and aggregation shared with the point model, followed by a
/// one-channel density head. The aggregated map is upsampled to the first
/// stage's resolution and concatenated with that stage before two
/// convolutions; the resulting logits are resized to the input and squashed.
#[derive(Clone, Debug)]
pub struct DensityModel {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

impl DensityModel {
    fn specs(config: &BackboneConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        encoder_specs(config, &mut specs);
        pfa_specs(config, &mut specs);
        let inp = config.pfa_channels + config.stage_channels[0];
        conv_spec(&mut specs, "dens.conv1", HEAD_CHANNELS, inp, 3, Init::He);
        conv_spec(&mut specs, "dens.out", 1, HEAD_CHANNELS, 1, Init::Normal(0.01));
        specs
    }

    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&Self::specs(&config), seed)?;
        Ok(Self { config, params })
    }

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

    /// `1×1×H×W` probabilities for a `1×3×H×W` image.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, image: Var) -> Result<Var> {
        let shape = g.value(image).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let stages = encode(g, b, &self.config, image)?;
        let features = aggregate_pfa(g, b, &self.config, &stages)?;
        let fine_shape = g.value(stages[0]).shape().to_vec();
        let up = g.resize_bilinear(features, fine_shape[2], fine_shape[3])?;
        let x = g.concat_channels(&[up, stages[0]])?;
        let x = conv(g, b, "dens.conv1", x, 1, 1)?;
        let x = g.relu(x)?;
        let logits = conv(g, b, "dens.out", x, 1, 0)?;
        let full = g.resize_bilinear(logits, h, w)?;
        g.sigmoid(full)
    }

    pub fn predict(&self, image: &Tensor) -> Result<DensityMap> {
        let mut g = Graph::new();
        let mut frozen = self.params.clone();
        frozen.iter_mut().for_each(|(_, t)| t.set_requires_grad(false));
        let b = Bindings::bind(&mut g, &frozen)?;
        let x = g.constant(image.clone())?;
        let y = self.forward(&mut g, &b, x)?;
        let t = g.value(y);
        let (h, w) = (t.shape()[2], t.shape()[3]);
        DensityMap::new(h, w, t.data().to_vec())
    }
}
