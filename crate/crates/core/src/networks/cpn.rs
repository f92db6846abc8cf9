//! Conditional prior network: a bottlenecked depth autoencoder conditioned on
//! the image. Its reconstruction error is used as a prior energy.

use std::collections::BTreeMap;

use super::config::{encoder_from_kv, encoder_to_kv, get_bool, get_f64, get_usize};
use super::layers::{
    count_parameters, BlockKind, ConvLayerSpec, Encoder, EncoderSpec, Layer, ParamStore,
    ParameterCount,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::layers::Bound;

#[derive(Clone, Debug, PartialEq)]
pub struct CpnConfig {
    pub depth_encoder: EncoderSpec,
    pub image_encoder: EncoderSpec,
    /// Width of the last depth-encoder stage.
    pub bottleneck_channels: usize,
    /// Nominal input size, used to size the bottleneck. Any input whose sides
    /// divide by the total stride is accepted; the compression ratio is the same.
    pub height: usize,
    pub width: usize,
    pub eta: u32,
    /// Depths are divided by this before entering the network.
    pub depth_scale: f64,
    pub with_bias: bool,
}

impl CpnConfig {
    /// Plain-conv encoders with `stages` stride-2 stages, channels scaled by `k`.
    pub fn new(height: usize, width: usize, stages: usize, k: f64, eta: u32) -> Self {
        let base: Vec<usize> = super::layers::BASE_CHANNELS
            .iter()
            .copied()
            .take(stages)
            .collect();
        let enc = |in_channels| EncoderSpec {
            base_channels: base.clone(),
            k,
            in_channels,
            strides: vec![2; stages],
            block: BlockKind::PlainConv,
        };
        CpnConfig {
            depth_encoder: enc(1),
            image_encoder: enc(3),
            bottleneck_channels: default_bottleneck(stages),
            height,
            width,
            eta,
            depth_scale: 10.0,
            with_bias: true,
        }
    }

    /// Small preset used for quick experiments: 3 stages, k = 0.125.
    pub fn desk(height: usize, width: usize) -> Self {
        CpnConfig::new(height, width, 3, 0.125, 2)
    }

    pub fn stages(&self) -> usize {
        self.depth_encoder.base_channels.len()
    }

    pub fn depth_channels(&self) -> Vec<usize> {
        let mut c = self.depth_encoder.channels();
        if let Some(last) = c.last_mut() {
            *last = self.bottleneck_channels;
        }
        c
    }

    /// Number of scalars in the depth code.
    pub fn bottleneck_size(&self) -> usize {
        let r = self.depth_encoder.reduction();
        self.bottleneck_channels * (self.height / r) * (self.width / r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta != 1 && self.eta != 2 {
            return Err(Error::invalid(format!(
                "eta must be 1 or 2, got {}",
                self.eta
            )));
        }
        self.depth_encoder.validate()?;
        self.image_encoder.validate()?;
        if self.stages() == 0 {
            return Err(Error::invalid("prior network needs at least one stage"));
        }
        if self.depth_encoder.in_channels != 1 || self.image_encoder.in_channels != 3 {
            return Err(Error::invalid(
                "prior network expects a 1-channel depth and a 3-channel image",
            ));
        }
        if self.depth_encoder.strides != self.image_encoder.strides {
            return Err(Error::invalid(
                "depth and image encoders must share a stride schedule",
            ));
        }
        if self.depth_encoder.strides.iter().any(|&s| s != 2) {
            return Err(Error::invalid(
                "prior network encoders downsample by 2 at every stage",
            ));
        }
        let r = self.depth_encoder.reduction();
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(r)
            || !self.width.is_multiple_of(r)
        {
            return Err(Error::invalid(format!(
                "input {}x{} is not divisible by {r}",
                self.height, self.width
            )));
        }
        if self.bottleneck_channels == 0 {
            return Err(Error::invalid("bottleneck needs at least one channel"));
        }
        let pixels = self.height * self.width;
        if self.bottleneck_size() >= pixels {
            return Err(Error::invalid(format!(
                "bottleneck holds {} values for a {pixels}-pixel depth map; it must compress",
                self.bottleneck_size()
            )));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::invalid("depth scale must be positive"));
        }
        Ok(())
    }

    pub fn decoder_channels(&self) -> Vec<usize> {
        let img = self.image_encoder.channels();
        let s = img.len();
        (0..s)
            .map(|j| if j + 2 <= s { img[s - 2 - j] } else { img[0] })
            .collect()
    }

    pub fn plan(&self) -> Vec<ConvLayerSpec> {
        let bias = self.with_bias;
        let mut plan = self
            .depth_encoder
            .plan_with_channels("depth", &self.depth_channels(), bias);
        plan.extend(self.image_encoder.plan("image", bias));
        let mut prev =
            self.bottleneck_channels + self.image_encoder.channels().last().copied().unwrap_or(0);
        for (j, c) in self.decoder_channels().into_iter().enumerate() {
            let mut l = ConvLayerSpec::up(format!("decoder.up{j}"), prev, c);
            l.bias = bias;
            plan.push(l);
            prev = c;
        }
        let mut out = ConvLayerSpec::conv("decoder.out", prev, 1, 3, 1);
        out.bias = bias;
        plan.push(out);
        plan
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        encoder_to_kv("depth_encoder", &self.depth_encoder, &mut kv);
        encoder_to_kv("image_encoder", &self.image_encoder, &mut kv);
        kv.insert(
            "bottleneck_channels".into(),
            self.bottleneck_channels.to_string(),
        );
        kv.insert("height".into(), self.height.to_string());
        kv.insert("width".into(), self.width.to_string());
        kv.insert("eta".into(), self.eta.to_string());
        kv.insert("depth_scale".into(), format!("{:?}", self.depth_scale));
        kv.insert("with_bias".into(), self.with_bias.to_string());
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        Ok(CpnConfig {
            depth_encoder: encoder_from_kv("depth_encoder", kv)?,
            image_encoder: encoder_from_kv("image_encoder", kv)?,
            bottleneck_channels: get_usize(kv, "bottleneck_channels")?,
            height: get_usize(kv, "height")?,
            width: get_usize(kv, "width")?,
            eta: get_usize(kv, "eta")? as u32,
            depth_scale: get_f64(kv, "depth_scale")?,
            with_bias: get_bool(kv, "with_bias")?,
        })
    }
}

/// Bottleneck width giving a code of 1/16 the input pixel count.
pub fn default_bottleneck(stages: usize) -> usize {
    (4usize.pow(stages as u32) / 16).max(1)
}

#[derive(Clone, Debug)]
pub struct CpnModel {
    config: CpnConfig,
    pub params: ParamStore,
    depth: Encoder,
    image: Encoder,
    ups: Vec<Layer>,
    out: Layer,
}

pub fn build_cpn(config: CpnConfig, seed: u64) -> Result<CpnModel> {
    config.validate()?;
    let params = ParamStore::init_from_plan(&config.plan(), seed)?;
    CpnModel::from_params(config, params)
}

impl CpnModel {
    pub fn from_params(config: CpnConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let plan = config.plan();
        let s = config.stages();
        let depth = Encoder::resolve(&plan, s, config.depth_encoder.block, "depth", &params)?;
        let image = Encoder::resolve(&plan, s, config.image_encoder.block, "image", &params)?;
        let ups = plan
            .iter()
            .filter(|l| l.name.starts_with("decoder.up"))
            .map(|l| Layer::resolve(l, &params))
            .collect::<Result<Vec<_>>>()?;
        let out = Layer::resolve(plan.last().expect("plan has an output layer"), &params)?;
        Ok(CpnModel {
            config,
            params,
            depth,
            image,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &CpnConfig {
        &self.config
    }

    pub fn eta(&self) -> u32 {
        self.config.eta
    }

    pub fn layers(&self) -> Vec<ConvLayerSpec> {
        self.config.plan()
    }

    pub fn count_parameters(&self, include_bias: bool) -> ParameterCount {
        count_parameters(&self.layers(), include_bias)
    }

    fn check_inputs(&self, g: &Graph, depth: Var, image: Var) -> Result<()> {
        let (ds, is) = (g.shape(depth), g.shape(image));
        if ds.c != 1 || is != ds.with_channels(3) {
            return Err(Error::ShapeMismatch {
                op: "prior network inputs",
                left: ds,
                right: is,
            });
        }
        let r = self.config.depth_encoder.reduction();
        if ds.h == 0 || ds.w == 0 || ds.h % r != 0 || ds.w % r != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} is not divisible by {r}",
                ds.h, ds.w
            )));
        }
        Ok(())
    }

    /// Reconstructs `depth` (in meters) through the bottleneck.
    pub fn forward(&self, g: &mut Graph, p: &Bound, depth: Var, image: Var) -> Result<Var> {
        self.check_inputs(g, depth, image)?;
        let scale = self.config.depth_scale;
        let dn = g.scale(depth, 1.0 / scale);
        let code = *self
            .depth
            .forward(g, p, dn)?
            .last()
            .expect("at least one stage");
        let ctx = *self
            .image
            .forward(g, p, image)?
            .last()
            .expect("at least one stage");
        let mut h = g.concat_channels(code, ctx)?;
        for up in &self.ups {
            let y = up.apply(g, p, h)?;
            h = g.relu(y);
        }
        let out = self.out.apply(g, p, h)?;
        Ok(g.scale(out, scale))
    }

    /// Prior energy E = Σ|d' − d|^η; the prior probability is exp(−E).
    pub fn score_var(&self, g: &mut Graph, p: &Bound, depth: Var, image: Var) -> Result<Var> {
        let recon = self.forward(g, p, depth, image)?;
        let r = g.sub(recon, depth)?;
        g.power_penalty(r, self.config.eta, None)
    }

    pub fn reconstruct(&self, depth: &Tensor, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let d = g.constant(depth.clone());
        let i = g.constant(image.clone());
        let out = self.forward(&mut g, &p, d, i)?;
        Ok(g.value(out).clone())
    }
}

/// Negative log prior −log Q(d | I) of a depth map under the network.
pub fn cpn_score(model: &CpnModel, depth: &Tensor, image: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let d = g.constant(depth.clone());
    let i = g.constant(image.clone());
    let e = model.score_var(&mut g, &p, d, i)?;
    Ok(g.value(e).item())
}
