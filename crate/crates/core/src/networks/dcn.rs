//! Depth completion network: separate sparse-depth and image encoders fused
//! late, with skip connections from both encoders into the decoder.

use std::collections::BTreeMap;

use super::config::{encoder_from_kv, encoder_to_kv, get_bool, get_f64};
use super::layers::{
    count_parameters, BlockKind, Bound, ConvLayerSpec, Encoder, EncoderSpec, Layer, ParamStore,
    ParameterCount, BASE_CHANNELS,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Shape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DcnConfig {
    pub depth_encoder: EncoderSpec,
    pub image_encoder: EncoderSpec,
    /// Decoder stage i has `round(base_channels[i] · decoder_k)` channels.
    pub decoder_k: f64,
    /// First stage downsamples and the last decoder stage is a nearest upsample.
    pub unsupervised_variant: bool,
    /// Output depth is `depth_scale · softplus(o) + min_depth`; inputs are divided by it.
    pub depth_scale: f64,
    pub min_depth: f64,
    pub with_bias: bool,
}

impl DcnConfig {
    /// ResNet encoders over `base_channels` with k = 0.25 (depth) and 0.75 (image).
    pub fn with_channels(base_channels: &[usize], unsupervised_variant: bool) -> Self {
        let mut strides = vec![2; base_channels.len()];
        if let Some(first) = strides.first_mut() {
            *first = if unsupervised_variant { 2 } else { 1 };
        }
        let enc = |k, in_channels| EncoderSpec {
            base_channels: base_channels.to_vec(),
            k,
            in_channels,
            strides: strides.clone(),
            block: BlockKind::ResnetBlock,
        };
        DcnConfig {
            depth_encoder: enc(0.25, 1),
            image_encoder: enc(0.75, 3),
            decoder_k: 1.0,
            unsupervised_variant,
            depth_scale: 10.0,
            min_depth: 1e-3,
            with_bias: true,
        }
    }

    /// Full-width network: channels [64, 128, 256, 512, 512].
    pub fn full(unsupervised_variant: bool) -> Self {
        DcnConfig::with_channels(&BASE_CHANNELS, unsupervised_variant)
    }

    /// Desk preset: 3 stages with every width scaled by a further 0.25.
    pub fn desk(unsupervised_variant: bool) -> Self {
        let base: Vec<usize> = BASE_CHANNELS[..3].iter().map(|c| c / 4).collect();
        DcnConfig::with_channels(&base, unsupervised_variant)
    }

    pub fn stages(&self) -> usize {
        self.depth_encoder.base_channels.len()
    }

    pub fn reduction(&self) -> usize {
        self.depth_encoder.reduction()
    }

    pub fn validate(&self) -> Result<()> {
        self.depth_encoder.validate()?;
        self.image_encoder.validate()?;
        if self.stages() == 0 {
            return Err(Error::invalid(
                "completion network needs at least one stage",
            ));
        }
        if self.depth_encoder.in_channels != 1 || self.image_encoder.in_channels != 3 {
            return Err(Error::invalid(
                "completion network expects a 1-channel depth and a 3-channel image",
            ));
        }
        if self.depth_encoder.strides != self.image_encoder.strides
            || self.depth_encoder.base_channels.len() != self.image_encoder.base_channels.len()
        {
            return Err(Error::invalid(
                "depth and image encoders must share a stage schedule",
            ));
        }
        let first = self.depth_encoder.strides[0];
        if (first == 2) != self.unsupervised_variant {
            return Err(Error::invalid(format!(
                "first-stage stride {first} does not match unsupervised_variant = {}",
                self.unsupervised_variant
            )));
        }
        if self.decoder_channels().contains(&0) {
            return Err(Error::invalid("decoder stage rounds to zero channels"));
        }
        if !(self.depth_scale > 0.0) || !(self.min_depth > 0.0) {
            return Err(Error::invalid(
                "depth scale and minimum depth must be positive",
            ));
        }
        Ok(())
    }

    pub fn decoder_channels(&self) -> Vec<usize> {
        self.depth_encoder
            .base_channels
            .iter()
            .map(|&c| (c as f64 * self.decoder_k).round() as usize)
            .collect()
    }

    pub fn plan(&self) -> Vec<ConvLayerSpec> {
        let mut plan = self.depth_encoder.plan("depth", self.with_bias);
        plan.extend(self.image_encoder.plan("image", self.with_bias));
        let skips: Vec<usize> = self
            .depth_encoder
            .channels()
            .iter()
            .zip(self.image_encoder.channels())
            .map(|(a, b)| a + b)
            .collect();
        plan.extend(decoder_plan(
            &skips,
            &self.decoder_channels(),
            &self.depth_encoder.strides,
            self.with_bias,
        ));
        plan
    }

    /// The early-fusion counterpart: one encoder over the stacked 4-channel
    /// input at k = 1, with the same stage list and decoder.
    pub fn fused_plan(&self) -> Vec<ConvLayerSpec> {
        let enc = EncoderSpec {
            k: 1.0,
            in_channels: 4,
            ..self.depth_encoder.clone()
        };
        let mut plan = enc.plan("fused", self.with_bias);
        plan.extend(decoder_plan(
            &enc.channels(),
            &self.decoder_channels(),
            &enc.strides,
            self.with_bias,
        ));
        plan
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        encoder_to_kv("depth_encoder", &self.depth_encoder, &mut kv);
        encoder_to_kv("image_encoder", &self.image_encoder, &mut kv);
        kv.insert("decoder_k".into(), format!("{:?}", self.decoder_k));
        kv.insert(
            "unsupervised_variant".into(),
            self.unsupervised_variant.to_string(),
        );
        kv.insert("depth_scale".into(), format!("{:?}", self.depth_scale));
        kv.insert("min_depth".into(), format!("{:?}", self.min_depth));
        kv.insert("with_bias".into(), self.with_bias.to_string());
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        Ok(DcnConfig {
            depth_encoder: encoder_from_kv("depth_encoder", kv)?,
            image_encoder: encoder_from_kv("image_encoder", kv)?,
            decoder_k: get_f64(kv, "decoder_k")?,
            unsupervised_variant: get_bool(kv, "unsupervised_variant")?,
            depth_scale: get_f64(kv, "depth_scale")?,
            min_depth: get_f64(kv, "min_depth")?,
            with_bias: get_bool(kv, "with_bias")?,
        })
    }
}

/// Decoder from the deepest skip back to stage 0, then a 1-channel output conv.
fn decoder_plan(
    skips: &[usize],
    widths: &[usize],
    strides: &[usize],
    bias: bool,
) -> Vec<ConvLayerSpec> {
    let mut plan = Vec::new();
    let s = skips.len();
    let mut prev = skips[s - 1];
    for i in (0..s.saturating_sub(1)).rev() {
        let mut up = if strides[i + 1] == 2 {
            ConvLayerSpec::up(format!("decoder.stage{i}.up"), prev, widths[i])
        } else {
            ConvLayerSpec::conv(format!("decoder.stage{i}.up"), prev, widths[i], 3, 1)
        };
        up.bias = bias;
        let mut fuse = ConvLayerSpec::conv(
            format!("decoder.stage{i}.fuse"),
            widths[i] + skips[i],
            widths[i],
            3,
            1,
        );
        fuse.bias = bias;
        plan.push(up);
        plan.push(fuse);
        prev = widths[i];
    }
    let mut out = ConvLayerSpec::conv("decoder.out", prev, 1, 3, 1);
    out.bias = bias;
    plan.push(out);
    plan
}

#[derive(Clone, Debug)]
pub struct DcnModel {
    config: DcnConfig,
    pub params: ParamStore,
    depth: Encoder,
    image: Encoder,
    /// (up, fuse) per decoder stage, deepest first.
    decoder: Vec<(Layer, Layer)>,
    out: Layer,
}

pub fn build_dcn(config: DcnConfig, seed: u64) -> Result<DcnModel> {
    config.validate()?;
    let params = ParamStore::init_from_plan(&config.plan(), seed)?;
    DcnModel::from_params(config, params)
}

impl DcnModel {
    pub fn from_params(config: DcnConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let plan = config.plan();
        let s = config.stages();
        let depth = Encoder::resolve(&plan, s, config.depth_encoder.block, "depth", &params)?;
        let image = Encoder::resolve(&plan, s, config.image_encoder.block, "image", &params)?;
        let find = |name: String| {
            plan.iter()
                .find(|l| l.name == name)
                .ok_or_else(|| Error::invalid(format!("missing layer {name}")))
                .and_then(|l| Layer::resolve(l, &params))
        };
        let mut decoder = Vec::new();
        for i in (0..s - 1).rev() {
            decoder.push((
                find(format!("decoder.stage{i}.up"))?,
                find(format!("decoder.stage{i}.fuse"))?,
            ));
        }
        let out = find("decoder.out".to_string())?;
        Ok(DcnModel {
            config,
            params,
            depth,
            image,
            decoder,
            out,
        })
    }

    pub fn config(&self) -> &DcnConfig {
        &self.config
    }

    pub fn layers(&self) -> Vec<ConvLayerSpec> {
        self.config.plan()
    }

    /// True when the final stage is a nearest-neighbour upsample.
    pub fn final_upsample(&self) -> bool {
        self.config.depth_encoder.strides[0] == 2
    }

    pub fn count_parameters(&self, include_bias: bool) -> ParameterCount {
        count_parameters(&self.layers(), include_bias)
    }

    fn check_inputs(&self, g: &Graph, z: Var, image: Var) -> Result<()> {
        let (zs, is) = (g.shape(z), g.shape(image));
        if zs.c != 1 || is != zs.with_channels(3) {
            return Err(Error::ShapeMismatch {
                op: "completion network inputs",
                left: zs,
                right: is,
            });
        }
        let r = self.config.reduction();
        if zs.h % r != 0 || zs.w % r != 0 || zs.h == 0 || zs.w == 0 {
            return Err(Error::invalid(format!(
                "input {}x{} is not divisible by {r}",
                zs.h, zs.w
            )));
        }
        Ok(())
    }

    /// Dense, strictly positive depth from a sparse map (zeros off the samples) and an image.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, image: Var) -> Result<Var> {
        self.check_inputs(g, z, image)?;
        let zn = g.scale(z, 1.0 / self.config.depth_scale);
        let fd = self.depth.forward(g, p, zn)?;
        let fi = self.image.forward(g, p, image)?;
        let s = fd.len();
        let mut h = g.concat_channels(fd[s - 1], fi[s - 1])?;
        for (level, (up, fuse)) in (0..s - 1).rev().zip(&self.decoder) {
            let u = up.apply(g, p, h)?;
            let u = g.relu(u);
            let skip = g.concat_channels(fd[level], fi[level])?;
            let cat = g.concat_channels(u, skip)?;
            let y = fuse.apply(g, p, cat)?;
            h = g.relu(y);
        }
        let mut o = self.out.apply(g, p, h)?;
        if self.final_upsample() {
            o = g.upsample_nearest2x(o);
        }
        let sp = g.softplus(o);
        Ok(g.affine(sp, self.config.depth_scale, self.config.min_depth))
    }

    pub fn predict(&self, z: &Tensor, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let iv = g.constant(image.clone());
        let out = self.forward(&mut g, &p, zv, iv)?;
        Ok(g.value(out).clone())
    }

    pub fn input_shape_ok(&self, shape: Shape) -> bool {
        let r = self.config.reduction();
        shape.h.is_multiple_of(r) && shape.w.is_multiple_of(r)
    }
}
