//! Layer plans: the flat list of convolutions a model is built from. The same
//! plan drives parameter allocation and parameter counting.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// One convolution with a square kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvLayerSpec {
    pub fn conv(
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        ConvLayerSpec {
            name: name.into(),
            kind: LayerKind::Conv,
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            bias: true,
        }
    }

    /// 4×4 stride-2 transposed convolution: exactly doubles height and width.
    pub fn up(name: impl Into<String>, in_c: usize, out_c: usize) -> Self {
        ConvLayerSpec {
            name: name.into(),
            kind: LayerKind::ConvTranspose,
            in_c,
            out_c,
            kernel: 4,
            stride: 2,
            pad: 1,
            bias: true,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv => Shape::new(self.out_c, self.in_c, self.kernel, self.kernel),
            LayerKind::ConvTranspose => Shape::new(self.in_c, self.out_c, self.kernel, self.kernel),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.kernel * self.kernel * self.in_c * self.out_c
    }

    pub fn parameter_count(&self, include_bias: bool) -> usize {
        self.weight_count()
            + if include_bias && self.bias {
                self.out_c
            } else {
                0
            }
    }
}

/// Per-layer parameter breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub per_layer: Vec<(String, usize)>,
}

impl ParameterCount {
    pub fn layer(&self, name: &str) -> Option<usize> {
        self.per_layer
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
    }
}

/// Counts trainable scalars. Biases are excluded unless `include_bias`.
pub fn count_parameters(layers: &[ConvLayerSpec], include_bias: bool) -> ParameterCount {
    let per_layer: Vec<(String, usize)> = layers
        .iter()
        .map(|l| (l.name.clone(), l.parameter_count(include_bias)))
        .collect();
    ParameterCount {
        total: per_layer.iter().map(|(_, c)| c).sum(),
        per_layer,
    }
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.names.len() - 1)
    }

    /// He-normal weights and zero biases for every layer of a plan.
    pub fn init_from_plan(layers: &[ConvLayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for l in layers {
            let fan_in = match l.kind {
                LayerKind::Conv => l.in_c * l.kernel * l.kernel,
                // each output pixel of a stride-2 transposed conv sees a quarter of the kernel
                LayerKind::ConvTranspose => {
                    (l.in_c * l.kernel * l.kernel / (l.stride * l.stride)).max(1)
                }
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let ws = l.weight_shape();
            let w = Tensor::from_fn(ws, |_, _, _, _| normal.sample(&mut rng));
            store.push(format!("{}.weight", l.name), w)?;
            if l.bias {
                store.push(
                    format!("{}.bias", l.name),
                    Tensor::zeros(Shape::new(1, 1, 1, l.out_c)),
                )?;
            }
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on the graph, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Replaces the tensors, keeping names; shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    left: old.shape(),
                    right: new.shape(),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Graph handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// A layer resolved against a store: indices of its weight and bias.
#[derive(Clone, Debug)]
pub(crate) struct Layer {
    pub spec: ConvLayerSpec,
    weight: usize,
    bias: Option<usize>,
}

impl Layer {
    pub fn resolve(spec: &ConvLayerSpec, store: &ParamStore) -> Result<Self> {
        let weight = store
            .position(&format!("{}.weight", spec.name))
            .ok_or_else(|| Error::invalid(format!("missing parameter {}.weight", spec.name)))?;
        let bias = if spec.bias {
            Some(
                store
                    .position(&format!("{}.bias", spec.name))
                    .ok_or_else(|| {
                        Error::invalid(format!("missing parameter {}.bias", spec.name))
                    })?,
            )
        } else {
            None
        };
        Ok(Layer {
            spec: spec.clone(),
            weight,
            bias,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.vars[self.weight];
        let b = self.bias.map(|i| p.vars[i]);
        match self.spec.kind {
            LayerKind::Conv => g.conv2d(x, w, b, self.spec.stride, self.spec.pad),
            LayerKind::ConvTranspose => {
                g.conv_transpose2d(x, w, b, self.spec.stride, self.spec.pad)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    PlainConv,
    ResnetBlock,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::PlainConv => "plain",
            BlockKind::ResnetBlock => "resnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BlockKind::PlainConv),
            "resnet" => Ok(BlockKind::ResnetBlock),
            other => Err(Error::invalid(format!("unknown block kind {other}"))),
        }
    }
}

/// Channel/stride schedule of one encoder branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub base_channels: Vec<usize>,
    pub k: f64,
    pub in_channels: usize,
    pub strides: Vec<usize>,
    pub block: BlockKind,
}

pub const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

impl EncoderSpec {
    pub fn channels(&self) -> Vec<usize> {
        self.base_channels
            .iter()
            .map(|&c| (c as f64 * self.k).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::invalid(format!(
                "channel multiplier must be positive, got {}",
                self.k
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("encoder needs at least one input channel"));
        }
        if self.strides.len() != self.base_channels.len() {
            return Err(Error::invalid(format!(
                "encoder has {} stages but {} strides",
                self.base_channels.len(),
                self.strides.len()
            )));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(Error::invalid(format!(
                "encoder stride must be 1 or 2, got {s}"
            )));
        }
        if let Some((i, _)) = self.channels().iter().enumerate().find(|(_, &c)| c == 0) {
            return Err(Error::invalid(format!(
                "stage {i} rounds to zero channels ({} x {})",
                self.base_channels[i], self.k
            )));
        }
        Ok(())
    }

    /// Total downsampling factor.
    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }

    /// Layers of this encoder, prefixed by `prefix`.
    pub fn plan(&self, prefix: &str, bias: bool) -> Vec<ConvLayerSpec> {
        self.plan_with_channels(prefix, &self.channels(), bias)
    }

    /// Like [`EncoderSpec::plan`] but with explicit per-stage widths.
    pub fn plan_with_channels(
        &self,
        prefix: &str,
        channels: &[usize],
        bias: bool,
    ) -> Vec<ConvLayerSpec> {
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        for (i, (&c, &s)) in channels.iter().zip(&self.strides).enumerate() {
            let mut push = |mut l: ConvLayerSpec| {
                l.bias = bias;
                out.push(l);
            };
            match self.block {
                BlockKind::PlainConv => push(ConvLayerSpec::conv(
                    format!("{prefix}.stage{i}.conv"),
                    prev,
                    c,
                    3,
                    s,
                )),
                BlockKind::ResnetBlock => {
                    push(ConvLayerSpec::conv(
                        format!("{prefix}.stage{i}.conv1"),
                        prev,
                        c,
                        3,
                        s,
                    ));
                    push(ConvLayerSpec::conv(
                        format!("{prefix}.stage{i}.conv2"),
                        c,
                        c,
                        3,
                        1,
                    ));
                    if prev != c || s != 1 {
                        push(ConvLayerSpec::conv(
                            format!("{prefix}.stage{i}.proj"),
                            prev,
                            c,
                            1,
                            s,
                        ));
                    }
                }
            }
            prev = c;
        }
        out
    }
}

/// An encoder resolved against a parameter store.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    stages: Vec<Vec<Layer>>,
    block: BlockKind,
}

impl Encoder {
    pub fn resolve(
        plan: &[ConvLayerSpec],
        stages: usize,
        block: BlockKind,
        prefix: &str,
        store: &ParamStore,
    ) -> Result<Self> {
        let mut per_stage = vec![Vec::new(); stages];
        let dotted = format!("{prefix}.");
        for l in plan.iter().filter(|l| l.name.starts_with(&dotted)) {
            let stage: usize = l.name[prefix.len() + ".stage".len()..]
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad layer name {}", l.name)))?;
            per_stage
                .get_mut(stage)
                .ok_or_else(|| Error::invalid(format!("bad layer name {}", l.name)))?
                .push(Layer::resolve(l, store)?);
        }
        Ok(Encoder {
            stages: per_stage,
            block,
        })
    }

    /// Runs every stage and returns each stage's output.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            h = match self.block {
                BlockKind::PlainConv => {
                    let y = stage[0].apply(g, p, h)?;
                    g.relu(y)
                }
                BlockKind::ResnetBlock => {
                    let y = stage[0].apply(g, p, h)?;
                    let y = g.relu(y);
                    let y = stage[1].apply(g, p, y)?;
                    let shortcut = match stage.get(2) {
                        Some(proj) => proj.apply(g, p, h)?,
                        None => h,
                    };
                    let y = g.add(y, shortcut)?;
                    g.relu(y)
                }
            };
            feats.push(h);
        }
        Ok(feats)
    }
}
