//! Desk-scale architectures: layer specs, parameter initialization, the
//! forward pass, and the structural queries pruning needs (filters, coupled
//! channel groups, parameter/FLOP counts, physical channel removal).
//!
//! A model is an ordered list of named layers. Each layer reads the previous
//! layer's output unless `inputs` names other layers (or `"input"`, the
//! network input); layers may only read layers defined before them. The last
//! layer is the classifier and its output channels are never prunable.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, ComputeGraph, ConvGeometry, Var};
use crate::error::{Error, Result};
use crate::injection::InjectionSite;
use crate::tensor::{ParamStore, Tensor};

pub const INPUT_NAME: &str = "input";
pub const BN_MOMENTUM: f64 = 0.1;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
    Relu,
    AvgPool {
        /// Window (= stride). Absent means global pooling.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kernel: Option<usize>,
    },
    Add,
    Flatten,
    Concat,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
            LayerKind::Concat => "concat",
        }
    }

    /// Layers whose output channels are filters (conv kernels, dense rows).
    pub fn is_producer(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            inputs: Vec::new(),
            kind,
        }
    }

    pub fn conv(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                padding,
                bias: true,
            },
        )
    }

    pub fn dense(name: &str, inp: usize, out: usize) -> Self {
        Self::new(
            name,
            LayerKind::Dense {
                in_features: inp,
                out_features: out,
                bias: true,
            },
        )
    }

    pub fn bn(name: &str, channels: usize) -> Self {
        Self::new(name, LayerKind::BatchNorm { channels })
    }

    pub fn relu(name: &str) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn avg_pool(name: &str, kernel: Option<usize>) -> Self {
        Self::new(name, LayerKind::AvgPool { kernel })
    }

    pub fn flatten(name: &str) -> Self {
        Self::new(name, LayerKind::Flatten)
    }

    pub fn add(name: &str, a: &str, b: &str) -> Self {
        Self::new(name, LayerKind::Add).from(&[a, b])
    }

    pub fn from(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape: `[c, h, w]` for images, `[features]` otherwise.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug)]
struct Topology {
    sources: Vec<Vec<Source>>,
    shapes: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
}

fn conv_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn resolve(spec: &ModelSpec, input: &[usize]) -> Result<Topology> {
    let err = |msg: String| Error::Construction(msg);
    if spec.layers.is_empty() {
        return Err(err("model has no layers".into()));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut sources = Vec::with_capacity(spec.layers.len());
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer.name == INPUT_NAME || layer.name.is_empty() {
            return Err(err(format!("invalid layer name `{}`", layer.name)));
        }
        if index.insert(&layer.name, i).is_some() {
            return Err(err(format!("duplicate layer name `{}`", layer.name)));
        }
        let srcs: Vec<Source> = if layer.inputs.is_empty() {
            vec![if i == 0 { Source::Input } else { Source::Layer(i - 1) }]
        } else {
            layer
                .inputs
                .iter()
                .map(|n| {
                    if n == INPUT_NAME {
                        Ok(Source::Input)
                    } else {
                        index
                            .get(n.as_str())
                            .filter(|&&j| j < i)
                            .map(|&j| Source::Layer(j))
                            .ok_or_else(|| {
                                err(format!("layer `{}` reads unknown or later layer `{n}`", layer.name))
                            })
                    }
                })
                .collect::<Result<_>>()?
        };
        let in_shapes: Vec<&[usize]> = srcs
            .iter()
            .map(|s| match s {
                Source::Input => input,
                Source::Layer(j) => shapes[*j].as_slice(),
            })
            .collect();
        let arity = match layer.kind {
            LayerKind::Add => Some(2),
            LayerKind::Concat => None,
            _ => Some(1),
        };
        if let Some(a) = arity {
            if srcs.len() != a {
                return Err(err(format!(
                    "`{}` ({}) takes {a} input(s), got {}",
                    layer.name,
                    layer.kind.label(),
                    srcs.len()
                )));
            }
        } else if srcs.len() < 2 {
            return Err(err(format!("`{}` (concat) needs at least two inputs", layer.name)));
        }
        let x = in_shapes[0];
        let mismatch = |what: String| err(format!("`{}`: {what}", layer.name));
        let out = match &layer.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if x.len() != 3 {
                    return Err(mismatch(format!("conv2d needs a [c, h, w] input, got {x:?}")));
                }
                if x[0] != *in_channels {
                    return Err(mismatch(format!(
                        "expects {in_channels} input channels but receives {}",
                        x[0]
                    )));
                }
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(mismatch("zero-sized conv hyperparameter".into()));
                }
                match (
                    conv_extent(x[1], *kernel, *stride, *padding),
                    conv_extent(x[2], *kernel, *stride, *padding),
                ) {
                    (Some(h), Some(w)) => vec![*out_channels, h, w],
                    _ => return Err(mismatch(format!("kernel {kernel} does not fit {x:?}"))),
                }
            }
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => {
                if x.len() != 1 || x[0] != *in_features {
                    return Err(mismatch(format!(
                        "dense expects [{in_features}] input, got {x:?}"
                    )));
                }
                if *out_features == 0 {
                    return Err(mismatch("dense with zero outputs".into()));
                }
                vec![*out_features]
            }
            LayerKind::BatchNorm { channels } => {
                if (x.len() != 1 && x.len() != 3) || x[0] != *channels {
                    return Err(mismatch(format!(
                        "batchnorm over {channels} channels receives {x:?}"
                    )));
                }
                x.to_vec()
            }
            LayerKind::Relu => x.to_vec(),
            LayerKind::AvgPool { kernel } => {
                if x.len() != 3 {
                    return Err(mismatch(format!("avg_pool needs [c, h, w], got {x:?}")));
                }
                match kernel {
                    None if x[1] == x[2] => vec![x[0], 1, 1],
                    Some(k) if *k > 0 && x[1].is_multiple_of(*k) && x[2].is_multiple_of(*k) => {
                        vec![x[0], x[1] / k, x[2] / k]
                    }
                    _ => return Err(mismatch(format!("pool window {kernel:?} does not tile {x:?}"))),
                }
            }
            LayerKind::Add => {
                if in_shapes[0] != in_shapes[1] {
                    return Err(mismatch(format!(
                        "add of {:?} and {:?}",
                        in_shapes[0], in_shapes[1]
                    )));
                }
                x.to_vec()
            }
            LayerKind::Flatten => vec![x.iter().product()],
            LayerKind::Concat => {
                let mut out = x.to_vec();
                if out.len() != 3 {
                    return Err(mismatch(format!("concat needs [c, h, w] inputs, got {x:?}")));
                }
                out[0] = 0;
                for s in &in_shapes {
                    if s.len() != 3 || s[1..] != x[1..] {
                        return Err(mismatch(format!("concat of {s:?} with {x:?}")));
                    }
                    out[0] += s[0];
                }
                out
            }
        };
        sources.push(srcs);
        shapes.push(out);
    }
    let mut consumers = vec![Vec::new(); spec.layers.len()];
    for (i, srcs) in sources.iter().enumerate() {
        for s in srcs {
            if let Source::Layer(j) = s {
                if !consumers[*j].contains(&i) {
                    consumers[*j].push(i);
                }
            }
        }
    }
    Ok(Topology {
        sources,
        shapes,
        consumers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Which parameters make up a prunable filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterTarget {
    /// Conv output channels: kernel row (plus bias when included).
    ConvWeights,
    /// Normalization channels: the (scale, shift) pair.
    BnParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub param: String,
    pub start: usize,
    pub end: usize,
}

/// One prunable channel and the parameter slices realizing its filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterHandle {
    pub layer: String,
    pub layer_index: usize,
    pub channel: usize,
    pub slices: Vec<ParamSlice>,
    pub filter_dim: usize,
    /// Flattened copy of the slices at extraction time.
    pub vector: Vec<f64>,
}

impl FilterHandle {
    pub fn gather(&self, store: &ParamStore) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.filter_dim);
        for s in &self.slices {
            out.extend_from_slice(&store.require(&s.param)?.data()[s.start..s.end]);
        }
        Ok(out)
    }

    pub fn gather_grad(&self, grads: &BTreeMap<String, Tensor>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.filter_dim);
        for s in &self.slices {
            let g = grads
                .get(&s.param)
                .ok_or_else(|| Error::State(format!("no gradient for `{}`", s.param)))?;
            out.extend_from_slice(&g.data()[s.start..s.end]);
        }
        Ok(out)
    }

    pub fn scatter(&self, store: &mut ParamStore, values: &[f64]) -> Result<()> {
        if values.len() != self.filter_dim {
            return Err(Error::shape(
                "scatter",
                format!("{} values for a filter of {}", values.len(), self.filter_dim),
            ));
        }
        let mut off = 0;
        for s in &self.slices {
            let len = s.end - s.start;
            store.require_mut(&s.param)?.data_mut()[s.start..s.end]
                .copy_from_slice(&values[off..off + len]);
            off += len;
        }
        Ok(())
    }
}

/// Consumer input slice removed together with a group: indices
/// `[start, end)` along the consumer's input axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputSlice {
    pub layer: String,
    pub start: usize,
    pub end: usize,
}

/// Channels that structural coupling forces to share one prune decision.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneGroup {
    /// Producer channels first (layer order), then normalization channels.
    pub members: Vec<FilterHandle>,
    pub downstream: Vec<InputSlice>,
}

impl PruneGroup {
    /// First producer member in layer order.
    pub fn anchor(&self) -> &FilterHandle {
        &self.members[0]
    }

    pub fn channels(&self) -> impl Iterator<Item = (&str, usize)> {
        self.members.iter().map(|m| (m.layer.as_str(), m.channel))
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Batch-statistics normalization nodes by layer index.
    pub bn_nodes: Vec<(usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    buffers: ParamStore,
    topo: Topology,
    extension: Option<Vec<InjectionSite>>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.params == other.params
            && self.buffers == other.buffers
            && self.extension == other.extension
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

pub fn running_mean_name(layer: &str) -> String {
    format!("{layer}.running_mean")
}

pub fn running_var_name(layer: &str) -> String {
    format!("{layer}.running_var")
}

/// Builds a model with deterministic initialization: Kaiming-uniform
/// weights (`±sqrt(6 / fan_in)`), biases uniform in `±1/sqrt(fan_in)`,
/// normalization scale 1 and shift 0.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let topo = resolve(spec, &spec.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for layer in &spec.layers {
        match &layer.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let shape = vec![*out_channels, *in_channels, *kernel, *kernel];
                params.insert(weight_name(&layer.name), kaiming(&mut rng, shape, fan_in));
                if *bias {
                    params.insert(
                        bias_name(&layer.name),
                        uniform(&mut rng, vec![*out_channels], 1.0 / (fan_in as f64).sqrt()),
                    );
                }
            }
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
            } => {
                let shape = vec![*out_features, *in_features];
                params.insert(weight_name(&layer.name), kaiming(&mut rng, shape, *in_features));
                if *bias {
                    params.insert(
                        bias_name(&layer.name),
                        uniform(&mut rng, vec![*out_features], 1.0 / (*in_features as f64).sqrt()),
                    );
                }
            }
            LayerKind::BatchNorm { channels } => {
                params.insert(weight_name(&layer.name), Tensor::full(vec![*channels], 1.0));
                params.insert(bias_name(&layer.name), Tensor::zeros(vec![*channels]));
                buffers.insert(running_mean_name(&layer.name), Tensor::zeros(vec![*channels]));
                buffers.insert(running_var_name(&layer.name), Tensor::full(vec![*channels], 1.0));
            }
            _ => {}
        }
    }
    Ok(Model {
        spec: spec.clone(),
        params,
        buffers,
        topo,
        extension: None,
    })
}

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

impl Model {
    /// Rebuilds a model from a spec and a checkpoint holding its parameters
    /// and normalization buffers.
    pub fn from_checkpoint(spec: &ModelSpec, store: &ParamStore) -> Result<Model> {
        let template = build_model(spec, 0)?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for (dst, src) in [(&mut params, &template.params), (&mut buffers, &template.buffers)] {
            for (name, t) in src.iter() {
                let loaded = store
                    .get(name)
                    .ok_or_else(|| Error::Construction(format!("checkpoint lacks `{name}`")))?;
                if loaded.shape() != t.shape() {
                    return Err(Error::Construction(format!(
                        "`{name}` has shape {:?} in the checkpoint, spec needs {:?}",
                        loaded.shape(),
                        t.shape()
                    )));
                }
                dst.insert(name.clone(), loaded.clone());
            }
        }
        if store.len() != params.len() + buffers.len() {
            let extra = store
                .names()
                .find(|n| !params.contains(n) && !buffers.contains(n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Construction(format!(
                "checkpoint entry `{extra}` does not belong to this spec"
            )));
        }
        Ok(Model {
            params,
            buffers,
            ..template
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.spec.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.spec.layer_index(name)
    }

    /// Per-sample output shape of a layer.
    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.topo.shapes[layer]
    }

    /// Indices of layers reading `layer`'s output.
    pub fn consumers(&self, layer: usize) -> &[usize] {
        &self.topo.consumers[layer]
    }

    /// Layer indices feeding `layer` (`None` is the network input).
    pub fn producers_of(&self, layer: usize) -> Vec<Option<usize>> {
        self.topo.sources[layer]
            .iter()
            .map(|s| match s {
                Source::Input => None,
                Source::Layer(j) => Some(*j),
            })
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.topo.shapes.last().map_or(0, |s| s[0])
    }

    /// Parameters and normalization buffers, as written to checkpoints.
    pub fn state(&self) -> ParamStore {
        let mut all = self.params.clone();
        all.extend(&self.buffers).expect("parameter and buffer names are disjoint");
        all
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        crate::tensor::checkpoint_bytes(&self.state())
    }

    pub fn extension(&self) -> Option<&[InjectionSite]> {
        self.extension.as_deref()
    }

    pub(crate) fn set_extension(&mut self, sites: Option<Vec<InjectionSite>>) {
        self.extension = sites;
    }

    /// Records the forward pass on `g` and returns the logits node.
    pub fn forward(&self, g: &mut ComputeGraph, x: Tensor, mode: Mode) -> Result<ForwardPass> {
        let expected = &self.spec.input;
        if x.rank() != expected.len() + 1 || &x.shape()[1..] != expected.as_slice() {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} for per-sample input {:?}", x.shape(), expected),
            ));
        }
        let input = g.input(x)?;
        let mut identity_sites: HashMap<usize, &InjectionSite> = HashMap::new();
        let mut relu_sites: HashMap<usize, &InjectionSite> = HashMap::new();
        for site in self.extension.iter().flatten() {
            match &site.wraps {
                Some(relu) => {
                    let i = self.layer_index(relu).ok_or_else(|| {
                        Error::State(format!("injection wraps unknown layer `{relu}`"))
                    })?;
                    relu_sites.insert(i, site);
                }
                None => {
                    let i = self.layer_index(&site.anchor).ok_or_else(|| {
                        Error::State(format!("injection anchored at unknown layer `{}`", site.anchor))
                    })?;
                    identity_sites.insert(i, site);
                }
            }
        }
        let inject = |g: &mut ComputeGraph, x: Var, site: &InjectionSite| -> Result<Var> {
            let d = g.param(site.d_param(), Tensor::from_vec(site.d.clone()))?;
            let dbar = g.param(site.dbar_param(), Tensor::from_vec(site.dbar.clone()))?;
            g.psi(x, d, dbar, site.sigma)
        };

        let mut outs: Vec<Var> = Vec::with_capacity(self.spec.layers.len());
        let mut bn_nodes = Vec::new();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let ins: Vec<Var> = self.topo.sources[i]
                .iter()
                .map(|s| match s {
                    Source::Input => input,
                    Source::Layer(j) => outs[*j],
                })
                .collect();
            let x = ins[0];
            let name = &layer.name;
            let mut out = match &layer.kind {
                LayerKind::Conv2d {
                    stride,
                    padding,
                    bias,
                    ..
                } => {
                    let w = g.param(weight_name(name), self.params.require(&weight_name(name))?.clone())?;
                    let b = if *bias {
                        Some(g.param(bias_name(name), self.params.require(&bias_name(name))?.clone())?)
                    } else {
                        None
                    };
                    g.conv2d(
                        x,
                        w,
                        b,
                        ConvGeometry {
                            stride: *stride,
                            padding: *padding,
                        },
                    )?
                }
                LayerKind::Dense { bias, .. } => {
                    let w = g.param(weight_name(name), self.params.require(&weight_name(name))?.clone())?;
                    let b = if *bias {
                        Some(g.param(bias_name(name), self.params.require(&bias_name(name))?.clone())?)
                    } else {
                        None
                    };
                    g.dense(x, w, b)?
                }
                LayerKind::BatchNorm { .. } => {
                    let gamma = g.param(weight_name(name), self.params.require(&weight_name(name))?.clone())?;
                    let beta = g.param(bias_name(name), self.params.require(&bias_name(name))?.clone())?;
                    let bn_mode = match mode {
                        Mode::Train => BnMode::Batch,
                        Mode::Eval => BnMode::Running {
                            mean: self.buffers.require(&running_mean_name(name))?.data().to_vec(),
                            var: self.buffers.require(&running_var_name(name))?.data().to_vec(),
                        },
                    };
                    let v = g.batch_norm(x, gamma, beta, bn_mode)?;
                    if mode == Mode::Train {
                        bn_nodes.push((i, v));
                    }
                    v
                }
                LayerKind::Relu => match relu_sites.get(&i) {
                    Some(site) => inject(g, x, site)?,
                    None => g.relu(x)?,
                },
                LayerKind::AvgPool { kernel } => g.avg_pool(x, *kernel)?,
                LayerKind::Add => g.add(ins[0], ins[1])?,
                LayerKind::Flatten => g.flatten(x)?,
                LayerKind::Concat => g.concat(&ins)?,
            };
            if let Some(site) = identity_sites.get(&i) {
                out = inject(g, out, site)?;
            }
            outs.push(out);
        }
        let logits = *outs.last().expect("model has layers");
        if g.value(logits).rank() != 2 {
            return Err(Error::shape(
                "forward",
                format!("model output {:?} is not [n, classes]", g.value(logits).shape()),
            ));
        }
        Ok(ForwardPass { logits, bn_nodes })
    }

    /// Forward pass plus mean softmax cross-entropy.
    pub fn loss(
        &self,
        g: &mut ComputeGraph,
        x: Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Var, ForwardPass)> {
        if x.shape().first() != Some(&labels.len()) {
            return Err(Error::shape(
                "loss",
                format!("batch {:?} with {} labels", x.shape(), labels.len()),
            ));
        }
        let pass = self.forward(g, x, mode)?;
        let loss = g.softmax_cross_entropy(pass.logits, labels)?;
        Ok((loss, pass))
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: Tensor) -> Result<Tensor> {
        let mut g = ComputeGraph::new();
        let pass = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Folds the batch statistics recorded by a train-mode pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, g: &ComputeGraph, pass: &ForwardPass) -> Result<()> {
        for &(i, v) in &pass.bn_nodes {
            let stats = g
                .batch_stats(v)
                .ok_or_else(|| Error::State("normalization node without batch statistics".into()))?;
            let name = &self.spec.layers[i].name;
            for (buf, batch) in [
                (running_mean_name(name), &stats.mean),
                (running_var_name(name), &stats.var_unbiased),
            ] {
                let t = self.buffers.require_mut(&buf)?;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }

    fn is_classifier(&self, layer: usize) -> bool {
        layer + 1 == self.spec.layers.len()
    }

    fn producer_handle(&self, i: usize, channel: usize, include_bias: bool) -> Result<FilterHandle> {
        let layer = &self.spec.layers[i];
        let w = self.params.require(&weight_name(&layer.name))?;
        let row: usize = w.shape()[1..].iter().product();
        let mut slices = vec![ParamSlice {
            param: weight_name(&layer.name),
            start: channel * row,
            end: (channel + 1) * row,
        }];
        if include_bias && self.params.contains(&bias_name(&layer.name)) {
            slices.push(ParamSlice {
                param: bias_name(&layer.name),
                start: channel,
                end: channel + 1,
            });
        }
        self.handle(i, channel, slices)
    }

    fn bn_handle(&self, i: usize, channel: usize) -> Result<FilterHandle> {
        let name = &self.spec.layers[i].name;
        let slices = [weight_name(name), bias_name(name)]
            .into_iter()
            .map(|param| ParamSlice {
                param,
                start: channel,
                end: channel + 1,
            })
            .collect();
        self.handle(i, channel, slices)
    }

    fn handle(&self, i: usize, channel: usize, slices: Vec<ParamSlice>) -> Result<FilterHandle> {
        let mut h = FilterHandle {
            layer: self.spec.layers[i].name.clone(),
            layer_index: i,
            channel,
            filter_dim: slices.iter().map(|s| s.end - s.start).sum(),
            slices,
            vector: Vec::new(),
        };
        h.vector = h.gather(&self.params)?;
        Ok(h)
    }

    /// One handle per output channel of every target layer (the classifier
    /// excluded), in layer order.
    pub fn extract_filters(&self, target: FilterTarget, include_bias: bool) -> Result<Vec<FilterHandle>> {
        let mut out = Vec::new();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if self.is_classifier(i) {
                continue;
            }
            match (&layer.kind, target) {
                (LayerKind::Conv2d { out_channels, .. }, FilterTarget::ConvWeights) => {
                    for c in 0..*out_channels {
                        out.push(self.producer_handle(i, c, include_bias)?);
                    }
                }
                (LayerKind::BatchNorm { channels }, FilterTarget::BnParams) => {
                    for c in 0..*channels {
                        out.push(self.bn_handle(i, c)?);
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Partitions prunable channels into groups that must be removed
    /// together.
    ///
    /// Channel identity is traced from each producer (conv / dense) through
    /// normalization, activation, pooling and flatten. An `add` merges the
    /// matching channels of its two operands into one group. Channels that
    /// reach the classifier output or merge with the network input are not
    /// prunable. Concatenation is rejected.
    pub fn dependency_groups(&self) -> Result<Vec<PruneGroup>> {
        #[derive(Clone)]
        struct ChanMap {
            chans: Vec<Option<usize>>,
            per_channel: usize,
        }
        let n_layers = self.spec.layers.len();
        let mut node_owner: Vec<(usize, usize)> = Vec::new();
        let mut maps: Vec<ChanMap> = Vec::with_capacity(n_layers);
        let mut parent: Vec<usize> = Vec::new();
        let mut poisoned: Vec<usize> = Vec::new();
        let mut bn_members: Vec<(usize, usize, usize)> = Vec::new();
        let mut consumed: Vec<(usize, String, usize, usize)> = Vec::new();

        fn find(parent: &mut [usize], mut a: usize) -> usize {
            while parent[a] != a {
                parent[a] = parent[parent[a]];
                a = parent[a];
            }
            a
        }

        let input_map = ChanMap {
            chans: vec![None; self.spec.input[0]],
            per_channel: 1,
        };
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let ins: Vec<&ChanMap> = self.topo.sources[i]
                .iter()
                .map(|s| match s {
                    Source::Input => &input_map,
                    Source::Layer(j) => &maps[*j],
                })
                .collect();
            let x = ins[0];
            let map = match &layer.kind {
                LayerKind::Conv2d { out_channels, .. } | LayerKind::Dense { out_features: out_channels, .. } => {
                    for (c, node) in x.chans.iter().enumerate() {
                        if let Some(id) = node {
                            consumed.push((
                                *id,
                                layer.name.clone(),
                                c * x.per_channel,
                                (c + 1) * x.per_channel,
                            ));
                        }
                    }
                    let chans = (0..*out_channels)
                        .map(|c| {
                            let id = node_owner.len();
                            node_owner.push((i, c));
                            parent.push(id);
                            Some(id)
                        })
                        .collect();
                    ChanMap {
                        chans,
                        per_channel: 1,
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    for (c, node) in x.chans.iter().enumerate() {
                        if let Some(id) = node {
                            bn_members.push((*id, i, c));
                        }
                    }
                    x.clone()
                }
                LayerKind::Relu | LayerKind::AvgPool { .. } => x.clone(),
                LayerKind::Flatten => {
                    let shape = self.producers_of(i)[0]
                        .map_or(self.spec.input.as_slice(), |j| self.output_shape(j));
                    let spatial: usize = shape[1..].iter().product();
                    ChanMap {
                        chans: x.chans.clone(),
                        per_channel: x.per_channel * spatial,
                    }
                }
                LayerKind::Add => {
                    let (a, b) = (ins[0], ins[1]);
                    if a.per_channel != b.per_channel {
                        return Err(Error::UnsupportedTopology(format!(
                            "`{}` adds tensors with different channel layouts",
                            layer.name
                        )));
                    }
                    let mut chans = Vec::with_capacity(a.chans.len());
                    for (ca, cb) in a.chans.iter().zip(&b.chans) {
                        chans.push(match (ca, cb) {
                            (Some(p), Some(q)) => {
                                let (rp, rq) = (find(&mut parent, *p), find(&mut parent, *q));
                                if rp != rq {
                                    parent[rq] = rp;
                                }
                                Some(*p)
                            }
                            (Some(p), None) | (None, Some(p)) => {
                                poisoned.push(*p);
                                Some(*p)
                            }
                            (None, None) => None,
                        });
                    }
                    ChanMap {
                        chans,
                        per_channel: a.per_channel,
                    }
                }
                LayerKind::Concat => {
                    return Err(Error::UnsupportedTopology(format!(
                        "`{}` concatenates channels; only chains and residual adds can be pruned",
                        layer.name
                    )))
                }
            };
            maps.push(map);
        }
        if let Some(last) = maps.last() {
            poisoned.extend(last.chans.iter().flatten());
        }
        let poisoned_roots: BTreeSet<usize> =
            poisoned.iter().map(|&p| find(&mut parent, p)).collect();

        // group by root, ordered by smallest member node id (layer order, then channel)
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for id in 0..node_owner.len() {
            let r = find(&mut parent, id);
            if !poisoned_roots.contains(&r) {
                by_root.entry(r).or_default().push(id);
            }
        }
        let mut groups: Vec<(usize, PruneGroup)> = Vec::new();
        for (root, ids) in by_root {
            let mut members = Vec::new();
            for &id in &ids {
                let (li, c) = node_owner[id];
                members.push(self.producer_handle(li, c, true)?);
            }
            let mut bns: Vec<(usize, usize)> = bn_members
                .iter()
                .filter(|(id, _, _)| find(&mut parent, *id) == root)
                .map(|&(_, li, c)| (li, c))
                .collect();
            bns.sort_unstable();
            bns.dedup();
            for (li, c) in bns {
                members.push(self.bn_handle(li, c)?);
            }
            let mut downstream: Vec<InputSlice> = consumed
                .iter()
                .filter(|(id, ..)| find(&mut parent, *id) == root)
                .map(|(_, layer, s, e)| InputSlice {
                    layer: layer.clone(),
                    start: *s,
                    end: *e,
                })
                .collect();
            downstream.sort_by_key(|d| (self.layer_index(&d.layer), d.start));
            downstream.dedup();
            groups.push((ids[0], PruneGroup { members, downstream }));
        }
        groups.sort_by_key(|(first, _)| *first);
        Ok(groups.into_iter().map(|(_, g)| g).collect())
    }

    /// Returns a physically smaller model with the given producer output
    /// channels removed. Coupled channels (normalization, residual partners,
    /// consumer inputs) follow automatically; residual partners must be
    /// removed consistently or the call fails.
    pub fn remove_channels(&self, removed: &BTreeMap<String, BTreeSet<usize>>) -> Result<Model> {
        if self.extension.is_some() {
            return Err(Error::State("cannot prune an extended model; revert it first".into()));
        }
        for (name, chans) in removed {
            let i = self
                .layer_index(name)
                .ok_or_else(|| Error::InvalidArgument(format!("plan names unknown layer `{name}`")))?;
            let layer = &self.spec.layers[i];
            if !layer.kind.is_producer() || self.is_classifier(i) {
                return Err(Error::InvalidArgument(format!(
                    "`{name}` ({}) has no prunable output channels",
                    layer.kind.label()
                )));
            }
            let c = self.topo.shapes[i][0];
            if let Some(&bad) = chans.iter().find(|&&ch| ch >= c) {
                return Err(Error::InvalidArgument(format!(
                    "channel {bad} out of range for `{name}` ({c} channels)"
                )));
            }
            if chans.len() >= c {
                return Err(Error::InvalidArgument(format!(
                    "plan removes every channel of `{name}`"
                )));
            }
        }

        #[derive(Clone)]
        struct Keep {
            kept: Vec<usize>,
            per_channel: usize,
        }
        impl Keep {
            fn features(&self) -> Vec<usize> {
                self.kept
                    .iter()
                    .flat_map(|&c| c * self.per_channel..(c + 1) * self.per_channel)
                    .collect()
            }
        }
        let input_keep = Keep {
            kept: (0..self.spec.input[0]).collect(),
            per_channel: 1,
        };
        let mut keeps: Vec<Keep> = Vec::with_capacity(self.spec.layers.len());
        let mut spec = self.spec.clone();
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let ins: Vec<&Keep> = self.topo.sources[i]
                .iter()
                .map(|s| match s {
                    Source::Input => &input_keep,
                    Source::Layer(j) => &keeps[*j],
                })
                .collect();
            let x = ins[0].clone();
            let name = &layer.name;
            let keep = match &layer.kind {
                LayerKind::Conv2d { out_channels, .. } | LayerKind::Dense { out_features: out_channels, .. } => {
                    let gone = removed.get(name);
                    let own: Vec<usize> = (0..*out_channels)
                        .filter(|c| gone.is_none_or(|g| !g.contains(c)))
                        .collect();
                    let w = self.params.require(&weight_name(name))?;
                    let w = w.select_axis(0, &own)?.select_axis(1, &x.features())?;
                    params.insert(weight_name(name), w);
                    if let Some(b) = self.params.get(&bias_name(name)) {
                        params.insert(bias_name(name), b.select_axis(0, &own)?);
                    }
                    match &mut spec.layers[i].kind {
                        LayerKind::Conv2d {
                            in_channels,
                            out_channels,
                            ..
                        } => {
                            *in_channels = x.kept.len();
                            *out_channels = own.len();
                        }
                        LayerKind::Dense {
                            in_features,
                            out_features,
                            ..
                        } => {
                            *in_features = x.kept.len() * x.per_channel;
                            *out_features = own.len();
                        }
                        _ => unreachable!(),
                    }
                    Keep {
                        kept: own,
                        per_channel: 1,
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    for p in [weight_name(name), bias_name(name)] {
                        params.insert(p.clone(), self.params.require(&p)?.select_axis(0, &x.kept)?);
                    }
                    for b in [running_mean_name(name), running_var_name(name)] {
                        buffers.insert(b.clone(), self.buffers.require(&b)?.select_axis(0, &x.kept)?);
                    }
                    spec.layers[i].kind = LayerKind::BatchNorm {
                        channels: x.kept.len(),
                    };
                    x
                }
                LayerKind::Relu | LayerKind::AvgPool { .. } => x,
                LayerKind::Flatten => {
                    let shape = self.producers_of(i)[0]
                        .map_or(self.spec.input.as_slice(), |j| self.output_shape(j));
                    let spatial: usize = shape[1..].iter().product();
                    Keep {
                        kept: x.kept,
                        per_channel: x.per_channel * spatial,
                    }
                }
                LayerKind::Add => {
                    if ins[0].kept != ins[1].kept {
                        return Err(Error::InvalidArgument(format!(
                            "plan/model mismatch: operands of `{name}` keep different channels"
                        )));
                    }
                    x
                }
                LayerKind::Concat => {
                    let mut kept = Vec::new();
                    let mut offset = 0;
                    for (k, src) in ins.iter().zip(self.producers_of(i)) {
                        kept.extend(k.kept.iter().map(|c| c + offset));
                        offset += src.map_or(self.spec.input[0], |j| self.output_shape(j)[0]);
                    }
                    Keep {
                        kept,
                        per_channel: 1,
                    }
                }
            };
            keeps.push(keep);
        }
        let topo = resolve(&spec, &spec.input)?;
        Ok(Model {
            spec,
            params,
            buffers,
            topo,
            extension: None,
        })
    }
}

/// Parameter and FLOP totals. FLOPs are `2 × MACs` for conv
/// (`C_out·C_in·k²·H_out·W_out` MACs) and dense (`in·out` MACs) layers, plus
/// 2 ops per element for batch normalization and 1 per element for ReLU.
/// Other layers are free.
pub fn count_params_flops(model: &Model, input: &[usize]) -> Result<(u64, u64)> {
    let topo = resolve(model.spec(), input)?;
    let params = model.params().numel() as u64;
    let mut flops: u64 = 0;
    for (i, layer) in model.layers().iter().enumerate() {
        let out = &topo.shapes[i];
        let elems: u64 = out.iter().product::<usize>() as u64;
        flops += match &layer.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => 2 * (out_channels * in_channels * kernel * kernel * out[1] * out[2]) as u64,
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => 2 * (in_features * out_features) as u64,
            LayerKind::BatchNorm { .. } => 2 * elems,
            LayerKind::Relu => elems,
            _ => 0,
        };
    }
    Ok((params, flops))
}
