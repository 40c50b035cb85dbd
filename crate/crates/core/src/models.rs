//! Split-depth networks: a shared trunk of `s` hidden layers followed by one
//! individual head per output factor, each with the remaining `L - s`
//! hidden layers and its own output layer.
//!
//! Head hidden layers are `max(1, W / K)` wide so that the summed node count
//! of every hidden layer stays at `W` whatever the split point.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};
use crate::Combo;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SGL1";
const PREDICT_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mlp,
    Cnn,
    Mlp2d,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// One softmax classifier per factor.
    #[default]
    Softmax,
    /// Every output node is an independent sigmoid; together the nodes of
    /// all heads form a single classifier (argmax over all nodes).
    Binary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

fn default_fc_width() -> usize {
    128
}

fn default_kernel_size() -> usize {
    3
}

/// Architecture of a split-depth network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitModelSpec {
    pub family: Family,
    /// Hidden layers along any input-to-output path (`L`).
    pub total_depth: usize,
    /// Hidden layers in the shared trunk (`s`, `0..=L`).
    pub shared_depth: usize,
    /// Trunk width `W`: nodes for dense layers, channels for conv layers.
    pub trunk_width: usize,
    pub factor_count: usize,
    pub classes_per_factor: Vec<usize>,
    /// Per-sample input shape; `[H, W, C]` for the cnn family.
    pub input_shape: Vec<usize>,
    pub use_bias: bool,
    #[serde(default)]
    pub head_mode: HeadMode,
    #[serde(default)]
    pub activation: Activation,
    /// Width of the fully connected layer after the convolutions (cnn only).
    #[serde(default = "default_fc_width")]
    pub fc_width: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
}

impl SplitModelSpec {
    /// Dense network with `total_depth` hidden layers of `trunk_width` nodes.
    pub fn mlp(
        total_depth: usize,
        shared_depth: usize,
        trunk_width: usize,
        classes_per_factor: Vec<usize>,
        input_shape: Vec<usize>,
    ) -> Self {
        Self {
            family: Family::Mlp,
            total_depth,
            shared_depth,
            trunk_width,
            factor_count: classes_per_factor.len(),
            classes_per_factor,
            input_shape,
            use_bias: true,
            head_mode: HeadMode::Softmax,
            activation: Activation::Relu,
            fc_width: default_fc_width(),
            kernel_size: default_kernel_size(),
        }
    }

    /// The 2-D toy network: six hidden layers of eight nodes, two binary
    /// factors.
    pub fn mlp2d(shared_depth: usize) -> Self {
        Self {
            family: Family::Mlp2d,
            total_depth: 6,
            trunk_width: 8,
            input_shape: vec![2],
            ..Self::mlp(6, shared_depth, 8, vec![2, 2], vec![2])
        }
    }

    /// Convolutional network: `total_depth - 1` conv layers of
    /// `trunk_width` channels, flatten, one dense layer of `fc_width` nodes.
    pub fn cnn(
        total_depth: usize,
        shared_depth: usize,
        channels: usize,
        fc_width: usize,
        classes_per_factor: Vec<usize>,
        input_shape: Vec<usize>,
    ) -> Self {
        Self {
            family: Family::Cnn,
            fc_width,
            ..Self::mlp(
                total_depth,
                shared_depth,
                channels,
                classes_per_factor,
                input_shape,
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.total_depth == 0 {
            return fail("total_depth must be at least 1".into());
        }
        if self.shared_depth > self.total_depth {
            return fail(format!(
                "shared_depth {} exceeds total_depth {}",
                self.shared_depth, self.total_depth
            ));
        }
        if self.trunk_width == 0 {
            return fail("trunk_width must be positive".into());
        }
        if self.factor_count == 0 {
            return fail("factor_count must be at least 1".into());
        }
        if self.classes_per_factor.len() != self.factor_count {
            return fail(format!(
                "classes_per_factor has {} entries for {} factors",
                self.classes_per_factor.len(),
                self.factor_count
            ));
        }
        if self.classes_per_factor.contains(&0) {
            return fail("every factor needs at least one class".into());
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return fail(format!("invalid input shape {:?}", self.input_shape));
        }
        if self.family == Family::Cnn {
            if self.input_shape.len() != 3 {
                return fail(format!(
                    "cnn input shape must be [H, W, C], got {:?}",
                    self.input_shape
                ));
            }
            if self.kernel_size.is_multiple_of(2) {
                return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
            }
            if self.fc_width == 0 {
                return fail("fc_width must be positive".into());
            }
        }
        Ok(())
    }

    /// Width of one head's hidden layer given the trunk width of that layer.
    pub fn head_width(&self, trunk_width: usize) -> usize {
        (trunk_width / self.factor_count).max(1)
    }

    fn conv_layers(&self) -> usize {
        match self.family {
            Family::Cnn => self.total_depth - 1,
            _ => 0,
        }
    }

    /// Trunk width of hidden layer `l`.
    fn layer_width(&self, l: usize) -> usize {
        if l < self.conv_layers() {
            self.trunk_width
        } else if self.family == Family::Cnn {
            self.fc_width
        } else {
            self.trunk_width
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Dense {
        weight: ParamId,
        bias: Option<ParamId>,
        activation: Option<Activation>,
    },
    Conv {
        kernel: ParamId,
        bias: Option<ParamId>,
        activation: Activation,
    },
    Flatten,
}

/// A built split-depth network with its parameter registry.
#[derive(Clone, Debug)]
pub struct SplitModel {
    spec: SplitModelSpec,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    notes: Vec<String>,
}

struct Builder<'a> {
    spec: &'a SplitModelSpec,
    rng: ChaCha8Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl Builder<'_> {
    fn add_param(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.params.push(tensor);
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(shape, -limit, limit, &mut self.rng)
    }

    fn dense(
        &mut self,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        activation: Option<Activation>,
    ) -> Layer {
        let w = self.glorot(&[inputs, outputs], inputs, outputs);
        let weight = self.add_param(format!("{prefix}.weight"), w);
        let bias = self
            .spec
            .use_bias
            .then(|| self.add_param(format!("{prefix}.bias"), Tensor::zeros(&[outputs])));
        Layer::Dense {
            weight,
            bias,
            activation,
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> Layer {
        let k = self.spec.kernel_size;
        let w = self.glorot(&[k, k, cin, cout], k * k * cin, k * k * cout);
        let kernel = self.add_param(format!("{prefix}.kernel"), w);
        let bias = self
            .spec
            .use_bias
            .then(|| self.add_param(format!("{prefix}.bias"), Tensor::zeros(&[cout])));
        Layer::Conv {
            kernel,
            bias,
            activation: self.spec.activation,
        }
    }

    /// Appends hidden layers `range` to `layers`. `feature` tracks the
    /// current per-sample feature size (channels while convolving).
    fn hidden(
        &mut self,
        prefix: &str,
        range: std::ops::Range<usize>,
        split: bool,
        feature: &mut Feature,
        layers: &mut Vec<Layer>,
    ) {
        for l in range {
            let trunk_w = self.spec.layer_width(l);
            let width = if split {
                self.spec.head_width(trunk_w)
            } else {
                trunk_w
            };
            let name = format!("{prefix}.layer{l}");
            if l < self.spec.conv_layers() {
                let Feature::Spatial { h, w, c } = *feature else {
                    unreachable!("conv layers precede flatten")
                };
                layers.push(self.conv(&name, c, width));
                *feature = Feature::Spatial { h, w, c: width };
            } else {
                let inputs = feature.flatten(layers);
                layers.push(self.dense(&name, inputs, width, Some(self.spec.activation)));
                *feature = Feature::Flat(width);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Feature {
    Flat(usize),
    Spatial { h: usize, w: usize, c: usize },
}

impl Feature {
    /// Returns the flat size, pushing a flatten layer if still spatial.
    fn flatten(&mut self, layers: &mut Vec<Layer>) -> usize {
        match *self {
            Feature::Flat(n) => n,
            Feature::Spatial { h, w, c } => {
                layers.push(Layer::Flatten);
                *self = Feature::Flat(h * w * c);
                h * w * c
            }
        }
    }
}

impl SplitModel {
    /// Builds the network with fan-in/fan-out scaled uniform weights and zero
    /// biases. Identical spec and seed give bit-identical parameters.
    pub fn build(spec: &SplitModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            names: Vec::new(),
        };
        let mut notes = Vec::new();
        if spec.factor_count > 1 && spec.shared_depth < spec.total_depth {
            for l in spec.shared_depth..spec.total_depth {
                let w = spec.layer_width(l);
                if w < spec.factor_count {
                    notes.push(format!(
                        "layer {l}: width {w} < {} factors; heads use width 1 (sum {})",
                        spec.factor_count, spec.factor_count
                    ));
                } else if !w.is_multiple_of(spec.factor_count) {
                    notes.push(format!(
                        "layer {l}: width {w} not divisible by {}; heads use {} each",
                        spec.factor_count,
                        w / spec.factor_count
                    ));
                }
            }
        }

        let mut feature = match spec.family {
            Family::Cnn => Feature::Spatial {
                h: spec.input_shape[0],
                w: spec.input_shape[1],
                c: spec.input_shape[2],
            },
            _ => Feature::Flat(spec.input_shape.iter().product()),
        };
        let mut trunk = Vec::new();
        b.hidden("trunk", 0..spec.shared_depth, false, &mut feature, &mut trunk);

        let mut heads = Vec::with_capacity(spec.factor_count);
        for (i, &classes) in spec.classes_per_factor.iter().enumerate() {
            let prefix = format!("head{i}");
            let mut layers = Vec::new();
            let mut f = feature;
            b.hidden(
                &prefix,
                spec.shared_depth..spec.total_depth,
                true,
                &mut f,
                &mut layers,
            );
            let inputs = f.flatten(&mut layers);
            layers.push(b.dense(&format!("{prefix}.output"), inputs, classes, None));
            heads.push(layers);
        }

        Ok(Self {
            spec: spec.clone(),
            trunk,
            heads,
            params: b.params,
            param_names: b.names,
            notes,
        })
    }

    pub fn spec(&self) -> &SplitModelSpec {
        &self.spec
    }

    /// Deviations from exact node-count preservation recorded at build time.
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn trunk_params(&self) -> Vec<ParamId> {
        layer_params(&self.trunk)
    }

    pub fn head_params(&self, head: usize) -> Vec<ParamId> {
        layer_params(&self.heads[head])
    }

    /// Summed node (or channel) count of each hidden layer across the trunk
    /// or across all heads.
    pub fn hidden_layer_widths(&self) -> Vec<usize> {
        let mut widths = hidden_widths(&self.trunk, &self.params);
        let per_head: Vec<Vec<usize>> = self
            .heads
            .iter()
            .map(|h| hidden_widths(h, &self.params))
            .collect();
        let n = per_head.first().map_or(0, Vec::len);
        for l in 0..n {
            widths.push(per_head.iter().map(|h| h[l]).sum());
        }
        widths
    }

    /// Registers every parameter as a trainable leaf, in registry order.
    pub fn attach(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| graph.param(ParamId(i), p.clone()))
            .collect()
    }

    /// Records the forward pass; returns one logit node per factor.
    pub fn forward(&self, graph: &mut Graph, params: &[NodeId], batch: NodeId) -> Result<Vec<NodeId>> {
        let x = self.shape_input(graph, batch)?;
        let h = apply_layers(graph, params, &self.trunk, x)?;
        self.heads
            .iter()
            .map(|layers| apply_layers(graph, params, layers, h))
            .collect()
    }

    /// Forward pass without gradient bookkeeping beyond the graph itself.
    pub fn logits(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let params = self.attach(&mut g);
        let x = g.input(batch.clone());
        let outs = self.forward(&mut g, &params, x)?;
        Ok(outs.into_iter().map(|id| g.value(id).clone()).collect())
    }

    /// Label tuples for a batch. Softmax heads: per-factor argmax. Binary
    /// heads: a single label, the argmax over all output nodes.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<Combo>> {
        self.check_batch(inputs.shape())?;
        let n = inputs.rows();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let idx: Vec<usize> = (start..n.min(start + PREDICT_CHUNK)).collect();
            let chunk = if idx.len() == n {
                inputs.clone()
            } else {
                inputs.select_rows(&idx)?
            };
            let logits = self.logits(&chunk)?;
            out.extend(combos_from_logits(&logits, self.spec.head_mode));
        }
        Ok(out)
    }

    /// Training loss: sum over factors of softmax cross-entropy, or for
    /// binary heads the per-node binary cross-entropy against the one-hot
    /// encoding of the single label.
    pub fn loss(&self, graph: &mut Graph, logits: &[NodeId], labels: &[Combo]) -> Result<NodeId> {
        let arity = match self.spec.head_mode {
            HeadMode::Softmax => self.spec.factor_count,
            HeadMode::Binary => 1,
        };
        if let Some(bad) = labels.iter().find(|c| c.len() != arity) {
            return Err(Error::Validation(format!(
                "label tuple {bad:?} has arity {}, expected {arity}",
                bad.len()
            )));
        }
        let mut total: Option<NodeId> = None;
        match self.spec.head_mode {
            HeadMode::Softmax => {
                for (f, &node) in logits.iter().enumerate() {
                    let ys: Vec<usize> = labels.iter().map(|c| c[f]).collect();
                    let l = graph.softmax_cross_entropy(node, &ys)?;
                    total = Some(match total {
                        Some(t) => graph.add(t, l)?,
                        None => l,
                    });
                }
            }
            HeadMode::Binary => {
                let total_nodes: usize = self.spec.classes_per_factor.iter().sum();
                if let Some(c) = labels.iter().find(|c| c[0] >= total_nodes) {
                    return Err(Error::Validation(format!(
                        "label {} out of range for {total_nodes} output nodes",
                        c[0]
                    )));
                }
                let mut offset = 0;
                for (f, &node) in logits.iter().enumerate() {
                    let width = self.spec.classes_per_factor[f];
                    let mut t = Tensor::zeros(&[labels.len(), width]);
                    for (i, c) in labels.iter().enumerate() {
                        if (offset..offset + width).contains(&c[0]) {
                            t.data_mut()[i * width + c[0] - offset] = 1.0;
                        }
                    }
                    let l = graph.sigmoid_binary_cross_entropy(node, t)?;
                    total = Some(match total {
                        Some(acc) => graph.add(acc, l)?,
                        None => l,
                    });
                    offset += width;
                }
            }
        }
        total.ok_or_else(|| Error::Contract("model has no heads".into()))
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            let mut want = vec![0];
            want.extend_from_slice(&self.spec.input_shape);
            return Err(Error::dim("model input", shape, &want));
        }
        Ok(())
    }

    fn shape_input(&self, graph: &mut Graph, batch: NodeId) -> Result<NodeId> {
        let shape = graph.value(batch).shape().to_vec();
        self.check_batch(&shape)?;
        match self.spec.family {
            Family::Cnn => Ok(batch),
            _ if shape.len() == 2 => Ok(batch),
            _ => graph.flatten(batch),
        }
    }

    /// Serializes as `SGL1`, a little-endian u64 byte length, the spec as
    /// UTF-8 JSON, then every parameter as little-endian f64 in registry
    /// order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.spec).expect("spec serializes");
        let mut out = Vec::with_capacity(12 + meta.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "missing SGL1 magic".into(),
            });
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let meta_end = 12usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(
            Error::Parse {
                offset: 4,
                message: format!("metadata length {len} exceeds file"),
            },
        )?;
        let meta = std::str::from_utf8(&bytes[12..meta_end]).map_err(|e| Error::Parse {
            offset: 12 + e.valid_up_to(),
            message: "metadata is not UTF-8".into(),
        })?;
        let spec: SplitModelSpec = serde_json::from_str(meta).map_err(|e| Error::Parse {
            offset: 12,
            message: format!("metadata: {e}"),
        })?;
        let mut model = Self::build(&spec, 0)?;
        let body = &bytes[meta_end..];
        let expected = 8 * model.param_count();
        if body.len() != expected {
            return Err(Error::Parse {
                offset: meta_end + body.len().min(expected),
                message: format!("expected {expected} parameter bytes, found {}", body.len()),
            });
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for p in &mut model.params {
            for v in p.data_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Converts per-factor logit tensors into label tuples.
pub fn combos_from_logits(logits: &[Tensor], mode: HeadMode) -> Vec<Combo> {
    let n = logits.first().map_or(0, Tensor::rows);
    match mode {
        HeadMode::Softmax => {
            let per_factor: Vec<Vec<usize>> = logits.iter().map(Tensor::argmax_rows).collect();
            (0..n)
                .map(|i| per_factor.iter().map(|f| f[i]).collect())
                .collect()
        }
        HeadMode::Binary => (0..n)
            .map(|i| {
                let row: Vec<f64> = logits.iter().flat_map(|t| t.row(i).iter().copied()).collect();
                vec![argmax(&row)]
            })
            .collect(),
    }
}

fn apply_layers(graph: &mut Graph, params: &[NodeId], layers: &[Layer], mut x: NodeId) -> Result<NodeId> {
    for layer in layers {
        x = match *layer {
            Layer::Dense {
                weight,
                bias,
                activation,
            } => {
                let mut y = graph.matmul(x, params[weight.0])?;
                if let Some(b) = bias {
                    y = graph.add_bias(y, params[b.0])?;
                }
                match activation {
                    Some(a) => activate(graph, a, y)?,
                    None => y,
                }
            }
            Layer::Conv {
                kernel,
                bias,
                activation,
            } => {
                let mut y = graph.conv2d(x, params[kernel.0])?;
                if let Some(b) = bias {
                    y = graph.add_bias(y, params[b.0])?;
                }
                activate(graph, activation, y)?
            }
            Layer::Flatten => graph.flatten(x)?,
        };
    }
    Ok(x)
}

fn activate(graph: &mut Graph, a: Activation, x: NodeId) -> Result<NodeId> {
    match a {
        Activation::Relu => graph.relu(x),
        Activation::Tanh => graph.tanh(x),
    }
}

fn layer_params(layers: &[Layer]) -> Vec<ParamId> {
    let mut out = Vec::new();
    for l in layers {
        match *l {
            Layer::Dense { weight, bias, .. } => {
                out.push(weight);
                out.extend(bias);
            }
            Layer::Conv { kernel, bias, .. } => {
                out.push(kernel);
                out.extend(bias);
            }
            Layer::Flatten => {}
        }
    }
    out
}

/// Output widths of the hidden (activated) layers in a stack.
fn hidden_widths(layers: &[Layer], params: &[Tensor]) -> Vec<usize> {
    layers
        .iter()
        .filter_map(|l| match *l {
            Layer::Dense {
                weight,
                activation: Some(_),
                ..
            } => Some(params[weight.0].shape()[1]),
            Layer::Conv { kernel, .. } => Some(params[kernel.0].shape()[3]),
            _ => None,
        })
        .collect()
}
