//! Declarative layer graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layers::{conv_output_dims, resize_plan};
use crate::{Error, Result};

/// Index of a node inside [`NetSpec::nodes`].
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    /// The single-channel multi-scale tensor map.
    Input,
    ZeroPad {
        pad: usize,
    },
    Conv {
        kernel: usize,
        out_channels: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    /// Skip connection; operands must have identical shapes.
    Add,
    /// Element-wise product; a one-channel operand broadcasts.
    Multiply,
    /// Rescales its first input to the spatial size of its second by an
    /// integer factor (replication up, block mean down).
    Resize,
    Reshape {
        height: usize,
        width: usize,
    },
    Softmax,
}

impl NodeKind {
    /// Census bucket the node is counted under.
    pub fn census_name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::ZeroPad { .. } => "zero_padding",
            NodeKind::Conv { .. } => "convolution",
            NodeKind::BatchNorm => "batch_normalization",
            NodeKind::Relu => "activation",
            NodeKind::MaxPool | NodeKind::AvgPool => "pooling",
            NodeKind::Add => "addition",
            NodeKind::Multiply => "multiply",
            NodeKind::Resize => "lambda",
            NodeKind::Reshape { .. } => "reshape",
            NodeKind::Softmax => "softmax",
        }
    }

    fn arity(&self) -> usize {
        match self {
            NodeKind::Input => 0,
            NodeKind::Add | NodeKind::Multiply | NodeKind::Resize => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

/// Layer graph in topological order: a node may only consume earlier nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    /// Foreground categories; the output carries one extra background channel.
    pub categories: usize,
    /// Nominal input size used for validation.
    pub input_height: usize,
    pub input_width: usize,
    pub nodes: Vec<Node>,
}

/// Per-kind layer counts and parameter totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub layers: BTreeMap<String, usize>,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl Census {
    pub fn count(&self, kind: &str) -> usize {
        self.layers.get(kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }
}

/// `(height, width, channels)` of every node for a given input size.
pub type NodeShapes = Vec<(usize, usize, usize)>;

impl NetSpec {
    pub fn output_channels(&self) -> usize {
        self.categories + 1
    }

    fn edge_error(&self, node: NodeId, msg: impl std::fmt::Display) -> Error {
        Error::Spec(format!("node {node} '{}': {msg}", self.nodes[node].name))
    }

    /// Checks graph structure and infers node shapes for an input size.
    pub fn infer_shapes(&self, height: usize, width: usize) -> Result<NodeShapes> {
        if self.categories == 0 {
            return Err(Error::Spec("at least one category is required".into()));
        }
        let mut shapes: NodeShapes = Vec::with_capacity(self.nodes.len());
        let mut inputs = 0;
        let mut softmaxes = 0;
        for (id, node) in self.nodes.iter().enumerate() {
            if node.inputs.len() != node.kind.arity() {
                return Err(self.edge_error(
                    id,
                    format!("expects {} inputs, got {}", node.kind.arity(), node.inputs.len()),
                ));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= id) {
                return Err(self.edge_error(id, format!("input {bad} is not an earlier node")));
            }
            let src = |k: usize| shapes[node.inputs[k]];
            let name = |k: usize| &self.nodes[node.inputs[k]].name;
            let shape = match node.kind {
                NodeKind::Input => {
                    inputs += 1;
                    (height, width, 1)
                }
                NodeKind::ZeroPad { pad } => {
                    let (h, w, c) = src(0);
                    (h + 2 * pad, w + 2 * pad, c)
                }
                NodeKind::Conv {
                    kernel,
                    out_channels,
                    stride,
                    pad,
                } => {
                    if !matches!(kernel, 3 | 7) {
                        return Err(self.edge_error(id, format!("kernel size {kernel} not in {{3, 7}}")));
                    }
                    if out_channels == 0 || stride == 0 {
                        return Err(self.edge_error(id, "zero channels or stride"));
                    }
                    let (h, w, _) = src(0);
                    let (oh, ow) = conv_output_dims(h, w, kernel, stride, pad)
                        .ok_or_else(|| self.edge_error(id, format!("input {h}x{w} smaller than kernel")))?;
                    (oh, ow, out_channels)
                }
                NodeKind::BatchNorm | NodeKind::Relu | NodeKind::Softmax => src(0),
                NodeKind::MaxPool | NodeKind::AvgPool => {
                    let (h, w, c) = src(0);
                    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                        return Err(self.edge_error(
                            id,
                            format!("cannot pool {h}x{w} from '{}' by 2", name(0)),
                        ));
                    }
                    (h / 2, w / 2, c)
                }
                NodeKind::Add => {
                    let (a, b) = (src(0), src(1));
                    if a != b {
                        return Err(self.edge_error(
                            id,
                            format!(
                                "edge '{}' {:?} -> '{}' {:?} shape mismatch",
                                name(0),
                                a,
                                name(1),
                                b
                            ),
                        ));
                    }
                    a
                }
                NodeKind::Multiply => {
                    let (a, b) = (src(0), src(1));
                    let compatible = (a.0, a.1) == (b.0, b.1)
                        && (a.2 == b.2 || a.2 == 1 || b.2 == 1);
                    if !compatible {
                        return Err(self.edge_error(
                            id,
                            format!(
                                "edge '{}' {:?} x '{}' {:?} shape mismatch",
                                name(0),
                                a,
                                name(1),
                                b
                            ),
                        ));
                    }
                    (a.0, a.1, a.2.max(b.2))
                }
                NodeKind::Resize => {
                    let (s, t) = (src(0), src(1));
                    if resize_plan((s.0, s.1), (t.0, t.1)).is_none() {
                        return Err(self.edge_error(
                            id,
                            format!("cannot resize {}x{} to {}x{}", s.0, s.1, t.0, t.1),
                        ));
                    }
                    (t.0, t.1, s.2)
                }
                NodeKind::Reshape { height: rh, width: rw } => {
                    let (h, w, c) = src(0);
                    if rh * rw != h * w {
                        return Err(self.edge_error(id, format!("cannot reshape {h}x{w} to {rh}x{rw}")));
                    }
                    (rh, rw, c)
                }
            };
            if matches!(node.kind, NodeKind::Softmax) {
                softmaxes += 1;
            }
            shapes.push(shape);
        }
        if inputs != 1 {
            return Err(Error::Spec(format!("expected exactly one input node, found {inputs}")));
        }
        if softmaxes != 1 || !matches!(self.nodes.last().map(|n| n.kind), Some(NodeKind::Softmax)) {
            return Err(Error::Spec("the graph must end in its only softmax node".into()));
        }
        let out = *shapes.last().expect("non-empty graph");
        if out.2 != self.output_channels() {
            return Err(Error::Spec(format!(
                "output has {} channels, expected {} (categories + background)",
                out.2,
                self.output_channels()
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<NodeShapes> {
        self.infer_shapes(self.input_height, self.input_width)
    }

    /// Layer counts and parameter totals implied by the graph.
    pub fn census(&self) -> Result<Census> {
        let shapes = self.validate()?;
        let mut layers = BTreeMap::new();
        let (mut trainable, mut non_trainable) = (0, 0);
        for (id, node) in self.nodes.iter().enumerate() {
            *layers.entry(node.kind.census_name().to_string()).or_insert(0) += 1;
            match node.kind {
                NodeKind::Conv {
                    kernel,
                    out_channels,
                    ..
                } => {
                    let cin = shapes[node.inputs[0]].2;
                    trainable += kernel * kernel * cin * out_channels + out_channels;
                }
                NodeKind::BatchNorm => {
                    let c = shapes[id].2;
                    trainable += 2 * c;
                    non_trainable += 2 * c;
                }
                _ => {}
            }
        }
        Ok(Census {
            layers,
            trainable,
            non_trainable,
        })
    }
}

/// Appends nodes while tracking channel counts.
#[derive(Debug, Default)]
pub struct NetBuilder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
}

impl NetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: impl Into<String>, kind: NodeKind, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs,
        });
        self.channels.push(channels);
        self.nodes.len() - 1
    }

    fn auto_name(&self, prefix: &str) -> String {
        format!("{prefix}_{}", self.nodes.len())
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.channels[id]
    }

    pub fn input(&mut self) -> NodeId {
        self.push("input", NodeKind::Input, vec![], 1)
    }

    pub fn zero_pad(&mut self, x: NodeId, pad: usize) -> NodeId {
        let name = self.auto_name("zero_pad");
        let c = self.channels[x];
        self.push(name, NodeKind::ZeroPad { pad }, vec![x], c)
    }

    pub fn conv(&mut self, x: NodeId, kernel: usize, out_channels: usize, stride: usize, pad: usize) -> NodeId {
        let name = self.auto_name("conv");
        self.push(
            name,
            NodeKind::Conv {
                kernel,
                out_channels,
                stride,
                pad,
            },
            vec![x],
            out_channels,
        )
    }

    /// `kernel x kernel` convolution with same-size zero padding.
    pub fn conv_same(&mut self, x: NodeId, kernel: usize, out_channels: usize) -> NodeId {
        self.conv(x, kernel, out_channels, 1, kernel / 2)
    }

    pub fn batch_norm(&mut self, x: NodeId) -> NodeId {
        let name = self.auto_name("bn");
        let c = self.channels[x];
        self.push(name, NodeKind::BatchNorm, vec![x], c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let name = self.auto_name("relu");
        let c = self.channels[x];
        self.push(name, NodeKind::Relu, vec![x], c)
    }

    pub fn max_pool(&mut self, x: NodeId) -> NodeId {
        let name = self.auto_name("max_pool");
        let c = self.channels[x];
        self.push(name, NodeKind::MaxPool, vec![x], c)
    }

    pub fn avg_pool(&mut self, x: NodeId) -> NodeId {
        let name = self.auto_name("avg_pool");
        let c = self.channels[x];
        self.push(name, NodeKind::AvgPool, vec![x], c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let name = self.auto_name("add");
        let c = self.channels[a];
        self.push(name, NodeKind::Add, vec![a, b], c)
    }

    pub fn multiply(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let name = self.auto_name("multiply");
        let c = self.channels[a].max(self.channels[b]);
        self.push(name, NodeKind::Multiply, vec![a, b], c)
    }

    pub fn resize(&mut self, source: NodeId, like: NodeId) -> NodeId {
        let name = self.auto_name("lambda_resize");
        let c = self.channels[source];
        self.push(name, NodeKind::Resize, vec![source, like], c)
    }

    pub fn reshape(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        let name = self.auto_name("reshape");
        let c = self.channels[x];
        self.push(name, NodeKind::Reshape { height, width }, vec![x], c)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let c = self.channels[x];
        self.push("softmax", NodeKind::Softmax, vec![x], c)
    }

    pub fn conv_bn_relu(&mut self, x: NodeId, kernel: usize, out_channels: usize) -> NodeId {
        let c = self.conv_same(x, kernel, out_channels);
        let b = self.batch_norm(c);
        self.relu(b)
    }

    /// Shape-preserving block: the tensor map, rescaled to the resolution
    /// of `x`, gates `x` before a conv-BN-ReLU stage.
    pub fn shape_preserving_block(&mut self, x: NodeId, tensor_map: NodeId, out_channels: usize) -> NodeId {
        let scaled = self.resize(tensor_map, x);
        let gated = self.multiply(x, scaled);
        self.conv_bn_relu(gated, 3, out_channels)
    }

    /// Identity block: conv-BN-ReLU-conv-BN, plus the block input, then ReLU.
    pub fn identity_block(&mut self, x: NodeId) -> NodeId {
        let c = self.channels[x];
        let a = self.conv_bn_relu(x, 3, c);
        let b = self.conv_same(a, 3, c);
        let b = self.batch_norm(b);
        let s = self.add(b, x);
        self.relu(s)
    }

    pub fn finish(self, name: impl Into<String>, categories: usize, input_height: usize, input_width: usize) -> Result<NetSpec> {
        let spec = NetSpec {
            name: name.into(),
            categories,
            input_height,
            input_width,
            nodes: self.nodes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Channel widths of the desk-scale reference network, shallow to deep.
pub const DESK_WIDTHS: [usize; 3] = [8, 16, 32];

/// Layer counts the desk-scale reference network is declared to have.
pub fn desk_reference_census() -> BTreeMap<String, usize> {
    [
        ("input", 1),
        ("zero_padding", 1),
        ("convolution", 16),
        ("batch_normalization", 15),
        ("activation", 15),
        ("pooling", 3),
        ("multiply", 2),
        ("addition", 6),
        ("lambda", 5),
        ("softmax", 1),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Asymmetric encoder-decoder at desk scale (three pooling stages).
///
/// ```text
/// input -> pad3 -> conv7 -> BN -> ReLU ------------------------------- e0 (1/1)
///        SPB(e0)                                               ---- s0 (1/1)
///        maxpool -> conv3-BN-ReLU -> IB -> SPB                 ---- s1 (1/2)
///        maxpool -> conv3-BN-ReLU -> IB                        ---- e2 (1/4)
///        avgpool -> conv3-BN-ReLU -> IB                        ---- e3 (1/8)
/// decoder: up -> conv3-BN-ReLU -> + skip, three times, then conv3 -> softmax
/// ```
pub fn desk_reference(categories: usize, input_height: usize, input_width: usize, widths: [usize; 3]) -> Result<NetSpec> {
    let [w0, w1, w2] = widths;
    let mut b = NetBuilder::new();
    let x = b.input();

    let p = b.zero_pad(x, 3);
    let c = b.conv(p, 7, w0, 1, 0);
    let c = b.batch_norm(c);
    let e0 = b.relu(c);
    let s0 = b.shape_preserving_block(e0, x, w0);

    let p1 = b.max_pool(s0);
    let a1 = b.conv_bn_relu(p1, 3, w1);
    let i1 = b.identity_block(a1);
    let s1 = b.shape_preserving_block(i1, x, w1);

    let p2 = b.max_pool(s1);
    let a2 = b.conv_bn_relu(p2, 3, w2);
    let e2 = b.identity_block(a2);

    let p3 = b.avg_pool(e2);
    let a3 = b.conv_bn_relu(p3, 3, w2);
    let e3 = b.identity_block(a3);

    let u2 = b.resize(e3, e2);
    let d2 = b.conv_bn_relu(u2, 3, w2);
    let d2 = b.add(d2, e2);

    let u1 = b.resize(d2, s1);
    let d1 = b.conv_bn_relu(u1, 3, w1);
    let d1 = b.add(d1, s1);

    let u0 = b.resize(d1, s0);
    let d0 = b.conv_bn_relu(u0, 3, w0);
    let d0 = b.add(d0, s0);

    let logits = b.conv_same(d0, 3, categories + 1);
    b.softmax(logits);
    b.finish("desk-reference", categories, input_height, input_width)
}
