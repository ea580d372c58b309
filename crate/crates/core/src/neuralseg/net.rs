//! Parameters, graph execution and backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, BatchNormCache, ConvGeometry, ResizePlan, BN_MOMENTUM};
use super::spec::{Census, NetSpec, NodeId, NodeKind, NodeShapes};
use super::tensor::{FeatureTensor, Real};
use crate::{Error, Result};

/// Parameters owned by one node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    None,
    Conv {
        weight: Vec<T>,
        bias: Vec<T>,
    },
    BatchNorm {
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
}

/// Weights for every node of a [`NetSpec`], index-aligned with its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T = f32> {
    pub layers: Vec<LayerParams<T>>,
    pub seed: u64,
}

impl<T: Real> NetParams<T> {
    /// Trainable tensors in canonical order (conv weight, conv bias,
    /// BN scale, BN shift; node order).
    pub fn trainable(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
            }
        }
        out
    }

    /// Every stored tensor, running statistics included, in file order.
    pub fn all_tensors(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.extend([gamma, beta, running_mean, running_var]);
                }
            }
        }
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.extend([gamma, beta, running_mean, running_var]);
                }
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64().unwrap_or(0.0))).collect();
        NetParams {
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::None => LayerParams::None,
                    LayerParams::Conv { weight, bias } => LayerParams::Conv {
                        weight: conv(weight),
                        bias: conv(bias),
                    },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } => LayerParams::BatchNorm {
                        gamma: conv(gamma),
                        beta: conv(beta),
                        running_mean: conv(running_mean),
                        running_var: conv(running_var),
                    },
                })
                .collect(),
        }
    }

    /// Checks tensor sizes against a spec.
    pub fn check_against(&self, spec: &NetSpec) -> Result<()> {
        let shapes = spec.validate()?;
        if self.layers.len() != spec.nodes.len() {
            return Err(Error::Spec(format!(
                "parameters cover {} nodes, spec has {}",
                self.layers.len(),
                spec.nodes.len()
            )));
        }
        for (id, (node, layer)) in spec.nodes.iter().zip(&self.layers).enumerate() {
            let ok = match (&node.kind, layer) {
                (NodeKind::Conv { .. }, LayerParams::Conv { weight, bias }) => {
                    let g = geometry(spec, &shapes, id);
                    weight.len() == g.weight_len() && bias.len() == g.out_channels
                }
                (NodeKind::BatchNorm, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    let c = shapes[id].2;
                    [gamma, beta, running_mean, running_var].iter().all(|v| v.len() == c)
                        && running_var.iter().all(|&v| v > T::zero())
                }
                (NodeKind::Conv { .. }, _) | (NodeKind::BatchNorm, _) => false,
                (_, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Spec(format!(
                    "parameters of node {id} '{}' do not fit the spec",
                    node.name
                )));
            }
        }
        Ok(())
    }
}

fn geometry(spec: &NetSpec, shapes: &NodeShapes, id: NodeId) -> ConvGeometry {
    match spec.nodes[id].kind {
        NodeKind::Conv {
            kernel,
            out_channels,
            stride,
            pad,
        } => ConvGeometry {
            kernel,
            stride,
            pad,
            in_channels: shapes[spec.nodes[id].inputs[0]].2,
            out_channels,
        },
        _ => unreachable!("geometry of a non-conv node"),
    }
}

/// Initializes parameters: He-uniform conv weights, zero biases, unit BN
/// scale, zero shift, zero running mean and unit running variance.
pub fn build_net<T: Real>(spec: &NetSpec, seed: u64) -> Result<(NetParams<T>, Census)> {
    let census = spec.census()?;
    let shapes = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .nodes
        .iter()
        .enumerate()
        .map(|(id, node)| match node.kind {
            NodeKind::Conv { .. } => {
                let g = geometry(spec, &shapes, id);
                let fan_in = (g.kernel * g.kernel * g.in_channels) as f64;
                let limit = (6.0 / fan_in).sqrt();
                let weight = (0..g.weight_len())
                    .map(|_| T::of(rng.gen_range(-limit..limit)))
                    .collect();
                LayerParams::Conv {
                    weight,
                    bias: vec![T::zero(); g.out_channels],
                }
            }
            NodeKind::BatchNorm => {
                let c = shapes[id].2;
                LayerParams::BatchNorm {
                    gamma: vec![T::one(); c],
                    beta: vec![T::zero(); c],
                    running_mean: vec![T::zero(); c],
                    running_var: vec![T::one(); c],
                }
            }
            _ => LayerParams::None,
        })
        .collect();
    Ok((NetParams { layers, seed }, census))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; everything needed for backpropagation is kept.
    Train,
    /// Running statistics; intermediate activations are released early.
    Inference,
}

/// Activations and caches of one forward execution.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub mode: Mode,
    activations: Vec<Option<FeatureTensor<T>>>,
    bn_caches: Vec<Option<BatchNormCache<T>>>,
    pool_args: Vec<Option<Vec<u32>>>,
    plans: Vec<Option<ResizePlan>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn activation(&self, id: NodeId) -> Option<&FeatureTensor<T>> {
        self.activations[id].as_ref()
    }

    pub fn output(&self) -> &FeatureTensor<T> {
        self.activations
            .last()
            .and_then(Option::as_ref)
            .expect("forward pass produced an output")
    }

    pub fn into_output(mut self) -> FeatureTensor<T> {
        self.activations
            .pop()
            .flatten()
            .expect("forward pass produced an output")
    }
}

fn check_input<T: Real>(spec: &NetSpec, input: &FeatureTensor<T>) -> Result<NodeShapes> {
    if input.channels != 1 {
        return Err(Error::contract(format!(
            "network input must have one channel, got {}",
            input.channels
        )));
    }
    if input.batch == 0 {
        return Err(Error::contract("empty input batch"));
    }
    spec.infer_shapes(input.height, input.width)
        .map_err(|e| Error::contract(format!("input {}x{} incompatible with spec: {e}", input.height, input.width)))
}

/// Executes the graph on a batch of tensor maps.
pub fn forward_pass<T: Real>(
    spec: &NetSpec,
    params: &NetParams<T>,
    input: &FeatureTensor<T>,
    mode: Mode,
) -> Result<ForwardPass<T>> {
    let shapes = check_input(spec, input)?;
    let n = spec.nodes.len();
    let mut last_use = vec![0usize; n];
    for (id, node) in spec.nodes.iter().enumerate() {
        for &i in &node.inputs {
            last_use[i] = id;
        }
    }
    let mut pass = ForwardPass {
        mode,
        activations: vec![None; n],
        bn_caches: vec![None; n],
        pool_args: vec![None; n],
        plans: vec![None; n],
    };
    for (id, node) in spec.nodes.iter().enumerate() {
        let arg = |k: usize| {
            pass.activations[node.inputs[k]]
                .as_ref()
                .expect("inputs are computed before use")
        };
        let out = match node.kind {
            NodeKind::Input => input.clone(),
            NodeKind::ZeroPad { pad } => layers::zero_pad_forward(arg(0), pad),
            NodeKind::Conv { .. } => {
                let LayerParams::Conv { weight, bias } = &params.layers[id] else {
                    return Err(Error::Spec(format!("node {id} lacks conv parameters")));
                };
                layers::conv_forward(arg(0), weight, bias, &geometry(spec, &shapes, id))
            }
            NodeKind::BatchNorm => {
                let LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } = &params.layers[id]
                else {
                    return Err(Error::Spec(format!("node {id} lacks batch-norm parameters")));
                };
                match mode {
                    Mode::Train => {
                        let (y, cache) = layers::batch_norm_train(arg(0), gamma, beta);
                        pass.bn_caches[id] = Some(cache);
                        y
                    }
                    Mode::Inference => {
                        layers::batch_norm_infer(arg(0), gamma, beta, running_mean, running_var)
                    }
                }
            }
            NodeKind::Relu => layers::relu_forward(arg(0)),
            NodeKind::MaxPool => {
                let (y, a) = layers::max_pool_forward(arg(0));
                if mode == Mode::Train {
                    pass.pool_args[id] = Some(a);
                }
                y
            }
            NodeKind::AvgPool => layers::downsample_mean(arg(0), 2, 2),
            NodeKind::Add => layers::add_forward(arg(0), arg(1)),
            NodeKind::Multiply => layers::multiply_forward(arg(0), arg(1)),
            NodeKind::Resize => {
                let (s, t) = (shapes[node.inputs[0]], shapes[node.inputs[1]]);
                let plan = layers::resize_plan((s.0, s.1), (t.0, t.1))
                    .expect("validated by shape inference");
                pass.plans[id] = Some(plan);
                layers::resize_forward(arg(0), plan)
            }
            NodeKind::Reshape { height, width } => {
                let x = arg(0);
                FeatureTensor::from_vec((x.batch, height, width, x.channels), x.data.clone())
            }
            NodeKind::Softmax => layers::softmax_forward(arg(0)),
        };
        pass.activations[id] = Some(out);
        if mode == Mode::Inference {
            for &i in &node.inputs {
                if last_use[i] == id {
                    pass.activations[i] = None;
                }
            }
        }
    }
    Ok(pass)
}

/// Inference-mode forward; returns per-pixel class probabilities.
pub fn forward<T: Real>(spec: &NetSpec, params: &NetParams<T>, input: &FeatureTensor<T>) -> Result<FeatureTensor<T>> {
    Ok(forward_pass(spec, params, input, Mode::Inference)?.into_output())
}

/// Folds the batch statistics of a training pass into the running ones.
pub fn update_running_stats<T: Real>(params: &mut NetParams<T>, pass: &ForwardPass<T>) {
    let m = T::of(BN_MOMENTUM);
    for (layer, cache) in params.layers.iter_mut().zip(&pass.bn_caches) {
        if let (
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            Some(cache),
        ) = (layer, cache)
        {
            for (r, &b) in running_mean.iter_mut().zip(&cache.mean) {
                *r = m * *r + (T::one() - m) * b;
            }
            for (r, &b) in running_var.iter_mut().zip(&cache.var) {
                *r = m * *r + (T::one() - m) * b;
            }
        }
    }
}

/// Gradients of the trainable parameters plus the network input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Same layout as [`NetParams::trainable`].
    pub params: Vec<Vec<T>>,
    pub input: Option<FeatureTensor<T>>,
}

/// Node whose output feeds the final softmax.
pub fn logits_node(spec: &NetSpec) -> NodeId {
    spec.nodes.last().expect("non-empty graph").inputs[0]
}

/// Backpropagates `seed` (the gradient at `seed_node`'s output) through a
/// training-mode pass.
pub fn backward<T: Real>(
    spec: &NetSpec,
    params: &NetParams<T>,
    pass: &ForwardPass<T>,
    seed_node: NodeId,
    seed: FeatureTensor<T>,
) -> Result<Gradients<T>> {
    if pass.mode != Mode::Train {
        return Err(Error::contract("backward needs a training-mode forward pass"));
    }
    let input_id = spec
        .nodes
        .iter()
        .position(|n| n.kind == NodeKind::Input)
        .ok_or_else(|| Error::Spec("graph has no input node".into()))?;
    let x = pass.activations[input_id].as_ref().expect("training pass keeps the input");
    let shapes = spec.infer_shapes(x.height, x.width)?;
    let n = spec.nodes.len();
    let mut grads: Vec<Option<FeatureTensor<T>>> = vec![None; n];
    let mut pgrads: Vec<LayerParams<T>> = vec![LayerParams::None; n];
    grads[seed_node] = Some(seed);

    fn accumulate<T: Real>(slot: &mut Option<FeatureTensor<T>>, g: FeatureTensor<T>) {
        match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    let act = |i: NodeId| pass.activations[i].as_ref().expect("training pass keeps activations");
    for id in (0..=seed_node).rev() {
        let Some(dy) = grads[id].take() else { continue };
        let node = &spec.nodes[id];
        match node.kind {
            NodeKind::Input => {
                grads[id] = Some(dy);
                continue;
            }
            NodeKind::ZeroPad { pad } => {
                accumulate(&mut grads[node.inputs[0]], layers::zero_pad_backward(&dy, pad));
            }
            NodeKind::Conv { .. } => {
                let LayerParams::Conv { weight, .. } = &params.layers[id] else {
                    unreachable!("checked during forward")
                };
                let (dx, dw, db) =
                    layers::conv_backward(act(node.inputs[0]), weight, &dy, &geometry(spec, &shapes, id));
                pgrads[id] = LayerParams::Conv { weight: dw, bias: db };
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            NodeKind::BatchNorm => {
                let LayerParams::BatchNorm { gamma, .. } = &params.layers[id] else {
                    unreachable!("checked during forward")
                };
                let cache = pass.bn_caches[id].as_ref().expect("training pass caches BN");
                let (dx, dg, db) = layers::batch_norm_backward(&dy, cache, gamma);
                pgrads[id] = LayerParams::BatchNorm {
                    gamma: dg,
                    beta: db,
                    running_mean: vec![],
                    running_var: vec![],
                };
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            NodeKind::Relu => {
                accumulate(&mut grads[node.inputs[0]], layers::relu_backward(act(node.inputs[0]), &dy));
            }
            NodeKind::MaxPool => {
                let arg = pass.pool_args[id].as_ref().expect("training pass keeps argmax");
                let dx = layers::max_pool_backward(act(node.inputs[0]).shape(), &dy, arg);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            NodeKind::AvgPool => {
                let dx = layers::downsample_mean_backward(act(node.inputs[0]).shape(), &dy, 2, 2);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            NodeKind::Add => {
                accumulate(&mut grads[node.inputs[1]], dy.clone());
                accumulate(&mut grads[node.inputs[0]], dy);
            }
            NodeKind::Multiply => {
                let (da, db) = layers::multiply_backward(act(node.inputs[0]), act(node.inputs[1]), &dy);
                accumulate(&mut grads[node.inputs[0]], da);
                accumulate(&mut grads[node.inputs[1]], db);
            }
            NodeKind::Resize => {
                let plan = pass.plans[id].expect("resize plan recorded");
                let dx = layers::resize_backward(act(node.inputs[0]).shape(), &dy, plan);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            NodeKind::Reshape { .. } => {
                let x = act(node.inputs[0]);
                accumulate(&mut grads[node.inputs[0]], FeatureTensor::from_vec(x.shape(), dy.data));
            }
            NodeKind::Softmax => {
                accumulate(&mut grads[node.inputs[0]], layers::softmax_backward(act(id), &dy));
            }
        }
    }

    // Trainable gradient layout mirrors NetParams::trainable.
    let mut flat = Vec::new();
    for (layer, pg) in params.layers.iter().zip(pgrads) {
        match (layer, pg) {
            (LayerParams::Conv { .. }, LayerParams::Conv { weight: dw, bias: db }) => {
                flat.push(dw);
                flat.push(db);
            }
            (LayerParams::Conv { weight, bias }, _) => {
                flat.push(vec![T::zero(); weight.len()]);
                flat.push(vec![T::zero(); bias.len()]);
            }
            (LayerParams::BatchNorm { .. }, LayerParams::BatchNorm { gamma: dg, beta: db, .. }) => {
                flat.push(dg);
                flat.push(db);
            }
            (LayerParams::BatchNorm { gamma, beta, .. }, _) => {
                flat.push(vec![T::zero(); gamma.len()]);
                flat.push(vec![T::zero(); beta.len()]);
            }
            (LayerParams::None, _) => {}
        }
    }
    Ok(Gradients {
        params: flat,
        input: grads[input_id].take(),
    })
}
