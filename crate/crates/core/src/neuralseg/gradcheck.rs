//! Finite-difference verification of every backward kernel, the focal loss
//! and a complete small network, in double precision.

use std::cell::Cell;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, ConvGeometry, ResizePlan};
use super::loss::focal_loss;
use super::net::{backward, build_net, forward_pass, logits_node, ForwardPass, Mode, NetParams};
use super::spec::{desk_reference, NetSpec, NodeKind};
use super::tensor::{FeatureTensor, Shape};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance bound on the relative error in double precision.
pub const TOLERANCE: f64 = 1e-5;

/// Deliberate corruption of an analytic gradient, used to prove the
/// harness can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Perturbation {
    #[default]
    None,
    /// Scales the convolution input gradient by 1.01.
    ConvBackward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, worst
    /// over the checked gradient tensors.
    pub rel_error: f64,
    pub passed: bool,
}

/// Below this norm a gradient counts as vanishing (for example a conv bias
/// feeding straight into batch norm) and the error is taken absolutely.
pub const VANISHING: f64 = 1e-7;

/// `||a - n|| / max(||a||, ||n||)`, or `||a - n||` when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < VANISHING {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Five-point central differences, exact for polynomials up to degree
/// four.
pub fn numeric_gradient_five_point(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |d: f64| {
                probe[i] = orig + d;
                f(&probe)
            };
            let near = at(step) - at(-step);
            let far = at(2.0 * step) - at(-2.0 * step);
            probe[i] = orig;
            (8.0 * near - far) / (12.0 * step)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureTensor<f64> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    FeatureTensor::from_vec(shape, uniform(rng, n))
}

/// Values bounded away from zero, so ReLU kinks are out of reach of the
/// difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureTensor<f64> {
    let mut t = tensor(rng, shape);
    for v in &mut t.data {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// Distinct values spaced well above the difference step, so pooling
/// winners never swap.
fn distinct(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureTensor<f64> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    v.shuffle(rng);
    FeatureTensor::from_vec(shape, v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_data(t: &FeatureTensor<f64>, data: &[f64]) -> FeatureTensor<f64> {
    FeatureTensor::from_vec(t.shape(), data.to_vec())
}

fn verdict(name: impl Into<String>, errors: &[f64]) -> GradCheck {
    let rel_error = errors.iter().copied().fold(0.0, f64::max);
    GradCheck {
        name: name.into(),
        rel_error,
        passed: rel_error.is_finite() && rel_error < TOLERANCE,
    }
}

fn check_conv(rng: &mut ChaCha8Rng, name: &str, shape: Shape, g: ConvGeometry, perturb: Perturbation) -> GradCheck {
    let x = tensor(rng, shape);
    let w = uniform(rng, g.weight_len());
    let b = uniform(rng, g.out_channels);
    let y = layers::conv_forward(&x, &w, &b, &g);
    let r = tensor(rng, y.shape());
    let (mut dx, dw, db) = layers::conv_backward(&x, &w, &r, &g);
    if perturb == Perturbation::ConvBackward {
        dx.data.iter_mut().for_each(|v| *v *= 1.01);
    }
    let nx = numeric_gradient(&x.data, |d| dot(&layers::conv_forward(&with_data(&x, d), &w, &b, &g).data, &r.data));
    let nw = numeric_gradient(&w, |d| dot(&layers::conv_forward(&x, d, &b, &g).data, &r.data));
    let nb = numeric_gradient(&b, |d| dot(&layers::conv_forward(&x, &w, d, &g).data, &r.data));
    verdict(
        name,
        &[relative_error(&dx.data, &nx), relative_error(&dw, &nw), relative_error(&db, &nb)],
    )
}

fn check_batch_norm(rng: &mut ChaCha8Rng) -> GradCheck {
    let x = tensor(rng, (2, 4, 5, 3));
    let gamma: Vec<f64> = uniform(rng, 3).iter().map(|v| 1.0 + 0.5 * v).collect();
    let beta = uniform(rng, 3);
    let (y, cache) = layers::batch_norm_train(&x, &gamma, &beta);
    let r = tensor(rng, y.shape());
    let (dx, dg, db) = layers::batch_norm_backward(&r, &cache, &gamma);
    let f = |x: &FeatureTensor<f64>, g: &[f64], b: &[f64]| dot(&layers::batch_norm_train(x, g, b).0.data, &r.data);
    let nx = numeric_gradient(&x.data, |d| f(&with_data(&x, d), &gamma, &beta));
    let ng = numeric_gradient(&gamma, |d| f(&x, d, &beta));
    let nb = numeric_gradient(&beta, |d| f(&x, &gamma, d));
    verdict(
        "batch_norm",
        &[relative_error(&dx.data, &nx), relative_error(&dg, &ng), relative_error(&db, &nb)],
    )
}

/// Checks a single-input, parameter-free layer.
fn check_unary(
    name: &str,
    x: FeatureTensor<f64>,
    rng: &mut ChaCha8Rng,
    fwd: impl Fn(&FeatureTensor<f64>) -> FeatureTensor<f64>,
    bwd: impl Fn(&FeatureTensor<f64>, &FeatureTensor<f64>) -> FeatureTensor<f64>,
) -> GradCheck {
    let y = fwd(&x);
    let r = tensor(rng, y.shape());
    let dx = bwd(&x, &r);
    let nx = numeric_gradient(&x.data, |d| dot(&fwd(&with_data(&x, d)).data, &r.data));
    verdict(name, &[relative_error(&dx.data, &nx)])
}

fn check_binary(name: &str, rng: &mut ChaCha8Rng, a_shape: Shape, b_shape: Shape) -> GradCheck {
    let a = tensor(rng, a_shape);
    let b = tensor(rng, b_shape);
    let multiply = name.starts_with("multiply");
    let fwd = |a: &FeatureTensor<f64>, b: &FeatureTensor<f64>| {
        if multiply {
            layers::multiply_forward(a, b)
        } else {
            layers::add_forward(a, b)
        }
    };
    let y = fwd(&a, &b);
    let r = tensor(rng, y.shape());
    let (da, db) = if multiply {
        layers::multiply_backward(&a, &b, &r)
    } else {
        (r.clone(), r.clone())
    };
    let na = numeric_gradient(&a.data, |d| dot(&fwd(&with_data(&a, d), &b).data, &r.data));
    let nb = numeric_gradient(&b.data, |d| dot(&fwd(&a, &with_data(&b, d)).data, &r.data));
    verdict(name, &[relative_error(&da.data, &na), relative_error(&db.data, &nb)])
}

fn check_focal(rng: &mut ChaCha8Rng, gamma: f64) -> GradCheck {
    let z = tensor(rng, (2, 3, 4, 3));
    let t: Vec<usize> = (0..z.batch * z.pixels()).map(|_| rng.gen_range(0..3)).collect();
    let loss = |z: &FeatureTensor<f64>| focal_loss(&layers::softmax_forward(z), &t, 0.25, gamma, 2).expect("valid targets");
    let analytic = loss(&z).grad_logits;
    let nz = numeric_gradient(&z.data, |d| loss(&with_data(&z, d)).value);
    verdict(format!("focal_loss(gamma={gamma})"), &[relative_error(&analytic.data, &nz)])
}

/// ReLU input signs and max-pool winners: the piecewise-linear region a
/// forward pass falls in.
fn switch_pattern(spec: &NetSpec, pass: &ForwardPass<f64>) -> Vec<u32> {
    let mut out = Vec::new();
    for node in &spec.nodes {
        let Some(x) = node.inputs.first().and_then(|&i| pass.activation(i)) else {
            continue;
        };
        match node.kind {
            NodeKind::Relu => out.extend(x.data.iter().map(|&v| u32::from(v > 0.0))),
            NodeKind::MaxPool => out.extend(layers::max_pool_forward(x).1),
            _ => {}
        }
    }
    out
}

/// Difference step for the whole-network check. Batch statistics over the
/// few deepest positions curve the loss sharply, so a higher-order stencil
/// is used there.
const NETWORK_STEP: f64 = 1e-4;

/// Draws rejected because a difference probe crossed a ReLU or max-pool
/// switch, before the check gives up.
const MAX_REDRAWS: usize = 20;

/// Whole-graph check on a narrow reference network with focal loss on top.
/// A draw whose finite-difference probes change the switch pattern is
/// discarded, since the numeric slope then straddles a kink.
fn check_network(rng: &mut ChaCha8Rng) -> GradCheck {
    let spec = desk_reference(2, 8, 8, [2, 3, 3]).expect("valid spec");
    let t: Vec<usize> = (0..2 * 64).map(|_| rng.gen_range(0..3)).collect();
    let mut errors = Vec::new();
    for _ in 0..MAX_REDRAWS {
        let (params, _) = build_net::<f64>(&spec, rng.gen()).expect("valid spec");
        let x = distinct(rng, (2, 8, 8, 1));
        let pass = forward_pass(&spec, &params, &x, Mode::Train).expect("shapes checked");
        let pattern = switch_pattern(&spec, &pass);
        let crossed = Cell::new(false);
        let loss = |p: &NetParams<f64>, x: &FeatureTensor<f64>| {
            let pass = forward_pass(&spec, p, x, Mode::Train).expect("shapes checked");
            if switch_pattern(&spec, &pass) != pattern {
                crossed.set(true);
            }
            focal_loss(pass.output(), &t, 0.25, 2.0, 2).expect("valid targets").value
        };
        let l = focal_loss(pass.output(), &t, 0.25, 2.0, 2).expect("valid targets");
        let grads = backward(&spec, &params, &pass, logits_node(&spec), l.grad_logits).expect("training pass");

        errors.clear();
        let n_tensors = params.trainable().len();
        for k in 0..n_tensors {
            let base = params.trainable()[k].clone();
            let numeric = numeric_gradient_five_point(&base, NETWORK_STEP, |d| {
                let mut p = params.clone();
                p.trainable_mut()[k].copy_from_slice(d);
                loss(&p, &x)
            });
            errors.push(relative_error(&grads.params[k], &numeric));
        }
        let dx = grads.input.expect("input gradient");
        let nx = numeric_gradient_five_point(&x.data, NETWORK_STEP, |d| loss(&params, &with_data(&x, d)));
        errors.push(relative_error(&dx.data, &nx));
        if !crossed.get() {
            break;
        }
    }
    verdict("network(end-to-end)", &errors)
}

/// Runs every check with a fixed seed.
pub fn check_all(seed: u64, perturb: Perturbation) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |kernel, stride, pad, cin, cout| ConvGeometry {
        kernel,
        stride,
        pad,
        in_channels: cin,
        out_channels: cout,
    };
    let mut out = vec![
        check_conv(&mut rng, "conv3x3", (2, 6, 7, 3), conv(3, 1, 1, 3, 4), perturb),
        check_conv(&mut rng, "conv7x7", (2, 8, 8, 2), conv(7, 1, 3, 2, 3), perturb),
        check_conv(&mut rng, "conv3x3(stride 2)", (2, 8, 8, 2), conv(3, 2, 1, 2, 3), perturb),
        check_batch_norm(&mut rng),
    ];
    let x = away_from_zero(&mut rng, (2, 4, 6, 3));
    out.push(check_unary("relu", x, &mut rng, layers::relu_forward, layers::relu_backward));
    let x = distinct(&mut rng, (2, 4, 6, 3));
    out.push(check_unary(
        "max_pool",
        x,
        &mut rng,
        |x| layers::max_pool_forward(x).0,
        |x, dy| {
            let (_, arg) = layers::max_pool_forward(x);
            layers::max_pool_backward(x.shape(), dy, &arg)
        },
    ));
    let x = tensor(&mut rng, (2, 4, 6, 3));
    out.push(check_unary(
        "avg_pool",
        x,
        &mut rng,
        |x| layers::downsample_mean(x, 2, 2),
        |x, dy| layers::downsample_mean_backward(x.shape(), dy, 2, 2),
    ));
    out.push(check_binary("add", &mut rng, (2, 4, 4, 3), (2, 4, 4, 3)));
    out.push(check_binary("multiply", &mut rng, (2, 4, 4, 3), (2, 4, 4, 3)));
    out.push(check_binary("multiply(broadcast)", &mut rng, (2, 4, 4, 3), (2, 4, 4, 1)));
    let x = tensor(&mut rng, (2, 3, 4, 4));
    out.push(check_unary("softmax", x, &mut rng, layers::softmax_forward, |x, dy| {
        layers::softmax_backward(&layers::softmax_forward(x), dy)
    }));
    for (label, plan, shape) in [
        ("resize(up)", ResizePlan::Up(2, 2), (2, 2, 3, 2)),
        ("resize(down)", ResizePlan::Down(2, 4), (2, 4, 8, 2)),
    ] {
        let x = tensor(&mut rng, shape);
        out.push(check_unary(
            label,
            x,
            &mut rng,
            |x| layers::resize_forward(x, plan),
            |x, dy| layers::resize_backward(x.shape(), dy, plan),
        ));
    }
    let x = tensor(&mut rng, (2, 3, 4, 2));
    out.push(check_unary(
        "zero_pad",
        x,
        &mut rng,
        |x| layers::zero_pad_forward(x, 2),
        |_, dy| layers::zero_pad_backward(dy, 2),
    ));
    out.push(check_focal(&mut rng, 2.0));
    out.push(check_focal(&mut rng, 0.0));
    out.push(check_network(&mut rng));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -3.0], |x| x[0] * x[0] + 2.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let g = numeric_gradient_five_point(&[0.7], 0.1, |x| x[0].powi(4) - 3.0 * x[0].powi(3));
        let want = 4.0 * 0.7f64.powi(3) - 9.0 * 0.7f64.powi(2);
        assert!((g[0] - want).abs() < 1e-10);
    }
}
