//! Training loop and prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::focal_loss;
use super::net::{self, build_net, forward, forward_pass, logits_node, Mode, NetParams};
use super::optim::{adadelta_update, AdadeltaState};
use super::spec::NetSpec;
use super::tensor::{FeatureTensor, Real};
use super::TrainConfig;
use crate::evalmetrics::{dice, PixelConfusion};
use crate::imgcore::Raster;
use crate::instancing::LabelMap;
use crate::{Error, Result};

/// One training pair: a multi-scale tensor map and its contour labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Raster,
    pub target: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Counted from 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams<f32>,
    pub history: Vec<EpochStats>,
    /// Sample indices used for gradient steps.
    pub trained: Vec<usize>,
    /// Sample indices held out for validation.
    pub holdout: Vec<usize>,
}

pub fn train(spec: &NetSpec, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, samples, cfg, |_, _| true)
}

/// Like [`train`], calling `on_epoch` after every epoch; returning `false`
/// stops training early.
pub fn train_with(
    spec: &NetSpec,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &NetParams<f32>) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let dims = samples[0].input.dims();
    for (i, s) in samples.iter().enumerate() {
        if s.input.dims() != dims || s.target.dims() != dims || s.input.channels() != 1 {
            return Err(Error::contract(format!(
                "sample {i}: expected one-channel {}x{} input and target",
                dims.0, dims.1
            )));
        }
        if usize::from(s.target.max_label()) >= spec.output_channels() {
            return Err(Error::contract(format!(
                "sample {i}: label {} exceeds the network's {} classes",
                s.target.max_label(),
                spec.output_channels()
            )));
        }
    }

    let (mut params, _) = build_net::<f32>(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let n = samples.len();
    let n_val = ((cfg.validation_fraction * n as f64).round() as usize).min(n - 1);
    let mut pool: Vec<usize> = (0..n).collect();
    pool.shuffle(&mut rng);
    let holdout = pool.split_off(n - n_val);
    let mut order = pool.clone();

    let mut state = AdadeltaState::for_shapes(params.trainable());
    let mut history = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, t) = stack(samples, batch);
            let pass = forward_pass(spec, &params, &x, Mode::Train)?;
            let l = focal_loss(pass.output(), &t, cfg.alpha, cfg.gamma, batch.len())?;
            let grads = net::backward(spec, &params, &pass, logits_node(spec), l.grad_logits)?;
            net::update_running_stats(&mut params, &pass);
            adadelta_update(params.trainable_mut(), &grads.params, &mut state, cfg.rho, cfg.epsilon)?;
            total += f64::from(l.value) * batch.len() as f64;
        }
        let validation_loss = if holdout.is_empty() {
            None
        } else {
            Some(evaluate_loss(spec, &params, samples, &holdout, cfg)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: total / order.len() as f64,
            validation_loss,
        };
        log::debug!(
            "epoch {epoch}: train loss {:.6}, validation loss {:?}",
            stats.train_loss,
            stats.validation_loss
        );
        history.push(stats);
        if !on_epoch(&stats, &params) {
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        trained: pool,
        holdout,
    })
}

fn stack(samples: &[TrainSample], idx: &[usize]) -> (FeatureTensor<f32>, Vec<usize>) {
    let (h, w) = samples[idx[0]].input.dims();
    let mut x = Vec::with_capacity(idx.len() * h * w);
    let mut t = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        x.extend(samples[i].input.data().iter().map(|&v| v as f32));
        t.extend(samples[i].target.labels.iter().map(|&l| usize::from(l)));
    }
    (FeatureTensor::from_vec((idx.len(), h, w, 1), x), t)
}

fn evaluate_loss(
    spec: &NetSpec,
    params: &NetParams<f32>,
    samples: &[TrainSample],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let (x, t) = stack(samples, &[i]);
        let probs = forward(spec, params, &x)?;
        total += f64::from(focal_loss(&probs, &t, cfg.alpha, cfg.gamma, 1)?.value);
    }
    Ok(total / idx.len() as f64)
}

fn to_input<T: Real>(maps: &[&Raster]) -> Result<FeatureTensor<T>> {
    let (h, w) = maps[0].dims();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dims() != (h, w) {
            return Err(Error::contract("tensor maps in one batch differ in size"));
        }
        let g = crate::imgcore::ensure_gray(m)?;
        data.extend(g.data().iter().map(|&v| T::of(v)));
    }
    Ok(FeatureTensor::from_vec((maps.len(), h, w, 1), data))
}

/// Per-pixel argmax over class probabilities; ties go to the lowest index.
pub fn labels_from_probs<T: Real>(probs: &FeatureTensor<T>) -> Vec<LabelMap> {
    let c = probs.channels;
    probs
        .data
        .chunks_exact(probs.sample_len())
        .map(|sample| {
            let mut labels = Vec::with_capacity(probs.pixels());
            let mut conf = Vec::with_capacity(probs.pixels());
            for px in sample.chunks_exact(c) {
                let mut best = 0;
                for k in 1..c {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                labels.push(best as u16);
                conf.push(px[best].to_f64().unwrap_or(0.0).clamp(0.0, 1.0));
            }
            LabelMap {
                height: probs.height,
                width: probs.width,
                labels,
                confidence: conf,
            }
        })
        .collect()
}

pub fn predict(spec: &NetSpec, params: &NetParams<f32>, map: &Raster) -> Result<LabelMap> {
    let probs = forward(spec, params, &to_input::<f32>(&[map])?)?;
    Ok(labels_from_probs(&probs).pop().expect("one sample"))
}

/// Predicts several maps, a few at a time.
pub fn predict_batch(spec: &NetSpec, params: &NetParams<f32>, maps: &[Raster]) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(4) {
        let refs: Vec<&Raster> = chunk.iter().collect();
        let probs = forward(spec, params, &to_input::<f32>(&refs)?)?;
        out.extend(labels_from_probs(&probs));
    }
    Ok(out)
}

/// Mean Dice over foreground categories 1..=`categories`, pooling pixel
/// counts across all maps. Categories absent from both sides are skipped.
pub fn mean_dice(pred: &[LabelMap], truth: &[LabelMap], categories: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::contract("prediction and target counts differ"));
    }
    let mut conf = vec![PixelConfusion::default(); categories + 1];
    for (p, t) in pred.iter().zip(truth) {
        if p.dims() != t.dims() {
            return Err(Error::contract("prediction and target sizes differ"));
        }
        for (&a, &b) in p.labels.iter().zip(&t.labels) {
            for (cat, cf) in conf.iter_mut().enumerate().skip(1) {
                let (pa, tb) = (usize::from(a) == cat, usize::from(b) == cat);
                match (pa, tb) {
                    (true, true) => cf.tp += 1,
                    (true, false) => cf.fp += 1,
                    (false, true) => cf.fn_ += 1,
                    _ => {}
                }
            }
        }
    }
    let scores: Vec<f64> = conf[1..].iter().filter_map(|c| dice(c).ok()).collect();
    if scores.is_empty() {
        return Err(Error::contract("no foreground pixels on either side"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_background() {
        let p = FeatureTensor::from_vec((1, 1, 2, 3), vec![1.0 / 3.0; 6]);
        let l = labels_from_probs::<f64>(&p);
        assert_eq!(l[0].labels, vec![0, 0]);
    }

    #[test]
    fn argmax_and_confidence() {
        let p = FeatureTensor::from_vec((1, 1, 1, 3), vec![0.05, 0.05, 0.9]);
        let l = labels_from_probs::<f64>(&p);
        assert_eq!(l[0].labels, vec![2]);
        assert!((l[0].confidence[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_unit_dice() {
        let lm = LabelMap::new(1, 4, vec![0, 1, 2, 1], vec![1.0; 4]).unwrap();
        assert_eq!(mean_dice(&[lm.clone()], &[lm], 2).unwrap(), 1.0);
    }
}
