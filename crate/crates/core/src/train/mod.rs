//! Training loop: per-sample losses and gradients are computed in parallel
//! within a batch, reduced in a fixed order, and applied with Adam under a
//! stepwise learning-rate decay. Model selection tracks the best validation
//! displacement error.

pub mod baselines;
pub mod dataset;
pub mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::mix_seed;
use crate::error::{Error, Result};
use crate::map::sample::Sample;
use crate::model::{check_sample, forward_on_tape, ModelConfig, PredictorParams};
use crate::tensor::{Adam, GradMap, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs (0-based) from which the decayed rate applies.
    pub decay_epochs: Vec<usize>,
    /// Weight of the mean absolute error term.
    pub alpha: f64,
    /// Weight of the mean squared error term.
    pub beta: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            lr: 5e-4,
            lr_decay: 0.1,
            decay_epochs: vec![5, 20],
            alpha: 1.0,
            beta: 1.0,
            batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} must be in (0, 1]", self.lr_decay)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) || !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch. One multiplication per decay
    /// boundary passed, so the decayed values are exact products.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &at in &self.decay_epochs {
            if epoch >= at {
                lr *= self.lr_decay;
            }
        }
        lr
    }
}

/// alpha * mean(|error|) + beta * mean(error^2), averaged over every scalar
/// of the displacement matrix.
pub fn loss_on_tape(tape: &mut Tape, pred: Var, target: &[f32], alpha: f64, beta: f64) -> Result<Var> {
    if target.len() != tape.numel(pred) {
        return Err(Error::shape(
            "loss",
            format!("{} target values for {} predictions", target.len(), tape.numel(pred)),
        ));
    }
    let t = tape.leaf(tape.shape(pred).to_vec(), target.to_vec())?;
    let e = tape.sub(pred, t)?;
    let l1 = tape.abs(e);
    let l1 = tape.mean(l1);
    let l1 = tape.scale(l1, alpha as f32);
    let l2 = tape.square(e);
    let l2 = tape.mean(l2);
    let l2 = tape.scale(l2, beta as f32);
    tape.add(l1, l2)
}

/// f64 twin of [`loss_on_tape`] for reporting.
pub fn loss_value(pred: &[[f64; 2]], target: &[[f64; 2]], alpha: f64, beta: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "horizon mismatch");
    let n = (2 * pred.len()) as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for e in [p[0] - t[0], p[1] - t[1]] {
            l1 += e.abs();
            l2 += e * e;
        }
    }
    alpha * l1 / n + beta * l2 / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN when no validation split exists.
    pub val_loss: f64,
    pub val_ade: f64,
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch (final weights when there is no
    /// validation split).
    pub params: ParamSet,
    pub layout: PredictorParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_ade: f64,
}

fn target_flat(sample: &Sample) -> Vec<f32> {
    sample
        .target
        .iter()
        .flat_map(|p| [p[0] as f32, p[1] as f32])
        .collect()
}

fn sample_loss_grad(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    layout: &PredictorParams,
    params: &ParamSet,
    sample: &Sample,
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, cfg, layout, params, &sample.features, &sample.chunks)?;
    let loss = loss_on_tape(&mut tape, out, &target_flat(sample), tc.alpha, tc.beta)?;
    let value = tape.data(loss)[0] as f64;
    let bw = tape.backward(loss)?;
    Ok((value, tape.param_grads(&bw, params)))
}

fn sample_val(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    layout: &PredictorParams,
    params: &ParamSet,
    sample: &Sample,
) -> Result<(f64, f64)> {
    let pred = crate::model::forward(cfg, layout, params, sample)?;
    let loss = loss_value(&pred, &sample.target, tc.alpha, tc.beta);
    let steps = sample.tau.min(8);
    let ade = metrics::ade_fde(&pred, &sample.target, steps)?.0;
    Ok((loss, ade))
}

/// Trains from scratch and returns the selected weights together with the
/// per-epoch log. `on_epoch` fires after each epoch, in order.
pub fn train_model(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for sample in train.iter().chain(val) {
        check_sample(cfg, sample)?;
    }

    let (mut params, layout) = PredictorParams::init(cfg, mix_seed(seed, &[0xA]));
    let mut adam = Adam::new(&params);
    let mut best: Option<(ParamSet, usize, f64)> = None;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = tc.lr_at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xB, epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let results: Result<Vec<(f64, GradMap)>> = batch
                .par_iter()
                .map(|&i| sample_loss_grad(cfg, tc, &layout, &params, &train[i]))
                .collect();
            let mut acc = GradMap::zeros(&params);
            let results = results?;
            for (value, grads) in &results {
                loss_sum += value;
                acc.accumulate(grads);
            }
            acc.scale(1.0 / results.len() as f32);
            adam.step(&mut params, &acc, lr);
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_loss, val_ade) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let per: Result<Vec<(f64, f64)>> = val
                .par_iter()
                .map(|s| sample_val(cfg, tc, &layout, &params, s))
                .collect();
            let per = per?;
            let n = per.len() as f64;
            (
                per.iter().map(|p| p.0).sum::<f64>() / n,
                per.iter().map(|p| p.1).sum::<f64>() / n,
            )
        };
        if !val.is_empty() && best.as_ref().map_or(true, |b| val_ade < b.2) {
            best = Some((params.clone(), epoch, val_ade));
        }

        let entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_ade,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    let (params, best_epoch, best_val_ade) = match best {
        Some(b) => b,
        None => (params, tc.epochs - 1, f64::NAN),
    };
    Ok(TrainOutcome {
        params,
        layout,
        log,
        best_epoch,
        best_val_ade,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decayed_rates_are_exact_products() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at_epoch(0), 5e-4);
        assert_eq!(tc.lr_at_epoch(4), 5e-4);
        assert_eq!(tc.lr_at_epoch(5), 5e-5);
        assert_eq!(tc.lr_at_epoch(19), 5e-5);
        assert_eq!(tc.lr_at_epoch(20), 5e-6);
        assert_eq!(tc.lr_at_epoch(69), 5e-6);
    }

    #[test]
    fn loss_weights_both_terms() {
        let pred = [[1.0, 0.0], [0.0, 2.0]];
        let target = [[0.0, 0.0], [0.0, 0.0]];
        // Mean absolute error (1 + 2)/4, mean squared error (1 + 4)/4.
        assert!((loss_value(&pred, &target, 1.0, 0.0) - 0.75).abs() < 1e-12);
        assert!((loss_value(&pred, &target, 0.0, 1.0) - 1.25).abs() < 1e-12);
        assert!((loss_value(&pred, &target, 1.0, 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(loss_value(&pred, &pred, 1.0, 1.0), 0.0);
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let pred = [[0.3, -0.7], [1.1, 0.2], [-0.4, 0.9]];
        let target = [[0.0, -0.5], [1.0, 0.0], [0.4, 1.0]];
        let mut tape = Tape::new();
        let p = tape
            .leaf_grad(vec![3, 2], pred.iter().flatten().map(|&v| v as f32).collect())
            .unwrap();
        let t: Vec<f32> = target.iter().flatten().map(|&v| v as f32).collect();
        let loss = loss_on_tape(&mut tape, p, &t, 0.7, 1.3).unwrap();
        let want = loss_value(&pred, &target, 0.7, 1.3);
        assert!((tape.data(loss)[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn loss_gradient_combines_sign_and_linear_terms() {
        // d/dp of (|p - t| + (p - t)^2) / n at p - t = 0.5 is (1 + 1) / n.
        let mut tape = Tape::new();
        let p = tape.leaf_grad(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let loss = loss_on_tape(&mut tape, p, &[0.0, 0.0], 1.0, 1.0).unwrap();
        let bw = tape.backward(loss).unwrap();
        let g = bw.wrt(p).unwrap();
        assert!((g[0] - (1.0 + 1.0) / 2.0).abs() < 1e-6);
        assert!((g[1] + (1.0 + 1.0) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn config_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { lr: f64::NAN, ..ok.clone() },
            TrainConfig { lr_decay: 0.0, ..ok.clone() },
            TrainConfig { lr_decay: 1.5, ..ok.clone() },
            TrainConfig { alpha: -1.0, ..ok.clone() },
            TrainConfig { alpha: 0.0, beta: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn config_deserializes_with_defaults() {
        let tc: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(tc, TrainConfig::default());
        let tc: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "decay_epochs": []}"#).unwrap();
        assert_eq!(tc.epochs, 3);
        assert!(tc.decay_epochs.is_empty());
        assert_eq!(tc.lr, 5e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"unknown": 1}"#).is_err());
    }
}
