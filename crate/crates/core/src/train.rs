//! Mini-batch training: cross-entropy loss, Adam, validation-loss early
//! stopping with best-weights restoration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 6,
            patience: 2,
            shuffle_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs", "must be >= 1"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience", "must be >= 1"));
        }
        Ok(())
    }
}

/// `−ln(max(p[gold], 1e-12))`.
pub fn cross_entropy<T: Real>(probs: &[T], gold: usize) -> Result<f64> {
    let p = probs.get(gold).ok_or_else(|| {
        Error::Contract(format!("gold class {gold} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.as_f64().max(PROB_FLOOR).ln())
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step<T: Real>(
    params: &mut Parameters<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    adam_step_filtered(params, grads, state, cfg, |_| true)
}

fn adam_step_filtered<T: Real>(
    params: &mut Parameters<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    for name in params.names() {
        if trainable(name) && grads.get(name).is_none() {
            return Err(Error::Contract(format!("no gradient for parameter {name:?}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.eps);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (name, theta) in params.iter_mut() {
        if !trainable(name) {
            continue;
        }
        let g = grads.get(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        if g.shape() != theta.shape() {
            return Err(Error::dim(
                "adam",
                format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), theta.shape()),
            ));
        }
        for (((p, &gi), mi), vi) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A model the trainer can fit: maps one input to a class distribution.
pub trait Classifier {
    type Input;

    /// Builds the forward pass for `input` on `g` and returns the `[C]`
    /// probability node.
    fn probs<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Parameters<T>,
        input: &Self::Input,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId>;

    /// Parameters excluded from optimisation return false.
    fn is_trainable(&self, _name: &str) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<I> {
    pub input: I,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub stopped_early: bool,
    /// Zero-based epoch whose weights were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// Mean loss and accuracy of `samples` at inference.
pub fn evaluate_loss<M: Classifier, T: Real>(
    model: &M,
    params: &Parameters<T>,
    samples: &[Sample<M::Input>],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut correct) = (0.0, 0usize);
    for s in samples {
        let mut g = Graph::new();
        let p = model.probs(&mut g, params, &s.input, false, &mut rng)?;
        let probs = g.value(p).data();
        loss += cross_entropy(probs, s.label)?;
        correct += usize::from(argmax(probs) == s.label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fits `params` on `train`, monitoring `val` after every epoch.
///
/// Training stops once validation loss has failed to improve for
/// `patience` consecutive epochs; the returned weights are those of the
/// epoch with the lowest validation loss.
pub fn train<M: Classifier, T: Real>(
    model: &M,
    params: Parameters<T>,
    train: &[Sample<M::Input>],
    val: &[Sample<M::Input>],
    cfg: &TrainConfig,
) -> Result<(Parameters<T>, TrainHistory)> {
    train_observed(model, params, train, val, cfg, |_| {})
}

/// [`train`] with a callback that sees the history after every epoch.
pub fn train_observed<M: Classifier, T: Real>(
    model: &M,
    mut params: Parameters<T>,
    train: &[Sample<M::Input>],
    val: &[Sample<M::Input>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainHistory),
) -> Result<(Parameters<T>, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed ^ 0x5eed_d50f);
    let mut state = AdamState::new(&params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Parameters<T>)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut epoch_loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train[i];
                let p = model.probs(&mut g, &params, &s.input, true, &mut dropout_rng)?;
                correct += usize::from(argmax(g.value(p).data()) == s.label);
                losses.push(g.nll(p, s.label)?);
            }
            let loss = g.mean(&losses)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Data(format!("loss diverged at epoch {epoch}")));
            }
            epoch_loss += value * batch.len() as f64;
            let grads = g.backward(loss)?;
            adam_step_filtered(&mut params, &grads, &mut state, cfg, |n| model.is_trainable(n))?;
        }
        let n = train.len() as f64;
        let (val_loss, val_acc) = evaluate_loss(model, &params, val)?;
        history.train_loss.push(epoch_loss / n);
        history.train_acc.push(correct as f64 / n);
        history.val_loss.push(val_loss);
        history.val_acc.push(val_acc);

        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, params.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            history.stopped_early = stale >= cfg.patience;
        }
        on_epoch(&history);
        if history.stopped_early {
            break;
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}
