//! Adam optimiser and the mini-batch training loop.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lstm::{backward, batch_loss, forward_batch, Gradients, LstmError, Network, DEFAULT_HIDDEN};

/// Adam moment estimates and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Network,
    v: Network,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Network::zeros(net.n_features(), net.hidden()),
            v: Network::zeros(net.n_features(), net.hidden()),
        }
    }
}

/// One bias-corrected Adam update of `net` in place.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState) -> Result<(), LstmError> {
    if !net.shape_matches(grads) || !net.shape_matches(&state.m) {
        return Err(LstmError::ShapeMismatch("gradient layout differs from parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    let params = net.slices_mut();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads.slices()).zip(ms).zip(vs) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / correct1;
            let v_hat = v[k] / correct2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    /// Rescale the batch gradient when its L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            hidden: DEFAULT_HIDDEN,
            learning_rate: 1e-3,
            grad_clip: None,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LstmError> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(LstmError::InvalidConfig(
                "epochs, batch_size and hidden must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LstmError::InvalidConfig("learning_rate must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(LstmError::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Trained weights and the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub loss_history: Vec<f64>,
}

/// Trains a fresh network on `(instance, class index)` pairs.
pub fn train(
    inputs: &[ArrayView2<f64>],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome, LstmError> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(LstmError::EmptySplit);
    }
    if inputs.len() != labels.len() {
        return Err(LstmError::ShapeMismatch(format!(
            "{} instances, {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::init(inputs[0].ncols(), config.hidden, &mut rng);
    let mut adam = AdamState::new(&net, config.learning_rate);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<ArrayView2<f64>> = chunk.iter().map(|&i| inputs[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = forward_batch(&net, &batch)?;
            let (loss, d_logits) = batch_loss(&logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(LstmError::DivergedLoss {
                    epoch,
                    batch: batch_no,
                    last_loss: history.last().copied(),
                });
            }
            epoch_loss += loss;
            let mut grads = backward(&net, &cache, &d_logits)?;
            grads.scale(1.0 / chunk.len() as f64);
            if let Some(limit) = config.grad_clip {
                let norm = grads.l2_norm();
                if norm > limit {
                    grads.scale(limit / norm);
                }
            }
            adam_step(&mut net, &grads, &mut adam)?;
            if !net.is_finite() {
                return Err(LstmError::DivergedLoss {
                    epoch,
                    batch: batch_no,
                    last_loss: history.last().copied(),
                });
            }
        }
        let mean = epoch_loss / inputs.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        network: net,
        loss_history: history,
    })
}
