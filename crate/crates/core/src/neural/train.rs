//! Minibatch training with Adam or SGD-with-momentum, best-epoch selection
//! on validation accuracy, and explicit divergence detection.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::denoise::ResidualMap;
use crate::error::{Error, Result};
use crate::neural::net::{binary_cross_entropy, cross_entropy, Network, NetworkSpec};
use crate::rng::RngState;

/// First-order update rule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Momentum {
        lr: f64,
        momentum: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        Optimizer::Momentum { lr, momentum }
    }
}

/// Mutable optimizer state sized to one parameter vector.
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Apply one update of `opt` to `theta` given gradient `grad`.
    pub fn update(&mut self, opt: &Optimizer, theta: &mut [f64], grad: &[f64]) {
        match *opt {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    theta[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            Optimizer::Momentum { lr, momentum } => {
                for i in 0..theta.len() {
                    self.m[i] = momentum * self.m[i] + grad[i];
                    theta[i] -= lr * self.m[i];
                }
            }
        }
    }
}

/// Training hyperparameters shared by all network kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// L2 penalty coefficient on weights.
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: Optimizer::adam(1e-3),
            l2: 5e-3,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.l2.is_finite() || self.l2 < 0.0 {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }
}

/// Per-sample supervision target.
#[derive(Debug, Clone, Copy)]
pub enum Target {
    Class(usize),
    Binary(f64),
}

/// Per-epoch history plus the selected model's summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// 1-based epoch whose weights were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub final_val_accuracy: f64,
    pub balance_warning: Option<String>,
}

fn sample_loss(net: &Network, x: &Array3<f64>, target: Target) -> Result<(f64, Vec<f64>)> {
    let (logits, trace) = net.forward_trace(x)?;
    let (loss, dlogits) = match target {
        Target::Class(t) => cross_entropy(&logits, t),
        Target::Binary(t) => {
            let (l, g) = binary_cross_entropy(logits[0], t);
            (l, ndarray::Array1::from_vec(vec![g]))
        }
    };
    let (dtheta, _) = net.backward(&trace, &dlogits);
    Ok((loss, dtheta))
}

fn correct(net: &Network, x: &Array3<f64>, target: Target) -> Result<bool> {
    let logits = net.forward(x)?;
    Ok(match target {
        Target::Class(t) => argmax(logits.as_slice().expect("contiguous")) == t,
        Target::Binary(t) => (logits[0] > 0.0) == (t > 0.5),
    })
}

/// Index of the first maximum (deterministic tie-breaking).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Core loop shared by the classifier, detector, and substitute trainers.
///
/// Each epoch visits a fresh shuffle of the training set in minibatches,
/// averages per-sample gradients, adds the L2 term once per batch, and steps
/// the optimizer. After each epoch, validation accuracy decides whether the
/// current weights replace the best snapshot (strictly better wins, so ties
/// keep the earliest epoch). A non-finite batch loss aborts with a training
/// error rather than silently continuing.
pub fn run_training(
    spec: NetworkSpec,
    train: &[(&Array3<f64>, Target)],
    val: &[(&Array3<f64>, Target)],
    cfg: &TrainConfig,
    rng: &mut RngState,
    balance_warning: Option<String>,
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    let mut net = Network::new(spec, rng)?;
    let mut best_theta = net.theta.clone();
    let mut best_acc = eval_accuracy(&net, val)?;
    let mut best_epoch = 0usize;
    let mut state = OptimizerState::new(net.num_params());
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_accuracy: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        final_val_accuracy: best_acc,
        balance_warning,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; net.num_params()];
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (x, target) = train[idx];
                let (loss, dtheta) = sample_loss(&net, x, target)?;
                batch_loss += loss;
                for (g, d) in grad.iter_mut().zip(dtheta.iter()) {
                    *g += d;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            net.add_l2_gradient(cfg.l2, &mut grad);
            batch_loss = batch_loss * scale + net.l2_penalty(cfg.l2);
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged to {batch_loss} in epoch {epoch}"
                )));
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            state.update(&cfg.optimizer, &mut net.theta, &grad);
            if !net.theta.iter().all(|v| v.is_finite()) {
                return Err(Error::Training(format!(
                    "parameters diverged in epoch {epoch}"
                )));
            }
        }
        report.train_loss.push(epoch_loss / train.len() as f64);
        let acc = eval_accuracy(&net, val)?;
        report.val_accuracy.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best_theta.copy_from_slice(&net.theta);
            best_epoch = epoch;
        }
    }
    net.theta = best_theta;
    report.best_epoch = best_epoch;
    report.final_val_accuracy = best_acc;
    Ok((net, report))
}

fn eval_accuracy(net: &Network, samples: &[(&Array3<f64>, Target)]) -> Result<f64> {
    let mut hits = 0usize;
    for (x, target) in samples {
        if correct(net, x, *target)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Train a multi-class classifier on labeled images.
pub fn train_classifier(
    spec: NetworkSpec,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(Network, TrainReport)> {
    let warning = class_balance_warning(&train.labels, train.num_classes);
    let train_samples: Vec<(&Array3<f64>, Target)> = train
        .images
        .iter()
        .zip(&train.labels)
        .map(|(x, &l)| (&x.data, Target::Class(l)))
        .collect();
    let val_samples: Vec<(&Array3<f64>, Target)> = val
        .images
        .iter()
        .zip(&val.labels)
        .map(|(x, &l)| (&x.data, Target::Class(l)))
        .collect();
    run_training(spec, &train_samples, &val_samples, cfg, rng, warning)
}

/// Train the binary residual detector. Requires both classes in the training
/// set; a strong imbalance is reported as a warning, not an error.
pub fn train_detector(
    spec: NetworkSpec,
    train: &[(ResidualMap, bool)],
    val: &[(ResidualMap, bool)],
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(Network, TrainReport)> {
    let pos = train.iter().filter(|(_, y)| *y).count();
    let neg = train.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Training(format!(
            "detector training needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    let minority = pos.min(neg) as f64 / train.len() as f64;
    let warning = (minority < 0.1).then(|| {
        format!("detector classes are imbalanced: minority fraction {minority:.3}")
    });
    let train_samples: Vec<(&Array3<f64>, Target)> = train
        .iter()
        .map(|(x, y)| (&x.data, Target::Binary(if *y { 1.0 } else { 0.0 })))
        .collect();
    let val_samples: Vec<(&Array3<f64>, Target)> = val
        .iter()
        .map(|(x, y)| (&x.data, Target::Binary(if *y { 1.0 } else { 0.0 })))
        .collect();
    run_training(spec, &train_samples, &val_samples, cfg, rng, warning)
}

/// Train a substitute on inputs labeled by the victim's hard predictions.
pub fn train_substitute(
    spec: NetworkSpec,
    victim: &Network,
    inputs: &LabeledDataset,
    val_fraction: f64,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(Network, TrainReport)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::Config(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let mut labels = Vec::with_capacity(inputs.len());
    for x in &inputs.images {
        let logits = victim.forward(&x.data)?;
        labels.push(argmax(logits.as_slice().expect("contiguous")));
    }
    let n_val = ((inputs.len() as f64) * val_fraction).ceil() as usize;
    let n_val = n_val.max(1).min(inputs.len() - 1);
    let split = inputs.len() - n_val;
    let train_samples: Vec<(&Array3<f64>, Target)> = inputs.images[..split]
        .iter()
        .zip(&labels[..split])
        .map(|(x, &l)| (&x.data, Target::Class(l)))
        .collect();
    let val_samples: Vec<(&Array3<f64>, Target)> = inputs.images[split..]
        .iter()
        .zip(&labels[split..])
        .map(|(x, &l)| (&x.data, Target::Class(l)))
        .collect();
    run_training(spec, &train_samples, &val_samples, cfg, rng, None)
}

fn class_balance_warning(labels: &[usize], num_classes: usize) -> Option<String> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .position(|&c| c == 0)
        .map(|c| format!("class {c} has no training samples"))
}

/// Fraction of dataset samples whose argmax prediction matches the label.
pub fn accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &l) in data.images.iter().zip(&data.labels) {
        let logits = net.forward(&x.data)?;
        if argmax(logits.as_slice().expect("contiguous")) == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of images on which two classifiers pick the same class.
pub fn agreement(a: &Network, b: &Network, images: &[crate::data::ImageTensor]) -> Result<f64> {
    let mut hits = 0usize;
    for x in images {
        let la = a.forward(&x.data)?;
        let lb = b.forward(&x.data)?;
        if argmax(la.as_slice().expect("contiguous")) == argmax(lb.as_slice().expect("contiguous"))
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}
