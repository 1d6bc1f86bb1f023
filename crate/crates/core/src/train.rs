//! Empirical risk minimization over trajectory datasets.
//!
//! Each trajectory of length T contributes T-1 squared-error terms: the
//! prediction emitted after consuming `y_t` is scored against `y_{t+1}`.
//! Optimization is Adam on the flat parameter vector with global-norm
//! gradient clipping, full-trajectory minibatches, and a per-epoch shuffle
//! drawn from its own rng stream, so a run is a pure function of (initial
//! network, dataset, config) and can be split across invocations without
//! changing the result.

use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{AdamSnapshot, FilterNet, NetGrad};
use crate::rng::stream;
use crate::systems::{sample_linear_system, simulate, NoiseModel, TrajectoryBatch};

const DIVERGENCE_FACTOR: f64 = 1e3;
/// Epoch shuffle for epoch `e` uses rng stream `SHUFFLE_STREAM_BASE + e`.
const SHUFFLE_STREAM_BASE: u64 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed of the shuffle streams; independent of data and init seeds.
    pub seed: u64,
    /// When set, reported wall times are zeroed so artifacts are
    /// byte-identical across reruns.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
    /// Mean pre-clip gradient norm over the epoch's minibatches.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Optimizer position between invocations: how many epochs have run and the
/// Adam moments. Feeding the state back into [`fit`] continues the original
/// schedule exactly, so two half-runs equal one full run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub epoch: u32,
    pub adam: AdamSnapshot,
}

/// Samples `n_systems` observable linear systems and one trajectory each.
/// System `k` draws from rng stream `k` of `seed`, so the dataset does not
/// depend on generation order.
pub fn make_dataset(
    seed: u64,
    n_systems: usize,
    t_len: usize,
    state_dim: usize,
    obs_dim: usize,
    target_radius: f64,
    noise: NoiseModel,
) -> Result<TrajectoryBatch> {
    if n_systems == 0 {
        return Err(Error::contract("dataset needs at least one system"));
    }
    let mut batch = TrajectoryBatch::new(state_dim, obs_dim, t_len, n_systems, noise, seed);
    for k in 0..n_systems {
        let mut rng = stream(seed, k as u64);
        let sys = sample_linear_system(&mut rng, state_dim, obs_dim, target_radius)?;
        let traj = simulate(&sys, &noise, t_len, &mut rng)?;
        batch.set_trajectory(k, &traj.ys)?;
    }
    Ok(batch)
}

fn clip_to_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Squared-error loss and upstream gradients of one trajectory.
fn trajectory_loss_grad(
    net: &FilterNet,
    ys: &[DVector<f64>],
) -> Result<(f64, NetGrad)> {
    let t_len = ys.len();
    if t_len < 2 {
        return Err(Error::contract(
            "training trajectories need at least two steps",
        ));
    }
    let inputs = &ys[..t_len - 1];
    let (preds, cache) = net.forward_train(inputs)?;
    let terms = (t_len - 1) as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let err = &preds[t] - &ys[t + 1];
        loss += err.norm_squared() / terms;
        upstream.push(err * (2.0 / terms));
    }
    let grad = net.backward(inputs, &cache, &upstream)?;
    Ok((loss, grad))
}

/// Mean per-trajectory loss of the whole dataset under the current
/// parameters, without touching gradients.
pub fn dataset_loss(net: &FilterNet, batch: &TrajectoryBatch) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..batch.n_systems {
        let ys = batch.trajectory(k);
        let t_len = ys.len();
        if t_len < 2 {
            return Err(Error::contract(
                "training trajectories need at least two steps",
            ));
        }
        let preds = net.predict_sequence(&ys[..t_len - 1])?;
        let terms = (t_len - 1) as f64;
        for t in 0..t_len - 1 {
            total += (&preds[t] - &ys[t + 1]).norm_squared() / terms;
        }
    }
    Ok(total / batch.n_systems as f64)
}

/// Runs Adam from the network's current parameters. `resume` continues an
/// earlier invocation; epochs already covered by it are skipped and the
/// shuffle schedule stays aligned, so interrupting and resuming changes
/// nothing. Errors out if a minibatch loss stops being finite or exceeds
/// 1e3 times the invocation's first minibatch loss.
pub fn fit(
    net: &mut FilterNet,
    batch: &TrajectoryBatch,
    cfg: &TrainConfig,
    resume: Option<FitState>,
) -> Result<(TrainReport, FitState)> {
    if batch.n_systems == 0 {
        return Err(Error::contract("dataset is empty"));
    }
    if batch.obs_dim != net.config().m {
        return Err(Error::contract(format!(
            "dataset has {} channels, network expects {}",
            batch.obs_dim,
            net.config().m
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    if !(cfg.clip_norm > 0.0) {
        return Err(Error::contract("clip norm must be positive"));
    }
    let n_params = net.param_count();
    let (start_epoch, mut adam) = match resume {
        Some(state) => {
            if state.adam.m.len() != n_params || state.adam.v.len() != n_params {
                return Err(Error::contract(
                    "optimizer state does not match the network's parameter count",
                ));
            }
            (state.epoch, state.adam)
        }
        None => (0, AdamSnapshot { step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }),
    };
    if (start_epoch as usize) > cfg.epochs {
        return Err(Error::contract(format!(
            "resume epoch {start_epoch} is beyond the configured {} epochs",
            cfg.epochs
        )));
    }

    let mut params = Vec::with_capacity(n_params);
    net.copy_to_flat(&mut params);
    let mut grad_flat = vec![0.0; n_params];
    let mut grad_buf: Vec<f64> = Vec::with_capacity(n_params);
    let mut baseline_loss: Option<f64> = None;
    let mut report = TrainReport::default();

    for epoch in start_epoch as usize..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..batch.n_systems).collect();
        order.shuffle(&mut stream(cfg.seed, SHUFFLE_STREAM_BASE + epoch as u64));

        let mut epoch_loss = 0.0;
        let mut epoch_grad_norm = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            grad_flat.iter_mut().for_each(|g| *g = 0.0);
            let weight = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &k in chunk {
                let ys = batch.trajectory(k);
                let (loss, grad) = trajectory_loss_grad(net, &ys)?;
                batch_loss += loss * weight;
                grad.copy_to_flat(&mut grad_buf);
                for (acc, g) in grad_flat.iter_mut().zip(&grad_buf) {
                    *acc += g * weight;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: minibatch loss became {batch_loss} in epoch {epoch}"
                )));
            }
            match baseline_loss {
                None => baseline_loss = Some(batch_loss),
                Some(base) => {
                    if base > 0.0 && batch_loss > DIVERGENCE_FACTOR * base {
                        return Err(Error::numeric(format!(
                            "training diverged: minibatch loss {batch_loss} exceeds \
                             {DIVERGENCE_FACTOR} times the initial {base}"
                        )));
                    }
                }
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            epoch_grad_norm += clip_to_norm(&mut grad_flat, cfg.clip_norm);
            n_batches += 1;

            adam.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(adam.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(adam.step as i32);
            for i in 0..n_params {
                let g = grad_flat[i];
                adam.m[i] = cfg.beta1 * adam.m[i] + (1.0 - cfg.beta1) * g;
                adam.v[i] = cfg.beta2 * adam.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = adam.m[i] / bc1;
                let v_hat = adam.v[i] / bc2;
                params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            net.copy_from_flat(&params)?;
        }
        report.epochs.push(EpochStats {
            epoch: epoch as u32,
            mean_loss: epoch_loss / batch.n_systems as f64,
            grad_norm: epoch_grad_norm / n_batches.max(1) as f64,
            wall_ms: if cfg.deterministic { 0 } else { started.elapsed().as_millis() as u64 },
        });
    }
    Ok((report, FitState { epoch: cfg.epochs as u32, adam }))
}

/// Renders per-epoch statistics as CSV. Floats use their shortest exact
/// decimal form, so equal runs serialize to equal bytes.
pub fn training_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,mean_loss,grad_norm,wall_ms\n");
    for e in &report.epochs {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.grad_norm, e.wall_ms));
    }
    out
}
