//! Evaluation harness: runs a trained network and its baselines over fresh
//! systems and reduces the errors to per-time RMS curves.
//!
//! Each evaluation trajectory is simulated one step past the scored horizon
//! so that every one of the T predictions, including the last, has a true
//! target. All methods see the identical observation sequence.

use nalgebra::DVector;
use serde::Serialize;

use crate::baselines::{kf_filter_sequence, kf_mismatched_switching, naive_predictor};
use crate::error::{Error, Result};
use crate::model::FilterNet;
use crate::rng::stream;
use crate::systems::{
    sample_linear_system, simulate, simulate_switching, NoiseModel, SwitchingSystem,
};

/// Scored time steps before this index are excluded from summary means; the
/// filterers all start from uninformed priors.
pub const BURN_IN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Stationary linear systems with white Gaussian noise; the Kalman
    /// baseline knows the true system and noise covariances.
    LinearGaussian,
    /// Dynamics and observation map change abruptly at half the horizon; the
    /// Kalman baseline keeps the first regime's model throughout.
    Switching,
    /// Both noises are moving averages; the Kalman baseline wrongly
    /// assumes white noise of the same marginal variances.
    Colored,
    /// Stationary linear systems scored past the network's training horizon.
    LengthGeneralization,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::LinearGaussian => "linear_gaussian",
            ExperimentKind::Switching => "switching",
            ExperimentKind::Colored => "colored",
            ExperimentKind::LengthGeneralization => "length_generalization",
        }
    }

    fn kf_label(&self) -> &'static str {
        match self {
            ExperimentKind::LinearGaussian | ExperimentKind::LengthGeneralization => "kf_matched",
            ExperimentKind::Switching => "kf_mismatched",
            ExperimentKind::Colored => "kf_white",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub n_systems: usize,
    /// Number of scored predictions per system.
    pub t_len: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub target_radius: f64,
    pub noise: NoiseModelSpec,
    pub seed: u64,
    /// Seed the evaluated checkpoint was trained with; evaluation must not
    /// reuse it.
    pub train_seed: u64,
    /// Horizon the checkpoint was trained on, recorded in artifacts for
    /// length-generalization runs.
    pub train_horizon: Option<u32>,
}

/// Serializable mirror of [`NoiseModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModelSpec {
    White { sigma_w2: f64, sigma_v2: f64 },
    Colored { window: usize, sigma_eta2: f64, sigma_nu2: f64 },
}

impl NoiseModelSpec {
    pub fn to_model(self) -> NoiseModel {
        match self {
            NoiseModelSpec::White { sigma_w2, sigma_v2 } => NoiseModel::White { sigma_w2, sigma_v2 },
            NoiseModelSpec::Colored { window, sigma_eta2, sigma_nu2 } => {
                NoiseModel::Colored { window, sigma_eta2, sigma_nu2 }
            }
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_systems == 0 || self.t_len == 0 || self.state_dim == 0 || self.obs_dim == 0 {
            return Err(Error::contract("experiment dimensions must be positive"));
        }
        if self.seed == self.train_seed {
            return Err(Error::contract(format!(
                "evaluation seed {} equals the training seed; test systems would repeat \
                 training draws",
                self.seed
            )));
        }
        if self.kind == ExperimentKind::Switching && self.t_len % 2 != 0 {
            return Err(Error::contract("switching experiments need an even horizon"));
        }
        if !(self.target_radius > 0.0 && self.target_radius < 1.0) {
            return Err(Error::contract("target spectral radius must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodCurve {
    pub method: String,
    pub rms: Vec<f64>,
    pub burn_in_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub n_systems: usize,
    pub t_len: usize,
    pub burn_in: usize,
    pub curves: Vec<MethodCurve>,
    pub train_horizon: Option<u32>,
}

impl ExperimentResult {
    pub fn curve(&self, method: &str) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| c.method == method)
    }
}

/// Per-time RMS over systems: element `t` is the root of the mean squared
/// error norm at time `t`.
pub fn rms_curve(errors: &[Vec<DVector<f64>>]) -> Result<Vec<f64>> {
    let n = errors.len();
    if n == 0 {
        return Err(Error::contract("rms needs at least one system"));
    }
    let t_len = errors[0].len();
    for (k, errs) in errors.iter().enumerate() {
        if errs.len() != t_len {
            return Err(Error::contract(format!(
                "system {k} has {} errors, system 0 has {t_len}",
                errs.len()
            )));
        }
        for (t, e) in errs.iter().enumerate() {
            if !e.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!(
                    "error of system {k} at time {t} is not finite"
                )));
            }
        }
    }
    Ok((0..t_len)
        .map(|t| (errors.iter().map(|errs| errs[t].norm_squared()).sum::<f64>() / n as f64).sqrt())
        .collect())
}

/// Mean of the RMS curve over the scored window `[burn_in, len)`.
pub fn burn_in_mean(rms: &[f64], burn_in: usize) -> Result<f64> {
    if burn_in >= rms.len() {
        return Err(Error::contract(format!(
            "burn-in {burn_in} leaves no scored steps out of {}",
            rms.len()
        )));
    }
    let tail = &rms[burn_in..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

struct MethodErrors {
    label: &'static str,
    errors: Vec<Vec<DVector<f64>>>,
}

/// Runs one experiment: samples `n_systems` fresh systems from the
/// evaluation seed, scores the network and both baselines on identical
/// trajectories, and reduces to RMS curves. System `k` draws everything from
/// rng stream `k`, so results are independent of evaluation order.
pub fn run_experiment(spec: &ExperimentSpec, net: &FilterNet) -> Result<ExperimentResult> {
    spec.validate()?;
    if net.config().m != spec.obs_dim {
        return Err(Error::contract(format!(
            "network expects {} channels, experiment generates {}",
            net.config().m,
            spec.obs_dim
        )));
    }
    let noise = spec.noise.to_model();
    let mut methods = vec![
        MethodErrors { label: "ssm", errors: Vec::new() },
        MethodErrors { label: spec.kind.kf_label(), errors: Vec::new() },
        MethodErrors { label: "naive", errors: Vec::new() },
    ];
    for k in 0..spec.n_systems {
        let mut rng = stream(spec.seed, k as u64);
        // One extra simulated step supplies the final prediction's target.
        let sim_len = spec.t_len + 1;
        let (ys, kf_preds) = match spec.kind {
            ExperimentKind::LinearGaussian | ExperimentKind::LengthGeneralization => {
                let sys =
                    sample_linear_system(&mut rng, spec.state_dim, spec.obs_dim, spec.target_radius)?;
                let traj = simulate(&sys, &noise, sim_len, &mut rng)?;
                let (q, r) = noise.white_equiv();
                let preds = kf_filter_sequence(&sys, q, r, &traj.ys[..spec.t_len])?;
                (traj.ys, preds)
            }
            ExperimentKind::Colored => {
                let sys =
                    sample_linear_system(&mut rng, spec.state_dim, spec.obs_dim, spec.target_radius)?;
                let traj = simulate(&sys, &noise, sim_len, &mut rng)?;
                let (q, r) = noise.white_equiv();
                let preds = kf_filter_sequence(&sys, q, r, &traj.ys[..spec.t_len])?;
                (traj.ys, preds)
            }
            ExperimentKind::Switching => {
                let sys1 =
                    sample_linear_system(&mut rng, spec.state_dim, spec.obs_dim, spec.target_radius)?;
                let sys2 =
                    sample_linear_system(&mut rng, spec.state_dim, spec.obs_dim, spec.target_radius)?;
                let sw = SwitchingSystem::new(sys1, sys2, spec.t_len)?;
                let traj = simulate_switching(&sw, &noise, sim_len, &mut rng)?;
                let (q, r) = noise.white_equiv();
                let preds = kf_mismatched_switching(&sw, q, r, &traj.ys[..spec.t_len])?;
                (traj.ys, preds)
            }
        };
        let inputs = &ys[..spec.t_len];
        let ssm_preds = net.predict_sequence(inputs)?;
        let naive_preds = naive_predictor(inputs);
        for (m, preds) in [&ssm_preds, &kf_preds, &naive_preds].into_iter().enumerate() {
            let errs: Vec<DVector<f64>> =
                (0..spec.t_len).map(|t| &preds[t] - &ys[t + 1]).collect();
            methods[m].errors.push(errs);
        }
    }
    let mut curves = Vec::with_capacity(methods.len());
    for m in methods {
        let rms = rms_curve(&m.errors)?;
        let mean = burn_in_mean(&rms, BURN_IN.min(rms.len().saturating_sub(1)))?;
        curves.push(MethodCurve { method: m.label.to_string(), rms, burn_in_mean: mean });
    }
    Ok(ExperimentResult {
        kind: spec.kind,
        n_systems: spec.n_systems,
        t_len: spec.t_len,
        burn_in: BURN_IN,
        curves,
        train_horizon: spec.train_horizon,
    })
}

/// Renders the curves as CSV, one row per (time, method). Floats use their
/// shortest exact decimal form. Length-generalization results gain a
/// trailing `train_t` column.
pub fn results_csv(result: &ExperimentResult, config_digest: &str) -> String {
    let mut out = String::from("t,method,rms,n_systems,config_digest");
    if result.train_horizon.is_some() {
        out.push_str(",train_t");
    }
    out.push('\n');
    for curve in &result.curves {
        for (t, rms) in curve.rms.iter().enumerate() {
            out.push_str(&format!(
                "{t},{},{rms},{},{config_digest}",
                curve.method, result.n_systems
            ));
            if let Some(h) = result.train_horizon {
                out.push_str(&format!(",{h}"));
            }
            out.push('\n');
        }
    }
    out
}
