//! Random dynamical systems and trajectory generation.
//!
//! States evolve as `x_{t+1} = f(t, x_t, ws[t])` from `x_0 = 0` and are
//! observed as `y_t = g(t, x_t, vs[t])`: the noise stored at index `t` is the
//! one that drives the step out of time `t`. Every generator draws each
//! trajectory's process noise first and its measurement noise second, so a
//! trajectory is a pure function of its system, noise model, length, and rng
//! state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{observability_matrix, spectral_norm, spectral_radius, svd_rank};
use crate::rng::{bounded_gaussian_vector, gaussian_vector};

/// Relative singular-value threshold of the observability rank test.
pub const OBSV_RANK_TOL: f64 = 1e-8;

const SAMPLE_REJECT_LIMIT: usize = 100;

/// Noise entering the state and observation equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// Independent Gaussian process and measurement noise.
    White { sigma_w2: f64, sigma_v2: f64 },
    /// Both noises are length-`window` moving averages of white Gaussians
    /// scaled by `1/sqrt(window)`, so the marginal variances stay
    /// `sigma_eta2` and `sigma_nu2` while the lag-k autocorrelation is
    /// `(window-k)/window`.
    Colored { window: usize, sigma_eta2: f64, sigma_nu2: f64 },
}

impl NoiseModel {
    pub fn white(sigma_w2: f64, sigma_v2: f64) -> Self {
        NoiseModel::White { sigma_w2, sigma_v2 }
    }

    pub fn colored(sigma_eta2: f64, sigma_nu2: f64) -> Self {
        NoiseModel::Colored { window: 15, sigma_eta2, sigma_nu2 }
    }

    /// Marginal variances `(process, measurement)`; this is what a filter
    /// that wrongly assumes whiteness would use.
    pub fn white_equiv(&self) -> (f64, f64) {
        match *self {
            NoiseModel::White { sigma_w2, sigma_v2 } => (sigma_w2, sigma_v2),
            NoiseModel::Colored { sigma_eta2, sigma_nu2, .. } => (sigma_eta2, sigma_nu2),
        }
    }
}

/// A system that can be stepped and observed; `t` is the absolute time index
/// so regime-switching dynamics can depend on it.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn transition(&self, t: usize, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    fn observe(&self, t: usize, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::contract("state matrix must be square"));
        }
        if c.ncols() != a.nrows() {
            return Err(Error::contract(format!(
                "observation matrix has {} columns, state dimension is {}",
                c.ncols(),
                a.nrows()
            )));
        }
        Ok(LinearSystem { a, c })
    }
}

impl Dynamics for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }
    fn transition(&self, _t: usize, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + w
    }
    fn observe(&self, _t: usize, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.c * x + v
    }
}

/// Two linear systems with an abrupt change of regime: times before
/// `switch_time` use the first system's dynamics and observation map, times
/// from `switch_time` on use the second's. The state itself carries across
/// the switch unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingSystem {
    pub sys1: LinearSystem,
    pub sys2: LinearSystem,
    pub switch_time: usize,
}

impl SwitchingSystem {
    /// Places the switch at `horizon / 2`; `horizon` must be even so the two
    /// regimes get equal length.
    pub fn new(sys1: LinearSystem, sys2: LinearSystem, horizon: usize) -> Result<Self> {
        if horizon == 0 || horizon % 2 != 0 {
            return Err(Error::contract(format!(
                "switching horizon must be positive and even, got {horizon}"
            )));
        }
        if sys1.state_dim() != sys2.state_dim() || sys1.obs_dim() != sys2.obs_dim() {
            return Err(Error::contract("switching regimes must share dimensions"));
        }
        Ok(SwitchingSystem { sys1, sys2, switch_time: horizon / 2 })
    }

    fn regime(&self, t: usize) -> &LinearSystem {
        if t < self.switch_time {
            &self.sys1
        } else {
            &self.sys2
        }
    }
}

impl Dynamics for SwitchingSystem {
    fn state_dim(&self) -> usize {
        self.sys1.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.sys1.obs_dim()
    }
    fn transition(&self, t: usize, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.regime(t).transition(t, x, w)
    }
    fn observe(&self, t: usize, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.regime(t).observe(t, x, v)
    }
}

/// Contractive nonlinear dynamics `x_{t+1} = gamma * tanh(x_t) + w` with a
/// linear observation map. Since tanh is 1-Lipschitz and zero at zero, the
/// system contracts at rate `‖gamma‖₂` and maps zero to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSystem {
    pub gamma: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl Dynamics for NonlinearSystem {
    fn state_dim(&self) -> usize {
        self.gamma.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }
    fn transition(&self, _t: usize, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.gamma * x.map(f64::tanh) + w
    }
    fn observe(&self, _t: usize, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.c * x + v
    }
}

/// One simulated run. All four vectors have the trajectory's length; `ws[t]`
/// drives the transition out of time `t` (the final entry is drawn for
/// uniformity but moves no stored state), `vs[t]` corrupts the observation at
/// time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
    pub ws: Vec<DVector<f64>>,
    pub vs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

/// Length-`window` moving average of fresh white Gaussians, scaled by
/// `1/sqrt(window)`. Warm-up draws cover negative time indices so every
/// returned sample averages a full window.
fn moving_average(
    rng: &mut ChaCha8Rng,
    dim: usize,
    t_len: usize,
    window: usize,
    sigma2: f64,
) -> Vec<DVector<f64>> {
    let base: Vec<DVector<f64>> =
        (0..window - 1 + t_len).map(|_| gaussian_vector(rng, dim, sigma2)).collect();
    let scale = 1.0 / (window as f64).sqrt();
    (0..t_len)
        .map(|t| {
            let mut acc = DVector::zeros(dim);
            for sample in &base[t..t + window] {
                acc += sample;
            }
            acc * scale
        })
        .collect()
}

fn draw_noise(
    noise: &NoiseModel,
    state_dim: usize,
    obs_dim: usize,
    t_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    match *noise {
        NoiseModel::White { sigma_w2, sigma_v2 } => {
            let ws = (0..t_len).map(|_| gaussian_vector(rng, state_dim, sigma_w2)).collect();
            let vs = (0..t_len).map(|_| gaussian_vector(rng, obs_dim, sigma_v2)).collect();
            Ok((ws, vs))
        }
        NoiseModel::Colored { window, sigma_eta2, sigma_nu2 } => {
            if window == 0 {
                return Err(Error::contract("colored noise window must be positive"));
            }
            let ws = moving_average(rng, state_dim, t_len, window, sigma_eta2);
            let vs = moving_average(rng, obs_dim, t_len, window, sigma_nu2);
            Ok((ws, vs))
        }
    }
}

/// Runs the system against explicit noise realizations; replaying a stored
/// trajectory's `ws`/`vs` reproduces its states and outputs bit-exactly.
pub fn simulate_with_noise(
    system: &dyn Dynamics,
    ws: &[DVector<f64>],
    vs: &[DVector<f64>],
) -> Result<Trajectory> {
    if ws.len() != vs.len() {
        return Err(Error::contract(format!(
            "noise arrays disagree on length: {} vs {}",
            ws.len(),
            vs.len()
        )));
    }
    let t_len = ws.len();
    if t_len == 0 {
        return Err(Error::contract("trajectory length must be positive"));
    }
    for (t, (w, v)) in ws.iter().zip(vs).enumerate() {
        if w.len() != system.state_dim() || v.len() != system.obs_dim() {
            return Err(Error::contract(format!("noise at time {t} has wrong dimension")));
        }
    }
    let mut xs = Vec::with_capacity(t_len);
    let mut ys = Vec::with_capacity(t_len);
    let mut x = DVector::zeros(system.state_dim());
    for t in 0..t_len {
        ys.push(system.observe(t, &x, &vs[t]));
        xs.push(x.clone());
        if t + 1 < t_len {
            x = system.transition(t, &x, &ws[t]);
        }
    }
    Ok(Trajectory { xs, ys, ws: ws.to_vec(), vs: vs.to_vec() })
}

/// Simulates `t_len` steps from `x_0 = 0` with freshly drawn noise.
pub fn simulate(
    system: &dyn Dynamics,
    noise: &NoiseModel,
    t_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    if t_len == 0 {
        return Err(Error::contract("trajectory length must be positive"));
    }
    let (ws, vs) = draw_noise(noise, system.state_dim(), system.obs_dim(), t_len, rng)?;
    simulate_with_noise(system, &ws, &vs)
}

/// Simulates a regime-switching run. Outputs before the switch are bit-equal
/// to a plain simulation of the first regime from the same rng state.
pub fn simulate_switching(
    sw: &SwitchingSystem,
    noise: &NoiseModel,
    t_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    simulate(sw, noise, t_len, rng)
}

/// Two trajectories sharing every noise sample except at time `tau`, where
/// the second gets an independent redraw of both noises. All samples are
/// drawn by rejection inside the given norm bounds. Outputs agree exactly
/// before `tau` and states agree through `tau`.
pub fn simulate_perturbed_pair(
    system: &dyn Dynamics,
    noise: &NoiseModel,
    t_len: usize,
    tau: usize,
    rng: &mut ChaCha8Rng,
    w_bar: f64,
    v_bar: f64,
) -> Result<(Trajectory, Trajectory)> {
    let (sigma_w2, sigma_v2) = match *noise {
        NoiseModel::White { sigma_w2, sigma_v2 } => (sigma_w2, sigma_v2),
        NoiseModel::Colored { .. } => {
            return Err(Error::contract(
                "perturbed pairs are defined for white noise only",
            ));
        }
    };
    if tau >= t_len {
        return Err(Error::contract(format!(
            "perturbation time {tau} outside trajectory of length {t_len}"
        )));
    }
    const DRAW_LIMIT: usize = 100_000;
    let n = system.state_dim();
    let m = system.obs_dim();
    let mut ws = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        ws.push(bounded_gaussian_vector(rng, n, sigma_w2, w_bar, DRAW_LIMIT)?);
    }
    let mut vs = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        vs.push(bounded_gaussian_vector(rng, m, sigma_v2, v_bar, DRAW_LIMIT)?);
    }
    let w_alt = bounded_gaussian_vector(rng, n, sigma_w2, w_bar, DRAW_LIMIT)?;
    let v_alt = bounded_gaussian_vector(rng, m, sigma_v2, v_bar, DRAW_LIMIT)?;
    let base = simulate_with_noise(system, &ws, &vs)?;
    let mut ws2 = ws;
    let mut vs2 = vs;
    ws2[tau] = w_alt;
    vs2[tau] = v_alt;
    let perturbed = simulate_with_noise(system, &ws2, &vs2)?;
    Ok((base, perturbed))
}

fn is_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let obsv = observability_matrix(a, c);
    svd_rank(&obsv, OBSV_RANK_TOL) == a.nrows()
}

fn sample_linear_system_with(
    rng: &mut ChaCha8Rng,
    target_radius: f64,
    mut candidate: impl FnMut(&mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>),
) -> Result<LinearSystem> {
    if !(target_radius > 0.0 && target_radius < 1.0) {
        return Err(Error::contract(format!(
            "target spectral radius must lie in (0, 1), got {target_radius}"
        )));
    }
    for _ in 0..SAMPLE_REJECT_LIMIT {
        let (a_raw, c) = candidate(rng);
        let radius = spectral_radius(&a_raw)?;
        if radius == 0.0 {
            continue;
        }
        let a = a_raw * (target_radius / radius);
        if is_observable(&a, &c) {
            return Ok(LinearSystem { a, c });
        }
    }
    Err(Error::Generation(format!(
        "no observable system found in {SAMPLE_REJECT_LIMIT} draws; \
         the rank test is likely misconfigured"
    )))
}

/// Draws `A` (n×n) and `C` (m×n) with i.i.d. U[-1, 1] entries, rescales `A`
/// to the target spectral radius, and rejection-resamples until the pair is
/// observable.
pub fn sample_linear_system(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    target_radius: f64,
) -> Result<LinearSystem> {
    if n == 0 || m == 0 {
        return Err(Error::contract("system dimensions must be positive"));
    }
    sample_linear_system_with(rng, target_radius, |rng| {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
        let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..=1.0));
        (a, c)
    })
}

/// Draws a contractive nonlinear system: `gamma` is a U[-1, 1] matrix
/// rescaled to spectral norm 0.9, the observation map a U[-1, 1] matrix.
pub fn sample_nonlinear_system(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Result<NonlinearSystem> {
    if n == 0 || m == 0 {
        return Err(Error::contract("system dimensions must be positive"));
    }
    let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
    let norm = spectral_norm(&raw);
    if norm == 0.0 {
        return Err(Error::Generation("drew an exactly zero state matrix".into()));
    }
    let gamma = raw * (0.9 / norm);
    let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..=1.0));
    Ok(NonlinearSystem { gamma, c })
}

// ── Dataset container ───────────────────────────────────────────────────────

/// Observation sequences of many trajectories in one flat buffer, plus the
/// generation metadata needed to reproduce or audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    /// State dimension of the generating systems (metadata only).
    pub state_dim: usize,
    pub obs_dim: usize,
    pub t_len: usize,
    pub n_systems: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Laid out system-major, then time, then channel.
    pub data: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn new(
        state_dim: usize,
        obs_dim: usize,
        t_len: usize,
        n_systems: usize,
        noise: NoiseModel,
        seed: u64,
    ) -> Self {
        TrajectoryBatch {
            state_dim,
            obs_dim,
            t_len,
            n_systems,
            noise,
            seed,
            data: vec![0.0; n_systems * t_len * obs_dim],
        }
    }

    pub fn set_trajectory(&mut self, k: usize, ys: &[DVector<f64>]) -> Result<()> {
        if k >= self.n_systems {
            return Err(Error::contract(format!("system index {k} out of range")));
        }
        if ys.len() != self.t_len {
            return Err(Error::contract(format!(
                "trajectory has {} steps, batch stores {}",
                ys.len(),
                self.t_len
            )));
        }
        let base = k * self.t_len * self.obs_dim;
        for (t, y) in ys.iter().enumerate() {
            if y.len() != self.obs_dim {
                return Err(Error::contract(format!("output at time {t} has wrong dimension")));
            }
            for (j, value) in y.iter().enumerate() {
                self.data[base + t * self.obs_dim + j] = *value;
            }
        }
        Ok(())
    }

    /// Observation sequence of system `k`.
    pub fn trajectory(&self, k: usize) -> Vec<DVector<f64>> {
        assert!(k < self.n_systems, "system index {k} out of range");
        let base = k * self.t_len * self.obs_dim;
        (0..self.t_len)
            .map(|t| {
                DVector::from_iterator(
                    self.obs_dim,
                    self.data[base + t * self.obs_dim..base + (t + 1) * self.obs_dim]
                        .iter()
                        .copied(),
                )
            })
            .collect()
    }
}

const DATA_MAGIC: &[u8; 8] = b"SSMLABDS";
const DATA_VERSION: u32 = 1;

/// Writes the batch: little-endian header (magic, version, dimensions,
/// trajectory count, noise model, seed, digest, tool version) followed by
/// the observation buffer as f64 little-endian, system-major. Save then load
/// is bit-exact.
pub fn save_dataset(
    path: &Path,
    batch: &TrajectoryBatch,
    digest: &[u8; 32],
    tool_version: &[u8; 16],
) -> Result<()> {
    let mut out: Vec<u8> = Vec::with_capacity(128 + batch.data.len() * 8);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(batch.state_dim as u32).to_le_bytes());
    out.extend_from_slice(&(batch.obs_dim as u32).to_le_bytes());
    out.extend_from_slice(&(batch.t_len as u32).to_le_bytes());
    out.extend_from_slice(&(batch.n_systems as u32).to_le_bytes());
    match batch.noise {
        NoiseModel::White { sigma_w2, sigma_v2 } => {
            out.push(0);
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&sigma_w2.to_le_bytes());
            out.extend_from_slice(&sigma_v2.to_le_bytes());
        }
        NoiseModel::Colored { window, sigma_eta2, sigma_nu2 } => {
            out.push(1);
            out.extend_from_slice(&(window as u32).to_le_bytes());
            out.extend_from_slice(&sigma_eta2.to_le_bytes());
            out.extend_from_slice(&sigma_nu2.to_le_bytes());
        }
    }
    out.extend_from_slice(&batch.seed.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(tool_version);
    let expect = batch.n_systems * batch.t_len * batch.obs_dim;
    if batch.data.len() != expect {
        return Err(Error::contract(format!(
            "batch buffer holds {} values, dimensions imply {expect}",
            batch.data.len()
        )));
    }
    for v in &batch.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(TrajectoryBatch, [u8; 32], [u8; 16])> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |buf: &[u8], pos: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *pos + n > buf.len() {
            return Err(Error::Format("dataset truncated".into()));
        }
        let s = buf[*pos..*pos + n].to_vec();
        *pos += n;
        Ok(s)
    };
    if take(&buf, &mut pos, 8)? != DATA_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let rd_u32 = |buf: &[u8], pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(buf, pos, 4)?.try_into().unwrap()))
    };
    let rd_u64 = |buf: &[u8], pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(buf, pos, 8)?.try_into().unwrap()))
    };
    let rd_f64 = |buf: &[u8], pos: &mut usize| -> Result<f64> {
        Ok(f64::from_le_bytes(take(buf, pos, 8)?.try_into().unwrap()))
    };
    let version = rd_u32(&buf, &mut pos)?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version} not supported (expected {DATA_VERSION})"
        )));
    }
    let state_dim = rd_u32(&buf, &mut pos)? as usize;
    let obs_dim = rd_u32(&buf, &mut pos)? as usize;
    let t_len = rd_u32(&buf, &mut pos)? as usize;
    let n_systems = rd_u32(&buf, &mut pos)? as usize;
    let kind = take(&buf, &mut pos, 1)?[0];
    let window = rd_u32(&buf, &mut pos)? as usize;
    let p1 = rd_f64(&buf, &mut pos)?;
    let p2 = rd_f64(&buf, &mut pos)?;
    let noise = match kind {
        0 => NoiseModel::White { sigma_w2: p1, sigma_v2: p2 },
        1 => NoiseModel::Colored { window, sigma_eta2: p1, sigma_nu2: p2 },
        other => return Err(Error::Format(format!("unknown noise kind {other}"))),
    };
    let seed = rd_u64(&buf, &mut pos)?;
    let mut digest = [0u8; 32];
    digest.copy_from_slice(&take(&buf, &mut pos, 32)?);
    let mut tool_version = [0u8; 16];
    tool_version.copy_from_slice(&take(&buf, &mut pos, 16)?);
    let count = n_systems * t_len * obs_dim;
    if buf.len() - pos != count * 8 {
        return Err(Error::Format(format!(
            "dataset body holds {} bytes, header implies {}",
            buf.len() - pos,
            count * 8
        )));
    }
    let data = buf[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let batch = TrajectoryBatch { state_dim, obs_dim, t_len, n_systems, noise, seed, data };
    Ok((batch, digest, tool_version))
}
