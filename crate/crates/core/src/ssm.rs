//! Selective state-space layer.
//!
//! One layer carries `n` parallel channels, each with an `l`-dimensional
//! internal state. The continuous-time transition matrix is diagonal and
//! strictly negative; the input-dependent step size, input injection, and
//! readout selector are all built from the current input vector:
//!
//! * step size: `delta(y) = softplus(p + q . y)`;
//! * decay: each state entry is multiplied by `exp(delta * a)` (exact
//!   zero-order hold on the diagonal transition);
//! * injection: channel j receives `delta * (W_B y) * y[j]` (first-order hold
//!   on the input path);
//! * readout: channel j emits `(W_C y) . h[:, j]`.
//!
//! Consuming an input advances the state and emits the readout of the
//! advanced state under that same input, so after feeding `y_0..y_{t-1}` the
//! last emitted value equals [`forward_unrolled`] at time `t`: the layer's
//! estimate of the next observation `y_t`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_all_finite_mat, is_all_finite_vec};
use crate::rng::stream;
use rand::Rng;
use rand_distr::StandardNormal;

/// Numerically stable softplus: `max(x, 0) + log1p(exp(-|x|))`.
///
/// Never overflows, and stays strictly positive down to the last subnormal
/// (softplus(-40) is about 4.25e-18, not zero).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Input-dependent discretization step, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize(pub f64);

/// Parameters of one selective state-space layer.
///
/// The diagonal transition is stored through its log-magnitude: entry `k` of
/// the diagonal is `-exp(a_log[k])`, so every entry stays strictly negative
/// no matter what values gradient updates write into `a_log`. `a_log`, like
/// the state, is kept as an `l x n` matrix whose column `j` is the diagonal
/// block of channel `j`; flattened column-major it is the usual length-`n*l`
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    n: usize,
    l: usize,
    pub a_log: DMatrix<f64>,
    pub w_b: DMatrix<f64>,
    pub w_c: DMatrix<f64>,
    pub p: f64,
    pub q: DVector<f64>,
}

/// Hidden state of one layer: column `j` is the state block of channel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub h: DMatrix<f64>,
}

impl SsmState {
    pub fn zeros(params: &SsmParams) -> Self {
        SsmState { h: DMatrix::zeros(params.l, params.n) }
    }
}

impl SsmParams {
    /// Builds a layer, checking every shape.
    ///
    /// The input and output channel counts are passed separately because the
    /// block structure only type-checks when they match; a mismatch is
    /// rejected here rather than silently reinterpreted.
    pub fn new(
        n_in: usize,
        n_out: usize,
        l: usize,
        a_log: DMatrix<f64>,
        w_b: DMatrix<f64>,
        w_c: DMatrix<f64>,
        p: f64,
        q: DVector<f64>,
    ) -> Result<Self> {
        if n_in != n_out {
            return Err(Error::contract(format!(
                "input and output channel counts must match (the injection and readout act \
                 blockwise per output channel on the same input); got n_in={n_in}, n_out={n_out}"
            )));
        }
        let n = n_in;
        if n == 0 || l == 0 {
            return Err(Error::contract("channel count and state dimension must be positive"));
        }
        if a_log.shape() != (l, n) {
            return Err(Error::contract(format!(
                "a_log must be {l}x{n}, got {}x{}",
                a_log.nrows(),
                a_log.ncols()
            )));
        }
        if w_b.shape() != (l, n) || w_c.shape() != (l, n) {
            return Err(Error::contract(format!(
                "w_b and w_c must be {l}x{n}, got {}x{} and {}x{}",
                w_b.nrows(),
                w_b.ncols(),
                w_c.nrows(),
                w_c.ncols()
            )));
        }
        if q.len() != n {
            return Err(Error::contract(format!("q must have length {n}, got {}", q.len())));
        }
        Ok(SsmParams { n, l, a_log, w_b, w_c, p, q })
    }

    /// Seeded default initialization.
    ///
    /// The first diagonal entry of each channel block is pinned to -0.1 (the
    /// slowest mode), the rest are log-uniform in [-1, -0.1]. Input
    /// projection weights are Gaussian with variance 1/n; readout weights
    /// get variance 1/(n*l) because the readout contracts over l state rows
    /// whose slow modes accumulate input for ~1/|a| steps, and without the
    /// extra shrink the first forward pass leaves the output an order of
    /// magnitude larger than its input. `p` starts at zero (step size softplus(0) =
    /// ln 2), and `q` starts near zero so selectivity is learned rather
    /// than imposed.
    pub fn init(n_in: usize, n_out: usize, l: usize, seed: u64, stream_id: u64) -> Result<Self> {
        let mut rng = stream(seed, stream_id);
        let n = n_in;
        let ln_low = 0.1f64.ln();
        let a_log = DMatrix::from_fn(l, n, |k, _| {
            if k == 0 {
                ln_low
            } else {
                rng.random_range(ln_low..=0.0)
            }
        });
        let wscale = (1.0 / n as f64).sqrt();
        let cscale = wscale / (l as f64).sqrt();
        let w_b = DMatrix::from_fn(l, n, |_, _| wscale * rng.sample::<f64, _>(StandardNormal));
        let w_c = DMatrix::from_fn(l, n, |_, _| cscale * rng.sample::<f64, _>(StandardNormal));
        let q = DVector::from_fn(n, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        SsmParams::new(n_in, n_out, l, a_log, w_b, w_c, 0.0, q)
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn state_dim(&self) -> usize {
        self.l
    }

    /// Diagonal of the transition matrix as an `l x n` matrix of strictly
    /// negative entries (up to underflow of `exp` for extreme `a_log`).
    pub fn a_diag(&self) -> DMatrix<f64> {
        self.a_log.map(|v| -v.exp())
    }

    /// Number of trainable scalars: `n*l + 2*l*n + 1 + n`.
    pub fn param_count(&self) -> usize {
        self.n * self.l + 2 * self.l * self.n + 1 + self.n
    }
}

/// Evaluates the step size `softplus(p + q . y)`.
///
/// The result is clamped below by the smallest positive normal float so that
/// it stays strictly positive even when `p + q . y` is so negative that the
/// softplus underflows.
pub fn discretize(params: &SsmParams, y: &DVector<f64>) -> Result<StepSize> {
    if y.len() != params.n {
        return Err(Error::contract(format!(
            "input has length {}, layer expects {}",
            y.len(),
            params.n
        )));
    }
    let z = params.p + params.q.dot(y);
    if !z.is_finite() {
        return Err(Error::numeric("step-size preactivation is not finite"));
    }
    Ok(StepSize(softplus(z).max(f64::MIN_POSITIVE)))
}

/// Advances the state by one input and returns the new state together with
/// the emitted prediction of the next observation.
pub fn step(
    params: &SsmParams,
    state: &SsmState,
    y: &DVector<f64>,
) -> Result<(SsmState, DVector<f64>)> {
    let (l, n) = (params.l, params.n);
    if state.h.shape() != (l, n) {
        return Err(Error::contract(format!(
            "state must be {l}x{n}, got {}x{}",
            state.h.nrows(),
            state.h.ncols()
        )));
    }
    if !is_all_finite_vec(y) {
        return Err(Error::numeric("input vector contains non-finite entries"));
    }
    let StepSize(delta) = discretize(params, y)?;
    let b = &params.w_b * y;
    let c = &params.w_c * y;
    let mut h = state.h.clone();
    for j in 0..n {
        let yj = y[j];
        let mut col = h.column_mut(j);
        for k in 0..l {
            let a = -params.a_log[(k, j)].exp();
            col[k] = (delta * a).exp() * col[k] + delta * b[k] * yj;
        }
    }
    if !is_all_finite_mat(&h) {
        return Err(Error::numeric(
            "state update overflowed (non-finite state after decay/injection)",
        ));
    }
    let mut pred = DVector::zeros(n);
    for j in 0..n {
        pred[j] = c.dot(&h.column(j));
    }
    if !is_all_finite_vec(&pred) {
        return Err(Error::numeric("readout produced non-finite values"));
    }
    Ok((SsmState { h }, pred))
}

/// Literal evaluation of the unrolled prediction at time `t` (1-based):
/// the selector built from `ys[t-1]` applied to the sum over `i < t` of the
/// decayed injections, each decayed by `exp((delta_{i+1} + .. + delta_{t-1})
/// * a)`.
///
/// This recomputes every decay factor from scratch and never touches the
/// recurrent path, so it serves as an independent reference for
/// [`step`]-composition; cost grows with `t * l * n`.
pub fn forward_unrolled(params: &SsmParams, ys: &[DVector<f64>], t: usize) -> Result<DVector<f64>> {
    if t == 0 {
        return Err(Error::contract(
            "unrolled form is defined from t = 1 (it predicts the observation after the prefix)",
        ));
    }
    if t > ys.len() {
        return Err(Error::contract(format!(
            "unrolled form at t={t} needs {t} inputs, got {}",
            ys.len()
        )));
    }
    let (l, n) = (params.l, params.n);
    let mut deltas = Vec::with_capacity(t);
    for y in &ys[..t] {
        deltas.push(discretize(params, y)?.0);
    }
    let a = params.a_diag();
    let mut acc = DMatrix::<f64>::zeros(l, n);
    for i in 0..t {
        let gap: f64 = deltas[i + 1..t].iter().sum();
        let b = &params.w_b * &ys[i];
        for j in 0..n {
            let yij = ys[i][j];
            for k in 0..l {
                acc[(k, j)] += (gap * a[(k, j)]).exp() * deltas[i] * b[k] * yij;
            }
        }
    }
    let c = &params.w_c * &ys[t - 1];
    let mut pred = DVector::zeros(n);
    for j in 0..n {
        pred[j] = c.dot(&acc.column(j));
    }
    Ok(pred)
}

/// Gradient of a scalar loss with respect to every parameter block.
///
/// `a_log` is the gradient in the stored log-magnitude coordinates, i.e. the
/// chain rule through `a = -exp(a_log)` is already applied.
#[derive(Debug, Clone)]
pub struct SsmGrad {
    pub a_log: DMatrix<f64>,
    pub w_b: DMatrix<f64>,
    pub w_c: DMatrix<f64>,
    pub p: f64,
    pub q: DVector<f64>,
}

impl SsmGrad {
    pub fn zeros(params: &SsmParams) -> Self {
        SsmGrad {
            a_log: DMatrix::zeros(params.l, params.n),
            w_b: DMatrix::zeros(params.l, params.n),
            w_c: DMatrix::zeros(params.l, params.n),
            p: 0.0,
            q: DVector::zeros(params.n),
        }
    }
}

/// Per-step intermediates kept by [`forward_seq`] for the backward pass.
pub struct SsmCache {
    a: DMatrix<f64>,
    deltas: Vec<f64>,
    sigs: Vec<f64>,
    bs: Vec<DVector<f64>>,
    cs: Vec<DVector<f64>>,
    es: Vec<DMatrix<f64>>,
    /// States h_0..h_T; entry t is the state before consuming input t.
    hs: Vec<DMatrix<f64>>,
}

/// Runs the layer over a whole input sequence, returning the emitted
/// prediction at every step plus the cache needed by [`backward_seq`].
pub fn forward_seq(
    params: &SsmParams,
    ys: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, SsmCache)> {
    let (l, n) = (params.l, params.n);
    let t_len = ys.len();
    let a = params.a_diag();
    let mut cache = SsmCache {
        a,
        deltas: Vec::with_capacity(t_len),
        sigs: Vec::with_capacity(t_len),
        bs: Vec::with_capacity(t_len),
        cs: Vec::with_capacity(t_len),
        es: Vec::with_capacity(t_len),
        hs: Vec::with_capacity(t_len + 1),
    };
    let mut preds = Vec::with_capacity(t_len);
    let mut h = DMatrix::<f64>::zeros(l, n);
    cache.hs.push(h.clone());
    for (t, y) in ys.iter().enumerate() {
        if y.len() != n {
            return Err(Error::contract(format!(
                "input {t} has length {}, layer expects {n}",
                y.len()
            )));
        }
        let z = params.p + params.q.dot(y);
        if !z.is_finite() {
            return Err(Error::numeric(format!("step-size preactivation not finite at step {t}")));
        }
        let delta = softplus(z).max(f64::MIN_POSITIVE);
        let b = &params.w_b * y;
        let c = &params.w_c * y;
        let mut e = DMatrix::<f64>::zeros(l, n);
        for j in 0..n {
            let yj = y[j];
            for k in 0..l {
                let ek = (delta * cache.a[(k, j)]).exp();
                e[(k, j)] = ek;
                h[(k, j)] = ek * h[(k, j)] + delta * b[k] * yj;
            }
        }
        let mut pred = DVector::zeros(n);
        for j in 0..n {
            pred[j] = c.dot(&h.column(j));
        }
        if !is_all_finite_vec(&pred) || !is_all_finite_mat(&h) {
            return Err(Error::numeric(format!("state or readout overflowed at step {t}")));
        }
        cache.deltas.push(delta);
        cache.sigs.push(sigmoid(z));
        cache.bs.push(b);
        cache.cs.push(c);
        cache.es.push(e);
        cache.hs.push(h.clone());
        preds.push(pred);
    }
    Ok((preds, cache))
}

/// Parameter gradients plus the gradient with respect to each input vector.
pub struct SsmBackward {
    pub grad: SsmGrad,
    pub d_ys: Vec<DVector<f64>>,
}

/// Reverse-mode pass for `loss = sum_t upstream[t] . pred[t]` over the
/// sequence that produced `cache`.
pub fn backward_seq(
    params: &SsmParams,
    ys: &[DVector<f64>],
    cache: &SsmCache,
    upstream: &[DVector<f64>],
) -> Result<SsmBackward> {
    let (l, n) = (params.l, params.n);
    let t_len = ys.len();
    if upstream.len() != t_len {
        return Err(Error::contract(format!(
            "upstream gradient count {} != sequence length {t_len}",
            upstream.len()
        )));
    }
    let mut grad = SsmGrad::zeros(params);
    let mut da = DMatrix::<f64>::zeros(l, n);
    let mut d_ys = vec![DVector::<f64>::zeros(n); t_len];
    let mut lam = DMatrix::<f64>::zeros(l, n);
    for t in (0..t_len).rev() {
        let g = &upstream[t];
        if g.len() != n {
            return Err(Error::contract(format!(
                "upstream gradient {t} has length {}, expected {n}",
                g.len()
            )));
        }
        let y = &ys[t];
        let h_prev = &cache.hs[t];
        let h_next = &cache.hs[t + 1];
        let e = &cache.es[t];
        let b = &cache.bs[t];
        let c = &cache.cs[t];
        let delta = cache.deltas[t];

        // Readout: pred[j] = c . h_next[:, j].
        let dc = h_next * g;
        for j in 0..n {
            lam.column_mut(j).axpy(g[j], c, 1.0);
        }

        // State update: h_next = e (*) h_prev + delta * b * y[j] per channel.
        let mut d_delta = 0.0;
        let mut db = DVector::<f64>::zeros(l);
        let mut dy_direct = DVector::<f64>::zeros(n);
        for j in 0..n {
            let yj = y[j];
            let mut acc_dyj = 0.0;
            for k in 0..l {
                let lm = lam[(k, j)];
                let hp = h_prev[(k, j)];
                let ek = e[(k, j)];
                let ak = cache.a[(k, j)];
                d_delta += lm * (ak * ek * hp + b[k] * yj);
                da[(k, j)] += lm * delta * ek * hp;
                db[k] += lm * delta * yj;
                acc_dyj += lm * b[k];
                lam[(k, j)] = ek * lm;
            }
            dy_direct[j] = delta * acc_dyj;
        }

        grad.w_b.ger(1.0, &db, y, 1.0);
        grad.w_c.ger(1.0, &dc, y, 1.0);
        let d_z = d_delta * cache.sigs[t];
        grad.p += d_z;
        grad.q.axpy(d_z, y, 1.0);

        let mut dy = params.w_b.tr_mul(&db) + params.w_c.tr_mul(&dc) + dy_direct;
        dy.axpy(d_z, &params.q, 1.0);
        d_ys[t] = dy;
    }
    // Chain through the log-magnitude storage of the diagonal.
    grad.a_log = da.zip_map(&cache.a, |d, a| d * a);
    Ok(SsmBackward { grad, d_ys })
}

/// Convenience wrapper: full forward plus backward for
/// `loss = sum_t upstream[t] . pred[t]`, returning only parameter gradients.
pub fn backward(
    params: &SsmParams,
    ys: &[DVector<f64>],
    upstream: &[DVector<f64>],
) -> Result<SsmGrad> {
    let (_, cache) = forward_seq(params, ys)?;
    Ok(backward_seq(params, ys, &cache, upstream)?.grad)
}
