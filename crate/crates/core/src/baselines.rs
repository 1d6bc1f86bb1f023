//! Kalman-filter and naive baselines.
//!
//! The filter tracks the one-step-ahead prior: after consuming `y_t` it holds
//! the mean and covariance of `x_{t+1}` given `y_0..y_t` and emits the
//! corresponding output prediction `C x̂_{t+1|t}`, the same alignment the
//! network uses. Noise covariances are isotropic, `Q = q I` and `R = r I`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_all_finite_mat, is_all_finite_vec, symmetrize};
use crate::systems::{LinearSystem, SwitchingSystem};

/// One-step-ahead prior belief: `x` is `x̂_{t|t-1}`, `p` is `P_{t|t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// Initial prior: zero mean, identity covariance.
pub fn kf_init(state_dim: usize) -> KalmanState {
    KalmanState { x: DVector::zeros(state_dim), p: DMatrix::identity(state_dim, state_dim) }
}

/// Consumes one observation: measurement update with the Joseph-form
/// covariance, then time update, returning the advanced prior and the
/// prediction of the next output.
pub fn kf_predict_next_output(
    sys: &LinearSystem,
    q: f64,
    r: f64,
    state: &KalmanState,
    y: &DVector<f64>,
) -> Result<(KalmanState, DVector<f64>)> {
    let n = sys.a.nrows();
    let m = sys.c.nrows();
    if state.x.len() != n || state.p.nrows() != n {
        return Err(Error::contract("filter state does not match system dimensions"));
    }
    if y.len() != m {
        return Err(Error::contract(format!(
            "observation has dimension {}, system emits {m}",
            y.len()
        )));
    }
    if !is_all_finite_vec(y) || !is_all_finite_vec(&state.x) || !is_all_finite_mat(&state.p) {
        return Err(Error::numeric("filter input is not finite"));
    }
    let cp = &sys.c * &state.p;
    let mut s = &cp * sys.c.transpose();
    for i in 0..m {
        s[(i, i)] += r;
    }
    symmetrize(&mut s);
    let chol = Cholesky::new(s).ok_or_else(|| {
        Error::numeric("innovation covariance is not positive definite")
    })?;
    // Gain via the SPD solve: S Kᵀ = C P gives Kᵀ, so K = P Cᵀ S⁻¹.
    let k_t = chol.solve(&cp);
    let k = k_t.transpose();
    let innov = y - &sys.c * &state.x;
    let x_post = &state.x + &k * innov;
    let mut ikc = DMatrix::identity(n, n);
    ikc -= &k * &sys.c;
    let mut p_post = &ikc * &state.p * ikc.transpose() + &k * k.transpose() * r;
    symmetrize(&mut p_post);
    let x_next = &sys.a * x_post;
    let mut p_next = &sys.a * p_post * sys.a.transpose();
    for i in 0..n {
        p_next[(i, i)] += q;
    }
    symmetrize(&mut p_next);
    let pred = &sys.c * &x_next;
    Ok((KalmanState { x: x_next, p: p_next }, pred))
}

/// Filters a whole observation sequence; element `t` of the result predicts
/// `y_{t+1}` from `y_0..y_t`.
pub fn kf_filter_sequence(
    sys: &LinearSystem,
    q: f64,
    r: f64,
    ys: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut state = kf_init(sys.a.nrows());
    let mut preds = Vec::with_capacity(ys.len());
    for y in ys {
        let (next, pred) = kf_predict_next_output(sys, q, r, &state, y)?;
        state = next;
        preds.push(pred);
    }
    Ok(preds)
}

/// The filter a regime change leaves behind: it keeps using the first
/// regime's model for the whole sequence.
pub fn kf_mismatched_switching(
    sw: &SwitchingSystem,
    q: f64,
    r: f64,
    ys: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    kf_filter_sequence(&sw.sys1, q, r, ys)
}

/// Predicts that nothing changes: element `t` is `ys[t]` itself.
pub fn naive_predictor(ys: &[DVector<f64>]) -> Vec<DVector<f64>> {
    ys.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::systems::{sample_linear_system, simulate, NoiseModel};

    fn scalar_system(a: f64) -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn scalar_prior_variance_reaches_the_riccati_root() {
        let (a, q, r) = (0.9, 0.01, 0.01);
        let sys = scalar_system(a);
        let mut state = kf_init(1);
        let y = DVector::from_element(1, 0.3);
        for _ in 0..500 {
            let (next, _) = kf_predict_next_output(&sys, q, r, &state, &y).unwrap();
            state = next;
        }
        // Steady state solves p^2 + (r - a^2 r - q) p - q r = 0.
        let b = r - a * a * r - q;
        let p_star = (-b + (b * b + 4.0 * q * r).sqrt()) / 2.0;
        assert!((state.p[(0, 0)] - p_star).abs() <= 1e-12, "p = {}", state.p[(0, 0)]);
    }

    #[test]
    fn covariance_stays_symmetric_and_psd() {
        let mut rng = stream(21, 0);
        let sys = sample_linear_system(&mut rng, 5, 3, 0.95).unwrap();
        let traj = simulate(&sys, &NoiseModel::white(0.01, 0.01), 60, &mut rng).unwrap();
        let mut state = kf_init(5);
        for y in &traj.ys {
            let (next, _) = kf_predict_next_output(&sys, 0.01, 0.01, &state, y).unwrap();
            state = next;
            assert_eq!(state.p, state.p.transpose());
            let eigs = state.p.clone().symmetric_eigenvalues();
            assert!(eigs.iter().all(|&e| e >= -1e-12), "eigenvalues {eigs:?}");
        }
    }

    #[test]
    fn joseph_update_matches_the_short_form() {
        let mut rng = stream(22, 0);
        let sys = sample_linear_system(&mut rng, 4, 2, 0.95).unwrap();
        let traj = simulate(&sys, &NoiseModel::white(0.01, 0.01), 10, &mut rng).unwrap();
        let (q, r) = (0.01, 0.01);
        let mut state = kf_init(4);
        for y in &traj.ys {
            // Reference update computed with plain inversion and the
            // non-Joseph covariance form.
            let s = &sys.c * &state.p * sys.c.transpose() + DMatrix::identity(2, 2) * r;
            let k = &state.p * sys.c.transpose() * s.try_inverse().unwrap();
            let p_post = (DMatrix::identity(4, 4) - &k * &sys.c) * &state.p;
            let p_next_ref = &sys.a * p_post * sys.a.transpose() + DMatrix::identity(4, 4) * q;

            let (next, _) = kf_predict_next_output(&sys, q, r, &state, y).unwrap();
            let diff = (&next.p - &p_next_ref).norm() / p_next_ref.norm();
            assert!(diff <= 1e-10, "covariance routes disagree by {diff}");
            state = next;
        }
    }

    #[test]
    fn filter_beats_the_naive_predictor_on_average() {
        let noise = NoiseModel::white(0.01, 0.01);
        let mut kf_err = 0.0;
        let mut naive_err = 0.0;
        for k in 0..30 {
            let sys = sample_linear_system(&mut stream(23, k), 5, 3, 0.95).unwrap();
            let traj = simulate(&sys, &noise, 80, &mut stream(24, k)).unwrap();
            let kf = kf_filter_sequence(&sys, 0.01, 0.01, &traj.ys).unwrap();
            let naive = naive_predictor(&traj.ys);
            for t in 10..79 {
                kf_err += (&kf[t] - &traj.ys[t + 1]).norm_squared();
                naive_err += (&naive[t] - &traj.ys[t + 1]).norm_squared();
            }
        }
        assert!(kf_err < naive_err, "kf {kf_err} vs naive {naive_err}");
    }

    #[test]
    fn mismatched_switching_filter_ignores_the_second_regime() {
        let sys1 = sample_linear_system(&mut stream(25, 0), 4, 2, 0.95).unwrap();
        let sys2 = sample_linear_system(&mut stream(25, 1), 4, 2, 0.95).unwrap();
        let sw = SwitchingSystem::new(sys1.clone(), sys2, 40).unwrap();
        let traj =
            crate::systems::simulate_switching(&sw, &NoiseModel::white(0.01, 0.01), 40, &mut stream(25, 2))
                .unwrap();
        let a = kf_mismatched_switching(&sw, 0.01, 0.01, &traj.ys).unwrap();
        let b = kf_filter_sequence(&sys1, 0.01, 0.01, &traj.ys).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn naive_predictor_repeats_the_input() {
        let ys = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])];
        let preds = naive_predictor(&ys);
        assert_eq!(preds, ys);
    }

    #[test]
    fn zero_innovation_covariance_is_an_error() {
        let sys = scalar_system(0.9);
        let state = KalmanState {
            x: DVector::zeros(1),
            p: DMatrix::from_element(1, 1, 0.0),
        };
        let y = DVector::from_element(1, 0.1);
        let res = kf_predict_next_output(&sys, 0.0, 0.0, &state, &y);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
