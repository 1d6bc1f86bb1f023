//! Simulator properties checked against closed forms and large-sample
//! statistics: scalar perturbation decay, the moving-average noise design,
//! regime-switch prefix equality, nonlinear contraction, and dataset files.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use ssmlab_core::rng::stream;
use ssmlab_core::systems::{
    load_dataset, sample_linear_system, sample_nonlinear_system, save_dataset, simulate,
    simulate_perturbed_pair, simulate_switching, Dynamics, LinearSystem, NoiseModel,
    SwitchingSystem, TrajectoryBatch,
};
use ssmlab_core::Error;

fn scalar_system(a: f64, c: f64) -> LinearSystem {
    LinearSystem::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, c)).unwrap()
}

#[test]
fn scalar_perturbation_decays_by_the_closed_form() {
    // One redrawn process-noise sample at time tau shifts later outputs by
    // exactly c * a^(t - tau - 1) * delta_w; powers come from repeated
    // multiplication so the oracle shares no code with the simulator.
    let a = 0.9;
    let sys = scalar_system(a, 1.0);
    let noise = NoiseModel::white(0.02, 0.01);
    let (t_len, tau) = (36, 10);
    let mut rng = stream(301, 0);
    let (base, alt) =
        simulate_perturbed_pair(&sys, &noise, t_len, tau, &mut rng, 0.6, 0.5).unwrap();
    let delta_w = alt.ws[tau][0] - base.ws[tau][0];
    assert!(delta_w.abs() > 1e-3, "redraw too close to the original for a relative check");
    for t in 0..tau {
        assert_eq!(base.ys[t], alt.ys[t], "outputs diverged before the perturbation");
    }
    let mut factor = 1.0;
    for t in tau + 1..t_len {
        let observed = alt.ys[t][0] - base.ys[t][0];
        let expected = factor * delta_w;
        let rel = (observed - expected).abs() / expected.abs();
        assert!(rel <= 1e-9, "time {t}: observed {observed:.17e} expected {expected:.17e}");
        factor *= a;
    }
}

fn check_moving_average_series(series: &[f64], window: usize, sigma2: f64, label: &str) {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(
        (var - sigma2).abs() <= 0.02 * sigma2.max(1.0),
        "{label}: marginal variance {var} expected {sigma2}"
    );
    for k in [1usize, 5, 10, 14, 15, 20] {
        let mut cov = 0.0;
        for t in 0..n - k {
            cov += (series[t] - mean) * (series[t + k] - mean);
        }
        cov /= (n - k) as f64;
        let rho = cov / var;
        let expected =
            if k < window { (window - k) as f64 / window as f64 } else { 0.0 };
        assert!(
            (rho - expected).abs() <= 0.02,
            "{label}: lag {k} autocorrelation {rho} expected {expected}"
        );
    }
}

#[test]
fn moving_average_noise_has_the_designed_statistics() {
    let sys = scalar_system(0.5, 1.0);
    let noise = NoiseModel::colored(1.0, 0.1);
    let window = match noise {
        NoiseModel::Colored { window, .. } => window,
        _ => unreachable!(),
    };
    let n = 200_000;
    let mut rng = stream(302, 0);
    let traj = simulate(&sys, &noise, n, &mut rng).unwrap();
    let w: Vec<f64> = traj.ws.iter().map(|v| v[0]).collect();
    let v: Vec<f64> = traj.vs.iter().map(|v| v[0]).collect();
    check_moving_average_series(&w, window, 1.0, "process noise");
    check_moving_average_series(&v, window, 0.1, "measurement noise");
}

#[test]
fn switching_runs_match_the_first_regime_until_the_switch() {
    let mut rng = stream(303, 0);
    let sys1 = sample_linear_system(&mut rng, 3, 2, 0.9).unwrap();
    let sys2 = sample_linear_system(&mut rng, 3, 2, 0.9).unwrap();
    let sw = SwitchingSystem::new(sys1.clone(), sys2, 40).unwrap();
    let noise = NoiseModel::white(0.1, 0.1);
    let mut rng_a = stream(304, 0);
    let run_sw = simulate_switching(&sw, &noise, 40, &mut rng_a).unwrap();
    let mut rng_b = stream(304, 0);
    let run_1 = simulate(&sys1, &noise, 40, &mut rng_b).unwrap();
    assert_eq!(sw.switch_time, 20);
    for t in 0..sw.switch_time {
        assert_eq!(run_sw.ys[t], run_1.ys[t], "output {t} differs before the switch");
        assert_eq!(run_sw.xs[t], run_1.xs[t], "state {t} differs before the switch");
    }
    // The state carries across unchanged; the first divergent output is the
    // one read through the second regime's map.
    assert_eq!(run_sw.xs[sw.switch_time], run_1.xs[sw.switch_time]);
    assert_ne!(run_sw.ys[sw.switch_time], run_1.ys[sw.switch_time]);
}

#[test]
fn contractive_dynamics_forget_their_start() {
    for seed in 0..100u64 {
        let mut rng = stream(305, seed);
        let sys = sample_nonlinear_system(&mut rng, 3, 2).unwrap();
        let x_a = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x_b = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d0 = (&x_a - &x_b).norm();
        let mut a = x_a;
        let mut b = x_b;
        let mut envelope = d0;
        for t in 0..20 {
            let w = DVector::from_fn(3, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            a = sys.transition(t, &a, &w);
            b = sys.transition(t, &b, &w);
            envelope *= 0.9;
            let gap = (&a - &b).norm();
            assert!(
                gap <= envelope * (1.0 + 1e-9),
                "seed {seed} step {t}: gap {gap} above envelope {envelope}"
            );
        }
    }
}

#[test]
fn dataset_files_roundtrip_bit_exactly() {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join("batch.ds");
    let mut rng = stream(306, 0);
    let mut batch = TrajectoryBatch::new(2, 3, 10, 4, NoiseModel::colored(0.5, 0.25), 99);
    for k in 0..4 {
        let ys: Vec<DVector<f64>> = (0..10)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        batch.set_trajectory(k, &ys).unwrap();
    }
    let digest = [13u8; 32];
    let tool = *b"0.1.0\0\0\0\0\0\0\0\0\0\0\0";
    save_dataset(&path, &batch, &digest, &tool).unwrap();
    let (loaded, got_digest, got_tool) = load_dataset(&path).unwrap();
    assert_eq!(loaded, batch);
    assert_eq!(got_digest, digest);
    assert_eq!(got_tool, tool);

    let good = std::fs::read(&path).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    let p1 = dir.join("bad_magic.ds");
    std::fs::write(&p1, &bad_magic).unwrap();
    assert!(matches!(load_dataset(&p1), Err(Error::Format(_))));

    let p2 = dir.join("truncated.ds");
    std::fs::write(&p2, &good[..good.len() - 5]).unwrap();
    assert!(matches!(load_dataset(&p2), Err(Error::Format(_))));
}
