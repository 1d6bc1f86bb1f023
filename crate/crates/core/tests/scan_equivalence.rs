//! The recurrent scan must reproduce the literal unrolled sum at every time
//! index. The unrolled evaluator recomputes each decay factor from scratch,
//! so agreement here certifies the recurrence, the step-size plumbing, and
//! the readout alignment all at once.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use ssmlab_core::rng::stream;
use ssmlab_core::ssm::{forward_seq, forward_unrolled, step, SsmParams, SsmState};

fn random_params(n: usize, l: usize, seed: u64) -> SsmParams {
    let mut rng = stream(seed, 0);
    let a_log = DMatrix::from_fn(l, n, |_, _| rng.random_range(-2.5..=0.5));
    let w_b = DMatrix::from_fn(l, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w_c = DMatrix::from_fn(l, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let p = rng.random_range(-1.0..=1.0);
    let q = DVector::from_fn(n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    SsmParams::new(n, n, l, a_log, w_b, w_c, p, q).unwrap()
}

fn random_inputs(n: usize, t_len: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream(seed, 1);
    (0..t_len)
        .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

#[test]
fn step_composition_matches_unrolled_form() {
    for seed in 0..40u64 {
        let n = 1 + (seed % 4) as usize;
        let l = 1 + (seed % 6) as usize;
        let t_len = 1 + (seed % 64) as usize;
        let params = random_params(n, l, seed);
        let ys = random_inputs(n, t_len, seed);

        let mut state = SsmState::zeros(&params);
        for t in 0..t_len {
            let (next, pred) = step(&params, &state, &ys[t]).unwrap();
            state = next;
            let reference = forward_unrolled(&params, &ys, t + 1).unwrap();
            assert!(
                rel_err(&pred, &reference) <= 1e-10,
                "seed {seed}, t {t}: scan diverged from unrolled form ({pred:?} vs {reference:?})"
            );
        }
    }
}

#[test]
fn sequence_forward_matches_step_composition_exactly() {
    for seed in 100..112u64 {
        let n = 1 + (seed % 3) as usize;
        let l = 2 + (seed % 5) as usize;
        let params = random_params(n, l, seed);
        let ys = random_inputs(n, 24, seed);
        let (preds, _) = forward_seq(&params, &ys).unwrap();
        let mut state = SsmState::zeros(&params);
        for (t, y) in ys.iter().enumerate() {
            let (next, pred) = step(&params, &state, y).unwrap();
            state = next;
            assert_eq!(pred, preds[t], "seed {seed}, t {t}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn scan_equivalence_over_random_shapes(
        seed in 0u64..1_000_000,
        n in 1usize..5,
        l in 1usize..7,
        t_len in 1usize..40,
    ) {
        let params = random_params(n, l, seed);
        let ys = random_inputs(n, t_len, seed.wrapping_add(991));
        let mut state = SsmState::zeros(&params);
        let mut last = DVector::zeros(n);
        for y in &ys {
            let (next, pred) = step(&params, &state, y).unwrap();
            state = next;
            last = pred;
        }
        let reference = forward_unrolled(&params, &ys, t_len).unwrap();
        prop_assert!(rel_err(&last, &reference) <= 1e-10);
    }

    #[test]
    fn zero_inputs_emit_zero_everywhere(
        seed in 0u64..1_000_000,
        n in 1usize..5,
        l in 1usize..7,
        t_len in 1usize..30,
    ) {
        let params = random_params(n, l, seed);
        let ys = vec![DVector::<f64>::zeros(n); t_len];
        let (preds, _) = forward_seq(&params, &ys).unwrap();
        for pred in &preds {
            prop_assert_eq!(pred.norm(), 0.0);
        }
        let reference = forward_unrolled(&params, &ys, t_len).unwrap();
        prop_assert_eq!(reference.norm(), 0.0);
    }
}
