//! Randomized invariants of the data, synthesis, and basis layers.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddctrl::basis::parse_library;
use ddctrl::data::{
    check_rank, collect, DataSet, Experiment, InputSignal, PlantModel, Run, TimeMode,
};
use ddctrl::synth::{attainability_membership, synth_linearized_stabilization, SynthOptions};

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Every collected dataset satisfies X1 = A Z0 + B U0 exactly in
    /// discrete time.
    #[test]
    fn collected_data_satisfies_data_equation(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = parse_library("x1; x2; x1*x2; sin(x1)", 2).unwrap();
        let a = rand_matrix(&mut rng, 2, 4) * 0.4;
        let b = rand_matrix(&mut rng, 2, 1);
        if b.clone().svd(false, false).singular_values.min() < 0.05 {
            return Ok(());
        }
        let plant = PlantModel::new(lib.clone(), a.clone(), b.clone(), TimeMode::Discrete).unwrap();
        let exp = Experiment {
            runs: vec![Run {
                x0: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                input: InputSignal::PseudoRandom { seed, amplitude: 1.0 },
            }],
            samples_per_run: 8,
            step: None,
        };
        let data = collect(&plant, &exp).unwrap();
        let defect = (&data.x1 - &a * &data.z0 - &b * &data.u0).amax();
        prop_assert!(defect <= 1e-9, "data equation defect {}", defect);
    }

    /// Any F of the form X1 G with Z0 G = I is recognized as attainable
    /// with negligible residual, and the returned decoder reproduces it.
    #[test]
    fn attainable_members_have_zero_residual(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = parse_library("x1; x2; x2^3", 2).unwrap();
        let s = lib.len();
        let a = rand_matrix(&mut rng, 2, s);
        let b = rand_matrix(&mut rng, 2, 1);
        let n_samp = s + 3;
        let x0 = rand_matrix(&mut rng, 2, n_samp);
        let u0 = rand_matrix(&mut rng, 1, n_samp);
        let mut z0 = DMatrix::zeros(s, n_samp);
        for j in 0..n_samp {
            let z = lib.evaluate(&DVector::from_column_slice(x0.column(j).as_slice())).unwrap();
            z0.set_column(j, &z);
        }
        let x1 = &a * &z0 + &b * &u0;
        let data = DataSet::from_samples(&lib, u0, x0, x1, TimeMode::Discrete).unwrap();
        if !check_rank(&data, 1e-10).data_equals_model_attainable {
            return Ok(());
        }
        let gram = (&data.z0 * data.z0.transpose()).try_inverse().unwrap();
        let z0_pinv = data.z0.transpose() * gram;
        let g0 = &z0_pinv
            + (DMatrix::<f64>::identity(n_samp, n_samp) - &z0_pinv * &data.z0)
                * rand_matrix(&mut rng, n_samp, s);
        let f = &data.x1 * &g0;
        let (g, residual) = attainability_membership(&f, &data);
        prop_assert!(residual <= 1e-8, "membership residual {}", residual);
        prop_assert!((&data.x1 * &g - &f).amax() <= 1e-7);
        prop_assert!((&data.z0 * &g - DMatrix::<f64>::identity(s, s)).amax() <= 1e-7);
    }

    /// Reordering library entries permutes the rows of the evaluation and
    /// the Jacobian, nothing else.
    #[test]
    fn entry_permutation_permutes_rows(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = parse_library("x1; x2; x1^2; sin(x2); x1*x2", 2).unwrap();
        let rev = parse_library("x1*x2; sin(x2); x1^2; x2; x1", 2).unwrap();
        let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let zf = fwd.evaluate(&x).unwrap();
        let zr = rev.evaluate(&x).unwrap();
        let jf = fwd.jacobian(&x).unwrap();
        let jr = rev.jacobian(&x).unwrap();
        let s = fwd.len();
        for i in 0..s {
            prop_assert!((zf[i] - zr[s - 1 - i]).abs() <= 1e-12);
            for c in 0..2 {
                prop_assert!((jf[(i, c)] - jr[(s - 1 - i, c)]).abs() <= 1e-12);
            }
        }
    }
}

/// Identical inputs produce bitwise-identical synthesis output.
#[test]
fn synthesis_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let lib = parse_library("x1; x2", 2).unwrap();
    let a = rand_matrix(&mut rng, 2, 2) * 1.2;
    let b = rand_matrix(&mut rng, 2, 1);
    let n_samp = 5;
    let x0 = rand_matrix(&mut rng, 2, n_samp);
    let u0 = rand_matrix(&mut rng, 1, n_samp);
    let x1 = &a * &x0 + &b * &u0;
    let data =
        DataSet::from_samples(&lib, u0, x0.clone(), x1, TimeMode::Discrete).unwrap();
    let opts = SynthOptions::default();
    let r1 = synth_linearized_stabilization(&data, &lib, 1.0, &opts).unwrap();
    let r2 = synth_linearized_stabilization(&data, &lib, 1.0, &opts).unwrap();
    assert_eq!(r1.k.as_slice(), r2.k.as_slice());
    assert_eq!(r1.g.as_slice(), r2.g.as_slice());
    assert_eq!(r1.f_star.as_slice(), r2.f_star.as_slice());
}
