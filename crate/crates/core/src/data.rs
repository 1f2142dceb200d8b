//! Ground-truth plant simulation, experiment collection, and the rank
//! diagnostics that decide whether the data matrices can stand in for the
//! model.
//!
//! The plant matrices (A, B) exist only here and in test oracles; the
//! synthesis layer never sees them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::basis::{EvalError, FunctionLibrary};

pub const DIVERGENCE_BOUND: f64 = 1e9;
pub const DEFAULT_RANK_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    Discrete,
    Continuous,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("matrix B must have full column rank")]
    RankDeficientB,
    #[error("A has {got} columns but the library has {expected} entries")]
    BadPlantShape { got: usize, expected: usize },
    #[error("A has {a_rows} rows, B has {b_rows}; both must equal the state dimension {n}")]
    BadRowCount { a_rows: usize, b_rows: usize, n: usize },
    #[error("state norm exceeded {DIVERGENCE_BOUND:e} during simulation (step {step})")]
    Divergence { step: usize },
    #[error("experiment must contain at least one run with at least one sample")]
    EmptyExperiment,
    #[error("step size must be positive in continuous mode")]
    BadStep,
    #[error("derivative estimation needs at least 3 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("basis evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("input vector {index} has length {got}, expected {expected}")]
    BadInput { index: usize, got: usize, expected: usize },
}

/// Ground-truth plant x^+ = A Z(x) + B u with `x^+` a shift (discrete) or a
/// derivative (continuous).
#[derive(Debug, Clone)]
pub struct PlantModel {
    pub library: FunctionLibrary,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub mode: TimeMode,
}

impl PlantModel {
    pub fn new(
        library: FunctionLibrary,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        mode: TimeMode,
    ) -> Result<Self, DataError> {
        let n = library.dim();
        if a.ncols() != library.len() {
            return Err(DataError::BadPlantShape { got: a.ncols(), expected: library.len() });
        }
        if a.nrows() != n || b.nrows() != n {
            return Err(DataError::BadRowCount { a_rows: a.nrows(), b_rows: b.nrows(), n });
        }
        let svals = b.clone().svd(false, false).singular_values;
        let tol = DEFAULT_RANK_RTOL * svals.max() * b.nrows().max(b.ncols()) as f64;
        let rank = svals.iter().filter(|&&s| s > tol.max(f64::MIN_POSITIVE)).count();
        if rank < b.ncols() {
            return Err(DataError::RankDeficientB);
        }
        Ok(PlantModel { library, a, b, mode })
    }

    pub fn state_dim(&self) -> usize {
        self.library.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Right-hand side A Z(x) + B u.
    pub fn vector_field(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DataError> {
        let z = self.library.evaluate(x)?;
        Ok(&self.a * z + &self.b * u)
    }
}

#[derive(Debug, Clone)]
pub enum InputSignal {
    Constant(DVector<f64>),
    /// One input vector per sample; reuses the last entry if shorter than the run.
    Piecewise(Vec<DVector<f64>>),
    PseudoRandom { seed: u64, amplitude: f64 },
}

#[derive(Debug, Clone)]
pub struct Run {
    pub x0: DVector<f64>,
    pub input: InputSignal,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub runs: Vec<Run>,
    pub samples_per_run: usize,
    /// Step size, required in continuous mode.
    pub step: Option<f64>,
}

/// The data matrices of one collection campaign, immutable after assembly.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub u0: DMatrix<f64>,
    pub x0: DMatrix<f64>,
    pub z0: DMatrix<f64>,
    pub x1: DMatrix<f64>,
    pub mode: TimeMode,
    pub library_fingerprint: String,
}

impl DataSet {
    pub fn samples(&self) -> usize {
        self.u0.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.x0.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u0.nrows()
    }

    pub fn basis_dim(&self) -> usize {
        self.z0.nrows()
    }

    /// Assemble a data set from raw samples, recomputing Z0 from the library.
    pub fn from_samples(
        library: &FunctionLibrary,
        u0: DMatrix<f64>,
        x0: DMatrix<f64>,
        x1: DMatrix<f64>,
        mode: TimeMode,
    ) -> Result<Self, DataError> {
        let n_samples = u0.ncols();
        assert_eq!(x0.ncols(), n_samples, "column count mismatch");
        assert_eq!(x1.ncols(), n_samples, "column count mismatch");
        let mut z0 = DMatrix::zeros(library.len(), n_samples);
        for j in 0..n_samples {
            let z = library.evaluate(&DVector::from_column_slice(x0.column(j).as_slice()))?;
            z0.set_column(j, &z);
        }
        Ok(DataSet { u0, x0, z0, x1, mode, library_fingerprint: library.fingerprint() })
    }

    /// The stacked matrix [Z0; U0].
    pub fn stacked(&self) -> DMatrix<f64> {
        let s = self.z0.nrows();
        let m = self.u0.nrows();
        let mut out = DMatrix::zeros(s + m, self.samples());
        out.view_mut((0, 0), (s, self.samples())).copy_from(&self.z0);
        out.view_mut((s, 0), (m, self.samples())).copy_from(&self.u0);
        out
    }
}

/// Simulate the plant from `x0` under the given input sequence.
///
/// Discrete mode iterates the map exactly; continuous mode runs classical
/// RK4 with zero-order-hold input, one input vector per step of size `h`.
/// Returns the trajectory including the initial state (len = inputs.len()+1).
pub fn simulate_plant(
    plant: &PlantModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    h: f64,
) -> Result<Vec<DVector<f64>>, DataError> {
    if plant.mode == TimeMode::Continuous && h <= 0.0 {
        return Err(DataError::BadStep);
    }
    let m = plant.input_dim();
    for (i, u) in inputs.iter().enumerate() {
        if u.len() != m {
            return Err(DataError::BadInput { index: i, got: u.len(), expected: m });
        }
    }
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    let mut x = x0.clone();
    traj.push(x.clone());
    for (k, u) in inputs.iter().enumerate() {
        x = match plant.mode {
            TimeMode::Discrete => plant.vector_field(&x, u)?,
            TimeMode::Continuous => rk4_step(plant, &x, u, h)?,
        };
        if x.norm() > DIVERGENCE_BOUND {
            return Err(DataError::Divergence { step: k + 1 });
        }
        traj.push(x.clone());
    }
    Ok(traj)
}

fn rk4_step(
    plant: &PlantModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>, DataError> {
    let k1 = plant.vector_field(x, u)?;
    let k2 = plant.vector_field(&(x + &k1 * (h / 2.0)), u)?;
    let k3 = plant.vector_field(&(x + &k2 * (h / 2.0)), u)?;
    let k4 = plant.vector_field(&(x + &k3 * h), u)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn materialize_inputs(signal: &InputSignal, m: usize, count: usize) -> Vec<DVector<f64>> {
    match signal {
        InputSignal::Constant(u) => vec![u.clone(); count],
        InputSignal::Piecewise(us) => (0..count)
            .map(|k| us.get(k).or_else(|| us.last()).cloned().unwrap_or_else(|| DVector::zeros(m)))
            .collect(),
        InputSignal::PseudoRandom { seed, amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..count)
                .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-amplitude..=*amplitude)))
                .collect()
        }
    }
}

/// Run the experiment and assemble the data matrices.
///
/// In continuous mode X1 holds the exact vector field at each sample;
/// finite differencing of measured trajectories is the separate
/// [`estimate_derivatives`] ingestion path.
pub fn collect(plant: &PlantModel, exp: &Experiment) -> Result<DataSet, DataError> {
    if exp.runs.is_empty() || exp.samples_per_run == 0 {
        return Err(DataError::EmptyExperiment);
    }
    let h = match plant.mode {
        TimeMode::Continuous => match exp.step {
            Some(h) if h > 0.0 => h,
            _ => return Err(DataError::BadStep),
        },
        TimeMode::Discrete => exp.step.unwrap_or(1.0),
    };
    let n = plant.state_dim();
    let m = plant.input_dim();
    let s = plant.library.len();
    let total = exp.runs.len() * exp.samples_per_run;
    let mut u0 = DMatrix::zeros(m, total);
    let mut x0 = DMatrix::zeros(n, total);
    let mut z0 = DMatrix::zeros(s, total);
    let mut x1 = DMatrix::zeros(n, total);
    let mut col = 0;
    for run in &exp.runs {
        let inputs = materialize_inputs(&run.input, m, exp.samples_per_run);
        let traj = simulate_plant(plant, &run.x0, &inputs, h)?;
        for k in 0..exp.samples_per_run {
            let xk = &traj[k];
            let uk = &inputs[k];
            u0.set_column(col, uk);
            x0.set_column(col, xk);
            z0.set_column(col, &plant.library.evaluate(xk)?);
            match plant.mode {
                TimeMode::Discrete => x1.set_column(col, &traj[k + 1]),
                TimeMode::Continuous => x1.set_column(col, &plant.vector_field(xk, uk)?),
            }
            col += 1;
        }
    }
    Ok(DataSet { u0, x0, z0, x1, mode: plant.mode, library_fingerprint: plant.library.fingerprint() })
}

/// Second-order finite-difference derivative estimates for an externally
/// measured trajectory sampled at uniform step `h` (columns are samples).
pub fn estimate_derivatives(traj: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>, DataError> {
    let t = traj.ncols();
    if t < 3 {
        return Err(DataError::TooFewSamples { got: t });
    }
    if h <= 0.0 {
        return Err(DataError::BadStep);
    }
    let n = traj.nrows();
    let mut d = DMatrix::zeros(n, t);
    for i in 0..n {
        d[(i, 0)] = (-3.0 * traj[(i, 0)] + 4.0 * traj[(i, 1)] - traj[(i, 2)]) / (2.0 * h);
        for k in 1..t - 1 {
            d[(i, k)] = (traj[(i, k + 1)] - traj[(i, k - 1)]) / (2.0 * h);
        }
        d[(i, t - 1)] =
            (3.0 * traj[(i, t - 1)] - 4.0 * traj[(i, t - 2)] + traj[(i, t - 3)]) / (2.0 * h);
    }
    Ok(d)
}

/// Rank and consistency diagnostics on a data set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankReport {
    pub samples: usize,
    pub basis_dim: usize,
    pub input_dim: usize,
    pub rank_z0: usize,
    pub rank_stacked: usize,
    /// Full row rank of Z0: the data-attainable set is nonempty.
    pub attainable_set_nonempty: bool,
    /// Full row rank of [Z0; U0]: the data-attainable set equals the
    /// model-attainable set.
    pub data_equals_model_attainable: bool,
    pub note: String,
}

fn numeric_rank(mat: &DMatrix<f64>, rtol: f64) -> usize {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return 0;
    }
    let svals = mat.clone().svd(false, false).singular_values;
    let smax = svals.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = rtol * smax * mat.nrows().max(mat.ncols()) as f64;
    svals.iter().filter(|&&s| s > tol).count()
}

pub fn check_rank(data: &DataSet, rtol: f64) -> RankReport {
    let rank_z0 = numeric_rank(&data.z0, rtol);
    let stacked = data.stacked();
    let rank_stacked = numeric_rank(&stacked, rtol);
    let z0_full = rank_z0 == data.basis_dim();
    let stack_full = rank_stacked == data.basis_dim() + data.input_dim();
    let note = if stack_full {
        "rich data: the attainability assumption is necessary and sufficient for solvability"
            .to_string()
    } else {
        "rank-deficient [Z0; U0]: data-based attainability remains sufficient but may be \
         conservative"
            .to_string()
    };
    RankReport {
        samples: data.samples(),
        basis_dim: data.basis_dim(),
        input_dim: data.input_dim(),
        rank_z0,
        rank_stacked,
        attainable_set_nonempty: z0_full,
        data_equals_model_attainable: stack_full,
        note,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::parse_library;
    use approx::assert_abs_diff_eq;

    fn scalar_discrete_plant() -> PlantModel {
        // x+ = 2x + u
        let lib = parse_library("x1", 1).unwrap();
        PlantModel::new(
            lib,
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            TimeMode::Discrete,
        )
        .unwrap()
    }

    #[test]
    fn rejects_rank_deficient_b() {
        let lib = parse_library("x1; x2", 2).unwrap();
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            PlantModel::new(lib, a, b, TimeMode::Discrete),
            Err(DataError::RankDeficientB)
        ));
    }

    #[test]
    fn continuous_simulation_matches_closed_form() {
        // xdot = -x, x0 = 1, u = 0: one RK4 step of size 0.1 vs e^{-0.1}.
        let lib = parse_library("x1", 1).unwrap();
        let plant = PlantModel::new(
            lib,
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            TimeMode::Continuous,
        )
        .unwrap();
        let traj = simulate_plant(
            &plant,
            &DVector::from_vec(vec![1.0]),
            &[DVector::zeros(1)],
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(traj[1][0], (-0.1f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn discrete_simulation_iterates_exactly() {
        let plant = scalar_discrete_plant();
        let traj = simulate_plant(
            &plant,
            &DVector::from_vec(vec![1.0]),
            &[DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])],
            1.0,
        )
        .unwrap();
        let states: Vec<f64> = traj.iter().map(|x| x[0]).collect();
        assert_eq!(states, vec![1.0, 2.0, 5.0]);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let plant = scalar_discrete_plant();
        let traj = simulate_plant(&plant, &DVector::from_vec(vec![3.0]), &[], 1.0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0][0], 3.0);
    }

    #[test]
    fn divergence_guard_fires() {
        let plant = scalar_discrete_plant();
        let inputs = vec![DVector::zeros(1); 64];
        let err = simulate_plant(&plant, &DVector::from_vec(vec![1.0]), &inputs, 1.0).unwrap_err();
        assert!(matches!(err, DataError::Divergence { .. }));
    }

    #[test]
    fn collect_assembles_expected_columns() {
        let plant = scalar_discrete_plant();
        let exp = Experiment {
            runs: vec![
                Run {
                    x0: DVector::from_vec(vec![1.0]),
                    input: InputSignal::Constant(DVector::from_vec(vec![0.0])),
                },
                Run {
                    x0: DVector::from_vec(vec![2.0]),
                    input: InputSignal::Constant(DVector::from_vec(vec![1.0])),
                },
            ],
            samples_per_run: 1,
            step: None,
        };
        let data = collect(&plant, &exp).unwrap();
        assert_eq!(data.u0.as_slice(), &[0.0, 1.0]);
        assert_eq!(data.z0.as_slice(), &[1.0, 2.0]);
        assert_eq!(data.x1.as_slice(), &[2.0, 5.0]);
    }

    #[test]
    fn collect_continuous_records_exact_derivatives() {
        // xdot = x + u at samples (x,u) = (1,0) and (1,1) -> X1 = [1 2].
        let lib = parse_library("x1", 1).unwrap();
        let plant = PlantModel::new(
            lib,
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            TimeMode::Continuous,
        )
        .unwrap();
        let exp = Experiment {
            runs: vec![
                Run {
                    x0: DVector::from_vec(vec![1.0]),
                    input: InputSignal::Constant(DVector::from_vec(vec![0.0])),
                },
                Run {
                    x0: DVector::from_vec(vec![1.0]),
                    input: InputSignal::Constant(DVector::from_vec(vec![1.0])),
                },
            ],
            samples_per_run: 1,
            step: Some(0.1),
        };
        let data = collect(&plant, &exp).unwrap();
        assert_eq!(data.x1.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn collect_rejects_empty_experiment() {
        let plant = scalar_discrete_plant();
        let exp = Experiment { runs: vec![], samples_per_run: 1, step: None };
        assert!(matches!(collect(&plant, &exp), Err(DataError::EmptyExperiment)));
    }

    #[test]
    fn collect_round_trip_satisfies_data_equation() {
        let lib = parse_library("x1; x2; x2^3; sin(x1)", 2).unwrap();
        let a = DMatrix::from_row_slice(2, 4, &[0.4, 1.0, 0.0, 0.2, -0.5, 0.8, -0.1, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let plant = PlantModel::new(lib, a.clone(), b.clone(), TimeMode::Discrete).unwrap();
        let exp = Experiment {
            runs: vec![Run {
                x0: DVector::from_vec(vec![0.3, -0.2]),
                input: InputSignal::PseudoRandom { seed: 11, amplitude: 1.0 },
            }],
            samples_per_run: 12,
            step: None,
        };
        let data = collect(&plant, &exp).unwrap();
        let defect = &data.x1 - &a * &data.z0 - &b * &data.u0;
        assert!(defect.amax() <= 1e-10, "defect {}", defect.amax());
    }

    #[test]
    fn derivative_estimates_exact_for_quadratics() {
        let h = 0.1;
        let t = 11;
        let traj = DMatrix::from_fn(1, t, |_, k| {
            let tk = k as f64 * h;
            tk * tk
        });
        let d = estimate_derivatives(&traj, h).unwrap();
        for k in 0..t {
            let tk = k as f64 * h;
            assert_abs_diff_eq!(d[(0, k)], 2.0 * tk, epsilon = 1e-10);
        }
    }

    #[test]
    fn derivative_estimates_zero_for_constants() {
        let traj = DMatrix::from_element(2, 5, 3.7);
        let d = estimate_derivatives(&traj, 0.2).unwrap();
        assert!(d.amax() <= 1e-12);
    }

    #[test]
    fn derivative_estimation_needs_three_samples() {
        let traj = DMatrix::zeros(1, 2);
        assert!(matches!(
            estimate_derivatives(&traj, 0.1),
            Err(DataError::TooFewSamples { got: 2 })
        ));
    }

    #[test]
    fn rank_report_full_rank_case() {
        let lib = parse_library("x1", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[2.0, 5.0]),
            TimeMode::Discrete,
        )
        .unwrap();
        let report = check_rank(&data, DEFAULT_RANK_RTOL);
        assert_eq!(report.rank_z0, 1);
        assert_eq!(report.rank_stacked, 2);
        assert!(report.attainable_set_nonempty);
        assert!(report.data_equals_model_attainable);
    }

    #[test]
    fn rank_report_zero_z0() {
        let lib = parse_library("x1 - x1", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            TimeMode::Discrete,
        )
        .unwrap();
        let report = check_rank(&data, DEFAULT_RANK_RTOL);
        assert!(!report.attainable_set_nonempty);
    }

    #[test]
    fn rank_report_duplicated_rows() {
        // U0 duplicating Z0 collapses the stacked rank.
        let lib = parse_library("x1", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[3.0, 6.0]),
            TimeMode::Discrete,
        )
        .unwrap();
        let report = check_rank(&data, DEFAULT_RANK_RTOL);
        assert!(report.attainable_set_nonempty);
        assert!(!report.data_equals_model_attainable);
    }
}
