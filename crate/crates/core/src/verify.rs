//! Independent validation of synthesized controllers: closed-loop
//! simulation, spectral checks, sampled Lyapunov decrease, storage-function
//! quadrature, trajectory-level dissipation, and certificate re-checking.
//!
//! Everything here works from the data-certified closed loop `F*` and the
//! certificate; the true plant matrices never enter.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::basis::{EvalError, FunctionLibrary};
use crate::data::{DataError, DataSet, TimeMode, DIVERGENCE_BOUND};
use crate::synth::{Certificate, DesignObjective, SynthOptions, SynthesisResult};

/// Closed-loop dynamics `x+ = F* Z(x) + F_r* r`, built purely from the
/// synthesized matrices.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub f_star: DMatrix<f64>,
    pub f_r_star: Option<DMatrix<f64>>,
    pub library: FunctionLibrary,
    pub mode: TimeMode,
}

impl ClosedLoop {
    pub fn from_result(result: &SynthesisResult, library: FunctionLibrary, mode: TimeMode) -> Self {
        ClosedLoop {
            f_star: result.f_star.clone(),
            f_r_star: result.f_r_star.clone(),
            library,
            mode,
        }
    }

    fn field(&self, x: &DVector<f64>, r: Option<&DVector<f64>>) -> Result<DVector<f64>, EvalError> {
        let z = self.library.evaluate(x)?;
        let mut out = &self.f_star * z;
        if let (Some(fr), Some(r)) = (&self.f_r_star, r) {
            out += fr * r;
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("storage quadrature did not converge to the requested tolerance")]
    QuadratureDivergence,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    /// Worst-case slack; nonnegative means the check holds with room.
    pub margin: f64,
    pub samples: usize,
}

impl CheckRecord {
    fn new(name: &str, pass: bool, margin: f64, samples: usize) -> Self {
        CheckRecord { name: name.to_string(), pass, margin, samples }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckRecord>,
    pub seed: u64,
    pub eq_tol: f64,
    pub eig_tol: f64,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Simulate the closed loop: exact iteration in discrete time, RK4 with
/// zero-order-hold reference input in continuous time. The returned
/// trajectory includes the initial state.
pub fn simulate_closed_loop(
    cl: &ClosedLoop,
    x0: &DVector<f64>,
    r: Option<&[DVector<f64>]>,
    steps: usize,
    h: f64,
) -> Result<Vec<DVector<f64>>, VerifyError> {
    if let Some(r) = r {
        assert!(r.len() >= steps, "reference signal shorter than the horizon");
    }
    let mut traj = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    traj.push(x.clone());
    for k in 0..steps {
        let rk = r.map(|r| &r[k]);
        x = match cl.mode {
            TimeMode::Discrete => cl.field(&x, rk)?,
            TimeMode::Continuous => {
                let f = |x: &DVector<f64>| cl.field(x, rk);
                let k1 = f(&x)?;
                let k2 = f(&(&x + &k1 * (h / 2.0)))?;
                let k3 = f(&(&x + &k2 * (h / 2.0)))?;
                let k4 = f(&(&x + &k3 * h))?;
                &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        };
        if x.norm() > DIVERGENCE_BOUND {
            return Err(VerifyError::Data(DataError::Divergence { step: k + 1 }));
        }
        traj.push(x.clone());
    }
    Ok(traj)
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "spectral radius of a non-square matrix");
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Continuous-time variant: largest real part of an eigenvalue.
pub fn max_real_part(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "eigenvalues of a non-square matrix");
    m.complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Uniform samples from the closed ball of the given radius.
fn sample_ball(n: usize, radius: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        if x.norm() <= 1.0 {
            out.push(x * radius);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SampleSpec {
    pub samples: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec { samples: 10_000, radius: 1.0, seed: 0 }
    }
}

/// Worst asymmetry of `M Z'(x)` over sampled points; zero for class-M
/// candidates.
pub fn class_m_defect(
    lib: &FunctionLibrary,
    m: &DMatrix<f64>,
    samples: usize,
    radius: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for x in sample_ball(lib.dim(), radius, samples, &mut rng) {
        let jac = lib.jacobian(&x)?;
        let mj = m * jac;
        worst = worst.max((&mj - mj.transpose()).amax());
    }
    Ok(worst)
}

/// Sampled membership check for class M (`M Z(x)` is a gradient field,
/// equivalently `M Z'(x)` symmetric everywhere); explicitly non-exhaustive.
pub fn class_m_membership(
    lib: &FunctionLibrary,
    m: &DMatrix<f64>,
    spec: &SampleSpec,
    tol: f64,
) -> Result<CheckRecord, EvalError> {
    let samples = spec.samples.max(1000);
    let defect = class_m_defect(lib, m, samples, spec.radius, spec.seed)?;
    Ok(CheckRecord::new("class_m_membership", defect <= tol, tol - defect, samples))
}

/// Nodes and weights of `n`-point Gauss-Legendre quadrature on [-1, 1],
/// computed by Newton iteration on the Legendre polynomial.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Three-term recurrence for P_n(t) and P_{n-1}(t).
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let dp = (n as f64) * (t * p1 - p0) / (t * t - 1.0);
            let dt = p1 / dp;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, t);
        for k in 2..=n {
            let k = k as f64;
            let p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        let dp = (n as f64) * (t * p1 - p0) / (t * t - 1.0);
        out.push((t, 2.0 / ((1.0 - t * t) * dp * dp)));
    }
    out
}

fn gl_integrate(f: &mut impl FnMut(f64) -> Result<f64, EvalError>, a: f64, b: f64, rule: &[(f64, f64)]) -> Result<f64, EvalError> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut total = 0.0;
    for &(t, w) in rule {
        total += w * f(mid + half * t)?;
    }
    Ok(total * half)
}

/// Storage function `S(x) = integral_0^1 x^T M Z(t x) dt`, evaluated with
/// adaptive Gauss-Legendre quadrature to absolute tolerance 1e-10.
pub fn storage_eval(
    lib: &FunctionLibrary,
    m: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<f64, VerifyError> {
    let rule = gauss_legendre(12);
    let mut g = |t: f64| -> Result<f64, EvalError> {
        let z = lib.evaluate(&(x * t))?;
        Ok(x.dot(&(m * z)))
    };
    // Interval stack with per-interval error estimate by bisection.
    let mut total = 0.0;
    let mut stack = vec![(0.0_f64, 1.0_f64, 0_u32)];
    while let Some((a, b, depth)) = stack.pop() {
        let whole = gl_integrate(&mut g, a, b, &rule)?;
        let mid = 0.5 * (a + b);
        let left = gl_integrate(&mut g, a, mid, &rule)?;
        let right = gl_integrate(&mut g, mid, b, &rule)?;
        let err = (whole - left - right).abs();
        if err < 1e-12 * (b - a).max(1e-3) || err < 1e-14 {
            total += left + right;
        } else {
            if depth >= 40 {
                return Err(VerifyError::QuadratureDivergence);
            }
            stack.push((a, mid, depth + 1));
            stack.push((mid, b, depth + 1));
        }
    }
    Ok(total)
}

/// Sampled decrease check for a quadratic Lyapunov certificate.
///
/// Discrete closed loops use `V(x) = x^T P^{-1} x` (the variable `P` of the
/// synthesis LMIs certifies `F P F^T < P`, i.e. decrease of `x^T P^{-1} x`)
/// and check `rho V(F* Z(x)) <= V(x)` over the sample ball. Continuous
/// diagonal certificates check `phi(x)^T D M phi(x) <= 0` with
/// `M = F*[:, 1..n]`.
pub fn lyapunov_decrease_check(
    cl: &ClosedLoop,
    cert: &Certificate,
    rho: f64,
    spec: &SampleSpec,
) -> Result<CheckRecord, VerifyError> {
    let n = cl.f_star.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match cert {
        Certificate::LyapunovP { p } => {
            let p_inv = p.clone().try_inverse().expect("certificate P is positive definite");
            let mut worst = f64::INFINITY;
            for x in sample_ball(n, spec.radius, spec.samples, &mut rng) {
                let z = cl.library.evaluate(&x)?;
                let next = &cl.f_star * z;
                let v0 = x.dot(&(&p_inv * &x));
                let v1 = next.dot(&(&p_inv * &next));
                worst = worst.min(v0 - rho * v1);
            }
            Ok(CheckRecord::new("lyapunov_decrease", worst >= -1e-12, worst, spec.samples))
        }
        Certificate::DiagonalD { d } => {
            let m = cl.f_star.view((0, 0), (n, n)).clone_owned();
            let mut worst = f64::INFINITY;
            for x in sample_ball(n, spec.radius, spec.samples, &mut rng) {
                let z = cl.library.evaluate(&x)?;
                let phi = z.rows(0, n).clone_owned();
                let vdot = phi.dot(&(d * &m * &phi));
                worst = worst.min(-vdot);
            }
            Ok(CheckRecord::new("diagonal_decrease", worst >= -1e-12, worst, spec.samples))
        }
        _ => Ok(CheckRecord::new("lyapunov_decrease", false, f64::NEG_INFINITY, 0)),
    }
}

/// Radius sweep for locally-valid certificates: halve the ball radius until
/// every sample decreases, reporting the passing radius as the margin
/// (zero when even the smallest tried radius fails).
pub fn lyapunov_pass_radius(
    cl: &ClosedLoop,
    cert: &Certificate,
    rho: f64,
    spec: &SampleSpec,
) -> Result<CheckRecord, VerifyError> {
    let mut radius = spec.radius;
    for _ in 0..16 {
        let rec = lyapunov_decrease_check(cl, cert, rho, &SampleSpec { radius, ..*spec })?;
        if rec.pass {
            return Ok(CheckRecord::new("lyapunov_pass_radius", true, radius, spec.samples));
        }
        radius *= 0.5;
    }
    Ok(CheckRecord::new("lyapunov_pass_radius", false, 0.0, spec.samples))
}

/// Trajectory-level dissipation check: along each simulated run,
/// `S(x(T)) - S(x(0)) <= integral r^T y dt + tol * T` with the declared
/// output `y = N_out Z(x)` and the storage function of the certificate.
/// Both sides share the RK4 grid; the supply integral is trapezoidal.
pub fn passivity_trajectory_check(
    cl: &ClosedLoop,
    cert: &Certificate,
    runs: &[(DVector<f64>, Vec<DVector<f64>>)],
    h: f64,
    steps: usize,
) -> Result<CheckRecord, VerifyError> {
    let Certificate::PassivityPair { m, n_out, .. } = cert else {
        return Ok(CheckRecord::new("dissipation", false, f64::NEG_INFINITY, 0));
    };
    let tol = 1e-6;
    let mut worst = f64::INFINITY;
    for (x0, r) in runs {
        let traj = simulate_closed_loop(cl, x0, Some(r), steps, h)?;
        let mut supply = 0.0;
        let mut y_prev = n_out * cl.library.evaluate(&traj[0])?;
        for k in 0..steps {
            let y_next = n_out * cl.library.evaluate(&traj[k + 1])?;
            supply += 0.5 * h * (r[k].dot(&y_prev) + r[k].dot(&y_next));
            y_prev = y_next;
        }
        let s0 = storage_eval(&cl.library, m, &traj[0])?;
        let s1 = storage_eval(&cl.library, m, &traj[steps])?;
        let horizon = h * steps as f64;
        worst = worst.min(supply + tol * horizon - (s1 - s0));
    }
    Ok(CheckRecord::new("dissipation", worst >= 0.0, worst, runs.len()))
}

fn sym_max_eig(m: &DMatrix<f64>) -> f64 {
    ((m + m.transpose()) * 0.5).symmetric_eigen().eigenvalues.max()
}

/// Recompute every equality and inequality of the originating synthesis
/// program from `(data, G, certificate)` with plain dense linear algebra.
pub fn recheck_certificate(
    result: &SynthesisResult,
    data: &DataSet,
    lib: &FunctionLibrary,
    opts: &SynthOptions,
) -> VerificationReport {
    let mut checks = Vec::new();
    let (n, s) = (data.state_dim(), data.basis_dim());

    let mut interp = (&data.x1 * &result.g - &result.f_star).amax();
    interp = interp.max((&data.z0 * &result.g - DMatrix::<f64>::identity(s, s)).amax());
    if let (Some(g_r), Some(f_r)) = (&result.g_r, &result.f_r_star) {
        interp = interp.max((&data.x1 * g_r - f_r).amax());
        interp = interp.max((&data.z0 * g_r).amax());
    }
    checks.push(CheckRecord::new("interpolation", interp <= opts.eq_tol, opts.eq_tol - interp, 1));

    let mut gain = (&data.u0 * &result.g - &result.k).amax();
    if let (Some(g_r), Some(k_r)) = (&result.g_r, &result.k_r) {
        gain = gain.max((&data.u0 * g_r - k_r).amax());
    }
    checks.push(CheckRecord::new("gain_consistency", gain <= opts.eq_tol, opts.eq_tol - gain, 1));

    match (&result.certificate, &result.objective) {
        (Certificate::LyapunovP { p }, objective) => {
            let p_min = p.clone().symmetric_eigen().eigenvalues.min();
            checks.push(CheckRecord::new("p_positive", p_min > 0.0, p_min, 1));
            let rho = match objective {
                DesignObjective::LinearizedStabilization { rho } => *rho,
                DesignObjective::NonlinearityCancellation { rho } => *rho,
                _ => 1.0,
            };
            if p_min > 0.0 {
                let f_lin = match objective {
                    DesignObjective::LinearizedStabilization { .. } => {
                        let z0p = lib
                            .jacobian(&DVector::zeros(n))
                            .expect("jacobian at the origin is finite");
                        &result.f_star * z0p
                    }
                    _ => result.f_star.view((0, 0), (n, n)).clone_owned(),
                };
                let p_inv = p.clone().try_inverse().expect("positive definite");
                let defect = sym_max_eig(&(f_lin.transpose() * &p_inv * &f_lin * rho - &p_inv));
                checks.push(CheckRecord::new("lyapunov_lmi", defect <= opts.eig_tol, -defect, 1));
                let radius = spectral_radius(&f_lin);
                let bound = rho.powf(-0.5) + 1e-6;
                checks.push(CheckRecord::new(
                    "decay_rate",
                    radius <= bound,
                    bound - radius,
                    1,
                ));
            }
            if matches!(objective, DesignObjective::NonlinearityCancellation { .. }) && s > n {
                let tail = result.f_star.view((0, n), (n, s - n)).amax();
                checks.push(CheckRecord::new("cancellation", tail <= 1e-6, 1e-6 - tail, 1));
            }
        }
        (Certificate::DiagonalD { d }, _) => {
            let d_min = (0..n).map(|i| d[(i, i)]).fold(f64::INFINITY, f64::min);
            checks.push(CheckRecord::new("d_positive", d_min > 0.0, d_min, 1));
            let m = result.f_star.view((0, 0), (n, n)).clone_owned();
            let max_eig = sym_max_eig(&(m.transpose() * d + d * &m));
            let gate = -opts.epsilon / 2.0;
            checks.push(CheckRecord::new("diagonal_lmi", max_eig <= gate, gate - max_eig, 1));
        }
        (Certificate::PassivityPair { theta, m, n_out }, _) => {
            let sym = sym_max_eig(&(theta + theta.transpose()));
            checks.push(CheckRecord::new("theta_dissipative", sym <= opts.eig_tol, -sym, 1));
            let structure = (&result.f_star - theta * m).amax();
            checks.push(CheckRecord::new(
                "gradient_structure",
                structure <= opts.eq_tol,
                opts.eq_tol - structure,
                1,
            ));
            if let Some(f_r) = &result.f_r_star {
                let defect = (n_out - f_r.transpose() * m).amax();
                checks.push(CheckRecord::new(
                    "output_consistency",
                    defect <= opts.eq_tol,
                    opts.eq_tol - defect,
                    1,
                ));
            }
        }
        (Certificate::ExactMatch { residual }, objective) => {
            checks.push(CheckRecord::new(
                "match_residual",
                *residual <= opts.eq_tol,
                opts.eq_tol - residual,
                1,
            ));
            match objective {
                DesignObjective::ModelReference { a_bar, b_bar, prefix_len } => {
                    let mut target = DMatrix::zeros(n, s);
                    target.view_mut((0, 0), (n, *prefix_len)).copy_from(a_bar);
                    let mut defect = (&result.f_star - target).amax();
                    if let Some(f_r) = &result.f_r_star {
                        defect = defect.max((f_r - b_bar).amax());
                    }
                    checks.push(CheckRecord::new(
                        "reference_match",
                        defect <= opts.eq_tol,
                        opts.eq_tol - defect,
                        1,
                    ));
                }
                DesignObjective::OscillatorDesign { mu_lower, mu_upper } => {
                    let mu = result.mu.unwrap_or(f64::NAN);
                    let in_range = mu >= *mu_lower - 1e-12 && mu <= *mu_upper + 1e-12;
                    checks.push(CheckRecord::new(
                        "mu_in_range",
                        in_range,
                        (mu - mu_lower).min(mu_upper - mu),
                        1,
                    ));
                }
                _ => {}
            }
        }
    }

    VerificationReport { checks, seed: 0, eq_tol: opts.eq_tol, eig_tol: opts.eig_tol }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::parse_library;
    use crate::synth::{synth_model_reference, synth_passivation, SynthOptions};
    use approx::assert_abs_diff_eq;

    fn linear_cl(f: f64, mode: TimeMode) -> ClosedLoop {
        ClosedLoop {
            f_star: DMatrix::from_row_slice(1, 1, &[f]),
            f_r_star: None,
            library: parse_library("x1", 1).unwrap(),
            mode,
        }
    }

    #[test]
    fn deadbeat_closed_loop_reaches_zero_in_one_step() {
        let cl = linear_cl(0.0, TimeMode::Discrete);
        let traj =
            simulate_closed_loop(&cl, &DVector::from_element(1, 5.0), None, 3, 0.0).unwrap();
        assert_eq!(traj[0][0], 5.0);
        assert_eq!(traj[1][0], 0.0);
        assert_eq!(traj[3][0], 0.0);
    }

    #[test]
    fn continuous_closed_loop_matches_exponential() {
        let cl = linear_cl(-1.0, TimeMode::Continuous);
        let traj =
            simulate_closed_loop(&cl, &DVector::from_element(1, 1.0), None, 100, 0.01).unwrap();
        assert_abs_diff_eq!(traj[100][0], (-1.0_f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn spectral_radius_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.2]);
        assert_abs_diff_eq!(spectral_radius(&d), 0.5, epsilon = 1e-12);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(spectral_radius(&nil), 0.0, epsilon = 1e-12);
        // Companion matrix of z^2 - z - 1 has the golden ratio as a root.
        let comp = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(spectral_radius(&comp), (1.0 + 5.0_f64.sqrt()) / 2.0, epsilon = 1e-9);
        let hurwitz = DMatrix::from_row_slice(2, 2, &[-1.0, 3.0, 0.0, -2.0]);
        assert_abs_diff_eq!(max_real_part(&hurwitz), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn class_m_symmetric_matrix_on_linear_library() {
        let lib = parse_library("x1; x2", 2).unwrap();
        let sym = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let rec = class_m_membership(&lib, &sym, &SampleSpec::default(), 1e-10).unwrap();
        assert!(rec.pass);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let defect = class_m_defect(&lib, &skew, 10, 1.0, 0).unwrap();
        assert_abs_diff_eq!(defect, 2.0, epsilon = 1e-12);
        let rec = class_m_membership(&lib, &skew, &SampleSpec::default(), 1e-10).unwrap();
        assert!(!rec.pass);
    }

    #[test]
    fn class_m_with_bilinear_entry() {
        let lib = parse_library("x1; x2; x1*x2", 2).unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let rec = class_m_membership(&lib, &m, &SampleSpec::default(), 1e-10).unwrap();
        assert!(rec.pass);
    }

    #[test]
    fn storage_matches_quadratic_closed_form() {
        let lib = parse_library("x1", 1).unwrap();
        let m = DMatrix::identity(1, 1);
        let s = storage_eval(&lib, &m, &DVector::from_element(1, 2.0)).unwrap();
        assert_abs_diff_eq!(s, 2.0, epsilon = 1e-10);

        let lib2 = parse_library("x1; x2", 2).unwrap();
        let m2 = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let s2 = storage_eval(&lib2, &m2, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(s2, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn storage_with_cubic_entry() {
        let lib = parse_library("x1; x1^3", 1).unwrap();
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let s = storage_eval(&lib, &m, &DVector::from_element(1, 1.0)).unwrap();
        assert_abs_diff_eq!(s, 0.75, epsilon = 1e-10);
    }

    #[test]
    fn storage_quadratic_property_random_points() {
        let lib = parse_library("x1; x2", 2).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let s = storage_eval(&lib, &m, &x).unwrap();
            let expect = 0.5 * x.dot(&(&m * &x));
            assert_abs_diff_eq!(s, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn diagonal_decrease_for_scalar_example() {
        let cl = linear_cl(-1.0, TimeMode::Continuous);
        let cert = Certificate::DiagonalD { d: DMatrix::identity(1, 1) };
        let rec = lyapunov_decrease_check(&cl, &cert, 1.0, &SampleSpec::default()).unwrap();
        assert!(rec.pass);
    }

    #[test]
    fn lyapunov_decrease_for_contracting_loop() {
        let cl = linear_cl(0.5, TimeMode::Discrete);
        let cert = Certificate::LyapunovP { p: DMatrix::identity(1, 1) };
        let rec = lyapunov_decrease_check(&cl, &cert, 1.0, &SampleSpec::default()).unwrap();
        assert!(rec.pass);
        let bad = linear_cl(2.0, TimeMode::Discrete);
        let rec = lyapunov_decrease_check(&bad, &cert, 1.0, &SampleSpec::default()).unwrap();
        assert!(!rec.pass);
        let swept = lyapunov_pass_radius(&cl, &cert, 1.0, &SampleSpec::default()).unwrap();
        assert!(swept.pass);
        assert_abs_diff_eq!(swept.margin, 1.0, epsilon = 1e-12);
    }

    fn scalar_passivation_result() -> (SynthesisResult, FunctionLibrary) {
        let lib = parse_library("x1", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            TimeMode::Continuous,
        )
        .unwrap();
        let m = DMatrix::from_row_slice(1, 1, &[1.0]);
        let result = synth_passivation(&data, &lib, &m, 1, &SynthOptions::default()).unwrap();
        (result, lib)
    }

    #[test]
    fn dissipation_holds_on_scalar_passivation() {
        let (result, lib) = scalar_passivation_result();
        let cl = ClosedLoop::from_result(&result, lib, TimeMode::Continuous);
        let steps = 200;
        let h = 0.01;
        let mut runs = Vec::new();
        // Zero reference: storage strictly decreases.
        runs.push((DVector::from_element(1, 1.0), vec![DVector::zeros(1); steps]));
        // Sine reference.
        let sine: Vec<DVector<f64>> =
            (0..steps).map(|k| DVector::from_element(1, (0.01 * k as f64).sin())).collect();
        runs.push((DVector::from_element(1, -0.5), sine));
        let rec =
            passivity_trajectory_check(&cl, &result.certificate, &runs, h, steps).unwrap();
        assert!(rec.pass, "worst slack {}", rec.margin);
    }

    #[test]
    fn recheck_accepts_and_rejects() {
        let lib = parse_library("x1", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[2.0, 5.0]),
            TimeMode::Discrete,
        )
        .unwrap();
        let a_bar = DMatrix::from_row_slice(1, 1, &[0.5]);
        let b_bar = DMatrix::from_row_slice(1, 1, &[1.0]);
        let opts = SynthOptions::default();
        let result = synth_model_reference(&data, &lib, &a_bar, &b_bar, 1, &opts).unwrap();
        let report = recheck_certificate(&result, &data, &lib, &opts);
        assert!(report.all_pass());

        let mut corrupted = result.clone();
        corrupted.k[(0, 0)] += 1e-2;
        let report = recheck_certificate(&corrupted, &data, &lib, &opts);
        assert!(!report.all_pass());
        assert!(report.checks.iter().any(|c| c.name == "gain_consistency" && !c.pass));
    }

    #[test]
    fn recheck_flags_indefinite_p() {
        let lib = parse_library("x1", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.5]),
            DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]),
            DMatrix::from_row_slice(1, 3, &[2.0, 5.0, -1.5]),
            TimeMode::Discrete,
        )
        .unwrap();
        let opts = SynthOptions::default();
        let result =
            crate::synth::synth_linearized_stabilization(&data, &lib, 1.0, &opts).unwrap();
        let report = recheck_certificate(&result, &data, &lib, &opts);
        assert!(report.all_pass());

        let mut corrupted = result.clone();
        if let Certificate::LyapunovP { p } = &mut corrupted.certificate {
            p[(0, 0)] = -1.0;
        }
        let report = recheck_certificate(&corrupted, &data, &lib, &opts);
        assert!(!report.all_pass());
    }
}
