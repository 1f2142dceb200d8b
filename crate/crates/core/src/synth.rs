//! Controller synthesis from data alone.
//!
//! Every procedure here produces a gain `K`, an interpolation matrix `G`
//! satisfying `Z0 G = I` (plus `Z0 G_r = 0` for reference channels), and the
//! achieved closed-loop matrix `F* = X1 G`, together with an
//! objective-specific certificate. None of the procedures look at the true
//! plant matrices; they only consume the data matrices `(U0, Z0, X1)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{BasisExpr, EvalError, FunctionLibrary};
use crate::data::{DataSet, TimeMode, DEFAULT_RANK_RTOL};
use crate::lmi::{
    check_solution, solve, AffineExpr, LmiError, Problem, SolveOptions, Status,
};
use crate::verify::class_m_defect;

/// Selects one synthesis procedure and carries its parameters.
#[derive(Debug, Clone)]
pub enum DesignObjective {
    /// Stabilize the linearization around the origin; `rho >= 1` demands a
    /// decay rate: spectral radius of the linearized closed loop at most
    /// `rho^(-1/2)`.
    LinearizedStabilization { rho: f64 },
    /// Cancel all nonlinear library columns and make the linear part Schur
    /// stable with decay rate `rho`.
    NonlinearityCancellation { rho: f64 },
    /// Continuous time: shape the closed loop to `sum_i` of monotone scalar
    /// channels admitting a diagonal Lyapunov certificate.
    DiagonalStabilization,
    /// Shape a planar system into a Van der Pol oscillator with parameter
    /// `mu` anywhere in `[mu_lower, mu_upper]`.
    OscillatorDesign { mu_lower: f64, mu_upper: f64 },
    /// Match a reference model `x+ = A_bar Z_bar(x) + B_bar r`, where the
    /// reference basis is the length-`prefix_len` prefix of the library.
    ModelReference { a_bar: DMatrix<f64>, b_bar: DMatrix<f64>, prefix_len: usize },
    /// Render the closed loop cyclo-passive for a user-supplied class-M
    /// candidate `m`, with an `m_r`-dimensional external input channel.
    Passivation { m: DMatrix<f64>, m_r: usize },
    /// Linear special case (`Z(x) = x`) of passivation; derives `M` from the
    /// solved LMIs instead of taking a candidate.
    PassivationLinear { m_r: usize },
}

impl DesignObjective {
    pub fn kind(&self) -> &'static str {
        match self {
            DesignObjective::LinearizedStabilization { .. } => "linearized_stabilization",
            DesignObjective::NonlinearityCancellation { .. } => "nonlinearity_cancellation",
            DesignObjective::DiagonalStabilization => "diagonal_stabilization",
            DesignObjective::OscillatorDesign { .. } => "oscillator",
            DesignObjective::ModelReference { .. } => "model_reference",
            DesignObjective::Passivation { .. } => "passivation",
            DesignObjective::PassivationLinear { .. } => "passivation_linear",
        }
    }
}

/// Objective-specific proof object, re-verifiable from data alone.
#[derive(Debug, Clone)]
pub enum Certificate {
    LyapunovP { p: DMatrix<f64> },
    DiagonalD { d: DMatrix<f64> },
    /// `theta + theta^T <= 0`; declared passive output is
    /// `y = n_out Z(x)` with `n_out = G2^T X1^T M`.
    PassivityPair { theta: DMatrix<f64>, m: DMatrix<f64>, n_out: DMatrix<f64> },
    ExactMatch { residual: f64 },
}

impl Certificate {
    pub fn kind(&self) -> &'static str {
        match self {
            Certificate::LyapunovP { .. } => "lyapunov_p",
            Certificate::DiagonalD { .. } => "diagonal_d",
            Certificate::PassivityPair { .. } => "passivity_pair",
            Certificate::ExactMatch { .. } => "exact_match",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualSummary {
    /// Worst equality defect over the identity chain `X1 G = F*`,
    /// `Z0 G = I`, `U0 G = K` and the objective's own equalities.
    pub max_equality: f64,
    /// Worst eigenvalue slack over the objective's definiteness constraints
    /// (infinity when the objective has none).
    pub min_margin: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub objective: DesignObjective,
    pub k: DMatrix<f64>,
    pub k_r: Option<DMatrix<f64>>,
    pub g: DMatrix<f64>,
    pub g_r: Option<DMatrix<f64>>,
    pub f_star: DMatrix<f64>,
    pub f_r_star: Option<DMatrix<f64>>,
    /// Achieved oscillator parameter, when applicable.
    pub mu: Option<f64>,
    pub certificate: Certificate,
    pub residuals: ResidualSummary,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("target closed-loop matrix is not attainable from the data (residual {residual:.3e})")]
    NotAttainable { residual: f64 },
    #[error("synthesis program is infeasible: {detail}")]
    Infeasible { detail: String },
    #[error("Z0 is not full row rank (rank {rank} < {dim})")]
    RankDeficient { rank: usize, dim: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("library prefix entry {entry} is not strictly monotone through zero")]
    MonotonicityViolation { entry: usize },
    #[error("candidate M is not class M at sampled points (worst asymmetry {defect:.3e})")]
    ClassMViolation { defect: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub eq_tol: f64,
    pub eig_tol: f64,
    pub epsilon: f64,
    /// When set, each assembled semidefinite program is written there as
    /// JSON before solving.
    pub dump_lmi: Option<std::path::PathBuf>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { eq_tol: 1e-8, eig_tol: 1e-9, epsilon: 1e-6, dump_lmi: None }
    }
}

impl SynthOptions {
    fn solve_opts(&self) -> SolveOptions {
        SolveOptions {
            eq_tol: self.eq_tol,
            eig_tol: self.eig_tol,
            epsilon: self.epsilon,
            ..SolveOptions::default()
        }
    }

    fn dump(&self, problem: &Problem) {
        if let Some(path) = &self.dump_lmi {
            let _ = std::fs::write(path, serde_json::to_string_pretty(&problem.to_json()).unwrap());
        }
    }
}

/// Minimum-norm least-squares solve of `A X = B`.
fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1.0);
    svd.solve(b, eps).expect("svd factors requested")
}

fn require(cond: bool, msg: &str) -> Result<(), SynthError> {
    if cond {
        Ok(())
    } else {
        Err(SynthError::Precondition(msg.to_string()))
    }
}

fn check_fingerprint(data: &DataSet, lib: &FunctionLibrary) -> Result<(), SynthError> {
    require(
        data.library_fingerprint == lib.fingerprint(),
        "data set was collected under a different library",
    )
}

fn numeric_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let tol = DEFAULT_RANK_RTOL * smax * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Right pseudoinverse `Z0^T (Z0 Z0^T)^{-1}` of a full-row-rank matrix.
fn right_pinv(z0: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = z0 * z0.transpose();
    let inv = gram.try_inverse().expect("full row rank checked");
    z0.transpose() * inv
}

/// Identity-chain residuals common to every synthesis output.
fn identity_residual(data: &DataSet, result: &SynthesisResult) -> f64 {
    let s = data.basis_dim();
    let mut worst = (&data.x1 * &result.g - &result.f_star).amax();
    worst = worst.max((&data.z0 * &result.g - DMatrix::<f64>::identity(s, s)).amax());
    worst = worst.max((&data.u0 * &result.g - &result.k).amax());
    if let (Some(g_r), Some(k_r), Some(f_r)) = (&result.g_r, &result.k_r, &result.f_r_star) {
        worst = worst.max((&data.x1 * g_r - f_r).amax());
        worst = worst.max((&data.z0 * g_r).amax());
        worst = worst.max((&data.u0 * g_r - k_r).amax());
    }
    worst
}

/// Least-squares membership test for the data-attainable set:
/// solves `[F; I_s] = [X1; Z0] G` and reports the worst defect.
pub fn attainability_membership(f: &DMatrix<f64>, data: &DataSet) -> (DMatrix<f64>, f64) {
    let (n, s) = (data.state_dim(), data.basis_dim());
    assert_eq!(f.nrows(), n, "target row count");
    assert_eq!(f.ncols(), s, "target column count");
    let mut t = DMatrix::zeros(n + s, data.samples());
    t.view_mut((0, 0), (n, data.samples())).copy_from(&data.x1);
    t.view_mut((n, 0), (s, data.samples())).copy_from(&data.z0);
    let mut rhs = DMatrix::zeros(n + s, s);
    rhs.view_mut((0, 0), (n, s)).copy_from(f);
    rhs.view_mut((n, 0), (s, s)).copy_from(&DMatrix::identity(s, s));
    let g = lstsq(&t, &rhs);
    let residual = (&t * &g - rhs).amax();
    (g, residual)
}

/// Membership test for the reference channel: `[F_r; 0] = [X1; Z0] G_r`.
fn reference_membership(f_r: &DMatrix<f64>, data: &DataSet) -> (DMatrix<f64>, f64) {
    let (n, s) = (data.state_dim(), data.basis_dim());
    let m_r = f_r.ncols();
    let mut t = DMatrix::zeros(n + s, data.samples());
    t.view_mut((0, 0), (n, data.samples())).copy_from(&data.x1);
    t.view_mut((n, 0), (s, data.samples())).copy_from(&data.z0);
    let mut rhs = DMatrix::zeros(n + s, m_r);
    rhs.view_mut((0, 0), (n, m_r)).copy_from(f_r);
    let g_r = lstsq(&t, &rhs);
    let residual = (&t * &g_r - rhs).amax();
    (g_r, residual)
}

/// Realize a given attainable closed-loop matrix (and optional reference
/// channel) exactly: `K = U0 G` with `A + B K = F*` guaranteed by the
/// interpolation identities.
pub fn synth_from_target(
    f_star: &DMatrix<f64>,
    f_r_star: Option<&DMatrix<f64>>,
    data: &DataSet,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    let (g, residual) = attainability_membership(f_star, data);
    if residual > opts.eq_tol {
        return Err(SynthError::NotAttainable { residual });
    }
    let mut worst = residual;
    let (g_r, k_r, f_r) = match f_r_star {
        Some(f_r) => {
            let (g_r, r) = reference_membership(f_r, data);
            if r > opts.eq_tol {
                return Err(SynthError::NotAttainable { residual: r });
            }
            worst = worst.max(r);
            (Some(g_r.clone()), Some(&data.u0 * &g_r), Some(&data.x1 * &g_r))
        }
        None => (None, None, None),
    };
    let k = &data.u0 * &g;
    let achieved = &data.x1 * &g;
    Ok(SynthesisResult {
        objective: DesignObjective::ModelReference {
            a_bar: f_star.clone(),
            b_bar: f_r_star.cloned().unwrap_or_else(|| DMatrix::zeros(data.state_dim(), 0)),
            prefix_len: data.basis_dim(),
        },
        k,
        k_r,
        g,
        g_r,
        f_star: achieved,
        f_r_star: f_r,
        mu: None,
        certificate: Certificate::ExactMatch { residual: worst },
        residuals: ResidualSummary { max_equality: worst, min_margin: f64::INFINITY },
    })
}

/// Spectral radius of a general square matrix.
fn spectral_radius_of(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Stabilization of the linearization around the origin with decay rate
/// `rho` (>= 1): feasibility of the block matrix
/// `[P, sqrt(rho) X1 Y; *, P] > 0` with `Z'(0) P = Z0 Y`, then gain recovery
/// through the right pseudoinverse of `Z0`.
pub fn synth_linearized_stabilization(
    data: &DataSet,
    lib: &FunctionLibrary,
    rho: f64,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    check_fingerprint(data, lib)?;
    require(lib.coordinate_prefix(), "library must start with the coordinates x1..xn")?;
    require(data.mode == TimeMode::Discrete, "objective requires discrete-time data")?;
    require(rho >= 1.0, "decay rate rho must be at least 1")?;
    let (n, s, n_samp) = (data.state_dim(), data.basis_dim(), data.samples());
    let rank = numeric_rank(&data.z0);
    if rank < s {
        return Err(SynthError::RankDeficient { rank, dim: s });
    }
    let z0_prime = lib.jacobian(&DVector::zeros(n))?;

    let mut problem = Problem::default();
    let p = problem.symmetric("P", n);
    let y = problem.free("Y", n_samp, n);
    let id_n = DMatrix::<f64>::identity(n, n);
    // Normalization P >= I is without loss of generality: the constraint set
    // is a cone in (P, Y).
    problem.psd("P_pos", AffineExpr::zeros(n, n).term(id_n.clone(), p, id_n.clone()), 1.0);
    let upper = {
        let mut u = DMatrix::zeros(2 * n, n);
        u.view_mut((0, 0), (n, n)).copy_from(&id_n);
        u
    };
    let lower = {
        let mut l = DMatrix::zeros(2 * n, n);
        l.view_mut((n, 0), (n, n)).copy_from(&id_n);
        l
    };
    let sq = rho.sqrt();
    let x1_top = {
        let mut m = DMatrix::zeros(2 * n, n_samp);
        m.view_mut((0, 0), (n, n_samp)).copy_from(&(&data.x1 * sq));
        m
    };
    let block = AffineExpr::zeros(2 * n, 2 * n)
        .term(upper.clone(), p, upper.transpose())
        .term(lower.clone(), p, lower.transpose())
        .term(x1_top.clone(), y, lower.transpose())
        .term_t(lower.clone(), y, x1_top.transpose());
    problem.psd("schur_block", block, opts.epsilon);
    problem.eq(
        "gradient_match",
        AffineExpr::zeros(s, n)
            .term(z0_prime.clone(), p, id_n.clone())
            .term(-&data.z0, y, id_n.clone()),
    );
    opts.dump(&problem);
    let out = solve(&problem, &opts.solve_opts())?;
    if out.status != Status::Feasible {
        return Err(SynthError::Infeasible {
            detail: format!(
                "stabilization LMI: status {:?}, worst margin {:.3e}",
                out.status, out.min_eig_margin
            ),
        });
    }
    let p_val = out.assignment.get(p).clone();
    let y_val = out.assignment.get(y).clone();
    let p_inv = p_val.clone().try_inverse().expect("P >= I");
    let z0_pinv = right_pinv(&data.z0);
    // Left inverse of Z'(0) fixed to [I_n 0], valid for coordinate-prefix
    // libraries.
    let zl = {
        let mut m = DMatrix::zeros(n, s);
        m.view_mut((0, 0), (n, n)).copy_from(&id_n);
        m
    };
    let g = &z0_pinv
        + (DMatrix::<f64>::identity(n_samp, n_samp) - &z0_pinv * &data.z0) * &y_val * &p_inv * &zl;
    let k = &data.u0 * &g;
    let f_star = &data.x1 * &g;
    let lin = &f_star * &z0_prime;
    let radius = spectral_radius_of(&lin);
    if radius > rho.powf(-0.5) + 1e-6 {
        return Err(SynthError::Infeasible {
            detail: format!("post-check failed: linearized spectral radius {radius:.6}"),
        });
    }
    let report = check_solution(&problem, &out.assignment);
    let mut result = SynthesisResult {
        objective: DesignObjective::LinearizedStabilization { rho },
        k,
        k_r: None,
        g,
        g_r: None,
        f_star,
        f_r_star: None,
        mu: None,
        certificate: Certificate::LyapunovP { p: p_val },
        residuals: ResidualSummary {
            max_equality: report.max_eq_violation,
            min_margin: report.min_eig_margin,
        },
    };
    result.residuals.max_equality = result.residuals.max_equality.max(identity_residual(data, &result));
    Ok(result)
}

/// Cancel every nonlinear library column by feedback and make the remaining
/// linear part Schur stable with decay rate `rho`.
pub fn synth_nonlinearity_cancellation(
    data: &DataSet,
    lib: &FunctionLibrary,
    rho: f64,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    check_fingerprint(data, lib)?;
    require(lib.coordinate_prefix(), "library must start with the coordinates x1..xn")?;
    require(data.mode == TimeMode::Discrete, "objective requires discrete-time data")?;
    require(rho >= 1.0, "decay rate rho must be at least 1")?;
    let (n, s, n_samp) = (data.state_dim(), data.basis_dim(), data.samples());
    let tail = s - n;

    let mut problem = Problem::default();
    let p = problem.symmetric("P", n);
    let y1 = problem.free("Y1", n_samp, n);
    let g2 = (tail > 0).then(|| problem.free("G2", n_samp, tail));
    let id_n = DMatrix::<f64>::identity(n, n);
    problem.psd("P_pos", AffineExpr::zeros(n, n).term(id_n.clone(), p, id_n.clone()), 1.0);
    let mut upper = DMatrix::zeros(2 * n, n);
    upper.view_mut((0, 0), (n, n)).copy_from(&id_n);
    let mut lower = DMatrix::zeros(2 * n, n);
    lower.view_mut((n, 0), (n, n)).copy_from(&id_n);
    let mut x1_top = DMatrix::zeros(2 * n, n_samp);
    x1_top.view_mut((0, 0), (n, n_samp)).copy_from(&(&data.x1 * rho.sqrt()));
    let block = AffineExpr::zeros(2 * n, 2 * n)
        .term(upper.clone(), p, upper.transpose())
        .term(lower.clone(), p, lower.transpose())
        .term(x1_top.clone(), y1, lower.transpose())
        .term_t(lower.clone(), y1, x1_top.transpose());
    problem.psd("schur_block", block, opts.epsilon);
    // Z0 Y1 = [P; 0].
    let mut head = DMatrix::zeros(s, n);
    head.view_mut((0, 0), (n, n)).copy_from(&id_n);
    problem.eq(
        "interp_head",
        AffineExpr::zeros(s, n)
            .term(data.z0.clone(), y1, id_n.clone())
            .term(-&head, p, id_n.clone()),
    );
    if let Some(g2) = g2 {
        let id_t = DMatrix::<f64>::identity(tail, tail);
        problem.eq(
            "cancel_tail",
            AffineExpr::zeros(n, tail).term(data.x1.clone(), g2, id_t.clone()),
        );
        let mut tail_sel = DMatrix::zeros(s, tail);
        tail_sel.view_mut((n, 0), (tail, tail)).copy_from(&id_t);
        problem.eq(
            "interp_tail",
            AffineExpr::new(-tail_sel).term(data.z0.clone(), g2, id_t.clone()),
        );
    }
    opts.dump(&problem);
    let out = solve(&problem, &opts.solve_opts())?;
    if out.status != Status::Feasible {
        return Err(SynthError::Infeasible {
            detail: format!(
                "cancellation LMI: status {:?}, worst margin {:.3e}, worst equality {:.3e}",
                out.status, out.min_eig_margin, out.max_eq_violation
            ),
        });
    }
    let p_val = out.assignment.get(p).clone();
    let p_inv = p_val.clone().try_inverse().expect("P >= I");
    let g1 = out.assignment.get(y1) * &p_inv;
    let mut g = DMatrix::zeros(n_samp, s);
    g.view_mut((0, 0), (n_samp, n)).copy_from(&g1);
    if let Some(g2) = g2 {
        g.view_mut((0, n), (n_samp, tail)).copy_from(out.assignment.get(g2));
    }
    let k = &data.u0 * &g;
    let f_star = &data.x1 * &g;
    let lin_part = f_star.view((0, 0), (n, n)).clone_owned();
    let tail_norm = if tail > 0 { f_star.view((0, n), (n, tail)).amax() } else { 0.0 };
    let radius = spectral_radius_of(&lin_part);
    if tail_norm > 1e-6 || radius >= 1.0 {
        return Err(SynthError::Infeasible {
            detail: format!(
                "post-check failed: nonlinear column norm {tail_norm:.3e}, spectral radius {radius:.6}"
            ),
        });
    }
    let report = check_solution(&problem, &out.assignment);
    let mut result = SynthesisResult {
        objective: DesignObjective::NonlinearityCancellation { rho },
        k,
        k_r: None,
        g,
        g_r: None,
        f_star,
        f_r_star: None,
        mu: None,
        certificate: Certificate::LyapunovP { p: p_val },
        residuals: ResidualSummary {
            max_equality: report.max_eq_violation,
            min_margin: report.min_eig_margin,
        },
    };
    result.residuals.max_equality = result.residuals.max_equality.max(identity_residual(data, &result));
    Ok(result)
}

/// Sampled structural check for the monotone-channel precondition: entry `i`
/// of the library must be a strictly monotone function of `x_{i+1}` alone
/// with value zero at the origin.
fn check_monotone_prefix(lib: &FunctionLibrary, n: usize) -> Result<(), SynthError> {
    let dim = lib.dim();
    for (i, expr) in lib.basis().iter().take(n).enumerate() {
        let probe = |t: f64| {
            let mut x = vec![0.0; dim];
            x[i] = t;
            expr.eval(&x)
        };
        if probe(0.0).abs() > 1e-12 {
            return Err(SynthError::MonotonicityViolation { entry: i });
        }
        // Dependence on any other coordinate disqualifies the entry.
        for j in 0..dim {
            if j == i {
                continue;
            }
            let mut x = vec![0.0; dim];
            x[i] = 0.7;
            let base = expr.eval(&x);
            x[j] = 1.3;
            if (expr.eval(&x) - base).abs() > 1e-12 {
                return Err(SynthError::MonotonicityViolation { entry: i });
            }
        }
        let mut prev = probe(-2.0);
        let mut increasing = true;
        let mut decreasing = true;
        let steps = 80;
        for k in 1..=steps {
            let t = -2.0 + 4.0 * (k as f64) / (steps as f64);
            let v = probe(t);
            if v <= prev {
                increasing = false;
            }
            if v >= prev {
                decreasing = false;
            }
            prev = v;
        }
        if !(increasing || decreasing) {
            return Err(SynthError::MonotonicityViolation { entry: i });
        }
    }
    Ok(())
}

/// Continuous-time design with a diagonal Lyapunov certificate: solve the
/// convexified program in `(W, E, G2)` with `X1 W + W^T X1^T <= -2I`,
/// `Z0 W = [E; 0]`, `E >= I` diagonal, then recover `D = E^{-1}`,
/// `G1 = W E^{-1}`, `M = X1 G1`.
///
/// The dissipation margin -2I together with `E >= I` is without loss of
/// generality (the feasible set is a cone) and pins the minimum-norm
/// solution to the exact vertex on hand-sized instances.
pub fn synth_diagonal_stabilization(
    data: &DataSet,
    lib: &FunctionLibrary,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    check_fingerprint(data, lib)?;
    require(data.mode == TimeMode::Continuous, "objective requires continuous-time data")?;
    let (n, s, n_samp) = (data.state_dim(), data.basis_dim(), data.samples());
    check_monotone_prefix(lib, n)?;
    let tail = s - n;

    let mut problem = Problem::default();
    let w = problem.free("W", n_samp, n);
    let e = problem.diagonal("E", n);
    let g2 = (tail > 0).then(|| problem.free("G2", n_samp, tail));
    let id_n = DMatrix::<f64>::identity(n, n);
    problem.psd("E_pos", AffineExpr::zeros(n, n).term(id_n.clone(), e, id_n.clone()), 1.0);
    problem.nsd(
        "dissipation",
        AffineExpr::zeros(n, n)
            .term(data.x1.clone(), w, id_n.clone())
            .term_t(id_n.clone(), w, data.x1.transpose()),
        2.0,
    );
    let mut head = DMatrix::zeros(s, n);
    head.view_mut((0, 0), (n, n)).copy_from(&id_n);
    problem.eq(
        "interp_head",
        AffineExpr::zeros(s, n)
            .term(data.z0.clone(), w, id_n.clone())
            .term(-&head, e, id_n.clone()),
    );
    if let Some(g2) = g2 {
        let id_t = DMatrix::<f64>::identity(tail, tail);
        problem.eq("tail_invariant", AffineExpr::zeros(n, tail).term(data.x1.clone(), g2, id_t.clone()));
        let mut tail_sel = DMatrix::zeros(s, tail);
        tail_sel.view_mut((n, 0), (tail, tail)).copy_from(&id_t);
        problem.eq("interp_tail", AffineExpr::new(-tail_sel).term(data.z0.clone(), g2, id_t));
    }
    opts.dump(&problem);
    let out = solve(&problem, &opts.solve_opts())?;
    if out.status != Status::Feasible {
        return Err(SynthError::Infeasible {
            detail: format!(
                "diagonal program: status {:?}, worst margin {:.3e}",
                out.status, out.min_eig_margin
            ),
        });
    }
    let e_val = out.assignment.get(e).clone();
    let w_val = out.assignment.get(w).clone();
    let e_inv = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / e_val[(i, i)] } else { 0.0 });
    let g1 = &w_val * &e_inv;
    let d = e_inv.clone();
    let m = &data.x1 * &g1;
    let mut g = DMatrix::zeros(n_samp, s);
    g.view_mut((0, 0), (n_samp, n)).copy_from(&g1);
    if let Some(g2) = g2 {
        g.view_mut((0, n), (n_samp, tail)).copy_from(out.assignment.get(g2));
    }
    let k = &data.u0 * &g;
    let f_star = &data.x1 * &g;
    let lyap = m.transpose() * &d + &d * &m;
    let max_eig = lyap.symmetric_eigen().eigenvalues.max();
    if max_eig > -opts.epsilon / 2.0 {
        return Err(SynthError::Infeasible {
            detail: format!("post-check failed: M^T D + D M max eigenvalue {max_eig:.3e}"),
        });
    }
    let report = check_solution(&problem, &out.assignment);
    let mut result = SynthesisResult {
        objective: DesignObjective::DiagonalStabilization,
        k,
        k_r: None,
        g,
        g_r: None,
        f_star,
        f_r_star: None,
        mu: None,
        certificate: Certificate::DiagonalD { d },
        residuals: ResidualSummary {
            max_equality: report.max_eq_violation,
            min_margin: report.min_eig_margin,
        },
    };
    result.residuals.max_equality = result.residuals.max_equality.max(identity_residual(data, &result));
    Ok(result)
}

/// Target rows of the Van der Pol shaping objective at parameter `nu = mu^2`.
fn oscillator_parts(n_basis: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut f0 = DMatrix::zeros(2, n_basis);
    f0[(0, 0)] = 1.0;
    f0[(0, 1)] = 1.0;
    f0[(1, 1)] = 1.0;
    let mut f1 = DMatrix::zeros(2, n_basis);
    f1[(1, 0)] = -1.0;
    f1[(1, 1)] = 1.0;
    f1[(1, 2)] = -1.0 / 3.0;
    (f0, f1)
}

/// Shape the closed loop to a discrete-time Van der Pol oscillator with
/// parameter `mu` chosen anywhere in `[mu_lower, mu_upper]`. Linear in
/// `(G, nu)` after substituting `nu = mu^2`.
pub fn synth_oscillator(
    data: &DataSet,
    lib: &FunctionLibrary,
    mu_lower: f64,
    mu_upper: f64,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    check_fingerprint(data, lib)?;
    require(data.state_dim() == 2, "objective requires a planar system")?;
    require(0.0 < mu_lower && mu_lower <= mu_upper, "need 0 < mu_lower <= mu_upper")?;
    let basis = lib.basis();
    use BasisExpr::{Pow, Var};
    let prefix_ok = lib.len() >= 3
        && basis[0] == Var(0)
        && basis[1] == Var(1)
        && basis[2] == Pow(Box::new(Var(1)), 3);
    require(prefix_ok, "library must start with x1; x2; x2^3")?;

    let (n, s) = (data.state_dim(), data.basis_dim());
    let (f0, f1) = oscillator_parts(s);
    let mut t = DMatrix::zeros(n + s, data.samples());
    t.view_mut((0, 0), (n, data.samples())).copy_from(&data.x1);
    t.view_mut((n, 0), (s, data.samples())).copy_from(&data.z0);
    let mut rhs0 = DMatrix::zeros(n + s, s);
    rhs0.view_mut((0, 0), (n, s)).copy_from(&f0);
    rhs0.view_mut((n, 0), (s, s)).copy_from(&DMatrix::identity(s, s));
    let mut rhs1 = DMatrix::zeros(n + s, s);
    rhs1.view_mut((0, 0), (n, s)).copy_from(&f1);

    let g_a = lstsq(&t, &rhs0);
    let g_b = lstsq(&t, &rhs1);
    let r_a = &t * &g_a - &rhs0;
    let r_b = &t * &g_b - &rhs1;
    let (nu_lo, nu_hi) = (mu_lower * mu_lower, mu_upper * mu_upper);

    // Residual of the interpolation system is ||r_a + nu r_b|| and the
    // minimum-norm interpolant is G(nu) = g_a + nu g_b; pick nu by
    // minimizing the residual first, the norm of G second.
    let dot = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
    let rb_norm2 = dot(&r_b, &r_b);
    let nu = if rb_norm2 > 1e-20 {
        (-dot(&r_a, &r_b) / rb_norm2).clamp(nu_lo, nu_hi)
    } else {
        let gb_norm2 = dot(&g_b, &g_b);
        if gb_norm2 > 1e-20 {
            (-dot(&g_a, &g_b) / gb_norm2).clamp(nu_lo, nu_hi)
        } else {
            nu_lo
        }
    };
    let residual = (&r_a + &r_b * nu).amax();
    if residual > opts.eq_tol {
        let res_lo = (&r_a + &r_b * nu_lo).amax();
        let res_hi = (&r_a + &r_b * nu_hi).amax();
        return Err(SynthError::Infeasible {
            detail: format!(
                "no mu in [{mu_lower}, {mu_upper}] matches the target (residuals {res_lo:.3e} at mu_lower, {res_hi:.3e} at mu_upper)"
            ),
        });
    }
    let g = &g_a + &g_b * nu;
    let k = &data.u0 * &g;
    let f_star = &data.x1 * &g;
    let mut result = SynthesisResult {
        objective: DesignObjective::OscillatorDesign { mu_lower, mu_upper },
        k,
        k_r: None,
        g,
        g_r: None,
        f_star,
        f_r_star: None,
        mu: Some(nu.sqrt()),
        certificate: Certificate::ExactMatch { residual },
        residuals: ResidualSummary { max_equality: residual, min_margin: f64::INFINITY },
    };
    result.residuals.max_equality = result.residuals.max_equality.max(identity_residual(data, &result));
    Ok(result)
}

/// Exact model-reference matching: makes the closed loop equal to
/// `x+ = A_bar Z_bar(x) + B_bar r` where `Z_bar` is the length-`prefix_len`
/// prefix of the library.
pub fn synth_model_reference(
    data: &DataSet,
    lib: &FunctionLibrary,
    a_bar: &DMatrix<f64>,
    b_bar: &DMatrix<f64>,
    prefix_len: usize,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    check_fingerprint(data, lib)?;
    let (n, s) = (data.state_dim(), data.basis_dim());
    require(prefix_len >= 1 && prefix_len <= s, "reference prefix length out of range")?;
    require(a_bar.nrows() == n && a_bar.ncols() == prefix_len, "A_bar has the wrong shape")?;
    require(b_bar.nrows() == n, "B_bar has the wrong row count")?;
    let m_r = b_bar.ncols();

    // Full target: F* = [A_bar 0], F_r* = B_bar.
    let mut f_target = DMatrix::zeros(n, s);
    f_target.view_mut((0, 0), (n, prefix_len)).copy_from(a_bar);
    let (g, residual) = attainability_membership(&f_target, data);
    let (g_r, residual_r) = reference_membership(b_bar, data);
    let worst = residual.max(residual_r);
    if worst > opts.eq_tol {
        return Err(SynthError::NotAttainable { residual: worst });
    }
    let k = &data.u0 * &g;
    let k_r = &data.u0 * &g_r;
    let f_star = &data.x1 * &g;
    let f_r_star = &data.x1 * &g_r;
    let mut result = SynthesisResult {
        objective: DesignObjective::ModelReference {
            a_bar: a_bar.clone(),
            b_bar: b_bar.clone(),
            prefix_len,
        },
        k,
        k_r: Some(k_r),
        g,
        g_r: Some(g_r),
        f_star,
        f_r_star: Some(f_r_star),
        mu: None,
        certificate: Certificate::ExactMatch { residual: worst },
        residuals: ResidualSummary { max_equality: worst, min_margin: f64::INFINITY },
    };
    result.residuals.max_equality = result.residuals.max_equality.max(identity_residual(data, &result));
    let _ = m_r;
    Ok(result)
}

/// Pick `G2` (the reference-channel interpolant, `Z0 G2 = 0`) so that the
/// channel actually reaches the state: columns are the kernel directions of
/// `Z0` along which `X1` acts most strongly, with a deterministic sign.
fn reference_channel(data: &DataSet, m_r: usize) -> Result<DMatrix<f64>, SynthError> {
    let n_samp = data.samples();
    let gram = &data.z0 * data.z0.transpose();
    // Orthonormal kernel basis of Z0 from the eigendecomposition of
    // Z0^T Z0 (dimension N x N).
    let big = data.z0.transpose() * &data.z0;
    let eig = big.symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(gram.amax()).max(1.0);
    let mut kernel_cols = Vec::new();
    for i in 0..n_samp {
        if eig.eigenvalues[i] < 1e-18 * lmax {
            kernel_cols.push(eig.eigenvectors.column(i).clone_owned());
        }
    }
    if kernel_cols.len() < m_r {
        return Err(SynthError::Precondition(format!(
            "reference channel needs {m_r} kernel directions of Z0, found {}",
            kernel_cols.len()
        )));
    }
    let v = DMatrix::from_fn(n_samp, kernel_cols.len(), |i, j| kernel_cols[j][i]);
    let x1v = &data.x1 * &v;
    let svd = x1v.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut g2 = DMatrix::zeros(n_samp, m_r);
    for j in 0..m_r {
        let w = v_t.row(j).transpose();
        let mut col = &v * w;
        // Sign convention: largest-magnitude entry of X1 * col positive.
        let image = &data.x1 * &col;
        let mut best = 0usize;
        for i in 0..image.nrows() {
            if image[i].abs() > image[best].abs() {
                best = i;
            }
        }
        if image[best] < 0.0 {
            col = -col;
        }
        g2.set_column(j, &col);
    }
    Ok(g2)
}

/// Render the closed loop cyclo-passive for the candidate `M`: solve
/// `Z0 G1 = I`, `X1 G1 = Theta M`, `Theta + Theta^T <= 0` and attach the
/// output `y = G2^T X1^T M Z(x)`.
///
/// A strict dissipation margin is tried first (exact on hand instances by
/// cone homogeneity) and relaxed to the non-strict constraint if infeasible,
/// keeping lossless closed loops admissible.
pub fn synth_passivation(
    data: &DataSet,
    lib: &FunctionLibrary,
    m_cand: &DMatrix<f64>,
    m_r: usize,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    check_fingerprint(data, lib)?;
    require(data.mode == TimeMode::Continuous, "objective requires continuous-time data")?;
    let (n, s, n_samp) = (data.state_dim(), data.basis_dim(), data.samples());
    require(m_cand.nrows() == n && m_cand.ncols() == s, "candidate M has the wrong shape")?;
    if m_cand.amax() < 1e-12 {
        return Err(SynthError::ClassMViolation { defect: f64::INFINITY });
    }
    let defect = class_m_defect(lib, m_cand, 1000, 1.0, 0)?;
    if defect > 1e-8 {
        return Err(SynthError::ClassMViolation { defect });
    }

    let build = |margin: f64| -> Result<_, SynthError> {
        let mut problem = Problem::default();
        let g1 = problem.free("G1", n_samp, s);
        let theta = problem.free("Theta", n, n);
        let id_s = DMatrix::<f64>::identity(s, s);
        let id_n = DMatrix::<f64>::identity(n, n);
        problem.eq(
            "interp",
            AffineExpr::new(-id_s.clone()).term(data.z0.clone(), g1, id_s.clone()),
        );
        problem.eq(
            "gradient_structure",
            AffineExpr::zeros(n, s)
                .term(data.x1.clone(), g1, id_s.clone())
                .term(-&id_n, theta, m_cand.clone()),
        );
        problem.nsd(
            "dissipativity",
            AffineExpr::zeros(n, n)
                .term(id_n.clone(), theta, id_n.clone())
                .term_t(id_n.clone(), theta, id_n.clone()),
            margin,
        );
        opts.dump(&problem);
        let out = solve(&problem, &opts.solve_opts())?;
        Ok((problem, out, g1, theta))
    };
    let (problem, out, g1_id, theta_id) = {
        let first = build(2.0)?;
        if first.1.status == Status::Feasible {
            first
        } else {
            let second = build(0.0)?;
            if second.1.status != Status::Feasible {
                return Err(SynthError::Infeasible {
                    detail: format!(
                        "passivation program: status {:?}, worst equality {:.3e}",
                        second.1.status, second.1.max_eq_violation
                    ),
                });
            }
            second
        }
    };
    let g1 = out.assignment.get(g1_id).clone();
    let theta = out.assignment.get(theta_id).clone();
    let g2 = reference_channel(data, m_r)?;
    let k = &data.u0 * &g1;
    let k_r = &data.u0 * &g2;
    let f_star = &data.x1 * &g1;
    let f_r_star = &data.x1 * &g2;
    let n_out = g2.transpose() * data.x1.transpose() * m_cand;
    let sym_max = (&theta + theta.transpose()).symmetric_eigen().eigenvalues.max();
    if sym_max > opts.eig_tol {
        return Err(SynthError::Infeasible {
            detail: format!("post-check failed: Theta + Theta^T max eigenvalue {sym_max:.3e}"),
        });
    }
    let report = check_solution(&problem, &out.assignment);
    let mut result = SynthesisResult {
        objective: DesignObjective::Passivation { m: m_cand.clone(), m_r },
        k,
        k_r: Some(k_r),
        g: g1,
        g_r: Some(g2),
        f_star,
        f_r_star: Some(f_r_star),
        mu: None,
        certificate: Certificate::PassivityPair { theta, m: m_cand.clone(), n_out },
        residuals: ResidualSummary {
            max_equality: report.max_eq_violation,
            min_margin: report.min_eig_margin,
        },
    };
    result.residuals.max_equality = result.residuals.max_equality.max(identity_residual(data, &result));
    Ok(result)
}

/// Linear special case of passivation for `Z(x) = x`: solve
/// `X1 Q + (X1 Q)^T <= 0`, `Z0 Q = (Z0 Q)^T > 0`, then set
/// `M = (Z0 Q)^{-1}`, `G1 = Q (Z0 Q)^{-1}`, with quadratic storage
/// `S(x) = x^T (Z0 Q)^{-1} x / 2`.
pub fn synth_passivation_linear(
    data: &DataSet,
    lib: &FunctionLibrary,
    m_r: usize,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    check_fingerprint(data, lib)?;
    require(data.mode == TimeMode::Continuous, "objective requires continuous-time data")?;
    let (n, s, n_samp) = (data.state_dim(), data.basis_dim(), data.samples());
    require(
        s == n && lib.coordinate_prefix(),
        "objective requires the linear library Z(x) = x",
    )?;

    let build = |margin: f64| -> Result<_, SynthError> {
        let mut problem = Problem::default();
        let q = problem.free("Q", n_samp, n);
        let id_n = DMatrix::<f64>::identity(n, n);
        problem.nsd(
            "dissipation",
            AffineExpr::zeros(n, n)
                .term(data.x1.clone(), q, id_n.clone())
                .term_t(id_n.clone(), q, data.x1.transpose()),
            margin,
        );
        // Z0 Q symmetric and positive definite (normalized >= I).
        problem.eq(
            "symmetry",
            AffineExpr::zeros(n, n)
                .term(data.z0.clone(), q, id_n.clone())
                .term_t(-&id_n, q, data.z0.transpose()),
        );
        problem.psd(
            "gram_pos",
            AffineExpr::zeros(n, n).term(data.z0.clone(), q, id_n.clone()),
            1.0,
        );
        opts.dump(&problem);
        let out = solve(&problem, &opts.solve_opts())?;
        Ok((problem, out, q))
    };
    let (problem, out, q_id) = {
        let first = build(2.0)?;
        if first.1.status == Status::Feasible {
            first
        } else {
            let second = build(0.0)?;
            if second.1.status != Status::Feasible {
                return Err(SynthError::Infeasible {
                    detail: format!(
                        "linear passivation LMIs: status {:?}, worst margin {:.3e}",
                        second.1.status, second.1.min_eig_margin
                    ),
                });
            }
            second
        }
    };
    let q_val = out.assignment.get(q_id).clone();
    let gram = &data.z0 * &q_val;
    let gram_inv = gram.clone().try_inverse().expect("Z0 Q >= I");
    let m_mat = gram_inv.clone();
    let g1 = &q_val * &gram_inv;
    let theta = &data.x1 * &q_val;
    let g2 = reference_channel(data, m_r)?;
    let k = &data.u0 * &g1;
    let k_r = &data.u0 * &g2;
    let f_star = &data.x1 * &g1;
    let f_r_star = &data.x1 * &g2;
    let n_out = g2.transpose() * data.x1.transpose() * &m_mat;
    let report = check_solution(&problem, &out.assignment);
    let mut result = SynthesisResult {
        objective: DesignObjective::PassivationLinear { m_r },
        k,
        k_r: Some(k_r),
        g: g1,
        g_r: Some(g2),
        f_star,
        f_r_star: Some(f_r_star),
        mu: None,
        certificate: Certificate::PassivityPair { theta, m: m_mat, n_out },
        residuals: ResidualSummary {
            max_equality: report.max_eq_violation,
            min_margin: report.min_eig_margin,
        },
    };
    result.residuals.max_equality = result.residuals.max_equality.max(identity_residual(data, &result));
    Ok(result)
}

#[derive(Debug, Clone)]
pub enum CertifyOutcome {
    /// The closed loop of the given gain is pinned down by the data:
    /// `[I; K]` lies in the image of `[Z0; U0]`.
    Certified,
    /// A kernel direction along which the data cannot distinguish closed
    /// loops; `direction` has the largest norm among the violations.
    Uncertified { direction: DVector<f64>, norm: f64 },
}

/// Informativity diagnostic: for every left-kernel vector
/// `(v_a, v_b)` of `[Z0; U0]` form `v = v_a + K^T v_b`; any nonzero `v`
/// witnesses a plant consistent with the data whose closed loop under `K`
/// differs from the nominal one.
pub fn certify_by_data(data: &DataSet, k: &DMatrix<f64>) -> CertifyOutcome {
    let (s, m) = (data.basis_dim(), data.input_dim());
    assert_eq!(k.nrows(), m, "gain row count");
    assert_eq!(k.ncols(), s, "gain column count");
    let stacked = data.stacked();
    let gram = &stacked * stacked.transpose();
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(1.0);
    let mut worst: Option<(DVector<f64>, f64)> = None;
    for i in 0..s + m {
        if eig.eigenvalues[i] >= 1e-18 * lmax {
            continue;
        }
        let vt = eig.eigenvectors.column(i);
        let v_a = DVector::from_column_slice(&vt.as_slice()[..s]);
        let v_b = DVector::from_column_slice(&vt.as_slice()[s..]);
        let v = &v_a + k.transpose() * &v_b;
        let norm = v.norm();
        if norm > 1e-8 && worst.as_ref().map_or(true, |(_, wn)| norm > *wn) {
            worst = Some((v, norm));
        }
    }
    match worst {
        Some((direction, norm)) => CertifyOutcome::Uncertified { direction, norm },
        None => CertifyOutcome::Certified,
    }
}

/// Dispatch a design objective to its synthesis procedure.
pub fn synthesize(
    objective: &DesignObjective,
    data: &DataSet,
    lib: &FunctionLibrary,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    match objective {
        DesignObjective::LinearizedStabilization { rho } => {
            synth_linearized_stabilization(data, lib, *rho, opts)
        }
        DesignObjective::NonlinearityCancellation { rho } => {
            synth_nonlinearity_cancellation(data, lib, *rho, opts)
        }
        DesignObjective::DiagonalStabilization => synth_diagonal_stabilization(data, lib, opts),
        DesignObjective::OscillatorDesign { mu_lower, mu_upper } => {
            synth_oscillator(data, lib, *mu_lower, *mu_upper, opts)
        }
        DesignObjective::ModelReference { a_bar, b_bar, prefix_len } => {
            synth_model_reference(data, lib, a_bar, b_bar, *prefix_len, opts)
        }
        DesignObjective::Passivation { m, m_r } => synth_passivation(data, lib, m, *m_r, opts),
        DesignObjective::PassivationLinear { m_r } => {
            synth_passivation_linear(data, lib, *m_r, opts)
        }
    }
}
