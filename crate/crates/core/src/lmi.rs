//! Small affine semidefinite feasibility problems and a self-contained
//! log-barrier interior-point solver for them.
//!
//! Every synthesis procedure reduces to an instance of this problem class:
//! matrix variables (free / symmetric / diagonal), affine equality
//! constraints, and affine (semi)definiteness constraints with an explicit
//! strictness margin. Problems here are tiny (tens of scalar unknowns), so
//! the solver favors determinism and exactness over scale:
//!
//! 1. equalities are eliminated through an orthonormal nullspace basis,
//! 2. a phase-1 barrier finds a point maximizing the worst eigenvalue margin,
//! 3. a phase-2 barrier selects the minimum-Frobenius-norm feasible point,
//! 4. an active-set polish re-solves the detected active constraints as
//!    equalities, which pins hand-computable instances to ~1e-12.
//!
//! Feasibility claims are always re-verified by [`check_solution`], which
//! recomputes all residuals from scratch with a symmetric eigensolver and
//! shares no code with the barrier path.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarStructure {
    Free,
    Symmetric,
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct MatrixVar {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub structure: VarStructure,
}

/// Handle into a [`Problem`]'s variable list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// One term `left * op(var) * right` of an affine matrix expression.
#[derive(Debug, Clone)]
pub struct Term {
    pub left: DMatrix<f64>,
    pub var: VarId,
    pub transposed: bool,
    pub right: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct AffineExpr {
    pub constant: DMatrix<f64>,
    pub terms: Vec<Term>,
}

impl AffineExpr {
    pub fn new(constant: DMatrix<f64>) -> Self {
        AffineExpr { constant, terms: Vec::new() }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(DMatrix::zeros(rows, cols))
    }

    pub fn rows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn cols(&self) -> usize {
        self.constant.ncols()
    }

    pub fn term(mut self, left: DMatrix<f64>, var: VarId, right: DMatrix<f64>) -> Self {
        self.terms.push(Term { left, var, transposed: false, right });
        self
    }

    /// Term with the variable transposed.
    pub fn term_t(mut self, left: DMatrix<f64>, var: VarId, right: DMatrix<f64>) -> Self {
        self.terms.push(Term { left, var, transposed: true, right });
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintKind {
    /// expr = 0.
    Equality,
    /// sym(expr) >= margin * I.
    Psd { margin: f64 },
    /// sym(expr) <= -margin * I.
    Nsd { margin: f64 },
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub label: String,
    pub kind: ConstraintKind,
    pub expr: AffineExpr,
}

#[derive(Debug, Clone, Default)]
pub struct Problem {
    pub vars: Vec<MatrixVar>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Error)]
pub enum LmiError {
    #[error("constraint `{label}`: term dimensions are inconsistent")]
    DimensionMismatch { label: String },
    #[error("constraint `{label}`: definiteness constraints must be square")]
    NonSquare { label: String },
    #[error("variable `{name}`: symmetric/diagonal structure requires a square shape")]
    BadStructure { name: String },
}

impl Problem {
    pub fn add_var(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        structure: VarStructure,
    ) -> Result<VarId, LmiError> {
        let name = name.into();
        if structure != VarStructure::Free && rows != cols {
            return Err(LmiError::BadStructure { name });
        }
        self.vars.push(MatrixVar { name, rows, cols, structure });
        Ok(VarId(self.vars.len() - 1))
    }

    pub fn free(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> VarId {
        self.add_var(name, rows, cols, VarStructure::Free).expect("free var")
    }

    pub fn symmetric(&mut self, name: impl Into<String>, dim: usize) -> VarId {
        self.add_var(name, dim, dim, VarStructure::Symmetric).expect("square")
    }

    pub fn diagonal(&mut self, name: impl Into<String>, dim: usize) -> VarId {
        self.add_var(name, dim, dim, VarStructure::Diagonal).expect("square")
    }

    pub fn eq(&mut self, label: impl Into<String>, expr: AffineExpr) {
        self.constraints.push(Constraint { label: label.into(), kind: ConstraintKind::Equality, expr });
    }

    pub fn psd(&mut self, label: impl Into<String>, expr: AffineExpr, margin: f64) {
        self.constraints.push(Constraint {
            label: label.into(),
            kind: ConstraintKind::Psd { margin },
            expr,
        });
    }

    pub fn nsd(&mut self, label: impl Into<String>, expr: AffineExpr, margin: f64) {
        self.constraints.push(Constraint {
            label: label.into(),
            kind: ConstraintKind::Nsd { margin },
            expr,
        });
    }

    fn var(&self, id: VarId) -> &MatrixVar {
        &self.vars[id.0]
    }

    fn param_count(&self, id: VarId) -> usize {
        let v = self.var(id);
        match v.structure {
            VarStructure::Free => v.rows * v.cols,
            VarStructure::Symmetric => v.rows * (v.rows + 1) / 2,
            VarStructure::Diagonal => v.rows,
        }
    }

    fn param_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.vars.len());
        let mut total = 0;
        for i in 0..self.vars.len() {
            offsets.push(total);
            total += self.param_count(VarId(i));
        }
        (offsets, total)
    }

    /// Basis matrix of scalar parameter `local` of variable `id`.
    fn basis_matrix(&self, id: VarId, local: usize) -> DMatrix<f64> {
        let v = self.var(id);
        let mut e = DMatrix::zeros(v.rows, v.cols);
        match v.structure {
            VarStructure::Free => {
                e[(local / v.cols, local % v.cols)] = 1.0;
            }
            VarStructure::Symmetric => {
                // Upper-triangle enumeration (i <= j), row by row.
                let mut k = local;
                let mut i = 0;
                while k >= v.rows - i {
                    k -= v.rows - i;
                    i += 1;
                }
                let j = i + k;
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
            }
            VarStructure::Diagonal => {
                e[(local, local)] = 1.0;
            }
        }
        e
    }

    fn materialize(&self, id: VarId, theta: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.var(id).rows, self.var(id).cols);
        for (l, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                out += self.basis_matrix(id, l) * t;
            }
        }
        out
    }

    fn validate(&self) -> Result<(), LmiError> {
        for c in &self.constraints {
            let (rows, cols) = (c.expr.rows(), c.expr.cols());
            if !matches!(c.kind, ConstraintKind::Equality) && rows != cols {
                return Err(LmiError::NonSquare { label: c.label.clone() });
            }
            for t in &c.expr.terms {
                let v = self.var(t.var);
                let (vr, vc) = if t.transposed { (v.cols, v.rows) } else { (v.rows, v.cols) };
                if t.left.ncols() != vr
                    || t.right.nrows() != vc
                    || t.left.nrows() != rows
                    || t.right.ncols() != cols
                {
                    return Err(LmiError::DimensionMismatch { label: c.label.clone() });
                }
            }
        }
        Ok(())
    }

    /// Evaluate one constraint expression at an assignment.
    pub fn eval_expr(&self, expr: &AffineExpr, assignment: &Assignment) -> DMatrix<f64> {
        let mut out = expr.constant.clone();
        for t in &expr.terms {
            let v = &assignment.values[t.var.0];
            if t.transposed {
                out += &t.left * v.transpose() * &t.right;
            } else {
                out += &t.left * v * &t.right;
            }
        }
        out
    }

    /// JSON dump of the assembled problem for offline inspection.
    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| {
            json!({
                "rows": m.nrows(),
                "cols": m.ncols(),
                "data": m.transpose().as_slice().to_vec(),
            })
        };
        json!({
            "variables": self.vars.iter().map(|v| json!({
                "name": v.name,
                "rows": v.rows,
                "cols": v.cols,
                "structure": match v.structure {
                    VarStructure::Free => "free",
                    VarStructure::Symmetric => "symmetric",
                    VarStructure::Diagonal => "diagonal",
                },
            })).collect::<Vec<_>>(),
            "constraints": self.constraints.iter().map(|c| json!({
                "label": c.label,
                "kind": match c.kind {
                    ConstraintKind::Equality => json!("equality"),
                    ConstraintKind::Psd { margin } => json!({"psd": margin}),
                    ConstraintKind::Nsd { margin } => json!({"nsd": margin}),
                },
                "constant": mat(&c.expr.constant),
                "terms": c.expr.terms.iter().map(|t| json!({
                    "left": mat(&t.left),
                    "var": self.vars[t.var.0].name,
                    "transposed": t.transposed,
                    "right": mat(&t.right),
                })).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Assignment {
    values: Vec<DMatrix<f64>>,
}

impl Assignment {
    pub fn get(&self, id: VarId) -> &DMatrix<f64> {
        &self.values[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Feasible,
    Infeasible,
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct FeasibilityOutcome {
    pub status: Status,
    pub assignment: Assignment,
    pub max_eq_violation: f64,
    /// Worst eigenvalue slack over definiteness constraints, measured beyond
    /// the declared margin (nonnegative means satisfied).
    pub min_eig_margin: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub eq_tol: f64,
    pub eig_tol: f64,
    /// Default strictness margin callers use when assembling constraints.
    pub epsilon: f64,
    pub max_newton_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { eq_tol: 1e-8, eig_tol: 1e-9, epsilon: 1e-6, max_newton_iters: 80 }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub eq_residuals: Vec<(String, f64)>,
    pub ineq_margins: Vec<(String, f64)>,
    pub max_eq_violation: f64,
    pub min_eig_margin: f64,
}

impl ResidualReport {
    pub fn passes(&self, opts: &SolveOptions) -> bool {
        self.max_eq_violation <= opts.eq_tol && self.min_eig_margin >= -opts.eig_tol
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Recompute all constraint residuals from scratch with a direct symmetric
/// eigensolver; shares no state with the solve path.
pub fn check_solution(problem: &Problem, assignment: &Assignment) -> ResidualReport {
    let mut eq_residuals = Vec::new();
    let mut ineq_margins = Vec::new();
    let mut max_eq: f64 = 0.0;
    let mut min_margin = f64::INFINITY;
    for c in &problem.constraints {
        let val = problem.eval_expr(&c.expr, assignment);
        match c.kind {
            ConstraintKind::Equality => {
                let r = val.amax();
                max_eq = max_eq.max(r);
                eq_residuals.push((c.label.clone(), r));
            }
            ConstraintKind::Psd { margin } => {
                let eig = sym(&val).symmetric_eigen();
                let slack = eig.eigenvalues.min() - margin;
                min_margin = min_margin.min(slack);
                ineq_margins.push((c.label.clone(), slack));
            }
            ConstraintKind::Nsd { margin } => {
                let eig = sym(&val).symmetric_eigen();
                let slack = -eig.eigenvalues.max() - margin;
                min_margin = min_margin.min(slack);
                ineq_margins.push((c.label.clone(), slack));
            }
        }
    }
    if !min_margin.is_finite() {
        min_margin = f64::INFINITY;
    }
    ResidualReport { eq_residuals, ineq_margins, max_eq_violation: max_eq, min_eig_margin: min_margin }
}

/// One definiteness block in reduced coordinates: S(y) = c + sum_k y_k a[k].
struct ReducedBlock {
    c: DMatrix<f64>,
    a: Vec<DMatrix<f64>>,
}

impl ReducedBlock {
    fn eval(&self, y: &DVector<f64>, shift: f64) -> DMatrix<f64> {
        let mut s = self.c.clone();
        for (k, ak) in self.a.iter().enumerate() {
            if y[k] != 0.0 {
                s += ak * y[k];
            }
        }
        if shift != 0.0 {
            for i in 0..s.nrows() {
                s[(i, i)] += shift;
            }
        }
        s
    }
}

struct Barrier<'a> {
    blocks: &'a [ReducedBlock],
    dim: usize,
}

impl<'a> Barrier<'a> {
    /// Returns None if some block is not positive definite at `y`.
    fn eval(&self, y: &DVector<f64>, shift: f64) -> Option<f64> {
        let mut total = 0.0;
        for b in self.blocks {
            let s = b.eval(y, shift);
            let chol = Cholesky::new(s)?;
            let l = chol.l();
            for i in 0..l.nrows() {
                let d = l[(i, i)];
                if d <= 0.0 {
                    return None;
                }
                total -= 2.0 * d.ln();
            }
        }
        Some(total)
    }

    /// Gradient and Hessian of the barrier at a strictly feasible `y`.
    /// When `with_shift` is set, an extra trailing coordinate multiplying the
    /// identity in every block is appended.
    fn derivatives(
        &self,
        y: &DVector<f64>,
        shift: f64,
        with_shift: bool,
    ) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let q = self.dim + usize::from(with_shift);
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for b in self.blocks {
            let s = b.eval(y, shift);
            let p = s.nrows();
            let chol = Cholesky::new(s)?;
            let sinv = chol.inverse();
            // W_k = S^{-1} A_k, plus W for the identity direction if present.
            let mut ws: Vec<DMatrix<f64>> = Vec::with_capacity(q);
            for ak in &b.a {
                ws.push(&sinv * ak);
            }
            if with_shift {
                ws.push(sinv.clone());
            }
            for (k, wk) in ws.iter().enumerate() {
                grad[k] -= wk.trace();
                for l in k..q {
                    let wl = &ws[l];
                    let mut acc = 0.0;
                    for a in 0..p {
                        for bcol in 0..p {
                            acc += wk[(a, bcol)] * wl[(bcol, a)];
                        }
                    }
                    hess[(k, l)] += acc;
                    if l != k {
                        hess[(l, k)] += acc;
                    }
                }
            }
        }
        Some((grad, hess))
    }
}

fn solve_newton_system(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let q = hess.nrows();
    let mut h = hess.clone();
    let ridge = 1e-12 * (1.0 + h.diagonal().amax());
    for i in 0..q {
        h[(i, i)] += ridge;
    }
    let mut bump = ridge;
    loop {
        if let Some(chol) = Cholesky::new(h.clone()) {
            return chol.solve(&(-grad));
        }
        bump *= 100.0;
        for i in 0..q {
            h[(i, i)] += bump;
        }
        if bump > 1e6 {
            return -grad.clone();
        }
    }
}

struct Reduced {
    theta_p: DVector<f64>,
    nullspace: DMatrix<f64>,
    blocks: Vec<ReducedBlock>,
    eq_consistent: bool,
}

fn reduce(problem: &Problem, opts: &SolveOptions) -> Reduced {
    let (offsets, dim) = problem.param_offsets();

    // Per-constraint scalarization in full coordinates.
    let coeff = |c: &Constraint, k_global: usize| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(c.expr.rows(), c.expr.cols());
        for t in &c.expr.terms {
            let off = offsets[t.var.0];
            let count = problem.param_count(t.var);
            if k_global < off || k_global >= off + count {
                continue;
            }
            let e = problem.basis_matrix(t.var, k_global - off);
            if t.transposed {
                out += &t.left * e.transpose() * &t.right;
            } else {
                out += &t.left * e * &t.right;
            }
        }
        out
    };

    // Stack equalities into E theta = f.
    let mut eq_rows = 0;
    for c in &problem.constraints {
        if matches!(c.kind, ConstraintKind::Equality) {
            eq_rows += c.expr.rows() * c.expr.cols();
        }
    }
    let mut e_mat = DMatrix::zeros(eq_rows, dim);
    let mut f_vec = DVector::zeros(eq_rows);
    let mut row = 0;
    for c in &problem.constraints {
        if !matches!(c.kind, ConstraintKind::Equality) {
            continue;
        }
        let (p, q) = (c.expr.rows(), c.expr.cols());
        for k in 0..dim {
            let a = coeff(c, k);
            for i in 0..p {
                for j in 0..q {
                    e_mat[(row + i * q + j, k)] = a[(i, j)];
                }
            }
        }
        for i in 0..p {
            for j in 0..q {
                f_vec[row + i * q + j] = -c.expr.constant[(i, j)];
            }
        }
        row += p * q;
    }

    // Min-norm particular solution and orthonormal nullspace via the
    // eigendecomposition of E^T E.
    let gram = e_mat.transpose() * &e_mat;
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(0.0);
    let tol = (1e-12 * (lmax + 1.0)).max(1e-24 * (dim as f64));
    let etf = e_mat.transpose() * &f_vec;
    let mut theta_p = DVector::zeros(dim);
    let mut null_cols = Vec::new();
    for i in 0..dim {
        let lam = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        if lam > tol {
            let coef = v.dot(&etf) / lam;
            theta_p += DVector::from_column_slice(v.as_slice()) * coef;
        } else {
            null_cols.push(DVector::from_column_slice(v.as_slice()));
        }
    }
    let eq_defect = (&e_mat * &theta_p - &f_vec).amax();
    let eq_consistent = eq_rows == 0 || eq_defect <= opts.eq_tol.max(1e-10) * (1.0 + f_vec.amax());

    let q = null_cols.len();
    let mut nullspace = DMatrix::zeros(dim, q);
    for (j, col) in null_cols.iter().enumerate() {
        nullspace.set_column(j, col);
    }

    // Reduced definiteness blocks.
    let mut blocks = Vec::new();
    for c in &problem.constraints {
        let (sign, margin) = match c.kind {
            ConstraintKind::Equality => continue,
            ConstraintKind::Psd { margin } => (1.0, margin),
            ConstraintKind::Nsd { margin } => (-1.0, margin),
        };
        let p = c.expr.rows();
        let mut full_a: Vec<DMatrix<f64>> = Vec::with_capacity(dim);
        for k in 0..dim {
            full_a.push(sym(&coeff(c, k)) * sign);
        }
        let mut c0 = sym(&c.expr.constant) * sign;
        for (k, ak) in full_a.iter().enumerate() {
            if theta_p[k] != 0.0 {
                c0 += ak * theta_p[k];
            }
        }
        for i in 0..p {
            c0[(i, i)] -= margin;
        }
        let mut red_a = Vec::with_capacity(q);
        for j in 0..q {
            let mut aj = DMatrix::zeros(p, p);
            for (k, ak) in full_a.iter().enumerate() {
                let w = nullspace[(k, j)];
                if w != 0.0 {
                    aj += ak * w;
                }
            }
            red_a.push(aj);
        }
        blocks.push(ReducedBlock { c: c0, a: red_a });
    }

    Reduced { theta_p, nullspace, blocks, eq_consistent }
}

fn min_eig(blocks: &[ReducedBlock], y: &DVector<f64>) -> f64 {
    let mut worst = f64::INFINITY;
    for b in blocks {
        let eig = b.eval(y, 0.0).symmetric_eigen();
        worst = worst.min(eig.eigenvalues.min());
    }
    worst
}

/// Phase 1: maximize the worst eigenvalue over all blocks. Returns (y, s)
/// with s an upper bound shift such that all blocks + sI are PD.
fn phase1(blocks: &[ReducedBlock], q: usize, opts: &SolveOptions) -> (DVector<f64>, f64) {
    let mut y = DVector::zeros(q);
    let worst0 = min_eig(blocks, &y);
    let mut s = (-worst0).max(0.0) + 1.0;
    if blocks.is_empty() {
        return (y, -1.0);
    }
    let barrier = Barrier { blocks, dim: q };
    let scale: f64 = blocks.iter().map(|b| b.c.amax()).fold(1.0, f64::max);
    let interior_target = -1e-3 * scale.min(1.0).max(1e-3);
    let total_block_dim: usize = blocks.iter().map(|b| b.c.nrows()).sum();
    let mut t = 1.0;
    while t < 1e13 {
        for _ in 0..opts.max_newton_iters {
            let Some((bg, bh)) = barrier.derivatives(&y, s, true) else { break };
            let mut grad = bg;
            let mut hess = bh;
            grad[q] += t;
            // Keep s strictly below its starting ceiling.
            let ceil = (-min_eig(blocks, &y)).max(0.0) + 2.0 + s.abs();
            let gap = ceil - s;
            grad[q] += 1.0 / gap;
            hess[(q, q)] += 1.0 / (gap * gap);
            let step = solve_newton_system(&hess, &grad);
            let decrement = -grad.dot(&step);
            let mut tau = 1.0;
            let f0 = t * s + barrier.eval(&y, s).unwrap_or(f64::INFINITY) - gap.ln();
            let mut accepted = false;
            while tau > 1e-14 {
                let y_new = &y + step.rows(0, q) * tau;
                let s_new = s + step[q] * tau;
                if ceil - s_new > 0.0 {
                    if let Some(bar) = barrier.eval(&y_new, s_new) {
                        let f_new = t * s_new + bar - (ceil - s_new).ln();
                        if f_new <= f0 - 0.25 * tau * decrement.max(0.0) + 1e-12 * (1.0 + f0.abs()) {
                            y = y_new;
                            s = s_new;
                            accepted = true;
                            break;
                        }
                    }
                }
                tau *= 0.5;
            }
            if !accepted || decrement.abs() < 1e-12 * (1.0 + (t * s).abs()) {
                break;
            }
            if s < interior_target {
                return (y, s);
            }
        }
        if s < interior_target {
            return (y, s);
        }
        // Remaining suboptimality of s is ~ (total dim)/t.
        if (total_block_dim + 1) as f64 / t < 1e-11 {
            break;
        }
        t *= 8.0;
    }
    (y, s)
}

/// Phase 2: from a strictly feasible y, follow the central path of
/// min 0.5*||y||^2 subject to all blocks being PSD.
fn phase2(blocks: &[ReducedBlock], y0: DVector<f64>, opts: &SolveOptions) -> DVector<f64> {
    let q = y0.len();
    let barrier = Barrier { blocks, dim: q };
    let mut y = y0;
    let mut mu = (1.0 + y.norm_squared()).max(1.0);
    let mu_final = 1e-11 * mu;
    loop {
        for _ in 0..opts.max_newton_iters {
            let Some((bg, bh)) = barrier.derivatives(&y, 0.0, false) else { break };
            let grad = &y + bg * mu;
            let mut hess = bh * mu;
            for i in 0..q {
                hess[(i, i)] += 1.0;
            }
            let step = solve_newton_system(&hess, &grad);
            let decrement = -grad.dot(&step);
            if decrement.abs() < 1e-14 * (1.0 + y.norm_squared()) {
                break;
            }
            let f0 = 0.5 * y.norm_squared() + mu * barrier.eval(&y, 0.0).unwrap_or(f64::INFINITY);
            let mut tau = 1.0;
            let mut accepted = false;
            while tau > 1e-14 {
                let y_new = &y + &step * tau;
                if let Some(bar) = barrier.eval(&y_new, 0.0) {
                    let f_new = 0.5 * y_new.norm_squared() + mu * bar;
                    if f_new <= f0 - 0.25 * tau * decrement.max(0.0) + 1e-12 * (1.0 + f0.abs()) {
                        y = y_new;
                        accepted = true;
                        break;
                    }
                }
                tau *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if mu <= mu_final {
            return y;
        }
        mu *= 0.2;
    }
}

/// Re-solve the minimum-norm problem with the detected active constraints as
/// hard equalities. Exact when the active set is correct; the caller
/// verifies and falls back to the barrier point otherwise.
fn polish(blocks: &[ReducedBlock], y: &DVector<f64>) -> Option<DVector<f64>> {
    let q = y.len();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for b in blocks {
        let s = b.eval(y, 0.0);
        let scale = 1.0 + s.amax();
        let eig = s.symmetric_eigen();
        for i in 0..eig.eigenvalues.len() {
            if eig.eigenvalues[i] < 1e-5 * scale {
                let v = eig.eigenvectors.column(i);
                let mut row = DVector::zeros(q);
                for (k, ak) in b.a.iter().enumerate() {
                    row[k] = (ak * v).dot(&v);
                }
                rhs.push(-(&b.c * v).dot(&v));
                rows.push(row);
            }
        }
    }
    if rows.is_empty() {
        return Some(DVector::zeros(q));
    }
    let a = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
    let b_vec = DVector::from_vec(rhs);
    // Min-norm solution of the (usually underdetermined) active system.
    let gram = &a * a.transpose();
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(0.0);
    let tol = 1e-12 * (lmax + 1.0);
    let mut w = DVector::zeros(rows.len());
    for i in 0..rows.len() {
        let lam = eig.eigenvalues[i];
        if lam > tol {
            let v = eig.eigenvectors.column(i);
            let coef = v.dot(&b_vec) / lam;
            w += DVector::from_column_slice(v.as_slice()) * coef;
        }
    }
    Some(a.transpose() * w)
}

pub fn solve(problem: &Problem, opts: &SolveOptions) -> Result<FeasibilityOutcome, LmiError> {
    problem.validate()?;
    let red = reduce(problem, opts);
    let build_assignment = |theta: &DVector<f64>| {
        let (offsets, _) = problem.param_offsets();
        let values = (0..problem.vars.len())
            .map(|i| {
                let count = problem.param_count(VarId(i));
                let slice: Vec<f64> = (0..count).map(|k| theta[offsets[i] + k]).collect();
                problem.materialize(VarId(i), &slice)
            })
            .collect();
        Assignment { values }
    };

    if !red.eq_consistent {
        let assignment = build_assignment(&red.theta_p);
        let report = check_solution(problem, &assignment);
        return Ok(FeasibilityOutcome {
            status: Status::Infeasible,
            assignment,
            max_eq_violation: report.max_eq_violation,
            min_eig_margin: report.min_eig_margin,
        });
    }

    let q = red.nullspace.ncols();
    let mut y = DVector::zeros(q);
    let mut infeasible = false;
    if !red.blocks.is_empty() {
        let (y1, s1) = phase1(&red.blocks, q, opts);
        let worst = min_eig(&red.blocks, &y1);
        if worst > 0.0 {
            // Strict interior: minimum-norm refinement.
            y = phase2(&red.blocks, y1, opts);
        } else {
            y = y1;
            if s1 > 1e-7 {
                infeasible = true;
            }
        }
        if !infeasible {
            if let Some(y_pol) = polish(&red.blocks, &y) {
                let ok = min_eig(&red.blocks, &y_pol) >= -opts.eig_tol
                    && y_pol.norm_squared() <= y.norm_squared() + 1e-6 * (1.0 + y.norm_squared());
                if ok {
                    y = y_pol;
                }
            }
        }
    }

    let theta = &red.theta_p + &red.nullspace * &y;
    let assignment = build_assignment(&theta);
    let report = check_solution(problem, &assignment);
    let status = if infeasible {
        Status::Infeasible
    } else if report.passes(opts) {
        Status::Feasible
    } else {
        Status::Inconclusive
    };
    Ok(FeasibilityOutcome {
        status,
        assignment,
        max_eq_violation: report.max_eq_violation,
        min_eig_margin: report.min_eig_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_interval_is_feasible() {
        let eps = 1e-6;
        let mut p = Problem::default();
        let pv = p.free("p", 1, 1);
        p.psd("p_lower", AffineExpr::zeros(1, 1).term(scalar(1.0), pv, scalar(1.0)), eps);
        p.psd(
            "p_upper",
            AffineExpr::new(scalar(2.0)).term(scalar(-1.0), pv, scalar(1.0)),
            0.0,
        );
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Feasible);
        let val = out.assignment.get(pv)[(0, 0)];
        assert!((eps - 1e-9..=2.0).contains(&val), "p = {val}");
        // Minimum-norm selection pins p at the lower boundary.
        assert!((val - eps).abs() <= 1e-8, "p = {val}");
    }

    #[test]
    fn contradictory_scalar_is_infeasible() {
        let eps = 1e-6;
        let mut p = Problem::default();
        let pv = p.free("p", 1, 1);
        p.psd("pos", AffineExpr::zeros(1, 1).term(scalar(1.0), pv, scalar(1.0)), eps);
        p.psd("neg", AffineExpr::zeros(1, 1).term(scalar(-1.0), pv, scalar(1.0)), eps);
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Infeasible);
    }

    #[test]
    fn equality_constraints_are_eliminated_exactly() {
        // x + y = 3, x - y = 1, x >= 0 -> unique (2, 1).
        let mut p = Problem::default();
        let x = p.free("x", 1, 1);
        let y = p.free("y", 1, 1);
        p.eq(
            "sum",
            AffineExpr::new(scalar(-3.0))
                .term(scalar(1.0), x, scalar(1.0))
                .term(scalar(1.0), y, scalar(1.0)),
        );
        p.eq(
            "diff",
            AffineExpr::new(scalar(-1.0))
                .term(scalar(1.0), x, scalar(1.0))
                .term(scalar(-1.0), y, scalar(1.0)),
        );
        p.psd("xpos", AffineExpr::zeros(1, 1).term(scalar(1.0), x, scalar(1.0)), 0.0);
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Feasible);
        assert!((out.assignment.get(x)[(0, 0)] - 2.0).abs() < 1e-9);
        assert!((out.assignment.get(y)[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut p = Problem::default();
        let x = p.free("x", 1, 1);
        p.eq("a", AffineExpr::new(scalar(-1.0)).term(scalar(1.0), x, scalar(1.0)));
        p.eq("b", AffineExpr::new(scalar(-2.0)).term(scalar(1.0), x, scalar(1.0)));
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Infeasible);
    }

    #[test]
    fn symmetric_variable_lyapunov_feasibility() {
        // A = diag(0.5, -0.2): find P > 0 with A P A^T - P < 0.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.2]);
        let mut p = Problem::default();
        let pv = p.symmetric("P", 2);
        let id = DMatrix::identity(2, 2);
        p.psd("P_pos", AffineExpr::zeros(2, 2).term(id.clone(), pv, id.clone()), 1.0);
        p.nsd(
            "lyap",
            AffineExpr::zeros(2, 2)
                .term(a.clone(), pv, a.transpose())
                .term(-&id, pv, id.clone()),
            1e-6,
        );
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Feasible);
        let pm = out.assignment.get(pv);
        assert!((pm - pm.transpose()).amax() < 1e-12);
        let residual = &a * pm * a.transpose() - pm;
        assert!(residual.symmetric_eigen().eigenvalues.max() < 0.0);
    }

    #[test]
    fn unstable_matrix_has_no_lyapunov_certificate() {
        let a = DMatrix::from_row_slice(1, 1, &[2.0]);
        let mut p = Problem::default();
        let pv = p.symmetric("P", 1);
        let id = DMatrix::identity(1, 1);
        p.psd("P_pos", AffineExpr::zeros(1, 1).term(id.clone(), pv, id.clone()), 1.0);
        p.nsd(
            "lyap",
            AffineExpr::zeros(1, 1)
                .term(a.clone(), pv, a.transpose())
                .term(-&id, pv, id.clone()),
            1e-6,
        );
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Infeasible);
    }

    #[test]
    fn check_solution_flags_perturbed_certificates() {
        let eps = 1e-6;
        let mut p = Problem::default();
        let pv = p.free("p", 1, 1);
        p.psd("pos", AffineExpr::zeros(1, 1).term(scalar(1.0), pv, scalar(1.0)), eps);
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Feasible);
        let report = check_solution(&p, &out.assignment);
        assert!(report.min_eig_margin >= -1e-9);

        // Perturbing the solution below the margin must show a negative slack.
        let bad = Assignment { values: vec![scalar(-eps)] };
        let report = check_solution(&p, &bad);
        assert!(report.min_eig_margin < -eps);

        let zero = Assignment { values: vec![scalar(0.0)] };
        let report = check_solution(&p, &zero);
        assert!((report.min_eig_margin + eps).abs() < 1e-15);
    }

    #[test]
    fn diagonal_variable_stays_diagonal() {
        let mut p = Problem::default();
        let d = p.diagonal("D", 3);
        let id = DMatrix::identity(3, 3);
        p.psd("D_pos", AffineExpr::zeros(3, 3).term(id.clone(), d, id), 1.0);
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, Status::Feasible);
        let dm = out.assignment.get(d);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(dm[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_a_modeling_error() {
        let mut p = Problem::default();
        let x = p.free("x", 2, 2);
        p.eq("bad", AffineExpr::zeros(3, 3).term(DMatrix::identity(3, 3), x, DMatrix::identity(3, 3)));
        assert!(matches!(
            solve(&p, &SolveOptions::default()),
            Err(LmiError::DimensionMismatch { .. })
        ));
    }
}
