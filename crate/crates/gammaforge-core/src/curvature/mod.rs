//! Pointwise curvature-dimension quantities.
//!
//! The N-Ricci value of f at x is the infimum of Γ₂(f̃)(x) − (1/N)(Lf̃)²(x)
//! over all f̃ with Γ(f̃ − f)(x) = 0. It has a closed form in terms of the
//! whitened Hessian: with r = rank a(x), Ĥ = W H Wᵀ,
//!
//!   R_N(f)(x) = Γ₂(f)(x) − ‖Ĥ‖² − (tr Ĥ − Lf)²/(N − r),
//!
//! finite for N > r, subject to the tr Ĥ = Lf dichotomy at N = r and −∞ for
//! N < r. Everything here is that formula plus careful rank bookkeeping; the
//! gradient-descent oracle in [`oracle`] recomputes the infimum by direct
//! search and is used to validate this module.

pub mod oracle;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::diffusion::{DiffusionOperator, OpError, PSD_TOL};
use crate::expr::{EvalError, Expr};

pub use oracle::{ricci_infimum_oracle, OracleBudget, OracleOutcome};

/// Relative tolerance for the tr Ĥ = Lf dichotomy at N = rank.
pub const DICHOTOMY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CurvError {
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid dimension parameter N: {0}")]
    InvalidN(String),
    #[error("R_N(f) = -inf at {x:?}; the identity/estimate requires a finite Ricci value")]
    RicciMinusInf { x: Vec<f64> },
    #[error("degenerate denominator in the sharp Γ₂ estimate at {x:?}")]
    DegenerateDenominator { x: Vec<f64> },
    #[error("empty grid")]
    EmptyGrid,
}

// ── extended reals ──────────────────────────────────────────────────────

/// [-inf, +inf] with a total order; no NaN payloads.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum ExtReal {
    MinusInf,
    Finite(f64),
    PlusInf,
}

impl ExtReal {
    pub fn finite(v: f64) -> ExtReal {
        assert!(!v.is_nan(), "ExtReal cannot hold NaN");
        ExtReal::Finite(v)
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn as_f64(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            _ => None,
        }
    }

    /// Collapses to f64 with ±∞ for the infinite values.
    pub fn to_f64_lossy(self) -> f64 {
        match self {
            ExtReal::MinusInf => f64::NEG_INFINITY,
            ExtReal::Finite(v) => v,
            ExtReal::PlusInf => f64::INFINITY,
        }
    }

    pub fn min(self, other: ExtReal) -> ExtReal {
        if self <= other {
            self
        } else {
            other
        }
    }

    pub fn max(self, other: ExtReal) -> ExtReal {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl PartialOrd for ExtReal {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        use ExtReal::*;
        Some(match (self, other) {
            (MinusInf, MinusInf) | (PlusInf, PlusInf) => std::cmp::Ordering::Equal,
            (MinusInf, _) | (_, PlusInf) => std::cmp::Ordering::Less,
            (_, MinusInf) | (PlusInf, _) => std::cmp::Ordering::Greater,
            (Finite(a), Finite(b)) => a.partial_cmp(b)?,
        })
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::MinusInf => write!(f, "-inf"),
            ExtReal::Finite(v) => write!(f, "{v}"),
            ExtReal::PlusInf => write!(f, "inf"),
        }
    }
}

impl FromStr for ExtReal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "+inf" | "Inf" | "infinity" => Ok(ExtReal::PlusInf),
            "-inf" | "-Inf" | "-infinity" => Ok(ExtReal::MinusInf),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(ExtReal::Finite)
                .ok_or_else(|| format!("cannot parse `{other}` as an extended real")),
        }
    }
}

impl From<f64> for ExtReal {
    fn from(v: f64) -> Self {
        if v == f64::INFINITY {
            ExtReal::PlusInf
        } else if v == f64::NEG_INFINITY {
            ExtReal::MinusInf
        } else {
            ExtReal::finite(v)
        }
    }
}

/// Dimension parameter N ∈ [1, ∞]; returns it validated.
pub fn validate_n(n: ExtReal) -> Result<ExtReal, CurvError> {
    match n {
        ExtReal::PlusInf => Ok(n),
        ExtReal::Finite(v) if v >= 1.0 => Ok(n),
        other => Err(CurvError::InvalidN(format!("{other} (need N >= 1)"))),
    }
}

/// 1/N with the convention 1/∞ = 0.
pub fn inv_n(n: ExtReal) -> f64 {
    match n {
        ExtReal::PlusInf => 0.0,
        ExtReal::Finite(v) => 1.0 / v,
        ExtReal::MinusInf => unreachable!("validated N"),
    }
}

// ── pointwise frames ────────────────────────────────────────────────────

/// Spectral data of A = a(x): rank, whitening W (W A Wᵀ = I_r), kernel.
#[derive(Clone, Debug)]
pub struct PointFrame {
    pub x: Vec<f64>,
    pub a: DMatrix<f64>,
    pub rank: usize,
    /// rank × n; rows are the whitened frame directions.
    pub w: DMatrix<f64>,
    /// n × (n − rank) orthonormal basis of ker A.
    pub null_basis: DMatrix<f64>,
}

impl PointFrame {
    pub fn new(op: &DiffusionOperator, x: &[f64]) -> Result<Self, CurvError> {
        let a = op.a_psd_at(x)?;
        let n = op.dim();
        let eig = nalgebra::SymmetricEigen::new(a.clone());
        let max = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        let thresh = PSD_TOL * (1.0 + max);
        let mut kept: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] >= thresh).collect();
        // largest eigenvalue first, for reproducible whitening
        kept.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let rank = kept.len();
        let mut w = DMatrix::zeros(rank, n);
        for (row, &i) in kept.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt().recip();
            for c in 0..n {
                w[(row, c)] = s * eig.eigenvectors[(c, i)];
            }
        }
        let dropped: Vec<usize> = (0..n).filter(|i| !kept.contains(i)).collect();
        let mut null_basis = DMatrix::zeros(n, n - rank);
        for (col, &i) in dropped.iter().enumerate() {
            for r in 0..n {
                null_basis[(r, col)] = eig.eigenvectors[(r, i)];
            }
        }
        Ok(PointFrame { x: x.to_vec(), a, rank, w, null_basis })
    }
}

/// Pointwise data of a function in the frame: Γ₂, Lf, whitened Hessian.
#[derive(Clone, Debug)]
pub struct FunctionFrame {
    pub g2: f64,
    pub lf: f64,
    pub h_hat: DMatrix<f64>,
    pub hs2: f64,
    pub tr_h: f64,
}

impl FunctionFrame {
    pub fn new(
        op: &DiffusionOperator,
        f: &Expr,
        frame: &PointFrame,
    ) -> Result<Self, CurvError> {
        let x = &frame.x;
        let g2 = op.gamma2(f, f).eval(x)?;
        let lf = op.apply_l(f).eval(x)?;
        let h = op.hessian_matrix(f, x)?;
        let h_hat = &frame.w * &h * frame.w.transpose();
        let hs2 = h_hat.iter().map(|v| v * v).sum();
        let tr_h = h_hat.trace();
        Ok(FunctionFrame { g2, lf, h_hat, hs2, tr_h })
    }
}

/// Pointwise effective dimension: rank of a(x).
pub fn dim_gamma(op: &DiffusionOperator, x: &[f64]) -> Result<usize, CurvError> {
    Ok(PointFrame::new(op, x)?.rank)
}

// ── the N-Ricci tensor ──────────────────────────────────────────────────

/// R_N(f)(x) by the closed form.
pub fn ricci_n(
    op: &DiffusionOperator,
    f: &Expr,
    x: &[f64],
    n: ExtReal,
) -> Result<ExtReal, CurvError> {
    let n = validate_n(n)?;
    let frame = PointFrame::new(op, x)?;
    let fd = FunctionFrame::new(op, f, &frame)?;
    Ok(ricci_from_frame(&fd, frame.rank, n))
}

fn ricci_from_frame(fd: &FunctionFrame, rank: usize, n: ExtReal) -> ExtReal {
    let r = rank as f64;
    let base = fd.g2 - fd.hs2;
    match n {
        ExtReal::PlusInf => ExtReal::finite(base),
        ExtReal::Finite(nv) => {
            if nv < r {
                ExtReal::MinusInf
            } else if nv == r {
                if (fd.tr_h - fd.lf).abs() <= DICHOTOMY_TOL * (1.0 + fd.lf.abs()) {
                    ExtReal::finite(base)
                } else {
                    ExtReal::MinusInf
                }
            } else {
                let d = fd.tr_h - fd.lf;
                ExtReal::finite(base - d * d / (nv - r))
            }
        }
        ExtReal::MinusInf => unreachable!("validated N"),
    }
}

// ── quadratic form over linear directions ───────────────────────────────

/// Symbolic per-operator tables for the coordinate functions; build once,
/// evaluate at many points.
#[derive(Clone, Debug)]
pub struct GammaTables {
    /// Γ₂(xⁱ, xʲ)
    pub gamma2: Vec<Vec<Expr>>,
    /// H_{xⁱ}(xʲ, xᵏ) indexed [i][j][k]
    pub hess: Vec<Vec<Vec<Expr>>>,
}

impl GammaTables {
    pub fn new(op: &DiffusionOperator) -> Self {
        let n = op.dim();
        let coords: Vec<Expr> = (1..=n).map(Expr::var).collect();
        let mut gamma2 = vec![vec![Expr::zero(); n]; n];
        for i in 0..n {
            for j in i..n {
                let g = op.gamma2(&coords[i], &coords[j]);
                gamma2[i][j] = g.clone();
                gamma2[j][i] = g;
            }
        }
        let mut hess = vec![vec![vec![Expr::zero(); n]; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in j..n {
                    let h = op.hessian(&coords[i], &coords[j], &coords[k]);
                    hess[i][j][k] = h.clone();
                    hess[i][k][j] = hess[i][j][k].clone();
                }
            }
        }
        GammaTables { gamma2, hess }
    }
}

/// R_N restricted to linear functions f = Σ λᵢ xⁱ as a quadratic form in λ.
#[derive(Clone, Debug)]
pub enum RicciForm {
    /// λᵀ M λ, finite in every direction.
    Form(DMatrix<f64>),
    /// N = rank: finite (= λᵀ M λ) on {tᵀλ = 0}, −∞ elsewhere.
    Degenerate { matrix: DMatrix<f64>, t: DVector<f64> },
    /// N < rank: −∞ in every direction.
    AllMinusInf,
}

pub fn ricci_form_matrix(
    op: &DiffusionOperator,
    x: &[f64],
    n: ExtReal,
) -> Result<RicciForm, CurvError> {
    let tables = GammaTables::new(op);
    ricci_form_with_tables(op, &tables, x, n)
}

pub fn ricci_form_with_tables(
    op: &DiffusionOperator,
    tables: &GammaTables,
    x: &[f64],
    n: ExtReal,
) -> Result<RicciForm, CurvError> {
    let n_param = validate_n(n)?;
    let frame = PointFrame::new(op, x)?;
    let dim = op.dim();
    let r = frame.rank;

    let mut g = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            g[(i, j)] = tables.gamma2[i][j].eval(x)?;
        }
    }
    // whitened coordinate Hessians Ĥ⁽ⁱ⁾ and their Gram matrix
    let mut h_hat = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut h = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            for k in 0..dim {
                h[(j, k)] = tables.hess[i][j][k].eval(x)?;
            }
        }
        h_hat.push(&frame.w * h * frame.w.transpose());
    }
    let mut s = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let v = h_hat[i].dot(&h_hat[j]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    let b = op.b_at(x)?;
    let t = DVector::from_fn(dim, |i, _| h_hat[i].trace() - b[i]);

    Ok(match n_param {
        ExtReal::PlusInf => RicciForm::Form(g - s),
        ExtReal::Finite(nv) => {
            let rf = r as f64;
            if nv < rf {
                RicciForm::AllMinusInf
            } else if nv == rf {
                RicciForm::Degenerate { matrix: g - s, t }
            } else {
                let m = g - s - (&t * t.transpose()) / (nv - rf);
                RicciForm::Form(m)
            }
        }
        ExtReal::MinusInf => unreachable!("validated N"),
    })
}

// ── BE(K,N) verification on grids ───────────────────────────────────────

/// Curvature bound: a constant or a scalar field K(x).
#[derive(Clone, Debug)]
pub enum KBound {
    Const(f64),
    Field(Expr),
}

impl KBound {
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            KBound::Const(v) => Ok(*v),
            KBound::Field(e) => e.eval(x),
        }
    }
}

impl From<f64> for KBound {
    fn from(v: f64) -> Self {
        KBound::Const(v)
    }
}

impl From<Expr> for KBound {
    fn from(e: Expr) -> Self {
        KBound::Field(e)
    }
}

#[derive(Clone, Debug)]
pub struct BePoint {
    pub x: Vec<f64>,
    /// min generalized eigenvalue of (M, A) over the range of A; None when
    /// R_N is −∞ in some non-degenerate direction.
    pub mu: Option<f64>,
    pub k: f64,
    pub pass: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug)]
pub struct BeCheck {
    pub pass: bool,
    /// min over grid of (mu − K); −∞ when any point fails with R_N = −∞
    pub min_slack: ExtReal,
    pub worst_x: Option<Vec<f64>>,
    pub points: Vec<BePoint>,
}

/// Grid check of R_N(f)(x) ≥ K(x)·Γ(f)(x) for all f; passes iff the min
/// generalized eigenvalue is ≥ K − 1e-8 at every grid point.
pub fn check_be(
    op: &DiffusionOperator,
    k: &KBound,
    n: ExtReal,
    grid: &[Vec<f64>],
) -> Result<BeCheck, CurvError> {
    if grid.is_empty() {
        return Err(CurvError::EmptyGrid);
    }
    let n = validate_n(n)?;
    let tables = GammaTables::new(op);
    let mut points = Vec::with_capacity(grid.len());
    let mut min_slack = ExtReal::PlusInf;
    let mut worst_x = None;
    for x in grid {
        let kv = k.eval(x)?;
        let form = ricci_form_with_tables(op, &tables, x, n)?;
        let frame = PointFrame::new(op, x)?;
        let point = be_point(&frame, form, kv, x);
        let slack = match (point.mu, point.pass) {
            (Some(mu), _) => Some(ExtReal::finite(mu - kv)),
            (None, false) => Some(ExtReal::MinusInf),
            (None, true) => None, // vacuous (rank 0) point
        };
        if let Some(s) = slack {
            if s < min_slack {
                min_slack = s;
                worst_x = Some(x.clone());
            }
        }
        points.push(point);
    }
    let pass = points.iter().all(|p| p.pass);
    Ok(BeCheck { pass, min_slack, worst_x, points })
}

fn be_point(frame: &PointFrame, form: RicciForm, kv: f64, x: &[f64]) -> BePoint {
    match form {
        RicciForm::AllMinusInf => BePoint {
            x: x.to_vec(),
            mu: None,
            k: kv,
            pass: false,
            note: Some("R_N = -inf in every direction (N < rank)".into()),
        },
        RicciForm::Degenerate { matrix, t } => {
            let at = &frame.a * &t;
            let t_scale = 1.0 + frame.a.norm() * t.norm();
            if at.norm() > 1e-8 * t_scale {
                BePoint {
                    x: x.to_vec(),
                    mu: None,
                    k: kv,
                    pass: false,
                    note: Some(
                        "R_N = -inf in a direction with Γ > 0 (tr H ≠ Lf at N = rank)".into(),
                    ),
                }
            } else {
                let mut p = form_point(frame, &matrix, kv, x);
                if t.norm() > 1e-8 * (1.0 + t.norm()) {
                    p.note = Some("N = rank; -inf only along Γ-null directions".into());
                }
                p
            }
        }
        RicciForm::Form(matrix) => form_point(frame, &matrix, kv, x),
    }
}

fn form_point(frame: &PointFrame, m: &DMatrix<f64>, kv: f64, x: &[f64]) -> BePoint {
    if frame.rank == 0 {
        return BePoint {
            x: x.to_vec(),
            mu: None,
            k: kv,
            pass: true,
            note: Some("a(x) = 0: Γ vanishes identically, bound is vacuous".into()),
        };
    }
    let whitened = &frame.w * m * frame.w.transpose();
    let mu = whitened
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v));
    // directions in ker A must carry a vanishing form (class invariance);
    // surface a note if numerics disagree
    let mut note = None;
    if frame.rank < frame.x.len() {
        let null_res = (m * &frame.null_basis).norm();
        if null_res > 1e-6 * (1.0 + m.norm()) {
            note = Some(format!("form does not vanish on ker A (residual {null_res:.2e})"));
        }
    }
    BePoint { x: x.to_vec(), mu: Some(mu), k: kv, pass: mu >= kv - 1e-8 && note.is_none(), note }
}

#[derive(Clone, Debug)]
pub struct BestK {
    pub value: ExtReal,
    pub argmin: Option<Vec<f64>>,
    pub per_point: Vec<(Vec<f64>, ExtReal)>,
}

/// sup{K : BE(K,N) holds on the grid} = inf over points and directions of
/// the generalized Rayleigh quotient of (M, A).
pub fn best_k(
    op: &DiffusionOperator,
    n: ExtReal,
    grid: &[Vec<f64>],
) -> Result<BestK, CurvError> {
    if grid.is_empty() {
        return Err(CurvError::EmptyGrid);
    }
    let n = validate_n(n)?;
    let tables = GammaTables::new(op);
    let mut per_point = Vec::with_capacity(grid.len());
    let mut value = ExtReal::PlusInf;
    let mut argmin = None;
    for x in grid {
        let frame = PointFrame::new(op, x)?;
        let form = ricci_form_with_tables(op, &tables, x, n)?;
        let kx = point_best_k(&frame, form);
        if kx < value {
            value = kx;
            argmin = Some(x.clone());
        }
        per_point.push((x.clone(), kx));
    }
    Ok(BestK { value, argmin, per_point })
}

fn point_best_k(frame: &PointFrame, form: RicciForm) -> ExtReal {
    if frame.rank == 0 {
        return ExtReal::PlusInf; // no constraint at a Γ-degenerate point
    }
    let min_gen_eig = |m: &DMatrix<f64>| {
        (&frame.w * m * frame.w.transpose())
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |acc, &v| acc.min(v))
    };
    match form {
        RicciForm::AllMinusInf => ExtReal::MinusInf,
        RicciForm::Degenerate { matrix, t } => {
            let at = &frame.a * &t;
            if at.norm() > 1e-8 * (1.0 + frame.a.norm() * t.norm()) {
                ExtReal::MinusInf
            } else {
                ExtReal::finite(min_gen_eig(&matrix))
            }
        }
        RicciForm::Form(matrix) => ExtReal::finite(min_gen_eig(&matrix)),
    }
}

// ── identity / estimate verifiers ───────────────────────────────────────

/// Residual of the pointwise Bochner-type equality
/// Γ₂(f) = R_N(f) + (1/N)(Lf)² + ‖Ĥ − (1/N)Lf·I‖² + (tr Ĥ − (r/N)Lf)²/(N−r),
/// with R_N from [`ricci_n`] and the remaining pieces evaluated directly.
pub fn verify_bochner_identity(
    op: &DiffusionOperator,
    f: &Expr,
    x: &[f64],
    n: ExtReal,
) -> Result<f64, CurvError> {
    let n = validate_n(n)?;
    let frame = PointFrame::new(op, x)?;
    let fd = FunctionFrame::new(op, f, &frame)?;
    let r = frame.rank as f64;
    let ricci = ricci_from_frame(&fd, frame.rank, n);
    let ExtReal::Finite(ricci) = ricci else {
        return Err(CurvError::RicciMinusInf { x: x.to_vec() });
    };
    let inv = inv_n(n);
    let dev = &fd.h_hat - DMatrix::identity(frame.rank, frame.rank) * (inv * fd.lf);
    let dev2: f64 = dev.iter().map(|v| v * v).sum();
    let tail = match n {
        ExtReal::PlusInf => 0.0,
        ExtReal::Finite(nv) => {
            if nv == r {
                // finite branch of the N = rank dichotomy: the tail vanishes
                0.0
            } else {
                let d = fd.tr_h - (r / nv) * fd.lf;
                d * d / (nv - r)
            }
        }
        ExtReal::MinusInf => unreachable!(),
    };
    let rhs = ricci + inv * fd.lf * fd.lf + dev2 + tail;
    Ok((fd.g2 - rhs).abs())
}

#[derive(Clone, Debug)]
pub struct SharpGamma2 {
    pub lhs: f64,
    pub rhs: f64,
    /// lhs − rhs; the estimate asserts this is ≥ 0
    pub slack: f64,
    pub denominator: f64,
}

/// Γ₂(f) ≥ R_N(f) + (1/N)(Lf)² + 2[H_f(g,h) − (1/N)Γ(g,h)Lf]² / D with
/// D = ((N−2)/N)Γ(g,h)² + Γ(g)Γ(h).
pub fn verify_sharp_gamma2(
    op: &DiffusionOperator,
    f: &Expr,
    g: &Expr,
    h: &Expr,
    x: &[f64],
    n: ExtReal,
) -> Result<SharpGamma2, CurvError> {
    let n = validate_n(n)?;
    let ricci = match ricci_n(op, f, x, n)? {
        ExtReal::Finite(v) => v,
        _ => return Err(CurvError::RicciMinusInf { x: x.to_vec() }),
    };
    let inv = inv_n(n);
    let coeff = 1.0 - 2.0 * inv; // (N−2)/N, = 1 at N = ∞
    let g2 = op.gamma2(f, f).eval(x)?;
    let lf = op.apply_l(f).eval(x)?;
    let ggh = op.gamma(g, h).eval(x)?;
    let gg = op.gamma_self(g).eval(x)?;
    let gh = op.gamma_self(h).eval(x)?;
    let hf = op.hessian(f, g, h).eval(x)?;
    let denominator = coeff * ggh * ggh + gg * gh;
    let scale = 1.0 + ggh.abs().powi(2) + gg.abs() * gh.abs();
    if denominator <= 1e-12 * scale {
        return Err(CurvError::DegenerateDenominator { x: x.to_vec() });
    }
    let num = hf - inv * ggh * lf;
    let rhs = ricci + inv * lf * lf + 2.0 * num * num / denominator;
    Ok(SharpGamma2 { lhs: g2, rhs, slack: g2 - rhs, denominator })
}

#[derive(Clone, Debug)]
pub struct SelfImprovement {
    /// Γ₂ minus the Hilbert–Schmidt-improved right-hand side
    pub r1: f64,
    /// Γ₂ minus the Γ-operator-norm right-hand side
    pub r2: f64,
    /// Γ₂ minus the single-direction right-hand side; None when Γ(f)(x) ≈ 0
    pub r3: Option<f64>,
    pub gamma_f: f64,
}

/// Residuals of the self-improvement chain under BE(K,N): each rhs is weaker
/// than the previous, so r1 ≤ r2 ≤ r3 and all are ≥ 0 when BE(K,N) holds.
/// Requires N > 1 (the chain divides by N − 1); N = ∞ is fine.
pub fn verify_self_improvement(
    op: &DiffusionOperator,
    f: &Expr,
    x: &[f64],
    n: ExtReal,
    k: f64,
) -> Result<SelfImprovement, CurvError> {
    let n = validate_n(n)?;
    if let ExtReal::Finite(nv) = n {
        if nv <= 1.0 {
            return Err(CurvError::InvalidN(format!("{nv} (self-improvement needs N > 1)")));
        }
    }
    let frame = PointFrame::new(op, x)?;
    let fd = FunctionFrame::new(op, f, &frame)?;
    let r = frame.rank as f64;
    let inv = inv_n(n);
    let gamma_f = op.gamma_self(f).eval(x)?;
    let base = k * gamma_f + inv * fd.lf * fd.lf;

    let dev = &fd.h_hat - DMatrix::identity(frame.rank, frame.rank) * (inv * fd.lf);
    let dev2: f64 = dev.iter().map(|v| v * v).sum();
    let tail = match n {
        ExtReal::PlusInf => 0.0,
        ExtReal::Finite(nv) => {
            if nv > r {
                let d = fd.tr_h - (r / nv) * fd.lf;
                d * d / (nv - r)
            } else {
                0.0
            }
        }
        ExtReal::MinusInf => unreachable!(),
    };
    let r1 = fd.g2 - (base + dev2 + tail);

    // N/(N−1), = 1 at N = ∞
    let amp = match n {
        ExtReal::PlusInf => 1.0,
        ExtReal::Finite(nv) => nv / (nv - 1.0),
        ExtReal::MinusInf => unreachable!(),
    };
    let op_norm = dev
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let r2 = fd.g2 - (base + amp * op_norm * op_norm);

    let r3 = if gamma_f > 1e-12 {
        let hff = op.hessian(f, f, f).eval(x)?;
        let dir = hff / gamma_f - inv * fd.lf;
        Some(fd.g2 - (base + amp * dir * dir))
    } else {
        None
    };
    Ok(SelfImprovement { r1, r2, r3, gamma_f })
}
