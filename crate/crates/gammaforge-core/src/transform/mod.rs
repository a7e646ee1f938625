//! Operator transformations L′u = f²Lu + f·Σ gᵢ Γ(hᵢ, u) and their
//! curvature-dimension bookkeeping.
//!
//! The five named specializations (time change, drift, metric, conformal,
//! Doob) are thin constructors for the general form; everything downstream
//! works off `(f, pairs)`. For each transformation the modified curvature
//! bound K′ contains an inner optimization over test functions u, which is
//! computed exactly: every term that appears — Γ(φ,u)², H_h(u,u),
//! Γ(φ,u)Γ(ψ,u) — depends on u only through ∇u(x), so the sup/inf over u is
//! the extreme generalized eigenvalue of an n×n form against a(x).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::curvature::{ricci_n, validate_n, CurvError, ExtReal, KBound, PointFrame};
use crate::diffusion::{DiffusionOperator, OpError};
use crate::expr::{EvalError, Expr};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error(transparent)]
    Curv(#[from] CurvError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("conformal factor must be positive: f({x:?}) = {value}")]
    NonpositiveF { x: Vec<f64>, value: f64 },
    #[error("inadmissible dimension parameters: {0}")]
    BadDimensions(String),
    #[error("Doob factor is not harmonic: |Lρ| = {residual:.3e} at {x:?}")]
    NotHarmonic { x: Vec<f64>, residual: f64 },
    #[error("Doob factor must be positive: ρ({x:?}) = {value}")]
    NonpositiveRho { x: Vec<f64>, value: f64 },
    #[error("empty grid")]
    EmptyGrid,
    #[error("R_N(u) = -inf at {x:?}; the bound needs finite base curvature")]
    DegenerateBase { x: Vec<f64> },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TransformKind {
    General,
    TimeChange,
    Drift,
    Metric,
    Conformal,
    Doob,
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TransformKind::General => "general",
            TransformKind::TimeChange => "time_change",
            TransformKind::Drift => "drift",
            TransformKind::Metric => "metric",
            TransformKind::Conformal => "conformal",
            TransformKind::Doob => "doob",
        };
        write!(f, "{name}")
    }
}

/// L′u = f²Lu + f·Σᵢ gᵢ Γ(hᵢ, u), with pairs = [(g₁,h₁), …].
#[derive(Clone, Debug)]
pub struct TransformSpec {
    pub f: Expr,
    pub pairs: Vec<(Expr, Expr)>,
    pub kind: TransformKind,
}

impl TransformSpec {
    pub fn general(f: Expr, pairs: Vec<(Expr, Expr)>) -> Self {
        TransformSpec { f, pairs, kind: TransformKind::General }
    }

    /// L′ = f²L.
    pub fn time_change(f: Expr) -> Self {
        TransformSpec { f, pairs: vec![], kind: TransformKind::TimeChange }
    }

    /// L′ = L + Γ(h, ·).
    pub fn drift(h: Expr) -> Self {
        TransformSpec {
            f: Expr::one(),
            pairs: vec![(Expr::one(), h)],
            kind: TransformKind::Drift,
        }
    }

    /// L′ = L + Z with Zu = Σ gᵢΓ(hᵢ,u).
    pub fn drift_field(pairs: Vec<(Expr, Expr)>) -> Self {
        TransformSpec { f: Expr::one(), pairs, kind: TransformKind::Drift }
    }

    /// L′ = f²L + Γ(f², ·).
    pub fn metric(f: Expr) -> Self {
        let pairs = vec![(Expr::num(2.0), f.clone())];
        TransformSpec { f, pairs, kind: TransformKind::Metric }
    }

    /// L′ = f²L − ((N−2)/2)·Γ(f², ·); the only kind that preserves N.
    pub fn conformal(f: Expr, n: ExtReal) -> Result<Self, TransformError> {
        let ExtReal::Finite(nv) = validate_n(n)? else {
            return Err(TransformError::BadDimensions(
                "conformal transformation needs a finite dimension parameter".into(),
            ));
        };
        let pairs = vec![(Expr::num(-(nv - 2.0)), f.clone())];
        Ok(TransformSpec { f, pairs, kind: TransformKind::Conformal })
    }

    /// Doob transform by ρ: a drift with h = 2·log ρ, admissible only for
    /// harmonic ρ > 0 (checked on the supplied grid).
    pub fn doob(
        op: &DiffusionOperator,
        rho: &Expr,
        grid: &[Vec<f64>],
        tol: f64,
    ) -> Result<Self, TransformError> {
        if grid.is_empty() {
            return Err(TransformError::EmptyGrid);
        }
        let l_rho = op.apply_l(rho);
        for x in grid {
            let value = rho.eval(x)?;
            if value <= 0.0 {
                return Err(TransformError::NonpositiveRho { x: x.clone(), value });
            }
            let residual = l_rho.eval(x)?.abs();
            if residual > tol * (1.0 + value.abs()) {
                return Err(TransformError::NotHarmonic { x: x.clone(), residual });
            }
        }
        let h = Expr::mul(&Expr::num(2.0), &Expr::log(rho));
        Ok(TransformSpec {
            f: Expr::one(),
            pairs: vec![(Expr::one(), h)],
            kind: TransformKind::Doob,
        })
    }

    fn f_is_one(&self) -> bool {
        self.f.as_const() == Some(1.0)
    }

    /// f(x), required positive.
    fn f_at(&self, x: &[f64]) -> Result<f64, TransformError> {
        let value = self.f.eval(x)?;
        if value <= 0.0 {
            return Err(TransformError::NonpositiveF { x: x.to_vec(), value });
        }
        Ok(value)
    }
}

/// Coefficients of L′: a′ = f²a, b′ = f²b + f·Σ gᵢ·(a∇hᵢ).
pub fn transform_operator(
    op: &DiffusionOperator,
    spec: &TransformSpec,
) -> Result<DiffusionOperator, TransformError> {
    let n = op.dim();
    let f2 = Expr::powi(&spec.f, 2);
    let a = (0..n)
        .map(|i| (0..n).map(|j| Expr::mul(&f2, &op.a()[i][j])).collect())
        .collect();
    let coords: Vec<Expr> = (1..=n).map(Expr::var).collect();
    let b = (0..n)
        .map(|i| {
            let drift = Expr::sum(
                spec.pairs
                    .iter()
                    .map(|(g, h)| Expr::mul(g, &op.gamma(h, &coords[i]))),
            );
            Expr::add(
                &Expr::mul(&f2, &op.b()[i]),
                &Expr::mul(&spec.f, &drift),
            )
        })
        .collect();
    Ok(DiffusionOperator::new(a, b)?)
}

// ── inner optimization over test functions ──────────────────────────────

/// Γ(φ, xⁱ) for i = 1..n, i.e. the vector a∇φ as expressions.
fn a_grad_exprs(op: &DiffusionOperator, phi: &Expr) -> Vec<Expr> {
    (1..=op.dim()).map(|i| op.gamma(phi, &Expr::var(i))).collect()
}

/// H_h(xⁱ, xʲ) as expressions; H_h(u,u)(x) = ∇uᵀ·(this at x)·∇u.
fn hess_exprs(op: &DiffusionOperator, h: &Expr) -> Vec<Vec<Expr>> {
    let n = op.dim();
    let coords: Vec<Expr> = (1..=n).map(Expr::var).collect();
    let mut rows = vec![vec![Expr::zero(); n]; n];
    for i in 0..n {
        for j in i..n {
            let e = op.hessian(h, &coords[i], &coords[j]);
            rows[i][j] = e.clone();
            rows[j][i] = e;
        }
    }
    rows
}

fn eval_vec(exprs: &[Expr], x: &[f64]) -> Result<DVector<f64>, EvalError> {
    let mut v = DVector::zeros(exprs.len());
    for (i, e) in exprs.iter().enumerate() {
        v[i] = e.eval(x)?;
    }
    Ok(v)
}

fn eval_mat(exprs: &[Vec<Expr>], x: &[f64]) -> Result<DMatrix<f64>, EvalError> {
    let n = exprs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = exprs[i][j].eval(x)?;
        }
    }
    Ok(m)
}

fn sym_outer(u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let m = u * v.transpose();
    (&m + m.transpose()) * 0.5
}

/// (min, max) of ξᵀQξ / ξᵀAξ over Γ-visible directions; None at rank 0.
fn inner_extremes(frame: &PointFrame, q: &DMatrix<f64>) -> Option<(f64, f64)> {
    if frame.rank == 0 {
        return None;
    }
    let wq = &frame.w * q * frame.w.transpose();
    let eigs = wq.symmetric_eigenvalues();
    let min = eigs.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let max = eigs.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    Some((min, max))
}

// ── dimension bookkeeping ───────────────────────────────────────────────

enum Regime {
    /// finite N, N′ ∈ (N, ∞]; carries (N, 1/(N′−N))
    Standard { n: f64, invdiff: f64 },
    /// N = N′ = ∞: admissible for pure drift only
    InfiniteDrift,
    /// N′ = N finite: the conformal exception
    ConformalSame { n: f64 },
}

fn classify_dims(
    spec: &TransformSpec,
    n: ExtReal,
    n_prime: ExtReal,
) -> Result<Regime, TransformError> {
    let n = validate_n(n)?;
    let n_prime = validate_n(n_prime)?;
    match (n, n_prime) {
        (ExtReal::PlusInf, ExtReal::PlusInf) => {
            if spec.f_is_one() {
                Ok(Regime::InfiniteDrift)
            } else {
                Err(TransformError::BadDimensions(
                    "N = N' = inf is admissible only for pure drift (f = 1)".into(),
                ))
            }
        }
        (ExtReal::PlusInf, _) => Err(TransformError::BadDimensions(
            "N' > N fails for N = inf".into(),
        )),
        (ExtReal::Finite(nv), ExtReal::PlusInf) => Ok(Regime::Standard { n: nv, invdiff: 0.0 }),
        (ExtReal::Finite(nv), ExtReal::Finite(npv)) => {
            if npv > nv {
                Ok(Regime::Standard { n: nv, invdiff: 1.0 / (npv - nv) })
            } else if npv == nv && spec.kind == TransformKind::Conformal {
                Ok(Regime::ConformalSame { n: nv })
            } else {
                Err(TransformError::BadDimensions(format!(
                    "need N' > N (got N = {nv}, N' = {npv}; N' = N only for conformal)"
                )))
            }
        }
        (ExtReal::MinusInf, _) | (_, ExtReal::MinusInf) => unreachable!("validated N"),
    }
}

// ── K′ for the general transformation ───────────────────────────────────

/// K′ from the general estimate:
/// K′ = f²K + ½Lf² − 2Γ(f) + Σ gᵢΓ(hᵢ,f)
///      + inf_u (1/Γ(u))[ −(1/(N′−N))((N−2)Γ(f,u) + Σ gᵢΓ(hᵢ,u))²
///                        − (N−2)Γ(f,u)² − Σ f gᵢ H_{hᵢ}(u,u)
///                        − Σ Γ(f gᵢ,u)Γ(hᵢ,u) ],
/// minimized over the grid. Γ-degenerate points impose no constraint.
pub fn kprime_general(
    op: &DiffusionOperator,
    spec: &TransformSpec,
    k: &KBound,
    n: ExtReal,
    n_prime: ExtReal,
    grid: &[Vec<f64>],
) -> Result<ExtReal, TransformError> {
    if grid.is_empty() {
        return Err(TransformError::EmptyGrid);
    }
    let regime = classify_dims(spec, n, n_prime)?;

    let f2 = Expr::powi(&spec.f, 2);
    let lf2 = op.apply_l(&f2);
    let gamma_f = op.gamma_self(&spec.f);
    let base_drift = Expr::sum(
        spec.pairs.iter().map(|(g, h)| Expr::mul(g, &op.gamma(h, &spec.f))),
    );
    let f_const = spec.f_is_one();
    let af = a_grad_exprs(op, &spec.f);
    let pair_data: Vec<(Expr, Vec<Expr>, Vec<Vec<Expr>>, Vec<Expr>)> = spec
        .pairs
        .iter()
        .map(|(g, h)| {
            let fg = Expr::mul(&spec.f, g);
            (g.clone(), a_grad_exprs(op, h), hess_exprs(op, h), a_grad_exprs(op, &fg))
        })
        .collect();

    let mut best = ExtReal::PlusInf;
    for x in grid {
        let fv = spec.f_at(x)?;
        let frame = PointFrame::new(op, x)?;
        if frame.rank == 0 {
            continue;
        }
        let kv = k.eval(x)?;
        let mut base = fv * fv * kv + 0.5 * lf2.eval(x)? - 2.0 * gamma_f.eval(x)?
            + base_drift.eval(x)?;

        let dim = op.dim();
        let mut q = DMatrix::zeros(dim, dim);
        let af_v = if f_const { DVector::zeros(dim) } else { eval_vec(&af, x)? };
        let mut z = DVector::zeros(dim);
        match regime {
            Regime::Standard { n: nv, invdiff } => {
                let n2 = nv - 2.0;
                if !f_const {
                    z += &af_v * n2;
                    q -= sym_outer(&af_v, &af_v) * n2;
                }
                for (g, ah, hess, afg) in &pair_data {
                    let gv = g.eval(x)?;
                    let ah_v = eval_vec(ah, x)?;
                    z += &ah_v * gv;
                    q -= eval_mat(hess, x)? * (fv * gv);
                    q -= sym_outer(&eval_vec(afg, x)?, &ah_v);
                }
                q -= sym_outer(&z, &z) * invdiff;
            }
            Regime::InfiniteDrift => {
                for (g, ah, hess, afg) in &pair_data {
                    let gv = g.eval(x)?;
                    q -= eval_mat(hess, x)? * (fv * gv);
                    q -= sym_outer(&eval_vec(afg, x)?, &eval_vec(ah, x)?);
                }
            }
            Regime::ConformalSame { n: nv } => {
                let n2 = nv - 2.0;
                if !f_const {
                    z += &af_v * n2;
                    q -= sym_outer(&af_v, &af_v) * n2;
                }
                for (g, ah, hess, afg) in &pair_data {
                    let gv = g.eval(x)?;
                    let ah_v = eval_vec(ah, x)?;
                    z += &ah_v * gv;
                    q -= eval_mat(hess, x)? * (fv * gv);
                    q -= sym_outer(&eval_vec(afg, x)?, &ah_v);
                }
                // N′ = N is only sound when the squared term cancels
                if z.norm() > 1e-8 * (1.0 + af_v.norm()) {
                    return Err(TransformError::BadDimensions(format!(
                        "N' = N requires the degree-one term to vanish (|z| = {:.3e} at {x:?})",
                        z.norm()
                    )));
                }
            }
        }

        let (inner_min, _) = inner_extremes(&frame, &q).expect("rank > 0");
        base += inner_min;
        best = best.min(ExtReal::finite(base));
    }
    Ok(best)
}

// ── dedicated formulas ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TimeChangeK {
    pub value: ExtReal,
    pub n_star: f64,
}

/// K′ = f²K + ½Lf² − N*Γ(f), N* = 2 + [(N−2)(N′−2)]₊/(N′−N).
pub fn kprime_time_change(
    op: &DiffusionOperator,
    f: &Expr,
    k: &KBound,
    n: ExtReal,
    n_prime: ExtReal,
    grid: &[Vec<f64>],
) -> Result<TimeChangeK, TransformError> {
    if grid.is_empty() {
        return Err(TransformError::EmptyGrid);
    }
    let spec = TransformSpec::time_change(f.clone());
    let Regime::Standard { n: nv, invdiff } = classify_dims(&spec, n, n_prime)? else {
        return Err(TransformError::BadDimensions(
            "time change needs finite N and N' > N".into(),
        ));
    };
    let n_star = if invdiff == 0.0 {
        2.0 + (nv - 2.0).max(0.0) // N′ = ∞: N* = max{N, 2}
    } else {
        let np = nv + 1.0 / invdiff;
        2.0 + ((nv - 2.0) * (np - 2.0)).max(0.0) * invdiff
    };
    let f2 = Expr::powi(f, 2);
    let lf2 = op.apply_l(&f2);
    let gamma_f = op.gamma_self(f);
    let mut best = ExtReal::PlusInf;
    for x in grid {
        let fv = spec.f_at(x)?;
        let kv = k.eval(x)?;
        let v = fv * fv * kv + 0.5 * lf2.eval(x)? - n_star * gamma_f.eval(x)?;
        best = best.min(ExtReal::finite(v));
    }
    Ok(TimeChangeK { value: best, n_star })
}

/// K′ = K − sup_u (1/Γ(u))[(DZ)(u,u) + (1/(N′−N))(Zu)²] for L′ = L + Z,
/// Zu = Σ gᵢΓ(hᵢ,u), (DZ)(u,u) = Σ[gᵢH_{hᵢ}(u,u) + Γ(gᵢ,u)Γ(hᵢ,u)].
pub fn kprime_drift(
    op: &DiffusionOperator,
    pairs: &[(Expr, Expr)],
    k: &KBound,
    n: ExtReal,
    n_prime: ExtReal,
    grid: &[Vec<f64>],
) -> Result<ExtReal, TransformError> {
    if grid.is_empty() {
        return Err(TransformError::EmptyGrid);
    }
    let spec = TransformSpec::drift_field(pairs.to_vec());
    let invdiff = match classify_dims(&spec, n, n_prime)? {
        Regime::Standard { invdiff, .. } => invdiff,
        Regime::InfiniteDrift => 0.0,
        Regime::ConformalSame { .. } => unreachable!("drift kind"),
    };
    let pair_data: Vec<(Expr, Vec<Expr>, Vec<Vec<Expr>>, Vec<Expr>)> = pairs
        .iter()
        .map(|(g, h)| (g.clone(), a_grad_exprs(op, h), hess_exprs(op, h), a_grad_exprs(op, g)))
        .collect();
    let mut best = ExtReal::PlusInf;
    for x in grid {
        let frame = PointFrame::new(op, x)?;
        if frame.rank == 0 {
            continue;
        }
        let kv = k.eval(x)?;
        let dim = op.dim();
        let mut q = DMatrix::zeros(dim, dim);
        let mut z = DVector::zeros(dim);
        for (g, ah, hess, ag) in &pair_data {
            let gv = g.eval(x)?;
            let ah_v = eval_vec(ah, x)?;
            z += &ah_v * gv;
            q += eval_mat(hess, x)? * gv;
            q += sym_outer(&eval_vec(ag, x)?, &ah_v);
        }
        q += sym_outer(&z, &z) * invdiff;
        let (_, sup) = inner_extremes(&frame, &q).expect("rank > 0");
        best = best.min(ExtReal::finite(kv - sup));
    }
    Ok(best)
}

/// K̃ = f²K + fLf − (N−1)Γ(f) + inf_u (N−2)·f·H_f(u,u)/Γ(u); the conformal
/// transformation keeps the dimension parameter N.
pub fn conformal_kprime(
    op: &DiffusionOperator,
    f: &Expr,
    k: &KBound,
    n: ExtReal,
    grid: &[Vec<f64>],
) -> Result<ExtReal, TransformError> {
    if grid.is_empty() {
        return Err(TransformError::EmptyGrid);
    }
    let ExtReal::Finite(nv) = validate_n(n)? else {
        return Err(TransformError::BadDimensions(
            "conformal transformation needs finite N".into(),
        ));
    };
    let spec = TransformSpec::conformal(f.clone(), ExtReal::Finite(nv))?;
    let lf = op.apply_l(f);
    let gamma_f = op.gamma_self(f);
    let hess_f = hess_exprs(op, f);
    let n2 = nv - 2.0;
    let mut best = ExtReal::PlusInf;
    for x in grid {
        let fv = spec.f_at(x)?;
        let frame = PointFrame::new(op, x)?;
        if frame.rank == 0 {
            continue;
        }
        let kv = k.eval(x)?;
        let h = eval_mat(&hess_f, x)?;
        let (min, max) = inner_extremes(&frame, &h).expect("rank > 0");
        let extreme = if n2 >= 0.0 { min } else { max };
        let v = fv * fv * kv + fv * lf.eval(x)? - (nv - 1.0) * gamma_f.eval(x)?
            + n2 * fv * extreme;
        best = best.min(ExtReal::finite(v));
    }
    Ok(best)
}

// ── the conformal equality ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ConformalIdentity {
    /// max over the grid of |LHS − RHS| / (1 + |LHS| + |RHS|)
    pub max_residual: f64,
    pub worst_x: Option<Vec<f64>>,
    pub checked: usize,
}

/// R̃_N(u) = e^{−4w}(R_N(u) + [−Lw − (N−2)Γ(w)]Γ(u) − (N−2)H_w(u,u)
///           + (N−2)Γ(w,u)²) for L̃ = e^{−2w}(L + (N−2)Γ(w,·)); an equality,
/// checked point by point.
pub fn conformal_ricci_identity(
    op: &DiffusionOperator,
    w: &Expr,
    n: ExtReal,
    u: &Expr,
    grid: &[Vec<f64>],
) -> Result<ConformalIdentity, TransformError> {
    if grid.is_empty() {
        return Err(TransformError::EmptyGrid);
    }
    let ExtReal::Finite(nv) = validate_n(n)? else {
        return Err(TransformError::BadDimensions(
            "the conformal identity needs finite N".into(),
        ));
    };
    let f = Expr::exp(&Expr::mul(&Expr::num(-1.0), w));
    let spec = TransformSpec::conformal(f, ExtReal::Finite(nv))?;
    let op_t = transform_operator(op, &spec)?;

    let n2 = nv - 2.0;
    let lw = op.apply_l(w);
    let gw = op.gamma_self(w);
    let gu = op.gamma_self(u);
    let gwu = op.gamma(w, u);
    let hw = op.hessian(w, u, u);
    // everything on the right except the e^{−4w}·R_N(u) head
    let rest = Expr::sub(
        &Expr::add(
            &Expr::mul(
                &Expr::sub(
                    &Expr::mul(&Expr::num(-1.0), &lw),
                    &Expr::mul(&Expr::num(n2), &gw),
                ),
                &gu,
            ),
            &Expr::mul(&Expr::num(n2), &Expr::powi(&gwu, 2)),
        ),
        &Expr::mul(&Expr::num(n2), &hw),
    );

    let mut max_residual = 0.0f64;
    let mut worst_x = None;
    let mut checked = 0;
    for x in grid {
        let lhs = match ricci_n(&op_t, u, x, ExtReal::Finite(nv))? {
            ExtReal::Finite(v) => v,
            _ => return Err(TransformError::DegenerateBase { x: x.clone() }),
        };
        let base = match ricci_n(op, u, x, ExtReal::Finite(nv))? {
            ExtReal::Finite(v) => v,
            _ => return Err(TransformError::DegenerateBase { x: x.clone() }),
        };
        let weight = (-4.0 * w.eval(x)?).exp();
        let rhs = weight * (base + rest.eval(x)?);
        let res = (lhs - rhs).abs() / (1.0 + lhs.abs() + rhs.abs());
        if res > max_residual {
            max_residual = res;
            worst_x = Some(x.clone());
        }
        checked += 1;
    }
    Ok(ConformalIdentity { max_residual, worst_x, checked })
}

// ── the general transformation bound ────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BoundCheck {
    /// min over (u, x) of (LHS − RHS) / (1 + |LHS| + |RHS|)
    pub min_residual: f64,
    pub max_residual: f64,
    pub worst: Option<(usize, Vec<f64>)>,
    pub checked: usize,
    /// points where the base or transformed Ricci value is −∞
    pub skipped: usize,
}

/// R′_{N′}(u) ≥ f⁴R_N(u) − (1/(N′−N))(((N−2)/2)Γ(f²,u) + Σ fgᵢΓ(hᵢ,u))²
///   + ½(f²Lf² − Γ(f²))Γ(u) − ((N−2)/4)Γ(f²,u)² − Σ f³gᵢH_{hᵢ}(u,u)
///   + ½Σ fgᵢΓ(hᵢ,f²)Γ(u) − Σ f²Γ(fgᵢ,u)Γ(hᵢ,u);
/// for pure drift at N = N′ = ∞ this is an equality.
pub fn verify_transform_bound(
    op: &DiffusionOperator,
    spec: &TransformSpec,
    n: ExtReal,
    n_prime: ExtReal,
    u_tests: &[Expr],
    grid: &[Vec<f64>],
) -> Result<BoundCheck, TransformError> {
    if grid.is_empty() || u_tests.is_empty() {
        return Err(TransformError::EmptyGrid);
    }
    let regime = classify_dims(spec, n, n_prime)?;
    let op_t = transform_operator(op, spec)?;
    let f_const = spec.f_is_one();

    let f2 = Expr::powi(&spec.f, 2);
    let f4 = Expr::powi(&spec.f, 4);
    let lf2 = op.apply_l(&f2);
    let gf2 = op.gamma_self(&f2);

    let mut min_residual = f64::INFINITY;
    let mut max_residual = f64::NEG_INFINITY;
    let mut worst = None;
    let mut checked = 0;
    let mut skipped = 0;

    for (ui, u) in u_tests.iter().enumerate() {
        let gu = op.gamma_self(u);
        let gf2u = op.gamma(&f2, u);
        // rest = everything on the right except f⁴·R_N(u)
        let mut terms: Vec<Expr> = vec![Expr::mul(
            &Expr::num(0.5),
            &Expr::mul(&Expr::sub(&Expr::mul(&f2, &lf2), &gf2), &gu),
        )];
        let (n2, invdiff) = match regime {
            Regime::Standard { n: nv, invdiff } => (nv - 2.0, invdiff),
            Regime::InfiniteDrift => (0.0, 0.0), // the f-terms vanish for f ≡ 1
            Regime::ConformalSame { n: nv } => (nv - 2.0, 0.0),
        };
        if !f_const {
            terms.push(Expr::mul(
                &Expr::num(-n2 / 4.0),
                &Expr::powi(&gf2u, 2),
            ));
        }
        let mut sq_parts: Vec<Expr> = Vec::new();
        if !f_const && !matches!(regime, Regime::ConformalSame { .. }) {
            sq_parts.push(Expr::mul(&Expr::num(n2 / 2.0), &gf2u));
        }
        for (g, h) in &spec.pairs {
            let ghu = op.gamma(h, u);
            let fg = Expr::mul(&spec.f, g);
            terms.push(Expr::mul(
                &Expr::num(-1.0),
                &Expr::mul(
                    &Expr::mul(&Expr::powi(&spec.f, 3), g),
                    &op.hessian(h, u, u),
                ),
            ));
            terms.push(Expr::mul(
                &Expr::num(0.5),
                &Expr::mul(&Expr::mul(&fg, &op.gamma(h, &f2)), &gu),
            ));
            terms.push(Expr::mul(
                &Expr::num(-1.0),
                &Expr::mul(&f2, &Expr::mul(&op.gamma(&fg, u), &ghu)),
            ));
            if !matches!(regime, Regime::ConformalSame { .. }) {
                sq_parts.push(Expr::mul(&fg, &ghu));
            }
        }
        if invdiff != 0.0 {
            terms.push(Expr::mul(
                &Expr::num(-invdiff),
                &Expr::powi(&Expr::sum(sq_parts.clone()), 2),
            ));
        }
        let rest = Expr::sum(terms);

        for x in grid {
            spec.f_at(x)?;
            let lhs = match ricci_n(&op_t, u, x, n_prime)? {
                ExtReal::Finite(v) => v,
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            let base = match ricci_n(op, u, x, n)? {
                ExtReal::Finite(v) => v,
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            let rhs = f4.eval(x)? * base + rest.eval(x)?;
            let res = (lhs - rhs) / (1.0 + lhs.abs() + rhs.abs());
            if res < min_residual {
                min_residual = res;
                worst = Some((ui, x.clone()));
            }
            max_residual = max_residual.max(res);
            checked += 1;
        }
    }
    if checked == 0 {
        return Err(TransformError::DegenerateBase { x: grid[0].clone() });
    }
    Ok(BoundCheck { min_residual, max_residual, worst, checked, skipped })
}

// ── wrong-constants falsifier ───────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ConstantsWitness {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    /// (LHS − RHS) / scale, < 0 at a violation
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct PairSearch {
    pub c1: f64,
    pub c2: f64,
    pub trials: usize,
    pub min_residual: f64,
    pub violation: Option<ConstantsWitness>,
}

#[derive(Clone, Debug)]
pub struct WrongConstantsReport {
    pub correct: PairSearch,
    pub wrong: Vec<PairSearch>,
}

/// Randomized search on Euclidean ℝⁿ (BE(0,n)) for violations of
///   Γ̃₂(u) − (1/N)(L̃u)² ≥ e^{−4w}[−Lw·Γ(u) + c₁Γ(w)Γ(u)
///                                   − (N−2)H_w(u,u) + c₂Γ(w,u)²]
/// with L̃ = e^{−2w}(L + (N−2)Γ(w,·)), for the candidate constant pairs
/// (c₁,c₂) = (−(N−2), N−2) [correct], (−N, 2(N−2)), and (−(N−4), N).
/// w and u range over quadratic polynomials via parameter slots, so the
/// three displays compile to fixed expression trees evaluated per trial.
pub fn wrong_constants_falsifier(
    n: usize,
    big_n: f64,
    trials: usize,
    rng: &mut impl rand::Rng,
) -> Result<WrongConstantsReport, TransformError> {
    if n < 3 || big_n != n as f64 {
        return Err(TransformError::BadDimensions(
            "the constants differ meaningfully only for N = n >= 3".into(),
        ));
    }
    let n2 = big_n - 2.0;

    // monomial slots: coefficients of w live at vars n+1.., of u after them
    let monomials: Vec<Expr> = {
        let mut m: Vec<Expr> = (1..=n).map(Expr::var).collect();
        for i in 1..=n {
            for j in i..=n {
                m.push(Expr::mul(&Expr::var(i), &Expr::var(j)));
            }
        }
        m
    };
    let m = monomials.len();
    let n_ext = n + 2 * m;
    let poly = |offset: usize| -> Expr {
        Expr::sum(
            monomials
                .iter()
                .enumerate()
                .map(|(k, mono)| Expr::mul(&Expr::var(offset + k + 1), mono)),
        )
    };
    let w = poly(n);
    let u = poly(n + m);

    // base operator: Euclidean laplacian on the extended chart
    let mut a = vec![vec![Expr::zero(); n_ext]; n_ext];
    for (i, row) in a.iter_mut().enumerate().take(n) {
        row[i] = Expr::one();
    }
    let op = DiffusionOperator::new(a, vec![Expr::zero(); n_ext]).expect("euclidean");

    let f = Expr::exp(&Expr::mul(&Expr::num(-1.0), &w));
    let spec = TransformSpec::conformal(f, ExtReal::Finite(big_n))?;
    let op_t = transform_operator(&op, &spec)?;
    let lhs_expr = Expr::sub(
        &op_t.gamma2(&u, &u),
        &Expr::mul(&Expr::num(1.0 / big_n), &Expr::powi(&op_t.apply_l(&u), 2)),
    );

    let lw = op.apply_l(&w);
    let gw = op.gamma_self(&w);
    let gu = op.gamma_self(&u);
    let gwu = op.gamma(&w, &u);
    let hw = op.hessian(&w, &u, &u);
    let weight = Expr::exp(&Expr::mul(&Expr::num(-4.0), &w));
    let rhs_for = |c1: f64, c2: f64| -> Expr {
        let bracket = Expr::sum([
            Expr::mul(&Expr::num(-1.0), &Expr::mul(&lw, &gu)),
            Expr::mul(&Expr::num(c1), &Expr::mul(&gw, &gu)),
            Expr::mul(&Expr::num(-n2), &hw),
            Expr::mul(&Expr::num(c2), &Expr::powi(&gwu, 2)),
        ]);
        Expr::mul(&weight, &bracket)
    };

    let pairs = [(-n2, n2), (-big_n, 2.0 * n2), (-(big_n - 4.0), big_n)];
    let rhs_exprs: Vec<Expr> = pairs.iter().map(|&(c1, c2)| rhs_for(c1, c2)).collect();

    let mut searches: Vec<PairSearch> = pairs
        .iter()
        .map(|&(c1, c2)| PairSearch {
            c1,
            c2,
            trials: 0,
            min_residual: f64::INFINITY,
            violation: None,
        })
        .collect();

    let mut point = vec![0.0; n_ext];
    for _ in 0..trials {
        let wc: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let uc: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        point[..n].copy_from_slice(&x);
        point[n..n + m].copy_from_slice(&wc);
        point[n + m..].copy_from_slice(&uc);
        let lhs = lhs_expr.eval(&point)?;
        for (search, rhs_expr) in searches.iter_mut().zip(&rhs_exprs) {
            let rhs = rhs_expr.eval(&point)?;
            let residual = (lhs - rhs) / (1.0 + lhs.abs() + rhs.abs());
            search.trials += 1;
            if residual < search.min_residual {
                search.min_residual = residual;
            }
            if residual < -1e-6 && search.violation.is_none() {
                search.violation = Some(ConstantsWitness {
                    w: wc.clone(),
                    u: uc.clone(),
                    x: x.clone(),
                    residual,
                });
            }
        }
    }
    let mut it = searches.into_iter();
    let correct = it.next().expect("three pairs");
    Ok(WrongConstantsReport { correct, wrong: it.collect() })
}

// ── smooth metric measure spaces ────────────────────────────────────────

/// K′ for the weighted transformation (d, m) → (e^w·d, e^v·m):
/// K′ = inf e^{−2w}[K − Lw + Γ(w, 2w−v)
///        − sup_u (1/Γ(u))((1/(N′−N))Γ(v−Nw,u)² + (N−2)Γ(w,u)²
///                          + H_{v−2w}(u,u) − 2Γ(w,u)Γ(v−2w,u))].
/// Admissible: N′ > N; w ≡ 0 additionally allows N = N′ = ∞; w = v/N
/// additionally allows N′ = N.
pub fn mms_kprime(
    op: &DiffusionOperator,
    v: &Expr,
    w: &Expr,
    k: &KBound,
    n: ExtReal,
    n_prime: ExtReal,
    grid: &[Vec<f64>],
) -> Result<ExtReal, TransformError> {
    if grid.is_empty() {
        return Err(TransformError::EmptyGrid);
    }
    let n = validate_n(n)?;
    let n_prime = validate_n(n_prime)?;
    let w_zero = w.as_const() == Some(0.0);

    enum MmsRegime {
        Standard { n: f64, invdiff: f64 },
        PureDrift,     // w ≡ 0, N = N′ = ∞
        Same { n: f64 }, // N′ = N, requires w = v/N pointwise
    }
    let regime = match (n, n_prime) {
        (ExtReal::PlusInf, ExtReal::PlusInf) if w_zero => MmsRegime::PureDrift,
        (ExtReal::Finite(nv), ExtReal::PlusInf) => MmsRegime::Standard { n: nv, invdiff: 0.0 },
        (ExtReal::Finite(nv), ExtReal::Finite(npv)) if npv > nv => {
            MmsRegime::Standard { n: nv, invdiff: 1.0 / (npv - nv) }
        }
        (ExtReal::Finite(nv), ExtReal::Finite(npv)) if npv == nv => MmsRegime::Same { n: nv },
        _ => {
            return Err(TransformError::BadDimensions(
                "need N' > N (w = 0 allows N = N' = inf; w = v/N allows N' = N)".into(),
            ))
        }
    };

    let lw = op.apply_l(w);
    let two_w_minus_v = Expr::sub(&Expr::mul(&Expr::num(2.0), w), v);
    let gw_cross = op.gamma(w, &two_w_minus_v);
    let v2w = Expr::sub(v, &Expr::mul(&Expr::num(2.0), w));
    let aw = a_grad_exprs(op, w);
    let av2w = a_grad_exprs(op, &v2w);
    let hess_v2w = hess_exprs(op, &v2w);

    let mut best = ExtReal::PlusInf;
    for x in grid {
        let frame = PointFrame::new(op, x)?;
        if frame.rank == 0 {
            continue;
        }
        let kv = k.eval(x)?;
        let mut q = eval_mat(&hess_v2w, x)?;
        let aw_v = eval_vec(&aw, x)?;
        let av2w_v = eval_vec(&av2w, x)?;
        q -= sym_outer(&aw_v, &av2w_v) * 2.0;
        match &regime {
            MmsRegime::Standard { n: nv, invdiff } => {
                q += sym_outer(&aw_v, &aw_v) * (nv - 2.0);
                if *invdiff != 0.0 {
                    // A∇(v − Nw) = A∇(v − 2w) − (N − 2)A∇w
                    let avnw = &av2w_v - &aw_v * (nv - 2.0);
                    q += sym_outer(&avnw, &avnw) * *invdiff;
                }
            }
            MmsRegime::PureDrift => {}
            MmsRegime::Same { n: nv } => {
                q += sym_outer(&aw_v, &aw_v) * (nv - 2.0);
                let avnw = &av2w_v - &aw_v * (nv - 2.0);
                if avnw.norm() > 1e-8 * (1.0 + av2w_v.norm() + aw_v.norm()) {
                    return Err(TransformError::BadDimensions(format!(
                        "N' = N requires w = v/N (|A∇(v − Nw)| = {:.3e} at {x:?})",
                        avnw.norm()
                    )));
                }
            }
        }
        let (_, sup) = inner_extremes(&frame, &q).expect("rank > 0");
        let weight = (-2.0 * w.eval(x)?).exp();
        let value = weight * (kv - lw.eval(x)? + gw_cross.eval(x)? - sup);
        best = best.min(ExtReal::finite(value));
    }
    Ok(best)
}
