//! Diffusion operators in coordinates and their carre-du-champ calculus.
//!
//! An operator is L u = Σ aᵢⱼ ∂ᵢ∂ⱼ u + Σ bᵢ ∂ᵢ u with a(x) symmetric
//! positive semi-definite. All calculus objects (Γ, Γ₂, Hessian) are built
//! symbolically and evaluated pointwise.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{EvalError, Expr};

/// Relative eigenvalue floor for the pointwise PSD check of a(x).
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("metric is singular (determinant vanishes identically)")]
    SingularMetric,
    #[error("coefficient matrix not positive semi-definite at {x:?} (min eigenvalue {min_eig:.3e})")]
    NotPsd { x: Vec<f64>, min_eig: f64 },
    #[error("a(x) must have full rank at {x:?} (rank {rank} of {n})")]
    FullRankRequired { x: Vec<f64>, rank: usize, n: usize },
}

/// L u = Σ aᵢⱼ ∂ᵢ∂ⱼ u + Σ bᵢ ∂ᵢ u on an n-dimensional chart.
#[derive(Clone, Debug)]
pub struct DiffusionOperator {
    n: usize,
    a: Vec<Vec<Expr>>,
    b: Vec<Expr>,
    symmetrized: bool,
}

impl DiffusionOperator {
    /// Builds the operator; an asymmetric `a` is replaced by (a + aᵀ)/2 and
    /// flagged via [`DiffusionOperator::was_symmetrized`].
    pub fn new(a: Vec<Vec<Expr>>, b: Vec<Expr>) -> Result<Self, OpError> {
        let n = b.len();
        if n == 0 {
            return Err(OpError::Shape("dimension must be at least 1".into()));
        }
        if a.len() != n || a.iter().any(|row| row.len() != n) {
            return Err(OpError::Shape(format!(
                "a must be {n}x{n} to match the {n}-vector b"
            )));
        }
        let mut symmetrized = false;
        let mut sym = a.clone();
        let half = Expr::num(0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                if a[i][j] != a[j][i] {
                    symmetrized = true;
                    let avg = Expr::mul(&half, &Expr::add(&a[i][j], &a[j][i]));
                    sym[i][j] = avg.clone();
                    sym[j][i] = avg;
                }
            }
        }
        Ok(DiffusionOperator { n, a: sym, b, symmetrized })
    }

    /// Flat Laplacian on ℝⁿ.
    pub fn euclidean(n: usize) -> Self {
        let a = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { Expr::one() } else { Expr::zero() })
                    .collect()
            })
            .collect();
        let b = vec![Expr::zero(); n];
        DiffusionOperator::new(a, b).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn a(&self) -> &[Vec<Expr>] {
        &self.a
    }

    pub fn b(&self) -> &[Expr] {
        &self.b
    }

    pub fn was_symmetrized(&self) -> bool {
        self.symmetrized
    }

    /// L u.
    pub fn apply_l(&self, u: &Expr) -> Expr {
        let grad: Vec<Expr> = (1..=self.n).map(|i| u.diff(i)).collect();
        let mut terms = Vec::with_capacity(self.n * self.n + self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                terms.push(Expr::mul(&self.a[i][j], &grad[i].diff(j + 1)));
            }
        }
        for i in 0..self.n {
            terms.push(Expr::mul(&self.b[i], &grad[i]));
        }
        Expr::sum(terms)
    }

    /// Γ(u,v) = Σ aᵢⱼ ∂ᵢu ∂ⱼv.
    pub fn gamma(&self, u: &Expr, v: &Expr) -> Expr {
        let gu: Vec<Expr> = (1..=self.n).map(|i| u.diff(i)).collect();
        let gv: Vec<Expr> = (1..=self.n).map(|i| v.diff(i)).collect();
        let mut terms = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                terms.push(Expr::mul(&self.a[i][j], &Expr::mul(&gu[i], &gv[j])));
            }
        }
        Expr::sum(terms)
    }

    /// Γ(u) = Γ(u,u).
    pub fn gamma_self(&self, u: &Expr) -> Expr {
        self.gamma(u, u)
    }

    /// Γ via the operator bracket ½[L(uv) − u Lv − v Lu]; same function as
    /// [`Self::gamma`], kept for cross-checks.
    pub fn gamma_bracket(&self, u: &Expr, v: &Expr) -> Expr {
        let luv = self.apply_l(&Expr::mul(u, v));
        let t = Expr::sub(
            &luv,
            &Expr::add(&Expr::mul(u, &self.apply_l(v)), &Expr::mul(v, &self.apply_l(u))),
        );
        Expr::mul(&Expr::num(0.5), &t)
    }

    /// Γ₂(u,v) = ½[L Γ(u,v) − Γ(u, Lv) − Γ(v, Lu)].
    pub fn gamma2(&self, u: &Expr, v: &Expr) -> Expr {
        let g = self.gamma(u, v);
        let t = Expr::sub(
            &self.apply_l(&g),
            &Expr::add(&self.gamma(u, &self.apply_l(v)), &self.gamma(v, &self.apply_l(u))),
        );
        Expr::mul(&Expr::num(0.5), &t)
    }

    /// H_f(g,h) = ½[Γ(g, Γ(f,h)) + Γ(h, Γ(f,g)) − Γ(f, Γ(g,h))].
    pub fn hessian(&self, f: &Expr, g: &Expr, h: &Expr) -> Expr {
        let t = Expr::sub(
            &Expr::add(
                &self.gamma(g, &self.gamma(f, h)),
                &self.gamma(h, &self.gamma(f, g)),
            ),
            &self.gamma(f, &self.gamma(g, h)),
        );
        Expr::mul(&Expr::num(0.5), &t)
    }

    pub fn a_at(&self, x: &[f64]) -> Result<DMatrix<f64>, OpError> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(i, j)] = self.a[i][j].eval(x)?;
            }
        }
        Ok(m)
    }

    pub fn b_at(&self, x: &[f64]) -> Result<DVector<f64>, OpError> {
        let mut v = DVector::zeros(self.n);
        for i in 0..self.n {
            v[i] = self.b[i].eval(x)?;
        }
        Ok(v)
    }

    /// Evaluates a(x), enforcing symmetry-PSD up to `PSD_TOL` relative slack.
    pub fn a_psd_at(&self, x: &[f64]) -> Result<DMatrix<f64>, OpError> {
        let m = self.a_at(x)?;
        let eig = m.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOL * (1.0 + max) {
            return Err(OpError::NotPsd { x: x.to_vec(), min_eig: min });
        }
        Ok(m)
    }

    /// Coordinate Hessian matrix Hᵢⱼ = H_f(xⁱ, xʲ)(x). For any g, h one then
    /// has H_f(g,h)(x) = ∇g(x)ᵀ H ∇h(x).
    pub fn hessian_matrix(&self, f: &Expr, x: &[f64]) -> Result<DMatrix<f64>, OpError> {
        let coords: Vec<Expr> = (1..=self.n).map(Expr::var).collect();
        let mut h = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in i..self.n {
                let v = self.hessian(f, &coords[i], &coords[j]).eval(x)?;
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(h)
    }

    /// Both sides of the two L-log chain-rule identities,
    ///   (1/p) f^{−p} L f^p        = L log f + p Γ(log f),
    ///   (1/p) f^{−p} H_{f^p}(u,u) = H_{log f}(u,u) + p Γ(log f, u)²,
    /// as expressions (valid where f > 0, p ≠ 0).
    pub fn chain_rules_llog(&self, f: &Expr, p: f64, u: &Expr) -> LlogChainRule {
        let pe = Expr::num(p);
        let fp = Expr::pow(f, &pe);
        let fmp = Expr::pow(f, &Expr::num(-p));
        let inv_p = Expr::num(1.0 / p);
        let logf = Expr::log(f);

        let op_lhs = Expr::mul(&inv_p, &Expr::mul(&fmp, &self.apply_l(&fp)));
        let op_rhs = Expr::add(
            &self.apply_l(&logf),
            &Expr::mul(&pe, &self.gamma_self(&logf)),
        );
        let hess_lhs = Expr::mul(&inv_p, &Expr::mul(&fmp, &self.hessian(&fp, u, u)));
        let hess_rhs = Expr::add(
            &self.hessian(&logf, u, u),
            &Expr::mul(&pe, &Expr::powi(&self.gamma(&logf, u), 2)),
        );
        LlogChainRule { op_lhs, op_rhs, hess_lhs, hess_rhs }
    }

    /// Checks Γ(fᵢ,fⱼ)(x) = δᵢⱼ, H_{fᵢ}(fⱼ,fₖ)(x) = 0, Lfᵢ(x) = 0.
    pub fn check_normal_coordinates(
        &self,
        fs: &[Expr],
        x: &[f64],
        tol: f64,
    ) -> Result<NormalCoordCheck, OpError> {
        let k = fs.len();
        let mut gamma_res = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let v = self.gamma(&fs[i], &fs[j]).eval(x)?;
                let target = if i == j { 1.0 } else { 0.0 };
                gamma_res = gamma_res.max((v - target).abs());
            }
        }
        let mut hessian_res = 0.0f64;
        for f in fs {
            for j in 0..k {
                for l in j..k {
                    let v = self.hessian(f, &fs[j], &fs[l]).eval(x)?;
                    hessian_res = hessian_res.max(v.abs());
                }
            }
        }
        let mut drift_res = 0.0f64;
        for f in fs {
            drift_res = drift_res.max(self.apply_l(f).eval(x)?.abs());
        }
        Ok(NormalCoordCheck {
            ok: gamma_res <= tol && hessian_res <= tol && drift_res <= tol,
            gamma_res,
            hessian_res,
            drift_res,
        })
    }

    /// Constructs a chart (e₁..eₙ) with Γ(eᵢ,eⱼ)(x) = δᵢⱼ and vanishing
    /// Hessians at x: eᵢ = ℓᵢ + ½(z−x)ᵀCᵢ(z−x) with ℓ the A^{-1/2}-whitened
    /// linear frame and Cᵢ = −A⁻¹ H_{ℓᵢ} A⁻¹. The drift condition Leᵢ(x) = 0
    /// then holds exactly when the operator's first-order part at x is the
    /// metric (Laplace–Beltrami) one; for other drifts no chart satisfies it.
    pub fn normal_coordinates_at(&self, x: &[f64]) -> Result<Vec<Expr>, OpError> {
        let a = self.a_psd_at(x)?;
        let eig = nalgebra::SymmetricEigen::new(a.clone());
        let max = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if eig.eigenvalues.iter().any(|&v| v < PSD_TOL * (1.0 + max)) {
            let rank = eig
                .eigenvalues
                .iter()
                .filter(|&&v| v >= PSD_TOL * (1.0 + max))
                .count();
            return Err(OpError::FullRankRequired { x: x.to_vec(), rank, n: self.n });
        }
        // A^{-1/2} and A^{-1} from the same eigendecomposition
        let q = &eig.eigenvectors;
        let inv_sqrt = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.powf(-0.5)))
            * q.transpose();
        let inv = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.recip())) * q.transpose();

        let shifted: Vec<Expr> = (0..self.n)
            .map(|j| Expr::sub(&Expr::var(j + 1), &Expr::num(x[j])))
            .collect();
        let mut frame = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let lin = Expr::sum(
                (0..self.n).map(|j| Expr::mul(&Expr::num(inv_sqrt[(i, j)]), &shifted[j])),
            );
            let h = self.hessian_matrix(&lin, x)?;
            let c = -(&inv * &h * &inv);
            let mut quad_terms = Vec::new();
            for j in 0..self.n {
                for l in 0..self.n {
                    quad_terms.push(Expr::mul(
                        &Expr::num(0.5 * c[(j, l)]),
                        &Expr::mul(&shifted[j], &shifted[l]),
                    ));
                }
            }
            frame.push(Expr::add(&lin, &Expr::sum(quad_terms)));
        }
        Ok(frame)
    }
}

#[derive(Clone, Debug)]
pub struct LlogChainRule {
    pub op_lhs: Expr,
    pub op_rhs: Expr,
    pub hess_lhs: Expr,
    pub hess_rhs: Expr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalCoordCheck {
    pub ok: bool,
    pub gamma_res: f64,
    pub hessian_res: f64,
    pub drift_res: f64,
}

/// A Riemannian metric g on an n-dimensional chart.
#[derive(Clone, Debug)]
pub struct RiemannianSpec {
    n: usize,
    g: Vec<Vec<Expr>>,
}

impl RiemannianSpec {
    pub fn new(g: Vec<Vec<Expr>>) -> Result<Self, OpError> {
        let n = g.len();
        if n == 0 || g.iter().any(|row| row.len() != n) {
            return Err(OpError::Shape("metric must be square and non-empty".into()));
        }
        let mut sym = g.clone();
        let half = Expr::num(0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                if g[i][j] != g[j][i] {
                    let avg = Expr::mul(&half, &Expr::add(&g[i][j], &g[j][i]));
                    sym[i][j] = avg.clone();
                    sym[j][i] = avg;
                }
            }
        }
        Ok(RiemannianSpec { n, g: sym })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> &[Vec<Expr>] {
        &self.g
    }
}

/// Laplace–Beltrami operator of g: a = g⁻¹ and
/// bʲ = Σᵢ ∂ᵢ(gⁱʲ) + ½ Σᵢ gⁱʲ ∂ᵢ(det g)/det g.
pub fn laplace_beltrami(spec: &RiemannianSpec) -> Result<DiffusionOperator, OpError> {
    let n = spec.n;
    let det = det_expr(&spec.g);
    if det.is_zero() {
        return Err(OpError::SingularMetric);
    }
    let adj = adjugate_expr(&spec.g);
    let mut a = vec![vec![Expr::zero(); n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = Expr::div(&adj[i][j], &det);
        }
    }
    let mut b = Vec::with_capacity(n);
    for j in 0..n {
        let mut terms = Vec::new();
        for i in 0..n {
            terms.push(a[i][j].diff(i + 1));
            let log_det_term = Expr::div(&det.diff(i + 1), &det);
            terms.push(Expr::mul(
                &Expr::num(0.5),
                &Expr::mul(&a[i][j], &log_det_term),
            ));
        }
        b.push(Expr::sum(terms));
    }
    DiffusionOperator::new(a, b)
}

/// Determinant by cofactor expansion (charts are low-dimensional).
fn det_expr(m: &[Vec<Expr>]) -> Expr {
    let n = m.len();
    if n == 1 {
        return m[0][0].clone();
    }
    let mut terms = Vec::with_capacity(n);
    for j in 0..n {
        let minor = minor_matrix(m, 0, j);
        let cof = Expr::mul(&m[0][j], &det_expr(&minor));
        terms.push(if j % 2 == 0 { cof } else { Expr::neg(&cof) });
    }
    Expr::sum(terms)
}

fn minor_matrix(m: &[Vec<Expr>], row: usize, col: usize) -> Vec<Vec<Expr>> {
    m.iter()
        .enumerate()
        .filter(|&(i, _)| i != row)
        .map(|(_, r)| {
            r.iter()
                .enumerate()
                .filter(|&(j, _)| j != col)
                .map(|(_, e)| e.clone())
                .collect()
        })
        .collect()
}

/// adj(m)ᵢⱼ = (−1)^{i+j} det(minor(j,i)), so m⁻¹ = adj/det.
fn adjugate_expr(m: &[Vec<Expr>]) -> Vec<Vec<Expr>> {
    let n = m.len();
    if n == 1 {
        return vec![vec![Expr::one()]];
    }
    let mut adj = vec![vec![Expr::zero(); n]; n];
    for i in 0..n {
        for j in 0..n {
            let minor = minor_matrix(m, j, i);
            let d = det_expr(&minor);
            adj[i][j] = if (i + j) % 2 == 0 { d } else { Expr::neg(&d) };
        }
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use proptest::prelude::*;

    fn e(s: &str, n: usize) -> Expr {
        parse(s, n).unwrap()
    }

    fn ou_1d() -> DiffusionOperator {
        DiffusionOperator::new(vec![vec![Expr::one()]], vec![e("-x1", 1)]).unwrap()
    }

    /// Non-constant SPD coefficient field on ℝ², with drift.
    fn curved_2d() -> DiffusionOperator {
        let a = vec![
            vec![e("1 + x1^2", 2), e("x1*x2/2", 2)],
            vec![e("x1*x2/2", 2), e("1 + x2^2", 2)],
        ];
        let b = vec![e("-x1 + x2/3", 2), e("sin(x1)", 2)];
        DiffusionOperator::new(a, b).unwrap()
    }

    /// Stereographic chart of the unit 2-sphere: g = 4/(1+|x|²)² δ.
    fn sphere_chart() -> RiemannianSpec {
        let w = "4/(1 + x1^2 + x2^2)^2";
        RiemannianSpec::new(vec![
            vec![e(w, 2), Expr::zero()],
            vec![Expr::zero(), e(w, 2)],
        ])
        .unwrap()
    }

    #[test]
    fn gamma_frozen_values() {
        let op = DiffusionOperator::euclidean(1);
        // Γ(x², x²) = 4x² -> 36 at x = 3
        let g = op.gamma_self(&e("x1^2", 1));
        assert_eq!(g.eval(&[3.0]).unwrap(), 36.0);

        let op2 = DiffusionOperator::euclidean(2);
        // Γ(x1²+x2², x1·x2) = 4·x1·x2 -> 8 at (1,2)
        let g = op2.gamma(&e("x1^2 + x2^2", 2), &e("x1*x2", 2));
        assert_eq!(g.eval(&[1.0, 2.0]).unwrap(), 8.0);
    }

    #[test]
    fn gamma2_of_ou_coordinate_is_one() {
        let op = ou_1d();
        let g2 = op.gamma2(&e("x1", 1), &e("x1", 1));
        for x in [-2.0, 0.0, 0.7, 5.0] {
            assert!((g2.eval(&[x]).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_agrees_with_operator_bracket() {
        let ops = [DiffusionOperator::euclidean(2), curved_2d()];
        let cases = ["x1^2*x2", "sin(x1) + x2^3", "exp(x1/2 - x2/3)"];
        let pts = [[0.3, -0.4], [1.1, 0.9], [-0.8, 0.2]];
        for op in &ops {
            for u in cases {
                for v in cases {
                    let direct = op.gamma(&e(u, 2), &e(v, 2));
                    let bracket = op.gamma_bracket(&e(u, 2), &e(v, 2));
                    for x in &pts {
                        let d = direct.eval(x).unwrap();
                        let b = bracket.eval(x).unwrap();
                        assert!(
                            (d - b).abs() <= 1e-9 * (1.0 + d.abs()),
                            "Γ({u},{v}) at {x:?}: {d} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gamma_with_coordinate_gives_a_grad_row() {
        let op = curved_2d();
        let f = e("x1^3 - x2*x1", 2);
        let x = [0.6, -1.2];
        let a = op.a_at(&x).unwrap();
        let grad = nalgebra::DVector::from_vec(vec![
            f.diff(1).eval(&x).unwrap(),
            f.diff(2).eval(&x).unwrap(),
        ]);
        let ag = &a * &grad;
        for j in 0..2 {
            let v = op.gamma(&f, &Expr::var(j + 1)).eval(&x).unwrap();
            assert!((v - ag[j]).abs() < 1e-12);
        }
    }

    /// L ψ(f₁,f₂) = Σ ψᵢ Lfᵢ + Σ ψᵢⱼ Γ(fᵢ,fⱼ) and the matching rules for
    /// Γ and Γ₂ (the Γ₂ rule includes the Hessian cross term).
    #[test]
    fn diffusion_chain_rules() {
        let op = curved_2d();
        let f1 = e("x1^2 - x2", 2);
        let f2 = e("x1*x2 + 1", 2);
        // ψ(u,v) = u²v + sin(u)
        let compose = Expr::add(
            &Expr::mul(&Expr::powi(&f1, 2), &f2),
            &Expr::fun(crate::expr::Fun::Sin, &f1),
        );
        let psi1 = Expr::add(
            &Expr::mul(&Expr::num(2.0), &Expr::mul(&f1, &f2)),
            &Expr::fun(crate::expr::Fun::Cos, &f1),
        );
        let psi2 = Expr::powi(&f1, 2);
        let psi11 = Expr::sub(
            &Expr::mul(&Expr::num(2.0), &f2),
            &Expr::fun(crate::expr::Fun::Sin, &f1),
        );
        let psi12 = Expr::mul(&Expr::num(2.0), &f1);
        let psi22 = Expr::zero();

        let fs = [&f1, &f2];
        let psi_d = [&psi1, &psi2];
        let psi_dd = [[&psi11, &psi12], [&psi12, &psi22]];
        let pts = [[0.25, -0.5], [1.0, 0.4], [-0.7, 0.9]];

        // operator chain rule
        let lhs = op.apply_l(&compose);
        for x in &pts {
            let mut rhs = 0.0;
            for i in 0..2 {
                rhs += psi_d[i].eval(x).unwrap() * op.apply_l(fs[i]).eval(x).unwrap();
            }
            for i in 0..2 {
                for j in 0..2 {
                    rhs += psi_dd[i][j].eval(x).unwrap()
                        * op.gamma(fs[i], fs[j]).eval(x).unwrap();
                }
            }
            let l = lhs.eval(x).unwrap();
            assert!((l - rhs).abs() <= 1e-8 * (1.0 + l.abs()), "L chain at {x:?}");
        }

        // Γ chain rule
        let lhs = op.gamma_self(&compose);
        for x in &pts {
            let mut rhs = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    rhs += psi_d[i].eval(x).unwrap()
                        * psi_d[j].eval(x).unwrap()
                        * op.gamma(fs[i], fs[j]).eval(x).unwrap();
                }
            }
            let l = lhs.eval(x).unwrap();
            assert!((l - rhs).abs() <= 1e-8 * (1.0 + l.abs()), "Γ chain at {x:?}");
        }

        // Γ₂ chain rule
        let lhs = op.gamma2(&compose, &compose);
        for x in &pts {
            let mut rhs = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    rhs += psi_d[i].eval(x).unwrap()
                        * psi_d[j].eval(x).unwrap()
                        * op.gamma2(fs[i], fs[j]).eval(x).unwrap();
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        rhs += 2.0
                            * psi_d[i].eval(x).unwrap()
                            * psi_dd[j][k].eval(x).unwrap()
                            * op.hessian(fs[i], fs[j], fs[k]).eval(x).unwrap();
                    }
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            rhs += psi_dd[i][j].eval(x).unwrap()
                                * psi_dd[k][l].eval(x).unwrap()
                                * op.gamma(fs[i], fs[k]).eval(x).unwrap()
                                * op.gamma(fs[j], fs[l]).eval(x).unwrap();
                        }
                    }
                }
            }
            let l = lhs.eval(x).unwrap();
            assert!((l - rhs).abs() <= 1e-7 * (1.0 + l.abs()), "Γ₂ chain at {x:?}");
        }
    }

    #[test]
    fn hessian_is_tensorial_via_coordinate_matrix() {
        for op in [DiffusionOperator::euclidean(2), curved_2d()] {
            let f = e("x1^3*x2 - cos(x2)", 2);
            let g = e("x1*x2^2", 2);
            let h = e("sin(x1) - x2", 2);
            for x in [[0.4, 0.8], [-0.9, 0.3]] {
                let hm = op.hessian_matrix(&f, &x).unwrap();
                let gg = nalgebra::DVector::from_vec(vec![
                    g.diff(1).eval(&x).unwrap(),
                    g.diff(2).eval(&x).unwrap(),
                ]);
                let gh = nalgebra::DVector::from_vec(vec![
                    h.diff(1).eval(&x).unwrap(),
                    h.diff(2).eval(&x).unwrap(),
                ]);
                let via_matrix = (gg.transpose() * &hm * &gh)[(0, 0)];
                let direct = op.hessian(&f, &g, &h).eval(&x).unwrap();
                assert!(
                    (via_matrix - direct).abs() <= 1e-9 * (1.0 + direct.abs()),
                    "at {x:?}: {via_matrix} vs {direct}"
                );
            }
        }
    }

    /// For q = ½ (z−x)ᵀC(z−x): ∇q(x) = 0, hessian_matrix(q,x) = A C A,
    /// Lq(x) = ⟨A, C⟩; the anchor for quadratic competitors.
    #[test]
    fn quadratic_hessian_identity() {
        let op = curved_2d();
        let x = [0.5, -0.25];
        let c = [[2.0, -1.0], [-1.0, 3.0]];
        let shifted: Vec<Expr> = (0..2)
            .map(|j| Expr::sub(&Expr::var(j + 1), &Expr::num(x[j])))
            .collect();
        let mut terms = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                terms.push(Expr::mul(
                    &Expr::num(0.5 * c[i][j]),
                    &Expr::mul(&shifted[i], &shifted[j]),
                ));
            }
        }
        let q = Expr::sum(terms);

        let a = op.a_at(&x).unwrap();
        let c_mat = nalgebra::DMatrix::from_row_slice(2, 2, &[c[0][0], c[0][1], c[1][0], c[1][1]]);
        let expected = &a * &c_mat * &a;
        let hm = op.hessian_matrix(&q, &x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((hm[(i, j)] - expected[(i, j)]).abs() < 1e-9);
            }
        }
        let lq = op.apply_l(&q).eval(&x).unwrap();
        let trace_ac = (&a * &c_mat).trace();
        assert!((lq - trace_ac).abs() < 1e-10);
        for v in ["x1", "x2", "x1*x2^2"] {
            assert!(op.gamma(&q, &e(v, 2)).eval(&x).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn llog_chain_rules_hold() {
        let op = DiffusionOperator::euclidean(1);
        let f = e("exp(x1)", 1);
        let u = e("x1^2", 1);
        let rule = op.chain_rules_llog(&f, 2.0, &u);
        for x in [[-0.5], [0.0], [1.2]] {
            let l = rule.op_lhs.eval(&x).unwrap();
            let r = rule.op_rhs.eval(&x).unwrap();
            assert!((l - r).abs() < 1e-10);
            // L log e^x = 0 and Γ(log e^x) = 1, so both sides are p = 2
            assert!((l - 2.0).abs() < 1e-10);
            let hl = rule.hess_lhs.eval(&x).unwrap();
            let hr = rule.hess_rhs.eval(&x).unwrap();
            assert!((hl - hr).abs() <= 1e-9 * (1.0 + hl.abs()));
        }

        // non-trivial operator and power
        let op = curved_2d();
        let f = e("2 + sin(x1) + x2^2/4", 2);
        let u = e("x1 - x2^2", 2);
        for p in [0.5, 2.0, -1.5] {
            let rule = op.chain_rules_llog(&f, p, &u);
            for x in [[0.2, 0.6], [-0.4, 1.0]] {
                let l = rule.op_lhs.eval(&x).unwrap();
                let r = rule.op_rhs.eval(&x).unwrap();
                assert!((l - r).abs() <= 1e-8 * (1.0 + l.abs()), "p={p} op side at {x:?}");
                let hl = rule.hess_lhs.eval(&x).unwrap();
                let hr = rule.hess_rhs.eval(&x).unwrap();
                assert!((hl - hr).abs() <= 1e-8 * (1.0 + hl.abs()), "p={p} hess side at {x:?}");
            }
        }
    }

    #[test]
    fn laplace_beltrami_flat_and_warped() {
        // identity metric -> Euclidean operator
        let flat = RiemannianSpec::new(vec![
            vec![Expr::one(), Expr::zero()],
            vec![Expr::zero(), Expr::one()],
        ])
        .unwrap();
        let op = laplace_beltrami(&flat).unwrap();
        let u = e("x1^2*x2", 2);
        let x = [0.7, -0.3];
        let lap = op.apply_l(&u).eval(&x).unwrap();
        assert!((lap - 2.0 * x[1]).abs() < 1e-12);

        // g = diag(1/φ, 1) with φ = exp(-1/x1) on x1 > 0:
        // a = diag(φ, 1) and b = (½φ', 0)
        let g = RiemannianSpec::new(vec![
            vec![e("1/exp(-1/x1)", 2), Expr::zero()],
            vec![Expr::zero(), Expr::one()],
        ])
        .unwrap();
        let op = laplace_beltrami(&g).unwrap();
        for x in [[0.5, 0.0], [1.0, 2.0], [2.5, -1.0]] {
            let phi = f64::exp(-1.0 / x[0]);
            let phi_prime = phi / (x[0] * x[0]);
            let a = op.a_at(&x).unwrap();
            assert!((a[(0, 0)] - phi).abs() < 1e-12);
            assert!((a[(1, 1)] - 1.0).abs() < 1e-12);
            assert!(a[(0, 1)].abs() < 1e-12);
            let b = op.b_at(&x).unwrap();
            assert!((b[0] - 0.5 * phi_prime).abs() < 1e-10, "b1 at {x:?}: {}", b[0]);
            assert!(b[1].abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_beltrami_constant_metric_and_conformal_2d() {
        // constant SPD non-diagonal metric: a = g⁻¹, b = 0
        let g = RiemannianSpec::new(vec![
            vec![Expr::num(2.0), Expr::num(0.5)],
            vec![Expr::num(0.5), Expr::num(1.0)],
        ])
        .unwrap();
        let op = laplace_beltrami(&g).unwrap();
        let gm = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inv = gm.try_inverse().unwrap();
        let x = [0.3, 0.9];
        let a = op.a_at(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a[(i, j)] - inv[(i, j)]).abs() < 1e-12);
            }
        }
        assert!(op.b_at(&x).unwrap().norm() < 1e-12);

        // 2-D conformal metric has no drift: Δ_g = e^{-2w} Δ
        let op = laplace_beltrami(&sphere_chart()).unwrap();
        for x in [[0.0, 0.0], [0.5, -0.7], [1.5, 0.2]] {
            let b = op.b_at(&x).unwrap();
            assert!(b.norm() < 1e-10, "drift {b:?} at {x:?}");
            let conf = (1.0 + x[0] * x[0] + x[1] * x[1]).powi(2) / 4.0;
            let a = op.a_at(&x).unwrap();
            assert!((a[(0, 0)] - conf).abs() < 1e-10);
            assert!((a[(1, 1)] - conf).abs() < 1e-10);
            assert!(a[(0, 1)].abs() < 1e-12);
        }
    }

    #[test]
    fn singular_metric_is_rejected() {
        let g = RiemannianSpec::new(vec![
            vec![e("x1", 2), Expr::zero()],
            vec![Expr::zero(), Expr::zero()],
        ])
        .unwrap();
        assert!(matches!(laplace_beltrami(&g), Err(OpError::SingularMetric)));
    }

    #[test]
    fn psd_violation_is_detected() {
        let a = vec![
            vec![Expr::one(), Expr::num(2.0)],
            vec![Expr::num(2.0), Expr::one()],
        ];
        let op = DiffusionOperator::new(a, vec![Expr::zero(), Expr::zero()]).unwrap();
        let err = op.a_psd_at(&[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, OpError::NotPsd { .. }));
    }

    #[test]
    fn asymmetric_a_is_symmetrized_with_flag() {
        let a = vec![
            vec![Expr::one(), e("x1", 2)],
            vec![Expr::zero(), Expr::one()],
        ];
        let op = DiffusionOperator::new(a, vec![Expr::zero(), Expr::zero()]).unwrap();
        assert!(op.was_symmetrized());
        let m = op.a_at(&[3.0, 0.0]).unwrap();
        assert_eq!(m[(0, 1)], 1.5);
        assert_eq!(m[(1, 0)], 1.5);
        assert!(!DiffusionOperator::euclidean(2).was_symmetrized());
    }

    #[test]
    fn normal_coordinates_flat_and_drift() {
        let op = DiffusionOperator::euclidean(2);
        let coords = vec![e("x1", 2), e("x2", 2)];
        let chk = op.check_normal_coordinates(&coords, &[0.4, -0.2], 1e-10).unwrap();
        assert!(chk.ok, "{chk:?}");

        // OU drift makes Lf(x) = -x·∇f ≠ 0; identity chart fails at x ≠ 0
        let ou = ou_1d();
        let chk = ou
            .check_normal_coordinates(&[e("x1", 1)], &[1.0], 1e-8)
            .unwrap();
        assert!(!chk.ok);
        assert!(chk.gamma_res < 1e-12 && chk.hessian_res < 1e-12);
        assert!((chk.drift_res - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_coordinates_on_sphere_chart() {
        let op = laplace_beltrami(&sphere_chart()).unwrap();
        for x in [[0.3, 0.1], [0.0, 0.0], [0.8, -0.6]] {
            let frame = op.normal_coordinates_at(&x).unwrap();
            let chk = op.check_normal_coordinates(&frame, &x, 1e-8).unwrap();
            assert!(chk.ok, "at {x:?}: {chk:?}");
        }
    }

    /// Γ₂(ψ∘e)(x) = Σψᵢψⱼ Γ₂(eᵢ,eⱼ)(x) + ‖D²ψ‖² in a normal frame at x,
    /// with the first term the Ricci form (≈ δᵢⱼ on the unit sphere), and
    /// ‖D²ψ‖² ≥ (1/n)(L(ψ∘e))².
    #[test]
    fn bochner_in_normal_coordinates() {
        let op = laplace_beltrami(&sphere_chart()).unwrap();
        let x = [0.35, -0.15];
        let frame = op.normal_coordinates_at(&x).unwrap();
        let chk = op.check_normal_coordinates(&frame, &x, 1e-8).unwrap();
        assert!(chk.ok);

        // Ricci of the unit sphere in an orthonormal frame is the identity
        let mut ric = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                ric[i][j] = op.gamma2(&frame[i], &frame[j]).eval(&x).unwrap();
            }
        }
        assert!((ric[0][0] - 1.0).abs() < 1e-7, "{ric:?}");
        assert!((ric[1][1] - 1.0).abs() < 1e-7, "{ric:?}");
        assert!(ric[0][1].abs() < 1e-7 && ric[1][0].abs() < 1e-7, "{ric:?}");

        // ψ(u,v) = u + u·v²/2 − u³/6 + v²/2 composed with the frame; e(x) = 0,
        // so Dψ = (1, 0) and D²ψ = diag(0, 1) there.
        let (e1, e2) = (&frame[0], &frame[1]);
        let compose = Expr::sum(vec![
            e1.clone(),
            Expr::mul(&Expr::num(0.5), &Expr::mul(e1, &Expr::powi(e2, 2))),
            Expr::neg(&Expr::mul(&Expr::num(1.0 / 6.0), &Expr::powi(e1, 3))),
            Expr::mul(&Expr::num(0.5), &Expr::powi(e2, 2)),
        ]);
        let g2 = op.gamma2(&compose, &compose).eval(&x).unwrap();
        let ric_term = ric[0][0]; // Dψ = (1,0)
        let hess_norm2 = 1.0; // ‖diag(0,1)‖²
        assert!(
            (g2 - (ric_term + hess_norm2)).abs() < 1e-7,
            "Γ₂ = {g2}, Ric+‖D²ψ‖² = {}",
            ric_term + hess_norm2
        );
        let l = op.apply_l(&compose).eval(&x).unwrap();
        assert!(hess_norm2 >= l * l / 2.0 - 1e-9);
    }

    // property: gamma bilinearity and bracket agreement on random trees
    fn small_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-1.5..1.5f64).prop_map(Expr::num),
            (1usize..=2).prop_map(Expr::var),
        ];
        leaf.prop_recursive(3, 16, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(&a, &b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::mul(&a, &b)),
                inner.clone().prop_map(|a| Expr::fun(crate::expr::Fun::Sin, &a)),
                inner.clone().prop_map(|a| Expr::fun(crate::expr::Fun::Cos, &a)),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gamma_bracket_agreement(u in small_expr(), v in small_expr(),
                                   x in prop::array::uniform2(-1.0..1.0f64)) {
            let op = curved_2d();
            let d = op.gamma(&u, &v).eval(&x).unwrap();
            let b = op.gamma_bracket(&u, &v).eval(&x).unwrap();
            prop_assert!((d - b).abs() <= 1e-8 * (1.0 + d.abs().max(b.abs())));
        }

        #[test]
        fn gamma_is_positive_semidefinite(u in small_expr(),
                                          x in prop::array::uniform2(-1.0..1.0f64)) {
            let op = curved_2d();
            let g = op.gamma_self(&u).eval(&x).unwrap();
            prop_assert!(g >= -1e-10);
        }
    }
}
