//! Finite-volume discretization of 1-D diffusion operators and the spectral
//! consequences of curvature bounds: the Lichnerowicz gap estimate and the
//! weighted Bonnet–Myers diameter bound.
//!
//! L = a∂² + b∂ is reversible for dm = ρ dx with ρ = e^G/a, G = ∫b/a, and
//! then Lu = (pu′)′/ρ with p = e^G. The scheme discretizes the flux form on
//! cells, which keeps the matrix exactly self-adjoint in the weighted inner
//! product (zero-flux closure at interval ends, wrap-around on the circle).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::curvature::{CurvError, ExtReal, KBound};
use crate::diffusion::DiffusionOperator;
use crate::expr::{EvalError, Expr};
use crate::transform::{kprime_general, transform_operator, TransformError, TransformSpec};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Curv(#[from] CurvError),
    #[error("spectral discretization needs a one-dimensional operator (dim = {0})")]
    NotOneDimensional(usize),
    #[error("grid too small: m = {0}")]
    GridTooSmall(usize),
    #[error("diffusion coefficient must be positive: a({x}) = {value}")]
    NonpositiveA { x: f64, value: f64 },
    #[error("drift does not close up on the circle: loop integral of b/a = {0:.3e}")]
    UnbalancedCircle(f64),
    #[error("invalid domain: {0}")]
    BadDomain(String),
    #[error("inadmissible parameters: {0}")]
    BadParams(String),
    #[error("hypothesis fails at x = {x}: {value} < {required}")]
    HypothesisFailed { x: f64, value: f64, required: f64 },
    #[error("the weight must satisfy |f| <= 1: f({x}) = {value}")]
    WeightTooLarge { x: f64, value: f64 },
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Domain1D {
    Interval { l: f64, r: f64 },
    Circle { length: f64 },
}

impl Domain1D {
    fn length(&self) -> f64 {
        match *self {
            Domain1D::Interval { l, r } => r - l,
            Domain1D::Circle { length } => length,
        }
    }

    fn start(&self) -> f64 {
        match *self {
            Domain1D::Interval { l, .. } => l,
            Domain1D::Circle { .. } => 0.0,
        }
    }

    fn validate(&self) -> Result<(), SpectralError> {
        if !(self.length() > 0.0) || !self.length().is_finite() {
            return Err(SpectralError::BadDomain(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Discretization1D {
    pub domain: Domain1D,
    pub m: usize,
    pub xs: Vec<f64>,
    pub h: f64,
    /// discretized L with zero row sums
    pub matrix: DMatrix<f64>,
    /// reversible measure per node, normalized to total mass 1
    pub weights: DVector<f64>,
}

/// Flux-form finite volumes: node spacing h, fluxes p = e^G at midpoints
/// with G the trapezoid cumulative of b/a, weights ρh (half cells at
/// interval ends).
pub fn discretize_1d(
    op: &DiffusionOperator,
    domain: &Domain1D,
    m: usize,
) -> Result<Discretization1D, SpectralError> {
    if op.dim() != 1 {
        return Err(SpectralError::NotOneDimensional(op.dim()));
    }
    domain.validate()?;
    if m < 3 {
        return Err(SpectralError::GridTooSmall(m));
    }
    let periodic = matches!(domain, Domain1D::Circle { .. });
    let l = domain.start();
    let h = if periodic {
        domain.length() / m as f64
    } else {
        domain.length() / (m - 1) as f64
    };
    let xs: Vec<f64> = (0..m).map(|i| l + h * i as f64).collect();

    // node values of a and q = b/a; the circle needs the wrap node too
    let nodes = if periodic { m + 1 } else { m };
    let mut a_at = Vec::with_capacity(nodes);
    let mut q_at = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let x = l + h * k as f64;
        let av = op.a()[0][0].eval(&[x])?;
        if av <= 0.0 {
            return Err(SpectralError::NonpositiveA { x, value: av });
        }
        a_at.push(av);
        q_at.push(op.b()[0].eval(&[x])? / av);
    }

    // G_k = ∫ b/a up to node k, trapezoid
    let mut g = vec![0.0; nodes];
    for k in 1..nodes {
        g[k] = g[k - 1] + 0.5 * h * (q_at[k - 1] + q_at[k]);
    }
    if periodic {
        let loop_integral = g[m];
        let scale = 1.0 + g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if loop_integral.abs() > 1e-8 * scale {
            return Err(SpectralError::UnbalancedCircle(loop_integral));
        }
    }

    let rho: Vec<f64> = (0..m).map(|i| g[i].exp() / a_at[i]).collect();
    let mut weights = DVector::from_fn(m, |i, _| rho[i] * h);
    if !periodic {
        weights[0] *= 0.5;
        weights[m - 1] *= 0.5;
    }
    let mass: f64 = weights.iter().sum();
    weights /= mass;

    // p at the midpoint between nodes k and k+1
    let p_half = |k: usize| (0.5 * (g[k] + g[k + 1])).exp();
    let mut matrix = DMatrix::zeros(m, m);
    let edges = if periodic { m } else { m - 1 };
    for k in 0..edges {
        let i = k;
        let j = (k + 1) % m;
        let flux = p_half(k) / (h * h);
        // cell masses: ρh, halved on interval ends
        let cell = |idx: usize| {
            let mut c = rho[idx];
            if !periodic && (idx == 0 || idx == m - 1) {
                c *= 0.5;
            }
            c
        };
        matrix[(i, j)] += flux / cell(i);
        matrix[(i, i)] -= flux / cell(i);
        matrix[(j, i)] += flux / cell(j);
        matrix[(j, j)] -= flux / cell(j);
    }

    Ok(Discretization1D { domain: *domain, m, xs, h, matrix, weights })
}

/// The smallest `count` eigenvalues of −L in the weighted inner product.
pub fn low_spectrum(d: &Discretization1D, count: usize) -> Vec<f64> {
    let m = d.m;
    let sqrt_w: Vec<f64> = d.weights.iter().map(|w| w.sqrt()).collect();
    let mut s = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            s[(i, j)] = -d.matrix[(i, j)] * sqrt_w[i] / sqrt_w[j];
        }
    }
    let s = (&s + s.transpose()) * 0.5;
    let mut eigs: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs.truncate(count);
    eigs
}

/// Smallest nonzero eigenvalue of −L (the constant mode sits at 0).
pub fn spectral_gap(d: &Discretization1D) -> f64 {
    low_spectrum(d, 2)[1]
}

// ── Lichnerowicz ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LichnerowiczReport {
    pub gap: f64,
    /// inf K (or inf K′ under a transformation) over the node grid
    pub k_inf: f64,
    pub n_prime: ExtReal,
    /// (N′/(N′−1))·k_inf
    pub bound: f64,
    pub slack: f64,
    pub pass: bool,
}

/// λ ≥ (N′/(N′−1))·inf K′. Without a transformation the operator is used as
/// given with K′ = K and N′ = N; with one, K′ comes from the general
/// estimate and the gap is that of the transformed operator.
pub fn lichnerowicz_check(
    op: &DiffusionOperator,
    k: &KBound,
    n: ExtReal,
    transform: Option<(&TransformSpec, ExtReal)>,
    domain: &Domain1D,
    m: usize,
    tol: f64,
) -> Result<LichnerowiczReport, SpectralError> {
    let grid: Vec<Vec<f64>> = {
        let probe = discretize_1d(op, domain, m)?;
        probe.xs.iter().map(|&x| vec![x]).collect()
    };
    let (op_eff, k_inf, n_prime) = match transform {
        Some((spec, n_prime)) => {
            let value = kprime_general(op, spec, k, n, n_prime, &grid)?;
            let ExtReal::Finite(kv) = value else {
                return Err(SpectralError::BadParams(format!(
                    "the transformed bound is not finite on the grid: {value}"
                )));
            };
            (transform_operator(op, spec)?, kv, n_prime)
        }
        None => {
            let mut inf = f64::INFINITY;
            for x in &grid {
                inf = inf.min(k.eval(x)?);
            }
            (op.clone(), inf, n)
        }
    };
    let factor = match n_prime {
        ExtReal::PlusInf => 1.0,
        ExtReal::Finite(np) if np > 1.0 => np / (np - 1.0),
        other => {
            return Err(SpectralError::BadParams(format!(
                "the Lichnerowicz factor needs N' > 1, got {other}"
            )))
        }
    };
    let gap = spectral_gap(&discretize_1d(&op_eff, domain, m)?);
    let bound = factor * k_inf;
    let slack = gap - bound;
    Ok(LichnerowiczReport { gap, k_inf, n_prime, bound, slack, pass: slack >= -tol })
}

// ── Bonnet–Myers ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BonnetMyersReport {
    /// ∫ a^{−1/2} dx (halved on the circle)
    pub diameter: f64,
    pub bound: f64,
    pub k_bound: f64,
    pub n_star: f64,
    /// min over the grid of f²K + ½Lf² − N*Γ(f)
    pub hypothesis_min: f64,
    /// K ≤ 0: nothing to check
    pub skipped: bool,
    pub pass: bool,
}

/// Verifies f²K + ½Lf² − N*Γ(f) ≥ K̄ on the grid (|f| ≤ 1) and checks the
/// intrinsic diameter against (π/√K̄)·√(N−1 + (N−2)²/(N*−N)); N* may be +∞.
#[allow(clippy::too_many_arguments)]
pub fn bonnet_myers_check(
    op: &DiffusionOperator,
    f: &Expr,
    base_k: &KBound,
    k_bound: f64,
    n: f64,
    n_star: f64,
    domain: &Domain1D,
    m: usize,
    tol: f64,
) -> Result<BonnetMyersReport, SpectralError> {
    if op.dim() != 1 {
        return Err(SpectralError::NotOneDimensional(op.dim()));
    }
    domain.validate()?;
    if m < 3 {
        return Err(SpectralError::GridTooSmall(m));
    }
    if !(n >= 1.0) || !(n_star > n) || !(n_star >= 2.0) {
        return Err(SpectralError::BadParams(format!(
            "need N ≥ 1, N* > N and N* ≥ 2 (got N = {n}, N* = {n_star})"
        )));
    }

    let l = domain.start();
    let h = domain.length() / (m - 1) as f64;
    let lf2 = op.apply_l(&Expr::powi(f, 2));
    let gf = op.gamma_self(f);

    // trapezoid of a^{−1/2} along the way
    let mut diameter = 0.0;
    let mut hypothesis_min = f64::INFINITY;
    let mut worst = (l, f64::INFINITY);
    for i in 0..m {
        let x = l + h * i as f64;
        let pt = [x];
        let av = op.a()[0][0].eval(&pt)?;
        if av <= 0.0 {
            return Err(SpectralError::NonpositiveA { x, value: av });
        }
        let end = i == 0 || i == m - 1;
        diameter += av.powf(-0.5) * if end { 0.5 * h } else { h };

        let fv = f.eval(&pt)?;
        if fv.abs() > 1.0 + 1e-9 {
            return Err(SpectralError::WeightTooLarge { x, value: fv });
        }
        let value = fv * fv * base_k.eval(&pt)? + 0.5 * lf2.eval(&pt)?
            - if n_star.is_finite() { n_star * gf.eval(&pt)? } else {
                let g = gf.eval(&pt)?;
                if g > 1e-13 {
                    return Err(SpectralError::BadParams(
                        "N* = ∞ needs a constant weight f".into(),
                    ));
                }
                0.0
            };
        if value < hypothesis_min {
            hypothesis_min = value;
            worst = (x, value);
        }
    }
    if matches!(domain, Domain1D::Circle { .. }) {
        diameter *= 0.5;
    }

    if k_bound <= 0.0 {
        return Ok(BonnetMyersReport {
            diameter,
            bound: f64::INFINITY,
            k_bound,
            n_star,
            hypothesis_min,
            skipped: true,
            pass: true,
        });
    }
    if hypothesis_min < k_bound - 1e-12 * (1.0 + k_bound.abs()) {
        return Err(SpectralError::HypothesisFailed {
            x: worst.0,
            value: worst.1,
            required: k_bound,
        });
    }

    let dim_term = if n_star.is_finite() { (n - 2.0).powi(2) / (n_star - n) } else { 0.0 };
    let bound = std::f64::consts::PI / k_bound.sqrt() * (n - 1.0 + dim_term).sqrt();
    let pass = diameter <= bound + tol;
    Ok(BonnetMyersReport {
        diameter,
        bound,
        k_bound,
        n_star,
        hypothesis_min,
        skipped: false,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn e(src: &str) -> Expr {
        parse(src, 1).expect(src)
    }

    fn op_1d(a: &str, b: &str) -> DiffusionOperator {
        DiffusionOperator::new(vec![vec![e(a)]], vec![e(b)]).unwrap()
    }

    fn euclid_1d() -> DiffusionOperator {
        op_1d("1", "0")
    }

    fn ou_1d() -> DiffusionOperator {
        op_1d("1", "-x1")
    }

    /// radial part of the sphere Laplacian in dimension 3
    fn sphere_radial() -> DiffusionOperator {
        op_1d("1", "2*cos(x1)/sin(x1)")
    }

    const EPS: f64 = 1e-3;

    fn sphere_domain() -> Domain1D {
        Domain1D::Interval { l: EPS, r: std::f64::consts::PI - EPS }
    }

    #[test]
    fn discretization_is_reversible_and_conservative() {
        let d = discretize_1d(&ou_1d(), &Domain1D::Interval { l: -4.0, r: 4.0 }, 101).unwrap();
        assert_eq!(d.m, 101);
        let scale = d.matrix.amax();
        for i in 0..d.m {
            let row_sum: f64 = d.matrix.row(i).iter().sum();
            assert!(row_sum.abs() <= 1e-10 * scale, "row {i}: {row_sum}");
            for j in 0..d.m {
                let res = d.weights[i] * d.matrix[(i, j)] - d.weights[j] * d.matrix[(j, i)];
                assert!(res.abs() <= 1e-10 * scale, "({i},{j}): {res}");
            }
        }
        // ∫ Lu dm = 0
        let invariance = (d.weights.transpose() * &d.matrix).amax();
        assert!(invariance <= 1e-10 * scale);
        assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // the weights follow the gaussian density
        let at = |x: f64| {
            let i = ((x + 4.0) / d.h).round() as usize;
            d.weights[i]
        };
        let ratio = at(0.0) / at(2.0);
        assert!((ratio - (2.0f64).exp()).abs() < 5e-3 * (2.0f64).exp());
    }

    #[test]
    fn flat_circle_spectrum_is_squared_integers() {
        let d = discretize_1d(
            &euclid_1d(),
            &Domain1D::Circle { length: 2.0 * std::f64::consts::PI },
            256,
        )
        .unwrap();
        let eigs = low_spectrum(&d, 5);
        let want = [0.0, 1.0, 1.0, 4.0, 4.0];
        for (got, want) in eigs.iter().zip(want) {
            assert!((got - want).abs() <= 1e-3 * (1.0 + want), "{eigs:?}");
        }
    }

    #[test]
    fn circle_rejects_unbalanced_drift() {
        let err = discretize_1d(&op_1d("1", "1"), &Domain1D::Circle { length: 1.0 }, 16)
            .unwrap_err();
        assert!(matches!(err, SpectralError::UnbalancedCircle(_)));
        // balanced drift is fine
        assert!(discretize_1d(
            &op_1d("1", "sin(x1)"),
            &Domain1D::Circle { length: 2.0 * std::f64::consts::PI },
            16,
        )
        .is_ok());
    }

    #[test]
    fn positive_diffusion_is_required() {
        let err = discretize_1d(&op_1d("x1", "0"), &Domain1D::Interval { l: -1.0, r: 1.0 }, 9)
            .unwrap_err();
        assert!(matches!(err, SpectralError::NonpositiveA { .. }));
    }

    #[test]
    fn ornstein_uhlenbeck_gap_is_one() {
        let d = discretize_1d(&ou_1d(), &Domain1D::Interval { l: -8.0, r: 8.0 }, 512).unwrap();
        let gap = spectral_gap(&d);
        assert!((gap - 1.0).abs() <= 1e-3, "gap {gap}");
    }

    #[test]
    fn sphere_radial_gap_is_three() {
        let d = discretize_1d(&sphere_radial(), &sphere_domain(), 512).unwrap();
        let gap = spectral_gap(&d);
        assert!((gap - 3.0).abs() <= 3.0 * 1e-2, "gap {gap}");
    }

    #[test]
    fn gap_converges_at_second_order() {
        let cases = [
            (euclid_1d(), Domain1D::Circle { length: 2.0 * std::f64::consts::PI }),
            (ou_1d(), Domain1D::Interval { l: -8.0, r: 8.0 }),
            (sphere_radial(), sphere_domain()),
        ];
        for (op, domain) in cases {
            let gap = |m: usize| spectral_gap(&discretize_1d(&op, &domain, m).unwrap());
            let d1 = (gap(64) - gap(128)).abs();
            let d2 = (gap(128) - gap(256)).abs();
            let order = (d1 / d2).log2();
            assert!((1.5..3.0).contains(&order), "{domain:?}: order {order}");
        }
    }

    #[test]
    fn lichnerowicz_is_tight_on_the_sphere() {
        let r = lichnerowicz_check(
            &sphere_radial(),
            &KBound::Const(2.0),
            ExtReal::Finite(3.0),
            None,
            &sphere_domain(),
            512,
            0.05,
        )
        .unwrap();
        assert!(r.pass);
        assert!((r.bound - 3.0).abs() < 1e-12);
        assert!((r.gap - 3.0).abs() <= 0.03, "gap {}", r.gap);
        assert!(r.slack.abs() <= 0.03);
    }

    #[test]
    fn lichnerowicz_is_tight_for_ornstein_uhlenbeck() {
        let r = lichnerowicz_check(
            &ou_1d(),
            &KBound::Const(1.0),
            ExtReal::PlusInf,
            None,
            &Domain1D::Interval { l: -8.0, r: 8.0 },
            512,
            0.01,
        )
        .unwrap();
        assert!(r.pass);
        assert!((r.bound - 1.0).abs() < 1e-12);
        assert!(r.slack.abs() <= 5e-3, "slack {}", r.slack);
    }

    #[test]
    fn lichnerowicz_survives_a_time_change() {
        // BE((1 − x²)·Γ, 2) is sharp for the 1-D OU generator; the
        // transformed bound is far from tight on a box this large, but the
        // gap must stay above it
        let spec = TransformSpec::time_change(e("1 + sin(x1)/10"));
        let r = lichnerowicz_check(
            &ou_1d(),
            &KBound::Field(e("1 - x1^2")),
            ExtReal::Finite(2.0),
            Some((&spec, ExtReal::PlusInf)),
            &Domain1D::Interval { l: -8.0, r: 8.0 },
            256,
            0.0,
        )
        .unwrap();
        assert!(r.pass);
        assert!(r.bound < 0.0, "bound {}", r.bound);
        assert!(r.gap > 0.0);
        assert!(r.slack > 0.0);
    }

    #[test]
    fn bonnet_myers_is_sharp_on_the_sphere() {
        let r = bonnet_myers_check(
            &sphere_radial(),
            &Expr::one(),
            &KBound::Const(2.0),
            2.0,
            3.0,
            f64::INFINITY,
            &sphere_domain(),
            512,
            1e-6,
        )
        .unwrap();
        assert!(!r.skipped);
        assert!(r.pass);
        assert!((r.bound - std::f64::consts::PI).abs() < 1e-12);
        assert!((r.diameter - std::f64::consts::PI).abs() < 3.0 * EPS);
    }

    #[test]
    fn bonnet_myers_with_a_genuine_weight() {
        let f = e("1 - sin(x1)^2/20");
        let r = bonnet_myers_check(
            &sphere_radial(),
            &f,
            &KBound::Const(2.0),
            1.0,
            3.0,
            5.0,
            &sphere_domain(),
            512,
            1e-6,
        )
        .unwrap();
        assert!(!r.skipped);
        assert!(r.hypothesis_min >= 1.0);
        // bound = π√(2 + 1/2)
        assert!((r.bound - std::f64::consts::PI * 2.5f64.sqrt()).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn bonnet_myers_skips_nonpositive_curvature() {
        let r = bonnet_myers_check(
            &euclid_1d(),
            &Expr::one(),
            &KBound::Const(0.0),
            0.0,
            2.0,
            4.0,
            &Domain1D::Interval { l: 0.0, r: 1.0 },
            33,
            1e-6,
        )
        .unwrap();
        assert!(r.skipped);
        assert!(r.pass);
        assert!((r.diameter - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bonnet_myers_rejects_a_failing_hypothesis() {
        let err = bonnet_myers_check(
            &sphere_radial(),
            &e("9/10"),
            &KBound::Const(2.0),
            2.0,
            3.0,
            5.0,
            &sphere_domain(),
            64,
            1e-6,
        )
        .unwrap_err();
        let SpectralError::HypothesisFailed { value, required, .. } = err else {
            panic!("expected hypothesis failure, got {err}");
        };
        assert!((value - 1.62).abs() < 1e-9);
        assert_eq!(required, 2.0);
    }

    #[test]
    fn bonnet_myers_validates_the_weight_and_dimensions() {
        let domain = Domain1D::Interval { l: 0.0, r: 1.0 };
        let err = bonnet_myers_check(
            &euclid_1d(),
            &e("6/5"),
            &KBound::Const(1.0),
            1.0,
            2.0,
            4.0,
            &domain,
            9,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, SpectralError::WeightTooLarge { .. }));
        let err = bonnet_myers_check(
            &euclid_1d(),
            &Expr::one(),
            &KBound::Const(1.0),
            1.0,
            3.0,
            2.5,
            &domain,
            9,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, SpectralError::BadParams(_)));
    }
}
