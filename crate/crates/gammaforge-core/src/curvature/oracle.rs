//! Direct-search oracle for the N-Ricci infimum.
//!
//! Minimizes Γ₂(f̃)(x) − (1/N)(Lf̃)²(x) over the quadratic competitor family
//! f̃ = f + ½ eᵀS e, where e is the whitened linear frame at x (so
//! Γ(f̃ − f)(x) = 0 automatically) and S runs over symmetric r×r matrices.
//! The parameters enter as extra chart variables with zero operator
//! coefficients, so a single symbolic Γ₂ tree serves every S, and the
//! objective is *exactly* a quadratic polynomial in S. That buys two things:
//! three evaluations determine the objective exactly along any line, so
//! line searches are exact and the −∞ regimes (negative curvature for
//! N below the rank, a flat trace direction with nonzero slope at
//! N = rank) are decided from line coefficients rather than by chasing
//! divergent iterates; and conjugate gradients terminates in at most
//! dim S + 1 line searches per start.

use nalgebra::DMatrix;
use rand::Rng;

use super::{inv_n, validate_n, CurvError, ExtReal, FunctionFrame, PointFrame};
use crate::diffusion::DiffusionOperator;
use crate::expr::Expr;

#[derive(Clone, Debug)]
pub struct OracleBudget {
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget { restarts: 12, max_iters: 120 }
    }
}

#[derive(Clone, Debug)]
pub struct OracleOutcome {
    pub value: ExtReal,
    pub converged: bool,
    pub grad_norm: f64,
    pub evaluations: usize,
}

struct Objective {
    g2: Expr,
    l: Expr,
    inv: f64,
    point: Vec<f64>,
    n: usize,
    evaluations: usize,
}

impl Objective {
    fn eval(&mut self, s: &[f64]) -> Result<f64, CurvError> {
        self.point[self.n..].copy_from_slice(s);
        self.evaluations += 1;
        let g2 = self.g2.eval(&self.point)?;
        let l = self.l.eval(&self.point)?;
        Ok(g2 - self.inv * l * l)
    }

    /// Exact parabola coefficients along s + t·dir: value, slope, curvature.
    fn line(&mut self, s: &[f64], dir: &[f64]) -> Result<(f64, f64, f64), CurvError> {
        let phi0 = self.eval(s)?;
        let shift = |t: f64| -> Vec<f64> {
            s.iter().zip(dir).map(|(a, d)| a + t * d).collect()
        };
        let phi_p = self.eval(&shift(1.0))?;
        let phi_m = self.eval(&shift(-1.0))?;
        Ok((phi0, 0.5 * (phi_p - phi_m), 0.5 * (phi_p + phi_m) - phi0))
    }
}

fn minus_inf(evaluations: usize) -> OracleOutcome {
    OracleOutcome {
        value: ExtReal::MinusInf,
        converged: true,
        grad_norm: f64::NAN,
        evaluations,
    }
}

pub fn ricci_infimum_oracle(
    op: &DiffusionOperator,
    f: &Expr,
    x: &[f64],
    n_param: ExtReal,
    budget: &OracleBudget,
    rng: &mut impl Rng,
) -> Result<OracleOutcome, CurvError> {
    let n_param = validate_n(n_param)?;
    let frame = PointFrame::new(op, x)?;
    let fd = FunctionFrame::new(op, f, &frame)?;
    let r = frame.rank;
    let inv = inv_n(n_param);

    if r == 0 {
        // no competitor directions; the objective is constant
        let value = fd.g2 - inv * fd.lf * fd.lf;
        return Ok(OracleOutcome {
            value: ExtReal::finite(value),
            converged: true,
            grad_norm: 0.0,
            evaluations: 1,
        });
    }

    let m = r * (r + 1) / 2;
    let n = op.dim();

    // extended chart: original coordinates + m parameter slots with zero
    // operator coefficients
    let n_ext = n + m;
    let mut a_ext = vec![vec![Expr::zero(); n_ext]; n_ext];
    for i in 0..n {
        for j in 0..n {
            a_ext[i][j] = op.a()[i][j].clone();
        }
    }
    let mut b_ext = op.b().to_vec();
    b_ext.extend(std::iter::repeat_with(Expr::zero).take(m));
    let op_ext = DiffusionOperator::new(a_ext, b_ext).expect("extended operator shape");

    // whitened linear frame e_i = Σ_j W_ij (x^j − x_j)
    let shifted: Vec<Expr> = (0..n)
        .map(|j| Expr::sub(&Expr::var(j + 1), &Expr::num(x[j])))
        .collect();
    let frame_exprs: Vec<Expr> = (0..r)
        .map(|i| {
            Expr::sum((0..n).map(|j| Expr::mul(&Expr::num(frame.w[(i, j)]), &shifted[j])))
        })
        .collect();

    // f̃ = f + Σ_{i≤j} s_k · (i = j ? ½eᵢ² : eᵢeⱼ), with s_k = x_{n+k}
    let mut slots = Vec::with_capacity(m);
    let mut terms = vec![f.clone()];
    for i in 0..r {
        for j in i..r {
            let k = slots.len();
            slots.push((i, j));
            let s_var = Expr::var(n + k + 1);
            let prod = if i == j {
                Expr::mul(&Expr::num(0.5), &Expr::powi(&frame_exprs[i], 2))
            } else {
                Expr::mul(&frame_exprs[i], &frame_exprs[j])
            };
            terms.push(Expr::mul(&s_var, &prod));
        }
    }
    let f_tilde = Expr::sum(terms);

    let mut point = x.to_vec();
    point.resize(n_ext, 0.0);
    let mut obj = Objective {
        g2: op_ext.gamma2(&f_tilde, &f_tilde),
        l: op_ext.apply_l(&f_tilde),
        inv,
        point,
        n,
        evaluations: 0,
    };

    let zero = vec![0.0; m];
    let g0 = obj.eval(&zero)?;
    let scale = 1.0 + g0.abs() + fd.lf * fd.lf;
    let line_tol = 1e-9 * scale;

    // probe along the trace direction S = I/√r: the S-quadratic part of
    // the objective is ‖S‖² − (tr S)²/N, which is negative along I exactly
    // when N < rank and flat along I exactly when N = rank, where a nonzero
    // slope (tr Ĥ ≠ Lf) also drives the infimum to −∞
    let ident: Vec<f64> = slots
        .iter()
        .map(|&(i, j)| if i == j { 1.0 / (r as f64).sqrt() } else { 0.0 })
        .collect();
    let (_, slope, curv) = obj.line(&zero, &ident)?;
    if curv < -line_tol || (curv.abs() <= line_tol && slope.abs() > line_tol) {
        return Ok(minus_inf(obj.evaluations));
    }

    // closed-form stationary point of the quadratic objective as warm start
    let warm = {
        let c = match n_param {
            ExtReal::Finite(nv) if nv > r as f64 => (fd.lf - fd.tr_h) / (nv - r as f64),
            _ => 0.0,
        };
        let s_star = -&fd.h_hat + DMatrix::identity(r, r) * c;
        slots.iter().map(|&(i, j)| s_star[(i, j)]).collect::<Vec<f64>>()
    };

    let mut starts: Vec<Vec<f64>> = vec![warm, zero];
    let spread = 1.0 + fd.h_hat.norm();
    for k in 0..budget.restarts {
        let sigma = spread * [0.5, 2.0, 8.0][k % 3];
        starts.push((0..m).map(|_| rng.gen_range(-sigma..sigma)).collect());
    }

    let mut best_val = f64::INFINITY;
    let mut best_grad = f64::INFINITY;
    let mut any_converged = false;

    for start in starts {
        let mut s = start;
        let mut val = obj.eval(&s)?;
        let mut grad = vec![0.0; m];
        let mut dir = vec![0.0; m];
        let mut prev_grad2 = 0.0;
        let mut gnorm = f64::INFINITY;
        let mut converged = false;
        for iter in 0..budget.max_iters {
            // central differences with step 1: exact for a quadratic
            for k in 0..m {
                let (_, slope, _) = obj.line(&s, &unit(m, k))?;
                grad[k] = slope;
            }
            let grad2: f64 = grad.iter().map(|v| v * v).sum();
            gnorm = grad2.sqrt();
            if gnorm <= line_tol {
                converged = true;
                break;
            }
            // Fletcher–Reeves conjugate direction; exact line searches on an
            // exact quadratic, so each start terminates in ≤ m + 1 steps
            let beta =
                if iter % m == 0 || prev_grad2 == 0.0 { 0.0 } else { grad2 / prev_grad2 };
            for k in 0..m {
                dir[k] = -grad[k] + beta * dir[k];
            }
            prev_grad2 = grad2;
            let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dhat: Vec<f64> = dir.iter().map(|v| v / dn).collect();
            let (_, a1, a2) = obj.line(&s, &dhat)?;
            let dtol = line_tol * (1.0 + val.abs() / scale);
            if a2 < -dtol || (a2.abs() <= dtol && a1.abs() > dtol) {
                // unbounded below along this line
                return Ok(minus_inf(obj.evaluations));
            }
            if a2 <= dtol {
                converged = true; // flat, slopeless direction: stationary
                break;
            }
            let t_star = -a1 / (2.0 * a2);
            for (sk, d) in s.iter_mut().zip(&dhat) {
                *sk += t_star * d;
            }
            let new_val = obj.eval(&s)?;
            let stalled = (val - new_val).abs() <= 1e-15 * (scale + val.abs());
            val = new_val;
            if stalled {
                converged = true;
                break;
            }
        }
        if val < best_val {
            best_val = val;
            best_grad = gnorm;
        }
        any_converged |= converged;
    }

    Ok(OracleOutcome {
        value: ExtReal::finite(best_val),
        converged: any_converged,
        grad_norm: best_grad,
        evaluations: obj.evaluations,
    })
}

fn unit(m: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; m];
    e[k] = 1.0;
    e
}
