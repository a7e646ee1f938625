//! Executes one job document: builds the operator, applies or interprets the
//! transformation, dispatches the command, and fills a report body whose
//! aggregates are recomputable from the per-point rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use gammaforge_core::curvature::{best_k, check_be, ricci_n, CurvError, ExtReal, KBound};
use gammaforge_core::diffusion::{laplace_beltrami, DiffusionOperator, OpError, RiemannianSpec};
use gammaforge_core::expr::{parse, EvalError, Expr};
use gammaforge_core::spectral::{
    bonnet_myers_check, discretize_1d, lichnerowicz_check, low_spectrum, Domain1D, SpectralError,
};
use gammaforge_core::transform::{
    conformal_ricci_identity, mms_kprime, transform_operator, verify_transform_bound,
    wrong_constants_falsifier, TransformError, TransformSpec,
};

use crate::job::{grid_expand, JobSpec, KParam, NParam, TransformDoc};
use crate::report::{ext_json, num_json, opt_json, ReportBody, Row};

pub const DEFAULT_SEED: u64 = 17;
const DEFAULT_M: usize = 201;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Job(String),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Curv(#[from] CurvError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn pexpr(src: &str, n: usize, field: &str) -> Result<Expr, CliError> {
    parse(src, n).map_err(|e| CliError::Job(format!("{field}: {e}")))
}

fn req<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| CliError::Job(format!("params.{name} is required for this command")))
}

fn req_n(v: &Option<NParam>, name: &str) -> Result<ExtReal, CliError> {
    req(v, name).map(|p| p.0)
}

fn finite(v: ExtReal, name: &str) -> Result<f64, CliError> {
    match v {
        ExtReal::Finite(x) => Ok(x),
        other => Err(CliError::Job(format!("params.{name} must be finite, got {other}"))),
    }
}

fn build_operator(job: &JobSpec) -> Result<DiffusionOperator, CliError> {
    let doc = &job.operator;
    let n = doc.dim;
    if n == 0 {
        return Err(CliError::Job("operator.dim must be positive".into()));
    }
    let parse_matrix = |m: &Vec<Vec<String>>, field: &str| -> Result<Vec<Vec<Expr>>, CliError> {
        if m.len() != n || m.iter().any(|row| row.len() != n) {
            return Err(CliError::Job(format!("operator.{field} must be {n}x{n}")));
        }
        m.iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, s)| pexpr(s, n, &format!("operator.{field}[{i}][{j}]")))
                    .collect()
            })
            .collect()
    };
    match (&doc.a, &doc.metric) {
        (Some(_), Some(_)) => Err(CliError::Job(
            "operator: give either coefficients a (with b) or a metric, not both".into(),
        )),
        (None, None) => Err(CliError::Job(
            "operator: give coefficients a (with b) or a metric".into(),
        )),
        (Some(a), None) => {
            let a = parse_matrix(a, "a")?;
            let b = match &doc.b {
                Some(b) => {
                    if b.len() != n {
                        return Err(CliError::Job(format!("operator.b must have {n} entries")));
                    }
                    b.iter()
                        .enumerate()
                        .map(|(i, s)| pexpr(s, n, &format!("operator.b[{i}]")))
                        .collect::<Result<Vec<_>, _>>()?
                }
                None => vec![Expr::zero(); n],
            };
            Ok(DiffusionOperator::new(a, b)?)
        }
        (None, Some(g)) => {
            if doc.b.is_some() {
                return Err(CliError::Job(
                    "operator: a metric operator takes no separate drift".into(),
                ));
            }
            let spec = RiemannianSpec::new(parse_matrix(g, "metric")?)?;
            Ok(laplace_beltrami(&spec)?)
        }
    }
}

fn build_transform(
    doc: &TransformDoc,
    op: &DiffusionOperator,
    job: &JobSpec,
) -> Result<TransformSpec, CliError> {
    let n = op.dim();
    let f = |required_by: &str| -> Result<Expr, CliError> {
        let src = doc.f.as_ref().ok_or_else(|| {
            CliError::Job(format!("transform.f is required for kind {required_by:?}"))
        })?;
        pexpr(src, n, "transform.f")
    };
    let pairs = || -> Result<Vec<(Expr, Expr)>, CliError> {
        doc.pairs
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, (g, h))| {
                Ok((
                    pexpr(g, n, &format!("transform.pairs[{i}][0]"))?,
                    pexpr(h, n, &format!("transform.pairs[{i}][1]"))?,
                ))
            })
            .collect()
    };
    match doc.kind.as_str() {
        "general" => Ok(TransformSpec::general(f("general")?, pairs()?)),
        "time_change" => Ok(TransformSpec::time_change(f("time_change")?)),
        "drift" => {
            let ps = pairs()?;
            if ps.is_empty() {
                return Err(CliError::Job(
                    "transform.pairs is required for kind \"drift\"".into(),
                ));
            }
            Ok(TransformSpec::drift_field(ps))
        }
        "metric" => Ok(TransformSpec::metric(f("metric")?)),
        "conformal" => {
            let nv = doc
                .n
                .ok_or_else(|| CliError::Job("transform.n is required for kind \"conformal\"".into()))?;
            Ok(TransformSpec::conformal(f("conformal")?, nv.0)?)
        }
        "doob" => {
            let rho = doc.rho.as_ref().ok_or_else(|| {
                CliError::Job("transform.rho is required for kind \"doob\"".into())
            })?;
            let rho = pexpr(rho, n, "transform.rho")?;
            let grid = need_grid(job, n)?;
            Ok(TransformSpec::doob(op, &rho, &grid, doc.tol.unwrap_or(1e-8))?)
        }
        other => Err(CliError::Job(format!("unknown transform kind {other:?}"))),
    }
}

fn need_grid(job: &JobSpec, dim: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let spec = job
        .grid
        .as_ref()
        .ok_or_else(|| CliError::Job("grid is required for this command".into()))?;
    grid_expand(spec, dim).map_err(CliError::Job)
}

fn build_domain(job: &JobSpec) -> Result<Domain1D, CliError> {
    let doc = req(&job.params.domain, "domain")?;
    match (doc.interval, doc.circle) {
        (Some([l, r]), None) => Ok(Domain1D::Interval { l, r }),
        (None, Some(length)) => Ok(Domain1D::Circle { length }),
        _ => Err(CliError::Job(
            "params.domain: give exactly one of interval or circle".into(),
        )),
    }
}

fn kbound(p: &KParam, n: usize) -> Result<KBound, CliError> {
    match p {
        KParam::Const(c) => Ok(KBound::Const(*c)),
        KParam::Field(src) => Ok(KBound::Field(pexpr(src, n, "params.k")?)),
    }
}

/// The u-arguments of a verification: `u_tests` if given, else the single `u`.
fn u_list(job: &JobSpec, n: usize) -> Result<Vec<(String, Expr)>, CliError> {
    let srcs: Vec<String> = match (&job.params.u_tests, &job.params.u) {
        (Some(list), _) if !list.is_empty() => list.clone(),
        (_, Some(u)) => vec![u.clone()],
        _ => {
            return Err(CliError::Job(
                "params.u or a non-empty params.u_tests is required for this command".into(),
            ))
        }
    };
    srcs.into_iter()
        .enumerate()
        .map(|(i, s)| Ok((s.clone(), pexpr(&s, n, &format!("params.u_tests[{i}]"))?)))
        .collect()
}

/// Whether the optional transform document is applied to the operator up
/// front, consumed by the command itself, or not accepted at all.
enum TransformUse {
    Apply,
    Consume,
    Forbid,
}

fn transform_use(cmd: &str) -> TransformUse {
    match cmd {
        "gamma" | "gamma2" | "hessian" | "ricci" | "check-be" | "best-k" | "spectral-gap" => {
            TransformUse::Apply
        }
        "transform" | "verify-bound" | "lichnerowicz" => TransformUse::Consume,
        _ => TransformUse::Forbid,
    }
}

fn default_tol(cmd: &str) -> f64 {
    match cmd {
        // fixed inside the core checks
        "check-be" => 1e-8,
        "falsify-constants" => 1e-6,
        "verify-conformal" | "verify-bound" => 1e-7,
        "lichnerowicz" => 0.05,
        "bonnet-myers" => 1e-6,
        _ => 0.0,
    }
}

pub fn execute(
    job: &JobSpec,
    seed_override: Option<u64>,
    tol_override: Option<f64>,
) -> Result<ReportBody, CliError> {
    let cmd = job.command.as_str();
    let seed = seed_override.or(job.params.seed).unwrap_or(DEFAULT_SEED);
    let tol = match cmd {
        // not parameters: recorded as used by the core
        "check-be" | "falsify-constants" => default_tol(cmd),
        _ => tol_override.or(job.params.tol).unwrap_or_else(|| default_tol(cmd)),
    };
    let mut body = ReportBody::new(cmd, seed, tol);

    let mut op = build_operator(job)?;
    let n = op.dim();
    let p = &job.params;

    match transform_use(cmd) {
        TransformUse::Apply => {
            if let Some(doc) = &job.transform {
                let spec = build_transform(doc, &op, job)?;
                op = transform_operator(&op, &spec)?;
            }
        }
        TransformUse::Consume => {}
        TransformUse::Forbid => {
            if job.transform.is_some() {
                return Err(CliError::Job(format!(
                    "command {cmd:?} does not take a transform document"
                )));
            }
        }
    }

    match cmd {
        "gamma" | "gamma2" => {
            let u = pexpr(req(&p.u, "u")?, n, "params.u")?;
            let v = match &p.v {
                Some(s) => pexpr(s, n, "params.v")?,
                None => u.clone(),
            };
            let value = if cmd == "gamma" { op.gamma(&u, &v) } else { op.gamma2(&u, &v) };
            for x in &need_grid(job, n)? {
                body.rows.push(Row::at(x).set(cmd, num_json(value.eval(x)?)));
            }
        }

        "hessian" => {
            let f = pexpr(req(&p.f, "f")?, n, "params.f")?;
            match (&p.g, &p.h) {
                (Some(gs), Some(hs)) => {
                    let g = pexpr(gs, n, "params.g")?;
                    let h = pexpr(hs, n, "params.h")?;
                    let value = op.hessian(&f, &g, &h);
                    for x in &need_grid(job, n)? {
                        body.rows.push(Row::at(x).set("hessian", num_json(value.eval(x)?)));
                    }
                }
                (None, None) => {
                    for x in &need_grid(job, n)? {
                        let m = op.hessian_matrix(&f, x)?;
                        let mut row = Row::at(x);
                        for i in 0..n {
                            for j in 0..n {
                                row = row
                                    .set(&format!("h_{}_{}", i + 1, j + 1), num_json(m[(i, j)]));
                            }
                        }
                        body.rows.push(row);
                    }
                }
                _ => {
                    return Err(CliError::Job(
                        "params.g and params.h come together or not at all".into(),
                    ))
                }
            }
        }

        "ricci" => {
            let f = pexpr(req(&p.f, "f")?, n, "params.f")?;
            let nv = req_n(&p.n, "n")?;
            for x in &need_grid(job, n)? {
                body.rows.push(Row::at(x).set("ricci", ext_json(ricci_n(&op, &f, x, nv)?)));
            }
        }

        "check-be" => {
            let k = kbound(req(&p.k, "k")?, n)?;
            let nv = req_n(&p.n, "n")?;
            let check = check_be(&op, &k, nv, &need_grid(job, n)?)?;
            for pt in &check.points {
                let slack = match pt.mu {
                    Some(mu) => num_json(mu - pt.k),
                    None => Value::String("-inf".into()),
                };
                body.rows.push(
                    Row::at(&pt.x)
                        .set("mu", opt_json(pt.mu))
                        .set("k", num_json(pt.k))
                        .set("slack", slack)
                        .set("pass", pt.pass.into())
                        .set("note", opt_json(pt.note.clone())),
                );
            }
            body.aggregates.insert("min_slack".into(), ext_json(check.min_slack));
            body.aggregates.insert("worst_x".into(), opt_json(check.worst_x.clone()));
            body.pass = check.pass;
        }

        "best-k" => {
            let nv = req_n(&p.n, "n")?;
            let best = best_k(&op, nv, &need_grid(job, n)?)?;
            for (x, k) in &best.per_point {
                body.rows.push(Row::at(x).set("k", ext_json(*k)));
            }
            body.aggregates.insert("value".into(), ext_json(best.value));
            body.aggregates.insert("argmin".into(), opt_json(best.argmin.clone()));
        }

        "transform" => {
            let doc = job.transform.as_ref().ok_or_else(|| {
                CliError::Job("a transform document is required for this command".into())
            })?;
            let spec = build_transform(doc, &op, job)?;
            let new_op = transform_operator(&op, &spec)?;
            let a_text: Vec<Vec<String>> = new_op
                .a()
                .iter()
                .map(|row| row.iter().map(|e| e.to_string()).collect())
                .collect();
            let b_text: Vec<String> = new_op.b().iter().map(|e| e.to_string()).collect();
            body.aggregates.insert("kind".into(), Value::String(doc.kind.clone()));
            body.aggregates
                .insert("a".into(), serde_json::to_value(a_text).expect("strings"));
            body.aggregates
                .insert("b".into(), serde_json::to_value(b_text).expect("strings"));
            if job.grid.is_some() {
                for x in &need_grid(job, n)? {
                    let mut row = Row::at(x);
                    for i in 0..n {
                        for j in 0..n {
                            let key = format!("a_{}_{}", i + 1, j + 1);
                            row = row.set(&key, num_json(new_op.a()[i][j].eval(x)?));
                        }
                        let key = format!("b_{}", i + 1);
                        row = row.set(&key, num_json(new_op.b()[i].eval(x)?));
                    }
                    body.rows.push(row);
                }
            }
        }

        "verify-conformal" => {
            let w = pexpr(req(&p.w, "w")?, n, "params.w")?;
            let nv = req_n(&p.n, "n")?;
            let grid = need_grid(job, n)?;
            let mut max_residual = 0.0_f64;
            for (src, u) in &u_list(job, n)? {
                let r = conformal_ricci_identity(&op, &w, nv, u, &grid)?;
                max_residual = max_residual.max(r.max_residual);
                body.rows.push(
                    Row::default()
                        .set("u", Value::String(src.clone()))
                        .set("max_residual", num_json(r.max_residual))
                        .set("worst_x", opt_json(r.worst_x))
                        .set("checked", r.checked.into()),
                );
            }
            body.aggregates.insert("max_residual".into(), num_json(max_residual));
            body.pass = max_residual <= tol;
        }

        "verify-bound" => {
            let doc = job.transform.as_ref().ok_or_else(|| {
                CliError::Job("a transform document is required for this command".into())
            })?;
            let spec = build_transform(doc, &op, job)?;
            let nv = req_n(&p.n, "n")?;
            let npv = req_n(&p.n_prime, "n_prime")?;
            let grid = need_grid(job, n)?;
            let mut min_residual = f64::INFINITY;
            let mut max_residual = f64::NEG_INFINITY;
            let (mut checked, mut skipped) = (0usize, 0usize);
            for (src, u) in &u_list(job, n)? {
                let r = verify_transform_bound(&op, &spec, nv, npv, &[u.clone()], &grid)?;
                min_residual = min_residual.min(r.min_residual);
                max_residual = max_residual.max(r.max_residual);
                checked += r.checked;
                skipped += r.skipped;
                body.rows.push(
                    Row::default()
                        .set("u", Value::String(src.clone()))
                        .set("min_residual", num_json(r.min_residual))
                        .set("max_residual", num_json(r.max_residual))
                        .set("worst_x", opt_json(r.worst.map(|(_, x)| x)))
                        .set("checked", r.checked.into())
                        .set("skipped", r.skipped.into()),
                );
            }
            body.aggregates.insert("min_residual".into(), num_json(min_residual));
            body.aggregates.insert("max_residual".into(), num_json(max_residual));
            body.aggregates.insert("checked".into(), checked.into());
            body.aggregates.insert("skipped".into(), skipped.into());
            body.pass = min_residual >= -tol;
        }

        "falsify-constants" => {
            let big_n = match p.n {
                Some(NParam(v)) => finite(v, "n")?,
                None => n as f64,
            };
            let trials = p.trials.unwrap_or(10_000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = wrong_constants_falsifier(n, big_n, trials, &mut rng)?;
            let mut wrong_violated = 0usize;
            let pairs = std::iter::once(("correct", &report.correct))
                .chain(report.wrong.iter().enumerate().map(|(i, s)| {
                    (if i == 0 { "wrong_1" } else { "wrong_2" }, s)
                }));
            for (label, search) in pairs {
                if label != "correct" && search.violation.is_some() {
                    wrong_violated += 1;
                }
                let witness = search.violation.as_ref();
                body.rows.push(
                    Row::default()
                        .set("pair", Value::String(label.into()))
                        .set("c1", num_json(search.c1))
                        .set("c2", num_json(search.c2))
                        .set("trials", search.trials.into())
                        .set("min_residual", num_json(search.min_residual))
                        .set("violation", witness.is_some().into())
                        .set("witness_w", opt_json(witness.map(|v| v.w.clone())))
                        .set("witness_u", opt_json(witness.map(|v| v.u.clone())))
                        .set("witness_x", opt_json(witness.map(|v| v.x.clone())))
                        .set("witness_residual", opt_json(witness.map(|v| v.residual))),
                );
            }
            body.aggregates
                .insert("correct_clear".into(), report.correct.violation.is_none().into());
            body.aggregates.insert("wrong_violated".into(), wrong_violated.into());
            body.pass = report.correct.violation.is_none();
        }

        "spectral-gap" => {
            let domain = build_domain(job)?;
            let m = p.m.unwrap_or(DEFAULT_M);
            let d = discretize_1d(&op, &domain, m)?;
            let eigs = low_spectrum(&d, 6.min(m));
            for (i, lambda) in eigs.iter().enumerate() {
                body.rows.push(
                    Row::default()
                        .set("index", i.into())
                        .set("eigenvalue", num_json(*lambda)),
                );
            }
            body.aggregates.insert("gap".into(), num_json(eigs[1]));
            body.aggregates.insert("m".into(), m.into());
        }

        "lichnerowicz" => {
            let k = kbound(req(&p.k, "k")?, n)?;
            let nv = req_n(&p.n, "n")?;
            let domain = build_domain(job)?;
            let m = p.m.unwrap_or(DEFAULT_M);
            let spec = match &job.transform {
                Some(doc) => Some((build_transform(doc, &op, job)?, req_n(&p.n_prime, "n_prime")?)),
                None => None,
            };
            let r = lichnerowicz_check(
                &op,
                &k,
                nv,
                spec.as_ref().map(|(s, np)| (s, *np)),
                &domain,
                m,
                tol,
            )?;
            body.rows.push(
                Row::default()
                    .set("gap", num_json(r.gap))
                    .set("k_inf", num_json(r.k_inf))
                    .set("n_prime", ext_json(r.n_prime))
                    .set("bound", num_json(r.bound))
                    .set("slack", num_json(r.slack))
                    .set("pass", r.pass.into()),
            );
            body.aggregates.insert("gap".into(), num_json(r.gap));
            body.aggregates.insert("bound".into(), num_json(r.bound));
            body.pass = r.pass;
        }

        "bonnet-myers" => {
            let f = pexpr(req(&p.f, "f")?, n, "params.f")?;
            let k = kbound(req(&p.k, "k")?, n)?;
            let k_bound = *req(&p.k_bound, "k_bound")?;
            let nv = finite(req_n(&p.n, "n")?, "n")?;
            let n_star = match req_n(&p.n_star, "n_star")? {
                ExtReal::Finite(v) => v,
                ExtReal::PlusInf => f64::INFINITY,
                ExtReal::MinusInf => {
                    return Err(CliError::Job("params.n_star must be > N".into()))
                }
            };
            let domain = build_domain(job)?;
            let m = p.m.unwrap_or(DEFAULT_M);
            match bonnet_myers_check(&op, &f, &k, k_bound, nv, n_star, &domain, m, tol) {
                Ok(r) => {
                    body.rows.push(
                        Row::default()
                            .set("diameter", num_json(r.diameter))
                            .set("bound", num_json(r.bound))
                            .set("k_bound", num_json(r.k_bound))
                            .set("n_star", num_json(r.n_star))
                            .set("hypothesis_min", num_json(r.hypothesis_min))
                            .set("skipped", r.skipped.into())
                            .set("pass", r.pass.into()),
                    );
                    body.aggregates.insert("diameter".into(), num_json(r.diameter));
                    body.aggregates.insert("bound".into(), num_json(r.bound));
                    body.pass = r.pass;
                }
                Err(SpectralError::HypothesisFailed { x, value, required }) => {
                    body.rows.push(
                        Row::at(&[x])
                            .set("hypothesis_value", num_json(value))
                            .set("required", num_json(required))
                            .set("pass", false.into()),
                    );
                    body.aggregates.insert(
                        "note".into(),
                        Value::String("curvature hypothesis fails on the grid".into()),
                    );
                    body.pass = false;
                }
                Err(e) => return Err(e.into()),
            }
        }

        "mms-kprime" => {
            let v = pexpr(req(&p.v, "v")?, n, "params.v")?;
            let w = pexpr(req(&p.w, "w")?, n, "params.w")?;
            let k = kbound(req(&p.k, "k")?, n)?;
            let nv = req_n(&p.n, "n")?;
            let npv = req_n(&p.n_prime, "n_prime")?;
            let kp = mms_kprime(&op, &v, &w, &k, nv, npv, &need_grid(job, n)?)?;
            body.rows.push(Row::default().set("k_prime", ext_json(kp)));
            body.aggregates.insert("k_prime".into(), ext_json(kp));
        }

        other => {
            return Err(CliError::Job(format!("unknown command {other:?}")));
        }
    }

    Ok(body)
}
