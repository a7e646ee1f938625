//! Job documents: one JSON file describes the operator, an optional
//! transformation, the command, and its parameters.

use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;
use std::fmt;

use gammaforge_core::curvature::ExtReal;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub operator: OperatorDoc,
    #[serde(default)]
    pub transform: Option<TransformDoc>,
    pub command: String,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub output: Option<OutputDoc>,
}

/// Either explicit coefficients (a, b) or a Riemannian metric g whose
/// Laplace–Beltrami operator is taken.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorDoc {
    pub dim: usize,
    #[serde(default)]
    pub a: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub b: Option<Vec<String>>,
    #[serde(default)]
    pub metric: Option<Vec<Vec<String>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformDoc {
    pub kind: String,
    #[serde(default)]
    pub f: Option<String>,
    #[serde(default)]
    pub pairs: Option<Vec<(String, String)>>,
    #[serde(default)]
    pub rho: Option<String>,
    #[serde(default)]
    pub n: Option<NParam>,
    #[serde(default)]
    pub tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default)]
    pub f: Option<String>,
    #[serde(default)]
    pub g: Option<String>,
    #[serde(default)]
    pub h: Option<String>,
    #[serde(default)]
    pub u: Option<String>,
    #[serde(default)]
    pub v: Option<String>,
    #[serde(default)]
    pub w: Option<String>,
    #[serde(default)]
    pub u_tests: Option<Vec<String>>,
    #[serde(default)]
    pub k: Option<KParam>,
    #[serde(default)]
    pub k_bound: Option<f64>,
    #[serde(default)]
    pub n: Option<NParam>,
    #[serde(default)]
    pub n_prime: Option<NParam>,
    #[serde(default)]
    pub n_star: Option<NParam>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub domain: Option<DomainDoc>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tol: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDoc {
    #[serde(default)]
    pub interval: Option<[f64; 2]>,
    #[serde(default)]
    pub circle: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// per-axis [min, max, count]
    #[serde(default)]
    pub axes: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub points: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputDoc {
    #[serde(default)]
    pub report: Option<String>,
    #[serde(default)]
    pub csv: Option<String>,
}

/// A dimension parameter: a number or "inf".
#[derive(Debug, Clone, Copy)]
pub struct NParam(pub ExtReal);

impl<'de> Deserialize<'de> for NParam {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = NParam;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<NParam, E> {
                Ok(NParam(ExtReal::Finite(v)))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<NParam, E> {
                Ok(NParam(ExtReal::Finite(v as f64)))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<NParam, E> {
                Ok(NParam(ExtReal::Finite(v as f64)))
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<NParam, E> {
                s.parse::<ExtReal>()
                    .map(NParam)
                    .map_err(|_| E::custom(format!("invalid dimension parameter {s:?}")))
            }
        }
        d.deserialize_any(V)
    }
}

/// A curvature bound: a constant or a scalar-field expression.
#[derive(Debug, Clone)]
pub enum KParam {
    Const(f64),
    Field(String),
}

impl<'de> Deserialize<'de> for KParam {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = KParam;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or an expression string")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<KParam, E> {
                Ok(KParam::Const(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<KParam, E> {
                Ok(KParam::Const(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<KParam, E> {
                Ok(KParam::Const(v as f64))
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<KParam, E> {
                Ok(KParam::Field(s.to_owned()))
            }
        }
        d.deserialize_any(V)
    }
}

/// Expands a grid spec: explicit points pass through in order; axes expand
/// lexicographically with the first axis most significant.
pub fn grid_expand(spec: &GridSpec, dim: usize) -> Result<Vec<Vec<f64>>, String> {
    match (&spec.axes, &spec.points) {
        (Some(_), Some(_)) => Err("grid: give either axes or points, not both".into()),
        (None, None) => Err("grid: empty spec".into()),
        (None, Some(points)) => {
            for (i, p) in points.iter().enumerate() {
                if p.len() != dim {
                    return Err(format!(
                        "grid.points[{i}]: expected {dim} coordinates, got {}",
                        p.len()
                    ));
                }
            }
            Ok(points.clone())
        }
        (Some(axes), None) => {
            if axes.len() != dim {
                return Err(format!("grid.axes: expected {dim} axes, got {}", axes.len()));
            }
            let mut ticks = Vec::with_capacity(dim);
            for (i, &[min, max, count]) in axes.iter().enumerate() {
                if count < 1.0 || count.fract() != 0.0 {
                    return Err(format!("grid.axes[{i}]: count must be a positive integer"));
                }
                if min > max {
                    return Err(format!("grid.axes[{i}]: min > max"));
                }
                let c = count as usize;
                let axis: Vec<f64> = if c == 1 {
                    vec![min]
                } else {
                    (0..c)
                        .map(|k| min + (max - min) * k as f64 / (c - 1) as f64)
                        .collect()
                };
                ticks.push(axis);
            }
            let mut points = vec![vec![]];
            for axis in &ticks {
                let mut next = Vec::with_capacity(points.len() * axis.len());
                for p in &points {
                    for &t in axis {
                        let mut q = p.clone();
                        q.push(t);
                        next.push(q);
                    }
                }
                points = next;
            }
            Ok(points)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_expand_lexicographically() {
        let spec = GridSpec { axes: Some(vec![[0.0, 1.0, 3.0]]), points: None };
        assert_eq!(grid_expand(&spec, 1).unwrap(), vec![vec![0.0], vec![0.5], vec![1.0]]);

        let spec = GridSpec {
            axes: Some(vec![[0.0, 1.0, 2.0], [10.0, 20.0, 2.0]]),
            points: None,
        };
        assert_eq!(
            grid_expand(&spec, 2).unwrap(),
            vec![
                vec![0.0, 10.0],
                vec![0.0, 20.0],
                vec![1.0, 10.0],
                vec![1.0, 20.0],
            ]
        );
    }

    #[test]
    fn explicit_points_pass_through() {
        let pts = vec![vec![3.0, 1.0], vec![-1.0, 2.0]];
        let spec = GridSpec { axes: None, points: Some(pts.clone()) };
        assert_eq!(grid_expand(&spec, 2).unwrap(), pts);
        assert!(grid_expand(&spec, 3).is_err());
    }

    #[test]
    fn degenerate_axes_are_rejected() {
        let bad_count = GridSpec { axes: Some(vec![[0.0, 1.0, 0.0]]), points: None };
        assert!(grid_expand(&bad_count, 1).is_err());
        let bad_range = GridSpec { axes: Some(vec![[2.0, 1.0, 3.0]]), points: None };
        assert!(grid_expand(&bad_range, 1).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{
            "operator": {"dim": 1, "a": [["1"]], "b": ["0"]},
            "command": "gamma",
            "bogus": 1
        }"#;
        let err = serde_json::from_str::<JobSpec>(text).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn dimension_parameters_accept_inf() {
        let text = r#"{
            "operator": {"dim": 1, "a": [["1"]], "b": ["0"]},
            "command": "ricci",
            "params": {"n": "inf", "k": "1 - x1^2"}
        }"#;
        let job: JobSpec = serde_json::from_str(text).unwrap();
        assert_eq!(job.params.n.unwrap().0, ExtReal::PlusInf);
        assert!(matches!(job.params.k, Some(KParam::Field(_))));
    }
}
