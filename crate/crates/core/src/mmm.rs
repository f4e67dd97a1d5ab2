//! Multiple marginal models: stacking per-model influence columns into one
//! joint estimator with an empirical correlation matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{influence_matrix, GlmFit, InfluenceMatrix, InfluenceUnit};

/// Below this many influence rows the sandwich correlation is flagged as coarse.
pub const SMALL_N_WARNING: usize = 10;

/// Picks the quantity of interest out of a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    Coefficient(usize),
    /// Linear combination cᵀθ of all coefficients.
    Contrast(Vec<f64>),
}

impl Selector {
    fn weights(&self, p: usize) -> Result<Vec<f64>> {
        match self {
            Selector::Coefficient(i) if *i < p => {
                let mut c = vec![0.0; p];
                c[*i] = 1.0;
                Ok(c)
            }
            Selector::Coefficient(i) => Err(Error::Argument(format!("coefficient {i} out of range for {p}"))),
            Selector::Contrast(c) if c.len() == p => Ok(c.clone()),
            Selector::Contrast(c) => {
                Err(Error::Argument(format!("contrast of length {} for {p} coefficients", c.len())))
            }
        }
    }
}

/// Which standard error standardizes the statistics and scales the joint covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdErrorSource {
    /// Model-based φ·(XᵀWX)⁻¹ of each marginal fit; the sandwich supplies only correlations.
    #[default]
    Model,
    /// √ of the sandwich diagonal.
    Sandwich,
}

/// One selected quantity of one marginal model, ready for stacking.
#[derive(Debug, Clone)]
pub struct MarginalComponent {
    pub label: String,
    pub estimate: f64,
    pub model_std_error: f64,
    pub unit: InfluenceUnit,
    pub influence: Vec<f64>,
}

impl MarginalComponent {
    pub fn from_fit(
        label: impl Into<String>,
        fit: &GlmFit,
        influence: &InfluenceMatrix,
        selector: &Selector,
    ) -> Result<Self> {
        let c = selector.weights(fit.n_params())?;
        let (estimate, variance) = fit.linear_combination(&c);
        let column = &influence.rows * nalgebra::DVector::from_column_slice(&c);
        Ok(Self {
            label: label.into(),
            estimate,
            model_std_error: variance.max(0.0).sqrt(),
            unit: influence.unit,
            influence: column.iter().copied().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointComponent {
    pub label: String,
    pub estimate: f64,
    /// Standard error used for the statistic; √ of the covariance diagonal.
    pub std_error: f64,
    pub model_std_error: f64,
    pub sandwich_std_error: f64,
    pub statistic: f64,
}

#[derive(Debug, Clone)]
pub struct MmmJoint {
    pub components: Vec<JointComponent>,
    /// D R D with D the chosen standard errors.
    pub covariance: DMatrix<f64>,
    /// ΨᵀΨ.
    pub sandwich: DMatrix<f64>,
    pub correlation: DMatrix<f64>,
    pub n_rows: usize,
    pub unit: InfluenceUnit,
    pub std_error_source: StdErrorSource,
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
}

impl MmmJoint {
    pub fn statistics(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.statistic).collect()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Fits influence matrices and stacks the selected quantities of several fits.
pub fn stack_fits(
    fits: &[(String, &GlmFit, Selector)],
    unit: InfluenceUnit,
    source: StdErrorSource,
) -> Result<MmmJoint> {
    let mut parts = Vec::with_capacity(fits.len());
    for (label, fit, selector) in fits {
        let inf = influence_matrix(fit, unit)?;
        parts.push(MarginalComponent::from_fit(label.clone(), fit, &inf, selector)?);
    }
    stack_models(parts, source)
}

/// Stacks marginal components: V̂ = ΨᵀΨ, R̂ = diag(V̂)^{-1/2} V̂ diag(V̂)^{-1/2}.
///
/// Components whose sandwich (or chosen) variance vanishes are dropped with a
/// warning; an error is returned only if nothing is left.
pub fn stack_models(parts: Vec<MarginalComponent>, source: StdErrorSource) -> Result<MmmJoint> {
    let first = parts.first().ok_or_else(|| Error::Argument("no components to stack".into()))?;
    let n_rows = first.influence.len();
    let unit = first.unit;
    for part in &parts {
        if part.influence.len() != n_rows || part.unit != unit {
            return Err(Error::Alignment { expected: n_rows, found: part.influence.len() });
        }
    }

    let mut warnings = Vec::new();
    let mut dropped = Vec::new();
    let mut kept = Vec::with_capacity(parts.len());
    for part in parts {
        let sandwich_var: f64 = part.influence.iter().map(|v| v * v).sum();
        let model_var = part.model_std_error * part.model_std_error;
        let degenerate = !(sandwich_var > 1e-14 * model_var && sandwich_var.is_finite())
            || !part.estimate.is_finite()
            || (source == StdErrorSource::Model && !(part.model_std_error > 0.0));
        if degenerate {
            warnings.push(format!("component `{}` has zero variance and was dropped", part.label));
            dropped.push(part.label);
        } else {
            kept.push(part);
        }
    }
    if kept.is_empty() {
        return Err(Error::DegenerateComponent(dropped.join(", ")));
    }

    let m = kept.len();
    let psi = DMatrix::from_fn(n_rows, m, |i, j| kept[j].influence[i]);
    let mut sandwich = psi.transpose() * &psi;
    sandwich = (&sandwich + sandwich.transpose()) * 0.5;
    let sandwich_se: Vec<f64> = (0..m).map(|j| sandwich[(j, j)].sqrt()).collect();
    let mut correlation = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else {
            (sandwich[(i, j)] / (sandwich_se[i] * sandwich_se[j])).clamp(-1.0, 1.0)
        }
    });
    correlation = (&correlation + correlation.transpose()) * 0.5;
    for i in 0..m {
        correlation[(i, i)] = 1.0;
    }
    let min_eig = correlation.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-8 {
        return Err(Error::Matrix(format!("stacked correlation has eigenvalue {min_eig:e}")));
    }

    let components: Vec<JointComponent> = kept
        .iter()
        .zip(&sandwich_se)
        .map(|(part, &sse)| {
            let se = match source {
                StdErrorSource::Model => part.model_std_error,
                StdErrorSource::Sandwich => sse,
            };
            JointComponent {
                label: part.label.clone(),
                estimate: part.estimate,
                std_error: se,
                model_std_error: part.model_std_error,
                sandwich_std_error: sse,
                statistic: part.estimate / se,
            }
        })
        .collect();
    let covariance =
        DMatrix::from_fn(m, m, |i, j| correlation[(i, j)] * components[i].std_error * components[j].std_error);

    if n_rows < SMALL_N_WARNING {
        warnings.push(format!("only {n_rows} influence rows; the sandwich correlation estimate is coarse"));
    }

    Ok(MmmJoint {
        components,
        covariance,
        sandwich,
        correlation,
        n_rows,
        unit,
        std_error_source: source,
        dropped,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{add_pseudo_counts, scale_doses, DoseResponseTable, Scaling, ZeroDosePolicy};
    use crate::glm::{fit_glm, Design, Family, Link};

    fn table1() -> DoseResponseTable {
        DoseResponseTable::from_counts(&[0.0, 0.0875, 0.175, 0.35, 0.7], &[0, 2, 2, 6, 6], &[46, 45, 46, 47, 44])
            .unwrap()
    }

    fn slope_fit(table: &DoseResponseTable, kind: Scaling, factor: f64) -> GlmFit {
        let data = add_pseudo_counts(table, 0.5).unwrap();
        let mut x = scale_doses(&data.doses(), kind, ZeroDosePolicy::Extrapolate).unwrap();
        x.values.iter_mut().for_each(|v| *v *= factor);
        fit_glm(&data, &Design::regression(&x), Link::Logit, Family::Binomial).unwrap()
    }

    #[test]
    fn same_model_twice_is_perfectly_correlated() {
        let fit = slope_fit(&table1(), Scaling::Arithmetic, 1.0);
        let joint = stack_fits(
            &[("a".into(), &fit, Selector::Coefficient(1)), ("b".into(), &fit, Selector::Coefficient(1))],
            InfluenceUnit::TableRow,
            StdErrorSource::Model,
        )
        .unwrap();
        assert!((joint.correlation[(0, 1)] - 1.0).abs() < 1e-10);
        assert!(joint.warnings.iter().any(|w| w.contains("coarse")));
    }

    #[test]
    fn arithmetic_and_ordinal_correlation_matches_direct_computation() {
        let t = table1();
        let ari = slope_fit(&t, Scaling::Arithmetic, 1.0);
        let ord = slope_fit(&t, Scaling::Ordinal, 1.0);
        let joint = stack_fits(
            &[("ari".into(), &ari, Selector::Coefficient(1)), ("ord".into(), &ord, Selector::Coefficient(1))],
            InfluenceUnit::TableRow,
            StdErrorSource::Model,
        )
        .unwrap();
        let r = joint.correlation[(0, 1)];
        assert!(r > 0.0 && r < 1.0);

        // Independent route: recompute both influence columns by hand.
        let column = |fit: &GlmFit| -> Vec<f64> {
            (0..fit.n_rows())
                .map(|i| {
                    let mu = fit.fitted[i];
                    let u = fit.successes[i] - fit.prior_weights[i] * mu;
                    let x = [1.0, fit.design[(i, 1)]];
                    (fit.unscaled_cov[(1, 0)] * x[0] + fit.unscaled_cov[(1, 1)] * x[1]) * u
                })
                .collect()
        };
        let (a, b) = (column(&ari), column(&ord));
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        let direct = dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt();
        assert!((r - direct).abs() < 1e-12);
    }

    #[test]
    fn rescaling_a_regressor_leaves_r_and_t_unchanged() {
        let t = table1();
        let ari = slope_fit(&t, Scaling::Arithmetic, 1.0);
        let ari10 = slope_fit(&t, Scaling::Arithmetic, 10.0);
        let ord = slope_fit(&t, Scaling::Ordinal, 1.0);
        let stack = |a: &GlmFit, source| {
            stack_fits(
                &[("a".into(), a, Selector::Coefficient(1)), ("o".into(), &ord, Selector::Coefficient(1))],
                InfluenceUnit::TableRow,
                source,
            )
            .unwrap()
        };
        for source in [StdErrorSource::Model, StdErrorSource::Sandwich] {
            let (j1, j2) = (stack(&ari, source), stack(&ari10, source));
            assert!((j1.correlation[(0, 1)] - j2.correlation[(0, 1)]).abs() < 1e-10);
            assert!((j1.components[0].statistic - j2.components[0].statistic).abs() < 1e-8);
            for (i, c) in j1.components.iter().enumerate() {
                assert!((c.std_error - j1.covariance[(i, i)].sqrt()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mismatched_rows_fail_to_align() {
        let fit = slope_fit(&table1(), Scaling::Arithmetic, 1.0);
        let a = MarginalComponent::from_fit(
            "a",
            &fit,
            &influence_matrix(&fit, InfluenceUnit::TableRow).unwrap(),
            &Selector::Coefficient(1),
        )
        .unwrap();
        let b = MarginalComponent::from_fit(
            "b",
            &fit,
            &influence_matrix(&fit, InfluenceUnit::Subject).unwrap(),
            &Selector::Coefficient(1),
        )
        .unwrap();
        assert!(matches!(stack_models(vec![a, b], StdErrorSource::Model), Err(Error::Alignment { .. })));
    }

    #[test]
    fn zero_variance_components_are_dropped() {
        let t = DoseResponseTable::from_counts(&[0.0, 1.0, 2.0], &[3, 5, 9], &[10, 10, 10]).unwrap();
        let data = t.weighted();
        let cells = fit_glm(&data, &Design::cell_means(&data.doses()), Link::Logit, Family::Binomial).unwrap();
        let x = scale_doses(&data.doses(), Scaling::Arithmetic, ZeroDosePolicy::Extrapolate).unwrap();
        let slope = fit_glm(&data, &Design::regression(&x), Link::Logit, Family::Binomial).unwrap();
        let joint = stack_fits(
            &[
                ("slope".into(), &slope, Selector::Coefficient(1)),
                ("cells".into(), &cells, Selector::Contrast(vec![-1.0, 0.0, 1.0])),
            ],
            InfluenceUnit::TableRow,
            StdErrorSource::Model,
        )
        .unwrap();
        assert_eq!(joint.len(), 1);
        assert_eq!(joint.dropped, vec!["cells".to_string()]);
        let err = stack_fits(
            &[("cells".into(), &cells, Selector::Coefficient(0))],
            InfluenceUnit::TableRow,
            StdErrorSource::Model,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateComponent(_)));
    }
}
