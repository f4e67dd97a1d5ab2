//! Binomial and quasi-binomial GLMs fitted by iteratively reweighted least
//! squares, plus the per-observation influence contributions used to stack
//! marginal models.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{distinct_sorted, level_index, ScaledDoses, WeightedTable};
use crate::error::{Error, Result};

/// Fitted probabilities are kept inside `[CLAMP, 1 - CLAMP]`.
pub const CLAMP: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 200;
pub const MAX_HALVINGS: usize = 50;
const DEVIANCE_TOL: f64 = 1e-10;
const SCORE_TOL: f64 = 1e-8;
const POLISH_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Identity,
    Log,
}

impl Link {
    pub const ALL: [Link; 3] = [Link::Logit, Link::Identity, Link::Log];

    pub fn eta(self, mu: f64) -> f64 {
        match self {
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Identity => mu,
            Link::Log => mu.ln(),
        }
    }

    pub fn mu(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }

    /// dμ/dη at a (clamped) mean.
    fn mu_eta(self, mu: f64) -> f64 {
        match self {
            Link::Logit => mu * (1.0 - mu),
            Link::Identity => 1.0,
            Link::Log => mu,
        }
    }

    /// Links whose linear predictor can leave the unit interval.
    fn is_constrained(self) -> bool {
        !matches!(self, Link::Logit)
    }

    pub fn effect_size(self) -> EffectSize {
        match self {
            Link::Logit => EffectSize::OddsRatio,
            Link::Identity => EffectSize::RiskDifference,
            Link::Log => EffectSize::RiskRatio,
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::Logit => "logit",
            Link::Identity => "identity",
            Link::Log => "log",
        })
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logit" | "or" => Ok(Link::Logit),
            "identity" | "rd" => Ok(Link::Identity),
            "log" | "rr" => Ok(Link::Log),
            other => Err(Error::Argument(format!("unknown link `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectSize {
    #[serde(rename = "OR")]
    OddsRatio,
    #[serde(rename = "RD")]
    RiskDifference,
    #[serde(rename = "RR")]
    RiskRatio,
}

impl EffectSize {
    pub fn abbreviation(self) -> &'static str {
        match self {
            EffectSize::OddsRatio => "OR",
            EffectSize::RiskDifference => "RD",
            EffectSize::RiskRatio => "RR",
        }
    }

    /// Maps a link-scale quantity to the effect scale.
    pub fn transform(self, value: f64) -> f64 {
        match self {
            EffectSize::RiskDifference => value,
            EffectSize::OddsRatio | EffectSize::RiskRatio => value.exp(),
        }
    }
}

impl fmt::Display for EffectSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbreviation())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Binomial,
    QuasiBinomial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub labels: Vec<String>,
    pub matrix: DMatrix<f64>,
}

impl Design {
    /// Intercept and slope on the scaled dose.
    pub fn regression(x: &ScaledDoses) -> Design {
        let n = x.values.len();
        let matrix = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x.values[i] });
        Design { labels: vec!["(Intercept)".into(), format!("dose.{}", x.kind)], matrix }
    }

    /// One indicator column per distinct dose (sorted), no intercept.
    pub fn cell_means(doses: &[f64]) -> Design {
        let levels = distinct_sorted(doses);
        let matrix =
            DMatrix::from_fn(
                doses.len(),
                levels.len(),
                |i, j| {
                    if level_index(&levels, doses[i]) == j {
                        1.0
                    } else {
                        0.0
                    }
                },
            );
        Design { labels: levels.iter().map(|d| format!("dose={d}")).collect(), matrix }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub link: Link,
    pub family: Family,
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    /// φ·(XᵀWX)⁻¹.
    pub model_cov: DMatrix<f64>,
    /// (XᵀWX)⁻¹ without the dispersion factor.
    pub unscaled_cov: DMatrix<f64>,
    pub fitted: Vec<f64>,
    /// Dispersion applied to `model_cov`; 1 for the binomial family.
    pub dispersion: f64,
    /// Pearson X²/(N−p), when there are residual degrees of freedom.
    pub pearson: Option<f64>,
    pub design: DMatrix<f64>,
    pub prior_weights: Vec<f64>,
    pub successes: Vec<f64>,
    pub deviance: f64,
    pub deviance_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl GlmFit {
    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.design.ncols()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.n_params()).map(|i| self.model_cov[(i, i)].sqrt()).collect()
    }

    /// cᵀθ̂ and its model-based variance cᵀΣc.
    pub fn linear_combination(&self, c: &[f64]) -> (f64, f64) {
        let c = DVector::from_column_slice(c);
        let theta = DVector::from_column_slice(&self.coefficients);
        let estimate = c.dot(&theta);
        let variance = (c.transpose() * &self.model_cov * &c)[(0, 0)];
        (estimate, variance)
    }

    /// Weighted score vector Xᵀ(n·c·(y/n − μ)) at the fitted values.
    pub fn score(&self) -> Vec<f64> {
        let u = score_vector(self.link, &self.design, &self.successes, &self.prior_weights, &self.fitted);
        u.iter().copied().collect()
    }
}

/// Fits a binomial GLM with IRLS and deviance step-halving.
pub fn fit_glm(data: &WeightedTable, design: &Design, link: Link, family: Family) -> Result<GlmFit> {
    let x = &design.matrix;
    let (nrows, p) = (x.nrows(), x.ncols());
    if nrows != data.len() {
        return Err(Error::Alignment { expected: data.len(), found: nrows });
    }
    if nrows < p {
        return Err(Error::Design(format!("{nrows} rows for {p} parameters")));
    }
    check_rank(x)?;
    if family == Family::QuasiBinomial && nrows <= p {
        return Err(Error::DegreesOfFreedom { rows: nrows, params: p });
    }

    let totals: Vec<f64> = data.rows.iter().map(|r| r.total()).collect();
    let successes: Vec<f64> = data.rows.iter().map(|r| r.successes).collect();
    if totals.iter().any(|&n| !(n > 0.0)) || successes.iter().any(|&s| s < 0.0) {
        return Err(Error::Validation("every row needs positive total weight".into()));
    }
    let pooled = data.pooled_proportion();
    if !(pooled > 0.0 && pooled < 1.0) {
        return Err(Error::StartValue(format!("pooled proportion {pooled} lies on the boundary")));
    }

    let start_eta = DVector::from_element(nrows, link.eta(pooled));
    let mut beta = x.clone().svd(true, true).solve(&start_eta, 1e-12).map_err(|e| Error::Design(e.to_string()))?;
    let mut mu = means(link, x, &beta).ok_or_else(|| Error::StartValue(format!("{link} link start is infeasible")))?;
    let mut dev = deviance(&successes, &totals, &mu);
    let score0 = max_abs(&score_vector(link, x, &successes, &totals, &mu)).max(1.0);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut polishing: Option<f64> = None;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (xtwx, xtwz) = weighted_normal_equations(link, x, &beta, &successes, &totals, &mu);
        let target = match xtwx.clone().cholesky() {
            Some(chol) => chol.solve(&xtwz),
            None => return Err(Error::Design("XᵀWX is not positive definite".into())),
        };
        let mut step = target - &beta;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta + &step;
            if let Some(cand_mu) = means(link, x, &candidate) {
                let cand_dev = deviance(&successes, &totals, &cand_mu);
                if cand_dev.is_finite() && cand_dev <= dev + 1e-12 * (dev.abs() + 1.0) {
                    accepted = Some((candidate, cand_mu, cand_dev));
                    break;
                }
            }
            step /= 2.0;
        }
        let Some((new_beta, new_mu, new_dev)) = accepted else {
            // No descent direction left: either already at the optimum or stuck.
            let score = max_abs(&score_vector(link, x, &successes, &totals, &mu));
            if score <= SCORE_TOL * score0 {
                converged = true;
                break;
            }
            return Err(Error::Convergence { iterations, last_coefficients: beta.iter().copied().collect() });
        };
        let rel_change = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        beta = new_beta;
        mu = new_mu;
        dev = new_dev;
        trace.push(dev);
        let score = max_abs(&score_vector(link, x, &successes, &totals, &mu));
        if let Some(last) = polishing {
            // Scoring is only linearly convergent for non-canonical links.
            if score <= POLISH_TOL * score0 || score > 0.5 * last {
                converged = true;
                break;
            }
            polishing = Some(score);
        } else if rel_change <= DEVIANCE_TOL && score <= SCORE_TOL * score0 {
            polishing = Some(score);
        }
    }
    converged |= polishing.is_some();
    if !converged {
        return Err(Error::Convergence { iterations, last_coefficients: beta.iter().copied().collect() });
    }

    let (xtwx, _) = weighted_normal_equations(link, x, &beta, &successes, &totals, &mu);
    let unscaled_cov = symmetric_inverse(&xtwx)?;
    let pearson = (nrows > p).then(|| pearson_statistic(&successes, &totals, &mu) / (nrows - p) as f64);
    let dispersion = match family {
        Family::Binomial => 1.0,
        Family::QuasiBinomial => pearson.expect("residual df checked above"),
    };
    let model_cov = &unscaled_cov * dispersion;

    Ok(GlmFit {
        link,
        family,
        labels: design.labels.clone(),
        coefficients: beta.iter().copied().collect(),
        model_cov,
        unscaled_cov,
        fitted: mu,
        dispersion,
        pearson,
        design: x.clone(),
        prior_weights: totals,
        successes,
        deviance: dev,
        deviance_trace: trace,
        converged,
        iterations,
    })
}

/// Pearson dispersion X²/(N−p) of a fit.
pub fn pearson_dispersion(fit: &GlmFit) -> Result<f64> {
    let (n, p) = (fit.n_rows(), fit.n_params());
    if n <= p {
        return Err(Error::DegreesOfFreedom { rows: n, params: p });
    }
    Ok(pearson_statistic(&fit.successes, &fit.prior_weights, &fit.fitted) / (n - p) as f64)
}

/// The observational unit behind the rows of an [`InfluenceMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceUnit {
    /// One row per table row (dose group or replicate plate).
    TableRow,
    /// One row per individual binary outcome. Stored as a success row and a
    /// failure row per table row, each scaled by the square root of its count.
    Subject,
}

#[derive(Debug, Clone)]
pub struct InfluenceMatrix {
    pub unit: InfluenceUnit,
    pub labels: Vec<String>,
    /// Rows scaled by √multiplicity so that ΨᵀΨ is the HC0 sandwich.
    pub rows: DMatrix<f64>,
    pub multiplicity: Vec<f64>,
}

impl InfluenceMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    /// Σ over observations of ψ, which vanishes at the MLE.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.rows.ncols())
            .map(|j| self.rows.column(j).iter().zip(&self.multiplicity).map(|(v, m)| v * m.sqrt()).sum())
            .collect()
    }

    /// ΨᵀΨ.
    pub fn gram(&self) -> DMatrix<f64> {
        self.rows.transpose() * &self.rows
    }
}

/// Empirical influence contributions ψ_n = (XᵀWX)⁻¹ x_n u_n of each
/// observation on the coefficient estimates.
pub fn influence_matrix(fit: &GlmFit, unit: InfluenceUnit) -> Result<InfluenceMatrix> {
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    let x = &fit.design;
    let bread = &fit.unscaled_cov;
    let n = fit.n_rows();
    let mut rows = match unit {
        InfluenceUnit::TableRow => DMatrix::zeros(n, fit.n_params()),
        InfluenceUnit::Subject => DMatrix::zeros(2 * n, fit.n_params()),
    };
    let mut multiplicity = Vec::with_capacity(rows.nrows());
    for i in 0..n {
        let mu = fit.fitted[i];
        let c = fit.link.mu_eta(mu) / (mu * (1.0 - mu));
        let psi_unit = bread * x.row(i).transpose();
        match unit {
            InfluenceUnit::TableRow => {
                let u = c * (fit.successes[i] - fit.prior_weights[i] * mu);
                rows.row_mut(i).copy_from(&(psi_unit * u).transpose());
                multiplicity.push(1.0);
            }
            InfluenceUnit::Subject => {
                let s = fit.successes[i];
                let f = fit.prior_weights[i] - s;
                let success_row = &psi_unit * (c * (1.0 - mu) * s.sqrt());
                let failure_row = &psi_unit * (-c * mu * f.sqrt());
                rows.row_mut(i).copy_from(&success_row.transpose());
                rows.row_mut(n + i).copy_from(&failure_row.transpose());
                multiplicity.push(s);
            }
        }
    }
    if unit == InfluenceUnit::Subject {
        for i in 0..n {
            multiplicity.push(fit.prior_weights[i] - fit.successes[i]);
        }
    }
    Ok(InfluenceMatrix { unit, labels: fit.labels.clone(), rows, multiplicity })
}

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::Design(format!("condition {max:e}/{min:e}")));
    }
    Ok(())
}

/// Fitted means for `beta`, or `None` if a constrained link leaves the
/// feasible region.
fn means(link: Link, x: &DMatrix<f64>, beta: &DVector<f64>) -> Option<Vec<f64>> {
    let eta = x * beta;
    let mut mu = Vec::with_capacity(eta.len());
    for &e in eta.iter() {
        let m = link.mu(e);
        if !m.is_finite() {
            return None;
        }
        if link.is_constrained() && !(CLAMP..=1.0 - CLAMP).contains(&m) {
            return None;
        }
        mu.push(m.clamp(CLAMP, 1.0 - CLAMP));
    }
    Some(mu)
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

fn deviance(successes: &[f64], totals: &[f64], mu: &[f64]) -> f64 {
    successes
        .iter()
        .zip(totals)
        .zip(mu)
        .map(|((&s, &n), &m)| 2.0 * (xlogy(s, n * m) + xlogy(n - s, n * (1.0 - m))))
        .sum()
}

fn pearson_statistic(successes: &[f64], totals: &[f64], mu: &[f64]) -> f64 {
    successes.iter().zip(totals).zip(mu).map(|((&s, &n), &m)| (s - n * m).powi(2) / (n * m * (1.0 - m))).sum()
}

fn score_vector(link: Link, x: &DMatrix<f64>, successes: &[f64], totals: &[f64], mu: &[f64]) -> DVector<f64> {
    let u = DVector::from_iterator(
        mu.len(),
        (0..mu.len()).map(|i| {
            let m = mu[i];
            link.mu_eta(m) / (m * (1.0 - m)) * (successes[i] - totals[i] * m)
        }),
    );
    x.transpose() * u
}

fn weighted_normal_equations(
    link: Link,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    successes: &[f64],
    totals: &[f64],
    mu: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let eta = x * beta;
    let mut xtwx = DMatrix::zeros(x.ncols(), x.ncols());
    let mut xtwz = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        let m = mu[i];
        let d = link.mu_eta(m);
        let w = totals[i] * d * d / (m * (1.0 - m));
        let z = eta[i] + (successes[i] / totals[i] - m) / d;
        let xi = x.row(i).transpose();
        xtwx += &xi * xi.transpose() * w;
        xtwz += xi * (w * z);
    }
    (xtwx, xtwz)
}

fn symmetric_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = m.clone().cholesky().ok_or_else(|| Error::Design("XᵀWX is singular at the solution".into()))?.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
