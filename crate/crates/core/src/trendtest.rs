//! Trend-test procedures: the Cochran–Armitage statistic, the Tukey-type
//! maximum test over dose metameters, the double maximum over link functions,
//! the joint regression plus Williams test and the overdispersed variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrasts::{contrast_components, williams_contrasts_named};
use crate::data::{add_pseudo_counts, scale_doses, DoseResponseTable, Scaling, ZeroDosePolicy};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, influence_matrix, Design, EffectSize, Family, InfluenceUnit, Link};
use crate::mmm::{stack_models, MarginalComponent, Selector, StdErrorSource};
use crate::mvn::{MvnEstimate, MvnIntegrator, MvnOptions, Tail};
use crate::normal;

/// Relative closeness of adjusted p-values treated as a tie for the best component.
const TIE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    Greater,
    Less,
    TwoSided,
}

impl Alternative {
    pub fn raw_p(self, statistic: f64) -> f64 {
        match self {
            Alternative::Greater => normal::sf(statistic),
            Alternative::Less => normal::cdf(statistic),
            Alternative::TwoSided => (2.0 * normal::sf(statistic.abs())).min(1.0),
        }
    }
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternative::Greater => "greater",
            Alternative::Less => "less",
            Alternative::TwoSided => "two-sided",
        })
    }
}

impl FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "greater" => Ok(Alternative::Greater),
            "less" => Ok(Alternative::Less),
            "two-sided" | "two.sided" | "twosided" => Ok(Alternative::TwoSided),
            other => Err(Error::Argument(format!("unknown alternative `{other}`"))),
        }
    }
}

/// When to add pseudo-counts to every cell before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "amount")]
pub enum PseudoCount {
    Off,
    Always(f64),
    /// Only if some dose group has zero or all events.
    OnBoundary(f64),
}

impl PseudoCount {
    pub fn amount(self, table: &DoseResponseTable) -> f64 {
        match self {
            PseudoCount::Off => 0.0,
            PseudoCount::Always(a) => a,
            PseudoCount::OnBoundary(a) if table.has_boundary_group() => a,
            PseudoCount::OnBoundary(_) => 0.0,
        }
    }
}

impl FromStr for PseudoCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (boundary, number) = match s.strip_prefix("auto") {
            Some(rest) => (true, rest.trim_start_matches([':', '=']).trim()),
            None => (false, s),
        };
        if s.eq_ignore_ascii_case("off") {
            return Ok(PseudoCount::Off);
        }
        let amount = if boundary && number.is_empty() {
            0.5
        } else {
            number.parse::<f64>().map_err(|_| Error::Argument(format!("bad pseudo-count `{s}`")))?
        };
        if !(amount.is_finite() && amount >= 0.0) {
            return Err(Error::Argument(format!("pseudo-count must be finite and >= 0, got `{s}`")));
        }
        Ok(match (boundary, amount) {
            (_, 0.0) => PseudoCount::Off,
            (true, a) => PseudoCount::OnBoundary(a),
            (false, a) => PseudoCount::Always(a),
        })
    }
}

/// Pseudo-count policy per link function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoCounts {
    pub logit: PseudoCount,
    pub identity: PseudoCount,
    pub log: PseudoCount,
}

impl Default for PseudoCounts {
    /// 0.5 per cell for boundary tables under the logit and identity links.
    fn default() -> Self {
        Self { logit: PseudoCount::OnBoundary(0.5), identity: PseudoCount::OnBoundary(0.5), log: PseudoCount::Off }
    }
}

impl PseudoCounts {
    pub fn uniform(policy: PseudoCount) -> Self {
        Self { logit: policy, identity: policy, log: policy }
    }

    pub fn for_link(&self, link: Link) -> PseudoCount {
        match link {
            Link::Logit => self.logit,
            Link::Identity => self.identity,
            Link::Log => self.log,
        }
    }

    pub fn set(&mut self, link: Link, policy: PseudoCount) {
        match link {
            Link::Logit => self.logit = policy,
            Link::Identity => self.identity = policy,
            Link::Log => self.log = policy,
        }
    }
}

impl FromStr for PseudoCounts {
    type Err = Error;

    /// Either one policy for all links (`0.5`, `off`, `auto:0.5`) or a
    /// comma-separated `link=policy` list; unlisted links keep the default.
    fn from_str(s: &str) -> Result<Self> {
        if !s.contains('=') || s.trim().starts_with("auto=") {
            return Ok(Self::uniform(s.parse()?));
        }
        let mut out = Self::default();
        for item in s.split(',') {
            let (link, policy) =
                item.split_once('=').ok_or_else(|| Error::Argument(format!("expected link=value, got `{item}`")))?;
            out.set(link.parse()?, policy.parse()?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub alternative: Alternative,
    /// Simultaneous confidence level.
    pub level: f64,
    pub zero_dose: ZeroDosePolicy,
    pub pseudo_counts: PseudoCounts,
    pub std_error_source: StdErrorSource,
    /// Overrides the per-procedure influence unit.
    pub influence_unit: Option<InfluenceUnit>,
    pub mvn: MvnOptions,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self {
            alternative: Alternative::Greater,
            level: 0.95,
            zero_dose: ZeroDosePolicy::Extrapolate,
            pseudo_counts: PseudoCounts::default(),
            std_error_source: StdErrorSource::Model,
            influence_unit: None,
            mvn: MvnOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    Tukey,
    DoubleMax,
    JointWilliams,
    Overdispersed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub label: String,
    pub effect_size: EffectSize,
    /// `ari`, `ord`, `log`, or `treat` for contrasts.
    pub metameter: String,
    pub link: Link,
    pub estimate: f64,
    pub estimate_effect: f64,
    pub std_error: f64,
    pub model_std_error: f64,
    pub sandwich_std_error: f64,
    pub statistic: f64,
    pub raw_p: f64,
    pub adjusted_p: f64,
    /// Simultaneous bounds on the link scale; `None` is unbounded.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub lower_effect: Option<f64>,
    pub upper_effect: Option<f64>,
    pub pseudo_count: f64,
    /// Dispersion applied to the model covariance.
    pub dispersion: f64,
    /// Pearson X²/(N−p) of the marginal fit, when defined.
    pub pearson_dispersion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub procedure: Procedure,
    pub components: Vec<ComponentResult>,
    pub best: String,
    pub best_index: usize,
    /// Components whose adjusted p equals the minimum up to numerical ties.
    pub tied_best: Vec<String>,
    pub alternative: Alternative,
    pub level: f64,
    pub seed: u64,
    /// Influence rows.
    pub n: usize,
    /// Components in the max-test.
    pub m: usize,
    pub critical_value: f64,
    /// Largest MVN error estimate among the p-values and the critical value.
    pub mvn_error: f64,
    pub influence_unit: InfluenceUnit,
    pub std_error_source: StdErrorSource,
    pub correlation: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl TrendReport {
    pub fn component(&self, label: &str) -> Option<&ComponentResult> {
        self.components.iter().find(|c| c.label == label)
    }

    pub fn best_component(&self) -> &ComponentResult {
        &self.components[self.best_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaResult {
    pub statistic: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub continuity: bool,
}

/// Cochran–Armitage trend statistic with a normal reference.
///
/// The optional continuity correction shrinks the numerator toward zero by
/// (max D − min D) / (2 (k − 1)) event units.
pub fn ca_test(table: &DoseResponseTable, alternative: Alternative, continuity: bool) -> Result<CaResult> {
    let rows = table.rows();
    let n_total: f64 = rows.iter().map(|r| r.trials as f64).sum();
    let y_total: f64 = rows.iter().map(|r| r.events as f64).sum();
    let p_bar = y_total / n_total;
    if !(p_bar > 0.0 && p_bar < 1.0) {
        return Err(Error::Degenerate(format!("pooled proportion is {p_bar}")));
    }
    let d_bar = rows.iter().map(|r| r.trials as f64 * r.dose).sum::<f64>() / n_total;
    let mut numerator: f64 = rows.iter().map(|r| r.events as f64 * (r.dose - d_bar)).sum();
    let spread: f64 = rows.iter().map(|r| r.trials as f64 * (r.dose - d_bar).powi(2)).sum();
    if continuity {
        let levels = table.distinct_doses();
        let k = levels.len() as f64;
        let shrink = (levels[levels.len() - 1] - levels[0]) / (2.0 * (k - 1.0));
        numerator = numerator.signum() * (numerator.abs() - shrink).max(0.0);
    }
    let statistic = numerator / (p_bar * (1.0 - p_bar) * spread).sqrt();
    Ok(CaResult { statistic, p_value: alternative.raw_p(statistic), alternative, continuity })
}

struct Meta {
    effect_size: EffectSize,
    metameter: String,
    link: Link,
    pseudo_count: f64,
    dispersion: f64,
    pearson: Option<f64>,
}

struct Prepared {
    parts: Vec<MarginalComponent>,
    meta: Vec<Meta>,
    warnings: Vec<String>,
}

impl Prepared {
    fn new() -> Self {
        Self { parts: Vec::new(), meta: Vec::new(), warnings: Vec::new() }
    }
}

fn component_label(link: Link, metameter: &str) -> String {
    format!("{}:{}", link.effect_size(), metameter)
}

#[allow(clippy::too_many_arguments)]
fn add_regressions(
    prepared: &mut Prepared,
    table: &DoseResponseTable,
    link: Link,
    family: Family,
    scalings: &[Scaling],
    unit: InfluenceUnit,
    options: &TestOptions,
    drop_failures: bool,
) -> Result<()> {
    let amount = options.pseudo_counts.for_link(link).amount(table);
    let data = add_pseudo_counts(table, amount)?;
    if amount > 0.0 {
        prepared.warnings.push(format!("pseudo-count {amount} added to every cell for the {link} link"));
    }
    for &scaling in scalings {
        let x = scale_doses(&data.doses(), scaling, options.zero_dose)?;
        let label = component_label(link, scaling.short_name());
        let fit = match fit_glm(&data, &Design::regression(&x), link, family) {
            Ok(fit) => fit,
            Err(e @ (Error::Convergence { .. } | Error::StartValue(_))) if drop_failures => {
                prepared.warnings.push(format!("model {label} dropped: {e}"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let influence = influence_matrix(&fit, unit)?;
        prepared.parts.push(MarginalComponent::from_fit(label, &fit, &influence, &Selector::Coefficient(1))?);
        prepared.meta.push(Meta {
            effect_size: link.effect_size(),
            metameter: scaling.short_name().to_string(),
            link,
            pseudo_count: amount,
            dispersion: fit.dispersion,
            pearson: fit.pearson,
        });
    }
    Ok(())
}

fn check_scalings(scalings: &[Scaling]) -> Result<()> {
    if scalings.is_empty() {
        return Err(Error::Argument("at least one dose scaling is required".into()));
    }
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("confidence level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

/// Tukey-type trend test: one regression per dose metameter, max-test over slopes.
pub fn tukey_trend_test(
    table: &DoseResponseTable,
    link: Link,
    scalings: &[Scaling],
    options: &TestOptions,
) -> Result<TrendReport> {
    check_scalings(scalings)?;
    with_unit_fallback(options, |unit| {
        let mut prepared = Prepared::new();
        add_regressions(&mut prepared, table, link, Family::Binomial, scalings, unit, options, false)?;
        max_test(Procedure::Tukey, prepared, options)
    })
}

/// Maximum over link functions and dose metameters jointly.
pub fn double_max_test(
    table: &DoseResponseTable,
    links: &[Link],
    scalings: &[Scaling],
    options: &TestOptions,
) -> Result<TrendReport> {
    check_scalings(scalings)?;
    if links.is_empty() {
        return Err(Error::Argument("at least one link is required".into()));
    }
    with_unit_fallback(options, |unit| {
        let mut prepared = Prepared::new();
        for &link in links {
            add_regressions(&mut prepared, table, link, Family::Binomial, scalings, unit, options, true)?;
        }
        if prepared.parts.is_empty() {
            return Err(Error::DegenerateComponent("every member model failed to converge".into()));
        }
        max_test(Procedure::DoubleMax, prepared, options)
    })
}

/// Runs at the table-row level unless a unit is forced. A perfect fit has no
/// residual at that level, so the test is then repeated on individual outcomes.
fn with_unit_fallback(
    options: &TestOptions,
    run: impl Fn(InfluenceUnit) -> Result<TrendReport>,
) -> Result<TrendReport> {
    if let Some(unit) = options.influence_unit {
        return run(unit);
    }
    match run(InfluenceUnit::TableRow) {
        Err(Error::DegenerateComponent(labels)) => {
            let mut report = run(InfluenceUnit::Subject)?;
            report
                .warnings
                .push(format!("table-row influence vanishes for {labels}; stacked on individual outcomes instead"));
            Ok(report)
        }
        other => other,
    }
}

/// Regression slopes under each metameter plus Williams contrasts on the
/// cell-means model, in one max-test.
pub fn joint_regression_williams_test(
    table: &DoseResponseTable,
    link: Link,
    scalings: &[Scaling],
    options: &TestOptions,
) -> Result<TrendReport> {
    check_scalings(scalings)?;
    // A saturated fit to one row per dose has identically zero row influence,
    // so such tables are stacked at the level of individual outcomes.
    let single_row_dose =
        table.distinct_doses().iter().any(|&d| table.rows().iter().filter(|r| r.dose == d).count() == 1);
    let unit = options.influence_unit.unwrap_or(if single_row_dose {
        InfluenceUnit::Subject
    } else {
        InfluenceUnit::TableRow
    });
    let mut prepared = Prepared::new();
    add_regressions(&mut prepared, table, link, Family::Binomial, scalings, unit, options, false)?;

    let amount = options.pseudo_counts.for_link(link).amount(table);
    let data = add_pseudo_counts(table, amount)?;
    let names: Vec<String> = table.distinct_doses().iter().map(|d| d.to_string()).collect();
    let contrasts = williams_contrasts_named(&table.group_sizes(), &names)?;
    let parts = contrast_components(&data, link, &contrasts, unit)?;
    for part in parts {
        prepared.meta.push(Meta {
            effect_size: link.effect_size(),
            metameter: "treat".into(),
            link,
            pseudo_count: amount,
            dispersion: 1.0,
            pearson: None,
        });
        prepared.parts.push(MarginalComponent { label: format!("Williams: {}", part.label), ..part });
    }
    max_test(Procedure::JointWilliams, prepared, options)
}

/// Tukey-type test on replicated proportions with quasi-binomial logit fits.
pub fn overdispersed_trend_test(
    table: &DoseResponseTable,
    scalings: &[Scaling],
    options: &TestOptions,
) -> Result<TrendReport> {
    check_scalings(scalings)?;
    let groups = table.distinct_doses().len();
    if table.len() <= groups {
        return Err(Error::DegreesOfFreedom { rows: table.len(), params: groups });
    }
    let unit = options.influence_unit.unwrap_or(InfluenceUnit::TableRow);
    let mut prepared = Prepared::new();
    add_regressions(&mut prepared, table, Link::Logit, Family::QuasiBinomial, scalings, unit, options, false)?;
    for meta in &prepared.meta {
        if meta.dispersion < 1.0 {
            prepared.warnings.push(format!(
                "underdispersion in {}: Pearson dispersion {:.4} < 1",
                component_label(meta.link, &meta.metameter),
                meta.dispersion
            ));
        }
    }
    max_test(Procedure::Overdispersed, prepared, options)
}

fn max_test(procedure: Procedure, prepared: Prepared, options: &TestOptions) -> Result<TrendReport> {
    check_level(options.level)?;
    let Prepared { parts, meta, mut warnings } = prepared;
    let labels: Vec<String> = parts.iter().map(|p| p.label.clone()).collect();
    let joint = stack_models(parts, options.std_error_source)?;
    warnings.extend(joint.warnings.iter().cloned());

    let integrator = MvnIntegrator::new(&joint.correlation, options.mvn)?;
    warnings.extend(integrator.warnings.iter().cloned());
    let m = joint.len();
    let alternative = options.alternative;

    let mut mvn_error: f64 = 0.0;
    let mut adjusted = Vec::with_capacity(m);
    let mut cache: Vec<(f64, MvnEstimate)> = Vec::new();
    for c in &joint.components {
        let raw = alternative.raw_p(c.statistic);
        let (bound, tail) = match alternative {
            Alternative::Greater => (c.statistic, Tail::UpperMax),
            Alternative::Less => (c.statistic, Tail::LowerMin),
            Alternative::TwoSided => (c.statistic.abs(), Tail::TwoSidedMaxAbs),
        };
        // Statistics tied up to rounding share one integral.
        let est = match cache.iter().find(|(b, _)| (b - bound).abs() <= 1e-10 * bound.abs().max(1.0)) {
            Some((_, est)) => est.clone(),
            None => {
                let est = integrator.probability(bound, tail)?;
                cache.push((bound, est.clone()));
                est
            }
        };
        mvn_error = mvn_error.max(est.error);
        // The max-test p lies between the raw and the Bonferroni p.
        let p = (1.0 - est.probability).clamp(raw, (m as f64 * raw).min(1.0));
        adjusted.push((raw, p));
    }

    let quantile = match alternative {
        Alternative::TwoSided => integrator.quantile(options.level, Tail::TwoSidedMaxAbs)?,
        _ => integrator.quantile(options.level, Tail::UpperMax)?,
    };
    mvn_error = mvn_error.max(quantile.error);
    let crit = quantile.value;

    let components: Vec<ComponentResult> = joint
        .components
        .iter()
        .zip(&adjusted)
        .map(|(c, &(raw_p, adjusted_p))| {
            let meta = &meta[labels.iter().position(|l| *l == c.label).expect("component label")];
            let half = crit * c.std_error;
            let (lower, upper) = match alternative {
                Alternative::Greater => (Some(c.estimate - half), None),
                Alternative::Less => (None, Some(c.estimate + half)),
                Alternative::TwoSided => (Some(c.estimate - half), Some(c.estimate + half)),
            };
            let effect = meta.effect_size;
            ComponentResult {
                label: c.label.clone(),
                effect_size: effect,
                metameter: meta.metameter.clone(),
                link: meta.link,
                estimate: c.estimate,
                estimate_effect: effect.transform(c.estimate),
                std_error: c.std_error,
                model_std_error: c.model_std_error,
                sandwich_std_error: c.sandwich_std_error,
                statistic: c.statistic,
                raw_p,
                adjusted_p,
                lower,
                upper,
                lower_effect: lower.map(|v| effect.transform(v)),
                upper_effect: upper.map(|v| effect.transform(v)),
                pseudo_count: meta.pseudo_count,
                dispersion: meta.dispersion,
                pearson_dispersion: meta.pearson,
            }
        })
        .collect();

    let min_p = components.iter().map(|c| c.adjusted_p).fold(f64::INFINITY, f64::min);
    let is_tied = |p: f64| p <= min_p * (1.0 + TIE_TOLERANCE) + 1e-300;
    let best_index = components.iter().position(|c| is_tied(c.adjusted_p)).expect("non-empty");
    let tied_best = components.iter().filter(|c| is_tied(c.adjusted_p)).map(|c| c.label.clone()).collect();

    let correlation = (0..m).map(|i| (0..m).map(|j| joint.correlation[(i, j)]).collect()).collect();
    Ok(TrendReport {
        procedure,
        best: components[best_index].label.clone(),
        best_index,
        tied_best,
        components,
        alternative,
        level: options.level,
        seed: options.mvn.seed,
        n: joint.n_rows,
        m,
        critical_value: crit,
        mvn_error,
        influence_unit: joint.unit,
        std_error_source: joint.std_error_source,
        correlation,
        warnings,
    })
}
