//! Dose-response tables, dose metameters and pseudo-count corrections.
//!
//! A [`DoseResponseTable`] holds raw binomial counts, one row per dose group
//! (2-by-k layout) or per replicate unit. Model fitting works on a
//! [`WeightedTable`], which carries real-valued success and failure weights so
//! that pseudo-counts can be added without rounding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub dose: f64,
    pub events: u64,
    pub trials: u64,
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponseTable {
    rows: Vec<Observation>,
}

impl DoseResponseTable {
    /// Builds a validated table.
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if !row.dose.is_finite() || row.dose < 0.0 {
                return Err(Error::Validation(format!(
                    "row {}: dose must be finite and non-negative, got {}",
                    i + 1,
                    row.dose
                )));
            }
            if row.trials == 0 {
                return Err(Error::Validation(format!("row {}: trials must be at least 1", i + 1)));
            }
            if row.events > row.trials {
                return Err(Error::Validation(format!(
                    "row {}: events ({}) exceed trials ({})",
                    i + 1,
                    row.events,
                    row.trials
                )));
            }
        }
        let table = Self { rows };
        if table.distinct_doses().len() < 2 {
            return Err(Error::Validation("at least two distinct dose values are required".into()));
        }
        Ok(table)
    }

    /// Convenience constructor from parallel slices, one row per dose.
    pub fn from_counts(doses: &[f64], events: &[u64], trials: &[u64]) -> Result<Self> {
        if doses.len() != events.len() || doses.len() != trials.len() {
            return Err(Error::Argument("dose, event and trial vectors differ in length".into()));
        }
        let rows = doses
            .iter()
            .zip(events)
            .zip(trials)
            .map(|((&dose, &events), &trials)| Observation { dose, events, trials, unit: None })
            .collect();
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn doses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.dose).collect()
    }

    /// Sorted distinct dose values.
    pub fn distinct_doses(&self) -> Vec<f64> {
        distinct_sorted(&self.doses())
    }

    /// Total trials per distinct dose, in sorted dose order.
    pub fn group_sizes(&self) -> Vec<u64> {
        let levels = self.distinct_doses();
        let mut sizes = vec![0; levels.len()];
        for row in &self.rows {
            let g = level_index(&levels, row.dose);
            sizes[g] += row.trials;
        }
        sizes
    }

    /// True when every distinct dose occupies exactly one row.
    pub fn is_grouped(&self) -> bool {
        self.distinct_doses().len() == self.rows.len()
    }

    /// Sums replicate rows so that each dose occupies one row.
    pub fn collapse(&self) -> DoseResponseTable {
        let levels = self.distinct_doses();
        let mut rows: Vec<Observation> =
            levels.iter().map(|&dose| Observation { dose, events: 0, trials: 0, unit: None }).collect();
        for row in &self.rows {
            let g = level_index(&levels, row.dose);
            rows[g].events += row.events;
            rows[g].trials += row.trials;
        }
        DoseResponseTable { rows }
    }

    /// True if some dose group has no events or only events.
    pub fn has_boundary_group(&self) -> bool {
        self.collapse().rows.iter().any(|r| r.events == 0 || r.events == r.trials)
    }

    /// Counts as real-valued weights, without any correction.
    pub fn weighted(&self) -> WeightedTable {
        WeightedTable {
            rows: self
                .rows
                .iter()
                .map(|r| WeightedRow {
                    dose: r.dose,
                    successes: r.events as f64,
                    failures: (r.trials - r.events) as f64,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedRow {
    pub dose: f64,
    pub successes: f64,
    pub failures: f64,
}

impl WeightedRow {
    pub fn total(&self) -> f64 {
        self.successes + self.failures
    }

    pub fn proportion(&self) -> f64 {
        self.successes / self.total()
    }
}

/// Binomial data with real-valued success and failure weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTable {
    pub rows: Vec<WeightedRow>,
}

impl WeightedTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn doses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.dose).collect()
    }

    pub fn pooled_proportion(&self) -> f64 {
        let s: f64 = self.rows.iter().map(|r| r.successes).sum();
        let n: f64 = self.rows.iter().map(|r| r.total()).sum();
        s / n
    }
}

/// Adds `amount` pseudo-successes and `amount` pseudo-failures to every row.
pub fn add_pseudo_counts(table: &DoseResponseTable, amount: f64) -> Result<WeightedTable> {
    if !amount.is_finite() || amount < 0.0 {
        return Err(Error::Argument(format!("pseudo-count must be finite and >= 0, got {amount}")));
    }
    let mut weighted = table.weighted();
    for row in &mut weighted.rows {
        row.successes += amount;
        row.failures += amount;
    }
    Ok(weighted)
}

/// Parses `dose,events,trials[,unit]` CSV text into a validated table.
pub fn parse_table(csv_text: &str) -> Result<DoseResponseTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(csv_text.as_bytes());

    let headers = reader.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_unit = match names.as_slice() {
        ["dose", "events", "trials"] => false,
        ["dose", "events", "trials", "unit"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `dose,events,trials[,unit]`, found `{}`", names.join(",")),
            })
        }
    };
    let width = names.len();

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::Parse { line, message: format!("expected {width} fields, found {}", record.len()) });
        }
        let dose: f64 = parse_field(&record[0], "dose", line)?;
        if !dose.is_finite() {
            return Err(Error::Parse { line, message: format!("dose `{}` is not finite", &record[0]) });
        }
        let events: u64 = parse_field(&record[1], "events", line)?;
        let trials: u64 = parse_field(&record[2], "trials", line)?;
        let unit = if has_unit && !record[3].is_empty() { Some(record[3].to_string()) } else { None };
        rows.push(Observation { dose, events, trials, unit });
    }
    DoseResponseTable::new(rows)
}

fn parse_field<T: FromStr>(field: &str, name: &str, line: u64) -> Result<T> {
    field.parse().map_err(|_| Error::Parse { line, message: format!("cannot parse {name} `{field}`") })
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    Error::Parse { line, message: err.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    #[serde(rename = "ari")]
    Arithmetic,
    #[serde(rename = "ord")]
    Ordinal,
    #[serde(rename = "log")]
    Logarithmic,
}

impl Scaling {
    pub const ALL: [Scaling; 3] = [Scaling::Arithmetic, Scaling::Ordinal, Scaling::Logarithmic];

    pub fn short_name(self) -> &'static str {
        match self {
            Scaling::Arithmetic => "ari",
            Scaling::Ordinal => "ord",
            Scaling::Logarithmic => "log",
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ari" | "arithmetic" => Ok(Scaling::Arithmetic),
            "ord" | "ordinal" => Ok(Scaling::Ordinal),
            "log" | "arilog" | "logarithmic" => Ok(Scaling::Logarithmic),
            other => Err(Error::Argument(format!("unknown scaling `{other}`"))),
        }
    }
}

/// What replaces a zero dose before taking logarithms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy", content = "value")]
pub enum ZeroDosePolicy {
    /// One log-step below the smallest positive dose: d₁²/d₂.
    #[default]
    Extrapolate,
    /// A fixed positive stand-in value.
    Fixed(f64),
}

impl FromStr for ZeroDosePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("extrapolate") {
            return Ok(ZeroDosePolicy::Extrapolate);
        }
        let value = s
            .strip_prefix("fixed:")
            .or_else(|| s.strip_prefix("fixed="))
            .ok_or_else(|| Error::Argument(format!("unknown zero-dose policy `{s}`")))?;
        let value: f64 =
            value.trim().parse().map_err(|_| Error::Argument(format!("zero-dose value `{value}` is not a number")))?;
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Argument("zero-dose stand-in must be positive and finite".into()));
        }
        Ok(ZeroDosePolicy::Fixed(value))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledDoses {
    pub kind: Scaling,
    pub values: Vec<f64>,
    pub zero_replacement: Option<f64>,
}

/// Applies a dose metameter to each dose, keeping row order.
pub fn scale_doses(doses: &[f64], kind: Scaling, zero_policy: ZeroDosePolicy) -> Result<ScaledDoses> {
    match kind {
        Scaling::Arithmetic => Ok(ScaledDoses { kind, values: doses.to_vec(), zero_replacement: None }),
        Scaling::Ordinal => {
            let levels = distinct_sorted(doses);
            let values = doses.iter().map(|&d| level_index(&levels, d) as f64).collect();
            Ok(ScaledDoses { kind, values, zero_replacement: None })
        }
        Scaling::Logarithmic => {
            let has_zero = doses.contains(&0.0);
            let zero_replacement = if has_zero {
                Some(match zero_policy {
                    ZeroDosePolicy::Fixed(v) => {
                        let smallest = distinct_sorted(doses).into_iter().find(|&d| d > 0.0);
                        if smallest.is_some_and(|d| v >= d) {
                            return Err(Error::UnsupportedScaling(format!(
                                "zero-dose stand-in {v} is not below the smallest positive dose"
                            )));
                        }
                        v
                    }
                    ZeroDosePolicy::Extrapolate => {
                        let positive: Vec<f64> = distinct_sorted(doses).into_iter().filter(|&d| d > 0.0).collect();
                        if positive.len() < 2 {
                            return Err(Error::UnsupportedScaling(
                                "log scaling of a zero dose needs two distinct positive doses".into(),
                            ));
                        }
                        positive[0] * positive[0] / positive[1]
                    }
                })
            } else {
                None
            };
            let values =
                doses.iter().map(|&d| if d == 0.0 { zero_replacement.unwrap_or(d).ln() } else { d.ln() }).collect();
            Ok(ScaledDoses { kind, values, zero_replacement })
        }
    }
}

pub(crate) fn distinct_sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub(crate) fn level_index(levels: &[f64], value: f64) -> usize {
    levels.binary_search_by(|probe| probe.total_cmp(&value)).expect("value drawn from the same dose vector")
}
