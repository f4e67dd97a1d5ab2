//! Williams-type multiple contrasts on a cell-means model.

use serde::{Deserialize, Serialize};

use crate::data::WeightedTable;
use crate::error::{Error, Result};
use crate::glm::{fit_glm, influence_matrix, Design, Family, InfluenceUnit, Link};
use crate::mmm::{MarginalComponent, Selector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub label: String,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastMatrix {
    pub rows: Vec<ContrastRow>,
}

impl ContrastMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Control versus size-weighted pools of the highest doses.
///
/// Row j compares group 1 with the top j groups; groups are labelled by
/// `group_names` (e.g. dose values), defaulting to 1..k.
pub fn williams_contrasts(group_sizes: &[u64]) -> Result<ContrastMatrix> {
    let names: Vec<String> = (1..=group_sizes.len()).map(|i| i.to_string()).collect();
    williams_contrasts_named(group_sizes, &names)
}

pub fn williams_contrasts_named(group_sizes: &[u64], group_names: &[String]) -> Result<ContrastMatrix> {
    let k = group_sizes.len();
    if k < 2 {
        return Err(Error::Argument(format!("Williams contrasts need at least 2 groups, got {k}")));
    }
    if group_names.len() != k {
        return Err(Error::Argument("one name per group required".into()));
    }
    if group_sizes.contains(&0) {
        return Err(Error::Argument("group sizes must be at least 1".into()));
    }
    let rows = (1..k)
        .map(|top| {
            let pooled = &group_sizes[k - top..];
            let total: u64 = pooled.iter().sum();
            let mut coefficients = vec![0.0; k];
            coefficients[0] = -1.0;
            for (offset, &n) in pooled.iter().enumerate() {
                coefficients[k - top + offset] = n as f64 / total as f64;
            }
            let label = format!("{} vs {}", group_names[0], group_names[k - top..].join("+"));
            ContrastRow { label, coefficients }
        })
        .collect();
    Ok(ContrastMatrix { rows })
}

/// Fits the cell-means model under `link` and turns each contrast row into a
/// stackable component: estimate cᵀμ̂ on the link scale, influence column Ψ̂c.
pub fn contrast_components(
    data: &WeightedTable,
    link: Link,
    contrasts: &ContrastMatrix,
    unit: InfluenceUnit,
) -> Result<Vec<MarginalComponent>> {
    let design = Design::cell_means(&data.doses());
    if let Some(row) = contrasts.rows.iter().find(|r| r.coefficients.len() != design.matrix.ncols()) {
        return Err(Error::Argument(format!(
            "contrast `{}` has {} coefficients for {} dose groups",
            row.label,
            row.coefficients.len(),
            design.matrix.ncols()
        )));
    }
    let fit = fit_glm(data, &design, link, Family::Binomial)?;
    let influence = influence_matrix(&fit, unit)?;
    contrasts
        .rows
        .iter()
        .map(|row| {
            MarginalComponent::from_fit(
                row.label.clone(),
                &fit,
                &influence,
                &Selector::Contrast(row.coefficients.clone()),
            )
        })
        .collect()
}
