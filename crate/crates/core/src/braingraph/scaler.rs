//! Per-metric min-max scaling fitted on training subjects.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::graph_view_values;
use super::table::{CorticalTable, Hemisphere};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureScaler {
    ranges: BTreeMap<String, MetricRange>,
}

impl FeatureScaler {
    pub fn from_ranges(ranges: impl IntoIterator<Item = (String, MetricRange)>) -> Result<Self> {
        let ranges: BTreeMap<_, _> = ranges.into_iter().collect();
        for (name, r) in &ranges {
            if !r.min.is_finite() || !r.max.is_finite() || r.max <= r.min {
                return Err(Error::DegenerateMetric(name.clone()));
            }
        }
        Ok(FeatureScaler { ranges })
    }

    pub fn range(&self, metric: &str) -> Result<MetricRange> {
        self.ranges
            .get(metric)
            .copied()
            .ok_or_else(|| Error::ScalerMissingMetric(metric.to_string()))
    }

    pub fn metrics(&self) -> impl Iterator<Item = &str> {
        self.ranges.keys().map(String::as_str)
    }

    /// `(x - min) / (max - min)`, clipped to `[0, 1]`.
    pub fn transform(&self, metric: &str, x: f64) -> Result<f64> {
        let r = self.range(metric)?;
        Ok(((x - r.min) / (r.max - r.min)).clamp(0.0, 1.0))
    }

    pub fn transform_all(&self, metric: &str, xs: &[f64]) -> Result<Vec<f64>> {
        let r = self.range(metric)?;
        Ok(xs
            .iter()
            .map(|x| ((x - r.min) / (r.max - r.min)).clamp(0.0, 1.0))
            .collect())
    }

    /// Maps a scaled value back to raw units; inputs are clipped to `[0, 1]`
    /// first so the result stays within the fitted range.
    pub fn inverse(&self, metric: &str, y: f64) -> Result<f64> {
        let r = self.range(metric)?;
        Ok(r.min + y.clamp(0.0, 1.0) * (r.max - r.min))
    }

    pub fn inverse_all(&self, metric: &str, ys: &[f64]) -> Result<Vec<f64>> {
        ys.iter().map(|&y| self.inverse(metric, y)).collect()
    }
}

/// Fits min/max of each metric over the given subjects of one hemisphere.
pub fn fit_scaler(
    table: &CorticalTable,
    hemisphere: Hemisphere,
    subjects: &[String],
    metrics: &[&str],
) -> Result<FeatureScaler> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument(
            "scaler needs at least one training subject".into(),
        ));
    }
    let mut ranges = BTreeMap::new();
    for &metric in metrics {
        if !table.has_metric(metric) {
            return Err(Error::UnknownMetric(metric.to_string()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in subjects {
            let group = table.group(s, hemisphere)?;
            for v in graph_view_values(group, metric)? {
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        if hi.is_nan() || lo.is_nan() || hi <= lo {
            return Err(Error::DegenerateMetric(metric.to_string()));
        }
        ranges.insert(metric.to_string(), MetricRange { min: lo, max: hi });
    }
    Ok(FeatureScaler { ranges })
}
