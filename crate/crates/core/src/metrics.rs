//! Helpers over metric series: final values, primary-metric lookup and
//! dataset names.
//!
//! Metric names follow the file contract `<metric>` or `<dataset>__<metric>`.

use std::collections::{BTreeMap, BTreeSet};

use crate::tree::Metrics;

pub const DATASET_SEPARATOR: &str = "__";

/// Splits `dataset__metric` into its parts; plain names have no dataset.
pub fn split_name(name: &str) -> (Option<&str>, &str) {
    match name.rsplit_once(DATASET_SEPARATOR) {
        Some((dataset, metric)) if !dataset.is_empty() => (Some(dataset), metric),
        _ => (None, name),
    }
}

/// Last finite value of a series.
pub fn final_value(series: &[f64]) -> Option<f64> {
    series.iter().rev().copied().find(|v| v.is_finite())
}

pub fn final_values(metrics: &Metrics) -> BTreeMap<String, f64> {
    metrics
        .iter()
        .filter_map(|(k, v)| final_value(v).map(|f| (k.clone(), f)))
        .collect()
}

/// Series whose metric part equals `metric`, across datasets.
pub fn series_for<'a>(metrics: &'a Metrics, metric: &'a str) -> impl Iterator<Item = &'a Vec<f64>> + 'a {
    metrics
        .iter()
        .filter(move |(k, _)| split_name(k).1 == metric)
        .map(|(_, v)| v)
}

/// Mean of the final values of every series carrying `metric`.
pub fn primary_metric_value(metrics: &Metrics, metric: &str) -> Option<f64> {
    let finals: Vec<f64> = series_for(metrics, metric).filter_map(|s| final_value(s)).collect();
    if finals.is_empty() {
        None
    } else {
        Some(finals.iter().sum::<f64>() / finals.len() as f64)
    }
}

/// Element-wise mean across datasets of every series carrying `metric`,
/// truncated to the shortest series.
pub fn mean_curve(metrics: &Metrics, metric: &str) -> Vec<f64> {
    let series: Vec<&Vec<f64>> = series_for(metrics, metric).collect();
    let Some(len) = series.iter().map(|s| s.len()).min() else {
        return Vec::new();
    };
    (0..len)
        .map(|i| series.iter().map(|s| s[i]).sum::<f64>() / series.len() as f64)
        .collect()
}

/// Datasets with at least one finite series.
pub fn datasets(metrics: &Metrics) -> BTreeSet<String> {
    metrics
        .iter()
        .filter(|(_, v)| final_value(v).is_some())
        .filter_map(|(k, _)| split_name(k).0.map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(pairs: &[(&str, &[f64])]) -> Metrics {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn names_split_on_last_separator() {
        assert_eq!(split_name("a__val_loss"), (Some("a"), "val_loss"));
        assert_eq!(split_name("val_loss"), (None, "val_loss"));
        assert_eq!(split_name("__x"), (None, "__x"));
    }

    #[test]
    fn primary_metric_averages_datasets() {
        let metrics = m(&[
            ("a__val_accuracy", &[0.1, 0.6]),
            ("b__val_accuracy", &[0.2, 0.8]),
            ("a__val_loss", &[1.0, 0.5]),
        ]);
        assert!((primary_metric_value(&metrics, "val_accuracy").unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(primary_metric_value(&metrics, "nope"), None);
        assert_eq!(mean_curve(&metrics, "val_accuracy").len(), 2);
        assert_eq!(datasets(&metrics).len(), 2);
    }

    #[test]
    fn final_value_skips_nan() {
        assert_eq!(final_value(&[1.0, f64::NAN]), Some(1.0));
        assert_eq!(final_value(&[]), None);
    }
}
