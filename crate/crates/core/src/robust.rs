//! Byzantine-robust replacements for FedAvg: coordinate-wise median, trimmed
//! mean, multi-Krum and K-norm. All of them ignore sample counts.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::client::ClientReport;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::protocol::{aggregate_fedavg, canonical};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorChoice {
    #[default]
    Fedavg,
    Median,
    TrimmedMean {
        trim_k: usize,
    },
    /// Krum scores with `f` presumed faulty reports; averages the `m` best
    /// (default `n - f`).
    MultiKrum {
        f: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m: Option<usize>,
    },
    /// Drops the `k` updates with the largest norm.
    KNorm {
        k: usize,
    },
}

impl AggregatorChoice {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorChoice::Fedavg => "fedavg",
            AggregatorChoice::Median => "median",
            AggregatorChoice::TrimmedMean { .. } => "trimmed_mean",
            AggregatorChoice::MultiKrum { .. } => "multi_krum",
            AggregatorChoice::KNorm { .. } => "k_norm",
        }
    }

    /// Checks the parameters against the number of reports per round.
    pub fn validate(&self, reports: usize) -> Result<()> {
        let key = "aggregator";
        match *self {
            AggregatorChoice::Fedavg | AggregatorChoice::Median => Ok(()),
            AggregatorChoice::TrimmedMean { trim_k } if reports > 2 * trim_k => Ok(()),
            AggregatorChoice::TrimmedMean { trim_k } => Err(Error::config(
                key,
                format!("trim_k = {trim_k} needs more than {} reports, got {reports}", 2 * trim_k),
            )),
            AggregatorChoice::MultiKrum { f, m } => {
                if reports < 2 * f + 3 {
                    return Err(Error::config(
                        key,
                        format!("multi-Krum with f = {f} needs at least {} reports, got {reports}", 2 * f + 3),
                    ));
                }
                let m = m.unwrap_or(reports - f);
                if m == 0 || m > reports - f {
                    return Err(Error::config(key, format!("m = {m} must lie in [1, n - f = {}]", reports - f)));
                }
                Ok(())
            }
            AggregatorChoice::KNorm { k } if k < reports => Ok(()),
            AggregatorChoice::KNorm { k } => Err(Error::config(
                key,
                format!("k = {k} must be smaller than the report count {reports}"),
            )),
        }
    }
}

/// Unweighted mean, accumulated as offsets from the first vector.
pub fn mean_of(params: &[&ParamVector]) -> ParamVector {
    let base = params[0];
    let k = params.len() as f64;
    let mut offsets = vec![0.0; base.len()];
    for p in &params[1..] {
        for ((o, x), b) in offsets.iter_mut().zip(p.as_slice()).zip(base.as_slice()) {
            *o += x - b;
        }
    }
    ParamVector::new(
        base.as_slice()
            .iter()
            .zip(&offsets)
            .map(|(b, o)| b + o / k)
            .collect(),
    )
}

fn sorted_column(reports: &[&ClientReport], coord: usize) -> Vec<f64> {
    let mut column: Vec<f64> = reports.iter().map(|r| r.updated_params.as_slice()[coord]).collect();
    column.sort_by(f64::total_cmp);
    column
}

fn mean_slice(values: &[f64]) -> f64 {
    let base = values[0];
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

/// Coordinate-wise median; an even count averages the middle pair.
pub fn agg_median(reports: &[ClientReport]) -> Result<ParamVector> {
    let sorted = canonical(reports)?;
    let dim = sorted[0].updated_params.len();
    let n = sorted.len();
    Ok(ParamVector::new(
        (0..dim)
            .map(|j| {
                let col = sorted_column(&sorted, j);
                if n % 2 == 1 {
                    col[n / 2]
                } else {
                    (col[n / 2 - 1] + col[n / 2]) / 2.0
                }
            })
            .collect(),
    ))
}

/// Coordinate-wise mean after dropping the `trim_k` largest and smallest values.
pub fn agg_trimmed_mean(reports: &[ClientReport], trim_k: usize) -> Result<ParamVector> {
    let sorted = canonical(reports)?;
    AggregatorChoice::TrimmedMean { trim_k }.validate(sorted.len())?;
    let dim = sorted[0].updated_params.len();
    let n = sorted.len();
    Ok(ParamVector::new(
        (0..dim)
            .map(|j| mean_slice(&sorted_column(&sorted, j)[trim_k..n - trim_k]))
            .collect(),
    ))
}

/// Krum score per report: summed squared distance to its `n - f - 2` nearest
/// other reports. Scores follow ascending client-id order.
pub fn krum_scores(reports: &[ClientReport], f: usize) -> Result<Vec<f64>> {
    let sorted = canonical(reports)?;
    let n = sorted.len();
    if n < 2 * f + 3 {
        return Err(Error::config("aggregator", format!("multi-Krum needs n >= 2f + 3, got n = {n}, f = {f}")));
    }
    let neighbours = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sorted[i].updated_params.distance_sq(&sorted[j].updated_params))
                .collect();
            d.sort_by(f64::total_cmp);
            d[..neighbours].iter().sum()
        })
        .collect())
}

/// Averages the `m` reports with the lowest Krum scores (ties to lower id).
pub fn agg_multi_krum(reports: &[ClientReport], f: usize, m: usize) -> Result<ParamVector> {
    AggregatorChoice::MultiKrum { f, m: Some(m) }.validate(reports.len())?;
    let sorted = canonical(reports)?;
    let scores = krum_scores(reports, f)?;
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(sorted[a].client_id.cmp(&sorted[b].client_id)));
    let mut chosen: Vec<usize> = order[..m].to_vec();
    chosen.sort_unstable();
    let params: Vec<&ParamVector> = chosen.iter().map(|&i| &sorted[i].updated_params).collect();
    Ok(mean_of(&params))
}

/// Drops the `k` reports whose update `w_i - w_prev` has the largest norm
/// (ties drop the higher id first) and averages the rest.
pub fn agg_k_norm(reports: &[ClientReport], w_prev: &ParamVector, k: usize) -> Result<ParamVector> {
    let sorted = canonical(reports)?;
    AggregatorChoice::KNorm { k }.validate(sorted.len())?;
    w_prev
        .ensure_same_layout(&sorted[0].updated_params, "k_norm")
        .map_err(|e| Error::Protocol(e.to_string()))?;
    let norms: Vec<f64> = sorted.iter().map(|r| r.updated_params.sub(w_prev).norm()).collect();
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    order.sort_by(|&a, &b| match norms[b].total_cmp(&norms[a]) {
        Ordering::Equal => sorted[b].client_id.cmp(&sorted[a].client_id),
        other => other,
    });
    let mut kept: Vec<usize> = order[k..].to_vec();
    kept.sort_unstable();
    let params: Vec<&ParamVector> = kept.iter().map(|&i| &sorted[i].updated_params).collect();
    Ok(mean_of(&params))
}

pub fn aggregate(choice: &AggregatorChoice, w_prev: &ParamVector, reports: &[ClientReport]) -> Result<ParamVector> {
    match *choice {
        AggregatorChoice::Fedavg => aggregate_fedavg(reports),
        AggregatorChoice::Median => agg_median(reports),
        AggregatorChoice::TrimmedMean { trim_k } => agg_trimmed_mean(reports, trim_k),
        AggregatorChoice::MultiKrum { f, m } => agg_multi_krum(reports, f, m.unwrap_or(reports.len().saturating_sub(f))),
        AggregatorChoice::KNorm { k } => agg_k_norm(reports, w_prev, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reports(rows: &[&[f64]]) -> Vec<ClientReport> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| ClientReport {
                client_id: i,
                updated_params: ParamVector::new(r.to_vec()),
                beta_hat: 0.0,
                n_i: 1 + i,
            })
            .collect()
    }

    #[test]
    fn median_example() {
        let r = reports(&[&[0.0, 0.0], &[1.0, 10.0], &[2.0, -10.0]]);
        assert_eq!(agg_median(&r).unwrap().as_slice(), &[1.0, 0.0]);
        let single = reports(&[&[3.5, -1.0]]);
        assert_eq!(agg_median(&single).unwrap().as_slice(), &[3.5, -1.0]);
    }

    #[test]
    fn trimmed_mean_examples() {
        let r = reports(&[&[-100.0], &[1.0], &[2.0], &[3.0], &[100.0]]);
        assert_eq!(agg_trimmed_mean(&r, 1).unwrap().as_slice(), &[2.0]);
        let mean = agg_trimmed_mean(&r, 0).unwrap();
        assert!((mean.as_slice()[0] - 1.2).abs() < 1e-12);
        assert!(agg_trimmed_mean(&r, 3).is_err());
    }

    #[test]
    fn krum_excludes_far_outlier() {
        let r = reports(&[&[0.0, 0.0], &[0.1, 0.0], &[0.0, 0.1], &[0.1, 0.1], &[50.0, -50.0]]);
        // f = 1: neighbours = 2. The outlier's score is orders of magnitude above the rest.
        let scores = krum_scores(&r, 1).unwrap();
        assert!(scores[4] > 1000.0 * scores[0]);
        let out = agg_multi_krum(&r, 1, 4).unwrap();
        assert!((out.as_slice()[0] - 0.05).abs() < 1e-12);
        assert!((out.as_slice()[1] - 0.05).abs() < 1e-12);
        assert!(agg_multi_krum(&r[..4], 1, 1).is_err());
    }

    #[test]
    fn k_norm_drops_scaled_report() {
        let w_prev = ParamVector::new(vec![0.0, 0.0]);
        let r = reports(&[&[1.0, 0.0], &[0.0, 1.0], &[100.0, 100.0]]);
        let out = agg_k_norm(&r, &w_prev, 1).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
        let all = agg_k_norm(&r, &w_prev, 0).unwrap();
        assert!((all.as_slice()[0] - 101.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_reports_come_back_exactly() {
        let v = [0.1, -0.7, 1.0 / 3.0];
        let r = reports(&[&v, &v, &v, &v, &v, &v, &v]);
        let w_prev = ParamVector::new(vec![0.0; 3]);
        for choice in [
            AggregatorChoice::Fedavg,
            AggregatorChoice::Median,
            AggregatorChoice::TrimmedMean { trim_k: 2 },
            AggregatorChoice::MultiKrum { f: 2, m: None },
            AggregatorChoice::KNorm { k: 3 },
        ] {
            assert_eq!(aggregate(&choice, &w_prev, &r).unwrap().as_slice(), &v, "{}", choice.name());
        }
    }
}
