//! Selective prediction: risk-coverage curves and their area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image's confidence and risk (`1 - per-image metric`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub confidence: f64,
    pub risk: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<bool>,
}

impl ScoreRecord {
    pub fn new(image_id: impl Into<String>, confidence: f64, risk: f64) -> Self {
        Self {
            image_id: image_id.into(),
            confidence,
            risk,
            ood: None,
        }
    }
}

fn ranked(records: &[ScoreRecord]) -> Result<Vec<&ScoreRecord>> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(r) = records
        .iter()
        .find(|r| !r.confidence.is_finite() || !r.risk.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "non-finite score for image {:?}",
            r.image_id
        )));
    }
    let mut order: Vec<&ScoreRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    Ok(order)
}

/// `(coverage, selective risk)` for k = 1..n, most confident images first.
pub fn risk_coverage_curve(records: &[ScoreRecord]) -> Result<Vec<(f64, f64)>> {
    let order = ranked(records)?;
    let n = order.len() as f64;
    let mut cum = 0.0;
    Ok(order
        .iter()
        .enumerate()
        .map(|(i, r)| {
            cum += r.risk;
            let k = (i + 1) as f64;
            (k / n, cum / k)
        })
        .collect())
}

/// Mean selective risk over all n coverage levels; lower is better.
pub fn aurc(records: &[ScoreRecord]) -> Result<f64> {
    let curve = risk_coverage_curve(records)?;
    Ok(curve.iter().map(|(_, r)| r).sum::<f64>() / curve.len() as f64)
}
