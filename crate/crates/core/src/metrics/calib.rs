//! Argmax calibration error over pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::seg::PqImage;
use crate::model::{PanopticLabelMap, SemanticLabelMap, UncertaintyMap, VOID};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSample {
    pub confidence: f64,
    pub correct: bool,
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.total + x;
        if self.total.abs() >= x.abs() {
            self.carry += (self.total - t) + x;
        } else {
            self.carry += (x - t) + self.total;
        }
        self.total = t;
    }

    fn value(&self) -> f64 {
        self.total + self.carry
    }
}

/// Equal-width, right-closed bins on [0, 1]; confidence 0 falls in the first bin.
#[derive(Debug, Clone)]
pub struct EceAccumulator {
    counts: Vec<u64>,
    correct: Vec<u64>,
    confidence: Vec<Sum>,
}

impl EceAccumulator {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
        }
        Ok(Self {
            counts: vec![0; bins],
            correct: vec![0; bins],
            confidence: vec![Sum::default(); bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, confidence: f64) -> usize {
        let b = self.bins();
        ((confidence * b as f64).ceil() as usize).saturating_sub(1).min(b - 1)
    }

    pub fn push(&mut self, s: CalibSample) -> Result<()> {
        if !(s.confidence.is_finite() && (0.0..=1.0).contains(&s.confidence)) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} outside [0, 1]",
                s.confidence
            )));
        }
        let b = self.bin_of(s.confidence);
        self.counts[b] += 1;
        self.correct[b] += s.correct as u64;
        self.confidence[b].add(s.confidence);
        Ok(())
    }

    pub fn merge(&mut self, other: &EceAccumulator) -> Result<()> {
        if other.bins() != self.bins() {
            return Err(Error::ShapeMismatch(
                "ECE accumulators with different bin counts".into(),
            ));
        }
        for b in 0..self.bins() {
            self.counts[b] += other.counts[b];
            self.correct[b] += other.correct[b];
            self.confidence[b].add(other.confidence[b].total);
            self.confidence[b].add(other.confidence[b].carry);
        }
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `sum_b (n_b / N) |acc_b - conf_b|`.
    pub fn value(&self) -> Result<f64> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let mut ece = 0.0;
        for b in 0..self.bins() {
            let nb = self.counts[b];
            if nb == 0 {
                continue;
            }
            let acc = self.correct[b] as f64 / nb as f64;
            let conf = self.confidence[b].value() / nb as f64;
            ece += (nb as f64 / n as f64) * (acc - conf).abs();
        }
        Ok(ece)
    }
}

pub fn ece(samples: impl IntoIterator<Item = CalibSample>, bins: usize) -> Result<f64> {
    let mut acc = EceAccumulator::new(bins)?;
    for s in samples {
        acc.push(s)?;
    }
    acc.value()
}

/// One sample per labelled pixel: max-softmax confidence, correct when the predicted class matches.
pub fn calib_samples_semantic(
    pred: &SemanticLabelMap,
    max_softmax: &UncertaintyMap,
    gt: &SemanticLabelMap,
) -> Result<Vec<CalibSample>> {
    if pred.dims() != gt.dims() || max_softmax.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}, confidence {:?}, ground truth {:?}",
            pred.dims(),
            max_softmax.dims(),
            gt.dims()
        )));
    }
    Ok(gt
        .ids()
        .iter()
        .zip(pred.ids())
        .zip(max_softmax.values())
        .filter(|((&g, _), _)| g != VOID)
        .map(|((&g, &p), &c)| CalibSample {
            confidence: c.clamp(0.0, 1.0),
            correct: g == p,
        })
        .collect())
}

/// One sample per labelled pixel; correct when the predicted segment there is
/// PQ-matched to the ground-truth segment there.
pub fn calib_samples_panoptic(
    max_softmax: &UncertaintyMap,
    pred: &PanopticLabelMap,
    gt: &PanopticLabelMap,
    matching: &PqImage,
) -> Result<Vec<CalibSample>> {
    if pred.dims() != gt.dims() || max_softmax.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "confidence {:?}, prediction {:?}, ground truth {:?}",
            max_softmax.dims(),
            pred.dims(),
            gt.dims()
        )));
    }
    let matched: std::collections::HashMap<u32, u32> = matching.matches.iter().map(|m| (m.pred, m.gt)).collect();
    Ok(gt
        .ids()
        .iter()
        .zip(pred.ids())
        .zip(max_softmax.values())
        .filter(|((&g, _), _)| g != 0)
        .map(|((&g, &p), &c)| CalibSample {
            confidence: c.clamp(0.0, 1.0),
            correct: p != 0 && matched.get(&p) == Some(&g),
        })
        .collect())
}
