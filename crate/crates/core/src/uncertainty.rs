//! Pixel-level uncertainty measures.
//!
//! Sample-spread measures (entropies, mutual information, expected mask
//! variance) are accumulated while the ensemble is folded, so their state is
//! per-pixel and independent of the number of samples. The remaining measures
//! are read off the fused prediction.

use std::collections::BTreeSet;

use crate::aggregate::SampleAccumulator;
use crate::error::{Error, Result};
use crate::fuse::{class_distribution_of, mask_assignment_of, QueryAssignment};
use crate::model::{
    sigmoid, LogitView, Measure, PanopticLabelMap, PixelClassDistribution, SampleTensor, UncertaintyMap,
};

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> f64 {
    let h: f64 = dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// Running mean of per-sample distributions and of their entropies.
#[derive(Debug, Clone)]
struct EntropyState {
    width: usize,
    mean_dist: Vec<f64>,
    mean_entropy: Vec<f64>,
}

impl EntropyState {
    fn new(pixels: usize, width: usize) -> Self {
        Self {
            width,
            mean_dist: vec![0.0; pixels * width],
            mean_entropy: vec![0.0; pixels],
        }
    }

    fn observe<'a>(&mut self, n: f64, pixels: impl Iterator<Item = &'a [f64]>) {
        for ((px, mean), ent) in pixels
            .zip(self.mean_dist.chunks_exact_mut(self.width))
            .zip(self.mean_entropy.iter_mut())
        {
            for (m, &p) in mean.iter_mut().zip(px) {
                *m += (p - *m) / n;
            }
            *ent += (entropy(px) - *ent) / n;
        }
    }

    fn predictive(&self) -> Vec<f64> {
        self.mean_dist.chunks_exact(self.width).map(entropy).collect()
    }

    fn expected(&self) -> Vec<f64> {
        self.mean_entropy.clone()
    }

    fn mutual_information(&self) -> Vec<f64> {
        self.predictive()
            .into_iter()
            .zip(&self.mean_entropy)
            .map(|(pe, &ee)| {
                let mi = pe - ee;
                debug_assert!(mi >= -1e-9, "mutual information {mi} below tolerance");
                mi.max(0.0)
            })
            .collect()
    }
}

/// Welford mean / sum of squared deviations of sigmoid masks, per query and pixel.
#[derive(Debug, Clone)]
struct MaskVarianceState {
    queries: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MaskVarianceState {
    fn observe(&mut self, n: f64, s: &SampleTensor) {
        for ((m, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(s.mask_logits()) {
            let x = sigmoid(x as f64);
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
    }

    /// Mean over queries of the population variance across samples.
    fn expected_variance(&self, n: f64, pixels: usize) -> Vec<f64> {
        let mut out = vec![0.0; pixels];
        for q in 0..self.queries {
            for (o, &m2) in out.iter_mut().zip(&self.m2[q * pixels..(q + 1) * pixels]) {
                *o += (m2 / n).max(0.0);
            }
        }
        out.iter_mut().for_each(|v| *v /= self.queries as f64);
        out
    }
}

/// Streaming state for a chosen set of measures.
#[derive(Debug, Clone)]
pub struct MeasureAccumulator {
    measures: BTreeSet<Measure>,
    dims: (usize, usize),
    queries: usize,
    classes: usize,
    seen: usize,
    class_mask: Option<EntropyState>,
    mask_only: Option<EntropyState>,
    mask_variance: Option<MaskVarianceState>,
}

impl MeasureAccumulator {
    pub fn new(
        measures: impl IntoIterator<Item = Measure>,
        dims: (usize, usize),
        queries: usize,
        classes: usize,
    ) -> Self {
        let measures: BTreeSet<Measure> = measures.into_iter().collect();
        let pixels = dims.0 * dims.1;
        let wants = |set: &[Measure]| set.iter().any(|m| measures.contains(m));
        let class_mask = wants(&[
            Measure::PredictiveEntropyCm,
            Measure::ExpectedEntropyCm,
            Measure::MutualInformationCm,
        ])
        .then(|| EntropyState::new(pixels, classes));
        let mask_only = wants(&[
            Measure::PredictiveEntropyM,
            Measure::ExpectedEntropyM,
            Measure::MutualInformationM,
        ])
        .then(|| EntropyState::new(pixels, queries));
        let mask_variance = measures
            .contains(&Measure::ExpectedMaskVariance)
            .then(|| MaskVarianceState {
                queries,
                mean: vec![0.0; queries * pixels],
                m2: vec![0.0; queries * pixels],
            });
        Self {
            measures,
            dims,
            queries,
            classes,
            seen: 0,
            class_mask,
            mask_only,
            mask_variance,
        }
    }

    pub fn measures(&self) -> impl Iterator<Item = Measure> + '_ {
        self.measures.iter().copied()
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }

    /// Maps for every configured measure, in [`Measure`] order.
    ///
    /// `fused` is the aggregated prediction; `panoptic` and `things` are only
    /// needed for the combined softmax/sigmoid score.
    pub fn finalize<T: Copy + Into<f64>>(
        &self,
        fused: &LogitView<'_, T>,
        panoptic: Option<&PanopticLabelMap>,
        things: &BTreeSet<u16>,
    ) -> Result<Vec<UncertaintyMap>> {
        if self.seen == 0 {
            return Err(Error::NoSamples);
        }
        if fused.dims != self.dims || fused.queries != self.queries || fused.classes() != self.classes {
            return Err(Error::ShapeMismatch(
                "fused prediction does not match the accumulated samples".into(),
            ));
        }
        let n = self.seen as f64;
        let (h, w) = self.dims;
        let pixels = h * w;
        let wants_cm = self
            .measures
            .iter()
            .any(|m| matches!(m, Measure::MaxSoftmaxCm | Measure::CombinedSoftmaxSigmoid));
        let wants_assign = self
            .measures
            .iter()
            .any(|m| matches!(m, Measure::MaxNormSigmoidMask | Measure::CombinedSoftmaxSigmoid));
        let fused_dist = wants_cm.then(|| class_distribution_of(fused).distribution);
        let fused_assign = wants_assign.then(|| mask_assignment_of(fused));
        let mut out = Vec::with_capacity(self.measures.len());
        for &m in &self.measures {
            let spread = |values: Vec<f64>| -> Result<UncertaintyMap> {
                Ok(UncertaintyMap::new(m, h, w, values)?.degenerate(self.seen == 1 && m.needs_spread()))
            };
            let class_mask = || self.class_mask.as_ref().expect("allocated for class & mask measures");
            let mask_only = || self.mask_only.as_ref().expect("allocated for mask measures");
            let map = match m {
                Measure::PredictiveEntropyCm => spread(class_mask().predictive())?,
                Measure::ExpectedEntropyCm => spread(class_mask().expected())?,
                Measure::MutualInformationCm => spread(class_mask().mutual_information())?,
                Measure::PredictiveEntropyM => spread(mask_only().predictive())?,
                Measure::ExpectedEntropyM => spread(mask_only().expected())?,
                Measure::MutualInformationM => spread(mask_only().mutual_information())?,
                Measure::ExpectedMaskVariance => spread(
                    self.mask_variance
                        .as_ref()
                        .expect("allocated for mask variance")
                        .expected_variance(n, pixels),
                )?,
                Measure::PredictiveMaskVariance => spread(predictive_mask_variance(fused))?,
                Measure::MaxSoftmaxCm => max_softmax_score(fused_dist.as_ref().expect("computed")),
                Measure::MaxNormSigmoidMask => max_normalized_sigmoid_mask(fused_assign.as_ref().expect("computed")),
                Measure::CombinedSoftmaxSigmoid => {
                    let pan = panoptic.ok_or_else(|| {
                        Error::InvalidArgument("combined_softmax_sigmoid needs a panoptic prediction".into())
                    })?;
                    combined_softmax_sigmoid(
                        fused_dist.as_ref().expect("computed"),
                        fused_assign.as_ref().expect("computed"),
                        pan,
                        things,
                    )?
                }
            };
            out.push(map);
        }
        Ok(out)
    }
}

impl SampleAccumulator for MeasureAccumulator {
    fn observe(&mut self, sample: &SampleTensor) -> Result<()> {
        if sample.dims() != self.dims || sample.queries() != self.queries || sample.classes() != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "accumulator expects {} queries, {} classes at {:?}; sample has {}, {} at {:?}",
                self.queries,
                self.classes,
                self.dims,
                sample.queries(),
                sample.classes(),
                sample.dims()
            )));
        }
        self.seen += 1;
        let n = self.seen as f64;
        let view = sample.view();
        if let Some(state) = self.class_mask.as_mut() {
            let d = class_distribution_of(&view).distribution;
            state.observe(n, d.iter_pixels());
        }
        if let Some(state) = self.mask_only.as_mut() {
            let a = mask_assignment_of(&view);
            state.observe(n, a.iter_pixels());
        }
        if let Some(state) = self.mask_variance.as_mut() {
            state.observe(n, sample);
        }
        Ok(())
    }
}

/// Per-pixel population variance across queries of the fused sigmoid masks.
pub fn predictive_mask_variance<T: Copy + Into<f64>>(fused: &LogitView<'_, T>) -> Vec<f64> {
    let pixels = fused.pixels();
    let p = fused.queries as f64;
    let mut sum = vec![0.0; pixels];
    for q in 0..fused.queries {
        for (s, &m) in sum.iter_mut().zip(fused.mask(q)) {
            *s += sigmoid(m.into());
        }
    }
    // Two passes: deviations are taken around the mean.
    let mean: Vec<f64> = sum.iter().map(|s| s / p).collect();
    let mut var = vec![0.0; pixels];
    for q in 0..fused.queries {
        for ((v, &mu), &m) in var.iter_mut().zip(&mean).zip(fused.mask(q)) {
            let d = sigmoid(m.into()) - mu;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= p);
    var
}

/// Per-pixel maximum class probability (confidence orientation).
pub fn max_softmax_score(d: &PixelClassDistribution) -> UncertaintyMap {
    let values = d
        .iter_pixels()
        .map(|px| px.iter().copied().fold(0.0, f64::max))
        .collect();
    UncertaintyMap::new(Measure::MaxSoftmaxCm, d.height(), d.width(), values).expect("probabilities are finite")
}

/// Per-pixel maximum of the query-normalized sigmoid masks (confidence orientation).
pub fn max_normalized_sigmoid_mask(a: &QueryAssignment) -> UncertaintyMap {
    let (h, w) = a.dims();
    let values = a
        .iter_pixels()
        .map(|px| px.iter().copied().fold(0.0, f64::max))
        .collect();
    UncertaintyMap::new(Measure::MaxNormSigmoidMask, h, w, values).expect("probabilities are finite")
}

/// Max softmax score, averaged with the max normalized sigmoid mask score on thing pixels.
pub fn combined_softmax_sigmoid(
    d: &PixelClassDistribution,
    a: &QueryAssignment,
    panoptic: &PanopticLabelMap,
    things: &BTreeSet<u16>,
) -> Result<UncertaintyMap> {
    if d.dims() != a.dims() || d.dims() != panoptic.dims() {
        return Err(Error::ShapeMismatch(format!(
            "distribution {:?}, assignment {:?}, panoptic {:?}",
            d.dims(),
            a.dims(),
            panoptic.dims()
        )));
    }
    let softmax = max_softmax_score(d);
    let sigmoid_score = max_normalized_sigmoid_mask(a);
    let values = softmax
        .values()
        .iter()
        .zip(sigmoid_score.values())
        .enumerate()
        .map(|(i, (&s, &m))| {
            if things.contains(&panoptic.class_at(i)) {
                0.5 * (s + m)
            } else {
                s
            }
        })
        .collect();
    UncertaintyMap::new(Measure::CombinedSoftmaxSigmoid, d.height(), d.width(), values)
}
