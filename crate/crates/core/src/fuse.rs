//! From a (fused or single) sample to per-pixel distributions and label maps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    encode_panoptic, sigmoid, LogitView, PanopticLabelMap, PixelClassDistribution, SampleTensor, SemanticLabelMap,
};

/// Class distribution plus the number of pixels that fell back to uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub distribution: PixelClassDistribution,
    /// Pixels where every query's weighted mass underflowed to zero.
    pub fallback_pixels: usize,
}

/// Mask-weighted class distribution over the `c` dataset classes.
///
/// `d(x) ~ sum_p softmax(L_p)[..c] * sigmoid(M_p(x))`, renormalized per pixel;
/// the no-object probability never enters the sum.
pub fn pixel_class_distribution(s: &SampleTensor) -> ClassDistribution {
    class_distribution_of(&s.view())
}

pub fn class_distribution_of<T: Copy + Into<f64>>(v: &LogitView<'_, T>) -> ClassDistribution {
    let c = v.classes();
    let plane = v.pixels();
    let probs = v.class_probabilities();
    let mut out = vec![0f64; plane * c];
    for q in 0..v.queries {
        let row = &probs[q * v.c_total..q * v.c_total + c];
        for (px, &m) in out.chunks_exact_mut(c).zip(v.mask(q)) {
            let weight = sigmoid(m.into());
            for (o, &p) in px.iter_mut().zip(row) {
                *o += p * weight;
            }
        }
    }
    let mut fallback_pixels = 0;
    for px in out.chunks_exact_mut(c) {
        let total: f64 = px.iter().sum();
        if total > 0.0 && total.is_finite() {
            px.iter_mut().for_each(|p| *p /= total);
        } else {
            fallback_pixels += 1;
            px.iter_mut().for_each(|p| *p = 1.0 / c as f64);
        }
    }
    if fallback_pixels > 0 {
        log::debug!("{fallback_pixels} pixels fell back to a uniform class distribution");
    }
    ClassDistribution {
        distribution: PixelClassDistribution::from_parts_unchecked(v.dims.0, v.dims.1, c, out),
        fallback_pixels,
    }
}

/// Per-pixel distribution over queries: sigmoid mask values normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAssignment {
    height: usize,
    width: usize,
    queries: usize,
    probs: Vec<f64>,
}

impl QueryAssignment {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.queries..(index + 1) * self.queries]
    }

    pub fn iter_pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.queries)
    }
}

pub fn mask_assignment_distribution(s: &SampleTensor) -> QueryAssignment {
    mask_assignment_of(&s.view())
}

pub fn mask_assignment_of<T: Copy + Into<f64>>(v: &LogitView<'_, T>) -> QueryAssignment {
    let p = v.queries;
    let plane = v.pixels();
    let mut probs = vec![0f64; plane * p];
    for q in 0..p {
        for (i, &m) in v.mask(q).iter().enumerate() {
            probs[i * p + q] = sigmoid(m.into());
        }
    }
    for px in probs.chunks_exact_mut(p) {
        let total: f64 = px.iter().sum();
        if total > 0.0 {
            px.iter_mut().for_each(|x| *x /= total);
        } else {
            // Every sigmoid underflowed (logits below about -745).
            px.iter_mut().for_each(|x| *x = 1.0 / p as f64);
        }
    }
    QueryAssignment {
        height: v.dims.0,
        width: v.dims.1,
        queries: p,
        probs,
    }
}

/// Per-pixel argmax (lowest class id on ties); never emits VOID.
pub fn semantic_inference(d: &PixelClassDistribution) -> SemanticLabelMap {
    let ids = d
        .iter_pixels()
        .map(|px| {
            let mut best = 0;
            for (k, &p) in px.iter().enumerate().skip(1) {
                if p > px[best] {
                    best = k;
                }
            }
            (best + 1) as u16
        })
        .collect();
    SemanticLabelMap::new(d.height(), d.width(), ids).expect("dimensions come from the distribution")
}

/// Query-based panoptic post-processing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticParams {
    pub score_thresh: f64,
    pub overlap_thresh: f64,
    /// Class ids that carry instances; everything else is stuff.
    pub things: BTreeSet<u16>,
}

impl Default for PanopticParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.8,
            overlap_thresh: 0.8,
            things: BTreeSet::new(),
        }
    }
}

impl PanopticParams {
    pub fn with_things(things: impl IntoIterator<Item = u16>) -> Self {
        Self {
            things: things.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("score", self.score_thresh), ("overlap", self.overlap_thresh)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} threshold {t} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn panoptic_inference(s: &SampleTensor, params: &PanopticParams) -> Result<PanopticLabelMap> {
    panoptic_inference_of(&s.view(), params)
}

/// Query-based panoptic inference.
///
/// Queries whose top class is a real class with probability at least
/// `score_thresh` compete per pixel on `prob * sigmoid(mask)`. A query keeps
/// the pixels it wins where its own mask is on (sigmoid >= 0.5), unless it
/// wins less than `overlap_thresh` of its mask area. Stuff queries of one class
/// merge into a single segment with instance 0; thing segments are numbered
/// 1, 2, .. per class in query order. Everything else is VOID.
pub fn panoptic_inference_of<T: Copy + Into<f64>>(
    v: &LogitView<'_, T>,
    params: &PanopticParams,
) -> Result<PanopticLabelMap> {
    params.validate()?;
    let probs = v.class_probabilities();
    let no_object = v.c_total - 1;
    let mut kept: Vec<(usize, u16, f64)> = Vec::new();
    for q in 0..v.queries {
        let row = &probs[q * v.c_total..(q + 1) * v.c_total];
        let mut label = 0;
        for k in 1..row.len() {
            if row[k] > row[label] {
                label = k;
            }
        }
        if label != no_object && row[label] >= params.score_thresh {
            kept.push((q, (label + 1) as u16, row[label]));
        }
    }
    let (h, w) = v.dims;
    let plane = h * w;
    let mut ids = vec![0u32; plane];
    if kept.is_empty() {
        return PanopticLabelMap::new(h, w, ids);
    }
    // Winner per pixel, as an index into `kept`.
    let mut winner = vec![0usize; plane];
    let mut best = vec![f64::NEG_INFINITY; plane];
    for (k, &(q, _, score)) in kept.iter().enumerate() {
        for (i, &m) in v.mask(q).iter().enumerate() {
            let val = score * sigmoid(m.into());
            if val > best[i] {
                best[i] = val;
                winner[i] = k;
            }
        }
    }
    let mut stuff_segments: std::collections::BTreeMap<u16, u32> = Default::default();
    let mut next_instance: std::collections::BTreeMap<u16, u16> = Default::default();
    for (k, &(q, class, _)) in kept.iter().enumerate() {
        let mask = v.mask(q);
        let mut won = 0usize;
        let mut original = 0usize;
        let mut surviving = 0usize;
        for i in 0..plane {
            let on = sigmoid(mask[i].into()) >= 0.5;
            let wins = winner[i] == k;
            won += wins as usize;
            original += on as usize;
            surviving += (wins && on) as usize;
        }
        if won == 0 || original == 0 || surviving == 0 {
            continue;
        }
        if (won as f64) / (original as f64) < params.overlap_thresh {
            continue;
        }
        let id = if params.things.contains(&class) {
            let inst = next_instance.entry(class).or_insert(0);
            *inst += 1;
            encode_panoptic(class, *inst)
        } else {
            *stuff_segments.entry(class).or_insert_with(|| encode_panoptic(class, 0))
        };
        for i in 0..plane {
            if winner[i] == k && sigmoid(mask[i].into()) >= 0.5 {
                ids[i] = id;
            }
        }
    }
    PanopticLabelMap::new(h, w, ids)
}
