//! Tensor and label-map types shared by every stage of the pipeline.
//!
//! A [`SampleTensor`] is one ensemble member: `P` queries, each with a row of
//! `c_total = c + 1` class logits (the trailing column is "no object") and an
//! `h x w` mask-logit plane. Label maps use class id 0 as VOID, so dataset
//! class `k` (1-based) lives in class-logit column `k - 1`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, LogitTensor, Result};
use crate::residency::Resident;

/// Class id reserved for void / ignore pixels.
pub const VOID: u16 = 0;

/// Geometric provenance of a raw ensemble member.
///
/// Members can combine a horizontal flip, a rescale and a prior-frame offset
/// (e.g. the flipped 1.25x pass over frame `t-2`). The identity descriptor has
/// none of them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformDescriptor {
    pub hflip: bool,
    pub scale: Option<f32>,
    pub prior_frame: Option<u8>,
}

impl TransformDescriptor {
    pub const KIND_HFLIP: u8 = 0b001;
    pub const KIND_SCALE: u8 = 0b010;
    pub const KIND_PRIOR_FRAME: u8 = 0b100;

    pub const IDENTITY: TransformDescriptor = TransformDescriptor {
        hflip: false,
        scale: None,
        prior_frame: None,
    };

    pub fn hflip() -> Self {
        Self {
            hflip: true,
            ..Self::IDENTITY
        }
    }

    pub fn scale(factor: f32) -> Self {
        Self {
            scale: Some(factor),
            ..Self::IDENTITY
        }
    }

    pub fn prior_frame(k: u8) -> Self {
        Self {
            prior_frame: Some(k),
            ..Self::IDENTITY
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.scale.is_none() && self.prior_frame.is_none()
    }

    /// Kind bit set as stored in sample containers.
    pub fn kind_bits(&self) -> u8 {
        let mut kind = 0;
        if self.hflip {
            kind |= Self::KIND_HFLIP;
        }
        if self.scale.is_some() {
            kind |= Self::KIND_SCALE;
        }
        if self.prior_frame.is_some() {
            kind |= Self::KIND_PRIOR_FRAME;
        }
        kind
    }

    /// Scale factor, 1.0 when unscaled.
    pub fn factor(&self) -> f32 {
        self.scale.unwrap_or(1.0)
    }

    /// Prior-frame offset, 0 for the current frame.
    pub fn frame_offset(&self) -> u8 {
        self.prior_frame.unwrap_or(0)
    }

    pub fn from_parts(kind: u8, factor: f32, k: u8) -> Result<Self> {
        if kind & !0b111 != 0 {
            return Err(Error::InvalidArgument(format!("unknown transform kind bits {kind:#b}")));
        }
        let scale = if kind & Self::KIND_SCALE != 0 {
            if !(factor.is_finite() && factor > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "scale factor {factor} must be positive"
                )));
            }
            Some(factor)
        } else {
            None
        };
        let prior_frame = if kind & Self::KIND_PRIOR_FRAME != 0 {
            if k == 0 {
                return Err(Error::InvalidArgument("prior frame offset must be >= 1".into()));
            }
            Some(k)
        } else {
            None
        };
        Ok(Self {
            hflip: kind & Self::KIND_HFLIP != 0,
            scale,
            prior_frame,
        })
    }

    /// Deterministic ensemble order: frame offset, then scale factor, then flip.
    pub fn order(&self, other: &Self) -> Ordering {
        self.frame_offset()
            .cmp(&other.frame_offset())
            .then(self.factor().total_cmp(&other.factor()))
            .then(self.hflip.cmp(&other.hflip))
    }

    /// Dimensions of a member produced at this descriptor's scale for a frame of `frame` size.
    pub fn sample_dims(&self, frame: (usize, usize)) -> (usize, usize) {
        match self.scale {
            None => frame,
            Some(f) => scaled_dims(frame, f),
        }
    }
}

impl fmt::Display for TransformDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identity() {
            return f.write_str("identity");
        }
        let mut parts = Vec::new();
        if let Some(k) = self.prior_frame {
            parts.push(format!("prior_frame({k})"));
        }
        if let Some(s) = self.scale {
            parts.push(format!("scale({s})"));
        }
        if self.hflip {
            parts.push("hflip".to_string());
        }
        f.write_str(&parts.join("+"))
    }
}

/// Size of a frame rescaled by `factor`, rounded to the nearest pixel and at least 1.
pub fn scaled_dims(frame: (usize, usize), factor: f32) -> (usize, usize) {
    let f = factor as f64;
    let h = ((frame.0 as f64) * f).round().max(1.0) as usize;
    let w = ((frame.1 as f64) * f).round().max(1.0) as usize;
    (h, w)
}

/// Bounds on transform descriptors accepted by a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformLimits {
    pub scales: Vec<f32>,
    pub max_prior_frame: u8,
}

impl Default for TransformLimits {
    fn default() -> Self {
        Self {
            scales: vec![0.8, 1.25],
            max_prior_frame: 5,
        }
    }
}

impl TransformLimits {
    pub fn check(&self, d: &TransformDescriptor) -> Result<()> {
        if let Some(s) = d.scale {
            if !self.scales.contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "scale factor {s} not in {:?}",
                    self.scales
                )));
            }
        }
        if let Some(k) = d.prior_frame {
            if k == 0 || k > self.max_prior_frame {
                return Err(Error::InvalidArgument(format!(
                    "prior frame offset {k} outside [1, {}]",
                    self.max_prior_frame
                )));
            }
        }
        Ok(())
    }
}

/// Unvalidated sample components, as read from disk or produced by a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub queries: usize,
    pub c_total: usize,
    pub height: usize,
    pub width: usize,
    pub class_logits: Vec<f32>,
    pub mask_logits: Vec<f32>,
    pub transform: TransformDescriptor,
}

/// Checks every sample invariant and returns the validated tensor.
///
/// `expected_c_total` pins the class count of the ensemble the sample belongs to.
pub fn validate_sample(raw: RawSample, expected_c_total: Option<usize>) -> Result<SampleTensor> {
    if raw.queries == 0 || raw.c_total == 0 || raw.height == 0 || raw.width == 0 {
        return Err(Error::EmptyTensor);
    }
    if raw.c_total < 2 {
        return Err(Error::ShapeMismatch(format!(
            "c_total must be >= 2 (at least one class plus no-object), got {}",
            raw.c_total
        )));
    }
    if let Some(expected) = expected_c_total {
        if expected != raw.c_total {
            return Err(Error::ShapeMismatch(format!(
                "class logits have c_total={}, ensemble declares {expected}",
                raw.c_total
            )));
        }
    }
    if raw.class_logits.len() != raw.queries * raw.c_total {
        return Err(Error::ShapeMismatch(format!(
            "class logits length {} != {}x{}",
            raw.class_logits.len(),
            raw.queries,
            raw.c_total
        )));
    }
    let plane = raw.height * raw.width;
    if raw.mask_logits.len() != raw.queries * plane {
        return Err(Error::ShapeMismatch(format!(
            "mask logits length {} != {}x{}x{}",
            raw.mask_logits.len(),
            raw.queries,
            raw.height,
            raw.width
        )));
    }
    if let Some(index) = raw.class_logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit {
            tensor: LogitTensor::Class,
            index,
        });
    }
    if let Some(index) = raw.mask_logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit {
            tensor: LogitTensor::Mask,
            index,
        });
    }
    Ok(SampleTensor {
        queries: raw.queries,
        c_total: raw.c_total,
        height: raw.height,
        width: raw.width,
        class_logits: raw.class_logits,
        mask_logits: raw.mask_logits,
        transform: raw.transform,
        _resident: Resident::acquire(),
    })
}

/// One validated ensemble member.
#[derive(Debug, Clone)]
pub struct SampleTensor {
    queries: usize,
    c_total: usize,
    height: usize,
    width: usize,
    class_logits: Vec<f32>,
    mask_logits: Vec<f32>,
    transform: TransformDescriptor,
    _resident: Resident,
}

impl PartialEq for SampleTensor {
    fn eq(&self, other: &Self) -> bool {
        self.queries == other.queries
            && self.c_total == other.c_total
            && self.height == other.height
            && self.width == other.width
            && self.transform == other.transform
            && self.class_logits == other.class_logits
            && self.mask_logits == other.mask_logits
    }
}

impl SampleTensor {
    pub fn new(
        queries: usize,
        c_total: usize,
        (height, width): (usize, usize),
        class_logits: Vec<f32>,
        mask_logits: Vec<f32>,
        transform: TransformDescriptor,
    ) -> Result<Self> {
        validate_sample(
            RawSample {
                queries,
                c_total,
                height,
                width,
                class_logits,
                mask_logits,
                transform,
            },
            None,
        )
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn c_total(&self) -> usize {
        self.c_total
    }

    /// Number of dataset classes (excludes the no-object column).
    pub fn classes(&self) -> usize {
        self.c_total - 1
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn transform(&self) -> TransformDescriptor {
        self.transform
    }

    pub fn class_logits(&self) -> &[f32] {
        &self.class_logits
    }

    pub fn class_row(&self, query: usize) -> &[f32] {
        &self.class_logits[query * self.c_total..(query + 1) * self.c_total]
    }

    pub fn mask_logits(&self) -> &[f32] {
        &self.mask_logits
    }

    pub fn mask(&self, query: usize) -> &[f32] {
        let plane = self.pixels();
        &self.mask_logits[query * plane..(query + 1) * plane]
    }

    pub fn into_raw(self) -> RawSample {
        let SampleTensor {
            queries,
            c_total,
            height,
            width,
            class_logits,
            mask_logits,
            transform,
            _resident,
        } = self;
        RawSample {
            queries,
            c_total,
            height,
            width,
            class_logits,
            mask_logits,
            transform,
        }
    }

    pub(crate) fn set_transform(&mut self, transform: TransformDescriptor) {
        self.transform = transform;
    }

    pub(crate) fn mask_logits_mut(&mut self) -> &mut [f32] {
        &mut self.mask_logits
    }

    /// Replaces every mask plane, keeping class logits. Values must be finite.
    pub(crate) fn replace_masks(&mut self, (height, width): (usize, usize), masks: Vec<f32>) {
        debug_assert_eq!(masks.len(), self.queries * height * width);
        debug_assert!(masks.iter().all(|v| v.is_finite()));
        self.height = height;
        self.width = width;
        self.mask_logits = masks;
    }

    /// Reorders queries in place so that query `a` moves to slot `perm[a]`.
    pub(crate) fn scatter_queries(&mut self, perm: &[usize]) {
        let p = self.queries;
        debug_assert_eq!(perm.len(), p);
        let plane = self.pixels();
        let mut class = vec![0f32; self.class_logits.len()];
        for (a, &b) in perm.iter().enumerate() {
            class[b * self.c_total..(b + 1) * self.c_total]
                .copy_from_slice(&self.class_logits[a * self.c_total..(a + 1) * self.c_total]);
        }
        self.class_logits = class;
        // Cycle-walk the mask planes so no second full-resolution buffer is needed.
        let mut done = vec![false; p];
        for start in 0..p {
            if done[start] {
                continue;
            }
            let mut carry = self.mask_logits[start * plane..(start + 1) * plane].to_vec();
            let mut a = start;
            loop {
                done[a] = true;
                let b = perm[a];
                let slot = &mut self.mask_logits[b * plane..(b + 1) * plane];
                slot.swap_with_slice(&mut carry);
                a = b;
                if a == start {
                    break;
                }
            }
        }
    }
}

/// Borrowed logits of a sample-shaped tensor, either a 32-bit sample or a 64-bit running mean.
#[derive(Debug, Clone, Copy)]
pub struct LogitView<'a, T> {
    pub queries: usize,
    pub c_total: usize,
    pub dims: (usize, usize),
    pub class: &'a [T],
    pub mask: &'a [T],
}

impl<'a, T: Copy + Into<f64>> LogitView<'a, T> {
    pub fn pixels(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    pub fn classes(&self) -> usize {
        self.c_total - 1
    }

    pub fn class_row(&self, query: usize) -> &'a [T] {
        &self.class[query * self.c_total..(query + 1) * self.c_total]
    }

    pub fn mask(&self, query: usize) -> &'a [T] {
        let plane = self.pixels();
        &self.mask[query * plane..(query + 1) * plane]
    }

    /// Softmax of every class row, `queries x c_total`, row-major.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.class.len()];
        for (row, dst) in self
            .class
            .chunks_exact(self.c_total)
            .zip(out.chunks_exact_mut(self.c_total))
        {
            softmax_generic(row, dst);
        }
        out
    }
}

impl SampleTensor {
    pub fn view(&self) -> LogitView<'_, f32> {
        LogitView {
            queries: self.queries,
            c_total: self.c_total,
            dims: self.dims(),
            class: &self.class_logits,
            mask: &self.mask_logits,
        }
    }
}

fn softmax_generic<T: Copy + Into<f64>>(row: &[T], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.into()));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v.into() - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Numerically stable softmax of one logit row, computed in f64.
pub fn softmax_over_classes(row: &[f32]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

pub(crate) fn softmax_into(row: &[f32], out: &mut [f64]) {
    softmax_generic(row, out)
}

/// Logistic sigmoid, stable for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_mask(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&v| sigmoid(v as f64)).collect()
}

/// Per-pixel class distribution over the `c` dataset classes, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelClassDistribution {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl PixelClassDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if height * width == 0 || classes == 0 {
            return Err(Error::EmptyTensor);
        }
        if probs.len() != height * width * classes {
            return Err(Error::ShapeMismatch(format!(
                "distribution length {} != {height}x{width}x{classes}",
                probs.len()
            )));
        }
        for (i, px) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|&p| !p.is_finite() || p < 0.0) || (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("pixel {i} is not a probability vector")));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Self {
        Self {
            height,
            width,
            classes,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.classes..(index + 1) * self.classes]
    }

    pub fn iter_pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLabelMap {
    height: usize,
    width: usize,
    ids: Vec<u16>,
}

impl SemanticLabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map length {} != {height}x{width}",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    /// Like [`new`](Self::new), additionally rejecting ids above `max_class`.
    pub fn with_classes(height: usize, width: usize, ids: Vec<u16>, max_class: u16) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&id| id > max_class) {
            return Err(Error::InvalidArgument(format!("class id {bad} exceeds {max_class}")));
        }
        Self::new(height, width, ids)
    }

    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u16 {
        self.ids.iter().copied().max().unwrap_or(VOID)
    }
}

/// Panoptic ids pack `class_id * 65536 + instance_id`; 0 is VOID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticLabelMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

pub fn encode_panoptic(class_id: u16, instance_id: u16) -> u32 {
    (class_id as u32) << 16 | instance_id as u32
}

pub fn decode_panoptic(id: u32) -> (u16, u16) {
    ((id >> 16) as u16, (id & 0xFFFF) as u16)
}

impl PanopticLabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map length {} != {height}x{width}",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u32) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn class_at(&self, index: usize) -> u16 {
        decode_panoptic(self.ids[index]).0
    }

    /// Semantic view: the class part of every id.
    pub fn to_semantic(&self) -> SemanticLabelMap {
        SemanticLabelMap {
            height: self.height,
            width: self.width,
            ids: self.ids.iter().map(|&id| decode_panoptic(id).0).collect(),
        }
    }

    /// Distinct non-void segment ids in ascending order.
    pub fn segment_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.ids.iter().copied().filter(|&id| id != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Backward optical flow: target pixel `p` samples the source frame at `p + flow(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    displacement: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowField {
    /// Builds a flow field; displacements at invalid pixels are forced to (0, 0).
    pub fn new(height: usize, width: usize, mut displacement: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if n == 0 {
            return Err(Error::EmptyTensor);
        }
        if displacement.len() != 2 * n || valid.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "flow buffers ({}, {}) do not match {height}x{width}",
                displacement.len(),
                valid.len()
            )));
        }
        if let Some(index) = displacement.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite flow at flat index {index}")));
        }
        for (i, &ok) in valid.iter().enumerate() {
            if !ok {
                displacement[2 * i] = 0.0;
                displacement[2 * i + 1] = 0.0;
            }
        }
        Ok(Self {
            height,
            width,
            displacement,
            valid,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            displacement: vec![0.0; 2 * height * width],
            valid: vec![true; height * width],
        }
    }

    /// Constant displacement everywhere, all valid.
    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let n = height * width;
        let mut displacement = Vec::with_capacity(2 * n);
        for _ in 0..n {
            displacement.push(dx);
            displacement.push(dy);
        }
        Self {
            height,
            width,
            displacement,
            valid: vec![true; n],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `(dx, dy)` at flat pixel index.
    pub fn at(&self, index: usize) -> (f32, f32) {
        (self.displacement[2 * index], self.displacement[2 * index + 1])
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.valid[index]
    }

    pub fn displacement(&self) -> &[f32] {
        &self.displacement
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn invalidate(&mut self, index: usize) {
        self.valid[index] = false;
        self.displacement[2 * index] = 0.0;
        self.displacement[2 * index + 1] = 0.0;
    }
}

/// Whether larger values of a map mean more uncertainty or more confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Uncertainty,
    Confidence,
}

/// The eleven pixel-level uncertainty measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    PredictiveEntropyCm,
    PredictiveEntropyM,
    ExpectedEntropyM,
    ExpectedEntropyCm,
    MutualInformationM,
    MutualInformationCm,
    ExpectedMaskVariance,
    PredictiveMaskVariance,
    MaxSoftmaxCm,
    MaxNormSigmoidMask,
    CombinedSoftmaxSigmoid,
}

impl Measure {
    pub const ALL: [Measure; 11] = [
        Measure::PredictiveEntropyCm,
        Measure::PredictiveEntropyM,
        Measure::ExpectedEntropyM,
        Measure::ExpectedEntropyCm,
        Measure::MutualInformationM,
        Measure::MutualInformationCm,
        Measure::ExpectedMaskVariance,
        Measure::PredictiveMaskVariance,
        Measure::MaxSoftmaxCm,
        Measure::MaxNormSigmoidMask,
        Measure::CombinedSoftmaxSigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::PredictiveEntropyCm => "predictive_entropy_cm",
            Measure::PredictiveEntropyM => "predictive_entropy_m",
            Measure::ExpectedEntropyM => "expected_entropy_m",
            Measure::ExpectedEntropyCm => "expected_entropy_cm",
            Measure::MutualInformationM => "mutual_information_m",
            Measure::MutualInformationCm => "mutual_information_cm",
            Measure::ExpectedMaskVariance => "expected_mask_variance",
            Measure::PredictiveMaskVariance => "predictive_mask_variance",
            Measure::MaxSoftmaxCm => "max_softmax_cm",
            Measure::MaxNormSigmoidMask => "max_norm_sigmoid_mask",
            Measure::CombinedSoftmaxSigmoid => "combined_softmax_sigmoid",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Measure::MaxSoftmaxCm | Measure::MaxNormSigmoidMask | Measure::CombinedSoftmaxSigmoid => {
                Orientation::Confidence
            }
            _ => Orientation::Uncertainty,
        }
    }

    /// Measures that quantify spread across samples and are undefined for a single sample.
    pub fn needs_spread(self) -> bool {
        matches!(
            self,
            Measure::ExpectedEntropyM
                | Measure::ExpectedEntropyCm
                | Measure::MutualInformationM
                | Measure::MutualInformationCm
                | Measure::ExpectedMaskVariance
        )
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown measure {s:?}")))
    }
}

/// Per-pixel scalar map for one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    measure: Measure,
    height: usize,
    width: usize,
    values: Vec<f64>,
    degenerate: bool,
}

impl UncertaintyMap {
    pub fn new(measure: Measure, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "map length {} != {height}x{width}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "map value {} at {i} is not a finite non-negative number",
                values[i]
            )));
        }
        Ok(Self {
            measure,
            height,
            width,
            values,
            degenerate: false,
        })
    }

    pub(crate) fn degenerate(mut self, flag: bool) -> Self {
        self.degenerate = flag;
        self
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn orientation(&self) -> Orientation {
        self.measure.orientation()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when the measure is a spread measure computed from a single sample (exact zeros).
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}
