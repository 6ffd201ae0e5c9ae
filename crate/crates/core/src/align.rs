//! Bringing ensemble members into the geometry of the current frame.
//!
//! Test-time augmentation produces members that were predicted on a flipped
//! or rescaled image, and time-series members were predicted on an earlier
//! frame. Only mask logits carry geometry; class logits pass through untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlowField, SampleTensor, TransformDescriptor};

/// Mask logit written where a warp has nothing to sample (sigmoid ~ 4.5e-5).
pub const DEFAULT_NEUTRAL_LOGIT: f32 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignOptions {
    pub neutral_logit: f32,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            neutral_logit: DEFAULT_NEUTRAL_LOGIT,
        }
    }
}

fn describe(d: TransformDescriptor) -> String {
    d.to_string()
}

/// Mirrors every mask plane along the width axis and clears the flip flag.
pub fn invert_hflip(mut s: SampleTensor) -> Result<SampleTensor> {
    let t = s.transform();
    if !t.hflip {
        return Err(Error::WrongTransform {
            expected: "hflip",
            found: describe(t),
        });
    }
    let w = s.width();
    for row in s.mask_logits_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    s.set_transform(TransformDescriptor { hflip: false, ..t });
    Ok(s)
}

/// Resizes one plane with bilinear interpolation (half-pixel centres, edge clamp).
pub fn resize_bilinear(src: &[f32], (sh, sw): (usize, usize), (th, tw): (usize, usize)) -> Vec<f32> {
    debug_assert_eq!(src.len(), sh * sw);
    let axis = |t: usize, s: usize| -> Vec<(usize, usize, f64)> {
        let ratio = s as f64 / t as f64;
        (0..t)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (s - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(th, sh);
    let xs = axis(tw, sw);
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let v00 = src[y0 * sw + x0] as f64;
            let v01 = src[y0 * sw + x1] as f64;
            let v10 = src[y1 * sw + x0] as f64;
            let v11 = src[y1 * sw + x1] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    out
}

/// Resizes mask logits of a rescaled member back to `target` and clears the scale flag.
pub fn invert_scale(mut s: SampleTensor, target: (usize, usize)) -> Result<SampleTensor> {
    let t = s.transform();
    if t.scale.is_none() {
        return Err(Error::WrongTransform {
            expected: "scale",
            found: describe(t),
        });
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::DegenerateTarget(target.0, target.1));
    }
    let src_dims = s.dims();
    let mut masks = Vec::with_capacity(s.queries() * target.0 * target.1);
    for q in 0..s.queries() {
        masks.extend(resize_bilinear(s.mask(q), src_dims, target));
    }
    s.replace_masks(target, masks);
    s.set_transform(TransformDescriptor { scale: None, ..t });
    Ok(s)
}

/// Backward-warps a prior-frame member into the current frame.
///
/// The output logit at `p` is the bilinear sample of the prior mask at
/// `p + flow(p)`; invalid flow and out-of-bounds positions get `neutral_logit`.
pub fn warp_prior_frame(mut s: SampleTensor, flow: &FlowField, neutral_logit: f32) -> Result<SampleTensor> {
    let t = s.transform();
    if t.prior_frame.is_none() {
        return Err(Error::WrongTransform {
            expected: "prior_frame",
            found: describe(t),
        });
    }
    if flow.dims() != s.dims() {
        return Err(Error::ShapeMismatch(format!(
            "flow is {:?}, sample is {:?}",
            flow.dims(),
            s.dims()
        )));
    }
    let (h, w) = s.dims();
    let plane = h * w;
    // Per-pixel sampling taps are shared by every query.
    let taps: Vec<Option<[(usize, f64); 4]>> = (0..plane)
        .map(|i| {
            if !flow.is_valid(i) {
                return None;
            }
            let (dx, dy) = flow.at(i);
            let x = (i % w) as f64 + dx as f64;
            let y = (i / w) as f64 + dy as f64;
            if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
                return None;
            }
            let x0 = x.floor() as usize;
            let y0 = y.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            Some([
                (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * w + x1, fx * (1.0 - fy)),
                (y1 * w + x0, (1.0 - fx) * fy),
                (y1 * w + x1, fx * fy),
            ])
        })
        .collect();
    let mut warped = vec![0f32; plane];
    for q in 0..s.queries() {
        let src = s.mask(q);
        for (out, tap) in warped.iter_mut().zip(&taps) {
            *out = match tap {
                None => neutral_logit,
                Some(taps) => taps.iter().map(|&(j, wgt)| src[j] as f64 * wgt).sum::<f64>() as f32,
            };
        }
        s.mask_logits_mut()[q * plane..(q + 1) * plane].copy_from_slice(&warped);
    }
    s.set_transform(TransformDescriptor { prior_frame: None, ..t });
    Ok(s)
}

/// Applies every inversion a member needs: unflip, unscale to `frame`, then warp.
pub fn align_sample(
    mut s: SampleTensor,
    frame: (usize, usize),
    flows: &BTreeMap<u8, FlowField>,
    options: &AlignOptions,
) -> Result<SampleTensor> {
    let t = s.transform();
    if t.hflip {
        s = invert_hflip(s)?;
    }
    if t.scale.is_some() {
        s = invert_scale(s, frame)?;
    } else if s.dims() != frame {
        return Err(Error::ShapeMismatch(format!(
            "unscaled member is {:?}, frame is {frame:?}",
            s.dims()
        )));
    }
    if let Some(k) = t.prior_frame {
        let flow = flows.get(&k).ok_or(Error::MissingFlow(k))?;
        s = warp_prior_frame(s, flow, options.neutral_logit)?;
    }
    Ok(s)
}

/// Test-time augmentation modes of a prediction model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tta {
    None,
    HFlip,
    Scale,
    ScaleHFlip,
}

impl Tta {
    /// Members per frame and dropout pass.
    pub fn count(self) -> usize {
        match self {
            Tta::None => 1,
            Tta::HFlip => 2,
            Tta::Scale => 3,
            Tta::ScaleHFlip => 6,
        }
    }

    fn scales(self) -> &'static [Option<f32>] {
        match self {
            Tta::None | Tta::HFlip => &[None],
            Tta::Scale | Tta::ScaleHFlip => &[Some(0.8), None, Some(1.25)],
        }
    }

    fn flips(self) -> &'static [bool] {
        match self {
            Tta::None | Tta::Scale => &[false],
            Tta::HFlip | Tta::ScaleHFlip => &[false, true],
        }
    }

    /// Whether a member descriptor belongs to this mode (ignoring frame offset).
    pub fn admits(self, d: &TransformDescriptor) -> bool {
        self.flips().contains(&d.hflip) && self.scales().contains(&d.scale)
    }
}

impl fmt::Display for Tta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tta::None => "none",
            Tta::HFlip => "hflip",
            Tta::Scale => "scale",
            Tta::ScaleHFlip => "scale+hflip",
        })
    }
}

impl FromStr for Tta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Tta::None),
            "hflip" => Ok(Tta::HFlip),
            "scale" => Ok(Tta::Scale),
            "scale+hflip" | "hflip+scale" => Ok(Tta::ScaleHFlip),
            _ => Err(Error::InvalidArgument(format!("unknown TTA mode {s:?}"))),
        }
    }
}

/// Prediction-model configuration: dropout passes x frames x TTA transforms.
///
/// `mc = 0` means dropout disabled, i.e. one deterministic pass per frame and transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub mc: usize,
    pub prior_frames: u8,
    pub tta: Tta,
}

impl PredictionConfig {
    pub const BASELINE: PredictionConfig = PredictionConfig {
        mc: 0,
        prior_frames: 0,
        tta: Tta::None,
    };

    pub fn passes(&self) -> usize {
        self.mc.max(1)
    }

    pub fn sample_count(&self) -> usize {
        self.passes() * (1 + self.prior_frames as usize) * self.tta.count()
    }

    /// Member descriptors in ensemble order; each appears once per dropout pass.
    pub fn descriptors(&self) -> Vec<TransformDescriptor> {
        let mut out = Vec::with_capacity(self.sample_count());
        for k in 0..=self.prior_frames {
            for &scale in self.tta.scales() {
                for &hflip in self.tta.flips() {
                    let d = TransformDescriptor {
                        hflip,
                        scale,
                        prior_frame: (k > 0).then_some(k),
                    };
                    out.extend(std::iter::repeat_n(d, self.passes()));
                }
            }
        }
        out
    }
}

impl fmt::Display for PredictionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mc{}_f{}_{}", self.mc, self.prior_frames, self.tta)
    }
}

type Loader<'a> = Box<dyn Fn() -> Result<SampleTensor> + Send + Sync + 'a>;

/// A raw ensemble member that is materialized on demand.
pub struct EnsembleMember<'a> {
    pub descriptor: TransformDescriptor,
    pub c_total: usize,
    load: Loader<'a>,
}

impl fmt::Debug for EnsembleMember<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnsembleMember")
            .field("descriptor", &self.descriptor)
            .field("c_total", &self.c_total)
            .finish_non_exhaustive()
    }
}

impl<'a> EnsembleMember<'a> {
    pub fn lazy<F>(descriptor: TransformDescriptor, c_total: usize, load: F) -> Self
    where
        F: Fn() -> Result<SampleTensor> + Send + Sync + 'a,
    {
        Self {
            descriptor,
            c_total,
            load: Box::new(load),
        }
    }

    /// Member backed by a sample already in memory (cloned on every load).
    pub fn in_memory(sample: SampleTensor) -> Self {
        Self {
            descriptor: sample.transform(),
            c_total: sample.c_total(),
            load: Box::new(move || Ok(sample.clone())),
        }
    }

    pub fn load(&self) -> Result<SampleTensor> {
        (self.load)()
    }
}

/// Ordered, re-iterable stream of members aligned to a common frame.
pub struct AlignedEnsemble<'a> {
    members: Vec<EnsembleMember<'a>>,
    flows: BTreeMap<u8, FlowField>,
    frame: (usize, usize),
    c_total: usize,
    options: AlignOptions,
}

impl fmt::Debug for AlignedEnsemble<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AlignedEnsemble")
            .field("len", &self.members.len())
            .field("frame", &self.frame)
            .field("c_total", &self.c_total)
            .finish_non_exhaustive()
    }
}

/// Orders members deterministically and checks that every one of them can be aligned.
pub fn build_aligned_ensemble<'a>(
    mut members: Vec<EnsembleMember<'a>>,
    flows: BTreeMap<u8, FlowField>,
    frame: (usize, usize),
    options: AlignOptions,
) -> Result<AlignedEnsemble<'a>> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    let c_total = first.c_total;
    if let Some(bad) = members.iter().find(|m| m.c_total != c_total) {
        return Err(Error::MixedClassCount {
            expected: c_total,
            found: bad.c_total,
        });
    }
    for m in &members {
        if let Some(k) = m.descriptor.prior_frame {
            if !flows.contains_key(&k) {
                return Err(Error::MissingFlow(k));
            }
        }
    }
    if let Some((k, f)) = flows.iter().find(|(_, f)| f.dims() != frame) {
        return Err(Error::ShapeMismatch(format!(
            "flow for prior frame {k} is {:?}, frame is {frame:?}",
            f.dims()
        )));
    }
    // Stable: members sharing a descriptor keep their relative (dropout pass) order.
    members.sort_by(|a, b| a.descriptor.order(&b.descriptor));
    Ok(AlignedEnsemble {
        members,
        flows,
        frame,
        c_total,
        options,
    })
}

impl<'a> AlignedEnsemble<'a> {
    /// Number of members, Q.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn frame(&self) -> (usize, usize) {
        self.frame
    }

    pub fn c_total(&self) -> usize {
        self.c_total
    }

    pub fn descriptors(&self) -> impl Iterator<Item = TransformDescriptor> + '_ {
        self.members.iter().map(|m| m.descriptor)
    }

    /// Loads and aligns member `index`.
    pub fn get(&self, index: usize) -> Result<SampleTensor> {
        let m = &self.members[index];
        let s = m.load()?;
        if s.c_total() != self.c_total {
            return Err(Error::MixedClassCount {
                expected: self.c_total,
                found: s.c_total(),
            });
        }
        if s.transform() != m.descriptor {
            return Err(Error::WrongTransform {
                expected: "descriptor declared by the member",
                found: describe(s.transform()),
            });
        }
        align_sample(s, self.frame, &self.flows, &self.options)
    }

    /// Yields aligned members one at a time, in ensemble order.
    pub fn iter(&self) -> impl Iterator<Item = Result<SampleTensor>> + '_ {
        (0..self.members.len()).map(move |i| self.get(i))
    }
}
