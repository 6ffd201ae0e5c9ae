//! Deterministic synthetic scenes, sequences and ensemble members.
//!
//! All randomness comes from [`SplitMix64`], so a seed reproduces the same
//! bytes on every platform.

use std::collections::{BTreeMap, BTreeSet};

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::align::{resize_bilinear, PredictionConfig};
use crate::error::{Error, Result};
use crate::model::{
    encode_panoptic, FlowField, PanopticLabelMap, SampleTensor, SemanticLabelMap, TransformDescriptor, VOID,
};

/// Logit magnitude of ideal samples.
pub const SATURATED: f32 = 40.0;

const MAX_ATTEMPTS: usize = 1000;
const GAP: usize = 2;

/// SplitMix64 (Steele, Lea and Flood 2014) with the sampling helpers used by the simulator.
///
/// The state advances by the golden-ratio increment `0x9E3779B97F4A7C15` and
/// each output is the state passed through the finalizer
/// `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31`.
/// Floats take the top 53 bits; normals use Box-Muller on two consecutive floats.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    inner: rand_xoshiro::SplitMix64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: rand_xoshiro::SplitMix64::seed_from_u64(seed),
        }
    }

    /// Generator for an independent sub-stream identified by `tag`.
    pub fn derive(seed: u64, tag: u64) -> Self {
        let mut g = Self::new(seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
        g.next_u64();
        g
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u128;
        lo + ((self.next_u64() as u128 * span) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range(0, i);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    /// Translated copy, if it stays inside a `height x width` frame.
    pub fn shifted(&self, dy: i64, dx: i64, height: usize, width: usize) -> Option<Rect> {
        let y = self.y as i64 + dy;
        let x = self.x as i64 + dx;
        if y < 0 || x < 0 || y as usize + self.h > height || x as usize + self.w > width {
            return None;
        }
        Some(Rect {
            y: y as usize,
            x: x as usize,
            ..*self
        })
    }

    /// True when at least `gap` pixels separate the two rectangles on some axis.
    pub fn separated(&self, other: &Rect, gap: usize) -> bool {
        self.y + self.h + gap <= other.y
            || other.y + other.h + gap <= self.y
            || self.x + self.w + gap <= other.x
            || other.x + other.w + gap <= self.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub rect: Rect,
    pub class: u16,
    pub instance: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Query slots P of generated samples.
    pub queries: usize,
    /// Number of real classes c; ids are 1..=c.
    pub classes: u16,
    pub things: BTreeSet<u16>,
    pub background: u16,
    pub n_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Add a rectangle of a class the model has never seen (labelled VOID).
    pub ood: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            queries: 8,
            classes: 8,
            things: (5..=8).collect(),
            background: 1,
            n_objects: 3,
            min_size: 8,
            max_size: 20,
            ood: false,
        }
    }
}

impl SceneConfig {
    pub fn c_total(&self) -> usize {
        self.classes as usize + 1
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::EmptyTensor);
        }
        if self.classes < 2 || self.background == VOID || self.background > self.classes {
            return Err(Error::InvalidArgument(format!(
                "background {} must be one of {} classes (at least 2)",
                self.background, self.classes
            )));
        }
        if self.things.contains(&self.background) {
            return Err(Error::InvalidArgument("background class must be stuff".into()));
        }
        let needed = 1 + self.n_objects + self.ood as usize;
        if needed > self.queries {
            return Err(Error::InvalidArgument(format!(
                "{} objects need {needed} queries, have {}",
                self.n_objects, self.queries
            )));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::InvalidArgument(format!(
                "object size range {}..={}",
                self.min_size, self.max_size
            )));
        }
        Ok(())
    }
}

/// Non-overlapping rectangles on a stuff background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub queries: usize,
    pub classes: u16,
    pub background: u16,
    pub objects: Vec<SceneObject>,
    pub ood: Option<Rect>,
}

impl Scene {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn c_total(&self) -> usize {
        self.classes as usize + 1
    }

    fn object_at(&self, y: usize, x: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.rect.contains(y, x))
    }

    fn in_ood(&self, y: usize, x: usize) -> bool {
        self.ood.is_some_and(|r| r.contains(y, x))
    }

    pub fn gt_semantic(&self) -> SemanticLabelMap {
        let mut ids = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                ids.push(if self.in_ood(y, x) {
                    VOID
                } else {
                    self.object_at(y, x).map_or(self.background, |o| o.class)
                });
            }
        }
        SemanticLabelMap::new(self.height, self.width, ids).expect("scene dimensions")
    }

    pub fn gt_panoptic(&self) -> PanopticLabelMap {
        let mut ids = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                ids.push(if self.in_ood(y, x) {
                    0
                } else {
                    self.object_at(y, x).map_or(encode_panoptic(self.background, 0), |o| {
                        encode_panoptic(o.class, o.instance)
                    })
                });
            }
        }
        PanopticLabelMap::new(self.height, self.width, ids).expect("scene dimensions")
    }

    /// Saturated sample whose fused output reproduces the ground truth exactly.
    ///
    /// Query 0 is the background, queries 1..=n the objects in order, the rest
    /// predict no-object. The unseen-class region is claimed by no query.
    pub fn ideal_sample(&self) -> SampleTensor {
        let c_total = self.c_total();
        let plane = self.height * self.width;
        let mut class = vec![-SATURATED; self.queries * c_total];
        let mut masks = vec![-SATURATED; self.queries * plane];
        class[self.background as usize - 1] = SATURATED;
        for q in self.objects.len() + 1..self.queries {
            class[q * c_total + c_total - 1] = SATURATED;
        }
        for (i, o) in self.objects.iter().enumerate() {
            class[(i + 1) * c_total + o.class as usize - 1] = SATURATED;
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                if self.in_ood(y, x) {
                    continue;
                }
                let q = self
                    .objects
                    .iter()
                    .position(|o| o.rect.contains(y, x))
                    .map_or(0, |i| i + 1);
                masks[q * plane + p] = SATURATED;
            }
        }
        SampleTensor::new(
            self.queries,
            c_total,
            self.dims(),
            class,
            masks,
            TransformDescriptor::IDENTITY,
        )
        .expect("ideal sample is well formed")
    }
}

fn place(
    rng: &mut SplitMix64,
    config: &SceneConfig,
    taken: &[Rect],
    fits: &dyn Fn(&Rect) -> bool,
    index: usize,
) -> Result<Rect> {
    for _ in 0..MAX_ATTEMPTS {
        let h = rng.range(config.min_size, config.max_size);
        let w = rng.range(config.min_size, config.max_size);
        if h > config.height || w > config.width {
            continue;
        }
        let r = Rect {
            y: rng.range(0, config.height - h),
            x: rng.range(0, config.width - w),
            h,
            w,
        };
        if fits(&r) && taken.iter().all(|t| t.separated(&r, GAP)) {
            return Ok(r);
        }
    }
    Err(Error::Unplaceable(index))
}

fn build_scene(seed: u64, config: &SceneConfig, fits: &dyn Fn(&Rect) -> bool) -> Result<Scene> {
    config.validate()?;
    let mut rng = SplitMix64::derive(seed, 1);
    let candidates: Vec<u16> = (1..=config.classes).filter(|&k| k != config.background).collect();
    let mut rects = Vec::with_capacity(config.n_objects);
    let mut objects = Vec::with_capacity(config.n_objects);
    let mut next_instance: BTreeMap<u16, u16> = BTreeMap::new();
    for i in 0..config.n_objects {
        let rect = place(&mut rng, config, &rects, fits, i)?;
        let class = candidates[rng.range(0, candidates.len() - 1)];
        let instance = if config.things.contains(&class) {
            let n = next_instance.entry(class).or_insert(0);
            *n += 1;
            *n
        } else {
            0
        };
        rects.push(rect);
        objects.push(SceneObject { rect, class, instance });
    }
    // A separate stream keeps the in-distribution objects identical with or without the OOD twin.
    let ood = if config.ood {
        let mut ood_rng = SplitMix64::derive(seed, 2);
        Some(place(&mut ood_rng, config, &rects, &|_| true, config.n_objects)?)
    } else {
        None
    };
    Ok(Scene {
        height: config.height,
        width: config.width,
        queries: config.queries,
        classes: config.classes,
        background: config.background,
        objects,
        ood,
    })
}

pub fn gen_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    build_scene(seed, config, &|_| true)
}

/// Current frame plus `k` prior frames and exact backward flows into the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// Index 0 is the current frame, index j the frame j steps earlier.
    pub frames: Vec<Scene>,
    pub flows: BTreeMap<u8, FlowField>,
}

impl Sequence {
    pub fn current(&self) -> &Scene {
        &self.frames[0]
    }

    pub fn prior_frames(&self) -> u8 {
        (self.frames.len() - 1) as u8
    }
}

/// Objects translate by `velocity = (dx, dy)` pixels per frame; the unseen-class
/// object, if any, exists only in the current frame.
///
/// Flow at an object pixel points to where the object was; background pixels
/// that were covered in the prior frame are marked invalid.
pub fn gen_sequence(seed: u64, config: &SceneConfig, k: u8, velocity: (i64, i64)) -> Result<Sequence> {
    let (vx, vy) = velocity;
    let (h, w) = (config.height, config.width);
    let in_all_frames = move |r: &Rect| (1..=k as i64).all(|j| r.shifted(-vy * j, -vx * j, h, w).is_some());
    let current = build_scene(seed, config, &in_all_frames)?;
    let mut frames = vec![current.clone()];
    let mut flows = BTreeMap::new();
    for j in 1..=k as i64 {
        let mut prior = current.clone();
        prior.ood = None;
        for o in &mut prior.objects {
            o.rect = o
                .rect
                .shifted(-vy * j, -vx * j, h, w)
                .expect("placement keeps objects in frame");
        }
        let mut disp = vec![0f32; 2 * h * w];
        let mut valid = vec![true; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if current.object_at(y, x).is_some() {
                    disp[2 * p] = (-vx * j) as f32;
                    disp[2 * p + 1] = (-vy * j) as f32;
                } else if prior.object_at(y, x).is_some() {
                    valid[p] = false;
                }
            }
        }
        flows.insert(j as u8, FlowField::new(h, w, disp, valid)?);
        frames.push(prior);
    }
    Ok(Sequence { frames, flows })
}

/// Perturbations applied by [`perturb_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Noise {
    /// Standard deviation of additive logit noise.
    pub logit_sigma: f32,
    /// Maximum per-query mask translation in pixels.
    pub jitter: usize,
    pub shuffle: bool,
}

fn translate_plane(src: &[f32], (h, w): (usize, usize), dy: i64, dx: i64) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        let sy = (y - dy).clamp(0, h as i64 - 1) as usize;
        for x in 0..w as i64 {
            let sx = (x - dx).clamp(0, w as i64 - 1) as usize;
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Adds noise, jitters each mask by an integer translation and shuffles queries.
///
/// Returns the perturbed sample and the permutation `perm` with original query
/// `a` now in slot `perm[a]`.
pub fn perturb_sample(ideal: &SampleTensor, seed: u64, noise: &Noise) -> (SampleTensor, Vec<usize>) {
    let mut rng = SplitMix64::derive(seed, 3);
    let dims = ideal.dims();
    let plane = ideal.pixels();
    let sigma = noise.logit_sigma as f64;
    let class: Vec<f32> = ideal
        .class_logits()
        .iter()
        .map(|&v| (v as f64 + sigma * rng.normal()) as f32)
        .collect();
    let mut masks = Vec::with_capacity(ideal.queries() * plane);
    for q in 0..ideal.queries() {
        let j = noise.jitter as i64;
        let dy = rng.range(0, 2 * noise.jitter) as i64 - j;
        let dx = rng.range(0, 2 * noise.jitter) as i64 - j;
        let moved = translate_plane(ideal.mask(q), dims, dy, dx);
        masks.extend(moved.into_iter().map(|v| (v as f64 + sigma * rng.normal()) as f32));
    }
    let mut s = SampleTensor::new(ideal.queries(), ideal.c_total(), dims, class, masks, ideal.transform())
        .expect("perturbation keeps the shape");
    let mut perm: Vec<usize> = (0..ideal.queries()).collect();
    if noise.shuffle {
        rng.shuffle(&mut perm);
        s.scatter_queries(&perm);
    }
    (s, perm)
}

/// Generates plausible (imperfect) network outputs for synthetic scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    /// Logit of the predicted class (others sit at 0).
    pub class_logit: f32,
    /// Magnitude of mask logits inside and outside a predicted region.
    pub mask_logit: f32,
    /// Per-member Gaussian noise on every logit.
    pub logit_sigma: f32,
    /// Per-member object mask translation, at most this many pixels.
    pub jitter: usize,
    /// Standard deviation of class logits for the unseen-class object.
    pub ood_sigma: f32,
    pub shuffle: bool,
}

impl Default for Simulator {
    fn default() -> Self {
        Self {
            class_logit: 6.0,
            mask_logit: 8.0,
            logit_sigma: 0.5,
            jitter: 1,
            ood_sigma: 3.0,
            shuffle: true,
        }
    }
}

/// Seed of one member: a function of the image seed, its descriptor and dropout pass.
pub fn member_seed(seed: u64, d: TransformDescriptor, pass: usize) -> u64 {
    let tag = (d.kind_bits() as u64) << 56
        | (d.frame_offset() as u64) << 48
        | (d.factor().to_bits() as u64) << 16
        | pass as u64;
    SplitMix64::derive(seed, tag).next_u64()
}

impl Simulator {
    /// One member as the network would emit it: predicted in the frame of `scene`
    /// and then flipped/rescaled as `descriptor` says.
    pub fn member(&self, scene: &Scene, descriptor: TransformDescriptor, seed: u64) -> SampleTensor {
        let mut rng = SplitMix64::derive(seed, 4);
        let (h, w) = scene.dims();
        let plane = h * w;
        let c_total = scene.c_total();
        let p = scene.queries;
        let sigma = self.logit_sigma as f64;
        let mut class = vec![0f32; p * c_total];
        let mut regions: Vec<Option<Rect>> = vec![None; p];
        class[scene.background as usize - 1] = self.class_logit;
        for (i, o) in scene.objects.iter().enumerate() {
            class[(i + 1) * c_total + o.class as usize - 1] = self.class_logit;
            let j = self.jitter as i64;
            let dy = rng.range(0, 2 * self.jitter) as i64 - j;
            let dx = rng.range(0, 2 * self.jitter) as i64 - j;
            regions[i + 1] = Some(o.rect.shifted(dy, dx, h, w).unwrap_or(o.rect));
        }
        let mut next = scene.objects.len() + 1;
        if let Some(r) = scene.ood {
            for k in 0..c_total - 1 {
                class[next * c_total + k] = (self.ood_sigma as f64 * rng.normal()) as f32;
            }
            regions[next] = Some(r);
            next += 1;
        }
        for q in next..p {
            class[q * c_total + c_total - 1] = self.class_logit;
        }
        for v in class.iter_mut() {
            *v = (*v as f64 + sigma * rng.normal()) as f32;
        }
        let m = self.mask_logit;
        let mut masks = vec![-m; p * plane];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let covered = scene.object_at(y, x).is_some() || scene.in_ood(y, x);
                if !covered {
                    masks[i] = m;
                }
                for (q, r) in regions.iter().enumerate() {
                    if r.is_some_and(|r| r.contains(y, x)) {
                        masks[q * plane + i] = m;
                    }
                }
            }
        }
        for v in masks.iter_mut() {
            *v = (*v as f64 + sigma * rng.normal()) as f32;
        }
        let mut dims = (h, w);
        if let Some(f) = descriptor.scale {
            let target = crate::model::scaled_dims((h, w), f);
            let mut resized = Vec::with_capacity(p * target.0 * target.1);
            for q in 0..p {
                resized.extend(resize_bilinear(&masks[q * plane..(q + 1) * plane], (h, w), target));
            }
            masks = resized;
            dims = target;
        }
        if descriptor.hflip {
            for row in masks.chunks_exact_mut(dims.1) {
                row.reverse();
            }
        }
        let mut s =
            SampleTensor::new(p, c_total, dims, class, masks, descriptor).expect("simulated sample is well formed");
        if self.shuffle {
            let mut perm: Vec<usize> = (0..p).collect();
            rng.shuffle(&mut perm);
            s.scatter_queries(&perm);
        }
        s
    }

    /// All members of a prediction-model configuration, in configuration order.
    ///
    /// Dropout pass 0 is the deterministic pass used when `mc = 0`; passes
    /// 1..=mc are the stochastic ones.
    pub fn ensemble(&self, seq: &Sequence, config: &PredictionConfig, seed: u64) -> Result<Vec<SampleTensor>> {
        if config.prior_frames > seq.prior_frames() {
            return Err(Error::MissingFlow(config.prior_frames));
        }
        let mut out = Vec::with_capacity(config.sample_count());
        let mut descriptors = config.descriptors();
        descriptors.dedup();
        for d in descriptors {
            let scene = &seq.frames[d.frame_offset() as usize];
            let passes: Vec<usize> = if config.mc == 0 {
                vec![0]
            } else {
                (1..=config.mc).collect()
            };
            for pass in passes {
                out.push(self.member(scene, d, member_seed(seed, d, pass)));
            }
        }
        Ok(out)
    }
}
