//! Dataset evaluation: per image align, aggregate, fuse and score; then
//! reduce to dataset metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::aggregate_stream;
use crate::align::{build_aligned_ensemble, AlignOptions, EnsembleMember, PredictionConfig};
use crate::error::{Error, Result};
use crate::fuse::{class_distribution_of, panoptic_inference_of, semantic_inference, PanopticParams};
use crate::io::{self, DatasetInfo, Manifest, ManifestRecord, SampleLocation, SampleReader};
use crate::metrics::{
    aurc, auroc, calib_samples_panoptic, calib_samples_semantic, confusion_matrix, miou, per_image_iou, pq_image,
    ConfusionMatrix, EceAccumulator, PqStats, ScoreRecord,
};
use crate::model::{Measure, PanopticLabelMap, SemanticLabelMap, TransformDescriptor};
use crate::pixagg::{aggregate, PixelAgg};
use crate::remap::{remap_panoptic, remap_semantic, ClassMapping};
use crate::uncertainty::{max_softmax_score, MeasureAccumulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Semantic,
    Panoptic,
    Both,
}

impl Domain {
    pub fn semantic(self) -> bool {
        matches!(self, Domain::Semantic | Domain::Both)
    }

    pub fn panoptic(self) -> bool {
        matches!(self, Domain::Panoptic | Domain::Both)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Semantic => "semantic",
            Domain::Panoptic => "panoptic",
            Domain::Both => "both",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Domain::Semantic),
            "panoptic" => Ok(Domain::Panoptic),
            "both" => Ok(Domain::Both),
            _ => Err(Error::InvalidArgument(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Failure,
    Calib,
    Ood,
    Seg,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Failure, Task::Calib, Task::Ood, Task::Seg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Failure => "failure",
            Task::Calib => "calib",
            Task::Ood => "ood",
            Task::Seg => "seg",
        }
    }

    /// Parses a comma-separated list; `all` selects every task.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Task>> {
        let mut out = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Task::ALL);
            } else {
                out.insert(part.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("no task selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

/// Everything that decides how a dataset is evaluated.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub tag: String,
    pub domain: Domain,
    pub tasks: BTreeSet<Task>,
    pub measures: Vec<Measure>,
    pub pixel_aggs: Vec<PixelAgg>,
    pub prediction: PredictionConfig,
    pub score_thresh: f64,
    pub overlap_thresh: f64,
    pub bins: usize,
    pub remap: Option<ClassMapping>,
    pub align: AlignOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tag: "default".into(),
            domain: Domain::Both,
            tasks: Task::ALL.into_iter().collect(),
            measures: Measure::ALL.to_vec(),
            pixel_aggs: vec![PixelAgg::ImageMean],
            prediction: PredictionConfig::BASELINE,
            score_thresh: 0.8,
            overlap_thresh: 0.8,
            bins: crate::metrics::DEFAULT_BINS,
            remap: None,
            align: AlignOptions::default(),
        }
    }
}

/// One image-level score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEntry {
    pub measure: Measure,
    pub pixel_agg: PixelAgg,
    /// Higher means more confident.
    pub confidence: f64,
}

/// Per-image results and the partial sums needed for dataset metrics.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub id: String,
    pub is_ood: bool,
    pub pair_id: Option<String>,
    pub samples: usize,
    pub iou: Option<f64>,
    pub pq: Option<f64>,
    pub scores: Vec<ScoreEntry>,
    pub confusion: Option<ConfusionMatrix>,
    pub pq_stats: Option<PqStats>,
    pub ece_semantic: Option<EceAccumulator>,
    pub ece_panoptic: Option<EceAccumulator>,
}

/// Picks container members for a configuration.
///
/// Members sharing a descriptor are dropout passes in file order: the first
/// is the deterministic pass (used when `mc = 0`), the next `mc` are the
/// stochastic ones.
pub fn select_members(locations: &[SampleLocation], config: &PredictionConfig) -> Result<Vec<SampleLocation>> {
    let mut groups: Vec<(TransformDescriptor, Vec<SampleLocation>)> = Vec::new();
    for loc in locations {
        match groups.iter_mut().find(|(d, _)| *d == loc.descriptor) {
            Some((_, g)) => g.push(*loc),
            None => groups.push((loc.descriptor, vec![*loc])),
        }
    }
    let mut wanted = config.descriptors();
    wanted.dedup();
    let mut out = Vec::with_capacity(config.sample_count());
    for d in wanted {
        let group = groups
            .iter()
            .find(|(g, _)| *g == d)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::InvalidArgument(format!("container has no member with transform {d}")))?;
        let range = if config.mc == 0 { 0..1 } else { 1..config.mc + 1 };
        if group.len() < range.end {
            return Err(Error::InvalidArgument(format!(
                "container has {} passes for transform {d}, configuration needs {}",
                group.len(),
                range.end
            )));
        }
        out.extend_from_slice(&group[range]);
    }
    Ok(out)
}

fn check_dims(what: &str, found: (usize, usize), frame: (usize, usize)) -> Result<()> {
    if found != frame {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {found:?}, samples are {frame:?}"
        )));
    }
    Ok(())
}

fn evaluation_classes(info: &DatasetInfo, remap: Option<&ClassMapping>) -> usize {
    let target = remap
        .map(|m| m.entries().iter().map(|e| e.target_id).max().unwrap_or(0))
        .unwrap_or(0);
    (info.num_classes.max(target)) as usize
}

pub fn evaluate_image(
    manifest: &Manifest,
    record: &ManifestRecord,
    info: &DatasetInfo,
    config: &EvalConfig,
) -> Result<ImageOutcome> {
    let path = manifest.resolve(&record.samples);
    let reader = SampleReader::open(&path)?;
    let header = *reader.header();
    if header.classes != info.num_classes as usize {
        return Err(Error::MixedClassCount {
            expected: info.num_classes as usize + 1,
            found: header.c_total,
        });
    }
    let frame = header.frame();
    let chosen = select_members(reader.locations(), &config.prediction)?;
    drop(reader);
    let mut flows = BTreeMap::new();
    for j in 1..=config.prediction.prior_frames {
        let f = record.flows.get(j as usize - 1).ok_or(Error::MissingFlow(j))?;
        flows.insert(j, io::read_flow(&manifest.resolve(f))?);
    }
    let members = chosen
        .into_iter()
        .map(|loc| {
            let path = path.clone();
            EnsembleMember::lazy(loc.descriptor, header.c_total, move || {
                io::load_sample(&path, &header, &loc)
            })
        })
        .collect();
    let ensemble = build_aligned_ensemble(members, flows, frame, config.align)?;
    let mut acc = MeasureAccumulator::new(config.measures.iter().copied(), frame, header.queries, header.classes);
    let agg = aggregate_stream(&ensemble, &mut [&mut acc])?;
    let fused = agg.mean.view();

    let things = info.things();
    let params = PanopticParams {
        score_thresh: config.score_thresh,
        overlap_thresh: config.overlap_thresh,
        things: things.clone(),
    };
    let dist = class_distribution_of(&fused).distribution;
    let confidence = max_softmax_score(&dist);
    let mut sem_pred = semantic_inference(&dist);
    let mut pan_pred = panoptic_inference_of(&fused, &params)?;
    let maps = acc.finalize(&fused, Some(&pan_pred), &things)?;
    if let Some(m) = &config.remap {
        sem_pred = remap_semantic(&sem_pred, m);
        pan_pred = remap_panoptic(&pan_pred, m);
    }

    let gt_pan: Option<PanopticLabelMap> = match &record.gt_panoptic {
        Some(p) => Some(io::read_panoptic(&manifest.resolve(p))?),
        None => None,
    };
    let gt_sem: Option<SemanticLabelMap> = match &record.gt_semantic {
        Some(p) => Some(io::read_semantic(&manifest.resolve(p))?),
        None => gt_pan.as_ref().map(PanopticLabelMap::to_semantic),
    };
    let classes = evaluation_classes(info, config.remap.as_ref());
    let calib = config.tasks.contains(&Task::Calib);
    let gt_only = config.remap.is_some();

    let mut out = ImageOutcome {
        id: record.id.clone(),
        is_ood: record.is_ood,
        pair_id: record.pair_id.clone(),
        samples: agg.samples,
        iou: None,
        pq: None,
        scores: Vec::new(),
        confusion: None,
        pq_stats: None,
        ece_semantic: None,
        ece_panoptic: None,
    };
    if let (true, Some(gt)) = (config.domain.semantic(), &gt_sem) {
        check_dims("semantic ground truth", gt.dims(), frame)?;
        out.confusion = Some(confusion_matrix(&sem_pred, gt, classes)?);
        out.iou = match per_image_iou(&sem_pred, gt, classes) {
            Ok(v) => Some(v),
            Err(Error::NoValidClasses) => None,
            Err(e) => return Err(e),
        };
        if calib {
            let mut e = EceAccumulator::new(config.bins)?;
            for s in calib_samples_semantic(&sem_pred, &confidence, gt)? {
                e.push(s)?;
            }
            out.ece_semantic = Some(e);
        }
    }
    if let (true, Some(gt)) = (config.domain.panoptic(), &gt_pan) {
        check_dims("panoptic ground truth", gt.dims(), frame)?;
        let img = pq_image(&pan_pred, gt)?;
        out.pq = img.stats.summary(gt_only).ok().map(|s| s.pq);
        if calib {
            let mut e = EceAccumulator::new(config.bins)?;
            for s in calib_samples_panoptic(&confidence, &pan_pred, gt, &img)? {
                e.push(s)?;
            }
            out.ece_panoptic = Some(e);
        }
        out.pq_stats = Some(img.stats);
    }
    // Spread measures of a single sample are constant zeros and carry no ranking.
    for map in maps.iter().filter(|m| !m.is_degenerate()) {
        for &agg in &config.pixel_aggs {
            out.scores.push(ScoreEntry {
                measure: map.measure(),
                pixel_agg: agg,
                confidence: aggregate(map, agg).confidence(),
            });
        }
    }
    Ok(out)
}

/// One dataset-level number, in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tag: String,
    pub config: String,
    pub samples: usize,
    pub task: String,
    pub metric: String,
    pub measure: String,
    pub pixel_agg: String,
    pub value: Option<f64>,
    pub error: String,
}

/// One image score, in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image_id: String,
    pub config: String,
    pub samples: usize,
    pub is_ood: bool,
    pub iou: Option<f64>,
    pub pq: Option<f64>,
    pub measure: String,
    pub pixel_agg: String,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub tag: String,
    pub config: String,
    pub samples: usize,
    pub images: Vec<ImageOutcome>,
    pub metrics: Vec<MetricRow>,
}

impl EvalReport {
    pub fn image_rows(&self) -> Vec<ImageRow> {
        let mut rows = Vec::new();
        for img in &self.images {
            let base = ImageRow {
                image_id: img.id.clone(),
                config: self.config.clone(),
                samples: img.samples,
                is_ood: img.is_ood,
                iou: img.iou,
                pq: img.pq,
                measure: String::new(),
                pixel_agg: String::new(),
                confidence: None,
            };
            if img.scores.is_empty() {
                rows.push(base);
                continue;
            }
            for s in &img.scores {
                rows.push(ImageRow {
                    measure: s.measure.to_string(),
                    pixel_agg: s.pixel_agg.to_string(),
                    confidence: Some(s.confidence),
                    ..base.clone()
                });
            }
        }
        rows
    }

    pub fn metric(&self, metric: &str, measure: Option<Measure>, agg: Option<PixelAgg>) -> Option<f64> {
        let measure = measure.map(|m| m.to_string()).unwrap_or_default();
        let agg = agg.map(|a| a.to_string()).unwrap_or_default();
        self.metrics
            .iter()
            .find(|r| r.metric == metric && r.measure == measure && r.pixel_agg == agg)
            .and_then(|r| r.value)
    }

    /// Writes `images.csv`, `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_csv(&dir.join("images.csv"), &self.image_rows())?;
        io::write_csv(&dir.join("metrics.csv"), &self.metrics)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            tag: &'a str,
            config: &'a str,
            samples: usize,
            images: usize,
            metrics: &'a [MetricRow],
        }
        io::write_json(
            &dir.join("summary.json"),
            &Summary {
                tag: &self.tag,
                config: &self.config,
                samples: self.samples,
                images: self.images.len(),
                metrics: &self.metrics,
            },
        )
    }
}

struct RowBuilder<'a> {
    config: &'a EvalConfig,
    name: String,
    samples: usize,
    rows: Vec<MetricRow>,
}

impl RowBuilder<'_> {
    fn push(&mut self, task: Task, metric: &str, key: Option<(Measure, PixelAgg)>, value: Result<f64>) {
        let (value, error) = match value {
            Ok(v) => (Some(v), String::new()),
            Err(e) => (None, e.to_string()),
        };
        self.rows.push(MetricRow {
            tag: self.config.tag.clone(),
            config: self.name.clone(),
            samples: self.samples,
            task: task.name().into(),
            metric: metric.into(),
            measure: key.map(|k| k.0.to_string()).unwrap_or_default(),
            pixel_agg: key.map(|k| k.1.to_string()).unwrap_or_default(),
            value,
            error,
        });
    }
}

fn sum_ece(parts: impl Iterator<Item = Option<EceAccumulator>>, bins: usize) -> Result<f64> {
    let mut total = EceAccumulator::new(bins)?;
    for p in parts.flatten() {
        total.merge(&p)?;
    }
    total.value()
}

/// Reduces per-image outcomes to dataset metrics.
///
/// Segmentation, calibration and failure detection use in-distribution images
/// only; OOD detection uses every image with `is_ood` as the positive label.
pub fn dataset_metrics(images: &[ImageOutcome], config: &EvalConfig) -> Vec<MetricRow> {
    let mut b = RowBuilder {
        config,
        name: config.prediction.to_string(),
        samples: config.prediction.sample_count(),
        rows: Vec::new(),
    };
    let id: Vec<&ImageOutcome> = images.iter().filter(|i| !i.is_ood).collect();
    let gt_only = config.remap.is_some();
    let sem = config.domain.semantic();
    let pan = config.domain.panoptic();
    let keys: Vec<(Measure, PixelAgg)> = config
        .measures
        .iter()
        .flat_map(|&m| config.pixel_aggs.iter().map(move |&a| (m, a)))
        .collect();
    let score_of = |img: &ImageOutcome, key: (Measure, PixelAgg)| {
        img.scores
            .iter()
            .find(|s| s.measure == key.0 && s.pixel_agg == key.1)
            .map(|s| s.confidence)
    };

    if config.tasks.contains(&Task::Seg) {
        if sem {
            let mut cm: Option<ConfusionMatrix> = None;
            let mut merge = || -> Result<f64> {
                for img in &id {
                    if let Some(c) = &img.confusion {
                        match cm.as_mut() {
                            Some(total) => total.add(c)?,
                            None => cm = Some(c.clone()),
                        }
                    }
                }
                miou(cm.as_ref().ok_or(Error::EmptyInput)?)
            };
            let v = merge();
            b.push(Task::Seg, "miou", None, v);
        }
        if pan {
            let mut stats = PqStats::default();
            let mut any = false;
            for img in &id {
                if let Some(s) = &img.pq_stats {
                    stats.add(s);
                    any = true;
                }
            }
            let summary = if any {
                stats.summary(gt_only)
            } else {
                Err(Error::EmptyInput)
            };
            match summary {
                Ok(s) => {
                    b.push(Task::Seg, "pq", None, Ok(s.pq));
                    b.push(Task::Seg, "sq", None, Ok(s.sq));
                    b.push(Task::Seg, "rq", None, Ok(s.rq));
                }
                Err(e) => b.push(Task::Seg, "pq", None, Err(e)),
            }
        }
    }
    if config.tasks.contains(&Task::Calib) {
        if sem {
            let v = sum_ece(id.iter().map(|i| i.ece_semantic.clone()), config.bins);
            b.push(Task::Calib, "ece_sem", None, v);
        }
        if pan {
            let v = sum_ece(id.iter().map(|i| i.ece_panoptic.clone()), config.bins);
            b.push(Task::Calib, "ece_pan", None, v);
        }
    }
    if config.tasks.contains(&Task::Failure) {
        for &key in &keys {
            type Getter = fn(&ImageOutcome) -> Option<f64>;
            let metrics: [(&str, bool, Getter); 2] = [("aurc_iou", sem, |i| i.iou), ("aurc_pq", pan, |i| i.pq)];
            for (name, on, get) in metrics {
                if !on {
                    continue;
                }
                let records: Vec<ScoreRecord> = id
                    .iter()
                    .filter_map(|img| Some(ScoreRecord::new(img.id.clone(), score_of(img, key)?, 1.0 - get(img)?)))
                    .collect();
                b.push(Task::Failure, name, Some(key), aurc(&records));
            }
        }
    }
    if config.tasks.contains(&Task::Ood) {
        for &key in &keys {
            let (scores, labels): (Vec<f64>, Vec<bool>) = images
                .iter()
                .filter_map(|img| Some((-score_of(img, key)?, img.is_ood)))
                .unzip();
            b.push(Task::Ood, "auroc", Some(key), auroc(&scores, &labels));
        }
    }
    b.rows
}

/// Evaluates every manifest record on the worker pool, then reduces in record order.
pub fn evaluate_dataset(manifest: &Manifest, info: &DatasetInfo, config: &EvalConfig) -> Result<EvalReport> {
    let images: Vec<ImageOutcome> = manifest
        .records
        .par_iter()
        .map(|r| {
            evaluate_image(manifest, r, info, config).map_err(|e| {
                log::error!("image {}: {e}", r.id);
                e
            })
        })
        .collect::<Result<_>>()?;
    let metrics = dataset_metrics(&images, config);
    Ok(EvalReport {
        tag: config.tag.clone(),
        config: config.prediction.to_string(),
        samples: config.prediction.sample_count(),
        images,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::Tta;

    fn loc(d: TransformDescriptor, offset: u64) -> SampleLocation {
        SampleLocation { descriptor: d, offset }
    }

    #[test]
    fn member_selection_follows_pass_convention() {
        let id = TransformDescriptor::IDENTITY;
        let fl = TransformDescriptor::hflip();
        let locs: Vec<_> = (0..4).map(|i| loc(id, i)).chain((4..8).map(|i| loc(fl, i))).collect();
        let base = select_members(&locs, &PredictionConfig::BASELINE).unwrap();
        assert_eq!(base.iter().map(|l| l.offset).collect::<Vec<_>>(), vec![0]);
        let mc = PredictionConfig {
            mc: 3,
            prior_frames: 0,
            tta: Tta::HFlip,
        };
        let chosen = select_members(&locs, &mc).unwrap();
        assert_eq!(
            chosen.iter().map(|l| l.offset).collect::<Vec<_>>(),
            vec![1, 2, 3, 5, 6, 7]
        );
        let too_many = PredictionConfig { mc: 4, ..mc };
        assert!(select_members(&locs, &too_many).is_err());
        let scaled = PredictionConfig {
            tta: Tta::Scale,
            ..PredictionConfig::BASELINE
        };
        assert!(select_members(&locs, &scaled).is_err());
    }

    #[test]
    fn task_and_domain_parsing() {
        assert_eq!(Task::parse_list("all").unwrap().len(), 4);
        assert_eq!(
            Task::parse_list("seg,ood").unwrap(),
            [Task::Seg, Task::Ood].into_iter().collect()
        );
        assert!(Task::parse_list("nope").is_err());
        assert_eq!("both".parse::<Domain>().unwrap(), Domain::Both);
        assert!("x".parse::<Domain>().is_err());
    }
}
