//! Synthetic datasets in the on-disk layout read by the evaluator.
//!
//! ```text
//! <out>/dataset.json          class table
//! <out>/manifest.jsonl        one record per image
//! <out>/samples/<id>.segu     ensemble container
//! <out>/gt/<id>.segl, .segp   semantic and panoptic ground truth
//! <out>/flows/<id>_<j>.segf   flow from prior frame j into the current frame
//! ```
//!
//! Each container stores, per member transform, the deterministic pass first
//! and then `mc` stochastic passes, so any configuration with at most `mc`
//! passes, `frames` prior frames and a subset of the TTA transforms can be
//! evaluated from the same files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{PredictionConfig, Tta};
use crate::error::{Error, Result};
use crate::io::{self, DatasetInfo, ManifestRecord, SampleWriter};
use crate::model::FlowField;
use crate::synth::{gen_sequence, member_seed, SceneConfig, Simulator, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub seed: u64,
    /// Manifest records, clean and OOD together.
    pub scenes: usize,
    /// Share of records that are OOD twins of a clean record (at most half).
    pub ood_fraction: f64,
    pub frames: u8,
    /// Stochastic passes stored per transform, in addition to the deterministic one.
    pub mc: usize,
    pub tta: Tta,
    /// Object motion `(dx, dy)` in pixels per frame.
    pub velocity: (i64, i64),
    /// Constant horizontal error added to every valid flow vector.
    pub flow_error: f32,
    pub scene: SceneConfig,
    pub simulator: Simulator,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 8,
            ood_fraction: 0.0,
            frames: 0,
            mc: 0,
            tta: Tta::None,
            velocity: (1, 0),
            flow_error: 0.0,
            scene: SceneConfig::default(),
            simulator: Simulator::default(),
        }
    }
}

impl SynthOptions {
    pub fn ood_count(&self) -> usize {
        ((self.scenes as f64 * self.ood_fraction).round() as usize).min(self.scenes / 2)
    }
}

/// Adds `dx` to every valid displacement.
pub fn offset_flow(flow: &FlowField, dx: f32) -> FlowField {
    let (h, w) = flow.dims();
    let mut disp = flow.displacement().to_vec();
    for (p, &ok) in flow.validity().iter().enumerate() {
        if ok {
            disp[2 * p] += dx;
        }
    }
    FlowField::new(h, w, disp, flow.validity().to_vec()).expect("same shape")
}

fn image_seed(seed: u64, index: usize) -> u64 {
    SplitMix64::derive(seed, 0x5CE0_0000 + index as u64).next_u64()
}

fn write_image(dir: &Path, id: &str, seed: u64, ood: bool, opts: &SynthOptions) -> Result<ManifestRecord> {
    let config = SceneConfig {
        ood,
        ..opts.scene.clone()
    };
    let seq = gen_sequence(seed, &config, opts.frames, opts.velocity)?;
    let scene = seq.current();
    let samples = PathBuf::from("samples").join(format!("{id}.segu"));
    let mut writer = SampleWriter::create(&dir.join(&samples), scene.queries, scene.c_total(), scene.dims())?;
    let mut descriptors = PredictionConfig {
        mc: 0,
        prior_frames: opts.frames,
        tta: opts.tta,
    }
    .descriptors();
    descriptors.dedup();
    for d in descriptors {
        let frame = &seq.frames[d.frame_offset() as usize];
        for pass in 0..=opts.mc {
            writer.write(&opts.simulator.member(frame, d, member_seed(seed, d, pass)))?;
        }
    }
    writer.finish()?;

    let gt_semantic = PathBuf::from("gt").join(format!("{id}.segl"));
    let gt_panoptic = PathBuf::from("gt").join(format!("{id}.segp"));
    io::write_semantic(&dir.join(&gt_semantic), &scene.gt_semantic())?;
    io::write_panoptic(&dir.join(&gt_panoptic), &scene.gt_panoptic())?;
    let mut flows = Vec::with_capacity(opts.frames as usize);
    for (j, flow) in &seq.flows {
        let path = PathBuf::from("flows").join(format!("{id}_{j}.segf"));
        let flow = if opts.flow_error != 0.0 {
            offset_flow(flow, opts.flow_error)
        } else {
            flow.clone()
        };
        io::write_flow(&dir.join(&path), &flow)?;
        flows.push(path);
    }
    Ok(ManifestRecord {
        id: id.to_string(),
        samples,
        gt_semantic: Some(gt_semantic),
        gt_panoptic: Some(gt_panoptic),
        flows,
        is_ood: ood,
        pair_id: None,
    })
}

/// Writes a full synthetic dataset into `dir` and returns its manifest records.
///
/// The first `scenes - n_ood` records are clean scenes; each of the remaining
/// `n_ood` records is the OOD twin of one clean scene (same objects, one
/// extra unseen-class rectangle) and names it in `pair_id`.
pub fn write_dataset(dir: &Path, opts: &SynthOptions) -> Result<Vec<ManifestRecord>> {
    if !(0.0..=1.0).contains(&opts.ood_fraction) {
        return Err(Error::InvalidArgument(format!(
            "OOD fraction {} outside [0, 1]",
            opts.ood_fraction
        )));
    }
    for sub in ["samples", "gt", "flows"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let n_ood = opts.ood_count();
    let n_clean = opts.scenes - n_ood;
    let mut records = Vec::with_capacity(opts.scenes);
    for i in 0..n_clean {
        records.push(write_image(
            dir,
            &format!("scene{i:04}"),
            image_seed(opts.seed, i),
            false,
            opts,
        )?);
    }
    for i in 0..n_ood {
        let mut r = write_image(dir, &format!("scene{i:04}_ood"), image_seed(opts.seed, i), true, opts)?;
        r.pair_id = Some(format!("scene{i:04}"));
        records.push(r);
    }
    io::write_manifest(&dir.join("manifest.jsonl"), &records)?;
    let info = DatasetInfo {
        num_classes: opts.scene.classes,
        thing_classes: opts.scene.things.iter().copied().collect(),
        class_names: (1..=opts.scene.classes).map(|k| format!("class{k}")).collect(),
    };
    info.save(&dir.join("dataset.json"))?;
    Ok(records)
}
