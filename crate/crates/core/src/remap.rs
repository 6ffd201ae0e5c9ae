//! Cross-dataset class mappings for distribution-shift evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_panoptic, encode_panoptic, PanopticLabelMap, SemanticLabelMap, VOID};

const VIPER_TO_CITYSCAPES: &str = include_str!("../data/viper_to_cityscapes.json");
const CITYSCAPES_TO_VIPER: &str = include_str!("../data/cityscapes_to_viper.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub source_id: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_has_instances: Option<bool>,
    pub target_id: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_name: Option<String>,
    pub target_has_instances: bool,
}

/// Total map from source to target class ids; unlisted ids go to VOID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    entries: Vec<MappingEntry>,
    lookup: BTreeMap<u16, u16>,
    target_things: BTreeSet<u16>,
}

impl ClassMapping {
    pub fn new(entries: Vec<MappingEntry>) -> Result<Self> {
        let mut lookup = BTreeMap::new();
        let mut target_things = BTreeSet::new();
        let mut flags: BTreeMap<u16, bool> = BTreeMap::new();
        for e in &entries {
            if lookup.insert(e.source_id, e.target_id).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "source id {} mapped twice",
                    e.source_id
                )));
            }
            if e.target_id == VOID {
                continue;
            }
            if let Some(&prev) = flags.get(&e.target_id) {
                if prev != e.target_has_instances {
                    return Err(Error::InvalidArgument(format!(
                        "target id {} has conflicting instance flags",
                        e.target_id
                    )));
                }
            }
            flags.insert(e.target_id, e.target_has_instances);
            if e.target_has_instances {
                target_things.insert(e.target_id);
            }
        }
        Ok(Self {
            entries,
            lookup,
            target_things,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn viper_to_cityscapes() -> Self {
        Self::from_json(VIPER_TO_CITYSCAPES).expect("bundled mapping is valid")
    }

    pub fn cityscapes_to_viper() -> Self {
        Self::from_json(CITYSCAPES_TO_VIPER).expect("bundled mapping is valid")
    }

    /// Bundled mapping by name: `viper-to-cityscapes` or `cityscapes-to-viper`.
    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "viper-to-cityscapes" => Some(Self::viper_to_cityscapes()),
            "cityscapes-to-viper" => Some(Self::cityscapes_to_viper()),
            _ => None,
        }
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn map(&self, source: u16) -> u16 {
        self.lookup.get(&source).copied().unwrap_or(VOID)
    }

    pub fn target_has_instances(&self, target: u16) -> bool {
        self.target_things.contains(&target)
    }

    pub fn target_things(&self) -> &BTreeSet<u16> {
        &self.target_things
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }
}

pub fn remap_semantic(map: &SemanticLabelMap, mapping: &ClassMapping) -> SemanticLabelMap {
    let ids = map.ids().iter().map(|&id| mapping.map(id)).collect();
    SemanticLabelMap::new(map.height(), map.width(), ids).expect("same dimensions")
}

/// Remaps segment classes and reassigns instance ids.
///
/// Stuff targets get instance 0 (merging their segments). Thing targets keep
/// the source instance id when it is non-zero and still free, otherwise take
/// the smallest unused id, so every source segment stays a distinct segment.
pub fn remap_panoptic(map: &PanopticLabelMap, mapping: &ClassMapping) -> PanopticLabelMap {
    let segments = map.segment_ids();
    let mut used: BTreeMap<u16, BTreeSet<u16>> = BTreeMap::new();
    let mut assigned: BTreeMap<u32, u32> = BTreeMap::new();
    let mut deferred = Vec::new();
    for &seg in &segments {
        let (class, inst) = decode_panoptic(seg);
        let target = mapping.map(class);
        if target == VOID {
            assigned.insert(seg, 0);
        } else if !mapping.target_has_instances(target) {
            assigned.insert(seg, encode_panoptic(target, 0));
        } else if inst != 0 && used.entry(target).or_default().insert(inst) {
            assigned.insert(seg, encode_panoptic(target, inst));
        } else {
            deferred.push((seg, target));
        }
    }
    for (seg, target) in deferred {
        let taken = used.entry(target).or_default();
        let inst = (1..=u16::MAX)
            .find(|i| !taken.contains(i))
            .expect("instance ids exhausted");
        taken.insert(inst);
        assigned.insert(seg, encode_panoptic(target, inst));
    }
    let ids = map
        .ids()
        .iter()
        .map(|&id| if id == 0 { 0 } else { assigned[&id] })
        .collect();
    PanopticLabelMap::new(map.height(), map.width(), ids).expect("same dimensions")
}
