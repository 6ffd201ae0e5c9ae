//! Image-level scores from pixel-level uncertainty maps.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Orientation, UncertaintyMap};

pub const DEFAULT_PATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PixelAgg {
    ImageMean,
    ImageSum,
    Patch(usize),
}

impl fmt::Display for PixelAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PixelAgg::ImageMean => f.write_str("image-mean"),
            PixelAgg::ImageSum => f.write_str("image-sum"),
            PixelAgg::Patch(n) => write!(f, "patch:{n}"),
        }
    }
}

impl FromStr for PixelAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-mean" => Ok(PixelAgg::ImageMean),
            "image-sum" => Ok(PixelAgg::ImageSum),
            "patch" => Ok(PixelAgg::Patch(DEFAULT_PATCH)),
            _ => {
                let n = s
                    .strip_prefix("patch:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown pixel aggregation {s:?}")))?;
                Ok(PixelAgg::Patch(n))
            }
        }
    }
}

/// One image-level score with the orientation of the map it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScore {
    pub value: f64,
    pub orientation: Orientation,
}

impl ImageScore {
    /// Higher means more confident: confidence maps pass through, uncertainty is negated.
    pub fn confidence(&self) -> f64 {
        match self.orientation {
            Orientation::Confidence => self.value,
            Orientation::Uncertainty => -self.value,
        }
    }

    /// Higher means more uncertain.
    pub fn uncertainty(&self) -> f64 {
        -self.confidence()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    Mean,
    Sum,
}

pub fn image_aggregate(u: &UncertaintyMap, mode: ImageMode) -> f64 {
    let sum: f64 = u.values().iter().sum();
    match mode {
        ImageMode::Sum => sum,
        ImageMode::Mean => sum / u.values().len() as f64,
    }
}

/// Most extreme mean over non-overlapping `patch x patch` tiles (ragged edge tiles kept).
///
/// The maximum tile mean for uncertainty maps, the minimum for confidence maps.
pub fn patch_aggregate(u: &UncertaintyMap, patch: usize) -> f64 {
    let patch = patch.max(1);
    let (h, w) = u.dims();
    let values = u.values();
    let pick: fn(f64, f64) -> f64 = match u.orientation() {
        Orientation::Uncertainty => f64::max,
        Orientation::Confidence => f64::min,
    };
    let mut best: Option<f64> = None;
    for y0 in (0..h).step_by(patch) {
        for x0 in (0..w).step_by(patch) {
            let (y1, x1) = ((y0 + patch).min(h), (x0 + patch).min(w));
            let mut sum = 0.0;
            for y in y0..y1 {
                sum += values[y * w + x0..y * w + x1].iter().sum::<f64>();
            }
            let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
            best = Some(best.map_or(mean, |b| pick(b, mean)));
        }
    }
    best.expect("maps have at least one pixel")
}

pub fn aggregate(u: &UncertaintyMap, agg: PixelAgg) -> ImageScore {
    let value = match agg {
        PixelAgg::ImageMean => image_aggregate(u, ImageMode::Mean),
        PixelAgg::ImageSum => image_aggregate(u, ImageMode::Sum),
        PixelAgg::Patch(n) => patch_aggregate(u, n),
    };
    ImageScore {
        value,
        orientation: u.orientation(),
    }
}
