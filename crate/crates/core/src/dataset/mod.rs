//! Region data model, bundle persistence, the planted synthetic world and
//! train/validation/test splitting.

mod io;
mod split;
mod synth;

pub use io::{read_bundle, write_bundle, BUNDLE_VERSION, IMAGES_FILE, MANIFEST_FILE, REGIONS_FILE};
pub use split::{split_regions, Split, SplitAssignment};
pub use synth::{generate_world, SyntheticWorldConfig, DESCRIPTOR_WORDS, INDICATORS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Aggregate flows into and out of a region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mobility {
    pub m_in: u64,
    pub m_out: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionRecord {
    pub region_id: u32,
    /// Count per POI type; length is the bundle-wide `poi_types`.
    pub poi_counts: Vec<u32>,
    pub mobility: Mobility,
    /// Category tokens, one list per POI.
    pub poi_categories: Vec<Vec<String>>,
    /// Free-text comment token streams (word-vector training only).
    pub comments: Vec<Vec<String>>,
    pub sv_images: Vec<Tensor<f32>>,
    pub rv_image: Tensor<f32>,
    /// Raw indicator values; the log transform happens at evaluation time.
    pub indicators: BTreeMap<String, f64>,
    /// Planted cluster label, when the bundle is synthetic.
    pub latent_cluster: Option<usize>,
}

/// Immutable collection of regions sharing POI-type count and image size.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub poi_types: usize,
    pub image_dims: ImageDims,
    pub seed: u64,
    pub regions: Vec<RegionRecord>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image_dims.shape();
        for r in &self.regions {
            if r.poi_counts.len() != self.poi_types {
                return Err(Error::contract(format!(
                    "region {} has {} POI counts, bundle has K={}",
                    r.region_id,
                    r.poi_counts.len(),
                    self.poi_types
                )));
            }
            if r.sv_images.is_empty() {
                return Err(Error::contract(format!("region {} has no street-view images", r.region_id)));
            }
            for img in r.sv_images.iter().chain(std::iter::once(&r.rv_image)) {
                if img.shape() != shape {
                    return Err(Error::dim("region image", img.shape(), &shape));
                }
            }
        }
        Ok(())
    }

    /// Indicator names present on every region, sorted.
    pub fn indicator_names(&self) -> Vec<String> {
        let Some(first) = self.regions.first() else {
            return Vec::new();
        };
        first
            .indicators
            .keys()
            .filter(|k| self.regions.iter().all(|r| r.indicators.contains_key(*k)))
            .cloned()
            .collect()
    }

    /// Planted labels, if every region carries one.
    pub fn latent_labels(&self) -> Option<Vec<usize>> {
        self.regions.iter().map(|r| r.latent_cluster).collect()
    }

    /// Log-scale targets for one indicator, in region order.
    pub fn log_targets(&self, indicator: &str) -> Result<Vec<f64>> {
        self.regions
            .iter()
            .map(|r| {
                let v = r.indicators.get(indicator).ok_or_else(|| {
                    Error::contract(format!("region {} lacks indicator `{indicator}`", r.region_id))
                })?;
                log_transform(*v)
            })
            .collect()
    }
}

/// `ln(1 + value)`; indicators may legitimately be zero.
pub fn log_transform(value: f64) -> Result<f64> {
    if value.is_nan() || value < 0.0 {
        return Err(Error::contract(format!("log_transform of negative value {value}")));
    }
    Ok(value.ln_1p())
}
