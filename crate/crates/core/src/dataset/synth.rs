//! Planted synthetic world.
//!
//! Every region belongs to one latent cluster with an intensity in `[0, 1]`.
//! POI counts, mobility, imagery, category text and indicators are all
//! drawn from cluster-specific distributions, so the latent structure is
//! recoverable from each modality and the indicators are monotone in the
//! cluster intensity.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, ImageDims, Mobility, RegionRecord};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const TYPE_WORDS: [&str; 12] = [
    "restaurant", "cafe", "school", "hospital", "park", "office", "mall", "hotel", "bank", "gym",
    "market", "museum",
];

/// Descriptor tokens attached to every POI's category list.
pub const DESCRIPTOR_WORDS: [&str; 12] = [
    "cheap", "luxury", "family", "nightlife", "quiet", "busy", "historic", "modern", "green",
    "industrial", "tourist", "local",
];

const FILLER_WORDS: [&str; 8] = ["good", "nice", "service", "staff", "price", "place", "visit", "recommend"];

/// Names of the synthetic indicators, all monotone in cluster intensity.
pub const INDICATORS: [&str; 3] = ["crime_count", "housing_price", "population_density"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub n_regions: usize,
    pub n_clusters: usize,
    pub poi_types: usize,
    pub image: ImageDims,
    pub sv_images_min: usize,
    pub sv_images_max: usize,
    /// Std. dev. of per-type POI count noise.
    pub count_noise: f64,
    /// Std. dev. of in/out flow noise.
    pub flow_noise: f64,
    /// Std. dev. of remote-sensing pixel noise.
    pub pixel_noise: f64,
    /// Std. dev. of street-view pixel noise.
    pub sv_pixel_noise: f64,
    /// Std. dev. of log-scale indicator noise.
    pub indicator_noise: f64,
    pub comments_per_region: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            n_regions: 150,
            n_clusters: 3,
            poi_types: 12,
            image: ImageDims {
                channels: 3,
                height: 32,
                width: 32,
            },
            sv_images_min: 2,
            sv_images_max: 4,
            count_noise: 2.0,
            flow_noise: 60.0,
            pixel_noise: 0.3,
            sv_pixel_noise: 0.3,
            indicator_noise: 0.15,
            comments_per_region: 3,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_clusters == 0 || self.n_regions < 3 * self.n_clusters {
            return bad(format!(
                "n_regions ({}) must be at least 3 * n_clusters ({})",
                self.n_regions, self.n_clusters
            ));
        }
        if self.poi_types == 0 {
            return bad("poi_types must be positive".into());
        }
        if self.image.channels == 0 || self.image.height < 4 || self.image.width < 4 {
            return bad(format!("image dims {:?} too small", self.image));
        }
        if self.sv_images_min == 0 || self.sv_images_max < self.sv_images_min {
            return bad("need 1 <= sv_images_min <= sv_images_max".into());
        }
        for (name, v) in [
            ("count_noise", self.count_noise),
            ("flow_noise", self.flow_noise),
            ("pixel_noise", self.pixel_noise),
            ("sv_pixel_noise", self.sv_pixel_noise),
            ("indicator_noise", self.indicator_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Intensity of cluster `c`, evenly spaced on `[0, 1]`.
    pub fn intensity(&self, c: usize) -> f64 {
        if self.n_clusters == 1 {
            0.5
        } else {
            c as f64 / (self.n_clusters - 1) as f64
        }
    }
}

/// Per-cluster parameters, drawn once per world.
struct ClusterProfile {
    intensity: f64,
    poi_rates: Vec<f64>,
    flow_mean: (f64, f64),
    descriptor_weights: Vec<f64>,
    sv_angle: f64,
    sv_freq: f64,
    sv_tint: [f64; 3],
    rv_cell: usize,
    rv_density: f64,
    rv_tint: [f64; 3],
}

fn type_word(k: usize) -> String {
    TYPE_WORDS
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("poi_type_{k}"))
}

fn profiles(cfg: &SyntheticWorldConfig, rng: &mut Rng) -> Vec<ClusterProfile> {
    let nc = cfg.n_clusters;
    // Each POI type has one cluster it is characteristic of.
    let mut affinity: Vec<usize> = (0..cfg.poi_types).map(|k| k % nc).collect();
    affinity.shuffle(rng);
    (0..nc)
        .map(|c| {
            let intensity = cfg.intensity(c);
            let poi_rates = (0..cfg.poi_types)
                .map(|k| {
                    let base = rng.random_range(2.0..6.0);
                    let boost = if affinity[k] == c { 12.0 } else { 0.0 };
                    (base + boost) * (1.0 + 0.5 * intensity)
                })
                .collect();
            let descriptor_weights = (0..DESCRIPTOR_WORDS.len())
                .map(|j| if j % nc == c { 6.0 } else { 1.0 })
                .collect();
            let phase = c as f64 / nc as f64;
            ClusterProfile {
                intensity,
                poi_rates,
                flow_mean: (300.0 + 900.0 * intensity, 280.0 + 860.0 * intensity),
                descriptor_weights,
                sv_angle: PI * phase,
                sv_freq: 2.0 + 1.5 * c as f64,
                sv_tint: [0, 1, 2].map(|ch| 0.25 * (2.0 * PI * (phase + ch as f64 / 3.0)).cos()),
                rv_cell: [8, 4, 2][c % 3],
                rv_density: 0.2 + 0.6 * intensity,
                rv_tint: [0, 1, 2].map(|ch| 0.25 * (2.0 * PI * (phase + 0.5 + ch as f64 / 3.0)).sin()),
            }
        })
        .collect()
}

fn gaussian(rng: &mut Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("sd is finite and non-negative").sample(rng)
}

/// Oriented sinusoidal stripes with a random phase.
fn render_sv(p: &ClusterProfile, dims: ImageDims, noise: f64, rng: &mut Rng) -> Tensor<f32> {
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cos, sin) = (p.sv_angle.cos(), p.sv_angle.sin());
    let mut data = Vec::with_capacity(dims.numel());
    for ch in 0..dims.channels {
        let tint = p.sv_tint[ch % 3];
        let amp = 0.6 + 0.2 * (ch % 3) as f64;
        for y in 0..dims.height {
            for x in 0..dims.width {
                let u = (x as f64 * cos + y as f64 * sin) / dims.width as f64;
                let v = tint + amp * (2.0 * PI * p.sv_freq * u + phase).sin() + gaussian(rng, noise);
                data.push(v as f32);
            }
        }
    }
    Tensor::new(dims.shape().to_vec(), data).expect("finite pixels")
}

/// Block layout: cells of a cluster-specific size are built up with a
/// cluster-specific probability.
fn render_rv(p: &ClusterProfile, dims: ImageDims, noise: f64, rng: &mut Rng) -> Tensor<f32> {
    let cell = p.rv_cell.min(dims.height).min(dims.width).max(1);
    let (gy, gx) = (dims.height.div_ceil(cell), dims.width.div_ceil(cell));
    let built: Vec<bool> = (0..gy * gx).map(|_| rng.random::<f64>() < p.rv_density).collect();
    let mut data = Vec::with_capacity(dims.numel());
    for ch in 0..dims.channels {
        let tint = p.rv_tint[ch % 3];
        for y in 0..dims.height {
            for x in 0..dims.width {
                let b = built[(y / cell) * gx + x / cell];
                let level = if b { 0.8 } else { -0.8 };
                data.push((tint + level + gaussian(rng, noise)) as f32);
            }
        }
    }
    Tensor::new(dims.shape().to_vec(), data).expect("finite pixels")
}

/// Deterministic planted world: a pure function of `cfg`.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = rng::rng(cfg.seed);
    let profiles = profiles(cfg, &mut rng);

    let mut labels: Vec<usize> = (0..cfg.n_regions).map(|i| i % cfg.n_clusters).collect();
    labels.shuffle(&mut rng);

    let descriptor_dists: Vec<WeightedIndex<f64>> = profiles
        .iter()
        .map(|p| WeightedIndex::new(&p.descriptor_weights).expect("positive weights"))
        .collect();

    let mut regions = Vec::with_capacity(cfg.n_regions);
    for (i, &c) in labels.iter().enumerate() {
        let p = &profiles[c];
        let poi_counts: Vec<u32> = p
            .poi_rates
            .iter()
            .map(|&rate| (rate + gaussian(&mut rng, cfg.count_noise)).round().max(0.0) as u32)
            .collect();
        let mobility = Mobility {
            m_in: (p.flow_mean.0 + gaussian(&mut rng, cfg.flow_noise)).round().max(0.0) as u64,
            m_out: (p.flow_mean.1 + gaussian(&mut rng, cfg.flow_noise)).round().max(0.0) as u64,
        };

        let mut poi_categories = Vec::new();
        for (k, &count) in poi_counts.iter().enumerate() {
            for _ in 0..count {
                let d = DESCRIPTOR_WORDS[descriptor_dists[c].sample(&mut rng)];
                poi_categories.push(vec![type_word(k), d.to_string()]);
            }
        }
        poi_categories.shuffle(&mut rng);

        let comments = (0..cfg.comments_per_region)
            .map(|_| {
                (0..8)
                    .map(|_| {
                        if rng.random::<f64>() < 0.5 {
                            DESCRIPTOR_WORDS[descriptor_dists[c].sample(&mut rng)].to_string()
                        } else {
                            FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string()
                        }
                    })
                    .collect()
            })
            .collect();

        let n_sv = rng.random_range(cfg.sv_images_min..=cfg.sv_images_max);
        let sv_images = (0..n_sv)
            .map(|_| render_sv(p, cfg.image, cfg.sv_pixel_noise, &mut rng))
            .collect();
        let rv_image = render_rv(p, cfg.image, cfg.pixel_noise, &mut rng);

        let s = p.intensity;
        let mut indicators = BTreeMap::new();
        indicators.insert(
            "population_density".to_string(),
            800.0 * (2.0 * s + gaussian(&mut rng, cfg.indicator_noise)).exp(),
        );
        indicators.insert(
            "housing_price".to_string(),
            20_000.0 * (1.0 * s + gaussian(&mut rng, cfg.indicator_noise)).exp(),
        );
        let crime_rate = 1.0 + 12.0 * s;
        let crime = if cfg.indicator_noise == 0.0 {
            crime_rate.round()
        } else {
            Poisson::new(crime_rate).expect("positive rate").sample(&mut rng)
        };
        indicators.insert("crime_count".to_string(), crime);

        regions.push(RegionRecord {
            region_id: i as u32,
            poi_counts,
            mobility,
            poi_categories,
            comments,
            sv_images,
            rv_image,
            indicators,
            latent_cluster: Some(c),
        });
    }

    let bundle = DatasetBundle {
        poi_types: cfg.poi_types,
        image_dims: cfg.image,
        seed: cfg.seed,
        regions,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            n_regions: 30,
            image: ImageDims {
                channels: 3,
                height: 8,
                width: 8,
            },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&SyntheticWorldConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_clusters_are_identical() {
        let cfg = SyntheticWorldConfig {
            count_noise: 0.0,
            flow_noise: 0.0,
            pixel_noise: 0.0,
            sv_pixel_noise: 0.0,
            indicator_noise: 0.0,
            ..small()
        };
        let b = generate_world(&cfg).unwrap();
        for r in &b.regions {
            for s in &b.regions {
                if r.latent_cluster == s.latent_cluster {
                    assert_eq!(r.poi_counts, s.poi_counts);
                    assert_eq!(r.mobility, s.mobility);
                }
            }
        }
    }

    #[test]
    fn config_errors() {
        let cfg = SyntheticWorldConfig {
            n_regions: 8,
            ..small()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticWorldConfig {
            flow_noise: -1.0,
            ..small()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_and_indicators() {
        let b = generate_world(&small()).unwrap();
        assert_eq!(b.len(), 30);
        let mut names = b.indicator_names();
        names.sort();
        assert_eq!(names, INDICATORS.to_vec());
        for r in &b.regions {
            assert!((2..=4).contains(&r.sv_images.len()));
            assert_eq!(r.poi_categories.len() as u32, r.poi_counts.iter().sum::<u32>());
            assert!(r.indicators.values().all(|&v| v >= 0.0));
        }
    }
}
