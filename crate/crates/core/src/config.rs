//! Flat `key = value` pipeline configuration.
//!
//! Every key has a default; unknown or repeated keys are rejected. Stage
//! seeds are derived from the global `seed` unless a key pins them.

use std::fmt;
use std::str::FromStr;

use crate::dataset::SyntheticWorldConfig;
use crate::error::{Error, Result};
use crate::eval::MlpConfig;
use crate::fusion::AlignmentConfig;
use crate::rng::derive_seed;
use crate::similarity::{MiningPolicy, SimilarityOptions};
use crate::text::SkipGramConfig;
use crate::visual::EncoderConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got `{s}`"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Seeds the world independently of `seed` when set.
    pub world_seed: Option<u64>,
    pub world: SyntheticWorldConfig,
    pub split: [f64; 3],
    pub mining: MiningPolicy,
    pub similarity: SimilarityOptions,
    /// Shared by both encoders; `input` follows the world image size.
    pub visual: EncoderConfig,
    pub text: SkipGramConfig,
    pub fusion: AlignmentConfig,
    pub mlp: MlpConfig,
    /// Regression seeds per (variant, indicator).
    pub eval_seeds: usize,
    pub clusters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            world_seed: None,
            world: SyntheticWorldConfig::default(),
            split: [0.6, 0.2, 0.2],
            mining: MiningPolicy::default(),
            similarity: SimilarityOptions::default(),
            visual: EncoderConfig::default(),
            text: SkipGramConfig::default(),
            fusion: AlignmentConfig::default(),
            mlp: MlpConfig::default(),
            eval_seeds: 1,
            clusters: 3,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false, got `{value}`"))),
    }
}

fn join<V: fmt::Display>(xs: &[V]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("invalid config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "world.seed" => self.world_seed = Some(parse(key, v)?),
            "world.n_regions" => self.world.n_regions = parse(key, v)?,
            "world.n_clusters" => self.world.n_clusters = parse(key, v)?,
            "world.poi_types" => self.world.poi_types = parse(key, v)?,
            "world.channels" => self.world.image.channels = parse(key, v)?,
            "world.height" => self.world.image.height = parse(key, v)?,
            "world.width" => self.world.image.width = parse(key, v)?,
            "world.sv_images_min" => self.world.sv_images_min = parse(key, v)?,
            "world.sv_images_max" => self.world.sv_images_max = parse(key, v)?,
            "world.count_noise" => self.world.count_noise = parse(key, v)?,
            "world.flow_noise" => self.world.flow_noise = parse(key, v)?,
            "world.pixel_noise" => self.world.pixel_noise = parse(key, v)?,
            "world.sv_pixel_noise" => self.world.sv_pixel_noise = parse(key, v)?,
            "world.indicator_noise" => self.world.indicator_noise = parse(key, v)?,
            "world.comments_per_region" => self.world.comments_per_region = parse(key, v)?,
            "split.train" => self.split[0] = parse(key, v)?,
            "split.validation" => self.split[1] = parse(key, v)?,
            "split.test" => self.split[2] = parse(key, v)?,
            "mining.top_k_positive" => self.mining.top_k_positive = parse(key, v)?,
            "mining.negative_quantile" => self.mining.negative_quantile = parse(key, v)?,
            "mining.triplets_per_anchor" => self.mining.triplets_per_anchor = parse(key, v)?,
            "mining.epsilon" => self.similarity.epsilon = parse(key, v)?,
            "mining.normalize_poi" => self.similarity.normalize_poi = parse_bool(key, v)?,
            "visual.channels" => {
                self.visual.channels = v
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "visual.kernel" => self.visual.kernel = parse(key, v)?,
            "visual.stride" => self.visual.stride = parse(key, v)?,
            "visual.padding" => self.visual.padding = parse(key, v)?,
            "visual.pool" => self.visual.pool = parse(key, v)?,
            "visual.embedding_dim" => self.visual.embedding_dim = parse(key, v)?,
            "visual.margin" => self.visual.margin = parse(key, v)?,
            "visual.batch_size" => self.visual.batch_size = parse(key, v)?,
            "visual.lr" => self.visual.lr = parse(key, v)?,
            "visual.epochs" => self.visual.epochs = parse(key, v)?,
            "text.dim" => self.text.dim = parse(key, v)?,
            "text.window" => self.text.window = parse(key, v)?,
            "text.lr" => self.text.lr = parse(key, v)?,
            "text.epochs" => self.text.epochs = parse(key, v)?,
            "text.min_count" => self.text.min_count = parse(key, v)?,
            "fusion.batch_size" => self.fusion.batch_size = parse(key, v)?,
            "fusion.temperature" => self.fusion.temperature = parse(key, v)?,
            "fusion.epochs" => self.fusion.epochs = parse(key, v)?,
            "fusion.lr" => self.fusion.lr = parse(key, v)?,
            "fusion.hidden_dim" => {
                self.fusion.hidden_dim = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "fusion.freeze_encoders" => self.fusion.freeze_encoders = parse_bool(key, v)?,
            "fusion.symmetric" => self.fusion.symmetric = parse_bool(key, v)?,
            "fusion.text_adapter" => self.fusion.text_adapter = parse_bool(key, v)?,
            "eval.hidden" => self.mlp.hidden = parse(key, v)?,
            "eval.lr" => self.mlp.lr = parse(key, v)?,
            "eval.batch_size" => self.mlp.batch_size = parse(key, v)?,
            "eval.max_epochs" => self.mlp.max_epochs = parse(key, v)?,
            "eval.patience" => self.mlp.patience = parse(key, v)?,
            "eval.seeds" => self.eval_seeds = parse(key, v)?,
            "eval.clusters" => self.clusters = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.world;
        let vis = &self.visual;
        let f = &self.fusion;
        vec![
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("world.seed", self.world_seed().to_string()),
            ("world.n_regions", w.n_regions.to_string()),
            ("world.n_clusters", w.n_clusters.to_string()),
            ("world.poi_types", w.poi_types.to_string()),
            ("world.channels", w.image.channels.to_string()),
            ("world.height", w.image.height.to_string()),
            ("world.width", w.image.width.to_string()),
            ("world.sv_images_min", w.sv_images_min.to_string()),
            ("world.sv_images_max", w.sv_images_max.to_string()),
            ("world.count_noise", w.count_noise.to_string()),
            ("world.flow_noise", w.flow_noise.to_string()),
            ("world.pixel_noise", w.pixel_noise.to_string()),
            ("world.sv_pixel_noise", w.sv_pixel_noise.to_string()),
            ("world.indicator_noise", w.indicator_noise.to_string()),
            ("world.comments_per_region", w.comments_per_region.to_string()),
            ("split.train", self.split[0].to_string()),
            ("split.validation", self.split[1].to_string()),
            ("split.test", self.split[2].to_string()),
            ("mining.top_k_positive", self.mining.top_k_positive.to_string()),
            ("mining.negative_quantile", self.mining.negative_quantile.to_string()),
            ("mining.triplets_per_anchor", self.mining.triplets_per_anchor.to_string()),
            ("mining.epsilon", self.similarity.epsilon.to_string()),
            ("mining.normalize_poi", self.similarity.normalize_poi.to_string()),
            ("visual.channels", join(&vis.channels)),
            ("visual.kernel", vis.kernel.to_string()),
            ("visual.stride", vis.stride.to_string()),
            ("visual.padding", vis.padding.to_string()),
            ("visual.pool", vis.pool.to_string()),
            ("visual.embedding_dim", vis.embedding_dim.to_string()),
            ("visual.margin", vis.margin.to_string()),
            ("visual.batch_size", vis.batch_size.to_string()),
            ("visual.lr", vis.lr.to_string()),
            ("visual.epochs", vis.epochs.to_string()),
            ("text.dim", self.text.dim.to_string()),
            ("text.window", self.text.window.to_string()),
            ("text.lr", self.text.lr.to_string()),
            ("text.epochs", self.text.epochs.to_string()),
            ("text.min_count", self.text.min_count.to_string()),
            ("fusion.batch_size", f.batch_size.to_string()),
            ("fusion.temperature", f.temperature.to_string()),
            ("fusion.epochs", f.epochs.to_string()),
            ("fusion.lr", f.lr.to_string()),
            ("fusion.hidden_dim", f.hidden_dim.map_or_else(|| "auto".into(), |h| h.to_string())),
            ("fusion.freeze_encoders", f.freeze_encoders.to_string()),
            ("fusion.symmetric", f.symmetric.to_string()),
            ("fusion.text_adapter", f.text_adapter.to_string()),
            ("eval.hidden", self.mlp.hidden.to_string()),
            ("eval.lr", self.mlp.lr.to_string()),
            ("eval.batch_size", self.mlp.batch_size.to_string()),
            ("eval.max_epochs", self.mlp.max_epochs.to_string()),
            ("eval.patience", self.mlp.patience.to_string()),
            ("eval.seeds", self.eval_seeds.to_string()),
            ("eval.clusters", self.clusters.to_string()),
        ]
    }

    /// The effective configuration in the format [`PipelineConfig::parse`] reads.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        if self.split.iter().any(|r| !(0.0..=1.0).contains(r)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {:?} must lie in [0, 1] and sum to 1", self.split)));
        }
        self.mining.validate()?;
        if !(self.similarity.epsilon > 0.0) {
            return Err(Error::Config("mining.epsilon must be positive".into()));
        }
        self.visual_config().validate()?;
        self.text_config().validate()?;
        self.fusion_config().validate()?;
        if !self.fusion.text_adapter && self.text.dim != self.visual.embedding_dim {
            return Err(Error::Config(format!(
                "text.dim ({}) must equal visual.embedding_dim ({}) without the text adapter",
                self.text.dim, self.visual.embedding_dim
            )));
        }
        self.mlp.validate()?;
        if self.eval_seeds == 0 {
            return Err(Error::Config("eval.seeds must be at least 1".into()));
        }
        if self.clusters == 0 || self.clusters > self.world.n_regions {
            return Err(Error::Config(format!("eval.clusters must lie in 1..={}", self.world.n_regions)));
        }
        Ok(())
    }

    pub fn world_seed(&self) -> u64 {
        self.world_seed.unwrap_or(self.seed)
    }

    pub fn world_config(&self) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            seed: self.world_seed(),
            ..self.world.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn mining_policy(&self) -> MiningPolicy {
        MiningPolicy {
            seed: derive_seed(self.seed, "mining"),
            ..self.mining
        }
    }

    pub fn visual_config(&self) -> EncoderConfig {
        EncoderConfig {
            input: self.world.image,
            seed: derive_seed(self.seed, "visual"),
            ..self.visual.clone()
        }
    }

    pub fn text_config(&self) -> SkipGramConfig {
        SkipGramConfig {
            seed: derive_seed(self.seed, "text"),
            ..self.text.clone()
        }
    }

    pub fn fusion_config(&self) -> AlignmentConfig {
        AlignmentConfig {
            seed: derive_seed(self.seed, "fusion"),
            ..self.fusion.clone()
        }
    }

    /// Regression seeds for the evaluation suites.
    pub fn eval_seed_list(&self) -> Vec<u64> {
        let base = derive_seed(self.seed, "eval");
        (0..self.eval_seeds as u64).map(|i| base.wrapping_add(i)).collect()
    }

    pub fn cluster_seed(&self) -> u64 {
        derive_seed(self.seed, "clusters")
    }

    pub fn control_seed(&self) -> u64 {
        derive_seed(self.seed, "control")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 17;
        cfg.precision = Precision::F64;
        cfg.visual.channels = vec![4, 6, 8];
        cfg.fusion.hidden_dim = Some(12);
        cfg.world.pixel_noise = 0.125;
        let text = cfg.render();
        let back = PipelineConfig::parse(&text).unwrap();
        // world.seed is echoed explicitly
        assert_eq!(back.world_seed, Some(17));
        assert_eq!(PipelineConfig { world_seed: None, ..back }, cfg);
        assert_eq!(PipelineConfig::parse(&PipelineConfig::default().render()).unwrap().render(), PipelineConfig::default().render());
    }

    #[test]
    fn every_rendered_key_is_settable() {
        let cfg = PipelineConfig::default();
        for (k, v) in cfg.entries() {
            let mut c = PipelineConfig::default();
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let err = PipelineConfig::parse("seed = 1\nvisual.depth = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("visual.depth"), "{err}");
        assert!(PipelineConfig::parse("seed = 1\nseed = 2\n").unwrap_err().to_string().contains("duplicate"));
        assert!(PipelineConfig::parse("seed 1\n").is_err());
        assert!(PipelineConfig::parse("visual.lr = fast\n").is_err());
        assert!(PipelineConfig::parse("precision = f16\n").is_err());
        assert!(PipelineConfig::parse("split.train = 0.7\n").is_err());
        assert!(PipelineConfig::parse("fusion.text_adapter = false\ntext.dim = 8\n").is_err());
        assert!(PipelineConfig::parse("world.n_regions = 5\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = PipelineConfig::parse("# run\n\nseed = 9  # trailing\nvisual.channels = 4, 8\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.visual.channels, vec![4, 8]);
        assert_ne!(cfg.mining_policy().seed, cfg.visual_config().seed);
    }
}
