//! Bundle directory layout:
//!
//! * `regions.jsonl`: one JSON record per region (everything but images)
//! * `images.mscl`: `sv/<region>/<idx>` and `rv/<region>` tensors
//! * `manifest.txt`: `key=value` lines (format version, K, image dims, ...)

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, ImageDims, Mobility, RegionRecord};
use crate::error::{Error, Result};
use crate::tensor::{mscl, Tensor};

pub const REGIONS_FILE: &str = "regions.jsonl";
pub const IMAGES_FILE: &str = "images.mscl";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RegionLine {
    id: u32,
    poi_counts: Vec<u32>,
    mobility: [u64; 2],
    categories: Vec<Vec<String>>,
    comments: Vec<Vec<String>>,
    indicators: BTreeMap<String, f64>,
    cluster: Option<usize>,
    sv_images: usize,
}

pub fn write_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut lines = Vec::new();
    let mut images: Vec<(String, Tensor<f32>)> = Vec::new();
    for r in &bundle.regions {
        let line = RegionLine {
            id: r.region_id,
            poi_counts: r.poi_counts.clone(),
            mobility: [r.mobility.m_in, r.mobility.m_out],
            categories: r.poi_categories.clone(),
            comments: r.comments.clone(),
            indicators: r.indicators.clone(),
            cluster: r.latent_cluster,
            sv_images: r.sv_images.len(),
        };
        serde_json::to_writer(&mut lines, &line)?;
        lines.push(b'\n');
        for (k, img) in r.sv_images.iter().enumerate() {
            images.push((format!("sv/{}/{k}", r.region_id), img.clone()));
        }
        images.push((format!("rv/{}", r.region_id), r.rv_image.clone()));
    }
    fs::write(dir.join(REGIONS_FILE), lines)?;
    mscl::write_file(dir.join(IMAGES_FILE), &images)?;

    let d = bundle.image_dims;
    let mut manifest = fs::File::create(dir.join(MANIFEST_FILE))?;
    writeln!(manifest, "format_version={BUNDLE_VERSION}")?;
    writeln!(manifest, "K={}", bundle.poi_types)?;
    writeln!(manifest, "channels={}", d.channels)?;
    writeln!(manifest, "height={}", d.height)?;
    writeln!(manifest, "width={}", d.width)?;
    writeln!(manifest, "n_regions={}", bundle.len())?;
    writeln!(manifest, "seed={}", bundle.seed)?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed.split_once('=').ok_or_else(|| Error::Format {
                offset,
                reason: format!("manifest line without '=': {trimmed}"),
            })?;
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

fn manifest_num<T: std::str::FromStr>(m: &HashMap<String, String>, key: &str) -> Result<T> {
    m.get(key)
        .ok_or_else(|| Error::Format {
            offset: 0,
            reason: format!("manifest missing `{key}`"),
        })?
        .parse()
        .map_err(|_| Error::Format {
            offset: 0,
            reason: format!("manifest `{key}` is not a number"),
        })
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let manifest = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let version: u32 = manifest_num(&manifest, "format_version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let image_dims = ImageDims {
        channels: manifest_num(&manifest, "channels")?,
        height: manifest_num(&manifest, "height")?,
        width: manifest_num(&manifest, "width")?,
    };
    let poi_types: usize = manifest_num(&manifest, "K")?;
    let n_regions: usize = manifest_num(&manifest, "n_regions")?;
    let seed: u64 = manifest_num(&manifest, "seed")?;

    let mut images: HashMap<String, Tensor<f32>> = mscl::read_file(dir.join(IMAGES_FILE))?.into_iter().collect();

    let text = fs::read(dir.join(REGIONS_FILE))?;
    let mut regions = Vec::with_capacity(n_regions);
    let mut offset = 0u64;
    for raw in text.split_inclusive(|&b| b == b'\n') {
        let line_start = offset;
        offset += raw.len() as u64;
        let body = raw.strip_suffix(b"\n").unwrap_or(raw);
        if body.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        if !raw.ends_with(b"\n") {
            return Err(Error::Format {
                offset: line_start,
                reason: "truncated region record (missing newline)".into(),
            });
        }
        let line: RegionLine = serde_json::from_slice(body).map_err(|e| Error::Format {
            offset: line_start,
            reason: format!("bad region record: {e}"),
        })?;
        let mut take = |name: String| {
            images.remove(&name).ok_or_else(|| Error::Format {
                offset: line_start,
                reason: format!("image `{name}` missing from {IMAGES_FILE}"),
            })
        };
        let sv_images = (0..line.sv_images)
            .map(|k| take(format!("sv/{}/{k}", line.id)))
            .collect::<Result<Vec<_>>>()?;
        let rv_image = take(format!("rv/{}", line.id))?;
        regions.push(RegionRecord {
            region_id: line.id,
            poi_counts: line.poi_counts,
            mobility: Mobility {
                m_in: line.mobility[0],
                m_out: line.mobility[1],
            },
            poi_categories: line.categories,
            comments: line.comments,
            sv_images,
            rv_image,
            indicators: line.indicators,
            latent_cluster: line.cluster,
        });
    }
    if regions.len() != n_regions {
        return Err(Error::Format {
            offset,
            reason: format!("manifest declares {n_regions} regions, found {}", regions.len()),
        });
    }
    if let Some(extra) = images.keys().next() {
        return Err(Error::Format {
            offset: 0,
            reason: format!("unreferenced image `{extra}` in {IMAGES_FILE}"),
        });
    }
    let bundle = DatasetBundle {
        poi_types,
        image_dims,
        seed,
        regions,
    };
    bundle.validate().map_err(|e| Error::Format {
        offset: 0,
        reason: e.to_string(),
    })?;
    Ok(bundle)
}
