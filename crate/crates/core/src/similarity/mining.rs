use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use super::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Sv,
    Rv,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Sv => "SV",
            Modality::Rv => "RV",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "SV" | "sv" => Some(Modality::Sv),
            "RV" | "rv" => Some(Modality::Rv),
            _ => None,
        }
    }
}

/// Anchor/positive/negative region positions with the similarities that
/// selected them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiningPolicy {
    pub top_k_positive: usize,
    /// Fraction of each ranked row (from the bottom) eligible as negatives.
    pub negative_quantile: f64,
    pub triplets_per_anchor: usize,
    pub seed: u64,
}

impl Default for MiningPolicy {
    fn default() -> Self {
        Self {
            top_k_positive: 5,
            negative_quantile: 0.5,
            triplets_per_anchor: 4,
            seed: 0,
        }
    }
}

impl MiningPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.top_k_positive == 0 {
            return Err(Error::Config("top_k_positive must be at least 1".into()));
        }
        if !(self.negative_quantile > 0.0 && self.negative_quantile < 1.0) {
            return Err(Error::Config(format!(
                "negative_quantile must lie in (0, 1), got {}",
                self.negative_quantile
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinedTriplets {
    pub triplets: Vec<Triplet>,
    /// Anchors whose row had no negative strictly less similar than every
    /// positive; their draws come from the tied ranking.
    pub degenerate_anchors: Vec<usize>,
}

/// Other regions ordered by similarity descending, ties by ascending index.
fn ranking(matrix: &SimilarityMatrix, anchor: usize) -> Vec<usize> {
    let row = matrix.row(anchor);
    let mut others: Vec<usize> = (0..matrix.n).filter(|&j| j != anchor).collect();
    others.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    others
}

/// For each anchor: positives uniformly from its `top_k_positive` most
/// similar regions, negatives uniformly from the bottom
/// `negative_quantile` of its ranked row restricted to regions strictly less
/// similar than every positive. Each anchor draws from its own RNG stream.
pub fn mine_triplets(
    matrix: &SimilarityMatrix,
    policy: &MiningPolicy,
    modality: Modality,
    exec: Exec,
) -> Result<MinedTriplets> {
    policy.validate()?;
    let n = matrix.n;
    if n < policy.top_k_positive + 2 {
        return Err(Error::contract(format!(
            "mining needs at least top_k_positive + 2 = {} regions, got {n}",
            policy.top_k_positive + 2
        )));
    }
    let neg_len = (((n - 1) as f64) * policy.negative_quantile).ceil().max(1.0) as usize;

    let per_anchor = exec.map(n, |anchor| {
        let ranked = ranking(matrix, anchor);
        let row = matrix.row(anchor);
        let positives = &ranked[..policy.top_k_positive];
        let min_pos = row[positives[positives.len() - 1]];
        let tail = &ranked[n - 1 - neg_len..];
        let strict: Vec<usize> = tail.iter().copied().filter(|&j| row[j] < min_pos).collect();
        let degenerate = strict.is_empty();
        let negatives = if degenerate { tail.to_vec() } else { strict };

        let mut r = rng::stream_rng(policy.seed, anchor as u64);
        let mut out = Vec::with_capacity(policy.triplets_per_anchor);
        for _ in 0..policy.triplets_per_anchor {
            let p = positives[r.random_range(0..positives.len())];
            let neg = if degenerate {
                let pool: Vec<usize> = negatives.iter().copied().filter(|&j| j != p).collect();
                if pool.is_empty() {
                    *ranked.iter().rev().find(|&&j| j != p).expect("n >= 3")
                } else {
                    pool[r.random_range(0..pool.len())]
                }
            } else {
                negatives[r.random_range(0..negatives.len())]
            };
            out.push(Triplet {
                anchor,
                positive: p,
                negative: neg,
                lambda_pos: row[p],
                lambda_neg: row[neg],
                modality,
            });
        }
        (out, degenerate)
    });

    let mut triplets = Vec::with_capacity(n * policy.triplets_per_anchor);
    let mut degenerate_anchors = Vec::new();
    for (anchor, (ts, deg)) in per_anchor.into_iter().enumerate() {
        triplets.extend(ts);
        if deg {
            degenerate_anchors.push(anchor);
        }
    }
    Ok(MinedTriplets {
        triplets,
        degenerate_anchors,
    })
}

/// Writes `modality,anchor,positive,negative,lambda_pos,lambda_neg` with
/// region ids taken from `region_ids[position]`.
pub fn write_triplets_csv(path: impl AsRef<Path>, region_ids: &[u32], triplets: &[Triplet]) -> Result<()> {
    let mut s = String::from("modality,anchor,positive,negative,lambda_pos,lambda_neg\n");
    for t in triplets {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            t.modality.name(),
            region_ids[t.anchor],
            region_ids[t.positive],
            region_ids[t.negative],
            t.lambda_pos,
            t.lambda_neg
        )
        .expect("writing to a String");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a triplet CSV, mapping region ids back to positions.
pub fn read_triplets_csv(path: impl AsRef<Path>, region_ids: &[u32]) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path)?;
    let position = |id: &str, offset: u64| -> Result<usize> {
        let id: u32 = id.parse().map_err(|_| Error::Format {
            offset,
            reason: format!("bad region id `{id}`"),
        })?;
        region_ids.iter().position(|&r| r == id).ok_or_else(|| Error::Format {
            offset,
            reason: format!("unknown region id {id}"),
        })
    };
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() as u64 + 1;
        if i == 0 {
            if line != "modality,anchor,positive,negative,lambda_pos,lambda_neg" {
                return Err(Error::Format {
                    offset: 0,
                    reason: "unexpected triplets.csv header".into(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format {
                offset: at,
                reason: format!("expected 6 fields, got {}", f.len()),
            });
        }
        let modality = Modality::parse(f[0]).ok_or_else(|| Error::Format {
            offset: at,
            reason: format!("bad modality `{}`", f[0]),
        })?;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format {
                offset: at,
                reason: format!("bad similarity `{s}`"),
            })
        };
        out.push(Triplet {
            modality,
            anchor: position(f[1], at)?,
            positive: position(f[2], at)?,
            negative: position(f[3], at)?,
            lambda_pos: num(f[4])?,
            lambda_neg: num(f[5])?,
        });
    }
    Ok(out)
}
