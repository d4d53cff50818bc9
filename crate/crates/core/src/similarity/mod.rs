//! Region similarity from mobility and POI distributions, and triplet
//! mining over the resulting similarity rows.

mod mining;

pub use mining::{mine_triplets, read_triplets_csv, write_triplets_csv, MinedTriplets, MiningPolicy, Modality, Triplet};

use crate::dataset::{DatasetBundle, Mobility};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Regularizer added to distances before inversion.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Mobility,
    Poi,
}

/// Euclidean distance between (in, out) flow pairs.
pub fn mobility_distance(a: Mobility, b: Mobility) -> f64 {
    let di = a.m_in as f64 - b.m_in as f64;
    let d_out = a.m_out as f64 - b.m_out as f64;
    (di * di + d_out * d_out).sqrt()
}

/// `1 / (dist + epsilon)`.
pub fn mobility_similarity(dist: f64, epsilon: f64) -> f64 {
    1.0 / (dist + epsilon)
}

/// Euclidean distance between POI-type count vectors.
pub fn poi_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("poi_distance", &[p.len()], &[q.len()]));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `1 / (dist + epsilon)`.
pub fn poi_similarity(dist: f64, epsilon: f64) -> f64 {
    1.0 / (dist + epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityOptions {
    pub epsilon: f64,
    /// Use POI-type proportions instead of raw counts.
    pub normalize_poi: bool,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            normalize_poi: false,
        }
    }
}

/// Dense symmetric matrix of pairwise similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    pub n: usize,
    pub epsilon: f64,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(kind: SimilarityKind, n: usize, epsilon: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::dim("similarity matrix", &[n, n], &[values.len()]));
        }
        Ok(Self {
            kind,
            n,
            epsilon,
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

fn poi_vectors(bundle: &DatasetBundle, normalize: bool) -> Vec<Vec<f64>> {
    bundle
        .regions
        .iter()
        .map(|r| {
            let v: Vec<f64> = r.poi_counts.iter().map(|&c| c as f64).collect();
            let total: f64 = v.iter().sum();
            if normalize && total > 0.0 {
                v.iter().map(|c| c / total).collect()
            } else {
                v
            }
        })
        .collect()
}

/// Pairwise similarity for every region pair; the diagonal is `1/epsilon`.
/// Rows are computed through `exec`.
pub fn similarity_matrix(
    bundle: &DatasetBundle,
    kind: SimilarityKind,
    opts: SimilarityOptions,
    exec: Exec,
) -> Result<SimilarityMatrix> {
    let n = bundle.len();
    if n == 0 {
        return Err(Error::contract("similarity_matrix on an empty bundle"));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config("similarity epsilon must be positive".into()));
    }
    let eps = opts.epsilon;
    let rows: Vec<Vec<f64>> = match kind {
        SimilarityKind::Mobility => {
            let flows: Vec<Mobility> = bundle.regions.iter().map(|r| r.mobility).collect();
            exec.map(n, |i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            1.0 / eps
                        } else {
                            mobility_similarity(mobility_distance(flows[i], flows[j]), eps)
                        }
                    })
                    .collect()
            })
        }
        SimilarityKind::Poi => {
            let vecs = poi_vectors(bundle, opts.normalize_poi);
            exec.map(n, |i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            1.0 / eps
                        } else {
                            let d = poi_distance(&vecs[i], &vecs[j]).expect("bundle validated K");
                            poi_similarity(d, eps)
                        }
                    })
                    .collect()
            })
        }
    };
    SimilarityMatrix::from_values(kind, n, eps, rows.concat())
}
