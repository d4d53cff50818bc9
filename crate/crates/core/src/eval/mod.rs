//! Downstream evaluation: indicator regression, PCA + k-means cluster
//! analysis and the variant ablation.

mod kmeans;
mod metrics;
mod mlp;
mod pca;

pub use kmeans::{kmeans, KMeans, MAX_LLOYD_ITERS};
pub use metrics::{adjusted_rand_index, r_squared, rmse};
pub use mlp::{init_mlp, mlp_forward, train_mlp_regressor, MlpConfig, Prediction, RegressionReport, SplitMetrics};
pub use pca::{pca_project, Pca, POWER_MAX_ITERS, POWER_TOLERANCE};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{DatasetBundle, Split, SplitAssignment};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    /// PCA coordinates per region (padded with 0 when rank deficient).
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// Agreement with the planted clusters, when known.
    pub ari: Option<f64>,
    pub rank_deficient: bool,
}

/// 2-D PCA of the embeddings followed by k-means on the coordinates.
pub fn cluster_report<T: Float>(
    table: &EmbeddingTable<T>,
    k: usize,
    seed: u64,
    truth: Option<&[usize]>,
) -> Result<ClusterReport> {
    let rows: Vec<Vec<f64>> = (0..table.len()).map(|i| table.row(i).iter().map(|v| v.as_f64()).collect()).collect();
    let pca = pca_project(&rows, 2)?;
    let coords: Vec<[f64; 2]> = pca
        .coords
        .iter()
        .map(|c| [c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0)])
        .collect();
    let pts: Vec<Vec<f64>> = coords.iter().map(|c| c.to_vec()).collect();
    let km = kmeans(&pts, k, seed)?;
    let ari = truth.map(|t| adjusted_rand_index(&km.labels, t)).transpose()?;
    Ok(ClusterReport {
        coords,
        labels: km.labels,
        ari,
        rank_deficient: pca.rank_deficient,
    })
}

pub fn write_clusters_csv(path: impl AsRef<Path>, region_ids: &[u32], report: &ClusterReport) -> Result<()> {
    let mut s = String::from("region_id,pc1,pc2,label\n");
    for ((id, c), l) in region_ids.iter().zip(&report.coords).zip(&report.labels) {
        writeln!(s, "{id},{},{},{l}", c[0], c[1]).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Standard-normal embeddings, the null control for regression.
pub fn random_embeddings(n: usize, dim: usize, seed: u64) -> Result<EmbeddingTable<f64>> {
    let mut r = rng::rng(seed);
    EmbeddingTable::new(dim, (0..n * dim).map(|_| StandardNormal.sample(&mut r)).collect())
}

/// One (representation, indicator, seed) regression.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub indicator: String,
    pub seed: u64,
    pub report: RegressionReport,
}

impl AblationRow {
    pub fn test_r2(&self) -> Option<f64> {
        self.report.split(Split::Test).r2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// Representations in the order they were given.
    pub variants: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean test R² over every indicator and seed (undefined values skipped).
    pub fn mean_test_r2(&self, variant: &str) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).filter_map(AblationRow::test_r2).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `wins[a][b]`: number of (indicator, seed) jobs where `a` has the
    /// strictly higher test R².
    pub fn win_matrix(&self) -> Vec<Vec<usize>> {
        let mut by_key: BTreeMap<(&str, u64), BTreeMap<&str, f64>> = BTreeMap::new();
        for r in &self.rows {
            if let Some(v) = r.test_r2() {
                by_key.entry((&r.indicator, r.seed)).or_default().insert(&r.variant, v);
            }
        }
        let k = self.variants.len();
        let mut wins = vec![vec![0; k]; k];
        for scores in by_key.values() {
            for (a, va) in self.variants.iter().enumerate() {
                for (b, vb) in self.variants.iter().enumerate() {
                    if let (Some(x), Some(y)) = (scores.get(va.as_str()), scores.get(vb.as_str())) {
                        if x > y {
                            wins[a][b] += 1;
                        }
                    }
                }
            }
        }
        wins
    }

    /// `variant,split,R2,RMSE,seed` rows for one indicator.
    pub fn indicator_csv(&self, indicator: &str) -> String {
        let mut s = String::from("variant,split,R2,RMSE,seed\n");
        for r in self.rows.iter().filter(|r| r.indicator == indicator) {
            for m in &r.report.metrics {
                let r2 = m.r2.map_or_else(|| "undefined".to_string(), |v| v.to_string());
                writeln!(s, "{},{},{r2},{},{}", r.variant, m.split.name(), m.rmse, r.seed).expect("string write");
            }
        }
        s
    }

    /// Every row in long form: `variant,indicator,split,R2,RMSE,seed`.
    pub fn long_csv(&self) -> String {
        let mut s = String::from("variant,indicator,split,R2,RMSE,seed\n");
        for r in &self.rows {
            for m in &r.report.metrics {
                let r2 = m.r2.map_or_else(|| "undefined".to_string(), |v| v.to_string());
                writeln!(s, "{},{},{},{r2},{},{}", r.variant, r.indicator, m.split.name(), m.rmse, r.seed).expect("string write");
            }
        }
        s
    }

    /// `variant,mean_test_R2,wins_vs_<other>...`.
    pub fn ablation_csv(&self) -> String {
        let mut s = String::from("variant,mean_test_R2");
        for v in &self.variants {
            write!(s, ",wins_vs_{v}").expect("string write");
        }
        s.push('\n');
        let wins = self.win_matrix();
        for (a, v) in self.variants.iter().enumerate() {
            let mean = self.mean_test_r2(v).map_or_else(|| "undefined".to_string(), |m| m.to_string());
            write!(s, "{v},{mean}").expect("string write");
            for w in &wins[a] {
                write!(s, ",{w}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `report_<indicator>.csv` per indicator and `ablation.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut indicators: Vec<&str> = self.rows.iter().map(|r| r.indicator.as_str()).collect();
        indicators.sort();
        indicators.dedup();
        for ind in indicators {
            fs::write(dir.join(format!("report_{ind}.csv")), self.indicator_csv(ind))?;
        }
        fs::write(dir.join("ablation.csv"), self.ablation_csv())?;
        Ok(())
    }
}

/// Regresses every indicator from every representation under every seed.
/// Jobs are independent and run through `exec`; rows come back in
/// (representation, indicator, seed) order.
pub fn ablation_suite<T: Float>(
    tables: &[(String, EmbeddingTable<T>)],
    bundle: &DatasetBundle,
    splits: &SplitAssignment,
    mlp: &MlpConfig,
    seeds: &[u64],
    exec: Exec,
) -> Result<AblationReport> {
    if tables.is_empty() || seeds.is_empty() {
        return Err(Error::contract("ablation needs at least one representation and one seed"));
    }
    let indicators = bundle.indicator_names();
    let targets: Vec<Vec<f64>> = indicators.iter().map(|i| bundle.log_targets(i)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for t in 0..tables.len() {
        for i in 0..indicators.len() {
            for &s in seeds {
                jobs.push((t, i, s));
            }
        }
    }
    let results = exec.map(jobs.len(), |j| {
        let (t, i, seed) = jobs[j];
        let cfg = MlpConfig { seed, ..mlp.clone() };
        train_mlp_regressor(&tables[t].1, &indicators[i], &targets[i], splits, &cfg).map(|report| AblationRow {
            variant: tables[t].0.clone(),
            indicator: indicators[i].clone(),
            seed,
            report,
        })
    });
    Ok(AblationReport {
        variants: tables.iter().map(|(n, _)| n.clone()).collect(),
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_world, split_regions, ImageDims, SyntheticWorldConfig};

    #[test]
    fn ablation_bookkeeping() {
        let bundle = generate_world(&SyntheticWorldConfig {
            n_regions: 30,
            image: ImageDims {
                channels: 1,
                height: 4,
                width: 4,
            },
            ..Default::default()
        })
        .unwrap();
        let splits = split_regions(30, [0.6, 0.2, 0.2], 0).unwrap();
        let tables = vec![
            ("a".to_string(), random_embeddings(30, 3, 1).unwrap()),
            ("b".to_string(), random_embeddings(30, 2, 2).unwrap()),
        ];
        let mlp = MlpConfig {
            max_epochs: 5,
            ..Default::default()
        };
        let seq = ablation_suite(&tables, &bundle, &splits, &mlp, &[1, 2], Exec::Sequential).unwrap();
        let par = ablation_suite(&tables, &bundle, &splits, &mlp, &[1, 2], Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.rows.len(), 2 * 3 * 2);
        let wins = seq.win_matrix();
        assert_eq!(wins[0][1] + wins[1][0], 6);
        let csv = seq.ablation_csv();
        assert!(csv.starts_with("variant,mean_test_R2,wins_vs_a,wins_vs_b\n"));
        assert_eq!(csv.lines().count(), 3);
        let rep = seq.indicator_csv("crime_count");
        assert_eq!(rep.lines().count(), 1 + 2 * 2 * 3);
    }

    #[test]
    fn random_control_is_near_zero() {
        // the null model should not explain a target it never saw
        let n = 150;
        let splits = split_regions(n, [0.6, 0.2, 0.2], 3).unwrap();
        let target = random_embeddings(n, 1, 99).unwrap();
        let mut r2s = Vec::new();
        for seed in 0..10 {
            let emb = random_embeddings(n, 32, seed).unwrap();
            let rep = train_mlp_regressor(&emb, "noise", target.data(), &splits, &MlpConfig { seed, ..Default::default() }).unwrap();
            r2s.push(rep.split(Split::Test).r2.unwrap());
        }
        let mean = r2s.iter().sum::<f64>() / r2s.len() as f64;
        assert!(mean.abs() < 0.15, "{r2s:?}");
    }
}
