use crate::error::{Error, Result};

pub const POWER_TOLERANCE: f64 = 1e-9;
pub const POWER_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Share of total variance per returned component.
    pub explained: Vec<f64>,
    /// `[n][components.len()]` projections of the centered data.
    pub coords: Vec<Vec<f64>>,
    /// Fewer than `k` components carry variance.
    pub rank_deficient: bool,
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| c[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Top-`k` principal components of the rows of `x` (`n × d`) by power
/// iteration on the covariance with deflation.
pub fn pca_project(x: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = x.len();
    if k == 0 || n < k + 1 {
        return Err(Error::contract(format!("PCA with k = {k} needs at least {} points, got {n}", k + 1)));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::contract("PCA rows must share a positive dimension"));
    }
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / (n - 1) as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut rank_deficient = false;
    for c in 0..k.min(d) {
        // deterministic start that is unlikely to be orthogonal to any
        // eigenvector
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i + c) % 7) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..POWER_MAX_ITERS {
            let mut next = mat_vec(&cov, &v);
            for p in &components {
                let dot: f64 = next.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, pv) in next.iter_mut().zip(p) {
                    *x -= dot * pv;
                }
            }
            lambda = normalize(&mut next);
            if lambda == 0.0 {
                break;
            }
            let diff = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            v = next;
            if diff < POWER_TOLERANCE {
                break;
            }
        }
        if lambda <= 1e-12 * trace.max(f64::MIN_POSITIVE) {
            rank_deficient = true;
            break;
        }
        // sign convention: largest-magnitude entry positive
        let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda);
        components.push(v);
    }
    if components.len() < k {
        rank_deficient = true;
    }
    let coords = centered
        .iter()
        .map(|r| components.iter().map(|p| p.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let explained = eigenvalues
        .iter()
        .map(|l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        explained,
        coords,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    /// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
    fn jacobi(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        for _ in 0..100 {
            let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * d + j].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    let apq = a[p * d + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let (akp, akq) = (a[k * d + p], a[k * d + q]);
                        a[k * d + p] = c * akp - s * akq;
                        a[k * d + q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                        a[p * d + k] = c * apk - s * aqk;
                        a[q * d + k] = s * apk + c * aqk;
                    }
                    for k in 0..d {
                        let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                        v[k * d + p] = c * vkp - s * vkq;
                        v[k * d + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut pairs: Vec<(f64, Vec<f64>)> = (0..d).map(|j| (a[j * d + j], (0..d).map(|i| v[i * d + j]).collect())).collect();
        pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        pairs.into_iter().unzip()
    }

    #[test]
    fn matches_dense_eigensolver() {
        let mut r = rng::rng(5);
        let pts: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let p = pca_project(&pts, 2).unwrap();
        let d = 4;
        let mut cov = vec![0.0; d * d];
        for row in &pts {
            let c: Vec<f64> = row.iter().zip(&p.mean).map(|(a, b)| a - b).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j] / 4.0;
                }
            }
        }
        let (vals, vecs) = jacobi(cov, d);
        for c in 0..2 {
            assert!((p.eigenvalues[c] - vals[c]).abs() < 1e-8 * vals[0]);
            let dot: f64 = p.components[c].iter().zip(&vecs[c]).map(|(a, b)| a * b).sum();
            let sign = dot.signum();
            for (row, coords) in pts.iter().zip(&p.coords) {
                let oracle: f64 = row.iter().zip(&p.mean).zip(&vecs[c]).map(|((x, m), v)| (x - m) * v).sum();
                assert!((coords[c] - sign * oracle).abs() < 1e-6, "{} vs {}", coords[c], oracle);
            }
        }
        let dot01: f64 = p.components[0].iter().zip(&p.components[1]).map(|(a, b)| a * b).sum();
        assert!(dot01.abs() < 1e-6);
        for c in &p.components {
            assert!((c.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_one_data() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0, -0.5 * i as f64]).collect();
        let p = pca_project(&pts, 2).unwrap();
        assert!(p.explained[0] > 0.999);
        assert!(p.rank_deficient);
        assert_eq!(p.components.len(), 1);
        assert!(pca_project(&pts[..2], 2).is_err());
    }
}
