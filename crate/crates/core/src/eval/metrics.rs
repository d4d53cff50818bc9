use crate::error::{Error, Result};

fn check_lengths(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// `1 - SS_res / SS_tot`; `None` when `y_true` is constant.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<Option<f64>> {
    check_lengths(y_true, y_pred, "r_squared")?;
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true, y_pred, "rmse")?;
    let mse = y_true.iter().zip(y_pred).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / y_true.len() as f64;
    Ok(mse.sqrt())
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index from the contingency table of two labelings. Two
/// single-cluster labelings score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("adjusted_rand_index", &[a.len()], &[b.len()]));
    }
    let n = a.len() as u64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let sum_cells: f64 = table.iter().map(|&c| choose2(c)).sum();
    let rows: f64 = (0..ka).map(|i| choose2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(if sum_cells == expected { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), Some(0.0));
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap(), Some(0.5));
        assert_eq!(r_squared(&[4.0, 4.0], &[1.0, 2.0]).unwrap(), None);
        assert!(r_squared(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        let (y, p) = ([1.0, 4.0, -2.0], [0.5, 3.0, 1.0]);
        let s = -2.5;
        let ys: Vec<f64> = y.iter().map(|v| v * s).collect();
        let ps: Vec<f64> = p.iter().map(|v| v * s).collect();
        assert!((rmse(&ys, &ps).unwrap() - 2.5 * rmse(&y, &p).unwrap()).abs() < 1e-12);
    }

    /// Pair-counting definition over all unordered pairs.
    fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                pairs += 1.0;
                if sa && sb {
                    both += 1.0;
                }
                if sa {
                    only_a += 1.0;
                }
                if sb {
                    only_b += 1.0;
                }
            }
        }
        let expected = only_a * only_b / pairs;
        (both - expected) / (0.5 * (only_a + only_b) - expected)
    }

    #[test]
    fn ari_examples() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&a, &[2, 2, 0, 0, 1, 1]).unwrap(), 1.0);
        let b = [0, 0, 1, 2, 2, 2];
        let got = adjusted_rand_index(&a, &b).unwrap();
        assert!((got - ari_by_pairs(&a, &b)).abs() < 1e-12);
        assert_eq!(got, adjusted_rand_index(&b, &a).unwrap());
        let c = [1, 0, 0, 1, 0, 1];
        assert!((adjusted_rand_index(&a, &c).unwrap() - ari_by_pairs(&a, &c)).abs() < 1e-12);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    }
}
