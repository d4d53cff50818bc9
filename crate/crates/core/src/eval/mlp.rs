use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::metrics::{r_squared, rmse};
use crate::dataset::{Split, SplitAssignment};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Bound, Float, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation RMSE improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 5e-4,
            batch_size: 32,
            max_epochs: 2000,
            patience: 10,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("mlp hidden, batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("mlp lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitMetrics {
    pub split: Split,
    pub n: usize,
    /// `None` when the split's targets are constant.
    pub r2: Option<f64>,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub position: usize,
    pub split: Split,
    pub y_true: f64,
    pub y_pred: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionReport {
    pub indicator: String,
    pub metrics: Vec<SplitMetrics>,
    pub predictions: Vec<Prediction>,
    /// Number of epochs behind the kept parameters (0 = untrained).
    pub best_epoch: usize,
}

impl RegressionReport {
    pub fn split(&self, split: Split) -> &SplitMetrics {
        self.metrics.iter().find(|m| m.split == split).expect("all splits reported")
    }
}

/// Column means and standard deviations over `rows` (std 0 becomes 1).
fn standardizer(x: &[f64], d: usize, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        for (m, v) in mean.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for &i in rows {
        for ((s, v), m) in std.iter_mut().zip(&x[i * d..(i + 1) * d]).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, std)
}

/// Two-layer network forward pass producing `[n]` predictions.
pub fn mlp_forward<T: Float>(tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
    let h = tape.affine(x, bound.var("w1"), bound.var("b1"))?;
    let h = tape.relu(h);
    let out = tape.affine(h, bound.var("w2"), bound.var("b2"))?;
    let n = tape.shape(out)[0];
    tape.reshape(out, &[n])
}

pub fn init_mlp(inputs: usize, hidden: usize, seed: u64) -> ParamSet<f64> {
    let mut r = rng::rng(seed);
    let mut normal = |shape: &[usize], fan_in: usize, gain: f64| {
        let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut r)).collect()).expect("finite init")
    };
    let mut p = ParamSet::new();
    p.insert("w1", normal(&[inputs, hidden], inputs, 2.0));
    p.insert("b1", Tensor::zeros(&[hidden]));
    // a small head keeps the untrained network close to the mean predictor
    p.insert("w2", normal(&[hidden, 1], hidden, 0.01));
    p.insert("b2", Tensor::zeros(&[1]));
    p
}

fn predict(params: &ParamSet<f64>, x: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let out = mlp_forward(&mut tape, &bound, xv)?;
    Ok(tape.value(out).data().to_vec())
}

fn gather(x: &[f64], d: usize, rows: &[usize]) -> Result<Tensor<f64>> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], out)
}

/// Fits a one-hidden-layer ReLU network on the training split with MSE on
/// standardized targets, keeps the parameters with the lowest validation
/// RMSE, and reports every split. Inputs and targets are standardized with
/// training-split statistics. Always runs in 64-bit.
pub fn train_mlp_regressor<T: Float>(
    embeddings: &EmbeddingTable<T>,
    indicator: &str,
    targets: &[f64],
    splits: &SplitAssignment,
    config: &MlpConfig,
) -> Result<RegressionReport> {
    config.validate()?;
    let n = embeddings.len();
    if targets.len() != n || splits.labels.len() != n {
        return Err(Error::contract(format!(
            "regression inputs disagree: {n} embeddings, {} targets, {} split labels",
            targets.len(),
            splits.labels.len()
        )));
    }
    let idx: Vec<Vec<usize>> = Split::ALL.iter().map(|&s| splits.indices(s)).collect();
    for (s, rows) in Split::ALL.iter().zip(&idx) {
        if rows.is_empty() {
            return Err(Error::contract(format!("{} split is empty", s.name())));
        }
    }
    let (train, val) = (&idx[0], &idx[1]);
    let d = embeddings.dim();
    let raw: Vec<f64> = embeddings.data().iter().map(|v| v.as_f64()).collect();
    let (mu, sd) = standardizer(&raw, d, train);
    let x: Vec<f64> = raw
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s))
        .collect();
    let (y_mu, y_sd) = standardizer(targets, 1, train);
    let (y_mu, y_sd) = (y_mu[0], y_sd[0]);
    let y: Vec<f64> = targets.iter().map(|t| (t - y_mu) / y_sd).collect();

    let x_val = gather(&x, d, val)?;
    let y_val: Vec<f64> = val.iter().map(|&i| targets[i]).collect();
    let mut params = init_mlp(d, config.hidden, rng::derive_seed(config.seed, "mlp-init"));
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let initial: Vec<f64> = predict(&params, &x_val)?.iter().map(|p| p * y_sd + y_mu).collect();
    let mut best = (rmse(&y_val, &initial)?, params.clone(), 0usize);
    let mut order = train.clone();
    let mut shuffle = rng::rng(rng::derive_seed(config.seed, "mlp-order"));

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xb = tape.constant(gather(&x, d, batch)?);
            let yb = tape.constant(Tensor::vector(batch.iter().map(|&i| y[i]).collect())?);
            let pred = mlp_forward(&mut tape, &bound, xb)?;
            let loss = tape.mse(pred, yb)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Diverged(format!("regression loss for {indicator} at epoch {epoch}")));
            }
            let mut g = tape.backward(loss)?;
            adam_step(&mut params, &bound.grads(&mut g), &mut adam)?;
        }
        let pv: Vec<f64> = predict(&params, &x_val)?.iter().map(|p| p * y_sd + y_mu).collect();
        let score = rmse(&y_val, &pv)?;
        if score < best.0 {
            best = (score, params.clone(), epoch + 1);
        } else if epoch + 1 - best.2 >= config.patience {
            break;
        }
    }

    let (_, params, best_epoch) = best;
    let mut metrics = Vec::new();
    let mut predictions = Vec::new();
    for (split, rows) in Split::ALL.iter().zip(&idx) {
        let pred: Vec<f64> = predict(&params, &gather(&x, d, rows)?)?.iter().map(|p| p * y_sd + y_mu).collect();
        let truth: Vec<f64> = rows.iter().map(|&i| targets[i]).collect();
        metrics.push(SplitMetrics {
            split: *split,
            n: rows.len(),
            r2: r_squared(&truth, &pred)?,
            rmse: rmse(&truth, &pred)?,
        });
        for ((&position, &y_true), &y_pred) in rows.iter().zip(&truth).zip(&pred) {
            predictions.push(Prediction {
                position,
                split: *split,
                y_true,
                y_pred,
            });
        }
    }
    predictions.sort_by_key(|p| p.position);
    Ok(RegressionReport {
        indicator: indicator.to_string(),
        metrics,
        predictions,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_regions;
    use crate::tensor::grad_check;
    use rand::Rng as _;

    fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable<f64> {
        let mut r = rng::rng(seed);
        EmbeddingTable::new(d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn loss_gradient() {
        let p = init_mlp(3, 5, 1);
        let mut r = rng::rng(2);
        let x = Tensor::new(vec![4, 3], (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::vector(vec![0.3, -1.0, 0.5, 2.0]).unwrap();
        for name in ["w1", "b1", "w2", "b2"] {
            let err = grad_check(
                |tape, v| {
                    let mut rest = ParamSet::new();
                    for (k, t) in p.iter() {
                        if k != name {
                            rest.insert(k.clone(), t.clone());
                        }
                    }
                    let mut bound = rest.bind_frozen(tape);
                    bound.insert_var(name, v);
                    let xv = tape.constant(x.clone());
                    let yv = tape.constant(y.clone());
                    let pred = mlp_forward(tape, &bound, xv)?;
                    tape.mse(pred, yv)
                },
                p.get(name).unwrap(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn realizable_linear_target() {
        let n = 150;
        let emb = random_table(n, 6, 3);
        let coef = [1.5, -2.0, 0.5, 0.0, 3.0, -1.0];
        let y: Vec<f64> = (0..n).map(|i| emb.row(i).iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + 4.0).collect();
        let splits = split_regions(n, [0.6, 0.2, 0.2], 1).unwrap();
        let cfg = MlpConfig {
            lr: 5e-3,
            patience: 200,
            ..Default::default()
        };
        let rep = train_mlp_regressor(&emb, "lin", &y, &splits, &cfg).unwrap();
        let r2 = rep.split(Split::Test).r2.unwrap();
        assert!(r2 > 0.99, "{r2}");
        assert_eq!(rep.predictions.len(), n);
    }

    #[test]
    fn empty_split_is_rejected() {
        let emb = random_table(3, 2, 1);
        let splits = SplitAssignment {
            labels: vec![Split::Train, Split::Train, Split::Test],
        };
        let cfg = MlpConfig::default();
        assert!(train_mlp_regressor(&emb, "x", &[1.0, 2.0, 3.0], &splits, &cfg).is_err());
    }
}
