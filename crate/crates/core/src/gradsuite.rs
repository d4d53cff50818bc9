//! Central-difference checks of every differentiable operation the
//! training loops rely on, in 64-bit, over random instances.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::ImageDims;
use crate::error::Result;
use crate::eval::{init_mlp, mlp_forward};
use crate::fusion::{fuse_tape, infonce_tape, FusionParams};
use crate::rng::{self, Rng};
use crate::tensor::{grad_check, grad_check_fn, Tape, Tensor, Var};
use crate::text::{pair_loss_and_grad, pair_loss_tape};
use crate::visual::{batch_triplet_loss, encoder_forward, EncoderConfig, EncoderParams};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRecord {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradRecord {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn normal(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect()).expect("finite")
}

/// Weights in `[0.5, 1.5]` that turn a tensor output into a scalar without
/// cancelling any element's gradient.
fn weights(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.5..1.5)).collect()).expect("finite")
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(w.clone());
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

/// Keeps entries at least `gap` away from the ReLU kink.
fn off_kink(mut t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

type Check = fn(&mut Rng) -> Result<f64>;

fn conv(r: &mut Rng) -> Result<f64> {
    let x = normal(r, &[2, 2, 5, 5]);
    let k = normal(r, &[3, 2, 3, 3]);
    let w = weights(r, &[2, 3, 5, 5]);
    let wrt_x = grad_check(
        |t, v| {
            let kv = t.constant(k.clone());
            let y = t.conv2d(v, kv, 1, 1)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )?;
    let w2 = weights(r, &[2, 3, 2, 2]);
    let wrt_k = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v, 2, 0)?;
            weighted_sum(t, y, &w2)
        },
        &k,
        STEP,
    )?;
    Ok(wrt_x.max(wrt_k))
}

fn affine(r: &mut Rng) -> Result<f64> {
    let x = normal(r, &[3, 4]);
    let m = normal(r, &[4, 5]);
    let b = normal(r, &[5]);
    let w = weights(r, &[3, 5]);
    let wrt_m = grad_check(
        |t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.affine(xv, v, bv)?;
            weighted_sum(t, y, &w)
        },
        &m,
        STEP,
    )?;
    let wrt_x = grad_check(
        |t, v| {
            let (mv, bv) = (t.constant(m.clone()), t.constant(b.clone()));
            let y = t.affine(v, mv, bv)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )?;
    let wrt_b = grad_check(
        |t, v| {
            let (xv, mv) = (t.constant(x.clone()), t.constant(m.clone()));
            let y = t.affine(xv, mv, v)?;
            weighted_sum(t, y, &w)
        },
        &b,
        STEP,
    )?;
    Ok(wrt_m.max(wrt_x).max(wrt_b))
}

fn relu(r: &mut Rng) -> Result<f64> {
    let x = off_kink(normal(r, &[24]), 0.05);
    let w = weights(r, &[24]);
    grad_check(
        |t, v| {
            let y = t.relu(v);
            // square so inactive entries are not the only contribution
            let sq = t.mul(y, y)?;
            let lin = weighted_sum(t, v, &w)?;
            let s = t.sum(sq);
            t.add(s, lin)
        },
        &x,
        STEP,
    )
}

fn softmax(r: &mut Rng) -> Result<f64> {
    let x = normal(r, &[3, 6]);
    let w = normal(r, &[3, 6]);
    let plain = grad_check(
        |t, v| {
            let y = t.softmax_row(v);
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )?;
    let log = grad_check(
        |t, v| {
            let y = t.log_softmax_row(v);
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )?;
    Ok(plain.max(log))
}

fn cosine(r: &mut Rng) -> Result<f64> {
    let a = normal(r, &[4, 6]);
    let b = normal(r, &[4, 6]);
    let w = weights(r, &[4]);
    let wm = weights(r, &[4, 4]);
    let rows = grad_check(
        |t, v| {
            let bv = t.constant(b.clone());
            let y = t.cosine_rows(v, bv)?;
            weighted_sum(t, y, &w)
        },
        &a,
        STEP,
    )?;
    let matrix = grad_check(
        |t, v| {
            let bv = t.constant(b.clone());
            let y = t.cosine_matrix(bv, v)?;
            weighted_sum(t, y, &wm)
        },
        &a,
        STEP,
    )?;
    let w6 = weights(r, &[4, 6]);
    let norm = grad_check(
        |t, v| {
            let y = t.l2_normalize(v);
            weighted_sum(t, y, &w6)
        },
        &a,
        STEP,
    )?;
    Ok(rows.max(matrix).max(norm))
}

fn triplet(r: &mut Rng) -> Result<f64> {
    // a margin above 2 keeps every hinge active
    let emb = normal(r, &[12, 5]);
    grad_check(|t, v| batch_triplet_loss(t, v, 2.5), &emb, STEP)
}

fn encoder(r: &mut Rng) -> Result<f64> {
    let config = EncoderConfig {
        input: ImageDims {
            channels: 2,
            height: 6,
            width: 6,
        },
        channels: vec![3, 4],
        embedding_dim: 3,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::<f64>::init(&config, r.random())?;
    let x = normal(r, &[2, 2, 6, 6]);
    let w = weights(r, &[2, 3]);
    grad_check(
        |t, v| {
            let bound = params.params.bind_frozen(t);
            let y = encoder_forward(t, &bound, v, &config)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

fn hierarchical_softmax(r: &mut Rng) -> Result<f64> {
    let (d, len) = (5, 4);
    let w = normal(r, &[d]);
    let inner = normal(r, &[len + 2, d]);
    let path: Vec<usize> = vec![len + 1, 0, 3, 2];
    let code: Vec<u8> = (0..len).map(|_| r.random_range(0..2)).collect();
    let rows = Tensor::from_rows(&path.iter().map(|&p| inner.row(p).to_vec()).collect::<Vec<_>>())?;
    let tape = grad_check(
        |t, v| {
            let iv = t.constant(rows.clone());
            pair_loss_tape(t, v, iv, &code)
        },
        &w,
        STEP,
    )?;
    let analytic = grad_check_fn(
        |p| {
            let g = pair_loss_and_grad(p.data(), &inner, &path, &code);
            Ok((g.loss, Tensor::vector(g.grad_w)?))
        },
        &w,
        STEP,
    )?;
    let wrt_inner = grad_check_fn(
        |p| {
            let g = pair_loss_and_grad(w.data(), p, &path, &code);
            let mut grad = Tensor::zeros(p.shape());
            for (node, gu) in &g.grad_inner {
                grad.data_mut()[node * d..(node + 1) * d].copy_from_slice(gu);
            }
            Ok((g.loss, grad))
        },
        &inner,
        STEP,
    )?;
    Ok(tape.max(analytic).max(wrt_inner))
}

fn infonce(r: &mut Rng) -> Result<f64> {
    let images = normal(r, &[5, 4]);
    let texts = normal(r, &[5, 4]);
    let tau = r.random_range(0.3..1.5);
    let one = grad_check(
        |t, v| {
            let tv = t.constant(texts.clone());
            infonce_tape(t, v, tv, tau, false)
        },
        &images,
        STEP,
    )?;
    let both = grad_check(
        |t, v| {
            let iv = t.constant(images.clone());
            infonce_tape(t, iv, v, tau, true)
        },
        &texts,
        STEP,
    )?;
    Ok(one.max(both))
}

fn fusion(r: &mut Rng) -> Result<f64> {
    let params = FusionParams::<f64>::init(4, 3, None, r.random())?;
    let sv = normal(r, &[3, 4]);
    let rv = normal(r, &[3, 4]);
    let w = weights(r, &[3, 4]);
    grad_check(
        |t, v| {
            let bound = params.params.bind_frozen(t);
            let rvv = t.constant(rv.clone());
            let (img, _) = fuse_tape(t, &bound, v, rvv)?;
            weighted_sum(t, img, &w)
        },
        &sv,
        STEP,
    )
}

fn mlp(r: &mut Rng) -> Result<f64> {
    let params = init_mlp(4, 6, r.random());
    let x = normal(r, &[7, 4]);
    let y = normal(r, &[7]);
    let mut worst: f64 = 0.0;
    for name in ["w1", "b1", "w2", "b2"] {
        let e = grad_check(
            |t, v| {
                let mut bound = params.bind_frozen(t);
                bound.insert_var(name, v);
                let xv = t.constant(x.clone());
                let yv = t.constant(y.clone());
                let pred = mlp_forward(t, &bound, xv)?;
                t.mse(pred, yv)
            },
            params.get(name)?,
            STEP,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn max_pool(r: &mut Rng) -> Result<f64> {
    let x = normal(r, &[2, 4, 4]);
    let w = weights(r, &[2, 2, 2]);
    grad_check(
        |t, v| {
            let y = t.max_pool2d(v, 2)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

/// Every checked operation, by name.
pub const OPS: [(&str, Check); 12] = [
    ("conv2d", conv),
    ("affine", affine),
    ("relu", relu),
    ("softmax", softmax),
    ("cosine", cosine),
    ("triplet_loss", triplet),
    ("conv_encoder", encoder),
    ("hierarchical_softmax", hierarchical_softmax),
    ("infonce", infonce),
    ("attentive_fusion", fusion),
    ("mlp_loss", mlp),
    ("max_pool", max_pool),
];

/// Runs every operation once per seed; each (operation, seed) pair owns
/// its own RNG stream.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradRecord>> {
    let mut out = Vec::with_capacity(OPS.len() * seeds.len());
    for &seed in seeds {
        for (i, (op, check)) in OPS.iter().enumerate() {
            let mut r = rng::stream_rng(seed, i as u64);
            out.push(GradRecord {
                op,
                seed,
                max_rel_error: check(&mut r)?,
            });
        }
    }
    Ok(out)
}
