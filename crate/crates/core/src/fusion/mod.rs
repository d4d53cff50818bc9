//! Attention-weighted fusion of the two image embeddings and InfoNCE
//! alignment of the fused embedding with the POI text embedding.

mod train;
mod variants;

pub use train::{train_fusion, AlignmentConfig, FusionData, FusionTraining, ImageInputs};
pub use variants::{variant_embeddings, Variant, VariantInputs};

use rand_distr::{Distribution, Normal};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{cosine_raw, relu_raw, softmax_in_place, Bound, Float, ParamSet, Tape, Tensor, Var};

pub const C: &str = "c";
pub const M: &str = "M";
pub const B: &str = "b";
pub const ADAPTER: &str = "adapter";

/// Attention parameters `c [d_h]`, `M [d_h, d]`, `b [d_h]`, and an optional
/// text adapter `[d_text, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub params: ParamSet<T>,
    pub dim: usize,
    pub hidden: usize,
}

impl<T: Float> FusionParams<T> {
    pub fn init(dim: usize, hidden: usize, text_dim: Option<usize>, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 || text_dim == Some(0) {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        let mut r = rng::rng(seed);
        let mut normal = |shape: &[usize], fan_in: usize| {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| T::cast(dist.sample(&mut r))).collect()).expect("finite init")
        };
        let mut params = ParamSet::new();
        params.insert(C, normal(&[hidden], hidden));
        params.insert(M, normal(&[hidden, dim], dim));
        params.insert(B, Tensor::zeros(&[hidden]));
        if let Some(dt) = text_dim {
            params.insert(ADAPTER, normal(&[dt, dim], dt));
        }
        Ok(Self { params, dim, hidden })
    }

    /// Rebuilds from a checkpointed parameter set.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let m = params.get(M)?;
        if m.ndim() != 2 {
            return Err(Error::dim("fusion M", m.shape(), &[2]));
        }
        let (hidden, dim) = (m.shape()[0], m.shape()[1]);
        if params.get(C)?.shape() != [hidden] || params.get(B)?.shape() != [hidden] {
            return Err(Error::contract("fusion c/b do not match M"));
        }
        if let Ok(a) = params.get(ADAPTER) {
            if a.ndim() != 2 || a.shape()[1] != dim {
                return Err(Error::dim("fusion adapter", a.shape(), &[0, dim]));
            }
        }
        Ok(Self { params, dim, hidden })
    }

    pub fn has_adapter(&self) -> bool {
        self.params.get(ADAPTER).is_ok()
    }
}

/// `c . relu(M e + b)`.
pub fn attention_logit<T: Float>(params: &FusionParams<T>, e: &[T]) -> Result<T> {
    if e.len() != params.dim {
        return Err(Error::dim("attention_logit", &[params.dim], &[e.len()]));
    }
    let (c, m, b) = (params.params.get(C)?, params.params.get(M)?, params.params.get(B)?);
    let mut alpha = T::zero();
    for k in 0..params.hidden {
        let pre = m.row(k).iter().zip(e).map(|(&w, &x)| w * x).sum::<T>() + b.data()[k];
        alpha += c.data()[k] * relu_raw(pre);
    }
    Ok(alpha)
}

/// Fused image embedding with its modality weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Fused<T> {
    pub embedding: Vec<T>,
    pub beta_sv: T,
    pub beta_rv: T,
}

/// Two-way softmax over the attention logits, then the weighted sum.
pub fn attentive_fusion<T: Float>(params: &FusionParams<T>, e_sv: &[T], e_rv: &[T]) -> Result<Fused<T>> {
    let mut beta = [attention_logit(params, e_sv)?, attention_logit(params, e_rv)?];
    softmax_in_place(&mut beta);
    let embedding = e_sv.iter().zip(e_rv).map(|(&s, &r)| beta[0] * s + beta[1] * r).collect();
    Ok(Fused {
        embedding,
        beta_sv: beta[0],
        beta_rv: beta[1],
    })
}

/// [`attentive_fusion`] row by row; returns the fused table and `(beta_sv,
/// beta_rv)` per row.
pub fn fuse_tables<T: Float>(
    params: &FusionParams<T>,
    sv: &EmbeddingTable<T>,
    rv: &EmbeddingTable<T>,
) -> Result<(EmbeddingTable<T>, Vec<(T, T)>)> {
    if sv.len() != rv.len() {
        return Err(Error::contract("sv and rv tables differ in length"));
    }
    let mut rows = Vec::with_capacity(sv.len());
    let mut betas = Vec::with_capacity(sv.len());
    for i in 0..sv.len() {
        let f = attentive_fusion(params, sv.row(i), rv.row(i))?;
        rows.push(f.embedding);
        betas.push((f.beta_sv, f.beta_rv));
    }
    let mut table = EmbeddingTable::from_rows(rows)?;
    table.degenerate = (0..sv.len()).map(|i| sv.degenerate[i] && rv.degenerate[i]).collect();
    Ok((table, betas))
}

/// Mean over rows `i` of `-log softmax_j(cos(img_i, txt_j) / tau)[i]`.
/// Zero rows contribute a cosine of 0.
pub fn infonce_loss<T: Float>(images: &Tensor<T>, texts: &Tensor<T>, tau: f64) -> Result<T> {
    check_pair(images.shape(), texts.shape(), tau)?;
    let n = images.shape()[0];
    let inv_tau = T::cast(1.0 / tau);
    let mut total = T::zero();
    for i in 0..n {
        let mut logits: Vec<T> = (0..n)
            .map(|j| cosine_raw(images.row(i), texts.row(j)).value * inv_tau)
            .collect();
        let target = logits[i];
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = logits.iter_mut().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
        total += lse - target;
    }
    Ok(total / T::cast(n as f64))
}

fn check_pair(a: &[usize], b: &[usize], tau: f64) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(Error::dim("infonce", a, b));
    }
    if a[0] < 2 {
        return Err(Error::contract("InfoNCE needs a batch of at least 2"));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Attention logits for every row of `e` (`[n, d]`), as `[n, 1]`.
pub fn attention_logits_tape<T: Float>(tape: &mut Tape<T>, bound: &Bound, e: Var) -> Result<Var> {
    let mt = tape.transpose(bound.var(M))?;
    let pre = tape.affine(e, mt, bound.var(B))?;
    let h = tape.relu(pre);
    let hidden = tape.shape(bound.var(C))[0];
    let c = tape.reshape(bound.var(C), &[hidden, 1])?;
    tape.matmul(h, c)
}

/// Fused `[n, d]` image embeddings and the `[n, 2]` modality weights.
pub fn fuse_tape<T: Float>(tape: &mut Tape<T>, bound: &Bound, sv: Var, rv: Var) -> Result<(Var, Var)> {
    let a_sv = attention_logits_tape(tape, bound, sv)?;
    let a_rv = attention_logits_tape(tape, bound, rv)?;
    let logits = tape.concat_cols(&[a_sv, a_rv])?;
    let beta = tape.softmax_row(logits);
    let b_sv = tape.column(beta, 0)?;
    let b_rv = tape.column(beta, 1)?;
    let w_sv = tape.mul_rows(sv, b_sv)?;
    let w_rv = tape.mul_rows(rv, b_rv)?;
    Ok((tape.add(w_sv, w_rv)?, beta))
}

/// Maps text rows through the adapter when the parameters carry one.
pub fn text_side_tape<T: Float>(tape: &mut Tape<T>, params: &FusionParams<T>, bound: &Bound, texts: Var) -> Result<Var> {
    if params.has_adapter() {
        tape.matmul(texts, bound.var(ADAPTER))
    } else {
        Ok(texts)
    }
}

/// Image-to-text InfoNCE on the tape; `symmetric` averages in the
/// text-to-image direction.
pub fn infonce_tape<T: Float>(tape: &mut Tape<T>, images: Var, texts: Var, tau: f64, symmetric: bool) -> Result<Var> {
    check_pair(tape.shape(images), tape.shape(texts), tau)?;
    let sims = tape.cosine_matrix(images, texts)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let direction = |tape: &mut Tape<T>, l: Var| -> Result<Var> {
        let ls = tape.log_softmax_row(l);
        let d = tape.diag(ls)?;
        let m = tape.mean(d);
        Ok(tape.scale(m, -1.0))
    };
    let forward = direction(tape, logits)?;
    if !symmetric {
        return Ok(forward);
    }
    let lt = tape.transpose(logits)?;
    let backward = direction(tape, lt)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}
