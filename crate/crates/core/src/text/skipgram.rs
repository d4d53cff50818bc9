use rand::Rng as _;

use super::{HuffmanTree, Vocab};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{log_sigmoid_raw, sigmoid_raw, Float, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    /// Starting learning rate; decays linearly towards `lr * 1e-4`.
    pub lr: f64,
    pub epochs: usize,
    pub min_count: u64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            window: 4,
            lr: 0.025,
            epochs: 5,
            min_count: 1,
            seed: 0,
        }
    }
}

impl SkipGramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 {
            return Err(Error::Config("text dim and window must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("text lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipGramParams<T> {
    /// Input word vectors, `[|V|, dim]`.
    pub w: Tensor<T>,
    /// Inner-node vectors of the Huffman tree, `[|V| - 1, dim]`.
    pub inner: Tensor<T>,
    pub window: usize,
    /// Token occurrences skipped because they are not in the vocabulary.
    pub skipped: u64,
    /// (center, context) pairs visited over all epochs.
    pub pairs: u64,
}

/// Loss of one (center, context) pair and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad<T> {
    pub loss: T,
    pub grad_w: Vec<T>,
    /// Gradient per inner node on the context's path, in path order.
    pub grad_inner: Vec<(usize, Vec<T>)>,
}

fn sign<T: Float>(bit: u8) -> T {
    if bit == 0 {
        T::one()
    } else {
        -T::one()
    }
}

/// `-sum_j log sigmoid(s_j * u_j . w)` over the context's Huffman path,
/// with `s_j = +1` for bit 0 and `-1` for bit 1.
pub fn pair_loss_and_grad<T: Float>(w: &[T], inner: &Tensor<T>, path: &[usize], code: &[u8]) -> PairGrad<T> {
    let mut loss = T::zero();
    let mut grad_w = vec![T::zero(); w.len()];
    let mut grad_inner = Vec::with_capacity(path.len());
    for (&node, &bit) in path.iter().zip(code) {
        let u = inner.row(node);
        let s: T = sign(bit);
        let x = u.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>();
        loss -= log_sigmoid_raw(s * x);
        // d/dx of -log sigmoid(s x)
        let g = -s * sigmoid_raw(-s * x);
        for (gw, &uv) in grad_w.iter_mut().zip(u) {
            *gw += g * uv;
        }
        grad_inner.push((node, w.iter().map(|&wv| g * wv).collect()));
    }
    PairGrad {
        loss,
        grad_w,
        grad_inner,
    }
}

/// Tape form of [`pair_loss_and_grad`]: `w` is `[d]`, `inner_rows` holds the
/// path's inner-node vectors as `[L, d]`.
pub fn pair_loss_tape<T: Float>(tape: &mut Tape<T>, w: Var, inner_rows: Var, code: &[u8]) -> Result<Var> {
    let d = tape.shape(w)[0];
    let col = tape.reshape(w, &[d, 1])?;
    let scores = tape.matmul(inner_rows, col)?;
    let signs = Tensor::new(vec![code.len(), 1], code.iter().map(|&b| sign(b)).collect())?;
    let s = tape.constant(signs);
    let signed = tape.mul(scores, s)?;
    let ll = tape.log_sigmoid(signed);
    let total = tape.sum(ll);
    Ok(tape.scale(total, -1.0))
}

/// Skip-gram with hierarchical softmax. Each in-vocabulary token predicts
/// every in-vocabulary neighbour within `window` positions; SGD runs
/// sequentially in corpus order so results depend only on the seed.
pub fn skipgram_train<T: Float>(
    corpus: &[Vec<String>],
    vocab: &Vocab,
    tree: &HuffmanTree,
    config: &SkipGramConfig,
) -> Result<SkipGramParams<T>> {
    config.validate()?;
    if tree.n_leaves() != vocab.len() {
        return Err(Error::contract("Huffman tree was not built from this vocabulary"));
    }
    let (v, d) = (vocab.len(), config.dim);
    let mut r = rng::rng(config.seed);
    let half = 0.5 / d as f64;
    let w_data = (0..v * d).map(|_| T::cast(r.random_range(-half..half))).collect();
    let mut w = Tensor::new(vec![v, d], w_data)?;
    let mut inner = Tensor::zeros(&[v - 1, d]);

    let mut skipped = 0u64;
    let encoded: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            s.iter()
                .filter_map(|t| {
                    let i = vocab.get(t);
                    if i.is_none() {
                        skipped += 1;
                    }
                    i
                })
                .collect()
        })
        .collect();
    let centers: usize = encoded.iter().map(Vec::len).sum();
    let total_steps = (centers * config.epochs).max(1) as f64;
    let mut step = 0usize;
    let mut pairs = 0u64;

    for _ in 0..config.epochs {
        for sentence in &encoded {
            for (i, &center) in sentence.iter().enumerate() {
                let lr = T::cast(config.lr * (1.0 - step as f64 / total_steps).max(1e-4));
                step += 1;
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window + 1).min(sentence.len());
                for (j, &ctx) in sentence.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    pairs += 1;
                    let g = pair_loss_and_grad(w.row(center), &inner, &tree.paths[ctx], &tree.codes[ctx]);
                    for (node, gu) in &g.grad_inner {
                        let row = &mut inner.data_mut()[node * d..(node + 1) * d];
                        for (u, &gv) in row.iter_mut().zip(gu) {
                            *u -= lr * gv;
                        }
                    }
                    let row = &mut w.data_mut()[center * d..(center + 1) * d];
                    for (x, &gv) in row.iter_mut().zip(&g.grad_w) {
                        *x -= lr * gv;
                    }
                }
            }
        }
    }
    Ok(SkipGramParams {
        w,
        inner,
        window: config.window,
        skipped,
        pairs,
    })
}
