use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::Vocab;
use crate::error::{Error, Result};

/// Binary Huffman code over a vocabulary. Inner nodes are numbered in
/// creation order, so the root is `n_inner() - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuffmanTree {
    /// Bits from the root to each leaf.
    pub codes: Vec<Vec<u8>>,
    /// Inner-node indices from the root to each leaf, aligned with `codes`.
    pub paths: Vec<Vec<usize>>,
}

impl HuffmanTree {
    pub fn n_leaves(&self) -> usize {
        self.codes.len()
    }

    pub fn n_inner(&self) -> usize {
        self.codes.len() - 1
    }

    pub fn code_lengths(&self) -> Vec<usize> {
        self.codes.iter().map(Vec::len).collect()
    }
}

/// Repeatedly merges the two lightest nodes; equal weights pop the
/// earliest-created node first, and the first node popped takes bit 0.
pub fn build_huffman(vocab: &Vocab) -> Result<HuffmanTree> {
    build_from_counts(vocab.counts())
}

pub(crate) fn build_from_counts(counts: &[u64]) -> Result<HuffmanTree> {
    let n = counts.len();
    if n < 2 {
        return Err(Error::contract(format!("Huffman coding needs at least 2 tokens, got {n}")));
    }
    // node ids: leaves 0..n, inner nodes n.. in creation order
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut bit = vec![0u8; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = counts.iter().enumerate().map(|(i, &c)| Reverse((c, i))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((w0, a)) = heap.pop().expect("len > 1");
        let Reverse((w1, b)) = heap.pop().expect("len > 1");
        parent[a] = next;
        parent[b] = next;
        bit[b] = 1;
        heap.push(Reverse((w0 + w1, next)));
        next += 1;
    }
    let mut codes = Vec::with_capacity(n);
    let mut paths = Vec::with_capacity(n);
    for leaf in 0..n {
        let (mut code, mut path) = (Vec::new(), Vec::new());
        let mut node = leaf;
        while parent[node] != usize::MAX {
            code.push(bit[node]);
            path.push(parent[node] - n);
            node = parent[node];
        }
        code.reverse();
        path.reverse();
        codes.push(code);
        paths.push(path);
    }
    Ok(HuffmanTree { codes, paths })
}

/// Whether `sum 2^-len == 1` holds exactly, by carrying leaf counts up
/// from the deepest level with integer arithmetic.
pub fn kraft_is_exact(lengths: &[usize]) -> bool {
    let Some(&max) = lengths.iter().max() else {
        return false;
    };
    let mut per_level = vec![0u64; max + 1];
    for &l in lengths {
        per_level[l] += 1;
    }
    let mut carry = 0u64;
    for level in (1..=max).rev() {
        let total = per_level[level] + carry;
        if !total.is_multiple_of(2) {
            return false;
        }
        carry = total / 2;
    }
    carry + per_level[0] == 1
}
