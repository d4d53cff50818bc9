//! POI word vectors: vocabulary, Huffman coding, skip-gram with
//! hierarchical softmax, and category-averaged region embeddings.

mod huffman;
mod skipgram;

pub use huffman::{build_huffman, kraft_is_exact, HuffmanTree};
pub use skipgram::{pair_loss_and_grad, pair_loss_tape, skipgram_train, SkipGramConfig, SkipGramParams, PairGrad};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::{DatasetBundle, RegionRecord};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Token index with frequencies, ordered by count descending then token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    pub min_count: u64,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn count(&self, i: usize) -> u64 {
        self.counts[i]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `token\tcount` lines in index order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(s, "{t}\t{c}").expect("string write");
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Parses `token\tcount` lines; index order is taken from the file.
    pub fn read_tsv(path: impl AsRef<Path>, min_count: u64) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let at = offset;
            offset += line.len() as u64 + 1;
            if line.is_empty() {
                continue;
            }
            let (t, c) = line
                .split_once('\t')
                .and_then(|(t, c)| Some((t, c.parse::<u64>().ok()?)))
                .ok_or_else(|| Error::Format {
                    offset: at,
                    reason: format!("bad vocab line `{line}`"),
                })?;
            tokens.push(t.to_string());
            counts.push(c);
        }
        Self::from_parts(tokens, counts, min_count)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, min_count: u64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract("vocabulary is empty"));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::contract("duplicate token in vocabulary"));
        }
        Ok(Self {
            tokens,
            counts,
            index,
            min_count,
        })
    }
}

/// Counts tokens, drops those seen fewer than `min_count` times and orders
/// the rest by (count descending, token ascending).
pub fn build_vocab(corpus: &[Vec<String>], min_count: u64) -> Result<Vocab> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::contract("build_vocab on an empty corpus"));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for sentence in corpus {
        for t in sentence {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, u64)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if entries.is_empty() {
        return Err(Error::contract(format!("no token reaches min_count {min_count}")));
    }
    let (tokens, counts) = entries.into_iter().map(|(t, c)| (t.to_string(), c)).unzip();
    Vocab::from_parts(tokens, counts, min_count)
}

/// Category tokens of one region, flattened in POI order.
pub fn region_category_tokens(region: &RegionRecord) -> Vec<String> {
    region.poi_categories.iter().flatten().cloned().collect()
}

/// Training corpus: one sentence of category tokens per region followed by
/// that region's comments.
pub fn bundle_corpus(bundle: &DatasetBundle) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for r in &bundle.regions {
        out.push(region_category_tokens(r));
        out.extend(r.comments.iter().cloned());
    }
    out
}

/// Mean word vector over a region's in-vocabulary category tokens. Unknown
/// tokens are skipped; a region with none left yields a flagged zero vector.
pub fn region_poi_embedding<T: Float>(w: &Tensor<T>, vocab: &Vocab, categories: &[String]) -> Result<(Vec<T>, bool)> {
    if w.ndim() != 2 || w.shape()[0] != vocab.len() {
        return Err(Error::dim("region_poi_embedding", w.shape(), &[vocab.len()]));
    }
    let d = w.shape()[1];
    let mut acc = vec![T::zero(); d];
    let mut used = 0usize;
    for t in categories {
        if let Some(i) = vocab.get(t) {
            for (a, &v) in acc.iter_mut().zip(w.row(i)) {
                *a += v;
            }
            used += 1;
        }
    }
    if used == 0 {
        return Ok((acc, true));
    }
    let inv = T::one() / T::cast(used as f64);
    for a in &mut acc {
        *a *= inv;
    }
    Ok((acc, false))
}

/// [`region_poi_embedding`] for every region of the bundle.
pub fn embed_regions_poi<T: Float>(w: &Tensor<T>, vocab: &Vocab, bundle: &DatasetBundle) -> Result<EmbeddingTable<T>> {
    let mut rows = Vec::with_capacity(bundle.len());
    let mut flags = Vec::with_capacity(bundle.len());
    for r in &bundle.regions {
        let (v, deg) = region_poi_embedding(w, vocab, &region_category_tokens(r))?;
        rows.push(v);
        flags.push(deg);
    }
    let mut table = EmbeddingTable::from_rows(rows)?;
    table.degenerate = flags;
    Ok(table)
}
