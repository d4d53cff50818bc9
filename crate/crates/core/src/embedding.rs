use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Fixed-dimension embedding per region position.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    dim: usize,
    data: Vec<T>,
    /// Rows produced from degenerate (all-zero) inputs.
    pub degenerate: Vec<bool>,
}

impl<T: Float> EmbeddingTable<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::dim("embedding table", &[dim], &[data.len()]));
        }
        let n = data.len() / dim;
        Ok(Self {
            dim,
            data,
            degenerate: vec![false; n],
        })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::contract("embedding rows of unequal length"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Rows `idx` stacked into an `[idx.len(), dim]` tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::contract(format!("embedding row {i} out of range ({})", self.len())));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), self.dim], out)
    }

    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        Tensor::new(vec![self.len(), self.dim], self.data.clone())
    }

    /// Row-wise concatenation of tables with equal row counts.
    pub fn concat(tables: &[&EmbeddingTable<T>]) -> Result<Self> {
        let n = tables.first().map(|t| t.len()).unwrap_or(0);
        if tables.iter().any(|t| t.len() != n) {
            return Err(Error::contract("concatenating tables with different row counts"));
        }
        let dim = tables.iter().map(|t| t.dim).sum();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for t in tables {
                data.extend_from_slice(t.row(i));
            }
        }
        Self::new(dim, data)
    }

    pub fn cast<U: Float>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            dim: self.dim,
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
            degenerate: self.degenerate.clone(),
        }
    }

    /// Writes `region_id,dim_0..dim_{d-1}` rows; values use shortest
    /// round-trip formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>, region_ids: &[u32]) -> Result<()> {
        if region_ids.len() != self.len() {
            return Err(Error::contract("region id count does not match table rows"));
        }
        let mut s = String::from("region_id");
        for j in 0..self.dim {
            write!(s, ",dim_{j}").expect("string write");
        }
        s.push('\n');
        for (i, id) in region_ids.iter().enumerate() {
            write!(s, "{id}").expect("string write");
            for v in self.row(i) {
                write!(s, ",{v}").expect("string write");
            }
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Reads a table written by [`EmbeddingTable::write_csv`], reordering rows
    /// to follow `region_ids`.
    pub fn read_csv(path: impl AsRef<Path>, region_ids: &[u32]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format {
            offset: 0,
            reason: "empty embeddings file".into(),
        })?;
        let dim = header.split(',').count() - 1;
        let mut rows: Vec<Option<Vec<T>>> = vec![None; region_ids.len()];
        let mut offset = header.len() as u64 + 1;
        for line in lines {
            let at = offset;
            offset += line.len() as u64 + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let bad = |reason: String| Error::Format { offset: at, reason };
            let id: u32 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("bad region id".into()))?;
            let values = fields
                .map(|f| f.parse::<f64>().map(T::cast).map_err(|_| bad(format!("bad value `{f}`"))))
                .collect::<Result<Vec<T>>>()?;
            if values.len() != dim {
                return Err(bad(format!("expected {dim} values, got {}", values.len())));
            }
            let pos = region_ids
                .iter()
                .position(|&r| r == id)
                .ok_or_else(|| bad(format!("unknown region id {id}")))?;
            rows[pos] = Some(values);
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.ok_or_else(|| Error::contract(format!("embeddings missing region {}", region_ids[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let t = EmbeddingTable::<f64>::new(3, vec![0.1, -2.0 / 3.0, 1e-17, 5.0, 0.0, -0.25]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        t.write_csv(&p, &[7, 3]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("region_id,dim_0,dim_1,dim_2\n7,"));
        assert_eq!(EmbeddingTable::<f64>::read_csv(&p, &[7, 3]).unwrap(), t);
    }

    #[test]
    fn concat_dims() {
        let a = EmbeddingTable::<f64>::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = EmbeddingTable::<f64>::new(1, vec![9.0, 8.0]).unwrap();
        let c = EmbeddingTable::concat(&[&a, &b]).unwrap();
        assert_eq!(c.dim(), 3);
        assert_eq!(c.row(1), &[3.0, 4.0, 8.0]);
    }
}
