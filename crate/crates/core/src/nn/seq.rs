use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::tensor::Tensor;

/// A padded batch of variable-length sequences on the host, stored time-major
/// (`[T_max * B, D]`, row `t * B + b`).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub data: Tensor,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    /// Pack per-item `[T_i, D]` matrices. Padding rows are zero.
    pub fn from_items(items: &[&Tensor]) -> Result<Self> {
        let lengths: Vec<usize> = items.iter().map(|t| t.rows()).collect();
        let width = items.first().map(|t| t.cols()).unwrap_or(0);
        if items.iter().any(|t| t.cols() != width) {
            return Err(Error::shape("sequence items have different feature dims"));
        }
        Self::from_items_padded(items, lengths, None)
    }

    /// Like [`from_items`](Self::from_items) but lets the caller pad to at least
    /// `min_steps` steps, and declare lengths shorter than the stored rows (rows beyond
    /// the declared length are treated as padding and kept as given).
    pub fn from_items_padded(
        items: &[&Tensor],
        lengths: Vec<usize>,
        min_steps: Option<usize>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("empty sequence batch"));
        }
        let b = items.len();
        let d = items[0].cols();
        for (item, &len) in items.iter().zip(&lengths) {
            if len == 0 || len > item.rows() {
                return Err(Error::invalid(format!(
                    "length {len} invalid for item with {} rows",
                    item.rows()
                )));
            }
        }
        let t_max = items
            .iter()
            .map(|t| t.rows())
            .max()
            .unwrap()
            .max(min_steps.unwrap_or(0));
        let mut data = vec![0.0; t_max * b * d];
        for (i, item) in items.iter().enumerate() {
            for t in 0..item.rows() {
                let dst = (t * b + i) * d;
                data[dst..dst + d].copy_from_slice(item.row(t));
            }
        }
        Ok(Self {
            data: Tensor::new(vec![t_max * b, d], data)?,
            lengths,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.data.rows() / self.batch().max(1)
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Valid rows of item `b` as a `[len_b, D]` matrix.
    pub fn item(&self, b: usize) -> Tensor {
        let (bs, d) = (self.batch(), self.dim());
        let mut out = Vec::with_capacity(self.lengths[b] * d);
        for t in 0..self.lengths[b] {
            out.extend_from_slice(self.data.row(t * bs + b));
        }
        Tensor::new(vec![self.lengths[b], d], out).unwrap()
    }
}

/// A sequence batch living in a [`Graph`].
#[derive(Clone, Debug)]
pub struct SeqVar {
    pub data: Var,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl SeqVar {
    pub fn input(g: &Graph, batch: &SequenceBatch) -> Self {
        Self {
            data: g.input(batch.data.clone()),
            lengths: batch.lengths.clone(),
            steps: batch.steps(),
        }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Row mask over `[T * B]`: true where `t < len_b`.
    pub fn mask(&self) -> Rc<Vec<bool>> {
        Rc::new(row_mask(&self.lengths, self.steps))
    }

    /// Mask over the batch at a single step.
    pub fn step_mask(&self, t: usize) -> Rc<Vec<bool>> {
        Rc::new(self.lengths.iter().map(|&l| t < l).collect())
    }
}

pub fn row_mask(lengths: &[usize], steps: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(lengths.len() * steps);
    for t in 0..steps {
        m.extend(lengths.iter().map(|&l| t < l));
    }
    m
}
