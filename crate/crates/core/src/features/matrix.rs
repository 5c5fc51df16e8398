use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::diffusion::LayerId;

/// One feature vector per sample, row-major, with class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    dim: usize,
    labels: Vec<usize>,
    layer: Option<LayerId>,
}

impl FeatureMatrix {
    pub fn new(
        data: Vec<f32>,
        dim: usize,
        labels: Vec<usize>,
        layer: Option<LayerId>,
    ) -> Result<Self, FeatureError> {
        if dim == 0 && !data.is_empty() {
            return Err(FeatureError::Dimension("zero-width rows".into()));
        }
        let n = if dim == 0 { 0 } else { data.len() / dim };
        if n * dim != data.len() || n != labels.len() {
            return Err(FeatureError::Dimension(format!(
                "{} values of width {dim} do not match {} labels",
                data.len(),
                labels.len()
            )));
        }
        Ok(Self {
            data,
            dim,
            labels,
            layer,
        })
    }

    pub fn from_rows(
        rows: &[Vec<f32>],
        labels: Vec<usize>,
        layer: Option<LayerId>,
    ) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureError::Dimension("ragged rows".into()));
        }
        Self::new(rows.concat(), dim, labels, layer)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim.max(1)).take(self.n())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn layer(&self) -> Option<LayerId> {
        self.layer
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            layer: self.layer,
        }
    }

    /// Keeps only the columns where `mask` is set.
    pub fn select_columns(&self, mask: &[bool]) -> Result<Self, FeatureError> {
        if mask.len() != self.dim {
            return Err(FeatureError::Dimension(format!(
                "mask of width {} for {} columns",
                mask.len(),
                self.dim
            )));
        }
        let dim = mask.iter().filter(|&&m| m).count();
        let mut data = Vec::with_capacity(self.n() * dim);
        for row in self.rows() {
            data.extend(row.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v));
        }
        Ok(Self {
            data,
            dim,
            labels: self.labels.clone(),
            layer: None,
        })
    }
}
