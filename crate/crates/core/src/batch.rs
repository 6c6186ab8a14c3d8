//! Contiguous patch storage for full-batch passes.
//!
//! Samples are packed into fixed-size chunks of stacked patch rows so each
//! chunk costs one matrix product per weight matrix. Chunks are always
//! visited in index order, which keeps every reduction bit-stable.

use ndarray::{s, Array2, ArrayView2};

use crate::dataset::LabeledSample;
use crate::error::{dim_check, LabError, Result};

/// Samples per chunk unless a caller asks otherwise.
pub const DEFAULT_CHUNK: usize = 128;

#[derive(Clone, Debug)]
pub struct PatchChunk {
    /// `(n·P) × d`, sample-major.
    pub rows: Array2<f64>,
    pub labels: Vec<usize>,
    pub single_view: Vec<bool>,
}

impl PatchChunk {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub chunks: Vec<PatchChunk>,
    pub num_patches: usize,
    pub dim: usize,
    pub num_samples: usize,
}

impl PatchBatch {
    pub fn from_samples(samples: &[LabeledSample], chunk: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(LabError::Argument("cannot batch an empty sample set".into()));
        }
        let chunk = chunk.max(1);
        let p = samples[0].num_patches();
        let d = samples[0].dim();
        let mut chunks = Vec::with_capacity(samples.len().div_ceil(chunk));
        for group in samples.chunks(chunk) {
            let mut rows = Array2::<f64>::zeros((group.len() * p, d));
            for (n, x) in group.iter().enumerate() {
                dim_check("patch count", p, x.num_patches())?;
                dim_check("patch dimension", d, x.dim())?;
                rows.slice_mut(s![n * p..(n + 1) * p, ..]).assign(&x.patches);
            }
            chunks.push(PatchChunk {
                rows,
                labels: group.iter().map(|x| x.label).collect(),
                single_view: group.iter().map(|x| x.view.is_single()).collect(),
            });
        }
        Ok(Self {
            chunks,
            num_patches: p,
            dim: d,
            num_samples: samples.len(),
        })
    }
}

/// Sums each sample's block of `P` consecutive rows: `(n·P) × c → n × c`.
pub fn sum_patch_blocks(rows: &ArrayView2<f64>, num_patches: usize) -> Array2<f64> {
    let n = rows.nrows() / num_patches;
    let mut out = Array2::<f64>::zeros((n, rows.ncols()));
    for i in 0..n {
        let mut acc = out.row_mut(i);
        for p in 0..num_patches {
            acc += &rows.row(i * num_patches + p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn block_sums() {
        let rows = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let s = sum_patch_blocks(&rows.view(), 2);
        assert_eq!(s, array![[4.0, 6.0], [12.0, 14.0]]);
    }
}
