//! Sample batches and the `SDS1` dataset container.
//!
//! An `SDS1` file is little-endian: magic `"SDS1"` · u32 n_samples · u8 rank ·
//! u32 × rank per-sample dims · f32 row-major sample data · u32 × n_samples
//! labels, where `0xFFFF_FFFF` marks an unlabeled sample (a file is either
//! fully labeled or fully unlabeled). Samples are promoted to f64 in memory —
//! all downstream arithmetic runs in double precision.

use ndarray::Array2;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad dataset magic {found:?}, expected \"SDS1\"")]
    BadMagic { found: [u8; 4] },
    #[error("truncated dataset at byte {offset}")]
    Truncated { offset: usize },
    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("dataset mixes labeled and unlabeled samples")]
    MixedLabels,
    #[error("label {label} cannot be stored (reserved sentinel)")]
    UnstorableLabel { label: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

const MAGIC: [u8; 4] = *b"SDS1";
const UNLABELED: u32 = 0xFFFF_FFFF;

/// A batch of equally-shaped samples, flattened row-major into `data` rows.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Per-sample shape, e.g. `[height, width, channels]`.
    pub dims: Vec<usize>,
    /// `n_samples × prod(dims)`.
    pub data: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(dims: Vec<usize>, data: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self, DatasetError> {
        let per_sample: usize = dims.iter().product();
        if per_sample != data.ncols() {
            return Err(DatasetError::ShapeMismatch {
                detail: format!("dims {dims:?} describe {per_sample} values, rows hold {}", data.ncols()),
            });
        }
        if let Some(l) = &labels {
            if l.len() != data.nrows() {
                return Err(DatasetError::ShapeMismatch {
                    detail: format!("{} labels for {} samples", l.len(), data.nrows()),
                });
            }
        }
        Ok(Batch { dims, data, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn sample_len(&self) -> usize {
        self.data.ncols()
    }

    /// Row subset, preserving order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let data = Array2::from_shape_fn((indices.len(), self.sample_len()), |(i, j)| {
            self.data[(indices[i], j)]
        });
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Batch { dims: self.dims.clone(), data, labels }
    }

    /// Concatenate batches of identical shape and labeling.
    pub fn concat(parts: &[&Batch]) -> Result<Batch, DatasetError> {
        let first = parts.first().expect("concat of at least one batch");
        let total: usize = parts.iter().map(|b| b.n_samples()).sum();
        let mut data = Array2::zeros((total, first.sample_len()));
        let labeled = first.labels.is_some();
        let mut labels = if labeled { Some(Vec::with_capacity(total)) } else { None };
        let mut row = 0;
        for part in parts {
            if part.dims != first.dims {
                return Err(DatasetError::ShapeMismatch {
                    detail: format!("cannot concat dims {:?} with {:?}", part.dims, first.dims),
                });
            }
            if part.labels.is_some() != labeled {
                return Err(DatasetError::MixedLabels);
            }
            for r in 0..part.n_samples() {
                for c in 0..part.sample_len() {
                    data[(row, c)] = part.data[(r, c)];
                }
                row += 1;
            }
            if let (Some(acc), Some(l)) = (&mut labels, &part.labels) {
                acc.extend_from_slice(l);
            }
        }
        Batch::new(first.dims.clone(), data, labels)
    }
}

/// Decode an `SDS1` byte stream.
pub fn read_sds(bytes: &[u8]) -> Result<Batch, DatasetError> {
    let mut found = [0u8; 4];
    let head = bytes.get(..4).unwrap_or(&[]);
    found[..head.len()].copy_from_slice(head);
    if found != MAGIC {
        return Err(DatasetError::BadMagic { found });
    }
    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], DatasetError> {
        if bytes.len() - (*pos).min(bytes.len()) < n {
            return Err(DatasetError::Truncated { offset: *pos });
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };

    let n_samples = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let rank = take(&mut pos, 1)?[0] as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let per_sample: usize = dims.iter().product();

    let blob = take(&mut pos, n_samples.saturating_mul(per_sample).saturating_mul(4))?;
    let mut values = Vec::with_capacity(n_samples * per_sample);
    for chunk in blob.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let data = Array2::from_shape_vec((n_samples, per_sample), values)
        .expect("blob length checked above");

    let mut raw_labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        raw_labels.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
    }
    let labels = if raw_labels.iter().all(|&l| l == UNLABELED) {
        None
    } else if raw_labels.iter().any(|&l| l == UNLABELED) {
        return Err(DatasetError::MixedLabels);
    } else {
        Some(raw_labels.into_iter().map(|l| l as usize).collect())
    };

    Batch::new(dims, data, labels)
}

/// Encode a batch as `SDS1` bytes (samples stored as f32).
pub fn write_sds(batch: &Batch) -> Result<Vec<u8>, DatasetError> {
    if let Some(labels) = &batch.labels {
        if let Some(&bad) = labels.iter().find(|&&l| l as u64 >= UNLABELED as u64) {
            return Err(DatasetError::UnstorableLabel { label: bad });
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(batch.n_samples() as u32).to_le_bytes());
    out.push(batch.dims.len() as u8);
    for &d in &batch.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in batch.data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match &batch.labels {
        Some(labels) => {
            for &l in labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        None => {
            for _ in 0..batch.n_samples() {
                out.extend_from_slice(&UNLABELED.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn load_sds(path: &Path) -> Result<Batch, DatasetError> {
    read_sds(&std::fs::read(path)?)
}

pub fn save_sds(batch: &Batch, path: &Path) -> Result<(), DatasetError> {
    Ok(std::fs::write(path, write_sds(batch)?)?)
}

// ─── tests ──────────────────────────────────────────────────────────────────
