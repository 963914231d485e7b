//! Rebuilding a writable counterpart of a read-only serialized model.
//!
//! Deployed model files are inference-only blobs: no training state, no
//! mutable parameters. [`root_model`] deep-copies the parsed graph and every
//! parameter buffer into a [`WritableModel`] whose buffers can be edited and
//! re-serialized byte-for-byte compatibly. Parameter access for the final
//! classification layer goes through [`read_params`] / [`write_params`], which
//! are exact inverses on the stored f32 state.

use crate::format::{
    self, DType, FormatError, GraphDesc, ModelView, OpCode, SerializedModel,
};
use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RootingError {
    #[error("model invariant violated: {0}")]
    InvariantViolation(#[from] FormatError),
    #[error("parameter shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("parameters contain a non-finite value")]
    NonFiniteValue,
    #[error("graph contains no FULLY_CONNECTED operator")]
    NoFullyConnectedLayer,
    #[error("target layer parameters must be F32, found {0:?}")]
    UnsupportedDtype(DType),
}

/// A mutable reconstruction of a serialized model: the graph description plus
/// an owned copy of every parameter buffer.
#[derive(Debug, Clone)]
pub struct WritableModel {
    pub graph: GraphDesc,
    buffers: Vec<Vec<u8>>,
    /// SHA-256 of the source file this model was rooted from, when known.
    pub source_digest: Option<[u8; 32]>,
}

impl WritableModel {
    pub fn buffers(&self) -> &[Vec<u8>] {
        &self.buffers
    }

    pub fn buffer_mut(&mut self, index: usize) -> &mut Vec<u8> {
        &mut self.buffers[index]
    }

    /// Assemble a writable model directly from parts (used by generators).
    pub fn from_parts(graph: GraphDesc, buffers: Vec<Vec<u8>>) -> Self {
        WritableModel { graph, buffers, source_digest: None }
    }
}

impl ModelView for WritableModel {
    fn graph(&self) -> &GraphDesc {
        &self.graph
    }

    fn buffer_bytes(&self, index: usize) -> &[u8] {
        &self.buffers[index]
    }
}

/// Deep-copy a parsed model into its writable counterpart.
pub fn root_model(model: &SerializedModel) -> WritableModel {
    WritableModel {
        graph: model.graph().clone(),
        buffers: (0..model.n_buffers()).map(|i| model.buffer(i).to_vec()).collect(),
        source_digest: Some(Sha256::digest(model.bytes()).into()),
    }
}

/// Serialize back to the canonical byte layout, re-validating every structural
/// invariant first (buffer sizes may have drifted under direct mutation).
pub fn serialize_model(model: &WritableModel) -> Result<Vec<u8>, RootingError> {
    Ok(format::write_model(&model.graph, &model.buffers)?)
}

/// The layer whose weights the solver rewrites: the last fully-connected
/// operator in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetLayerRef {
    pub op_index: usize,
    pub weight_tensor: usize,
    pub bias_tensor: usize,
}

pub fn find_target_layer(graph: &GraphDesc) -> Result<TargetLayerRef, RootingError> {
    graph
        .operators
        .iter()
        .enumerate()
        .rev()
        .find(|(_, op)| op.opcode == OpCode::FullyConnected)
        .map(|(op_index, op)| TargetLayerRef {
            op_index,
            weight_tensor: op.inputs[1],
            bias_tensor: op.inputs[2],
        })
        .ok_or(RootingError::NoFullyConnectedLayer)
}

/// Dense layer parameters in solve precision. `weight` is `[out_features ×
/// in_features]`, matching the stored layout; the layer computes
/// `y = x · weightᵀ + bias`.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn read_params(model: &WritableModel, target: &TargetLayerRef) -> Result<LayerParams, RootingError> {
    let (w_dims, w_vals) = read_f32_tensor(model, target.weight_tensor)?;
    let (b_dims, b_vals) = read_f32_tensor(model, target.bias_tensor)?;
    if w_dims.len() != 2 || b_dims.len() != 1 || b_dims[0] != w_dims[0] {
        return Err(RootingError::ShapeMismatch {
            detail: format!("weight dims {w_dims:?} and bias dims {b_dims:?} do not describe a dense layer"),
        });
    }
    let weight = Array2::from_shape_vec((w_dims[0], w_dims[1]), w_vals)
        .expect("element count validated against dims");
    Ok(LayerParams { weight, bias: Array1::from_vec(b_vals) })
}

/// Write solved parameters back into the target layer's buffers (stored as
/// little-endian f32). Inverse of [`read_params`] on f32-representable values.
pub fn write_params(
    model: &mut WritableModel,
    target: &TargetLayerRef,
    params: &LayerParams,
) -> Result<(), RootingError> {
    if params.weight.iter().chain(params.bias.iter()).any(|v| !v.is_finite()) {
        return Err(RootingError::NonFiniteValue);
    }
    let w_buffer = f32_buffer_of(model, target.weight_tensor)?;
    let b_buffer = f32_buffer_of(model, target.bias_tensor)?;

    let w_tensor = &model.graph.tensors[target.weight_tensor];
    let b_tensor = &model.graph.tensors[target.bias_tensor];
    let w_dims: Vec<usize> = w_tensor.dims.iter().map(|&d| d as usize).collect();
    if w_dims != [params.weight.nrows(), params.weight.ncols()]
        || b_tensor.dims.len() != 1
        || b_tensor.dims[0] as usize != params.bias.len()
    {
        return Err(RootingError::ShapeMismatch {
            detail: format!(
                "params are {}×{} + {}, tensors are {:?} + {:?}",
                params.weight.nrows(),
                params.weight.ncols(),
                params.bias.len(),
                w_tensor.dims,
                b_tensor.dims
            ),
        });
    }

    let mut w_bytes = Vec::with_capacity(params.weight.len() * 4);
    for &v in params.weight.iter() {
        w_bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut b_bytes = Vec::with_capacity(params.bias.len() * 4);
    for &v in params.bias.iter() {
        b_bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    model.buffers[w_buffer] = w_bytes;
    model.buffers[b_buffer] = b_bytes;
    Ok(())
}

fn f32_buffer_of(model: &WritableModel, tensor: usize) -> Result<usize, RootingError> {
    let desc = &model.graph.tensors[tensor];
    if desc.dtype != DType::F32 {
        return Err(RootingError::UnsupportedDtype(desc.dtype));
    }
    desc.buffer.ok_or_else(|| RootingError::ShapeMismatch {
        detail: format!("tensor {} ({}) is not buffer-backed", tensor, desc.name),
    })
}

fn read_f32_tensor(model: &WritableModel, tensor: usize) -> Result<(Vec<usize>, Vec<f64>), RootingError> {
    let buffer = f32_buffer_of(model, tensor)?;
    let desc = &model.graph.tensors[tensor];
    let dims: Vec<usize> = desc.dims.iter().map(|&d| d as usize).collect();
    let vals = model.buffers[buffer]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((dims, vals))
}

// ─── tests ──────────────────────────────────────────────────────────────────
