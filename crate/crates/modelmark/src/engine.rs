//! Forward-pass inference over model graphs.
//!
//! Executes operators in their stored (topological) order, accumulating in
//! f64 regardless of the stored parameter dtype. The surface is deliberately
//! inference-only: there is no gradient, no training mode, no parameter
//! update — watermark embedding relies purely on [`run_with_tap`] captures
//! plus a closed-form solve elsewhere.
//!
//! Conventions: images are `[height, width, channels]` row-major; a
//! fully-connected layer with weight `[out, in]` computes `y = x · Wᵀ + b`;
//! `SAME` padding splits evenly with the extra row/column at the bottom/right;
//! argmax ties resolve to the smallest index.

use crate::dataset::Batch;
use crate::format::{DType, FormatError, GraphDesc, ModelView, OpCode, OpOptions, Padding};
use crate::rooting::TargetLayerRef;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("dtype {0:?} is not executable")]
    UnsupportedDtype(DType),
    #[error("non-finite activation in tensor {tensor} ({name})")]
    NonFiniteActivation { tensor: usize, name: String },
    #[error("operator {op}: parameter tensor {tensor} has no backing buffer")]
    DynamicParameter { op: usize, tensor: usize },
    #[error("graph io unsuitable for inference: {0}")]
    BadIo(#[from] FormatError),
    #[error("target layer reference does not point at a FULLY_CONNECTED operator")]
    BadTargetLayer,
}

/// Inference output for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `n_samples × num_labels`; pre-softmax scores when the graph ends in a
    /// SOFTMAX operator, otherwise the raw graph output.
    pub logits: Array2<f64>,
    /// Row-wise index of the largest logit (smallest index on ties).
    pub argmax: Vec<usize>,
    /// Softmax output when the graph's final operator produces it.
    pub probabilities: Option<Array2<f64>>,
}

/// Activations captured around one fully-connected layer during a single
/// forward pass: `outputs = inputs · Wᵀ + b` row for row.
#[derive(Debug, Clone)]
pub struct ActivationTap {
    /// `n_samples × in_features`.
    pub inputs: Array2<f64>,
    /// `n_samples × out_features`.
    pub outputs: Array2<f64>,
}

pub fn run<M: ModelView>(model: &M, batch: &Batch) -> Result<Prediction, EngineError> {
    Ok(execute(model, batch, None)?.0)
}

pub fn run_with_tap<M: ModelView>(
    model: &M,
    batch: &Batch,
    target: &TargetLayerRef,
) -> Result<(Prediction, ActivationTap), EngineError> {
    let (prediction, tap) = execute(model, batch, Some(target))?;
    Ok((prediction, tap.expect("tap requested")))
}

/// One activation value set: per-sample shape plus the flattened batch matrix.
struct Act {
    dims: Vec<usize>,
    data: Array2<f64>,
}

fn execute<M: ModelView>(
    model: &M,
    batch: &Batch,
    target: Option<&TargetLayerRef>,
) -> Result<(Prediction, Option<ActivationTap>), EngineError> {
    let graph = model.graph();

    if let Some(bad) = graph.tensors.iter().find(|t| t.dtype == DType::U8) {
        return Err(EngineError::UnsupportedDtype(bad.dtype));
    }
    if graph.inputs.len() != 1 {
        return Err(FormatError::MultipleInputs { count: graph.inputs.len() }.into());
    }
    if graph.outputs.len() != 1 {
        return Err(FormatError::MultipleOutputs { count: graph.outputs.len() }.into());
    }
    let input_idx = graph.inputs[0];
    let output_idx = graph.outputs[0];

    let declared: Vec<usize> = graph.tensors[input_idx].dims.iter().map(|&d| d as usize).collect();
    if batch.dims != declared {
        return Err(EngineError::ShapeMismatch {
            detail: format!("batch samples are {:?}, graph input wants {:?}", batch.dims, declared),
        });
    }
    if let Some(t) = target {
        let op = graph.operators.get(t.op_index).ok_or(EngineError::BadTargetLayer)?;
        if op.opcode != OpCode::FullyConnected {
            return Err(EngineError::BadTargetLayer);
        }
    }

    let mut acts: Vec<Option<Act>> = (0..graph.tensors.len()).map(|_| None).collect();
    acts[input_idx] = Some(Act { dims: batch.dims.clone(), data: batch.data.clone() });
    check_finite(graph, input_idx, &acts)?;

    let mut tap = None;
    for (op_idx, op) in graph.operators.iter().enumerate() {
        let x = acts[op.inputs[0]].as_ref().ok_or_else(|| EngineError::ShapeMismatch {
            detail: format!("operator {op_idx} reads tensor {} before it is produced", op.inputs[0]),
        })?;
        let out = match op.opcode {
            OpCode::FullyConnected => fully_connected(model, graph, op_idx, x)?,
            OpCode::Conv2d => conv2d(model, graph, op_idx, x)?,
            OpCode::MaxPool2d => max_pool(graph, op_idx, x)?,
            OpCode::Relu => Act { dims: x.dims.clone(), data: x.data.mapv(|v| v.max(0.0)) },
            OpCode::Softmax => Act { dims: x.dims.clone(), data: softmax_rows(&x.data) },
            OpCode::Flatten => Act { dims: vec![x.dims.iter().product()], data: x.data.clone() },
        };

        let out_idx = op.outputs[0];
        let declared: Vec<usize> = graph.tensors[out_idx].dims.iter().map(|&d| d as usize).collect();
        if out.dims != declared {
            return Err(EngineError::ShapeMismatch {
                detail: format!(
                    "operator {op_idx} ({:?}) produced {:?}, tensor {} declares {:?}",
                    op.opcode, out.dims, graph.tensors[out_idx].name, declared
                ),
            });
        }

        if target.map(|t| t.op_index) == Some(op_idx) {
            tap = Some(ActivationTap {
                inputs: acts[op.inputs[0]].as_ref().unwrap().data.clone(),
                outputs: out.data.clone(),
            });
        }
        acts[out_idx] = Some(out);
        check_finite(graph, out_idx, &acts)?;
    }

    let raw = acts[output_idx].take().ok_or_else(|| EngineError::ShapeMismatch {
        detail: "graph output tensor is never produced".into(),
    })?;

    // When the final producer is a softmax, report its input as the logits
    // and the softmax itself as probabilities.
    let final_op = graph.operators.iter().rposition(|op| op.outputs[0] == output_idx);
    let (logits, probabilities) = match final_op {
        Some(i) if graph.operators[i].opcode == OpCode::Softmax => {
            let pre = acts[graph.operators[i].inputs[0]]
                .take()
                .expect("softmax input was produced");
            (pre.data, Some(raw.data))
        }
        _ => (raw.data, None),
    };

    let argmax = argmax_rows(&logits);
    Ok((Prediction { logits, argmax, probabilities }, tap))
}

fn check_finite(graph: &GraphDesc, tensor: usize, acts: &[Option<Act>]) -> Result<(), EngineError> {
    let act = acts[tensor].as_ref().unwrap();
    if act.data.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFiniteActivation {
            tensor,
            name: graph.tensors[tensor].name.clone(),
        });
    }
    Ok(())
}

pub(crate) fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn softmax_rows(data: &Array2<f64>) -> Array2<f64> {
    let mut out = data.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Fetch a parameter tensor as (dims, f64 values).
fn param<M: ModelView>(
    model: &M,
    graph: &GraphDesc,
    op_idx: usize,
    tensor: usize,
) -> Result<(Vec<usize>, Vec<f64>), EngineError> {
    let desc = &graph.tensors[tensor];
    let buffer = desc
        .buffer
        .ok_or(EngineError::DynamicParameter { op: op_idx, tensor })?;
    let bytes = model.buffer_bytes(buffer);
    let values = match desc.dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::I32 => bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::U8 => return Err(EngineError::UnsupportedDtype(DType::U8)),
    };
    Ok((desc.dims.iter().map(|&d| d as usize).collect(), values))
}

fn fully_connected<M: ModelView>(
    model: &M,
    graph: &GraphDesc,
    op_idx: usize,
    x: &Act,
) -> Result<Act, EngineError> {
    let op = &graph.operators[op_idx];
    let (w_dims, w_vals) = param(model, graph, op_idx, op.inputs[1])?;
    let (b_dims, b_vals) = param(model, graph, op_idx, op.inputs[2])?;
    if w_dims.len() != 2 || b_dims != [w_dims[0]] {
        return Err(EngineError::ShapeMismatch {
            detail: format!("dense weight {w_dims:?} / bias {b_dims:?} malformed at operator {op_idx}"),
        });
    }
    let (out_f, in_f) = (w_dims[0], w_dims[1]);
    if x.data.ncols() != in_f {
        return Err(EngineError::ShapeMismatch {
            detail: format!("operator {op_idx} expects {in_f} input features, activation has {}", x.data.ncols()),
        });
    }
    // y = x · Wᵀ + b, W stored [out, in].
    let w = Array2::from_shape_vec((out_f, in_f), w_vals).expect("validated size");
    let mut y = x.data.dot(&w.t());
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(&b_vals) {
            *v += b;
        }
    }
    Ok(Act { dims: vec![out_f], data: y })
}

fn conv2d<M: ModelView>(
    model: &M,
    graph: &GraphDesc,
    op_idx: usize,
    x: &Act,
) -> Result<Act, EngineError> {
    let op = &graph.operators[op_idx];
    let (stride_h, stride_w, padding) = match op.options {
        OpOptions::Conv2d { stride_h, stride_w, padding } => (stride_h as usize, stride_w as usize, padding),
        _ => unreachable!("options validated at parse"),
    };
    if stride_h == 0 || stride_w == 0 {
        return Err(EngineError::ShapeMismatch { detail: format!("operator {op_idx} has a zero stride") });
    }
    let [h, w, c] = *as_image_dims(&x.dims, op_idx)?;
    let (k_dims, k_vals) = param(model, graph, op_idx, op.inputs[1])?;
    let (b_dims, b_vals) = param(model, graph, op_idx, op.inputs[2])?;
    if k_dims.len() != 4 || k_dims[3] != c || b_dims != [k_dims[0]] {
        return Err(EngineError::ShapeMismatch {
            detail: format!(
                "conv kernel {k_dims:?} / bias {b_dims:?} incompatible with input {:?} at operator {op_idx}",
                x.dims
            ),
        });
    }
    let (oc, kh, kw) = (k_dims[0], k_dims[1], k_dims[2]);

    // Output height/width plus implicit top-left zero padding.
    let (oh, ow, pad_top, pad_left) = match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(EngineError::ShapeMismatch {
                    detail: format!("operator {op_idx}: kernel {kh}×{kw} exceeds input {h}×{w}"),
                });
            }
            ((h - kh) / stride_h + 1, (w - kw) / stride_w + 1, 0usize, 0usize)
        }
        Padding::Same => {
            let oh = h.div_ceil(stride_h);
            let ow = w.div_ceil(stride_w);
            let pad_h = ((oh - 1) * stride_h + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride_w + kw).saturating_sub(w);
            // Extra padding goes to the bottom/right.
            (oh, ow, pad_h / 2, pad_w / 2)
        }
    };

    let n = x.data.nrows();
    let mut out = Array2::<f64>::zeros((n, oh * ow * oc));
    for s in 0..n {
        let sample = x.data.row(s);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..oc {
                    let mut acc = b_vals[o];
                    for ky in 0..kh {
                        let iy = (oy * stride_h + ky) as isize - pad_top as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride_w + kx) as isize - pad_left as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let pixel = (iy as usize * w + ix as usize) * c;
                            let kernel = ((o * kh + ky) * kw + kx) * c;
                            for ch in 0..c {
                                acc += sample[pixel + ch] * k_vals[kernel + ch];
                            }
                        }
                    }
                    out[(s, (oy * ow + ox) * oc + o)] = acc;
                }
            }
        }
    }
    Ok(Act { dims: vec![oh, ow, oc], data: out })
}

fn max_pool(graph: &GraphDesc, op_idx: usize, x: &Act) -> Result<Act, EngineError> {
    let op = &graph.operators[op_idx];
    let (pool_h, pool_w, stride_h, stride_w) = match op.options {
        OpOptions::MaxPool2d { pool_h, pool_w, stride_h, stride_w } => {
            (pool_h as usize, pool_w as usize, stride_h as usize, stride_w as usize)
        }
        _ => unreachable!("options validated at parse"),
    };
    if pool_h == 0 || pool_w == 0 || stride_h == 0 || stride_w == 0 {
        return Err(EngineError::ShapeMismatch {
            detail: format!("operator {op_idx} has a zero pool size or stride"),
        });
    }
    let [h, w, c] = *as_image_dims(&x.dims, op_idx)?;
    if h < pool_h || w < pool_w {
        return Err(EngineError::ShapeMismatch {
            detail: format!("operator {op_idx}: pool {pool_h}×{pool_w} exceeds input {h}×{w}"),
        });
    }
    let oh = (h - pool_h) / stride_h + 1;
    let ow = (w - pool_w) / stride_w + 1;

    let n = x.data.nrows();
    let mut out = Array2::<f64>::zeros((n, oh * ow * c));
    for s in 0..n {
        let sample = x.data.row(s);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for py in 0..pool_h {
                        for px in 0..pool_w {
                            let iy = oy * stride_h + py;
                            let ix = ox * stride_w + px;
                            m = m.max(sample[(iy * w + ix) * c + ch]);
                        }
                    }
                    out[(s, (oy * ow + ox) * c + ch)] = m;
                }
            }
        }
    }
    Ok(Act { dims: vec![oh, ow, c], data: out })
}

fn as_image_dims<'a>(dims: &'a [usize], op_idx: usize) -> Result<&'a [usize; 3], EngineError> {
    dims.try_into().map_err(|_| EngineError::ShapeMismatch {
        detail: format!("operator {op_idx} needs a [h, w, c] activation, found {dims:?}"),
    })
}

// ─── tests ──────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{OperatorDesc, TensorDesc};
    use crate::rooting::{find_target_layer, read_params, WritableModel};
    use ndarray::array;

    fn t(name: &str, dims: &[u32], buffer: Option<usize>) -> TensorDesc {
        TensorDesc { name: name.into(), dtype: DType::F32, dims: dims.to_vec(), buffer }
    }

    fn f32s(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn dense_1x1() -> WritableModel {
        let graph = GraphDesc {
            tensors: vec![
                t("in", &[1], None),
                t("w", &[1, 1], Some(0)),
                t("b", &[1], Some(1)),
                t("out", &[1], None),
            ],
            operators: vec![OperatorDesc {
                opcode: OpCode::FullyConnected,
                inputs: vec![0, 1, 2],
                outputs: vec![3],
                options: OpOptions::None,
            }],
            inputs: vec![0],
            outputs: vec![3],
        };
        WritableModel::from_parts(graph, vec![f32s(&[2.0]), f32s(&[1.0])])
    }

    #[test]
    fn dense_scalar_example() {
        // W = [[2]], b = [1], x = [3] → 2·3 + 1 = 7.
        let model = dense_1x1();
        let batch = Batch::new(vec![1], array![[3.0]], None).unwrap();
        let pred = run(&model, &batch).unwrap();
        assert_eq!(pred.logits, array![[7.0]]);
        assert_eq!(pred.argmax, vec![0]);
        assert!(pred.probabilities.is_none());
    }

    fn dense_softmax_2class(w: &[f32; 4], b: &[f32; 2]) -> WritableModel {
        let graph = GraphDesc {
            tensors: vec![
                t("in", &[2], None),
                t("w", &[2, 2], Some(0)),
                t("b", &[2], Some(1)),
                t("logits", &[2], None),
                t("probs", &[2], None),
            ],
            operators: vec![
                OperatorDesc { opcode: OpCode::FullyConnected, inputs: vec![0, 1, 2], outputs: vec![3], options: OpOptions::None },
                OperatorDesc { opcode: OpCode::Softmax, inputs: vec![3], outputs: vec![4], options: OpOptions::None },
            ],
            inputs: vec![0],
            outputs: vec![4],
        };
        WritableModel::from_parts(graph, vec![f32s(w), f32s(b)])
    }

    #[test]
    fn logits_are_pre_softmax_and_probabilities_sum_to_one() {
        let model = dense_softmax_2class(&[1.0, 0.0, 0.0, 1.0], &[0.5, -0.5]);
        let batch = Batch::new(vec![2], array![[2.0, 1.0], [1000.0, 999.0]], None).unwrap();
        let pred = run(&model, &batch).unwrap();
        // Logits bypass the softmax: x·I + b.
        assert_eq!(pred.logits, array![[2.5, 0.5], [1000.5, 998.5]]);
        let probs = pred.probabilities.unwrap();
        for row in probs.rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        // Softmax preserves the argmax.
        assert_eq!(pred.argmax, argmax_rows(&probs));
    }

    #[test]
    fn argmax_breaks_ties_toward_smallest_index() {
        // Identical weight rows force equal logits in every column.
        let model = dense_softmax_2class(&[1.0, 1.0, 1.0, 1.0], &[0.0, 0.0]);
        let batch = Batch::new(vec![2], array![[0.3, 0.7]], None).unwrap();
        let pred = run(&model, &batch).unwrap();
        assert_eq!(pred.logits[(0, 0)], pred.logits[(0, 1)]);
        assert_eq!(pred.argmax, vec![0]);
    }

    #[test]
    fn tap_matches_logits_and_dense_equation() {
        let model = dense_softmax_2class(&[0.25, -1.5, 2.0, 0.75], &[0.1, -0.2]);
        let batch = Batch::new(vec![2], array![[1.0, 2.0], [-0.5, 0.25], [3.0, -4.0]], None).unwrap();
        let target = find_target_layer(&model.graph).unwrap();
        let (pred, tap) = run_with_tap(&model, &batch, &target).unwrap();
        // The tapped dense layer is the last one before softmax, so its
        // outputs are exactly the reported logits.
        assert_eq!(tap.outputs, pred.logits);
        assert_eq!(tap.inputs, batch.data);
        // Recompute y = x·Wᵀ + b from the stored parameters.
        let params = read_params(&model, &target).unwrap();
        let mut expect = tap.inputs.dot(&params.weight.t());
        for mut row in expect.rows_mut() {
            for (v, b) in row.iter_mut().zip(params.bias.iter()) {
                *v += b;
            }
        }
        let scale = 1.0 + tap.outputs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_err = (&expect - &tap.outputs).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_err <= 1e-5 * scale);
    }

    fn conv_graph(
        input: &[u32; 3],
        kernel_dims: &[u32; 4],
        kernel: &[f32],
        out_dims: &[u32; 3],
        stride: (u16, u16),
        padding: Padding,
    ) -> WritableModel {
        let oc = kernel_dims[0] as usize;
        let graph = GraphDesc {
            tensors: vec![
                t("in", input, None),
                t("k", kernel_dims, Some(0)),
                t("b", &[kernel_dims[0]], Some(1)),
                t("out", out_dims, None),
            ],
            operators: vec![OperatorDesc {
                opcode: OpCode::Conv2d,
                inputs: vec![0, 1, 2],
                outputs: vec![3],
                options: OpOptions::Conv2d { stride_h: stride.0, stride_w: stride.1, padding },
            }],
            inputs: vec![0],
            outputs: vec![3],
        };
        WritableModel::from_parts(graph, vec![f32s(kernel), f32s(&vec![0.0; oc])])
    }

    #[test]
    fn delta_kernel_valid_conv_is_center_crop() {
        // 3×3 kernel with a single 1 at its center: VALID output is the
        // input's central (h−2)×(w−2) crop.
        let mut kernel = [0.0f32; 9];
        kernel[4] = 1.0;
        let model = conv_graph(&[4, 4, 1], &[1, 3, 3, 1], &kernel, &[2, 2, 1], (1, 1), Padding::Valid);
        let sample: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let batch = Batch::new(vec![4, 4, 1], Array2::from_shape_vec((1, 16), sample).unwrap(), None).unwrap();
        let pred = run(&model, &batch).unwrap();
        // Centers of the four 3×3 windows of a 4×4 grid: 5, 6, 9, 10.
        assert_eq!(pred.logits, array![[5.0, 6.0, 9.0, 10.0]]);
    }

    #[test]
    fn same_padding_pads_bottom_right() {
        // 2×2 ones kernel on a 2×2 input, stride 1, SAME: output stays 2×2
        // and the out-of-range taps (bottom/right) read zeros.
        let model = conv_graph(&[2, 2, 1], &[1, 2, 2, 1], &[1.0; 4], &[2, 2, 1], (1, 1), Padding::Same);
        let batch = Batch::new(vec![2, 2, 1], array![[1.0, 2.0, 3.0, 4.0]], None).unwrap();
        let pred = run(&model, &batch).unwrap();
        assert_eq!(pred.logits, array![[10.0, 6.0, 7.0, 4.0]]);
    }

    #[test]
    fn max_pool_takes_window_maxima() {
        let graph = GraphDesc {
            tensors: vec![t("in", &[4, 4, 1], None), t("out", &[2, 2, 1], None)],
            operators: vec![OperatorDesc {
                opcode: OpCode::MaxPool2d,
                inputs: vec![0],
                outputs: vec![1],
                options: OpOptions::MaxPool2d { pool_h: 2, pool_w: 2, stride_h: 2, stride_w: 2 },
            }],
            inputs: vec![0],
            outputs: vec![1],
        };
        let model = WritableModel::from_parts(graph, vec![]);
        let sample = vec![
            1.0, 5.0, 2.0, 0.0, //
            3.0, 4.0, 1.0, 8.0, //
            0.5, 0.25, -1.0, -2.0, //
            0.75, 0.1, -3.0, -0.5,
        ];
        let batch = Batch::new(vec![4, 4, 1], Array2::from_shape_vec((1, 16), sample).unwrap(), None).unwrap();
        let pred = run(&model, &batch).unwrap();
        assert_eq!(pred.logits, array![[5.0, 8.0, 0.75, -0.5]]);
    }

    #[test]
    fn relu_clamps_negatives_and_flatten_reshapes() {
        let graph = GraphDesc {
            tensors: vec![
                t("in", &[2, 2, 1], None),
                t("r", &[2, 2, 1], None),
                t("flat", &[4], None),
            ],
            operators: vec![
                OperatorDesc { opcode: OpCode::Relu, inputs: vec![0], outputs: vec![1], options: OpOptions::None },
                OperatorDesc { opcode: OpCode::Flatten, inputs: vec![1], outputs: vec![2], options: OpOptions::None },
            ],
            inputs: vec![0],
            outputs: vec![2],
        };
        let model = WritableModel::from_parts(graph, vec![]);
        let batch = Batch::new(vec![2, 2, 1], array![[-1.0, 2.0, -0.5, 0.0]], None).unwrap();
        let pred = run(&model, &batch).unwrap();
        assert_eq!(pred.logits, array![[0.0, 2.0, 0.0, 0.0]]);
    }

    #[test]
    fn batch_shape_mismatch_is_rejected() {
        let model = dense_1x1();
        let batch = Batch::new(vec![2], array![[1.0, 2.0]], None).unwrap();
        assert!(matches!(run(&model, &batch), Err(EngineError::ShapeMismatch { .. })));
    }

    #[test]
    fn u8_models_are_rejected() {
        let mut model = dense_1x1();
        model.graph.tensors[1].dtype = DType::U8;
        let batch = Batch::new(vec![1], array![[1.0]], None).unwrap();
        assert!(matches!(run(&model, &batch), Err(EngineError::UnsupportedDtype(DType::U8))));
    }

    #[test]
    fn non_finite_activations_are_reported() {
        let model = dense_1x1();
        let batch = Batch::new(vec![1], array![[f64::INFINITY]], None).unwrap();
        assert!(matches!(run(&model, &batch), Err(EngineError::NonFiniteActivation { .. })));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let model = dense_softmax_2class(&[0.3, -0.7, 1.1, 0.9], &[0.01, -0.02]);
        let batch = Batch::new(vec![2], array![[0.123, -4.56], [7.89, 0.001]], None).unwrap();
        let a = run(&model, &batch).unwrap();
        let b = run(&model, &batch).unwrap();
        let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        assert_eq!(a.argmax, b.argmax);
        assert_eq!(bits(&a.probabilities.unwrap()), bits(&b.probabilities.unwrap()));
    }
}
