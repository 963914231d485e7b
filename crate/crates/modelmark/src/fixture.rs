//! Synthetic classification fixtures: seeded Gaussian class clusters plus a
//! small classifier whose head is solved in closed form — no training loop.
//!
//! Each class gets a mean at distance `class_separation` (in per-coordinate
//! noise std units) from the others; samples are mean + unit Gaussian noise.
//! `LINEAR_HEAD` is Flatten → FullyConnected → Softmax with the dense layer
//! fit by ridge-regularized least squares onto one-hot targets. `CONV_HEAD`
//! prepends a fixed seeded Conv2d → Relu → MaxPool2d feature stage and fits
//! the same head on the extracted features.

use std::path::{Path, PathBuf};

use crate::dataset::{self, Batch, DatasetError};
use crate::engine::{self, EngineError};
use crate::format::{
    DType, FormatError, GraphDesc, OpCode, OpOptions, OperatorDesc, Padding, TensorDesc,
};
use crate::linalg::{self, LinalgError};
use crate::package::{AppPackage, EncryptedRef, Manifest, ModelRef, PackageError};
use crate::rooting::{
    self, find_target_layer, write_params, LayerParams, RootingError, WritableModel,
};
use crate::seeds::rng_for;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("classes are not separable at this spacing: clean accuracy {accuracy:.4} < 0.9; increase class_separation")]
    SeparationTooSmall { accuracy: f64 },
    #[error("fixture spec unbuildable: {detail}")]
    BadSpec { detail: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Rooting(#[from] RootingError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    LinearHead,
    ConvHead,
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub classes: usize,
    /// `[height, width, channels]`.
    pub input_shape: [usize; 3],
    pub arch: Architecture,
    pub samples_per_class: usize,
    /// Cluster-mean spacing in units of the per-coordinate noise std.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            classes: 3,
            input_shape: [12, 12, 1],
            arch: Architecture::LinearHead,
            samples_per_class: 100,
            class_separation: 6.0,
            seed: 0,
        }
    }
}

/// A generated fixture: the model in both forms, labeled train/test draws, an
/// unlabeled pool draw (for synthesis scenarios), and label names.
pub struct Fixture {
    pub model: WritableModel,
    pub model_bytes: Vec<u8>,
    pub train: Batch,
    pub test: Batch,
    pub pool: Batch,
    pub label_names: Vec<String>,
    /// Clean accuracy of the stored model on `test`, computed closed-form.
    pub clean_accuracy: f64,
}

const CONV_FILTERS: usize = 8;
const CONV_KERNEL: usize = 3;
const MIN_CLEAN_ACCURACY: f64 = 0.9;

// Seed streams.
const S_MEANS: u64 = 1;
const S_TRAIN: u64 = 2;
const S_TEST: u64 = 3;
const S_POOL: u64 = 4;
const S_KERNEL: u64 = 5;

pub fn gen_fixture(spec: &FixtureSpec) -> Result<Fixture, FixtureError> {
    let [h, w, c] = spec.input_shape;
    let dim = h * w * c;
    if spec.classes < 2 || spec.samples_per_class == 0 || dim == 0 {
        return Err(FixtureError::BadSpec {
            detail: format!(
                "need >=2 classes, >=1 sample per class and a non-empty shape, got {} / {} / {:?}",
                spec.classes, spec.samples_per_class, spec.input_shape
            ),
        });
    }
    if spec.arch == Architecture::ConvHead && (h < CONV_KERNEL + 1 || w < CONV_KERNEL + 1) {
        return Err(FixtureError::BadSpec {
            detail: format!("CONV_HEAD needs at least a {0}×{0} input", CONV_KERNEL + 1),
        });
    }

    // Class means: random orthonormal combinations of low-frequency cosine
    // fields, scaled so every pairwise distance is exactly
    // `class_separation` (orthogonal means of norm sep/√2). Low-frequency
    // content matters: local conv filters transmit smooth class signal but
    // average white class signal away.
    let means = class_means(spec)?;

    let train = draw_labeled(spec, &means, spec.samples_per_class, S_TRAIN);
    let test = draw_labeled(spec, &means, spec.samples_per_class, S_TEST);
    let mut pool = draw_labeled(spec, &means, spec.samples_per_class, S_POOL);
    pool.labels = None;

    let mut model = build_graph(spec)?;
    let target = find_target_layer(&model.graph)?;

    // Features the head sees: raw flattened pixels for LINEAR_HEAD, the
    // conv-stage output otherwise (tapped at the still-zeroed dense layer).
    let feats_train = features(&model, &train, &target)?;
    let (weight, bias) = ridge_fit(&feats_train, train.labels.as_ref().unwrap(), spec.classes)?;
    write_params(&mut model, &target, &LayerParams { weight, bias })?;

    // Closed-form evaluation of the stored (f32-rounded) parameters.
    let stored = rooting::read_params(&model, &target)?;
    let feats_test = features(&model, &test, &target)?;
    let mut logits = feats_test.dot(&stored.weight.t());
    for mut row in logits.rows_mut() {
        for (v, b) in row.iter_mut().zip(stored.bias.iter()) {
            *v += b;
        }
    }
    let predicted = engine::argmax_rows(&logits);
    let truth = test.labels.as_ref().unwrap();
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let clean_accuracy = correct as f64 / truth.len() as f64;
    if clean_accuracy < MIN_CLEAN_ACCURACY {
        return Err(FixtureError::SeparationTooSmall { accuracy: clean_accuracy });
    }

    let model_bytes = rooting::serialize_model(&model)?;
    let label_names = (0..spec.classes).map(|i| format!("class_{i}")).collect();
    Ok(Fixture { model, model_bytes, train, test, pool, label_names, clean_accuracy })
}

pub const PACKAGE_MODEL_ENTRY: &str = "assets/model.sdlm";
pub const PACKAGE_LABELS_ENTRY: &str = "assets/labels.txt";
pub const PACKAGE_KEY_ID: &str = "k0";

/// Paths [`emit_fixture`] writes under its output directory.
pub struct EmittedFixture {
    pub package: PathBuf,
    pub model: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub pool: PathBuf,
    pub labels: PathBuf,
}

/// Writes the fixture to disk: the model, its datasets, the label file, and
/// an app package wrapping the model and labels. The datasets stay outside
/// the package — they stand for data an app never ships. With a key, the
/// packaged model entry is stored encrypted.
pub fn emit_fixture(
    fix: &Fixture,
    dir: &Path,
    encrypt_key: Option<&[u8]>,
) -> Result<EmittedFixture, FixtureError> {
    let labels_text = fix.label_names.join("\n") + "\n";
    let mut manifest = Manifest::new("com.modelmark.fixture");
    manifest.models.push(ModelRef {
        entry: PACKAGE_MODEL_ENTRY.to_string(),
        labels: Some(PACKAGE_LABELS_ENTRY.to_string()),
    });
    if let Some(key) = encrypt_key {
        manifest.encrypted_models.push(EncryptedRef {
            entry: PACKAGE_MODEL_ENTRY.to_string(),
            key_id: PACKAGE_KEY_ID.to_string(),
        });
        manifest.keys.insert(PACKAGE_KEY_ID.to_string(), hex::encode(key));
    }
    let pkg = AppPackage::build(
        manifest,
        vec![
            (PACKAGE_MODEL_ENTRY.to_string(), fix.model_bytes.clone()),
            (PACKAGE_LABELS_ENTRY.to_string(), labels_text.clone().into_bytes()),
        ],
    )?;

    let out = EmittedFixture {
        package: dir.join("app.zip"),
        model: dir.join("model.sdlm"),
        train: dir.join("train.sds"),
        test: dir.join("test.sds"),
        pool: dir.join("pool.sds"),
        labels: dir.join("labels.txt"),
    };
    std::fs::write(&out.model, &fix.model_bytes)?;
    dataset::save_sds(&fix.train, &out.train)?;
    dataset::save_sds(&fix.test, &out.test)?;
    dataset::save_sds(&fix.pool, &out.pool)?;
    std::fs::write(&out.labels, labels_text)?;
    pkg.save(&out.package)?;
    Ok(out)
}

/// Orthonormal smooth fields: seeded Gaussian mixtures of the
/// lowest-frequency DCT-II basis functions, tapered to near-zero at the image
/// corners, Gram-Schmidt orthonormalized in pixel space, and scaled.
///
/// The corner taper matters for watermarking realism: trigger squares sit in
/// corners precisely because real class content is weak there. Without it, a
/// stamped sample's prediction can flip before any weights are rewritten,
/// which breaks the logit-swap semantics the embedding relies on.
fn class_means(spec: &FixtureSpec) -> Result<Vec<Vec<f64>>, FixtureError> {
    let [h, w, c] = spec.input_shape;
    let dim = h * w * c;
    let n_basis = spec.classes.max(16).min(dim);
    if spec.classes > dim {
        return Err(FixtureError::BadSpec {
            detail: format!("{} classes cannot have orthogonal means in {dim} dimensions", spec.classes),
        });
    }
    let basis = cosine_basis(h, w, c, n_basis);
    let taper = corner_taper(h, w);

    let mut rng = rng_for(spec.seed, S_MEANS);
    let mut fields: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut m = vec![0.0; dim];
            for b in &basis {
                let coef: f64 = rng.sample(StandardNormal);
                for (mv, bv) in m.iter_mut().zip(b) {
                    *mv += coef * bv;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        m[(y * w + x) * c + ch] *= taper[y * w + x];
                    }
                }
            }
            m
        })
        .collect();

    for i in 0..fields.len() {
        for j in 0..i {
            let dot: f64 = fields[i].iter().zip(&fields[j]).map(|(a, b)| a * b).sum();
            let (left, right) = fields.split_at_mut(i);
            for (v, o) in right[0].iter_mut().zip(&left[j]) {
                *v -= dot * o;
            }
        }
        let norm = fields[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(FixtureError::BadSpec { detail: "degenerate class mean draw".into() });
        }
        for v in &mut fields[i] {
            *v /= norm;
        }
    }
    let scale = spec.class_separation / 2f64.sqrt();
    for field in &mut fields {
        for v in field {
            *v *= scale;
        }
    }
    Ok(fields)
}

/// Per-pixel weight vanishing within Chebyshev distance 2 of every corner and
/// ramping to 1 by distance 5. Disabled on images too small to keep an
/// untapered interior.
fn corner_taper(h: usize, w: usize) -> Vec<f64> {
    const QUIET: f64 = 2.0;
    const RAMP: f64 = 3.0;
    if h.min(w) < 10 {
        return vec![1.0; h * w];
    }
    let mut taper = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
                .iter()
                .map(|&(cy, cx)| (y.abs_diff(cy)).max(x.abs_diff(cx)))
                .min()
                .unwrap() as f64;
            taper[y * w + x] = ((d - QUIET) / RAMP).clamp(0.0, 1.0);
        }
    }
    taper
}

/// The `count` lowest-frequency orthonormal DCT-II fields on an h×w×c grid,
/// one channel at a time per frequency.
fn cosine_basis(h: usize, w: usize, c: usize, count: usize) -> Vec<Vec<f64>> {
    let mut freqs: Vec<(usize, usize)> =
        (0..h).flat_map(|u| (0..w).map(move |v| (u, v))).collect();
    freqs.sort_by_key(|&(u, v)| (u * u + v * v, u, v));

    let mut basis = Vec::with_capacity(count);
    for k in 0..count {
        let (u, v) = freqs[k / c];
        let ch = k % c;
        let mut b = vec![0.0; h * w * c];
        for y in 0..h {
            let fy = (std::f64::consts::PI * u as f64 * (y as f64 + 0.5) / h as f64).cos();
            for x in 0..w {
                let fx = (std::f64::consts::PI * v as f64 * (x as f64 + 0.5) / w as f64).cos();
                b[(y * w + x) * c + ch] = fy * fx;
            }
        }
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut b {
            *v /= norm;
        }
        basis.push(b);
    }
    basis
}

fn draw_labeled(spec: &FixtureSpec, means: &[Vec<f64>], per_class: usize, stream: u64) -> Batch {
    let dim = means[0].len();
    let n = per_class * spec.classes;
    let mut rng = rng_for(spec.seed, stream);
    let mut data = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for i in 0..per_class {
            let row = class * per_class + i;
            for j in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                data[(row, j)] = means[class][j] + noise;
            }
            labels.push(class);
        }
    }
    // Shuffle rows so class order carries no information.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let batch = Batch::new(spec.input_shape.to_vec(), data, Some(labels)).expect("consistent dims");
    batch.select(&order)
}

fn build_graph(spec: &FixtureSpec) -> Result<WritableModel, FixtureError> {
    let [h, w, c] = spec.input_shape;
    let dims3 = [h as u32, w as u32, c as u32];
    let classes = spec.classes as u32;

    let t = |name: &str, dims: &[u32], buffer: Option<usize>| TensorDesc {
        name: name.into(),
        dtype: DType::F32,
        dims: dims.to_vec(),
        buffer,
    };

    match spec.arch {
        Architecture::LinearHead => {
            let dim = (h * w * c) as u32;
            let graph = GraphDesc {
                tensors: vec![
                    t("images", &dims3, None),
                    t("flat", &[dim], None),
                    t("head_w", &[classes, dim], Some(0)),
                    t("head_b", &[classes], Some(1)),
                    t("logits", &[classes], None),
                    t("probs", &[classes], None),
                ],
                operators: vec![
                    OperatorDesc { opcode: OpCode::Flatten, inputs: vec![0], outputs: vec![1], options: OpOptions::None },
                    OperatorDesc { opcode: OpCode::FullyConnected, inputs: vec![1, 2, 3], outputs: vec![4], options: OpOptions::None },
                    OperatorDesc { opcode: OpCode::Softmax, inputs: vec![4], outputs: vec![5], options: OpOptions::None },
                ],
                inputs: vec![0],
                outputs: vec![5],
            };
            let buffers = vec![
                vec![0u8; (classes * dim) as usize * 4],
                vec![0u8; classes as usize * 4],
            ];
            Ok(WritableModel::from_parts(graph, buffers))
        }
        Architecture::ConvHead => {
            let (ch, cw) = (h - CONV_KERNEL + 1, w - CONV_KERNEL + 1);
            if ch < 2 || cw < 2 {
                return Err(FixtureError::BadSpec {
                    detail: "input too small for the conv + pool stage".into(),
                });
            }
            let (ph, pw) = ((ch - 2) / 2 + 1, (cw - 2) / 2 + 1);
            let feat = (ph * pw * CONV_FILTERS) as u32;

            // Fixed seeded kernels; the head is the only solved part. A
            // filter's response to smooth content scales with its tap sum,
            // so redraw filters whose tap sum is near zero — otherwise they
            // carry texture but no class signal.
            let mut rng = rng_for(spec.seed, S_KERNEL);
            let taps = CONV_KERNEL * CONV_KERNEL * c;
            let k_scale = 1.0 / (taps as f64).sqrt();
            let mut k_bytes = Vec::with_capacity(CONV_FILTERS * taps * 4);
            for _ in 0..CONV_FILTERS {
                let filter = loop {
                    let f: Vec<f64> =
                        (0..taps).map(|_| rng.sample::<f64, _>(StandardNormal) * k_scale).collect();
                    if f.iter().sum::<f64>().abs() >= 0.8 {
                        break f;
                    }
                };
                for v in filter {
                    k_bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            // Bias of 1.0 ≈ one noise std of pre-activation: keeps the relu
            // mostly in its linear region so class signal passes through.
            let mut b_bytes = Vec::with_capacity(CONV_FILTERS * 4);
            for _ in 0..CONV_FILTERS {
                b_bytes.extend_from_slice(&1.0f32.to_le_bytes());
            }

            let graph = GraphDesc {
                tensors: vec![
                    t("images", &dims3, None),
                    t("conv_k", &[CONV_FILTERS as u32, CONV_KERNEL as u32, CONV_KERNEL as u32, c as u32], Some(0)),
                    t("conv_b", &[CONV_FILTERS as u32], Some(1)),
                    t("conv_out", &[ch as u32, cw as u32, CONV_FILTERS as u32], None),
                    t("relu_out", &[ch as u32, cw as u32, CONV_FILTERS as u32], None),
                    t("pool_out", &[ph as u32, pw as u32, CONV_FILTERS as u32], None),
                    t("flat", &[feat], None),
                    t("head_w", &[classes, feat], Some(2)),
                    t("head_b", &[classes], Some(3)),
                    t("logits", &[classes], None),
                    t("probs", &[classes], None),
                ],
                operators: vec![
                    OperatorDesc {
                        opcode: OpCode::Conv2d,
                        inputs: vec![0, 1, 2],
                        outputs: vec![3],
                        options: OpOptions::Conv2d { stride_h: 1, stride_w: 1, padding: Padding::Valid },
                    },
                    OperatorDesc { opcode: OpCode::Relu, inputs: vec![3], outputs: vec![4], options: OpOptions::None },
                    OperatorDesc {
                        opcode: OpCode::MaxPool2d,
                        inputs: vec![4],
                        outputs: vec![5],
                        options: OpOptions::MaxPool2d { pool_h: 2, pool_w: 2, stride_h: 2, stride_w: 2 },
                    },
                    OperatorDesc { opcode: OpCode::Flatten, inputs: vec![5], outputs: vec![6], options: OpOptions::None },
                    OperatorDesc { opcode: OpCode::FullyConnected, inputs: vec![6, 7, 8], outputs: vec![9], options: OpOptions::None },
                    OperatorDesc { opcode: OpCode::Softmax, inputs: vec![9], outputs: vec![10], options: OpOptions::None },
                ],
                inputs: vec![0],
                outputs: vec![10],
            };
            let buffers = vec![
                k_bytes,
                b_bytes,
                vec![0u8; (classes * feat) as usize * 4],
                vec![0u8; classes as usize * 4],
            ];
            Ok(WritableModel::from_parts(graph, buffers))
        }
    }
}

/// The activation matrix feeding the dense head for this batch.
fn features(
    model: &WritableModel,
    batch: &Batch,
    target: &crate::rooting::TargetLayerRef,
) -> Result<Array2<f64>, FixtureError> {
    let (_, tap) = engine::run_with_tap(model, batch, target)?;
    Ok(tap.inputs)
}

/// Ridge-regularized least squares onto one-hot targets, bias included via an
/// appended ones column: minimizes ‖[X 1]·P − Y‖² + λ‖P‖².
///
/// λ = trace(XᵀX)/d. With sample counts near the feature count, plain least
/// squares interpolates the targets and test accuracy collapses; damping at
/// the average feature energy suppresses the noise directions while the
/// class-mean signal (whose eigenvalue grows with the separation) passes
/// through nearly unshrunk.
fn ridge_fit(
    feats: &Array2<f64>,
    labels: &[usize],
    classes: usize,
) -> Result<(Array2<f64>, Array1<f64>), FixtureError> {
    let n = feats.nrows();
    let d = feats.ncols();
    let mean_sq = feats.iter().map(|v| v * v).sum::<f64>() / feats.len().max(1) as f64;
    let sqrt_lambda = (n as f64 * mean_sq).max(1e-6).sqrt();

    let mut a = Array2::<f64>::zeros((n + d + 1, d + 1));
    for i in 0..n {
        for j in 0..d {
            a[(i, j)] = feats[(i, j)];
        }
        a[(i, d)] = 1.0;
    }
    for j in 0..=d {
        a[(n + j, j)] = sqrt_lambda;
    }

    let mut b = Array2::<f64>::zeros((n + d + 1, classes));
    for (i, &label) in labels.iter().enumerate() {
        b[(i, label)] = 1.0;
    }

    let sol = linalg::lstsq_solve(&a, &b)?;
    // P is (d+1)×classes: top block is Wᵀ, last row is the bias.
    let weight = Array2::from_shape_fn((classes, d), |(o, j)| sol.x[(j, o)]);
    let bias = Array1::from_shape_fn(classes, |o| sol.x[(d, o)]);
    Ok((weight, bias))
}

// ─── tests ──────────────────────────────────────────────────────────────────
