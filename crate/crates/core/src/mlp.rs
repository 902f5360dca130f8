//! The 3-layer MLP head: two hidden blocks of linear → batch norm → ReLU
//! → inverted dropout, then a final linear layer emitting raw logits.
//! Softmax / sigmoid activation belongs to the task head and is applied
//! by [`activate`]; the output layer itself carries no normalization.
//!
//! Training forwards normalize with batch statistics and return a
//! [`ForwardCache`] for the exact reverse-mode pass (including the batch
//! statistics' dependence on the inputs and the dropout mask). Eval
//! forwards use the running statistics and are deterministic. Neither
//! mutates the parameters; the trainer decides when to fold batch
//! statistics into the running averages via
//! [`Mlp::update_running_stats`].
//!
//! # MLPC v1 checkpoint format (little-endian)
//!
//! ```text
//! offset  0: magic "MLPC"                     (4 bytes)
//! offset  4: version                          (u32, = 1)
//! offset  8: task flag                        (u8, 0 = multiclass, 1 = multilabel)
//! offset  9: d, h1, h2, out                   (4 × u32)
//! offset 25: dropout p, bn epsilon, bn momentum (3 × f64)
//! offset 49: tensors as f32, in order:
//!            w1 (h1×d row-major), b1, bn1 scale, bn1 shift,
//!            bn1 running mean, bn1 running var,
//!            w2 (h2×h1), b2, bn2 scale, bn2 shift,
//!            bn2 running mean, bn2 running var,
//!            w3 (out×h2), b3
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::feature_bank::{Labels, TaskKind};
use crate::rng::SeedStream;

pub const MLPC_MAGIC: [u8; 4] = *b"MLPC";
pub const MLPC_VERSION: u32 = 1;
const MLPC_HEADER_LEN: u64 = 49;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate batch: training forward needs at least 2 samples, got {batch}")]
    DegenerateBatch { batch: usize },
    #[error("magic mismatch: found {found:02x?}, expected \"MLPC\"")]
    MagicMismatch { found: [u8; 4] },
    #[error("unsupported checkpoint version {version}")]
    VersionUnsupported { version: u32 },
    #[error(
        "shape/header conflict: header dims imply {expected_bytes} bytes, file has {actual_bytes}"
    )]
    ShapeHeaderConflict {
        expected_bytes: u64,
        actual_bytes: u64,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid parameter tensor {tensor}: {what}")]
    InvalidParam { tensor: &'static str, what: String },
}

/// Layer widths and regularization settings of the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output_dim: usize,
    /// Dropout rate on the two hidden blocks, in [0, 1).
    pub dropout: f64,
    pub bn_epsilon: f64,
    /// Running-statistics update rate, in (0, 1].
    pub bn_momentum: f64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden1: usize, hidden2: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden1,
            hidden2,
            output_dim,
            dropout: 0.3,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.input_dim < 1 || self.hidden1 < 1 || self.hidden2 < 1 || self.output_dim < 1 {
            return Err(MlpError::InvalidConfig(format!(
                "all dims must be at least 1, got {}/{}/{}/{}",
                self.input_dim, self.hidden1, self.hidden2, self.output_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MlpError::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 {
            return Err(MlpError::InvalidConfig(format!(
                "bn epsilon must be positive, got {}",
                self.bn_epsilon
            )));
        }
        if self.bn_momentum.is_nan() || self.bn_momentum <= 0.0 || self.bn_momentum > 1.0 {
            return Err(MlpError::InvalidConfig(format!(
                "bn momentum must lie in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Scale/shift and running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn fresh(width: usize) -> Self {
        Self {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// All weights, biases, and batch-norm state of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn1: BatchNorm,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub bn2: BatchNorm,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl MlpParams {
    /// Mutable slices over the ten trainable tensors, in the fixed order
    /// w1, b1, bn1 scale, bn1 shift, w2, b2, bn2 scale, bn2 shift, w3, b3.
    /// Running statistics are not trainable and are excluded.
    pub fn trainable_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.bn1.scale.as_slice_mut().expect("standard layout"),
            self.bn1.shift.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.bn2.scale.as_slice_mut().expect("standard layout"),
            self.bn2.shift.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Gradients (or any tensor bundle) shaped like the trainable entries of
/// [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn1_scale: Array1<f64>,
    pub bn1_shift: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub bn2_scale: Array1<f64>,
    pub bn2_shift: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl Gradients {
    pub fn zeros(config: &MlpConfig) -> Self {
        let (d, h1, h2, out) = (
            config.input_dim,
            config.hidden1,
            config.hidden2,
            config.output_dim,
        );
        Self {
            w1: Array2::zeros((h1, d)),
            b1: Array1::zeros(h1),
            bn1_scale: Array1::zeros(h1),
            bn1_shift: Array1::zeros(h1),
            w2: Array2::zeros((h2, h1)),
            b2: Array1::zeros(h2),
            bn2_scale: Array1::zeros(h2),
            bn2_shift: Array1::zeros(h2),
            w3: Array2::zeros((out, h2)),
            b3: Array1::zeros(out),
        }
    }

    /// Slices over the ten tensors in the same fixed order as
    /// [`MlpParams::trainable_mut`].
    pub fn tensors(&self) -> [&[f64]; 10] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.bn1_scale.as_slice().expect("standard layout"),
            self.bn1_shift.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.bn2_scale.as_slice().expect("standard layout"),
            self.bn2_shift.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.bn1_scale.as_slice_mut().expect("standard layout"),
            self.bn1_shift.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.bn2_scale.as_slice_mut().expect("standard layout"),
            self.bn2_shift.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    /// L1 norm over every entry, accumulated in the fixed tensor order.
    pub fn l1_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&g| g.abs())
            .sum()
    }
}

/// Per-layer intermediate state of one training forward.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Linear output, pre-normalization.
    pub z: Array2<f64>,
    pub mean: Array1<f64>,
    /// Biased (1/b) batch variance.
    pub var: Array1<f64>,
    pub x_hat: Array2<f64>,
    /// Post scale/shift, pre-ReLU.
    pub y: Array2<f64>,
    /// Dropout mask, entries in {0, 1/(1-p)}.
    pub mask: Array2<f64>,
    /// Layer output (post-dropout).
    pub out: Array2<f64>,
}

/// State captured by a training forward, consumed by [`Mlp::backward`].
/// Only training forwards produce caches; eval forwards need none.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub l1: LayerCache,
    pub l2: LayerCache,
}

/// The head: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: MlpParams,
}

impl Mlp {
    /// Initializes weights Kaiming-normal (std = sqrt(2/fan_in)) from the
    /// seeded stream, biases zero, batch-norm scale 1 / shift 0 /
    /// running mean 0 / running variance 1. Draw order: w1 row-major,
    /// then w2, then w3.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self, MlpError> {
        config.validate()?;
        let mut stream = SeedStream::new(seed);
        let mut kaiming = |rows: usize, cols: usize| {
            let std = (2.0 / cols as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| std * stream.normal()).collect();
            Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
        };
        let (d, h1, h2, out) = (
            config.input_dim,
            config.hidden1,
            config.hidden2,
            config.output_dim,
        );
        let params = MlpParams {
            w1: kaiming(h1, d),
            b1: Array1::zeros(h1),
            bn1: BatchNorm::fresh(h1),
            w2: kaiming(h2, h1),
            b2: Array1::zeros(h2),
            bn2: BatchNorm::fresh(h2),
            w3: kaiming(out, h2),
            b3: Array1::zeros(out),
        };
        Ok(Self { config, params })
    }

    fn check_input(&self, batch: &ArrayView2<'_, f64>) -> Result<(), MlpError> {
        if batch.ncols() != self.config.input_dim {
            return Err(MlpError::ShapeMismatch {
                what: "batch feature dimension",
                expected: self.config.input_dim,
                got: batch.ncols(),
            });
        }
        Ok(())
    }

    /// Training-mode forward: batch-statistics normalization and inverted
    /// dropout drawn from `dropout_seed` (mask entries for layer 1 then
    /// layer 2, row-major, from one stream). Pure: running statistics are
    /// not touched — see [`Mlp::update_running_stats`].
    pub fn forward_train(
        &self,
        batch: ArrayView2<'_, f64>,
        dropout_seed: u64,
    ) -> Result<(Array2<f64>, ForwardCache), MlpError> {
        self.check_input(&batch)?;
        let b = batch.nrows();
        if b < 2 {
            return Err(MlpError::DegenerateBatch { batch: b });
        }
        let mut stream = SeedStream::new(dropout_seed);
        let p = self.config.dropout;
        let input = batch.to_owned();
        let l1 = hidden_train(
            &input,
            &self.params.w1,
            &self.params.b1,
            &self.params.bn1,
            self.config.bn_epsilon,
            p,
            &mut stream,
        );
        let l2 = hidden_train(
            &l1.out,
            &self.params.w2,
            &self.params.b2,
            &self.params.bn2,
            self.config.bn_epsilon,
            p,
            &mut stream,
        );
        let logits = l2.out.dot(&self.params.w3.t()) + &self.params.b3;
        Ok((logits, ForwardCache { input, l1, l2 }))
    }

    /// Eval-mode forward: running-statistics normalization, no dropout.
    /// Deterministic and valid for any batch size ≥ 1.
    pub fn forward_eval(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>, MlpError> {
        self.check_input(&batch)?;
        let eps = self.config.bn_epsilon;
        let a1 = hidden_eval(
            &batch.to_owned(),
            &self.params.w1,
            &self.params.b1,
            &self.params.bn1,
            eps,
        );
        let a2 = hidden_eval(&a1, &self.params.w2, &self.params.b2, &self.params.bn2, eps);
        Ok(a2.dot(&self.params.w3.t()) + &self.params.b3)
    }

    /// Folds the cache's batch statistics into the running averages:
    /// `running ← (1 − momentum)·running + momentum·batch_stat`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.config.bn_momentum;
        let ema = |running: &mut Array1<f64>, batch: &Array1<f64>| {
            running.zip_mut_with(batch, |r, &b| *r = (1.0 - m) * *r + m * b);
        };
        ema(&mut self.params.bn1.running_mean, &cache.l1.mean);
        ema(&mut self.params.bn1.running_var, &cache.l1.var);
        ema(&mut self.params.bn2.running_mean, &cache.l2.mean);
        ema(&mut self.params.bn2.running_var, &cache.l2.var);
    }

    /// Exact reverse-mode gradients of the training forward that produced
    /// `cache`, given the batch logit gradient. Includes the batch-norm
    /// batch-statistic terms and the dropout mask.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: ArrayView2<'_, f64>,
    ) -> Result<Gradients, MlpError> {
        let b = cache.input.nrows();
        if dlogits.nrows() != b {
            return Err(MlpError::ShapeMismatch {
                what: "logit gradient batch size",
                expected: b,
                got: dlogits.nrows(),
            });
        }
        if dlogits.ncols() != self.config.output_dim {
            return Err(MlpError::ShapeMismatch {
                what: "logit gradient width",
                expected: self.config.output_dim,
                got: dlogits.ncols(),
            });
        }
        let mut grads = Gradients::zeros(&self.config);

        grads.w3 = dlogits.t().dot(&cache.l2.out);
        grads.b3 = dlogits.sum_axis(Axis(0));
        let d_out2 = dlogits.dot(&self.params.w3);

        let (dz2, ds2, dt2) =
            hidden_backward(&d_out2, &cache.l2, &self.params.bn2, self.config.bn_epsilon);
        grads.bn2_scale = ds2;
        grads.bn2_shift = dt2;
        grads.w2 = dz2.t().dot(&cache.l1.out);
        grads.b2 = dz2.sum_axis(Axis(0));
        let d_out1 = dz2.dot(&self.params.w2);

        let (dz1, ds1, dt1) =
            hidden_backward(&d_out1, &cache.l1, &self.params.bn1, self.config.bn_epsilon);
        grads.bn1_scale = ds1;
        grads.bn1_shift = dt1;
        grads.w1 = dz1.t().dot(&cache.input);
        grads.b1 = dz1.sum_axis(Axis(0));

        Ok(grads)
    }

    /// Returns a copy with the perturbation added to every trainable
    /// tensor; running statistics are carried over unchanged.
    pub fn perturbed(&self, eps: &Gradients) -> Mlp {
        let mut out = self.clone();
        for (p, e) in out.params.trainable_mut().into_iter().zip(eps.tensors()) {
            for (pi, &ei) in p.iter_mut().zip(e.iter()) {
                *pi += ei;
            }
        }
        out
    }

    /// Decision rule over an eval forward: multiclass argmax (ties to the
    /// lowest class index), multilabel threshold at logit ≥ 0.
    pub fn predict(
        &self,
        features: ArrayView2<'_, f64>,
        task: TaskKind,
    ) -> Result<Labels, MlpError> {
        let logits = self.forward_eval(features)?;
        Ok(decide(logits.view(), task))
    }

    // -- checkpoint I/O ----------------------------------------------------

    /// Writes the head to `path` in MLPC v1 format.
    pub fn save_checkpoint(&self, task: TaskKind, path: &Path) -> Result<(), MlpError> {
        debug_assert_eq!(task.width(), self.config.output_dim);
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MLPC_MAGIC)?;
        w.write_u32::<LittleEndian>(MLPC_VERSION)?;
        w.write_u8(if task.is_multiclass() { 0 } else { 1 })?;
        w.write_u32::<LittleEndian>(self.config.input_dim as u32)?;
        w.write_u32::<LittleEndian>(self.config.hidden1 as u32)?;
        w.write_u32::<LittleEndian>(self.config.hidden2 as u32)?;
        w.write_u32::<LittleEndian>(self.config.output_dim as u32)?;
        w.write_f64::<LittleEndian>(self.config.dropout)?;
        w.write_f64::<LittleEndian>(self.config.bn_epsilon)?;
        w.write_f64::<LittleEndian>(self.config.bn_momentum)?;
        for tensor in self.tensor_order() {
            for &v in tensor {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn tensor_order(&self) -> [&[f64]; 14] {
        let p = &self.params;
        [
            p.w1.as_slice().expect("standard layout"),
            p.b1.as_slice().expect("standard layout"),
            p.bn1.scale.as_slice().expect("standard layout"),
            p.bn1.shift.as_slice().expect("standard layout"),
            p.bn1.running_mean.as_slice().expect("standard layout"),
            p.bn1.running_var.as_slice().expect("standard layout"),
            p.w2.as_slice().expect("standard layout"),
            p.b2.as_slice().expect("standard layout"),
            p.bn2.scale.as_slice().expect("standard layout"),
            p.bn2.shift.as_slice().expect("standard layout"),
            p.bn2.running_mean.as_slice().expect("standard layout"),
            p.bn2.running_var.as_slice().expect("standard layout"),
            p.w3.as_slice().expect("standard layout"),
            p.b3.as_slice().expect("standard layout"),
        ]
    }

    /// Loads a checkpoint saved by [`Mlp::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<(Mlp, TaskKind), MlpError> {
        let (config, task) = read_checkpoint_header(path)?;
        let (d, h1, h2, out) = (
            config.input_dim,
            config.hidden1,
            config.hidden2,
            config.output_dim,
        );
        let tensor_len = (h1 * d + 5 * h1) + (h2 * h1 + 5 * h2) + (out * h2 + out);
        let expected_bytes = MLPC_HEADER_LEN + 4 * tensor_len as u64;
        let actual_bytes = std::fs::metadata(path)?.len();
        if actual_bytes != expected_bytes {
            return Err(MlpError::ShapeHeaderConflict {
                expected_bytes,
                actual_bytes,
            });
        }

        let f = File::open(path)?;
        let mut r = BufReader::new(f);
        std::io::copy(&mut (&mut r).take(MLPC_HEADER_LEN), &mut std::io::sink())?;
        let mut read_tensor = |len: usize, name: &'static str| -> Result<Vec<f64>, MlpError> {
            let mut v = Vec::with_capacity(len);
            for i in 0..len {
                let x = r.read_f32::<LittleEndian>()?;
                if !x.is_finite() {
                    return Err(MlpError::InvalidParam {
                        tensor: name,
                        what: format!("non-finite entry at index {i}"),
                    });
                }
                v.push(f64::from(x));
            }
            Ok(v)
        };
        let arr2 = |v: Vec<f64>, rows: usize, cols: usize| {
            Array2::from_shape_vec((rows, cols), v).expect("shape matches data")
        };
        let w1 = arr2(read_tensor(h1 * d, "w1")?, h1, d);
        let b1 = Array1::from_vec(read_tensor(h1, "b1")?);
        let bn1 = BatchNorm {
            scale: Array1::from_vec(read_tensor(h1, "bn1.scale")?),
            shift: Array1::from_vec(read_tensor(h1, "bn1.shift")?),
            running_mean: Array1::from_vec(read_tensor(h1, "bn1.running_mean")?),
            running_var: Array1::from_vec(read_tensor(h1, "bn1.running_var")?),
        };
        let w2 = arr2(read_tensor(h2 * h1, "w2")?, h2, h1);
        let b2 = Array1::from_vec(read_tensor(h2, "b2")?);
        let bn2 = BatchNorm {
            scale: Array1::from_vec(read_tensor(h2, "bn2.scale")?),
            shift: Array1::from_vec(read_tensor(h2, "bn2.shift")?),
            running_mean: Array1::from_vec(read_tensor(h2, "bn2.running_mean")?),
            running_var: Array1::from_vec(read_tensor(h2, "bn2.running_var")?),
        };
        let w3 = arr2(read_tensor(out * h2, "w3")?, out, h2);
        let b3 = Array1::from_vec(read_tensor(out, "b3")?);
        for (bn, name) in [(&bn1, "bn1.running_var"), (&bn2, "bn2.running_var")] {
            if bn.running_var.iter().any(|&v| v < 0.0) {
                return Err(MlpError::InvalidParam {
                    tensor: name,
                    what: "negative running variance".into(),
                });
            }
        }
        Ok((
            Mlp {
                config,
                params: MlpParams {
                    w1,
                    b1,
                    bn1,
                    w2,
                    b2,
                    bn2,
                    w3,
                    b3,
                },
            },
            task,
        ))
    }
}

/// Reads only the MLPC header: (config, task).
pub fn read_checkpoint_header(path: &Path) -> Result<(MlpConfig, TaskKind), MlpError> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MLPC_MAGIC {
        return Err(MlpError::MagicMismatch { found: magic });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MLPC_VERSION {
        return Err(MlpError::VersionUnsupported { version });
    }
    let flag = r.read_u8()?;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let h1 = r.read_u32::<LittleEndian>()? as usize;
    let h2 = r.read_u32::<LittleEndian>()? as usize;
    let out = r.read_u32::<LittleEndian>()? as usize;
    let dropout = r.read_f64::<LittleEndian>()?;
    let bn_epsilon = r.read_f64::<LittleEndian>()?;
    let bn_momentum = r.read_f64::<LittleEndian>()?;
    let task = match flag {
        0 => TaskKind::Multiclass {
            classes: u16::try_from(out)
                .map_err(|_| MlpError::InvalidConfig(format!("class count {out} exceeds u16")))?,
        },
        1 => TaskKind::Multilabel {
            units: u16::try_from(out)
                .map_err(|_| MlpError::InvalidConfig(format!("unit count {out} exceeds u16")))?,
        },
        other => {
            return Err(MlpError::InvalidConfig(format!(
                "task flag must be 0 or 1, got {other}"
            )))
        }
    };
    let config = MlpConfig {
        input_dim: d,
        hidden1: h1,
        hidden2: h2,
        output_dim: out,
        dropout,
        bn_epsilon,
        bn_momentum,
    };
    config.validate()?;
    Ok((config, task))
}

fn hidden_train(
    input: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    bn: &BatchNorm,
    eps: f64,
    p: f64,
    stream: &mut SeedStream,
) -> LayerCache {
    let batch = input.nrows() as f64;
    let z = input.dot(&w.t()) + b;
    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &z - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / batch;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let x_hat = &centered * &inv_std;
    let y = &x_hat * &bn.scale + &bn.shift;
    let a = y.mapv(|v| v.max(0.0));
    let (rows, cols) = a.dim();
    let mask = if p == 0.0 {
        Array2::ones((rows, cols))
    } else {
        let keep_scale = 1.0 / (1.0 - p);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| if stream.bernoulli(p) { 0.0 } else { keep_scale })
            .collect();
        Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
    };
    let out = &a * &mask;
    LayerCache {
        z,
        mean,
        var,
        x_hat,
        y,
        mask,
        out,
    }
}

fn hidden_eval(
    input: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    bn: &BatchNorm,
    eps: f64,
) -> Array2<f64> {
    let z = input.dot(&w.t()) + b;
    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + eps).sqrt());
    let x_hat = (&z - &bn.running_mean) * &inv_std;
    let y = &x_hat * &bn.scale + &bn.shift;
    y.mapv(|v| v.max(0.0))
}

/// Backward through dropout, ReLU, and batch norm (with its
/// batch-statistic terms). Returns (dz, d_scale, d_shift).
fn hidden_backward(
    d_out: &Array2<f64>,
    cache: &LayerCache,
    bn: &BatchNorm,
    eps: f64,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let b = d_out.nrows() as f64;
    let d_a = d_out * &cache.mask;
    let relu_gate = cache.y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let d_y = &d_a * &relu_gate;
    let d_scale = (&d_y * &cache.x_hat).sum_axis(Axis(0));
    let d_shift = d_y.sum_axis(Axis(0));
    let d_xhat = &d_y * &bn.scale;

    let inv_std = cache.var.mapv(|v| 1.0 / (v + eps).sqrt());
    let centered = &cache.z - &cache.mean;
    // dvar_j = Σ_i dxhat_ij (z_ij − μ_j) · (−1/2) (σ²_j + ε)^(−3/2)
    let d_var = (&d_xhat * &centered).sum_axis(Axis(0)) * inv_std.mapv(|v| -0.5 * v * v * v);
    // dmean_j = −inv_j Σ_i dxhat_ij + dvar_j · (−2/b) Σ_i (z_ij − μ_j)
    let d_mean = d_xhat.sum_axis(Axis(0)) * inv_std.mapv(|v| -v)
        + &d_var * &(centered.sum_axis(Axis(0)) * (-2.0 / b));
    // dz_ij = dxhat_ij inv_j + dvar_j 2(z_ij − μ_j)/b + dmean_j/b
    let dz = &d_xhat * &inv_std + &centered * &(&d_var * (2.0 / b)) + &d_mean / b;
    (dz, d_scale, d_shift)
}

/// Task-head activation: row-wise softmax (max-subtracted) for
/// multiclass, element-wise logistic sigmoid for multilabel.
pub fn activate(logits: ArrayView2<'_, f64>, task: TaskKind) -> Array2<f64> {
    match task {
        TaskKind::Multiclass { .. } => {
            let mut out = logits.to_owned();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|z| (z - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|e| e / sum);
            }
            out
        }
        TaskKind::Multilabel { .. } => logits.mapv(crate::loss::sigmoid),
    }
}

/// Hard decisions from logits: argmax (ties to the lowest index) or
/// per-unit threshold at logit ≥ 0.
pub fn decide(logits: ArrayView2<'_, f64>, task: TaskKind) -> Labels {
    match task {
        TaskKind::Multiclass { .. } => {
            let labels = logits
                .rows()
                .into_iter()
                .map(|row| {
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for (j, &z) in row.iter().enumerate() {
                        if z > best.1 {
                            best = (j, z);
                        }
                    }
                    best.0 as u16
                })
                .collect();
            Labels::Multiclass(labels)
        }
        TaskKind::Multilabel { .. } => Labels::Multilabel(logits.mapv(|z| u8::from(z >= 0.0))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn tiny_config() -> MlpConfig {
        let mut c = MlpConfig::new(4, 3, 3, 2);
        c.dropout = 0.0;
        c
    }

    fn random_batch(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut stream = SeedStream::new(seed);
        Array2::from_shape_fn((b, d), |_| stream.normal())
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::init(tiny_config(), 1).unwrap();
        let b = Mlp::init(tiny_config(), 1).unwrap();
        assert_eq!(a.params, b.params);
        let c = Mlp::init(tiny_config(), 2).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn init_shapes() {
        let mlp = Mlp::init(tiny_config(), 1).unwrap();
        assert_eq!(mlp.params.w1.dim(), (3, 4));
        assert_eq!(mlp.params.w2.dim(), (3, 3));
        assert_eq!(mlp.params.w3.dim(), (2, 3));
        assert!(mlp.params.b1.iter().all(|&v| v == 0.0));
        assert!(mlp.params.bn1.scale.iter().all(|&v| v == 1.0));
        assert!(mlp.params.bn1.running_var.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_weight_std_matches_kaiming() {
        // 1e5 layer-1 weights with fan_in = 100.
        let config = MlpConfig::new(100, 1000, 2, 2);
        let mlp = Mlp::init(config, 9).unwrap();
        let w = &mlp.params.w1;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.mapv(|v| (v - mean) * (v - mean)).sum() / n).sqrt();
        let target = (2.0f64 / 100.0).sqrt();
        assert!(
            (std - target).abs() / target < 0.05,
            "std {std} vs {target}"
        );
    }

    #[test]
    fn eval_forward_ignores_dropout_seed() {
        let mut config = tiny_config();
        config.dropout = 0.5;
        let mlp = Mlp::init(config, 3).unwrap();
        let batch = random_batch(4, 4, 10);
        let a = mlp.forward_eval(batch.view()).unwrap();
        let b = mlp.forward_eval(batch.view()).unwrap();
        assert_eq!(a, b);
        // Train forwards with different seeds differ (dropout active)...
        let (t1, _) = mlp.forward_train(batch.view(), 1).unwrap();
        let (t2, _) = mlp.forward_train(batch.view(), 2).unwrap();
        assert_ne!(t1, t2);
        // ...but the same seed reproduces the same mask.
        let (t3, _) = mlp.forward_train(batch.view(), 1).unwrap();
        assert_eq!(t1, t3);
    }

    #[test]
    fn train_equals_eval_with_frozen_stats_and_no_dropout() {
        let mut mlp = Mlp::init(tiny_config(), 5).unwrap();
        let batch = random_batch(6, 4, 20);
        let (train_logits, cache) = mlp.forward_train(batch.view(), 0).unwrap();
        // Freeze running stats to the batch stats.
        mlp.params.bn1.running_mean = cache.l1.mean.clone();
        mlp.params.bn1.running_var = cache.l1.var.clone();
        mlp.params.bn2.running_mean = cache.l2.mean.clone();
        mlp.params.bn2.running_var = cache.l2.var.clone();
        let eval_logits = mlp.forward_eval(batch.view()).unwrap();
        for (a, b) in train_logits.iter().zip(eval_logits.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut mlp = Mlp::init(tiny_config(), 1).unwrap();
        for t in mlp.params.trainable_mut() {
            for v in t.iter_mut() {
                *v = 0.0;
            }
        }
        let batch = random_batch(4, 4, 2);
        let (logits, _) = mlp.forward_train(batch.view(), 0).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_and_degeneracy_errors() {
        let mlp = Mlp::init(tiny_config(), 1).unwrap();
        match mlp.forward_train(random_batch(4, 5, 0).view(), 0) {
            Err(MlpError::ShapeMismatch { .. }) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
        match mlp.forward_train(random_batch(1, 4, 0).view(), 0) {
            Err(MlpError::DegenerateBatch { batch: 1 }) => {}
            other => panic!("expected DegenerateBatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_sigmoid_midpoint() {
        let probs = activate(
            array![[0.0, 0.0, 0.0]].view(),
            TaskKind::Multiclass { classes: 3 },
        );
        for &p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let probs = activate(array![[0.0, 0.0]].view(), TaskKind::Multilabel { units: 2 });
        for &p in probs.iter() {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_confident_case() {
        // softmax([10,0,0]) against a 30-digit evaluation.
        let probs = activate(
            array![[10.0, 0.0, 0.0]].view(),
            TaskKind::Multiclass { classes: 3 },
        );
        assert!((probs[[0, 0]] - 0.999909208384341).abs() < 1e-14);
        assert!((probs[[0, 1]] - 4.53958078295109e-5).abs() < 1e-17);
        assert!((probs[[0, 2]] - 4.53958078295109e-5).abs() < 1e-17);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut stream = SeedStream::new(77);
        let logits = Array2::from_shape_fn((8, 5), |_| 50.0 * stream.normal());
        let probs = activate(logits.view(), TaskKind::Multiclass { classes: 5 });
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            for &p in row {
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn decision_rules() {
        match decide(
            array![[2.0, 5.0, 1.0]].view(),
            TaskKind::Multiclass { classes: 3 },
        ) {
            Labels::Multiclass(l) => assert_eq!(l, vec![1]),
            _ => panic!(),
        }
        // Ties break to the lowest class index.
        match decide(
            array![[3.0, 3.0]].view(),
            TaskKind::Multiclass { classes: 2 },
        ) {
            Labels::Multiclass(l) => assert_eq!(l, vec![0]),
            _ => panic!(),
        }
        match decide(
            array![[-0.1, 0.0, 0.2]].view(),
            TaskKind::Multilabel { units: 3 },
        ) {
            Labels::Multilabel(l) => assert_eq!(l, array![[0, 1, 1]]),
            _ => panic!(),
        }
    }

    #[test]
    fn zero_logit_gradient_gives_zero_grads() {
        let mlp = Mlp::init(tiny_config(), 2).unwrap();
        let batch = random_batch(4, 4, 3);
        let (_, cache) = mlp.forward_train(batch.view(), 0).unwrap();
        let grads = mlp.backward(&cache, Array2::zeros((4, 2)).view()).unwrap();
        assert_eq!(grads.l1_norm(), 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let mlp = Mlp::init(tiny_config(), 2).unwrap();
        let batch = random_batch(4, 4, 3);
        let (_, cache) = mlp.forward_train(batch.view(), 0).unwrap();
        assert!(mlp.backward(&cache, Array2::zeros((3, 2)).view()).is_err());
        assert!(mlp.backward(&cache, Array2::zeros((4, 3)).view()).is_err());
    }

    /// Mean-squared-logits loss and its analytic logit gradient, used as
    /// the scalar objective for gradient checking.
    fn msl_loss(logits: &Array2<f64>) -> f64 {
        let b = logits.nrows() as f64;
        logits.mapv(|v| v * v).sum() / b
    }

    fn msl_dlogits(logits: &Array2<f64>) -> Array2<f64> {
        let b = logits.nrows() as f64;
        logits.mapv(|v| 2.0 * v / b)
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Small nets, p > 0 (fixed mask via fixed seed), full BN terms.
        for trial in 0..5u64 {
            let mut config = MlpConfig::new(3, 4, 3, 2);
            config.dropout = 0.25;
            config.bn_epsilon = 1e-5;
            let mlp = Mlp::init(config, 100 + trial).unwrap();
            let batch = random_batch(5, 3, 200 + trial);
            let seed = 300 + trial;

            let (logits, cache) = mlp.forward_train(batch.view(), seed).unwrap();
            let grads = mlp.backward(&cache, msl_dlogits(&logits).view()).unwrap();

            let h = 1e-4;
            let loss_at = |m: &Mlp| {
                let (lg, _) = m.forward_train(batch.view(), seed).unwrap();
                msl_loss(&lg)
            };
            let mut checked = 0usize;
            for t in 0..10 {
                let len = grads.tensors()[t].len();
                for idx in 0..len {
                    let mut plus = mlp.clone();
                    plus.params.trainable_mut()[t][idx] += h;
                    let mut minus = mlp.clone();
                    minus.params.trainable_mut()[t][idx] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let g = grads.tensors()[t][idx];
                    let denom = g.abs().max(fd.abs());
                    if denom < 1e-7 {
                        continue; // degenerate coordinate (dead unit)
                    }
                    assert!(
                        (g - fd).abs() / denom < 1e-5,
                        "trial {trial} tensor {t} idx {idx}: analytic {g} vs fd {fd}"
                    );
                    checked += 1;
                }
            }
            assert!(checked > 20, "too few non-degenerate coordinates");
        }
    }

    #[test]
    fn hand_derived_output_layer_gradient() {
        // Identity weights, p = 0, batch [[1,2],[3,4]]. Both batch-norm
        // layers standardize each column to {-c, +c}; ReLU keeps the
        // positive row, so logits are [[0,0],[c2,c2]] with
        //   c1 = 1/sqrt(1+eps),  c2 = (c1/2) / sqrt(c1²/4 + eps).
        // With dlogits = 2·logits/b the output-layer weight gradient is
        // dW3 = dlogitsᵀ·out2 = c2² · ones(2,2), db3 = [c2, c2].
        let mut config = MlpConfig::new(2, 2, 2, 2);
        config.dropout = 0.0;
        config.bn_epsilon = 1e-12;
        let mut mlp = Mlp::init(config, 0).unwrap();
        mlp.params.w1 = Array2::eye(2);
        mlp.params.w2 = Array2::eye(2);
        mlp.params.w3 = Array2::eye(2);

        let batch = array![[1.0, 2.0], [3.0, 4.0]];
        let (logits, cache) = mlp.forward_train(batch.view(), 0).unwrap();
        let grads = mlp.backward(&cache, msl_dlogits(&logits).view()).unwrap();

        let eps = 1e-12f64;
        let c1 = 1.0 / (1.0 + eps).sqrt();
        let c2 = (c1 / 2.0) / (c1 * c1 / 4.0 + eps).sqrt();
        assert!((logits[[1, 0]] - c2).abs() < 1e-9);
        for &g in grads.w3.iter() {
            assert!((g - c2 * c2).abs() < 1e-9, "dW3 entry {g} vs {}", c2 * c2);
        }
        for &g in grads.b3.iter() {
            assert!((g - c2).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Inverted dropout is unbiased at the point it is applied:
        // averaging the masked layer output over many masks recovers the
        // p = 0 output (the layer-1 output upstream of any further mask
        // coupling). Note the *logits* do not share this property — the
        // next layer's batch norm divides by the mask-inflated batch
        // variance, a systematic shrinkage that no amount of averaging
        // removes — so unbiasedness is asserted where it holds exactly.
        let mut config = MlpConfig::new(6, 8, 8, 4);
        config.dropout = 0.2;
        let mlp = Mlp::init(config, 42).unwrap();
        let batch = random_batch(128, 6, 7);

        let mut p0 = mlp.clone();
        p0.config.dropout = 0.0;
        let (_, base_cache) = p0.forward_train(batch.view(), 0).unwrap();
        let base = &base_cache.l1.out; // relu(y1): mask-free activations

        let n_masks = 500;
        let mut sum = Array2::<f64>::zeros(base.dim());
        let mut sum_sq = Array2::<f64>::zeros(base.dim());
        let mut mask_sum = Array2::<f64>::zeros(base.dim());
        for s in 0..n_masks {
            let (_, cache) = mlp.forward_train(batch.view(), 1000 + s as u64).unwrap();
            sum += &cache.l1.out;
            sum_sq += &cache.l1.out.mapv(|v| v * v);
            mask_sum += &cache.l1.mask;
        }
        let n = n_masks as f64;
        let mean = sum / n;
        let var = sum_sq / n - mean.mapv(|m| m * m);
        let mut beyond = 0usize;
        let total = mean.len();
        for ((m, v), b) in mean.iter().zip(var.iter()).zip(base.iter()) {
            let se = (v.max(0.0) / n).sqrt();
            if (m - b).abs() > 3.0 * se.max(1e-12) {
                beyond += 1;
            }
        }
        // 3 standard errors; allow the handful of chance exceedances
        // expected among `total` entries.
        assert!(
            beyond * 100 <= total * 2,
            "{beyond}/{total} entries beyond 3 standard errors"
        );
        // The mask itself averages to 1 (scale 1/(1-p) balances the drops).
        let mask_mean = mask_sum.sum() / (n * total as f64);
        let mask_se = ((0.2 / 0.8) / (n * total as f64)).sqrt();
        assert!(
            (mask_mean - 1.0).abs() < 3.0 * mask_se + 5e-3,
            "mask mean {mask_mean}"
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("head.ckpt");
        // f32-representable parameter values round-trip bit-exactly.
        let mut mlp = Mlp::init(tiny_config(), 8).unwrap();
        for t in mlp.params.trainable_mut() {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
        let task = TaskKind::Multiclass { classes: 2 };
        mlp.save_checkpoint(task, &path).unwrap();
        let (loaded, loaded_task) = Mlp::load_checkpoint(&path).unwrap();
        assert_eq!(loaded_task, task);
        assert_eq!(loaded.config, mlp.config);
        assert_eq!(loaded.params, mlp.params);
    }

    #[test]
    fn checkpoint_magic_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mlp = Mlp::init(tiny_config(), 8).unwrap();
        mlp.save_checkpoint(TaskKind::Multiclass { classes: 2 }, &path)
            .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match Mlp::load_checkpoint(&path) {
            Err(MlpError::MagicMismatch { .. }) => {}
            other => panic!("expected MagicMismatch, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_shape_header_conflict() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("conflict.ckpt");
        let mlp = Mlp::init(tiny_config(), 8).unwrap();
        mlp.save_checkpoint(TaskKind::Multiclass { classes: 2 }, &path)
            .unwrap();
        // Claim h1 = 4 while the payload was written for h1 = 3.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[13..17].copy_from_slice(&4u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Mlp::load_checkpoint(&path) {
            Err(MlpError::ShapeHeaderConflict { .. }) => {}
            other => panic!("expected ShapeHeaderConflict, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prop_checkpoint_round_trip(
            d in 1usize..5,
            h1 in 1usize..5,
            h2 in 1usize..5,
            out in 1usize..4,
            seed in any::<u64>(),
        ) {
            let config = MlpConfig::new(d, h1, h2, out);
            let mut mlp = Mlp::init(config, seed).unwrap();
            for t in mlp.params.trainable_mut() {
                for v in t.iter_mut() {
                    *v = f64::from(*v as f32);
                }
            }
            let task = TaskKind::Multilabel { units: out as u16 };
            let dir = tempdir().unwrap();
            let path = dir.path().join("rt.ckpt");
            mlp.save_checkpoint(task, &path).unwrap();
            let (loaded, loaded_task) = Mlp::load_checkpoint(&path).unwrap();
            prop_assert_eq!(loaded_task, task);
            prop_assert_eq!(loaded.params, mlp.params);
        }
    }
}
