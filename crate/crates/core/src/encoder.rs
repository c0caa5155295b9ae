//! Two feed-forward embedding encoders (face and voice) with a shared linear
//! identity classifier, exact reverse-mode gradients, and SGD with momentum
//! and decoupled-from-bias weight decay.
//!
//! Layer layout per encoder: affine (obs_dim -> hidden), relu, affine
//! (hidden -> embed). The classifier is an embed_dim x classes matrix whose
//! columns are the per-identity weight vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::mat::{accumulate_outer, affine_forward, column_sums, matmul_rows, Mat};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    fn zeros_like(&self) -> Affine {
        Affine {
            w: Mat::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: Affine,
    pub l2: Affine,
}

impl Mlp {
    fn zeros_like(&self) -> Mlp {
        Mlp {
            l1: self.l1.zeros_like(),
            l2: self.l2.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub face: Mlp,
    pub voice: Mlp,
    /// embed_dim x classes; column k is the classifier vector of identity k.
    pub classifier: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderSide {
    Face,
    Voice,
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("non-finite input at batch row {0}")]
    NonFiniteInput(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("checkpoint dims {found:?} do not match expected {expected:?}")]
    DimMismatch {
        expected: EncoderDims,
        found: EncoderDims,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl EncoderParams {
    /// Scaled-uniform init: weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)],
    /// biases zero; the classifier follows the same rule with fan_in = embed_dim.
    pub fn init(dims: EncoderDims, rng: &mut Rng) -> EncoderParams {
        assert!(
            dims.obs_dim >= 1 && dims.hidden_dim >= 1 && dims.embed_dim >= 1 && dims.classes >= 1,
            "all dims must be >= 1"
        );
        let mut uniform_mat = |rows: usize, cols: usize, fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut m = Mat::zeros(rows, cols);
            for x in m.data_mut() {
                *x = (2.0 * rng.next_f64() - 1.0) * scale;
            }
            m
        };
        let face = Mlp {
            l1: Affine {
                w: uniform_mat(dims.hidden_dim, dims.obs_dim, dims.obs_dim),
                b: vec![0.0; dims.hidden_dim],
            },
            l2: Affine {
                w: uniform_mat(dims.embed_dim, dims.hidden_dim, dims.hidden_dim),
                b: vec![0.0; dims.embed_dim],
            },
        };
        let voice = Mlp {
            l1: Affine {
                w: uniform_mat(dims.hidden_dim, dims.obs_dim, dims.obs_dim),
                b: vec![0.0; dims.hidden_dim],
            },
            l2: Affine {
                w: uniform_mat(dims.embed_dim, dims.hidden_dim, dims.hidden_dim),
                b: vec![0.0; dims.embed_dim],
            },
        };
        let classifier = uniform_mat(dims.embed_dim, dims.classes, dims.embed_dim);
        EncoderParams {
            face,
            voice,
            classifier,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            obs_dim: self.face.l1.w.cols(),
            hidden_dim: self.face.l1.w.rows(),
            embed_dim: self.face.l2.w.rows(),
            classes: self.classifier.cols(),
        }
    }

    pub fn side(&self, side: EncoderSide) -> &Mlp {
        match side {
            EncoderSide::Face => &self.face,
            EncoderSide::Voice => &self.voice,
        }
    }

    /// All parameter tensors in checkpoint order, with stable names.
    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("face.l1.w", &self.face.l1.w),
            ("face.l2.w", &self.face.l2.w),
            ("voice.l1.w", &self.voice.l1.w),
            ("voice.l2.w", &self.voice.l2.w),
            ("classifier", &self.classifier),
        ]
    }
}

/// Batch activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    side: EncoderSide,
    input: Mat,
    hidden: Mat,
}

pub(crate) enum Nonlinearity {
    Relu,
    /// test-only: disables the hidden nonlinearity to expose the affine composition
    #[allow(dead_code)]
    Identity,
}

pub(crate) fn forward_with(
    params: &EncoderParams,
    batch: &Mat,
    side: EncoderSide,
    nonlin: Nonlinearity,
) -> Result<(Mat, ForwardCache), EncoderError> {
    let dims = params.dims();
    if batch.cols() != dims.obs_dim {
        return Err(EncoderError::ShapeMismatch(format!(
            "batch has {} features, encoder wants {}",
            batch.cols(),
            dims.obs_dim
        )));
    }
    for (i, row) in batch.iter_rows().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::NonFiniteInput(i));
        }
    }
    let mlp = params.side(side);
    let n = batch.rows();
    let mut hidden = Mat::zeros(n, dims.hidden_dim);
    affine_forward(batch, &mlp.l1.w, &mlp.l1.b, &mut hidden);
    if let Nonlinearity::Relu = nonlin {
        for x in hidden.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
    let mut out = Mat::zeros(n, dims.embed_dim);
    affine_forward(&hidden, &mlp.l2.w, &mlp.l2.b, &mut out);
    Ok((
        out,
        ForwardCache {
            side,
            input: batch.clone(),
            hidden,
        },
    ))
}

/// Embeds a batch (N x obs_dim) into N x embed_dim, returning the cache
/// needed for an exact backward pass.
pub fn forward(
    params: &EncoderParams,
    batch: &Mat,
    side: EncoderSide,
) -> Result<(Mat, ForwardCache), EncoderError> {
    forward_with(params, batch, side, Nonlinearity::Relu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub l1: Affine,
    pub l2: Affine,
}

/// Gradients of a scalar `sum(grad_embeddings . embeddings)` with respect to
/// the parameters of one encoder.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_embeddings: &Mat,
) -> Result<MlpGrads, EncoderError> {
    let dims = params.dims();
    let n = cache.input.rows();
    if grad_embeddings.rows() != n || grad_embeddings.cols() != dims.embed_dim {
        return Err(EncoderError::ShapeMismatch(format!(
            "grad embeddings {}x{}, cache batch {} embed {}",
            grad_embeddings.rows(),
            grad_embeddings.cols(),
            n,
            dims.embed_dim
        )));
    }
    let mlp = params.side(cache.side);

    let mut g2 = Affine {
        w: Mat::zeros(dims.embed_dim, dims.hidden_dim),
        b: vec![0.0; dims.embed_dim],
    };
    accumulate_outer(grad_embeddings, &cache.hidden, &mut g2.w);
    column_sums(grad_embeddings, &mut g2.b);

    // back through l2 and the relu; hidden == 0 means the unit was clamped
    // (or exactly at the kink, where the subgradient convention is 0)
    let mut ghidden = Mat::zeros(n, dims.hidden_dim);
    matmul_rows(grad_embeddings, &mlp.l2.w, &mut ghidden);
    for (g, h) in ghidden.data_mut().iter_mut().zip(cache.hidden.data()) {
        if *h <= 0.0 {
            *g = 0.0;
        }
    }

    let mut g1 = Affine {
        w: Mat::zeros(dims.hidden_dim, dims.obs_dim),
        b: vec![0.0; dims.hidden_dim],
    };
    accumulate_outer(&ghidden, &cache.input, &mut g1.w);
    column_sums(&ghidden, &mut g1.b);

    Ok(MlpGrads { l1: g1, l2: g2 })
}

/// Full-model gradient bundle (filled by the trainer from the loss outputs).
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub face: MlpGrads,
    pub voice: MlpGrads,
    pub classifier: Mat,
}

impl ModelGrads {
    pub fn zeros_like(params: &EncoderParams) -> ModelGrads {
        ModelGrads {
            face: MlpGrads {
                l1: params.face.l1.zeros_like(),
                l2: params.face.l2.zeros_like(),
            },
            voice: MlpGrads {
                l1: params.voice.l1.zeros_like(),
                l2: params.voice.l2.zeros_like(),
            },
            classifier: Mat::zeros(params.classifier.rows(), params.classifier.cols()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Box<EncoderParams>,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            buffers: Box::new(EncoderParams {
                face: params.face.zeros_like(),
                voice: params.voice.zeros_like(),
                classifier: Mat::zeros(params.classifier.rows(), params.classifier.cols()),
            }),
        }
    }
}

fn sgd_tensor(param: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), buf.len());
    for ((p, g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = momentum * *b + *g + wd * *p;
        *p -= lr * *b;
    }
}

/// buffer <- momentum*buffer + grad + weight_decay*param; param -= lr*buffer.
/// Weight decay applies to weight matrices and the classifier, not biases.
pub fn sgd_step(params: &mut EncoderParams, grads: &ModelGrads, opt: &mut OptimizerState) {
    let (lr, mom, wd) = (opt.learning_rate, opt.momentum, opt.weight_decay);
    let buf = &mut opt.buffers;
    for (mlp, g, b) in [
        (&mut params.face, &grads.face, &mut buf.face),
        (&mut params.voice, &grads.voice, &mut buf.voice),
    ] {
        sgd_tensor(mlp.l1.w.data_mut(), g.l1.w.data(), b.l1.w.data_mut(), lr, mom, wd);
        sgd_tensor(&mut mlp.l1.b, &g.l1.b, &mut b.l1.b, lr, mom, 0.0);
        sgd_tensor(mlp.l2.w.data_mut(), g.l2.w.data(), b.l2.w.data_mut(), lr, mom, wd);
        sgd_tensor(&mut mlp.l2.b, &g.l2.b, &mut b.l2.b, lr, mom, 0.0);
    }
    sgd_tensor(
        params.classifier.data_mut(),
        grads.classifier.data(),
        buf.classifier.data_mut(),
        lr,
        mom,
        wd,
    );
}

/// Step learning rate: multiply by 0.1 at each listed iteration (inclusive).
pub fn lr_at(base: f64, decay_iters: &[usize], t: usize) -> f64 {
    let drops = decay_iters.iter().filter(|&&d| t >= d).count();
    base * 0.1f64.powi(drops as i32)
}

/// Largest classifier column norm, the constant in the implicit-loss bound.
pub fn max_classifier_column_norm(classifier: &Mat) -> f64 {
    let mut best: f64 = 0.0;
    for k in 0..classifier.cols() {
        let mut sq = 0.0;
        for d in 0..classifier.rows() {
            let v = classifier.get(d, k);
            sq += v * v;
        }
        best = best.max(sq.sqrt());
    }
    best
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VFCK0001";

/// Checkpoint layout: magic, dims (obs, hidden, embed, classes) as u64,
/// iteration u64, seed u64, then raw little-endian f64 blocks in the order
/// face.l1.w, face.l1.b, face.l2.w, face.l2.b, voice likewise, classifier.
pub fn write_checkpoint(
    path: &Path,
    params: &EncoderParams,
    iteration: u64,
    seed: u64,
) -> Result<(), EncoderError> {
    let dims = params.dims();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        dims.obs_dim as u64,
        dims.hidden_dim as u64,
        dims.embed_dim as u64,
        dims.classes as u64,
        iteration,
        seed,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let block = |w: &mut BufWriter<File>, xs: &[f64]| -> std::io::Result<()> {
        for v in xs {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for mlp in [&params.face, &params.voice] {
        block(&mut w, mlp.l1.w.data())?;
        block(&mut w, &mlp.l1.b)?;
        block(&mut w, mlp.l2.w.data())?;
        block(&mut w, &mlp.l2.b)?;
    }
    block(&mut w, params.classifier.data())?;
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub params: EncoderParams,
    pub iteration: u64,
    pub seed: u64,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, EncoderError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(EncoderError::BadMagic);
    }
    let next_u64 = |r: &mut BufReader<File>| -> Result<u64, EncoderError> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    };
    let obs_dim = next_u64(&mut r)? as usize;
    let hidden_dim = next_u64(&mut r)? as usize;
    let embed_dim = next_u64(&mut r)? as usize;
    let classes = next_u64(&mut r)? as usize;
    let iteration = next_u64(&mut r)?;
    let seed = next_u64(&mut r)?;
    if [obs_dim, hidden_dim, embed_dim, classes].iter().any(|&d| d == 0 || d > 1_000_000) {
        return Err(EncoderError::Malformed("implausible dims".into()));
    }
    let read_block = |r: &mut BufReader<File>, n: usize| -> Result<Vec<f64>, EncoderError> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let read_mlp = |r: &mut BufReader<File>| -> Result<Mlp, EncoderError> {
        Ok(Mlp {
            l1: Affine {
                w: Mat::from_vec(hidden_dim, obs_dim, read_block(r, hidden_dim * obs_dim)?),
                b: read_block(r, hidden_dim)?,
            },
            l2: Affine {
                w: Mat::from_vec(embed_dim, hidden_dim, read_block(r, embed_dim * hidden_dim)?),
                b: read_block(r, embed_dim)?,
            },
        })
    };
    let face = read_mlp(&mut r)?;
    let voice = read_mlp(&mut r)?;
    let classifier = Mat::from_vec(embed_dim, classes, read_block(&mut r, embed_dim * classes)?);
    Ok(Checkpoint {
        params: EncoderParams {
            face,
            voice,
            classifier,
        },
        iteration,
        seed,
    })
}

/// Validates that a loaded checkpoint matches expected dims.
pub fn expect_dims(checkpoint: &Checkpoint, expected: EncoderDims) -> Result<(), EncoderError> {
    let found = checkpoint.params.dims();
    if found != expected {
        return Err(EncoderError::DimMismatch { expected, found });
    }
    Ok(())
}
