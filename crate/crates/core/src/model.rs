//! Linear ε-insensitive regressor (primal linear SVR) trained by minibatch
//! subgradient descent, plus the canonical `FCW1` weight encoding.
//!
//! Layout of an encoded model: `b"FCW1"`, one version byte, `d` as u32 LE,
//! then `d + 1` f64 LE values (the weights followed by the bias).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Samples;

pub const MAGIC: &[u8; 4] = b"FCW1";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 9;
pub const INIT_RANGE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: model has {expected} weights, input has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {predictions} predictions vs {actuals} actuals")]
    LengthMismatch { predictions: usize, actuals: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad magic: expected FCW1")]
    BadMagic,
    #[error("unsupported weight format version {0}")]
    VersionMismatch(u8),
    #[error("truncated payload: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after weight payload")]
    TrailingBytes(usize),
    #[error("weights contain non-finite values")]
    NonFiniteWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub w: Vec<f64>,
    pub bias: f64,
    pub version: u8,
}

impl ModelWeights {
    pub fn new(w: Vec<f64>, bias: f64) -> Self {
        Self {
            w,
            bias,
            version: FORMAT_VERSION,
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(vec![0.0; d], 0.0)
    }

    /// Uniform weights in `[-0.01, 0.01]`; bias defaults to 0.
    pub fn init(d: usize, seed: u64, bias: Option<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..d)
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Self::new(w, bias.unwrap_or(0.0))
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.w.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, got: usize) -> Result<(), ModelError> {
        if got == self.dim() {
            Ok(())
        } else {
            Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got,
            })
        }
    }

    /// Unclamped linear score `w·x + bias`.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn predict_one(&self, x: &[f64], cap: f64) -> Result<f64, ModelError> {
        self.check_dim(x.len())?;
        Ok(self.score(x).clamp(0.0, cap))
    }

    pub fn predict(&self, samples: &Samples, cap: f64) -> Result<Vec<f64>, ModelError> {
        self.check_dim(samples.dim)?;
        Ok(samples
            .rows()
            .map(|x| self.score(x).clamp(0.0, cap))
            .collect())
    }

    /// RMSE of clamped predictions against the sample targets.
    pub fn evaluate(&self, samples: &Samples, cap: f64) -> Result<f64, ModelError> {
        rmse(&self.predict(samples, cap)?, &samples.y)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(encoded_len(self.dim()));
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.w.iter().chain(std::iter::once(&self.bias)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < HEADER_LEN {
            return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                ModelError::BadMagic
            } else {
                ModelError::Truncated {
                    needed: HEADER_LEN,
                    have: bytes.len(),
                }
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(ModelError::VersionMismatch(bytes[4]));
        }
        let d = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let needed = encoded_len(d);
        if bytes.len() < needed {
            return Err(ModelError::Truncated {
                needed,
                have: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(ModelError::TrailingBytes(bytes.len() - needed));
        }
        let mut values: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let bias = values.pop().expect("d + 1 values");
        Ok(Self::new(values, bias))
    }
}

pub fn encoded_len(d: usize) -> usize {
    HEADER_LEN + 8 * (d + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub epsilon: f64,
    pub reg_lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            epsilon: 2.0,
            reg_lambda: 1e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be non-negative");
        }
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return bad("reg_lambda must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossSpec {
        LossSpec {
            epsilon: self.epsilon,
            lambda: self.reg_lambda,
        }
    }
}

/// Mean ε-insensitive loss plus `(λ/2)‖w‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub epsilon: f64,
    pub lambda: f64,
}

impl LossSpec {
    pub fn hinge(&self, residual: f64) -> f64 {
        (residual.abs() - self.epsilon).max(0.0)
    }

    fn penalty(&self, m: &ModelWeights) -> f64 {
        0.5 * self.lambda * m.w.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn sample_loss(&self, m: &ModelWeights, x: &[f64], y: f64) -> f64 {
        self.hinge(y - m.score(x)) + self.penalty(m)
    }

    pub fn mean_loss(&self, m: &ModelWeights, samples: &Samples) -> f64 {
        self.batch_loss(m, samples, 0..samples.len())
    }

    fn batch_loss(
        &self,
        m: &ModelWeights,
        samples: &Samples,
        idx: impl ExactSizeIterator<Item = usize>,
    ) -> f64 {
        let n = idx.len().max(1) as f64;
        let hinge: f64 = idx
            .map(|i| self.hinge(samples.y[i] - m.score(samples.row(i))))
            .sum();
        hinge / n + self.penalty(m)
    }

    /// Subgradient of the mean loss over `idx`, returned as `(dw, dbias)`.
    /// At a kink (`|r| == ε`) the hinge contributes zero.
    pub fn subgradient(
        &self,
        m: &ModelWeights,
        samples: &Samples,
        idx: &[usize],
    ) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; m.dim()];
        let mut gb = 0.0;
        for &i in idx {
            let x = samples.row(i);
            let r = samples.y[i] - m.score(x);
            if r.abs() > self.epsilon {
                let s = -r.signum();
                gb += s;
                for (g, xj) in gw.iter_mut().zip(x) {
                    *g += s * xj;
                }
            }
        }
        let n = idx.len().max(1) as f64;
        for (g, w) in gw.iter_mut().zip(&m.w) {
            *g = *g / n + self.lambda * w;
        }
        (gw, gb / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Full-shard loss before training and after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch subgradient descent from `start`. Each epoch visits the shard in
/// an order drawn from `cfg.seed`.
pub fn train_local(
    start: &ModelWeights,
    samples: &Samples,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    start.check_dim(samples.dim)?;
    if samples.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let loss = cfg.loss();
    let mut m = start.clone();
    let mut epoch_losses = vec![loss.mean_loss(&m, samples)];
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            weights: m,
            epoch_losses,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (gw, gb) = loss.subgradient(&m, samples, batch);
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= cfg.learning_rate * g;
            }
            m.bias -= cfg.learning_rate * gb;
            if !m.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, step });
            }
        }
        let l = loss.mean_loss(&m, samples);
        if !l.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                step: order.len().div_ceil(cfg.batch_size),
            });
        }
        epoch_losses.push(l);
    }
    Ok(TrainOutcome {
        weights: m,
        epoch_losses,
    })
}

pub fn rmse(predictions: &[f64], actuals: &[f64]) -> Result<f64, ModelError> {
    if predictions.len() != actuals.len() {
        return Err(ModelError::LengthMismatch {
            predictions: predictions.len(),
            actuals: actuals.len(),
        });
    }
    if predictions.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let sse: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a).powi(2))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}
