//! Stage losses (cross-entropy, focal, binary variants, MAE/MSE), their
//! gradients with respect to raw head scores, ordinal encode/decode, and the
//! three label-smoothing schemes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Grade;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_row, N_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cumulative binary encoding of a grade: bits[j] = 1 iff j <= grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrdinalTarget {
    pub bits: [u8; N_CLASSES],
}

impl OrdinalTarget {
    pub fn is_monotone(&self) -> bool {
        self.bits.windows(2).all(|w| w[0] >= w[1]) && self.bits[0] == 1
    }
}

pub fn encode_ordinal(grade: Grade) -> OrdinalTarget {
    let mut bits = [0u8; N_CLASSES];
    for (j, b) in bits.iter_mut().enumerate() {
        *b = (j <= grade.index()) as u8;
    }
    OrdinalTarget { bits }
}

/// grade = clamp(count(sigma_j > threshold) - 1, 0, 4)
pub fn decode_ordinal<S: Scalar>(sigmoids: &[S; N_CLASSES], threshold: S) -> Grade {
    let count = sigmoids.iter().filter(|&&s| s > threshold).count();
    Grade::new(count.saturating_sub(1).min(4) as u8).unwrap()
}

fn log_softmax<S: Scalar>(scores: &[S]) -> Vec<S> {
    let max = scores.iter().cloned().fold(S::neg_infinity(), S::max);
    let lse = scores
        .iter()
        .map(|&v| (v - max).exp())
        .fold(S::zero(), |a, b| a + b)
        .ln()
        + max;
    scores.iter().map(|&v| v - lse).collect()
}

/// Cross-entropy over softmax of `scores`. Returns loss and gradient with
/// respect to the raw scores (p - t).
pub fn cross_entropy<S: Scalar>(
    scores: &[S; N_CLASSES],
    target: &[S; N_CLASSES],
) -> (S, [S; N_CLASSES]) {
    let log_p = log_softmax(scores);
    let probs = softmax_row(scores);
    let mut loss = S::zero();
    let mut grad = [S::zero(); N_CLASSES];
    for i in 0..N_CLASSES {
        loss -= target[i] * log_p[i];
        grad[i] = probs[i] - target[i];
    }
    (loss, grad)
}

/// Focal loss over softmax: sum_i t_i * (-alpha (1-p_i)^gamma ln p_i).
/// Reduces to cross-entropy at gamma = 0, alpha = 1.
pub fn focal_loss<S: Scalar>(
    scores: &[S; N_CLASSES],
    target: &[S; N_CLASSES],
    gamma: f64,
    alpha: f64,
) -> (S, [S; N_CLASSES]) {
    let probs = softmax_row(scores);
    let log_p = log_softmax(scores);
    let a = S::of_f64(alpha);
    let g = S::of_f64(gamma);

    let mut loss = S::zero();
    // df[i] = d/dp_i of the per-class focal term.
    let mut df = [S::zero(); N_CLASSES];
    for i in 0..N_CLASSES {
        let p = probs[i];
        let one_m = S::one() - p;
        loss -= target[i] * a * one_m.powf(g) * log_p[i];
        let pow_term = if gamma == 0.0 {
            S::zero()
        } else {
            g * one_m.powf(g - S::one()) * log_p[i]
        };
        df[i] = a * (pow_term - one_m.powf(g) / p);
    }
    let mut grad = [S::zero(); N_CLASSES];
    for j in 0..N_CLASSES {
        let mut acc = S::zero();
        for i in 0..N_CLASSES {
            let dp = if i == j {
                probs[i] * (S::one() - probs[j])
            } else {
                -probs[i] * probs[j]
            };
            acc += target[i] * df[i] * dp;
        }
        grad[j] = acc;
    }
    (loss, grad)
}

/// Binary cross-entropy from logits, mean over the 5 ordinal components.
/// Gradient per component is (sigma_j - t_j) / 5.
pub fn binary_cross_entropy<S: Scalar>(
    scores: &[S; N_CLASSES],
    target: &[S; N_CLASSES],
) -> (S, [S; N_CLASSES]) {
    let inv_k = S::of_f64(1.0 / N_CLASSES as f64);
    let mut loss = S::zero();
    let mut grad = [S::zero(); N_CLASSES];
    for j in 0..N_CLASSES {
        let z = scores[j];
        // max(z,0) - z t + ln(1 + e^{-|z|}) is the overflow-safe form.
        loss += (z.max(S::zero()) - z * target[j] + (S::one() + (-z.abs()).exp()).ln()) * inv_k;
        grad[j] = (sigmoid(z) - target[j]) * inv_k;
    }
    (loss, grad)
}

/// Binary focal loss from logits, soft-target form:
/// t * (-alpha (1-s)^g ln s) + (1-t) * (-alpha s^g ln(1-s)), mean over 5.
/// Reduces to BCE at gamma = 0, alpha = 1.
pub fn binary_focal_loss<S: Scalar>(
    scores: &[S; N_CLASSES],
    target: &[S; N_CLASSES],
    gamma: f64,
    alpha: f64,
) -> (S, [S; N_CLASSES]) {
    let inv_k = S::of_f64(1.0 / N_CLASSES as f64);
    let a = S::of_f64(alpha);
    let g = S::of_f64(gamma);
    let tiny = S::of_f64(1e-12);
    let mut loss = S::zero();
    let mut grad = [S::zero(); N_CLASSES];
    for j in 0..N_CLASSES {
        let s = sigmoid(scores[j]).max(tiny).min(S::one() - tiny);
        let t = target[j];
        let term = |q: S| -a * (S::one() - q).powf(g) * q.ln();
        let dterm = |q: S| {
            let pow = if gamma == 0.0 {
                S::zero()
            } else {
                g * (S::one() - q).powf(g - S::one()) * q.ln()
            };
            a * (pow - (S::one() - q).powf(g) / q)
        };
        loss += (t * term(s) + (S::one() - t) * term(S::one() - s)) * inv_k;
        let ds = s * (S::one() - s);
        grad[j] = (t * dterm(s) - (S::one() - t) * dterm(S::one() - s)) * ds * inv_k;
    }
    (loss, grad)
}

/// |p - t| with subgradient sign(p - t), zero at the tie.
pub fn mae<S: Scalar>(pred: S, target: S) -> (S, S) {
    let d = pred - target;
    let grad = if d > S::zero() {
        S::one()
    } else if d < S::zero() {
        -S::one()
    } else {
        S::zero()
    };
    (d.abs(), grad)
}

pub fn mse<S: Scalar>(pred: S, target: S) -> (S, S) {
    let d = pred - target;
    (d * d, S::of_f64(2.0) * d)
}

/// (1-eps) + eps/K on the true class, eps/K elsewhere.
pub fn smooth_classification<S: Scalar>(grade: Grade, eps: f64) -> [S; N_CLASSES] {
    let off = S::of_f64(eps / N_CLASSES as f64);
    let mut t = [off; N_CLASSES];
    t[grade.index()] = S::of_f64(1.0 - eps) + off;
    t
}

/// Ordinal bits softened complementarily: 1 -> 1-eps, 0 -> eps.
pub fn smooth_ordinal<S: Scalar>(target: &OrdinalTarget, eps: f64) -> [S; N_CLASSES] {
    let mut t = [S::zero(); N_CLASSES];
    for (o, &b) in t.iter_mut().zip(&target.bits) {
        *o = S::of_f64(if b == 1 { 1.0 - eps } else { eps });
    }
    t
}

/// Uniform-noise smoothing of a discrete regression target:
/// T_s = T + U(-b, b).
pub fn smooth_regression(target: f64, halfwidth: f64, rng: &mut ChaCha8Rng) -> f64 {
    if halfwidth == 0.0 {
        return target;
    }
    target + rng.gen_range(-halfwidth..halfwidth)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClsLoss {
    CrossEntropy,
    Focal { gamma: f64, alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OrdLoss {
    BinaryCrossEntropy,
    BinaryFocal { gamma: f64, alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegLoss {
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug)]
pub struct StageLossSet {
    pub cls: ClsLoss,
    pub ord: OrdLoss,
    pub reg: RegLoss,
    /// Per-head multipliers (cls, reg, ord).
    pub weights: [f64; 3],
}

impl StageLossSet {
    /// Pretraining losses: CE / BCE / MAE.
    pub fn pretrain() -> Self {
        StageLossSet {
            cls: ClsLoss::CrossEntropy,
            ord: OrdLoss::BinaryCrossEntropy,
            reg: RegLoss::Mae,
            weights: [1.0; 3],
        }
    }

    /// Main-training losses: focal / binary focal / MSE.
    pub fn main() -> Self {
        StageLossSet {
            cls: ClsLoss::Focal { gamma: 2.0, alpha: 1.0 },
            ord: OrdLoss::BinaryFocal { gamma: 2.0, alpha: 1.0 },
            reg: RegLoss::Mse,
            weights: [1.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SmoothingConfig {
    pub eps_cls: f64,
    pub eps_ord: f64,
    /// Halfwidth b of the U(-b, b) regression noise; must stay below half
    /// the unit label spacing.
    pub reg_halfwidth: f64,
}

impl SmoothingConfig {
    pub fn none() -> Self {
        SmoothingConfig { eps_cls: 0.0, eps_ord: 0.0, reg_halfwidth: 0.0 }
    }

    pub fn default_training() -> Self {
        SmoothingConfig { eps_cls: 0.1, eps_ord: 0.1, reg_halfwidth: 1.0 / 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps_cls) || !(0.0..1.0).contains(&self.eps_ord) {
            return Err(Error::Config("smoothing eps must be in [0,1)".into()));
        }
        if !(0.0..0.5).contains(&self.reg_halfwidth) {
            return Err(Error::Config("reg_halfwidth must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Batch-averaged multi-task loss plus per-head raw-score gradients
/// (already scaled by head weight and 1/N).
pub fn stage_loss<S: Scalar>(
    cls_raw: &Tensor<S>,
    reg_raw: &Tensor<S>,
    ord_raw: &Tensor<S>,
    grades: &[Grade],
    set: &StageLossSet,
    smoothing: &SmoothingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(S, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let n = grades.len();
    if cls_raw.shape()[0] != n || reg_raw.shape()[0] != n || ord_raw.shape()[0] != n {
        return Err(Error::Data(format!(
            "batch size mismatch: {n} targets vs {:?} outputs",
            cls_raw.shape()
        )));
    }
    smoothing.validate()?;
    let inv_n = S::of_f64(1.0 / n as f64);
    let [w_cls, w_reg, w_ord] = set.weights.map(S::of_f64);

    let mut total = S::zero();
    let mut d_cls = Tensor::zeros(cls_raw.shape());
    let mut d_reg = Tensor::zeros(reg_raw.shape());
    let mut d_ord = Tensor::zeros(ord_raw.shape());

    for (s, &grade) in grades.iter().enumerate() {
        let cls_scores: [S; N_CLASSES] =
            cls_raw.data()[s * N_CLASSES..(s + 1) * N_CLASSES].try_into().unwrap();
        let ord_scores: [S; N_CLASSES] =
            ord_raw.data()[s * N_CLASSES..(s + 1) * N_CLASSES].try_into().unwrap();

        let cls_target = smooth_classification::<S>(grade, smoothing.eps_cls);
        let (cl, cg) = match set.cls {
            ClsLoss::CrossEntropy => cross_entropy(&cls_scores, &cls_target),
            ClsLoss::Focal { gamma, alpha } => focal_loss(&cls_scores, &cls_target, gamma, alpha),
        };

        let ord_target = smooth_ordinal::<S>(&encode_ordinal(grade), smoothing.eps_ord);
        let (ol, og) = match set.ord {
            OrdLoss::BinaryCrossEntropy => binary_cross_entropy(&ord_scores, &ord_target),
            OrdLoss::BinaryFocal { gamma, alpha } => {
                binary_focal_loss(&ord_scores, &ord_target, gamma, alpha)
            }
        };

        let reg_target = S::of_f64(smooth_regression(
            grade.value() as f64,
            smoothing.reg_halfwidth,
            rng,
        ));
        let (rl, rg) = match set.reg {
            RegLoss::Mae => mae(reg_raw.data()[s], reg_target),
            RegLoss::Mse => mse(reg_raw.data()[s], reg_target),
        };

        total += (w_cls * cl + w_ord * ol + w_reg * rl) * inv_n;
        for j in 0..N_CLASSES {
            d_cls.data_mut()[s * N_CLASSES + j] = w_cls * cg[j] * inv_n;
            d_ord.data_mut()[s * N_CLASSES + j] = w_ord * og[j] * inv_n;
        }
        d_reg.data_mut()[s] = w_reg * rg * inv_n;
    }
    Ok((total, d_cls, d_reg, d_ord))
}
