//! Minibatch SGD with momentum, Rectified Adam, decoupled weight decay, and
//! the cosine-annealing schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{BlockId, LayerGrad, ModelGrads, ThreeHeadModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Annealing period in steps (here: epochs).
    pub period: u64,
}

impl LrSchedule {
    /// lr(t) = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / T)), clamped to
    /// lr_min past the period.
    pub fn lr_at(&self, t: u64) -> f64 {
        if t >= self.period {
            return self.lr_min;
        }
        let phase = std::f64::consts::PI * t as f64 / self.period as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Sgd { momentum: f64 },
    RAdam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn radam_default() -> Self {
        OptimKind::RAdam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecayConfig {
    /// Decoupled weight-decay coefficient; biases are always excluded.
    pub wd: f64,
}

#[derive(Clone, Debug)]
struct ParamState<S: Scalar> {
    /// SGD velocity or Adam first moment.
    m: Tensor<S>,
    /// Adam second moment.
    v: Option<Tensor<S>>,
}

/// One optimizer per model replica. Moment tensors are keyed by
/// (block, layer, weight-or-bias) and created lazily.
#[derive(Clone, Debug)]
pub struct Optimizer<S: Scalar> {
    pub kind: OptimKind,
    pub t: u64,
    states: BTreeMap<(u8, usize, u8), ParamState<S>>,
}

fn block_tag(block: BlockId) -> u8 {
    match block {
        BlockId::Encoder => 0,
        BlockId::ClsHead => 1,
        BlockId::RegHead => 2,
        BlockId::OrdHead => 3,
        BlockId::Fusion => 4,
    }
}

/// One parameter-tensor update at step `t` (1-based). `decay` is applied
/// decoupled, after the gradient step.
pub fn apply_update<S: Scalar>(
    kind: OptimKind,
    t: u64,
    state: &mut ParamStateView<'_, S>,
    param: &mut [S],
    grad: &[S],
    lr: f64,
    decay: f64,
) {
    let lr_s = S::of_f64(lr);
    match kind {
        OptimKind::Sgd { momentum } => {
            let mu = S::of_f64(momentum);
            for i in 0..param.len() {
                state.m[i] = mu * state.m[i] + grad[i];
                param[i] -= lr_s * state.m[i];
            }
        }
        OptimKind::RAdam { beta1, beta2, eps } => {
            let v = state.v.as_deref_mut().expect("radam state has second moment");
            let b1 = S::of_f64(beta1);
            let b2 = S::of_f64(beta2);
            let one = S::one();
            let bias1 = S::of_f64(1.0 - beta1.powi(t as i32));
            let beta2_t = beta2.powi(t as i32);
            let bias2 = 1.0 - beta2_t;
            let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
            let rho_t = rho_inf - 2.0 * t as f64 * beta2_t / bias2;
            let rect = if rho_t > 4.0 {
                Some(S::of_f64(
                    (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                        .sqrt(),
                ))
            } else {
                None
            };
            let eps_s = S::of_f64(eps);
            let inv_bias2_sqrt = S::of_f64(1.0 / bias2.sqrt());
            for i in 0..param.len() {
                state.m[i] = b1 * state.m[i] + (one - b1) * grad[i];
                v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
                let m_hat = state.m[i] / bias1;
                match rect {
                    Some(r) => {
                        let v_hat = v[i].sqrt() * inv_bias2_sqrt;
                        param[i] -= lr_s * r * m_hat / (v_hat + eps_s);
                    }
                    None => param[i] -= lr_s * m_hat,
                }
            }
        }
    }
    if decay > 0.0 {
        let shrink = S::of_f64(1.0 - lr * decay);
        for p in param.iter_mut() {
            *p *= shrink;
        }
    }
}

/// Mutable view over one parameter's moment buffers.
pub struct ParamStateView<'a, S: Scalar> {
    pub m: &'a mut [S],
    pub v: Option<&'a mut [S]>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimKind) -> Self {
        Optimizer { kind, t: 0, states: BTreeMap::new() }
    }

    /// Applies one step to every unfrozen block present in `grads`.
    /// Weight decay hits weight tensors only.
    pub fn step(
        &mut self,
        model: &mut ThreeHeadModel<S>,
        grads: &ModelGrads<S>,
        lr: f64,
        decay: &DecayConfig,
    ) -> Result<()> {
        self.t += 1;
        let needs_v = matches!(self.kind, OptimKind::RAdam { .. });
        let kind = self.kind;
        let t = self.t;

        let blocks: [(BlockId, &Option<Vec<LayerGrad<S>>>); 4] = [
            (BlockId::Encoder, &grads.encoder),
            (BlockId::ClsHead, &grads.cls),
            (BlockId::RegHead, &grads.reg),
            (BlockId::OrdHead, &grads.ord),
        ];
        for (block, block_grads) in blocks {
            let Some(block_grads) = block_grads else { continue };
            if model.is_frozen(block) {
                return Err(Error::Protocol(format!(
                    "gradients supplied for frozen block {block:?}"
                )));
            }
            for li in 0..block_grads.len() {
                for (which, is_weight) in [(0u8, true), (1u8, false)] {
                    let grad = if is_weight {
                        &block_grads[li].weight
                    } else {
                        &block_grads[li].bias
                    };
                    let Some(grad) = grad else { continue };
                    let key = (block_tag(block), li, which);
                    let state = self.states.entry(key).or_insert_with(|| ParamState {
                        m: Tensor::zeros(grad.shape()),
                        v: needs_v.then(|| Tensor::zeros(grad.shape())),
                    });
                    if state.m.shape() != grad.shape() {
                        return Err(Error::Protocol(format!(
                            "optimizer state shape {:?} does not match gradient {:?}",
                            state.m.shape(),
                            grad.shape()
                        )));
                    }
                    let layer = &mut model.block_layers_mut(block)[li];
                    let param = if is_weight {
                        layer.weight.as_mut()
                    } else {
                        layer.bias.as_mut()
                    }
                    .ok_or_else(|| Error::Protocol("gradient for missing parameter".into()))?;
                    let mut view = ParamStateView {
                        m: state.m.data_mut(),
                        v: state.v.as_mut().map(|v| v.data_mut()),
                    };
                    let wd = if is_weight { decay.wd } else { 0.0 };
                    apply_update(kind, t, &mut view, param.data_mut(), grad.data(), lr, wd);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_step(
        kind: OptimKind,
        t: u64,
        m: &mut [f64],
        v: Option<&mut [f64]>,
        p: &mut [f64],
        g: &[f64],
        lr: f64,
        wd: f64,
    ) {
        let mut view = ParamStateView { m, v };
        apply_update(kind, t, &mut view, p, g, lr, wd);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule { lr_max: 0.1, lr_min: 0.001, period: 20 };
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(10) - (0.1 + 0.001) / 2.0).abs() < 1e-15);
        assert_eq!(s.lr_at(20), 0.001);
        assert_eq!(s.lr_at(100), 0.001);
    }

    #[test]
    fn cosine_schedule_monotone_nonincreasing() {
        let s = LrSchedule { lr_max: 1e-3, lr_min: 1e-5, period: 75 };
        let mut prev = f64::MAX;
        for t in 0..=75 {
            let lr = s.lr_at(t);
            assert!(lr <= prev + 1e-18);
            assert!((s.lr_min..=s.lr_max).contains(&lr));
            prev = lr;
        }
    }

    #[test]
    fn sgd_single_step_arithmetic() {
        let mut p = [1.0];
        let mut m = [0.0];
        single_param_step(
            OptimKind::Sgd { momentum: 0.0 },
            1,
            &mut m,
            None,
            &mut p,
            &[0.5],
            0.1,
            0.0,
        );
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_no_change() {
        let mut p = [2.5];
        let mut m = [0.0];
        single_param_step(
            OptimKind::Sgd { momentum: 0.9 },
            1,
            &mut m,
            None,
            &mut p,
            &[0.0],
            0.1,
            0.0,
        );
        assert_eq!(p[0], 2.5);
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled_sequence() {
        // Independent oracle: scripted v/p recurrence.
        let grads = [0.3, -0.2, 0.7];
        let (mu, lr, wd) = (0.9, 0.05, 0.01);
        let mut oracle_p = 1.0;
        let mut oracle_v = 0.0;
        for g in grads {
            oracle_v = mu * oracle_v + g;
            oracle_p -= lr * oracle_v;
            oracle_p *= 1.0 - lr * wd;
        }
        let mut p = [1.0];
        let mut m = [0.0];
        for (t, g) in grads.iter().enumerate() {
            single_param_step(
                OptimKind::Sgd { momentum: mu },
                t as u64 + 1,
                &mut m,
                None,
                &mut p,
                &[*g],
                lr,
                wd,
            );
        }
        assert!((p[0] - oracle_p).abs() < 1e-12);
    }

    // Reference RAdam written directly from the update equations, kept
    // separate from apply_update.
    fn reference_radam(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
        let mut p = p0;
        let (mut m, mut v) = (0.0, 0.0);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powf(t));
            let rho_t = rho_inf - 2.0 * t * b2.powf(t) / (1.0 - b2.powf(t));
            if rho_t > 4.0 {
                let r = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt();
                let v_hat = (v / (1.0 - b2.powf(t))).sqrt();
                p -= lr * r * m_hat / (v_hat + eps);
            } else {
                p -= lr * m_hat;
            }
            p *= 1.0 - lr * wd;
        }
        p
    }

    #[test]
    fn radam_first_step_is_plain_momentum() {
        // rho_1 <= 4 at the defaults, so step 1 is -lr * g.
        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        single_param_step(
            OptimKind::radam_default(),
            1,
            &mut m,
            Some(&mut v),
            &mut p,
            &[0.4],
            0.01,
            0.0,
        );
        assert!((p[0] - (1.0 - 0.01 * 0.4)).abs() < 1e-14);
    }

    #[test]
    fn radam_trajectory_matches_reference() {
        let grads = [0.3, -0.1, 0.25, 0.4, -0.6, 0.05, 0.33, -0.21, 0.18, 0.09];
        let (lr, b1, b2, eps, wd) = (0.01, 0.9, 0.999, 1e-8, 1e-4);
        let oracle = reference_radam(0.5, &grads, lr, b1, b2, eps, wd);
        let mut p = [0.5];
        let mut m = [0.0];
        let mut v = [0.0];
        for (i, &g) in grads.iter().enumerate() {
            single_param_step(
                OptimKind::RAdam { beta1: b1, beta2: b2, eps },
                i as u64 + 1,
                &mut m,
                Some(&mut v),
                &mut p,
                &[g],
                lr,
                wd,
            );
        }
        assert!((p[0] - oracle).abs() < 1e-8, "{} vs {oracle}", p[0]);
    }

    #[test]
    fn radam_zero_gradients_only_decay() {
        let mut p = [2.0];
        let mut m = [0.0];
        let mut v = [0.0];
        let (lr, wd) = (0.01, 0.1);
        let mut expected: f64 = 2.0;
        for t in 1..=5u64 {
            single_param_step(
                OptimKind::radam_default(),
                t,
                &mut m,
                Some(&mut v),
                &mut p,
                &[0.0],
                lr,
                wd,
            );
            expected *= 1.0 - lr * wd;
        }
        assert!((p[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn optimizer_skips_frozen_blocks_via_grads() {
        use crate::nn::{backward, forward, BlockId, Mode, ThreeHeadModel};
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let mut model = ThreeHeadModel::<f64>::new_default(1).unwrap();
        model.set_frozen(BlockId::Encoder, true);
        let snapshot = model.encoder.clone();
        let head_snapshot = model.cls_head.clone();
        let batch = Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|i| i as f64 / 192.0).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = forward(&model, batch, Mode::Eval, &mut rng).unwrap();
        let mut d_cls = Tensor::zeros(&[1, 5]);
        d_cls.data_mut().fill(0.3);
        let mut d_reg = Tensor::zeros(&[1, 1]);
        d_reg.data_mut().fill(0.3);
        let mut d_ord = Tensor::zeros(&[1, 5]);
        d_ord.data_mut().fill(0.3);
        let grads = backward(&model, &cache, d_cls, d_reg, d_ord).unwrap();
        let mut opt = Optimizer::new(OptimKind::Sgd { momentum: 0.9 });
        opt.step(&mut model, &grads, 0.1, &DecayConfig { wd: 0.0 }).unwrap();
        assert_eq!(model.encoder, snapshot);
        assert_ne!(model.cls_head, head_snapshot);
        assert_eq!(opt.t, 1);
    }
}
