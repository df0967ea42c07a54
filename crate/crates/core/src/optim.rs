//! Optimisers, learning-rate schedules and Kolen-Pollack feedback learning.

use crate::error::{config_err, Error, Result};
use crate::network::{LayerGrad, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear warmup from `start` to `peak` over `warmup_epochs`, then cosine
    /// decay to `end` at `total_epochs`.
    WarmupCosine {
        start: f64,
        peak: f64,
        end: f64,
        warmup_epochs: f64,
        total_epochs: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_schedule: LrSchedule,
    /// Coupled L2 decay on weights (never on biases).
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            lr_schedule: LrSchedule::Constant(lr),
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr_schedule: LrSchedule::Constant(lr),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) {
                    return config_err(format!("adam betas must lie in (0, 1), got ({beta1}, {beta2})"));
                }
                if eps.is_nan() || eps <= 0.0 {
                    return config_err(format!("adam eps must be positive, got {eps}"));
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return config_err(format!("momentum must lie in [0, 1), got {momentum}"));
                }
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config_err(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        let rates: Vec<f64> = match self.lr_schedule {
            LrSchedule::Constant(lr) => vec![lr],
            LrSchedule::WarmupCosine {
                start,
                peak,
                end,
                warmup_epochs,
                total_epochs,
            } => {
                if !(warmup_epochs >= 0.0 && total_epochs >= warmup_epochs) {
                    return config_err(format!(
                        "warmup epochs ({warmup_epochs}) must lie in [0, total epochs ({total_epochs})]"
                    ));
                }
                vec![start, peak, end]
            }
        };
        if let Some(bad) = rates.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return config_err(format!("learning rates must be nonnegative, got {bad}"));
        }
        Ok(())
    }
}

/// Learning rate for optimisation step `step` (0-based).
pub fn lr_at(schedule: &LrSchedule, step: usize, steps_per_epoch: usize) -> f64 {
    match *schedule {
        LrSchedule::Constant(lr) => lr,
        LrSchedule::WarmupCosine {
            start,
            peak,
            end,
            warmup_epochs,
            total_epochs,
        } => {
            let e = step as f64 / steps_per_epoch.max(1) as f64;
            if e < warmup_epochs {
                start + (peak - start) * e / warmup_epochs
            } else if e >= total_epochs {
                end
            } else {
                let p = (e - warmup_epochs) / (total_epochs - warmup_epochs);
                end + 0.5 * (peak - end) * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamMoments {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// Bias-corrected ADAM step number `t` (1-based). Returns the increment that
/// was subtracted from `w`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    state: &mut AdamMoments,
    t: u64,
    w: &mut Tensor,
    g: &Tensor,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Tensor> {
    let delta = adam_delta(state, t, g, lr, beta1, beta2, eps)?;
    *w = w.sub(&delta)?;
    Ok(delta)
}

fn adam_delta(
    state: &mut AdamMoments,
    t: u64,
    g: &Tensor,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Tensor> {
    g.expect_same_shape(&state.m)?;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let mut delta = Tensor::zeros(g.shape());
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((d, m), v), &g) in delta.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *d = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(delta)
}

/// Plain Kolen-Pollack step: `W ← W − η(dW + λW)`, `B ← B − η(dWᵀ + λB)`.
pub fn kolen_pollack_step(net: &mut NetworkSpec, grads: &[LayerGrad], lr: f64, weight_decay: f64) -> Result<()> {
    if !net.is_asymmetric() {
        return config_err("Kolen-Pollack updates need a network with feedback weights");
    }
    check_layers(net, grads)?;
    for (p, g) in net.params_mut().iter_mut().zip(grads) {
        let delta = g.weight.scale(lr);
        apply_shared(p, &delta, lr * weight_decay)?;
        if let (Some(b), Some(db)) = (&mut p.bias, &g.bias) {
            *b = b.sub(&db.scale(lr))?;
        }
    }
    Ok(())
}

/// `W ← W − Δ − cW` and `B ← B − Δᵀ − cB`.
fn apply_shared(p: &mut crate::network::LayerParams, delta: &Tensor, c: f64) -> Result<()> {
    p.weight = p.weight.zip_map(delta, |w, d| w - d - c * w)?;
    let delta_t = orient_like_feedback(delta)?;
    let b = p
        .feedback
        .as_mut()
        .ok_or_else(|| Error::Config("layer has no feedback weights".into()))?;
    *b = b.zip_map(&delta_t, |b, d| b - d - c * b)?;
    Ok(())
}

/// Dense feedback is stored transposed; conv feedback shares the kernel layout.
fn orient_like_feedback(t: &Tensor) -> Result<Tensor> {
    if t.shape().len() == 2 {
        t.transpose()
    } else {
        Ok(t.clone())
    }
}

fn check_layers(net: &NetworkSpec, grads: &[LayerGrad]) -> Result<()> {
    if grads.len() != net.depth() {
        return Err(Error::Shape(format!(
            "{} layer gradients for a network with {} layers",
            grads.len(),
            net.depth()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Slot {
    Adam(AdamMoments),
    Momentum(Tensor),
}

/// Stateful optimiser over all weights and biases of a network.
///
/// In asymmetric mode the increment computed from `dW` alone is applied to
/// both `W` and (transposed) `B`, and weight decay is applied to both as a
/// separate `ηλ` shrink, so `W − Bᵀ` contracts by `1 − ηλ` every step
/// whatever the optimiser.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    weights: Vec<Slot>,
    biases: Vec<Option<Slot>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, net: &NetworkSpec) -> Result<Self> {
        cfg.validate()?;
        let slot = |shape: &[usize]| match cfg.kind {
            OptimizerKind::Adam { .. } => Slot::Adam(AdamMoments::zeros(shape)),
            OptimizerKind::SgdMomentum { .. } => Slot::Momentum(Tensor::zeros(shape)),
        };
        Ok(Self {
            cfg,
            weights: net.params().iter().map(|p| slot(p.weight.shape())).collect(),
            biases: net
                .params()
                .iter()
                .map(|p| p.bias.as_ref().map(|b| slot(b.shape())))
                .collect(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn delta(kind: OptimizerKind, slot: &mut Slot, t: u64, g: &Tensor, lr: f64) -> Result<Tensor> {
        match (kind, slot) {
            (OptimizerKind::Adam { beta1, beta2, eps }, Slot::Adam(m)) => adam_delta(m, t, g, lr, beta1, beta2, eps),
            (OptimizerKind::SgdMomentum { momentum }, Slot::Momentum(buf)) => {
                *buf = buf.zip_map(g, |b, g| momentum * b + g)?;
                Ok(buf.scale(lr))
            }
            _ => unreachable!("slot kind follows the optimiser kind"),
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, net: &mut NetworkSpec, grads: &[LayerGrad], lr: f64) -> Result<()> {
        check_layers(net, grads)?;
        self.steps += 1;
        let t = self.steps;
        let kind = self.cfg.kind;
        let wd = self.cfg.weight_decay;
        let asym = net.is_asymmetric();
        for (((p, g), ws), bs) in net
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.weights)
            .zip(&mut self.biases)
        {
            if asym {
                let delta = Self::delta(kind, ws, t, &g.weight, lr)?;
                apply_shared(p, &delta, lr * wd)?;
            } else {
                let eff = if wd > 0.0 {
                    g.weight.zip_map(&p.weight, |g, w| g + wd * w)?
                } else {
                    g.weight.clone()
                };
                let delta = Self::delta(kind, ws, t, &eff, lr)?;
                p.weight = p.weight.sub(&delta)?;
            }
            match (&mut p.bias, &g.bias, bs) {
                (Some(b), Some(db), Some(slot)) => {
                    let delta = Self::delta(kind, slot, t, db, lr)?;
                    *b = b.sub(&delta)?;
                }
                (None, None, None) => {}
                _ => return Err(Error::Shape("bias gradient does not match the layer".into())),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerSpec};
    use crate::rng::RngStream;

    fn small_net(seed: u64) -> NetworkSpec {
        let mut rng = RngStream::new(seed);
        NetworkSpec::new(
            &[3],
            vec![
                LayerSpec::dense(4, Activation::Relu),
                LayerSpec::dense(2, Activation::Identity),
            ],
            &mut rng,
        )
        .unwrap()
    }

    fn grads_like(net: &NetworkSpec, seed: u64) -> Vec<LayerGrad> {
        let mut rng = RngStream::new(seed);
        net.params()
            .iter()
            .map(|p| {
                let mut g = LayerGrad::zeros_like(p);
                for v in g.weight.data_mut() {
                    *v = rng.normal();
                }
                if let Some(b) = &mut g.bias {
                    for v in b.data_mut() {
                        *v = rng.normal();
                    }
                }
                g
            })
            .collect()
    }

    #[test]
    fn adam_zero_grads_leave_weights() {
        let mut st = AdamMoments {
            m: Tensor::vector(vec![0.5]),
            v: Tensor::vector(vec![0.25]),
        };
        let mut w = Tensor::vector(vec![1.0]);
        let mut w2 = w.clone();
        // with zero moments and zero grads nothing moves
        let mut zero = AdamMoments::zeros(&[1]);
        adam_step(&mut zero, 1, &mut w2, &Tensor::vector(vec![0.0]), 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(w2.data(), &[1.0]);
        adam_step(&mut st, 3, &mut w, &Tensor::vector(vec![0.0]), 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert!((st.m.data()[0] - 0.45).abs() < 1e-15);
        assert!((st.v.data()[0] - 0.25 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut st = AdamMoments::zeros(&[3]);
        let mut w = Tensor::zeros(&[3]);
        let g = Tensor::vector(vec![2.0, -0.5, 1e-3]);
        adam_step(&mut st, 1, &mut w, &g, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        for (wi, gi) in w.data().iter().zip(g.data()) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((wi - expect).abs() < 1e-15);
            assert!((wi + 1e-3 * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let grads = [0.3, -1.0, 0.7, 0.0, 2.5, -0.2, 0.1, 0.9, -3.0, 0.4];
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let mut st = AdamMoments::zeros(&[1]);
        let mut wt = Tensor::vector(vec![0.5]);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            adam_step(&mut st, t as u64, &mut wt, &Tensor::vector(vec![g]), lr, b1, b2, eps).unwrap();
            assert!((wt.data()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut net = small_net(1);
        let before = net.params()[0].weight.clone();
        let bias_before = net.params()[0].bias.clone().unwrap();
        let zero: Vec<LayerGrad> = net.params().iter().map(LayerGrad::zeros_like).collect();
        let mut cfg = OptimizerConfig::sgd(0.1, 0.9);
        cfg.weight_decay = 0.5;
        let mut opt = Optimizer::new(cfg, &net).unwrap();
        opt.step(&mut net, &zero, 0.1).unwrap();
        let expect = before.scale(1.0 - 0.05);
        for (a, b) in net.params()[0].weight.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(net.params()[0].bias.as_ref().unwrap(), &bias_before);

        // momentum: second step with constant gradient moves by (1 + μ) g η
        let mut net = small_net(2);
        let g = grads_like(&net, 3);
        let w0 = net.params()[1].weight.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9), &net).unwrap();
        opt.step(&mut net, &g, 0.1).unwrap();
        opt.step(&mut net, &g, 0.1).unwrap();
        for ((w, w0), g) in net.params()[1]
            .weight
            .data()
            .iter()
            .zip(w0.data())
            .zip(g[1].weight.data())
        {
            assert!((w - (w0 - 0.1 * 2.9 * g)).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::sgd(0.1, 1.0);
        assert!(c.validate().is_err());
        c.kind = OptimizerKind::SgdMomentum { momentum: 0.0 };
        assert!(c.validate().is_ok());
        c.weight_decay = -1.0;
        assert!(c.validate().is_err());
        let a = OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 1.0,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr_schedule: LrSchedule::Constant(1e-3),
            weight_decay: 0.0,
        };
        assert!(a.validate().is_err());
        assert!(OptimizerConfig::adam(-1.0).validate().is_err());
    }

    #[test]
    fn warmup_cosine_schedule() {
        let s = LrSchedule::WarmupCosine {
            start: 0.01,
            peak: 0.1,
            end: 0.001,
            warmup_epochs: 2.0,
            total_epochs: 10.0,
        };
        let spe = 50;
        assert_eq!(lr_at(&s, 0, spe), 0.01);
        assert!((lr_at(&s, 100, spe) - 0.1).abs() < 1e-15);
        assert!((lr_at(&s, 500, spe) - 0.001).abs() < 1e-15);
        // continuity at the warmup boundary
        assert!((lr_at(&s, 99, spe) - lr_at(&s, 100, spe)).abs() < 2e-3);
        assert!((lr_at(&s, 101, spe) - 0.1).abs() < 1e-5);
        let mut prev = f64::INFINITY;
        for step in 100..=500 {
            let lr = lr_at(&s, step, spe);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        assert_eq!(lr_at(&LrSchedule::Constant(0.3), 77, 5), 0.3);
    }

    #[test]
    fn kolen_pollack_examples() {
        let mut rng = RngStream::new(4);
        let mut net = small_net(5).with_random_feedback(&mut rng);
        let zero: Vec<LayerGrad> = net.params().iter().map(LayerGrad::zeros_like).collect();
        let (w, b) = (
            net.params()[0].weight.clone(),
            net.params()[0].feedback.clone().unwrap(),
        );
        kolen_pollack_step(&mut net, &zero, 0.1, 0.5).unwrap();
        for (x, y) in net.params()[0].weight.data().iter().zip(w.data()) {
            assert!((x - 0.95 * y).abs() < 1e-15);
        }
        for (x, y) in net.params()[0].feedback.as_ref().unwrap().data().iter().zip(b.data()) {
            assert!((x - 0.95 * y).abs() < 1e-15);
        }

        for step in 0..20 {
            let before = net.feedback_misalignment();
            let g = grads_like(&net, 10 + step);
            kolen_pollack_step(&mut net, &g, 0.05, 0.1).unwrap();
            for (a, b) in net.feedback_misalignment().iter().zip(&before) {
                assert!(*a <= (1.0 - 0.005) * b * (1.0 + 1e-12));
            }
        }

        let mut aligned = small_net(6).with_transposed_feedback();
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2), &aligned).unwrap();
        for step in 0..10 {
            let g = grads_like(&aligned, 20 + step);
            opt.step(&mut aligned, &g, 1e-2).unwrap();
            assert!(aligned.total_feedback_misalignment() == 0.0);
        }

        let mut sym = small_net(7);
        assert!(matches!(
            kolen_pollack_step(&mut sym, &zero, 0.1, 0.1),
            Err(Error::Config(_))
        ));
    }
}
