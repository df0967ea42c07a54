//! Dual propagation: dyadic neurons with closed-form layerwise inference.
//!
//! Every unit keeps a positively nudged state `z⁺` and a negatively nudged
//! state `z⁻`. The weighted mean `z̄ = α z⁺ + (1 − α) z⁻` is propagated up
//! the network, the difference `z⁺ − z⁻` is propagated down. A hidden layer
//! is updated in closed form as
//!
//! ```text
//! z⁺_k ← f_k(W_{k-1} z̄_{k-1} + b + (α β_k / β_{k+1})   Fb_k (z⁺_{k+1} − z⁻_{k+1}))
//! z⁻_k ← f_k(W_{k-1} z̄_{k-1} + b − ((1−α) β_k / β_{k+1}) Fb_k (z⁺_{k+1} − z⁻_{k+1}))
//! ```
//!
//! where `Fb_k` is `W_kᵀ` (or the learned `B_k` in Kolen-Pollack mode), and the
//! output layer is soft-clamped by the target loss. Once the states are
//! inferred, the weight gradient is the contrastive Hebbian term
//! `(1/β_k)(z⁻_k − z⁺_k) z̄_{k-1}ᵀ`.
//!
//! Sign convention: gradients returned here are descent directions for the
//! loss (the trainer subtracts `η · dW`). Written with `z⁻ − z⁺`, the output
//! layer gives `(z⁻_L − z⁺_L)/β_L = g`, the loss gradient.

use crate::error::{config_err, Error, Result};
use crate::loss::LossKind;
use crate::network::{LayerGrad, NetworkSpec};
use crate::rng::RngStream;
use crate::tensor::{PoolMask, Tensor};

/// Nudging hyper-parameters: `α`, per-layer `β_1 … β_L` and the target loss.
#[derive(Clone, Debug, PartialEq)]
pub struct NudgeConfig {
    pub alpha: f64,
    /// `betas[k - 1]` is `β_k`.
    pub betas: Vec<f64>,
    pub loss: LossKind,
}

impl NudgeConfig {
    /// `β_k = β_L` for every layer.
    pub fn new(alpha: f64, beta: f64, depth: usize, loss: LossKind) -> Result<Self> {
        Self::with_betas(alpha, vec![beta; depth], loss)
    }

    pub fn with_betas(alpha: f64, betas: Vec<f64>, loss: LossKind) -> Result<Self> {
        let cfg = Self { alpha, betas, loss };
        cfg.validate()?;
        if alpha != 0.5 {
            log::warn!("alpha = {alpha}: the fixed-point analysis of the dyadic updates holds only for alpha = 0.5");
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return config_err(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.betas.is_empty() {
            return config_err("at least one beta is required");
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return config_err(format!("every beta must be positive and finite, got {b}"));
        }
        let beta_l = *self.betas.last().expect("non-empty");
        if self.loss == LossKind::Mse && self.alpha_bar() * beta_l >= 1.0 {
            return config_err(format!(
                "MSE output needs (1 - alpha) * beta_L < 1, i.e. beta_L < 1/(1 - alpha) = {}; got beta_L = {beta_l}",
                1.0 / self.alpha_bar()
            ));
        }
        Ok(())
    }

    pub fn alpha_bar(&self) -> f64 {
        1.0 - self.alpha
    }

    /// `β_k` for `k` in `1..=L`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn beta_output(&self) -> f64 {
        *self.betas.last().expect("validated")
    }

    fn check_depth(&self, net: &NetworkSpec) -> Result<()> {
        if self.betas.len() != net.depth() {
            return config_err(format!(
                "{} betas given for a network with {} weighted layers",
                self.betas.len(),
                net.depth()
            ));
        }
        Ok(())
    }
}

/// What the output layer is nudged with.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSignal {
    /// Target vectors `y` (one-hot labels for classification). Linearised
    /// losses recompute their gradient at the current output pre-activation.
    Target(Tensor),
    /// A fixed loss gradient `g` for the linear loss `ℓ(z) = gᵀz`.
    Gradient(Tensor),
}

impl TargetSignal {
    fn tensor(&self) -> &Tensor {
        match self {
            TargetSignal::Target(t) | TargetSignal::Gradient(t) => t,
        }
    }
}

/// Paired activations `z⁺_k`, `z⁻_k` for `k = 0 … L` over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadState {
    pub z_plus: Vec<Tensor>,
    pub z_minus: Vec<Tensor>,
    /// Pool winner masks recorded when weighted layer `k` last read its input
    /// (index `k`; index 0 unused).
    pub pool_masks: Vec<Vec<PoolMask>>,
}

impl DyadState {
    /// Input clamped to `x`, every other state at zero activity.
    pub fn zeros(net: &NetworkSpec, x: &Tensor) -> Result<Self> {
        net.check_input(x)?;
        let batch = x.batch_size();
        let mut z = vec![x.clone()];
        for k in 1..=net.depth() {
            let mut shape = vec![batch];
            shape.extend_from_slice(net.state_shape(k));
            z.push(Tensor::zeros(&shape));
        }
        Ok(Self {
            z_plus: z.clone(),
            z_minus: z,
            pool_masks: vec![Vec::new(); net.depth() + 1],
        })
    }

    pub fn depth(&self) -> usize {
        self.z_plus.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.z_plus[0].batch_size()
    }

    /// `z̄_k = α z⁺_k + (1 − α) z⁻_k`.
    pub fn mean(&self, alpha: f64, k: usize) -> Tensor {
        if k == 0 {
            return self.z_plus[0].clone();
        }
        let ab = 1.0 - alpha;
        self.z_plus[k]
            .zip_map(&self.z_minus[k], |p, m| alpha * p + ab * m)
            .expect("paired states share a shape")
    }

    /// `δ_k = ½(z⁺_k − z⁻_k)`.
    pub fn half_diff(&self, k: usize) -> Tensor {
        self.z_plus[k]
            .zip_map(&self.z_minus[k], |p, m| 0.5 * (p - m))
            .expect("paired states share a shape")
    }

    fn check(&self, net: &NetworkSpec, k: usize) -> Result<()> {
        if self.depth() != net.depth() {
            return Err(Error::State(format!(
                "state has {} layers, network has {}",
                self.depth(),
                net.depth()
            )));
        }
        if k == 0 || k > net.depth() {
            return Err(Error::State(format!("layer index {k} outside 1..={}", net.depth())));
        }
        Ok(())
    }
}

/// `z̄_k` for the given nudging configuration.
pub fn mean_state(state: &DyadState, cfg: &NudgeConfig, k: usize) -> Tensor {
    state.mean(cfg.alpha, k)
}

/// `δ_k = ½(z⁺_k − z⁻_k)`.
pub fn diff_state(state: &DyadState, k: usize) -> Tensor {
    state.half_diff(k)
}

/// Pure forward pass: `z⁺_k = z⁻_k = f_k(W_{k-1} z_{k-1} + b_{k-1})`.
pub fn feedforward_init(net: &NetworkSpec, x: &Tensor) -> Result<DyadState> {
    let trace = net.forward_trace(x)?;
    Ok(DyadState {
        z_plus: trace.states.clone(),
        z_minus: trace.states,
        pool_masks: trace.masks,
    })
}

/// Connector output feeding layer `k`, computed from `z̄_{k-1}` with fresh
/// pool masks.
fn presynaptic(net: &NetworkSpec, alpha: f64, src: &DyadState, k: usize) -> Result<(Tensor, Vec<PoolMask>)> {
    net.stage(k).connect(&src.mean(alpha, k - 1))
}

/// `Fb_k(z⁺_{k+1} − z⁻_{k+1})` mapped back onto the shape of `z_k`, or `None`
/// when the upstream difference vanishes.
fn upstream_feedback(net: &NetworkSpec, src: &DyadState, k: usize) -> Result<Option<Tensor>> {
    if k >= net.depth() {
        return Ok(None);
    }
    let diff = src.z_plus[k + 1].sub(&src.z_minus[k + 1])?;
    if diff.all_zero() {
        return Ok(None);
    }
    let stage = net.stage(k + 1);
    let p = &net.params()[k];
    let back = if net.is_asymmetric() {
        stage.feedback(p, &diff)?
    } else {
        stage.adjoint(p, &diff)?
    };
    Ok(Some(stage.disconnect(back, &src.pool_masks[k + 1])?))
}

/// Closed-form hidden update given the pre-activation `a_k`.
fn hidden_rule(
    net: &NetworkSpec,
    cfg: &NudgeConfig,
    src: &DyadState,
    k: usize,
    a: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let act = net.activation(k);
    match upstream_feedback(net, src, k)? {
        None => {
            let z = a.map(|v| act.apply(v));
            Ok((z.clone(), z))
        }
        Some(fb) => {
            let ratio = cfg.beta(k) / cfg.beta(k + 1);
            let cp = cfg.alpha * ratio;
            let cm = cfg.alpha_bar() * ratio;
            let zp = a.zip_map(&fb, |a, f| act.apply(a + cp * f))?;
            let zm = a.zip_map(&fb, |a, f| act.apply(a - cm * f))?;
            Ok((zp, zm))
        }
    }
}

/// Output nudging from the pre-activation `a_L`.
fn output_rule(cfg: &NudgeConfig, a: &Tensor, target: &TargetSignal) -> Result<(Tensor, Tensor)> {
    a.expect_same_shape(target.tensor())?;
    let beta = cfg.beta_output();
    let (alpha, alpha_bar) = (cfg.alpha, cfg.alpha_bar());
    match (cfg.loss, target) {
        (LossKind::Mse, TargetSignal::Target(y)) => {
            if alpha_bar * beta >= 1.0 {
                return config_err(format!("MSE output needs beta_L < 1/(1 - alpha) = {}", 1.0 / alpha_bar));
            }
            let zp = a.zip_map(y, |a, y| (a + alpha * beta * y) / (1.0 + alpha * beta))?;
            let zm = a.zip_map(y, |a, y| (a - alpha_bar * beta * y) / (1.0 - alpha_bar * beta))?;
            Ok((zp, zm))
        }
        (LossKind::Mse, TargetSignal::Gradient(_)) => {
            config_err("the exact MSE output rule needs target vectors, not a gradient")
        }
        (loss, signal) => {
            let g = match signal {
                TargetSignal::Gradient(g) => g.clone(),
                TargetSignal::Target(y) => loss.gradient(a, y)?,
            };
            let zp = a.zip_map(&g, |a, g| a - alpha * beta * g)?;
            let zm = a.zip_map(&g, |a, g| a + alpha_bar * beta * g)?;
            Ok((zp, zm))
        }
    }
}

/// Updates hidden layer `k` (`1 ≤ k ≤ L − 1`) in place.
pub fn update_hidden(net: &NetworkSpec, cfg: &NudgeConfig, state: &mut DyadState, k: usize) -> Result<()> {
    state.check(net, k)?;
    cfg.check_depth(net)?;
    if k == net.depth() {
        return Err(Error::State(format!(
            "layer {k} is the output layer; use update_output"
        )));
    }
    let (inp, masks) = presynaptic(net, cfg.alpha, state, k)?;
    let a = net.stage(k).linear(&net.params()[k - 1], &inp)?;
    let (zp, zm) = hidden_rule(net, cfg, state, k, &a)?;
    state.pool_masks[k] = masks;
    state.z_plus[k] = zp;
    state.z_minus[k] = zm;
    Ok(())
}

/// Updates the (linear) output layer in place using the loss-specific rule.
pub fn update_output(net: &NetworkSpec, cfg: &NudgeConfig, state: &mut DyadState, target: &TargetSignal) -> Result<()> {
    let l = net.depth();
    state.check(net, l)?;
    cfg.check_depth(net)?;
    let (inp, masks) = presynaptic(net, cfg.alpha, state, l)?;
    let a = net.stage(l).linear(&net.params()[l - 1], &inp)?;
    let (zp, zm) = output_rule(cfg, &a, target)?;
    state.pool_masks[l] = masks;
    state.z_plus[l] = zp;
    state.z_minus[l] = zm;
    Ok(())
}

/// Batch-mean contrastive gradient for `W_{k-1}` and `b_{k-1}`:
/// `(1/β_k)(z⁻_k − z⁺_k) z̄_{k-1}ᵀ`.
pub fn weight_gradient(net: &NetworkSpec, cfg: &NudgeConfig, state: &DyadState, k: usize) -> Result<LayerGrad> {
    state.check(net, k)?;
    let diff = state.z_minus[k].sub(&state.z_plus[k])?;
    if diff.all_zero() {
        return Ok(LayerGrad::zeros_like(&net.params()[k - 1]));
    }
    let inp = net
        .stage(k)
        .connect_with(&state.mean(cfg.alpha, k - 1), &state.pool_masks[k])?;
    contrastive_grad(net, cfg, k, &diff, &inp)
}

fn contrastive_grad(net: &NetworkSpec, cfg: &NudgeConfig, k: usize, diff: &Tensor, inp: &Tensor) -> Result<LayerGrad> {
    let (dw, db) = net.stage(k).weight_grad(diff, inp)?;
    let s = 1.0 / (cfg.beta(k) * diff.batch_size() as f64);
    Ok(LayerGrad { weight: dw, bias: db }.scaled(s))
}

/// Layer-update order used during inference.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Schedule {
    /// One upward pass `1 … L−1`, the output update, one downward pass `L−1 … 1`.
    Regular,
    /// `t_max` uniformly random picks from `1 … L`, gradients read afterwards.
    Random { t_max: usize, rng: RngStream },
    /// A regular sweep starting from the previous batch's states.
    Lazy,
    /// `passes` regular sweeps, one gradient per sweep.
    MultiStep { passes: usize },
    /// `2L − 1` synchronous updates of all layers; the output sees the loss
    /// only during the final `L` of them.
    Parallel,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Random { t_max: 0, .. } => config_err("t_max must be at least 1"),
            Schedule::MultiStep { passes: 0 } => config_err("passes must be at least 1"),
            _ => Ok(()),
        }
    }
}

/// What an inference call produced.
#[derive(Clone, Debug, Default)]
pub struct Inference {
    /// One gradient set per emitted gradient (several for MultiStep).
    pub grads: Vec<Vec<LayerGrad>>,
    /// Realised layer picks (Random only).
    pub picks: Vec<usize>,
    /// Output pre-activation from the first output update of a regular sweep;
    /// equals the plain forward output when the sweep started from zero or
    /// feed-forward activity.
    pub forward_output: Option<Tensor>,
}

/// One regular up/down sweep. The gradient of `W_{k-1}` is read right after
/// `z_k` is updated on the way down, before `z_{k-1}` changes.
pub fn regular_sweep(
    net: &NetworkSpec,
    cfg: &NudgeConfig,
    state: &mut DyadState,
    target: &TargetSignal,
) -> Result<(Vec<LayerGrad>, Tensor)> {
    let l = net.depth();
    state.check(net, l)?;
    cfg.check_depth(net)?;
    let params = net.params();
    let mut inputs = Vec::with_capacity(l);
    let mut preacts = Vec::with_capacity(l);
    for k in 1..l {
        let (inp, masks) = presynaptic(net, cfg.alpha, state, k)?;
        let a = net.stage(k).linear(&params[k - 1], &inp)?;
        let (zp, zm) = hidden_rule(net, cfg, state, k, &a)?;
        state.pool_masks[k] = masks;
        state.z_plus[k] = zp;
        state.z_minus[k] = zm;
        inputs.push(inp);
        preacts.push(a);
    }
    let (inp, masks) = presynaptic(net, cfg.alpha, state, l)?;
    let a_out = net.stage(l).linear(&params[l - 1], &inp)?;
    let (zp, zm) = output_rule(cfg, &a_out, target)?;
    state.pool_masks[l] = masks;
    state.z_plus[l] = zp;
    state.z_minus[l] = zm;

    let mut grads = vec![None; l];
    let diff = state.z_minus[l].sub(&state.z_plus[l])?;
    grads[l - 1] = Some(contrastive_grad(net, cfg, l, &diff, &inp)?);
    for k in (1..l).rev() {
        let (zp, zm) = hidden_rule(net, cfg, state, k, &preacts[k - 1])?;
        state.z_plus[k] = zp;
        state.z_minus[k] = zm;
        let diff = state.z_minus[k].sub(&state.z_plus[k])?;
        grads[k - 1] = Some(contrastive_grad(net, cfg, k, &diff, &inputs[k - 1])?);
    }
    Ok((grads.into_iter().map(|g| g.expect("filled")).collect(), a_out))
}

/// Reads the gradients of every layer from the current state.
pub fn all_weight_gradients(net: &NetworkSpec, cfg: &NudgeConfig, state: &DyadState) -> Result<Vec<LayerGrad>> {
    (1..=net.depth()).map(|k| weight_gradient(net, cfg, state, k)).collect()
}

/// Runs inference under `schedule`. The caller initialises `state` (zero or
/// feed-forward activity, or carried-over states for Lazy).
pub fn infer(
    net: &NetworkSpec,
    cfg: &NudgeConfig,
    state: &mut DyadState,
    target: &TargetSignal,
    schedule: &mut Schedule,
) -> Result<Inference> {
    schedule.validate()?;
    cfg.check_depth(net)?;
    let l = net.depth();
    match schedule {
        Schedule::Regular | Schedule::Lazy => {
            let (g, out) = regular_sweep(net, cfg, state, target)?;
            Ok(Inference {
                grads: vec![g],
                picks: Vec::new(),
                forward_output: Some(out),
            })
        }
        Schedule::MultiStep { passes } => {
            let mut result = Inference::default();
            for pass in 0..*passes {
                let (g, out) = regular_sweep(net, cfg, state, target)?;
                if pass == 0 {
                    result.forward_output = Some(out);
                }
                result.grads.push(g);
            }
            Ok(result)
        }
        Schedule::Random { t_max, rng } => {
            let mut picks = Vec::with_capacity(*t_max);
            for _ in 0..*t_max {
                let k = 1 + rng.below(l);
                picks.push(k);
                if k == l {
                    update_output(net, cfg, state, target)?;
                } else {
                    update_hidden(net, cfg, state, k)?;
                }
            }
            Ok(Inference {
                grads: vec![all_weight_gradients(net, cfg, state)?],
                picks,
                forward_output: None,
            })
        }
        Schedule::Parallel => {
            let iterations = 2 * l - 1;
            for t in 1..=iterations {
                let src = state.clone();
                for k in 1..=l {
                    let (inp, masks) = presynaptic(net, cfg.alpha, &src, k)?;
                    let a = net.stage(k).linear(&net.params()[k - 1], &inp)?;
                    let (zp, zm) = if k < l {
                        hidden_rule(net, cfg, &src, k, &a)?
                    } else if t + l > iterations {
                        output_rule(cfg, &a, target)?
                    } else {
                        (a.clone(), a)
                    };
                    state.pool_masks[k] = masks;
                    state.z_plus[k] = zp;
                    state.z_minus[k] = zm;
                }
            }
            Ok(Inference {
                grads: vec![all_weight_gradients(net, cfg, state)?],
                picks: Vec::new(),
                forward_output: None,
            })
        }
    }
}

/// True when `picks` contains `1, 2, …, L, L−1, …, 1` as a subsequence.
pub fn contains_sweep_subsequence(picks: &[usize], depth: usize) -> bool {
    let wanted = (1..=depth).chain((1..depth).rev());
    let mut it = picks.iter();
    for w in wanted {
        if !it.any(|&p| p == w) {
            return false;
        }
    }
    true
}

/// Contrastive objective `L_α` in its monitoring form (batch mean):
///
/// `α ℓ(z⁺_L) + ᾱ ℓ(z⁻_L) + Σ_k (1/β_k)(G_k(z⁺_k) − G_k(z⁻_k) + (z⁻_k − z⁺_k)ᵀ(W_{k-1} z̄_{k-1} + b))`.
///
/// Returns `+∞` when a state lies outside the domain of its `G_k`.
pub fn objective_l_alpha(
    net: &NetworkSpec,
    cfg: &NudgeConfig,
    state: &DyadState,
    target: &TargetSignal,
) -> Result<f64> {
    let l = net.depth();
    state.check(net, l)?;
    cfg.check_depth(net)?;
    let batch = state.batch_size() as f64;
    let mut total = 0.0;
    let mut a_out = None;
    for k in 1..=l {
        let stage = net.stage(k);
        let zbar = state.mean(cfg.alpha, k - 1);
        let inp = if state.pool_masks[k].is_empty() {
            stage.connect(&zbar)?.0
        } else {
            stage.connect_with(&zbar, &state.pool_masks[k])?
        };
        let a = stage.linear(&net.params()[k - 1], &inp)?;
        let act = net.activation(k);
        let mut term = 0.0;
        for ((&p, &m), &av) in state.z_plus[k].data().iter().zip(state.z_minus[k].data()).zip(a.data()) {
            let (gp, gm) = (act.generator(p), act.generator(m));
            if gp.is_infinite() || gm.is_infinite() {
                return Ok(f64::INFINITY);
            }
            term += gp - gm + (m - p) * av;
        }
        total += term / cfg.beta(k);
        if k == l {
            a_out = Some(a);
        }
    }
    let a_out = a_out.expect("at least one layer");
    let (zp, zm) = (&state.z_plus[l], &state.z_minus[l]);
    let loss_term = match (cfg.loss, target) {
        (LossKind::Mse, TargetSignal::Target(y)) => (0..y.batch_size())
            .map(|b| {
                cfg.alpha * LossKind::Mse.value(zp.row(b), y.row(b))
                    + cfg.alpha_bar() * LossKind::Mse.value(zm.row(b), y.row(b))
            })
            .sum::<f64>(),
        (LossKind::Mse, TargetSignal::Gradient(_)) => return config_err("the MSE objective needs target vectors"),
        (loss, signal) => {
            let g = match signal {
                TargetSignal::Gradient(g) => g.clone(),
                TargetSignal::Target(y) => loss.gradient(&a_out, y)?,
            };
            cfg.alpha * g.dot(zp)? + cfg.alpha_bar() * g.dot(zm)?
        }
    };
    Ok((total + loss_term) / batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerParams, LayerSpec};

    fn scalar_net(weights: &[f64], acts: &[Activation]) -> NetworkSpec {
        let layers = acts.iter().map(|&a| LayerSpec::dense(1, a).without_bias()).collect();
        let params = weights
            .iter()
            .map(|&w| LayerParams {
                weight: Tensor::new(vec![1, 1], vec![w]).unwrap(),
                bias: None,
                feedback: None,
            })
            .collect();
        NetworkSpec::from_parts(&[1], layers, params).unwrap()
    }

    fn col(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn config_rejects_unbounded_mse() {
        let err = NudgeConfig::new(0.5, 2.0, 2, LossKind::Mse).unwrap_err();
        assert!(err.to_string().contains("beta_L < 1/(1 - alpha)"), "{err}");
        assert!(NudgeConfig::new(0.5, 1.99, 2, LossKind::Mse).is_ok());
        assert!(NudgeConfig::new(0.5, 100.0, 2, LossKind::LinearizedMse).is_ok());
        assert!(NudgeConfig::new(1.5, 1.0, 2, LossKind::LinearizedMse).is_err());
        assert!(NudgeConfig::new(0.5, 0.0, 2, LossKind::LinearizedMse).is_err());
    }

    #[test]
    fn feedforward_init_examples() {
        let net = scalar_net(&[2.0], &[Activation::Identity]);
        let s = feedforward_init(&net, &col(3.0)).unwrap();
        assert_eq!(s.z_plus[1].data(), &[6.0]);
        assert_eq!(s.z_minus[1].data(), &[6.0]);

        let zero = scalar_net(&[0.0, 0.0], &[Activation::Relu, Activation::Identity]);
        let s = feedforward_init(&zero, &col(5.0)).unwrap();
        assert!(s.z_plus[1].all_zero() && s.z_minus[1].all_zero());
    }

    fn chain_state(alpha: f64) -> (NetworkSpec, NudgeConfig, DyadState) {
        // W_{k-1} = [[1]] with z̄_{k-1} = 2, W_k = [[3]], upstream difference 0.1
        let net = scalar_net(&[1.0, 3.0], &[Activation::Relu, Activation::Identity]);
        let cfg = NudgeConfig::new(alpha, 1.0, 2, LossKind::LinearizedMse).unwrap();
        let mut state = DyadState::zeros(&net, &col(2.0)).unwrap();
        state.z_plus[2] = col(0.1);
        state.z_minus[2] = col(0.0);
        (net, cfg, state)
    }

    #[test]
    fn hidden_update_examples() {
        let (net, cfg, mut state) = chain_state(0.5);
        update_hidden(&net, &cfg, &mut state, 1).unwrap();
        assert!((state.z_plus[1].data()[0] - 2.15).abs() < 1e-15);
        assert!((state.z_minus[1].data()[0] - 1.85).abs() < 1e-15);

        let (net, cfg, mut state) = chain_state(1.0);
        update_hidden(&net, &cfg, &mut state, 1).unwrap();
        assert!((state.z_plus[1].data()[0] - 2.3).abs() < 1e-15);
        assert_eq!(state.z_minus[1].data(), &[2.0]);

        // no upstream difference: plain forward value
        let (net, cfg, mut state) = chain_state(0.5);
        state.z_plus[2] = col(0.0);
        update_hidden(&net, &cfg, &mut state, 1).unwrap();
        assert_eq!(state.z_plus[1], state.z_minus[1]);
        assert_eq!(state.z_plus[1].data(), &[2.0]);

        assert!(matches!(update_hidden(&net, &cfg, &mut state, 2), Err(Error::State(_))));
        assert!(matches!(update_hidden(&net, &cfg, &mut state, 0), Err(Error::State(_))));
    }

    #[test]
    fn output_update_examples() {
        let net = scalar_net(&[1.0], &[Activation::Identity]);
        let mse = NudgeConfig::new(0.5, 1.0, 1, LossKind::Mse).unwrap();
        let mut s = DyadState::zeros(&net, &col(1.0)).unwrap();
        update_output(&net, &mse, &mut s, &TargetSignal::Target(col(0.0))).unwrap();
        assert!((s.z_plus[1].data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.z_minus[1].data()[0] - 2.0).abs() < 1e-15);

        let lin = NudgeConfig::new(0.5, 1.0, 1, LossKind::LinearizedMse).unwrap();
        let mut s = DyadState::zeros(&net, &col(0.0)).unwrap();
        update_output(&net, &lin, &mut s, &TargetSignal::Gradient(col(2.0))).unwrap();
        assert_eq!(s.z_plus[1].data(), &[-1.0]);
        assert_eq!(s.z_minus[1].data(), &[1.0]);

        let mut s = DyadState::zeros(&net, &col(0.7)).unwrap();
        update_output(&net, &lin, &mut s, &TargetSignal::Gradient(col(0.0))).unwrap();
        assert_eq!(s.z_plus[1].data(), &[0.7]);
        assert_eq!(s.z_minus[1].data(), &[0.7]);

        // an over-large beta is refused even if the config was built by hand
        let bad = NudgeConfig {
            alpha: 0.5,
            betas: vec![2.0],
            loss: LossKind::Mse,
        };
        let err = update_output(&net, &bad, &mut s, &TargetSignal::Target(col(0.0))).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn weight_gradient_examples() {
        let net = scalar_net(&[1.0, 1.0], &[Activation::Relu, Activation::Identity]);
        let cfg = NudgeConfig::new(0.5, 1.0, 2, LossKind::LinearizedMse).unwrap();
        let mut s = DyadState::zeros(&net, &col(1.0)).unwrap();
        s.z_plus[1] = col(3.0);
        s.z_minus[1] = col(3.0);
        s.z_plus[2] = col(0.0);
        s.z_minus[2] = col(0.2);
        let g = weight_gradient(&net, &cfg, &s, 2).unwrap();
        assert!((g.weight.data()[0] - 0.6).abs() < 1e-15);
        let g1 = weight_gradient(&net, &cfg, &s, 1).unwrap();
        assert!(g1.weight.all_zero());
    }

    #[test]
    fn mean_and_diff_accessors() {
        let net = scalar_net(&[1.0], &[Activation::Identity]);
        let mut s = DyadState::zeros(&net, &col(0.0)).unwrap();
        s.z_plus[1] = col(2.0);
        s.z_minus[1] = col(0.0);
        let half = NudgeConfig::new(0.5, 1.0, 1, LossKind::LinearizedMse).unwrap();
        assert_eq!(mean_state(&s, &half, 1).data(), &[1.0]);
        assert_eq!(diff_state(&s, 1).data(), &[1.0]);

        s.z_plus[1] = col(1.0);
        s.z_minus[1] = col(2.0);
        let cfg = NudgeConfig::new(0.3, 1.0, 1, LossKind::LinearizedMse).unwrap();
        assert!((mean_state(&s, &cfg, 1).data()[0] - 1.7).abs() < 1e-15);

        s.z_plus[1] = col(4.0);
        s.z_minus[1] = col(4.0);
        assert_eq!(mean_state(&s, &cfg, 1).data(), &[4.0]);
        assert_eq!(diff_state(&s, 1).data(), &[0.0]);
    }

    #[test]
    fn objective_examples() {
        // z⁺ = z⁻ everywhere and y = z_L: every term vanishes
        let net = scalar_net(&[1.5, -0.5], &[Activation::Relu, Activation::Identity]);
        let cfg = NudgeConfig::new(0.5, 1.0, 2, LossKind::Mse).unwrap();
        let s = feedforward_init(&net, &col(2.0)).unwrap();
        let y = s.z_plus[2].clone();
        assert_eq!(
            objective_l_alpha(&net, &cfg, &s, &TargetSignal::Target(y)).unwrap(),
            0.0
        );

        // single linear layer, hand-set states: z⁺ = 1, z⁻ = 3, W = 2, x = 1, y = 0, β = 1:
        // ½·½·1 + ½·½·9 + (½ − 9/2 + (3 − 1)·2) = 2.5 + 0 = 2.5
        let net = scalar_net(&[2.0], &[Activation::Identity]);
        let cfg = NudgeConfig::new(0.5, 1.0, 1, LossKind::Mse).unwrap();
        let mut s = DyadState::zeros(&net, &col(1.0)).unwrap();
        s.z_plus[1] = col(1.0);
        s.z_minus[1] = col(3.0);
        let v = objective_l_alpha(&net, &cfg, &s, &TargetSignal::Target(col(0.0))).unwrap();
        assert!((v - 2.5).abs() < 1e-15, "{v}");

        // negative ReLU state → indicator violation
        let net = scalar_net(&[1.0, 1.0], &[Activation::Relu, Activation::Identity]);
        let cfg = NudgeConfig::new(0.5, 1.0, 2, LossKind::Mse).unwrap();
        let mut s = feedforward_init(&net, &col(1.0)).unwrap();
        s.z_minus[1] = col(-0.5);
        let v = objective_l_alpha(&net, &cfg, &s, &TargetSignal::Target(col(0.0))).unwrap();
        assert_eq!(v, f64::INFINITY);
    }

    #[test]
    fn subsequence_checker() {
        assert!(contains_sweep_subsequence(&[1, 2, 3, 2, 1], 3));
        assert!(contains_sweep_subsequence(&[3, 1, 1, 2, 1, 3, 3, 1, 2, 2, 1], 3));
        assert!(!contains_sweep_subsequence(&[1, 2, 3, 2], 3));
        assert!(!contains_sweep_subsequence(&[2, 3, 2, 1], 3));
        assert!(contains_sweep_subsequence(&[1], 1));
    }

    #[test]
    fn constant_loss_regular_sweep_is_a_forward_pass() {
        let mut rng = RngStream::new(8);
        let net = NetworkSpec::new(
            &[4],
            vec![
                LayerSpec::dense(6, Activation::Relu),
                LayerSpec::dense(5, Activation::Relu),
                LayerSpec::dense(3, Activation::Identity),
            ],
            &mut rng,
        )
        .unwrap();
        let cfg = NudgeConfig::new(0.5, 1.0, 3, LossKind::LinearizedMse).unwrap();
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let ff = feedforward_init(&net, &x).unwrap();
        let mut s = DyadState::zeros(&net, &x).unwrap();
        let out = infer(
            &net,
            &cfg,
            &mut s,
            &TargetSignal::Gradient(Tensor::zeros(&[2, 3])),
            &mut Schedule::Regular,
        )
        .unwrap();
        assert_eq!(s, ff);
        assert!(out.grads[0].iter().all(|g| g.weight.all_zero()));
        assert_eq!(out.forward_output.unwrap(), ff.z_plus[3]);
    }
}
