//! Ground-truth engines used to check dual propagation: reverse-mode
//! back-propagation, a central finite-difference oracle, the triple-state
//! process `(z*, δ⁺, δ⁻)` with its objective `U`, and gradient comparisons.

use crate::dyadic::TargetSignal;
use crate::error::{config_err, shape_err, Result};
use crate::loss::LossKind;
use crate::network::{Activation, ForwardTrace, LayerGrad, NetworkSpec};
use crate::tensor::Tensor;

/// Forward quantities and back-propagated sensitivities.
#[derive(Clone, Debug)]
pub struct BpTrace {
    pub forward: ForwardTrace,
    /// `dℓ/dz_k` at index `k` (`0 ≤ k ≤ L`), summed over the batch mean loss.
    pub deltas: Vec<Tensor>,
    /// `dℓ/da_k` at index `k` (index 0 empty).
    pub preact_deltas: Vec<Tensor>,
}

impl BpTrace {
    pub fn activations(&self) -> &[Tensor] {
        &self.forward.states
    }

    pub fn preactivations(&self) -> &[Tensor] {
        &self.forward.preacts
    }
}

/// `∂ℓ/∂z_L` per sample (not divided by the batch size).
pub fn output_gradient(loss: LossKind, z: &Tensor, target: &TargetSignal) -> Result<Tensor> {
    match target {
        TargetSignal::Gradient(g) => {
            z.expect_same_shape(g)?;
            Ok(g.clone())
        }
        TargetSignal::Target(y) => loss.gradient(z, y),
    }
}

/// Batch-mean loss of outputs `z`; a gradient target means the linear loss `gᵀz`.
pub fn mean_loss(loss: LossKind, z: &Tensor, target: &TargetSignal) -> Result<f64> {
    let batch = z.batch_size().max(1) as f64;
    match target {
        TargetSignal::Gradient(g) => Ok(g.dot(z)? / batch),
        TargetSignal::Target(y) => {
            z.expect_same_shape(y)?;
            let total: f64 = (0..z.batch_size()).map(|b| loss.value(z.row(b), y.row(b))).sum();
            Ok(total / batch)
        }
    }
}

/// Exact reverse-mode gradients (descent direction, batch mean) of the mean
/// loss with respect to every weight and bias.
pub fn bp_gradients(
    net: &NetworkSpec,
    x: &Tensor,
    target: &TargetSignal,
    loss: LossKind,
) -> Result<(Vec<LayerGrad>, BpTrace)> {
    let forward = net.forward_trace(x)?;
    let l = net.depth();
    let batch = x.batch_size() as f64;
    let mut deltas = vec![Tensor::zeros(&[0]); l + 1];
    let mut preact_deltas = vec![Tensor::zeros(&[0]); l + 1];
    deltas[l] = output_gradient(loss, &forward.states[l], target)?.scale(1.0 / batch);
    let mut grads = vec![None; l];
    for k in (1..=l).rev() {
        let act = net.activation(k);
        let e = forward.preacts[k].zip_map(&deltas[k], |a, d| act.derivative(a) * d)?;
        let stage = net.stage(k);
        let (dw, db) = stage.weight_grad(&e, &forward.op_inputs[k])?;
        grads[k - 1] = Some(LayerGrad { weight: dw, bias: db });
        let back = stage.adjoint(&net.params()[k - 1], &e)?;
        deltas[k - 1] = stage.disconnect(back, &forward.masks[k])?;
        preact_deltas[k] = e;
    }
    let grads = grads.into_iter().map(|g| g.expect("filled")).collect();
    Ok((
        grads,
        BpTrace {
            forward,
            deltas,
            preact_deltas,
        },
    ))
}

/// Smallest `|a_k|` over all rectified hidden pre-activations. A network
/// whose margin exceeds the perturbation sizes in use behaves linearly
/// around the evaluation point.
pub fn relu_margin(net: &NetworkSpec, x: &Tensor) -> Result<f64> {
    let trace = net.forward_trace(x)?;
    let mut m = f64::INFINITY;
    for k in 1..=net.depth() {
        if net.activation(k) == Activation::Relu {
            m = trace.preacts[k].data().iter().fold(m, |m, a| m.min(a.abs()));
        }
    }
    Ok(m)
}

/// Activation pattern and pool winners; equal signatures mean the network is
/// on the same linear piece.
fn kink_signature(net: &NetworkSpec, trace: &ForwardTrace) -> (Vec<bool>, Vec<u32>) {
    let mut signs = Vec::new();
    let mut winners = Vec::new();
    for k in 1..=net.depth() {
        if net.activation(k) == Activation::Relu {
            signs.extend(trace.preacts[k].data().iter().map(|&a| a > 0.0));
        }
        for m in &trace.masks[k] {
            winners.extend_from_slice(&m.winners);
        }
    }
    (signs, winners)
}

fn param_mut(net: &mut NetworkSpec, k: usize, bias: bool, i: usize) -> &mut f64 {
    let p = &mut net.params_mut()[k];
    let t = if bias {
        p.bias.as_mut().expect("bias present")
    } else {
        &mut p.weight
    };
    &mut t.data_mut()[i]
}

/// Central finite-difference gradient of the batch-mean loss.
#[derive(Clone, Debug)]
pub struct FdGradient {
    /// Per-layer estimates; entries whose perturbation crossed a kink are NaN.
    pub grads: Vec<LayerGrad>,
    pub skipped: usize,
}

/// `(ℓ(θ + h e_i) − ℓ(θ − h e_i)) / 2h` for every weight and bias entry.
/// Entries whose `±h` perturbation changes the ReLU pattern or a pool winner
/// are reported as NaN and counted in `skipped`.
pub fn finite_difference_grad(
    net: &NetworkSpec,
    x: &Tensor,
    target: &TargetSignal,
    loss: LossKind,
    h: f64,
) -> Result<FdGradient> {
    if h.is_nan() || h <= 0.0 {
        return config_err(format!("finite-difference step must be positive, got {h}"));
    }
    let base = kink_signature(net, &net.forward_trace(x)?);
    let mut work = net.clone();
    let mut skipped = 0;
    let eval = |work: &NetworkSpec| -> Result<Option<f64>> {
        let trace = work.forward_trace(x)?;
        if kink_signature(work, &trace) != base {
            return Ok(None);
        }
        Ok(Some(mean_loss(loss, &trace.states[work.depth()], target)?))
    };
    let mut grads = Vec::with_capacity(net.depth());
    for k in 0..net.depth() {
        let entry = |work: &mut NetworkSpec, bias: bool, i: usize| -> Result<f64> {
            let orig = *param_mut(work, k, bias, i);
            *param_mut(work, k, bias, i) = orig + h;
            let up = eval(work)?;
            *param_mut(work, k, bias, i) = orig - h;
            let down = eval(work)?;
            *param_mut(work, k, bias, i) = orig;
            Ok(match (up, down) {
                (Some(u), Some(d)) => (u - d) / (2.0 * h),
                _ => f64::NAN,
            })
        };
        let p = &net.params()[k];
        let mut dw = Tensor::zeros(p.weight.shape());
        for i in 0..dw.len() {
            dw.data_mut()[i] = entry(&mut work, false, i)?;
        }
        let db = match &p.bias {
            None => None,
            Some(b) => {
                let mut db = Tensor::zeros(b.shape());
                for i in 0..db.len() {
                    db.data_mut()[i] = entry(&mut work, true, i)?;
                }
                Some(db)
            }
        };
        skipped += dw.data().iter().filter(|v| v.is_nan()).count();
        if let Some(db) = &db {
            skipped += db.data().iter().filter(|v| v.is_nan()).count();
        }
        grads.push(LayerGrad { weight: dw, bias: db });
    }
    Ok(FdGradient { grads, skipped })
}

/// Forward states and the two finite-difference error signals.
#[derive(Clone, Debug)]
pub struct TripleState {
    /// `z*_0 … z*_L`.
    pub z_star: Vec<Tensor>,
    /// Pre-activations `a*_k` at index `k` (index 0 empty).
    pub a_star: Vec<Tensor>,
    /// `δ⁺_k` at index `k` (index 0 empty).
    pub delta_plus: Vec<Tensor>,
    /// `δ⁻_k` at index `k` (index 0 empty).
    pub delta_minus: Vec<Tensor>,
    masks: Vec<Vec<crate::tensor::PoolMask>>,
}

impl TripleState {
    /// `z⁺_k = z*_k + δ⁺_k`.
    pub fn z_plus(&self, k: usize) -> Result<Tensor> {
        self.z_star[k].add(&self.delta_plus[k])
    }

    /// `z⁻_k = z*_k − δ⁻_k`.
    pub fn z_minus(&self, k: usize) -> Result<Tensor> {
        self.z_star[k].sub(&self.delta_minus[k])
    }

    /// `½(z⁺_k + z⁻_k) = z*_k + ½(δ⁺_k − δ⁻_k)`.
    pub fn reconstructed_mean(&self, k: usize) -> Result<Tensor> {
        self.z_star[k].zip_map(&self.delta_plus[k].sub(&self.delta_minus[k])?, |z, d| z + 0.5 * d)
    }
}

fn feedback_into(net: &NetworkSpec, masks: &[Vec<crate::tensor::PoolMask>], k: usize, d: &Tensor) -> Result<Tensor> {
    let stage = net.stage(k + 1);
    let back = stage.adjoint(&net.params()[k], d)?;
    stage.disconnect(back, &masks[k + 1])
}

/// Forward pass for `z*`, then the backward recursions
///
/// ```text
/// δ±_L = −β g
/// δ⁺_k = f_k(a*_k + W_kᵀ δ⁺_{k+1}) − z*_k
/// δ⁻_k = z*_k − f_k(a*_k − W_kᵀ δ⁻_{k+1})
/// ```
///
/// The negative branch is driven by `δ⁻_{k+1}`, which is what the `z⁻` update
/// it is derived from uses.
pub fn triple_state_inference(net: &NetworkSpec, x: &Tensor, g: &Tensor, beta: f64) -> Result<TripleState> {
    let trace = net.forward_trace(x)?;
    let l = net.depth();
    trace.states[l].expect_same_shape(g)?;
    let empty = Tensor::zeros(&[0]);
    let mut dp = vec![empty.clone(); l + 1];
    let mut dm = vec![empty; l + 1];
    dp[l] = g.scale(-beta);
    dm[l] = dp[l].clone();
    for k in (1..l).rev() {
        let act = net.activation(k);
        let (a, z) = (&trace.preacts[k], &trace.states[k]);
        let up = feedback_into(net, &trace.masks, k, &dp[k + 1])?;
        dp[k] = a.zip_map(&up, |a, u| act.apply(a + u))?.sub(z)?;
        let down = feedback_into(net, &trace.masks, k, &dm[k + 1])?;
        dm[k] = z.sub(&a.zip_map(&down, |a, u| act.apply(a - u))?)?;
    }
    Ok(TripleState {
        z_star: trace.states,
        a_star: trace.preacts,
        delta_plus: dp,
        delta_minus: dm,
        masks: trace.masks,
    })
}

/// Terms of the triple-state objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UBreakdown {
    /// `βgᵀ(δ⁺_L + δ⁻_L) + ½‖δ⁺_L‖² + ½‖δ⁻_L‖²`.
    pub output: f64,
    /// `Σ_k ‖δ⁺_k − (f_k(a*_k + W_kᵀδ⁺_{k+1}) − z*_k)‖²`.
    pub residual_plus: f64,
    /// `Σ_k ‖δ⁻_k − (z*_k − f_k(a*_k − W_kᵀδ⁻_{k+1}))‖²`.
    pub residual_minus: f64,
    /// `Σ_k D_k(z*_k ‖ a*_k)`.
    pub divergence: f64,
}

impl UBreakdown {
    pub fn total(&self) -> f64 {
        self.output + self.residual_plus + self.residual_minus + self.divergence
    }
}

/// `U(z*, δ±)` summed over the batch. `a*_k` is recomputed from `z*_{k-1}`,
/// so perturbing `z*` is reflected in both the residuals and the divergences.
/// At the fixed point of [`triple_state_inference`] the residuals and
/// divergences vanish and `U = −β²‖g‖²`.
pub fn objective_u(net: &NetworkSpec, triple: &TripleState, g: &Tensor, beta: f64) -> Result<UBreakdown> {
    let l = net.depth();
    if triple.z_star.len() != l + 1 || triple.delta_plus.len() != l + 1 || triple.delta_minus.len() != l + 1 {
        return shape_err(format!("triple state does not have {} layers", l));
    }
    let (dp, dm) = (&triple.delta_plus[l], &triple.delta_minus[l]);
    let mut out = UBreakdown {
        output: beta * (g.dot(dp)? + g.dot(dm)?) + 0.5 * dp.dot(dp)? + 0.5 * dm.dot(dm)?,
        ..Default::default()
    };
    let mut a_star = vec![Tensor::zeros(&[0])];
    for k in 1..=l {
        let stage = net.stage(k);
        let inp = stage.connect_with(&triple.z_star[k - 1], &triple.masks[k])?;
        a_star.push(stage.linear(&net.params()[k - 1], &inp)?);
    }
    for (k, a) in a_star.iter().enumerate().skip(1) {
        let act = net.activation(k);
        let z = &triple.z_star[k];
        out.divergence += z
            .data()
            .iter()
            .zip(a.data())
            .map(|(&z, &a)| act.divergence(z, a))
            .sum::<f64>();
        if k == l {
            continue;
        }
        let up = feedback_into(net, &triple.masks, k, &triple.delta_plus[k + 1])?;
        let rp = triple.delta_plus[k].sub(&a.zip_map(&up, |a, u| act.apply(a + u))?.sub(z)?)?;
        out.residual_plus += rp.dot(&rp)?;
        let down = feedback_into(net, &triple.masks, k, &triple.delta_minus[k + 1])?;
        let rm = triple.delta_minus[k].sub(&z.sub(&a.zip_map(&down, |a, u| act.apply(a - u))?)?)?;
        out.residual_minus += rm.dot(&rm)?;
    }
    Ok(out)
}

/// General-`α` reparametrisation of the dyadic states around `z*`:
/// `z⁺ = z* + (1 − α) δ`, `z⁻ = z* − α δ` with `δ = z⁺ − z⁻`.
pub fn reparametrize_general_alpha(z_star: &Tensor, diff: &Tensor, alpha: f64) -> Result<(Tensor, Tensor)> {
    let zp = z_star.zip_map(diff, |z, d| z + (1.0 - alpha) * d)?;
    let zm = z_star.zip_map(diff, |z, d| z - alpha * d)?;
    Ok((zp, zm))
}

/// Agreement between two gradient vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerComparison {
    pub angle_degrees: f64,
    pub cosine_similarity: f64,
    /// `‖u − v‖ / ‖v‖` with `v` the reference; `0` or `∞` when `v = 0`.
    pub rel_l2_error: f64,
    /// Exactly one of the two vectors is zero (angle reported as 90°).
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub layers: Vec<LayerComparison>,
}

impl GradReport {
    pub fn max_angle(&self) -> f64 {
        self.layers.iter().map(|c| c.angle_degrees).fold(0.0, f64::max)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|c| c.rel_l2_error).fold(0.0, f64::max)
    }
}

/// Compares two flattened vectors; `v` is the reference.
pub fn compare_vectors(u: &[f64], v: &[f64]) -> Result<LayerComparison> {
    if u.len() != v.len() {
        return shape_err(format!("cannot compare vectors of length {} and {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let rel = if nv > 0.0 {
        diff / nv
    } else if nu > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    match (nu > 0.0, nv > 0.0) {
        (false, false) => Ok(LayerComparison {
            angle_degrees: 0.0,
            cosine_similarity: 1.0,
            rel_l2_error: rel,
            degenerate: false,
        }),
        (true, false) | (false, true) => Ok(LayerComparison {
            angle_degrees: 90.0,
            cosine_similarity: 0.0,
            rel_l2_error: rel,
            degenerate: true,
        }),
        (true, true) => {
            // angle from the unit-vector chord, accurate near 0° and 180°
            let (mut minus, mut plus) = (0.0, 0.0);
            let mut dotp = 0.0;
            for (a, b) in u.iter().zip(v) {
                let (x, y) = (a / nu, b / nv);
                minus += (x - y) * (x - y);
                plus += (x + y) * (x + y);
                dotp += a * b;
            }
            let angle = 2.0 * minus.sqrt().atan2(plus.sqrt());
            Ok(LayerComparison {
                angle_degrees: angle.to_degrees(),
                cosine_similarity: (dotp / (nu * nv)).clamp(-1.0, 1.0),
                rel_l2_error: rel,
                degenerate: false,
            })
        }
    }
}

/// Per-layer comparison of flattened weight gradients (biases excluded).
pub fn compare_gradients(dp: &[LayerGrad], bp: &[LayerGrad]) -> Result<GradReport> {
    if dp.len() != bp.len() {
        return shape_err(format!("{} layers compared against {}", dp.len(), bp.len()));
    }
    let layers = dp
        .iter()
        .zip(bp)
        .map(|(u, v)| {
            u.weight.expect_same_shape(&v.weight)?;
            compare_vectors(u.weight.data(), v.weight.data())
        })
        .collect::<Result<_>>()?;
    Ok(GradReport { layers })
}
