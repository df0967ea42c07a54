//! Layer descriptions, parameters and the shared batched forward machinery.
//!
//! A network is an ordered list of [`LayerSpec`]s. Weighted layers (dense or
//! conv) own a weight `W_{k-1}` and produce the state `z_k`; max-pool and
//! flatten layers are parameter-free connectors folded into the input side of
//! the next weighted layer. State index `k` therefore runs over the input
//! (`k = 0`) and the outputs of the `L` weighted layers.

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::{he_init, RngStream};
use crate::tensor::{
    batch_sum, channel_sum, conv2d_adjoint_batch, conv2d_batch, conv2d_kernel_grad, dense_adjoint, dense_forward,
    dense_outer_sum, maxpool2x2, pool_scatter, pool_select, PoolMask, Tensor,
};

/// Elementwise activation `f_k = ∇G_k*` induced by a convex generator `G_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    /// `G(z) = ½z² + ı_{z≥0}`, `f = max(·, 0)`.
    Relu,
    /// `G(z) = ½z²`, `f = id`.
    Identity,
    /// Smooth rectifier `f(a) = (a + √(a² + 4)) / 2` with `G(z) = ½z² − ln z`.
    /// Used by the second-order accuracy checks, which need a differentiable `f`.
    SmoothRelu,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    a
                } else {
                    0.0
                }
            }
            Activation::Identity => a,
            Activation::SmoothRelu => {
                let r = (a * a + 4.0).sqrt();
                if a >= 0.0 {
                    0.5 * (a + r)
                } else {
                    2.0 / (r - a)
                }
            }
        }
    }

    /// `f'(a)`; the ReLU derivative at exactly zero is taken as zero.
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::SmoothRelu => 0.5 * (1.0 + a / (a * a + 4.0).sqrt()),
        }
    }

    /// `G(z)`, `+∞` outside the domain.
    pub fn generator(self, z: f64) -> f64 {
        match self {
            Activation::Relu if z < 0.0 => f64::INFINITY,
            Activation::Relu | Activation::Identity => 0.5 * z * z,
            Activation::SmoothRelu if z <= 0.0 => f64::INFINITY,
            Activation::SmoothRelu => 0.5 * z * z - z.ln(),
        }
    }

    /// Bregman-type divergence `G(z) − z·a + G*(a)`, written in a form that is
    /// exactly zero when `z == f(a)`.
    pub fn divergence(self, z: f64, a: f64) -> f64 {
        let fa = self.apply(a);
        match self {
            Activation::Identity => 0.5 * (z - a) * (z - a),
            Activation::Relu if z < 0.0 => f64::INFINITY,
            Activation::Relu => 0.5 * (z - fa) * (z - fa) + z * (fa - a),
            Activation::SmoothRelu if z <= 0.0 => f64::INFINITY,
            Activation::SmoothRelu => {
                if z == fa {
                    0.0
                } else {
                    self.generator(z) - self.generator(fa) - (z - fa) * a
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::SmoothRelu => "smooth_relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            "smooth_relu" => Ok(Activation::SmoothRelu),
            other => config_err(format!("unknown activation '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense { out: usize },
    Conv2d { out_channels: usize },
    MaxPool2x2,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn dense(out: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { out },
            activation,
            has_bias: true,
        }
    }

    pub fn conv(out_channels: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv2d { out_channels },
            activation,
            has_bias: true,
        }
    }

    pub fn maxpool() -> Self {
        Self {
            kind: LayerKind::MaxPool2x2,
            activation: Activation::Identity,
            has_bias: false,
        }
    }

    pub fn flatten() -> Self {
        Self {
            kind: LayerKind::Flatten,
            activation: Activation::Identity,
            has_bias: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// Compact text form, e.g. `dense:256:relu`, `conv:8:relu:nobias`, `maxpool`.
    pub fn describe(&self) -> String {
        let mut s = match self.kind {
            LayerKind::Dense { out } => format!("dense:{out}:{}", self.activation.name()),
            LayerKind::Conv2d { out_channels } => {
                format!("conv:{out_channels}:{}", self.activation.name())
            }
            LayerKind::MaxPool2x2 => return "maxpool".into(),
            LayerKind::Flatten => return "flatten".into(),
        };
        if !self.has_bias {
            s.push_str(":nobias");
        }
        s
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let count = |p: Option<&&str>| -> Result<usize> {
            p.and_then(|v| v.parse().ok())
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("layer '{s}': missing or invalid size")))
        };
        let mut spec = match parts[0] {
            "dense" => LayerSpec::dense(count(parts.get(1))?, Activation::Identity),
            "conv" => LayerSpec::conv(count(parts.get(1))?, Activation::Identity),
            "maxpool" if parts.len() == 1 => return Ok(LayerSpec::maxpool()),
            "flatten" if parts.len() == 1 => return Ok(LayerSpec::flatten()),
            _ => return config_err(format!("cannot parse layer '{s}'")),
        };
        for extra in &parts[2..] {
            match *extra {
                "nobias" => spec.has_bias = false,
                act => spec.activation = Activation::parse(act)?,
            }
        }
        Ok(spec)
    }
}

/// Trainable parameters of one weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Dense: `[out, in]`. Conv: `[C', C, 3, 3]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    /// Learned feedback weights for Kolen-Pollack mode. Dense: `[in, out]`
    /// (the shape of `Wᵀ`). Conv: kernel-shaped, applied as a transposed
    /// convolution.
    pub feedback: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Connector {
    MaxPool { in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum WeightedOp {
    Dense { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize },
}

/// One weighted layer together with the connectors feeding it.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Stage {
    pub connectors: Vec<Connector>,
    pub op: WeightedOp,
    pub activation: Activation,
    pub has_bias: bool,
    pub op_in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

/// Network architecture plus parameters `θ = (W_0, …, W_{L-1})` and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    stages: Vec<Stage>,
}

fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

fn compile(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Stage>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return config_err(format!("invalid input shape {input_shape:?}"));
    }
    let mut stages = Vec::new();
    let mut pending = Vec::new();
    let mut shape = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        match layer.kind {
            LayerKind::MaxPool2x2 | LayerKind::Flatten => {
                if layer.activation != Activation::Identity || layer.has_bias {
                    return config_err(format!("layer {i}: pooling/flatten layers carry no activation or bias"));
                }
                if layer.kind == LayerKind::Flatten {
                    pending.push(Connector::Flatten {
                        in_shape: shape.clone(),
                    });
                    shape = vec![shape.iter().product()];
                } else {
                    match shape[..] {
                        [c, h, w] if h % 2 == 0 && w % 2 == 0 => {
                            pending.push(Connector::MaxPool {
                                in_shape: shape.clone(),
                            });
                            shape = vec![c, h / 2, w / 2];
                        }
                        _ => {
                            return config_err(format!(
                                "layer {i}: max-pool needs a [C, H, W] input with even H, W, got {shape:?}"
                            ))
                        }
                    }
                }
            }
            LayerKind::Dense { out } => {
                let [inputs] = shape[..] else {
                    return config_err(format!(
                        "layer {i}: dense layer needs a flat input, got {shape:?} (add a flatten layer)"
                    ));
                };
                stages.push(Stage {
                    connectors: std::mem::take(&mut pending),
                    op: WeightedOp::Dense { inputs, outputs: out },
                    activation: layer.activation,
                    has_bias: layer.has_bias,
                    op_in_shape: shape.clone(),
                    out_shape: vec![out],
                });
                shape = vec![out];
            }
            LayerKind::Conv2d { out_channels } => {
                let [c, h, w] = shape[..] else {
                    return config_err(format!("layer {i}: conv layer needs a [C, H, W] input, got {shape:?}"));
                };
                stages.push(Stage {
                    connectors: std::mem::take(&mut pending),
                    op: WeightedOp::Conv {
                        in_channels: c,
                        out_channels,
                    },
                    activation: layer.activation,
                    has_bias: layer.has_bias,
                    op_in_shape: shape.clone(),
                    out_shape: vec![out_channels, h, w],
                });
                shape = vec![out_channels, h, w];
            }
        }
    }
    if !pending.is_empty() {
        return config_err("the network must end with a weighted layer");
    }
    match stages.last() {
        None => config_err("the network has no weighted layers"),
        Some(s) if s.activation != Activation::Identity => {
            config_err("the output layer must be linear (identity activation)")
        }
        Some(_) => Ok(stages),
    }
}

impl Stage {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.op {
            WeightedOp::Dense { inputs, outputs } => vec![outputs, inputs],
            WeightedOp::Conv {
                in_channels,
                out_channels,
            } => vec![out_channels, in_channels, 3, 3],
        }
    }

    pub fn feedback_shape(&self) -> Vec<usize> {
        match self.op {
            WeightedOp::Dense { inputs, outputs } => vec![inputs, outputs],
            WeightedOp::Conv { .. } => self.weight_shape(),
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.op {
            WeightedOp::Dense { outputs, .. } => outputs,
            WeightedOp::Conv { out_channels, .. } => out_channels,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.op {
            WeightedOp::Dense { inputs, .. } => inputs,
            WeightedOp::Conv { in_channels, .. } => in_channels * 9,
        }
    }

    /// Applies the connectors to a batched state, recording fresh pool masks.
    pub fn connect(&self, z: &Tensor) -> Result<(Tensor, Vec<PoolMask>)> {
        let mut x = z.clone();
        let mut masks = Vec::new();
        for c in &self.connectors {
            match c {
                Connector::Flatten { .. } => {
                    let b = x.batch_size();
                    let r = x.row_len();
                    x = x.reshape(vec![b, r])?;
                }
                Connector::MaxPool { .. } => {
                    let (p, m) = maxpool2x2(&x)?;
                    x = p;
                    masks.push(m);
                }
            }
        }
        Ok((x, masks))
    }

    /// Applies the connectors with previously recorded pool masks.
    pub fn connect_with(&self, z: &Tensor, masks: &[PoolMask]) -> Result<Tensor> {
        let mut x = z.clone();
        let mut m = masks.iter();
        for c in &self.connectors {
            match c {
                Connector::Flatten { .. } => {
                    let b = x.batch_size();
                    let r = x.row_len();
                    x = x.reshape(vec![b, r])?;
                }
                Connector::MaxPool { .. } => {
                    let mask = m.next().ok_or_else(|| Error::State("missing pool mask".into()))?;
                    x = pool_select(&x, mask)?;
                }
            }
        }
        Ok(x)
    }

    /// Adjoint of the connectors: maps an op-input-shaped tensor back onto the
    /// previous state's shape (pool winners only, flatten by reshape).
    pub fn disconnect(&self, v: Tensor, masks: &[PoolMask]) -> Result<Tensor> {
        let mut x = v;
        let mut m = masks.iter().rev();
        for c in self.connectors.iter().rev() {
            let b = x.batch_size();
            match c {
                Connector::Flatten { in_shape } => x = x.reshape(with_batch(b, in_shape))?,
                Connector::MaxPool { in_shape } => {
                    let mask = m.next().ok_or_else(|| Error::State("missing pool mask".into()))?;
                    x = pool_scatter(&x, mask, in_shape)?;
                }
            }
        }
        Ok(x)
    }

    /// `W x + b` on a batched op input.
    pub fn linear(&self, p: &LayerParams, x: &Tensor) -> Result<Tensor> {
        match self.op {
            WeightedOp::Dense { .. } => dense_forward(x, &p.weight, p.bias.as_ref()),
            WeightedOp::Conv { .. } => conv2d_batch(x, &p.weight, p.bias.as_ref()),
        }
    }

    /// `Wᵀ u` (symmetric feedback) on a batched output-shaped tensor.
    pub fn adjoint(&self, p: &LayerParams, u: &Tensor) -> Result<Tensor> {
        match self.op {
            WeightedOp::Dense { .. } => dense_adjoint(u, &p.weight),
            WeightedOp::Conv { .. } => conv2d_adjoint_batch(&p.weight, u),
        }
    }

    /// Feedback through the learned weights `B` (Kolen-Pollack mode).
    pub fn feedback(&self, p: &LayerParams, u: &Tensor) -> Result<Tensor> {
        let b = p
            .feedback
            .as_ref()
            .ok_or_else(|| Error::Config("layer has no feedback weights".into()))?;
        match self.op {
            WeightedOp::Dense { .. } => dense_forward(u, b, None),
            WeightedOp::Conv { .. } => conv2d_adjoint_batch(b, u),
        }
    }

    /// Batch-summed `(Σ d ⊗ x, Σ d)` for upstream `d` and op input `x`.
    pub fn weight_grad(&self, d: &Tensor, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let (dw, db) = match self.op {
            WeightedOp::Dense { .. } => (dense_outer_sum(d, x)?, batch_sum(d)),
            WeightedOp::Conv { .. } => (conv2d_kernel_grad(d, x)?, channel_sum(d)?),
        };
        Ok((dw, self.has_bias.then_some(db)))
    }
}

/// Gradient of the loss with respect to one weighted layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LayerGrad {
    pub fn zeros_like(p: &LayerParams) -> Self {
        Self {
            weight: Tensor::zeros(p.weight.shape()),
            bias: p.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.weight = self.weight.scale(s);
        self.bias = self.bias.map(|b| b.scale(s));
        self
    }
}

/// Output of a plain forward pass with everything the oracles need.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `z*_0 … z*_L`.
    pub states: Vec<Tensor>,
    /// `a_1 … a_L` stored at index `k` (index 0 is unused and empty).
    pub preacts: Vec<Tensor>,
    /// Connector outputs feeding each weighted layer, index `k` as above.
    pub op_inputs: Vec<Tensor>,
    pub masks: Vec<Vec<PoolMask>>,
}

impl NetworkSpec {
    /// Builds a network with He-initialised weights and zero biases.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, rng: &mut RngStream) -> Result<Self> {
        let stages = compile(input_shape, &layers)?;
        let params = stages
            .iter()
            .map(|s| LayerParams {
                weight: he_init(s.fan_in(), &s.weight_shape(), rng),
                bias: s.has_bias.then(|| Tensor::zeros(&[s.bias_len()])),
                feedback: None,
            })
            .collect();
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            stages,
        })
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(input_shape: &[usize], layers: Vec<LayerSpec>, params: Vec<LayerParams>) -> Result<Self> {
        let stages = compile(input_shape, &layers)?;
        if params.len() != stages.len() {
            return shape_err(format!(
                "{} weighted layers but {} parameter sets",
                stages.len(),
                params.len()
            ));
        }
        let asym = params[0].feedback.is_some();
        for (k, (s, p)) in stages.iter().zip(&params).enumerate() {
            if p.weight.shape() != s.weight_shape() {
                return shape_err(format!(
                    "W_{k}: expected {:?}, got {:?}",
                    s.weight_shape(),
                    p.weight.shape()
                ));
            }
            match (&p.bias, s.has_bias) {
                (Some(b), true) if b.shape() == [s.bias_len()] => {}
                (None, false) => {}
                _ => return shape_err(format!("b_{k}: bias does not match layer")),
            }
            match &p.feedback {
                Some(b) if asym && b.shape() == s.feedback_shape() => {}
                None if !asym => {}
                _ => return shape_err(format!("B_{k}: feedback weights inconsistent")),
            }
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            stages,
        })
    }

    /// Switches to asymmetric (Kolen-Pollack) mode with independently drawn
    /// feedback weights.
    pub fn with_random_feedback(mut self, rng: &mut RngStream) -> Self {
        for (s, p) in self.stages.iter().zip(self.params.iter_mut()) {
            p.feedback = Some(he_init(s.fan_in(), &s.feedback_shape(), rng));
        }
        self
    }

    /// Asymmetric mode with `B_k` initialised to the transpose of `W_k`.
    pub fn with_transposed_feedback(mut self) -> Self {
        for (s, p) in self.stages.iter().zip(self.params.iter_mut()) {
            p.feedback = Some(match s.op {
                WeightedOp::Dense { .. } => p.weight.transpose().expect("dense weight is a matrix"),
                WeightedOp::Conv { .. } => p.weight.clone(),
            });
        }
        self
    }

    /// `(weight, bias, feedback)` shapes of every weighted layer.
    #[allow(clippy::type_complexity)]
    pub fn param_shapes(
        input_shape: &[usize],
        layers: &[LayerSpec],
    ) -> Result<Vec<(Vec<usize>, Option<Vec<usize>>, Vec<usize>)>> {
        Ok(compile(input_shape, layers)?
            .iter()
            .map(|s| {
                let bias = s.has_bias.then(|| vec![s.bias_len()]);
                (s.weight_shape(), bias, s.feedback_shape())
            })
            .collect())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of weighted layers `L`.
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn is_asymmetric(&self) -> bool {
        self.params[0].feedback.is_some()
    }

    pub fn output_len(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_shape.iter().product())
    }

    /// Shape of state `z_k` (without the batch dimension).
    pub fn state_shape(&self, k: usize) -> &[usize] {
        if k == 0 {
            &self.input_shape
        } else {
            &self.stages[k - 1].out_shape
        }
    }

    pub fn activation(&self, k: usize) -> Activation {
        if k == 0 {
            Activation::Identity
        } else {
            self.stages[k - 1].activation
        }
    }

    /// Stage producing state `k` (1-based).
    pub(crate) fn stage(&self, k: usize) -> &Stage {
        &self.stages[k - 1]
    }

    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight.len() + p.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    /// Checks that `x` is a batch of inputs for this network.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return shape_err(format!(
                "input shape {:?} does not match network input {:?} (plus batch dimension)",
                x.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }

    /// Plain forward pass returning all intermediate quantities.
    pub fn forward_trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let depth = self.depth();
        let mut states = Vec::with_capacity(depth + 1);
        let mut preacts = vec![Tensor::zeros(&[0])];
        let mut op_inputs = vec![Tensor::zeros(&[0])];
        let mut masks = vec![Vec::new()];
        states.push(x.clone());
        for k in 1..=depth {
            let stage = self.stage(k);
            let (inp, m) = stage.connect(&states[k - 1])?;
            let a = stage.linear(&self.params[k - 1], &inp)?;
            let act = stage.activation;
            states.push(a.map(|v| act.apply(v)));
            preacts.push(a);
            op_inputs.push(inp);
            masks.push(m);
        }
        Ok(ForwardTrace {
            states,
            preacts,
            op_inputs,
            masks,
        })
    }

    /// Network outputs `z_L` for a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut z = x.clone();
        for k in 1..=self.depth() {
            let stage = self.stage(k);
            let (inp, _) = stage.connect(&z)?;
            let act = stage.activation;
            z = stage.linear(&self.params[k - 1], &inp)?.map(|v| act.apply(v));
        }
        Ok(z)
    }

    /// Per-layer Frobenius distance between `W_kᵀ` and `B_k` (`W_k` and `B_k`
    /// for conv kernels). Empty in symmetric mode.
    pub fn feedback_misalignment(&self) -> Vec<f64> {
        self.stages
            .iter()
            .zip(&self.params)
            .filter_map(|(s, p)| {
                let b = p.feedback.as_ref()?;
                let w = match s.op {
                    WeightedOp::Dense { .. } => p.weight.transpose().ok()?,
                    WeightedOp::Conv { .. } => p.weight.clone(),
                };
                Some(w.sub(b).ok()?.norm())
            })
            .collect()
    }

    /// Total misalignment `sqrt(Σ_k ‖W_kᵀ − B_k‖²_F)`.
    pub fn total_feedback_misalignment(&self) -> f64 {
        self.feedback_misalignment().iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}
