//! Mini-batch training with back-propagation or dual propagation.

use std::time::Instant;

use crate::data::{batch_indices, Dataset};
use crate::dyadic::{self, DyadState, NudgeConfig, Schedule, TargetSignal};
use crate::error::{config_err, Error, Result};
use crate::loss::{loss_and_accuracy, LossKind};
use crate::network::{LayerGrad, NetworkSpec};
use crate::optim::{lr_at, Optimizer, OptimizerConfig};
use crate::reference::{bp_gradients, compare_gradients};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Layer-update order for dual propagation, without runtime state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Regular,
    Random { t_max: usize },
    Lazy,
    MultiStep { passes: usize },
    Parallel,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Regular => "regular",
            ScheduleKind::Random { .. } => "random",
            ScheduleKind::Lazy => "lazy",
            ScheduleKind::MultiStep { .. } => "multistep",
            ScheduleKind::Parallel => "parallel",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Algorithm {
    Backprop,
    DualProp {
        alpha: f64,
        /// One value per weighted layer, or a single value used for all.
        betas: Vec<f64>,
        schedule: ScheduleKind,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Compare every DP batch gradient with back-propagation.
    pub log_angles: bool,
}

impl TrainConfig {
    pub fn nudge(&self, depth: usize) -> Result<Option<NudgeConfig>> {
        match &self.algorithm {
            Algorithm::Backprop => Ok(None),
            Algorithm::DualProp { alpha, betas, .. } => {
                let betas = match betas.len() {
                    1 => vec![betas[0]; depth],
                    n if n == depth => betas.clone(),
                    n => return config_err(format!("{n} betas given for a network with {depth} weighted layers")),
                };
                NudgeConfig::with_betas(*alpha, betas, self.loss).map(Some)
            }
        }
    }

    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        self.optimizer.validate()?;
        self.nudge(net.depth())?;
        if let Algorithm::DualProp { schedule, .. } = &self.algorithm {
            match schedule {
                ScheduleKind::Random { t_max: 0 } => return config_err("t_max must be at least 1"),
                ScheduleKind::MultiStep { passes: 0 } => return config_err("passes must be at least 1"),
                _ => {}
            }
        }
        Ok(())
    }

    fn drop_last(&self) -> bool {
        matches!(
            self.algorithm,
            Algorithm::DualProp {
                schedule: ScheduleKind::Lazy,
                ..
            }
        )
    }
}

/// Metrics for one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub wall_time_s: f64,
    /// Per-layer mean DP/BP angle over the epoch's batches.
    pub mean_grad_angle: Option<Vec<f64>>,
    /// Per-layer running mean of the angle since the start of training.
    pub running_grad_angle: Option<Vec<f64>>,
    /// `sqrt(Σ_k ‖W_kᵀ − B_k‖²)` after the epoch (asymmetric nets only).
    pub feedback_misalignment: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Epoch (1-based) whose weights were kept as the best checkpoint.
    pub best_epoch: Option<usize>,
    /// Largest per-layer running-mean angle seen after any batch.
    pub max_running_angle: Option<Vec<f64>>,
}

impl TrainReport {
    /// Equality of everything except wall-clock times.
    pub fn same_metrics(&self, other: &TrainReport) -> bool {
        let strip = |r: &TrainReport| {
            let mut r = r.clone();
            for row in &mut r.rows {
                row.wall_time_s = 0.0;
            }
            r
        };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: NetworkSpec,
    /// Weights with the best validation accuracy (the final weights when no
    /// validation set was given).
    pub best: NetworkSpec,
    pub report: TrainReport,
}

/// Mean loss and accuracy (%) of `net` on a dataset, evaluated in chunks.
pub fn evaluate(net: &NetworkSpec, ds: &Dataset, loss: LossKind) -> Result<(f64, f64)> {
    let (mut total_loss, mut total_acc) = (0.0, 0.0);
    for idx in batch_indices(ds.len(), 1000, None, false) {
        let (x, labels, _) = ds.batch(&idx);
        let (l, a) = loss_and_accuracy(&net.forward(&x)?, &labels, loss)?;
        total_loss += l * idx.len() as f64;
        total_acc += a * idx.len() as f64;
    }
    let n = ds.len() as f64;
    Ok((total_loss / n, total_acc / n))
}

fn check_finite(grads: &[LayerGrad], epoch: usize, batch: usize) -> Result<()> {
    let finite = grads
        .iter()
        .all(|g| g.weight.is_finite() && g.bias.as_ref().is_none_or(Tensor::is_finite));
    if !finite {
        return Err(Error::Divergence(format!(
            "non-finite gradient in epoch {epoch}, batch {batch}"
        )));
    }
    Ok(())
}

struct AngleLog {
    sum: Vec<f64>,
    epoch_sum: Vec<f64>,
    count: usize,
    epoch_count: usize,
    max_running: Vec<f64>,
}

impl AngleLog {
    fn new(depth: usize) -> Self {
        Self {
            sum: vec![0.0; depth],
            epoch_sum: vec![0.0; depth],
            count: 0,
            epoch_count: 0,
            max_running: vec![0.0; depth],
        }
    }

    fn record(&mut self, angles: &[f64]) {
        self.count += 1;
        self.epoch_count += 1;
        for (k, &a) in angles.iter().enumerate() {
            self.sum[k] += a;
            self.epoch_sum[k] += a;
            self.max_running[k] = self.max_running[k].max(self.sum[k] / self.count as f64);
        }
    }

    fn close_epoch(&mut self) -> (Vec<f64>, Vec<f64>) {
        let n = self.epoch_count.max(1) as f64;
        let epoch = self.epoch_sum.iter().map(|s| s / n).collect();
        let running = self.sum.iter().map(|s| s / self.count.max(1) as f64).collect();
        self.epoch_sum.iter_mut().for_each(|s| *s = 0.0);
        self.epoch_count = 0;
        (epoch, running)
    }
}

/// Trains `net` on `train`, selecting the checkpoint with the best
/// validation accuracy. `on_epoch` sees each finished row and the current
/// weights. Deterministic given the inputs and `rng`.
pub fn train_with(
    mut net: NetworkSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    mut on_epoch: impl FnMut(&EpochRow, &NetworkSpec) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate(&net)?;
    let nudge = cfg.nudge(net.depth())?;
    let mut optimizer = Optimizer::new(cfg.optimizer, &net)?;
    let mut shuffle_rng = rng.fork();
    let schedule_rng = rng.fork();
    let kind = match &cfg.algorithm {
        Algorithm::DualProp { schedule, .. } => Some(*schedule),
        Algorithm::Backprop => None,
    };
    let mut schedule = match kind {
        Some(ScheduleKind::Random { t_max }) => Some(Schedule::Random {
            t_max,
            rng: schedule_rng,
        }),
        Some(ScheduleKind::Parallel) => Some(Schedule::Parallel),
        Some(_) => Some(Schedule::Regular),
        None => None,
    };
    let steps_per_epoch = batch_indices(train.len(), cfg.batch_size, None, cfg.drop_last()).len();
    if cfg.epochs > 0 && steps_per_epoch == 0 {
        return config_err(format!(
            "{} training samples do not fill one batch of {}",
            train.len(),
            cfg.batch_size
        ));
    }
    let mut angles = (cfg.log_angles && nudge.is_some()).then(|| AngleLog::new(net.depth()));
    let mut lazy_state: Option<DyadState> = None;
    let mut report = TrainReport::default();
    let mut best = net.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut step = 0usize;
    let mut lr = lr_at(&cfg.optimizer.lr_schedule, 0, steps_per_epoch);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0, 0.0, 0usize);
        let batches = batch_indices(train.len(), cfg.batch_size, Some(&mut shuffle_rng), cfg.drop_last());
        for (bi, idx) in batches.iter().enumerate() {
            let (x, labels, y) = train.batch(idx);
            lr = lr_at(&cfg.optimizer.lr_schedule, step, steps_per_epoch);
            step += 1;
            let target = TargetSignal::Target(y.clone());
            let outputs = match (&nudge, kind) {
                (None, _) => {
                    let (grads, trace) = bp_gradients(&net, &x, &target, cfg.loss)?;
                    check_finite(&grads, epoch, bi)?;
                    let out = trace.forward.states[net.depth()].clone();
                    optimizer.step(&mut net, &grads, lr)?;
                    out
                }
                (Some(nc), Some(kind)) => {
                    let sched = schedule.as_mut().expect("dual propagation has a schedule");
                    let mut state = match (kind, lazy_state.take()) {
                        (ScheduleKind::Lazy, Some(mut s)) => {
                            s.z_plus[0] = x.clone();
                            s.z_minus[0] = x.clone();
                            s
                        }
                        _ => DyadState::zeros(&net, &x)?,
                    };
                    let passes = match kind {
                        ScheduleKind::MultiStep { passes } => passes,
                        _ => 1,
                    };
                    let mut out = None;
                    for pass in 0..passes {
                        let inf = dyadic::infer(&net, nc, &mut state, &target, sched)?;
                        let grads = &inf.grads[0];
                        check_finite(grads, epoch, bi)?;
                        if pass == 0 {
                            out = match (kind, inf.forward_output) {
                                (ScheduleKind::Regular | ScheduleKind::MultiStep { .. }, Some(o)) => Some(o),
                                _ => Some(net.forward(&x)?),
                            };
                            if let Some(log) = angles.as_mut() {
                                let (bp, _) = bp_gradients(&net, &x, &target, cfg.loss)?;
                                let rep = compare_gradients(grads, &bp)?;
                                let a: Vec<f64> = rep.layers.iter().map(|c| c.angle_degrees).collect();
                                log.record(&a);
                            }
                        }
                        optimizer.step(&mut net, grads, lr)?;
                    }
                    if kind == ScheduleKind::Lazy {
                        lazy_state = Some(state);
                    }
                    out.expect("at least one pass")
                }
                (Some(_), None) => unreachable!("dual propagation always has a schedule"),
            };
            let (l, a) = loss_and_accuracy(&outputs, &labels, cfg.loss)?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss in epoch {epoch}, batch {bi}"
                )));
            }
            loss_sum += l * idx.len() as f64;
            acc_sum += a * idx.len() as f64;
            seen += idx.len();
        }
        let (val_loss, val_acc) = match val {
            Some(v) => {
                let (l, a) = evaluate(&net, v, cfg.loss)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let (epoch_angle, running_angle) = match angles.as_mut() {
            Some(log) => {
                let (e, r) = log.close_epoch();
                (Some(e), Some(r))
            }
            None => (None, None),
        };
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: acc_sum / seen as f64,
            val_loss,
            val_acc,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
            mean_grad_angle: epoch_angle,
            running_grad_angle: running_angle,
            feedback_misalignment: net.is_asymmetric().then(|| net.total_feedback_misalignment()),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.2}%{}",
            row.train_loss,
            row.train_acc,
            row.val_acc.map(|a| format!(", val acc {a:.2}%")).unwrap_or_default()
        );
        let score = val_acc.unwrap_or(f64::INFINITY);
        if val.is_none() || score > best_acc {
            best_acc = score;
            best = net.clone();
            report.best_epoch = Some(epoch);
        }
        on_epoch(&row, &net)?;
        report.rows.push(row);
    }
    if val.is_none() {
        best = net.clone();
    }
    report.max_running_angle = angles.map(|a| a.max_running);
    Ok(TrainOutcome { net, best, report })
}

/// [`train_with`] without a per-epoch callback.
pub fn train(
    net: NetworkSpec,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainOutcome> {
    train_with(net, train_set, val, cfg, rng, |_, _| Ok(()))
}
