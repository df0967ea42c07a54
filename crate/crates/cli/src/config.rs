//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown or
//! repeated keys are errors. Keys and defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `input` | `784` | sample shape, comma separated (`1,28,28` for conv nets) |
//! | `layers` | `dense:256:relu, dense:256:relu, dense:10:identity` | layer list (`dense:N:act`, `conv:C:act`, `maxpool`, `flatten`, optional `:nobias`) |
//! | `algorithm` | `dp` | `dp` (dual propagation) or `bp` |
//! | `alpha` | `0.5` | nudging weight of `z⁺` in the propagated mean |
//! | `beta` | `1.0` | one value for all layers or one per weighted layer |
//! | `loss` | `mse` | `mse`, `linearized_mse`, `linearized_softmax_ce` |
//! | `schedule` | `regular` | `regular`, `random`, `lazy`, `multistep`, `parallel` |
//! | `t_max` | `10` | layer updates per batch for `random` |
//! | `passes` | `2` | sweeps per batch for `multistep` |
//! | `feedback` | `symmetric` | `symmetric` or `kolen_pollack` |
//! | `optimizer` | `adam` | `adam` or `sgd` |
//! | `lr` | `3e-5` | constant learning rate |
//! | `lr_schedule` | `constant` | `constant` or `warmup_cosine` |
//! | `lr_start`, `lr_peak`, `lr_end`, `warmup_epochs` | `0`, `lr`, `0`, `0` | warmup/cosine parameters |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | `0.9`, `0.999`, `1e-8` | ADAM constants |
//! | `momentum` | `0.9` | SGD momentum |
//! | `weight_decay` | `0` | L2 decay on weights (and feedback weights) |
//! | `dataset` | `mnist` | `mnist` or `toy` |
//! | `data_dir` | `data/mnist` | directory with the MNIST IDX files |
//! | `train_subset` | `0` | use only the first N training samples (0 = all) |
//! | `toy_kind`, `toy_samples` | `linear_sep`, `400` | synthetic dataset |
//! | `val_fraction` | `0.1` | held-out share of the training data |
//! | `seed` | `1` | master seed |
//! | `epochs` | `10` | |
//! | `batch_size` | `100` | |
//! | `out` | `runs/default` | output directory |
//! | `log_angles` | `false` | compare every DP gradient with back-propagation |
//! | `check_batch` | `8` | samples used by `grad-check` |
//! | `max_angle` | `11.5` | `grad-check` threshold on the largest layer angle (degrees) |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dualprop::data::ToyKind;
use dualprop::loss::LossKind;
use dualprop::network::{LayerSpec, NetworkSpec};
use dualprop::optim::{LrSchedule, OptimizerConfig, OptimizerKind};
use dualprop::trainer::{Algorithm, ScheduleKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Mnist { dir: PathBuf, subset: usize },
    Toy { kind: ToyKind, samples: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub train: TrainConfig,
    pub kolen_pollack: bool,
    pub dataset: DatasetSource,
    pub val_fraction: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub check_batch: usize,
    pub max_angle: f64,
}

const KEYS: &[&str] = &[
    "input",
    "layers",
    "algorithm",
    "alpha",
    "beta",
    "loss",
    "schedule",
    "t_max",
    "passes",
    "feedback",
    "optimizer",
    "lr",
    "lr_schedule",
    "lr_start",
    "lr_peak",
    "lr_end",
    "warmup_epochs",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "momentum",
    "weight_decay",
    "dataset",
    "data_dir",
    "train_subset",
    "toy_kind",
    "toy_samples",
    "val_fraction",
    "seed",
    "epochs",
    "batch_size",
    "out",
    "log_angles",
    "check_batch",
    "max_angle",
];

struct Values(BTreeMap<String, String>);

impl Values {
    fn str<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.0.get(key).map(String::as_str).unwrap_or(default)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| anyhow!("invalid value '{v}' for '{key}'")),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>> {
        self.str(key, default)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| anyhow!("invalid entry '{}' in '{key}'", s.trim()))
            })
            .collect()
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value'", n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                bail!("line {}: unknown key '{k}'", n + 1);
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: key '{k}' given twice", n + 1);
            }
        }
        let cfg = Self::from_values(&Values(map))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_values(v: &Values) -> Result<Self> {
        let input_shape = v.list("input", "784")?;
        let layers = v
            .str("layers", "dense:256:relu, dense:256:relu, dense:10:identity")
            .split(',')
            .map(|s| LayerSpec::parse(s.trim()).map_err(|e| anyhow!("{e}")))
            .collect::<Result<Vec<_>>>()?;
        let loss = LossKind::parse(v.str("loss", "mse")).map_err(|e| anyhow!("{e}"))?;
        let schedule = match v.str("schedule", "regular") {
            "regular" => ScheduleKind::Regular,
            "random" => ScheduleKind::Random {
                t_max: v.parse("t_max", 10)?,
            },
            "lazy" => ScheduleKind::Lazy,
            "multistep" => ScheduleKind::MultiStep {
                passes: v.parse("passes", 2)?,
            },
            "parallel" => ScheduleKind::Parallel,
            other => bail!("unknown schedule '{other}'"),
        };
        let algorithm = match v.str("algorithm", "dp") {
            "dp" => Algorithm::DualProp {
                alpha: v.parse("alpha", 0.5)?,
                betas: v.list("beta", "1.0")?,
                schedule,
            },
            "bp" => Algorithm::Backprop,
            other => bail!("unknown algorithm '{other}' (expected dp or bp)"),
        };
        let lr: f64 = v.parse("lr", 3e-5)?;
        let kind = match v.str("optimizer", "adam") {
            "adam" => OptimizerKind::Adam {
                beta1: v.parse("adam_beta1", 0.9)?,
                beta2: v.parse("adam_beta2", 0.999)?,
                eps: v.parse("adam_eps", 1e-8)?,
            },
            "sgd" => OptimizerKind::SgdMomentum {
                momentum: v.parse("momentum", 0.9)?,
            },
            other => bail!("unknown optimizer '{other}'"),
        };
        let epochs: usize = v.parse("epochs", 10)?;
        let lr_schedule = match v.str("lr_schedule", "constant") {
            "constant" => LrSchedule::Constant(lr),
            "warmup_cosine" => LrSchedule::WarmupCosine {
                start: v.parse("lr_start", 0.0)?,
                peak: v.parse("lr_peak", lr)?,
                end: v.parse("lr_end", 0.0)?,
                warmup_epochs: v.parse("warmup_epochs", 0.0)?,
                total_epochs: epochs as f64,
            },
            other => bail!("unknown lr_schedule '{other}'"),
        };
        let kolen_pollack = match v.str("feedback", "symmetric") {
            "symmetric" => false,
            "kolen_pollack" => true,
            other => bail!("unknown feedback mode '{other}'"),
        };
        let dataset = match v.str("dataset", "mnist") {
            "mnist" => DatasetSource::Mnist {
                dir: PathBuf::from(v.str("data_dir", "data/mnist")),
                subset: v.parse("train_subset", 0)?,
            },
            "toy" => DatasetSource::Toy {
                kind: ToyKind::parse(v.str("toy_kind", "linear_sep")).map_err(|e| anyhow!("{e}"))?,
                samples: v.parse("toy_samples", 400)?,
            },
            other => bail!("unknown dataset '{other}'"),
        };
        Ok(Self {
            input_shape,
            layers,
            train: TrainConfig {
                algorithm,
                loss,
                optimizer: OptimizerConfig {
                    kind,
                    lr_schedule,
                    weight_decay: v.parse("weight_decay", 0.0)?,
                },
                epochs,
                batch_size: v.parse("batch_size", 100)?,
                log_angles: v.parse("log_angles", false)?,
            },
            kolen_pollack,
            dataset,
            val_fraction: v.parse("val_fraction", 0.1)?,
            seed: v.parse("seed", 1)?,
            out: PathBuf::from(v.str("out", "runs/default")),
            check_batch: v.parse("check_batch", 8)?,
            max_angle: v.parse("max_angle", 11.5)?,
        })
    }

    /// Cross-field checks, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let shapes = NetworkSpec::param_shapes(&self.input_shape, &self.layers).map_err(|e| anyhow!("{e}"))?;
        self.train.nudge(shapes.len()).map_err(|e| anyhow!("{e}"))?;
        self.train.optimizer.validate().map_err(|e| anyhow!("{e}"))?;
        if self.train.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        match self.train.algorithm {
            Algorithm::DualProp {
                schedule: ScheduleKind::Random { t_max: 0 },
                ..
            } => bail!("t_max must be at least 1"),
            Algorithm::DualProp {
                schedule: ScheduleKind::MultiStep { passes: 0 },
                ..
            } => bail!("passes must be at least 1"),
            _ => {}
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            bail!("val_fraction must lie in (0, 1), got {}", self.val_fraction);
        }
        if let DatasetSource::Toy { samples, .. } = self.dataset {
            if samples < 4 {
                bail!("toy_samples must be at least 4");
            }
            if self.input_shape != [2] {
                bail!("toy datasets have two input features; set input = 2");
            }
        }
        if self.check_batch == 0 {
            bail!("check_batch must be positive");
        }
        Ok(())
    }

    /// The configuration written back out with every value resolved, so a run
    /// can be replayed from its output directory.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("input = {}", join(&self.input_shape)),
            format!(
                "layers = {}",
                self.layers
                    .iter()
                    .map(LayerSpec::describe)
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        ];
        match &self.train.algorithm {
            Algorithm::Backprop => lines.push("algorithm = bp".into()),
            Algorithm::DualProp { alpha, betas, schedule } => {
                lines.push("algorithm = dp".into());
                lines.push(format!("alpha = {alpha:?}"));
                lines.push(format!("beta = {}", join(betas)));
                lines.push(format!("schedule = {}", schedule.name()));
                match schedule {
                    ScheduleKind::Random { t_max } => lines.push(format!("t_max = {t_max}")),
                    ScheduleKind::MultiStep { passes } => lines.push(format!("passes = {passes}")),
                    _ => {}
                }
            }
        }
        lines.push(format!("loss = {}", self.train.loss.name()));
        lines.push(format!(
            "feedback = {}",
            if self.kolen_pollack {
                "kolen_pollack"
            } else {
                "symmetric"
            }
        ));
        let opt = &self.train.optimizer;
        match opt.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                lines.push("optimizer = adam".into());
                lines.push(format!("adam_beta1 = {beta1:?}"));
                lines.push(format!("adam_beta2 = {beta2:?}"));
                lines.push(format!("adam_eps = {eps:?}"));
            }
            OptimizerKind::SgdMomentum { momentum } => {
                lines.push("optimizer = sgd".into());
                lines.push(format!("momentum = {momentum:?}"));
            }
        }
        match opt.lr_schedule {
            LrSchedule::Constant(lr) => lines.push(format!("lr = {lr:?}")),
            LrSchedule::WarmupCosine {
                start,
                peak,
                end,
                warmup_epochs,
                ..
            } => {
                lines.push("lr_schedule = warmup_cosine".into());
                lines.push(format!("lr_start = {start:?}"));
                lines.push(format!("lr_peak = {peak:?}"));
                lines.push(format!("lr_end = {end:?}"));
                lines.push(format!("warmup_epochs = {warmup_epochs:?}"));
            }
        }
        lines.push(format!("weight_decay = {:?}", opt.weight_decay));
        match &self.dataset {
            DatasetSource::Mnist { dir, subset } => {
                lines.push("dataset = mnist".into());
                lines.push(format!("data_dir = {}", dir.display()));
                lines.push(format!("train_subset = {subset}"));
            }
            DatasetSource::Toy { kind, samples } => {
                lines.push("dataset = toy".into());
                lines.push(format!("toy_kind = {}", kind.name()));
                lines.push(format!("toy_samples = {samples}"));
            }
        }
        lines.push(format!("val_fraction = {:?}", self.val_fraction));
        lines.push(format!("seed = {}", self.seed));
        lines.push(format!("epochs = {}", self.train.epochs));
        lines.push(format!("batch_size = {}", self.train.batch_size));
        lines.push(format!("out = {}", self.out.display()));
        lines.push(format!("log_angles = {}", self.train.log_angles));
        lines.push(format!("check_batch = {}", self.check_batch));
        lines.push(format!("max_angle = {:?}", self.max_angle));
        lines.join("\n") + "\n"
    }

    /// Replaces the nudging strength (all layers) for a sweep.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut c = self.clone();
        match &mut c.train.algorithm {
            Algorithm::DualProp { betas, .. } => *betas = vec![beta],
            Algorithm::Backprop => bail!("a beta sweep needs algorithm = dp"),
        }
        c.validate()?;
        Ok(c)
    }
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}
