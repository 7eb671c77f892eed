//! Run configuration: a flat key-value file, overridden by flags, echoed
//! verbatim into the output directory.
//!
//! Documented keys (one `key = value` per line, `#` comments):
//!
//! ```text
//! variant            resnet | resdrop | pyramid | pyramid-drop | pyramid-sep-drop
//! depth              6n + 2, n >= 1
//! alpha              widening total (default 5*(depth-2)/6 for pyramidal variants, else 0)
//! p_last             terminal survival probability in (0, 1]
//! num_classes        default 10
//! models             replica count K (batch_size must divide by K)
//! epochs             total training epochs
//! batch_size         mini-batch size
//! lr                 initial learning rate
//! lr_decay_factor    multiplied in at each milestone
//! milestones         comma-separated epoch list, strictly increasing
//! weight_decay       L2 coefficient
//! momentum           Nesterov momentum
//! dampening          momentum dampening
//! seed               master RNG seed
//! dataset            cifar10 | cifar100 | synthetic
//! data_dir           directory with CIFAR binary files
//! out_dir            run directory (metrics, checkpoints, resolved config)
//! checkpoint_every   epochs between checkpoints (0 = final only)
//! eval_every         epochs between test evaluations (0 = never)
//! augment            true | false (default: true for cifar*, false for synthetic)
//! sync_mode          grad-avg | param-avg
//! sync_every         steps between parameter averages (param-avg only)
//! train_count        synthetic training samples
//! test_count         synthetic held-out samples
//! signal             synthetic blob contrast
//! noise              synthetic pixel noise
//! ```

use sepdrop_core::blocks::VariantKind;
use sepdrop_core::model::NetworkSpec;
use sepdrop_core::optim::{SyncStrategy, TrainConfig};
use sepdrop_core::schedule::alpha_for_depth;
use sepdrop_core::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset '{other}' (expected cifar10, cifar100 or synthetic)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::Synthetic => "synthetic",
        })
    }
}

/// Unresolved option set: file values and flag values land here.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub variant: Option<String>,
    pub depth: Option<usize>,
    pub alpha: Option<f64>,
    pub p_last: Option<f64>,
    pub num_classes: Option<usize>,
    pub models: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay_factor: Option<f64>,
    pub milestones: Option<Vec<usize>>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub dampening: Option<f64>,
    pub seed: Option<u64>,
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    pub eval_every: Option<usize>,
    pub augment: Option<bool>,
    pub sync_mode: Option<String>,
    pub sync_every: Option<usize>,
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
    pub signal: Option<f64>,
    pub noise: Option<f64>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| {
        Error::InvalidConfig(format!("key '{key}': cannot parse '{value}': {e}"))
    })
}

fn parse_milestones(value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() || value.trim() == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| parse_value("milestones", p.trim()))
        .collect()
}

impl RunOptions {
    /// Parses a flat key-value config file. Unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut opts = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            opts.set(key, value)?;
        }
        Ok(opts)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = Some(value.to_string()),
            "depth" => self.depth = Some(parse_value(key, value)?),
            "alpha" => self.alpha = Some(parse_value(key, value)?),
            "p_last" => self.p_last = Some(parse_value(key, value)?),
            "num_classes" => self.num_classes = Some(parse_value(key, value)?),
            "models" => self.models = Some(parse_value(key, value)?),
            "epochs" => self.epochs = Some(parse_value(key, value)?),
            "batch_size" => self.batch_size = Some(parse_value(key, value)?),
            "lr" => self.lr = Some(parse_value(key, value)?),
            "lr_decay_factor" => self.lr_decay_factor = Some(parse_value(key, value)?),
            "milestones" => self.milestones = Some(parse_milestones(value)?),
            "weight_decay" => self.weight_decay = Some(parse_value(key, value)?),
            "momentum" => self.momentum = Some(parse_value(key, value)?),
            "dampening" => self.dampening = Some(parse_value(key, value)?),
            "seed" => self.seed = Some(parse_value(key, value)?),
            "dataset" => self.dataset = Some(value.to_string()),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "checkpoint_every" => self.checkpoint_every = Some(parse_value(key, value)?),
            "eval_every" => self.eval_every = Some(parse_value(key, value)?),
            "augment" => self.augment = Some(parse_value(key, value)?),
            "sync_mode" => self.sync_mode = Some(value.to_string()),
            "sync_every" => self.sync_every = Some(parse_value(key, value)?),
            "train_count" => self.train_count = Some(parse_value(key, value)?),
            "test_count" => self.test_count = Some(parse_value(key, value)?),
            "signal" => self.signal = Some(parse_value(key, value)?),
            "noise" => self.noise = Some(parse_value(key, value)?),
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Field-wise override: any value set in `flags` wins.
    pub fn overridden_by(mut self, flags: RunOptions) -> Self {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if flags.$field.is_some() { self.$field = flags.$field; })*
            };
        }
        take!(
            variant, depth, alpha, p_last, num_classes, models, epochs, batch_size, lr,
            lr_decay_factor, milestones, weight_decay, momentum, dampening, seed, dataset,
            data_dir, out_dir, checkpoint_every, eval_every, augment, sync_mode, sync_every,
            train_count, test_count, signal, noise
        );
        self
    }
}

/// Fully resolved configuration with every default applied.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub signal: f64,
    pub noise: f64,
}

pub fn resolve(opts: &RunOptions) -> Result<ResolvedConfig> {
    let variant: VariantKind = opts.variant.as_deref().unwrap_or("pyramid-sep-drop").parse()?;
    let depth = opts.depth.unwrap_or(8);
    let alpha = match opts.alpha {
        Some(a) => a,
        None if variant.is_pyramidal() => alpha_for_depth(depth)?,
        None => 0.0,
    };
    let p_last = opts.p_last.unwrap_or(0.5);
    let num_classes = opts.num_classes.unwrap_or(10);
    let spec = NetworkSpec::new(variant, depth, alpha, p_last, num_classes);

    let dataset: DatasetKind = opts.dataset.as_deref().unwrap_or("synthetic").parse()?;
    let sync = match opts.sync_mode.as_deref().unwrap_or("grad-avg") {
        "grad-avg" => SyncStrategy::GradientAverage,
        "param-avg" => SyncStrategy::ParamAverage { every: opts.sync_every.unwrap_or(1) },
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown sync_mode '{other}' (expected grad-avg or param-avg)"
            )))
        }
    };

    let mut train = TrainConfig::recipe_defaults(spec);
    if let Some(v) = opts.epochs {
        train.total_epochs = v;
        // The recipe milestones only make sense for the full schedule.
        if opts.milestones.is_none() {
            train.milestones.retain(|&m| m < v);
        }
    }
    if let Some(v) = opts.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = opts.lr {
        train.initial_lr = v;
    }
    if let Some(v) = opts.lr_decay_factor {
        train.lr_decay_factor = v;
    }
    if let Some(v) = opts.milestones.clone() {
        train.milestones = v;
    }
    if let Some(v) = opts.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = opts.momentum {
        train.momentum = v;
    }
    if let Some(v) = opts.dampening {
        train.dampening = v;
    }
    if let Some(v) = opts.seed {
        train.seed = v;
    }
    if let Some(v) = opts.models {
        train.model_count = v;
    }
    train.sync = sync;
    train.augment = opts
        .augment
        .unwrap_or(dataset != DatasetKind::Synthetic);
    train.validate()?;

    let expected_classes = match dataset {
        DatasetKind::Cifar10 => Some(10),
        DatasetKind::Cifar100 => Some(100),
        DatasetKind::Synthetic => None,
    };
    if let Some(expect) = expected_classes {
        if num_classes != expect {
            return Err(Error::InvalidConfig(format!(
                "dataset {dataset} has {expect} classes but num_classes = {num_classes}"
            )));
        }
    }
    if dataset != DatasetKind::Synthetic && opts.data_dir.is_none() {
        return Err(Error::InvalidConfig(format!(
            "dataset {dataset} requires data_dir"
        )));
    }

    let resolved = ResolvedConfig {
        train,
        dataset,
        data_dir: opts.data_dir.clone(),
        out_dir: opts.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/run")),
        checkpoint_every: opts.checkpoint_every.unwrap_or(25),
        eval_every: opts.eval_every.unwrap_or(1),
        train_count: opts.train_count.unwrap_or(512),
        test_count: opts.test_count.unwrap_or(256),
        signal: opts.signal.unwrap_or(0.45),
        noise: opts.noise.unwrap_or(0.05),
    };
    if resolved.dataset == DatasetKind::Synthetic {
        for (name, count) in [("train_count", resolved.train_count), ("test_count", resolved.test_count)] {
            if count == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
    }
    Ok(resolved)
}

/// Renders the resolved config back into the flat file format.
pub fn render(cfg: &ResolvedConfig) -> String {
    let t = &cfg.train;
    let mut out = String::new();
    let mut kv = BTreeMap::new();
    kv.insert("variant", t.net.variant.to_string());
    kv.insert("depth", t.net.depth.to_string());
    kv.insert("alpha", t.net.alpha.to_string());
    kv.insert("p_last", t.net.p_last.to_string());
    kv.insert("num_classes", t.net.num_classes.to_string());
    kv.insert("models", t.model_count.to_string());
    kv.insert("epochs", t.total_epochs.to_string());
    kv.insert("batch_size", t.batch_size.to_string());
    kv.insert("lr", t.initial_lr.to_string());
    kv.insert("lr_decay_factor", t.lr_decay_factor.to_string());
    kv.insert(
        "milestones",
        if t.milestones.is_empty() {
            "none".to_string()
        } else {
            t.milestones.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        },
    );
    kv.insert("weight_decay", t.weight_decay.to_string());
    kv.insert("momentum", t.momentum.to_string());
    kv.insert("dampening", t.dampening.to_string());
    kv.insert("seed", t.seed.to_string());
    kv.insert("dataset", cfg.dataset.to_string());
    if let Some(dir) = &cfg.data_dir {
        kv.insert("data_dir", dir.display().to_string());
    }
    kv.insert("out_dir", cfg.out_dir.display().to_string());
    kv.insert("checkpoint_every", cfg.checkpoint_every.to_string());
    kv.insert("eval_every", cfg.eval_every.to_string());
    kv.insert("augment", t.augment.to_string());
    kv.insert(
        "sync_mode",
        match t.sync {
            SyncStrategy::GradientAverage => "grad-avg".to_string(),
            SyncStrategy::ParamAverage { .. } => "param-avg".to_string(),
        },
    );
    if let SyncStrategy::ParamAverage { every } = t.sync {
        kv.insert("sync_every", every.to_string());
    }
    if cfg.dataset == DatasetKind::Synthetic {
        kv.insert("train_count", cfg.train_count.to_string());
        kv.insert("test_count", cfg.test_count.to_string());
        kv.insert("signal", cfg.signal.to_string());
        kv.insert("noise", cfg.noise.to_string());
    }
    for (k, v) in kv {
        writeln!(out, "{k} = {v}").expect("string write");
    }
    out
}
