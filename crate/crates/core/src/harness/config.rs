//! Flat `key = value` experiment configuration with dotted keys.
//!
//! ```text
//! seed = 0
//! model.hidden = 64,64,64
//! stream.kind = random_labels
//! reg.kind = spectral
//! reg.lambda = 0.001
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::HarnessError;
use crate::models::MlpSpec;
use crate::optim::{OptimHyper, OptimKind};
use crate::regularizers::{RegularizerConfig, RegularizerKind};
use crate::tasks::StreamKind;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum DataSource {
    /// Gaussian clusters; `n_train + n_test` points drawn together then split.
    Synthetic,
    /// IDX image/label files; the first `n_train` rows train, the next `n_test` test.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub tasks: usize,
    pub epochs: usize,
    pub class_step: usize,
    pub identity_first: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Extra evaluation every `every` steps; 0 evaluates at task ends only.
    pub every: usize,
    pub diversity_batch: usize,
    pub probe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stream: StreamConfig,
    pub optim: OptimHyper,
    pub reg: RegularizerConfig,
    pub eval: EvalConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                hidden: vec![64, 64, 64],
                layer_norm: false,
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                n_train: 2048,
                n_test: 512,
                dim: 64,
                classes: 10,
                batch: 128,
            },
            stream: StreamConfig {
                kind: StreamKind::RandomLabels,
                tasks: 10,
                epochs: 100,
                class_step: 5,
                identity_first: true,
            },
            optim: OptimHyper::default(),
            reg: RegularizerConfig::default(),
            eval: EvalConfig {
                every: 0,
                diversity_batch: 64,
                probe: 256,
            },
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.parse().map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, HarnessError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        // relative IDX paths resolve against the config's directory
        if let DataSource::Idx { images, labels } = &mut config.data.source {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut config = Self::default();
        let mut idx_images = None;
        let mut idx_labels = None;
        let mut source = "synthetic".to_string();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "data.source" {
                source = value.to_string();
            } else if key == "data.idx_images" {
                idx_images = Some(PathBuf::from(value));
            } else if key == "data.idx_labels" {
                idx_labels = Some(PathBuf::from(value));
            } else {
                config.set(key, value)?;
            }
        }
        config.data.source = match source.as_str() {
            "synthetic" => DataSource::Synthetic,
            "idx" => DataSource::Idx {
                images: idx_images.ok_or_else(|| HarnessError::Config("data.idx_images missing".into()))?,
                labels: idx_labels.ok_or_else(|| HarnessError::Config("data.idx_labels missing".into()))?,
            },
            other => return Err(HarnessError::Config(format!("data.source: unknown {other:?}"))),
        };
        config.validate()?;
        Ok(config)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.hidden" => self.model.hidden = parse_list(key, value)?,
            "model.layer_norm" => self.model.layer_norm = parse_bool(key, value)?,
            "data.train" => self.data.n_train = parse(key, value)?,
            "data.test" => self.data.n_test = parse(key, value)?,
            "data.dim" => self.data.dim = parse(key, value)?,
            "data.classes" => self.data.classes = parse(key, value)?,
            "data.batch" => self.data.batch = parse(key, value)?,
            "stream.kind" => {
                self.stream.kind = StreamKind::parse(value)
                    .ok_or_else(|| HarnessError::Config(format!("{key}: unknown stream {value:?}")))?
            }
            "stream.tasks" => self.stream.tasks = parse(key, value)?,
            "stream.epochs" => self.stream.epochs = parse(key, value)?,
            "stream.class_step" => self.stream.class_step = parse(key, value)?,
            "stream.identity_first" => self.stream.identity_first = parse_bool(key, value)?,
            "optim.kind" => {
                self.optim.kind = match value {
                    "adam" => OptimKind::Adam,
                    "sgd" => OptimKind::Sgd,
                    _ => return Err(HarnessError::Config(format!("{key}: unknown optimizer {value:?}"))),
                }
            }
            "optim.alpha" => self.optim.alpha = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "reg.kind" => {
                self.reg.kind = RegularizerKind::parse(value)
                    .ok_or_else(|| HarnessError::Config(format!("{key}: unknown regularizer {value:?}")))?
            }
            "reg.lambda" => self.reg.lambda = parse(key, value)?,
            "reg.k" => self.reg.k = parse(key, value)?,
            "reg.shrink" => self.reg.shrink = parse(key, value)?,
            "reg.perturb" => self.reg.perturb = parse(key, value)?,
            "reg.tau" => self.reg.tau_dormant = parse(key, value)?,
            "reg.check_every" => self.reg.check_every = parse(key, value)?,
            "reg.resolve_every" => self.reg.resolve_every = parse(key, value)?,
            "eval.every" => self.eval.every = parse(key, value)?,
            "eval.diversity_batch" => self.eval.diversity_batch = parse(key, value)?,
            "eval.probe" => self.eval.probe = parse(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model_spec().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.optim.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.reg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let d = &self.data;
        if d.batch == 0 || d.n_train == 0 || d.n_test == 0 {
            return bad("data.batch, data.train and data.test must be >= 1".into());
        }
        if d.source == DataSource::Synthetic && (d.classes < 2 || d.n_train + d.n_test < d.classes) {
            return bad(format!("synthetic data needs classes >= 2 and enough points, got {d:?}"));
        }
        if self.stream.tasks == 0 || self.stream.epochs == 0 {
            return bad("stream.tasks and stream.epochs must be >= 1".into());
        }
        if self.stream.kind == StreamKind::ClassIncremental
            && self.stream.class_step * self.stream.tasks > self.data.classes
        {
            return bad(format!(
                "class_incremental needs {} classes for {} tasks, have {}",
                self.stream.class_step * self.stream.tasks,
                self.stream.tasks,
                self.data.classes
            ));
        }
        if self.eval.diversity_batch < 2 || self.eval.probe == 0 {
            return bad("eval.diversity_batch must be >= 2 and eval.probe >= 1".into());
        }
        Ok(())
    }

    pub fn model_spec(&self) -> MlpSpec {
        MlpSpec::new(self.data.dim, &self.model.hidden, self.data.classes).with_layer_norm(self.model.layer_norm)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.n_train.div_ceil(self.data.batch)
    }

    /// Total optimizer steps, known before the run starts. Class-incremental
    /// tasks shrink the training split, so this is an upper bound there.
    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.stream.epochs * self.stream.tasks
    }

    /// Canonical `key = value` text, parseable back into the same config.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("model.hidden = {}", join(&self.model.hidden)),
            format!("model.layer_norm = {}", self.model.layer_norm),
        ];
        match &self.data.source {
            DataSource::Synthetic => lines.push("data.source = synthetic".into()),
            DataSource::Idx { images, labels } => {
                lines.push("data.source = idx".into());
                lines.push(format!("data.idx_images = {}", images.display()));
                lines.push(format!("data.idx_labels = {}", labels.display()));
            }
        }
        lines.extend([
            format!("data.train = {}", self.data.n_train),
            format!("data.test = {}", self.data.n_test),
            format!("data.dim = {}", self.data.dim),
            format!("data.classes = {}", self.data.classes),
            format!("data.batch = {}", self.data.batch),
            format!("stream.kind = {}", self.stream.kind.name()),
            format!("stream.tasks = {}", self.stream.tasks),
            format!("stream.epochs = {}", self.stream.epochs),
            format!("stream.class_step = {}", self.stream.class_step),
            format!("stream.identity_first = {}", self.stream.identity_first),
            format!(
                "optim.kind = {}",
                match self.optim.kind {
                    OptimKind::Adam => "adam",
                    OptimKind::Sgd => "sgd",
                }
            ),
            format!("optim.alpha = {}", self.optim.alpha),
            format!("optim.beta1 = {}", self.optim.beta1),
            format!("optim.beta2 = {}", self.optim.beta2),
            format!("optim.eps = {}", self.optim.eps),
            format!("reg.kind = {}", self.reg.kind.name()),
            format!("reg.lambda = {}", self.reg.lambda),
            format!("reg.k = {}", self.reg.k),
            format!("reg.shrink = {}", self.reg.shrink),
            format!("reg.perturb = {}", self.reg.perturb),
            format!("reg.tau = {}", self.reg.tau_dormant),
            format!("reg.check_every = {}", self.reg.check_every),
            format!("reg.resolve_every = {}", self.reg.resolve_every),
            format!("eval.every = {}", self.eval.every),
            format!("eval.diversity_batch = {}", self.eval.diversity_batch),
            format!("eval.probe = {}", self.eval.probe),
        ]);
        if let Some(out) = &self.out {
            lines.push(format!("out = {}", out.display()));
        }
        lines.join("\n") + "\n"
    }
}
