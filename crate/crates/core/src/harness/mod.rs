//! Seeded continual-learning runs, their metric files, sweeps, and the two
//! analytic demos.

mod config;
mod demos;

pub use config::{parse_list, DataConfig, DataSource, EvalConfig, ExperimentConfig, ModelConfig, StreamConfig};
pub use demos::{illustrative_demo, section32_demo, A1Report, A1Row, CurvePoint, S32Report, S32Row, DEMO_DIVERGENCE_FACTOR, DEMO_LOSS_TARGET, DEMO_MAX_STEPS};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::diagnostics::{diversity_report, representation_change, spectral_trajectory, DiagError};
use crate::models::{init_params, save_checkpoint, ModelError, ParamSet, Targets};
use crate::optim::{self, OptimError, OptimKind, OptimState};
use crate::regularizers::{
    composite_gradient, penalty_for, redo_reset, refresh_power_states, reset_entries, shrink_perturb_step, RegError,
    RegularizerKind,
};
use crate::seed;
use crate::tasks::{load_idx, synth_dataset, DataError, Dataset, TaskStream, TaskView};
use crate::tensor::{softmax_rows, Matrix};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("output {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMetrics {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub erank: f64,
    pub stable_rank: f64,
    pub grad_erank: f64,
    pub grad_cond: f64,
    /// Set at task ends only.
    pub rep_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub task: usize,
    pub step: u64,
    pub split: Split,
    pub accuracy: f64,
    pub loss: f64,
    pub penalty: f64,
    pub layers: Vec<LayerMetrics>,
}

/// Scores at the end of one task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSummary {
    pub task: usize,
    pub step: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Train accuracy for random labels, test accuracy otherwise.
    pub scored_accuracy: f64,
    pub sigma_max: Vec<f64>,
    pub mean_sigma_max: f64,
    pub resets: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub tasks: Vec<TaskSummary>,
    pub params: ParamSet,
    pub manifest: RunManifest,
}

impl RunResult {
    pub fn first_task_accuracy(&self) -> f64 {
        self.tasks.first().map_or(f64::NAN, |t| t.scored_accuracy)
    }

    pub fn final_task_accuracy(&self) -> f64 {
        self.tasks.last().map_or(f64::NAN, |t| t.scored_accuracy)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedSet {
    pub master: u64,
    pub init: u64,
    pub data: u64,
    pub task: u64,
    pub shuffle: u64,
    pub mitigator: u64,
}

impl SeedSet {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            init: seed::derive(master, seed::tag::INIT, 0),
            data: seed::derive(master, seed::tag::DATA, 0),
            task: seed::derive(master, seed::tag::TASK, 0),
            shuffle: seed::derive(master, seed::tag::SHUFFLE, 0),
            mitigator: seed::derive(master, seed::tag::MITIGATOR, 0),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_text: String,
    pub seeds: SeedSet,
    pub code_version: &'static str,
    pub decisions: Vec<(&'static str, String)>,
    pub total_steps: u64,
    pub wall_clock_seconds: f64,
}

fn decisions(config: &ExperimentConfig) -> Vec<(&'static str, String)> {
    vec![
        ("erank", "exp(entropy of sigma / sum sigma)".into()),
        ("init", "uniform(+-sqrt(6/d_in)), b = 0, gamma = 1, beta = 0".into()),
        ("rep_change", "mean over probe of l2 distance / sqrt(width), consecutive task boundaries".into()),
        ("rep_change_probe", format!("first {} base training rows", config.eval.probe)),
        ("diversity_batch", format!("first {} rows of the scored split", config.eval.diversity_batch)),
        ("random_label_score_split", "train".into()),
        ("identity_first_task", config.stream.identity_first.to_string()),
        ("power_iteration", format!("1 warm iteration per step, full re-solve every {} steps", config.reg.resolve_every)),
        ("shrink_perturb_cadence", "task boundaries".into()),
        ("redo_cadence", format!("every {} steps", config.reg.check_every)),
        ("beta_class", "additive bias".into()),
    ]
}

fn load_data(config: &ExperimentConfig, seeds: &SeedSet) -> Result<(Dataset, Dataset), HarnessError> {
    let d = &config.data;
    let all = match &d.source {
        DataSource::Synthetic => synth_dataset(seeds.data, d.n_train + d.n_test, d.dim, d.classes)?,
        DataSource::Idx { images, labels } => {
            let mut data = load_idx(images, labels)?;
            if data.len() < d.n_train + d.n_test {
                return Err(HarnessError::Config(format!(
                    "IDX data has {} rows, need {}",
                    data.len(),
                    d.n_train + d.n_test
                )));
            }
            if data.dim() != d.dim || data.num_classes > d.classes {
                return Err(HarnessError::Config(format!(
                    "IDX data is {}-dimensional with {} classes, config says {} and {}",
                    data.dim(),
                    data.num_classes,
                    d.dim,
                    d.classes
                )));
            }
            data.num_classes = d.classes;
            data.head(d.n_train + d.n_test)
        }
    };
    Ok(all.split_at(d.n_train)?)
}

/// Accuracy and mean cross-entropy of `params` on `data`.
pub fn evaluate(params: &ParamSet, data: &Dataset) -> Result<(f64, f64), HarnessError> {
    let logits = params.forward(&data.inputs)?.logits;
    let probs = softmax_rows(&logits);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (i, &y) in data.labels.iter().enumerate() {
        let row = logits.row(i);
        let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        correct += (pred == y) as usize;
        loss -= probs.get(i, y).max(f64::MIN_POSITIVE).ln();
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

struct Evaluator<'a> {
    config: &'a ExperimentConfig,
    probe: Matrix,
}

impl Evaluator<'_> {
    fn records(
        &self,
        params: &ParamSet,
        view: &TaskView,
        step: u64,
        rep_change: Option<&[f64]>,
    ) -> Result<Vec<MetricsRecord>, HarnessError> {
        let spectra = spectral_trajectory(params)?;
        let scored = view.scored(self.config.stream.kind);
        let m = self.config.eval.diversity_batch.min(scored.len());
        let diversity = if m >= 2 {
            let idx: Vec<usize> = (0..m).collect();
            let batch = scored.select(&idx);
            Some(diversity_report(params, &batch.inputs, &Targets::Classes(batch.labels))?)
        } else {
            None
        };
        let layers: Vec<LayerMetrics> = spectra
            .iter()
            .enumerate()
            .map(|(l, s)| LayerMetrics {
                sigma_max: s.sigma_max,
                sigma_min: s.sigma_min,
                erank: s.erank,
                stable_rank: s.stable_rank,
                grad_erank: diversity.as_ref().map_or(f64::NAN, |d| d.layers[l].erank),
                grad_cond: diversity.as_ref().map_or(f64::NAN, |d| d.layers[l].condition),
                rep_change: rep_change.map(|r| r[l]),
            })
            .collect();
        let penalty = penalty_for(params, &self.config.reg)?.map_or(0.0, |p| p.value);
        let mut out = Vec::with_capacity(2);
        for (split, data) in [(Split::Train, &view.train), (Split::Test, &view.test)] {
            let (accuracy, loss) = evaluate(params, data)?;
            out.push(MetricsRecord {
                task: view.tau,
                step,
                split,
                accuracy,
                loss,
                penalty,
                layers: layers.clone(),
            });
        }
        Ok(out)
    }
}

fn clear_reset_moments(state: &mut OptimState, mask: &crate::regularizers::ResetMask) {
    for (id, pred) in reset_entries(mask) {
        state.reset_entries(id, pred);
    }
}

/// Runs the task stream, returning every metric row. Files are written when
/// `config.out` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let seeds = SeedSet::from_master(config.seed);
    let (train, test) = load_data(config, &seeds)?;
    let probe = train.head(config.eval.probe).inputs;
    let mut stream = TaskStream::new(train, test, config.stream.kind, seeds.task);
    stream.epochs_per_task = config.stream.epochs;
    stream.num_tasks = config.stream.tasks;
    stream.class_step = config.stream.class_step;
    stream.identity_first = config.stream.identity_first;

    let mut params = init_params(&config.model_spec(), seeds.init)?;
    let mut state = OptimState::new();
    let kind = config.reg.effective_kind();
    let evaluator = Evaluator { config, probe };
    let mut records = Vec::new();
    let mut tasks = Vec::new();
    let mut step: u64 = 0;

    for tau in 1..=config.stream.tasks {
        let view = stream.task(tau)?;
        // the previous boundary, before any boundary mitigator
        let start = params.clone();
        if tau > 1 && kind == RegularizerKind::ShrinkPerturb {
            shrink_perturb_step(
                &mut params,
                config.reg.shrink,
                config.reg.perturb,
                seed::derive(config.seed, seed::tag::MITIGATOR, tau as u64),
            );
        }
        let targets = Targets::Classes(view.train.labels.clone());
        let mut order: Vec<usize> = (0..view.train.len()).collect();
        let mut resets = 0;
        for epoch in 0..config.stream.epochs {
            let mut rng = seed::rng(seeds.shuffle, tau as u64, epoch as u64);
            order.shuffle(&mut rng);
            let n_batches = order.len().div_ceil(config.data.batch);
            for (b, chunk) in order.chunks(config.data.batch).enumerate() {
                let x = view.train.inputs.select_rows(chunk);
                let y = targets.select(chunk);
                let (_, task_grad) = params.loss_and_gradient(&x, &y)?;
                let grads = match penalty_for(&params, &config.reg)? {
                    Some(p) => composite_gradient(&task_grad, &p, config.reg.lambda)?,
                    None => task_grad,
                };
                optim::step(&mut params, &grads, &mut state, &config.optim)?;
                step += 1;
                if kind == RegularizerKind::Spectral {
                    refresh_power_states(&mut params, step, config.reg.resolve_every);
                }
                if kind == RegularizerKind::Redo && step % config.reg.check_every as u64 == 0 {
                    let hidden = params.forward(&evaluator.probe)?.hidden;
                    let mask = redo_reset(
                        &mut params,
                        &hidden,
                        config.reg.tau_dormant,
                        seed::derive(seeds.mitigator, step, 0),
                    )?;
                    resets += mask.count();
                    if config.optim.kind == OptimKind::Adam {
                        clear_reset_moments(&mut state, &mask);
                    }
                }
                let boundary = epoch + 1 == config.stream.epochs && b + 1 == n_batches;
                if config.eval.every > 0 && step % config.eval.every as u64 == 0 && !boundary {
                    records.extend(evaluator.records(&params, &view, step, None)?);
                }
            }
        }
        let rep = representation_change(&start, &params, &evaluator.probe)?;
        let rows = evaluator.records(&params, &view, step, Some(&rep.layers))?;
        let train_accuracy = rows[0].accuracy;
        let test_accuracy = rows[1].accuracy;
        let sigma_max: Vec<f64> = rows[0].layers.iter().map(|l| l.sigma_max).collect();
        tasks.push(TaskSummary {
            task: tau,
            step,
            train_accuracy,
            test_accuracy,
            scored_accuracy: if config.stream.kind.scores_train_split() {
                train_accuracy
            } else {
                test_accuracy
            },
            mean_sigma_max: sigma_max.iter().sum::<f64>() / sigma_max.len() as f64,
            sigma_max,
            resets,
        });
        records.extend(rows);
    }

    let manifest = RunManifest {
        config: config.clone(),
        config_text: config.to_text(),
        seeds,
        code_version: env!("CARGO_PKG_VERSION"),
        decisions: decisions(config),
        total_steps: step,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let result = RunResult {
        records,
        tasks,
        params,
        manifest,
    };
    if let Some(out) = &config.out {
        write_outputs(&result, out)?;
    }
    Ok(result)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Output {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, metrics_csv(&result.records)).map_err(io_err(&metrics))?;
    let manifest = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&result.manifest).expect("manifest serializes");
    fs::write(&manifest, json + "\n").map_err(io_err(&manifest))?;
    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&result.params, &ckpt).map_err(|e| match e {
        ModelError::Io(source) => HarnessError::Output { path: ckpt.clone(), source },
        other => HarnessError::Model(other),
    })?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v}")
    }
}

pub const PER_LAYER_COLUMNS: [&str; 7] =
    ["sigma_max", "sigma_min", "erank", "stable_rank", "grad_erank", "grad_cond", "rep_change"];

/// Fixed-order CSV; per-layer columns are suffixed with the 1-based layer.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let n_layers = records.first().map_or(0, |r| r.layers.len());
    let mut out = String::from("task,step,split,accuracy,loss,penalty");
    for l in 1..=n_layers {
        for c in PER_LAYER_COLUMNS {
            write!(out, ",{c}.{l}").unwrap();
        }
    }
    out.push('\n');
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.task,
            r.step,
            r.split.name(),
            fmt_f64(r.accuracy),
            fmt_f64(r.loss),
            fmt_f64(r.penalty)
        )
        .unwrap();
        for l in &r.layers {
            let rep = l.rep_change.map(fmt_f64).unwrap_or_default();
            write!(
                out,
                ",{},{},{},{},{},{},{}",
                fmt_f64(l.sigma_max),
                fmt_f64(l.sigma_min),
                fmt_f64(l.erank),
                fmt_f64(l.stable_rank),
                fmt_f64(l.grad_erank),
                fmt_f64(l.grad_cond),
                rep
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// One cell of a sweep grid.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub seed: u64,
    pub first_task_accuracy: Option<f64>,
    pub final_task_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Runs every `(kind, λ, seed)` cell in parallel. A failing cell is recorded
/// and the rest carry on. Rows come back in grid order.
pub fn sweep(
    base: &ExperimentConfig,
    kinds: &[RegularizerKind],
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, HarnessError> {
    if kinds.is_empty() || lambdas.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("sweep grid is empty".into()));
    }
    let mut cells = Vec::new();
    for &kind in kinds {
        for &lambda in lambdas {
            for &seed in seeds {
                cells.push((kind, lambda, seed));
            }
        }
    }
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(kind, lambda, seed)| {
            let mut config = base.clone();
            config.reg.kind = kind;
            config.reg.lambda = lambda;
            config.seed = seed;
            config.out = base
                .out
                .as_ref()
                .map(|o| o.join(format!("{}_lambda{}_seed{}", kind.name(), lambda, seed)));
            match run_experiment(&config) {
                Ok(r) => SweepRow {
                    kind,
                    lambda,
                    seed,
                    first_task_accuracy: Some(r.first_task_accuracy()),
                    final_task_accuracy: Some(r.final_task_accuracy()),
                    error: None,
                },
                Err(e) => SweepRow {
                    kind,
                    lambda,
                    seed,
                    first_task_accuracy: None,
                    final_task_accuracy: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    if let Some(out) = &base.out {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let path = out.join("summary.csv");
        fs::write(&path, summary_csv(&rows)).map_err(io_err(&path))?;
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kind,lambda,seed,first_task_accuracy,final_task_accuracy,error\n");
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.kind.name(),
            r.lambda,
            r.seed,
            opt(r.first_task_accuracy),
            opt(r.final_task_accuracy),
            err
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model.hidden = vec![8, 8];
        c.data.n_train = 64;
        c.data.n_test = 32;
        c.data.dim = 6;
        c.data.classes = 4;
        c.data.batch = 16;
        c.stream.tasks = 3;
        c.stream.epochs = 2;
        c.eval.diversity_batch = 8;
        c.eval.probe = 16;
        c
    }

    #[test]
    fn one_boundary_row_pair_per_task() {
        let r = run_experiment(&tiny()).unwrap();
        assert_eq!(r.records.len(), 6);
        assert_eq!(r.tasks.len(), 3);
        for (i, t) in r.tasks.iter().enumerate() {
            assert_eq!(t.step, 8 * (i as u64 + 1));
        }
        assert!(r.records.iter().all(|rec| rec.layers.iter().all(|l| l.rep_change.is_some())));
    }

    #[test]
    fn intermediate_cadence_adds_rows() {
        let mut c = tiny();
        c.eval.every = 4;
        let r = run_experiment(&c).unwrap();
        // steps 4 (mid-task) and 8 (boundary) in each task
        assert_eq!(r.records.len(), 12);
        let steps: Vec<u64> = r.records.iter().map(|x| x.step).collect();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.records.iter().filter(|x| x.layers[0].rep_change.is_some()).count(), 6);
    }

    #[test]
    fn csv_header_and_infinity() {
        let rec = MetricsRecord {
            task: 1,
            step: 2,
            split: Split::Test,
            accuracy: 0.5,
            loss: 1.25,
            penalty: 0.0,
            layers: vec![LayerMetrics {
                sigma_max: 2.0,
                sigma_min: 0.0,
                erank: 1.0,
                stable_rank: 1.0,
                grad_erank: 1.0,
                grad_cond: f64::INFINITY,
                rep_change: None,
            }],
        };
        let csv = metrics_csv(&[rec]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "task,step,split,accuracy,loss,penalty,sigma_max.1,sigma_min.1,erank.1,stable_rank.1,grad_erank.1,grad_cond.1,rep_change.1"
        );
        assert_eq!(lines.next().unwrap(), "1,2,test,0.5,1.25,0,2,0,1,1,1,inf,");
    }
}
