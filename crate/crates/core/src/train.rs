//! Training loop, validation-based model selection, evaluation and
//! multi-method experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::data::{AnnotatorPolicy, BatchIterator, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{BatchStatsUpdate, Graph, NormMode};
use crate::inference::{draw_samples, mean_prediction, SampleSet};
use crate::labels::{flatten_targets, one_hot, LabelMap};
use crate::loss::{sample_noise, total_loss_graph, LossBreakdown, LossVars};
use crate::metrics::{
    dice, foreground_classes, ged_squared, paired_ttest, s_ncc, AnnotationSet, CaseMetrics, GedEstimator,
    MetricsReport, MetricsSummary, TTestResult,
};
use crate::model::{build_model, ModelConfig, NetworkWeights};
use crate::params::ParamStore;
use crate::seed::{derive_seed, rng_for, string_id};
use crate::tensor::{Scalar, Tensor};

/// Weight of the current batch in the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// What the validation loss sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValLoss {
    /// The full training objective, deep supervision included.
    #[default]
    Total,
    /// Reconstruction plus weighted KL only.
    ElboOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_steps: usize,
    #[serde(default = "default_val_interval")]
    pub val_interval: usize,
    #[serde(default = "default_policy")]
    pub policy: AnnotatorPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub val_loss: ValLoss,
    /// Where `best.ckpt` and `train_log.jsonl` go; nothing is written if unset.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_val_interval() -> usize {
    100
}
fn default_policy() -> AnnotatorPolicy {
    AnnotatorPolicy::RandomPerImage
}

impl TrainConfig {
    pub fn new(model: ModelConfig, max_steps: usize) -> Self {
        Self {
            model,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_steps,
            val_interval: default_val_interval(),
            policy: default_policy(),
            seed: 0,
            val_loss: ValLoss::Total,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.val_interval < 1 {
            return Err(Error::InvalidConfig("validation interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; no schedule, decay or clipping.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update; `grads` is indexed by parameter id and `None`
    /// entries (buffers, untouched parameters) are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        self.m.resize(grads.len().max(self.m.len()), None);
        self.v.resize(grads.len().max(self.v.len()), None);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(self.lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for id in store.trainable_ids().collect::<Vec<_>>() {
            let Some(Some(g)) = grads.get(id.index()) else {
                continue;
            };
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// Folds training-mode batch statistics into the running buffers.
pub fn apply_stats_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BatchStatsUpdate<T>], momentum: f64) {
    let mo = T::lit(momentum);
    let keep = T::one() - mo;
    for u in updates {
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = keep * *r + mo * b;
        }
        for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = keep * *r + mo * b;
        }
    }
}

/// The objective for one batch, built inside `g`. Returns the loss nodes
/// and the number of latent draws per level.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    w: &NetworkWeights<T>,
    x: &Tensor<T>,
    masks: &[LabelMap],
    noise: &[Tensor<T>],
) -> Result<(LossVars, Vec<usize>)> {
    let cfg = w.config();
    let targets = flatten_targets(masks);
    let xv = g.input(x.clone());
    if w.is_deterministic() {
        let logits = w.deterministic_graph(g, xv)?;
        return Ok((total_loss_graph(g, &[], &[], &[logits], &targets, &[], cfg.ce_reduction)?, Vec::new()));
    }
    let mv = g.input(one_hot(masks, cfg.classes)?);
    let q = w.posterior_graph(g, xv, mv, noise)?;
    let injected: Vec<_> = q.z.iter().map(|&z| Some(z)).collect();
    let p = w.prior_graph(g, xv, &[], &injected)?;
    let logits = w.likelihood_graph(g, &q.z)?;
    let vars = total_loss_graph(g, &q.pairs(), &p.pairs(), &logits, &targets, &cfg.alpha, cfg.ce_reduction)?;
    // One reparametrized posterior draw per level; the prior reuses them.
    let draws = noise.iter().take(cfg.latent_levels).map(|_| 1).collect();
    Ok((vars, draws))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: String,
    pub bn_mode: String,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_draws: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improved: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest-validation-loss weights.
    pub best: Checkpoint<f32>,
    pub log: Vec<LogRecord>,
    /// `(step, validation loss)` in order.
    pub val_history: Vec<(usize, f64)>,
}

fn mean_breakdown(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let total_n: usize = parts.iter().map(|p| p.1).sum();
    let wmean = |f: &dyn Fn(&LossBreakdown) -> f64| {
        parts.iter().map(|(b, n)| f(b) * *n as f64).sum::<f64>() / total_n as f64
    };
    let first = &parts[0].0;
    LossBreakdown {
        recon_ce: wmean(&|b| b.recon_ce),
        kl: (0..first.kl.len()).map(|i| wmean(&|b| b.kl[i])).collect(),
        deep_sup_ce: (0..first.deep_sup_ce.len()).map(|i| wmean(&|b| b.deep_sup_ce[i])).collect(),
        total: wmean(&|b| b.total),
    }
}

/// Loss over every validation case and every annotator in scope, with
/// frozen normalization and fixed noise.
pub fn validation_loss(w: &NetworkWeights<f32>, ds: &Dataset, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let annotators: Vec<usize> = match cfg.policy {
        AnnotatorPolicy::RandomPerImage => (0..ds.annotators()).collect(),
        AnnotatorPolicy::Fixed(m) => vec![m],
    };
    let pairs: Vec<(usize, usize)> = ds
        .indices(Split::Val)
        .into_iter()
        .flat_map(|c| annotators.iter().map(move |&m| (c, m)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let mcfg = w.config();
    let mut parts = Vec::new();
    for chunk in pairs.chunks(cfg.batch_size) {
        let images: Vec<_> = chunk.iter().map(|&(c, _)| &ds.cases[c].image).collect();
        let x = crate::labels::stack_images::<f32>(&images);
        let masks: Vec<LabelMap> = chunk.iter().map(|&(c, m)| ds.cases[c].annotations[m].clone()).collect();
        let noise = batch_noise(mcfg, chunk.iter().map(|&(c, m)| rng_for(cfg.seed, &[4, c as u64, m as u64])));
        let mut g = Graph::new(w.store(), NormMode::Frozen);
        let (vars, _) = loss_graph(&mut g, w, &x, &masks, &noise)?;
        let mut b = vars.breakdown(&g);
        if cfg.val_loss == ValLoss::ElboOnly {
            b.deep_sup_ce.clear();
            b.total = b.sum_components(&mcfg.alpha);
        }
        parts.push((b, chunk.len()));
    }
    Ok(mean_breakdown(&parts))
}

/// Per-item noise for a batch: item `i` draws from its own stream.
fn batch_noise(cfg: &ModelConfig, rngs: impl Iterator<Item = rand_chacha::ChaCha8Rng>) -> Vec<Tensor<f32>> {
    if cfg.deterministic {
        return Vec::new();
    }
    let per: Vec<Vec<Tensor<f32>>> = rngs.map(|mut r| sample_noise(cfg.latent_shapes(1), &mut r)).collect();
    (0..cfg.latent_levels)
        .map(|l| Tensor::stack_batch(&per.iter().map(|p| p[l].clone()).collect::<Vec<_>>()))
        .collect()
}

fn log_line(file: &mut Option<std::fs::File>, path: &Path, rec: &LogRecord) -> Result<()> {
    if let Some(f) = file {
        let mut line = serde_json::to_string(rec).expect("log record serializes");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains from scratch and returns the checkpoint with the lowest
/// validation loss. Validation runs before the first step, every
/// `val_interval` steps and after the last step.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = &cfg.model;
    if (m.height, m.width, m.classes) != (ds.manifest.height, ds.manifest.width, ds.classes())
        || m.input_channels != ds.manifest.channels
    {
        return Err(Error::DimensionMismatch(format!(
            "model expects {}x{}x{} with {} classes, dataset has {}x{}x{} with {}",
            m.height,
            m.width,
            m.input_channels,
            m.classes,
            ds.manifest.height,
            ds.manifest.width,
            ds.manifest.channels,
            ds.classes()
        )));
    }
    let mut w = build_model::<f32>(m, derive_seed(cfg.seed, &[1]))?;
    let mut batches = BatchIterator::new(ds, Split::Train, cfg.batch_size, cfg.policy, derive_seed(cfg.seed, &[2]))?;
    let mut adam = Adam::<f32>::new(cfg.learning_rate);

    let log_path = cfg.checkpoint_dir.as_ref().map(|d| d.join("train_log.jsonl")).unwrap_or_default();
    let mut log_file = match &cfg.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?)
        }
        None => None,
    };
    let echo = serde_json::to_value(cfg).ok();
    let mut log = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<Checkpoint<f32>> = None;

    let mut validate = |w: &NetworkWeights<f32>, step: usize, log: &mut Vec<LogRecord>, file: &mut Option<std::fs::File>| -> Result<()> {
        let loss = validation_loss(w, ds, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, value: loss.total });
        }
        let improved = best.as_ref().is_none_or(|b| loss.total < b.meta.val_loss);
        val_history.push((step, loss.total));
        if improved {
            let meta = CheckpointMeta {
                step,
                val_loss: loss.total,
                train_config: echo.clone(),
            };
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(&dir.join("best.ckpt"), w, &meta)?;
            }
            best = Some(Checkpoint { weights: w.clone(), meta });
        }
        let rec = LogRecord {
            step,
            phase: "val".into(),
            bn_mode: NormMode::Frozen.label().into(),
            loss,
            latent_draws: None,
            improved: Some(improved),
        };
        log_line(file, &log_path, &rec)?;
        log.push(rec);
        Ok(())
    };

    validate(&w, 0, &mut log, &mut log_file)?;
    for step in 1..=cfg.max_steps {
        let batch = batches.next().expect("endless iterator");
        let x = batch.images::<f32>(ds);
        let masks = batch.masks(ds);
        let noise = batch_noise(m, (0..batch.len()).map(|i| rng_for(cfg.seed, &[3, step as u64, i as u64])));
        let (record, grads, updates) = {
            let mut g = Graph::new(w.store(), NormMode::Train);
            let (vars, draws) = loss_graph(&mut g, &w, &x, &masks, &noise)?;
            let loss = vars.breakdown(&g);
            if !loss.total.is_finite() {
                return Err(Error::Diverged { step, value: loss.total });
            }
            let grads = g.backward(vars.total);
            let pg = g.param_gradients(&grads);
            let updates = g.take_stats_updates();
            let rec = LogRecord {
                step,
                phase: "train".into(),
                bn_mode: NormMode::Train.label().into(),
                loss,
                latent_draws: (!m.deterministic).then_some(draws),
                improved: None,
            };
            (rec, pg, updates)
        };
        adam.step(w.store_mut(), &grads);
        apply_stats_updates(w.store_mut(), &updates, BN_MOMENTUM);
        log_line(&mut log_file, &log_path, &record)?;
        log.push(record);
        if step % cfg.val_interval == 0 || step == cfg.max_steps {
            validate(&w, step, &mut log, &mut log_file)?;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("validated at least once"),
        log,
        val_history,
    })
}

/// Which annotations a case is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorScope {
    #[default]
    All,
    Only(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub scope: AnnotatorScope,
    /// Annotator the mean prediction's Dice is computed against.
    #[serde(default)]
    pub dice_annotator: usize,
    /// Classes entering IoU and Dice; foreground by default.
    #[serde(default)]
    pub classes: Option<Vec<u8>>,
    #[serde(default)]
    pub estimator: GedEstimator,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate only the first this-many cases of the split.
    #[serde(default)]
    pub max_cases: Option<usize>,
}

fn default_samples() -> usize {
    100
}
fn default_split() -> Split {
    Split::Test
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: default_samples(),
            split: default_split(),
            scope: AnnotatorScope::All,
            dice_annotator: 0,
            classes: None,
            estimator: GedEstimator::Biased,
            seed: 0,
            max_cases: None,
        }
    }
}

/// Scores weights on a split. Case `c` is sampled with seed
/// `derive_seed(seed, [id(c)])`. Sample sets of the cases named in `keep`
/// are returned alongside the report.
pub fn evaluate_keep(
    w: &NetworkWeights<f32>,
    ds: &Dataset,
    cfg: &EvalConfig,
    method: &str,
    keep: &[String],
) -> Result<(MetricsReport, BTreeMap<String, SampleSet>)> {
    let mc = w.config();
    if (mc.height, mc.width, mc.classes, mc.input_channels)
        != (ds.manifest.height, ds.manifest.width, ds.classes(), ds.manifest.channels)
    {
        return Err(Error::DimensionMismatch(
            "checkpoint and dataset disagree on image size, channels or classes".into(),
        ));
    }
    if cfg.n_samples < 1 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let m = ds.annotators();
    let in_range = |a: usize| {
        if a < m {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("annotator {a} out of range for {m} annotators")))
        }
    };
    in_range(cfg.dice_annotator)?;
    if let AnnotatorScope::Only(a) = cfg.scope {
        in_range(a)?;
    }
    let classes = cfg.classes.clone().unwrap_or_else(|| foreground_classes(ds.classes()));
    let mut indices = ds.indices(cfg.split);
    if let Some(n) = cfg.max_cases {
        indices.truncate(n);
    }
    if indices.is_empty() {
        return Err(Error::InvalidInput(format!("split {:?} is empty", cfg.split)));
    }
    let mut cases = Vec::with_capacity(indices.len());
    let mut kept = BTreeMap::new();
    for i in indices {
        let case = &ds.cases[i];
        let seed = derive_seed(cfg.seed, &[string_id(&case.id)]);
        let ss = draw_samples(w, &case.image.to_tensor::<f32>(), cfg.n_samples, seed)?;
        let masks = match cfg.scope {
            AnnotatorScope::All => case.annotations.clone(),
            AnnotatorScope::Only(a) => vec![case.annotations[a].clone()],
        };
        let ann = AnnotationSet::anonymous(masks)?;
        let mean = mean_prediction(&ss)?;
        cases.push(CaseMetrics {
            case_id: case.id.clone(),
            ged: ged_squared(&ss, &ann, &classes, cfg.estimator)?,
            sncc: s_ncc(&ss, &ann)?,
            dice: dice(&mean.labels, &case.annotations[cfg.dice_annotator], &classes)?.mean,
        });
        if keep.contains(&case.id) {
            kept.insert(case.id.clone(), ss);
        }
    }
    let dataset = ds
        .root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok((
        MetricsReport {
            method: method.into(),
            dataset,
            n_samples: cfg.n_samples,
            cases,
        },
        kept,
    ))
}

pub fn evaluate(w: &NetworkWeights<f32>, ds: &Dataset, cfg: &EvalConfig, method: &str) -> Result<MetricsReport> {
    Ok(evaluate_keep(w, ds, cfg, method, &[])?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Train on a random annotator per image.
    AllAnnotators,
    /// Train on annotator 0 only.
    SingleAnnotator,
}

impl ExperimentKind {
    pub fn policy(self) -> AnnotatorPolicy {
        match self {
            ExperimentKind::AllAnnotators => AnnotatorPolicy::RandomPerImage,
            ExperimentKind::SingleAnnotator => AnnotatorPolicy::Fixed(0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::AllAnnotators => "all-annotators",
            ExperimentKind::SingleAnnotator => "single-annotator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub best_step: usize,
    pub val_loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    pub test: TTestResult,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub runs: Vec<RunResult>,
    /// Mean of the per-seed summaries, per method in input order.
    pub per_method: Vec<(String, MetricsSummary)>,
    pub significance: Vec<Significance>,
}

fn mean_summary(s: &[MetricsSummary]) -> MetricsSummary {
    let n = s.len().max(1) as f64;
    MetricsSummary {
        ged: s.iter().map(|x| x.ged).sum::<f64>() / n,
        sncc: s.iter().map(|x| x.sncc).sum::<f64>() / n,
        dice: s.iter().map(|x| x.dice).sum::<f64>() / n,
    }
}

/// Trains and evaluates every method for every seed, then compares
/// methods pairwise with paired t-tests on per-case values averaged over
/// seeds. The experiment kind fixes the annotator policy.
pub fn run_experiment(
    kind: ExperimentKind,
    methods: &[Method],
    ds: &Dataset,
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<ExperimentReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("an experiment needs at least one method and one seed".into()));
    }
    let mut runs = Vec::new();
    for method in methods {
        for &seed in seeds {
            let mut cfg = method.train.clone();
            cfg.policy = kind.policy();
            cfg.seed = seed;
            if let Some(dir) = &method.train.checkpoint_dir {
                cfg.checkpoint_dir = Some(dir.join(format!("seed_{seed}")));
            }
            let out = train(&cfg, ds)?;
            log::info!(
                "{} {} seed {seed}: best val loss {:.4} at step {}",
                kind.label(),
                method.name,
                out.best.meta.val_loss,
                out.best.meta.step
            );
            let ecfg = EvalConfig {
                seed: derive_seed(eval.seed, &[seed]),
                ..eval.clone()
            };
            let report = evaluate(&out.best.weights, ds, &ecfg, &method.name)?;
            runs.push(RunResult {
                method: method.name.clone(),
                seed,
                best_step: out.best.meta.step,
                val_loss: out.best.meta.val_loss,
                report,
            });
        }
    }

    fn per_seed<'a>(runs: &'a [RunResult], name: &'a str) -> impl Iterator<Item = &'a RunResult> {
        runs.iter().filter(move |r| r.method == name)
    }
    let per_method = methods
        .iter()
        .map(|m| {
            let s: Vec<MetricsSummary> = per_seed(&runs, &m.name).map(|r| r.report.summary()).collect();
            (m.name.clone(), mean_summary(&s))
        })
        .collect();

    // Per-case values averaged over seeds, by method position.
    let averaged: Vec<BTreeMap<&str, Vec<f64>>> = methods
        .iter()
        .map(|m| {
            let rs: Vec<&RunResult> = per_seed(&runs, &m.name).collect();
            ["ged", "sncc", "dice"]
                .into_iter()
                .map(|metric| {
                    let cols: Vec<Vec<f64>> = rs.iter().map(|r| r.report.column(metric).expect("known column")).collect();
                    let n = cols[0].len();
                    let avg = (0..n).map(|i| cols.iter().map(|c| c[i]).sum::<f64>() / cols.len() as f64).collect();
                    (metric, avg)
                })
                .collect()
        })
        .collect();
    let mut significance = Vec::new();
    for a in 0..methods.len() {
        for b in a + 1..methods.len() {
            for metric in ["ged", "sncc", "dice"] {
                let (va, vb) = (&averaged[a][metric], &averaged[b][metric]);
                if va.len() < 2 {
                    continue;
                }
                significance.push(Significance {
                    method_a: methods[a].name.clone(),
                    method_b: methods[b].name.clone(),
                    metric: metric.into(),
                    test: paired_ttest(va, vb)?,
                });
            }
        }
    }
    Ok(ExperimentReport {
        kind,
        runs,
        per_method,
        significance,
    })
}

impl ExperimentReport {
    /// Comparison table followed by the significance annex.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,method,seeds,ged,sncc,dice\n");
        for (name, m) in &self.per_method {
            let seeds = self.runs.iter().filter(|r| &r.method == name).count();
            let _ = writeln!(s, "{},{name},{seeds},{},{},{}", self.kind.label(), m.ged, m.sncc, m.dice);
        }
        let _ = writeln!(s, "\nmethod_a,method_b,metric,t,p,df,zero_variance");
        for sig in &self.significance {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                sig.method_a, sig.method_b, sig.metric, sig.test.t, sig.test.p, sig.test.df, sig.test.zero_variance
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("p", Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]));
        let mut adam = Adam::new(0.1);
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, -0.5]);
        adam.step(&mut store, &[Some(g)]);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn stats_update_is_an_exponential_average() {
        let mut store = ParamStore::<f64>::new();
        let cs = Shape::new(1, 1, 1, 1);
        let rm = store.add_buffer("rm", Tensor::zeros(cs));
        let rv = store.add_buffer("rv", Tensor::full(cs, 1.0));
        let u = BatchStatsUpdate {
            running_mean: rm,
            running_var: rv,
            mean: vec![2.0],
            var: vec![3.0],
        };
        apply_stats_updates(&mut store, &[u], 0.5);
        assert_eq!(store.get(rm).data(), &[1.0]);
        assert_eq!(store.get(rv).data(), &[2.0]);
    }
}
