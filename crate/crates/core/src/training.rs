//! Training loops: backbone warm-up, midstream module training against the
//! frozen backbone, and downstream transfer through an aggregated zoo.
//!
//! Only [`pretrain_backbone`] binds backbone parameters as trainable. Every
//! other loop binds them as constants and checks the fingerprint before and
//! after the run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    bind_zoo, ensemble_site, AggregationConfig, AggregationState, LiveAggregation, ProviderMode, Strategy,
};
use crate::backbone::{Backbone, BackboneConfig, DeltaProvider, InsertionSite, NoDelta};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::tasks::{generate, HeadKind, Labels, MetricAccumulator, Split, TaskHead, TaskSpec, ToyDataset};
use crate::vim_module::{ModuleGeometry, ModuleKind, ModuleVars, ViMModule};
use crate::zoo::ModuleZoo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak rate; decays to zero on a cosine schedule.
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Decoupled (applied directly to parameters).
    pub weight_decay: f64,
    /// Multiplier on the learning rate of aggregation-weight parameters.
    pub weight_lr_scale: f64,
    pub seed: u64,
    /// Validation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            weight_lr_scale: 1.0,
            seed: 0,
            eval_every: 0,
            train_size: 512,
            val_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, allow_zero_steps: bool) -> Result<()> {
        if self.steps == 0 && !allow_zero_steps {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_lr_scale > 0.0) || !self.weight_lr_scale.is_finite() {
            return Err(Error::InvalidConfig(format!("weight lr scale {} must be positive", self.weight_lr_scale)));
        }
        if self.batch_size == 0 || self.train_size == 0 || self.val_size == 0 {
            return Err(Error::InvalidConfig("batch and dataset sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        self.learning_rate * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Adam (β = 0.9, 0.999) or heavy-ball SGD (momentum 0.9), keyed by
/// parameter name. A parameter's bias correction counts only the steps in
/// which it actually received a gradient.
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    slots: HashMap<String, Slot>,
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Optimizer {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;
    const MOMENTUM: f32 = 0.9;

    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            slots: HashMap::new(),
        }
    }

    pub fn update(&mut self, key: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>, lr: f64) {
        let n = param.numel();
        let slot = self.slots.entry(key.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        slot.t += 1;
        let lr = lr as f32;
        let decay = 1.0 - lr * self.weight_decay as f32;
        let p = param.data_mut();
        let g = grad.data();
        match self.kind {
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(slot.t);
                let c2 = 1.0 - Self::BETA2.powi(slot.t);
                for i in 0..n {
                    slot.m[i] = Self::BETA1 * slot.m[i] + (1.0 - Self::BETA1) * g[i];
                    slot.v[i] = Self::BETA2 * slot.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                    let mhat = slot.m[i] / c1;
                    let vhat = slot.v[i] / c2;
                    p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + Self::EPS);
                }
            }
            OptimizerKind::SgdMomentum => {
                for i in 0..n {
                    slot.m[i] = Self::MOMENTUM * slot.m[i] + g[i];
                    p[i] = p[i] * decay - lr * slot.m[i];
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub kind: String,
    pub task: String,
    pub metric_name: String,
    pub loss_curve: Vec<f32>,
    pub evals: Vec<EvalPoint>,
    pub final_metric: f64,
    pub fingerprint_before: String,
    pub fingerprint_after: String,
    pub wall_time_s: f64,
    pub config: TrainConfig,
    /// Names of parameters that received a nonzero gradient at some step.
    pub touched: Vec<String>,
    /// Names of parameters bound as trainable.
    pub trainable: Vec<String>,
    pub extra: BTreeMap<String, String>,
}

impl RunMetrics {
    /// One JSON object per training step, plus one per evaluation.
    pub fn to_jsonl(&self) -> String {
        let mut evals = self.evals.iter().peekable();
        let per_step = self.wall_time_s / self.loss_curve.len().max(1) as f64;
        let mut out = String::new();
        for (step, loss) in self.loss_curve.iter().enumerate() {
            let mut rec = serde_json::json!({
                "step": step,
                "loss": loss,
                "timestamp": (step + 1) as f64 * per_step,
            });
            while let Some(e) = evals.next_if(|e| e.step == step + 1) {
                rec["metric"] = serde_json::json!(e.metric);
            }
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn frozen_ok(&self) -> bool {
        self.fingerprint_before == self.fingerprint_after
    }

    /// Every touched parameter must have been declared trainable.
    pub fn audit_trainable(&self) -> Result<()> {
        let declared: BTreeSet<&String> = self.trainable.iter().collect();
        if let Some(bad) = self.touched.iter().find(|t| !declared.contains(t)) {
            return Err(Error::Validation(format!("{bad} received a gradient but is not trainable")));
        }
        Ok(())
    }
}

pub fn unix_now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Records which bound parameters received a nonzero gradient.
#[derive(Default)]
struct Audit {
    touched: BTreeSet<String>,
    trainable: BTreeSet<String>,
}

impl Audit {
    fn declare(&mut self, name: &str) {
        self.trainable.insert(name.to_string());
    }

    fn observe(&mut self, name: &str, grad: Option<&Tensor<f32>>) {
        if grad.is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
            self.touched.insert(name.to_string());
        }
    }
}

fn check_finite(step: usize, what: &str, t: &Tensor<f32>) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("non-finite {what}"),
        });
    }
    Ok(())
}

/// Applies one optimizer step to every `(name, tensor, var)` that has a
/// gradient; parameters without one are left alone.
fn apply_updates(
    opt: &mut Optimizer,
    audit: &mut Audit,
    grads: &mut Gradients<f32>,
    params: Vec<(String, &mut Tensor<f32>, Var)>,
    lr: f64,
    step: usize,
) -> Result<()> {
    for (name, tensor, var) in params {
        audit.observe(&name, grads.get(var));
        if let Some(g) = grads.take(var) {
            check_finite(step, &format!("gradient for {name}"), &g)?;
            opt.update(&name, tensor, &g, lr);
        }
    }
    Ok(())
}

/// Shared epoch-shuffled batching, cosine schedule, periodic evaluation and
/// divergence checks.
trait Model {
    fn step(&mut self, images: &Tensor<f32>, labels: &Labels, lr: f64, step: usize) -> Result<f32>;
    fn evaluate(&mut self, data: &ToyDataset) -> Result<f64>;
}

struct LoopOutput {
    loss_curve: Vec<f32>,
    evals: Vec<EvalPoint>,
    final_metric: f64,
}

fn run_loop(model: &mut dyn Model, cfg: &TrainConfig, train: &ToyDataset, val: &ToyDataset) -> Result<LoopOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_BA7C);
    let mut order: Vec<usize> = Vec::new();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("non-empty"));
        }
        let (images, labels) = train.batch(&idx);
        let loss = model.step(&images, &labels, cfg.lr_at(step), step)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        loss_curve.push(loss);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            evals.push(EvalPoint {
                step: step + 1,
                metric: model.evaluate(val)?,
            });
        }
    }
    let final_metric = model.evaluate(val)?;
    evals.push(EvalPoint {
        step: cfg.steps,
        metric: final_metric,
    });
    Ok(LoopOutput {
        loss_curve,
        evals,
        final_metric,
    })
}

fn metric_name(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::LinearCls => "accuracy",
        HeadKind::DensePerPatch => "patch_accuracy",
        HeadKind::ScalarReg => "mse",
    }
}

const EVAL_BATCH: usize = 64;

/// Runs `forward` over `data` in fixed-size batches and scores the head.
fn score(
    data: &ToyDataset,
    kind: HeadKind,
    mut forward: impl FnMut(&Tensor<f32>, &Labels) -> Result<Tensor<f32>>,
) -> Result<f64> {
    let mut acc = MetricAccumulator::default();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk);
        let preds = forward(&images, &labels)?;
        acc.update(kind, &preds, &labels);
    }
    Ok(acc.value(kind))
}

fn datasets(spec: &TaskSpec, cfg: &TrainConfig) -> Result<(ToyDataset, ToyDataset)> {
    Ok((
        generate(spec, cfg.train_size, Split::Train)?,
        generate(spec, cfg.val_size, Split::Val)?,
    ))
}

struct PretrainModel {
    backbone: Backbone,
    head: TaskHead,
    opt: Optimizer,
    audit: Audit,
}

impl Model for PretrainModel {
    fn step(&mut self, images: &Tensor<f32>, labels: &Labels, lr: f64, step: usize) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let bb = self.backbone.bind(&mut tape, true);
        let hv = self.head.bind(&mut tape, true);
        let feats = self.backbone.forward(&mut tape, &bb, images, &mut NoDelta)?;
        let (_, loss) = self.head.forward(&mut tape, &hv, feats, labels)?;
        let loss_value = tape.value(loss).scalar_value();
        let mut grads = tape.backward(loss)?;
        let names: Vec<String> = self.backbone.named_params().map(|(n, _)| format!("backbone.{n}")).collect();
        let mut params = take_backbone_params(&mut self.backbone);
        let entries = names
            .into_iter()
            .zip(params.iter_mut())
            .zip(&bb.params)
            .map(|((n, t), &v)| (n, t, v))
            .chain([
                ("head.w".to_string(), &mut self.head.weight, hv.weight),
                ("head.b".to_string(), &mut self.head.bias, hv.bias),
            ])
            .collect();
        apply_updates(&mut self.opt, &mut self.audit, &mut grads, entries, lr, step)?;
        self.backbone = Backbone::from_params(self.backbone.config().clone(), params)?;
        Ok(loss_value)
    }

    fn evaluate(&mut self, data: &ToyDataset) -> Result<f64> {
        evaluate_module(&self.backbone, None, &self.head, data)
    }
}

fn take_backbone_params(b: &mut Backbone) -> Vec<Tensor<f32>> {
    b.params().to_vec()
}

/// Warm-up on a pretext task. The only routine that changes backbone weights;
/// the returned backbone is frozen and fingerprinted. Zero steps return the
/// random initialization.
pub fn pretrain_backbone(config: BackboneConfig, warmup: &TaskSpec, cfg: &TrainConfig) -> Result<(Backbone, RunMetrics)> {
    cfg.validate(true)?;
    let start = Instant::now();
    let backbone = Backbone::build(config, cfg.seed)?;
    let before = backbone.fingerprint().to_string();
    let head = TaskHead::for_task(warmup, backbone.config().embed_dim);
    let kind = head.kind;
    if cfg.steps == 0 {
        let metrics = RunMetrics {
            kind: "pretrain".into(),
            task: warmup.task_name(),
            metric_name: metric_name(kind).into(),
            loss_curve: vec![],
            evals: vec![],
            final_metric: f64::NAN,
            fingerprint_after: before.clone(),
            fingerprint_before: before,
            wall_time_s: start.elapsed().as_secs_f64(),
            config: cfg.clone(),
            touched: vec![],
            trainable: vec![],
            extra: BTreeMap::new(),
        };
        return Ok((backbone, metrics));
    }
    let (train, val) = datasets(warmup, cfg)?;
    let mut audit = Audit::default();
    for (n, _) in backbone.named_params() {
        audit.declare(&format!("backbone.{n}"));
    }
    audit.declare("head.w");
    audit.declare("head.b");
    let mut model = PretrainModel {
        backbone,
        head,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
        audit,
    };
    let out = run_loop(&mut model, cfg, &train, &val)?;
    let backbone = model.backbone;
    let metrics = RunMetrics {
        kind: "pretrain".into(),
        task: warmup.task_name(),
        metric_name: metric_name(kind).into(),
        loss_curve: out.loss_curve,
        evals: out.evals,
        final_metric: out.final_metric,
        fingerprint_before: before,
        fingerprint_after: backbone.fingerprint().to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        touched: model.audit.touched.into_iter().collect(),
        trainable: model.audit.trainable.into_iter().collect(),
        extra: BTreeMap::new(),
    };
    Ok((backbone, metrics))
}

/// Head (and optionally one module) on the frozen backbone.
struct MidstreamModel<'a> {
    backbone: &'a Backbone,
    module: Option<ViMModule>,
    head: TaskHead,
    opt: Optimizer,
    audit: Audit,
}

impl Model for MidstreamModel<'_> {
    fn step(&mut self, images: &Tensor<f32>, labels: &Labels, lr: f64, step: usize) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let bb = self.backbone.bind(&mut tape, false);
        let mv = self.module.as_ref().map(|m| m.bind(&mut tape, true));
        let hv = self.head.bind(&mut tape, true);
        let mut deltas = |tape: &mut Tape<f32>, site: InsertionSite, input: Var, grid: (usize, usize)| match &mv {
            Some(mv) => mv.delta(tape, site, input, grid).map(Some),
            None => Ok(None),
        };
        let feats = self.backbone.forward(&mut tape, &bb, images, &mut deltas)?;
        let (_, loss) = self.head.forward(&mut tape, &hv, feats, labels)?;
        let loss_value = tape.value(loss).scalar_value();
        let mut grads = tape.backward(loss)?;
        for ((n, _), &v) in self.backbone.named_params().zip(&bb.params) {
            self.audit.observe(&format!("backbone.{n}"), grads.get(v));
        }
        let mut entries: Vec<(String, &mut Tensor<f32>, Var)> = Vec::new();
        if let (Some(m), Some(mv)) = (self.module.as_mut(), mv.as_ref()) {
            let names: Vec<String> = m.named_params().map(|(n, _)| format!("module.{n}")).collect();
            for ((n, t), v) in names.into_iter().zip(m.params_mut()).zip(mv.all()) {
                entries.push((n, t, v));
            }
        }
        entries.push(("head.w".into(), &mut self.head.weight, hv.weight));
        entries.push(("head.b".into(), &mut self.head.bias, hv.bias));
        apply_updates(&mut self.opt, &mut self.audit, &mut grads, entries, lr, step)?;
        Ok(loss_value)
    }

    fn evaluate(&mut self, data: &ToyDataset) -> Result<f64> {
        evaluate_module(self.backbone, self.module.as_ref(), &self.head, data)
    }
}

/// Validation metric with at most one module attached.
pub fn evaluate_module(backbone: &Backbone, module: Option<&ViMModule>, head: &TaskHead, data: &ToyDataset) -> Result<f64> {
    score(data, head.kind, |images, labels| {
        let mut tape = Tape::<f32>::new();
        let bb = backbone.bind(&mut tape, false);
        let mv = module.map(|m| m.bind(&mut tape, false));
        let hv = head.bind(&mut tape, false);
        let mut deltas = |tape: &mut Tape<f32>, site: InsertionSite, input: Var, grid: (usize, usize)| match &mv {
            Some(mv) => mv.delta(tape, site, input, grid).map(Some),
            None => Ok(None),
        };
        let feats = backbone.forward(&mut tape, &bb, images, &mut deltas)?;
        let (pred, _) = head.forward(&mut tape, &hv, feats, labels)?;
        Ok(tape.value(pred).clone())
    })
}

fn frozen_check(backbone: &Backbone, before: &str) -> Result<String> {
    let after = backbone.compute_fingerprint();
    if after != before {
        return Err(Error::FrozenViolation {
            before: before.to_string(),
            after,
        });
    }
    Ok(after)
}

#[allow(clippy::too_many_arguments)]
fn finish_metrics(
    kind: &str,
    spec: &TaskSpec,
    head_kind: HeadKind,
    out: LoopOutput,
    before: String,
    after: String,
    start: Instant,
    cfg: &TrainConfig,
    audit: Audit,
) -> RunMetrics {
    RunMetrics {
        kind: kind.into(),
        task: spec.task_name(),
        metric_name: metric_name(head_kind).into(),
        loss_curve: out.loss_curve,
        evals: out.evals,
        final_metric: out.final_metric,
        fingerprint_before: before,
        fingerprint_after: after,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        touched: audit.touched.into_iter().collect(),
        trainable: audit.trainable.into_iter().collect(),
        extra: BTreeMap::new(),
    }
}

/// Trains one fresh STANDARD module plus a head on `spec` with the backbone
/// frozen. The module comes back with its metadata filled in.
pub fn train_midstream(
    backbone: &Backbone,
    spec: &TaskSpec,
    geometry: ModuleGeometry,
    module_seed: u64,
    cfg: &TrainConfig,
) -> Result<(ViMModule, TaskHead, RunMetrics)> {
    cfg.validate(false)?;
    check_module_geometry(backbone, geometry)?;
    let start = Instant::now();
    backbone.verify_fingerprint()?;
    let before = backbone.compute_fingerprint();
    let module = ViMModule::init(geometry, module_seed, ModuleKind::Standard)?;
    let head = TaskHead::for_task(spec, backbone.config().embed_dim);
    let mut audit = Audit::default();
    for (n, _) in module.named_params() {
        audit.declare(&format!("module.{n}"));
    }
    audit.declare("head.w");
    audit.declare("head.b");
    let (train, val) = datasets(spec, cfg)?;
    let mut model = MidstreamModel {
        backbone,
        module: Some(module),
        head,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
        audit,
    };
    let out = run_loop(&mut model, cfg, &train, &val)?;
    let after = frozen_check(backbone, &before)?;
    let mut module = model.module.take().expect("module present");
    module.meta.id = format!("{}-s{module_seed}", spec.task_name());
    module.meta.task_name = spec.task_name();
    module.meta.dataset_name = spec.dataset_name();
    module.meta.created_at = unix_now();
    module.meta.midstream_metric = Some(out.final_metric);
    let kind = model.head.kind;
    let metrics = finish_metrics("midstream", spec, kind, out, before, after, start, cfg, model.audit);
    Ok((module, model.head, metrics))
}

/// Head only on frozen features: the baseline a module has to beat.
pub fn train_linear_probe(backbone: &Backbone, spec: &TaskSpec, cfg: &TrainConfig) -> Result<(TaskHead, RunMetrics)> {
    cfg.validate(false)?;
    let start = Instant::now();
    let before = backbone.compute_fingerprint();
    let mut audit = Audit::default();
    audit.declare("head.w");
    audit.declare("head.b");
    let (train, val) = datasets(spec, cfg)?;
    let mut model = MidstreamModel {
        backbone,
        module: None,
        head: TaskHead::for_task(spec, backbone.config().embed_dim),
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
        audit,
    };
    let out = run_loop(&mut model, cfg, &train, &val)?;
    let after = frozen_check(backbone, &before)?;
    let kind = model.head.kind;
    let metrics = finish_metrics("probe", spec, kind, out, before, after, start, cfg, model.audit);
    Ok((model.head, metrics))
}

fn check_module_geometry(backbone: &Backbone, g: ModuleGeometry) -> Result<()> {
    let c = backbone.config();
    if g.embed_dim != c.embed_dim || g.num_sites != c.num_sites() {
        return Err(Error::InvalidGeometry(format!(
            "module expects d={} with {} sites, backbone has d={} with {} sites",
            g.embed_dim,
            g.num_sites,
            c.embed_dim,
            c.num_sites()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DownstreamOptions {
    /// Keep every zoo module fixed; only weights and head train.
    pub freeze_modules: bool,
    /// Keep the zero module fixed even when it is activated.
    pub freeze_zero_module: bool,
}

pub struct DownstreamRun {
    pub state: AggregationState,
    pub head: TaskHead,
    /// The zoo with activated modules tuned.
    pub zoo: ModuleZoo,
    pub metrics: RunMetrics,
    pub eval: EvalReport,
}

struct DownstreamModel<'a> {
    backbone: &'a Backbone,
    zoo: ModuleZoo,
    state: AggregationState,
    head: TaskHead,
    options: DownstreamOptions,
    weight_lr_scale: f64,
    opt: Optimizer,
    audit: Audit,
}

impl DownstreamModel<'_> {
    fn module_trainable(&self, i: usize) -> bool {
        !self.options.freeze_modules && !(self.options.freeze_zero_module && self.zoo.module(i).meta.kind == ModuleKind::Zero)
    }
}

impl Model for DownstreamModel<'_> {
    fn step(&mut self, images: &Tensor<f32>, labels: &Labels, lr: f64, step: usize) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let bb = self.backbone.bind(&mut tape, false);
        let modules: Vec<ModuleVars<f32>> = (0..self.zoo.len())
            .map(|i| self.zoo.module(i).bind(&mut tape, self.module_trainable(i)))
            .collect();
        let pv = self.state.provider.bind(&mut tape, true);
        let hv = self.head.bind(&mut tape, true);
        let mut live = LiveAggregation::new(self.state.config, &self.state.provider, &pv, &modules);
        let feats = self.backbone.forward(&mut tape, &bb, images, &mut live)?;
        let (_, loss) = self.head.forward(&mut tape, &hv, feats, labels)?;
        let loss_value = tape.value(loss).scalar_value();
        let mut grads = tape.backward(loss)?;
        for ((n, _), &v) in self.backbone.named_params().zip(&bb.params) {
            self.audit.observe(&format!("backbone.{n}"), grads.get(v));
        }

        let mut entries: Vec<(String, &mut Tensor<f32>, Var)> = Vec::new();
        let mut tuned: Vec<ViMModule> = self.zoo.modules().to_vec();
        for (i, (m, mv)) in tuned.iter_mut().zip(&modules).enumerate() {
            let names: Vec<String> = m.named_params().map(|(n, _)| format!("zoo.{i}.{n}")).collect();
            for ((n, t), v) in names.into_iter().zip(m.params_mut()).zip(mv.all()) {
                entries.push((n, t, v));
            }
        }
        let pnames: Vec<String> = self
            .state
            .provider
            .param_specs()
            .into_iter()
            .map(|(n, _)| format!("provider.{n}"))
            .collect();
        let provider_entries = pnames
            .into_iter()
            .zip(self.state.provider.params_mut())
            .zip(pv.all())
            .map(|((n, t), v)| (n, t, v))
            .collect();
        entries.push(("head.w".into(), &mut self.head.weight, hv.weight));
        entries.push(("head.b".into(), &mut self.head.bias, hv.bias));
        apply_updates(&mut self.opt, &mut self.audit, &mut grads, entries, lr, step)?;
        let weight_lr = lr * self.weight_lr_scale;
        apply_updates(&mut self.opt, &mut self.audit, &mut grads, provider_entries, weight_lr, step)?;
        for (i, m) in tuned.into_iter().enumerate() {
            self.zoo.replace_module(i, m)?;
        }
        Ok(loss_value)
    }

    fn evaluate(&mut self, data: &ToyDataset) -> Result<f64> {
        // intermediate evaluations use the live weights
        let (zoo, state, head) = (&self.zoo, &self.state, &self.head);
        live_eval(self.backbone, zoo, state, head, data).map(|r| r.metric)
    }
}

fn live_eval(backbone: &Backbone, zoo: &ModuleZoo, state: &AggregationState, head: &TaskHead, data: &ToyDataset) -> Result<EvalReport> {
    let mut calls = 0;
    let mut batches = 0;
    let metric = score(data, head.kind, |images, labels| {
        let mut tape = Tape::<f32>::new();
        let bb = backbone.bind(&mut tape, false);
        let modules = bind_zoo(zoo, &mut tape, false);
        let pv = state.provider.bind(&mut tape, false);
        let hv = head.bind(&mut tape, false);
        let mut live = LiveAggregation::new(state.config, &state.provider, &pv, &modules);
        let feats = backbone.forward(&mut tape, &bb, images, &mut live)?;
        calls += live.calls;
        batches += 1;
        let (pred, _) = head.forward(&mut tape, &hv, feats, labels)?;
        Ok(tape.value(pred).clone())
    })?;
    Ok(EvalReport {
        metric,
        module_forward_calls: calls,
        batches,
        samples: data.len(),
    })
}

/// Trainable set: provider parameters, the modules activated at each step
/// (the zero module included unless frozen) and the head. Raw weights start
/// at zero, so every run begins from uniform weights over the active set.
pub fn train_downstream(
    backbone: &Backbone,
    zoo: &ModuleZoo,
    spec: &TaskSpec,
    agg: AggregationConfig,
    cfg: &TrainConfig,
    options: DownstreamOptions,
) -> Result<DownstreamRun> {
    cfg.validate(false)?;
    check_module_geometry(backbone, zoo.geometry)?;
    if zoo.backbone_fingerprint != backbone.fingerprint() {
        return Err(Error::Validation(format!(
            "zoo was built for backbone {}, not {}",
            zoo.backbone_fingerprint,
            backbone.fingerprint()
        )));
    }
    let start = Instant::now();
    backbone.verify_fingerprint()?;
    let before = backbone.compute_fingerprint();
    let state = AggregationState::new(agg, zoo, cfg.seed)?;
    let head = TaskHead::for_task(spec, backbone.config().embed_dim);
    let mut audit = Audit::default();
    for (n, _) in state.provider.param_specs() {
        audit.declare(&format!("provider.{n}"));
    }
    for (i, m) in zoo.modules().iter().enumerate() {
        let frozen = options.freeze_modules || (options.freeze_zero_module && m.meta.kind == ModuleKind::Zero);
        if !frozen {
            for (n, _) in m.named_params() {
                audit.declare(&format!("zoo.{i}.{n}"));
            }
        }
    }
    audit.declare("head.w");
    audit.declare("head.b");
    let (train, val) = datasets(spec, cfg)?;
    let mut model = DownstreamModel {
        backbone,
        zoo: zoo.clone(),
        state,
        head,
        options,
        weight_lr_scale: cfg.weight_lr_scale,
        opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
        audit,
    };
    let mut out = run_loop(&mut model, cfg, &train, &val)?;

    let summaries = if model.state.provider.needs_summary() {
        Some(site_summaries(backbone, &model.zoo, &model.state, &val)?)
    } else {
        None
    };
    model.state.finalize(&model.zoo, summaries.as_deref())?;
    let eval = evaluate(backbone, &model.zoo, &model.state, &model.head, &val)?;
    // the reported metric is the one of the finalized model
    out.final_metric = eval.metric;
    if let Some(last) = out.evals.last_mut() {
        last.metric = eval.metric;
    }
    let after = frozen_check(backbone, &before)?;
    let kind = model.head.kind;
    let mut metrics = finish_metrics("downstream", spec, kind, out, before, after, start, cfg, model.audit);
    metrics.extra.insert("strategy".into(), agg.strategy.to_string());
    metrics.extra.insert("top_k".into(), agg.top_k.to_string());
    metrics.extra.insert("weights".into(), agg.mode.to_string());
    metrics.extra.insert("share_weights".into(), agg.sharing.to_string());
    metrics.extra.insert("zoo_size".into(), zoo.len().to_string());
    metrics.extra.insert("freeze_modules".into(), options.freeze_modules.to_string());
    metrics.extra.insert("freeze_zero_module".into(), options.freeze_zero_module.to_string());
    Ok(DownstreamRun {
        state: model.state,
        head: model.head,
        zoo: model.zoo,
        metrics,
        eval,
    })
}

/// Mean normalized input of every site over `data`, with the live
/// aggregation active so later sites see the adapted stream.
pub fn site_summaries(backbone: &Backbone, zoo: &ModuleZoo, state: &AggregationState, data: &ToyDataset) -> Result<Vec<Vec<f32>>> {
    struct Recorder<'a, 'b> {
        inner: LiveAggregation<'a, f32>,
        sums: &'b mut [Vec<f64>],
    }
    impl DeltaProvider<f32> for Recorder<'_, '_> {
        fn delta(&mut self, tape: &mut Tape<f32>, site: InsertionSite, input: Var, grid: (usize, usize)) -> Result<Option<Var>> {
            let v = tape.value(input);
            let d = v.last_dim();
            let sum = &mut self.sums[site.index()];
            for row in v.data().chunks(d) {
                for (s, &x) in sum.iter_mut().zip(row) {
                    *s += x as f64;
                }
            }
            self.inner.delta(tape, site, input, grid)
        }
    }
    let c = backbone.config();
    let mut sums = vec![vec![0.0f64; c.embed_dim]; c.num_sites()];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk);
        let mut tape = Tape::<f32>::new();
        let bb = backbone.bind(&mut tape, false);
        let modules = bind_zoo(zoo, &mut tape, false);
        let pv = state.provider.bind(&mut tape, false);
        let mut rec = Recorder {
            inner: LiveAggregation::new(state.config, &state.provider, &pv, &modules),
            sums: &mut sums,
        };
        backbone.forward(&mut tape, &bb, &images, &mut rec)?;
    }
    let rows = (data.len() * c.num_tokens()) as f64;
    Ok(sums
        .into_iter()
        .map(|s| s.into_iter().map(|v| (v / rows) as f32).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: f64,
    /// Module forwards per site summed over all sites and batches.
    pub module_forward_calls: usize,
    pub batches: usize,
    pub samples: usize,
}

/// Validation metric of a finalized state. Vector weights use the frozen
/// table: the ensemble forwards the active modules, the reparameterized
/// strategy forwards only the merged module. Projection weights stay
/// input-dependent and are evaluated live.
pub fn evaluate(backbone: &Backbone, zoo: &ModuleZoo, state: &AggregationState, head: &TaskHead, data: &ToyDataset) -> Result<EvalReport> {
    let weights = state.site_weights.as_ref().ok_or(Error::NotFinalized)?;
    if state.config.mode != ProviderMode::Vector {
        return live_eval(backbone, zoo, state, head, data);
    }
    let mut calls = 0;
    let mut batches = 0;
    let metric = score(data, head.kind, |images, labels| {
        let mut tape = Tape::<f32>::new();
        let bb = backbone.bind(&mut tape, false);
        let hv = head.bind(&mut tape, false);
        let feats = match (state.config.strategy, &state.merged) {
            (Strategy::Reparam, Some(merged)) => {
                let mv = merged.bind(&mut tape, false);
                let mut deltas = |tape: &mut Tape<f32>, site: InsertionSite, input: Var, grid: (usize, usize)| {
                    calls += 1;
                    mv.delta(tape, site, input, grid).map(Some)
                };
                backbone.forward(&mut tape, &bb, images, &mut deltas)?
            }
            (Strategy::Reparam, None) => return Err(Error::NotFinalized),
            (Strategy::Ensemble, _) => {
                let modules = bind_zoo(zoo, &mut tape, false);
                let alphas: Vec<Var> = weights
                    .iter()
                    .map(|w| {
                        let m = w.alpha.len();
                        tape.constant(Tensor::from_fn(vec![1, m], |i| w.alpha[i] as f32))
                    })
                    .collect();
                let mut deltas = |tape: &mut Tape<f32>, site: InsertionSite, input: Var, grid: (usize, usize)| {
                    let w = &weights[site.index()];
                    ensemble_site(tape, &modules, alphas[site.index()], &[w.active.clone()], site, input, grid, &mut calls).map(Some)
                };
                backbone.forward(&mut tape, &bb, images, &mut deltas)?
            }
        };
        batches += 1;
        let (pred, _) = head.forward(&mut tape, &hv, feats, labels)?;
        Ok(tape.value(pred).clone())
    })?;
    Ok(EvalReport {
        metric,
        module_forward_calls: calls,
        batches,
        samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(50) - 5e-4).abs() < 1e-12);
        assert!(cfg.lr_at(100).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0);
        let mut p = Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.3f32, -5.0]).unwrap();
        opt.update("p", &mut p, &g, 0.01);
        assert!((p.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.data()[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate(false).is_err());
        let zero = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(zero.validate(false).is_err());
        assert!(zero.validate(true).is_ok());
    }
}
