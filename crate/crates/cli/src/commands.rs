use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vim_core::aggregation::{AggregationState, ProviderMode, Strategy, TopK};
use vim_core::container::TensorBundle;
use vim_core::tasks::{generate, Split, TaskHead, TaskSpec};
use vim_core::training::{
    evaluate, pretrain_backbone, train_downstream, train_midstream, EvalReport, RunMetrics,
};
use vim_core::zoo::ModuleZoo;
use vim_core::{Backbone, ModuleKind, ViMModule};

use crate::config::Config;
use crate::error::CliError;

pub struct Output {
    pub root: PathBuf,
    pub run_dir: Option<PathBuf>,
}

impl Output {
    fn dir(&self, default_name: &str) -> Result<PathBuf, CliError> {
        let dir = self.run_dir.clone().unwrap_or_else(|| self.root.join(default_name));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }
}

const CONFIG_FILE: &str = "config.txt";
const STATE_FILE: &str = "agg_state.vimt";
const HEAD_FILE: &str = "head.vimt";
const ZOO_COPY: &str = "zoo.vimz";
const TUNED_FILE: &str = "tuned_modules.vimt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn slug(text: &str) -> String {
    text.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '-' }).collect()
}

/// config.txt, metrics.jsonl and summary.json for one run.
fn write_run(dir: &Path, cfg: &Config, command: &str, metrics: &RunMetrics, extra: Value) -> Result<Value, CliError> {
    write(&dir.join(CONFIG_FILE), cfg.to_text())?;
    write(&dir.join("metrics.jsonl"), metrics.to_jsonl())?;
    let mut summary = serde_json::to_value(metrics).map_err(|e| CliError::Training(e.to_string()))?;
    summary["command"] = json!(command);
    if command != "pretrain" {
        summary["frozen"] = json!(metrics.frozen_ok());
    }
    if let (Some(s), Value::Object(extra)) = (summary.as_object_mut(), extra) {
        s.extend(extra);
    }
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Training(e.to_string()))?;
    write(&dir.join("summary.json"), text + "\n")?;
    Ok(summary)
}

fn report_line(dir: &Path, metrics: &RunMetrics) {
    let mut line = json!({
        "run_dir": dir,
        "task": metrics.task,
        "metric": metrics.metric_name,
        "value": metrics.final_metric,
    });
    if metrics.kind != "pretrain" {
        line["frozen"] = json!(metrics.frozen_ok());
    }
    println!("{line}");
}

pub fn pretrain(cfg: &Config, out: &Output) -> Result<(), CliError> {
    let bc = cfg.backbone_config()?;
    let warm = cfg.task_spec("warmup.task", &bc)?;
    let train = cfg.train()?;
    let (backbone, metrics) = pretrain_backbone(bc, &warm, &train)?;
    let dir = out.dir(&format!("pretrain-{}-s{}", cfg.get("backbone.preset"), train.seed))?;
    let path = dir.join("backbone.vimt");
    backbone.save(&path)?;
    write_run(&dir, cfg, "pretrain", &metrics, json!({ "backbone": path, "fingerprint": backbone.fingerprint() }))?;
    report_line(&dir, &metrics);
    Ok(())
}

fn open_or_create_zoo(cfg: &Config, path: &Path, backbone: &Backbone) -> Result<ModuleZoo, CliError> {
    let c = backbone.config();
    if path.exists() {
        let zoo = ModuleZoo::load(path)?;
        zoo.check_backbone(backbone.fingerprint(), c.embed_dim, c.num_sites())?;
        if zoo.geometry != cfg.geometry(c)? {
            return Err(CliError::Validation(format!(
                "{} holds squeeze dim {}, configuration asks for {}",
                path.display(),
                zoo.geometry.squeeze_dim,
                cfg.geometry(c)?.squeeze_dim
            )));
        }
        Ok(zoo)
    } else {
        Ok(ModuleZoo::create(cfg.geometry(c)?, backbone.fingerprint(), backbone.param_count() as u64)?
            .with_max_module_ratio(cfg.max_module_ratio()?))
    }
}

pub fn train_mid(cfg: &Config, out: &Output) -> Result<(), CliError> {
    let backbone = cfg.backbone()?;
    let c = backbone.config().clone();
    let spec = cfg.task_spec("task", &c)?;
    let train = cfg.train()?;
    let zoo_path = cfg.path("zoo");
    // fail before training if the zoo cannot take the module
    let zoo = match &zoo_path {
        Some(p) => Some(open_or_create_zoo(cfg, p, &backbone)?),
        None => None,
    };
    let g = cfg.geometry(&c)?;
    let (module, head, metrics) = train_midstream(&backbone, &spec, g, train.seed, &train)?;

    let dir = out.dir(&format!("train-mid-{}-s{}", slug(&spec.task_name()), train.seed))?;
    head.to_bundle().save(dir.join(HEAD_FILE))?;
    let single = ModuleZoo::create(g, backbone.fingerprint(), backbone.param_count() as u64)?
        .with_max_module_ratio(cfg.max_module_ratio()?)
        .try_add(module.clone())?;
    single.save(dir.join("module.vimz"))?;
    write_run(&dir, cfg, "train-mid", &metrics, json!({ "module_id": module.meta.id, "zoo": zoo_path }))?;

    if let (Some(zoo), Some(path)) = (zoo, zoo_path) {
        let (grown, report) = zoo.add(module, false);
        if !report.accepted {
            return Err(CliError::Validation(format!("module rejected by {}: {}", path.display(), report.summary())));
        }
        grown.save(&path)?;
    }
    report_line(&dir, &metrics);
    Ok(())
}

fn load_zoo_for(cfg: &Config, backbone: &Backbone) -> Result<ModuleZoo, CliError> {
    let path = cfg
        .path("zoo")
        .ok_or_else(|| CliError::Usage("a zoo is required (--zoo or zoo = ...)".into()))?;
    let zoo = ModuleZoo::load(&path)?;
    let c = backbone.config();
    zoo.check_backbone(backbone.fingerprint(), c.embed_dim, c.num_sites())?;
    Ok(zoo)
}

fn tuned_bundle(zoo: &ModuleZoo) -> TensorBundle {
    let mut b = TensorBundle::new().with_meta("modules", zoo.len());
    for (i, m) in zoo.modules().iter().enumerate() {
        for (n, t) in m.named_params() {
            b.push(format!("zoo.{i}.{n}"), t.clone());
        }
    }
    b
}

fn apply_tuned(zoo: &mut ModuleZoo, bundle: &TensorBundle) -> Result<(), CliError> {
    for i in 0..zoo.len() {
        let base = zoo.module(i);
        let params: Vec<_> = bundle.with_prefix(&format!("zoo.{i}.")).into_iter().map(|(_, t)| t).collect();
        let tuned = ViMModule::from_params(base.geometry, base.meta.clone(), base.scale, params)?;
        zoo.replace_module(i, tuned)?;
    }
    Ok(())
}

fn write_weights(dir: &Path, state: &AggregationState, zoo: &ModuleZoo) -> Result<(), CliError> {
    let table = state.export_weights(zoo)?;
    write(&dir.join("agg_weights.csv"), table.to_csv())?;
    write(&dir.join("agg_weights.json"), table.to_json())
}

fn eval_json(e: &EvalReport) -> Value {
    json!({
        "metric": e.metric,
        "module_forward_calls": e.module_forward_calls,
        "batches": e.batches,
        "samples": e.samples,
    })
}

pub fn train_down(cfg: &Config, out: &Output) -> Result<(), CliError> {
    let backbone = cfg.backbone()?;
    let c = backbone.config().clone();
    let spec = cfg.task_spec("task", &c)?;
    let zoo = load_zoo_for(cfg, &backbone)?;
    let agg = cfg.aggregation()?;
    let train = cfg.train()?;
    let run = train_downstream(&backbone, &zoo, &spec, agg, &train, cfg.downstream_options()?)?;

    let dir = out.dir(&format!("train-down-{}-{}-s{}", slug(&spec.task_name()), agg.strategy, train.seed))?;
    zoo.save(dir.join(ZOO_COPY))?;
    tuned_bundle(&run.zoo).save(dir.join(TUNED_FILE))?;
    run.state.to_bundle().save(dir.join(STATE_FILE))?;
    run.head.to_bundle().save(dir.join(HEAD_FILE))?;
    write_weights(&dir, &run.state, &run.zoo)?;
    write(&dir.join("eval.json"), eval_json(&run.eval).to_string() + "\n")?;
    let extra = json!({
        "strategy": agg.strategy.to_string(),
        "top_k": agg.top_k.to_string(),
        "weights": agg.mode.to_string(),
        "share_weights": agg.sharing.to_string(),
        "zoo_ids": zoo.ids(),
        "eval": eval_json(&run.eval),
    });
    write_run(&dir, cfg, "train-down", &run.metrics, extra)?;
    report_line(&dir, &run.metrics);
    Ok(())
}

struct DownRun {
    backbone: Backbone,
    zoo: ModuleZoo,
    state: AggregationState,
    head: TaskHead,
    spec: TaskSpec,
    val_size: usize,
}

fn load_down_run(dir: &Path) -> Result<DownRun, CliError> {
    if !dir.join(STATE_FILE).exists() {
        return Err(CliError::Validation(format!("{} is not a downstream run (no {STATE_FILE})", dir.display())));
    }
    let mut cfg = Config::default();
    cfg.merge_file(&dir.join(CONFIG_FILE))?;
    let backbone = cfg.backbone()?;
    let mut zoo = ModuleZoo::load(dir.join(ZOO_COPY))?;
    let c = backbone.config();
    zoo.check_backbone(backbone.fingerprint(), c.embed_dim, c.num_sites())?;
    apply_tuned(&mut zoo, &TensorBundle::load(dir.join(TUNED_FILE))?)?;
    let state = AggregationState::from_bundle(&TensorBundle::load(dir.join(STATE_FILE))?, &zoo)?;
    if !state.is_finalized() {
        return Err(vim_core::Error::NotFinalized.into());
    }
    let head = TaskHead::from_bundle(&TensorBundle::load(dir.join(HEAD_FILE))?)?;
    let spec = cfg.task_spec("task", c)?;
    Ok(DownRun {
        backbone,
        zoo,
        state,
        head,
        spec,
        val_size: cfg.train()?.val_size,
    })
}

pub fn eval(run_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let r = load_down_run(run_dir)?;
    let data = generate(&r.spec, r.val_size, Split::Val)?;
    let report = evaluate(&r.backbone, &r.zoo, &r.state, &r.head, &data)?;
    let line = eval_json(&report).to_string();
    let dir = out.unwrap_or(run_dir);
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join("eval.json"), line.clone() + "\n")?;
    println!("{line}");
    Ok(())
}

pub fn export_weights(run_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let r = load_down_run(run_dir)?;
    let dir = out.unwrap_or(run_dir);
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_weights(dir, &r.state, &r.zoo)?;
    println!("{}", dir.join("agg_weights.csv").display());
    Ok(())
}

pub fn sweep(cfg: &Config, out: &Output) -> Result<(), CliError> {
    let backbone = cfg.backbone()?;
    let c = backbone.config().clone();
    let spec = cfg.task_spec("task", &c)?;
    let zoo = load_zoo_for(cfg, &backbone)?;
    let base_agg = cfg.aggregation()?;
    let base_train = cfg.train()?;
    let options = cfg.downstream_options()?;
    let axis = cfg.get("sweep.axis").to_string();
    let values = cfg.list("sweep.values");
    let seeds: u64 = cfg.parse("sweep.seeds")?;
    if values.is_empty() || seeds == 0 {
        return Err(CliError::Usage("sweep needs at least one value and one seed".into()));
    }

    let mut rows = Vec::new();
    for value in &values {
        let mut agg = base_agg;
        let mut trial_zoo = zoo.clone();
        match axis.as_str() {
            "zoo-size" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| CliError::Usage(format!("zoo size {value:?} is not a count")))?;
                if n + 1 > zoo.len() {
                    return Err(CliError::Usage(format!("zoo has {} trained modules, asked for {n}", zoo.len() - 1)));
                }
                trial_zoo = zoo.truncated(n);
            }
            "top-k" => agg.top_k = value.parse::<TopK>()?,
            "weights" => agg.mode = value.parse::<ProviderMode>()?,
            "strategy" => agg.strategy = value.parse::<Strategy>()?,
            "empty" => match value.as_str() {
                "trained" => {}
                "empty" => trial_zoo = empty_like(&zoo, &backbone)?,
                other => return Err(CliError::Usage(format!("empty axis takes trained/empty, got {other:?}"))),
            },
            other => return Err(CliError::Usage(format!("unknown sweep axis {other:?}"))),
        }
        let mut metrics = Vec::new();
        for s in 0..seeds {
            let train = vim_core::training::TrainConfig {
                seed: base_train.seed + s,
                ..base_train.clone()
            };
            let run = train_downstream(&backbone, &trial_zoo, &spec, agg, &train, options)?;
            if !run.metrics.frozen_ok() {
                return Err(CliError::Training("backbone fingerprint changed during sweep".into()));
            }
            metrics.push(run.eval.metric);
        }
        let n = metrics.len() as f64;
        let mean = metrics.iter().sum::<f64>() / n;
        let std = if metrics.len() > 1 {
            (metrics.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        println!("{axis}={value}: {mean:.4} ± {std:.4} over {} seeds", metrics.len());
        rows.push((value.clone(), mean, std, metrics));
    }

    let dir = out.dir(&format!("sweep-{axis}-{}", slug(&spec.task_name())))?;
    write(&dir.join(CONFIG_FILE), cfg.to_text())?;
    let mut csv = String::from("axis,value,seeds,mean,std,metrics\n");
    for (value, mean, std, metrics) in &rows {
        let each: Vec<String> = metrics.iter().map(|m| format!("{m:.6}")).collect();
        csv.push_str(&format!("{axis},{value},{},{mean:.6},{std:.6},{}\n", metrics.len(), each.join(";")));
    }
    write(&dir.join("sweep.csv"), &csv)?;
    let json_rows: Vec<Value> = rows
        .iter()
        .map(|(value, mean, std, metrics)| json!({ "value": value, "mean": mean, "std": std, "metrics": metrics }))
        .collect();
    let summary = json!({ "axis": axis, "task": spec.task_name(), "rows": json_rows });
    write(&dir.join("sweep.json"), serde_json::to_string_pretty(&summary).unwrap_or_default() + "\n")?;
    println!("{}", dir.join("sweep.csv").display());
    Ok(())
}

/// Same size and geometry as `zoo`, filled with untrained modules.
fn empty_like(zoo: &ModuleZoo, backbone: &Backbone) -> Result<ModuleZoo, CliError> {
    let mut empty = ModuleZoo::create(zoo.geometry, backbone.fingerprint(), backbone.param_count() as u64)?
        .with_max_module_ratio(zoo.max_module_ratio);
    for i in 1..zoo.len() {
        let m = ViMModule::init(zoo.geometry, 1000 + i as u64, ModuleKind::Standard)?;
        empty = empty.try_add(m.with_meta(&format!("empty-{i}"), "none", "none"))?;
    }
    Ok(empty)
}

pub fn zoo_list(path: &Path, as_json: bool) -> Result<(), CliError> {
    let zoo = ModuleZoo::load(path)?;
    if as_json {
        let rows: Vec<Value> = zoo
            .modules()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                json!({
                    "index": i,
                    "id": m.meta.id,
                    "task": m.meta.task_name,
                    "dataset": m.meta.dataset_name,
                    "kind": m.meta.kind.as_str(),
                    "params": m.meta.param_count,
                    "midstream_metric": m.meta.midstream_metric,
                    "created_at": m.meta.created_at,
                })
            })
            .collect();
        println!("{}", Value::Array(rows));
        return Ok(());
    }
    println!(
        "# {} modules, d={} h={} sites={}, backbone {}",
        zoo.len(),
        zoo.geometry.embed_dim,
        zoo.geometry.squeeze_dim,
        zoo.geometry.num_sites,
        zoo.backbone_fingerprint
    );
    println!("index\tid\ttask\tdataset\tkind\tparams\tmetric\tcreated_at");
    for (i, m) in zoo.modules().iter().enumerate() {
        let metric = m.meta.midstream_metric.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{i}\t{}\t{}\t{}\t{}\t{}\t{metric}\t{}",
            m.meta.id,
            m.meta.task_name,
            m.meta.dataset_name,
            m.meta.kind.as_str(),
            m.meta.param_count,
            m.meta.created_at
        );
    }
    Ok(())
}

fn id_list(ids: Option<&str>) -> Option<Vec<String>> {
    ids.map(|s| s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
}

pub fn zoo_add(path: &Path, from: &Path, ids: Option<&str>, report_only: bool) -> Result<(), CliError> {
    let mut zoo = ModuleZoo::load(path)?;
    let source = ModuleZoo::load(from)?;
    let wanted = id_list(ids);
    let mut rejected = Vec::new();
    let mut added = 0;
    for m in source.modules().iter().filter(|m| m.meta.kind != ModuleKind::Zero) {
        if wanted.as_ref().is_some_and(|w| !w.contains(&m.meta.id)) {
            continue;
        }
        let (next, report) = zoo.add(m.clone(), report_only);
        println!("{}\t{}", m.meta.id, report.summary());
        if report.accepted {
            added += 1;
        } else {
            rejected.push(m.meta.id.clone());
        }
        zoo = next;
    }
    if let Some(w) = &wanted {
        let missing: Vec<&String> = w.iter().filter(|id| source.index_of(id).is_none()).collect();
        if !missing.is_empty() {
            return Err(CliError::Validation(format!("{} has no module {missing:?}", from.display())));
        }
    }
    if !rejected.is_empty() {
        return Err(CliError::Validation(format!("rejected {rejected:?}; {} left unchanged", path.display())));
    }
    if !report_only {
        zoo.save(path)?;
    }
    println!("{} {added} module(s); zoo now holds {}", if report_only { "validated" } else { "added" }, zoo.len());
    Ok(())
}

pub fn zoo_subset(path: &Path, output: &Path, ids: Option<&str>, first: Option<usize>, task: Option<&str>) -> Result<(), CliError> {
    let zoo = ModuleZoo::load(path)?;
    let sub = match (id_list(ids), first, task) {
        (Some(ids), None, None) => {
            if let Some(bad) = ids.iter().find(|id| zoo.index_of(id).is_none()) {
                return Err(CliError::Validation(format!("{} has no module {bad:?}", path.display())));
            }
            zoo.subset(|m| ids.contains(&m.id))
        }
        (None, Some(n), None) => zoo.truncated(n),
        (None, None, Some(prefix)) => zoo.subset(|m| m.task_name.starts_with(prefix)),
        _ => return Err(CliError::Usage("give exactly one of --ids, --first, --task".into())),
    };
    sub.save(output)?;
    println!("{}: {} modules", output.display(), sub.len());
    Ok(())
}

pub fn zoo_validate(path: &Path, backbone: Option<&Path>) -> Result<(), CliError> {
    let zoo = ModuleZoo::load(path)?;
    let report = zoo.validate();
    if !report.accepted {
        return Err(CliError::Validation(report.summary()));
    }
    if let Some(b) = backbone {
        let backbone = Backbone::load(b)?;
        let c = backbone.config();
        zoo.check_backbone(backbone.fingerprint(), c.embed_dim, c.num_sites())?;
    }
    println!("ok: {} modules, {}", zoo.len(), report.summary());
    Ok(())
}
