use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::graphio::{load_dataset, load_graph, save_dataset, Dataset, DATASET_MANIFEST};
use crate::metrics::eval_report;
use crate::model::{export_branch_weights, Method};
use crate::numcore::GradFault;
use crate::shiftgen::{gen_planted_dataset, gen_spurious_dataset, PlantedConfig, SpuriousGenConfig};
use crate::trainer::{self, load_checkpoint, save_checkpoint, Checkpoint, GradcheckConfig, SweepGrid, TrainConfig};

use super::manifest::{sha256_file, sha256_hex, RunManifest, RUN_MANIFEST};
use super::{
    CliError, DataKind, EvalArgs, ExportArgs, GenDataArgs, GradcheckArgs, SweepArgs, TrainArgs, BEST_CONFIG_FILE,
    CHECKPOINT_FILE, METRICS_FILE, RUN_FILE, SWEEP_FILE,
};

/// One JSON log record on stdout.
fn log(event: &str, fields: impl Serialize) {
    let mut record = Map::new();
    record.insert("event".into(), event.into());
    match serde_json::to_value(fields).expect("log fields serialize") {
        Value::Object(m) => record.extend(m),
        other => {
            record.insert("value".into(), other);
        }
    }
    println!("{}", Value::Object(record));
}

fn warn(message: &str) {
    log("warning", json!({ "message": message }));
    eprintln!("warning: {message}");
}

/// Fails unless `dir` can be written: absent, empty, or replaceable with
/// `--force` because an earlier command created it.
fn check_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if !dir.exists() {
        return Ok(());
    }
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
    }
    let empty = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_none();
    if empty {
        return Ok(());
    }
    if !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to replace it",
            dir.display()
        )));
    }
    if !dir.join(RUN_MANIFEST).is_file() {
        return Err(CliError::Usage(format!(
            "refusing to replace {}: it has no {RUN_MANIFEST}, so it was not written by canet",
            dir.display()
        )));
    }
    Ok(())
}

/// Empties (or creates) a directory that passed [`check_out`].
fn reset_out(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a JSON object and its SHA-256.
fn read_object(path: &Path) -> Result<(Map<String, Value>, String), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    match serde_json::from_slice(&bytes) {
        Ok(Value::Object(m)) => Ok((m, sha256_hex(&bytes))),
        Ok(_) => Err(CliError::Usage(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
    }
}

fn dataset_hash(dir: &Path) -> Result<String, CliError> {
    sha256_file(&dir.join(DATASET_MANIFEST))
}

pub fn gen_data(a: GenDataArgs, args: &[String]) -> Result<(), CliError> {
    match (a.kind, &a.base) {
        (DataKind::CitationSpurious, None) => {
            return Err(CliError::Usage(
                "--kind citation-spurious requires --base <graph directory>".into(),
            ))
        }
        (DataKind::Planted, Some(_)) => {
            return Err(CliError::Usage("--base applies only to --kind citation-spurious".into()))
        }
        _ => {}
    }
    if a.kind == DataKind::CitationSpurious && a.nodes.is_some() {
        return Err(CliError::Usage("--nodes applies only to --kind planted".into()));
    }
    let mut manifest = RunManifest::start("gen-data", args);
    let mut params = Map::new();
    if let Some(path) = &a.config {
        let (m, hash) = read_object(path)?;
        params = m;
        manifest.config_path = Some(path.clone());
        manifest.config_sha256 = Some(hash);
    }
    params.insert("seed".into(), a.seed.into());
    if let Some(d) = a.spurious_dim {
        params.insert("spurious_dim".into(), d.into());
    }
    if let Some(n) = a.nodes {
        params.insert("nodes_per_env".into(), n.into());
    }
    let bad_params = |e: serde_json::Error| CliError::Usage(format!("generator parameters: {e}"));
    check_out(&a.out, a.force)?;
    let ds: Dataset = match a.kind {
        DataKind::Planted => {
            let cfg: PlantedConfig = serde_json::from_value(Value::Object(params)).map_err(bad_params)?;
            gen_planted_dataset(&cfg)?
        }
        DataKind::CitationSpurious => {
            let cfg: SpuriousGenConfig = serde_json::from_value(Value::Object(params)).map_err(bad_params)?;
            let base = load_graph(a.base.as_deref().expect("checked above"), None)?;
            gen_spurious_dataset(&base, &cfg)?
        }
    };
    reset_out(&a.out)?;
    save_dataset(&ds, &a.out)?;
    manifest.dataset_sha256 = Some(dataset_hash(&a.out)?);
    manifest.seeds = vec![a.seed];
    manifest.details = ds.generator.clone();
    let manifest = manifest.finish(&a.out)?;
    let id_nodes = ds.id_nodes();
    let ood_nodes: usize = ds.ood_graphs.iter().map(|(_, g)| g.n()).sum();
    log(
        "dataset",
        json!({
            "name": ds.name,
            "id_graphs": ds.id_graphs.len(),
            "ood_graphs": ds.ood_graphs.len(),
            "id_nodes": id_nodes,
            "ood_nodes": ood_nodes,
            "features": ds.feature_dim(),
            "classes": ds.num_classes(),
            "dataset_sha256": manifest.dataset_sha256,
        }),
    );
    eprintln!(
        "wrote {} to {}: {} ID + {} OOD graphs, {} + {} nodes, D={}, C={}",
        ds.name,
        a.out.display(),
        ds.id_graphs.len(),
        ds.ood_graphs.len(),
        id_nodes,
        ood_nodes,
        ds.feature_dim(),
        ds.num_classes()
    );
    Ok(())
}

/// Defaults, overlaid by the config file, overlaid by flags. Returns the
/// merged config and the keys that were set explicitly.
fn merge_config(a: &TrainArgs, manifest: &mut RunManifest) -> Result<(TrainConfig, Vec<String>), CliError> {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let Value::Object(mut merged) = defaults else {
        unreachable!("TrainConfig serializes to an object")
    };
    let mut explicit = Vec::new();
    if let Some(path) = &a.config {
        let (file, hash) = read_object(path)?;
        for (k, v) in file {
            if !merged.contains_key(&k) {
                return Err(CliError::Usage(format!("{}: unknown config field {k:?}", path.display())));
            }
            explicit.push(k.clone());
            merged.insert(k, v);
        }
        manifest.config_path = Some(path.clone());
        manifest.config_sha256 = Some(hash);
    }
    let o = &a.overrides;
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            explicit.push(key.to_string());
            merged.insert(key.to_string(), v);
        }
    };
    let method = a.method.map(Method::from);
    set("method", method.map(|m| serde_json::to_value(m).expect("enum serializes")));
    let backbone = a.backbone.map(crate::model::Backbone::from);
    set("backbone", backbone.map(|b| serde_json::to_value(b).expect("enum serializes")));
    set("seed", a.seed.map(Value::from));
    set("layers", o.layers.map(Value::from));
    set("hidden", o.hidden.map(Value::from));
    set("branches", o.branches.map(Value::from));
    set("tau", o.tau.map(Value::from));
    set("lambda", o.lambda.map(Value::from));
    set("lr", o.lr.map(Value::from));
    set("weight_decay", o.weight_decay.map(Value::from));
    set("dropout", o.dropout.map(Value::from));
    set("epochs", o.epochs.map(Value::from));
    for (key, on) in [
        ("no_reg_loss", o.no_reg_loss),
        ("shared_env", o.shared_env),
        ("mean_pool_env", o.mean_pool_env),
        ("log_prob_gumbel", o.log_prob_gumbel),
        ("deterministic_eval", o.deterministic_eval),
    ] {
        set(key, on.then_some(Value::Bool(true)));
    }
    let cfg: TrainConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("training config: {e}")))?;
    cfg.validate()?;
    Ok((cfg, explicit))
}

pub fn train(a: TrainArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("train", args);
    let (cfg, explicit) = merge_config(&a, &mut manifest)?;
    if cfg.model.method == Method::Erm {
        let ignored: Vec<&str> = ["branches", "tau", "lambda"]
            .into_iter()
            .filter(|k| explicit.iter().any(|e| e == k))
            .collect();
        if !ignored.is_empty() {
            warn(&format!("--method erm ignores {}", ignored.join(", ")));
        }
    }
    check_out(&a.out, a.force)?;
    let ds = load_dataset(&a.data)?;
    manifest.dataset_sha256 = Some(dataset_hash(&a.data)?);
    manifest.seeds = vec![cfg.seed];

    let result = trainer::train(&ds, &cfg)?;
    for record in &result.history {
        log("epoch", record);
    }
    reset_out(&a.out)?;
    let record = result.record();
    write_json(&a.out.join(RUN_FILE), &record)?;
    save_checkpoint(&Checkpoint::new(&cfg, &result.params), &a.out.join(CHECKPOINT_FILE))?;
    manifest.details = json!({
        "selected_epoch": result.selected_epoch,
        "best_valid": result.best_valid,
        "test_id": result.metrics.test_id.value,
        "ood_mean": result.metrics.ood_mean,
    });
    manifest.finish(&a.out)?;
    log("result", &result.metrics);
    eprintln!(
        "{:?}/{:?} on {}: epoch {} selected (valid {:.4}), test ID {:.4}, OOD mean {}",
        cfg.model.method,
        cfg.model.backbone,
        ds.name,
        result.selected_epoch,
        result.best_valid,
        result.metrics.test_id.value,
        result.metrics.ood_mean.map_or("n/a".to_string(), |v| format!("{v:.4}"))
    );
    Ok(())
}

pub fn eval(a: EvalArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("eval", args);
    check_out(&a.out, a.force)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let params = ckpt.to_params()?;
    let ds = load_dataset(&a.data)?;
    if (params.input_dim, params.num_classes) != (ds.feature_dim(), ds.num_classes()) {
        return Err(CliError::Incompatible(format!(
            "checkpoint expects D={} C={}, dataset has D={} C={}",
            params.input_dim,
            params.num_classes,
            ds.feature_dim(),
            ds.num_classes()
        )));
    }
    let report = eval_report(&params, &ds, &ckpt.config.model, ckpt.config.seed)?;
    reset_out(&a.out)?;
    write_json(&a.out.join(METRICS_FILE), &report)?;
    manifest.config_path = Some(a.checkpoint.clone());
    manifest.config_sha256 = Some(sha256_file(&a.checkpoint)?);
    manifest.dataset_sha256 = Some(dataset_hash(&a.data)?);
    manifest.seeds = vec![ckpt.config.seed];
    manifest.finish(&a.out)?;
    for m in std::iter::once(&report.test_id).chain(&report.ood) {
        log("metric", m);
    }
    eprintln!(
        "test ID {} {:.4}; OOD {}",
        report.test_id.metric.name(),
        report.test_id.value,
        report
            .ood
            .iter()
            .map(|m| format!("{} {:.4}", m.split, m.value))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = GradcheckConfig {
        backbone: a.backbone.into(),
        branches: a.branches,
        layers: a.layers,
        seed: a.seed,
        fault: a.corrupt.then_some(GradFault::MatMulTRight),
        ..Default::default()
    };
    let report = trainer::gradcheck(&cfg)?;
    for g in &report.groups {
        log("gradcheck_group", g);
        eprintln!("{:<8} {:>3} matrices {:>5} scalars  max rel err {:.3e}", g.group, g.matrices, g.scalars, g.max_rel_error);
    }
    log(
        "gradcheck",
        json!({ "max_rel_error": report.max_rel_error, "tolerance": cfg.tolerance, "passed": report.passed }),
    );
    if report.passed {
        eprintln!("gradient check passed: max relative error {:.3e}", report.max_rel_error);
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error, cfg.tolerance
        )))
    }
}

pub fn sweep(a: SweepArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("sweep", args);
    let grid: SweepGrid = match &a.grid {
        Some(path) => {
            let (m, hash) = read_object(path)?;
            manifest.config_sha256 = Some(hash);
            manifest.config_path = Some(path.clone());
            serde_json::from_value(Value::Object(m)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => SweepGrid::default(),
    };
    let base: TrainConfig = match &a.config {
        Some(path) => {
            let (m, _) = read_object(path)?;
            serde_json::from_value(Value::Object(m)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    check_out(&a.out, a.force)?;
    let ds = load_dataset(&a.data)?;
    manifest.dataset_sha256 = Some(dataset_hash(&a.data)?);
    manifest.seeds = a.seeds.clone();
    let result = trainer::sweep(&ds, &base, &grid, &a.seeds, a.jobs)?;
    reset_out(&a.out)?;
    write_json(&a.out.join(SWEEP_FILE), &result)?;
    write_json(&a.out.join(BEST_CONFIG_FILE), &result.best_config)?;
    manifest.details = json!({
        "configs": result.configs.len(),
        "runs": result.runs.len(),
        "best_index": result.best_index,
        "best_mean_valid": result.mean_valid[result.best_index],
    });
    manifest.finish(&a.out)?;
    for r in &result.runs {
        log("sweep_run", r);
    }
    eprintln!(
        "{} configs x {} seeds; best config #{} with mean valid {:.4}",
        result.configs.len(),
        a.seeds.len(),
        result.best_index,
        result.mean_valid[result.best_index]
    );
    Ok(())
}

pub fn export_weights(a: ExportArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("export-weights", args);
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let params = ckpt.to_params()?;
    let layers = ckpt.config.model.layers;
    if a.layer == 0 || a.layer > layers {
        return Err(CliError::Usage(format!("--layer {} outside 1..={layers}", a.layer)));
    }
    if ckpt.config.model.method != Method::Canet {
        return Err(CliError::Incompatible("branch weights exist only for CaNet checkpoints".into()));
    }
    check_out(&a.out, a.force)?;
    reset_out(&a.out)?;
    let written = export_branch_weights(&params, a.layer, &a.out)?;
    manifest.config_path = Some(a.checkpoint.clone());
    manifest.config_sha256 = Some(sha256_file(&a.checkpoint)?);
    manifest.seeds = vec![ckpt.config.seed];
    manifest.finish(&a.out)?;
    for path in &written {
        log("weights", json!({ "path": path }));
    }
    eprintln!("wrote {} branch matrices of layer {} to {}", written.len(), a.layer, a.out.display());
    Ok(())
}
