use std::fs;
use std::path::{Path, PathBuf};

use asdformer_core::data::{load_dataset, save_dataset, stratified_split, synth_generate, ConnectomeDataset};
use asdformer_core::gradcheck::{self, GradcheckOptions};
use asdformer_core::interpret::{build_report, emit_report, InterpretOptions};
use asdformer_core::model::{load_model, save_model, Decoder, Model, ModelConfig};
use asdformer_core::numerics::Fault;
use asdformer_core::training::{self, evaluate, Metrics, ThresholdRule};
use asdformer_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::{Resolved, RunConfig, Subset};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn emit(value: impl Serialize) {
    println!("{}", serde_json::to_string(&value).expect("report serialises"));
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn check_compatible(model: &ModelConfig, ds: &ConnectomeDataset) -> Result<()> {
    if model.n_rois != ds.n_rois {
        return Err(Error::Compatibility(format!(
            "checkpoint expects {} ROIs, dataset has {}",
            model.n_rois, ds.n_rois
        ))
        .into());
    }
    Ok(())
}

/// `model.n_rois` follows the dataset unless the config file fixed it.
fn fit_model_to(r: &mut Resolved, ds: &ConnectomeDataset) -> Result<()> {
    if !r.explicit_n_rois {
        r.config.model.n_rois = ds.n_rois;
    }
    check_compatible(&r.config.model, ds)?;
    r.config.model.validate()?;
    r.config.train.validate(&r.config.model)?;
    Ok(())
}

fn validate_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CliError::Usage(format!(
            "split fractions {f:?} must lie in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

pub fn synth(mut c: RunConfig) -> Result<()> {
    c.propagate_seed();
    let out = require(&c.paths.out, "--out")?;
    c.synth.validate()?;
    let ds = synth_generate(&c.synth)?;
    let manifest = save_dataset(&ds, out)?;
    let [hc, asd] = ds.class_counts();
    emit(json!({
        "command": "synth",
        "manifest": manifest,
        "subjects": ds.len(),
        "n_rois": ds.n_rois,
        "hc": hc,
        "asd": asd,
    }));
    Ok(())
}

pub fn train(mut r: Resolved) -> Result<()> {
    r.config.propagate_seed();
    let dataset = manifest_path(require(&r.config.paths.dataset, "--dataset")?);
    let out = require(&r.config.paths.out, "--out")?.to_path_buf();
    validate_fractions(r.config.split.fractions)?;
    r.config.train.validate(&r.config.model)?;
    let ds = load_dataset(&dataset)?;
    fit_model_to(&mut r, &ds)?;
    let c = &r.config;
    let split = stratified_split(&ds, c.split.fractions, c.split.seed)?;
    let initial = Model::init(c.model.clone())?;
    let outcome = training::train(&initial, &split.train, &split.val, &c.train)?;

    create_dir(&out)?;
    let checkpoint = c
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoint.json"));
    save_model(&outcome.model, outcome.rng_state.clone(), &checkpoint)?;
    training::write_history(&outcome.history, &out.join("history.csv"))?;
    write(&out.join("config.json"), &c.to_json())?;

    for record in &outcome.history {
        emit(json!({ "event": "epoch", "record": record }));
    }
    let val = evaluate(&outcome.model, &split.val, ThresholdRule::Argmax)?;
    let test = if split.test.has_both_classes() {
        Some(evaluate(&outcome.model, &split.test, ThresholdRule::Argmax)?)
    } else {
        None
    };
    emit(json!({
        "event": "result",
        "best_epoch": outcome.best_epoch,
        "val": val,
        "test": test,
        "checkpoint": checkpoint,
    }));
    Ok(())
}

fn subset(c: &RunConfig, ds: ConnectomeDataset) -> Result<ConnectomeDataset> {
    if c.eval.subset == Subset::All {
        return Ok(ds);
    }
    let split = stratified_split(&ds, c.split.fractions, c.split.seed)?;
    Ok(match c.eval.subset {
        Subset::Train => split.train,
        Subset::Val => split.val,
        _ => split.test,
    })
}

pub fn eval(mut c: RunConfig) -> Result<()> {
    c.propagate_seed();
    let checkpoint = require(&c.paths.checkpoint, "--checkpoint")?.to_path_buf();
    let dataset = manifest_path(require(&c.paths.dataset, "--dataset")?);
    validate_fractions(c.split.fractions)?;
    let rule = match c.eval.threshold {
        Some(t) if (0.0..=1.0).contains(&t) => ThresholdRule::Score(t),
        Some(t) => return Err(CliError::Usage(format!("threshold {t} is not a probability"))),
        None => ThresholdRule::Argmax,
    };
    let model = load_model(&checkpoint)?;
    let ds = load_dataset(&dataset)?;
    check_compatible(&model.config, &ds)?;
    let ds = subset(&c, ds)?;
    let m: Metrics = evaluate(&model, &ds, rule)?;
    emit(json!({
        "command": "eval",
        "subset": c.eval.subset,
        "subjects": ds.len(),
        "auroc": m.auroc,
        "accuracy": m.accuracy,
        "sensitivity": m.sensitivity,
        "specificity": m.specificity,
        "confusion": m.confusion,
    }));
    Ok(())
}

pub fn interpret(mut c: RunConfig) -> Result<()> {
    c.propagate_seed();
    let checkpoint = require(&c.paths.checkpoint, "--checkpoint")?.to_path_buf();
    let dataset = manifest_path(require(&c.paths.dataset, "--dataset")?);
    let out = require(&c.paths.out, "--out")?.to_path_buf();
    let model = load_model(&checkpoint)?;
    if model.config.decoder != Decoder::Moe {
        return Err(Error::Compatibility("interpretation needs a mixture-of-experts checkpoint".into()).into());
    }
    if let Some(layer) = c.interpret.layer {
        if layer >= model.config.encoder_layers {
            return Err(CliError::Usage(format!(
                "layer {layer} out of range ({} layers)",
                model.config.encoder_layers
            )));
        }
    }
    let ds = load_dataset(&dataset)?;
    check_compatible(&model.config, &ds)?;
    let indices: Vec<usize> = if c.interpret.subjects.is_empty() {
        (0..ds.len()).collect()
    } else {
        c.interpret
            .subjects
            .iter()
            .map(|id| {
                ds.subjects
                    .iter()
                    .position(|s| &s.id == id)
                    .ok_or_else(|| Error::Argument(format!("unknown subject id {id:?}")))
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let options = InterpretOptions {
        layer: c.interpret.layer,
        head_mode: c.interpret.head_mode,
    };

    create_dir(&out)?;
    for i in indices {
        let subject = &ds.subjects[i];
        let (_, trace) = model.forward(&ds.batch(&[i])?)?;
        let report = build_report(&trace, 0, &subject.id, &ds.community_map, options)?;
        let files = emit_report(&report, c.interpret.format, &out)?;
        emit(json!({
            "subject_id": subject.id,
            "label": subject.label,
            "prediction": report.prediction,
            "gate_probs": report.gate_probs,
            "files": files,
        }));
    }
    Ok(())
}

const DESIGNS: [&str; 3] = ["cls", "pooling_classifier", "asdformer"];

fn design_config(base: &ModelConfig, design: &str, seed: u64) -> ModelConfig {
    let mut m = ModelConfig {
        encoder_layers: 1,
        seed,
        ..base.clone()
    };
    match design {
        "cls" => m.decoder = Decoder::Cls,
        "pooling_classifier" => {
            m.decoder = Decoder::Moe;
            m.num_experts = 1;
            m.k_per_expert.truncate(1);
        }
        _ => m.decoder = Decoder::Moe,
    }
    m
}

#[derive(Serialize)]
struct AblationRow {
    design: &'static str,
    seed: u64,
    auroc: f64,
    accuracy: f64,
    sensitivity: f64,
    specificity: f64,
}

pub fn ablate(mut r: Resolved) -> Result<()> {
    r.config.propagate_seed();
    let dataset = manifest_path(require(&r.config.paths.dataset, "--dataset")?);
    let out = require(&r.config.paths.out, "--out")?.to_path_buf();
    validate_fractions(r.config.split.fractions)?;
    if r.config.ablate.seeds == 0 {
        return Err(CliError::Usage("ablate needs at least one seed".into()));
    }
    let ds = load_dataset(&dataset)?;
    fit_model_to(&mut r, &ds)?;
    let c = &r.config;
    let base_seed = c.seed.unwrap_or(0);
    for design in DESIGNS {
        let m = design_config(&c.model, design, base_seed);
        m.validate()?;
        c.train.validate(&m)?;
    }

    let mut rows = Vec::new();
    for seed in (0..c.ablate.seeds as u64).map(|s| base_seed + s) {
        let split = stratified_split(&ds, c.split.fractions, seed)?;
        for design in DESIGNS {
            let model = Model::init(design_config(&c.model, design, seed))?;
            let train_cfg = training::TrainConfig {
                seed,
                ..c.train.clone()
            };
            let outcome = training::train(&model, &split.train, &split.val, &train_cfg)?;
            let m = evaluate(&outcome.model, &split.test, ThresholdRule::Argmax)?;
            let row = AblationRow {
                design,
                seed,
                auroc: m.auroc,
                accuracy: m.accuracy,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
            };
            emit(&row);
            rows.push(row);
        }
    }

    create_dir(&out)?;
    let path = out.join("ablation.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;

    let means: serde_json::Map<String, serde_json::Value> = DESIGNS
        .iter()
        .map(|d| {
            let aurocs: Vec<f64> = rows.iter().filter(|r| r.design == *d).map(|r| r.auroc).collect();
            (d.to_string(), json!(aurocs.iter().sum::<f64>() / aurocs.len() as f64))
        })
        .collect();
    emit(json!({ "event": "summary", "mean_auroc": means, "table": path }));
    Ok(())
}

pub fn gradcheck(mut c: RunConfig, inject_fault: bool) -> Result<()> {
    c.propagate_seed();
    let g = &c.gradcheck;
    g.model.validate()?;
    if !(g.step > 0.0 && g.tolerance > 0.0 && g.floor > 0.0) || g.batch == 0 {
        return Err(CliError::Usage(
            "step, tolerance, floor and batch must be positive".into(),
        ));
    }
    let options = GradcheckOptions {
        model: g.model.clone(),
        batch: g.batch,
        seed: g.seed,
        step: g.step,
        tolerance: g.tolerance,
        floor: g.floor,
        fault: inject_fault.then_some(Fault::GeluBackward),
    };
    let report = gradcheck::run(&options)?;
    for group in &report.groups {
        emit(json!({
            "group": group.group,
            "parameters": group.parameters,
            "max_relative_error": group.max_relative_error,
            "worst": group.worst,
            "passed": group.max_relative_error < report.tolerance,
        }));
    }
    let failing: Vec<&str> = report.failing().iter().map(|g| g.group.as_str()).collect();
    emit(json!({
        "passed": report.passed(),
        "tolerance": report.tolerance,
        "max_relative_error": report.max_relative_error(),
        "failing": failing,
    }));
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed for {}",
            failing.join(", ")
        )))
    }
}
