//! Command implementations.

use std::path::Path;

use voiceface_core::checks::{bound_suite, grad_suite, hinge_suite, SuiteReport};
use voiceface_core::dataio::{read_dataset, write_dataset, DataIoError};
use voiceface_core::encoder::{read_checkpoint, write_checkpoint, EncoderError};
use voiceface_core::eval::{embed_split, evaluate_table, export_embeddings, write_curve_csvs};
use voiceface_core::par::ExecPolicy;
use voiceface_core::rng::Rng;
use voiceface_core::synth::{generate, SynthError};
use voiceface_core::train::{train as run_training, TrainError, WeightSidecar};
use voiceface_core::types::{validate_dataset, Split};

use crate::config::{env_seed, load_config, Overrides};
use crate::manifest::{unix_now, RunManifest};
use crate::CliError;

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataIoError> for CliError {
    fn from(e: DataIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_)
            | TrainError::InvalidDataset(_)
            | TrainError::BatchTooLarge { .. } => CliError::Config(e.to_string()),
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::DimMismatch { .. } => CliError::Mismatch(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

fn config_snapshot<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))
}

pub fn synth(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let mut file_config = load_config(config_path)?;
    if let Some(seed) = env_seed()? {
        file_config.synth.seed = seed;
    }
    let ds = generate(&file_config.synth)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_dataset(out, &ds)?;
    let mut manifest = RunManifest::new("synth", file_config.synth.seed, config_snapshot(&file_config.synth));
    manifest.input("config", config_path);
    manifest.output("dataset", out);
    manifest.note(format!(
        "identities {} latent_dim {} obs_dim {} samples/identity {}",
        ds.header.identities,
        ds.header.latent_dim,
        ds.header.obs_dim,
        file_config.synth.samples_per_identity
    ));
    let manifest_path = out.with_extension("manifest.json");
    manifest.write(&manifest_path)?;
    println!(
        "dataset written: {} ({} identities, {} face + {} voice samples)",
        out.display(),
        ds.header.identities,
        ds.face_samples.len(),
        ds.voice_samples.len()
    );
    Ok(())
}

pub fn train(
    config_path: &Path,
    dataset_path: &Path,
    out_dir: &Path,
    run_name: Option<&str>,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let mut file_config = load_config(config_path)?;
    overrides.apply(&mut file_config)?;
    let train_config = file_config.train.clone();

    let ds = read_dataset(dataset_path)?;
    let report = validate_dataset(&ds);
    if !report.is_empty() {
        return Err(CliError::Config(format!("dataset invalid: {report}")));
    }

    let run_dir = out_dir.join(
        run_name
            .map(str::to_string)
            .unwrap_or_else(|| format!("run-{}-s{}", unix_now(), train_config.seed)),
    );
    ensure_dir(&run_dir)?;

    let model = run_training(&train_config, &ds)?;

    let best_path = run_dir.join("checkpoint_best.vfck");
    write_checkpoint(&best_path, &model.params, model.best_iteration as u64, train_config.seed)?;
    let final_path = run_dir.join("checkpoint_final.vfck");
    write_checkpoint(
        &final_path,
        &model.final_params,
        train_config.max_iters as u64,
        train_config.seed,
    )?;
    let metrics_path = run_dir.join("metrics.jsonl");
    voiceface_core::train::write_jsonl(&metrics_path, &model.trace)
        .map_err(|e| CliError::Io(format!("writing metrics: {e}")))?;
    let weights_path = run_dir.join("weights.json");
    let sidecar = WeightSidecar::from_model(&model);
    std::fs::write(
        &weights_path,
        serde_json::to_string_pretty(&sidecar).unwrap() + "\n",
    )
    .map_err(|e| CliError::Io(format!("writing weights: {e}")))?;

    let mut manifest = RunManifest::new("train", train_config.seed, config_snapshot(&file_config));
    manifest.input("config", config_path);
    manifest.input("dataset", dataset_path);
    manifest.output("checkpoint_best", &best_path);
    manifest.output("checkpoint_final", &final_path);
    manifest.output("metrics", &metrics_path);
    manifest.output("weights", &weights_path);
    if train_config.disable_reweighting {
        manifest.note("stage 2 skipped: re-weighting disabled, all identity weights one");
    } else {
        let history_path = run_dir.join("weight_history.jsonl");
        voiceface_core::train::write_jsonl(&history_path, &model.weight_history)
            .map_err(|e| CliError::Io(format!("writing weight history: {e}")))?;
        manifest.output("weight_history", &history_path);
        manifest.note(format!(
            "stage 2: {} triggered updates, stop threshold {} of {} identities",
            model.weight_history.len(),
            voiceface_core::reweight::ceil_count(train_config.keep_ratio, model.identity_of_class.len()),
            model.identity_of_class.len()
        ));
    }
    manifest.note(format!(
        "stage boundaries: warm-up ended at t={}, weight learning ended at t={}",
        model.stage1_end, model.stage2_end
    ));
    manifest.note(format!(
        "best validation accuracy {:.4} at stage-3 iteration {}",
        model.best_validation_accuracy, model.best_iteration
    ));
    manifest.note(format!("excluded identities: {:?}", model.excluded_identities));
    manifest.write(&run_dir.join("manifest.json"))?;
    println!(
        "run complete: {} (best val acc {:.4} at t={}, {} excluded identities)",
        run_dir.display(),
        model.best_validation_accuracy,
        model.best_iteration,
        model.excluded_identities.len()
    );
    Ok(())
}

pub fn eval(
    checkpoint_path: &Path,
    dataset_path: &Path,
    split: &str,
    out_dir: &Path,
    seed: Option<u64>,
    config_path: Option<&Path>,
    export: bool,
) -> Result<(), CliError> {
    let split = Split::parse(split)
        .ok_or_else(|| CliError::Config(format!("unknown split {split:?} (train|validation|test)")))?;
    let checkpoint = read_checkpoint(checkpoint_path)?;
    let ds = read_dataset(dataset_path)?;
    let dims = checkpoint.params.dims();
    if dims.obs_dim != ds.header.obs_dim {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects obs_dim {}, dataset has {}",
            dims.obs_dim, ds.header.obs_dim
        )));
    }
    let mut eval_config = voiceface_core::eval::EvalConfig::default();
    if let Some(cfg_path) = config_path {
        let file_config = load_config(cfg_path)?;
        eval_config = file_config.eval;
        let t = &file_config.train;
        if t.hidden_dim != dims.hidden_dim || t.embed_dim != dims.embed_dim {
            return Err(CliError::Mismatch(format!(
                "checkpoint dims (hidden {}, embed {}) do not match config (hidden {}, embed {})",
                dims.hidden_dim, dims.embed_dim, t.hidden_dim, t.embed_dim
            )));
        }
    }
    let mut seed = seed.unwrap_or(ds.header.seed);
    if let Some(env) = env_seed()? {
        seed = env;
    }
    ensure_dir(out_dir)?;

    let table = embed_split(&checkpoint.params, &ds, split, ExecPolicy::Auto)
        .map_err(|e| CliError::Io(format!("embedding split: {e}")))?;
    let rng = Rng::new(seed).stream("eval");
    let report = evaluate_table(&table, &eval_config, &rng, ExecPolicy::Auto)
        .map_err(|e| CliError::Io(format!("evaluating: {e}")))?;

    let report_path = out_dir.join("metrics_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).unwrap() + "\n",
    )
    .map_err(|e| CliError::Io(format!("writing report: {e}")))?;
    let curves = write_curve_csvs(&report, out_dir).map_err(|e| CliError::Io(e.to_string()))?;

    let mut manifest = RunManifest::new("eval", seed, config_snapshot(&eval_config));
    manifest.input("checkpoint", checkpoint_path);
    manifest.input("dataset", dataset_path);
    manifest.output("metrics_report", &report_path);
    for c in &curves {
        let name = c.file_stem().unwrap().to_string_lossy().to_string();
        manifest.output(&name, c);
    }
    if export {
        let emb_path = out_dir.join("embeddings.csv");
        let rows = export_embeddings(&table, &emb_path).map_err(|e| CliError::Io(e.to_string()))?;
        manifest.output("embeddings", &emb_path);
        manifest.note(format!("exported {rows} embedding rows"));
    }
    manifest.note(format!("split {} ({:?})", split.as_str(), table.face.rows()));
    manifest.write(&out_dir.join("manifest.json"))?;

    // short human-readable summary
    for cell in &report.matching {
        if cell.n == 2 {
            if let Some(acc) = cell.accuracy {
                println!(
                    "1:2 {} ({}): ACC {:.4} over {} queries",
                    cell.direction.short(),
                    cell.restriction.short(),
                    acc,
                    cell.queries
                );
            }
        }
    }
    for cell in &report.verification {
        if let Some(auc) = cell.auc {
            println!(
                "verification {} ({}): AUC {:.4} over {} pairs",
                cell.direction.short(),
                cell.restriction.short(),
                auc,
                cell.pairs
            );
        }
    }
    for cell in &report.retrieval {
        if let Some(map) = cell.map {
            println!(
                "retrieval {} ({}): mAP {:.4} over {} queries",
                cell.direction.short(),
                cell.restriction.short(),
                map,
                cell.queries
            );
        }
    }
    println!("report written: {}", report_path.display());
    Ok(())
}

fn finish_check(report: SuiteReport, report_path: Option<&Path>) -> Result<(), CliError> {
    println!("{}", report.summary());
    for d in report.failure_details.iter().take(10) {
        println!("  {d}");
    }
    if let Some(path) = report_path {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                ensure_dir(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap() + "\n")
            .map_err(|e| CliError::Io(format!("writing report: {e}")))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "{}: {} of {} checks failed (replay with the printed instance indices)",
            report.name, report.failures, report.checks
        )))
    }
}

pub fn check_grad(seed: u64, trials: usize, coords: usize, report: Option<&Path>) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }
    finish_check(grad_suite(seed, trials, coords, ExecPolicy::Auto), report)
}

pub fn check_bound(seed: u64, trials: usize, report: Option<&Path>) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }
    finish_check(bound_suite(seed, trials, ExecPolicy::Auto), report)
}

pub fn check_hinge(seed: u64, trials: usize, report: Option<&Path>) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }
    finish_check(hinge_suite(seed, trials, ExecPolicy::Auto), report)
}
