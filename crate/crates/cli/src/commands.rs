//! Command implementations. Every artifact directory gets a `run_config.json`
//! snapshot; binary artifacts and reports also embed the configuration.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use vocalid_core::audio::{read_wav, write_wav_16bit, LoadOptions};
use vocalid_core::checkpoint;
use vocalid_core::embed::{embed_clips, EmbeddingFile};
use vocalid_core::metrics::{self, EmbeddingTable, MetricsError};
use vocalid_core::pairs::{load_clips, trim_silence, DatasetManifest, LoadedClip, ManifestEntry, Split};
use vocalid_core::rng;
use vocalid_core::train::{train_loop, TrainError, TrainOutcome};

use crate::config::RunConfig;
use crate::error::{data, CliError};
use crate::EvalTask;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PREPARE_ERRORS_FILE: &str = "prepare_errors.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_json()).map_err(data)
}

fn load_options(cfg: &RunConfig) -> LoadOptions {
    LoadOptions {
        downmix: cfg.prepare.downmix,
        resample: cfg.prepare.resample,
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(data)?;
    let manifest = crate::synth::synthesize(&cfg.synth, cfg.seed, out)?;
    write_snapshot(cfg, out)?;
    log::info!("wrote {} clips to {}", manifest.entries.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct PrepareFailure<'a> {
    path: &'a str,
    error: String,
}

/// Output location of a prepared clip: relative paths are kept, absolute
/// ones are flattened to their file name.
fn prepared_path(entry: &ManifestEntry) -> String {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        entry.path.clone()
    }
}

pub fn prepare(cfg: &RunConfig, manifest_in: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(manifest_in).map_err(data)?;
    if manifest.entries.is_empty() {
        return Err(CliError::Data(format!("manifest {} is empty", manifest_in.display())));
    }
    fs::create_dir_all(out).map_err(data)?;
    let opts = load_options(cfg);
    let mut kept = Vec::new();
    let mut failures = String::new();
    for entry in &manifest.entries {
        let rel = prepared_path(entry);
        let target = out.join(&rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(data)?;
        }
        let result = read_wav(&manifest.resolve(entry), opts).and_then(|clip| write_wav_16bit(&target, &trim_silence(&clip)));
        match result {
            Ok(()) => kept.push(ManifestEntry {
                path: rel,
                ..entry.clone()
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.path);
                let line = PrepareFailure {
                    path: &entry.path,
                    error: e.to_string(),
                };
                failures.push_str(&serde_json::to_string(&line).expect("failure record serializes"));
                failures.push('\n');
            }
        }
    }
    let failed = manifest.entries.len() - kept.len();
    let out_manifest = DatasetManifest::new(kept, out).map_err(data)?;
    out_manifest.save(&out.join(MANIFEST_FILE)).map_err(data)?;
    write_snapshot(cfg, out)?;
    if failed > 0 {
        fs::write(out.join(PREPARE_ERRORS_FILE), failures).map_err(data)?;
        return Err(CliError::Partial(format!(
            "{failed} of {} clips could not be prepared; see {}",
            manifest.entries.len(),
            out.join(PREPARE_ERRORS_FILE).display()
        )));
    }
    Ok(())
}

fn load_split(manifest: &DatasetManifest, split: Option<Split>, cfg: &RunConfig) -> Result<Vec<LoadedClip>, CliError> {
    let (clips, failed) = load_clips(manifest, split, load_options(cfg));
    if let Some((path, e)) = failed.first() {
        return Err(CliError::Data(format!(
            "{} clips could not be read, first {path}: {e}",
            failed.len()
        )));
    }
    Ok(clips)
}

pub fn train(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<TrainOutcome, CliError> {
    let manifest = DatasetManifest::load(manifest_path).map_err(data)?;
    let train = load_split(&manifest, Some(Split::Train), cfg)?;
    let val = load_split(&manifest, Some(Split::Val), cfg)?;
    fs::create_dir_all(out).map_err(data)?;
    write_snapshot(cfg, out)?;
    let log_file = fs::File::create(out.join(METRICS_FILE)).map_err(data)?;
    let mut log = BufWriter::new(log_file);
    let result = train_loop(&cfg.train, &train, &val, Some(&mut log));
    log.flush().map_err(data)?;
    let mut outcome = match result {
        Ok(o) => o,
        Err(TrainError::NonFinite(diag)) => {
            let text = serde_json::to_string_pretty(&json!({ "config": cfg, "diagnostic": diag }))
                .expect("diagnostic serializes");
            fs::write(out.join(DIAGNOSTIC_FILE), text).map_err(data)?;
            return Err(CliError::Numerical(format!(
                "non-finite loss at step {}; see {}",
                diag.step,
                out.join(DIAGNOSTIC_FILE).display()
            )));
        }
        Err(TrainError::Config(m)) => return Err(CliError::Config(m)),
        Err(e) => return Err(CliError::Data(e.to_string())),
    };
    outcome.best.provenance = cfg.to_json();
    checkpoint::save(&outcome.best, &out.join(CHECKPOINT_FILE)).map_err(data)?;
    Ok(outcome)
}

pub fn embed(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    manifest_path: &Path,
    out: &Path,
    split: Option<Split>,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let ck = checkpoint::load(checkpoint_path).map_err(data)?;
    let manifest = DatasetManifest::load(manifest_path).map_err(data)?;
    let clips = load_split(&manifest, split, cfg)?;
    if clips.is_empty() {
        return Err(CliError::Data("no clips to embed".into()));
    }
    let (table, skipped) = embed_clips(&ck.online, &clips, cfg.embed_segment_seconds).map_err(data)?;
    assert_eq!(table.dim, ck.online.spec.encoder.embedding_dim(), "embedding width disagrees with checkpoint");
    if !skipped.is_empty() {
        log::warn!("{} clips shorter than one segment were skipped", skipped.len());
    }
    let split_of: std::collections::HashMap<&str, Split> = clips.iter().map(|c| (c.id.as_str(), c.split)).collect();
    let splits = table.rows.iter().map(|r| split_of.get(r.clip_id.as_str()).copied()).collect();

    let mut run = cfg.clone();
    run.train = ck.config.clone();
    let provenance = json!({
        "run": run,
        "checkpoint": {
            "epoch": ck.epoch,
            "step": ck.step,
            "training_run": serde_json::from_str::<serde_json::Value>(&ck.provenance).unwrap_or(serde_json::Value::Null),
        },
        "skipped": skipped,
    });
    let file = EmbeddingFile {
        table,
        config_json: provenance.to_string(),
        splits,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(data)?;
    }
    file.save(out).map_err(data)?;
    if let Some(csv) = csv {
        file.write_csv(csv).map_err(data)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub pairs: usize,
    pub same_fraction: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub mnr: f64,
    pub mnr_queries: usize,
    pub mnr_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSection {
    pub folds: usize,
    pub classes: usize,
    pub chance: f64,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub embeddings: PathBuf,
    pub embeddings_config: serde_json::Value,
    pub split: Option<Split>,
    pub rows: usize,
    pub singers: usize,
    pub similarity: Option<SimilarityReport>,
    pub probe: Option<ProbeSection>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24}{:>12}\n", "metric", "value");
        s.push_str(&format!("{:<24}{:>12}\n", "rows", self.rows));
        s.push_str(&format!("{:<24}{:>12}\n", "singers", self.singers));
        if let Some(sim) = &self.similarity {
            s.push_str(&format!("{:<24}{:>11.2}%\n", "EER", 100.0 * sim.eer));
            s.push_str(&format!("{:<24}{:>12.4}\n", "MNR", sim.mnr));
            s.push_str(&format!("{:<24}{:>12}\n", "trials", sim.pairs));
        }
        if let Some(p) = &self.probe {
            s.push_str(&format!("{:<24}{:>11.2}%\n", "probe accuracy", 100.0 * p.mean_accuracy));
            s.push_str(&format!("{:<24}{:>11.2}%\n", "chance", 100.0 * p.chance));
            s.push_str(&format!("{:<24}{:>12}\n", "folds", p.folds));
        }
        s
    }
}

fn metrics_err(e: MetricsError) -> CliError {
    match e {
        MetricsError::InvalidParameter(m) => CliError::Config(m),
        other => CliError::Data(other.to_string()),
    }
}

pub fn eval(cfg: &RunConfig, path: &Path, task: EvalTask, split: Option<Split>) -> Result<EvalReport, CliError> {
    let file = EmbeddingFile::load(path).map_err(data)?;
    let rows = match split {
        None => file.table.rows.clone(),
        Some(s) => file
            .table
            .rows
            .iter()
            .zip(&file.splits)
            .filter(|(_, sp)| **sp == Some(s))
            .map(|(r, _)| r.clone())
            .collect(),
    };
    let table = EmbeddingTable::new(file.table.dim, rows);
    if table.is_empty() {
        return Err(CliError::Data("no embedding rows to evaluate".into()));
    }
    if !table.has_labels() {
        return Err(metrics_err(MetricsError::MissingLabels));
    }
    let singers = table.by_singer().map_err(metrics_err)?.len();
    let e = &cfg.eval;

    let similarity = if task != EvalTask::Probe {
        let trials = metrics::sample_trials(&table, e.pairs, &mut rng::stream(cfg.seed, "eval-trials", &[]))
            .map_err(metrics_err)?;
        let eer = metrics::eer(&trials).map_err(metrics_err)?;
        let mnr = metrics::mnr(
            &table,
            e.mnr_queries,
            e.mnr_candidates,
            &mut rng::stream(cfg.seed, "eval-mnr", &[]),
        )
        .map_err(metrics_err)?;
        Some(SimilarityReport {
            pairs: trials.trials.len(),
            same_fraction: trials.same_fraction(),
            eer: eer.eer,
            eer_threshold: eer.threshold,
            mnr,
            mnr_queries: e.mnr_queries,
            mnr_candidates: e.mnr_candidates,
        })
    } else {
        None
    };

    let probe = if task != EvalTask::Similarity {
        let r = metrics::probe_kfold(&table, e.folds, &e.probe, &mut rng::stream(cfg.seed, "eval-probe", &[]))
            .map_err(metrics_err)?;
        Some(ProbeSection {
            folds: e.folds,
            classes: r.classes,
            chance: 1.0 / r.classes as f64,
            fold_accuracies: r.fold_accuracies,
            mean_accuracy: r.mean_accuracy,
        })
    } else {
        None
    };

    Ok(EvalReport {
        config: cfg.clone(),
        embeddings: path.to_path_buf(),
        embeddings_config: serde_json::from_str(&file.config_json).unwrap_or(serde_json::Value::Null),
        split,
        rows: table.len(),
        singers,
        similarity,
        probe,
    })
}
