use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::transfer::{default_metrics, evaluate_model, LangMetrics, TransferData};
use crate::config::RunConfig;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::MsmModel;
use crate::pretrain::{
    format_log_line, load_checkpoint, save_checkpoint, save_export, Pretrainer, LOG_HEADER,
};
use crate::retriever::{finetune_biencoder, Metric, TokenizedPair};

/// Environment variable overriding the runs directory.
pub const RUNS_DIR_ENV: &str = "MSM_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";

pub const CONFIG_FILE: &str = "config.conf";
pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const LOSS_LOG_FILE: &str = "loss.tsv";
pub const FINETUNE_LOG_FILE: &str = "finetune.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EXPORT_DIR: &str = "export";
pub const FINETUNED_DIR: &str = "finetuned";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
}

pub fn run_dir(root: &Path, experiment: &str, setting: &str, seed: u64) -> PathBuf {
    root.join(experiment).join(setting).join(seed.to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
}

/// Provenance of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub status: RunStatus,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            command: command.to_string(),
            config: RunConfig::keys()
                .into_iter()
                .map(|(k, _, _)| (k.to_string(), config.get(k).expect("listed key")))
                .collect(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now(),
            finished_unix: None,
            inputs,
            status: RunStatus::Running,
        })
    }

    pub fn finish(&mut self) {
        self.finished_unix = Some(now());
        self.status = RunStatus::Complete;
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the config snapshot, or checks it against an existing one so a
/// directory is never resumed under a different configuration.
pub fn claim_run_dir(dir: &Path, config: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(CONFIG_FILE);
    let snapshot = config.snapshot();
    if path.exists() {
        let old = RunConfig::from_file(&path)?;
        if old != *config {
            return Err(Error::invalid(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
        return Ok(());
    }
    write(&path, &snapshot)
}

/// Replaces `dir` with a checkpoint written next to it, so an interrupted
/// save never leaves a half-written checkpoint behind.
fn save_atomically(dir: &Path, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    save(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// Keeps the header and the first `steps` rows of a loss log.
fn truncate_log(path: &Path, steps: usize) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines().take(steps + 1) {
        out.push_str(line);
        out.push('\n');
    }
    if out.lines().count() != steps + 1 {
        return Err(Error::Checkpoint(format!(
            "{} has fewer rows than the checkpoint step {steps}",
            path.display()
        )));
    }
    Ok(out)
}

/// Pretrains into `dir`, resuming from `dir/checkpoint` when present.
/// Writes the loss log, a full checkpoint every `checkpoint_every` steps and
/// at the end, and the sentence-encoder export.
pub fn pretrain_in_dir(dir: &Path, config: &RunConfig, docs: &[Document], vocab_size: usize) -> Result<MsmModel> {
    let pcfg = config.pretrain_config(vocab_size);
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let log_path = dir.join(LOSS_LOG_FILE);
    let (mut trainer, mut log) = if ckpt_dir.join(crate::numerics::checkpoint::MANIFEST_FILE).exists() {
        let ckpt = load_checkpoint(&ckpt_dir)?;
        let log = truncate_log(&log_path, ckpt.step)?;
        (Pretrainer::resume(pcfg, docs, ckpt)?, log)
    } else {
        (Pretrainer::new(pcfg, docs)?, format!("{LOG_HEADER}\n"))
    };
    let every = config.checkpoint_every.max(1);
    while !trainer.finished() {
        let until = (trainer.step / every + 1) * every;
        trainer.run_until(until, |_, step, l| {
            log.push_str(&format_log_line(step, l));
            log.push('\n');
            Ok(())
        })?;
        write(&log_path, &log)?;
        let ckpt = trainer.checkpoint();
        save_atomically(&ckpt_dir, |d| save_checkpoint(d, &ckpt))?;
    }
    if !ckpt_dir.exists() {
        save_atomically(&ckpt_dir, |d| save_checkpoint(d, &trainer.checkpoint()))?;
        write(&log_path, &log)?;
    }
    save_atomically(&dir.join(EXPORT_DIR), |d| save_export(d, &trainer.model, trainer.step))?;
    Ok(trainer.model)
}

/// Fine-tunes into `dir`: writes the per-step losses and the tuned encoder.
pub fn finetune_in_dir(
    dir: &Path,
    config: &RunConfig,
    encoder: &MsmModel,
    pairs: &[TokenizedPair],
) -> Result<MsmModel> {
    let (tuned, losses) = finetune_biencoder(encoder, pairs, &config.finetune_config())?;
    let mut log = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{i}\t{l}\n"));
    }
    write(&dir.join(FINETUNE_LOG_FILE), &log)?;
    save_atomically(&dir.join(FINETUNED_DIR), |d| save_export(d, &tuned, losses.len()))?;
    Ok(tuned)
}

pub fn write_metrics(path: &Path, metrics: &LangMetrics) -> Result<()> {
    let mut out = String::from("lang\tmetric\tvalue\n");
    for (lang, vals) in metrics {
        for (m, v) in vals {
            out.push_str(&format!("{lang}\t{m}\t{v}\n"));
        }
    }
    write(path, &out)
}

pub fn read_metrics(path: &Path) -> Result<LangMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = LangMetrics::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |message: String| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        }
        let m: Metric = f[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let v: f64 = f[2].parse().map_err(|e| bad(format!("`{}`: {e}", f[2])))?;
        out.entry(f[0].to_string()).or_default().push((m, v));
    }
    Ok(out)
}

/// Full transfer run inside a run directory. A directory whose manifest is
/// complete is not recomputed; a partial one resumes from its last
/// pretraining checkpoint.
pub fn transfer_in_dir(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    data: &TransferData,
) -> Result<LangMetrics> {
    claim_run_dir(dir, config)?;
    let metrics_path = dir.join(METRICS_FILE);
    if let Ok(m) = RunManifest::load(dir) {
        if m.status == RunStatus::Complete && metrics_path.exists() {
            return read_metrics(&metrics_path);
        }
    }
    let mut manifest = RunManifest::start(command, config, &[&dir.join(CONFIG_FILE)])?;
    manifest.save(dir)?;
    let model = pretrain_in_dir(dir, config, &data.train_docs, data.vocab.len())?;
    let tuned = finetune_in_dir(dir, config, &model, &data.ft_pairs)?;
    let metrics = evaluate_model(&tuned, data, &default_metrics(config.eval_k))?;
    write_metrics(&metrics_path, &metrics)?;
    manifest.finish();
    manifest.save(dir)?;
    Ok(metrics)
}
