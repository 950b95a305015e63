//! The operations behind the `vffn` subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accounting::{budget_table, BudgetReport};
use crate::chart::render_svg;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, generate, read_corpus, write_corpus, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::metrics::{read_metrics, MetricsWriter};
use crate::model::Model;
use crate::train::{load_params, Trainer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
/// Written when training aborts on a non-finite loss.
pub const FAILURE_CHECKPOINT: &str = "nonfinite.ckpt";

/// Loads the configured corpus (or generates the synthetic one) and splits
/// it into train and eval streams.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (bytes, labels) = match &cfg.corpus {
        Some(path) => read_corpus(path)?,
        None => {
            let c = generate(&cfg.synthetic())?;
            (c.bytes, Some(c.labels))
        }
    };
    if let Some(&b) = bytes.iter().find(|&&b| b as usize >= cfg.vocab) {
        return Err(Error::Data(format!("byte {b} outside vocabulary of {}", cfg.vocab)));
    }
    Dataset::split(&bytes, labels.as_deref(), cfg.eval_frac, cfg.seq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub step10_loss: Option<f64>,
    /// Mean loss over the last ten steps.
    pub final_loss: f64,
    /// Executed loop count per layer on the last step.
    pub mean_loops: Vec<f64>,
    pub mean_expected_loops: Vec<f64>,
    /// Extremes of the fusion coefficient over every token of every step
    /// run by this process.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn step_checkpoint(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Trains from scratch, or from `resume`, writing metrics, checkpoints and
/// a summary into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let metrics_path = dir.join(METRICS_FILE);

    let (mut trainer, mut writer) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let t = Trainer::<f64>::resume(cfg.model(), cfg.train(), &ckpt)?;
            let w = MetricsWriter::resume(&metrics_path, t.step())?;
            (t, w)
        }
        None => (
            Trainer::new(cfg.model(), cfg.train())?,
            MetricsWriter::create(&metrics_path)?,
        ),
    };

    let mut recent = Vec::new();
    let mut step10 = None;
    let (mut lambda_min, mut lambda_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut last = None;
    while !trainer.is_done() {
        let batch = trainer.next_batch(&ds.train);
        let started = Instant::now();
        let mut m = match trainer.train_step(&batch) {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => {
                trainer.checkpoint().save(&dir.join(FAILURE_CHECKPOINT))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if cfg.log_throughput {
            m.tokens_per_sec = Some(batch.len() as f64 / started.elapsed().as_secs_f64().max(1e-9));
        }
        writer.write(&m)?;
        if m.step == 10 {
            step10 = Some(m.loss);
        }
        lambda_min = lambda_min.min(m.lambda_min);
        lambda_max = lambda_max.max(m.lambda_max);
        recent.push(m.loss);
        if recent.len() > 10 {
            recent.remove(0);
        }
        if cfg.checkpoint_every > 0 && trainer.step() % cfg.checkpoint_every == 0 && !trainer.is_done() {
            trainer.checkpoint().save(&step_checkpoint(dir, trainer.step()))?;
        }
        last = Some(m);
    }
    let checkpoint = dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&checkpoint)?;

    if step10.is_none() {
        step10 = read_metrics(&metrics_path)?.iter().find(|r| r.step == 10).map(|r| r.loss);
    }
    let summary = TrainSummary {
        steps: trainer.step(),
        step10_loss: step10,
        final_loss: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
        mean_loops: last.as_ref().map(|m| m.mean_loops.clone()).unwrap_or_default(),
        mean_expected_loops: last.map(|m| m.mean_expected_loops).unwrap_or_default(),
        lambda_min,
        lambda_max,
        checkpoint,
        metrics: metrics_path,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

/// Inference-mode evaluation on the held-out split. Without a checkpoint
/// the freshly initialized model for `cfg.seed` is evaluated.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    if ds.eval.is_empty() {
        return Err(Error::config("eval_frac", "no held-out split to evaluate"));
    }
    let mut model = Model::<f64>::new(cfg.model(), cfg.seed)?;
    if let Some(path) = checkpoint {
        load_params(&mut model, &Checkpoint::load(path)?)?;
    }
    evaluate(&model, &ds.eval, ds.eval_labels.as_deref(), &cfg.eval_options())
}

/// Budget table for the configured architecture; `runtime` supplies
/// measured `(n_mean, p_frac)` for the last row.
pub fn cmd_account(cfg: &RunConfig, runtime: Option<(f64, f64)>) -> Result<Vec<BudgetReport>> {
    cfg.model().validate()?;
    budget_table(&cfg.arch(), runtime)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub path: PathBuf,
    pub labels: PathBuf,
    pub bytes: usize,
    pub hard_frac: f64,
    /// Previous-byte predictor accuracy on easy and hard positions.
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
}

pub fn cmd_gen_data(spec: &SyntheticSpec, path: &Path) -> Result<CorpusSummary> {
    let corpus = generate(spec)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_corpus(&corpus, path)?;
    let (easy, hard) = data::unigram_context_accuracy(&corpus);
    let n_hard = corpus.labels.iter().filter(|&&l| l == data::HARD).count();
    Ok(CorpusSummary {
        path: path.to_path_buf(),
        labels: data::labels_path(path),
        bytes: corpus.bytes.len(),
        hard_frac: n_hard as f64 / corpus.bytes.len() as f64,
        easy_accuracy: easy,
        hard_accuracy: hard,
    })
}

/// Renders the loss curve from a metrics file; loop bars come from an eval
/// report when given, otherwise from the last metrics record.
pub fn cmd_chart(metrics: &Path, report: Option<&Path>, out: &Path) -> Result<()> {
    let records = read_metrics(metrics)?;
    let loops = match report {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let r: EvalReport =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Some(r.mean_loops)
        }
        None => records.last().map(|r| r.mean_loops.clone()),
    };
    fs::write(out, render_svg(&records, loops.as_deref()))?;
    Ok(())
}
