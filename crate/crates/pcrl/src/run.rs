//! Runs behind the command-line subcommands.
//!
//! A pretraining run directory holds `config.json` (the full run config),
//! `log.jsonl`, `checkpoint/` (parameters only) and `state/` (parameters,
//! queue, optimizer and progress, enough to resume). Both archives are
//! rewritten after every epoch.

use std::path::{Path, PathBuf};

use pcrl_core::downstream::{
    auc_report, dice_report, label_subset, linear_probe, with_norm, Classifier, EvalReport, ProbeTask, Segmenter,
};
use pcrl_core::network::{Encoder, NetworkConfig};
use pcrl_core::nn::ParamSet;
use pcrl_core::pretrain::{Pretrainer, StepRecord};
use pcrl_core::rng::{rng_for, stream};
use pcrl_core::synthdata::{generate, Corpus, Split, SynthSpec};
use pcrl_core::Tensor;
use serde_json::json;

use crate::archive::{write_file_atomic, Archive};
use crate::checkpoint::{load_checkpoint, resume, save_checkpoint, save_run_state, Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::corpus::{generate_corpus, load_full};
use crate::error::{Error, Result};
use crate::log::{LogEntry, TrainingLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneTask {
    Classification,
    Segmentation,
}

/// Paths inside a pretraining run directory.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }
    pub fn log(&self) -> PathBuf {
        self.0.join("log.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("checkpoint")
    }
    pub fn state(&self) -> PathBuf {
        self.0.join("state")
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Corpus<f32>> {
    generate_corpus(out, &cfg.data)
}

/// The corpus at `data`, or the one described by the config.
pub fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<(SynthSpec, Corpus<f32>)> {
    let (spec, corpus) = match data {
        Some(p) => {
            let (meta, c) = load_full(p)?;
            (meta.spec, c)
        }
        None => (cfg.data.clone(), generate(&cfg.data)?),
    };
    if spec.dims != cfg.pretrain.network.dims {
        return Err(Error::Config(format!(
            "corpus is {}D but the network is {}D",
            u8::from(spec.dims),
            u8::from(cfg.pretrain.network.dims)
        )));
    }
    Ok((spec, corpus))
}

/// Pretrains until a stopping rule fires. With `resume_run`, continues from
/// the run state in `out` when there is one.
pub fn pretrain(cfg: &RunConfig, data: Option<&Path>, out: &Path, resume_run: bool) -> Result<Pretrainer<f32>> {
    let dir = RunDir(out.to_path_buf());
    let (_, corpus) = load_data(cfg, data)?;
    let train = corpus.split(Split::Train)?.images;
    let val = corpus.split(Split::Val)?.images;
    let mut tr = if resume_run && dir.state().exists() {
        let tr = resume(&dir.state())?;
        if tr.config != cfg.pretrain {
            return Err(Error::Config("pretrain settings differ from the saved run state".into()));
        }
        tr
    } else {
        if dir.log().exists() {
            std::fs::remove_file(dir.log()).map_err(|source| Error::Io {
                path: dir.log(),
                source,
            })?;
        }
        Pretrainer::new(cfg.pretrain.clone())?
    };
    write_file_atomic(&dir.config(), cfg.to_json().as_bytes())?;
    let mut log = TrainingLog::append(&dir.log())?;
    while !tr.progress.finished {
        let mut steps: Vec<StepRecord> = Vec::new();
        let summary = tr.run_epoch_observed(&train, &val, &mut |r| {
            steps.push(*r);
            Ok(())
        })?;
        for s in steps {
            log.write(&LogEntry::Step(s))?;
        }
        log.write(&LogEntry::Epoch(summary))?;
        save_checkpoint(&dir.checkpoint(), &tr.state, &CheckpointMeta::new(&tr.config, &tr.progress))?;
        save_run_state(&dir.state(), &tr)?;
    }
    Ok(tr)
}

/// Loads a checkpoint for a downstream run configured for `dims`-D data.
fn downstream_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    let (have, want) = (c.meta.config.network.dims, cfg.pretrain.network.dims);
    if have != want {
        return Err(pcrl_core::Error::IncompatibleCheckpoint(format!(
            "{}D checkpoint for a {}D run",
            u8::from(have),
            u8::from(want)
        ))
        .into());
    }
    Ok(c)
}

fn network_for(cfg: &RunConfig, ckpt: Option<&Checkpoint>) -> NetworkConfig {
    let base = ckpt.map_or(&cfg.pretrain.network, |c| &c.meta.config.network);
    with_norm(base, cfg.finetune.norm)
}

/// Finetunes from `checkpoint` (or from scratch), evaluates on the test
/// split and, with `out`, writes `report.json` and a `predictions/` archive.
pub fn finetune(
    cfg: &RunConfig,
    task: FinetuneTask,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let ckpt = checkpoint.map(|p| downstream_checkpoint(cfg, p)).transpose()?;
    let (spec, corpus) = load_data(cfg, data)?;
    let net = network_for(cfg, ckpt.as_ref());
    let ft = &cfg.finetune;
    let train = label_subset(&corpus.split(Split::Train)?, ft.label_fraction, ft.seed)?;
    let val = corpus.split(Split::Val)?;
    let test = corpus.split(Split::Test)?;
    let (report, preds, targets) = match task {
        FinetuneTask::Classification => {
            let mut m = Classifier::new(&net, spec.classes, ckpt.as_ref().map(|c| &c.state.ordinary), ft.seed)?;
            m.fit(&train, &val, ft)?;
            let p = m.predict(&test.images)?;
            let labels = Tensor::from_vec(&[test.len()], test.labels.iter().map(|&l| l as f32).collect())?;
            (auc_report(&p, &test.labels)?, p, labels)
        }
        FinetuneTask::Segmentation => {
            let init = ckpt.as_ref().map(|c| (&c.state.ordinary, &c.state.decoder));
            let mut m = Segmenter::new(&net, init, ft.seed)?;
            m.fit(&train, &val, ft)?;
            let p = m.predict(&test.images)?;
            (dice_report(&p, &test.masks)?, p, test.masks.clone())
        }
    };
    if let Some(out) = out {
        write_file_atomic(&out.join("report.json"), report_json(&report).as_bytes())?;
        let mut a = Archive::new(json!({ "metric": report.metric }));
        a.push("predictions", preds);
        a.push("targets", targets);
        a.save(&out.join("predictions"))?;
    }
    Ok(report)
}

/// Frozen-encoder linear probe on the train and test splits.
pub fn probe(cfg: &RunConfig, task: ProbeTask, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<EvalReport> {
    let ckpt = checkpoint.map(|p| downstream_checkpoint(cfg, p)).transpose()?;
    let (_, corpus) = load_data(cfg, data)?;
    let net = network_for(cfg, ckpt.as_ref());
    let encoder = Encoder::new(&net)?;
    let mut rng = rng_for(cfg.probe.seed, &[stream::INIT]);
    let params = match &ckpt {
        Some(c) => pcrl_core::downstream::transfer(&c.state.ordinary, encoder.specs(), &[], &mut rng)?,
        None => ParamSet::init(encoder.specs(), &mut rng),
    };
    let train = corpus.split(Split::Train)?;
    let test = corpus.split(Split::Test)?;
    Ok(linear_probe(task, &encoder, &params, &train.images, &test.images, &cfg.probe)?)
}

/// Scores a `predictions/` archive: class scores against labels for AUC,
/// probability maps against masks for Dice.
pub fn evaluate(dir: &Path) -> Result<EvalReport> {
    let a = Archive::load(dir)?;
    let corrupt = |reason: &str| Error::CorruptArchive {
        path: dir.to_path_buf(),
        reason: reason.to_string(),
    };
    let (p, t) = match (a.get("predictions"), a.get("targets")) {
        (Some(p), Some(t)) => (p, t),
        _ => return Err(corrupt("needs predictions and targets")),
    };
    match a.metadata.get("metric").and_then(|m| m.as_str()) {
        Some("auc") => {
            let labels: Vec<usize> = t.data().iter().map(|&v| v as usize).collect();
            Ok(auc_report(p, &labels)?)
        }
        Some("dice") => Ok(dice_report(p, t)?),
        _ => Err(corrupt("metadata.metric must be auc or dice")),
    }
}

pub fn report_json(r: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}
