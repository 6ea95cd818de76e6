//! Checkpoints of a pretraining model, and the fuller run state needed to
//! resume training.
//!
//! Tensor names are `ordinary/<param>`, `momentum/<param>` and
//! `decoder/<param>`. A resumable state adds `queue` and the optimizer
//! velocities `velocity/<slot>`. The metadata carries the pretraining
//! config, its digest and the run progress.

use std::path::Path;

use pcrl_core::network::{ModelState, Network};
use pcrl_core::nn::{Param, ParamSet, ParamSpec};
use pcrl_core::objectives::FeatureQueue;
use pcrl_core::pretrain::{PretrainConfig, Pretrainer, Progress};
use pcrl_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: PretrainConfig,
    /// SHA-256 of the compact JSON encoding of `config`.
    pub config_digest: String,
    pub progress: Progress,
}

impl CheckpointMeta {
    pub fn new(config: &PretrainConfig, progress: &Progress) -> Self {
        Self {
            config: config.clone(),
            config_digest: config_digest(config),
            progress: progress.clone(),
        }
    }
}

pub fn config_digest(config: &PretrainConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("config serializes")))
}

/// A loaded checkpoint. `queue` and `velocity` are present only in resumable
/// run states.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: ModelState<f32>,
    pub queue: Option<FeatureQueue<f32>>,
    pub velocity: Option<Vec<Vec<f32>>>,
}

fn push_set(a: &mut Archive, prefix: &str, set: &ParamSet<f32>) {
    for p in set.iter() {
        a.push(format!("{prefix}/{}", p.name), p.value.clone());
    }
}

fn model_archive(state: &ModelState<f32>, meta: &CheckpointMeta) -> Archive {
    let mut a = Archive::new(serde_json::to_value(meta).expect("metadata serializes"));
    push_set(&mut a, "ordinary", &state.ordinary);
    push_set(&mut a, "momentum", &state.momentum);
    push_set(&mut a, "decoder", &state.decoder);
    a
}

/// Saves the three parameter sets. The queue is not included.
pub fn save_checkpoint(dir: &Path, state: &ModelState<f32>, meta: &CheckpointMeta) -> Result<()> {
    model_archive(state, meta).save(dir)
}

/// Saves everything [`resume`] needs: parameters, queue, velocities and
/// progress.
pub fn save_run_state(dir: &Path, tr: &Pretrainer<f32>) -> Result<()> {
    let meta = CheckpointMeta::new(&tr.config, &tr.progress);
    let mut a = model_archive(&tr.state, &meta);
    a.push("queue", tr.queue.snapshot());
    for (i, v) in tr.optimizer.velocity().iter().enumerate() {
        a.push(format!("velocity/{i:04}"), Tensor::from_vec(&[v.len()], v.clone())?);
    }
    a.save(dir)
}

fn incompatible(msg: String) -> Error {
    Error::Core(pcrl_core::Error::IncompatibleCheckpoint(msg))
}

fn read_set(a: &Archive, prefix: &str, specs: &[ParamSpec]) -> Result<ParamSet<f32>> {
    let pre = format!("{prefix}/");
    let found: Vec<(&str, &Tensor<f32>)> = a.with_prefix(&pre).collect();
    if found.len() != specs.len() {
        return Err(incompatible(format!(
            "{prefix}: {} tensors, model has {}",
            found.len(),
            specs.len()
        )));
    }
    let params = specs
        .iter()
        .zip(found)
        .map(|(s, (name, t))| {
            if name != s.name || t.shape() != s.shape.as_slice() {
                return Err(incompatible(format!(
                    "{prefix}/{name} {:?} does not match {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
            Ok(Param {
                name: s.name.clone(),
                kind: s.kind,
                value: t.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet::from_params(params))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let a = Archive::load(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(a.metadata.clone()).map_err(|e| Error::CorruptArchive {
        path: dir.to_path_buf(),
        reason: format!("checkpoint metadata: {e}"),
    })?;
    if meta.config_digest != config_digest(&meta.config) {
        return Err(Error::CorruptArchive {
            path: dir.to_path_buf(),
            reason: "config digest does not match the stored config".into(),
        });
    }
    let net = Network::new(meta.config.network.clone())?;
    let state = ModelState {
        ordinary: read_set(&a, "ordinary", net.encoder.specs())?,
        momentum: read_set(&a, "momentum", net.encoder.specs())?,
        decoder: read_set(&a, "decoder", net.decoder.specs())?,
    };
    let queue = a
        .get("queue")
        .map(|q| FeatureQueue::from_snapshot(meta.config.queue_capacity, q))
        .transpose()?;
    let velocity: Vec<Vec<f32>> = a.with_prefix("velocity/").map(|(_, t)| t.data().to_vec()).collect();
    Ok(Checkpoint {
        meta,
        state,
        queue,
        velocity: (!velocity.is_empty()).then_some(velocity),
    })
}

/// Rebuilds a pretrainer from a run state written by [`save_run_state`].
pub fn resume(dir: &Path) -> Result<Pretrainer<f32>> {
    let c = load_checkpoint(dir)?;
    if c.queue.is_none() || c.velocity.is_none() {
        return Err(incompatible(format!("{} is a checkpoint without run state", dir.display())));
    }
    Ok(Pretrainer::from_parts(
        c.meta.config,
        c.state,
        c.queue,
        c.velocity,
        Some(c.meta.progress),
    )?)
}
