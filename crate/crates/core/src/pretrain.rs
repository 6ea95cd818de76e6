//! The self-supervised training loop: triplet construction, the three-branch
//! forward pass, losses, the optimizer step, the momentum update and the
//! queue push, plus epochs, validation and early stopping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{cross_mix, ModelState, Network, NetworkConfig, Pyramid};
use crate::nn::{apply_stat_updates, Bound, ParamSet};
use crate::objectives::{nce_node, recon_loss, total_loss, FeatureQueue, LossReport, LossWeights, NceMode, QUEUE_CAPACITY};
use crate::optim::{cosine_lr, sample_lambda, EarlyStopping, MomentumSgd, Verdict};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::{
    build_triplet, AugmentConfig, Branch, CorruptionSpec, CropConfig, Dims, TargetMode, TrainingTriplet, TripletConfig,
};

/// Named rows of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Contrastive loss only.
    ContraOnly,
    /// Contrastive loss plus reconstruction of the uncorrupted view.
    SelfRecons,
    /// Adds attention-conditioned flip targets.
    TransattFlip,
    /// Adds flip and rotation targets.
    Transatt,
    /// Self-reconstruction plus the mixed hybrid branch.
    Crossmix,
    /// Every component.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::ContraOnly,
        Ablation::SelfRecons,
        Ablation::TransattFlip,
        Ablation::Transatt,
        Ablation::Crossmix,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::ContraOnly => "contra_only",
            Ablation::SelfRecons => "self_recons",
            Ablation::TransattFlip => "transatt_flip",
            Ablation::Transatt => "transatt",
            Ablation::Crossmix => "crossmix",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn flags(self) -> AblationFlags {
        let off = AblationFlags {
            use_transatt: false,
            transatt_flip_only: false,
            use_crossmix: false,
            self_recons_only: false,
            contra_only: false,
        };
        match self {
            Ablation::ContraOnly => AblationFlags {
                contra_only: true,
                ..off
            },
            Ablation::SelfRecons => AblationFlags {
                self_recons_only: true,
                ..off
            },
            Ablation::TransattFlip => AblationFlags {
                use_transatt: true,
                transatt_flip_only: true,
                ..off
            },
            Ablation::Transatt => AblationFlags {
                use_transatt: true,
                ..off
            },
            Ablation::Crossmix => AblationFlags {
                use_crossmix: true,
                ..off
            },
            Ablation::Full => AblationFlags {
                use_transatt: true,
                use_crossmix: true,
                ..off
            },
        }
    }
}

/// Component switches derived from an [`Ablation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_transatt: bool,
    pub transatt_flip_only: bool,
    pub use_crossmix: bool,
    pub self_recons_only: bool,
    pub contra_only: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        let others = self.use_transatt || self.transatt_flip_only || self.use_crossmix || self.self_recons_only;
        if self.contra_only && others {
            return Err(Error::InvalidConfig("contra_only excludes every other component".into()));
        }
        if self.transatt_flip_only && !self.use_transatt {
            return Err(Error::InvalidConfig("transatt_flip_only requires use_transatt".into()));
        }
        if self.self_recons_only && (self.use_transatt || self.use_crossmix) {
            return Err(Error::InvalidConfig("self_recons_only excludes attention and mixing".into()));
        }
        Ok(())
    }

    pub fn target_mode(&self) -> TargetMode {
        if !self.use_transatt || self.contra_only || self.self_recons_only {
            TargetMode::Identity
        } else if self.transatt_flip_only {
            TargetMode::FlipOnly
        } else {
            TargetMode::Full
        }
    }

    pub fn reconstructs(&self) -> bool {
        !self.contra_only
    }
}

/// Hyperparameters of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub network: NetworkConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optional cap on the total number of optimizer steps.
    pub max_iterations: Option<usize>,
    pub ema_beta: f64,
    pub tau: f64,
    pub nce_mode: NceMode,
    pub alpha: f64,
    pub loss_weights: LossWeights,
    pub queue_capacity: usize,
    pub ablation: Ablation,
    pub corruption: CorruptionSpec,
    pub augment: AugmentConfig,
    pub crops: CropConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::desk(Dims::Two)
    }
}

impl PretrainConfig {
    pub fn desk(dims: Dims) -> Self {
        Self {
            network: NetworkConfig::desk(dims),
            batch_size: match dims {
                Dims::Two => 256,
                Dims::Three => 32,
            },
            lr: 1e-3,
            momentum: 0.9,
            max_epochs: 200,
            patience: 30,
            max_iterations: None,
            ema_beta: 0.99,
            tau: 0.2,
            nce_mode: NceMode::QueueOnly,
            alpha: 1.0,
            loss_weights: LossWeights::default(),
            queue_capacity: QUEUE_CAPACITY,
            ablation: Ablation::Full,
            corruption: CorruptionSpec::default(),
            augment: AugmentConfig::default(),
            crops: match dims {
                Dims::Two => CropConfig::default(),
                Dims::Three => CropConfig {
                    out_size: [32, 32, 16],
                    ..CropConfig::default()
                },
            },
            seed: 0,
        }
    }

    pub fn dims(&self) -> Dims {
        self.network.dims
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.ablation.flags().validate()?;
        self.corruption.validate()?;
        let positive = [self.lr, self.tau, self.alpha];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("lr, tau and alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1) and ema_beta in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.queue_capacity == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch size, queue capacity and epoch cap must be positive".into()));
        }
        if self.loss_weights.contrastive < 0.0 || self.loss_weights.reconstruction < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn triplet_config(&self) -> TripletConfig {
        TripletConfig {
            dims: self.dims(),
            target_mode: self.ablation.flags().target_mode(),
            corruption: Some(self.corruption),
            augment: self.augment,
            crops: self.crops.clone(),
        }
    }
}

/// Position of a run, enough to resume it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: usize,
    pub early_stopping: EarlyStopping,
    pub finished: bool,
}

/// Summary of one epoch, as written to the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_contrastive: f64,
    pub train_reconstruction: f64,
    pub val_total: f64,
    pub improved: bool,
}

/// One optimizer step, as written to the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// One-based epoch number.
    pub epoch: usize,
    /// Optimizer steps taken including this one.
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossReport,
}

/// Graph and handles of one three-branch forward pass.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub ordinary: Bound,
    pub momentum: Bound,
    pub decoder: Bound,
    pub total: Var,
    /// `None` while the queue is warming up.
    pub contrastive: Option<Var>,
    pub reconstruction: Option<Var>,
    /// Ordinary, momentum and (when mixing) hybrid MSE terms.
    pub branches: Vec<Var>,
    pub reconstructions: Vec<Var>,
    pub query: Var,
    pub key: Var,
    pub hybrid: Option<Var>,
    pub pyramids: Vec<Pyramid>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn report(&self, weights: LossWeights) -> Result<LossReport> {
        let val = |v: Option<Var>| v.map(|v| self.graph.value(v).item().as_f64()).unwrap_or(0.0);
        let contrastive = val(self.contrastive);
        let reconstruction = val(self.reconstruction);
        let mut branches = [0.0; 3];
        for (b, &v) in branches.iter_mut().zip(&self.branches) {
            *b = self.graph.value(v).item().as_f64();
        }
        let wc = if self.contrastive.is_some() { weights.contrastive } else { 0.0 };
        let wp = if self.reconstruction.is_some() { weights.reconstruction } else { 0.0 };
        let total = total_loss(
            contrastive,
            reconstruction,
            LossWeights {
                contrastive: wc,
                reconstruction: wp,
            },
        )?;
        Ok(LossReport {
            contrastive,
            reconstruction,
            total,
            branches,
        })
    }
}

/// Owns the model, queue and optimizer of one pretraining run.
#[derive(Clone, Debug)]
pub struct Pretrainer<T> {
    pub config: PretrainConfig,
    pub net: Network,
    pub state: ModelState<T>,
    pub queue: FeatureQueue<T>,
    pub optimizer: MomentumSgd<T>,
    pub progress: Progress,
}

fn slot_sizes<T: Scalar>(sets: &[&ParamSet<T>]) -> Vec<usize> {
    sets.iter().flat_map(|s| s.iter().map(|p| p.value.numel())).collect()
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.network.clone())?;
        let state = net.init(&mut rng_for(config.seed, &[stream::INIT]));
        Self::from_parts(config, state, None, None, None)
    }

    /// Reassembles a run from saved pieces; missing pieces start fresh.
    pub fn from_parts(
        config: PretrainConfig,
        state: ModelState<T>,
        queue: Option<FeatureQueue<T>>,
        velocity: Option<Vec<Vec<T>>>,
        progress: Option<Progress>,
    ) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.network.clone())?;
        net.check(&state)?;
        let mut optimizer = MomentumSgd::new(config.momentum, &slot_sizes(&[&state.ordinary, &state.decoder]));
        if let Some(v) = velocity {
            optimizer.set_velocity(v)?;
        }
        let queue = match queue {
            Some(q) if q.dim() == config.network.embed_dim && q.capacity() == config.queue_capacity => q,
            Some(_) => return Err(Error::IncompatibleCheckpoint("queue shape does not match the config".into())),
            None => FeatureQueue::new(config.queue_capacity, config.network.embed_dim),
        };
        let progress = progress.unwrap_or(Progress {
            epoch: 0,
            iteration: 0,
            early_stopping: EarlyStopping::new(config.patience),
            finished: false,
        });
        Ok(Self {
            config,
            net,
            state,
            queue,
            optimizer,
            progress,
        })
    }

    pub fn flags(&self) -> AblationFlags {
        self.config.ablation.flags()
    }

    /// Draws this step's mixing coefficient and triplet. Randomness depends
    /// only on `(seed, epoch, step)`.
    pub fn make_triplet(&self, batch: &Tensor<T>, epoch: usize, step: usize) -> Result<TrainingTriplet<T>> {
        let path = [epoch as u64, step as u64];
        let lambda = sample_lambda(
            self.config.alpha,
            &mut rng_for(self.config.seed, &[stream::LAMBDA, path[0], path[1]]),
        )?;
        let mut rng = rng_for(self.config.seed, &[stream::TRIPLET, path[0], path[1]]);
        build_triplet(batch, lambda, &mut rng, &self.config.triplet_config())
    }

    /// Builds the loss graph. `train` selects batch statistics for batch
    /// normalization; `use_queue` enables the contrastive term when the
    /// queue holds at least one batch.
    pub fn forward(&self, t: &TrainingTriplet<T>, train: bool, use_queue: bool) -> Result<ForwardPass<T>> {
        let flags = self.flags();
        let enc = &self.net.encoder;
        self.net.check_input(t.inputs[0].shape())?;
        let mut g = Graph::new();
        let mut po = Bound::new(&mut g, &self.state.ordinary, true, train);
        let mut pm = Bound::new(&mut g, &self.state.momentum, false, train);
        let mut pd = Bound::new(&mut g, &self.state.decoder, flags.reconstructs(), train);

        let attend = flags.use_transatt;
        let branch = |g: &mut Graph<T>, p: &mut Bound, b: Branch| -> Result<Pyramid> {
            let x = g.constant(t.inputs[b as usize].clone());
            let levels = enc.features(g, p, x)?;
            let ind = if attend { Some(g.constant(t.indicators(b)?)) } else { None };
            let top = enc.attend(g, p, &levels, ind)?;
            Ok(Pyramid { levels, top })
        };
        let pyr_o = branch(&mut g, &mut po, Branch::Ordinary)?;
        let pyr_m = branch(&mut g, &mut pm, Branch::Momentum)?;
        let query = enc.project(&mut g, &po, pyr_o.top)?;
        let key = enc.project(&mut g, &pm, pyr_m.top)?;

        let mut pyramids = vec![pyr_o, pyr_m];
        let mut hybrid = None;
        if flags.use_crossmix {
            let levels = cross_mix(
                &mut g,
                &pyramids[0].levels,
                &pyramids[1].levels,
                T::from_f64(t.lambda),
            )?;
            let ind = if attend {
                Some(g.constant(t.indicators(Branch::Hybrid)?))
            } else {
                None
            };
            let top = enc.attend(&mut g, &po, &levels, ind)?;
            hybrid = Some(enc.project(&mut g, &po, top)?);
            pyramids.push(Pyramid { levels, top });
        }

        let contrastive = if use_queue && self.queue.len() >= t.batch_size() {
            let k = g.value(key).clone();
            Some(nce_node(&mut g, query, &k, &self.queue.snapshot(), self.config.tau, self.config.nce_mode)?)
        } else {
            None
        };

        let mut reconstructions = Vec::new();
        let mut branches = Vec::new();
        let mut reconstruction = None;
        if flags.reconstructs() {
            let mut pairs = Vec::new();
            for (b, pyr) in pyramids.iter().enumerate() {
                let y = self.net.decoder.decode(&mut g, &mut pd, pyr)?;
                let target = g.constant(t.targets[b].clone());
                reconstructions.push(y);
                pairs.push((y, target));
            }
            let (lp, terms) = recon_loss(&mut g, &pairs)?;
            reconstruction = Some(lp);
            branches = terms;
        }

        let w = self.config.loss_weights;
        let mut terms = Vec::new();
        if let Some(lc) = contrastive {
            terms.push((lc, T::from_f64(w.contrastive)));
        }
        if let Some(lp) = reconstruction {
            terms.push((lp, T::from_f64(w.reconstruction)));
        }
        let total = if terms.is_empty() {
            g.constant(Tensor::scalar(T::zero()))
        } else {
            g.weighted_sum(&terms)?
        };
        Ok(ForwardPass {
            graph: g,
            ordinary: po,
            momentum: pm,
            decoder: pd,
            total,
            contrastive,
            reconstruction,
            branches,
            reconstructions,
            query,
            key,
            hybrid,
            pyramids,
        })
    }

    /// One optimizer step on `t` at learning rate `lr`, followed by the
    /// momentum update and the queue push.
    pub fn step_on(&mut self, t: &TrainingTriplet<T>, lr: f64) -> Result<LossReport> {
        let mut pass = self.forward(t, true, true)?;
        let report = pass.report(self.config.loss_weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "iteration {}: {:?}",
                self.progress.iteration, report
            )));
        }
        let g = &pass.graph;
        if g.requires_grad(pass.total) {
            let grads = g.backward(pass.total);
            let n_ord = self.state.ordinary.len();
            for (i, p) in self.state.ordinary.weights_mut() {
                if let Some(d) = grads.get(pass.ordinary.var(i)) {
                    self.optimizer.update(i, lr, p, d);
                }
            }
            for (i, p) in self.state.decoder.weights_mut() {
                if let Some(d) = grads.get(pass.decoder.var(i)) {
                    self.optimizer.update(n_ord + i, lr, p, d);
                }
            }
        }
        let upd_o = pass.ordinary.take_stat_updates();
        let upd_m = pass.momentum.take_stat_updates();
        let upd_d = pass.decoder.take_stat_updates();
        apply_stat_updates(&mut self.state.ordinary, g, &upd_o);
        apply_stat_updates(&mut self.state.momentum, g, &upd_m);
        apply_stat_updates(&mut self.state.decoder, g, &upd_d);
        self.state.ema_update(T::from_f64(self.config.ema_beta))?;
        let mut pushed = vec![pass.query, pass.key];
        pushed.extend(pass.hybrid);
        for v in pushed {
            self.queue.push(g.value(v))?;
        }
        self.progress.iteration += 1;
        Ok(report)
    }

    /// Builds the triplet for `(epoch, step)` and trains on it.
    pub fn train_step(&mut self, batch: &Tensor<T>, epoch: usize, step: usize, lr: f64) -> Result<LossReport> {
        let t = self.make_triplet(batch, epoch, step)?;
        self.step_on(&t, lr)
    }

    /// Mean total loss over `data` with λ = 0.5, fixed per-batch seeds, the
    /// current queue, evaluation-mode normalization and no state changes.
    pub fn validation_loss(&self, data: &Tensor<T>) -> Result<LossReport> {
        let samples = data.unstack();
        let bs = self.config.batch_size.min(samples.len()).max(1);
        let mut acc = LossReport::default();
        let mut count = 0usize;
        for (bi, chunk) in samples.chunks(bs).enumerate() {
            let batch = Tensor::stack(chunk)?;
            let mut rng = rng_for(self.config.seed, &[stream::VALIDATION, bi as u64]);
            let t = build_triplet(&batch, 0.5, &mut rng, &self.config.triplet_config())?;
            let pass = self.forward(&t, false, true)?;
            let r = pass.report(self.config.loss_weights)?;
            let w = chunk.len() as f64;
            acc.contrastive += w * r.contrastive;
            acc.reconstruction += w * r.reconstruction;
            acc.total += w * r.total;
            for k in 0..3 {
                acc.branches[k] += w * r.branches[k];
            }
            count += chunk.len();
        }
        if count == 0 {
            return Ok(acc);
        }
        let n = count as f64;
        acc.contrastive /= n;
        acc.reconstruction /= n;
        acc.total /= n;
        acc.branches.iter_mut().for_each(|b| *b /= n);
        Ok(acc)
    }

    fn iteration_budget_left(&self) -> bool {
        self.config.max_iterations.map_or(true, |m| self.progress.iteration < m)
    }

    /// Trains one epoch over `train` in a seeded shuffle order, then
    /// evaluates on `val` and, once the queue is full, updates early stopping.
    pub fn run_epoch(&mut self, train: &Tensor<T>, val: &Tensor<T>) -> Result<EpochSummary> {
        self.run_epoch_observed(train, val, &mut |_| Ok(()))
    }

    /// [`Pretrainer::run_epoch`] reporting every optimizer step to `on_step`.
    pub fn run_epoch_observed(
        &mut self,
        train: &Tensor<T>,
        val: &Tensor<T>,
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        let epoch = self.progress.epoch;
        let lr = cosine_lr(self.config.lr, epoch, self.config.max_epochs);
        let samples = train.unstack();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, &[stream::SHUFFLE, epoch as u64]));
        let bs = self.config.batch_size.min(samples.len()).max(1);
        let (mut lc, mut lp, mut steps) = (0.0, 0.0, 0usize);
        for (step, idx) in order.chunks_exact(bs).enumerate() {
            if !self.iteration_budget_left() {
                break;
            }
            let batch: Vec<Tensor<T>> = idx.iter().map(|&i| samples[i].clone()).collect();
            let r = self.train_step(&Tensor::stack(&batch)?, epoch, step, lr)?;
            on_step(&StepRecord {
                epoch: epoch + 1,
                iteration: self.progress.iteration,
                lr,
                loss: r,
            })?;
            lc += r.contrastive;
            lp += r.reconstruction;
            steps += 1;
        }
        let val_total = self.validation_loss(val)?.total;
        self.progress.epoch += 1;
        // The contrastive term grows with the number of negatives, so
        // validation losses are only comparable once the queue is full.
        let verdict = if self.queue.len() >= self.queue.capacity() {
            self.progress.early_stopping.observe(self.progress.epoch, val_total)
        } else {
            Verdict::Stale
        };
        if verdict == Verdict::Stop || self.progress.epoch >= self.config.max_epochs || !self.iteration_budget_left() {
            self.progress.finished = true;
        }
        let steps = steps.max(1) as f64;
        Ok(EpochSummary {
            epoch: self.progress.epoch,
            lr,
            train_contrastive: lc / steps,
            train_reconstruction: lp / steps,
            val_total,
            improved: verdict == Verdict::Improved,
        })
    }

    /// Runs epochs until early stopping, the epoch cap or the iteration cap.
    /// `on_epoch` sees every summary after the state has been updated.
    pub fn fit(
        &mut self,
        train: &Tensor<T>,
        val: &Tensor<T>,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
        mut on_epoch: impl FnMut(&EpochSummary, &Self) -> Result<()>,
    ) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while !self.progress.finished {
            let s = self.run_epoch_observed(train, val, &mut on_step)?;
            on_epoch(&s, self)?;
            out.push(s);
        }
        Ok(out)
    }
}
