//! Transfer of a pretrained encoder: supervised finetuning for
//! classification and segmentation, frozen-encoder linear probes, and the
//! AUC and Dice metrics.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{Decoder, Encoder, NetworkConfig, Pyramid};
use crate::nn::{Bound, Linear, NormKind, ParamKind, ParamSet, ParamSpec, Registry};
use crate::optim::{Adam, EarlyStopping, Verdict};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::synthdata::Corpus;
use crate::tensor::Tensor;
use crate::transforms::{apply_transform, indicator_batch, Rotation, TransformSpec};

/// Smoothing term of the Dice score and loss.
pub const DICE_EPS: f64 = 1e-5;

/// A metric summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub samples: usize,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// `(2 |P ∩ G| + ε) / (|P| + |G| + ε)` over binary masks (values above one
/// half count as foreground).
pub fn dice<T: Scalar>(pred: &[T], gt: &[T], eps: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err!("dice of masks with {} and {} elements", pred.len(), gt.len()));
    }
    let half = T::from_f64(0.5);
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a > half, b > half);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((2.0 * inter as f64 + eps) / ((p + g) as f64 + eps))
}

/// One-vs-rest AUC of each column of `[N, K]` class scores, and their mean.
pub fn auc_report<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<EvalReport> {
    let [n, k] = crate::tensor::dims2(scores.shape())?;
    if labels.len() != n {
        return Err(shape_err!("{} score rows for {} labels", n, labels.len()));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let col: Vec<f64> = scores.data().chunks(k).map(|r| r[c].as_f64()).collect();
        let hit: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        per_class.push(auc(&col, &hit)?);
    }
    let mean = per_class.iter().sum::<f64>() / k.max(1) as f64;
    Ok(EvalReport {
        metric: "auc".to_string(),
        per_class,
        mean,
        samples: n,
    })
}

/// Mean per-sample Dice of thresholded predictions against masks; the
/// leading axis indexes samples.
pub fn dice_report<T: Scalar>(pred: &Tensor<T>, masks: &Tensor<T>) -> Result<EvalReport> {
    pred.expect_shape(masks.shape())?;
    let n = pred.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(shape_err!("dice of an empty batch"));
    }
    let per = pred.numel() / n;
    let mut total = 0.0;
    for (a, b) in pred.data().chunks(per).zip(masks.data().chunks(per)) {
        total += dice(a, b, DICE_EPS)?;
    }
    let mean = total / n as f64;
    Ok(EvalReport {
        metric: "dice".to_string(),
        per_class: vec![mean],
        mean,
        samples: n,
    })
}

/// Batch-mean soft Dice loss `1 - (2 Σpg + ε) / (Σp + Σg + ε)` per sample,
/// with its gradient with respect to `probs`.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<(T, Tensor<T>)> {
    probs.expect_shape(target.shape())?;
    let n = probs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(shape_err!("soft dice of an empty batch"));
    }
    let per = probs.numel() / n;
    let eps = T::from_f64(eps);
    let two = T::from_f64(2.0);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); probs.numel()];
    for s in 0..n {
        let p = &probs.data()[s * per..(s + 1) * per];
        let g = &target.data()[s * per..(s + 1) * per];
        let inter: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        let denom: T = p.iter().copied().sum::<T>() + g.iter().copied().sum::<T>() + eps;
        let num = two * inter + eps;
        loss += T::one() - num / denom;
        let d2 = denom * denom;
        for (gr, &gv) in grad[s * per..(s + 1) * per].iter_mut().zip(g) {
            *gr = -(two * gv * denom - num) / d2 * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(probs.shape(), grad)?))
}

/// Batch-mean softmax cross-entropy of `[N, K]` logits and its gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, k] = crate::tensor::dims2(logits.shape())?;
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(shape_err!("labels do not fit {} samples of {} classes", n, k));
    }
    let inv_n = T::one() / T::from_f64(n.max(1) as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let p = softmax(row);
        loss -= p[y].max(T::min_positive_value()).ln();
        for (j, &pj) in p.iter().enumerate() {
            grad[i * k + j] = (pj - if j == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, k], grad)?))
}

fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Builds parameters for `specs`, copying weights from `src` by name.
///
/// Every weight named in `specs` that exists in `src` must have the same
/// shape. Weights absent from `src` are freshly initialized only when listed
/// in `fresh_prefixes`; anything else is an incompatibility. Running
/// statistics are copied when present and re-initialized otherwise, so a
/// group-norm checkpoint can feed a batch-norm model and vice versa.
pub fn transfer<T: Scalar, R: Rng + ?Sized>(
    src: &ParamSet<T>,
    specs: &[ParamSpec],
    fresh_prefixes: &[&str],
    rng: &mut R,
) -> Result<ParamSet<T>> {
    let mut out = ParamSet::init(specs, rng);
    for (i, spec) in specs.iter().enumerate() {
        match src.find(&spec.name) {
            Some(p) if p.value.shape() == spec.shape.as_slice() => {
                out.get_mut(i).value = p.value.clone();
            }
            Some(p) => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{} has shape {:?}, model expects {:?}",
                    spec.name,
                    p.value.shape(),
                    spec.shape
                )))
            }
            None if spec.kind == ParamKind::Buffer => {}
            None if fresh_prefixes.iter().any(|f| spec.name.starts_with(f)) => {}
            None => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "checkpoint lacks {}",
                    spec.name
                )))
            }
        }
    }
    Ok(out)
}

/// Network config with a different normalization family.
pub fn with_norm(cfg: &NetworkConfig, norm: Option<NormKind>) -> NetworkConfig {
    NetworkConfig {
        norm: norm.unwrap_or(cfg.norm),
        ..cfg.clone()
    }
}

/// Supervised finetuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of the training split that keeps its labels.
    pub label_fraction: f64,
    /// Replaces the checkpoint's normalization layers.
    pub norm: Option<NormKind>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 10,
            lr: 1e-4,
            batch_size: 16,
            label_fraction: 1.0,
            norm: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "finetuning needs a positive lr and batch size and a label fraction in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded subset holding `label_fraction` of `train` (at least one sample).
pub fn label_subset<T: Scalar>(train: &Corpus<T>, fraction: f64, seed: u64) -> Result<Corpus<T>> {
    let n = train.len();
    let keep = ((libm::floor(n as f64 * fraction) as usize).max(1)).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[stream::FINETUNE, 0]));
    idx.truncate(keep);
    idx.sort_unstable();
    train.select(&idx)
}

/// Train/validation/test data of a downstream task.
pub struct TaskData<'a, T> {
    pub train: &'a Corpus<T>,
    pub val: &'a Corpus<T>,
    pub test: &'a Corpus<T>,
}

fn update_sets<T: Scalar>(
    opt: &mut Adam<T>,
    lr: f64,
    sets: &mut [&mut ParamSet<T>],
    bounds: &[&Bound],
    grads: &crate::graph::Gradients<T>,
) {
    opt.begin_step();
    let mut offset = 0;
    for (set, bound) in sets.iter_mut().zip(bounds) {
        let len = set.len();
        for (i, p) in set.weights_mut() {
            if let Some(d) = grads.get(bound.var(i)) {
                opt.update(offset + i, lr, p, d);
            }
        }
        offset += len;
    }
}

fn batches(n: usize, bs: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[stream::FINETUNE, 1, epoch as u64]));
    idx.chunks(bs.max(1)).map(|c| c.to_vec()).collect()
}

/// Encoder plus global-average-pool and a linear head over `F^l`.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub encoder: Encoder,
    pub head: Linear,
    pub head_specs: Vec<ParamSpec>,
    pub encoder_params: ParamSet<T>,
    pub head_params: ParamSet<T>,
    pub classes: usize,
}

impl<T: Scalar> Classifier<T> {
    /// Random initialization, or encoder weights from `init`.
    pub fn new(cfg: &NetworkConfig, classes: usize, init: Option<&ParamSet<T>>, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(cfg)?;
        let mut reg = Registry::new();
        let head = reg.linear("head", cfg.top_width(), classes, true);
        let head_specs = reg.into_specs();
        let mut rng = rng_for(seed, &[stream::FINETUNE, 2]);
        let encoder_params = match init {
            Some(src) => transfer(src, encoder.specs(), &[], &mut rng)?,
            None => ParamSet::init(encoder.specs(), &mut rng),
        };
        let head_params = ParamSet::init(&head_specs, &mut rng);
        Ok(Self {
            encoder,
            head,
            head_specs,
            encoder_params,
            head_params,
            classes,
        })
    }

    fn logits(&self, g: &mut Graph<T>, pe: &mut Bound, ph: &Bound, x: Var) -> Result<Var> {
        let levels = self.encoder.features(g, pe, x)?;
        let pooled = g.global_avg_pool(*levels.last().expect("stages"))?;
        self.head.forward(g, ph, pooled)
    }

    /// Class probabilities `[N, K]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = Vec::new();
        for chunk in images.unstack().chunks(32) {
            let mut g = Graph::new();
            let mut pe = Bound::new(&mut g, &self.encoder_params, false, false);
            let ph = Bound::new(&mut g, &self.head_params, false, false);
            let x = g.constant(Tensor::stack(chunk)?);
            let l = self.logits(&mut g, &mut pe, &ph, x)?;
            for row in g.value(l).data().chunks(self.classes) {
                out.extend(softmax(row));
            }
        }
        Tensor::from_vec(&[images.shape()[0], self.classes], out)
    }

    fn loss(&self, data: &Corpus<T>) -> Result<f64> {
        let probs = self.predict(&data.images)?;
        let mut l = 0.0;
        for (row, &y) in probs.data().chunks(self.classes).zip(&data.labels) {
            l -= libm::log(row[y].as_f64().max(1e-30));
        }
        Ok(l / data.len().max(1) as f64)
    }

    /// One-vs-rest AUC per class on `data`.
    pub fn evaluate(&self, data: &Corpus<T>) -> Result<EvalReport> {
        auc_report(&self.predict(&data.images)?, &data.labels)
    }

    /// Adam with cross-entropy, early stopping on validation loss; the best
    /// validation weights are kept.
    pub fn fit(&mut self, train: &Corpus<T>, val: &Corpus<T>, cfg: &FinetuneConfig) -> Result<()> {
        cfg.validate()?;
        let sizes: Vec<usize> = self
            .encoder_params
            .iter()
            .chain(self.head_params.iter())
            .map(|p| p.value.numel())
            .collect();
        let mut opt = Adam::new(&sizes);
        let mut stop = EarlyStopping::new(cfg.patience);
        let mut best = (self.encoder_params.clone(), self.head_params.clone());
        let samples = train.images.unstack();
        for epoch in 0..cfg.max_epochs {
            for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
                let x: Vec<Tensor<T>> = idx.iter().map(|&i| samples[i].clone()).collect();
                let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let mut g = Graph::new();
                let mut pe = Bound::new(&mut g, &self.encoder_params, true, true);
                let ph = Bound::new(&mut g, &self.head_params, true, true);
                let xv = g.constant(Tensor::stack(&x)?);
                let logits = self.logits(&mut g, &mut pe, &ph, xv)?;
                let (value, grad) = cross_entropy(g.value(logits), &y)?;
                let loss = g.fused_loss(logits, value, grad)?;
                let grads = g.backward(loss);
                let updates = pe.take_stat_updates();
                update_sets(
                    &mut opt,
                    cfg.lr,
                    &mut [&mut self.encoder_params, &mut self.head_params],
                    &[&pe, &ph],
                    &grads,
                );
                crate::nn::apply_stat_updates(&mut self.encoder_params, &g, &updates);
            }
            let v = self.loss(val)?;
            match stop.observe(epoch + 1, v) {
                Verdict::Improved => best = (self.encoder_params.clone(), self.head_params.clone()),
                Verdict::Stale => {}
                Verdict::Stop => break,
            }
        }
        if cfg.max_epochs > 0 {
            (self.encoder_params, self.head_params) = best;
        }
        Ok(())
    }
}

/// Finetunes a classifier (from `init` or from scratch) and reports test AUC.
pub fn finetune_classifier<T: Scalar>(
    net: &NetworkConfig,
    init: Option<&ParamSet<T>>,
    data: TaskData<'_, T>,
    classes: usize,
    cfg: &FinetuneConfig,
) -> Result<EvalReport> {
    let net = with_norm(net, cfg.norm);
    let mut model = Classifier::new(&net, classes, init, cfg.seed)?;
    let train = label_subset(data.train, cfg.label_fraction, cfg.seed)?;
    model.fit(&train, data.val, cfg)?;
    model.evaluate(data.test)
}

/// Full U-Net for binary segmentation: encoder, attention with the identity
/// indicator, and decoder.
#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    pub config: NetworkConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub encoder_params: ParamSet<T>,
    pub decoder_params: ParamSet<T>,
}

impl<T: Scalar> Segmenter<T> {
    /// Random initialization, or encoder and decoder weights from a
    /// checkpoint.
    pub fn new(cfg: &NetworkConfig, init: Option<(&ParamSet<T>, &ParamSet<T>)>, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(cfg)?;
        let decoder = Decoder::new(cfg, 1)?;
        let mut rng = rng_for(seed, &[stream::FINETUNE, 3]);
        let (encoder_params, decoder_params) = match init {
            Some((e, d)) => (
                transfer(e, encoder.specs(), &[], &mut rng)?,
                transfer(d, decoder.specs(), &[], &mut rng)?,
            ),
            None => (
                ParamSet::init(encoder.specs(), &mut rng),
                ParamSet::init(decoder.specs(), &mut rng),
            ),
        };
        Ok(Self {
            config: cfg.clone(),
            encoder,
            decoder,
            encoder_params,
            decoder_params,
        })
    }

    fn probs(&self, g: &mut Graph<T>, pe: &mut Bound, pd: &mut Bound, x: Var) -> Result<Var> {
        let n = g.value(x).shape()[0];
        let levels = self.encoder.features(g, pe, x)?;
        let ind = g.constant(indicator_batch(&vec![TransformSpec::identity(self.config.dims); n])?);
        let top = self.encoder.attend(g, pe, &levels, Some(ind))?;
        self.decoder.decode(g, pd, &Pyramid { levels, top })
    }

    /// Foreground probabilities, same shape as `images`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(images.numel());
        for chunk in images.unstack().chunks(16) {
            let mut g = Graph::new();
            let mut pe = Bound::new(&mut g, &self.encoder_params, false, false);
            let mut pd = Bound::new(&mut g, &self.decoder_params, false, false);
            let x = g.constant(Tensor::stack(chunk)?);
            let p = self.probs(&mut g, &mut pe, &mut pd, x)?;
            out.extend_from_slice(g.value(p).data());
        }
        Tensor::from_vec(images.shape(), out)
    }

    fn loss(&self, data: &Corpus<T>) -> Result<f64> {
        let p = self.predict(&data.images)?;
        Ok(soft_dice_loss(&p, &data.masks, DICE_EPS)?.0.as_f64())
    }

    /// Mean Dice of thresholded predictions over the samples of `data`.
    pub fn evaluate(&self, data: &Corpus<T>) -> Result<EvalReport> {
        dice_report(&self.predict(&data.images)?, &data.masks)
    }

    /// Adam with soft Dice loss, early stopping on validation loss; the best
    /// validation weights are kept.
    pub fn fit(&mut self, train: &Corpus<T>, val: &Corpus<T>, cfg: &FinetuneConfig) -> Result<()> {
        cfg.validate()?;
        let sizes: Vec<usize> = self
            .encoder_params
            .iter()
            .chain(self.decoder_params.iter())
            .map(|p| p.value.numel())
            .collect();
        let mut opt = Adam::new(&sizes);
        let mut stop = EarlyStopping::new(cfg.patience);
        let mut best = (self.encoder_params.clone(), self.decoder_params.clone());
        let samples = train.images.unstack();
        let masks = train.masks.unstack();
        for epoch in 0..cfg.max_epochs {
            for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
                let x: Vec<Tensor<T>> = idx.iter().map(|&i| samples[i].clone()).collect();
                let m: Vec<Tensor<T>> = idx.iter().map(|&i| masks[i].clone()).collect();
                let mut g = Graph::new();
                let mut pe = Bound::new(&mut g, &self.encoder_params, true, true);
                let mut pd = Bound::new(&mut g, &self.decoder_params, true, true);
                let xv = g.constant(Tensor::stack(&x)?);
                let p = self.probs(&mut g, &mut pe, &mut pd, xv)?;
                let (value, grad) = soft_dice_loss(g.value(p), &Tensor::stack(&m)?, DICE_EPS)?;
                let loss = g.fused_loss(p, value, grad)?;
                let grads = g.backward(loss);
                let (ue, ud) = (pe.take_stat_updates(), pd.take_stat_updates());
                update_sets(
                    &mut opt,
                    cfg.lr,
                    &mut [&mut self.encoder_params, &mut self.decoder_params],
                    &[&pe, &pd],
                    &grads,
                );
                crate::nn::apply_stat_updates(&mut self.encoder_params, &g, &ue);
                crate::nn::apply_stat_updates(&mut self.decoder_params, &g, &ud);
            }
            let v = self.loss(val)?;
            match stop.observe(epoch + 1, v) {
                Verdict::Improved => best = (self.encoder_params.clone(), self.decoder_params.clone()),
                Verdict::Stale => {}
                Verdict::Stop => break,
            }
        }
        if cfg.max_epochs > 0 {
            (self.encoder_params, self.decoder_params) = best;
        }
        Ok(())
    }
}

/// Finetunes a segmenter (from `init` or from scratch) and reports test Dice.
pub fn finetune_segmenter<T: Scalar>(
    net: &NetworkConfig,
    init: Option<(&ParamSet<T>, &ParamSet<T>)>,
    data: TaskData<'_, T>,
    cfg: &FinetuneConfig,
) -> Result<EvalReport> {
    let net = with_norm(net, cfg.norm);
    let mut model = Segmenter::new(&net, init, cfg.seed)?;
    let train = label_subset(data.train, cfg.label_fraction, cfg.seed)?;
    model.fit(&train, data.val, cfg)?;
    model.evaluate(data.test)
}

/// Frozen-encoder pretext tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Four classes: 0, 90, 180 and 270 degrees.
    Rotation,
    /// Eight classes: the direction from one grid patch to an adjacent one.
    Position,
}

impl ProbeTask {
    pub fn classes(self) -> usize {
        match self {
            ProbeTask::Rotation => 4,
            ProbeTask::Position => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rotation" => Some(ProbeTask::Rotation),
            "position" => Some(ProbeTask::Position),
            _ => None,
        }
    }
}

/// The eight neighbour offsets `(di, dj)`: top left, top, top right, left,
/// right, bottom left, bottom, bottom right.
pub const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Linear probe settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Patches per side for the position task.
    pub grid: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-2,
            batch_size: 64,
            grid: 4,
            seed: 0,
        }
    }
}

/// `GAP(F^l)` of a frozen encoder in evaluation mode, `[N, C]`.
pub fn encoder_features<T: Scalar>(encoder: &Encoder, params: &ParamSet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = Vec::new();
    let mut c = 0;
    for chunk in images.unstack().chunks(32) {
        let mut g = Graph::new();
        let mut p = Bound::new(&mut g, params, false, false);
        let x = g.constant(Tensor::stack(chunk)?);
        let levels = encoder.features(&mut g, &mut p, x)?;
        let f = g.global_avg_pool(*levels.last().expect("stages"))?;
        c = g.value(f).shape()[1];
        out.extend_from_slice(g.value(f).data());
    }
    Tensor::from_vec(&[images.shape()[0], c], out)
}

/// Inputs and labels of a probe task built from `images`.
pub fn probe_dataset<T: Scalar>(
    task: ProbeTask,
    encoder: &Encoder,
    params: &ParamSet<T>,
    images: &Tensor<T>,
    cfg: &ProbeConfig,
    salt: u64,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let samples = images.unstack();
    match task {
        ProbeTask::Rotation => {
            let mut rotated = Vec::with_capacity(samples.len() * 4);
            let mut labels = Vec::with_capacity(samples.len() * 4);
            for s in &samples {
                for (k, r) in Rotation::ALL.into_iter().enumerate() {
                    let dims = if s.shape()[1] > 1 {
                        crate::transforms::Dims::Three
                    } else {
                        crate::transforms::Dims::Two
                    };
                    let spec = TransformSpec {
                        rotation: r,
                        ..TransformSpec::identity(dims)
                    };
                    rotated.push(apply_transform(&spec, s)?);
                    labels.push(k);
                }
            }
            let feats = encoder_features(encoder, params, &Tensor::stack(&rotated)?)?;
            Ok((feats, labels))
        }
        ProbeTask::Position => {
            let [_, d, h, w] = match *samples.first().ok_or_else(|| shape_err!("no images"))?.shape() {
                [c, d, h, w] => [c, d, h, w],
                _ => return Err(shape_err!("images must be rank 5")),
            };
            let gsz = cfg.grid;
            if gsz < 2 || h % gsz != 0 || w % gsz != 0 {
                return Err(Error::InvalidConfig(format!("grid {gsz} does not tile {h}x{w}")));
            }
            let (ph, pw) = (h / gsz, w / gsz);
            let mut rng = rng_for(cfg.seed, &[stream::PROBE, salt]);
            let mut patches = Vec::new();
            let mut labels = Vec::new();
            for s in &samples {
                for (label, &(di, dj)) in NEIGHBOURS.iter().enumerate() {
                    // Anchor chosen so that the neighbour stays on the grid.
                    let lo_i = if di < 0 { 1 } else { 0 };
                    let hi_i = if di > 0 { gsz - 1 } else { gsz };
                    let lo_j = if dj < 0 { 1 } else { 0 };
                    let hi_j = if dj > 0 { gsz - 1 } else { gsz };
                    let i = rng.gen_range(lo_i..hi_i);
                    let j = rng.gen_range(lo_j..hi_j);
                    let ni = (i as isize + di) as usize;
                    let nj = (j as isize + dj) as usize;
                    patches.push(crop(s, d, [i * ph, j * pw], [ph, pw])?);
                    patches.push(crop(s, d, [ni * ph, nj * pw], [ph, pw])?);
                    labels.push(label);
                }
            }
            let feats = encoder_features(encoder, params, &Tensor::stack(&patches)?)?;
            let c = feats.shape()[1];
            // Rows alternate anchor, neighbour: pairs concatenate in place.
            let pairs = feats.reshape(&[labels.len(), 2 * c])?;
            Ok((pairs, labels))
        }
    }
}

fn crop<T: Scalar>(x: &Tensor<T>, d: usize, start: [usize; 2], size: [usize; 2]) -> Result<Tensor<T>> {
    let [c, _, h, w] = match *x.shape() {
        [c, dd, h, w] => [c, dd, h, w],
        _ => return Err(shape_err!("crop expects [C, D, H, W]")),
    };
    let mut out = Vec::with_capacity(c * d * size[0] * size[1]);
    for ch in 0..c {
        for z in 0..d {
            for y in start[0]..start[0] + size[0] {
                let row = ((ch * d + z) * h + y) * w;
                out.extend_from_slice(&x.data()[row + start[1]..row + start[1] + size[1]]);
            }
        }
    }
    Tensor::from_vec(&[c, d, size[0], size[1]], out)
}

/// Linear softmax classifier on fixed features. Features are standardized
/// with training-set statistics before the linear layer.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    pub fn fit<T: Scalar>(feats: &Tensor<T>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let [n, c] = crate::tensor::dims2(feats.shape())?;
        if n == 0 || labels.len() != n {
            return Err(shape_err!("{} feature rows for {} labels", n, labels.len()));
        }
        let x: Vec<f64> = feats.data().iter().map(|v| v.as_f64()).collect();
        let mut mean = vec![0.0; c];
        let mut scale = vec![0.0; c];
        for row in x.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in x.chunks(c) {
            for ((s, &m), &v) in scale.iter_mut().zip(&mean).zip(row) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = 1.0 / libm::sqrt(*s + 1e-8);
        }
        let z: Vec<f64> = x
            .chunks(c)
            .flat_map(|row| row.iter().zip(&mean).zip(&scale).map(|((&v, &m), &s)| (v - m) * s))
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weight: vec![0.0; classes * c],
            bias: vec![0.0; classes],
            classes,
        };
        let mut opt = Adam::<f64>::new(&[classes * c, classes]);
        for epoch in 0..cfg.epochs {
            for idx in batches(n, cfg.batch_size, cfg.seed, epoch) {
                let logits: Vec<f64> = idx.iter().flat_map(|&i| probe.logits_std(&z[i * c..(i + 1) * c])).collect();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let (_, g) = cross_entropy(&Tensor::from_vec(&[idx.len(), classes], logits)?, &y)?;
                let mut gw = vec![0.0; classes * c];
                let mut gb = vec![0.0; classes];
                for (r, &i) in idx.iter().enumerate() {
                    let zi = &z[i * c..(i + 1) * c];
                    for k in 0..classes {
                        let gk = g.data()[r * classes + k];
                        gb[k] += gk;
                        for (wv, &zv) in gw[k * c..(k + 1) * c].iter_mut().zip(zi) {
                            *wv += gk * zv;
                        }
                    }
                }
                opt.begin_step();
                opt.update(0, cfg.lr, &mut probe.weight, &gw);
                opt.update(1, cfg.lr, &mut probe.bias, &gb);
            }
        }
        Ok(probe)
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        let c = z.len();
        (0..self.classes)
            .map(|k| self.bias[k] + self.weight[k * c..(k + 1) * c].iter().zip(z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict<T: Scalar>(&self, feats: &Tensor<T>) -> Result<Vec<usize>> {
        let c = self.mean.len();
        let [_, fc] = crate::tensor::dims2(feats.shape())?;
        if fc != c {
            return Err(shape_err!("probe trained on {} features, got {}", c, fc));
        }
        Ok(feats
            .data()
            .chunks(c)
            .map(|row| {
                let z: Vec<f64> = row
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((&v, &m), &s)| (v.as_f64() - m) * s)
                    .collect();
                let l = self.logits_std(&z);
                (0..self.classes).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap_or(0)
            })
            .collect())
    }
}

/// Trains a linear probe on features of a frozen encoder and reports test
/// accuracy.
pub fn linear_probe<T: Scalar>(
    task: ProbeTask,
    encoder: &Encoder,
    params: &ParamSet<T>,
    train: &Tensor<T>,
    test: &Tensor<T>,
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    let (ftr, ltr) = probe_dataset(task, encoder, params, train, cfg, 0)?;
    let (fte, lte) = probe_dataset(task, encoder, params, test, cfg, 1)?;
    let probe = LinearProbe::fit(&ftr, &ltr, task.classes(), cfg)?;
    let pred = probe.predict(&fte)?;
    let k = task.classes();
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&p, &y) in pred.iter().zip(&lte) {
        counts[y] += 1;
        hits[y] += (p == y) as usize;
    }
    let per_class: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    let mean = hits.iter().sum::<usize>() as f64 / lte.len().max(1) as f64;
    Ok(EvalReport {
        metric: "accuracy".to_string(),
        per_class,
        mean,
        samples: lte.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthSpec};
    use crate::transforms::Dims;
    use proptest::prelude::*;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            base_width: 4,
            stages: 2,
            embed_dim: 8,
            norm: NormKind::Group { groups: 2 },
            ..NetworkConfig::desk(Dims::Two)
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.5, 0.4], &[true, true]), Err(Error::SingleClass));
    }

    #[test]
    fn dice_examples() {
        let ones = [1.0f64; 4];
        assert_eq!(dice(&ones, &ones, DICE_EPS).unwrap(), 1.0);
        assert_eq!(dice(&[0.0f64; 4], &[0.0; 4], DICE_EPS).unwrap(), 1.0);
        let p = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let g = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert!(dice(&p, &g, DICE_EPS).unwrap() < 1e-5);
        let half = [1.0, 1.0, 0.0, 0.0];
        let d = dice(&half, &ones, 0.0).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        assert!(dice(&half, &ones[..3], 0.0).is_err());
    }

    #[test]
    fn soft_dice_gradient() {
        let p = Tensor::<f64>::from_f64(&[2, 3], &[0.2, 0.7, 0.4, 0.9, 0.1, 0.5]).unwrap();
        let t = Tensor::from_f64(&[2, 3], &[0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let (_, g) = soft_dice_loss(&p, &t, DICE_EPS).unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut a = p.clone();
            a.data_mut()[i] += h;
            let mut b = p.clone();
            b.data_mut()[i] -= h;
            let fd = (soft_dice_loss(&a, &t, DICE_EPS).unwrap().0 - soft_dice_loss(&b, &t, DICE_EPS).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let l = Tensor::<f64>::from_f64(&[2, 3], &[0.2, -0.7, 1.4, 0.9, 0.1, -0.5]).unwrap();
        let y = [2, 0];
        let (_, g) = cross_entropy(&l, &y).unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut a = l.clone();
            a.data_mut()[i] += h;
            let mut b = l.clone();
            b.data_mut()[i] -= h;
            let fd = (cross_entropy(&a, &y).unwrap().0 - cross_entropy(&b, &y).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn neighbours_enumerate_offsets() {
        let mut all: Vec<(isize, isize)> = Vec::new();
        for di in -1..=1 {
            for dj in -1..=1 {
                if (di, dj) != (0, 0) {
                    all.push((di, dj));
                }
            }
        }
        let mut got = NEIGHBOURS.to_vec();
        got.sort();
        all.sort();
        assert_eq!(got, all);
    }

    #[test]
    fn transfer_checks_shapes_and_swaps_norm() {
        let gn = tiny_net();
        let bn = NetworkConfig {
            norm: NormKind::Batch,
            ..gn.clone()
        };
        let enc_gn = Encoder::new(&gn).unwrap();
        let enc_bn = Encoder::new(&bn).unwrap();
        let src = ParamSet::<f64>::init(enc_gn.specs(), &mut rng_for(0, &[]));
        let moved = transfer(&src, enc_bn.specs(), &[], &mut rng_for(1, &[])).unwrap();
        moved.check_layout(enc_bn.specs()).unwrap();
        assert_eq!(moved.find("encoder.stage1.norm1.gamma"), src.find("encoder.stage1.norm1.gamma"));
        let rm = moved.find("encoder.stage1.norm1.running_var").unwrap();
        assert!(rm.value.data().iter().all(|&v| v == 1.0));
        let three = Encoder::new(&NetworkConfig {
            dims: Dims::Three,
            ..gn.clone()
        })
        .unwrap();
        assert!(matches!(
            transfer(&src, three.specs(), &[], &mut rng_for(1, &[])),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    fn corpus(n: usize, classes: usize, seed: u64) -> Corpus<f32> {
        generate(&SynthSpec {
            count: n,
            size: [16, 16, 1],
            classes,
            seed,
            ..SynthSpec::desk(Dims::Two)
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_reports_initial_model() {
        let c = corpus(12, 2, 0);
        let cfg = FinetuneConfig {
            max_epochs: 0,
            ..FinetuneConfig::default()
        };
        let data = TaskData {
            train: &c,
            val: &c,
            test: &c,
        };
        let report = finetune_classifier::<f32>(&tiny_net(), None, data, 2, &cfg).unwrap();
        let direct = Classifier::<f32>::new(&tiny_net(), 2, None, 0).unwrap().evaluate(&c).unwrap();
        assert_eq!(report, direct);
    }

    #[test]
    fn separable_classes_are_learned() {
        // Class 1 images are the class 0 images brightened by a constant.
        let separable = |seed| {
            let mut c = corpus(32, 1, seed);
            let per = c.images.numel() / c.len();
            c.labels = (0..c.len()).map(|i| i % 2).collect();
            for (i, chunk) in c.images.data_mut().chunks_mut(per).enumerate() {
                if i % 2 == 1 {
                    chunk.iter_mut().for_each(|v| *v += 1.0);
                }
            }
            c
        };
        let train = separable(1);
        let test = separable(2);
        let cfg = FinetuneConfig {
            max_epochs: 30,
            lr: 3e-3,
            batch_size: 16,
            ..FinetuneConfig::default()
        };
        let data = TaskData {
            train: &train,
            val: &test,
            test: &test,
        };
        let r = finetune_classifier::<f32>(&tiny_net(), None, data, 2, &cfg).unwrap();
        assert!(r.mean >= 0.99, "{r:?}");
    }

    #[test]
    fn probe_keeps_encoder_frozen_and_labels_balanced() {
        let c = corpus(8, 3, 3);
        let enc = Encoder::new(&tiny_net()).unwrap();
        let params = ParamSet::<f32>::init(enc.specs(), &mut rng_for(0, &[]));
        let before = params.clone();
        let cfg = ProbeConfig {
            epochs: 3,
            ..ProbeConfig::default()
        };
        for task in [ProbeTask::Rotation, ProbeTask::Position] {
            let r = linear_probe(task, &enc, &params, &c.images, &c.images, &cfg).unwrap();
            assert_eq!(r.per_class.len(), task.classes());
            assert_eq!(r.samples, 8 * task.classes());
        }
        assert_eq!(params, before);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(v in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let labels: Vec<bool> = v.iter().map(|p| p.1).collect();
            let pos: Vec<f64> = v.iter().filter(|p| p.1).map(|p| p.0 as f64).collect();
            let neg: Vec<f64> = v.iter().filter(|p| !p.1).map(|p| p.0 as f64).collect();
            prop_assume!(!pos.is_empty() && !neg.is_empty());
            let mut wins = 0.0;
            for a in &pos {
                for b in &neg {
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
            let want = wins / (pos.len() * neg.len()) as f64;
            prop_assert!((auc(&scores, &labels).unwrap() - want).abs() < 1e-12);
            // Invariance under a strictly increasing map.
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert!((auc(&warped, &labels).unwrap() - want).abs() < 1e-12);
        }

        #[test]
        fn dice_symmetric_and_permutation_invariant(
            v in prop::collection::vec((any::<bool>(), any::<bool>()), 1..50),
            seed in any::<u64>(),
        ) {
            let p: Vec<f64> = v.iter().map(|x| x.0 as u8 as f64).collect();
            let g: Vec<f64> = v.iter().map(|x| x.1 as u8 as f64).collect();
            let d = dice(&p, &g, DICE_EPS).unwrap();
            prop_assert_eq!(d, dice(&g, &p, DICE_EPS).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            let mut perm: Vec<usize> = (0..p.len()).collect();
            perm.shuffle(&mut rng_for(seed, &[]));
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
            prop_assert_eq!(d, dice(&pp, &gp, DICE_EPS).unwrap());
        }
    }
}
