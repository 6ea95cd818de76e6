//! Named parameter storage and the layers built on top of the graph.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, StatGroups, Var};
use crate::kernels::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable weights versus running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// An ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn from_params(params: Vec<Param<T>>) -> Self {
        Self { params }
    }

    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let params = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Uniform(b) => (0..n).map(|_| T::from_f64(rng.gen_range(-b..=b))).collect(),
                    Init::Zeros => alloc::vec![T::zero(); n],
                    Init::Ones => alloc::vec![T::one(); n],
                };
                Param {
                    name: s.name.clone(),
                    kind: s.kind,
                    value: Tensor::from_vec(&s.shape, data).expect("spec shape"),
                }
            })
            .collect();
        Self { params }
    }

    /// Checks names, kinds and shapes against a layout.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.params.len() != specs.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (p, s) in self.params.iter().zip(specs) {
            if p.name != s.name || p.kind != s.kind || p.value.shape() != s.shape.as_slice() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    /// `(index, data)` of every trainable tensor.
    pub fn weights_mut(&mut self) -> impl Iterator<Item = (usize, &mut [T])> {
        self.params
            .iter_mut()
            .enumerate()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(i, p)| (i, p.value.data_mut()))
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// `self <- beta * self + (1 - beta) * source` over weights; buffers are
    /// left alone.
    pub fn ema_from(&mut self, source: &Self, beta: T) -> Result<()> {
        if self.params.len() != source.params.len() {
            return Err(shape_err!(
                "EMA between parameter sets of size {} and {}",
                self.params.len(),
                source.params.len()
            ));
        }
        let keep = T::one() - beta;
        for (dst, src) in self.params.iter_mut().zip(&source.params) {
            dst.value.expect_shape(src.value.shape())?;
            if dst.kind != ParamKind::Weight {
                continue;
            }
            for (d, &s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d = beta * *d + keep * s;
            }
        }
        Ok(())
    }
}

/// Records parameter specs while a network layout is being declared.
#[derive(Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, shape: &[usize], kind: ParamKind, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
            init,
        });
        self.specs.len() - 1
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Conv {
        let fan_in = cin * geom.taps();
        let weight = self.push(
            format!("{name}.weight"),
            &[cout, cin, geom.kernel[0], geom.kernel[1], geom.kernel[2]],
            ParamKind::Weight,
            Init::Uniform(libm::sqrt(6.0 / fan_in as f64)),
        );
        let bias = bias.then(|| {
            self.push(
                format!("{name}.bias"),
                &[cout],
                ParamKind::Weight,
                Init::Uniform(1.0 / libm::sqrt(fan_in as f64)),
            )
        });
        Conv { weight, bias, geom }
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) -> Linear {
        let bound = 1.0 / libm::sqrt(fin as f64);
        let weight = self.push(format!("{name}.weight"), &[fout, fin], ParamKind::Weight, Init::Uniform(bound));
        let bias = bias.then(|| self.push(format!("{name}.bias"), &[fout], ParamKind::Weight, Init::Uniform(bound)));
        Linear { weight, bias }
    }

    pub fn norm(&mut self, name: &str, channels: usize, kind: NormKind) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), &[channels], ParamKind::Weight, Init::Ones);
        let beta = self.push(format!("{name}.beta"), &[channels], ParamKind::Weight, Init::Zeros);
        let running = match kind {
            NormKind::Batch => Some((
                self.push(format!("{name}.running_mean"), &[channels], ParamKind::Buffer, Init::Zeros),
                self.push(format!("{name}.running_var"), &[channels], ParamKind::Buffer, Init::Ones),
            )),
            NormKind::Group { .. } => None,
        };
        Norm {
            kind,
            gamma,
            beta,
            running,
        }
    }
}

/// Normalization layer family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum NormKind {
    Group { groups: usize },
    Batch,
}

impl Default for NormKind {
    fn default() -> Self {
        NormKind::Group { groups: 4 }
    }
}

/// Parameters of one [`ParamSet`] bound into a graph.
pub struct Bound {
    vars: Vec<Var>,
    train: bool,
    stat_updates: Vec<StatUpdate>,
}

/// Batch statistics to fold into a batch-norm layer's running buffers.
#[derive(Clone, Copy, Debug)]
pub struct StatUpdate {
    pub mean: usize,
    pub var: usize,
    pub node: Var,
}

/// Running-statistic momentum of batch normalization.
pub const RUNNING_MOMENTUM: f64 = 0.1;

impl Bound {
    /// Binds every tensor of `params`. Weights are differentiable when
    /// `trainable`; buffers never are. `train` selects batch statistics for
    /// batch normalization.
    pub fn new<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool, train: bool) -> Self {
        let vars = params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable && p.kind == ParamKind::Weight))
            .collect();
        Self {
            vars,
            train,
            stat_updates: Vec::new(),
        }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        core::mem::take(&mut self.stat_updates)
    }
}

/// Folds recorded batch statistics into running buffers.
pub fn apply_stat_updates<T: Scalar>(params: &mut ParamSet<T>, g: &Graph<T>, updates: &[StatUpdate]) {
    let m = T::from_f64(RUNNING_MOMENTUM);
    for u in updates {
        let Some((mean, var)) = g.batch_stats(u.node) else { continue };
        for (dst, &v) in params.get_mut(u.mean).value.data_mut().iter_mut().zip(mean) {
            *dst = (T::one() - m) * *dst + m * v;
        }
        for (dst, &v) in params.get_mut(u.var).value.data_mut().iter_mut().zip(var) {
            *dst = (T::one() - m) * *dst + m * v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: usize,
    pub beta: usize,
    pub running: Option<(usize, usize)>,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound, x: Var) -> Result<Var> {
        let y = match (self.kind, self.running) {
            (NormKind::Group { groups }, _) => g.normalize(x, StatGroups::PerSample { groups })?,
            (NormKind::Batch, Some((mean, var))) if p.train => {
                let y = g.normalize(x, StatGroups::PerChannel)?;
                p.stat_updates.push(StatUpdate { mean, var, node: y });
                y
            }
            (NormKind::Batch, Some((mean, var))) => {
                let m = g.value(p.var(mean)).data().to_vec();
                let v = g.value(p.var(var)).data().to_vec();
                g.standardize(x, &m, &v)?
            }
            (NormKind::Batch, None) => return Err(shape_err!("batch norm layer without running buffers")),
        };
        let y = g.scale_channels(y, p.var(self.gamma))?;
        g.shift_channels(y, p.var(self.beta))
    }
}
