//! Encoder, transformation-conditioned attention, projector and U-Net decoder.
//!
//! All tensors are rank 5, `[N, C, D, H, W]`; 2D data uses `D = 1` and
//! kernels of depth one.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{Bound, Conv, Linear, Norm, NormKind, ParamSet, ParamSpec, Registry};
use crate::scalar::Scalar;
use crate::transforms::Dims;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub dims: Dims,
    pub in_channels: usize,
    /// Width of the first stage; each later stage doubles it.
    pub base_width: usize,
    pub stages: usize,
    pub embed_dim: usize,
    pub norm: NormKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk(Dims::Two)
    }
}

impl NetworkConfig {
    /// Small default sizes: four stages, width 16 in 2D and 8 in 3D.
    pub fn desk(dims: Dims) -> Self {
        Self {
            dims,
            in_channels: 1,
            base_width: match dims {
                Dims::Two => 16,
                Dims::Three => 8,
            },
            stages: 4,
            embed_dim: 128,
            norm: NormKind::default(),
        }
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Channels of the bottleneck `F^l`.
    pub fn top_width(&self) -> usize {
        self.width(self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.stages == 0 || self.embed_dim == 0 {
            return Err(crate::Error::InvalidConfig("network sizes must be positive".into()));
        }
        if let NormKind::Group { groups } = self.norm {
            if groups == 0 || self.base_width % groups != 0 {
                return Err(crate::Error::InvalidConfig(format!(
                    "group count {groups} must divide the base width {}",
                    self.base_width
                )));
            }
        }
        Ok(())
    }

    /// Input side must be divisible by this along every downsampled axis.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages
    }

    fn conv3(&self, stride: usize) -> ConvGeom {
        match self.dims {
            Dims::Two => ConvGeom {
                kernel: [1, 3, 3],
                stride: [1, stride, stride],
                pad: [0, 1, 1],
            },
            Dims::Three => ConvGeom {
                kernel: [3, 3, 3],
                stride: [stride; 3],
                pad: [1; 3],
            },
        }
    }

    fn conv1(&self, stride: usize) -> ConvGeom {
        let s = match self.dims {
            Dims::Two => [1, stride, stride],
            Dims::Three => [stride; 3],
        };
        ConvGeom {
            kernel: [1, 1, 1],
            stride: s,
            pad: [0; 3],
        }
    }

    /// Upsampling factor that undoes one stage.
    pub fn up_factor(&self) -> [usize; 3] {
        match self.dims {
            Dims::Two => [1, 2, 2],
            Dims::Three => [2, 2, 2],
        }
    }

    pub fn indicator_len(&self) -> usize {
        self.dims.indicator_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    /// Two 3x3 convolutions with a strided 1x1 shortcut.
    Residual {
        conv1: Conv,
        norm1: Norm,
        conv2: Conv,
        norm2: Norm,
        short: Conv,
        short_norm: Norm,
    },
    /// Two 3x3x3 convolutions, the first strided.
    Plain {
        conv1: Conv,
        norm1: Norm,
        conv2: Conv,
        norm2: Norm,
    },
}

impl Stage {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound, x: Var) -> Result<Var> {
        match self {
            Stage::Residual {
                conv1,
                norm1,
                conv2,
                norm2,
                short,
                short_norm,
            } => {
                let h = conv1.forward(g, p, x)?;
                let h = norm1.forward(g, p, h)?;
                let h = g.relu(h);
                let h = conv2.forward(g, p, h)?;
                let h = norm2.forward(g, p, h)?;
                let s = short.forward(g, p, x)?;
                let s = short_norm.forward(g, p, s)?;
                let y = g.add(h, s)?;
                Ok(g.relu(y))
            }
            Stage::Plain {
                conv1,
                norm1,
                conv2,
                norm2,
            } => {
                let h = conv1.forward(g, p, x)?;
                let h = norm1.forward(g, p, h)?;
                let h = g.relu(h);
                let h = conv2.forward(g, p, h)?;
                let h = norm2.forward(g, p, h)?;
                Ok(g.relu(h))
            }
        }
    }
}

/// Transformation-conditioned channel attention at the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct TransAtt {
    embed1: Linear,
    embed2: Linear,
    /// `W_θ`, `[C, C²]`, no bias.
    mix: Linear,
    conv: Conv,
}

/// Intermediate values of one attention pass, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct TransAttTrace {
    pub indicator_embedding: Var,
    pub pooled: Var,
    pub weights: Var,
    pub output: Var,
}

impl TransAtt {
    fn declare(reg: &mut Registry, cfg: &NetworkConfig) -> Self {
        let c = cfg.top_width();
        Self {
            embed1: reg.linear("transatt.embed1", cfg.indicator_len(), c, true),
            embed2: reg.linear("transatt.embed2", c, c, true),
            mix: reg.linear("transatt.mix", c * c, c, false),
            conv: reg.conv("transatt.conv", c, c, cfg.conv3(1), true),
        }
    }

    /// `F^{l+1} = conv(F^l ⊙ sigmoid(ReLU(W_θ vec(f^p ⊗ GAP(F^l)))))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, top: Var, indicator: Var) -> Result<TransAttTrace> {
        let fp = self.embed1.forward(g, p, indicator)?;
        let fp = g.relu(fp);
        let fp = self.embed2.forward(g, p, fp)?;
        let fl = g.global_avg_pool(top)?;
        let m = g.outer(fp, fl)?;
        let q = self.mix.forward(g, p, m)?;
        let q = g.relu(q);
        let w = g.sigmoid(q);
        let scaled = g.scale_channels(top, w)?;
        let output = self.conv.forward(g, p, scaled)?;
        Ok(TransAttTrace {
            indicator_embedding: fp,
            pooled: fl,
            weights: w,
            output,
        })
    }

    pub fn mix_weight(&self) -> usize {
        self.mix.weight
    }
}

/// Global average pool, two fully connected layers, L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    fc1: Linear,
    fc2: Linear,
}

impl Projector {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let h = g.global_avg_pool(features)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.l2_normalize(h)
    }

    pub fn fc2_weight(&self) -> usize {
        self.fc2.weight
    }

    pub fn fc2_bias(&self) -> usize {
        self.fc2.bias.expect("projector has bias")
    }
}

/// Parameter layout of one encoder together with its attention block and
/// projector. The ordinary and momentum copies share this layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    stages: Vec<Stage>,
    pub transatt: TransAtt,
    pub projector: Projector,
    specs: Vec<ParamSpec>,
}

/// Feature maps `F^1..F^l` plus the attended bottleneck `F^{l+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Var>,
    pub top: Var,
}

impl Encoder {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry::new();
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut cin = cfg.in_channels;
        for s in 0..cfg.stages {
            let w = cfg.width(s);
            let name = |part: &str| format!("encoder.stage{}.{part}", s + 1);
            let stage = match cfg.dims {
                Dims::Two => Stage::Residual {
                    conv1: reg.conv(&name("conv1"), cin, w, cfg.conv3(2), false),
                    norm1: reg.norm(&name("norm1"), w, cfg.norm),
                    conv2: reg.conv(&name("conv2"), w, w, cfg.conv3(1), false),
                    norm2: reg.norm(&name("norm2"), w, cfg.norm),
                    short: reg.conv(&name("shortcut"), cin, w, cfg.conv1(2), false),
                    short_norm: reg.norm(&name("shortcut_norm"), w, cfg.norm),
                },
                Dims::Three => Stage::Plain {
                    conv1: reg.conv(&name("conv1"), cin, w, cfg.conv3(2), false),
                    norm1: reg.norm(&name("norm1"), w, cfg.norm),
                    conv2: reg.conv(&name("conv2"), w, w, cfg.conv3(1), false),
                    norm2: reg.norm(&name("norm2"), w, cfg.norm),
                },
            };
            stages.push(stage);
            cin = w;
        }
        let transatt = TransAtt::declare(&mut reg, cfg);
        let c = cfg.top_width();
        let projector = Projector {
            fc1: reg.linear("projector.fc1", c, c, true),
            fc2: reg.linear("projector.fc2", c, cfg.embed_dim, true),
        };
        Ok(Self {
            stages,
            transatt,
            projector,
            specs: reg.into_specs(),
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Number of leading parameters that belong to the convolutional stages.
    pub fn stage_param_count(&self) -> usize {
        self.specs
            .iter()
            .take_while(|s| s.name.starts_with("encoder."))
            .count()
    }

    /// `F^1..F^l`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound, x: Var) -> Result<Vec<Var>> {
        let shape = g.value(x).shape();
        if shape.len() != 5 {
            return Err(shape_err!("encoder input must be [N, C, D, H, W], got {:?}", shape));
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for s in &self.stages {
            h = s.forward(g, p, h)?;
            levels.push(h);
        }
        Ok(levels)
    }

    /// Features plus the attended bottleneck.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound, x: Var, indicator: Var) -> Result<Pyramid> {
        let levels = self.features(g, p, x)?;
        let top = self.attend(g, p, &levels, Some(indicator))?;
        Ok(Pyramid { levels, top })
    }

    /// `F^{l+1}`: attention over `F^l`, or `F^l` itself when `indicator` is
    /// `None` (attention disabled).
    pub fn attend<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, levels: &[Var], indicator: Option<Var>) -> Result<Var> {
        let last = *levels.last().ok_or_else(|| shape_err!("empty feature pyramid"))?;
        match indicator {
            Some(ind) => Ok(self.transatt.forward(g, p, last, ind)?.output),
            None => Ok(last),
        }
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, top: Var) -> Result<Var> {
        self.projector.forward(g, p, top)
    }
}

/// `F^i_h = λ F^i_o + (1 - λ) F^i_m` for every stage output. The caller
/// attends the mixed bottleneck with the ordinary attention block.
pub fn cross_mix<T: Scalar>(g: &mut Graph<T>, ordinary: &[Var], momentum: &[Var], lambda: T) -> Result<Vec<Var>> {
    if ordinary.len() != momentum.len() {
        return Err(shape_err!(
            "pyramids of depth {} and {} cannot be mixed",
            ordinary.len(),
            momentum.len()
        ));
    }
    ordinary
        .iter()
        .zip(momentum)
        .map(|(&o, &m)| g.lerp(o, m, lambda))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
struct UpBlock {
    conv: Conv,
    norm: Norm,
}

/// U-Net decoder: the attended bottleneck is joined with `F^l`, then each
/// upsampling step concatenates the matching stage output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    bottleneck: UpBlock,
    /// Ordered from the deepest skip (`F^{l-1}`) to `F^1`.
    ups: Vec<UpBlock>,
    head: UpBlock,
    out: Conv,
    up: [usize; 3],
    specs: Vec<ParamSpec>,
}

impl Decoder {
    pub fn new(cfg: &NetworkConfig, out_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry::new();
        let top = cfg.top_width();
        let bottleneck = UpBlock {
            conv: reg.conv("decoder.bottleneck.conv", 2 * top, top, cfg.conv3(1), false),
            norm: reg.norm("decoder.bottleneck.norm", top, cfg.norm),
        };
        let mut ups = Vec::new();
        let mut cur = top;
        for s in (0..cfg.stages - 1).rev() {
            let w = cfg.width(s);
            ups.push(UpBlock {
                conv: reg.conv(&format!("decoder.up{}.conv", s + 1), cur + w, w, cfg.conv3(1), false),
                norm: reg.norm(&format!("decoder.up{}.norm", s + 1), w, cfg.norm),
            });
            cur = w;
        }
        let head = UpBlock {
            conv: reg.conv("decoder.head.conv", cur, cur, cfg.conv3(1), false),
            norm: reg.norm("decoder.head.norm", cur, cfg.norm),
        };
        let out = reg.conv("decoder.out", cur, out_channels, cfg.conv1(1), true);
        Ok(Self {
            bottleneck,
            ups,
            head,
            out,
            up: cfg.up_factor(),
            specs: reg.into_specs(),
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn block<T: Scalar>(b: &UpBlock, g: &mut Graph<T>, p: &mut Bound, x: Var) -> Result<Var> {
        let h = b.conv.forward(g, p, x)?;
        let h = b.norm.forward(g, p, h)?;
        Ok(g.relu(h))
    }

    /// Sigmoid output at the encoder's input resolution.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound, pyr: &Pyramid) -> Result<Var> {
        self.decode_logits(g, p, pyr).map(|v| g.sigmoid(v))
    }

    /// Pre-activation output.
    pub fn decode_logits<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound, pyr: &Pyramid) -> Result<Var> {
        let n = pyr.levels.len();
        if n != self.ups.len() + 1 {
            return Err(shape_err!("decoder expects {} levels, got {}", self.ups.len() + 1, n));
        }
        let joined = g.concat(pyr.top, pyr.levels[n - 1])?;
        let mut h = Self::block(&self.bottleneck, g, p, joined)?;
        for (k, b) in self.ups.iter().enumerate() {
            let skip = pyr.levels[n - 2 - k];
            let u = g.upsample(h, self.up)?;
            let joined = g.concat(u, skip)?;
            h = Self::block(b, g, p, joined)?;
        }
        let u = g.upsample(h, self.up)?;
        let h = Self::block(&self.head, g, p, u)?;
        self.out.forward(g, p, h)
    }
}

/// Every parameter of a pretraining model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub ordinary: ParamSet<T>,
    pub momentum: ParamSet<T>,
    pub decoder: ParamSet<T>,
}

impl<T: Scalar> ModelState<T> {
    /// `θ_m ← β θ_m + (1 − β) θ_o` over the encoder, attention and projector.
    pub fn ema_update(&mut self, beta: T) -> Result<()> {
        self.momentum.ema_from(&self.ordinary, beta)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            ordinary: self.ordinary.cast(),
            momentum: self.momentum.cast(),
            decoder: self.decoder.cast(),
        }
    }
}

/// Encoder layout shared by all branches plus the reconstruction decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let encoder = Encoder::new(&config)?;
        let decoder = Decoder::new(&config, config.in_channels)?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Fresh parameters; the momentum encoder starts as an exact copy.
    pub fn init<T: Scalar, R: RngCore + ?Sized>(&self, rng: &mut R) -> ModelState<T> {
        let ordinary = ParamSet::init(self.encoder.specs(), rng);
        let decoder = ParamSet::init(self.decoder.specs(), rng);
        ModelState {
            momentum: ordinary.clone(),
            ordinary,
            decoder,
        }
    }

    pub fn check<T: Scalar>(&self, state: &ModelState<T>) -> Result<()> {
        state.ordinary.check_layout(self.encoder.specs())?;
        state.momentum.check_layout(self.encoder.specs())?;
        state.decoder.check_layout(self.decoder.specs())
    }

    /// Checks the spatial extent of `[N, C, D, H, W]` input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        let ok = shape.len() == 5
            && shape[1] == self.config.in_channels
            && shape[3] % m == 0
            && shape[4] % m == 0
            && shape[3] > 0
            && shape[4] > 0
            && match self.config.dims {
                Dims::Two => shape[2] == 1,
                Dims::Three => shape[2] % m == 0 && shape[2] > 0,
            };
        if ok {
            Ok(())
        } else {
            Err(shape_err!(
                "input {:?} does not fit a {}-channel {:?} network (spatial sides divisible by {m})",
                shape,
                self.config.in_channels,
                self.config.dims
            ))
        }
    }
}
