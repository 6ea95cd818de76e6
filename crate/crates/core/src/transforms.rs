//! Target transformations, their indicator vectors, low-level corruptions,
//! view augmentation, paired volumetric crops and triplet assembly.
//!
//! Images are rank-4 `[C, D, H, W]` tensors (`D = 1` for 2D); batches are
//! rank 5. The x axis is `W`, y is `H` and z is `D`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng as ChaRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial dimensionality of the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dims {
    Two,
    Three,
}

impl TryFrom<u8> for Dims {
    type Error = &'static str;

    fn try_from(v: u8) -> core::result::Result<Self, Self::Error> {
        match v {
            2 => Ok(Dims::Two),
            3 => Ok(Dims::Three),
            _ => Err("dims must be 2 or 3"),
        }
    }
}

impl From<Dims> for u8 {
    fn from(d: Dims) -> u8 {
        match d {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }
}

impl Dims {
    /// Length of the indicator vector.
    pub fn indicator_len(self) -> usize {
        match self {
            Dims::Two => 6,
            Dims::Three => 7,
        }
    }
}

/// Counter-clockwise rotation in the xy-plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn from_quarter_turns(k: usize) -> Self {
        Self::ALL[k % 4]
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }
}

/// A target transformation: per-axis flips followed by an xy-plane rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TransformSpec {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Present exactly for 3D data.
    pub flip_z: Option<bool>,
    pub rotation: Rotation,
}

impl TransformSpec {
    pub fn identity(dims: Dims) -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            flip_z: (dims == Dims::Three).then_some(false),
            rotation: Rotation::R0,
        }
    }

    pub fn dims(&self) -> Dims {
        if self.flip_z.is_some() {
            Dims::Three
        } else {
            Dims::Two
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_x && !self.flip_y && self.flip_z != Some(true) && self.rotation == Rotation::R0
    }

    /// Every spec of the given dimensionality (32 in 3D, 16 in 2D).
    pub fn enumerate(dims: Dims) -> Vec<Self> {
        let zs: &[Option<bool>] = match dims {
            Dims::Two => &[None],
            Dims::Three => &[Some(false), Some(true)],
        };
        let mut out = Vec::new();
        for &flip_x in &[false, true] {
            for &flip_y in &[false, true] {
                for &flip_z in zs {
                    for rotation in Rotation::ALL {
                        out.push(Self {
                            flip_x,
                            flip_y,
                            flip_z,
                            rotation,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn indicator(&self) -> IndicatorVector {
        let mut c = vec![self.flip_x as u8, self.flip_y as u8];
        if let Some(z) = self.flip_z {
            c.push(z as u8);
        }
        let mut rot = [0u8; 4];
        rot[self.rotation.quarter_turns()] = 1;
        c.extend_from_slice(&rot);
        IndicatorVector(c)
    }

    pub fn from_indicator(v: &IndicatorVector) -> Result<Self> {
        let c = v.components();
        let flips = match c.len() {
            6 => 2,
            7 => 3,
            n => return Err(Error::InvalidIndicator(alloc::format!("length {n}, expected 6 or 7"))),
        };
        if c.iter().any(|&b| b > 1) {
            return Err(Error::InvalidIndicator("components must be 0 or 1".into()));
        }
        let rot = &c[flips..];
        if rot.iter().map(|&b| b as usize).sum::<usize>() != 1 {
            return Err(Error::InvalidIndicator("rotation components must be one-hot".into()));
        }
        let k = rot.iter().position(|&b| b == 1).expect("one-hot");
        Ok(Self {
            flip_x: c[0] == 1,
            flip_y: c[1] == 1,
            flip_z: (flips == 3).then(|| c[2] == 1),
            rotation: Rotation::from_quarter_turns(k),
        })
    }
}

/// Binary encoding of a [`TransformSpec`]: `[F.x, F.y, (F.z,) R.0, R.90,
/// R.180, R.270]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndicatorVector(Vec<u8>);

impl IndicatorVector {
    pub fn new(components: Vec<u8>) -> Result<Self> {
        let v = Self(components);
        TransformSpec::from_indicator(&v)?;
        Ok(v)
    }

    pub fn components(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Stacks the indicator vectors of `specs` into an `[N, k]` tensor.
pub fn indicator_batch<T: Scalar>(specs: &[TransformSpec]) -> Result<Tensor<T>> {
    let k = specs.first().map(|s| s.dims().indicator_len()).unwrap_or(0);
    let mut data = Vec::with_capacity(specs.len() * k);
    for s in specs {
        let ind = s.indicator();
        if ind.len() != k {
            return Err(shape_err!("mixed 2D and 3D transform specs in one batch"));
        }
        data.extend(ind.components().iter().map(|&b| T::from_f64(b as f64)));
    }
    Tensor::from_vec(&[specs.len(), k], data)
}

/// Which target transformations may be drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// Always the identity (self-reconstruction).
    Identity,
    /// Random flips, rotation fixed at 0 degrees.
    FlipOnly,
    /// Random flips and quarter-turn rotations.
    Full,
}

/// Draws a transformation with fair flips and a uniform rotation.
///
/// Each decision consumes one uniform draw in `[0, 1)`; a flag is set when
/// its draw is at least one half, so an all-zero stream yields the identity.
pub fn sample_transform<R: RngCore + ?Sized>(rng: &mut R, dims: Dims) -> TransformSpec {
    sample_transform_with(rng, dims, TargetMode::Full, true)
}

/// As [`sample_transform`], restricted by `mode`. When `square_xy` is false
/// only the 0 and 180 degree rotations are legal and the rotation is drawn
/// from that subset.
pub fn sample_transform_with<R: RngCore + ?Sized>(
    rng: &mut R,
    dims: Dims,
    mode: TargetMode,
    square_xy: bool,
) -> TransformSpec {
    if mode == TargetMode::Identity {
        return TransformSpec::identity(dims);
    }
    let coin = |r: &mut R| r.gen::<f64>() >= 0.5;
    let flip_x = coin(rng);
    let flip_y = coin(rng);
    let flip_z = (dims == Dims::Three).then(|| coin(rng));
    let rotation = match mode {
        TargetMode::FlipOnly => Rotation::R0,
        _ => {
            let u = rng.gen::<f64>();
            if square_xy {
                Rotation::from_quarter_turns(((u * 4.0) as usize).min(3))
            } else if u < 0.5 {
                Rotation::R0
            } else {
                Rotation::R180
            }
        }
    };
    TransformSpec {
        flip_x,
        flip_y,
        flip_z,
        rotation,
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(shape_err!("expected a rank-4 [C, D, H, W] image, got {:?}", shape)),
    }
}

/// Applies flips (x, y, then z) and then the counter-clockwise rotation.
pub fn apply_transform<T: Scalar>(spec: &TransformSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, d, h, w] = dims4(x.shape())?;
    if spec.flip_z.is_some() != (d > 1 || spec.dims() == Dims::Three) && d > 1 {
        return Err(shape_err!("3D volume needs a 3D transform spec"));
    }
    let k = spec.rotation.quarter_turns();
    if k % 2 == 1 && h != w {
        return Err(Error::NonSquareRotation {
            degrees: spec.rotation.degrees(),
            height: h,
            width: w,
        });
    }
    let fz = spec.flip_z == Some(true);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for z in 0..d {
            let sz = if fz { d - 1 - z } else { z };
            let base_out = (ch * d + z) * h * w;
            let base_in = (ch * d + sz) * h * w;
            for i in 0..h {
                for j in 0..w {
                    // Position in the flipped image that lands on (i, j) after rotation.
                    let (fi, fj) = match k {
                        0 => (i, j),
                        1 => (j, w - 1 - i),
                        2 => (h - 1 - i, w - 1 - j),
                        _ => (w - 1 - j, i),
                    };
                    let si = if spec.flip_y { h - 1 - fi } else { fi };
                    let sj = if spec.flip_x { w - 1 - fj } else { fj };
                    out[base_out + i * w + j] = src[base_in + si * w + sj];
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Applies one spec per sample of an `[N, C, D, H, W]` batch.
pub fn apply_transform_batch<T: Scalar>(specs: &[TransformSpec], x: &Tensor<T>) -> Result<Tensor<T>> {
    let samples = x.unstack();
    if samples.len() != specs.len() {
        return Err(shape_err!("{} specs for a batch of {}", specs.len(), samples.len()));
    }
    let out = samples
        .iter()
        .zip(specs)
        .map(|(s, spec)| apply_transform(spec, s))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&out)
}

/// Axis-aligned half-open box `[start, start + size)` over `[D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Box3 {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

impl Box3 {
    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    pub fn end(&self, a: usize) -> usize {
        self.start[a] + self.size[a]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < self.end(a))
    }

    pub fn intersection(&self, other: &Box3) -> usize {
        (0..3)
            .map(|a| {
                let lo = self.start[a].max(other.start[a]);
                let hi = self.end(a).min(other.end(a));
                hi.saturating_sub(lo)
            })
            .product()
    }

    pub fn iou(&self, other: &Box3) -> f64 {
        let inter = self.intersection(other);
        let union = self.volume() + other.volume() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Ranges of the low-level corruptions plus the seed that fixes one draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub inpaint_count: (usize, usize),
    pub inpaint_fraction: (f64, f64),
    pub outpaint_keep_fraction: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub p_inpaint: f64,
    pub p_outpaint: f64,
    pub p_blur: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            inpaint_count: (1, 5),
            inpaint_fraction: (0.10, 0.25),
            outpaint_keep_fraction: (0.25, 0.6),
            blur_sigma: (0.1, 2.0),
            p_inpaint: 0.5,
            p_outpaint: 0.5,
            p_blur: 0.5,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |(a, b): (f64, f64)| a > 0.0 && b < 1.0 && a <= b;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !frac(self.inpaint_fraction) || !frac(self.outpaint_keep_fraction) {
            return Err(Error::InvalidConfig("corruption fractions must lie in (0, 1)".into()));
        }
        if self.blur_sigma.0 < 0.0 || self.blur_sigma.0 > self.blur_sigma.1 {
            return Err(Error::InvalidConfig("blur sigma range must be non-negative".into()));
        }
        if self.inpaint_count.0 > self.inpaint_count.1 {
            return Err(Error::InvalidConfig("inpaint count range is reversed".into()));
        }
        if !prob(self.p_inpaint) || !prob(self.p_outpaint) || !prob(self.p_blur) {
            return Err(Error::InvalidConfig("corruption probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws which corruptions apply and where, for an image of spatial
    /// extent `[D, H, W]`.
    pub fn plan(&self, extent: [usize; 3]) -> CorruptionPlan {
        let mut rng = ChaRng::seed_from_u64(self.seed);
        let blur = (rng.gen::<f64>() < self.p_blur).then(|| uniform(&mut rng, self.blur_sigma));
        let mut inpaint = Vec::new();
        if rng.gen::<f64>() < self.p_inpaint {
            let count = rng.gen_range(self.inpaint_count.0..=self.inpaint_count.1);
            for _ in 0..count {
                let f = uniform(&mut rng, self.inpaint_fraction);
                inpaint.push(random_box(&mut rng, extent, f));
            }
        }
        let outpaint = (rng.gen::<f64>() < self.p_outpaint).then(|| {
            let keep = uniform(&mut rng, self.outpaint_keep_fraction);
            random_box(&mut rng, extent, keep)
        });
        CorruptionPlan {
            blur,
            inpaint,
            outpaint,
            noise_seed: rng.next_u64(),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// A box covering roughly `fraction` of the non-singleton extent.
fn random_box<R: Rng + ?Sized>(rng: &mut R, extent: [usize; 3], fraction: f64) -> Box3 {
    let active = extent.iter().filter(|&&e| e > 1).count().max(1);
    let side = libm::pow(fraction, 1.0 / active as f64);
    let mut start = [0; 3];
    let mut size = [1; 3];
    for a in 0..3 {
        if extent[a] <= 1 {
            continue;
        }
        size[a] = (libm::round(extent[a] as f64 * side) as usize).clamp(1, extent[a]);
        start[a] = rng.gen_range(0..=extent[a] - size[a]);
    }
    Box3 { start, size }
}

/// One concrete draw of corruptions.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionPlan {
    pub blur: Option<f64>,
    pub inpaint: Vec<Box3>,
    /// Window kept intact; everything outside is replaced with noise.
    pub outpaint: Option<Box3>,
    pub noise_seed: u64,
}

impl CorruptionPlan {
    pub fn none() -> Self {
        Self {
            blur: None,
            inpaint: Vec::new(),
            outpaint: None,
            noise_seed: 0,
        }
    }

    /// Blur, then inpainting, then outpainting. Replacement noise is U(0, 1).
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, d, h, w] = dims4(x.shape())?;
        let mut out = match self.blur {
            Some(sigma) => gaussian_blur(x, sigma)?,
            None => x.clone(),
        };
        let mut rng = ChaRng::seed_from_u64(self.noise_seed);
        let data = out.data_mut();
        for b in &self.inpaint {
            for ch in 0..c {
                for z in b.start[0]..b.end(0) {
                    for y in b.start[1]..b.end(1) {
                        for xx in b.start[2]..b.end(2) {
                            data[((ch * d + z) * h + y) * w + xx] = T::from_f64(rng.gen::<f64>());
                        }
                    }
                }
            }
        }
        if let Some(keep) = &self.outpaint {
            for ch in 0..c {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..w {
                            if !keep.contains([z, y, xx]) {
                                data[((ch * d + z) * h + y) * w + xx] = T::from_f64(rng.gen::<f64>());
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Samples a corruption plan from `spec` (seeded by `spec.seed`) and applies it.
pub fn apply_corruption<T: Scalar>(spec: &CorruptionSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, d, h, w] = dims4(x.shape())?;
    spec.plan([d, h, w]).apply(x)
}

/// Normalized 1-D gaussian taps for `sigma`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = libm::ceil(3.0 * sigma) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable gaussian blur over every non-singleton spatial axis with
/// clamp-to-edge borders. `sigma = 0` is the identity.
pub fn gaussian_blur<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let [c, d, h, w] = dims4(x.shape())?;
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let taps: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::from_f64).collect();
    let r = (taps.len() / 2) as isize;
    let extent = [d, h, w];
    let strides = [h * w, w, 1];
    let mut cur = x.data().to_vec();
    for axis in 0..3 {
        let len = extent[axis];
        if len <= 1 {
            continue;
        }
        let stride = strides[axis];
        let mut next = vec![T::zero(); cur.len()];
        for ch in 0..c {
            let base = ch * d * h * w;
            for idx in 0..d * h * w {
                let pos = (idx / stride) % len;
                let line0 = base + idx - pos * stride;
                let mut acc = T::zero();
                for (t, &wt) in taps.iter().enumerate() {
                    let q = (pos as isize + t as isize - r).clamp(0, len as isize - 1) as usize;
                    acc += wt * cur[line0 + q * stride];
                }
                next[base + idx] = acc;
            }
        }
        cur = next;
    }
    Tensor::from_vec(x.shape(), cur)
}

/// Random crop, flip and small rotation used to produce the views X¹.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side of the square crop relative to the shorter image side.
    pub crop_scale: (f64, f64),
    pub flip: bool,
    /// Maximum absolute xy-plane rotation in degrees.
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            flip: true,
            max_rotation_deg: 10.0,
        }
    }
}

/// Paired volumetric crop sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Candidate crop sizes as `(x, y, z)`.
    pub sizes: Vec<[usize; 3]>,
    /// Resampled output size as `(x, y, z)`.
    pub out_size: [usize; 3],
    pub min_iou: f64,
    pub max_retries: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            sizes: vec![[64, 64, 32], [96, 96, 48], [96, 96, 96], [32, 32, 16], [112, 112, 56]],
            out_size: [64, 64, 32],
            min_iou: 0.2,
            max_retries: 100,
        }
    }
}

impl CropConfig {
    /// Output extent as `[D, H, W]`.
    pub fn out_extent(&self) -> [usize; 3] {
        [self.out_size[2], self.out_size[1], self.out_size[0]]
    }
}

/// Draws two equally sized boxes inside `extent` (`[D, H, W]`) whose IoU
/// reaches `cfg.min_iou`. The size comes uniformly from the menu entries that
/// fit the volume.
pub fn sample_paired_boxes<R: Rng + ?Sized>(extent: [usize; 3], rng: &mut R, cfg: &CropConfig) -> Result<(Box3, Box3)> {
    let fitting: Vec<[usize; 3]> = cfg
        .sizes
        .iter()
        .map(|s| [s[2], s[1], s[0]])
        .filter(|s| (0..3).all(|a| s[a] <= extent[a]))
        .collect();
    if fitting.is_empty() {
        return Err(shape_err!("volume {:?} is smaller than every crop size", extent));
    }
    let size = fitting[rng.gen_range(0..fitting.len())];
    for _ in 0..cfg.max_retries.max(1) {
        let mut a = Box3 { start: [0; 3], size };
        let mut b = a;
        for ax in 0..3 {
            let room = extent[ax] - size[ax];
            a.start[ax] = rng.gen_range(0..=room);
            // Partner offset within one box length of the first crop.
            let lo = a.start[ax].saturating_sub(size[ax]);
            let hi = (a.start[ax] + size[ax]).min(room);
            b.start[ax] = rng.gen_range(lo..=hi);
        }
        if a.iou(&b) >= cfg.min_iou {
            return Ok((a, b));
        }
    }
    Err(Error::CropSamplingFailed(cfg.max_retries.max(1)))
}

/// Two overlapping crops of `volume`, each trilinearly resampled to
/// `cfg.out_size`.
pub fn sample_paired_crops<T: Scalar, R: Rng + ?Sized>(
    volume: &Tensor<T>,
    rng: &mut R,
    cfg: &CropConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, d, h, w] = dims4(volume.shape())?;
    let (a, b) = sample_paired_boxes([d, h, w], rng, cfg)?;
    let out = cfg.out_extent();
    Ok((resample(volume, &a.into(), 0.0, out)?, resample(volume, &b.into(), 0.0, out)?))
}

/// A continuous source window `[start, start + size)` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub start: [f64; 3],
    pub size: [f64; 3],
}

impl From<Box3> for Window {
    fn from(b: Box3) -> Self {
        Window {
            start: b.start.map(|v| v as f64),
            size: b.size.map(|v| v as f64),
        }
    }
}

/// Samples `window` of `x` onto an `out` grid, rotating the xy-plane about
/// the window centre by `angle` radians. Linear interpolation on every
/// non-singleton axis with clamp-to-edge borders.
pub fn resample<T: Scalar>(x: &Tensor<T>, window: &Window, angle: f64, out: [usize; 3]) -> Result<Tensor<T>> {
    let [c, d, h, w] = dims4(x.shape())?;
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    let src = x.data();
    let [od, oh, ow] = out;
    let mut y = vec![T::zero(); c * od * oh * ow];
    let lerp_idx = |p: f64, len: usize| -> (usize, usize, f64) {
        let p = p.clamp(0.0, (len - 1) as f64);
        let i0 = libm::floor(p) as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    for z in 0..od {
        let sz = window.start[0] + (z as f64 + 0.5) / od as f64 * window.size[0] - 0.5;
        let (z0, z1, fz) = lerp_idx(sz, d);
        for i in 0..oh {
            let v = (i as f64 + 0.5) / oh as f64 - 0.5;
            for j in 0..ow {
                let u = (j as f64 + 0.5) / ow as f64 - 0.5;
                let ur = cos * u - sin * v;
                let vr = sin * u + cos * v;
                let sx = window.start[2] + (ur + 0.5) * window.size[2] - 0.5;
                let sy = window.start[1] + (vr + 0.5) * window.size[1] - 0.5;
                let (x0, x1, fx) = lerp_idx(sx, w);
                let (y0, y1, fy) = lerp_idx(sy, h);
                for ch in 0..c {
                    let at = |zz: usize, yy: usize, xx: usize| src[((ch * d + zz) * h + yy) * w + xx].as_f64();
                    let plane = |zz: usize| {
                        let top = at(zz, y0, x0) * (1.0 - fx) + at(zz, y0, x1) * fx;
                        let bot = at(zz, y1, x0) * (1.0 - fx) + at(zz, y1, x1) * fx;
                        top * (1.0 - fy) + bot * fy
                    };
                    let val = plane(z0) * (1.0 - fz) + plane(z1) * fz;
                    y[((ch * od + z) * oh + i) * ow + j] = T::from_f64(val);
                }
            }
        }
    }
    Tensor::from_vec(&[c, od, oh, ow], y)
}

/// Flips with probability one half per axis.
fn random_flip<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, dims: Dims, rng: &mut R) -> Result<Tensor<T>> {
    let spec = TransformSpec {
        flip_x: rng.gen::<f64>() >= 0.5,
        flip_y: rng.gen::<f64>() >= 0.5,
        flip_z: (dims == Dims::Three).then(|| rng.gen::<f64>() >= 0.5),
        rotation: Rotation::R0,
    };
    apply_transform(&spec, x)
}

fn small_angle<R: Rng + ?Sized>(rng: &mut R, max_deg: f64) -> f64 {
    if max_deg <= 0.0 {
        0.0
    } else {
        rng.gen_range(-max_deg..=max_deg).to_radians()
    }
}

/// A random square crop (resized back to full size), random flips and a
/// small xy rotation of one 2D image.
pub fn augment_view<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, rng: &mut R, cfg: &AugmentConfig) -> Result<Tensor<T>> {
    let [_, d, h, w] = dims4(x.shape())?;
    let side = h.min(w) as f64 * uniform(rng, cfg.crop_scale).clamp(0.0, 1.0);
    let y0 = rng.gen_range(0.0..=(h as f64 - side).max(0.0));
    let x0 = rng.gen_range(0.0..=(w as f64 - side).max(0.0));
    let window = Window {
        start: [0.0, y0, x0],
        size: [d as f64, side, side],
    };
    let angle = small_angle(rng, cfg.max_rotation_deg);
    let view = resample(x, &window, angle, [d, h, w])?;
    if cfg.flip {
        random_flip(&view, Dims::Two, rng)
    } else {
        Ok(view)
    }
}

/// Everything [`build_triplet`] needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletConfig {
    pub dims: Dims,
    pub target_mode: TargetMode,
    /// `None` feeds the uncorrupted views to the encoders.
    pub corruption: Option<CorruptionSpec>,
    pub augment: AugmentConfig,
    pub crops: CropConfig,
}

impl TripletConfig {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            target_mode: TargetMode::Full,
            corruption: Some(CorruptionSpec::default()),
            augment: AugmentConfig::default(),
            crops: CropConfig::default(),
        }
    }
}

/// Branch index into the triplet arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Ordinary = 0,
    Momentum = 1,
    Hybrid = 2,
}

/// One iteration's worth of encoder inputs, reconstruction targets and
/// transformation indicators for the ordinary, momentum and hybrid branches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet<T> {
    /// Augmented views X¹, `[N, C, D, H, W]`.
    pub views: [Tensor<T>; 3],
    /// Corrupted encoder inputs X².
    pub inputs: [Tensor<T>; 3],
    /// Reconstruction targets T(X¹).
    pub targets: [Tensor<T>; 3],
    pub specs: [Vec<TransformSpec>; 3],
    pub lambda: f64,
}

impl<T: Scalar> TrainingTriplet<T> {
    pub fn indicators(&self, b: Branch) -> Result<Tensor<T>> {
        indicator_batch(&self.specs[b as usize])
    }

    pub fn batch_size(&self) -> usize {
        self.specs[0].len()
    }
}

/// Builds the triplet for one batch `[N, C, D, H, W]`.
///
/// Per sample, two views are drawn (random crop, flip and small rotation; in
/// 3D the crops are an overlapping pair), mixed into the hybrid view with
/// weight `lambda`, corrupted to form the inputs, and transformed by freshly
/// drawn target transformations to form the targets.
pub fn build_triplet<T: Scalar, R: RngCore + ?Sized>(
    batch: &Tensor<T>,
    lambda: f64,
    rng: &mut R,
    cfg: &TripletConfig,
) -> Result<TrainingTriplet<T>> {
    let samples = batch.unstack();
    if samples.is_empty() {
        return Err(shape_err!("cannot build a triplet from an empty batch"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(alloc::format!("mix coefficient {lambda} outside [0, 1]")));
    }
    let seeds: Vec<u64> = (0..samples.len()).map(|_| rng.next_u64()).collect();
    let mut views: [Vec<Tensor<T>>; 3] = Default::default();
    let mut inputs: [Vec<Tensor<T>>; 3] = Default::default();
    let mut targets: [Vec<Tensor<T>>; 3] = Default::default();
    let mut specs: [Vec<TransformSpec>; 3] = Default::default();
    let lam = T::from_f64(lambda);
    for (x, &seed) in samples.iter().zip(&seeds) {
        let mut r = ChaRng::seed_from_u64(seed);
        let (vo, vm) = match cfg.dims {
            Dims::Two => (augment_view(x, &mut r, &cfg.augment)?, augment_view(x, &mut r, &cfg.augment)?),
            Dims::Three => {
                let [_, d, h, w] = dims4(x.shape())?;
                let (a, b) = sample_paired_boxes([d, h, w], &mut r, &cfg.crops)?;
                let out = cfg.crops.out_extent();
                let mut pair = [a, b].map(|bx| -> Result<Tensor<T>> {
                    let angle = small_angle(&mut r, cfg.augment.max_rotation_deg);
                    let v = resample(x, &bx.into(), angle, out)?;
                    if cfg.augment.flip {
                        random_flip(&v, Dims::Three, &mut r)
                    } else {
                        Ok(v)
                    }
                });
                let vm = core::mem::replace(&mut pair[1], Ok(Tensor::scalar(T::zero())))?;
                let vo = core::mem::replace(&mut pair[0], Ok(Tensor::scalar(T::zero())))?;
                (vo, vm)
            }
        };
        let vh = vo.lerp(&vm, lam)?;
        let [_, _, h, w] = dims4(vo.shape())?;
        for (k, v) in [vo, vm, vh].into_iter().enumerate() {
            let spec = sample_transform_with(&mut r, cfg.dims, cfg.target_mode, h == w);
            targets[k].push(apply_transform(&spec, &v)?);
            let x2 = match &cfg.corruption {
                Some(c) => apply_corruption(&c.with_seed(r.next_u64()), &v)?,
                None => v.clone(),
            };
            inputs[k].push(x2);
            views[k].push(v);
            specs[k].push(spec);
        }
    }
    let stack3 = |v: [Vec<Tensor<T>>; 3]| -> Result<[Tensor<T>; 3]> {
        let [a, b, c] = v;
        Ok([Tensor::stack(&a)?, Tensor::stack(&b)?, Tensor::stack(&c)?])
    };
    Ok(TrainingTriplet {
        views: stack3(views)?,
        inputs: stack3(inputs)?,
        targets: stack3(targets)?,
        specs,
        lambda,
    })
}
