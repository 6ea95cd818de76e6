//! Deterministic synthetic images and volumes with class labels and
//! foreground masks.
//!
//! Every sample shares a canonical layout: intensity rises from top to
//! bottom and a faint "organ" ellipse sits in the upper left. A class shape
//! is drawn at a random off-centre position and its pixels form the mask.
//! Flipping or rotating a sample therefore changes its appearance.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Rng as ChaRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::Dims;

/// Foreground shape vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Cross,
    Sphere,
    Cube,
}

impl Shape {
    pub fn vocabulary(dims: Dims) -> &'static [Shape] {
        match dims {
            Dims::Two => &[Shape::Disk, Shape::Square, Shape::Cross],
            Dims::Three => &[Shape::Sphere, Shape::Cube],
        }
    }

    /// Whether the offset `(dz, dy, dx)`, in units of the shape radius, lies
    /// inside the shape.
    fn contains(self, dz: f64, dy: f64, dx: f64) -> bool {
        match self {
            Shape::Disk | Shape::Sphere => dz * dz + dy * dy + dx * dx <= 1.0,
            Shape::Square | Shape::Cube => dz.abs() <= 0.8 && dy.abs() <= 0.8 && dx.abs() <= 0.8,
            Shape::Cross => dz.abs() <= 1.0 && ((dy.abs() <= 1.0 && dx.abs() <= 0.35) || (dx.abs() <= 1.0 && dy.abs() <= 0.35)),
        }
    }
}

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dims: Dims,
    pub count: usize,
    /// Extent as `(x, y, z)`; `z = 1` in 2D.
    pub size: [usize; 3],
    /// Number of classes, at most the vocabulary size.
    pub classes: usize,
    /// Standard deviation of additive gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::desk(Dims::Two)
    }
}

impl SynthSpec {
    pub fn desk(dims: Dims) -> Self {
        Self {
            dims,
            count: 512,
            size: match dims {
                Dims::Two => [64, 64, 1],
                Dims::Three => [32, 32, 16],
            },
            classes: Shape::vocabulary(dims).len(),
            noise: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Shape::vocabulary(self.dims).len();
        if self.classes == 0 || self.classes > vocab {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} classes requested, vocabulary has {vocab}",
                self.classes
            )));
        }
        if self.size.iter().any(|&s| s == 0) || (self.dims == Dims::Two && self.size[2] != 1) {
            return Err(Error::InvalidConfig("2D images need z = 1 and positive sides".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidConfig("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// `[D, H, W]`.
    pub fn extent(&self) -> [usize; 3] {
        [self.size[2], self.size[1], self.size[0]]
    }
}

/// Images `[N, 1, D, H, W]` in `[0, 1]`, labels, and binary masks of the
/// same shape as the images.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub masks: Tensor<T>,
}

impl<T: Scalar> Corpus<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let imgs = self.images.unstack();
        let masks = self.masks.unstack();
        let pick = |v: &[Tensor<T>]| -> Result<Tensor<T>> {
            let items: Vec<Tensor<T>> = idx.iter().map(|&i| v[i].clone()).collect();
            if items.is_empty() {
                let mut shape = self.images.shape().to_vec();
                shape[0] = 0;
                return Ok(Tensor::zeros(&shape));
            }
            Tensor::stack(&items)
        };
        Ok(Self {
            images: pick(&imgs)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: pick(&masks)?,
        })
    }

    pub fn split(&self, split: Split) -> Result<Self> {
        let r = split_range(self.len(), split);
        self.select(&r.collect::<Vec<_>>())
    }
}

/// Contiguous 70/10/20 partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Index range of `split` among `n` samples: the first `floor(0.7 n)` train,
/// the next `floor(0.1 n)` validation, the rest test.
pub fn split_range(n: usize, split: Split) -> Range<usize> {
    let train = n * 7 / 10;
    let val = n / 10;
    match split {
        Split::Train => 0..train,
        Split::Val => train..train + val,
        Split::Test => train + val..n,
    }
}

/// Generates sample `i` of the corpus: `([1, D, H, W] image, label, mask)`.
pub fn generate_sample<T: Scalar>(spec: &SynthSpec, i: usize) -> (Tensor<T>, usize, Tensor<T>) {
    let mut rng = ChaRng::seed_from_u64(derive_seed(spec.seed, &[stream::CORPUS, i as u64]));
    let label = i % spec.classes;
    let shape = Shape::vocabulary(spec.dims)[label];
    let [d, h, w] = spec.extent();
    let three = spec.dims == Dims::Three;
    let side = h.min(w) as f64;

    let organ_c = [
        d as f64 * 0.5,
        h as f64 * (0.3 + rng.gen_range(-0.03..0.03)),
        w as f64 * (0.3 + rng.gen_range(-0.03..0.03)),
    ];
    let organ_r = [d as f64 * 0.3, h as f64 * 0.14, w as f64 * 0.2];
    let radius = side * rng.gen_range(0.12..0.18);
    let margin = radius + 1.0;
    let pick = |rng: &mut ChaRng, len: usize, m: f64| -> f64 {
        let lo = m.min(len as f64 / 2.0);
        let hi = (len as f64 - m).max(lo + 1e-9);
        rng.gen_range(lo..hi)
    };
    let rz = if three { radius * d as f64 / side } else { 0.5 };
    let centre = [
        if three { pick(&mut rng, d, rz + 0.5) } else { 0.0 },
        pick(&mut rng, h, margin),
        pick(&mut rng, w, margin),
    ];
    let fg = rng.gen_range(0.85..1.0);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");

    let mut img = vec![T::zero(); d * h * w];
    let mut mask = vec![T::zero(); d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (fz, fy, fx) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let mut v = 0.1 + 0.35 * fy / h as f64;
                let oz = if three { (fz - organ_c[0]) / organ_r[0] } else { 0.0 };
                let (ey, ex) = ((fy - organ_c[1]) / organ_r[1], (fx - organ_c[2]) / organ_r[2]);
                let e = oz * oz + ey * ey + ex * ex;
                if e <= 1.0 {
                    v += 0.2;
                }
                let dz = if three { (fz - centre[0]) / rz } else { 0.0 };
                let inside = shape.contains(dz, (fy - centre[1]) / radius, (fx - centre[2]) / radius);
                if inside {
                    v = fg;
                }
                let idx = (z * h + y) * w + x;
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                img[idx] = T::from_f64((v + n).clamp(0.0, 1.0));
                mask[idx] = if inside { T::one() } else { T::zero() };
            }
        }
    }
    let shape4 = [1, d, h, w];
    (
        Tensor::from_vec(&shape4, img).expect("sample shape"),
        label,
        Tensor::from_vec(&shape4, mask).expect("sample shape"),
    )
}

/// The whole corpus. Each sample draws from its own seed.
pub fn generate<T: Scalar>(spec: &SynthSpec) -> Result<Corpus<T>> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.count);
    let mut masks = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (x, l, m) = generate_sample(spec, i);
        images.push(x);
        labels.push(l);
        masks.push(m);
    }
    if images.is_empty() {
        let [d, h, w] = spec.extent();
        return Ok(Corpus {
            images: Tensor::zeros(&[0, 1, d, h, w]),
            labels,
            masks: Tensor::zeros(&[0, 1, d, h, w]),
        });
    }
    Ok(Corpus {
        images: Tensor::stack(&images)?,
        labels,
        masks: Tensor::stack(&masks)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dims: Dims) -> SynthSpec {
        SynthSpec {
            count: 12,
            size: match dims {
                Dims::Two => [32, 32, 1],
                Dims::Three => [16, 16, 8],
            },
            ..SynthSpec::desk(dims)
        }
    }

    #[test]
    fn deterministic_and_seeded() {
        let a = generate::<f32>(&small(Dims::Two)).unwrap();
        let b = generate::<f32>(&small(Dims::Two)).unwrap();
        assert_eq!(a, b);
        let c = generate::<f32>(&SynthSpec { seed: 1, ..small(Dims::Two) }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn balanced_labels() {
        let spec = SynthSpec {
            count: 100,
            classes: 2,
            ..small(Dims::Two)
        };
        let c = generate::<f32>(&spec).unwrap();
        let ones = c.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!((100 - ones, ones), (50, 50));
    }

    #[test]
    fn masks_cover_bright_pixels_before_noise() {
        for dims in [Dims::Two, Dims::Three] {
            let spec = SynthSpec { noise: 0.0, ..small(dims) };
            let c = generate::<f64>(&spec).unwrap();
            assert!(c.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (&v, &m) in c.images.data().iter().zip(c.masks.data()) {
                if m == 1.0 {
                    assert!(v >= 0.85);
                }
            }
            for m in c.masks.unstack() {
                assert!(m.sum() > 0.0);
            }
        }
    }

    #[test]
    fn samples_are_orientation_dependent() {
        let c = generate::<f64>(&SynthSpec { noise: 0.0, ..small(Dims::Two) }).unwrap();
        let x = c.images.index_outer(0);
        let spec = crate::transforms::TransformSpec {
            rotation: crate::transforms::Rotation::R180,
            ..crate::transforms::TransformSpec::identity(Dims::Two)
        };
        let r = crate::transforms::apply_transform(&spec, &x).unwrap();
        assert!(x.max_abs_diff(&r) > 0.1);
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_range(100, Split::Train), 0..70);
        assert_eq!(split_range(100, Split::Val), 70..80);
        assert_eq!(split_range(100, Split::Test), 80..100);
        assert_eq!(split_range(512, Split::Test).len(), 103);
        let c = generate::<f32>(&small(Dims::Three)).unwrap();
        assert_eq!(c.split(Split::Val).unwrap().len(), 1);
        assert_eq!(Split::parse("test"), Some(Split::Test));
        assert_eq!(Split::parse("holdout"), None);
    }

    #[test]
    fn invalid_class_count() {
        let spec = SynthSpec {
            classes: 3,
            ..small(Dims::Three)
        };
        assert!(generate::<f32>(&spec).is_err());
    }
}
