//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse index order is a valid topological order for
//! the backward sweep. Leaves created with [`Graph::constant`] never receive a
//! gradient and nothing downstream of only-constant inputs is differentiated,
//! which is how the momentum branch stays gradient-free.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::kernels::{col2im, im2col, upsample_plane, upsample_plane_adjoint, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{dims2, dims5, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How normalization statistics are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatGroups {
    /// One statistic per channel, pooled over the batch and all positions.
    PerChannel,
    /// `groups` statistics per sample, each pooled over a contiguous block of
    /// channels and all positions.
    PerSample { groups: usize },
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    Lerp {
        a: Var,
        b: Var,
        t: T,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ShiftChannels {
        x: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Outer {
        a: Var,
        b: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Reshape(Var),
    Normalize {
        x: Var,
        groups: StatGroups,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    DotConst {
        x: Var,
        c: Tensor<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    FusedLoss {
        x: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::from_vec(&self.shapes[v.0], g.to_vec()).expect("gradient shape"))
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Batch statistics `(mean, biased variance)` recorded by a training-mode
    /// [`Graph::normalize`] node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::Normalize { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let [n, c, d, h, wd] = dims5(self.value(x).shape())?;
        let ws = self.value(w).shape();
        if ws.len() != 5 || ws[1] != c || ws[2..] != geom.kernel {
            return Err(shape_err!(
                "conv weight {:?} incompatible with {} input channels and kernel {:?}",
                ws,
                c,
                geom.kernel
            ));
        }
        let o = ws[0];
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(shape_err!("conv bias has {} entries, need {}", self.value(b).numel(), o));
            }
        }
        let input = [d, h, wd];
        let out = geom.out_dims(input)?;
        let p: usize = out.iter().product();
        let k = c * geom.taps();
        let in_len = c * d * h * wd;
        let mut y = vec![T::zero(); n * o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let nb = conv_chunk(n, k, p);
            let mut cols = vec![T::zero(); k * nb * p];
            let mut tmp = vec![T::zero(); o * nb * p];
            for s0 in (0..n).step_by(nb) {
                let m = nb.min(n - s0);
                let ld = m * p;
                for j in 0..m {
                    let xs = &xv[(s0 + j) * in_len..(s0 + j + 1) * in_len];
                    im2col(xs, c, input, &geom, out, &mut cols[j * p..], ld);
                }
                T::gemm(false, false, o, ld, k, T::one(), wv, &cols[..k * ld], T::zero(), &mut tmp[..o * ld]);
                for j in 0..m {
                    for oc in 0..o {
                        let dst = ((s0 + j) * o + oc) * p;
                        y[dst..dst + p].copy_from_slice(&tmp[oc * ld + j * p..oc * ld + (j + 1) * p]);
                    }
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for oc in 0..o {
                        let base = (s * o + oc) * p;
                        y[base..base + p].iter_mut().for_each(|v| *v += bv[oc]);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, out[0], out[1], out[2]], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &parents))
    }

    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(x).shape())?;
        let out = [d * factor[0], h * factor[1], w * factor[2]];
        let (ip, op) = (d * h * w, out.iter().product::<usize>());
        let mut y = vec![T::zero(); n * c * op];
        let xv = self.value(x).data();
        for plane in 0..n * c {
            upsample_plane(&xv[plane * ip..(plane + 1) * ip], [d, h, w], factor, &mut y[plane * op..(plane + 1) * op]);
        }
        let value = Tensor::from_vec(&[n, c, out[0], out[1], out[2]], y)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Channel concatenation of two rank-5 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, d, h, w] = dims5(self.value(a).shape())?;
        let [nb, cb, db, hb, wb] = dims5(self.value(b).shape())?;
        if (n, d, h, w) != (nb, db, hb, wb) {
            return Err(shape_err!(
                "cannot concatenate {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let s = d * h * w;
        let mut y = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            y.extend_from_slice(&self.value(a).data()[i * ca * s..(i + 1) * ca * s]);
            y.extend_from_slice(&self.value(b).data()[i * cb * s..(i + 1) * cb * s]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, d, h, w], y)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// `t * a + (1 - t) * b`.
    pub fn lerp(&mut self, a: Var, b: Var, t: T) -> Result<Var> {
        let value = self.value(a).lerp(self.value(b), t)?;
        Ok(self.push(value, Op::Lerp { a, b, t }, &[a, b]))
    }

    fn channel_broadcast(&self, x: Var, s: Var) -> Result<(usize, usize, usize, bool)> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return Err(shape_err!("channel op needs rank >= 2, got {:?}", xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let m = self.value(s).numel();
        if m == c {
            Ok((n, c, spatial, false))
        } else if m == n * c {
            Ok((n, c, spatial, true))
        } else {
            Err(shape_err!("per-channel operand with {} entries does not fit {:?}", m, xs))
        }
    }

    /// Multiplies every channel by a factor; `s` holds `C` or `N * C` entries.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, sp, per_sample) = self.channel_broadcast(x, s)?;
        let sv = self.value(s).data();
        let mut value = self.value(x).clone();
        for i in 0..n {
            for ch in 0..c {
                let f = sv[if per_sample { i * c + ch } else { ch }];
                value.data_mut()[(i * c + ch) * sp..(i * c + ch + 1) * sp]
                    .iter_mut()
                    .for_each(|v| *v *= f);
            }
        }
        Ok(self.push(value, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// Adds a per-channel offset; `b` holds `C` or `N * C` entries.
    pub fn shift_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, sp, per_sample) = self.channel_broadcast(x, b)?;
        let bv = self.value(b).data();
        let mut value = self.value(x).clone();
        for i in 0..n {
            for ch in 0..c {
                let f = bv[if per_sample { i * c + ch } else { ch }];
                value.data_mut()[(i * c + ch) * sp..(i * c + ch + 1) * sp]
                    .iter_mut()
                    .for_each(|v| *v += f);
            }
        }
        Ok(self.push(value, Op::ShiftChannels { x, b }, &[x, b]))
    }

    /// `[N, C, ...]` to `[N, C]` by averaging over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() < 3 {
            return Err(shape_err!("global pooling needs spatial axes, got {:?}", xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let sp: usize = xs[2..].iter().product();
        let inv = T::one() / T::from_f64(sp as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[n, c], y)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x @ w^T + b` with `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, fin] = dims2(self.value(x).shape())?;
        let [fout, win] = dims2(self.value(w).shape())?;
        if win != fin {
            return Err(shape_err!("linear weight [{}, {}] cannot take {} inputs", fout, win, fin));
        }
        let mut y = vec![T::zero(); n * fout];
        T::gemm(false, true, n, fout, fin, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(shape_err!("linear bias has {} entries, need {}", bv.len(), fout));
            }
            for row in y.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let value = Tensor::from_vec(&[n, fout], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Per-row outer product `[N, P] x [N, Q] -> [N, P * Q]`, entry
    /// `(i, j)` stored at `i * Q + j`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, p] = dims2(self.value(a).shape())?;
        let [nb, q] = dims2(self.value(b).shape())?;
        if n != nb {
            return Err(shape_err!("outer product batch sizes differ: {} vs {}", n, nb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(n * p * q);
        for s in 0..n {
            for i in 0..p {
                let ai = av[s * p + i];
                y.extend(bv[s * q..(s + 1) * q].iter().map(|&bj| ai * bj));
            }
        }
        let value = Tensor::from_vec(&[n, p * q], y)?;
        Ok(self.push(value, Op::Outer { a, b }, &[a, b]))
    }

    /// Scales every row of a `[N, E]` tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let [_, e] = dims2(self.value(x).shape())?;
        let floor = T::from_f64(1e-12);
        let mut value = self.value(x).clone();
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(e) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        Ok(self.push(value, Op::L2Normalize { x, norms }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Zero-mean unit-variance normalization with batch statistics.
    pub fn normalize(&mut self, x: Var, groups: StatGroups) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(x).shape())?;
        let sp = d * h * w;
        let eps = T::from_f64(NORM_EPS);
        let stats = stat_count(groups, n, c)?;
        let mut mean = vec![T::zero(); stats];
        let mut var = vec![T::zero(); stats];
        let mut count = vec![0usize; stats];
        let xv = self.value(x).data();
        for (blk, chunk) in xv.chunks(sp).enumerate() {
            let g = stat_index(groups, blk, c);
            mean[g] += chunk.iter().copied().sum::<T>();
            count[g] += sp;
        }
        for (m, &k) in mean.iter_mut().zip(&count) {
            *m /= T::from_f64(k as f64);
        }
        for (blk, chunk) in xv.chunks(sp).enumerate() {
            let g = stat_index(groups, blk, c);
            var[g] += chunk.iter().map(|&v| (v - mean[g]) * (v - mean[g])).sum::<T>();
        }
        for (v, &k) in var.iter_mut().zip(&count) {
            *v /= T::from_f64(k as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut y = vec![T::zero(); xv.len()];
        for (blk, (src, dst)) in xv.chunks(sp).zip(y.chunks_mut(sp)).enumerate() {
            let g = stat_index(groups, blk, c);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean[g]) * inv_std[g];
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), y)?;
        Ok(self.push(
            value,
            Op::Normalize {
                x,
                groups,
                inv_std,
                mean,
                var,
            },
            &[x],
        ))
    }

    /// Per-channel `(x - mean) / sqrt(var + eps)` with fixed statistics.
    pub fn standardize(&mut self, x: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let [_, c, d, h, w] = dims5(self.value(x).shape())?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running statistics have {} entries, need {}", mean.len(), c));
        }
        let sp = d * h * w;
        let eps = T::from_f64(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut value = self.value(x).clone();
        for (blk, chunk) in value.data_mut().chunks_mut(sp).enumerate() {
            let ch = blk % c;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        Ok(self.push(value, Op::Standardize { x, inv_std }, &[x]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_shape(bv.shape())?;
        let n = T::from_f64(av.numel() as f64);
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, &[a, b]))
    }

    /// `sum(x * c)` against a constant tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        self.value(x).expect_shape(c.shape())?;
        let s = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, c }, &[x]))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(shape_err!("weighted_sum takes scalars, got {:?}", self.value(v).shape()));
            }
            s += w * self.value(v).item();
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &parents))
    }

    /// A scalar loss whose value and gradient with respect to `x` were
    /// computed outside the graph.
    pub fn fused_loss(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        self.value(x).expect_shape(grad.shape())?;
        Ok(self.push(Tensor::scalar(value), Op::FusedLoss { x, grad }, &[x]))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.numel()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::Upsample { x, factor } => {
                let [n, c, d, h, w] = dims5(self.value(*x).shape()).expect("rank 5");
                let ip = d * h * w;
                let op = ip * factor.iter().product::<usize>();
                if let Some(dx) = self.slot(grads, *x) {
                    for plane in 0..n * c {
                        upsample_plane_adjoint(&g[plane * op..(plane + 1) * op], [d, h, w], *factor, &mut dx[plane * ip..(plane + 1) * ip]);
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, d, h, w] = dims5(self.value(*a).shape()).expect("rank 5");
                let cb = self.value(*b).shape()[1];
                let s = d * h * w;
                if let Some(da) = self.slot(grads, *a) {
                    for k in 0..n {
                        add_into(&mut da[k * ca * s..(k + 1) * ca * s], &g[k * (ca + cb) * s..][..ca * s]);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for k in 0..n {
                        add_into(&mut db[k * cb * s..(k + 1) * cb * s], &g[(k * (ca + cb) + ca) * s..][..cb * s]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gv * y * (T::one() - y);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::Lerp { a, b, t } => {
                let u = T::one() - *t;
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *t);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * u);
                }
            }
            Op::ScaleChannels { x, s } => {
                let (n, c, sp, per_sample) = self.channel_broadcast(*x, *s).expect("checked in forward");
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for k in 0..n {
                        for ch in 0..c {
                            let f = sv[if per_sample { k * c + ch } else { ch }];
                            let r = (k * c + ch) * sp..(k * c + ch + 1) * sp;
                            dx[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, &gv)| *d += gv * f);
                        }
                    }
                }
                if let Some(ds) = self.slot(grads, *s) {
                    for k in 0..n {
                        for ch in 0..c {
                            let r = (k * c + ch) * sp..(k * c + ch + 1) * sp;
                            let acc: T = g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum();
                            ds[if per_sample { k * c + ch } else { ch }] += acc;
                        }
                    }
                }
            }
            Op::ShiftChannels { x, b } => {
                let (n, c, sp, per_sample) = self.channel_broadcast(*x, *b).expect("checked in forward");
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for k in 0..n {
                        for ch in 0..c {
                            let acc: T = g[(k * c + ch) * sp..(k * c + ch + 1) * sp].iter().copied().sum();
                            db[if per_sample { k * c + ch } else { ch }] += acc;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let sp: usize = xs[2..].iter().product();
                let inv = T::one() / T::from_f64(sp as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (chunk, &gv) in dx.chunks_mut(sp).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let [n, fin] = dims2(self.value(*x).shape()).expect("rank 2");
                let fout = self.value(*w).shape()[0];
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    T::gemm(false, false, n, fin, fout, T::one(), g, wv, T::one(), dx);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    T::gemm(true, false, fout, fin, n, T::one(), g, xv, T::one(), dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks(fout) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Outer { a, b } => {
                let [n, p] = dims2(self.value(*a).shape()).expect("rank 2");
                let q = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for s in 0..n {
                        for i in 0..p {
                            let row = &g[(s * p + i) * q..(s * p + i + 1) * q];
                            da[s * p + i] += row.iter().zip(&bv[s * q..(s + 1) * q]).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for s in 0..n {
                        for i in 0..p {
                            let ai = av[s * p + i];
                            let row = &g[(s * p + i) * q..(s * p + i + 1) * q];
                            db[s * q..(s + 1) * q].iter_mut().zip(row).for_each(|(d, &gv)| *d += gv * ai);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let e = node.value.shape()[1];
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let y = &yv[r * e..(r + 1) * e];
                        let gr = &g[r * e..(r + 1) * e];
                        let proj: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..e {
                            dx[r * e + j] += (gr[j] - y[j] * proj) / nrm;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Normalize { x, groups, inv_std, .. } => {
                let [n, c, d, h, w] = dims5(self.value(*x).shape()).expect("rank 5");
                let sp = d * h * w;
                let xhat = node.value.data();
                let stats = inv_std.len();
                let mut sum_g = vec![T::zero(); stats];
                let mut sum_gx = vec![T::zero(); stats];
                let mut count = vec![0usize; stats];
                for blk in 0..n * c {
                    let s = stat_index(*groups, blk, c);
                    let r = blk * sp..(blk + 1) * sp;
                    sum_g[s] += g[r.clone()].iter().copied().sum::<T>();
                    sum_gx[s] += g[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<T>();
                    count[s] += sp;
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for blk in 0..n * c {
                        let s = stat_index(*groups, blk, c);
                        let m = T::from_f64(count[s] as f64);
                        let (mg, mgx) = (sum_g[s] / m, sum_gx[s] / m);
                        for j in blk * sp..(blk + 1) * sp {
                            dx[j] += inv_std[s] * (g[j] - mg - xhat[j] * mgx);
                        }
                    }
                }
            }
            Op::Standardize { x, inv_std } => {
                let c = inv_std.len();
                let sp: usize = node.value.shape()[2..].iter().product();
                if let Some(dx) = self.slot(grads, *x) {
                    for (blk, (d, gr)) in dx.chunks_mut(sp).zip(g.chunks(sp)).enumerate() {
                        let f = inv_std[blk % c];
                        d.iter_mut().zip(gr).for_each(|(a, &b)| *a += b * f);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] * T::from_f64(2.0 / av.len() as f64);
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += k * (x - y);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= k * (x - y);
                    }
                }
            }
            Op::DotConst { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(c.data()).for_each(|(d, &cv)| *d += g[0] * cv);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    if let Some(dv) = self.slot(grads, v) {
                        dv[0] += g[0] * wt;
                    }
                }
            }
            Op::FusedLoss { x, grad } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(grad.data()).for_each(|(d, &gv)| *d += g[0] * gv);
                }
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let [n, c, d, h, wd] = dims5(self.value(x).shape()).expect("rank 5");
        let o = self.value(w).shape()[0];
        let input = [d, h, wd];
        let out = geom.out_dims(input).expect("checked in forward");
        let p: usize = out.iter().product();
        let k = c * geom.taps();
        let in_len = c * d * h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_w = self.nodes[w.0].requires_grad;
        let need_x = self.nodes[x.0].requires_grad;

        if let Some(b) = b {
            if let Some(db) = self.slot(grads, b) {
                for s in 0..n {
                    for oc in 0..o {
                        db[oc] += g[(s * o + oc) * p..(s * o + oc + 1) * p].iter().copied().sum::<T>();
                    }
                }
            }
        }
        if !need_w && !need_x {
            return;
        }
        let nb = conv_chunk(n, k, p);
        let mut cols = vec![T::zero(); k * nb * p];
        let mut gt = vec![T::zero(); o * nb * p];
        for s0 in (0..n).step_by(nb) {
            let m = nb.min(n - s0);
            let ld = m * p;
            for j in 0..m {
                for oc in 0..o {
                    let src = ((s0 + j) * o + oc) * p;
                    gt[oc * ld + j * p..oc * ld + (j + 1) * p].copy_from_slice(&g[src..src + p]);
                }
            }
            if need_w {
                for j in 0..m {
                    let xs = &xv[(s0 + j) * in_len..(s0 + j + 1) * in_len];
                    im2col(xs, c, input, geom, out, &mut cols[j * p..], ld);
                }
                let dw = self.slot(grads, w).expect("requires grad");
                T::gemm(false, true, o, k, ld, T::one(), &gt[..o * ld], &cols[..k * ld], T::one(), dw);
            }
            if need_x {
                T::gemm(true, false, k, ld, o, T::one(), wv, &gt[..o * ld], T::zero(), &mut cols[..k * ld]);
                let dx = self.slot(grads, x).expect("requires grad");
                for j in 0..m {
                    let dxs = &mut dx[(s0 + j) * in_len..(s0 + j + 1) * in_len];
                    col2im(&cols[j * p..], ld, c, input, geom, out, dxs);
                }
            }
        }
    }
}

/// Samples per unfolded matrix, keeping it near four million entries.
fn conv_chunk(n: usize, k: usize, p: usize) -> usize {
    ((1 << 22) / (k * p).max(1)).clamp(1, n.max(1))
}

fn stat_count(groups: StatGroups, n: usize, c: usize) -> Result<usize> {
    match groups {
        StatGroups::PerChannel => Ok(c),
        StatGroups::PerSample { groups } => {
            if groups == 0 || c % groups != 0 {
                return Err(shape_err!("{} channels cannot be split into {} groups", c, groups));
            }
            Ok(n * groups)
        }
    }
}

/// Statistic index of the `blk`-th `(sample, channel)` plane.
#[inline]
fn stat_index(groups: StatGroups, blk: usize, c: usize) -> usize {
    match groups {
        StatGroups::PerChannel => blk % c,
        StatGroups::PerSample { groups } => {
            let (s, ch) = (blk / c, blk % c);
            s * groups + ch / (c / groups)
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(out * probe))/d(leaf) for every leaf.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, leaves: Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let probe = rand_tensor(&mut rng, g.value(out).shape());
        let root = g.dot_const(out, probe.clone()).unwrap();
        let grads = g.backward(root);
        let eval = |leaves: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for (li, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("gradient reached leaf");
            for j in 0..leaves[li].numel() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[j] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-3);
                assert!(err < 1e-5, "leaf {li} elem {j}: fd {fd} vs analytic {}", analytic[j]);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = ConvGeom {
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            pad: [0, 1, 1],
        };
        let leaves = vec![
            rand_tensor(&mut rng, &[2, 2, 1, 5, 4]),
            rand_tensor(&mut rng, &[3, 2, 1, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check(|g, v| g.conv(v[0], v[1], Some(v[2]), geom).unwrap(), leaves);
    }

    #[test]
    fn pointwise_and_3d_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let point = ConvGeom {
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            pad: [0, 0, 0],
        };
        check(
            |g, v| g.conv(v[0], v[1], None, point).unwrap(),
            vec![rand_tensor(&mut rng, &[2, 3, 2, 2, 2]), rand_tensor(&mut rng, &[2, 3, 1, 1, 1])],
        );
        let cube = ConvGeom {
            kernel: [3, 3, 3],
            stride: [2, 2, 2],
            pad: [1, 1, 1],
        };
        check(
            |g, v| g.conv(v[0], v[1], None, cube).unwrap(),
            vec![rand_tensor(&mut rng, &[1, 2, 4, 4, 4]), rand_tensor(&mut rng, &[2, 2, 3, 3, 3])],
        );
    }

    #[test]
    fn elementwise_and_channel_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, &[2, 3, 1, 2, 2]),
            rand_tensor(&mut rng, &[2, 3, 1, 2, 2]),
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check(
            |g, v| {
                let a = g.sigmoid(v[0]);
                let b = g.lerp(a, v[1], 0.3).unwrap();
                let c = g.scale_channels(b, v[2]).unwrap();
                let d = g.shift_channels(c, v[3]).unwrap();
                let e = g.scale_channels(d, v[3]).unwrap();
                let f = g.upsample(e, [1, 2, 2]).unwrap();
                let h = g.concat(f, f).unwrap();
                g.scale(h, 1.5)
            },
            leaves,
        );
    }

    #[test]
    fn dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[5, 4]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[3, 2]),
        ];
        check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                let o = g.outer(y, v[3]).unwrap();
                g.l2_normalize(o).unwrap()
            },
            leaves,
        );
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for groups in [StatGroups::PerChannel, StatGroups::PerSample { groups: 2 }] {
            check(
                |g, v| g.normalize(v[0], groups).unwrap(),
                vec![rand_tensor(&mut rng, &[3, 4, 1, 1, 3])],
            );
        }
        check(
            |g, v| g.standardize(v[0], &[0.1, -0.2], &[0.5, 2.0]).unwrap(),
            vec![rand_tensor(&mut rng, &[2, 2, 1, 2, 2])],
        );
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(
            |g, v| {
                let r = g.relu(v[0]);
                let m = g.mse(r, v[1]).unwrap();
                let p = g.global_avg_pool(v[1]).unwrap();
                let q = g.reshape(p, &[4]).unwrap();
                let s = g.dot_const(q, Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
                g.weighted_sum(&[(m, 0.7), (s, 0.2)]).unwrap()
            },
            vec![rand_tensor(&mut rng, &[2, 2, 1, 3, 1]), rand_tensor(&mut rng, &[2, 2, 1, 3, 1])],
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(&[1, 1, 1, 2, 2], 0.5));
        let c = g.constant(Tensor::full(&[1, 1, 1, 2, 2], 2.0));
        let y = g.add(p, c).unwrap();
        let d = g.detach(y);
        let z = g.add(y, d).unwrap();
        let s = g.global_avg_pool(z).unwrap();
        let root = g.reshape(s, &[]).unwrap();
        let grads = g.backward(root);
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(p).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn group_statistics_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 4, 1, 3, 3]));
        let y = g.normalize(x, StatGroups::PerSample { groups: 2 }).unwrap();
        for block in g.value(y).data().chunks(18) {
            let m: f64 = block.iter().sum::<f64>() / 18.0;
            let v: f64 = block.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
