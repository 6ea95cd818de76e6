//! Feature queue, noise-contrastive loss, reconstruction loss and their
//! weighted combination.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default number of stored negatives.
pub const QUEUE_CAPACITY: usize = 16384;

/// FIFO store of past embeddings, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue<T> {
    capacity: usize,
    dim: usize,
    data: VecDeque<T>,
}

impl<T: Scalar> FeatureQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            data: VecDeque::with_capacity(capacity.min(1 << 16) * dim),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Appends the rows of `rows` (`[n, dim]`), evicting the oldest entries
    /// beyond capacity.
    pub fn push(&mut self, rows: &Tensor<T>) -> Result<()> {
        match rows.shape() {
            [_, d] if *d == self.dim => {}
            [0] => return Ok(()),
            s => return Err(shape_err!("queue of width {} cannot take rows {:?}", self.dim, s)),
        }
        let keep = rows.data();
        let cap = self.capacity * self.dim;
        let fresh = if keep.len() > cap { &keep[keep.len() - cap..] } else { keep };
        self.data.extend(fresh.iter().copied());
        let excess = self.data.len().saturating_sub(cap);
        self.data.drain(..excess);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.data.clear();
    }

    /// Contents as an `[n, dim]` tensor, oldest first.
    pub fn snapshot(&self) -> Tensor<T> {
        let (a, b) = self.data.as_slices();
        let mut v = Vec::with_capacity(a.len() + b.len());
        v.extend_from_slice(a);
        v.extend_from_slice(b);
        Tensor::from_vec(&[self.len(), self.dim], v).expect("queue rows")
    }

    /// Rebuilds a queue from a snapshot.
    pub fn from_snapshot(capacity: usize, rows: &Tensor<T>) -> Result<Self> {
        let dim = match rows.shape() {
            [n, d] if *n <= capacity => *d,
            s => return Err(shape_err!("queue snapshot {:?} exceeds capacity {}", s, capacity)),
        };
        let mut q = Self::new(capacity, dim);
        q.push(rows)?;
        Ok(q)
    }
}

/// Which terms make up the softmax denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceMode {
    /// Queue entries only.
    #[default]
    QueueOnly,
    /// Queue entries plus the positive pair (standard InfoNCE).
    QueuePlusPositive,
}

/// Batch-mean contrastive loss and its gradient with respect to `q`.
///
/// `q` and `k` are `[B, E]`, `queue` is `[n, E]`. The keys and the queue are
/// treated as constants.
pub fn nce_loss<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    queue: &Tensor<T>,
    tau: f64,
    mode: NceMode,
) -> Result<(T, Tensor<T>)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let [b, e] = crate::tensor::dims2(q.shape())?;
    k.expect_shape(&[b, e])?;
    let n = match queue.shape() {
        [n, d] if *d == e => *n,
        [0] => 0,
        s => return Err(shape_err!("queue {:?} does not match embedding width {}", s, e)),
    };
    if n == 0 && mode == NceMode::QueueOnly {
        return Err(Error::EmptyQueue);
    }
    let inv_tau = T::from_f64(1.0 / tau);
    // Logits against the queue, [B, n].
    let mut logits = vec![T::zero(); b * n];
    if n > 0 {
        T::gemm(false, true, b, n, e, inv_tau, q.data(), queue.data(), T::zero(), &mut logits);
    }
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); b * e];
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut weights = vec![T::zero(); n];
    for i in 0..b {
        let qi = &q.data()[i * e..(i + 1) * e];
        let ki = &k.data()[i * e..(i + 1) * e];
        let pos = qi.iter().zip(ki).map(|(&a, &c)| a * c).sum::<T>() * inv_tau;
        let row = &logits[i * n..(i + 1) * n];
        let mut mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        if mode == NceMode::QueuePlusPositive {
            mx = mx.max(pos);
        }
        let mut z = T::zero();
        for (w, &l) in weights.iter_mut().zip(row) {
            *w = (l - mx).exp();
            z += *w;
        }
        let wpos = if mode == NceMode::QueuePlusPositive {
            let w = (pos - mx).exp();
            z += w;
            w
        } else {
            T::zero()
        };
        loss += mx + z.ln() - pos;
        // d/dq_i = (Σ_j p_j k_j + p_+ k_+ - k_+) / τ, averaged over the batch.
        let gi = &mut grad[i * e..(i + 1) * e];
        let scale = inv_tau * inv_b / z;
        for (j, &w) in weights.iter().enumerate() {
            let kj = &queue.data()[j * e..(j + 1) * e];
            let c = w * scale;
            for (g, &v) in gi.iter_mut().zip(kj) {
                *g += c * v;
            }
        }
        let cpos = wpos * scale - inv_tau * inv_b;
        for (g, &v) in gi.iter_mut().zip(ki) {
            *g += cpos * v;
        }
    }
    Ok((loss * inv_b, Tensor::from_vec(&[b, e], grad)?))
}

/// Adds the contrastive loss of `q` against detached `k` and `queue` to the
/// graph.
pub fn nce_node<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: &Tensor<T>,
    queue: &Tensor<T>,
    tau: f64,
    mode: NceMode,
) -> Result<Var> {
    let (value, grad) = nce_loss(g.value(q), k, queue, tau, mode)?;
    g.fused_loss(q, value, grad)
}

/// Sum of the three branch MSE terms, each averaged over all elements.
pub fn recon_loss<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<(Var, Vec<Var>)> {
    let terms = pairs
        .iter()
        .map(|&(pred, target)| g.mse(pred, target))
        .collect::<Result<Vec<_>>>()?;
    let weighted: Vec<(Var, T)> = terms.iter().map(|&t| (t, T::one())).collect();
    Ok((g.weighted_sum(&weighted)?, terms))
}

/// Weights of the contrastive and reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub contrastive: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 0.5,
            reconstruction: 0.5,
        }
    }
}

/// `w_c · L_c + w_p · L_p`.
pub fn total_loss(contrastive: f64, reconstruction: f64, w: LossWeights) -> Result<f64> {
    if !contrastive.is_finite() || !reconstruction.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "contrastive {contrastive}, reconstruction {reconstruction}"
        )));
    }
    Ok(w.contrastive * contrastive + w.reconstruction * reconstruction)
}

/// Loss values of one iteration or one validation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub total: f64,
    /// Ordinary, momentum and hybrid MSE terms.
    pub branches: [f64; 3],
}
