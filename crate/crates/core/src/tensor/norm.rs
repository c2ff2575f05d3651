//! Normalization and loss tape operations.

use super::{BackwardCtx, Scalar, Tensor};
use crate::error::{Error, Result};

/// Whether batch norm consumes batch statistics or stored running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential-moving-average statistics owned by a batch-norm layer.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded in; zero means uninitialized.
    pub batches: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            batches: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.batches > 0
    }
}

impl<T: Scalar> Tensor<T> {
    /// Batch normalization over the channel axis, viewing the tensor as
    /// `(outer, channels, inner)`.
    ///
    /// Train mode normalizes with batch statistics (biased variance) and
    /// folds them into `stats` with EMA momentum `momentum`; eval mode uses
    /// the stored statistics and fails if none were ever recorded.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        channel_axis: usize,
        eps: T,
        momentum: T,
    ) -> Result<Tensor<T>> {
        self.check_same_tape(gamma)?;
        self.check_same_tape(beta)?;
        let shape = self.shape();
        if channel_axis >= shape.len() {
            return Err(Error::dimension(format!(
                "channel axis {channel_axis} out of range for shape {:?}",
                shape
            )));
        }
        let c = shape[channel_axis];
        let outer: usize = shape[..channel_axis].iter().product();
        let inner: usize = shape[channel_axis + 1..].iter().product();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dimension(format!(
                "gamma/beta must have shape [{c}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        if stats.mean.len() != c {
            return Err(Error::dimension(format!(
                "running statistics track {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        if mode == BnMode::Eval && !stats.is_initialized() {
            return Err(Error::UninitializedStats(
                "batch norm evaluated before any training batch".into(),
            ));
        }

        let m = outer * inner;
        let m_t = T::from_usize(m).expect("batch size fits scalar");
        let numel = self.numel();

        let (mean, var) = match mode {
            BnMode::Train => {
                let x = self.values();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for &v in &x[base..base + inner] {
                            acc += v;
                        }
                    }
                    mean[ch] = acc / m_t;
                    let mut vacc = T::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for &v in &x[base..base + inner] {
                            let d = v - mean[ch];
                            vacc += d * d;
                        }
                    }
                    var[ch] = vacc / m_t;
                }
                (mean, var)
            }
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };

        if mode == BnMode::Train {
            let keep = T::one() - momentum;
            for ch in 0..c {
                stats.mean[ch] = keep * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = keep * stats.var[ch] + momentum * var[ch];
            }
            stats.batches += 1;
        }

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); numel];
        let mut values = vec![T::zero(); numel];
        {
            let x = self.values();
            let g = gamma.values();
            let b = beta.values();
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in 0..inner {
                        let xh = (x[base + i] - mean[ch]) * inv_std[ch];
                        xhat[base + i] = xh;
                        values[base + i] = g[ch] * xh + b[ch];
                    }
                }
            }
        }

        let req = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let (x_id, g_id, b_id) = (self.id(), gamma.id(), beta.id());
        let train = mode == BnMode::Train;
        Ok(self.tape().op(shape.to_vec(), values, req, move |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(b_id) {
                    let mut db = vec![T::zero(); c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for &gv in &g[base..base + inner] {
                                db[ch] += gv;
                            }
                        }
                    }
                    ctx.accumulate(b_id, db);
                }
                if ctx.wants_grad(g_id) {
                    let mut dg = vec![T::zero(); c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                dg[ch] += g[base + i] * xhat[base + i];
                            }
                        }
                    }
                    ctx.accumulate(g_id, dg);
                }
                if ctx.wants_grad(x_id) {
                    let gamma_v = ctx.values(g_id).to_vec();
                    let mut dx = vec![T::zero(); numel];
                    if train {
                        // Batch statistics depend on x: full BN backward.
                        for ch in 0..c {
                            let mut sum_dy = T::zero();
                            let mut sum_dy_xhat = T::zero();
                            for o in 0..outer {
                                let base = (o * c + ch) * inner;
                                for i in 0..inner {
                                    let dyh = g[base + i] * gamma_v[ch];
                                    sum_dy += dyh;
                                    sum_dy_xhat += dyh * xhat[base + i];
                                }
                            }
                            let mean_dy = sum_dy / m_t;
                            let mean_dy_xhat = sum_dy_xhat / m_t;
                            for o in 0..outer {
                                let base = (o * c + ch) * inner;
                                for i in 0..inner {
                                    let dyh = g[base + i] * gamma_v[ch];
                                    dx[base + i] = inv_std[ch]
                                        * (dyh - mean_dy - xhat[base + i] * mean_dy_xhat);
                                }
                            }
                        }
                    } else {
                        // Stored statistics are constants: pure affine map.
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                for i in 0..inner {
                                    dx[base + i] = g[base + i] * gamma_v[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::dimension("softmax on rank-0 tensor"))?;
        let values: Vec<T> = {
            let x = self.values();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks(c) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
                let total: T = exps.iter().copied().sum();
                out.extend(exps.into_iter().map(|e| e / total));
            }
            out
        };
        let req = self.requires_grad();
        let x_id = self.id();
        Ok(self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let y = ctx.values(out);
                    let mut dx = vec![T::zero(); g.len()];
                    for (row, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let dot: T = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
                        for i in 0..c {
                            dx[row * c + i] = yrow[i] * (grow[i] - dot);
                        }
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }

    /// Mean cross-entropy between `(batch, classes)` logits and integer
    /// labels, as a scalar tensor.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Rank(format!(
                "cross_entropy expects (batch, classes) logits, got {:?}",
                shape
            )));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::dimension(format!(
                "{} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let batch_t = T::from_usize(batch).expect("batch fits scalar");
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        {
            let x = self.values();
            for (i, row) in x.chunks(classes).enumerate() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
                let total: T = exps.iter().copied().sum();
                let log_total = total.ln() + max;
                loss += log_total - row[labels[i]];
                for (j, e) in exps.into_iter().enumerate() {
                    probs[i * classes + j] = e / total;
                }
            }
            loss /= batch_t;
        }
        let req = self.requires_grad();
        let x_id = self.id();
        let labels = labels.to_vec();
        Ok(self.tape().op(vec![], vec![loss], req, move |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let scale = g[0] / batch_t;
                    let mut dx = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dx[i * classes + y] -= T::one();
                    }
                    for v in dx.iter_mut() {
                        *v *= scale;
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn bn_zero_variance_column_maps_to_zero() {
        // Constant input, gamma=1, beta=0: epsilon keeps it finite, output 0.
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[4, 1], vec![3.0; 4], false).unwrap();
        let gamma = tape.leaf(&[1], vec![1.0], false).unwrap();
        let beta = tape.leaf(&[1], vec![0.0], false).unwrap();
        let mut stats = RunningStats::new(1);
        let y = x
            .batch_norm(&gamma, &beta, &mut stats, BnMode::Train, 1, 1e-5, 0.1)
            .unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_two_point_batch_with_zero_eps() {
        // x = [1, 3]: mean 2, std 1, so the normalized output is [-1, 1].
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2, 1], vec![1.0, 3.0], false).unwrap();
        let gamma = tape.leaf(&[1], vec![1.0], false).unwrap();
        let beta = tape.leaf(&[1], vec![0.0], false).unwrap();
        let mut stats = RunningStats::new(1);
        let y = x
            .batch_norm(&gamma, &beta, &mut stats, BnMode::Train, 1, 0.0, 0.1)
            .unwrap();
        assert_eq!(y.to_vec(), vec![-1.0, 1.0]);
    }

    #[test]
    fn bn_eval_before_train_fails() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2, 1], vec![1.0, 3.0], false).unwrap();
        let gamma = tape.leaf(&[1], vec![1.0], false).unwrap();
        let beta = tape.leaf(&[1], vec![0.0], false).unwrap();
        let mut stats = RunningStats::new(1);
        let err = x
            .batch_norm(&gamma, &beta, &mut stats, BnMode::Eval, 1, 1e-5, 0.1)
            .unwrap_err();
        assert!(matches!(err, crate::error::Error::UninitializedStats(_)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0], false)
            .unwrap();
        let y = x.softmax_last().unwrap();
        let v = y.to_vec();
        for row in v.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Identical logits attend uniformly.
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 3], vec![0.0, 0.1, 0.2], false).unwrap();
        assert!(x.cross_entropy(&[3]).is_err());
    }
}
