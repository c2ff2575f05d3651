//! Parameterized layers.
//!
//! Layers own their parameters as plain buffers. Each forward pass binds
//! them onto the current [`Tape`] as leaf tensors and registers the leaves
//! in a [`Binding`] so the optimizer can look up gradients by parameter
//! name afterwards. Rebinding per batch keeps tapes independent and
//! gradient application order deterministic.
//!
//! When the [`ForwardObserver`] carries a report, every layer records its
//! exact operation tally. Weight-activation products on spiking (binary or
//! ternary) inputs count one addition per active synapse and zero
//! multiplications; products on real inputs count standard MACs.

use std::collections::BTreeMap;

use rand::Rng;

use crate::analysis::{classify_domain, ForwardObserver, LayerOps, OpCategory, ValueDomain};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, RunningStats, Scalar, Tape, Tensor};

/// Forward-pass mode: training binds parameters with gradients enabled and
/// lets batch norm update its running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }

    pub fn wants_grad(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Name-keyed registry of the leaf tensors bound during one forward pass.
#[derive(Default)]
pub struct Binding<T> {
    leaves: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Binding<T> {
    pub fn new() -> Self {
        Binding {
            leaves: BTreeMap::new(),
        }
    }

    pub fn bind(
        &mut self,
        tape: &Tape<T>,
        name: &str,
        shape: &[usize],
        data: &[T],
        requires_grad: bool,
    ) -> Result<Tensor<T>> {
        let t = tape.leaf(shape, data.to_vec(), requires_grad)?;
        self.leaves.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.leaves.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.leaves.iter()
    }
}

/// Callback used to enumerate every learnable parameter of a model.
pub trait ParamVisitor<T> {
    fn visit(&mut self, name: &str, shape: &[usize], data: &mut Vec<T>);
}

impl<T, F: FnMut(&str, &[usize], &mut Vec<T>)> ParamVisitor<T> for F {
    fn visit(&mut self, name: &str, shape: &[usize], data: &mut Vec<T>) {
        self(name, shape, data)
    }
}

/// Fan-in-scaled uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n)
        .map(|_| T::c((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect()
}

fn count_nonzero<T: Scalar>(t: &Tensor<T>) -> u64 {
    t.values().iter().filter(|&&v| v != T::zero()).count() as u64
}

fn spiking_input(domain: ValueDomain) -> bool {
    matches!(domain, ValueDomain::Binary | ValueDomain::Ternary)
}

/// Dense affine map over the last dimension.
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut impl Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: fan_in_uniform(rng, in_dim, in_dim * out_dim),
            bias: bias.then(|| vec![T::zero(); out_dim]),
        }
    }

    /// Applies the map to `(..., in_dim)` input, flattening leading axes.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        binding: &mut Binding<T>,
        name: &str,
        x: &Tensor<T>,
        mode: Mode,
        obs: &mut ForwardObserver,
    ) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::dimension("linear input must have rank >= 1"))?;
        if last != self.in_dim {
            return Err(Error::dimension(format!(
                "linear {name} expects {} input channels, got {last}",
                self.in_dim
            )));
        }
        let rows = x.numel() / last;
        let w = binding.bind(
            tape,
            &format!("{name}.weight"),
            &[self.in_dim, self.out_dim],
            &self.weight,
            mode.wants_grad(),
        )?;
        let flat = x.reshape(&[rows, last])?;
        let mut y = flat.matmul(&w)?;
        if let Some(bias) = &self.bias {
            let b = binding.bind(
                tape,
                &format!("{name}.bias"),
                &[self.out_dim],
                bias,
                mode.wants_grad(),
            )?;
            y = y.add_bias(&b)?;
        }
        if obs.counting_enabled() {
            let domain = classify_domain(x);
            let (additions, multiplications) = if spiking_input(domain) {
                (count_nonzero(x) * self.out_dim as u64, 0)
            } else {
                let macs = (rows * self.in_dim * self.out_dim) as u64;
                (macs, macs)
            };
            let bias_adds = if self.bias.is_some() {
                (rows * self.out_dim) as u64
            } else {
                0
            };
            obs.record(LayerOps {
                name: name.to_string(),
                category: OpCategory::Linear,
                input_domain: domain,
                output_shape: y.shape().to_vec(),
                additions: additions + bias_adds,
                multiplications,
                comparisons: 0,
            });
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        let shape = [self.in_dim, self.out_dim];
        v.visit(&format!("{prefix}.weight"), &shape, &mut self.weight);
        if let Some(bias) = &mut self.bias {
            v.visit(&format!("{prefix}.bias"), &[self.out_dim], bias);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// 2-D convolution with square kernel, stride, and zero padding.
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        rng: &mut impl Rng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: fan_in_uniform(rng, fan_in, out_c * fan_in),
            bias: vec![T::zero(); out_c],
        }
    }

    pub fn forward(
        &self,
        tape: &Tape<T>,
        binding: &mut Binding<T>,
        name: &str,
        x: &Tensor<T>,
        mode: Mode,
        obs: &mut ForwardObserver,
    ) -> Result<Tensor<T>> {
        let w = binding.bind(
            tape,
            &format!("{name}.weight"),
            &[self.out_c, self.in_c, self.kernel, self.kernel],
            &self.weight,
            mode.wants_grad(),
        )?;
        let b = binding.bind(
            tape,
            &format!("{name}.bias"),
            &[self.out_c],
            &self.bias,
            mode.wants_grad(),
        )?;
        let y = x.conv2d(&w, &b, self.stride, self.pad)?;
        if obs.counting_enabled() {
            let domain = classify_domain(x);
            let out_shape = y.shape().to_vec();
            let (additions, multiplications) = self.op_counts(x, domain, &out_shape);
            obs.record(LayerOps {
                name: name.to_string(),
                category: OpCategory::Conv,
                input_domain: domain,
                output_shape: out_shape,
                additions,
                multiplications,
                comparisons: 0,
            });
        }
        Ok(y)
    }

    /// Exact accumulate/multiply counts for this call. On spiking input,
    /// each active pixel contributes one addition per kernel placement it
    /// participates in, per output channel; the participation count per
    /// coordinate comes from a 1-D table.
    fn op_counts(
        &self,
        x: &Tensor<T>,
        domain: ValueDomain,
        out_shape: &[usize],
    ) -> (u64, u64) {
        let xs = x.shape();
        let (r, h, w) = (xs[0], xs[2], xs[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let out_positions = (r * self.out_c * oh * ow) as u64;
        if spiking_input(domain) {
            let participation = |size: usize, out_size: usize| -> Vec<u64> {
                (0..size)
                    .map(|i| {
                        (0..self.kernel)
                            .filter(|&kk| {
                                let t = i + self.pad;
                                t >= kk
                                    && (t - kk) % self.stride == 0
                                    && (t - kk) / self.stride < out_size
                            })
                            .count() as u64
                    })
                    .collect()
            };
            let cnt_y = participation(h, oh);
            let cnt_x = participation(w, ow);
            let mut synapse_adds = 0u64;
            let vals = x.values();
            for (idx, &v) in vals.iter().enumerate() {
                if v != T::zero() {
                    let iy = (idx / w) % h;
                    let ix = idx % w;
                    synapse_adds += cnt_y[iy] * cnt_x[ix];
                }
            }
            (synapse_adds * self.out_c as u64 + out_positions, 0)
        } else {
            let macs = out_positions * (self.in_c * self.kernel * self.kernel) as u64;
            (macs + out_positions, macs)
        }
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        let shape = [self.out_c, self.in_c, self.kernel, self.kernel];
        v.visit(&format!("{prefix}.weight"), &shape, &mut self.weight);
        v.visit(&format!("{prefix}.bias"), &[self.out_c], &mut self.bias);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Batch normalization layer owning scale, shift, and running statistics.
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub stats: RunningStats<T>,
    pub eps: T,
    pub momentum: T,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            stats: RunningStats::new(channels),
            eps: T::c(BN_EPS),
            momentum: T::c(BN_MOMENTUM),
        }
    }

    /// Normalizes over `channel_axis` (1 for NCHW maps, last for tokens).
    pub fn forward(
        &mut self,
        tape: &Tape<T>,
        binding: &mut Binding<T>,
        name: &str,
        x: &Tensor<T>,
        channel_axis: usize,
        mode: Mode,
        obs: &mut ForwardObserver,
    ) -> Result<Tensor<T>> {
        let gamma = binding.bind(
            tape,
            &format!("{name}.gamma"),
            &[self.channels],
            &self.gamma,
            mode.wants_grad(),
        )?;
        let beta = binding.bind(
            tape,
            &format!("{name}.beta"),
            &[self.channels],
            &self.beta,
            mode.wants_grad(),
        )?;
        let y = x.batch_norm(
            &gamma,
            &beta,
            &mut self.stats,
            mode.bn(),
            channel_axis,
            self.eps,
            self.momentum,
        )?;
        if obs.counting_enabled() {
            // Normalize-then-affine: one multiply and two adds per element.
            let elems = x.numel() as u64;
            obs.record(LayerOps {
                name: name.to_string(),
                category: OpCategory::Norm,
                input_domain: classify_domain(x),
                output_shape: y.shape().to_vec(),
                additions: 2 * elems,
                multiplications: elems,
                comparisons: 0,
            });
        }
        Ok(y)
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.visit(&format!("{prefix}.gamma"), &[self.channels], &mut self.gamma);
        v.visit(&format!("{prefix}.beta"), &[self.channels], &mut self.beta);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}
