//! Stateful spiking neuron layers.
//!
//! Two membrane dynamics are provided over the same leaky
//! integrate-and-fire recurrence `U[t] = H[t-1] + X[t]`:
//!
//! - binary: `S = Hea(U - v_th)`, reset `H = v_reset*S + beta*U*(1-S)`
//! - ternary: `S = sign(U) * Hea(|U| - v_th)`,
//!   reset `H = v_reset*S + beta*U*(1-|S|)`
//!
//! Gradients flow through the rectangular-triangular surrogate recorded by
//! the spike ops; everything else is ordinary tape arithmetic, so
//! backpropagation through time falls out of the recorded graph.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Width of the rectangular-triangular surrogate window.
pub const SURROGATE_ALPHA: f64 = 1.0;

/// Membrane threshold, reset value, and decay factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams<T> {
    pub v_th: T,
    pub v_reset: T,
    pub beta: T,
}

impl<T: Scalar> NeuronParams<T> {
    pub fn new(v_th: T, v_reset: T, beta: T) -> Result<Self> {
        if !(v_th > T::zero()) {
            return Err(Error::config(format!("v_th must be positive, got {v_th}")));
        }
        if !(beta >= T::zero() && beta <= T::one()) {
            return Err(Error::config(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(NeuronParams { v_th, v_reset, beta })
    }
}

impl<T: Scalar> Default for NeuronParams<T> {
    /// v_th = 1, v_reset = 0, beta = 0.5.
    fn default() -> Self {
        NeuronParams {
            v_th: T::one(),
            v_reset: T::zero(),
            beta: T::c(0.5),
        }
    }
}

/// Post-spike membrane values `H[t]`, carried between steps.
#[derive(Clone)]
pub struct NeuronState<T> {
    pub h: Tensor<T>,
}

impl<T: Scalar> NeuronState<T> {
    /// Fresh all-zero state with `like`'s shape, on `like`'s tape.
    pub fn zeros_like(like: &Tensor<T>) -> Self {
        NeuronState {
            h: like.zeros_like(),
        }
    }
}

/// One binary LIF step: integrate, threshold, reset-or-decay.
pub fn lif_step<T: Scalar>(
    state: &NeuronState<T>,
    x_t: &Tensor<T>,
    params: &NeuronParams<T>,
) -> Result<(Tensor<T>, NeuronState<T>)> {
    let alpha = T::c(SURROGATE_ALPHA);
    let u = state.h.add(x_t)?;
    let s = u.heaviside_surrogate(params.v_th, alpha);
    let h = next_membrane(&u, &s, &s, params)?;
    Ok((s, NeuronState { h }))
}

/// One ternary step: the threshold applies to |U| and the spike carries
/// the sign of the membrane.
pub fn ternary_step<T: Scalar>(
    state: &NeuronState<T>,
    x_t: &Tensor<T>,
    params: &NeuronParams<T>,
) -> Result<(Tensor<T>, NeuronState<T>)> {
    let alpha = T::c(SURROGATE_ALPHA);
    let u = state.h.add(x_t)?;
    let s = u.ternary_surrogate(params.v_th, alpha);
    let fired = s.abs();
    let h = next_membrane(&u, &s, &fired, params)?;
    Ok((s, NeuronState { h }))
}

/// `H' = v_reset*s + beta*U*(1 - fired)` where `fired` is `s` for binary
/// neurons and `|s|` for ternary ones.
fn next_membrane<T: Scalar>(
    u: &Tensor<T>,
    s: &Tensor<T>,
    fired: &Tensor<T>,
    params: &NeuronParams<T>,
) -> Result<Tensor<T>> {
    let keep = fired.affine(-T::one(), T::one());
    let decay = u.scale(params.beta).mul(&keep)?;
    s.scale(params.v_reset).add(&decay)
}

/// Which spike codomain a layer emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronKind {
    Binary,
    Ternary,
}

/// A spiking neuron layer: dynamics kind plus parameters. Layers carry no
/// learned state; the membrane resets to zero at the start of every input
/// sequence so nothing leaks across samples.
#[derive(Clone, Copy, Debug)]
pub struct SpikingNeuron<T> {
    pub kind: NeuronKind,
    pub params: NeuronParams<T>,
}

impl<T: Scalar> SpikingNeuron<T> {
    pub fn binary(params: NeuronParams<T>) -> Self {
        SpikingNeuron {
            kind: NeuronKind::Binary,
            params,
        }
    }

    pub fn ternary(params: NeuronParams<T>) -> Self {
        SpikingNeuron {
            kind: NeuronKind::Ternary,
            params,
        }
    }

    pub fn step(
        &self,
        state: &NeuronState<T>,
        x_t: &Tensor<T>,
    ) -> Result<(Tensor<T>, NeuronState<T>)> {
        match self.kind {
            NeuronKind::Binary => lif_step(state, x_t, &self.params),
            NeuronKind::Ternary => ternary_step(state, x_t, &self.params),
        }
    }

    /// Unrolls the dynamics over a time-major tensor whose leading axis
    /// holds `t_steps * batch` rows (batch = 1 gives a plain `[T, ...]`
    /// layout). State starts at zero and carries across the `t_steps`
    /// slices; the output stacks the per-step spikes in the same layout.
    pub fn run_sequence(&self, x: &Tensor<T>, t_steps: usize) -> Result<Tensor<T>> {
        let rows = *x
            .shape()
            .first()
            .ok_or_else(|| Error::dimension("run_sequence on rank-0 tensor"))?;
        if t_steps == 0 {
            return Err(Error::config("run_sequence needs at least one timestep"));
        }
        if rows % t_steps != 0 {
            return Err(Error::dimension(format!(
                "{rows} rows not divisible by {t_steps} timesteps"
            )));
        }
        let batch = rows / t_steps;
        let first = x.slice_rows(0, batch)?;
        let mut state = NeuronState::zeros_like(&first);
        let mut spikes = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let x_t = if t == 0 {
                first.clone()
            } else {
                x.slice_rows(t * batch, batch)?
            };
            let (s, next) = self.step(&state, &x_t)?;
            spikes.push(s);
            state = next;
        }
        x.tape().concat_rows(&spikes)
    }
}

/// `max(0, x)` with the 0/1 gate as its backward rule.
pub fn relu_activation<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.relu()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn params(v_th: f64, v_reset: f64, beta: f64) -> NeuronParams<f64> {
        NeuronParams::new(v_th, v_reset, beta).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(NeuronParams::new(0.0, 0.0, 0.5).is_err());
        assert!(NeuronParams::new(1.0, 0.0, 1.5).is_err());
        assert!(NeuronParams::new(1.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn resting_neuron_stays_silent() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        let state = NeuronState::zeros_like(&x);
        let (s, next) = lif_step(&state, &x, &params(1.0, 0.0, 0.5)).unwrap();
        assert_eq!(s.to_vec(), vec![0.0, 0.0]);
        assert_eq!(next.h.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn step_shape_mismatch_is_error() {
        let tape: Tape<f64> = Tape::new();
        let h = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        let x = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let state = NeuronState { h };
        assert!(lif_step(&state, &x, &params(1.0, 0.0, 0.5)).is_err());
    }

    #[test]
    fn single_step_sequence_equals_step() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[1, 3], vec![0.4, 1.0, 2.5]).unwrap();
        let neuron = SpikingNeuron::binary(params(1.0, 0.0, 0.5));
        let seq = neuron.run_sequence(&x, 1).unwrap();
        let x0 = tape.constant(&[1, 3], vec![0.4, 1.0, 2.5]).unwrap();
        let state = NeuronState::zeros_like(&x0);
        let (s, _) = neuron.step(&state, &x0).unwrap();
        assert_eq!(seq.to_vec(), s.to_vec());
    }

    #[test]
    fn constant_drive_alternates() {
        // 0.6 per step, beta=1, v_th=1: integrate two steps, fire, reset.
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[4, 1], vec![0.6; 4]).unwrap();
        let neuron = SpikingNeuron::binary(params(1.0, 0.0, 1.0));
        let s = neuron.run_sequence(&x, 4).unwrap();
        assert_eq!(s.to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn all_zero_input_gives_all_zero_spikes() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[3, 2], vec![0.0; 6]).unwrap();
        let neuron = SpikingNeuron::ternary(NeuronParams::default());
        let s = neuron.run_sequence(&x, 3).unwrap();
        assert!(s.to_vec().iter().all(|&v| v == 0.0));
    }
}
