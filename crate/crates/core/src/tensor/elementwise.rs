//! Elementwise tape operations, including the spike nonlinearities and
//! their surrogate derivatives.

use super::{BackwardCtx, Scalar, Tensor};
use crate::error::{Error, Result};

/// Rectangular-triangular surrogate derivative of the Heaviside step,
/// evaluated at distance `d` from the threshold:
/// `g(d) = (1/alpha) * max(0, 1 - |d|/alpha)`.
pub fn surrogate_window<T: Scalar>(d: T, alpha: T) -> T {
    let one = T::one();
    let w = one - (d.abs() / alpha);
    if w > T::zero() {
        w / alpha
    } else {
        T::zero()
    }
}

impl<T: Scalar> Tensor<T> {
    fn check_same_shape(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        self.check_same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(Error::dimension(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let values: Vec<T> = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let req = self.requires_grad() || other.requires_grad();
        let (a_id, b_id) = (self.id(), other.id());
        Ok(self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(a_id) {
                    ctx.accumulate(a_id, g.clone());
                }
                if ctx.wants_grad(b_id) {
                    ctx.accumulate(b_id, g);
                }
            }
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        let values: Vec<T> = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let req = self.requires_grad() || other.requires_grad();
        let (a_id, b_id) = (self.id(), other.id());
        Ok(self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(a_id) {
                    ctx.accumulate(a_id, g.clone());
                }
                if ctx.wants_grad(b_id) {
                    ctx.accumulate(b_id, g.iter().map(|&v| -v).collect());
                }
            }
        }))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "mul")?;
        let values: Vec<T> = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let req = self.requires_grad() || other.requires_grad();
        let (a_id, b_id) = (self.id(), other.id());
        Ok(self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(a_id) {
                    let b = ctx.values(b_id);
                    let contrib: Vec<T> = g.iter().zip(b.iter()).map(|(&gi, &bi)| gi * bi).collect();
                    ctx.accumulate(a_id, contrib);
                }
                if ctx.wants_grad(b_id) {
                    let a = ctx.values(a_id);
                    let contrib: Vec<T> = g.iter().zip(a.iter()).map(|(&gi, &ai)| gi * ai).collect();
                    ctx.accumulate(b_id, contrib);
                }
            }
        }))
    }

    /// `a * x + b` with scalar coefficients.
    pub fn affine(&self, a: T, b: T) -> Tensor<T> {
        let values: Vec<T> = self.values().iter().map(|&x| a * x + b).collect();
        let req = self.requires_grad();
        let x_id = self.id();
        self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    ctx.accumulate(x_id, g.iter().map(|&gi| a * gi).collect());
                }
            }
        })
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.affine(c, T::zero())
    }

    pub fn abs(&self) -> Tensor<T> {
        let values: Vec<T> = self.values().iter().map(|&x| x.abs()).collect();
        let req = self.requires_grad();
        let x_id = self.id();
        self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let x = ctx.values(x_id);
                    let contrib: Vec<T> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| gi * xi.signum_or_zero())
                        .collect();
                    ctx.accumulate(x_id, contrib);
                }
            }
        })
    }

    /// `max(0, x)`; the backward rule is the 0/1 gate (0 at the kink).
    pub fn relu(&self) -> Tensor<T> {
        let values: Vec<T> = self
            .values()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let req = self.requires_grad();
        let x_id = self.id();
        self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let x = ctx.values(x_id);
                    let contrib: Vec<T> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    ctx.accumulate(x_id, contrib);
                }
            }
        })
    }

    /// Binary threshold `Hea(x - v_th)`: 1 where the argument is
    /// non-negative, 0 otherwise. The recorded backward rule is the
    /// rectangular-triangular surrogate with window `alpha`.
    pub fn heaviside_surrogate(&self, v_th: T, alpha: T) -> Tensor<T> {
        let values: Vec<T> = self
            .values()
            .iter()
            .map(|&x| if x - v_th >= T::zero() { T::one() } else { T::zero() })
            .collect();
        let req = self.requires_grad();
        let x_id = self.id();
        self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let x = ctx.values(x_id);
                    let contrib: Vec<T> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| gi * surrogate_window(xi - v_th, alpha))
                        .collect();
                    ctx.accumulate(x_id, contrib);
                }
            }
        })
    }

    /// Ternary threshold `sign(x) * Hea(|x| - v_th)` with values in
    /// {-1, 0, 1}. The surrogate is applied to the magnitude threshold;
    /// the sign acts as a pass-through in the fired region, so the
    /// backward gate is `g(|x| - v_th)` in both polarities.
    pub fn ternary_surrogate(&self, v_th: T, alpha: T) -> Tensor<T> {
        let values: Vec<T> = self
            .values()
            .iter()
            .map(|&x| {
                if x.abs() - v_th >= T::zero() {
                    x.signum_or_zero()
                } else {
                    T::zero()
                }
            })
            .collect();
        let req = self.requires_grad();
        let x_id = self.id();
        self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let x = ctx.values(x_id);
                    let contrib: Vec<T> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| gi * surrogate_window(xi.abs() - v_th, alpha))
                        .collect();
                    ctx.accumulate(x_id, contrib);
                }
            }
        })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.values().iter().copied().sum();
        let req = self.requires_grad();
        let x_id = self.id();
        let n = self.numel();
        self.tape().op(vec![], vec![total], req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    ctx.accumulate(x_id, vec![g[0]; n]);
                }
            }
        })
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).expect("numel fits scalar");
        self.sum().scale(T::one() / n)
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Scalar> SignumOrZero for T {
    /// `signum` with `sign(0) = 0` (the float `signum` maps 0 to 1).
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn add_rejects_shape_mismatch() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&[2], vec![1.0, 2.0], false).unwrap();
        let b = tape.leaf(&[3], vec![1.0, 2.0, 3.0], false).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn relu_forward() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[3], vec![-1.0, 0.0, 2.0], false).unwrap();
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn heaviside_is_one_at_threshold() {
        // Hea outputs 1 for a non-negative argument, including exactly 0.
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1], vec![1.0], false).unwrap();
        assert_eq!(x.heaviside_surrogate(1.0, 1.0).to_vec(), vec![1.0]);
    }

    #[test]
    fn surrogate_window_matches_hand_values() {
        // Distance 0.5 with alpha 1 gives 0.5; outside the window gives 0.
        assert_eq!(surrogate_window(-0.5, 1.0), 0.5);
        assert_eq!(surrogate_window(2.0, 1.0), 0.0);
        assert_eq!(surrogate_window(0.0, 1.0), 1.0);
    }

    #[test]
    fn heaviside_surrogate_backward() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[3], vec![0.5, 1.0, 3.0], true).unwrap();
        let s = x.heaviside_surrogate(1.0, 1.0);
        assert_eq!(s.to_vec(), vec![0.0, 1.0, 1.0]);
        let loss = s.sum();
        let grads = tape.backward(&loss).unwrap();
        // Surrogate at distances -0.5, 0.0, +2.0.
        assert_eq!(grads.get(&x).unwrap(), vec![0.5, 1.0, 0.0]);
    }

    #[test]
    fn ternary_surrogate_forward_codomain() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[5], vec![-1.2, -0.3, 0.0, 0.7, 1.0], false)
            .unwrap();
        let s = x.ternary_surrogate(1.0, 1.0);
        assert_eq!(s.to_vec(), vec![-1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
