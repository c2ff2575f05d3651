//! Addition-only matrix kernels.
//!
//! A product against a binary operand selects rows; a product against a
//! ternary operand selects signed terms. Both kernels therefore run on
//! gather-and-add alone, and they count every arithmetic operation they
//! perform: the multiplication counter exists so callers can assert it is
//! exactly zero.
//!
//! Accumulation follows the same ascending inner index as the dense
//! kernels, so on finite inputs the results are bit-identical to a dense
//! matrix product (multiplying by 0, 1, or -1 is exact).

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Exact operation tally for one kernel call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelCounts {
    pub additions: u64,
    pub subtractions: u64,
    pub multiplications: u64,
}

impl KernelCounts {
    pub fn merge(&mut self, other: KernelCounts) {
        self.additions += other.additions;
        self.subtractions += other.subtractions;
        self.multiplications += other.multiplications;
    }

    /// Additions and subtractions combined (both are accumulates).
    pub fn accumulates(&self) -> u64 {
        self.additions + self.subtractions
    }
}

fn ensure_binary<T: Scalar>(a: &[T], what: &str) -> Result<()> {
    if a.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::domain(format!("{what} must be strictly binary")));
    }
    Ok(())
}

fn ensure_ternary<T: Scalar>(a: &[T], what: &str) -> Result<()> {
    if a
        .iter()
        .any(|&v| v != T::zero() && v != T::one() && v != -T::one())
    {
        return Err(Error::domain(format!("{what} must be strictly ternary")));
    }
    Ok(())
}

/// `C = A . B` for binary `A (m x k)` and real `B (k x n)`: each output row
/// is the sum of the `B` rows selected by the ones of the `A` row. The
/// first selected row is a copy; every further row costs `n` additions.
pub fn addonly_matmul_binary<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> Result<(Vec<T>, KernelCounts)> {
    if a.len() != m * k || b.len() != k * n {
        return Err(Error::dimension(format!(
            "addonly_matmul_binary: buffers do not match {m}x{k} . {k}x{n}"
        )));
    }
    ensure_binary(a, "left operand")?;
    let mut out = vec![T::zero(); m * n];
    let mut counts = KernelCounts::default();
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let row = &mut out[i * n..(i + 1) * n];
        let mut selected = 0u64;
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::one() {
                let b_row = &b[kk * n..(kk + 1) * n];
                if selected == 0 {
                    row.copy_from_slice(b_row);
                } else {
                    for (r, &bv) in row.iter_mut().zip(b_row.iter()) {
                        *r += bv;
                    }
                }
                selected += 1;
            }
        }
        if selected > 1 {
            counts.additions += (selected - 1) * n as u64;
        }
    }
    Ok((out, counts))
}

/// `C = A . B` for real `A (m x k)` and ternary `B (k x n)`: walking the
/// inner index in order, a `+1` entry adds `A[i][kk]` and a `-1` entry
/// subtracts it. The first positive term of an output is a copy.
pub fn addonly_matmul_ternary<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> Result<(Vec<T>, KernelCounts)> {
    if a.len() != m * k || b.len() != k * n {
        return Err(Error::dimension(format!(
            "addonly_matmul_ternary: buffers do not match {m}x{k} . {k}x{n}"
        )));
    }
    ensure_ternary(b, "right operand")?;
    // Signed gather lists per output column, inner index ascending.
    let mut cols: Vec<Vec<(u32, bool)>> = vec![Vec::new(); n];
    for kk in 0..k {
        for (j, col) in cols.iter_mut().enumerate() {
            let v = b[kk * n + j];
            if v == T::one() {
                col.push((kk as u32, true));
            } else if v == -T::one() {
                col.push((kk as u32, false));
            }
        }
    }
    let mut out = vec![T::zero(); m * n];
    let mut counts = KernelCounts::default();
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, col) in cols.iter().enumerate() {
            let mut acc = T::zero();
            let mut started = false;
            for &(kk, plus) in col {
                let term = a_row[kk as usize];
                if plus {
                    if started {
                        acc += term;
                        counts.additions += 1;
                    } else {
                        acc = term;
                        started = true;
                    }
                } else {
                    acc -= term;
                    counts.subtractions += 1;
                    started = true;
                }
            }
            out[i * n + j] = acc;
        }
    }
    Ok((out, counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_identity_selects_rows_without_adds() {
        let eye = vec![1.0_f64, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        let (c, counts) = addonly_matmul_binary(&eye, &b, 2, 2, 2).unwrap();
        assert_eq!(c, b);
        assert_eq!(counts.additions, 0);
        assert_eq!(counts.multiplications, 0);
    }

    #[test]
    fn binary_all_ones_row_sums_column() {
        let a = vec![1.0_f64, 1.0, 1.0];
        let b = vec![2.0, 3.0, 4.0];
        let (c, counts) = addonly_matmul_binary(&a, &b, 1, 3, 1).unwrap();
        assert_eq!(c, vec![9.0]);
        assert_eq!(counts.additions, 2);
        assert_eq!(counts.multiplications, 0);
    }

    #[test]
    fn binary_rejects_non_binary_left() {
        let a = vec![0.5_f64, 1.0];
        let b = vec![1.0, 1.0];
        assert!(matches!(
            addonly_matmul_binary(&a, &b, 1, 2, 1),
            Err(crate::error::Error::Domain(_))
        ));
    }

    #[test]
    fn ternary_zero_right_gives_zero() {
        let a = vec![1.0_f64, 2.0, 3.0];
        let b = vec![0.0; 3];
        let (c, counts) = addonly_matmul_ternary(&a, &b, 1, 3, 1).unwrap();
        assert_eq!(c, vec![0.0]);
        assert_eq!(counts, KernelCounts::default());
    }

    #[test]
    fn ternary_signed_gather() {
        // [1, 2, 3] . [1, -1, 0]^T = 1 - 2 = -1: one subtraction.
        let a = vec![1.0_f64, 2.0, 3.0];
        let b = vec![1.0, -1.0, 0.0];
        let (c, counts) = addonly_matmul_ternary(&a, &b, 1, 3, 1).unwrap();
        assert_eq!(c, vec![-1.0]);
        assert_eq!(counts.additions, 0);
        assert_eq!(counts.subtractions, 1);
        assert_eq!(counts.multiplications, 0);
    }

    #[test]
    fn ternary_rejects_non_ternary_right() {
        let a = vec![1.0_f64];
        let b = vec![2.0];
        assert!(matches!(
            addonly_matmul_ternary(&a, &b, 1, 1, 1),
            Err(crate::error::Error::Domain(_))
        ));
    }
}
