//! Shape and layout tape operations: views, row slicing/stacking, the
//! token/grid permutations used around convolutions, and global average
//! pooling over time and tokens.

use super::{BackwardCtx, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// Same data, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({numel})",
                self.shape(),
                self.numel(),
                shape
            )));
        }
        let values = self.to_vec();
        let req = self.requires_grad();
        let x_id = self.id();
        Ok(self.tape().op(shape.to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    ctx.accumulate(x_id, g);
                }
            }
        }))
    }

    /// Contiguous slice of `len` rows along axis 0.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::dimension("slice_rows on rank-0 tensor"));
        }
        let rows = shape[0];
        if start + len > rows {
            return Err(Error::dimension(format!(
                "row slice {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let per_row: usize = shape[1..].iter().product();
        let values = self.values()[start * per_row..(start + len) * per_row].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let req = self.requires_grad();
        let x_id = self.id();
        let in_numel = self.numel();
        Ok(self.tape().op(out_shape, values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let mut dx = vec![T::zero(); in_numel];
                    dx[start * per_row..(start + len) * per_row].copy_from_slice(&g);
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        let c = *shape
            .last()
            .ok_or_else(|| Error::dimension("narrow_last on rank-0 tensor"))?;
        if start + len > c {
            return Err(Error::dimension(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let rows = self.numel() / c;
        let mut values = Vec::with_capacity(rows * len);
        {
            let x = self.values();
            for row in x.chunks(c) {
                values.extend_from_slice(&row[start..start + len]);
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let req = self.requires_grad();
        let x_id = self.id();
        let in_numel = self.numel();
        Ok(self.tape().op(out_shape, values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let mut dx = vec![T::zero(); in_numel];
                    for (r, grow) in g.chunks(len).enumerate() {
                        dx[r * c + start..r * c + start + len].copy_from_slice(grow);
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }

    /// `(R, N, D)` tokens to an `(R, D, h, w)` grid with `N = h * w`.
    pub fn tokens_to_grid(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::dimension(format!(
                "tokens_to_grid expects (R, {}, D), got {:?}",
                h * w,
                shape
            )));
        }
        let (r, n, d) = (shape[0], shape[1], shape[2]);
        let mut values = vec![T::zero(); self.numel()];
        {
            let x = self.values();
            for ri in 0..r {
                for tok in 0..n {
                    for ch in 0..d {
                        values[((ri * d + ch) * h * w) + tok] = x[(ri * n + tok) * d + ch];
                    }
                }
            }
        }
        let req = self.requires_grad();
        let x_id = self.id();
        Ok(self.tape().op(vec![r, d, h, w], values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let mut dx = vec![T::zero(); r * n * d];
                    for ri in 0..r {
                        for tok in 0..n {
                            for ch in 0..d {
                                dx[(ri * n + tok) * d + ch] = g[((ri * d + ch) * n) + tok];
                            }
                        }
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }

    /// `(R, D, h, w)` grid back to `(R, h*w, D)` tokens.
    pub fn grid_to_tokens(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::dimension(format!(
                "grid_to_tokens expects rank-4 input, got {:?}",
                shape
            )));
        }
        let (r, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = h * w;
        let mut values = vec![T::zero(); self.numel()];
        {
            let x = self.values();
            for ri in 0..r {
                for ch in 0..d {
                    for tok in 0..n {
                        values[(ri * n + tok) * d + ch] = x[(ri * d + ch) * n + tok];
                    }
                }
            }
        }
        let req = self.requires_grad();
        let x_id = self.id();
        Ok(self.tape().op(vec![r, n, d], values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let mut dx = vec![T::zero(); r * d * n];
                    for ri in 0..r {
                        for ch in 0..d {
                            for tok in 0..n {
                                dx[(ri * d + ch) * n + tok] = g[(ri * n + tok) * d + ch];
                            }
                        }
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }

    /// Global average pool of a time-major `(T*B, N, D)` tensor over the
    /// time and token dimensions, yielding `(B, D)`.
    pub fn gap_time_tokens(&self, t_steps: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "gap_time_tokens expects (T*B, N, D), got {:?}",
                shape
            )));
        }
        let (rows, n, d) = (shape[0], shape[1], shape[2]);
        if t_steps == 0 || rows % t_steps != 0 {
            return Err(Error::dimension(format!(
                "{rows} rows not divisible by {t_steps} timesteps"
            )));
        }
        let b = rows / t_steps;
        let denom = T::from_usize(t_steps * n).expect("pool size fits scalar");
        let mut values = vec![T::zero(); b * d];
        {
            let x = self.values();
            for t in 0..t_steps {
                for bi in 0..b {
                    let row = t * b + bi;
                    for tok in 0..n {
                        let base = (row * n + tok) * d;
                        for ch in 0..d {
                            values[bi * d + ch] += x[base + ch];
                        }
                    }
                }
            }
            for v in values.iter_mut() {
                *v /= denom;
            }
        }
        let req = self.requires_grad();
        let x_id = self.id();
        let in_numel = self.numel();
        Ok(self.tape().op(vec![b, d], values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let mut dx = vec![T::zero(); in_numel];
                    for t in 0..t_steps {
                        for bi in 0..b {
                            let row = t * b + bi;
                            for tok in 0..n {
                                let base = (row * n + tok) * d;
                                for ch in 0..d {
                                    dx[base + ch] = g[bi * d + ch] / denom;
                                }
                            }
                        }
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }
}

impl<T: Scalar> Tape<T> {
    /// Concatenates tensors along axis 0. All trailing dimensions must match.
    pub fn concat_rows(&self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dimension("concat_rows of zero tensors"))?;
        let tail = &first.shape()[1..];
        let mut rows = 0usize;
        for p in parts {
            first.check_same_tape(p)?;
            if &p.shape()[1..] != tail {
                return Err(Error::dimension(format!(
                    "concat_rows trailing shape mismatch: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            rows += p.shape()[0];
        }
        let per_row: usize = tail.iter().product();
        let mut values = Vec::with_capacity(rows * per_row);
        for p in parts {
            values.extend_from_slice(&p.values());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        let req = parts.iter().any(Tensor::requires_grad);
        let sources: Vec<(usize, usize, bool)> = parts
            .iter()
            .map(|p| (p.id(), p.shape()[0] * per_row, p.requires_grad()))
            .collect();
        Ok(self.op(shape, values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                let mut offset = 0usize;
                for &(id, len, wants) in &sources {
                    if wants {
                        ctx.accumulate(id, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
        }))
    }

    /// Concatenates tensors along the last dimension.
    pub fn concat_last(&self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dimension("concat_last of zero tensors"))?;
        let lead = &first.shape()[..first.rank() - 1];
        let mut c_total = 0usize;
        for p in parts {
            first.check_same_tape(p)?;
            if &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::dimension(format!(
                    "concat_last leading shape mismatch: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            c_total += *p.shape().last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let mut values = Vec::with_capacity(rows * c_total);
        {
            let bufs: Vec<_> = parts.iter().map(|p| p.values()).collect();
            for r in 0..rows {
                for (buf, &wd) in bufs.iter().zip(widths.iter()) {
                    values.extend_from_slice(&buf[r * wd..(r + 1) * wd]);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.push(c_total);
        let req = parts.iter().any(Tensor::requires_grad);
        let sources: Vec<(usize, usize, bool)> = parts
            .iter()
            .zip(widths.iter())
            .map(|(p, &wd)| (p.id(), wd, p.requires_grad()))
            .collect();
        Ok(self.op(shape, values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                let mut col = 0usize;
                for &(id, wd, wants) in &sources {
                    if wants {
                        let mut dx = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * c_total + col..r * c_total + col + wd]);
                        }
                        ctx.accumulate(id, dx);
                    }
                    col += wd;
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn slice_and_concat_rows_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[4, 2], (0..8).map(f64::from).collect(), false)
            .unwrap();
        let a = x.slice_rows(0, 2).unwrap();
        let b = x.slice_rows(2, 2).unwrap();
        let y = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn tokens_grid_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[2, 4, 3], (0..24).map(f64::from).collect(), false)
            .unwrap();
        let grid = x.tokens_to_grid(2, 2).unwrap();
        assert_eq!(grid.shape(), &[2, 3, 2, 2]);
        let back = grid.grid_to_tokens().unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn gap_averages_time_and_tokens() {
        // T=2, B=1, N=2, D=1: mean of four values.
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[2, 2, 1], vec![1.0, 2.0, 3.0, 6.0], false)
            .unwrap();
        let y = x.gap_time_tokens(2).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.to_vec(), vec![3.0]);
    }

    #[test]
    fn narrow_last_and_concat_last_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[2, 4], (0..8).map(f64::from).collect(), false)
            .unwrap();
        let a = x.narrow_last(0, 2).unwrap();
        let b = x.narrow_last(2, 2).unwrap();
        let y = tape.concat_last(&[a, b]).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }
}
