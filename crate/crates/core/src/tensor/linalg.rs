//! Dense linear-algebra tape operations: matrix products, convolution,
//! pooling, bias broadcast.
//!
//! All kernels accumulate in a fixed order (ascending inner index), so two
//! runs over identical data produce bit-identical results. Parallelism only
//! splits work across disjoint output regions.

use rayon::prelude::*;

use super::{BackwardCtx, Scalar, Tensor};
use crate::error::{Error, Result};

/// `C = A(m x k) . B(k x n)`, row-major, inner index ascending.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (r, &bv) in row.iter_mut().zip(b_row.iter()) {
                *r += av * bv;
            }
        }
    });
    out
}

/// `C = A(m x k) . B(n x k)^T`.
pub(crate) fn matmul_nt_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *r = acc;
        }
    });
    out
}

/// `C = A(m x k)^T . B(m x n)`, output `k x n`.
pub(crate) fn matmul_tn_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    out.par_chunks_mut(n).enumerate().for_each(|(t, row)| {
        for i in 0..m {
            let av = a[i * k + t];
            let b_row = &b[i * n..(i + 1) * n];
            for (r, &bv) in row.iter_mut().zip(b_row.iter()) {
                *r += av * bv;
            }
        }
    });
    out
}

fn batched<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    (am, ak): (usize, usize),
    (bm, bk): (usize, usize),
    out_elems: usize,
    f: impl Fn(&[T], &[T]) -> Vec<T> + Sync,
) -> Vec<T>
where
    T: Send,
{
    let mut out = vec![T::zero(); batch * out_elems];
    out.par_chunks_mut(out_elems).enumerate().for_each(|(r, chunk)| {
        let a_sl = &a[r * am * ak..(r + 1) * am * ak];
        let b_sl = &b[r * bm * bk..(r + 1) * bm * bk];
        chunk.copy_from_slice(&f(a_sl, b_sl));
    });
    out
}

impl<T: Scalar> Tensor<T> {
    /// 2-D matrix product `A(m x k) . B(k x n)`.
    ///
    /// Backward: `dA = dC . B^T`, `dB = A^T . dC`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_tape(other)?;
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(Error::dimension(format!(
                "matmul expects rank-2 tensors, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (m, k) = (a_shape[0], a_shape[1]);
        let (k2, n) = (b_shape[0], b_shape[1]);
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul inner dimensions disagree: {:?} . {:?}",
                a_shape, b_shape
            )));
        }
        let values = {
            let a = self.values();
            let b = other.values();
            matmul_raw(&a, &b, m, k, n)
        };
        let req = self.requires_grad() || other.requires_grad();
        let (a_id, b_id) = (self.id(), other.id());
        Ok(self.tape().op(vec![m, n], values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(a_id) {
                    let b = ctx.values(b_id);
                    let da = matmul_nt_raw(&g, b, m, n, k);
                    ctx.accumulate(a_id, da);
                }
                if ctx.wants_grad(b_id) {
                    let a = ctx.values(a_id);
                    let db = matmul_tn_raw(a, &g, m, k, n);
                    ctx.accumulate(b_id, db);
                }
            }
        }))
    }

    /// Batched product `(R, M, K) . (R, K, N) -> (R, M, N)`.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_tape(other)?;
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 3 || b_shape.len() != 3 || a_shape[0] != b_shape[0] {
            return Err(Error::dimension(format!(
                "bmm expects matching rank-3 batches, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (r, m, k) = (a_shape[0], a_shape[1], a_shape[2]);
        let (k2, n) = (b_shape[1], b_shape[2]);
        if k != k2 {
            return Err(Error::dimension(format!(
                "bmm inner dimensions disagree: {:?} . {:?}",
                a_shape, b_shape
            )));
        }
        let values = {
            let a = self.values();
            let b = other.values();
            batched(&a, &b, r, (m, k), (k, n), m * n, |x, y| {
                matmul_raw(x, y, m, k, n)
            })
        };
        let req = self.requires_grad() || other.requires_grad();
        let (a_id, b_id) = (self.id(), other.id());
        Ok(self.tape().op(vec![r, m, n], values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(a_id) {
                    let b = ctx.values(b_id);
                    let da = batched(&g, b, r, (m, n), (k, n), m * k, |gs, bs| {
                        matmul_nt_raw(gs, bs, m, n, k)
                    });
                    ctx.accumulate(a_id, da);
                }
                if ctx.wants_grad(b_id) {
                    let a = ctx.values(a_id);
                    let db = batched(a, &g, r, (m, k), (m, n), k * n, |as_, gs| {
                        matmul_tn_raw(as_, gs, m, k, n)
                    });
                    ctx.accumulate(b_id, db);
                }
            }
        }))
    }

    /// Batched product against a transposed right operand:
    /// `(R, M, K) . (R, N, K)^T -> (R, M, N)`.
    pub fn bmm_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_tape(other)?;
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 3 || b_shape.len() != 3 || a_shape[0] != b_shape[0] {
            return Err(Error::dimension(format!(
                "bmm_nt expects matching rank-3 batches, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (r, m, k) = (a_shape[0], a_shape[1], a_shape[2]);
        let (n, k2) = (b_shape[1], b_shape[2]);
        if k != k2 {
            return Err(Error::dimension(format!(
                "bmm_nt inner dimensions disagree: {:?} . {:?}",
                a_shape, b_shape
            )));
        }
        let values = {
            let a = self.values();
            let b = other.values();
            batched(&a, &b, r, (m, k), (n, k), m * n, |x, y| {
                matmul_nt_raw(x, y, m, k, n)
            })
        };
        let req = self.requires_grad() || other.requires_grad();
        let (a_id, b_id) = (self.id(), other.id());
        Ok(self.tape().op(vec![r, m, n], values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                // C = A . B^T  =>  dA = dC . B, dB = dC^T . A
                if ctx.wants_grad(a_id) {
                    let b = ctx.values(b_id);
                    let da = batched(&g, b, r, (m, n), (n, k), m * k, |gs, bs| {
                        matmul_raw(gs, bs, m, n, k)
                    });
                    ctx.accumulate(a_id, da);
                }
                if ctx.wants_grad(b_id) {
                    let a = ctx.values(a_id);
                    let db = batched(&g, a, r, (m, n), (m, k), n * k, |gs, as_| {
                        matmul_tn_raw(gs, as_, m, n, k)
                    });
                    ctx.accumulate(b_id, db);
                }
            }
        }))
    }

    /// Broadcast-add a rank-1 bias over the last dimension.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_tape(bias)?;
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::dimension("add_bias on rank-0 tensor"))?;
        if bias.shape() != [c] {
            return Err(Error::dimension(format!(
                "bias shape {:?} does not match channel count {}",
                bias.shape(),
                c
            )));
        }
        let values: Vec<T> = {
            let x = self.values();
            let b = bias.values();
            x.chunks(c)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(&xv, &bv)| xv + bv))
                .collect()
        };
        let req = self.requires_grad() || bias.requires_grad();
        let (x_id, b_id) = (self.id(), bias.id());
        Ok(self.tape().op(self.shape().to_vec(), values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    ctx.accumulate(x_id, g.clone());
                }
                if ctx.wants_grad(b_id) {
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row.iter()) {
                            *d += gv;
                        }
                    }
                    ctx.accumulate(b_id, db);
                }
            }
        }))
    }

    /// 2-D convolution over `(R, C, H, W)` input with `(O, C, KH, KW)`
    /// weights, square stride and zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        self.check_same_tape(weight)?;
        self.check_same_tape(bias)?;
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dimension(format!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (r, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::dimension(format!(
                "conv2d channel mismatch: input has {c}, weight expects {wc}"
            )));
        }
        if bias.shape() != [o] {
            return Err(Error::dimension("conv2d bias must have one entry per output channel"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dimension("conv2d kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let dims = ConvDims { r, c, h, w, o, kh, kw, oh, ow, stride, pad };
        let values = {
            let x = self.values();
            let wv = weight.values();
            let bv = bias.values();
            conv2d_forward(&x, &wv, &bv, dims)
        };
        let req = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let (x_id, w_id, b_id) = (self.id(), weight.id(), bias.id());
        Ok(self.tape().op(vec![r, o, oh, ow], values, req, move |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let wv = ctx.values(w_id);
                    let dx = conv2d_backward_input(&g, wv, dims);
                    ctx.accumulate(x_id, dx);
                }
                if ctx.wants_grad(w_id) {
                    let x = ctx.values(x_id);
                    let dw = conv2d_backward_weight(&g, x, dims);
                    ctx.accumulate(w_id, dw);
                }
                if ctx.wants_grad(b_id) {
                    let mut db = vec![T::zero(); dims.o];
                    for ri in 0..dims.r {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let base = (ri * dims.o + oc) * dims.oh * dims.ow;
                            for &gv in &g[base..base + dims.oh * dims.ow] {
                                *d += gv;
                            }
                        }
                    }
                    ctx.accumulate(b_id, db);
                }
            }
        }))
    }

    /// 2x2 max-pool with stride 2 over `(R, C, H, W)`. H and W must be even.
    pub fn maxpool2(&self) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::dimension(format!("maxpool2 expects rank-4 input, got {:?}", xs)));
        }
        let (r, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dimension(format!(
                "maxpool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let plane = h * w;
        let out_plane = oh * ow;
        let mut values = vec![T::zero(); r * c * out_plane];
        let mut argmax = vec![0usize; r * c * out_plane];
        {
            let guard = self.values();
            let x: &[T] = &guard;
            values
                .par_chunks_mut(out_plane)
                .zip(argmax.par_chunks_mut(out_plane))
                .enumerate()
                .for_each(|(rc, (vals, args))| {
                    let base = rc * plane;
                    for py in 0..oh {
                        for px in 0..ow {
                            let i0 = base + (2 * py) * w + 2 * px;
                            let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                            let mut best = candidates[0];
                            for &idx in &candidates[1..] {
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            vals[py * ow + px] = x[best];
                            args[py * ow + px] = best;
                        }
                    }
                });
        }
        let req = self.requires_grad();
        let x_id = self.id();
        let in_numel = self.numel();
        Ok(self.tape().op(vec![r, c, oh, ow], values, req, |out| {
            move |ctx: &mut BackwardCtx<'_, T>| {
                let Some(g) = ctx.out_grad(out) else { return };
                if ctx.wants_grad(x_id) {
                    let mut dx = vec![T::zero(); in_numel];
                    for (&gv, &idx) in g.iter().zip(argmax.iter()) {
                        dx[idx] += gv;
                    }
                    ctx.accumulate(x_id, dx);
                }
            }
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    r: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], d: ConvDims) -> Vec<T> {
    let out_img = d.o * d.oh * d.ow;
    let mut out = vec![T::zero(); d.r * out_img];
    out.par_chunks_mut(out_img).enumerate().for_each(|(ri, img)| {
        let x_img = &x[ri * d.c * d.h * d.w..(ri + 1) * d.c * d.h * d.w];
        for oc in 0..d.o {
            let w_oc = &weight[oc * d.c * d.kh * d.kw..(oc + 1) * d.c * d.kh * d.kw];
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias[oc];
                    for ic in 0..d.c {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc += x_img[(ic * d.h + iy as usize) * d.w + ix as usize]
                                    * w_oc[(ic * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                    img[(oc * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    });
    out
}

fn conv2d_backward_input<T: Scalar>(g: &[T], weight: &[T], d: ConvDims) -> Vec<T> {
    let in_img = d.c * d.h * d.w;
    let mut dx = vec![T::zero(); d.r * in_img];
    dx.par_chunks_mut(in_img).enumerate().for_each(|(ri, dimg)| {
        let g_img = &g[ri * d.o * d.oh * d.ow..(ri + 1) * d.o * d.oh * d.ow];
        for oc in 0..d.o {
            let w_oc = &weight[oc * d.c * d.kh * d.kw..(oc + 1) * d.c * d.kh * d.kw];
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let gv = g_img[(oc * d.oh + oy) * d.ow + ox];
                    for ic in 0..d.c {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                dimg[(ic * d.h + iy as usize) * d.w + ix as usize] +=
                                    gv * w_oc[(ic * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv2d_backward_weight<T: Scalar>(g: &[T], x: &[T], d: ConvDims) -> Vec<T> {
    let w_oc_len = d.c * d.kh * d.kw;
    let mut dw = vec![T::zero(); d.o * w_oc_len];
    dw.par_chunks_mut(w_oc_len).enumerate().for_each(|(oc, dslice)| {
        for ri in 0..d.r {
            let x_img = &x[ri * d.c * d.h * d.w..(ri + 1) * d.c * d.h * d.w];
            let g_img = &g[ri * d.o * d.oh * d.ow..(ri + 1) * d.o * d.oh * d.ow];
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let gv = g_img[(oc * d.oh + oy) * d.ow + ox];
                    for ic in 0..d.c {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                dslice[(ic * d.kh + ky) * d.kw + kx] +=
                                    gv * x_img[(ic * d.h + iy as usize) * d.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    dw
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn matmul_identity() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let b = tape.leaf(&[2, 2], vec![3.0, 4.0, 5.0, 6.0], false).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&[1, 2], vec![1.0, 2.0], false).unwrap();
        let b = tape.leaf(&[2, 1], vec![3.0, 4.0], false).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        let b = tape.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn conv2d_matches_hand_case() {
        // Single 2x2 image, 1x1 kernel scaling by 2, bias 1.
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false)
            .unwrap();
        let w = tape.leaf(&[1, 1, 1, 1], vec![2.0], false).unwrap();
        let b = tape.leaf(&[1], vec![1.0], false).unwrap();
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0], false)
            .unwrap();
        let y = x.maxpool2().unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.to_vec(), vec![5.0, 7.0]);
    }
}
