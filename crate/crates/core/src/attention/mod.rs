//! The three self-attention mechanisms.
//!
//! - `vsa`: dense softmax attention, the floating-point reference
//! - `vssa`: all-binary spiking attention with a magnitude scale factor
//! - `a2os2a`: binary query, non-negative real key, ternary value; no
//!   softmax and no scale factor
//!
//! The spiking variants route both matrix products through the
//! addition-only kernels in [`kernels`], so the multiplication-free claim
//! holds by construction and every call reports its exact operation tally.

pub mod kernels;

pub use kernels::KernelCounts;

use rand::Rng;

use crate::analysis::{record_neuron, ForwardObserver};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Binding, Linear, Mode};
use crate::neurons::{NeuronParams, SpikingNeuron};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, BackwardCtx, Scalar, Tape, Tensor};

/// Which attention mechanism a model runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Vsa,
    Vssa,
    A2os2a,
}

impl AttentionVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionVariant::Vsa => "vsa",
            AttentionVariant::Vssa => "vssa",
            AttentionVariant::A2os2a => "a2os2a",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vsa" => Ok(AttentionVariant::Vsa),
            "vssa" => Ok(AttentionVariant::Vssa),
            "a2os2a" => Ok(AttentionVariant::A2os2a),
            other => Err(Error::config(format!("unknown attention variant '{other}'"))),
        }
    }
}

/// Attention hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    /// Key dimension used for the VSA `1/sqrt(d_k)` normalization.
    pub d_k: f64,
    /// VSSA magnitude scale factor.
    pub s: f64,
    pub heads: usize,
}

impl AttentionConfig {
    pub const DEFAULT_SCALE: f64 = 0.125;

    pub fn new(variant: AttentionVariant, embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::config(format!(
                "head count {heads} must divide embedding dim {embed_dim}"
            )));
        }
        Ok(AttentionConfig {
            variant,
            d_k: (embed_dim / heads) as f64,
            s: Self::DEFAULT_SCALE,
            heads,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.s <= 0.0 {
            return Err(Error::config(format!("scale factor must be positive, got {}", self.s)));
        }
        if self.heads == 0 {
            return Err(Error::config("head count must be at least 1"));
        }
        Ok(())
    }
}

/// Projection weights: square maps plus one batch-norm set per stream.
/// Every variant owns the same parameter structure, so swapping variants
/// never changes the parameter count.
pub struct AttentionWeights<T> {
    pub w_q: Linear<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
    pub bn_q: BatchNorm<T>,
    pub bn_k: BatchNorm<T>,
    pub bn_v: BatchNorm<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(rng: &mut impl Rng, dim: usize) -> Self {
        AttentionWeights {
            w_q: Linear::new(rng, dim, dim, false),
            w_k: Linear::new(rng, dim, dim, false),
            w_v: Linear::new(rng, dim, dim, false),
            bn_q: BatchNorm::new(dim),
            bn_k: BatchNorm::new(dim),
            bn_v: BatchNorm::new(dim),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn crate::layers::ParamVisitor<T>) {
        self.w_q.visit_params(&format!("{prefix}.w_q"), v);
        self.w_k.visit_params(&format!("{prefix}.w_k"), v);
        self.w_v.visit_params(&format!("{prefix}.w_v"), v);
        self.bn_q.visit_params(&format!("{prefix}.bn_q"), v);
        self.bn_k.visit_params(&format!("{prefix}.bn_k"), v);
        self.bn_v.visit_params(&format!("{prefix}.bn_v"), v);
    }

    pub fn param_count(&self) -> usize {
        self.w_q.param_count()
            + self.w_k.param_count()
            + self.w_v.param_count()
            + self.bn_q.param_count()
            + self.bn_k.param_count()
            + self.bn_v.param_count()
    }
}

/// The three projected streams.
pub struct QkvTensors<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Operation tally of one attention call.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionOps {
    /// The query-key matrix product.
    pub qk: KernelCounts,
    /// The attention-map-times-value matrix product.
    pub av: KernelCounts,
    /// Scale / softmax work outside the two matrix products.
    pub aux_multiplications: u64,
    pub aux_additions: u64,
    /// Threshold comparisons of the trailing spiking neuron.
    pub neuron_comparisons: u64,
}

impl AttentionOps {
    fn merge(&mut self, other: &AttentionOps) {
        self.qk.merge(other.qk);
        self.av.merge(other.av);
        self.aux_multiplications += other.aux_multiplications;
        self.aux_additions += other.aux_additions;
        self.neuron_comparisons += other.neuron_comparisons;
    }
}

fn check_rank3_consistent<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    for t in [q, k, v] {
        if t.rank() != 3 {
            return Err(Error::dimension(format!(
                "attention expects (T*B, N, d) tensors, got {:?}",
                t.shape()
            )));
        }
    }
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::dimension(format!(
            "attention streams disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

fn ensure_values_binary<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.values().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::domain(format!("{what} must be strictly binary")));
    }
    Ok(())
}

fn ensure_values_ternary<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t
        .values()
        .iter()
        .any(|&v| v != T::zero() && v != T::one() && v != -T::one())
    {
        return Err(Error::domain(format!("{what} must be strictly ternary")));
    }
    Ok(())
}

fn ensure_values_non_negative<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.values().iter().any(|&v| v < T::zero()) {
        return Err(Error::domain(format!("{what} must be non-negative")));
    }
    Ok(())
}

/// Batched `Q . K^T` where `Q` is binary, executed by the addition-only
/// binary kernel per slice. Backward uses the dense matmul rules.
pub fn spike_qk_matmul<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
) -> Result<(Tensor<T>, KernelCounts)> {
    let (qs, ks) = (q.shape().to_vec(), k.shape().to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::dimension(format!(
            "spike_qk_matmul expects (R, N, d) x (R, M, d), got {:?} and {:?}",
            qs, ks
        )));
    }
    let (r, n, d) = (qs[0], qs[1], qs[2]);
    let m = ks[1];
    let mut counts = KernelCounts::default();
    let mut values = vec![T::zero(); r * n * m];
    {
        let qv = q.values();
        let kv = k.values();
        let mut kt = vec![T::zero(); d * m];
        for ri in 0..r {
            let k_slice = &kv[ri * m * d..(ri + 1) * m * d];
            for row in 0..m {
                for col in 0..d {
                    kt[col * m + row] = k_slice[row * d + col];
                }
            }
            let (slice, c) =
                kernels::addonly_matmul_binary(&qv[ri * n * d..(ri + 1) * n * d], &kt, n, d, m)?;
            values[ri * n * m..(ri + 1) * n * m].copy_from_slice(&slice);
            counts.merge(c);
        }
    }
    let req = q.requires_grad() || k.requires_grad();
    let (q_id, k_id) = (q.id(), k.id());
    let out = q.tape().op(vec![r, n, m], values, req, |out| {
        move |ctx: &mut BackwardCtx<'_, T>| {
            let Some(g) = ctx.out_grad(out) else { return };
            // C = Q . K^T  =>  dQ = dC . K, dK = dC^T . Q
            if ctx.wants_grad(q_id) {
                let kv = ctx.values(k_id);
                let mut dq = vec![T::zero(); r * n * d];
                for ri in 0..r {
                    let block = matmul_raw(
                        &g[ri * n * m..(ri + 1) * n * m],
                        &kv[ri * m * d..(ri + 1) * m * d],
                        n,
                        m,
                        d,
                    );
                    dq[ri * n * d..(ri + 1) * n * d].copy_from_slice(&block);
                }
                ctx.accumulate(q_id, dq);
            }
            if ctx.wants_grad(k_id) {
                let qv = ctx.values(q_id);
                let mut dk = vec![T::zero(); r * m * d];
                for ri in 0..r {
                    let block = matmul_tn_raw(
                        &g[ri * n * m..(ri + 1) * n * m],
                        &qv[ri * n * d..(ri + 1) * n * d],
                        n,
                        m,
                        d,
                    );
                    dk[ri * m * d..(ri + 1) * m * d].copy_from_slice(&block);
                }
                ctx.accumulate(k_id, dk);
            }
        }
    });
    Ok((out, counts))
}

/// Batched `A . V` where `V` is ternary, executed by the addition-only
/// ternary kernel per slice. Backward uses the dense matmul rules.
pub fn spike_av_matmul<T: Scalar>(
    attn: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, KernelCounts)> {
    let (ash, vsh) = (attn.shape().to_vec(), v.shape().to_vec());
    if ash.len() != 3 || vsh.len() != 3 || ash[0] != vsh[0] || ash[2] != vsh[1] {
        return Err(Error::dimension(format!(
            "spike_av_matmul expects (R, N, M) x (R, M, D), got {:?} and {:?}",
            ash, vsh
        )));
    }
    let (r, n, m) = (ash[0], ash[1], ash[2]);
    let dd = vsh[2];
    let mut counts = KernelCounts::default();
    let mut values = vec![T::zero(); r * n * dd];
    {
        let av = attn.values();
        let vv = v.values();
        for ri in 0..r {
            let (slice, c) = kernels::addonly_matmul_ternary(
                &av[ri * n * m..(ri + 1) * n * m],
                &vv[ri * m * dd..(ri + 1) * m * dd],
                n,
                m,
                dd,
            )?;
            values[ri * n * dd..(ri + 1) * n * dd].copy_from_slice(&slice);
            counts.merge(c);
        }
    }
    let req = attn.requires_grad() || v.requires_grad();
    let (a_id, v_id) = (attn.id(), v.id());
    let out = attn.tape().op(vec![r, n, dd], values, req, |out| {
        move |ctx: &mut BackwardCtx<'_, T>| {
            let Some(g) = ctx.out_grad(out) else { return };
            // C = A . V  =>  dA = dC . V^T, dV = A^T . dC
            if ctx.wants_grad(a_id) {
                let vv = ctx.values(v_id);
                let mut da = vec![T::zero(); r * n * m];
                for ri in 0..r {
                    let block = matmul_nt_raw(
                        &g[ri * n * dd..(ri + 1) * n * dd],
                        &vv[ri * m * dd..(ri + 1) * m * dd],
                        n,
                        dd,
                        m,
                    );
                    da[ri * n * m..(ri + 1) * n * m].copy_from_slice(&block);
                }
                ctx.accumulate(a_id, da);
            }
            if ctx.wants_grad(v_id) {
                let av = ctx.values(a_id);
                let mut dv = vec![T::zero(); r * m * dd];
                for ri in 0..r {
                    let block = matmul_tn_raw(
                        &av[ri * n * m..(ri + 1) * n * m],
                        &g[ri * n * dd..(ri + 1) * n * dd],
                        n,
                        m,
                        dd,
                    );
                    dv[ri * m * dd..(ri + 1) * m * dd].copy_from_slice(&block);
                }
                ctx.accumulate(v_id, dv);
            }
        }
    });
    Ok((out, counts))
}

/// Spec-level 2-D addition-only product with a binary left operand,
/// recorded on the tape with dense backward rules.
pub fn addonly_matmul_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, KernelCounts)> {
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::dimension(format!(
            "addonly_matmul_binary expects (m, k) . (k, n), got {:?} and {:?}",
            ash, bsh
        )));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let (values, counts) = {
        let av = a.values();
        let bv = b.values();
        kernels::addonly_matmul_binary(&av, &bv, m, k, n)?
    };
    let req = a.requires_grad() || b.requires_grad();
    let (a_id, b_id) = (a.id(), b.id());
    let out = a.tape().op(vec![m, n], values, req, |out| {
        move |ctx: &mut BackwardCtx<'_, T>| {
            let Some(g) = ctx.out_grad(out) else { return };
            if ctx.wants_grad(a_id) {
                let bv = ctx.values(b_id);
                ctx.accumulate(a_id, matmul_nt_raw(&g, bv, m, n, k));
            }
            if ctx.wants_grad(b_id) {
                let av = ctx.values(a_id);
                ctx.accumulate(b_id, matmul_tn_raw(av, &g, m, k, n));
            }
        }
    });
    Ok((out, counts))
}

/// Spec-level 2-D addition-only product with a ternary right operand.
pub fn addonly_matmul_ternary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, KernelCounts)> {
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::dimension(format!(
            "addonly_matmul_ternary expects (m, k) . (k, n), got {:?} and {:?}",
            ash, bsh
        )));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let (values, counts) = {
        let av = a.values();
        let bv = b.values();
        kernels::addonly_matmul_ternary(&av, &bv, m, k, n)?
    };
    let req = a.requires_grad() || b.requires_grad();
    let (a_id, b_id) = (a.id(), b.id());
    let out = a.tape().op(vec![m, n], values, req, |out| {
        move |ctx: &mut BackwardCtx<'_, T>| {
            let Some(g) = ctx.out_grad(out) else { return };
            if ctx.wants_grad(a_id) {
                let bv = ctx.values(b_id);
                ctx.accumulate(a_id, matmul_nt_raw(&g, bv, m, n, k));
            }
            if ctx.wants_grad(b_id) {
                let av = ctx.values(a_id);
                ctx.accumulate(b_id, matmul_tn_raw(av, &g, m, k, n));
            }
        }
    });
    Ok((out, counts))
}

/// Dense softmax attention `softmax(Q K^T / sqrt(d_k)) V`, per leading
/// slice. Softmax rows sum to one.
pub fn vsa<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    d_k: T,
) -> Result<(Tensor<T>, AttentionOps)> {
    check_rank3_consistent(q, k, v)?;
    let (r, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let scores = q.bmm_nt(k)?.scale(T::one() / d_k.sqrt());
    let map = scores.softmax_last()?;
    let out = map.bmm(v)?;
    let rnn = (r * n * n) as u64;
    let ops = AttentionOps {
        qk: KernelCounts {
            additions: rnn * d as u64,
            subtractions: 0,
            multiplications: rnn * d as u64,
        },
        av: KernelCounts {
            additions: rnn * d as u64,
            subtractions: 0,
            multiplications: rnn * d as u64,
        },
        // 1/sqrt(d_k) scale plus softmax normalization divisions.
        aux_multiplications: rnn * 2,
        aux_additions: rnn,
        neuron_comparisons: 0,
    };
    Ok((out, ops))
}

/// All-binary spiking attention `SN(Q K^T V * s)`. Both matrix products
/// run through the addition-only kernels; the scale factor is the only
/// multiplication left.
pub fn vssa<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    s: T,
    out_neuron: &NeuronParams<T>,
    t_steps: usize,
) -> Result<(Tensor<T>, AttentionOps)> {
    check_rank3_consistent(q, k, v)?;
    ensure_values_binary(q, "vssa query")?;
    ensure_values_binary(k, "vssa key")?;
    ensure_values_binary(v, "vssa value")?;
    let (scores, qk) = spike_qk_matmul(q, k)?;
    let (prod, av) = spike_av_matmul(&scores, v)?;
    let scaled = prod.scale(s);
    let sn = SpikingNeuron::binary(*out_neuron);
    let out = sn.run_sequence(&scaled, t_steps)?;
    let ops = AttentionOps {
        qk,
        av,
        aux_multiplications: prod_numel(&scaled),
        aux_additions: 0,
        neuron_comparisons: prod_numel(&scaled),
    };
    Ok((out, ops))
}

/// Addition-only attention `SN(Q K^T V)` with binary `Q`, non-negative
/// real `K`, ternary `V`: no softmax, and deliberately no scale
/// parameter in the signature.
pub fn a2os2a<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out_neuron: &NeuronParams<T>,
    t_steps: usize,
) -> Result<(Tensor<T>, AttentionOps)> {
    check_rank3_consistent(q, k, v)?;
    ensure_values_binary(q, "a2os2a query")?;
    ensure_values_non_negative(k, "a2os2a key")?;
    ensure_values_ternary(v, "a2os2a value")?;
    let (scores, qk) = spike_qk_matmul(q, k)?;
    debug_assert!(scores.values().iter().all(|&x| x >= T::zero()));
    let (prod, av) = spike_av_matmul(&scores, v)?;
    let sn = SpikingNeuron::binary(*out_neuron);
    let out = sn.run_sequence(&prod, t_steps)?;
    let ops = AttentionOps {
        qk,
        av,
        aux_multiplications: 0,
        aux_additions: 0,
        neuron_comparisons: prod_numel(&prod),
    };
    Ok((out, ops))
}

fn prod_numel<T: Scalar>(t: &Tensor<T>) -> u64 {
    t.numel() as u64
}

/// Projects token spikes into the variant's Q/K/V streams.
#[allow(clippy::too_many_arguments)]
pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    w: &mut AttentionWeights<T>,
    cfg: &AttentionConfig,
    neuron: &NeuronParams<T>,
    t_steps: usize,
    mode: Mode,
    tape: &Tape<T>,
    binding: &mut Binding<T>,
    name: &str,
    obs: &mut ForwardObserver,
) -> Result<QkvTensors<T>> {
    if x.rank() != 3 {
        return Err(Error::dimension(format!(
            "project_qkv expects (T*B, N, D) input, got {:?}",
            x.shape()
        )));
    }
    cfg.validate()?;
    let lin_q = w.w_q.forward(tape, binding, &format!("{name}.w_q"), x, mode, obs)?;
    let lin_k = w.w_k.forward(tape, binding, &format!("{name}.w_k"), x, mode, obs)?;
    let lin_v = w.w_v.forward(tape, binding, &format!("{name}.w_v"), x, mode, obs)?;
    match cfg.variant {
        AttentionVariant::Vsa => Ok(QkvTensors {
            q: lin_q,
            k: lin_k,
            v: lin_v,
        }),
        AttentionVariant::Vssa => {
            let sn = SpikingNeuron::binary(*neuron);
            let spike_stream = |lin: &Tensor<T>, bn: &mut BatchNorm<T>, stream: &str,
                                    binding: &mut Binding<T>, obs: &mut ForwardObserver|
             -> Result<Tensor<T>> {
                let u = bn.forward(tape, binding, &format!("{name}.bn_{stream}"), lin, 2, mode, obs)?;
                let s = sn.run_sequence(&u, t_steps)?;
                record_neuron(obs, &format!("{name}.sn_{stream}"), &u, &s);
                Ok(s)
            };
            let q = spike_stream(&lin_q, &mut w.bn_q, "q", binding, obs)?;
            let k = spike_stream(&lin_k, &mut w.bn_k, "k", binding, obs)?;
            let v = spike_stream(&lin_v, &mut w.bn_v, "v", binding, obs)?;
            Ok(QkvTensors { q, k, v })
        }
        AttentionVariant::A2os2a => {
            let sn_b = SpikingNeuron::binary(*neuron);
            let sn_t = SpikingNeuron::ternary(*neuron);
            let u_q = w
                .bn_q
                .forward(tape, binding, &format!("{name}.bn_q"), &lin_q, 2, mode, obs)?;
            let q = sn_b.run_sequence(&u_q, t_steps)?;
            record_neuron(obs, &format!("{name}.sn_q"), &u_q, &q);
            let k = w
                .bn_k
                .forward(tape, binding, &format!("{name}.bn_k"), &lin_k, 2, mode, obs)?
                .relu();
            let u_v = w
                .bn_v
                .forward(tape, binding, &format!("{name}.bn_v"), &lin_v, 2, mode, obs)?;
            let v = sn_t.run_sequence(&u_v, t_steps)?;
            record_neuron(obs, &format!("{name}.sn_v"), &u_v, &v);
            Ok(QkvTensors { q, k, v })
        }
    }
}

/// Runs the configured variant, splitting the embedding across heads when
/// `cfg.heads > 1` and concatenating the per-head outputs.
pub fn attention_forward<T: Scalar>(
    qkv: &QkvTensors<T>,
    cfg: &AttentionConfig,
    neuron: &NeuronParams<T>,
    t_steps: usize,
) -> Result<(Tensor<T>, AttentionOps)> {
    check_rank3_consistent(&qkv.q, &qkv.k, &qkv.v)?;
    let d = qkv.q.shape()[2];
    if d % cfg.heads != 0 {
        return Err(Error::config(format!(
            "head count {} must divide embedding dim {d}",
            cfg.heads
        )));
    }
    let run_one = |q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>| match cfg.variant {
        AttentionVariant::Vsa => vsa(q, k, v, T::c(cfg.d_k)),
        AttentionVariant::Vssa => vssa(q, k, v, T::c(cfg.s), neuron, t_steps),
        AttentionVariant::A2os2a => a2os2a(q, k, v, neuron, t_steps),
    };
    if cfg.heads == 1 {
        return run_one(&qkv.q, &qkv.k, &qkv.v);
    }
    let dh = d / cfg.heads;
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut total = AttentionOps::default();
    for h in 0..cfg.heads {
        let q = qkv.q.narrow_last(h * dh, dh)?;
        let k = qkv.k.narrow_last(h * dh, dh)?;
        let v = qkv.v.narrow_last(h * dh, dh)?;
        let (out, ops) = run_one(&q, &k, &v)?;
        total.merge(&ops);
        outs.push(out);
    }
    let out = qkv.q.tape().concat_last(&outs)?;
    Ok((out, total))
}
