//! The full spiking transformer: patch-splitting front end with relative
//! position embeddings, encoder blocks with membrane-potential residuals,
//! and the classification head.
//!
//! Residual connections add real-valued membrane tensors; every weight
//! layer inside the encoder consumes binary spikes, which is what lets the
//! attention products and projections run addition-only.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    classify_domain, record_neuron, ForwardObserver, LayerOps, OpCategory,
};
use crate::attention::{
    attention_forward, project_qkv, AttentionConfig, AttentionVariant, AttentionWeights,
};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Binding, Conv2d, Linear, Mode, ParamVisitor};
use crate::neurons::{NeuronParams, SpikingNeuron};
use crate::tensor::{Scalar, Tape, Tensor};

/// Architecture hyperparameters. The conventional name of a configuration
/// is `Spiking Transformer-{blocks}-{embed_dim}`.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub blocks: usize,
    pub embed_dim: usize,
    pub timesteps: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub image_hw: (usize, usize),
    pub num_classes: usize,
    pub attention: AttentionConfig,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: Spiking Transformer-2-64, T = 4, 32x32 input.
    pub fn desk_default(variant: AttentionVariant) -> Self {
        ModelConfig {
            blocks: 2,
            embed_dim: 64,
            timesteps: 4,
            patch_size: 4,
            in_channels: 3,
            image_hw: (32, 32),
            num_classes: 10,
            attention: AttentionConfig::new(variant, 64, 1).expect("valid default"),
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if !matches!(self.patch_size, 1 | 2 | 4 | 8) {
            return Err(Error::config(format!(
                "patch size must be 1, 2, 4, or 8 (pooling stages), got {}",
                self.patch_size
            )));
        }
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 8 != 0 {
            return Err(Error::config(format!(
                "embedding dim must be a positive multiple of 8, got {}",
                self.embed_dim
            )));
        }
        if self.embed_dim % self.attention.heads != 0 {
            return Err(Error::config(format!(
                "head count {} must divide embedding dim {}",
                self.attention.heads, self.embed_dim
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::config("timesteps must be at least 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        self.attention.validate()
    }

    /// Patch-grid height and width.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch_size, self.image_hw.1 / self.patch_size)
    }

    /// Token count `N`.
    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn name(&self) -> String {
        format!("Spiking Transformer-{}-{}", self.blocks, self.embed_dim)
    }

    /// Stage output channels of the patch-splitting front end.
    fn stage_channels(&self) -> [usize; 4] {
        let d = self.embed_dim;
        [d / 8, d / 4, d / 2, d]
    }

    /// Deterministic key-value rendering for the checkpoint header.
    pub fn to_kv_string(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("attention_heads", self.attention.heads.to_string());
        kv.insert("attention_variant", self.attention.variant.name().to_string());
        kv.insert("blocks", self.blocks.to_string());
        kv.insert("embed_dim", self.embed_dim.to_string());
        kv.insert("image_h", self.image_hw.0.to_string());
        kv.insert("image_w", self.image_hw.1.to_string());
        kv.insert("in_channels", self.in_channels.to_string());
        kv.insert("mlp_ratio", self.mlp_ratio.to_string());
        kv.insert("num_classes", self.num_classes.to_string());
        kv.insert("patch_size", self.patch_size.to_string());
        kv.insert("timesteps", self.timesteps.to_string());
        kv.insert("vssa_scale", format!("{}", self.attention.s));
        kv.iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses the checkpoint header; rejects unknown keys.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            map.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::config(format!("missing model key '{key}'")))
        }
        fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            get(map, key)?
                .parse()
                .map_err(|_| Error::config(format!("invalid value for '{key}'")))
        }
        const KNOWN: [&str; 12] = [
            "attention_heads",
            "attention_variant",
            "blocks",
            "embed_dim",
            "image_h",
            "image_w",
            "in_channels",
            "mlp_ratio",
            "num_classes",
            "patch_size",
            "timesteps",
            "vssa_scale",
        ];
        for key in map.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::config(format!("unknown model key '{key}'")));
            }
        }
        let embed_dim: usize = num(map, "embed_dim")?;
        let heads: usize = num(map, "attention_heads")?;
        let variant: AttentionVariant = get(map, "attention_variant")?.parse()?;
        let mut attention = AttentionConfig::new(variant, embed_dim, heads)?;
        attention.s = num(map, "vssa_scale")?;
        let config = ModelConfig {
            blocks: num(map, "blocks")?,
            embed_dim,
            timesteps: num(map, "timesteps")?,
            patch_size: num(map, "patch_size")?,
            in_channels: num(map, "in_channels")?,
            image_hw: (num(map, "image_h")?, num(map, "image_w")?),
            num_classes: num(map, "num_classes")?,
            attention,
            mlp_ratio: num(map, "mlp_ratio")?,
        };
        config.validate()?;
        Ok(config)
    }
}

struct SpsStage<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
    /// Stages 0-2 spike inline; the final stage's neuron is the one applied
    /// to the whole front-end output.
    spike: bool,
    pool: bool,
}

/// Patch-splitting front end: four conv-BN(-SN) stages plus the relative
/// position embedding convolution on the spike grid.
pub struct Sps<T> {
    stages: Vec<SpsStage<T>>,
    rpe_conv: Conv2d<T>,
    rpe_bn: BatchNorm<T>,
}

/// One encoder block: attention projections plus the two-layer MLP.
pub struct EncoderBlockParams<T> {
    pub attn: AttentionWeights<T>,
    pub fc1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub fc2: Linear<T>,
    pub bn2: BatchNorm<T>,
}

impl<T: Scalar> EncoderBlockParams<T> {
    fn new(rng: &mut impl rand::Rng, dim: usize, hidden: usize) -> Self {
        EncoderBlockParams {
            attn: AttentionWeights::new(rng, dim),
            fc1: Linear::new(rng, dim, hidden, false),
            bn1: BatchNorm::new(hidden),
            fc2: Linear::new(rng, hidden, dim, false),
            bn2: BatchNorm::new(dim),
        }
    }

    fn param_count(&self) -> usize {
        self.attn.param_count()
            + self.fc1.param_count()
            + self.bn1.param_count()
            + self.fc2.param_count()
            + self.bn2.param_count()
    }
}

/// The full model. Forward passes bind parameters onto a caller-provided
/// tape; weights themselves live here as plain buffers.
pub struct SpikingTransformer<T> {
    pub config: ModelConfig,
    pub neuron: NeuronParams<T>,
    sps: Sps<T>,
    blocks: Vec<EncoderBlockParams<T>>,
    head: Linear<T>,
}

impl<T: Scalar> SpikingTransformer<T> {
    /// Builds a model with fan-in-scaled uniform weights drawn from a
    /// seeded generator; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = config.stage_channels();
        let n_pools = config.patch_size.trailing_zeros() as usize;
        let mut stages = Vec::with_capacity(4);
        let mut in_c = config.in_channels;
        for (i, &out_c) in channels.iter().enumerate() {
            stages.push(SpsStage {
                conv: Conv2d::new(&mut rng, in_c, out_c, 3, 1, 1),
                bn: BatchNorm::new(out_c),
                spike: i < 3,
                pool: i >= 4 - n_pools,
            });
            in_c = out_c;
        }
        let d = config.embed_dim;
        let sps = Sps {
            stages,
            rpe_conv: Conv2d::new(&mut rng, d, d, 3, 1, 1),
            rpe_bn: BatchNorm::new(d),
        };
        let hidden = config.mlp_ratio * d;
        let blocks = (0..config.blocks)
            .map(|_| EncoderBlockParams::new(&mut rng, d, hidden))
            .collect();
        let head = Linear::new(&mut rng, d, config.num_classes, true);
        Ok(SpikingTransformer {
            config,
            neuron: NeuronParams::default(),
            sps,
            blocks,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        let sps: usize = self
            .sps
            .stages
            .iter()
            .map(|s| s.conv.param_count() + s.bn.param_count())
            .sum::<usize>()
            + self.sps.rpe_conv.param_count()
            + self.sps.rpe_bn.param_count();
        let blocks: usize = self.blocks.iter().map(EncoderBlockParams::param_count).sum();
        sps + blocks + self.head.param_count()
    }

    /// Front end: conv-BN-SN stages with pooling, a final spike layer, and
    /// the RPE convolution. Input is time-major `(T*B, C, H, W)`; the
    /// output `U0` is the real-valued membrane token tensor `(T*B, N, D)`.
    pub fn sps_forward(
        &mut self,
        tape: &Tape<T>,
        binding: &mut Binding<T>,
        x: &Tensor<T>,
        mode: Mode,
        obs: &mut ForwardObserver,
    ) -> Result<Tensor<T>> {
        let t_steps = self.config.timesteps;
        let shape = x.shape().to_vec();
        let (h, w) = self.config.image_hw;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != h || shape[3] != w
        {
            return Err(Error::config(format!(
                "sps input {:?} does not match configured {}x{}x{}",
                shape, self.config.in_channels, h, w
            )));
        }
        if shape[0] % t_steps != 0 {
            return Err(Error::config(format!(
                "{} rows not divisible by {t_steps} timesteps",
                shape[0]
            )));
        }
        let sn = SpikingNeuron::binary(self.neuron);
        let mut cur = x.clone();
        for (i, stage) in self.sps.stages.iter_mut().enumerate() {
            cur = stage
                .conv
                .forward(tape, binding, &format!("sps.stage{i}.conv"), &cur, mode, obs)?;
            cur = stage
                .bn
                .forward(tape, binding, &format!("sps.stage{i}.bn"), &cur, 1, mode, obs)?;
            if stage.spike {
                let s = sn.run_sequence(&cur, t_steps)?;
                record_neuron(obs, &format!("sps.stage{i}.sn"), &cur, &s);
                cur = s;
            }
            if stage.pool {
                let pooled = cur.maxpool2()?;
                record_pool(obs, &format!("sps.stage{i}.pool"), &cur, &pooled);
                cur = pooled;
            }
        }
        // cur is the membrane grid u; its spikes feed the RPE convolution.
        let u_grid = cur;
        let s_grid = sn.run_sequence(&u_grid, t_steps)?;
        record_neuron(obs, "sps.sn_out", &u_grid, &s_grid);
        let rpe = self
            .sps
            .rpe_conv
            .forward(tape, binding, "sps.rpe.conv", &s_grid, mode, obs)?;
        let rpe = self
            .sps
            .rpe_bn
            .forward(tape, binding, "sps.rpe.bn", &rpe, 1, mode, obs)?;
        let u0_grid = u_grid.add(&rpe)?;
        u0_grid.grid_to_tokens()
    }

    /// One encoder block. Residuals add membrane potentials: the returned
    /// pair is `(S_l, U'_l)` where `U'_l` is the post-attention membrane
    /// carried to the next block.
    #[allow(clippy::too_many_arguments)]
    pub fn encoder_block(
        &mut self,
        idx: usize,
        tape: &Tape<T>,
        binding: &mut Binding<T>,
        s_prev: &Tensor<T>,
        u_prev: &Tensor<T>,
        mode: Mode,
        obs: &mut ForwardObserver,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if s_prev.shape() != u_prev.shape() {
            return Err(Error::dimension(format!(
                "encoder block inputs disagree: {:?} vs {:?}",
                s_prev.shape(),
                u_prev.shape()
            )));
        }
        let name = format!("block{idx}");
        let attn_cfg = self.config.attention;
        let neuron = self.neuron;
        let t_steps = self.config.timesteps;
        let block = &mut self.blocks[idx];

        let qkv = project_qkv(
            s_prev,
            &mut block.attn,
            &attn_cfg,
            &neuron,
            t_steps,
            mode,
            tape,
            binding,
            &format!("{name}.attn"),
            obs,
        )?;
        let (attn_out, ops) = attention_forward(&qkv, &attn_cfg, &neuron, t_steps)?;
        if obs.counting_enabled() {
            let qk_domain = classify_domain(&qkv.q);
            let av_domain = classify_domain(&qkv.v);
            obs.record_attention(
                &format!("{name}.attn"),
                &ops,
                qk_domain,
                av_domain,
                attn_out.shape(),
            );
        }
        if attn_cfg.variant != AttentionVariant::Vsa {
            obs.observe_spikes(&attn_out);
        }

        let u_prime = attn_out.add(u_prev)?;
        let sn = SpikingNeuron::binary(neuron);
        let s_prime = sn.run_sequence(&u_prime, t_steps)?;
        record_neuron(obs, &format!("{name}.sn_attn"), &u_prime, &s_prime);

        let h1 = block
            .fc1
            .forward(tape, binding, &format!("{name}.mlp.fc1"), &s_prime, mode, obs)?;
        let h1 = block
            .bn1
            .forward(tape, binding, &format!("{name}.mlp.bn1"), &h1, 2, mode, obs)?;
        let s_hidden = sn.run_sequence(&h1, t_steps)?;
        record_neuron(obs, &format!("{name}.mlp.sn"), &h1, &s_hidden);
        let h2 = block
            .fc2
            .forward(tape, binding, &format!("{name}.mlp.fc2"), &s_hidden, mode, obs)?;
        let mlp_out = block
            .bn2
            .forward(tape, binding, &format!("{name}.mlp.bn2"), &h2, 2, mode, obs)?;

        let u_l = mlp_out.add(&u_prime)?;
        let s_l = sn.run_sequence(&u_l, t_steps)?;
        record_neuron(obs, &format!("{name}.sn_mlp"), &u_l, &s_l);
        Ok((s_l, u_prime))
    }

    /// Global average pool over time and tokens, then the linear head.
    pub fn classify(
        &self,
        tape: &Tape<T>,
        binding: &mut Binding<T>,
        s_last: &Tensor<T>,
        mode: Mode,
        obs: &mut ForwardObserver,
    ) -> Result<Tensor<T>> {
        let gap = s_last.gap_time_tokens(self.config.timesteps)?;
        if obs.counting_enabled() {
            obs.record(LayerOps {
                name: "gap".into(),
                category: OpCategory::Pool,
                input_domain: classify_domain(s_last),
                output_shape: gap.shape().to_vec(),
                additions: s_last.numel() as u64,
                multiplications: gap.numel() as u64,
                comparisons: 0,
            });
        }
        self.head.forward(tape, binding, "head", &gap, mode, obs)
    }

    /// Full forward pass over one batch of images `(B, C, H, W)`: the
    /// batch is replicated across `timesteps` (time-major), run through
    /// the front end and encoder, and pooled into class logits `(B,
    /// num_classes)`. Eval mode with fixed weights is bit-reproducible.
    pub fn forward(
        &mut self,
        tape: &Tape<T>,
        binding: &mut Binding<T>,
        images: &Tensor<T>,
        mode: Mode,
        obs: &mut ForwardObserver,
    ) -> Result<Tensor<T>> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::dimension(format!(
                "forward expects (B, C, H, W) images, got {:?}",
                shape
            )));
        }
        let t_steps = self.config.timesteps;
        let reps = vec![images.clone(); t_steps];
        let x = tape.concat_rows(&reps)?;
        let u0 = self.sps_forward(tape, binding, &x, mode, obs)?;
        let sn = SpikingNeuron::binary(self.neuron);
        let mut s = sn.run_sequence(&u0, t_steps)?;
        record_neuron(obs, "encoder.sn0", &u0, &s);
        let mut u = u0;
        for idx in 0..self.blocks.len() {
            let (s_next, u_next) = self.encoder_block(idx, tape, binding, &s, &u, mode, obs)?;
            s = s_next;
            u = u_next;
        }
        self.classify(tape, binding, &s, mode, obs)
    }

    /// Enumerates every learnable parameter in a fixed order.
    pub fn visit_params(&mut self, v: &mut dyn ParamVisitor<T>) {
        for (i, stage) in self.sps.stages.iter_mut().enumerate() {
            stage.conv.visit_params(&format!("sps.stage{i}.conv"), v);
            stage.bn.visit_params(&format!("sps.stage{i}.bn"), v);
        }
        self.sps.rpe_conv.visit_params("sps.rpe.conv", v);
        self.sps.rpe_bn.visit_params("sps.rpe.bn", v);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            block.attn.visit_params(&format!("block{l}.attn"), v);
            block.fc1.visit_params(&format!("block{l}.mlp.fc1"), v);
            block.bn1.visit_params(&format!("block{l}.mlp.bn1"), v);
            block.fc2.visit_params(&format!("block{l}.mlp.fc2"), v);
            block.bn2.visit_params(&format!("block{l}.mlp.bn2"), v);
        }
        self.head.visit_params("head", v);
    }

    /// Enumerates every batch-norm layer (for running statistics).
    pub fn for_each_bn(&mut self, mut f: impl FnMut(String, &mut BatchNorm<T>)) {
        for (i, stage) in self.sps.stages.iter_mut().enumerate() {
            f(format!("sps.stage{i}.bn"), &mut stage.bn);
        }
        f("sps.rpe.bn".into(), &mut self.sps.rpe_bn);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            f(format!("block{l}.attn.bn_q"), &mut block.attn.bn_q);
            f(format!("block{l}.attn.bn_k"), &mut block.attn.bn_k);
            f(format!("block{l}.attn.bn_v"), &mut block.attn.bn_v);
            f(format!("block{l}.mlp.bn1"), &mut block.bn1);
            f(format!("block{l}.mlp.bn2"), &mut block.bn2);
        }
    }
}

fn record_pool<T: Scalar>(
    obs: &mut ForwardObserver,
    name: &str,
    input: &Tensor<T>,
    output: &Tensor<T>,
) {
    if obs.counting_enabled() {
        obs.record(LayerOps {
            name: name.to_string(),
            category: OpCategory::Pool,
            input_domain: classify_domain(input),
            output_shape: output.shape().to_vec(),
            additions: 0,
            multiplications: 0,
            // Three pairwise comparisons per 2x2 window.
            comparisons: output.numel() as u64 * 3,
        });
    }
}
