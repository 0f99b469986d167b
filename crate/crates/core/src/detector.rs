//! The one-stage relation detector: feature-pyramid relation encoder, 1D mask
//! decoder, query-based relation decoder and the class/mask heads, plus the
//! full model that chains them behind the pair aggregation stage.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, EncoderBlock, MaskedSequence, MultiHeadAttention};
use crate::bsa::{Bsa, BsaConfig, BsaInput, Interaction, PairEmbedding};
use crate::error::{Error, Result};
use crate::nn::{mask_positions, Ctx, LayerNorm, Linear, Mlp, ParamStore};

const POOL_PAD: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    Linear,
}

/// Architecture hyperparameters. Serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the incoming visual features.
    pub in_dim: usize,
    /// Width of optional precomputed extra features.
    pub extra_dim: Option<usize>,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub sos_layers: usize,
    pub interaction: Interaction,
    pub rel_kernel: usize,
    pub encoder_blocks: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    /// Number of predicate classes, excluding the no-relation class.
    pub num_classes: usize,
    pub dropout: f64,
    pub drop_path: f64,
    pub upsample: Upsample,
    pub aux_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_dim: 1024,
            extra_dim: None,
            dim: 512,
            heads: 8,
            window: 9,
            sos_layers: 2,
            interaction: Interaction::Iab,
            rel_kernel: 3,
            encoder_blocks: 3,
            decoder_layers: 4,
            num_queries: 9,
            num_classes: 50,
            dropout: 0.0,
            drop_path: 0.1,
            upsample: Upsample::Nearest,
            aux_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            window: self.window,
            dropout_rate: self.dropout,
            droppath_rate: self.drop_path,
        }
    }

    pub fn bsa(&self) -> BsaConfig {
        BsaConfig {
            in_dim: self.in_dim,
            extra_dim: self.extra_dim,
            attn: self.attention(),
            sos_layers: self.sos_layers,
            interaction: self.interaction,
            rel_kernel: self.rel_kernel,
        }
    }

    /// Temporal stride of the coarsest pyramid level.
    pub fn stride(&self) -> usize {
        1 << self.encoder_blocks
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_dim == 0 || self.dim == 0 {
            return bad("model.in_dim and model.dim must be positive");
        }
        if self.extra_dim == Some(0) {
            return bad("model.extra_dim must be positive when set");
        }
        if self.num_queries == 0 || self.num_classes == 0 {
            return bad("model.num_queries and model.num_classes must be positive");
        }
        if self.decoder_layers == 0 {
            return bad("model.decoder_layers must be at least 1");
        }
        if self.rel_kernel.is_multiple_of(2) {
            return bad("model.rel_kernel must be odd");
        }
        Ok(())
    }
}

/// Lengths of the pyramid levels for an input of length `len`, each level the
/// ceil-half of the previous one.
pub fn pyramid_lengths(len: usize, levels: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(levels);
    let mut l = len;
    for i in 0..levels {
        if i > 0 {
            l = l.div_ceil(2);
        }
        out.push(l);
    }
    out
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Finest first.
    pub levels: Vec<MaskedSequence>,
}

impl FeaturePyramid {
    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }

    pub fn coarsest(&self) -> &MaskedSequence {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Stride-2 max pooling with ceil semantics. Padded positions never win the
/// max; a pooled position is valid when any of its inputs is.
pub fn max_pool2(x: &MaskedSequence) -> Result<MaskedSequence> {
    let (b, l, c) = x.values.dims3()?;
    let pad = l % 2;
    let vals = x
        .values
        .broadcast_mul(&x.valid.unsqueeze(2)?)?
        .broadcast_add(&((&x.valid - 1.0)? * -POOL_PAD)?.unsqueeze(2)?)?;
    let vals = if pad == 1 {
        let tail = Tensor::full(POOL_PAD, (b, 1, c), vals.device())?.to_dtype(vals.dtype())?;
        Tensor::cat(&[&vals, &tail], 1)?
    } else {
        vals
    };
    let mask = x.valid.pad_with_zeros(1, 0, pad)?;
    let half = (l + pad) / 2;
    let pooled = vals.reshape((b, half, 2, c))?.max(2)?;
    let pooled_mask = mask.reshape((b, half, 2))?.max(2)?;
    MaskedSequence::new(mask_positions(&pooled, &pooled_mask)?, pooled_mask)
}

#[derive(Clone, Debug)]
pub struct RelationEncoder {
    blocks: Vec<EncoderBlock>,
}

impl RelationEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let attn = cfg.attention();
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| EncoderBlock::new(ps, &format!("{name}.block.{i}"), &attn))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn min_len(&self) -> usize {
        1 << self.blocks.len()
    }

    /// Level 0 is the pair embedding itself; each further level is an encoder
    /// block followed by stride-2 max pooling of the previous level.
    pub fn forward(&self, e_so: &PairEmbedding, ctx: &mut Ctx) -> Result<FeaturePyramid> {
        if e_so.len() < self.min_len() {
            return Err(Error::Precondition(format!(
                "pair length {} below encoder minimum {}; pad the sequence upstream",
                e_so.len(),
                self.min_len()
            )));
        }
        let mut levels = vec![e_so.clone()];
        for block in &self.blocks {
            let prev = levels.last().unwrap();
            let encoded = block.forward(prev, ctx)?;
            levels.push(max_pool2(&encoded)?);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// `target × source` resampling matrix for ×2 upsampling.
fn upsample_matrix(target: usize, source: usize, mode: Upsample, like: &Tensor) -> Result<Tensor> {
    let mut m = vec![0.0f64; target * source];
    for t in 0..target {
        match mode {
            Upsample::Nearest => m[t * source + (t / 2).min(source - 1)] = 1.0,
            Upsample::Linear => {
                let pos = ((t as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (source - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(source - 1);
                let frac = pos - lo as f64;
                m[t * source + lo] += 1.0 - frac;
                m[t * source + hi] += frac;
            }
        }
    }
    Ok(Tensor::from_vec(m, (target, source), like.device())?.to_dtype(like.dtype())?)
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    laterals: Vec<Linear>,
    mode: Upsample,
}

impl MaskDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let laterals = (0..=cfg.encoder_blocks)
            .map(|i| Linear::new(ps, &format!("{name}.lateral.{i}"), cfg.dim, cfg.dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            laterals,
            mode: cfg.upsample,
        })
    }

    /// Top-down pass from the coarsest level: upsample ×2 and add the
    /// laterally projected finer level, down to full resolution.
    pub fn forward(&self, p: &FeaturePyramid) -> Result<Tensor> {
        if p.levels.len() != self.laterals.len() {
            return Err(Error::Precondition(format!(
                "pyramid has {} levels, decoder expects {}",
                p.levels.len(),
                self.laterals.len()
            )));
        }
        let top = p.levels.len() - 1;
        let coarse = p.coarsest();
        let mut y = mask_positions(&self.laterals[top].forward(&coarse.values)?, &coarse.valid)?;
        for i in (0..top).rev() {
            let level = &p.levels[i];
            let up = upsample_matrix(level.len(), y.dim(1)?, self.mode, &y)?.broadcast_matmul(&y)?;
            let sum = (up + self.laterals[i].forward(&level.values)?)?;
            y = mask_positions(&sum, &level.valid)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct RelationDecoder {
    pub queries: Tensor,
    memory_norm: LayerNorm,
    layers: Vec<DecoderLayer>,
    out_norm: LayerNorm,
}

impl RelationDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.dim;
        let queries = ps.normal(format!("{name}.queries"), &[cfg.num_queries, c], 1.0)?;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("{name}.layer.{i}");
                Ok(DecoderLayer {
                    norm_self: LayerNorm::new(ps, &format!("{p}.norm_self"), c)?,
                    self_attn: MultiHeadAttention::new(ps, &format!("{p}.self_attn"), c, cfg.heads)?,
                    norm_cross: LayerNorm::new(ps, &format!("{p}.norm_cross"), c)?,
                    cross_attn: MultiHeadAttention::new(ps, &format!("{p}.cross_attn"), c, cfg.heads)?,
                    norm_mlp: LayerNorm::new(ps, &format!("{p}.norm_mlp"), c)?,
                    mlp: Mlp::new(ps, &format!("{p}.mlp"), c, 4 * c, c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            memory_norm: LayerNorm::new(ps, &format!("{name}.memory_norm"), c)?,
            layers,
            out_norm: LayerNorm::new(ps, &format!("{name}.out_norm"), c)?,
        })
    }

    /// Decodes with the learned queries broadcast over the batch.
    pub fn forward(&self, z: &MaskedSequence, ctx: &mut Ctx) -> Result<Vec<Tensor>> {
        let b = z.values.dim(0)?;
        let (nq, c) = self.queries.dims2()?;
        let q = self.queries.unsqueeze(0)?.broadcast_as((b, nq, c))?.contiguous()?;
        self.forward_with_queries(&q, z, ctx)
    }

    /// Global self-attention among queries, global cross-attention into `z`
    /// (padded positions masked) and an MLP, per layer. Returns the normalized
    /// output of every layer, last one last.
    pub fn forward_with_queries(&self, queries: &Tensor, z: &MaskedSequence, ctx: &mut Ctx) -> Result<Vec<Tensor>> {
        let (b, nq, _) = queries.dims3()?;
        let all_valid = Tensor::ones((b, nq), queries.dtype(), queries.device())?;
        let memory = z.with_values(self.memory_norm.forward(&z.values)?);
        let mut q = queries.clone();
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n = layer.norm_self.forward(&q)?;
            let keys = MaskedSequence::new(n.clone(), all_valid.clone())?;
            q = (&q + layer.self_attn.attend(&n, &keys, &n, None, ctx)?)?;
            let n = layer.norm_cross.forward(&q)?;
            q = (&q + layer.cross_attn.attend(&n, &memory, &memory.values, None, ctx)?)?;
            let n = layer.norm_mlp.forward(&q)?;
            q = (&q + layer.mlp.forward(&n, ctx)?)?;
            outputs.push(self.out_norm.forward(&q)?);
        }
        Ok(outputs)
    }
}

/// Per-query class logits (`B × N_q × (P+1)`, last index = no relation) and
/// mask logits (`B × N_q × L`).
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct Heads {
    class_head: Linear,
    mask_embed: Mlp,
}

impl Heads {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            class_head: Linear::new(ps, &format!("{name}.class"), cfg.dim, cfg.num_classes + 1)?,
            mask_embed: Mlp::new(ps, &format!("{name}.mask_embed"), cfg.dim, cfg.dim, cfg.dim)?,
        })
    }

    pub fn forward(&self, z_cls: &Tensor, z_msk: &Tensor, ctx: &mut Ctx) -> Result<ModelOutput> {
        let class_logits = self.class_head.forward(z_cls)?;
        let embed = self.mask_embed.forward(z_cls, ctx)?;
        let mask_logits = embed.matmul(&z_msk.transpose(1, 2)?.contiguous()?)?;
        Ok(ModelOutput {
            class_logits,
            mask_logits,
        })
    }
}

/// Full model output; `aux` holds the predictions of the intermediate decoder
/// layers when auxiliary supervision is enabled.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub main: ModelOutput,
    pub aux: Vec<ModelOutput>,
}

#[derive(Clone, Debug)]
pub struct VrdOne {
    cfg: ModelConfig,
    pub bsa: Bsa,
    pub encoder: RelationEncoder,
    pub mask_decoder: MaskDecoder,
    pub decoder: RelationDecoder,
    pub heads: Heads,
}

impl VrdOne {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            bsa: Bsa::new(ps, "bsa", &cfg.bsa())?,
            encoder: RelationEncoder::new(ps, "encoder", cfg)?,
            mask_decoder: MaskDecoder::new(ps, "mask_decoder", cfg)?,
            decoder: RelationDecoder::new(ps, "decoder", cfg)?,
            heads: Heads::new(ps, "heads", cfg)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, input: &BsaInput, ctx: &mut Ctx) -> Result<ForwardOutput> {
        let e_so = self.bsa.forward(input, ctx)?;
        let pyramid = self.encoder.forward(&e_so, ctx)?;
        let z_msk = self.mask_decoder.forward(&pyramid)?;
        let mut decoded = self.decoder.forward(pyramid.coarsest(), ctx)?;
        let last = decoded.pop().expect("at least one decoder layer");
        let main = self.heads.forward(&last, &z_msk, ctx)?;
        let aux = if self.cfg.aux_loss {
            decoded
                .iter()
                .map(|z| self.heads.forward(z, &z_msk, ctx))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(ForwardOutput { main, aux })
    }

    pub fn dtype(&self) -> DType {
        self.decoder.queries.dtype()
    }
}
