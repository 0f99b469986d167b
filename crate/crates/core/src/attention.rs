//! Multi-head attention, its sliding-window restriction, and the pre-norm
//! transformer encoder block.
//!
//! All tensors are batched: sequences are `B × L × C` with a `B × L` validity
//! mask holding 1 for real frames and 0 for padding. Keys at padded positions
//! receive exactly zero attention weight, and a query row with no visible key
//! produces a zero output row.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{mask_positions, Ctx, LayerNorm, Linear, Mlp, ParamStore};

/// Logit assigned to masked keys. `exp` of it underflows to exactly zero
/// after max-subtraction in both f32 and f64.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    /// Odd window size; position `i` sees `j` iff `|i-j| <= window/2`.
    pub window: usize,
    pub dropout_rate: f64,
    pub droppath_rate: f64,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, window: usize) -> Self {
        Self {
            dim,
            heads,
            window,
            dropout_rate: 0.0,
            droppath_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..1.0).contains(&self.droppath_rate) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }
}

/// A batch of sequences with their validity mask.
#[derive(Debug, Clone)]
pub struct MaskedSequence {
    /// `B × L × C`
    pub values: Tensor,
    /// `B × L`, 1 = real frame, 0 = padding. Same dtype as `values`.
    pub valid: Tensor,
}

impl MaskedSequence {
    pub fn new(values: Tensor, valid: Tensor) -> Result<Self> {
        let (b, l, _) = values.dims3()?;
        let (vb, vl) = valid.dims2()?;
        if (b, l) != (vb, vl) {
            return Err(Error::Precondition(format!(
                "mask shape {vb}x{vl} does not match values {b}x{l}"
            )));
        }
        Ok(Self { values, valid })
    }

    pub fn len(&self) -> usize {
        self.values.dim(1).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.dim(2).unwrap_or(0)
    }

    pub fn with_values(&self, values: Tensor) -> Self {
        Self {
            values,
            valid: self.valid.clone(),
        }
    }
}

/// `Lq × Lk` band of ones where `|i-j| <= half`, zeros elsewhere.
fn band_mask(len: usize, half: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = vec![0.0f64; len * len];
    for i in 0..len {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(len - 1);
        for j in lo..=hi {
            data[i * len + j] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (len, len), like.device())?.to_dtype(like.dtype())?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by heads {heads}"
            )));
        }
        Ok(Self {
            q_proj: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k_proj: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v_proj: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            out_proj: Linear::new(ps, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention of `query` over `key`/`value`. With `half_window = Some(h)`
    /// the query at position `i` only sees keys `j` with `|i-j| <= h`, which
    /// requires equal query and key lengths.
    pub fn attend(
        &self,
        query: &Tensor,
        key: &MaskedSequence,
        value: &Tensor,
        half_window: Option<usize>,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let (b, lq, cq) = query.dims3()?;
        let (bk, lk, ck) = key.values.dims3()?;
        let (bv, lv, cv) = value.dims3()?;
        if cq != self.dim || ck != self.dim || cv != self.dim {
            return Err(Error::Precondition(format!(
                "attention width mismatch: q={cq} k={ck} v={cv}, expected {}",
                self.dim
            )));
        }
        if b != bk || b != bv || lk != lv {
            return Err(Error::Precondition(format!(
                "attention key/value shape mismatch: q batch {b}, k {bk}x{lk}, v {bv}x{lv}"
            )));
        }
        if half_window.is_some() && lq != lk {
            return Err(Error::LengthMismatch {
                context: "local attention",
                left: lq,
                right: lk,
            });
        }

        let q = self.split_heads(&self.q_proj.forward(query)?)?;
        let k = self.split_heads(&self.k_proj.forward(&key.values)?)?;
        let v = self.split_heads(&self.v_proj.forward(value)?)?;
        let dh = (self.dim / self.heads) as f64;
        let scores = (q.matmul(&k.t()?)? / dh.sqrt())?;

        // B × 1 × Lq × Lk visibility
        let key_mask = key.valid.reshape((b, 1, 1, lk))?;
        let allowed = match half_window {
            Some(h) => key_mask.broadcast_mul(&band_mask(lq, h, &scores)?.reshape((1, 1, lq, lk))?)?,
            None => key_mask.broadcast_as((b, 1, lq, lk))?.contiguous()?,
        };
        let masked = scores
            .broadcast_mul(&allowed)?
            .broadcast_add(&((&allowed - 1.0)? * -MASKED_LOGIT)?)?;
        let max = masked.max_keepdim(D::Minus1)?.detach();
        let exp = masked.broadcast_sub(&max)?.exp()?.broadcast_mul(&allowed)?;
        let any = allowed.max_keepdim(D::Minus1)?;
        let denom = exp.sum_keepdim(D::Minus1)?.broadcast_add(&(1.0 - &any)?)?;
        let weights = exp.broadcast_div(&denom)?;
        let weights = ctx.dropout(&weights)?;

        let heads_out = weights.matmul(&v)?;
        let merged = heads_out.transpose(1, 2)?.reshape((b, lq, self.dim))?;
        let out = self.out_proj.forward(&merged)?;
        Ok(out.broadcast_mul(&any.reshape((b, lq, 1))?)?)
    }
}

/// Multi-head attention restricted to a sliding window.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub mha: MultiHeadAttention,
    pub half_window: usize,
}

impl LocalAttention {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            mha: MultiHeadAttention::new(ps, name, cfg.dim, cfg.heads)?,
            half_window: cfg.half_window(),
        })
    }

    /// Local self-attention.
    pub fn msa(&self, x: &MaskedSequence, ctx: &mut Ctx) -> Result<Tensor> {
        self.mha
            .attend(&x.values, x, &x.values, Some(self.half_window), ctx)
    }

    /// Local cross-attention: queries from `x`, keys and values from the
    /// temporally aligned `y`.
    pub fn mca(&self, x: &Tensor, y: &MaskedSequence, ctx: &mut Ctx) -> Result<Tensor> {
        let (lx, ly) = (x.dim(1)?, y.len());
        if lx != ly {
            return Err(Error::LengthMismatch {
                context: "local cross-attention",
                left: lx,
                right: ly,
            });
        }
        self.mha
            .attend(x, y, &y.values, Some(self.half_window), ctx)
    }
}

/// Pre-norm residual local self-attention followed by a pre-norm residual MLP
/// with hidden width `4 × C`. Padded positions are zeroed on output.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: LocalAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(ps, &format!("{name}.norm_attn"), cfg.dim)?,
            attn: LocalAttention::new(ps, &format!("{name}.attn"), cfg)?,
            norm_mlp: LayerNorm::new(ps, &format!("{name}.norm_mlp"), cfg.dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), cfg.dim, 4 * cfg.dim, cfg.dim)?,
        })
    }

    pub fn forward(&self, x: &MaskedSequence, ctx: &mut Ctx) -> Result<MaskedSequence> {
        let normed = x.with_values(self.norm_attn.forward(&x.values)?);
        let attn = self.attn.msa(&normed, ctx)?;
        let h = (&x.values + ctx.drop_path(&attn)?)?;
        let mlp = self.mlp.forward(&self.norm_mlp.forward(&h)?, ctx)?;
        let h = (&h + ctx.drop_path(&mlp)?)?;
        Ok(x.with_values(mask_positions(&h, &x.valid)?))
    }
}
