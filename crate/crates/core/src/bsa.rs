//! Bilateral spatiotemporal aggregation: turns a subject stream and an object
//! stream into one pair embedding.
//!
//! Each entity's visual features are joined with its absolute box features and
//! embedded. The two streams then pass through the subject-object synergy
//! stack, where every layer runs an encoder block per stream followed by an
//! interactive attention block that lets each stream read the other. Finally
//! the streams are fused together with the relative box features.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, EncoderBlock, LocalAttention, MaskedSequence};
use crate::error::{Error, Result};
use crate::geom::{ABS_POS_DIM, REL_POS_DIM};
use crate::nn::{mask_positions, Ctx, LayerNorm, Linear, Mlp, ParamStore};

pub type EntityEmbedding = MaskedSequence;
pub type PairEmbedding = MaskedSequence;

/// How the two streams exchange information inside a synergy layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    /// Local self-attention, then local cross-attention into the other stream.
    #[default]
    Iab,
    /// Local cross-attention only.
    Cross,
    /// No exchange; only the per-stream encoder blocks run.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsaConfig {
    pub in_dim: usize,
    pub extra_dim: Option<usize>,
    pub attn: AttentionConfig,
    pub sos_layers: usize,
    pub interaction: Interaction,
    pub rel_kernel: usize,
}

impl BsaConfig {
    pub fn dim(&self) -> usize {
        self.attn.dim
    }
}

/// One direction of the interactive attention block.
#[derive(Clone, Debug)]
struct Interact {
    norm_self: LayerNorm,
    self_attn: Option<LocalAttention>,
    norm_query: LayerNorm,
    norm_other: LayerNorm,
    cross_attn: LocalAttention,
}

impl Interact {
    fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, with_self: bool) -> Result<Self> {
        let self_attn = if with_self {
            Some(LocalAttention::new(ps, &format!("{name}.self_attn"), cfg)?)
        } else {
            None
        };
        Ok(Self {
            norm_self: LayerNorm::new(ps, &format!("{name}.norm_self"), cfg.dim)?,
            self_attn,
            norm_query: LayerNorm::new(ps, &format!("{name}.norm_query"), cfg.dim)?,
            norm_other: LayerNorm::new(ps, &format!("{name}.norm_other"), cfg.dim)?,
            cross_attn: LocalAttention::new(ps, &format!("{name}.cross_attn"), cfg)?,
        })
    }

    /// Updates `me` with information read from `other`.
    fn forward(&self, me: &MaskedSequence, other: &MaskedSequence, ctx: &mut Ctx) -> Result<Tensor> {
        let query = match &self.self_attn {
            Some(attn) => attn.msa(&me.with_values(self.norm_self.forward(&me.values)?), ctx)?,
            None => me.values.clone(),
        };
        let query = self.norm_query.forward(&query)?;
        let other_n = other.with_values(self.norm_other.forward(&other.values)?);
        let cross = self.cross_attn.mca(&query, &other_n, ctx)?;
        Ok((&me.values + ctx.drop_path(&cross)?)?)
    }
}

#[derive(Clone, Debug)]
struct SosLayer {
    embed_s: EncoderBlock,
    embed_o: EncoderBlock,
    interact_s: Option<Interact>,
    interact_o: Option<Interact>,
}

#[derive(Clone, Debug)]
pub struct Bsa {
    cfg: BsaConfig,
    extra_fuse: Option<Mlp>,
    entity_embed: Mlp,
    sos: Vec<SosLayer>,
    pair_mlp: Mlp,
    rel_proj: Linear,
    fuse_mlp: Mlp,
}

impl Bsa {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &BsaConfig) -> Result<Self> {
        cfg.attn.validate()?;
        if cfg.rel_kernel == 0 || cfg.rel_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "relative feature kernel must be odd, got {}",
                cfg.rel_kernel
            )));
        }
        let c = cfg.dim();
        let extra_fuse = match cfg.extra_dim {
            Some(e) => Some(Mlp::new(
                ps,
                &format!("{name}.extra_fuse"),
                cfg.in_dim + e,
                cfg.in_dim,
                cfg.in_dim,
            )?),
            None => None,
        };
        let entity_embed = Mlp::new(ps, &format!("{name}.entity_embed"), cfg.in_dim + ABS_POS_DIM, c, c)?;
        let mut sos = Vec::with_capacity(cfg.sos_layers);
        for l in 0..cfg.sos_layers {
            let p = format!("{name}.sos.{l}");
            let (interact_s, interact_o) = match cfg.interaction {
                Interaction::None => (None, None),
                kind => {
                    let with_self = kind == Interaction::Iab;
                    (
                        Some(Interact::new(ps, &format!("{p}.interact_s"), &cfg.attn, with_self)?),
                        Some(Interact::new(ps, &format!("{p}.interact_o"), &cfg.attn, with_self)?),
                    )
                }
            };
            sos.push(SosLayer {
                embed_s: EncoderBlock::new(ps, &format!("{p}.embed_s"), &cfg.attn)?,
                embed_o: EncoderBlock::new(ps, &format!("{p}.embed_o"), &cfg.attn)?,
                interact_s,
                interact_o,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            extra_fuse,
            entity_embed,
            sos,
            pair_mlp: Mlp::new(ps, &format!("{name}.pair_mlp"), 2 * c, c, c)?,
            rel_proj: Linear::new(ps, &format!("{name}.rel_conv"), REL_POS_DIM * cfg.rel_kernel, c)?,
            fuse_mlp: Mlp::new(ps, &format!("{name}.fuse_mlp"), 2 * c, c, c)?,
        })
    }

    pub fn config(&self) -> &BsaConfig {
        &self.cfg
    }

    /// Replaces `f` by `MLP([f, f_extra])` when extra features are configured;
    /// otherwise returns `f` unchanged.
    pub fn fuse_extra_features(&self, f: &Tensor, extra: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        match (&self.extra_fuse, extra) {
            (None, _) => Ok(f.clone()),
            (Some(mlp), Some(extra)) => {
                let (lf, le) = (f.dim(1)?, extra.dim(1)?);
                if lf != le {
                    return Err(Error::LengthMismatch {
                        context: "extra feature fusion",
                        left: lf,
                        right: le,
                    });
                }
                mlp.forward(&Tensor::cat(&[f, extra], D::Minus1)?, ctx)
            }
            (Some(_), None) => Err(Error::Precondition(
                "model expects extra features but none were supplied".into(),
            )),
        }
    }

    /// `MLP([f, θ_a])` applied independently per frame.
    pub fn embed_entity(
        &self,
        f: &Tensor,
        theta_a: &Tensor,
        valid: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<EntityEmbedding> {
        let (lf, lt) = (f.dim(1)?, theta_a.dim(1)?);
        if lf != lt {
            return Err(Error::LengthMismatch {
                context: "entity embedding",
                left: lf,
                right: lt,
            });
        }
        let e = self.entity_embed.forward(&Tensor::cat(&[f, theta_a], D::Minus1)?, ctx)?;
        MaskedSequence::new(mask_positions(&e, valid)?, valid.clone())
    }

    /// Runs the subject-object synergy stack. Zero layers is the identity.
    pub fn sos_forward(
        &self,
        e_s: &EntityEmbedding,
        e_o: &EntityEmbedding,
        ctx: &mut Ctx,
    ) -> Result<(EntityEmbedding, EntityEmbedding)> {
        if e_s.values.dims() != e_o.values.dims() {
            return Err(Error::Precondition(format!(
                "subject {:?} and object {:?} streams differ in shape",
                e_s.values.dims(),
                e_o.values.dims()
            )));
        }
        let same_mask = e_s
            .valid
            .ne(&e_o.valid)?
            .flatten_all()?
            .max(0)?
            .to_scalar::<u8>()?
            == 0;
        if !same_mask {
            return Err(Error::Precondition("subject and object masks differ".into()));
        }
        let mut s = e_s.clone();
        let mut o = e_o.clone();
        for layer in &self.sos {
            let hat_s = layer.embed_s.forward(&s, ctx)?;
            let hat_o = layer.embed_o.forward(&o, ctx)?;
            let (next_s, next_o) = match (&layer.interact_s, &layer.interact_o) {
                (Some(is), Some(io)) => (
                    is.forward(&hat_s, &hat_o, ctx)?,
                    io.forward(&hat_o, &hat_s, ctx)?,
                ),
                _ => (hat_s.values.clone(), hat_o.values.clone()),
            };
            s = s.with_values(mask_positions(&next_s, &s.valid)?);
            o = o.with_values(mask_positions(&next_o, &o.valid)?);
        }
        Ok((s, o))
    }

    /// Fuses the two streams and the relative box features into the pair
    /// embedding: `MLP([MLP([e_s, e_o]), conv(θ_r)])`.
    pub fn fuse_pair(
        &self,
        e_s: &EntityEmbedding,
        e_o: &EntityEmbedding,
        theta_r: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<PairEmbedding> {
        let (ls, lo, lr) = (e_s.len(), e_o.len(), theta_r.dim(1)?);
        if ls != lo || ls != lr {
            return Err(Error::LengthMismatch {
                context: "pair fusion",
                left: ls,
                right: if ls != lo { lo } else { lr },
            });
        }
        let joint = self
            .pair_mlp
            .forward(&Tensor::cat(&[&e_s.values, &e_o.values], D::Minus1)?, ctx)?;
        let rel = self.rel_conv(&mask_positions(theta_r, &e_s.valid)?)?;
        let fused = self.fuse_mlp.forward(&Tensor::cat(&[&joint, &rel], D::Minus1)?, ctx)?;
        MaskedSequence::new(mask_positions(&fused, &e_s.valid)?, e_s.valid.clone())
    }

    /// Zero-padded temporal convolution of `θ_r` to width `C`.
    fn rel_conv(&self, theta_r: &Tensor) -> Result<Tensor> {
        let k = self.cfg.rel_kernel;
        let len = theta_r.dim(1)?;
        let half = k / 2;
        let padded = theta_r.pad_with_zeros(1, half, half)?;
        let taps: Vec<Tensor> = (0..k)
            .map(|i| padded.narrow(1, i, len))
            .collect::<candle_core::Result<_>>()?;
        self.rel_proj.forward(&Tensor::cat(&taps, D::Minus1)?)
    }

    /// Full aggregation for a batch of pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(&self, input: &BsaInput, ctx: &mut Ctx) -> Result<PairEmbedding> {
        let f_s = self.fuse_extra_features(&input.features_s, input.extra_s.as_ref(), ctx)?;
        let f_o = self.fuse_extra_features(&input.features_o, input.extra_o.as_ref(), ctx)?;
        let e_s = self.embed_entity(&f_s, &input.theta_a_s, &input.valid, ctx)?;
        let e_o = self.embed_entity(&f_o, &input.theta_a_o, &input.valid, ctx)?;
        let (e_s, e_o) = self.sos_forward(&e_s, &e_o, ctx)?;
        self.fuse_pair(&e_s, &e_o, &input.theta_r, ctx)
    }
}

/// Batched per-pair tensors, all `B × L × ·` with a shared `B × L` mask.
#[derive(Debug, Clone)]
pub struct BsaInput {
    pub features_s: Tensor,
    pub features_o: Tensor,
    pub extra_s: Option<Tensor>,
    pub extra_o: Option<Tensor>,
    pub theta_a_s: Tensor,
    pub theta_a_o: Tensor,
    pub theta_r: Tensor,
    pub valid: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn cfg(layers: usize, interaction: Interaction, extra: Option<usize>) -> BsaConfig {
        BsaConfig {
            in_dim: 6,
            extra_dim: extra,
            attn: AttentionConfig::new(8, 2, 3),
            sos_layers: layers,
            interaction,
            rel_kernel: 3,
        }
    }

    fn ones(b: usize, l: usize) -> Tensor {
        Tensor::ones((b, l), DType::F64, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    fn zero_biases(ps: &ParamStore) {
        for (name, var) in ps.vars() {
            if name.ends_with(".bias") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn embed_entity_shape_zero_and_per_frame() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let bsa = Bsa::new(&mut ps, "bsa", &cfg(0, Interaction::Iab, None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_tensor(&mut rng, &[1, 5, 6]);
        let th = rand_tensor(&mut rng, &[1, 5, 8]);
        let e = bsa.embed_entity(&f, &th, &ones(1, 5), &mut Ctx::eval()).unwrap();
        assert_eq!(e.values.dims(), &[1, 5, 8]);

        // reversing frames reverses output rows
        let rev = Tensor::new(&[4u32, 3, 2, 1, 0], &Device::Cpu).unwrap();
        let er = bsa
            .embed_entity(
                &f.index_select(&rev, 1).unwrap(),
                &th.index_select(&rev, 1).unwrap(),
                &ones(1, 5),
                &mut Ctx::eval(),
            )
            .unwrap();
        let d = (er.values - e.values.index_select(&rev, 1).unwrap()).unwrap();
        assert!(max_abs(&d) < 1e-12);

        let bad = rand_tensor(&mut rng, &[1, 4, 8]);
        assert!(bsa.embed_entity(&f, &bad, &ones(1, 5), &mut Ctx::eval()).is_err());

        zero_biases(&ps);
        let z = bsa
            .embed_entity(
                &f.zeros_like().unwrap(),
                &th.zeros_like().unwrap(),
                &ones(1, 5),
                &mut Ctx::eval(),
            )
            .unwrap();
        assert_eq!(max_abs(&z.values), 0.0);
    }

    #[test]
    fn extra_feature_fusion() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let plain = Bsa::new(&mut ps, "plain", &cfg(0, Interaction::Iab, None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_tensor(&mut rng, &[2, 5, 6]);
        let same = plain.fuse_extra_features(&f, None, &mut Ctx::eval()).unwrap();
        assert_eq!(max_abs(&(same - &f).unwrap()), 0.0);

        let mut ps = ParamStore::new(DType::F64, 3);
        let fused = Bsa::new(&mut ps, "fused", &cfg(0, Interaction::Iab, Some(4))).unwrap();
        let extra = rand_tensor(&mut rng, &[2, 5, 4]);
        let out = fused.fuse_extra_features(&f, Some(&extra), &mut Ctx::eval()).unwrap();
        assert_eq!(out.dims(), &[2, 5, 6]);
        assert!(fused.fuse_extra_features(&f, None, &mut Ctx::eval()).is_err());
        let short = rand_tensor(&mut rng, &[2, 4, 4]);
        assert!(fused.fuse_extra_features(&f, Some(&short), &mut Ctx::eval()).is_err());
        zero_biases(&ps);
        let z = fused
            .fuse_extra_features(&f.zeros_like().unwrap(), Some(&extra.zeros_like().unwrap()), &mut Ctx::eval())
            .unwrap();
        assert_eq!(max_abs(&z), 0.0);
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let bsa = Bsa::new(&mut ps, "bsa", &cfg(0, Interaction::Iab, None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = MaskedSequence::new(rand_tensor(&mut rng, &[1, 6, 8]), ones(1, 6)).unwrap();
        let o = MaskedSequence::new(rand_tensor(&mut rng, &[1, 6, 8]), ones(1, 6)).unwrap();
        let (s2, o2) = bsa.sos_forward(&s, &o, &mut Ctx::eval()).unwrap();
        assert_eq!(max_abs(&(s2.values - s.values).unwrap()), 0.0);
        assert_eq!(max_abs(&(o2.values - o.values).unwrap()), 0.0);
    }

    #[test]
    fn tied_weights_are_symmetric() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let bsa = Bsa::new(&mut ps, "bsa", &cfg(2, Interaction::Iab, None)).unwrap();
        // copy every subject-stream parameter onto its object counterpart
        let mut values: BTreeMap<String, Tensor> = ps.tensors();
        let names: Vec<String> = values.keys().cloned().collect();
        for n in names {
            let twin = n.replace("embed_s", "embed_o").replace("interact_s", "interact_o");
            if twin != n {
                let v = values[&n].clone();
                values.insert(twin, v);
            }
        }
        ps.load(&values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = MaskedSequence::new(rand_tensor(&mut rng, &[1, 7, 8]), ones(1, 7)).unwrap();
        let (s, o) = bsa.sos_forward(&x, &x, &mut Ctx::eval()).unwrap();
        assert_eq!(max_abs(&(s.values - o.values).unwrap()), 0.0);
    }

    #[test]
    fn mask_mismatch_rejected() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let bsa = Bsa::new(&mut ps, "bsa", &cfg(1, Interaction::Iab, None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = MaskedSequence::new(rand_tensor(&mut rng, &[1, 4, 8]), ones(1, 4)).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 1.0, 0.0]], &Device::Cpu).unwrap();
        let o = MaskedSequence::new(rand_tensor(&mut rng, &[1, 4, 8]), mask).unwrap();
        assert!(bsa.sos_forward(&s, &o, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn object_perturbation_outside_receptive_field() {
        // 2 layers, k_w = 3: embed (±1) then self (±1) then cross (±1) per layer
        let mut ps = ParamStore::new(DType::F64, 3);
        let bsa = Bsa::new(&mut ps, "bsa", &cfg(2, Interaction::Iab, None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let len = 30;
        let s = MaskedSequence::new(rand_tensor(&mut rng, &[1, len, 8]), ones(1, len)).unwrap();
        let o_vals = rand_tensor(&mut rng, &[1, len, 8]);
        let o = MaskedSequence::new(o_vals.clone(), ones(1, len)).unwrap();
        let (base, _) = bsa.sos_forward(&s, &o, &mut Ctx::eval()).unwrap();

        let bump = Tensor::zeros((1, len, 8), DType::F64, &Device::Cpu)
            .unwrap()
            .slice_assign(&[0..1, 25..26, 0..8], &Tensor::ones((1, 1, 8), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let o2 = MaskedSequence::new((o_vals + bump).unwrap(), ones(1, len)).unwrap();
        let (moved, _) = bsa.sos_forward(&s, &o2, &mut Ctx::eval()).unwrap();
        let diff = (moved.values - base.values).unwrap().abs().unwrap().sum(2).unwrap();
        let diff = diff.to_vec2::<f64>().unwrap().remove(0);
        // the object change can reach at most 3 + 3 frames of cumulative radius
        for (t, d) in diff.iter().enumerate() {
            if t.abs_diff(25) > 6 {
                assert_eq!(*d, 0.0, "frame {t}");
            }
        }
        assert!(diff[25] > 0.0);
    }

    #[test]
    fn fuse_pair_shape_bias_and_asymmetry() {
        let mut ps = ParamStore::new(DType::F64, 5);
        let bsa = Bsa::new(&mut ps, "bsa", &cfg(1, Interaction::Iab, None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = MaskedSequence::new(rand_tensor(&mut rng, &[1, 6, 8]), ones(1, 6)).unwrap();
        let o = MaskedSequence::new(rand_tensor(&mut rng, &[1, 6, 8]), ones(1, 6)).unwrap();
        let th = rand_tensor(&mut rng, &[1, 6, 5]);
        let so = bsa.fuse_pair(&s, &o, &th, &mut Ctx::eval()).unwrap();
        assert_eq!(so.values.dims(), &[1, 6, 8]);
        let os = bsa.fuse_pair(&o, &s, &th, &mut Ctx::eval()).unwrap();
        assert!(max_abs(&(so.values - os.values).unwrap()) > 1e-6);

        // zero θ_r: the convolution contributes only its bias
        let rel = bsa.rel_conv(&th.zeros_like().unwrap()).unwrap();
        let bias = bsa.rel_proj.bias.to_vec1::<f64>().unwrap();
        for row in &rel.to_vec3::<f64>().unwrap()[0] {
            assert_eq!(row, &bias);
        }
        let short = rand_tensor(&mut rng, &[1, 5, 5]);
        assert!(bsa.fuse_pair(&s, &o, &short, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn padding_opacity_through_bsa() {
        let mut ps = ParamStore::new(DType::F64, 5);
        let bsa = Bsa::new(&mut ps, "bsa", &cfg(2, Interaction::Iab, None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let valid = Tensor::new(&[[1.0f64, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let make = |rng: &mut ChaCha8Rng| BsaInput {
            features_s: rand_tensor(rng, &[1, 8, 6]),
            features_o: rand_tensor(rng, &[1, 8, 6]),
            extra_s: None,
            extra_o: None,
            theta_a_s: rand_tensor(rng, &[1, 8, 8]),
            theta_a_o: rand_tensor(rng, &[1, 8, 8]),
            theta_r: rand_tensor(rng, &[1, 8, 5]),
            valid: valid.clone(),
        };
        let a = make(&mut rng);
        let mut b = make(&mut rng);
        // copy valid frames from a into b, leave padding different
        let keep = |x: &Tensor, y: &Tensor| {
            x.narrow(1, 0, 5)
                .unwrap()
                .pad_with_zeros(1, 0, 3)
                .unwrap()
                .add(&(y.narrow(1, 5, 3).unwrap().pad_with_zeros(1, 5, 0).unwrap()))
                .unwrap()
        };
        b.features_s = keep(&a.features_s, &b.features_s);
        b.features_o = keep(&a.features_o, &b.features_o);
        b.theta_a_s = keep(&a.theta_a_s, &b.theta_a_s);
        b.theta_a_o = keep(&a.theta_a_o, &b.theta_a_o);
        b.theta_r = keep(&a.theta_r, &b.theta_r);
        let ea = bsa.forward(&a, &mut Ctx::eval()).unwrap();
        let eb = bsa.forward(&b, &mut Ctx::eval()).unwrap();
        let d = (ea.values - eb.values).unwrap();
        assert!(max_abs(&d) < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut ps = ParamStore::new(DType::F64, 5);
        let c = BsaConfig {
            in_dim: 4,
            extra_dim: None,
            attn: AttentionConfig::new(8, 2, 3),
            sos_layers: 1,
            interaction: Interaction::Iab,
            rel_kernel: 3,
        };
        let bsa = Bsa::new(&mut ps, "bsa", &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fs = Var::from_tensor(&rand_tensor(&mut rng, &[1, 2, 4])).unwrap();
        let input = |fs: &Tensor, rng: &mut ChaCha8Rng| BsaInput {
            features_s: fs.clone(),
            features_o: rand_tensor(rng, &[1, 2, 4]),
            extra_s: None,
            extra_o: None,
            theta_a_s: rand_tensor(rng, &[1, 2, 8]),
            theta_a_o: rand_tensor(rng, &[1, 2, 8]),
            theta_r: rand_tensor(rng, &[1, 2, 5]),
            valid: ones(1, 2),
        };
        let base = input(fs.as_tensor(), &mut rng);
        let weights = rand_tensor(&mut rng, &[1, 2, 8]);
        let objective = |inp: &BsaInput| -> Tensor {
            (bsa.forward(inp, &mut Ctx::eval()).unwrap().values * &weights)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let grads = objective(&base).backward().unwrap();
        let analytic = grads.get(fs.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let flat = fs.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..flat.len() {
            let shifted = |delta: f64| {
                let mut v = flat.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, (1, 2, 4), &Device::Cpu).unwrap();
                let mut inp = base.clone();
                inp.features_s = t;
                objective(&inp).to_scalar::<f64>().unwrap()
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!((numeric - analytic[i]).abs() / denom < 1e-3, "{i}: {numeric} vs {}", analytic[i]);
        }
    }
}
