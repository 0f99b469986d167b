//! Matching cost and training loss for the set of relation queries.

use candle_core::{DType, Tensor, D};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::detector::{ForwardOutput, ModelOutput};
use crate::error::{Error, Result};
use crate::matching::{hungarian, Assignment};
use crate::nn::{log_softmax_last, sigmoid, softplus};

/// Ground-truth relations of one pair: predicate indices and `G × L` binary
/// frame masks over the pair's (padded) timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub classes: Vec<usize>,
    pub masks: Array2<f32>,
}

impl GroundTruthSet {
    pub fn new(classes: Vec<usize>, masks: Array2<f32>) -> Result<Self> {
        if classes.len() != masks.nrows() {
            return Err(Error::LengthMismatch {
                context: "ground-truth classes vs masks",
                left: classes.len(),
                right: masks.nrows(),
            });
        }
        if masks.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition("ground-truth masks must be binary".into()));
        }
        Ok(Self { classes, masks })
    }

    pub fn empty(len: usize) -> Self {
        Self {
            classes: Vec::new(),
            masks: Array2::zeros((0, len)),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn timeline_len(&self) -> usize {
        self.masks.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_mf: f64,
    pub lambda_md: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_mf: 2.0,
            lambda_md: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    /// Relative weight of the no-relation class in the classification loss.
    /// `None` keeps every query at weight 1.
    pub no_object_weight: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
            no_object_weight: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.lambda_cls > 0.0 && w.lambda_mf > 0.0 && w.lambda_md > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(Error::Config("focal alpha must be in [0,1] and gamma >= 0".into()));
        }
        if self.dice_eps < 0.0 {
            return Err(Error::Config("dice epsilon must be >= 0".into()));
        }
        if let Some(w) = self.no_object_weight {
            if w <= 0.0 {
                return Err(Error::Config("no_object_weight must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean binary focal loss of probabilities `p` against binary targets `m`.
pub fn focal_loss(p: &[f64], m: &[f64], alpha: f64, gamma: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let sum: f64 = p
        .iter()
        .zip(m)
        .map(|(&p, &m)| {
            let (p_t, a_t) = if m > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            if p_t >= 1.0 {
                0.0
            } else {
                -a_t * (1.0 - p_t).powf(gamma) * p_t.max(f64::MIN_POSITIVE).ln()
            }
        })
        .sum();
    sum / p.len() as f64
}

/// Focal loss evaluated from logits so saturated predictions stay finite.
pub fn focal_loss_logits(x: &[f64], m: &[f64], alpha: f64, gamma: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let sum: f64 = x
        .iter()
        .zip(m)
        .map(|(&x, &m)| {
            // -ln p_t with p_t the probability of the true label
            let (nll, a_t, p_t) = if m > 0.5 {
                (softplus_f64(-x), alpha, sigmoid_f64(x))
            } else {
                (softplus_f64(x), 1.0 - alpha, sigmoid_f64(-x))
            };
            a_t * (1.0 - p_t).powf(gamma) * nll
        })
        .sum();
    sum / x.len() as f64
}

pub fn dice_loss(p: &[f64], m: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(m).map(|(p, m)| p * m).sum();
    let sp: f64 = p.iter().sum();
    let sm: f64 = m.iter().sum();
    1.0 - (2.0 * inter + eps) / (sp + sm + eps)
}

/// Cross-entropy of a logit vector against class `target`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

fn sigmoid_f64(x: f64) -> f64 {
    0.5 * ((0.5 * x).tanh() + 1.0)
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `N_q × G` matching cost of one pair, restricted to valid frames.
pub fn pair_cost(
    class_logits: ArrayView2<f64>,
    mask_logits: ArrayView2<f64>,
    valid: &[bool],
    gt: &GroundTruthSet,
    cfg: &LossConfig,
) -> Result<Array2<f64>> {
    let num_queries = class_logits.nrows();
    if gt.len() > num_queries {
        return Err(Error::Precondition(format!(
            "{} relations exceed {num_queries} queries",
            gt.len()
        )));
    }
    if mask_logits.nrows() != num_queries {
        return Err(Error::LengthMismatch {
            context: "class vs mask queries",
            left: num_queries,
            right: mask_logits.nrows(),
        });
    }
    let len = mask_logits.ncols();
    if valid.len() != len || gt.timeline_len() != len {
        return Err(Error::LengthMismatch {
            context: "mask logits vs valid/ground-truth timeline",
            left: len,
            right: if valid.len() != len { valid.len() } else { gt.timeline_len() },
        });
    }
    if let Some(&c) = gt.classes.iter().find(|&&c| c >= class_logits.ncols()) {
        return Err(Error::Precondition(format!("class {c} out of range")));
    }
    let frames: Vec<usize> = (0..len).filter(|&t| valid[t]).collect();
    let targets: Vec<Vec<f64>> = (0..gt.len())
        .map(|j| frames.iter().map(|&t| gt.masks[[j, t]] as f64).collect())
        .collect();
    let w = &cfg.weights;
    let mut cost = Array2::zeros((num_queries, gt.len()));
    for i in 0..num_queries {
        let logits: Vec<f64> = class_logits.row(i).to_vec();
        let x: Vec<f64> = frames.iter().map(|&t| mask_logits[[i, t]]).collect();
        let p: Vec<f64> = x.iter().map(|&v| sigmoid_f64(v)).collect();
        for (j, m) in targets.iter().enumerate() {
            cost[[i, j]] = w.lambda_cls * cross_entropy(&logits, gt.classes[j])
                + w.lambda_mf * focal_loss_logits(&x, m, cfg.focal_alpha, cfg.focal_gamma)
                + w.lambda_md * dice_loss(&p, m, cfg.dice_eps);
        }
    }
    Ok(cost)
}

/// Matches every pair of a batch on detached predictions.
pub fn match_batch(
    out: &ModelOutput,
    valid: &Tensor,
    gts: &[GroundTruthSet],
    cfg: &LossConfig,
) -> Result<Vec<Assignment>> {
    let class = out.class_logits.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let masks = out.mask_logits.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let valid = valid.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    if gts.len() != class.len() {
        return Err(Error::LengthMismatch {
            context: "ground-truth sets vs batch",
            left: gts.len(),
            right: class.len(),
        });
    }
    gts.iter()
        .enumerate()
        .map(|(b, gt)| {
            let cls = to_array(&class[b]);
            let msk = to_array(&masks[b]);
            let v: Vec<bool> = valid[b].iter().map(|&x| x > 0.5).collect();
            let cost = pair_cost(cls.view(), msk.view(), &v, gt, cfg)?;
            let rows: Vec<Vec<f64>> = cost.outer_iter().map(|r| r.to_vec()).collect();
            let a = hungarian(&rows)?;
            Ok(Assignment {
                num_queries: cls.nrows(),
                ..a
            })
        })
        .collect()
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

/// Loss value with its unweighted components for logging.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub cls: f64,
    pub focal: f64,
    pub dice: f64,
}

impl LossTerms {
    pub fn value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Classification CE over all queries plus focal and dice mask losses over
/// matched queries. Mask terms are averaged over the matched relations of the
/// batch; the classification term over all `B · N_q` queries.
pub fn total_loss(
    out: &ModelOutput,
    valid: &Tensor,
    gts: &[GroundTruthSet],
    assignments: &[Assignment],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let (batch, num_queries, num_classes) = out.class_logits.dims3()?;
    let (_, _, len) = out.mask_logits.dims3()?;
    let dtype = out.class_logits.dtype();
    let device = out.class_logits.device();
    if gts.len() != batch || assignments.len() != batch {
        return Err(Error::LengthMismatch {
            context: "batch vs ground truths/assignments",
            left: batch,
            right: gts.len().min(assignments.len()),
        });
    }
    let no_rel = num_classes - 1;

    let mut targets = vec![no_rel as u32; batch * num_queries];
    let mut rows = Vec::new();
    let mut row_batch = Vec::new();
    let mut row_mask = Vec::new();
    for (b, (gt, a)) in gts.iter().zip(assignments).enumerate() {
        if gt.timeline_len() != len {
            return Err(Error::LengthMismatch {
                context: "ground-truth timeline vs mask logits",
                left: gt.timeline_len(),
                right: len,
            });
        }
        if a.query_for_gt.len() != gt.len() {
            return Err(Error::Precondition("assignment does not cover ground truth".into()));
        }
        for (j, &q) in a.query_for_gt.iter().enumerate() {
            if q >= num_queries {
                return Err(Error::Precondition(format!("query {q} out of range")));
            }
            targets[b * num_queries + q] = gt.classes[j] as u32;
            rows.push((b * num_queries + q) as u32);
            row_batch.push(b as u32);
            row_mask.extend(gt.masks.row(j).iter().copied());
        }
    }

    let logp = log_softmax_last(&out.class_logits)?;
    let target_t = Tensor::from_vec(targets.clone(), (batch, num_queries, 1), device)?;
    let picked = logp.gather(&target_t, 2)?.squeeze(2)?;
    let cls = match cfg.no_object_weight {
        None => picked.mean_all()?.neg()?,
        Some(w) => {
            let weights: Vec<f64> = targets
                .iter()
                .map(|&t| if t as usize == no_rel { w } else { 1.0 })
                .collect();
            let norm: f64 = weights.iter().sum();
            let wt = Tensor::from_vec(weights, (batch, num_queries), device)?.to_dtype(dtype)?;
            (picked * wt)?.sum_all()?.affine(-1.0 / norm, 0.0)?
        }
    };

    let weights = &cfg.weights;
    let mut total = cls.affine(weights.lambda_cls, 0.0)?;
    let (mut focal_v, mut dice_v) = (0.0, 0.0);
    if !rows.is_empty() {
        let n = rows.len();
        let idx = Tensor::from_vec(rows, n, device)?;
        let bidx = Tensor::from_vec(row_batch, n, device)?;
        let x = out
            .mask_logits
            .reshape((batch * num_queries, len))?
            .index_select(&idx, 0)?;
        let v = valid.to_dtype(dtype)?.index_select(&bidx, 0)?;
        let m = Tensor::from_vec(row_mask, (n, len), device)?.to_dtype(dtype)?;
        let m = (m * &v)?;
        let (focal, dice) = mask_losses(&x, &m, &v, cfg)?;
        focal_v = scalar(&focal)?;
        dice_v = scalar(&dice)?;
        total = ((total + focal.affine(weights.lambda_mf, 0.0)?)? + dice.affine(weights.lambda_md, 0.0)?)?;
    }
    Ok(LossTerms {
        cls: scalar(&cls)?,
        focal: focal_v,
        dice: dice_v,
        total,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean focal and dice losses over `M` matched rows. `x`, `m`, `v` are
/// `M × L` logits, targets and validity.
fn mask_losses(x: &Tensor, m: &Tensor, v: &Tensor, cfg: &LossConfig) -> Result<(Tensor, Tensor)> {
    let rows = x.dim(0)? as f64;
    let inv_m = m.affine(-1.0, 1.0)?;
    let ce = ((m * softplus(&x.neg()?)?)? + (&inv_m * softplus(x)?)?)?;
    let p = sigmoid(x)?;
    let p_t = ((m * &p)? + (&inv_m * p.affine(-1.0, 1.0)?)?)?;
    let a_t = m.affine(2.0 * cfg.focal_alpha - 1.0, 1.0 - cfg.focal_alpha)?;
    let modulating = power(&p_t.affine(-1.0, 1.0)?, cfg.focal_gamma)?;
    let per_frame = (((a_t * modulating)? * ce)? * v)?;
    let counts = v.sum_keepdim(D::Minus1)?.clamp(1.0, f64::INFINITY)?;
    let focal = (per_frame.sum_keepdim(D::Minus1)? / counts)?.sum_all()?.affine(1.0 / rows, 0.0)?;

    let pv = (p * v)?;
    let num = (&pv * m)?.sum_keepdim(D::Minus1)?.affine(2.0, cfg.dice_eps)?;
    let den = (pv.sum_keepdim(D::Minus1)? + m.sum_keepdim(D::Minus1)?)?.affine(1.0, cfg.dice_eps)?;
    let dice = (num / den)?.affine(-1.0, 1.0)?.sum_all()?.affine(1.0 / rows, 0.0)?;
    Ok((focal, dice))
}

fn power(x: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma == 0.0 {
        return Ok(x.ones_like()?);
    }
    if gamma.fract() == 0.0 && gamma <= 8.0 {
        let mut out = x.clone();
        for _ in 1..gamma as usize {
            out = (out * x)?;
        }
        return Ok(out);
    }
    Ok(x.clamp(1e-12, 1.0)?.powf(gamma)?)
}

/// Matching plus loss over the final prediction and, if present, every
/// auxiliary decoder output.
pub fn criterion(
    out: &ForwardOutput,
    valid: &Tensor,
    gts: &[GroundTruthSet],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let assign = match_batch(&out.main, valid, gts, cfg)?;
    let mut terms = total_loss(&out.main, valid, gts, &assign, cfg)?;
    for aux in &out.aux {
        let assign = match_batch(aux, valid, gts, cfg)?;
        let t = total_loss(aux, valid, gts, &assign, cfg)?;
        terms.total = (terms.total + t.total)?;
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn focal_examples() {
        close(focal_loss(&[1.0, 0.0], &[1.0, 0.0], 0.25, 2.0), 0.0, 1e-15);
        close(
            focal_loss(&[0.5, 0.5, 0.5], &[1.0; 3], 0.25, 2.0),
            0.25 * 0.25 * std::f64::consts::LN_2,
            1e-12,
        );
        let p: [f64; 3] = [0.2, 0.7, 0.9];
        let m: [f64; 3] = [1.0, 0.0, 1.0];
        let bce: f64 = p
            .iter()
            .zip(&m)
            .map(|(p, m)| -(m * p.ln() + (1.0 - m) * (1.0 - p).ln()))
            .sum::<f64>()
            / 3.0;
        close(focal_loss(&p, &m, 0.5, 0.0), 0.5 * bce, 1e-12);
        let x: Vec<f64> = p.iter().map(|p: &f64| (p / (1.0 - p)).ln()).collect();
        close(focal_loss_logits(&x, &m, 0.25, 2.0), focal_loss(&p, &m, 0.25, 2.0), 1e-12);
    }

    #[test]
    fn dice_examples() {
        close(dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 1.0), 0.0, 1e-15);
        close(dice_loss(&[0.5; 4], &[1.0, 1.0, 0.0, 0.0], 1.0), 0.4, 1e-12);
        let d = dice_loss(&[0.0, 1.0, 1.0, 1.0], &[1.0, 0.0, 0.0, 0.0], 1e-9);
        close(d, 1.0, 1e-6);
    }

    #[test]
    fn uniform_class_cost_is_log_classes() {
        let gt = GroundTruthSet::new(vec![0, 3], Array2::from_elem((2, 4), 1.0)).unwrap();
        let cls = Array2::<f64>::zeros((3, 6));
        let msk = Array2::<f64>::from_elem((3, 4), 40.0);
        let cfg = LossConfig::default();
        let c = pair_cost(cls.view(), msk.view(), &[true; 4], &gt, &cfg).unwrap();
        for v in c.iter() {
            close(*v, 2.0 * 6f64.ln(), 1e-9);
        }
    }

    #[test]
    fn pair_cost_rejects_too_many() {
        let gt = GroundTruthSet::new(vec![0, 0], Array2::from_elem((2, 2), 1.0)).unwrap();
        let cls = Array2::<f64>::zeros((1, 3));
        let msk = Array2::<f64>::zeros((1, 2));
        assert!(pair_cost(cls.view(), msk.view(), &[true; 2], &gt, &LossConfig::default()).is_err());
    }

    fn random_case(rng: &mut ChaCha8Rng, b: usize, nq: usize, k: usize, l: usize) -> (Tensor, Tensor, Tensor, Vec<GroundTruthSet>) {
        let dev = Device::Cpu;
        let cls: Vec<f64> = (0..b * nq * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let msk: Vec<f64> = (0..b * nq * l).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut valid = vec![0.0; b * l];
        let mut gts = Vec::new();
        for bi in 0..b {
            let n = rng.random_range(3..=l);
            for t in 0..n {
                valid[bi * l + t] = 1.0;
            }
            let g = rng.random_range(0..=nq.min(3));
            let mut masks = Array2::zeros((g, l));
            let mut classes = Vec::new();
            for j in 0..g {
                let s = rng.random_range(0..n);
                let e = rng.random_range(s..n);
                for t in s..=e {
                    masks[[j, t]] = 1.0;
                }
                classes.push(rng.random_range(0..k - 1));
            }
            gts.push(GroundTruthSet::new(classes, masks).unwrap());
        }
        (
            Tensor::from_vec(cls, (b, nq, k), &dev).unwrap(),
            Tensor::from_vec(msk, (b, nq, l), &dev).unwrap(),
            Tensor::from_vec(valid, (b, l), &dev).unwrap(),
            gts,
        )
    }

    fn oracle(cls: &Tensor, msk: &Tensor, valid: &Tensor, gts: &[GroundTruthSet], a: &[Assignment]) -> f64 {
        let cls = cls.to_vec3::<f64>().unwrap();
        let msk = msk.to_vec3::<f64>().unwrap();
        let valid = valid.to_vec2::<f64>().unwrap();
        let k = cls[0][0].len();
        let mut ce = 0.0;
        let mut count = 0.0;
        let (mut focal, mut dice, mut matched) = (0.0, 0.0, 0.0);
        for b in 0..cls.len() {
            let owner = a[b].gt_for_query();
            for (q, o) in owner.iter().enumerate() {
                let target = o.map_or(k - 1, |j| gts[b].classes[j]);
                let z = &cls[b][q];
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                ce += lse - z[target];
                count += 1.0;
                if let Some(j) = o {
                    let mut f = 0.0;
                    let mut n = 0.0;
                    let (mut inter, mut sp, mut sm) = (0.0, 0.0, 0.0);
                    for t in 0..valid[b].len() {
                        if valid[b][t] < 0.5 {
                            continue;
                        }
                        let p = 1.0 / (1.0 + (-msk[b][q][t]).exp());
                        let m = gts[b].masks[[*j, t]] as f64;
                        let (pt, at) = if m > 0.5 { (p, 0.25) } else { (1.0 - p, 0.75) };
                        f += -at * (1.0 - pt).powi(2) * pt.ln();
                        n += 1.0;
                        inter += p * m;
                        sp += p;
                        sm += m;
                    }
                    focal += f / n;
                    dice += 1.0 - (2.0 * inter + 1.0) / (sp + sm + 1.0);
                    matched += 1.0;
                }
            }
        }
        let mut total = 2.0 * ce / count;
        if matched > 0.0 {
            total += 2.0 * focal / matched + 5.0 * dice / matched;
        }
        total
    }

    #[test]
    fn total_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        for _ in 0..30 {
            let (cls, msk, valid, gts) = random_case(&mut rng, 3, 4, 5, 7);
            let out = ModelOutput {
                class_logits: cls.clone(),
                mask_logits: msk.clone(),
            };
            let a = match_batch(&out, &valid, &gts, &cfg).unwrap();
            let got = total_loss(&out, &valid, &gts, &a, &cfg).unwrap().value().unwrap();
            close(got, oracle(&cls, &msk, &valid, &gts, &a), 1e-9);
        }
    }

    #[test]
    fn cost_entries_match_scalar_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cls = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
        let msk = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
        let masks = ndarray::array![[1.0f32, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0, 0.0]];
        let gt = GroundTruthSet::new(vec![2, 0], masks).unwrap();
        let valid = [true, true, true, true, false];
        let c = pair_cost(cls.view(), msk.view(), &valid, &gt, &LossConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let z = cls.row(i);
                let ce = z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[gt.classes[j]];
                let p: Vec<f64> = (0..4).map(|t| 1.0 / (1.0 + (-msk[[i, t]]).exp())).collect();
                let m: Vec<f64> = (0..4).map(|t| gt.masks[[j, t]] as f64).collect();
                let f = focal_loss(&p, &m, 0.25, 2.0);
                let d = dice_loss(&p, &m, 1.0);
                close(c[[i, j]], 2.0 * ce + 2.0 * f + 5.0 * d, 1e-9);
            }
        }
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let dev = Device::Cpu;
        let gt = GroundTruthSet::new(vec![1], ndarray::array![[0.0f32, 1.0, 1.0, 0.0]]).unwrap();
        let mut cls = vec![-30.0; 2 * 4];
        cls[1] = 30.0;
        cls[4 + 3] = 30.0;
        let msk = vec![-30.0, 30.0, 30.0, -30.0, -30.0, -30.0, -30.0, -30.0];
        let out = ModelOutput {
            class_logits: Tensor::from_vec(cls, (1, 2, 4), &dev).unwrap(),
            mask_logits: Tensor::from_vec(msk, (1, 2, 4), &dev).unwrap(),
        };
        let valid = Tensor::ones((1, 4), DType::F64, &dev).unwrap();
        let cfg = LossConfig::default();
        let a = match_batch(&out, &valid, std::slice::from_ref(&gt), &cfg).unwrap();
        assert_eq!(a[0].query_for_gt, vec![0]);
        let loss = total_loss(&out, &valid, &[gt], &a, &cfg).unwrap();
        assert!(loss.value().unwrap() < 1e-3);
    }

    #[test]
    fn empty_ground_truth_is_class_only() {
        let dev = Device::Cpu;
        let cls = Tensor::from_vec(vec![0.0f64, 1.0, 2.0, 0.5, 0.5, 0.5], (1, 2, 3), &dev).unwrap();
        let out = ModelOutput {
            class_logits: cls,
            mask_logits: Tensor::zeros((1, 2, 5), DType::F64, &dev).unwrap(),
        };
        let valid = Tensor::ones((1, 5), DType::F64, &dev).unwrap();
        let gt = GroundTruthSet::empty(5);
        let cfg = LossConfig::default();
        let a = match_batch(&out, &valid, std::slice::from_ref(&gt), &cfg).unwrap();
        let terms = total_loss(&out, &valid, &[gt], &a, &cfg).unwrap();
        let ce0 = cross_entropy(&[0.0, 1.0, 2.0], 2);
        let ce1 = cross_entropy(&[0.5, 0.5, 0.5], 2);
        close(terms.value().unwrap(), 2.0 * (ce0 + ce1) / 2.0, 1e-12);
        assert_eq!(terms.focal, 0.0);
        assert_eq!(terms.dice, 0.0);
    }

    #[test]
    fn padding_and_gt_order_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::default();
        for _ in 0..20 {
            let (cls, msk, valid, gts) = random_case(&mut rng, 2, 4, 4, 6);
            let out = ModelOutput {
                class_logits: cls.clone(),
                mask_logits: msk.clone(),
            };
            let eval = |out: &ModelOutput, gts: &[GroundTruthSet]| {
                let a = match_batch(out, &valid, gts, &cfg).unwrap();
                total_loss(out, &valid, gts, &a, &cfg).unwrap().value().unwrap()
            };
            let base = eval(&out, &gts);

            let noise = Tensor::rand(-50.0f64, 50.0, msk.shape(), &Device::Cpu).unwrap();
            let inv = valid.affine(-1.0, 1.0).unwrap().unsqueeze(1).unwrap();
            let perturbed = (&msk + noise.broadcast_mul(&inv).unwrap()).unwrap();
            let out2 = ModelOutput {
                class_logits: cls.clone(),
                mask_logits: perturbed,
            };
            close(eval(&out2, &gts), base, 1e-9);

            let reversed: Vec<GroundTruthSet> = gts
                .iter()
                .map(|g| {
                    let order: Vec<usize> = (0..g.len()).rev().collect();
                    GroundTruthSet::new(
                        order.iter().map(|&j| g.classes[j]).collect(),
                        g.masks.select(ndarray::Axis(0), &order),
                    )
                    .unwrap()
                })
                .collect();
            close(eval(&out, &reversed), base, 1e-9);
        }
    }

    #[test]
    fn no_object_weight_changes_class_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cls, msk, valid, gts) = random_case(&mut rng, 2, 4, 4, 6);
        let out = ModelOutput {
            class_logits: cls,
            mask_logits: msk,
        };
        let cfg = LossConfig::default();
        let a = match_batch(&out, &valid, &gts, &cfg).unwrap();
        let plain = total_loss(&out, &valid, &gts, &a, &cfg).unwrap();
        let same = LossConfig {
            no_object_weight: Some(1.0),
            ..cfg.clone()
        };
        close(total_loss(&out, &valid, &gts, &a, &same).unwrap().cls, plain.cls, 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig::default();
        let (cls, msk, valid, gts) = random_case(&mut rng, 2, 3, 4, 6);
        let cls_var = Var::from_tensor(&cls).unwrap();
        let msk_var = Var::from_tensor(&msk).unwrap();
        let out = ModelOutput {
            class_logits: cls_var.as_tensor().clone(),
            mask_logits: msk_var.as_tensor().clone(),
        };
        let a = match_batch(&out, &valid, &gts, &cfg).unwrap();
        let loss = total_loss(&out, &valid, &gts, &a, &cfg).unwrap();
        let grads = loss.total.backward().unwrap();
        let eval = |c: &Tensor, m: &Tensor| {
            let o = ModelOutput {
                class_logits: c.clone(),
                mask_logits: m.clone(),
            };
            total_loss(&o, &valid, &gts, &a, &cfg).unwrap().value().unwrap()
        };
        let h = 1e-6;
        for (which, base) in [(0, &cls), (1, &msk)] {
            let g = grads
                .get(if which == 0 { cls_var.as_tensor() } else { msk_var.as_tensor() })
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let flat = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..flat.len() {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[i] += h;
                minus[i] -= h;
                let p = Tensor::from_vec(plus, base.shape(), &Device::Cpu).unwrap();
                let mm = Tensor::from_vec(minus, base.shape(), &Device::Cpu).unwrap();
                let fd = if which == 0 {
                    (eval(&p, &msk) - eval(&mm, &msk)) / (2.0 * h)
                } else {
                    (eval(&cls, &p) - eval(&cls, &mm)) / (2.0 * h)
                };
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-3 || (fd - g[i]).abs() < 1e-8, "param {which}[{i}]: {fd} vs {}", g[i]);
            }
        }
    }
}
