//! Parameter storage and the small set of layers the model is built from.
//!
//! Parameters are created from a seeded ChaCha stream so that two stores built
//! with the same seed and construction order hold identical values.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Precondition(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copy of every parameter, detached from the graph.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_detached_tensor().copy().expect("cpu copy");
                (k.clone(), t)
            })
            .collect()
    }

    /// Overwrites parameters in place. Every stored parameter must be present
    /// with a matching shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::schema(name.clone(), "missing parameter"))?;
            if src.dims() != var.dims() {
                return Err(Error::schema(
                    name.clone(),
                    format!("shape {:?}, expected {:?}", src.dims(), var.dims()),
                ));
            }
            var.set(&src.to_dtype(self.dtype)?.copy()?)?;
        }
        Ok(())
    }
}

/// Forward-pass mode and the randomness used by drop-path and dropout.
pub struct Ctx {
    pub train: bool,
    pub drop_path: f64,
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            drop_path: 0.0,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(drop_path: f64, dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            drop_path,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Scales each batch item's residual branch by 0 or `1/(1-p)`.
    pub fn drop_path(&mut self, branch: &Tensor) -> Result<Tensor> {
        let p = self.drop_path;
        if !self.train || p <= 0.0 {
            return Ok(branch.clone());
        }
        let b = branch.dim(0)?;
        let keep: Vec<f64> = (0..b)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect();
        let mut shape = vec![1usize; branch.rank()];
        shape[0] = b;
        let mask = Tensor::from_vec(keep, shape, branch.device())?.to_dtype(branch.dtype())?;
        Ok(branch.broadcast_mul(&mask)?)
    }

    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.dropout;
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep: Vec<f64> = (0..x.elem_count())
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect();
        let mask = Tensor::from_vec(keep, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Affine map over the last axis. The weight is stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(format!("{name}.weight"), &[in_dim, out_dim], bound)?,
            bias: ps.uniform(format!("{name}.bias"), &[out_dim], bound)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.bias.dims1().unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: ps.constant(format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu_erf()?;
        let h = ctx.dropout(&h)?;
        self.fc2.forward(&h)
    }
}

/// Zeroes rows (positions) whose mask entry is 0. `x` is `B × L × C`, `mask`
/// is `B × L` in the same dtype.
pub fn mask_positions(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&mask.unsqueeze(2)?)?)
}

/// Numerically stable `sigmoid` via `tanh`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((pos + tail)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_last(x)?.exp()?)
}
