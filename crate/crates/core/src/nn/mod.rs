//! Minimal neural-network building blocks over candle tensors.

pub mod ops;
pub mod params;

use candle_core::Tensor;

pub use params::{Init, Param, ParamBuilder, ParamEntry, ParamGroup, ParamStore};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// ViT-style init: truncated normal(0.02) weights, zero bias.
    pub fn new(b: &mut ParamBuilder, name: &str, group: ParamGroup, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(b, name, group, in_dim, out_dim, Init::TruncNormal(0.02))
    }

    pub fn with_init(
        b: &mut ParamBuilder,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = b.param(format!("{name}.weight"), group, &[out_dim, in_dim], init)?;
        let bias = b.param(format!("{name}.bias"), group, &[out_dim], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn zeros(b: &mut ParamBuilder, name: &str, group: ParamGroup, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(b, name, group, in_dim, out_dim, Init::Zeros)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias.as_ref().map(|b| b.tensor());
        ops::linear(x, &self.weight.tensor(), bias.as_ref())
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, group: ParamGroup, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(format!("{name}.weight"), group, &[dim], Init::Ones)?,
            bias: b.param(format!("{name}.bias"), group, &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.weight.tensor(), &self.bias.tensor(), self.eps)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Forward-pass mode and the random source used by dropout in training.
pub struct ForwardCtx {
    train: bool,
    rng: Option<rand_chacha::ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { train: false, rng: None }
    }

    pub fn train(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            train: true,
            rng: Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Inverted dropout; the identity in eval mode.
    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        use rand::Rng;
        let rng = match (&mut self.rng, self.train) {
            (Some(rng), true) if rate > 0.0 => rng,
            _ => return Ok(x.clone()),
        };
        if rate >= 1.0 {
            return Ok(x.zeros_like()?);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}
