//! Fully convolutional center/offset/size prediction head.

use candle_core::{DType, Tensor};

use crate::error::{CfbtError, Result};
use crate::nn::{ops, Init, Param, ParamBuilder, ParamGroup};

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    padding: usize,
}

impl Conv {
    fn new(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, k: usize, relu_follows: bool) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let bound = if relu_follows {
            (6.0 / fan_in).sqrt()
        } else {
            (1.0 / fan_in).sqrt()
        };
        let g = ParamGroup::Head;
        Ok(Self {
            weight: b.param(format!("{name}.weight"), g, &[c_out, c_in, k, k], Init::Uniform(bound))?,
            bias: b.param(format!("{name}.bias"), g, &[c_out], Init::Zeros)?,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight.tensor(), self.padding, 1, 1, 1)?;
        let c = self.bias.var().dim(0)?;
        Ok(y.broadcast_add(&self.bias.tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Three 3x3 conv+ReLU stages halving the width, then a 1x1 projection.
#[derive(Debug, Clone)]
pub struct Tower {
    pub stages: Vec<Conv>,
    pub out: Conv,
}

impl Tower {
    fn new(b: &mut ParamBuilder, name: &str, c_in: usize, channels: usize, c_out: usize) -> Result<Self> {
        let widths = [c_in, channels, channels / 2, channels / 4];
        let stages = (0..3)
            .map(|i| Conv::new(b, &format!("{name}.conv{}", i + 1), widths[i], widths[i + 1], 3, true))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv::new(b, &format!("{name}.out"), widths[3], c_out, 1, false)?;
        Ok(Self { stages, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.forward(&h)?.relu()?;
        }
        self.out.forward(&h)
    }
}

const MAP_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Head {
    pub cls: Tower,
    pub offset: Tower,
    pub size: Tower,
}

/// Batched head output, every map `(batch, channels, n, n)`.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub cls: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl Head {
    pub fn new(b: &mut ParamBuilder, dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            cls: Tower::new(b, "head.cls", dim, channels, 1)?,
            offset: Tower::new(b, "head.offset", dim, channels, 2)?,
            size: Tower::new(b, "head.size", dim, channels, 2)?,
        })
    }

    /// `features` are `(batch, N_x, D)` search tokens with `N_x` a perfect square.
    pub fn forward(&self, features: &Tensor) -> Result<HeadOutput> {
        let (batch, n_x, d) = features.dims3()?;
        let n = (n_x as f64).sqrt().round() as usize;
        if n * n != n_x {
            return Err(CfbtError::Config(format!("{n_x} search tokens do not form a square grid")));
        }
        let grid = features.transpose(1, 2)?.contiguous()?.reshape((batch, d, n, n))?;
        let squash = |t: Tensor| -> Result<Tensor> { Ok(ops::sigmoid(&t)?.clamp(MAP_EPS, 1.0 - MAP_EPS)?) };
        Ok(HeadOutput {
            cls: squash(self.cls.forward(&grid)?)?,
            offset: squash(self.offset.forward(&grid)?)?,
            size: squash(self.size.forward(&grid)?)?,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for t in [&self.cls, &self.offset, &self.size] {
            for c in t.stages.iter().chain(std::iter::once(&t.out)) {
                out.push(&c.weight);
                out.push(&c.bias);
            }
        }
        out
    }
}

pub fn head_forward(head: &Head, search_features: &Tensor) -> Result<HeadOutput> {
    head.forward(search_features)
}

/// Host-side maps of one sample, row-major over an `n x n` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub grid: usize,
    pub cls: Vec<f64>,
    pub offset_x: Vec<f64>,
    pub offset_y: Vec<f64>,
    pub size_w: Vec<f64>,
    pub size_h: Vec<f64>,
}

impl ScoreMaps {
    /// Maps with every cell at `score`, zero offsets and the given size.
    pub fn uniform(grid: usize, score: f64, size: f64) -> Self {
        let c = grid * grid;
        Self {
            grid,
            cls: vec![score; c],
            offset_x: vec![0.0; c],
            offset_y: vec![0.0; c],
            size_w: vec![size; c],
            size_h: vec![size; c],
        }
    }
}

impl HeadOutput {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.cls.dim(0)?)
    }

    pub fn grid(&self) -> Result<usize> {
        Ok(self.cls.dim(2)?)
    }

    pub fn sample(&self, i: usize) -> Result<ScoreMaps> {
        let grid = self.grid()?;
        let plane = |t: &Tensor, c: usize| -> Result<Vec<f64>> {
            Ok(t.get(i)?.get(c)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        Ok(ScoreMaps {
            grid,
            cls: plane(&self.cls, 0)?,
            offset_x: plane(&self.offset, 0)?,
            offset_y: plane(&self.offset, 1)?,
            size_w: plane(&self.size, 0)?,
            size_h: plane(&self.size, 1)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(seed: u64, dim: usize) -> Head {
        let mut b = ParamBuilder::new(Device::Cpu, DType::F64, Some(seed));
        Head::new(&mut b, dim, 16).unwrap()
    }

    #[test]
    fn grid_shape_from_token_count() {
        let h = head(0, 8);
        let x = Tensor::zeros((2, 256, 8), DType::F64, &Device::Cpu).unwrap();
        let out = h.forward(&x).unwrap();
        assert_eq!(out.cls.dims(), &[2, 1, 16, 16]);
        assert_eq!(out.offset.dims(), &[2, 2, 16, 16]);
        assert_eq!(out.size.dims(), &[2, 2, 16, 16]);
        let bad = Tensor::zeros((1, 250, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(h.forward(&bad), Err(CfbtError::Config(_))));
    }

    #[test]
    fn constant_features_give_constant_interior() {
        let h = head(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let token: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<f64> = (0..256).flat_map(|_| token.clone()).collect();
        let x = Tensor::from_vec(data, (1, 256, 8), &Device::Cpu).unwrap();
        let m = h.forward(&x).unwrap().sample(0).unwrap();
        // three 3x3 stages: cells at least 3 away from the border see no padding
        let interior: Vec<f64> = (3..13)
            .flat_map(|r| (3..13).map(move |c| r * 16 + c))
            .map(|k| m.cls[k])
            .collect();
        assert!(interior.iter().all(|v| (v - interior[0]).abs() < 1e-12));
        let sizes: Vec<f64> = (3..13).map(|r| m.size_w[r * 16 + 5]).collect();
        assert!(sizes.iter().all(|v| (v - sizes[0]).abs() < 1e-12));
    }

    #[test]
    fn output_ranges() {
        let h = head(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..64 * 8).map(|_| rng.random_range(-50.0..50.0)).collect();
        let x = Tensor::from_vec(data, (1, 64, 8), &Device::Cpu).unwrap();
        let m = h.forward(&x).unwrap().sample(0).unwrap();
        assert!(m.cls.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.offset_x.iter().chain(&m.offset_y).all(|v| (0.0..1.0).contains(v)));
        assert!(m.size_w.iter().chain(&m.size_h).all(|v| *v > 0.0 && *v <= 1.0));
    }
}
