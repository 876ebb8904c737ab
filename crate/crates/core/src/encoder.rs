//! Patch embedding, token sequences and the shared transformer encoder block.

use std::fmt;

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{CfbtError, Result};
use crate::nn::{ops, Init, LayerNorm, Linear, Param, ParamBuilder, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Initial,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Tir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Template,
    Search,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
        })
    }
}

/// One branch/modality stream: `(batch, n_template + n_search, dim)` with
/// template rows first.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub n_template: usize,
    pub n_search: usize,
    pub branch: Branch,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn template_rows(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, 0, self.n_template)?)
    }

    pub fn search_rows(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, self.n_template, self.n_search)?)
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.tokens.dim(2)?)
    }

    /// Same stream with new token values; the row layout must not change.
    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        if tokens.dims() != self.tokens.dims() {
            return Err(CfbtError::Shape(format!(
                "token update changes shape {:?} -> {:?}",
                self.tokens.dims(),
                tokens.dims()
            )));
        }
        Ok(Self { tokens, ..self.clone() })
    }

    pub fn with_parts(&self, template: &Tensor, search: &Tensor) -> Result<Self> {
        self.with_tokens(Tensor::cat(&[template, search], 1)?)
    }
}

/// Concatenates `[template; search]` token blocks into one stream.
pub fn assemble_branch_input(
    template: &Tensor,
    search: &Tensor,
    branch: Branch,
    modality: Modality,
) -> Result<TokenSequence> {
    let (bt, nz, dt) = template.dims3()?;
    let (bs, nx, ds) = search.dims3()?;
    if dt != ds || bt != bs {
        return Err(CfbtError::Shape(format!(
            "template {:?} and search {:?} disagree on batch or width",
            template.dims(),
            search.dims()
        )));
    }
    if nz == 0 || nx == 0 {
        return Err(CfbtError::Shape("empty template or search token block".into()));
    }
    Ok(TokenSequence {
        tokens: Tensor::cat(&[template, search], 1)?,
        n_template: nz,
        n_search: nx,
        branch,
        modality,
    })
}

/// Linear projection of flattened `P x P` patches plus role-specific
/// positional embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos_template: Param,
    pub pos_search: Param,
    patch: usize,
    template_size: usize,
    search_size: usize,
}

impl PatchEmbed {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let g = ParamGroup::PatchEmbed;
        let p = cfg.patch_size;
        let d = cfg.embed_dim;
        let fan_in = 3 * p * p;
        let bound = (6.0 / (fan_in + d) as f64).sqrt();
        Ok(Self {
            proj: Linear::with_init(b, "patch_embed.proj", g, fan_in, d, Init::Uniform(bound))?,
            pos_template: b.param("patch_embed.pos_template", g, &[1, cfg.n_template(), d], Init::TruncNormal(0.02))?,
            pos_search: b.param("patch_embed.pos_search", g, &[1, cfg.n_search(), d], Init::TruncNormal(0.02))?,
            patch: p,
            template_size: cfg.template_size,
            search_size: cfg.search_size,
        })
    }

    /// `image` is `(batch, 3, W, W)`; returns `(batch, (W/P)^2, D)`.
    pub fn forward(&self, image: &Tensor, role: Role) -> Result<Tensor> {
        let (batch, c, h, w) = image.dims4()?;
        let expected = match role {
            Role::Template => self.template_size,
            Role::Search => self.search_size,
        };
        if c != 3 || h != w || w != expected {
            return Err(CfbtError::Config(format!(
                "{role:?} image must be 3x{expected}x{expected}, got {c}x{h}x{w}"
            )));
        }
        let p = self.patch;
        let n = w / p;
        let patches = image
            .reshape(vec![batch, c, n, p, n, p])?
            .permute(vec![0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((batch, n * n, c * p * p))?;
        let tokens = self.proj.forward(&patches)?;
        let pos = match role {
            Role::Template => self.pos_template.tensor(),
            Role::Search => self.pos_search.tensor(),
        };
        Ok(tokens.broadcast_add(&pos)?)
    }
}

/// Joint self-attention over template and search tokens.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub num_heads: usize,
}

impl Attention {
    pub fn new(b: &mut ParamBuilder, name: &str, group: ParamGroup, dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(CfbtError::Config(format!("width {dim} not divisible by {num_heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(b, &format!("{name}.qkv"), group, dim, 3 * dim)?,
            proj: Linear::new(b, &format!("{name}.proj"), group, dim, dim)?,
            num_heads,
        })
    }

    fn qkv_heads(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, l, d) = x.dims3()?;
        let h = self.num_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(vec![b, l, 3, h, d / h])?
            .permute(vec![2, 0, 3, 1, 4])?
            .contiguous()?;
        Ok((qkv.get(0)?, qkv.get(1)?, qkv.get(2)?))
    }

    /// Attention probabilities, `(batch, heads, L, L)`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.qkv_heads(x)?;
        let scale = 1.0 / ((q.dim(3)? as f64).sqrt());
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        ops::softmax_last_dim(&logits)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let (q, k, v) = self.qkv_heads(x)?;
        let scale = 1.0 / ((q.dim(3)? as f64).sqrt());
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = ops::softmax_last_dim(&logits)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, l, d))?;
        self.proj.forward(&out)
    }
}

/// Multi-head self-attention on a token sequence; the caller adds the residual.
pub fn multi_head_attention(seq: &TokenSequence, attn: &Attention) -> Result<Tensor> {
    ops::ensure_finite(&seq.tokens, "attention input")?;
    attn.forward(&seq.tokens)
}

/// Token-wise two-layer feed-forward with expansion ratio 4 and GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, group: ParamGroup, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), group, dim, 4 * dim)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), group, 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

pub fn mlp_forward(seq: &TokenSequence, mlp: &Mlp) -> Result<Tensor> {
    mlp.forward(&seq.tokens)
}

/// Pre-norm transformer block. The residual additions are performed by the
/// caller because cross-modal prompts join them.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(b: &mut ParamBuilder, index: usize, cfg: &ModelConfig) -> Result<Self> {
        let g = ParamGroup::Encoder;
        let name = format!("encoder.blocks.{index}");
        let d = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), g, d)?,
            attn: Attention::new(b, &format!("{name}.attn"), g, d, cfg.num_heads)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), g, d)?,
            mlp: Mlp::new(b, &format!("{name}.mlp"), g, d)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, IndexOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn cfg(w_z: usize, w_x: usize, p: usize) -> ModelConfig {
        ModelConfig {
            template_size: w_z,
            search_size: w_x,
            patch_size: p,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn patch_embedding_token_counts() {
        let c = cfg(128, 256, 16);
        let mut b = ParamBuilder::new(Device::Cpu, DType::F32, Some(0));
        let pe = PatchEmbed::new(&mut b, &c).unwrap();
        let search = Tensor::zeros((1, 3, 256, 256), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(pe.forward(&search, Role::Search).unwrap().dims(), &[1, 256, 96]);
        let template = Tensor::zeros((1, 3, 128, 128), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(pe.forward(&template, Role::Template).unwrap().dims(), &[1, 64, 96]);
        // a search-sized image in the template role is a configuration error
        assert!(matches!(pe.forward(&search, Role::Template), Err(CfbtError::Config(_))));
    }

    #[test]
    fn zero_image_zero_pos_gives_zero_tokens() {
        let c = cfg(64, 128, 16);
        let mut b = ParamBuilder::new(Device::Cpu, DType::F32, Some(0));
        let pe = PatchEmbed::new(&mut b, &c).unwrap();
        pe.pos_search.var().set(&pe.pos_search.tensor().zeros_like().unwrap()).unwrap();
        let img = Tensor::zeros((1, 3, 128, 128), DType::F32, &Device::Cpu).unwrap();
        let t = pe.forward(&img, Role::Search).unwrap();
        assert_eq!(t.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn patch_flattening_order_is_channel_row_col() {
        // with identity-like projection the first token must be patch (0,0)
        let c = ModelConfig {
            embed_dim: 12,
            num_heads: 3,
            patch_size: 2,
            template_size: 4,
            search_size: 4,
            down_factor: 4,
            ..ModelConfig::desk()
        };
        let mut b = ParamBuilder::new(Device::Cpu, DType::F64, None);
        let pe = PatchEmbed::new(&mut b, &c).unwrap();
        let eye = Tensor::eye(12, DType::F64, &Device::Cpu).unwrap();
        pe.proj.weight.var().set(&eye).unwrap();
        let data: Vec<f64> = (0..48).map(|v| v as f64).collect();
        let img = Tensor::from_vec(data, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let t = pe.forward(&img, Role::Search).unwrap();
        let tok1 = t.i((0, 1)).unwrap().to_vec1::<f64>().unwrap();
        // patch at grid (0,1): columns 2..4 of rows 0..2 per channel
        assert_eq!(tok1, vec![2., 3., 6., 7., 18., 19., 22., 23., 34., 35., 38., 39.]);
    }

    #[test]
    fn assemble_concatenates_and_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_tensor(&mut rng, &[1, 64, 8]);
        let x = rand_tensor(&mut rng, &[1, 256, 8]);
        let seq = assemble_branch_input(&z, &x, Branch::Initial, Modality::Rgb).unwrap();
        assert_eq!(seq.tokens.dims(), &[1, 320, 8]);
        assert_eq!((seq.n_template, seq.n_search), (64, 256));

        let z2 = rand_tensor(&mut rng, &[1, 64, 8]);
        let other = assemble_branch_input(&z2, &x, Branch::Online, Modality::Rgb).unwrap();
        let a = seq.search_rows().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = other.search_rows().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        assert_ne!(
            seq.template_rows().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            other.template_rows().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );

        let empty = Tensor::zeros((1, 0, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(assemble_branch_input(&z, &empty, Branch::Initial, Modality::Rgb).is_err());
        let narrow = rand_tensor(&mut rng, &[1, 256, 4]);
        assert!(matches!(
            assemble_branch_input(&z, &narrow, Branch::Initial, Modality::Rgb),
            Err(CfbtError::Shape(_))
        ));
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut b = ParamBuilder::new(Device::Cpu, DType::F64, Some(5));
        let attn = Attention::new(&mut b, "a", ParamGroup::Encoder, 6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 1, 6]);
        let out = attn.forward(&x).unwrap();
        // softmax over a single key is 1, so out = proj(v)
        let v = attn.qkv.forward(&x).unwrap().narrow(2, 12, 6).unwrap();
        let expected = attn.proj.forward(&v).unwrap();
        let diff = (out - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-14);
    }

    #[test]
    fn attention_is_permutation_equivariant_and_convex() {
        let mut b = ParamBuilder::new(Device::Cpu, DType::F64, Some(5));
        let attn = Attention::new(&mut b, "a", ParamGroup::Encoder, 6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[1, 5, 6]);
        let perm = [3u32, 0, 4, 1, 2];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let xp = x.index_select(&idx, 1).unwrap();
        let out = attn.forward(&x).unwrap().index_select(&idx, 1).unwrap();
        let out_p = attn.forward(&xp).unwrap();
        let diff = (out - out_p).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);

        let w = attn.weights(&x).unwrap().to_dtype(DType::F64).unwrap();
        let rows = w.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-6));
        let min = w.min_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(min >= 0.0);
    }

    #[test]
    fn non_finite_attention_input_is_rejected() {
        let mut b = ParamBuilder::new(Device::Cpu, DType::F32, Some(5));
        let attn = Attention::new(&mut b, "a", ParamGroup::Encoder, 6, 2).unwrap();
        let mut data = vec![0.0f32; 12];
        data[3] = f32::NAN;
        let x = Tensor::from_vec(data, (1, 2, 6), &Device::Cpu).unwrap();
        let seq = TokenSequence {
            tokens: x,
            n_template: 1,
            n_search: 1,
            branch: Branch::Initial,
            modality: Modality::Rgb,
        };
        assert!(matches!(multi_head_attention(&seq, &attn), Err(CfbtError::Numeric(_))));
    }

    #[test]
    fn mlp_zero_weights_and_shape() {
        let mut b = ParamBuilder::new(Device::Cpu, DType::F32, None);
        let mlp = Mlp::new(&mut b, "m", ParamGroup::Encoder, 8).unwrap();
        let x = Tensor::ones((1, 320, 8), DType::F32, &Device::Cpu).unwrap();
        let y = mlp.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 320, 8]);
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }
}
