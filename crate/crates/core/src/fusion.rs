//! Cross-modal and cross-branch adapters.
//!
//! * [`Ba`]: three-linear bottleneck producing an additive prompt.
//! * [`Cstf`]: hourglass cross-attention between two token blocks, used once
//!   for the templates (CSTAF) and once for the search regions (CSTCF).
//! * [`DstaLayer`]: cross-branch adapters on the RGB search tokens inside an
//!   encoder layer.
//!
//! Every cross-branch module uses the same weights in both directions, so
//! exchanging the two branches exchanges the outputs.

use candle_core::Tensor;

use crate::encoder::{Modality, TokenSequence};
use crate::error::{CfbtError, Result};
use crate::nn::{ops, ForwardCtx, Init, LayerNorm, Linear, Param, ParamBuilder, ParamGroup};

/// Bottleneck adapter `up(mid(down(x)))`.
#[derive(Debug, Clone)]
pub struct Ba {
    pub down: Linear,
    pub mid: Linear,
    pub up: Linear,
}

impl Ba {
    /// A fresh adapter; `up` starts at zero so its contribution is nil.
    pub fn new(b: &mut ParamBuilder, name: &str, group: ParamGroup, dim: usize, bottleneck: usize) -> Result<Self> {
        Self::with_up_init(b, name, group, dim, bottleneck, Init::Zeros)
    }

    pub fn with_up_init(
        b: &mut ParamBuilder,
        name: &str,
        group: ParamGroup,
        dim: usize,
        bottleneck: usize,
        up_init: Init,
    ) -> Result<Self> {
        let xavier = |fan_in: usize, fan_out: usize| Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt());
        Ok(Self {
            down: Linear::with_init(b, &format!("{name}.down"), group, dim, bottleneck, xavier(dim, bottleneck))?,
            mid: Linear::with_init(b, &format!("{name}.mid"), group, bottleneck, bottleneck, xavier(bottleneck, bottleneck))?,
            up: Linear::with_init(b, &format!("{name}.up"), group, bottleneck, dim, up_init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.up.forward(&self.mid.forward(&self.down.forward(x)?)?)
    }

    pub fn params(&self) -> Vec<&Param> {
        [&self.down, &self.mid, &self.up].into_iter().flat_map(|l| l.params()).collect()
    }
}

/// Additive prompt computed from the other modality's tokens.
pub fn ba_forward(other_modality: &Tensor, params: &Ba) -> Result<Tensor> {
    params.forward(other_modality)
}

/// Hourglass cross-fusion: shared `down`, single-head cross-attention at the
/// reduced width, shared `up`, dropout and residual.
///
/// Queries and keys/values pass through separate input norms before `down`.
#[derive(Debug, Clone)]
pub struct Cstf {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub down: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub up: Linear,
    pub drop_rate: f64,
}

impl Cstf {
    pub fn new(b: &mut ParamBuilder, name: &str, group: ParamGroup, dim: usize, down_factor: usize, drop_rate: f64) -> Result<Self> {
        if down_factor == 0 || !dim.is_multiple_of(down_factor) {
            return Err(CfbtError::Config(format!("down_factor {down_factor} does not divide {dim}")));
        }
        let r = dim / down_factor;
        Ok(Self {
            norm_q: LayerNorm::new(b, &format!("{name}.norm_q"), group, dim)?,
            norm_kv: LayerNorm::new(b, &format!("{name}.norm_kv"), group, dim)?,
            down: Linear::new(b, &format!("{name}.down"), group, dim, r)?,
            q: Linear::new(b, &format!("{name}.attn.q"), group, r, r)?,
            k: Linear::new(b, &format!("{name}.attn.k"), group, r, r)?,
            v: Linear::new(b, &format!("{name}.attn.v"), group, r, r)?,
            o: Linear::new(b, &format!("{name}.attn.o"), group, r, r)?,
            up: Linear::zeros(b, &format!("{name}.up"), group, r, dim)?,
            drop_rate,
        })
    }

    pub fn reduced_dim(&self) -> Result<usize> {
        Ok(self.down.weight.var().dim(0)?)
    }

    /// Up-projected update for `query` attending to `context`, before dropout.
    fn update(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let qd = self.down.forward(&self.norm_q.forward(query)?)?;
        let cd = self.down.forward(&self.norm_kv.forward(context)?)?;
        let q = self.q.forward(&qd)?;
        let k = self.k.forward(&cd)?;
        let v = self.v.forward(&cd)?;
        let scale = 1.0 / (self.reduced_dim()? as f64).sqrt();
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = ops::softmax_last_dim(&logits)?;
        let mixed = self.o.forward(&attn.matmul(&v)?)?;
        self.up.forward(&mixed)
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        let (ba, _, da) = a.dims3()?;
        let (bb, _, db) = b.dims3()?;
        if da != db || ba != bb {
            return Err(CfbtError::Shape(format!(
                "cross-fusion inputs {:?} and {:?} disagree on batch or width",
                a.dims(),
                b.dims()
            )));
        }
        let ua = self.update(a, b)?;
        let ub = self.update(b, a)?;
        let a2 = (a + ctx.dropout(&ua, self.drop_rate)?)?;
        let b2 = (b + ctx.dropout(&ub, self.drop_rate)?)?;
        Ok((a2, b2))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.norm_q.params();
        out.extend(self.norm_kv.params());
        for l in [&self.down, &self.q, &self.k, &self.v, &self.o, &self.up] {
            out.extend(l.params());
        }
        out
    }
}

pub fn cstf_forward(a: &Tensor, b: &Tensor, params: &Cstf, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
    params.forward(a, b, ctx)
}

fn check_rgb_pair(i: &TokenSequence, o: &TokenSequence, what: &str) -> Result<()> {
    if i.modality != Modality::Rgb || o.modality != Modality::Rgb {
        return Err(CfbtError::Contract(format!(
            "{what} fuses RGB streams only, got {} and {}",
            i.modality, o.modality
        )));
    }
    if i.n_template != o.n_template || i.n_search != o.n_search {
        return Err(CfbtError::Shape(format!(
            "{what}: branch layouts differ ({}+{} vs {}+{})",
            i.n_template, i.n_search, o.n_template, o.n_search
        )));
    }
    Ok(())
}

/// Fuses the template rows of the two RGB branches; search rows are untouched.
pub fn apply_cstaf(
    i: &TokenSequence,
    o: &TokenSequence,
    params: &Cstf,
    ctx: &mut ForwardCtx,
) -> Result<(TokenSequence, TokenSequence)> {
    check_rgb_pair(i, o, "CSTAF")?;
    let (zi, zo) = params.forward(&i.template_rows()?, &o.template_rows()?, ctx)?;
    Ok((
        i.with_parts(&zi, &i.search_rows()?)?,
        o.with_parts(&zo, &o.search_rows()?)?,
    ))
}

/// Fuses the search rows of the two RGB branches; template rows are untouched.
pub fn apply_cstcf(
    i: &TokenSequence,
    o: &TokenSequence,
    params: &Cstf,
    ctx: &mut ForwardCtx,
) -> Result<(TokenSequence, TokenSequence)> {
    check_rgb_pair(i, o, "CSTCF")?;
    let (si, so) = params.forward(&i.search_rows()?, &o.search_rows()?, ctx)?;
    Ok((
        i.with_parts(&i.template_rows()?, &si)?,
        o.with_parts(&o.template_rows()?, &so)?,
    ))
}

/// Cross-branch adapters of one encoder layer, at the post-attention and
/// post-MLP residual points. Each layer owns its own parameters.
#[derive(Debug, Clone)]
pub struct DstaLayer {
    pub layer: usize,
    pub attn: Ba,
    pub mlp: Ba,
}

impl DstaLayer {
    pub fn new(b: &mut ParamBuilder, layer: usize, dim: usize, bottleneck: usize) -> Result<Self> {
        let g = ParamGroup::Dsta;
        Ok(Self {
            layer,
            attn: Ba::new(b, &format!("dsta.{layer}.attn"), g, dim, bottleneck)?,
            mlp: Ba::new(b, &format!("dsta.{layer}.mlp"), g, dim, bottleneck)?,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.attn.params();
        out.extend(self.mlp.params());
        out
    }
}

/// `S_i += BA(S_o)`, `S_o += BA(S_i)` on the RGB search rows; template rows
/// pass through.
pub fn dsta_fuse(i: &TokenSequence, o: &TokenSequence, ba: &Ba) -> Result<(TokenSequence, TokenSequence)> {
    check_rgb_pair(i, o, "DSTA")?;
    let si = i.search_rows()?;
    let so = o.search_rows()?;
    let si2 = (&si + ba.forward(&so)?)?;
    let so2 = (&so + ba.forward(&si)?)?;
    Ok((
        i.with_parts(&i.template_rows()?, &si2)?,
        o.with_parts(&o.template_rows()?, &so2)?,
    ))
}
