//! The assembled dual-branch, dual-modality tracker network.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::{HeadInput, ModelConfig};
use crate::encoder::{Branch, EncoderBlock, Modality, PatchEmbed, Role, TokenSequence};
use crate::error::{CfbtError, Result};
use crate::fusion::{apply_cstaf, apply_cstcf, dsta_fuse, Ba, Cstf, DstaLayer};
use crate::head::{Head, HeadOutput};
use crate::nn::{ForwardCtx, Init, LayerNorm, ParamBuilder, ParamGroup, ParamStore};

/// Which parameters the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Only CSTAF, CSTCF and DSTA are trainable.
    PaperDefault,
    /// Everything is trainable.
    None,
}

impl std::str::FromStr for FreezePolicy {
    type Err = CfbtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_default" => Ok(FreezePolicy::PaperDefault),
            "none" => Ok(FreezePolicy::None),
            _ => Err(CfbtError::Config(format!("unknown freeze policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FreezePolicy::PaperDefault => "paper_default",
            FreezePolicy::None => "none",
        })
    }
}

/// Image batches for the four template streams, each `(batch, 3, W_z, W_z)`.
#[derive(Debug, Clone)]
pub struct TemplateInputs {
    pub initial_rgb: Tensor,
    pub initial_tir: Tensor,
    pub online_rgb: Tensor,
    pub online_tir: Tensor,
}

impl TemplateInputs {
    /// Exchanges the initial and online templates.
    pub fn swapped(&self) -> Self {
        Self {
            initial_rgb: self.online_rgb.clone(),
            initial_tir: self.online_tir.clone(),
            online_rgb: self.initial_rgb.clone(),
            online_tir: self.initial_tir.clone(),
        }
    }
}

/// Search-region batches for both modalities, each `(batch, 3, W_x, W_x)`.
#[derive(Debug, Clone)]
pub struct SearchInputs {
    pub rgb: Tensor,
    pub tir: Tensor,
}

/// Final normalized token streams, each `(batch, N_z + N_x, D)`.
#[derive(Debug, Clone)]
pub struct StreamFeatures {
    pub initial_rgb: TokenSequence,
    pub online_rgb: TokenSequence,
    pub initial_tir: TokenSequence,
    pub online_tir: TokenSequence,
}

impl StreamFeatures {
    /// Search rows of one branch summed over the modalities the head consumes.
    pub fn branch_search(&self, branch: Branch, input: HeadInput) -> Result<Tensor> {
        let (rgb, tir) = match branch {
            Branch::Initial => (&self.initial_rgb, &self.initial_tir),
            Branch::Online => (&self.online_rgb, &self.online_tir),
        };
        match input {
            HeadInput::All => Ok((rgb.search_rows()? + tir.search_rows()?)?),
            HeadInput::Rgb => rgb.search_rows(),
        }
    }

    /// The head input: both branches added element-wise.
    pub fn summed_search(&self, input: HeadInput) -> Result<Tensor> {
        Ok((self.branch_search(Branch::Initial, input)? + self.branch_search(Branch::Online, input)?)?)
    }
}

/// Cross-modal adapters of one encoder layer, shared by both branches and
/// used in both modality directions.
#[derive(Debug, Clone)]
pub struct ModalityAdapters {
    pub attn: Ba,
    pub mlp: Ba,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    /// `(total, trainable)` per group.
    pub by_group: BTreeMap<ParamGroup, (usize, usize)>,
}

impl ParamCounts {
    pub fn group(&self, g: ParamGroup) -> usize {
        self.by_group.get(&g).map(|c| c.0).unwrap_or(0)
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct CfbtModel {
    config: ModelConfig,
    store: ParamStore,
    device: Device,
    dtype: DType,
    pub patch_embed: PatchEmbed,
    pub blocks: Vec<EncoderBlock>,
    pub modality_adapters: Vec<ModalityAdapters>,
    pub final_norm: LayerNorm,
    pub cstaf: Option<Cstf>,
    pub cstcf: Option<Cstf>,
    pub dsta: Vec<DstaLayer>,
    pub head: Head,
}

impl CfbtModel {
    /// Builds the network with random weights (`seed`) or all zeros (`None`,
    /// for parameter audits). The paper-default freezing policy is applied.
    pub fn new(config: &ModelConfig, dtype: DType, seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut b = ParamBuilder::new(device.clone(), dtype, seed);
        let d = config.embed_dim;
        let patch_embed = PatchEmbed::new(&mut b, config)?;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut modality_adapters = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(EncoderBlock::new(&mut b, i, config)?);
            // stand-ins for pretrained cross-modal adapters, so nonzero
            let g = ParamGroup::ModalityBa;
            let r = config.ba_bottleneck;
            modality_adapters.push(ModalityAdapters {
                attn: Ba::with_up_init(&mut b, &format!("modality_ba.{i}.attn"), g, d, r, Init::TruncNormal(0.02))?,
                mlp: Ba::with_up_init(&mut b, &format!("modality_ba.{i}.mlp"), g, d, r, Init::TruncNormal(0.02))?,
            });
        }
        let final_norm = LayerNorm::new(&mut b, "encoder.norm", ParamGroup::Encoder, d)?;
        let has_cstf = !config.cstf_layers.is_empty();
        let cstaf = if config.cstaf && has_cstf {
            Some(Cstf::new(&mut b, "cstaf", ParamGroup::Cstaf, d, config.down_factor, config.drop_rate)?)
        } else {
            None
        };
        let cstcf = if config.cstcf && has_cstf {
            Some(Cstf::new(&mut b, "cstcf", ParamGroup::Cstcf, d, config.down_factor, config.drop_rate)?)
        } else {
            None
        };
        let dsta = config
            .dsta_layers
            .iter()
            .map(|&l| DstaLayer::new(&mut b, l, d, config.ba_bottleneck))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(&mut b, d, config.head_channels)?;
        let model = Self {
            config: config.clone(),
            store: b.finish(),
            device,
            dtype,
            patch_embed,
            blocks,
            modality_adapters,
            final_norm,
            cstaf,
            cstcf,
            dsta,
            head,
        };
        model.apply_freeze_policy(FreezePolicy::PaperDefault);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn apply_freeze_policy(&self, policy: FreezePolicy) {
        match policy {
            FreezePolicy::PaperDefault => self.store.set_trainable_where(|e| e.group.is_fusion()),
            FreezePolicy::None => self.store.set_trainable_where(|_| true),
        }
    }

    /// CSTAF parameters used after `layer` (1-based), if it fires there.
    pub fn cstaf_at(&self, layer: usize) -> Option<&Cstf> {
        self.cstaf.as_ref().filter(|_| self.config.cstf_layers.contains(&layer))
    }

    pub fn cstcf_at(&self, layer: usize) -> Option<&Cstf> {
        self.cstcf.as_ref().filter(|_| self.config.cstf_layers.contains(&layer))
    }

    pub fn dsta_at(&self, layer: usize) -> Option<&DstaLayer> {
        self.dsta.iter().find(|d| d.layer == layer)
    }

    /// The same network with the three fusion families removed. Parameters
    /// are shared with `self`.
    pub fn without_fusion(&self) -> Self {
        Self {
            config: self.config.without_fusion(),
            store: self.store.filtered(|e| !e.group.is_fusion()),
            cstaf: None,
            cstcf: None,
            dsta: Vec::new(),
            ..self.clone()
        }
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let mut by_group: BTreeMap<ParamGroup, (usize, usize)> = BTreeMap::new();
        for e in self.store.entries() {
            let n = e.param.elem_count();
            let slot = by_group.entry(e.group).or_insert((0, 0));
            slot.0 += n;
            if e.param.is_trainable() {
                slot.1 += n;
            }
        }
        ParamCounts {
            total: self.store.total(),
            trainable: self.store.trainable(),
            by_group,
        }
    }

    /// Name, shape and group of every parameter; the layout expected by
    /// checkpoints and by externally converted weights.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.store
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                shape: e.param.var().dims().to_vec(),
                group: e.group,
                trainable: e.param.is_trainable(),
            })
            .collect()
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::from("# name\tshape\tgroup\ttrainable\n");
        for e in self.manifest() {
            let shape = e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.name, shape, e.group, e.trainable);
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_text()).map_err(|e| CfbtError::io(path, e))
    }

    /// Runs the encoder and returns the four final token streams.
    pub fn forward_features(
        &self,
        templates: &TemplateInputs,
        search: &SearchInputs,
        ctx: &mut ForwardCtx,
    ) -> Result<StreamFeatures> {
        let cfg = &self.config;
        let batch = search.rgb.dim(0)?;
        let pe = &self.patch_embed;
        let s_rgb = pe.forward(&search.rgb, Role::Search)?;
        let s_tir = pe.forward(&search.tir, Role::Search)?;
        let zs = [
            pe.forward(&templates.initial_rgb, Role::Template)?,
            pe.forward(&templates.online_rgb, Role::Template)?,
            pe.forward(&templates.initial_tir, Role::Template)?,
            pe.forward(&templates.online_tir, Role::Template)?,
        ];
        for z in &zs {
            if z.dim(0)? != batch {
                return Err(CfbtError::Shape("template and search batches differ".into()));
            }
        }
        // streams stacked along the batch axis: [i_rgb, o_rgb, i_tir, o_tir]
        let z = Tensor::cat(&zs, 0)?;
        let s = Tensor::cat(&[&s_rgb, &s_rgb, &s_tir, &s_tir], 0)?;
        let mut x = Tensor::cat(&[z, s], 1)?;
        let nz = cfg.n_template();
        let nx = cfg.n_search();

        for (idx, (block, adapters)) in self.blocks.iter().zip(&self.modality_adapters).enumerate() {
            let layer = idx + 1;
            let h = block.norm1.forward(&x)?;
            let attn = block.attn.forward(&h)?;
            let prompt = adapters.attn.forward(&swap_modalities(&h, batch)?)?;
            x = ((&x + attn)? + prompt)?;
            if let Some(d) = self.dsta_at(layer) {
                x = self.fuse_rgb(&x, batch, nz, nx, |i, o| dsta_fuse(i, o, &d.attn))?;
            }

            let h = block.norm2.forward(&x)?;
            let mlp = block.mlp.forward(&h)?;
            let prompt = adapters.mlp.forward(&swap_modalities(&h, batch)?)?;
            x = ((&x + mlp)? + prompt)?;
            if let Some(d) = self.dsta_at(layer) {
                x = self.fuse_rgb(&x, batch, nz, nx, |i, o| dsta_fuse(i, o, &d.mlp))?;
            }

            if let Some(c) = self.cstaf_at(layer) {
                x = self.fuse_rgb(&x, batch, nz, nx, |i, o| apply_cstaf(i, o, c, ctx))?;
            }
            if let Some(c) = self.cstcf_at(layer) {
                x = self.fuse_rgb(&x, batch, nz, nx, |i, o| apply_cstcf(i, o, c, ctx))?;
            }
        }

        let x = self.final_norm.forward(&x)?;
        let stream = |k: usize, branch, modality| -> Result<TokenSequence> {
            Ok(TokenSequence {
                tokens: x.narrow(0, k * batch, batch)?,
                n_template: nz,
                n_search: nx,
                branch,
                modality,
            })
        };
        Ok(StreamFeatures {
            initial_rgb: stream(0, Branch::Initial, Modality::Rgb)?,
            online_rgb: stream(1, Branch::Online, Modality::Rgb)?,
            initial_tir: stream(2, Branch::Initial, Modality::Tir)?,
            online_tir: stream(3, Branch::Online, Modality::Tir)?,
        })
    }

    pub fn forward(&self, templates: &TemplateInputs, search: &SearchInputs, ctx: &mut ForwardCtx) -> Result<HeadOutput> {
        let feats = self.forward_features(templates, search, ctx)?;
        self.head.forward(&feats.summed_search(self.config.head_input)?)
    }

    /// Applies a fusion on the RGB pair of the stacked streams.
    fn fuse_rgb<F>(&self, x: &Tensor, batch: usize, nz: usize, nx: usize, f: F) -> Result<Tensor>
    where
        F: FnOnce(&TokenSequence, &TokenSequence) -> Result<(TokenSequence, TokenSequence)>,
    {
        let seq = |k: usize, branch| -> Result<TokenSequence> {
            Ok(TokenSequence {
                tokens: x.narrow(0, k * batch, batch)?,
                n_template: nz,
                n_search: nx,
                branch,
                modality: Modality::Rgb,
            })
        };
        let (i, o) = f(&seq(0, Branch::Initial)?, &seq(1, Branch::Online)?)?;
        let tir = x.narrow(0, 2 * batch, 2 * batch)?;
        Ok(Tensor::cat(&[&i.tokens, &o.tokens, &tir], 0)?)
    }
}

/// `[rgb; tir] -> [tir; rgb]` over the stacked batch axis.
fn swap_modalities(x: &Tensor, batch: usize) -> Result<Tensor> {
    let rgb = x.narrow(0, 0, 2 * batch)?;
    let tir = x.narrow(0, 2 * batch, 2 * batch)?;
    Ok(Tensor::cat(&[tir, rgb], 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_freezing_trains_only_fusion() {
        let m = CfbtModel::new(&ModelConfig::tiny(), DType::F32, Some(0)).unwrap();
        for e in m.store().entries() {
            assert_eq!(e.param.is_trainable(), e.group.is_fusion(), "{}", e.name);
        }
        m.apply_freeze_policy(FreezePolicy::None);
        assert_eq!(m.count_parameters().trainable, m.count_parameters().total);
    }

    #[test]
    fn no_fusion_means_nothing_trainable() {
        let cfg = ModelConfig::tiny().without_fusion();
        let m = CfbtModel::new(&cfg, DType::F32, Some(0)).unwrap();
        assert_eq!(m.count_parameters().trainable, 0);
        let full = CfbtModel::new(&ModelConfig::tiny(), DType::F32, Some(0)).unwrap();
        assert_eq!(full.without_fusion().count_parameters().trainable, 0);
    }

    #[test]
    fn manifest_lists_every_parameter_once() {
        let m = CfbtModel::new(&ModelConfig::tiny(), DType::F32, None).unwrap();
        let manifest = m.manifest();
        assert_eq!(manifest.len(), m.store().entries().len());
        let mut names: Vec<_> = manifest.iter().map(|e| e.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), manifest.len());
        let text = m.manifest_text();
        assert!(text.contains("cstaf.down.weight\t4x8\tcstaf\ttrue"));
    }

    #[test]
    fn freeze_policy_parses() {
        assert_eq!("paper_default".parse::<FreezePolicy>().unwrap(), FreezePolicy::PaperDefault);
        assert_eq!("none".parse::<FreezePolicy>().unwrap(), FreezePolicy::None);
        assert!("all".parse::<FreezePolicy>().is_err());
    }
}
