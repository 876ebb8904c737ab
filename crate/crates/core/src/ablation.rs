//! The component lattice and layer-schedule variants, each trained briefly
//! and summarized in one table row.

use std::fmt::Write as _;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{FrameCache, RgbtSequence};
use crate::error::Result;
use crate::loss::total_loss;
use crate::model::CfbtModel;
use crate::nn::{ForwardCtx, ParamGroup};
use crate::train::{batch_inputs, sample_pairs, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub cstaf: bool,
    pub cstcf: bool,
    pub cstf_layers: Vec<usize>,
    pub dsta_layers: Vec<usize>,
}

impl Variant {
    fn new(name: &str, cstaf: bool, cstcf: bool, cstf_layers: &[usize], dsta_layers: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            cstaf,
            cstcf,
            cstf_layers: cstf_layers.to_vec(),
            dsta_layers: dsta_layers.to_vec(),
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.cstaf = self.cstaf;
        cfg.cstcf = self.cstcf;
        cfg.cstf_layers = if self.cstaf || self.cstcf { self.cstf_layers.clone() } else { Vec::new() };
        cfg.dsta_layers = self.dsta_layers.clone();
        cfg
    }
}

/// Component rows: baseline, +CSTAF, +CSTCF, both, and the full model, on
/// the schedule of `base`.
pub fn component_lattice(base: &ModelConfig) -> Vec<Variant> {
    let (c, d) = (&base.cstf_layers, &base.dsta_layers);
    vec![
        Variant::new("baseline", false, false, &[], &[]),
        Variant::new("+cstaf", true, false, c, &[]),
        Variant::new("+cstcf", false, true, c, &[]),
        Variant::new("+cstaf+cstcf", true, true, c, &[]),
        Variant::new("full", true, true, c, d),
    ]
}

/// Layer-insertion variants: partial CSTF schedules with all DSTA layers,
/// then partial DSTA schedules with all CSTF layers, then everything.
pub fn layer_schedules() -> Vec<Variant> {
    let all_c = [4, 7, 10];
    let all_d = [5, 6, 11];
    let mut out = Vec::new();
    for c in [&[4][..], &[4, 7], &[4, 10]] {
        out.push(Variant::new(&format!("cstf{c:?}"), true, true, c, &all_d));
    }
    for d in [&[5][..], &[5, 6], &[5, 11]] {
        out.push(Variant::new(&format!("dsta{d:?}"), true, true, &all_c, d));
    }
    out.push(Variant::new("cstf[4, 7, 10] dsta[5, 6, 11]", true, true, &all_c, &all_d));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub trainable: usize,
    pub total: usize,
    pub by_group: [usize; 3],
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub mean_loss: f64,
    /// False when the variant has nothing to train and only forward passes ran.
    pub trained: bool,
}

/// Forward-only loss on the batches a trainer would draw.
fn forward_losses(model: &CfbtModel, dataset: &[RgbtSequence], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut cache = FrameCache::new(cfg.cache_frames);
    let mc = model.config();
    (0..cfg.total_steps())
        .map(|step| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(step as u64);
            let batch = sample_pairs(dataset, cfg, mc, &mut cache, &mut rng)?;
            let (t, s) = batch_inputs(model, &batch)?;
            let out = model.forward(&t, &s, &mut ForwardCtx::train(rng.random()))?;
            let gts: Vec<_> = batch.iter().map(|p| p.gt).collect();
            Ok(total_loss(&out, &gts, mc.lambda1, mc.lambda2)?.breakdown.total)
        })
        .collect()
}

pub fn run_variant(variant: &Variant, base: &ModelConfig, dataset: &[RgbtSequence], cfg: &TrainConfig) -> Result<AblationRow> {
    let mc = variant.apply(base);
    mc.validate()?;
    let model = CfbtModel::new(&mc, DType::F32, Some(cfg.seed))?;
    model.apply_freeze_policy(cfg.freeze_policy);
    let counts = model.count_parameters();
    let trained = counts.trainable > 0;
    let losses: Vec<f64> = if trained {
        Trainer::new(&model, dataset, cfg)?.run(None)?.iter().map(|l| l.total).collect()
    } else {
        forward_losses(&model, dataset, cfg)?
    };
    let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok(AblationRow {
        variant: variant.clone(),
        trainable: counts.trainable,
        total: counts.total,
        by_group: [
            counts.group(ParamGroup::Cstaf),
            counts.group(ParamGroup::Cstcf),
            counts.group(ParamGroup::Dsta),
        ],
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        last_loss: losses.last().copied().unwrap_or(f64::NAN),
        mean_loss: mean,
        trained,
    })
}

pub fn run_ablation(variants: &[Variant], base: &ModelConfig, dataset: &[RgbtSequence], cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            log::info!("ablation variant {}", v.name);
            run_variant(v, base, dataset, cfg)
        })
        .collect()
}

fn layers(v: &[usize]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Tab-separated comparison table with a header line.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant\tcstaf\tcstcf\tcstf_layers\tdsta_layers\ttrainable\tcstaf_params\tcstcf_params\tdsta_params\ttotal\tsteps\tfirst_loss\tlast_loss\tmean_loss\tmode\n",
    );
    for r in rows {
        let v = &r.variant;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            v.name,
            v.cstaf,
            v.cstcf,
            layers(&v.cstf_layers),
            layers(&v.dsta_layers),
            r.trainable,
            r.by_group[0],
            r.by_group[1],
            r.by_group[2],
            r.total,
            r.steps,
            r.first_loss,
            r.last_loss,
            r.mean_loss,
            if r.trained { "train" } else { "forward-only" }
        );
    }
    out
}
