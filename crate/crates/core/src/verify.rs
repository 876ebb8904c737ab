//! Invariant and oracle checks shared by the `verify` command and the test
//! suites. Each check reports a pass/fail line with a short measurement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bbox::BBox;
use crate::checkpoint::{param_hash, Checkpoint};
use crate::config::ModelConfig;
use crate::crop::{crop_around, CropRecord};
use crate::encoder::{Branch, Modality, TokenSequence};
use crate::error::{CfbtError, Result};
use crate::eval::{
    center_error, compute_metrics, normalized_center_error, npr_thresholds, overlap, precision_thresholds,
    success_thresholds, NPR_INDEX, PR_INDEX,
};
use crate::fusion::{dsta_fuse, Ba, Cstf};
use crate::head::{HeadOutput, ScoreMaps};
use crate::loss::total_loss;
use crate::model::{CfbtModel, FreezePolicy, SearchInputs, TemplateInputs};
use crate::nn::{ForwardCtx, Linear, Param, ParamBuilder, ParamGroup};
use crate::synth::{generate_dataset, generate_synthetic, SynthConfig};
use crate::tracking::{decode_box, track_sequence, CropPair, ResponseModel, TrackerSettings};
use crate::train::{smoothed, training_fit_iou, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    /// Runs `f`; an error becomes a failed check.
    pub fn run(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Self {
        match f() {
            Ok((ok, detail)) => Self::new(name, ok, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

// ---------- naive reference implementations on nested vectors ----------

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Result<Mat> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn naive_linear(x: &Mat, l: &Linear) -> Result<Mat> {
    let w = to_mat(l.weight.var().as_tensor())?;
    let b = match &l.bias {
        Some(b) => to_vec(b.var().as_tensor())?,
        None => vec![0.0; w.len()],
    };
    Ok(x
        .iter()
        .map(|row| {
            w.iter()
                .zip(&b)
                .map(|(wr, bias)| wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>() + bias)
                .collect()
        })
        .collect())
}

fn naive_layer_norm(x: &Mat, w: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) / (var + eps).sqrt() * w[k] + b[k])
                .collect()
        })
        .collect()
}

fn naive_norm(x: &Mat, ln: &crate::nn::LayerNorm) -> Result<Mat> {
    Ok(naive_layer_norm(
        x,
        &to_vec(ln.weight.var().as_tensor())?,
        &to_vec(ln.bias.var().as_tensor())?,
        ln.eps,
    ))
}

fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn naive_ba(x: &Mat, ba: &Ba) -> Result<Mat> {
    naive_linear(&naive_linear(&naive_linear(x, &ba.down)?, &ba.mid)?, &ba.up)
}

/// `up(o(softmax(q k^T / sqrt r) v))` with every product written out.
fn naive_cstf_update(query: &Mat, context: &Mat, c: &Cstf) -> Result<Mat> {
    let qd = naive_linear(&naive_norm(query, &c.norm_q)?, &c.down)?;
    let cd = naive_linear(&naive_norm(context, &c.norm_kv)?, &c.down)?;
    let q = naive_linear(&qd, &c.q)?;
    let k = naive_linear(&cd, &c.k)?;
    let v = naive_linear(&cd, &c.v)?;
    let r = q[0].len() as f64;
    let mut mixed = Vec::with_capacity(q.len());
    for qi in &q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / r.sqrt())
            .collect();
        let p = naive_softmax(&logits);
        let row: Vec<f64> = (0..v[0].len())
            .map(|d| p.iter().zip(&v).map(|(pj, vj)| pj * vj[d]).sum())
            .collect();
        mixed.push(row);
    }
    naive_linear(&naive_linear(&mixed, &c.o)?, &c.up)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Overwrites parameters with random values; LayerNorm weights stay near one.
pub fn randomize(params: &[&Param], rng: &mut ChaCha8Rng, std: f64) -> Result<()> {
    for p in params {
        let var = p.var();
        let noise = random_tensor(rng, var.dims(), std, var.dtype())?;
        let ones_like = to_vec(var.as_tensor())?.iter().all(|&v| v == 1.0);
        let next = if ones_like { (noise + 1.0)? } else { noise };
        var.set(&next)?;
    }
    Ok(())
}

fn fusion_params(m: &CfbtModel) -> Vec<&Param> {
    let mut out = Vec::new();
    if let Some(c) = &m.cstaf {
        out.extend(c.params());
    }
    if let Some(c) = &m.cstcf {
        out.extend(c.params());
    }
    for d in &m.dsta {
        out.extend(d.params());
    }
    out
}

/// Random normalized-image inputs of the configured sizes.
pub fn random_inputs(cfg: &ModelConfig, batch: usize, dtype: DType, seed: u64) -> Result<(TemplateInputs, SearchInputs)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z, x) = (cfg.template_size, cfg.search_size);
    let mut t = |s: usize| random_tensor(&mut rng, &[batch, 3, s, s], 1.0, dtype);
    Ok((
        TemplateInputs {
            initial_rgb: t(z)?,
            initial_tir: t(z)?,
            online_rgb: t(z)?,
            online_tir: t(z)?,
        },
        SearchInputs { rgb: t(x)?, tir: t(x)? },
    ))
}

fn max_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_scalar::<f64>()?)
}

fn head_diff(a: &HeadOutput, b: &HeadOutput) -> Result<f64> {
    Ok(max_diff(&a.cls, &b.cls)?
        .max(max_diff(&a.offset, &b.offset)?)
        .max(max_diff(&a.size, &b.size)?))
}

// ---------------------------------- checks ----------------------------------

fn within(actual: usize, expected: f64, tol: f64) -> bool {
    ((actual as f64 - expected) / expected).abs() <= tol
}

/// Trainable counts of the paper-scale lattice against the published figures.
pub fn param_audit() -> Check {
    Check::run("parameter audit (paper scale)", || {
        let base = ModelConfig::paper();
        let count = |cstaf: bool, cstcf: bool, dsta: bool| -> Result<(usize, usize)> {
            let mut cfg = base.clone();
            cfg.cstaf = cstaf;
            cfg.cstcf = cstcf;
            if !dsta {
                cfg.dsta_layers.clear();
            }
            let c = CfbtModel::new(&cfg, DType::F32, None)?.count_parameters();
            Ok((c.trainable, c.total))
        };
        let a = count(true, false, false)?.0;
        let c = count(false, true, false)?.0;
        let ac = count(true, true, false)?.0;
        let (full, total) = count(true, true, true)?;
        let frac = full as f64 / total as f64;
        let ok = within(a, 90e3, 0.05)
            && within(c, 90e3, 0.05)
            && within(ac, 180e3, 0.05)
            && within(full, 259e3, 0.05)
            && frac < 0.003
            && count(false, false, false)?.0 == 0;
        Ok((
            ok,
            format!("CSTAF {a}, CSTCF {c}, both {ac}, full {full} of {total} ({:.3}%)", 100.0 * frac),
        ))
    })
}

/// Full model with zero-initialized fusion up-projections against the
/// fusion-free baseline, in single and double precision.
pub fn identity_at_init(cfg: &ModelConfig, seed: u64) -> Check {
    Check::run("identity at initialization", || {
        let mut worst = [0.0f64; 2];
        for (k, dt) in [DType::F32, DType::F64].into_iter().enumerate() {
            let full = CfbtModel::new(cfg, dt, Some(seed))?;
            let base = full.without_fusion();
            let (t, s) = random_inputs(cfg, 2, dt, seed + 1)?;
            let a = full.forward(&t, &s, &mut ForwardCtx::eval())?;
            let b = base.forward(&t, &s, &mut ForwardCtx::eval())?;
            worst[k] = head_diff(&a, &b)?;
        }
        Ok((
            worst[0] < 1e-6 && worst[1] == 0.0,
            format!("max |d| f32 {:.3e}, f64 {:.3e}", worst[0], worst[1]),
        ))
    })
}

/// Analytic gradient of `f` against central differences, per parameter
/// tensor; returns the worst relative error.
fn grad_rel_error(params: &[(String, Var)], f: &dyn Fn() -> Result<Tensor>, h: f64, max_coords: usize) -> Result<(f64, String)> {
    let grads = f()?.backward()?;
    let mut worst = (0.0, String::new());
    for (name, var) in params {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let base = to_vec(var.as_tensor())?;
        let n = base.len();
        let stride = n.div_ceil(max_coords).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for k in (0..n).step_by(stride) {
            let mut v = base.clone();
            v[k] = base[k] + h;
            var.set(&Tensor::from_vec(v.clone(), var.dims(), &Device::Cpu)?)?;
            let up = f()?.to_scalar::<f64>()?;
            v[k] = base[k] - h;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu)?)?;
            let down = f()?.to_scalar::<f64>()?;
            let numeric = (up - down) / (2.0 * h);
            diff2 += (analytic[k] - numeric).powi(2);
            a2 += analytic[k].powi(2);
            n2 += numeric.powi(2);
        }
        var.set(&Tensor::from_vec(base, var.dims(), &Device::Cpu)?)?;
        let scale = a2.sqrt().max(n2.sqrt());
        // tensors with a vanishing gradient (key biases under softmax) are
        // judged on absolute error
        let rel = diff2.sqrt() / scale.max(1e-3);
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    Ok(worst)
}

/// Central-difference gradient check of every CSTAF, CSTCF and DSTA tensor
/// (through the full encoder) and of the total loss with respect to the
/// head maps, in double precision.
pub fn gradient_check(seeds: &[u64], h: f64) -> Check {
    Check::run("gradient correctness", || {
        let cfg = ModelConfig::tiny();
        let mut worst = (0.0f64, String::new());
        let mut tensors = 0;
        for &seed in seeds {
            let model = CfbtModel::new(&cfg, DType::F64, Some(seed))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
            randomize(&fusion_params(&model), &mut rng, 0.3)?;
            let (t, s) = random_inputs(&cfg, 2, DType::F64, seed + 7)?;
            let l = cfg.n_template() + cfg.n_search();
            let probes: Vec<Tensor> = (0..4)
                .map(|_| random_tensor(&mut rng, &[2, l, cfg.embed_dim], 1.0, DType::F64))
                .collect::<Result<_>>()?;
            let objective = || -> Result<Tensor> {
                let f = model.forward_features(&t, &s, &mut ForwardCtx::eval())?;
                let streams = [&f.initial_rgb, &f.online_rgb, &f.initial_tir, &f.online_tir];
                let mut acc = Tensor::zeros((), DType::F64, &Device::Cpu)?;
                for (st, p) in streams.iter().zip(&probes) {
                    acc = (acc + (&st.tokens * p)?.sum_all()?)?;
                }
                Ok(acc)
            };
            let params: Vec<(String, Var)> = model
                .store()
                .entries()
                .iter()
                .filter(|e| e.group.is_fusion())
                .map(|e| (e.name.clone(), e.param.var().clone()))
                .collect();
            tensors += params.len();
            let w = grad_rel_error(&params, &objective, h, 24)?;
            if w.0 >= worst.0 {
                worst = w;
            }

            // total loss with respect to its inputs
            let grid = cfg.search_grid();
            let mk = |c: usize, rng: &mut ChaCha8Rng| -> Result<Var> {
                let v: Vec<f64> = (0..2 * c * grid * grid).map(|_| rng.random_range(0.1..0.9)).collect();
                Ok(Var::from_tensor(&Tensor::from_vec(v, (2, c, grid, grid), &Device::Cpu)?)?)
            };
            let (cls, off, size) = (mk(1, &mut rng)?, mk(2, &mut rng)?, mk(2, &mut rng)?);
            let gts = [
                BBox::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), 0.3, 0.25),
                BBox::new(rng.random_range(0.3..0.5), rng.random_range(0.2..0.5), 0.2, 0.35),
            ];
            let loss_fn = || -> Result<Tensor> {
                let head = HeadOutput {
                    cls: cls.as_tensor().clone(),
                    offset: off.as_tensor().clone(),
                    size: size.as_tensor().clone(),
                };
                Ok(total_loss(&head, &gts, 2.0, 5.0)?.total)
            };
            let loss_params = vec![
                ("loss.cls".to_string(), cls.clone()),
                ("loss.offset".to_string(), off.clone()),
                ("loss.size".to_string(), size.clone()),
            ];
            tensors += loss_params.len();
            let w = grad_rel_error(&loss_params, &loss_fn, h, 64)?;
            if w.0 >= worst.0 {
                worst = w;
            }
        }
        Ok((
            worst.0 < 1e-4,
            format!("{} seeds, {tensors} tensors, worst relative error {:.2e} ({})", seeds.len(), worst.0, worst.1),
        ))
    })
}

/// CSTF, BA and DSTA tensors against element-wise reference loops.
pub fn oracle_equivalence(seeds: &[u64]) -> Check {
    Check::run("oracle equivalence (cross-attention, BA)", || {
        let mut worst = 0.0f64;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, la, lb) = (12, 5, 7);
            let mut b = ParamBuilder::new(Device::Cpu, DType::F64, Some(seed));
            let cstf = Cstf::new(&mut b, "c", ParamGroup::Cstaf, d, 3, 0.0)?;
            let ba = Ba::new(&mut b, "ba", ParamGroup::Dsta, d, 4)?;
            let entries = b.finish();
            let all: Vec<&Param> = entries.entries().iter().map(|e| &e.param).collect();
            randomize(&all, &mut rng, 0.5)?;
            let a = random_tensor(&mut rng, &[1, la, d], 1.0, DType::F64)?;
            let c = random_tensor(&mut rng, &[1, lb, d], 1.0, DType::F64)?;
            let (a2, c2) = cstf.forward(&a, &c, &mut ForwardCtx::eval())?;
            let (am, cm) = (to_mat(&a.get(0)?)?, to_mat(&c.get(0)?)?);
            let ref_a = add(&am, &naive_cstf_update(&am, &cm, &cstf)?);
            let ref_c = add(&cm, &naive_cstf_update(&cm, &am, &cstf)?);
            worst = worst
                .max(max_abs_diff(&to_mat(&a2.get(0)?)?, &ref_a))
                .max(max_abs_diff(&to_mat(&c2.get(0)?)?, &ref_c));

            let y = ba.forward(&a)?;
            worst = worst.max(max_abs_diff(&to_mat(&y.get(0)?)?, &naive_ba(&am, &ba)?));

            // DSTA on assembled sequences: search rows exchange prompts
            let (nz, nx) = (2, 3);
            let mkseq = |t: &Tensor, branch| TokenSequence {
                tokens: t.clone(),
                n_template: nz,
                n_search: nx,
                branch,
                modality: Modality::Rgb,
            };
            let i = random_tensor(&mut rng, &[1, nz + nx, d], 1.0, DType::F64)?;
            let o = random_tensor(&mut rng, &[1, nz + nx, d], 1.0, DType::F64)?;
            let (i2, o2) = dsta_fuse(&mkseq(&i, Branch::Initial), &mkseq(&o, Branch::Online), &ba)?;
            let (im, om) = (to_mat(&i.get(0)?)?, to_mat(&o.get(0)?)?);
            let mut ref_i = im.clone();
            let mut ref_o = om.clone();
            let pi = naive_ba(&om[nz..].to_vec(), &ba)?;
            let po = naive_ba(&im[nz..].to_vec(), &ba)?;
            for r in 0..nx {
                for k in 0..d {
                    ref_i[nz + r][k] += pi[r][k];
                    ref_o[nz + r][k] += po[r][k];
                }
            }
            worst = worst
                .max(max_abs_diff(&to_mat(&i2.tokens.get(0)?)?, &ref_i))
                .max(max_abs_diff(&to_mat(&o2.tokens.get(0)?)?, &ref_o));
        }
        Ok((worst < 1e-8, format!("{} seeds, max |d| {worst:.3e}", seeds.len())))
    })
}

/// Writes `count` synthetic sequences below `dir` for training checks.
pub fn synthetic_training_set(dir: &Path, count: usize, seed: u64) -> Result<Vec<crate::data::RgbtSequence>> {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir, count)
}

/// Trains under the paper-default policy and compares every frozen tensor
/// with its initial value; the optimizer must hold exactly the fusion set.
pub fn freezing_contract(model_cfg: &ModelConfig, train: &TrainConfig, steps: usize, data_dir: &Path) -> Check {
    Check::run("freezing contract", || {
        let dataset = synthetic_training_set(data_dir, 8, train.seed)?;
        let model = CfbtModel::new(model_cfg, DType::F32, Some(train.seed))?;
        let cfg = TrainConfig {
            freeze_policy: FreezePolicy::PaperDefault,
            max_steps: steps,
            ..train.clone()
        };
        let mut trainer = Trainer::new(&model, &dataset, &cfg)?;
        let frozen = |e: &crate::nn::ParamEntry| !e.param.is_trainable();
        let before: BTreeMap<String, Vec<u8>> = model
            .store()
            .frozen_entries()
            .map(|e| Ok((e.name.clone(), bytes(e.param.var().as_tensor())?)))
            .collect::<Result<_>>()?;
        let hash_before = param_hash(model.store(), frozen)?;
        let trainable_before = param_hash(model.store(), |e| e.param.is_trainable())?;

        let expected: BTreeSet<String> = model
            .store()
            .entries()
            .iter()
            .filter(|e| matches!(e.group, ParamGroup::Cstaf | ParamGroup::Cstcf | ParamGroup::Dsta))
            .map(|e| e.name.clone())
            .collect();
        let tracked: BTreeSet<String> = trainer.optimizer().names().map(String::from).collect();
        let counts = model.count_parameters();
        let table2 = counts.group(ParamGroup::Cstaf) + counts.group(ParamGroup::Cstcf) + counts.group(ParamGroup::Dsta);
        let set_ok = tracked == expected && trainer.optimizer().param_count() == table2 && counts.trainable == table2;

        let logs = trainer.run(None)?;
        let changed: Vec<String> = model
            .store()
            .frozen_entries()
            .filter(|e| bytes(e.param.var().as_tensor()).ok().as_ref() != before.get(&e.name))
            .map(|e| e.name.clone())
            .collect();
        let hash_ok = param_hash(model.store(), frozen)? == hash_before;
        let moved = param_hash(model.store(), |e| e.param.is_trainable())? != trainable_before;
        Ok((
            set_ok && changed.is_empty() && hash_ok && moved && logs.len() == steps,
            format!(
                "{} steps, {} frozen tensors unchanged ({} changed), optimizer tracks {} tensors / {} params (fusion set {}), trainable moved: {moved}",
                logs.len(),
                before.len() - changed.len(),
                changed.len(),
                tracked.len(),
                trainer.optimizer().param_count(),
                table2
            ),
        ))
    })
}

fn bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitOutcome {
    pub early_average: f64,
    pub final_smoothed: f64,
    pub fit_iou: f64,
    pub totals: Vec<f64>,
}

/// Trains on eight synthetic sequences and measures how far the loss falls
/// and how well boxes decode on training samples afterwards.
pub fn overfit_run(model_cfg: &ModelConfig, train: &TrainConfig, data_dir: &Path) -> Result<OverfitOutcome> {
    let dataset = synthetic_training_set(data_dir, 8, train.seed)?;
    let model = CfbtModel::new(model_cfg, DType::F32, Some(train.seed))?;
    let mut trainer = Trainer::new(&model, &dataset, train)?;
    let logs = trainer.run(None)?;
    let totals: Vec<f64> = logs.iter().map(|l| l.total).collect();
    let early = &totals[..totals.len().min(10)];
    let early_average = early.iter().sum::<f64>() / early.len() as f64;
    let final_smoothed = *smoothed(&totals, 50).last().unwrap_or(&f64::NAN);
    let fit_iou = training_fit_iou(&model, &dataset, train, 64, train.seed + 1)?;
    Ok(OverfitOutcome {
        early_average,
        final_smoothed,
        fit_iou,
        totals,
    })
}

pub fn overfit_check(model_cfg: &ModelConfig, train: &TrainConfig, data_dir: &Path) -> Check {
    Check::run("overfit run", || {
        let o = overfit_run(model_cfg, train, data_dir)?;
        let ratio = o.final_smoothed / o.early_average;
        Ok((
            ratio <= 0.1 && o.fit_iou >= 0.5,
            format!(
                "{} steps, steps 1-10 mean {:.4}, final smoothed {:.4} (ratio {:.3}), training-sample IoU {:.3}",
                o.totals.len(),
                o.early_average,
                o.final_smoothed,
                ratio,
                o.fit_iou
            ),
        ))
    })
}

/// Stub that answers with a scripted peak score per frame and records the
/// online template it was given.
struct ScriptedModel {
    settings: TrackerSettings,
    scores: Vec<f64>,
    seen: std::cell::RefCell<Vec<CropPair>>,
}

impl ResponseModel for ScriptedModel {
    fn settings(&self) -> TrackerSettings {
        self.settings
    }

    fn respond(&self, _initial: &CropPair, online: &CropPair, _search: &CropPair) -> Result<ScoreMaps> {
        let k = self.seen.borrow().len();
        self.seen.borrow_mut().push(online.clone());
        let mut m = ScoreMaps::uniform(4, 0.0, 0.3);
        m.cls[5] = self.scores[k];
        m.offset_x[5] = 0.5;
        m.offset_y[5] = 0.5;
        Ok(m)
    }
}

/// A 120-frame synthetic sequence with injected scores: replacements must
/// happen after frames 50 and 100, each with the interval's best crop.
pub fn online_update_protocol(data_dir: &Path) -> Check {
    Check::run("online update protocol", || {
        let cfg = SynthConfig {
            frames: 120,
            width: 96,
            height: 96,
            target_w: 16.0,
            target_h: 14.0,
            seed: 5,
            ..SynthConfig::default()
        };
        let seq = generate_synthetic(&cfg, data_dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..120).map(|_| rng.random_range(0.0..1.0)).collect();
        let settings = TrackerSettings {
            template_size: 16,
            search_size: 32,
            template_factor: 2.0,
            search_factor: 4.0,
            update_interval: 50,
            cosine_window: false,
        };
        let model = ScriptedModel {
            settings,
            scores: scores.clone(),
            seen: Default::default(),
        };
        let out = track_sequence(&model, seq.frames(), &seq.gt_rgb[0])?;
        let argmax = |lo: usize, hi: usize| {
            (lo..hi).fold(lo, |best, k| if scores[k] > scores[best] { k } else { best }) + 1
        };
        let expected = [(50, argmax(0, 50)), (100, argmax(50, 100))];
        let got: Vec<(usize, usize)> = out.updates.iter().map(|u| (u.after_frame, u.source_frame)).collect();
        let mut crops_ok = true;
        let seen = model.seen.borrow();
        for &(after, source) in &expected {
            let frame = seq.load_frame(source - 1)?;
            let b = out.boxes[source - 1];
            let want = CropPair {
                rgb: crop_around(&frame.rgb, &b, settings.template_factor, settings.template_size)?,
                tir: crop_around(&frame.tir, &b, settings.template_factor, settings.template_size)?,
            };
            // frame `after + 1` is the first to see the replacement
            crops_ok &= seen[after] == want && seen[after - 1] != want;
        }
        crops_ok &= seen[..50].iter().all(|c| *c == seen[0]);
        Ok((
            got == expected && crops_ok,
            format!("replacements (after, source) {got:?}, expected {expected:?}, crops match: {crops_ok}"),
        ))
    })
}

/// Per-threshold counting written independently of the metric code.
fn brute_force(pred: &[BBox], gt: &[BBox]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = pred.len() as f64;
    let mut prec = Vec::new();
    for t in precision_thresholds() {
        let mut hits = 0usize;
        for i in 0..pred.len() {
            let (px, py) = pred[i].center();
            let (gx, gy) = gt[i].center();
            if ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= t {
                hits += 1;
            }
        }
        prec.push(hits as f64 / n);
    }
    let mut norm = Vec::new();
    for t in npr_thresholds() {
        let mut hits = 0usize;
        for i in 0..pred.len() {
            let (px, py) = pred[i].center();
            let (gx, gy) = gt[i].center();
            let e = (((px - gx) / gt[i].w).powi(2) + ((py - gy) / gt[i].h).powi(2)).sqrt();
            if e <= t {
                hits += 1;
            }
        }
        norm.push(hits as f64 / n);
    }
    let mut succ = Vec::new();
    for t in success_thresholds() {
        let mut hits = 0usize;
        for i in 0..pred.len() {
            let (a, b) = (&pred[i], &gt[i]);
            let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
            let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
            let inter = iw.max(0.0) * ih.max(0.0);
            let iou = inter / (a.w * a.h + b.w * b.h - inter);
            if iou >= t {
                hits += 1;
            }
        }
        succ.push(hits as f64 / n);
    }
    (prec, norm, succ)
}

/// `compute_metrics` against brute-force enumeration on random boxes, plus
/// the two-frame hand case.
pub fn metric_oracle(seed: u64, pairs: usize) -> Check {
    Check::run("metric oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = || {
            BBox::new(
                rng.random_range(0.0..80.0),
                rng.random_range(0.0..80.0),
                rng.random_range(2.0..50.0),
                rng.random_range(2.0..50.0),
            )
        };
        let pred: Vec<BBox> = (0..pairs).map(|_| b()).collect();
        let gt: Vec<BBox> = (0..pairs).map(|_| b()).collect();
        let r = compute_metrics(&pred, &gt, &gt, &BTreeMap::new())?;
        let (prec, norm, succ) = brute_force(&pred, &gt);
        let dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let mean = succ.iter().sum::<f64>() / succ.len() as f64;
        let worst = dev(&r.precision_curve, &prec)
            .max(dev(&r.npr_curve, &norm))
            .max(dev(&r.success_curve, &succ))
            .max((r.sr - mean).abs())
            .max((r.pr - prec[PR_INDEX]).abs())
            .max((r.npr - norm[NPR_INDEX]).abs());

        let g = vec![BBox::new(0.0, 0.0, 70.0, 70.0); 2];
        let p = vec![g[0], BBox::new(30.0, 0.0, 70.0, 70.0)];
        let hand = compute_metrics(&p, &g, &g, &BTreeMap::new())?;
        let (hp, _, hs) = brute_force(&p, &g);
        let hand_ok = overlap(&p[1], &g[1]) == 0.4
            && hand.pr == 0.5
            && hand.sr == 0.7
            && hp[PR_INDEX] == 0.5
            && (hs.iter().sum::<f64>() / 100.0 - 0.7).abs() < 1e-12
            && center_error(&p[1], &g[1]) == 30.0
            && normalized_center_error(&p[1], &g[1]) == 30.0 / 70.0;
        Ok((
            worst < 1e-12 && hand_ok,
            format!(
                "{pairs} random pairs, max |d| {worst:.1e}; hand case PR {} SR {}",
                hand.pr, hand.sr
            ),
        ))
    })
}

/// CSTAF and CSTCF are one parameter set reused at every fusion layer;
/// each DSTA layer owns its parameters.
pub fn structural_sharing(cfg: &ModelConfig) -> Check {
    Check::run("structural sharing", || {
        let model = CfbtModel::new(cfg, DType::F64, Some(3))?;
        let mut notes = Vec::new();
        let mut ok = true;
        let layers = &cfg.cstf_layers;
        let lookups: [(&str, Vec<Option<&Cstf>>); 2] = [
            ("CSTAF", (0..=cfg.depth).map(|l| model.cstaf_at(l)).collect()),
            ("CSTCF", (0..=cfg.depth).map(|l| model.cstcf_at(l)).collect()),
        ];
        for (label, table) in lookups {
            let get = |l: usize| table.get(l).copied().flatten();
            let first = get(layers[0]).ok_or_else(|| CfbtError::Contract(format!("{label} missing")))?;
            let probe = &first.up.weight;
            let marker = Tensor::full(0.125f64, probe.var().dims(), &Device::Cpu)?;
            probe.var().set(&marker)?;
            for &l in &layers[1..] {
                let other = get(l).ok_or_else(|| CfbtError::Contract(format!("{label} missing at {l}")))?;
                let alias = other.params().iter().zip(first.params()).all(|(a, b)| a.same_as(b));
                let seen = max_diff(other.up.weight.var().as_tensor(), &marker)? == 0.0;
                ok &= alias && seen;
            }
            ok &= (1..=cfg.depth).filter(|l| get(*l).is_some()).count() == layers.len();
            notes.push(format!("{label} aliased at {layers:?}"));
        }
        let dsta: Vec<_> = cfg
            .dsta_layers
            .iter()
            .map(|&l| model.dsta_at(l).ok_or_else(|| CfbtError::Contract(format!("DSTA missing at {l}"))))
            .collect::<Result<_>>()?;
        for (k, d) in dsta.iter().enumerate() {
            let before: Vec<Vec<f64>> = dsta
                .iter()
                .map(|o| to_vec(o.attn.up.weight.var().as_tensor()))
                .collect::<Result<_>>()?;
            let marker = Tensor::full(0.5f64 + k as f64, d.attn.up.weight.var().dims(), &Device::Cpu)?;
            d.attn.up.weight.var().set(&marker)?;
            for (j, o) in dsta.iter().enumerate() {
                let after = to_vec(o.attn.up.weight.var().as_tensor())?;
                if j == k {
                    ok &= after != before[j];
                } else {
                    ok &= after == before[j] && !o.params().iter().zip(d.params()).any(|(a, b)| a.same_as(b));
                }
            }
        }
        notes.push(format!("DSTA independent at {:?}", cfg.dsta_layers));

        // forward-level probe: a DSTA perturbation moves the output, and the
        // encoder is shared by both branches (identical templates agree)
        let (t, s) = random_inputs(cfg, 1, DType::F64, 4)?;
        let same = TemplateInputs {
            online_rgb: t.initial_rgb.clone(),
            online_tir: t.initial_tir.clone(),
            ..t.clone()
        };
        let fresh = CfbtModel::new(cfg, DType::F64, Some(3))?;
        let f = fresh.forward_features(&same, &s, &mut ForwardCtx::eval())?;
        let branch_gap = max_diff(&f.initial_rgb.tokens, &f.online_rgb.tokens)?
            .max(max_diff(&f.initial_tir.tokens, &f.online_tir.tokens)?);
        let y0 = fresh.forward(&t, &s, &mut ForwardCtx::eval())?;
        let d0 = fresh.dsta_at(cfg.dsta_layers[0]).expect("checked above");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        randomize(&d0.params(), &mut rng, 0.2)?;
        let y1 = fresh.forward(&t, &s, &mut ForwardCtx::eval())?;
        let moved = head_diff(&y0, &y1)? > 0.0;
        ok &= branch_gap == 0.0 && moved;
        notes.push(format!("branch gap with shared encoder {branch_gap:.1e}, DSTA probe moves output: {moved}"));
        Ok((ok, notes.join("; ")))
    })
}

/// Swapping the initial and online templates swaps the branch outputs.
pub fn template_swap_symmetry(cfg: &ModelConfig, seed: u64) -> Check {
    Check::run("template swap symmetry", || {
        let model = CfbtModel::new(cfg, DType::F64, Some(seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize(&fusion_params(&model), &mut rng, 0.3)?;
        let (t, s) = random_inputs(cfg, 2, DType::F64, seed + 1)?;
        let a = model.forward_features(&t, &s, &mut ForwardCtx::eval())?;
        let b = model.forward_features(&t.swapped(), &s, &mut ForwardCtx::eval())?;
        let d = max_diff(&a.initial_rgb.tokens, &b.online_rgb.tokens)?
            .max(max_diff(&a.online_rgb.tokens, &b.initial_rgb.tokens)?)
            .max(max_diff(&a.initial_tir.tokens, &b.online_tir.tokens)?)
            .max(max_diff(&a.online_tir.tokens, &b.initial_tir.tokens)?);
        Ok((d < 1e-12, format!("max |d| {d:.2e}")))
    })
}

/// Zero-initialized fusion and identical templates: both branches agree and
/// the summed head input is twice either branch.
pub fn branch_sum_identity(cfg: &ModelConfig) -> Check {
    Check::run("branch summation", || {
        let model = CfbtModel::new(cfg, DType::F64, Some(2))?;
        let (t, s) = random_inputs(cfg, 1, DType::F64, 9)?;
        let same = TemplateInputs {
            online_rgb: t.initial_rgb.clone(),
            online_tir: t.initial_tir.clone(),
            ..t
        };
        let f = model.forward_features(&same, &s, &mut ForwardCtx::eval())?;
        let i = f.branch_search(Branch::Initial, cfg.head_input)?;
        let o = f.branch_search(Branch::Online, cfg.head_input)?;
        let sum = f.summed_search(cfg.head_input)?;
        let d = max_diff(&i, &o)?.max(max_diff(&sum, &(&i * 2.0)?)?);
        Ok((d == 0.0, format!("max |d| {d:.1e}")))
    })
}

pub fn eval_determinism(cfg: &ModelConfig) -> Check {
    Check::run("eval determinism", || {
        let model = CfbtModel::new(cfg, DType::F32, Some(1))?;
        let (t, s) = random_inputs(cfg, 1, DType::F32, 2)?;
        let a = model.forward(&t, &s, &mut ForwardCtx::eval())?;
        let b = model.forward(&t, &s, &mut ForwardCtx::eval())?;
        let same = bytes(&a.cls)? == bytes(&b.cls)? && bytes(&a.size)? == bytes(&b.size)?;
        Ok((same, format!("bitwise equal: {same}")))
    })
}

/// Encodes a known frame box into head maps and decodes it back.
pub fn decode_round_trip(seed: u64) -> Check {
    Check::run("decode round trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let gt = BBox::new(rng.random_range(20.0..200.0), rng.random_range(20.0..200.0), rng.random_range(8.0..60.0), rng.random_range(8.0..60.0));
            let side = 4.0 * (gt.w * gt.h).sqrt();
            let (cx, cy) = gt.center();
            let record = CropRecord {
                x0: cx + rng.random_range(-0.2..0.2) * side - side / 2.0,
                y0: cy + rng.random_range(-0.2..0.2) * side - side / 2.0,
                side,
                out_size: 256,
                out_of_frame: false,
            };
            let n = 16;
            let norm = record.frame_to_crop(&gt);
            let (ncx, ncy) = norm.center();
            let (col, row) = ((ncx * n as f64).floor() as usize, (ncy * n as f64).floor() as usize);
            let k = row * n + col;
            let mut maps = ScoreMaps::uniform(n, 0.1, 0.1);
            maps.cls[k] = 0.95;
            maps.offset_x[k] = ncx * n as f64 - col as f64;
            maps.offset_y[k] = ncy * n as f64 - row as f64;
            maps.size_w[k] = norm.w;
            maps.size_h[k] = norm.h;
            let (b, _) = decode_box(&maps, &record, false)?;
            worst = worst
                .max((b.x - gt.x).abs())
                .max((b.y - gt.y).abs())
                .max((b.w - gt.w).abs())
                .max((b.h - gt.h).abs());
        }
        Ok((worst < 1.0, format!("200 boxes, max corner/size error {worst:.2e} px")))
    })
}

/// Interrupting training, checkpointing and resuming reproduces the
/// unbroken loss curve.
pub fn resume_equivalence(cfg: &ModelConfig, steps: usize, data_dir: &Path) -> Check {
    Check::run("resume equivalence", || {
        let dataset = synthetic_training_set(&data_dir.join("data"), 2, 0)?;
        let train = TrainConfig {
            max_steps: steps,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let unbroken = {
            let m = CfbtModel::new(cfg, DType::F32, Some(0))?;
            Trainer::new(&m, &dataset, &train)?.run(None)?
        };
        let half = steps / 2;
        let path = data_dir.join("half.ckpt");
        {
            let m = CfbtModel::new(cfg, DType::F32, Some(0))?;
            let mut t = Trainer::new(&m, &dataset, &TrainConfig { max_steps: half, ..train.clone() })?;
            t.run(None)?;
            t.checkpoint().save(&path)?;
        }
        let ck = Checkpoint::load(&path)?;
        let m = CfbtModel::new(cfg, DType::F32, Some(99))?;
        let resumed = Trainer::resume(&m, &dataset, &train, &ck)?.run(None)?;
        let worst = unbroken[half..]
            .iter()
            .zip(&resumed)
            .map(|(a, b)| ((a.total - b.total) / a.total).abs())
            .fold(0.0, f64::max);
        Ok((
            resumed.len() == steps - half && worst < 1e-6,
            format!("resumed at step {half} of {steps}, max relative loss deviation {worst:.1e}"),
        ))
    })
}

/// Search crop geometry and padding.
pub fn crop_contract() -> Check {
    Check::run("crop contract", || {
        let frame = image::RgbImage::from_fn(300, 300, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 50]));
        let c = crop_around(&frame, &BBox::new(100.0, 100.0, 50.0, 50.0), 4.0, 64)?;
        let geometry = c.record.side == 200.0 && c.record.x0 == 25.0 && c.record.y0 == 25.0 && !c.record.out_of_frame;
        let mean = crate::crop::channel_mean(&frame);
        let corner = crop_around(&frame, &BBox::new(-20.0, -20.0, 20.0, 20.0), 4.0, 32)?;
        let padded = corner.pixel(0, 0, 0) == mean[0] as f32 && corner.pixel(2, 0, 0) == mean[2] as f32;
        Ok((
            geometry && padded && corner.record.out_of_frame,
            format!("side {} at ({}, {}); corner padding equals mean: {padded}", c.record.side, c.record.x0, c.record.y0),
        ))
    })
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Desk-scale training checks (minutes) in addition to the fast ones.
    pub full: bool,
    pub seeds: Vec<u64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            full: false,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Every check; the training ones run at tiny scale unless `full` is set.
pub fn run_all(opts: &VerifyOptions, scratch: &Path) -> Vec<Check> {
    let tiny = ModelConfig::tiny();
    let desk = ModelConfig::desk();
    let mut out = vec![
        param_audit(),
        identity_at_init(if opts.full { &desk } else { &tiny }, 0),
        gradient_check(&opts.seeds, 1e-5),
        oracle_equivalence(&opts.seeds),
        online_update_protocol(&scratch.join("online")),
        metric_oracle(opts.seeds.first().copied().unwrap_or(0), 100),
        structural_sharing(&tiny),
        template_swap_symmetry(&tiny, 5),
        branch_sum_identity(&tiny),
        eval_determinism(&tiny),
        decode_round_trip(1),
        crop_contract(),
        resume_equivalence(&tiny, 4, &scratch.join("resume")),
    ];
    let (cfg, steps) = if opts.full { (desk.clone(), 100) } else { (tiny.clone(), 5) };
    let train = TrainConfig {
        batch_size: if opts.full { 8 } else { 2 },
        ..TrainConfig::default()
    };
    out.push(freezing_contract(&cfg, &train, steps, &scratch.join("freeze")));
    if opts.full {
        out.push(overfit_check(&desk, &overfit_config(), &scratch.join("overfit")));
    }
    out
}

/// Settings of the desk overfit run.
pub fn overfit_config() -> TrainConfig {
    TrainConfig {
        max_steps: 300,
        freeze_policy: FreezePolicy::None,
        base_lr: 2e-4,
        ..TrainConfig::default()
    }
}
