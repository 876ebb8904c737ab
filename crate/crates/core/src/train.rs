//! Pair sampling, AdamW, the training loop and resumable checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::checkpoint::Checkpoint;
use crate::crop::{context_side, crop_around, crop_square, crops_to_tensor};
use crate::data::{FrameCache, RgbtSequence};
use crate::error::{CfbtError, Result};
use crate::kv::{self, KvConfig};
use crate::loss::{total_loss, LossBreakdown};
use crate::model::{CfbtModel, FreezePolicy, SearchInputs, TemplateInputs};
use crate::nn::{ForwardCtx, Param};
use crate::tracking::{decode_box, CropPair, FramePair};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub base_lr: f64,
    /// Epochs (1-based) after this one use `base_lr / lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    /// Stops early after this many steps; 0 means no limit.
    pub max_steps: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Largest index gap between consecutive frames of a triple.
    pub max_gap: usize,
    /// Search-centre jitter as a fraction of `sqrt(w h)`.
    pub center_jitter: f64,
    /// Relative search-side jitter.
    pub scale_jitter: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub cache_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 25,
            samples_per_epoch: 512,
            base_lr: 1e-4,
            lr_drop_epoch: 20,
            lr_drop_factor: 10.0,
            weight_decay: 1e-4,
            seed: 0,
            freeze_policy: FreezePolicy::PaperDefault,
            max_steps: 0,
            grad_clip: 1.0,
            max_gap: 10,
            center_jitter: 0.5,
            scale_jitter: 0.1,
            checkpoint_every: 0,
            cache_frames: 4096,
        }
    }
}

impl KvConfig for TrainConfig {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "epochs" => self.epochs = kv::value(key, v)?,
            "samples_per_epoch" => self.samples_per_epoch = kv::value(key, v)?,
            "base_lr" => self.base_lr = kv::value(key, v)?,
            "lr_drop_epoch" => self.lr_drop_epoch = kv::value(key, v)?,
            "lr_drop_factor" => self.lr_drop_factor = kv::value(key, v)?,
            "weight_decay" => self.weight_decay = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "freeze_policy" => self.freeze_policy = v.parse()?,
            "max_steps" => self.max_steps = kv::value(key, v)?,
            "grad_clip" => self.grad_clip = kv::value(key, v)?,
            "max_gap" => self.max_gap = kv::value(key, v)?,
            "center_jitter" => self.center_jitter = kv::value(key, v)?,
            "scale_jitter" => self.scale_jitter = kv::value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = kv::value(key, v)?,
            "cache_frames" => self.cache_frames = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("samples_per_epoch", self.samples_per_epoch.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lr_drop_epoch", self.lr_drop_epoch.to_string()),
            ("lr_drop_factor", self.lr_drop_factor.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze_policy", self.freeze_policy.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("max_gap", self.max_gap.to_string()),
            ("center_jitter", self.center_jitter.to_string()),
            ("scale_jitter", self.scale_jitter.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("cache_frames", self.cache_frames.to_string()),
        ]
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CfbtError::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 || self.samples_per_epoch == 0 {
            return bad("batch_size, epochs and samples_per_epoch must be positive");
        }
        if !(self.base_lr > 0.0 && self.lr_drop_factor > 0.0 && self.weight_decay >= 0.0) {
            return bad("base_lr and lr_drop_factor must be positive, weight_decay non-negative");
        }
        if self.grad_clip < 0.0 || self.max_gap == 0 {
            return bad("grad_clip must be non-negative and max_gap positive");
        }
        if !(0.0..1.0).contains(&self.scale_jitter) || !(0.0..=1.0).contains(&self.center_jitter) {
            return bad("scale_jitter must lie in [0, 1) and center_jitter in [0, 1]");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.epochs * self.steps_per_epoch();
        if self.max_steps == 0 {
            full
        } else {
            full.min(self.max_steps)
        }
    }

    /// 1-based epoch of a 0-based step.
    pub fn epoch_of_step(&self, step: usize) -> usize {
        step / self.steps_per_epoch() + 1
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.lr_drop_epoch {
            self.base_lr / self.lr_drop_factor
        } else {
            self.base_lr
        }
    }

    pub fn lr_at_step(&self, step: usize) -> f64 {
        self.lr_at_epoch(self.epoch_of_step(step))
    }
}

struct Slot {
    name: String,
    param: Param,
    m: Tensor,
    v: Tensor,
}

/// AdamW with decoupled weight decay over the trainable parameters.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new(model: &CfbtModel, weight_decay: f64) -> Result<Self> {
        let slots = model
            .store()
            .trainable_entries()
            .map(|e| {
                let t = e.param.var().as_tensor();
                Ok(Slot {
                    name: e.name.clone(),
                    param: e.param.clone(),
                    m: t.zeros_like()?,
                    v: t.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if slots.is_empty() {
            return Err(CfbtError::Config("no trainable parameters for the optimizer".into()));
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            slots,
        })
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.param.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn grad(&self, grads: &GradStore, slot: &Slot) -> Result<Tensor> {
        match grads.get(slot.param.var().as_tensor()) {
            Some(g) => Ok(g.detach()),
            None => Ok(slot.m.zeros_like()?),
        }
    }

    /// Global L2 norm of the trainable gradients.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = grads.get(s.param.var().as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update; gradients are multiplied by `grad_scale` first.
    pub fn step(&mut self, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..self.slots.len() {
            let g = (self.grad(grads, &self.slots[i])? * grad_scale)?;
            let s = &mut self.slots[i];
            s.m = ((&s.m * b1)? + (&g * (1.0 - b1))?)?.detach();
            s.v = ((&s.v * b2)? + (g.sqr()? * (1.0 - b2))?)?.detach();
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let theta = s.param.var().as_tensor().detach();
            let next = ((theta * (1.0 - lr * self.weight_decay))? - (update * lr)?)?;
            s.param.var().set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `adamw.m.<name>` / `adamw.v.<name>`.
    pub fn export(&self, ck: &mut Checkpoint) {
        ck.extra.insert("adamw.step".into(), self.step.to_string());
        for s in &self.slots {
            ck.tensors.insert(format!("adamw.m.{}", s.name), s.m.clone());
            ck.tensors.insert(format!("adamw.v.{}", s.name), s.v.clone());
        }
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let step = ck
            .extra
            .get("adamw.step")
            .ok_or_else(|| CfbtError::Data("checkpoint has no optimizer state".into()))?;
        self.step = step
            .parse()
            .map_err(|_| CfbtError::Data(format!("bad optimizer step `{step}`")))?;
        for s in &mut self.slots {
            let get = |k: &str| {
                ck.tensors
                    .get(&format!("adamw.{k}.{}", s.name))
                    .ok_or_else(|| CfbtError::Data(format!("optimizer state for `{}` missing", s.name)))
            };
            let (m, v) = (get("m")?, get("v")?);
            if m.dims() != s.m.dims() || v.dims() != s.v.dims() {
                return Err(CfbtError::Data(format!("optimizer state for `{}` has the wrong shape", s.name)));
            }
            s.m = m.to_dtype(s.m.dtype())?;
            s.v = v.to_dtype(s.v.dtype())?;
        }
        Ok(())
    }
}

/// Frame indices and search geometry of one training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub sequence: usize,
    /// Initial template, online surrogate, search; strictly increasing.
    pub frames: [usize; 3],
    /// Search-centre shift in units of `sqrt(w h)`.
    pub shift: (f64, f64),
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub spec: SampleSpec,
    pub initial: CropPair,
    pub online: CropPair,
    pub search: CropPair,
    /// Ground truth in normalized search-crop coordinates.
    pub gt: BBox,
}

fn valid_frames(seq: &RgbtSequence) -> Vec<usize> {
    (0..seq.len()).filter(|&i| seq.gt(i).is_valid()).collect()
}

/// Draws `n` sample specs. Sequences with fewer than three annotated
/// frames are redrawn; the second value counts those redraws.
pub fn sample_specs(
    dataset: &[RgbtSequence],
    cfg: &TrainConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SampleSpec>, usize)> {
    if dataset.is_empty() {
        return Err(CfbtError::Data("empty training set".into()));
    }
    let valid: Vec<Vec<usize>> = dataset.iter().map(valid_frames).collect();
    if valid.iter().all(|v| v.len() < 3) {
        return Err(CfbtError::Data("no sequence has three annotated frames".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut redraws = 0;
    while out.len() < n {
        let s = rng.random_range(0..dataset.len());
        let v = &valid[s];
        if v.len() < 3 {
            redraws += 1;
            log::warn!("sequence {} has fewer than 3 usable frames; redrawing", dataset[s].name);
            continue;
        }
        // positions into the valid list; gaps measured there
        let gap = cfg.max_gap;
        let a = rng.random_range(0..=v.len() - 3);
        let b = rng.random_range(a + 1..=(a + gap).min(v.len() - 2));
        let c = rng.random_range(b + 1..=(b + gap).min(v.len() - 1));
        let j = cfg.center_jitter;
        let shift = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        let sj = cfg.scale_jitter;
        let scale = if sj > 0.0 { 1.0 + rng.random_range(-sj..=sj) } else { 1.0 };
        out.push(SampleSpec {
            sequence: s,
            frames: [v[a], v[b], v[c]],
            shift,
            scale,
        });
    }
    Ok((out, redraws))
}

fn load_pair(seq: &RgbtSequence, i: usize, cache: &mut FrameCache) -> Result<FramePair> {
    Ok(FramePair {
        rgb: (*cache.get(&seq.rgb_frames[i])?).clone(),
        tir: (*cache.get(&seq.tir_frames[i])?).clone(),
    })
}

/// Crops the frames of `spec`.
pub fn materialize(
    dataset: &[RgbtSequence],
    spec: &SampleSpec,
    model: &crate::config::ModelConfig,
    cache: &mut FrameCache,
) -> Result<SamplePair> {
    let seq = &dataset[spec.sequence];
    let template = |i: usize, cache: &mut FrameCache| -> Result<CropPair> {
        let f = load_pair(seq, i, cache)?;
        let g = seq.gt(i);
        Ok(CropPair {
            rgb: crop_around(&f.rgb, &g, model.template_factor, model.template_size)?,
            tir: crop_around(&f.tir, &g, model.template_factor, model.template_size)?,
        })
    };
    let [fi, fo, fs] = spec.frames;
    let initial = template(fi, cache)?;
    let online = template(fo, cache)?;
    let f = load_pair(seq, fs, cache)?;
    let g = seq.gt(fs);
    let unit = (g.w * g.h).sqrt();
    let (cx, cy) = g.center();
    let (cx, cy) = (cx + spec.shift.0 * unit, cy + spec.shift.1 * unit);
    let side = context_side(&g, model.search_factor) * spec.scale;
    let (x0, y0) = (cx - side / 2.0, cy - side / 2.0);
    let search = CropPair {
        rgb: crop_square(&f.rgb, x0, y0, side, model.search_size)?,
        tir: crop_square(&f.tir, x0, y0, side, model.search_size)?,
    };
    let gt = search.rgb.record.frame_to_crop(&g);
    let (gx, gy) = gt.center();
    if !((0.0..1.0).contains(&gx) && (0.0..1.0).contains(&gy)) {
        return Err(CfbtError::Contract(format!("ground truth centre ({gx}, {gy}) fell outside the search crop")));
    }
    Ok(SamplePair {
        spec: *spec,
        initial,
        online,
        search,
        gt,
    })
}

/// Draws and crops one batch.
pub fn sample_pairs(
    dataset: &[RgbtSequence],
    cfg: &TrainConfig,
    model: &crate::config::ModelConfig,
    cache: &mut FrameCache,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SamplePair>> {
    let (specs, _) = sample_specs(dataset, cfg, cfg.batch_size, rng)?;
    specs.iter().map(|s| materialize(dataset, s, model, cache)).collect()
}

/// Network inputs for a batch of samples.
pub fn batch_inputs(model: &CfbtModel, batch: &[SamplePair]) -> Result<(TemplateInputs, SearchInputs)> {
    let (dt, dev) = (model.dtype(), model.device());
    let stack = |f: &dyn Fn(&SamplePair) -> &crate::crop::Crop| {
        let crops: Vec<_> = batch.iter().map(f).collect();
        crops_to_tensor(&crops, dt, dev)
    };
    Ok((
        TemplateInputs {
            initial_rgb: stack(&|s| &s.initial.rgb)?,
            initial_tir: stack(&|s| &s.initial.tir)?,
            online_rgb: stack(&|s| &s.online.rgb)?,
            online_tir: stack(&|s| &s.online.tir)?,
        },
        SearchInputs {
            rgb: stack(&|s| &s.search.rgb)?,
            tir: stack(&|s| &s.search.tir)?,
        },
    ))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_iou: f64,
    pub l_1: f64,
    pub total: f64,
}

impl StepLog {
    fn new(step: usize, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            l_cls: b.l_cls,
            l_iou: b.l_iou,
            l_1: b.l_1,
            total: b.total,
        }
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";

pub struct Trainer<'a> {
    model: &'a CfbtModel,
    dataset: &'a [RgbtSequence],
    cfg: TrainConfig,
    opt: AdamW,
    step: usize,
    cache: FrameCache,
}

impl<'a> Trainer<'a> {
    /// Applies the freezing policy and builds the optimizer.
    pub fn new(model: &'a CfbtModel, dataset: &'a [RgbtSequence], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.apply_freeze_policy(cfg.freeze_policy);
        let opt = AdamW::new(model, cfg.weight_decay)?;
        Ok(Self {
            model,
            dataset,
            cfg: cfg.clone(),
            opt,
            step: 0,
            cache: FrameCache::new(cfg.cache_frames),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(model: &'a CfbtModel, dataset: &'a [RgbtSequence], cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(model, dataset, cfg)?;
        ck.apply_to(model)?;
        t.opt.restore(ck)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(self.model, self.step);
        ck.extra.insert("train_config".into(), self.cfg.to_kv_string());
        self.opt.export(&mut ck);
        ck
    }

    /// The per-step generator; depends only on the seed and step index, so
    /// a resumed run draws the same batches.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step as u64);
        rng
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let mut rng = self.step_rng();
        let batch = sample_pairs(self.dataset, &self.cfg, self.model.config(), &mut self.cache, &mut rng)?;
        let (templates, search) = batch_inputs(self.model, &batch)?;
        let mut ctx = ForwardCtx::train(rng.random());
        let out = self.model.forward(&templates, &search, &mut ctx)?;
        let gts: Vec<BBox> = batch.iter().map(|s| s.gt).collect();
        let mc = self.model.config();
        let terms = total_loss(&out, &gts, mc.lambda1, mc.lambda2)?;
        let lr = self.cfg.lr_at_step(self.step);
        if !terms.breakdown.total.is_finite() {
            return Err(CfbtError::Numeric(format!("non-finite loss at step {}: {:?}", self.step, terms.breakdown)));
        }
        let grads = terms.total.backward()?;
        for e in self.model.store().frozen_entries() {
            if grads.get(e.param.var().as_tensor()).is_some() {
                return Err(CfbtError::Contract(format!("frozen parameter `{}` received a gradient", e.name)));
            }
        }
        let norm = self.opt.grad_norm(&grads)?;
        if !norm.is_finite() {
            return Err(CfbtError::Numeric(format!("non-finite gradient norm at step {}", self.step)));
        }
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / (norm + 1e-6)
        } else {
            1.0
        };
        self.opt.step(&grads, lr, scale)?;
        let log = StepLog::new(self.step, lr, &terms.breakdown);
        self.step += 1;
        Ok(log)
    }

    /// Trains until `total_steps`. With an output directory, appends to the
    /// JSON-lines log and writes periodic, final and diagnostic checkpoints.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepLog>> {
        let total = self.cfg.total_steps();
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| CfbtError::io(dir, e))?;
                let p = dir.join(LOG_FILE);
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| CfbtError::io(&p, e))?;
                Some((p, f))
            }
            None => None,
        };
        let mut logs = Vec::new();
        while self.step < total {
            let entry = match self.train_step() {
                Ok(l) => l,
                Err(e) => {
                    if let (Some(dir), CfbtError::Numeric(_)) = (out, &e) {
                        let p = dir.join(DIAGNOSTIC_CHECKPOINT);
                        if let Err(save) = self.checkpoint().save(&p) {
                            log::error!("could not write diagnostic checkpoint: {save}");
                        }
                    }
                    return Err(e);
                }
            };
            if let Some((p, f)) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).map_err(|e| CfbtError::Data(e.to_string()))?;
                writeln!(f, "{line}").map_err(|e| CfbtError::io(p.as_path(), e))?;
            }
            log::info!(
                "step {} lr {:.2e} total {:.4} (cls {:.4} iou {:.4} l1 {:.4})",
                entry.step, entry.lr, entry.total, entry.l_cls, entry.l_iou, entry.l_1
            );
            logs.push(entry);
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                    self.checkpoint().save(&dir.join(format!("step_{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(logs)
    }

    pub fn final_checkpoint_path(out: &Path) -> PathBuf {
        out.join(FINAL_CHECKPOINT)
    }
}

/// Exponential moving average with the given window (`alpha = 2 / (w + 1)`).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Mean IoU between decoded and true boxes on `n` freshly drawn training
/// samples (crop-normalized coordinates, eval-mode forward).
pub fn training_fit_iou(
    model: &CfbtModel,
    dataset: &[RgbtSequence],
    cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = FrameCache::new(cfg.cache_frames);
    let (specs, _) = sample_specs(dataset, cfg, n, &mut rng)?;
    let unit = crate::crop::CropRecord {
        x0: 0.0,
        y0: 0.0,
        side: 1.0,
        out_size: model.config().search_size,
        out_of_frame: false,
    };
    let mut total = 0.0;
    for chunk in specs.chunks(cfg.batch_size.max(1)) {
        let batch = chunk
            .iter()
            .map(|s| materialize(dataset, s, model.config(), &mut cache))
            .collect::<Result<Vec<_>>>()?;
        let (t, s) = batch_inputs(model, &batch)?;
        let out = model.forward(&t, &s, &mut ForwardCtx::eval())?;
        for (i, sample) in batch.iter().enumerate() {
            let (b, _) = decode_box(&out.sample(i)?, &unit, false)?;
            total += b.iou(&sample.gt);
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn fake_sequence(name: &str, len: usize) -> RgbtSequence {
        RgbtSequence {
            name: name.into(),
            dir: PathBuf::from(name),
            rgb_frames: vec![PathBuf::new(); len],
            tir_frames: vec![PathBuf::new(); len],
            gt_rgb: vec![BBox::new(10.0, 10.0, 8.0, 8.0); len],
            gt_tir: vec![BBox::new(10.0, 10.0, 8.0, 8.0); len],
            tags: Default::default(),
        }
    }

    #[test]
    fn lr_schedule_drops_after_epoch_twenty() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at_epoch(19), 1e-4);
        assert_eq!(c.lr_at_epoch(20), 1e-4);
        assert_eq!(c.lr_at_epoch(21), 1e-5);
        assert_eq!(c.steps_per_epoch(), 64);
        assert_eq!(c.lr_at_step(20 * 64 - 1), 1e-4);
        assert_eq!(c.lr_at_step(20 * 64), 1e-5);
    }

    #[test]
    fn kv_round_trip() {
        let c = TrainConfig {
            freeze_policy: FreezePolicy::None,
            max_steps: 300,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        kv::apply_all(&mut back, &kv::parse_str(&c.to_kv_string()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn three_frame_sequence_forces_the_triple() {
        let ds = vec![fake_sequence("a", 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (specs, _) = sample_specs(&ds, &TrainConfig::default(), 50, &mut rng).unwrap();
        assert!(specs.iter().all(|s| s.frames == [0, 1, 2]));
    }

    #[test]
    fn short_sequences_are_redrawn() {
        let ds = vec![fake_sequence("short", 2), fake_sequence("long", 30)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TrainConfig { max_gap: 4, ..TrainConfig::default() };
        let (specs, redraws) = sample_specs(&ds, &cfg, 200, &mut rng).unwrap();
        assert!(redraws > 0);
        for s in &specs {
            assert_eq!(s.sequence, 1);
            let [a, b, c] = s.frames;
            assert!(a < b && b < c && b - a <= 4 && c - b <= 4);
        }
        assert!(sample_specs(&[fake_sequence("x", 2)], &cfg, 1, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let ds = vec![fake_sequence("a", 20), fake_sequence("b", 20)];
        let draw = || sample_specs(&ds, &TrainConfig::default(), 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        assert_eq!(draw(), draw());
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let m = CfbtModel::new(&ModelConfig::tiny(), DType::F64, Some(4)).unwrap();
        let mut opt = AdamW::new(&m, 0.01).unwrap();
        assert_eq!(opt.param_count(), m.count_parameters().trainable);
        let before: Vec<Vec<f64>> = m
            .store()
            .entries()
            .iter()
            .map(|e| e.param.var().as_tensor().flatten_all().unwrap().to_vec1().unwrap())
            .collect();
        let x = m.store().entries()[0].param.tensor();
        let grads = (x.sum_all().unwrap() * 0.0).unwrap().backward().unwrap();
        opt.step(&grads, 0.5, 1.0).unwrap();
        for (e, b) in m.store().entries().iter().zip(&before) {
            let after: Vec<f64> = e.param.var().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let factor = if e.param.is_trainable() { 1.0 - 0.5 * 0.01 } else { 1.0 };
            for (a, b) in after.iter().zip(b) {
                assert_eq!(*a, b * factor, "{}", e.name);
            }
        }
    }

    #[test]
    fn no_trainable_parameters_is_config_error() {
        let m = CfbtModel::new(&ModelConfig::tiny().without_fusion(), DType::F32, Some(0)).unwrap();
        assert!(matches!(AdamW::new(&m, 0.0), Err(CfbtError::Config(_))));
    }

    #[test]
    fn smoothing_of_constant_is_constant() {
        assert!(smoothed(&[2.0; 10], 50).iter().all(|&v| v == 2.0));
        let s = smoothed(&[1.0, 0.0], 1);
        assert_eq!(s, vec![1.0, 0.0]);
    }
}
