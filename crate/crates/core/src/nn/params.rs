//! Named parameter storage with per-parameter trainable flags.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{CfbtError, Result};

/// Module group a parameter belongs to, as reported by the audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    PatchEmbed,
    Encoder,
    ModalityBa,
    Head,
    Cstaf,
    Cstcf,
    Dsta,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::PatchEmbed,
        ParamGroup::Encoder,
        ParamGroup::ModalityBa,
        ParamGroup::Head,
        ParamGroup::Cstaf,
        ParamGroup::Cstcf,
        ParamGroup::Dsta,
    ];

    /// The newly introduced cross-branch modules.
    pub fn is_fusion(self) -> bool {
        matches!(self, ParamGroup::Cstaf | ParamGroup::Cstcf | ParamGroup::Dsta)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::PatchEmbed => "patch_embed",
            ParamGroup::Encoder => "encoder",
            ParamGroup::ModalityBa => "modality_ba",
            ParamGroup::Head => "head",
            ParamGroup::Cstaf => "cstaf",
            ParamGroup::Cstcf => "cstcf",
            ParamGroup::Dsta => "dsta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A handle to one parameter tensor. Clones alias the same storage and flag.
#[derive(Clone)]
pub struct Param {
    var: Var,
    trainable: Arc<AtomicBool>,
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("shape", &self.var.dims())
            .field("trainable", &self.is_trainable())
            .finish()
    }
}

impl Param {
    /// The tensor to use in a forward pass. Frozen parameters are detached so
    /// no gradient is ever produced for them.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, on: bool) {
        self.trainable.store(on, Ordering::Relaxed);
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    /// True when both handles refer to the same storage.
    pub fn same_as(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.trainable, &other.trainable)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub param: Param,
}

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Uniform(f64),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.param.elem_count()).sum()
    }

    pub fn trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.param.is_trainable())
            .map(|e| e.param.elem_count())
            .sum()
    }

    pub fn by_group(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.group).or_insert(0) += e.param.elem_count();
        }
        out
    }

    pub fn trainable_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.param.is_trainable())
    }

    pub fn frozen_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| !e.param.is_trainable())
    }

    /// A view holding the entries that satisfy `pred`; handles stay shared.
    pub fn filtered(&self, pred: impl Fn(&ParamEntry) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| pred(e)).cloned().collect(),
        }
    }

    pub fn set_trainable_where(&self, pred: impl Fn(&ParamEntry) -> bool) {
        for e in &self.entries {
            e.param.set_trainable(pred(e));
        }
    }
}

/// Creates and registers parameters. With no seed every tensor is zero,
/// which keeps paper-scale audits cheap.
pub struct ParamBuilder {
    device: Device,
    dtype: DType,
    rng: Option<ChaCha8Rng>,
    entries: Vec<ParamEntry>,
}

impl ParamBuilder {
    pub fn new(device: Device, dtype: DType, seed: Option<u64>) -> Self {
        Self {
            device,
            dtype,
            rng: seed.map(ChaCha8Rng::seed_from_u64),
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
    ) -> Result<Param> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(CfbtError::Config(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let tensor = match (init, self.rng.as_mut()) {
            (Init::Ones, _) => Tensor::ones(shape, self.dtype, &self.device)?,
            (Init::Zeros, _) | (_, None) => Tensor::zeros(shape, self.dtype, &self.device)?,
            (Init::TruncNormal(std), Some(rng)) => {
                let dist = Normal::new(0.0, std).map_err(|e| CfbtError::Config(e.to_string()))?;
                let data: Vec<f64> = (0..n)
                    .map(|_| loop {
                        let x: f64 = dist.sample(rng);
                        if x.abs() <= 2.0 * std {
                            break x;
                        }
                    })
                    .collect();
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
            (Init::Uniform(bound), Some(rng)) => {
                let dist =
                    Uniform::new_inclusive(-bound, bound).map_err(|e| CfbtError::Config(e.to_string()))?;
                let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let param = Param {
            var: Var::from_tensor(&tensor)?,
            trainable: Arc::new(AtomicBool::new(true)),
        };
        self.entries.push(ParamEntry {
            name,
            group,
            param: param.clone(),
        });
        Ok(param)
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            entries: self.entries,
        }
    }
}
