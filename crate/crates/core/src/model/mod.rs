//! The dual-branch frequency filtering model.
//!
//! A shared item embedding feeds two stacks that run side by side: the
//! global branch filters the whole spectrum of its input, the local branch
//! filters contiguous frequency bands separately and mixes the band outputs
//! with a learned soft gate. Both branches scale their learnable complex
//! filters by a user-adaptive mask computed from the amplitude spectrum of
//! the initial embeddings. The last positions of the two stacks are fused
//! and scored against the item embedding table.

mod forward;
mod inspect;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tensor, BATCH_NORM_MOMENTUM};
use crate::error::bail;
use crate::rng::SeededRng;
use crate::spectral::bin_count;
use crate::Result;

pub use forward::{
    ffn_block, forward, gate_probs, gfm_layer, gfm_layer_last, lfm_bands, lfm_layer, lfm_layer_last, mix_bands, uaf,
    BranchTrace, FfnVars, Forward, GateVars, LayerTrace,
};
pub use inspect::{filter_amplitudes, mean_gates, FilterAmplitudes};

/// Standard deviation of the Gaussian initializers.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Global,
    Local,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Local => "local",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    /// Maximum sequence length.
    pub n: usize,
    pub layers: usize,
    /// Frequency bands of the local branch.
    pub bands: usize,
    /// UAF convolution kernel size; odd.
    pub kernel: usize,
    pub dropout: f64,
    pub use_uaf: bool,
    pub use_gfm: bool,
    pub use_lfm: bool,
    /// Replace the UAF convolution by a linear map over the feature axis.
    pub uaf_as_mlp: bool,
    /// One UAF per layer instead of one per branch.
    pub uaf_per_layer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n: 50,
            layers: 2,
            bands: 4,
            kernel: 3,
            dropout: 0.4,
            use_uaf: true,
            use_gfm: true,
            use_lfm: true,
            uaf_as_mlp: false,
            uaf_per_layer: false,
        }
    }
}

impl ModelConfig {
    /// Bin count of the half spectrum.
    pub fn m(&self) -> usize {
        bin_count(self.n)
    }

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d == 0 {
            out.push(String::from("d must be positive"));
        }
        if self.n == 0 {
            out.push(String::from("n must be positive"));
        }
        if self.layers == 0 {
            out.push(String::from("layers must be positive"));
        }
        if self.use_lfm && (self.bands == 0 || (self.n > 0 && self.bands > self.m())) {
            out.push(format!("bands K={} must lie in [1, m={}]", self.bands, bin_count(self.n.max(1))));
        }
        if self.kernel.is_multiple_of(2) {
            out.push(format!("kernel size c={} must be odd", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.use_gfm && !self.use_lfm {
            out.push(String::from("at least one of use_gfm and use_lfm must be on"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if !p.is_empty() {
            bail!(Config, "invalid model config: {}", p.join("; "));
        }
        Ok(())
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut b = Vec::with_capacity(2);
        if self.use_gfm {
            b.push(Branch::Global);
        }
        if self.use_lfm {
            b.push(Branch::Local);
        }
        b
    }

    /// Name prefix of the UAF serving `branch` at `layer`.
    pub fn uaf_prefix(&self, branch: Branch, layer: usize) -> String {
        if self.uaf_per_layer {
            format!("uaf.{}.{layer}", branch.name())
        } else {
            format!("uaf.{}", branch.name())
        }
    }

    fn uaf_instances(&self) -> usize {
        if self.uaf_per_layer {
            self.layers
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    /// Real part `1 + N(0, std)`, imaginary part `N(0, std)`.
    NearIdentityFilter,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Learnable; otherwise a buffer such as a running statistic.
    pub trainable: bool,
    init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec { name, shape: shape.to_vec(), trainable: true, init }
}

/// Full parameter layout in a fixed order.
pub fn layout(config: &ModelConfig, num_items: usize) -> Vec<ParamSpec> {
    let (d, m, k) = (config.d, config.m(), config.bands);
    let mut out = vec![spec(String::from("item_embedding"), &[num_items + 1, d], Init::Normal)];
    for br in config.branches() {
        if config.use_uaf {
            for l in 0..config.uaf_instances() {
                let p = config.uaf_prefix(br, l);
                if config.uaf_as_mlp {
                    out.push(spec(format!("{p}.linear"), &[d, d], Init::Normal));
                } else {
                    out.push(spec(format!("{p}.kernel"), &[d, d, config.kernel], Init::Normal));
                }
                out.push(spec(format!("{p}.bn.gamma"), &[d], Init::Ones));
                out.push(spec(format!("{p}.bn.beta"), &[d], Init::Zeros));
                let mut mean = spec(format!("{p}.bn.running_mean"), &[d], Init::Zeros);
                mean.trainable = false;
                let mut var = spec(format!("{p}.bn.running_var"), &[d], Init::Ones);
                var.trainable = false;
                out.push(mean);
                out.push(var);
            }
        }
        let b = br.name();
        for l in 0..config.layers {
            out.push(spec(format!("{b}.{l}.filter"), &[m, d, 2], Init::NearIdentityFilter));
            out.push(spec(format!("{b}.{l}.norm.gamma"), &[d], Init::Ones));
            out.push(spec(format!("{b}.{l}.norm.beta"), &[d], Init::Zeros));
            if br == Branch::Local {
                let h = 4 * k;
                out.push(spec(format!("{b}.{l}.gate.w1"), &[m, h], Init::Normal));
                out.push(spec(format!("{b}.{l}.gate.b1"), &[h], Init::Zeros));
                out.push(spec(format!("{b}.{l}.gate.w2"), &[h, h], Init::Normal));
                out.push(spec(format!("{b}.{l}.gate.b2"), &[h], Init::Zeros));
                out.push(spec(format!("{b}.{l}.gate.w3"), &[h, k], Init::Normal));
                out.push(spec(format!("{b}.{l}.gate.b3"), &[k], Init::Zeros));
            }
            out.push(spec(format!("{b}.{l}.ffn.w1"), &[d, 4 * d], Init::Normal));
            out.push(spec(format!("{b}.{l}.ffn.b1"), &[4 * d], Init::Zeros));
            out.push(spec(format!("{b}.{l}.ffn.w2"), &[4 * d, d], Init::Normal));
            out.push(spec(format!("{b}.{l}.ffn.b2"), &[d], Init::Zeros));
            out.push(spec(format!("{b}.{l}.ffn_norm.gamma"), &[d], Init::Ones));
            out.push(spec(format!("{b}.{l}.ffn_norm.beta"), &[d], Init::Zeros));
        }
    }
    let fused = d * config.branches().len();
    out.push(spec(String::from("head.proj"), &[fused, d], Init::Normal));
    out.push(spec(String::from("head.norm.gamma"), &[d], Init::Ones));
    out.push(spec(String::from("head.norm.beta"), &[d], Init::Zeros));
    out
}

/// Every learnable tensor and buffer of one model, in [`layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub num_items: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Fresh parameters: Gaussian embeddings and weights, near-identity
    /// complex filters, unit norms.
    pub fn init(config: &ModelConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            bail!(Data, "model needs at least one item");
        }
        let mut rng = SeededRng::fork(seed, 0x9a7a);
        let mut entries = Vec::new();
        for s in layout(config, num_items) {
            let numel: usize = s.shape.iter().product();
            let values: Vec<f64> = match s.init {
                Init::Normal => (0..numel).map(|_| INIT_STD * rng.normal()).collect(),
                Init::NearIdentityFilter => (0..numel)
                    .map(|i| if i % 2 == 0 { 1.0 } else { 0.0 } + INIT_STD * rng.normal())
                    .collect(),
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
            };
            entries.push((s.name, Tensor::new(&s.shape, values)?.with_grad(s.trainable)));
        }
        Self::from_entries(*config, num_items, entries)
    }

    /// Rebuilds from named tensors, which must match [`layout`] exactly.
    pub fn from_entries(config: ModelConfig, num_items: usize, entries: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let want = layout(&config, num_items);
        if want.len() != entries.len() {
            bail!(Shape, "expected {} parameter tensors, got {}", want.len(), entries.len());
        }
        let mut names = Vec::with_capacity(want.len());
        let mut tensors = Vec::with_capacity(want.len());
        let mut index = BTreeMap::new();
        for (i, (s, (name, t))) in want.into_iter().zip(entries).enumerate() {
            if s.name != name || s.shape != t.shape() {
                bail!(Shape, "parameter {i}: expected {} {:?}, got {name} {:?}", s.name, s.shape, t.shape());
            }
            index.insert(name.clone(), i);
            names.push(name);
            tensors.push(t.with_grad(s.trainable));
        }
        Ok(Self { config, num_items, names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Overwrites the values of `name`.
    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let Some(t) = self.get_mut(name) else {
            bail!(Index, "no parameter named {name}");
        };
        if t.numel() != values.len() {
            bail!(Shape, "{name} has {} values, got {}", t.numel(), values.len());
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                let Some(t) = self.get_mut(&name) else {
                    bail!(Index, "no buffer named {name}");
                };
                for (r, b) in t.values_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
