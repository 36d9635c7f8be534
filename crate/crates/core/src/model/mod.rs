//! Pre-LN Transformer encoder-decoder whose every `moe_every`-th FFN is a
//! mixture of experts.
//!
//! The tensor layout is enumerated once by [`param_specs`]; model building,
//! parameter counting, and checkpoint manifests all derive from it. The 1-based
//! even layers of encoder and decoder carry the MoE FFN under the default
//! stride of 2.

mod forward;
mod params;

pub use forward::{generate, generate_batch, sinusoidal_positions, BoundModel, ForwardOutput};
pub use params::{ModelParams, NamedTensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub num_experts: usize,
    pub moe_every: usize,
    pub tied_embeddings: bool,
}

impl ArchConfig {
    /// 24/12 layers, d=1024, f=4096, 16 heads, 250k vocabulary.
    pub fn large(num_experts: usize) -> Self {
        Self {
            vocab: 250_000,
            d_model: 1024,
            ffn_dim: 4096,
            enc_layers: 24,
            dec_layers: 12,
            heads: 16,
            num_experts,
            moe_every: 2,
            tied_embeddings: true,
        }
    }

    /// 12/6 layers, d=768, f=3072, 12 heads.
    pub fn small(num_experts: usize) -> Self {
        Self {
            d_model: 768,
            ffn_dim: 3072,
            enc_layers: 12,
            dec_layers: 6,
            heads: 12,
            ..Self::large(num_experts)
        }
    }

    /// Trainable on one CPU core in milliseconds per step.
    pub fn toy(vocab: usize, num_experts: usize) -> Self {
        Self {
            vocab,
            d_model: 16,
            ffn_dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            num_experts,
            moe_every: 2,
            tied_embeddings: true,
        }
    }

    pub fn preset(name: &str, num_experts: usize) -> Result<Self> {
        match name {
            "large" => Ok(Self::large(num_experts)),
            "small" => Ok(Self::small(num_experts)),
            "toy" => Ok(Self::toy(64, num_experts)),
            other => Err(Error::Config(format!("unknown arch preset `{other}` (large | small | toy)"))),
        }
    }

    pub fn with_experts(&self, num_experts: usize) -> Self {
        Self {
            num_experts,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.vocab == 0 || self.d_model == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return bad("vocab, d_model, ffn_dim and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.moe_every == 0 {
            return bad("moe_every must be at least 1".into());
        }
        if self.num_experts == 0 {
            return bad("num_experts must be at least 1".into());
        }
        Ok(())
    }

    /// Whether local layer `i` (0-based) of a stack carries an MoE FFN.
    pub fn is_moe(&self, i: usize) -> bool {
        (i + 1) % self.moe_every == 0
    }

    pub fn moe_layer_count(&self) -> usize {
        self.enc_layers / self.moe_every + self.dec_layers / self.moe_every
    }

    /// Global indices (encoder `0..enc`, decoder `enc..enc+dec`) of MoE layers.
    pub fn moe_layers(&self) -> Vec<usize> {
        let enc = (0..self.enc_layers).filter(|&i| self.is_moe(i));
        let dec = (0..self.dec_layers).filter(|&i| self.is_moe(i)).map(|i| self.enc_layers + i);
        enc.chain(dec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Role {
    NonExpert,
    Expert { layer: usize, idx: usize },
    Gate { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Embedding,
    /// Truncated normal with std `sqrt(2 / (fan_in + fan_out))`.
    Matrix { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, role: Role, init: Init) {
        self.0.push(ParamSpec { name, shape, role, init });
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize, role: Role) {
        let init = Init::Matrix {
            fan_in: rows,
            fan_out: cols,
        };
        self.push(name, vec![rows, cols], role, init);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), vec![d], Role::NonExpert, Init::Ones);
        self.push(format!("{prefix}.b"), vec![d], Role::NonExpert, Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.matrix(format!("{prefix}.w{p}"), d, d, Role::NonExpert);
            self.push(format!("{prefix}.b{p}"), vec![d], Role::NonExpert, Init::Zeros);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize, role: Role) {
        self.matrix(format!("{prefix}.w1"), d, f, role);
        self.push(format!("{prefix}.b1"), vec![f], role, Init::Zeros);
        self.matrix(format!("{prefix}.w2"), f, d, role);
        self.push(format!("{prefix}.b2"), vec![d], role, Init::Zeros);
    }

    fn feed_forward(&mut self, arch: &ArchConfig, prefix: &str, local: usize, global: usize) {
        let (d, f) = (arch.d_model, arch.ffn_dim);
        if arch.is_moe(local) {
            self.matrix(format!("{prefix}.moe.gate"), d, arch.num_experts, Role::Gate { layer: global });
            for e in 0..arch.num_experts {
                let role = Role::Expert { layer: global, idx: e };
                self.ffn(&format!("{prefix}.moe.expert.{e}"), d, f, role);
            }
        } else {
            self.ffn(&format!("{prefix}.ffn"), d, f, Role::NonExpert);
        }
    }
}

/// Every tensor of the model in canonical order.
pub fn param_specs(arch: &ArchConfig) -> Vec<ParamSpec> {
    let d = arch.d_model;
    let mut s = Specs(Vec::new());
    s.push("embed".into(), vec![arch.vocab, d], Role::NonExpert, Init::Embedding);
    if !arch.tied_embeddings {
        s.matrix("lm_head".into(), d, arch.vocab, Role::NonExpert);
    }
    for i in 0..arch.enc_layers {
        let p = format!("enc.{i}");
        s.layer_norm(&format!("{p}.ln1"), d);
        s.attention(&format!("{p}.attn"), d);
        s.layer_norm(&format!("{p}.ln2"), d);
        s.feed_forward(arch, &p, i, i);
    }
    s.layer_norm("enc.ln_f", d);
    for i in 0..arch.dec_layers {
        let p = format!("dec.{i}");
        s.layer_norm(&format!("{p}.ln1"), d);
        s.attention(&format!("{p}.attn"), d);
        s.layer_norm(&format!("{p}.ln2"), d);
        s.attention(&format!("{p}.xattn"), d);
        s.layer_norm(&format!("{p}.ln3"), d);
        s.feed_forward(arch, &p, i, arch.enc_layers + i);
    }
    s.layer_norm("dec.ln_f", d);
    s.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub non_expert: u64,
    pub expert: u64,
    pub gate: u64,
}

/// Closed-form parameter count.
pub fn param_count(arch: &ArchConfig) -> ParamCount {
    let v = arch.vocab as u64;
    let d = arch.d_model as u64;
    let f = arch.ffn_dim as u64;
    let e = arch.num_experts as u64;
    let attn = 4 * d * d + 4 * d;
    let ln = 2 * d;
    let ffn = 2 * d * f + d + f;
    let enc_moe = (arch.enc_layers / arch.moe_every) as u64;
    let dec_moe = (arch.dec_layers / arch.moe_every) as u64;
    let enc = arch.enc_layers as u64;
    let dec = arch.dec_layers as u64;
    let embed = if arch.tied_embeddings { v * d } else { 2 * v * d };
    let non_expert = embed
        + enc * (attn + 2 * ln)
        + dec * (2 * attn + 3 * ln)
        + (enc - enc_moe + dec - dec_moe) * ffn
        + 2 * ln;
    let moe = enc_moe + dec_moe;
    let expert = moe * e * ffn;
    let gate = moe * d * e;
    ParamCount {
        total: non_expert + expert + gate,
        non_expert,
        expert,
        gate,
    }
}

/// Parameter count obtained by summing the enumerated layout.
pub fn param_count_enumerated(arch: &ArchConfig) -> ParamCount {
    let mut c = ParamCount::default();
    for spec in param_specs(arch) {
        let n = spec.numel() as u64;
        match spec.role {
            Role::NonExpert => c.non_expert += n,
            Role::Expert { .. } => c.expert += n,
            Role::Gate { .. } => c.gate += n,
        }
        c.total += n;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_enumeration() {
        for arch in [
            ArchConfig::toy(40, 2),
            ArchConfig::toy(40, 1),
            ArchConfig::small(4),
            ArchConfig::large(8),
            ArchConfig {
                moe_every: 3,
                tied_embeddings: false,
                ..ArchConfig::toy(33, 3)
            },
        ] {
            assert_eq!(param_count(&arch), param_count_enumerated(&arch), "{arch:?}");
        }
    }

    #[test]
    fn large_arch_has_eighteen_moe_layers() {
        let arch = ArchConfig::large(64);
        assert_eq!(arch.moe_layer_count(), 18);
        assert_eq!(arch.moe_layers().len(), 18);
        assert_eq!(arch.moe_layers()[0], 1);
        assert_eq!(arch.moe_layers()[12], 25);
        let gates = param_specs(&arch).iter().filter(|s| matches!(s.role, Role::Gate { .. })).count();
        assert_eq!(gates, 18);
    }

    #[test]
    fn count_is_affine_in_experts() {
        let c = |e| param_count(&ArchConfig::large(e)).total as i128;
        let step = c(2) - c(1);
        assert_eq!(c(4) - c(2), 2 * step);
        // 18 layers × (2df + d + f + d)
        assert_eq!(step, 18 * (2 * 1024 * 4096 + 1024 + 4096 + 1024));
    }

    #[test]
    fn hand_computed_dense_layer() {
        // d=4, f=8, V=10, 1 encoder + 1 decoder layer, no MoE (stride 5).
        let arch = ArchConfig {
            vocab: 10,
            d_model: 4,
            ffn_dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            num_experts: 1,
            moe_every: 5,
            tied_embeddings: true,
        };
        let attn = 4 * 16 + 4 * 4;
        let ffn = 2 * 4 * 8 + 4 + 8;
        let expected = 40 + (attn + 2 * 8 + ffn) + (2 * attn + 3 * 8 + ffn) + 2 * 8;
        assert_eq!(param_count(&arch).total, expected as u64);
        assert_eq!(param_count(&arch).gate, 0);
    }

    #[test]
    fn validation() {
        assert!(ArchConfig::toy(10, 2).validate().is_ok());
        let bad = ArchConfig {
            heads: 3,
            ..ArchConfig::toy(10, 2)
        };
        assert!(bad.validate().is_err());
        assert!(ArchConfig::toy(10, 0).validate().is_err());
        assert!(ArchConfig::preset("huge", 1).is_err());
    }
}
