use std::collections::HashMap;

use super::{param_specs, ArchConfig, Init, Role};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::routing::{ExpertParams, MoeLayerParams};
use crate::seed;
use crate::tensor::{init_truncated_normal, Tensor};

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// All weights of a model, in the canonical layout order of its arch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Seeded initialization; tensor `k` of the layout draws from its own stream.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let tensors = param_specs(arch)
            .into_iter()
            .enumerate()
            .map(|(k, spec)| {
                let stream = seed::derive(seed, k as u64);
                let tensor = match spec.init {
                    Init::Embedding => init_truncated_normal(&spec.shape, 0.0, EMBED_STD, stream)?,
                    Init::Matrix { fan_in, fan_out } => {
                        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                        init_truncated_normal(&spec.shape, 0.0, std, stream)?
                    }
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::full(&spec.shape, 1.0),
                };
                Ok(NamedTensor {
                    name: spec.name,
                    role: spec.role,
                    tensor: tensor.with_requires_grad(true),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::indexed(arch.clone(), tensors))
    }

    fn indexed(arch: ArchConfig, tensors: Vec<NamedTensor>) -> Self {
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Self { arch, tensors, index }
    }

    /// Assembles a model from named tensors in any order. Names, shapes and
    /// roles must match the layout of `arch` exactly.
    pub fn from_tensors(arch: ArchConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        arch.validate()?;
        let specs = param_specs(&arch);
        if specs.len() != tensors.len() {
            return Err(Error::ArchMismatch(format!(
                "{} tensors given, layout has {}",
                tensors.len(),
                specs.len()
            )));
        }
        let mut by_name: HashMap<String, NamedTensor> = HashMap::with_capacity(tensors.len());
        for t in tensors {
            let name = t.name.clone();
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::ArchMismatch(format!("duplicate tensor `{name}`")));
            }
        }
        let mut ordered = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| Error::ArchMismatch(format!("missing tensor `{}`", spec.name)))?;
            if t.tensor.shape() != spec.shape.as_slice() || t.role != spec.role {
                return Err(Error::ArchMismatch(format!(
                    "`{}`: got {:?} {:?}, layout wants {:?} {:?}",
                    spec.name,
                    t.tensor.shape(),
                    t.role,
                    spec.shape,
                    spec.role
                )));
            }
            ordered.push(t);
        }
        Ok(Self::indexed(arch, ordered))
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<NamedTensor> {
        self.tensors
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|t| &mut t.tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i].tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i].tensor),
            None => Err(Error::InvalidArgument(format!("no tensor named `{name}`"))),
        }
    }

    pub fn num_params(&self) -> u64 {
        self.tensors.iter().map(|t| t.tensor.numel() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.tensor.zero_grad());
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.tensors.iter_mut().for_each(|t| t.tensor.set_requires_grad(requires_grad));
    }

    /// Moves gradients of a finished backward pass onto the tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &super::BoundModel) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(bound.vars()) {
            tape.accumulate_grad_into(v, &mut t.tensor)?;
        }
        Ok(())
    }

    /// Name prefix of the FFN block of global layer `layer`.
    pub fn layer_prefix(&self, layer: usize) -> String {
        if layer < self.arch.enc_layers {
            format!("enc.{layer}")
        } else {
            format!("dec.{}", layer - self.arch.enc_layers)
        }
    }

    /// Copy of one MoE layer's gate and experts.
    pub fn moe_layer(&self, layer: usize) -> Result<MoeLayerParams> {
        let p = format!("{}.moe", self.layer_prefix(layer));
        let gate = self.get(&format!("{p}.gate"))?.clone();
        let experts = (0..self.arch.num_experts)
            .map(|e| {
                let q = format!("{p}.expert.{e}");
                Ok(ExpertParams {
                    w1: self.get(&format!("{q}.w1"))?.clone(),
                    b1: self.get(&format!("{q}.b1"))?.clone(),
                    w2: self.get(&format!("{q}.w2"))?.clone(),
                    b2: self.get(&format!("{q}.b2"))?.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MoeLayerParams { gate, experts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_count, param_specs};

    #[test]
    fn build_is_deterministic() {
        let arch = ArchConfig::toy(20, 2);
        let a = ModelParams::build(&arch, 7).unwrap();
        let b = ModelParams::build(&arch, 7).unwrap();
        assert!(a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.tensor.bit_eq(&y.tensor)));
        let c = ModelParams::build(&arch, 8).unwrap();
        assert!(!a.get("embed").unwrap().bit_eq(c.get("embed").unwrap()));
    }

    #[test]
    fn experts_differ_and_count_matches_layout() {
        let arch = ArchConfig::toy(20, 2);
        let m = ModelParams::build(&arch, 1).unwrap();
        assert_ne!(m.get("enc.1.moe.expert.0.w1").unwrap(), m.get("enc.1.moe.expert.1.w1").unwrap());
        assert_eq!(m.tensors().len(), param_specs(&arch).len());
        assert_eq!(m.num_params(), param_count(&arch).total);
    }

    #[test]
    fn from_tensors_reorders_and_checks() {
        let arch = ArchConfig::toy(20, 2);
        let m = ModelParams::build(&arch, 1).unwrap();
        let mut ts = m.clone().into_tensors();
        ts.reverse();
        let back = ModelParams::from_tensors(arch.clone(), ts.clone()).unwrap();
        assert_eq!(back, m);
        ts.pop();
        assert!(matches!(ModelParams::from_tensors(arch.clone(), ts), Err(Error::ArchMismatch(_))));
        assert!(ModelParams::from_tensors(arch.with_experts(3), m.into_tensors()).is_err());
    }
}
