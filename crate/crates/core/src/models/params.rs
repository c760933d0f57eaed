use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{ModelError, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn glorot(fan_in: usize, fan_out: usize) -> Self {
        Self::Glorot { fan_in, fan_out }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<R> {
    entries: Vec<(String, Tensor<R>)>,
}

impl<R: Real> ParamStore<R> {
    pub fn new(entries: Vec<(String, Tensor<R>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<R>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<R>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<R>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Every spec'd parameter present, in order, with the right shape.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<(), ModelError> {
        for (i, spec) in specs.iter().enumerate() {
            match self.entries.get(i) {
                Some((name, t)) if *name == spec.name => {
                    if t.shape() != spec.shape.as_slice() {
                        return Err(ModelError::ParamShape {
                            name: name.clone(),
                            expected: spec.shape.clone(),
                            found: t.shape().to_vec(),
                        });
                    }
                }
                _ => return Err(ModelError::MissingParam(spec.name.clone())),
            }
        }
        if let Some((name, _)) = self.entries.get(specs.len()) {
            return Err(ModelError::UnexpectedParam(name.clone()));
        }
        Ok(())
    }
}

/// Deterministic initialisation; parameter `i` draws from sub-stream `i`.
pub fn init_params<R: Real>(spec: &ModelSpec, seed: u64) -> ParamStore<R> {
    let entries = spec
        .param_specs()
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let n: usize = p.shape.iter().product();
            let data: Vec<f64> = match p.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Glorot { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = SplitMix64::stream(seed, i as u64);
                    (0..n).map(|_| rng.uniform(-bound, bound)).collect()
                }
            };
            let t = Tensor::from_f64(&p.shape, &data).expect("spec shapes are valid");
            (p.name, t)
        })
        .collect();
    ParamStore { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec::vit(4);
        let a: ParamStore<f64> = init_params(&spec, 3);
        let b: ParamStore<f64> = init_params(&spec, 3);
        assert_eq!(a, b);
        let c: ParamStore<f64> = init_params(&spec, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_bound_respected_and_head_zero() {
        let spec = ModelSpec::vit(4);
        let p: ParamStore<f64> = init_params(&spec, 1);
        let w = p.get("blocks.0.attn.qkv.w").unwrap();
        let bound = (6.0f64 / (96.0 + 288.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > 0.5 * bound));
        assert!(p.get("head.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("blocks.0.norm1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    }
}
