//! The three downscalers: a shifted-window transformer, a residual CNN and
//! align-corners bilinear interpolation, plus checkpoint serialisation.
//!
//! Both learned models add their output to the bilinear upsampling of the
//! input, and their final projection starts at zero, so a fresh model
//! reproduces the bilinear baseline exactly.

mod bilinear;
pub mod checkpoint;
mod error;
mod params;
mod resnet;
mod spec;
mod vit;

pub use bilinear::{bilinear_upsample, bilinear_upsample_stack};
pub use checkpoint::Checkpoint;
pub use error::ModelError;
pub use params::{init_params, Init, ParamSpec, ParamStore};
pub use spec::{ModelKind, ModelSpec, ResnetSpec, VitSpec};

use crate::scalar::Real;
use crate::tensor::{Graph, Tensor, Var};

/// A model specification together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<R> {
    spec: ModelSpec,
    params: ParamStore<R>,
}

impl<R: Real> Model<R> {
    pub fn new(spec: ModelSpec, params: ParamStore<R>) -> Result<Self, ModelError> {
        spec.validate()?;
        params.check_against(&spec.param_specs())?;
        Ok(Self { spec, params })
    }

    /// Freshly initialised model (zero output projection).
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let params = init_params(&spec, seed);
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    /// Adds every parameter to `g` as a leaf, trainable or constant.
    pub fn register(&self, g: &mut Graph<R>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Maps a coarse `[C, H, W]` node to a fine `[C, sH, sW]` node.
    pub fn forward(&self, g: &mut Graph<R>, params: &[Var], input: Var) -> Result<Var, ModelError> {
        self.spec.check_input(g.shape(input))?;
        match self.spec.kind {
            ModelKind::Vit => vit::forward(&self.spec, g, params, input),
            ModelKind::Resnet => resnet::forward(&self.spec, g, params, input),
            ModelKind::Bilinear => Ok(g.bilinear_upsample(input, self.spec.scale)?),
        }
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, input: &Tensor<R>) -> Result<Tensor<R>, ModelError> {
        let mut g = Graph::new();
        let params = self.register(&mut g, false);
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, &params, x)?;
        Ok(g.value(y).clone())
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_model_matches_free_function() {
        let spec = ModelSpec::bilinear(3);
        let m = Model::<f64>::init(spec, 0).unwrap();
        let x = Tensor::from_f64(&[3, 4, 4], &(0..48).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), bilinear_upsample(&x, 2).unwrap());
    }
}
