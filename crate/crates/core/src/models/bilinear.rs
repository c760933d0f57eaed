use crate::fields::{FieldError, FieldStack};
use crate::scalar::Real;
use crate::tensor::kernels::bilinear_resample;
use crate::tensor::{Tensor, TensorError};

/// Align-corners bilinear upsampling of a `[C, H, W]` tensor by `scale`.
pub fn bilinear_upsample<R: Real>(t: &Tensor<R>, scale: usize) -> Result<Tensor<R>, TensorError> {
    let &[c, h, w] = t.shape() else {
        return Err(TensorError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "bilinear_upsample expects [C, H, W]".into(),
        });
    };
    let out = bilinear_resample(t.data(), c, (h, w), (h * scale, w * scale));
    Tensor::new(&[c, h * scale, w * scale], out)
}

pub fn bilinear_upsample_stack(stack: &FieldStack, scale: usize) -> Result<FieldStack, FieldError> {
    let t = stack.to_tensor::<f64>();
    let up = bilinear_upsample(&t, scale)
        .map_err(|e| FieldError::InvalidGrid(e.to_string()))?;
    FieldStack::from_tensor(&stack.variables(), stack.spacing_m() / scale as f64, &up)
}
