//! Gated MLP block used by the stacked attention layers: normalize, then a
//! SiLU gate elementwise-multiplied with a linear branch, then project out.

use rand::Rng;

use crate::attention::LnParams;
use crate::error::Result;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Ctx;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GatedMlp<T> {
    pub ln: LnParams<T>,
    pub w_gate: Tensor<T>,
    pub b_gate: Tensor<T>,
    pub w_hidden: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Scalar> GatedMlp<T> {
    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            ln: LnParams::unit(d),
            w_gate: Tensor::randn(rng, d, d, std),
            b_gate: Tensor::zeros(1, d),
            w_hidden: Tensor::randn(rng, d, d, std),
            w_out: Tensor::randn(rng, d, d, std),
        }
    }

    /// out = (SiLU(ŷ·W_g + b_g) ⊙ (ŷ·W_h)) · W_o with ŷ = LayerNorm(y).
    pub fn forward(&self, ctx: &mut Ctx<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let yn = ops::layer_norm(ctx, y, &self.ln.gain, &self.ln.bias)?;
        let gate_lin = ops::matmul(ctx, &yn, &self.w_gate)?;
        let gate_pre = ops::add_row(ctx, &gate_lin, &self.b_gate)?;
        let gate = ops::silu(ctx, &gate_pre)?;
        let hidden = ops::matmul(ctx, &yn, &self.w_hidden)?;
        let mixed = ops::mul(ctx, &gate, &hidden)?;
        ops::matmul(ctx, &mixed, &self.w_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_preserving() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = GatedMlp::<f64>::init(&mut rng, 6);
        let x = Tensor::randn(&mut rng, 3, 6, 1.0);
        let mut ctx = Ctx::inference();
        let y = g.forward(&mut ctx, &x).unwrap();
        assert_eq!(y.shape(), &[3, 6]);
    }

    #[test]
    fn large_negative_gate_bias_closes_the_gate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut g = GatedMlp::<f64>::init(&mut rng, 6);
        g.b_gate = Tensor::matrix(1, 6, vec![-1e4; 6]).unwrap();
        let x = Tensor::randn(&mut rng, 3, 6, 1.0);
        let mut ctx = Ctx::inference();
        let y = g.forward(&mut ctx, &x).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9), "gate should close");
    }
}
