use crate::error::{Error, Result};
use crate::linalg::{gemm, Layout};
use crate::tensor::Tensor;

use super::ParamMut;

/// Fully connected layer computing `x . W + b` for a `[batch, in]` input.
#[derive(Debug, Clone)]
pub struct Dense {
    pub(super) weights: Tensor,
    pub(super) bias: Tensor,
    weight_grad: Tensor,
    bias_grad: Tensor,
    cached_input: Option<Tensor>,
    pub frozen: bool,
}

impl Dense {
    /// `weights` is `[in, out]`, `bias` is `[out]`.
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weights.matrix_dims()?;
        if bias.shape() != [out] {
            return Err(Error::shape("Dense::new", weights.shape(), bias.shape()));
        }
        Ok(Dense {
            weight_grad: Tensor::zeros(weights.shape()),
            bias_grad: Tensor::zeros(bias.shape()),
            weights,
            bias,
            cached_input: None,
            frozen: false,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_grad(&self) -> &Tensor {
        &self.weight_grad
    }

    pub fn bias_grad(&self) -> &Tensor {
        &self.bias_grad
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.inputs()] {
            return Err(Error::shape("dense input", input, &[self.inputs()]));
        }
        Ok(vec![self.units()])
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.matrix_dims()?;
        if cols != self.inputs() {
            return Err(Error::shape("dense_forward", x.shape(), self.weights.shape()));
        }
        x.matmul(&self.weights)?.add_row_broadcast(&self.bias)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(upstream, true)?.expect("input grad requested"))
    }

    pub(super) fn backward_impl(
        &mut self,
        upstream: &Tensor,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        let (batch, inputs) = x.matrix_dims()?;
        let units = self.units();
        if upstream.shape() != [batch, units] {
            return Err(Error::shape("dense_backward", upstream.shape(), &[batch, units]));
        }

        if !self.frozen {
            // dW = x^T . g
            gemm(
                inputs,
                batch,
                units,
                x.data(),
                Layout::transposed(inputs),
                upstream.data(),
                Layout::row_major(units),
                0.0,
                self.weight_grad.data_mut(),
            );
            let bg = self.bias_grad.data_mut();
            bg.fill(0.0);
            for row in upstream.data().chunks_exact(units) {
                for (b, g) in bg.iter_mut().zip(row) {
                    *b += g;
                }
            }
        }

        if !want_input_grad {
            return Ok(None);
        }
        // dx = g . W^T
        let mut dx = vec![0.0; batch * inputs];
        gemm(
            batch,
            units,
            inputs,
            upstream.data(),
            Layout::row_major(units),
            self.weights.data(),
            Layout::transposed(units),
            0.0,
            &mut dx,
        );
        Tensor::new(&[batch, inputs], dx).map(Some)
    }

    pub(super) fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                role: "weight",
                value: &mut self.weights,
                grad: &self.weight_grad,
                decay: true,
            },
            ParamMut {
                role: "bias",
                value: &mut self.bias,
                grad: &self.bias_grad,
                decay: false,
            },
        ]
    }
}
