//! Learnable parameters and the visitor used by optimizers and checkpoints.

use ndarray::ArrayD;

/// One named tensor with its gradient and first/second moment accumulators.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
    /// Running statistics and other buffers are visited but never optimized.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            m,
            v,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding parameters exposes them for optimization and serialization.
pub trait Params {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grads(&mut self) {
        self.visit(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}
