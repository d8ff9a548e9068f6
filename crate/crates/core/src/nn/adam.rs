//! First/second-moment adaptive gradient rule.

use super::param::{Param, Params};

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl Adam {
    /// Apply one update to every trainable parameter of `net`.
    pub fn step(&mut self, net: &mut dyn Params, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        net.visit(&mut |p: &mut Param| {
            if !p.trainable {
                return;
            }
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.m)
                .and(&mut p.v)
                .and(&p.grad)
                .for_each(|val, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *val -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    struct One(Param);
    impl Params for One {
        fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (x - 3)^2
        let mut net = One(Param::new("x", ArrayD::zeros(ndarray::IxDyn(&[1]))));
        let mut opt = Adam::default();
        for _ in 0..4000 {
            let x = net.0.value[[0]];
            net.0.grad[[0]] = 2.0 * (x - 3.0);
            opt.step(&mut net, 0.05);
        }
        assert!((net.0.value[[0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn non_trainable_params_untouched() {
        let mut net = One(Param::buffer("b", ArrayD::from_elem(ndarray::IxDyn(&[2]), 5.0)));
        net.0.grad.fill(1.0);
        let mut opt = Adam::default();
        opt.step(&mut net, 0.1);
        assert!(net.0.value.iter().all(|&v| v == 5.0));
    }
}
