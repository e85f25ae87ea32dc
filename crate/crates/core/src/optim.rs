//! Adam over the parameters of a [`Module`].

use crate::tensor::Module;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    /// One update from the gradients stored on the parameters, which are then cleared.
    /// Parameters without a gradient keep their value; their moments still decay.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        module.visit_mut(&mut |p| {
            let n = p.value.numel();
            if ms.len() <= k {
                ms.push(vec![0.0; n]);
                vs.push(vec![0.0; n]);
            }
            let grad = p.value.grad.take();
            let (m, v) = (&mut ms[k], &mut vs[k]);
            let data = p.value.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                if grad.is_some() {
                    data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
            k += 1;
        });
    }
}
