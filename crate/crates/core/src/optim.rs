//! Adam with per-parameter moment estimates plus the two decay schedules
//! used across the pipeline.

use crate::scalar::{sc, Scalar};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
    Linear,
}

impl Schedule {
    /// Learning rate at step `t` of `total`.
    pub fn lr_at(self, base: f64, t: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            Schedule::Linear => base * (1.0 - frac),
        }
    }
}

pub struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        let m = params.ids().map(|id| vec![S::zero(); params.get(id).numel()]).collect();
        let v = params.ids().map(|id| vec![S::zero(); params.get(id).numel()]).collect();
        Adam { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update. `grads` is ordered by `ParamId`; `None` entries are
    /// treated as zero gradients.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Vec<S>>], lr: f64) {
        self.t += 1;
        let b1 = sc::<S>(self.beta1);
        let b2 = sc::<S>(self.beta2);
        let eps = sc::<S>(self.eps);
        let bc1 = sc::<S>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = sc::<S>(1.0 - self.beta2.powi(self.t as i32));
        let lr = sc::<S>(lr);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let zero;
            let g: &[S] = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = vec![S::zero(); self.m[i].len()];
                    &zero
                }
            };
            let data = params.get_mut(id).data_mut();
            for j in 0..data.len() {
                let gj = g[j];
                self.m[i][j] = b1 * self.m[i][j] + (S::one() - b1) * gj;
                self.v[i][j] = b2 * self.v[i][j] + (S::one() - b2) * gj * gj;
                let mh = self.m[i][j] / bc1;
                let vh = self.v[i][j] / bc2;
                data[j] = data[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let id = params.add("x", Tensor::vector(vec![5.0, -3.0]).unwrap());
        let mut opt = Adam::new(&params);
        for _ in 0..800 {
            let g: Vec<f64> = params.get(id).data().iter().map(|&x| 2.0 * x).collect();
            opt.step(&mut params, &[Some(g)], 0.05);
        }
        for &x in params.get(id).data() {
            assert!(x.abs() < 1e-3, "did not converge: {x}");
        }
    }

    #[test]
    fn schedules_endpoints() {
        assert!((Schedule::Cosine.lr_at(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!(Schedule::Cosine.lr_at(1.0, 100, 100).abs() < 1e-12);
        assert!((Schedule::Linear.lr_at(2.0, 50, 100) - 1.0).abs() < 1e-12);
        assert!((Schedule::Constant.lr_at(0.3, 7, 10) - 0.3).abs() < 1e-12);
    }
}
