use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tensor};
use crate::scalar::Scalar;

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    /// Steps skipped because a gradient was not finite.
    pub skipped: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, steps: 0, m: BTreeMap::new(), v: BTreeMap::new(), skipped: 0 }
    }

    /// Applies one update. Returns `false`, leaving parameters and state
    /// untouched, if any gradient is NaN or infinite.
    pub fn step<S: Scalar>(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) -> bool {
        if grads.values().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient, optimizer step {} skipped", self.steps + 1);
            return false;
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *pv = S::lit(pv.as_f64() - update);
            }
        }
        true
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = S::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(x));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_store(1.5);
        Adam::default().step(&mut p, &grad(0.0), 0.1);
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        Adam::default().step(&mut p, &grad(1.0), 1e-3);
        assert!((p.get("w").unwrap().item() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn two_step_trace() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let mut p = scalar_store(1.0);
        let mut adam = Adam::default();
        adam.step(&mut p, &grad(0.5), lr);
        adam.step(&mut p, &grad(-2.0), lr);
        // hand-rolled recurrence
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, g) in [(1, 0.5f64), (2, -2.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(k));
            let vh = v / (1.0 - b2.powi(k));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.get("w").unwrap().item() - w).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = scalar_store(2.0);
        let mut adam = Adam::default();
        assert!(!adam.step(&mut p, &grad(f64::NAN), 0.1));
        assert_eq!(p.get("w").unwrap().item(), 2.0);
        assert_eq!((adam.steps, adam.skipped), (0, 1));
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap())]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let d = g["a"].data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
