//! Adam with bias correction.

use std::collections::HashMap;

use crate::array::DenseArray;
use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    /// Parameters left untouched because their gradient had a NaN or inf.
    pub skipped_non_finite: usize,
}

/// Adam state: first and second moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    moments: HashMap<String, (DenseArray<T>, DenseArray<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    /// Applies one update to every parameter and zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> StepReport {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let mut report = StepReport::default();
        for p in store.iter_mut() {
            if !p.grad.all_finite() {
                report.skipped_non_finite += 1;
                p.grad.fill(T::zero());
                continue;
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (DenseArray::zeros(p.value.shape()), DenseArray::zeros(p.value.shape())));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                md[i] = b1 * md[i] + (T::one() - b1) * g;
                vd[i] = b2 * vd[i] + (T::one() - b2) * g * g;
                *x -= step_size * md[i] / (vd[i].sqrt() / bc2_sqrt + eps);
            }
            p.grad.fill(T::zero());
            report.updated += 1;
        }
        report
    }

    pub fn moments(&self, name: &str) -> Option<&(DenseArray<T>, DenseArray<T>)> {
        self.moments.get(name)
    }

    pub fn set_moments(&mut self, name: impl Into<String>, m: DenseArray<T>, v: DenseArray<T>) {
        self.moments.insert(name.into(), (m, v));
    }

    pub fn named_moments(&self) -> impl Iterator<Item = (&String, &(DenseArray<T>, DenseArray<T>))> {
        self.moments.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", DenseArray::from_f64(&[1], &[p]).unwrap()).unwrap();
        s.get_mut(id).grad = DenseArray::from_f64(&[1], &[g]).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s);
        // t = 1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε).
        let want = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((s.get(s.id_of("p").unwrap()).value.item() - want).abs() < 1e-15);
        assert_eq!(s.get(s.id_of("p").unwrap()).grad.item(), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut s = scalar_store(0.5, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s);
        assert_eq!(s.get(s.id_of("p").unwrap()).value.item(), 0.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut s = scalar_store(0.5, f64::NAN);
        let mut opt = Adam::new(AdamConfig::default());
        let r = opt.step(&mut s);
        assert_eq!(r.skipped_non_finite, 1);
        assert_eq!(s.get(s.id_of("p").unwrap()).value.item(), 0.5);
    }
}
