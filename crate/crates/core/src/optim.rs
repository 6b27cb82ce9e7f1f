//! Named parameter storage and the decoupled-weight-decay Adam optimizer.

use indexmap::IndexMap;

use crate::graph::Mat;
use crate::scalar::Scalar;

/// Insertion-ordered map of named parameter matrices. The order is part of
/// the determinism contract: optimizers and checkpoints walk it as-is.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F: Scalar> {
    entries: IndexMap<String, Mat<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Mat<F>) {
        assert!(
            self.entries.insert(name.to_string(), value).is_none(),
            "parameter {name} inserted twice"
        );
    }

    pub fn get(&self, name: &str) -> &Mat<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn maybe(&self, name: &str) -> Option<&Mat<F>> {
        self.entries.get(name)
    }

    pub fn maybe_mut(&mut self, name: &str) -> Option<&mut Mat<F>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }
}

/// AdamW: adaptive moments plus weight decay applied directly to the
/// weights, decoupled from the gradient-derived update.
pub struct AdamW<F: Scalar> {
    lr: F,
    weight_decay: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: u64,
    moments: IndexMap<String, (Mat<F>, Mat<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr: F::from_f64(lr),
            weight_decay: F::from_f64(weight_decay),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every (name, grad) pair, applied to whichever of the
    /// given stores holds the parameter. Parameters absent from `grads` are
    /// untouched. Pairs are consumed in the given order, which callers keep
    /// deterministic.
    pub fn step<'a>(
        &mut self,
        stores: &mut [&mut ParamStore<F>],
        grads: impl IntoIterator<Item = (&'a str, &'a Mat<F>)>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (name, grad) in grads {
            let value = stores
                .iter_mut()
                .find_map(|s| s.maybe_mut(name))
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Mat::zeros(grad.dim()), Mat::zeros(grad.dim())));
            let one = F::one();
            azip(m, grad, |m, g| *m = self.beta1 * *m + (one - self.beta1) * g);
            azip(v, grad, |v, g| *v = self.beta2 * *v + (one - self.beta2) * g * g);
            for ((x, &m), &v) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *x = *x - self.lr * mhat / (vhat.sqrt() + self.eps) - self.lr * self.weight_decay * *x;
            }
        }
    }
}

fn azip<F: Scalar>(dst: &mut Mat<F>, src: &Mat<F>, mut f: impl FnMut(&mut F, F)) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        f(d, s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, m: Mat<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, m);
        s
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let w0 = Mat::from_shape_vec((2, 2), vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut params = store_with("w", w0.clone());
        let grad = Mat::from_elem((2, 2), 4.0);
        let mut opt = AdamW::new(0.0, 0.1);
        opt.step(&mut [&mut params], [("w", &grad)]);
        assert_eq!(params.get("w"), &w0);
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively_under_zero_gradients() {
        let w0 = Mat::from_shape_vec((1, 3), vec![2.0, -4.0, 8.0]).unwrap();
        let mut params = store_with("w", w0.clone());
        let zeros = Mat::zeros((1, 3));
        let (lr, wd) = (0.1, 0.01);
        let mut opt = AdamW::new(lr, wd);
        opt.step(&mut [&mut params], [("w", &zeros)]);
        opt.step(&mut [&mut params], [("w", &zeros)]);
        let factor = (1.0 - lr * wd).powi(2);
        for (got, want) in params.get("w").iter().zip(w0.iter()) {
            assert!((got - want * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_direction_is_descended() {
        let mut params = store_with("w", Mat::from_elem((1, 1), 1.0));
        let grad = Mat::from_elem((1, 1), 1.0);
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut [&mut params], [("w", &grad)]);
        assert!(params.get("w")[(0, 0)] < 1.0);
    }

    #[test]
    fn untouched_parameters_stay_put() {
        let mut params = ParamStore::new();
        params.insert("a", Mat::from_elem((1, 1), 1.0));
        params.insert("b", Mat::from_elem((1, 1), 5.0));
        let grad = Mat::from_elem((1, 1), 1.0);
        let mut opt = AdamW::new(0.5, 0.5);
        opt.step(&mut [&mut params], [("a", &grad)]);
        assert_eq!(params.get("b")[(0, 0)], 5.0);
    }
}
