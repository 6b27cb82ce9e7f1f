//! Relation-label prediction head: one hidden layer with ReLU, then softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabelInventory;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, TensorId};
use crate::optim::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    /// Defaults to the encoder dim when built through the trainer.
    pub hidden_dim: usize,
    pub num_labels: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_labels == 0 {
            return Err(Error::Config("classifier dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Feedforward head: h = ReLU(A1·φ + b1), p = softmax(A2·h + b2).
/// Weights are stored input-major ("clf.w1" is [input_dim, hidden_dim]).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F: Scalar> {
    cfg: ClassifierConfig,
    params: ParamStore<F>,
}

impl<F: Scalar> ClassifierHead<F> {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = F::from_f64(0.02);
        let mut params = ParamStore::new();
        params.insert(
            "clf.w1",
            Mat::from_shape_fn((cfg.input_dim, cfg.hidden_dim), |_| {
                F::standard_normal(&mut rng) * std
            }),
        );
        params.insert("clf.b1", Mat::zeros((1, cfg.hidden_dim)));
        params.insert(
            "clf.w2",
            Mat::from_shape_fn((cfg.hidden_dim, cfg.num_labels), |_| {
                F::standard_normal(&mut rng) * std
            }),
        );
        params.insert("clf.b2", Mat::zeros((1, cfg.num_labels)));
        Ok(ClassifierHead { cfg, params })
    }

    pub fn from_parts(cfg: ClassifierConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(ClassifierHead { cfg, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Probability vector (p_1..p_m) for one embedding; components in (0,1)
    /// and summing to 1.
    pub fn classify(&self, phi: &[F]) -> Result<Vec<F>> {
        if phi.len() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "embedding width {} does not match classifier input {}",
                phi.len(),
                self.cfg.input_dim
            )));
        }
        let w1 = self.params.get("clf.w1");
        let b1 = self.params.get("clf.b1");
        let w2 = self.params.get("clf.w2");
        let b2 = self.params.get("clf.b2");
        let mut hidden = vec![F::zero(); self.cfg.hidden_dim];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = b1[(0, j)];
            for (i, &x) in phi.iter().enumerate() {
                acc = acc + x * w1[(i, j)];
            }
            *h = if acc > F::zero() { acc } else { F::zero() };
        }
        let mut logits = vec![F::zero(); self.cfg.num_labels];
        for (k, l) in logits.iter_mut().enumerate() {
            let mut acc = b2[(0, k)];
            for (j, &h) in hidden.iter().enumerate() {
                acc = acc + h * w2[(j, k)];
            }
            *l = acc;
        }
        Ok(softmax(&logits))
    }

    /// Graph twin of [`Self::classify`] up to the softmax: logits [B, m] for
    /// a [B, input_dim] embedding node, wired for backprop.
    pub fn logits_node(&self, g: &mut Graph<F>, phi: TensorId) -> Result<TensorId> {
        if g.value(phi).ncols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "embedding width {} does not match classifier input {}",
                g.value(phi).ncols(),
                self.cfg.input_dim
            )));
        }
        let w1 = g.param("clf.w1", self.params.get("clf.w1"));
        let b1 = g.param("clf.b1", self.params.get("clf.b1"));
        let w2 = g.param("clf.w2", self.params.get("clf.w2"));
        let b2 = g.param("clf.b2", self.params.get("clf.b2"));
        let h1 = g.matmul(phi, w1);
        let h1b = g.add_row(h1, b1);
        let h = g.relu(h1b);
        let l = g.matmul(h, w2);
        Ok(g.add_row(l, b2))
    }
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Argmax index; ties break toward the lowest index.
pub fn predict_index<F: Scalar>(probs: &[F]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Argmax label from the inventory.
pub fn predict_label<'a, F: Scalar>(probs: &[F], inventory: &'a LabelInventory) -> Result<&'a str> {
    if probs.len() != inventory.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            inventory.len()
        )));
    }
    Ok(inventory
        .label(predict_index(probs))
        .expect("index within inventory"))
}

/// Cross-entropy of the gold label: −log p_gold.
pub fn classification_loss<F: Scalar>(probs: &[F], gold_index: usize) -> Result<F> {
    if gold_index >= probs.len() {
        return Err(Error::Shape(format!(
            "gold index {gold_index} outside {} classes",
            probs.len()
        )));
    }
    Ok(-probs[gold_index].ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_head(input: usize, hidden: usize, m: usize) -> ClassifierHead<f64> {
        let cfg = ClassifierConfig {
            input_dim: input,
            hidden_dim: hidden,
            num_labels: m,
            seed: 0,
        };
        let mut params = ParamStore::new();
        params.insert("clf.w1", Mat::zeros((input, hidden)));
        params.insert("clf.b1", Mat::zeros((1, hidden)));
        params.insert("clf.w2", Mat::zeros((hidden, m)));
        params.insert("clf.b2", Mat::zeros((1, m)));
        ClassifierHead::from_parts(cfg, params).unwrap()
    }

    #[test]
    fn all_zero_weights_give_the_uniform_distribution() {
        let head = zero_head(3, 4, 5);
        let probs = head.classify(&[0.7, -0.1, 2.0]).unwrap();
        for p in probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_class_instance() {
        // φ=(1,0), A1=I, b1=0, A2=[[1,0],[0,0]], b2=0 → logits (1,0)
        let mut head = zero_head(2, 2, 2);
        {
            let w1 = head.params_mut().get_mut("clf.w1");
            w1[(0, 0)] = 1.0;
            w1[(1, 1)] = 1.0;
        }
        {
            // A2 is m×hidden in math terms; stored hidden-major as [hidden, m]
            let w2 = head.params_mut().get_mut("clf.w2");
            w2[(0, 0)] = 1.0;
        }
        let probs = head.classify(&[1.0, 0.0]).unwrap();
        assert!((probs[0] - 0.7310585786300049).abs() < 1e-9);
        assert!((probs[1] - 0.2689414213699951).abs() < 1e-9);
    }

    #[test]
    fn probabilities_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = ClassifierConfig {
            input_dim: 6,
            hidden_dim: 5,
            num_labels: 7,
            seed: 3,
        };
        let head: ClassifierHead<f64> = ClassifierHead::new(cfg).unwrap();
        for _ in 0..100 {
            let phi: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let probs = head.classify(&phi).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let head = zero_head(3, 2, 2);
        assert!(head.classify(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn argmax_and_tie_breaking() {
        assert_eq!(predict_index(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(predict_index(&[0.5, 0.5]), 0);
        let inv = LabelInventory::from_labels(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(predict_label(&[0.1, 0.7, 0.2], &inv).unwrap(), "b");
    }

    #[test]
    fn softmax_is_shift_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let shift = rng.random::<f64>() * 20.0 - 10.0;
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let a = softmax(&logits);
            let b = softmax(&shifted);
            assert_eq!(predict_index(&a), predict_index(&b));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn classification_loss_closed_forms() {
        assert_eq!(classification_loss(&[1.0, 0.0], 0).unwrap(), 0.0);
        let uniform = [0.25f64; 4];
        let loss = classification_loss(&uniform, 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        let tiny = classification_loss(&[1.0 - 1e-10, 1e-10], 1).unwrap();
        assert!(tiny > 20.0);
    }

    #[test]
    fn graph_path_agrees_with_pure_path_and_gradients_check_out() {
        let cfg = ClassifierConfig {
            input_dim: 4,
            hidden_dim: 3,
            num_labels: 3,
            seed: 11,
        };
        let head: ClassifierHead<f64> = ClassifierHead::new(cfg).unwrap();
        let phi = vec![0.4, -1.2, 0.7, 0.3];

        let mut g: Graph<f64> = Graph::new();
        let phi_node = g.param("phi", &Mat::from_shape_vec((1, 4), phi.clone()).unwrap());
        let logits = head.logits_node(&mut g, phi_node).unwrap();
        let probs_from_graph = softmax(&g.value(logits).row(0).to_vec());
        let probs = head.classify(&phi).unwrap();
        for (a, b) in probs_from_graph.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }

        // gradient of −log p_gold w.r.t. φ, against central differences
        let gold = 1usize;
        let loss = g.cross_entropy_mean(logits, vec![gold]);
        g.backward(loss);
        let grad = g.param_grad("phi").unwrap().clone();
        let eval = |phi: &[f64]| -> f64 {
            classification_loss(&head.classify(phi).unwrap(), gold).unwrap()
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut plus = phi.clone();
            plus[i] += h;
            let mut minus = phi.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grad[(0, i)];
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            assert!((fd - ad).abs() / denom < 1e-4, "dim {i}: fd={fd} ad={ad}");
        }
    }
}
