//! Two-layer tanh MLP mapping collaborative embeddings into the LM input
//! space. One map is shared by user and item slots.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn_acc, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Activations kept for [`Projector::backward`].
pub struct ProjectorCache {
    input: Mat,
    hidden: Mat,
}

impl Projector {
    /// Hidden width `2·d2`, uniform Glorot first layer and a small random
    /// output layer.
    pub fn init(d1: usize, d2: usize, seed: u64) -> Self {
        let h = 2 * d2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: Mat::uniform(d1, h, (6.0 / (d1 + h) as f64).sqrt(), &mut rng),
            b1: Mat::zeros(1, h),
            w2: Mat::randn(h, d2, 0.02, &mut rng),
            b2: Mat::zeros(1, d2),
        }
    }

    /// Like [`init`](Self::init) but with the output layer zeroed, so every
    /// input maps to the zero vector until trained.
    pub fn zero_final(d1: usize, d2: usize, seed: u64) -> Self {
        let mut p = Self::init(d1, d2, seed);
        p.w2 = Mat::zeros(p.w2.rows, p.w2.cols);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Mat::zeros(self.w1.rows, self.w1.cols),
            b1: Mat::zeros(1, self.b1.cols),
            w2: Mat::zeros(self.w2.rows, self.w2.cols),
            b2: Mat::zeros(1, self.b2.cols),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &Mat)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Mat)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.b1.is_finite() && self.w2.is_finite() && self.b2.is_finite()
    }

    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: e.len(),
            });
        }
        Ok(self.forward(&Mat::from_vec(1, e.len(), e.to_vec())).0.data)
    }

    /// Row-wise projection of a batch.
    pub fn forward(&self, input: &Mat) -> (Mat, ProjectorCache) {
        let mut hidden = matmul(input, &self.w1);
        for r in 0..hidden.rows {
            for (v, b) in hidden.row_mut(r).iter_mut().zip(&self.b1.data) {
                *v = (*v + b).tanh();
            }
        }
        let mut out = matmul(&hidden, &self.w2);
        for r in 0..out.rows {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.b2.data) {
                *v += b;
            }
        }
        (
            out,
            ProjectorCache {
                input: input.clone(),
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients for output gradient `dout` into `grad`.
    pub fn backward(&self, cache: &ProjectorCache, dout: &Mat, grad: &mut Projector) {
        matmul_tn_acc(&mut grad.w2, 1.0, &cache.hidden, dout);
        for r in 0..dout.rows {
            for (g, d) in grad.b2.data.iter_mut().zip(dout.row(r)) {
                *g += d;
            }
        }
        let mut dh = matmul_nt(dout, &self.w2);
        dh.data
            .iter_mut()
            .zip(&cache.hidden.data)
            .for_each(|(d, h)| *d *= 1.0 - h * h);
        matmul_tn_acc(&mut grad.w1, 1.0, &cache.input, &dh);
        for r in 0..dh.rows {
            for (g, d) in grad.b1.data.iter_mut().zip(dh.row(r)) {
                *g += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let p = Projector::zero_final(8, 4, 1);
        assert_eq!(p.project(&[0.0; 8]).unwrap(), vec![0.0; 4]);
        assert_eq!(p.project(&[0.3; 8]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn wrong_input_dimension_is_rejected() {
        let p = Projector::init(8, 4, 1);
        assert!(matches!(
            p.project(&[0.0; 9]),
            Err(Error::Dimension {
                expected: 8,
                got: 9
            })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = {
            let mut p = Projector::init(5, 3, 2);
            p.w2.data
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f64 * 0.7).sin());
            p.b1.data
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.1 * i as f64);
            p
        };
        let input = Mat::from_vec(2, 5, (0..10).map(|i| (i as f64 * 1.3).cos()).collect());
        let weights = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.7]);
        let objective = |p: &Projector| -> f64 {
            p.forward(&input)
                .0
                .data
                .iter()
                .zip(&weights.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = p.forward(&input);
        let mut grad = p.zeros_like();
        p.backward(&cache, &weights, &mut grad);
        let mut names = Vec::new();
        p.visit(|n, m| names.push((n.to_string(), m.data.len())));
        let mut analytic = Vec::new();
        grad.visit(|_, m| analytic.push(m.data.clone()));
        let h = 1e-6;
        for ((name, n), an) in names.iter().zip(&analytic) {
            for idx in 0..*n {
                let shifted = |delta: f64| {
                    let mut q = p.clone();
                    q.visit_mut(|nm, m| {
                        if nm == name {
                            m.data[idx] += delta;
                        }
                    });
                    objective(&q)
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let diff = (an[idx] - numeric).abs();
                assert!(
                    diff <= 1e-3 * an[idx].abs().max(numeric.abs()) || diff <= 1e-8,
                    "{name}[{idx}]"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn projection_is_pure_and_finite(e in prop::collection::vec(-10.0f64..10.0, 6)) {
            let p = Projector::init(6, 4, 9);
            let a = p.project(&e).unwrap();
            prop_assert_eq!(a.len(), 4);
            prop_assert!(a.iter().all(|v| v.is_finite()));
            prop_assert_eq!(a, p.project(&e).unwrap());
        }
    }
}
