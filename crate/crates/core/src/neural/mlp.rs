//! Error-correcting perceptron: ReLU hidden layers, a linear error neuron and an additive skip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Fully connected layer with row-major `n_out x n_in` weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weights: vec![T::zero(); n_in * n_out], biases: vec![T::zero(); n_out] }
    }

    fn apply(&self, x: &[T], out: &mut Vec<T>, relu: bool) {
        out.clear();
        for o in 0..self.n_out {
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            let mut s = self.biases[o];
            for (w, v) in row.iter().zip(x) {
                s = s + *w * *v;
            }
            out.push(if relu && s < T::zero() { T::zero() } else { s });
        }
    }

    fn cast<U: Real>(&self) -> Dense<U> {
        let c = |v: &T| U::lit(v.to_f64_lossy());
        Dense { n_in: self.n_in, n_out: self.n_out, weights: self.weights.iter().map(c).collect(), biases: self.biases.iter().map(c).collect() }
    }
}

/// The network maps `n_components` whitened inputs through the hidden layers to one error
/// neuron; the output adds the last input (the scaled numerical departure value).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub n_components: usize,
    /// Hidden layers followed by the single linear output neuron.
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(n_components: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut n_in = n_components;
        for &w in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense::zeros(n_in, w));
            n_in = w;
        }
        Self { n_components, layers }
    }

    /// Uniform fan-in scaled weights and zero biases in every layer.
    pub fn random(n_components: usize, hidden: &[usize], seed: u64) -> Self {
        let mut m = Self::zeros(n_components, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut m.layers {
            let a = (6.0 / l.n_in as f64).sqrt();
            for w in &mut l.weights {
                *w = T::lit(rng.gen_range(-a..a));
            }
        }
        m
    }

    /// Training start point: random hidden layers and a zero error neuron, so the untrained
    /// network reproduces the numerical value exactly.
    pub fn initial(n_components: usize, hidden: &[usize], seed: u64) -> Self {
        let mut m = Self::random(n_components, hidden, seed);
        m.layers.last_mut().expect("output layer").weights.fill(T::zero());
        m
    }

    pub fn n_inputs(&self) -> usize {
        self.n_components + 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.n_out).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Error neuron value for the whitened part of one input row.
    pub fn error_term(&self, x: &[T]) -> T {
        let last = self.layers.len() - 1;
        let mut a = x[..self.n_components].to_vec();
        let mut b = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            l.apply(&a, &mut b, k < last);
            std::mem::swap(&mut a, &mut b);
        }
        a[0]
    }

    pub fn forward_row(&self, x: &[T]) -> Result<T> {
        if x.len() != self.n_inputs() {
            return Err(Error::Dimension(format!("input row has {} values, model expects {}", x.len(), self.n_inputs())));
        }
        Ok(self.error_term(x) + x[self.n_components])
    }

    /// Outputs for a row-major batch of inputs.
    pub fn forward(&self, batch: &[T]) -> Result<Vec<T>> {
        let n = self.n_inputs();
        if batch.len() % n != 0 {
            return Err(Error::Dimension(format!("batch length {} is not a multiple of the input width {n}", batch.len())));
        }
        batch.chunks(n).map(|r| self.forward_row(r)).collect()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp { n_components: self.n_components, layers: self.layers.iter().map(Dense::cast).collect() }
    }

    /// Checks that consecutive widths chain and the network ends in one neuron.
    pub fn validate(&self) -> Result<()> {
        let mut n_in = self.n_components;
        if self.layers.is_empty() {
            return Err(Error::Dimension("model has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.n_in != n_in || l.weights.len() != l.n_in * l.n_out || l.biases.len() != l.n_out {
                return Err(Error::Dimension(format!(
                    "layer {k}: expected {n_in} inputs, declared {}x{} with {} weights and {} biases",
                    l.n_out,
                    l.n_in,
                    l.weights.len(),
                    l.biases.len()
                )));
            }
            if !l.weights.iter().chain(&l.biases).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteValue(format!("layer {k} parameters")));
            }
            n_in = l.n_out;
        }
        if n_in != 1 {
            return Err(Error::Dimension(format!("layer {}: output width {n_in}, expected 1", self.layers.len() - 1)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_is_skip_only() {
        let m = Mlp::<f64>::zeros(17, &[130; 4]);
        let x: Vec<f64> = (0..18).map(|i| i as f64 * 0.37 - 2.0).collect();
        assert_eq!(m.forward_row(&x).unwrap(), x[17]);
        assert!(m.forward_row(&x[..17]).is_err());
    }

    #[test]
    fn parameter_count_at_reference_width() {
        assert_eq!(Mlp::<f64>::zeros(17, &[130; 4]).parameter_count(), 53_561);
    }

    #[test]
    fn scalar_loop_oracle_single_precision() {
        let m = Mlp::<f64>::random(5, &[8, 8, 8, 8], 7);
        let m32 = m.cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // Independent triple-loop evaluation.
            let mut a: Vec<f64> = x[..5].to_vec();
            for (k, l) in m.layers.iter().enumerate() {
                let mut z = vec![0.0; l.n_out];
                for o in 0..l.n_out {
                    z[o] = l.biases[o];
                    for i in 0..l.n_in {
                        z[o] += l.weights[o * l.n_in + i] * a[i];
                    }
                    if k < 4 {
                        z[o] = z[o].max(0.0);
                    }
                }
                a = z;
            }
            let want = a[0] + x[5];
            let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let got = m32.forward_row(&x32).unwrap() as f64;
            assert!((got - want).abs() < 1e-6 * (1.0 + want.abs()) * 10.0, "{got} {want}");
            assert!((m.forward_row(&x).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_rows() {
        let m = Mlp::<f64>::random(4, &[6; 4], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<f64> = (0..64 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = m.forward(&batch).unwrap();
        for (r, y) in batch.chunks(5).zip(&out) {
            assert_eq!(m.forward_row(r).unwrap(), *y);
        }
    }

    #[test]
    fn skip_linearity() {
        let a = Mlp::<f64>::random(3, &[5; 4], 3);
        let b = Mlp::<f64>::random(3, &[5; 4], 4);
        let x = [0.2, -0.4, 0.9, 0.33];
        let lhs = a.forward_row(&x).unwrap() - b.forward_row(&x).unwrap();
        assert!((lhs - (a.error_term(&x) - b.error_term(&x))).abs() < 1e-15);
    }
}
