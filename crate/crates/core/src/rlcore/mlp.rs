//! Feed-forward network with `tanh` hidden layers and a linear head.
//!
//! Batches are row-major `(batch, features)` matrices. `forward_batch`
//! returns a [`Trace`] of layer activations that `backward` consumes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    /// `weights[l]` has shape `(in, out)`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Activations recorded during a batched forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty trace")
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite())) && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization; the head is scaled by
    /// `head_scale` so fresh policies start close to their prior.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], head_scale: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt() * if l + 1 == layers { head_scale } else { 1.0 };
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound)));
            biases.push(Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..=bound)));
        }
        Ok(Mlp { widths: widths.to_vec(), weights, biases })
    }

    /// All-zero network of the given shape.
    pub fn zeros(widths: &[usize]) -> Self {
        let weights = widths.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect();
        let biases = widths.windows(2).map(|w| Array1::zeros(w[1])).collect();
        Mlp { widths: widths.to_vec(), weights, biases }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous input");
        Ok(self.forward_batch(x)?.output().row(0).to_vec())
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Trace> {
        check_len(self.input_dim(), input.ncols())?;
        let layers = self.weights.len();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(input.to_owned());
        for l in 0..layers {
            let mut h = activations[l].dot(&self.weights[l]);
            h += &self.biases[l];
            if l + 1 < layers {
                h.mapv_inplace(f64::tanh);
            }
            activations.push(h);
        }
        Ok(Trace { activations })
    }

    /// Back-propagates `upstream = dL/d(output)` and returns parameter
    /// gradients together with `dL/d(input)`.
    pub fn backward(&self, trace: &Trace, upstream: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape { expected: out.len(), got: upstream.len() });
        }
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut delta = upstream.clone();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                // tanh'(h) = 1 - a^2 with a the stored activation
                delta.zip_mut_with(&trace.activations[l + 1], |d, &a| *d *= 1.0 - a * a);
            }
            gw[l] = trace.activations[l].t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.weights[l].t());
        }
        Ok((Gradients { weights: gw, biases: gb }, delta))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn params_mut(&mut self) -> (&mut [Array2<f64>], &mut [Array1<f64>]) {
        (&mut self.weights, &mut self.biases)
    }

    /// Parameters in layer order, weights (row-major) then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.num_params(), flat.len())?;
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = *it.next().unwrap());
            b.iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }

    /// `self <- (1 - rate) * self + rate * source`.
    pub fn soft_update_from(&mut self, source: &Mlp, rate: f64) {
        for (t, s) in self.weights.iter_mut().zip(&source.weights) {
            t.zip_mut_with(s, |a, &b| *a += rate * (b - *a));
        }
        for (t, s) in self.biases.iter_mut().zip(&source.biases) {
            t.zip_mut_with(s, |a, &b| *a += rate * (b - *a));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]);
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_chain_hand_evaluation() {
        let mut net = Mlp::zeros(&[1, 1, 1]);
        net.set_flat(&[1.0, 1.0, 1.0, 0.0]).unwrap();
        // hidden = tanh(1*0 + 1); head input equals tanh(1)
        let out = net.forward(&[0.0]).unwrap()[0];
        assert!((out - 0.7615941559557649).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 8, 3], 1.0, &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3, 0.9];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(matches!(net.forward(&x[..2]), Err(Error::Shape { expected: 4, got: 2 })));
        assert_eq!(net.num_params(), 5 * 8 + 9 * 3);
    }

    #[test]
    fn zero_upstream_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 6, 6, 2], 1.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let trace = net.forward_batch(x.view()).unwrap();
        let (g0, d0) = net.backward(&trace, &Array2::zeros((4, 2))).unwrap();
        assert!(g0.flatten().iter().all(|&v| v == 0.0));
        assert!(d0.iter().all(|&v| v == 0.0));

        let u1 = Array2::from_shape_fn((4, 2), |(i, j)| (i + 2 * j) as f64 * 0.1 - 0.2);
        let u2 = Array2::from_shape_fn((4, 2), |(i, j)| (i * j) as f64 * 0.05 + 0.3);
        let (ga, _) = net.backward(&trace, &u1).unwrap();
        let (gb, _) = net.backward(&trace, &u2).unwrap();
        let (gs, _) = net.backward(&trace, &(&u1 + &u2)).unwrap();
        let mut sum = ga.clone();
        sum.add_assign(&gb);
        for (a, b) in sum.flatten().iter().zip(gs.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_update_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = Mlp::new(&[2, 3, 1], 1.0, &mut rng).unwrap();
        let mut dst = Mlp::zeros(&[2, 3, 1]);
        dst.soft_update_from(&src, 0.25);
        for (a, b) in dst.flatten().iter().zip(src.flatten()) {
            assert!((a - 0.25 * b).abs() < 1e-15);
        }
    }
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[3, 5, 4, 2], 1.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let up = Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 - j as f64) * 0.4 + 0.1);
        let loss = |n: &Mlp| (n.forward_batch(x.view()).unwrap().output() * &up).sum();
        let (g, d_in) = net.backward(&net.forward_batch(x.view()).unwrap(), &up).unwrap();
        let analytic = g.flatten();
        let flat = net.flatten();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut p = net.clone();
            let mut v = flat.clone();
            v[k] += h;
            p.set_flat(&v).unwrap();
            let plus = loss(&p);
            v[k] -= 2.0 * h;
            p.set_flat(&v).unwrap();
            let fd = (plus - loss(&p)) / (2.0 * h);
            let scale = fd.abs().max(analytic[k].abs()).max(1e-3);
            assert!((fd - analytic[k]).abs() / scale < 1e-4, "param {k}: {fd} vs {}", analytic[k]);
        }
        for (i, j) in [(0, 0), (1, 2), (2, 1)] {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let plus = (net.forward_batch(xp.view()).unwrap().output() * &up).sum();
            xp[[i, j]] -= 2.0 * h;
            let minus = (net.forward_batch(xp.view()).unwrap().output() * &up).sum();
            assert!(((plus - minus) / (2.0 * h) - d_in[[i, j]]).abs() < 1e-7);
        }
    }
}
