//! Adam with bias correction, one state per network.

use ndarray::{Array1, Array2, Zip};

use super::mlp::{Gradients, Mlp};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros = net.zero_gradients();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m_w: zeros.weights.clone(),
            v_w: zeros.weights,
            m_b: zeros.biases.clone(),
            v_b: zeros.biases,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = self.lr * c2.sqrt() / c1;
        let eps = self.eps * c2.sqrt();
        let (weights, biases) = net.params_mut();
        for l in 0..weights.len() {
            Zip::from(&mut weights[l])
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
            Zip::from(&mut biases[l])
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut net = Mlp::zeros(&[2, 1]);
        let mut adam = Adam::new(&net, 0.01);
        let mut g = net.zero_gradients();
        g.weights[0] = Array2::from_shape_vec((2, 1), vec![3.0, -0.5]).unwrap();
        adam.step(&mut net, &g);
        let p = net.flatten();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }
}
