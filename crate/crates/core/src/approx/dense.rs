//! Fully connected GeLU stacks with hand-written reverse-mode gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Layer sizes `[in, h_1, ..., out]`. Every layer except the last is followed
/// by GeLU; the last one too when `gelu_last` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stack {
    pub sizes: Vec<usize>,
    pub gelu_last: bool,
}

/// Activations recorded on the forward pass.
pub struct Tape {
    /// Input to each layer (`layers + 1` entries, the last being the output).
    pub acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty tape")
    }
}

impl Stack {
    pub fn new(sizes: Vec<usize>, gelu_last: bool) -> Self {
        assert!(sizes.len() >= 2, "a stack needs at least one layer");
        Stack { sizes, gelu_last }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers() || self.gelu_last
    }

    /// He-style normal init; biases zero.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params());
        for w in self.sizes.windows(2) {
            let normal = Normal::new(0.0, (1.0 / w[0] as f64).sqrt()).expect("valid std");
            params.extend((0..w[0] * w[1]).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        params
    }

    /// Index of the bias of output unit `unit` in the last layer.
    pub fn last_bias_index(&self, unit: usize) -> usize {
        self.n_params() - self.sizes[self.n_layers()] + unit
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Tape {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(x.len(), self.input_dim());
        let mut acts = Vec::with_capacity(self.sizes.len());
        let mut pre = Vec::with_capacity(self.n_layers());
        acts.push(x.to_vec());
        let mut off = 0;
        for layer in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let input = acts.last().expect("input");
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let a = if self.activated(layer) {
                z.iter().map(|&v| gelu(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        Tape { acts, pre }
    }

    /// Accumulates `d_out . d(output)/d(params)` into `grad` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, params: &[f64], tape: &Tape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.n_params());
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = d_out.to_vec();
        for layer in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
            if self.activated(layer) {
                for (d, &z) in delta.iter_mut().zip(&tape.pre[layer]) {
                    *d *= gelu_grad(z);
                }
            }
            let off = offsets[layer];
            let input = &tape.acts[layer];
            let mut d_input = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = off + o * n_in;
                for i in 0..n_in {
                    grad[row + i] += d * input[i];
                    d_input[i] += d * params[row + i];
                }
                grad[off + n_in * n_out + o] += d;
            }
            delta = d_input;
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let stack = Stack::new(vec![3, 5, 2], true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = stack.init(&mut rng);
        let x = vec![0.3, -1.2, 0.8];
        let d_out = vec![0.7, -0.4];
        let tape = stack.forward(&params, &x);
        let mut grad = vec![0.0; stack.n_params()];
        let dx = stack.backward(&params, &tape, &d_out, &mut grad);
        let f = |x: &[f64]| {
            let out = stack.forward(&params, x);
            out.output().iter().zip(&d_out).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7);
        }
    }
}
