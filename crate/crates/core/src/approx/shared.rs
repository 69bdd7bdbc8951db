use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, FeatureMap, Stack};
use crate::error::{OpeError, Result};
use crate::seed::derive_seed;

/// One GeLU trunk feeding a ζ head (square output) and a ν head (identity).
#[derive(Debug, Clone)]
pub struct SharedTrunk {
    pub features: FeatureMap,
    pub trunk: Stack,
    pub zeta_head: Stack,
    pub nu_head: Stack,
    pub trunk_params: Vec<f64>,
    pub zeta_params: Vec<f64>,
    pub nu_params: Vec<f64>,
    pub seed: u64,
}

/// Gradients split by path, so the trunk can receive either head's share.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGrad {
    pub trunk_via_zeta: Vec<f64>,
    pub trunk_via_nu: Vec<f64>,
    pub zeta_head: Vec<f64>,
    pub nu_head: Vec<f64>,
}

impl SharedGrad {
    pub fn zeros(model: &SharedTrunk) -> Self {
        SharedGrad {
            trunk_via_zeta: vec![0.0; model.trunk_params.len()],
            trunk_via_nu: vec![0.0; model.trunk_params.len()],
            zeta_head: vec![0.0; model.zeta_params.len()],
            nu_head: vec![0.0; model.nu_params.len()],
        }
    }

    pub fn trunk_total(&self) -> Vec<f64> {
        self.trunk_via_zeta
            .iter()
            .zip(&self.trunk_via_nu)
            .map(|(a, b)| a + b)
            .collect()
    }
}

impl SharedTrunk {
    /// Trunk `dim -> width`, heads `width -> width -> 1`.
    pub fn new(features: FeatureMap, width: usize, seed: u64, zeta_init: f64) -> Self {
        let trunk = Stack::new(vec![features.dim(), width], true);
        let head = Stack::new(vec![width, width, 1], false);
        let init = |stack: &Stack, tag: &str| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, 0));
            stack.init(&mut rng)
        };
        let trunk_params = init(&trunk, "trunk");
        let mut zeta_params = init(&head, "zeta_head");
        let mut nu_params = init(&head, "nu_head");
        let n_last = width + 1;
        for p in [&mut zeta_params, &mut nu_params] {
            let len = p.len();
            p[len - n_last..len - 1].iter_mut().for_each(|w| *w *= 0.1);
        }
        zeta_params[head.last_bias_index(0)] = Activation::Square.inverse(zeta_init);
        SharedTrunk {
            features,
            trunk,
            zeta_head: head.clone(),
            nu_head: head,
            trunk_params,
            zeta_params,
            nu_params,
            seed,
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.features.dim() {
            return Err(OpeError::DimensionMismatch {
                expected: self.features.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.trunk.forward(&self.trunk_params, x).output().to_vec())
    }

    /// `(ζ, ν)` at one feature vector.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, f64)> {
        let h = self.embed(x)?;
        let z = self.zeta_head.forward(&self.zeta_params, &h).output()[0];
        let n = self.nu_head.forward(&self.nu_params, &h).output()[0];
        Ok((Activation::Square.apply(z), n))
    }

    /// Accumulates `up_zeta * dζ + up_nu * dν` into `grad`, keeping the two
    /// trunk paths apart, and returns `(ζ, ν)`.
    pub fn backward(&self, x: &[f64], up_zeta: f64, up_nu: f64, grad: &mut SharedGrad) -> Result<(f64, f64)> {
        self.check(x)?;
        let trunk_tape = self.trunk.forward(&self.trunk_params, x);
        let h = trunk_tape.output();
        let zt = self.zeta_head.forward(&self.zeta_params, h);
        let nt = self.nu_head.forward(&self.nu_params, h);
        let z = zt.output()[0];
        let n = nt.output()[0];
        if up_zeta != 0.0 {
            let d = up_zeta * Activation::Square.derivative(z);
            let dh = self.zeta_head.backward(&self.zeta_params, &zt, &[d], &mut grad.zeta_head);
            self.trunk
                .backward(&self.trunk_params, &trunk_tape, &dh, &mut grad.trunk_via_zeta);
        }
        if up_nu != 0.0 {
            let dh = self.nu_head.backward(&self.nu_params, &nt, &[up_nu], &mut grad.nu_head);
            self.trunk
                .backward(&self.trunk_params, &trunk_tape, &dh, &mut grad.trunk_via_nu);
        }
        Ok((Activation::Square.apply(z), n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn setup(seed: u64) -> (SharedTrunk, Vec<f64>) {
        let map = FeatureMap::new(3, 3);
        let model = SharedTrunk::new(map, 6, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = (0..map.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (model, x)
    }

    #[test]
    fn zeroing_a_head_leaves_only_the_other_path() {
        let (model, x) = setup(1);
        let mut only_zeta = SharedGrad::zeros(&model);
        model.backward(&x, 0.7, 0.0, &mut only_zeta).unwrap();
        assert!(only_zeta.trunk_via_nu.iter().all(|&g| g == 0.0));
        assert!(only_zeta.nu_head.iter().all(|&g| g == 0.0));
        assert_eq!(only_zeta.trunk_total(), only_zeta.trunk_via_zeta);

        let mut both = SharedGrad::zeros(&model);
        model.backward(&x, 0.7, -0.4, &mut both).unwrap();
        assert_eq!(both.trunk_via_zeta, only_zeta.trunk_via_zeta);
        let mut only_nu = SharedGrad::zeros(&model);
        model.backward(&x, 0.0, -0.4, &mut only_nu).unwrap();
        assert_eq!(both.trunk_via_nu, only_nu.trunk_via_nu);
    }

    #[test]
    fn joint_trunk_gradient_matches_finite_differences() {
        let (model, x) = setup(2);
        let (uz, un) = (0.3, -1.1);
        let mut g = SharedGrad::zeros(&model);
        model.backward(&x, uz, un, &mut g).unwrap();
        let total = g.trunk_total();
        let h = 1e-5;
        for i in 0..model.trunk_params.len() {
            let f = |delta: f64| {
                let mut m = model.clone();
                m.trunk_params[i] += delta;
                let (z, n) = m.evaluate(&x).unwrap();
                uz * z + un * n
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let rel = (fd - total[i]).abs() / fd.abs().max(total[i].abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {i}: {fd} vs {}", total[i]);
        }
    }

    #[test]
    fn zeta_starts_near_init_and_is_nonnegative() {
        let (model, x) = setup(3);
        let (z, _) = model.evaluate(&x).unwrap();
        assert!(z >= 0.0);
        assert!((z - 1.0).abs() < 0.5);
    }
}
