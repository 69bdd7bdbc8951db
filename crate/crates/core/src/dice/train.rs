use super::loss::dialog_loss;
use super::model::{Critic, CriticGrad, EncodedDialog};
use super::{DiceConfig, OptimizerKind};
use crate::error::{OpeError, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct AdamState {
    zeta: Moments,
    nu: Moments,
    lambda: Moments,
    trunk: Moments,
}

/// Trainable state: critic, Lagrange multiplier and pad scalars.
#[derive(Debug, Clone)]
pub struct DiceState {
    pub critic: Critic,
    pub lambda: f64,
    /// Free parameters of the ζ pads; the pad value is the square.
    pub zeta_pad_raw: Vec<f64>,
    pub nu_pad: Vec<f64>,
    pub step_count: u64,
    adam: AdamState,
}

/// Mean-loss gradient at one point, split by parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceGrad {
    pub critic: CriticGrad,
    pub lambda: f64,
    pub zeta_pad_raw: Vec<f64>,
    pub nu_pad: Vec<f64>,
}

impl DiceState {
    pub fn new(critic: Critic, t_max: usize) -> Self {
        DiceState {
            critic,
            lambda: 0.0,
            zeta_pad_raw: vec![1.0; t_max],
            nu_pad: vec![0.0; t_max],
            step_count: 0,
            adam: AdamState::default(),
        }
    }

    pub fn zeta_pad(&self) -> Vec<f64> {
        self.zeta_pad_raw.iter().map(|r| r * r).collect()
    }

    /// Weighted mean loss over `batch` and its gradient.
    pub fn gradient(&self, encoded: &[EncodedDialog], batch: &[usize], cfg: &DiceConfig) -> Result<(f64, DiceGrad)> {
        if batch.is_empty() {
            return Err(OpeError::Empty("training batch".into()));
        }
        let zeta_pad = self.zeta_pad();
        let total_w: f64 = batch.iter().map(|&i| encoded[i].weight).sum();
        if !(total_w > 0.0) {
            return Err(OpeError::Config("batch has zero total weight".into()));
        }
        let mut grad = DiceGrad {
            critic: self.critic.zeros(),
            lambda: 0.0,
            zeta_pad_raw: vec![0.0; cfg.t_max],
            nu_pad: vec![0.0; cfg.t_max],
        };
        let mut loss = 0.0;
        for &i in batch {
            let enc = &encoded[i];
            let w = enc.weight / total_w;
            if w == 0.0 {
                continue;
            }
            let vals = self.critic.values(enc)?;
            let (l, g) = dialog_loss(cfg, self.lambda, &zeta_pad, &self.nu_pad, enc.reward, &vals);
            loss += w * l;
            self.critic
                .backward(enc, &g.zeta, &g.nu, &g.nu_next, w, &mut grad.critic)?;
            grad.lambda += w * g.lambda;
            for k in 0..cfg.t_max {
                grad.zeta_pad_raw[k] += w * g.zeta_pad[k] * 2.0 * self.zeta_pad_raw[k];
                grad.nu_pad[k] += w * g.nu_pad[k];
            }
        }
        Ok((loss, grad))
    }

    /// One simultaneous update: ν and λ descend, ζ ascends; a shared trunk
    /// follows the ν path minus the ζ path. Returns the pre-step loss.
    pub fn train_step(&mut self, encoded: &[EncodedDialog], batch: &[usize], cfg: &DiceConfig) -> Result<f64> {
        let (loss, grad) = self.gradient(encoded, batch, cfg)?;
        let step = self.step_count + 1;
        check_finite(step, "loss", &[loss])?;
        let lr = cfg.lr_at(step);
        let opt = cfg.optimizer;
        let clip = cfg.clip_norm;
        check_finite(step, "lambda", &[grad.lambda])?;
        check_finite(step, "zeta pads", &grad.zeta_pad_raw)?;
        check_finite(step, "nu pads", &grad.nu_pad)?;
        match (&mut self.critic, &grad.critic) {
            (Critic::Separate { zeta, nu }, CriticGrad::Separate { zeta: gz, nu: gn }) => {
                check_finite(step, "zeta", gz)?;
                check_finite(step, "nu", gn)?;
                update(
                    &mut [(&mut self.zeta_pad_raw, &grad.zeta_pad_raw), (zeta.params_mut(), gz)],
                    1.0,
                    lr,
                    clip,
                    opt,
                    &mut self.adam.zeta,
                    step,
                );
                update(
                    &mut [(&mut self.nu_pad, &grad.nu_pad), (nu.params_mut(), gn)],
                    -1.0,
                    lr * cfg.nu_lr_mult,
                    clip,
                    opt,
                    &mut self.adam.nu,
                    step,
                );
            }
            (Critic::Shared(m), CriticGrad::Shared(g)) => {
                check_finite(step, "zeta head", &g.zeta_head)?;
                check_finite(step, "nu head", &g.nu_head)?;
                check_finite(step, "trunk", &g.trunk_via_zeta)?;
                check_finite(step, "trunk", &g.trunk_via_nu)?;
                let reversed: Vec<f64> = g
                    .trunk_via_nu
                    .iter()
                    .zip(&g.trunk_via_zeta)
                    .map(|(n, z)| n - z)
                    .collect();
                update(
                    &mut [(&mut self.zeta_pad_raw, &grad.zeta_pad_raw), (&mut m.zeta_params, &g.zeta_head)],
                    1.0,
                    lr,
                    clip,
                    opt,
                    &mut self.adam.zeta,
                    step,
                );
                update(
                    &mut [(&mut self.nu_pad, &grad.nu_pad), (&mut m.nu_params, &g.nu_head)],
                    -1.0,
                    lr * cfg.nu_lr_mult,
                    clip,
                    opt,
                    &mut self.adam.nu,
                    step,
                );
                update(
                    &mut [(&mut m.trunk_params, &reversed)],
                    -1.0,
                    lr * cfg.trunk_lr_mult,
                    clip,
                    opt,
                    &mut self.adam.trunk,
                    step,
                );
            }
            _ => return Err(OpeError::Config("gradient buffer does not match critic".into())),
        }
        let mut lambda = [self.lambda];
        update(
            &mut [(&mut lambda, &[grad.lambda])],
            -1.0,
            lr * cfg.lambda_lr_mult,
            clip,
            opt,
            &mut self.adam.lambda,
            step,
        );
        self.lambda = lambda[0];
        self.step_count = step;
        Ok(loss)
    }
}

fn check_finite(step: u64, group: &str, g: &[f64]) -> Result<()> {
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(OpeError::NonFiniteGradient {
            step,
            detail: format!("{group}[{i}] = {}", g[i]),
        });
    }
    Ok(())
}

/// Clips the group's gradient to `clip` in Euclidean norm and moves the
/// parameters by `sign * lr` along it (`+1` ascends, `-1` descends).
fn update(
    parts: &mut [(&mut [f64], &[f64])],
    sign: f64,
    lr: f64,
    clip: f64,
    opt: OptimizerKind,
    moments: &mut Moments,
    step: u64,
) {
    let norm = parts
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    match opt {
        OptimizerKind::Sgd => {
            for (p, g) in parts.iter_mut() {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi += sign * lr * scale * gi;
                }
            }
        }
        OptimizerKind::Adam => {
            let total: usize = parts.iter().map(|(p, _)| p.len()).sum();
            moments.m.resize(total, 0.0);
            moments.v.resize(total, 0.0);
            let bc1 = 1.0 - BETA1.powi(step.min(i32::MAX as u64) as i32);
            let bc2 = 1.0 - BETA2.powi(step.min(i32::MAX as u64) as i32);
            let mut j = 0;
            for (p, g) in parts.iter_mut() {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    let d = -sign * scale * gi;
                    let m = &mut moments.m[j];
                    let v = &mut moments.v[j];
                    *m = BETA1 * *m + (1.0 - BETA1) * d;
                    *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                    *pi -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    j += 1;
                }
            }
        }
    }
}
