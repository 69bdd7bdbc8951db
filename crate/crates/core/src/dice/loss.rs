use super::model::DialogValues;
use super::DiceConfig;

/// Gradient of one dialog's loss with respect to every slot value it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrads {
    pub zeta: Vec<f64>,
    pub nu: Vec<f64>,
    pub nu_next: Vec<f64>,
    /// With respect to the pad values (not their raw parameters), `t_max` long.
    pub zeta_pad: Vec<f64>,
    pub nu_pad: Vec<f64>,
    pub lambda: f64,
}

#[derive(Clone, Copy)]
enum Slot {
    Real(usize),
    Pad(usize),
}

/// Loss of one padded dialog and its slot gradients.
///
/// Slot 0 wraps around to the last pad; slots `1..=T` are the logged pairs
/// (their successor value uses the target action); slots above `T` are pads,
/// each followed by the next pad.
pub fn dialog_loss(
    cfg: &DiceConfig,
    lambda: f64,
    zeta_pad: &[f64],
    nu_pad: &[f64],
    reward: f64,
    vals: &DialogValues,
) -> (f64, SlotGrads) {
    let tm = cfg.t_max;
    let len = vals.zeta.len();
    debug_assert!(len >= 1 && len <= tm);
    debug_assert_eq!(zeta_pad.len(), tm);
    debug_assert_eq!(nu_pad.len(), tm);
    let slot = |t: usize| match t {
        0 => Slot::Pad(tm - 1),
        t if t <= len => Slot::Real(t - 1),
        t => Slot::Pad(t - 1),
    };
    let mut g = SlotGrads {
        zeta: vec![0.0; len],
        nu: vec![0.0; len],
        nu_next: vec![0.0; len],
        zeta_pad: vec![0.0; tm],
        nu_pad: vec![0.0; tm],
        lambda: 0.0,
    };
    let mut loss = 0.0;
    for t in 0..tm {
        let (z, n) = match slot(t) {
            Slot::Real(i) => (vals.zeta[i], vals.nu[i]),
            Slot::Pad(k) => (zeta_pad[k], nu_pad[k]),
        };
        let nn = match slot(t + 1) {
            Slot::Real(i) => vals.nu_next[i],
            Slot::Pad(k) => nu_pad[k],
        };
        loss += z * (nn - n) + lambda * (z - 1.0) - cfg.alpha_zeta * cfg.regularizer.value(z);
        let dz = nn - n + lambda - cfg.alpha_zeta * cfg.regularizer.derivative(z);
        match slot(t) {
            Slot::Real(i) => {
                g.zeta[i] += dz;
                g.nu[i] -= z;
            }
            Slot::Pad(k) => {
                g.zeta_pad[k] += dz;
                g.nu_pad[k] -= z;
            }
        }
        match slot(t + 1) {
            Slot::Real(i) => g.nu_next[i] += z,
            Slot::Pad(k) => g.nu_pad[k] += z,
        }
        g.lambda += z - 1.0;
    }
    if cfg.alpha_r != 0.0 {
        loss += cfg.alpha_r * vals.zeta[len - 1] * reward;
        g.zeta[len - 1] += cfg.alpha_r * reward;
    }
    let scale = 1.0 / tm as f64;
    for v in [&mut g.zeta, &mut g.nu, &mut g.nu_next, &mut g.zeta_pad, &mut g.nu_pad] {
        v.iter_mut().for_each(|x| *x *= scale);
    }
    g.lambda *= scale;
    (loss * scale, g)
}
