//! Central finite-difference checks of analytic gradients.

use super::{Approximator, SharedGrad, SharedTrunk};
use crate::error::Result;
use crate::trajectory::StateActionPair;

/// Denominator floor for relative errors of near-zero derivatives.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub n_params: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn compare(analytic: &[f64], mut numeric: impl FnMut(usize) -> Result<f64>) -> Result<GradCheck> {
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_param: 0,
        n_params: analytic.len(),
    };
    for (i, &g) in analytic.iter().enumerate() {
        let e = relative_error(g, numeric(i)?);
        if e > out.max_rel_error {
            out.max_rel_error = e;
            out.worst_param = i;
        }
    }
    Ok(out)
}

/// Compares [`Approximator::gradient`] at `pair` with central differences of
/// step `h` in every parameter. Tabular pairs must already have a slot.
pub fn check_gradient(approx: &Approximator, pair: &StateActionPair, h: f64) -> Result<GradCheck> {
    let analytic = approx.gradient(pair)?;
    let mut probe = approx.clone();
    compare(&analytic, |i| {
        let base = probe.params()[i];
        probe.params_mut()[i] = base + h;
        let up = probe.evaluate(pair)?;
        probe.params_mut()[i] = base - h;
        let down = probe.evaluate(pair)?;
        probe.params_mut()[i] = base;
        Ok((up - down) / (2.0 * h))
    })
}

/// Checks `up_zeta * ζ(x) + up_nu * ν(x)` against every shared-model parameter.
pub fn check_shared_gradient(model: &SharedTrunk, x: &[f64], up_zeta: f64, up_nu: f64, h: f64) -> Result<GradCheck> {
    let mut g = SharedGrad::zeros(model);
    model.backward(x, up_zeta, up_nu, &mut g)?;
    let analytic: Vec<f64> = g
        .trunk_total()
        .into_iter()
        .chain(g.zeta_head)
        .chain(g.nu_head)
        .collect();
    let mut probe = model.clone();
    compare(&analytic, |i| {
        let base = *param_mut(&mut probe, i);
        let mut at = |v: f64| -> Result<f64> {
            *param_mut(&mut probe, i) = v;
            let (z, n) = probe.evaluate(x)?;
            Ok(up_zeta * z + up_nu * n)
        };
        let fd = (at(base + h)? - at(base - h)?) / (2.0 * h);
        *param_mut(&mut probe, i) = base;
        Ok(fd)
    })
}

/// Parameter `i` in trunk, ζ-head, ν-head order.
fn param_mut(m: &mut SharedTrunk, i: usize) -> &mut f64 {
    let (nt, nz) = (m.trunk_params.len(), m.zeta_params.len());
    if i < nt {
        &mut m.trunk_params[i]
    } else if i < nt + nz {
        &mut m.zeta_params[i - nt]
    } else {
        &mut m.nu_params[i - nt - nz]
    }
}
