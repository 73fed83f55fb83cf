use alloc::vec;
use alloc::vec::Vec;

use super::{ModelParameters, Real};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParameters<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
        }
    }
}

/// One bias-corrected Adam update without weight decay. Rejects the whole
/// step, leaving parameters untouched, if any gradient is non-finite.
pub fn adam_step<T: Real>(params: &mut ModelParameters<T>, grads: &[Vec<T>], state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != params.tensors.len() || state.m.len() != grads.len() {
        return Err(Error::Shape("gradient list does not match parameters".into()));
    }
    for (t, g) in params.tensors.iter().zip(grads) {
        if g.len() != t.data.len() {
            return Err(Error::Shape(alloc::format!("gradient for `{}` has wrong length", t.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
    let lr = state.lr;
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = gv.f64();
            let mf = ADAM_BETA1 * mv.f64() + (1.0 - ADAM_BETA1) * gf;
            let vf = ADAM_BETA2 * vv.f64() + (1.0 - ADAM_BETA2) * gf * gf;
            *mv = T::of(mf);
            *vv = T::of(vf);
            let step = lr * (mf / c1) / (libm::sqrt(vf / c2) + ADAM_EPS);
            *pv = T::of(pv.f64() - step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_unet, UNetConfig};
    use crate::volume::KernelSpec;

    fn model() -> ModelParameters<f64> {
        build_unet(&UNetConfig::default(), KernelSpec::new([4, 4, 4]), 1).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = model();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let g: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = model();
        for t in p.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = AdamState::new(&p, 1e-3);
        let g: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![1.0; t.data.len()]).collect();
        adam_step(&mut p, &g, &mut s).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let want = -1e-3 / (1.0 + 1e-8);
        assert!(p.tensors.iter().all(|t| t.data.iter().all(|&v| (v - want).abs() < 1e-15)));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = model();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let mut g: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.5; t.data.len()]).collect();
        g[3][0] = f64::NAN;
        let name = p.tensors[3].name.clone();
        assert_eq!(adam_step(&mut p, &g, &mut s).unwrap_err(), Error::NonFiniteGradient(name));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }
}
