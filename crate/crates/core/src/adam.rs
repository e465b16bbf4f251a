//! ADAM with the usual default hyperparameters.

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }

    pub fn for_params(p: &DenoiserParams<T>) -> Self {
        Self::new(p.param_count())
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state of {} for {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", index });
        }
        if !(lr > T::zero()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.step += 1;
        let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPSILON));
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Applies one ADAM step to network parameters.
pub fn adam_step<T: Real>(p: &mut DenoiserParams<T>, g: &DenoiserParams<T>, s: &mut AdamState<T>, lr: T) -> Result<()> {
    if !p.same_structure(g) {
        return Err(Error::shape("gradient structure differs from parameters"));
    }
    let mut flat = p.to_flat();
    s.step(&mut flat, &g.to_flat(), lr)?;
    p.set_flat(&flat)
}
