//! SGD and bias-corrected Adam over a `ParamSet`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::models::ParamSet;
use crate::tensor::{GradientStore, Matrix, ParamId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for {id:?} has shape {grad:?}, parameter is {param:?}")]
    ShapeMismatch {
        id: ParamId,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("gradient for unknown parameter {0:?}")]
    UnknownParam(ParamId),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct OptimHyper {
    pub kind: OptimKind,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            kind: OptimKind::Adam,
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimHyper {
    pub fn sgd(alpha: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.alpha > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidHyper(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    first: BTreeMap<ParamId, Matrix>,
    second: BTreeMap<ParamId, Matrix>,
    t: u64,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Matrix> {
        self.first.get(&id)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Matrix> {
        self.second.get(&id)
    }

    /// Zeroes both moments of `id` wherever `mask(row, col)` holds.
    pub fn reset_entries(&mut self, id: ParamId, mask: impl Fn(usize, usize) -> bool) {
        for moments in [&mut self.first, &mut self.second] {
            if let Some(m) = moments.get_mut(&id) {
                for r in 0..m.rows() {
                    for c in 0..m.cols() {
                        if mask(r, c) {
                            m.set(r, c, 0.0);
                        }
                    }
                }
            }
        }
    }
}

fn check(params: &ParamSet, grads: &GradientStore) -> Result<(), OptimError> {
    for (&id, g) in grads.iter() {
        let p = params.param(id).ok_or(OptimError::UnknownParam(id))?;
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch {
                id,
                param: p.shape(),
                grad: g.shape(),
            });
        }
    }
    Ok(())
}

/// `p ← p − α·g`. Parameters without a gradient entry are left alone.
pub fn sgd_step(params: &mut ParamSet, grads: &GradientStore, alpha: f64) -> Result<(), OptimError> {
    check(params, grads)?;
    for (&id, g) in grads.iter() {
        params.param_mut(id).expect("checked").add_scaled_in_place(g, -alpha).expect("checked");
    }
    Ok(())
}

pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradientStore,
    state: &mut OptimState,
    hyper: &OptimHyper,
) -> Result<(), OptimError> {
    check(params, grads)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (&id, g) in grads.iter() {
        let (rows, cols) = g.shape();
        let m = state.first.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
        let v = state.second.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
        let p = params.param_mut(id).expect("checked");
        let (m, v, p) = (m.as_mut_slice(), v.as_mut_slice(), p.as_mut_slice());
        for (i, &gi) in g.as_slice().iter().enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= hyper.alpha * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Dispatches on `hyper.kind`; SGD still advances the step count.
pub fn step(
    params: &mut ParamSet,
    grads: &GradientStore,
    state: &mut OptimState,
    hyper: &OptimHyper,
) -> Result<(), OptimError> {
    match hyper.kind {
        OptimKind::Sgd => {
            sgd_step(params, grads, hyper.alpha)?;
            state.t += 1;
            Ok(())
        }
        OptimKind::Adam => adam_step(params, grads, state, hyper),
    }
}
