//! The two hand-built networks showing how weight conditioning slows
//! re-fitting after a target change. Both are `w₂·ReLU(w₁x)` without biases,
//! trained by full-batch gradient descent on half squared error.

use serde::Serialize;

use super::HarnessError;
use crate::spectral::singular_values;
use crate::tensor::{Matrix, ParamId, ParamSlot, Tape};

/// Step cap for the threshold runs.
pub const DEMO_MAX_STEPS: u64 = 100_000;
pub const DEMO_LOSS_TARGET: f64 = 0.1;
/// A loss above this multiple of the starting loss counts as divergence, even
/// if the run later lands below the target on a dead unit.
pub const DEMO_DIVERGENCE_FACTOR: f64 = 100.0;

const W1: ParamId = ParamId { layer: 0, slot: ParamSlot::Weight };
const W2: ParamId = ParamId { layer: 1, slot: ParamSlot::Weight };

/// Loss and gradients of `½·mean‖w₂ReLU(w₁x) − y‖²` over the rows of `x`.
fn two_layer(w1: &Matrix, w2: &Matrix, x: &Matrix, y: &Matrix) -> Result<(f64, Matrix, Matrix), HarnessError> {
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let a = tape.param(W1, w1.clone());
    let b = tape.param(W2, w2.clone());
    let yi = tape.input(y.clone());
    let at = tape.transpose(a);
    let pre = tape.matmul(xi, at).map_err(tensor_err)?;
    let h = tape.relu(pre);
    let bt = tape.transpose(b);
    let out = tape.matmul(h, bt).map_err(tensor_err)?;
    let loss = tape.mse(out, yi).map_err(tensor_err)?;
    let grads = tape.backward(loss).map_err(tensor_err)?;
    Ok((tape.scalar(loss), grads.get(W1).unwrap().clone(), grads.get(W2).unwrap().clone()))
}

fn tensor_err(e: crate::tensor::TensorError) -> HarnessError {
    HarnessError::Model(e.into())
}

/// Gradient descent until the loss drops below the target. `None` means the
/// run diverged or hit the step cap.
fn steps_to_target(
    mut w1: Matrix,
    mut w2: Matrix,
    x: &Matrix,
    y: &Matrix,
    alpha: f64,
) -> Result<(Option<u64>, Vec<f64>), HarnessError> {
    let mut curve = Vec::new();
    let mut limit = f64::INFINITY;
    for step in 0..=DEMO_MAX_STEPS {
        let (loss, g1, g2) = two_layer(&w1, &w2, x, y)?;
        curve.push(loss);
        if step == 0 {
            limit = DEMO_DIVERGENCE_FACTOR * loss;
        }
        if !loss.is_finite() || loss > limit {
            return Ok((None, curve));
        }
        if loss < DEMO_LOSS_TARGET {
            return Ok((Some(step), curve));
        }
        w1.add_scaled_in_place(&g1, -alpha).map_err(tensor_err)?;
        w2.add_scaled_in_place(&g2, -alpha).map_err(tensor_err)?;
    }
    Ok((None, curve))
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Steps to the loss target at one step size.
#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub steps: Option<u64>,
    /// Loss before each update, up to the stopping step.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct A1Row {
    pub c: f64,
    pub sigma_max_w1: f64,
    pub task1_loss: f64,
    pub grad_w1: Vec<f64>,
    pub grad_w2: Vec<f64>,
    /// Largest entry gap between autodiff and the closed-form matrices.
    pub closed_form_error: f64,
    pub norm_w1: f64,
    pub norm_w2: f64,
    pub norm_sq_w1: f64,
    pub norm_sq_w2: f64,
    pub norm_ratio: f64,
    pub curves: Vec<CurvePoint>,
}

#[derive(Clone, Debug, Serialize)]
pub struct A1Report {
    pub rows: Vec<A1Row>,
    /// At every step size, the smallest-spectral-norm `c` reaches the target
    /// in strictly fewer steps than the largest.
    pub ordering_holds: bool,
}

/// `w₁ = [[−1, c], [1/c, −1]]`, `w₂ = [1/c, c]` fits `x₁ = (0,1), x₂ = (1,0) ↦ 1`
/// for every `c`. The target of `x₁` then flips to 0.
pub fn illustrative_demo(cs: &[f64], alphas: &[f64]) -> Result<A1Report, HarnessError> {
    if cs.iter().any(|&c| !(c > 0.0)) || alphas.iter().any(|&a| !(a > 0.0)) {
        return Err(HarnessError::Config("c and step sizes must be positive".into()));
    }
    let x = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
    let x1 = Matrix::row_vector(&[0.0, 1.0]).unwrap();
    let mut rows = Vec::with_capacity(cs.len());
    for &c in cs {
        let w1 = Matrix::from_rows(&[&[-1.0, c], &[1.0 / c, -1.0]]).unwrap();
        let w2 = Matrix::row_vector(&[1.0 / c, c]).unwrap();
        let (task1_loss, _, _) = two_layer(&w1, &w2, &x, &Matrix::column_vector(&[1.0, 1.0]).unwrap())?;
        let (_, g1, g2) = two_layer(&w1, &w2, &x1, &Matrix::filled(1, 1, 0.0))?;
        let closed_w1 = Matrix::from_rows(&[&[0.0, 1.0 / c], &[0.0, 0.0]]).unwrap();
        let closed_w2 = Matrix::row_vector(&[c, 0.0]).unwrap();
        let closed_form_error = max_abs_diff(&g1, &closed_w1).max(max_abs_diff(&g2, &closed_w2));
        let sigma_max_w1 = singular_values(&w1).map_err(|e| HarnessError::Diag(e.into()))?[0];
        let y_new = Matrix::column_vector(&[0.0, 1.0]).unwrap();
        let mut curves = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            let (steps, losses) = steps_to_target(w1.clone(), w2.clone(), &x, &y_new, alpha)?;
            curves.push(CurvePoint { alpha, steps, losses });
        }
        let (n1, n2) = (g1.frobenius_norm(), g2.frobenius_norm());
        rows.push(A1Row {
            c,
            sigma_max_w1,
            task1_loss,
            grad_w1: g1.as_slice().to_vec(),
            grad_w2: g2.as_slice().to_vec(),
            closed_form_error,
            norm_w1: n1,
            norm_w2: n2,
            norm_sq_w1: n1 * n1,
            norm_sq_w2: n2 * n2,
            norm_ratio: n2 / n1,
            curves,
        });
    }
    let ordering_holds = alphas.iter().enumerate().all(|(i, _)| {
        let by_norm = |r: &&A1Row| r.sigma_max_w1;
        let lo = rows.iter().min_by(|a, b| by_norm(a).total_cmp(&by_norm(b)));
        let hi = rows.iter().max_by(|a, b| by_norm(a).total_cmp(&by_norm(b)));
        match (lo, hi) {
            (Some(lo), Some(hi)) => match (lo.curves[i].steps, hi.curves[i].steps) {
                (Some(a), Some(b)) => a < b,
                (Some(_), None) => true,
                _ => false,
            },
            _ => false,
        }
    });
    Ok(A1Report { rows, ordering_holds })
}

#[derive(Clone, Debug, Serialize)]
pub struct S32Row {
    pub a: f64,
    pub task1_output: f64,
    pub grad_theta1: Vec<f64>,
    pub grad_theta2: Vec<f64>,
    pub closed_form_error: f64,
    pub condition_theta1: f64,
    pub steps: Option<u64>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct S32Report {
    pub alpha: f64,
    pub rows: Vec<S32Row>,
    /// Step counts strictly increase as `a` decreases.
    pub monotone: bool,
}

/// `θ₁ = diag(1, a)`, `θ₂ = (0, a)` fits `(1,0) ↦ 0`; the second task is
/// `(0,1) ↦ 1`.
pub fn section32_demo(a_values: &[f64], alpha: f64) -> Result<S32Report, HarnessError> {
    if a_values.iter().any(|&a| !(a > 0.0 && a <= 1.0)) || !(alpha > 0.0) {
        return Err(HarnessError::Config("a must lie in (0, 1] and alpha must be positive".into()));
    }
    let x_old = Matrix::row_vector(&[1.0, 0.0]).unwrap();
    let x_new = Matrix::row_vector(&[0.0, 1.0]).unwrap();
    let y_new = Matrix::filled(1, 1, 1.0);
    let mut rows = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let t1 = Matrix::diag(&[1.0, a]).unwrap();
        let t2 = Matrix::row_vector(&[0.0, a]).unwrap();
        let (old_loss, _, _) = two_layer(&t1, &t2, &x_old, &Matrix::filled(1, 1, 0.0))?;
        let (_, g1, g2) = two_layer(&t1, &t2, &x_new, &y_new)?;
        let r = a * a - 1.0;
        let closed1 = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, r * a]]).unwrap();
        let closed2 = Matrix::row_vector(&[0.0, r * a]).unwrap();
        let closed_form_error = max_abs_diff(&g1, &closed1).max(max_abs_diff(&g2, &closed2));
        let (steps, losses) = steps_to_target(t1.clone(), t2.clone(), &x_new, &y_new, alpha)?;
        rows.push(S32Row {
            a,
            task1_output: (2.0 * old_loss).sqrt(),
            grad_theta1: g1.as_slice().to_vec(),
            grad_theta2: g2.as_slice().to_vec(),
            closed_form_error,
            condition_theta1: 1.0 / a,
            steps,
            losses,
        });
    }
    let mut by_a: Vec<&S32Row> = rows.iter().collect();
    by_a.sort_by(|p, q| q.a.total_cmp(&p.a));
    let monotone = by_a.windows(2).all(|w| match (w[0].steps, w[1].steps) {
        (Some(s0), Some(s1)) => w[1].a < w[0].a && s1 > s0,
        (Some(_), None) => w[1].a < w[0].a,
        _ => false,
    });
    Ok(S32Report { alpha, rows, monotone })
}
