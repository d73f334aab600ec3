//! The spectral regularizer, its L2 baselines, and the reset-style mitigators
//! (shrink-and-perturb, dormant-unit recycling).

use thiserror::Error;

use crate::models::{sample_weight, ParamClass, ParamSet};
use crate::seed;
use crate::spectral::power_iteration;
use crate::tensor::{GradientStore, Matrix, ParamId, ParamSlot, TensorError};

/// Iterations of the periodic full power-iteration solve. The solve runs all
/// of them: σ settles quadratically faster than the singular vectors, and the
/// penalty gradient needs the vectors.
pub const RESOLVE_ITERS: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegError {
    #[error("parameter set has no initialization snapshot")]
    MissingSnapshot,
    #[error("invalid regularizer config: {0}")]
    InvalidConfig(String),
    #[error("probe has {got} hidden layers, model has {expected}")]
    ProbeLayers { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
pub enum RegularizerKind {
    None,
    Spectral,
    L2Zero,
    L2Init,
    ShrinkPerturb,
    Redo,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Spectral => "spectral",
            RegularizerKind::L2Zero => "l2",
            RegularizerKind::L2Init => "l2_init",
            RegularizerKind::ShrinkPerturb => "shrink_perturb",
            RegularizerKind::Redo => "redo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => RegularizerKind::None,
            "spectral" => RegularizerKind::Spectral,
            "l2" | "l2_zero" => RegularizerKind::L2Zero,
            "l2_init" => RegularizerKind::L2Init,
            "shrink_perturb" => RegularizerKind::ShrinkPerturb,
            "redo" => RegularizerKind::Redo,
            _ => return None,
        })
    }

    /// Kinds that add `λ·R` to the objective.
    pub fn is_penalty(self) -> bool {
        matches!(self, RegularizerKind::Spectral | RegularizerKind::L2Zero | RegularizerKind::L2Init)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub k: u32,
    pub shrink: f64,
    pub perturb: f64,
    pub tau_dormant: f64,
    pub check_every: usize,
    /// Steps between full power-iteration solves; one warm iteration otherwise.
    pub resolve_every: usize,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: 0.0,
            k: 2,
            shrink: 0.8,
            perturb: 0.01,
            tau_dormant: 0.1,
            check_every: 100,
            resolve_every: 100,
        }
    }
}

impl RegularizerConfig {
    pub fn penalty(kind: RegularizerKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegError> {
        let bad = |m: &str| Err(RegError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return bad("shrink must lie in (0, 1]");
        }
        if !(self.perturb >= 0.0) || !(self.tau_dormant >= 0.0) {
            return bad("perturb and tau_dormant must be >= 0");
        }
        if self.check_every == 0 || self.resolve_every == 0 {
            return bad("check_every and resolve_every must be >= 1");
        }
        Ok(())
    }

    /// The kind actually in force: a penalty with `λ = 0` is no regularizer.
    pub fn effective_kind(&self) -> RegularizerKind {
        if self.kind.is_penalty() && self.lambda == 0.0 {
            RegularizerKind::None
        } else {
            self.kind
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PenaltyReport {
    pub value: f64,
    pub grads: GradientStore,
}

/// `Σ_l [(σ₁(W_l)^k − 1)² + ‖b_l‖^{2k}] + Σ (γᵢ − 1)² + ‖β‖^{2k}`.
///
/// σ₁ and its singular vectors come from each layer's power state. A state
/// that has never been iterated is converged on a scratch copy first.
pub fn spectral_penalty(params: &ParamSet, k: u32) -> PenaltyReport {
    let k = k.max(1);
    let kf = k as f64;
    let mut report = PenaltyReport::default();
    for (l, layer) in params.layers.iter().enumerate() {
        let w = &layer.weight;
        let (u, v, sigma) = if layer.power.is_compatible(w) && layer.power.last_sigma > 0.0 {
            let s = crate::tensor::dot(&layer.power.u, &w.mul_vec(&layer.power.v));
            (layer.power.u.clone(), layer.power.v.clone(), s)
        } else {
            let mut scratch = layer.power.clone();
            let s = power_iteration(w, &mut scratch, RESOLVE_ITERS, 0.0);
            (scratch.u, scratch.v, s)
        };
        let sigma = sigma.max(0.0);
        let sk = sigma.powi(k as i32);
        report.value += (sk - 1.0).powi(2);
        let gw = if sigma > 0.0 {
            let coef = 2.0 * (sk - 1.0) * kf * sigma.powi(k as i32 - 1);
            Matrix::from_fn(w.rows(), w.cols(), |i, j| coef * u[i] * v[j])
        } else {
            Matrix::zeros(w.rows(), w.cols())
        };
        report.grads.insert(ParamId::new(l, ParamSlot::Weight), gw);
        for slot in [ParamSlot::Bias, ParamSlot::Gamma, ParamSlot::Beta] {
            let Some(p) = layer.slot(slot) else { continue };
            let (value, grad) = match ParamClass::of(slot) {
                ParamClass::MultiplicativeDiagonal => (
                    p.as_slice().iter().map(|g| (g - 1.0).powi(2)).sum(),
                    p.map(|g| 2.0 * (g - 1.0)),
                ),
                _ => additive_term(p, k),
            };
            report.value += value;
            report.grads.insert(ParamId::new(l, slot), grad);
        }
    }
    report
}

/// `‖b‖^{2k}` and its gradient `2k‖b‖^{2k−2} b`.
fn additive_term(b: &Matrix, k: u32) -> (f64, Matrix) {
    let sq = b.frobenius_norm_sq();
    let value = sq.powi(k as i32);
    let coef = 2.0 * k as f64 * sq.powi(k as i32 - 1);
    (value, b.scale(coef))
}

/// `Σ ‖p‖²` over every parameter.
pub fn l2_zero_penalty(params: &ParamSet) -> PenaltyReport {
    let mut report = PenaltyReport::default();
    for id in params.param_ids() {
        let p = params.param(id).expect("listed id");
        report.value += p.frobenius_norm_sq();
        report.grads.insert(id, p.scale(2.0));
    }
    report
}

/// `Σ ‖p − p⁰‖²` against the initialization snapshot.
pub fn l2_init_penalty(params: &ParamSet) -> Result<PenaltyReport, RegError> {
    let snap = params.init_snapshot().ok_or(RegError::MissingSnapshot)?;
    let mut report = PenaltyReport::default();
    for id in params.param_ids() {
        let p = params.param(id).expect("listed id");
        let p0 = snap.get(id).ok_or(RegError::MissingSnapshot)?;
        let d = p.sub(p0)?;
        report.value += d.frobenius_norm_sq();
        report.grads.insert(id, d.scale(2.0));
    }
    Ok(report)
}

/// The penalty of `config`, or `None` when no penalty is in force.
pub fn penalty_for(params: &ParamSet, config: &RegularizerConfig) -> Result<Option<PenaltyReport>, RegError> {
    Ok(match config.effective_kind() {
        RegularizerKind::Spectral => Some(spectral_penalty(params, config.k)),
        RegularizerKind::L2Zero => Some(l2_zero_penalty(params)),
        RegularizerKind::L2Init => Some(l2_init_penalty(params)?),
        _ => None,
    })
}

/// `g_task + λ·g_reg` per parameter.
pub fn composite_gradient(
    task: &GradientStore,
    penalty: &PenaltyReport,
    lambda: f64,
) -> Result<GradientStore, RegError> {
    let mut out = task.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    for (&id, g) in penalty.grads.iter() {
        out.accumulate(id, g, lambda)?;
    }
    Ok(out)
}

/// One warm power iteration per weight, or a full solve when
/// `step % resolve_every == 0`.
pub fn refresh_power_states(params: &mut ParamSet, step: u64, resolve_every: usize) {
    let full = resolve_every > 0 && step % resolve_every as u64 == 0;
    if full {
        params.refresh_power_states(RESOLVE_ITERS, 0.0);
    } else {
        // tol 0 forces exactly one iteration
        params.refresh_power_states(1, 0.0);
    }
}

/// `p ← shrink·p + perturb·ξ`, with `ξ` a fresh initialization draw.
///
/// Each parameter gets its own stream keyed by `(seed, position)`.
pub fn shrink_perturb_step(params: &mut ParamSet, shrink: f64, perturb: f64, seed: u64) {
    for (i, id) in params.param_ids().into_iter().enumerate() {
        let mut rng = seed::rng(seed, seed::tag::MITIGATOR, i as u64);
        let xi = params.sample_init(id, &mut rng).expect("listed id");
        let p = params.param_mut(id).expect("listed id");
        let next = p.zip_map(&xi, |a, x| shrink * a + perturb * x).expect("same shape");
        *p = next;
    }
}

/// Per-unit dormancy scores: `mean|h_j|` over the probe divided by the layer
/// average of that quantity. A silent layer scores 0 everywhere.
pub fn dormancy_scores(hidden: &Matrix) -> Vec<f64> {
    let n = hidden.rows().max(1) as f64;
    let means: Vec<f64> = (0..hidden.cols())
        .map(|j| (0..hidden.rows()).map(|i| hidden.get(i, j).abs()).sum::<f64>() / n)
        .collect();
    let layer = means.iter().sum::<f64>() / means.len().max(1) as f64;
    if layer == 0.0 {
        return vec![0.0; means.len()];
    }
    means.into_iter().map(|m| m / layer).collect()
}

/// Which units of each hidden layer were recycled.
#[derive(Clone, Debug, PartialEq)]
pub struct ResetMask {
    pub layers: Vec<Vec<bool>>,
}

impl ResetMask {
    pub fn count(&self) -> usize {
        self.layers.iter().flatten().filter(|&&m| m).count()
    }
}

/// Recycles units scoring at or below `tau`: the incoming row is redrawn,
/// the bias (and layer-norm shift) is zeroed, the layer-norm scale returns to
/// 1, and the outgoing column of the next layer is zeroed.
///
/// `probe_hidden` holds one post-activation matrix per hidden layer.
pub fn redo_reset(
    params: &mut ParamSet,
    probe_hidden: &[Matrix],
    tau: f64,
    seed: u64,
) -> Result<ResetMask, RegError> {
    let n_hidden = params.num_layers() - 1;
    if probe_hidden.len() != n_hidden {
        return Err(RegError::ProbeLayers {
            expected: n_hidden,
            got: probe_hidden.len(),
        });
    }
    let layers: Vec<Vec<bool>> = probe_hidden
        .iter()
        .map(|h| dormancy_scores(h).into_iter().map(|s| s <= tau).collect())
        .collect();
    for (l, mask) in layers.iter().enumerate() {
        let mut rng = seed::rng(seed, seed::tag::MITIGATOR, l as u64);
        let layer = &mut params.layers[l];
        let d_in = layer.fan_in();
        for j in (0..mask.len()).filter(|&j| mask[j]) {
            let row = sample_weight(1, d_in, &mut rng);
            for c in 0..d_in {
                layer.weight.set(j, c, row.get(0, c));
            }
            layer.bias.set(0, j, 0.0);
            if let Some(g) = layer.gamma.as_mut() {
                g.set(0, j, 1.0);
            }
            if let Some(b) = layer.beta.as_mut() {
                b.set(0, j, 0.0);
            }
        }
    }
    // outgoing weights last, so a redrawn row never revives a recycled input
    for (l, mask) in layers.iter().enumerate() {
        let next = &mut params.layers[l + 1].weight;
        for j in (0..mask.len()).filter(|&j| mask[j]) {
            for r in 0..next.rows() {
                next.set(r, j, 0.0);
            }
        }
    }
    Ok(ResetMask { layers })
}

/// Parameter entries touched by a reset, as `(id, row, col)` predicates
/// suitable for clearing optimizer moments.
pub fn reset_entries(mask: &ResetMask) -> Vec<(ParamId, Box<dyn Fn(usize, usize) -> bool + '_>)> {
    let mut out: Vec<(ParamId, Box<dyn Fn(usize, usize) -> bool + '_>)> = Vec::new();
    for (l, m) in mask.layers.iter().enumerate() {
        if !m.iter().any(|&x| x) {
            continue;
        }
        out.push((ParamId::new(l, ParamSlot::Weight), Box::new(move |r, _| m[r])));
        for slot in [ParamSlot::Bias, ParamSlot::Gamma, ParamSlot::Beta] {
            out.push((ParamId::new(l, slot), Box::new(move |_, c| m[c])));
        }
        out.push((ParamId::new(l + 1, ParamSlot::Weight), Box::new(move |_, c| m[c])));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, LayerParams, MlpSpec};
    use crate::spectral::{singular_values, PowerIterState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_layer(w: Matrix, b: &[f64]) -> ParamSet {
        let (d_out, d_in) = w.shape();
        let layer = LayerParams {
            weight: w,
            bias: Matrix::row_vector(b).unwrap(),
            gamma: None,
            beta: None,
            power: PowerIterState::new(d_out, d_in, 3),
        };
        ParamSet::from_layers(MlpSpec::new(d_in, &[], d_out), vec![layer]).unwrap()
    }

    fn random_params(seed: u64, layer_norm: bool) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::new(4, &[5, 3], 2).with_layer_norm(layer_norm);
        let mut p = init_params(&spec, seed).unwrap();
        for id in p.param_ids() {
            for x in p.param_mut(id).unwrap().as_mut_slice() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    /// Spectral penalty evaluated with exact σ₁ from the SVD.
    fn exact_spectral_value(p: &ParamSet, k: u32) -> f64 {
        let mut v = 0.0;
        for layer in &p.layers {
            let s = singular_values(&layer.weight).unwrap()[0];
            v += (s.powi(k as i32) - 1.0).powi(2);
            v += layer.bias.frobenius_norm_sq().powi(k as i32);
            if let Some(g) = &layer.gamma {
                v += g.as_slice().iter().map(|x| (x - 1.0).powi(2)).sum::<f64>();
            }
            if let Some(b) = &layer.beta {
                v += b.frobenius_norm_sq().powi(k as i32);
            }
        }
        v
    }

    fn finite_difference_check(
        p: &ParamSet,
        value: impl Fn(&ParamSet) -> f64,
        grads: &GradientStore,
        h: f64,
        tol: f64,
    ) {
        for id in p.param_ids() {
            let g = grads.get(id).unwrap();
            let m = p.param(id).unwrap();
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    plus.param_mut(id).unwrap().set(r, c, m.get(r, c) + h);
                    minus.param_mut(id).unwrap().set(r, c, m.get(r, c) - h);
                    let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                    let an = g.get(r, c);
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
                    assert!(err < tol, "{id:?}[{r},{c}]: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn spectral_fixed_point() {
        let q = Matrix::from_rows(&[&[0.6, -0.8], &[0.8, 0.6]]).unwrap();
        let r = spectral_penalty(&single_layer(q, &[0.0, 0.0]), 2);
        assert!(r.value.abs() < 1e-20);
        assert!(r.grads.max_abs() < 1e-10);
    }

    #[test]
    fn spectral_diagonal_value() {
        let r = spectral_penalty(&single_layer(Matrix::diag(&[2.0, 1.0]).unwrap(), &[0.0, 0.0]), 2);
        assert!((r.value - 9.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_bias_term() {
        let r = spectral_penalty(&single_layer(Matrix::identity(2), &[0.5, 0.0]), 2);
        assert!((r.value - 0.0625).abs() < 1e-12);
        let gb = r.grads.get(ParamId::new(0, ParamSlot::Bias)).unwrap();
        assert!((gb.get(0, 0) - 0.5).abs() < 1e-15 && gb.get(0, 1) == 0.0);
    }

    #[test]
    fn spectral_weight_gradient_k1() {
        let mut p = single_layer(Matrix::diag(&[3.0, 1.0]).unwrap(), &[0.0, 0.0]);
        p.refresh_power_states(RESOLVE_ITERS, 0.0);
        let r = spectral_penalty(&p, 1);
        let gw = r.grads.get(ParamId::new(0, ParamSlot::Weight)).unwrap();
        let want = Matrix::diag(&[4.0, 0.0]).unwrap();
        assert!(gw.sub(&want).unwrap().max_abs() < 1e-9);
        finite_difference_check(&p, |q| exact_spectral_value(q, 1), &r.grads, 1e-6, 1e-6);
    }

    #[test]
    fn spectral_gradient_matches_finite_differences() {
        for seed in 0..5 {
            for k in [1, 2, 3] {
                let mut p = random_params(seed, true);
                p.refresh_power_states(RESOLVE_ITERS, 0.0);
                let r = spectral_penalty(&p, k);
                assert!((r.value - exact_spectral_value(&p, k)).abs() < 1e-8 * r.value.max(1.0));
                finite_difference_check(&p, |q| exact_spectral_value(q, k), &r.grads, 1e-6, 1e-3);
            }
        }
    }

    #[test]
    fn zero_weight_contributes_one_with_zero_gradient() {
        let r = spectral_penalty(&single_layer(Matrix::zeros(2, 3), &[0.0, 0.0]), 2);
        assert_eq!(r.value, 1.0);
        assert_eq!(r.grads.max_abs(), 0.0);
    }

    #[test]
    fn spectral_targets_only_the_top_direction() {
        let w = Matrix::diag(&[1.0, 1.0, 1.0, 2.5]).unwrap();
        let mut p = single_layer(w, &[0.0; 4]);
        p.refresh_power_states(RESOLVE_ITERS, 0.0);
        let gs = spectral_penalty(&p, 2).grads;
        let gs = gs.get(ParamId::new(0, ParamSlot::Weight)).unwrap();
        let gl = l2_zero_penalty(&p).grads;
        let gl = gl.get(ParamId::new(0, ParamSlot::Weight)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let on_top = i == 3 && j == 3;
                assert_eq!(gs.get(i, j).abs() > 1e-9, on_top, "spectral ({i},{j})");
                assert_eq!(gl.get(i, j) != 0.0, i == j, "l2 ({i},{j})");
            }
        }
    }

    #[test]
    fn l2_examples_and_gradients() {
        let p = single_layer(Matrix::zeros(1, 1), &[0.0]);
        assert_eq!(l2_zero_penalty(&p).value, 0.0);
        let p = single_layer(Matrix::filled(1, 1, 3.0), &[0.0]);
        let r = l2_zero_penalty(&p);
        assert_eq!(r.value, 9.0);
        assert_eq!(r.grads.get(ParamId::new(0, ParamSlot::Weight)).unwrap().get(0, 0), 6.0);
        let p = random_params(1, true);
        finite_difference_check(&p, |q| l2_zero_penalty(q).value, &l2_zero_penalty(&p).grads, 1e-3, 1e-8);
    }

    #[test]
    fn l2_init_examples_and_gradients() {
        let spec = MlpSpec::new(3, &[4], 2).with_layer_norm(true);
        let mut p = init_params(&spec, 2).unwrap();
        assert_eq!(l2_init_penalty(&p).unwrap().value, 0.0);
        let id = ParamId::new(0, ParamSlot::Weight);
        let delta = Matrix::from_fn(4, 3, |r, c| 0.01 * (r as f64 - c as f64));
        p.param_mut(id).unwrap().add_scaled_in_place(&delta, 1.0).unwrap();
        let r = l2_init_penalty(&p).unwrap();
        assert!((r.value - delta.frobenius_norm_sq()).abs() < 1e-15);
        assert!(r.grads.get(id).unwrap().sub(&delta.scale(2.0)).unwrap().max_abs() < 1e-15);
        let mut q = random_params(3, false);
        q.capture_snapshot();
        let snap_src = random_params(4, false);
        for id in q.param_ids() {
            *q.param_mut(id).unwrap() = snap_src.param(id).unwrap().clone();
        }
        let rq = l2_init_penalty(&q).unwrap();
        finite_difference_check(&q, |x| l2_init_penalty(x).unwrap().value, &rq.grads, 1e-3, 1e-8);
    }

    #[test]
    fn l2_init_needs_snapshot() {
        let p = single_layer(Matrix::identity(2), &[0.0, 0.0]);
        assert_eq!(l2_init_penalty(&p), Err(RegError::MissingSnapshot));
    }

    #[test]
    fn lambda_zero_is_no_regularizer() {
        for kind in [RegularizerKind::Spectral, RegularizerKind::L2Zero, RegularizerKind::L2Init] {
            assert_eq!(RegularizerConfig::penalty(kind, 0.0).effective_kind(), RegularizerKind::None);
        }
        assert_eq!(
            RegularizerConfig::penalty(RegularizerKind::Redo, 0.0).effective_kind(),
            RegularizerKind::Redo
        );
    }

    #[test]
    fn composite_examples() {
        let p = random_params(5, false);
        let pen = l2_zero_penalty(&p);
        let task = pen.grads.scale(-0.5);
        assert_eq!(composite_gradient(&task, &pen, 0.0).unwrap(), task);
        let zero = GradientStore::default();
        let g = composite_gradient(&zero, &pen, 0.3).unwrap();
        for (&id, v) in g.iter() {
            assert!(v.sub(&pen.grads.get(id).unwrap().scale(0.3)).unwrap().max_abs() < 1e-15);
        }
        let mut bad = GradientStore::default();
        bad.insert(ParamId::new(0, ParamSlot::Weight), Matrix::zeros(1, 1));
        assert!(composite_gradient(&bad, &pen, 1.0).is_err());
    }

    #[test]
    fn composite_step_descends() {
        use crate::models::Targets;
        let mut p = random_params(6, true);
        p.refresh_power_states(RESOLVE_ITERS, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::from_fn(8, 4, |_, _| rng.random_range(0.0..1.0));
        let y = Targets::Classes((0..8).map(|i| i % 2).collect());
        let lambda = 0.01;
        let objective = |q: &ParamSet| q.loss_and_gradient(&x, &y).unwrap().0 + lambda * exact_spectral_value(q, 2);
        let (_, task) = p.loss_and_gradient(&x, &y).unwrap();
        let g = composite_gradient(&task, &spectral_penalty(&p, 2), lambda).unwrap();
        let before = objective(&p);
        crate::optim::sgd_step(&mut p, &g, 1e-3).unwrap();
        assert!(objective(&p) < before);
    }

    #[test]
    fn shrink_perturb_identity_and_fresh_draw() {
        let p = random_params(7, true);
        let mut q = p.clone();
        shrink_perturb_step(&mut q, 1.0, 0.0, 11);
        for id in p.param_ids() {
            assert_eq!(p.param(id), q.param(id));
        }
        let mut fresh = p.clone();
        // shrink must be positive in configs, the transform itself accepts 0
        shrink_perturb_step(&mut fresh, 0.0, 1.0, 11);
        for id in p.param_ids() {
            let m = fresh.param(id).unwrap();
            match id.slot {
                ParamSlot::Bias | ParamSlot::Beta => assert!(m.as_slice().iter().all(|v| *v == 0.0)),
                ParamSlot::Gamma => assert!(m.as_slice().iter().all(|v| *v == 1.0)),
                ParamSlot::Weight => {
                    let bound = crate::models::init_bound(m.cols());
                    assert!(m.max_abs() < bound && m.max_abs() > 0.0);
                }
            }
            assert_eq!(m.shape(), p.param(id).unwrap().shape());
        }
    }

    #[test]
    fn shrink_perturb_variance() {
        let spec = MlpSpec::new(40, &[], 50);
        let p = init_params(&spec, 8).unwrap();
        let var = |m: &Matrix| {
            let n = m.len() as f64;
            let mean = m.sum() / n;
            m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        };
        // uniform(±1/√40)
        let init_var = 1.0 / 40.0 / 3.0;
        let base = var(&p.layers[0].weight);
        for (shrink, perturb) in [(0.8, 0.01), (0.5, 0.5), (0.9, 0.3)] {
            let mut q = p.clone();
            shrink_perturb_step(&mut q, shrink, perturb, 21);
            let want = shrink * shrink * base + perturb * perturb * init_var;
            let got = var(&q.layers[0].weight);
            assert!((got / want - 1.0).abs() < 0.1, "{shrink},{perturb}: {got} vs {want}");
        }
    }

    #[test]
    fn dormant_unit_is_reset_and_output_preserved() {
        let mut p = random_params(9, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe = Matrix::from_fn(32, 4, |_, _| rng.random_range(0.0..1.0));
        // silence unit 2 of the first hidden layer
        for c in 0..4 {
            p.layers[0].weight.set(2, c, -1.0);
        }
        p.layers[0].bias.set(0, 2, -1.0);
        let before = p.forward(&probe).unwrap();
        assert!(before.hidden[0].column(2).iter().all(|v| *v == 0.0));
        let mut q = p.clone();
        let mask = redo_reset(&mut q, &before.hidden, 0.0, 1).unwrap();
        assert!(mask.layers[0][2]);
        assert_eq!(q.layers[0].bias.get(0, 2), 0.0);
        assert!(q.layers[1].weight.column(2).iter().all(|v| *v == 0.0));
        assert_ne!(q.layers[0].weight.row(2), p.layers[0].weight.row(2));
        let after = q.forward(&probe).unwrap();
        assert!(after.logits.sub(&before.logits).unwrap().max_abs() < 1e-12);
        for (a, b) in q.param_ids().iter().zip(p.param_ids()) {
            assert_eq!(*a, b);
            assert_eq!(q.param(*a).unwrap().shape(), p.param(b).unwrap().shape());
        }
    }

    #[test]
    fn active_units_untouched() {
        let mut p = random_params(10, false);
        let hidden = vec![Matrix::filled(4, 5, 1.0), Matrix::filled(4, 3, 2.0)];
        let before = p.clone();
        let mask = redo_reset(&mut p, &hidden, 0.5, 1).unwrap();
        assert_eq!(mask.count(), 0);
        assert_eq!(p, before);
        assert!(redo_reset(&mut p, &hidden[..1], 0.5, 1).is_err());
    }

    #[test]
    fn dormancy_scores_normalize_by_layer_mean() {
        let h = Matrix::from_rows(&[&[0.0, 1.0, 2.0], &[0.0, 3.0, 0.0]]).unwrap();
        assert_eq!(dormancy_scores(&h), vec![0.0, 2.0, 1.0]);
        assert_eq!(dormancy_scores(&Matrix::zeros(2, 3)), vec![0.0; 3]);
    }

    #[test]
    fn refresh_resolves_on_schedule() {
        let mut p = random_params(11, false);
        refresh_power_states(&mut p, 0, 100);
        for layer in &p.layers {
            let s = singular_values(&layer.weight).unwrap()[0];
            assert!((layer.power.last_sigma - s).abs() < 1e-8 * s);
        }
        let w0 = p.layers[0].power.clone();
        refresh_power_states(&mut p, 1, 100);
        assert!(p.layers[0].power.u.len() == w0.u.len());
    }
}
