//! Measurements: gradient diversity, layerwise Jacobian bounds, the gradient
//! rank bound and its Kronecker factorization, representation change and
//! per-layer spectra.

use thiserror::Error;

use crate::models::{per_example_gradients, LayerParams, ModelError, ParamSet, Targets};
use crate::spectral::{
    condition_number, effective_rank, numeric_rank, singular_values, SpectralError, SpectralSummary,
};
use crate::tensor::{Matrix, Tape, TensorError};

/// Absolute slack on singular-value and reconstruction checks, scaled by the
/// magnitude of the quantities compared.
pub const BOUND_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("gradient diversity needs at least 2 columns, got {0}")]
    SingleColumn(usize),
    #[error("architectures differ")]
    ArchitectureMismatch,
    #[error("layer {0} has no following layer")]
    NotHiddenLayer(usize),
    #[error("the Kronecker factorization is defined for plain ReLU layers only")]
    LayerNormUnsupported,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityEntry {
    pub erank: f64,
    /// `σ₁/σ_m` over the `m` columns; infinite when `σ_m` vanishes.
    pub condition: f64,
    pub sigma_max: f64,
}

/// erank, condition number and σ₁ of a per-example gradient matrix.
pub fn gradient_diversity(g: &Matrix) -> Result<DiversityEntry, DiagError> {
    let m = g.cols();
    if m < 2 {
        return Err(DiagError::SingleColumn(m));
    }
    let sigma = singular_values(g)?;
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    // fewer rows than columns leaves σ_m = 0
    let sigma_m = if sigma.len() < m { 0.0 } else { sigma[m - 1] };
    Ok(DiversityEntry {
        erank: effective_rank(&sigma),
        condition: condition_number(sigma_max, sigma_m),
        sigma_max,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientDiversityReport {
    pub layers: Vec<DiversityEntry>,
}

/// Diversity of every layer's per-example weight gradients on `batch`.
pub fn diversity_report(
    params: &ParamSet,
    batch: &Matrix,
    targets: &Targets,
) -> Result<GradientDiversityReport, DiagError> {
    let grads = per_example_gradients(params, batch, targets)?;
    let layers = grads
        .iter()
        .map(|g| gradient_diversity(&g.weight))
        .collect::<Result<_, _>>()?;
    Ok(GradientDiversityReport { layers })
}

/// A ReLU layer's Jacobian `J = Dθ` at one input, with the singular-value
/// bounds `σ_min(D)σᵢ(θ) ≤ σᵢ(J) ≤ σ₁(D)σᵢ(θ)` checked per index.
#[derive(Clone, Debug)]
pub struct JacobianProbe {
    pub theta: Matrix,
    /// Diagonal of `D`, each entry 0 or 1.
    pub d: Vec<f64>,
    pub j: Matrix,
    pub sigma_theta: Vec<f64>,
    pub sigma_d: Vec<f64>,
    pub sigma_j: Vec<f64>,
    pub bounds_hold: Vec<bool>,
    /// `κ(θ)/κ(D) ≤ κ(J) ≤ κ(θ)κ(D)`; `None` when `D` is singular.
    pub condition_bound_holds: Option<bool>,
}

impl JacobianProbe {
    pub fn all_bounds_hold(&self) -> bool {
        self.bounds_hold.iter().all(|&b| b)
    }

    pub fn d_is_nonsingular(&self) -> bool {
        self.d.iter().all(|&x| x != 0.0)
    }
}

pub fn jacobian_probe(layer: &LayerParams, h: &[f64]) -> Result<JacobianProbe, DiagError> {
    let theta = &layer.weight;
    if h.len() != theta.cols() {
        return Err(DiagError::Shape(format!("input of length {} for {:?} weight", h.len(), theta.shape())));
    }
    let z = theta.mul_vec(h);
    // ReLU′(0) = 1
    let d: Vec<f64> = z
        .iter()
        .zip(layer.bias.as_slice())
        .map(|(zi, bi)| if zi + bi >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    let j = Matrix::from_fn(theta.rows(), theta.cols(), |r, c| d[r] * theta.get(r, c));
    let sigma_theta = singular_values(theta)?;
    let sigma_j = singular_values(&j)?;
    let mut sigma_d = d.clone();
    sigma_d.sort_by(|a, b| b.total_cmp(a));
    let d_max = sigma_d[0];
    let d_min = *sigma_d.last().expect("non-empty");
    let scale = sigma_theta.first().copied().unwrap_or(0.0).max(1.0);
    let bounds_hold = sigma_theta
        .iter()
        .zip(&sigma_j)
        .map(|(&st, &sj)| d_min * st - BOUND_TOL * scale <= sj && sj <= d_max * st + BOUND_TOL * scale)
        .collect();
    let condition_bound_holds = (d_min > 0.0).then(|| {
        let k_theta = condition_number(sigma_theta[0], *sigma_theta.last().unwrap());
        let k_j = condition_number(sigma_j[0], *sigma_j.last().unwrap());
        let k_d = d_max / d_min;
        if k_theta.is_infinite() {
            return k_j.is_infinite();
        }
        let slack = BOUND_TOL * k_theta.max(1.0);
        k_theta / k_d - slack <= k_j && k_j <= k_theta * k_d + slack
    });
    Ok(JacobianProbe {
        theta: theta.clone(),
        d,
        j,
        sigma_theta,
        sigma_d,
        sigma_j,
        bounds_hold,
        condition_bound_holds,
    })
}

/// `I_d ⊗ θᵀ`.
pub fn kronecker_operator(theta_next: &Matrix, d: usize) -> Matrix {
    Matrix::identity(d).kron(&theta_next.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankBoundVerdict {
    pub rank_g: usize,
    pub rank_theta: usize,
    pub rank_v: usize,
    pub d: usize,
    /// `min(d·rank(θ), rank(V))`.
    pub bound: usize,
    pub holds: bool,
    /// Max-abs gap between `G` and `(I_d ⊗ θᵀ)V`.
    pub reconstruction_error: f64,
    pub reconstructs: bool,
}

/// Checks `rank(G) ≤ min(d·rank(θ_{l+1}), rank(V))` and `G = (I_d ⊗ θ_{l+1}ᵀ)V`
/// with `d = V.rows / θ_{l+1}.rows`.
pub fn rank_bound_check(g: &Matrix, theta_next: &Matrix, v: &Matrix) -> Result<RankBoundVerdict, DiagError> {
    if theta_next.rows() == 0 || v.rows() % theta_next.rows() != 0 {
        return Err(DiagError::Shape(format!(
            "V has {} rows, not a multiple of θ's {}",
            v.rows(),
            theta_next.rows()
        )));
    }
    let d = v.rows() / theta_next.rows();
    let rebuilt = kronecker_operator(theta_next, d).matmul(v)?;
    if rebuilt.shape() != g.shape() {
        return Err(DiagError::Shape(format!("G is {:?}, (I⊗θᵀ)V is {:?}", g.shape(), rebuilt.shape())));
    }
    let rank_g = numeric_rank(&singular_values(g)?);
    let rank_theta = numeric_rank(&singular_values(theta_next)?);
    let rank_v = numeric_rank(&singular_values(v)?);
    let bound = (d * rank_theta).min(rank_v);
    let reconstruction_error = rebuilt.sub(g)?.max_abs();
    Ok(RankBoundVerdict {
        rank_g,
        rank_theta,
        rank_v,
        d,
        bound,
        holds: rank_g <= bound,
        reconstruction_error,
        reconstructs: reconstruction_error <= BOUND_TOL * g.max_abs().max(1.0),
    })
}

/// Per-example quantities of hidden layer `l` taken from backward passes.
#[derive(Clone, Debug)]
pub struct KroneckerFactors {
    /// `(d_l·d_{l−1}) × m`, column `i` the column-major `vec(∇_{W_l} ℓᵢ)`.
    pub g: Matrix,
    /// `(d_{l+1}·d_{l−1}) × m`, column `i` is `vec(δ_{l+1,i} h_{l−1,i}ᵀ)`.
    pub v: Matrix,
    pub theta_next: Matrix,
    /// ReLU derivative of layer `l` for every example.
    pub masks: Vec<Vec<f64>>,
}

impl KroneckerFactors {
    /// Every example has all of layer `l` active, so `D_l = I` throughout.
    pub fn all_active(&self) -> bool {
        self.masks.iter().all(|m| m.iter().all(|&x| x == 1.0))
    }

    /// `(I ⊗ D_{l,i})(I_d ⊗ θᵀ) vᵢ` per column, the factorization with the
    /// layer's own activation mask restored.
    pub fn masked_reconstruction(&self) -> Result<Matrix, DiagError> {
        let rows = self.theta_next.rows();
        let d = self.v.rows() / rows;
        let plain = kronecker_operator(&self.theta_next, d).matmul(&self.v)?;
        let width = self.theta_next.cols();
        Ok(Matrix::from_fn(plain.rows(), plain.cols(), |r, i| self.masks[i][r % width] * plain.get(r, i)))
    }
}

/// Assembles `G_l`, `V_l` and `θ_{l+1}` for hidden layer `l` (0-based).
pub fn kronecker_factors(
    params: &ParamSet,
    batch: &Matrix,
    targets: &Targets,
    layer: usize,
) -> Result<KroneckerFactors, DiagError> {
    if layer + 1 >= params.num_layers() {
        return Err(DiagError::NotHiddenLayer(layer));
    }
    if params.spec().layer_norm {
        return Err(DiagError::LayerNormUnsupported);
    }
    let mut g_cols = Vec::with_capacity(batch.rows());
    let mut v_cols = Vec::with_capacity(batch.rows());
    let mut masks = Vec::with_capacity(batch.rows());
    for i in 0..batch.rows() {
        let x = batch.select_rows(&[i]);
        let mut tape = Tape::new();
        let nodes = params.record(&mut tape, &x)?;
        let loss = targets.select(&[i]).record_loss(&mut tape, nodes.logits)?;
        let adj = tape.adjoints(loss)?;
        let h_prev = if layer == 0 {
            tape.value(nodes.input).clone()
        } else {
            tape.value(nodes.hidden[layer - 1]).clone()
        };
        let zero = |n: usize| Matrix::zeros(1, n);
        let width = params.layers[layer].width();
        let next_width = params.layers[layer + 1].width();
        let delta_l = adj.of(nodes.preacts[layer]).cloned().unwrap_or_else(|| zero(width));
        let delta_next = adj.of(nodes.preacts[layer + 1]).cloned().unwrap_or_else(|| zero(next_width));
        g_cols.push(delta_l.transpose().matmul(&h_prev)?.vec_columns());
        v_cols.push(delta_next.transpose().matmul(&h_prev)?.vec_columns());
        masks.push(
            tape.value(nodes.preacts[layer])
                .as_slice()
                .iter()
                .map(|&z| if z >= 0.0 { 1.0 } else { 0.0 })
                .collect(),
        );
    }
    Ok(KroneckerFactors {
        g: Matrix::from_columns(&g_cols)?,
        v: Matrix::from_columns(&v_cols)?,
        theta_next: params.layers[layer + 1].weight.clone(),
        masks,
    })
}

/// Mean over probe rows of `‖h_l(prev) − h_l(cur)‖₂ / √d_l`, one entry per
/// layer (hidden activations, then the logits).
#[derive(Clone, Debug, PartialEq)]
pub struct RepChangeRecord {
    pub layers: Vec<f64>,
}

pub fn representation_change(prev: &ParamSet, cur: &ParamSet, probe: &Matrix) -> Result<RepChangeRecord, DiagError> {
    if prev.spec() != cur.spec() {
        return Err(DiagError::ArchitectureMismatch);
    }
    let a = prev.forward(probe)?;
    let b = cur.forward(probe)?;
    let pairs = a.hidden.iter().zip(&b.hidden).chain(std::iter::once((&a.logits, &b.logits)));
    let layers = pairs
        .map(|(x, y)| {
            let d = x.cols() as f64;
            let n = x.rows().max(1) as f64;
            (0..x.rows())
                .map(|r| {
                    let sq: f64 = x.row(r).iter().zip(y.row(r)).map(|(p, q)| (p - q).powi(2)).sum();
                    sq.sqrt() / d.sqrt()
                })
                .sum::<f64>()
                / n
        })
        .collect();
    Ok(RepChangeRecord { layers })
}

/// Spectrum summary of every weight matrix.
pub fn spectral_trajectory(params: &ParamSet) -> Result<Vec<SpectralSummary>, DiagError> {
    params
        .layers
        .iter()
        .map(|l| SpectralSummary::of(&l.weight).map_err(DiagError::from))
        .collect()
}
