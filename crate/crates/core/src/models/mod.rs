//! ReLU MLPs with tagged parameters, an initialization snapshot, hidden
//! activations exposed for diagnostics, and per-example gradients.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::seed;
use crate::spectral::{power_iteration, PowerIterState};
use crate::tensor::{GradientStore, Matrix, NodeId, ParamId, ParamSlot, Tape, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("batch has {got} features, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("need at least one example")]
    EmptyBatch,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint magic {0:?} is not PLAB")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a parameter enters the network, which decides how it is regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamClass {
    MultiplicativeMatrix,
    MultiplicativeDiagonal,
    AdditiveBias,
}

impl ParamClass {
    pub fn of(slot: ParamSlot) -> Self {
        match slot {
            ParamSlot::Weight => ParamClass::MultiplicativeMatrix,
            ParamSlot::Gamma => ParamClass::MultiplicativeDiagonal,
            ParamSlot::Bias | ParamSlot::Beta => ParamClass::AdditiveBias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Layer norm between each hidden linear map and its ReLU.
    pub layer_norm: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            layer_norm: false,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(ModelError::InvalidSpec(format!(
                "all widths must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(d_in, d_out)` for each linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `d_out × d_in`.
    pub weight: Matrix,
    /// `1 × d_out`.
    pub bias: Matrix,
    pub gamma: Option<Matrix>,
    pub beta: Option<Matrix>,
    pub power: PowerIterState,
}

impl LayerParams {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    pub fn slot(&self, slot: ParamSlot) -> Option<&Matrix> {
        match slot {
            ParamSlot::Weight => Some(&self.weight),
            ParamSlot::Bias => Some(&self.bias),
            ParamSlot::Gamma => self.gamma.as_ref(),
            ParamSlot::Beta => self.beta.as_ref(),
        }
    }

    pub fn slot_mut(&mut self, slot: ParamSlot) -> Option<&mut Matrix> {
        match slot {
            ParamSlot::Weight => Some(&mut self.weight),
            ParamSlot::Bias => Some(&mut self.bias),
            ParamSlot::Gamma => self.gamma.as_mut(),
            ParamSlot::Beta => self.beta.as_mut(),
        }
    }
}

/// Frozen copy of every parameter at construction time.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    tensors: BTreeMap<ParamId, Matrix>,
}

impl ParamSnapshot {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.tensors.get(&id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    spec: MlpSpec,
    pub layers: Vec<LayerParams>,
    init: Option<Arc<ParamSnapshot>>,
}

/// Parameters drawn from the initialization distribution.
///
/// `W ~ U(−√(6/d_in), √(6/d_in))`, `b = 0`, `γ = 1`, `β = 0`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParamSet, ModelError> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.num_layers());
    for (l, (d_in, d_out)) in spec.layer_dims().into_iter().enumerate() {
        let mut rng = seed::rng(seed, seed::tag::INIT, l as u64);
        let hidden = l + 1 < spec.num_layers();
        let norm = hidden && spec.layer_norm;
        layers.push(LayerParams {
            weight: sample_weight(d_out, d_in, &mut rng),
            bias: Matrix::zeros(1, d_out),
            gamma: norm.then(|| Matrix::filled(1, d_out, 1.0)),
            beta: norm.then(|| Matrix::zeros(1, d_out)),
            power: PowerIterState::new(d_out, d_in, seed::derive(seed, seed::tag::POWER, l as u64)),
        });
    }
    let mut params = ParamSet {
        spec: spec.clone(),
        layers,
        init: None,
    };
    params.capture_snapshot();
    Ok(params)
}

/// Half-width of the uniform weight init, `1/√d_in`. This is the fan-in
/// uniform with gain `√(1/3)`, which starts square layers at σ₁ ≈ 2/√3.
pub fn init_bound(d_in: usize) -> f64 {
    1.0 / (d_in as f64).sqrt()
}

/// Fan-in uniform draw for a `d_out × d_in` weight.
pub fn sample_weight(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = init_bound(d_in);
    Matrix::from_fn(d_out, d_in, |_, _| rng.random_range(-bound..bound))
}

impl ParamSet {
    /// Assembles a parameter set from explicit layers. No snapshot is captured.
    pub fn from_layers(spec: MlpSpec, layers: Vec<LayerParams>) -> Result<Self, ModelError> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(ModelError::InvalidSpec(format!(
                "{} layers for a spec with {}",
                layers.len(),
                dims.len()
            )));
        }
        for (l, ((d_in, d_out), layer)) in dims.iter().zip(&layers).enumerate() {
            let norm = spec.layer_norm && l + 1 < dims.len();
            let ok = layer.weight.shape() == (*d_out, *d_in)
                && layer.bias.shape() == (1, *d_out)
                && layer.gamma.as_ref().map(Matrix::shape) == norm.then_some((1, *d_out))
                && layer.beta.as_ref().map(Matrix::shape) == norm.then_some((1, *d_out));
            if !ok {
                return Err(ModelError::InvalidSpec(format!("layer {l} shapes do not match spec")));
            }
        }
        Ok(Self {
            spec,
            layers,
            init: None,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Replaces the initialization snapshot by the current values.
    pub fn capture_snapshot(&mut self) {
        let tensors = self
            .param_ids()
            .into_iter()
            .map(|id| (id, self.param(id).expect("listed id").clone()))
            .collect();
        self.init = Some(Arc::new(ParamSnapshot { tensors }));
    }

    pub fn init_snapshot(&self) -> Option<&ParamSnapshot> {
        self.init.as_deref()
    }

    /// Every trainable parameter id, in layer order then `W, b, γ, β`.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for slot in [ParamSlot::Weight, ParamSlot::Bias, ParamSlot::Gamma, ParamSlot::Beta] {
                if layer.slot(slot).is_some() {
                    ids.push(ParamId::new(l, slot));
                }
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.layers.get(id.layer).and_then(|l| l.slot(id.slot))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.layers.get_mut(id.layer).and_then(|l| l.slot_mut(id.slot))
    }

    pub fn num_params(&self) -> usize {
        self.param_ids().iter().map(|id| self.param(*id).unwrap().len()).sum()
    }

    /// Fresh draw from the initialization distribution of `id`.
    pub fn sample_init(&self, id: ParamId, rng: &mut impl Rng) -> Option<Matrix> {
        let p = self.param(id)?;
        Some(match id.slot {
            ParamSlot::Weight => sample_weight(p.rows(), p.cols(), rng),
            ParamSlot::Bias | ParamSlot::Beta => Matrix::zeros(p.rows(), p.cols()),
            ParamSlot::Gamma => Matrix::filled(p.rows(), p.cols(), 1.0),
        })
    }

    /// Runs power iteration on every weight against its warm state.
    pub fn refresh_power_states(&mut self, max_iters: usize, tol: f64) {
        for layer in &mut self.layers {
            power_iteration(&layer.weight, &mut layer.power, max_iters, tol);
        }
    }

    /// Records the forward pass on `tape`, with parameters as tape leaves.
    pub fn record(&self, tape: &mut Tape, batch: &Matrix) -> Result<ForwardNodes, ModelError> {
        if batch.cols() != self.spec.input_dim {
            return Err(ModelError::InputDim {
                expected: self.spec.input_dim,
                got: batch.cols(),
            });
        }
        let input = tape.input(batch.clone());
        let mut h = input;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut preacts = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(ParamId::new(l, ParamSlot::Weight), layer.weight.clone());
            let b = tape.param(ParamId::new(l, ParamSlot::Bias), layer.bias.clone());
            let wt = tape.transpose(w);
            let z = tape.matmul(h, wt)?;
            let mut z = tape.add_row(z, b)?;
            if l == last {
                preacts.push(z);
                return Ok(ForwardNodes {
                    input,
                    hidden,
                    preacts,
                    logits: z,
                });
            }
            if let (Some(g), Some(be)) = (&layer.gamma, &layer.beta) {
                let g = tape.param(ParamId::new(l, ParamSlot::Gamma), g.clone());
                let be = tape.param(ParamId::new(l, ParamSlot::Beta), be.clone());
                z = tape.layer_norm(z, g, be)?;
            }
            preacts.push(z);
            h = tape.relu(z);
            hidden.push(h);
        }
        unreachable!("spec always has an output layer")
    }

    /// Forward pass returning every post-activation hidden layer and the logits.
    pub fn forward(&self, batch: &Matrix) -> Result<Forward, ModelError> {
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, batch)?;
        Ok(Forward {
            hidden: nodes.hidden.iter().map(|n| tape.value(*n).clone()).collect(),
            logits: tape.value(nodes.logits).clone(),
        })
    }

    /// Mean loss over the batch and its parameter gradient.
    pub fn loss_and_gradient(
        &self,
        batch: &Matrix,
        targets: &Targets,
    ) -> Result<(f64, GradientStore), ModelError> {
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, batch)?;
        let loss = targets.record_loss(&mut tape, nodes.logits)?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    }
}

/// Tape nodes of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub input: NodeId,
    /// Post-ReLU hidden activations.
    pub hidden: Vec<NodeId>,
    /// Pre-activation of every layer (after layer norm for hidden layers).
    pub preacts: Vec<NodeId>,
    pub logits: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub hidden: Vec<Matrix>,
    pub logits: Matrix,
}

/// Supervision attached to a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Class indices, trained with softmax cross-entropy.
    Classes(Vec<usize>),
    /// Real targets, trained with half mean squared error.
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(m) => Targets::Values(m.select_rows(indices)),
        }
    }

    pub fn record_loss(&self, tape: &mut Tape, logits: NodeId) -> Result<NodeId, TensorError> {
        match self {
            Targets::Classes(c) => tape.softmax_cross_entropy(logits, c),
            Targets::Values(m) => {
                let t = tape.input(m.clone());
                tape.mse(logits, t)
            }
        }
    }
}

/// Per-example gradients of one layer, one column per example.
#[derive(Clone, Debug)]
pub struct LayerExampleGradients {
    /// `(d_out·d_in) × m`; column `i` is the column-major `vec(∇_W ℓᵢ)`.
    pub weight: Matrix,
    /// `d_out × m`.
    pub bias: Matrix,
}

/// Gradients of each example's loss, computed by `m` single-example backward passes.
pub fn per_example_gradients(
    params: &ParamSet,
    batch: &Matrix,
    targets: &Targets,
) -> Result<Vec<LayerExampleGradients>, ModelError> {
    let m = batch.rows();
    if m == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let n_layers = params.num_layers();
    let mut weight_cols: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(m); n_layers];
    let mut bias_cols: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(m); n_layers];
    for i in 0..m {
        let x = batch.select_rows(&[i]);
        let t = targets.select(&[i]);
        let (_, grads) = params.loss_and_gradient(&x, &t)?;
        for l in 0..n_layers {
            let layer = &params.layers[l];
            let gw = grads
                .get(ParamId::new(l, ParamSlot::Weight))
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(layer.width(), layer.fan_in()));
            let gb = grads
                .get(ParamId::new(l, ParamSlot::Bias))
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(1, layer.width()));
            weight_cols[l].push(gw.vec_columns());
            bias_cols[l].push(gb.into_vec());
        }
    }
    weight_cols
        .into_iter()
        .zip(bias_cols)
        .map(|(w, b)| {
            Ok(LayerExampleGradients {
                weight: Matrix::from_columns(&w)?,
                bias: Matrix::from_columns(&b)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{numeric_rank, singular_values};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_fixed_values_and_determinism() {
        let spec = MlpSpec::new(6, &[5, 4], 3).with_layer_norm(true);
        let p = init_params(&spec, 7).unwrap();
        for (l, layer) in p.layers.iter().enumerate() {
            assert!(layer.bias.as_slice().iter().all(|v| *v == 0.0));
            if l + 1 < p.num_layers() {
                assert!(layer.gamma.as_ref().unwrap().as_slice().iter().all(|v| *v == 1.0));
                assert!(layer.beta.as_ref().unwrap().as_slice().iter().all(|v| *v == 0.0));
            } else {
                assert!(layer.gamma.is_none() && layer.beta.is_none());
            }
            assert!(layer.weight.max_abs() < init_bound(layer.fan_in()));
        }
        assert_eq!(p, init_params(&spec, 7).unwrap());
        assert_ne!(p, init_params(&spec, 8).unwrap());
        let snap = p.init_snapshot().unwrap();
        for id in p.param_ids() {
            assert_eq!(snap.get(id), p.param(id));
        }
    }

    fn top_sigma(p: &mut ParamSet, l: usize) -> f64 {
        let layer = &mut p.layers[l];
        power_iteration(&layer.weight, &mut layer.power, 5000, 1e-12)
    }

    #[test]
    fn init_spectrum_is_near_one() {
        let square = MlpSpec::new(256, &[], 256);
        for seed in 0..100 {
            let mut p = init_params(&square, seed).unwrap();
            let s = top_sigma(&mut p, 0);
            if seed < 3 {
                let full = singular_values(&p.layers[0].weight).unwrap()[0];
                assert!((s - full).abs() < 1e-6 * full);
            }
            assert!((0.9..=1.6).contains(&s), "seed {seed}: {s}");
        }
        let default = MlpSpec::new(64, &[64, 64, 64], 10);
        for seed in 0..100 {
            let mut p = init_params(&default, seed).unwrap();
            for l in 0..p.num_layers() {
                let s = top_sigma(&mut p, l);
                // the 10×64 head sits lower, near (√64 + √10)/√192 ≈ 0.81
                let band = if l == 3 { 0.6..=1.8 } else { 0.8..=1.8 };
                assert!(band.contains(&s), "seed {seed} layer {l}: {s}");
            }
        }
    }

    #[test]
    fn init_spectrum_sits_at_the_random_matrix_edge() {
        // Entry variance 1/(3·d_in) puts σ₁ near (√d_in + √d_out)/√(3·d_in).
        for &(d_in, d_out) in &[(256, 256), (256, 10), (64, 64)] {
            let edge = ((d_in as f64).sqrt() + (d_out as f64).sqrt()) / (3.0 * d_in as f64).sqrt();
            let spec = MlpSpec::new(d_in, &[], d_out);
            for seed in 0..100 {
                let mut p = init_params(&spec, seed).unwrap();
                let s = top_sigma(&mut p, 0);
                assert!((s / edge - 1.0).abs() < 0.12, "{d_in}x{d_out} seed {seed}: {s} vs {edge}");
            }
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(init_params(&MlpSpec::new(0, &[3], 2), 0).is_err());
        assert!(init_params(&MlpSpec::new(3, &[0], 2), 0).is_err());
    }

    #[test]
    fn zero_depth_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::new(3, &[], 2);
        let mut p = init_params(&spec, 0).unwrap();
        p.layers[0].bias = random(1, 2, &mut rng);
        let x = random(4, 3, &mut rng);
        let out = p.forward(&x).unwrap();
        assert!(out.hidden.is_empty());
        for i in 0..4 {
            for o in 0..2 {
                let expected: f64 = (0..3).map(|j| p.layers[0].weight.get(o, j) * x.get(i, j)).sum::<f64>()
                    + p.layers[0].bias.get(0, o);
                assert!((out.logits.get(i, o) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_input_zero_logits() {
        let p = init_params(&MlpSpec::new(4, &[8, 8], 3), 2).unwrap();
        let out = p.forward(&Matrix::zeros(2, 4)).unwrap();
        assert_eq!(out.logits, Matrix::zeros(2, 3));
    }

    #[test]
    fn one_hidden_layer_by_hand() {
        let spec = MlpSpec::new(2, &[2], 1);
        let layers = vec![
            LayerParams {
                weight: Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 1.0]]).unwrap(),
                bias: Matrix::row_vector(&[0.25, -0.5]).unwrap(),
                gamma: None,
                beta: None,
                power: PowerIterState::new(2, 2, 0),
            },
            LayerParams {
                weight: Matrix::row_vector(&[2.0, -1.0]).unwrap(),
                bias: Matrix::row_vector(&[0.125]).unwrap(),
                gamma: None,
                beta: None,
                power: PowerIterState::new(1, 2, 0),
            },
        ];
        let p = ParamSet::from_layers(spec, layers).unwrap();
        let x = Matrix::from_rows(&[&[1.0, 0.25], &[-1.0, 1.0]]).unwrap();
        let out = p.forward(&x).unwrap();
        // row 0: z = (1 - 0.5 + 0.25, 0.5 + 0.25 - 0.5) = (0.75, 0.25) → y = 1.5 - 0.25 + 0.125
        // row 1: z = (-1 - 2 + 0.25, -0.5 + 1 - 0.5) = (-2.75, 0) → h = (0, 0) → y = 0.125
        assert_eq!(out.hidden[0].as_slice(), &[0.75, 0.25, 0.0, 0.0]);
        assert!((out.logits.get(0, 0) - 1.375).abs() < 1e-15);
        assert!((out.logits.get(1, 0) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_params(&MlpSpec::new(4, &[3], 2), 0).unwrap();
        assert!(matches!(
            p.forward(&Matrix::zeros(1, 5)),
            Err(ModelError::InputDim { expected: 4, got: 5 })
        ));
    }

    fn sample_problem(seed: u64, m: usize) -> (ParamSet, Matrix, Targets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::new(5, &[6, 4], 3);
        let mut p = init_params(&spec, seed).unwrap();
        for layer in &mut p.layers {
            layer.bias = random(1, layer.width(), &mut rng).scale(0.1);
        }
        let x = random(m, 5, &mut rng);
        let y: Vec<usize> = (0..m).map(|i| i % 3).collect();
        (p, x, Targets::Classes(y))
    }

    #[test]
    fn single_example_column_is_backward_gradient() {
        let (p, x, y) = sample_problem(3, 1);
        let g = per_example_gradients(&p, &x, &y).unwrap();
        let (_, batch) = p.loss_and_gradient(&x, &y).unwrap();
        for (l, lg) in g.iter().enumerate() {
            let w = batch.get(ParamId::new(l, ParamSlot::Weight)).unwrap();
            assert_eq!(lg.weight.column(0), w.vec_columns());
        }
    }

    #[test]
    fn duplicated_example_gives_rank_one() {
        let (p, x, y) = sample_problem(4, 1);
        let x2 = x.select_rows(&[0, 0]);
        let y2 = y.select(&[0, 0]);
        let g = per_example_gradients(&p, &x2, &y2).unwrap();
        for lg in &g {
            assert_eq!(lg.weight.column(0), lg.weight.column(1));
            assert!(numeric_rank(&singular_values(&lg.weight).unwrap()) <= 1);
        }
    }

    #[test]
    fn column_mean_is_batch_gradient() {
        let (p, x, y) = sample_problem(5, 7);
        let g = per_example_gradients(&p, &x, &y).unwrap();
        let (_, batch) = p.loss_and_gradient(&x, &y).unwrap();
        for (l, lg) in g.iter().enumerate() {
            let w = batch.get(ParamId::new(l, ParamSlot::Weight)).unwrap().vec_columns();
            let b = batch.get(ParamId::new(l, ParamSlot::Bias)).unwrap();
            for r in 0..lg.weight.rows() {
                let mean = lg.weight.row(r).iter().sum::<f64>() / 7.0;
                assert!((mean - w[r]).abs() <= 1e-12 * w[r].abs().max(1e-3));
            }
            for r in 0..lg.bias.rows() {
                let mean = lg.bias.row(r).iter().sum::<f64>() / 7.0;
                assert!((mean - b.get(0, r)).abs() <= 1e-12 * b.get(0, r).abs().max(1e-3));
            }
        }
    }

    #[test]
    fn per_example_weight_gradients_are_rank_one() {
        let (p, x, y) = sample_problem(6, 5);
        let g = per_example_gradients(&p, &x, &y).unwrap();
        for (l, lg) in g.iter().enumerate() {
            let (d_out, d_in) = p.layers[l].weight.shape();
            for i in 0..5 {
                let gi = Matrix::from_vec_columns(d_out, d_in, &lg.weight.column(i));
                assert!(numeric_rank(&singular_values(&gi).unwrap()) <= 1);
            }
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let (p, _, _) = sample_problem(1, 1);
        assert!(matches!(
            per_example_gradients(&p, &Matrix::zeros(0, 5), &Targets::Classes(vec![])),
            Err(ModelError::EmptyBatch)
        ));
    }
}
