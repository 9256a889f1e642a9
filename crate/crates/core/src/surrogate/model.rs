//! Learned feedback laws built on top of a [`Network`].
//!
//! The plain structure evaluates `scale * phi(s)`. The anchored structure
//! removes the mean position and velocity (the dynamics are invariant under
//! both) and compares against the velocity-consensus state `c0` of the same
//! configuration:
//!
//! * a control model is `scale * (phi(c) - phi(c0))`, exactly zero at
//!   consensus;
//! * a value model is the sum of squares
//!   `scale / 4 * (|phi(c) - phi(c0)|^2 + |phi(flip c) - phi(c0)|^2)` of a
//!   vector-valued network, where `flip` negates the velocity deviations. It
//!   is nonnegative, even in the velocity deviations and vanishes to second
//!   order at consensus, so its feedback can only damp small deviations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::network::{Activation, ForwardCache, Gradients, Network, NetworkFile, NetworkSpec};
use crate::ensemble::{ControlField, EnsembleState};
use crate::sdre::{flatten_state, unflatten_agents};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Predicts the `dN` control directly.
    Control,
    /// Predicts the scalar value; the control comes from its gradient.
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Plain,
    #[default]
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transform {
    Identity,
    Center,
    CenterZeroVelocity,
    CenterFlipVelocity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub kind: ModelKind,
    pub structure: Structure,
    pub n_agents: usize,
    pub dim: usize,
    pub output_scale: f64,
    pub network: Network,
}

/// Quantities from one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossEval {
    /// `L0 + mu * gradient MSE`.
    pub total: f64,
    pub value_mse: f64,
    pub gradient_mse: f64,
    pub grads: Option<Gradients>,
}

/// `-(N / (2 gamma))` times the velocity block of the input gradient of a
/// scalar network evaluated on the flat state.
pub fn control_from_value_model(network: &Network, state: &EnsembleState, gamma: f64) -> Result<ControlField> {
    let (n, d) = state.velocities.shape();
    let g = network.input_gradient(&flatten_state(state))?;
    Ok(control_from_gradient(&g, n, d, gamma))
}

fn control_from_gradient(g: &DVector<f64>, n: usize, d: usize, gamma: f64) -> ControlField {
    let nd = n * d;
    let scale = -(n as f64) / (2.0 * gamma);
    let vel: Vec<f64> = g.as_slice()[nd..2 * nd].iter().map(|x| x * scale).collect();
    ControlField::new(unflatten_agents(&vel, n, d))
}

impl SurrogateModel {
    pub fn new(
        kind: ModelKind,
        structure: Structure,
        n_agents: usize,
        dim: usize,
        hidden_widths: Vec<usize>,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let nd = n_agents * dim;
        let spec = NetworkSpec::uniform(2 * nd, hidden_widths, Self::network_outputs(kind, structure, nd), activation);
        Self::from_network(kind, structure, n_agents, dim, Network::glorot(spec, seed)?)
    }

    pub fn from_network(kind: ModelKind, structure: Structure, n_agents: usize, dim: usize, network: Network) -> Result<Self> {
        let nd = n_agents * dim;
        let expect_out = Self::network_outputs(kind, structure, nd);
        if network.spec.input_dim != 2 * nd || network.spec.output_dim != expect_out {
            return Err(Error::DimensionMismatch(format!(
                "network {}->{} does not fit a {kind:?} model for N={n_agents}, d={dim}",
                network.spec.input_dim, network.spec.output_dim
            )));
        }
        Ok(Self {
            kind,
            structure,
            n_agents,
            dim,
            output_scale: 1.0,
            network,
        })
    }

    fn network_outputs(kind: ModelKind, structure: Structure, nd: usize) -> usize {
        match (kind, structure) {
            (ModelKind::Control, _) => nd,
            (ModelKind::Value, Structure::Plain) => 1,
            // One feature per velocity coordinate, enough for a full-rank
            // quadratic form in the velocity deviations.
            (ModelKind::Value, Structure::Anchored) => nd,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.n_agents * self.dim
    }

    /// Output dimension of the model (not of its network).
    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::Control => self.n_agents * self.dim,
            ModelKind::Value => 1,
        }
    }

    fn squares(&self) -> bool {
        self.kind == ModelKind::Value && self.structure == Structure::Anchored
    }

    /// Linear combinations `sum_k c_k phi(L_k s)`; not used by the
    /// sum-of-squares value form.
    fn terms(&self) -> &'static [(f64, Transform)] {
        match self.structure {
            Structure::Plain => &[(1.0, Transform::Identity)],
            Structure::Anchored => &[(1.0, Transform::Center), (-1.0, Transform::CenterZeroVelocity)],
        }
    }

    /// Transforms of the sum-of-squares form and the weight of each
    /// network evaluation in the state gradient.
    const SQUARE_TERMS: [(f64, Transform); 3] = [
        (0.5, Transform::Center),
        (0.5, Transform::CenterFlipVelocity),
        (-0.5, Transform::CenterZeroVelocity),
    ];

    /// Forward caches of the three evaluations and the residuals
    /// `r_1 = phi(c) - phi(c0)`, `r_2 = phi(flip c) - phi(c0)`.
    fn square_parts(&self, s: &DMatrix<f64>) -> Result<(Vec<ForwardCache>, [DMatrix<f64>; 2])> {
        let caches = Self::SQUARE_TERMS
            .iter()
            .map(|&(_, t)| self.network.forward_cached(&self.transform(t, s)))
            .collect::<Result<Vec<_>>>()?;
        let r1 = &caches[0].output - &caches[2].output;
        let r2 = &caches[1].output - &caches[2].output;
        Ok((caches, [r1, r2]))
    }

    fn square_value(&self, r: &[DMatrix<f64>; 2]) -> DMatrix<f64> {
        let batch = r[0].ncols();
        DMatrix::from_fn(1, batch, |_, j| {
            0.25 * self.output_scale * (r[0].column(j).norm_squared() + r[1].column(j).norm_squared())
        })
    }

    /// Per-evaluation cotangents `w` with `grad V = sum_e c_e L_e J_e^T w_e`.
    fn square_weights(r: &[DMatrix<f64>; 2]) -> [DMatrix<f64>; 3] {
        [r[0].clone(), r[1].clone(), &r[0] + &r[1]]
    }

    fn square_gradient(&self, caches: &[ForwardCache], r: &[DMatrix<f64>; 2]) -> (Vec<Vec<DMatrix<f64>>>, DMatrix<f64>) {
        let ws = Self::square_weights(r);
        let mut grad = DMatrix::zeros(self.input_dim(), r[0].ncols());
        let mut chains = Vec::with_capacity(3);
        for ((cache, w), &(c, t)) in caches.iter().zip(&ws).zip(&Self::SQUARE_TERMS) {
            let chain = self.network.vjp_chain(cache, w);
            grad += self.transform(t, &chain[0]) * (c * self.output_scale);
            chains.push(chain);
        }
        (chains, grad)
    }

    /// Applies a (symmetric) transform to every column.
    fn transform(&self, t: Transform, s: &DMatrix<f64>) -> DMatrix<f64> {
        if t == Transform::Identity {
            return s.clone();
        }
        let (n, d) = (self.n_agents, self.dim);
        let nd = n * d;
        let mut out = s.clone();
        for mut col in out.column_iter_mut() {
            for block in 0..2 {
                for k in 0..d {
                    let mean = (0..n).map(|i| col[block * nd + i * d + k]).sum::<f64>() / n as f64;
                    for i in 0..n {
                        let idx = block * nd + i * d + k;
                        col[idx] = match (block, t) {
                            (1, Transform::CenterZeroVelocity) => 0.0,
                            (1, Transform::CenterFlipVelocity) => -(col[idx] - mean),
                            _ => col[idx] - mean,
                        };
                    }
                }
            }
        }
        out
    }

    fn check_states(&self, s: &DMatrix<f64>) -> Result<()> {
        if s.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "states of length {} for a model with {} inputs",
                s.nrows(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Predictions for a batch of flat states, one per column.
    pub fn predict_batch(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_states(s)?;
        if self.squares() {
            let (_, r) = self.square_parts(s)?;
            return Ok(self.square_value(&r));
        }
        let mut out = DMatrix::zeros(self.output_dim(), s.ncols());
        for &(c, t) in self.terms() {
            out += self.network.forward_batch(&self.transform(t, s))? * (c * self.output_scale);
        }
        Ok(out)
    }

    pub fn predict(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.predict_batch(&DMatrix::from_column_slice(s.len(), 1, s.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    /// Gradient of a value model with respect to the flat state.
    pub fn value_gradient_batch(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_states(s)?;
        if self.kind != ModelKind::Value {
            return Err(Error::Unsupported("gradients are defined for value models".into()));
        }
        if self.squares() {
            let (caches, r) = self.square_parts(s)?;
            return Ok(self.square_gradient(&caches, &r).1);
        }
        let mut g = DMatrix::zeros(s.nrows(), s.ncols());
        for &(c, t) in self.terms() {
            let inner = self.network.input_gradient_batch(&self.transform(t, s))?;
            g += self.transform(t, &inner) * (c * self.output_scale);
        }
        Ok(g)
    }

    /// Feedback for the current state.
    pub fn control(&self, state: &EnsembleState, gamma: f64) -> Result<ControlField> {
        let (n, d) = state.velocities.shape();
        if (n, d) != (self.n_agents, self.dim) {
            return Err(Error::DimensionMismatch("state does not match model size".into()));
        }
        let s = flatten_state(state);
        let col = DMatrix::from_column_slice(s.len(), 1, s.as_slice());
        match self.kind {
            ModelKind::Control => {
                let u = self.predict_batch(&col)?;
                Ok(ControlField::new(unflatten_agents(u.as_slice(), n, d)))
            }
            ModelKind::Value => {
                let g = self.value_gradient_batch(&col)?;
                Ok(control_from_gradient(&g.column(0).into_owned(), n, d, gamma))
            }
        }
    }

    /// Mean squared errors and, optionally, parameter gradients of
    /// `L0 + mu * L0(grad)` on a batch. `grad_labels` is only used by value
    /// models with `mu > 0`.
    pub fn loss(
        &self,
        states: &DMatrix<f64>,
        labels: &DMatrix<f64>,
        grad_labels: Option<&DMatrix<f64>>,
        mu: f64,
        with_grads: bool,
    ) -> Result<LossEval> {
        self.check_states(states)?;
        let batch = states.ncols();
        if batch == 0 || labels.shape() != (self.output_dim(), batch) {
            return Err(Error::DimensionMismatch("labels do not match the batch".into()));
        }
        let use_grad = self.kind == ModelKind::Value && mu > 0.0;
        let grad_labels = match (use_grad, grad_labels) {
            (true, Some(g)) if g.shape() == states.shape() => Some(g),
            (true, _) => return Err(Error::InvalidInput("gradient labels required for mu > 0".into())),
            (false, _) => None,
        };
        if self.squares() {
            return self.square_loss(states, labels, grad_labels, mu, with_grads);
        }

        let inputs: Vec<DMatrix<f64>> = self.terms().iter().map(|&(_, t)| self.transform(t, states)).collect();
        let mut evals = Vec::with_capacity(inputs.len());
        let mut pred = DMatrix::zeros(self.output_dim(), batch);
        let mut grad = DMatrix::zeros(states.nrows(), batch);
        for (z, &(c, t)) in inputs.iter().zip(self.terms()) {
            let (cache, chain) = if use_grad {
                self.network.eval_with_gradient(z)?
            } else {
                (self.network.forward_cached(z)?, None)
            };
            pred += &cache.output * (c * self.output_scale);
            if let Some(ch) = &chain {
                grad += self.transform(t, &ch[0]) * (c * self.output_scale);
            }
            evals.push((cache, chain));
        }

        let resid = &pred - labels;
        let value_mse = resid.norm_squared() / resid.len() as f64;
        let (gradient_mse, grad_resid) = match grad_labels {
            Some(gl) => {
                let r = &grad - gl;
                (r.norm_squared() / r.len() as f64, Some(r))
            }
            None => (0.0, None),
        };
        let total = value_mse + if use_grad { mu * gradient_mse } else { 0.0 };

        let grads = if with_grads {
            let mut acc = Gradients::zeros_like(&self.network);
            let out_seed = &resid * (2.0 / resid.len() as f64);
            let grad_seed = grad_resid.map(|r| {
                let len = r.len() as f64;
                r * (2.0 * mu / len)
            });
            for ((cache, chain), &(c, t)) in evals.iter().zip(self.terms()) {
                let w = c * self.output_scale;
                let gbar = grad_seed.as_ref().map(|g| self.transform(t, g) * w);
                self.network
                    .backward(cache, chain.as_deref(), &(&out_seed * w), gbar.as_ref(), &mut acc)?;
            }
            Some(acc)
        } else {
            None
        };
        Ok(LossEval {
            total,
            value_mse,
            gradient_mse,
            grads,
        })
    }

    fn square_loss(
        &self,
        states: &DMatrix<f64>,
        labels: &DMatrix<f64>,
        grad_labels: Option<&DMatrix<f64>>,
        mu: f64,
        with_grads: bool,
    ) -> Result<LossEval> {
        let (caches, r) = self.square_parts(states)?;
        let resid = self.square_value(&r) - labels;
        let value_mse = resid.norm_squared() / resid.len() as f64;
        let (chains, grad_resid) = match grad_labels {
            Some(gl) => {
                let (chains, grad) = self.square_gradient(&caches, &r);
                (Some(chains), Some(grad - gl))
            }
            None => (None, None),
        };
        let gradient_mse = grad_resid.as_ref().map_or(0.0, |g| g.norm_squared() / g.len() as f64);
        let total = value_mse + mu * gradient_mse;
        if !with_grads {
            return Ok(LossEval {
                total,
                value_mse,
                gradient_mse,
                grads: None,
            });
        }

        let mut acc = Gradients::zeros_like(&self.network);
        let m = self.network.n_layers();
        // Cotangents of r_1, r_2 from the value term.
        let v_bar = &resid * (2.0 / resid.len() as f64);
        let mut r_bar: Vec<DMatrix<f64>> = r
            .iter()
            .map(|ri| {
                let mut out = ri * (0.5 * self.output_scale);
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col *= v_bar[j];
                }
                out
            })
            .collect();
        let mut extras = vec![vec![None; m]; 3];
        if let (Some(chains), Some(gr)) = (&chains, &grad_resid) {
            let seed = gr * (2.0 * mu / gr.len() as f64);
            let ws = Self::square_weights(&r);
            let mut w_bars = Vec::with_capacity(3);
            for (e, &(c, t)) in Self::SQUARE_TERMS.iter().enumerate() {
                let gbar = self.transform(t, &seed) * (c * self.output_scale);
                let (extra, w_bar) = self.network.chain_backward(&caches[e], &chains[e], &ws[e], &gbar, &mut acc);
                extras[e] = extra;
                w_bars.push(w_bar);
            }
            r_bar[0] += &w_bars[0] + &w_bars[2];
            r_bar[1] += &w_bars[1] + &w_bars[2];
        }
        let out_bars = [r_bar[0].clone(), r_bar[1].clone(), -(&r_bar[0] + &r_bar[1])];
        for e in 0..3 {
            self.network.output_backward(&caches[e], &out_bars[e], &extras[e], &mut acc);
        }
        Ok(LossEval {
            total,
            value_mse,
            gradient_mse,
            grads: Some(acc),
        })
    }
}

/// Model file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub structure: Structure,
    pub n_agents: usize,
    pub dim: usize,
    pub output_scale: f64,
    #[serde(flatten)]
    pub network: NetworkFile,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl SurrogateModel {
    pub fn to_file(&self, metadata: serde_json::Value) -> ModelFile {
        ModelFile {
            kind: self.kind,
            structure: self.structure,
            n_agents: self.n_agents,
            dim: self.dim,
            output_scale: self.output_scale,
            network: NetworkFile::from(&self.network),
            metadata,
        }
    }

    pub fn from_file(f: ModelFile) -> Result<Self> {
        let mut m = Self::from_network(f.kind, f.structure, f.n_agents, f.dim, Network::try_from(f.network)?)?;
        m.output_scale = f.output_scale;
        Ok(m)
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>, metadata: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file(metadata))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        let meta = file.metadata.clone();
        Ok((Self::from_file(file)?, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::SimParams;
    use rand::{Rng, SeedableRng};

    fn random_states(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
    }

    fn with_random_biases(mut m: SurrogateModel, seed: u64) -> SurrogateModel {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for b in &mut m.network.biases {
            b.iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
        }
        m.output_scale = 1.7;
        m
    }

    #[test]
    fn anchored_models_vanish_at_consensus() {
        let n = 4;
        let state = EnsembleState::new(
            random_states(n, 2, 1),
            DMatrix::from_fn(n, 2, |_, k| 0.3 + k as f64),
            0.0,
        )
        .unwrap();
        let u = with_random_biases(
            SurrogateModel::new(ModelKind::Control, Structure::Anchored, n, 2, vec![6], Activation::Tanh, 3).unwrap(),
            1,
        );
        assert!(u.control(&state, 0.1).unwrap().values.amax() < 1e-14);
        let v = with_random_biases(
            SurrogateModel::new(ModelKind::Value, Structure::Anchored, n, 2, vec![6], Activation::Sigmoid, 3).unwrap(),
            2,
        );
        let flat = flatten_state(&state);
        assert!(v.predict(&flat).unwrap()[0].abs() < 1e-14);
        assert!(v.control(&state, 0.1).unwrap().values.amax() < 1e-13);
    }

    #[test]
    fn anchored_value_is_nonnegative_and_damps_near_consensus() {
        let n = 4;
        let v = with_random_biases(
            SurrogateModel::new(ModelKind::Value, Structure::Anchored, n, 2, vec![9], Activation::Sigmoid, 8).unwrap(),
            6,
        );
        let s = random_states(16, 50, 21) * 2.0 - DMatrix::from_element(16, 50, 1.0);
        assert!(v.predict_batch(&s).unwrap().min() >= 0.0);

        // Small velocity deviation around a consensus state: the feedback
        // does not push the deviation outward.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let dv = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1e-3..1e-3));
            let vel = DMatrix::from_fn(n, 2, |_, k| 0.2 * k as f64) + &dv;
            let state = EnsembleState::new(random_states(n, 2, rng.gen()), vel, 0.0).unwrap();
            let u = v.control(&state, 0.1).unwrap().values;
            let mean = DMatrix::from_fn(n, 2, |_, k| dv.column(k).mean());
            assert!(u.dot(&(&dv - mean)) <= 1e-12 * u.norm());
        }
    }

    #[test]
    fn anchored_models_are_translation_invariant() {
        let n = 3;
        let m = with_random_biases(
            SurrogateModel::new(ModelKind::Control, Structure::Anchored, n, 2, vec![5], Activation::Tanh, 4).unwrap(),
            3,
        );
        let s = random_states(12, 1, 9);
        let mut shifted = s.clone();
        for i in 0..n {
            shifted[2 * i] += 0.7;
            shifted[6 + 2 * i + 1] -= 0.4;
        }
        let a = m.predict_batch(&s).unwrap();
        let b = m.predict_batch(&shifted).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        for structure in [Structure::Plain, Structure::Anchored] {
            let m = with_random_biases(
                SurrogateModel::new(ModelKind::Value, structure, 3, 2, vec![7, 4], Activation::Tanh, 5).unwrap(),
                4,
            );
            let s = random_states(12, 1, 2).column(0).into_owned();
            let g = m.value_gradient_batch(&DMatrix::from_column_slice(12, 1, s.as_slice())).unwrap();
            let h = 1e-6;
            for i in 0..12 {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[i] += h;
                sm[i] -= h;
                let fd = (m.predict(&sp).unwrap()[0] - m.predict(&sm).unwrap()[0]) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g.amax(), "{structure:?} {i}");
            }
        }
    }

    #[test]
    fn value_control_formula() {
        let n = 3;
        let net = super::super::network::Network::glorot(NetworkSpec::uniform(12, vec![5], 1, Activation::Sigmoid), 8).unwrap();
        let state = EnsembleState::new(random_states(n, 2, 3), random_states(n, 2, 4), 0.0).unwrap();
        let u = control_from_value_model(&net, &state, 0.1).unwrap().values;
        let u2 = control_from_value_model(&net, &state, 0.2).unwrap().values;
        assert!((&u - &u2 * 2.0).amax() < 1e-15);

        let s = flatten_state(&state);
        let h = 1e-6;
        for i in 0..n {
            for k in 0..2 {
                let idx = 6 + i * 2 + k;
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[idx] += h;
                sm[idx] -= h;
                let fd = (net.forward(&sp).unwrap()[0] - net.forward(&sm).unwrap()[0]) / (2.0 * h);
                let expected = -(n as f64) / 0.2 * fd;
                assert!((u[(i, k)] - expected).abs() <= 1e-6 * u.amax());
            }
        }

        let model = SurrogateModel::from_network(ModelKind::Value, Structure::Plain, n, 2, net).unwrap();
        assert_eq!(model.control(&state, 0.1).unwrap().values, u);
        let zero = SurrogateModel::from_network(
            ModelKind::Value,
            Structure::Plain,
            n,
            2,
            super::super::network::Network::zeros(NetworkSpec::uniform(12, vec![5], 1, Activation::Tanh)).unwrap(),
        )
        .unwrap();
        assert_eq!(zero.control(&state, SimParams::default().gamma).unwrap().values.amax(), 0.0);
    }

    #[test]
    fn loss_formulas() {
        // Single sample, scalar output: L1 = e^2 + mu |g|^2 / dim.
        let net = super::super::network::Network::glorot(NetworkSpec::uniform(4, vec![3], 1, Activation::Tanh), 2).unwrap();
        let m = SurrogateModel::from_network(ModelKind::Value, Structure::Plain, 1, 2, net).unwrap();
        let s = random_states(4, 1, 7);
        let pred = m.predict_batch(&s).unwrap()[0];
        let grad = m.value_gradient_batch(&s).unwrap();
        let label = DMatrix::from_element(1, 1, pred - 0.3);
        let gl = &grad - DMatrix::from_column_slice(4, 1, &[0.1, -0.2, 0.0, 0.4]);
        let mu = 0.7;
        let eval = m.loss(&s, &label, Some(&gl), mu, false).unwrap();
        let expected = 0.09 + mu * (0.01 + 0.04 + 0.16) / 4.0;
        assert!((eval.total - expected).abs() < 1e-14);
        let eval0 = m.loss(&s, &label, Some(&gl), 0.0, false).unwrap();
        assert_eq!(eval0.total, eval0.value_mse);

        let exact = m.predict_batch(&s).unwrap();
        assert_eq!(m.loss(&s, &exact, Some(&grad), mu, false).unwrap().total, 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for (kind, structure, mu) in [
            (ModelKind::Value, Structure::Anchored, 0.3),
            (ModelKind::Value, Structure::Plain, 0.5),
            (ModelKind::Control, Structure::Anchored, 0.0),
        ] {
            let mut m = with_random_biases(SurrogateModel::new(kind, structure, 2, 2, vec![4, 3], Activation::Sigmoid, 6).unwrap(), 5);
            let s = random_states(8, 5, 11);
            let labels = random_states(m.output_dim(), 5, 12);
            let gl = random_states(8, 5, 13);
            let eval = m.loss(&s, &labels, Some(&gl), mu, true).unwrap();
            let analytic = eval.grads.unwrap().flatten();
            let base = m.network.params_flat();
            let h = 1e-6;
            for p in 0..base.len() {
                let mut q = base.clone();
                q[p] += h;
                m.network.set_params_flat(&q).unwrap();
                let fp = m.loss(&s, &labels, Some(&gl), mu, false).unwrap().total;
                q[p] -= 2.0 * h;
                m.network.set_params_flat(&q).unwrap();
                let fm = m.loss(&s, &labels, Some(&gl), mu, false).unwrap().total;
                m.network.set_params_flat(&base).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - analytic[p]).abs() <= 1e-5 * analytic[p].abs().max(1e-4),
                    "{kind:?} {structure:?} param {p}: {fd} vs {}",
                    analytic[p]
                );
            }
        }
    }

    #[test]
    fn model_json_round_trip() {
        let m = with_random_biases(SurrogateModel::new(ModelKind::Value, Structure::Anchored, 2, 2, vec![3], Activation::Tanh, 1).unwrap(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save_json(&path, serde_json::json!({"epochs": 3})).unwrap();
        let (back, meta) = SurrogateModel::load_json(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["epochs"], 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"weights\"") && text.contains("\"activations\"") && text.contains("\"spec\""));
    }
}
