//! Small Q-network engine with hand-written gradients.
//!
//! A network is a stack of dense layers with at most one LSTM layer. Layers
//! before the LSTM run on every time step of an input sequence, the LSTM
//! consumes the sequence, and layers after it see only the final hidden
//! state. Without an LSTM only the last element of a sequence is used.
//!
//! Inputs are row-major batches: one `batch x features` matrix per time step.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((n_out, n_in)),
            biases: Array1::zeros(n_out),
            activation,
        }
    }

    /// Uniform weights scaled by `init` and zero biases.
    pub fn random<R: Rng + ?Sized>(
        n_in: usize,
        n_out: usize,
        activation: Activation,
        init: WeightInit,
        rng: &mut R,
    ) -> Self {
        let bound = match init {
            WeightInit::Glorot => (6.0 / (n_in + n_out) as f64).sqrt(),
            WeightInit::He => (6.0 / n_in as f64).sqrt(),
        };
        let mut layer = Self::zeros(n_in, n_out, activation);
        layer.weights.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        layer
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let z = x.dot(&self.weights.t()) + &self.biases;
        let a = match self.activation {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Linear => z.clone(),
        };
        (z, a)
    }
}

/// LSTM with gate blocks stacked in the order input, forget, output,
/// candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4U x in`
    pub w_input: Array2<f64>,
    /// `4U x U`
    pub w_recurrent: Array2<f64>,
    pub biases: Array1<f64>,
    /// Running state for step-by-step use; batch forwards start from zero.
    pub hidden: Array1<f64>,
    pub cell: Array1<f64>,
}

impl LstmLayer {
    pub fn zeros(n_in: usize, units: usize) -> Self {
        Self {
            w_input: Array2::zeros((4 * units, n_in)),
            w_recurrent: Array2::zeros((4 * units, units)),
            biases: Array1::zeros(4 * units),
            hidden: Array1::zeros(units),
            cell: Array1::zeros(units),
        }
    }

    /// Glorot-uniform input weights, `±1/sqrt(units)` recurrent weights and a
    /// forget-gate bias of one.
    pub fn random<R: Rng + ?Sized>(n_in: usize, units: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(n_in, units);
        let bx = (6.0 / (n_in + 4 * units) as f64).sqrt();
        let bh = 1.0 / (units as f64).sqrt();
        layer.w_input.mapv_inplace(|_| rng.gen_range(-bx..=bx));
        layer.w_recurrent.mapv_inplace(|_| rng.gen_range(-bh..=bh));
        layer.biases.slice_mut(s![units..2 * units]).fill(1.0);
        layer
    }

    pub fn units(&self) -> usize {
        self.w_recurrent.ncols()
    }

    pub fn n_in(&self) -> usize {
        self.w_input.ncols()
    }

    pub fn reset_state(&mut self) {
        self.hidden.fill(0.0);
        self.cell.fill(0.0);
    }

    /// One time step; returns (gate activations, new cell, new hidden).
    fn step(
        &self,
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let u = self.units();
        let mut gates = x.dot(&self.w_input.t()) + h.dot(&self.w_recurrent.t()) + &self.biases;
        gates.slice_mut(s![.., 0..3 * u]).mapv_inplace(sigmoid);
        gates.slice_mut(s![.., 3 * u..]).mapv_inplace(f64::tanh);
        let i = gates.slice(s![.., 0..u]);
        let f = gates.slice(s![.., u..2 * u]);
        let o = gates.slice(s![.., 2 * u..3 * u]);
        let g = gates.slice(s![.., 3 * u..]);
        let c_new = &f * &c + &i * &g;
        let h_new = &o * &c_new.mapv(f64::tanh);
        (gates, c_new, h_new)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Lstm(LstmLayer),
}

/// Uniform initialisation bounds: Glorot `sqrt(6/(fan_in+fan_out))` or He
/// `sqrt(6/fan_in)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInit {
    #[default]
    Glorot,
    He,
}

/// Shape of a Q-network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub lstm_units: Option<usize>,
    pub output_dim: usize,
    /// Initialisation of the ReLU hidden layers. The output layer is always
    /// Glorot.
    pub hidden_init: WeightInit,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(NetError::Config("layer widths must be positive".into()));
        }
        if self.lstm_units == Some(0) {
            return Err(NetError::Config("LSTM needs at least one unit".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Array2<f64>,
    z: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LstmCache {
    xs: Vec<Array2<f64>>,
    /// `hs[t]` and `cs[t]` are the states entering step `t`; one extra at the end.
    hs: Vec<Array2<f64>>,
    cs: Vec<Array2<f64>>,
    gates: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct Cache {
    pre: Vec<DenseCache>,
    lstm: Option<LstmCache>,
    post: Vec<DenseCache>,
    steps: usize,
    batch: usize,
}

/// Gradient tensors laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Dense {
        weights: Array2<f64>,
        biases: Array1<f64>,
    },
    Lstm {
        w_input: Array2<f64>,
        w_recurrent: Array2<f64>,
        biases: Array1<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Dense { weights, biases } => {
                    out.push(weights.as_slice().expect("standard layout"));
                    out.push(biases.as_slice().expect("standard layout"));
                }
                LayerGrad::Lstm {
                    w_input,
                    w_recurrent,
                    biases,
                } => {
                    out.push(w_input.as_slice().expect("standard layout"));
                    out.push(w_recurrent.as_slice().expect("standard layout"));
                    out.push(biases.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Training batch: `inputs[t]` is the `batch x input_dim` slice for step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Array2<f64>>,
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            clip_norm: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(NetError::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

impl QNetwork {
    /// Dense hidden stack, optional LSTM, linear output.
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self, NetError> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut width = spec.input_dim;
        for &h in &spec.hidden {
            layers.push(Layer::Dense(DenseLayer::random(
                width,
                h,
                Activation::Relu,
                spec.hidden_init,
                rng,
            )));
            width = h;
        }
        if let Some(u) = spec.lstm_units {
            layers.push(Layer::Lstm(LstmLayer::random(width, u, rng)));
            width = u;
        }
        layers.push(Layer::Dense(DenseLayer::random(
            width,
            spec.output_dim,
            Activation::Linear,
            WeightInit::Glorot,
            rng,
        )));
        Ok(Self { layers })
    }

    /// Builds a network from explicit layers after checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Shape("network has no layers".into()));
        }
        if layers.iter().filter(|l| matches!(l, Layer::Lstm(_))).count() > 1 {
            return Err(NetError::Shape("at most one LSTM layer is supported".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            let out = layer_out(&pair[0]);
            let inp = layer_in(&pair[1]);
            if out != inp {
                return Err(NetError::Shape(format!(
                    "layer {i} outputs {out} values but layer {} expects {inp}",
                    i + 1
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            let ok = match l {
                Layer::Dense(d) => d.biases.len() == d.n_out(),
                Layer::Lstm(m) => {
                    let u = m.units();
                    m.w_input.nrows() == 4 * u
                        && m.w_recurrent.nrows() == 4 * u
                        && m.biases.len() == 4 * u
                        && m.hidden.len() == u
                        && m.cell.len() == u
                }
            };
            if !ok {
                return Err(NetError::Shape(format!("layer {i} has inconsistent tensors")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        layer_in(&self.layers[0])
    }

    pub fn output_dim(&self) -> usize {
        layer_out(self.layers.last().expect("non-empty"))
    }

    pub fn is_recurrent(&self) -> bool {
        self.lstm_index().is_some()
    }

    fn lstm_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::Lstm(_)))
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order (per layer: weights, [recurrent
    /// weights,] biases).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice().expect("standard layout"));
                    out.push(d.biases.as_slice().expect("standard layout"));
                }
                Layer::Lstm(m) => {
                    out.push(m.w_input.as_slice().expect("standard layout"));
                    out.push(m.w_recurrent.as_slice().expect("standard layout"));
                    out.push(m.biases.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice_mut().expect("standard layout"));
                    out.push(d.biases.as_slice_mut().expect("standard layout"));
                }
                Layer::Lstm(m) => {
                    out.push(m.w_input.as_slice_mut().expect("standard layout"));
                    out.push(m.w_recurrent.as_slice_mut().expect("standard layout"));
                    out.push(m.biases.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    /// Copies every parameter from a network of identical shape.
    pub fn copy_weights_from(&mut self, other: &QNetwork) -> Result<(), NetError> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() || src.iter().zip(dst.iter()).any(|(a, b)| a.len() != b.len()) {
            return Err(NetError::Shape("networks differ in shape".into()));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            d.copy_from_slice(s);
        }
        Ok(())
    }

    /// Q-values for one encoded state. Recurrent networks treat it as a
    /// sequence of length one starting from a zero state.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.forward_sequence(&[x.to_vec()])
    }

    /// Q-values after the last element of `xs`, starting from a zero state.
    pub fn forward_sequence(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, NetError> {
        if xs.is_empty() {
            return Err(NetError::EmptySequence);
        }
        let steps = xs
            .iter()
            .map(|x| Array2::from_shape_vec((1, x.len()), x.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NetError::Shape(e.to_string()))?;
        let (out, _) = self.forward_cached(&steps)?;
        Ok(out.row(0).to_vec())
    }

    /// Batched forward: returns `batch x output_dim`.
    pub fn forward_batch(&self, xs: &[Array2<f64>]) -> Result<Array2<f64>, NetError> {
        Ok(self.forward_cached(xs)?.0)
    }

    /// Advances the stored LSTM state by one input and returns Q-values.
    /// Feed-forward networks simply evaluate `x`.
    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(x.len())?;
        let mut a = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        for layer in &mut self.layers {
            a = match layer {
                Layer::Dense(d) => d.forward(a.view()).1,
                Layer::Lstm(m) => {
                    let h = m.hidden.view().insert_axis(Axis(0));
                    let c = m.cell.view().insert_axis(Axis(0));
                    let (_, c_new, h_new) = m.step(a.view(), h, c);
                    m.cell = c_new.row(0).to_owned();
                    m.hidden = h_new.row(0).to_owned();
                    h_new
                }
            };
        }
        Ok(a.row(0).to_vec())
    }

    pub fn reset_state(&mut self) {
        for l in &mut self.layers {
            if let Layer::Lstm(m) = l {
                m.reset_state();
            }
        }
    }

    pub fn lstm_hidden(&self) -> Option<&Array1<f64>> {
        self.layers.iter().find_map(|l| match l {
            Layer::Lstm(m) => Some(&m.hidden),
            _ => None,
        })
    }

    fn check_input(&self, width: usize) -> Result<(), NetError> {
        if width != self.input_dim() {
            return Err(NetError::Shape(format!(
                "input width {width}, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, xs: &[Array2<f64>]) -> Result<(Array2<f64>, Cache), NetError> {
        let Some(last) = xs.last() else {
            return Err(NetError::EmptySequence);
        };
        let batch = last.nrows();
        for x in xs {
            self.check_input(x.ncols())?;
            if x.nrows() != batch {
                return Err(NetError::Shape("time steps differ in batch size".into()));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Shape("non-finite input".into()));
            }
        }
        let split = self.lstm_index();
        let (pre_layers, lstm, post_layers) = match split {
            Some(i) => (&self.layers[..i], Some(&self.layers[i]), &self.layers[i + 1..]),
            None => (&self.layers[..], None, &self.layers[..0]),
        };

        // Pre-LSTM layers run on all steps stacked into one matrix.
        let steps = if lstm.is_some() { xs.len() } else { 1 };
        let mut a = if lstm.is_some() {
            let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
            concatenate(Axis(0), &views).map_err(|e| NetError::Shape(e.to_string()))?
        } else {
            last.clone()
        };
        let mut pre = Vec::with_capacity(pre_layers.len());
        for l in pre_layers {
            let Layer::Dense(d) = l else { unreachable!("single LSTM") };
            let (z, out) = d.forward(a.view());
            pre.push(DenseCache { input: a, z });
            a = out;
        }

        let mut lstm_cache = None;
        if let Some(Layer::Lstm(m)) = lstm {
            let u = m.units();
            let mut h = Array2::zeros((batch, u));
            let mut c = Array2::zeros((batch, u));
            let mut cache = LstmCache {
                xs: Vec::with_capacity(steps),
                hs: vec![h.clone()],
                cs: vec![c.clone()],
                gates: Vec::with_capacity(steps),
            };
            for t in 0..steps {
                let x_t = a.slice(s![t * batch..(t + 1) * batch, ..]).to_owned();
                let (gates, c_new, h_new) = m.step(x_t.view(), h.view(), c.view());
                cache.xs.push(x_t);
                cache.gates.push(gates);
                cache.hs.push(h_new.clone());
                cache.cs.push(c_new.clone());
                h = h_new;
                c = c_new;
            }
            a = h;
            lstm_cache = Some(cache);
        }

        let mut post = Vec::with_capacity(post_layers.len());
        for l in post_layers {
            let Layer::Dense(d) = l else { unreachable!("single LSTM") };
            let (z, out) = d.forward(a.view());
            post.push(DenseCache { input: a, z });
            a = out;
        }
        Ok((
            a,
            Cache {
                pre,
                lstm: lstm_cache,
                post,
                steps,
                batch,
            },
        ))
    }

    /// Mean squared error on the selected actions and its exact gradient.
    pub fn backward(&self, batch: &Batch) -> Result<(Gradients, f64), NetError> {
        let (q, cache) = self.forward_cached(&batch.inputs)?;
        let n = cache.batch;
        if batch.actions.len() != n || batch.targets.len() != n {
            return Err(NetError::Shape(format!(
                "batch of {n} inputs with {} actions and {} targets",
                batch.actions.len(),
                batch.targets.len()
            )));
        }
        let mut d_out = Array2::zeros(q.dim());
        let mut loss = 0.0;
        for (i, (&a, &y)) in batch.actions.iter().zip(&batch.targets).enumerate() {
            if a >= q.ncols() {
                return Err(NetError::Shape(format!("action {a} outside 0..{}", q.ncols())));
            }
            if !y.is_finite() {
                return Err(NetError::Shape(format!("non-finite target at row {i}")));
            }
            let err = q[[i, a]] - y;
            loss += err * err;
            d_out[[i, a]] = 2.0 * err / n as f64;
        }
        loss /= n as f64;

        let split = self.lstm_index();
        let n_layers = self.layers.len();
        let mut grads: Vec<Option<LayerGrad>> = vec![None; n_layers];
        let post_start = split.map_or(n_layers, |i| i + 1);
        let mut delta = d_out;

        for (k, c) in cache.post.iter().enumerate().rev() {
            let Layer::Dense(d) = &self.layers[post_start + k] else { unreachable!() };
            let (g, dx) = dense_backward(d, c, &delta);
            grads[post_start + k] = Some(g);
            delta = dx;
        }

        if let (Some(li), Some(lc)) = (split, cache.lstm.as_ref()) {
            let Layer::Lstm(m) = &self.layers[li] else { unreachable!() };
            let (g, dx) = lstm_backward(m, lc, &delta, cache.steps, cache.batch);
            grads[li] = Some(g);
            delta = dx;
        }

        for (k, c) in cache.pre.iter().enumerate().rev() {
            let Layer::Dense(d) = &self.layers[k] else { unreachable!() };
            let (g, dx) = dense_backward(d, c, &delta);
            grads[k] = Some(g);
            delta = dx;
        }
        Ok((
            Gradients {
                layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
            },
            loss,
        ))
    }

    /// Batch loss without gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64, NetError> {
        let q = self.forward_batch(&batch.inputs)?;
        let n = q.nrows() as f64;
        Ok(batch
            .actions
            .iter()
            .zip(&batch.targets)
            .enumerate()
            .map(|(i, (&a, &y))| (q[[i, a]] - y).powi(2))
            .sum::<f64>()
            / n)
    }

    /// `w ← w − α g`, after optional global-norm clipping. Returns the
    /// pre-clip gradient norm.
    pub fn sgd_step(&mut self, grads: &Gradients, cfg: &SgdConfig) -> Result<f64, NetError> {
        cfg.validate()?;
        let g = grads.tensors();
        if g.len() != self.tensors().len() {
            return Err(NetError::Shape("gradient layout does not match network".into()));
        }
        for (i, t) in g.iter().enumerate() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteGradient(format!("tensor {i}")));
            }
        }
        let norm = grads.global_norm();
        let scale = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = cfg.learning_rate * scale;
        for (w, g) in self.tensors_mut().into_iter().zip(g) {
            if w.len() != g.len() {
                return Err(NetError::Shape("gradient tensor size mismatch".into()));
            }
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
        Ok(norm)
    }
}

fn layer_in(l: &Layer) -> usize {
    match l {
        Layer::Dense(d) => d.n_in(),
        Layer::Lstm(m) => m.n_in(),
    }
}

fn layer_out(l: &Layer) -> usize {
    match l {
        Layer::Dense(d) => d.n_out(),
        Layer::Lstm(m) => m.units(),
    }
}

fn dense_backward(d: &DenseLayer, c: &DenseCache, delta: &Array2<f64>) -> (LayerGrad, Array2<f64>) {
    let dz = match d.activation {
        Activation::Relu => {
            let mut dz = delta.clone();
            dz.zip_mut_with(&c.z, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            dz
        }
        Activation::Linear => delta.clone(),
    };
    let grad = LayerGrad::Dense {
        weights: dz.t().dot(&c.input),
        biases: dz.sum_axis(Axis(0)),
    };
    (grad, dz.dot(&d.weights))
}

/// Backpropagation through time over the whole cached sequence. Only the
/// final hidden state receives a gradient from above.
fn lstm_backward(
    m: &LstmLayer,
    c: &LstmCache,
    dh_final: &Array2<f64>,
    steps: usize,
    batch: usize,
) -> (LayerGrad, Array2<f64>) {
    let u = m.units();
    let mut dw_x = Array2::zeros(m.w_input.dim());
    let mut dw_h = Array2::zeros(m.w_recurrent.dim());
    let mut db = Array1::zeros(m.biases.len());
    let mut dx = Array2::zeros((steps * batch, m.n_in()));
    let mut dh = dh_final.clone();
    let mut dc_next: Array2<f64> = Array2::zeros((batch, u));

    for t in (0..steps).rev() {
        let gates = &c.gates[t];
        let i = gates.slice(s![.., 0..u]);
        let f = gates.slice(s![.., u..2 * u]);
        let o = gates.slice(s![.., 2 * u..3 * u]);
        let g = gates.slice(s![.., 3 * u..]);
        let c_prev = &c.cs[t];
        let tanh_c = c.cs[t + 1].mapv(f64::tanh);

        let d_o = &dh * &tanh_c;
        let dc = &dh * &o * &tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
        let d_i = &dc * &g;
        let d_g = &dc * &i;
        let d_f = &dc * c_prev;
        dc_next = &dc * &f;

        let mut dgates = Array2::zeros((batch, 4 * u));
        dgates
            .slice_mut(s![.., 0..u])
            .assign(&(&d_i * &i.mapv(|v| v * (1.0 - v))));
        dgates
            .slice_mut(s![.., u..2 * u])
            .assign(&(&d_f * &f.mapv(|v| v * (1.0 - v))));
        dgates
            .slice_mut(s![.., 2 * u..3 * u])
            .assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));
        dgates
            .slice_mut(s![.., 3 * u..])
            .assign(&(&d_g * &g.mapv(|v| 1.0 - v * v)));

        dw_x += &dgates.t().dot(&c.xs[t]);
        dw_h += &dgates.t().dot(&c.hs[t]);
        db += &dgates.sum_axis(Axis(0));
        dx.slice_mut(s![t * batch..(t + 1) * batch, ..])
            .assign(&dgates.dot(&m.w_input));
        dh = dgates.dot(&m.w_recurrent);
    }
    (
        LayerGrad::Lstm {
            w_input: dw_x,
            w_recurrent: dw_h,
            biases: db,
        },
        dx,
    )
}

/// Largest relative gap between analytic and central-difference gradients,
/// reported separately for dense and LSTM parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub dense_max_rel_error: f64,
    pub lstm_max_rel_error: Option<f64>,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.dense_max_rel_error.max(self.lstm_max_rel_error.unwrap_or(0.0))
    }
}

/// Differences smaller than this are treated as agreement; it sits well
/// above central-difference round-off for O(1) losses.
const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares every parameter's analytic gradient with a central difference
/// of step `h`.
pub fn gradient_check(net: &QNetwork, batch: &Batch, h: f64) -> Result<GradCheckReport, NetError> {
    let (grads, _) = net.backward(batch)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let kinds: Vec<bool> = net
        .layers
        .iter()
        .flat_map(|l| match l {
            Layer::Dense(_) => vec![false, false],
            Layer::Lstm(_) => vec![true, true, true],
        })
        .collect();

    let mut probe = net.clone();
    let mut report = GradCheckReport::default();
    for (ti, a_t) in analytic.iter().enumerate() {
        for (j, &a) in a_t.iter().enumerate() {
            let orig = probe.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + h;
            let plus = probe.loss(batch)?;
            probe.tensors_mut()[ti][j] = orig - h;
            let minus = probe.loss(batch)?;
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if kinds[ti] {
                let e = report.lstm_max_rel_error.get_or_insert(0.0);
                *e = e.max(rel);
            } else {
                report.dense_max_rel_error = report.dense_max_rel_error.max(rel);
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}

const MAGIC: &[u8; 4] = b"CRQN";
const FORMAT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, layer descriptors, little-endian f64
/// parameters, SHA-256 of everything before it.
pub fn serialize(net: &QNetwork) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + net.n_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        match l {
            Layer::Dense(d) => {
                out.push(0);
                out.push(match d.activation {
                    Activation::Relu => 0,
                    Activation::Linear => 1,
                });
                out.extend_from_slice(&(d.n_in() as u32).to_le_bytes());
                out.extend_from_slice(&(d.n_out() as u32).to_le_bytes());
            }
            Layer::Lstm(m) => {
                out.push(1);
                out.push(0);
                out.extend_from_slice(&(m.n_in() as u32).to_le_bytes());
                out.extend_from_slice(&(m.units() as u32).to_le_bytes());
            }
        }
    }
    for t in net.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<QNetwork, NetError> {
    let bad = |m: &str| NetError::Checkpoint(m.to_string());
    if bytes.len() < 12 + 32 {
        return Err(bad("checkpoint truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    if &body[0..4] != MAGIC {
        return Err(bad("not a network checkpoint"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported format version {version}")));
    }
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = r.u8()?;
        let act = r.u8()?;
        let a = r.u32()? as usize;
        let b = r.u32()? as usize;
        layers.push(match kind {
            0 => {
                let activation = match act {
                    0 => Activation::Relu,
                    1 => Activation::Linear,
                    _ => return Err(bad("unknown activation")),
                };
                Layer::Dense(DenseLayer::zeros(a, b, activation))
            }
            1 => Layer::Lstm(LstmLayer::zeros(a, b)),
            _ => return Err(bad("unknown layer type")),
        });
    }
    let mut net = QNetwork::from_layers(layers)?;
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(net)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NetError> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(r: &mut ChaCha8Rng, steps: usize, batch: usize, width: usize, n_out: usize) -> Batch {
        Batch {
            inputs: (0..steps)
                .map(|_| Array2::from_shape_fn((batch, width), |_| r.gen_range(-1.0..1.0)))
                .collect(),
            actions: (0..batch).map(|_| r.gen_range(0..n_out)).collect(),
            targets: (0..batch).map(|_| r.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::from_layers(vec![
            Layer::Dense(DenseLayer::zeros(4, 8, Activation::Relu)),
            Layer::Dense(DenseLayer::zeros(8, 3, Activation::Linear)),
        ])
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut d = DenseLayer::zeros(3, 3, Activation::Linear);
        d.weights = Array2::eye(3);
        let net = QNetwork::from_layers(vec![Layer::Dense(d)]).unwrap();
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = NetworkSpec {
            hidden_init: WeightInit::Glorot,
            input_dim: 7,
            hidden: vec![16, 8],
            lstm_units: None,
            output_dim: 15,
        };
        let net = QNetwork::new(&spec, &mut rng(3)).unwrap();
        let again = QNetwork::new(&spec, &mut rng(3)).unwrap();
        let x = [0.1, 0.0, 1.0, 1.0, 0.0, 0.3, 0.7];
        assert_eq!(net.forward(&x).unwrap(), again.forward(&x).unwrap());
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn lstm_without_recurrence_reduces_to_gates() {
        let mut r = rng(8);
        let mut lstm = LstmLayer::random(3, 2, &mut r);
        lstm.w_recurrent.fill(0.0);
        let out = DenseLayer {
            weights: Array2::eye(2),
            biases: Array1::zeros(2),
            activation: Activation::Linear,
        };
        let net = QNetwork::from_layers(vec![Layer::Lstm(lstm.clone()), Layer::Dense(out)]).unwrap();
        let x = [0.3, -0.7, 1.1];
        let got = net.forward_sequence(&[x.to_vec()]).unwrap();
        for k in 0..2 {
            let pre = |gate: usize| {
                let row = gate * 2 + k;
                (0..3).map(|j| lstm.w_input[[row, j]] * x[j]).sum::<f64>() + lstm.biases[row]
            };
            let i = sigmoid(pre(0));
            let o = sigmoid(pre(2));
            let g = pre(3).tanh();
            let expect = o * (i * g).tanh();
            assert!((got[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn stepwise_state_resets() {
        let spec = NetworkSpec {
            hidden_init: WeightInit::Glorot,
            input_dim: 4,
            hidden: vec![6],
            lstm_units: Some(5),
            output_dim: 3,
        };
        let mut net = QNetwork::new(&spec, &mut rng(11)).unwrap();
        let seq: Vec<Vec<f64>> = (0..4).map(|t| vec![t as f64 * 0.1, 0.2, -0.3, 1.0]).collect();
        let first: Vec<_> = seq.iter().map(|x| net.step(x).unwrap()).collect();
        net.reset_state();
        let second: Vec<_> = seq.iter().map(|x| net.step(x).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(*first.last().unwrap(), net.forward_sequence(&seq).unwrap());
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let mut d = DenseLayer::zeros(1, 1, Activation::Linear);
        d.weights[[0, 0]] = 1.0;
        let mut net = QNetwork::from_layers(vec![Layer::Dense(d)]).unwrap();
        let g = Gradients {
            layers: vec![LayerGrad::Dense {
                weights: Array2::from_elem((1, 1), 0.5),
                biases: Array1::zeros(1),
            }],
        };
        let cfg = SgdConfig {
            learning_rate: 0.1,
            clip_norm: None,
        };
        net.sgd_step(&g, &cfg).unwrap();
        assert!((net.tensors()[0][0] - 0.95).abs() < 1e-15);

        let nan = Gradients {
            layers: vec![LayerGrad::Dense {
                weights: Array2::from_elem((1, 1), f64::NAN),
                biases: Array1::zeros(1),
            }],
        };
        assert!(matches!(net.sgd_step(&nan, &cfg), Err(NetError::NonFiniteGradient(_))));
    }

    #[test]
    fn linear_gradient_closed_form() {
        let mut d = DenseLayer::zeros(2, 1, Activation::Linear);
        d.weights = Array2::from_shape_vec((1, 2), vec![0.5, -0.25]).unwrap();
        d.biases[0] = 0.1;
        let net = QNetwork::from_layers(vec![Layer::Dense(d)]).unwrap();
        let x = [2.0, 4.0];
        let y = 3.0;
        let q = 0.5 * 2.0 - 0.25 * 4.0 + 0.1;
        let batch = Batch {
            inputs: vec![Array2::from_shape_vec((1, 2), x.to_vec()).unwrap()],
            actions: vec![0],
            targets: vec![y],
        };
        let (g, loss) = net.backward(&batch).unwrap();
        assert!((loss - (q - y) * (q - y)).abs() < 1e-15);
        let t = g.tensors();
        assert!((t[0][0] - 2.0 * (q - y) * x[0]).abs() < 1e-12);
        assert!((t[0][1] - 2.0 * (q - y) * x[1]).abs() < 1e-12);
        assert!((t[1][0] - 2.0 * (q - y)).abs() < 1e-12);
    }

    #[test]
    fn zero_error_gives_zero_gradient() {
        let spec = NetworkSpec {
            hidden_init: WeightInit::Glorot,
            input_dim: 3,
            hidden: vec![5],
            lstm_units: Some(4),
            output_dim: 2,
        };
        let net = QNetwork::new(&spec, &mut rng(5)).unwrap();
        let inputs: Vec<_> = (0..3)
            .map(|t| Array2::from_shape_fn((2, 3), |(i, j)| (i + j + t) as f64 * 0.1))
            .collect();
        let q = net.forward_batch(&inputs).unwrap();
        let batch = Batch {
            inputs,
            actions: vec![0, 1],
            targets: vec![q[[0, 0]], q[[1, 1]]],
        };
        let (g, loss) = net.backward(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(21);
        let spec = NetworkSpec {
            hidden_init: WeightInit::Glorot,
            input_dim: 5,
            hidden: vec![7, 6],
            lstm_units: Some(4),
            output_dim: 3,
        };
        let net = QNetwork::new(&spec, &mut r).unwrap();
        let batch = random_batch(&mut r, 4, 3, 5, 3);
        let report = gradient_check(&net, &batch, 1e-5).unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{report:?}");
        assert!(report.lstm_max_rel_error.is_some());
    }

    #[test]
    fn quadratic_descent_converges() {
        // minimise (w·1 − 3)² with a one-weight linear net
        let mut net = QNetwork::from_layers(vec![Layer::Dense(DenseLayer::zeros(1, 1, Activation::Linear))]).unwrap();
        let batch = Batch {
            inputs: vec![Array2::from_elem((1, 1), 1.0)],
            actions: vec![0],
            targets: vec![3.0],
        };
        let cfg = SgdConfig {
            learning_rate: 0.1,
            clip_norm: None,
        };
        for _ in 0..500 {
            let (g, _) = net.backward(&batch).unwrap();
            net.sgd_step(&g, &cfg).unwrap();
        }
        let q = net.forward(&[1.0]).unwrap()[0];
        assert!((q - 3.0).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_step() {
        let mut net = QNetwork::from_layers(vec![Layer::Dense(DenseLayer::zeros(1, 1, Activation::Linear))]).unwrap();
        let g = Gradients {
            layers: vec![LayerGrad::Dense {
                weights: Array2::from_elem((1, 1), 30.0),
                biases: Array1::from_elem(1, 40.0),
            }],
        };
        let cfg = SgdConfig {
            learning_rate: 1.0,
            clip_norm: Some(5.0),
        };
        let norm = net.sgd_step(&g, &cfg).unwrap();
        assert_eq!(norm, 50.0);
        let t = net.tensors();
        assert!((t[0][0] + 3.0).abs() < 1e-12 && (t[1][0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let spec = NetworkSpec {
            hidden_init: WeightInit::Glorot,
            input_dim: 6,
            hidden: vec![8],
            lstm_units: Some(3),
            output_dim: 4,
        };
        let net = QNetwork::new(&spec, &mut rng(2)).unwrap();
        let bytes = serialize(&net);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back.tensors(), net.tensors());
        assert!(deserialize(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(deserialize(&flipped).is_err());
    }

    #[test]
    fn clone_is_deep() {
        let spec = NetworkSpec {
            hidden_init: WeightInit::Glorot,
            input_dim: 2,
            hidden: vec![3],
            lstm_units: None,
            output_dim: 2,
        };
        let mut policy = QNetwork::new(&spec, &mut rng(4)).unwrap();
        let target = policy.clone();
        policy.tensors_mut()[0][0] += 1.0;
        assert_ne!(policy.tensors()[0][0], target.tensors()[0][0]);
    }
}
