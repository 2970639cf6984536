//! Stacked LSTM over concatenated one-hot note and duration inputs, with one
//! softmax head for the next note and another for the next duration.
//!
//! Each cell computes, for `v = [h_prev, x]`:
//!
//! ```text
//! f  = σ(W_f·v + b_f)          forget gate, scales the old cell state
//! i  = σ(W_i·v + b_i)          input gate
//! c̃  = tanh(W_c·v + b_c)       candidate values
//! c  = f ⊙ c_prev + i ⊙ c̃
//! o  = σ(W_o·v + b_o)          output gate
//! h  = o ⊙ tanh(c)
//! ```
//!
//! The backward pass is written out by hand and unrolled over the whole
//! window (BPTT). [`grad_check`] compares it against central differences.

use std::fmt;

use thiserror::Error;

use crate::numerics::{self, matmul, sigmoid_scalar, softmax_in_place, xavier_init, Matrix, Rng, CE_FLOOR};

pub const DEFAULT_HIDDEN: [usize; 3] = [512, 512, 512];
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {index} out of range for vocabulary of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

impl From<numerics::NumericsError> for ModelError {
    fn from(e: numerics::NumericsError) -> Self {
        match e {
            numerics::NumericsError::ShapeMismatch(s) => ModelError::ShapeMismatch(s),
            numerics::NumericsError::IndexOutOfRange { index, size } => ModelError::IndexOutOfRange { index, size },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub note_vocab_size: usize,
    pub dur_vocab_size: usize,
    /// Hidden width of each stacked layer, bottom first.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub window_len: usize,
}

impl ModelConfig {
    pub fn new(note_vocab_size: usize, dur_vocab_size: usize) -> Self {
        ModelConfig {
            note_vocab_size,
            dur_vocab_size,
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: DEFAULT_DROPOUT,
            window_len: crate::corpus::DEFAULT_WINDOW_LEN,
        }
    }

    /// Two layers of 16, vocabularies of 12 and 6, windows of 8.
    pub fn small_reference() -> Self {
        ModelConfig { note_vocab_size: 12, dur_vocab_size: 6, hidden: vec![16, 16], dropout: 0.0, window_len: 8 }
    }

    pub fn input_size(&self) -> usize {
        self.note_vocab_size + self.dur_vocab_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden.is_empty() {
            return bad("at least one layer is required");
        }
        if self.hidden.contains(&0) || self.note_vocab_size == 0 || self.dur_vocab_size == 0 || self.window_len == 0 {
            return bad("sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Weight over `[h_prev, x]` (hidden rows) and bias for one gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Gate {
    fn zeros(input: usize, hidden: usize) -> Self {
        Gate { weight: Matrix::zeros(hidden, hidden + input), bias: Matrix::zeros(1, hidden) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub forget: Gate,
    pub input: Gate,
    pub candidate: Gate,
    pub output: Gate,
}

impl LstmLayerParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmLayerParams {
            forget: Gate::zeros(input_size, hidden_size),
            input: Gate::zeros(input_size, hidden_size),
            candidate: Gate::zeros(input_size, hidden_size),
            output: Gate::zeros(input_size, hidden_size),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forget.bias.cols()
    }

    pub fn input_size(&self) -> usize {
        self.forget.weight.cols() - self.hidden_size()
    }

    /// Forget, input, candidate, output.
    pub fn gates(&self) -> [&Gate; 4] {
        [&self.forget, &self.input, &self.candidate, &self.output]
    }

    fn gates_mut(&mut self) -> [&mut Gate; 4] {
        [&mut self.forget, &mut self.input, &mut self.candidate, &mut self.output]
    }

    fn check(&self) -> Result<(), ModelError> {
        let (h, cols) = (self.hidden_size(), self.forget.weight.cols());
        for g in self.gates() {
            if g.weight.shape() != (h, cols) || g.bias.shape() != (1, h) {
                return Err(ModelError::ShapeMismatch("gate shapes differ within a layer".into()));
            }
        }
        Ok(())
    }
}

/// Fully connected output layer, `logits = h · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Every trainable matrix of the model. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<LstmLayerParams>,
    pub head_note: Dense,
    pub head_dur: Dense,
}

pub type Gradients = Weights;

const GATE_NAMES: [&str; 4] = ["forget", "input", "candidate", "output"];

impl Weights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut input = config.input_size();
        for &h in &config.hidden {
            layers.push(LstmLayerParams::zeros(input, h));
            input = h;
        }
        let top = input;
        Weights {
            layers,
            head_note: Dense { weight: Matrix::zeros(top, config.note_vocab_size), bias: Matrix::zeros(1, config.note_vocab_size) },
            head_dur: Dense { weight: Matrix::zeros(top, config.dur_vocab_size), bias: Matrix::zeros(1, config.dur_vocab_size) },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|m| m.fill(0.0));
        z
    }

    /// Matrices in their fixed storage order: per layer the four gates'
    /// weight then bias, then the note head, then the duration head.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for g in layer.gates() {
                out.push(&g.weight);
                out.push(&g.bias);
            }
        }
        out.extend([&self.head_note.weight, &self.head_note.bias, &self.head_dur.weight, &self.head_dur.bias]);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for g in layer.gates_mut() {
                out.push(&mut g.weight);
                out.push(&mut g.bias);
            }
        }
        out.push(&mut self.head_note.weight);
        out.push(&mut self.head_note.bias);
        out.push(&mut self.head_dur.weight);
        out.push(&mut self.head_dur.bias);
        out
    }

    /// Names matching [`Weights::matrices`], e.g. `layer1.output.weight`.
    pub fn matrix_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            for g in GATE_NAMES {
                out.push(format!("layer{l}.{g}.weight"));
                out.push(format!("layer{l}.{g}.bias"));
            }
        }
        for head in ["head_note", "head_dur"] {
            out.push(format!("{head}.weight"));
            out.push(format!("{head}.bias"));
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Matrix)) {
        for m in self.matrices_mut() {
            f(m);
        }
    }

    pub fn add_assign(&mut self, other: &Weights) -> Result<(), ModelError> {
        let theirs = other.matrices();
        let mine = self.matrices_mut();
        if mine.len() != theirs.len() {
            return Err(ModelError::ShapeMismatch("different layer counts".into()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|m| m.scale(factor));
    }

    pub fn global_norm(&self) -> f64 {
        self.matrices().iter().map(|m| m.sum_of_squares()).sum::<f64>().sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    /// Scales everything down so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Model configuration plus weights.
///
/// Every mutable borrow of the weights advances a generation counter, so a
/// forward cache taken before an update is rejected by [`model_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    weights: Weights,
    generation: u64,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases except the forget gates at 1.0.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut weights = Weights::zeros(config);
        for layer in &mut weights.layers {
            for g in layer.gates_mut() {
                let (r, c) = g.weight.shape();
                g.weight = xavier_init(r, c, rng);
            }
            layer.forget.bias.fill(FORGET_BIAS_INIT);
        }
        for head in [&mut weights.head_note, &mut weights.head_dur] {
            let (r, c) = head.weight.shape();
            head.weight = xavier_init(r, c, rng);
        }
        Ok(ModelParams { config: config.clone(), weights, generation: 0 })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Weights::zeros(&config);
        let shapes_match = expected.matrices().len() == weights.matrices().len()
            && expected.matrices().iter().zip(weights.matrices()).all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(ModelError::ShapeMismatch("weights do not fit the config".into()));
        }
        for layer in &weights.layers {
            layer.check()?;
        }
        Ok(ModelParams { config, weights, generation: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        self.generation += 1;
        &mut self.weights
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Sets the dropout rate used by later train-mode passes.
    pub fn set_dropout(&mut self, rate: f64) -> Result<(), ModelError> {
        let mut c = self.config.clone();
        c.dropout = rate;
        c.validate()?;
        self.config = c;
        Ok(())
    }
}

/// Hidden and cell state of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Matrix>,
    pub c: Vec<Matrix>,
}

impl LstmState {
    pub fn zeros(config: &ModelConfig) -> Self {
        LstmState {
            h: config.hidden.iter().map(|&n| Matrix::zeros(1, n)).collect(),
            c: config.hidden.iter().map(|&n| Matrix::zeros(1, n)).collect(),
        }
    }
}

/// Intermediates of one cell step needed by its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    /// `[h_prev, x]`.
    concat: Vec<f64>,
    /// Nonzero positions of `x` when it is sparse enough to exploit.
    x_nonzero: Option<Vec<usize>>,
    /// Gate activations, forget/input/candidate/output.
    acts: [Vec<f64>; 4],
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl CellCache {
    pub fn forget(&self) -> &[f64] {
        &self.acts[0]
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[1]
    }

    pub fn candidate(&self) -> &[f64] {
        &self.acts[2]
    }

    pub fn output(&self) -> &[f64] {
        &self.acts[3]
    }
}

fn sparse_positions(x: &[f64]) -> Option<Vec<usize>> {
    let nz: Vec<usize> = x.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    (nz.len() * 4 <= x.len()).then_some(nz)
}

/// `out[r] = bias[r] + Σ_j weight[r, j] · concat[j]`, summing over ascending `j`.
fn gate_preactivation(gate: &Gate, concat: &[f64], hidden: usize, x_nonzero: Option<&[usize]>, out: &mut [f64]) {
    let cols = gate.weight.cols();
    let w = gate.weight.as_slice();
    let b = gate.bias.as_slice();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wj, vj) in row[..hidden].iter().zip(&concat[..hidden]) {
            acc += wj * vj;
        }
        match x_nonzero {
            Some(nz) => {
                for &j in nz {
                    acc += row[hidden + j] * concat[hidden + j];
                }
            }
            None => {
                for (wj, vj) in row[hidden..].iter().zip(&concat[hidden..]) {
                    acc += wj * vj;
                }
            }
        }
        *o = acc;
    }
}

fn cell_step(p: &LstmLayerParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, CellCache) {
    let hidden = p.hidden_size();
    let mut concat = Vec::with_capacity(hidden + x.len());
    concat.extend_from_slice(h_prev);
    concat.extend_from_slice(x);
    let x_nonzero = sparse_positions(x);

    let mut acts: [Vec<f64>; 4] = Default::default();
    for (k, gate) in p.gates().into_iter().enumerate() {
        let mut z = vec![0.0; hidden];
        gate_preactivation(gate, &concat, hidden, x_nonzero.as_deref(), &mut z);
        if k == 2 {
            z.iter_mut().for_each(|v| *v = v.tanh());
        } else {
            z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        }
        acts[k] = z;
    }
    let [f, i, g, o] = &acts;
    let mut c = vec![0.0; hidden];
    let mut tanh_c = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    for r in 0..hidden {
        c[r] = f[r] * c_prev[r] + i[r] * g[r];
        tanh_c[r] = c[r].tanh();
        h[r] = o[r] * tanh_c[r];
    }
    debug_assert!(c.iter().chain(&h).all(|v| v.is_finite()), "non-finite LSTM state");
    let cache = CellCache { concat, x_nonzero, acts, c_prev: c_prev.to_vec(), tanh_c };
    (h, c, cache)
}

/// Result of one public cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub h: Matrix,
    pub c: Matrix,
    pub cache: CellCache,
}

/// One LSTM step on `1 x n` row vectors.
pub fn cell_forward(x: &Matrix, h_prev: &Matrix, c_prev: &Matrix, params: &LstmLayerParams) -> Result<CellOutput, ModelError> {
    params.check()?;
    let (hidden, input) = (params.hidden_size(), params.input_size());
    if x.shape() != (1, input) || h_prev.shape() != (1, hidden) || c_prev.shape() != (1, hidden) {
        return Err(ModelError::ShapeMismatch(format!(
            "cell expects x 1x{input} and state 1x{hidden}, got {:?} {:?} {:?}",
            x.shape(),
            h_prev.shape(),
            c_prev.shape()
        )));
    }
    let (h, c, cache) = cell_step(params, x.as_slice(), h_prev.as_slice(), c_prev.as_slice());
    Ok(CellOutput { h: Matrix::row_vector(h), c: Matrix::row_vector(c), cache })
}

/// Gradients flowing out of one cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrads {
    pub dh_prev: Vec<f64>,
    pub dc_prev: Vec<f64>,
    /// Present only when requested.
    pub dx: Option<Vec<f64>>,
}

/// Backward through one step given `dL/dh` and `dL/dc` arriving from later
/// steps and layers above. Parameter gradients are added into `grads`.
pub fn cell_backward(
    params: &LstmLayerParams,
    cache: &CellCache,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut LstmLayerParams,
    want_dx: bool,
) -> CellGrads {
    let hidden = params.hidden_size();
    let width = cache.concat.len();
    let [f, i, g, o] = &cache.acts;

    // Pre-activation gradients in gate order.
    let mut dz: [Vec<f64>; 4] = [vec![0.0; hidden], vec![0.0; hidden], vec![0.0; hidden], vec![0.0; hidden]];
    let mut dc_prev = vec![0.0; hidden];
    for r in 0..hidden {
        let tc = cache.tanh_c[r];
        let dc = dc_next[r] + dh[r] * o[r] * (1.0 - tc * tc);
        dz[0][r] = dc * cache.c_prev[r] * f[r] * (1.0 - f[r]);
        dz[1][r] = dc * g[r] * i[r] * (1.0 - i[r]);
        dz[2][r] = dc * i[r] * (1.0 - g[r] * g[r]);
        dz[3][r] = dh[r] * tc * o[r] * (1.0 - o[r]);
        dc_prev[r] = dc * f[r];
    }

    let dv_len = if want_dx { width } else { hidden };
    let mut dv = vec![0.0; dv_len];
    let nz = cache.x_nonzero.as_deref();
    for (k, (gate, ggrad)) in params.gates().into_iter().zip(grads.gates_mut()).enumerate() {
        let w = gate.weight.as_slice();
        let gw = ggrad.weight.as_mut_slice();
        let gb = ggrad.bias.as_mut_slice();
        for r in 0..hidden {
            let d = dz[k][r];
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            let row = &w[r * width..(r + 1) * width];
            let grow = &mut gw[r * width..(r + 1) * width];
            for (g, v) in grow[..hidden].iter_mut().zip(&cache.concat[..hidden]) {
                *g += d * v;
            }
            match nz {
                Some(nz) => {
                    for &j in nz {
                        grow[hidden + j] += d * cache.concat[hidden + j];
                    }
                }
                None => {
                    for (g, v) in grow[hidden..].iter_mut().zip(&cache.concat[hidden..]) {
                        *g += d * v;
                    }
                }
            }
            for (dvj, wj) in dv.iter_mut().zip(row) {
                *dvj += d * wj;
            }
        }
    }
    let dx = want_dx.then(|| dv.split_off(hidden));
    dv.truncate(hidden);
    CellGrads { dh_prev: dv, dc_prev, dx }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, caches kept for backward.
    Train,
    /// Deterministic, no caches.
    Infer,
}

/// Everything the backward pass needs from one train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    generation: u64,
    /// `[layer][step]`.
    cells: Vec<Vec<CellCache>>,
    /// Inverted-dropout masks on the output of every layer but the top,
    /// `[layer][step]`; `None` when dropout is off.
    masks: Vec<Vec<Option<Vec<f64>>>>,
    top_h: Vec<f64>,
    note_probs: Vec<f64>,
    dur_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub note_logits: Matrix,
    pub dur_logits: Matrix,
    pub note_probs: Matrix,
    pub dur_probs: Matrix,
    pub cache: Option<ForwardCache>,
}

impl ForwardOutput {
    /// `CE_note + CE_dur` for the given targets.
    pub fn loss(&self, note_target: usize, dur_target: usize) -> Result<f64, ModelError> {
        Ok(numerics::cross_entropy(&self.note_probs, note_target)? + numerics::cross_entropy(&self.dur_probs, dur_target)?)
    }
}

fn head_logits(head: &Dense, h: &[f64]) -> Result<Matrix, ModelError> {
    let mut logits = matmul(&Matrix::row_vector(h.to_vec()), &head.weight)?;
    logits.add_assign(&head.bias)?;
    Ok(logits)
}

/// Runs a window through the stack from a zero state and applies both heads
/// to the final step's top hidden state.
///
/// In train mode, inverted dropout (keep with probability `1 - p`, scale by
/// `1 / (1 - p)`) is applied to each layer's output before it feeds the layer
/// above; masks are drawn from `rng` step by step, bottom layer first.
pub fn model_forward(
    params: &ModelParams,
    notes: &[usize],
    durations: &[usize],
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardOutput, ModelError> {
    let config = &params.config;
    if notes.len() != config.window_len || durations.len() != config.window_len {
        return Err(ModelError::ShapeMismatch(format!(
            "window of {}/{} tokens, model expects {}",
            notes.len(),
            durations.len(),
            config.window_len
        )));
    }
    for (&id, size) in notes.iter().map(|n| (n, config.note_vocab_size)).chain(durations.iter().map(|d| (d, config.dur_vocab_size))) {
        if id >= size {
            return Err(ModelError::IndexOutOfRange { index: id, size });
        }
    }
    let layers = &params.weights.layers;
    let n_layers = layers.len();
    let train = mode == Mode::Train;
    let dropout = if train { config.dropout } else { 0.0 };
    let keep_scale = 1.0 / (1.0 - dropout);

    let mut h: Vec<Vec<f64>> = config.hidden.iter().map(|&n| vec![0.0; n]).collect();
    let mut c = h.clone();
    let mut cells: Vec<Vec<CellCache>> = (0..n_layers).map(|_| Vec::with_capacity(notes.len())).collect();
    let mut masks: Vec<Vec<Option<Vec<f64>>>> = (0..n_layers.saturating_sub(1)).map(|_| Vec::new()).collect();
    let mut x0 = vec![0.0; config.input_size()];

    for (&note, &dur) in notes.iter().zip(durations) {
        x0.fill(0.0);
        x0[note] = 1.0;
        x0[config.note_vocab_size + dur] = 1.0;
        let mut x = x0.clone();
        for (l, layer) in layers.iter().enumerate() {
            let (nh, nc, cache) = cell_step(layer, &x, &h[l], &c[l]);
            h[l] = nh;
            c[l] = nc;
            if train {
                cells[l].push(cache);
            }
            if l + 1 < n_layers {
                x = h[l].clone();
                let mask = (dropout > 0.0).then(|| {
                    (0..x.len()).map(|_| if rng.next_f64() < dropout { 0.0 } else { keep_scale }).collect::<Vec<f64>>()
                });
                if let Some(m) = &mask {
                    x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
                if train {
                    masks[l].push(mask);
                }
            }
        }
    }

    let top = &h[n_layers - 1];
    let note_logits = head_logits(&params.weights.head_note, top)?;
    let dur_logits = head_logits(&params.weights.head_dur, top)?;
    let mut note_probs = note_logits.clone();
    softmax_in_place(note_probs.as_mut_slice());
    let mut dur_probs = dur_logits.clone();
    softmax_in_place(dur_probs.as_mut_slice());

    let cache = train.then(|| ForwardCache {
        generation: params.generation,
        cells,
        masks,
        top_h: top.clone(),
        note_probs: note_probs.as_slice().to_vec(),
        dur_probs: dur_probs.as_slice().to_vec(),
    });
    Ok(ForwardOutput { note_logits, dur_logits, note_probs, dur_probs, cache })
}

fn head_backward(head: &Dense, grad: &mut Dense, h: &[f64], dlogits: &[f64], dh: &mut [f64]) {
    let out = dlogits.len();
    let w = head.weight.as_slice();
    let gw = grad.weight.as_mut_slice();
    for (k, d) in dlogits.iter().enumerate() {
        grad.bias.as_mut_slice()[k] += d;
    }
    for (r, (&hr, dhr)) in h.iter().zip(dh.iter_mut()).enumerate() {
        let row = &w[r * out..(r + 1) * out];
        let grow = &mut gw[r * out..(r + 1) * out];
        let mut acc = 0.0;
        for k in 0..out {
            grow[k] += hr * dlogits[k];
            acc += row[k] * dlogits[k];
        }
        *dhr += acc;
    }
}

/// Adds the gradient of `CE_note + CE_dur` for one window into `grads` by
/// backpropagating through every step and layer. Returns the loss.
pub fn model_backward_into(
    params: &ModelParams,
    cache: &ForwardCache,
    note_target: usize,
    dur_target: usize,
    grads: &mut Gradients,
) -> Result<f64, ModelError> {
    if cache.generation != params.generation || cache.cells.len() != params.weights.layers.len() {
        return Err(ModelError::StaleCache);
    }
    let (nv, dv) = (cache.note_probs.len(), cache.dur_probs.len());
    if note_target >= nv {
        return Err(ModelError::IndexOutOfRange { index: note_target, size: nv });
    }
    if dur_target >= dv {
        return Err(ModelError::IndexOutOfRange { index: dur_target, size: dv });
    }
    let loss = -(cache.note_probs[note_target] + CE_FLOOR).ln() - (cache.dur_probs[dur_target] + CE_FLOOR).ln();

    let mut d_note = cache.note_probs.clone();
    d_note[note_target] -= 1.0;
    let mut d_dur = cache.dur_probs.clone();
    d_dur[dur_target] -= 1.0;

    let layers = &params.weights.layers;
    let n_layers = layers.len();
    let steps = cache.cells[0].len();
    let mut dh_top = vec![0.0; layers[n_layers - 1].hidden_size()];
    head_backward(&params.weights.head_note, &mut grads.head_note, &cache.top_h, &d_note, &mut dh_top);
    head_backward(&params.weights.head_dur, &mut grads.head_dur, &cache.top_h, &d_dur, &mut dh_top);

    // Gradient arriving at each step's h from above (the head, or the next layer up).
    let mut from_above: Vec<Option<Vec<f64>>> = vec![None; steps];
    from_above[steps - 1] = Some(dh_top);

    for l in (0..n_layers).rev() {
        let layer = &layers[l];
        let hidden = layer.hidden_size();
        let want_dx = l > 0;
        let mut below: Vec<Option<Vec<f64>>> = vec![None; if want_dx { steps } else { 0 }];
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        for t in (0..steps).rev() {
            if let Some(ext) = &from_above[t] {
                dh_next.iter_mut().zip(ext).for_each(|(a, b)| *a += b);
            }
            let g = cell_backward(layer, &cache.cells[l][t], &dh_next, &dc_next, &mut grads.layers[l], want_dx);
            dh_next = g.dh_prev;
            dc_next = g.dc_prev;
            if let Some(mut dx) = g.dx {
                if let Some(mask) = &cache.masks[l - 1][t] {
                    dx.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
                }
                below[t] = Some(dx);
            }
        }
        from_above = below;
    }
    Ok(loss)
}

/// Gradients of one window's loss, freshly allocated.
pub fn model_backward(params: &ModelParams, cache: &ForwardCache, note_target: usize, dur_target: usize) -> Result<Gradients, ModelError> {
    let mut grads = params.weights.zeros_like();
    model_backward_into(params, cache, note_target, dur_target, &mut grads)?;
    Ok(grads)
}

/// Step size for the central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so tiny gradients are judged absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter with the largest error, e.g. `layer0.forget.weight[3,7]`.
    pub worst_parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} parameters checked, max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}), tolerance {:.1e}: {}",
            self.checked,
            self.max_rel_err,
            self.worst_parameter,
            self.analytic,
            self.numeric,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares BPTT gradients with central differences for every parameter of a
/// freshly initialized model on a random window. Dropout is disabled.
///
/// The initialization, window and targets are all drawn from `rng`.
pub fn grad_check(config: &ModelConfig, rng: &mut Rng, tolerance: f64) -> Result<GradCheckReport, ModelError> {
    let mut config = config.clone();
    config.dropout = 0.0;
    let mut params = ModelParams::init(&config, rng)?;
    let notes: Vec<usize> = (0..config.window_len).map(|_| rng.below(config.note_vocab_size as u64) as usize).collect();
    let durs: Vec<usize> = (0..config.window_len).map(|_| rng.below(config.dur_vocab_size as u64) as usize).collect();
    let note_target = rng.below(config.note_vocab_size as u64) as usize;
    let dur_target = rng.below(config.dur_vocab_size as u64) as usize;

    let mut scratch = Rng::new(0);
    let out = model_forward(&params, &notes, &durs, Mode::Train, &mut scratch)?;
    let analytic = model_backward(&params, out.cache.as_ref().expect("train mode keeps caches"), note_target, dur_target)?;
    let analytic: Vec<Vec<f64>> = analytic.matrices().iter().map(|m| m.as_slice().to_vec()).collect();
    let names = params.weights.matrix_names();
    let cols: Vec<usize> = params.weights.matrices().iter().map(|m| m.cols()).collect();

    // Each head's loss is differenced on its own; summing first would add
    // the rounding error of a larger total to every difference.
    let mut loss_at = |params: &ModelParams| -> Result<(f64, f64), ModelError> {
        let out = model_forward(params, &notes, &durs, Mode::Infer, &mut scratch)?;
        Ok((
            numerics::cross_entropy(&out.note_probs, note_target)?,
            numerics::cross_entropy(&out.dur_probs, dur_target)?,
        ))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_parameter: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance,
        passed: false,
    };
    for (mi, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let original = params.weights.matrices()[mi].as_slice()[k];
            params.weights_mut().matrices_mut()[mi].as_mut_slice()[k] = original + GRAD_CHECK_STEP;
            let plus = loss_at(&params)?;
            params.weights_mut().matrices_mut()[mi].as_mut_slice()[k] = original - GRAD_CHECK_STEP;
            let minus = loss_at(&params)?;
            params.weights_mut().matrices_mut()[mi].as_mut_slice()[k] = original;
            let numeric = ((plus.0 - minus.0) + (plus.1 - minus.1)) / (2.0 * GRAD_CHECK_STEP);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_parameter.is_empty() {
                report.max_rel_err = err;
                report.worst_parameter = format!("{}[{},{}]", names[mi], k / cols[mi], k % cols[mi]);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}
