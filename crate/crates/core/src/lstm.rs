//! Single-layer many-to-one LSTM with a linear classification head.
//!
//! Gate blocks are stacked in the order input, forget, cell candidate,
//! output. A batch of `B` sequences of length `T` is processed together;
//! rows of the time-stacked buffers are indexed `t * B + b`.

use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::bytes::{put_f64, put_u32, Cursor};

/// Number of output classes.
pub const N_CLASSES: usize = 3;

/// Hidden width used for every reported experiment.
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum LstmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("label {0} is not a class index")]
    InvalidLabel(usize),
    #[error("cache does not belong to this forward pass: {0}")]
    CacheMismatch(String),
    #[error("training split is empty")]
    EmptySplit,
    #[error("loss became non-finite in epoch {epoch}, batch {batch} (last finite epoch loss {last_loss:?})")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        last_loss: Option<f64>,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Recurrent-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[4H × F]`
    pub w_input: Array2<f64>,
    /// `[4H × H]`
    pub w_hidden: Array2<f64>,
    /// `[4H]`
    pub bias: Array1<f64>,
}

/// Linear head applied to the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `[3 × H]`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub lstm: LstmParams,
    pub head: ClassifierParams,
}

/// Parameter gradients share the parameter layout.
pub type Gradients = Network;

impl Network {
    pub fn zeros(n_features: usize, hidden: usize) -> Self {
        Network {
            lstm: LstmParams {
                w_input: Array2::zeros((4 * hidden, n_features)),
                w_hidden: Array2::zeros((4 * hidden, hidden)),
                bias: Array1::zeros(4 * hidden),
            },
            head: ClassifierParams {
                weights: Array2::zeros((N_CLASSES, hidden)),
                bias: Array1::zeros(N_CLASSES),
            },
        }
    }

    /// Weights uniform in ±1/√H, biases zero except the forget gate at 1.
    pub fn init<R: Rng>(n_features: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut net = Network::zeros(n_features, hidden);
        for w in net
            .lstm
            .w_input
            .iter_mut()
            .chain(net.lstm.w_hidden.iter_mut())
            .chain(net.head.weights.iter_mut())
        {
            *w = rng.random_range(-bound..bound);
        }
        net.lstm.bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        net
    }

    pub fn hidden(&self) -> usize {
        self.lstm.w_hidden.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.lstm.w_input.ncols()
    }

    pub fn shape_matches(&self, other: &Network) -> bool {
        self.lstm.w_input.dim() == other.lstm.w_input.dim()
            && self.lstm.w_hidden.dim() == other.lstm.w_hidden.dim()
            && self.lstm.bias.dim() == other.lstm.bias.dim()
            && self.head.weights.dim() == other.head.weights.dim()
            && self.head.bias.dim() == other.head.bias.dim()
    }

    /// Every tensor as a flat slice, in checkpoint order.
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.lstm.w_input.as_slice().unwrap(),
            self.lstm.w_hidden.as_slice().unwrap(),
            self.lstm.bias.as_slice().unwrap(),
            self.head.weights.as_slice().unwrap(),
            self.head.bias.as_slice().unwrap(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.lstm.w_input.as_slice_mut().unwrap(),
            self.lstm.w_hidden.as_slice_mut().unwrap(),
            self.lstm.bias.as_slice_mut().unwrap(),
            self.head.weights.as_slice_mut().unwrap(),
            self.head.bias.as_slice_mut().unwrap(),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub steps: usize,
    /// `[T·B × F]`
    inputs: Array2<f64>,
    /// Activated gates `[T·B × 4H]` (i, f, g, o).
    gates: Array2<f64>,
    /// Cell states `[T·B × H]`.
    cells: Array2<f64>,
    /// `tanh(c_t)` `[T·B × H]`.
    cells_tanh: Array2<f64>,
    /// `h_{t-1}` for each step `[T·B × H]`.
    hidden_prev: Array2<f64>,
    /// Final hidden state `[B × H]`.
    pub last_hidden: Array2<f64>,
}

/// Stacks `[T × F]` instances into the time-major `[T·B × F]` layout.
fn stack_inputs(net: &Network, batch: &[ArrayView2<f64>]) -> Result<Array2<f64>, LstmError> {
    let first = batch
        .first()
        .ok_or_else(|| LstmError::ShapeMismatch("empty batch".into()))?;
    let (steps, features) = first.dim();
    if steps == 0 {
        return Err(LstmError::ShapeMismatch("sequence of length 0".into()));
    }
    if features != net.n_features() {
        return Err(LstmError::ShapeMismatch(format!(
            "instance has {features} features, network expects {}",
            net.n_features()
        )));
    }
    let b_count = batch.len();
    let mut stacked = Array2::<f64>::zeros((steps * b_count, features));
    for (b, inst) in batch.iter().enumerate() {
        if inst.dim() != (steps, features) {
            return Err(LstmError::ShapeMismatch(format!(
                "instance {b} is {:?}, batch is {:?}",
                inst.dim(),
                (steps, features)
            )));
        }
        for t in 0..steps {
            let row = inst.row(t);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LstmError::NonFiniteInput);
            }
            stacked.row_mut(t * b_count + b).assign(&row);
        }
    }
    Ok(stacked)
}

/// Runs the recurrence over a batch; returns logits `[B × 3]`.
pub fn forward_batch(
    net: &Network,
    batch: &[ArrayView2<f64>],
) -> Result<(Array2<f64>, ForwardCache), LstmError> {
    let inputs = stack_inputs(net, batch)?;
    let b_count = batch.len();
    let steps = inputs.nrows() / b_count;
    let h = net.hidden();

    // input projections for every step at once, plus bias
    let mut gates = Array2::<f64>::zeros((steps * b_count, 4 * h));
    general_mat_mul(1.0, &inputs, &net.lstm.w_input.t(), 0.0, &mut gates);
    gates += &net.lstm.bias;

    let mut cells = Array2::<f64>::zeros((steps * b_count, h));
    let mut cells_tanh = Array2::<f64>::zeros((steps * b_count, h));
    let mut hidden_prev = Array2::<f64>::zeros((steps * b_count, h));
    let mut hidden = Array2::<f64>::zeros((b_count, h));
    let mut cell_prev = Array2::<f64>::zeros((b_count, h));

    for t in 0..steps {
        let rows = t * b_count..(t + 1) * b_count;
        hidden_prev.slice_mut(s![rows.clone(), ..]).assign(&hidden);
        let mut z = gates.slice_mut(s![rows.clone(), ..]);
        general_mat_mul(1.0, &hidden, &net.lstm.w_hidden.t(), 1.0, &mut z);

        let mut c_block = cells.slice_mut(s![rows.clone(), ..]);
        let mut tc_block = cells_tanh.slice_mut(s![rows.clone(), ..]);
        for b in 0..b_count {
            let mut zr = z.row_mut(b);
            let zr = zr.as_slice_mut().unwrap();
            let (zi, rest) = zr.split_at_mut(h);
            let (zf, rest) = rest.split_at_mut(h);
            let (zg, zo) = rest.split_at_mut(h);
            let cp = cell_prev.row(b);
            let mut cr = c_block.row_mut(b);
            let mut tcr = tc_block.row_mut(b);
            let mut hr = hidden.row_mut(b);
            for k in 0..h {
                let i = sigmoid(zi[k]);
                let f = sigmoid(zf[k]);
                let g = zg[k].tanh();
                let o = sigmoid(zo[k]);
                zi[k] = i;
                zf[k] = f;
                zg[k] = g;
                zo[k] = o;
                let c = f * cp[k] + i * g;
                let tc = c.tanh();
                cr[k] = c;
                tcr[k] = tc;
                hr[k] = o * tc;
            }
        }
        cell_prev.assign(&c_block);
    }

    let mut logits = Array2::<f64>::zeros((b_count, N_CLASSES));
    general_mat_mul(1.0, &hidden, &net.head.weights.t(), 0.0, &mut logits);
    logits += &net.head.bias;

    let cache = ForwardCache {
        batch: b_count,
        steps,
        inputs,
        gates,
        cells,
        cells_tanh,
        hidden_prev,
        last_hidden: hidden,
    };
    Ok((logits, cache))
}

/// Single-instance forward pass.
pub fn forward(net: &Network, instance: ArrayView2<f64>) -> Result<(Array1<f64>, ForwardCache), LstmError> {
    let (logits, cache) = forward_batch(net, &[instance])?;
    Ok((logits.row(0).to_owned(), cache))
}

/// Softmax probabilities of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one logit row against `label`, with its gradient
/// `softmax − one_hot`.
pub fn loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), LstmError> {
    if label >= logits.len() {
        return Err(LstmError::InvalidLabel(label));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_norm = max + sum_exp.ln();
    let value = log_norm - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((value, grad))
}

/// Summed loss over a batch and the per-row logit gradients.
pub fn batch_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>), LstmError> {
    if logits.nrows() != labels.len() {
        return Err(LstmError::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b).to_vec();
        let (l, g) = loss(&row, label)?;
        total += l;
        grad.row_mut(b).assign(&Array1::from(g));
    }
    Ok((total, grad))
}

/// Backpropagation through time. Returns gradients summed over the batch.
pub fn backward(net: &Network, cache: &ForwardCache, d_logits: &Array2<f64>) -> Result<Gradients, LstmError> {
    let h = net.hidden();
    let b_count = cache.batch;
    if d_logits.dim() != (b_count, N_CLASSES) {
        return Err(LstmError::CacheMismatch(format!(
            "upstream gradient {:?} for batch of {b_count}",
            d_logits.dim()
        )));
    }
    if cache.last_hidden.ncols() != h || cache.inputs.ncols() != net.n_features() {
        return Err(LstmError::CacheMismatch("network shape differs from cache".into()));
    }
    let mut grads = Network::zeros(net.n_features(), h);

    general_mat_mul(1.0, &d_logits.t(), &cache.last_hidden, 0.0, &mut grads.head.weights);
    grads.head.bias = d_logits.sum_axis(Axis(0));

    let mut d_hidden = d_logits.dot(&net.head.weights);
    let mut d_cell = Array2::<f64>::zeros((b_count, h));
    let mut d_gates = Array2::<f64>::zeros((cache.steps * b_count, 4 * h));

    for t in (0..cache.steps).rev() {
        let rows = t * b_count..(t + 1) * b_count;
        let gates = cache.gates.slice(s![rows.clone(), ..]);
        let tanh_c = cache.cells_tanh.slice(s![rows.clone(), ..]);
        let mut dz = d_gates.slice_mut(s![rows.clone(), ..]);
        for b in 0..b_count {
            let gr = gates.row(b);
            let gr = gr.as_slice().unwrap();
            let tcr = tanh_c.row(b);
            let dhr = d_hidden.row(b);
            let mut dcr = d_cell.row_mut(b);
            let mut dzr = dz.row_mut(b);
            let dzr = dzr.as_slice_mut().unwrap();
            for k in 0..h {
                let (i, f, g, o) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
                let tc = tcr[k];
                let c_prev = if t > 0 {
                    cache.cells[[(t - 1) * b_count + b, k]]
                } else {
                    0.0
                };
                let dh = dhr[k];
                let d_o = dh * tc;
                let dc = dcr[k] + dh * o * (1.0 - tc * tc);
                dzr[k] = dc * g * i * (1.0 - i);
                dzr[h + k] = dc * c_prev * f * (1.0 - f);
                dzr[2 * h + k] = dc * i * (1.0 - g * g);
                dzr[3 * h + k] = d_o * o * (1.0 - o);
                dcr[k] = dc * f;
            }
        }
        if t > 0 {
            d_hidden = dz.dot(&net.lstm.w_hidden);
        }
    }

    general_mat_mul(1.0, &d_gates.t(), &cache.inputs, 0.0, &mut grads.lstm.w_input);
    general_mat_mul(1.0, &d_gates.t(), &cache.hidden_prev, 0.0, &mut grads.lstm.w_hidden);
    grads.lstm.bias = d_gates.sum_axis(Axis(0));
    Ok(grads)
}

/// Most probable class (ties go to the lowest index) and the class
/// probabilities.
pub fn predict(net: &Network, instance: ArrayView2<f64>) -> Result<(usize, Vec<f64>), LstmError> {
    let (logits, _) = forward(net, instance)?;
    let probs = softmax(logits.as_slice().unwrap());
    Ok((argmax(&probs), probs))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes for many instances, evaluated in chunks.
pub fn predict_many(net: &Network, instances: &[ArrayView2<f64>], chunk: usize) -> Result<Vec<usize>, LstmError> {
    let mut out = Vec::with_capacity(instances.len());
    for part in instances.chunks(chunk.max(1)) {
        let (logits, _) = forward_batch(net, part)?;
        for row in logits.rows() {
            out.push(argmax(row.as_slice().unwrap()));
        }
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: [u8; 8] = *b"UAVTLSTM";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint bytes: magic, version, H, F, the five tensors as
/// little-endian f64 in [`Network::slices`] order, then a CRC-32 of all
/// preceding bytes.
pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, net.hidden() as u32);
    put_u32(&mut out, net.n_features() as u32);
    for tensor in net.slices() {
        for &v in tensor {
            put_f64(&mut out, v);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network, LstmError> {
    let bad = |m: &str| LstmError::Checkpoint(m.to_string());
    if bytes.len() < 24 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let mut c = Cursor::new(&body[8..]);
    let version = c.u32().ok_or_else(|| bad("truncated"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let h = c.u32().ok_or_else(|| bad("truncated"))? as usize;
    let f = c.u32().ok_or_else(|| bad("truncated"))? as usize;
    let mut net = Network::zeros(f, h);
    if c.remaining() != net.n_params() * 8 {
        return Err(bad("tensor data does not match the declared shape"));
    }
    for tensor in net.slices_mut() {
        for v in tensor.iter_mut() {
            *v = c.f64().unwrap();
        }
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<(), LstmError> {
    std::fs::write(path, encode_checkpoint(net)).map_err(|e| LstmError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Network, LstmError> {
    let bytes = std::fs::read(path).map_err(|e| LstmError::Checkpoint(e.to_string()))?;
    decode_checkpoint(&bytes)
}
