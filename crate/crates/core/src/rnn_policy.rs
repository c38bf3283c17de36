//! The two recurrent networks: one emits the price sequence from a supply
//! realization, the other emits each agent's trading rate.
//!
//! Both are five-layer Elman cells: layer one computes the hidden state with
//! a tanh activation and a recurrent term, layers two to four are sigmoid
//! feed-forward, and the output layer is affine (identity activation), so any
//! real output is representable. Weights are shared across agents; each agent
//! carries its own hidden state.

use crate::diffgraph::{sigmoid, Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::market_model::SupplyPath;
use crate::matrix::Matrix;
use rand::Rng;

/// Which network a parameter set belongs to. Stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkTag {
    Control,
    Price,
}

impl NetworkTag {
    fn code(self) -> u8 {
        match self {
            NetworkTag::Control => 0,
            NetworkTag::Price => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(NetworkTag::Control),
            1 => Ok(NetworkTag::Price),
            other => Err(Error::Checkpoint(format!("unknown network tag {other}"))),
        }
    }
}

/// Layer widths for the control network.
pub const CONTROL_DIMS: [usize; 5] = [16, 32, 32, 32, 1];
/// Layer widths for the price network.
pub const PRICE_DIMS: [usize; 5] = [16, 16, 16, 16, 1];
/// Feature count fed to the control cell: (t, X, price).
pub const CONTROL_INPUT_DIM: usize = 3;
/// Feature count fed to the price cell: (Q, t).
pub const PRICE_INPUT_DIM: usize = 2;

const LAYERS: usize = 5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"MFGP";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights and biases of one recurrent network.
///
/// Canonical parameter order (used by the optimizer state, gradient
/// flattening and the checkpoint payload alike):
/// `W1, U, b1, W2, b2, W3, b3, W4, b4, W5, b5`, each row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub tag: NetworkTag,
    pub input_dim: usize,
    /// Neurons per layer; the last layer must have a single output.
    pub dims: Vec<usize>,
    /// `weights[l]` maps layer l's input to its pre-activation.
    pub weights: Vec<Matrix>,
    /// Recurrent weights on the hidden (first) layer.
    pub recurrent: Matrix,
    pub biases: Vec<Matrix>,
}

/// Hidden state of one cell instance; zero-initialized at the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn zeros(dim: usize) -> Self {
        HiddenState(vec![0.0; dim])
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases. Draw order is fixed (W1 row-major,
/// then U, then W2..W5) so a seed pins the parameters exactly.
pub fn init_params<R: Rng + ?Sized>(
    tag: NetworkTag,
    dims: &[usize],
    input_dim: usize,
    rng: &mut R,
) -> RnnParams {
    assert_eq!(dims.len(), LAYERS, "expected {LAYERS} layers, got {}", dims.len());
    assert_eq!(dims[LAYERS - 1], 1, "output layer must have a single neuron");

    let mut uniform = |bound: f64| -> f64 { (rng.random::<f64>() * 2.0 - 1.0) * bound };

    let mut weights = Vec::with_capacity(LAYERS);
    let mut biases = Vec::with_capacity(LAYERS);
    let mut recurrent = Matrix::zeros(dims[0], dims[0]);

    let mut fan_in = input_dim;
    for (l, &fan_out) in dims.iter().enumerate() {
        let bound = glorot_bound(fan_in, fan_out);
        let w = Matrix::from_fn(fan_out, fan_in, |_, _| uniform(bound));
        weights.push(w);
        biases.push(Matrix::zeros(fan_out, 1));
        if l == 0 {
            let ub = glorot_bound(dims[0], dims[0]);
            recurrent = Matrix::from_fn(dims[0], dims[0], |_, _| uniform(ub));
        }
        fan_in = fan_out;
    }

    RnnParams {
        tag,
        input_dim,
        dims: dims.to_vec(),
        weights,
        recurrent,
        biases,
    }
}

/// Fresh control network with the standard widths.
pub fn init_control_params<R: Rng + ?Sized>(rng: &mut R) -> RnnParams {
    init_params(NetworkTag::Control, &CONTROL_DIMS, CONTROL_INPUT_DIM, rng)
}

/// Fresh price network with the standard widths.
pub fn init_price_params<R: Rng + ?Sized>(rng: &mut R) -> RnnParams {
    init_params(NetworkTag::Price, &PRICE_DIMS, PRICE_INPUT_DIM, rng)
}

impl RnnParams {
    fn hidden_dim(&self) -> usize {
        self.dims[0]
    }

    /// Matrices in canonical parameter order.
    fn ordered(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * LAYERS + 1);
        out.push(&self.weights[0]);
        out.push(&self.recurrent);
        out.push(&self.biases[0]);
        for l in 1..LAYERS {
            out.push(&self.weights[l]);
            out.push(&self.biases[l]);
        }
        out
    }

    fn ordered_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::with_capacity(2 * LAYERS + 1);
        let (w0, rest) = self.weights.split_first_mut().expect("five layers");
        let (b0, brest) = self.biases.split_first_mut().expect("five layers");
        out.push(w0);
        out.push(&mut self.recurrent);
        out.push(b0);
        for (w, b) in rest.iter_mut().zip(brest.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Total number of scalar parameters:
    /// sum over layers of (fan_in + 1) * fan_out, plus the recurrence.
    pub fn flat_len(&self) -> usize {
        let mut total = self.hidden_dim() * self.hidden_dim();
        let mut fan_in = self.input_dim;
        for &fan_out in &self.dims {
            total += (fan_in + 1) * fan_out;
            fan_in = fan_out;
        }
        total
    }

    /// Copy all parameters into one flat vector in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for m in self.ordered() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Add `delta` (canonical order) to the parameters in place.
    pub fn add_flat(&mut self, delta: &[f64]) {
        let mut offset = 0;
        for m in self.ordered_mut() {
            let n = m.len();
            for (p, d) in m.as_mut_slice().iter_mut().zip(&delta[offset..offset + n]) {
                *p += d;
            }
            offset += n;
        }
        assert_eq!(offset, delta.len(), "flat update length mismatch");
    }

    /// Clones of the parameter matrices in canonical order.
    pub fn ordered_matrices(&self) -> Vec<Matrix> {
        self.ordered().into_iter().cloned().collect()
    }
}

/// One non-recurrent evaluation of the cell on a single feature vector.
/// Returns the scalar output and the next hidden state.
pub fn cell_step(params: &RnnParams, h: &HiddenState, input: &[f64]) -> (f64, HiddenState) {
    assert_eq!(
        input.len(),
        params.input_dim,
        "cell input has {} features, network expects {}",
        input.len(),
        params.input_dim
    );
    assert_eq!(h.0.len(), params.hidden_dim(), "hidden state dimension mismatch");

    let x = Matrix::col_from(input);
    let hv = Matrix::col_from(&h.0);
    let pre = {
        let mut z = params.weights[0].matmul(&x);
        z.add_scaled(&params.recurrent.matmul(&hv), 1.0);
        z.add_scaled(&params.biases[0], 1.0);
        z
    };
    let h_new = pre.map(f64::tanh);

    let mut a = h_new.clone();
    for l in 1..LAYERS - 1 {
        let mut z = params.weights[l].matmul(&a);
        z.add_scaled(&params.biases[l], 1.0);
        a = z.map(sigmoid);
    }
    let mut out = params.weights[LAYERS - 1].matmul(&a);
    out.add_scaled(&params.biases[LAYERS - 1], 1.0);

    (out.get(0, 0), HiddenState(h_new.as_slice().to_vec()))
}

/// A network's parameters registered as leaves on a tape.
pub struct TapeNet {
    pub weights: Vec<NodeId>,
    pub recurrent: NodeId,
    pub biases: Vec<NodeId>,
    hidden_dim: usize,
    input_dim: usize,
}

impl TapeNet {
    /// Rebuild a net from nodes laid out in canonical parameter order
    /// (`W1, U, b1, W2, b2, ...`), e.g. inside a finite-difference check.
    pub fn from_ordered_ids(ids: &[NodeId], hidden_dim: usize, input_dim: usize) -> Self {
        assert_eq!(ids.len(), 2 * LAYERS + 1, "expected {} nodes", 2 * LAYERS + 1);
        let weights = vec![ids[0], ids[3], ids[5], ids[7], ids[9]];
        let biases = vec![ids[2], ids[4], ids[6], ids[8], ids[10]];
        TapeNet {
            weights,
            recurrent: ids[1],
            biases,
            hidden_dim,
            input_dim,
        }
    }

    /// Register every parameter matrix of `params` on `tape`.
    pub fn register(tape: &mut Tape, params: &RnnParams) -> Self {
        let weights: Vec<NodeId> = params.weights.iter().map(|w| tape.param(w.clone())).collect();
        let recurrent = tape.param(params.recurrent.clone());
        let biases: Vec<NodeId> = params.biases.iter().map(|b| tape.param(b.clone())).collect();
        TapeNet {
            weights,
            recurrent,
            biases,
            hidden_dim: params.hidden_dim(),
            input_dim: params.input_dim,
        }
    }

    /// Gradient of a scalar loss w.r.t. this network, flattened in canonical
    /// parameter order.
    pub fn gradient_flat(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut node_order = Vec::with_capacity(2 * LAYERS + 1);
        node_order.push(self.weights[0]);
        node_order.push(self.recurrent);
        node_order.push(self.biases[0]);
        for l in 1..LAYERS {
            node_order.push(self.weights[l]);
            node_order.push(self.biases[l]);
        }
        let mut out = Vec::new();
        for id in node_order {
            match grads.get(id) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat(0.0).take(tape.value(id).len())),
            }
        }
        out
    }

    /// One cell step over a batch: `input` is (input_dim x B), `hidden` is
    /// (n1 x B). Returns the (1 x B) output and the next hidden state.
    pub fn cell(&self, tape: &mut Tape, hidden: NodeId, input: NodeId) -> (NodeId, NodeId) {
        assert_eq!(
            tape.value(input).rows(),
            self.input_dim,
            "cell input has {} features, network expects {}",
            tape.value(input).rows(),
            self.input_dim
        );
        let wx = tape.matmul(self.weights[0], input);
        let uh = tape.matmul(self.recurrent, hidden);
        let z0 = tape.add(wx, uh);
        let z0b = tape.add_bias(z0, self.biases[0]);
        let h_new = tape.tanh(z0b);

        let mut a = h_new;
        for l in 1..LAYERS - 1 {
            let z = tape.matmul(self.weights[l], a);
            let zb = tape.add_bias(z, self.biases[l]);
            a = tape.sigmoid(zb);
        }
        let z = tape.matmul(self.weights[LAYERS - 1], a);
        let zb = tape.add_bias(z, self.biases[LAYERS - 1]);
        let out = tape.identity(zb);
        (out, h_new)
    }

    /// Zero hidden state for a batch of `batch` columns.
    pub fn zero_hidden(&self, tape: &mut Tape, batch: usize) -> NodeId {
        tape.leaf(Matrix::zeros(self.hidden_dim, batch))
    }
}

/// Unroll the price network over a supply path. At step k the cell sees
/// `(Q[k], t[k]/T)` and emits the price; K+1 outputs in total. The time is
/// fed normalized to [0, 1], which is the identity for a unit horizon.
pub fn unroll_price(tape: &mut Tape, net: &TapeNet, supply: &SupplyPath) -> Vec<NodeId> {
    let horizon = *supply.t.last().expect("non-empty grid");
    let mut hidden = net.zero_hidden(tape, 1);
    let mut outputs = Vec::with_capacity(supply.q.len());
    for (qk, tk) in supply.q.iter().zip(&supply.t) {
        let input = tape.leaf(Matrix::col_from(&[*qk, *tk / horizon]));
        let (out, h) = net.cell(tape, hidden, input);
        hidden = h;
        outputs.push(out);
    }
    outputs
}

/// Step-by-step unroll of the control network over a population. The caller
/// advances the states between steps, so the cell input at step k is
/// `(t[k], X[k], price[k])` under whatever dynamics the caller applies.
pub struct ControlUnroll {
    hidden: NodeId,
    ones_row: NodeId,
    n_agents: usize,
}

impl ControlUnroll {
    pub fn new(tape: &mut Tape, net: &TapeNet, n_agents: usize) -> Self {
        let hidden = net.zero_hidden(tape, n_agents);
        let ones_row = tape.leaf(Matrix::filled(1, n_agents, 1.0));
        ControlUnroll {
            hidden,
            ones_row,
            n_agents,
        }
    }

    /// Emit the (1 x N) controls for step k. `states` is the (1 x N) node of
    /// current agent positions, `price` the (1 x 1) price node for this step.
    pub fn step(&mut self, tape: &mut Tape, net: &TapeNet, t: f64, states: NodeId, price: NodeId) -> NodeId {
        assert_eq!(tape.value(states).cols(), self.n_agents);
        let t_row = tape.leaf(Matrix::filled(1, self.n_agents, t));
        let price_row = tape.matmul(price, self.ones_row);
        let input = tape.concat_rows(&[t_row, states, price_row]);
        let (out, h) = net.cell(tape, self.hidden, input);
        self.hidden = h;
        out
    }
}

/// Serialize parameters to the checkpoint byte format.
///
/// Layout (all integers little-endian): magic `MFGP`, format version u32,
/// network tag u8 (0 control / 1 price), layer count u8, then per layer input
/// dim u32 and output dim u32, then every parameter as a 64-bit little-endian
/// float in canonical order.
pub fn save_params(params: &RnnParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.flat_len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(params.tag.code());
    out.push(params.dims.len() as u8);
    let mut fan_in = params.input_dim;
    for &fan_out in &params.dims {
        out.extend_from_slice(&(fan_in as u32).to_le_bytes());
        out.extend_from_slice(&(fan_out as u32).to_le_bytes());
        fan_in = fan_out;
    }
    for value in params.to_flat() {
        out.extend_from_slice(&value.to_le_bytes());
    }
    out
}

/// Parse a checkpoint produced by [`save_params`]. The round trip is
/// bit-exact. Truncation, trailing bytes, or a malformed header are errors.
pub fn load_params(bytes: &[u8]) -> Result<RnnParams> {
    let fixed_header = 4 + 4 + 1 + 1;
    if bytes.len() < fixed_header {
        return Err(Error::Checkpoint("file shorter than header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let tag = NetworkTag::from_code(bytes[8])?;
    let layer_count = bytes[9] as usize;
    if layer_count != LAYERS {
        return Err(Error::Checkpoint(format!(
            "expected {LAYERS} layers, header declares {layer_count}"
        )));
    }

    let dims_bytes = layer_count * 8;
    if bytes.len() < fixed_header + dims_bytes {
        return Err(Error::Checkpoint("truncated layer table".into()));
    }
    let mut in_dims = Vec::with_capacity(layer_count);
    let mut out_dims = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let base = fixed_header + 8 * l;
        let din = u32::from_le_bytes(bytes[base..base + 4].try_into().unwrap()) as usize;
        let dout = u32::from_le_bytes(bytes[base + 4..base + 8].try_into().unwrap()) as usize;
        in_dims.push(din);
        out_dims.push(dout);
    }
    for l in 1..layer_count {
        if in_dims[l] != out_dims[l - 1] {
            return Err(Error::Checkpoint(format!(
                "layer {} input dim {} does not chain with previous output dim {}",
                l + 1,
                in_dims[l],
                out_dims[l - 1]
            )));
        }
    }
    if out_dims[layer_count - 1] != 1 {
        return Err(Error::Checkpoint("output layer must have a single neuron".into()));
    }

    let n_params: usize = in_dims
        .iter()
        .zip(&out_dims)
        .map(|(&i, &o)| (i + 1) * o)
        .sum::<usize>()
        + out_dims[0] * out_dims[0];
    let expected_len = fixed_header + dims_bytes + 8 * n_params;
    if bytes.len() != expected_len {
        return Err(Error::Checkpoint(format!(
            "file length {} does not match header-declared length {}",
            bytes.len(),
            expected_len
        )));
    }

    let mut cursor = fixed_header + dims_bytes;
    let mut read_matrix = |rows: usize, cols: usize| -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()));
            cursor += 8;
        }
        Matrix::from_vec(rows, cols, data)
    };

    let hidden = out_dims[0];
    let w1 = read_matrix(hidden, in_dims[0]);
    let recurrent = read_matrix(hidden, hidden);
    let b1 = read_matrix(hidden, 1);
    let mut weights = vec![w1];
    let mut biases = vec![b1];
    for l in 1..layer_count {
        weights.push(read_matrix(out_dims[l], in_dims[l]));
        biases.push(read_matrix(out_dims[l], 1));
    }

    Ok(RnnParams {
        tag,
        input_dim: in_dims[0],
        dims: out_dims,
        weights,
        recurrent,
        biases,
    })
}
