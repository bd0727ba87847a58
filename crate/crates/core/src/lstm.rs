//! Single-layer LSTM with an explicit, persistable `(h, c)` state.
//!
//! Only `h` and `c` flow from one time step to the next, so a user's whole
//! history is summarised by an [`LstmState`]. Folding one new event into a
//! cached state with [`LstmWeights::step`] costs the same regardless of how
//! many events came before it. [`LstmWeights::replay`] runs the full sequence
//! from the zero state and is kept as the reference path and as the warm-up
//! routine for batch builds.
//!
//! Gate blocks are laid out as consecutive `n`-row blocks in the order
//! input, forget, candidate, output (`[i, f, g, o]`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelio::{lenient_matrix, lenient_vec, quote_nonfinite_literals};

const GATES: usize = 4;
const GATE_NAMES: [&str; GATES] = ["i", "f", "g", "o"];

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("dimension mismatch in {field}: expected {expected}, got {actual}")]
    Dimension {
        field: String,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sequence element {index} has length {actual}, expected {expected}")]
    SequenceElement {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("input_dim and hidden_dim must be positive")]
    EmptyShape,
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse model file: {0}")]
    Parse(String),
}

/// LSTM parameters, stored flat and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    input_dim: usize,
    hidden_dim: usize,
    /// `4n x d`
    input_kernel: Vec<f64>,
    /// `4n x n`
    recurrent_kernel: Vec<f64>,
    /// `4n`
    bias: Vec<f64>,
    /// `2 x n`
    dense_kernel: Vec<f64>,
    dense_bias: [f64; 2],
}

/// Hidden and cell vectors plus the number of events folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub steps_seen: u64,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
            steps_seen: 0,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.h.len()
    }

    /// Largest componentwise difference in `h` and `c`.
    pub fn max_abs_diff(&self, other: &LstmState) -> f64 {
        self.h
            .iter()
            .zip(&other.h)
            .chain(self.c.iter().zip(&other.c))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `(p_neg, p_pos)` from the two-way softmax head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmPrediction {
    pub p_neg: f64,
    pub p_pos: f64,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(field: &str, values: &[f64]) -> Result<(), LstmError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LstmError::NonFinite(field.to_string()))
    }
}

fn check_len(field: &str, expected: usize, actual: usize) -> Result<(), LstmError> {
    if expected == actual {
        Ok(())
    } else {
        Err(LstmError::Dimension {
            field: field.to_string(),
            expected,
            actual,
        })
    }
}

impl LstmWeights {
    /// Build from flat row-major buffers, validating every shape and value.
    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        input_kernel: Vec<f64>,
        recurrent_kernel: Vec<f64>,
        bias: Vec<f64>,
        dense_kernel: Vec<f64>,
        dense_bias: [f64; 2],
    ) -> Result<Self, LstmError> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(LstmError::EmptyShape);
        }
        let rows = GATES * hidden_dim;
        check_len("input_kernel", rows * input_dim, input_kernel.len())?;
        check_len("recurrent_kernel", rows * hidden_dim, recurrent_kernel.len())?;
        check_len("bias", rows, bias.len())?;
        check_len("dense_W", 2 * hidden_dim, dense_kernel.len())?;
        check_finite("input_kernel", &input_kernel)?;
        check_finite("recurrent_kernel", &recurrent_kernel)?;
        check_finite("bias", &bias)?;
        check_finite("dense_W", &dense_kernel)?;
        check_finite("dense_b", &dense_bias)?;
        Ok(Self {
            input_dim,
            hidden_dim,
            input_kernel,
            recurrent_kernel,
            bias,
            dense_kernel,
            dense_bias,
        })
    }

    /// All-zero parameters.
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Result<Self, LstmError> {
        let rows = GATES * hidden_dim;
        Self::from_parts(
            input_dim,
            hidden_dim,
            vec![0.0; rows * input_dim],
            vec![0.0; rows * hidden_dim],
            vec![0.0; rows],
            vec![0.0; 2 * hidden_dim],
            [0.0; 2],
        )
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState::zeros(self.hidden_dim)
    }

    fn check_state(&self, state: &LstmState) -> Result<(), LstmError> {
        check_len("state.h", self.hidden_dim, state.h.len())?;
        check_len("state.c", self.hidden_dim, state.c.len())?;
        check_finite("state.h", &state.h)?;
        check_finite("state.c", &state.c)
    }

    /// Advance `state` by one input vector. The input state is left untouched.
    pub fn step(&self, state: &LstmState, x: &[f64]) -> Result<LstmState, LstmError> {
        check_len("x", self.input_dim, x.len())?;
        check_finite("x", x)?;
        self.check_state(state)?;

        let n = self.hidden_dim;
        let d = self.input_dim;
        let mut pre = vec![0.0; GATES * n];
        for (r, z) in pre.iter_mut().enumerate() {
            let w_row = &self.input_kernel[r * d..(r + 1) * d];
            let u_row = &self.recurrent_kernel[r * n..(r + 1) * n];
            let mut acc = self.bias[r];
            acc += dot(w_row, x);
            acc += dot(u_row, &state.h);
            *z = acc;
        }
        Ok(self.apply_gates(&pre, state))
    }

    /// Gate nonlinearities and the cell/hidden update, given the `4n`
    /// pre-activations.
    fn apply_gates(&self, pre: &[f64], state: &LstmState) -> LstmState {
        let n = self.hidden_dim;
        let (zi, rest) = pre.split_at(n);
        let (zf, rest) = rest.split_at(n);
        let (zg, zo) = rest.split_at(n);
        let mut h = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for k in 0..n {
            let i = sigmoid(zi[k]);
            let f = sigmoid(zf[k]);
            let g = zg[k].tanh();
            let o = sigmoid(zo[k]);
            let c_next = f * state.c[k] + i * g;
            c.push(c_next);
            h.push(o * c_next.tanh());
        }
        LstmState {
            h,
            c,
            steps_seen: state.steps_seen + 1,
        }
    }

    /// Softmax over the two-node dense head applied to `h`.
    pub fn predict(&self, state: &LstmState) -> Result<LstmPrediction, LstmError> {
        self.check_state(state)?;
        let n = self.hidden_dim;
        let l0 = self.dense_bias[0] + dot(&self.dense_kernel[..n], &state.h);
        let l1 = self.dense_bias[1] + dot(&self.dense_kernel[n..], &state.h);
        Ok(softmax2(l0, l1))
    }

    /// Run a whole sequence from the zero state.
    ///
    /// Input projections `W x_t` for every step are computed up front (one
    /// pass over the sequence), then the recurrence runs over the cached
    /// projections. This is the layout sequence frameworks use; its sums are
    /// grouped differently from [`step`](Self::step), so the two agree to
    /// rounding, not bitwise.
    pub fn replay<V: AsRef<[f64]>>(&self, sequence: &[V]) -> Result<LstmState, LstmError> {
        let n = self.hidden_dim;
        let d = self.input_dim;
        let rows = GATES * n;
        for (index, x) in sequence.iter().enumerate() {
            let x = x.as_ref();
            if x.len() != d {
                return Err(LstmError::SequenceElement {
                    index,
                    expected: d,
                    actual: x.len(),
                });
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(LstmError::NonFinite(format!("sequence[{index}]")));
            }
        }

        let mut projected = vec![0.0; sequence.len() * rows];
        for (t, x) in sequence.iter().enumerate() {
            let x = x.as_ref();
            let out = &mut projected[t * rows..(t + 1) * rows];
            for (r, slot) in out.iter_mut().enumerate() {
                *slot = dot(&self.input_kernel[r * d..(r + 1) * d], x) + self.bias[r];
            }
        }

        let mut state = self.zero_state();
        let mut pre = vec![0.0; rows];
        for t in 0..sequence.len() {
            let proj = &projected[t * rows..(t + 1) * rows];
            for (r, z) in pre.iter_mut().enumerate() {
                *z = proj[r] + dot(&self.recurrent_kernel[r * n..(r + 1) * n], &state.h);
            }
            state = self.apply_gates(&pre, &state);
        }
        Ok(state)
    }

    /// Load and validate a weight file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LstmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LstmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, LstmError> {
        let file: LstmFile = serde_json::from_str(&quote_nonfinite_literals(text))
            .map_err(|e| LstmError::Parse(e.to_string()))?;
        file.into_weights()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LstmFile::from_weights(self))
            .expect("weights serialize to JSON")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LstmError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| LstmError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax2(l0: f64, l1: f64) -> LstmPrediction {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let total = e0 + e1;
    LstmPrediction {
        p_neg: e0 / total,
        p_pos: e1 / total,
    }
}

/// On-disk layout: one named matrix per gate so the block order is explicit.
#[derive(Serialize, Deserialize)]
struct LstmFile {
    input_dim: usize,
    hidden_dim: usize,
    #[serde(rename = "W_i", deserialize_with = "lenient_matrix")]
    w_i: Vec<Vec<f64>>,
    #[serde(rename = "W_f", deserialize_with = "lenient_matrix")]
    w_f: Vec<Vec<f64>>,
    #[serde(rename = "W_g", deserialize_with = "lenient_matrix")]
    w_g: Vec<Vec<f64>>,
    #[serde(rename = "W_o", deserialize_with = "lenient_matrix")]
    w_o: Vec<Vec<f64>>,
    #[serde(rename = "U_i", deserialize_with = "lenient_matrix")]
    u_i: Vec<Vec<f64>>,
    #[serde(rename = "U_f", deserialize_with = "lenient_matrix")]
    u_f: Vec<Vec<f64>>,
    #[serde(rename = "U_g", deserialize_with = "lenient_matrix")]
    u_g: Vec<Vec<f64>>,
    #[serde(rename = "U_o", deserialize_with = "lenient_matrix")]
    u_o: Vec<Vec<f64>>,
    #[serde(deserialize_with = "lenient_vec")]
    b_i: Vec<f64>,
    #[serde(deserialize_with = "lenient_vec")]
    b_f: Vec<f64>,
    #[serde(deserialize_with = "lenient_vec")]
    b_g: Vec<f64>,
    #[serde(deserialize_with = "lenient_vec")]
    b_o: Vec<f64>,
    #[serde(rename = "dense_W", deserialize_with = "lenient_matrix")]
    dense_w: Vec<Vec<f64>>,
    #[serde(rename = "dense_b", deserialize_with = "lenient_vec")]
    dense_b: Vec<f64>,
}

fn flatten(
    field: &str,
    matrix: &[Vec<f64>],
    rows: usize,
    cols: usize,
    out: &mut Vec<f64>,
) -> Result<(), LstmError> {
    check_len(&format!("{field} rows"), rows, matrix.len())?;
    for (r, row) in matrix.iter().enumerate() {
        check_len(&format!("{field}[{r}]"), cols, row.len())?;
        check_finite(field, row)?;
        out.extend_from_slice(row);
    }
    Ok(())
}

fn unflatten(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

impl LstmFile {
    fn into_weights(self) -> Result<LstmWeights, LstmError> {
        let (d, n) = (self.input_dim, self.hidden_dim);
        if d == 0 || n == 0 {
            return Err(LstmError::EmptyShape);
        }
        let mut input_kernel = Vec::with_capacity(GATES * n * d);
        let mut recurrent_kernel = Vec::with_capacity(GATES * n * n);
        let mut bias = Vec::with_capacity(GATES * n);
        let w = [&self.w_i, &self.w_f, &self.w_g, &self.w_o];
        let u = [&self.u_i, &self.u_f, &self.u_g, &self.u_o];
        let b = [&self.b_i, &self.b_f, &self.b_g, &self.b_o];
        for gate in 0..GATES {
            let name = GATE_NAMES[gate];
            flatten(&format!("W_{name}"), w[gate], n, d, &mut input_kernel)?;
            flatten(&format!("U_{name}"), u[gate], n, n, &mut recurrent_kernel)?;
            let field = format!("b_{name}");
            check_len(&field, n, b[gate].len())?;
            check_finite(&field, b[gate])?;
            bias.extend_from_slice(b[gate]);
        }
        let mut dense_kernel = Vec::with_capacity(2 * n);
        flatten("dense_W", &self.dense_w, 2, n, &mut dense_kernel)?;
        check_len("dense_b", 2, self.dense_b.len())?;
        let dense_bias = [self.dense_b[0], self.dense_b[1]];
        LstmWeights::from_parts(
            d,
            n,
            input_kernel,
            recurrent_kernel,
            bias,
            dense_kernel,
            dense_bias,
        )
    }

    fn from_weights(w: &LstmWeights) -> Self {
        let (d, n) = (w.input_dim, w.hidden_dim);
        let wg = |g: usize| unflatten(&w.input_kernel[g * n * d..(g + 1) * n * d], d);
        let ug = |g: usize| unflatten(&w.recurrent_kernel[g * n * n..(g + 1) * n * n], n);
        let bg = |g: usize| w.bias[g * n..(g + 1) * n].to_vec();
        Self {
            input_dim: d,
            hidden_dim: n,
            w_i: wg(0),
            w_f: wg(1),
            w_g: wg(2),
            w_o: wg(3),
            u_i: ug(0),
            u_f: ug(1),
            u_g: ug(2),
            u_o: ug(3),
            b_i: bg(0),
            b_f: bg(1),
            b_g: bg(2),
            b_o: bg(3),
            dense_w: unflatten(&w.dense_kernel, n),
            dense_b: w.dense_bias.to_vec(),
        }
    }
}

/// Seeded random weights, uniform in `[-scale, scale]`.
pub fn random_weights<R: rand::Rng>(
    rng: &mut R,
    input_dim: usize,
    hidden_dim: usize,
    scale: f64,
) -> Result<LstmWeights, LstmError> {
    let rows = GATES * hidden_dim;
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()
    };
    let input_kernel = draw(rows * input_dim);
    let recurrent_kernel = draw(rows * hidden_dim);
    let bias = draw(rows);
    let dense_kernel = draw(2 * hidden_dim);
    let dense_bias = draw(2);
    LstmWeights::from_parts(
        input_dim,
        hidden_dim,
        input_kernel,
        recurrent_kernel,
        bias,
        dense_kernel,
        [dense_bias[0], dense_bias[1]],
    )
}
