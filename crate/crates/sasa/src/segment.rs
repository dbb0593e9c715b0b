//! Suffix-segment enumeration and per-variable LSTM summarization.
//!
//! Every variable gets its own LSTM. For a series of length `N` the
//! candidate segments of variable `i` are its `N` suffix windows; window
//! `τ` (1-indexed) covers the last `τ` steps and is summarized by the
//! final hidden state of running the LSTM over it from a zero state.
//!
//! All `N` windows of one variable are evaluated jointly: the window
//! states sit in the rows of one `[N × d_h]` matrix and a per-step row
//! mask activates each window exactly at its own start, which reproduces
//! the run-from-zero-state semantics while keeping the tape small. The
//! same trick batches across samples with `[B·N]` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::series::TimeSeriesSample;
use crate::tape::{Shape, Tape, TensorId};
use crate::{Error, Result};

/// All suffix windows of one univariate series.
///
/// Window `τ` (1-indexed) is the last `τ` values; there are exactly `N`
/// windows and each is a suffix of the next-longer one.
pub fn enumerate_segments(series: &[f64]) -> Result<Vec<&[f64]>> {
    if series.is_empty() {
        return Err(Error::Invalid("cannot enumerate segments of an empty series".into()));
    }
    let n = series.len();
    Ok((1..=n).map(|tau| &series[n - tau..]).collect())
}

/// One LSTM gate: input weight (input size is 1), recurrent weight, bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmGateParams {
    /// `[d_h]` — weight on the scalar input.
    pub w_x: Vec<f64>,
    /// `[d_h × d_h]` recurrent weight.
    pub w_h: Vec<f64>,
    /// `[d_h]` bias.
    pub b: Vec<f64>,
}

impl LstmGateParams {
    fn init(d_h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        LstmGateParams { w_x: draw(d_h), w_h: draw(d_h * d_h), b: draw(d_h) }
    }

    fn len(&self) -> usize {
        self.w_x.len() + self.w_h.len() + self.b.len()
    }
}

/// Parameter block θ for one variable's LSTM (input size 1, hidden `d_h`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarLstmParams {
    pub d_h: usize,
    pub input: LstmGateParams,
    pub forget: LstmGateParams,
    pub output: LstmGateParams,
    pub cell: LstmGateParams,
}

impl VarLstmParams {
    /// Uniform `[-1/√d_h, 1/√d_h]` with the forget-gate bias raised to 1.
    pub fn init(d_h: usize, rng: &mut impl Rng) -> Self {
        let input = LstmGateParams::init(d_h, rng);
        let mut forget = LstmGateParams::init(d_h, rng);
        forget.b.iter_mut().for_each(|b| *b = 1.0);
        let output = LstmGateParams::init(d_h, rng);
        let cell = LstmGateParams::init(d_h, rng);
        VarLstmParams { d_h, input, forget, output, cell }
    }

    pub fn zeros(d_h: usize) -> Self {
        let gate = || LstmGateParams { w_x: vec![0.0; d_h], w_h: vec![0.0; d_h * d_h], b: vec![0.0; d_h] };
        VarLstmParams { d_h, input: gate(), forget: gate(), output: gate(), cell: gate() }
    }

    pub fn param_count(&self) -> usize {
        self.input.len() + self.forget.len() + self.output.len() + self.cell.len()
    }

    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        [&self.input, &self.forget, &self.output, &self.cell]
            .into_iter()
            .flat_map(|g| [&g.w_x, &g.w_h, &g.b])
            .collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        [&mut self.input, &mut self.forget, &mut self.output, &mut self.cell]
            .into_iter()
            .flat_map(|g| [&mut g.w_x, &mut g.w_h, &mut g.b])
            .collect()
    }
}

/// Tape handles for one gate: the raw leaves plus the stacked
/// `[(d_h+1) × d_h]` weight used in the step (recurrent rows first,
/// input-weight row last).
#[derive(Clone, Copy)]
pub struct BoundGate {
    pub w_x: TensorId,
    pub w_h: TensorId,
    pub b: TensorId,
    stacked: TensorId,
}

/// Tape handles for one variable's LSTM.
#[derive(Clone, Copy)]
pub struct BoundVarLstm {
    pub d_h: usize,
    pub input: BoundGate,
    pub forget: BoundGate,
    pub output: BoundGate,
    pub cell: BoundGate,
}

pub fn bind_lstm(tape: &mut Tape, params: &VarLstmParams) -> BoundVarLstm {
    let d = params.d_h;
    let mut bind_gate = |g: &LstmGateParams| {
        let w_x = tape.leaf(g.w_x.clone(), Shape::Vector(d));
        let w_h = tape.leaf(g.w_h.clone(), Shape::Matrix(d, d));
        let b = tape.leaf(g.b.clone(), Shape::Vector(d));
        let w_x_row = tape.reshape(w_x, Shape::Matrix(1, d));
        let stacked = tape.concat_matrix_rows(&[w_h, w_x_row]);
        BoundGate { w_x, w_h, b, stacked }
    };
    BoundVarLstm {
        d_h: d,
        input: bind_gate(&params.input),
        forget: bind_gate(&params.forget),
        output: bind_gate(&params.output),
        cell: bind_gate(&params.cell),
    }
}

/// One LSTM step over `R` independent rows; `xs[r]` is row `r`'s scalar
/// input, `h` and `c` are `[R × d_h]`. The input enters as an extra
/// state column so each gate costs a single matmul.
pub fn lstm_step_rows(
    tape: &mut Tape,
    xs: &[f64],
    h: TensorId,
    c: TensorId,
    theta: &BoundVarLstm,
) -> (TensorId, TensorId) {
    let augmented = tape.append_col_const(h, xs);
    let gate = |tape: &mut Tape, g: &BoundGate| {
        let pre = tape.matmul(augmented, g.stacked);
        tape.add_row_broadcast(pre, g.b)
    };
    let pre_i = gate(tape, &theta.input);
    let pre_f = gate(tape, &theta.forget);
    let pre_o = gate(tape, &theta.output);
    let pre_g = gate(tape, &theta.cell);

    let i = tape.sigmoid(pre_i);
    let f = tape.sigmoid(pre_f);
    let o = tape.sigmoid(pre_o);
    let g = tape.tanh(pre_g);

    let keep = tape.mul(f, c);
    let write = tape.mul(i, g);
    let c_next = tape.add(keep, write);
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act);
    (h_next, c_next)
}

/// Single LSTM step on one `[1 × d_h]` state pair.
pub fn lstm_step(
    tape: &mut Tape,
    x_t: f64,
    h: TensorId,
    c: TensorId,
    theta: &BoundVarLstm,
) -> (TensorId, TensorId) {
    assert!(x_t.is_finite(), "non-finite LSTM input");
    lstm_step_rows(tape, &[x_t], h, c, theta)
}

/// Summarize all suffix windows of variable `var` for a batch of samples.
///
/// Returns a `[(B·N) × d_h]` matrix whose row `s·N + w` is the
/// representation of sample `s`'s window of length `w + 1`, i.e. the
/// final hidden state of the variable's LSTM run from a zero state over
/// the last `w + 1` values.
///
/// Windows join the computation exactly at their own start: the state
/// matrix begins with one row block per sample (the full-length
/// windows) and grows by a zero-state block each step, so only live
/// windows are ever stepped.
pub fn summarize_var_batch(
    tape: &mut Tape,
    samples: &[&TimeSeriesSample],
    var: usize,
    theta: &BoundVarLstm,
) -> TensorId {
    assert!(!samples.is_empty());
    let n = samples[0].num_steps();
    let b = samples.len();
    let d = theta.d_h;

    let mut state: Option<(TensorId, TensorId)> = None;
    let mut xs = Vec::new();
    for t in 0..n {
        let fresh_h = tape.zeros(Shape::Matrix(b, d));
        let fresh_c = tape.zeros(Shape::Matrix(b, d));
        let (h_in, c_in) = match state {
            None => (fresh_h, fresh_c),
            Some((h, c)) => (
                tape.concat_matrix_rows(&[h, fresh_h]),
                tape.concat_matrix_rows(&[c, fresh_c]),
            ),
        };
        // Every live window of sample s reads x^s at step t; the row
        // layout is block-major (start step), sample-minor.
        xs.clear();
        for _block in 0..=t {
            for sample in samples {
                debug_assert_eq!(sample.num_steps(), n, "ragged batch");
                xs.push(sample.series.get(var, t));
            }
        }
        state = Some(lstm_step_rows(tape, &xs, h_in, c_in, theta));
    }

    // Block k holds windows of length n-k; reorder to sample-major,
    // window-length-minor rows.
    let mut indices = Vec::with_capacity(b * n);
    for s in 0..b {
        for w in 0..n {
            indices.push(((n - 1 - w) * b + s) as u32);
        }
    }
    let (h, _) = state.unwrap();
    tape.gather_rows(h, &indices)
}

/// Segment representations `h[i][τ-1]` for one sample: an
/// `M × N × d_h` bank of window summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBank {
    pub num_vars: usize,
    pub num_steps: usize,
    pub hidden: usize,
    data: Vec<f64>,
}

impl SegmentBank {
    pub fn vector(&self, var: usize, window: usize) -> &[f64] {
        let offset = (var * self.num_steps + window) * self.hidden;
        &self.data[offset..offset + self.hidden]
    }
}

/// Evaluate the full segment bank of one sample.
///
/// `params[i]` is variable `i`'s LSTM; the result holds, for every
/// variable and window length, the window's final hidden state.
pub fn summarize(sample: &TimeSeriesSample, params: &[VarLstmParams]) -> Result<SegmentBank> {
    if sample.num_vars() != params.len() {
        return Err(Error::Shape(format!(
            "sample has {} variables but {} LSTM blocks were given",
            sample.num_vars(),
            params.len()
        )));
    }
    let n = sample.num_steps();
    let d_h = params[0].d_h;
    if params.iter().any(|p| p.d_h != d_h) {
        return Err(Error::Shape("inconsistent hidden sizes across variables".into()));
    }

    let mut tape = Tape::new();
    let mut data = Vec::with_capacity(params.len() * n * d_h);
    for (var, theta) in params.iter().enumerate() {
        let bound = bind_lstm(&mut tape, theta);
        let bank = summarize_var_batch(&mut tape, &[sample], var, &bound);
        data.extend_from_slice(tape.values(bank));
    }
    debug_assert!(data.iter().all(|v| v.is_finite()));
    Ok(SegmentBank { num_vars: params.len(), num_steps: n, hidden: d_h, data })
}
