//! Source-to-target LSTM baseline: one shared LSTM over the whole
//! multivariate series feeding the same predictor head, trained on the
//! source domain only and applied to the target without adaptation.
//! This is the lower bound the structure-alignment model is measured
//! against.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::metrics::{auc, rmse, MetricReport};
use crate::model::{
    bind_predictor, label_loss, predictor_forward, EpochStats, ModelConfig, PredictorParams,
};
use crate::series::{Task, TimeSeriesSample};
use crate::synth::shuffle;
use crate::tape::{Shape, Tape, TensorId};
use crate::{Error, Result};

/// One gate of the shared LSTM: input weights over all M variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedGateParams {
    /// `[M × d_h]`
    pub w_x: Vec<f64>,
    /// `[d_h × d_h]`
    pub w_h: Vec<f64>,
    pub b: Vec<f64>,
}

impl SharedGateParams {
    fn init(num_vars: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        SharedGateParams { w_x: draw(num_vars * d_h), w_h: draw(d_h * d_h), b: draw(d_h) }
    }

    fn len(&self) -> usize {
        self.w_x.len() + self.w_h.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmS2TParams {
    pub num_vars: usize,
    pub d_h: usize,
    pub input: SharedGateParams,
    pub forget: SharedGateParams,
    pub output: SharedGateParams,
    pub cell: SharedGateParams,
    pub predictor: PredictorParams,
}

impl LstmS2TParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (m, d) = (cfg.num_vars, cfg.d_h);
        let input = SharedGateParams::init(m, d, rng);
        let mut forget = SharedGateParams::init(m, d, rng);
        forget.b.iter_mut().for_each(|b| *b = 1.0);
        let output = SharedGateParams::init(m, d, rng);
        let cell = SharedGateParams::init(m, d, rng);
        let predictor = PredictorParams::init(d, d, rng);
        LstmS2TParams { num_vars: m, d_h: d, input, forget, output, cell, predictor }
    }

    pub fn param_count(&self) -> usize {
        self.input.len()
            + self.forget.len()
            + self.output.len()
            + self.cell.len()
            + self.predictor.param_count()
    }

    fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for gate in [&mut self.input, &mut self.forget, &mut self.output, &mut self.cell] {
            out.extend([&mut gate.w_x, &mut gate.w_h, &mut gate.b]);
        }
        out.extend(self.predictor.arrays_mut());
        out
    }

    fn arrays(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::new();
        for gate in [&self.input, &self.forget, &self.output, &self.cell] {
            out.extend([&gate.w_x, &gate.w_h, &gate.b]);
        }
        out.extend(self.predictor.arrays());
        out
    }
}

struct BoundGate {
    w_x: TensorId,
    w_h: TensorId,
    b: TensorId,
}

struct BoundBaseline {
    gates: [BoundGate; 4],
    predictor: crate::model::BoundPredictor,
}

impl BoundBaseline {
    fn leaf_ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for gate in &self.gates {
            out.extend([gate.w_x, gate.w_h, gate.b]);
        }
        out.extend([
            self.predictor.w1,
            self.predictor.b1,
            self.predictor.w2,
            self.predictor.b2,
        ]);
        out
    }
}

fn bind(tape: &mut Tape, p: &LstmS2TParams) -> BoundBaseline {
    let (m, d) = (p.num_vars, p.d_h);
    let mut bind_gate = |g: &SharedGateParams| BoundGate {
        w_x: tape.leaf(g.w_x.clone(), Shape::Matrix(m, d)),
        w_h: tape.leaf(g.w_h.clone(), Shape::Matrix(d, d)),
        b: tape.leaf(g.b.clone(), Shape::Vector(d)),
    };
    BoundBaseline {
        gates: [
            bind_gate(&p.input),
            bind_gate(&p.forget),
            bind_gate(&p.output),
            bind_gate(&p.cell),
        ],
        predictor: bind_predictor(tape, &p.predictor),
    }
}

/// Final hidden state `[B × d_h]` of the shared LSTM over a batch.
fn encode(tape: &mut Tape, samples: &[&TimeSeriesSample], bound: &BoundBaseline, cfg: &ModelConfig) -> TensorId {
    let (b, m, n, d) = (samples.len(), cfg.num_vars, cfg.num_steps, cfg.d_h);
    let mut h = tape.zeros(Shape::Matrix(b, d));
    let mut c = tape.zeros(Shape::Matrix(b, d));
    for t in 0..n {
        let mut xt = Vec::with_capacity(b * m);
        for sample in samples {
            for var in 0..m {
                xt.push(sample.series.get(var, t));
            }
        }
        let x = tape.leaf(xt, Shape::Matrix(b, m));
        let pre = |tape: &mut Tape, gate: &BoundGate, h: TensorId| {
            let driven = tape.matmul(x, gate.w_x);
            let recurrent = tape.matmul(h, gate.w_h);
            let sum = tape.add(driven, recurrent);
            tape.add_row_broadcast(sum, gate.b)
        };
        let pre_i = pre(tape, &bound.gates[0], h);
        let pre_f = pre(tape, &bound.gates[1], h);
        let pre_o = pre(tape, &bound.gates[2], h);
        let pre_g = pre(tape, &bound.gates[3], h);
        let i = tape.sigmoid(pre_i);
        let f = tape.sigmoid(pre_f);
        let o = tape.sigmoid(pre_o);
        let g = tape.tanh(pre_g);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        c = tape.add(keep, write);
        let c_act = tape.tanh(c);
        h = tape.mul(o, c_act);
    }
    h
}

fn forward_batch(
    tape: &mut Tape,
    samples: &[&TimeSeriesSample],
    bound: &BoundBaseline,
    cfg: &ModelConfig,
) -> Vec<TensorId> {
    let states = encode(tape, samples, bound, cfg);
    (0..samples.len())
        .map(|s| {
            let features = tape.row_vector(states, s);
            let logit = predictor_forward(tape, features, &bound.predictor);
            match cfg.task {
                Task::Classification => tape.sigmoid(logit),
                Task::Regression => logit,
            }
        })
        .collect()
}

pub fn predict(
    params: &LstmS2TParams,
    samples: &[TimeSeriesSample],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&TimeSeriesSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params);
        let preds = forward_batch(&mut tape, &refs, &bound, cfg);
        out.extend(preds.iter().map(|&p| tape.value(p)));
    }
    Ok(out)
}

pub fn evaluate(
    params: &LstmS2TParams,
    samples: &[TimeSeriesSample],
    cfg: &ModelConfig,
) -> Result<MetricReport> {
    let labels: Vec<f64> = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Invalid("evaluation sample lacks a label".into())))
        .collect::<Result<_>>()?;
    let preds = predict(params, samples, cfg)?;
    let (metric, value) = match cfg.task {
        Task::Classification => ("auc", auc(&preds, &labels)?),
        Task::Regression => ("rmse", rmse(&preds, &labels)?),
    };
    Ok(MetricReport { metric: metric.into(), value, sample_count: samples.len(), per_seed: Vec::new() })
}

/// Train the baseline on source data alone.
pub fn train_lstm_s2t(
    source_train: &[TimeSeriesSample],
    target_eval: Option<&[TimeSeriesSample]>,
    cfg: &ModelConfig,
) -> Result<(LstmS2TParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if source_train.is_empty() {
        return Err(Error::Invalid("source train dataset is empty".into()));
    }
    for sample in source_train {
        if sample.label.is_none() {
            return Err(Error::Invalid("baseline training needs labeled source data".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = LstmS2TParams::init(cfg, &mut rng);
    let sizes: Vec<usize> = params.arrays().iter().map(|a| a.len()).collect();
    let mut adam = AdamState::new(cfg.lr, &sizes);

    let n_src = source_train.len();
    let batch = cfg.batch_size.min(n_src);
    let steps_per_epoch = n_src.div_ceil(batch);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n_src).collect();
        shuffle(&mut order, &mut rng);
        let mut label_sum = 0.0;
        for step in 0..steps_per_epoch {
            let ids = &order[step * batch..((step + 1) * batch).min(n_src)];
            let refs: Vec<&TimeSeriesSample> = ids.iter().map(|&i| &source_train[i]).collect();
            let labels: Vec<f64> = refs.iter().map(|s| s.label.unwrap()).collect();

            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            let preds = forward_batch(&mut tape, &refs, &bound, cfg);
            let loss = label_loss(&mut tape, &preds, &labels, cfg.task)?;
            label_sum += tape.value(loss);
            tape.backward(loss);
            let mut grads: Vec<Vec<f64>> =
                bound.leaf_ids().iter().map(|&id| tape.grad_or_zeros(id)).collect();
            drop(tape);
            let mut arrays = params.arrays_mut();
            let mut views: Vec<&mut [f64]> = arrays.iter_mut().map(|a| a.as_mut_slice()).collect();
            adam.step(&mut views, &mut grads);
        }

        let target_metric = match target_eval {
            Some(eval) => Some(evaluate(&params, eval, cfg)?.value),
            None => None,
        };
        let mean_label = label_sum / steps_per_epoch as f64;
        epochs.push(EpochStats {
            epoch,
            label_loss: mean_label,
            alpha_loss: 0.0,
            beta_loss: 0.0,
            total_loss: mean_label,
            target_metric,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, epochs))
}
