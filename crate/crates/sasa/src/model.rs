//! The end-to-end model: segment summarization → intra attention →
//! inter attention → concatenated representation → predictor, trained
//! jointly on labeled source and unlabeled target batches with the two
//! structure-alignment penalties.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::alignment::{alpha_alignment_loss, beta_alignment_loss, AlignmentNorm, BatchWeights};
use crate::metrics::{auc, rmse, MetricReport};
use crate::segment::{bind_lstm, summarize_var_batch, BoundVarLstm, VarLstmParams};
use crate::series::{Domain, Task, TimeSeriesSample};
use crate::structure::{
    aggregate_structure, bind_projection, build_representation, inter_attention, intra_attention,
    BoundProjection, InterWeights, IntraWeights, ProjectionParams, StructureMatrix, COSINE_EPS,
};
use crate::synth::shuffle;
use crate::tape::{Shape, Tape, TensorId};
use crate::{Error, Result};

/// Prediction clamp for the cross-entropy loss.
const PRED_CLAMP: f64 = 1e-7;
/// Norm guard for the batch RMSE loss.
const RMSE_EPS: f64 = 1e-8;
/// Sample cap for the end-of-training structure averages.
const STRUCTURE_REPORT_CAP: usize = 256;

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Task loss plus both alignment penalties.
    Full,
    /// Drop the segment-length alignment `L_α`.
    NoAlpha,
    /// Drop the structure alignment `L_β`.
    NoBeta,
    /// Drop both penalties and never touch target batches.
    SourceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_vars: usize,
    pub num_steps: usize,
    pub d_h: usize,
    pub task: Task,
    /// Weight ω on the alignment terms.
    pub omega: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub alignment_norm: AlignmentNorm,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_vars == 0 || self.num_steps == 0 || self.d_h == 0 {
            return Err(Error::Invalid("dimensions must all be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::Invalid("omega must be >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn check_sample(&self, sample: &TimeSeriesSample, role: &str) -> Result<()> {
        if sample.num_vars() != self.num_vars || sample.num_steps() != self.num_steps {
            return Err(Error::Shape(format!(
                "{role} sample is {}x{}, config expects {}x{}",
                sample.num_vars(),
                sample.num_steps(),
                self.num_vars,
                self.num_steps
            )));
        }
        Ok(())
    }
}

/// The feed-forward head: one tanh hidden layer, then a linear scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// `[input_dim × hidden]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[hidden × 1]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PredictorParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        PredictorParams {
            input_dim,
            hidden,
            w1: (0..input_dim * hidden).map(|_| rng.gen_range(-bound1..bound1)).collect(),
            b1: (0..hidden).map(|_| rng.gen_range(-bound1..bound1)).collect(),
            w2: (0..hidden).map(|_| rng.gen_range(-bound2..bound2)).collect(),
            b2: vec![0.0],
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        PredictorParams {
            input_dim,
            hidden,
            w1: vec![0.0; input_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: vec![0.0],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Clone, Copy)]
pub struct BoundPredictor {
    pub input_dim: usize,
    pub hidden: usize,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn bind_predictor(tape: &mut Tape, p: &PredictorParams) -> BoundPredictor {
    BoundPredictor {
        input_dim: p.input_dim,
        hidden: p.hidden,
        w1: tape.leaf(p.w1.clone(), Shape::Matrix(p.input_dim, p.hidden)),
        b1: tape.leaf(p.b1.clone(), Shape::Vector(p.hidden)),
        w2: tape.leaf(p.w2.clone(), Shape::Matrix(p.hidden, 1)),
        b2: tape.leaf(p.b2.clone(), Shape::Vector(1)),
    }
}

/// Raw scalar output of the head for one representation vector.
pub fn predictor_forward(tape: &mut Tape, features: TensorId, p: &BoundPredictor) -> TensorId {
    let row = tape.reshape(features, Shape::Matrix(1, p.input_dim));
    let pre = tape.matmul(row, p.w1);
    let pre = tape.add_row_broadcast(pre, p.b1);
    let hidden = tape.tanh(pre);
    let out = tape.matmul(hidden, p.w2);
    let out = tape.add_row_broadcast(out, p.b2);
    tape.reshape(out, Shape::Scalar)
}

/// Every trainable: per-variable LSTMs Θ, shared projections, predictor φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lstm: Vec<VarLstmParams>,
    pub proj: ProjectionParams,
    pub predictor: PredictorParams,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let lstm = (0..cfg.num_vars).map(|_| VarLstmParams::init(cfg.d_h, rng)).collect();
        let proj = ProjectionParams::init(cfg.d_h, rng);
        let predictor = PredictorParams::init(cfg.num_vars * 2 * cfg.d_h, cfg.d_h, rng);
        ModelParams { lstm, proj, predictor }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            lstm: (0..cfg.num_vars).map(|_| VarLstmParams::zeros(cfg.d_h)).collect(),
            proj: ProjectionParams::zeros(cfg.d_h),
            predictor: PredictorParams::zeros(cfg.num_vars * 2 * cfg.d_h, cfg.d_h),
        }
    }

    /// Parameter arrays in the fixed traversal order shared with
    /// [`bind_model`] and the optimizer slots.
    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::new();
        for block in &self.lstm {
            out.extend(block.arrays());
        }
        out.extend(self.proj.arrays());
        out.extend(self.predictor.arrays());
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for block in &mut self.lstm {
            out.extend(block.arrays_mut());
        }
        out.extend(self.proj.arrays_mut());
        out.extend(self.predictor.arrays_mut());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays().into_iter().flatten().copied().collect()
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for array in self.arrays_mut() {
            let len = array.len();
            array.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector has wrong length");
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let a = self.flatten();
        let b = other.flatten();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Exact trainable scalar counts, by component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub lstm: usize,
    pub projection: usize,
    pub predictor: usize,
    pub total: usize,
}

pub fn count_params(params: &ModelParams) -> usize {
    count_params_report(params).total
}

pub fn count_params_report(params: &ModelParams) -> ParamCountReport {
    let lstm = params.lstm.iter().map(|b| b.param_count()).sum();
    let projection = params.proj.param_count();
    let predictor = params.predictor.param_count();
    ParamCountReport { lstm, projection, predictor, total: lstm + projection + predictor }
}

pub struct BoundModel {
    pub lstm: Vec<BoundVarLstm>,
    pub proj: BoundProjection,
    pub predictor: BoundPredictor,
}

impl BoundModel {
    /// Leaf ids in the same order as [`ModelParams::arrays`].
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for block in &self.lstm {
            for gate in [&block.input, &block.forget, &block.output, &block.cell] {
                out.extend([gate.w_x, gate.w_h, gate.b]);
            }
        }
        out.extend([self.proj.w_q, self.proj.w_k, self.proj.w_v]);
        out.extend([self.predictor.w1, self.predictor.b1, self.predictor.w2, self.predictor.b2]);
        out
    }
}

pub fn bind_model(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    BoundModel {
        lstm: params.lstm.iter().map(|b| bind_lstm(tape, b)).collect(),
        proj: bind_projection(tape, &params.proj),
        predictor: bind_predictor(tape, &params.predictor),
    }
}

/// Per-sample outputs of a batched forward pass, still on the tape.
pub struct BatchForward {
    /// Classification: probability in (0,1). Regression: raw output.
    pub preds: Vec<TensorId>,
    pub alpha: Vec<Vec<TensorId>>,
    pub beta: Vec<Vec<TensorId>>,
    pub representations: Vec<TensorId>,
}

/// Run the full pipeline for a batch of samples on one tape.
pub fn forward_batch(
    tape: &mut Tape,
    samples: &[&TimeSeriesSample],
    bound: &BoundModel,
    cfg: &ModelConfig,
) -> BatchForward {
    assert!(!samples.is_empty(), "forward of an empty batch");
    let n = cfg.num_steps;
    let m = cfg.num_vars;

    // One joint summarization per variable over the whole batch.
    let big_banks: Vec<TensorId> = (0..m)
        .map(|var| summarize_var_batch(tape, samples, var, &bound.lstm[var]))
        .collect();

    let mut preds = Vec::with_capacity(samples.len());
    let mut alpha = Vec::with_capacity(samples.len());
    let mut beta = Vec::with_capacity(samples.len());
    let mut representations = Vec::with_capacity(samples.len());
    for s in 0..samples.len() {
        let banks: Vec<TensorId> =
            big_banks.iter().map(|&big| tape.rows(big, s * n, (s + 1) * n)).collect();
        let (alphas, summaries) = intra_attention(tape, &banks, &bound.proj);
        let (betas, structures) = inter_attention(tape, &summaries, &banks, COSINE_EPS);
        let representation = build_representation(tape, &summaries, &structures);
        let logit = predictor_forward(tape, representation, &bound.predictor);
        let pred = match cfg.task {
            Task::Classification => tape.sigmoid(logit),
            Task::Regression => logit,
        };
        preds.push(pred);
        alpha.push(alphas);
        beta.push(betas);
        representations.push(representation);
    }
    BatchForward { preds, alpha, beta, representations }
}

/// Task loss over a batch: mean binary cross-entropy of clamped
/// probabilities, or the batch RMSE for regression.
pub fn label_loss(
    tape: &mut Tape,
    preds: &[TensorId],
    labels: &[f64],
    task: Task,
) -> Result<TensorId> {
    if preds.is_empty() {
        return Err(Error::Invalid("label loss of an empty batch".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} preds vs {} labels", preds.len(), labels.len())));
    }
    match task {
        Task::Classification => {
            let mut terms = Vec::with_capacity(preds.len());
            for (&pred, &y) in preds.iter().zip(labels) {
                if y != 0.0 && y != 1.0 {
                    return Err(Error::Invalid(format!("classification label {y} is not 0/1")));
                }
                let p = tape.clamp(pred, PRED_CLAMP, 1.0 - PRED_CLAMP);
                let log_term = if y == 1.0 {
                    tape.ln(p)
                } else {
                    let one = tape.scalar(1.0);
                    let q = tape.sub(one, p);
                    tape.ln(q)
                };
                terms.push(tape.scale(log_term, -1.0));
            }
            let stacked = tape.concat(&terms);
            Ok(tape.mean(stacked, None))
        }
        Task::Regression => {
            let diffs: Vec<TensorId> = preds
                .iter()
                .zip(labels)
                .map(|(&pred, &y)| {
                    let target = tape.scalar(y);
                    tape.sub(pred, target)
                })
                .collect();
            let stacked = tape.concat(&diffs);
            let norm = tape.norm2(stacked, RMSE_EPS);
            Ok(tape.scale(norm, 1.0 / (preds.len() as f64).sqrt()))
        }
    }
}

/// The scalar objective and its pieces, on the tape.
pub struct LossParts {
    pub total: TensorId,
    pub label: TensorId,
    pub alpha: TensorId,
    pub beta: TensorId,
    pub source: BatchForward,
    pub target: Option<BatchForward>,
}

/// `L = L_y + ω (L_α + L_β)` with ablations zeroing their term.
///
/// The task loss sees only the source batch; `source_only` skips the
/// target batch entirely.
pub fn total_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    src_batch: &[&TimeSeriesSample],
    tgt_batch: &[&TimeSeriesSample],
    cfg: &ModelConfig,
) -> Result<LossParts> {
    if src_batch.is_empty() {
        return Err(Error::Invalid("empty source batch".into()));
    }
    let labels: Vec<f64> = src_batch
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Invalid("unlabeled source sample".into())))
        .collect::<Result<_>>()?;

    let source = forward_batch(tape, src_batch, bound, cfg);
    let l_y = label_loss(tape, &source.preds, &labels, cfg.task)?;

    if cfg.ablation == Ablation::SourceOnly {
        let zero_a = tape.scalar(0.0);
        let zero_b = tape.scalar(0.0);
        return Ok(LossParts { total: l_y, label: l_y, alpha: zero_a, beta: zero_b, source, target: None });
    }

    if tgt_batch.is_empty() {
        return Err(Error::Invalid("empty target batch outside source_only".into()));
    }
    let target = forward_batch(tape, tgt_batch, bound, cfg);
    let src_weights = BatchWeights {
        domain: Domain::Source,
        alpha: source.alpha.clone(),
        beta: source.beta.clone(),
    };
    let tgt_weights = BatchWeights {
        domain: Domain::Target,
        alpha: target.alpha.clone(),
        beta: target.beta.clone(),
    };

    let l_alpha = if cfg.ablation == Ablation::NoAlpha {
        tape.scalar(0.0)
    } else {
        alpha_alignment_loss(tape, &src_weights, &tgt_weights, cfg.alignment_norm)?
    };
    let l_beta = if cfg.ablation == Ablation::NoBeta {
        tape.scalar(0.0)
    } else {
        beta_alignment_loss(tape, &src_weights, &tgt_weights, cfg.alignment_norm)?
    };

    let aligned = tape.add(l_alpha, l_beta);
    let weighted = tape.scale(aligned, cfg.omega);
    let total = tape.add(l_y, weighted);
    Ok(LossParts { total, label: l_y, alpha: l_alpha, beta: l_beta, source, target: Some(target) })
}

/// Single-sample forward pass with the weights pulled off the tape.
pub struct ForwardResult {
    pub prediction: f64,
    pub alpha: IntraWeights,
    pub beta: InterWeights,
    pub representation: Vec<f64>,
}

pub fn forward(
    sample: &TimeSeriesSample,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardResult> {
    cfg.validate()?;
    cfg.check_sample(sample, "forward")?;
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params);
    let out = forward_batch(&mut tape, &[sample], &bound, cfg);
    let alpha = IntraWeights::from_tape(&tape, &out.alpha[0]);
    let beta = if cfg.num_vars == 1 {
        InterWeights::empty(1, cfg.num_steps)
    } else {
        InterWeights::from_tape(&tape, &out.beta[0], cfg.num_vars, cfg.num_steps)
    };
    Ok(ForwardResult {
        prediction: tape.value(out.preds[0]),
        alpha,
        beta,
        representation: tape.values(out.representations[0]).to_vec(),
    })
}

/// Predictions for a dataset, evaluated in `batch_size` chunks.
///
/// Per-sample outputs are independent, so the chunking cannot change
/// the numbers.
pub fn predict(
    params: &ModelParams,
    samples: &[TimeSeriesSample],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        for sample in chunk {
            cfg.check_sample(sample, "predict")?;
        }
        let refs: Vec<&TimeSeriesSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, params);
        let fwd = forward_batch(&mut tape, &refs, &bound, cfg);
        out.extend(fwd.preds.iter().map(|&p| tape.value(p)));
    }
    Ok(out)
}

/// Task metric of the model on a labeled dataset.
pub fn evaluate(
    params: &ModelParams,
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
    Ok(MetricReport {
        metric: metric.into(),
        value,
        sample_count: samples.len(),
        per_seed: Vec::new(),
    })
}

/// Mean aggregated structure matrix over a dataset.
pub fn structure_of(
    params: &ModelParams,
    samples: &[TimeSeriesSample],
    cfg: &ModelConfig,
) -> Result<StructureMatrix> {
    if samples.is_empty() {
        return Err(Error::Invalid("structure of an empty dataset".into()));
    }
    let mut matrices = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        for sample in chunk {
            cfg.check_sample(sample, "structure")?;
        }
        let refs: Vec<&TimeSeriesSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, params);
        let fwd = forward_batch(&mut tape, &refs, &bound, cfg);
        for betas in &fwd.beta {
            let weights = if cfg.num_vars == 1 {
                InterWeights::empty(1, cfg.num_steps)
            } else {
                InterWeights::from_tape(&tape, betas, cfg.num_vars, cfg.num_steps)
            };
            matrices.push(aggregate_structure(&weights));
        }
    }
    Ok(StructureMatrix::mean_of(&matrices))
}

/// Loss and metric trace of one epoch. Losses are means over the
/// epoch's optimization steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub label_loss: f64,
    pub alpha_loss: f64,
    pub beta_loss: f64,
    pub total_loss: f64,
    pub target_metric: Option<f64>,
    /// Observational only; excluded from determinism comparisons.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub param_count: ParamCountReport,
    pub final_structure_source: Option<StructureMatrix>,
    pub final_structure_target: Option<StructureMatrix>,
}

impl TrainReport {
    /// Bitwise equality of everything the run computes, ignoring wall
    /// clock.
    pub fn numbers_eq(&self, other: &Self) -> bool {
        let stats = |r: &TrainReport| -> Vec<u64> {
            let mut out = Vec::new();
            for e in &r.epochs {
                out.push(e.label_loss.to_bits());
                out.push(e.alpha_loss.to_bits());
                out.push(e.beta_loss.to_bits());
                out.push(e.total_loss.to_bits());
                out.push(e.target_metric.unwrap_or(-1.0).to_bits());
            }
            for s in [&r.final_structure_source, &r.final_structure_target].into_iter().flatten() {
                out.extend(s.a.data.iter().map(|v| v.to_bits()));
            }
            out
        };
        self.param_count == other.param_count && stats(self) == stats(other)
    }
}

fn validate_dataset(
    cfg: &ModelConfig,
    samples: &[TimeSeriesSample],
    role: &str,
    need_labels: bool,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{role} dataset is empty")));
    }
    for sample in samples {
        cfg.check_sample(sample, role)?;
        if need_labels && sample.label.is_none() {
            return Err(Error::Invalid(format!("{role} dataset has unlabeled samples")));
        }
    }
    Ok(())
}

/// Train from scratch on paired shuffled mini-batches.
///
/// Source and target are shuffled independently each epoch and paired by
/// position, cycling the target when it is shorter. Target labels are
/// never read by the optimization path; they only feed the per-epoch
/// metric on `target_eval`. Deterministic for a fixed seed and config.
pub fn train(
    source_train: &[TimeSeriesSample],
    target_train: &[TimeSeriesSample],
    target_eval: Option<&[TimeSeriesSample]>,
    cfg: &ModelConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    validate_dataset(cfg, source_train, "source train", true)?;
    let source_only = cfg.ablation == Ablation::SourceOnly;
    if !source_only {
        validate_dataset(cfg, target_train, "target train", false)?;
    }
    if let Some(eval) = target_eval {
        validate_dataset(cfg, eval, "target eval", true)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg, &mut rng);
    let sizes: Vec<usize> = params.arrays().iter().map(|a| a.len()).collect();
    let mut adam = AdamState::new(cfg.lr, &sizes);

    let n_src = source_train.len();
    let n_tgt = target_train.len();
    let batch = cfg.batch_size.min(n_src);
    let steps_per_epoch = n_src.div_ceil(batch);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut src_order: Vec<usize> = (0..n_src).collect();
        shuffle(&mut src_order, &mut rng);
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        if !source_only {
            shuffle(&mut tgt_order, &mut rng);
        }

        let mut sums = [0.0f64; 4];
        for step in 0..steps_per_epoch {
            let src_ids = &src_order[step * batch..((step + 1) * batch).min(n_src)];
            let src_batch: Vec<&TimeSeriesSample> =
                src_ids.iter().map(|&i| &source_train[i]).collect();
            let tgt_batch: Vec<&TimeSeriesSample> = if source_only {
                Vec::new()
            } else {
                (0..src_batch.len())
                    .map(|r| &target_train[tgt_order[(step * batch + r) % n_tgt]])
                    .collect()
            };

            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &params);
            let parts = total_loss(&mut tape, &bound, &src_batch, &tgt_batch, cfg)?;
            let loss_value = tape.value(parts.total);
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} step {step}")));
            }
            sums[0] += tape.value(parts.label);
            sums[1] += tape.value(parts.alpha);
            sums[2] += tape.value(parts.beta);
            sums[3] += loss_value;

            tape.backward(parts.total);
            let mut grads: Vec<Vec<f64>> =
                bound.leaf_ids().iter().map(|&id| tape.grad_or_zeros(id)).collect();
            drop(tape);
            let mut arrays = params.arrays_mut();
            let mut views: Vec<&mut [f64]> =
                arrays.iter_mut().map(|a| a.as_mut_slice()).collect();
            adam.step(&mut views, &mut grads);
        }

        let target_metric = match target_eval {
            Some(eval) => Some(match cfg.task {
                Task::Classification => evaluate(&params, eval, cfg)?.value,
                Task::Regression => evaluate(&params, eval, cfg)?.value,
            }),
            None => None,
        };

        let denom = steps_per_epoch as f64;
        epochs.push(EpochStats {
            epoch,
            label_loss: sums[0] / denom,
            alpha_loss: sums[1] / denom,
            beta_loss: sums[2] / denom,
            total_loss: sums[3] / denom,
            target_metric,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    // Structure averages for the report; capped, deterministic prefix.
    let cap = |ds: &[TimeSeriesSample]| ds.len().min(STRUCTURE_REPORT_CAP);
    let final_structure_source = Some(structure_of(&params, &source_train[..cap(source_train)], cfg)?);
    let final_structure_target = if n_tgt > 0 {
        Some(structure_of(&params, &target_train[..cap(target_train)], cfg)?)
    } else {
        None
    };

    let report = TrainReport {
        epochs,
        param_count: count_params_report(&params),
        final_structure_source,
        final_structure_target,
    };
    Ok((params, report))
}
