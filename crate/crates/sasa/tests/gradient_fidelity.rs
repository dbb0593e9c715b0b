//! Central finite-difference verification of every tape op and of the
//! complete training objective on a tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sasa::alignment::AlignmentNorm;
use sasa::gradcheck::grad_check;
use sasa::model::{bind_model, total_loss, Ablation, ModelConfig, ModelParams};
use sasa::segment::{bind_lstm, lstm_step, VarLstmParams};
use sasa::series::{Domain, Mat, Task, TimeSeriesSample};
use sasa::tape::{Shape, Tape, TensorId};

const POINTS_PER_OP: usize = 100;
const OP_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

/// Check one op construction: `build` must create leaves consuming the
/// flat point in order and return a scalar loss.
fn run_check(
    name: &str,
    point: &[f64],
    tol: f64,
    build: &dyn Fn(&mut Tape, &[f64]) -> (TensorId, Vec<TensorId>),
) {
    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape, point);
    tape.backward(loss);
    let analytic: Vec<f64> = leaves.iter().flat_map(|&id| tape.grad_or_zeros(id)).collect();
    assert_eq!(analytic.len(), point.len(), "{name}: leaves do not cover the point");
    let err = grad_check(
        |p| {
            let mut tape = Tape::new();
            let (loss, _) = build(&mut tape, p);
            tape.value(loss)
        },
        point,
        &analytic,
        FD_STEP,
    );
    assert!(err < tol, "{name}: max rel err {err} >= {tol}");
}

/// Weighted sum of an arbitrary output makes a scalar loss with
/// non-degenerate upstream gradients.
fn weighted(tape: &mut Tape, out: TensorId, weights: &[f64]) -> TensorId {
    let n = tape.shape(out).numel();
    let flat = tape.reshape(out, Shape::Vector(n));
    let w = tape.leaf(weights.to_vec(), Shape::Vector(n));
    tape.dot(flat, w)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 3 * 4 + 4 * 2, -2.0, 2.0);
        let weights = uniform(&mut rng, 6, -1.0, 1.0);
        run_check("matmul", &point, OP_TOL, &|tape, p| {
            let a = tape.leaf(p[..12].to_vec(), Shape::Matrix(3, 4));
            let b = tape.leaf(p[12..].to_vec(), Shape::Matrix(4, 2));
            let out = tape.matmul(a, b);
            (weighted(tape, out, &weights), vec![a, b])
        });
    }
}

#[test]
fn matmul_sum_gradient_matches_closed_form() {
    // d sum(A·B) / dA = ones(3×2) · Bᵀ, checked against central
    // differences at h = 1e-6 with rel err < 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let a_values = uniform(&mut rng, 12, -1.0, 1.0);
    let b_values = uniform(&mut rng, 8, -1.0, 1.0);

    let mut tape = Tape::new();
    let a = tape.leaf(a_values.clone(), Shape::Matrix(3, 4));
    let b = tape.leaf(b_values.clone(), Shape::Matrix(4, 2));
    let out = tape.matmul(a, b);
    let loss = tape.sum(out, None);
    tape.backward(loss);
    let analytic = tape.grad_or_zeros(a);

    // Closed form: (ones · Bᵀ)[i, k] = Σ_j B[k, j].
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b_values[k * 2 + j]).sum();
            assert!((analytic[i * 4 + k] - expect).abs() < 1e-12);
        }
    }

    let err = grad_check(
        |p| {
            let mut tape = Tape::new();
            let a = tape.leaf(p.to_vec(), Shape::Matrix(3, 4));
            let b = tape.leaf(b_values.clone(), Shape::Matrix(4, 2));
            let out = tape.matmul(a, b);
            let loss = tape.sum(out, None);
            tape.value(loss)
        },
        &a_values,
        &analytic,
        1e-6,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 12, -2.0, 2.0);
        let weights = uniform(&mut rng, 6, -1.0, 1.0);
        run_check("add/sub/mul", &point, OP_TOL, &|tape, p| {
            let a = tape.leaf(p[..6].to_vec(), Shape::Vector(6));
            let b = tape.leaf(p[6..].to_vec(), Shape::Vector(6));
            let sum = tape.add(a, b);
            let diff = tape.sub(a, b);
            let prod = tape.mul(sum, diff);
            let scaled = tape.scale(prod, 0.7);
            (weighted(tape, scaled, &weights), vec![a, b])
        });
    }
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 5, -3.0, 3.0);
        let weights = uniform(&mut rng, 5, -1.0, 1.0);
        run_check("sigmoid/tanh", &point, OP_TOL, &|tape, p| {
            let x = tape.leaf(p.to_vec(), Shape::Vector(5));
            let s = tape.sigmoid(x);
            let t = tape.tanh(x);
            let mixed = tape.mul(s, t);
            (weighted(tape, mixed, &weights), vec![x])
        });
    }
}

#[test]
fn sigmoid_derivative_at_hand_point() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![0.3], Shape::Scalar);
    let y = tape.sigmoid(x);
    tape.backward(y);
    let analytic = tape.grad_or_zeros(x);
    let err = grad_check(
        |p| {
            let mut tape = Tape::new();
            let x = tape.leaf(p.to_vec(), Shape::Scalar);
            let y = tape.sigmoid(x);
            tape.value(y)
        },
        &[0.3],
        &analytic,
        1e-6,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 12, -2.0, 2.0);
        let w0 = uniform(&mut rng, 4, -1.0, 1.0);
        let w1 = uniform(&mut rng, 3, -1.0, 1.0);
        run_check("sum/mean axes", &point, OP_TOL, &|tape, p| {
            let x = tape.leaf(p.to_vec(), Shape::Matrix(3, 4));
            let by_col = tape.sum(x, Some(0));
            let by_row = tape.mean(x, Some(1));
            let total = tape.mean(x, None);
            let a = weighted(tape, by_col, &w0);
            let b = weighted(tape, by_row, &w1);
            let ab = tape.add(a, b);
            let loss = tape.add(ab, total);
            (loss, vec![x])
        });
    }
}

#[test]
fn slicing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 12, -2.0, 2.0);
        let w0 = uniform(&mut rng, 12, -1.0, 1.0);
        let w1 = uniform(&mut rng, 2, -1.0, 1.0);
        run_check("rows/slice/transpose", &point, OP_TOL, &|tape, p| {
            let x = tape.leaf(p.to_vec(), Shape::Matrix(4, 3));
            let xt = tape.transpose(x);
            let picked = tape.rows(x, 1, 3);
            let flat = tape.reshape(picked, Shape::Vector(6));
            let piece = tape.slice(flat, 2, 4);
            let a = weighted(tape, xt, &w0);
            let b = weighted(tape, piece, &w1);
            (tape.add(a, b), vec![x])
        });
    }
}

#[test]
fn concat_stack_mask_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 9, -2.0, 2.0);
        let weights = uniform(&mut rng, 6, -1.0, 1.0);
        let mask = vec![1.0, 0.0];
        run_check("concat/stack/mask", &point, OP_TOL, &|tape, p| {
            let a = tape.leaf(p[..3].to_vec(), Shape::Vector(3));
            let b = tape.leaf(p[3..6].to_vec(), Shape::Vector(3));
            let c = tape.leaf(p[6..].to_vec(), Shape::Vector(3));
            let joined = tape.concat(&[a, b]);
            let stacked = tape.stack_rows(&[b, c]);
            let off = tape.stack_rows(&[a, a]);
            let lerped = tape.row_mask_lerp(stacked, off, &mask);
            let flat = tape.reshape(lerped, Shape::Vector(6));
            let x = weighted(tape, joined, &weights);
            let y = weighted(tape, flat, &weights);
            (tape.add(x, y), vec![a, b, c])
        });
    }
}

#[test]
fn broadcast_and_outer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 11, -2.0, 2.0);
        let weights = uniform(&mut rng, 8, -1.0, 1.0);
        let coeffs = uniform(&mut rng, 2, -2.0, 2.0);
        run_check("row broadcast/outer", &point, OP_TOL, &|tape, p| {
            let mat = tape.leaf(p[..8].to_vec(), Shape::Matrix(2, 4));
            let row = tape.leaf(p[8..11].to_vec(), Shape::Vector(3));
            let spread = tape.outer_const(&coeffs, row); // [2 × 3]
            let grown = tape.rows(spread, 0, 2);
            let wide = tape.reshape(grown, Shape::Vector(6));
            let pad = tape.slice(wide, 0, 4);
            let biased = tape.add_row_broadcast(mat, pad);
            (weighted(tape, biased, &weights), vec![mat, row])
        });
    }
}

#[test]
fn cosine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for _ in 0..POINTS_PER_OP {
        // Keep vectors away from the eps guard region.
        let mut point = uniform(&mut rng, 9, -2.0, 2.0);
        for chunk in point.chunks_mut(3) {
            if chunk.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.3 {
                chunk[0] += 1.0;
            }
        }
        let weights = uniform(&mut rng, 2, -1.0, 1.0);
        run_check("cosine rows", &point, OP_TOL, &|tape, p| {
            let m = tape.leaf(p[..6].to_vec(), Shape::Matrix(2, 3));
            let v = tape.leaf(p[6..].to_vec(), Shape::Vector(3));
            let sims = tape.cosine_rows(m, v, 1e-8);
            (weighted(tape, sims, &weights), vec![m, v])
        });
    }
}

#[test]
fn sparsemax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for _ in 0..POINTS_PER_OP {
        let point = uniform(&mut rng, 6, -1.5, 1.5);
        let weights = uniform(&mut rng, 6, -1.0, 1.0);
        run_check("sparsemax", &point, OP_TOL, &|tape, p| {
            let z = tape.leaf(p.to_vec(), Shape::Vector(6));
            let probs = tape.sparsemax(z);
            (weighted(tape, probs, &weights), vec![z])
        });
    }
}

#[test]
fn norm_dot_ln_clamp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    for _ in 0..POINTS_PER_OP {
        let mut point = uniform(&mut rng, 8, 0.1, 2.0);
        // Keep clamp inputs strictly inside the active range.
        for v in point.iter_mut() {
            *v = v.clamp(0.1, 1.9);
            if (*v - 0.5).abs() < 1e-4 || (*v - 1.5).abs() < 1e-4 {
                *v += 1e-3;
            }
        }
        let weights = uniform(&mut rng, 4, -1.0, 1.0);
        run_check("norm2/dot/ln/clamp", &point, OP_TOL, &|tape, p| {
            let a = tape.leaf(p[..4].to_vec(), Shape::Vector(4));
            let b = tape.leaf(p[4..].to_vec(), Shape::Vector(4));
            let clamped = tape.clamp(a, 0.5, 1.5);
            let logs = tape.ln(b);
            let lw = weighted(tape, logs, &weights);
            let n = tape.norm2(clamped, 1e-8);
            let d = tape.dot(a, b);
            let nd = tape.add(n, d);
            (tape.add(nd, lw), vec![a, b])
        });
    }
}

#[test]
fn lstm_step_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let d = 3;
    let theta = VarLstmParams::init(d, &mut rng);
    let flat: Vec<f64> = theta.arrays().into_iter().flatten().copied().collect();
    let weights = uniform(&mut rng, d, -1.0, 1.0);
    let x_t = 0.7;

    let rebuild = |p: &[f64]| {
        let mut t = VarLstmParams::zeros(d);
        let mut offset = 0;
        for array in t.arrays_mut() {
            let len = array.len();
            array.copy_from_slice(&p[offset..offset + len]);
            offset += len;
        }
        t
    };

    let mut tape = Tape::new();
    let bound = bind_lstm(&mut tape, &theta);
    let h0 = tape.zeros(Shape::Matrix(1, d));
    let c0 = tape.zeros(Shape::Matrix(1, d));
    let (h1, _) = lstm_step(&mut tape, x_t, h0, c0, &bound);
    let loss = weighted(&mut tape, h1, &weights);
    tape.backward(loss);
    let ids = {
        let mut out = Vec::new();
        for gate in [&bound.input, &bound.forget, &bound.output, &bound.cell] {
            out.extend([gate.w_x, gate.w_h, gate.b]);
        }
        out
    };
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| tape.grad_or_zeros(id)).collect();

    let err = grad_check(
        |p| {
            let theta = rebuild(p);
            let mut tape = Tape::new();
            let bound = bind_lstm(&mut tape, &theta);
            let h0 = tape.zeros(Shape::Matrix(1, d));
            let c0 = tape.zeros(Shape::Matrix(1, d));
            let (h1, _) = lstm_step(&mut tape, x_t, h0, c0, &bound);
            let loss = weighted(&mut tape, h1, &weights);
            tape.value(loss)
        },
        &flat,
        &analytic,
        FD_STEP,
    );
    assert!(err < 1e-5, "one-step LSTM rel err {err}");
}

#[test]
fn chained_lstm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let d = 3;
    let theta = VarLstmParams::init(d, &mut rng);
    let flat: Vec<f64> = theta.arrays().into_iter().flatten().copied().collect();
    let inputs: Vec<f64> = uniform(&mut rng, 5, -1.0, 1.0);
    let weights = uniform(&mut rng, d, -1.0, 1.0);

    let run = |p: &[f64], tape: &mut Tape| -> (TensorId, Vec<TensorId>) {
        let mut theta = VarLstmParams::zeros(d);
        let mut offset = 0;
        for array in theta.arrays_mut() {
            let len = array.len();
            array.copy_from_slice(&p[offset..offset + len]);
            offset += len;
        }
        let bound = bind_lstm(tape, &theta);
        let mut h = tape.zeros(Shape::Matrix(1, d));
        let mut c = tape.zeros(Shape::Matrix(1, d));
        for &x in &inputs {
            let (hn, cn) = lstm_step(tape, x, h, c, &bound);
            h = hn;
            c = cn;
        }
        let loss = weighted(tape, h, &weights);
        let mut ids = Vec::new();
        for gate in [&bound.input, &bound.forget, &bound.output, &bound.cell] {
            ids.extend([gate.w_x, gate.w_h, gate.b]);
        }
        (loss, ids)
    };

    let mut tape = Tape::new();
    let (loss, ids) = run(&flat, &mut tape);
    tape.backward(loss);
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| tape.grad_or_zeros(id)).collect();
    let err = grad_check(
        |p| {
            let mut tape = Tape::new();
            let (loss, _) = run(p, &mut tape);
            tape.value(loss)
        },
        &flat,
        &analytic,
        FD_STEP,
    );
    assert!(err < 1e-5, "five-step LSTM rel err {err}");
}

fn tiny_objective_config(task: Task) -> ModelConfig {
    ModelConfig {
        num_vars: 2,
        num_steps: 3,
        d_h: 2,
        task,
        omega: 1.0,
        lr: 1e-3,
        batch_size: 2,
        epochs: 1,
        seed: 3,
        ablation: Ablation::Full,
        alignment_norm: AlignmentNorm::L2,
    }
}

fn random_sample(rng: &mut ChaCha8Rng, cfg: &ModelConfig, domain: Domain) -> TimeSeriesSample {
    let rows: Vec<Vec<f64>> = (0..cfg.num_vars)
        .map(|_| (0..cfg.num_steps).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let label = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    TimeSeriesSample::new(Mat::from_rows(&rows).unwrap(), Some(label), domain).unwrap()
}

fn full_objective_check(task: Task, norm: AlignmentNorm) {
    let cfg = ModelConfig { alignment_norm: norm, ..tiny_objective_config(task) };
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let params = ModelParams::init(&cfg, &mut rng);
    let src: Vec<TimeSeriesSample> =
        (0..2).map(|_| random_sample(&mut rng, &cfg, Domain::Source)).collect();
    let tgt: Vec<TimeSeriesSample> =
        (0..2).map(|_| random_sample(&mut rng, &cfg, Domain::Target)).collect();

    let objective = |flat: &[f64]| -> f64 {
        let mut p = params.clone();
        p.assign_from_flat(flat);
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &p);
        let src_refs: Vec<&TimeSeriesSample> = src.iter().collect();
        let tgt_refs: Vec<&TimeSeriesSample> = tgt.iter().collect();
        let parts = total_loss(&mut tape, &bound, &src_refs, &tgt_refs, &cfg).unwrap();
        tape.value(parts.total)
    };

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params);
    let src_refs: Vec<&TimeSeriesSample> = src.iter().collect();
    let tgt_refs: Vec<&TimeSeriesSample> = tgt.iter().collect();
    let parts = total_loss(&mut tape, &bound, &src_refs, &tgt_refs, &cfg).unwrap();
    tape.backward(parts.total);
    let analytic: Vec<f64> =
        bound.leaf_ids().iter().flat_map(|&id| tape.grad_or_zeros(id)).collect();

    let err = grad_check(objective, &params.flatten(), &analytic, FD_STEP);
    assert!(err < 1e-4, "full objective ({task:?}, {norm:?}) rel err {err}");
}

#[test]
fn full_objective_gradient_classification() {
    full_objective_check(Task::Classification, AlignmentNorm::L2);
}

#[test]
fn full_objective_gradient_regression() {
    full_objective_check(Task::Regression, AlignmentNorm::SquaredL2);
}
