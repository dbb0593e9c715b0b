//! Sparse associative structure discovery.
//!
//! Intra-variable attention scores every candidate segment length of a
//! variable against all others through shared query/key projections,
//! averages the scores per length, and sparsemaxes them into weights
//! `α^i` over lengths; the weighted value projection gives the segment
//! summary `Z^i`.
//!
//! Inter-variable attention measures, for each target variable `i`, the
//! cosine association between `Z^i` and every other variable's segment
//! representation at every lag, then sparsemaxes the concatenated
//! `(M-1)·N` scores jointly so candidate (variable, lag) pairs compete
//! with each other. The weights `β^{ij}_τ` are the reconstructed sparse
//! structure; their lag-sums form an `M × M` adjacency-style matrix for
//! inspection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::series::Mat;
use crate::tape::{Shape, Tape, TensorId};

/// Norm guard for cosine scores; keeps zero vectors finite.
pub const COSINE_EPS: f64 = 1e-8;

/// Shared query/key/value projections, one triple for the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub d_h: usize,
    /// `[d_h × d_h]` each.
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

impl ProjectionParams {
    pub fn init(d_h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut draw = || (0..d_h * d_h).map(|_| rng.gen_range(-bound..bound)).collect();
        ProjectionParams { d_h, w_q: draw(), w_k: draw(), w_v: draw() }
    }

    pub fn zeros(d_h: usize) -> Self {
        ProjectionParams { d_h, w_q: vec![0.0; d_h * d_h], w_k: vec![0.0; d_h * d_h], w_v: vec![0.0; d_h * d_h] }
    }

    pub fn param_count(&self) -> usize {
        3 * self.d_h * self.d_h
    }

    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        vec![&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

#[derive(Clone, Copy)]
pub struct BoundProjection {
    pub d_h: usize,
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
}

pub fn bind_projection(tape: &mut Tape, p: &ProjectionParams) -> BoundProjection {
    let d = p.d_h;
    BoundProjection {
        d_h: d,
        w_q: tape.leaf(p.w_q.clone(), Shape::Matrix(d, d)),
        w_k: tape.leaf(p.w_k.clone(), Shape::Matrix(d, d)),
        w_v: tape.leaf(p.w_v.clone(), Shape::Matrix(d, d)),
    }
}

/// Segment-length attention for one sample.
///
/// `banks[i]` is variable `i`'s `[N × d_h]` window bank. Returns per
/// variable the simplex weights `α^i` over lengths and the weighted
/// summary `Z^i = Σ_τ α^i_τ (h^i_τ W^V)`.
pub fn intra_attention(
    tape: &mut Tape,
    banks: &[TensorId],
    proj: &BoundProjection,
) -> (Vec<TensorId>, Vec<TensorId>) {
    let scale = 1.0 / (proj.d_h as f64).sqrt();
    let mut alphas = Vec::with_capacity(banks.len());
    let mut summaries = Vec::with_capacity(banks.len());
    for &bank in banks {
        let n = match tape.shape(bank) {
            Shape::Matrix(n, _) => n,
            other => panic!("bank must be a matrix, got {other:?}"),
        };
        let queries = tape.matmul(bank, proj.w_q);
        let keys = tape.matmul(bank, proj.w_k);
        let values = tape.matmul(bank, proj.w_v);
        let keys_t = tape.transpose(keys);
        let scores = tape.matmul(queries, keys_t);
        let averaged = tape.mean(scores, Some(1));
        let u = tape.scale(averaged, scale);
        let alpha = tape.sparsemax(u);
        let alpha_row = tape.reshape(alpha, Shape::Matrix(1, n));
        let z_row = tape.matmul(alpha_row, values);
        let z = tape.reshape(z_row, Shape::Vector(proj.d_h));
        alphas.push(alpha);
        summaries.push(z);
    }
    (alphas, summaries)
}

/// Lag-aware structure attention for one sample.
///
/// For each target variable `i` the association of every other
/// variable `j` at every lag `τ` is `cos(Z^i, h^j_τ)`; the concatenated
/// `(M-1)·N` scores are normalized jointly with sparsemax, giving
/// `β^i`. The structure summary is
/// `U^i = Σ_{j≠i} Σ_τ β^{ij}_τ h^j_τ`.
///
/// Block layout of `β^i`: source variables in ascending index order
/// skipping `i`, each block running over lags `τ = 1..N`.
///
/// With a single variable there is nothing to attend to: `β` is empty
/// and `U^0` is the zero vector.
pub fn inter_attention(
    tape: &mut Tape,
    summaries: &[TensorId],
    banks: &[TensorId],
    eps: f64,
) -> (Vec<TensorId>, Vec<TensorId>) {
    let m = summaries.len();
    assert_eq!(m, banks.len());
    let d_h = match tape.shape(summaries[0]) {
        Shape::Vector(d) => d,
        other => panic!("summary must be a vector, got {other:?}"),
    };
    if m == 1 {
        let zero = tape.zeros(Shape::Vector(d_h));
        return (Vec::new(), vec![zero]);
    }

    let n = match tape.shape(banks[0]) {
        Shape::Matrix(n, _) => n,
        other => panic!("bank must be a matrix, got {other:?}"),
    };

    let mut betas = Vec::with_capacity(m);
    let mut structures = Vec::with_capacity(m);
    for i in 0..m {
        let others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        let scores: Vec<TensorId> = others
            .iter()
            .map(|&j| tape.cosine_rows(banks[j], summaries[i], eps))
            .collect();
        let concatenated = tape.concat(&scores);
        let beta = tape.sparsemax(concatenated);

        let mut acc: Option<TensorId> = None;
        for (block, &j) in others.iter().enumerate() {
            let weights = tape.slice(beta, block * n, (block + 1) * n);
            let weights_row = tape.reshape(weights, Shape::Matrix(1, n));
            let contribution = tape.matmul(weights_row, banks[j]);
            acc = Some(match acc {
                None => contribution,
                Some(prev) => tape.add(prev, contribution),
            });
        }
        let u = tape.reshape(acc.unwrap(), Shape::Vector(d_h));
        betas.push(beta);
        structures.push(u);
    }
    (betas, structures)
}

/// Lag-blind variant: one cosine score per variable pair from the
/// summaries alone, `β^i = sparsemax(e^{i·})`, `U^i = Σ_j β^{ij} Z^j`.
/// Kept as a reference point for what ignoring lags does; the model
/// always uses the lag-aware [`inter_attention`].
pub fn inter_attention_lag_blind(
    tape: &mut Tape,
    summaries: &[TensorId],
    eps: f64,
) -> (Vec<TensorId>, Vec<TensorId>) {
    let m = summaries.len();
    let d_h = match tape.shape(summaries[0]) {
        Shape::Vector(d) => d,
        other => panic!("summary must be a vector, got {other:?}"),
    };
    if m == 1 {
        let zero = tape.zeros(Shape::Vector(d_h));
        return (Vec::new(), vec![zero]);
    }
    let mut betas = Vec::with_capacity(m);
    let mut structures = Vec::with_capacity(m);
    for i in 0..m {
        let others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        let scores: Vec<TensorId> = others
            .iter()
            .map(|&j| tape.cosine(summaries[i], summaries[j], eps))
            .collect();
        let concatenated = tape.concat(&scores);
        let beta = tape.sparsemax(concatenated);
        let mut acc: Option<TensorId> = None;
        for (k, &j) in others.iter().enumerate() {
            let w = tape.slice(beta, k, k + 1);
            let w_row = tape.reshape(w, Shape::Matrix(1, 1));
            let z_row = tape.reshape(summaries[j], Shape::Matrix(1, d_h));
            let contribution = tape.matmul(w_row, z_row);
            acc = Some(match acc {
                None => contribution,
                Some(prev) => tape.add(prev, contribution),
            });
        }
        let u = tape.reshape(acc.unwrap(), Shape::Vector(d_h));
        betas.push(beta);
        structures.push(u);
    }
    (betas, structures)
}

/// Final representation `H = [H^1; ...; H^M]` with `H^i = [Z^i; U^i]`.
pub fn build_representation(tape: &mut Tape, summaries: &[TensorId], structures: &[TensorId]) -> TensorId {
    assert_eq!(summaries.len(), structures.len(), "Z/U count mismatch");
    let parts: Vec<TensorId> = summaries
        .iter()
        .zip(structures)
        .flat_map(|(&z, &u)| [z, u])
        .collect();
    tape.concat(&parts)
}

/// Per-sample segment-length weights, one simplex row per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraWeights {
    pub alpha: Mat,
}

impl IntraWeights {
    pub fn from_tape(tape: &Tape, alphas: &[TensorId]) -> Self {
        let rows: Vec<Vec<f64>> = alphas.iter().map(|&a| tape.values(a).to_vec()).collect();
        IntraWeights { alpha: Mat::from_rows(&rows).expect("alpha rows") }
    }
}

/// Per-sample structure weights; row `i` holds the flattened
/// `(M-1)·N` simplex over (source variable, lag) pairs, source
/// variables ascending with `i` itself excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct InterWeights {
    pub num_vars: usize,
    pub num_steps: usize,
    rows: Vec<Vec<f64>>,
}

impl InterWeights {
    pub fn from_tape(tape: &Tape, betas: &[TensorId], num_vars: usize, num_steps: usize) -> Self {
        let rows: Vec<Vec<f64>> = betas.iter().map(|&b| tape.values(b).to_vec()).collect();
        if num_vars > 1 {
            debug_assert_eq!(rows.len(), num_vars);
            debug_assert!(rows.iter().all(|r| r.len() == (num_vars - 1) * num_steps));
        }
        InterWeights { num_vars, num_steps, rows }
    }

    pub fn empty(num_vars: usize, num_steps: usize) -> Self {
        InterWeights { num_vars, num_steps, rows: Vec::new() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `β^{ij}_τ` with `tau` zero-indexed (segment length `tau + 1`).
    ///
    /// The diagonal is not represented; asking for it is a bug.
    pub fn get(&self, i: usize, j: usize, tau: usize) -> f64 {
        assert_ne!(i, j, "beta has no self-association entries");
        let block = if j < i { j } else { j - 1 };
        self.rows[i][block * self.num_steps + tau]
    }
}

/// Lag-summed structure weights: `A[i][j] = Σ_τ β^{ij}_τ`, zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMatrix {
    pub a: Mat,
}

impl StructureMatrix {
    pub fn zeros(m: usize) -> Self {
        StructureMatrix { a: Mat::zeros(m, m) }
    }

    /// Elementwise mean of per-sample matrices.
    pub fn mean_of(matrices: &[StructureMatrix]) -> Self {
        assert!(!matrices.is_empty());
        let m = matrices[0].a.rows;
        let mut out = Mat::zeros(m, m);
        for sm in matrices {
            for k in 0..out.data.len() {
                out.data[k] += sm.a.data[k];
            }
        }
        out.data.iter_mut().for_each(|v| *v /= matrices.len() as f64);
        StructureMatrix { a: out }
    }
}

/// Collapse lags out of the structure weights.
pub fn aggregate_structure(beta: &InterWeights) -> StructureMatrix {
    let m = beta.num_vars;
    let mut a = Mat::zeros(m, m);
    if beta.is_empty() {
        return StructureMatrix { a };
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let total: f64 = (0..beta.num_steps).map(|tau| beta.get(i, j, tau)).sum();
                a.set(i, j, total);
            }
        }
    }
    StructureMatrix { a }
}
