//! Euclidean projection onto the probability simplex.
//!
//! `sparsemax(z) = argmin_{p in Δ} ||p - z||²` computed with the sorting
//! threshold algorithm. Unlike softmax the result carries exact zeros,
//! which is what makes the attention weights downstream sparse.

/// Project `z` onto the probability simplex.
///
/// Threshold algorithm: sort descending, find the largest support size
/// `k` with `1 + k·z_(k) > Σ_{j<=k} z_(j)`, set `τ = (Σ_{j<=k} z_(j) - 1)/k`
/// and clip `p_i = max(z_i - τ, 0)`.
///
/// Equal scores sort stably by original index, so ties resolve
/// deterministically. Panics on empty or non-finite input.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "sparsemax: empty input");
    assert!(
        z.iter().all(|v| v.is_finite()),
        "sparsemax: non-finite input {z:?}"
    );

    let mut sorted: Vec<f64> = z.to_vec();
    // Stable descending sort; total order is safe after the finite check.
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut support = 0usize;
    let mut cumulative = 0.0;
    let mut support_sum = 0.0;
    for (k, &value) in sorted.iter().enumerate() {
        let candidate = cumulative + value;
        if 1.0 + (k as f64 + 1.0) * value > candidate {
            support = k + 1;
            support_sum = candidate;
        }
        cumulative = candidate;
    }
    debug_assert!(support >= 1);

    let tau = (support_sum - 1.0) / support as f64;
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Backward rule for the projection.
///
/// With support `S = {i : p_i > 0}` the Jacobian-vector product is
/// `(v_i - mean_S(v))·1[i in S]`.
pub fn sparsemax_backward(output: &[f64], upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(output.len(), upstream.len());
    let support: Vec<usize> = (0..output.len()).filter(|&i| output[i] > 0.0).collect();
    let mean = support.iter().map(|&i| upstream[i]).sum::<f64>() / support.len() as f64;
    let mut grad = vec![0.0; output.len()];
    for &i in &support {
        grad[i] = upstream[i] - mean;
    }
    grad
}
