//! Synthetic domain-shift benchmark: source/target dataset pairs drawn
//! from one shared sparse lagged causal graph.
//!
//! The generating mechanism is identical across domains; a domain only
//! adds a constant shift to every edge lag (response time), widens the
//! random start offset (inactivity prepended before the mechanism kicks
//! in), and may rescale the noise. Root variables are AR(1) drivers,
//! children are lagged weighted sums of their parents plus noise, and
//! the label is a threshold (or sigmoid value) of a fixed linear read of
//! the final timestep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::series::{Domain, Mat, Task, TimeSeriesSample};
use crate::{Error, Result};

/// AR(1) coefficient of root drivers.
pub const AR_COEF: f64 = 0.6;

/// One lagged edge `parent → child` with weight and base lag (≥ 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
    pub lag: usize,
}

/// Linear read of the final timestep that defines the label.
///
/// `z = Σ weights·x[vars][N-1] + bias`; classification labels are
/// `1[σ(z) > 0.5]`, regression targets are `σ(z)` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub vars: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// The shared generating mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraphSpec {
    pub num_vars: usize,
    pub edges: Vec<CausalEdge>,
    pub noise_std: f64,
    pub label_rule: LabelRule,
    pub task: Task,
}

/// What a domain changes about the mechanism: response time and offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Added to every edge lag.
    pub lag_shift: i64,
    /// Inclusive range of the per-sample start delay.
    pub offset_range: (usize, usize),
    /// Multiplier on the graph's noise std.
    pub noise_scale: f64,
}

impl CausalGraphSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.num_vars;
        if m == 0 {
            return Err(Error::Invalid("graph needs at least one variable".into()));
        }
        if self.edges.len() > 2 * m {
            return Err(Error::Invalid(format!(
                "{} edges exceeds the sparsity cap of {}",
                self.edges.len(),
                2 * m
            )));
        }
        for e in &self.edges {
            if e.parent >= m || e.child >= m {
                return Err(Error::Invalid(format!(
                    "edge {} -> {} references a variable >= {m}",
                    e.parent, e.child
                )));
            }
            if e.lag == 0 {
                return Err(Error::Invalid(
                    "instantaneous edges are not allowed (lag must be >= 1)".into(),
                ));
            }
            if !e.weight.is_finite() {
                return Err(Error::NonFinite("edge weight".into()));
            }
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Invalid("noise_std must be positive".into()));
        }
        let rule = &self.label_rule;
        if rule.vars.len() != rule.weights.len() || rule.vars.is_empty() {
            return Err(Error::Invalid("label rule vars/weights mismatch".into()));
        }
        if rule.vars.iter().any(|&v| v >= m) {
            return Err(Error::Invalid("label rule references a variable out of range".into()));
        }
        Ok(())
    }

    fn has_parents(&self, var: usize) -> bool {
        self.edges.iter().any(|e| e.child == var)
    }
}

impl DomainSpec {
    pub fn validate(&self, graph: &CausalGraphSpec) -> Result<()> {
        let (a, b) = self.offset_range;
        if a > b {
            return Err(Error::Invalid(format!("offset range [{a}, {b}] is reversed")));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Invalid("noise_scale must be >= 0".into()));
        }
        for e in &graph.edges {
            if e.lag as i64 + self.lag_shift < 1 {
                return Err(Error::Invalid(format!(
                    "lag shift {} drives edge {} -> {} below lag 1",
                    self.lag_shift, e.parent, e.child
                )));
            }
        }
        Ok(())
    }

    fn max_effective_lag(&self, graph: &CausalGraphSpec) -> usize {
        graph
            .edges
            .iter()
            .map(|e| (e.lag as i64 + self.lag_shift) as usize)
            .max()
            .unwrap_or(1)
    }
}

/// Deterministic mechanism: turn a noise matrix and an offset into a
/// series. Before the offset every variable is its bare noise; from the
/// offset on, roots follow AR(1) and children sum their lagged parents.
/// Reads that reach before the start of the series contribute zero.
pub fn build_series(graph: &CausalGraphSpec, dom: &DomainSpec, offset: usize, noise: &Mat) -> Mat {
    let m = graph.num_vars;
    let n = noise.cols;
    debug_assert_eq!(noise.rows, m);
    let mut x = Mat::zeros(m, n);
    let read = |x: &Mat, var: usize, t: i64| -> f64 {
        if t < 0 {
            0.0
        } else {
            x.get(var, t as usize)
        }
    };
    for t in 0..n {
        for i in 0..m {
            let value = if t < offset {
                noise.get(i, t)
            } else if graph.has_parents(i) {
                let mut total = noise.get(i, t);
                for e in graph.edges.iter().filter(|e| e.child == i) {
                    let lag = e.lag as i64 + dom.lag_shift;
                    total += e.weight * read(&x, e.parent, t as i64 - lag);
                }
                total
            } else {
                AR_COEF * read(&x, i, t as i64 - 1) + noise.get(i, t)
            };
            x.set(i, t, value);
        }
    }
    x
}

/// The mechanism's noise-free value of one variable at step `t`:
/// lagged parent sum for children, the AR mean for roots. This is what
/// the emitted value would be without its own innovation, so a label
/// built on it is recoverable only through temporal context, not by
/// reading the final observation alone.
pub fn mechanism_value(graph: &CausalGraphSpec, dom: &DomainSpec, series: &Mat, var: usize, t: usize) -> f64 {
    let read = |v: usize, s: i64| -> f64 {
        if s < 0 {
            0.0
        } else {
            series.get(v, s as usize)
        }
    };
    if graph.has_parents(var) {
        graph
            .edges
            .iter()
            .filter(|e| e.child == var)
            .map(|e| e.weight * read(e.parent, t as i64 - (e.lag as i64 + dom.lag_shift)))
            .sum()
    } else {
        AR_COEF * read(var, t as i64 - 1)
    }
}

/// Label for a finished series: a linear read of the label variables'
/// noise-free mechanism values at the final step, thresholded for
/// classification or squashed for regression.
pub fn label_of(graph: &CausalGraphSpec, dom: &DomainSpec, series: &Mat) -> f64 {
    let rule = &graph.label_rule;
    let last = series.cols - 1;
    let z: f64 = rule
        .vars
        .iter()
        .zip(&rule.weights)
        .map(|(&v, &w)| w * mechanism_value(graph, dom, series, v, last))
        .sum::<f64>()
        + rule.bias;
    let sigma = 1.0 / (1.0 + (-z).exp());
    match graph.task {
        Task::Classification => {
            if sigma > 0.5 {
                1.0
            } else {
                0.0
            }
        }
        Task::Regression => sigma,
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box–Muller; u1 bounded away from 0 so ln stays finite.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draw `count` samples of length `len`.
///
/// Each sample has its own RNG stream keyed by `(seed, index)`: the
/// noise tensor and offset draw order is fixed, so two domains that
/// share a seed and offset range differ only through the mechanism.
pub fn generate(
    graph: &CausalGraphSpec,
    dom: &DomainSpec,
    count: usize,
    len: usize,
    seed: u64,
    domain: Domain,
) -> Result<Vec<TimeSeriesSample>> {
    graph.validate()?;
    dom.validate(graph)?;
    let needed = dom.max_effective_lag(graph) + dom.offset_range.1;
    if len <= needed {
        return Err(Error::Invalid(format!(
            "series length {len} too short: need > max lag + max offset = {needed}"
        )));
    }

    let m = graph.num_vars;
    let std = graph.noise_std * dom.noise_scale;
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let offset = rng.gen_range(dom.offset_range.0..=dom.offset_range.1);
        let mut noise = Mat::zeros(m, len);
        for i in 0..m {
            for t in 0..len {
                noise.set(i, t, std * standard_normal(&mut rng));
            }
        }
        let series = build_series(graph, dom, offset, &noise);
        let label = label_of(graph, dom, &series);
        samples.push(TimeSeriesSample::new(series, Some(label), domain)?);
    }
    Ok(samples)
}

/// Seeded shuffle split; classification splits are label-stratified with
/// largest-remainder rounding so each split's class ratio stays within
/// one sample of the global ratio.
pub fn split(
    samples: Vec<TimeSeriesSample>,
    train_frac: f64,
    seed: u64,
    task: Task,
) -> Result<(Vec<TimeSeriesSample>, Vec<TimeSeriesSample>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Invalid(format!("train fraction {train_frac} not in (0, 1)")));
    }
    let n = samples.len();
    let train_total = (train_frac * n as f64).round() as usize;
    if train_total == 0 || train_total == n {
        return Err(Error::Invalid(format!(
            "split of {n} samples at {train_frac} leaves one side empty"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match task {
        Task::Classification => {
            if samples.iter().any(|s| s.label.is_none()) {
                return Err(Error::Invalid("stratified split needs labels on every sample".into()));
            }
            let positives: Vec<usize> =
                (0..n).filter(|&i| samples[i].label == Some(1.0)).collect();
            let negatives: Vec<usize> =
                (0..n).filter(|&i| samples[i].label != Some(1.0)).collect();
            vec![negatives, positives]
        }
        Task::Regression => vec![(0..n).collect()],
    };

    // Largest-remainder quotas per group, summing exactly to train_total.
    let quotas_exact: Vec<f64> =
        groups.iter().map(|g| train_frac * g.len() as f64).collect();
    let mut quotas: Vec<usize> = quotas_exact.iter().map(|&q| q.floor() as usize).collect();
    let mut leftover = train_total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas_exact[a] - quotas_exact[a].floor();
        let fb = quotas_exact[b] - quotas_exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &g in &order {
        if leftover == 0 {
            break;
        }
        if quotas[g] < groups[g].len() {
            quotas[g] += 1;
            leftover -= 1;
        }
    }

    let mut train_indices = Vec::with_capacity(train_total);
    for (group, &quota) in groups.iter().zip(&quotas) {
        let mut shuffled = group.clone();
        shuffle(&mut shuffled, &mut rng);
        train_indices.extend_from_slice(&shuffled[..quota]);
    }
    train_indices.sort_unstable();

    let mut in_train = vec![false; n];
    for &i in &train_indices {
        in_train[i] = true;
    }
    let mut train = Vec::with_capacity(train_total);
    let mut test = Vec::with_capacity(n - train_total);
    for (i, sample) in samples.into_iter().enumerate() {
        if in_train[i] {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    Ok((train, test))
}

/// Fisher–Yates with the crate's seeded RNG.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// The default benchmark mechanism: six variables, two AR roots, four
/// children each driven by both roots at distinct lags. The moderate
/// edge weights leave each child's final value dominated by its own
/// innovation, so recovering the label requires reading the parents at
/// the right lags, which is exactly what a domain's lag shift breaks.
pub fn default_benchmark_graph() -> CausalGraphSpec {
    CausalGraphSpec {
        num_vars: 6,
        edges: vec![
            CausalEdge { parent: 0, child: 2, weight: 0.6, lag: 1 },
            CausalEdge { parent: 1, child: 2, weight: -0.48, lag: 2 },
            CausalEdge { parent: 1, child: 3, weight: 0.6, lag: 1 },
            CausalEdge { parent: 0, child: 3, weight: 0.42, lag: 3 },
            CausalEdge { parent: 0, child: 4, weight: 0.54, lag: 2 },
            CausalEdge { parent: 1, child: 4, weight: -0.54, lag: 1 },
            CausalEdge { parent: 1, child: 5, weight: 0.48, lag: 3 },
            CausalEdge { parent: 0, child: 5, weight: -0.6, lag: 1 },
        ],
        noise_std: 0.45,
        label_rule: LabelRule {
            vars: vec![2, 3, 4, 5],
            weights: vec![1.1, -0.9, 1.0, -1.2],
            bias: 0.0,
        },
        task: Task::Classification,
    }
}

pub fn default_source_domain() -> DomainSpec {
    DomainSpec { lag_shift: 0, offset_range: (0, 2), noise_scale: 1.0 }
}

pub fn default_target_domain() -> DomainSpec {
    DomainSpec { lag_shift: 2, offset_range: (2, 5), noise_scale: 1.0 }
}
