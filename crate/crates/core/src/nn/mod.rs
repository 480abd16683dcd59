//! Networks and optimizer for the holding policy.
//!
//! Both the actor and the critics embed the categorical state features
//! (bus, stop, hour, direction) through per-feature lookup tables, append
//! the continuous features, and push the result through a small dense
//! stack. The actor ends in a mean/log-std pair defining a Gaussian that
//! is squashed by tanh onto the bounded holding interval; the critics end
//! in a scalar value and additionally take the action as an input.
//!
//! Two forward paths exist on purpose: a plain one (no bookkeeping, used
//! for rollouts and bootstrap targets) and a taped one built on
//! [`Graph`] (used whenever gradients are needed). They perform the same
//! arithmetic in the same order, so their outputs are bit-identical; a
//! test pins that equivalence.

mod checkpoint;
mod graph;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, AdamBlob, Checkpoint, CheckpointError, MatBlob, NetBlob,
    CHECKPOINT_FORMAT,
};
pub use graph::{Graph, NodeId, NonFiniteLoss};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::env::{StateVector, STATE_VOCABS};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps the squash correction finite when tanh saturates to exactly 1.
pub const TANH_GUARD: f64 = 1e-12;
pub const HIDDEN_SIZES: [usize; 3] = [32, 32, 32];

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Lookup width for a categorical feature with `vocab` values.
pub fn embedding_dim(vocab: usize) -> usize {
    (vocab / 2).clamp(1, 50)
}

/// Width of the embedded state: all lookup widths plus the 3 continuous
/// features.
pub fn state_width() -> usize {
    STATE_VOCABS.iter().map(|&v| embedding_dim(v)).sum::<usize>() + 3
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(vocab: usize, rng: &mut R) -> EmbeddingTable {
        let dim = embedding_dim(vocab);
        let dist = Normal::new(0.0, 0.1).expect("valid normal");
        let weights = Array2::from_shape_fn((vocab, dim), |_| dist.sample(rng));
        EmbeddingTable { weights }
    }

    pub fn vocab(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Dense stack with rectified hidden layers and a linear last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    /// Each bias is a 1xK row, broadcast over the batch.
    pub biases: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Mlp {
        assert!(sizes.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random_range(-bound..=bound)
            }));
            biases.push(Array2::from_shape_fn((1, fan_out), |_| {
                rng.random_range(-bound..=bound)
            }));
        }
        Mlp { sizes: sizes.to_vec(), weights, biases }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let last = self.weights.len() - 1;
        let mut h = x.dot(&self.weights[0]) + &self.biases[0];
        for l in 1..=last {
            h = graph::relu_mat(&h);
            h = h.dot(&self.weights[l]) + &self.biases[l];
        }
        h
    }
}

/// Batched categorical indices and continuous features, columns aligned
/// with [`StateVector`].
#[derive(Debug, Clone)]
pub struct StateBatch {
    pub bus: Vec<usize>,
    pub stop: Vec<usize>,
    pub time: Vec<usize>,
    pub dir: Vec<usize>,
    pub numeric: Array2<f64>,
}

impl StateBatch {
    pub fn from_states<'a, I>(states: I) -> StateBatch
    where
        I: IntoIterator<Item = &'a StateVector>,
    {
        let mut bus = Vec::new();
        let mut stop = Vec::new();
        let mut time = Vec::new();
        let mut dir = Vec::new();
        let mut rows = Vec::new();
        for s in states {
            bus.push(s.bus_id);
            stop.push(s.stop_id);
            time.push(s.time_period);
            dir.push(s.direction.index());
            rows.push([s.h_f_norm, s.h_b_norm, s.seg_speed_norm]);
        }
        let mut numeric = Array2::zeros((rows.len(), 3));
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                numeric[[i, j]] = v;
            }
        }
        StateBatch { bus, stop, time, dir, numeric }
    }

    pub fn len(&self) -> usize {
        self.bus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bus.is_empty()
    }

    fn index_columns(&self) -> [&[usize]; 4] {
        [&self.bus, &self.stop, &self.time, &self.dir]
    }

    /// Sorted, deduplicated rows each lookup table sees in this batch.
    pub fn touched_rows(&self) -> [Vec<usize>; 4] {
        self.index_columns().map(|col| {
            let mut rows = col.to_vec();
            rows.sort_unstable();
            rows.dedup();
            rows
        })
    }
}

/// Plain embedded input: lookups concatenated, then continuous features.
pub fn embed_batch(tables: &[EmbeddingTable; 4], batch: &StateBatch) -> Array2<f64> {
    let n = batch.len();
    let width: usize = tables.iter().map(|t| t.dim()).sum::<usize>() + 3;
    let mut out = Array2::zeros((n, width));
    for i in 0..n {
        let mut off = 0;
        for (t, col) in tables.iter().zip(batch.index_columns()) {
            let idx = col[i];
            assert!(
                idx < t.vocab(),
                "embedding index {idx} out of range for vocabulary {}",
                t.vocab()
            );
            out.slice_mut(ndarray::s![i, off..off + t.dim()]).assign(&t.weights.row(idx));
            off += t.dim();
        }
        out.slice_mut(ndarray::s![i, off..]).assign(&batch.numeric.row(i));
    }
    out
}

/// Actions and their log-densities from one squashed-Gaussian draw.
#[derive(Debug, Clone)]
pub struct SquashOut {
    pub actions: Array2<f64>,
    pub log_probs: Array2<f64>,
}

fn squash_const(eps: &Array2<f64>, half_t: f64) -> Array2<f64> {
    eps.mapv(|e| -0.5 * e * e - 0.5 * ln_2pi() - half_t.ln())
}

/// Maps pre-squash draws u = mean + std*eps onto (0, T) and evaluates the
/// transformed log-density. Matches the taped version bit for bit.
pub fn squash_batch(
    mean: &Array2<f64>,
    log_std: &Array2<f64>,
    eps: &Array2<f64>,
    half_t: f64,
) -> SquashOut {
    let n = mean.nrows();
    let c = squash_const(eps, half_t);
    let mut actions = Array2::zeros((n, 1));
    let mut log_probs = Array2::zeros((n, 1));
    for i in 0..n {
        let ls = log_std[[i, 0]];
        let std = ls.exp();
        let u = mean[[i, 0]] + std * eps[[i, 0]];
        let t = u.tanh();
        actions[[i, 0]] = (t + 1.0) * half_t;
        let corr = (-(t * t) + (1.0 + TANH_GUARD)).ln();
        log_probs[[i, 0]] = (c[[i, 0]] - ls) - corr;
    }
    SquashOut { actions, log_probs }
}

/// Log-density of a specific action under a squashed Gaussian with the
/// given pre-squash mean and std. Used by normalization checks and
/// offline analysis.
pub fn squashed_log_prob(mean: f64, std: f64, action: f64, half_t: f64) -> f64 {
    let t = action / half_t - 1.0;
    let u = 0.5 * ((1.0 + t) / (1.0 - t)).ln();
    let z = (u - mean) / std;
    let gauss = -0.5 * z * z - std.ln() - 0.5 * ln_2pi();
    gauss - (-(t * t) + (1.0 + TANH_GUARD)).ln() - half_t.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub tables: [EmbeddingTable; 4],
    pub mlp: Mlp,
    /// Longest permitted hold in seconds; the squash target interval is
    /// (0, max_hold).
    pub max_hold: f64,
}

fn new_tables<R: Rng>(rng: &mut R) -> [EmbeddingTable; 4] {
    // Array init order must stay fixed: it defines the RNG draw order.
    let bus = EmbeddingTable::new(STATE_VOCABS[0], rng);
    let stop = EmbeddingTable::new(STATE_VOCABS[1], rng);
    let time = EmbeddingTable::new(STATE_VOCABS[2], rng);
    let dir = EmbeddingTable::new(STATE_VOCABS[3], rng);
    [bus, stop, time, dir]
}

impl PolicyNet {
    pub fn new<R: Rng>(max_hold: f64, rng: &mut R) -> PolicyNet {
        assert!(max_hold > 0.0);
        let tables = new_tables(rng);
        let mut sizes = vec![state_width()];
        sizes.extend_from_slice(&HIDDEN_SIZES);
        sizes.push(2);
        PolicyNet { tables, mlp: Mlp::new(&sizes, rng), max_hold }
    }

    pub fn half_t(&self) -> f64 {
        self.max_hold * 0.5
    }

    /// Mean and clamped log-std per batch row.
    pub fn forward(&self, batch: &StateBatch) -> (Array2<f64>, Array2<f64>) {
        let x = embed_batch(&self.tables, batch);
        let out = self.mlp.forward(&x);
        let mean = out.column(0).to_owned().insert_axis(Axis(1));
        let log_std = out
            .column(1)
            .mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .insert_axis(Axis(1));
        (mean, log_std)
    }

    pub fn sample_batch(&self, batch: &StateBatch, eps: &Array2<f64>) -> SquashOut {
        let (mean, log_std) = self.forward(batch);
        squash_batch(&mean, &log_std, eps, self.half_t())
    }

    /// One stochastic action for a single state; returns (action, log_prob).
    pub fn sample_one<R: Rng>(&self, state: &StateVector, rng: &mut R) -> (f64, f64) {
        let batch = StateBatch::from_states([state]);
        let eps_dist = Normal::new(0.0, 1.0).expect("valid normal");
        let eps = Array2::from_elem((1, 1), eps_dist.sample(rng));
        let out = self.sample_batch(&batch, &eps);
        (out.actions[[0, 0]], out.log_probs[[0, 0]])
    }

    /// Deterministic action: the squashed distribution mean.
    pub fn mean_action(&self, state: &StateVector) -> f64 {
        let batch = StateBatch::from_states([state]);
        let (mean, _) = self.forward(&batch);
        (mean[[0, 0]].tanh() + 1.0) * self.half_t()
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p: Vec<&Array2<f64>> = self.tables.iter().map(|t| &t.weights).collect();
        for (w, b) in self.mlp.weights.iter().zip(&self.mlp.biases) {
            p.push(w);
            p.push(b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p: Vec<&mut Array2<f64>> =
            self.tables.iter_mut().map(|t| &mut t.weights).collect();
        for (w, b) in self.mlp.weights.iter_mut().zip(self.mlp.biases.iter_mut()) {
            p.push(w);
            p.push(b);
        }
        p
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.dim()).collect()
    }

    pub fn register(&self, g: &mut Graph) -> NetIds {
        register_net(g, &self.tables, &self.mlp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub tables: [EmbeddingTable; 4],
    pub mlp: Mlp,
}

impl CriticNet {
    pub fn new<R: Rng>(rng: &mut R) -> CriticNet {
        let tables = new_tables(rng);
        let mut sizes = vec![state_width() + 1];
        sizes.extend_from_slice(&HIDDEN_SIZES);
        sizes.push(1);
        CriticNet { tables, mlp: Mlp::new(&sizes, rng) }
    }

    /// Plain state-action value, one scalar per batch row.
    pub fn value(&self, batch: &StateBatch, actions: &Array2<f64>) -> Array2<f64> {
        let e = embed_batch(&self.tables, batch);
        let x = ndarray::concatenate(Axis(1), &[e.view(), actions.view()])
            .expect("row counts match");
        self.mlp.forward(&x)
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p: Vec<&Array2<f64>> = self.tables.iter().map(|t| &t.weights).collect();
        for (w, b) in self.mlp.weights.iter().zip(&self.mlp.biases) {
            p.push(w);
            p.push(b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p: Vec<&mut Array2<f64>> =
            self.tables.iter_mut().map(|t| &mut t.weights).collect();
        for (w, b) in self.mlp.weights.iter_mut().zip(self.mlp.biases.iter_mut()) {
            p.push(w);
            p.push(b);
        }
        p
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.dim()).collect()
    }

    pub fn register(&self, g: &mut Graph) -> NetIds {
        register_net(g, &self.tables, &self.mlp)
    }
}

/// Tape handles for one network's parameters, in the canonical parameter
/// order (tables, then weight/bias per layer).
pub struct NetIds {
    pub tables: [NodeId; 4],
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl NetIds {
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.tables.to_vec();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            ids.push(*w);
            ids.push(*b);
        }
        ids
    }
}

fn register_net(g: &mut Graph, tables: &[EmbeddingTable; 4], mlp: &Mlp) -> NetIds {
    let t = [
        g.leaf(tables[0].weights.clone()),
        g.leaf(tables[1].weights.clone()),
        g.leaf(tables[2].weights.clone()),
        g.leaf(tables[3].weights.clone()),
    ];
    let weights = mlp.weights.iter().map(|w| g.leaf(w.clone())).collect();
    let biases = mlp.biases.iter().map(|b| g.leaf(b.clone())).collect();
    NetIds { tables: t, weights, biases }
}

/// Taped version of [`embed_batch`] against one network's tables.
pub fn graph_embed(g: &mut Graph, ids: &NetIds, batch: &StateBatch) -> NodeId {
    let parts = [
        g.gather(ids.tables[0], &batch.bus),
        g.gather(ids.tables[1], &batch.stop),
        g.gather(ids.tables[2], &batch.time),
        g.gather(ids.tables[3], &batch.dir),
        g.leaf(batch.numeric.clone()),
    ];
    g.concat(&parts)
}

/// Taped version of [`Mlp::forward`].
pub fn graph_mlp(g: &mut Graph, ids: &NetIds, x: NodeId) -> NodeId {
    let last = ids.weights.len() - 1;
    let mut h = g.matmul(x, ids.weights[0]);
    h = g.add_row(h, ids.biases[0]);
    for l in 1..=last {
        h = g.relu(h);
        h = g.matmul(h, ids.weights[l]);
        h = g.add_row(h, ids.biases[l]);
    }
    h
}

/// Taped critic value for a state batch and an action node.
pub fn graph_critic_value(
    g: &mut Graph,
    ids: &NetIds,
    batch: &StateBatch,
    actions: NodeId,
) -> NodeId {
    let e = graph_embed(g, ids, batch);
    let x = g.concat(&[e, actions]);
    graph_mlp(g, ids, x)
}

/// Tape handles for a reparameterized policy draw.
pub struct PolicyHeadIds {
    pub mean: NodeId,
    pub log_std: NodeId,
    pub action: NodeId,
    pub log_prob: NodeId,
}

/// Taped policy head: the same draw as [`squash_batch`] given identical
/// `eps`, with gradients flowing to mean and log-std.
pub fn graph_policy_heads(
    g: &mut Graph,
    ids: &NetIds,
    batch: &StateBatch,
    eps: &Array2<f64>,
    half_t: f64,
) -> PolicyHeadIds {
    let x = graph_embed(g, ids, batch);
    let out = graph_mlp(g, ids, x);
    let mean = g.col(out, 0);
    let log_std_raw = g.col(out, 1);
    let log_std = g.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
    let std = g.exp(log_std);
    let eps_id = g.leaf(eps.clone());
    let noise = g.mul(std, eps_id);
    let u = g.add(mean, noise);
    let t = g.tanh(u);
    let shifted = g.add_const(t, 1.0);
    let action = g.scale(shifted, half_t);
    let tt = g.mul(t, t);
    let neg = g.scale(tt, -1.0);
    let inside = g.add_const(neg, 1.0 + TANH_GUARD);
    let corr = g.ln(inside);
    let c = g.leaf(squash_const(eps, half_t));
    let partial = g.sub(c, log_std);
    let log_prob = g.sub(partial, corr);
    PolicyHeadIds { mean, log_std, action, log_prob }
}

/// Adam with bias correction. One instance per optimized network, moments
/// aligned with the canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> AdamState {
        AdamState {
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before updating any parameter slots.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    pub fn update_dense(&mut self, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        assert_eq!(param.dim(), grad.dim(), "gradient shape mismatch");
        assert!(self.step > 0, "begin_step before updating");
        let (bc1, bc2) = self.corrections();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        ndarray::Zip::from(param)
            .and(&mut self.m[slot])
            .and(&mut self.v[slot])
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
    }

    /// Updates only the listed rows, leaving every other row's parameters
    /// and moments untouched. Bias correction uses the shared step count.
    pub fn update_rows(
        &mut self,
        slot: usize,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        rows: &[usize],
        lr: f64,
    ) {
        assert_eq!(param.dim(), grad.dim(), "gradient shape mismatch");
        assert!(self.step > 0, "begin_step before updating");
        let (bc1, bc2) = self.corrections();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for &r in rows {
            ndarray::Zip::from(param.row_mut(r))
                .and(self.m[slot].row_mut(r))
                .and(self.v[slot].row_mut(r))
                .and(grad.row(r))
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}
