//! Entropy-regularized actor-critic training over simulated service days.
//!
//! The trainer alternates two phases. A rollout phase runs one full day
//! with the current policy sampling holds stochastically, then converts
//! the log into replay tuples. An update phase then takes one gradient
//! step per decision the day produced: each step samples a minibatch,
//! refits both critics against bootstrapped soft targets, nudges the
//! policy against the smaller critic plus an entropy bonus, retunes the
//! temperature toward a target entropy, and lets the target critics trail
//! the online ones. All randomness is drawn from seeded counter streams,
//! so a (scenario, seed) pair replays exactly.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::env::{
    resolve_transitions, HoldAction, HoldingController, ReplayBuffer, StateVector, Transition,
};
use crate::nn::{
    graph_critic_value, graph_policy_heads, AdamState, Checkpoint, CheckpointError, CriticNet,
    Graph, PolicyNet, StateBatch, CHECKPOINT_FORMAT,
};
use crate::scenario::{ScenarioConfig, ScenarioError};
use crate::sim::{run_episode, SimError};
use crate::stochastic::{RngStream, StreamKind};

pub const DEFAULT_EVAL_ROLLOUTS: usize = 15;

#[derive(Debug, Clone)]
pub struct SacConfig {
    pub gamma: f64,
    /// Target-network trailing rate per update.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Desired policy entropy; the temperature chases it.
    pub target_entropy: f64,
    /// No gradient steps until the buffer holds at least this many tuples.
    pub warmup_tuples: usize,
    pub alpha_init: f64,
    pub replay_capacity: usize,
    /// Gradient steps per episode; default follows the episode's own
    /// decision count.
    pub updates_per_episode: Option<usize>,
}

impl Default for SacConfig {
    fn default() -> SacConfig {
        SacConfig {
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-5,
            batch_size: 2048,
            target_entropy: -1.0,
            warmup_tuples: 5000,
            alpha_init: 0.2,
            replay_capacity: 1_000_000,
            updates_per_episode: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |detail: String| ScenarioError::Invalid { file: "config".into(), detail };
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(bad(format!("discount must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(bad(format!("trailing rate must lie in (0,1], got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch size must be at least 1".into()));
        }
        let positive = self.lr.is_finite()
            && self.lr > 0.0
            && self.alpha_init.is_finite()
            && self.alpha_init > 0.0;
        if !positive {
            return Err(bad("learning rate and initial temperature must be positive".into()));
        }
        if self.replay_capacity < self.batch_size {
            return Err(bad("replay capacity smaller than one batch".into()));
        }
        Ok(())
    }
}

/// A gradient phase produced a NaN or infinity; training must stop.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("{phase} produced a non-finite value: {value}")]
pub struct Diverged {
    pub phase: &'static str,
    pub value: f64,
}

/// Soft one-step bootstrap: y = r + gamma (1-done) (min(q1', q2') - alpha log pi(a'|s')).
pub fn critic_targets(
    rewards: &Array2<f64>,
    dones: &Array2<f64>,
    q1_next: &Array2<f64>,
    q2_next: &Array2<f64>,
    logp_next: &Array2<f64>,
    alpha: f64,
    gamma: f64,
) -> Array2<f64> {
    let mut y = rewards.clone();
    ndarray::Zip::from(&mut y)
        .and(dones)
        .and(q1_next)
        .and(q2_next)
        .and(logp_next)
        .for_each(|y, &d, &q1, &q2, &lp| {
            *y += gamma * (1.0 - d) * (q1.min(q2) - alpha * lp);
        });
    y
}

/// target' = (1 - tau) target + tau online, elementwise over every
/// parameter.
pub fn polyak_update(target: &mut CriticNet, online: &CriticNet, tau: f64) {
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        t.zip_mut_with(o, |t, &o| *t = (1.0 - tau) * *t + tau * o);
    }
}

/// Per-update loss readings.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

/// Per-episode training record; one metrics CSV row.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub cum_reward: f64,
    pub alpha: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub buffer_size: usize,
}

pub const METRICS_CSV_HEADER: &str = "episode,cum_reward,alpha,actor_loss,critic_loss,buffer_size";

pub fn write_metrics_csv(path: &Path, metrics: &[EpisodeMetrics]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{METRICS_CSV_HEADER}")?;
    for m in metrics {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            m.episode, m.cum_reward, m.alpha, m.actor_loss, m.critic_loss, m.buffer_size
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: Vec<EpisodeMetrics>,
    /// Episode during which a non-finite loss stopped training.
    pub diverged: Option<u64>,
}

/// Picks holds with a policy network. Stochastic mode draws from the
/// squashed Gaussian; greedy mode takes its mean.
pub struct PolicyController<'a> {
    policy: &'a PolicyNet,
    rng: Option<RngStream>,
}

impl<'a> PolicyController<'a> {
    pub fn stochastic(policy: &'a PolicyNet, seed: u64, episode: u64) -> PolicyController<'a> {
        PolicyController {
            policy,
            rng: Some(RngStream::with_index(seed, StreamKind::Policy, episode)),
        }
    }

    pub fn greedy(policy: &'a PolicyNet) -> PolicyController<'a> {
        PolicyController { policy, rng: None }
    }
}

impl HoldingController for PolicyController<'_> {
    fn observe(&mut self, state: &StateVector) -> HoldAction {
        let seconds = match &mut self.rng {
            Some(rng) => self.policy.sample_one(state, rng).0,
            None => self.policy.mean_action(state),
        };
        HoldAction { seconds }
    }
}

pub struct Trainer {
    pub config: SacConfig,
    pub policy: PolicyNet,
    pub critic1: CriticNet,
    pub critic2: CriticNet,
    pub target1: CriticNet,
    pub target2: CriticNet,
    /// Temperature lives in log space so it stays positive; 1x1 so the
    /// optimizer treats it like any other parameter.
    pub log_alpha: Array2<f64>,
    pub adam_policy: AdamState,
    pub adam_critic1: AdamState,
    pub adam_critic2: AdamState,
    pub adam_alpha: AdamState,
    pub buffer: ReplayBuffer,
    pub step: u64,
    pub episode: u64,
    seed: u64,
    update_rng: RngStream,
}

impl Trainer {
    pub fn new(scenario: &ScenarioConfig, config: SacConfig, seed: u64) -> Trainer {
        config.validate().expect("config invariants");
        let mut init = RngStream::with_index(seed, StreamKind::Init, 0);
        let policy = PolicyNet::new(scenario.max_hold_secs, &mut init);
        let critic1 = CriticNet::new(&mut init);
        let critic2 = CriticNet::new(&mut init);
        let target1 = critic1.clone();
        let target2 = critic2.clone();
        let adam_policy = AdamState::new(&policy.param_shapes());
        let adam_critic1 = AdamState::new(&critic1.param_shapes());
        let adam_critic2 = AdamState::new(&critic2.param_shapes());
        let adam_alpha = AdamState::new(&[(1, 1)]);
        let buffer = ReplayBuffer::new(config.replay_capacity);
        let log_alpha = Array2::from_elem((1, 1), config.alpha_init.ln());
        Trainer {
            config,
            policy,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha,
            adam_policy,
            adam_critic1,
            adam_critic2,
            adam_alpha,
            buffer,
            step: 0,
            episode: 0,
            seed,
            update_rng: RngStream::with_index(seed, StreamKind::Batch, 0),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha[[0, 0]].exp()
    }

    fn draw_eps(&mut self, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(&mut self.update_rng))
    }

    /// One gradient step on a fresh minibatch: critics, then actor, then
    /// temperature, then target trailing.
    pub fn update(&mut self) -> Result<UpdateStats, Diverged> {
        let cfg = self.config.clone();
        let alpha = self.alpha();
        let batch: Vec<Transition> = self
            .buffer
            .sample(cfg.batch_size, &mut self.update_rng)
            .expect("caller ensures the buffer covers one batch")
            .into_iter()
            .cloned()
            .collect();
        let n = batch.len();

        let sb = StateBatch::from_states(batch.iter().map(|t| &t.state));
        let sb_next = StateBatch::from_states(batch.iter().map(|t| &t.next_state));
        let actions = Array2::from_shape_fn((n, 1), |(i, _)| batch[i].action);
        let rewards = Array2::from_shape_fn((n, 1), |(i, _)| batch[i].reward);
        let dones = Array2::from_shape_fn((n, 1), |(i, _)| if batch[i].done { 1.0 } else { 0.0 });

        // Bootstrap targets: plain forward passes only, so no gradient can
        // reach the target networks or the next-action draw.
        let eps_next = self.draw_eps(n);
        let next = self.policy.sample_batch(&sb_next, &eps_next);
        let q1_next = self.target1.value(&sb_next, &next.actions);
        let q2_next = self.target2.value(&sb_next, &next.actions);
        let y = critic_targets(
            &rewards,
            &dones,
            &q1_next,
            &q2_next,
            &next.log_probs,
            alpha,
            cfg.gamma,
        );

        // Both critics share one tape; their parameters are disjoint, so
        // the summed loss yields each critic's exact gradient.
        let touched = sb.touched_rows();
        let mut g = Graph::new();
        let ids1 = self.critic1.register(&mut g);
        let ids2 = self.critic2.register(&mut g);
        let a_leaf = g.leaf(actions.clone());
        let y_leaf = g.leaf(y);
        let q1 = graph_critic_value(&mut g, &ids1, &sb, a_leaf);
        let q2 = graph_critic_value(&mut g, &ids2, &sb, a_leaf);
        let d1 = g.sub(q1, y_leaf);
        let sq1 = g.mul(d1, d1);
        let l1 = g.mean(sq1);
        let d2 = g.sub(q2, y_leaf);
        let sq2 = g.mul(d2, d2);
        let l2 = g.mean(sq2);
        let both = g.add(l1, l2);
        g.backward(both)
            .map_err(|e| Diverged { phase: "critic loss", value: e.value })?;
        let critic1_loss = g.scalar(l1);
        let critic2_loss = g.scalar(l2);
        apply_grads(
            self.critic1.params_mut(),
            &mut self.adam_critic1,
            &collect_grads(&g, &ids1),
            &touched,
            cfg.lr,
        );
        apply_grads(
            self.critic2.params_mut(),
            &mut self.adam_critic2,
            &collect_grads(&g, &ids2),
            &touched,
            cfg.lr,
        );

        // Actor step against the refreshed critics, which stay frozen:
        // their gradients are computed on the tape but never applied.
        let eps_act = self.draw_eps(n);
        let mut g = Graph::new();
        let pids = self.policy.register(&mut g);
        let heads = graph_policy_heads(&mut g, &pids, &sb, &eps_act, self.policy.half_t());
        let c1 = self.critic1.register(&mut g);
        let c2 = self.critic2.register(&mut g);
        let q1 = graph_critic_value(&mut g, &c1, &sb, heads.action);
        let q2 = graph_critic_value(&mut g, &c2, &sb, heads.action);
        let qmin = g.min(q1, q2);
        let weighted = g.scale(heads.log_prob, alpha);
        let gap = g.sub(weighted, qmin);
        let actor = g.mean(gap);
        g.backward(actor)
            .map_err(|e| Diverged { phase: "actor loss", value: e.value })?;
        let actor_loss = g.scalar(actor);
        let logp_mean = g
            .value(heads.log_prob)
            .mean()
            .expect("batch is non-empty");
        apply_grads(
            self.policy.params_mut(),
            &mut self.adam_policy,
            &collect_grads(&g, &pids),
            &touched,
            cfg.lr,
        );

        // Temperature: d/d(log alpha) of mean(-log_alpha (log pi + H)) is
        // just -(mean log pi + H), taken with the policy term detached.
        let grad_log_alpha = -(logp_mean + cfg.target_entropy);
        if !grad_log_alpha.is_finite() {
            return Err(Diverged { phase: "temperature", value: grad_log_alpha });
        }
        let grad = Array2::from_elem((1, 1), grad_log_alpha);
        self.adam_alpha.begin_step();
        self.adam_alpha.update_dense(0, &mut self.log_alpha, &grad, cfg.lr);

        polyak_update(&mut self.target1, &self.critic1, cfg.tau);
        polyak_update(&mut self.target2, &self.critic2, cfg.tau);
        self.step += 1;

        Ok(UpdateStats { critic1_loss, critic2_loss, actor_loss, alpha: self.alpha() })
    }

    /// Runs `episodes` rollout/update rounds. On divergence the trainer is
    /// rolled back to its state after the last healthy episode and the
    /// partial metrics are returned with the episode marked.
    pub fn train_episodes(
        &mut self,
        scenario: &ScenarioConfig,
        episodes: u64,
    ) -> Result<TrainOutput, SimError> {
        let mut metrics = Vec::new();
        for _ in 0..episodes {
            let ep = self.episode;
            let snapshot = self.policy.clone();
            let mut controller = PolicyController::stochastic(&snapshot, self.seed, ep);
            let log = run_episode(scenario, &mut controller, self.seed.wrapping_add(ep))?;
            let outcome = resolve_transitions(&log);
            let planned = self
                .config
                .updates_per_episode
                .unwrap_or(outcome.decision_count);
            self.buffer.extend(outcome.transitions);

            let mut sums = (0.0f64, 0.0f64);
            let mut done_updates = 0usize;
            let mut diverged = None;
            if self.buffer.len() >= self.config.warmup_tuples.max(self.config.batch_size) {
                let good = self.to_checkpoint();
                for _ in 0..planned {
                    match self.update() {
                        Ok(stats) => {
                            sums.0 += stats.actor_loss;
                            sums.1 += 0.5 * (stats.critic1_loss + stats.critic2_loss);
                            done_updates += 1;
                        }
                        Err(_) => {
                            self.restore(&good).expect("snapshot taken this episode");
                            diverged = Some(ep);
                            break;
                        }
                    }
                }
            }

            self.episode += 1;
            let denom = done_updates.max(1) as f64;
            metrics.push(EpisodeMetrics {
                episode: ep,
                cum_reward: outcome.cumulative_reward,
                alpha: self.alpha(),
                actor_loss: sums.0 / denom,
                critic_loss: sums.1 / denom,
                buffer_size: self.buffer.len(),
            });
            if diverged.is_some() {
                return Ok(TrainOutput { metrics, diverged });
            }
        }
        Ok(TrainOutput { metrics, diverged: None })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            step: self.step,
            episode: self.episode,
            log_alpha: self.log_alpha[[0, 0]],
            max_hold_secs: self.policy.max_hold,
            policy: (&self.policy).into(),
            critic1: (&self.critic1).into(),
            critic2: (&self.critic2).into(),
            target1: (&self.target1).into(),
            target2: (&self.target2).into(),
            adam_policy: (&self.adam_policy).into(),
            adam_critic1: (&self.adam_critic1).into(),
            adam_critic2: (&self.adam_critic2).into(),
            adam_alpha: (&self.adam_alpha).into(),
        }
    }

    /// Restores networks, optimizer moments, temperature and counters.
    /// The replay buffer and RNG positions are not part of a checkpoint.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        ckpt.validate()?;
        self.policy = ckpt.policy.to_policy(ckpt.max_hold_secs)?;
        self.critic1 = ckpt.critic1.to_critic()?;
        self.critic2 = ckpt.critic2.to_critic()?;
        self.target1 = ckpt.target1.to_critic()?;
        self.target2 = ckpt.target2.to_critic()?;
        self.adam_policy = ckpt.adam_policy.to_state()?;
        self.adam_critic1 = ckpt.adam_critic1.to_state()?;
        self.adam_critic2 = ckpt.adam_critic2.to_state()?;
        self.adam_alpha = ckpt.adam_alpha.to_state()?;
        self.log_alpha = Array2::from_elem((1, 1), ckpt.log_alpha);
        self.step = ckpt.step;
        self.episode = ckpt.episode;
        Ok(())
    }

    pub fn from_checkpoint(
        scenario: &ScenarioConfig,
        ckpt: &Checkpoint,
        config: SacConfig,
        seed: u64,
    ) -> Result<Trainer, CheckpointError> {
        let mut t = Trainer::new(scenario, config, seed);
        t.restore(ckpt)?;
        Ok(t)
    }
}

fn collect_grads(g: &Graph, ids: &crate::nn::NetIds) -> Vec<Array2<f64>> {
    ids.ordered().iter().map(|&id| g.grad(id)).collect()
}

fn apply_grads(
    params: Vec<&mut Array2<f64>>,
    adam: &mut AdamState,
    grads: &[Array2<f64>],
    touched: &[Vec<usize>; 4],
    lr: f64,
) {
    adam.begin_step();
    for (slot, (param, grad)) in params.into_iter().zip(grads).enumerate() {
        if slot < touched.len() {
            adam.update_rows(slot, param, grad, &touched[slot], lr);
        } else {
            adam.update_dense(slot, param, grad, lr);
        }
    }
}

/// Deterministic-policy rollouts over consecutive seeds.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn evaluate(
    policy: &PolicyNet,
    scenario: &ScenarioConfig,
    rollouts: usize,
    seed_base: u64,
) -> Result<EvalReport, SimError> {
    assert!(rollouts >= 1);
    let mut rewards = Vec::with_capacity(rollouts);
    for k in 0..rollouts {
        let mut controller = PolicyController::greedy(policy);
        let log = run_episode(scenario, &mut controller, seed_base + k as u64)?;
        rewards.push(resolve_transitions(&log).cumulative_reward);
    }
    let mean = rewards.iter().sum::<f64>() / rollouts as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rollouts as f64;
    Ok(EvalReport { rewards, mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_synthetic_scenario, generate_timetable, Direction};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Full corridor, but only two hours of departures per direction.
    fn short_scenario() -> ScenarioConfig {
        let mut config = generate_synthetic_scenario(5);
        config.timetables = [
            generate_timetable(Direction::Down, 1800, 180, 7200).unwrap(),
            generate_timetable(Direction::Up, 1800, 0, 7200).unwrap(),
        ];
        config
    }

    fn quick_config() -> SacConfig {
        SacConfig {
            batch_size: 32,
            warmup_tuples: 64,
            lr: 1e-4,
            updates_per_episode: Some(4),
            ..SacConfig::default()
        }
    }

    fn toy_state(i: usize) -> StateVector {
        StateVector {
            bus_id: i % 40,
            stop_id: 1 + i % 20,
            time_period: i % 13,
            direction: if i % 2 == 0 { Direction::Up } else { Direction::Down },
            h_f_norm: 1.0 + 0.05 * (i % 7) as f64,
            h_b_norm: 1.0 - 0.04 * (i % 5) as f64,
            seg_speed_norm: 0.6,
        }
    }

    #[test]
    fn targets_mask_terminals_and_zero_discount() {
        let r = array![[2.0], [-3.0]];
        let q1 = array![[10.0], [10.0]];
        let q2 = array![[12.0], [8.0]];
        let lp = array![[-1.0], [-1.0]];

        let done = array![[1.0], [1.0]];
        let y = critic_targets(&r, &done, &q1, &q2, &lp, 0.5, 0.99);
        assert_eq!(y, r);

        let live = array![[0.0], [0.0]];
        let y0 = critic_targets(&r, &live, &q1, &q2, &lp, 0.5, 0.0);
        assert_eq!(y0, r);
    }

    #[test]
    fn targets_match_hand_computed_soft_backup() {
        let r = array![[1.0], [-2.0]];
        let done = array![[0.0], [0.0]];
        let q1 = array![[3.0], [0.5]];
        let q2 = array![[2.5], [0.7]];
        let lp = array![[-1.2], [0.4]];
        let y = critic_targets(&r, &done, &q1, &q2, &lp, 0.3, 0.9);
        assert_abs_diff_eq!(y[[0, 0]], 1.0 + 0.9 * (2.5 + 0.3 * 1.2), epsilon = 1e-10);
        assert_abs_diff_eq!(y[[1, 0]], -2.0 + 0.9 * (0.5 - 0.3 * 0.4), epsilon = 1e-10);
    }

    #[test]
    fn polyak_rates() {
        let mut rng = RngStream::with_index(2, StreamKind::Init, 0);
        let online = CriticNet::new(&mut rng);
        let base = CriticNet::new(&mut rng);

        let mut t = base.clone();
        polyak_update(&mut t, &online, 1.0);
        assert_eq!(t.params(), online.params());

        let mut t = base.clone();
        polyak_update(&mut t, &online, 0.0);
        assert_eq!(t.params(), base.params());

        let mut t = base.clone();
        polyak_update(&mut t, &online, 0.005);
        let probe = |net: &CriticNet| net.mlp.weights[0][[3, 4]];
        assert_abs_diff_eq!(
            probe(&t),
            0.995 * probe(&base) + 0.005 * probe(&online),
            epsilon = 1e-15
        );
    }

    #[test]
    fn repeated_updates_on_fixed_targets_reduce_critic_loss() {
        let scenario = short_scenario();
        let config = SacConfig {
            batch_size: 32,
            warmup_tuples: 32,
            lr: 1e-3,
            ..SacConfig::default()
        };
        let mut trainer = Trainer::new(&scenario, config, 11);
        for i in 0..32 {
            let s = toy_state(i);
            let a = 1.0 + (i % 50) as f64;
            trainer.buffer.push(Transition {
                state: s,
                action: a,
                reward: -((a - 30.0) / 10.0).powi(2),
                next_state: toy_state(i + 1),
                done: true,
            });
        }
        let first = trainer.update().unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = trainer.update().unwrap();
        }
        let start = first.critic1_loss + first.critic2_loss;
        let end = last.critic1_loss + last.critic2_loss;
        assert!(end < start, "critic loss should shrink: {start} -> {end}");
        assert!(trainer.alpha() > 0.0);
    }

    #[test]
    fn target_nets_move_only_by_trailing() {
        let scenario = short_scenario();
        let mut trainer = Trainer::new(&scenario, quick_config(), 3);
        for i in 0..64 {
            let a = 1.0 + (i % 50) as f64;
            trainer.buffer.push(Transition {
                state: toy_state(i),
                action: a,
                reward: -1.0,
                next_state: toy_state(i + 3),
                done: i % 4 == 0,
            });
        }
        let before1 = trainer.target1.clone();
        let before2 = trainer.target2.clone();
        let tau = trainer.config.tau;
        trainer.update().unwrap();
        let mut expect1 = before1;
        polyak_update(&mut expect1, &trainer.critic1, tau);
        assert_eq!(expect1.params(), trainer.target1.params());
        let mut expect2 = before2;
        polyak_update(&mut expect2, &trainer.critic2, tau);
        assert_eq!(expect2.params(), trainer.target2.params());
    }

    #[test]
    fn same_seed_reproduces_training_exactly() {
        let scenario = short_scenario();
        let run = || {
            let mut trainer = Trainer::new(&scenario, quick_config(), 17);
            let out = trainer.train_episodes(&scenario, 3).unwrap();
            assert!(out.diverged.is_none());
            let rewards: Vec<f64> = out.metrics.iter().map(|m| m.cum_reward).collect();
            let alphas: Vec<f64> = out.metrics.iter().map(|m| m.alpha).collect();
            (rewards, alphas, trainer.step)
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.2 > 0, "warmup is low enough that updates must have run");
    }

    #[test]
    fn zero_episodes_touch_nothing() {
        let scenario = short_scenario();
        let mut trainer = Trainer::new(&scenario, quick_config(), 9);
        let before = trainer.to_checkpoint();
        let out = trainer.train_episodes(&scenario, 0).unwrap();
        assert!(out.metrics.is_empty());
        assert!(out.diverged.is_none());
        assert_eq!(trainer.to_checkpoint(), before);
    }

    #[test]
    fn checkpoint_round_trip_restores_behavior() {
        let scenario = short_scenario();
        let mut trainer = Trainer::new(&scenario, quick_config(), 23);
        trainer.train_episodes(&scenario, 1).unwrap();
        let ckpt = trainer.to_checkpoint();
        let clone =
            Trainer::from_checkpoint(&scenario, &ckpt, quick_config(), 23).unwrap();
        assert_eq!(clone.step, trainer.step);
        assert_eq!(clone.episode, trainer.episode);
        assert_eq!(clone.alpha(), trainer.alpha());
        let s = toy_state(4);
        assert_eq!(clone.policy.mean_action(&s), trainer.policy.mean_action(&s));
        assert_eq!(clone.adam_policy, trainer.adam_policy);
    }

    #[test]
    fn evaluation_is_deterministic_and_k1_has_zero_spread() {
        let scenario = short_scenario();
        let trainer = Trainer::new(&scenario, quick_config(), 31);
        let one = evaluate(&trainer.policy, &scenario, 1, 100).unwrap();
        assert_eq!(one.std, 0.0);
        let a = evaluate(&trainer.policy, &scenario, 3, 100).unwrap();
        let b = evaluate(&trainer.policy, &scenario, 3, 100).unwrap();
        assert_eq!(a.rewards, b.rewards);
        assert_abs_diff_eq!(
            a.mean,
            a.rewards.iter().sum::<f64>() / 3.0,
            epsilon = 1e-12
        );
    }
}
