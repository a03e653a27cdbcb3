//! Primal-dual TD3 training: replay, twin critics, augmented-Lagrangian actor
//! and predictor updates, dual ascent, and the baseline variants.

mod duals;
mod eval;
mod losses;
mod metrics;
mod replay;
mod residuals;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use duals::{dual_update, lemma1_monitor, DualState, Lemma1Trace, ResidualSummary, ToyQp, EQ_FAMILIES, INEQ_FAMILIES};
pub use eval::{evaluate, rollout, Episode, EvalReport, EvalStep, NoisyPolicy, Policy, RandomPolicy, ReplayPolicy};
pub use losses::{actor_loss, critic_regression, critic_targets, critic_update, policy_residuals, ActorLossOutput, CriticSet, TargetNoise};
pub use metrics::{write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use replay::{ReplayBuffer, Transition};
pub use residuals::{augmented_terms, constraint_residuals, summarize, BatchData, ResidualContext, Residuals};

use crate::autodiff::{AdError, AdamState};
use crate::env::{env_step, generate_scenario, initial_state, ActionBlock, EnvConfig, EnvError, EnvState, Scenario, ScenarioConfig};
use crate::exec::Exec;
use crate::grid::GridCase;
use crate::nets::{ActorNet, CriticNet, NetConfig, PredictorNet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Augmented Lagrangian with dual ascent.
    Crl,
    /// Rectified violations subtracted from the reward.
    Penalty,
    /// Squared residual penalties, duals fixed at zero.
    Dc3,
    /// Plain TD3 actor loss.
    Td3Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub dual_period: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Steps of uniform-random actions before the actor takes over.
    pub exploration_steps: usize,
    /// Gaussian noise on actor outputs after exploration.
    pub exploration_sigma: f64,
    /// Target-policy smoothing; `None` follows the plain algorithm.
    pub target_noise: Option<(f64, f64)>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_predictor: f64,
    /// Penalty coefficients `alpha_1 .. alpha_8` (equality families first).
    pub alpha: [f64; 8],
    /// Dual step sizes; defaults to `alpha`.
    pub dual_step: Option<[f64; 8]>,
    /// Grow equality penalties x1.5 (capped at 100) when the residual norm
    /// fails to drop by 10% between dual updates.
    pub alpha_growth: bool,
    /// Weight of the rectified violation in the penalty baseline.
    pub penalty_beta: f64,
    /// Multiplier applied to rewards before critic regression.
    pub reward_scale: f64,
    pub seed: u64,
    pub env: EnvConfig,
    pub scenario: ScenarioConfig,
    pub net: NetConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Crl,
            iterations: 2000,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            dual_period: 500,
            batch_size: 100,
            buffer_capacity: 500,
            exploration_steps: 200,
            exploration_sigma: 0.1,
            target_noise: None,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            lr_predictor: 1e-3,
            alpha: [1.0; 8],
            dual_step: None,
            alpha_growth: false,
            penalty_beta: 1.0,
            reward_scale: 1.0,
            seed: 0,
            env: EnvConfig::default(),
            scenario: ScenarioConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.policy_delay == 0 || self.dual_period == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("periods, batch size and buffer capacity must be positive");
        }
        if self.env.horizon == 0 {
            return bad("horizon must be positive");
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("penalty coefficients must be finite and non-negative");
        }
        if self.scenario.episode_len == 0 {
            return bad("episode_len must be positive");
        }
        Ok(())
    }

    /// Single-core desk scale: 2000 steps, narrower dense layers, duals
    /// updated every 100 steps, stiffer penalties.
    pub fn desk(algorithm: Algorithm, seed: u64) -> Self {
        Self {
            algorithm,
            seed,
            iterations: 2000,
            dual_period: 100,
            exploration_steps: 200,
            alpha: [30.0; 8],
            net: NetConfig { hidden: 64, ..NetConfig::default() },
            ..Self::default()
        }
    }

    pub fn dual_steps(&self) -> [f64; 8] {
        self.dual_step.unwrap_or(self.alpha)
    }

    /// Scenario seed of training episode `k`.
    pub fn train_scenario_seed(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(k)
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainedArtifacts {
    pub actor: ActorNet,
    pub predictor: PredictorNet,
    pub critics: CriticSet,
    pub duals: DualState,
    pub metrics: Vec<MetricsRow>,
    /// `(step, |r_lambda|, |r_mu|)` at every dual update.
    pub dual_log: Vec<(usize, f64, f64)>,
    /// Residual norms of the final policy on a fresh batch.
    pub final_residuals: Option<(f64, f64)>,
}

/// Networks initialized from `cfg.seed`.
pub fn init_networks(case: &GridCase, cfg: &TrainerConfig) -> (ActorNet, PredictorNet, CriticSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.env.horizon;
    let actor = ActorNet::new(case, &cfg.net, h, &mut rng);
    let predictor = PredictorNet::new(case, &cfg.net, h, &mut rng);
    let q1 = CriticNet::new(case, &cfg.net, h, "q1", &mut rng);
    let q2 = CriticNet::new(case, &cfg.net, h, "q2", &mut rng);
    (actor, predictor, CriticSet::new(q1, q2, cfg.lr_critic))
}

struct EpisodeCursor {
    index: u64,
    scenario: Scenario,
    state: EnvState,
}

impl EpisodeCursor {
    fn start(case: &GridCase, cfg: &TrainerConfig, index: u64) -> Self {
        let scenario = generate_scenario(case, &cfg.scenario.with_seed(cfg.train_scenario_seed(index)), cfg.env.horizon);
        let state = initial_state(case, &scenario, &cfg.env);
        Self { index, scenario, state }
    }
}

/// Runs the training loop for `cfg.iterations` environment steps.
pub fn train(case: &GridCase, cfg: &TrainerConfig, exec: Exec) -> Result<TrainedArtifacts, TrainError> {
    cfg.validate()?;
    let horizon = cfg.env.horizon;
    let (mut actor, mut predictor, mut critics) = init_networks(case, cfg);
    let mut adam_actor = AdamState::new(&actor.params, cfg.lr_actor);
    let mut adam_pred = AdamState::new(&predictor.params, cfg.lr_predictor);
    let ctx = ResidualContext::new(case, horizon);

    let (alpha, steps) = match cfg.algorithm {
        Algorithm::Crl => (cfg.alpha, cfg.dual_steps()),
        Algorithm::Dc3 => (cfg.alpha, [0.0; 8]),
        _ => ([0.0; 8], [0.0; 8]),
    };
    let mut duals = DualState::zeros(horizon, case.n_bus, case.n_bess, alpha, steps);
    let constrained = matches!(cfg.algorithm, Algorithm::Crl | Algorithm::Dc3);

    let mut act_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xac7);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a3);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a6);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut cursor = EpisodeCursor::start(case, cfg, 0);

    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut dual_log = Vec::new();
    let mut dual_snapshots: Vec<(usize, DualState)> = vec![(0, duals.clone())];
    let (mut last_c, mut last_a, mut last_res): (Option<[f64; 2]>, Option<f64>, Option<(f64, f64)>) = (None, None, None);
    let noise = Normal01;

    for it in 0..cfg.iterations {
        let block = if it < cfg.exploration_steps {
            ActionBlock::uniform(horizon, case.action_dim(), &mut act_rng)
        } else {
            let mut b = actor.act(&[&cursor.state], exec)?.remove(0);
            for x in &mut b.data {
                *x = (*x + cfg.exploration_sigma * noise.sample(&mut act_rng)).clamp(0.0, 1.0);
            }
            b
        };
        let out = env_step(&cursor.state, &block, &cursor.scenario, case, &cfg.env)?;
        let (hp, hq) = cursor.scenario.horizon(cursor.state.t, horizon)?;
        let mut stored = out.reward;
        if cfg.algorithm == Algorithm::Penalty {
            stored -= cfg.penalty_beta * out.info.violation;
        }
        buffer.push(Transition {
            x_prev: cursor.state.clone(),
            block,
            r: cfg.reward_scale * stored,
            x_next: out.state.clone(),
            terminal: out.info.pf_failed,
            horizon_d_p: hp,
            horizon_d_q: hq,
        });

        if buffer.len() >= cfg.batch_size.min(buffer.capacity()) {
            let batch = buffer.sample(cfg.batch_size, &mut sample_rng);
            let tn = cfg.target_noise.map(|(sigma, clip)| TargetNoise { sigma, clip });
            let noise_arg = tn.map(|t| (t, &mut noise_rng as &mut dyn rand::RngCore));
            last_c = Some(critic_update(&mut critics, &actor, &batch, cfg.gamma, noise_arg, exec)?);

            if it % cfg.policy_delay == 0 {
                let out = actor_loss(&actor, &predictor, &critics.online[0], &ctx, case, &batch, constrained.then_some(&duals), exec)?;
                adam_actor.step(&mut actor.params, &out.actor_grads);
                if let Some(g) = &out.predictor_grads {
                    adam_pred.step(&mut predictor.params, g);
                }
                critics.soft_update(cfg.tau);
                last_a = Some(out.loss);
                if let Some(s) = &out.summary {
                    last_res = Some((s.eq_norm(), s.ineq_norm()));
                }
            }

            if cfg.algorithm == Algorithm::Crl && (it + 1) % cfg.dual_period == 0 {
                let batch = buffer.sample(cfg.batch_size, &mut sample_rng);
                let summary = policy_residuals(&actor, &predictor, &ctx, case, &batch, exec)?;
                let norm = summary.eq_norm();
                if cfg.alpha_growth {
                    if let Some(&(_, prev, _)) = dual_log.last() {
                        if norm > 0.9 * prev {
                            for a in &mut duals.alpha[..EQ_FAMILIES] {
                                *a = (*a * 1.5).min(100.0);
                            }
                        }
                    }
                }
                duals = dual_update(&duals, &summary);
                dual_log.push((it + 1, norm, summary.ineq_norm()));
                dual_snapshots.push((it + 1, duals.clone()));
            }
        }

        metrics.push(MetricsRow {
            step: it,
            reward: out.reward,
            critic_loss_1: last_c.map(|c| c[0]),
            critic_loss_2: last_c.map(|c| c[1]),
            actor_loss: last_a,
            r_lambda: last_res.map(|r| r.0),
            r_mu: last_res.map(|r| r.1),
            v_proxy: None,
            feasible_vm: out.info.feasible_vm,
            feasible_slack: out.info.feasible_slack,
        });

        cursor.state = out.state;
        if out.done {
            cursor = EpisodeCursor::start(case, cfg, cursor.index + 1);
        }
    }

    // the final duals stand in for the unknown saddle point
    if cfg.algorithm == Algorithm::Crl {
        let mut k = 0;
        for row in &mut metrics {
            while k + 1 < dual_snapshots.len() && dual_snapshots[k + 1].0 <= row.step {
                k += 1;
            }
            row.v_proxy = Some(dual_snapshots[k].1.lyapunov(&duals));
        }
    }

    let final_residuals = if constrained && !buffer.is_empty() {
        let batch = buffer.sample(cfg.batch_size, &mut sample_rng);
        let s = policy_residuals(&actor, &predictor, &ctx, case, &batch, exec)?;
        Some((s.eq_norm(), s.ineq_norm()))
    } else {
        None
    };

    Ok(TrainedArtifacts { actor, predictor, critics, duals, metrics, dual_log, final_residuals })
}

struct Normal01;

impl Normal01 {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        rng.sample(rand_distr::StandardNormal)
    }
}
