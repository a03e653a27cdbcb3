use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::env::{env_step, generate_scenario, initial_state, realized_reward, ActionBlock, EnvConfig, EnvState, ScenarioConfig};
use crate::exec::Exec;
use crate::grid::GridCase;
use crate::nets::ActorNet;

/// Anything that maps a state to an action block.
pub trait Policy: Sync {
    fn act(&self, state: &EnvState, rng: &mut ChaCha8Rng) -> ActionBlock;
}

impl Policy for ActorNet {
    fn act(&self, state: &EnvState, _rng: &mut ChaCha8Rng) -> ActionBlock {
        ActorNet::act(self, &[state], Exec::Sequential)
            .expect("actor forward on a well-formed state")
            .remove(0)
    }
}

/// Uniform random blocks.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub horizon: usize,
    pub action_dim: usize,
}

impl Policy for RandomPolicy {
    fn act(&self, _state: &EnvState, rng: &mut ChaCha8Rng) -> ActionBlock {
        ActionBlock::uniform(self.horizon, self.action_dim, rng)
    }
}

/// Replays precomputed blocks indexed by the state's step counter.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    pub blocks: Vec<ActionBlock>,
}

impl Policy for ReplayPolicy {
    fn act(&self, state: &EnvState, _rng: &mut ChaCha8Rng) -> ActionBlock {
        self.blocks[state.t.min(self.blocks.len() - 1)].clone()
    }
}

/// Gaussian exploration around another policy, clipped to `[0, 1]`.
pub struct NoisyPolicy<'a, P: Policy> {
    pub inner: &'a P,
    pub sigma: f64,
}

impl<P: Policy> Policy for NoisyPolicy<'_, P> {
    fn act(&self, state: &EnvState, rng: &mut ChaCha8Rng) -> ActionBlock {
        let mut b = self.inner.act(state, rng);
        if self.sigma > 0.0 {
            let n = Normal::new(0.0, self.sigma).expect("positive sigma");
            for x in &mut b.data {
                *x = (*x + n.sample(rng)).clamp(0.0, 1.0);
            }
        }
        b
    }
}

/// Per-step record of one evaluation rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStep {
    pub t: usize,
    pub reward: f64,
    pub realized_reward: f64,
    pub feasible_vm: bool,
    pub feasible_slack: bool,
    pub pf_failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scenario_seed: u64,
    pub steps: Vec<EvalStep>,
}

impl Episode {
    pub fn mean_reward(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.reward))
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn total_realized_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.realized_reward).sum()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Aggregate over all evaluated steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<Episode>,
    pub samples: usize,
    pub feasible_vm_rate: f64,
    pub feasible_slack_rate: f64,
    pub mean_reward: f64,
    pub mean_realized_reward: f64,
    pub failures: usize,
}

impl EvalReport {
    pub fn from_episodes(episodes: Vec<Episode>) -> Self {
        let all: Vec<&EvalStep> = episodes.iter().flat_map(|e| e.steps.iter()).collect();
        let n = all.len();
        let rate = |f: &dyn Fn(&EvalStep) -> bool| if n == 0 { f64::NAN } else { all.iter().filter(|s| f(s)).count() as f64 / n as f64 };
        Self {
            samples: n,
            feasible_vm_rate: rate(&|s| s.feasible_vm),
            feasible_slack_rate: rate(&|s| s.feasible_slack),
            mean_reward: mean(all.iter().map(|s| s.reward)),
            mean_realized_reward: mean(all.iter().filter(|s| !s.pf_failed).map(|s| s.realized_reward)),
            failures: all.iter().filter(|s| s.pf_failed).count(),
            episodes,
        }
    }

    /// Sample standard deviation of per-episode mean rewards.
    pub fn episode_mean_std(&self) -> f64 {
        let m: Vec<f64> = self.episodes.iter().map(Episode::mean_reward).collect();
        if m.len() < 2 {
            return 0.0;
        }
        let mu = m.iter().sum::<f64>() / m.len() as f64;
        (m.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m.len() - 1) as f64).sqrt()
    }
}

/// Rolls `policy` for `steps` steps on the scenario with seed `scenario_seed`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    case: &GridCase,
    env: &EnvConfig,
    scen: &ScenarioConfig,
    scenario_seed: u64,
    steps: usize,
    policy_seed: u64,
) -> Episode {
    let scenario = generate_scenario(case, &scen.with_seed(scenario_seed), env.horizon);
    let mut state = initial_state(case, &scenario, env);
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps.min(scen.episode_len) {
        let block = policy.act(&state, &mut rng);
        let step = env_step(&state, &block, &scenario, case, env).expect("policy blocks have the environment's shape");
        out.push(EvalStep {
            t: state.t,
            reward: step.reward,
            realized_reward: realized_reward(&step.info, case),
            feasible_vm: step.info.feasible_vm,
            feasible_slack: step.info.feasible_slack,
            pf_failed: step.info.pf_failed,
        });
        // a failed solve counts as an infeasible sample; the rollout goes on
        state = step.state;
    }
    Episode { scenario_seed, steps: out }
}

/// Splits `total_steps` into episodes of at most one scenario length, one
/// scenario seed each, and rolls them out (in parallel with `Exec::Parallel`).
/// Episodes are returned in seed order.
pub fn evaluate<P: Policy>(
    policy: &P,
    case: &GridCase,
    env: &EnvConfig,
    scen: &ScenarioConfig,
    first_seed: u64,
    total_steps: usize,
    exec: Exec,
) -> EvalReport {
    let len = scen.episode_len.max(1);
    let chunks: Vec<usize> = (0..total_steps.div_ceil(len))
        .map(|i| len.min(total_steps - i * len))
        .collect();
    let episodes = exec.map_indexed(chunks.len(), |i| {
        let seed = first_seed + i as u64;
        rollout(policy, case, env, scen, seed, chunks[i], seed ^ 0x5eed)
    });
    EvalReport::from_episodes(episodes)
}
