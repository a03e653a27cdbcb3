use rand::Rng;
use rand_distr::StandardNormal;

use super::duals::{DualState, ResidualSummary};
use super::replay::Transition;
use super::residuals::{augmented_terms, constraint_residuals, summarize, BatchData, ResidualContext};
use crate::autodiff::{AdError, AdamState, Mat, ParamSet, Tape};
use crate::env::EnvState;
use crate::exec::Exec;
use crate::grid::GridCase;
use crate::nets::{blocks_to_mat, critic_state_features, node_features, ActorNet, CriticNet, PredictorNet};

/// Actor loss value, its parts and the parameter gradients.
#[derive(Debug, Clone)]
pub struct ActorLossOutput {
    pub loss: f64,
    pub q_mean: f64,
    pub summary: Option<ResidualSummary>,
    pub actor_grads: Vec<Mat>,
    pub predictor_grads: Option<Vec<Mat>>,
}

/// `-mean Q_1(x, pi(x))` plus, when `duals` is given, the augmented
/// Lagrangian terms of the horizon constraints.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    actor: &ActorNet,
    predictor: &PredictorNet,
    critic: &CriticNet,
    ctx: &ResidualContext,
    case: &GridCase,
    batch: &[&Transition],
    duals: Option<&DualState>,
    exec: Exec,
) -> Result<ActorLossOutput, AdError> {
    let states: Vec<&EnvState> = batch.iter().map(|t| &t.x_prev).collect();
    let horizon = actor.horizon();
    let mut tape = Tape::new(exec);
    let a_vars = actor.params.register(&mut tape)?;
    let c_vars = critic.params.register_frozen(&mut tape)?;
    let x = tape.complex_constant(node_features(&states, horizon))?;
    let u = actor.forward(&mut tape, &a_vars, x)?;
    let sf = tape.constant(critic_state_features(&states, horizon));
    let q = critic.forward(&mut tape, &c_vars, sf, u)?;
    let q_mean = tape.mean(q);
    let mut loss = tape.neg(q_mean);
    let mut p_vars = None;
    let mut residuals = None;
    if let Some(duals) = duals {
        let vars = predictor.params.register(&mut tape)?;
        let vm = predictor.forward(&mut tape, &vars, x)?;
        let data = BatchData::new(ctx, case, batch);
        let res = constraint_residuals(&mut tape, ctx, &data, u, vm)?;
        let aug = augmented_terms(&mut tape, &res, duals, batch.len())?;
        loss = tape.add(loss, aug)?;
        p_vars = Some(vars);
        residuals = Some(res);
    }
    let grads = tape.backward(loss)?;
    Ok(ActorLossOutput {
        loss: tape.value(loss).data[0],
        q_mean: tape.value(q_mean).data[0],
        summary: residuals.map(|r| summarize(&tape, &r, batch.len(), horizon)),
        actor_grads: grads.collect(&a_vars),
        predictor_grads: p_vars.map(|v| grads.collect(&v)),
    })
}

/// Batch-averaged residuals of the current policy, without gradients.
pub fn policy_residuals(
    actor: &ActorNet,
    predictor: &PredictorNet,
    ctx: &ResidualContext,
    case: &GridCase,
    batch: &[&Transition],
    exec: Exec,
) -> Result<ResidualSummary, AdError> {
    let states: Vec<&EnvState> = batch.iter().map(|t| &t.x_prev).collect();
    let mut tape = Tape::new(exec);
    let a_vars = actor.params.register_frozen(&mut tape)?;
    let p_vars = predictor.params.register_frozen(&mut tape)?;
    let x = tape.complex_constant(node_features(&states, actor.horizon()))?;
    let u = actor.forward(&mut tape, &a_vars, x)?;
    let vm = predictor.forward(&mut tape, &p_vars, x)?;
    let data = BatchData::new(ctx, case, batch);
    let res = constraint_residuals(&mut tape, ctx, &data, u, vm)?;
    Ok(summarize(&tape, &res, batch.len(), actor.horizon()))
}

/// Twin critics with target copies and their optimizers.
#[derive(Debug, Clone)]
pub struct CriticSet {
    pub online: [CriticNet; 2],
    pub target: [ParamSet; 2],
    pub adam: [AdamState; 2],
}

impl CriticSet {
    pub fn new(q1: CriticNet, q2: CriticNet, lr: f64) -> Self {
        let target = [q1.params.clone(), q2.params.clone()];
        let adam = [AdamState::new(&q1.params, lr), AdamState::new(&q2.params, lr)];
        Self { online: [q1, q2], target, adam }
    }

    pub fn soft_update(&mut self, tau: f64) {
        for i in 0..2 {
            self.target[i]
                .soft_update_from(&self.online[i].params, tau)
                .expect("target and online critics share a layout");
        }
    }
}

/// Gaussian smoothing of target actions, off unless configured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetNoise {
    pub sigma: f64,
    pub clip: f64,
}

/// Clipped double-Q targets `r + gamma * min(Q'_1, Q'_2)` with next actions
/// from the current actor; terminal transitions do not bootstrap.
pub fn critic_targets(
    critics: &CriticSet,
    actor: &ActorNet,
    batch: &[&Transition],
    gamma: f64,
    noise: Option<(TargetNoise, &mut dyn rand::RngCore)>,
    exec: Exec,
) -> Result<Vec<f64>, AdError> {
    let next: Vec<&EnvState> = batch.iter().map(|t| &t.x_next).collect();
    let horizon = actor.horizon();
    let mut blocks = actor.act(&next, exec)?;
    if let Some((tn, rng)) = noise {
        for b in &mut blocks {
            for x in &mut b.data {
                let z: f64 = rng.sample(StandardNormal);
                *x = (*x + (tn.sigma * z).clamp(-tn.clip, tn.clip)).clamp(0.0, 1.0);
            }
        }
    }
    let sf = critic_state_features(&next, horizon);
    let am = blocks_to_mat(&blocks.iter().collect::<Vec<_>>());
    let mut qs = Vec::with_capacity(2);
    for i in 0..2 {
        let mut tape = Tape::new(exec);
        let vars = critics.target[i].register_frozen(&mut tape)?;
        let s = tape.constant(sf.clone());
        let a = tape.constant(am.clone());
        let q = critics.online[i].forward(&mut tape, &vars, s, a)?;
        qs.push(tape.value(q).data.clone());
    }
    Ok(batch
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let boot = if t.terminal { 0.0 } else { gamma };
            crate::nets::clipped_target(t.r, boot, qs[0][k], qs[1][k])
        })
        .collect())
}

/// One Adam step on `mean (y - Q_i)^2` for both critics. Returns the losses
/// before the step.
pub fn critic_regression(critics: &mut CriticSet, batch: &[&Transition], y: &[f64], exec: Exec) -> Result<[f64; 2], AdError> {
    let states: Vec<&EnvState> = batch.iter().map(|t| &t.x_prev).collect();
    let horizon = critics.online[0].horizon;
    let sf = critic_state_features(&states, horizon);
    let am = blocks_to_mat(&batch.iter().map(|t| &t.block).collect::<Vec<_>>());
    let target = Mat::col_vector(y);
    let mut losses = [0.0; 2];
    for i in 0..2 {
        let mut tape = Tape::new(exec);
        let vars = critics.online[i].params.register(&mut tape)?;
        let s = tape.constant(sf.clone());
        let a = tape.constant(am.clone());
        let yv = tape.constant(target.clone());
        let q = critics.online[i].forward(&mut tape, &vars, s, a)?;
        let d = tape.sub(q, yv)?;
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        losses[i] = tape.value(loss).data[0];
        let grads = tape.backward(loss)?;
        let g = grads.collect(&vars);
        critics.adam[i].step(&mut critics.online[i].params, &g);
    }
    Ok(losses)
}

/// Targets followed by one regression step.
pub fn critic_update(
    critics: &mut CriticSet,
    actor: &ActorNet,
    batch: &[&Transition],
    gamma: f64,
    noise: Option<(TargetNoise, &mut dyn rand::RngCore)>,
    exec: Exec,
) -> Result<[f64; 2], AdError> {
    let y = critic_targets(critics, actor, batch, gamma, noise, exec)?;
    critic_regression(critics, batch, &y, exec)
}
