//! Dispatch environment: action scaling, battery dynamics, reward, synthetic
//! demand scenarios and the one-step transition.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BessParams, DeviceKind, GridCase};
use crate::powerflow::{newton_solve, NewtonOptions, PfError, PowerFlowSpec, VoltagePhasors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("normalized action entry {index} = {value} outside [0, 1]")]
    ActionOutOfRange { index: usize, value: f64 },
    #[error("action block has shape {got_rows}x{got_cols}, expected {rows}x{cols}")]
    BlockShape {
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("scenario has no demand for step {0}")]
    ScenarioExhausted(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Horizon `T`: history window length and action-block rows.
    pub horizon: usize,
    /// Reward assigned when the power flow fails to converge.
    pub r_fail: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub soc_tol: f64,
    pub initial_soc: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            r_fail: -100.0,
            newton_tol: 1e-8,
            newton_max_iter: 20,
            soc_tol: 1e-9,
            initial_soc: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.newton_tol,
            max_iter: self.newton_max_iter,
        }
    }
}

/// Sliding window of voltage phasors plus the nodal state of charge.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// `v_history[0]` is the newest frame.
    pub v_history: Vec<Vec<Complex64>>,
    /// Length N; zero at buses without storage.
    pub soc: Vec<f64>,
    pub t: usize,
}

impl EnvState {
    pub fn soc_devices(&self, case: &GridCase) -> Vec<f64> {
        case.bess_buses.iter().map(|&b| self.soc[b]).collect()
    }

    pub fn newest(&self) -> &[Complex64] {
        &self.v_history[0]
    }
}

/// Horizon-stacked normalized actions, row-major `T x (2G + 2B)`.
///
/// Column layout of each row: `[g_p (G); g_q (G); p_ch (B); p_dis (B)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ActionBlock {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "action block data length");
        Self { rows, cols, data }
    }

    pub fn constant(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Self::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|x| (0.0..=1.0).contains(x))
    }
}

/// Physical set-points in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalAction {
    pub g_p: Vec<f64>,
    pub g_q: Vec<f64>,
    pub p_ch: Vec<f64>,
    pub p_dis: Vec<f64>,
}

/// Maps one normalized action row onto device ranges.
pub fn denormalize(row: &[f64], case: &GridCase) -> Result<PhysicalAction, EnvError> {
    let (g, b) = (case.n_gen, case.n_bess);
    if row.len() != case.action_dim() {
        return Err(EnvError::BlockShape {
            rows: 1,
            cols: case.action_dim(),
            got_rows: 1,
            got_cols: row.len(),
        });
    }
    if let Some((index, &value)) = row.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
        return Err(EnvError::ActionOutOfRange { index, value });
    }
    let affine = |u: f64, lo: f64, hi: f64| (1.0 - u) * lo + u * hi;
    Ok(PhysicalAction {
        g_p: (0..g).map(|i| affine(row[i], case.gen_p_min[i], case.gen_p_max[i])).collect(),
        g_q: (0..g).map(|i| affine(row[g + i], case.gen_q_min[i], case.gen_q_max[i])).collect(),
        p_ch: (0..b).map(|i| row[2 * g + i] * case.bess.p_ch_rated[i]).collect(),
        p_dis: (0..b).map(|i| row[2 * g + b + i] * case.bess.p_dis_rated[i]).collect(),
    })
}

/// Inverse of [`denormalize`], clipped to `[0, 1]`. Zero-width ranges map to 0.
pub fn normalize(action: &PhysicalAction, case: &GridCase) -> Vec<f64> {
    let unit = |x: f64, lo: f64, hi: f64| if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let mut row = Vec::with_capacity(case.action_dim());
    row.extend((0..case.n_gen).map(|i| unit(action.g_p[i], case.gen_p_min[i], case.gen_p_max[i])));
    row.extend((0..case.n_gen).map(|i| unit(action.g_q[i], case.gen_q_min[i], case.gen_q_max[i])));
    row.extend((0..case.n_bess).map(|i| unit(action.p_ch[i], 0.0, case.bess.p_ch_rated[i])));
    row.extend((0..case.n_bess).map(|i| unit(action.p_dis[i], 0.0, case.bess.p_dis_rated[i])));
    row
}

/// Net state-of-charge change of one device over one period.
pub fn soc_delta(p_ch: f64, p_dis: f64, eta_ch: f64, eta_dis: f64, dt_over_ecap: f64) -> f64 {
    dt_over_ecap * (eta_ch * p_ch - p_dis / eta_dis)
}

/// Unclamped state-of-charge update for every device.
pub fn soc_step(soc: &[f64], p_ch: &[f64], p_dis: &[f64], bess: &BessParams) -> Vec<f64> {
    (0..soc.len())
        .map(|i| soc[i] + soc_delta(p_ch[i], p_dis[i], bess.eta_ch[i], bess.eta_dis[i], bess.dt_over_ecap))
        .collect()
}

/// A full battery cannot charge and an empty one cannot discharge.
pub fn clamp_action_for_soc(soc: f64, p_ch: f64, p_dis: f64, soc_min: f64, soc_max: f64, tol: f64) -> (f64, f64) {
    let mut out = (p_ch, p_dis);
    if soc >= soc_max - tol {
        out.0 = 0.0;
    }
    if soc <= soc_min + tol {
        out.1 = 0.0;
    }
    out
}

/// Clamps at the bounds, then trims the power so the updated charge lands on
/// the bound instead of crossing it. Returns `(p_ch, p_dis, soc_next)`.
pub fn apply_battery_limits(soc: f64, p_ch: f64, p_dis: f64, k: usize, bess: &BessParams, tol: f64) -> (f64, f64, f64) {
    let (lo, hi) = (bess.soc_min[k], bess.soc_max[k]);
    let (eta_ch, eta_dis, ratio) = (bess.eta_ch[k], bess.eta_dis[k], bess.dt_over_ecap);
    let (mut ch, mut dis) = clamp_action_for_soc(soc, p_ch, p_dis, lo, hi, tol);
    let next = soc + soc_delta(ch, dis, eta_ch, eta_dis, ratio);
    if next > hi {
        ch = ((hi - soc) / ratio + dis / eta_dis).max(0.0) / eta_ch;
    } else if next < lo {
        dis = eta_dis * ((soc - lo) / ratio + eta_ch * ch).max(0.0);
    }
    let next = (soc + soc_delta(ch, dis, eta_ch, eta_dis, ratio)).clamp(lo, hi);
    (ch, dis, next)
}

/// Negative fuel cost minus battery conversion losses.
pub fn reward(action: &PhysicalAction, case: &GridCase) -> f64 {
    let fuel: f64 = (0..case.n_gen)
        .map(|i| {
            let g = action.g_p[i];
            case.cost_a[i] * g * g + case.cost_b[i] * g + case.cost_c[i]
        })
        .sum();
    let storage: f64 = (0..case.n_bess)
        .map(|i| {
            (1.0 - case.bess.eta_ch[i]) * action.p_ch[i] + (1.0 / case.bess.eta_dis[i] - 1.0) * action.p_dis[i]
        })
        .sum();
    -fuel - storage
}

/// Reward with the slack generator's set-point replaced by its realized
/// output, i.e. the cost the network actually incurred.
pub fn realized_reward(info: &StepInfo, case: &GridCase) -> f64 {
    if info.pf_failed {
        return f64::NAN;
    }
    let mut applied = info.applied.clone();
    applied.g_p[case.slack_gen] = info.slack_p;
    reward(&applied, case)
}

/// Nodal scheduled injections `(M_g g_p + M_b (p_dis - p_ch) - d_p, M_g g_q - d_q)`.
pub fn nodal_injections(action: &PhysicalAction, d_p: &[f64], d_q: &[f64], case: &GridCase) -> (Vec<f64>, Vec<f64>) {
    let m = &case.mapping;
    let gp = m.expand_to_nodes(&action.g_p, DeviceKind::Gen).expect("generator vector length");
    let gq = m.expand_to_nodes(&action.g_q, DeviceKind::Gen).expect("generator vector length");
    let net: Vec<f64> = action.p_dis.iter().zip(&action.p_ch).map(|(d, c)| d - c).collect();
    let bess = m.expand_to_nodes(&net, DeviceKind::Bess).expect("storage vector length");
    let p = (0..case.n_bus).map(|i| gp[i] + bess[i] - d_p[i]).collect();
    let q = (0..case.n_bus).map(|i| gq[i] - d_q[i]).collect();
    (p, q)
}

// ---------------------------------------------------------------------------
// scenarios

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub episode_len: usize,
    /// `(amplitude, phase)` pairs; harmonic `h` (1-based) has period `episode_len / h`.
    pub diurnal_harmonics: Vec<(f64, f64)>,
    pub noise_sigma: f64,
    /// 1-indexed buses hosting wind injections.
    pub wind_buses: Vec<usize>,
    pub wind_scale: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            episode_len: 192,
            diurnal_harmonics: vec![(0.3, -std::f64::consts::FRAC_PI_2), (0.06, 0.4)],
            noise_sigma: 0.03,
            wind_buses: vec![14],
            wind_scale: 0.2,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn profile(&self, t: usize) -> f64 {
        let day = self.episode_len.max(1) as f64;
        1.0 + self
            .diurnal_harmonics
            .iter()
            .enumerate()
            .map(|(h, &(amp, phase))| amp * (2.0 * std::f64::consts::PI * (h + 1) as f64 * t as f64 / day + phase).sin())
            .sum::<f64>()
    }

    /// Step index with the largest diurnal multiplier within one episode.
    pub fn peak_step(&self) -> usize {
        (0..self.episode_len)
            .max_by(|&a, &b| self.profile(a).total_cmp(&self.profile(b)))
            .unwrap_or(0)
    }
}

/// Nodal demand trajectories, rows indexed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub d_p: Vec<Vec<f64>>,
    pub d_q: Vec<Vec<f64>>,
    /// Wind injection per step and bus (already subtracted from `d_p`).
    pub wind: Vec<Vec<f64>>,
    pub episode_len: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.d_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_p.is_empty()
    }

    pub fn demand(&self, t: usize) -> Result<(&[f64], &[f64]), EnvError> {
        match (self.d_p.get(t), self.d_q.get(t)) {
            (Some(p), Some(q)) => Ok((p, q)),
            _ => Err(EnvError::ScenarioExhausted(t)),
        }
    }

    /// Demand rows `t .. t + horizon`.
    pub fn horizon(&self, t: usize, horizon: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), EnvError> {
        if t + horizon > self.len() {
            return Err(EnvError::ScenarioExhausted(t + horizon - 1));
        }
        Ok((self.d_p[t..t + horizon].to_vec(), self.d_q[t..t + horizon].to_vec()))
    }
}

/// Synthetic demand: base load x diurnal profile x mean-one lognormal noise,
/// minus a bounded random-walk wind injection. Covers `episode_len + horizon`
/// steps so the last decision still sees a full demand horizon.
pub fn generate_scenario(case: &GridCase, cfg: &ScenarioConfig, horizon: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg.episode_len + horizon;
    let n = case.n_bus;
    let sigma = cfg.noise_sigma;
    let mut wind_level: Vec<f64> = cfg.wind_buses.iter().map(|_| 0.5 * cfg.wind_scale).collect();
    let (mut d_p, mut d_q, mut wind) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
    for t in 0..steps {
        let profile = cfg.profile(t);
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let noise = (sigma * z - 0.5 * sigma * sigma).exp();
            p[i] = case.base_d_p[i] * profile * noise;
            q[i] = case.base_d_q[i] * profile * noise;
        }
        let mut w = vec![0.0; n];
        for (k, &bus) in cfg.wind_buses.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            wind_level[k] = (wind_level[k] + 0.5 * sigma * cfg.wind_scale * z * 10.0).clamp(0.0, cfg.wind_scale);
            if (1..=n).contains(&bus) {
                w[bus - 1] += wind_level[k];
                p[bus - 1] -= wind_level[k];
            }
        }
        d_p.push(p);
        d_q.push(q);
        wind.push(w);
    }
    Scenario {
        d_p,
        d_q,
        wind,
        episode_len: cfg.episode_len,
        seed: cfg.seed,
    }
}

// ---------------------------------------------------------------------------
// transition

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Set-points actually applied after battery limits.
    pub applied: PhysicalAction,
    pub vm: Vec<f64>,
    pub slack_p: f64,
    pub slack_q: f64,
    pub feasible_vm: bool,
    pub feasible_slack: bool,
    pub pf_failed: bool,
    pub pf_iterations: usize,
    pub pf_mismatch: f64,
    /// Total rectified violation of voltage and slack-generation bounds (p.u.).
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

fn feasibility(case: &GridCase, vm: &[f64], slack_p: f64) -> (bool, bool, f64) {
    let tol = 1e-9;
    let mut violation = 0.0;
    let mut ok_vm = true;
    for i in 0..case.n_bus {
        let over = (vm[i] - case.v_max[i]).max(0.0) + (case.v_min[i] - vm[i]).max(0.0);
        if over > tol {
            ok_vm = false;
        }
        violation += over;
    }
    let g = case.slack_gen;
    let over = (slack_p - case.gen_p_max[g]).max(0.0) + (case.gen_p_min[g] - slack_p).max(0.0);
    violation += over;
    (ok_vm, over <= tol, violation)
}

/// Solves the network for fixed set-points; returns the voltages and the slack
/// generator output.
pub fn solve_network(
    case: &GridCase,
    action: &PhysicalAction,
    d_p: &[f64],
    d_q: &[f64],
    warm: &[Complex64],
    opts: NewtonOptions,
) -> Result<(VoltagePhasors, f64, f64, usize, f64), PfError> {
    let (p, q) = nodal_injections(action, d_p, d_q, case);
    let spec = PowerFlowSpec::slack_only(case, p, q);
    let mut start = VoltagePhasors(warm.to_vec());
    start.0[case.slack_bus] = Complex64::new(1.0, 0.0);
    let sol = match newton_solve(&case.y, &spec, &start, opts) {
        Ok(s) => s,
        // a stale warm start can wander off; retry once from flat
        Err(_) => newton_solve(&case.y, &spec, &VoltagePhasors::flat(case.n_bus), opts)?,
    };
    let s = crate::powerflow::complex_injections(&sol.v.0, &case.y);
    let k = case.slack_bus;
    let bess_at_slack: f64 = case
        .bess_buses
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == k)
        .map(|(j, _)| action.p_dis[j] - action.p_ch[j])
        .sum();
    let slack_p = s[k].re + d_p[k] - bess_at_slack;
    let slack_q = s[k].im + d_q[k];
    let mismatch = sol.final_mismatch();
    Ok((sol.v, slack_p, slack_q, sol.iterations, mismatch))
}

/// Initial state: the network solved for mid-range set-points at step 0,
/// replicated across the history window.
pub fn initial_state(case: &GridCase, scenario: &Scenario, cfg: &EnvConfig) -> EnvState {
    let mid = ActionBlock::constant(1, case.action_dim(), 0.5);
    let mut action = denormalize(mid.row(0), case).expect("mid-range action is valid");
    action.p_ch.iter_mut().for_each(|x| *x = 0.0);
    action.p_dis.iter_mut().for_each(|x| *x = 0.0);
    let v = scenario
        .demand(0)
        .ok()
        .and_then(|(dp, dq)| {
            solve_network(case, &action, dp, dq, &VoltagePhasors::flat(case.n_bus).0, cfg.newton()).ok()
        })
        .map(|r| r.0 .0)
        .unwrap_or_else(|| VoltagePhasors::flat(case.n_bus).0);
    let mut soc = vec![0.0; case.n_bus];
    for &b in &case.bess_buses {
        soc[b] = cfg.initial_soc;
    }
    EnvState {
        v_history: vec![v; cfg.horizon],
        soc,
        t: 0,
    }
}

/// Applies the first row of `block` and advances one step.
pub fn env_step(
    state: &EnvState,
    block: &ActionBlock,
    scenario: &Scenario,
    case: &GridCase,
    cfg: &EnvConfig,
) -> Result<StepOutcome, EnvError> {
    if block.rows != cfg.horizon || block.cols != case.action_dim() {
        return Err(EnvError::BlockShape {
            rows: cfg.horizon,
            cols: case.action_dim(),
            got_rows: block.rows,
            got_cols: block.cols,
        });
    }
    let mut action = denormalize(block.row(0), case)?;
    let (d_p, d_q) = scenario.demand(state.t)?;

    let mut soc = state.soc.clone();
    for (k, &bus) in case.bess_buses.iter().enumerate() {
        let (ch, dis, next) = apply_battery_limits(state.soc[bus], action.p_ch[k], action.p_dis[k], k, &case.bess, cfg.soc_tol);
        action.p_ch[k] = ch;
        action.p_dis[k] = dis;
        soc[bus] = next;
    }

    let r = reward(&action, case);
    let mut history = Vec::with_capacity(cfg.horizon);
    let t_next = state.t + 1;
    let episode_over = t_next >= scenario.episode_len;
    match solve_network(case, &action, d_p, d_q, state.newest(), cfg.newton()) {
        Ok((v, slack_p, slack_q, iterations, mismatch)) => {
            let vm = v.magnitudes();
            let (feasible_vm, feasible_slack, violation) = feasibility(case, &vm, slack_p);
            history.push(v.0);
            history.extend(state.v_history.iter().take(cfg.horizon - 1).cloned());
            Ok(StepOutcome {
                state: EnvState { v_history: history, soc, t: t_next },
                reward: r,
                done: episode_over,
                info: StepInfo {
                    applied: action,
                    vm,
                    slack_p,
                    slack_q,
                    feasible_vm,
                    feasible_slack,
                    pf_failed: false,
                    pf_iterations: iterations,
                    pf_mismatch: mismatch,
                    violation,
                },
            })
        }
        Err(err) => {
            let (iterations, mismatch) = match &err {
                PfError::NonConvergence { iterations, mismatch, .. } => (*iterations, *mismatch),
                _ => (0, f64::INFINITY),
            };
            history.push(state.newest().to_vec());
            history.extend(state.v_history.iter().take(cfg.horizon - 1).cloned());
            let vm = state.newest().iter().map(|v| v.norm()).collect();
            Ok(StepOutcome {
                state: EnvState { v_history: history, soc, t: t_next },
                reward: cfg.r_fail,
                done: true,
                info: StepInfo {
                    applied: action,
                    vm,
                    slack_p: f64::NAN,
                    slack_q: f64::NAN,
                    feasible_vm: false,
                    feasible_slack: false,
                    pf_failed: true,
                    pf_iterations: iterations,
                    pf_mismatch: mismatch,
                    violation: 1.0,
                },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{bundled_case, CaseFile};

    fn one_gen_case(a: f64, b: f64, c: f64) -> GridCase {
        let text = format!(
            r#"{{"base_mva":100,
            "buses":[{{"id":1,"v_min":0.9,"v_max":1.1,"d_p":0,"d_q":0}},{{"id":2,"v_min":0.9,"v_max":1.1,"d_p":0,"d_q":0}}],
            "branches":[{{"from":1,"to":2,"r":0.0384615,"x":0.1923077,"b_shunt":0}}],
            "generators":[{{"bus":1,"p_min":0,"p_max":4,"q_min":-1,"q_max":1,"cost_a":{a},"cost_b":{b},"cost_c":{c},"is_slack":true}}],
            "bess":[{{"bus":2,"p_ch_rated":0.4,"p_dis_rated":0.4,"eta_ch":0.98,"eta_dis":0.98,"soc_min":0,"soc_max":1}}],
            "dt_over_ecap":0.005}}"#
        );
        let file: CaseFile = serde_json::from_str(&text).unwrap();
        file.into_case().unwrap()
    }

    #[test]
    fn denormalize_endpoints_and_midpoint() {
        let case = one_gen_case(0.0, 1.0, 0.0);
        let lo = denormalize(&[0.0, 0.0, 0.0, 0.0], &case).unwrap();
        assert_eq!(lo.g_p, vec![0.0]);
        assert_eq!(lo.g_q, vec![-1.0]);
        let hi = denormalize(&[1.0, 1.0, 0.25, 0.0], &case).unwrap();
        assert_eq!(hi.g_p, vec![4.0]);
        assert!((hi.p_ch[0] - 0.1).abs() < 1e-15);
        let mid = denormalize(&[0.5, 0.5, 0.0, 0.0], &case).unwrap();
        assert_eq!(mid.g_p, vec![2.0]);
        assert!(matches!(
            denormalize(&[1.5, 0.0, 0.0, 0.0], &case),
            Err(EnvError::ActionOutOfRange { index: 0, .. })
        ));
    }

    fn bess(eta_ch: f64, eta_dis: f64) -> BessParams {
        BessParams {
            e_cap: 1000.0,
            dt: 18.0,
            dt_over_ecap: 0.005,
            eta_ch: vec![eta_ch],
            eta_dis: vec![eta_dis],
            p_ch_rated: vec![10.0],
            p_dis_rated: vec![10.0],
            soc_min: vec![0.0],
            soc_max: vec![1.0],
        }
    }

    #[test]
    fn soc_step_examples() {
        let b = bess(0.98, 0.98);
        assert_eq!(soc_step(&[0.5], &[0.0], &[0.0], &b), vec![0.5]);
        assert!((soc_step(&[0.5], &[10.0], &[0.0], &b)[0] - 0.549).abs() < 1e-12);
        assert!((soc_step(&[0.5], &[0.0], &[9.8], &b)[0] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_action_for_soc(1.0, 5.0, 2.0, 0.0, 1.0, 1e-9), (0.0, 2.0));
        assert_eq!(clamp_action_for_soc(0.0, 5.0, 2.0, 0.0, 1.0, 1e-9), (5.0, 0.0));
        assert_eq!(clamp_action_for_soc(0.5, 5.0, 2.0, 0.0, 1.0, 1e-9), (5.0, 2.0));
    }

    #[test]
    fn battery_limits_land_on_bound() {
        let b = bess(0.98, 0.98);
        let (ch, dis, next) = apply_battery_limits(0.99, 10.0, 0.0, 0, &b, 1e-9);
        assert!((next - 1.0).abs() < 1e-12);
        assert!(ch < 10.0 && ch > 0.0);
        assert_eq!(dis, 0.0);
        let (_, dis, next) = apply_battery_limits(0.01, 0.0, 10.0, 0, &b, 1e-9);
        assert!(next.abs() < 1e-12);
        assert!(dis < 10.0);
    }

    #[test]
    fn reward_examples() {
        let case = one_gen_case(0.0, 0.0, 0.0);
        let zero = PhysicalAction { g_p: vec![0.0], g_q: vec![0.0], p_ch: vec![0.0], p_dis: vec![0.0] };
        assert_eq!(reward(&zero, &case), 0.0);

        let mut lossless = one_gen_case(0.0, 1.0, 0.0);
        lossless.bess.eta_ch = vec![1.0];
        lossless.bess.eta_dis = vec![1.0];
        let a = PhysicalAction { g_p: vec![2.0], g_q: vec![0.0], p_ch: vec![0.3], p_dis: vec![0.1] };
        assert_eq!(reward(&a, &lossless), -2.0);

        let case = one_gen_case(0.1, 1.0, 0.0);
        let a = PhysicalAction { g_p: vec![2.0], g_q: vec![0.0], p_ch: vec![10.0], p_dis: vec![9.8] };
        assert!((reward(&a, &case) + 2.8).abs() < 1e-12);
    }

    #[test]
    fn null_dynamics_keep_flat_voltages() {
        let case = one_gen_case(0.0, 0.0, 0.0);
        let cfg = EnvConfig { horizon: 2, ..EnvConfig::default() };
        let scen_cfg = ScenarioConfig { episode_len: 4, wind_buses: vec![], noise_sigma: 0.0, ..ScenarioConfig::default() };
        let scenario = generate_scenario(&case, &scen_cfg, cfg.horizon);
        assert!(scenario.d_p.iter().flatten().all(|x| *x == 0.0));
        let state = initial_state(&case, &scenario, &cfg);
        let mut block = ActionBlock::constant(2, case.action_dim(), 0.0);
        // g_q = 0 needs u = 0.5 on [-1, 1]
        block.data[1] = 0.5;
        let out = env_step(&state, &block, &scenario, &case, &cfg).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(out.state.newest().iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-10));
        assert_eq!(out.state.soc, state.soc);
    }

    #[test]
    fn charging_a_full_battery_is_refused() {
        let case = one_gen_case(0.0, 1.0, 0.0);
        let cfg = EnvConfig { horizon: 2, ..EnvConfig::default() };
        let scenario = generate_scenario(&case, &ScenarioConfig { episode_len: 4, wind_buses: vec![], ..Default::default() }, 2);
        let mut state = initial_state(&case, &scenario, &cfg);
        state.soc[1] = 1.0;
        let mut block = ActionBlock::constant(2, case.action_dim(), 0.5);
        block.data[2] = 1.0; // full charge request
        block.data[3] = 0.0;
        let out = env_step(&state, &block, &scenario, &case, &cfg).unwrap();
        assert_eq!(out.info.applied.p_ch, vec![0.0]);
        assert_eq!(out.state.soc[1], 1.0);
    }

    #[test]
    fn history_window_shifts() {
        let case = bundled_case("ieee14").unwrap();
        let cfg = EnvConfig::default();
        let scenario = generate_scenario(&case, &ScenarioConfig::default(), cfg.horizon);
        let s0 = initial_state(&case, &scenario, &cfg);
        let block = ActionBlock::constant(cfg.horizon, case.action_dim(), 0.5);
        let s1 = env_step(&s0, &block, &scenario, &case, &cfg).unwrap().state;
        let s2 = env_step(&s1, &block, &scenario, &case, &cfg).unwrap().state;
        assert_eq!(&s2.v_history[1..], &s1.v_history[..cfg.horizon - 1]);
        assert_eq!(s2.t, 2);
    }

    #[test]
    fn unused_rows_do_not_change_reward() {
        let case = bundled_case("ieee14").unwrap();
        let cfg = EnvConfig::default();
        let scenario = generate_scenario(&case, &ScenarioConfig::default(), cfg.horizon);
        let s0 = initial_state(&case, &scenario, &cfg);
        let a = ActionBlock::constant(cfg.horizon, case.action_dim(), 0.5);
        let mut b = a.clone();
        for x in &mut b.data[case.action_dim()..] {
            *x = 0.9;
        }
        let ra = env_step(&s0, &a, &scenario, &case, &cfg).unwrap();
        let rb = env_step(&s0, &b, &scenario, &case, &cfg).unwrap();
        assert_eq!(ra.reward, rb.reward);
        assert_eq!(ra.state, rb.state);
    }

    #[test]
    fn scenarios_are_reproducible() {
        let case = bundled_case("ieee14").unwrap();
        let cfg = ScenarioConfig::default().with_seed(7);
        assert_eq!(generate_scenario(&case, &cfg, 4), generate_scenario(&case, &cfg, 4));
        let quiet = ScenarioConfig { noise_sigma: 0.0, ..ScenarioConfig::default() };
        assert_eq!(
            generate_scenario(&case, &quiet.with_seed(1), 4).d_p,
            generate_scenario(&case, &quiet.with_seed(2), 4).d_p
        );
    }

    #[test]
    fn peak_demand_mean_matches_multiplier() {
        let case = bundled_case("ieee14").unwrap();
        let cfg = ScenarioConfig { wind_buses: vec![], noise_sigma: 0.1, ..ScenarioConfig::default() };
        let peak = cfg.peak_step();
        let bus = 2; // bus 3, the largest load
        let samples: Vec<f64> = (0..1000)
            .map(|s| generate_scenario(&case, &cfg.with_seed(s), 1).d_p[peak][bus])
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let expected = case.base_d_p[bus] * cfg.profile(peak);
        assert!((mean / expected - 1.0).abs() < 0.02, "{mean} vs {expected}");
    }
}
