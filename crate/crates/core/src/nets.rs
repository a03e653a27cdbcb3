//! Complex spatio-temporal graph-convolutional actor, voltage-magnitude
//! predictor and feed-forward critics.
//!
//! Node features of one state are an `N x 2T` complex matrix: columns
//! `0..T` hold the voltage history (newest first) and columns `T..2T` the
//! state of charge, repeated over the window. A batch stacks samples
//! vertically, `B*N` rows.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{complex_powers, graph_filter, temporal_conv, AdError, ComplexBlockOp, Mat, ParamSet, Tape, Var};
use crate::env::{ActionBlock, EnvState};
use crate::exec::Exec;
use crate::grid::GridCase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Graph filter order `K` (number of taps).
    pub k: usize,
    /// Temporal channels `K_t`.
    pub k_t: usize,
    /// Complex features after the trunk graph filter.
    pub gcn_features: usize,
    /// Complex features after each branch graph filter.
    pub branch_features: usize,
    /// Width of the dense layers.
    pub hidden: usize,
    /// Divide `Y` by its spectral radius before using it as the shift operator.
    pub normalize_gso: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            k: 3,
            k_t: 8,
            gcn_features: 8,
            branch_features: 4,
            hidden: 256,
            normalize_gso: true,
        }
    }
}

/// Largest eigenvalue magnitude of `y` by power iteration.
pub fn spectral_radius(y: &DMatrix<Complex64>) -> f64 {
    let n = y.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = nalgebra::DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.05 * i as f64));
    x /= Complex64::new(x.norm(), 0.0);
    let mut est = 0.0;
    for _ in 0..500 {
        let z = y * &x;
        let norm = z.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = z / Complex64::new(norm, 0.0);
        let done = (norm - est).abs() <= 1e-12 * norm;
        est = norm;
        x = next;
        if done {
            break;
        }
    }
    est
}

/// Shift operator used by the graph filters.
pub fn graph_shift(case: &GridCase, normalize: bool) -> (Mat, Mat) {
    let n = case.n_bus;
    let scale = if normalize {
        let rho = spectral_radius(&case.y);
        if rho > 0.0 {
            1.0 / rho
        } else {
            1.0
        }
    } else {
        1.0
    };
    (
        Mat::from_fn(n, n, |i, j| case.y[(i, j)].re * scale),
        Mat::from_fn(n, n, |i, j| case.y[(i, j)].im * scale),
    )
}

/// Batch of actor/predictor inputs, `(B*N) x 4T` in the complex layout.
pub fn node_features(states: &[&EnvState], horizon: usize) -> Mat {
    let n = states.first().map_or(0, |s| s.soc.len());
    let w = 2 * horizon;
    let mut out = Mat::zeros(states.len() * n, 2 * w);
    for (b, s) in states.iter().enumerate() {
        for i in 0..n {
            let r = b * n + i;
            for tau in 0..horizon {
                let v = s.v_history[tau][i];
                *out.at_mut(r, tau) = v.re;
                *out.at_mut(r, w + tau) = v.im;
                *out.at_mut(r, horizon + tau) = s.soc[i];
            }
        }
    }
    out
}

/// Flat critic state encoding: real parts, imaginary parts, then soc.
pub fn critic_state_features(states: &[&EnvState], horizon: usize) -> Mat {
    let n = states.first().map_or(0, |s| s.soc.len());
    let d = 2 * n * horizon + n;
    let mut out = Mat::zeros(states.len(), d);
    for (b, s) in states.iter().enumerate() {
        let row = &mut out.data[b * d..(b + 1) * d];
        for tau in 0..horizon {
            for i in 0..n {
                row[tau * n + i] = s.v_history[tau][i].re;
                row[n * horizon + tau * n + i] = s.v_history[tau][i].im;
            }
        }
        row[2 * n * horizon..].copy_from_slice(&s.soc);
    }
    out
}

/// Action blocks as rows of a `B x (T*A)` matrix.
pub fn blocks_to_mat(blocks: &[&ActionBlock]) -> Mat {
    let d = blocks.first().map_or(0, |b| b.data.len());
    let mut data = Vec::with_capacity(blocks.len() * d);
    for b in blocks {
        data.extend_from_slice(&b.data);
    }
    Mat::from_vec(blocks.len(), d, data)
}

pub fn mat_to_blocks(m: &Mat, horizon: usize) -> Vec<ActionBlock> {
    (0..m.rows)
        .map(|r| ActionBlock::new(horizon, m.cols / horizon, m.row(r).to_vec()))
        .collect()
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
    let z = tape.matmul(x, w)?;
    tape.add_row(z, b)
}

/// Sizes shared by the actor and the predictor.
#[derive(Debug, Clone)]
pub struct GraphShape {
    pub n_bus: usize,
    pub horizon: usize,
    pub powers: Vec<Arc<ComplexBlockOp>>,
}

impl GraphShape {
    pub fn new(case: &GridCase, cfg: &NetConfig, horizon: usize) -> Self {
        let (re, im) = graph_shift(case, cfg.normalize_gso);
        Self {
            n_bus: case.n_bus,
            horizon,
            powers: complex_powers(&re, &im, cfg.k.max(1)),
        }
    }
}

fn add_complex_init(p: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> usize {
    let std = (1.0 / (2.0 * rows as f64)).sqrt();
    p.add_complex(name, Mat::randn(rows, 2 * cols, std, rng))
}

fn add_dense_init(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> (usize, usize) {
    let std = gain * (1.0 / fan_in as f64).sqrt();
    let w = p.add(format!("{name}.w"), Mat::randn(fan_in, fan_out, std, rng));
    let b = p.add(format!("{name}.b"), Mat::zeros(1, fan_out));
    (w, b)
}

/// Parameter indices of the temporal conv + graph filter + CReLU trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrunkIds {
    gamma: usize,
    taps: Vec<usize>,
}

impl TrunkIds {
    fn init(p: &mut ParamSet, prefix: &str, cfg: &NetConfig, horizon: usize, rng: &mut impl Rng) -> Self {
        let gamma = add_complex_init(p, &format!("{prefix}.gamma"), 2 * horizon, cfg.k_t, rng);
        let taps = (0..cfg.k.max(1))
            .map(|k| add_complex_init(p, &format!("{prefix}.h{k}"), cfg.k_t, cfg.gcn_features, rng))
            .collect();
        Self { gamma, taps }
    }

    fn forward(&self, tape: &mut Tape, shape: &GraphShape, vars: &[Var], x: Var) -> Result<Var, AdError> {
        let z = temporal_conv(tape, x, vars[self.gamma])?;
        let taps: Vec<Var> = self.taps.iter().map(|&i| vars[i]).collect();
        let w = graph_filter(tape, &shape.powers, z, &taps)?;
        tape.crelu(w)
    }
}

/// Graph filter + CReLU + two dense ReLU layers + sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BranchIds {
    taps: Vec<usize>,
    layers: Vec<(usize, usize)>,
}

impl BranchIds {
    fn init(p: &mut ParamSet, prefix: &str, cfg: &NetConfig, n_bus: usize, out: usize, rng: &mut impl Rng) -> Self {
        let taps = (0..cfg.k.max(1))
            .map(|k| add_complex_init(p, &format!("{prefix}.h{k}"), cfg.gcn_features, cfg.branch_features, rng))
            .collect();
        let flat = n_bus * 2 * cfg.branch_features;
        let layers = vec![
            add_dense_init(p, &format!("{prefix}.fc1"), flat, cfg.hidden, 2f64.sqrt(), rng),
            add_dense_init(p, &format!("{prefix}.fc2"), cfg.hidden, cfg.hidden, 2f64.sqrt(), rng),
            add_dense_init(p, &format!("{prefix}.out"), cfg.hidden, out, 1.0, rng),
        ];
        Self { taps, layers }
    }

    fn forward(&self, tape: &mut Tape, shape: &GraphShape, vars: &[Var], z: Var, batch: usize) -> Result<Var, AdError> {
        let taps: Vec<Var> = self.taps.iter().map(|&i| vars[i]).collect();
        let w = graph_filter(tape, &shape.powers, z, &taps)?;
        let w = tape.crelu(w)?;
        let cols = tape.shape(w).1;
        let mut h = tape.reshape(w, batch, shape.n_bus * cols)?;
        for (k, &(wi, bi)) in self.layers.iter().enumerate() {
            h = dense(tape, h, vars[wi], vars[bi])?;
            h = if k + 1 < self.layers.len() { tape.relu(h) } else { tape.sigmoid(h) };
        }
        Ok(h)
    }
}

/// Policy network producing normalized horizon action blocks.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub params: ParamSet,
    pub shape: GraphShape,
    pub n_gen: usize,
    pub n_bess: usize,
    trunk: TrunkIds,
    active: BranchIds,
    reactive: BranchIds,
    /// Maps `[active heads | reactive heads]` columns onto the block layout.
    order: Vec<usize>,
}

impl ActorNet {
    pub fn new(case: &GridCase, cfg: &NetConfig, horizon: usize, rng: &mut impl Rng) -> Self {
        let shape = GraphShape::new(case, cfg, horizon);
        let (g, b) = (case.n_gen, case.n_bess);
        let mut params = ParamSet::new();
        let trunk = TrunkIds::init(&mut params, "actor.trunk", cfg, horizon, rng);
        let active = BranchIds::init(&mut params, "actor.active", cfg, case.n_bus, horizon * (g + 2 * b), rng);
        let reactive = BranchIds::init(&mut params, "actor.reactive", cfg, case.n_bus, horizon * g, rng);
        let width_a = g + 2 * b;
        let base_q = horizon * width_a;
        let mut order = Vec::with_capacity(horizon * (2 * g + 2 * b));
        for t in 0..horizon {
            order.extend((0..g).map(|i| t * width_a + i));
            order.extend((0..g).map(|i| base_q + t * g + i));
            order.extend((0..2 * b).map(|i| t * width_a + g + i));
        }
        Self { params, shape, n_gen: g, n_bess: b, trunk, active, reactive, order }
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon
    }

    pub fn action_dim(&self) -> usize {
        2 * self.n_gen + 2 * self.n_bess
    }

    /// `x`: `(B*N) x 4T` complex features. Returns `B x (T*A)` in (0, 1).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AdError> {
        let batch = tape.shape(x).0 / self.shape.n_bus;
        let z = self.trunk.forward(tape, &self.shape, vars, x)?;
        let a = self.active.forward(tape, &self.shape, vars, z, batch)?;
        let q = self.reactive.forward(tape, &self.shape, vars, z, batch)?;
        let both = tape.hcat(&[a, q])?;
        tape.select_cols(both, self.order.clone())
    }

    /// Deterministic action blocks for a batch of states.
    pub fn act(&self, states: &[&EnvState], exec: Exec) -> Result<Vec<ActionBlock>, AdError> {
        let mut tape = Tape::new(exec);
        let vars = self.params.register_frozen(&mut tape)?;
        let x = tape.complex_constant(node_features(states, self.horizon()))?;
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(mat_to_blocks(tape.value(out), self.horizon()))
    }
}

/// Predicts the voltage magnitudes of the next `T` steps.
#[derive(Debug, Clone)]
pub struct PredictorNet {
    pub params: ParamSet,
    pub shape: GraphShape,
    trunk: TrunkIds,
    head: BranchIds,
    v_min: Vec<f64>,
    v_max: Vec<f64>,
}

impl PredictorNet {
    pub fn new(case: &GridCase, cfg: &NetConfig, horizon: usize, rng: &mut impl Rng) -> Self {
        let shape = GraphShape::new(case, cfg, horizon);
        let mut params = ParamSet::new();
        let trunk = TrunkIds::init(&mut params, "predictor.trunk", cfg, horizon, rng);
        let head = BranchIds::init(&mut params, "predictor.head", cfg, case.n_bus, horizon * case.n_bus, rng);
        Self { params, shape, trunk, head, v_min: case.v_min.clone(), v_max: case.v_max.clone() }
    }

    /// Normalized output `B x (T*N)` in (0, 1).
    pub fn forward_normalized(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AdError> {
        let batch = tape.shape(x).0 / self.shape.n_bus;
        let z = self.trunk.forward(tape, &self.shape, vars, x)?;
        self.head.forward(tape, &self.shape, vars, z, batch)
    }

    /// Magnitudes `(1 - u) v_min + u v_max`, `B x (T*N)`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AdError> {
        let u = self.forward_normalized(tape, vars, x)?;
        let t = self.shape.horizon;
        let span: Vec<f64> = (0..t).flat_map(|_| self.v_min.iter().zip(&self.v_max).map(|(lo, hi)| hi - lo)).collect();
        let low: Vec<f64> = (0..t).flat_map(|_| self.v_min.iter().copied()).collect();
        let span = tape.constant(Mat::row_vector(&span));
        let low = tape.constant(Mat::row_vector(&low));
        let scaled = tape.mul_row(u, span)?;
        tape.add_row(scaled, low)
    }

    pub fn predict(&self, states: &[&EnvState], exec: Exec) -> Result<Mat, AdError> {
        let mut tape = Tape::new(exec);
        let vars = self.params.register_frozen(&mut tape)?;
        let x = tape.complex_constant(node_features(states, self.shape.horizon))?;
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Three ReLU layers and a scalar output.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub params: ParamSet,
    pub horizon: usize,
    layers: Vec<(usize, usize)>,
}

impl CriticNet {
    pub fn new(case: &GridCase, cfg: &NetConfig, horizon: usize, name: &str, rng: &mut impl Rng) -> Self {
        let n = case.n_bus;
        let input = 2 * n * horizon + n + horizon * case.action_dim();
        let mut params = ParamSet::new();
        let gain = 2f64.sqrt();
        let layers = vec![
            add_dense_init(&mut params, &format!("{name}.fc1"), input, cfg.hidden, gain, rng),
            add_dense_init(&mut params, &format!("{name}.fc2"), cfg.hidden, cfg.hidden, gain, rng),
            add_dense_init(&mut params, &format!("{name}.fc3"), cfg.hidden, cfg.hidden, gain, rng),
            add_dense_init(&mut params, &format!("{name}.out"), cfg.hidden, 1, 1.0, rng),
        ];
        Self { params, horizon, layers }
    }

    /// `state`: `B x (2NT + N)`; `action`: `B x (T*A)`. Returns `B x 1`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], state: Var, action: Var) -> Result<Var, AdError> {
        let mut h = tape.hcat(&[state, action])?;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = dense(tape, h, vars[w], vars[b])?;
            if k + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn value(&self, state: &Mat, action: &Mat, exec: Exec) -> Result<Vec<f64>, AdError> {
        let mut tape = Tape::new(exec);
        let vars = self.params.register_frozen(&mut tape)?;
        let s = tape.constant(state.clone());
        let a = tape.constant(action.clone());
        let q = self.forward(&mut tape, &vars, s, a)?;
        Ok(tape.value(q).data.clone())
    }
}

/// `y = r + gamma * min(q1, q2)`.
pub fn clipped_target(r: f64, gamma: f64, q1: f64, q2: f64) -> f64 {
    r + gamma * q1.min(q2)
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<(), crate::autodiff::CheckpointError> {
    target.soft_update_from(online, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_scenario, initial_state, EnvConfig, ScenarioConfig};
    use crate::grid::bundled_case;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig { hidden: 16, gcn_features: 4, branch_features: 2, ..NetConfig::default() }
    }

    fn states(case: &GridCase, n: usize) -> Vec<EnvState> {
        let cfg = EnvConfig::default();
        let scen = generate_scenario(case, &ScenarioConfig::default(), cfg.horizon);
        let mut s = initial_state(case, &scen, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut out = Vec::new();
        for _ in 0..n {
            let block = ActionBlock::uniform(cfg.horizon, case.action_dim(), &mut rng);
            s = crate::env::env_step(&s, &block, &scen, case, &cfg).unwrap().state;
            out.push(s.clone());
        }
        out
    }

    fn zero(p: &mut ParamSet) {
        for v in &mut p.values {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_parameters_give_reference_outputs() {
        let case = bundled_case("ieee14").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = states(&case, 3);
        let refs: Vec<&EnvState> = st.iter().collect();
        let mut actor = ActorNet::new(&case, &small(), 4, &mut rng);
        zero(&mut actor.params);
        let blocks = actor.act(&refs, Exec::Sequential).unwrap();
        assert!(blocks.iter().all(|b| b.rows == 4 && b.data.iter().all(|&x| x == 0.5)));

        let mut pred = PredictorNet::new(&case, &small(), 4, &mut rng);
        zero(&mut pred.params);
        let v = pred.predict(&refs, Exec::Sequential).unwrap();
        for r in 0..v.rows {
            for (j, x) in v.row(r).iter().enumerate() {
                let i = j % case.n_bus;
                assert!((x - 0.5 * (case.v_min[i] + case.v_max[i])).abs() < 1e-15);
            }
        }

        let mut critic = CriticNet::new(&case, &small(), 4, "q1", &mut rng);
        zero(&mut critic.params);
        let q = critic
            .value(&critic_state_features(&refs, 4), &blocks_to_mat(&blocks.iter().collect::<Vec<_>>()), Exec::Sequential)
            .unwrap();
        assert_eq!(q, vec![0.0; 3]);
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let case = bundled_case("ieee14").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = ActorNet::new(&case, &small(), 4, &mut rng);
        let critic = CriticNet::new(&case, &small(), 4, "q1", &mut rng);
        let st = states(&case, 4);
        let refs: Vec<&EnvState> = st.iter().collect();
        let batch = actor.act(&refs, Exec::Parallel).unwrap();
        assert_eq!(batch, actor.act(&refs, Exec::Sequential).unwrap());
        let sf = critic_state_features(&refs, 4);
        let am = blocks_to_mat(&batch.iter().collect::<Vec<_>>());
        let qb = critic.value(&sf, &am, Exec::Sequential).unwrap();
        for (k, s) in refs.iter().enumerate() {
            let single = actor.act(&[*s], Exec::Sequential).unwrap();
            for (x, y) in single[0].data.iter().zip(&batch[k].data) {
                assert!((x - y).abs() < 1e-14);
            }
            let q = critic
                .value(&critic_state_features(&[*s], 4), &blocks_to_mat(&[&batch[k]]), Exec::Sequential)
                .unwrap();
            assert!((q[0] - qb[k]).abs() < 1e-12);
        }
        assert!(batch.iter().all(|b| b.data.iter().all(|&x| x > 0.0 && x < 1.0)));
    }

    #[test]
    fn soc_channel_and_actions_move_outputs() {
        let case = bundled_case("ieee14").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = ActorNet::new(&case, &small(), 4, &mut rng);
        let critic = CriticNet::new(&case, &small(), 4, "q1", &mut rng);
        let st = states(&case, 1);
        let mut bumped = st[0].clone();
        bumped.soc[case.bess_buses[0]] += 1e-3;
        let a = actor.act(&[&st[0]], Exec::Sequential).unwrap();
        let b = actor.act(&[&bumped], Exec::Sequential).unwrap();
        assert!(a[0].data.iter().zip(&b[0].data).any(|(x, y)| x != y));
        let sf = critic_state_features(&[&st[0]], 4);
        let mut act2 = a[0].clone();
        act2.data[0] += 1e-3;
        let q1 = critic.value(&sf, &blocks_to_mat(&[&a[0]]), Exec::Sequential).unwrap();
        let q2 = critic.value(&sf, &blocks_to_mat(&[&act2]), Exec::Sequential).unwrap();
        assert_ne!(q1, q2);
    }

    #[test]
    fn clipped_target_cases() {
        assert!((clipped_target(1.0, 0.99, 2.0, 3.0) - 2.98).abs() < 1e-12);
        assert_eq!(clipped_target(1.0, 0.0, 2.0, 3.0), 1.0);
        assert_eq!(clipped_target(1.0, 0.5, 2.0, 2.0), 2.0);
    }

    #[test]
    fn soft_update_cases_and_contraction() {
        let mut online = ParamSet::new();
        online.add("w", Mat::filled(2, 2, 1.0));
        let mut target = online.zero_like();
        soft_update(&mut target, &online, 0.005).unwrap();
        assert!(target.values[0].data.iter().all(|&x| (x - 0.005).abs() < 1e-15));
        let before = target.distance(&online);
        soft_update(&mut target, &online, 0.3).unwrap();
        assert!((target.distance(&online) - 0.7 * before).abs() < 1e-12);
        let frozen = target.clone();
        soft_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target, frozen);
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
        let mut other = ParamSet::new();
        other.add("w", Mat::zeros(1, 1));
        assert!(soft_update(&mut other, &online, 0.5).is_err());
    }

    #[test]
    fn gso_is_normalized() {
        let case = bundled_case("ieee14").unwrap();
        let (re, im) = graph_shift(&case, true);
        let y = DMatrix::from_fn(case.n_bus, case.n_bus, |i, j| Complex64::new(re.at(i, j), im.at(i, j)));
        assert!((spectral_radius(&y) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_keeps_outputs() {
        let case = bundled_case("ieee14").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let actor = ActorNet::new(&case, &small(), 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("actor.json");
        actor.params.save(&path).unwrap();
        let mut other = ActorNet::new(&case, &small(), 4, &mut ChaCha8Rng::seed_from_u64(99));
        other.params.load_into(&path).unwrap();
        let st = states(&case, 1);
        assert_eq!(actor.act(&[&st[0]], Exec::Sequential).unwrap(), other.act(&[&st[0]], Exec::Sequential).unwrap());
    }
}
