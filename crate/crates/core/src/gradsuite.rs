//! Finite-difference check of every tape primitive and of the network
//! forward passes on random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{complex_powers, gradcheck, graph_filter, temporal_conv, AdError, BlockOp, ComplexBlockOp, Mat, Tape, Var};
use crate::env::{env_step, generate_scenario, initial_state, ActionBlock, EnvConfig, EnvState, ScenarioConfig};
use crate::grid::GridCase;
use crate::nets::{critic_state_features, node_features, ActorNet, CriticNet, NetConfig, PredictorNet};

/// Worst relative error of one checked operation over all its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AdError>>;

struct PrimCase {
    name: &'static str,
    /// `(rows, cols, complex)`; `cols` counts real storage columns.
    inputs: Vec<(usize, usize, bool)>,
    op: Build,
}

fn weights(rows: usize, cols: usize, salt: f64) -> Mat {
    Mat::from_fn(rows, cols, |i, j| (0.37 * (i * 7 + j * 3) as f64 + salt).sin())
}

/// Contracts any output against fixed weights so that every entry of it
/// reaches the loss.
fn contract(t: &mut Tape, out: Var, salt: f64) -> Result<Var, AdError> {
    if t.is_complex(out) {
        let re = t.real_part(out)?;
        let im = t.imag_part(out)?;
        let a = contract(t, re, salt)?;
        let b = contract(t, im, salt + 1.0)?;
        t.add(a, b)
    } else {
        let (r, c) = t.shape(out);
        let w = t.constant(weights(r, c, salt));
        let m = t.mul(out, w)?;
        Ok(t.sum(m))
    }
}

fn unary(name: &'static str, complex: bool, f: fn(&mut Tape, Var) -> Result<Var, AdError>) -> PrimCase {
    PrimCase { name, inputs: vec![(3, 4, complex)], op: Box::new(move |t, v| f(t, v[0])) }
}

fn binary(name: &'static str, a: (usize, usize, bool), b: (usize, usize, bool), f: fn(&mut Tape, Var, Var) -> Result<Var, AdError>) -> PrimCase {
    PrimCase { name, inputs: vec![a, b], op: Box::new(move |t, v| f(t, v[0], v[1])) }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<PrimCase> {
    let s_re = Mat::randn(3, 3, 0.5, rng);
    let s_im = Mat::randn(3, 3, 0.5, rng);
    let real_op = BlockOp::new(s_re.clone());
    let cplx_op = ComplexBlockOp::new(s_re.clone(), s_im.clone());
    let powers = complex_powers(&s_re, &s_im, 3);
    let r34 = (3, 4, false);
    let c34 = (3, 4, true);
    vec![
        binary("add", r34, r34, |t, a, b| t.add(a, b)),
        binary("add_complex", c34, c34, |t, a, b| t.add(a, b)),
        binary("sub", r34, r34, |t, a, b| t.sub(a, b)),
        binary("mul", r34, r34, |t, a, b| t.mul(a, b)),
        binary("add_row", r34, (1, 4, false), |t, a, b| t.add_row(a, b)),
        binary("mul_row", r34, (1, 4, false), |t, a, b| t.mul_row(a, b)),
        binary("mul_col", r34, (3, 1, false), |t, a, b| t.mul_col(a, b)),
        unary("scale", false, |t, a| Ok(t.scale(a, -1.7))),
        unary("neg", false, |t, a| Ok(t.neg(a))),
        unary("add_scalar", false, |t, a| Ok(t.add_scalar(a, 0.3))),
        binary("matmul", r34, (4, 2, false), |t, a, b| t.matmul(a, b)),
        binary("complex_matmul", c34, (2, 6, true), |t, a, b| t.complex_matmul(a, b)),
        binary("complex_mul", c34, c34, |t, a, b| t.complex_mul(a, b)),
        PrimCase { name: "block_left", inputs: vec![(6, 2, false)], op: Box::new(move |t, v| t.block_left(&real_op, v[0])) },
        PrimCase {
            name: "complex_block_left",
            inputs: vec![(6, 4, true)],
            op: Box::new(move |t, v| t.complex_block_left(&cplx_op, v[0])),
        },
        unary("relu", false, |t, a| Ok(t.relu(a))),
        unary("relu_plus", false, |t, a| Ok(t.relu_plus(a))),
        unary("crelu", true, |t, a| t.crelu(a)),
        unary("sigmoid", false, |t, a| Ok(t.sigmoid(a))),
        unary("tanh", false, |t, a| Ok(t.tanh(a))),
        unary("sin", false, |t, a| Ok(t.sin(a))),
        unary("cos", false, |t, a| Ok(t.cos(a))),
        unary("square", false, |t, a| Ok(t.square(a))),
        unary("conj", true, |t, a| t.conj(a)),
        unary("real_part", true, |t, a| t.real_part(a)),
        unary("imag_part", true, |t, a| t.imag_part(a)),
        binary("complex", (3, 2, false), (3, 2, false), |t, a, b| t.complex(a, b)),
        unary("square_norm", true, |t, a| t.square_norm(a)),
        unary("magnitude", true, |t, a| t.magnitude(a)),
        unary("sum", false, |t, a| Ok(t.sum(a))),
        unary("mean", false, |t, a| Ok(t.mean(a))),
        unary("sum_rows", false, |t, a| Ok(t.sum_rows(a))),
        unary("sum_cols", false, |t, a| Ok(t.sum_cols(a))),
        unary("reshape", false, |t, a| t.reshape(a, 4, 3)),
        unary("select_cols", false, |t, a| t.select_cols(a, vec![3, 0, 3])),
        unary("select_rows", false, |t, a| t.select_rows(a, vec![2, 0, 2])),
        unary("select_rows_complex", true, |t, a| t.select_rows(a, vec![1, 1])),
        binary("hcat", r34, (3, 2, false), |t, a, b| t.hcat(&[a, b])),
        binary("vcat", r34, (2, 4, false), |t, a, b| t.vcat(&[a, b])),
        PrimCase {
            name: "graph_filter",
            // two stacked 3-node samples, three taps
            inputs: vec![(6, 4, true), (2, 6, true), (2, 6, true), (2, 6, true)],
            op: Box::new(move |t, v| graph_filter(t, &powers, v[0], &v[1..])),
        },
        binary("temporal_conv", (3, 8, true), (4, 4, true), temporal_conv),
    ]
}

/// Checks every primitive on `instances` random inputs each.
pub fn primitive_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>, AdError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = primitive_cases(&mut rng);
    let mut out = Vec::with_capacity(cases.len());
    for pc in &cases {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let inputs: Vec<(Mat, bool)> = pc.inputs.iter().map(|&(r, c, cx)| (Mat::randn(r, c, 1.0, &mut rng), cx)).collect();
            let salt = inst as f64;
            let chk = gradcheck(&inputs, 1e-5, |t, v| {
                let y = (pc.op)(t, v)?;
                contract(t, y, salt)
            })?;
            worst = worst.max(chk.max_rel_error);
        }
        out.push(SuiteEntry { name: pc.name.into(), instances, max_rel_error: worst });
    }
    Ok(out)
}

/// Narrow networks so that a full finite-difference sweep stays cheap.
pub fn small_net() -> NetConfig {
    NetConfig { k: 2, k_t: 2, gcn_features: 2, branch_features: 2, hidden: 6, normalize_gso: true }
}

fn visited_states(case: &GridCase, env: &EnvConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<EnvState> {
    let scen_cfg = ScenarioConfig { episode_len: 16, seed: rng.random(), ..ScenarioConfig::default() };
    let scen = generate_scenario(case, &scen_cfg, env.horizon);
    let mut s = initial_state(case, &scen, env);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let block = ActionBlock::uniform(env.horizon, case.action_dim(), rng);
        let next = env_step(&s, &block, &scen, case, env).expect("block has the environment's shape").state;
        out.push(next.clone());
        s = next;
    }
    out
}

/// Parameters as gradcheck inputs. Zero-initialized entries (the biases) are
/// redrawn: at zero a dense layer fed by an all-zero CReLU output sits exactly
/// on the ReLU kink, where central differences are meaningless.
fn random_point(params: &crate::autodiff::ParamSet, rng: &mut ChaCha8Rng) -> Vec<(Mat, bool)> {
    params
        .values
        .iter()
        .zip(&params.complex)
        .map(|(m, &c)| {
            let mut m = m.clone();
            if m.data.iter().all(|&x| x == 0.0) {
                m = Mat::randn(m.rows, m.cols, 0.1, rng);
            }
            (m, c)
        })
        .collect()
}

/// Gradients of the actor, predictor and critic outputs with respect to
/// every parameter and to the network inputs, on freshly initialized
/// networks and states visited by random rollouts.
pub fn network_suite(case: &GridCase, instances: usize, seed: u64) -> Result<Vec<SuiteEntry>, AdError> {
    let env = EnvConfig { horizon: 2, ..EnvConfig::default() };
    let cfg = small_net();
    let mut worst = [0.0f64; 3];
    for inst in 0..instances {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(inst as u64));
        let states = visited_states(case, &env, 2, &mut r);
        let refs: Vec<&EnvState> = states.iter().collect();
        let x = node_features(&refs, env.horizon);
        let salt = inst as f64;

        let actor = ActorNet::new(case, &cfg, env.horizon, &mut r);
        let mut inputs = random_point(&actor.params, &mut r);
        inputs.push((x.clone(), true));
        let chk = gradcheck(&inputs, 1e-5, |t, v| {
            let (p, x) = v.split_at(v.len() - 1);
            let y = actor.forward(t, p, x[0])?;
            contract(t, y, salt)
        })?;
        worst[0] = worst[0].max(chk.max_rel_error);

        let pred = PredictorNet::new(case, &cfg, env.horizon, &mut r);
        let mut inputs = random_point(&pred.params, &mut r);
        inputs.push((x, true));
        let chk = gradcheck(&inputs, 1e-5, |t, v| {
            let (p, x) = v.split_at(v.len() - 1);
            let y = pred.forward(t, p, x[0])?;
            contract(t, y, salt)
        })?;
        worst[1] = worst[1].max(chk.max_rel_error);

        let critic = CriticNet::new(case, &cfg, env.horizon, "q", &mut r);
        let width = env.horizon * case.action_dim();
        let act = Mat::from_vec(refs.len(), width, (0..refs.len() * width).map(|_| r.random::<f64>()).collect());
        let mut inputs = random_point(&critic.params, &mut r);
        inputs.push((critic_state_features(&refs, env.horizon), false));
        inputs.push((act, false));
        let chk = gradcheck(&inputs, 1e-5, |t, v| {
            let n = v.len();
            let q = critic.forward(t, &v[..n - 2], v[n - 2], v[n - 1])?;
            contract(t, q, salt)
        })?;
        worst[2] = worst[2].max(chk.max_rel_error);
    }
    Ok(["actor", "predictor", "critic"]
        .iter()
        .zip(worst)
        .map(|(name, w)| SuiteEntry { name: (*name).into(), instances, max_rel_error: w })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::bundled_case;

    #[test]
    fn primitives_pass_on_a_few_instances() {
        let entries = primitive_suite(3, 5).unwrap();
        assert!(entries.len() >= 35);
        for e in &entries {
            assert!(e.max_rel_error < 1e-5, "{e:?}");
        }
    }

    #[test]
    fn networks_pass_on_one_instance() {
        let case = bundled_case("ieee14").unwrap();
        for e in network_suite(&case, 1, 3).unwrap() {
            assert!(e.max_rel_error < 1e-5, "{e:?}");
        }
    }
}

