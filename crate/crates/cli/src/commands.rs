use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use serde::Serialize;

use sdopf_core::env::{denormalize, env_step, generate_scenario, initial_state, nodal_injections, ActionBlock, Scenario};
use sdopf_core::exec::{set_worker_threads, Exec};
use sdopf_core::gradsuite::{network_suite, primitive_suite, SuiteEntry};
use sdopf_core::grid::GridCase;
use sdopf_core::nets::ActorNet;
use sdopf_core::oracle::{optimal_gap, solve_episode, EpisodePlan, OracleError};
use sdopf_core::powerflow::{newton_solve, NewtonOptions, PowerFlowSpec, VoltagePhasors};
use sdopf_core::trainer::{
    evaluate, rollout, train, write_metrics_csv, EvalReport, Policy, RandomPolicy, ReplayPolicy, TrainError,
};

use crate::config::{read_config, resolve_case, RolloutPolicy, RunConfig};
use crate::output::{ensure_dir, flag, num, write_json, write_manifest, Csv};
use crate::{Command, EvalPolicy, Failure, GlobalArgs};

type Res<T> = Result<T, Failure>;

trait Classify<T> {
    fn config(self) -> Res<T>;
}

impl<T> Classify<T> for anyhow::Result<T> {
    fn config(self) -> Res<T> {
        self.map_err(Failure::Config)
    }
}

/// Everything a command works with after flags and config are merged.
struct Ctx {
    cfg: RunConfig,
    case: GridCase,
    case_file: Option<PathBuf>,
    exec: Exec,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }
}

pub fn run(global: &GlobalArgs, command: &Command) -> Res<()> {
    let mut cfg = read_config(global.config.as_deref()).config()?;
    if let Some(c) = &global.case {
        cfg.case = c.clone();
    }
    if let Some(o) = &global.out {
        cfg.output_dir = o.clone();
    }
    apply_overrides(&mut cfg, command);
    cfg.trainer.validate().map_err(|e| Failure::Config(e.into()))?;
    if let Some(n) = global.threads {
        if n == 0 {
            return Err(Failure::Config(anyhow!("thread count must be positive")));
        }
        set_worker_threads(n).map_err(|e| Failure::Config(anyhow!("cannot size the worker pool: {e}")))?;
    }
    let (case, case_file) = resolve_case(&cfg.case).config()?;
    let exec = if global.sequential { Exec::Sequential } else { Exec::Parallel };
    let ctx = Ctx { cfg, case, case_file, exec };
    ensure_dir(ctx.out()).config()?;

    let (name, outputs) = match command {
        Command::Train { .. } => ("train", cmd_train(&ctx)?),
        Command::Eval { checkpoint, policy, .. } => ("eval", cmd_eval(&ctx, checkpoint.as_deref(), *policy)?),
        Command::Pf => ("pf", cmd_pf(&ctx)?),
        Command::Oracle { .. } => ("oracle", cmd_oracle(&ctx)?),
        Command::EnvRollout { .. } => ("env_rollout", cmd_env_rollout(&ctx)?),
        Command::Gradcheck { instances, tol } => ("gradcheck", cmd_gradcheck(&ctx, *instances, *tol)?),
    };
    write_manifest(ctx.out(), name, &ctx.cfg, ctx.case_file.as_deref(), &outputs.files).config()?;
    match outputs.failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Train { iterations, seed } => {
            if let Some(n) = iterations {
                cfg.trainer.iterations = *n;
            }
            if let Some(s) = seed {
                cfg.trainer.seed = *s;
            }
        }
        Command::Eval { steps, oracle_gap, .. } => {
            if let Some(n) = steps {
                cfg.eval.steps = *n;
            }
            cfg.eval.oracle_gap |= *oracle_gap;
        }
        Command::Oracle { start, steps, block, base_demand } => {
            if let Some(s) = start {
                cfg.oracle.start = *s;
            }
            if let Some(n) = steps {
                cfg.oracle.steps = *n;
            }
            if let Some(b) = block {
                cfg.oracle.block = *b;
            }
            cfg.oracle.base_demand |= *base_demand;
        }
        Command::EnvRollout { steps, policy } => {
            if let Some(n) = steps {
                cfg.rollout.steps = *n;
            }
            if let Some(p) = policy {
                cfg.rollout.policy = *p;
            }
        }
        Command::Pf | Command::Gradcheck { .. } => {}
    }
}

/// Files written by a command, plus a failure to report after the manifest
/// is on disk.
struct Outputs {
    files: Vec<PathBuf>,
    failure: Option<Failure>,
}

impl From<Vec<PathBuf>> for Outputs {
    fn from(files: Vec<PathBuf>) -> Self {
        Self { files, failure: None }
    }
}

// train

#[derive(Serialize)]
struct TrainSummary {
    algorithm: String,
    iterations: usize,
    seed: u64,
    /// Mean environment reward over the last `tail` steps.
    final_reward_mean: f64,
    tail: usize,
    feasible_vm_rate: f64,
    feasible_slack_rate: f64,
    dual_updates: usize,
    first_r_lambda: Option<f64>,
    last_r_lambda: Option<f64>,
    last_r_mu: Option<f64>,
    final_eq_residual: Option<f64>,
    final_ineq_residual: Option<f64>,
}

fn cmd_train(ctx: &Ctx) -> Res<Outputs> {
    let tc = &ctx.cfg.trainer;
    let art = train(&ctx.case, tc, ctx.exec).map_err(|e| match e {
        TrainError::Config(_) => Failure::Config(e.into()),
        _ => Failure::Numerical(anyhow::Error::new(e).context("training failed")),
    })?;
    let dir = ctx.out();
    let mut files = Vec::new();

    let (mut w, path) = crate::output::create(dir, "metrics.csv").config()?;
    write_metrics_csv(&art.metrics, &mut w).context("cannot write metrics.csv").config()?;
    std::io::Write::flush(&mut w).context("cannot write metrics.csv").config()?;
    files.push(path);

    let mut csv = Csv::new(dir, "dual_log.csv", &["step".into(), "r_lambda".into(), "r_mu".into()]).config()?;
    for &(step, rl, rm) in &art.dual_log {
        csv.row(&[step.to_string(), num(rl), num(rm)]).config()?;
    }
    files.push(csv.finish().config()?);

    let ck = dir.join("checkpoint");
    ensure_dir(&ck).config()?;
    let nets = [
        ("actor.json", &art.actor.params),
        ("predictor.json", &art.predictor.params),
        ("critic1.json", &art.critics.online[0].params),
        ("critic2.json", &art.critics.online[1].params),
    ];
    for (name, params) in nets {
        let path = ck.join(name);
        params.save(&path).with_context(|| format!("cannot write {}", path.display())).config()?;
        files.push(path);
    }

    let tail = art.metrics.len().min(100);
    let last = &art.metrics[art.metrics.len() - tail..];
    let rate = |f: &dyn Fn(&sdopf_core::trainer::MetricsRow) -> bool| {
        if tail == 0 {
            f64::NAN
        } else {
            last.iter().filter(|m| f(m)).count() as f64 / tail as f64
        }
    };
    let summary = TrainSummary {
        algorithm: serde_json::to_value(tc.algorithm).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        iterations: tc.iterations,
        seed: tc.seed,
        final_reward_mean: if tail == 0 { f64::NAN } else { last.iter().map(|m| m.reward).sum::<f64>() / tail as f64 },
        tail,
        feasible_vm_rate: rate(&|m| m.feasible_vm),
        feasible_slack_rate: rate(&|m| m.feasible_slack),
        dual_updates: art.dual_log.len(),
        first_r_lambda: art.dual_log.first().map(|d| d.1),
        last_r_lambda: art.dual_log.last().map(|d| d.1),
        last_r_mu: art.dual_log.last().map(|d| d.2),
        final_eq_residual: art.final_residuals.map(|r| r.0),
        final_ineq_residual: art.final_residuals.map(|r| r.1),
    };
    files.push(write_json(dir, "summary.json", &summary).config()?);
    println!(
        "trained {} for {} steps: final reward mean {:.4}, vm feasibility {:.3}, slack feasibility {:.3}",
        summary.algorithm, summary.iterations, summary.final_reward_mean, summary.feasible_vm_rate, summary.feasible_slack_rate
    );
    Ok(files.into())
}

// eval

#[derive(Serialize)]
struct EvalSummary {
    policy: String,
    samples: usize,
    episodes: usize,
    first_seed: u64,
    mean_reward: f64,
    episode_mean_std: f64,
    mean_realized_reward: f64,
    feasible_vm_rate: f64,
    feasible_slack_rate: f64,
    pf_failures: usize,
    /// Percent; relative to a locally optimal oracle solution.
    optimal_gap: Option<f64>,
    oracle_totals: Option<Vec<f64>>,
    oracle_all_converged: Option<bool>,
}

fn episode_lengths(total: usize, len: usize) -> Vec<usize> {
    let len = len.max(1);
    (0..total.div_ceil(len)).map(|i| len.min(total - i * len)).collect()
}

fn eval_plans(ctx: &Ctx) -> Res<Vec<EpisodePlan>> {
    let tc = &ctx.cfg.trainer;
    let soc0 = vec![tc.env.initial_soc; ctx.case.n_bess];
    let opts = ctx.cfg.oracle.options();
    episode_lengths(ctx.cfg.eval.steps, tc.scenario.episode_len)
        .iter()
        .enumerate()
        .map(|(i, &steps)| {
            let seed = ctx.cfg.eval.first_seed + i as u64;
            let scen = generate_scenario(&ctx.case, &tc.scenario.with_seed(seed), tc.env.horizon);
            solve_episode(&ctx.case, &scen, 0, steps, ctx.cfg.oracle.block, &soc0, &opts, ctx.exec)
                .map_err(|e| oracle_failure(e, &format!("oracle on scenario {seed}")))
        })
        .collect()
}

fn oracle_failure(e: OracleError, what: &str) -> Failure {
    match e {
        OracleError::Shape(_) => Failure::Config(anyhow::Error::new(e).context(what.to_string())),
        _ => Failure::Numerical(anyhow::Error::new(e).context(what.to_string())),
    }
}

fn load_actor(ctx: &Ctx, checkpoint: Option<&Path>) -> Res<ActorNet> {
    let tc = &ctx.cfg.trainer;
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.out().join("checkpoint"));
    let path = dir.join("actor.json");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut actor = ActorNet::new(&ctx.case, &tc.net, tc.env.horizon, &mut rng);
    actor
        .params
        .load_into(&path)
        .with_context(|| format!("checkpoint {} does not fit the configured case and network", path.display()))
        .config()?;
    Ok(actor)
}

fn cmd_eval(ctx: &Ctx, checkpoint: Option<&Path>, policy: EvalPolicy) -> Res<Outputs> {
    let tc = &ctx.cfg.trainer;
    let ev = &ctx.cfg.eval;
    let plans = if ev.oracle_gap || policy == EvalPolicy::Oracle { Some(eval_plans(ctx)?) } else { None };
    let report = match policy {
        EvalPolicy::Actor => {
            let actor = load_actor(ctx, checkpoint)?;
            evaluate(&actor, &ctx.case, &tc.env, &tc.scenario, ev.first_seed, ev.steps, ctx.exec)
        }
        EvalPolicy::Random => {
            let p = RandomPolicy { horizon: tc.env.horizon, action_dim: ctx.case.action_dim() };
            evaluate(&p, &ctx.case, &tc.env, &tc.scenario, ev.first_seed, ev.steps, ctx.exec)
        }
        EvalPolicy::Oracle => {
            let plans = plans.as_ref().expect("plans are solved for the oracle policy");
            let episodes = ctx.exec.map_indexed(plans.len(), |i| {
                let replay = ReplayPolicy { blocks: plans[i].action_blocks(&ctx.case, tc.env.horizon) };
                let seed = ev.first_seed + i as u64;
                rollout(&replay as &dyn Policy, &ctx.case, &tc.env, &tc.scenario, seed, plans[i].actions.len(), seed ^ 0x5eed)
            });
            EvalReport::from_episodes(episodes)
        }
    };
    let (gap, totals, converged) = match &plans {
        Some(plans) => {
            let policy_totals: Vec<f64> = report.episodes.iter().map(|e| e.total_reward()).collect();
            let oracle_totals: Vec<f64> = plans.iter().map(EpisodePlan::total_reward).collect();
            let gap = optimal_gap(&policy_totals, &oracle_totals).map_err(|e| Failure::Numerical(e.into()))?;
            (Some(gap), Some(oracle_totals), Some(plans.iter().all(|p| p.all_converged)))
        }
        None => (None, None, None),
    };

    let dir = ctx.out();
    let header: Vec<String> = ["episode_seed", "t", "reward", "realized_reward", "feasible_vm", "feasible_slack", "pf_failed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut csv = Csv::new(dir, "eval.csv", &header).config()?;
    for e in &report.episodes {
        for s in &e.steps {
            csv.row(&[
                e.scenario_seed.to_string(),
                s.t.to_string(),
                num(s.reward),
                num(s.realized_reward),
                flag(s.feasible_vm),
                flag(s.feasible_slack),
                flag(s.pf_failed),
            ])
            .config()?;
        }
    }
    let mut files = vec![csv.finish().config()?];
    let summary = EvalSummary {
        policy: format!("{policy:?}").to_lowercase(),
        samples: report.samples,
        episodes: report.episodes.len(),
        first_seed: ev.first_seed,
        mean_reward: report.mean_reward,
        episode_mean_std: report.episode_mean_std(),
        mean_realized_reward: report.mean_realized_reward,
        feasible_vm_rate: report.feasible_vm_rate,
        feasible_slack_rate: report.feasible_slack_rate,
        pf_failures: report.failures,
        optimal_gap: gap,
        oracle_totals: totals,
        oracle_all_converged: converged,
    };
    files.push(write_json(dir, "eval_summary.json", &summary).config()?);
    println!(
        "{} samples: mean reward {:.4}, vm feasibility {:.3}, slack feasibility {:.3}{}",
        summary.samples,
        summary.mean_reward,
        summary.feasible_vm_rate,
        summary.feasible_slack_rate,
        gap.map(|g| format!(", optimal gap {g:.2}% (vs a local optimum)")).unwrap_or_default()
    );
    Ok(files.into())
}

// pf

fn cmd_pf(ctx: &Ctx) -> Res<Outputs> {
    let case = &ctx.case;
    let mut action = denormalize(&vec![0.5; case.action_dim()], case).map_err(|e| Failure::Config(e.into()))?;
    action.p_ch.iter_mut().for_each(|x| *x = 0.0);
    action.p_dis.iter_mut().for_each(|x| *x = 0.0);
    let (p, q) = nodal_injections(&action, &case.base_d_p, &case.base_d_q, case);
    let spec = PowerFlowSpec::slack_only(case, p, q);
    let opts = NewtonOptions { tol: ctx.cfg.trainer.env.newton_tol, max_iter: ctx.cfg.trainer.env.newton_max_iter };
    let sol = newton_solve(&case.y, &spec, &VoltagePhasors::flat(case.n_bus), opts)
        .map_err(|e| Failure::Numerical(anyhow::Error::new(e).context("power flow")))?;
    for (k, m) in sol.mismatch_history.iter().enumerate() {
        println!("iteration {k}: mismatch inf-norm {m:e}");
    }
    println!("converged in {} iterations, final mismatch {:e}", sol.iterations, sol.final_mismatch());
    let header: Vec<String> = ["bus", "vm", "va_rad"].iter().map(|s| s.to_string()).collect();
    let mut csv = Csv::new(ctx.out(), "pf.csv", &header).config()?;
    for (i, (m, a)) in sol.v.magnitudes().iter().zip(sol.v.angles()).enumerate() {
        csv.row(&[(i + 1).to_string(), num(*m), num(a)]).config()?;
    }
    Ok(vec![csv.finish().config()?].into())
}

// oracle

#[derive(Serialize)]
struct OracleSummary {
    start: usize,
    steps: usize,
    block: usize,
    base_demand: bool,
    objective: f64,
    stationarity: f64,
    primal: f64,
    complementarity: f64,
    all_converged: bool,
}

fn action_header(case: &GridCase) -> Vec<String> {
    let mut h = Vec::new();
    h.extend((1..=case.n_gen).map(|i| format!("g_p_{i}")));
    h.extend((1..=case.n_gen).map(|i| format!("g_q_{i}")));
    h.extend((1..=case.n_bess).map(|k| format!("p_ch_{k}")));
    h.extend((1..=case.n_bess).map(|k| format!("p_dis_{k}")));
    h
}

fn cmd_oracle(ctx: &Ctx) -> Res<Outputs> {
    let o = &ctx.cfg.oracle;
    let tc = &ctx.cfg.trainer;
    let case = &ctx.case;
    let scen = if o.base_demand {
        let n = o.start + o.steps;
        Scenario {
            d_p: vec![case.base_d_p.clone(); n],
            d_q: vec![case.base_d_q.clone(); n],
            wind: vec![vec![0.0; case.n_bus]; n],
            episode_len: n,
            seed: 0,
        }
    } else {
        generate_scenario(case, &tc.scenario.with_seed(o.scenario_seed), tc.env.horizon)
    };
    let soc0 = vec![tc.env.initial_soc; case.n_bess];
    let plan = solve_episode(case, &scen, o.start, o.steps, o.block, &soc0, &o.options(), ctx.exec)
        .map_err(|e| oracle_failure(e, "oracle"))?;

    let mut header = vec!["t".to_string()];
    header.extend(action_header(case));
    header.push("cost".into());
    let mut csv = Csv::new(ctx.out(), "oracle.csv", &header).config()?;
    for (k, (a, c)) in plan.actions.iter().zip(&plan.step_costs).enumerate() {
        let mut row = vec![(o.start + k).to_string()];
        row.extend(a.g_p.iter().chain(&a.g_q).chain(&a.p_ch).chain(&a.p_dis).map(|x| num(*x)));
        row.push(num(*c));
        csv.row(&row).config()?;
    }
    let mut files = vec![csv.finish().config()?];
    let summary = OracleSummary {
        start: o.start,
        steps: o.steps,
        block: o.block,
        base_demand: o.base_demand,
        objective: plan.objective,
        stationarity: plan.worst_kkt.stationarity,
        primal: plan.worst_kkt.primal,
        complementarity: plan.worst_kkt.complementarity,
        all_converged: plan.all_converged,
    };
    files.push(write_json(ctx.out(), "oracle_summary.json", &summary).config()?);
    println!(
        "objective {:e}; kkt stationarity {:.1e}, primal {:.1e}, complementarity {:.1e}",
        plan.objective, summary.stationarity, summary.primal, summary.complementarity
    );
    let failure = (!plan.all_converged)
        .then(|| Failure::Numerical(anyhow!("oracle missed the KKT tolerance {:e} on some block", o.tol)));
    Ok(Outputs { files, failure })
}

// env-rollout

fn cmd_env_rollout(ctx: &Ctx) -> Res<Outputs> {
    let r = &ctx.cfg.rollout;
    let tc = &ctx.cfg.trainer;
    let case = &ctx.case;
    let (h, a) = (tc.env.horizon, case.action_dim());
    let scen = generate_scenario(case, &tc.scenario.with_seed(r.scenario_seed), h);
    let mut state = initial_state(case, &scen, &tc.env);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(r.policy_seed);
    let midrange = {
        let row: Vec<f64> = (0..a).map(|j| if j < 2 * case.n_gen { 0.5 } else { 0.0 }).collect();
        ActionBlock::new(h, a, row.repeat(h))
    };

    let mut header = vec!["t".to_string()];
    header.extend((1..=case.n_bess).map(|k| format!("soc_{k}")));
    header.push("reward".into());
    header.extend((1..=case.n_bus).map(|i| format!("vm_{i}")));
    header.push("slack_g_p".into());
    let mut csv = Csv::new(ctx.out(), "rollout.csv", &header).config()?;
    for _ in 0..r.steps.min(scen.episode_len) {
        let block = match r.policy {
            RolloutPolicy::Random => ActionBlock::uniform(h, a, &mut rng),
            RolloutPolicy::Midrange => midrange.clone(),
        };
        let step = env_step(&state, &block, &scen, case, &tc.env).map_err(|e| Failure::Config(e.into()))?;
        let mut row = vec![state.t.to_string()];
        row.extend(step.state.soc_devices(case).iter().map(|x| num(*x)));
        row.push(num(step.reward));
        row.extend(step.info.vm.iter().map(|x| num(*x)));
        row.push(num(step.info.slack_p));
        csv.row(&row).config()?;
        state = step.state;
    }
    Ok(vec![csv.finish().config()?].into())
}

// gradcheck

fn cmd_gradcheck(ctx: &Ctx, instances: usize, tol: f64) -> Res<Outputs> {
    let mut entries: Vec<SuiteEntry> = primitive_suite(instances, 2024).map_err(|e| Failure::Numerical(e.into()))?;
    entries.extend(network_suite(&ctx.case, instances, 500).map_err(|e| Failure::Numerical(e.into()))?);
    let header: Vec<String> = ["name", "instances", "max_rel_error", "pass"].iter().map(|s| s.to_string()).collect();
    let mut csv = Csv::new(ctx.out(), "gradcheck.csv", &header).config()?;
    let mut failed = Vec::new();
    for e in &entries {
        let ok = e.max_rel_error < tol;
        println!("{:<22} {:>3} instances  max rel error {:.2e}  {}", e.name, e.instances, e.max_rel_error, if ok { "ok" } else { "FAIL" });
        csv.row(&[e.name.clone(), e.instances.to_string(), num(e.max_rel_error), flag(ok)]).config()?;
        if !ok {
            failed.push(e.name.clone());
        }
    }
    let files = vec![csv.finish().config()?];
    let failure = (!failed.is_empty()).then(|| Failure::Numerical(anyhow!("gradient check failed for {}", failed.join(", "))));
    Ok(Outputs { files, failure })
}
