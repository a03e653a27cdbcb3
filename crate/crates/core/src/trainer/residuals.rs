//! Constraint residuals of a batch of horizon action blocks, built on the
//! autodiff tape so they can enter the actor loss.
//!
//! Rows of every residual matrix are indexed by `(sample, offset)`, i.e.
//! row `b * T + k`. The voltage phasor used in the balance equations has
//! predicted magnitudes and angles taken one decoupled Newton step away
//! from the realized operating point, so the balance residuals respond to
//! the candidate set-points while no gradient passes through the Newton
//! solve itself.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::duals::{DualState, ResidualSummary, EQ_FAMILIES, INEQ_FAMILIES};
use super::replay::Transition;
use crate::autodiff::{AdError, BlockOp, ComplexBlockOp, Mat, Tape, Var};
use crate::grid::GridCase;
use crate::powerflow::complex_injections;

/// Case-dependent constants shared by every batch.
#[derive(Debug, Clone)]
pub struct ResidualContext {
    pub n_bus: usize,
    pub n_gen: usize,
    pub n_bess: usize,
    pub horizon: usize,
    lo: Mat,
    span: Mat,
    mp: Mat,
    mq: Mat,
    soc_delta: Mat,
    non_slack: Vec<usize>,
    binv_t: Mat,
    expand: Mat,
    y_op: Arc<ComplexBlockOp>,
    cumsum: Arc<BlockOp>,
    not_slack: Mat,
    slack_one: Mat,
    soc_min: Mat,
    soc_max: Mat,
    v_min: Mat,
    v_max: Mat,
    y: DMatrix<num_complex::Complex64>,
}

impl ResidualContext {
    pub fn new(case: &GridCase, horizon: usize) -> Self {
        let (n, g, b) = (case.n_bus, case.n_gen, case.n_bess);
        let a = case.action_dim();
        let mut lo = vec![0.0; a];
        let mut span = vec![0.0; a];
        let mut mp = Mat::zeros(a, n);
        let mut mq = Mat::zeros(a, n);
        let mut soc_delta = Mat::zeros(a, b);
        for i in 0..g {
            lo[i] = case.gen_p_min[i];
            span[i] = case.gen_p_max[i] - case.gen_p_min[i];
            lo[g + i] = case.gen_q_min[i];
            span[g + i] = case.gen_q_max[i] - case.gen_q_min[i];
            *mp.at_mut(i, case.gen_buses[i]) = 1.0;
            *mq.at_mut(g + i, case.gen_buses[i]) = 1.0;
        }
        let bess = &case.bess;
        for k in 0..b {
            let (ch, dis) = (2 * g + k, 2 * g + b + k);
            span[ch] = bess.p_ch_rated[k];
            span[dis] = bess.p_dis_rated[k];
            *mp.at_mut(ch, case.bess_buses[k]) = -1.0;
            *mp.at_mut(dis, case.bess_buses[k]) = 1.0;
            *soc_delta.at_mut(ch, k) = bess.dt_over_ecap * bess.eta_ch[k];
            *soc_delta.at_mut(dis, k) = -bess.dt_over_ecap / bess.eta_dis[k];
        }

        let non_slack = case.non_slack_buses();
        let m = non_slack.len();
        let bp = DMatrix::from_fn(m, m, |r, c| -case.y[(non_slack[r], non_slack[c])].im);
        let binv = bp.try_inverse().unwrap_or_else(|| DMatrix::zeros(m, m));
        let binv_t = Mat::from_fn(m, m, |r, c| binv[(c, r)]);
        let expand = Mat::from_fn(m, n, |r, c| if non_slack[r] == c { 1.0 } else { 0.0 });

        let y_op = ComplexBlockOp::new(
            Mat::from_fn(n, n, |i, j| case.y[(i, j)].re),
            Mat::from_fn(n, n, |i, j| case.y[(i, j)].im),
        );
        let cumsum = BlockOp::new(Mat::from_fn(horizon, horizon, |i, j| if j < i { 1.0 } else { 0.0 }));
        let not_slack = Mat::from_fn(1, n, |_, j| if j == case.slack_bus { 0.0 } else { 1.0 });
        let slack_one = Mat::from_fn(1, n, |_, j| if j == case.slack_bus { 1.0 } else { 0.0 });

        Self {
            n_bus: n,
            n_gen: g,
            n_bess: b,
            horizon,
            lo: Mat::row_vector(&lo),
            span: Mat::row_vector(&span),
            mp,
            mq,
            soc_delta,
            non_slack,
            binv_t,
            expand,
            y_op,
            cumsum,
            not_slack,
            slack_one,
            soc_min: Mat::row_vector(&bess.soc_min),
            soc_max: Mat::row_vector(&bess.soc_max),
            v_min: Mat::row_vector(&case.v_min),
            v_max: Mat::row_vector(&case.v_max),
            y: case.y.clone(),
        }
    }

    pub fn action_dim(&self) -> usize {
        2 * self.n_gen + 2 * self.n_bess
    }
}

/// Per-batch constants taken from stored transitions.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub batch: usize,
    d_p: Mat,
    d_q: Mat,
    theta: Mat,
    p_calc_ns: Mat,
    vm_real: Mat,
    first: Mat,
    soc0: Mat,
    soc_real: Mat,
}

impl BatchData {
    pub fn new(ctx: &ResidualContext, case: &GridCase, batch: &[&Transition]) -> Self {
        let (n, t) = (ctx.n_bus, ctx.horizon);
        let rows = batch.len() * t;
        let mut d = BatchData {
            batch: batch.len(),
            d_p: Mat::zeros(rows, n),
            d_q: Mat::zeros(rows, n),
            theta: Mat::zeros(rows, n),
            p_calc_ns: Mat::zeros(rows, ctx.non_slack.len()),
            vm_real: Mat::zeros(rows, n),
            first: Mat::zeros(rows, 1),
            soc0: Mat::zeros(rows, ctx.n_bess),
            soc_real: Mat::zeros(rows, ctx.n_bess),
        };
        for (b, tr) in batch.iter().enumerate() {
            let v = tr.x_next.newest();
            let s = complex_injections(v, &ctx.y);
            for k in 0..t {
                let r = b * t + k;
                for i in 0..n {
                    *d.d_p.at_mut(r, i) = tr.horizon_d_p[k][i];
                    *d.d_q.at_mut(r, i) = tr.horizon_d_q[k][i];
                    *d.theta.at_mut(r, i) = v[i].arg();
                    *d.vm_real.at_mut(r, i) = v[i].norm();
                }
                for (c, &i) in ctx.non_slack.iter().enumerate() {
                    *d.p_calc_ns.at_mut(r, c) = s[i].re;
                }
                if k == 0 {
                    *d.first.at_mut(r, 0) = 1.0;
                }
                for (j, &bus) in case.bess_buses.iter().enumerate() {
                    *d.soc0.at_mut(r, j) = tr.x_prev.soc[bus];
                    *d.soc_real.at_mut(r, j) = tr.x_next.soc[bus];
                }
            }
        }
        d
    }
}

/// Residual tensors, each `(B*T) x n_f`. Inequalities are rectified.
#[derive(Debug, Clone, Copy)]
pub struct Residuals {
    pub eq: [Var; EQ_FAMILIES],
    pub ineq: [Var; INEQ_FAMILIES],
}

/// `u`: actor output `B x (T*A)`; `vm`: predicted magnitudes `B x (T*N)`.
pub fn constraint_residuals(
    tape: &mut Tape,
    ctx: &ResidualContext,
    data: &BatchData,
    u: Var,
    vm: Var,
) -> Result<Residuals, AdError> {
    let (n, t, bsz) = (ctx.n_bus, ctx.horizon, data.batch);
    let rows = bsz * t;
    let c = |tape: &mut Tape, m: &Mat| tape.constant(m.clone());

    let u = tape.reshape(u, rows, ctx.action_dim())?;
    let span = c(tape, &ctx.span);
    let lo = c(tape, &ctx.lo);
    let phys = tape.mul_row(u, span)?;
    let phys = tape.add_row(phys, lo)?;

    let mp = c(tape, &ctx.mp);
    let mq = c(tape, &ctx.mq);
    let dp = c(tape, &data.d_p);
    let dq = c(tape, &data.d_q);
    let p_gen = tape.matmul(phys, mp)?;
    let p_sched = tape.sub(p_gen, dp)?;
    let q_gen = tape.matmul(phys, mq)?;
    let q_sched = tape.sub(q_gen, dq)?;

    // one decoupled step: theta = theta_realized + B'^-1 (P_sched - P_realized)
    let p_ns = tape.select_cols(p_sched, ctx.non_slack.clone())?;
    let p_real = c(tape, &data.p_calc_ns);
    let dp_ns = tape.sub(p_ns, p_real)?;
    let binv_t = c(tape, &ctx.binv_t);
    let expand = c(tape, &ctx.expand);
    let dtheta = tape.matmul(dp_ns, binv_t)?;
    let dtheta = tape.matmul(dtheta, expand)?;
    let theta0 = c(tape, &data.theta);
    let theta = tape.add(dtheta, theta0)?;

    // slack magnitude is fixed at 1
    let vm = tape.reshape(vm, rows, n)?;
    let keep = c(tape, &ctx.not_slack);
    let one = c(tape, &ctx.slack_one);
    let vm = tape.mul_row(vm, keep)?;
    let vm = tape.add_row(vm, one)?;

    let cos = tape.cos(theta);
    let sin = tape.sin(theta);
    let vr = tape.mul(vm, cos)?;
    let vi = tape.mul(vm, sin)?;
    let vr = tape.reshape(vr, rows * n, 1)?;
    let vi = tape.reshape(vi, rows * n, 1)?;
    let v = tape.complex(vr, vi)?;
    let yv = tape.complex_block_left(&ctx.y_op, v)?;
    let yv_conj = tape.conj(yv)?;
    let s = tape.complex_mul(v, yv_conj)?;
    let p_calc = tape.real_part(s)?;
    let q_calc = tape.imag_part(s)?;
    let p_calc = tape.reshape(p_calc, rows, n)?;
    let q_calc = tape.reshape(q_calc, rows, n)?;
    let r_p = tape.sub(p_sched, p_calc)?;
    let r_q = tape.sub(q_sched, q_calc)?;

    // magnitude tie at the applied step only
    let first = c(tape, &data.first);
    let vm_real = c(tape, &data.vm_real);
    let tie = tape.sub(vm, vm_real)?;
    let r_tie = tape.mul_col(tie, first)?;

    // SOC rolled forward through the horizon with the candidate actions
    let sd = c(tape, &ctx.soc_delta);
    let delta = tape.matmul(phys, sd)?;
    let before = tape.block_left(&ctx.cumsum, delta)?;
    let soc0 = c(tape, &data.soc0);
    let before = tape.add(before, soc0)?;
    let after = tape.add(before, delta)?;
    let soc_real = c(tape, &data.soc_real);
    let gap = tape.sub(soc_real, after)?;
    let r_soc = tape.mul_col(gap, first)?;

    let neg_max = tape.constant(ctx.soc_max.scale(-1.0));
    let over = tape.add_row(after, neg_max)?;
    let mu_soc_hi = tape.relu_plus(over);
    let neg_after = tape.neg(after);
    let smin = c(tape, &ctx.soc_min);
    let under = tape.add_row(neg_after, smin)?;
    let mu_soc_lo = tape.relu_plus(under);
    let neg_vmax = tape.constant(ctx.v_max.scale(-1.0));
    let vo = tape.add_row(vm, neg_vmax)?;
    let mu_v_hi = tape.relu_plus(vo);
    let neg_vm = tape.neg(vm);
    let vmin = c(tape, &ctx.v_min);
    let vu = tape.add_row(neg_vm, vmin)?;
    let mu_v_lo = tape.relu_plus(vu);

    Ok(Residuals {
        eq: [r_p, r_q, r_soc, r_tie],
        ineq: [mu_soc_hi, mu_soc_lo, mu_v_hi, mu_v_lo],
    })
}

fn tile(m: &Mat, batch: usize) -> Mat {
    let parts: Vec<&Mat> = (0..batch).map(|_| m).collect();
    Mat::vcat(&parts)
}

/// Batch mean of `sum lambda r + alpha/2 r^2` over families, offsets and entries.
pub fn augmented_terms(tape: &mut Tape, res: &Residuals, duals: &DualState, batch: usize) -> Result<Var, AdError> {
    let mut total: Option<Var> = None;
    let fams = res.eq.iter().zip(&duals.lambda).chain(res.ineq.iter().zip(&duals.mu));
    for (f, (&r, mult)) in fams.enumerate() {
        let w = tape.constant(tile(mult, batch));
        let lin = tape.mul(r, w)?;
        let lin = tape.sum(lin);
        let sq = tape.square(r);
        let sq = tape.sum(sq);
        let sq = tape.scale(sq, 0.5 * duals.alpha[f]);
        let term = tape.add(lin, sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("eight families");
    Ok(tape.scale(total, 1.0 / batch.max(1) as f64))
}

/// Average each residual over the batch, per offset.
pub fn summarize(tape: &Tape, res: &Residuals, batch: usize, horizon: usize) -> ResidualSummary {
    let avg = |v: Var| {
        let m = tape.value(v);
        let mut out = Mat::zeros(horizon, m.cols);
        for b in 0..batch {
            for k in 0..horizon {
                for j in 0..m.cols {
                    *out.at_mut(k, j) += m.at(b * horizon + k, j) / batch as f64;
                }
            }
        }
        out
    };
    ResidualSummary {
        eq: res.eq.iter().map(|&v| avg(v)).collect(),
        ineq: res.ineq.iter().map(|&v| avg(v)).collect(),
    }
}
