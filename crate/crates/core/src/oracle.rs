//! Deterministic multi-period OPF with known future demand.
//!
//! Augmented Lagrangian over the nodal balance equations and the state-of-
//! charge bounds, with projected Newton inner iterations on the box-bounded
//! variables (set-points, angles, magnitudes). The problem is nonconvex, so
//! results are local optima.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{normalize, reward, soc_delta, ActionBlock, PhysicalAction, Scenario};
use crate::exec::Exec;
use crate::grid::GridCase;
use crate::powerflow::{complex_injections, injection_derivatives};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("malformed oracle problem: {0}")]
    Shape(String),
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("no restart met the KKT tolerance (best primal {:.3e}, stationarity {:.3e})", .0.kkt.primal, .0.kkt.stationarity)]
    MaxIterations(Box<OracleSolution>),
    #[error("optimal gap undefined: {0}")]
    Gap(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub restarts: usize,
    pub seed: u64,
    pub rho0: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_outer: 60, max_inner: 100, restarts: 5, seed: 0, rho0: 10.0 }
    }
}

/// Demand rows for `T` consecutive steps and the storage level before the first.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleProblem {
    pub d_p: Vec<Vec<f64>>,
    pub d_q: Vec<Vec<f64>>,
    /// One entry per storage device.
    pub soc0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub actions: Vec<PhysicalAction>,
    pub vm: Vec<Vec<f64>>,
    pub va: Vec<Vec<f64>>,
    /// Storage level after each step.
    pub soc: Vec<Vec<f64>>,
    /// Generation cost plus storage conversion losses, summed over steps.
    pub objective: f64,
    pub step_costs: Vec<f64>,
    pub kkt: KktResiduals,
    pub outer_iterations: usize,
    pub restart: usize,
}

/// Variable layout of one step: `[g_p, g_q, p_ch, p_dis, theta_ns, vm_ns]`.
struct Layout {
    n: usize,
    g: usize,
    b: usize,
    ns: Vec<usize>,
    m: usize,
    t: usize,
}

impl Layout {
    fn new(case: &GridCase, t: usize) -> Self {
        let ns = case.non_slack_buses();
        let (g, b) = (case.n_gen, case.n_bess);
        Self { n: case.n_bus, g, b, m: 2 * g + 2 * b + 2 * ns.len(), ns, t }
    }
    fn ch(&self) -> usize {
        2 * self.g
    }
    fn dis(&self) -> usize {
        2 * self.g + self.b
    }
    fn th(&self) -> usize {
        2 * self.g + 2 * self.b
    }
    fn vm(&self) -> usize {
        self.th() + self.ns.len()
    }
    fn len(&self) -> usize {
        self.m * self.t
    }
}

struct Model<'a> {
    case: &'a GridCase,
    prob: &'a OracleProblem,
    lay: Layout,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// d soc / d p_ch and d soc / d p_dis per device.
    dsoc: Vec<(f64, f64)>,
}

/// Multiplier weights on the balance rows and SOC rows.
struct Weights {
    eq: Vec<f64>,
    ineq: Vec<f64>,
}

impl<'a> Model<'a> {
    fn new(case: &'a GridCase, prob: &'a OracleProblem) -> Self {
        let lay = Layout::new(case, prob.d_p.len());
        let mut lo = Vec::with_capacity(lay.len());
        let mut hi = Vec::with_capacity(lay.len());
        for _ in 0..lay.t {
            lo.extend(&case.gen_p_min);
            hi.extend(&case.gen_p_max);
            lo.extend(&case.gen_q_min);
            hi.extend(&case.gen_q_max);
            lo.extend(std::iter::repeat_n(0.0, lay.b));
            hi.extend(&case.bess.p_ch_rated);
            lo.extend(std::iter::repeat_n(0.0, lay.b));
            hi.extend(&case.bess.p_dis_rated);
            lo.extend(std::iter::repeat_n(-std::f64::consts::FRAC_PI_2, lay.ns.len()));
            hi.extend(std::iter::repeat_n(std::f64::consts::FRAC_PI_2, lay.ns.len()));
            lo.extend(lay.ns.iter().map(|&i| case.v_min[i]));
            hi.extend(lay.ns.iter().map(|&i| case.v_max[i]));
        }
        let bess = &case.bess;
        let dsoc = (0..lay.b)
            .map(|j| (bess.dt_over_ecap * bess.eta_ch[j], -bess.dt_over_ecap / bess.eta_dis[j]))
            .collect();
        Self { case, prob, lay, lo, hi, dsoc }
    }

    fn step<'x>(&self, x: &'x [f64], k: usize) -> &'x [f64] {
        &x[k * self.lay.m..(k + 1) * self.lay.m]
    }

    fn voltages(&self, xk: &[f64]) -> Vec<Complex64> {
        let l = &self.lay;
        let mut v = vec![Complex64::new(1.0, 0.0); l.n];
        for (c, &i) in l.ns.iter().enumerate() {
            v[i] = Complex64::from_polar(xk[l.vm() + c], xk[l.th() + c]);
        }
        v
    }

    fn action(&self, xk: &[f64]) -> PhysicalAction {
        let l = &self.lay;
        PhysicalAction {
            g_p: xk[..l.g].to_vec(),
            g_q: xk[l.g..2 * l.g].to_vec(),
            p_ch: xk[l.ch()..l.ch() + l.b].to_vec(),
            p_dis: xk[l.dis()..l.dis() + l.b].to_vec(),
        }
    }

    fn step_cost(&self, xk: &[f64]) -> f64 {
        -reward(&self.action(xk), self.case)
    }

    fn objective(&self, x: &[f64]) -> f64 {
        (0..self.lay.t).map(|k| self.step_cost(self.step(x, k))).sum()
    }

    /// `[P rows; Q rows]`, scheduled minus computed.
    fn balance(&self, xk: &[f64], k: usize) -> Vec<f64> {
        let (l, case) = (&self.lay, self.case);
        let mut h = vec![0.0; 2 * l.n];
        for i in 0..l.n {
            h[i] = -self.prob.d_p[k][i];
            h[l.n + i] = -self.prob.d_q[k][i];
        }
        for gi in 0..l.g {
            h[case.gen_buses[gi]] += xk[gi];
            h[l.n + case.gen_buses[gi]] += xk[l.g + gi];
        }
        for j in 0..l.b {
            h[case.bess_buses[j]] += xk[l.dis() + j] - xk[l.ch() + j];
        }
        let s = complex_injections(&self.voltages(xk), &case.y);
        for i in 0..l.n {
            h[i] -= s[i].re;
            h[l.n + i] -= s[i].im;
        }
        h
    }

    fn balance_jacobian(&self, xk: &[f64]) -> DMatrix<f64> {
        let (l, case) = (&self.lay, self.case);
        let mut jac = DMatrix::zeros(2 * l.n, l.m);
        for gi in 0..l.g {
            jac[(case.gen_buses[gi], gi)] = 1.0;
            jac[(l.n + case.gen_buses[gi], l.g + gi)] = 1.0;
        }
        for j in 0..l.b {
            jac[(case.bess_buses[j], l.ch() + j)] = -1.0;
            jac[(case.bess_buses[j], l.dis() + j)] = 1.0;
        }
        let (dva, dvm) = injection_derivatives(&self.voltages(xk), &case.y);
        for (c, &bus) in l.ns.iter().enumerate() {
            for i in 0..l.n {
                jac[(i, l.th() + c)] = -dva[(i, bus)].re;
                jac[(l.n + i, l.th() + c)] = -dva[(i, bus)].im;
                jac[(i, l.vm() + c)] = -dvm[(i, bus)].re;
                jac[(l.n + i, l.vm() + c)] = -dvm[(i, bus)].im;
            }
        }
        jac
    }

    /// `[soc - soc_max; soc_min - soc]` after every step, rows `(k, 2j + s)`.
    fn soc_rows(&self, x: &[f64]) -> Vec<f64> {
        let (l, bess) = (&self.lay, &self.case.bess);
        let mut soc = self.prob.soc0.clone();
        let mut g = Vec::with_capacity(2 * l.b * l.t);
        for k in 0..l.t {
            let xk = self.step(x, k);
            for j in 0..l.b {
                soc[j] += soc_delta(xk[l.ch() + j], xk[l.dis() + j], bess.eta_ch[j], bess.eta_dis[j], bess.dt_over_ecap);
                g.push(soc[j] - bess.soc_max[j]);
                g.push(bess.soc_min[j] - soc[j]);
            }
        }
        g
    }

    /// Adds `w * grad(row)` for SOC row `(k, j, s)`.
    fn soc_row_grad(&self, k: usize, j: usize, s: usize, w: f64, out: &mut [f64]) {
        let l = &self.lay;
        let sign = if s == 0 { 1.0 } else { -1.0 };
        let (dc, dd) = self.dsoc[j];
        for kk in 0..=k {
            out[kk * l.m + l.ch() + j] += sign * w * dc;
            out[kk * l.m + l.dis() + j] += sign * w * dd;
        }
    }

    fn cost_grad(&self, x: &[f64], out: &mut [f64]) {
        let (l, case) = (&self.lay, self.case);
        for k in 0..l.t {
            let o = k * l.m;
            for gi in 0..l.g {
                out[o + gi] += 2.0 * case.cost_a[gi] * x[o + gi] + case.cost_b[gi];
            }
            for j in 0..l.b {
                out[o + l.ch() + j] += 1.0 - case.bess.eta_ch[j];
                out[o + l.dis() + j] += 1.0 / case.bess.eta_dis[j] - 1.0;
            }
        }
    }

    /// `grad f + J_h^T w.eq + J_g^T w.ineq`.
    fn lagrangian_grad(&self, x: &[f64], w: &Weights) -> Vec<f64> {
        let l = &self.lay;
        let mut out = vec![0.0; l.len()];
        self.cost_grad(x, &mut out);
        for k in 0..l.t {
            let jac = self.balance_jacobian(self.step(x, k));
            let wk = DVector::from_column_slice(&w.eq[k * 2 * l.n..(k + 1) * 2 * l.n]);
            let g = jac.tr_mul(&wk);
            for c in 0..l.m {
                out[k * l.m + c] += g[c];
            }
        }
        self.add_soc_grads(w, &mut out);
        out
    }

    fn add_soc_grads(&self, w: &Weights, out: &mut [f64]) {
        let l = &self.lay;
        for k in 0..l.t {
            for j in 0..l.b {
                for s in 0..2 {
                    let wv = w.ineq[(k * l.b + j) * 2 + s];
                    if wv != 0.0 {
                        self.soc_row_grad(k, j, s, wv, out);
                    }
                }
            }
        }
    }
}

/// Augmented Lagrangian state for one restart.
struct Al<'m, 'a> {
    model: &'m Model<'a>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    rho: f64,
}

impl Al<'_, '_> {
    fn residuals(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.model;
        let h: Vec<f64> = (0..m.lay.t).flat_map(|k| m.balance(m.step(x, k), k)).collect();
        (h, m.soc_rows(x))
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (h, g) = self.residuals(x);
        let mut v = self.model.objective(x);
        for (hi, li) in h.iter().zip(&self.lambda) {
            v += li * hi + 0.5 * self.rho * hi * hi;
        }
        for (gi, mi) in g.iter().zip(&self.mu) {
            let s = (mi + self.rho * gi).max(0.0);
            v += (s * s - mi * mi) / (2.0 * self.rho);
        }
        v
    }

    fn weights(&self, x: &[f64]) -> Weights {
        let (h, g) = self.residuals(x);
        Weights {
            eq: h.iter().zip(&self.lambda).map(|(h, l)| l + self.rho * h).collect(),
            ineq: g.iter().zip(&self.mu).map(|(g, m)| (m + self.rho * g).max(0.0)).collect(),
        }
    }

    fn hessian(&self, x: &[f64], w: &Weights) -> DMatrix<f64> {
        let m = self.model;
        let l = &m.lay;
        let n = l.len();
        let mut hess = DMatrix::zeros(n, n);
        for k in 0..l.t {
            let o = k * l.m;
            for gi in 0..l.g {
                hess[(o + gi, o + gi)] += 2.0 * m.case.cost_a[gi];
            }
            let xk = m.step(x, k).to_vec();
            let jac = m.balance_jacobian(&xk);
            let jtj = jac.tr_mul(&jac) * self.rho;
            let wk = DVector::from_column_slice(&w.eq[k * 2 * l.n..(k + 1) * 2 * l.n]);
            // curvature of the balance rows lives in the angle/magnitude block
            let first = l.th();
            let mut curv = DMatrix::zeros(l.m, l.m);
            for c in first..l.m {
                let eps = 1e-6 * xk[c].abs().max(1.0);
                let mut up = xk.clone();
                let mut dn = xk.clone();
                up[c] += eps;
                dn[c] -= eps;
                let gu = m.balance_jacobian(&up).tr_mul(&wk);
                let gd = m.balance_jacobian(&dn).tr_mul(&wk);
                for r in 0..l.m {
                    curv[(r, c)] = (gu[r] - gd[r]) / (2.0 * eps);
                }
            }
            for r in 0..l.m {
                for c in 0..l.m {
                    let sym = if r >= first && c >= first {
                        0.5 * (curv[(r, c)] + curv[(c, r)])
                    } else {
                        0.0
                    };
                    hess[(o + r, o + c)] += jtj[(r, c)] + sym;
                }
            }
        }
        // active SOC rows contribute rho * a a^T
        let (_, g) = self.residuals(x);
        for k in 0..l.t {
            for j in 0..l.b {
                for s in 0..2 {
                    let idx = (k * l.b + j) * 2 + s;
                    if self.mu[idx] + self.rho * g[idx] > 0.0 {
                        let mut a = vec![0.0; n];
                        m.soc_row_grad(k, j, s, 1.0, &mut a);
                        let nz: Vec<usize> = (0..n).filter(|&i| a[i] != 0.0).collect();
                        for &r in &nz {
                            for &c in &nz {
                                hess[(r, c)] += self.rho * a[r] * a[c];
                            }
                        }
                    }
                }
            }
        }
        hess
    }
}

/// Value noise of the augmented Lagrangian near a minimum; decreases below it
/// cannot be resolved by the line search.
fn roundoff(f: f64) -> f64 {
    1e-14 * (1.0 + f.abs())
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..x.len()).map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs()).fold(0.0, f64::max)
}

/// Bertsekas-style projected Newton on the current augmented Lagrangian.
fn inner_solve(al: &Al, x: &mut Vec<f64>, tol: f64, max_iter: usize) -> f64 {
    let (lo, hi) = (&al.model.lo, &al.model.hi);
    let n = x.len();
    let mut pg = f64::INFINITY;
    for _ in 0..max_iter {
        let w = al.weights(x);
        let g = al.model.lagrangian_grad(x, &w);
        pg = projected_gradient_norm(x, &g, lo, hi);
        if pg <= tol {
            break;
        }
        // only variables sitting on a bound are fixed; the projection puts
        // overshooting ones there for the next iteration
        let at = |b: f64, v: f64| (v - b).abs() <= 1e-12 * (1.0 + b.abs());
        let active: Vec<bool> = (0..n)
            .map(|i| (at(lo[i], x[i]) && g[i] > 0.0) || (at(hi[i], x[i]) && g[i] < 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
        let hess = al.hessian(x, &w);
        let mut d = vec![0.0; n];
        for i in 0..n {
            if active[i] {
                d[i] = -g[i] / hess[(i, i)].abs().max(1e-8);
            }
        }
        if !free.is_empty() {
            let k = free.len();
            let hf = DMatrix::from_fn(k, k, |r, c| hess[(free[r], free[c])]);
            let gf = DVector::from_fn(k, |r, _| -g[free[r]]);
            let scale = (0..k).map(|i| hf[(i, i)].abs()).fold(1e-8, f64::max);
            let mut shift = 0.0;
            let sol = loop {
                let mut m = hf.clone();
                for i in 0..k {
                    m[(i, i)] += shift;
                }
                if let Some(ch) = m.cholesky() {
                    break ch.solve(&gf);
                }
                shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
            };
            for (r, &i) in free.iter().enumerate() {
                d[i] = sol[r];
            }
        }

        let f0 = al.value(x);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut xn: Vec<f64> = (0..n).map(|i| x[i] + step * d[i]).collect();
            project(&mut xn, lo, hi);
            let pred: f64 = (0..n)
                .map(|i| if active[i] { g[i] * (x[i] - xn[i]) } else { -step * g[i] * d[i] })
                .sum();
            let fnew = al.value(&xn);
            if fnew.is_finite() && f0 - fnew >= 1e-4 * pred - roundoff(f0) {
                *x = xn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted && !gradient_step(al, x, &g, &hess) {
            break;
        }
    }
    pg
}

/// Diagonally scaled projected gradient step with Armijo backtracking.
fn gradient_step(al: &Al, x: &mut Vec<f64>, g: &[f64], hess: &DMatrix<f64>) -> bool {
    let (lo, hi) = (&al.model.lo, &al.model.hi);
    let n = x.len();
    let f0 = al.value(x);
    let mut step = 1.0;
    for _ in 0..60 {
        let mut xn: Vec<f64> = (0..n).map(|i| x[i] - step * g[i] / hess[(i, i)].abs().max(1e-8)).collect();
        project(&mut xn, lo, hi);
        let pred: f64 = (0..n).map(|i| g[i] * (x[i] - xn[i])).sum();
        if pred <= 0.0 {
            return false;
        }
        let fnew = al.value(&xn);
        if fnew.is_finite() && f0 - fnew >= 1e-4 * pred - roundoff(f0) {
            *x = xn;
            return true;
        }
        step *= 0.5;
    }
    false
}

fn initial_point(model: &Model, restart: usize, seed: u64) -> Vec<f64> {
    let l = &model.lay;
    let mut x = vec![0.0; l.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
    for k in 0..l.t {
        for c in 0..l.m {
            let i = k * l.m + c;
            let (lo, hi) = (model.lo[i], model.hi[i]);
            x[i] = if restart == 0 {
                if c < 2 * l.g {
                    0.5 * (lo + hi)
                } else if c < l.th() {
                    0.0
                } else if c < l.vm() {
                    0.0
                } else {
                    1.0f64.clamp(lo, hi)
                }
            } else if c < 2 * l.g {
                rng.random_range(lo..=hi)
            } else if c < l.th() {
                0.5 * rng.random_range(lo..=hi)
            } else if c < l.vm() {
                rng.random_range(-0.05..0.05)
            } else {
                (1.0 + rng.random_range(-0.02..0.02f64)).clamp(lo, hi)
            };
        }
    }
    x
}

fn kkt(model: &Model, x: &[f64], lambda: &[f64], mu: &[f64]) -> KktResiduals {
    let h: Vec<f64> = (0..model.lay.t).flat_map(|k| model.balance(model.step(x, k), k)).collect();
    let g = model.soc_rows(x);
    let w = Weights { eq: lambda.to_vec(), ineq: mu.to_vec() };
    let grad = model.lagrangian_grad(x, &w);
    KktResiduals {
        stationarity: projected_gradient_norm(x, &grad, &model.lo, &model.hi),
        primal: h.iter().map(|v| v.abs()).chain(g.iter().map(|v| v.max(0.0))).fold(0.0, f64::max),
        complementarity: g.iter().zip(mu).map(|(g, m)| (g * m).abs()).fold(0.0, f64::max),
    }
}

fn solve_from(model: &Model, opts: &OracleOptions, restart: usize) -> OracleSolution {
    let l = &model.lay;
    let mut x = initial_point(model, restart, opts.seed);
    let mut al = Al {
        model,
        lambda: vec![0.0; 2 * l.n * l.t],
        mu: vec![0.0; 2 * l.b * l.t],
        rho: opts.rho0,
    };
    let mut prev_viol = f64::INFINITY;
    let mut outer = 0;
    let mut res = KktResiduals::default();
    while outer < opts.max_outer {
        outer += 1;
        let inner_tol = (0.1 * opts.tol).max(10f64.powi(-(outer as i32) - 1));
        inner_solve(&al, &mut x, inner_tol, opts.max_inner);
        let (h, g) = al.residuals(&x);
        let viol = h
            .iter()
            .map(|v| v.abs())
            .chain(g.iter().zip(&al.mu).map(|(g, m)| g.max(-m / al.rho).abs()))
            .fold(0.0, f64::max);
        for (li, hi) in al.lambda.iter_mut().zip(&h) {
            *li += al.rho * hi;
        }
        for (mi, gi) in al.mu.iter_mut().zip(&g) {
            *mi = (*mi + al.rho * gi).max(0.0);
        }
        res = kkt(model, &x, &al.lambda, &al.mu);
        if res.max() <= opts.tol {
            break;
        }
        if viol > 0.25 * prev_viol {
            al.rho = (al.rho * 10.0).min(1e8);
        }
        prev_viol = viol;
    }
    package(model, &x, res, outer, restart)
}

fn package(model: &Model, x: &[f64], kkt: KktResiduals, outer: usize, restart: usize) -> OracleSolution {
    let l = &model.lay;
    let g = model.soc_rows(x);
    let mut sol = OracleSolution {
        actions: Vec::with_capacity(l.t),
        vm: Vec::with_capacity(l.t),
        va: Vec::with_capacity(l.t),
        soc: Vec::with_capacity(l.t),
        objective: model.objective(x),
        step_costs: Vec::with_capacity(l.t),
        kkt,
        outer_iterations: outer,
        restart,
    };
    for k in 0..l.t {
        let xk = model.step(x, k);
        let v = model.voltages(xk);
        sol.actions.push(model.action(xk));
        sol.vm.push(v.iter().map(|z| z.norm()).collect());
        sol.va.push(v.iter().map(|z| z.arg()).collect());
        sol.soc.push((0..l.b).map(|j| g[(k * l.b + j) * 2] + model.case.bess.soc_max[j]).collect());
        sol.step_costs.push(model.step_cost(xk));
    }
    sol
}

fn check_problem(case: &GridCase, prob: &OracleProblem) -> Result<(), OracleError> {
    let t = prob.d_p.len();
    if t == 0 {
        return Err(OracleError::Shape("horizon must be at least one step".into()));
    }
    if prob.d_q.len() != t || prob.d_p.iter().chain(&prob.d_q).any(|r| r.len() != case.n_bus) {
        return Err(OracleError::Shape(format!("demand rows must be {t} x {} for both P and Q", case.n_bus)));
    }
    if prob.d_p.iter().chain(&prob.d_q).flatten().any(|d| !d.is_finite()) {
        return Err(OracleError::Shape("demands must be finite".into()));
    }
    if prob.soc0.len() != case.n_bess {
        return Err(OracleError::Shape(format!("expected {} initial storage levels", case.n_bess)));
    }
    let bess = &case.bess;
    for (j, &s) in prob.soc0.iter().enumerate() {
        if !(s >= bess.soc_min[j] - 1e-9 && s <= bess.soc_max[j] + 1e-9) {
            return Err(OracleError::Infeasible(format!("initial soc {s} of device {j} is outside its bounds")));
        }
    }
    // line losses are non-negative, so supply must at least cover demand
    let supply: f64 = case.gen_p_max.iter().sum::<f64>() + bess.p_dis_rated.iter().sum::<f64>();
    for (k, row) in prob.d_p.iter().enumerate() {
        let demand: f64 = row.iter().sum();
        if demand > supply + 1e-12 {
            return Err(OracleError::Infeasible(format!("step {k}: demand {demand:.4} exceeds capacity {supply:.4}")));
        }
    }
    Ok(())
}

/// Solves one multi-period problem from `opts.restarts` starting points and
/// keeps the best point that meets the KKT tolerance.
pub fn solve_multiperiod(case: &GridCase, prob: &OracleProblem, opts: &OracleOptions, exec: Exec) -> Result<OracleSolution, OracleError> {
    check_problem(case, prob)?;
    let model = Model::new(case, prob);
    let runs = exec.map_indexed(opts.restarts.max(1), |r| solve_from(&model, opts, r));
    let converged = runs.iter().filter(|s| s.kkt.max() <= opts.tol);
    if let Some(best) = converged.min_by(|a, b| a.objective.total_cmp(&b.objective)) {
        return Ok(best.clone());
    }
    let best = runs
        .into_iter()
        .min_by(|a, b| a.kkt.primal.total_cmp(&b.kkt.primal).then(a.objective.total_cmp(&b.objective)))
        .expect("at least one restart");
    Err(OracleError::MaxIterations(Box::new(best)))
}

/// Oracle plan for a whole episode, solved in consecutive blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePlan {
    pub start: usize,
    pub actions: Vec<PhysicalAction>,
    pub step_costs: Vec<f64>,
    pub objective: f64,
    pub worst_kkt: KktResiduals,
    pub all_converged: bool,
}

impl EpisodePlan {
    /// The plan framed as rewards.
    pub fn total_reward(&self) -> f64 {
        -self.objective
    }

    /// Normalized action blocks for replay: block `t` starts with the plan's
    /// action at step `t`, later rows hold the following steps.
    pub fn action_blocks(&self, case: &GridCase, horizon: usize) -> Vec<ActionBlock> {
        let rows: Vec<Vec<f64>> = self.actions.iter().map(|a| normalize(a, case)).collect();
        let last = rows.len().saturating_sub(1);
        (0..rows.len())
            .map(|t| {
                let data = (0..horizon).flat_map(|k| rows[(t + k).min(last)].clone()).collect();
                ActionBlock::new(horizon, case.action_dim(), data)
            })
            .collect()
    }
}

/// Receding-block oracle over `steps` steps of `scenario` starting at `start`,
/// with storage continuity between blocks. Blocks that miss the tolerance
/// keep their best iterate and clear `all_converged`.
pub fn solve_episode(
    case: &GridCase,
    scenario: &Scenario,
    start: usize,
    steps: usize,
    block: usize,
    soc0: &[f64],
    opts: &OracleOptions,
    exec: Exec,
) -> Result<EpisodePlan, OracleError> {
    if block == 0 {
        return Err(OracleError::Shape("block length must be positive".into()));
    }
    let mut plan = EpisodePlan {
        start,
        actions: Vec::with_capacity(steps),
        step_costs: Vec::with_capacity(steps),
        objective: 0.0,
        worst_kkt: KktResiduals::default(),
        all_converged: true,
    };
    let mut soc = soc0.to_vec();
    let mut t = start;
    while t < start + steps {
        let len = block.min(start + steps - t);
        let (d_p, d_q) = scenario.horizon(t, len).map_err(|e| OracleError::Shape(e.to_string()))?;
        let prob = OracleProblem { d_p, d_q, soc0: soc.clone() };
        let sol = match solve_multiperiod(case, &prob, opts, exec) {
            Ok(s) => s,
            Err(OracleError::MaxIterations(best)) => {
                plan.all_converged = false;
                *best
            }
            Err(e) => return Err(e),
        };
        plan.worst_kkt.stationarity = plan.worst_kkt.stationarity.max(sol.kkt.stationarity);
        plan.worst_kkt.primal = plan.worst_kkt.primal.max(sol.kkt.primal);
        plan.worst_kkt.complementarity = plan.worst_kkt.complementarity.max(sol.kkt.complementarity);
        plan.objective += sol.objective;
        plan.step_costs.extend(&sol.step_costs);
        if let Some(last) = sol.soc.last() {
            soc = last
                .iter()
                .enumerate()
                .map(|(j, s)| s.clamp(case.bess.soc_min[j], case.bess.soc_max[j]))
                .collect();
        }
        plan.actions.extend(sol.actions);
        t += len;
    }
    Ok(plan)
}

/// Mean of `(oracle - policy) / |oracle| * 100` over episodes. Episodes whose
/// oracle reward is within `1e-12` of zero are skipped.
pub fn optimal_gap(policy_rewards: &[f64], oracle_rewards: &[f64]) -> Result<f64, OracleError> {
    if policy_rewards.len() != oracle_rewards.len() {
        return Err(OracleError::Gap(format!(
            "{} policy episodes vs {} oracle episodes",
            policy_rewards.len(),
            oracle_rewards.len()
        )));
    }
    let gaps: Vec<f64> = policy_rewards
        .iter()
        .zip(oracle_rewards)
        .filter(|(_, o)| o.abs() > 1e-12)
        .map(|(p, o)| (o - p) / o.abs() * 100.0)
        .collect();
    if gaps.is_empty() {
        return Err(OracleError::Gap("no episode has a non-zero oracle reward".into()));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{env_step, generate_scenario, initial_state, EnvConfig, ScenarioConfig};
    use crate::grid::{bundled_case, CaseFile};
    use crate::powerflow::{newton_solve, NewtonOptions, PowerFlowSpec, VoltagePhasors};

    fn single_bus(bess: bool) -> GridCase {
        let bess = if bess {
            r#"[{"bus": 1, "p_ch_rated": 0.5, "p_dis_rated": 0.5, "eta_ch": 1.0, "eta_dis": 1.0, "soc_min": 0.0, "soc_max": 1.0}]"#
        } else {
            "[]"
        };
        let text = format!(
            r#"{{"base_mva": 100, "dt_over_ecap": 1.0,
                "buses": [{{"id": 1, "v_min": 0.9, "v_max": 1.1, "d_p": 1.0, "d_q": 0.2}}],
                "branches": [],
                "generators": [{{"bus": 1, "p_min": 0, "p_max": 3, "q_min": -1, "q_max": 1,
                                "cost_a": 2.0, "cost_b": 1.0, "cost_c": 0.5, "is_slack": true}}],
                "bess": {bess}}}"#
        );
        serde_json::from_str::<CaseFile>(&text).unwrap().into_case().unwrap()
    }

    fn two_bus() -> GridCase {
        let text = r#"{"base_mva": 100, "dt_over_ecap": 0.01,
            "buses": [{"id": 1, "v_min": 0.95, "v_max": 1.05, "d_p": 0.0, "d_q": 0.0},
                      {"id": 2, "v_min": 0.95, "v_max": 1.05, "d_p": 0.9, "d_q": 0.3}],
            "branches": [{"from": 1, "to": 2, "r": 0.02, "x": 0.08, "b_shunt": 0.02}],
            "generators": [
                {"bus": 1, "p_min": 0, "p_max": 2, "q_min": -1, "q_max": 1, "cost_a": 1.0, "cost_b": 1.0, "cost_c": 0, "is_slack": true},
                {"bus": 2, "p_min": 0, "p_max": 0.6, "q_min": -0.5, "q_max": 0.5, "cost_a": 3.0, "cost_b": 1.5, "cost_c": 0, "is_slack": false}]}"#;
        GridCase::from_json(text).unwrap()
    }

    #[test]
    fn degenerate_single_bus_dispatches_demand() {
        let case = single_bus(false);
        let prob = OracleProblem { d_p: vec![vec![1.3]], d_q: vec![vec![0.2]], soc0: vec![] };
        let sol = solve_multiperiod(&case, &prob, &OracleOptions::default(), Exec::Sequential).unwrap();
        assert!((sol.actions[0].g_p[0] - 1.3).abs() < 1e-6);
        let expect = 2.0 * 1.3 * 1.3 + 1.3 + 0.5;
        assert!((sol.objective - expect).abs() < 1e-5, "{} vs {expect}", sol.objective);
        assert!(sol.kkt.max() <= 1e-6);
    }

    fn two_bus_cost(case: &GridCase, gp2: f64, gq2: f64) -> Option<f64> {
        let p = vec![0.0, gp2 - 0.9];
        let q = vec![0.0, gq2 - 0.3];
        let spec = PowerFlowSpec::slack_only(case, p, q);
        let sol = newton_solve(&case.y, &spec, &VoltagePhasors::flat(2), NewtonOptions::default()).ok()?;
        let s = complex_injections(&sol.v.0, &case.y);
        let vm2 = sol.v.0[1].norm();
        let (p1, q1) = (s[0].re, s[0].im);
        if !(0.95..=1.05).contains(&vm2) || !(0.0..=2.0).contains(&p1) || !(-1.0..=1.0).contains(&q1) {
            return None;
        }
        Some(p1 * p1 + p1 + 3.0 * gp2 * gp2 + 1.5 * gp2)
    }

    #[test]
    fn two_bus_matches_grid_search() {
        let case = two_bus();
        let prob = OracleProblem { d_p: vec![vec![0.0, 0.9]], d_q: vec![vec![0.0, 0.3]], soc0: vec![] };
        let sol = solve_multiperiod(&case, &prob, &OracleOptions::default(), Exec::Sequential).unwrap();
        // coarse grid, then two refinements around the incumbent
        let (mut best, mut at) = (f64::INFINITY, (0.0, 0.0));
        let (mut c, mut w) = ((0.3, 0.0), (0.3, 0.5));
        for _ in 0..3 {
            for i in 0..=40 {
                for j in 0..=40 {
                    let gp = (c.0 - w.0 + 2.0 * w.0 * i as f64 / 40.0).clamp(0.0, 0.6);
                    let gq = (c.1 - w.1 + 2.0 * w.1 * j as f64 / 40.0).clamp(-0.5, 0.5);
                    if let Some(v) = two_bus_cost(&case, gp, gq) {
                        if v < best {
                            best = v;
                            at = (gp, gq);
                        }
                    }
                }
            }
            c = at;
            w = (w.0 / 10.0, w.1 / 10.0);
        }
        assert!((sol.objective - best).abs() < 1e-3, "oracle {} vs grid {best}", sol.objective);
        assert!((sol.actions[0].g_p[1] - at.0).abs() < 1e-2);
    }

    #[test]
    fn storage_shifts_energy_to_the_expensive_step() {
        let case = single_bus(true);
        let d = [0.4, 0.4, 2.0];
        let prob = OracleProblem {
            d_p: d.iter().map(|&x| vec![x]).collect(),
            d_q: vec![vec![0.0]; 3],
            soc0: vec![0.0],
        };
        let sol = solve_multiperiod(&case, &prob, &OracleOptions::default(), Exec::Sequential).unwrap();
        assert!(sol.actions[0].p_ch[0] > 0.1 && sol.actions[1].p_ch[0] > 0.1);
        assert!(sol.actions[2].p_dis[0] > 0.1);
        let no_bess: f64 = d.iter().map(|&x| 2.0 * x * x + x + 0.5).sum();
        assert!(sol.objective < no_bess - 1e-3);
        for s in &sol.soc {
            assert!(s[0] >= -1e-6 && s[0] <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn infeasible_and_malformed_problems_are_rejected() {
        let case = single_bus(false);
        let big = OracleProblem { d_p: vec![vec![5.0]], d_q: vec![vec![0.0]], soc0: vec![] };
        assert!(matches!(solve_multiperiod(&case, &big, &OracleOptions::default(), Exec::Sequential), Err(OracleError::Infeasible(_))));
        let empty = OracleProblem { d_p: vec![], d_q: vec![], soc0: vec![] };
        assert!(matches!(solve_multiperiod(&case, &empty, &OracleOptions::default(), Exec::Sequential), Err(OracleError::Shape(_))));
    }

    #[test]
    fn ieee14_block_is_deterministic_and_feasible_on_replay() {
        let case = bundled_case("ieee14").unwrap();
        let env = EnvConfig::default();
        let scen_cfg = ScenarioConfig { episode_len: 8, ..ScenarioConfig::default() }.with_seed(3);
        let scen = generate_scenario(&case, &scen_cfg, env.horizon);
        let state = initial_state(&case, &scen, &env);
        let soc0: Vec<f64> = case.bess_buses.iter().map(|&b| state.soc[b]).collect();
        let opts = OracleOptions { restarts: 2, ..OracleOptions::default() };
        let a = solve_episode(&case, &scen, 0, 8, 4, &soc0, &opts, Exec::Parallel).unwrap();
        let b = solve_episode(&case, &scen, 0, 8, 4, &soc0, &opts, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.all_converged, "{:?}", a.worst_kkt);

        let blocks = a.action_blocks(&case, env.horizon);
        let mut s = state;
        let mut total = 0.0;
        for block in &blocks {
            let out = env_step(&s, block, &scen, &case, &env).unwrap();
            assert!(out.info.feasible_vm && out.info.feasible_slack);
            total += out.reward;
            s = out.state;
        }
        let gap = optimal_gap(&[total], &[a.total_reward()]).unwrap();
        assert!(gap.abs() < 1e-3, "replayed oracle gap {gap}");

        // the mid-range no-storage dispatch costs at least as much
        let mid = ActionBlock::constant(env.horizon, case.action_dim(), 0.5);
        let mut blk = mid.clone();
        for k in 0..env.horizon {
            for j in 0..2 * case.n_bess {
                blk.data[k * case.action_dim() + 2 * case.n_gen + j] = 0.0;
            }
        }
        let mut s = initial_state(&case, &scen, &env);
        let mut heuristic = 0.0;
        let mut feasible = true;
        for _ in 0..8 {
            let out = env_step(&s, &blk, &scen, &case, &env).unwrap();
            feasible &= out.info.feasible_vm && out.info.feasible_slack;
            heuristic += crate::env::realized_reward(&out.info, &case);
            s = out.state;
        }
        if feasible {
            assert!(a.total_reward() >= heuristic - 1e-6);
        }
    }

    #[test]
    fn gap_examples() {
        assert_eq!(optimal_gap(&[-11.0], &[-10.0]).unwrap(), 10.0);
        assert!((optimal_gap(&[9.0], &[10.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(optimal_gap(&[-3.0, -4.0], &[-3.0, -4.0]).unwrap(), 0.0);
        assert!(optimal_gap(&[1.0], &[0.0]).is_err());
        assert!(optimal_gap(&[1.0], &[]).is_err());
    }
}
