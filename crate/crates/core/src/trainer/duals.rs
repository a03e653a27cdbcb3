use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;

/// Equality families: active balance, reactive balance, SOC recursion,
/// voltage-magnitude tie.
pub const EQ_FAMILIES: usize = 4;
/// Inequality families: SOC upper, SOC lower, voltage upper, voltage lower.
pub const INEQ_FAMILIES: usize = 4;

/// Multipliers per horizon offset, shared across states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    /// `lambda[f]` is `T x n_f`.
    pub lambda: Vec<Mat>,
    pub mu: Vec<Mat>,
    /// Penalty coefficients `alpha_1 .. alpha_8` (equalities first).
    pub alpha: [f64; 8],
    /// Dual ascent step sizes, same order as `alpha`.
    pub step: [f64; 8],
}

impl DualState {
    /// Zero multipliers for `T` offsets, `n_bus` buses and `n_bess` batteries.
    pub fn zeros(horizon: usize, n_bus: usize, n_bess: usize, alpha: [f64; 8], step: [f64; 8]) -> Self {
        let eq = [n_bus, n_bus, n_bess, n_bus];
        let ineq = [n_bess, n_bess, n_bus, n_bus];
        Self {
            lambda: eq.iter().map(|&n| Mat::zeros(horizon, n)).collect(),
            mu: ineq.iter().map(|&n| Mat::zeros(horizon, n)).collect(),
            alpha,
            step,
        }
    }

    pub fn horizon(&self) -> usize {
        self.lambda[0].rows
    }

    /// Squared distance to `other`, each family weighted by `1 / step`.
    pub fn lyapunov(&self, reference: &DualState) -> f64 {
        let mut v = 0.0;
        for f in 0..EQ_FAMILIES {
            if self.step[f] > 0.0 {
                v += sq_dist(&self.lambda[f], &reference.lambda[f]) / self.step[f];
            }
        }
        for f in 0..INEQ_FAMILIES {
            if self.step[EQ_FAMILIES + f] > 0.0 {
                v += sq_dist(&self.mu[f], &reference.mu[f]) / self.step[EQ_FAMILIES + f];
            }
        }
        v
    }

    pub fn min_mu(&self) -> f64 {
        self.mu.iter().flat_map(|m| m.data.iter().copied()).fold(f64::INFINITY, f64::min)
    }
}

fn sq_dist(a: &Mat, b: &Mat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Batch-averaged residuals per offset, same shapes as the multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSummary {
    pub eq: Vec<Mat>,
    /// Already rectified (`[.]_+`).
    pub ineq: Vec<Mat>,
}

impl ResidualSummary {
    pub fn eq_norm(&self) -> f64 {
        self.eq.iter().map(|m| m.norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn ineq_norm(&self) -> f64 {
        self.ineq.iter().map(|m| m.norm().powi(2)).sum::<f64>().sqrt()
    }
}

/// `lambda += step * r_eq`, `mu = [mu + step * r_ineq]_+`.
pub fn dual_update(duals: &DualState, res: &ResidualSummary) -> DualState {
    let mut out = duals.clone();
    for f in 0..EQ_FAMILIES {
        let s = duals.step[f];
        for (l, r) in out.lambda[f].data.iter_mut().zip(&res.eq[f].data) {
            *l += s * r;
        }
    }
    for f in 0..INEQ_FAMILIES {
        let s = duals.step[EQ_FAMILIES + f];
        for (m, r) in out.mu[f].data.iter_mut().zip(&res.ineq[f].data) {
            *m = (*m + s * r.max(0.0)).max(0.0);
        }
    }
    out
}

/// Convex toy problem `min x^2 + y^2  s.t.  x = 1, y >= 1/2`, solved by
/// exact minimization of the augmented Lagrangian followed by dual ascent.
/// Its saddle point is `lambda* = -2`, `mu* = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyQp {
    pub alpha: f64,
}

/// Dual iterates, the residuals that produced them and `V^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Trace {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// `r_lambda[k]` / `r_mu[k]` are evaluated at the primal minimizer for
    /// iterate `k - 1`; entry 0 is 0.
    pub r_lambda: Vec<f64>,
    pub r_mu: Vec<f64>,
    pub v: Vec<f64>,
}

impl Lemma1Trace {
    /// Largest violation of `V^{k+1} <= V^k - a_l r_l^2 - a_m r_m^2`.
    pub fn worst_descent_violation(&self, alpha_lambda: f64, alpha_mu: f64) -> f64 {
        (1..self.v.len())
            .map(|k| {
                self.v[k] - (self.v[k - 1] - alpha_lambda * self.r_lambda[k].powi(2) - alpha_mu * self.r_mu[k].powi(2))
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_non_increasing(&self, tol: f64) -> bool {
        self.v.windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

impl ToyQp {
    pub const LAMBDA_STAR: f64 = -2.0;
    pub const MU_STAR: f64 = 1.0;

    /// Minimizer of the augmented Lagrangian for fixed multipliers.
    pub fn primal(&self, lambda: f64, mu: f64) -> (f64, f64) {
        let a = self.alpha;
        let x = (a - lambda) / (2.0 + a);
        // mu + a (1/2 - y) stays positive at this point, so the multiplier
        // term of the inequality is always active
        let y = (mu + 0.5 * a) / (2.0 + a);
        (x, y)
    }

    pub fn run(&self, lambda0: f64, mu0: f64, iterations: usize) -> Lemma1Trace {
        let a = self.alpha;
        let mut trace = Lemma1Trace { lambda: vec![lambda0], mu: vec![mu0], r_lambda: vec![0.0], r_mu: vec![0.0], v: vec![] };
        let (mut l, mut m) = (lambda0, mu0);
        for _ in 0..iterations {
            let (x, y) = self.primal(l, m);
            let rl = x - 1.0;
            let rm = (0.5 - y).max(-m / a);
            l += a * rl;
            m = (m + a * (0.5 - y)).max(0.0);
            trace.lambda.push(l);
            trace.mu.push(m);
            trace.r_lambda.push(rl);
            trace.r_mu.push(rm);
        }
        trace.v = lemma1_monitor(&trace.lambda, &trace.mu, Self::LAMBDA_STAR, Self::MU_STAR, a, a);
        trace
    }
}

/// `V^k = |lambda^k - lambda*|^2 / a_l + |mu^k - mu*|^2 / a_m` for scalar duals.
pub fn lemma1_monitor(lambda: &[f64], mu: &[f64], lambda_star: f64, mu_star: f64, alpha_lambda: f64, alpha_mu: f64) -> Vec<f64> {
    lambda
        .iter()
        .zip(mu)
        .map(|(l, m)| (l - lambda_star).powi(2) / alpha_lambda + (m - mu_star).powi(2) / alpha_mu)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_duals(lambda: f64, mu: f64, step: f64) -> DualState {
        let mut d = DualState::zeros(1, 1, 1, [step; 8], [step; 8]);
        d.lambda[0].data[0] = lambda;
        d.mu[0].data[0] = mu;
        d
    }

    fn summary(eq: f64, ineq: f64) -> ResidualSummary {
        let mut s = ResidualSummary {
            eq: (0..4).map(|_| Mat::zeros(1, 1)).collect(),
            ineq: (0..4).map(|_| Mat::zeros(1, 1)).collect(),
        };
        s.eq[0].data[0] = eq;
        s.ineq[0].data[0] = ineq;
        s
    }

    #[test]
    fn dual_update_examples() {
        let d = scalar_duals(0.3, 0.4, 1.0);
        assert_eq!(dual_update(&d, &summary(0.0, 0.0)), d);
        let d = scalar_duals(0.0, 0.0, 1.0);
        assert!((dual_update(&d, &summary(0.0, 0.2)).mu[0].data[0] - 0.2).abs() < 1e-15);
        let d = scalar_duals(1.0, 0.0, 0.5);
        assert!((dual_update(&d, &summary(-0.1, 0.0)).lambda[0].data[0] - 0.95).abs() < 1e-15);
        let d = scalar_duals(0.0, 0.1, 1.0);
        assert!(dual_update(&d, &summary(0.0, -5.0)).min_mu() >= 0.0);
    }

    #[test]
    fn toy_converges_with_lemma_descent() {
        let toy = ToyQp { alpha: 1.0 };
        let trace = toy.run(0.0, 0.0, 500);
        assert!(trace.is_non_increasing(1e-12));
        assert!(trace.worst_descent_violation(1.0, 1.0) <= 1e-9);
        assert!(trace.r_lambda.last().unwrap().abs() < 1e-6);
        assert!(trace.r_mu.last().unwrap().abs() < 1e-6);
        assert!((trace.lambda.last().unwrap() - ToyQp::LAMBDA_STAR).abs() < 1e-6);
        assert!((trace.mu.last().unwrap() - ToyQp::MU_STAR).abs() < 1e-6);
    }

    #[test]
    fn toy_at_saddle_stays_put() {
        let trace = ToyQp { alpha: 0.7 }.run(ToyQp::LAMBDA_STAR, ToyQp::MU_STAR, 20);
        assert!(trace.v.iter().all(|&v| v.abs() < 1e-20));
    }

    #[test]
    fn halving_alpha_rescales_the_bound() {
        for alpha in [1.0, 0.5] {
            let trace = ToyQp { alpha }.run(3.0, 0.0, 50);
            assert!(trace.worst_descent_violation(alpha, alpha) <= 1e-9, "alpha {alpha}");
        }
    }
}
