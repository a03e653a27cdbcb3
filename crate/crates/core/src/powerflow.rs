//! AC power-flow evaluation and a polar-form Newton-Raphson solver.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::grid::GridCase;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")]
    NonConvergence {
        iterations: usize,
        mismatch: f64,
        /// Best iterate seen, for diagnostics.
        best: Vec<Complex64>,
    },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

/// Complex bus voltages `v_n = |v_n| e^{j theta_n}` in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltagePhasors(pub Vec<Complex64>);

impl VoltagePhasors {
    pub fn flat(n: usize) -> Self {
        Self(vec![Complex64::new(1.0, 0.0); n])
    }

    pub fn from_polar(vm: &[f64], va: &[f64]) -> Self {
        Self(vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect())
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.norm()).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.arg()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Scheduled net injections and bus classification for one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSpec {
    pub p_injection: Vec<f64>,
    pub q_injection: Vec<f64>,
    pub bus_types: Vec<BusType>,
    /// Voltage magnitude set-points; used at slack and PV buses.
    pub vm_setpoint: Vec<f64>,
    pub slack_angle: f64,
}

impl PowerFlowSpec {
    /// Slack bus at 1∠0 and every other bus PQ: all device set-points are fixed
    /// and only the slack balances the network.
    pub fn slack_only(case: &GridCase, p_injection: Vec<f64>, q_injection: Vec<f64>) -> Self {
        let mut bus_types = vec![BusType::Pq; case.n_bus];
        bus_types[case.slack_bus] = BusType::Slack;
        Self {
            p_injection,
            q_injection,
            bus_types,
            vm_setpoint: vec![1.0; case.n_bus],
            slack_angle: 0.0,
        }
    }

    fn validate(&self, n: usize) -> Result<(), PfError> {
        if self.p_injection.len() != n
            || self.q_injection.len() != n
            || self.bus_types.len() != n
            || self.vm_setpoint.len() != n
        {
            return Err(PfError::Dimension(format!("spec vectors must have length {n}")));
        }
        let slacks = self.bus_types.iter().filter(|t| **t == BusType::Slack).count();
        if slacks != 1 {
            return Err(PfError::Dimension(format!("exactly one slack bus required, got {slacks}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfSolution {
    pub v: VoltagePhasors,
    pub iterations: usize,
    /// Mismatch infinity-norm before each iteration and after the last one.
    pub mismatch_history: Vec<f64>,
}

impl PfSolution {
    pub fn final_mismatch(&self) -> f64 {
        *self.mismatch_history.last().unwrap_or(&f64::NAN)
    }
}

/// `s_i = v_i * conj((Y v)_i)`, i.e. the diagonal of `v v^H Y^H`.
pub fn complex_injections(v: &[Complex64], y: &DMatrix<Complex64>) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut current = Complex64::new(0.0, 0.0);
            for j in 0..n {
                current += y[(i, j)] * v[j];
            }
            v[i] * current.conj()
        })
        .collect()
}

/// Scheduled minus computed injections, split into active and reactive parts.
pub fn pf_residual(v: &[Complex64], y: &DMatrix<Complex64>, p_sched: &[f64], q_sched: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = complex_injections(v, y);
    let dp = s.iter().zip(p_sched).map(|(s, p)| p - s.re).collect();
    let dq = s.iter().zip(q_sched).map(|(s, q)| q - s.im).collect();
    (dp, dq)
}

/// Partial derivatives of the complex injections with respect to voltage
/// angles and magnitudes, returned as `(dS/dVa, dS/dVm)`.
pub fn injection_derivatives(v: &[Complex64], y: &DMatrix<Complex64>) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let n = v.len();
    let vv = DVector::from_column_slice(v);
    let current = y * &vv;
    let unit: Vec<Complex64> = v
        .iter()
        .map(|x| if x.norm() > 0.0 { x / x.norm() } else { Complex64::new(1.0, 0.0) })
        .collect();
    let j = Complex64::new(0.0, 1.0);
    let mut ds_dva = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let mut ds_dvm = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for r in 0..n {
        for c in 0..n {
            // j diag(V) conj(diag(I) - Y diag(V))
            let inner = if r == c { current[r] } else { Complex64::new(0.0, 0.0) } - y[(r, c)] * v[c];
            ds_dva[(r, c)] = j * v[r] * inner.conj();
            // diag(V) conj(Y diag(Vn)) + conj(diag(I)) diag(Vn)
            let mut val = v[r] * (y[(r, c)] * unit[c]).conj();
            if r == c {
                val += current[r].conj() * unit[c];
            }
            ds_dvm[(r, c)] = val;
        }
    }
    (ds_dva, ds_dvm)
}

/// Newton-Raphson solve of the AC power-flow equations.
pub fn newton_solve(
    y: &DMatrix<Complex64>,
    spec: &PowerFlowSpec,
    v0: &VoltagePhasors,
    opts: NewtonOptions,
) -> Result<PfSolution, PfError> {
    let n = y.nrows();
    spec.validate(n)?;
    if v0.len() != n || v0.0.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
        return Err(PfError::Dimension("initial guess must be finite with one entry per bus".into()));
    }

    let pq: Vec<usize> = (0..n).filter(|&i| spec.bus_types[i] == BusType::Pq).collect();
    let pvpq: Vec<usize> = (0..n).filter(|&i| spec.bus_types[i] != BusType::Slack).collect();

    let mut vm: Vec<f64> = v0.magnitudes();
    let mut va: Vec<f64> = v0.angles();
    for i in 0..n {
        match spec.bus_types[i] {
            BusType::Slack => {
                vm[i] = spec.vm_setpoint[i];
                va[i] = spec.slack_angle;
            }
            BusType::Pv => vm[i] = spec.vm_setpoint[i],
            BusType::Pq => {}
        }
    }

    let n_eq = pvpq.len() + pq.len();
    let mismatch = |vm: &[f64], va: &[f64]| -> (DVector<f64>, f64) {
        let v = VoltagePhasors::from_polar(vm, va);
        let s = complex_injections(&v.0, y);
        let mut f = DVector::zeros(n_eq);
        for (k, &i) in pvpq.iter().enumerate() {
            f[k] = s[i].re - spec.p_injection[i];
        }
        for (k, &i) in pq.iter().enumerate() {
            f[pvpq.len() + k] = s[i].im - spec.q_injection[i];
        }
        let norm = f.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        (f, norm)
    };

    let (mut f, mut norm) = mismatch(&vm, &va);
    let mut history = vec![norm];
    let mut best = (norm, vm.clone(), va.clone());

    let mut iterations = 0;
    while norm > opts.tol || !norm.is_finite() {
        if iterations >= opts.max_iter || !norm.is_finite() {
            return Err(PfError::NonConvergence {
                iterations,
                mismatch: best.0,
                best: VoltagePhasors::from_polar(&best.1, &best.2).0,
            });
        }
        let v = VoltagePhasors::from_polar(&vm, &va);
        let (ds_dva, ds_dvm) = injection_derivatives(&v.0, y);
        let mut jac = DMatrix::zeros(n_eq, n_eq);
        let n_a = pvpq.len();
        for (r, &i) in pvpq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva[(i, k)].re;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(r, n_a + c)] = ds_dvm[(i, k)].re;
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(n_a + r, c)] = ds_dva[(i, k)].im;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(n_a + r, n_a + c)] = ds_dvm[(i, k)].im;
            }
        }
        let dx = jac
            .lu()
            .solve(&(-&f))
            .filter(|d| d.iter().all(|x| x.is_finite()))
            .ok_or(PfError::SingularJacobian { iteration: iterations })?;
        for (k, &i) in pvpq.iter().enumerate() {
            va[i] += dx[k];
        }
        for (k, &i) in pq.iter().enumerate() {
            vm[i] += dx[n_a + k];
        }
        iterations += 1;
        (f, norm) = mismatch(&vm, &va);
        history.push(norm);
        if norm < best.0 {
            best = (norm, vm.clone(), va.clone());
        }
    }

    Ok(PfSolution {
        v: VoltagePhasors::from_polar(&vm, &va),
        iterations,
        mismatch_history: history,
    })
}
