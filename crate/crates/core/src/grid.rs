//! Static network model: case loading, bus admittance matrix, device placement.
//!
//! Case files are JSON documents with 1-indexed bus numbers and per-unit
//! quantities on the `base_mva` system base. Internally every bus index is
//! 0-indexed.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed case file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid case: {0}")]
    Validation(String),
    #[error("bus index {index} out of range for {n_bus} buses")]
    IndexOutOfRange { index: usize, n_bus: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// One network branch, already converted to admittances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub series: Complex64,
    /// Shunt admittance attached at *each* end.
    pub shunt: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BessParams {
    /// Nominal energy capacity; only the ratio `dt_over_ecap` enters the dynamics.
    pub e_cap: f64,
    /// Nominal decision-period length in seconds.
    pub dt: f64,
    pub dt_over_ecap: f64,
    pub eta_ch: Vec<f64>,
    pub eta_dis: Vec<f64>,
    pub p_ch_rated: Vec<f64>,
    pub p_dis_rated: Vec<f64>,
    pub soc_min: Vec<f64>,
    pub soc_max: Vec<f64>,
}

impl BessParams {
    pub fn len(&self) -> usize {
        self.eta_ch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta_ch.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Gen,
    Bess,
}

/// 0/1 placement matrices `M_g` (N×G) and `M_b` (N×B).
#[derive(Debug, Clone, PartialEq)]
pub struct MappingMatrices {
    pub m_g: DMatrix<f64>,
    pub m_b: DMatrix<f64>,
}

impl MappingMatrices {
    pub fn new(n_bus: usize, gen_buses: &[usize], bess_buses: &[usize]) -> Self {
        let place = |buses: &[usize]| {
            let mut m = DMatrix::zeros(n_bus, buses.len());
            for (col, &bus) in buses.iter().enumerate() {
                m[(bus, col)] = 1.0;
            }
            m
        };
        Self {
            m_g: place(gen_buses),
            m_b: place(bess_buses),
        }
    }

    /// Copies device values onto their buses; zero elsewhere.
    pub fn expand_to_nodes(&self, values: &[f64], which: DeviceKind) -> Result<Vec<f64>, CaseError> {
        let m = match which {
            DeviceKind::Gen => &self.m_g,
            DeviceKind::Bess => &self.m_b,
        };
        if values.len() != m.ncols() {
            return Err(CaseError::LengthMismatch {
                expected: m.ncols(),
                got: values.len(),
            });
        }
        let out = m * DVector::from_column_slice(values);
        Ok(out.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub n_bus: usize,
    pub n_gen: usize,
    pub n_bess: usize,
    pub slack_bus: usize,
    /// Index of the slack generator within the generator list.
    pub slack_gen: usize,
    pub gen_buses: Vec<usize>,
    pub bess_buses: Vec<usize>,
    pub branches: Vec<Branch>,
    pub y: DMatrix<Complex64>,
    pub gen_p_min: Vec<f64>,
    pub gen_p_max: Vec<f64>,
    pub gen_q_min: Vec<f64>,
    pub gen_q_max: Vec<f64>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub cost_a: Vec<f64>,
    pub cost_b: Vec<f64>,
    pub cost_c: Vec<f64>,
    pub bess: BessParams,
    /// Nominal nodal demands from the case file (before scenario scaling).
    pub base_d_p: Vec<f64>,
    pub base_d_q: Vec<f64>,
    pub mapping: MappingMatrices,
}

impl GridCase {
    /// Action width of one horizon row: `[g_p; g_q; p_ch; p_dis]`.
    pub fn action_dim(&self) -> usize {
        2 * self.n_gen + 2 * self.n_bess
    }

    pub fn from_file(file: CaseFile) -> Result<Self, CaseError> {
        file.into_case()
    }

    pub fn from_json(text: &str) -> Result<Self, CaseError> {
        let file: CaseFile = serde_json::from_str(text)?;
        file.into_case()
    }

    pub fn non_slack_buses(&self) -> Vec<usize> {
        (0..self.n_bus).filter(|&i| i != self.slack_bus).collect()
    }

    fn validate(&self) -> Result<(), CaseError> {
        let bad = |msg: String| Err(CaseError::Validation(msg));
        for g in 0..self.n_gen {
            if !(self.gen_p_min[g] <= self.gen_p_max[g]) {
                return bad(format!("generator {g}: p_min > p_max"));
            }
            if !(self.gen_q_min[g] <= self.gen_q_max[g]) {
                return bad(format!("generator {g}: q_min > q_max"));
            }
            if self.cost_a[g] < 0.0 || self.cost_b[g] < 0.0 || self.cost_c[g] < 0.0 {
                return bad(format!("generator {g}: negative cost coefficient"));
            }
        }
        for i in 0..self.n_bus {
            if !(self.v_min[i] > 0.0 && self.v_min[i] <= self.v_max[i]) {
                return bad(format!("bus {}: voltage bounds must satisfy 0 < v_min <= v_max", i + 1));
            }
        }
        let b = &self.bess;
        for k in 0..b.len() {
            if !(b.eta_ch[k] > 0.0 && b.eta_ch[k] <= 1.0 && b.eta_dis[k] > 0.0 && b.eta_dis[k] <= 1.0) {
                return bad(format!("bess {k}: efficiencies must lie in (0, 1]"));
            }
            if !(0.0 <= b.soc_min[k] && b.soc_min[k] < b.soc_max[k] && b.soc_max[k] <= 1.0) {
                return bad(format!("bess {k}: need 0 <= soc_min < soc_max <= 1"));
            }
            if b.p_ch_rated[k] < 0.0 || b.p_dis_rated[k] < 0.0 {
                return bad(format!("bess {k}: negative rated power"));
            }
        }
        if !(b.dt_over_ecap > 0.0 && b.dt_over_ecap.is_finite()) {
            return bad("dt_over_ecap must be positive".into());
        }
        if !self.gen_buses.contains(&self.slack_bus) {
            return bad("slack bus carries no generator".into());
        }
        Ok(())
    }
}

/// Reads and validates a JSON case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase, CaseError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    GridCase::from_json(&text)
}

/// Bus admittance matrix from a branch list.
pub fn build_admittance(branches: &[Branch], n_bus: usize) -> Result<DMatrix<Complex64>, CaseError> {
    let mut y = DMatrix::from_element(n_bus, n_bus, Complex64::new(0.0, 0.0));
    for br in branches {
        for idx in [br.from, br.to] {
            if idx >= n_bus {
                return Err(CaseError::IndexOutOfRange { index: idx, n_bus });
            }
        }
        let (f, t) = (br.from, br.to);
        y[(f, f)] += br.series + br.shunt;
        y[(t, t)] += br.series + br.shunt;
        if f != t {
            y[(f, t)] -= br.series;
            // write the mirror entry from the same value so Y == Y^T bit for bit
            y[(t, f)] = y[(f, t)];
        }
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// file schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GenRecord>,
    #[serde(default)]
    pub bess: Vec<BessRecord>,
    pub dt_over_ecap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub d_p: f64,
    pub d_q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b_shunt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRecord {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost_a: f64,
    pub cost_b: f64,
    pub cost_c: f64,
    pub is_slack: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BessRecord {
    pub bus: usize,
    pub p_ch_rated: f64,
    pub p_dis_rated: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    pub soc_min: f64,
    pub soc_max: f64,
}

impl CaseFile {
    pub fn into_case(self) -> Result<GridCase, CaseError> {
        let n_bus = self.buses.len();
        if n_bus == 0 {
            return Err(CaseError::Validation("case has no buses".into()));
        }
        for (k, bus) in self.buses.iter().enumerate() {
            if bus.id != k + 1 {
                return Err(CaseError::Validation(format!(
                    "bus ids must be 1..=N in order; entry {k} has id {}",
                    bus.id
                )));
            }
        }
        let to_index = |id: usize, what: &str| -> Result<usize, CaseError> {
            if id == 0 || id > n_bus {
                Err(CaseError::Validation(format!("{what} references unknown bus {id}")))
            } else {
                Ok(id - 1)
            }
        };

        let mut branches = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let z = Complex64::new(br.r, br.x);
            if z.norm() == 0.0 {
                return Err(CaseError::Validation(format!(
                    "branch {}-{} has zero impedance",
                    br.from, br.to
                )));
            }
            branches.push(Branch {
                from: to_index(br.from, "branch")?,
                to: to_index(br.to, "branch")?,
                series: z.inv(),
                shunt: Complex64::new(0.0, br.b_shunt / 2.0),
            });
        }
        let y = build_admittance(&branches, n_bus)?;

        let slack: Vec<usize> = self
            .generators
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_slack)
            .map(|(k, _)| k)
            .collect();
        if slack.len() != 1 {
            return Err(CaseError::Validation(format!(
                "exactly one slack generator required, found {}",
                slack.len()
            )));
        }
        let gen_buses = self
            .generators
            .iter()
            .map(|g| to_index(g.bus, "generator"))
            .collect::<Result<Vec<_>, _>>()?;
        let bess_buses = self
            .bess
            .iter()
            .map(|b| to_index(b.bus, "bess"))
            .collect::<Result<Vec<_>, _>>()?;
        let slack_gen = slack[0];
        let slack_bus = gen_buses[slack_gen];
        if gen_buses
            .iter()
            .enumerate()
            .any(|(k, &b)| b == slack_bus && k != slack_gen)
        {
            return Err(CaseError::Validation("slack bus may host only the slack generator".into()));
        }

        let gens = &self.generators;
        let bess = BessParams {
            e_cap: 1000.0,
            dt: 18.0,
            dt_over_ecap: self.dt_over_ecap,
            eta_ch: self.bess.iter().map(|b| b.eta_ch).collect(),
            eta_dis: self.bess.iter().map(|b| b.eta_dis).collect(),
            p_ch_rated: self.bess.iter().map(|b| b.p_ch_rated).collect(),
            p_dis_rated: self.bess.iter().map(|b| b.p_dis_rated).collect(),
            soc_min: self.bess.iter().map(|b| b.soc_min).collect(),
            soc_max: self.bess.iter().map(|b| b.soc_max).collect(),
        };
        let mapping = MappingMatrices::new(n_bus, &gen_buses, &bess_buses);
        let case = GridCase {
            base_mva: self.base_mva,
            n_bus,
            n_gen: gens.len(),
            n_bess: self.bess.len(),
            slack_bus,
            slack_gen,
            gen_buses,
            bess_buses,
            branches,
            y,
            gen_p_min: gens.iter().map(|g| g.p_min).collect(),
            gen_p_max: gens.iter().map(|g| g.p_max).collect(),
            gen_q_min: gens.iter().map(|g| g.q_min).collect(),
            gen_q_max: gens.iter().map(|g| g.q_max).collect(),
            v_min: self.buses.iter().map(|b| b.v_min).collect(),
            v_max: self.buses.iter().map(|b| b.v_max).collect(),
            cost_a: gens.iter().map(|g| g.cost_a).collect(),
            cost_b: gens.iter().map(|g| g.cost_b).collect(),
            cost_c: gens.iter().map(|g| g.cost_c).collect(),
            bess,
            base_d_p: self.buses.iter().map(|b| b.d_p).collect(),
            base_d_q: self.buses.iter().map(|b| b.d_q).collect(),
            mapping,
        };
        case.validate()?;
        Ok(case)
    }
}

/// Path of a case file shipped with this crate (`ieee14`, `ieee30`).
pub fn bundled_case_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("cases")
        .join(format!("{name}.json"))
}

pub fn bundled_case(name: &str) -> Result<GridCase, CaseError> {
    load_case(bundled_case_path(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn empty_branch_list_gives_zero_matrix() {
        let y = build_admittance(&[], 3).unwrap();
        assert!(y.iter().all(|v| *v == c(0.0, 0.0)));
    }

    #[test]
    fn single_branch_diagonal_sums_series_and_shunt() {
        let br = Branch { from: 0, to: 1, series: c(0.0, 2.0), shunt: c(0.0, 0.1) };
        let y = build_admittance(&[br], 2).unwrap();
        assert!((y[(0, 0)] - c(0.0, 2.1)).norm() < 1e-15);
        assert_eq!(y[(0, 1)], c(0.0, -2.0));
    }

    #[test]
    fn two_bus_admittance() {
        let br = Branch { from: 0, to: 1, series: c(1.0, -5.0), shunt: c(0.0, 0.0) };
        let y = build_admittance(&[br], 2).unwrap();
        assert_eq!(y[(0, 0)], c(1.0, -5.0));
        assert_eq!(y[(1, 1)], c(1.0, -5.0));
        assert_eq!(y[(0, 1)], c(-1.0, 5.0));
        assert_eq!(y[(1, 0)], c(-1.0, 5.0));
    }

    #[test]
    fn out_of_range_branch_is_rejected() {
        let br = Branch { from: 0, to: 4, series: c(1.0, 0.0), shunt: c(0.0, 0.0) };
        assert!(matches!(
            build_admittance(&[br], 2),
            Err(CaseError::IndexOutOfRange { index: 4, .. })
        ));
    }

    #[test]
    fn expand_single_generator() {
        let m = MappingMatrices::new(3, &[2], &[]);
        assert_eq!(m.expand_to_nodes(&[5.0], DeviceKind::Gen).unwrap(), vec![0.0, 0.0, 5.0]);
        assert_eq!(m.expand_to_nodes(&[0.0], DeviceKind::Gen).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            m.expand_to_nodes(&[1.0, 2.0], DeviceKind::Gen),
            Err(CaseError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bundled_cases_match_published_bess_placement() {
        let c14 = bundled_case("ieee14").unwrap();
        assert_eq!(c14.n_bus, 14);
        assert_eq!(c14.bess_buses, vec![8]);
        let c30 = bundled_case("ieee30").unwrap();
        assert_eq!(c30.n_bus, 30);
        assert_eq!(c30.bess_buses, vec![12, 21]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"base_mva":100,"buses":[{"id":1,"v_min":0.9,"v_max":1.1,"d_p":0,"d_q":0,"extra":1}],
            "branches":[],"generators":[],"bess":[],"dt_over_ecap":0.005}"#;
        assert!(matches!(GridCase::from_json(text), Err(CaseError::Parse(_))));
    }

    #[test]
    fn inverted_bounds_fail_validation() {
        let text = r#"{"base_mva":100,"buses":[{"id":1,"v_min":1.1,"v_max":0.9,"d_p":0,"d_q":0}],
            "branches":[],"generators":[{"bus":1,"p_min":0,"p_max":1,"q_min":-1,"q_max":1,
            "cost_a":0,"cost_b":1,"cost_c":0,"is_slack":true}],"bess":[],"dt_over_ecap":0.005}"#;
        assert!(matches!(GridCase::from_json(text), Err(CaseError::Validation(_))));
    }

    #[test]
    fn dangling_branch_fails_validation() {
        let text = r#"{"base_mva":100,"buses":[{"id":1,"v_min":0.9,"v_max":1.1,"d_p":0,"d_q":0}],
            "branches":[{"from":1,"to":7,"r":0.01,"x":0.1,"b_shunt":0}],
            "generators":[{"bus":1,"p_min":0,"p_max":1,"q_min":-1,"q_max":1,
            "cost_a":0,"cost_b":1,"cost_c":0,"is_slack":true}],"bess":[],"dt_over_ecap":0.005}"#;
        assert!(matches!(GridCase::from_json(text), Err(CaseError::Validation(_))));
    }
}
