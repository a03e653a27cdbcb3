use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tape::{AdError, Tape, Var};
use super::tensor::Mat;

const FORMAT: &str = "sdopf-params";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint header {format} v{version}")]
    Header { format: String, version: u32 },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// Named trainable matrices. Complex entries use the `[Re | Im]` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
    pub complex: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), complex: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.complex.push(false);
        self.values.len() - 1
    }

    pub fn add_complex(&mut self, name: impl Into<String>, value: Mat) -> usize {
        assert!(value.cols % 2 == 0, "complex parameter needs even width");
        let id = self.add(name, value);
        self.complex[id] = true;
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scalar parameter count (a complex entry counts as two).
    pub fn count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Places every parameter on `tape` as a gradient-carrying leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>, AdError> {
        self.values
            .iter()
            .zip(&self.complex)
            .map(|(v, &c)| if c { tape.complex_variable(v.clone()) } else { Ok(tape.variable(v.clone())) })
            .collect()
    }

    /// Places every parameter on `tape` as a constant (no gradient).
    pub fn register_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>, AdError> {
        self.values
            .iter()
            .zip(&self.complex)
            .map(|(v, &c)| if c { tape.complex_constant(v.clone()) } else { Ok(tape.constant(v.clone())) })
            .collect()
    }

    pub fn zero_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
            complex: self.complex.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.complex == other.complex
            && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, online: &ParamSet, tau: f64) -> Result<(), CheckpointError> {
        if !self.same_layout(online) {
            return Err(CheckpointError::Mismatch("soft update between different layouts".into()));
        }
        for (t, o) in self.values.iter_mut().zip(&online.values) {
            for (x, y) in t.data.iter_mut().zip(&o.data) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
        Ok(())
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            params: (0..self.len())
                .map(|i| Entry {
                    name: self.names[i].clone(),
                    shape: [self.values[i].rows, self.values[i].cols],
                    complex: self.complex[i],
                    values: self.values[i].data.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(CheckpointError::Header { format: file.format, version: file.version });
        }
        let mut out = ParamSet::new();
        for e in file.params {
            if e.values.len() != e.shape[0] * e.shape[1] {
                return Err(CheckpointError::Mismatch(format!("{}: {} values for shape {:?}", e.name, e.values.len(), e.shape)));
            }
            let m = Mat::from_vec(e.shape[0], e.shape[1], e.values);
            if e.complex {
                if m.cols % 2 != 0 {
                    return Err(CheckpointError::Mismatch(format!("{}: complex entry with odd width", e.name)));
                }
                out.add_complex(e.name, m);
            } else {
                out.add(e.name, m);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Loads values into an existing layout, rejecting any mismatch.
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let loaded = Self::load(path)?;
        if !self.same_layout(&loaded) {
            return Err(CheckpointError::Mismatch("parameter names or shapes differ".into()));
        }
        *self = loaded;
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    complex: bool,
    values: Vec<f64>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = params.zero_like().values;
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for k in 0..grads.len() {
            assert_eq!(grads[k].shape(), params.values[k].shape(), "gradient shape for {}", params.names[k]);
            let (m, v, p) = (&mut self.m[k], &mut self.v[k], &mut params.values[k]);
            for i in 0..p.data.len() {
                let g = grads[k].data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * g;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * g * g;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
