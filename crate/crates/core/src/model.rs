//! Linear-logistic subgoal classifiers.
//!
//! Every subgoal `o` has a goal classifier `G_o` and a separately
//! parameterized entry classifier `I_o` that stands in for `1 - G_o`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{feature_schema, features, FeatureVector, GridState, WorldConfig, FEATURE_COUNT};
use crate::tl::SubgoalName;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "rsg-model";

/// Which of the two classifiers of a subgoal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Which {
    G,
    I,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown subgoal `{0}`")]
    UnknownSubgoal(SubgoalName),
    #[error("model format version {found}, expected {MODEL_FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model was trained for a different feature schema or subgoal set")]
    SchemaMismatch,
}

/// Weights of all classifiers. Each row is `FEATURE_COUNT` weights followed
/// by a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    subgoals: Vec<SubgoalName>,
    g: Vec<f64>,
    i: Vec<f64>,
}

pub const ROW: usize = FEATURE_COUNT + 1;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

impl Theta {
    /// All weights and biases zero, so every output is 0.5.
    pub fn zeros(subgoals: Vec<SubgoalName>) -> Self {
        let n = subgoals.len() * ROW;
        Theta {
            subgoals,
            g: vec![0.0; n],
            i: vec![0.0; n],
        }
    }

    pub fn for_world(world: &WorldConfig) -> Self {
        Theta::zeros(world.rules().subgoal_names())
    }

    pub fn subgoals(&self) -> &[SubgoalName] {
        &self.subgoals
    }

    pub fn index_of(&self, o: &SubgoalName) -> Result<usize, ModelError> {
        self.subgoals
            .iter()
            .position(|s| s == o)
            .ok_or_else(|| ModelError::UnknownSubgoal(o.clone()))
    }

    pub fn row(&self, which: Which, subgoal: usize) -> &[f64] {
        let r = subgoal * ROW..(subgoal + 1) * ROW;
        match which {
            Which::G => &self.g[r],
            Which::I => &self.i[r],
        }
    }

    pub fn row_mut(&mut self, which: Which, subgoal: usize) -> &mut [f64] {
        let r = subgoal * ROW..(subgoal + 1) * ROW;
        match which {
            Which::G => &mut self.g[r],
            Which::I => &mut self.i[r],
        }
    }

    /// Flat view: all G rows, then all I rows.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.g.clone();
        v.extend_from_slice(&self.i);
        v
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.g.len() * 2);
        let (g, i) = flat.split_at(self.g.len());
        self.g.copy_from_slice(g);
        self.i.copy_from_slice(i);
    }

    pub fn param_count(&self) -> usize {
        self.g.len() * 2
    }

    /// Offset of a classifier's row in [`Self::params`].
    pub fn offset(&self, which: Which, subgoal: usize) -> usize {
        match which {
            Which::G => subgoal * ROW,
            Which::I => self.g.len() + subgoal * ROW,
        }
    }

    pub fn logit(&self, which: Which, subgoal: usize, phi: FeatureVector) -> f64 {
        let row = self.row(which, subgoal);
        phi.active().fold(row[FEATURE_COUNT], |acc, j| acc + row[j])
    }

    pub fn eval(&self, which: Which, subgoal: usize, phi: FeatureVector) -> f64 {
        sigmoid(self.logit(which, subgoal, phi))
    }

    pub fn log_eval(&self, which: Which, subgoal: usize, phi: FeatureVector) -> f64 {
        log_sigmoid(self.logit(which, subgoal, phi))
    }

    pub fn eval_g(&self, o: &SubgoalName, phi: FeatureVector) -> Result<f64, ModelError> {
        Ok(self.eval(Which::G, self.index_of(o)?, phi))
    }

    pub fn eval_i(&self, o: &SubgoalName, phi: FeatureVector) -> Result<f64, ModelError> {
        Ok(self.eval(Which::I, self.index_of(o)?, phi))
    }

    /// Gradient of `ln σ(w·φ + b)` with respect to that classifier's row.
    pub fn grad_log(&self, o: &SubgoalName, phi: FeatureVector, which: Which) -> Result<Vec<f64>, ModelError> {
        let idx = self.index_of(o)?;
        let scale = 1.0 - self.eval(which, idx, phi);
        let mut grad: Vec<f64> = phi.to_vec().into_iter().map(|x| x * scale).collect();
        grad.push(scale);
        Ok(grad)
    }

    /// Fails unless the model was built for this world's subgoals.
    pub fn check_world(&self, world: &WorldConfig) -> Result<(), ModelError> {
        if self.subgoals != world.rules().subgoal_names() {
            return Err(ModelError::SchemaMismatch);
        }
        Ok(())
    }

    pub fn serialize(&self) -> Vec<u8> {
        let body = serde_json::to_string(&ModelFile {
            schema: schema_hash(&self.subgoals),
            theta: self.clone(),
        })
        .expect("theta serializes");
        let digest = hex(&Sha256::digest(body.as_bytes()));
        format!("{MAGIC} {MODEL_FORMAT_VERSION} {digest}\n{body}\n").into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, ModelError> {
        let text = std::str::from_utf8(bytes).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| ModelError::Corrupt("missing header".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ModelError::Corrupt("bad version field".into()))?;
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Version { found: version });
        }
        let digest = parts.next().ok_or_else(|| ModelError::Corrupt("missing checksum".into()))?;
        let body = body.strip_suffix('\n').unwrap_or(body);
        if hex(&Sha256::digest(body.as_bytes())) != digest {
            return Err(ModelError::Corrupt("checksum mismatch".into()));
        }
        let file: ModelFile = serde_json::from_str(body).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        if file.schema != schema_hash(&file.theta.subgoals) {
            return Err(ModelError::SchemaMismatch);
        }
        let n = file.theta.subgoals.len() * ROW;
        if file.theta.g.len() != n || file.theta.i.len() != n {
            return Err(ModelError::Corrupt("parameter count mismatch".into()));
        }
        if !file.theta.params().iter().all(|x| x.is_finite()) {
            return Err(ModelError::Corrupt("non-finite parameter".into()));
        }
        Ok(file.theta)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema: String,
    theta: Theta,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the feature names and subgoal list a model depends on.
pub fn schema_hash(subgoals: &[SubgoalName]) -> String {
    let mut h = Sha256::new();
    for name in feature_schema() {
        h.update(name.as_bytes());
        h.update([0]);
    }
    h.update([1]);
    for s in subgoals {
        h.update(s.as_str().as_bytes());
        h.update([0]);
    }
    hex(&h.finalize())
}

/// Log-probabilities used by the planner. Subgoals are registry indices of
/// the world.
pub trait Classifier: Sync {
    fn log_goal(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64;
    fn log_init(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64;
}

impl Classifier for Theta {
    fn log_goal(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64 {
        self.log_eval(Which::G, subgoal, features(s, world))
    }

    fn log_init(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64 {
        self.log_eval(Which::I, subgoal, features(s, world))
    }
}

/// Ground-truth 0/1 classifiers: `ln 1 = 0` or `ln 0 = -inf`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Oracle;

impl Classifier for Oracle {
    fn log_goal(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64 {
        if world.goal_holds(subgoal, s) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_init(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64 {
        if world.goal_holds(subgoal, s) {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }
}
