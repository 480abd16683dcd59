//! On-disk snapshot of a training run.
//!
//! Format: a single JSON document, layout `corridor-sac-v1`.
//!
//! ```text
//! {
//!   "format":        "corridor-sac-v1",
//!   "step":          global gradient-step count,
//!   "episode":       episodes completed,
//!   "log_alpha":     entropy temperature, stored in log space,
//!   "max_hold_secs": action interval upper bound T,
//!   "policy" | "critic1" | "critic2" | "target1" | "target2": {
//!       "tables":  [ {"rows", "cols", "data": row-major f64}, x4 ],
//!       "weights": [ per-layer matrices, input x output ],
//!       "biases":  [ per-layer 1 x output rows ]
//!   },
//!   "adam_policy" | "adam_critic1" | "adam_critic2" | "adam_alpha": {
//!       "step": per-optimizer step count,
//!       "m", "v": first/second moments, same shapes as the parameters
//!   }
//! }
//! ```
//!
//! Every matrix carries its own shape, so a reader needs no out-of-band
//! knowledge. Numbers round-trip exactly: serialization uses the shortest
//! decimal that recovers the same 64-bit float. Files are written to a
//! temporary sibling and renamed into place, so a crash never leaves a
//! half-written snapshot behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AdamState, CriticNet, EmbeddingTable, Mlp, PolicyNet};

pub const CHECKPOINT_FORMAT: &str = "corridor-sac-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatBlob {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatBlob {
    pub fn from_array(a: &Array2<f64>) -> MatBlob {
        MatBlob {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>, CheckpointError> {
        if self.rows * self.cols != self.data.len() {
            return Err(CheckpointError::Invalid(format!(
                "matrix claims {}x{} but carries {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| CheckpointError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetBlob {
    pub tables: Vec<MatBlob>,
    pub weights: Vec<MatBlob>,
    pub biases: Vec<MatBlob>,
}

impl NetBlob {
    fn from_parts(tables: &[EmbeddingTable; 4], mlp: &Mlp) -> NetBlob {
        NetBlob {
            tables: tables.iter().map(|t| MatBlob::from_array(&t.weights)).collect(),
            weights: mlp.weights.iter().map(MatBlob::from_array).collect(),
            biases: mlp.biases.iter().map(MatBlob::from_array).collect(),
        }
    }

    fn to_parts(&self) -> Result<([EmbeddingTable; 4], Mlp), CheckpointError> {
        if self.tables.len() != 4 {
            return Err(CheckpointError::Invalid(format!(
                "expected 4 embedding tables, found {}",
                self.tables.len()
            )));
        }
        if self.weights.len() != self.biases.len() || self.weights.is_empty() {
            return Err(CheckpointError::Invalid(
                "weight/bias layer counts disagree".into(),
            ));
        }
        let mut tables = Vec::new();
        for t in &self.tables {
            tables.push(EmbeddingTable { weights: t.to_array()? });
        }
        let tables: [EmbeddingTable; 4] =
            tables.try_into().expect("length checked above");
        let weights: Vec<Array2<f64>> =
            self.weights.iter().map(|m| m.to_array()).collect::<Result<_, _>>()?;
        let biases: Vec<Array2<f64>> =
            self.biases.iter().map(|m| m.to_array()).collect::<Result<_, _>>()?;
        let mut sizes = vec![weights[0].nrows()];
        for (i, w) in weights.iter().enumerate() {
            if w.nrows() != sizes[i] || biases[i].dim() != (1, w.ncols()) {
                return Err(CheckpointError::Invalid(format!(
                    "layer {i} shapes are inconsistent"
                )));
            }
            sizes.push(w.ncols());
        }
        Ok((tables, Mlp { sizes, weights, biases }))
    }
}

impl From<&PolicyNet> for NetBlob {
    fn from(net: &PolicyNet) -> NetBlob {
        NetBlob::from_parts(&net.tables, &net.mlp)
    }
}

impl From<&CriticNet> for NetBlob {
    fn from(net: &CriticNet) -> NetBlob {
        NetBlob::from_parts(&net.tables, &net.mlp)
    }
}

impl NetBlob {
    pub fn to_policy(&self, max_hold: f64) -> Result<PolicyNet, CheckpointError> {
        let (tables, mlp) = self.to_parts()?;
        Ok(PolicyNet { tables, mlp, max_hold })
    }

    pub fn to_critic(&self) -> Result<CriticNet, CheckpointError> {
        let (tables, mlp) = self.to_parts()?;
        Ok(CriticNet { tables, mlp })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamBlob {
    pub step: u64,
    pub m: Vec<MatBlob>,
    pub v: Vec<MatBlob>,
}

impl From<&AdamState> for AdamBlob {
    fn from(st: &AdamState) -> AdamBlob {
        AdamBlob {
            step: st.step,
            m: st.m.iter().map(MatBlob::from_array).collect(),
            v: st.v.iter().map(MatBlob::from_array).collect(),
        }
    }
}

impl AdamBlob {
    pub fn to_state(&self) -> Result<AdamState, CheckpointError> {
        if self.m.len() != self.v.len() {
            return Err(CheckpointError::Invalid(
                "optimizer moment counts disagree".into(),
            ));
        }
        let m: Vec<Array2<f64>> =
            self.m.iter().map(|b| b.to_array()).collect::<Result<_, _>>()?;
        let v: Vec<Array2<f64>> =
            self.v.iter().map(|b| b.to_array()).collect::<Result<_, _>>()?;
        for (a, b) in m.iter().zip(&v) {
            if a.dim() != b.dim() {
                return Err(CheckpointError::Invalid(
                    "optimizer moment shapes disagree".into(),
                ));
            }
        }
        Ok(AdamState { step: self.step, m, v, beta1: 0.9, beta2: 0.999, eps: 1e-8 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub episode: u64,
    pub log_alpha: f64,
    pub max_hold_secs: f64,
    pub policy: NetBlob,
    pub critic1: NetBlob,
    pub critic2: NetBlob,
    pub target1: NetBlob,
    pub target2: NetBlob,
    pub adam_policy: AdamBlob,
    pub adam_critic1: AdamBlob,
    pub adam_critic2: AdamBlob,
    pub adam_alpha: AdamBlob,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Invalid(format!(
                "format {:?} is not {CHECKPOINT_FORMAT:?}",
                self.format
            )));
        }
        if !self.log_alpha.is_finite()
            || !self.max_hold_secs.is_finite()
            || self.max_hold_secs <= 0.0
        {
            return Err(CheckpointError::Invalid(
                "non-finite temperature or bad hold bound".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let body = serde_json::to_vec(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let body = fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&body)?;
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{RngStream, StreamKind};

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = RngStream::with_index(3, StreamKind::Init, 0);
        let policy = PolicyNet::new(60.0, &mut rng);
        let c1 = CriticNet::new(&mut rng);
        let c2 = CriticNet::new(&mut rng);
        let mut adam_p = AdamState::new(&policy.param_shapes());
        adam_p.step = 17;
        adam_p.m[0][[0, 0]] = 0.123456789012345;
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            step: 99,
            episode: 3,
            log_alpha: (0.2f64).ln(),
            max_hold_secs: 60.0,
            policy: (&policy).into(),
            critic1: (&c1).into(),
            critic2: (&c2).into(),
            target1: (&c1).into(),
            target2: (&c2).into(),
            adam_policy: (&adam_p).into(),
            adam_critic1: (&AdamState::new(&c1.param_shapes())).into(),
            adam_critic2: (&AdamState::new(&c2.param_shapes())).into(),
            adam_alpha: (&AdamState::new(&[(1, 1)])).into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);

        let policy = ckpt.policy.to_policy(ckpt.max_hold_secs).unwrap();
        let again = back.policy.to_policy(back.max_hold_secs).unwrap();
        assert_eq!(policy, again);
        let adam = back.adam_policy.to_state().unwrap();
        assert_eq!(adam.step, 17);
        assert_eq!(adam.m[0][[0, 0]], 0.123456789012345);
    }

    #[test]
    fn wrong_format_is_rejected() {
        let mut ckpt = sample_checkpoint();
        ckpt.format = "something-else".into();
        assert!(matches!(ckpt.validate(), Err(CheckpointError::Invalid(_))));
    }

    #[test]
    fn shape_lies_are_rejected() {
        let blob = MatBlob { rows: 2, cols: 3, data: vec![0.0; 5] };
        assert!(blob.to_array().is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let body = std::fs::read(&path).unwrap();
        std::fs::write(&path, &body[..body.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Json(_))));
    }
}
