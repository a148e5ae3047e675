//! JSON export of the graph.
//!
//! Poses are 12 numbers, the rotation row-major followed by the
//! translation. Covariances and marginals are 36 numbers, row-major.
//! Floats round-trip exactly.

use serde::{Deserialize, Serialize};

use super::{Factor, FactorKind, GraphState, Mapper, MapperError, Var};
use crate::se3::{Covariance6, Mat6, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub frame: usize,
    pub pose: [f64; 12],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub label: String,
    pub pose: [f64; 12],
    pub marginal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub kind: FactorKind,
    pub variables: Vec<Var>,
    pub measurement: [f64; 12],
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub poses: Vec<PoseEntry>,
    pub landmarks: Vec<LandmarkRecord>,
    pub factors: Vec<FactorRecord>,
}

fn row_major(m: &Mat6) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Snapshot {
    pub(crate) fn capture(m: &Mapper) -> Result<Self, MapperError> {
        let g = m.graph();
        let marginals = if g.landmarks.is_empty() {
            None
        } else {
            super::solver::Marginals::new(g).ok()
        };
        Ok(Self {
            poses: g
                .poses
                .iter()
                .map(|(k, p)| PoseEntry {
                    frame: *k,
                    pose: p.to_row_major(),
                })
                .collect(),
            landmarks: g
                .landmarks
                .iter()
                .map(|(l, p)| LandmarkRecord {
                    label: l.clone(),
                    pose: p.to_row_major(),
                    marginal: marginals
                        .as_ref()
                        .and_then(|mg| mg.landmark(l))
                        .map(|c| row_major(&c)),
                })
                .collect(),
            factors: g
                .factors
                .iter()
                .map(|f| FactorRecord {
                    kind: f.kind,
                    variables: f.vars.clone(),
                    measurement: f.measurement.to_row_major(),
                    noise: row_major(f.noise.matrix()),
                })
                .collect(),
        })
    }

    pub fn to_graph(&self) -> Result<GraphState, MapperError> {
        let mut g = GraphState::default();
        for p in &self.poses {
            g.poses.insert(p.frame, Pose::from_row_major(&p.pose));
        }
        for l in &self.landmarks {
            if l.marginal.as_ref().is_some_and(|m| m.len() != 36) {
                return Err(MapperError::Snapshot(format!(
                    "marginal of {:?} must have 36 entries",
                    l.label
                )));
            }
            g.landmarks
                .insert(l.label.clone(), Pose::from_row_major(&l.pose));
        }
        for f in &self.factors {
            if f.noise.len() != 36 {
                return Err(MapperError::Snapshot(
                    "factor noise must have 36 entries".into(),
                ));
            }
            let noise = Covariance6::from_matrix_unchecked(Mat6::from_row_slice(&f.noise));
            g.add_factor(Factor::new(
                f.kind,
                f.variables.clone(),
                Pose::from_row_major(&f.measurement),
                noise,
            )?)?;
        }
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String, MapperError> {
        serde_json::to_string_pretty(self).map_err(|e| MapperError::Snapshot(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, MapperError> {
        serde_json::from_str(s).map_err(|e| MapperError::Snapshot(e.to_string()))
    }
}
