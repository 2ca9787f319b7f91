use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Params, SegmentationModel, TeacherModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON archive of student and teacher parameters.
///
/// `resume` carries whatever the trainer needs to continue bit-exactly
/// (optimizer buffers, random stream positions); it is opaque here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub iteration: u64,
    pub student: Params,
    pub teacher: Params,
    #[serde(default)]
    pub resume: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(student: &SegmentationModel, teacher: &TeacherModel, iteration: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: student.arch.clone(),
            iteration,
            student: student.params.clone(),
            teacher: teacher.params().clone(),
            resume: None,
        }
    }

    pub fn student(&self) -> Result<SegmentationModel> {
        let model = SegmentationModel::zeros(self.architecture.clone())?;
        if !model.params.same_layout(&self.student) {
            return Err(Error::Shape("checkpoint student parameters do not match the architecture".into()));
        }
        Ok(SegmentationModel {
            params: self.student.clone(),
            ..model
        })
    }

    pub fn teacher(&self) -> Result<TeacherModel> {
        TeacherModel::from_params(self.architecture.clone(), self.teacher.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(Error::json(path))?;
        std::fs::write(path, text).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(Error::json(path))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }
}
