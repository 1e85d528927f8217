//! Checkpoint serialization: a single JSON document holding the head
//! configuration and weights as row-major number arrays. serde_json emits
//! shortest round-trip floats, so save/load is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{AxisConvention, HeadConfig, HeadParams, HeadVariant, ObjectnessHead};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: HeadVariant,
    /// Regularizer weight; `None` for the joint/full variants, which carry
    /// no regularizer term.
    pub lambda: Option<f64>,
    pub axis_convention: AxisConvention,
    pub dims: Dims,
    pub objectness_frozen: bool,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_det: Vec<f64>,
    pub b_det: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_obj: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_obj: Option<f64>,
}

impl Checkpoint {
    pub fn from_parts(cfg: &HeadConfig, params: &HeadParams) -> Self {
        let (w_obj, b_obj) = match &params.objectness {
            ObjectnessHead::Frozen => (None, None),
            ObjectnessHead::Learned { w, b } => (Some(w.clone()), Some(*b)),
        };
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            variant: cfg.variant,
            lambda: cfg.variant.uses_objectness_reg().then_some(cfg.lambda),
            axis_convention: cfg.axis,
            dims: Dims {
                d: params.feature_dim(),
                c: params.n_classes(),
            },
            objectness_frozen: params.objectness_frozen(),
            w_cls: params.w_cls.data().to_vec(),
            b_cls: params.b_cls.clone(),
            w_det: params.w_det.data().to_vec(),
            b_det: params.b_det.clone(),
            w_obj,
            b_obj,
        }
    }

    pub fn into_parts(self) -> Result<(HeadConfig, HeadParams)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::schema(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let d = self.dims.d;
        let c = self.dims.c;
        let expect = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                Err(Error::schema(format!(
                    "checkpoint field {name} has {got} entries, expected {want}"
                )))
            } else {
                Ok(())
            }
        };
        expect("w_cls", self.w_cls.len(), d * c)?;
        expect("b_cls", self.b_cls.len(), c)?;
        expect("w_det", self.w_det.len(), d * c)?;
        expect("b_det", self.b_det.len(), c)?;

        let objectness = if self.objectness_frozen {
            if self.w_obj.is_some() || self.b_obj.is_some() {
                return Err(Error::schema(
                    "frozen-objectness checkpoint must not carry w_obj/b_obj".to_string(),
                ));
            }
            ObjectnessHead::Frozen
        } else {
            let w = self
                .w_obj
                .ok_or_else(|| Error::schema("missing w_obj in unfrozen checkpoint".to_string()))?;
            expect("w_obj", w.len(), d)?;
            let b = self
                .b_obj
                .ok_or_else(|| Error::schema("missing b_obj in unfrozen checkpoint".to_string()))?;
            ObjectnessHead::Learned { w, b }
        };

        let params = HeadParams {
            w_cls: Matrix::from_vec(d, c, self.w_cls)?,
            b_cls: self.b_cls,
            w_det: Matrix::from_vec(d, c, self.w_det)?,
            b_det: self.b_det,
            objectness,
        };
        params.validate()?;
        let cfg = HeadConfig::new(self.variant, self.lambda.unwrap_or(0.0))?
            .with_axis(self.axis_convention);
        Ok((cfg, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Internal(format!("checkpoint serialization failed: {e}")))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("bad checkpoint: {e}"),
        })
    }
}
