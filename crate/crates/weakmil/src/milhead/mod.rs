//! The four MIL detection-head variants: forward predictions, losses,
//! analytic gradients, inference scoring, and the classification/detection
//! argmax-mismatch diagnostic.
//!
//! Two logit matrices drive everything: classification logits `C` (N
//! proposals x C classes) and detection logits `D` of the same shape, plus a
//! per-proposal objectness logit vector `s`. The classification stream is
//! always softmaxed; what happens on the other stream defines the variant:
//!
//! - `base`:   image prediction `y_j = sum_i A_ij * B_ij` where `A` is the
//!   class softmax of `C` and `B` the per-detection softmax of `D`; trained
//!   with an objectness regularizer `lambda * L_obj`.
//! - `sparse`: `base` with the detection softmax replaced by sparsemax, which
//!   zeroes out low-confidence boxes entirely.
//! - `joint`:  `y_j = sum_i A_ij * softmax(s)_i`; the detection stream is
//!   replaced by objectness and no regularizer is used.
//! - `full`:   `joint` with sparsemax(s) instead of softmax(s).
//!
//! # Axis convention
//!
//! "Softmaxed over classes" and "softmaxed over detections" admit two
//! readings depending on which index runs over what. The default
//! ([`AxisConvention::Prose`]) softmaxes the classification matrix row-wise
//! (per proposal, over classes) and the detection matrix column-wise (per
//! class, over proposals), which is the reading under which sparsity acts
//! along the detection dimension and zeroes out whole boxes.
//! [`AxisConvention::Notation`] swaps the two axes and is available for
//! experimentation only; all defaults use `Prose`.

mod backward;
mod checkpoint;

pub use backward::{head_backward, HeadGradients};
pub use checkpoint::{Checkpoint, Dims};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{self, sigmoid_raw, SimplexVector};
use crate::matrix::Matrix;

/// Lower clamp applied to log arguments inside the MIL loss. The `full`
/// variant can push a prediction within double-precision rounding of 1.
pub const LOG_CLAMP: f64 = 1e-12;

/// Head variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Base,
    Sparse,
    Joint,
    Full,
}

impl HeadVariant {
    pub fn all() -> [HeadVariant; 4] {
        [
            HeadVariant::Base,
            HeadVariant::Sparse,
            HeadVariant::Joint,
            HeadVariant::Full,
        ]
    }

    /// Base and Sparse combine the two logit streams and carry the
    /// objectness regularizer; Joint and Full replace the detection stream
    /// with objectness and drop the regularizer.
    pub fn uses_objectness_reg(self) -> bool {
        matches!(self, HeadVariant::Base | HeadVariant::Sparse)
    }

    pub fn uses_sparsemax(self) -> bool {
        matches!(self, HeadVariant::Sparse | HeadVariant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Base => "base",
            HeadVariant::Sparse => "sparse",
            HeadVariant::Joint => "joint",
            HeadVariant::Full => "full",
        }
    }
}

impl std::fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(HeadVariant::Base),
            "sparse" => Ok(HeadVariant::Sparse),
            "joint" => Ok(HeadVariant::Joint),
            "full" => Ok(HeadVariant::Full),
            other => Err(Error::invalid_config(format!(
                "unknown variant '{other}', expected base|sparse|joint|full"
            ))),
        }
    }
}

/// Which matrix axis each softmax runs over; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisConvention {
    #[default]
    Prose,
    Notation,
}

impl std::fmt::Display for AxisConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AxisConvention::Prose => "prose",
            AxisConvention::Notation => "notation",
        })
    }
}

impl std::str::FromStr for AxisConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose" => Ok(AxisConvention::Prose),
            "notation" => Ok(AxisConvention::Notation),
            other => Err(Error::invalid_config(format!(
                "unknown axis convention '{other}', expected prose|notation"
            ))),
        }
    }
}

/// Variant plus the hyperparameters that change its loss surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Weight on the objectness regularizer; only read by Base and Sparse.
    pub lambda: f64,
    pub axis: AxisConvention,
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::invalid_config(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(HeadConfig {
            variant,
            lambda,
            axis: AxisConvention::default(),
        })
    }

    pub fn with_axis(mut self, axis: AxisConvention) -> Self {
        self.axis = axis;
        self
    }
}

/// The raw logits a head produces for one image: classification matrix `C`,
/// detection matrix `D` (both N x C), and objectness vector `s` (length N).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsPair {
    classification: Matrix,
    detection: Matrix,
    objectness: Vec<f64>,
}

impl LogitsPair {
    pub fn new(classification: Matrix, detection: Matrix, objectness: Vec<f64>) -> Result<Self> {
        if classification.rows() != detection.rows() || classification.cols() != detection.cols() {
            return Err(Error::invalid_input(format!(
                "classification {}x{} and detection {}x{} logits must have identical shape",
                classification.rows(),
                classification.cols(),
                detection.rows(),
                detection.cols()
            )));
        }
        if classification.rows() < 1 {
            return Err(Error::invalid_input("need at least one proposal"));
        }
        if classification.cols() < 2 {
            return Err(Error::invalid_input(format!(
                "need at least two classes, got {}",
                classification.cols()
            )));
        }
        if objectness.len() != classification.rows() {
            return Err(Error::invalid_input(format!(
                "objectness length {} does not match {} proposals",
                objectness.len(),
                classification.rows()
            )));
        }
        if !classification.is_finite()
            || !detection.is_finite()
            || objectness.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid_input("logits must be finite"));
        }
        Ok(LogitsPair {
            classification,
            detection,
            objectness,
        })
    }

    pub fn n_proposals(&self) -> usize {
        self.classification.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.classification.cols()
    }

    pub fn classification(&self) -> &Matrix {
        &self.classification
    }

    pub fn detection(&self) -> &Matrix {
        &self.detection
    }

    pub fn objectness(&self) -> &[f64] {
        &self.objectness
    }
}

/// Objectness branch of the head: either kept frozen (scores come from the
/// dataset, typically a pretrained class-agnostic detector) or a learned
/// linear layer over the proposal features.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectnessHead {
    Frozen,
    Learned { w: Vec<f64>, b: f64 },
}

/// Linear layer weights producing the logit matrices from proposal features.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// d x C classification weights.
    pub w_cls: Matrix,
    pub b_cls: Vec<f64>,
    /// d x C detection weights.
    pub w_det: Matrix,
    pub b_det: Vec<f64>,
    pub objectness: ObjectnessHead,
}

impl HeadParams {
    pub fn feature_dim(&self) -> usize {
        self.w_cls.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.w_cls.cols()
    }

    pub fn objectness_frozen(&self) -> bool {
        matches!(self.objectness, ObjectnessHead::Frozen)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        let c = self.n_classes();
        if c < 2 {
            return Err(Error::invalid_input(format!(
                "head needs at least two classes, got {c}"
            )));
        }
        if self.w_det.rows() != d || self.w_det.cols() != c {
            return Err(Error::invalid_input(
                "w_det shape does not match w_cls".to_string(),
            ));
        }
        if self.b_cls.len() != c || self.b_det.len() != c {
            return Err(Error::invalid_input(
                "bias length does not match class count".to_string(),
            ));
        }
        if let ObjectnessHead::Learned { w, .. } = &self.objectness {
            if w.len() != d {
                return Err(Error::invalid_input(
                    "w_obj length does not match feature dimension".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// Image-level prediction vector; one entry per class, each strictly inside
/// `(0, 1)`. This is not a distribution over classes: entries do not sum to
/// one.
#[derive(Debug, Clone, PartialEq)]
pub struct MilPrediction {
    values: Vec<f64>,
}

impl MilPrediction {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// One scored box at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// `[x1, y1, x2, y2]` in image pixel coordinates.
    pub bbox: [f64; 4],
    pub class_index: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: [f64; 4], class_index: usize, confidence: f64) -> Result<Self> {
        if !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
            return Err(Error::invalid_input(format!(
                "degenerate box {bbox:?}, need x1 < x2 and y1 < y2"
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid_input(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            class_index,
            confidence,
        })
    }
}

/// Per-proposal record of the classification/detection argmax agreement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MismatchRecord {
    /// `c_i`: max over classes of the per-proposal class softmax.
    pub max_class_prob: f64,
    /// `d_i`: max over classes of the sigmoided detection logits.
    pub max_det_prob: f64,
    pub class_argmax: usize,
    pub det_argmax: usize,
    /// Whether the two argmax positions coincide.
    pub matched: bool,
}

pub(crate) enum StreamAxis {
    Rows,
    Cols,
}

pub(crate) enum Transform {
    Softmax,
    Sparsemax,
}

/// Applies softmax or sparsemax along rows or columns of `m`.
pub(crate) fn transform_along(m: &Matrix, axis: StreamAxis, kind: Transform) -> Matrix {
    let apply = |z: &[f64]| -> SimplexVector {
        match kind {
            // Inputs are validated at LogitsPair construction.
            Transform::Softmax => mathcore::softmax(z).expect("finite logits"),
            Transform::Sparsemax => mathcore::sparsemax(z).expect("finite logits"),
        }
    };
    match axis {
        StreamAxis::Rows => {
            let mut out = Matrix::zeros(m.rows(), m.cols());
            for i in 0..m.rows() {
                let p = apply(m.row(i));
                out.row_mut(i).copy_from_slice(p.values());
            }
            out
        }
        StreamAxis::Cols => {
            let mut out = Matrix::zeros(m.rows(), m.cols());
            for j in 0..m.cols() {
                let p = apply(&m.column(j));
                for (i, &v) in p.values().iter().enumerate() {
                    out.set(i, j, v);
                }
            }
            out
        }
    }
}

pub(crate) fn class_stream_axis(axis: AxisConvention) -> StreamAxis {
    match axis {
        AxisConvention::Prose => StreamAxis::Rows,
        AxisConvention::Notation => StreamAxis::Cols,
    }
}

pub(crate) fn detection_stream_axis(axis: AxisConvention) -> StreamAxis {
    match axis {
        AxisConvention::Prose => StreamAxis::Cols,
        AxisConvention::Notation => StreamAxis::Rows,
    }
}

/// Class softmax matrix `A` for the configured convention.
pub(crate) fn class_stream(cfg: &HeadConfig, logits: &LogitsPair) -> Matrix {
    transform_along(
        logits.classification(),
        class_stream_axis(cfg.axis),
        Transform::Softmax,
    )
}

/// Detection stream matrix `B` (softmax for Base, sparsemax for Sparse).
pub(crate) fn detection_stream(cfg: &HeadConfig, logits: &LogitsPair) -> Matrix {
    let kind = if cfg.variant.uses_sparsemax() {
        Transform::Sparsemax
    } else {
        Transform::Softmax
    };
    transform_along(logits.detection(), detection_stream_axis(cfg.axis), kind)
}

/// Per-proposal weights derived from objectness for Joint/Full.
pub(crate) fn objectness_weights(cfg: &HeadConfig, logits: &LogitsPair) -> SimplexVector {
    if cfg.variant.uses_sparsemax() {
        mathcore::sparsemax(logits.objectness()).expect("finite logits")
    } else {
        mathcore::softmax(logits.objectness()).expect("finite logits")
    }
}

/// Produces the logits from proposal features through the head's linear
/// layers. With a frozen objectness branch, `dataset_objectness` (the scores
/// shipped with the proposals) is passed through unchanged; a learned branch
/// computes `s = F w_obj + b_obj` and ignores it.
pub fn head_linear_forward(
    features: &Matrix,
    dataset_objectness: &[f64],
    params: &HeadParams,
) -> Result<LogitsPair> {
    params.validate()?;
    if features.cols() != params.feature_dim() {
        return Err(Error::invalid_input(format!(
            "feature dimension {} does not match head dimension {}",
            features.cols(),
            params.feature_dim()
        )));
    }
    let n = features.rows();
    let mut cls = features.matmul(&params.w_cls)?;
    let mut det = features.matmul(&params.w_det)?;
    for i in 0..n {
        for (j, v) in cls.row_mut(i).iter_mut().enumerate() {
            *v += params.b_cls[j];
        }
        for (j, v) in det.row_mut(i).iter_mut().enumerate() {
            *v += params.b_det[j];
        }
    }
    let objectness = match &params.objectness {
        ObjectnessHead::Frozen => {
            if dataset_objectness.len() != n {
                return Err(Error::invalid_input(format!(
                    "dataset objectness length {} does not match {} proposals",
                    dataset_objectness.len(),
                    n
                )));
            }
            dataset_objectness.to_vec()
        }
        ObjectnessHead::Learned { w, b } => (0..n)
            .map(|i| {
                features
                    .row(i)
                    .iter()
                    .zip(w)
                    .map(|(&f, &wk)| f * wk)
                    .sum::<f64>()
                    + b
            })
            .collect(),
    };
    LogitsPair::new(cls, det, objectness)
}

/// Image-level MIL prediction for the given variant.
pub fn mil_forward(cfg: &HeadConfig, logits: &LogitsPair) -> Result<MilPrediction> {
    let n = logits.n_proposals();
    let c = logits.n_classes();
    let a = class_stream(cfg, logits);
    let mut values = vec![0.0; c];
    if cfg.variant.uses_objectness_reg() {
        let b = detection_stream(cfg, logits);
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a.get(i, j) * b.get(i, j);
            }
            values[j] = acc;
        }
    } else {
        let w = objectness_weights(cfg, logits);
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a.get(i, j) * w[i];
            }
            values[j] = acc;
        }
    }
    Ok(MilPrediction { values })
}

/// Mean binary negative log-likelihood between the prediction and the
/// image-level labels, with log arguments clamped at [`LOG_CLAMP`].
pub fn mil_loss(y_hat: &MilPrediction, y: &[u8]) -> Result<f64> {
    let values = y_hat.values();
    if values.len() != y.len() {
        return Err(Error::invalid_input(format!(
            "prediction length {} does not match label length {}",
            values.len(),
            y.len()
        )));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::invalid_input("labels must be binary".to_string()));
    }
    let c = y.len() as f64;
    let mut loss = 0.0;
    for (&p, &label) in values.iter().zip(y) {
        if label == 1 {
            loss -= p.max(LOG_CLAMP).ln();
        } else {
            loss -= (1.0 - p).max(LOG_CLAMP).ln();
        }
    }
    Ok(loss / c)
}

/// Objectness regularizer: mean squared gap between each proposal's max
/// sigmoided detection logit and its sigmoided objectness score.
pub fn objectness_reg_loss(logits: &LogitsPair) -> f64 {
    let n = logits.n_proposals();
    let mut acc = 0.0;
    for i in 0..n {
        let (_, row_max) = row_argmax(logits.detection().row(i));
        let gap = sigmoid_raw(row_max) - sigmoid_raw(logits.objectness()[i]);
        acc += gap * gap;
    }
    acc / n as f64
}

/// Training loss: `L_MIL + lambda * L_obj` for Base/Sparse, `L_MIL` alone for
/// Joint/Full.
pub fn total_loss(cfg: &HeadConfig, logits: &LogitsPair, y: &[u8]) -> Result<f64> {
    if cfg.lambda < 0.0 {
        return Err(Error::invalid_config(format!(
            "lambda must be non-negative, got {}",
            cfg.lambda
        )));
    }
    let y_hat = mil_forward(cfg, logits)?;
    let mut loss = mil_loss(&y_hat, y)?;
    if cfg.variant.uses_objectness_reg() {
        loss += cfg.lambda * objectness_reg_loss(logits);
    }
    Ok(loss)
}

/// Argmax with ties broken by the lowest index.
pub(crate) fn row_argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    (best, best_v)
}

/// Scores every proposal and returns one [`Detection`] per proposal (no NMS,
/// no thresholding; ranking happens downstream).
///
/// Per-proposal score matrix: `A_ij * B_ij` for Base/Sparse and
/// `A_ij * S(s_i)` for Joint/Full (the unnormalized joint probability, not
/// the softmax-normalized training weight).
pub fn infer(cfg: &HeadConfig, logits: &LogitsPair, boxes: &[[f64; 4]]) -> Result<Vec<Detection>> {
    let n = logits.n_proposals();
    if boxes.len() != n {
        return Err(Error::invalid_input(format!(
            "got {} boxes for {} proposals",
            boxes.len(),
            n
        )));
    }
    let a = class_stream(cfg, logits);
    let scores: Matrix = if cfg.variant.uses_objectness_reg() {
        let b = detection_stream(cfg, logits);
        let mut m = Matrix::zeros(n, logits.n_classes());
        for i in 0..n {
            for j in 0..logits.n_classes() {
                m.set(i, j, a.get(i, j) * b.get(i, j));
            }
        }
        m
    } else {
        let mut m = Matrix::zeros(n, logits.n_classes());
        for i in 0..n {
            let obj = sigmoid_raw(logits.objectness()[i]);
            for j in 0..logits.n_classes() {
                m.set(i, j, a.get(i, j) * obj);
            }
        }
        m
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (class_index, confidence) = row_argmax(scores.row(i));
        out.push(Detection::new(boxes[i], class_index, confidence)?);
    }
    Ok(out)
}

/// Per-proposal agreement between the class-softmax argmax and the
/// sigmoided-detection argmax. A mismatch means the objectness regularizer
/// tracked a detection score in the wrong class column.
pub fn mismatch_report(logits: &LogitsPair) -> Vec<MismatchRecord> {
    let n = logits.n_proposals();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class_probs = mathcore::softmax(logits.classification().row(i)).expect("finite");
        let (class_argmax, max_class_prob) = row_argmax(class_probs.values());
        let (det_argmax, det_logit) = row_argmax(logits.detection().row(i));
        out.push(MismatchRecord {
            max_class_prob,
            max_det_prob: sigmoid_raw(det_logit),
            class_argmax,
            det_argmax,
            matched: class_argmax == det_argmax,
        });
    }
    out
}
