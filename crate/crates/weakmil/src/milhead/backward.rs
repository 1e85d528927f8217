//! Closed-form backpropagation of the head losses.
//!
//! Gradients are assembled from the mathcore VJPs. The max term inside the
//! objectness regularizer routes its gradient only to each row's argmax
//! entry (ties to the lowest column index), which is the subgradient induced
//! by the forward computation; sparsemax likewise uses the Jacobian of its
//! computed support set.

use crate::error::{Error, Result};
use crate::mathcore::{self, sigmoid_derivative, sigmoid_raw};
use crate::matrix::Matrix;

use super::{
    class_stream, class_stream_axis, detection_stream, detection_stream_axis, head_linear_forward,
    mil_forward, objectness_weights, row_argmax, HeadConfig, HeadParams, ObjectnessHead,
    StreamAxis, LOG_CLAMP,
};

/// Gradients of the total loss with respect to every trainable parameter and
/// to the raw logits.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub w_cls: Matrix,
    pub b_cls: Vec<f64>,
    pub w_det: Matrix,
    pub b_det: Vec<f64>,
    /// Present only when the objectness branch is learned.
    pub w_obj: Option<Vec<f64>>,
    pub b_obj: Option<f64>,
    /// dL/dC.
    pub logits_cls: Matrix,
    /// dL/dD.
    pub logits_det: Matrix,
    /// dL/ds.
    pub objectness: Vec<f64>,
}

/// dL_MIL/dy_hat with the same clamping as the forward loss: a clamped log
/// has zero derivative.
fn loss_grad_wrt_prediction(y_hat: &[f64], y: &[u8]) -> Vec<f64> {
    let c = y.len() as f64;
    y_hat
        .iter()
        .zip(y)
        .map(|(&p, &label)| {
            if label == 1 {
                if p > LOG_CLAMP {
                    -1.0 / (c * p)
                } else {
                    0.0
                }
            } else if 1.0 - p > LOG_CLAMP {
                1.0 / (c * (1.0 - p))
            } else {
                0.0
            }
        })
        .collect()
}

/// VJP of a row- or column-wise simplex transform applied to a matrix.
fn transform_vjp_along(
    outputs: &Matrix,
    upstream: &Matrix,
    axis: StreamAxis,
    sparse: bool,
) -> Result<Matrix> {
    let vjp = |p: &[f64], u: &[f64]| -> Result<Vec<f64>> {
        let p = mathcore::SimplexVector::new(p.to_vec())?;
        if sparse {
            mathcore::sparsemax_vjp(&p, u)
        } else {
            mathcore::softmax_vjp(&p, u)
        }
    };
    let mut out = Matrix::zeros(outputs.rows(), outputs.cols());
    match axis {
        StreamAxis::Rows => {
            for i in 0..outputs.rows() {
                let g = vjp(outputs.row(i), upstream.row(i))?;
                out.row_mut(i).copy_from_slice(&g);
            }
        }
        StreamAxis::Cols => {
            for j in 0..outputs.cols() {
                let g = vjp(&outputs.column(j), &upstream.column(j))?;
                for (i, &v) in g.iter().enumerate() {
                    out.set(i, j, v);
                }
            }
        }
    }
    Ok(out)
}

/// Exact analytic gradients of [`super::total_loss`] with respect to every
/// trainable parameter, plus the logit-level gradients dL/dC, dL/dD, dL/ds.
///
/// Forward quantities are recomputed from `features` and `params`; with a
/// frozen objectness branch, `dataset_objectness` supplies `s` and the
/// returned `objectness` field is the gradient with respect to those scores.
pub fn head_backward(
    cfg: &HeadConfig,
    features: &Matrix,
    dataset_objectness: &[f64],
    params: &HeadParams,
    y: &[u8],
) -> Result<HeadGradients> {
    if cfg.lambda < 0.0 {
        return Err(Error::invalid_config(format!(
            "lambda must be non-negative, got {}",
            cfg.lambda
        )));
    }
    let logits = head_linear_forward(features, dataset_objectness, params)?;
    let n = logits.n_proposals();
    let c = logits.n_classes();
    if y.len() != c {
        return Err(Error::invalid_input(format!(
            "label length {} does not match {} classes",
            y.len(),
            c
        )));
    }

    let a = class_stream(cfg, &logits);
    let y_hat = mil_forward(cfg, &logits)?;
    let g = loss_grad_wrt_prediction(y_hat.values(), y);

    // dL/dA, and dL/dD or dL/ds depending on the variant.
    let mut d_a = Matrix::zeros(n, c);
    let mut d_det;
    let mut d_s = vec![0.0; n];

    if cfg.variant.uses_objectness_reg() {
        let b = detection_stream(cfg, &logits);
        let mut d_b = Matrix::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                d_a.set(i, j, g[j] * b.get(i, j));
                d_b.set(i, j, g[j] * a.get(i, j));
            }
        }
        d_det = transform_vjp_along(
            &b,
            &d_b,
            detection_stream_axis(cfg.axis),
            cfg.variant.uses_sparsemax(),
        )?;

        // Objectness regularizer: gradient flows to each row's argmax entry
        // of D and to s itself.
        let scale = cfg.lambda * 2.0 / n as f64;
        for i in 0..n {
            let (jmax, row_max) = row_argmax(logits.detection().row(i));
            let sm = sigmoid_raw(row_max);
            let ss = sigmoid_raw(logits.objectness()[i]);
            let gap = sm - ss;
            let cur = d_det.get(i, jmax);
            d_det.set(i, jmax, cur + scale * gap * sigmoid_derivative(sm));
            d_s[i] = -scale * gap * sigmoid_derivative(ss);
        }
    } else {
        let w = objectness_weights(cfg, &logits);
        let mut d_w = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..c {
                d_a.set(i, j, g[j] * w[i]);
                acc += g[j] * a.get(i, j);
            }
            d_w[i] = acc;
        }
        d_s = if cfg.variant.uses_sparsemax() {
            mathcore::sparsemax_vjp(&w, &d_w)?
        } else {
            mathcore::softmax_vjp(&w, &d_w)?
        };
        d_det = Matrix::zeros(n, c);
    }

    let d_cls = transform_vjp_along(&a, &d_a, class_stream_axis(cfg.axis), false)?;

    // Push logit gradients through the linear layers.
    let w_cls_grad = features.transpose_matmul(&d_cls)?;
    let w_det_grad = features.transpose_matmul(&d_det)?;
    let mut b_cls_grad = vec![0.0; c];
    let mut b_det_grad = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            b_cls_grad[j] += d_cls.get(i, j);
            b_det_grad[j] += d_det.get(i, j);
        }
    }

    let (w_obj_grad, b_obj_grad) = match &params.objectness {
        ObjectnessHead::Frozen => (None, None),
        ObjectnessHead::Learned { .. } => {
            let d = params.feature_dim();
            let mut wg = vec![0.0; d];
            let mut bg = 0.0;
            for i in 0..n {
                let row = features.row(i);
                for (k, &f) in row.iter().enumerate() {
                    wg[k] += f * d_s[i];
                }
                bg += d_s[i];
            }
            (Some(wg), Some(bg))
        }
    };

    Ok(HeadGradients {
        w_cls: w_cls_grad,
        b_cls: b_cls_grad,
        w_det: w_det_grad,
        b_det: b_det_grad,
        w_obj: w_obj_grad,
        b_obj: b_obj_grad,
        logits_cls: d_cls,
        logits_det: d_det,
        objectness: d_s,
    })
}
