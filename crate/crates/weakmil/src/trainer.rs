//! Deterministic mini-batch training with decoupled weight decay, a
//! step-drop learning-rate schedule, and a finite-difference gradient-check
//! harness.
//!
//! Determinism contract: the dataset, the config, and the seed fully
//! determine the resulting checkpoint and per-epoch losses. Parameter
//! initialization and the per-epoch shuffle come from a single seeded
//! ChaCha stream; batch gradients accumulate in a fixed order. Only the
//! `wall_ms` field of the training log reflects real time.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::WeakImageSample;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::milhead::{
    head_backward, head_linear_forward, total_loss, AxisConvention, Checkpoint, HeadConfig,
    HeadGradients, HeadParams, HeadVariant, ObjectnessHead,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Maximum group-relative error accepted by [`gradcheck`].
pub const GRADCHECK_THRESHOLD: f64 = 1e-5;

/// Central-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-6;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: HeadVariant,
    /// Objectness regularizer weight (Base/Sparse only).
    pub lambda: f64,
    pub axis_convention: AxisConvention,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the MIL head.
    pub lr_head: f64,
    /// First epoch (1-based) at which the learning rate is divided by
    /// `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub objectness_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: HeadVariant::Full,
            lambda: 1000.0,
            axis_convention: AxisConvention::Prose,
            epochs: 30,
            batch_size: 16,
            lr_head: 1e-3,
            lr_drop_epoch: 16,
            lr_drop_factor: 10.0,
            weight_decay: 1e-4,
            seed: 0,
            objectness_frozen: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::invalid_config("lambda must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size must be positive"));
        }
        if !(self.lr_head > 0.0 && self.lr_head.is_finite()) {
            return Err(Error::invalid_config("lr_head must be positive"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::invalid_config("lr_drop_factor must be positive"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::invalid_config("weight_decay must be non-negative"));
        }
        if self.lr_drop_epoch == 0 {
            return Err(Error::invalid_config("lr_drop_epoch must be positive"));
        }
        // epochs = 0 is allowed and yields the seeded initialization.
        if self.epochs > 0 && self.lr_drop_epoch > self.epochs {
            return Err(Error::invalid_config(format!(
                "lr_drop_epoch {} exceeds epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        Ok(HeadConfig::new(self.variant, self.lambda)?.with_axis(self.axis_convention))
    }

    /// Effective learning rate at a 1-based epoch index:
    /// `lr_head / lr_drop_factor` once `epoch >= lr_drop_epoch`.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr_head / self.lr_drop_factor
        } else {
            self.lr_head
        }
    }
}

/// First/second moment accumulators mirroring the parameter shapes, plus the
/// step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &HeadParams) -> Self {
        let shapes: Vec<usize> = param_group_sizes(params);
        OptimizerState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn param_group_sizes(params: &HeadParams) -> Vec<usize> {
    let mut sizes = vec![
        params.w_cls.data().len(),
        params.b_cls.len(),
        params.w_det.data().len(),
        params.b_det.len(),
    ];
    if let ObjectnessHead::Learned { w, .. } = &params.objectness {
        sizes.push(w.len());
        sizes.push(1);
    }
    sizes
}

fn update_group(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    weight_decay: f64,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::invalid_input("gradient shape mismatch"));
    }
    for k in 0..param.len() {
        param[k] *= 1.0 - lr * weight_decay;
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grad[k];
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        param[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

/// One AdamW update: decoupled weight decay (`p *= 1 - lr * wd`) followed by
/// the bias-corrected adaptive step. Deterministic; mutates `params` and
/// `state` in place.
pub fn adam_step(
    params: &mut HeadParams,
    grads: &HeadGradients,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let sizes = param_group_sizes(params);
    if state.m.len() != sizes.len() || state.m.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return Err(Error::invalid_input(
            "optimizer state does not match parameter shapes",
        ));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    let (m, v) = (&mut state.m, &mut state.v);
    update_group(
        params.w_cls.data_mut(),
        grads.w_cls.data(),
        &mut m[0],
        &mut v[0],
        lr,
        weight_decay,
        bc1,
        bc2,
    )?;
    update_group(
        &mut params.b_cls,
        &grads.b_cls,
        &mut m[1],
        &mut v[1],
        lr,
        weight_decay,
        bc1,
        bc2,
    )?;
    update_group(
        params.w_det.data_mut(),
        grads.w_det.data(),
        &mut m[2],
        &mut v[2],
        lr,
        weight_decay,
        bc1,
        bc2,
    )?;
    update_group(
        &mut params.b_det,
        &grads.b_det,
        &mut m[3],
        &mut v[3],
        lr,
        weight_decay,
        bc1,
        bc2,
    )?;
    if let ObjectnessHead::Learned { w, b } = &mut params.objectness {
        let wg = grads
            .w_obj
            .as_ref()
            .ok_or_else(|| Error::invalid_input("missing w_obj gradient for learned objectness"))?;
        let bg = grads
            .b_obj
            .ok_or_else(|| Error::invalid_input("missing b_obj gradient for learned objectness"))?;
        update_group(w, wg, &mut m[4], &mut v[4], lr, weight_decay, bc1, bc2)?;
        let mut b_slot = [*b];
        update_group(
            &mut b_slot,
            &[bg],
            &mut m[5],
            &mut v[5],
            lr,
            weight_decay,
            bc1,
            bc2,
        )?;
        *b = b_slot[0];
    }
    Ok(())
}

/// Per-epoch training log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

/// Training result: the final checkpoint and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

struct PreparedSample {
    features: Matrix,
    objectness: Vec<f64>,
    labels: Vec<u8>,
}

fn prepare(dataset: &[WeakImageSample]) -> Result<Vec<PreparedSample>> {
    if dataset.is_empty() {
        return Err(Error::invalid_input("dataset must not be empty"));
    }
    let d = dataset[0]
        .proposals
        .first()
        .map(|p| p.features.len())
        .ok_or_else(|| Error::invalid_input("samples must carry proposals"))?;
    let c = dataset[0].labels.len();
    if c < 2 {
        return Err(Error::invalid_input("need at least two classes"));
    }
    dataset
        .iter()
        .map(|s| {
            if s.labels.len() != c {
                return Err(Error::invalid_input(format!(
                    "image {} label length {} disagrees with {}",
                    s.image_id,
                    s.labels.len(),
                    c
                )));
            }
            let n = s.proposals.len();
            if n == 0 {
                return Err(Error::invalid_input(format!(
                    "image {} has no proposals",
                    s.image_id
                )));
            }
            let mut data = Vec::with_capacity(n * d);
            for p in &s.proposals {
                if p.features.len() != d {
                    return Err(Error::invalid_input(format!(
                        "image {} feature dimension {} disagrees with {}",
                        s.image_id,
                        p.features.len(),
                        d
                    )));
                }
                data.extend_from_slice(&p.features);
            }
            Ok(PreparedSample {
                features: Matrix::from_vec(n, d, data)?,
                objectness: s.proposals.iter().map(|p| p.objectness).collect(),
                labels: s.labels.clone(),
            })
        })
        .collect()
}

/// Seeded parameter initialization: every weight and bias uniform in
/// `[-1/sqrt(d), 1/sqrt(d))`.
pub fn init_params(rng: &mut ChaCha8Rng, d: usize, c: usize, frozen: bool) -> HeadParams {
    let bound = 1.0 / (d as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
    HeadParams {
        w_cls: Matrix::from_vec(d, c, draw(d * c)).expect("sized draw"),
        b_cls: draw(c),
        w_det: Matrix::from_vec(d, c, draw(d * c)).expect("sized draw"),
        b_det: draw(c),
        objectness: if frozen {
            ObjectnessHead::Frozen
        } else {
            let w = draw(d);
            let b = rng.gen_range(-bound..bound);
            ObjectnessHead::Learned { w, b }
        },
    }
}

fn accumulate(acc: &mut HeadGradients, g: &HeadGradients) {
    for (a, b) in acc.w_cls.data_mut().iter_mut().zip(g.w_cls.data()) {
        *a += b;
    }
    for (a, b) in acc.b_cls.iter_mut().zip(&g.b_cls) {
        *a += b;
    }
    for (a, b) in acc.w_det.data_mut().iter_mut().zip(g.w_det.data()) {
        *a += b;
    }
    for (a, b) in acc.b_det.iter_mut().zip(&g.b_det) {
        *a += b;
    }
    if let (Some(aw), Some(gw)) = (acc.w_obj.as_mut(), g.w_obj.as_ref()) {
        for (a, b) in aw.iter_mut().zip(gw) {
            *a += b;
        }
    }
    if let (Some(ab), Some(gb)) = (acc.b_obj.as_mut(), g.b_obj) {
        *ab += gb;
    }
}

fn scale_gradients(acc: &mut HeadGradients, factor: f64) {
    for v in acc.w_cls.data_mut() {
        *v *= factor;
    }
    for v in &mut acc.b_cls {
        *v *= factor;
    }
    for v in acc.w_det.data_mut() {
        *v *= factor;
    }
    for v in &mut acc.b_det {
        *v *= factor;
    }
    if let Some(w) = acc.w_obj.as_mut() {
        for v in w {
            *v *= factor;
        }
    }
    if let Some(b) = acc.b_obj.as_mut() {
        *b *= factor;
    }
}

fn zero_gradients_like(params: &HeadParams, c: usize) -> HeadGradients {
    let d = params.feature_dim();
    let learned = matches!(params.objectness, ObjectnessHead::Learned { .. });
    HeadGradients {
        w_cls: Matrix::zeros(d, c),
        b_cls: vec![0.0; c],
        w_det: Matrix::zeros(d, c),
        b_det: vec![0.0; c],
        w_obj: learned.then(|| vec![0.0; d]),
        b_obj: learned.then_some(0.0),
        logits_cls: Matrix::zeros(1, 1),
        logits_det: Matrix::zeros(1, 1),
        objectness: Vec::new(),
    }
}

/// Trains head parameters on the dataset. Identical `(dataset, config)`
/// pairs produce bit-identical checkpoints and loss sequences.
pub fn train(dataset: &[WeakImageSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let head = config.head_config()?;
    let prepared = prepare(dataset)?;
    let d = prepared[0].features.cols();
    let c = prepared[0].labels.len();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params(&mut rng, d, c, config.objectness_frozen);
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = config.effective_lr(epoch);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc = zero_gradients_like(&params, c);
            for &idx in batch {
                let sample = &prepared[idx];
                let logits = head_linear_forward(&sample.features, &sample.objectness, &params)?;
                loss_sum += total_loss(&head, &logits, &sample.labels)?;
                let grads = head_backward(
                    &head,
                    &sample.features,
                    &sample.objectness,
                    &params,
                    &sample.labels,
                )?;
                accumulate(&mut acc, &grads);
            }
            scale_gradients(&mut acc, 1.0 / batch.len() as f64);
            adam_step(&mut params, &acc, &mut state, lr, config.weight_decay)?;
        }

        log.push(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / prepared.len() as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_parts(&head, &params),
        log,
    })
}

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

/// Result of the finite-difference comparison for one parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Gradient-check report for one head variant.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub variant: HeadVariant,
    pub trials: usize,
    pub threshold: f64,
    pub groups: Vec<GroupCheck>,
    pub pass: bool,
}

/// The relative error of a gradient group: max coordinate-wise deviation
/// over the group's own magnitude scale. Groups where both sides are
/// numerically zero count as exact.
fn group_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let an_max = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let num_max = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = an_max.max(num_max);
    if scale < 1e-7 {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

struct GradcheckInstance {
    features: Matrix,
    data_objectness: Vec<f64>,
    params: HeadParams,
    labels: Vec<u8>,
}

fn draw_instance(rng: &mut ChaCha8Rng, config: &TrainConfig) -> GradcheckInstance {
    let n = rng.gen_range(1..=50);
    let c = rng.gen_range(2..=10);
    let d = rng.gen_range(1..=16);
    let features = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("sized draw");
    let data_objectness: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let params = init_params(rng, d, c, config.objectness_frozen);
    let mut labels: Vec<u8> = (0..c).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    labels[rng.gen_range(0..c)] = 1;
    GradcheckInstance {
        features,
        data_objectness,
        params,
        labels,
    }
}

/// Support-change margins must exceed the FD step comfortably so the
/// perturbation cannot flip a sparsemax support set or an argmax.
fn instance_is_stable(head: &HeadConfig, inst: &GradcheckInstance) -> bool {
    const MARGIN: f64 = 1e-4;
    let logits = match head_linear_forward(&inst.features, &inst.data_objectness, &inst.params) {
        Ok(l) => l,
        Err(_) => return false,
    };
    if head.variant.uses_objectness_reg() {
        for i in 0..logits.n_proposals() {
            let row = logits.detection().row(i);
            if row.len() > 1 {
                let mut sorted: Vec<f64> = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[0] - sorted[1] < MARGIN {
                    return false;
                }
            }
        }
    }
    if head.variant.uses_sparsemax() {
        if head.variant.uses_objectness_reg() {
            match head.axis {
                AxisConvention::Prose => {
                    for j in 0..logits.n_classes() {
                        let col = logits.detection().column(j);
                        let margin = crate::mathcore::sparsemax_support_margin(&col)
                            .expect("finite logits");
                        if margin < MARGIN {
                            return false;
                        }
                    }
                }
                AxisConvention::Notation => {
                    for i in 0..logits.n_proposals() {
                        let margin =
                            crate::mathcore::sparsemax_support_margin(logits.detection().row(i))
                                .expect("finite logits");
                        if margin < MARGIN {
                            return false;
                        }
                    }
                }
            }
        } else {
            let margin = crate::mathcore::sparsemax_support_margin(logits.objectness())
                .expect("finite logits");
            if margin < MARGIN {
                return false;
            }
        }
    }
    true
}

fn instance_loss(head: &HeadConfig, inst: &GradcheckInstance) -> f64 {
    let logits = head_linear_forward(&inst.features, &inst.data_objectness, &inst.params)
        .expect("valid instance");
    total_loss(head, &logits, &inst.labels).expect("valid instance")
}

/// Numeric gradients via central differences for every group checked by
/// [`gradcheck`].
fn numeric_gradients(head: &HeadConfig, inst: &GradcheckInstance) -> Vec<(String, Vec<f64>)> {
    let h = GRADCHECK_STEP;
    let mut out = Vec::new();

    let fd_params = |mutate: &dyn Fn(&mut GradcheckInstance, usize, f64), len: usize| -> Vec<f64> {
        (0..len)
            .map(|k| {
                let mut plus = GradcheckInstance {
                    features: inst.features.clone(),
                    data_objectness: inst.data_objectness.clone(),
                    params: inst.params.clone(),
                    labels: inst.labels.clone(),
                };
                mutate(&mut plus, k, h);
                let mut minus = GradcheckInstance {
                    features: inst.features.clone(),
                    data_objectness: inst.data_objectness.clone(),
                    params: inst.params.clone(),
                    labels: inst.labels.clone(),
                };
                mutate(&mut minus, k, -h);
                (instance_loss(head, &plus) - instance_loss(head, &minus)) / (2.0 * h)
            })
            .collect()
    };

    out.push((
        "classification_weights".to_string(),
        fd_params(
            &|inst, k, dv| inst.params.w_cls.data_mut()[k] += dv,
            inst.params.w_cls.data().len(),
        ),
    ));
    out.push((
        "classification_bias".to_string(),
        fd_params(&|inst, k, dv| inst.params.b_cls[k] += dv, inst.params.b_cls.len()),
    ));
    out.push((
        "detection_weights".to_string(),
        fd_params(
            &|inst, k, dv| inst.params.w_det.data_mut()[k] += dv,
            inst.params.w_det.data().len(),
        ),
    ));
    out.push((
        "detection_bias".to_string(),
        fd_params(&|inst, k, dv| inst.params.b_det[k] += dv, inst.params.b_det.len()),
    ));

    match &inst.params.objectness {
        ObjectnessHead::Frozen => {
            out.push((
                "objectness".to_string(),
                fd_params(
                    &|inst, k, dv| inst.data_objectness[k] += dv,
                    inst.data_objectness.len(),
                ),
            ));
        }
        ObjectnessHead::Learned { w, .. } => {
            let wlen = w.len();
            let mut grads = fd_params(
                &|inst, k, dv| {
                    if let ObjectnessHead::Learned { w, .. } = &mut inst.params.objectness {
                        w[k] += dv;
                    }
                },
                wlen,
            );
            grads.extend(fd_params(
                &|inst, _k, dv| {
                    if let ObjectnessHead::Learned { b, .. } = &mut inst.params.objectness {
                        *b += dv;
                    }
                },
                1,
            ));
            out.push(("objectness".to_string(), grads));
        }
    }
    out
}

fn analytic_gradients(grads: &HeadGradients, frozen: bool) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![
        (
            "classification_weights".to_string(),
            grads.w_cls.data().to_vec(),
        ),
        ("classification_bias".to_string(), grads.b_cls.clone()),
        ("detection_weights".to_string(), grads.w_det.data().to_vec()),
        ("detection_bias".to_string(), grads.b_det.clone()),
    ];
    if frozen {
        out.push(("objectness".to_string(), grads.objectness.clone()));
    } else {
        let mut obj = grads.w_obj.clone().expect("learned objectness gradient");
        obj.push(grads.b_obj.expect("learned objectness gradient"));
        out.push(("objectness".to_string(), obj));
    }
    out
}

fn compare_groups(
    analytic: &[(String, Vec<f64>)],
    numeric: &[(String, Vec<f64>)],
    maxima: &mut std::collections::BTreeMap<String, f64>,
) {
    for ((name, a), (_, n)) in analytic.iter().zip(numeric) {
        let err = group_relative_error(a, n);
        let slot = maxima.entry(name.clone()).or_insert(0.0);
        if err > *slot {
            *slot = err;
        }
    }
}

/// Compares [`head_backward`] against central finite differences on seeded
/// random instances (N in 1..=50, C in 2..=10, d in 1..=16). Sparsemax and
/// argmax paths are only sampled at support-stable points, where the loss is
/// differentiable.
pub fn gradcheck(config: &TrainConfig, trials: usize) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::invalid_input("trials must be at least 1"));
    }
    config.validate()?;
    let head = config.head_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut maxima = std::collections::BTreeMap::new();

    for _ in 0..trials {
        let inst = loop {
            let candidate = draw_instance(&mut rng, config);
            if instance_is_stable(&head, &candidate) {
                break candidate;
            }
        };
        let grads = head_backward(
            &head,
            &inst.features,
            &inst.data_objectness,
            &inst.params,
            &inst.labels,
        )?;
        let analytic = analytic_gradients(&grads, config.objectness_frozen);
        let numeric = numeric_gradients(&head, &inst);
        compare_groups(&analytic, &numeric, &mut maxima);
    }

    let groups: Vec<GroupCheck> = maxima
        .into_iter()
        .map(|(group, max_rel_error)| GroupCheck {
            group,
            max_rel_error,
            pass: max_rel_error < GRADCHECK_THRESHOLD,
        })
        .collect();
    let pass = groups.iter().all(|g| g.pass);
    Ok(GradcheckReport {
        variant: config.variant,
        trials,
        threshold: GRADCHECK_THRESHOLD,
        groups,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, Proposal, ScenarioConfig};
    use crate::evalkit::GroundTruthBox;

    fn toy_sample(image_id: u64, features: Vec<Vec<f64>>, s: Vec<f64>, labels: Vec<u8>) -> WeakImageSample {
        let proposals = features
            .into_iter()
            .zip(s)
            .enumerate()
            .map(|(i, (f, obj))| Proposal {
                bbox: [
                    10.0 * i as f64,
                    0.0,
                    10.0 * i as f64 + 5.0,
                    5.0,
                ],
                objectness: obj,
                features: f,
            })
            .collect();
        WeakImageSample {
            image_id,
            width: 64,
            height: 64,
            labels,
            proposals,
            gt: vec![GroundTruthBox::new([0.0, 0.0, 5.0, 5.0], 0).unwrap()],
        }
    }

    #[test]
    fn adam_zero_gradient_zero_decay_is_identity() {
        let mut params = init_params(&mut ChaCha8Rng::seed_from_u64(0), 2, 2, true);
        let before = params.clone();
        let grads = zero_gradients_like(&params, 2);
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        // Scalar parameter, grad = 1, lr = 0.1, no decay: the bias-corrected
        // first step is -0.1 / (1 + 1e-8).
        let mut params = HeadParams {
            w_cls: Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            b_cls: vec![0.0; 2],
            w_det: Matrix::zeros(1, 2),
            b_det: vec![0.0; 2],
            objectness: ObjectnessHead::Frozen,
        };
        let mut grads = zero_gradients_like(&params, 2);
        grads.w_cls.data_mut()[0] = 1.0;
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.w_cls.data()[0] - expected).abs() < 1e-15);
        assert!((params.w_cls.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_decoupled_decay_only() {
        let mut params = HeadParams {
            w_cls: Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            b_cls: vec![1.0; 2],
            w_det: Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            b_det: vec![1.0; 2],
            objectness: ObjectnessHead::Frozen,
        };
        let grads = zero_gradients_like(&params, 2);
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, 0.5).unwrap();
        for &v in params.w_cls.data() {
            assert!((v - 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradients_decay_geometrically() {
        let mut params = init_params(&mut ChaCha8Rng::seed_from_u64(9), 3, 2, false);
        let reference = params.clone();
        let grads = zero_gradients_like(&params, 2);
        let mut state = OptimizerState::new(&params);
        let lr = 0.05;
        let wd = 0.1;
        let steps = 7;
        for _ in 0..steps {
            adam_step(&mut params, &grads, &mut state, lr, wd).unwrap();
        }
        // Per-step multiplication, matching the implementation order exactly.
        let decay = |x: f64| -> f64 {
            let mut v = x;
            for _ in 0..steps {
                v *= 1.0 - lr * wd;
            }
            v
        };
        for (after, before) in params.w_cls.data().iter().zip(reference.w_cls.data()) {
            assert_eq!(*after, decay(*before));
        }
        if let (ObjectnessHead::Learned { w: wa, b: ba }, ObjectnessHead::Learned { w: wb, b: bb }) =
            (&params.objectness, &reference.objectness)
        {
            for (after, before) in wa.iter().zip(wb) {
                assert_eq!(*after, decay(*before));
            }
            assert_eq!(*ba, decay(*bb));
        } else {
            panic!("expected learned objectness");
        }
    }

    #[test]
    fn train_zero_epochs_returns_seeded_init() {
        let (train_set, _) = generate(&ScenarioConfig {
            n_classes: 2,
            images_per_class: 3,
            n_proposals: 4,
            feature_dim: 3,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let config = TrainConfig {
            epochs: 0,
            seed: 123,
            variant: HeadVariant::Joint,
            ..Default::default()
        };
        let outcome = train(&train_set, &config).unwrap();
        assert!(outcome.log.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let expected = init_params(&mut rng, 3, 2, true);
        let (_, params) = outcome.checkpoint.into_parts().unwrap();
        assert_eq!(params, expected);
    }

    #[test]
    fn train_is_deterministic() {
        let (train_set, _) = generate(&ScenarioConfig {
            n_classes: 2,
            images_per_class: 4,
            n_proposals: 5,
            feature_dim: 4,
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr_drop_epoch: 2,
            seed: 99,
            variant: HeadVariant::Base,
            ..Default::default()
        };
        let a = train(&train_set, &config).unwrap();
        let b = train(&train_set, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.checkpoint).unwrap(),
            serde_json::to_string(&b.checkpoint).unwrap()
        );
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.mean_loss, rb.mean_loss);
            assert_eq!(ra.lr, rb.lr);
        }
    }

    #[test]
    fn lr_schedule_is_exact() {
        let config = TrainConfig {
            epochs: 6,
            lr_drop_epoch: 4,
            lr_head: 2e-3,
            lr_drop_factor: 10.0,
            ..Default::default()
        };
        for epoch in 1..=6 {
            let expected = if epoch >= 4 { 2e-3 / 10.0 } else { 2e-3 };
            assert_eq!(config.effective_lr(epoch), expected);
        }
    }

    #[test]
    fn joint_converges_on_linearly_separable_toy() {
        // Single sample, two proposals: proposal 0 carries class-0 evidence
        // and all the objectness mass.
        let sample = toy_sample(
            0,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![4.0, -4.0],
            vec![1, 0],
        );
        let config = TrainConfig {
            variant: HeadVariant::Joint,
            epochs: 200,
            batch_size: 1,
            lr_head: 0.05,
            lr_drop_epoch: 200,
            weight_decay: 0.0,
            seed: 7,
            ..Default::default()
        };
        let outcome = train(&[sample.clone()], &config).unwrap();
        let final_loss = outcome.log.last().unwrap().mean_loss;
        assert!(final_loss < 0.05, "final loss {final_loss}");
    }

    #[test]
    fn full_batch_joint_loss_is_monotone_at_small_lr() {
        // N = 1 reduces the joint prediction to the row softmax of C; the
        // full-batch loss must not increase once lr <= 1e-2.
        let samples: Vec<WeakImageSample> = (0..4)
            .map(|i| {
                let f = vec![vec![(i % 2) as f64, ((i + 1) % 2) as f64]];
                let labels = if i % 2 == 0 { vec![1, 0] } else { vec![0, 1] };
                toy_sample(i as u64, f, vec![0.0], labels)
            })
            .collect();
        let config = TrainConfig {
            variant: HeadVariant::Joint,
            epochs: 60,
            batch_size: 4,
            lr_head: 1e-2,
            lr_drop_epoch: 60,
            weight_decay: 0.0,
            seed: 3,
            ..Default::default()
        };
        let outcome = train(&samples, &config).unwrap();
        for pair in outcome.log.windows(2) {
            assert!(
                pair[1].mean_loss <= pair[0].mean_loss + 1e-12,
                "loss increased: {} -> {}",
                pair[0].mean_loss,
                pair[1].mean_loss
            );
        }
    }

    #[test]
    fn train_rejects_bad_inputs() {
        assert!(train(&[], &TrainConfig::default()).is_err());

        let a = toy_sample(0, vec![vec![1.0, 0.0]], vec![0.0], vec![1, 0]);
        let mut b = toy_sample(1, vec![vec![1.0, 0.0, 3.0]], vec![0.0], vec![1, 0]);
        b.proposals[0].features = vec![1.0, 0.0, 3.0];
        assert!(train(&[a, b], &TrainConfig::default()).is_err());

        let bad = TrainConfig {
            lr_drop_epoch: 50,
            epochs: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradcheck_passes_all_variants() {
        for variant in HeadVariant::all() {
            for frozen in [true, false] {
                let config = TrainConfig {
                    variant,
                    lambda: 1000.0,
                    objectness_frozen: frozen,
                    seed: 17,
                    ..Default::default()
                };
                let report = gradcheck(&config, 6).unwrap();
                assert!(
                    report.pass,
                    "gradcheck failed for {variant} frozen={frozen}: {:?}",
                    report.groups
                );
            }
        }
    }

    #[test]
    fn gradcheck_flags_corrupted_objectness_gradient() {
        // Negate dL/ds before comparison and watch the objectness group fail.
        let config = TrainConfig {
            variant: HeadVariant::Joint,
            objectness_frozen: true,
            seed: 29,
            ..Default::default()
        };
        let head = config.head_config().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let inst = loop {
            let candidate = draw_instance(&mut rng, &config);
            if instance_is_stable(&head, &candidate) {
                break candidate;
            }
        };
        let mut grads = head_backward(
            &head,
            &inst.features,
            &inst.data_objectness,
            &inst.params,
            &inst.labels,
        )
        .unwrap();
        for v in &mut grads.objectness {
            *v = -*v;
        }
        let analytic = analytic_gradients(&grads, true);
        let numeric = numeric_gradients(&head, &inst);
        let mut maxima = std::collections::BTreeMap::new();
        compare_groups(&analytic, &numeric, &mut maxima);
        assert!(maxima["objectness"] > GRADCHECK_THRESHOLD);
        assert!(maxima["classification_weights"] < GRADCHECK_THRESHOLD);
    }

    #[test]
    fn gradcheck_frozen_report_has_no_objectness_layer_group() {
        let config = TrainConfig {
            variant: HeadVariant::Base,
            objectness_frozen: true,
            seed: 31,
            ..Default::default()
        };
        let report = gradcheck(&config, 2).unwrap();
        let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert!(names.contains(&"objectness"));
        assert_eq!(names.len(), 5);
    }
}
