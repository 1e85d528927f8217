//! Seeded synthetic weak-supervision scenarios and JSONL dataset I/O.
//!
//! Every generated image carries one ground-truth object and three kinds of
//! proposals:
//!
//! - a *full-object* proposal: the ground-truth box itself, high objectness,
//!   class features at unit scale;
//! - a *part* proposal: a sub-box with IoU `part_iou` (< 0.5, so ranking it
//!   first is a miss at AP50), objectness lower by `objectness_gap`, and the
//!   same class feature direction scaled by `part_feature_gain` — a
//!   highly-localized distinctive feature that carries more class evidence
//!   than the whole object;
//! - background distractors: random boxes, near-zero class features, low
//!   objectness.
//!
//! Feature layout: dimension `k < n_classes` is class `k`'s prototype
//! direction; remaining dimensions are pure noise. Gaussian noise of
//! `noise_std` is added to every dimension of every proposal.
//!
//! Generation is deterministic from the seed. Each image derives its own RNG
//! stream from `seed ^ image_id`, so per-image work is order-independent and
//! may run in parallel.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::GroundTruthBox;

/// Generated image width and height in pixels.
pub const IMAGE_SIZE: u32 = 640;

/// Objectness logit assigned to the full-object proposal (pre-gap, pre-noise).
pub const FULL_OBJECTNESS_LOGIT: f64 = 2.0;

/// Base objectness logit for background distractors, jittered by +-0.5.
pub const DISTRACTOR_OBJECTNESS_LOGIT: f64 = -4.0;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Scenario parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub n_proposals: usize,
    pub feature_dim: usize,
    /// How much stronger the class signal is on the distinctive-part
    /// proposal than on the full-object proposal.
    pub part_feature_gain: f64,
    /// Objectness logit of the full-object proposal minus the part proposal.
    pub objectness_gap: f64,
    /// IoU of the part box with the ground truth; must stay below 0.5.
    pub part_iou: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_classes: 10,
            images_per_class: 40,
            n_proposals: 300,
            feature_dim: 16,
            part_feature_gain: 4.0,
            objectness_gap: 4.0,
            part_iou: 0.2,
            noise_std: 0.75,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid_config("n_classes must be at least 2"));
        }
        if self.images_per_class == 0 {
            return Err(Error::invalid_config("images_per_class must be positive"));
        }
        if self.n_proposals < 3 {
            return Err(Error::invalid_config(
                "n_proposals must be at least 3 (full object, part, distractors)",
            ));
        }
        if self.feature_dim < self.n_classes {
            return Err(Error::invalid_config(format!(
                "feature_dim {} cannot hold {} class prototype dimensions",
                self.feature_dim, self.n_classes
            )));
        }
        if self.part_feature_gain < 1.0 || !self.part_feature_gain.is_finite() {
            return Err(Error::invalid_config("part_feature_gain must be >= 1"));
        }
        if !(self.part_iou > 0.0 && self.part_iou < 0.5) {
            return Err(Error::invalid_config(format!(
                "part_iou must lie in (0, 0.5), got {} (a part box must be a miss at AP50)",
                self.part_iou
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::invalid_config("noise_std must be non-negative"));
        }
        if !self.objectness_gap.is_finite() {
            return Err(Error::invalid_config("objectness_gap must be finite"));
        }
        Ok(())
    }
}

/// One object proposal: a box, a (frozen) objectness logit, and a feature
/// vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub objectness: f64,
    pub features: Vec<f64>,
}

/// An image's proposals plus its image-level labels. Ground-truth boxes are
/// carried for evaluation only and are never read during training.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakImageSample {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    /// Binary label vector of length `n_classes`, at least one positive.
    pub labels: Vec<u8>,
    pub proposals: Vec<Proposal>,
    pub gt: Vec<GroundTruthBox>,
}

fn generate_image(config: &ScenarioConfig, image_id: u64) -> WeakImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ image_id);
    let class = (image_id as usize) / config.images_per_class;
    let size = IMAGE_SIZE as f64;

    // Ground-truth geometry.
    let w = rng.gen_range(0.25 * size..0.45 * size);
    let h = rng.gen_range(0.25 * size..0.45 * size);
    let x1 = rng.gen_range(0.0..size - w);
    let y1 = rng.gen_range(0.0..size - h);
    let gt_box = [x1, y1, x1 + w, y1 + h];

    // A sub-box anchored at the ground-truth corner with side scale
    // sqrt(part_iou) has IoU exactly part_iou with the ground truth.
    let scale = config.part_iou.sqrt();
    let part_box = [x1, y1, x1 + w * scale, y1 + h * scale];

    let noise = Normal::new(0.0, config.noise_std).expect("validated noise_std");
    let features = |rng: &mut ChaCha8Rng, class_scale: f64| -> Vec<f64> {
        let mut f: Vec<f64> = (0..config.feature_dim)
            .map(|_| noise.sample(rng))
            .collect();
        f[class] += class_scale;
        f
    };

    let mut proposals = Vec::with_capacity(config.n_proposals);
    let full_features = features(&mut rng, 1.0);
    proposals.push(Proposal {
        bbox: gt_box,
        objectness: FULL_OBJECTNESS_LOGIT,
        features: full_features,
    });
    let part_features = features(&mut rng, config.part_feature_gain);
    proposals.push(Proposal {
        bbox: part_box,
        objectness: FULL_OBJECTNESS_LOGIT - config.objectness_gap,
        features: part_features,
    });
    for _ in 0..config.n_proposals - 2 {
        // Random boxes rejected until they miss the ground truth at IoU 0.5,
        // so exactly one proposal (the full object) covers it.
        let bbox = loop {
            let bw = rng.gen_range(0.05 * size..0.5 * size);
            let bh = rng.gen_range(0.05 * size..0.5 * size);
            let bx = rng.gen_range(0.0..size - bw);
            let by = rng.gen_range(0.0..size - bh);
            let candidate = [bx, by, bx + bw, by + bh];
            let overlap = crate::evalkit::iou(&candidate, &gt_box).expect("valid boxes");
            if overlap < 0.5 {
                break candidate;
            }
        };
        let objectness = DISTRACTOR_OBJECTNESS_LOGIT + rng.gen_range(-0.5..0.5);
        let distractor_features = features(&mut rng, 0.0);
        proposals.push(Proposal {
            bbox,
            objectness,
            features: distractor_features,
        });
    }
    proposals.shuffle(&mut rng);

    let mut labels = vec![0u8; config.n_classes];
    labels[class] = 1;

    WeakImageSample {
        image_id,
        width: IMAGE_SIZE,
        height: IMAGE_SIZE,
        labels,
        proposals,
        gt: vec![GroundTruthBox {
            bbox: gt_box,
            class_index: class,
        }],
    }
}

/// Generates the scenario and splits it 80/20 into train and test sets,
/// stratified per class, deterministically from the seed.
pub fn generate(config: &ScenarioConfig) -> Result<(Vec<WeakImageSample>, Vec<WeakImageSample>)> {
    config.validate()?;
    let total = config.n_classes * config.images_per_class;
    let samples: Vec<WeakImageSample> = (0..total as u64)
        .into_par_iter()
        .map(|id| generate_image(config, id))
        .collect();

    // Per-class shuffled 80/20 split on image ids.
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train_per_class = ((config.images_per_class * 4) / 5).max(1);
    for class in 0..config.n_classes {
        let mut ids: Vec<usize> = (0..config.images_per_class)
            .map(|k| class * config.images_per_class + k)
            .collect();
        ids.shuffle(&mut split_rng);
        for (rank, &idx) in ids.iter().enumerate() {
            if rank < n_train_per_class {
                train.push(samples[idx].clone());
            } else {
                test.push(samples[idx].clone());
            }
        }
    }
    train.sort_by_key(|s| s.image_id);
    test.sort_by_key(|s| s.image_id);
    Ok((train, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    n_classes: usize,
    feature_dim: usize,
    n_proposals: usize,
    /// Ground-truth boxes in the records are for evaluation only and must
    /// not feed training.
    gt_eval_only: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    image_id: u64,
    width: u32,
    height: u32,
    labels: Vec<u8>,
    proposals: Vec<Proposal>,
    gt: Vec<GtRecord>,
}

/// Writes samples as JSONL: one header line, then one record per image.
/// An empty sample list produces an empty file.
pub fn write_dataset(samples: &[WeakImageSample], path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    if samples.is_empty() {
        return Ok(());
    }
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        n_classes: samples[0].labels.len(),
        feature_dim: samples[0]
            .proposals
            .first()
            .map(|p| p.features.len())
            .unwrap_or(0),
        n_proposals: samples[0].proposals.len(),
        gt_eval_only: true,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).map_err(|e| Error::Internal(e.to_string()))?
    )?;
    for s in samples {
        let record = SampleRecord {
            image_id: s.image_id,
            width: s.width,
            height: s.height,
            labels: s.labels.clone(),
            proposals: s.proposals.clone(),
            gt: s
                .gt
                .iter()
                .map(|g| GtRecord {
                    bbox: g.bbox,
                    class: g.class_index,
                })
                .collect(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).map_err(|e| Error::Internal(e.to_string()))?
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset file back; the value-level inverse of [`write_dataset`].
///
/// Malformed lines raise [`Error::Parse`] with their line number; records
/// that disagree with the header dimensions raise [`Error::Schema`].
pub fn read_dataset(path: &Path) -> Result<Vec<WeakImageSample>> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().expect("non-empty text");
    let header: DatasetHeader = serde_json::from_str(header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad dataset header: {e}"),
    })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::schema(format!(
            "unsupported dataset format_version {}",
            header.format_version
        )));
    }

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.labels.len() != header.n_classes {
            return Err(Error::schema(format!(
                "line {line_no}: labels length {} disagrees with header n_classes {}",
                record.labels.len(),
                header.n_classes
            )));
        }
        if record.proposals.len() != header.n_proposals {
            return Err(Error::schema(format!(
                "line {line_no}: {} proposals disagree with header n_proposals {}",
                record.proposals.len(),
                header.n_proposals
            )));
        }
        if record
            .proposals
            .iter()
            .any(|p| p.features.len() != header.feature_dim)
        {
            return Err(Error::schema(format!(
                "line {line_no}: feature length disagrees with header feature_dim {}",
                header.feature_dim
            )));
        }
        let gt = record
            .gt
            .into_iter()
            .map(|g| {
                GroundTruthBox::new(g.bbox, g.class).map_err(|e| {
                    Error::schema(format!("line {line_no}: {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(WeakImageSample {
            image_id: record.image_id,
            width: record.width,
            height: record.height,
            labels: record.labels,
            proposals: record.proposals,
            gt,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            n_classes: 3,
            images_per_class: 5,
            n_proposals: 8,
            feature_dim: 5,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut c = small_config();
        c.part_iou = 0.5;
        assert!(c.validate().is_err());
        c.part_iou = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.n_proposals = 2;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.feature_dim = 2;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.part_feature_gain = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn degenerate_config_makes_full_and_part_identical_up_to_geometry() {
        let config = ScenarioConfig {
            noise_std: 0.0,
            part_feature_gain: 1.0,
            objectness_gap: 0.0,
            ..small_config()
        };
        let (train, test) = generate(&config).unwrap();
        for s in train.iter().chain(&test) {
            let full = full_proposal(s);
            let part = part_proposal(s, &config);
            assert_eq!(full.features, part.features);
            assert_eq!(full.objectness, part.objectness);
            assert_ne!(full.bbox, part.bbox);
        }
    }

    fn full_proposal<'a>(s: &'a WeakImageSample) -> &'a Proposal {
        s.proposals
            .iter()
            .find(|p| crate::evalkit::iou(&p.bbox, &s.gt[0].bbox).unwrap() >= 0.5)
            .expect("full-object proposal present")
    }

    fn part_proposal<'a>(s: &'a WeakImageSample, config: &ScenarioConfig) -> &'a Proposal {
        s.proposals
            .iter()
            .find(|p| {
                let v = crate::evalkit::iou(&p.bbox, &s.gt[0].bbox).unwrap();
                (v - config.part_iou).abs() < 1e-9
            })
            .expect("part proposal present")
    }

    #[test]
    fn generation_is_deterministic_and_splits_are_stable() {
        let config = small_config();
        let (train_a, test_a) = generate(&config).unwrap();
        let (train_b, test_b) = generate(&config).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);

        let train_ids: std::collections::BTreeSet<u64> =
            train_a.iter().map(|s| s.image_id).collect();
        let test_ids: std::collections::BTreeSet<u64> =
            test_a.iter().map(|s| s.image_id).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        assert_eq!(
            train_ids.len() + test_ids.len(),
            config.n_classes * config.images_per_class
        );
        // 80/20 per class.
        assert_eq!(train_a.len(), config.n_classes * 4);
        assert_eq!(test_a.len(), config.n_classes);
    }

    #[test]
    fn exactly_one_proposal_covers_the_ground_truth() {
        let (train, test) = generate(&small_config()).unwrap();
        for s in train.iter().chain(&test) {
            let covering = s
                .proposals
                .iter()
                .filter(|p| crate::evalkit::iou(&p.bbox, &s.gt[0].bbox).unwrap() >= 0.5)
                .count();
            assert_eq!(covering, 1, "image {}", s.image_id);
        }
    }

    #[test]
    fn objectness_gap_holds_exactly() {
        let config = ScenarioConfig {
            objectness_gap: 3.25,
            ..small_config()
        };
        let (train, test) = generate(&config).unwrap();
        for s in train.iter().chain(&test) {
            let full = full_proposal(s);
            let part = part_proposal(s, &config);
            assert_eq!(full.objectness - part.objectness, 3.25);
        }
    }

    #[test]
    fn adversarial_config_scales_part_class_feature_by_gain() {
        // Noise-free probe of the construction: the part proposal's class
        // prototype component is exactly gain times the full proposal's.
        let config = ScenarioConfig {
            n_classes: 4,
            images_per_class: 3,
            n_proposals: 6,
            feature_dim: 7,
            part_feature_gain: 4.0,
            objectness_gap: 4.0,
            part_iou: 0.2,
            noise_std: 0.0,
            seed: 11,
        };
        let (train, test) = generate(&config).unwrap();
        for s in train.iter().chain(&test) {
            let class = s.labels.iter().position(|&v| v == 1).unwrap();
            let full = full_proposal(s);
            let part = part_proposal(s, &config);
            let dot = |p: &Proposal| p.features[class];
            assert!((dot(part) - config.part_feature_gain * dot(full)).abs() < 1e-12);
            assert!((dot(full) - 1.0).abs() < 1e-12);
            // Distractors carry no class signal.
            for p in &s.proposals {
                if p.bbox != full.bbox && p.bbox != part.bbox {
                    assert_eq!(p.features[class], 0.0);
                }
            }
        }
    }

    #[test]
    fn part_iou_is_exact() {
        let config = small_config();
        let (train, _) = generate(&config).unwrap();
        for s in &train {
            let part = part_proposal(s, &config);
            let v = crate::evalkit::iou(&part.bbox, &s.gt[0].bbox).unwrap();
            assert!((v - config.part_iou).abs() < 1e-9);
        }
    }

    #[test]
    fn roundtrip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let (train, _) = generate(&small_config()).unwrap();
        write_dataset(&train, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(train, back);
    }

    #[test]
    fn empty_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_dataset(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert_eq!(read_dataset(&path).unwrap(), Vec::new());
    }

    #[test]
    fn truncated_final_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        let (train, _) = generate(&small_config()).unwrap();
        write_dataset(&train[..2], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let truncated = &text[..text.len() - 40];
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(truncated.as_bytes()).unwrap();
        drop(f);
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_inconsistency_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let (mut train, _) = generate(&small_config()).unwrap();
        train[1].proposals[0].features.push(0.0);
        write_dataset(&train, &path).unwrap();
        match read_dataset(&path) {
            Err(Error::Schema(msg)) => assert!(msg.contains("feature length")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
