//! Inference and evaluation: cascaded refinement, score fusion, greedy NMS
//! and mAP over tIoU thresholds.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pool_k_parts, sliding_windows, tiou, Dataset, Proposal, ProposalConfig, Video};
use crate::model::{BoundaryPrediction, HeadOutput, Model};
use crate::net::softmax;

pub use crate::data::apply_offsets;

/// Anything that maps proposals of a video to head outputs.
pub trait ProposalHead: Sync {
    fn predict(&self, video: &Video, proposals: &[Proposal]) -> Vec<HeadOutput>;
}

impl ProposalHead for Model {
    fn predict(&self, video: &Video, proposals: &[Proposal]) -> Vec<HeadOutput> {
        if proposals.is_empty() {
            return Vec::new();
        }
        let k = self.spec.k;
        let dim = self.spec.input_dim();
        let mut x = ndarray::Array2::<f64>::zeros((proposals.len(), dim));
        for (mut row, p) in x.rows_mut().into_iter().zip(proposals) {
            let pooled = pool_k_parts(&video.sequence, p, k);
            row.assign(&ndarray::ArrayView1::from(&pooled[..]));
        }
        self.forward_rows(x.view())
    }
}

/// Reference detector that reads the ground truth: full actioness and a
/// one-hot class for any proposal overlapping an annotation, with offsets
/// that land exactly on the best-overlapping annotation.
#[derive(Debug, Clone)]
pub struct OracleHead {
    pub num_classes: usize,
}

impl ProposalHead for OracleHead {
    fn predict(&self, video: &Video, proposals: &[Proposal]) -> Vec<HeadOutput> {
        proposals
            .iter()
            .map(|p| {
                let best = video
                    .annotations
                    .iter()
                    .map(|a| tiou(p.interval(), a.interval()))
                    .enumerate()
                    .filter(|&(_, o)| o > 0.0)
                    .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
                        Some((_, bo)) if bo >= o => acc,
                        _ => Some((i, o)),
                    });
                let mut logits = vec![0.0; self.num_classes];
                let mut boundaries = vec![
                    BoundaryPrediction::Point {
                        start: 0.0,
                        end: 0.0
                    };
                    self.num_classes
                ];
                let actioness = match best {
                    Some((i, _)) => {
                        let a = &video.annotations[i];
                        logits[a.class_id] = 50.0;
                        boundaries[a.class_id] = BoundaryPrediction::Point {
                            start: (a.start - p.start) / p.len(),
                            end: (a.end - p.end) / p.len(),
                        };
                        1.0
                    }
                    None => 0.0,
                };
                HeadOutput {
                    actioness,
                    class_logits: logits,
                    boundaries,
                    offset_scale: 1.0,
                }
            })
            .collect()
    }
}

/// Feeds refined windows back through the same head `steps` times, using
/// the offsets of the arg-max class. Returns each final window with the head
/// output that produced its last refinement. A window whose head emits
/// non-finite offsets stops refining.
pub fn refine_cascade_batch(
    head: &dyn ProposalHead,
    video: &Video,
    proposals: &[Proposal],
    steps: usize,
) -> Vec<(Proposal, HeadOutput)> {
    assert!(steps >= 1, "cascade needs at least one step");
    let limit = video.num_units() as f64;
    let mut current: Vec<Proposal> = proposals.to_vec();
    let mut outputs: Vec<Option<HeadOutput>> = vec![None; current.len()];
    let mut active: Vec<usize> = (0..current.len()).collect();
    for _ in 0..steps {
        let props: Vec<Proposal> = active.iter().map(|&i| current[i]).collect();
        let fresh = head.predict(video, &props);
        let mut still = Vec::with_capacity(active.len());
        for (i, out) in active.into_iter().zip(fresh) {
            let (ys, ye) = out.offsets(out.argmax_class());
            if ys.is_finite() && ye.is_finite() {
                current[i] = apply_offsets(&current[i], ys, ye, limit);
                still.push(i);
            }
            outputs[i] = Some(out);
        }
        active = still;
    }
    current
        .into_iter()
        .zip(outputs)
        .map(|(p, o)| (p, o.expect("every window was predicted once")))
        .collect()
}

pub fn refine_cascade(
    head: &dyn ProposalHead,
    video: &Video,
    proposal: Proposal,
    steps: usize,
) -> (Proposal, HeadOutput) {
    refine_cascade_batch(head, video, &[proposal], steps)
        .pop()
        .expect("one proposal in, one out")
}

/// `score_c = y_a · softmax(logits)_c`.
pub fn fuse_scores(out: &HeadOutput) -> Vec<f64> {
    softmax(&out.class_logits)
        .into_iter()
        .map(|p| out.actioness * p)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Score descending, then video id and start ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then_with(|| a.start.total_cmp(&b.start))
}

/// Greedy suppression; output is in kept (score) order.
pub fn nms(dets: &[Detection], tiou_thr: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|k| tiou(k.interval(), d.interval()) < tiou_thr)
        {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
}

/// All-point interpolated AP of one class; `None` without ground truth.
///
/// Each detection, in score order, takes the unmatched ground truth of its
/// video with the highest tIoU, if that tIoU is at least `tiou_thr`.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], tiou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(sorted.len());
    let mut is_tp = Vec::with_capacity(sorted.len());
    for (rank, d) in sorted.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.video_id != d.video_id {
                continue;
            }
            let o = tiou(d.interval(), (gt.start, gt.end));
            if o >= tiou_thr && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
        is_tp.push(best.is_some());
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let step = 1.0 / gts.len() as f64;
    Some(
        precision
            .iter()
            .zip(&is_tp)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p * step)
            .sum(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub cascade_steps: usize,
    pub nms_thr: f64,
    pub score_floor: f64,
    pub tiou_thresholds: Vec<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            cascade_steps: 2,
            nms_thr: 0.5,
            score_floor: 0.01,
            tiou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.cascade_steps == 0 {
            return Err(Error::config("cascade_steps", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.nms_thr) {
            return Err(Error::config("nms_thr", "must be in [0, 1]"));
        }
        if self.tiou_thresholds.is_empty()
            || self
                .tiou_thresholds
                .iter()
                .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::config("tiou_thresholds", "need values in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// mAP keyed by the threshold printed with one decimal ("0.5").
    pub tiou: BTreeMap<String, f64>,
    pub thresholds: Vec<f64>,
    /// `per_class[t][c]`: AP of class `c` at threshold `t`; `None` when the
    /// class has no ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    pub empty_detections: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.tiou.get(&threshold_key(thr)).copied()
    }

    /// mAP values in threshold order.
    pub fn map_values(&self) -> Vec<f64> {
        self.thresholds
            .iter()
            .map(|&t| self.map_at(t).unwrap_or(0.0))
            .collect()
    }

    /// Percentages at one decimal, space separated.
    pub fn table_row(&self) -> String {
        self.map_values()
            .iter()
            .map(|m| format!("{:.1}", 100.0 * m))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn threshold_key(thr: f64) -> String {
    format!("{thr:.1}")
}

/// Detections of one video after cascade, fusion, flooring and NMS.
pub fn detect_video(
    head: &dyn ProposalHead,
    video: &Video,
    num_classes: usize,
    proposals: &ProposalConfig,
    cfg: &DetectConfig,
) -> Vec<Detection> {
    let windows = sliding_windows(video.num_units(), &proposals.scales, proposals.overlap);
    let refined = refine_cascade_batch(head, video, &windows, cfg.cascade_steps);
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); num_classes];
    for (p, out) in &refined {
        for (c, s) in fuse_scores(out).into_iter().enumerate() {
            if s >= cfg.score_floor && s.is_finite() && !p.is_empty() {
                per_class[c].push(Detection {
                    video_id: video.id().to_string(),
                    start: p.start,
                    end: p.end,
                    class_id: c,
                    score: s,
                });
            }
        }
    }
    per_class
        .into_iter()
        .flat_map(|d| nms(&d, cfg.nms_thr))
        .collect()
}

/// Detections for every video of `dataset`, sorted by [`detection_order`].
pub fn detect_all(
    head: &dyn ProposalHead,
    dataset: &Dataset,
    proposals: &ProposalConfig,
    cfg: &DetectConfig,
) -> Vec<Detection> {
    let mut dets: Vec<Detection> = dataset
        .videos
        .par_iter()
        .map(|v| detect_video(head, v, dataset.num_classes, proposals, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    dets.sort_by(|a, b| detection_order(a, b).then(a.class_id.cmp(&b.class_id)));
    dets
}

/// AP per class and threshold for a fixed detection list.
pub fn score_detections(dets: &[Detection], dataset: &Dataset, thresholds: &[f64]) -> EvalReport {
    let c = dataset.num_classes;
    let mut gts: Vec<Vec<GroundTruth>> = vec![Vec::new(); c];
    for v in &dataset.videos {
        for a in &v.annotations {
            gts[a.class_id].push(GroundTruth {
                video_id: v.id().to_string(),
                start: a.start,
                end: a.end,
            });
        }
    }
    let mut by_class: Vec<Vec<Detection>> = vec![Vec::new(); c];
    for d in dets {
        by_class[d.class_id].push(d.clone());
    }
    let mut tiou_map = BTreeMap::new();
    let mut per_class = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let aps: Vec<Option<f64>> = (0..c)
            .map(|k| average_precision(&by_class[k], &gts[k], thr))
            .collect();
        let present: Vec<f64> = aps.iter().flatten().copied().collect();
        let map = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        tiou_map.insert(threshold_key(thr), map);
        per_class.push(aps);
    }
    EvalReport {
        tiou: tiou_map,
        thresholds: thresholds.to_vec(),
        per_class,
        num_detections: dets.len(),
        num_ground_truth: gts.iter().map(Vec::len).sum(),
        empty_detections: dets.is_empty(),
        config: None,
    }
}

/// Full pipeline over every video of `dataset`.
pub fn evaluate(
    head: &dyn ProposalHead,
    dataset: &Dataset,
    proposals: &ProposalConfig,
    cfg: &DetectConfig,
) -> (EvalReport, Vec<Detection>) {
    let dets = detect_all(head, dataset, proposals, cfg);
    let report = score_detections(&dets, dataset, &cfg.tiou_thresholds);
    if report.empty_detections {
        log::warn!("no detections above score floor {}", cfg.score_floor);
    }
    (report, dets)
}

pub fn detections_csv(dets: &[Detection]) -> String {
    let mut s = String::from("video_id,class_id,start,end,score\n");
    for d in dets {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            d.video_id, d.class_id, d.start, d.end, d.score
        );
    }
    s
}
