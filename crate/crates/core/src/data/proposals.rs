use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ActionAnnotation, Dataset, Proposal, Subset, UnitFeatureSequence};
use crate::error::{Error, Result};

/// Temporal IoU of two intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Multi-scale sliding windows over `[0, num_units]`, sorted by
/// `(start, scale_id)`.
pub fn sliding_windows(num_units: usize, scales: &[usize], overlap: f64) -> Vec<Proposal> {
    assert!((0.0..1.0).contains(&overlap), "overlap must be in [0, 1)");
    let t = num_units as f64;
    let mut out = Vec::new();
    for (scale_id, &scale) in scales.iter().enumerate() {
        assert!(scale >= 1, "window scale must be ≥ 1");
        let len = scale as f64;
        if len >= t {
            out.push(Proposal::new(0.0, t, scale_id));
            continue;
        }
        let stride = len * (1.0 - overlap);
        let mut last_end = 0.0;
        let mut i = 0usize;
        loop {
            let s = i as f64 * stride;
            if s + len > t + 1e-9 {
                break;
            }
            out.push(Proposal::new(s, s + len, scale_id));
            last_end = s + len;
            i += 1;
        }
        if last_end < t - 1e-9 {
            out.push(Proposal::new(t - len, t, scale_id));
        }
    }
    out.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.scale_id.cmp(&b.scale_id))
    });
    out
}

/// Boundary offsets of `gt` relative to `prop`, in units of proposal length.
pub fn compute_offsets(prop: &Proposal, gt: &ActionAnnotation) -> (f64, f64) {
    let len = prop.len();
    debug_assert!(len > 0.0);
    ((gt.start - prop.start) / len, (gt.end - prop.end) / len)
}

/// Inverse of [`compute_offsets`], clamped to `[0, limit]`. A window that
/// collapses is replaced by a 1-unit window at its midpoint.
pub fn apply_offsets(prop: &Proposal, y_s: f64, y_e: f64, limit: f64) -> Proposal {
    let len = prop.len();
    let mut start = (prop.start + y_s * len).clamp(0.0, limit);
    let mut end = (prop.end + y_e * len).clamp(0.0, limit);
    if !(start < end) {
        let mid = 0.5 * (start + end);
        let half = 0.5f64.min(0.5 * limit);
        start = (mid - half).max(0.0);
        end = start + 2.0 * half;
        if end > limit {
            end = limit;
            start = limit - 2.0 * half;
        }
    }
    Proposal::new(start, end, prop.scale_id)
}

/// Regression target of a positive proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class_id: usize,
    pub t_s: f64,
    pub t_e: f64,
    pub annotation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalLabel {
    pub proposal: Proposal,
    /// `None` for negatives.
    pub target: Option<Target>,
}

/// Positive iff best tIoU ≥ `pos_thr` (earliest annotation wins ties),
/// negative iff best tIoU < `neg_thr`; the rest are dropped.
pub fn label_proposals(
    proposals: &[Proposal],
    annotations: &[ActionAnnotation],
    pos_thr: f64,
    neg_thr: f64,
) -> Vec<ProposalLabel> {
    assert!(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0);
    let mut out = Vec::new();
    for p in proposals {
        let mut best = 0.0;
        let mut best_idx = None;
        for (j, a) in annotations.iter().enumerate() {
            let iou = tiou(p.interval(), a.interval());
            if iou > best {
                best = iou;
                best_idx = Some(j);
            }
        }
        match best_idx {
            Some(j) if best >= pos_thr => {
                let (t_s, t_e) = compute_offsets(p, &annotations[j]);
                out.push(ProposalLabel {
                    proposal: *p,
                    target: Some(Target {
                        class_id: annotations[j].class_id,
                        t_s,
                        t_e,
                        annotation: j,
                    }),
                });
            }
            _ if best < neg_thr => out.push(ProposalLabel {
                proposal: *p,
                target: None,
            }),
            _ => {}
        }
    }
    out
}

/// Splits the proposal into `k` equal parts and averages each part's units
/// weighted by overlap length. Parts narrower than one unit take the unit
/// under their midpoint.
pub fn pool_k_parts(seq: &UnitFeatureSequence, prop: &Proposal, k: usize) -> Vec<f64> {
    assert!(k >= 1);
    let t = seq.num_units();
    let d = seq.d_feat();
    let tf = t as f64;
    let mut out = vec![0.0; k * d];
    let len = prop.len();
    for part in 0..k {
        let a = (prop.start + len * part as f64 / k as f64).clamp(0.0, tf);
        let b = (prop.start + len * (part + 1) as f64 / k as f64).clamp(0.0, tf);
        let dst = &mut out[part * d..(part + 1) * d];
        if b - a < 1.0 {
            let u = ((0.5 * (a + b)).floor() as usize).min(t - 1);
            for (o, &v) in dst.iter_mut().zip(seq.features.row(u)) {
                *o = v as f64;
            }
            continue;
        }
        let first = a.floor() as usize;
        let last = (b.ceil() as usize).min(t);
        let mut total = 0.0;
        for u in first..last {
            let w = b.min(u as f64 + 1.0) - a.max(u as f64);
            if w <= 0.0 {
                continue;
            }
            total += w;
            for (o, &v) in dst.iter_mut().zip(seq.features.row(u)) {
                *o += w * v as f64;
            }
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Proposal generation and assignment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub scales: Vec<usize>,
    pub overlap: f64,
    pub pos_thr: f64,
    pub neg_thr: f64,
    pub k: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            scales: vec![8, 16, 32, 64],
            overlap: 0.75,
            pos_thr: 0.5,
            neg_thr: 0.3,
            k: 4,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::config("scales", "need at least one positive scale"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config(
                "overlap",
                format!("must be in [0, 1), got {}", self.overlap),
            ));
        }
        if !(0.0 <= self.neg_thr && self.neg_thr <= self.pos_thr && self.pos_thr <= 1.0) {
            return Err(Error::config(
                "pos_thr",
                format!(
                    "need 0 ≤ neg_thr ≤ pos_thr ≤ 1, got {} and {}",
                    self.neg_thr, self.pos_thr
                ),
            ));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// Pooled feature with supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProposal {
    pub video: usize,
    pub proposal: Proposal,
    pub target: Option<Target>,
}

impl LabeledProposal {
    pub fn is_positive(&self) -> bool {
        self.target.is_some()
    }
}

/// Labeled proposals of a subset with their pooled features stacked row-wise.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<LabeledProposal>,
    pub features: Array2<f64>,
    pub config: ProposalConfig,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.items.iter().filter(|p| p.is_positive()).count()
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> TrainingSet {
        TrainingSet {
            items: rows.iter().map(|&i| self.items[i].clone()).collect(),
            features: self.features.select(ndarray::Axis(0), rows),
            config: self.config.clone(),
        }
    }
}

/// Windows, labels and pooled features for every video in `subset`, ordered
/// by video then `(start, scale)`.
pub fn build_training_set(dataset: &Dataset, subset: Subset, cfg: &ProposalConfig) -> TrainingSet {
    use rayon::prelude::*;

    let per_video: Vec<Vec<(LabeledProposal, Vec<f64>)>> = dataset
        .videos
        .par_iter()
        .enumerate()
        .filter(|(_, v)| v.subset == subset)
        .map(|(vi, v)| {
            let windows = sliding_windows(v.num_units(), &cfg.scales, cfg.overlap);
            label_proposals(&windows, &v.annotations, cfg.pos_thr, cfg.neg_thr)
                .into_iter()
                .map(|l| {
                    let x = pool_k_parts(&v.sequence, &l.proposal, cfg.k);
                    (
                        LabeledProposal {
                            video: vi,
                            proposal: l.proposal,
                            target: l.target,
                        },
                        x,
                    )
                })
                .collect()
        })
        .collect();
    let n: usize = per_video.iter().map(Vec::len).sum();
    let width = cfg.k * dataset.d_feat;
    let mut features = Array2::zeros((n, width));
    let mut items = Vec::with_capacity(n);
    for (row, (item, x)) in per_video.into_iter().flatten().enumerate() {
        features
            .row_mut(row)
            .assign(&ndarray::ArrayView1::from(&x[..]));
        items.push(item);
    }
    TrainingSet {
        items,
        features,
        config: cfg.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(rows: Array2<f32>) -> UnitFeatureSequence {
        UnitFeatureSequence {
            video_id: "v".into(),
            features: rows,
        }
    }

    fn ann(start: f64, end: f64) -> ActionAnnotation {
        ActionAnnotation {
            class_id: 0,
            start,
            end,
        }
    }

    #[test]
    fn windows_examples() {
        let w = sliding_windows(32, &[16], 0.5);
        let iv: Vec<_> = w.iter().map(|p| p.interval()).collect();
        assert_eq!(iv, vec![(0.0, 16.0), (8.0, 24.0), (16.0, 32.0)]);

        let w = sliding_windows(8, &[16], 0.5);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].interval(), (0.0, 8.0));
    }

    #[test]
    fn windows_without_overlap_tile() {
        let w = sliding_windows(40, &[8], 0.0);
        assert_eq!(w.len(), 5);
        for pair in w.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        assert_eq!(w.last().unwrap().end, 40.0);
    }

    #[test]
    fn windows_cover_tail() {
        let w = sliding_windows(37, &[16], 0.5);
        assert_eq!(w.last().unwrap().interval(), (21.0, 37.0));
        for u in 0..37 {
            let c = u as f64 + 0.5;
            assert!(w.iter().any(|p| p.start <= c && c <= p.end), "unit {u}");
        }
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou((2.0, 7.0), (2.0, 7.0)), 1.0);
        assert_eq!(tiou((0.0, 2.0), (3.0, 7.0)), 0.0);
        assert!((tiou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn offsets_examples() {
        let p = Proposal::new(10.0, 20.0, 0);
        let (s, e) = compute_offsets(&p, &ann(12.0, 22.0));
        assert!((s - 0.2).abs() < 1e-15 && (e - 0.2).abs() < 1e-15);
        assert_eq!(compute_offsets(&p, &ann(10.0, 20.0)), (0.0, 0.0));
        let back = apply_offsets(&p, s, e, 100.0);
        assert_eq!(back.interval(), (12.0, 22.0));
        assert_eq!(apply_offsets(&p, 0.0, 0.0, 100.0), p);
    }

    #[test]
    fn apply_offsets_collapse_and_clamp() {
        let p = Proposal::new(10.0, 20.0, 1);
        let q = apply_offsets(&p, 0.8, -0.8, 100.0);
        assert_eq!(q.interval(), (14.5, 15.5));
        let q = apply_offsets(&p, -5.0, 5.0, 40.0);
        assert_eq!(q.interval(), (0.0, 40.0));
        let q = apply_offsets(&p, 10.0, 10.0, 40.0);
        assert_eq!(q.interval(), (39.0, 40.0));
    }

    #[test]
    fn labeling_examples() {
        let anns = [ann(10.0, 20.0), ann(50.0, 60.0)];
        let props = [
            Proposal::new(10.0, 20.0, 0),
            Proposal::new(30.0, 40.0, 0),
            // tIoU 0.6 with the first annotation
            Proposal::new(14.0, 20.0, 0),
            // tIoU 3/7, between the thresholds: dropped
            Proposal::new(14.0, 24.0, 0),
        ];
        let labels = label_proposals(&props, &anns, 0.5, 0.3);
        assert_eq!(labels.len(), 3);
        let t = labels[0].target.unwrap();
        assert_eq!((t.t_s, t.t_e), (0.0, 0.0));
        assert!(labels[1].target.is_none());
        let t = labels[2].target.unwrap();
        assert!((tiou((14.0, 20.0), (10.0, 20.0)) - 0.6).abs() < 1e-12);
        assert!((t.t_s - (-4.0 / 6.0)).abs() < 1e-15);
        assert_eq!(t.t_e, 0.0);
        assert_eq!(t.annotation, 0);
    }

    #[test]
    fn labeling_ties_go_to_earlier_annotation() {
        let anns = [ann(0.0, 10.0), ann(10.0, 20.0)];
        let labels = label_proposals(&[Proposal::new(5.0, 15.0, 0)], &anns, 0.3, 0.1);
        assert_eq!(labels[0].target.unwrap().annotation, 0);
    }

    #[test]
    fn pooling_examples() {
        let s = seq(Array2::from_elem((10, 3), 2.5));
        for v in pool_k_parts(&s, &Proposal::new(1.3, 7.9, 0), 4) {
            assert!((v - 2.5).abs() < 1e-14);
        }

        let s = seq(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(
            pool_k_parts(&s, &Proposal::new(1.0, 3.0, 0), 2),
            vec![3.0, 4.0, 5.0, 6.0]
        );
        assert_eq!(
            pool_k_parts(&s, &Proposal::new(0.0, 4.0, 0), 1),
            vec![4.0, 5.0]
        );
        // [0.5, 2.0): half of unit 0, all of unit 1
        let p = pool_k_parts(&s, &Proposal::new(0.5, 2.0, 0), 1);
        assert!((p[0] - (0.5 * 1.0 + 3.0) / 1.5).abs() < 1e-12);
        // sub-unit parts use the unit under the part midpoint
        let p = pool_k_parts(&s, &Proposal::new(2.0, 3.0, 0), 2);
        assert_eq!(p, vec![5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn pooling_ignores_units_outside_span() {
        let mut a = Array2::from_shape_fn((12, 2), |(i, j)| (i * 2 + j) as f32);
        let p = Proposal::new(3.25, 8.5, 0);
        let before = pool_k_parts(&seq(a.clone()), &p, 3);
        for u in (0..3).chain(9..12) {
            a.row_mut(u).fill(-100.0);
        }
        assert_eq!(before, pool_k_parts(&seq(a), &p, 3));
    }
}
