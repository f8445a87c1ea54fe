//! The single-stage network and its training loop.
//!
//! pooled feature → ℓ2-normalize → FC(hidden) + ReLU, then two heads:
//! an actioness scalar (sigmoid) and a per-class block holding the class
//! logit plus the boundary regression outputs.
//!
//! Regression outputs live in standardized units: a network offset `μ`
//! means `μ · offset_scale` proposal lengths, and targets are divided by
//! `offset_scale` before entering the loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ProposalConfig, Target, TrainingSet};
use crate::error::{Error, Result};
use crate::losses::{
    binary_loss, expected_l1_loss, kl_l1_loss, l1_loss, multiclass_loss, sampled_l1_loss,
    select_hard_negatives, ConditionMode, GaussianOffset, OffsetLoss,
};
use crate::net::{l2_normalize_rows, relu, relu_backward, sigmoid, DenseLayer, LayerGrads, Sgd};
use crate::numerics::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UTAL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    L1,
    KlL1,
    #[default]
    SampledL1,
    ExpectedL1,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::L1,
        LossMode::KlL1,
        LossMode::SampledL1,
        LossMode::ExpectedL1,
    ];

    /// Whether the head predicts a variance next to every offset.
    pub fn is_uncertain(self) -> bool {
        self != LossMode::L1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::L1 => "l1",
            LossMode::KlL1 => "kl_l1",
            LossMode::SampledL1 => "sampled_l1",
            LossMode::ExpectedL1 => "expected_l1",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "loss_mode",
                    format!("expected one of l1|kl_l1|sampled_l1|expected_l1, got `{s}`"),
                )
            })
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    /// Positive:negative ratio kept by hard-negative mining.
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub condition_mode: ConditionMode,
    pub weight_bin: f64,
    pub weight_cls: f64,
    pub weight_reg: f64,
    /// Proposal lengths per standardized regression unit.
    pub offset_scale: f64,
    /// Adds one unused column per class so the head is `C × 6`.
    pub pad_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_mode: LossMode::default(),
            lambda: 1.0 / 3.0,
            batch_size: 128,
            lr: 1e-2,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
            hidden: 1000,
            condition_mode: ConditionMode::He,
            weight_bin: 1.0,
            weight_cls: 1.0,
            weight_reg: 1.0,
            offset_scale: 0.1,
            pad_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be ≥ 1"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config(
                "lambda",
                format!("must be > 0, got {}", self.lambda),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be ≥ 1"));
        }
        if !(self.offset_scale > 0.0) {
            return Err(Error::config("offset_scale", "must be > 0"));
        }
        Ok(())
    }
}

/// Shapes and conventions fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_feat: usize,
    pub k: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub uncertain: bool,
    pub pad_head: bool,
    pub offset_scale: f64,
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        self.k * self.d_feat
    }

    /// Regression outputs per class: (μ_s, α_s, μ_e, α_e) or (μ_s, μ_e).
    pub fn reg_width(&self) -> usize {
        if self.uncertain {
            4
        } else {
            2
        }
    }

    pub fn head_width(&self) -> usize {
        let pad = if self.pad_head { 1 } else { 0 };
        self.num_classes * (1 + self.reg_width() + pad)
    }

    fn reg_base(&self, class: usize) -> usize {
        self.num_classes + class * self.reg_width()
    }
}

/// Regression outputs of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryPrediction {
    Point {
        start: f64,
        end: f64,
    },
    Gaussian {
        start: GaussianOffset,
        end: GaussianOffset,
    },
}

impl BoundaryPrediction {
    pub fn means(&self) -> (f64, f64) {
        match *self {
            BoundaryPrediction::Point { start, end } => (start, end),
            BoundaryPrediction::Gaussian { start, end } => (start.mu, end.mu),
        }
    }

    pub fn sigmas(&self) -> Option<(f64, f64)> {
        match *self {
            BoundaryPrediction::Point { .. } => None,
            BoundaryPrediction::Gaussian { start, end } => Some((start.sigma(), end.sigma())),
        }
    }
}

/// Network output for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Actioness in (0, 1).
    pub actioness: f64,
    pub class_logits: Vec<f64>,
    /// Standardized regression outputs per class.
    pub boundaries: Vec<BoundaryPrediction>,
    pub offset_scale: f64,
}

impl HeadOutput {
    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (c, &z) in self.class_logits.iter().enumerate() {
            if z > self.class_logits[best] {
                best = c;
            }
        }
        best
    }

    /// Boundary refinement of `class` in proposal lengths.
    pub fn offsets(&self, class: usize) -> (f64, f64) {
        let (s, e) = self.boundaries[class].means();
        (s * self.offset_scale, e * self.offset_scale)
    }
}

/// Intermediate values of a batch forward pass.
struct Activations {
    normed: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    actioness_logit: Array1<f64>,
    head: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub fc1: LayerGrads,
    pub actioness: LayerGrads,
    pub head: LayerGrads,
}

impl ModelGrads {
    pub fn as_slice(&self) -> [&LayerGrads; 3] {
        [&self.fc1, &self.actioness, &self.head]
    }
}

/// Loss terms of one batch (already weighted sums are in `total`).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub bin: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub num_positives: usize,
    pub num_negatives: usize,
    /// Sum over positives of the mean (start/end) σ of the true class.
    pub sigma_pos_sum: f64,
    /// Sum over mined negatives of the mean σ of the arg-max class.
    pub sigma_neg_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub fc1: DenseLayer,
    pub actioness: DenseLayer,
    pub head: DenseLayer,
}

pub const LAYER_NAMES: [&str; 3] = ["fc1", "actioness", "head"];

impl Model {
    /// Seeded initialization; parameters are rounded to f32 so that the
    /// checkpoint stores them exactly.
    pub fn init(cfg: &TrainConfig, d_feat: usize, num_classes: usize, k: usize) -> Model {
        let spec = ModelSpec {
            d_feat,
            k,
            num_classes,
            hidden: cfg.hidden,
            uncertain: cfg.loss_mode.is_uncertain(),
            pad_head: cfg.pad_head,
            offset_scale: cfg.offset_scale,
        };
        let root = Rng::new(cfg.seed).derive(&[0x1417]);
        let mut model = Model {
            fc1: DenseLayer::init_uniform(spec.input_dim(), spec.hidden, &mut root.derive(&[0])),
            actioness: DenseLayer::init_uniform(spec.hidden, 1, &mut root.derive(&[1])),
            head: DenseLayer::init_uniform(spec.hidden, spec.head_width(), &mut root.derive(&[2])),
            spec,
        };
        model.snap_to_f32();
        model
    }

    pub fn zeros(spec: ModelSpec) -> Model {
        Model {
            fc1: DenseLayer::zeros(spec.input_dim(), spec.hidden),
            actioness: DenseLayer::zeros(spec.hidden, 1),
            head: DenseLayer::zeros(spec.hidden, spec.head_width()),
            spec,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn layers(&self) -> [&DenseLayer; 3] {
        [&self.fc1, &self.actioness, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut DenseLayer; 3] {
        [&mut self.fc1, &mut self.actioness, &mut self.head]
    }

    pub fn snap_to_f32(&mut self) {
        for l in self.layers_mut() {
            l.snap_to_f32();
        }
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Activations {
        assert_eq!(
            x.ncols(),
            self.spec.input_dim(),
            "model expects {}-dim pooled features, got {}",
            self.spec.input_dim(),
            x.ncols()
        );
        let normed = l2_normalize_rows(x);
        let hidden_pre = self.fc1.infer(normed.view());
        let hidden = relu(hidden_pre.view());
        let actioness_logit = self.actioness.infer(hidden.view()).column(0).to_owned();
        let head = self.head.infer(hidden.view());
        Activations {
            normed,
            hidden_pre,
            hidden,
            actioness_logit,
            head,
        }
    }

    fn decode_row(&self, logit: f64, row: ndarray::ArrayView1<f64>) -> HeadOutput {
        let c = self.spec.num_classes;
        let boundaries = (0..c)
            .map(|class| {
                let b = self.spec.reg_base(class);
                if self.spec.uncertain {
                    BoundaryPrediction::Gaussian {
                        start: GaussianOffset::new(row[b], row[b + 1]),
                        end: GaussianOffset::new(row[b + 2], row[b + 3]),
                    }
                } else {
                    BoundaryPrediction::Point {
                        start: row[b],
                        end: row[b + 1],
                    }
                }
            })
            .collect();
        HeadOutput {
            actioness: sigmoid(logit),
            class_logits: row.slice(ndarray::s![..c]).to_vec(),
            boundaries,
            offset_scale: self.spec.offset_scale,
        }
    }

    /// Head outputs for a batch of pooled features (one per row).
    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Vec<HeadOutput> {
        let acts = self.forward_batch(x);
        acts.head
            .rows()
            .into_iter()
            .zip(acts.actioness_logit.iter())
            .map(|(row, &z)| self.decode_row(z, row))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> HeadOutput {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        self.forward_rows(view).pop().expect("one row")
    }

    /// Weighted total loss of a batch and its parameter gradients.
    ///
    /// `targets[i]` is `None` for negatives. `noise` seeds the per-sample ε
    /// streams of the sampled loss (`noise.derive(&[i])`).
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<f64>,
        targets: &[Option<Target>],
        cfg: &TrainConfig,
        noise: &Rng,
    ) -> (BatchLoss, ModelGrads) {
        assert_eq!(x.nrows(), targets.len());
        let spec = &self.spec;
        let c = spec.num_classes;
        let acts = self.forward_batch(x);
        let scores: Vec<f64> = acts.actioness_logit.iter().map(|&z| sigmoid(z)).collect();
        let labels: Vec<bool> = targets.iter().map(Option::is_some).collect();
        let mining = select_hard_negatives(&scores, &labels, cfg.lambda);

        let mut out = BatchLoss {
            num_positives: mining.positives.len(),
            num_negatives: mining.negatives.len(),
            ..BatchLoss::default()
        };
        let b = x.nrows();
        let mut d_logit = Array1::<f64>::zeros(b);
        let mut d_head = Array2::<f64>::zeros((b, spec.head_width()));

        // actioness
        let (l_bin, d_scores) = binary_loss(&scores, &mining);
        out.bin = l_bin;
        for i in 0..b {
            d_logit[i] = cfg.weight_bin * d_scores[i] * scores[i] * (1.0 - scores[i]);
        }

        // classes, positives only
        let class_labels: Vec<usize> = targets
            .iter()
            .map(|t| t.map_or(0, |t| t.class_id))
            .collect();
        let logits = acts.head.slice(ndarray::s![.., ..c]);
        let (l_cls, d_logits) = multiclass_loss(logits, &class_labels, &mining.positives);
        out.cls = l_cls;
        d_head
            .slice_mut(ndarray::s![.., ..c])
            .scaled_add(cfg.weight_cls, &d_logits);

        // boundary regression on the true class row
        let n_pos = mining.positives.len();
        let scale = spec.offset_scale;
        if n_pos > 0 {
            if spec.uncertain {
                let inv = 1.0 / (2.0 * n_pos as f64);
                for &i in &mining.positives {
                    let t = targets[i].expect("positive has target");
                    let base = spec.reg_base(t.class_id);
                    let row = acts.head.row(i);
                    let start = GaussianOffset::new(row[base], row[base + 1]);
                    let end = GaussianOffset::new(row[base + 2], row[base + 3]);
                    let mut rng = noise.derive(&[i as u64]);
                    let mut eval = |p: GaussianOffset, target: f64| -> OffsetLoss {
                        match cfg.loss_mode {
                            LossMode::KlL1 => kl_l1_loss(p, target, cfg.condition_mode),
                            LossMode::ExpectedL1 => expected_l1_loss(p, target),
                            LossMode::SampledL1 => {
                                let s = sampled_l1_loss(p, target, &mut rng);
                                OffsetLoss {
                                    loss: s.loss,
                                    d_mu: s.d_mu,
                                    d_alpha: s.d_alpha,
                                }
                            }
                            LossMode::L1 => unreachable!("l1 uses the point head"),
                        }
                    };
                    let ls = eval(start, t.t_s / scale);
                    let le = eval(end, t.t_e / scale);
                    out.reg += (ls.loss + le.loss) * inv;
                    let w = cfg.weight_reg * inv;
                    d_head[[i, base]] += w * ls.d_mu;
                    d_head[[i, base + 1]] += w * ls.d_alpha;
                    d_head[[i, base + 2]] += w * le.d_mu;
                    d_head[[i, base + 3]] += w * le.d_alpha;
                    out.sigma_pos_sum += 0.5 * (start.sigma() + end.sigma());
                }
            } else {
                let mut y_s = vec![0.0; b];
                let mut y_e = vec![0.0; b];
                let mut t_s = vec![0.0; b];
                let mut t_e = vec![0.0; b];
                for &i in &mining.positives {
                    let t = targets[i].expect("positive has target");
                    let base = spec.reg_base(t.class_id);
                    y_s[i] = acts.head[[i, base]];
                    y_e[i] = acts.head[[i, base + 1]];
                    t_s[i] = t.t_s / scale;
                    t_e[i] = t.t_e / scale;
                }
                // halved so every mode averages over the two boundaries
                let r = l1_loss(&y_s, &y_e, &t_s, &t_e, &mining.positives);
                out.reg = 0.5 * r.loss;
                for &i in &mining.positives {
                    let base = spec.reg_base(targets[i].unwrap().class_id);
                    d_head[[i, base]] += 0.5 * cfg.weight_reg * r.d_start[i];
                    d_head[[i, base + 1]] += 0.5 * cfg.weight_reg * r.d_end[i];
                }
            }
        }
        if spec.uncertain {
            for &i in &mining.negatives {
                let row = acts.head.row(i);
                let logits = row.slice(ndarray::s![..c]);
                let mut best = 0;
                for j in 1..c {
                    if logits[j] > logits[best] {
                        best = j;
                    }
                }
                let base = spec.reg_base(best);
                let s = GaussianOffset::new(row[base], row[base + 1]).sigma();
                let e = GaussianOffset::new(row[base + 2], row[base + 3]).sigma();
                out.sigma_neg_sum += 0.5 * (s + e);
            }
        }
        out.total = cfg.weight_bin * out.bin + cfg.weight_cls * out.cls + cfg.weight_reg * out.reg;

        // backward over the rows that carry gradient
        let mut active: Vec<usize> = mining
            .positives
            .iter()
            .chain(&mining.negatives)
            .copied()
            .collect();
        active.sort_unstable();
        let pick = |m: &Array2<f64>| m.select(Axis(0), &active);
        let hidden_a = pick(&acts.hidden);
        let d_logit_a = d_logit.select(Axis(0), &active).insert_axis(Axis(1));
        let d_head_a = pick(&d_head);
        let g_act = self.actioness.grads_for(hidden_a.view(), d_logit_a.view());
        let g_head = self.head.grads_for(hidden_a.view(), d_head_a.view());
        let mut d_hidden = self.head.input_grad(d_head_a.view());
        d_hidden += &self.actioness.input_grad(d_logit_a.view());
        let d_pre = relu_backward(pick(&acts.hidden_pre).view(), d_hidden.view());
        let g_fc1 = self.fc1.grads_for(pick(&acts.normed).view(), d_pre.view());
        (
            out,
            ModelGrads {
                fc1: g_fc1,
                actioness: g_act,
                head: g_head,
            },
        )
    }
}

/// Per-epoch means of the loss terms and predicted σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub bin: f64,
    pub cls: f64,
    pub reg: f64,
    pub mean_sigma_pos: Option<f64>,
    pub mean_sigma_hardneg: Option<f64>,
}

impl EpochStats {
    pub fn total(&self) -> f64 {
        self.bin + self.cls + self.reg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochStats>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_bin,L_cls,L_reg,mean_sigma_pos,mean_sigma_hardneg\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.bin,
                e.cls,
                e.reg,
                opt(e.mean_sigma_pos),
                opt(e.mean_sigma_hardneg)
            ));
        }
        s
    }
}

/// Mini-batch SGD over a labeled training set.
///
/// Every epoch reshuffles with a seeded stream, mines negatives per batch
/// and takes one optimizer step per batch.
pub fn train(mut model: Model, set: &TrainingSet, cfg: &TrainConfig) -> Result<(Model, LossCurve)> {
    cfg.validate()?;
    if set.num_positives() == 0 {
        return Err(Error::NoPositives {
            pos_thr: set.config.pos_thr,
            neg_thr: set.config.neg_thr,
        });
    }
    if set.features.ncols() != model.spec.input_dim() {
        return Err(Error::ShapeMismatch {
            what: "pooled feature width".into(),
            expected: model.spec.input_dim().to_string(),
            found: set.features.ncols().to_string(),
        });
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let root = Rng::new(cfg.seed).derive(&[0x7EA1]);
    let targets: Vec<Option<Target>> = set.items.iter().map(|p| p.target).collect();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        root.derive(&[epoch as u64, u64::MAX]).shuffle(&mut order);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        let (mut sig_pos, mut n_pos, mut sig_neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = set.features.select(Axis(0), chunk);
            let t: Vec<Option<Target>> = chunk.iter().map(|&i| targets[i]).collect();
            let noise = root.derive(&[epoch as u64, bi as u64]);
            let (loss, grads) = model.loss_and_grads(x.view(), &t, cfg, &noise);
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {bi}"),
                });
            }
            if loss.num_positives == 0 {
                continue;
            }
            sums[0] += loss.bin;
            sums[1] += loss.cls;
            sums[2] += loss.reg;
            batches += 1;
            sig_pos += loss.sigma_pos_sum;
            n_pos += loss.num_positives;
            sig_neg += loss.sigma_neg_sum;
            n_neg += loss.num_negatives;
            let [g1, g2, g3] = [grads.fc1, grads.actioness, grads.head];
            let mut layers = model.layers_mut();
            let [l1, l2, l3] = &mut layers;
            opt.step(&mut [*l1, *l2, *l3], &[g1, g2, g3], &LAYER_NAMES)
                .map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite {
                        context: format!("{context} at epoch {epoch}, batch {bi}"),
                    },
                    other => other,
                })?;
        }
        let nb = batches.max(1) as f64;
        let uncertain = model.spec.uncertain;
        let stats = EpochStats {
            epoch: epoch + 1,
            bin: sums[0] / nb,
            cls: sums[1] / nb,
            reg: sums[2] / nb,
            mean_sigma_pos: (uncertain && n_pos > 0).then(|| sig_pos / n_pos as f64),
            mean_sigma_hardneg: (uncertain && n_neg > 0).then(|| sig_neg / n_neg as f64),
        };
        log::info!(
            "epoch {:>3}: bin {:.4} cls {:.4} reg {:.4}",
            stats.epoch,
            stats.bin,
            stats.cls,
            stats.reg
        );
        curve.epochs.push(stats);
    }
    model.snap_to_f32();
    Ok((model, curve))
}

/// Residual and predicted σ of both boundaries for one positive, in
/// standardized units; σ is `None` for the point head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveStat {
    pub d_start: f64,
    pub sigma_start: Option<f64>,
    pub d_end: f64,
    pub sigma_end: Option<f64>,
}

/// `d = t − μ` and σ on the true class row for every positive in `set`.
pub fn positive_statistics(model: &Model, set: &TrainingSet) -> Vec<PositiveStat> {
    let rows: Vec<usize> = (0..set.len())
        .filter(|&i| set.items[i].is_positive())
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        let x = set.features.select(Axis(0), chunk);
        for (o, &i) in model.forward_rows(x.view()).iter().zip(chunk) {
            let t = set.items[i].target.unwrap();
            let b = o.boundaries[t.class_id];
            let (ms, me) = b.means();
            let scale = model.spec.offset_scale;
            let sig = b.sigmas();
            out.push(PositiveStat {
                d_start: t.t_s / scale - ms,
                sigma_start: sig.map(|s| s.0),
                d_end: t.t_e / scale - me,
                sigma_end: sig.map(|s| s.1),
            });
        }
    }
    out
}

pub fn positive_statistics_csv(stats: &[PositiveStat]) -> String {
    let uncertain = stats.first().is_some_and(|s| s.sigma_start.is_some());
    let mut s = if uncertain {
        String::from("d_start,sigma_start,d_end,sigma_end\n")
    } else {
        String::from("d_start,d_end\n")
    };
    for p in stats {
        match (p.sigma_start, p.sigma_end) {
            (Some(a), Some(b)) => s.push_str(&format!("{},{},{},{}\n", p.d_start, a, p.d_end, b)),
            _ => s.push_str(&format!("{},{}\n", p.d_start, p.d_end)),
        }
    }
    s
}

/// Sidecar describing a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub spec: ModelSpec,
    pub num_classes: usize,
    pub train: TrainConfig,
    pub proposals: ProposalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary weights: magic, layer count, then per layer
/// `out`, `in` (u32 LE) followed by `out·in` weights and `out` biases as
/// f32 LE.
pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut buf = Vec::with_capacity(5 + 4 + model.num_params() * 4 + 24);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&3u32.to_le_bytes());
    for layer in model.layers() {
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        for w in layer.weights.iter() {
            buf.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        for b in layer.biases.iter() {
            buf.extend_from_slice(&(*b as f32).to_le_bytes());
        }
    }
    buf
}

/// Parses [`encode_weights`] output into `[out × in]` layers.
pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<Vec<DenseLayer>> {
    let bad = |r: String| Error::format(path, r);
    if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("missing UTAL1 magic".into()));
    }
    let mut pos = 5;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let s = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| bad("truncated header".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    let n = read_u32(&mut pos)? as usize;
    let mut layers = Vec::with_capacity(n);
    for li in 0..n {
        let out = read_u32(&mut pos)? as usize;
        let inp = read_u32(&mut pos)? as usize;
        let count = out * inp + out;
        let payload = bytes
            .get(pos..pos + count * 4)
            .ok_or_else(|| bad(format!("layer {li} payload truncated")))?;
        pos += count * 4;
        let vals: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let weights =
            Array2::from_shape_vec((out, inp), vals[..out * inp].to_vec()).expect("sized above");
        let biases = Array1::from(vals[out * inp..].to_vec());
        layers.push(DenseLayer::from_parts(weights, biases));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(layers)
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_weights(model))
        .map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let layers = decode_weights(&bytes, path)?;
    let spec = meta.spec.clone();
    let expected = [
        (spec.hidden, spec.input_dim()),
        (1, spec.hidden),
        (spec.head_width(), spec.hidden),
    ];
    if layers.len() != 3 {
        return Err(Error::format(
            path,
            format!("expected 3 layers, found {}", layers.len()),
        ));
    }
    for (i, (l, &(o, n))) in layers.iter().zip(&expected).enumerate() {
        if l.out_dim() != o || l.in_dim() != n {
            return Err(Error::ShapeMismatch {
                what: format!("checkpoint layer `{}`", LAYER_NAMES[i]),
                expected: format!("{o}×{n}"),
                found: format!("{}×{}", l.out_dim(), l.in_dim()),
            });
        }
    }
    let mut it = layers.into_iter();
    let model = Model {
        spec,
        fc1: it.next().unwrap(),
        actioness: it.next().unwrap(),
        head: it.next().unwrap(),
    };
    Ok((model, meta))
}
