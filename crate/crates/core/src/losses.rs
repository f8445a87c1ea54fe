//! Training objectives with analytic gradients with respect to network
//! outputs: actioness BCE with hard-negative mining, class cross-entropy,
//! ℓ1 regression and the three uncertainty-aware boundary losses.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::softmax;
use crate::numerics::{
    erf, sample_std_normal, std_normal_pdf, std_normal_sf, Rng, SQRT_2, SQRT_2_OVER_PI,
};

pub const ALPHA_MIN: f64 = -10.0;
pub const ALPHA_MAX: f64 = 10.0;
/// Probabilities are clamped to [P_EPS, 1 − P_EPS] before taking logs.
pub const P_EPS: f64 = 1e-7;

/// Predicted Gaussian over one boundary offset, parameterized by mean and
/// log-variance `alpha = log σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianOffset {
    pub mu: f64,
    pub alpha: f64,
}

impl GaussianOffset {
    pub fn new(mu: f64, alpha: f64) -> Self {
        GaussianOffset { mu, alpha }
    }

    /// Log-variance after clamping.
    pub fn clamped_alpha(&self) -> f64 {
        self.alpha.clamp(ALPHA_MIN, ALPHA_MAX)
    }

    /// Clamping zeroes the gradient outside the admissible range.
    fn alpha_gate(&self) -> f64 {
        if (ALPHA_MIN..=ALPHA_MAX).contains(&self.alpha) {
            1.0
        } else {
            0.0
        }
    }

    pub fn variance(&self) -> f64 {
        self.clamped_alpha().exp()
    }

    pub fn sigma(&self) -> f64 {
        (0.5 * self.clamped_alpha()).exp()
    }
}

/// Which branch of the KL-ℓ1 loss applies where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// Gaussian NLL for |d| ≤ 1, linear branch for |d| > 1 (smooth-ℓ1 layout).
    #[default]
    He,
    /// The swapped assignment: Gaussian NLL for |d| > 1, linear for |d| ≤ 1.
    Paper,
}

impl std::str::FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(ConditionMode::He),
            "paper" | "paper-literal" => Ok(ConditionMode::Paper),
            other => Err(Error::config(
                "condition_mode",
                format!("expected `he` or `paper`, got `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConditionMode::He => "he",
            ConditionMode::Paper => "paper",
        })
    }
}

/// Loss value with gradients w.r.t. the mean and the raw log-variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetLoss {
    pub loss: f64,
    pub d_mu: f64,
    pub d_alpha: f64,
}

/// Subgradient sign with sign(0) = 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MiningResult {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl MiningResult {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

/// Keeps all positives plus the ⌊|I_p|/λ⌋ highest-scoring negatives. Ties in
/// score go to the lower index. A batch without positives mines nothing.
pub fn select_hard_negatives(scores: &[f64], labels: &[bool], lambda: f64) -> MiningResult {
    assert_eq!(scores.len(), labels.len());
    assert!(lambda > 0.0, "mining ratio must be positive");
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return MiningResult::default();
    }
    let mut negatives: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    // 1e-9 absorbs the rounding of 1/λ for rational ratios such as 1/3
    let wanted = (positives.len() as f64 / lambda + 1e-9).floor() as usize;
    let keep = wanted.min(negatives.len());
    negatives.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    negatives.truncate(keep);
    negatives.sort_unstable();
    MiningResult {
        positives,
        negatives,
    }
}

/// Balanced binary cross-entropy over the mined indices. Gradient is w.r.t.
/// the scores (post-sigmoid) and zero off the mined set.
pub fn binary_loss(scores: &[f64], mining: &MiningResult) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; scores.len()];
    let n = mining.len();
    if mining.positives.is_empty() || n == 0 {
        return (0.0, grad);
    }
    let n = n as f64;
    let mut loss = 0.0;
    for &i in &mining.positives {
        let y = scores[i].clamp(P_EPS, 1.0 - P_EPS);
        loss -= y.ln();
        if scores[i] == y {
            grad[i] = -1.0 / (y * n);
        }
    }
    for &i in &mining.negatives {
        let y = scores[i].clamp(P_EPS, 1.0 - P_EPS);
        loss -= (1.0 - y).ln();
        if scores[i] == y {
            grad[i] = 1.0 / ((1.0 - y) * n);
        }
    }
    (loss / n, grad)
}

/// Softmax cross-entropy averaged over the positives.
///
/// `labels[i]` must be a valid class for every `i` in `positives`; other rows
/// are ignored and receive zero gradient.
pub fn multiclass_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    positives: &[usize],
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    if positives.is_empty() {
        return (0.0, grad);
    }
    let n = positives.len() as f64;
    let mut loss = 0.0;
    for &i in positives {
        let row = logits.row(i).to_vec();
        let c = labels[i];
        assert!(c < row.len(), "class label {c} out of range");
        let p = softmax(&row);
        loss -= p[c].max(f64::MIN_POSITIVE).ln();
        for (j, &pj) in p.iter().enumerate() {
            let target = if j == c { 1.0 } else { 0.0 };
            grad[[i, j]] = (pj - target) / n;
        }
    }
    (loss / n, grad)
}

/// Output of [`l1_loss`]: loss and gradients w.r.t. predicted start/end.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Grads {
    pub loss: f64,
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

/// Mean over positives of |t_s − y_s| + |t_e − y_e|.
pub fn l1_loss(y_s: &[f64], y_e: &[f64], t_s: &[f64], t_e: &[f64], positives: &[usize]) -> L1Grads {
    let mut out = L1Grads {
        loss: 0.0,
        d_start: vec![0.0; y_s.len()],
        d_end: vec![0.0; y_e.len()],
    };
    if positives.is_empty() {
        return out;
    }
    let n = positives.len() as f64;
    for &i in positives {
        let ds = t_s[i] - y_s[i];
        let de = t_e[i] - y_e[i];
        out.loss += ds.abs() + de.abs();
        out.d_start[i] = -sign(ds) / n;
        out.d_end[i] = -sign(de) / n;
    }
    out.loss /= n;
    out
}

/// KL-ℓ1 loss of a Dirac target `t` against `N(μ, σ²)`.
///
/// Gaussian branch: `d²/(2σ²) + α/2 + ½log(2π)`; linear branch:
/// `(|d| − ½)/σ² + α/2`, with `d = t − μ`. `mode` picks which branch covers
/// |d| ≤ 1.
pub fn kl_l1_loss(pred: GaussianOffset, t: f64, mode: ConditionMode) -> OffsetLoss {
    let alpha = pred.clamped_alpha();
    let inv_var = (-alpha).exp();
    let d = t - pred.mu;
    let inside = d.abs() <= 1.0;
    let gaussian = match mode {
        ConditionMode::He => inside,
        ConditionMode::Paper => !inside,
    };
    let gate = pred.alpha_gate();
    if gaussian {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        OffsetLoss {
            loss: 0.5 * d * d * inv_var + 0.5 * alpha + half_log_2pi,
            d_mu: -d * inv_var,
            d_alpha: gate * (-0.5 * d * d * inv_var + 0.5),
        }
    } else {
        let excess = d.abs() - 0.5;
        OffsetLoss {
            loss: excess * inv_var + 0.5 * alpha,
            d_mu: -sign(d) * inv_var,
            d_alpha: gate * (-excess * inv_var + 0.5),
        }
    }
}

/// [`OffsetLoss`] plus the noise draw that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledLoss {
    pub loss: f64,
    pub d_mu: f64,
    pub d_alpha: f64,
    pub epsilon: f64,
}

/// ℓ1 loss of one reparameterized sample `μ + σε`, with a fixed ε.
pub fn sampled_l1_with_epsilon(pred: GaussianOffset, t: f64, epsilon: f64) -> SampledLoss {
    let sigma = pred.sigma();
    let d = t - pred.mu;
    let r = d - sigma * epsilon;
    let s = sign(r);
    SampledLoss {
        loss: r.abs(),
        d_mu: -s,
        d_alpha: pred.alpha_gate() * (-0.5 * sigma * epsilon * s),
        epsilon,
    }
}

/// ℓ1 loss of one reparameterized sample, ε drawn from `rng`.
pub fn sampled_l1_loss(pred: GaussianOffset, t: f64, rng: &mut Rng) -> SampledLoss {
    let eps = sample_std_normal(rng);
    sampled_l1_with_epsilon(pred, t, eps)
}

/// Closed-form E|d − σε| with its partials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedL1 {
    pub value: f64,
    pub d_d: f64,
    pub d_sigma: f64,
}

/// Folded-normal mean `d·erf(d/(σ√2)) + σ√(2/π)·exp(−d²/(2σ²))`.
///
/// Evaluated as `|d| + 2σ(φ(z) − z·Q(z))` with `z = |d|/σ`, which equals the
/// form above but keeps `E ≥ |d|` exact in floating point.
pub fn expected_l1(d: f64, sigma: f64) -> Result<ExpectedL1> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "expected_l1 needs sigma > 0, got {sigma}"
        )));
    }
    let e = erf(d / (sigma * SQRT_2));
    let g = (-d * d / (2.0 * sigma * sigma)).exp();
    Ok(ExpectedL1 {
        value: d.abs() + expected_l1_excess(d, sigma),
        d_d: e,
        d_sigma: SQRT_2_OVER_PI * g,
    })
}

/// `E|d − σε| − |d|` at full relative precision; `σ > 0` is assumed.
pub fn expected_l1_excess(d: f64, sigma: f64) -> f64 {
    let z = d.abs() / sigma;
    (2.0 * sigma * (std_normal_pdf(z) - z * std_normal_sf(z))).max(0.0)
}

/// [`expected_l1`] as a training loss on `(μ, α)`.
pub fn expected_l1_loss(pred: GaussianOffset, t: f64) -> OffsetLoss {
    let sigma = pred.sigma();
    let e = expected_l1(t - pred.mu, sigma).expect("sigma is positive after clamping");
    OffsetLoss {
        loss: e.value,
        d_mu: -e.d_d,
        d_alpha: pred.alpha_gate() * e.d_sigma * 0.5 * sigma,
    }
}
