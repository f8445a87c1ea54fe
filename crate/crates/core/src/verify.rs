//! Oracle suites: Monte Carlo check of the expected-ℓ1 closed form,
//! finite-difference gradient checks, the KL σ-minimizer, monotonicity,
//! the mining ratio, and loss-surface export.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::data::Target;
use crate::losses::{
    binary_loss, expected_l1, expected_l1_excess, expected_l1_loss, kl_l1_loss, l1_loss,
    multiclass_loss, sampled_l1_with_epsilon, select_hard_negatives, ConditionMode, GaussianOffset,
};
use crate::model::{LossMode, Model, TrainConfig};
use crate::net::{l2_normalize, l2_normalize_backward, relu, relu_backward, DenseLayer};
use crate::numerics::{erf, finite_diff, mc_expected_l1, sample_std_normal, Rng, SQRT_2};

pub const MC_GRID_D: [f64; 7] = [-3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0];
pub const MC_GRID_SIGMA: [f64; 4] = [0.1, 0.5, 1.0, 2.0];
pub const MC_SAMPLES: usize = 1_000_000;

/// Relative tolerance of per-function gradient checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Relative tolerance of the end-to-end network check.
pub const NETWORK_GRAD_TOL: f64 = 1e-3;
/// Points this close to a kink are skipped.
pub const KINK_MARGIN: f64 = 1e-2;
/// Differences below this are central-difference round-off, not error.
const ABS_FLOOR: f64 = 1e-8;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: Vec<String>,
    /// Largest deviation seen, in units of the suite tolerance.
    pub worst_ratio: f64,
}

impl SuiteReport {
    fn new(name: impl Into<String>) -> Self {
        SuiteReport {
            name: name.into(),
            cases: 0,
            failures: Vec::new(),
            worst_ratio: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.cases > 0
    }

    /// Records one comparison; `ratio` is deviation / tolerance.
    fn record(&mut self, ratio: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if ratio.is_nan() || ratio > 1.0 {
            self.failures.push(describe());
        }
        if ratio.is_nan() {
            self.worst_ratio = f64::INFINITY;
        } else {
            self.worst_ratio = self.worst_ratio.max(ratio);
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} {}: {} cases, worst {:.3} of tolerance",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst_ratio
        );
        for f in self.failures.iter().take(10) {
            let _ = write!(s, "\n    {f}");
        }
        if self.failures.len() > 10 {
            let _ = write!(s, "\n    ... {} more", self.failures.len() - 10);
        }
        s
    }
}

fn grad_ratio(numeric: f64, analytic: f64, tol: f64) -> f64 {
    (numeric - analytic).abs() / (tol * analytic.abs().max(numeric.abs())).max(ABS_FLOOR)
}

/// Closed forms of `E|d − σε|` under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectationForm {
    /// `d·erf(d/(σ√2)) + σ√(2/π)·exp(−d²/(2σ²))`.
    Corrected,
    /// `d·erf(d/(σ√2)) + σ·exp(−d²/σ²)/√(2π)`.
    Printed,
}

impl ExpectationForm {
    pub fn name(self) -> &'static str {
        match self {
            ExpectationForm::Corrected => "corrected",
            ExpectationForm::Printed => "printed",
        }
    }

    pub fn value(self, d: f64, sigma: f64) -> f64 {
        match self {
            ExpectationForm::Corrected => expected_l1(d, sigma).expect("σ > 0").value,
            ExpectationForm::Printed => {
                d * erf(d / (SQRT_2 * sigma))
                    + sigma * (-d * d / (sigma * sigma)).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
        }
    }
}

/// One Monte Carlo estimate per grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McPoint {
    pub d: f64,
    pub sigma: f64,
    pub mean: f64,
    pub stderr: f64,
}

impl McPoint {
    pub fn tolerance(&self) -> f64 {
        (4.0 * self.stderr).max(1e-3)
    }
}

/// Monte Carlo means over the `d × σ` grid, one derived stream per point.
pub fn mc_grid(n: usize, seed: u64) -> Vec<McPoint> {
    let root = Rng::new(seed).derive(&[0x3C]);
    let mut out = Vec::with_capacity(MC_GRID_D.len() * MC_GRID_SIGMA.len());
    for (i, &d) in MC_GRID_D.iter().enumerate() {
        for (j, &sigma) in MC_GRID_SIGMA.iter().enumerate() {
            let mut rng = root.derive(&[i as u64, j as u64]);
            let (mean, stderr) = mc_expected_l1(d, sigma, n, &mut rng);
            out.push(McPoint {
                d,
                sigma,
                mean,
                stderr,
            });
        }
    }
    out
}

/// `|form(d, σ) − MC mean| ≤ max(1e-3, 4·stderr)` at every grid point.
pub fn expectation_suite(form: ExpectationForm, grid: &[McPoint]) -> SuiteReport {
    let mut r = SuiteReport::new(format!("expectation identity ({})", form.name()));
    for p in grid {
        let v = form.value(p.d, p.sigma);
        let dev = (v - p.mean).abs();
        r.record(dev / p.tolerance(), || {
            format!(
                "d={} σ={}: closed form {v:.6}, MC {:.6} ± {:.2e}, |Δ| = {dev:.3e}",
                p.d, p.sigma, p.mean, p.stderr
            )
        });
    }
    r
}

/// Finite-difference checks of every loss, every layer and the full network.
pub fn gradient_suites(seed: u64, points: usize) -> Vec<SuiteReport> {
    let root = Rng::new(seed).derive(&[0x96AD]);
    vec![
        binary_gradients(&mut root.derive(&[1]), points),
        multiclass_gradients(&mut root.derive(&[2]), points),
        l1_gradients(&mut root.derive(&[3]), points),
        kl_gradients(&mut root.derive(&[4]), points, ConditionMode::He),
        kl_gradients(&mut root.derive(&[5]), points, ConditionMode::Paper),
        sampled_gradients(&mut root.derive(&[6]), points),
        expected_gradients(&mut root.derive(&[7]), points),
        dense_gradients(&mut root.derive(&[8]), points),
        relu_gradients(&mut root.derive(&[9]), points),
        l2_gradients(&mut root.derive(&[10]), points),
        network_gradients(&mut root.derive(&[11]), points),
    ]
}

const H: f64 = 1e-6;

fn binary_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("binary loss gradient");
    while r.cases < points {
        let n = 8;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.05, 0.95)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i < 2).collect();
        let mining = select_hard_negatives(&scores, &labels, 1.0 / 3.0);
        let (_, g) = binary_loss(&scores, &mining);
        for i in 0..n {
            let num = finite_diff(
                |v| {
                    let mut s = scores.clone();
                    s[i] = v;
                    binary_loss(&s, &mining).0
                },
                scores[i],
                H,
            );
            r.record(grad_ratio(num, g[i], GRAD_TOL), || {
                format!(
                    "score {i} = {}: numeric {num}, analytic {}",
                    scores[i], g[i]
                )
            });
        }
    }
    r
}

fn multiclass_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("multiclass loss gradient");
    while r.cases < points {
        let (b, c) = (4, 5);
        let logits = Array2::from_shape_simple_fn((b, c), || 2.0 * sample_std_normal(rng));
        let labels: Vec<usize> = (0..b).map(|_| rng.int_range(0, c - 1)).collect();
        let positives = vec![0, 2, 3];
        let (_, g) = multiclass_loss(logits.view(), &labels, &positives);
        for i in 0..b {
            for j in 0..c {
                let num = finite_diff(
                    |v| {
                        let mut z = logits.clone();
                        z[[i, j]] = v;
                        multiclass_loss(z.view(), &labels, &positives).0
                    },
                    logits[[i, j]],
                    H,
                );
                r.record(grad_ratio(num, g[[i, j]], GRAD_TOL), || {
                    format!("logit [{i},{j}]: numeric {num}, analytic {}", g[[i, j]])
                });
            }
        }
    }
    r
}

fn l1_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("l1 loss gradient");
    while r.cases < points {
        let n = 4;
        let ys: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let ye: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let ts: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let te: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let pos = vec![0, 1, 3];
        let g = l1_loss(&ys, &ye, &ts, &te, &pos);
        for i in 0..n {
            if (ts[i] - ys[i]).abs() > KINK_MARGIN {
                let num = finite_diff(
                    |v| {
                        let mut y = ys.clone();
                        y[i] = v;
                        l1_loss(&y, &ye, &ts, &te, &pos).loss
                    },
                    ys[i],
                    H,
                );
                r.record(grad_ratio(num, g.d_start[i], GRAD_TOL), || {
                    format!("start {i}: numeric {num}, analytic {}", g.d_start[i])
                });
            }
            if (te[i] - ye[i]).abs() > KINK_MARGIN {
                let num = finite_diff(
                    |v| {
                        let mut y = ye.clone();
                        y[i] = v;
                        l1_loss(&ys, &y, &ts, &te, &pos).loss
                    },
                    ye[i],
                    H,
                );
                r.record(grad_ratio(num, g.d_end[i], GRAD_TOL), || {
                    format!("end {i}: numeric {num}, analytic {}", g.d_end[i])
                });
            }
        }
    }
    r
}

/// Checks `d_mu` and `d_alpha` of a `(μ, α, t) → loss` function.
fn offset_check(
    r: &mut SuiteReport,
    mu: f64,
    alpha: f64,
    t: f64,
    analytic: (f64, f64),
    f: impl Fn(f64, f64) -> f64,
) {
    let nm = finite_diff(|m| f(m, alpha), mu, H);
    let na = finite_diff(|a| f(mu, a), alpha, H);
    r.record(grad_ratio(nm, analytic.0, GRAD_TOL), || {
        format!(
            "μ={mu:.4} α={alpha:.4} t={t:.4}: ∂μ numeric {nm}, analytic {}",
            analytic.0
        )
    });
    r.record(grad_ratio(na, analytic.1, GRAD_TOL), || {
        format!(
            "μ={mu:.4} α={alpha:.4} t={t:.4}: ∂α numeric {na}, analytic {}",
            analytic.1
        )
    });
}

fn random_offset(rng: &mut Rng) -> (f64, f64, f64) {
    (
        rng.uniform_range(-2.0, 2.0),
        rng.uniform_range(-4.0, 3.0),
        rng.uniform_range(-3.0, 3.0),
    )
}

fn kl_gradients(rng: &mut Rng, points: usize, mode: ConditionMode) -> SuiteReport {
    let mut r = SuiteReport::new(format!("kl_l1 loss gradient ({mode})"));
    while r.cases < points {
        let (mu, alpha, t) = random_offset(rng);
        let d = (t - mu).abs();
        if (d - 1.0).abs() < KINK_MARGIN || d < KINK_MARGIN {
            continue;
        }
        let g = kl_l1_loss(GaussianOffset::new(mu, alpha), t, mode);
        offset_check(&mut r, mu, alpha, t, (g.d_mu, g.d_alpha), |m, a| {
            kl_l1_loss(GaussianOffset::new(m, a), t, mode).loss
        });
    }
    r
}

fn sampled_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("sampled_l1 loss gradient");
    while r.cases < points {
        let (mu, alpha, t) = random_offset(rng);
        let eps = sample_std_normal(rng);
        let resid = t - mu - (alpha / 2.0).exp() * eps;
        if resid.abs() < KINK_MARGIN {
            continue;
        }
        let g = sampled_l1_with_epsilon(GaussianOffset::new(mu, alpha), t, eps);
        offset_check(&mut r, mu, alpha, t, (g.d_mu, g.d_alpha), |m, a| {
            sampled_l1_with_epsilon(GaussianOffset::new(m, a), t, eps).loss
        });
    }
    r
}

fn expected_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("expected_l1 gradient");
    while r.cases < points {
        let (mu, alpha, t) = random_offset(rng);
        let g = expected_l1_loss(GaussianOffset::new(mu, alpha), t);
        offset_check(&mut r, mu, alpha, t, (g.d_mu, g.d_alpha), |m, a| {
            expected_l1_loss(GaussianOffset::new(m, a), t).loss
        });
        let d = t - mu;
        let sigma = (alpha / 2.0).exp();
        let e = expected_l1(d, sigma).expect("σ > 0");
        let nd = finite_diff(|x| expected_l1(x, sigma).unwrap().value, d, H);
        let ns = finite_diff(
            |x| expected_l1(d, x).unwrap().value,
            sigma,
            H * sigma.min(1.0),
        );
        r.record(grad_ratio(nd, e.d_d, 1e-5), || {
            format!("d={d:.4} σ={sigma:.4}: ∂d numeric {nd}, analytic {}", e.d_d)
        });
        r.record(grad_ratio(ns, e.d_sigma, 1e-5), || {
            format!(
                "d={d:.4} σ={sigma:.4}: ∂σ numeric {ns}, analytic {}",
                e.d_sigma
            )
        });
    }
    r
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || sample_std_normal(rng))
}

/// Weighted-sum objective `Σ w ⊙ y` so that `∂/∂y = w`.
fn dense_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("dense layer backward");
    while r.cases < points {
        let (b, i, o) = (3, 5, 4);
        let mut layer = DenseLayer::init_uniform(i, o, rng);
        layer.biases = Array1::from_shape_simple_fn(o, || sample_std_normal(rng));
        let x = random_matrix(rng, b, i);
        let w = random_matrix(rng, b, o);
        let objective = |l: &DenseLayer, x: &Array2<f64>| (&l.infer(x.view()) * &w).sum();
        let g = layer.grads_for(x.view(), w.view());
        let dx = layer.input_grad(w.view());
        for p in 0..o {
            for q in 0..i {
                let num = finite_diff(
                    |v| {
                        let mut l = layer.clone();
                        l.weights[[p, q]] = v;
                        objective(&l, &x)
                    },
                    layer.weights[[p, q]],
                    H,
                );
                r.record(grad_ratio(num, g.weights[[p, q]], GRAD_TOL), || {
                    format!("W[{p},{q}]: numeric {num}, analytic {}", g.weights[[p, q]])
                });
            }
            let num = finite_diff(
                |v| {
                    let mut l = layer.clone();
                    l.biases[p] = v;
                    objective(&l, &x)
                },
                layer.biases[p],
                H,
            );
            r.record(grad_ratio(num, g.biases[p], GRAD_TOL), || {
                format!("b[{p}]: numeric {num}, analytic {}", g.biases[p])
            });
        }
        for s in 0..b {
            for q in 0..i {
                let num = finite_diff(
                    |v| {
                        let mut xx = x.clone();
                        xx[[s, q]] = v;
                        objective(&layer, &xx)
                    },
                    x[[s, q]],
                    H,
                );
                r.record(grad_ratio(num, dx[[s, q]], GRAD_TOL), || {
                    format!("x[{s},{q}]: numeric {num}, analytic {}", dx[[s, q]])
                });
            }
        }
    }
    r
}

fn relu_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("relu backward");
    while r.cases < points {
        let x = random_matrix(rng, 2, 6);
        let w = random_matrix(rng, 2, 6);
        let dx = relu_backward(x.view(), w.view());
        for ((s, q), &v) in x.indexed_iter() {
            if v.abs() < KINK_MARGIN {
                continue;
            }
            let num = finite_diff(
                |t| {
                    let mut xx = x.clone();
                    xx[[s, q]] = t;
                    (&relu(xx.view()) * &w).sum()
                },
                v,
                H,
            );
            r.record(grad_ratio(num, dx[[s, q]], GRAD_TOL), || {
                format!("x[{s},{q}] = {v}: numeric {num}, analytic {}", dx[[s, q]])
            });
        }
    }
    r
}

fn l2_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("l2 normalization backward");
    while r.cases < points {
        let n = 6;
        let x = Array1::from_shape_simple_fn(n, || sample_std_normal(rng));
        let w = Array1::from_shape_simple_fn(n, || sample_std_normal(rng));
        let dx = l2_normalize_backward(x.view(), w.view());
        for q in 0..n {
            let num = finite_diff(
                |t| {
                    let mut xx = x.clone();
                    xx[q] = t;
                    l2_normalize(xx.view()).dot(&w)
                },
                x[q],
                H,
            );
            r.record(grad_ratio(num, dx[q], GRAD_TOL), || {
                format!("x[{q}]: numeric {num}, analytic {}", dx[q])
            });
        }
    }
    r
}

/// Full network, every loss mode, random entries of every layer.
fn network_gradients(rng: &mut Rng, points: usize) -> SuiteReport {
    let mut r = SuiteReport::new("end-to-end network gradient");
    let per_mode = points.div_ceil(LossMode::ALL.len());
    for (mi, mode) in LossMode::ALL.into_iter().enumerate() {
        let cfg = TrainConfig {
            loss_mode: mode,
            hidden: 12,
            lambda: 1.0,
            seed: mi as u64,
            ..TrainConfig::default()
        };
        let model = Model::init(&cfg, 6, 3, 2);
        let b = 6;
        let x = random_matrix(rng, b, 12);
        let targets: Vec<Option<Target>> = (0..b)
            .map(|i| {
                (i % 2 == 0).then(|| Target {
                    class_id: rng.int_range(0, 2),
                    t_s: rng.uniform_range(-0.4, 0.4),
                    t_e: rng.uniform_range(-0.4, 0.4),
                    annotation: 0,
                })
            })
            .collect();
        let noise = rng.derive(&[mi as u64]);
        let total = |m: &Model| m.loss_and_grads(x.view(), &targets, &cfg, &noise).0.total;
        let (_, grads) = model.loss_and_grads(x.view(), &targets, &cfg, &noise);
        let mut done = 0;
        let mut attempts = 0;
        while done < per_mode && attempts < 50 * per_mode {
            attempts += 1;
            let layer = rng.int_range(0, 2);
            let (rows, cols) = model.layers()[layer].weights.dim();
            let (p, q) = (rng.int_range(0, rows - 1), rng.int_range(0, cols - 1));
            let analytic = grads.as_slice()[layer].weights[[p, q]];
            let w0 = model.layers()[layer].weights[[p, q]];
            let num = finite_diff(
                |v| {
                    let mut m = model.clone();
                    m.layers_mut()[layer].weights[[p, q]] = v;
                    total(&m)
                },
                w0,
                H,
            );
            // a ReLU or |·| kink inside the stencil shows up as a jump
            let wide = finite_diff(
                |v| {
                    let mut m = model.clone();
                    m.layers_mut()[layer].weights[[p, q]] = v;
                    total(&m)
                },
                w0,
                KINK_MARGIN,
            );
            if (wide - num).abs() > 0.1 * num.abs().max(1e-3) {
                continue;
            }
            done += 1;
            r.record(grad_ratio(num, analytic, NETWORK_GRAD_TOL), || {
                format!(
                    "{mode}: {}[{p},{q}] numeric {num}, analytic {analytic}",
                    crate::model::LAYER_NAMES[layer]
                )
            });
        }
    }
    r
}

/// Golden-section search for the σ minimizing the Gaussian KL branch at
/// fixed `d`; it should sit at `|d|`.
pub fn kl_sigma_argmin(d: f64) -> f64 {
    let f = |s: f64| (d * d) / (2.0 * s * s) + (s * s).ln() / 2.0;
    let (mut a, mut b) = (1e-3, 100.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut e = a + g * (b - a);
    for _ in 0..200 {
        if f(c) < f(e) {
            b = e;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        e = a + g * (b - a);
    }
    0.5 * (a + b)
}

pub fn kl_minimizer_suite() -> SuiteReport {
    let mut r = SuiteReport::new("kl_l1 σ minimizer");
    for d in [1.5, 2.0, 3.0, -2.0] {
        // minimize the actual loss through α, Gaussian branch forced
        let loss = |s: f64| {
            kl_l1_loss(
                GaussianOffset::new(0.0, (s * s).ln()),
                d,
                ConditionMode::Paper,
            )
            .loss
        };
        let s_loss = {
            let (mut a, mut b) = (0.05f64, 20.0f64);
            for _ in 0..200 {
                let m1 = a + (b - a) / 3.0;
                let m2 = b - (b - a) / 3.0;
                if loss(m1) < loss(m2) {
                    b = m2;
                } else {
                    a = m1;
                }
            }
            0.5 * (a + b)
        };
        let s_ref = kl_sigma_argmin(d);
        for (which, s) in [("loss", s_loss), ("reference", s_ref)] {
            let rel = (s - d.abs()).abs() / d.abs();
            r.record(rel / 0.01, || {
                format!("d={d}: {which} argmin σ = {s}, expected {}", d.abs())
            });
        }
    }
    r
}

/// Strict increase in σ, `E ≥ |d|`, evenness, and the σ → 0 limit.
///
/// Strictness is checked on `E − |d|`: where σ ≪ |d| the increase of `E`
/// itself is below one ulp of `|d|`.
pub fn monotonicity_suite() -> SuiteReport {
    let mut r = SuiteReport::new("expected_l1 monotonicity");
    let ds: Vec<f64> = (0..=12).map(|i| -3.0 + 0.5 * i as f64).collect();
    let sigmas: Vec<f64> = (2..=60).map(|i| 0.05 * i as f64).collect();
    for &d in &ds {
        for w in sigmas.windows(2) {
            let (a, b) = (expected_l1_excess(d, w[0]), expected_l1_excess(d, w[1]));
            r.record(if b > a && a > 0.0 { 0.0 } else { 2.0 }, || {
                format!("d={d}: E − |d| at σ={} is {a}, at σ={} is {b}", w[0], w[1])
            });
            let v = expected_l1(d, w[0]).unwrap().value;
            r.record(if v >= d.abs() { 0.0 } else { 2.0 }, || {
                format!("d={d} σ={}: E = {v} < |d|", w[0])
            });
            r.record(
                if v == expected_l1(-d, w[0]).unwrap().value {
                    0.0
                } else {
                    2.0
                },
                || format!("d={d} σ={}: not even in d", w[0]),
            );
        }
        let gap = expected_l1(d, 1e-6).unwrap().value - d.abs();
        r.record(gap / 1e-5, || format!("d={d}: E(σ=1e-6) − |d| = {gap}"));
    }
    r
}

/// `|I_n| = min(⌊|I_p|/λ⌋, available negatives)` over random batches.
pub fn mining_suite(seed: u64, batches: usize) -> SuiteReport {
    let mut r = SuiteReport::new("hard-negative mining ratio");
    let mut rng = Rng::new(seed).derive(&[0x717E]);
    for _ in 0..batches {
        let n = rng.int_range(1, 128);
        let p_pos = rng.uniform();
        let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < p_pos * 0.5).collect();
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.uniform_range(1e-3, 1.0 - 1e-3))
            .collect();
        let m = select_hard_negatives(&scores, &labels, 1.0 / 3.0);
        let pos = labels.iter().filter(|&&l| l).count();
        let avail = n - pos;
        let expected = if pos == 0 { 0 } else { (3 * pos).min(avail) };
        let hardest_ok = m.negatives.iter().all(|&i| {
            (0..n)
                .filter(|&j| !labels[j] && !m.negatives.contains(&j))
                .all(|j| scores[j] <= scores[i])
        });
        let ok = m.negatives.len() == expected && m.positives.len() == pos && hardest_ok;
        r.record(if ok { 0.0 } else { 2.0 }, || {
            format!(
                "{pos} positives, {avail} negatives: kept {} (expected {expected}), hardest {hardest_ok}",
                m.negatives.len()
            )
        });
    }
    r
}

/// Which suites `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    All,
    Expectation,
    Gradients,
    KlMinimizer,
    Monotonicity,
    Mining,
}

impl std::str::FromStr for Selector {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Ok(match s {
            "all" => Selector::All,
            "expectation" | "mc" => Selector::Expectation,
            "gradients" | "grad" => Selector::Gradients,
            "kl" | "kl-minimizer" => Selector::KlMinimizer,
            "monotonicity" => Selector::Monotonicity,
            "mining" => Selector::Mining,
            _ => {
                return Err(crate::Error::config(
                    "selector",
                    format!("expected all|expectation|gradients|kl|monotonicity|mining, got `{s}`"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
    /// Negative control: the printed closed form must fail the MC check.
    pub printed_form: Option<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
            && self
                .printed_form
                .as_ref()
                .is_none_or(|p| !p.passed() && p.worst_ratio > 10.0)
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for suite in &self.suites {
            let _ = writeln!(s, "{}", suite.summary());
        }
        if let Some(p) = &self.printed_form {
            let rejected = !p.passed() && p.worst_ratio > 10.0;
            let _ = writeln!(
                s,
                "{} negative control, printed closed form: worst {:.1}× tolerance ({} of {} points off)",
                if rejected { "PASS" } else { "FAIL" },
                p.worst_ratio,
                p.failures.len(),
                p.cases
            );
        }
        s
    }
}

pub fn run(selector: Selector, seed: u64) -> VerifyReport {
    run_with_form(selector, seed, ExpectationForm::Corrected)
}

/// As [`run`], but checks `form` as the expectation under test.
pub fn run_with_form(selector: Selector, seed: u64, form: ExpectationForm) -> VerifyReport {
    let want = |s: Selector| selector == Selector::All || selector == s;
    let mut suites = Vec::new();
    let mut printed_form = None;
    if want(Selector::Expectation) {
        let grid = mc_grid(MC_SAMPLES, seed);
        suites.push(expectation_suite(form, &grid));
        printed_form = Some(expectation_suite(ExpectationForm::Printed, &grid));
    }
    if want(Selector::Gradients) {
        suites.extend(gradient_suites(seed, 100));
    }
    if want(Selector::KlMinimizer) {
        suites.push(kl_minimizer_suite());
    }
    if want(Selector::Monotonicity) {
        suites.push(monotonicity_suite());
    }
    if want(Selector::Mining) {
        suites.push(mining_suite(seed, 100));
    }
    VerifyReport {
        suites,
        printed_form,
    }
}

/// Regular grid over `[lo, hi]` with `n ≥ 2` points.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

pub const SURFACE_LOSSES: [&str; 5] = [
    "l1",
    "kl_l1_he",
    "kl_l1_paper",
    "expected_l1",
    "expected_l1_printed",
];

/// `loss_name,d,sigma,value` for every loss over the `d × σ` grid.
pub fn loss_surface_csv(grid_d: &[f64], grid_sigma: &[f64]) -> String {
    let mut s = String::from("loss_name,d,sigma,value\n");
    for name in SURFACE_LOSSES {
        for &d in grid_d {
            for &sigma in grid_sigma {
                let pred = GaussianOffset::new(0.0, (sigma * sigma).ln());
                let v = match name {
                    "l1" => d.abs(),
                    "kl_l1_he" => kl_l1_loss(pred, d, ConditionMode::He).loss,
                    "kl_l1_paper" => kl_l1_loss(pred, d, ConditionMode::Paper).loss,
                    "expected_l1" => ExpectationForm::Corrected.value(d, sigma),
                    _ => ExpectationForm::Printed.value(d, sigma),
                };
                let _ = writeln!(s, "{name},{d},{sigma},{v}");
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forms_differ_at_unit_point() {
        let c = ExpectationForm::Corrected.value(1.0, 1.0);
        let p = ExpectationForm::Printed.value(1.0, 1.0);
        // only the exponential terms differ
        let gap = (2.0 / std::f64::consts::PI).sqrt() * (-0.5f64).exp()
            - (-1.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((c - p - gap).abs() < 1e-15);
        assert!((gap - 0.3372).abs() < 1e-4);
    }

    #[test]
    fn small_mc_grid_separates_the_forms() {
        let grid = mc_grid(100_000, 3);
        assert_eq!(grid.len(), 28);
        assert!(expectation_suite(ExpectationForm::Corrected, &grid).passed());
        let printed = expectation_suite(ExpectationForm::Printed, &grid);
        assert!(!printed.passed());
        assert!(printed.worst_ratio > 10.0);
    }

    #[test]
    fn gradient_suites_pass_with_enough_points() {
        for s in gradient_suites(1, 100) {
            assert!(s.passed(), "{}", s.summary());
            assert!(s.cases >= 100, "{}", s.name);
        }
    }

    #[test]
    fn analytic_suites_pass() {
        assert!(kl_minimizer_suite().passed());
        let m = monotonicity_suite();
        assert!(m.passed(), "{}", m.summary());
        assert!(mining_suite(4, 100).passed());
    }

    #[test]
    fn golden_section_reference() {
        assert!((kl_sigma_argmin(3.0) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn surface_has_one_row_per_grid_point_and_loss() {
        let csv = loss_surface_csv(&linspace(-3.0, 3.0, 7), &linspace(0.05, 3.0, 5));
        assert_eq!(csv.lines().count(), 1 + SURFACE_LOSSES.len() * 7 * 5);
        assert!(csv.starts_with("loss_name,d,sigma,value\n"));
    }

    #[test]
    fn broken_gradient_is_caught() {
        let mut r = SuiteReport::new("x");
        r.record(grad_ratio(1.0, 1.1, GRAD_TOL), || "off by 10%".into());
        assert!(!r.passed());
        assert!(r.summary().contains("off by 10%"));
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("all".parse::<Selector>().unwrap(), Selector::All);
        assert!("nope".parse::<Selector>().is_err());
    }
}
