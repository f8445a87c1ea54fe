//! Dense building blocks with hand-written forward and backward passes.
//!
//! Batches are row-major: one sample per row.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Guard for ℓ2 normalization of (near) zero vectors.
pub const L2_EPS: f64 = 1e-12;

/// Fully-connected layer `y = W x + b` with `W` stored as `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    cached_input: Option<Array2<f64>>,
}

/// Gradients for one dense layer, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LayerGrads {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LayerGrads {
            weights: Array2::zeros((out_dim, in_dim)),
            biases: Array1::zeros(out_dim),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        self.weights += &other.weights;
        self.biases += &other.biases;
    }

    pub fn fill_zero(&mut self) {
        self.weights.fill(0.0);
        self.biases.fill(0.0);
    }
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            weights: Array2::zeros((out_dim, in_dim)),
            biases: Array1::zeros(out_dim),
            cached_input: None,
        }
    }

    /// Weights uniform in ±√(6/(in+out)), zero biases.
    pub fn init_uniform(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((out_dim, in_dim), || rng.uniform_range(-limit, limit));
        DenseLayer {
            weights,
            biases: Array1::zeros(out_dim),
            cached_input: None,
        }
    }

    pub fn from_parts(weights: Array2<f64>, biases: Array1<f64>) -> Self {
        assert_eq!(
            weights.nrows(),
            biases.len(),
            "bias length must match weight rows"
        );
        DenseLayer {
            weights,
            biases,
            cached_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Forward without caching.
    pub fn infer(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(
            x.ncols(),
            self.in_dim(),
            "dense layer expects {} inputs, got {}",
            self.in_dim(),
            x.ncols()
        );
        let mut y = x.dot(&self.weights.t());
        y += &self.biases;
        y
    }

    /// Forward a batch and remember it for `backward`.
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Array2<f64> {
        let y = self.infer(x);
        self.cached_input = Some(x.to_owned());
        y
    }

    pub fn forward_vec(&mut self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        self.forward(view).into_raw_vec_and_offset().0
    }

    /// Backward for the cached batch: returns `dx = dy W` and the parameter
    /// gradients `dW = dyᵀ x`, `db = Σ dy`.
    pub fn backward(&self, dy: ArrayView2<f64>) -> (Array2<f64>, LayerGrads) {
        let grads = self.backward_params(dy);
        (dy.dot(&self.weights), grads)
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, dy: ArrayView2<f64>) -> LayerGrads {
        let x = self
            .cached_input
            .as_ref()
            .expect("backward called before forward");
        assert_eq!(dy.ncols(), self.out_dim(), "output gradient width mismatch");
        self.grads_for(x.view(), dy)
    }

    /// Parameter gradients for an explicit input batch, without the cache.
    pub fn grads_for(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> LayerGrads {
        assert_eq!(dy.nrows(), x.nrows(), "batch size mismatch in backward");
        LayerGrads {
            weights: dy.t().dot(&x),
            biases: dy.sum_axis(Axis(0)),
        }
    }

    /// `dx = dy W`.
    pub fn input_grad(&self, dy: ArrayView2<f64>) -> Array2<f64> {
        dy.dot(&self.weights)
    }

    pub fn backward_vec(&self, dy: &[f64]) -> (Vec<f64>, LayerGrads) {
        let view = ArrayView2::from_shape((1, dy.len()), dy).expect("contiguous row");
        let (dx, g) = self.backward(view);
        (dx.into_raw_vec_and_offset().0, g)
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }

    /// Round every parameter to the nearest f32.
    pub fn snap_to_f32(&mut self) {
        self.weights.mapv_inplace(|w| w as f32 as f64);
        self.biases.mapv_inplace(|b| b as f32 as f64);
    }
}

pub fn relu(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gates `dy` by `pre > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(pre: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// `x / max(‖x‖₂, δ)`.
pub fn l2_normalize(x: ArrayView1<f64>) -> Array1<f64> {
    let norm = x.dot(&x).sqrt();
    &x / norm.max(L2_EPS)
}

/// Row-wise `l2_normalize`.
pub fn l2_normalize_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let norm = row.dot(&row).sqrt().max(L2_EPS);
        row /= norm;
    }
    y
}

/// Backward of `l2_normalize` for one vector given its input `x`.
pub fn l2_normalize_backward(x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
    let norm = x.dot(&x).sqrt();
    if norm <= L2_EPS {
        return &dy / L2_EPS;
    }
    let y = &x / norm;
    let proj = y.dot(&dy);
    (&dy - &(&y * proj)) / norm
}

pub fn l2_normalize_rows_backward(x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for ((xr, dyr), mut out) in x.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
        out.assign(&l2_normalize_backward(xr, dyr));
    }
    dx
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// SGD with momentum: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<LayerGrads>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config("lr", format!("must be ≥ 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(
                "momentum",
                format!("must be in [0, 1), got {momentum}"),
            ));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies one step. `names` labels each parameter block for diagnostics.
    pub fn step(
        &mut self,
        layers: &mut [&mut DenseLayer],
        grads: &[LayerGrads],
        names: &[&str],
    ) -> Result<()> {
        assert_eq!(layers.len(), grads.len());
        for (i, g) in grads.iter().enumerate() {
            if !g
                .weights
                .iter()
                .chain(g.biases.iter())
                .all(|v| v.is_finite())
            {
                return Err(Error::NonFinite {
                    context: format!(
                        "gradient of parameter block `{}`",
                        names.get(i).copied().unwrap_or("?")
                    ),
                });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = layers
                .iter()
                .map(|l| LayerGrads::zeros(l.out_dim(), l.in_dim()))
                .collect();
        }
        for ((layer, g), v) in layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            let m = self.momentum;
            let lr = self.lr;
            Zip::from(&mut v.weights)
                .and(&g.weights)
                .and(&mut layer.weights)
                .for_each(|vel, &gw, w| {
                    *vel = m * *vel + gw;
                    *w -= lr * *vel;
                });
            Zip::from(&mut v.biases)
                .and(&g.biases)
                .and(&mut layer.biases)
                .for_each(|vel, &gb, b| {
                    *vel = m * *vel + gb;
                    *b -= lr * *vel;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff, rel_err, sample_std_normal};
    use ndarray::array;

    fn random_layer(rng: &mut Rng, i: usize, o: usize) -> DenseLayer {
        let w = Array2::from_shape_simple_fn((o, i), || sample_std_normal(rng));
        let b = Array1::from_shape_simple_fn(o, || sample_std_normal(rng));
        DenseLayer::from_parts(w, b)
    }

    #[test]
    fn identity_and_zero_input() {
        let mut l = DenseLayer::from_parts(Array2::eye(3), Array1::zeros(3));
        assert_eq!(l.forward_vec(&[1.0, -2.0, 3.5]), vec![1.0, -2.0, 3.5]);
        let mut l = DenseLayer::from_parts(Array2::ones((2, 3)), array![0.5, -1.0]);
        assert_eq!(l.forward_vec(&[0.0; 3]), vec![0.5, -1.0]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let mut layer = random_layer(&mut rng, 4, 3);
            let x: Vec<f64> = (0..4).map(|_| sample_std_normal(&mut rng)).collect();
            let r: Vec<f64> = (0..3).map(|_| sample_std_normal(&mut rng)).collect();
            // scalar objective: r · y
            layer.forward_vec(&x);
            let (dx, g) = layer.backward_vec(&r);
            let objective = |l: &DenseLayer, x: &[f64]| -> f64 {
                let y = l.infer(ArrayView2::from_shape((1, 4), x).unwrap());
                y.iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            for o in 0..3 {
                for i in 0..4 {
                    let num = finite_diff(
                        |w| {
                            let mut l = layer.clone();
                            l.weights[[o, i]] = w;
                            objective(&l, &x)
                        },
                        layer.weights[[o, i]],
                        1e-5,
                    );
                    assert!(rel_err(num, g.weights[[o, i]]) < 1e-4);
                }
                let num = finite_diff(
                    |b| {
                        let mut l = layer.clone();
                        l.biases[o] = b;
                        objective(&l, &x)
                    },
                    layer.biases[o],
                    1e-5,
                );
                assert!(rel_err(num, g.biases[o]) < 1e-4);
            }
            for i in 0..4 {
                let num = finite_diff(
                    |v| {
                        let mut xx = x.clone();
                        xx[i] = v;
                        objective(&layer, &xx)
                    },
                    x[i],
                    1e-5,
                );
                assert!(rel_err(num, dx[i]) < 1e-4);
            }
        }
    }

    #[test]
    #[should_panic]
    fn dense_dimension_mismatch_panics() {
        let mut l = DenseLayer::zeros(3, 2);
        l.forward_vec(&[1.0, 2.0]);
    }

    #[test]
    fn relu_values_and_gate() {
        let x = array![[-1.0, 0.0, 2.0]];
        assert_eq!(relu(x.view()), array![[0.0, 0.0, 2.0]]);
        let pos = array![[0.5, 1.0, 3.0]];
        assert_eq!(relu(pos.view()), pos);
        let dy = array![[1.0, 1.0, 1.0]];
        assert_eq!(relu_backward(x.view(), dy.view()), array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn relu_gradient_check() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let mut v = sample_std_normal(&mut rng);
            if v.abs() < 1e-2 {
                v += 0.1;
            }
            let g = relu_backward(array![[v]].view(), array![[1.0]].view())[[0, 0]];
            let num = finite_diff(|t| t.max(0.0), v, 1e-5);
            assert!(rel_err(num, g) < 1e-4);
        }
    }

    #[test]
    fn l2_normalize_values() {
        let y = l2_normalize(array![3.0, 4.0].view());
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        let z = l2_normalize(array![0.0, 0.0].view());
        assert_eq!(z, array![0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_gradient_check() {
        let mut rng = Rng::new(21);
        for _ in 0..10 {
            let x = Array1::from_shape_simple_fn(5, || sample_std_normal(&mut rng));
            let r = Array1::from_shape_simple_fn(5, || sample_std_normal(&mut rng));
            let dx = l2_normalize_backward(x.view(), r.view());
            for i in 0..5 {
                let num = finite_diff(
                    |v| {
                        let mut xx = x.clone();
                        xx[i] = v;
                        l2_normalize(xx.view()).dot(&r)
                    },
                    x[i],
                    1e-6,
                );
                assert!(rel_err(num, dx[i]) < 1e-4, "{num} vs {}", dx[i]);
            }
        }
    }

    #[test]
    fn softmax_values() {
        let p = softmax(&[0.0; 20]);
        assert!(p.iter().all(|&v| (v - 0.05).abs() < 1e-15));
        let a = softmax(&[0.3, -1.0, 2.0]);
        let b = softmax(&[100.3, 99.0, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let q = softmax(&[0.0, 3f64.ln()]);
        assert!((q[0] - 0.25).abs() < 1e-15 && (q[1] - 0.75).abs() < 1e-15);
        let big = softmax(&[1000.0, -1000.0, 0.0]);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(big.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sgd_examples() {
        let mut l = DenseLayer::from_parts(array![[1.0]], array![0.0]);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        let zero = LayerGrads::zeros(1, 1);
        opt.step(&mut [&mut l], &[zero], &["w"]).unwrap();
        assert_eq!(l.weights[[0, 0]], 1.0);

        // f(w) = w², gradient 2w
        let mut g = LayerGrads::zeros(1, 1);
        g.weights[[0, 0]] = 2.0 * l.weights[[0, 0]];
        opt.step(&mut [&mut l], &[g], &["w"]).unwrap();
        assert!((l.weights[[0, 0]] - 0.8).abs() < 1e-15);

        for _ in 0..199 {
            let mut g = LayerGrads::zeros(1, 1);
            g.weights[[0, 0]] = 2.0 * l.weights[[0, 0]];
            opt.step(&mut [&mut l], &[g], &["w"]).unwrap();
        }
        assert!(l.weights[[0, 0]].abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut l = DenseLayer::zeros(2, 2);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        let mut g = LayerGrads::zeros(2, 2);
        g.biases[1] = f64::NAN;
        let err = opt.step(&mut [&mut l], &[g], &["head"]).unwrap_err();
        assert!(err.to_string().contains("head"));
    }

    #[test]
    fn sgd_rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(-1.0, 0.0).is_err());
    }
}
