//! Minimal deterministic MLP predictor and Adam optimizer.
//!
//! The robust penalties need gradients that off-the-shelf training loops do
//! not expose: the IRM penalty backpropagates a second-order seed at the
//! logits, and CORAL injects a gradient directly at the penultimate feature
//! layer. [`Mlp::backward`] therefore accepts an arbitrary seed at the
//! logits plus an optional extra seed at the features, and every reduction
//! runs in a fixed order so identical seeds give bit-identical runs.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// One dense layer; weights are `in_dim x out_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

/// Feed-forward network with ReLU hidden layers and linear output.
/// The penultimate activation is the feature map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Cached post-activation outputs of one forward pass.
pub struct ForwardCache {
    /// `acts[l]` is the output of layer `l` (ReLU applied on hidden layers).
    pub acts: Vec<Array2<f32>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f32> {
        self.acts.last().expect("non-empty network")
    }

    /// Penultimate activations; for a single-layer network the features are
    /// the input and are not cached here.
    pub fn features(&self) -> Option<&Array2<f32>> {
        let n = self.acts.len();
        if n >= 2 {
            Some(&self.acts[n - 2])
        } else {
            None
        }
    }
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<(Array2<f32>, Array1<f32>)>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.dim())))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f32) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.scaled_add(scale, ow);
            b.scaled_add(scale, ob);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (w, b) in self.layers.iter_mut() {
            w.mapv_inplace(|x| x * s);
            b.mapv_inplace(|x| x * s);
        }
    }

    /// Squared L2 norm, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (w, b) in &self.layers {
            acc += w.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            acc += b.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().all(|x| x.is_finite()) && b.iter().all(|x| x.is_finite()))
    }
}

impl Mlp {
    /// He-initialized network with the given layer widths
    /// (`dims = [in, hidden.., out]`).
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let normal = StandardNormal;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (2.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    let z: f64 = normal.sample(rng);
                    (z * scale) as f32
                });
                Dense {
                    w: weights,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("non-empty").w.nrows()
    }

    /// Forward pass caching every post-activation output.
    pub fn forward(&self, x: ArrayView2<f32>) -> ForwardCache {
        let mut acts = Vec::with_capacity(self.layers.len());
        let n_layers = self.layers.len();
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = cur.dot(&layer.w);
            z += &layer.b;
            if l + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z.clone());
            cur = z;
        }
        ForwardCache { acts }
    }

    /// Logits without keeping intermediate activations.
    pub fn logits(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let n_layers = self.layers.len();
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = cur.dot(&layer.w);
            z += &layer.b;
            if l + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            cur = z;
        }
        cur
    }

    /// Backward pass from an arbitrary seed at the logits, with an optional
    /// additional seed injected at the penultimate features. The gradient
    /// with respect to the input is never materialized.
    pub fn backward(
        &self,
        x: ArrayView2<f32>,
        cache: &ForwardCache,
        logit_seed: ArrayView2<f32>,
        feature_seed: Option<ArrayView2<f32>>,
    ) -> Grads {
        let n_layers = self.layers.len();
        let mut grads = Grads::zeros_like(self);
        let mut delta = logit_seed.to_owned();
        for l in (0..n_layers).rev() {
            let input_act: ArrayView2<f32> = if l == 0 { x } else { cache.acts[l - 1].view() };
            grads.layers[l].0 = input_act.t().dot(&delta);
            grads.layers[l].1 = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut upstream = delta.dot(&self.layers[l].w.t());
            if l == n_layers - 1 {
                if let Some(fs) = feature_seed {
                    upstream += &fs;
                }
            }
            // ReLU gate of layer l-1
            upstream.zip_mut_with(&cache.acts[l - 1], |u, &a| {
                if a <= 0.0 {
                    *u = 0.0;
                }
            });
            delta = upstream;
        }
        grads
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend(l.w.iter());
            flat.extend(l.b.iter());
        }
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f32]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[at];
                at += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
    }

    /// FNV-1a hash over the raw parameter bits; used to assert that the
    /// policy update never touches the predictor and vice versa.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bits: u32| {
            for byte in bits.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for l in &self.layers {
            for &v in l.w.iter() {
                eat(v.to_bits());
            }
            for &v in l.b.iter() {
                eat(v.to_bits());
            }
        }
        h
    }
}

/// FNV-1a hash of an f64 parameter vector (policy side).
pub fn hash_f64_params(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &v in params {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam over the network parameters, with L2 weight decay added to the
/// gradient (decay is applied to the predictor only; the caller decides).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One update step on a flat parameter slice; `lr_scale` multiplies the
    /// base learning rate (used by the optional decay schedule).
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr_scale: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = (self.lr * lr_scale * bc2.sqrt() / bc1) as f32;
        let eps = self.eps as f32;
        let wd = self.weight_decay as f32;
        for i in 0..params.len() {
            let g = grads[i] + wd * params[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= lr * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Adam in f64 for the (small) policy parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamF64 {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamF64 {
    pub fn new(param_count: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamF64 {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale * bc2.sqrt() / bc1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn forward_shapes_and_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 4, 2], &mut rng);
        let x = Array2::<f32>::ones((5, 3));
        let cache = net.forward(x.view());
        assert_eq!(cache.acts.len(), 2);
        assert_eq!(cache.logits().dim(), (5, 2));
        assert!(cache.features().unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar objective: sum of logits weighted by a fixed seed.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[2, 3, 2], &mut rng);
        let x = array![[0.3f32, -1.2], [1.5, 0.4], [-0.7, 0.9]];
        let seed = array![[0.7f32, -0.3], [0.2, 0.5], [-0.4, 1.1]];

        let objective = |net: &Mlp| -> f64 {
            let logits = net.logits(x.view());
            logits
                .iter()
                .zip(seed.iter())
                .map(|(&l, &s)| (l as f64) * (s as f64))
                .sum()
        };

        let cache = net.forward(x.view());
        let grads = net.backward(x.view(), &cache, seed.view(), None);

        let mut flat = net.params_flat();
        let analytic: Vec<f32> = {
            let mut v = Vec::new();
            for (w, b) in &grads.layers {
                v.extend(w.iter());
                v.extend(b.iter());
            }
            v
        };
        let h = 1e-2f32;
        for idx in 0..flat.len() {
            let orig = flat[idx];
            let mut probe = net.clone();
            flat[idx] = orig + h;
            probe.set_params_flat(&flat);
            let up = objective(&probe);
            flat[idx] = orig - h;
            probe.set_params_flat(&flat);
            let dn = objective(&probe);
            flat[idx] = orig;
            let fd = (up - dn) / (2.0 * h as f64);
            if fd.abs() > 1e-4 {
                assert_relative_eq!(analytic[idx] as f64, fd, max_relative = 2e-3);
            }
        }
    }

    #[test]
    fn feature_seed_injects_at_penultimate_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[2, 3, 2], &mut rng);
        let x = array![[0.5f32, -0.2], [0.1, 0.8]];
        let cache = net.forward(x.view());
        let zero_seed = Array2::<f32>::zeros((2, 2));
        let fseed = Array2::<f32>::ones((2, 3));

        let grads = net.backward(x.view(), &cache, zero_seed.view(), Some(fseed.view()));
        // Objective sum(features): check dW1 against finite differences.
        let objective = |net: &Mlp| -> f64 {
            let c = net.forward(x.view());
            c.features().unwrap().iter().map(|&v| v as f64).sum()
        };
        let mut flat = net.params_flat();
        let h = 1e-2f32;
        let analytic = grads.layers[0].0[[0, 0]] as f64;
        let orig = flat[0];
        let mut probe = net.clone();
        flat[0] = orig + h;
        probe.set_params_flat(&flat);
        let up = objective(&probe);
        flat[0] = orig - h;
        probe.set_params_flat(&flat);
        let dn = objective(&probe);
        let fd = (up - dn) / (2.0 * h as f64);
        if fd.abs() > 1e-6 {
            assert_relative_eq!(analytic, fd, max_relative = 2e-3);
        }
        // Output-layer gradients must be zero: the objective does not
        // depend on the last layer.
        assert!(grads.layers[1].0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn param_hash_detects_any_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 3, 2], &mut rng);
        let h0 = net.param_hash();
        let mut other = net.clone();
        assert_eq!(h0, other.param_hash());
        let mut flat = other.params_flat();
        flat[7] += 1e-7;
        other.set_params_flat(&flat);
        assert_ne!(h0, other.param_hash());
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut params = vec![5.0f32, -3.0];
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999, 0.0);
        for _ in 0..500 {
            let grads: Vec<f32> = params.iter().map(|&p| 2.0 * p).collect();
            opt.step(&mut params, &grads, 1.0);
        }
        assert!(params.iter().all(|&p| p.abs() < 1e-2), "{params:?}");
    }
}
