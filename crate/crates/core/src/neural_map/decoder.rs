//! Two-hidden-layer MLP mapping an interpolated feature to a signed distance.
//!
//! All parameters live in one flat vector (layout below) so optimizers and
//! gradient checks can treat them uniformly:
//! `[W1 (h1×in, row-major), b1, W2 (h2×h1), b2, w3 (h2), b3]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x` for `x > 0`, `eˣ − 1` otherwise.
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Elu if x > 0.0 => (x, 1.0),
            Activation::Elu => {
                let e = x.exp();
                (e - 1.0, e)
            }
            Activation::Identity => (x, 1.0),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Elu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Elu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfDecoder {
    input_dim: usize,
    hidden: [usize; 2],
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, reused by [`SdfDecoder::backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    a1: Vec<f64>,
    d1: Vec<f64>,
    a2: Vec<f64>,
    d2: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl SdfDecoder {
    /// Glorot-uniform weights from a fixed seed, zero biases.
    pub fn new(input_dim: usize, hidden: [usize; 2], activation: Activation, seed: u64) -> Self {
        let mut dec = Self::zeros(input_dim, hidden, activation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2] = hidden;
        let mut fill = |params: &mut [f64], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params {
                *w = rng.random_range(-bound..bound);
            }
        };
        let (w1, _, w2, _, w3, _) = dec.offsets();
        fill(&mut dec.params[w1..w1 + h1 * input_dim], input_dim, h1);
        fill(&mut dec.params[w2..w2 + h2 * h1], h1, h2);
        fill(&mut dec.params[w3..w3 + h2], h2, 1);
        dec
    }

    pub fn zeros(input_dim: usize, hidden: [usize; 2], activation: Activation) -> Self {
        let [h1, h2] = hidden;
        let count = h1 * input_dim + h1 + h2 * h1 + h2 + h2 + 1;
        Self {
            input_dim,
            hidden,
            activation,
            params: vec![0.0; count],
        }
    }

    pub fn from_params(input_dim: usize, hidden: [usize; 2], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let dec = Self::zeros(input_dim, hidden, activation);
        if params.len() != dec.params.len() {
            return Err(Error::Dimension {
                expected: dec.params.len(),
                got: params.len(),
            });
        }
        Ok(Self { params, ..dec })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> [usize; 2] {
        self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn offsets(&self) -> (usize, usize, usize, usize, usize, usize) {
        let [h1, h2] = self.hidden;
        let w1 = 0;
        let b1 = w1 + h1 * self.input_dim;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + h2;
        (w1, b1, w2, b2, w3, b3)
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache)
    }

    pub fn forward_cached(&self, input: &[f64], cache: &mut ForwardCache) -> Result<f64> {
        if input.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: input.len(),
            });
        }
        let [h1, h2] = self.hidden;
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        cache.input.clear();
        cache.input.extend_from_slice(input);
        cache.a1.resize(h1, 0.0);
        cache.d1.resize(h1, 0.0);
        cache.a2.resize(h2, 0.0);
        cache.d2.resize(h2, 0.0);

        for j in 0..h1 {
            let row = &p[w1 + j * self.input_dim..w1 + (j + 1) * self.input_dim];
            let z = p[b1 + j] + dot(row, input);
            (cache.a1[j], cache.d1[j]) = self.activation.apply(z);
        }
        for j in 0..h2 {
            let row = &p[w2 + j * h1..w2 + (j + 1) * h1];
            let z = p[b2 + j] + dot(row, &cache.a1);
            (cache.a2[j], cache.d2[j]) = self.activation.apply(z);
        }
        Ok(p[b3] + dot(&p[w3..w3 + h2], &cache.a2))
    }

    /// Back-propagates `upstream = ∂L/∂output` through the cached pass.
    /// Parameter gradients are accumulated into `param_grad` when given;
    /// the input gradient overwrites `input_grad`.
    pub fn backward(
        &self,
        cache: &mut ForwardCache,
        upstream: f64,
        param_grad: Option<&mut [f64]>,
        input_grad: &mut [f64],
    ) -> Result<()> {
        if input_grad.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: input_grad.len(),
            });
        }
        let [h1, h2] = self.hidden;
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        cache.g2.resize(h2, 0.0);
        cache.g1.resize(h1, 0.0);

        for j in 0..h2 {
            cache.g2[j] = upstream * p[w3 + j] * cache.d2[j];
        }
        cache.g1.iter_mut().for_each(|g| *g = 0.0);
        for j in 0..h2 {
            let gj = cache.g2[j];
            if gj == 0.0 {
                continue;
            }
            let row = &p[w2 + j * h1..w2 + (j + 1) * h1];
            for (g, w) in cache.g1.iter_mut().zip(row) {
                *g += gj * w;
            }
        }
        for j in 0..h1 {
            cache.g1[j] *= cache.d1[j];
        }
        input_grad.iter_mut().for_each(|g| *g = 0.0);
        for j in 0..h1 {
            let gj = cache.g1[j];
            let row = &p[w1 + j * self.input_dim..w1 + (j + 1) * self.input_dim];
            for (g, w) in input_grad.iter_mut().zip(row) {
                *g += gj * w;
            }
        }

        if let Some(grad) = param_grad {
            if grad.len() != p.len() {
                return Err(Error::Dimension {
                    expected: p.len(),
                    got: grad.len(),
                });
            }
            grad[b3] += upstream;
            for j in 0..h2 {
                grad[w3 + j] += upstream * cache.a2[j];
                grad[b2 + j] += cache.g2[j];
                let gj = cache.g2[j];
                let row = &mut grad[w2 + j * h1..w2 + (j + 1) * h1];
                for (g, a) in row.iter_mut().zip(&cache.a1) {
                    *g += gj * a;
                }
            }
            for j in 0..h1 {
                grad[b1 + j] += cache.g1[j];
                let gj = cache.g1[j];
                let row = &mut grad[w1 + j * self.input_dim..w1 + (j + 1) * self.input_dim];
                for (g, x) in row.iter_mut().zip(&cache.input) {
                    *g += gj * x;
                }
            }
        }
        Ok(())
    }
}

/// Four independent partial sums so the loop pipelines and vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}
