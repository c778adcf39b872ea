//! Incremental neural-point SDF map.
//!
//! The scene is a cloud of neural points, each carrying a learnable feature.
//! A query interpolates the features of its nearest neural points with
//! inverse-squared-distance weights and decodes the result (optionally
//! together with the weighted mean offset to those points) through a small
//! MLP. Gradients with respect to the query position are exact.

mod decoder;
mod snapshot;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{Activation, ForwardCache, SdfDecoder};
pub use snapshot::{read_snapshot, write_snapshot, MAGIC};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::spatial::{push_bounded, KdTree, Neighbor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub feature_dim: usize,
    pub hidden: [usize; 2],
    pub activation: Activation,
    /// Feed the weighted mean offset to the neighbors into the decoder.
    pub relative_position: bool,
    /// Minimum spacing of newly inserted neural points (m).
    pub resolution: f64,
    pub neighbors: usize,
    pub min_neighbors: usize,
    /// Query radius as a multiple of `resolution`.
    pub query_radius_factor: f64,
    /// Added to squared distances in the interpolation weights (m²).
    pub weight_epsilon: f64,
    /// Bound on training labels (m).
    pub truncation: f64,
    /// Sigmoid sharpening scale as a fraction of `truncation`.
    pub bce_scale_ratio: f64,
    pub free_samples: usize,
    pub behind_samples: usize,
    /// Loss weight of surface samples relative to the others.
    pub surface_weight: f64,
    /// Free-space samples are drawn within this distance before the
    /// endpoint, as a multiple of `truncation` (clipped to the ray length).
    pub free_space_range_factor: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Samples per optimizer step; 0 uses the whole batch every step.
    pub batch_size: usize,
    /// Feature learning rates shrink as `stiffening / stability` once a
    /// point's accumulated training weight exceeds this; 0 disables.
    pub stiffening: f64,
    /// Keep optimizer moments across optimize calls.
    pub persistent_optimizer: bool,
    /// Features of points created within this many frames are trainable.
    pub window_frames: u64,
    /// The decoder is trained only while the map has seen at most this many frames.
    pub warmup_frames: u64,
    /// Rebuild the kd-tree once the point count grew by this fraction.
    pub rebuild_growth: f64,
    pub decoder_seed: u64,
    pub divergence_factor: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            hidden: [64, 64],
            activation: Activation::Elu,
            relative_position: true,
            resolution: 0.2,
            neighbors: 6,
            min_neighbors: 3,
            query_radius_factor: 3.0,
            weight_epsilon: 1e-6,
            truncation: 0.3,
            bce_scale_ratio: 1.0 / 3.0,
            free_samples: 3,
            behind_samples: 1,
            surface_weight: 3.0,
            free_space_range_factor: 3.0,
            learning_rate: 2e-3,
            iterations: 50,
            batch_size: 128,
            stiffening: 10.0,
            persistent_optimizer: false,
            window_frames: 100,
            warmup_frames: 30,
            rebuild_growth: 0.2,
            decoder_seed: 7,
            divergence_factor: 10.0,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.feature_dim > 0
            && self.hidden.iter().all(|&h| h > 0)
            && self.resolution > 0.0
            && self.neighbors > 0
            && self.min_neighbors > 0
            && self.min_neighbors <= self.neighbors
            && self.query_radius_factor > 0.0
            && self.weight_epsilon > 0.0
            && self.truncation > 0.0
            && self.bce_scale_ratio > 0.0
            && self.free_space_range_factor > 0.0
            && self.surface_weight > 0.0
            && self.stiffening >= 0.0
            && self.learning_rate > 0.0
            && self.rebuild_growth >= 0.0
            && self.divergence_factor > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid map configuration: {self:?}")))
        }
    }

    pub fn query_radius(&self) -> f64 {
        self.query_radius_factor * self.resolution
    }

    pub fn bce_scale(&self) -> f64 {
        self.bce_scale_ratio * self.truncation
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.feature_dim + if self.relative_position { 3 } else { 0 }
    }
}

/// Decoded field value at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub sdf: f64,
    /// Spatial gradient of `sdf` (un-normalized surface normal).
    pub gradient: Vec3,
    pub valid: bool,
    pub neighbor_count: usize,
}

impl FieldSample {
    pub fn invalid(neighbor_count: usize) -> Self {
        Self {
            sdf: 0.0,
            gradient: Vec3::zeros(),
            valid: false,
            neighbor_count,
        }
    }
}

/// Anything that can be queried for a signed distance and its gradient.
pub trait SdfField {
    fn sample(&self, q: &Vec3) -> FieldSample;

    /// Value only; `None` where the field is undefined.
    fn value(&self, q: &Vec3) -> Option<f64> {
        let s = self.sample(q);
        s.valid.then_some(s.sdf)
    }
}

/// A neural point as stored in the map.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPoint {
    pub position: Vec3,
    pub feature: Vec<f64>,
    pub created_at: u64,
    pub stability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Surface,
    FreeSpace,
    BehindSurface,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub position: Vec3,
    /// Truncated signed distance label (m).
    pub label: f64,
    pub weight: f64,
    pub kind: SampleKind,
}

/// Interpolation weights of one query, normalized to sum to one.
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
    /// Weighted mean of `q − xᵢ`.
    pub offset: Vec3,
}

#[derive(Debug, Clone)]
struct SpatialIndex {
    tree: KdTree,
    /// Points `[0, built)` are in `tree`; the rest are scanned linearly.
    built: usize,
}

#[derive(Debug, Clone)]
pub struct NeuralMap {
    config: MapConfig,
    positions: Vec<Vec3>,
    features: Vec<f64>,
    created_at: Vec<u64>,
    stability: Vec<f64>,
    /// Adam first and second moments of every feature entry, kept across
    /// optimize calls, and the number of steps each point has taken.
    feature_moments: Vec<[f64; 2]>,
    feature_steps: Vec<u32>,
    decoder_adam: Adam,
    decoder: SdfDecoder,
    index: SpatialIndex,
    frame_count: u64,
    current_frame: u64,
}

/// Outcome of one call to [`NeuralMap::optimize`].
#[derive(Debug, Clone, Default)]
pub struct OptimizeReport {
    pub losses: Vec<f64>,
    pub used_samples: usize,
    pub trained_points: usize,
    pub decoder_trained: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    /// `None` follows the warm-up policy of the map configuration.
    pub train_decoder: Option<bool>,
    /// `None` uses the configured minibatch size; `Some(0)` is full batch.
    pub batch_size: Option<usize>,
}

impl NeuralMap {
    pub fn new(config: MapConfig) -> Result<Self> {
        config.validate()?;
        let decoder = SdfDecoder::new(
            config.decoder_input_dim(),
            config.hidden,
            config.activation,
            config.decoder_seed,
        );
        Ok(Self::with_decoder(config, decoder))
    }

    pub fn with_decoder(config: MapConfig, decoder: SdfDecoder) -> Self {
        Self {
            config,
            positions: Vec::new(),
            features: Vec::new(),
            created_at: Vec::new(),
            stability: Vec::new(),
            feature_moments: Vec::new(),
            feature_steps: Vec::new(),
            decoder_adam: Adam::new(decoder.param_count()),
            decoder,
            index: SpatialIndex {
                tree: KdTree::default(),
                built: 0,
            },
            frame_count: 0,
            current_frame: 0,
        }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn decoder(&self) -> &SdfDecoder {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut SdfDecoder {
        &mut self.decoder
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let f = self.config.feature_dim;
        &self.features[i * f..(i + 1) * f]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f64] {
        let f = self.config.feature_dim;
        &mut self.features[i * f..(i + 1) * f]
    }

    pub fn point(&self, i: usize) -> NeuralPoint {
        NeuralPoint {
            position: self.positions[i],
            feature: self.feature(i).to_vec(),
            created_at: self.created_at[i],
            stability: self.stability[i],
        }
    }

    pub fn points(&self) -> impl Iterator<Item = NeuralPoint> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_count
    }

    pub fn current_frame(&self) -> u64 {
        self.current_frame
    }

    /// Accumulated interpolation weight point `i` received in training.
    pub fn stability(&self, i: usize) -> f64 {
        self.stability[i]
    }

    /// Number of points currently covered by the kd-tree.
    pub fn indexed_count(&self) -> usize {
        self.index.built
    }

    pub(crate) fn push_point(&mut self, p: NeuralPoint) {
        self.positions.push(p.position);
        self.features.extend_from_slice(&p.feature);
        self.created_at.push(p.created_at);
        self.stability.push(p.stability);
        self.feature_moments.extend(std::iter::repeat_n([0.0; 2], p.feature.len()));
        self.feature_steps.push(0);
    }

    pub(crate) fn set_frames(&mut self, frame_count: u64, current_frame: u64) {
        self.frame_count = frame_count;
        self.current_frame = current_frame;
    }

    pub fn rebuild_index(&mut self) {
        self.index = SpatialIndex {
            tree: KdTree::build(&self.positions),
            built: self.positions.len(),
        };
    }

    fn maybe_rebuild(&mut self) {
        let n = self.positions.len();
        let built = self.index.built;
        if n > built && (n - built) as f64 >= self.config.rebuild_growth * built as f64 {
            self.rebuild_index();
        }
    }

    /// Whether any neural point lies strictly within `radius` of `q`.
    pub fn has_point_within(&self, q: &Vec3, radius: f64) -> bool {
        self.any_within(q, radius * radius)
    }

    fn any_within(&self, q: &Vec3, r2: f64) -> bool {
        self.index.tree.any_within(q, r2)
            || self.positions[self.index.built..]
                .iter()
                .any(|p| (p - q).norm_squared() < r2)
    }

    /// Up to `neighbors` nearest neural points within the query radius.
    pub fn neighbors(&self, q: &Vec3, out: &mut Vec<Neighbor>) {
        out.clear();
        let k = self.config.neighbors;
        let r2 = self.config.query_radius().powi(2);
        self.index.tree.knn(q, k, r2, out);
        for (i, p) in self.positions.iter().enumerate().skip(self.index.built) {
            let d2 = (p - q).norm_squared();
            if d2 <= r2 {
                push_bounded(out, k, (d2, i));
            }
        }
    }

    /// Adds a neural point for every input point with no existing neural
    /// point closer than the map resolution.
    pub fn insert_frame(&mut self, points_world: &[Vec3], frame_idx: u64) -> usize {
        let r2 = self.config.resolution.powi(2);
        let f = self.config.feature_dim;
        let before = self.len();
        for p in points_world {
            if !p.iter().all(|x| x.is_finite()) || self.any_within(p, r2) {
                continue;
            }
            self.positions.push(*p);
            self.features.extend(std::iter::repeat_n(0.0, f));
            self.created_at.push(frame_idx);
            self.stability.push(0.0);
            self.feature_moments.extend(std::iter::repeat_n([0.0; 2], f));
            self.feature_steps.push(0);
        }
        self.frame_count += 1;
        self.current_frame = frame_idx;
        self.maybe_rebuild();
        self.len() - before
    }

    pub fn stencil(&self, q: &Vec3, scratch: &mut Vec<Neighbor>) -> Option<Stencil> {
        self.neighbors(q, scratch);
        self.stencil_of(q, scratch)
    }

    fn stencil_of(&self, q: &Vec3, nbrs: &[Neighbor]) -> Option<Stencil> {
        if nbrs.len() < self.config.min_neighbors {
            return None;
        }
        let eps = self.config.weight_epsilon;
        let mut total = 0.0;
        let mut stencil = Stencil {
            ids: Vec::with_capacity(nbrs.len()),
            weights: Vec::with_capacity(nbrs.len()),
            offset: Vec3::zeros(),
        };
        for &(d2, id) in nbrs {
            let w = 1.0 / (d2 + eps);
            total += w;
            stencil.ids.push(id);
            stencil.weights.push(w);
        }
        for (w, &id) in stencil.weights.iter_mut().zip(&stencil.ids) {
            *w /= total;
            stencil.offset += (q - self.positions[id]) * *w;
        }
        Some(stencil)
    }

    fn fill_input(&self, stencil: &Stencil, input: &mut [f64]) {
        let f = self.config.feature_dim;
        input.iter_mut().for_each(|x| *x = 0.0);
        for (&id, &w) in stencil.ids.iter().zip(&stencil.weights) {
            for (x, fi) in input[..f].iter_mut().zip(self.feature(id)) {
                *x += w * fi;
            }
        }
        if self.config.relative_position {
            input[f..f + 3].copy_from_slice(stencil.offset.as_slice());
        }
    }

    /// Decoded value only (no gradient); `None` when the query has too few neighbors.
    pub fn sdf_value(&self, q: &Vec3) -> Option<f64> {
        let mut scratch = Vec::with_capacity(self.config.neighbors);
        self.neighbors(q, &mut scratch);
        self.value_with_neighbors(q, &scratch)
    }

    /// Value-only counterpart of [`evaluate_neighbors`](Self::evaluate_neighbors).
    pub fn value_with_neighbors(&self, q: &Vec3, nbrs: &[Neighbor]) -> Option<f64> {
        let stencil = self.stencil_of(q, nbrs)?;
        let mut input = vec![0.0; self.config.decoder_input_dim()];
        self.fill_input(&stencil, &mut input);
        self.decoder.forward(&input).ok()
    }

    /// Value and exact spatial gradient at `q`.
    pub fn query_sdf(&self, q: &Vec3) -> FieldSample {
        let mut scratch = Vec::with_capacity(self.config.neighbors);
        self.neighbors(q, &mut scratch);
        self.evaluate_neighbors(q, &scratch)
    }

    /// Same as [`query_sdf`](Self::query_sdf) but with a caller-fixed
    /// neighbor set, so the result is a smooth function of `q`.
    pub fn evaluate_neighbors(&self, q: &Vec3, nbrs: &[Neighbor]) -> FieldSample {
        let count = nbrs.len();
        if count < self.config.min_neighbors {
            return FieldSample::invalid(count);
        }
        let f = self.config.feature_dim;
        let eps = self.config.weight_epsilon;

        let mut raw = Vec::with_capacity(count);
        let mut dw = Vec::with_capacity(count);
        let mut total = 0.0;
        let mut dtotal = Vec3::zeros();
        for &(_, id) in nbrs {
            let d = q - self.positions[id];
            let w = 1.0 / (d.norm_squared() + eps);
            let g = d * (-2.0 * w * w);
            total += w;
            dtotal += g;
            raw.push(w);
            dw.push(g);
        }

        let stencil = Stencil {
            ids: nbrs.iter().map(|n| n.1).collect(),
            weights: raw.iter().map(|w| w / total).collect(),
            offset: nbrs
                .iter()
                .zip(&raw)
                .map(|(&(_, id), w)| (q - self.positions[id]) * (w / total))
                .sum(),
        };
        let mut input = vec![0.0; self.config.decoder_input_dim()];
        self.fill_input(&stencil, &mut input);
        let mut cache = ForwardCache::default();
        let Ok(sdf) = self.decoder.forward_cached(&input, &mut cache) else {
            return FieldSample::invalid(count);
        };
        let mut g_in = vec![0.0; input.len()];
        if self.decoder.backward(&mut cache, 1.0, None, &mut g_in).is_err() {
            return FieldSample::invalid(count);
        }

        // ∂ŵᵢ/∂q = (∂wᵢ/∂q − ŵᵢ·∂W/∂q) / W
        let mut gradient = Vec3::zeros();
        let mut offset_jac = Mat3::identity();
        for (k, &(_, id)) in nbrs.iter().enumerate() {
            let dwhat = (dw[k] - dtotal * stencil.weights[k]) / total;
            let feat_dot: f64 = self.feature(id).iter().zip(&g_in[..f]).map(|(a, b)| a * b).sum();
            gradient += dwhat * feat_dot;
            if self.config.relative_position {
                offset_jac += (q - self.positions[id]) * dwhat.transpose();
            }
        }
        if self.config.relative_position {
            let g_off = Vec3::new(g_in[f], g_in[f + 1], g_in[f + 2]);
            gradient += offset_jac.transpose() * g_off;
        }
        FieldSample {
            sdf,
            gradient,
            valid: true,
            neighbor_count: count,
        }
    }

    /// Binary cross-entropy training of the features in the local window
    /// (and of the decoder during warm-up) with default options.
    pub fn optimize_local_map(
        &mut self,
        samples: &[TrainingSample],
        iterations: usize,
        learning_rate: f64,
    ) -> Result<OptimizeReport> {
        self.optimize(
            samples,
            &TrainOptions {
                iterations,
                learning_rate,
                train_decoder: None,
                batch_size: None,
            },
        )
    }

    pub fn optimize(&mut self, samples: &[TrainingSample], opts: &TrainOptions) -> Result<OptimizeReport> {
        let train_decoder = opts
            .train_decoder
            .unwrap_or(self.frame_count <= self.config.warmup_frames);
        let mut report = OptimizeReport {
            decoder_trained: train_decoder,
            ..Default::default()
        };
        if opts.iterations == 0 {
            return Ok(report);
        }
        let Some(batch) = self.prepare_batch(samples) else {
            return Ok(report);
        };
        report.used_samples = batch.stencils.len();
        report.trained_points = batch.trainable.len();

        let fdim = self.config.feature_dim;
        let span = |id: usize| id * fdim..(id + 1) * fdim;
        let saved_features: Vec<(Vec<f64>, Vec<[f64; 2]>, u32)> = batch
            .trainable
            .iter()
            .map(|&id| {
                (
                    self.features[span(id)].to_vec(),
                    self.feature_moments[span(id)].to_vec(),
                    self.feature_steps[id],
                )
            })
            .collect();
        let saved_decoder = train_decoder.then(|| (self.decoder.params().to_vec(), self.decoder_adam.clone()));

        if !self.config.persistent_optimizer {
            for &id in &batch.trainable {
                self.feature_moments[span(id)].iter_mut().for_each(|m| *m = [0.0; 2]);
                self.feature_steps[id] = 0;
            }
            if train_decoder {
                self.decoder_adam = Adam::new(self.decoder.param_count());
            }
        }
        let nparam = if train_decoder { self.decoder.param_count() } else { 0 };
        let mut feat_grad = vec![0.0; batch.trainable.len() * fdim];
        let mut dec_grad = vec![0.0; nparam];

        let batch_size = opts.batch_size.unwrap_or(self.config.batch_size);
        let order = self.sample_order(batch.stencils.len(), batch_size);
        let size = match batch_size {
            0 => order.len(),
            b => b.min(order.len()),
        };
        let mut cursor = 0;
        let mut members = Vec::with_capacity(size);
        let lr = opts.learning_rate;
        for _ in 0..opts.iterations {
            members.clear();
            for _ in 0..size {
                members.push(order[cursor]);
                cursor = (cursor + 1) % order.len();
            }
            let grad = train_decoder.then_some(dec_grad.as_mut_slice());
            let loss = self.subset_gradient(&batch, &members, &mut feat_grad, grad)?;
            let initial = report.losses.first().copied();
            if !loss.is_finite() || initial.is_some_and(|l0| loss > self.config.divergence_factor * l0) {
                for (&id, (f, m, t)) in batch.trainable.iter().zip(&saved_features) {
                    self.features[span(id)].copy_from_slice(f);
                    self.feature_moments[span(id)].copy_from_slice(m);
                    self.feature_steps[id] = *t;
                }
                if let Some((p, adam)) = saved_decoder {
                    self.decoder.params_mut().copy_from_slice(&p);
                    self.decoder_adam = adam;
                }
                let limit = initial.unwrap_or(0.0) * self.config.divergence_factor;
                return Err(Error::Diverged { loss, limit });
            }
            report.losses.push(loss);

            for (k, &id) in batch.trainable.iter().enumerate() {
                let g = &feat_grad[k * fdim..(k + 1) * fdim];
                if batch_size > 0 && g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                self.feature_steps[id] += 1;
                let t = self.feature_steps[id];
                let s0 = self.config.stiffening;
                let lr_i = if s0 > 0.0 { lr * s0 / self.stability[id].max(s0) } else { lr };
                let (m, p) = (&mut self.feature_moments[span(id)], &mut self.features[span(id)]);
                Adam::update(&feat_grad[k * fdim..(k + 1) * fdim], t, lr_i, m, p);
            }
            if train_decoder {
                self.decoder_adam.t += 1;
                let t = self.decoder_adam.t;
                Adam::update(&dec_grad, t, lr, &mut self.decoder_adam.moments, self.decoder.params_mut());
            }
        }

        for st in &batch.stencils {
            for (&id, &w) in st.ids.iter().zip(&st.weights) {
                self.stability[id] += w;
            }
        }
        Ok(report)
    }

    /// Freezes the neighborhoods of `samples`; only features and decoder
    /// weights change while a batch is in use.
    fn prepare_batch(&self, samples: &[TrainingSample]) -> Option<Batch> {
        let sigma = self.config.bce_scale();
        let mut scratch = Vec::new();
        let mut batch = Batch {
            stencils: Vec::new(),
            targets: Vec::new(),
            weights: Vec::new(),
            weight_sum: 0.0,
            slot: vec![Batch::FROZEN; self.len()],
            trainable: Vec::new(),
        };
        for s in samples {
            if let Some(st) = self.stencil(&s.position, &mut scratch) {
                for &id in &st.ids {
                    let recent = self.current_frame.saturating_sub(self.created_at[id]) < self.config.window_frames;
                    if recent && batch.slot[id] == Batch::FROZEN {
                        batch.slot[id] = batch.trainable.len() as u32;
                        batch.trainable.push(id);
                    }
                }
                batch.stencils.push(st);
                batch.targets.push(sigmoid(s.label / sigma));
                batch.weights.push(s.weight);
                batch.weight_sum += s.weight;
            }
        }
        (!batch.stencils.is_empty() && batch.weight_sum > 0.0).then_some(batch)
    }

    /// Deterministic shuffle of the sample indices, seeded by the decoder
    /// seed and the frame counter.
    fn sample_order(&self, n: usize, batch_size: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if batch_size > 0 && batch_size < n {
            let seed = self.config.decoder_seed ^ self.frame_count.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
    }

    /// Weighted mean BCE of the batch. Gradients with respect to the
    /// trainable features (and the decoder parameters when requested)
    /// overwrite the given buffers.
    #[cfg(test)]
    fn batch_gradient(&self, batch: &Batch, feat_grad: &mut [f64], dec_grad: Option<&mut [f64]>) -> Result<f64> {
        let all: Vec<usize> = (0..batch.stencils.len()).collect();
        self.subset_gradient(batch, &all, feat_grad, dec_grad)
    }

    /// [`batch_gradient`](Self::batch_gradient) restricted to `members`.
    fn subset_gradient(
        &self,
        batch: &Batch,
        members: &[usize],
        feat_grad: &mut [f64],
        mut dec_grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let fdim = self.config.feature_dim;
        let sigma = self.config.bce_scale();
        let mut input = vec![0.0; self.config.decoder_input_dim()];
        let mut g_in = vec![0.0; input.len()];
        let mut cache = ForwardCache::default();
        feat_grad.iter_mut().for_each(|g| *g = 0.0);
        if let Some(g) = dec_grad.as_deref_mut() {
            g.iter_mut().for_each(|g| *g = 0.0);
        }
        let weight_sum: f64 = members.iter().map(|&i| batch.weights[i]).sum();
        if !(weight_sum > 0.0) {
            return Ok(0.0);
        }
        let mut loss = 0.0;
        for &i in members {
            let (st, target, w) = (&batch.stencils[i], batch.targets[i], batch.weights[i]);
            self.fill_input(st, &mut input);
            let z = self.decoder.forward_cached(&input, &mut cache)? / sigma;
            loss += w * bce_with_logit(z, target);
            let upstream = w * (sigmoid(z) - target) / sigma / weight_sum;
            self.decoder.backward(&mut cache, upstream, dec_grad.as_deref_mut(), &mut g_in)?;
            for (&id, &wi) in st.ids.iter().zip(&st.weights) {
                let s = batch.slot[id];
                if s == Batch::FROZEN {
                    continue;
                }
                let base = s as usize * fdim;
                for (g, gi) in feat_grad[base..base + fdim].iter_mut().zip(&g_in[..fdim]) {
                    *g += wi * gi;
                }
            }
        }
        Ok(loss / weight_sum)
    }
}

struct Batch {
    stencils: Vec<Stencil>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    weight_sum: f64,
    /// Position of each map point among the trainable ones, or `FROZEN`.
    slot: Vec<u32>,
    trainable: Vec<usize>,
}

impl Batch {
    const FROZEN: u32 = u32::MAX;
}

impl SdfField for NeuralMap {
    fn sample(&self, q: &Vec3) -> FieldSample {
        self.query_sdf(q)
    }

    fn value(&self, q: &Vec3) -> Option<f64> {
        self.sdf_value(q)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−[t·ln σ(z) + (1 − t)·ln(1 − σ(z))]`, evaluated without overflow.
#[inline]
fn bce_with_logit(z: f64, target: f64) -> f64 {
    // ln σ(z) = −softplus(−z), ln(1 − σ(z)) = −softplus(z)
    target * softplus(-z) + (1.0 - target) * softplus(z)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
struct Adam {
    moments: Vec<[f64; 2]>,
    t: u32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            moments: vec![[0.0; 2]; n],
            t: 0,
        }
    }

    /// One bias-corrected step of `params` at step count `t` (from 1).
    fn update(grad: &[f64], t: u32, lr: f64, moments: &mut [[f64; 2]], params: &mut [f64]) {
        let c1 = 1.0 - Self::BETA1.powi(t as i32);
        let c2 = 1.0 - Self::BETA2.powi(t as i32);
        for ((g, mv), p) in grad.iter().zip(moments).zip(params) {
            mv[0] = Self::BETA1 * mv[0] + (1.0 - Self::BETA1) * g;
            mv[1] = Self::BETA2 * mv[1] + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (mv[0] / c1) / ((mv[1] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Surface, free-space and behind-surface samples along each ray from
/// `origin` to a measured point.
pub fn sample_training_points<R: Rng>(
    points_world: &[Vec3],
    origin: &Vec3,
    config: &MapConfig,
    rng: &mut R,
) -> Vec<TrainingSample> {
    sample_along_rays(points_world, |_| 1.0, origin, config, rng)
}

/// Smallest incidence cosine used to rescale labels.
pub const MIN_INCIDENCE_COSINE: f64 = 0.05;

/// Same sampling as [`sample_training_points`], but the label of every
/// sample on a ray whose endpoint has a known surface normal is the
/// distance to the tangent plane at the endpoint, `d·|cos θ|`, instead of
/// the distance along the ray.
pub fn sample_training_points_with_normals<R: Rng>(
    points_world: &[Vec3],
    normals: &[Option<Vec3>],
    origin: &Vec3,
    config: &MapConfig,
    rng: &mut R,
) -> Vec<TrainingSample> {
    let scale = |i: usize| match normals.get(i).copied().flatten() {
        Some(n) => {
            let ray = points_world[i] - origin;
            (n.dot(&ray) / (n.norm() * ray.norm())).abs().max(MIN_INCIDENCE_COSINE)
        }
        None => 1.0,
    };
    sample_along_rays(points_world, scale, origin, config, rng)
}

fn sample_along_rays<R: Rng>(
    points_world: &[Vec3],
    scale: impl Fn(usize) -> f64,
    origin: &Vec3,
    config: &MapConfig,
    rng: &mut R,
) -> Vec<TrainingSample> {
    let trunc = config.truncation;
    let mut out = Vec::with_capacity(points_world.len() * (1 + config.free_samples + config.behind_samples));
    for (i, p) in points_world.iter().enumerate() {
        let ray = p - origin;
        let length = ray.norm();
        if !(length > 1e-9) || !length.is_finite() {
            continue;
        }
        let dir = ray / length;
        let c = scale(i);
        out.push(TrainingSample {
            position: *p,
            label: 0.0,
            weight: config.surface_weight,
            kind: SampleKind::Surface,
        });
        let free_range = (config.free_space_range_factor * trunc).min(length);
        for _ in 0..config.free_samples {
            let d = free_range * (1.0 - rng.random::<f64>());
            out.push(TrainingSample {
                position: p - dir * d,
                label: (c * d).min(trunc),
                weight: 1.0,
                kind: SampleKind::FreeSpace,
            });
        }
        for _ in 0..config.behind_samples {
            let d = trunc * (1.0 - rng.random::<f64>());
            out.push(TrainingSample {
                position: p + dir * d,
                label: -(c * d).min(trunc),
                weight: 1.0,
                kind: SampleKind::BehindSurface,
            });
        }
    }
    out
}
