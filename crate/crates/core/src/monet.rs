//! Landmark network with an appended quality node.
//!
//! The extractor is the O-Net layout without its face/non-face branch:
//!
//! ```text
//! 48x48x3 -> conv3x3(32) prelu pool3/2 -> conv3x3(64) prelu pool3/2
//!         -> conv3x3(64) prelu pool2/2 -> conv2x2(128) prelu
//!         -> fc(1152 -> 256) prelu -> { landmarks(256 -> 10), quality(256 -> 1) }
//! ```
//!
//! Pooling uses ceiling arithmetic, so spatial sizes run 48, 46, 23, 21, 10, 8,
//! 4, 3. Only the quality node is ever trained; the extractor and landmark head
//! are frozen inputs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive};
use crate::augmentation::replay;
use crate::data::{CropConfig, FaceSample, ImageBuffer, LandmarkSet};
use crate::error::{FqaError, Result};
use crate::recognition::LabelTable;
use crate::seed::rng_from_seed;

pub const INPUT_SIZE: usize = 48;
pub const FEATURE_DIM: usize = 256;
pub const FLATTEN_DIM: usize = 3 * 3 * 128;
pub const LANDMARK_DIM: usize = 10;

/// `(name, in_channels, out_channels, kernel, pool_kernel)`; pool stride is 2.
const CONV_LAYOUT: [(&str, usize, usize, usize, Option<usize>); 4] = [
    ("conv1", 3, 32, 3, Some(3)),
    ("conv2", 32, 64, 3, Some(3)),
    ("conv3", 64, 64, 3, Some(2)),
    ("conv4", 64, 128, 2, None),
];

/// Channel-major activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub prelu: Vec<f32>,
    pub pool: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonetWeights {
    pub convs: Vec<ConvLayer>,
    /// `[256][1152]`, input flattened channel-major.
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
    pub fc_prelu: Vec<f32>,
    /// `[10][256]`; outputs are `x1..x5, y1..y5` normalized to the crop.
    pub landmark_weight: Vec<f32>,
    pub landmark_bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityHead {
    pub weight: Vec<f32>,
    pub bias: f32,
}

impl QualityHead {
    pub fn zeros() -> Self {
        QualityHead {
            weight: vec![0.0; FEATURE_DIM],
            bias: 0.0,
        }
    }

    /// `weight · features + bias`.
    pub fn score(&self, features: &[f32]) -> f64 {
        self.weight
            .iter()
            .zip(features)
            .map(|(&w, &f)| w as f64 * f as f64)
            .sum::<f64>()
            + self.bias as f64
    }

    fn check(&self) -> Result<()> {
        if self.weight.len() != FEATURE_DIM {
            return Err(FqaError::invalid(format!(
                "quality head needs {FEATURE_DIM} weights, got {}",
                self.weight.len()
            )));
        }
        if self.weight.iter().chain(std::iter::once(&self.bias)).any(|v| !v.is_finite()) {
            return Err(FqaError::invalid("quality head has non-finite parameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityScore {
    pub value: f64,
}

impl QualityScore {
    pub fn clamped(&self) -> f64 {
        self.value.clamp(0.0, 1.0)
    }
}

/// Tensor names and shapes making up a full extractor.
pub fn extractor_tensor_shapes() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, &(name, cin, cout, k, _)) in CONV_LAYOUT.iter().enumerate() {
        out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        out.push((format!("{name}.bias"), vec![cout]));
        out.push((format!("prelu{}.alpha", i + 1), vec![cout]));
    }
    out.push(("fc.weight".into(), vec![FEATURE_DIM, FLATTEN_DIM]));
    out.push(("fc.bias".into(), vec![FEATURE_DIM]));
    out.push(("prelu5.alpha".into(), vec![FEATURE_DIM]));
    out.push(("landmark.weight".into(), vec![LANDMARK_DIM, FEATURE_DIM]));
    out.push(("landmark.bias".into(), vec![LANDMARK_DIM]));
    out
}

impl MonetWeights {
    /// All-zero weights with the exact layout.
    pub fn zeros() -> Self {
        let convs = CONV_LAYOUT
            .iter()
            .map(|&(_, cin, cout, k, pool)| ConvLayer {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                weight: vec![0.0; cout * cin * k * k],
                bias: vec![0.0; cout],
                prelu: vec![0.0; cout],
                pool,
            })
            .collect();
        MonetWeights {
            convs,
            fc_weight: vec![0.0; FEATURE_DIM * FLATTEN_DIM],
            fc_bias: vec![0.0; FEATURE_DIM],
            fc_prelu: vec![0.0; FEATURE_DIM],
            landmark_weight: vec![0.0; LANDMARK_DIM * FEATURE_DIM],
            landmark_bias: vec![0.0; LANDMARK_DIM],
        }
    }

    /// Seeded He-normal extractor with PReLU slopes 0.25; a stand-in when no
    /// pretrained landmark network is supplied.
    pub fn random(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut w = MonetWeights::zeros();
        let fill = |v: &mut [f32], fan_in: usize, rng: &mut crate::seed::FqaRng| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for x in v.iter_mut() {
                *x = n.sample(rng) as f32;
            }
        };
        for c in &mut w.convs {
            fill(&mut c.weight, c.in_channels * c.kernel * c.kernel, &mut rng);
            for b in c.bias.iter_mut() {
                *b = rng.gen_range(-0.05..0.05);
            }
            c.prelu.iter_mut().for_each(|a| *a = 0.25);
        }
        fill(&mut w.fc_weight, FLATTEN_DIM, &mut rng);
        w.fc_prelu.iter_mut().for_each(|a| *a = 0.25);
        fill(&mut w.landmark_weight, FEATURE_DIM * 64, &mut rng);
        for (i, b) in w.landmark_bias.iter_mut().enumerate() {
            // Start near the mean five-point layout.
            *b = [0.34, 0.66, 0.5, 0.37, 0.63, 0.46, 0.46, 0.64, 0.82, 0.82][i];
        }
        w
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let shapes = extractor_tensor_shapes();
        let mut data: Vec<&[f32]> = Vec::new();
        for c in &self.convs {
            data.push(&c.weight);
            data.push(&c.bias);
            data.push(&c.prelu);
        }
        data.extend([
            &self.fc_weight[..],
            &self.fc_bias,
            &self.fc_prelu,
            &self.landmark_weight,
            &self.landmark_bias,
        ]);
        shapes.into_iter().zip(data).map(|((n, s), d)| (n, s, d)).collect()
    }

    fn slots(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            out.push(&mut c.prelu);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out.push(&mut self.fc_prelu);
        out.push(&mut self.landmark_weight);
        out.push(&mut self.landmark_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

/// Resize a square crop to 48×48 and scale channels with `(v - 127.5) / 128`.
pub fn preprocess(crop: &ImageBuffer) -> Result<FeatureMap> {
    if !crop.is_square() {
        return Err(FqaError::invalid("network input crop must be square"));
    }
    let resized = crop.resize_bilinear(INPUT_SIZE, INPUT_SIZE);
    let mut map = FeatureMap::zeros(3, INPUT_SIZE, INPUT_SIZE);
    let plane = INPUT_SIZE * INPUT_SIZE;
    for (i, px) in resized.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            map.data[c * plane + i] = (px[c] as f32 - 127.5) / 128.0;
        }
    }
    Ok(map)
}

/// Valid (unpadded) stride-1 convolution as one matrix product over
/// unrolled patches.
fn conv_valid(input: &FeatureMap, layer: &ConvLayer) -> FeatureMap {
    let k = layer.kernel;
    let (oh, ow) = (input.height - k + 1, input.width - k + 1);
    let positions = oh * ow;
    let depth = layer.in_channels * k * k;
    // Column-major positions × depth: one contiguous plane per (channel, ky, kx).
    let mut patches = vec![0.0f32; positions * depth];
    let in_plane = input.height * input.width;
    for c in 0..layer.in_channels {
        let src = &input.data[c * in_plane..(c + 1) * in_plane];
        for ky in 0..k {
            for kx in 0..k {
                let col = (c * k + ky) * k + kx;
                let dst = &mut patches[col * positions..(col + 1) * positions];
                for y in 0..oh {
                    dst[y * ow..(y + 1) * ow].copy_from_slice(&src[(y + ky) * input.width + kx..][..ow]);
                }
            }
        }
    }
    let a = nalgebra::DMatrixView::from_slice(&patches, positions, depth);
    // Row-major [out][depth] weights read column-major are depth × out.
    let b = nalgebra::DMatrixView::from_slice(&layer.weight, depth, layer.out_channels);
    let mut data = (a * b).data.as_vec().clone();
    for (o, plane) in data.chunks_mut(positions).enumerate() {
        let bias = layer.bias[o];
        plane.iter_mut().for_each(|v| *v += bias);
    }
    FeatureMap { channels: layer.out_channels, height: oh, width: ow, data }
}

fn prelu_inplace(map: &mut FeatureMap, slopes: &[f32]) {
    let plane = map.height * map.width;
    for (c, chunk) in map.data.chunks_mut(plane).enumerate() {
        let a = slopes[c];
        for v in chunk {
            if *v < 0.0 {
                *v *= a;
            }
        }
    }
}

/// Output length of a stride-2 max pool with ceiling arithmetic.
pub fn pooled_size(n: usize, k: usize) -> usize {
    (n.saturating_sub(k)).div_ceil(2) + 1
}

fn max_pool(input: &FeatureMap, k: usize) -> FeatureMap {
    let (oh, ow) = (pooled_size(input.height, k), pooled_size(input.width, k));
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for yy in 2 * y..(2 * y + k).min(input.height) {
                    for xx in 2 * x..(2 * x + k).min(input.width) {
                        m = m.max(input.at(c, yy, xx));
                    }
                }
                out.data[(c * oh + y) * ow + x] = m;
            }
        }
    }
    out
}

/// Network outputs for one input: the 256-wide post-PReLU fc features and the
/// raw landmark regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: Vec<f32>,
    pub landmarks: [f32; LANDMARK_DIM],
}

pub fn forward(weights: &MonetWeights, input: &FeatureMap) -> Result<ForwardOutput> {
    if (input.channels, input.height, input.width) != (3, INPUT_SIZE, INPUT_SIZE) {
        return Err(FqaError::invalid(format!(
            "network input must be 3x{INPUT_SIZE}x{INPUT_SIZE}, got {}x{}x{}",
            input.channels, input.height, input.width
        )));
    }
    let mut x = input.clone();
    for layer in &weights.convs {
        if layer.in_channels != x.channels {
            return Err(FqaError::invalid("layer channel mismatch"));
        }
        x = conv_valid(&x, layer);
        prelu_inplace(&mut x, &layer.prelu);
        if let Some(k) = layer.pool {
            x = max_pool(&x, k);
        }
    }
    if x.data.len() != FLATTEN_DIM {
        return Err(FqaError::invalid(format!("flatten width {} != {FLATTEN_DIM}", x.data.len())));
    }
    let mut features = vec![0.0f32; FEATURE_DIM];
    for (j, f) in features.iter_mut().enumerate() {
        let row = &weights.fc_weight[j * FLATTEN_DIM..(j + 1) * FLATTEN_DIM];
        let mut acc = weights.fc_bias[j];
        for (w, v) in row.iter().zip(&x.data) {
            acc += w * v;
        }
        *f = if acc < 0.0 { acc * weights.fc_prelu[j] } else { acc };
    }
    let mut landmarks = [0.0f32; LANDMARK_DIM];
    for (j, l) in landmarks.iter_mut().enumerate() {
        let row = &weights.landmark_weight[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
        *l = weights.landmark_bias[j] + row.iter().zip(&features).map(|(w, f)| w * f).sum::<f32>();
    }
    Ok(ForwardOutput { features, landmarks })
}

pub fn forward_features(weights: &MonetWeights, input: &FeatureMap) -> Result<Vec<f32>> {
    forward(weights, input).map(|o| o.features)
}

pub fn crop_features(weights: &MonetWeights, crop: &ImageBuffer) -> Result<Vec<f32>> {
    forward_features(weights, &preprocess(crop)?)
}

/// Features for many crops, computed in parallel and returned in input order.
pub fn batch_features(weights: &MonetWeights, crops: &[ImageBuffer]) -> Result<Vec<Vec<f32>>> {
    crops.par_iter().map(|c| crop_features(weights, c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub landmarks: LandmarkSet,
    pub quality: QualityScore,
    pub features: Vec<f32>,
}

/// One forward pass giving landmarks (in crop pixels) and the quality score.
pub fn predict(weights: &MonetWeights, head: &QualityHead, crop: &ImageBuffer) -> Result<Prediction> {
    let out = forward(weights, &preprocess(crop)?)?;
    let (w, h) = (crop.width() as f64, crop.height() as f64);
    let mut points = [[0.0; 2]; 5];
    for (i, p) in points.iter_mut().enumerate() {
        *p = [out.landmarks[i] as f64 * w, out.landmarks[5 + i] as f64 * h];
    }
    Ok(Prediction {
        landmarks: LandmarkSet::new(points)?,
        quality: QualityScore { value: head.score(&out.features) },
        features: out.features,
    })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Ridge penalty on the weights (not the bias).
    pub weight_decay: f64,
    /// Run SGD on centered, PCA-whitened inputs and fold the transform back
    /// into the returned raw-feature head.
    pub whiten: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 128,
            learning_rate: 0.01,
            epochs: 16,
            seed: 0,
            lr_decay_epochs: vec![8, 12],
            lr_decay_factor: 0.1,
            weight_decay: 1e-4,
            whiten: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FqaError::invalid("batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FqaError::invalid("learning rate must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(FqaError::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: QualityHead,
    /// Full-data objective after each epoch.
    pub loss_trace: Vec<f64>,
}

/// `mean((w·f + b - y)²) + decay·|w|²`
pub fn mse_objective(w: &[f64], b: f64, features: &[Vec<f64>], labels: &[f64], decay: f64) -> f64 {
    let n = features.len() as f64;
    let sq: f64 = features
        .iter()
        .zip(labels)
        .map(|(f, y)| {
            let p: f64 = w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>() + b;
            (p - y).powi(2)
        })
        .sum();
    sq / n + decay * w.iter().map(|v| v * v).sum::<f64>()
}

/// Analytic gradient of [`mse_objective`] over the rows in `batch`.
pub fn mse_gradient(
    w: &[f64],
    b: f64,
    features: &[Vec<f64>],
    labels: &[f64],
    batch: &[usize],
    decay: f64,
) -> (Vec<f64>, f64) {
    let n = batch.len() as f64;
    let mut gw: Vec<f64> = w.iter().map(|v| 2.0 * decay * v).collect();
    let mut gb = 0.0;
    for &i in batch {
        let f = &features[i];
        let p: f64 = w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>() + b;
        let r = 2.0 * (p - labels[i]) / n;
        for (g, x) in gw.iter_mut().zip(f) {
            *g += r * x;
        }
        gb += r;
    }
    (gw, gb)
}

/// Affine change of feature coordinates used during SGD: centering plus
/// PCA whitening, so every retained direction has unit variance.
struct Whitener {
    mean: Vec<f64>,
    /// `d × m`, columns are eigenvectors scaled by `1/sqrt(eigenvalue)`.
    transform: nalgebra::DMatrix<f64>,
}

impl Whitener {
    /// Directions with variance below this fraction of the largest are dropped.
    const RELATIVE_FLOOR: f64 = 1e-9;

    fn fit(features: &[Vec<f64>], enabled: bool) -> Self {
        let d = features[0].len();
        if !enabled {
            return Whitener { mean: vec![0.0; d], transform: nalgebra::DMatrix::identity(d, d) };
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x / n;
            }
        }
        let centered = nalgebra::DMatrix::from_fn(features.len(), d, |i, j| features[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n;
        let eig = cov.symmetric_eigen();
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > top * Self::RELATIVE_FLOOR && top > 0.0).collect();
        let transform = nalgebra::DMatrix::from_fn(d, keep.len(), |r, c| {
            eig.eigenvectors[(r, keep[c])] / eig.eigenvalues[keep[c]].sqrt()
        });
        Whitener { mean, transform }
    }

    fn apply(&self, f: &[f64]) -> Vec<f64> {
        let centered = nalgebra::DVector::from_iterator(f.len(), f.iter().zip(&self.mean).map(|(x, m)| x - m));
        (self.transform.transpose() * centered).iter().copied().collect()
    }

    /// Raw-feature head equivalent to `(w, b)` acting on whitened features.
    fn fold(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let raw: Vec<f64> = (&self.transform * nalgebra::DVector::from_column_slice(w)).iter().copied().collect();
        let shift: f64 = raw.iter().zip(&self.mean).map(|(a, m)| a * m).sum();
        (raw, b - shift)
    }
}

fn to_f64_rows(features: &[Vec<f32>]) -> Vec<Vec<f64>> {
    features.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect()
}

/// Mini-batch SGD on the mean squared error between `head(features)` and
/// `labels`, starting from a zero head. Deterministic for a fixed config seed.
pub fn train_head_on_features(features: &[Vec<f32>], labels: &[f64], config: &TrainingConfig) -> Result<TrainedHead> {
    config.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(FqaError::invalid("training needs a non-empty table with one label per feature row"));
    }
    if labels.iter().any(|v| !v.is_finite()) {
        return Err(FqaError::invalid("labels must be finite"));
    }
    let raw = to_f64_rows(features);
    let whitener = Whitener::fit(&raw, config.whiten);
    let x: Vec<Vec<f64>> = raw.iter().map(|f| whitener.apply(f)).collect();
    let d = x[0].len();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = rng_from_seed(config.seed);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (gw, gb) = mse_gradient(&w, b, &x, labels, batch, config.weight_decay);
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * g;
            }
            b -= lr * gb;
        }
        let loss = mse_objective(&w, b, &x, labels, config.weight_decay);
        if !loss.is_finite() {
            return Err(FqaError::Diverged(format!(
                "non-finite loss at epoch {epoch} (lr {lr}); lower the learning rate"
            )));
        }
        trace.push(loss);
    }
    let (raw_w, raw_b) = whitener.fold(&w, b);
    let head = QualityHead {
        weight: raw_w.iter().map(|&v| v as f32).collect(),
        bias: raw_b as f32,
    };
    head.check()?;
    Ok(TrainedHead { head, loss_trace: trace })
}

/// Ridge solution of `min mean((w·f + b - y)²) + lambda·|w|²` via the centered
/// normal equations (the bias is unpenalized).
pub fn fit_closed_form(features: &[Vec<f32>], labels: &[f64], lambda: f64) -> Result<QualityHead> {
    if features.len() < 2 || features.len() != labels.len() {
        return Err(FqaError::invalid("closed-form fit needs at least 2 rows with one label each"));
    }
    if lambda < 0.0 {
        return Err(FqaError::invalid("ridge lambda must be non-negative"));
    }
    let x = to_f64_rows(features);
    let n = x.len();
    let d = x[0].len();
    let nf = n as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let y_mean = labels.iter().sum::<f64>() / nf;
    let xc = nalgebra::DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let yc = nalgebra::DVector::from_iterator(n, labels.iter().map(|y| y - y_mean));
    let mut gram = xc.transpose() * &xc / nf;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc / nf;
    let scale = gram.diagonal().amax().max(f64::MIN_POSITIVE);
    let singular = || FqaError::Singular("normal equations are singular; use a ridge lambda > 0".into());
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(singular)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_pivot * min_pivot < 1e-12 * scale {
        return Err(singular());
    }
    let w = chol.solve(&rhs);
    let b = y_mean - w.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
    let head = QualityHead {
        weight: w.iter().map(|&v| v as f32).collect(),
        bias: b as f32,
    };
    head.check()?;
    Ok(head)
}

/// Feature rows and labels for a label table: each row's sample is cropped,
/// its recorded augmentation replayed, and the result passed through the
/// frozen extractor.
pub fn table_features(
    weights: &MonetWeights,
    samples: &[FaceSample],
    table: &LabelTable,
    crop: &CropConfig,
) -> Result<(Vec<Vec<f32>>, Vec<f64>)> {
    let by_id: BTreeMap<&str, &FaceSample> = samples.iter().map(|s| (s.source_id.as_str(), s)).collect();
    let features = table
        .rows
        .par_iter()
        .map(|row| {
            let sample = by_id
                .get(row.sample_id.as_str())
                .ok_or_else(|| FqaError::invalid(format!("label row references unknown sample {}", row.sample_id)))?;
            let augmented = replay(&crop.crop(sample)?, &row.augmentation);
            crop_features(weights, &augmented)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((features, table.labels()))
}

pub fn train_quality_head(
    weights: &MonetWeights,
    samples: &[FaceSample],
    table: &LabelTable,
    crop: &CropConfig,
    config: &TrainingConfig,
) -> Result<TrainedHead> {
    if table.rows.is_empty() {
        return Err(FqaError::invalid("label table is empty"));
    }
    let (features, labels) = table_features(weights, samples, table, crop)?;
    train_head_on_features(&features, &labels, config)
}

// ---------------------------------------------------------------------------
// Persistence

pub const QUALITY_WEIGHT: &str = "quality.weight";
pub const QUALITY_BIAS: &str = "quality.bias";

fn head_names(variant: Option<&str>) -> (String, String) {
    match variant {
        None => (QUALITY_WEIGHT.into(), QUALITY_BIAS.into()),
        Some(v) => (format!("quality.{v}.weight"), format!("quality.{v}.bias")),
    }
}

/// Extractor plus any number of quality heads, as stored in one archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub weights: MonetWeights,
    /// Default head (`quality.weight` / `quality.bias`), if present.
    pub head: Option<QualityHead>,
    /// Named variant heads (`quality.<variant>.weight`).
    pub variants: BTreeMap<String, QualityHead>,
}

impl ModelArchive {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::default();
        for (name, shape, data) in self.weights.tensors() {
            archive.put(Tensor::new(name, shape, data.to_vec())?);
        }
        let heads = self.head.iter().map(|h| (None, h)).chain(self.variants.iter().map(|(k, h)| (Some(k.as_str()), h)));
        for (variant, h) in heads {
            h.check()?;
            let (wn, bn) = head_names(variant);
            archive.put(Tensor::new(wn, vec![1, FEATURE_DIM], h.weight.clone())?);
            archive.put(Tensor::new(bn, vec![1], vec![h.bias])?);
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let shapes = extractor_tensor_shapes();
        let expected_list = || {
            let mut names: Vec<String> = shapes.iter().map(|(n, _)| n.clone()).collect();
            names.push(format!("{QUALITY_WEIGHT}, {QUALITY_BIAS}, quality.<variant>.weight, quality.<variant>.bias"));
            names.join(", ")
        };
        let mut weights = MonetWeights::zeros();
        let mut found = vec![false; shapes.len()];
        let mut head_parts: BTreeMap<Option<String>, (Option<Vec<f32>>, Option<f32>)> = BTreeMap::new();
        {
            let mut slots = weights.slots();
            for t in &archive.tensors {
                if let Some(pos) = shapes.iter().position(|(n, _)| *n == t.name) {
                    if t.shape != shapes[pos].1 {
                        return Err(FqaError::Archive(format!(
                            "tensor {} has shape {:?}, expected {:?}",
                            t.name, t.shape, shapes[pos].1
                        )));
                    }
                    *slots[pos] = t.data.clone();
                    found[pos] = true;
                    continue;
                }
                let head_key = t.name.strip_prefix("quality.").and_then(|rest| {
                    if let Some(v) = rest.strip_suffix(".weight") {
                        Some((Some(v.to_string()), true))
                    } else if let Some(v) = rest.strip_suffix(".bias") {
                        Some((Some(v.to_string()), false))
                    } else if rest == "weight" {
                        Some((None, true))
                    } else if rest == "bias" {
                        Some((None, false))
                    } else {
                        None
                    }
                });
                let Some((variant, is_weight)) = head_key else {
                    return Err(FqaError::Archive(format!(
                        "unknown tensor name {}; expected names: {}",
                        t.name,
                        expected_list()
                    )));
                };
                let entry = head_parts.entry(variant).or_default();
                if is_weight {
                    if t.data.len() != FEATURE_DIM {
                        return Err(FqaError::Archive(format!(
                            "tensor {} has shape {:?}, expected [1, {FEATURE_DIM}]",
                            t.name, t.shape
                        )));
                    }
                    entry.0 = Some(t.data.clone());
                } else {
                    if t.data.len() != 1 {
                        return Err(FqaError::Archive(format!("tensor {} has shape {:?}, expected [1]", t.name, t.shape)));
                    }
                    entry.1 = Some(t.data[0]);
                }
            }
        }
        if let Some(pos) = found.iter().position(|f| !f) {
            return Err(FqaError::Archive(format!("archive is missing tensor {}", shapes[pos].0)));
        }
        if !weights.is_finite() {
            return Err(FqaError::Archive("extractor weights contain non-finite values".into()));
        }
        let mut head = None;
        let mut variants = BTreeMap::new();
        for (variant, parts) in head_parts {
            let (Some(weight), Some(bias)) = parts else {
                return Err(FqaError::Archive(format!(
                    "quality head {} needs both weight and bias",
                    variant.as_deref().unwrap_or("<default>")
                )));
            };
            let h = QualityHead { weight, bias };
            match variant {
                None => head = Some(h),
                Some(v) => {
                    variants.insert(v, h);
                }
            }
        }
        Ok(ModelArchive { weights, head, variants })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelArchive::from_archive(&TensorArchive::read_file(path)?)
    }
}

pub fn save_weights(weights: &MonetWeights, head: &QualityHead, path: &Path) -> Result<()> {
    ModelArchive {
        weights: weights.clone(),
        head: Some(head.clone()),
        variants: BTreeMap::new(),
    }
    .save(path)
}

/// Load the extractor and the default head (a zero head when the archive holds none).
pub fn load_weights(path: &Path) -> Result<(MonetWeights, QualityHead)> {
    let m = ModelArchive::load(path)?;
    Ok((m.weights, m.head.unwrap_or_else(QualityHead::zeros)))
}
