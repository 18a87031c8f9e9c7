//! Recognition backends, similarity scoring and quality-label generation.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::augmentation::{apply_training_augmentation, AppliedAugmentation, AugmentationSpec, TrainingMode};
use crate::data::{CropConfig, FaceSample, ImageBuffer};
use crate::error::{FqaError, Result};
use crate::seed::{derive_seed, rng_for};

pub const EMBEDDING_DIM: usize = 512;
const ORACLE_GRID: usize = 16;

/// Unit-norm identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// L2-normalize `values`. Fails on non-finite or zero-norm input.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FqaError::invalid("embedding has non-finite components"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return Err(FqaError::DegenerateEmbedding);
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    SimilarityHighIsBetter,
    DistanceLowIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub polarity: Polarity,
}

impl SimilarityScore {
    pub fn similarity(value: f64) -> Self {
        SimilarityScore {
            value,
            polarity: Polarity::SimilarityHighIsBetter,
        }
    }

    pub fn distance(value: f64) -> Self {
        SimilarityScore {
            value,
            polarity: Polarity::DistanceLowIsBetter,
        }
    }
}

/// Map any score into high-is-better orientation: similarities pass through,
/// distances are negated.
pub fn normalize_score(s: SimilarityScore) -> f64 {
    match s.polarity {
        Polarity::SimilarityHighIsBetter => s.value,
        Polarity::DistanceLowIsBetter => -s.value,
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> SimilarityScore {
    SimilarityScore::similarity(a.dot(b).clamp(-1.0, 1.0))
}

/// How a backend turns two embeddings into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Cosine similarity.
    Cosine,
    /// `1 - cosine`.
    CosineDistance,
    /// Euclidean distance between unit embeddings.
    Euclidean,
}

impl Metric {
    pub fn polarity(self) -> Polarity {
        match self {
            Metric::Cosine => Polarity::SimilarityHighIsBetter,
            Metric::CosineDistance | Metric::Euclidean => Polarity::DistanceLowIsBetter,
        }
    }

    pub fn compare(self, a: &EmbeddingVector, b: &EmbeddingVector) -> SimilarityScore {
        match self {
            Metric::Cosine => cosine_similarity(a, b),
            Metric::CosineDistance => SimilarityScore::distance(1.0 - cosine_similarity(a, b).value),
            Metric::Euclidean => {
                let d2: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
                SimilarityScore::distance(d2.sqrt())
            }
        }
    }
}

/// A face recognizer that maps images to embeddings.
///
/// `key` identifies the image (sample id, optionally suffixed by the distortion
/// applied); file-backed backends look embeddings up by it, computing backends
/// ignore it.
pub trait RecognitionBackend: Send + Sync {
    fn name(&self) -> &str;

    fn metric(&self) -> Metric;

    fn embed(&self, image: &ImageBuffer, key: &str) -> Result<EmbeddingVector>;

    fn polarity(&self) -> Polarity {
        self.metric().polarity()
    }

    fn compare(&self, a: &EmbeddingVector, b: &EmbeddingVector) -> SimilarityScore {
        self.metric().compare(a, b)
    }
}

/// Key for the distorted version of a sample.
pub fn distorted_key(sample_id: &str, tag: &str) -> String {
    format!("{sample_id}#{tag}")
}

/// Deterministic stand-in recognizer: grayscale, 16×16 area average, mean
/// removal, L2 normalization, zero-padded to 512 components.
#[derive(Debug, Clone)]
pub struct SyntheticOracleEmbedder {
    name: String,
    metric: Metric,
}

impl Default for SyntheticOracleEmbedder {
    fn default() -> Self {
        SyntheticOracleEmbedder {
            name: "oracle".into(),
            metric: Metric::Cosine,
        }
    }
}

impl SyntheticOracleEmbedder {
    /// Same embeddings, scored as `1 - cosine` (distance polarity).
    pub fn as_distance() -> Self {
        SyntheticOracleEmbedder {
            name: "oracle_distance".into(),
            metric: Metric::CosineDistance,
        }
    }

    pub fn with_metric(name: impl Into<String>, metric: Metric) -> Self {
        SyntheticOracleEmbedder {
            name: name.into(),
            metric,
        }
    }
}

/// Area-weighted average of a `w × h` plane onto an `n × n` grid.
fn area_average(plane: &[f64], w: usize, h: usize, n: usize) -> Vec<f64> {
    // Per-axis overlap weights between output cells and input pixels.
    let weights = |len: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = len as f64 / n as f64;
        (0..n)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(len);
                (first..last)
                    .filter_map(|i| {
                        let ov = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        (ov > 0.0).then_some((i, ov / scale))
                    })
                    .collect()
            })
            .collect()
    };
    let wx = weights(w);
    let wy = weights(h);
    let mut out = vec![0.0; n * n];
    for (oy, rows) in wy.iter().enumerate() {
        for (ox, cols) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, fy) in rows {
                for &(x, fx) in cols {
                    acc += fy * fx * plane[y * w + x];
                }
            }
            out[oy * n + ox] = acc;
        }
    }
    out
}

pub fn oracle_embed(image: &ImageBuffer) -> Result<EmbeddingVector> {
    let gray = image.grayscale();
    let grid = area_average(&gray, image.width(), image.height(), ORACLE_GRID);
    let mean = grid.iter().sum::<f64>() / grid.len() as f64;
    let mut values: Vec<f64> = grid.iter().map(|v| v - mean).collect();
    values.resize(EMBEDDING_DIM, 0.0);
    EmbeddingVector::normalized(values)
}

impl RecognitionBackend for SyntheticOracleEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn embed(&self, image: &ImageBuffer, _key: &str) -> Result<EmbeddingVector> {
        oracle_embed(image)
    }
}

/// Embeddings produced offline by an external recognizer, stored in a tensor
/// archive whose tensor names are the image keys.
#[derive(Debug, Clone)]
pub struct PrecomputedBackend {
    name: String,
    metric: Metric,
    embeddings: HashMap<String, EmbeddingVector>,
}

impl PrecomputedBackend {
    pub fn new(name: impl Into<String>, metric: Metric, embeddings: HashMap<String, EmbeddingVector>) -> Self {
        PrecomputedBackend {
            name: name.into(),
            metric,
            embeddings,
        }
    }

    pub fn load(path: &Path, name: impl Into<String>, metric: Metric) -> Result<Self> {
        let archive = TensorArchive::read_file(path)?;
        let mut embeddings = HashMap::new();
        for t in archive.tensors {
            let values = t.data.iter().map(|&v| v as f64).collect();
            let e = EmbeddingVector::normalized(values)
                .map_err(|e| FqaError::Archive(format!("embedding {}: {e}", t.name)))?;
            embeddings.insert(t.name, e);
        }
        Ok(PrecomputedBackend::new(name, metric, embeddings))
    }
}

impl RecognitionBackend for PrecomputedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn embed(&self, _image: &ImageBuffer, key: &str) -> Result<EmbeddingVector> {
        self.embeddings
            .get(key)
            .cloned()
            .ok_or_else(|| FqaError::MissingEmbedding(key.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub record_id: String,
    pub identity: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestMatch {
    pub score: SimilarityScore,
    pub identity: String,
    pub record_id: String,
}

/// Best score of `probe` against the gallery, skipping the probe's own record.
pub fn best_match_score(
    probe: &EmbeddingVector,
    probe_record_id: &str,
    gallery: &[GalleryEntry],
    metric: Metric,
) -> Result<BestMatch> {
    let mut best: Option<(f64, &GalleryEntry, SimilarityScore)> = None;
    for entry in gallery.iter().filter(|e| e.record_id != probe_record_id) {
        let s = metric.compare(probe, &entry.embedding);
        let n = normalize_score(s);
        if best.as_ref().is_none_or(|(b, _, _)| n > *b) {
            best = Some((n, entry, s));
        }
    }
    let (_, entry, score) =
        best.ok_or_else(|| FqaError::invalid("gallery is empty once the probe's own record is excluded"))?;
    Ok(BestMatch {
        score,
        identity: entry.identity.clone(),
        record_id: entry.record_id.clone(),
    })
}

pub fn self_similarity(
    backend: &dyn RecognitionBackend,
    original: &ImageBuffer,
    original_key: &str,
    distorted: &ImageBuffer,
    distorted_key: &str,
) -> Result<SimilarityScore> {
    let a = backend.embed(original, original_key)?;
    let b = backend.embed(distorted, distorted_key)?;
    Ok(backend.compare(&a, &b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Augmented crop against its own undistorted original.
    #[default]
    SelfSimilarity,
    /// Augmented crop against the best other record of the same identity.
    IdentityBestMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub sample_id: String,
    pub augmentation: AppliedAugmentation,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelTable {
    pub rows: Vec<LabelRow>,
    pub skipped: usize,
}

impl LabelTable {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::data::write_lines(path, &self.rows)
    }

    pub fn read_jsonl(path: &Path) -> Result<LabelTable> {
        Ok(LabelTable {
            rows: crate::data::read_jsonl(path)?,
            skipped: 0,
        })
    }

    pub fn labels(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

fn is_skippable(e: &FqaError) -> bool {
    matches!(e, FqaError::DegenerateEmbedding | FqaError::MissingEmbedding(_))
}

/// Augment every sample and label it with its normalized recognition score.
///
/// Sample `i` uses the generator seeded with `seed ^ i`. Samples whose embedding
/// is degenerate or unavailable are skipped and counted.
pub fn generate_labels(
    samples: &[FaceSample],
    backend: &dyn RecognitionBackend,
    spec: &AugmentationSpec,
    mode: TrainingMode,
    label_mode: LabelMode,
    crop: &CropConfig,
    seed: u64,
) -> Result<LabelTable> {
    spec.validate()?;
    let originals: Vec<Result<EmbeddingVector>> = match label_mode {
        LabelMode::SelfSimilarity => Vec::new(),
        LabelMode::IdentityBestMatch => samples
            .par_iter()
            .map(|s| backend.embed(&crop.crop(s)?, &s.source_id))
            .collect(),
    };

    let rows: Vec<Result<Option<LabelRow>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let original = crop.crop(sample)?;
            let mut rng = rng_for(seed, i as u64);
            let (augmented, mut record) = apply_training_augmentation(&original, spec, mode, &mut rng)?;
            record.seed = derive_seed(seed, i as u64);
            let aug_key = distorted_key(&sample.source_id, mode.as_str());
            let score = match label_mode {
                LabelMode::SelfSimilarity => {
                    self_similarity(backend, &original, &sample.source_id, &augmented, &aug_key)
                }
                LabelMode::IdentityBestMatch => backend.embed(&augmented, &aug_key).and_then(|probe| {
                    let gallery: Vec<GalleryEntry> = samples
                        .iter()
                        .zip(&originals)
                        .filter(|(s, _)| s.identity == sample.identity)
                        .filter_map(|(s, e)| {
                            e.as_ref().ok().map(|e| GalleryEntry {
                                record_id: s.source_id.clone(),
                                identity: s.identity.clone(),
                                embedding: e.clone(),
                            })
                        })
                        .collect();
                    best_match_score(&probe, &sample.source_id, &gallery, backend.metric())
                        .map(|m| m.score)
                        .map_err(|_| FqaError::MissingEmbedding(format!("{} has no same-identity match", sample.source_id)))
                }),
            };
            match score {
                Ok(s) => Ok(Some(LabelRow {
                    sample_id: sample.source_id.clone(),
                    augmentation: record,
                    label: normalize_score(s),
                })),
                Err(e) if is_skippable(&e) => {
                    warn!("skipping {}: {e}", sample.source_id);
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut table = LabelTable::default();
    for r in rows {
        match r? {
            Some(row) => table.rows.push(row),
            None => table.skipped += 1,
        }
    }
    if table.skipped > 0 {
        warn!("label generation skipped {} sample(s)", table.skipped);
    }
    Ok(table)
}

/// Stack `rounds` independent augmentation passes over `samples`.
///
/// Round `r` draws sample `i` from item index `(r << 40) | i`, so round 0 is
/// exactly [`generate_labels`] and more rounds only append rows.
#[allow(clippy::too_many_arguments)]
pub fn generate_label_rounds(
    samples: &[FaceSample],
    backend: &dyn RecognitionBackend,
    spec: &AugmentationSpec,
    mode: TrainingMode,
    label_mode: LabelMode,
    crop: &CropConfig,
    rounds: usize,
    seed: u64,
) -> Result<LabelTable> {
    let mut table = LabelTable::default();
    for r in 0..rounds as u64 {
        let t = generate_labels(samples, backend, spec, mode, label_mode, crop, seed ^ (r << 40))?;
        table.rows.extend(t.rows);
        table.skipped += t.skipped;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{gaussian_blur, sigma_for_kernel};
    use crate::synth::textured_face;

    fn unit(v: &[f64]) -> EmbeddingVector {
        let mut full = v.to_vec();
        full.resize(EMBEDDING_DIM, 0.0);
        EmbeddingVector::normalized(full).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let a = unit(&[1.0, 2.0, 2.0]);
        let b = unit(&[2.0, 1.0, 2.0]);
        // (1*2 + 2*1 + 2*2) / (3 * 3) = 8/9
        assert!((cosine_similarity(&a, &b).value - 8.0 / 9.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a).value - 1.0).abs() < 1e-12);
        let x = unit(&[1.0, 0.0]);
        let y = unit(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&x, &y).value, 0.0);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (img, _) = textured_face(3, 0, 112);
        let e = oracle_embed(&img).unwrap();
        assert_eq!(e.values().len(), EMBEDDING_DIM);
        let n: f64 = e.values().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(oracle_embed(&img).unwrap(), e);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = ImageBuffer::filled(112, 112, [128, 128, 128]);
        assert!(matches!(oracle_embed(&img), Err(FqaError::DegenerateEmbedding)));
        let black = ImageBuffer::filled(112, 112, [0, 0, 0]);
        let (face, _) = textured_face(1, 0, 112);
        let backend = SyntheticOracleEmbedder::default();
        assert!(self_similarity(&backend, &face, "a", &black, "b").is_err());
    }

    #[test]
    fn area_average_of_integer_blocks() {
        let plane: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = area_average(&plane, 4, 4, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn blur_monotonically_lowers_oracle_similarity() {
        let backend = SyntheticOracleEmbedder::default();
        for id in 0..5 {
            let (img, _) = textured_face(id, 0, 112);
            let mut prev = 1.0;
            for k in (3..=21).step_by(2) {
                let blurred = gaussian_blur(&img, k, sigma_for_kernel(k));
                let s = self_similarity(&backend, &img, "a", &blurred, "b").unwrap().value;
                assert!(s <= prev + 1e-6, "id {id} k {k}: {s} > {prev}");
                prev = s;
            }
        }
    }

    #[test]
    fn best_match_excludes_own_record() {
        let probe = unit(&[1.0, 0.0, 0.0]);
        let v = unit(&[0.6, 0.8, 0.0]);
        let gallery = vec![
            GalleryEntry { record_id: "p".into(), identity: "a".into(), embedding: probe.clone() },
            GalleryEntry { record_id: "q".into(), identity: "b".into(), embedding: v.clone() },
        ];
        let m = best_match_score(&probe, "p", &gallery, Metric::Cosine).unwrap();
        assert!((m.score.value - 0.6).abs() < 1e-12);
        assert_eq!(m.identity, "b");
        // Same vector under a different record id is a legitimate perfect match.
        let m = best_match_score(&probe, "other", &gallery, Metric::Cosine).unwrap();
        assert!((m.score.value - 1.0).abs() < 1e-12);
        assert!(best_match_score(&probe, "p", &gallery[..1], Metric::Cosine).is_err());
    }

    #[test]
    fn best_match_equals_brute_force_max() {
        let probe = unit(&[0.3, -0.2, 0.9, 0.1]);
        let vs = [
            [0.1, 0.2, 0.3, 0.4],
            [-0.5, 0.1, 0.7, 0.0],
            [0.9, 0.0, 0.1, 0.2],
            [0.3, -0.2, 0.8, 0.2],
            [0.0, 1.0, 0.0, 0.0],
        ];
        let gallery: Vec<GalleryEntry> = vs
            .iter()
            .enumerate()
            .map(|(i, v)| GalleryEntry { record_id: format!("r{i}"), identity: format!("i{i}"), embedding: unit(v) })
            .collect();
        let brute = gallery
            .iter()
            .map(|g| probe.values().iter().zip(g.embedding.values()).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let m = best_match_score(&probe, "probe", &gallery, Metric::Cosine).unwrap();
        assert!((m.score.value - brute).abs() < 1e-12);
        assert_eq!(m.record_id, "r3");
        // Distance polarity picks the same entry.
        let d = best_match_score(&probe, "probe", &gallery, Metric::CosineDistance).unwrap();
        assert_eq!(d.record_id, "r3");
    }

    #[test]
    fn normalize_score_orientation() {
        assert_eq!(normalize_score(SimilarityScore::similarity(0.7)), 0.7);
        assert_eq!(normalize_score(SimilarityScore::distance(0.0)), 0.0);
        assert!(normalize_score(SimilarityScore::distance(0.3)) < 0.0);
    }

    #[test]
    fn label_rounds_extend_single_round() {
        let samples = crate::synth::synthetic_samples(3, 2);
        let (spec, crop) = (AugmentationSpec::default(), CropConfig::default());
        let backend = SyntheticOracleEmbedder::default();
        let gen = |rounds| {
            generate_label_rounds(&samples, &backend, &spec, TrainingMode::Bro, LabelMode::SelfSimilarity, &crop, rounds, 5)
                .unwrap()
        };
        let single = generate_labels(&samples, &backend, &spec, TrainingMode::Bro, LabelMode::SelfSimilarity, &crop, 5).unwrap();
        assert_eq!(gen(1), single);
        let three = gen(3);
        assert_eq!(three.rows.len(), 3 * single.rows.len());
        assert_eq!(three.rows[..single.rows.len()], single.rows[..]);
        // Later rounds draw different augmentations.
        assert_ne!(three.rows[single.rows.len()..2 * single.rows.len()], single.rows[..]);
    }

    proptest::proptest! {
        #[test]
        fn distance_ranking_reverses(values in proptest::collection::vec(0.0f64..4.0, 2..40)) {
            let mut by_norm: Vec<usize> = (0..values.len()).collect();
            by_norm.sort_by(|&a, &b| normalize_score(SimilarityScore::distance(values[b]))
                .total_cmp(&normalize_score(SimilarityScore::distance(values[a]))).then(a.cmp(&b)));
            let mut by_raw: Vec<usize> = (0..values.len()).collect();
            by_raw.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
            proptest::prop_assert_eq!(by_norm, by_raw);
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(a in proptest::collection::vec(-1.0f64..1.0, 8), b in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let (Ok(a), Ok(b)) = (EmbeddingVector::normalized(a), EmbeddingVector::normalized(b)) else { return Ok(()) };
            let ab = cosine_similarity(&a, &b).value;
            proptest::prop_assert_eq!(ab, cosine_similarity(&b, &a).value);
            proptest::prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
