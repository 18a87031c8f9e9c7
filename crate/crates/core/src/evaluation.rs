//! Attack-based evaluation: distorted probes, predicted quality against
//! recognition scores, Pearson grids and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{make_eval_attack, AppliedAugmentation, EvalAttack};
use crate::data::{CropConfig, FaceSample, ImageBuffer};
use crate::error::{FqaError, Result};
use crate::monet::{crop_features, MonetWeights, QualityHead};
use crate::recognition::{
    best_match_score, distorted_key, normalize_score, EmbeddingVector, GalleryEntry, Polarity, RecognitionBackend,
};
use crate::seed::rng_for;

pub const SHARPNESS: &str = "sharpness";
pub const CONTRAST: &str = "contrast";
pub const BASELINES: [&str; 2] = [SHARPNESS, CONTRAST];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub n: usize,
    pub negated: bool,
}

/// Product-moment correlation by the two-pass (mean first, then centered sums) method.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult> {
    if x.len() != y.len() {
        return Err(FqaError::invalid(format!("pearson inputs differ in length: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(FqaError::UndefinedCorrelation(format!("need at least 2 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(FqaError::invalid("pearson inputs must be finite"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(FqaError::UndefinedCorrelation("an input has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(PearsonResult { r, n, negated: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Match,
    #[serde(rename = "self")]
    SelfScore,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 2] = [ScoreKind::Match, ScoreKind::SelfScore];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Match => "match",
            ScoreKind::SelfScore => "self",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub dataset: String,
    pub attack: EvalAttack,
    pub augmentation: AppliedAugmentation,
    /// Quality per model variant, plus the classical baselines.
    pub predicted: BTreeMap<String, f64>,
    /// High-is-better normalized scores.
    pub match_score: f64,
    pub self_score: f64,
    /// Scores as the backend produced them.
    pub raw_match: f64,
    pub raw_self: f64,
    pub polarity: Polarity,
    pub backend: String,
}

impl EvalRecord {
    pub fn normalized(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Match => self.match_score,
            ScoreKind::SelfScore => self.self_score,
        }
    }

    pub fn raw(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Match => self.raw_match,
            ScoreKind::SelfScore => self.raw_self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityHandling {
    /// Correlate against high-is-better normalized scores.
    Normalized,
    /// Correlate against raw scores and negate r for distance backends.
    #[default]
    RawWithNegation,
}

/// Everything a sweep needs besides the samples.
pub struct EvalModels<'a> {
    pub weights: &'a MonetWeights,
    /// Heads keyed by variant name.
    pub heads: &'a BTreeMap<String, QualityHead>,
    pub baselines: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub skipped: Vec<String>,
}

fn attack_key(sample_id: &str, attack: EvalAttack) -> String {
    match attack {
        EvalAttack::None => sample_id.to_string(),
        a => distorted_key(sample_id, a.as_str()),
    }
}

/// Distort every sample with every attack and score the result.
///
/// Item `(i, attack)` draws from the generator seeded with
/// `seed ^ (4 i + attack ordinal)`. Per-item failures are logged and skipped.
pub fn run_attack_eval(
    samples: &[FaceSample],
    dataset: &str,
    models: &EvalModels<'_>,
    backend: &dyn RecognitionBackend,
    attacks: &[EvalAttack],
    crop: &CropConfig,
    seed: u64,
) -> Result<EvalRun> {
    if samples.is_empty() {
        return Err(FqaError::invalid("evaluation split is empty"));
    }
    let crops: Vec<Result<ImageBuffer>> = samples.par_iter().map(|s| crop.crop(s)).collect();
    let originals: Vec<Result<EmbeddingVector>> = samples
        .par_iter()
        .zip(&crops)
        .map(|(s, c)| match c {
            Ok(c) => backend.embed(c, &s.source_id),
            Err(e) => Err(FqaError::invalid(e.to_string())),
        })
        .collect();
    let gallery: Vec<GalleryEntry> = samples
        .iter()
        .zip(&originals)
        .filter_map(|(s, e)| {
            e.as_ref().ok().map(|e| GalleryEntry {
                record_id: s.source_id.clone(),
                identity: s.identity.clone(),
                embedding: e.clone(),
            })
        })
        .collect();

    let items: Vec<(usize, EvalAttack)> =
        (0..samples.len()).flat_map(|i| attacks.iter().map(move |&a| (i, a))).collect();
    let outcomes: Vec<std::result::Result<EvalRecord, String>> = items
        .par_iter()
        .map(|&(i, attack)| {
            let sample = &samples[i];
            let item = || -> Result<EvalRecord> {
                let original = crops[i].as_ref().map_err(|e| FqaError::invalid(e.to_string()))?;
                let original_emb = originals[i].as_ref().map_err(|e| FqaError::invalid(e.to_string()))?;
                let item_seed = (i as u64) * 4 + attack.ordinal();
                let mut rng = rng_for(seed, item_seed);
                let (probe, mut augmentation) = match attack {
                    EvalAttack::None => (original.clone(), AppliedAugmentation::default()),
                    a => make_eval_attack(original, a, &mut rng),
                };
                augmentation.seed = crate::seed::derive_seed(seed, item_seed);

                let features = crop_features(models.weights, &probe)?;
                let mut predicted: BTreeMap<String, f64> =
                    models.heads.iter().map(|(name, h)| (name.clone(), h.score(&features))).collect();
                if models.baselines {
                    predicted.insert(SHARPNESS.into(), baseline_sharpness(&probe));
                    predicted.insert(CONTRAST.into(), baseline_contrast(&probe));
                }

                let probe_emb = backend.embed(&probe, &attack_key(&sample.source_id, attack))?;
                let self_raw = backend.compare(original_emb, &probe_emb);
                let best = best_match_score(&probe_emb, &sample.source_id, &gallery, backend.metric())?;
                Ok(EvalRecord {
                    sample_id: sample.source_id.clone(),
                    dataset: dataset.to_string(),
                    attack,
                    augmentation,
                    predicted,
                    match_score: normalize_score(best.score),
                    self_score: normalize_score(self_raw),
                    raw_match: best.score.value,
                    raw_self: self_raw.value,
                    polarity: backend.polarity(),
                    backend: backend.name().to_string(),
                })
            };
            item().map_err(|e| {
                let msg = format!("{} [{}]: {e}", sample.source_id, attack.as_str());
                warn!("evaluation skipped {msg}");
                msg
            })
        })
        .collect();

    let mut run = EvalRun { records: Vec::new(), skipped: Vec::new() };
    for o in outcomes {
        match o {
            Ok(r) => run.records.push(r),
            Err(msg) => run.skipped.push(msg),
        }
    }
    Ok(run)
}

/// Correlation between one model's predicted quality and a score kind.
pub fn correlate(
    records: &[&EvalRecord],
    model: &str,
    kind: ScoreKind,
    handling: PolarityHandling,
) -> Result<PearsonResult> {
    let mut q = Vec::with_capacity(records.len());
    let mut s = Vec::with_capacity(records.len());
    let mut distance = false;
    for r in records {
        let Some(&p) = r.predicted.get(model) else {
            continue;
        };
        q.push(p);
        match handling {
            PolarityHandling::Normalized => s.push(r.normalized(kind)),
            PolarityHandling::RawWithNegation => {
                s.push(r.raw(kind));
                distance |= r.polarity == Polarity::DistanceLowIsBetter;
            }
        }
    }
    let mut result = pearson(&q, &s)?;
    if distance {
        result.r = -result.r;
        result.negated = true;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEffectRow {
    pub backend: String,
    pub dataset: String,
    pub attack: EvalAttack,
    pub n: usize,
    pub mean_match: f64,
    pub mean_self: f64,
}

/// Mean normalized scores per (backend, dataset, attack).
pub fn attack_effect_table(records: &[EvalRecord]) -> Vec<AttackEffectRow> {
    let mut sums: BTreeMap<(String, String, EvalAttack), (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let e = sums.entry((r.backend.clone(), r.dataset.clone(), r.attack)).or_default();
        e.0 += 1;
        e.1 += r.match_score;
        e.2 += r.self_score;
    }
    sums.into_iter()
        .map(|((backend, dataset, attack), (n, m, s))| AttackEffectRow {
            backend,
            dataset,
            attack,
            n,
            mean_match: m / n as f64,
            mean_self: s / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub backend: String,
    pub dataset: String,
    pub attack: EvalAttack,
    pub score_kind: ScoreKind,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r: Option<f64>,
    pub n: usize,
    pub negated: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
    /// Best head in its row (baselines are not ranked).
    pub best: bool,
    pub second: bool,
}

/// Pearson cells for every (backend, dataset, attack, score kind, model)
/// present in `records`, restricted to `models`. Trained heads are ranked per row.
pub fn correlation_grid(records: &[EvalRecord], models: &[String], handling: PolarityHandling) -> Vec<GridCell> {
    let mut groups: BTreeMap<(String, String, EvalAttack), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.backend.clone(), r.dataset.clone(), r.attack)).or_default().push(r);
    }
    let mut cells = Vec::new();
    for ((backend, dataset, attack), rows) in &groups {
        for kind in ScoreKind::ALL {
            let start = cells.len();
            for model in models {
                let (r, n, negated, skipped) = match correlate(rows, model, kind, handling) {
                    Ok(p) => (Some(p.r), p.n, p.negated, None),
                    Err(e) => (None, rows.len(), false, Some(e.to_string())),
                };
                cells.push(GridCell {
                    backend: backend.clone(),
                    dataset: dataset.clone(),
                    attack: *attack,
                    score_kind: kind,
                    model: model.clone(),
                    r,
                    n,
                    negated,
                    skipped,
                    best: false,
                    second: false,
                });
            }
            rank_row(&mut cells[start..]);
        }
    }
    cells
}

fn rank_row(row: &mut [GridCell]) {
    let mut ranked: Vec<usize> = (0..row.len())
        .filter(|&i| row[i].r.is_some() && !BASELINES.contains(&row[i].model.as_str()))
        .collect();
    // Stable sort keeps model order for exact ties.
    ranked.sort_by(|&a, &b| row[b].r.unwrap().total_cmp(&row[a].r.unwrap()));
    if let Some(&i) = ranked.first() {
        row[i].best = true;
    }
    if let Some(&i) = ranked.get(1) {
        row[i].second = true;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub backends: Vec<String>,
    pub datasets: Vec<String>,
    pub attacks: Vec<EvalAttack>,
    pub models: Vec<String>,
    pub polarity_handling: PolarityHandling,
    pub records: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub cells: Vec<GridCell>,
    pub attack_effects: Vec<AttackEffectRow>,
}

impl EvalReport {
    pub fn cell(&self, backend: &str, attack: EvalAttack, kind: ScoreKind, model: &str) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.backend == backend && c.attack == attack && c.score_kind == kind && c.model == model)
    }
}

/// Assemble a report from evaluation records.
pub fn build_report(
    records: &[EvalRecord],
    skipped: usize,
    models: &[String],
    handling: PolarityHandling,
    seed: u64,
    config_hash: &str,
) -> EvalReport {
    let backends: BTreeSet<&str> = records.iter().map(|r| r.backend.as_str()).collect();
    let datasets: BTreeSet<&str> = records.iter().map(|r| r.dataset.as_str()).collect();
    let attacks: BTreeSet<EvalAttack> = records.iter().map(|r| r.attack).collect();
    EvalReport {
        metadata: ReportMetadata {
            seed,
            config_hash: config_hash.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            backends: backends.into_iter().map(String::from).collect(),
            datasets: datasets.into_iter().map(String::from).collect(),
            attacks: attacks.into_iter().collect(),
            models: models.to_vec(),
            polarity_handling: handling,
            records: records.len(),
            skipped,
        },
        cells: correlation_grid(records, models, handling),
        attack_effects: attack_effect_table(records),
    }
}

/// Evaluate every head (and baselines) under the given attacks and build the
/// ranked grid.
#[allow(clippy::too_many_arguments)]
pub fn ablation_eval(
    samples: &[FaceSample],
    dataset: &str,
    models: &EvalModels<'_>,
    backend: &dyn RecognitionBackend,
    attacks: &[EvalAttack],
    crop: &CropConfig,
    seed: u64,
) -> Result<(EvalRun, EvalReport)> {
    let run = run_attack_eval(samples, dataset, models, backend, attacks, crop, seed)?;
    let mut names: Vec<String> = models.heads.keys().cloned().collect();
    if models.baselines {
        names.extend(BASELINES.iter().map(|s| s.to_string()));
    }
    let report = build_report(&run.records, run.skipped.len(), &names, PolarityHandling::default(), seed, "");
    Ok((run, report))
}

/// Variance of the 4-neighbour Laplacian over interior pixels divided by the
/// squared mean intensity. A rough focus measure, not a published metric.
pub fn baseline_sharpness(image: &ImageBuffer) -> f64 {
    let (w, h) = (image.width(), image.height());
    let g = image.grayscale();
    let mean = g.iter().sum::<f64>() / g.len().max(1) as f64;
    if w < 3 || h < 3 || mean == 0.0 {
        return 0.0;
    }
    let mut resp = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = g[y * w + x];
            resp.push(g[y * w + x - 1] + g[y * w + x + 1] + g[(y - 1) * w + x] + g[(y + 1) * w + x] - 4.0 * c);
        }
    }
    let m = resp.iter().sum::<f64>() / resp.len() as f64;
    let var = resp.iter().map(|v| (v - m).powi(2)).sum::<f64>() / resp.len() as f64;
    var / (mean * mean)
}

/// RMS deviation of intensity from its mean, divided by 128.
pub fn baseline_contrast(image: &ImageBuffer) -> f64 {
    let g = image.grayscale();
    if g.is_empty() {
        return 0.0;
    }
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g.len() as f64).sqrt() / 128.0
}

pub const REPORT_JSON: &str = "report.json";
pub const GRID_CSV: &str = "correlations.csv";
pub const EFFECT_CSV: &str = "attack_effects.csv";
pub const RECORDS_JSONL: &str = "records.jsonl";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| FqaError::io(path, e))
}

pub fn grid_csv(report: &EvalReport) -> String {
    let mut out = String::from("backend,dataset,attack,score_kind,model,r,n,negated,best,second,skipped\n");
    for c in &report.cells {
        let r = c.r.map(|v| format!("{v:.6}")).unwrap_or_default();
        let skipped = c.skipped.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{r},{},{},{},{},{skipped}",
            c.backend,
            c.dataset,
            c.attack.as_str(),
            c.score_kind.as_str(),
            c.model,
            c.n,
            c.negated,
            c.best,
            c.second
        );
    }
    out
}

pub fn effect_csv(report: &EvalReport) -> String {
    let mut out = String::from("backend,dataset,attack,n,mean_match,mean_self\n");
    for e in &report.attack_effects {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            e.backend,
            e.dataset,
            e.attack.as_str(),
            e.n,
            e.mean_match,
            e.mean_self
        );
    }
    out
}

/// Write the CSV tables for a report; returns the paths written.
pub fn write_csvs(report: &EvalReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let grid = dir.join(GRID_CSV);
    let effect = dir.join(EFFECT_CSV);
    write_file(&grid, &grid_csv(report))?;
    write_file(&effect, &effect_csv(report))?;
    Ok(vec![grid, effect])
}

/// Write report.json and the CSV tables; returns the paths written.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| FqaError::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    write_file(&json, &(serde_json::to_string_pretty(report)? + "\n"))?;
    let mut paths = vec![json];
    paths.extend(write_csvs(report, dir)?);
    Ok(paths)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| FqaError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_records(records: &[EvalRecord], path: &Path) -> Result<()> {
    crate::data::write_lines(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::gaussian_blur;
    use crate::monet::FEATURE_DIM;
    use crate::recognition::{Metric, SyntheticOracleEmbedder};
    use crate::synth::{synthetic_sample, textured_face};
    use proptest::prelude::*;

    fn brute(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().r - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().r + 1.0).abs() < 1e-15);
        // Centered sums: sxy = 5.5, sxx = 5, syy = 8.75.
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap().r;
        assert!((r - 5.5 / (5.0f64 * 8.75).sqrt()).abs() < 1e-12);
        assert!((r - 0.8315).abs() < 1e-4);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(FqaError::UndefinedCorrelation(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_properties(
            xs in prop::collection::vec(-100.0f64..100.0, 3..60),
            seed in any::<u64>(),
            a in 0.1f64..10.0,
            b in -50.0f64..50.0,
        ) {
            let mut rng = crate::seed::rng_from_seed(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x * 0.3 + rand::Rng::gen_range(&mut rng, -20.0..20.0)).collect();
            let r = pearson(&xs, &ys).unwrap().r;
            prop_assert!((r - brute(&xs, &ys)).abs() < 1e-9);
            prop_assert!((r - pearson(&ys, &xs).unwrap().r).abs() < 1e-12);
            let t: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assert!((r - pearson(&t, &ys).unwrap().r).abs() < 1e-12);
            let neg: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
            prop_assert!((r + pearson(&neg, &ys).unwrap().r).abs() < 1e-12);
        }
    }

    fn record(q: f64, s: f64, polarity: Polarity) -> EvalRecord {
        EvalRecord {
            sample_id: "x".into(),
            dataset: "d".into(),
            attack: EvalAttack::Blur,
            augmentation: AppliedAugmentation::default(),
            predicted: [("BRO".to_string(), q)].into_iter().collect(),
            match_score: s,
            self_score: s,
            raw_match: s,
            raw_self: s,
            polarity,
            backend: "b".into(),
        }
    }

    #[test]
    fn correlate_polarity_rule() {
        let xs = [0.1, 0.5, 0.2, 0.9, 0.4, 0.3, 0.8, 0.6, 0.7, 0.05];
        let same: Vec<EvalRecord> = xs.iter().map(|&v| record(v, v, Polarity::SimilarityHighIsBetter)).collect();
        let refs: Vec<&EvalRecord> = same.iter().collect();
        let r = correlate(&refs, "BRO", ScoreKind::SelfScore, PolarityHandling::RawWithNegation).unwrap();
        assert!((r.r - 1.0).abs() < 1e-12 && !r.negated);

        let dist: Vec<EvalRecord> = xs
            .iter()
            .map(|&v| {
                let mut r = record(v, -v, Polarity::DistanceLowIsBetter);
                r.raw_self = v;
                r
            })
            .collect();
        let refs: Vec<&EvalRecord> = dist.iter().collect();
        let r = correlate(&refs, "BRO", ScoreKind::SelfScore, PolarityHandling::RawWithNegation).unwrap();
        // Quality tracking the raw distance is anti-aligned with recognizability.
        assert!((r.r + 1.0).abs() < 1e-12 && r.negated);
        let flipped: Vec<EvalRecord> = dist
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.predicted.insert("BRO".into(), -r.raw_self);
                r
            })
            .collect();
        let refs: Vec<&EvalRecord> = flipped.iter().collect();
        let r = correlate(&refs, "BRO", ScoreKind::SelfScore, PolarityHandling::RawWithNegation).unwrap();
        assert!((r.r - 1.0).abs() < 1e-12 && r.negated);

        let ys = [0.3, 0.1, 0.4, 0.7, 0.5, 0.2, 0.9, 0.65, 0.45, 0.0];
        let mixed: Vec<EvalRecord> = xs.iter().zip(&ys).map(|(&q, &s)| record(q, s, Polarity::SimilarityHighIsBetter)).collect();
        let refs: Vec<&EvalRecord> = mixed.iter().collect();
        let r = correlate(&refs, "BRO", ScoreKind::Match, PolarityHandling::Normalized).unwrap();
        assert!((r.r - brute(&xs, &ys)).abs() < 1e-12);
    }

    #[test]
    fn baselines() {
        let flat = ImageBuffer::filled(32, 32, [90, 90, 90]);
        assert_eq!(baseline_sharpness(&flat), 0.0);
        assert_eq!(baseline_contrast(&flat), 0.0);
        let checker = ImageBuffer::from_fn(32, 32, |x, y| if (x + y) % 2 == 0 { [0; 3] } else { [255; 3] });
        assert!((baseline_contrast(&checker) - 127.5 / 128.0).abs() < 1e-9);
        let (img, _) = textured_face(3, 0, 112);
        let s3 = baseline_sharpness(&gaussian_blur(&img, 3, crate::augmentation::sigma_for_kernel(3)));
        let s21 = baseline_sharpness(&gaussian_blur(&img, 21, crate::augmentation::sigma_for_kernel(21)));
        assert!(s21 < s3);
    }

    fn samples(n: u64) -> Vec<FaceSample> {
        (0..n)
            .map(|i| {
                let (img, bbox, lm) = synthetic_sample(i / 2, i % 2);
                FaceSample::new(img, format!("id{}", i / 2), Some(bbox), Some(lm), format!("s{i}")).unwrap()
            })
            .collect()
    }

    fn heads() -> BTreeMap<String, QualityHead> {
        let mut h = BTreeMap::new();
        h.insert("BRO".to_string(), QualityHead { weight: (0..FEATURE_DIM).map(|i| (i as f32).sin() * 0.1).collect(), bias: 0.2 });
        h.insert("Blur".to_string(), QualityHead { weight: vec![0.01; FEATURE_DIM], bias: 0.0 });
        h
    }

    #[test]
    fn no_attack_self_scores_are_one_and_counts_match() {
        let s = samples(6);
        let w = MonetWeights::random(1);
        let h = heads();
        let models = EvalModels { weights: &w, heads: &h, baselines: true };
        let backend = SyntheticOracleEmbedder::default();
        let run = run_attack_eval(&s, "synth", &models, &backend, &[EvalAttack::None, EvalAttack::Blur], &CropConfig::default(), 4).unwrap();
        assert_eq!(run.records.len(), 12);
        for r in run.records.iter().filter(|r| r.attack == EvalAttack::None) {
            assert!((r.self_score - 1.0).abs() < 1e-12);
            assert!(r.augmentation.is_identity());
            assert_eq!(r.predicted.len(), 4);
        }
        let again = run_attack_eval(&s, "synth", &models, &backend, &[EvalAttack::None, EvalAttack::Blur], &CropConfig::default(), 4).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn duplicate_gallery_gives_unit_match() {
        let mut s = samples(2);
        let (img, bbox, lm) = synthetic_sample(0, 0);
        s[1] = FaceSample::new(img, "id0", Some(bbox), Some(lm), "dup").unwrap();
        let w = MonetWeights::zeros();
        let h = BTreeMap::new();
        let models = EvalModels { weights: &w, heads: &h, baselines: false };
        let run = run_attack_eval(&s, "d", &models, &SyntheticOracleEmbedder::default(), &[EvalAttack::None], &CropConfig::default(), 0).unwrap();
        let table = attack_effect_table(&run.records);
        assert_eq!(table.len(), 1);
        assert!((table[0].mean_match - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_shape_identical_heads_and_ranking() {
        let s = samples(8);
        let w = MonetWeights::random(2);
        let same = QualityHead { weight: (0..FEATURE_DIM).map(|i| (i as f32 * 0.3).cos() * 0.05).collect(), bias: 0.0 };
        let h: BTreeMap<String, QualityHead> =
            ["Blur", "Rot", "Occ", "BRO"].iter().map(|n| (n.to_string(), same.clone())).collect();
        let models = EvalModels { weights: &w, heads: &h, baselines: false };
        let (_, report) = ablation_eval(&s, "d", &models, &SyntheticOracleEmbedder::default(), &EvalAttack::ATTACKS, &CropConfig::default(), 9).unwrap();
        assert_eq!(report.cells.len(), 24);
        for chunk in report.cells.chunks(4) {
            assert!(chunk.iter().all(|c| c.r == chunk[0].r));
            assert_eq!(chunk.iter().filter(|c| c.best).count(), 1);
            assert_eq!(chunk.iter().filter(|c| c.second).count(), 1);
        }
    }

    #[test]
    fn distance_view_gives_same_grid() {
        let s = samples(8);
        let w = MonetWeights::random(3);
        let h = heads();
        let models = EvalModels { weights: &w, heads: &h, baselines: false };
        let sim = SyntheticOracleEmbedder::default();
        let dist = SyntheticOracleEmbedder::with_metric("oracle", Metric::CosineDistance);
        let a = ablation_eval(&s, "d", &models, &sim, &EvalAttack::ATTACKS, &CropConfig::default(), 1).unwrap().1;
        let b = ablation_eval(&s, "d", &models, &dist, &EvalAttack::ATTACKS, &CropConfig::default(), 1).unwrap().1;
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert!((x.r.unwrap() - y.r.unwrap()).abs() < 1e-12);
            assert!(y.negated && !x.negated);
        }
    }

    #[test]
    fn report_files_are_deterministic_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let empty = EvalReport::default();
        write_report(&empty, dir.path()).unwrap();
        assert_eq!(read_report(&dir.path().join(REPORT_JSON)).unwrap(), empty);

        let s = samples(6);
        let w = MonetWeights::random(4);
        let h = heads();
        let models = EvalModels { weights: &w, heads: &h, baselines: true };
        let (_, report) = ablation_eval(&s, "d", &models, &SyntheticOracleEmbedder::default(), &[EvalAttack::Blur], &CropConfig::default(), 2).unwrap();
        write_report(&report, dir.path()).unwrap();
        let first = fs::read(dir.path().join(REPORT_JSON)).unwrap();
        let csv1 = fs::read_to_string(dir.path().join(GRID_CSV)).unwrap();
        write_report(&report, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(REPORT_JSON)).unwrap());
        assert_eq!(read_report(&dir.path().join(REPORT_JSON)).unwrap(), report);

        for (line, cell) in csv1.lines().skip(1).zip(&report.cells) {
            let r = line.split(',').nth(5).unwrap();
            match cell.r {
                Some(v) => assert!((r.parse::<f64>().unwrap() - v).abs() <= 5e-7),
                None => assert!(r.is_empty()),
            }
        }
    }
}
