//! Acceptance checks, one line of output per criterion.
//!
//! Runs with a custom harness so every criterion reports PASS or FAIL even when
//! an earlier one fails; the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fqa_core::augmentation::{
    gaussian_blur_random, occlude_random_rect, rotate, rotate_point, rotate_random, AugmentationSpec, EvalAttack,
    TrainingMode,
};
use fqa_core::cli::{
    cmd_augment, cmd_eval, cmd_gen_synth, cmd_pipeline_sim, cmd_train_head, labels_file, BackendConfig, RunConfig,
    SELECTIONS_JSONL,
};
use fqa_core::data::{BoundingBox, CropConfig, FaceSample, ImageBuffer, LandmarkSet};
use fqa_core::evaluation::{
    ablation_eval, attack_effect_table, correlate, pearson, read_report, run_attack_eval, EvalModels, EvalReport,
    PolarityHandling, ScoreKind, EFFECT_CSV, GRID_CSV, RECORDS_JSONL, REPORT_JSON,
};
use fqa_core::monet::{
    fit_closed_form, forward, mse_gradient, mse_objective, predict, preprocess, table_features,
    train_head_on_features, FeatureMap, MonetWeights, QualityHead, TrainingConfig, FEATURE_DIM,
};
use fqa_core::pipeline::{
    align_face, associate_bidirectional, estimate_similarity, update_tracks, AlignmentTemplate, Detection,
    TrackerParams, TrackerState, ALIGNMENT_TEMPLATE_112,
};
use fqa_core::recognition::{generate_label_rounds, LabelMode, Metric, SyntheticOracleEmbedder};
use fqa_core::synth::{synthetic_sample, synthetic_samples};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1. Pearson oracle equivalence

/// Covariance over the product of standard deviations, each from raw moments.
fn pearson_by_moments(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let exy = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    let exx = x.iter().map(|a| a * a).sum::<f64>() / n;
    let eyy = y.iter().map(|b| b * b).sum::<f64>() / n;
    (exy - mx * my) / ((exx - mx * mx).sqrt() * (eyy - my * my).sqrt())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(2..=500);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let noise = r.gen_range(0.0..2.0);
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v + noise * r.gen_range(-1.0..1.0)).collect();
        let got = pearson(&x, &y).map_err(|e| e.to_string())?;
        let oracle = pearson_by_moments(&x, &y);
        worst = worst.max((got.r - oracle.clamp(-1.0, 1.0)).abs());
        ensure!(got.n == n, "n mismatch");
        ensure!(got.r.abs() <= 1.0 + 1e-12, "|r| > 1");

        let sym = pearson(&y, &x).unwrap().r;
        ensure!((sym - got.r).abs() <= 1e-12, "asymmetric: {} vs {}", sym, got.r);
        let (a, b) = (r.gen_range(0.1..10.0), r.gen_range(-5.0..5.0));
        let pos: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        let rp = pearson(&pos, &y).unwrap().r;
        let rn = pearson(&neg, &y).unwrap().r;
        worst_affine = worst_affine.max((rp - got.r).abs()).max((rn + got.r).abs());
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-12, "max |two-pass - oracle| = {worst:e}");
    ensure!(worst_affine <= 1e-12, "affine/negation deviation {worst_affine:e}");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("1000 pairs, max oracle diff {worst:.1e}, max affine diff {worst_affine:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. Augmentation bounds fuzz

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let spec = AugmentationSpec::default();
    let small = ImageBuffer::from_fn(16, 16, |x, y| [(x * 16) as u8, (y * 16) as u8, 77]);
    let crop = ImageBuffer::from_fn(112, 112, |x, y| [(x * 2) as u8, (y * 2) as u8, 128]);
    let mut violations = Vec::new();
    let mut r = rng(202);
    let (mut min_a, mut max_a) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let (_, rec) = rotate_random(&small, &spec, &mut r).map_err(|e| e.to_string())?;
        let a = rec.rotation_degrees;
        min_a = min_a.min(a);
        max_a = max_a.max(a);
        if !(-15.0..=15.0).contains(&a) {
            violations.push(format!("angle {a}"));
        }
    }
    let mut kernels = std::collections::BTreeSet::new();
    for _ in 0..10_000 {
        let (_, rec) = gaussian_blur_random(&small, &spec, &mut r);
        let k = rec.kernel_size;
        kernels.insert(k);
        if !(3..=21).contains(&k) || k % 2 == 0 {
            violations.push(format!("kernel {k}"));
        }
    }
    let mut max_frac: f64 = 0.0;
    let total = (112 * 112) as f64;
    for _ in 0..10_000 {
        let (img, rec) = occlude_random_rect(&crop, &spec, &mut r);
        let changed = img.data().chunks(3).zip(crop.data().chunks(3)).filter(|(a, b)| a != b).count() as f64;
        let frac = rec.occluded_fraction.max(changed / total);
        max_frac = max_frac.max(frac);
        if frac > 0.27 {
            violations.push(format!("occluded fraction {frac}"));
        }
    }
    let elapsed = start.elapsed();
    ensure!(violations.is_empty(), "{} violations, first: {}", violations.len(), violations[0]);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "30000 draws, angle [{min_a:.2}, {max_a:.2}], kernels {kernels:?}, max occluded {max_frac:.4}, {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Determinism of the CLI commands

fn read_bytes(dir: &Path, names: &[&str]) -> Vec<(String, Vec<u8>)> {
    names.iter().map(|n| (n.to_string(), fs::read(dir.join(n)).unwrap_or_default())).collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().to_path_buf();
    let mut config = RunConfig { seed: 31, ..RunConfig::default() };
    config.paths.out_dir = out.clone();
    cmd_gen_synth(&config, 40, 5, 3, 40).map_err(|e| e.to_string())?;
    config.paths.manifest = Some(out.join("manifest.jsonl"));
    config.paths.scenario = Some(out.join("scenario.jsonl"));
    config.detector.jitter = 0.03;
    config.detector.dropout = 0.2;

    let label_files: Vec<String> = config.variants.iter().map(|&m| labels_file(m)).collect();
    let label_refs: Vec<&str> = label_files.iter().map(String::as_str).collect();
    let mut differing = Vec::new();

    cmd_augment(&config).map_err(|e| e.to_string())?;
    let a1 = read_bytes(&out, &label_refs);
    cmd_augment(&config).map_err(|e| e.to_string())?;
    if a1 != read_bytes(&out, &label_refs) {
        differing.push("augment");
    }
    let rows = fs::read_to_string(out.join(&label_files[0])).unwrap_or_default().lines().count();

    cmd_train_head(&config, false).map_err(|e| e.to_string())?;
    config.paths.weights = Some(out.join(fqa_core::cli::MODEL_ARCHIVE));
    let eval_files = [REPORT_JSON, GRID_CSV, EFFECT_CSV, RECORDS_JSONL];
    cmd_eval(&config).map_err(|e| e.to_string())?;
    let e1 = read_bytes(&out, &eval_files);
    cmd_eval(&config).map_err(|e| e.to_string())?;
    if e1 != read_bytes(&out, &eval_files) {
        differing.push("eval");
    }

    cmd_pipeline_sim(&config).map_err(|e| e.to_string())?;
    let p1 = read_bytes(&out, &[SELECTIONS_JSONL]);
    cmd_pipeline_sim(&config).map_err(|e| e.to_string())?;
    if p1 != read_bytes(&out, &[SELECTIONS_JSONL]) {
        differing.push("pipeline-sim");
    }
    let selections = String::from_utf8_lossy(&p1[0].1).lines().count();
    let elapsed = start.elapsed();
    ensure!(differing.is_empty(), "outputs differ between reruns: {differing:?}");
    ensure!(rows > 0 && selections > 0, "empty outputs ({rows} label rows, {selections} selections)");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("200 samples; augment/eval/pipeline-sim byte-identical on rerun ({rows} rows per mode, {selections} selections), {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 4. Attack-effect ordering

fn criterion_4() -> Outcome {
    let samples = synthetic_samples(50, 2);
    let weights = MonetWeights::random(4);
    let heads = BTreeMap::from([("zero".to_string(), QualityHead::zeros())]);
    let models = EvalModels { weights: &weights, heads: &heads, baselines: false };
    let attacks = [EvalAttack::None, EvalAttack::Blur, EvalAttack::Occlusion, EvalAttack::BlurOcc];
    let run = run_attack_eval(&samples, "synthetic", &models, &SyntheticOracleEmbedder::default(), &attacks, &CropConfig::default(), 44)
        .map_err(|e| e.to_string())?;
    let table = attack_effect_table(&run.records);
    let mean = |a: EvalAttack| table.iter().find(|r| r.attack == a).map(|r| r.mean_self).unwrap_or(f64::NAN);
    let (none, blur, occ, both) = (
        mean(EvalAttack::None),
        mean(EvalAttack::Blur),
        mean(EvalAttack::Occlusion),
        mean(EvalAttack::BlurOcc),
    );
    let detail = format!("{} faces: none {none:.4} > blur {blur:.4} > blur_occ {both:.4}; occlusion {occ:.4}", samples.len());
    ensure!((none - 1.0).abs() < 1e-12, "{detail}: none is not 1");
    ensure!(none - blur >= 0.01 && blur - both >= 0.01, "{detail}: blur ordering gaps < 0.01");
    ensure!(none - occ >= 0.01 && occ - both >= 0.01, "{detail}: occlusion not strictly between");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 5. Head-training correctness

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut r = rng(505);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let w_star: Vec<f64> = (0..FEATURE_DIM).map(|_| normal.sample(&mut r) / 16.0).collect();
    let b_star = 0.3;
    let noise = Normal::new(0.0, 0.01).unwrap();
    let make = |n: usize, r: &mut ChaCha8Rng| -> (Vec<Vec<f32>>, Vec<f64>) {
        let feats: Vec<Vec<f32>> = (0..n).map(|_| (0..FEATURE_DIM).map(|_| r.gen_range(0.0f32..1.0)).collect()).collect();
        let labels = feats
            .iter()
            .map(|f| f.iter().zip(&w_star).map(|(x, w)| *x as f64 * w).sum::<f64>() + b_star + noise.sample(r))
            .collect();
        (feats, labels)
    };
    let (train_f, train_y) = make(8000, &mut r);
    let (test_f, test_y) = make(2000, &mut r);
    let config = TrainingConfig { seed: 5, ..TrainingConfig::default() };
    ensure!(config.batch_size == 128 && config.learning_rate == 0.01, "unexpected training defaults");
    let sgd = train_head_on_features(&train_f, &train_y, &config).map_err(|e| e.to_string())?;
    let cf = fit_closed_form(&train_f, &train_y, 1e-6).map_err(|e| e.to_string())?;
    let pred: Vec<f64> = test_f.iter().map(|f| sgd.head.score(f)).collect();
    let pred_cf: Vec<f64> = test_f.iter().map(|f| cf.score(f)).collect();
    let r_labels = pearson(&pred, &test_y).unwrap().r;
    let r_cf = pearson(&pred, &pred_cf).unwrap().r;

    // Central differences on a small problem.
    let fd_feats: Vec<Vec<f64>> = (0..60).map(|_| (0..8).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let fd_labels: Vec<f64> = (0..60).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..8).map(|_| r.gen_range(-0.5..0.5)).collect();
    let b = 0.1;
    let decay = 1e-3;
    let all: Vec<usize> = (0..60).collect();
    let (gw, gb) = mse_gradient(&w, b, &fd_feats, &fd_labels, &all, decay);
    let h = 1e-6;
    let mut worst_rel: f64 = 0.0;
    for i in 0..=8 {
        let eval = |delta: f64| {
            let mut wp = w.clone();
            let mut bp = b;
            if i < 8 {
                wp[i] += delta;
            } else {
                bp += delta;
            }
            mse_objective(&wp, bp, &fd_feats, &fd_labels, decay)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let g = if i < 8 { gw[i] } else { gb };
        worst_rel = worst_rel.max((g - fd).abs() / fd.abs().max(1e-8));
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "held-out r {r_labels:.5}, r vs closed form {r_cf:.6}, gradient rel err {worst_rel:.1e}, {elapsed:.2?}"
    );
    ensure!(r_labels >= 0.99, "{detail}");
    ensure!(r_cf >= 0.999, "{detail}");
    ensure!(worst_rel <= 1e-5, "{detail}");
    ensure!(elapsed < Duration::from_secs(120), "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6 and 7. Desk-scale training and ablation

const DESK_SEED: u64 = 7;
const DESK_ROUNDS: usize = 16;

struct Desk {
    train: Vec<FaceSample>,
    eval: Vec<FaceSample>,
    weights: MonetWeights,
    bro: QualityHead,
    bro_r: f64,
    bro_elapsed: Duration,
}

/// 500 faces (100 identities × 5); identities id0050..id0099 train, the rest evaluate.
fn desk() -> &'static Result<Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let all = synthetic_samples(100, 5);
        let (train, eval): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.identity.as_str() >= "id0050");
        let weights = MonetWeights::random(DESK_SEED);
        let bro = train_variant(&train, &weights, TrainingMode::Bro)?;
        let heads = BTreeMap::from([("BRO".to_string(), bro.clone())]);
        let models = EvalModels { weights: &weights, heads: &heads, baselines: false };
        let backend = SyntheticOracleEmbedder::default();
        let run = run_attack_eval(&eval, "synthetic", &models, &backend, &[EvalAttack::BlurOcc], &CropConfig::default(), DESK_SEED)
            .map_err(|e| e.to_string())?;
        let refs: Vec<_> = run.records.iter().collect();
        let bro_r = correlate(&refs, "BRO", ScoreKind::SelfScore, PolarityHandling::default())
            .map_err(|e| e.to_string())?
            .r;
        Ok(Desk { train, eval, weights, bro, bro_r, bro_elapsed: start.elapsed() })
    })
}

fn train_variant(train: &[FaceSample], weights: &MonetWeights, mode: TrainingMode) -> Result<QualityHead, String> {
    let crop = CropConfig::default();
    let table = generate_label_rounds(
        train,
        &SyntheticOracleEmbedder::default(),
        &AugmentationSpec::default(),
        mode,
        LabelMode::SelfSimilarity,
        &crop,
        DESK_ROUNDS,
        DESK_SEED,
    )
    .map_err(|e| e.to_string())?;
    let (features, labels) = table_features(weights, train, &table, &crop).map_err(|e| e.to_string())?;
    let config = TrainingConfig { seed: DESK_SEED, ..TrainingConfig::default() };
    Ok(train_head_on_features(&features, &labels, &config).map_err(|e| e.to_string())?.head)
}

fn criterion_6() -> Outcome {
    let d = desk().as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "{} train / {} eval faces, blur_occ Pearson(BRO quality, self) = {:.4}, {:.1?}",
        d.train.len(),
        d.eval.len(),
        d.bro_r,
        d.bro_elapsed
    );
    ensure!(d.bro_r >= 0.6, "{detail}");
    ensure!(d.bro_elapsed < Duration::from_secs(300), "{detail}");
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let d = desk().as_ref().map_err(Clone::clone)?;
    let mut heads = BTreeMap::from([("BRO".to_string(), d.bro.clone())]);
    for mode in [TrainingMode::Blur, TrainingMode::Rot, TrainingMode::Occ] {
        heads.insert(mode.variant_name().to_string(), train_variant(&d.train, &d.weights, mode)?);
    }
    let models = EvalModels { weights: &d.weights, heads: &heads, baselines: false };
    let (_, report) = ablation_eval(
        &d.eval,
        "synthetic",
        &models,
        &SyntheticOracleEmbedder::default(),
        &EvalAttack::ATTACKS,
        &CropConfig::default(),
        DESK_SEED,
    )
    .map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut failing = Vec::new();
    for attack in EvalAttack::ATTACKS {
        for kind in ScoreKind::ALL {
            let mut cells: Vec<(String, f64)> = heads
                .keys()
                .map(|m| (m.clone(), report.cell("oracle", attack, kind, m).and_then(|c| c.r).unwrap_or(f64::NAN)))
                .collect();
            cells.sort_by(|a, b| b.1.total_cmp(&a.1));
            let rank = cells.iter().position(|(m, _)| m == "BRO").unwrap() + 1;
            let row = format!(
                "{}/{}: BRO #{rank} ({})",
                attack.as_str(),
                kind.as_str(),
                cells.iter().map(|(m, r)| format!("{m} {r:.3}")).collect::<Vec<_>>().join(", ")
            );
            if rank > 2 {
                failing.push(row.clone());
            }
            rows.push(row);
        }
    }
    ensure!(failing.is_empty(), "BRO outside the top two in: {}", failing.join("; "));
    Ok(rows.join("; "))
}

// ---------------------------------------------------------------------------
// 8. Similarity vs distance polarity

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = tmp.path().to_path_buf();
    let mut config = RunConfig { seed: 88, ..RunConfig::default() };
    config.paths.out_dir = base.clone();
    cmd_gen_synth(&config, 20, 5, 0, 0).map_err(|e| e.to_string())?;
    config.paths.manifest = Some(base.join("manifest.jsonl"));
    cmd_augment(&config).map_err(|e| e.to_string())?;
    cmd_train_head(&config, false).map_err(|e| e.to_string())?;
    config.paths.weights = Some(base.join(fqa_core::cli::MODEL_ARCHIVE));

    let run = |metric: Metric, dir: &str| -> Result<EvalReport, String> {
        let mut c = config.clone();
        c.backends = vec![BackendConfig { metric, ..BackendConfig::oracle() }];
        c.paths.out_dir = base.join(dir);
        cmd_eval(&c).map_err(|e| e.to_string())?;
        read_report(&c.paths.out_dir.join(REPORT_JSON)).map_err(|e| e.to_string())
    };
    let sim = run(Metric::Cosine, "similarity")?;
    let dist = run(Metric::CosineDistance, "distance")?;
    ensure!(sim.cells.len() == dist.cells.len() && !sim.cells.is_empty(), "grid sizes differ");
    let mut worst: f64 = 0.0;
    let mut negated = 0;
    for (a, b) in sim.cells.iter().zip(&dist.cells) {
        ensure!(
            (a.attack, a.score_kind, &a.model) == (b.attack, b.score_kind, &b.model),
            "cell order differs"
        );
        match (a.r, b.r) {
            (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
            (None, None) => {}
            _ => return Err(format!("cell {} {:?} {} defined in only one view", a.attack, a.score_kind, a.model)),
        }
        negated += b.negated as usize;
    }
    ensure!(worst <= 1e-12, "max grid difference {worst:e}");
    ensure!(negated > 0, "distance view never negated");
    Ok(format!("{} cells, max |r_sim - r_dist| = {worst:.1e}, {negated} negated cells", sim.cells.len()))
}

// ---------------------------------------------------------------------------
// 9. Tracker

fn random_boxes(r: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
    // Integer coordinates on a small field give overlaps and exact IoU ties.
    (0..n)
        .map(|_| {
            let w = r.gen_range(4..12) as f64;
            BoundingBox { x: r.gen_range(0..20) as f64, y: r.gen_range(0..20) as f64, w, h: w }
        })
        .collect()
}

/// All mutual-best pairs by direct pairwise comparison.
fn mutual_best_oracle(prev: &[BoundingBox], curr: &[BoundingBox], t: f64) -> Vec<(usize, usize)> {
    let beats = |v: f64, idx: usize, other_v: f64, other_idx: usize| v > other_v || (v == other_v && idx < other_idx);
    let mut pairs = Vec::new();
    for i in 0..prev.len() {
        for j in 0..curr.len() {
            let v = prev[i].iou(&curr[j]);
            if v < t {
                continue;
            }
            let best_for_i = (0..curr.len()).all(|j2| j2 == j || beats(v, j, prev[i].iou(&curr[j2]), j2));
            let best_for_j = (0..prev.len()).all(|i2| i2 == i || beats(v, i, prev[i2].iou(&curr[j]), i2));
            if best_for_i && best_for_j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

fn det(frame: u64, x: f64, y: f64, s: f64) -> Detection {
    Detection { frame, bbox: BoundingBox { x, y, w: s, h: s }, confidence: 1.0 }
}

fn ids_for(state: &mut TrackerState, frame: u64, dets: &[Detection]) -> Vec<u64> {
    update_tracks(state, dets, frame).unwrap().assignments.into_iter().map(|a| a.unwrap()).collect()
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut r = rng(909);
    let mut matched = 0;
    for case in 0..200 {
        let prev = random_boxes(&mut r, 6);
        let curr = random_boxes(&mut r, 6);
        let m = associate_bidirectional(&prev, &curr, 0.3);
        let oracle = mutual_best_oracle(&prev, &curr, 0.3);
        ensure!(m.pairs == oracle, "case {case}: {:?} != oracle {:?}", m.pairs, oracle);
        let mut used_p = m.unmatched_prev.clone();
        used_p.extend(m.pairs.iter().map(|p| p.0));
        used_p.sort();
        let mut used_c = m.unmatched_curr.clone();
        used_c.extend(m.pairs.iter().map(|p| p.1));
        used_c.sort();
        ensure!(used_p == (0..6).collect::<Vec<_>>() && used_c == (0..6).collect::<Vec<_>>(), "case {case}: not a partition");
        matched += m.pairs.len();
    }

    // Two faces cross horizontally with a vertical offset: own-track IoU ≈ 0.78,
    // cross IoU at most 480 / 2720 ≈ 0.18.
    let mut st = TrackerState::new(TrackerParams::default());
    let mut first = None;
    for f in 0..30u64 {
        let a = det(f, 10.0 + 5.0 * f as f64, 50.0, 40.0);
        let b = det(f, 160.0 - 5.0 * f as f64, 78.0, 40.0);
        let ids = ids_for(&mut st, f, &[a, b]);
        match first {
            None => first = Some(ids),
            Some(ref expected) => ensure!(&ids == expected, "crossing: ids {ids:?} at frame {f}, expected {expected:?}"),
        }
    }

    // A gap of g frames between sightings: g ≤ max_misses keeps the id.
    let max_misses = TrackerParams::default().max_misses as u64;
    for gap in 1..=max_misses + 2 {
        let mut st = TrackerState::new(TrackerParams::default());
        let before = ids_for(&mut st, 0, &[det(0, 20.0, 20.0, 30.0)]);
        for f in 1..gap {
            update_tracks(&mut st, &[], f).unwrap();
        }
        let after = ids_for(&mut st, gap, &[det(gap, 21.0, 20.0, 30.0)]);
        let same = before == after;
        ensure!(same == (gap <= max_misses), "gap {gap}: id preserved = {same}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("200 random cases ({matched} pairs) equal the oracle; crossing ids kept; gaps ≤ {max_misses} keep ids, longer gaps do not; {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 10. Alignment

fn criterion_10() -> Outcome {
    let template = AlignmentTemplate::default();
    let (canvas, _, landmarks) = synthetic_sample(3, 1);

    let id = estimate_similarity(&ALIGNMENT_TEMPLATE_112, &ALIGNMENT_TEMPLATE_112).map_err(|e| e.to_string())?;
    let id_err = (id.a - 1.0).abs().max(id.b.abs()).max(id.tx.abs()).max(id.ty.abs());
    ensure!(id_err <= 1e-6, "identity transform error {id_err:e}");
    let fixed = align_face(&canvas, &LandmarkSet { points: ALIGNMENT_TEMPLATE_112 }, &template).map_err(|e| e.to_string())?;
    let region = ImageBuffer::from_fn(112, 112, |x, y| canvas.pixel(x, y));
    ensure!(fixed == region, "fixed point output differs from the source region");

    let c = [56.0, 56.0];
    let rotated = ALIGNMENT_TEMPLATE_112.map(|p| rotate_point(p, 10.0, c));
    let t = estimate_similarity(&rotated, &ALIGNMENT_TEMPLATE_112).map_err(|e| e.to_string())?;
    let rot_err = (t.rotation_degrees() + 10.0).abs();
    let scale_err = (t.scale() - 1.0).abs();
    ensure!(rot_err <= 1e-4 && scale_err <= 1e-4, "rotation error {rot_err:e}, scale error {scale_err:e}");

    let aligned = align_face(&canvas, &landmarks, &template).map_err(|e| e.to_string())?;
    let eye_dy = {
        let t = estimate_similarity(&landmarks.points, &template.points).unwrap();
        (t.apply(landmarks.points[0])[1] - t.apply(landmarks.points[1])[1]).abs()
    };
    let centre = [(canvas.width() as f64 - 1.0) / 2.0, (canvas.height() as f64 - 1.0) / 2.0];
    let mut worst: f64 = 0.0;
    for deg in [-12.0, 7.0, 12.0] {
        let turned = rotate(&canvas, deg);
        let turned_lm = landmarks.map(|p| rotate_point(p, deg, centre));
        let again = align_face(&turned, &turned_lm, &template).map_err(|e| e.to_string())?;
        worst = worst.max(aligned.mean_abs_diff(&again));
    }
    ensure!(worst < 3.0, "equivariance mean abs diff {worst:.3}");
    Ok(format!(
        "identity err {id_err:.1e}, 10° recovery err {rot_err:.1e}, aligned eye dy {eye_dy:.1e}, equivariance diff {worst:.3}"
    ))
}

// ---------------------------------------------------------------------------
// 11. Forward pass against direct convolution

/// Unoptimized forward pass straight from the layer definitions, in f64.
fn direct_forward(w: &MonetWeights, input: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let (mut c, mut h, mut wd) = (input.channels, input.height, input.width);
    let mut x: Vec<f64> = input.data.iter().map(|&v| v as f64).collect();
    for layer in &w.convs {
        let k = layer.kernel;
        let (oh, ow) = (h - k + 1, wd - k + 1);
        let mut y = vec![0.0; layer.out_channels * oh * ow];
        for o in 0..layer.out_channels {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut acc = layer.bias[o] as f64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = layer.weight[((o * c + ci) * k + ky) * k + kx] as f64;
                                acc += wv * x[(ci * h + yy + ky) * wd + xx + kx];
                            }
                        }
                    }
                    if acc < 0.0 {
                        acc *= layer.prelu[o] as f64;
                    }
                    y[(o * oh + yy) * ow + xx] = acc;
                }
            }
        }
        c = layer.out_channels;
        h = oh;
        wd = ow;
        x = y;
        if let Some(pk) = layer.pool {
            // Stride 2, ceiling output size, windows clipped at the border.
            let ph = ((h - pk) as f64 / 2.0).ceil() as usize + 1;
            let pw = ((wd - pk) as f64 / 2.0).ceil() as usize + 1;
            let mut p = vec![f64::NEG_INFINITY; c * ph * pw];
            for ci in 0..c {
                for py in 0..ph {
                    for px in 0..pw {
                        let mut m = f64::NEG_INFINITY;
                        for yy in 2 * py..(2 * py + pk).min(h) {
                            for xx in 2 * px..(2 * px + pk).min(wd) {
                                m = m.max(x[(ci * h + yy) * wd + xx]);
                            }
                        }
                        p[(ci * ph + py) * pw + px] = m;
                    }
                }
            }
            h = ph;
            wd = pw;
            x = p;
        }
    }
    let flat = x;
    let mut feats = vec![0.0; FEATURE_DIM];
    for (j, f) in feats.iter_mut().enumerate() {
        let mut acc = w.fc_bias[j] as f64;
        for (i, v) in flat.iter().enumerate() {
            acc += w.fc_weight[j * flat.len() + i] as f64 * v;
        }
        *f = if acc < 0.0 { acc * w.fc_prelu[j] as f64 } else { acc };
    }
    let lms = (0..10)
        .map(|j| {
            w.landmark_bias[j] as f64
                + (0..FEATURE_DIM).map(|i| w.landmark_weight[j * FEATURE_DIM + i] as f64 * feats[i]).sum::<f64>()
        })
        .collect();
    (feats, lms)
}

fn rel_diff(a: &[f32], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max) / scale
}

fn criterion_11() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in [11u64, 12, 13] {
        let weights = MonetWeights::random(seed);
        let mut r = rng(seed * 31);
        let img = ImageBuffer::from_fn(48, 48, |_, _| [r.gen(), r.gen(), r.gen()]);
        let input = preprocess(&img).map_err(|e| e.to_string())?;
        let fast = forward(&weights, &input).map_err(|e| e.to_string())?;
        let (feats, lms) = direct_forward(&weights, &input);
        worst = worst.max(rel_diff(&fast.features, &feats)).max(rel_diff(&fast.landmarks, &lms));
    }
    ensure!(worst <= 1e-4, "max relative difference {worst:e}");

    let weights = MonetWeights::random(14);
    let (face, _, _) = synthetic_sample(9, 0);
    let crop = face.resize_bilinear(96, 96);
    let mut r = rng(15);
    let head_a = QualityHead { weight: (0..FEATURE_DIM).map(|_| r.gen_range(-1.0..1.0)).collect(), bias: 0.2 };
    let head_b = QualityHead { weight: (0..FEATURE_DIM).map(|_| r.gen_range(-1.0..1.0)).collect(), bias: -3.0 };
    let pa = predict(&weights, &head_a, &crop).map_err(|e| e.to_string())?;
    let pb = predict(&weights, &head_b, &crop).map_err(|e| e.to_string())?;
    ensure!(pa.landmarks == pb.landmarks, "landmarks changed with the quality head");
    ensure!(pa.quality != pb.quality, "quality did not change with the head");
    Ok(format!("3 weight/input pairs, max relative difference {worst:.1e}; landmarks identical across heads"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("pearson oracle equivalence", criterion_1),
        ("augmentation bounds fuzz", criterion_2),
        ("determinism", criterion_3),
        ("attack-effect ordering", criterion_4),
        ("head-training correctness", criterion_5),
        ("end-to-end BRO run", criterion_6),
        ("ablation shape", criterion_7),
        ("polarity/negation", criterion_8),
        ("tracker scenarios", criterion_9),
        ("alignment", criterion_10),
        ("forward-pass oracle", criterion_11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {label}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {label}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
