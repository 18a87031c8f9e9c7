//! Seeded image distortions: random rotation, Gaussian blur and occlusion for
//! training, plus the blur / quadrilateral-occlusion attacks used at evaluation.
//!
//! Every random operation records the concrete parameters it drew in an
//! [`AppliedAugmentation`], and [`replay`] re-applies a record bit-exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{round_u8, ImageBuffer};
use crate::error::{FqaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub rotation_degrees: [f64; 2],
    pub blur_kernel_min: u32,
    pub blur_kernel_max: u32,
    pub occlusion_max_area_fraction: f64,
    pub enable_rotation: bool,
    pub enable_blur: bool,
    pub enable_occlusion: bool,
    pub rotation_probability: f64,
    pub blur_probability: f64,
    pub occlusion_probability: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            rotation_degrees: [-15.0, 15.0],
            blur_kernel_min: 3,
            blur_kernel_max: 21,
            occlusion_max_area_fraction: 0.25,
            enable_rotation: true,
            enable_blur: true,
            enable_occlusion: true,
            rotation_probability: 0.5,
            blur_probability: 0.5,
            occlusion_probability: 0.5,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.rotation_degrees;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(FqaError::invalid("rotation interval must be finite with lo <= hi"));
        }
        let (kmin, kmax) = (self.blur_kernel_min, self.blur_kernel_max);
        if kmin < 3 || kmin % 2 == 0 || kmax % 2 == 0 || kmin > kmax {
            return Err(FqaError::invalid("blur kernel range must be odd values >= 3 with min <= max"));
        }
        let f = self.occlusion_max_area_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(FqaError::invalid("occlusion area fraction must lie in (0, 1]"));
        }
        for p in [self.rotation_probability, self.blur_probability, self.occlusion_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FqaError::invalid("application probabilities must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Same ranges with every application probability forced to `p`.
    pub fn with_probability(mut self, p: f64) -> Self {
        self.rotation_probability = p;
        self.blur_probability = p;
        self.occlusion_probability = p;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionKind {
    /// Rotated rectangle, training only.
    Rect,
    /// Convex hull of four random points, evaluation attacks only.
    Quad,
}

/// Concrete parameters drawn for one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AppliedAugmentation {
    /// 0 when no rotation was applied.
    pub rotation_degrees: f64,
    /// 0 when no blur was applied.
    pub kernel_size: u32,
    pub blur_sigma: f64,
    pub occlusion: Option<OcclusionKind>,
    pub occlusion_polygon: Vec<[f64; 2]>,
    pub occlusion_color: [u8; 3],
    pub occluded_fraction: f64,
    pub seed: u64,
}

impl AppliedAugmentation {
    pub fn is_identity(&self) -> bool {
        self.rotation_degrees == 0.0 && self.kernel_size == 0 && self.occlusion.is_none()
    }

    fn merge(&mut self, other: AppliedAugmentation) {
        if other.rotation_degrees != 0.0 {
            self.rotation_degrees = other.rotation_degrees;
        }
        if other.kernel_size != 0 {
            self.kernel_size = other.kernel_size;
            self.blur_sigma = other.blur_sigma;
        }
        if other.occlusion.is_some() {
            self.occlusion = other.occlusion;
            self.occlusion_polygon = other.occlusion_polygon;
            self.occlusion_color = other.occlusion_color;
            self.occluded_fraction = other.occluded_fraction;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    #[serde(alias = "blur_only")]
    Blur,
    #[serde(alias = "rot_only")]
    Rot,
    #[serde(alias = "occ_only")]
    Occ,
    Bro,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 4] = [TrainingMode::Blur, TrainingMode::Rot, TrainingMode::Occ, TrainingMode::Bro];

    /// Model variant name used in reports.
    pub fn variant_name(self) -> &'static str {
        match self {
            TrainingMode::Blur => "Blur",
            TrainingMode::Rot => "Rot",
            TrainingMode::Occ => "Occ",
            TrainingMode::Bro => "BRO",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Blur => "blur",
            TrainingMode::Rot => "rot",
            TrainingMode::Occ => "occ",
            TrainingMode::Bro => "bro",
        }
    }

    fn includes(self, d: Distortion) -> bool {
        matches!(
            (self, d),
            (TrainingMode::Bro, _)
                | (TrainingMode::Blur, Distortion::Blur)
                | (TrainingMode::Rot, Distortion::Rotation)
                | (TrainingMode::Occ, Distortion::Occlusion)
        )
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingMode {
    type Err = FqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blur" | "blur_only" => Ok(TrainingMode::Blur),
            "rot" | "rot_only" => Ok(TrainingMode::Rot),
            "occ" | "occ_only" => Ok(TrainingMode::Occ),
            "bro" => Ok(TrainingMode::Bro),
            other => Err(FqaError::Config(format!("unknown training mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalAttack {
    None,
    Blur,
    Occlusion,
    BlurOcc,
}

impl EvalAttack {
    pub const ATTACKS: [EvalAttack; 3] = [EvalAttack::Blur, EvalAttack::Occlusion, EvalAttack::BlurOcc];

    /// Stable ordinal used in per-record seed derivation.
    pub fn ordinal(self) -> u64 {
        match self {
            EvalAttack::None => 0,
            EvalAttack::Blur => 1,
            EvalAttack::Occlusion => 2,
            EvalAttack::BlurOcc => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalAttack::None => "none",
            EvalAttack::Blur => "blur",
            EvalAttack::Occlusion => "occlusion",
            EvalAttack::BlurOcc => "blur_occ",
        }
    }
}

impl fmt::Display for EvalAttack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalAttack {
    type Err = FqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(EvalAttack::None),
            "blur" => Ok(EvalAttack::Blur),
            "occlusion" | "occ" => Ok(EvalAttack::Occlusion),
            "blur_occ" | "blur+occ" | "blurocc" => Ok(EvalAttack::BlurOcc),
            other => Err(FqaError::Config(format!("unknown attack {other}"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Distortion {
    Rotation,
    Blur,
    Occlusion,
}

// ---------------------------------------------------------------------------
// Deterministic primitives

/// Rotate about the image center by `degrees`, bilinear sampling, black fill.
pub fn rotate(image: &ImageBuffer, degrees: f64) -> ImageBuffer {
    let (w, h) = (image.width(), image.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    ImageBuffer::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let p = image.sample_bilinear_black(sx, sy);
        [round_u8(p[0]), round_u8(p[1]), round_u8(p[2])]
    })
}

/// Where a source point lands after [`rotate`] with the same angle and center.
pub fn rotate_point(p: [f64; 2], degrees: f64, center: [f64; 2]) -> [f64; 2] {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    [center[0] + cos * dx - sin * dy, center[1] + sin * dx + cos * dy]
}

/// Sigma tied to kernel size: `0.3 * ((k - 1) * 0.5 - 1) + 0.8`.
pub fn sigma_for_kernel(k: u32) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Kernel size for an evaluation sigma: `ceil(6 sigma)` bumped to the next odd value.
pub fn kernel_for_sigma(sigma: f64) -> u32 {
    let k = (6.0 * sigma).ceil().max(1.0) as u32;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Normalized 1-D Gaussian taps of odd length `k`.
pub fn gaussian_kernel(k: u32, sigma: f64) -> Vec<f64> {
    assert!(k % 2 == 1, "kernel size must be odd");
    let half = (k / 2) as i64;
    let taps: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable convolution of one `w × h` plane with edge replication.
pub fn convolve_separable(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + t as i64 - half).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + t as i64 - half).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Gaussian blur with kernel size `k` and standard deviation `sigma`.
pub fn gaussian_blur(image: &ImageBuffer, k: u32, sigma: f64) -> ImageBuffer {
    let (w, h) = (image.width(), image.height());
    let kernel = gaussian_kernel(k, sigma);
    let mut out = image.clone();
    for c in 0..3 {
        let plane: Vec<f64> = image.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let blurred = convolve_separable(&plane, w, h, &kernel);
        for (i, v) in blurred.into_iter().enumerate() {
            out.data_mut()[i * 3 + c] = round_u8(v);
        }
    }
    out
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        twice += a[0] * b[1] - b[0] * a[1];
    }
    twice.abs() / 2.0
}

/// Paint the convex hull of `vertices` with `color`. A pixel is painted when its
/// center `(x + 0.5, y + 0.5)` lies inside or on the hull. Degenerate hulls
/// (zero area) paint nothing. Returns the number of painted pixels.
pub fn fill_convex_polygon(image: &mut ImageBuffer, vertices: &[[f64; 2]], color: [u8; 3]) -> usize {
    let hull = convex_hull(vertices);
    if hull.len() < 3 || polygon_area(&hull) < 1e-9 {
        return 0;
    }
    let (w, h) = (image.width(), image.height());
    let min_x = hull.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = hull.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = hull.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = hull.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (min_x - 0.5).floor().max(0.0) as usize;
    let y0 = (min_y - 0.5).floor().max(0.0) as usize;
    let x1 = ((max_x - 0.5).ceil() as i64).clamp(-1, w as i64 - 1);
    let y1 = ((max_y - 0.5).ceil() as i64).clamp(-1, h as i64 - 1);
    let mut painted = 0;
    for y in y0 as i64..=y1 {
        for x in x0 as i64..=x1 {
            let c = [x as f64 + 0.5, y as f64 + 0.5];
            let inside = (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], c) >= 0.0);
            if inside {
                image.set_pixel(x as usize, y as usize, color);
                painted += 1;
            }
        }
    }
    painted
}

/// Corners of a `w × h` rectangle centred at `center`, rotated by `degrees`.
pub fn rect_polygon(center: [f64; 2], w: f64, h: f64, degrees: f64) -> Vec<[f64; 2]> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]
        .iter()
        .map(|[u, v]| {
            let (dx, dy) = (u * w, v * h);
            [center[0] + cos * dx - sin * dy, center[1] + sin * dx + cos * dy]
        })
        .collect()
}

fn occlude_with(
    image: &ImageBuffer,
    polygon: Vec<[f64; 2]>,
    color: [u8; 3],
    kind: OcclusionKind,
) -> (ImageBuffer, AppliedAugmentation) {
    let mut out = image.clone();
    let painted = fill_convex_polygon(&mut out, &polygon, color);
    let record = AppliedAugmentation {
        occlusion: Some(kind),
        occlusion_polygon: polygon,
        occlusion_color: color,
        occluded_fraction: painted as f64 / (image.width() * image.height()) as f64,
        ..Default::default()
    };
    (out, record)
}

/// Paint the hull of four given points; the deterministic core of [`occlude_random_quad`].
pub fn occlude_quad(image: &ImageBuffer, points: [[f64; 2]; 4], color: [u8; 3]) -> (ImageBuffer, AppliedAugmentation) {
    occlude_with(image, points.to_vec(), color, OcclusionKind::Quad)
}

/// Paint a rotated rectangle; the deterministic core of [`occlude_random_rect`].
pub fn occlude_rect(
    image: &ImageBuffer,
    center: [f64; 2],
    w: f64,
    h: f64,
    degrees: f64,
    color: [u8; 3],
) -> (ImageBuffer, AppliedAugmentation) {
    occlude_with(image, rect_polygon(center, w, h, degrees), color, OcclusionKind::Rect)
}

/// Re-apply a recorded augmentation: rotation, then blur, then occlusion.
pub fn replay(image: &ImageBuffer, record: &AppliedAugmentation) -> ImageBuffer {
    let mut out = if record.rotation_degrees != 0.0 {
        rotate(image, record.rotation_degrees)
    } else {
        image.clone()
    };
    if record.kernel_size != 0 {
        out = gaussian_blur(&out, record.kernel_size, record.blur_sigma);
    }
    if record.occlusion.is_some() {
        fill_convex_polygon(&mut out, &record.occlusion_polygon, record.occlusion_color);
    }
    out
}

// ---------------------------------------------------------------------------
// Random operations

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

pub fn rotate_random<R: Rng + ?Sized>(
    image: &ImageBuffer,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<(ImageBuffer, AppliedAugmentation)> {
    if !image.is_square() {
        return Err(FqaError::invalid("rotation augmentation expects a square crop"));
    }
    let [lo, hi] = spec.rotation_degrees;
    let angle = rng.gen_range(lo..=hi);
    let record = AppliedAugmentation {
        rotation_degrees: angle,
        ..Default::default()
    };
    Ok((rotate(image, angle), record))
}

pub fn gaussian_blur_random<R: Rng + ?Sized>(
    image: &ImageBuffer,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> (ImageBuffer, AppliedAugmentation) {
    let steps = (spec.blur_kernel_max - spec.blur_kernel_min) / 2;
    let k = spec.blur_kernel_min + 2 * rng.gen_range(0..=steps);
    let sigma = sigma_for_kernel(k);
    let record = AppliedAugmentation {
        kernel_size: k,
        blur_sigma: sigma,
        ..Default::default()
    };
    (gaussian_blur(image, k, sigma), record)
}

/// Random rotated rectangle whose area is at most `occlusion_max_area_fraction`
/// of the image, placed uniformly and filled with a random color.
pub fn occlude_random_rect<R: Rng + ?Sized>(
    image: &ImageBuffer,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> (ImageBuffer, AppliedAugmentation) {
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let area = rng.gen_range(0.0..=spec.occlusion_max_area_fraction) * iw * ih;
    let aspect = 2f64.powf(rng.gen_range(-1.0..=1.0));
    let w = (area * aspect).sqrt().min(iw);
    let h = (area / aspect).sqrt().min(ih);
    let degrees = rng.gen_range(0.0..180.0);
    let center = [rng.gen_range(0.0..=iw), rng.gen_range(0.0..=ih)];
    let color = random_color(rng);
    occlude_rect(image, center, w, h, degrees, color)
}

/// Four points drawn uniformly over the pixel-center extent of the image; their
/// convex hull is painted with one random color.
pub fn occlude_random_quad<R: Rng + ?Sized>(image: &ImageBuffer, rng: &mut R) -> (ImageBuffer, AppliedAugmentation) {
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let mut pt = || {
        let x = if iw > 1.0 { rng.gen_range(0.5..iw - 0.5) } else { 0.5 };
        let y = if ih > 1.0 { rng.gen_range(0.5..ih - 0.5) } else { 0.5 };
        [x, y]
    };
    let points = [pt(), pt(), pt(), pt()];
    let color = random_color(rng);
    occlude_quad(image, points, color)
}

/// Training-time distortion: each distortion included by `mode` is applied
/// with its configured probability, in the order rotation, blur, occlusion.
pub fn apply_training_augmentation<R: Rng + ?Sized>(
    image: &ImageBuffer,
    spec: &AugmentationSpec,
    mode: TrainingMode,
    rng: &mut R,
) -> Result<(ImageBuffer, AppliedAugmentation)> {
    spec.validate()?;
    let mut out = image.clone();
    let mut record = AppliedAugmentation::default();

    if mode.includes(Distortion::Rotation) && spec.enable_rotation && rng.gen_bool(spec.rotation_probability) {
        let (img, r) = rotate_random(&out, spec, rng)?;
        out = img;
        record.merge(r);
    }
    if mode.includes(Distortion::Blur) && spec.enable_blur && rng.gen_bool(spec.blur_probability) {
        let (img, r) = gaussian_blur_random(&out, spec, rng);
        out = img;
        record.merge(r);
    }
    if mode.includes(Distortion::Occlusion) && spec.enable_occlusion && rng.gen_bool(spec.occlusion_probability) {
        let (img, r) = occlude_random_rect(&out, spec, rng);
        out = img;
        record.merge(r);
    }
    Ok((out, record))
}

pub const EVAL_SIGMA_RANGE: (f64, f64) = (1.0, 5.0);

/// Evaluation attack: blur with sigma drawn from [`EVAL_SIGMA_RANGE`], four-point
/// occlusion, or blur followed by occlusion.
pub fn make_eval_attack<R: Rng + ?Sized>(
    image: &ImageBuffer,
    attack: EvalAttack,
    rng: &mut R,
) -> (ImageBuffer, AppliedAugmentation) {
    let mut out = image.clone();
    let mut record = AppliedAugmentation::default();
    if matches!(attack, EvalAttack::Blur | EvalAttack::BlurOcc) {
        let sigma = rng.gen_range(EVAL_SIGMA_RANGE.0..=EVAL_SIGMA_RANGE.1);
        let k = kernel_for_sigma(sigma);
        out = gaussian_blur(&out, k, sigma);
        record.kernel_size = k;
        record.blur_sigma = sigma;
    }
    if matches!(attack, EvalAttack::Occlusion | EvalAttack::BlurOcc) {
        let (img, r) = occlude_random_quad(&out, rng);
        out = img;
        record.merge(r);
    }
    (out, record)
}
