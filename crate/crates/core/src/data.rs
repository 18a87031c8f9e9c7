//! Domain types shared by every stage: images, boxes, landmarks, samples and
//! dataset manifests.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FqaError, Result};
use crate::seed::rng_from_seed;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(FqaError::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(FqaError::invalid(format!(
                "image data length {} does not match {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at pixel-center coordinates (pixel `(i, j)` sits at `(i, j)`).
    /// Samples falling outside the image read black.
    pub fn sample_bilinear_black(&self, x: f64, y: f64) -> [f64; 3] {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut out = [0.0; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let (sx, sy) = (x0 + dx, y0 + dy);
                if sx < 0 || sy < 0 || sx >= self.width as i64 || sy >= self.height as i64 {
                    continue;
                }
                let p = self.pixel(sx as usize, sy as usize);
                let w = wx * wy;
                for c in 0..3 {
                    out[c] += w * p[c] as f64;
                }
            }
        }
        out
    }

    /// Bilinear sample with coordinates clamped to the image (edge replication).
    pub fn sample_bilinear_clamped(&self, x: f64, y: f64) -> [f64; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            out[c] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Luma plane using 0.299 R + 0.587 G + 0.114 B.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Bilinear resize using half-pixel-center alignment.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> ImageBuffer {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        resample_region(
            self,
            (0.0, 0.0, self.width as f64, self.height as f64),
            out_w,
            out_h,
        )
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let total: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() as u64)
            .sum();
        total as f64 / self.data.len() as f64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => FqaError::io(path, io),
            other => FqaError::Image(other),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImageBuffer::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => FqaError::io(path, io),
                other => FqaError::Image(other),
            })
    }
}

pub(crate) fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Resample the region `(x, y, w, h)` (continuous pixel-edge coordinates) to
/// `out_w × out_h` with bilinear interpolation and edge replication.
pub(crate) fn resample_region(
    src: &ImageBuffer,
    region: (f64, f64, f64, f64),
    out_w: usize,
    out_h: usize,
) -> ImageBuffer {
    let (rx, ry, rw, rh) = region;
    let sx = rw / out_w as f64;
    let sy = rh / out_h as f64;
    ImageBuffer::from_fn(out_w, out_h, |ox, oy| {
        let x = rx + (ox as f64 + 0.5) * sx - 0.5;
        let y = ry + (oy as f64 + 0.5) * sy - 0.5;
        let p = src.sample_bilinear_clamped(x, y);
        [round_u8(p[0]), round_u8(p[1]), round_u8(p[2])]
    })
}

/// Axis-aligned box: top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(FqaError::invalid(format!(
                "bounding box ({x}, {y}, {w}, {h}) must be finite with positive extent"
            )));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let iy = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Intersection with a `width × height` image, if non-empty.
    pub fn clip_to(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width as f64);
        let y1 = self.bottom().min(height as f64);
        (x1 > x0 && y1 > y0).then_some(BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Five facial landmarks: left eye, right eye, nose tip, left mouth corner,
/// right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: [[f64; 2]; 5],
}

impl LandmarkSet {
    pub fn new(points: [[f64; 2]; 5]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FqaError::invalid("landmark coordinates must be finite"));
        }
        Ok(LandmarkSet { points })
    }

    /// Build from the interleaved `[x1, y1, ..., x5, y5]` layout.
    pub fn from_interleaved(values: &[f64]) -> Result<Self> {
        if values.len() != 10 {
            return Err(FqaError::invalid(format!(
                "expected 10 landmark values, got {}",
                values.len()
            )));
        }
        let mut points = [[0.0; 2]; 5];
        for (i, p) in points.iter_mut().enumerate() {
            *p = [values[2 * i], values[2 * i + 1]];
        }
        LandmarkSet::new(points)
    }

    pub fn to_interleaved(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        for (i, p) in self.points.iter().enumerate() {
            out[2 * i] = p[0];
            out[2 * i + 1] = p[1];
        }
        out
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> LandmarkSet {
        LandmarkSet {
            points: self.points.map(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub image: ImageBuffer,
    pub identity: String,
    pub bbox: Option<BoundingBox>,
    pub landmarks: Option<LandmarkSet>,
    pub source_id: String,
}

impl FaceSample {
    pub fn new(
        image: ImageBuffer,
        identity: impl Into<String>,
        bbox: Option<BoundingBox>,
        landmarks: Option<LandmarkSet>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let identity = identity.into();
        if identity.is_empty() {
            return Err(FqaError::invalid("identity must be non-empty"));
        }
        if let Some(b) = &bbox {
            if b.clip_to(image.width(), image.height()).is_none() {
                return Err(FqaError::invalid("bounding box does not intersect the image"));
            }
        }
        Ok(FaceSample {
            image,
            identity,
            bbox,
            landmarks,
            source_id: source_id.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub identity: String,
    pub bbox: BoundingBox,
    pub landmarks: LandmarkSet,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory against which relative record paths resolve.
    pub root: PathBuf,
    /// Records dropped at load time because an annotation was missing.
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestFormat {
    Jsonl,
    CelebaTriplet,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    path: String,
    #[serde(default)]
    identity: Option<String>,
    #[serde(default)]
    bbox: Option<Vec<f64>>,
    #[serde(default)]
    landmarks: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

pub const CELEBA_IDENTITY_FILE: &str = "identity_CelebA.txt";
pub const CELEBA_BBOX_FILE: &str = "list_bbox_celeba.txt";
pub const CELEBA_LANDMARK_FILE: &str = "list_landmarks_celeba.txt";
pub const CELEBA_PARTITION_FILE: &str = "list_eval_partition.txt";

impl DatasetManifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn identities(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.identity.as_str()).collect()
    }

    pub fn with_split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == Some(split))
                .cloned()
                .collect(),
            root: self.root.clone(),
            dropped: 0,
        }
    }

    /// Read every record's image and attach its annotations.
    pub fn load_samples(&self) -> Result<Vec<FaceSample>> {
        self.records
            .iter()
            .map(|r| {
                let image = ImageBuffer::load(&self.resolve(r))?;
                FaceSample::new(image, r.identity.clone(), Some(r.bbox), Some(r.landmarks), r.path.clone())
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            let rec = JsonlRecord {
                path: r.path.clone(),
                identity: Some(r.identity.clone()),
                bbox: Some(r.bbox.as_array().to_vec()),
                landmarks: Some(r.landmarks.to_interleaved().to_vec()),
                split: r.split,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| FqaError::io(path, e))
    }
}

pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<DatasetManifest> {
    let manifest = match format {
        ManifestFormat::Jsonl => load_jsonl(path)?,
        ManifestFormat::CelebaTriplet => load_celeba(path)?,
    };
    if manifest.dropped > 0 {
        warn!(
            "{}: dropped {} record(s) with missing annotations",
            path.display(),
            manifest.dropped
        );
    }
    let mut seen = HashSet::new();
    for r in &manifest.records {
        if !seen.insert(r.path.as_str()) {
            return Err(FqaError::invalid(format!("duplicate manifest path {}", r.path)));
        }
    }
    Ok(manifest)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| FqaError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| FqaError::io(path, e))
}

fn load_jsonl(path: &Path) -> Result<DatasetManifest> {
    let parse_err = |line: usize, msg: String| FqaError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    let mut dropped = 0;
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonlRecord =
            serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let (Some(identity), Some(bbox), Some(landmarks)) = (raw.identity, raw.bbox, raw.landmarks)
        else {
            dropped += 1;
            continue;
        };
        if identity.is_empty() {
            dropped += 1;
            continue;
        }
        if bbox.len() != 4 {
            return Err(parse_err(lineno, format!("bbox needs 4 numbers, got {}", bbox.len())));
        }
        let bbox = BoundingBox::new(bbox[0], bbox[1], bbox[2], bbox[3])
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let landmarks =
            LandmarkSet::from_interleaved(&landmarks).map_err(|e| parse_err(lineno, e.to_string()))?;
        records.push(ManifestRecord {
            path: raw.path,
            identity,
            bbox,
            landmarks,
            split: raw.split,
        });
    }
    Ok(DatasetManifest {
        records,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        dropped,
    })
}

/// Parse one of the CelebA annotation tables into `filename -> numeric columns`.
/// `skip_header` is the number of leading lines (count + column names) to skip.
fn read_celeba_table(
    path: &Path,
    skip_header: usize,
    columns: usize,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate().skip(skip_header) {
        let mut tokens = line.split_whitespace();
        let Some(name) = tokens.next() else { continue };
        let values = tokens
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| FqaError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if values.len() != columns {
            return Err(FqaError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {columns} values, got {}", values.len()),
            });
        }
        out.insert(name.to_string(), values);
    }
    Ok(out)
}

/// Join the CelebA identity, bbox and landmark files found in `dir`.
/// `list_eval_partition.txt` is optional; partition 0 maps to train, 1 and 2 to eval.
fn load_celeba(dir: &Path) -> Result<DatasetManifest> {
    let id_path = dir.join(CELEBA_IDENTITY_FILE);
    let bbox = read_celeba_table(&dir.join(CELEBA_BBOX_FILE), 2, 4)?;
    let landmarks = read_celeba_table(&dir.join(CELEBA_LANDMARK_FILE), 2, 10)?;
    let partition_path = dir.join(CELEBA_PARTITION_FILE);
    let partition = if partition_path.exists() {
        Some(read_celeba_table(&partition_path, 0, 1)?)
    } else {
        None
    };

    let mut records = Vec::new();
    let mut dropped = 0;
    for (i, line) in read_lines(&id_path)?.iter().enumerate() {
        let mut tokens = line.split_whitespace();
        let (Some(name), Some(identity)) = (tokens.next(), tokens.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(FqaError::Parse {
                path: id_path.clone(),
                line: i + 1,
                msg: "expected `<image> <identity>`".into(),
            });
        };
        let (Some(b), Some(l)) = (bbox.get(name), landmarks.get(name)) else {
            dropped += 1;
            continue;
        };
        let Ok(b) = BoundingBox::new(b[0], b[1], b[2], b[3]) else {
            dropped += 1;
            continue;
        };
        let split = partition
            .as_ref()
            .and_then(|p| p.get(name))
            .map(|v| if v[0] == 0.0 { Split::Train } else { Split::Eval });
        records.push(ManifestRecord {
            path: name.to_string(),
            identity: identity.to_string(),
            bbox: b,
            landmarks: LandmarkSet::from_interleaved(l)?,
            split,
        });
    }
    Ok(DatasetManifest {
        records,
        root: dir.to_path_buf(),
        dropped,
    })
}

/// Expanded crop region `(x, y, w, h)` for a box grown by `margin` of its size on every side.
pub fn crop_region(bbox: &BoundingBox, margin: f64) -> (f64, f64, f64, f64) {
    let mx = bbox.w * margin;
    let my = bbox.h * margin;
    (bbox.x - mx, bbox.y - my, bbox.w + 2.0 * mx, bbox.h + 2.0 * my)
}

/// Cut the sample's face out, grow it by `margin`, clip to the image and
/// resample to `output_size × output_size`. Landmarks, when present, come back in
/// crop coordinates.
pub fn crop_face(
    sample: &FaceSample,
    output_size: usize,
    margin: f64,
) -> Result<(ImageBuffer, Option<LandmarkSet>)> {
    let bbox = sample
        .bbox
        .ok_or_else(|| FqaError::invalid("crop_face requires a bounding box"))?;
    crop_box(&sample.image, &bbox, sample.landmarks.as_ref(), output_size, margin)
}

pub fn crop_box(
    image: &ImageBuffer,
    bbox: &BoundingBox,
    landmarks: Option<&LandmarkSet>,
    output_size: usize,
    margin: f64,
) -> Result<(ImageBuffer, Option<LandmarkSet>)> {
    if output_size == 0 {
        return Err(FqaError::invalid("output size must be positive"));
    }
    let (x, y, w, h) = crop_region(bbox, margin);
    let grown = BoundingBox { x, y, w, h };
    let clipped = grown
        .clip_to(image.width(), image.height())
        .ok_or_else(|| FqaError::invalid("bounding box lies entirely outside the image"))?;
    let region = (clipped.x, clipped.y, clipped.w, clipped.h);
    let crop = resample_region(image, region, output_size, output_size);
    let sx = output_size as f64 / clipped.w;
    let sy = output_size as f64 / clipped.h;
    let lm = landmarks.map(|l| l.map(|[px, py]| [(px - clipped.x) * sx, (py - clipped.y) * sy]));
    Ok((crop, lm))
}

/// Size and margin used to turn annotated samples into recognition crops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub size: usize,
    pub margin: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            size: 112,
            margin: 0.1,
        }
    }
}

impl CropConfig {
    pub fn crop(&self, sample: &FaceSample) -> Result<ImageBuffer> {
        crop_face(sample, self.size, self.margin).map(|(img, _)| img)
    }
}

/// Identity-disjoint split; returns `(train, eval)` with split tags set.
pub fn split_train_eval(
    manifest: &DatasetManifest,
    eval_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(FqaError::invalid("eval_fraction must lie strictly between 0 and 1"));
    }
    let mut ids: Vec<&str> = manifest.identities().into_iter().collect();
    if ids.len() < 2 {
        return Err(FqaError::invalid("identity-disjoint split needs at least 2 identities"));
    }
    ids.shuffle(&mut rng_from_seed(seed));
    let n_eval = ((ids.len() as f64 * eval_fraction).round() as usize).clamp(1, ids.len() - 1);
    let eval_ids: HashSet<&str> = ids[..n_eval].iter().copied().collect();

    let mut train = DatasetManifest {
        root: manifest.root.clone(),
        ..Default::default()
    };
    let mut eval = train.clone();
    for r in &manifest.records {
        let mut r = r.clone();
        if eval_ids.contains(r.identity.as_str()) {
            r.split = Some(Split::Eval);
            eval.records.push(r);
        } else {
            r.split = Some(Split::Train);
            train.records.push(r);
        }
    }
    Ok((train, eval))
}

/// Reference to the `index`-th (1-based) image of an identity, LFW style.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRef {
    pub identity: String,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FacePair {
    pub a: PairRef,
    pub b: PairRef,
    pub same_identity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairList {
    pub pairs: Vec<FacePair>,
}

impl PairList {
    /// Parse the LFW `pairs.txt` layout: a header line, then `name i j` for
    /// matched pairs and `name1 i name2 j` for mismatched ones.
    pub fn load_lfw(path: &Path) -> Result<PairList> {
        let lines = read_lines(path)?;
        let mut pairs = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let t: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: String| FqaError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let idx = |s: &str| s.parse::<u32>().map_err(|e| err(e.to_string()));
            let pair = match t.as_slice() {
                [] => continue,
                [name, a, b] => FacePair {
                    a: PairRef { identity: name.to_string(), index: idx(a)? },
                    b: PairRef { identity: name.to_string(), index: idx(b)? },
                    same_identity: true,
                },
                [n1, a, n2, b] => FacePair {
                    a: PairRef { identity: n1.to_string(), index: idx(a)? },
                    b: PairRef { identity: n2.to_string(), index: idx(b)? },
                    same_identity: false,
                },
                _ => return Err(err(format!("expected 3 or 4 fields, got {}", t.len()))),
            };
            pairs.push(pair);
        }
        Ok(PairList { pairs })
    }

    /// Resolve every reference to a manifest record index using the LFW file
    /// naming `<name>/<name>_<NNNN>.<ext>`.
    pub fn resolve(&self, manifest: &DatasetManifest) -> Result<Vec<(usize, usize, bool)>> {
        let by_stem: HashMap<String, usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                Path::new(&r.path)
                    .file_stem()
                    .map(|s| (s.to_string_lossy().into_owned(), i))
            })
            .collect();
        let lookup = |r: &PairRef| {
            let stem = format!("{}_{:04}", r.identity, r.index);
            by_stem
                .get(&stem)
                .copied()
                .ok_or_else(|| FqaError::invalid(format!("pair reference {stem} not in manifest")))
        };
        self.pairs
            .iter()
            .map(|p| Ok((lookup(&p.a)?, lookup(&p.b)?, p.same_identity)))
            .collect()
    }
}

pub(crate) fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| FqaError::io(path, e))?;
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| FqaError::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| FqaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}
