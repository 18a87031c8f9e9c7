//! Detector interface plus the two bundled implementations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{BoundingBox, ImageBuffer};
use crate::error::Result;
use crate::pipeline::tracker::Detection;
use crate::seed::rng_for;
use crate::synth::ScenarioFrame;

pub trait Detector {
    fn detect(&mut self, frame: u64, image: &ImageBuffer) -> Result<Vec<Detection>>;
}

pub fn read_scenario(path: &Path) -> Result<Vec<ScenarioFrame>> {
    crate::data::read_jsonl(path)
}

pub fn write_scenario(path: &Path, frames: &[ScenarioFrame]) -> Result<()> {
    crate::data::write_lines(path, frames)
}

/// Replays annotated boxes, optionally with seeded position noise and dropout.
#[derive(Debug, Clone)]
pub struct GroundTruthDetector {
    frames: BTreeMap<u64, Vec<BoundingBox>>,
    /// Standard deviation of the box position noise, as a fraction of box size.
    pub jitter: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl GroundTruthDetector {
    pub fn new(scenario: &[ScenarioFrame]) -> Result<Self> {
        let mut frames = BTreeMap::new();
        for f in scenario {
            let boxes = f
                .boxes
                .iter()
                .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
                .collect::<Result<Vec<_>>>()?;
            frames.insert(f.frame, boxes);
        }
        Ok(GroundTruthDetector { frames, jitter: 0.0, dropout: 0.0, seed: 0 })
    }

    pub fn with_noise(mut self, jitter: f64, dropout: f64, seed: u64) -> Self {
        self.jitter = jitter;
        self.dropout = dropout;
        self.seed = seed;
        self
    }
}

impl Detector for GroundTruthDetector {
    fn detect(&mut self, frame: u64, image: &ImageBuffer) -> Result<Vec<Detection>> {
        let Some(boxes) = self.frames.get(&frame) else {
            return Ok(Vec::new());
        };
        // Per-frame generator: results do not depend on which frames were asked before.
        let mut rng = rng_for(self.seed, frame);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = Vec::new();
        for b in boxes {
            let drop = rng.gen::<f64>() < self.dropout;
            let (dx, dy) = (noise.sample(&mut rng), noise.sample(&mut rng));
            if drop {
                continue;
            }
            let mut bbox = *b;
            if self.jitter > 0.0 {
                bbox.x += dx * self.jitter * b.w;
                bbox.y += dy * self.jitter * b.h;
            }
            if let Some(clipped) = bbox.clip_to(image.width(), image.height()) {
                out.push(Detection { frame, bbox: clipped, confidence: 1.0 });
            }
        }
        Ok(out)
    }
}

/// Scans fixed-size windows and keeps those with strong local contrast,
/// suppressing overlaps. A placeholder for a real face detector.
#[derive(Debug, Clone)]
pub struct SlidingWindowDetector {
    pub window: usize,
    pub stride: usize,
    /// Minimum luma standard deviation (0..128) for a window to fire.
    pub min_contrast: f64,
    pub nms_iou: f64,
}

impl Default for SlidingWindowDetector {
    fn default() -> Self {
        SlidingWindowDetector { window: 64, stride: 16, min_contrast: 40.0, nms_iou: 0.3 }
    }
}

impl Detector for SlidingWindowDetector {
    fn detect(&mut self, frame: u64, image: &ImageBuffer) -> Result<Vec<Detection>> {
        let (w, h) = (image.width(), image.height());
        if self.window == 0 || self.window > w || self.window > h {
            return Ok(Vec::new());
        }
        let gray = image.grayscale();
        let stride = self.stride.max(1);
        let mut candidates = Vec::new();
        for y in (0..=h - self.window).step_by(stride) {
            for x in (0..=w - self.window).step_by(stride) {
                let (mut s, mut s2) = (0.0, 0.0);
                for yy in y..y + self.window {
                    for v in &gray[yy * w + x..yy * w + x + self.window] {
                        s += v;
                        s2 += v * v;
                    }
                }
                let n = (self.window * self.window) as f64;
                let std = (s2 / n - (s / n).powi(2)).max(0.0).sqrt();
                if std >= self.min_contrast {
                    let bbox = BoundingBox { x: x as f64, y: y as f64, w: self.window as f64, h: self.window as f64 };
                    candidates.push((std, bbox));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut kept: Vec<Detection> = Vec::new();
        for (std, bbox) in candidates {
            if kept.iter().all(|k| k.bbox.iou(&bbox) < self.nms_iou) {
                kept.push(Detection { frame, bbox, confidence: (std / 128.0).min(1.0) });
            }
        }
        Ok(kept)
    }
}
