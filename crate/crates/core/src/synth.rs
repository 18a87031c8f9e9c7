//! Procedural face-like images for tests, demos and desk-scale runs.
//!
//! Faces are drawn in box-relative coordinates so the same identity can be
//! rendered as a standalone crop, inside an annotated canvas, or into a video
//! frame for the pipeline simulator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{round_u8, BoundingBox, DatasetManifest, FaceSample, ImageBuffer, LandmarkSet, ManifestRecord};
use crate::error::{FqaError, Result};
use crate::pipeline::ALIGNMENT_TEMPLATE_112;
use crate::seed::rng_from_seed;

/// Stable 64-bit mix (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(h: u64, salt: u64) -> f64 {
    (mix(h ^ mix(salt)) >> 11) as f64 / (1u64 << 53) as f64
}

struct FaceStyle {
    skin: [f64; 3],
    background: [f64; 3],
    hair: [f64; 3],
    rings: [(f64, f64, f64); 2],
    shift: (f64, f64),
    gain: f64,
}

impl FaceStyle {
    fn new(identity: u64, variant: u64) -> Self {
        let h = mix(identity.wrapping_mul(0x1000_0001));
        let v = mix(h ^ variant.wrapping_add(1).wrapping_mul(0x2545_F491_4F6C_DD1D));
        let color = |salt: u64, lo: f64, hi: f64| {
            [0, 1, 2].map(|c| lo + (hi - lo) * unit(h, salt * 3 + c))
        };
        // Concentric rings around the face centre: dense enough that blur
        // erases them, wavelength 12% to 24% of the face box.
        let mut rings = [(0.0, 0.0, 0.0); 2];
        for (i, w) in rings.iter_mut().enumerate() {
            let wavelength = 0.12 + 0.12 * unit(h, 50 + i as u64);
            let phase = 2.0 * std::f64::consts::PI * unit(h, 60 + i as u64) + 0.4 * (unit(v, 70 + i as u64) - 0.5);
            let amp = 60.0 + 40.0 * unit(h, 80 + i as u64);
            *w = (2.0 * std::f64::consts::PI / wavelength, phase, amp);
        }
        FaceStyle {
            skin: color(1, 110.0, 220.0),
            background: color(2, 20.0, 80.0),
            hair: color(3, 10.0, 120.0),
            rings,
            shift: (0.03 * (unit(v, 1) - 0.5), 0.03 * (unit(v, 2) - 0.5)),
            gain: 0.9 + 0.2 * unit(v, 3),
        }
    }

    /// Color at box-relative coordinates `(u, v)` in [0, 1]².
    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let (u, v) = (u - self.shift.0, v - self.shift.1);
        let r = ((u - 0.5).powi(2) + (v - 0.54).powi(2)).sqrt();
        let tex: f64 = self.rings.iter().map(|&(k, p, amp)| amp * (k * r + p).sin()).sum();
        let ell = |cu: f64, cv: f64, ru: f64, rv: f64| ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2);

        let mut c = if ell(0.5, 0.54, 0.38, 0.47) <= 1.0 {
            let mut c = self.skin;
            if v < 0.22 {
                c = self.hair;
            }
            c
        } else {
            let g = 0.6 + 0.4 * v;
            self.background.map(|b| b * g)
        };
        for ch in c.iter_mut() {
            *ch += tex;
        }

        let t = &ALIGNMENT_TEMPLATE_112;
        let rel = |i: usize| (t[i][0] / 112.0, t[i][1] / 112.0);
        for eye in [rel(0), rel(1)] {
            let d = ell(eye.0, eye.1, 0.075, 0.04);
            if d <= 1.0 {
                c = [235.0, 235.0, 230.0];
                if ell(eye.0, eye.1, 0.03, 0.03) <= 1.0 {
                    c = [25.0, 20.0, 30.0];
                }
            }
        }
        let nose = rel(2);
        if ell(nose.0, nose.1, 0.04, 0.035) <= 1.0 {
            c = c.map(|x| x * 0.55);
        }
        let (ml, mr) = (rel(3), rel(4));
        if ell((ml.0 + mr.0) / 2.0, (ml.1 + mr.1) / 2.0, (mr.0 - ml.0) / 2.0 + 0.02, 0.035) <= 1.0 {
            c = [150.0, 40.0, 50.0];
        }
        c.map(|x| x * self.gain)
    }
}

/// Draw a face for `identity` into `bbox` of `canvas`, returning its landmarks
/// in canvas coordinates.
pub fn render_face_into(canvas: &mut ImageBuffer, bbox: &BoundingBox, identity: u64, variant: u64) -> LandmarkSet {
    let style = FaceStyle::new(identity, variant);
    let x0 = bbox.x.floor().max(0.0) as usize;
    let y0 = bbox.y.floor().max(0.0) as usize;
    let x1 = (bbox.right().ceil() as usize).min(canvas.width());
    let y1 = (bbox.bottom().ceil() as usize).min(canvas.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - bbox.x) / bbox.w;
            let v = (y as f64 + 0.5 - bbox.y) / bbox.h;
            if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                continue;
            }
            let c = style.shade(u, v);
            canvas.set_pixel(x, y, c.map(round_u8));
        }
    }
    let (sx, sy) = style.shift;
    LandmarkSet {
        points: ALIGNMENT_TEMPLATE_112.map(|[px, py]| {
            [bbox.x + (px / 112.0 + sx) * bbox.w, bbox.y + (py / 112.0 + sy) * bbox.h]
        }),
    }
}

/// A standalone `size × size` face crop.
pub fn textured_face(identity: u64, variant: u64, size: usize) -> (ImageBuffer, LandmarkSet) {
    let mut img = ImageBuffer::filled(size, size, [0, 0, 0]);
    let bbox = BoundingBox { x: 0.0, y: 0.0, w: size as f64, h: size as f64 };
    let lm = render_face_into(&mut img, &bbox, identity, variant);
    (img, lm)
}

/// Side of the square canvas used for synthetic dataset images.
pub const SAMPLE_CANVAS: usize = 128;

/// A canvas with one face inside an annotated box (the face occupies the box
/// with a margin of background around it).
pub fn synthetic_sample(identity: u64, variant: u64) -> (ImageBuffer, BoundingBox, LandmarkSet) {
    let style = FaceStyle::new(identity, variant);
    let mut canvas = ImageBuffer::from_fn(SAMPLE_CANVAS, SAMPLE_CANVAS, |x, y| {
        let g = 0.7 + 0.3 * (y as f64 / SAMPLE_CANVAS as f64);
        let base = style.background.map(|b| b * g * 0.8 + 10.0 * ((x as f64) * 0.21).sin());
        base.map(round_u8)
    });
    let bbox = BoundingBox { x: 12.0, y: 10.0, w: 104.0, h: 108.0 };
    let lm = render_face_into(&mut canvas, &bbox, identity, variant);
    (canvas, bbox, lm)
}

/// In-memory synthetic samples with ids `idNNNN_VV`, identity-major order.
pub fn synthetic_samples(n_identities: usize, per_identity: usize) -> Vec<FaceSample> {
    (0..n_identities)
        .flat_map(|id| (0..per_identity).map(move |var| (id, var)))
        .map(|(id, var)| {
            let (img, bbox, lm) = synthetic_sample(id as u64, var as u64);
            FaceSample {
                image: img,
                identity: format!("id{id:04}"),
                bbox: Some(bbox),
                landmarks: Some(lm),
                source_id: format!("id{id:04}_{var:02}"),
            }
        })
        .collect()
}

/// Write `n_identities × per_identity` synthetic samples as PNGs plus a
/// `manifest.jsonl` under `dir`; returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, n_identities: usize, per_identity: usize) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| FqaError::io(&img_dir, e))?;
    let mut records = Vec::new();
    for id in 0..n_identities {
        for var in 0..per_identity {
            let (img, bbox, lm) = synthetic_sample(id as u64, var as u64);
            let rel = format!("images/id{id:04}_{var:02}.png");
            img.save_png(&dir.join(&rel))?;
            records.push(ManifestRecord {
                path: rel,
                identity: format!("id{id:04}"),
                bbox,
                landmarks: lm,
                split: None,
            });
        }
    }
    let manifest = DatasetManifest { records, root: dir.to_path_buf(), dropped: 0 };
    let path = dir.join("manifest.jsonl");
    manifest.write_jsonl(&path)?;
    Ok(path)
}

/// One line of a pipeline scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFrame {
    pub frame: u64,
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identities: Option<Vec<String>>,
}

/// People walking across a `width × height` scene: each starts at a random
/// position and moves with constant velocity for a random span of frames.
pub fn synthetic_scenario(n_people: usize, n_frames: u64, width: f64, height: f64, seed: u64) -> Vec<ScenarioFrame> {
    let mut rng = rng_from_seed(seed);
    struct Walker {
        start: u64,
        end: u64,
        pos: (f64, f64),
        vel: (f64, f64),
        size: f64,
    }
    let walkers: Vec<Walker> = (0..n_people)
        .map(|_| {
            let size = rng.gen_range(48.0..80.0);
            let start = rng.gen_range(0..n_frames.max(1));
            let len = rng.gen_range(n_frames / 3..=n_frames).max(1);
            Walker {
                start,
                end: (start + len).min(n_frames),
                pos: (rng.gen_range(0.0..width - size), rng.gen_range(0.0..height - size)),
                vel: (rng.gen_range(-4.0..4.0), rng.gen_range(-2.0..2.0)),
                size,
            }
        })
        .collect();
    (0..n_frames)
        .map(|f| {
            let mut boxes = Vec::new();
            let mut ids = Vec::new();
            for (i, w) in walkers.iter().enumerate() {
                if f < w.start || f >= w.end {
                    continue;
                }
                let t = (f - w.start) as f64;
                let x = (w.pos.0 + w.vel.0 * t).clamp(0.0, width - w.size);
                let y = (w.pos.1 + w.vel.1 * t).clamp(0.0, height - w.size);
                boxes.push([x, y, w.size, w.size]);
                ids.push(format!("person{i}"));
            }
            ScenarioFrame { frame: f, boxes, identities: Some(ids) }
        })
        .collect()
}

/// Render the frame for one scenario line: a static background with each
/// annotated person drawn into their box.
pub fn render_scenario_frame(frame: &ScenarioFrame, width: usize, height: usize) -> ImageBuffer {
    let mut canvas = ImageBuffer::from_fn(width, height, |x, y| {
        let v = 60.0 + 40.0 * ((x as f64) * 0.05).sin() * ((y as f64) * 0.04).cos();
        [round_u8(v), round_u8(v + 10.0), round_u8(v + 20.0)]
    });
    for (i, b) in frame.boxes.iter().enumerate() {
        let identity = frame
            .identities
            .as_ref()
            .and_then(|ids| ids.get(i))
            .map(|s| mix(s.bytes().fold(0u64, |h, c| h.wrapping_mul(31).wrapping_add(c as u64))))
            .unwrap_or(i as u64);
        if let Ok(bbox) = BoundingBox::new(b[0], b[1], b[2], b[3]) {
            render_face_into(&mut canvas, &bbox, identity, frame.frame);
        }
    }
    canvas
}
