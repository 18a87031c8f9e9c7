//! Five-point similarity alignment onto the 112×112 recognition template.

use crate::data::{round_u8, ImageBuffer, LandmarkSet};
use crate::error::{FqaError, Result};

pub const ALIGNED_SIZE: usize = 112;

/// Canonical landmark positions (left eye, right eye, nose, mouth left, mouth
/// right) in 112×112 crop coordinates.
pub const ALIGNMENT_TEMPLATE_112: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentTemplate {
    pub points: [[f64; 2]; 5],
    pub size: usize,
}

impl Default for AlignmentTemplate {
    fn default() -> Self {
        AlignmentTemplate {
            points: ALIGNMENT_TEMPLATE_112,
            size: ALIGNED_SIZE,
        }
    }
}

/// `p ↦ [a −b; b a]·p + t`: rotation, uniform scale and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 };

    pub fn from_parts(scale: f64, degrees: f64, tx: f64, ty: f64) -> Self {
        let r = degrees.to_radians();
        SimilarityTransform {
            a: scale * r.cos(),
            b: scale * r.sin(),
            tx,
            ty,
        }
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Rotation angle in degrees (positive turns +x towards +y).
    pub fn rotation_degrees(&self) -> f64 {
        self.b.atan2(self.a).to_degrees()
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let d = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / d, -self.b / d);
        SimilarityTransform {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }
}

/// Least-squares similarity mapping `src` onto `dst`.
///
/// Fails when the source points are (nearly) collinear, since the rotation is
/// then not determined well enough to align a face.
pub fn estimate_similarity(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(FqaError::invalid("similarity estimation needs matching point lists of length ≥ 2"));
    }
    let n = src.len() as f64;
    let mean = |pts: &[[f64; 2]]| {
        let s = pts.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let (ms, md) = (mean(src), mean(dst));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    let (mut num_a, mut num_b) = (0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (px, py) = (p[0] - ms[0], p[1] - ms[1]);
        let (qx, qy) = (q[0] - md[0], q[1] - md[1]);
        sxx += px * px;
        syy += py * py;
        sxy += px * py;
        num_a += px * qx + py * qy;
        num_b += px * qy - py * qx;
    }
    let spread = sxx + syy;
    // det/trace² of the scatter matrix: 0 for collinear points, 1/4 for isotropic.
    let shape = (sxx * syy - sxy * sxy) / (spread * spread);
    if !spread.is_finite() || spread <= 1e-12 || shape < 1e-6 {
        return Err(FqaError::invalid("degenerate landmark configuration: points are collinear or coincident"));
    }
    let a = num_a / spread;
    let b = num_b / spread;
    Ok(SimilarityTransform {
        a,
        b,
        tx: md[0] - (a * ms[0] - b * ms[1]),
        ty: md[1] - (b * ms[0] + a * ms[1]),
    })
}

/// Warp `source` so `landmarks` land on the template; returns the aligned crop
/// and the source → crop transform.
pub fn align_face_with_transform(
    source: &ImageBuffer,
    landmarks: &LandmarkSet,
    template: &AlignmentTemplate,
) -> Result<(ImageBuffer, SimilarityTransform)> {
    let t = estimate_similarity(&landmarks.points, &template.points)?;
    let inv = t.inverse();
    let out = ImageBuffer::from_fn(template.size, template.size, |x, y| {
        let [sx, sy] = inv.apply([x as f64, y as f64]);
        source.sample_bilinear_black(sx, sy).map(round_u8)
    });
    Ok((out, t))
}

pub fn align_face(source: &ImageBuffer, landmarks: &LandmarkSet, template: &AlignmentTemplate) -> Result<ImageBuffer> {
    align_face_with_transform(source, landmarks, template).map(|(img, _)| img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_eyes_are_level() {
        assert!((ALIGNMENT_TEMPLATE_112[0][1] - ALIGNMENT_TEMPLATE_112[1][1]).abs() < 0.2);
    }

    #[test]
    fn inverse_round_trips() {
        let t = SimilarityTransform::from_parts(1.7, 23.0, -4.0, 9.5);
        let p = [12.0, -3.0];
        let q = t.inverse().apply(t.apply(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn recovers_exact_transform() {
        let t = SimilarityTransform::from_parts(0.8, -37.0, 11.0, 2.0);
        let src = ALIGNMENT_TEMPLATE_112;
        let dst = src.map(|p| t.apply(p));
        let e = estimate_similarity(&src, &dst).unwrap();
        assert!((e.scale() - 0.8).abs() < 1e-12);
        assert!((e.rotation_degrees() + 37.0).abs() < 1e-10);
        assert!((e.tx - 11.0).abs() < 1e-10 && (e.ty - 2.0).abs() < 1e-10);
    }

    #[test]
    fn collinear_and_coincident_rejected() {
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]];
        assert!(estimate_similarity(&line, &ALIGNMENT_TEMPLATE_112).is_err());
        let dot = [[5.0, 5.0]; 5];
        assert!(estimate_similarity(&dot, &ALIGNMENT_TEMPLATE_112).is_err());
        let lm = LandmarkSet { points: line };
        let img = ImageBuffer::filled(8, 8, [1, 2, 3]);
        assert!(align_face(&img, &lm, &AlignmentTemplate::default()).is_err());
    }
}
