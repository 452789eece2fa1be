//! Keypoint geometry: the five-point face template and the restricted
//! similarity transform (rotation + uniform scale + translation, no shear)
//! that aligns detected keypoints to it.
//!
//! The solver stacks two rows per point correspondence into a `2P x 4`
//! linear system over the unknowns `(s*cos(theta), s*sin(theta), tx, ty)`
//! and takes the least-squares solution through a small singular value
//! decomposition. No general linear-algebra dependency is needed for a
//! rank-4 system.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratio of smallest to largest singular value below which the stacked
/// system is treated as rank-deficient.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Canonical keypoint order: left eye, right eye, nose, left mouth corner,
/// right mouth corner.
pub const CANONICAL_POINT_COUNT: usize = 5;

/// Indices of the horizontally symmetric pairs in a canonical 5-point set.
pub const SYMMETRIC_PAIRS: [(usize, usize); 2] = [(0, 1), (3, 4)];

/// Index of the nose point, which sits on the face centerline.
pub const NOSE_INDEX: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("point count mismatch: {left} vs {right}")]
    MismatchedLengths { left: usize, right: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum TemplateFileError {
    #[error("template file must have exactly {CANONICAL_POINT_COUNT} points, found {0}")]
    WrongPointCount(usize),
    #[error("malformed template line {line}: {reason}")]
    Malformed { line: usize, reason: &'static str },
    #[error("template violates its invariants: {0}")]
    Invalid(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An ordered list of 2D keypoints. All coordinates are finite by
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct KeypointSet {
    points: Vec<Point2>,
}

impl KeypointSet {
    pub fn new(points: Vec<Point2>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, GeometryError> {
        Self::new(pairs.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point2> {
        self.points.iter()
    }

    fn bounding_box(&self) -> (Point2, Point2) {
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        (min, max)
    }
}

impl TryFrom<Vec<Point2>> for KeypointSet {
    type Error = GeometryError;

    fn try_from(points: Vec<Point2>) -> Result<Self, Self::Error> {
        KeypointSet::new(points)
    }
}

impl From<KeypointSet> for Vec<Point2> {
    fn from(set: KeypointSet) -> Self {
        set.points
    }
}

/// A rigid-plus-uniform-scale mapping `p -> s*R(theta)*p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        theta: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(scale: f64, theta: f64, tx: f64, ty: f64) -> Self {
        Self {
            scale,
            theta,
            tx,
            ty,
        }
    }

    /// `(s*cos(theta), s*sin(theta))` — the two linear coefficients of the
    /// transform matrix.
    pub fn linear_coefficients(&self) -> (f64, f64) {
        (
            self.scale * self.theta.cos(),
            self.scale * self.theta.sin(),
        )
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (a, b) = self.linear_coefficients();
        Point2::new(a * p.x - b * p.y + self.tx, b * p.x + a * p.y + self.ty)
    }

    pub fn apply_set(&self, set: &KeypointSet) -> KeypointSet {
        KeypointSet {
            points: set.iter().map(|&p| self.apply(p)).collect(),
        }
    }

    /// The inverse mapping. Applying a transform and then its inverse
    /// recovers the input to within 1e-9 relative error.
    pub fn inverse(&self) -> SimilarityTransform {
        let s_inv = 1.0 / self.scale;
        let theta_inv = wrap_angle(-self.theta);
        let (a, b) = (s_inv * theta_inv.cos(), s_inv * theta_inv.sin());
        SimilarityTransform {
            scale: s_inv,
            theta: theta_inv,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }
}

/// Maps `theta` into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Applies `transform_point` to a single point per Eq.-style matrix form.
pub fn apply_transform(h: &SimilarityTransform, p: Point2) -> Point2 {
    h.apply(p)
}

/// Least-squares estimate of the similarity transform mapping `detected`
/// onto `template`.
///
/// Each correspondence `(x, y) -> (x', y')` contributes the two rows
///
/// ```text
/// [ x  -y  1  0 ] [ s*cos  s*sin  tx  ty ]^T = x'
/// [ y   x  0  1 ]                            = y'
/// ```
///
/// and the stacked `2P x 4` system is solved by singular value
/// decomposition. The system is rejected as degenerate when the ratio of
/// smallest to largest singular value falls below [`DEGENERACY_THRESHOLD`].
pub fn solve_similarity(
    detected: &KeypointSet,
    template: &KeypointSet,
) -> Result<SimilarityTransform, GeometryError> {
    if detected.len() != template.len() {
        return Err(GeometryError::MismatchedLengths {
            left: detected.len(),
            right: template.len(),
        });
    }
    if detected.len() < 2 {
        return Err(GeometryError::DegenerateInput(
            "at least 2 correspondences required",
        ));
    }
    if detected.iter().any(|p| !p.is_finite()) || template.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }

    let n = detected.len();
    let mut a = Vec::with_capacity(2 * n);
    let mut b = Vec::with_capacity(2 * n);
    for (u, v) in detected.iter().zip(template.iter()) {
        a.push([u.x, -u.y, 1.0, 0.0]);
        b.push(v.x);
        a.push([u.y, u.x, 0.0, 1.0]);
        b.push(v.y);
    }

    let svd = thin_svd_4(&a);
    let s_max = svd.sigma.iter().cloned().fold(0.0_f64, f64::max);
    let s_min = svd.sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    if s_max <= 0.0 || s_min / s_max < DEGENERACY_THRESHOLD {
        return Err(GeometryError::DegenerateInput("rank-deficient system"));
    }

    let x = svd.solve_least_squares(&b);
    let scale = x[0].hypot(x[1]);
    if !(scale.is_finite() && scale > 0.0) {
        return Err(GeometryError::DegenerateInput("zero or non-finite scale"));
    }
    Ok(SimilarityTransform {
        scale,
        theta: x[1].atan2(x[0]),
        tx: x[2],
        ty: x[3],
    })
}

/// Root-mean-square distance between `h(detected_i)` and `template_i`.
pub fn residual(
    h: &SimilarityTransform,
    detected: &KeypointSet,
    template: &KeypointSet,
) -> Result<f64, GeometryError> {
    if detected.len() != template.len() {
        return Err(GeometryError::MismatchedLengths {
            left: detected.len(),
            right: template.len(),
        });
    }
    if detected.is_empty() {
        return Err(GeometryError::DegenerateInput("empty point sets"));
    }
    let sum_sq: f64 = detected
        .iter()
        .zip(template.iter())
        .map(|(&d, t)| {
            let m = h.apply(d);
            let dx = m.x - t.x;
            let dy = m.y - t.y;
            dx * dx + dy * dy
        })
        .sum();
    Ok((sum_sq / detected.len() as f64).sqrt())
}

/// Thin SVD of a tall matrix with 4 columns, via one-sided Jacobi
/// rotations. Returns `a = u * diag(sigma) * v^T` with orthonormal
/// `u` columns (where sigma > 0) and orthogonal `v`.
struct ThinSvd4 {
    u: Vec<[f64; 4]>,
    sigma: [f64; 4],
    v: [[f64; 4]; 4],
}

impl ThinSvd4 {
    /// Minimum-norm least squares via the pseudoinverse, zeroing
    /// directions whose singular value is negligible.
    fn solve_least_squares(&self, b: &[f64]) -> [f64; 4] {
        let s_max = self.sigma.iter().cloned().fold(0.0_f64, f64::max);
        let cutoff = s_max * DEGENERACY_THRESHOLD;
        let mut x = [0.0_f64; 4];
        for j in 0..4 {
            if self.sigma[j] <= cutoff {
                continue;
            }
            let mut dot = 0.0;
            for (row, &bi) in self.u.iter().zip(b.iter()) {
                dot += row[j] * bi;
            }
            let coeff = dot / self.sigma[j];
            for (xi, vrow) in x.iter_mut().zip(self.v.iter()) {
                *xi += coeff * vrow[j];
            }
        }
        x
    }
}

fn thin_svd_4(a: &[[f64; 4]]) -> ThinSvd4 {
    let mut w: Vec<[f64; 4]> = a.to_vec();
    let mut v = [[0.0_f64; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }

    let eps = 1e-15_f64;
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..3 {
            for q in (p + 1)..4 {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for row in &w {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in w.iter_mut() {
                    let wp = row[p];
                    let wq = row[q];
                    row[p] = c * wp - s * wq;
                    row[q] = s * wp + c * wq;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma = [0.0_f64; 4];
    for (j, s) in sigma.iter_mut().enumerate() {
        let norm_sq: f64 = w.iter().map(|row| row[j] * row[j]).sum();
        *s = norm_sq.sqrt();
    }
    for row in w.iter_mut() {
        for (j, &s) in sigma.iter().enumerate() {
            if s > 0.0 {
                row[j] /= s;
            }
        }
    }
    ThinSvd4 { u: w, sigma, v }
}

/// A canonical five-point layout in output-image coordinates, horizontally
/// symmetric about the vertical centerline with the nose on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointTemplate {
    pub points: KeypointSet,
    pub output_size: (u32, u32),
}

const SYMMETRY_TOLERANCE: f64 = 1e-9;

impl KeypointTemplate {
    /// Margin box the template points must lie inside: 20% at top, left
    /// and right edges, 10% at the bottom.
    pub fn margin_box(output_size: (u32, u32)) -> (f64, f64, f64, f64) {
        let w = output_size.0 as f64;
        let h = output_size.1 as f64;
        (0.2 * w, 0.8 * w, 0.2 * h, 0.9 * h)
    }

    /// Checks symmetry and margin invariants at 1e-9.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.points.len() != CANONICAL_POINT_COUNT {
            return Err(GeometryError::DegenerateInput(
                "template requires exactly 5 points",
            ));
        }
        let pts = self.points.points();
        let center = pts[NOSE_INDEX].x;
        for &(l, r) in &SYMMETRIC_PAIRS {
            if (pts[l].y - pts[r].y).abs() > SYMMETRY_TOLERANCE {
                return Err(GeometryError::DegenerateInput(
                    "symmetric pair y coordinates differ",
                ));
            }
            let dl = center - pts[l].x;
            let dr = pts[r].x - center;
            if (dl - dr).abs() > SYMMETRY_TOLERANCE {
                return Err(GeometryError::DegenerateInput(
                    "symmetric pair not equidistant from centerline",
                ));
            }
        }
        let (x_lo, x_hi, y_lo, y_hi) = Self::margin_box(self.output_size);
        for p in pts {
            if p.x < x_lo - SYMMETRY_TOLERANCE
                || p.x > x_hi + SYMMETRY_TOLERANCE
                || p.y < y_lo - SYMMETRY_TOLERANCE
                || p.y > y_hi + SYMMETRY_TOLERANCE
            {
                return Err(GeometryError::DegenerateInput(
                    "template point outside margin box",
                ));
            }
        }
        Ok(())
    }

    /// Serializes to the template file format: one `width height` line,
    /// then five `x y` lines.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.output_size.0, self.output_size.1);
        for p in self.points.iter() {
            let _ = writeln!(out, "{} {}", p.x, p.y);
        }
        out
    }

    /// Parses the template file format, rejecting files without exactly
    /// five points and templates violating the symmetry/margin invariants.
    pub fn from_file_string(text: &str) -> Result<Self, TemplateFileError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(TemplateFileError::Malformed {
            line: 1,
            reason: "missing size header",
        })?;
        let mut it = header.split_whitespace();
        let width: u32 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(TemplateFileError::Malformed {
                line: 1,
                reason: "bad width",
            })?;
        let height: u32 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(TemplateFileError::Malformed {
                line: 1,
                reason: "bad height",
            })?;
        if it.next().is_some() {
            return Err(TemplateFileError::Malformed {
                line: 1,
                reason: "trailing tokens in size header",
            });
        }

        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut it = line.split_whitespace();
            let x: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or(TemplateFileError::Malformed {
                    line: i + 2,
                    reason: "bad x coordinate",
                })?;
            let y: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or(TemplateFileError::Malformed {
                    line: i + 2,
                    reason: "bad y coordinate",
                })?;
            if it.next().is_some() {
                return Err(TemplateFileError::Malformed {
                    line: i + 2,
                    reason: "trailing tokens",
                });
            }
            points.push(Point2::new(x, y));
        }
        if points.len() != CANONICAL_POINT_COUNT {
            return Err(TemplateFileError::WrongPointCount(points.len()));
        }
        let template = KeypointTemplate {
            points: KeypointSet::new(points).map_err(TemplateFileError::Invalid)?,
            output_size: (width, height),
        };
        template.validate()?;
        Ok(template)
    }
}

/// Builds a canonical template from a raw five-point set: symmetrizes the
/// eye and mouth pairs about the face centerline, snaps the nose onto it,
/// then uniformly scales and translates the result into the margin box of
/// `output_size` (20% top/left/right, 10% bottom). The binding axis maps
/// exactly onto the margin box; the other axis is centered inside it.
pub fn build_template(
    raw: &KeypointSet,
    output_size: (u32, u32),
) -> Result<KeypointTemplate, GeometryError> {
    if raw.len() != CANONICAL_POINT_COUNT {
        return Err(GeometryError::DegenerateInput(
            "template requires exactly 5 points",
        ));
    }
    if output_size.0 == 0 || output_size.1 == 0 {
        return Err(GeometryError::DegenerateInput("zero output size"));
    }
    let pts = raw.points();
    for &(l, r) in &SYMMETRIC_PAIRS {
        if pts[l].x >= pts[r].x {
            return Err(GeometryError::DegenerateInput(
                "left/right keypoint order violated",
            ));
        }
    }
    let (min, max) = raw.bounding_box();
    if max.x - min.x <= 0.0 || max.y - min.y <= 0.0 {
        return Err(GeometryError::DegenerateInput(
            "raw bounding box has zero extent",
        ));
    }

    // Centerline: mean of the symmetric-pair midpoints and the nose.
    let eye_mid = (pts[0].x + pts[1].x) / 2.0;
    let mouth_mid = (pts[3].x + pts[4].x) / 2.0;
    let center = (eye_mid + mouth_mid + pts[NOSE_INDEX].x) / 3.0;

    let mut sym = [Point2::new(0.0, 0.0); CANONICAL_POINT_COUNT];
    for &(l, r) in &SYMMETRIC_PAIRS {
        let y = (pts[l].y + pts[r].y) / 2.0;
        let d = ((center - pts[l].x) + (pts[r].x - center)) / 2.0;
        sym[l] = Point2::new(center - d, y);
        sym[r] = Point2::new(center + d, y);
    }
    sym[NOSE_INDEX] = Point2::new(center, pts[NOSE_INDEX].y);

    let sym_set = KeypointSet::new(sym.to_vec())?;
    let (smin, smax) = sym_set.bounding_box();
    let bw = smax.x - smin.x;
    let bh = smax.y - smin.y;
    if bw <= 0.0 || bh <= 0.0 {
        return Err(GeometryError::DegenerateInput(
            "symmetrized bounding box has zero extent",
        ));
    }

    let (x_lo, x_hi, y_lo, y_hi) = KeypointTemplate::margin_box(output_size);
    let target_w = x_hi - x_lo;
    let target_h = y_hi - y_lo;
    let scale = (target_w / bw).min(target_h / bh);
    let out_center_x = output_size.0 as f64 / 2.0;
    let y_offset = y_lo + (target_h - scale * bh) / 2.0;

    let placed: Vec<Point2> = sym
        .iter()
        .map(|p| {
            Point2::new(
                out_center_x + scale * (p.x - center),
                y_offset + scale * (p.y - smin.y),
            )
        })
        .collect();

    let template = KeypointTemplate {
        points: KeypointSet::new(placed)?,
        output_size,
    };
    template.validate()?;
    Ok(template)
}

/// The canonical 224x224 five-point template shipped with the crate.
pub fn canonical_template() -> KeypointTemplate {
    KeypointTemplate::from_file_string(include_str!("../data/template_224.txt"))
        .expect("bundled template is valid")
}
