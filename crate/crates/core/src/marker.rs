//! Marker designs and the per-frame projective quantities `m0`, `m1`, `l∞`.
//!
//! World frame convention for every kind: the space point of `m0` is the
//! origin, the space point of `m1` is `(L_x, 0, 0)`, the marker lies in
//! `z = 0` and `+z` faces the camera.

use nalgebra::{Complex, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{adjugate, polar_line, pole_of, Conic, GeometryError, Line2, Point2H};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkerError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid marker spec: {0}")]
    InvalidSpec(String),
    #[error("no pencil line passes the one-side test")]
    NoValidLine,
    #[error("conic is not an ellipse in the image")]
    NotAnEllipse,
    #[error("kind {kind:?} expects {expected} {what}, got {got}")]
    Cardinality { kind: MarkerKind, what: &'static str, expected: String, got: usize },
    #[error("feature points are inconsistent with the imaged circles: {0}")]
    InconsistentFeatures(String),
    #[error("m1 candidates are ambiguous on the first frame")]
    Ambiguous,
    #[error("degenerate observation: {0}")]
    Degenerate(String),
}

/// The six circle-based marker designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerKind {
    /// Two disjoint circles told apart by color; `m0`, `m1` are the centers.
    A,
    /// Two disjoint circles and a feature point inside circle 0.
    B,
    /// Two concentric circles and a feature point between them.
    C,
    /// One circle with its center point and a point outside.
    D,
    /// One circle with a center feature and symmetric direction features.
    E,
    /// One circle, radii intersection at the center and radius/edge points.
    F,
}

/// Disk of the marker in world-plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleSpec {
    pub center: [f64; 2],
    pub radius: f64,
    /// Rendered intensity in `[0, 1]`.
    #[serde(default)]
    pub fill: f64,
}

/// Point feature, rendered as a small dot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub position: [f64; 2],
    pub radius: f64,
    #[serde(default = "white")]
    pub fill: f64,
}

fn white() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub kind: MarkerKind,
    pub circles: Vec<CircleSpec>,
    #[serde(default)]
    pub features: Vec<FeatureSpec>,
    /// Distance between the space points of `m0` and `m1`, meters.
    pub l_x: f64,
    /// Color labels of kind-A circles in `m0`, `m1` order.
    #[serde(default)]
    pub colors: Vec<String>,
}

const SPEC_TOL: f64 = 1e-9;

impl MarkerSpec {
    /// Two disks of equal radius with centers `separation` apart; circle 0 is
    /// rendered darker so grayscale images keep the two apart.
    pub fn two_circles(radius: f64, separation: f64) -> Self {
        Self {
            kind: MarkerKind::A,
            circles: vec![
                CircleSpec { center: [0.0, 0.0], radius, fill: 0.0 },
                CircleSpec { center: [separation, 0.0], radius, fill: 0.25 },
            ],
            features: Vec::new(),
            l_x: separation,
            colors: vec!["red".into(), "blue".into()],
        }
    }

    /// Representative geometry for each kind (meters).
    pub fn preset(kind: MarkerKind) -> Self {
        let dot = |x: f64, y: f64, fill: f64| FeatureSpec { position: [x, y], radius: 0.008, fill };
        let disk = |x: f64, r: f64, fill: f64| CircleSpec { center: [x, 0.0], radius: r, fill };
        match kind {
            MarkerKind::A => Self::two_circles(0.05, 0.15),
            MarkerKind::B => Self {
                kind,
                circles: vec![disk(0.0, 0.05, 0.0), disk(0.15, 0.05, 0.0)],
                features: vec![dot(0.03, 0.0, 1.0)],
                l_x: 0.03,
                colors: Vec::new(),
            },
            MarkerKind::C => Self {
                kind,
                circles: vec![disk(0.0, 0.07, 0.0), disk(0.0, 0.035, 1.0)],
                features: vec![dot(0.053, 0.0, 1.0)],
                l_x: 0.053,
                colors: Vec::new(),
            },
            MarkerKind::D => Self {
                kind,
                circles: vec![disk(0.0, 0.05, 0.0)],
                features: vec![dot(0.0, 0.0, 1.0), dot(0.09, 0.0, 0.0)],
                l_x: 0.09,
                colors: Vec::new(),
            },
            MarkerKind::E => Self {
                kind,
                circles: vec![disk(0.0, 0.06, 0.0)],
                features: vec![
                    dot(0.0, 0.0, 1.0),
                    dot(0.035, 0.0, 1.0),
                    dot(-0.035 * 0.5, 0.035 * 0.866_025_403_784_438_6, 1.0),
                ],
                l_x: 0.035,
                colors: Vec::new(),
            },
            MarkerKind::F => Self {
                kind,
                circles: vec![disk(0.0, 0.06, 0.0)],
                features: vec![dot(0.0, 0.0, 1.0), dot(0.045, 0.0, 1.0), dot(0.0, 0.045, 1.0)],
                l_x: 0.045,
                colors: Vec::new(),
            },
        }
    }

    /// Number of circles the kind requires.
    pub fn required_circles(&self) -> usize {
        match self.kind {
            MarkerKind::A | MarkerKind::B | MarkerKind::C => 2,
            _ => 1,
        }
    }

    /// Number of feature points a detector must deliver, `(min, max)`.
    pub fn required_features(&self) -> (usize, usize) {
        match self.kind {
            MarkerKind::A => (0, 0),
            MarkerKind::B | MarkerKind::C => (1, 1),
            MarkerKind::D => (2, 2),
            MarkerKind::E | MarkerKind::F => (2, self.features.len().max(2)),
        }
    }

    pub fn circle_center(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.circles[i].center[0], self.circles[i].center[1])
    }

    pub fn validate(&self) -> Result<(), MarkerError> {
        let bad = |m: String| Err(MarkerError::InvalidSpec(m));
        if !(self.l_x > 0.0 && self.l_x.is_finite()) {
            return bad(format!("l_x must be positive, got {}", self.l_x));
        }
        for (i, c) in self.circles.iter().enumerate() {
            if !(c.radius > 0.0 && c.radius.is_finite()) {
                return bad(format!("circle {i} radius must be positive, got {}", c.radius));
            }
        }
        for (i, f) in self.features.iter().enumerate() {
            if !(f.radius > 0.0 && f.radius.is_finite()) {
                return bad(format!("feature {i} radius must be positive, got {}", f.radius));
            }
        }
        let n = self.required_circles();
        if self.circles.len() != n {
            return bad(format!("kind {:?} needs {n} circles, got {}", self.kind, self.circles.len()));
        }
        let tol = SPEC_TOL * self.l_x.max(1.0);
        let at = |v: [f64; 2], x: f64, y: f64| (v[0] - x).abs() <= tol && (v[1] - y).abs() <= tol;
        if !at(self.circles[0].center, 0.0, 0.0) {
            return bad("circle 0 must be centered at the world origin".into());
        }
        let disjoint = |a: &CircleSpec, b: &CircleSpec| {
            let d = (self.circle_center(0) - Vector2::new(b.center[0], b.center[1])).norm();
            d > a.radius + b.radius
        };
        let nf = self.features.len();
        match self.kind {
            MarkerKind::A => {
                if !at(self.circles[1].center, self.l_x, 0.0) {
                    return bad("kind A: circle 1 must be centered at (l_x, 0)".into());
                }
                if !disjoint(&self.circles[0], &self.circles[1]) {
                    return bad("kind A: circles must be disjoint".into());
                }
                if nf != 0 {
                    return bad("kind A takes no feature points".into());
                }
            }
            MarkerKind::B => {
                if !disjoint(&self.circles[0], &self.circles[1]) {
                    return bad("kind B: circles must be disjoint".into());
                }
                if nf != 1 || !at(self.features[0].position, self.l_x, 0.0) {
                    return bad("kind B: one feature at (l_x, 0) required".into());
                }
                if self.l_x >= self.circles[0].radius {
                    return bad("kind B: the feature must lie inside circle 0".into());
                }
            }
            MarkerKind::C => {
                if !at(self.circles[1].center, 0.0, 0.0) {
                    return bad("kind C: circles must be concentric".into());
                }
                let (r0, r1) = (self.circles[0].radius, self.circles[1].radius);
                if (r0 - r1).abs() <= tol {
                    return bad("kind C: radii must differ".into());
                }
                if nf != 1 || !at(self.features[0].position, self.l_x, 0.0) {
                    return bad("kind C: one feature at (l_x, 0) required".into());
                }
                if !(self.l_x > r0.min(r1) && self.l_x < r0.max(r1)) {
                    return bad("kind C: the feature must lie between the circles".into());
                }
            }
            MarkerKind::D => {
                if nf != 2 || !at(self.features[0].position, 0.0, 0.0) || !at(self.features[1].position, self.l_x, 0.0)
                {
                    return bad("kind D: features at (0, 0) and (l_x, 0) required".into());
                }
                if self.l_x <= self.circles[0].radius {
                    return bad("kind D: the direction feature must lie outside the circle".into());
                }
            }
            MarkerKind::E | MarkerKind::F => {
                if nf < 2 || !at(self.features[0].position, 0.0, 0.0) || !at(self.features[1].position, self.l_x, 0.0) {
                    return bad(format!(
                        "kind {:?}: center feature and a direction feature at (l_x, 0) required",
                        self.kind
                    ));
                }
                for (i, f) in self.features.iter().enumerate().skip(1) {
                    let d = (f.position[0].powi(2) + f.position[1].powi(2)).sqrt();
                    if (d - self.l_x).abs() > 1e-6 * self.l_x {
                        return bad(format!("feature {i} must lie at distance l_x from the center"));
                    }
                    if d > self.circles[0].radius {
                        return bad(format!("feature {i} must lie within the circle"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Physical features `m0`/`m1` were bound to, in K-normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinState {
    pub m0: Point2H,
    pub m1: Point2H,
}

/// Conics and feature points of one frame, K-normalized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Detection {
    pub conics: Vec<Conic>,
    /// Optional color class per conic (0 = first configured color).
    pub classes: Vec<Option<usize>>,
    pub features: Vec<Point2H>,
}

impl Detection {
    pub fn new(conics: Vec<Conic>, features: Vec<Point2H>) -> Self {
        let classes = vec![None; conics.len()];
        Self { conics, classes, features }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerObservation {
    /// Fitted conics reordered to match `spec.circles`.
    pub conics: Vec<Conic>,
    /// `circle_order[i]` is the detection index of spec circle `i`.
    pub circle_order: Vec<usize>,
    pub m0: Point2H,
    pub m1: Point2H,
    pub l_inf: Line2,
    pub pin_state: PinState,
}

/// Incidence below which a point is considered on a line.
const INCIDENCE_TOL: f64 = 1e-12;

impl MarkerObservation {
    /// Checks the observation invariants.
    pub fn validate(&self) -> Result<(), MarkerError> {
        if !self.conics[0].contains(&self.m0) {
            return Err(MarkerError::Degenerate("m0 is not inside its source conic".into()));
        }
        if self.m0.angle_to(&self.m1) < 1e-12 {
            return Err(MarkerError::Degenerate("m0 and m1 coincide".into()));
        }
        for (name, p) in [("m0", &self.m0), ("m1", &self.m1)] {
            if self.l_inf.incidence(p).abs() < INCIDENCE_TOL {
                return Err(MarkerError::Degenerate(format!("{name} lies on the line at infinity")));
            }
        }
        Ok(())
    }
}

/// Similarity to a frame where both ellipses have unit-order size.
fn conditioning(c1: &Conic, c2: &Conic) -> Result<Matrix3<f64>, MarkerError> {
    let e1 = c1.ellipse_center().ok_or(MarkerError::NotAnEllipse)?;
    let e2 = c2.ellipse_center().ok_or(MarkerError::NotAnEllipse)?;
    let (a1, _) = c1.ellipse_semi_axes().ok_or(MarkerError::NotAnEllipse)?;
    let (a2, _) = c2.ellipse_semi_axes().ok_or(MarkerError::NotAnEllipse)?;
    let mid = (e1 + e2) * 0.5;
    let s = 1.0 / ((e1 - e2).norm() * 0.5 + a1.max(a2));
    Ok(Matrix3::new(s, 0.0, -s * mid.x, 0.0, s, -s * mid.y, 0.0, 0.0, 1.0))
}

/// Relative gap below which two pencil eigenvalues are treated as repeated.
const REPEATED_ROOT_TOL: f64 = 1e-4;
/// Relative imaginary part below which an eigenvalue counts as real.
const REAL_ROOT_TOL: f64 = 1e-7;
/// Eigenvalue ratio below which a degenerate member is treated as rank 1.
const RANK_ONE_TOL: f64 = 1e-6;

/// Real lines of the degenerate pencil member `d`.
fn split_degenerate(d: &Matrix3<f64>) -> Vec<Vector3<f64>> {
    let eig = SymmetricEigen::new(*d);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()));
    let (alpha, beta) = (eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]]);
    let va = eig.eigenvectors.column(idx[0]).into_owned();
    let vb = eig.eigenvectors.column(idx[1]).into_owned();
    if beta.abs() < RANK_ONE_TOL * alpha.abs() {
        return vec![va];
    }
    if alpha * beta < 0.0 {
        let (sa, sb) = (alpha.abs().sqrt(), beta.abs().sqrt());
        return vec![va * sa + vb * sb, va * sa - vb * sb];
    }
    Vec::new()
}

/// Line misses both conics and keeps both interiors on the same side.
fn one_side_score(l: &Line2, c1: &Conic, c2: &Conic) -> Option<f64> {
    let margin = c1.line_clearance(l).min(c2.line_clearance(l));
    if margin <= 0.0 {
        return None;
    }
    let e1 = c1.ellipse_center()?;
    let e2 = c2.ellipse_center()?;
    let s1 = l.coords().dot(&Vector3::new(e1.x, e1.y, 1.0));
    let s2 = l.coords().dot(&Vector3::new(e2.x, e2.y, 1.0));
    if s1 * s2 <= 0.0 {
        return None;
    }
    let p1 = pole_of(c1, l).ok()?;
    let p2 = pole_of(c2, l).ok()?;
    if !(c1.contains(&p1) && c2.contains(&p2)) {
        return None;
    }
    Some(margin)
}

/// Imaged common center of two concentric circles: null vector (adjugate) of
/// the definite degenerate member of the pencil.
fn concentric_center(a: &Conic, b: &Conic, simple_root: f64) -> Result<Point2H, MarkerError> {
    let d = a.matrix() - b.matrix() * simple_root;
    let adj = adjugate(&d);
    let col = (0..3).max_by(|&i, &j| adj.column(i).norm().total_cmp(&adj.column(j).norm())).expect("three columns");
    Ok(Point2H::try_from_vector(adj.column(col).into_owned())?)
}

fn pencil_roots(a: &Conic, b: &Conic) -> Result<Vec<Complex<f64>>, MarkerError> {
    let bi = b.inverse()?;
    let m = bi * a.matrix();
    Ok(m.complex_eigenvalues().iter().copied().collect())
}

/// Imaged line at infinity of the plane carrying two disjoint or concentric
/// circles, from their imaged conics.
pub fn line_at_infinity_from_two_conics(c1: &Conic, c2: &Conic) -> Result<Line2, MarkerError> {
    let t = conditioning(c1, c2)?;
    let ti = t.try_inverse().ok_or(MarkerError::NotAnEllipse)?;
    let a = Conic::new(ti.transpose() * c1.matrix() * ti).canonical();
    let b = Conic::new(ti.transpose() * c2.matrix() * ti).canonical();
    let roots = pencil_roots(&a, &b)?;
    let scale = roots.iter().map(|r| r.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    let back =
        |l: &Vector3<f64>| -> Result<Line2, MarkerError> { Ok(Line2::try_from_vector(t.transpose() * l)?.canonical()) };

    // A repeated root means a concentric pair: the pencil's double line is
    // ill-conditioned, but the simple root's member is a point conic at the
    // common center, whose polar is the line at infinity.
    for i in 0..3 {
        let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
        let (j, k) = (others[0], others[1]);
        if (roots[j] - roots[k]).norm() < REPEATED_ROOT_TOL * scale
            && (roots[i] - roots[j]).norm() >= REPEATED_ROOT_TOL * scale
            && roots[i].im.abs() <= REAL_ROOT_TOL * scale
        {
            let center = concentric_center(&a, &b, roots[i].re)?;
            let l = polar_line(&a, &center)?;
            if one_side_score(&l, &a, &b).is_some() {
                return back(l.coords());
            }
        }
    }

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for r in &roots {
        if r.im.abs() > REAL_ROOT_TOL * scale {
            continue;
        }
        let d = a.matrix() - b.matrix() * r.re;
        for cand in split_degenerate(&d) {
            let Ok(l) = Line2::try_from_vector(cand) else { continue };
            if let Some(score) = one_side_score(&l, &a, &b) {
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, cand));
                }
            }
        }
    }
    match best {
        Some((_, l)) => back(&l),
        None => Err(MarkerError::NoValidLine),
    }
}

/// Imaged circle center: the pole of `l∞`.
pub fn imaged_center(c: &Conic, l_inf: &Line2) -> Result<Point2H, MarkerError> {
    Ok(pole_of(c, l_inf)?)
}

/// `l∞ = C m0` for an observed imaged center `m0`.
pub fn line_at_infinity_from_center(c: &Conic, m0: &Point2H) -> Result<Line2, MarkerError> {
    Ok(polar_line(c, m0)?)
}

fn affine_dist(a: &Point2H, b: &Point2H) -> f64 {
    match (a.dehomogenize(), b.dehomogenize()) {
        (Some(x), Some(y)) => (x - y).norm(),
        _ => f64::INFINITY,
    }
}

fn cardinality(kind: MarkerKind, what: &'static str, expected: &str, got: usize) -> MarkerError {
    MarkerError::Cardinality { kind, what, expected: expected.into(), got }
}

fn ellipse_area(c: &Conic) -> Result<f64, MarkerError> {
    let (a, b) = c.ellipse_semi_axes().ok_or(MarkerError::NotAnEllipse)?;
    Ok(a * b)
}

/// Polar angle of `p` around `o`, in `[0, 2π)`.
fn polar_angle(o: &Point2H, p: &Point2H) -> f64 {
    let (o, p) = (o.dehomogenize().unwrap_or_default(), p.dehomogenize().unwrap_or_default());
    let a = (p.y - o.y).atan2(p.x - o.x);
    if a < 0.0 {
        a + std::f64::consts::TAU
    } else {
        a
    }
}

/// Assemble `m0`, `m1` and `l∞` for the marker kind from K-normalized
/// detections. With `prev`, `m0`/`m1` stay bound to the physical features
/// chosen in the previous frame (nearest neighbor).
pub fn resolve_observation(
    spec: &MarkerSpec,
    det: &Detection,
    prev: Option<&PinState>,
) -> Result<MarkerObservation, MarkerError> {
    let kind = spec.kind;
    let nc = spec.required_circles();
    if det.conics.len() != nc {
        return Err(cardinality(kind, "conics", &nc.to_string(), det.conics.len()));
    }
    let (fmin, fmax) = spec.required_features();
    let nf = det.features.len();
    if nf < fmin || nf > fmax {
        let expected = if fmin == fmax { fmin.to_string() } else { format!("{fmin}..={fmax}") };
        return Err(cardinality(kind, "feature points", &expected, nf));
    }

    let (order, m0, m1, l_inf) = match kind {
        MarkerKind::A => {
            let l = line_at_infinity_from_two_conics(&det.conics[0], &det.conics[1])?;
            let centers = [imaged_center(&det.conics[0], &l)?, imaged_center(&det.conics[1], &l)?];
            let swap = match (det.classes.first().copied().flatten(), det.classes.get(1).copied().flatten()) {
                (Some(c0), Some(c1)) if c0 != c1 => c0 > c1,
                _ => match prev {
                    Some(pin) => {
                        let keep = affine_dist(&centers[0], &pin.m0) + affine_dist(&centers[1], &pin.m1);
                        let flip = affine_dist(&centers[1], &pin.m0) + affine_dist(&centers[0], &pin.m1);
                        flip < keep
                    }
                    None => false,
                },
            };
            let (i0, i1) = if swap { (1, 0) } else { (0, 1) };
            (vec![i0, i1], centers[i0], centers[i1], l)
        }
        MarkerKind::B => {
            let l = line_at_infinity_from_two_conics(&det.conics[0], &det.conics[1])?;
            let f = det.features[0];
            let inside: Vec<usize> = (0..2).filter(|&i| det.conics[i].contains(&f)).collect();
            if inside.len() != 1 {
                return Err(MarkerError::InconsistentFeatures(format!("feature lies inside {} circles", inside.len())));
            }
            let i0 = inside[0];
            (vec![i0, 1 - i0], imaged_center(&det.conics[i0], &l)?, f, l)
        }
        MarkerKind::C => {
            let l = line_at_infinity_from_two_conics(&det.conics[0], &det.conics[1])?;
            let outer_first = ellipse_area(&det.conics[0])? >= ellipse_area(&det.conics[1])?;
            let (outer, inner) = if outer_first { (0, 1) } else { (1, 0) };
            let spec_outer_first = spec.circles[0].radius > spec.circles[1].radius;
            let order = if spec_outer_first { vec![outer, inner] } else { vec![inner, outer] };
            let f = det.features[0];
            if !(det.conics[outer].contains(&f) && !det.conics[inner].contains(&f)) {
                return Err(MarkerError::InconsistentFeatures(
                    "feature must lie between the concentric circles".into(),
                ));
            }
            (order, imaged_center(&det.conics[outer], &l)?, f, l)
        }
        MarkerKind::D => {
            let c = &det.conics[0];
            let inside: Vec<usize> = (0..2).filter(|&i| c.contains(&det.features[i])).collect();
            if inside.len() != 1 {
                return Err(MarkerError::InconsistentFeatures(format!(
                    "expected one interior and one exterior point, {} inside",
                    inside.len()
                )));
            }
            let m0 = det.features[inside[0]];
            let m1 = det.features[1 - inside[0]];
            (vec![0], m0, m1, line_at_infinity_from_center(c, &m0)?)
        }
        MarkerKind::E | MarkerKind::F => {
            let c = &det.conics[0];
            let center = c.ellipse_center().ok_or(MarkerError::NotAnEllipse)?;
            let center = Point2H::euclidean(center.x, center.y);
            let i0 = (0..nf)
                .filter(|&i| c.contains(&det.features[i]))
                .min_by(|&i, &j| {
                    affine_dist(&det.features[i], &center).total_cmp(&affine_dist(&det.features[j], &center))
                })
                .ok_or_else(|| MarkerError::InconsistentFeatures("no feature inside the circle".into()))?;
            let m0 = match prev {
                Some(pin) => {
                    // Center feature stays the one closest to last frame's m0.
                    let j = (0..nf)
                        .min_by(|&i, &j| {
                            affine_dist(&det.features[i], &pin.m0).total_cmp(&affine_dist(&det.features[j], &pin.m0))
                        })
                        .expect("nonempty");
                    det.features[j]
                }
                None => det.features[i0],
            };
            let candidates: Vec<Point2H> = det.features.iter().filter(|p| **p != m0).copied().collect();
            let m1 = match prev {
                Some(pin) => *candidates
                    .iter()
                    .min_by(|a, b| affine_dist(a, &pin.m1).total_cmp(&affine_dist(b, &pin.m1)))
                    .expect("at least one candidate"),
                None => {
                    let mut angles: Vec<(f64, Point2H)> =
                        candidates.iter().map(|p| (polar_angle(&m0, p), *p)).collect();
                    angles.sort_by(|a, b| a.0.total_cmp(&b.0));
                    if angles.len() > 1 && (angles[1].0 - angles[0].0).abs() < 1e-9 {
                        return Err(MarkerError::Ambiguous);
                    }
                    angles[0].1
                }
            };
            (vec![0], m0, m1, line_at_infinity_from_center(c, &m0)?)
        }
    };

    let obs = MarkerObservation {
        conics: order.iter().map(|&i| det.conics[i]).collect(),
        circle_order: order,
        m0,
        m1,
        l_inf,
        pin_state: PinState { m0, m1 },
    };
    obs.validate()?;
    Ok(obs)
}
