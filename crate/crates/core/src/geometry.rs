//! Projective primitives: homogeneous points and lines, conic matrices,
//! pole/polar transport and planar homographies.
//!
//! Every projective entity compares "up to scale". The canonical form of a
//! vector or matrix is unit Euclidean (Frobenius) norm with the
//! largest-magnitude entry positive, so two canonical forms can be compared
//! entry-wise.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default angular tolerance (radians) for equality up to scale.
pub const PROJECTIVE_TOL: f64 = 1e-9;

/// Relative determinant below which a conic is treated as degenerate.
pub const DEGENERATE_DET_TOL: f64 = 1e-13;

/// Relative determinant below which a homography is treated as singular.
pub const SINGULAR_H_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("zero vector is not a valid homogeneous entity")]
    ZeroVector,
    #[error("degenerate conic (relative determinant {0:e})")]
    DegenerateConic(f64),
    #[error("homography is singular")]
    SingularHomography,
    #[error("arguments coincide up to scale")]
    Coincident,
    #[error("circle radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
}

/// Angle between the lines spanned by `a` and `b`, ignoring sign and scale.
pub fn angular_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let s = (a / na).cross(&(b / nb)).norm().min(1.0);
    let c = (a.dot(b) / (na * nb)).abs();
    s.atan2(c)
}

fn canonical_vec(v: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    let u = v / n;
    let imax = u.iamax();
    if u[imax] < 0.0 {
        -u
    } else {
        u
    }
}

fn canonical_mat(m: &Matrix3<f64>) -> Matrix3<f64> {
    let u = m / m.norm();
    let imax = u.iamax_full();
    if u[imax] < 0.0 {
        -u
    } else {
        u
    }
}

macro_rules! homogeneous {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        pub struct $name(Vector3<f64>);

        impl $name {
            /// Panics on the zero vector; use [`Self::try_from_vector`] for
            /// computed coordinates.
            pub fn new(x: f64, y: f64, w: f64) -> Self {
                Self::try_from_vector(Vector3::new(x, y, w))
                    .expect("homogeneous coordinates must not be the zero vector")
            }

            pub fn try_from_vector(v: Vector3<f64>) -> Result<Self, GeometryError> {
                if v.iter().all(|c| *c == 0.0) {
                    return Err(GeometryError::ZeroVector);
                }
                Ok(Self(v))
            }

            pub fn coords(&self) -> &Vector3<f64> {
                &self.0
            }

            /// Unit norm, largest-magnitude entry positive.
            pub fn canonical(&self) -> Self {
                Self(canonical_vec(&self.0))
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|c| c.is_finite())
            }

            pub fn angle_to(&self, other: &Self) -> f64 {
                angular_distance(&self.0, &other.0)
            }

            /// Equality up to nonzero scale within `tol` radians.
            pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
                self.angle_to(other) < tol
            }
        }

        impl From<$name> for Vector3<f64> {
            fn from(v: $name) -> Self {
                v.0
            }
        }
    };
}

homogeneous!(
    /// Homogeneous image point `(x, y, w)`.
    Point2H
);

homogeneous!(
    /// Homogeneous line coordinates `l` with `l · p = 0` for incident points.
    Line2
);

impl Point2H {
    pub fn euclidean(x: f64, y: f64) -> Self {
        Self(Vector3::new(x, y, 1.0))
    }

    /// Rescaled to `w = 1`; `None` for points at infinity.
    pub fn dehomogenize(&self) -> Option<Vector2<f64>> {
        let w = self.0.z;
        if w.abs() < f64::EPSILON * self.0.norm() {
            None
        } else {
            Some(Vector2::new(self.0.x / w, self.0.y / w))
        }
    }

    /// Same point with `w = 1`. Panics on points at infinity.
    pub fn normalized_w(&self) -> Self {
        let e = self.dehomogenize().expect("point at infinity has no affine form");
        Self::euclidean(e.x, e.y)
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn w(&self) -> f64 {
        self.0.z
    }
}

impl Line2 {
    /// The line at infinity `(0, 0, 1)`.
    pub fn infinity() -> Self {
        Self(Vector3::new(0.0, 0.0, 1.0))
    }

    /// Signed algebraic incidence `l · p`, both scaled to unit norm.
    pub fn incidence(&self, p: &Point2H) -> f64 {
        self.0.normalize().dot(&p.coords().normalize())
    }
}

/// Symmetric 3x3 conic matrix
/// `[[a, d, e], [d, b, f], [e, f, c]]`; points satisfy `pᵀ C p = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conic {
    mat: Matrix3<f64>,
}

impl Conic {
    /// Symmetrizes `m` on construction.
    pub fn new(m: Matrix3<f64>) -> Self {
        Self { mat: (m + m.transpose()) * 0.5 }
    }

    /// Coefficients in the `a, b, c, d, e, f` layout.
    pub fn from_coeffs(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        Self { mat: Matrix3::new(a, d, e, d, b, f, e, f, c) }
    }

    /// `(a, b, c, d, e, f)`.
    pub fn coeffs(&self) -> [f64; 6] {
        let m = &self.mat;
        [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]]
    }

    /// Conic of the circle `(x - cx)² + (y - cy)² = r²`.
    pub fn circle(center: Vector2<f64>, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(GeometryError::NonPositiveRadius(radius));
        }
        let (cx, cy) = (center.x, center.y);
        Ok(Self::from_coeffs(1.0, 1.0, cx * cx + cy * cy - radius * radius, 0.0, -cx, -cy))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.mat
    }

    /// Unit Frobenius norm with the largest-magnitude entry positive.
    pub fn canonical(&self) -> Self {
        Self { mat: canonical_mat(&self.mat) }
    }

    /// Distance between canonical forms; zero iff equal up to scale.
    pub fn canonical_distance(&self, other: &Conic) -> f64 {
        let a = self.mat / self.mat.norm();
        let b = other.mat / other.mat.norm();
        (a - b).norm().min((a + b).norm())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { mat: self.mat * s }
    }

    /// `pᵀ C p`.
    pub fn eval(&self, p: &Point2H) -> f64 {
        let v = p.coords();
        v.dot(&(self.mat * v))
    }

    /// Scale-free determinant `det(C) / ‖C‖³`, taken after rescaling the
    /// homogeneous coordinate so it is unaffected by image translation and zoom.
    pub fn relative_det(&self) -> f64 {
        let m = &self.mat;
        let quad = m[(0, 0)].abs().max(m[(1, 1)].abs()).max(m[(0, 1)].abs());
        let lin = m[(0, 2)].hypot(m[(1, 2)]);
        let s = if quad > 0.0 { (m[(2, 2)].abs() / quad).sqrt().max(lin / quad) } else { 1.0 };
        let s = if s.is_finite() && s > 0.0 { s } else { 1.0 };
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0 / s));
        let b = d * m * d;
        let n = b.norm();
        if n == 0.0 {
            0.0
        } else {
            b.determinant() / (n * n * n)
        }
    }

    pub fn is_proper(&self) -> bool {
        self.relative_det().abs() > DEGENERATE_DET_TOL
    }

    pub fn adjugate(&self) -> Matrix3<f64> {
        adjugate(&self.mat)
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>, GeometryError> {
        let rd = self.relative_det();
        if rd.abs() <= DEGENERATE_DET_TOL {
            return Err(GeometryError::DegenerateConic(rd));
        }
        self.mat.try_inverse().ok_or(GeometryError::DegenerateConic(rd))
    }

    /// Whether `p` lies strictly inside the conic's bounded region.
    ///
    /// Uses the projectively invariant sign of `(pᵀ C p) · det(C)`, which is
    /// positive exactly for interior points of a real non-degenerate conic.
    pub fn contains(&self, p: &Point2H) -> bool {
        let v = p.coords().normalize();
        let m = self.mat / self.mat.norm();
        v.dot(&(m * v)) * m.determinant() > 0.0
    }

    /// Whether line `l` misses the conic: `lᵀ adj(C) l > 0`.
    pub fn misses_line(&self, l: &Line2) -> bool {
        self.line_clearance(l) > 0.0
    }

    /// Scale-free `lᵀ adj(C) l`; positive when the line misses the conic,
    /// zero when tangent.
    pub fn line_clearance(&self, l: &Line2) -> f64 {
        let v = l.coords().normalize();
        let m = self.mat / self.mat.norm();
        v.dot(&(adjugate(&m) * v))
    }

    /// True when the conic is a real ellipse in the affine chart `w = 1`.
    pub fn is_ellipse(&self) -> bool {
        let m = self.mat / self.mat.norm();
        let det2 = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(0, 1)];
        // Real (non-empty) ellipse: upper-left block definite and the full
        // determinant has the opposite sign of its trace.
        det2 > 0.0 && m.determinant() * (m[(0, 0)] + m[(1, 1)]) < 0.0
    }

    /// Euclidean center `C⁻¹ (0,0,1)ᵀ` of an ellipse.
    pub fn ellipse_center(&self) -> Option<Vector2<f64>> {
        if !self.is_ellipse() {
            return None;
        }
        let m = self.mat;
        let det2 = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(0, 1)];
        let x = (m[(0, 1)] * m[(1, 2)] - m[(1, 1)] * m[(0, 2)]) / det2;
        let y = (m[(0, 1)] * m[(0, 2)] - m[(0, 0)] * m[(1, 2)]) / det2;
        Some(Vector2::new(x, y))
    }

    /// Semi-axes `(major, minor)` of an ellipse.
    pub fn ellipse_semi_axes(&self) -> Option<(f64, f64)> {
        let c = self.ellipse_center()?;
        let m = self.mat;
        let p = Point2H::euclidean(c.x, c.y);
        let k = -self.eval(&p);
        let a2 = nalgebra::Matrix2::new(m[(0, 0)], m[(0, 1)], m[(0, 1)], m[(1, 1)]);
        let eig = a2.symmetric_eigenvalues();
        let (l1, l2) = (eig[0] / k, eig[1] / k);
        if !(l1 > 0.0 && l2 > 0.0) {
            return None;
        }
        let (r1, r2) = (1.0 / l1.sqrt(), 1.0 / l2.sqrt());
        Some((r1.max(r2), r1.min(r2)))
    }

    /// Axis-aligned bounding box `(xmin, ymin, xmax, ymax)` of an ellipse,
    /// from the tangent lines `x = const` and `y = const`.
    pub fn ellipse_bounds(&self) -> Option<[f64; 4]> {
        if !self.is_ellipse() {
            return None;
        }
        let dual = adjugate(&(self.mat / self.mat.norm()));
        // Tangent line (1, 0, -x): dual00 - 2 x dual02 + x² dual22 = 0.
        let span = |i: usize| -> Option<(f64, f64)> {
            let (a, b, c) = (dual[(2, 2)], -2.0 * dual[(i, 2)], dual[(i, i)]);
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 || a == 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let (x1, x2) = ((-b - s) / (2.0 * a), (-b + s) / (2.0 * a));
            Some((x1.min(x2), x1.max(x2)))
        };
        let (x0, x1) = span(0)?;
        let (y0, y1) = span(1)?;
        Some([x0, y0, x1, y1])
    }
}

pub fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    )
}

/// Polar line `C m` of the pole `m`.
pub fn polar_line(c: &Conic, m: &Point2H) -> Result<Line2, GeometryError> {
    Line2::try_from_vector(c.matrix() * m.coords()).map_err(|_| GeometryError::DegenerateConic(c.relative_det()))
}

/// Pole `C⁻¹ l` of the polar line `l`.
pub fn pole_of(c: &Conic, l: &Line2) -> Result<Point2H, GeometryError> {
    let inv = c.inverse()?;
    Point2H::try_from_vector(inv * l.coords()).map_err(|_| GeometryError::DegenerateConic(c.relative_det()))
}

fn checked_inverse(h: &Matrix3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    let n = h.norm();
    if n == 0.0 || (h.determinant() / (n * n * n)).abs() <= SINGULAR_H_TOL {
        return Err(GeometryError::SingularHomography);
    }
    h.try_inverse().ok_or(GeometryError::SingularHomography)
}

/// Image of conic `C` under the point map `p ↦ H p`: `H⁻ᵀ C H⁻¹`,
/// symmetrized and canonically normalized.
pub fn conic_transform(c: &Conic, h: &Matrix3<f64>) -> Result<Conic, GeometryError> {
    let hi = checked_inverse(h)?;
    Ok(Conic::new(hi.transpose() * c.matrix() * hi).canonical())
}

/// Point map `p ↦ H p`.
pub fn transform_point(p: &Point2H, h: &Matrix3<f64>) -> Result<Point2H, GeometryError> {
    Point2H::try_from_vector(h * p.coords())
}

/// Line map induced by `p ↦ H p`: `l ↦ H⁻ᵀ l`.
pub fn transform_line(l: &Line2, h: &Matrix3<f64>) -> Result<Line2, GeometryError> {
    let hi = checked_inverse(h)?;
    Line2::try_from_vector(hi.transpose() * l.coords())
}

/// Relative threshold on the cross product for join/meet.
const COINCIDENT_TOL: f64 = 1e-12;

fn cross_checked(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let x = a.cross(b);
    if x.norm() <= COINCIDENT_TOL * a.norm() * b.norm() {
        return Err(GeometryError::Coincident);
    }
    Ok(x)
}

/// Line through two points.
pub fn join(p: &Point2H, q: &Point2H) -> Result<Line2, GeometryError> {
    cross_checked(p.coords(), q.coords()).map(Line2)
}

/// Intersection point of two lines.
pub fn meet(l: &Line2, m: &Line2) -> Result<Point2H, GeometryError> {
    cross_checked(l.coords(), m.coords()).map(Point2H)
}

/// Convenience wrapper of [`Conic::circle`].
pub fn circle_conic(center: Vector2<f64>, radius: f64) -> Result<Conic, GeometryError> {
    Conic::circle(center, radius)
}

/// Pinhole intrinsics; `K = [[fx, skew, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, skew };
        k.validate()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Self { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, skew: 0.0 }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.skew].iter().all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite entry".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let (fx, fy, s, cx, cy) = (self.fx, self.fy, self.skew, self.cx, self.cy);
        Matrix3::new(1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy), 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0)
    }
}

/// Camera-from-world rigid transform: `X_cam = R X_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Tolerance of the rotation validity check.
pub const ROTATION_TOL: f64 = 1e-10;

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(orth < ROTATION_TOL) {
            return Err(GeometryError::NotARotation(format!("RᵀR deviates from identity by {orth:e}")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() < ROTATION_TOL) {
            return Err(GeometryError::NotARotation(format!("det(R) = {det}")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Column `i` of R (0-based): the camera-frame direction of world axis `i`.
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.rotation.column(i).into_owned()
    }

    pub fn transform(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    /// Optical center in world coordinates, `-Rᵀ t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-plane (`z = 0`) to image homography `K (r1 r2 t)`.
    pub fn plane_homography(&self, k: &CameraIntrinsics) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        m.set_column(0, &self.rotation.column(0));
        m.set_column(1, &self.rotation.column(1));
        m.set_column(2, &self.translation);
        k.matrix() * m
    }

    /// Rotation of the camera expressed in the world frame (`Rᵀ`).
    pub fn world_orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation.transpose()))
    }

    /// Geodesic angle between the two rotations.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let d = self.rotation.transpose() * other.rotation;
        let c = ((d.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near zero; use the skew part instead.
        let s = 0.5 * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm();
        s.atan2(c)
    }
}

/// Nearest rotation to `m` in Frobenius norm (orthogonal polar factor).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        let mut col = u2.column_mut(2);
        col *= -1.0;
        r = u2 * vt;
    }
    r
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map `so(3) → SO(3)`.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-8 {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3): `Exp(w + δ) ≈ Exp(J_l(w) δ) Exp(w)`.
pub fn left_jacobian_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-6 {
        return Matrix3::identity() + k * 0.5 + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() + k * ((1.0 - theta.cos()) / t2) + k * k * ((theta - theta.sin()) / (t2 * theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn unit_circle() -> Conic {
        Conic::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)))
    }

    #[test]
    fn small_off_center_pixel_circle_is_proper() {
        let c = Conic::circle(Vector2::new(610.0, 450.0), 4.0).unwrap();
        assert!(c.is_proper());
        let pole = pole_of(&c, &Line2::infinity()).unwrap();
        let p = pole.dehomogenize().unwrap();
        assert!((p - Vector2::new(610.0, 450.0)).norm() < 1e-9);
        let zoomed = Conic::circle(Vector2::new(610.0, 450.0) * 1e-3, 4e-3).unwrap();
        assert!((zoomed.relative_det() - c.relative_det()).abs() < 1e-12);
    }

    /// Explicit cofactor inverse, independent of nalgebra's LU.
    fn inverse_oracle(m: &Matrix3<f64>) -> Matrix3<f64> {
        let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
            - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
            + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
        let mut inv = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                let (r0, r1) = ((c + 1) % 3, (c + 2) % 3);
                let (c0, c1) = ((r + 1) % 3, (r + 2) % 3);
                inv[(r, c)] = (m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]) / det;
            }
        }
        inv
    }

    #[test]
    fn polar_of_external_point_of_unit_circle() {
        let l = polar_line(&unit_circle(), &Point2H::new(2.0, 0.0, 1.0)).unwrap();
        assert_eq!(*l.coords(), Vector3::new(2.0, 0.0, -1.0));
    }

    #[test]
    fn polar_of_center_is_line_at_infinity() {
        let l = polar_line(&unit_circle(), &Point2H::new(0.0, 0.0, 1.0)).unwrap();
        assert!(l.approx_eq(&Line2::infinity(), 1e-15));
    }

    #[test]
    fn pole_examples() {
        let c = unit_circle();
        let m = pole_of(&c, &Line2::infinity()).unwrap();
        assert!(m.approx_eq(&Point2H::new(0.0, 0.0, 1.0), 1e-15));
        let m = pole_of(&c, &Line2::new(2.0, 0.0, -1.0)).unwrap();
        assert!(m.approx_eq(&Point2H::new(2.0, 0.0, 1.0), 1e-15));
    }

    #[test]
    fn pole_matches_explicit_inverse_oracle() {
        let c = Conic::new(Matrix3::new(2.0, 0.3, -0.7, 0.3, 1.5, 0.2, -0.7, 0.2, -3.0));
        let l = Line2::new(0.4, -1.3, 0.8);
        let p = pole_of(&c, &l).unwrap();
        let oracle = inverse_oracle(c.matrix()) * l.coords();
        assert!(angular_distance(p.coords(), &oracle) < 1e-12);
    }

    #[test]
    fn pole_of_line_at_infinity_maps_to_projected_center() {
        let h = Matrix3::new(1.1, 0.2, 3.0, -0.1, 0.9, -2.0, 0.05, 0.02, 1.0);
        let center = Vector2::new(0.4, -0.3);
        let c = conic_transform(&Conic::circle(center, 0.5).unwrap(), &h).unwrap();
        let l = transform_line(&Line2::infinity(), &h).unwrap();
        let m = pole_of(&c, &l).unwrap();
        let expected = h * Vector3::new(center.x, center.y, 1.0);
        assert!(angular_distance(m.coords(), &expected) < 1e-12);
    }

    #[test]
    fn degenerate_conic_is_reported() {
        let c = Conic::new(Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)));
        assert!(matches!(pole_of(&c, &Line2::infinity()), Err(GeometryError::DegenerateConic(_))));
        assert!(matches!(polar_line(&c, &Point2H::new(0.0, 1.0, 0.0)), Err(GeometryError::DegenerateConic(_))));
        // Nonzero product is still a valid polar even for a degenerate conic.
        assert!(polar_line(&c, &Point2H::new(1.0, 0.0, 0.0)).is_ok());
    }

    #[test]
    fn transform_identity_and_scale() {
        let c = unit_circle();
        let same = conic_transform(&c, &Matrix3::identity()).unwrap();
        assert!(same.canonical_distance(&c) < 1e-15);
        let big = conic_transform(&c, &Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0))).unwrap();
        let expected = Conic::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -4.0)));
        assert!(big.canonical_distance(&expected) < 1e-15);
    }

    #[test]
    fn transform_rejects_singular_homography() {
        let h = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert_eq!(conic_transform(&unit_circle(), &h), Err(GeometryError::SingularHomography));
    }

    #[test]
    fn join_and_meet_examples() {
        let l = join(&Point2H::new(0.0, 0.0, 1.0), &Point2H::new(1.0, 0.0, 1.0)).unwrap();
        assert!(l.approx_eq(&Line2::new(0.0, 1.0, 0.0), 1e-15));
        let p = meet(&Line2::new(0.0, 0.0, 1.0), &Line2::new(1.0, 0.0, 0.0)).unwrap();
        assert!(p.approx_eq(&Point2H::new(0.0, -1.0, 0.0), 1e-15));
        let m0 = Point2H::new(0.0, 0.0, 1.0);
        let m1 = Point2H::new(0.05, 0.0, 1.0);
        let v = meet(&join(&m0, &m1).unwrap(), &Line2::infinity()).unwrap();
        assert!(v.approx_eq(&Point2H::new(1.0, 0.0, 0.0), 1e-15));
    }

    #[test]
    fn join_of_coincident_points_fails() {
        let p = Point2H::new(1.0, 2.0, 1.0);
        let q = Point2H::new(3.0, 6.0, 3.0);
        assert_eq!(join(&p, &q), Err(GeometryError::Coincident));
    }

    #[test]
    fn circle_conic_examples() {
        let c = circle_conic(Vector2::new(0.0, 0.0), 1.0).unwrap();
        assert_eq!(*c.matrix(), Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)));
        let c = circle_conic(Vector2::new(3.0, 0.0), 1.0).unwrap();
        assert_eq!(*c.matrix(), Matrix3::new(1.0, 0.0, -3.0, 0.0, 1.0, 0.0, -3.0, 0.0, 8.0));
        assert_eq!(circle_conic(Vector2::new(0.0, 0.0), 0.0), Err(GeometryError::NonPositiveRadius(0.0)));
    }

    #[test]
    fn circle_conic_contains_sampled_boundary() {
        // Radius 2^k and center with few mantissa bits keep the quadratic form exact.
        let c = circle_conic(Vector2::new(1.5, -2.25), 4.0).unwrap();
        for (cs, sn) in [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0), (0.6, 0.8), (-0.8, 0.6)] {
            let p = Point2H::euclidean(1.5 + 4.0 * cs, -2.25 + 4.0 * sn);
            assert!(c.eval(&p).abs() < 1e-12);
        }
        for k in 0..50 {
            let a = k as f64 * std::f64::consts::TAU / 50.0;
            let p = Point2H::euclidean(1.5 + 4.0 * a.cos(), -2.25 + 4.0 * a.sin());
            assert!(c.eval(&p).abs() < 1e-13);
        }
    }

    #[test]
    fn ellipse_helpers() {
        let c = circle_conic(Vector2::new(3.0, -1.0), 2.0).unwrap().scaled(-5.0);
        assert!(c.is_ellipse());
        let ctr = c.ellipse_center().unwrap();
        assert!((ctr - Vector2::new(3.0, -1.0)).norm() < 1e-12);
        let (a, b) = c.ellipse_semi_axes().unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        let bb = c.ellipse_bounds().unwrap();
        let expected = [1.0, -3.0, 5.0, 1.0];
        for i in 0..4 {
            assert!((bb[i] - expected[i]).abs() < 1e-9, "{bb:?}");
        }
        assert!(c.contains(&Point2H::euclidean(3.5, -1.0)));
        assert!(!c.contains(&Point2H::euclidean(5.5, -1.0)));
        assert!(c.misses_line(&Line2::infinity()));
        assert!(!c.misses_line(&Line2::new(1.0, 0.0, -3.0)));
        let imaginary = Conic::new(Matrix3::identity());
        assert!(!imaginary.is_ellipse());
    }

    #[test]
    fn intrinsics_inverse_and_validation() {
        let k = CameraIntrinsics::new(600.0, 610.0, 319.5, 239.5, 0.7).unwrap();
        let err = (k.matrix() * k.inverse_matrix() - Matrix3::identity()).norm();
        assert!(err < 1e-14);
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose_validation_and_center() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let p = Pose::new(r, Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p.camera_center(), Vector3::new(0.0, 0.0, 2.0));
        assert!(Pose::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::zeros()).is_err());
        assert!(Pose::new(Matrix3::identity() * 1.001, Vector3::zeros()).is_err());
    }

    #[test]
    fn so3_left_jacobian_matches_finite_differences() {
        let w = Vector3::new(0.3, -0.2, 0.5);
        let jl = left_jacobian_so3(&w);
        let r = exp_so3(&w);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = h;
            let rp = exp_so3(&(w + d)) * r.transpose();
            let rm = exp_so3(&(w - d)) * r.transpose();
            let delta = (rp - rm) / (2.0 * h);
            let v = Vector3::new(delta[(2, 1)], delta[(0, 2)], delta[(1, 0)]);
            assert!((v - jl.column(i)).norm() < 1e-8);
        }
    }

    #[test]
    fn nearest_rotation_recovers_rotation() {
        let r = exp_so3(&Vector3::new(0.1, 0.7, -0.4));
        let noisy = r + Matrix3::new(1e-3, 0.0, -2e-3, 0.0, 1e-3, 0.0, 5e-4, 0.0, 0.0);
        let q = nearest_rotation(&noisy);
        assert!((q.transpose() * q - Matrix3::identity()).norm() < 1e-12);
        assert!((q.determinant() - 1.0).abs() < 1e-12);
        assert!((q - r).norm() < 3e-3);
    }
}
