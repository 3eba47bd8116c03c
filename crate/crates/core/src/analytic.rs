//! Closed-form pose from the imaged centers `m0`, `m1` and the imaged line at
//! infinity.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{nearest_rotation, CameraIntrinsics, GeometryError, Line2, Point2H, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("ill-conditioned: |u1-u0| = {du:.3e} and |v1-v0| = {dv:.3e}")]
    IllConditioned { du: f64, dv: f64 },
    #[error("no sign choice puts the marker in front of the camera")]
    BehindCamera,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Both coordinate differences below this (normalized units) are rejected.
pub const DEGENERATE_DELTA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    /// `|u1 - u0|` in normalized coordinates.
    pub du: f64,
    /// `|v1 - v0|` in normalized coordinates.
    pub dv: f64,
    /// `s0` from the u- and v-equations alone, when defined.
    pub s0_u: Option<f64>,
    pub s0_v: Option<f64>,
    /// Relative gap between `s0_u` and `s0_v` (0 when only one is defined).
    pub scale_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSolution {
    pub pose: Pose,
    pub s0: f64,
    pub s1: f64,
    /// Sign applied to `l∞` to obtain `r3`.
    pub s3: f64,
    pub conditioning: Conditioning,
}

pub fn normalize_point(p: &Point2H, k: &CameraIntrinsics) -> Result<Point2H, GeometryError> {
    Point2H::try_from_vector(k.inverse_matrix() * p.coords())
}

pub fn normalize_line(l: &Line2, k: &CameraIntrinsics) -> Result<Line2, GeometryError> {
    Line2::try_from_vector(k.matrix().transpose() * l.coords())
}

/// Unit direction of the marker X axis, up to sign: the vanishing point where
/// the line `m0 m1` meets `l∞`.
pub fn solve_r1(m0: &Point2H, m1: &Point2H, l_inf: &Line2) -> Result<Vector3<f64>, PoseError> {
    let a = m0.coords() / m0.coords().norm();
    let b = m1.coords() / m1.coords().norm();
    let join = a.cross(&b);
    if join.norm() < 1e-14 {
        return Err(PoseError::Degenerate("m1 coincides with m0".into()));
    }
    let join = join / join.norm();
    let l = l_inf.coords() / l_inf.coords().norm();
    let v = join.cross(&l);
    let n = v.norm();
    if n < 1e-14 {
        return Err(PoseError::Degenerate("line m0 m1 coincides with l_inf".into()));
    }
    Ok(v / n)
}

fn affine(p: &Point2H, name: &str) -> Result<Vector3<f64>, PoseError> {
    let v = p.coords();
    if v.z.abs() < 1e-14 * v.norm() {
        return Err(PoseError::Degenerate(format!("{name} is at infinity")));
    }
    Ok(v / v.z)
}

/// Solve the pose from K-normalized inputs.
pub fn solve_pose_normalized(
    m0: &Point2H,
    m1: &Point2H,
    l_inf: &Line2,
    l_x: f64,
) -> Result<AnalyticSolution, PoseError> {
    if !(l_x > 0.0 && l_x.is_finite()) {
        return Err(PoseError::Degenerate(format!("l_x must be positive, got {l_x}")));
    }
    let p0 = affine(m0, "m0")?;
    let p1 = affine(m1, "m1")?;
    let mut r1 = solve_r1(m0, m1, l_inf)?;

    let du = p1.x - p0.x;
    let dv = p1.y - p0.y;
    if du.abs() < DEGENERATE_DELTA && dv.abs() < DEGENERATE_DELTA {
        return Err(PoseError::IllConditioned { du: du.abs(), dv: dv.abs() });
    }

    // s1 m1 = s0 m0 + L_x r1. The third row fixes s1 - s0 = L_x r1z; the
    // other two each give s0 · d = b, combined by least squares.
    let solve = |r1: &Vector3<f64>| {
        let bu = l_x * (r1.x - p1.x * r1.z);
        let bv = l_x * (r1.y - p1.y * r1.z);
        let s0 = (du * bu + dv * bv) / (du * du + dv * dv);
        let s1 = s0 + l_x * r1.z;
        let s0_u = (du.abs() >= DEGENERATE_DELTA).then(|| bu / du);
        let s0_v = (dv.abs() >= DEGENERATE_DELTA).then(|| bv / dv);
        (s0, s1, s0_u, s0_v)
    };
    let (mut s0, mut s1, mut s0_u, mut s0_v) = solve(&r1);
    if s0 < 0.0 {
        r1 = -r1;
        (s0, s1, s0_u, s0_v) = solve(&r1);
    }
    if !(s0 > 0.0 && s1 > 0.0) {
        return Err(PoseError::BehindCamera);
    }
    let t = p0 * s0;

    let l = l_inf.coords() / l_inf.coords().norm();
    let s3 = if l.dot(&t) < 0.0 { 1.0 } else { -1.0 };
    let r3 = l * s3;
    let r2 = r3.cross(&r1);
    let rotation = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r3]));
    let pose = Pose::new(rotation, t)?;

    let scale_gap = match (s0_u, s0_v) {
        (Some(a), Some(b)) => (a - b).abs() / a.abs().max(b.abs()),
        _ => 0.0,
    };
    Ok(AnalyticSolution {
        pose,
        s0,
        s1,
        s3,
        conditioning: Conditioning { du: du.abs(), dv: dv.abs(), s0_u, s0_v, scale_gap },
    })
}

/// Solve the pose from pixel-frame `m0`, `m1`, `l∞`.
pub fn solve_pose(
    m0: &Point2H,
    m1: &Point2H,
    l_inf: &Line2,
    l_x: f64,
    k: &CameraIntrinsics,
) -> Result<AnalyticSolution, PoseError> {
    solve_pose_normalized(&normalize_point(m0, k)?, &normalize_point(m1, k)?, &normalize_line(l_inf, k)?, l_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, transform_line, transform_point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fronto() -> (Point2H, Point2H, Line2) {
        (Point2H::new(0.0, 0.0, 1.0), Point2H::new(0.05, 0.0, 1.0), Line2::infinity())
    }

    /// Camera looking at the origin from a random point above the plane.
    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let d = rng.random_range(0.4..3.0);
        let theta = rng.random_range(0.0..0.9f64);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let c = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()) * d
            + Vector3::new(0.075, 0.0, 0.0);
        let z = (Vector3::new(0.075, 0.0, 0.0) - c).normalize();
        let tmp = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let x = tmp.cross(&z).normalize();
        let y = z.cross(&x);
        let rc = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let roll = exp_so3(&(Vector3::z() * rng.random_range(-3.0..3.0)));
        let r = roll * rc;
        Pose::new(r, -r * c).unwrap()
    }

    fn oracle_inputs(pose: &Pose, l_x: f64) -> (Point2H, Point2H, Line2) {
        let h = pose.plane_homography(&CameraIntrinsics::identity());
        (
            transform_point(&Point2H::new(0.0, 0.0, 1.0), &h).unwrap(),
            transform_point(&Point2H::new(l_x, 0.0, 1.0), &h).unwrap(),
            transform_line(&Line2::infinity(), &h).unwrap(),
        )
    }

    #[test]
    fn fronto_parallel_hand_values() {
        let (m0, m1, l) = fronto();
        assert_eq!(solve_r1(&m0, &m1, &l).unwrap().map(|x| x.abs()), Vector3::x());
        let sol = solve_pose_normalized(&m0, &m1, &l, 0.1).unwrap();
        assert!((sol.pose.rotation - Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))).norm() < 1e-14);
        assert!((sol.pose.translation - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-14);
        assert!((sol.s0 - 2.0).abs() < 1e-14 && (sol.s1 - 2.0).abs() < 1e-14);
    }

    #[test]
    fn doubling_lx_doubles_translation() {
        let (m0, m1, l) = fronto();
        let a = solve_pose_normalized(&m0, &m1, &l, 0.1).unwrap();
        let b = solve_pose_normalized(&m0, &m1, &l, 0.2).unwrap();
        assert!((b.pose.translation - a.pose.translation * 2.0).norm() < 1e-14);
        assert_eq!(a.pose.rotation, b.pose.rotation);
    }

    #[test]
    fn degenerate_inputs() {
        let (m0, _, l) = fronto();
        assert!(matches!(solve_r1(&m0, &m0, &l), Err(PoseError::Degenerate(_))));
        let m1 = Point2H::new(1e-12, 0.0, 1.0);
        assert!(matches!(
            solve_pose_normalized(&m0, &m1, &l, 0.1),
            Err(PoseError::Degenerate(_)) | Err(PoseError::IllConditioned { .. })
        ));
        // l_inf through both centers.
        let l = Line2::new(0.0, 1.0, 0.0);
        assert!(matches!(
            solve_pose_normalized(&m0, &Point2H::new(0.05, 0.0, 1.0), &l, 0.1),
            Err(PoseError::Degenerate(_))
        ));
    }

    #[test]
    fn normalization_preserves_incidence() {
        let k = CameraIntrinsics::new(600.0, 610.0, 319.5, 239.5, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = Point2H::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), 1.0);
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
            let l = Line2::try_from_vector(p.coords().cross(&(p.coords() + d))).unwrap();
            let pn = normalize_point(&p, &k).unwrap();
            let ln = normalize_line(&l, &k).unwrap();
            assert!(ln.incidence(&pn).abs() < 1e-12);
        }
        let k = CameraIntrinsics::new(500.0, 500.0, 0.0, 0.0, 0.0).unwrap();
        let p = normalize_point(&Point2H::new(50.0, -100.0, 1.0), &k).unwrap();
        assert!(p.approx_eq(&Point2H::new(0.1, -0.2, 1.0), 1e-15));
    }

    #[test]
    fn random_poses_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let gt = random_pose(&mut rng);
            let (m0, m1, l) = oracle_inputs(&gt, 0.15);
            let sol = solve_pose_normalized(&m0, &m1, &l, 0.15).unwrap();
            assert!(sol.pose.rotation_angle_to(&gt) < 1e-7);
            let rel = (sol.pose.translation - gt.translation).norm() / gt.translation.norm();
            assert!(rel < 1e-9, "{rel}");
            assert!(sol.conditioning.scale_gap < 1e-10);
            let r1 = solve_r1(&m0, &m1, &l).unwrap();
            assert!(r1.cross(&gt.axis(0)).norm() < 1e-9);
        }
    }

    #[test]
    fn combined_scale_lies_between_expressions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let gt = random_pose(&mut rng);
            let (m0, m1, l) = oracle_inputs(&gt, 0.15);
            let jitter = |p: &Point2H, rng: &mut ChaCha8Rng| {
                let v = p.coords() / p.coords().z;
                Point2H::new(v.x + rng.random_range(-1e-3..1e-3), v.y + rng.random_range(-1e-3..1e-3), 1.0)
            };
            let Ok(sol) = solve_pose_normalized(&jitter(&m0, &mut rng), &jitter(&m1, &mut rng), &l, 0.15) else {
                continue;
            };
            if let (Some(a), Some(b)) = (sol.conditioning.s0_u, sol.conditioning.s0_v) {
                assert!(sol.s0 >= a.min(b) - 1e-12 && sol.s0 <= a.max(b) + 1e-12);
            }
        }
    }

    #[test]
    fn reprojection_and_horizon_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let gt = random_pose(&mut rng);
            let (m0, m1, l) = oracle_inputs(&gt, 0.15);
            let sol = solve_pose_normalized(&m0, &m1, &l, 0.15).unwrap();
            let h = sol.pose.plane_homography(&CameraIntrinsics::identity());
            let f0 = transform_point(&Point2H::new(0.0, 0.0, 1.0), &h).unwrap();
            let f1 = transform_point(&Point2H::new(0.15, 0.0, 1.0), &h).unwrap();
            assert!(f0.angle_to(&m0) < 1e-8 && f1.angle_to(&m1) < 1e-8);
            let l_back = transform_line(&Line2::infinity(), &h).unwrap();
            assert!(l_back.angle_to(&l) < 1e-8);
        }
    }

    #[test]
    fn camera_rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let gt = random_pose(&mut rng);
            let q = exp_so3(&Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            ));
            let (m0, m1, l) = oracle_inputs(&gt, 0.15);
            let a = solve_pose_normalized(&m0, &m1, &l, 0.15).unwrap();
            let qm = |p: &Point2H| Point2H::try_from_vector(q * p.coords()).unwrap();
            let b = solve_pose_normalized(&qm(&m0), &qm(&m1), &Line2::try_from_vector(q * l.coords()).unwrap(), 0.15)
                .unwrap();
            assert!((b.pose.rotation - q * a.pose.rotation).norm() < 1e-9);
            assert!((b.pose.translation - q * a.pose.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn pixel_inputs_match_normalized() {
        let k = CameraIntrinsics::new(600.0, 600.0, 319.5, 239.5, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_pose(&mut rng);
        let h = gt.plane_homography(&k);
        let m0 = transform_point(&Point2H::new(0.0, 0.0, 1.0), &h).unwrap();
        let m1 = transform_point(&Point2H::new(0.15, 0.0, 1.0), &h).unwrap();
        let l = transform_line(&Line2::infinity(), &h).unwrap();
        let sol = solve_pose(&m0, &m1, &l, 0.15, &k).unwrap();
        assert!(sol.pose.rotation_angle_to(&gt) < 1e-9);
        assert!((sol.pose.translation - gt.translation).norm() < 1e-9);
    }
}
