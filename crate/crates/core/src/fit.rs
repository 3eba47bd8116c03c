//! Conic fitting from edge samples.
//!
//! The point-to-conic distance used throughout is the two-branch
//! polar-n-direction distance: with `C̄` equal to `C` with its last row
//! zeroed, `G = C C̄` and `W = C̄ᵀ C C̄`,
//!
//! ```text
//!   Y branch ((pᵀGp)² ≥ (pᵀCp)(pᵀWp)):
//!       d₁² = (pᵀCp)² / ((1 + sqrt(1 - (pᵀCp)(pᵀWp)/(pᵀGp)²))² · pᵀGp)
//!   N branch:
//!       d₂² = (pᵀCp)² / pᵀGp,  weighted by 1/4
//! ```
//!
//! [`polar_n_distance_sq`] already includes the 1/4 weight, so summing it over
//! samples gives the full objective directly.
//!
//! Fitting is a damped Gauss-Newton loop over the 5-dimensional tangent space
//! of unit-norm conic coefficient vectors, started from a normalized algebraic
//! fit.

use nalgebra::{Matrix3, SymmetricEigen, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{Conic, Point2H};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} edge points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("edge point {0} is not finite")]
    NonFinitePoint(usize),
    #[error("design matrix is rank deficient (rank {rank} < 5)")]
    RankDeficient { rank: usize },
    #[error("gradient term pᵀGp vanishes at this point")]
    GuardDegenerate,
    #[error("conic collapsed to a degenerate matrix during fitting")]
    DegenerateCollapse,
    #[error("initial conic is degenerate")]
    DegenerateInit,
    #[error("every sample was dropped by the gradient guard")]
    AllSamplesDropped,
}

/// Minimum number of edge points accepted by the fitters.
pub const MIN_FIT_POINTS: usize = 6;

/// Relative guard on `pᵀGp` against `‖C p‖²`.
pub const GUARD_TOL: f64 = 1e-12;

/// Edge samples of one imaged circle, pixel coordinates with `w = 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgePointSet {
    pub points: Vec<Point2H>,
    pub source_tag: usize,
}

impl EdgePointSet {
    pub fn new(points: Vec<Point2H>, source_tag: usize) -> Self {
        Self { points, source_tag }
    }

    pub fn from_xy(xy: impl IntoIterator<Item = (f64, f64)>, source_tag: usize) -> Self {
        Self { points: xy.into_iter().map(|(x, y)| Point2H::euclidean(x, y)).collect(), source_tag }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn validate(&self) -> Result<(), FitError> {
        if self.points.len() < MIN_FIT_POINTS {
            return Err(FitError::TooFewPoints { needed: MIN_FIT_POINTS, got: self.points.len() });
        }
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(FitError::NonFinitePoint(i));
        }
        Ok(())
    }
}

/// `C̄`, `G = C C̄` and `W = C̄ᵀ C C̄` for one conic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConicDistanceTerms {
    pub cbar: Matrix3<f64>,
    pub g: Matrix3<f64>,
    pub w: Matrix3<f64>,
}

impl ConicDistanceTerms {
    pub fn new(c: &Conic) -> Self {
        let m = c.matrix();
        let mut cbar = *m;
        cbar.row_mut(2).fill(0.0);
        let g = m * cbar;
        let w = cbar.transpose() * m * cbar;
        Self { cbar, g, w }
    }
}

/// Which closed form of the distance applies at a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// The discriminant is nonnegative: second-order root along the gradient.
    Quadratic,
    /// First-order (gradient-normalized) form, weighted by 1/4.
    Linearized,
}

/// `Y` when `(pᵀGp)² ≥ (pᵀCp)(pᵀWp)`, otherwise `N`.
pub fn branch_condition(p: &Point2H, terms: &ConicDistanceTerms, c: &Conic) -> Branch {
    let v = p.coords();
    let q = c.eval(p);
    let g = v.dot(&(terms.g * v));
    let w = v.dot(&(terms.w * v));
    if g * g >= q * w {
        Branch::Quadratic
    } else {
        Branch::Linearized
    }
}

/// Scalars of the distance at one point and their local derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DistanceEval {
    /// Signed residual; `residual²` is the (weighted) squared distance.
    pub residual: f64,
    pub branch: Branch,
    /// `C p`.
    pub u: Vector3<f64>,
    /// `(C p)` with the last entry zeroed.
    pub h: Vector3<f64>,
    /// `Π C h` (last entry zeroed).
    pub z: Vector3<f64>,
    pub dr_dq: f64,
    pub dr_dg: f64,
    pub dr_dw: f64,
}

impl DistanceEval {
    /// Residual gradient with respect to the homogeneous point.
    pub fn grad_point(&self, c: &Matrix3<f64>) -> Vector3<f64> {
        // dq = 2 uᵀ dp, dg = 2 (C h)ᵀ dp, dw = 2 (C z)ᵀ dp
        (self.u * self.dr_dq + c * self.h * self.dr_dg + c * self.z * self.dr_dw) * 2.0
    }

    /// Residual gradient with respect to `(a, b, c, d, e, f)`.
    pub fn grad_coeffs(&self, p: &Vector3<f64>) -> Vector6<f64> {
        let bil = |x: &Vector3<f64>, y: &Vector3<f64>| {
            Vector6::new(
                x[0] * y[0],
                x[1] * y[1],
                x[2] * y[2],
                x[0] * y[1] + x[1] * y[0],
                x[0] * y[2] + x[2] * y[0],
                x[1] * y[2] + x[2] * y[1],
            )
        };
        let dq = bil(p, p);
        let dg = bil(&self.h, p) * 2.0;
        let dw = bil(&self.h, &self.h) + bil(&self.z, p) * 2.0;
        dq * self.dr_dq + dg * self.dr_dg + dw * self.dr_dw
    }
}

/// Floor on the discriminant root when differentiating at the branch seam.
const SQRT_FLOOR: f64 = 1e-8;

pub(crate) fn evaluate(p: &Vector3<f64>, c: &Matrix3<f64>, forced: Option<Branch>) -> Result<DistanceEval, FitError> {
    let u = c * p;
    let h = Vector3::new(u.x, u.y, 0.0);
    let ch = c * h;
    let z = Vector3::new(ch.x, ch.y, 0.0);
    let q = p.dot(&u);
    let g = h.norm_squared();
    let w = h.dot(&ch);

    // Both sides scale alike in C and p; ‖G‖‖p‖² would instead grow with the
    // pixel offset of the conic and reject small, off-center ellipses.
    if !(g > GUARD_TOL * u.norm_squared()) {
        return Err(FitError::GuardDegenerate);
    }

    let branch = forced.unwrap_or(if g * g >= q * w { Branch::Quadratic } else { Branch::Linearized });
    let sg = g.sqrt();
    let eval = match branch {
        Branch::Quadratic => {
            let disc = (1.0 - q * w / (g * g)).max(0.0);
            let s = disc.sqrt();
            let denom = sg * (1.0 + s);
            let residual = q / denom;
            // r = q g^{-1/2} (1+s)^{-1},  D = 1 - q w g^{-2}
            let sd = s.max(SQRT_FLOOR);
            let dr_ds = -q / (sg * (1.0 + s) * (1.0 + s));
            let ds_dq = -w / (g * g) / (2.0 * sd);
            let ds_dw = -q / (g * g) / (2.0 * sd);
            let ds_dg = 2.0 * q * w / (g * g * g) / (2.0 * sd);
            DistanceEval {
                residual,
                branch,
                u,
                h,
                z,
                dr_dq: 1.0 / denom + dr_ds * ds_dq,
                dr_dg: -q / (2.0 * g * sg * (1.0 + s)) + dr_ds * ds_dg,
                dr_dw: dr_ds * ds_dw,
            }
        }
        Branch::Linearized => DistanceEval {
            residual: q / (2.0 * sg),
            branch,
            u,
            h,
            z,
            dr_dq: 1.0 / (2.0 * sg),
            dr_dg: -q / (4.0 * g * sg),
            dr_dw: 0.0,
        },
    };
    Ok(eval)
}

/// Squared polar-n-direction distance, N branch pre-weighted by 1/4.
pub fn polar_n_distance_sq(p: &Point2H, c: &Conic) -> Result<f64, FitError> {
    let v = p.coords();
    let v = if v.z != 0.0 { v / v.z } else { *v };
    let e = evaluate(&v, c.matrix(), None)?;
    Ok(e.residual * e.residual)
}

/// Sum of [`polar_n_distance_sq`] over the samples and the number of samples
/// dropped by the gradient guard.
pub fn geometric_objective(points: &[Point2H], c: &Conic) -> (f64, usize) {
    let mut sum = 0.0;
    let mut dropped = 0;
    for p in points {
        match polar_n_distance_sq(p, c) {
            Ok(d) => sum += d,
            Err(_) => dropped += 1,
        }
    }
    (sum, dropped)
}

/// Similarity `T` moving the centroid to the origin with RMS radius √2.
fn preconditioner(points: &[Point2H]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in points {
        mx += p.x() / p.w();
        my += p.y() / p.w();
    }
    mx /= n;
    my /= n;
    let mut ms = 0.0;
    for p in points {
        let dx = p.x() / p.w() - mx;
        let dy = p.y() / p.w() - my;
        ms += dx * dx + dy * dy;
    }
    let rms = (ms / n).sqrt();
    let s = if rms > 0.0 { std::f64::consts::SQRT_2 / rms } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, points: &[Point2H]) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|p| {
            let v = t * p.coords();
            v / v.z
        })
        .collect()
}

/// Pull a conic fitted in preconditioned coordinates back to pixels.
fn pull_back(c: &Matrix3<f64>, t: &Matrix3<f64>) -> Conic {
    Conic::new(t.transpose() * c * t).canonical()
}

/// Relative eigenvalue threshold of the scatter matrix for rank detection.
const RANK_TOL: f64 = 1e-13;

/// Normalized linear least-squares conic (unit coefficient vector).
pub fn fit_conic_algebraic(points: &EdgePointSet) -> Result<Conic, FitError> {
    points.validate()?;
    let t = preconditioner(&points.points);
    let q = apply(&t, &points.points);
    let mut scatter = nalgebra::Matrix6::<f64>::zeros();
    for v in &q {
        let (x, y) = (v.x, v.y);
        let row = Vector6::new(x * x, y * y, 1.0, 2.0 * x * y, 2.0 * x, 2.0 * y);
        scatter += row * row.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lmax = eig.eigenvalues[order[5]].max(f64::MIN_POSITIVE);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > RANK_TOL * lmax).count();
    if rank < 5 {
        return Err(FitError::RankDeficient { rank });
    }
    let v = eig.eigenvectors.column(order[0]);
    let c = Conic::from_coeffs(v[0], v[1], v[2], v[3], v[4], v[5]);
    Ok(pull_back(c.matrix(), &t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when the relative objective decrease falls below this.
    pub rel_decrease_tol: f64,
    /// Stop when the parameter step norm falls below this.
    pub step_tol: f64,
    pub initial_damping: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 50, rel_decrease_tol: 1e-12, step_tol: 1e-12, initial_damping: 1e-3 }
    }
}

/// Result of [`fit_conic_geometric`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub conic: Conic,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub dropped_samples: usize,
}

/// Orthonormal basis of the complement of unit vector `c` (Householder).
fn tangent_basis(c: &Vector6<f64>) -> nalgebra::Matrix6x5<f64> {
    let k = c.iamax();
    let mut v = *c;
    v[k] += c[k].signum();
    let house = nalgebra::Matrix6::identity() - v * v.transpose() * (2.0 / v.norm_squared());
    let mut basis = nalgebra::Matrix6x5::zeros();
    let mut j = 0;
    for i in 0..6 {
        if i != k {
            basis.set_column(j, &house.column(i));
            j += 1;
        }
    }
    basis
}

fn coeff_vector(c: &Matrix3<f64>) -> Vector6<f64> {
    Vector6::new(c[(0, 0)], c[(1, 1)], c[(2, 2)], c[(0, 1)], c[(0, 2)], c[(1, 2)])
}

fn coeff_matrix(v: &Vector6<f64>) -> Matrix3<f64> {
    *Conic::from_coeffs(v[0], v[1], v[2], v[3], v[4], v[5]).matrix()
}

fn objective_at(pts: &[Vector3<f64>], c: &Matrix3<f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut dropped = 0;
    for p in pts {
        match evaluate(p, c, None) {
            Ok(e) => sum += e.residual * e.residual,
            Err(_) => dropped += 1,
        }
    }
    (sum, dropped)
}

/// Relative determinant that counts as a collapsed conic during iteration.
const COLLAPSE_TOL: f64 = 1e-10;

/// Minimize the summed polar-n-direction distance over proper conics,
/// starting at `init`. The returned objective never exceeds the initial one.
pub fn fit_conic_geometric(points: &EdgePointSet, init: &Conic, options: &FitOptions) -> Result<FitReport, FitError> {
    points.validate()?;
    let t = preconditioner(&points.points);
    let ti = t.try_inverse().expect("similarity is invertible");
    let pts = apply(&t, &points.points);
    // Conic in preconditioned coordinates: T⁻ᵀ C T⁻¹. Properness is judged
    // there, since pixel-frame determinants shrink with the offset.
    let mut c = coeff_vector(&(ti.transpose() * init.matrix() * ti));
    c /= c.norm();
    if !Conic::new(coeff_matrix(&c)).is_proper() {
        return Err(FitError::DegenerateInit);
    }

    let (mut cost, mut dropped) = objective_at(&pts, &coeff_matrix(&c));
    if dropped == pts.len() {
        return Err(FitError::AllSamplesDropped);
    }
    let initial = cost;
    let mut lambda = options.initial_damping;
    let mut iterations = 0;
    let mut converged = cost == 0.0;

    while !converged && iterations < options.max_iterations {
        iterations += 1;
        let cm = coeff_matrix(&c);
        let basis = tangent_basis(&c);
        let mut jtj = nalgebra::Matrix5::<f64>::zeros();
        let mut jtr = nalgebra::Vector5::<f64>::zeros();
        for p in &pts {
            let Ok(e) = evaluate(p, &cm, None) else { continue };
            let j = basis.transpose() * e.grad_coeffs(p);
            jtj += j * j.transpose();
            jtr += j * e.residual;
        }
        let diag = jtj.diagonal();
        let dmax = diag.max().max(f64::MIN_POSITIVE);

        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for i in 0..5 {
                a[(i, i)] += lambda * diag[i].max(1e-12 * dmax);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = c + basis * step;
            trial /= trial.norm();
            let tm = coeff_matrix(&trial);
            let (tcost, tdropped) = objective_at(&pts, &tm);
            if tdropped < pts.len() && tcost < cost {
                let rel = (cost - tcost) / cost.max(f64::MIN_POSITIVE);
                c = trial;
                cost = tcost;
                dropped = tdropped;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                let rd = Conic::new(tm).relative_det();
                if rd.abs() < COLLAPSE_TOL {
                    return Err(FitError::DegenerateCollapse);
                }
                if rel < options.rel_decrease_tol || step.norm() < options.step_tol || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            if step.norm() < options.step_tol {
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at this damping: a stationary point.
            converged = true;
        }
    }

    Ok(FitReport {
        conic: pull_back(&coeff_matrix(&c), &t),
        initial_objective: initial,
        final_objective: cost,
        iterations,
        converged,
        dropped_samples: dropped,
    })
}

/// Algebraic initialization followed by geometric refinement.
pub fn fit_conic(points: &EdgePointSet, options: &FitOptions) -> Result<FitReport, FitError> {
    let init = fit_conic_algebraic(points)?;
    fit_conic_geometric(points, &init, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{conic_transform, Conic};
    use nalgebra::{Matrix3, Vector2, Vector3};

    fn unit_circle() -> Conic {
        Conic::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)))
    }

    fn circle_points(cx: f64, cy: f64, r: f64, n: usize) -> EdgePointSet {
        EdgePointSet::from_xy(
            (0..n).map(|k| {
                let a = k as f64 * std::f64::consts::TAU / n as f64 + 0.1;
                (cx + r * a.cos(), cy + r * a.sin())
            }),
            0,
        )
    }

    #[test]
    fn terms_have_zero_third_row() {
        let c = Conic::new(Matrix3::new(2.0, 0.3, -0.7, 0.3, 1.5, 0.2, -0.7, 0.2, -3.0));
        let t = ConicDistanceTerms::new(&c);
        assert_eq!(t.cbar.row(2).norm(), 0.0);
        assert_eq!(t.g, c.matrix() * t.cbar);
    }

    #[test]
    fn branch_examples() {
        let c = unit_circle();
        let t = ConicDistanceTerms::new(&c);
        assert_eq!(t.g, Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)));
        assert_eq!(t.w, Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)));
        assert_eq!(branch_condition(&Point2H::new(2.0, 0.0, 1.0), &t, &c), Branch::Quadratic);
        assert_eq!(branch_condition(&Point2H::new(0.5, 0.0, 1.0), &t, &c), Branch::Quadratic);
        assert_eq!(branch_condition(&Point2H::new(0.6, 0.8, 1.0), &t, &c), Branch::Quadratic);
    }

    #[test]
    fn distance_hand_values() {
        let c = unit_circle();
        let d = polar_n_distance_sq(&Point2H::new(2.0, 0.0, 1.0), &c).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let d = polar_n_distance_sq(&Point2H::new(0.5, 0.0, 1.0), &c).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
        let d = polar_n_distance_sq(&Point2H::new(0.0, 1.0, 1.0), &c).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn linearized_branch_carries_quarter_weight() {
        // Hyperbola x² - y² = 1 at p = (0, 2): q = -5, g = 4, w = -4, g² < q w.
        let c = Conic::from_coeffs(1.0, -1.0, -1.0, 0.0, 0.0, 0.0);
        let p = Point2H::new(0.0, 2.0, 1.0);
        let t = ConicDistanceTerms::new(&c);
        assert_eq!(branch_condition(&p, &t, &c), Branch::Linearized);
        let d = polar_n_distance_sq(&p, &c).unwrap();
        assert!((d - 25.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn guard_rejects_center_point() {
        assert_eq!(polar_n_distance_sq(&Point2H::new(0.0, 0.0, 1.0), &unit_circle()), Err(FitError::GuardDegenerate));
    }

    #[test]
    fn distance_is_scale_invariant() {
        let c = Conic::new(Matrix3::new(2.0, 0.3, -0.7, 0.3, 1.5, 0.2, -0.7, 0.2, -3.0));
        let p = Point2H::euclidean(1.7, -0.4);
        let d = polar_n_distance_sq(&p, &c).unwrap();
        for s in [-3.0, 1e-4, 250.0] {
            let ds = polar_n_distance_sq(&p, &c.scaled(s)).unwrap();
            assert!((d - ds).abs() < 1e-12 * d.max(1.0));
        }
    }

    #[test]
    fn radial_distance_matches_euclidean_for_circle() {
        let c = Conic::circle(Vector2::new(1.0, 2.0), 3.0).unwrap();
        for rho in [0.2, 1.0, 2.9, 3.3, 7.0] {
            for a in [0.0, 1.0, 2.5] {
                let p = Point2H::euclidean(1.0 + rho * f64::cos(a), 2.0 + rho * f64::sin(a));
                let d = polar_n_distance_sq(&p, &c).unwrap();
                let exact = (rho - 3.0) * (rho - 3.0);
                assert!((d - exact).abs() < 1e-10 * exact.max(1.0), "rho {rho}: {d} vs {exact}");
            }
        }
    }

    #[test]
    fn residual_gradients_match_finite_differences() {
        let c = Conic::new(Matrix3::new(2.0, 0.3, -0.7, 0.3, 1.5, 0.2, -0.7, 0.2, -3.0));
        let h = 1e-6;
        for p in [Vector3::new(1.7, -0.4, 1.0), Vector3::new(0.2, 0.1, 1.0), Vector3::new(-2.0, 1.5, 1.0)] {
            let e = evaluate(&p, c.matrix(), None).unwrap();
            let gp = e.grad_point(c.matrix());
            for i in 0..2 {
                let mut d = Vector3::zeros();
                d[i] = h;
                let rp = evaluate(&(p + d), c.matrix(), Some(e.branch)).unwrap().residual;
                let rm = evaluate(&(p - d), c.matrix(), Some(e.branch)).unwrap().residual;
                let fd = (rp - rm) / (2.0 * h);
                assert!((fd - gp[i]).abs() < 1e-6 * (1.0 + fd.abs()), "point grad {i}: {fd} vs {}", gp[i]);
            }
            let gc = e.grad_coeffs(&p);
            let base = coeff_vector(c.matrix());
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let rp = evaluate(&p, &coeff_matrix(&(base + d)), Some(e.branch)).unwrap().residual;
                let rm = evaluate(&p, &coeff_matrix(&(base - d)), Some(e.branch)).unwrap().residual;
                let fd = (rp - rm) / (2.0 * h);
                assert!((fd - gc[k]).abs() < 1e-6 * (1.0 + fd.abs()), "coeff grad {k}: {fd} vs {}", gc[k]);
            }
        }
    }

    #[test]
    fn algebraic_fit_exact_circles() {
        let c = fit_conic_algebraic(&circle_points(0.0, 0.0, 1.0, 8)).unwrap();
        assert!(c.canonical_distance(&unit_circle()) < 1e-9);
        let c = fit_conic_algebraic(&circle_points(3.0, 0.0, 1.0, 8)).unwrap();
        let expected = Conic::new(Matrix3::new(1.0, 0.0, -3.0, 0.0, 1.0, 0.0, -3.0, 0.0, 8.0));
        assert!(c.canonical_distance(&expected) < 1e-9);
    }

    #[test]
    fn algebraic_fit_errors() {
        let few = EdgePointSet::from_xy([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], 0);
        assert_eq!(fit_conic_algebraic(&few), Err(FitError::TooFewPoints { needed: 6, got: 3 }));
        let line = EdgePointSet::from_xy((0..10).map(|i| (i as f64, 2.0 * i as f64 + 1.0)), 0);
        assert!(matches!(fit_conic_algebraic(&line), Err(FitError::RankDeficient { .. })));
        let mut bad = circle_points(0.0, 0.0, 1.0, 8);
        bad.points[3] = Point2H::euclidean(f64::NAN, 0.0);
        assert_eq!(fit_conic_algebraic(&bad), Err(FitError::NonFinitePoint(3)));
    }

    #[test]
    fn geometric_fit_fixed_point_on_exact_data() {
        let pts = circle_points(0.0, 0.0, 1.0, 16);
        let init = unit_circle();
        let rep = fit_conic_geometric(&pts, &init, &FitOptions::default()).unwrap();
        assert!(rep.conic.canonical_distance(&init) < 1e-12);
        assert!(rep.final_objective <= rep.initial_objective);
    }

    #[test]
    fn geometric_fit_recovers_from_perturbed_init() {
        let pts = circle_points(0.0, 0.0, 1.0, 16);
        let truth = unit_circle().canonical();
        let perturbed = Conic::new(truth.matrix() + Matrix3::from_element(1e-3));
        let rep = fit_conic_geometric(&pts, &perturbed, &FitOptions::default()).unwrap();
        assert!(rep.conic.canonical_distance(&truth) < 1e-8, "{}", rep.conic.canonical_distance(&truth));
        assert!(rep.final_objective <= rep.initial_objective);
    }

    #[test]
    fn geometric_fit_rejects_degenerate_init() {
        let pts = circle_points(0.0, 0.0, 1.0, 16);
        let init = Conic::new(Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)));
        assert_eq!(fit_conic_geometric(&pts, &init, &FitOptions::default()), Err(FitError::DegenerateInit));
    }

    #[test]
    fn fit_is_equivariant_under_isometry() {
        // Points on a perspective image of a circle, then moved rigidly.
        let h = Matrix3::new(1.2, 0.1, 4.0, -0.2, 0.8, 1.0, 0.03, -0.02, 1.0);
        let base = conic_transform(&Conic::circle(Vector2::new(0.5, 0.2), 2.0).unwrap(), &h).unwrap();
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 40.0;
                let w = h * Vector3::new(0.5 + 2.0 * a.cos(), 0.2 + 2.0 * a.sin(), 1.0);
                // deterministic off-conic wiggle so the fit is not exact
                let wiggle = 0.01 * (3.0 * a).sin();
                (w.x / w.z + wiggle, w.y / w.z - wiggle)
            })
            .collect();
        let fit = fit_conic(&EdgePointSet::from_xy(pts.clone(), 0), &FitOptions::default()).unwrap();
        assert!(fit.conic.canonical_distance(&base) < 1e-2);
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let iso = Matrix3::new(c, -s, 12.0, s, c, -5.0, 0.0, 0.0, 1.0);
        let moved: Vec<(f64, f64)> = pts
            .iter()
            .map(|&(x, y)| {
                let v = iso * Vector3::new(x, y, 1.0);
                (v.x, v.y)
            })
            .collect();
        let fit2 = fit_conic(&EdgePointSet::from_xy(moved, 0), &FitOptions::default()).unwrap();
        let expected = conic_transform(&fit.conic, &iso).unwrap();
        assert!(fit2.conic.canonical_distance(&expected) < 1e-8, "{}", fit2.conic.canonical_distance(&expected));
    }
}
