//! Levenberg-Marquardt pose refinement against the fitted image conics.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{evaluate, Branch};
use crate::geometry::{exp_so3, left_jacobian_so3, skew, CameraIntrinsics, Conic, GeometryError, Point2H, Pose};
use crate::marker::MarkerSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("point at depth {0:.3e} is not in front of the camera")]
    BehindCamera(f64),
    #[error("every sample hit the distance guard")]
    AllSamplesDropped,
    #[error("invalid refinement problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const DEFAULT_SAMPLES_PER_CIRCLE: usize = 64;
pub const MIN_SAMPLES_PER_CIRCLE: usize = 8;

/// How the rotation increment is charted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    /// `R ← Exp(δ) R` re-centered after every accepted step.
    #[default]
    Recentered,
    /// `R = Exp(φ) R0` with `φ` accumulated around the initial rotation.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_decrease_tol: f64,
    /// Stop once the cost per sample drops below this (squared pixels).
    pub abs_cost_tol: f64,
    pub chart: Chart,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-3,
            rel_decrease_tol: 1e-10,
            abs_cost_tol: 1e-24,
            chart: Chart::Recentered,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementProblem {
    pub spec: MarkerSpec,
    /// One pixel-frame conic per marker circle, in spec order.
    pub conics: Vec<Conic>,
    pub k: CameraIntrinsics,
    pub samples_per_circle: usize,
    pub pose0: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementReport {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: bool,
    pub dropped_samples: usize,
    /// Cost before the first step and after every accepted step.
    pub cost_history: Vec<f64>,
}

/// Pixel projection of a world point, `w = 1`.
pub fn project_point(x: &Vector3<f64>, k: &CameraIntrinsics, pose: &Pose) -> Result<Point2H, RefineError> {
    let xc = pose.transform(x);
    if !(xc.z > 0.0) {
        return Err(RefineError::BehindCamera(xc.z));
    }
    let p = k.matrix() * xc;
    Ok(Point2H::new(p.x / p.z, p.y / p.z, 1.0))
}

/// `n` equally spaced world points on circle `index` of the marker.
pub fn sample_circle_points(spec: &MarkerSpec, index: usize, n: usize) -> Vec<Vector3<f64>> {
    let c = &spec.circles[index];
    (0..n)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / n as f64;
            Vector3::new(c.center[0] + c.radius * th.cos(), c.center[1] + c.radius * th.sin(), 0.0)
        })
        .collect()
}

/// World samples paired with the index of their conic.
#[derive(Debug, Clone)]
pub struct Samples {
    points: Vec<(usize, Vector3<f64>)>,
}

impl RefinementProblem {
    pub fn new(
        spec: MarkerSpec,
        conics: Vec<Conic>,
        k: CameraIntrinsics,
        samples_per_circle: usize,
        pose0: Pose,
    ) -> Result<Self, RefineError> {
        let p = Self { spec, conics, k, samples_per_circle, pose0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.conics.len() != self.spec.circles.len() {
            return Err(RefineError::InvalidProblem(format!(
                "{} conics for {} circles",
                self.conics.len(),
                self.spec.circles.len()
            )));
        }
        if self.samples_per_circle < MIN_SAMPLES_PER_CIRCLE {
            return Err(RefineError::InvalidProblem(format!(
                "samples_per_circle must be at least {MIN_SAMPLES_PER_CIRCLE}, got {}",
                self.samples_per_circle
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> Samples {
        let points = (0..self.spec.circles.len())
            .flat_map(|i| sample_circle_points(&self.spec, i, self.samples_per_circle).into_iter().map(move |x| (i, x)))
            .collect();
        Samples { points }
    }
}

/// Cost at a pose and the number of samples dropped by the guard.
pub fn total_cost(pose: &Pose, problem: &RefinementProblem) -> Result<(f64, usize), RefineError> {
    cost_at(pose, problem, &problem.samples())
}

fn cost_at(pose: &Pose, problem: &RefinementProblem, samples: &Samples) -> Result<(f64, usize), RefineError> {
    let mut cost = 0.0;
    let mut dropped = 0;
    for (i, x) in &samples.points {
        let p = project_point(x, &problem.k, pose)?;
        match evaluate(p.coords(), problem.conics[*i].matrix(), None) {
            Ok(e) => cost += e.residual * e.residual,
            Err(_) => dropped += 1,
        }
    }
    if dropped == samples.points.len() {
        return Err(RefineError::AllSamplesDropped);
    }
    Ok((cost, dropped))
}

/// Residuals, Jacobian rows and the branch of every kept sample.
pub type Linearization = (Vec<f64>, Vec<SVector<f64, 6>>, Vec<Option<Branch>>);

/// Residuals and their Jacobian with respect to the 6 chart parameters
/// `(δω, δt)` at `pose`. `phi` is the accumulated fixed-chart rotation (zero
/// for the re-centered chart). Rows of dropped samples are omitted. When
/// `branches` is given, it pins the distance branch of every kept sample.
pub fn residuals_and_jacobian(
    pose: &Pose,
    problem: &RefinementProblem,
    samples: &Samples,
    phi: &Vector3<f64>,
    branches: Option<&[Option<Branch>]>,
) -> Result<Linearization, RefineError> {
    let km = problem.k.matrix();
    let jl = left_jacobian_so3(phi);
    let mut res = Vec::with_capacity(samples.points.len());
    let mut jac = Vec::with_capacity(samples.points.len());
    let mut used = Vec::with_capacity(samples.points.len());
    for (s, (i, x)) in samples.points.iter().enumerate() {
        let rx = pose.rotation * x;
        let xc = rx + pose.translation;
        if !(xc.z > 0.0) {
            return Err(RefineError::BehindCamera(xc.z));
        }
        let ph = km * xc;
        let p = Vector3::new(ph.x / ph.z, ph.y / ph.z, 1.0);
        let forced = branches.and_then(|b| b[s]);
        let c = problem.conics[*i].matrix();
        let Ok(e) = evaluate(&p, c, forced) else {
            used.push(None);
            continue;
        };
        let gp = e.grad_point(c);
        // d(x, y)/dXc = (K[0..2] - p e3ᵀ K) / z, with K's last row (0, 0, 1).
        let mut dp = Matrix2x3::zeros();
        for r in 0..2 {
            for col in 0..3 {
                dp[(r, col)] = (km[(r, col)] - p[r] * km[(2, col)]) / xc.z;
            }
        }
        let g = dp.transpose() * gp.xy();
        let d_omega = -skew(&rx) * jl;
        let jrot = d_omega.transpose() * g;
        res.push(e.residual);
        jac.push(Vector6::new(jrot.x, jrot.y, jrot.z, g.x, g.y, g.z));
        used.push(Some(e.branch));
    }
    if res.is_empty() {
        return Err(RefineError::AllSamplesDropped);
    }
    Ok((res, jac, used))
}

fn apply_step(
    base: &Pose,
    rot0: &Matrix3<f64>,
    phi: &Vector3<f64>,
    delta: &Vector6<f64>,
    chart: Chart,
) -> (Pose, Vector3<f64>) {
    let dw = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let (rotation, phi) = match chart {
        Chart::Recentered => (exp_so3(&dw) * base.rotation, *phi),
        Chart::Fixed => {
            let phi = phi + dw;
            (exp_so3(&phi) * rot0, phi)
        }
    };
    (Pose { rotation, translation: base.translation + dt }, phi)
}

/// Minimize the summed squared distance between projected circle samples and
/// their fitted conics.
pub fn refine(problem: &RefinementProblem, options: &RefineOptions) -> Result<RefinementReport, RefineError> {
    problem.validate()?;
    let samples = problem.samples();
    let n = samples.points.len() as f64;
    let rot0 = problem.pose0.rotation;
    let mut pose = problem.pose0;
    let mut phi = Vector3::zeros();
    let (mut cost, mut dropped) = cost_at(&pose, problem, &samples)?;
    if !cost.is_finite() {
        return Err(RefineError::InvalidProblem("cost is not finite at the initial pose".into()));
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = options.initial_damping;
    let mut accepted = 0;
    let mut converged = false;

    for _ in 0..options.max_iterations {
        if cost <= options.abs_cost_tol * n {
            converged = true;
            break;
        }
        let (res, jac, _) = residuals_and_jacobian(&pose, problem, &samples, &phi, None)?;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (r, j) in res.iter().zip(&jac) {
            jtj += j * j.transpose();
            jtr += j * *r;
        }
        if jtr.amax() == 0.0 {
            converged = true;
            break;
        }

        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let (trial, trial_phi) = apply_step(&pose, &rot0, &phi, &delta, options.chart);
            match cost_at(&trial, problem, &samples) {
                Ok((c, d)) if c < cost => {
                    let rel = (cost - c) / cost;
                    pose = trial;
                    phi = trial_phi;
                    cost = c;
                    dropped = d;
                    history.push(c);
                    accepted += 1;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    if rel < options.rel_decrease_tol {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            // Damping saturated without a decrease: at a minimum to precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    if !converged && cost <= options.abs_cost_tol * n {
        converged = true;
    }
    pose.rotation = crate::geometry::nearest_rotation(&pose.rotation);
    Ok(RefinementReport {
        pose,
        initial_cost,
        final_cost: cost,
        iterations: accepted,
        converged,
        dropped_samples: dropped,
        cost_history: history,
    })
}
