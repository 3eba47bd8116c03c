//! Synthetic frames with known pose, and the evaluation protocol run over
//! them (noise, blur and distance sweeps, timing, trajectories).

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edges::color_rgb;
use crate::geometry::{conic_transform, CameraIntrinsics, Conic, GeometryError, Pose};
use crate::image::{gaussian_blur, GrayImage};
use crate::marker::MarkerSpec;
use crate::tracking::{
    predict_regions, track_frame, FrameOutcome, FrameResult, PipelineOptions, StageTimings, TrackerState,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("marker not fully inside the {width}x{height} frame")]
    OutOfFrame { width: usize, height: usize },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Camera placement: distance to the marker centroid, view direction inside
/// a cone around the marker normal, uniform roll.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSampler {
    pub distance_min: f64,
    pub distance_max: f64,
    pub cone_deg: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self { distance_min: 0.6, distance_max: 0.6, cone_deg: 45.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    /// Supersampling factor per axis on edge pixels.
    pub supersample: usize,
    pub background: f64,
    /// Clamp to `[0, 1]` after noise.
    pub clamp: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { supersample: 4, background: 1.0, clamp: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub spec: MarkerSpec,
    pub k: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub pose_sampler: PoseSampler,
    pub noise_variance: f64,
    pub blur_sigma: f64,
    pub trials: usize,
    pub rng_seed: u64,
    /// A trial whose optical-center error exceeds this fraction of the true
    /// camera distance counts as failed.
    pub gross_error_fraction: f64,
    pub render: RenderOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            spec: MarkerSpec::two_circles(0.05, 0.15),
            k: default_intrinsics(),
            width: 640,
            height: 480,
            pose_sampler: PoseSampler::default(),
            noise_variance: 0.0,
            blur_sigma: 0.0,
            trials: 100,
            rng_seed: 0,
            gross_error_fraction: 0.1,
            render: RenderOptions::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        let s = &self.pose_sampler;
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad("noise_variance must be >= 0");
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return bad("blur_sigma must be >= 0");
        }
        if self.trials < 1 {
            return bad("trials must be >= 1");
        }
        if self.width < 16 || self.height < 16 {
            return bad("frame must be at least 16x16");
        }
        if !(s.distance_min > 0.0 && s.distance_max >= s.distance_min) {
            return bad("distance range must satisfy 0 < min <= max");
        }
        if !(s.cone_deg >= 0.0 && s.cone_deg < 90.0) {
            return bad("cone_deg must be in [0, 90)");
        }
        if self.render.supersample < 1 {
            return bad("supersample must be >= 1");
        }
        if !(self.gross_error_fraction > 0.0) {
            return bad("gross_error_fraction must be > 0");
        }
        self.spec.validate().map_err(|e| SimError::Invalid(e.to_string()))
    }
}

/// 640×480 camera with a 600 px focal length.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 319.5, 239.5, 0.0).expect("valid intrinsics")
}

/// RNG for trial `trial` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

struct Layer {
    c: Matrix3<f64>,
    color: [f32; 3],
    bounds: [f64; 4],
}

/// Per-circle colors when the marker names one known color per circle.
fn circle_colors(spec: &MarkerSpec) -> Option<Vec<[f32; 3]>> {
    if spec.colors.len() != spec.circles.len() {
        return None;
    }
    spec.colors.iter().map(|c| color_rgb(c)).collect()
}

fn layers(spec: &MarkerSpec, pose: &Pose, k: &CameraIntrinsics) -> Result<Vec<Layer>, SimError> {
    let h = pose.plane_homography(k);
    let gray = |f: f64| [f as f32; 3];
    let colors = circle_colors(spec);
    let mut discs: Vec<(Vector2<f64>, f64, [f32; 3])> = spec
        .circles
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let col = colors.as_ref().map_or(gray(c.fill), |v| v[i]);
            (Vector2::new(c.center[0], c.center[1]), c.radius, col)
        })
        .collect();
    // Painter's order: larger discs first, dots last.
    discs.sort_by(|a, b| b.1.total_cmp(&a.1));
    discs.extend(
        spec.features
            .iter()
            .filter(|f| f.radius > 0.0)
            .map(|f| (Vector2::new(f.position[0], f.position[1]), f.radius, gray(f.fill))),
    );
    let mut out = Vec::new();
    for (center, radius, color) in discs {
        let img = conic_transform(&Conic::circle(center, radius)?, &h)?;
        let m = img.matrix();
        let bounds =
            img.ellipse_bounds().ok_or_else(|| SimError::Invalid("projected disc is not an ellipse".into()))?;
        let e = img.ellipse_center().expect("ellipse");
        let v = Vector3::new(e.x, e.y, 1.0);
        // Negative inside.
        let s = if (v.transpose() * m * v)[0] < 0.0 { 1.0 } else { -1.0 };
        out.push(Layer { c: m * s, color, bounds });
    }
    Ok(out)
}

/// Whether every disc of the marker projects in front of the camera and at
/// least `margin` pixels inside the frame.
pub fn marker_in_frame(
    spec: &MarkerSpec,
    pose: &Pose,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    margin: f64,
) -> bool {
    match predict_regions(pose, spec, k, 0.0) {
        Ok(regions) => regions.iter().all(|r| {
            r.x0 >= margin
                && r.y0 >= margin
                && r.x1 <= width as f64 - 1.0 - margin
                && r.y1 <= height as f64 - 1.0 - margin
        }),
        Err(_) => false,
    }
}

/// Anti-aliased rendering of the marker, then blur, then additive noise.
#[allow(clippy::too_many_arguments)]
pub fn render<R: Rng + ?Sized>(
    spec: &MarkerSpec,
    pose: &Pose,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    noise_variance: f64,
    blur_sigma: f64,
    rng: &mut R,
    opts: &RenderOptions,
) -> Result<GrayImage, SimError> {
    if !marker_in_frame(spec, pose, k, width, height, 0.0) {
        return Err(SimError::OutOfFrame { width, height });
    }
    let layers = layers(spec, pose, k)?;
    let bg = [opts.background as f32; 3];
    let n = opts.supersample.max(1);
    let shade = |x: f64, y: f64| {
        let p = Vector3::new(x, y, 1.0);
        layers.iter().rev().find(|l| (p.transpose() * l.c * p)[0] < 0.0).map_or(bg, |l| l.color)
    };
    let mut rgb = vec![bg; width * height];
    let x0 = layers.iter().map(|l| l.bounds[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let y0 = layers.iter().map(|l| l.bounds[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let x1 = (layers.iter().map(|l| l.bounds[2]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize + 1).min(width - 1);
    let y1 = (layers.iter().map(|l| l.bounds[3]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize + 1).min(height - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (fx, fy) = (x as f64, y as f64);
            let p = Vector3::new(fx, fy, 1.0);
            // Near an edge when the first-order distance is under a pixel.
            let near = layers.iter().any(|l| {
                if fx < l.bounds[0] - 1.0 || fx > l.bounds[2] + 1.0 || fy < l.bounds[1] - 1.0 || fy > l.bounds[3] + 1.0
                {
                    return false;
                }
                let cp = l.c * p;
                let f = p.dot(&cp);
                f.abs() < 2.0 * cp.xy().norm()
            });
            rgb[y * width + x] = if near {
                let mut acc = [0f32; 3];
                for j in 0..n {
                    for i in 0..n {
                        let dx = (i as f64 + 0.5) / n as f64 - 0.5;
                        let dy = (j as f64 + 0.5) / n as f64 - 0.5;
                        let c = shade(fx + dx, fy + dy);
                        acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                    }
                }
                acc.map(|a| a / (n * n) as f32)
            } else {
                shade(fx, fy)
            };
        }
    }
    let color = circle_colors(spec).is_some();
    let channels = if color { 3 } else { 1 };
    let normal = if noise_variance > 0.0 {
        Some(Normal::new(0.0, noise_variance.sqrt()).map_err(|e| SimError::Invalid(e.to_string()))?)
    } else {
        None
    };
    let mut planes = Vec::with_capacity(channels);
    for ch in 0..channels {
        let data = rgb.iter().map(|c| c[ch]).collect();
        let mut plane = gaussian_blur(&GrayImage { width, height, data, rgb: None }, blur_sigma).data;
        if let Some(normal) = &normal {
            for v in plane.iter_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
        if opts.clamp {
            plane.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        planes.push(plane);
    }
    let img = if color {
        let px = (0..width * height).map(|i| [planes[0][i], planes[1][i], planes[2][i]]).collect();
        GrayImage::from_rgb(width, height, px).expect("buffer matches dimensions")
    } else {
        GrayImage { width, height, data: planes.pop().expect("one plane"), rgb: None }
    };
    Ok(img)
}

/// Centroid of the marker circles on the plane.
pub fn marker_centroid(spec: &MarkerSpec) -> Vector3<f64> {
    let n = spec.circles.len() as f64;
    let s = spec.circles.iter().fold(Vector2::zeros(), |a, c| a + Vector2::new(c.center[0], c.center[1]));
    Vector3::new(s.x / n, s.y / n, 0.0)
}

/// Camera at `center` looking at `target`, rotated by `roll` about the view
/// axis.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, roll: f64) -> Result<Pose, GeometryError> {
    let f = (target - center).normalize();
    let a = if f.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let x = (a - f * a.dot(&f)).normalize();
    let y = f.cross(&x);
    let (s, c) = roll.sin_cos();
    let xr = x * c + y * s;
    let yr = f.cross(&xr);
    let cam_to_world = Matrix3::from_columns(&[xr, yr, f]);
    let r = cam_to_world.transpose();
    Pose::new(r, -(r * center))
}

/// Camera center direction from polar angle `theta` off the marker normal
/// and azimuth `phi`.
fn view_position(target: &Vector3<f64>, distance: f64, theta: f64, phi: f64) -> Vector3<f64> {
    target + distance * Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

/// Draw a pose whose marker image lies at least `margin` pixels inside the
/// frame; gives up after 1000 draws.
pub fn sample_pose<R: Rng + ?Sized>(
    sampler: &PoseSampler,
    spec: &MarkerSpec,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    margin: f64,
    rng: &mut R,
) -> Result<Pose, SimError> {
    let target = marker_centroid(spec);
    let cos_max = sampler.cone_deg.to_radians().cos();
    for _ in 0..1000 {
        let d = sampler.distance_min + (sampler.distance_max - sampler.distance_min) * rng.random::<f64>();
        let cos_t = 1.0 - (1.0 - cos_max) * rng.random::<f64>();
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        let roll = std::f64::consts::TAU * rng.random::<f64>();
        let pose = look_at(&view_position(&target, d, cos_t.acos(), phi), &target, roll)?;
        if marker_in_frame(spec, &pose, k, width, height, margin) {
            return Ok(pose);
        }
    }
    Err(SimError::OutOfFrame { width, height })
}

/// Distance between the optical centers of the two poses.
pub fn localization_error(est: &Pose, gt: &Pose) -> f64 {
    (est.camera_center() - gt.camera_center()).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub trial: usize,
    pub gt_pose: Pose,
    pub est_pose: Option<Pose>,
    pub analytic_pose: Option<Pose>,
    pub loc_error: Option<f64>,
    pub analytic_error: Option<f64>,
    pub rot_error: Option<f64>,
    pub failed: bool,
    pub reason: Option<String>,
    /// Refinement cost never increased between accepted steps.
    pub cost_monotone: bool,
    pub iterations: usize,
    pub timing: StageTimings,
}

fn render_margin(blur: f64) -> f64 {
    4.0 + 3.0 * blur
}

/// Render and track trial `trial` of the scenario.
pub fn run_trial(cfg: &ScenarioConfig, trial: usize, opts: &PipelineOptions) -> Result<EvalRecord, SimError> {
    let mut rng = trial_rng(cfg.rng_seed, trial as u64);
    let gt = sample_pose(
        &cfg.pose_sampler,
        &cfg.spec,
        &cfg.k,
        cfg.width,
        cfg.height,
        render_margin(cfg.blur_sigma),
        &mut rng,
    )?;
    let img = render(
        &cfg.spec,
        &gt,
        &cfg.k,
        cfg.width,
        cfg.height,
        cfg.noise_variance,
        cfg.blur_sigma,
        &mut rng,
        &cfg.render,
    )?;
    let state = TrackerState::new(cfg.spec.clone(), cfg.k);
    let (out, _) = track_frame(&state, &img, trial, opts);
    Ok(evaluate(cfg, trial, &gt, &out))
}

fn evaluate(cfg: &ScenarioConfig, trial: usize, gt: &Pose, out: &FrameOutcome) -> EvalRecord {
    match out {
        FrameOutcome::Tracked(r) => {
            let err = localization_error(&r.pose, gt);
            let distance = (gt.camera_center() - marker_centroid(&cfg.spec)).norm();
            let gross = !(err <= cfg.gross_error_fraction * distance);
            let monotone = r.report.cost_history.windows(2).all(|w| w[1] <= w[0]);
            EvalRecord {
                trial,
                gt_pose: *gt,
                est_pose: Some(r.pose),
                analytic_pose: Some(r.analytic_pose),
                loc_error: (!gross).then_some(err),
                analytic_error: Some(localization_error(&r.analytic_pose, gt)),
                rot_error: Some(r.pose.rotation_angle_to(gt)),
                failed: gross,
                reason: gross.then(|| format!("gross error {err:.4} m")),
                cost_monotone: monotone,
                iterations: r.report.iterations,
                timing: r.timing,
            }
        }
        FrameOutcome::Skipped { reason, timing, .. } => EvalRecord {
            trial,
            gt_pose: *gt,
            est_pose: None,
            analytic_pose: None,
            loc_error: None,
            analytic_error: None,
            rot_error: None,
            failed: true,
            reason: Some(reason.to_string()),
            cost_monotone: true,
            iterations: 0,
            timing: *timing,
        },
    }
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("thread pool")
}

/// All trials of a scenario, ordered by trial index.
pub fn run_trials(cfg: &ScenarioConfig, opts: &PipelineOptions, jobs: usize) -> Result<Vec<EvalRecord>, SimError> {
    cfg.validate()?;
    pool(jobs).install(|| (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t, opts)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Noise,
    Blur,
    Distance,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise",
            SweepAxis::Blur => "blur",
            SweepAxis::Distance => "distance",
        }
    }

    /// The scenario with this axis set to `value`.
    pub fn apply(self, base: &ScenarioConfig, value: f64) -> ScenarioConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::Noise => c.noise_variance = value,
            SweepAxis::Blur => c.blur_sigma = value,
            SweepAxis::Distance => {
                c.pose_sampler.distance_min = value;
                c.pose_sampler.distance_max = value;
            }
        }
        c
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "noise" => Ok(SweepAxis::Noise),
            "blur" => Ok(SweepAxis::Blur),
            "distance" => Ok(SweepAxis::Distance),
            _ => Err(format!("unknown axis '{s}' (expected noise, blur or distance)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub median_loc_error: f64,
    pub mean_loc_error: f64,
    pub median_analytic_error: f64,
    pub mean_analytic_error: f64,
    pub median_rot_error: f64,
    pub mean_frame_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub records: Vec<Vec<EvalRecord>>,
}

impl SweepResult {
    /// Rank correlation between axis value and median error.
    pub fn spearman(&self) -> f64 {
        let x: Vec<f64> = self.rows.iter().map(|r| r.value).collect();
        let y: Vec<f64> = self.rows.iter().map(|r| r.median_loc_error).collect();
        spearman(&x, &y)
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        f64::NAN
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn summarize(value: f64, records: &[EvalRecord]) -> SweepRow {
    let ok: Vec<&EvalRecord> = records.iter().filter(|r| !r.failed).collect();
    let loc: Vec<f64> = ok.iter().filter_map(|r| r.loc_error).collect();
    let ana: Vec<f64> = ok.iter().filter_map(|r| r.analytic_error).collect();
    let rot: Vec<f64> = ok.iter().filter_map(|r| r.rot_error).collect();
    let ms: Vec<f64> = records.iter().map(|r| r.timing.total).collect();
    let failures = records.len() - ok.len();
    SweepRow {
        value,
        trials: records.len(),
        failures,
        failure_rate: failures as f64 / records.len().max(1) as f64,
        median_loc_error: median(&loc),
        mean_loc_error: mean(&loc),
        median_analytic_error: median(&ana),
        mean_analytic_error: mean(&ana),
        median_rot_error: median(&rot),
        mean_frame_ms: mean(&ms),
    }
}

/// Run the scenario at each axis value. Values must be ascending.
pub fn run_sweep(
    base: &ScenarioConfig,
    axis: SweepAxis,
    values: &[f64],
    opts: &PipelineOptions,
    jobs: usize,
) -> Result<SweepResult, SimError> {
    if values.is_empty() {
        return Err(SimError::Invalid("no sweep values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] < w[0]) {
        return Err(SimError::Invalid("sweep values must be finite and sorted ascending".into()));
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &v in values {
        let cfg = axis.apply(base, v);
        let recs = run_trials(&cfg, opts, jobs)?;
        rows.push(summarize(v, &recs));
        records.push(recs);
    }
    Ok(SweepResult { axis, rows, records })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut s = String::from(
        "value,trials,failures,failure_rate,median_loc_error,mean_loc_error,median_analytic_error,mean_analytic_error,median_rot_error,mean_frame_ms\n",
    );
    for r in &result.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:.4}",
            r.value,
            r.trials,
            r.failures,
            r.failure_rate,
            r.median_loc_error,
            r.mean_loc_error,
            r.median_analytic_error,
            r.mean_analytic_error,
            r.median_rot_error,
            r.mean_frame_ms
        );
    }
    s
}

pub fn records_csv(result: &SweepResult) -> String {
    let mut s = String::from("value,trial,failed,loc_error,analytic_error,rot_error,iterations,total_ms,reason\n");
    for (row, recs) in result.rows.iter().zip(&result.records) {
        for r in recs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4},{}",
                row.value,
                r.trial,
                r.failed as u8,
                fmt_opt(r.loc_error),
                fmt_opt(r.analytic_error),
                fmt_opt(r.rot_error),
                r.iterations,
                r.timing.total,
                r.reason.as_deref().unwrap_or("").replace(',', ";")
            );
        }
    }
    s
}

/// Two-column `value y` text, one line per axis value.
pub fn plot_data(result: &SweepResult, y: impl Fn(&SweepRow) -> f64) -> String {
    let mut s = format!("# {} value\n", result.axis.name());
    for r in &result.rows {
        let _ = writeln!(s, "{} {:e}", r.value, y(r));
    }
    s
}

/// Write `<axis>_sweep.csv`, `<axis>_records.csv`, the `.dat` curves and
/// `summary.json` into `dir`.
pub fn write_sweep(dir: &Path, result: &SweepResult, cfg: &ScenarioConfig) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let a = result.axis.name();
    std::fs::write(dir.join(format!("{a}_sweep.csv")), sweep_csv(result))?;
    std::fs::write(dir.join(format!("{a}_records.csv")), records_csv(result))?;
    std::fs::write(dir.join(format!("{a}_median_error.dat")), plot_data(result, |r| r.median_loc_error))?;
    std::fs::write(dir.join(format!("{a}_median_analytic_error.dat")), plot_data(result, |r| r.median_analytic_error))?;
    std::fs::write(dir.join(format!("{a}_failure_rate.dat")), plot_data(result, |r| r.failure_rate))?;
    std::fs::write(dir.join(format!("{a}_frame_ms.dat")), plot_data(result, |r| r.mean_frame_ms))?;
    let summary = serde_json::json!({
        "axis": a,
        "trials_per_value": cfg.trials,
        "seed": cfg.rng_seed,
        "rows": result.rows,
        "spearman_median_error": result.spearman(),
        "total_failures": result.rows.iter().map(|r| r.failures).sum::<usize>(),
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")
}

/// Smooth camera path around the marker: one azimuth turn with slowly
/// varying tilt, distance and roll.
pub fn orbit_poses(cfg: &ScenarioConfig, frames: usize) -> Result<Vec<Pose>, SimError> {
    let target = marker_centroid(&cfg.spec);
    let s = &cfg.pose_sampler;
    let (mid, amp) = (0.5 * (s.distance_min + s.distance_max), 0.5 * (s.distance_max - s.distance_min));
    let tilt_max = s.cone_deg.to_radians();
    let tau = std::f64::consts::TAU;
    (0..frames)
        .map(|i| {
            let u = i as f64 / frames.max(1) as f64;
            let theta = tilt_max * (0.55 + 0.25 * (2.0 * tau * u).sin());
            let d = mid + amp * (tau * u).sin();
            let roll = 0.3 * (tau * u).sin();
            let pose = look_at(&view_position(&target, d, theta, tau * u), &target, roll)?;
            if !marker_in_frame(&cfg.spec, &pose, &cfg.k, cfg.width, cfg.height, render_margin(cfg.blur_sigma)) {
                return Err(SimError::OutOfFrame { width: cfg.width, height: cfg.height });
            }
            Ok(pose)
        })
        .collect()
}

/// Render frame `i` of a sequence with its own RNG stream.
pub fn render_frame(cfg: &ScenarioConfig, pose: &Pose, i: usize) -> Result<GrayImage, SimError> {
    let mut rng = trial_rng(cfg.rng_seed, i as u64);
    render(&cfg.spec, pose, &cfg.k, cfg.width, cfg.height, cfg.noise_variance, cfg.blur_sigma, &mut rng, &cfg.render)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub tracked: usize,
    /// Per stage, in `StageTimings::NAMES` order, over tracked frames.
    pub stages: Vec<(&'static str, StageStats)>,
    pub fps: f64,
    pub outcomes: Vec<FrameOutcome>,
    pub gt: Vec<Pose>,
}

impl BenchReport {
    pub fn mean_total_ms(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.1.mean)
    }

    pub fn max_error(&self) -> f64 {
        self.outcomes
            .iter()
            .zip(&self.gt)
            .filter_map(|(o, g)| o.result().map(|r| localization_error(&r.pose, g)))
            .fold(0.0, f64::max)
    }

    /// One line per stage plus a throughput line.
    pub fn table(&self) -> String {
        let mut s = String::from("stage,min_ms,mean_ms,max_ms\n");
        for (n, st) in &self.stages {
            let _ = writeln!(s, "{n},{:.4},{:.4},{:.4}", st.min, st.mean, st.max);
        }
        s
    }
}

/// Track an orbit sequence, timing only the pipeline (rendering excluded).
pub fn run_bench(cfg: &ScenarioConfig, frames: usize, opts: &PipelineOptions) -> Result<BenchReport, SimError> {
    cfg.validate()?;
    if frames == 0 {
        return Err(SimError::Invalid("frames must be >= 1".into()));
    }
    let gt = orbit_poses(cfg, frames)?;
    let mut state = TrackerState::new(cfg.spec.clone(), cfg.k);
    let mut outcomes = Vec::with_capacity(frames);
    for (i, pose) in gt.iter().enumerate() {
        let img = render_frame(cfg, pose, i)?;
        let (out, next) = track_frame(&state, &img, i, opts);
        state = next;
        outcomes.push(out);
    }
    let tracked: Vec<&FrameResult> = outcomes.iter().filter_map(|o| o.result()).collect();
    let stages = StageTimings::NAMES
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let v: Vec<f64> = tracked.iter().map(|r| r.timing.values()[k]).collect();
            let st = StageStats {
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                mean: mean(&v),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            (*n, st)
        })
        .collect::<Vec<_>>();
    let total: f64 = outcomes.iter().map(|o| o.timing().total).sum();
    Ok(BenchReport {
        frames,
        tracked: tracked.len(),
        stages,
        fps: if total > 0.0 { frames as f64 * 1e3 / total } else { f64::INFINITY },
        outcomes,
        gt,
    })
}

/// One trajectory row: frame index, optical center, camera orientation in
/// the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub index: usize,
    pub center: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl TrajectoryRow {
    pub fn from_pose(index: usize, pose: &Pose) -> Self {
        let mut q = pose.world_orientation();
        if q.w < 0.0 {
            q = UnitQuaternion::new_unchecked(-q.into_inner());
        }
        Self { index, center: pose.camera_center(), orientation: q }
    }

    pub fn to_pose(&self) -> Result<Pose, GeometryError> {
        let r = self.orientation.to_rotation_matrix().into_inner().transpose();
        Pose::new(r, -(r * self.center))
    }
}

/// `index cx cy cz qx qy qz qw` per tracked frame.
pub fn export_trajectory(results: &[FrameResult]) -> String {
    let rows: Vec<TrajectoryRow> = results.iter().map(|r| TrajectoryRow::from_pose(r.frame_index, &r.pose)).collect();
    format_trajectory(&rows)
}

pub fn format_trajectory(rows: &[TrajectoryRow]) -> String {
    let mut s = String::new();
    for row in rows {
        let q = row.orientation.quaternion();
        let c = row.center;
        let _ = writeln!(s, "{} {} {} {} {} {} {} {}", row.index, c.x, c.y, c.z, q.i, q.j, q.k, q.w);
    }
    s
}

pub fn parse_trajectory(text: &str) -> Result<Vec<TrajectoryRow>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(format!("line {}: expected 8 fields, found {}", n + 1, f.len()));
        }
        let index = f[0].parse::<usize>().map_err(|e| format!("line {}: {e}", n + 1))?;
        let v = f[1..]
            .iter()
            .map(|x| x.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("line {}: {e}", n + 1))?;
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        if !((q.norm() - 1.0).abs() < 1e-9) {
            return Err(format!("line {}: quaternion is not unit length", n + 1));
        }
        out.push(TrajectoryRow {
            index,
            center: Vector3::new(v[0], v[1], v[2]),
            orientation: UnitQuaternion::new_unchecked(q),
        });
    }
    Ok(out)
}
