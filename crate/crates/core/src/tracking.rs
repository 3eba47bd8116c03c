//! Per-frame tracking: edges, conic fits, observation, analytic pose,
//! refinement and next-frame region prediction.

use std::time::Instant;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{normalize_point, solve_pose_normalized, PoseError};
use crate::edges::{extract_edges, EdgeError, EdgeOptions, Region};
use crate::fit::{fit_conic, EdgePointSet, FitError, FitOptions};
use crate::geometry::{conic_transform, CameraIntrinsics, Conic, GeometryError, Point2H, Pose};
use crate::image::GrayImage;
use crate::marker::{resolve_observation, Detection, MarkerError, MarkerObservation, MarkerSpec, PinState};
use crate::refine::{
    refine, total_cost, RefineError, RefineOptions, RefinementProblem, RefinementReport, DEFAULT_SAMPLES_PER_CIRCLE,
};

pub const DEFAULT_DILATION: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error(transparent)]
    Edges(#[from] EdgeError),
    #[error("conic fit failed for chain {chain}: {source}")]
    Fit { chain: usize, source: FitError },
    #[error(transparent)]
    Marker(#[from] MarkerError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("frame unreadable: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub samples_per_circle: usize,
    pub dilation: f64,
    /// Run the LM refinement; off gives analytic-only poses.
    pub refine: bool,
    pub lm: RefineOptions,
    pub fit_max_iterations: usize,
    pub fit_rel_decrease_tol: f64,
    pub edges: EdgeOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            samples_per_circle: DEFAULT_SAMPLES_PER_CIRCLE,
            dilation: DEFAULT_DILATION,
            refine: true,
            lm: RefineOptions::default(),
            fit_max_iterations: fit.max_iterations,
            fit_rel_decrease_tol: fit.rel_decrease_tol,
            edges: EdgeOptions::default(),
        }
    }
}

impl PipelineOptions {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iterations: self.fit_max_iterations,
            rel_decrease_tol: self.fit_rel_decrease_tol,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub spec: MarkerSpec,
    pub k: CameraIntrinsics,
    pub last_pose: Option<Pose>,
    pub pin_state: Option<PinState>,
    pub predicted_regions: Vec<Region>,
}

impl TrackerState {
    pub fn new(spec: MarkerSpec, k: CameraIntrinsics) -> Self {
        Self { spec, k, last_pose: None, pin_state: None, predicted_regions: Vec::new() }
    }

    /// Drop all history; the next frame is searched in full.
    pub fn reset(&mut self) {
        self.last_pose = None;
        self.pin_state = None;
        self.predicted_regions.clear();
    }
}

/// Stage durations in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub extract: f64,
    pub fit: f64,
    pub resolve: f64,
    pub analytic: f64,
    pub refine: f64,
    pub predict: f64,
    pub total: f64,
}

impl StageTimings {
    pub const NAMES: [&'static str; 7] = ["extract", "fit", "resolve", "analytic", "refine", "predict", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.extract, self.fit, self.resolve, self.analytic, self.refine, self.predict, self.total]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_index: usize,
    pub pose: Pose,
    pub analytic_pose: Pose,
    pub report: RefinementReport,
    /// Fitted conics in pixel coordinates, in marker circle order.
    pub conics: Vec<Conic>,
    pub observation: MarkerObservation,
    /// Whether the frame was searched inside predicted regions only.
    pub gated: bool,
    pub timing: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    Tracked(Box<FrameResult>),
    Skipped { frame_index: usize, reason: TrackError, timing: StageTimings },
}

impl FrameOutcome {
    pub fn frame_index(&self) -> usize {
        match self {
            FrameOutcome::Tracked(r) => r.frame_index,
            FrameOutcome::Skipped { frame_index, .. } => *frame_index,
        }
    }

    pub fn result(&self) -> Option<&FrameResult> {
        match self {
            FrameOutcome::Tracked(r) => Some(r),
            FrameOutcome::Skipped { .. } => None,
        }
    }

    pub fn timing(&self) -> &StageTimings {
        match self {
            FrameOutcome::Tracked(r) => &r.timing,
            FrameOutcome::Skipped { timing, .. } => timing,
        }
    }
}

/// Pixel-space detection: one edge chain per circle plus feature points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeDetection {
    pub chains: Vec<EdgePointSet>,
    pub classes: Vec<Option<usize>>,
    pub features: Vec<Point2H>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Bounding regions of the projected circles (and feature dots), dilated.
pub fn predict_regions(
    pose: &Pose,
    spec: &MarkerSpec,
    k: &CameraIntrinsics,
    dilation: f64,
) -> Result<Vec<Region>, RefineError> {
    let h = pose.plane_homography(k);
    let r = &pose.rotation;
    let (a, b) = (r[(2, 0)], r[(2, 1)]);
    let discs = spec
        .circles
        .iter()
        .map(|c| (c.center, c.radius))
        .chain(spec.features.iter().filter(|f| f.radius > 0.0).map(|f| (f.position, f.radius)));
    let mut out = Vec::new();
    for (c, rad) in discs {
        // Smallest depth over the disc.
        let zmin = a * c[0] + b * c[1] + pose.translation.z - rad * a.hypot(b);
        if zmin <= 0.0 {
            return Err(RefineError::BehindCamera(zmin));
        }
        let img = conic_transform(&Conic::circle(Vector2::new(c[0], c[1]), rad)?, &h).map_err(RefineError::Geometry)?;
        let bb = img.ellipse_bounds().ok_or(RefineError::BehindCamera(zmin))?;
        out.push(Region { x0: bb[0] - dilation, y0: bb[1] - dilation, x1: bb[2] + dilation, y1: bb[3] + dilation });
    }
    Ok(out)
}

/// Steps 2 to 4 on pixel-space edge chains: fit, resolve, solve and refine.
/// Timings for those stages are written into `timing`.
pub fn track_detection(
    state: &TrackerState,
    det: &EdgeDetection,
    opts: &PipelineOptions,
    timing: &mut StageTimings,
) -> Result<(Pose, Pose, RefinementReport, Vec<Conic>, MarkerObservation), TrackError> {
    let k = &state.k;
    let t = Instant::now();
    let fit_opts = opts.fit_options();
    let mut pixel_conics = Vec::with_capacity(det.chains.len());
    for (i, chain) in det.chains.iter().enumerate() {
        let rep = fit_conic(chain, &fit_opts).map_err(|e| TrackError::Fit { chain: i, source: e })?;
        pixel_conics.push(rep.conic);
    }
    timing.fit = ms(t);

    let t = Instant::now();
    let kinv = k.inverse_matrix();
    let mut normalized = Vec::with_capacity(pixel_conics.len());
    for c in &pixel_conics {
        // Conic in normalized coordinates: Kᵀ C K.
        normalized.push(conic_transform(c, &kinv)?);
    }
    let features = det.features.iter().map(|p| normalize_point(p, k)).collect::<Result<Vec<_>, _>>()?;
    let detection = Detection { conics: normalized, classes: det.classes.clone(), features };
    let observation = resolve_observation(&state.spec, &detection, state.pin_state.as_ref())?;
    timing.resolve = ms(t);

    let t = Instant::now();
    let sol = solve_pose_normalized(&observation.m0, &observation.m1, &observation.l_inf, state.spec.l_x)?;
    timing.analytic = ms(t);

    let t = Instant::now();
    let ordered: Vec<Conic> = observation.circle_order.iter().map(|&i| pixel_conics[i]).collect();
    let problem = RefinementProblem::new(state.spec.clone(), ordered.clone(), *k, opts.samples_per_circle, sol.pose)?;
    let report = if opts.refine {
        refine(&problem, &opts.lm)?
    } else {
        let (cost, dropped) = total_cost(&sol.pose, &problem)?;
        RefinementReport {
            pose: sol.pose,
            initial_cost: cost,
            final_cost: cost,
            iterations: 0,
            converged: true,
            dropped_samples: dropped,
            cost_history: vec![cost],
        }
    };
    timing.refine = ms(t);
    Ok((report.pose, sol.pose, report, ordered, observation))
}

fn detect(
    state: &TrackerState,
    img: &GrayImage,
    regions: Option<&[Region]>,
    opts: &PipelineOptions,
) -> Result<EdgeDetection, EdgeError> {
    let ex = extract_edges(img, regions, &state.spec, &opts.edges)?;
    Ok(EdgeDetection {
        classes: ex.chains.iter().map(|c| c.class).collect(),
        chains: ex.chains.into_iter().map(|c| c.points).collect(),
        features: ex.features,
    })
}

/// Process one frame. Inside the predicted regions when the state has them,
/// falling back to a full-image search if the gated pass fails. On failure
/// the returned state is reset.
pub fn track_frame(
    state: &TrackerState,
    img: &GrayImage,
    frame_index: usize,
    opts: &PipelineOptions,
) -> (FrameOutcome, TrackerState) {
    let start = Instant::now();
    let mut timing = StageTimings::default();
    let mut next = state.clone();

    let attempt = |regions: Option<&[Region]>, timing: &mut StageTimings| {
        let t = Instant::now();
        let det = detect(state, img, regions, opts);
        timing.extract += ms(t);
        track_detection(state, &det?, opts, timing)
    };
    let gated = !state.predicted_regions.is_empty();
    let mut result =
        if gated { attempt(Some(&state.predicted_regions), &mut timing) } else { attempt(None, &mut timing) };
    let mut used_gate = gated;
    if gated && result.is_err() {
        result = attempt(None, &mut timing);
        used_gate = false;
    }

    let outcome = match result {
        Ok((pose, analytic_pose, report, conics, observation)) => {
            let t = Instant::now();
            match predict_regions(&pose, &state.spec, &state.k, opts.dilation) {
                Ok(regions) => {
                    next.last_pose = Some(pose);
                    next.pin_state = Some(observation.pin_state);
                    next.predicted_regions = regions;
                }
                Err(_) => next.reset(),
            }
            timing.predict = ms(t);
            timing.total = ms(start);
            FrameOutcome::Tracked(Box::new(FrameResult {
                frame_index,
                pose,
                analytic_pose,
                report,
                conics,
                observation,
                gated: used_gate,
                timing,
            }))
        }
        Err(reason) => {
            next.reset();
            timing.total = ms(start);
            FrameOutcome::Skipped { frame_index, reason, timing }
        }
    };
    (outcome, next)
}

/// Convenience wrapper holding the state and frame counter.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub state: TrackerState,
    pub options: PipelineOptions,
    next_index: usize,
}

impl Tracker {
    pub fn new(spec: MarkerSpec, k: CameraIntrinsics, options: PipelineOptions) -> Self {
        Self { state: TrackerState::new(spec, k), options, next_index: 0 }
    }

    pub fn process(&mut self, img: &GrayImage) -> FrameOutcome {
        let (out, next) = track_frame(&self.state, img, self.next_index, &self.options);
        self.state = next;
        self.next_index += 1;
        out
    }

    /// Record a frame that could not be read; the state is reset.
    pub fn skip(&mut self, reason: String) -> FrameOutcome {
        self.state.reset();
        let out = FrameOutcome::Skipped {
            frame_index: self.next_index,
            reason: TrackError::Input(reason),
            timing: StageTimings::default(),
        };
        self.next_index += 1;
        out
    }
}
